//! Spatial and temporal operators over channel-last feature maps.
//!
//! Spatial ops accept `[..., h, w, c]`; any leading axes are treated as a
//! batch. All convolutions zero-pad to keep "same" extents.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

struct Hwc {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
}

fn hwc(x: &Tensor, op: &'static str) -> Result<Hwc> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(Error::shape(op, format!("expected [.., h, w, c], got {s:?}")));
    }
    let r = s.len();
    Ok(Hwc {
        batch: s[..r - 3].iter().product(),
        h: s[r - 3],
        w: s[r - 2],
        c: s[r - 1],
    })
}

fn with_spatial(shape: &[usize], h: usize, w: usize, c: usize) -> Vec<usize> {
    let r = shape.len();
    let mut out = shape[..r - 3].to_vec();
    out.extend_from_slice(&[h, w, c]);
    out
}

/// Per-axis interpolation taps: output index -> ((i0, w0), (i1, w1)).
fn bilinear_taps(n: usize, factor: usize) -> Vec<((usize, f64), (usize, f64))> {
    (0..n * factor)
        .map(|o| {
            // half-pixel centres: src = (o + 0.5) / f - 0.5, clamped to the grid
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let t = src - i0 as f64;
            ((i0, 1.0 - t), (i1, t))
        })
        .collect()
}

fn nearest_taps(n: usize, factor: usize) -> Vec<((usize, f64), (usize, f64))> {
    (0..n * factor).map(|o| ((o / factor, 1.0), (o / factor, 0.0))).collect()
}

impl Tensor {
    /// Same-padded 2-D cross-correlation with stride 1.
    /// `self`: `[.., h, w, cin]`, `kernel`: `[s, s, cin, cout]` with odd `s`.
    pub fn conv2d(&self, kernel: &Tensor) -> Result<Tensor> {
        self.conv2d_strided(kernel, 1)
    }

    /// Zero-padded cross-correlation sampling every `stride`-th position;
    /// output extents are `ceil(h / stride) x ceil(w / stride)`.
    pub fn conv2d_strided(&self, kernel: &Tensor, stride: usize) -> Result<Tensor> {
        let Hwc { batch, h, w, c: cin } = hwc(self, "conv2d")?;
        let (s, kcin, cout) = match *kernel.shape() {
            [a, b, ci, co] if a == b && a % 2 == 1 => (a, ci, co),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be [s, s, cin, cout] with odd s, got {:?}", kernel.shape()),
                ))
            }
        };
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let geo = ConvGeometry {
            batch,
            h,
            w,
            cin,
            cout,
            s,
            stride,
            ho: h.div_ceil(stride),
            wo: w.div_ceil(stride),
        };
        let out = geo.forward(self.data(), kernel.data());
        let shape = with_spatial(self.shape(), geo.ho, geo.wo, cout);
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), kernel.clone()],
            move |g, _, ps| {
                let (gx, gk) = geo.backward(
                    g,
                    ps[0].data(),
                    ps[1].data(),
                    ps[0].requires_grad(),
                    ps[1].requires_grad(),
                );
                vec![gx, gk]
            },
        ))
    }

    /// Convolution along the leading (time) axis only.
    /// `self`: `[T, .., c]`, `kernel`: `[3, c, c]`; zero-padded ends.
    pub fn temporal_conv1d(&self, kernel: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::shape("temporal_conv1d", format!("expected [T, .., c], got {s:?}")));
        }
        let t_len = s[0];
        let c = s[s.len() - 1];
        let sites: usize = s[1..s.len() - 1].iter().product();
        if kernel.shape() != [3, c, c] {
            return Err(Error::shape(
                "temporal_conv1d",
                format!("kernel {:?} for {c} channels", kernel.shape()),
            ));
        }
        let frame = sites * c;
        let x = self.data();
        let k = kernel.data();
        let mut out = vec![0.0; x.len()];
        for t in 0..t_len {
            for tap in 0..3 {
                let Some(src) = (t + tap).checked_sub(1).filter(|&u| u < t_len) else {
                    continue;
                };
                let kt = &k[tap * c * c..(tap + 1) * c * c];
                for site in 0..sites {
                    let xs = &x[src * frame + site * c..src * frame + (site + 1) * c];
                    let os = &mut out[t * frame + site * c..t * frame + (site + 1) * c];
                    for (ci, &xv) in xs.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        os.iter_mut()
                            .zip(&kt[ci * c..(ci + 1) * c])
                            .for_each(|(o, kv)| *o += xv * kv);
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone(), kernel.clone()],
            move |g, _, ps| {
                let (x, k) = (ps[0].data(), ps[1].data());
                let mut gx = ps[0].requires_grad().then(|| vec![0.0; x.len()]);
                let mut gk = ps[1].requires_grad().then(|| vec![0.0; k.len()]);
                for t in 0..t_len {
                    for tap in 0..3 {
                        let Some(src) = (t + tap).checked_sub(1).filter(|&u| u < t_len) else {
                            continue;
                        };
                        for site in 0..sites {
                            let go = &g[t * frame + site * c..t * frame + (site + 1) * c];
                            let xoff = src * frame + site * c;
                            for ci in 0..c {
                                let krow = &k[(tap * c + ci) * c..(tap * c + ci + 1) * c];
                                if let Some(gx) = gx.as_mut() {
                                    gx[xoff + ci] += go.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(gk) = gk.as_mut() {
                                    let xv = x[xoff + ci];
                                    if xv != 0.0 {
                                        gk[(tap * c + ci) * c..(tap * c + ci + 1) * c]
                                            .iter_mut()
                                            .zip(go)
                                            .for_each(|(a, b)| *a += xv * b);
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, gk]
            },
        ))
    }

    /// `[.., h, w, d²] -> [.., h·d, w·d, 1]`; channel `c` lands on sub-pixel
    /// offset `(c / d, c % d)`.
    pub fn pixel_shuffle(&self) -> Result<Tensor> {
        let Hwc { batch, h, w, c } = hwc(self, "pixel_shuffle")?;
        let d = exact_sqrt(c).ok_or(Error::NotSquare(c))?;
        let map = shuffle_map(batch, h, w, d);
        let mut out = vec![0.0; self.numel()];
        for (src, &dst) in map.iter().enumerate() {
            out[dst] = self.data()[src];
        }
        let shape = with_spatial(self.shape(), h * d, w * d, 1);
        Ok(Tensor::from_op(shape, out, vec![self.clone()], move |g, _, _| {
            vec![Some(map.iter().map(|&dst| g[dst]).collect())]
        }))
    }

    /// Inverse of [`Tensor::pixel_shuffle`]: `[.., h·d, w·d, 1] -> [.., h, w, d²]`.
    pub fn pixel_unshuffle(&self, d: usize) -> Result<Tensor> {
        let Hwc { batch, h, w, c } = hwc(self, "pixel_unshuffle")?;
        if c != 1 || d == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::shape(
                "pixel_unshuffle",
                format!("{:?} with d = {d}", self.shape()),
            ));
        }
        let map = shuffle_map(batch, h / d, w / d, d);
        let out = map.iter().map(|&src| self.data()[src]).collect();
        let shape = with_spatial(self.shape(), h / d, w / d, d * d);
        let n = self.numel();
        Ok(Tensor::from_op(shape, out, vec![self.clone()], move |g, _, _| {
            let mut gx = vec![0.0; n];
            for (i, &src) in map.iter().enumerate() {
                gx[src] = g[i];
            }
            vec![Some(gx)]
        }))
    }

    /// Spatial upsampling by 2 or 4. Bilinear uses half-pixel centres
    /// (align-corners = false) with edge clamping.
    pub fn upsample(&self, factor: usize, mode: UpsampleMode) -> Result<Tensor> {
        if factor != 2 && factor != 4 {
            return Err(Error::shape("upsample", format!("factor {factor} not in {{2, 4}}")));
        }
        let Hwc { batch, h, w, c } = hwc(self, "upsample")?;
        if h == 0 || w == 0 {
            return Err(Error::shape("upsample", "empty spatial extent"));
        }
        let (ty, tx) = match mode {
            UpsampleMode::Bilinear => (bilinear_taps(h, factor), bilinear_taps(w, factor)),
            UpsampleMode::Nearest => (nearest_taps(h, factor), nearest_taps(w, factor)),
        };
        let (ho, wo) = (h * factor, w * factor);
        let x = self.data();
        let mut out = vec![0.0; batch * ho * wo * c];
        for b in 0..batch {
            let xb = &x[b * h * w * c..(b + 1) * h * w * c];
            for (oy, &((y0, wy0), (y1, wy1))) in ty.iter().enumerate() {
                for (ox, &((x0, wx0), (x1, wx1))) in tx.iter().enumerate() {
                    let o = &mut out[((b * ho + oy) * wo + ox) * c..((b * ho + oy) * wo + ox + 1) * c];
                    for &(yy, wy) in &[(y0, wy0), (y1, wy1)] {
                        for &(xx, wx) in &[(x0, wx0), (x1, wx1)] {
                            let wgt = wy * wx;
                            if wgt == 0.0 {
                                continue;
                            }
                            let src = &xb[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                            o.iter_mut().zip(src).for_each(|(o, s)| *o += wgt * s);
                        }
                    }
                }
            }
        }
        let shape = with_spatial(self.shape(), ho, wo, c);
        let n = self.numel();
        Ok(Tensor::from_op(shape, out, vec![self.clone()], move |g, _, _| {
            let mut gx = vec![0.0; n];
            for b in 0..batch {
                for (oy, &((y0, wy0), (y1, wy1))) in ty.iter().enumerate() {
                    for (ox, &((x0, wx0), (x1, wx1))) in tx.iter().enumerate() {
                        let go = &g[((b * ho + oy) * wo + ox) * c..((b * ho + oy) * wo + ox + 1) * c];
                        for &(yy, wy) in &[(y0, wy0), (y1, wy1)] {
                            for &(xx, wx) in &[(x0, wx0), (x1, wx1)] {
                                let wgt = wy * wx;
                                if wgt == 0.0 {
                                    continue;
                                }
                                let base = ((b * h + yy) * w + xx) * c;
                                gx[base..base + c]
                                    .iter_mut()
                                    .zip(go)
                                    .for_each(|(a, g)| *a += wgt * g);
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Non-overlapping `factor x factor` mean pooling.
    pub fn avg_pool(&self, factor: usize) -> Result<Tensor> {
        let Hwc { batch, h, w, c } = hwc(self, "avg_pool")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(
                "avg_pool",
                format!("{h}x{w} not divisible by {factor}"),
            ));
        }
        let (ho, wo) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let x = self.data();
        let mut out = vec![0.0; batch * ho * wo * c];
        for b in 0..batch {
            for y in 0..h {
                for xx in 0..w {
                    let src = &x[((b * h + y) * w + xx) * c..((b * h + y) * w + xx + 1) * c];
                    let base = ((b * ho + y / factor) * wo + xx / factor) * c;
                    out[base..base + c]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(o, s)| *o += s * norm);
                }
            }
        }
        let shape = with_spatial(self.shape(), ho, wo, c);
        let n = self.numel();
        Ok(Tensor::from_op(shape, out, vec![self.clone()], move |g, _, _| {
            let mut gx = vec![0.0; n];
            for b in 0..batch {
                for y in 0..h {
                    for xx in 0..w {
                        let base = ((b * ho + y / factor) * wo + xx / factor) * c;
                        let dst = ((b * h + y) * w + xx) * c;
                        for k in 0..c {
                            gx[dst + k] = g[base + k] * norm;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

fn exact_sqrt(c: usize) -> Option<usize> {
    let d = (c as f64).sqrt().round() as usize;
    (d * d == c && d > 0).then_some(d)
}

/// For each source element of a `[batch, h, w, d²]` map, its flat index in
/// the shuffled `[batch, h·d, w·d]` map.
fn shuffle_map(batch: usize, h: usize, w: usize, d: usize) -> Vec<usize> {
    let c = d * d;
    let (ho, wo) = (h * d, w * d);
    let mut map = Vec::with_capacity(batch * h * w * c);
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    let oy = y * d + k / d;
                    let ox = x * d + k % d;
                    map.push((b * ho + oy) * wo + ox);
                }
            }
        }
    }
    map
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    s: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    /// Input coordinate for output `o` and tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let p = self.s / 2;
        (o * self.stride + k).checked_sub(p).filter(|&i| i < n)
    }

    fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let Self { batch, h, w, cin, cout, s, ho, wo, .. } = *self;
        let mut out = vec![0.0; batch * ho * wo * cout];
        for b in 0..batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let obase = ((b * ho + oy) * wo + ox) * cout;
                    let o = &mut out[obase..obase + cout];
                    for ky in 0..s {
                        let Some(iy) = self.src(oy, ky, h) else { continue };
                        for kx in 0..s {
                            let Some(ix) = self.src(ox, kx, w) else { continue };
                            let xs = &x[((b * h + iy) * w + ix) * cin..((b * h + iy) * w + ix + 1) * cin];
                            let kbase = (ky * s + kx) * cin * cout;
                            for (ci, &xv) in xs.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let kr = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                                o.iter_mut().zip(kr).for_each(|(o, kv)| *o += xv * kv);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(
        &self,
        g: &[f64],
        x: &[f64],
        k: &[f64],
        want_x: bool,
        want_k: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let Self { batch, h, w, cin, cout, s, ho, wo, .. } = *self;
        let mut gx = want_x.then(|| vec![0.0; x.len()]);
        let mut gk = want_k.then(|| vec![0.0; k.len()]);
        for b in 0..batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let obase = ((b * ho + oy) * wo + ox) * cout;
                    let go = &g[obase..obase + cout];
                    if go.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for ky in 0..s {
                        let Some(iy) = self.src(oy, ky, h) else { continue };
                        for kx in 0..s {
                            let Some(ix) = self.src(ox, kx, w) else { continue };
                            let xbase = ((b * h + iy) * w + ix) * cin;
                            let kbase = (ky * s + kx) * cin * cout;
                            for ci in 0..cin {
                                let kr = kbase + ci * cout..kbase + (ci + 1) * cout;
                                if let Some(gx) = gx.as_mut() {
                                    gx[xbase + ci] +=
                                        go.iter().zip(&k[kr.clone()]).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(gk) = gk.as_mut() {
                                    let xv = x[xbase + ci];
                                    if xv != 0.0 {
                                        gk[kr].iter_mut().zip(go).for_each(|(a, g)| *a += xv * g);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (gx, gk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Direct scalar-loop cross-correlation, independent of `ConvGeometry`.
    fn conv_oracle(x: &[f64], h: usize, w: usize, cin: usize, k: &[f64], s: usize, cout: usize) -> Vec<f64> {
        let p = s as isize / 2;
        let mut out = vec![0.0; h * w * cout];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..s as isize {
                        for kx in 0..s as isize {
                            let (iy, ix) = (y + ky - p, xx + kx - p);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x[((iy as usize) * w + ix as usize) * cin + ci];
                                let kv = k[((ky as usize * s + kx as usize) * cin + ci) * cout + co];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((y as usize) * w + xx as usize) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[2, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(x.conv2d(&k).unwrap().data(), x.data());
    }

    #[test]
    fn conv_zero_kernel() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let k = Tensor::zeros(&[3, 3, 1, 4]);
        let y = x.conv2d(&k).unwrap();
        assert_eq!(y.shape(), &[2, 2, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_ones_on_ones() {
        let x = Tensor::full(&[3, 3, 1], 1.0);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = x.conv2d(&k).unwrap();
        let oracle = conv_oracle(x.data(), 3, 3, 1, k.data(), 3, 1);
        assert_eq!(y.data(), &oracle[..]);
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
    }

    #[test]
    fn conv_matches_oracle_random() {
        let x: Vec<f64> = (0..5 * 4 * 3).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let k: Vec<f64> = (0..9 * 3 * 2).map(|i| ((i * 104729) % 17) as f64 / 17.0 - 0.5).collect();
        let y = t(&[5, 4, 3], &x).conv2d(&t(&[3, 3, 3, 2], &k)).unwrap();
        let o = conv_oracle(&x, 5, 4, 3, &k, 3, 2);
        for (a, b) in y.data().iter().zip(&o) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[2, 2, 3]);
        let k = Tensor::zeros(&[3, 3, 2, 1]);
        assert!(matches!(x.conv2d(&k), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn strided_conv_halves_extent() {
        let x = Tensor::full(&[2, 6, 6, 1], 1.0);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = x.conv2d_strided(&k, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 1]);
        // output (0,0) samples input rows/cols -1..=1: 2x2 valid taps
        assert_eq!(y.data()[0], 4.0);
        // output (1,1) samples rows/cols 1..=3: all 9 valid
        assert_eq!(y.data()[4], 9.0);
    }

    #[test]
    fn strided_conv_gradients() {
        use crate::gradcheck::{self, random_tensor, weighted_sum};
        for (h, w) in [(4, 4), (5, 3), (6, 7)] {
            let x = random_tensor(&[2, h, w, 3], h as u64, 1.0);
            let k = random_tensor(&[3, 3, 3, 2], w as u64, 1.0);
            let r = gradcheck::check(&[x, k], |a| weighted_sum(&a[0].conv2d_strided(&a[1], 2)?, 1)).unwrap();
            assert!(r.max_rel_error() < 1e-6, "{h}x{w}: {:?}", r.rel_errors);
        }
    }

    fn eye(c: usize) -> Vec<f64> {
        (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn temporal_center_tap_identity() {
        let x = t(&[4, 2], &[1.0, -2.0, 3.0, 0.5, 7.0, 1.0, -4.0, 2.0]);
        let mut k = vec![0.0; 3 * 4];
        k[4..8].copy_from_slice(&eye(2));
        let y = x.temporal_conv1d(&t(&[3, 2, 2], &k)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn temporal_uniform_on_constant() {
        let x = Tensor::full(&[5, 1], 1.0);
        let k = Tensor::full(&[3, 1, 1], 1.0 / 3.0);
        let y = x.temporal_conv1d(&k).unwrap();
        // scalar loop: ends see two of three taps
        let oracle: Vec<f64> = (0..5)
            .map(|t: i32| {
                (-1..=1)
                    .filter(|d| (0..5).contains(&(t + d)))
                    .map(|_| 1.0 / 3.0)
                    .sum()
            })
            .collect();
        assert_eq!(y.data(), &oracle[..]);
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[2] - 1.0).abs() < 1e-15);
        assert!((y.data()[4] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn temporal_single_frame() {
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let mut k = vec![0.0; 27];
        k[9..18].copy_from_slice(&eye(3));
        assert_eq!(x.temporal_conv1d(&t(&[3, 3, 3], &k)).unwrap().data(), x.data());
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let y = x.pixel_shuffle().unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_d1_identity() {
        let x = t(&[2, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.pixel_shuffle().unwrap().data(), x.data());
    }

    #[test]
    fn pixel_shuffle_not_square() {
        let x = Tensor::zeros(&[2, 2, 3]);
        assert!(matches!(x.pixel_shuffle(), Err(Error::NotSquare(3))));
    }

    #[test]
    fn upsample_constant_invariant() {
        let x = Tensor::full(&[3, 2, 2], 0.7);
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            for f in [2, 4] {
                let y = x.upsample(f, mode).unwrap();
                assert_eq!(y.shape(), &[3 * f, 2 * f, 2]);
                assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn nearest_replicates_single_pixel() {
        let x = t(&[1, 1, 1], &[5.0]);
        assert_eq!(x.upsample(2, UpsampleMode::Nearest).unwrap().data(), &[5.0; 4]);
    }

    #[test]
    fn bilinear_closed_form_column() {
        let x = t(&[2, 1, 1], &[0.0, 1.0]);
        let y = x.upsample(2, UpsampleMode::Bilinear).unwrap();
        assert_eq!(y.shape(), &[4, 2, 1]);
        // closed form: src = (o + 0.5)/2 - 0.5 clamped to [0, 1]
        let expect: Vec<f64> = (0..4)
            .map(|o| ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0))
            .collect();
        assert_eq!(expect, vec![0.0, 0.25, 0.75, 1.0]);
        for row in 0..4 {
            assert_eq!(y.data()[row * 2], expect[row]);
            assert_eq!(y.data()[row * 2 + 1], expect[row]);
        }
    }

    #[test]
    fn upsample_rejects_factor_three() {
        assert!(Tensor::zeros(&[2, 2, 1]).upsample(3, UpsampleMode::Nearest).is_err());
    }

    #[test]
    fn avg_pool_means_blocks() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(x.avg_pool(2).unwrap().data(), &[3.0]);
    }
}
