//! Lifting low-resolution mask logits `M_l` (1/8 scale, `d²` channels) to
//! full-resolution single-channel logits.
//!
//! Per frame: `conv(M_l ⊕ F8)` → ReLU → bilinear ×2 → `⊕ F4` → conv →
//! bilinear ×4. `F4` comes from the raw frames: 4×4 mean pooling, a 3×3
//! stem with ReLU, then (temporal variant only) a width-3 convolution along
//! time at every spatial site.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, UpsampleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineKind {
    /// Pixel shuffle of `M_l` then bilinear resize to full resolution.
    None,
    /// Frame-independent `F4`.
    Baseline,
    /// Temporally convolved `F4`.
    Tcmr,
}

impl RefineKind {
    pub const ALL: [RefineKind; 3] = [RefineKind::None, RefineKind::Baseline, RefineKind::Tcmr];

    pub fn name(self) -> &'static str {
        match self {
            RefineKind::None => "none",
            RefineKind::Baseline => "baseline",
            RefineKind::Tcmr => "tcmr",
        }
    }
}

impl std::str::FromStr for RefineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RefineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown refiner `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct RefinerParams {
    /// `[3, 3, d² + C8, mid]`
    pub conv8: Tensor,
    pub conv8_bias: Tensor,
    /// `[3, 3, mid + C4, 1]`
    pub conv4: Tensor,
    pub conv4_bias: Tensor,
    /// `[3, 3, 3, C4]`
    pub f4_stem: Tensor,
    pub f4_stem_bias: Tensor,
    /// `[3, C4, C4]`
    pub f4_temporal: Tensor,
    pub mid: usize,
}

impl RefinerParams {
    pub fn c4(&self) -> usize {
        *self.f4_stem.shape().last().unwrap_or(&0)
    }
}

fn frames_dims(frames: &Tensor) -> Result<(usize, usize, usize)> {
    match *frames.shape() {
        [t, h, w, 3] if h % 4 == 0 && w % 4 == 0 => Ok((t, h, w)),
        _ => Err(Error::shape(
            "build_f4",
            format!("frames must be [T, H, W, 3] with H, W divisible by 4, got {:?}", frames.shape()),
        )),
    }
}

fn f4_spatial(frames: &Tensor, params: &RefinerParams) -> Result<Tensor> {
    frames_dims(frames)?;
    frames
        .avg_pool(4)?
        .conv2d(&params.f4_stem)?
        .add_lastdim(&params.f4_stem_bias)
        .map(|t| t.relu())
}

/// `F4` with the temporal convolution: `[T, H/4, W/4, C4]`.
pub fn build_f4(frames: &Tensor, params: &RefinerParams) -> Result<Tensor> {
    f4_spatial(frames, params)?.temporal_conv1d(&params.f4_temporal)
}

/// `F4` without the temporal convolution (each frame on its own).
pub fn build_f4_frame_independent(frames: &Tensor, params: &RefinerParams) -> Result<Tensor> {
    f4_spatial(frames, params)
}

fn refine_chain(m_l: &Tensor, f8: &Tensor, f4: &Tensor, params: &RefinerParams) -> Result<Tensor> {
    let dims = |x: &Tensor, name: &str| {
        <[usize; 4]>::try_from(x.shape())
            .map_err(|_| Error::shape("refine", format!("{name} must be rank 4, got {:?}", x.shape())))
    };
    let [t, h, w, _] = dims(m_l, "M_l")?;
    let [t8, h8, w8, _] = dims(f8, "F8")?;
    let [t4, h4, w4, _] = dims(f4, "F4")?;
    if (t8, h8, w8) != (t, h, w) || (t4, h4, w4) != (t, 2 * h, 2 * w) {
        return Err(Error::shape(
            "refine",
            format!("M_l {:?}, F8 {:?}, F4 {:?}", m_l.shape(), f8.shape(), f4.shape()),
        ));
    }
    let x = Tensor::concat_lastdim(&[m_l.clone(), f8.clone()])?
        .conv2d(&params.conv8)?
        .add_lastdim(&params.conv8_bias)?
        .relu()
        .upsample(2, UpsampleMode::Bilinear)?;
    let y = Tensor::concat_lastdim(&[x, f4.clone()])?
        .conv2d(&params.conv4)?
        .add_lastdim(&params.conv4_bias)?
        .upsample(4, UpsampleMode::Bilinear)?;
    y.reshape(&[t, 8 * h, 8 * w])
}

/// Temporal-context refinement; `f4` should come from [`build_f4`].
pub fn tcmr_refine(m_l: &Tensor, f8: &Tensor, f4: &Tensor, params: &RefinerParams) -> Result<Tensor> {
    refine_chain(m_l, f8, f4, params)
}

/// Same chain fed with frame-independent features from
/// [`build_f4_frame_independent`].
pub fn baseline_refine(m_l: &Tensor, f8: &Tensor, f4_novt: &Tensor, params: &RefinerParams) -> Result<Tensor> {
    refine_chain(m_l, f8, f4_novt, params)
}

/// Builds the matching `F4` and runs the chain for `kind`. With
/// [`RefineKind::None`], `params` is ignored and `M_l` is pixel-shuffled then
/// resized bilinearly to `8·h x 8·w`.
pub fn refine(
    kind: RefineKind,
    m_l: &Tensor,
    f8: &Tensor,
    frames: &Tensor,
    params: Option<&RefinerParams>,
    d: usize,
) -> Result<Tensor> {
    let need = || params.ok_or_else(|| Error::MissingParam("refiner".into()));
    match kind {
        RefineKind::None => shuffle_to_full(m_l, d),
        RefineKind::Baseline => {
            let p = need()?;
            baseline_refine(m_l, f8, &build_f4_frame_independent(frames, p)?, p)
        }
        RefineKind::Tcmr => {
            let p = need()?;
            tcmr_refine(m_l, f8, &build_f4(frames, p)?, p)
        }
    }
}

/// `[T, h, w, d²] -> [T, 8h, 8w]`: pixel shuffle to `d/8` scale, then
/// bilinear upsampling by the remaining `8/d`.
pub fn shuffle_to_full(m_l: &Tensor, d: usize) -> Result<Tensor> {
    let [t, h, w, _] = <[usize; 4]>::try_from(m_l.shape())
        .map_err(|_| Error::shape("shuffle_to_full", format!("{:?}", m_l.shape())))?;
    let mut x = m_l.pixel_shuffle()?;
    let mut remaining = match d {
        1 | 2 | 4 | 8 => 8 / d,
        _ => return Err(Error::ConfigInvalid(format!("upsampling rate {d} must divide 8"))),
    };
    while remaining > 1 {
        let f = if remaining % 4 == 0 { 4 } else { 2 };
        x = x.upsample(f, UpsampleMode::Bilinear)?;
        remaining /= f;
    }
    x.reshape(&[t, 8 * h, 8 * w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    pub(crate) fn random_params(d2: usize, c8: usize, mid: usize, c4: usize, seed: u64) -> RefinerParams {
        RefinerParams {
            conv8: random_tensor(&[3, 3, d2 + c8, mid], seed, 0.3),
            conv8_bias: random_tensor(&[mid], seed + 1, 0.3),
            conv4: random_tensor(&[3, 3, mid + c4, 1], seed + 2, 0.3),
            conv4_bias: random_tensor(&[1], seed + 3, 0.3),
            f4_stem: random_tensor(&[3, 3, 3, c4], seed + 4, 0.3),
            f4_stem_bias: random_tensor(&[c4], seed + 5, 0.3),
            f4_temporal: random_tensor(&[3, c4, c4], seed + 6, 0.5),
            mid,
        }
    }

    fn zero_params(d2: usize, c8: usize, mid: usize, c4: usize) -> RefinerParams {
        RefinerParams {
            conv8: Tensor::zeros(&[3, 3, d2 + c8, mid]),
            conv8_bias: Tensor::zeros(&[mid]),
            conv4: Tensor::zeros(&[3, 3, mid + c4, 1]),
            conv4_bias: Tensor::zeros(&[1]),
            f4_stem: Tensor::zeros(&[3, 3, 3, c4]),
            f4_stem_bias: Tensor::zeros(&[c4]),
            f4_temporal: Tensor::zeros(&[3, c4, c4]),
            mid,
        }
    }

    /// Identity 3×3 stem (3 -> 3 channels) and centre-tap identity in time.
    fn identity_f4_params() -> RefinerParams {
        let mut p = zero_params(4, 2, 2, 3);
        let mut stem = vec![0.0; 3 * 3 * 3 * 3];
        for c in 0..3 {
            stem[((1 * 3 + 1) * 3 + c) * 3 + c] = 1.0;
        }
        p.f4_stem = Tensor::new(&[3, 3, 3, 3], stem).unwrap();
        let mut tk = vec![0.0; 27];
        for c in 0..3 {
            tk[9 + c * 3 + c] = 1.0;
        }
        p.f4_temporal = Tensor::new(&[3, 3, 3], tk).unwrap();
        p
    }

    #[test]
    fn f4_shape() {
        let p = random_params(4, 2, 3, 5, 1);
        let frames = random_tensor(&[2, 16, 8, 3], 2, 1.0);
        assert_eq!(build_f4(&frames, &p).unwrap().shape(), &[2, 4, 2, 5]);
        assert!(build_f4(&random_tensor(&[2, 6, 8, 3], 2, 1.0), &p).is_err());
    }

    #[test]
    fn f4_constant_video_stays_constant() {
        let p = identity_f4_params();
        let frames = Tensor::full(&[3, 8, 8, 3], 0.4);
        let f4 = build_f4(&frames, &p).unwrap();
        // interior sites see the full 3x3 stem; identity stem only has a centre tap
        assert!(f4.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn f4_step_video_responds_only_where_frames_differ() {
        let mut p = identity_f4_params();
        // taps apply to t-1, t, t+1: [1, 0, -1]
        let mut tk = vec![0.0; 27];
        for c in 0..3 {
            tk[c * 3 + c] = 1.0;
            tk[18 + c * 3 + c] = -1.0;
        }
        p.f4_temporal = Tensor::new(&[3, 3, 3], tk).unwrap();
        let (t_len, h, w) = (6, 8, 8);
        let mut data = vec![0.3; t_len * h * w * 3];
        // frames 3.. brighten the top-left 4x4 block (one pooled cell)
        for t in 3..t_len {
            for y in 0..4 {
                for x in 0..4 {
                    for c in 0..3 {
                        data[((t * h + y) * w + x) * 3 + c] = 0.9;
                    }
                }
            }
        }
        let frames = Tensor::new(&[t_len, h, w, 3], data).unwrap();
        let f4 = build_f4(&frames, &p).unwrap();
        let pooled = frames.avg_pool(4).unwrap();
        // scalar oracle: x[t-1] - x[t+1] on the pooled (identity-stem) frames
        let site = 2 * 2 * 3;
        for t in 1..t_len - 1 {
            for i in 0..site {
                let expect = pooled.data()[(t - 1) * site + i] - pooled.data()[(t + 1) * site + i];
                let got = f4.data()[t * site + i];
                assert!((got - expect).abs() < 1e-15);
                let differs = i < 3 && (t == 2 || t == 3);
                assert_eq!(got.abs() > 1e-12, differs, "t={t} i={i}");
            }
        }
    }

    #[test]
    fn refine_shape_and_zero_params() {
        let (t, h, w, d2, c8) = (2, 2, 2, 16, 3);
        let m_l = random_tensor(&[t, h, w, d2], 1, 1.0);
        let f8 = random_tensor(&[t, h, w, c8], 2, 1.0);
        let frames = random_tensor(&[t, 16, 16, 3], 3, 1.0);
        let p = random_params(d2, c8, 4, 5, 9);
        let out = refine(RefineKind::Tcmr, &m_l, &f8, &frames, Some(&p), 4).unwrap();
        assert_eq!(out.shape(), &[2, 16, 16]);

        let z = zero_params(d2, c8, 4, 5);
        let out = refine(RefineKind::Tcmr, &m_l, &f8, &frames, Some(&z), 4).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refine_rejects_mismatched_scales() {
        let p = random_params(4, 2, 3, 5, 1);
        let m_l = random_tensor(&[2, 2, 2, 4], 1, 1.0);
        let f8 = random_tensor(&[2, 3, 2, 2], 2, 1.0);
        let f4 = random_tensor(&[2, 4, 4, 5], 3, 1.0);
        assert!(tcmr_refine(&m_l, &f8, &f4, &p).is_err());
    }

    #[test]
    fn static_video_baseline_equals_tcmr_with_identity_time_kernel() {
        let mut p = random_params(4, 2, 3, 5, 4);
        let mut tk = vec![0.0; 75];
        for c in 0..5 {
            tk[25 + c * 5 + c] = 1.0;
        }
        p.f4_temporal = Tensor::new(&[3, 5, 5], tk).unwrap();
        let frame = random_tensor(&[1, 16, 16, 3], 5, 1.0);
        let frames = Tensor::stack(&[frame.select(0).unwrap(), frame.select(0).unwrap(), frame.select(0).unwrap()]).unwrap();
        let m_l = random_tensor(&[3, 2, 2, 4], 6, 1.0);
        let f8 = random_tensor(&[3, 2, 2, 2], 7, 1.0);
        let a = refine(RefineKind::Tcmr, &m_l, &f8, &frames, Some(&p), 2).unwrap();
        let b = refine(RefineKind::Baseline, &m_l, &f8, &frames, Some(&p), 2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn moving_video_separates_baseline_from_tcmr() {
        let p = random_params(4, 2, 3, 5, 8);
        let frames = random_tensor(&[3, 16, 16, 3], 9, 1.0);
        let m_l = random_tensor(&[3, 2, 2, 4], 10, 1.0);
        let f8 = random_tensor(&[3, 2, 2, 2], 11, 1.0);
        let a = refine(RefineKind::Tcmr, &m_l, &f8, &frames, Some(&p), 2).unwrap();
        let b = refine(RefineKind::Baseline, &m_l, &f8, &frames, Some(&p), 2).unwrap();
        assert_eq!(b.shape(), &[3, 16, 16]);
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6);
    }

    fn permute_frames(x: &Tensor, perm: &[usize]) -> Tensor {
        Tensor::stack(&perm.iter().map(|&i| x.select(i).unwrap()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn baseline_is_frame_local_and_tcmr_is_not() {
        let p = random_params(4, 2, 3, 5, 12);
        let frames = random_tensor(&[3, 16, 16, 3], 13, 1.0);
        let m_l = random_tensor(&[3, 2, 2, 4], 14, 1.0);
        let f8 = random_tensor(&[3, 2, 2, 2], 15, 1.0);
        let perm = [2, 0, 1];
        let run = |kind, fr: &Tensor, m: &Tensor, f: &Tensor| refine(kind, m, f, fr, Some(&p), 2).unwrap();
        let base = run(RefineKind::Baseline, &frames, &m_l, &f8);
        let base_p = run(
            RefineKind::Baseline,
            &permute_frames(&frames, &perm),
            &permute_frames(&m_l, &perm),
            &permute_frames(&f8, &perm),
        );
        assert_eq!(base_p.data(), permute_frames(&base, &perm).data());

        let tc = run(RefineKind::Tcmr, &frames, &m_l, &f8);
        let tc_p = run(
            RefineKind::Tcmr,
            &permute_frames(&frames, &perm),
            &permute_frames(&m_l, &perm),
            &permute_frames(&f8, &perm),
        );
        assert_ne!(tc_p.data(), permute_frames(&tc, &perm).data());
    }

    #[test]
    fn upscale_factor_is_eight_for_every_d() {
        for d in [1usize, 2, 4, 8] {
            let p = random_params(d * d, 2, 3, 4, 20);
            let m_l = random_tensor(&[1, 3, 2, d * d], 21, 1.0);
            let f8 = random_tensor(&[1, 3, 2, 2], 22, 1.0);
            let frames = random_tensor(&[1, 24, 16, 3], 23, 1.0);
            for kind in RefineKind::ALL {
                let out = refine(kind, &m_l, &f8, &frames, Some(&p), d).unwrap();
                assert_eq!(out.shape(), &[1, 24, 16]);
            }
        }
    }
}
