use super::{check_same_shape, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    fn unary<F, D>(&self, f: F, df: D) -> Tensor
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g, out, ps| {
            let x = ps[0].data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .zip(out)
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect(),
            )]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.unary(|x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary(|x| x + s, |_, _| 1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(stable_sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(sigmoid(x))`, computed without overflow for large `|x|`.
    pub fn log_sigmoid(&self) -> Tensor {
        self.unary(
            |x| -softplus(-x),
            |x, _| stable_sigmoid(-x),
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| x.signum() * (x != 0.0) as u8 as f64)
    }

    /// `x^p` for non-negative `x`. `p == 0` yields ones with zero gradient.
    pub fn powf(&self, p: f64) -> Tensor {
        if p == 0.0 {
            return self.unary(|_| 1.0, |_, _| 0.0);
        }
        self.unary(
            move |x| x.max(0.0).powf(p),
            move |x, _| {
                let x = x.max(0.0);
                if p == 1.0 {
                    1.0
                } else if x == 0.0 {
                    if p > 1.0 { 0.0 } else { f64::INFINITY }
                } else {
                    p * x.powf(p - 1.0)
                }
            },
        )
    }

    fn binary<F, DA, DB>(&self, other: &Tensor, op: &'static str, f: F, da: DA, db: DB) -> Result<Tensor>
    where
        F: Fn(f64, f64) -> f64,
        DA: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        DB: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        check_same_shape(op, self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g, _, ps| {
                let (a, b) = (ps[0].data(), ps[1].data());
                let ga = ps[0].requires_grad().then(|| {
                    g.iter().zip(a.iter().zip(b)).map(|(g, (&a, &b))| g * da(a, b)).collect()
                });
                let gb = ps[1].requires_grad().then(|| {
                    g.iter().zip(a.iter().zip(b)).map(|(g, (&a, &b))| g * db(a, b)).collect()
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "maximum",
            f64::max,
            |a, b| (a >= b) as u8 as f64,
            |a, b| (a < b) as u8 as f64,
        )
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "minimum",
            f64::min,
            |a, b| (a <= b) as u8 as f64,
            |a, b| (a > b) as u8 as f64,
        )
    }

    /// Sum of any number of same-shape tensors.
    pub fn sum_all(terms: &[Tensor]) -> Result<Tensor> {
        let first = terms
            .first()
            .ok_or_else(|| Error::shape("sum_all", "no terms"))?;
        for t in &terms[1..] {
            check_same_shape("sum_all", first, t)?;
        }
        let mut data = first.to_vec();
        for t in &terms[1..] {
            data.iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
        }
        Ok(Tensor::from_op(first.shape().to_vec(), data, terms.to_vec(), |g, _, ps| {
            ps.iter().map(|p| p.requires_grad().then(|| g.to_vec())).collect()
        }))
    }

    fn last_dim_operand(&self, v: &Tensor, op: &'static str) -> Result<usize> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape(op, "scalar input"))?;
        if v.shape() != [n] {
            return Err(Error::shape(op, format!("{:?} vs last dim {n}", v.shape())));
        }
        Ok(n)
    }

    /// `x[..., j] + b[j]`.
    pub fn add_lastdim(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.last_dim_operand(b, "add_lastdim")?;
        let bd = b.data();
        let data = self
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(x, b)| x + b))
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), b.clone()],
            move |g, _, ps| {
                let gx = ps[0].requires_grad().then(|| g.to_vec());
                let gb = ps[1].requires_grad().then(|| {
                    let mut acc = vec![0.0; n];
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    acc
                });
                vec![gx, gb]
            },
        ))
    }

    /// `x[..., j] * v[j]`: channel-wise modulation.
    pub fn mul_lastdim(&self, v: &Tensor) -> Result<Tensor> {
        let n = self.last_dim_operand(v, "mul_lastdim")?;
        let vd = v.data();
        let data = self
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(vd).map(|(x, v)| x * v))
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), v.clone()],
            move |g, _, ps| {
                let (x, v) = (ps[0].data(), ps[1].data());
                let gx = ps[0].requires_grad().then(|| {
                    g.chunks(n)
                        .flat_map(|row| row.iter().zip(v).map(|(g, v)| g * v))
                        .collect()
                });
                let gv = ps[1].requires_grad().then(|| {
                    let mut acc = vec![0.0; n];
                    for (grow, xrow) in g.chunks(n).zip(x.chunks(n)) {
                        for j in 0..n {
                            acc[j] += grow[j] * xrow[j];
                        }
                    }
                    acc
                });
                vec![gx, gv]
            },
        ))
    }

    /// Normalizes every last-axis row to zero mean and unit variance
    /// (population variance plus `eps`). No affine part.
    pub fn layer_norm_lastdim(&self, eps: f64) -> Result<Tensor> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if n == 0 {
            return Err(Error::shape("layer_norm", "empty last axis"));
        }
        let mut data = Vec::with_capacity(self.numel());
        let mut inv = Vec::with_capacity(self.numel() / n);
        for row in self.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let k = 1.0 / (var + eps).sqrt();
            data.extend(row.iter().map(|x| (x - mean) * k));
            inv.push(k);
        }
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g, out, _| {
            let mut gx = Vec::with_capacity(g.len());
            for ((grow, yrow), k) in g.chunks(n).zip(out.chunks(n)).zip(&inv) {
                let gm = grow.iter().sum::<f64>() / n as f64;
                let gy = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                gx.extend(grow.iter().zip(yrow).map(|(g, y)| k * (g - gm - y * gy)));
            }
            vec![Some(gx)]
        }))
    }

    /// `x · s` for a one-element tensor `s`.
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::shape("scale_by", format!("factor must have one element, got {:?}", s.shape())));
        }
        let k = s.data()[0];
        let data = self.data().iter().map(|x| x * k).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            move |g, _, ps| {
                let gx = ps[0].requires_grad().then(|| g.iter().map(|g| g * k).collect());
                let gs = ps[1]
                    .requires_grad()
                    .then(|| vec![g.iter().zip(ps[0].data()).map(|(g, x)| g * x).sum()]);
                vec![gx, gs]
            },
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], vec![self.clone()], move |g, _, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.len() > 5 {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), vec![self.clone()], |g, _, _| {
            vec![Some(g.to_vec())]
        }))
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape() {
            [m, n] => Ok((m, n)),
            _ => Err(Error::shape(op, format!("expected rank 2, got {:?}", self.shape()))),
        }
    }

    /// `c[i,j] = Σ_t a[i,t]·b[t,j]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let data = matmul_kernel(self.data(), other.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            move |g, _, ps| {
                let (a, b) = (ps[0].data(), ps[1].data());
                // dA = G·Bᵀ, dB = Aᵀ·G
                let ga = ps[0].requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for t in 0..k {
                            let brow = &b[t * n..(t + 1) * n];
                            ga[i * k + t] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    ga
                });
                let gb = ps[1].requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for t in 0..k {
                            let av = a[i * k + t];
                            if av == 0.0 {
                                continue;
                            }
                            gb[t * n..(t + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, g)| *o += av * g);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("transpose")?;
        let data = transpose_kernel(self.data(), m, n);
        Ok(Tensor::from_op(vec![n, m], data, vec![self.clone()], move |g, _, _| {
            vec![Some(transpose_kernel(g, n, m))]
        }))
    }

    /// Softmax along the last axis.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut data = self.to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g, y, _| {
            let mut gx = vec![0.0; y.len()];
            for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    out[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenation along the last axis; all leading extents must agree.
    pub fn concat_lastdim(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = &first.shape()[..first.rank().saturating_sub(1)];
        if first.rank() == 0 {
            return Err(Error::shape("concat", "scalar input"));
        }
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap_or(&0)).collect();
        for p in parts {
            if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", first.shape(), p.shape()),
                ));
            }
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Tensor::from_op(shape, data, parts.to_vec(), move |g, _, ps| {
            let mut offset = 0;
            let mut out = Vec::with_capacity(ps.len());
            for (p, &w) in ps.iter().zip(&widths) {
                out.push(p.requires_grad().then(|| {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        let base = r * total + offset;
                        gp.extend_from_slice(&g[base..base + w]);
                    }
                    gp
                }));
                offset += w;
            }
            out
        }))
    }

    /// Slice `[start, start+len)` of the leading axis.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Tensor> {
        let lead = *self
            .shape()
            .first()
            .ok_or_else(|| Error::shape("narrow", "scalar input"))?;
        if start + len > lead {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                len: lead,
            });
        }
        let inner: usize = self.shape()[1..].iter().product();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        let data = self.data()[start * inner..(start + len) * inner].to_vec();
        let total = self.numel();
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |g, _, _| {
            let mut gx = vec![0.0; total];
            gx[start * inner..(start + len) * inner].copy_from_slice(g);
            vec![Some(gx)]
        }))
    }

    /// Removes the leading axis by picking entry `index`.
    pub fn select(&self, index: usize) -> Result<Tensor> {
        let lead = *self
            .shape()
            .first()
            .ok_or_else(|| Error::shape("select", "scalar input"))?;
        if index >= lead {
            return Err(Error::IndexOutOfRange { index, len: lead });
        }
        self.narrow(index, 1)?.reshape(&self.shape()[1..])
    }

    /// Stacks same-shape tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack", "no inputs"))?;
        for p in parts {
            check_same_shape("stack", first, p)?;
        }
        let inner = first.numel();
        let mut data = Vec::with_capacity(inner * parts.len());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        Ok(Tensor::from_op(shape, data, parts.to_vec(), move |g, _, ps| {
            ps.iter()
                .enumerate()
                .map(|(i, p)| p.requires_grad().then(|| g[i * inner..(i + 1) * inner].to_vec()))
                .collect()
        }))
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            crow.iter_mut()
                .zip(&b[t * n..(t + 1) * n])
                .for_each(|(c, b)| *c += av * b);
        }
    }
    c
}

fn transpose_kernel(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}
