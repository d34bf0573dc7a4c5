//! Query-conditioned mask heads.
//!
//! All heads map per-frame features `F_v: [h, w, C]` and decoded queries
//! `[Q, C]` to low-resolution mask logits `M_n: [Q, h, w, d²]`:
//!
//! * **dot**: `(F_v ⊙ q) · W_D`, channel-wise query modulation then projection.
//! * **condinst**: `F_v · W_C` fed through a per-query dynamic stack of 1×1
//!   convolutions whose weights are `q · W_Q`.
//! * **hcd**: dot + condinst, summed elementwise (parallel fusion).
//! * **dgc**: `(F_v ⊙ q) · W_C` fed through the dynamic stack (cascade).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Dot,
    CondInst,
    Dgc,
    Hcd,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Dot, HeadKind::CondInst, HeadKind::Dgc, HeadKind::Hcd];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Dot => "dot",
            HeadKind::CondInst => "condinst",
            HeadKind::Dgc => "dgc",
            HeadKind::Hcd => "hcd",
        }
    }

    pub fn uses_dot(self) -> bool {
        matches!(self, HeadKind::Dot | HeadKind::Hcd)
    }

    pub fn uses_dynamic(self) -> bool {
        !matches!(self, HeadKind::Dot)
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown head `{s}`")))
    }
}

/// Widths of the dynamic 1×1-convolution chain, input first, output last.
/// `[16, 8, 8, 16]` is two hidden layers of width 8 between 16 channels.
pub fn dynamic_layout(d: usize, hidden: &[usize], coord_channels: bool) -> Vec<usize> {
    let mut layout = vec![d * d + if coord_channels { 2 } else { 0 }];
    layout.extend_from_slice(hidden);
    layout.push(d * d);
    layout
}

/// Total weights plus biases of a dynamic chain.
pub fn num_dynamic_params(layout: &[usize]) -> usize {
    layout.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_d: Option<Tensor>,
    pub w_c: Option<Tensor>,
    pub w_q: Option<Tensor>,
    pub layout: Vec<usize>,
    pub d: usize,
}

impl HeadParams {
    pub fn n_k(&self) -> usize {
        num_dynamic_params(&self.layout)
    }

    pub fn coord_channels(&self) -> bool {
        self.layout.first() == Some(&(self.d * self.d + 2))
    }

    fn req<'a>(t: &'a Option<Tensor>, name: &str) -> Result<&'a Tensor> {
        t.as_ref().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn w_d(&self) -> Result<&Tensor> {
        Self::req(&self.w_d, "W_D")
    }

    pub fn w_c(&self) -> Result<&Tensor> {
        Self::req(&self.w_c, "W_C")
    }

    pub fn w_q(&self) -> Result<&Tensor> {
        Self::req(&self.w_q, "W_Q")
    }
}

/// Per-query low-resolution logits and, once assigned, the matched slice.
#[derive(Debug, Clone)]
pub struct MaskLogits {
    pub per_query: Tensor,
    pub matched: Option<Tensor>,
}

impl MaskLogits {
    pub fn new(per_query: Tensor) -> Self {
        Self {
            per_query,
            matched: None,
        }
    }

    pub fn assign(&mut self, query: usize) -> Result<&Tensor> {
        let slice = select_matched(&self.per_query, query)?;
        Ok(self.matched.insert(slice))
    }
}

struct Dims {
    h: usize,
    w: usize,
    c: usize,
    q: usize,
}

fn dims(f_v: &Tensor, queries: &Tensor) -> Result<Dims> {
    let [h, w, c] = *f_v.shape() else {
        return Err(Error::shape("head", format!("F_v must be [h, w, C], got {:?}", f_v.shape())));
    };
    let [q, qc] = *queries.shape() else {
        return Err(Error::shape("head", format!("queries must be [Q, C], got {:?}", queries.shape())));
    };
    if qc != c {
        return Err(Error::shape("head", format!("F_v has {c} channels, queries {qc}")));
    }
    Ok(Dims { h, w, c, q })
}

fn check_proj(w: &Tensor, c: usize, out: usize, name: &str) -> Result<()> {
    if w.shape() != [c, out] {
        return Err(Error::shape(
            "head",
            format!("{name} must be [{c}, {out}], got {:?}", w.shape()),
        ));
    }
    Ok(())
}

/// `out[q,y,x,k] = Σ_c F_v[y,x,c] · queries[q,c] · W_D[c,k]`.
pub fn dot_branch(f_v: &Tensor, queries: &Tensor, w_d: &Tensor) -> Result<Tensor> {
    let Dims { h, w, c, q } = dims(f_v, queries)?;
    let k = *w_d.shape().last().unwrap_or(&0);
    check_proj(w_d, c, k, "W_D")?;
    let flat = f_v.reshape(&[h * w, c])?;
    let slices = (0..q)
        .map(|i| flat.mul_lastdim(&queries.select(i)?)?.matmul(w_d))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&slices)?.reshape(&[q, h, w, k])
}

/// Slices `theta` into `(weight [in, out], bias [out])` per layer: each
/// layer's weights row-major, then its bias, layers in forward order.
pub fn unpack_dynamic_params(theta: &Tensor, layout: &[usize]) -> Result<Vec<(Tensor, Tensor)>> {
    let expected = num_dynamic_params(layout);
    if theta.shape() != [expected] {
        return Err(Error::LengthMismatch {
            expected,
            actual: theta.numel(),
        });
    }
    let mut offset = 0;
    let mut layers = Vec::with_capacity(layout.len().saturating_sub(1));
    for pair in layout.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let w = theta.narrow(offset, fan_in * fan_out)?.reshape(&[fan_in, fan_out])?;
        offset += fan_in * fan_out;
        let b = theta.narrow(offset, fan_out)?;
        offset += fan_out;
        layers.push((w, b));
    }
    Ok(layers)
}

/// Runs the dynamic stack over `[pixels, in]` rows: ReLU between layers,
/// linear output.
fn run_dynamic(x: &Tensor, layers: &[(Tensor, Tensor)]) -> Result<Tensor> {
    let mut x = x.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        x = x.matmul(w)?.add_lastdim(b)?;
        if i + 1 < layers.len() {
            x = x.relu();
        }
    }
    Ok(x)
}

/// Normalized pixel-centre coordinates minus each query's centre, `[h·w, 2]`
/// per query. Centres are constants (no gradient), as in CondInst.
fn relative_coords(h: usize, w: usize, centre: (f64, f64)) -> Result<Tensor> {
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push((x as f64 + 0.5) / w as f64 - centre.0);
            data.push((y as f64 + 0.5) / h as f64 - centre.1);
        }
    }
    Tensor::new(&[h * w, 2], data)
}

fn dynamic_per_query(
    inputs: impl Fn(usize) -> Result<Tensor>,
    queries: &Tensor,
    params: &HeadParams,
    centres: Option<&Tensor>,
    d: &Dims,
) -> Result<Tensor> {
    let w_q = params.w_q()?;
    let n_k = params.n_k();
    check_proj(w_q, d.c, n_k, "W_Q")?;
    if params.coord_channels() && centres.is_none() {
        return Err(Error::ConfigInvalid("coordinate channels need query centres".into()));
    }
    let theta = queries.matmul(w_q)?;
    let out_k = *params.layout.last().unwrap_or(&0);
    let mut slices = Vec::with_capacity(d.q);
    for i in 0..d.q {
        let layers = unpack_dynamic_params(&theta.select(i)?, &params.layout)?;
        let mut x = inputs(i)?;
        if params.coord_channels() {
            let c = centres.expect("checked above").select(i)?;
            let coords = relative_coords(d.h, d.w, (c.data()[0], c.data()[1]))?;
            x = Tensor::concat_lastdim(&[x, coords])?;
        }
        slices.push(run_dynamic(&x, &layers)?);
    }
    Tensor::stack(&slices)?.reshape(&[d.q, d.h, d.w, out_k])
}

/// CondInst branch: project with `W_C`, then the per-query dynamic stack
/// generated from `queries · W_Q`. `centres` (`[Q, 2]`, normalized `cx, cy`)
/// is only read when the layout carries coordinate channels.
pub fn condinst_branch(
    f_v: &Tensor,
    queries: &Tensor,
    params: &HeadParams,
    centres: Option<&Tensor>,
) -> Result<Tensor> {
    let d = dims(f_v, queries)?;
    let w_c = params.w_c()?;
    check_proj(w_c, d.c, params.d * params.d, "W_C")?;
    let proj = f_v.reshape(&[d.h * d.w, d.c])?.matmul(w_c)?;
    dynamic_per_query(|_| Ok(proj.clone()), queries, params, centres, &d)
}

/// Hybrid CondDot: `dot_branch + condinst_branch`.
pub fn hcd_head(f_v: &Tensor, queries: &Tensor, params: &HeadParams, centres: Option<&Tensor>) -> Result<Tensor> {
    let dot = dot_branch(f_v, queries, params.w_d()?)?;
    let cond = condinst_branch(f_v, queries, params, centres)?;
    dot.add(&cond)
}

/// Dot-guided CondInst: query-modulated features, projected by `W_C`, then
/// the dynamic stack.
pub fn dgc_head(f_v: &Tensor, queries: &Tensor, params: &HeadParams, centres: Option<&Tensor>) -> Result<Tensor> {
    let d = dims(f_v, queries)?;
    let w_c = params.w_c()?;
    check_proj(w_c, d.c, params.d * params.d, "W_C")?;
    let flat = f_v.reshape(&[d.h * d.w, d.c])?;
    dynamic_per_query(
        |i| flat.mul_lastdim(&queries.select(i)?)?.matmul(w_c),
        queries,
        params,
        centres,
        &d,
    )
}

pub fn run_head(
    kind: HeadKind,
    f_v: &Tensor,
    queries: &Tensor,
    params: &HeadParams,
    centres: Option<&Tensor>,
) -> Result<Tensor> {
    match kind {
        HeadKind::Dot => dot_branch(f_v, queries, params.w_d()?),
        HeadKind::CondInst => condinst_branch(f_v, queries, params, centres),
        HeadKind::Dgc => dgc_head(f_v, queries, params, centres),
        HeadKind::Hcd => hcd_head(f_v, queries, params, centres),
    }
}

/// `M_l = M_n[query]`.
pub fn select_matched(m_n: &Tensor, query: usize) -> Result<Tensor> {
    if m_n.rank() != 4 {
        return Err(Error::shape("select_matched", format!("{:?}", m_n.shape())));
    }
    m_n.select(query)
}

/// Elementwise sum over the query axis of `M_n`.
pub fn aggregate_queries(m_n: &Tensor) -> Result<Tensor> {
    let q = *m_n.shape().first().ok_or_else(|| Error::shape("aggregate", "scalar"))?;
    let slices = (0..q).map(|i| m_n.select(i)).collect::<Result<Vec<_>>>()?;
    Tensor::sum_all(&slices)
}
