use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::noise::{inject_noise, inject_noise_learnable};
use super::PipelineConfig;
use crate::corpus::{CorpusRecord, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::heads::{aggregate_queries, run_head, select_matched, HeadParams};
use crate::mask::{Mask, MaskSequence};
use crate::matching::{match_frame, total_loss, LossBreakdown, PredictionSet, TargetSet};
use crate::params::ParamStore;
use crate::refine::{refine, RefineKind, RefinerParams};
use crate::tensor::{Tensor, UpsampleMode};

/// Encoder outputs: `F8: [T, H/8, W/8, C]`, `F16`, `F32` at their own
/// scales, and `F_v` at the `F8` scale.
#[derive(Debug, Clone)]
pub struct Features {
    pub f8: Tensor,
    pub f16: Tensor,
    pub f32: Tensor,
    pub f_v: Tensor,
}

/// Decoded queries of one frame.
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// `[Q, C]`
    pub embeddings: Tensor,
    /// `[Q, 4]` normalized `(cx, cy, w, h)`, each in `[0, 1]`.
    pub boxes: Tensor,
    /// `[Q]`
    pub presence_logits: Tensor,
}

const NORM_EPS: f64 = 1e-5;

/// Layer norm over channels with the learned gain and bias under `name`.
fn norm(x: &Tensor, params: &ParamStore, name: &str) -> Result<Tensor> {
    x.layer_norm_lastdim(NORM_EPS)?
        .mul_lastdim(params.get(&format!("{name}.gain"))?)?
        .add_lastdim(params.get(&format!("{name}.bias"))?)
}

fn conv_norm_relu(x: &Tensor, params: &ParamStore, name: &str, stride: usize) -> Result<Tensor> {
    let y = x.conv2d_strided(params.get(name)?, stride)?;
    Ok(norm(&y, params, &format!("{name}_norm"))?.relu())
}

/// `F8`, `F16`, `F32` from `[T, H, W, 3]` frames.
pub fn encode_pyramid(frames: &Tensor, config: &PipelineConfig, params: &ParamStore) -> Result<[Tensor; 3]> {
    match *frames.shape() {
        [_, h, w, 3] if h % 32 == 0 && w % 32 == 0 && h > 0 && w > 0 => {}
        _ => {
            return Err(Error::shape(
                "encode_video",
                format!("frames must be [T, H, W, 3] with H, W multiples of 32, got {:?}", frames.shape()),
            ))
        }
    }
    let x = conv_norm_relu(&frames.avg_pool(4)?, params, "enc.stem", 1)?;
    let mut f8 = conv_norm_relu(&x, params, "enc.down8", 2)?;
    for i in 0..config.encoder_layers {
        let y = conv_norm_relu(&f8, params, &format!("enc.block{i}.conv"), 1)?
            .temporal_conv1d(params.get(&format!("enc.block{i}.temporal"))?)?;
        f8 = f8.add(&y)?;
    }
    let f8 = norm(&f8, params, "enc.f8_norm")?;
    let f16 = conv_norm_relu(&f8, params, "enc.down16", 2)?;
    let f32 = conv_norm_relu(&f16, params, "enc.down32", 2)?;
    Ok([f8, f16, f32])
}

/// `F_v = F8 + up2(F16) + up4(F32)`, bilinear.
pub fn fuse_pyramid(f8: &Tensor, f16: &Tensor, f32: &Tensor) -> Result<Tensor> {
    let up16 = f16.upsample(2, UpsampleMode::Bilinear)?;
    let up32 = f32.upsample(4, UpsampleMode::Bilinear)?;
    Tensor::sum_all(&[f8.clone(), up16, up32])
}

pub fn encode_video(frames: &Tensor, config: &PipelineConfig, params: &ParamStore) -> Result<Features> {
    let [f8, f16, f32] = encode_pyramid(frames, config, params)?;
    let f_v = fuse_pyramid(&f8, &f16, &f32)?;
    Ok(Features { f8, f16, f32, f_v })
}

/// Encodes, perturbs each pyramid level with its own noise stream when the
/// config asks for noise, then fuses.
fn encode_noisy(frames: &Tensor, config: &PipelineConfig, params: &ParamStore, noise_seed: u64) -> Result<Features> {
    let pyramid = encode_pyramid(frames, config, params)?;
    let [f8, f16, f32] = if config.has_noise() {
        let mut out = Vec::with_capacity(3);
        for (level, f) in pyramid.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            rng.set_stream(level as u64);
            out.push(if config.learnable_noise {
                inject_noise_learnable(f, params.get("noise.weight")?, &mut rng)?
            } else {
                inject_noise(f, config.noise_timestep, &mut rng)?
            });
        }
        <[Tensor; 3]>::try_from(out).expect("three levels")
    } else {
        pyramid
    };
    let f_v = fuse_pyramid(&f8, &f16, &f32)?;
    Ok(Features { f8, f16, f32, f_v })
}

/// Embedding rows for the expression, `[L, C]`.
pub fn word_features(tokens: &[u16], params: &ParamStore) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::ConfigInvalid("expression has no tokens".into()));
    }
    let table = params.get("text.embed")?;
    let rows = tokens
        .iter()
        .map(|&t| {
            if t as usize >= VOCAB_SIZE {
                return Err(Error::IndexOutOfRange {
                    index: t as usize,
                    len: VOCAB_SIZE,
                });
            }
            table.select(t as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&rows)
}

/// Scaled dot-product attention of `q: [Q, C]` over `k, v: [N, C]`.
/// Returns the output and the `[Q, N]` weights.
pub(crate) fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = *q.shape().last().unwrap_or(&1) as f64;
    let weights = q.matmul(&k.transpose()?)?.scale(1.0 / c.sqrt()).softmax_lastdim()?;
    Ok((weights.matmul(v)?, weights))
}

fn check_channels(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Queries attend to the words; the result is added back to the queries.
pub fn fuse_queries(q: &Tensor, f_w: &Tensor, params: &ParamStore) -> Result<Tensor> {
    check_channels("fuse_queries", q, f_w)?;
    let (att, _) = attend(
        &q.matmul(params.get("fuse.wq")?)?,
        &f_w.matmul(params.get("fuse.wk")?)?,
        &f_w.matmul(params.get("fuse.wv")?)?,
    )?;
    q.add(&att)
}

/// Fixed 2-D sinusoidal codes, `[h·w, C]`: the first half of the channels
/// encodes the row, the second half the column.
pub fn positional_encoding(h: usize, w: usize, c: usize) -> Tensor {
    let half = c / 2;
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for (pos, _) in [(y, 0), (x, 1)] {
                for i in 0..half {
                    let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / half as f64);
                    let a = pos as f64 * freq;
                    data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
                }
            }
        }
    }
    data.resize(h * w * c, 0.0);
    Tensor::new(&[h * w, c], data).expect("positional encoding shape")
}

/// Decodes the fused queries against each frame of `f_v: [T, h, w, C]`.
/// Each layer is pre-norm: cross-attention then an FFN, both residual.
fn decode_frames(q_w: &Tensor, f_v: &Tensor, config: &PipelineConfig, params: &ParamStore) -> Result<Vec<QuerySet>> {
    let [t, h, w, c] = <[usize; 4]>::try_from(f_v.shape())
        .map_err(|_| Error::shape("decode", format!("F_v {:?}", f_v.shape())))?;
    if q_w.shape() != [config.num_queries, c] || c != config.channels {
        return Err(Error::shape(
            "decode",
            format!("queries {:?}, F_v {:?}, config C = {}", q_w.shape(), f_v.shape(), config.channels),
        ));
    }
    let n = h * w;
    let flat = f_v.reshape(&[t * n, c])?;
    let pos = positional_encoding(h, w, c);
    let tiled = Tensor::new(&[t * n, c], pos.data().repeat(t))?;
    let keyed = flat.add(&tiled)?;

    let p = |name: String| params.get(&name).cloned();
    let mut queries = vec![q_w.clone(); t];
    for l in 0..config.decoder_layers {
        let keys = keyed.matmul(&p(format!("dec.{l}.wk"))?)?;
        let values = flat.matmul(&p(format!("dec.{l}.wv"))?)?;
        let (wq, ffn1, b1, ffn2, b2) = (
            p(format!("dec.{l}.wq"))?,
            p(format!("dec.{l}.ffn1"))?,
            p(format!("dec.{l}.ffn1_bias"))?,
            p(format!("dec.{l}.ffn2"))?,
            p(format!("dec.{l}.ffn2_bias"))?,
        );
        for (f, q) in queries.iter_mut().enumerate() {
            let n1 = norm(q, params, &format!("dec.{l}.norm1"))?;
            let (att, _) = attend(&n1.matmul(&wq)?, &keys.narrow(f * n, n)?, &values.narrow(f * n, n)?)?;
            let x = q.add(&att)?;
            let n2 = norm(&x, params, &format!("dec.{l}.norm2"))?;
            let hidden = n2.matmul(&ffn1)?.add_lastdim(&b1)?.relu();
            *q = x.add(&hidden.matmul(&ffn2)?.add_lastdim(&b2)?)?;
        }
    }
    let (wb, bb, wp, bp) = (
        params.get("dec.box")?,
        params.get("dec.box_bias")?,
        params.get("dec.presence")?,
        params.get("dec.presence_bias")?,
    );
    queries
        .into_iter()
        .map(|q| {
            let boxes = q.matmul(wb)?.add_lastdim(bb)?.sigmoid();
            let presence_logits = q.matmul(wp)?.add_lastdim(bp)?.reshape(&[config.num_queries])?;
            Ok(QuerySet {
                embeddings: q,
                boxes,
                presence_logits,
            })
        })
        .collect()
}

/// Decoder over a single frame's `F_v: [h, w, C]`.
pub fn decode(q_w: &Tensor, f_v: &Tensor, config: &PipelineConfig, params: &ParamStore) -> Result<QuerySet> {
    if f_v.rank() != 3 {
        return Err(Error::shape("decode", format!("F_v {:?}", f_v.shape())));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(f_v.shape());
    let mut out = decode_frames(q_w, &f_v.reshape(&shape)?, config, params)?;
    Ok(out.remove(0))
}

pub fn head_params(config: &PipelineConfig, params: &ParamStore) -> Result<HeadParams> {
    let opt = |flag: bool, name: &str| -> Result<Option<Tensor>> {
        flag.then(|| params.get(name).cloned()).transpose()
    };
    Ok(HeadParams {
        w_d: opt(config.head_kind.uses_dot(), "head.w_d")?,
        w_c: opt(config.head_kind.uses_dynamic(), "head.w_c")?,
        w_q: opt(config.head_kind.uses_dynamic(), "head.w_q")?,
        layout: config.dynamic_layout(),
        d: config.d,
    })
}

pub fn refiner_params(config: &PipelineConfig, params: &ParamStore) -> Result<Option<RefinerParams>> {
    if config.refine_kind == RefineKind::None {
        return Ok(None);
    }
    let g = |name: &str| params.get(name).cloned();
    let f4_temporal = match config.refine_kind {
        RefineKind::Tcmr => g("refine.f4_temporal")?,
        // the frame-local refiner never reads the temporal kernel
        _ => Tensor::zeros(&[3, config.refine_c4, config.refine_c4]),
    };
    Ok(Some(RefinerParams {
        conv8: g("refine.conv8")?,
        conv8_bias: g("refine.conv8_bias")?,
        conv4: g("refine.conv4")?,
        conv4_bias: g("refine.conv4_bias")?,
        f4_stem: g("refine.f4_stem")?,
        f4_stem_bias: g("refine.f4_stem_bias")?,
        f4_temporal,
        mid: config.refine_mid,
    }))
}

/// Per-frame query outputs and head logits.
struct FrameOutputs {
    features: Features,
    frames: Vec<(QuerySet, Tensor)>,
}

fn run_frames(
    frames: &Tensor,
    tokens: &[u16],
    config: &PipelineConfig,
    params: &ParamStore,
    noise_seed: u64,
) -> Result<FrameOutputs> {
    config.validate()?;
    let features = encode_noisy(frames, config, params, noise_seed)?;
    let q_w = fuse_queries(params.get("query.embed")?, &word_features(tokens, params)?, params)?;
    let decoded = decode_frames(&q_w, &features.f_v, config, params)?;
    let hp = head_params(config, params)?;
    let mut out = Vec::with_capacity(decoded.len());
    for (t, qs) in decoded.into_iter().enumerate() {
        let centres = if hp.coord_channels() && config.head_kind.uses_dynamic() {
            let b = qs.boxes.data();
            let c: Vec<f64> = b.chunks(4).flat_map(|r| [r[0], r[1]]).collect();
            Some(Tensor::new(&[config.num_queries, 2], c)?)
        } else {
            None
        };
        let m_n = run_head(config.head_kind, &features.f_v.select(t)?, &qs.embeddings, &hp, centres.as_ref())?;
        out.push((qs, m_n));
    }
    Ok(FrameOutputs { features, frames: out })
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Sum of the per-frame weighted losses.
    pub loss: Tensor,
    /// Unweighted terms, summed over frames.
    pub breakdown: LossBreakdown,
    pub matched: Vec<Option<usize>>,
}

/// Query with the largest presence logit. Frames without the target feed
/// this query's logits to the refiner, so it learns to empty a single
/// confident map rather than a sum it never sees at inference.
fn most_present(presence_logits: &Tensor) -> usize {
    let p = presence_logits.data();
    (1..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best })
}

/// Training forward pass over every frame of `record`. `noise_seed` only
/// matters when the config injects noise.
pub fn forward_train(
    record: &CorpusRecord,
    config: &PipelineConfig,
    params: &ParamStore,
    noise_seed: u64,
) -> Result<ForwardOutput> {
    let frames = record.frames_tensor();
    let out = run_frames(&frames, &record.tokens, config, params, noise_seed)?;
    let weights = &config.loss_weights;

    let mut preds = Vec::with_capacity(record.len());
    let mut targets = Vec::with_capacity(record.len());
    let mut matched = Vec::with_capacity(record.len());
    let mut m_l = Vec::with_capacity(record.len());
    for (t, (qs, m_n)) in out.frames.into_iter().enumerate() {
        let pred = PredictionSet::new(m_n, qs.boxes, qs.presence_logits)?;
        let target = TargetSet::from_mask(record.gt_masks.frames()[t].clone(), record.presence[t])?;
        let m = match_frame(&pred, &target, weights)?;
        m_l.push(match m {
            Some(q) => select_matched(&pred.mask_logits, q)?,
            None => select_matched(&pred.mask_logits, most_present(&pred.presence_logits))?,
        });
        preds.push(pred);
        targets.push(target);
        matched.push(m);
    }

    let rp = refiner_params(config, params)?;
    let refined = refine(
        config.refine_kind,
        &Tensor::stack(&m_l)?,
        &out.features.f8,
        &frames,
        rp.as_ref(),
        config.d,
    )?;
    let mut losses = Vec::with_capacity(record.len());
    let mut breakdown = LossBreakdown::default();
    for (t, (pred, target)) in preds.iter().zip(&targets).enumerate() {
        let (l, b) = total_loss(pred, &refined.select(t)?, target, matched[t], weights)?;
        losses.push(l);
        breakdown.accumulate(&b);
    }
    let loss = Tensor::sum_all(&losses)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFiniteLoss(loss.item()));
    }
    Ok(ForwardOutput {
        loss,
        breakdown,
        matched,
    })
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub masks: MaskSequence,
    /// Refined pre-sigmoid maps, `[T, H, W]`.
    pub logits: Tensor,
    /// Query-summed head logits, `[T, h, w, d²]`.
    pub aggregated: Tensor,
    /// Per-frame head logits of every query, `[Q, h, w, d²]` each.
    pub per_query: Vec<Tensor>,
    /// `sigmoid(presence)` per frame and query.
    pub presence: Vec<Vec<f64>>,
    pub boxes: Vec<Vec<[f64; 4]>>,
    /// Mean over frames of the best query's presence probability.
    pub confidence: f64,
}

/// Sums the mask logits of all queries per frame, refines, and thresholds
/// the sigmoid at 0.5.
pub fn infer(
    frames: &Tensor,
    tokens: &[u16],
    config: &PipelineConfig,
    params: &ParamStore,
    noise_seed: u64,
) -> Result<Inference> {
    let out = run_frames(frames, tokens, config, params, noise_seed)?;
    let mut aggregated = Vec::with_capacity(out.frames.len());
    let mut per_query = Vec::with_capacity(out.frames.len());
    let mut presence = Vec::with_capacity(out.frames.len());
    let mut boxes = Vec::with_capacity(out.frames.len());
    for (qs, m_n) in &out.frames {
        aggregated.push(aggregate_queries(m_n)?);
        per_query.push(m_n.clone());
        presence.push(qs.presence_logits.sigmoid().to_vec());
        boxes.push(qs.boxes.data().chunks(4).map(|b| [b[0], b[1], b[2], b[3]]).collect());
    }
    let aggregated = Tensor::stack(&aggregated)?;
    let rp = refiner_params(config, params)?;
    let logits = refine(config.refine_kind, &aggregated, &out.features.f8, frames, rp.as_ref(), config.d)?;
    let masks = (0..logits.shape()[0])
        .map(|t| Mask::from_threshold(&logits.select(t)?, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let confidence = presence
        .iter()
        .map(|p| p.iter().cloned().fold(0.0, f64::max))
        .sum::<f64>()
        / presence.len().max(1) as f64;
    Ok(Inference {
        masks: MaskSequence::new(masks)?,
        logits,
        aggregated,
        per_query,
        presence,
        boxes,
        confidence,
    })
}
