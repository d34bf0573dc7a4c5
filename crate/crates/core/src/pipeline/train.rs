use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::evaluate_records;
use super::model::forward_train;
use super::{init_params, PipelineConfig};
use crate::corpus::{splitmix64, validation_start, CorpusRecord};
use crate::error::{Error, Result};
use crate::matching::LossBreakdown;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "step,total_loss,dice,focal_mask,focal_cls,l1,giou,val_JF";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Videos per step; their gradients are averaged.
    pub batch_videos: usize,
    /// Train on random windows of this many frames instead of whole videos.
    pub clip_frames: Option<usize>,
    /// Rescale the update when the global gradient norm exceeds this.
    pub grad_clip: Option<f64>,
    /// Validate every this many steps (and always after the last one);
    /// 0 validates only at the end.
    pub eval_every: usize,
    /// Cap on validation videos; `None` uses the whole split.
    pub eval_videos: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-2,
            momentum: 0.9,
            batch_videos: 16,
            clip_frames: Some(4),
            grad_clip: Some(1.0),
            eval_every: 500,
            eval_videos: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_videos > 0
            && self.clip_frames != Some(0)
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("bad optimizer settings {self:?}")))
        }
    }

    /// Cosine decay from `lr` to zero over `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.steps.max(1) as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub total_loss: f64,
    pub breakdown: LossBreakdown,
    pub val_jf: Option<f64>,
}

impl LogRow {
    pub fn csv_line(&self) -> String {
        let b = &self.breakdown;
        let jf = self.val_jf.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.total_loss, b.dice, b.focal_mask, b.focal_cls, b.l1, b.giou, jf
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<LogRow>,
    pub final_val_jf: Option<f64>,
}

/// Seed of the noise drawn at training step `step`.
fn step_noise_seed(seed: u64, step: usize) -> u64 {
    splitmix64(seed ^ splitmix64(0x7472_6169_6e00_0000 ^ step as u64))
}

/// Momentum SGD with cosine decay. Each step draws `batch_videos` training
/// videos (windows of them when `clip_frames` is set); the last tenth of
/// `corpus` is held out for validation J&F. A corpus of one video validates on itself.
/// `on_row` sees every log row as it is produced.
pub fn train(
    config: &PipelineConfig,
    tcfg: &TrainConfig,
    corpus: &[CorpusRecord],
    threads: usize,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    tcfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let split = validation_start(corpus.len());
    let (train_set, val_set) = if split == corpus.len() {
        (corpus, corpus)
    } else {
        corpus.split_at(split)
    };
    let val_set = &val_set[..tcfg.eval_videos.unwrap_or(val_set.len()).min(val_set.len())];

    let mut params = init_params(config)?;
    let mut velocity: BTreeMap<String, Vec<f64>> = params
        .iter()
        .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut log = Vec::with_capacity(tcfg.steps);
    let mut final_val_jf = None;

    for step in 0..tcfg.steps {
        let mut all: Vec<(String, Vec<f64>)> =
            params.iter().map(|(n, t)| (n.to_string(), vec![0.0; t.numel()])).collect();
        let mut total_loss = 0.0;
        let mut breakdown = LossBreakdown::default();
        let scale = 1.0 / tcfg.batch_videos as f64;
        for b in 0..tcfg.batch_videos {
            let video = &train_set[rng.random_range(0..train_set.len())];
            let record = match tcfg.clip_frames {
                Some(k) if k < video.len() => {
                    let start = rng.random_range(0..=video.len() - k);
                    video.window(start, k)?
                }
                _ => video.clone(),
            };
            let noise_seed = step_noise_seed(config.seed, step * tcfg.batch_videos + b);
            let out = forward_train(&record, config, &params, noise_seed)?;
            let grads = out.loss.backward()?;
            for ((_, acc), (_, t)) in all.iter_mut().zip(params.iter()) {
                acc.iter_mut().zip(grads.wrt(t)).for_each(|(a, g)| *a += scale * g);
            }
            total_loss += scale * out.loss.item();
            breakdown.accumulate(&out.breakdown.scaled(scale));
        }
        if let Some(limit) = tcfg.grad_clip {
            let norm = all.iter().flat_map(|(_, g)| g).map(|g| g * g).sum::<f64>().sqrt();
            if norm > limit {
                let k = limit / norm;
                all.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|v| *v *= k));
            }
        }
        let lr = tcfg.lr_at(step);
        for (name, g) in all {
            let v = velocity.get_mut(&name).expect("velocity for every parameter");
            let p = params.get(&name)?;
            let mut data = p.to_vec();
            for ((x, v), g) in data.iter_mut().zip(v.iter_mut()).zip(&g) {
                *v = tcfg.momentum * *v + g;
                *x -= lr * *v;
            }
            let shape = p.shape().to_vec();
            params.set(&name, Tensor::param(&shape, data)?);
        }

        let last = step + 1 == tcfg.steps;
        let val_jf = if last || (tcfg.eval_every > 0 && (step + 1) % tcfg.eval_every == 0) {
            let report = evaluate_records(config, &params, val_set, None, threads)?;
            Some(report.jf)
        } else {
            None
        };
        if last {
            final_val_jf = val_jf;
        }
        let row = LogRow {
            step,
            total_loss,
            breakdown,
            val_jf,
        };
        on_row(&row);
        log.push(row);
    }
    Ok(TrainOutcome {
        params,
        log,
        final_val_jf,
    })
}

/// Means of consecutive non-overlapping windows; a short tail is dropped.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 {
        return Vec::new();
    }
    values
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}
