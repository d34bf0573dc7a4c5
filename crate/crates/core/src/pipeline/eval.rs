use std::sync::Mutex;

use super::model::{infer, Inference};
use super::PipelineConfig;
use crate::corpus::{splitmix64, video_id, CorpusRecord};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, VideoPrediction};
use crate::params::ParamStore;

/// Noise seed for evaluating one video: fixed per (model seed, video).
fn eval_noise_seed(seed: u64, record: &CorpusRecord) -> u64 {
    splitmix64(seed ^ splitmix64(record.scene.seed ^ 0x6576_616c))
}

/// Runs [`infer`] on every record, fanning out over up to `threads`
/// workers. Results come back in input order whatever the thread count.
pub fn predict_records(
    config: &PipelineConfig,
    params: &ParamStore,
    records: &[CorpusRecord],
    threads: usize,
) -> Result<Vec<Inference>> {
    let frozen = params.frozen();
    let run = |r: &CorpusRecord| infer(&r.frames_tensor(), &r.tokens, config, &frozen, eval_noise_seed(config.seed, r));
    let threads = threads.clamp(1, records.len().max(1));
    if threads == 1 {
        return records.iter().map(run).collect();
    }
    let slots: Vec<Mutex<Option<Result<Inference>>>> = records.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for worker in 0..threads {
            let (slots, run) = (&slots, &run);
            s.spawn(move || {
                for i in (worker..records.len()).step_by(threads) {
                    *slots[i].lock().expect("slot lock") = Some(run(&records[i]));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

/// Full metric report for `records`. `ids` defaults to `video_0000`, … in
/// input order.
pub fn evaluate_records(
    config: &PipelineConfig,
    params: &ParamStore,
    records: &[CorpusRecord],
    ids: Option<&[String]>,
    threads: usize,
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(ids) = ids {
        if ids.len() != records.len() {
            return Err(Error::LengthMismatch {
                expected: records.len(),
                actual: ids.len(),
            });
        }
    }
    let inferred = predict_records(config, params, records, threads)?;
    let predictions: Vec<VideoPrediction> = inferred
        .into_iter()
        .enumerate()
        .map(|(i, inf)| VideoPrediction {
            video_id: ids.map_or_else(|| video_id(i), |ids| ids[i].clone()),
            masks: inf.masks,
            confidence: inf.confidence,
        })
        .collect();
    let gts: Vec<_> = records.iter().map(|r| r.gt_masks.clone()).collect();
    evaluate(&predictions, &gts)
}
