//! Region, contour and detection-style metrics over binary mask sequences.
//!
//! Degenerate cases: two empty masks have IoU 1, and two masks without
//! boundary pixels have F 1.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Mask, MaskSequence};

/// Boundary tolerance as a fraction of the image diagonal.
pub const BOUNDARY_TOLERANCE: f64 = 0.008;
pub const TEMPORAL_K_MAX: usize = 10;

fn same_dims(a: &Mask, b: &Mask, op: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { expected: b, actual: a });
    }
    Ok(())
}

fn check_sequences(pred: &MaskSequence, gt: &MaskSequence, op: &'static str) -> Result<()> {
    same_len(pred.len(), gt.len())?;
    for (p, g) in pred.frames().iter().zip(gt.frames()) {
        same_dims(p, g, op)?;
    }
    Ok(())
}

/// `(|a ∩ b|, |a ∪ b|)`.
pub fn intersection_union(a: &Mask, b: &Mask) -> Result<(usize, usize)> {
    same_dims(a, b, "iou")?;
    let (mut inter, mut union) = (0, 0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok((inter, union))
}

fn ratio_or_one(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    let (i, u) = intersection_union(a, b)?;
    Ok(ratio_or_one(i, u))
}

/// Mean per-frame IoU.
pub fn j_score(pred: &MaskSequence, gt: &MaskSequence) -> Result<f64> {
    check_sequences(pred, gt, "j_score")?;
    mean_over_frames(pred, gt, iou)
}

/// Mean per-frame boundary F.
pub fn f_score(pred: &MaskSequence, gt: &MaskSequence) -> Result<f64> {
    check_sequences(pred, gt, "f_score")?;
    mean_over_frames(pred, gt, f_boundary)
}

fn mean_over_frames(pred: &MaskSequence, gt: &MaskSequence, f: fn(&Mask, &Mask) -> Result<f64>) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::SequenceTooShort { len: 0, need: 1 });
    }
    let mut total = 0.0;
    for (p, g) in pred.frames().iter().zip(gt.frames()) {
        total += f(p, g)?;
    }
    Ok(total / pred.len() as f64)
}

/// Foreground pixels with a background 4-neighbour or on the image edge.
pub fn boundary(m: &Mask) -> Mask {
    let (h, w) = m.dims();
    Mask::from_fn(h, w, |y, x| {
        m.get(y, x)
            && (y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !m.get(y - 1, x)
                || !m.get(y + 1, x)
                || !m.get(y, x - 1)
                || !m.get(y, x + 1))
    })
}

/// `round(fraction · √(H² + W²))`.
pub fn boundary_radius(h: usize, w: usize, fraction: f64) -> usize {
    (fraction * ((h * h + w * w) as f64).sqrt()).round() as usize
}

/// Dilation by a disk of radius `r` (Euclidean).
pub fn dilate(m: &Mask, r: usize) -> Mask {
    let (h, w) = m.dims();
    let ri = r as isize;
    let offsets: Vec<(isize, isize)> = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy * dy + dx * dx <= ri * ri)
        .collect();
    let mut out = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            if !m.get(y, x) {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out.set(yy as usize, xx as usize, true);
                }
            }
        }
    }
    out
}

/// Boundary F-measure with the default tolerance.
pub fn f_boundary(pred: &Mask, gt: &Mask) -> Result<f64> {
    f_boundary_with(pred, gt, BOUNDARY_TOLERANCE)
}

pub fn f_boundary_with(pred: &Mask, gt: &Mask, tolerance: f64) -> Result<f64> {
    same_dims(pred, gt, "f_boundary")?;
    let (h, w) = pred.dims();
    let r = boundary_radius(h, w, tolerance);
    let (pb, gb) = (boundary(pred), boundary(gt));
    let (np, ng) = (pb.count(), gb.count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let hits = |a: &Mask, b_dil: &Mask| a.data().iter().zip(b_dil.data()).filter(|(&x, &y)| x && y).count();
    let precision = hits(&pb, &dilate(&gb, r)) as f64 / np as f64;
    let recall = hits(&gb, &dilate(&pb, r)) as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// IoU pooled over all frames of a sample: `Σ|∩| / Σ|∪|`.
pub fn sample_iou(pred: &MaskSequence, gt: &MaskSequence) -> Result<f64> {
    check_sequences(pred, gt, "sample_iou")?;
    let (i, u) = pooled(pred, gt)?;
    Ok(ratio_or_one(i, u))
}

fn pooled(pred: &MaskSequence, gt: &MaskSequence) -> Result<(usize, usize)> {
    pred.frames()
        .iter()
        .zip(gt.frames())
        .try_fold((0, 0), |(si, su), (p, g)| {
            let (i, u) = intersection_union(p, g)?;
            Ok((si + i, su + u))
        })
}

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// All-point interpolated AP of confidence-ranked detections, one per
/// sample, each sample holding one ground-truth object.
pub fn average_precision(ious: &[f64], confidences: &[f64], threshold: f64) -> Result<f64> {
    same_len(confidences.len(), ious.len())?;
    let n = ious.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal confidences keep sample order
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        tp += (ious[i] >= threshold) as usize;
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n as f64);
    }
    for i in (0..n - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

/// Mean AP over [`iou_thresholds`].
pub fn map_over_thresholds(predictions: &[(MaskSequence, f64)], gts: &[MaskSequence]) -> Result<f64> {
    same_len(predictions.len(), gts.len())?;
    let ious = predictions
        .iter()
        .zip(gts)
        .map(|((p, _), g)| sample_iou(p, g))
        .collect::<Result<Vec<_>>>()?;
    let conf: Vec<f64> = predictions.iter().map(|(_, c)| *c).collect();
    let th = iou_thresholds();
    let mut total = 0.0;
    for &t in &th {
        total += average_precision(&ious, &conf, t)?;
    }
    Ok(total / th.len() as f64)
}

/// `(oIoU, mIoU)`: overall IoU pools intersections and unions across every
/// frame of every sample; mean IoU averages [`sample_iou`].
pub fn oiou_miou(predictions: &[MaskSequence], gts: &[MaskSequence]) -> Result<(f64, f64)> {
    same_len(predictions.len(), gts.len())?;
    if predictions.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (mut si, mut su, mut miou) = (0, 0, 0.0);
    for (p, g) in predictions.iter().zip(gts) {
        check_sequences(p, g, "oiou_miou")?;
        let (i, u) = pooled(p, g)?;
        si += i;
        su += u;
        miou += ratio_or_one(i, u);
    }
    Ok((ratio_or_one(si, su), miou / predictions.len() as f64))
}

/// Per-frame `(IoU + F) / 2`.
pub fn frame_jf(pred: &MaskSequence, gt: &MaskSequence) -> Result<Vec<f64>> {
    check_sequences(pred, gt, "frame_jf")?;
    pred.frames()
        .iter()
        .zip(gt.frames())
        .map(|(p, g)| Ok((iou(p, g)? + f_boundary(p, g)?) / 2.0))
        .collect()
}

/// Population variance of per-frame J&F over the first `k` frames, for
/// `k = 2..=k_max`.
pub fn temporal_variance(pred: &MaskSequence, gt: &MaskSequence, k_max: usize) -> Result<Vec<(usize, f64)>> {
    if pred.len() < k_max {
        return Err(Error::SequenceTooShort { len: pred.len(), need: k_max });
    }
    let jf = frame_jf(pred, gt)?;
    Ok((2..=k_max).map(|k| (k, population_variance(&jf[..k]))).collect())
}

fn population_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub video_id: String,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

/// Corpus-level metrics. `temporal_variance` holds `(k, mean variance)`
/// over videos, using population variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub map: f64,
    pub oiou: f64,
    pub miou: f64,
    pub temporal_variance: Vec<(usize, f64)>,
    pub videos: Vec<VideoScores>,
}

/// One predicted video: masks plus a confidence used for mAP ranking.
#[derive(Debug, Clone)]
pub struct VideoPrediction {
    pub video_id: String,
    pub masks: MaskSequence,
    pub confidence: f64,
}

/// Every metric over aligned predictions and ground truths. Temporal
/// variance uses `k_max = min(10, T)` per video.
pub fn evaluate(predictions: &[VideoPrediction], gts: &[MaskSequence]) -> Result<MetricReport> {
    same_len(predictions.len(), gts.len())?;
    if predictions.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut videos = Vec::with_capacity(gts.len());
    let mut var_sum = vec![0.0; TEMPORAL_K_MAX - 1];
    let mut var_n = vec![0usize; TEMPORAL_K_MAX - 1];
    for (p, g) in predictions.iter().zip(gts) {
        let j = j_score(&p.masks, g)?;
        let f = f_score(&p.masks, g)?;
        videos.push(VideoScores {
            video_id: p.video_id.clone(),
            j,
            f,
            jf: (j + f) / 2.0,
        });
        let k_max = TEMPORAL_K_MAX.min(g.len());
        if k_max >= 2 {
            for (k, v) in temporal_variance(&p.masks, g, k_max)? {
                var_sum[k - 2] += v;
                var_n[k - 2] += 1;
            }
        }
    }
    let n = videos.len() as f64;
    let j = videos.iter().map(|v| v.j).sum::<f64>() / n;
    let f = videos.iter().map(|v| v.f).sum::<f64>() / n;
    let scored: Vec<(MaskSequence, f64)> = predictions.iter().map(|p| (p.masks.clone(), p.confidence)).collect();
    let masks: Vec<MaskSequence> = predictions.iter().map(|p| p.masks.clone()).collect();
    let (oiou, miou) = oiou_miou(&masks, gts)?;
    let temporal_variance = var_sum
        .iter()
        .zip(&var_n)
        .enumerate()
        .filter(|(_, (_, &c))| c > 0)
        .map(|(i, (s, &c))| (i + 2, s / c as f64))
        .collect();
    Ok(MetricReport {
        j,
        f,
        jf: (j + f) / 2.0,
        map: map_over_thresholds(&scored, gts)?,
        oiou,
        miou,
        temporal_variance,
        videos,
    })
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut out = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out)?;
        Ok(())
    }

    /// Per-video rows `video_id,J,F,JF`, then aggregate footer rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("video_id,J,F,JF\n");
        for v in &self.videos {
            s += &format!("{},{},{},{}\n", v.video_id, v.j, v.f, v.jf);
        }
        s += &format!("mean,{},{},{}\n", self.j, self.f, self.jf);
        s += &format!("# mAP,{}\n# oIoU,{}\n# mIoU,{}\n", self.map, self.oiou, self.miou);
        s
    }

    pub fn temporal_csv(&self) -> String {
        let mut s = String::from("k,mean_variance\n");
        for (k, v) in &self.temporal_variance {
            s += &format!("{k},{v}\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw)
    }

    fn seq(frames: Vec<Mask>) -> MaskSequence {
        MaskSequence::new(frames).unwrap()
    }

    /// Boundary by explicit neighbour lookup with out-of-grid as background.
    fn oracle_boundary(m: &Mask) -> Vec<(isize, isize)> {
        let (h, w) = m.dims();
        let at = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize && m.get(y as usize, x as usize);
        let mut out = vec![];
        for y in 0..h as isize {
            for x in 0..w as isize {
                if at(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !at(y + dy, x + dx)) {
                    out.push((y, x));
                }
            }
        }
        out
    }

    /// F by pairwise distances between boundary pixels.
    fn oracle_f(a: &Mask, b: &Mask) -> f64 {
        let (h, w) = a.dims();
        let r = (0.008 * ((h * h + w * w) as f64).sqrt()).round();
        let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
        if ba.is_empty() && bb.is_empty() {
            return 1.0;
        }
        if ba.is_empty() || bb.is_empty() {
            return 0.0;
        }
        let near = |p: &(isize, isize), set: &[(isize, isize)]| {
            set.iter().any(|q| {
                let (dy, dx) = ((p.0 - q.0) as f64, (p.1 - q.1) as f64);
                (dy * dy + dx * dx).sqrt() <= r
            })
        };
        let p = ba.iter().filter(|x| near(x, &bb)).count() as f64 / ba.len() as f64;
        let rc = bb.iter().filter(|x| near(x, &ba)).count() as f64 / bb.len() as f64;
        if p + rc == 0.0 {
            0.0
        } else {
            2.0 * p * rc / (p + rc)
        }
    }

    fn oracle_iou(a: &Mask, b: &Mask) -> f64 {
        let (h, w) = a.dims();
        let (mut i, mut u) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if a.get(y, x) && b.get(y, x) {
                    i += 1.0;
                }
                if a.get(y, x) || b.get(y, x) {
                    u += 1.0;
                }
            }
        }
        if u == 0.0 {
            1.0
        } else {
            i / u
        }
    }

    /// AP as the mean over recall levels `1/n, 2/n, …, 1` of the best
    /// precision among cut-offs reaching that recall.
    fn oracle_ap(ious: &[f64], conf: &[f64], th: f64) -> f64 {
        let n = ious.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap());
        let cut: Vec<(f64, f64)> = (1..=n)
            .map(|k| {
                let tp = idx[..k].iter().filter(|&&i| ious[i] >= th).count() as f64;
                (tp / k as f64, tp / n as f64)
            })
            .collect();
        (1..=n)
            .map(|level| {
                let r = level as f64 / n as f64;
                cut.iter()
                    .filter(|(_, rc)| *rc >= r - 1e-15)
                    .map(|(p, _)| *p)
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / n as f64
    }

    fn shift(m: &Mask, dy: usize, dx: usize) -> Mask {
        let (h, w) = m.dims();
        Mask::from_fn(h, w, |y, x| y >= dy && x >= dx && m.get(y - dy, x - dx))
    }

    #[test]
    fn iou_examples() {
        let a = rect(4, 4, 0, 0, 2, 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = rect(4, 4, 1, 0, 2, 2);
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&Mask::empty(3, 3), &Mask::empty(3, 3)).unwrap(), 1.0);
        assert!(iou(&a, &Mask::empty(3, 4)).is_err());
    }

    #[test]
    fn j_examples() {
        let a = rect(8, 8, 0, 0, 3, 3);
        let b = rect(8, 8, 5, 5, 3, 3);
        assert_eq!(j_score(&seq(vec![a.clone()]), &seq(vec![a.clone()])).unwrap(), 1.0);
        let p = seq(vec![a.clone(), a.clone()]);
        let g = seq(vec![a.clone(), b]);
        assert_eq!(j_score(&p, &g).unwrap(), 0.5);
        assert!(matches!(
            j_score(&p, &seq(vec![a])),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn j_matches_brute_force_on_long_sequence() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut rand_mask = || {
            let bits: Vec<bool> = (0..120).map(|_| rng.random_bool(0.4)).collect();
            Mask::new(12, 10, bits).unwrap()
        };
        let p: Vec<Mask> = (0..50).map(|_| rand_mask()).collect();
        let g: Vec<Mask> = (0..50).map(|_| rand_mask()).collect();
        let want = p.iter().zip(&g).map(|(a, b)| oracle_iou(a, b)).sum::<f64>() / 50.0;
        let got = j_score(&seq(p), &seq(g)).unwrap();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn f_examples() {
        let a = rect(64, 64, 10, 10, 10, 10);
        assert_eq!(f_boundary(&a, &a).unwrap(), 1.0);
        let far = rect(64, 64, 40, 40, 10, 10);
        assert_eq!(f_boundary(&a, &far).unwrap(), 0.0);
        let shifted = shift(&a, 1, 0);
        let got = f_boundary(&a, &shifted).unwrap();
        assert!((got - oracle_f(&a, &shifted)).abs() < 1e-12);
        let shifted2 = shift(&a, 2, 0);
        let got = f_boundary(&a, &shifted2).unwrap();
        assert!((got - oracle_f(&a, &shifted2)).abs() < 1e-12);
        assert!(got < 1.0);
        assert_eq!(f_boundary(&Mask::empty(5, 5), &Mask::empty(5, 5)).unwrap(), 1.0);
        assert_eq!(f_boundary(&Mask::empty(5, 5), &rect(5, 5, 1, 1, 2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn radius_for_reference_sizes() {
        assert_eq!(boundary_radius(64, 64, BOUNDARY_TOLERANCE), 1);
        assert_eq!(boundary_radius(96, 96, BOUNDARY_TOLERANCE), 1);
        assert_eq!(boundary_radius(32, 32, BOUNDARY_TOLERANCE), 0);
        assert_eq!(boundary_radius(480, 854, BOUNDARY_TOLERANCE), 8);
    }

    #[test]
    fn map_examples() {
        let g = seq(vec![rect(8, 8, 1, 1, 4, 4)]);
        let perfect = vec![(g.clone(), 0.9), (g.clone(), 0.4)];
        assert_eq!(map_over_thresholds(&perfect, &[g.clone(), g.clone()]).unwrap(), 1.0);
        let empty = seq(vec![Mask::empty(8, 8)]);
        let none = vec![(empty.clone(), 0.9), (empty, 0.4)];
        assert_eq!(map_over_thresholds(&none, &[g.clone(), g.clone()]).unwrap(), 0.0);
        assert!(map_over_thresholds(&none, &[g]).is_err());
    }

    #[test]
    fn map_mixed_quality_matches_oracle() {
        let g = rect(10, 10, 2, 2, 5, 5);
        // IoU 1, 20/25, 15/25, 10/25, 0 with shuffled confidences
        let preds = [
            (rect(10, 10, 2, 2, 5, 5), 0.3),
            (rect(10, 10, 2, 2, 4, 5), 0.9),
            (rect(10, 10, 2, 2, 3, 5), 0.5),
            (rect(10, 10, 2, 2, 2, 5), 0.7),
            (rect(10, 10, 8, 8, 2, 2), 0.8),
        ];
        let samples: Vec<(MaskSequence, f64)> = preds.iter().map(|(m, c)| (seq(vec![m.clone()]), *c)).collect();
        let gts = vec![seq(vec![g.clone()]); 5];
        let ious: Vec<f64> = preds.iter().map(|(m, _)| oracle_iou(m, &g)).collect();
        let conf: Vec<f64> = preds.iter().map(|(_, c)| *c).collect();
        let want = (0..10).map(|i| oracle_ap(&ious, &conf, 0.5 + 0.05 * i as f64)).sum::<f64>() / 10.0;
        let got = map_over_thresholds(&samples, &gts).unwrap();
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn oiou_miou_examples() {
        let g = seq(vec![rect(8, 8, 0, 0, 2, 4)]);
        assert_eq!(oiou_miou(&[g.clone()], &[g.clone()]).unwrap(), (1.0, 1.0));
        let miss = seq(vec![rect(8, 8, 4, 4, 2, 2)]);
        let g2 = seq(vec![rect(8, 8, 4, 0, 2, 2)]);
        // union sizes 8 and 8
        let (o, m) = oiou_miou(&[g.clone(), miss], &[g.clone(), g2]).unwrap();
        assert_eq!((o, m), (0.5, 0.5));
        // a large perfect sample and a small missed one
        let small_miss = seq(vec![rect(8, 8, 7, 7, 1, 1)]);
        let small_gt = seq(vec![rect(8, 8, 6, 6, 1, 1)]);
        let (o, m) = oiou_miou(&[g.clone(), small_miss], &[g, small_gt]).unwrap();
        assert_eq!(m, 0.5);
        assert_eq!(o, 8.0 / 10.0);
    }

    #[test]
    fn temporal_variance_examples() {
        let g: Vec<Mask> = (0..10).map(|_| rect(16, 16, 4, 4, 8, 8)).collect();
        let tv = temporal_variance(&seq(g.clone()), &seq(g.clone()), 10).unwrap();
        assert_eq!(tv.len(), 9);
        assert!(tv.iter().all(|&(_, v)| v == 0.0));

        // degrading quality: prediction shrinks by one row per frame
        let p: Vec<Mask> = (0..10).map(|t| rect(16, 16, 4, 4, 8 - t.min(7), 8)).collect();
        let (ps, gs) = (seq(p), seq(g));
        let jf = frame_jf(&ps, &gs).unwrap();
        let tv = temporal_variance(&ps, &gs, 10).unwrap();
        let two = ((jf[0] - jf[1]) / 2.0).powi(2);
        assert!((tv[0].1 - two).abs() < 1e-15);
        for w in tv.windows(2) {
            assert!(w[1].1 >= w[0].1, "{tv:?}");
        }
        for &(k, v) in &tv {
            let mean = jf[..k].iter().sum::<f64>() / k as f64;
            let var = jf[..k].iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k as f64;
            assert!((v - var).abs() < 1e-15);
        }
        assert!(matches!(
            temporal_variance(&ps, &gs, 11),
            Err(Error::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn report_fields_and_writers() {
        let g: Vec<Mask> = (0..12).map(|t| rect(16, 16, t % 4, 2, 6, 6)).collect();
        let p: Vec<Mask> = (0..12).map(|t| rect(16, 16, 2, t % 3, 6, 6)).collect();
        let preds = vec![
            VideoPrediction {
                video_id: "v0".into(),
                masks: seq(p.clone()),
                confidence: 0.7,
            },
            VideoPrediction {
                video_id: "v1".into(),
                masks: seq(g.clone()),
                confidence: 0.2,
            },
        ];
        let r = evaluate(&preds, &[seq(g.clone()), seq(g)]).unwrap();
        assert_eq!(r.jf, (r.j + r.f) / 2.0);
        assert_eq!(r.temporal_variance.len(), 9);
        assert_eq!(r.videos[1].jf, 1.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("video_id,J,F,JF\nv0,"));
        assert!(r.temporal_csv().lines().count() == 10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        r.write_json(&path).unwrap();
        let back: MetricReport = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
        (1usize..=32, 1usize..=32).prop_flat_map(|(h, w)| {
            let blob = (0..h, 0..w, 1..=h, 1..=w);
            (
                prop::collection::vec(blob.clone(), 0..4),
                prop::collection::vec(blob, 0..4),
                prop::collection::vec(any::<bool>(), h * w),
            )
                .prop_map(move |(ra, rb, noise)| {
                    let paint = |rs: &[(usize, usize, usize, usize)], salt: bool| {
                        Mask::from_fn(h, w, |y, x| {
                            rs.iter().any(|&(y0, x0, rh, rw)| y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw)
                                ^ (salt && noise[y * w + x] && (y + x) % 7 == 0)
                        })
                    };
                    (paint(&ra, false), paint(&rb, true))
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn kernels_match_oracles((a, b) in mask_pair()) {
            prop_assert_eq!(iou(&a, &b).unwrap(), oracle_iou(&a, &b));
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            let f = f_boundary(&a, &b).unwrap();
            prop_assert!((f - oracle_f(&a, &b)).abs() <= 1e-9);
            prop_assert_eq!(f, f_boundary(&b, &a).unwrap());
            let (sa, sb) = (seq(vec![a.clone()]), seq(vec![b.clone()]));
            let (o, m) = oiou_miou(&[sa.clone()], &[sb.clone()]).unwrap();
            prop_assert_eq!(o, oracle_iou(&a, &b));
            prop_assert_eq!(m, oracle_iou(&a, &b));
        }

        #[test]
        fn map_matches_oracle(
            ious in prop::collection::vec(0.0f64..1.0, 1..12),
            conf in prop::collection::vec(0.0f64..1.0, 12),
        ) {
            let c = &conf[..ious.len()];
            for th in iou_thresholds() {
                let got = average_precision(&ious, c, th).unwrap();
                prop_assert!((got - oracle_ap(&ious, c, th)).abs() <= 1e-9);
            }
        }

        #[test]
        fn large_shift_does_not_increase_f(
            (y0, x0, rh, rw) in (0usize..20, 0usize..20, 4usize..20, 4usize..20),
            extra in 0usize..6,
        ) {
            let (h, w) = (64, 64);
            let a = rect(h, w, y0, x0, rh, rw);
            let r = boundary_radius(h, w, BOUNDARY_TOLERANCE);
            let base = f_boundary(&a, &a).unwrap();
            let s = r + 1 + extra;
            prop_assert!(f_boundary(&a, &shift(&a, s, s)).unwrap() <= base);
            prop_assert!(f_boundary(&a, &shift(&a, s, s)).unwrap() < 1.0);
        }
    }
}
