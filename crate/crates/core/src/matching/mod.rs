//! Per-frame bipartite matching of queries to the referred target, and the
//! five-term training loss.

mod hungarian;
mod losses;

pub use hungarian::{hungarian, Assignment};
pub use losses::{dice_loss, focal_loss, giou_loss, l1_loss, DICE_EPS, FOCAL_ALPHA, FOCAL_GAMMA};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BoxCxCyWh, Mask};
use crate::tensor::{Tensor, UpsampleMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dice: f64,
    pub focal_mask: f64,
    pub focal_cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dice: 5.0,
            focal_mask: 2.0,
            focal_cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl LossWeights {
    fn as_array(&self) -> [f64; 5] {
        [self.dice, self.focal_mask, self.focal_cls, self.l1, self.giou]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::ConfigInvalid(format!("loss weights must be nonnegative: {w:?}")));
        }
        if !w.iter().any(|&v| v > 0.0) {
            return Err(Error::ConfigInvalid("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            dice: self.dice * k,
            focal_mask: self.focal_mask * k,
            focal_cls: self.focal_cls * k,
            l1: self.l1 * k,
            giou: self.giou * k,
        }
    }
}

/// Unweighted loss terms, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dice: f64,
    pub focal_mask: f64,
    pub focal_cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossBreakdown {
    fn as_array(&self) -> [f64; 5] {
        [self.dice, self.focal_mask, self.focal_cls, self.l1, self.giou]
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.as_array()
            .iter()
            .zip(w.as_array())
            .fold(0.0, |acc, (t, w)| acc + w * t)
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.dice += other.dice;
        self.focal_mask += other.focal_mask;
        self.focal_cls += other.focal_cls;
        self.l1 += other.l1;
        self.giou += other.giou;
    }

    pub fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            dice: self.dice * k,
            focal_mask: self.focal_mask * k,
            focal_cls: self.focal_cls * k,
            l1: self.l1 * k,
            giou: self.giou * k,
        }
    }
}

/// One frame of query outputs.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    /// `[Q, h, w, d²]`
    pub mask_logits: Tensor,
    /// `[Q, 4]`, normalized `(cx, cy, w, h)`.
    pub boxes: Tensor,
    /// `[Q]`
    pub presence_logits: Tensor,
}

impl PredictionSet {
    pub fn new(mask_logits: Tensor, boxes: Tensor, presence_logits: Tensor) -> Result<Self> {
        let q = match *mask_logits.shape() {
            [q, _, _, _] => q,
            _ => return Err(Error::shape("prediction", format!("mask logits {:?}", mask_logits.shape()))),
        };
        if boxes.shape() != [q, 4] || presence_logits.shape() != [q] {
            return Err(Error::shape(
                "prediction",
                format!("Q = {q}, boxes {:?}, presence {:?}", boxes.shape(), presence_logits.shape()),
            ));
        }
        if boxes.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predicted boxes"));
        }
        Ok(Self {
            mask_logits,
            boxes,
            presence_logits,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.mask_logits.shape()[0]
    }

    fn box_of(&self, q: usize) -> Result<Tensor> {
        self.boxes.select(q)
    }
}

/// Ground truth for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub gt_mask: Mask,
    pub gt_box: BoxCxCyWh,
    pub present: bool,
}

impl TargetSet {
    /// Derives the box from the mask. An absent target carries an empty mask
    /// and a zero box.
    pub fn from_mask(gt_mask: Mask, present: bool) -> Result<Self> {
        let gt_box = match (present, gt_mask.tight_box()) {
            (true, Some(b)) => b,
            (true, None) => return Err(Error::ConfigInvalid("present target with an empty mask".into())),
            (false, _) => [0.0; 4],
        };
        let gt_mask = if present {
            gt_mask
        } else {
            Mask::empty(gt_mask.height(), gt_mask.width())
        };
        Ok(Self {
            gt_mask,
            gt_box,
            present,
        })
    }
}

/// Resamples one query's `[h, w, d²]` logits to `[2h, 2w]` (a quarter of the
/// full `8h x 8w` resolution): pixel shuffle to `d·h`, then average-pool or
/// bilinearly upsample the rest of the way.
pub fn mask_at_quarter(m: &Tensor) -> Result<Tensor> {
    let [h, w, _] = <[usize; 3]>::try_from(m.shape())
        .map_err(|_| Error::shape("mask_at_quarter", format!("{:?}", m.shape())))?;
    let s = m.pixel_shuffle()?;
    let d = s.shape()[0] / h;
    let q = match d {
        1 => s.upsample(2, UpsampleMode::Bilinear)?,
        2 => s,
        4 | 8 => s.avg_pool(d / 2)?,
        _ => return Err(Error::ConfigInvalid(format!("upsampling rate {d} must divide 8"))),
    };
    q.reshape(&[2 * h, 2 * w])
}

/// Matching cost of every query against a present target. Mask terms compare
/// [`mask_at_quarter`] with the ground truth downsampled by 4 (nearest).
pub fn match_cost(pred: &PredictionSet, target: &TargetSet, weights: &LossWeights) -> Result<Vec<f64>> {
    if !target.present {
        return Err(Error::ConfigInvalid("match cost needs a present target".into()));
    }
    let gt = target.gt_mask.downsample_nearest(4)?.to_tensor();
    let logits = pred.mask_logits.detach();
    let one = Tensor::scalar(1.0);
    (0..pred.num_queries())
        .map(|q| {
            let mut terms = LossBreakdown::default();
            if weights.dice > 0.0 || weights.focal_mask > 0.0 {
                let m = mask_at_quarter(&logits.select(q)?)?;
                if m.shape() != gt.shape() {
                    return Err(Error::shape(
                        "match_cost",
                        format!("mask {:?} vs ground truth {:?}", m.shape(), gt.shape()),
                    ));
                }
                terms.dice = dice_loss(&m.sigmoid(), &gt)?.item();
                terms.focal_mask = focal_loss(&m, &gt, FOCAL_ALPHA, FOCAL_GAMMA)?.item();
            }
            let pres = pred.presence_logits.detach().select(q)?;
            terms.focal_cls = focal_loss(&pres, &one, FOCAL_ALPHA, FOCAL_GAMMA)?.item();
            let b = pred.box_of(q)?.detach();
            terms.l1 = l1_loss(&b, &target.gt_box)?.item();
            terms.giou = giou_loss(&b, &target.gt_box)?.item();
            let c = terms.weighted_total(weights);
            if !c.is_finite() {
                return Err(Error::NonFinite("match cost"));
            }
            Ok(c)
        })
        .collect()
}

/// Hungarian match of the single target against the queries; `None` when
/// the target is absent.
pub fn match_frame(pred: &PredictionSet, target: &TargetSet, weights: &LossWeights) -> Result<Option<usize>> {
    if !target.present {
        return Ok(None);
    }
    let costs = match_cost(pred, target, weights)?;
    let matrix: Vec<Vec<f64>> = costs.into_iter().map(|c| vec![c]).collect();
    Ok(hungarian(&matrix)?.pairs.first().map(|&(q, _)| q))
}

/// Loss for one frame. `refined` is the `[H, W]` refined mask logit map.
/// The matched query contributes box terms and a positive presence target;
/// every other query is pushed towards "absent".
pub fn total_loss(
    pred: &PredictionSet,
    refined: &Tensor,
    target: &TargetSet,
    matched: Option<usize>,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let q = pred.num_queries();
    let gt = target.gt_mask.to_tensor();
    if refined.shape() != gt.shape() {
        return Err(Error::shape(
            "total_loss",
            format!("refined {:?} vs ground truth {:?}", refined.shape(), gt.shape()),
        ));
    }
    if let Some(m) = matched {
        if m >= q {
            return Err(Error::IndexOutOfRange { index: m, len: q });
        }
        if !target.present {
            return Err(Error::ConfigInvalid("query matched to an absent target".into()));
        }
    }

    let dice = dice_loss(&refined.sigmoid(), &gt)?;
    let focal_mask = focal_loss(refined, &gt, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let onehot = Tensor::new(&[q], (0..q).map(|i| (Some(i) == matched) as u8 as f64).collect())?;
    let focal_cls = focal_loss(&pred.presence_logits, &onehot, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let (l1, giou) = match matched {
        Some(m) => {
            let b = pred.box_of(m)?;
            (l1_loss(&b, &target.gt_box)?, giou_loss(&b, &target.gt_box)?)
        }
        None => (Tensor::scalar(0.0), Tensor::scalar(0.0)),
    };

    let terms = [dice, focal_mask, focal_cls, l1, giou];
    let breakdown = LossBreakdown {
        dice: terms[0].item(),
        focal_mask: terms[1].item(),
        focal_cls: terms[2].item(),
        l1: terms[3].item(),
        giou: terms[4].item(),
    };
    let weighted: Vec<Tensor> = terms
        .iter()
        .zip(weights.as_array())
        .map(|(t, w)| t.scale(w))
        .collect();
    let mut total = weighted[0].clone();
    for t in &weighted[1..] {
        total = total.add(t)?;
    }
    Ok((total, breakdown))
}
