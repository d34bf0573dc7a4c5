//! Segmentation and detection losses as differentiable tensor expressions.

use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, softplus, stable_sigmoid, Tensor};

pub const DICE_EPS: f64 = 1.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// `1 − (2·Σ p·g + ε) / (Σ p + Σ g + ε)` with `ε = 1`.
pub fn dice_loss(pred_prob: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same_shape("dice_loss", pred_prob, gt)?;
    let inter = pred_prob.mul(gt)?.sum();
    let num = inter.scale(2.0).add_scalar(DICE_EPS);
    let den = pred_prob.sum().add_scalar(gt.sum().item() + DICE_EPS);
    Ok(num.div(&den)?.neg().add_scalar(1.0))
}

/// Mean sigmoid focal loss. Per element, with `p = σ(x)`:
/// `−α(1−p)^γ ln p` for a positive target and `−(1−α)p^γ ln(1−p)` for a
/// negative one. Fractional targets blend the two linearly.
pub fn focal_loss(logits: &Tensor, gt: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    check_same_shape("focal_loss", logits, gt)?;
    let n = logits.numel().max(1) as f64;
    let y = gt.to_vec();
    let mut total = 0.0;
    for (&x, &y) in logits.data().iter().zip(&y) {
        total += y * focal_pos(x, alpha, gamma) + (1.0 - y) * focal_pos(-x, 1.0 - alpha, gamma);
    }
    let parents = vec![logits.clone()];
    Ok(Tensor::from_op(vec![], vec![total / n], parents, move |g, _, ps| {
        let s = g[0] / n;
        let grad = ps[0]
            .data()
            .iter()
            .zip(&y)
            .map(|(&x, &y)| {
                s * (y * dfocal_pos(x, alpha, gamma) - (1.0 - y) * dfocal_pos(-x, 1.0 - alpha, gamma))
            })
            .collect();
        vec![Some(grad)]
    }))
}

/// `−a(1−σ(x))^γ ln σ(x)`.
fn focal_pos(x: f64, a: f64, gamma: f64) -> f64 {
    let q = stable_sigmoid(-x);
    a * q.powf(gamma) * softplus(-x)
}

/// Derivative of [`focal_pos`] in `x`: `a(1−p)^γ(γ·p·ln p − (1−p))`.
fn dfocal_pos(x: f64, a: f64, gamma: f64) -> f64 {
    let p = stable_sigmoid(x);
    let q = stable_sigmoid(-x);
    a * q.powf(gamma) * (-gamma * p * softplus(-x) - q)
}

/// `Σ |pred − gt|` over the four coordinates.
pub fn l1_loss(pred_box: &Tensor, gt_box: &[f64; 4]) -> Result<Tensor> {
    let gt = Tensor::new(&[4], gt_box.to_vec())?;
    check_same_shape("l1_loss", pred_box, &gt)?;
    Ok(pred_box.sub(&gt)?.abs().sum())
}

/// `1 − GIoU` for `(cx, cy, w, h)` boxes. A pair of zero-area boxes has
/// IoU 0; a zero-area hull is rejected.
pub fn giou_loss(pred_box: &Tensor, gt_box: &[f64; 4]) -> Result<Tensor> {
    if pred_box.shape() != [4] {
        return Err(Error::shape("giou_loss", format!("{:?}", pred_box.shape())));
    }
    let c = |i| pred_box.select(i);
    let (cx, cy, w, h) = (c(0)?, c(1)?, c(2)?, c(3)?);
    let px0 = cx.sub(&w.scale(0.5))?;
    let px1 = cx.add(&w.scale(0.5))?;
    let py0 = cy.sub(&h.scale(0.5))?;
    let py1 = cy.add(&h.scale(0.5))?;
    let [gx0, gy0, gx1, gy1] = to_xyxy(gt_box);
    let k = Tensor::scalar;

    let ix = px1.minimum(&k(gx1))?.sub(&px0.maximum(&k(gx0))?)?.relu();
    let iy = py1.minimum(&k(gy1))?.sub(&py0.maximum(&k(gy0))?)?.relu();
    let inter = ix.mul(&iy)?;
    let area_p = px1.sub(&px0)?.mul(&py1.sub(&py0)?)?;
    let area_g = (gx1 - gx0) * (gy1 - gy0);
    let union = area_p.add_scalar(area_g).sub(&inter)?;

    let hx = px1.maximum(&k(gx1))?.sub(&px0.minimum(&k(gx0))?)?;
    let hy = py1.maximum(&k(gy1))?.sub(&py0.minimum(&k(gy0))?)?;
    let hull = hx.mul(&hy)?;
    if hull.item() <= 0.0 {
        return Err(Error::DegenerateBox);
    }
    let iou = if union.item() > 0.0 { inter.div(&union)? } else { k(0.0) };
    let penalty = hull.sub(&union)?.div(&hull)?;
    Ok(iou.sub(&penalty)?.neg().add_scalar(1.0))
}

pub(crate) fn to_xyxy(b: &[f64; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = *b;
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}
