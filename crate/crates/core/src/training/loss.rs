//! Four-term refinement loss: cross-entropy, L1, L2, and an image-gradient
//! term computed with 3x3 Sobel operators on the soft mask.

use crate::diffcore::{
    abs, add, clamp, conv2d, ln, mean_all, mul, pad_replicate, scale, square, sub, Element,
    Tensor,
};
use crate::error::{CrmError, Result};

/// Prediction clamp inside the cross-entropy term.
const BCE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub l1: f64,
    pub l2: f64,
    pub grad: f64,
    pub total: f64,
}

/// Sobel pair as a fixed 2 x 1 x 3 x 3 convolution kernel.
fn sobel_kernel<T: Element>() -> Tensor<T> {
    let gx: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let data: Vec<T> = gx
        .iter()
        .chain(gy.iter())
        .map(|&v| T::from_f64(v))
        .collect();
    Tensor::from_vec(vec![2, 1, 3, 3], data)
}

/// Horizontal/vertical Sobel responses of a 1 x H x W map.
///
/// Replicate padding keeps the response of any constant map exactly zero,
/// borders included.
pub fn sobel<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let padded = pad_replicate(x, 1)?;
    conv2d(&padded, &sobel_kernel(), None, 1, 0)
}

/// Weighted sum of BCE, L1, L2 and Sobel-gradient terms.
///
/// `pred` must be a soft mask in (0, 1); `gt` may be binary or soft in
/// [0, 1]. Differentiable w.r.t. `pred`.
pub fn total_loss<T: Element>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    weights: [f64; 4],
) -> Result<(Tensor<T>, LossBreakdown)> {
    if pred.shape() != gt.shape() {
        return Err(CrmError::shape(format!(
            "total_loss: pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(CrmError::invalid("total_loss: negative loss weight"));
    }

    let ones = Tensor::full(pred.shape(), T::ONE);

    // BCE with clamped predictions.
    let p = clamp(pred, BCE_EPS, 1.0 - BCE_EPS);
    let one_minus_p = sub(&ones, &p)?;
    let one_minus_gt = sub(&ones, gt)?;
    let pos = mul(gt, &ln(&p))?;
    let neg = mul(&one_minus_gt, &ln(&one_minus_p))?;
    let bce = scale(&mean_all(&add(&pos, &neg)?), -1.0);

    let diff = sub(pred, gt)?;
    let l1 = mean_all(&abs(&diff));
    let l2 = mean_all(&square(&diff));

    let grad_diff = sub(&sobel(pred)?, &sobel(gt)?)?;
    let grad = mean_all(&abs(&grad_diff));

    let total = add(
        &add(&scale(&bce, weights[0]), &scale(&l1, weights[1]))?,
        &add(&scale(&l2, weights[2]), &scale(&grad, weights[3]))?,
    )?;

    let breakdown = LossBreakdown {
        bce: bce.item().to_f64(),
        l1: l1.item().to_f64(),
        l2: l2.item().to_f64(),
        grad: grad.item().to_f64(),
        total: total.item().to_f64(),
    };
    Ok((total, breakdown))
}
