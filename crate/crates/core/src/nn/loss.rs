//! Combined cross-entropy + soft-Dice segmentation loss.
//!
//! Both parts are mean-reduced over the batch. Cross-entropy averages the
//! per-pixel negative log-likelihood over all pixels of all samples; the
//! Dice part is computed per sample (sums over that sample's pixels, one
//! score per class, averaged over classes) and then averaged over samples,
//! so duplicating a single-sample batch leaves loss and gradient unchanged.

use crate::error::{Error, Result};

/// Smoothing constant added to the Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Loss split into its two summands; `total = ce_part + dice_part`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub ce_part: f64,
    pub dice_part: f64,
}

/// Numerically stable per-pixel softmax over the channel axis of a flat
/// `[n][c][plane]`-shaped logit buffer (channel stride = `plane`).
pub fn softmax_maps(logits: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    debug_assert_eq!(logits.len(), n * c * plane);
    let mut probs = vec![0.0; logits.len()];
    for ni in 0..n {
        let base = ni * c * plane;
        for px in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(logits[base + ch * plane + px]);
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (logits[base + ch * plane + px] - max).exp();
                probs[base + ch * plane + px] = e;
                sum += e;
            }
            for ch in 0..c {
                probs[base + ch * plane + px] /= sum;
            }
        }
    }
    probs
}

/// Softmax of one contiguous logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    softmax_maps(logits, 1, logits.len(), 1)
}

/// Loss value only (used by finite-difference oracles).
pub fn ce_dice_loss(logits: &[f64], targets: &[u8], n: usize, c: usize, plane: usize) -> Result<LossValue> {
    let (loss, _) = loss_impl(logits, targets, n, c, plane, false)?;
    Ok(loss)
}

/// Loss together with its gradient with respect to the logits.
pub fn ce_dice_loss_and_grad(
    logits: &[f64],
    targets: &[u8],
    n: usize,
    c: usize,
    plane: usize,
) -> Result<(LossValue, Vec<f64>)> {
    let (loss, grad) = loss_impl(logits, targets, n, c, plane, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

#[allow(clippy::needless_range_loop)]
fn loss_impl(
    logits: &[f64],
    targets: &[u8],
    n: usize,
    c: usize,
    plane: usize,
    want_grad: bool,
) -> Result<(LossValue, Option<Vec<f64>>)> {
    if logits.len() != n * c * plane {
        return Err(Error::DimensionMismatch {
            expected: n * c * plane,
            got: logits.len(),
        });
    }
    if targets.len() != n * plane {
        return Err(Error::DimensionMismatch {
            expected: n * plane,
            got: targets.len(),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| (t as usize) >= c) {
        return Err(Error::InvalidArgument(format!(
            "target label {bad} out of range for {c} channels"
        )));
    }
    let probs = softmax_maps(logits, n, c, plane);
    let total_px = (n * plane) as f64;

    let mut ce = 0.0;
    let mut dice_sum = 0.0;
    let mut grad = if want_grad {
        Some(vec![0.0; logits.len()])
    } else {
        None
    };

    // Per-sample Dice statistics: intersections and per-class mass.
    let mut inter = vec![0.0; c];
    let mut p_sum = vec![0.0; c];
    let mut t_cnt = vec![0.0; c];
    // dL_dice/dp for the current sample, reused buffer.
    let mut dp = vec![0.0; c * plane];

    for ni in 0..n {
        let base = ni * c * plane;
        inter.fill(0.0);
        p_sum.fill(0.0);
        t_cnt.fill(0.0);
        for px in 0..plane {
            let t = targets[ni * plane + px] as usize;
            let pt = probs[base + t * plane + px];
            ce -= pt.max(f64::MIN_POSITIVE).ln();
            inter[t] += pt;
            t_cnt[t] += 1.0;
            for ch in 0..c {
                p_sum[ch] += probs[base + ch * plane + px];
            }
        }
        // Soft Dice per class: (2*I + s) / (P + T + s), averaged over classes.
        let mut dice_mean = 0.0;
        for ch in 0..c {
            let num = 2.0 * inter[ch] + DICE_SMOOTH;
            let den = p_sum[ch] + t_cnt[ch] + DICE_SMOOTH;
            dice_mean += num / den;
        }
        dice_mean /= c as f64;
        dice_sum += 1.0 - dice_mean;

        if let Some(grad) = grad.as_mut() {
            // d(1 - mean_c dice_c)/dp_ch(px) =
            //   -(1/C) * (2*[t==ch]*(P+T+s) - (2I+s)) / (P+T+s)^2
            // then through softmax; CE uses the closed form (p - onehot)/N_px.
            let inv_c = 1.0 / c as f64;
            for px in 0..plane {
                let t = targets[ni * plane + px] as usize;
                for ch in 0..c {
                    let num = 2.0 * inter[ch] + DICE_SMOOTH;
                    let den = p_sum[ch] + t_cnt[ch] + DICE_SMOOTH;
                    let indicator = if ch == t { 2.0 } else { 0.0 };
                    dp[ch * plane + px] = -inv_c * (indicator * den - num) / (den * den);
                }
            }
            let inv_n = 1.0 / n as f64;
            for px in 0..plane {
                let t = targets[ni * plane + px] as usize;
                // softmax chain for the Dice term: dz_i = p_i*(g_i - sum_c g_c p_c)
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += dp[ch * plane + px] * probs[base + ch * plane + px];
                }
                for ch in 0..c {
                    let p = probs[base + ch * plane + px];
                    let ce_term = (p - if ch == t { 1.0 } else { 0.0 }) / total_px;
                    let dice_term = inv_n * p * (dp[ch * plane + px] - dot);
                    grad[base + ch * plane + px] = ce_term + dice_term;
                }
            }
        }
    }

    let ce_part = ce / total_px;
    let dice_part = dice_sum / n as f64;
    let total = ce_part + dice_part;
    if !total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok((
        LossValue {
            total,
            ce_part,
            dice_part,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_pair() {
        let p = softmax(&[0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_one_two_three() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p[0] - 0.09003).abs() < 1e-5);
        assert!((p[1] - 0.24473).abs() < 1e-5);
        assert!((p[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one_at_extreme_magnitudes() {
        let logits = vec![-1e3, 0.0, 1e3, 500.0, -999.0, 1.0];
        let p = softmax_maps(&logits, 1, 2, 3);
        for px in 0..3 {
            let s = p[px] + p[3 + px];
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_prediction_reaches_loss_floor() {
        // Huge logits on the target channel: CE -> 0, Dice -> 0.
        let plane = 4;
        let targets = [0u8, 1, 1, 0];
        let mut logits = vec![-30.0; 2 * plane];
        for (px, &t) in targets.iter().enumerate() {
            logits[t as usize * plane + px] = 30.0;
        }
        let loss = ce_dice_loss(&logits, &targets, 1, 2, plane).unwrap();
        assert!(loss.ce_part < 1e-6, "ce = {}", loss.ce_part);
        assert!(loss.dice_part < 1e-6, "dice = {}", loss.dice_part);
        assert!((loss.total - loss.ce_part - loss.dice_part).abs() < 1e-15);
    }

    #[test]
    fn duplicated_single_sample_batch_keeps_loss_and_halves_logit_grads() {
        // Loss is mean-reduced, so duplicating the sample leaves it alone;
        // each copy then carries half the logit gradient (the parameter
        // gradient, which sums over copies, is what stays unchanged).
        let plane = 4;
        let logits = [0.3, -0.2, 0.9, 0.1, -0.5, 0.8, 0.2, -0.1];
        let targets = [0u8, 1, 0, 1];
        let (l1, g1) = ce_dice_loss_and_grad(&logits, &targets, 1, 2, plane).unwrap();
        let mut logits2 = logits.to_vec();
        logits2.extend_from_slice(&logits);
        let mut targets2 = targets.to_vec();
        targets2.extend_from_slice(&targets);
        let (l2, g2) = ce_dice_loss_and_grad(&logits2, &targets2, 2, 2, plane).unwrap();
        assert!((l1.total - l2.total).abs() < 1e-12);
        for (i, a) in g1.iter().enumerate() {
            assert!((g2[i] - a / 2.0).abs() < 1e-12);
            assert!((g2[i + g1.len()] - a / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range_target() {
        let logits = vec![0.0; 2];
        assert!(ce_dice_loss(&logits, &[2u8], 1, 2, 1).is_err());
    }
}
