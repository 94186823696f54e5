//! Independent reference implementations used to verify the fast paths.
//!
//! Nothing here is called by production code: these are brute-force
//! counterparts (two-pass statistics, central finite differences, explicit
//! outer-product decomposition) that the test suites compare the real
//! implementations against. They intentionally avoid sharing code with the
//! modules they check.

use crate::error::Result;
use crate::nn::{ce_dice_loss, BatchTensor, Model};
use crate::param::ParamVector;

/// Two-pass mean and sum of squared deviations of a scalar stream.
pub fn two_pass_mean_m2(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, m2)
}

/// Two-pass population variance.
pub fn two_pass_variance(values: &[f64]) -> f64 {
    let (_, m2) = two_pass_mean_m2(values);
    m2 / values.len() as f64
}

/// Central finite-difference gradient of the combined CE + Dice loss with
/// respect to every parameter, at the given step size.
pub fn fd_gradient(
    model: &Model,
    theta: &ParamVector,
    batch: &BatchTensor,
    head: usize,
    step: f64,
) -> Result<ParamVector> {
    let c = model.head(head)?.channels();
    let plane = batch.plane();
    let mut grad = vec![0.0; theta.len()];
    let mut probe = theta.clone();
    for j in 0..theta.len() {
        let orig = probe[j];
        probe[j] = orig + step;
        let plus = ce_dice_loss(
            &model.forward(&probe, batch, head, None)?,
            &batch.targets,
            batch.n,
            c,
            plane,
        )?
        .total;
        probe[j] = orig - step;
        let minus = ce_dice_loss(
            &model.forward(&probe, batch, head, None)?,
            &batch.targets,
            batch.n,
            c,
            plane,
        )?
        .total;
        probe[j] = orig;
        grad[j] = (plus - minus) / (2.0 * step);
    }
    Ok(ParamVector::from_vec(grad))
}

/// Two-sided relative error with an absolute floor for near-zero entries.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(floor)
}

/// Largest relative error between two gradients.
pub fn max_relative_error(a: &ParamVector, b: &ParamVector, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| relative_error(x, y, floor))
        .fold(0.0, f64::max)
}

/// Brute-force uncertainty decomposition through the full per-pixel
/// matrices: builds `diag(p_k) - p_k p_k^T` and `(p_k - p_bar)(p_k - p_bar)^T`
/// explicitly, averages them, and returns the two diagonals
/// (`[n][c][plane]` layout like the production path).
pub fn decompose_full_matrix_diagonals(
    per_sample: &[Vec<f64>],
    n: usize,
    channels: usize,
    plane: usize,
) -> (Vec<f64>, Vec<f64>) {
    let k = per_sample.len();
    let mut aleatoric = vec![0.0; n * channels * plane];
    let mut epistemic = vec![0.0; n * channels * plane];
    for ni in 0..n {
        for px in 0..plane {
            let at = |p: &Vec<f64>, ch: usize| p[ni * channels * plane + ch * plane + px];
            let mut p_bar = vec![0.0; channels];
            for p in per_sample {
                for (ch, pb) in p_bar.iter_mut().enumerate() {
                    *pb += at(p, ch);
                }
            }
            for pb in &mut p_bar {
                *pb /= k as f64;
            }
            // average the full matrices, then read off the diagonal
            let mut alea = vec![0.0; channels * channels];
            let mut epi = vec![0.0; channels * channels];
            for p in per_sample {
                for r in 0..channels {
                    for c in 0..channels {
                        let outer = at(p, r) * at(p, c);
                        let diag = if r == c { at(p, r) } else { 0.0 };
                        alea[r * channels + c] += diag - outer;
                        let dr = at(p, r) - p_bar[r];
                        let dc = at(p, c) - p_bar[c];
                        epi[r * channels + c] += dr * dc;
                    }
                }
            }
            for ch in 0..channels {
                let j = ni * channels * plane + ch * plane + px;
                aleatoric[j] = alea[ch * channels + ch] / k as f64;
                epistemic[j] = epi[ch * channels + ch] / k as f64;
            }
        }
    }
    (aleatoric, epistemic)
}
