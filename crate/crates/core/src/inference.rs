//! Inference with predictive uncertainty.
//!
//! Sampling-based uncertainty treats the global model as a Gaussian over
//! parameters: K perturbed models are drawn, each runs a forward pass, and
//! the per-pixel class probabilities are averaged. The spread decomposes
//! into a data-dependent (aleatoric) part and a model-dependent (epistemic)
//! part; only the diagonals of the two matrices are kept, and their trace
//! sum is the scalar total uncertainty.
//!
//! Head fusion maps every head's probabilities into the global label space
//! (each label averaged over the heads that know it). The fused uncertainty
//! field is decomposed over every (draw, head) sample lifted into the global
//! label space, so its epistemic part carries between-head disagreement: a
//! pixel where one head insists on background while another predicts a
//! foreground class scores high even when each head is individually
//! confident. With reweighting on, the background probability is scaled by
//! `1 - u_hat`, where `u_hat` is the total uncertainty clipped to [0, 1];
//! this suppresses false-background predictions in regions of high absolute
//! uncertainty.
//!
//! The MC-Dropout baseline produces its K samples with fresh dropout masks
//! instead of parameter perturbations and feeds the same decomposition.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{softmax_maps, Model};
use crate::param::ParamVector;
use crate::seeds::{self, domain};
use crate::server::GlobalState;

/// One draw from the global parameter distribution.
#[derive(Debug, Clone)]
pub struct SampledModel {
    pub theta: ParamVector,
}

/// Draw `theta_global + eps` with `eps_j ~ N(0, sigma2_global[j])`,
/// independently per parameter. Deterministic per seed.
pub fn sample_model(global: &GlobalState, seed: u64) -> SampledModel {
    let mut rng = seeds::rng(seed, &[domain::SAMPLE]);
    let theta = ParamVector::from_vec(
        global
            .theta
            .iter()
            .zip(global.sigma2.iter())
            .map(|(&t, &v)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                t + v.sqrt() * z
            })
            .collect(),
    );
    SampledModel { theta }
}

/// Per-pixel, per-class uncertainty diagonals plus the scalar total map.
/// Layouts: `aleatoric`/`epistemic` are `[n][c][plane]`, `total` is
/// `[n][plane]`.
#[derive(Debug, Clone)]
pub struct UncertaintyField {
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub total: Vec<f64>,
    pub channels: usize,
    pub n: usize,
    pub plane: usize,
}

impl UncertaintyField {
    pub fn zeros(n: usize, channels: usize, plane: usize) -> Self {
        UncertaintyField {
            aleatoric: vec![0.0; n * channels * plane],
            epistemic: vec![0.0; n * channels * plane],
            total: vec![0.0; n * plane],
            channels,
            n,
            plane,
        }
    }
}

/// Mean of the per-sample softmax outputs plus the retained samples.
///
/// Runs one forward pass per sampled model through the given head and
/// returns `(mean probs, all per-sample probs)`, each `[n][c][plane]`.
pub fn predictive_mean(
    samples: &[SampledModel],
    model: &Model,
    inputs: &[f64],
    n: usize,
    head: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if samples.is_empty() {
        return Err(Error::Empty("model samples"));
    }
    let c = model.head(head)?.channels();
    let plane = model.spec().grid.0 * model.spec().grid.1;
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let logits = model.forward_inputs(&s.theta, inputs, n, head, None)?;
        per_sample.push(softmax_maps(&logits, n, c, plane));
    }
    Ok((mean_probs(&per_sample), per_sample))
}

fn mean_probs(per_sample: &[Vec<f64>]) -> Vec<f64> {
    // anchored at the first sample so identical samples reproduce it exactly
    // and the epistemic term collapses to literal zero
    let k = per_sample.len() as f64;
    let first = &per_sample[0];
    let mut mean = vec![0.0; first.len()];
    for p in &per_sample[1..] {
        for (m, (&v, &f)) in mean.iter_mut().zip(p.iter().zip(first.iter())) {
            *m += v - f;
        }
    }
    for (m, &f) in mean.iter_mut().zip(first.iter()) {
        *m = f + *m / k;
    }
    mean
}

/// Aleatoric/epistemic decomposition of K probability samples.
///
/// Diagonals only: `aleatoric = (1/K) sum_k (p_k - p_k^2)` and
/// `epistemic = (1/K) sum_k (p_k - p_bar)^2`, elementwise; the total map is
/// the per-pixel sum over classes of both diagonals.
pub fn decompose_uncertainty(
    per_sample: &[Vec<f64>],
    n: usize,
    channels: usize,
    plane: usize,
) -> Result<UncertaintyField> {
    if per_sample.is_empty() {
        return Err(Error::Empty("probability samples"));
    }
    let len = n * channels * plane;
    for p in per_sample {
        if p.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                got: p.len(),
            });
        }
    }
    // probabilities must sum to one per pixel
    for p in per_sample {
        for ni in 0..n {
            for px in 0..plane {
                let s: f64 = (0..channels)
                    .map(|ch| p[ni * channels * plane + ch * plane + px])
                    .sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!(
                        "probability sample does not sum to 1 (got {s})"
                    )));
                }
            }
        }
    }
    let k = per_sample.len() as f64;
    let mean = mean_probs(per_sample);
    let mut field = UncertaintyField::zeros(n, channels, plane);
    for p in per_sample {
        for j in 0..len {
            field.aleatoric[j] += p[j] - p[j] * p[j];
            let d = p[j] - mean[j];
            field.epistemic[j] += d * d;
        }
    }
    for j in 0..len {
        field.aleatoric[j] /= k;
        field.epistemic[j] /= k;
    }
    for ni in 0..n {
        for px in 0..plane {
            let mut tot = 0.0;
            for ch in 0..channels {
                let j = ni * channels * plane + ch * plane + px;
                tot += field.aleatoric[j] + field.epistemic[j];
            }
            field.total[ni * plane + px] = tot;
        }
    }
    Ok(field)
}

/// Decompose uncertainty over every (draw, head) probability sample lifted
/// into the global label space (zero mass on labels a head does not know, so
/// each lifted sample stays a distribution). The epistemic diagonal then
/// carries between-head disagreement on top of the within-head spread.
pub fn pooled_uncertainty(
    per_head_samples: &[(Vec<u8>, Vec<Vec<f64>>)],
    num_global_labels: u8,
    n: usize,
    plane: usize,
) -> Result<UncertaintyField> {
    if per_head_samples.is_empty() {
        return Err(Error::Empty("head samples"));
    }
    let g = num_global_labels as usize;
    let mut lifted = Vec::new();
    for (labels, samples) in per_head_samples {
        let c = labels.len();
        for probs in samples {
            if probs.len() != n * c * plane {
                return Err(Error::DimensionMismatch {
                    expected: n * c * plane,
                    got: probs.len(),
                });
            }
            let mut lift = vec![0.0; n * g * plane];
            for ni in 0..n {
                for (ch, &l) in labels.iter().enumerate() {
                    let src = ni * c * plane + ch * plane;
                    let dst = ni * g * plane + (l as usize) * plane;
                    lift[dst..dst + plane].copy_from_slice(&probs[src..src + plane]);
                }
            }
            lifted.push(lift);
        }
    }
    decompose_uncertainty(&lifted, n, g, plane)
}

/// What fusion needs from one head: its channel-to-label map, the averaged
/// probabilities, and the head's uncertainty field.
#[derive(Debug, Clone)]
pub struct HeadPrediction {
    pub labels: Vec<u8>,
    /// `[n][channels][plane]` averaged probabilities.
    pub mean_probs: Vec<f64>,
    pub uncertainty: UncertaintyField,
}

/// Fused multi-head prediction over the global label space.
#[derive(Debug, Clone)]
pub struct FusedPrediction {
    /// `[n][num_labels][plane]`, renormalized per pixel.
    pub probs: Vec<f64>,
    /// `[n][plane]` argmax global labels.
    pub argmax: Vec<u8>,
    /// Uncertainty aggregated into the global label space.
    pub uncertainty: UncertaintyField,
    pub num_labels: usize,
    pub n: usize,
    pub plane: usize,
}

/// Average per-label probabilities over the heads that carry each label,
/// optionally reweighting the background channel by `1 - u_hat` before the
/// per-pixel renormalization. `uncertainty` is the field consumed by the
/// reweighting and attached to the result; [`pooled_uncertainty`] builds the
/// disagreement-aware one.
pub fn fuse_heads(
    heads: &[HeadPrediction],
    uncertainty: UncertaintyField,
    num_global_labels: u8,
    n: usize,
    plane: usize,
    reweight: bool,
) -> Result<FusedPrediction> {
    if heads.is_empty() {
        return Err(Error::Empty("head predictions"));
    }
    let g = num_global_labels as usize;
    if uncertainty.total.len() != n * plane {
        return Err(Error::DimensionMismatch {
            expected: n * plane,
            got: uncertainty.total.len(),
        });
    }
    let mut label_heads = vec![0usize; g];
    for h in heads {
        for &l in &h.labels {
            label_heads[l as usize] += 1;
        }
        let want = n * h.labels.len() * plane;
        if h.mean_probs.len() != want {
            return Err(Error::DimensionMismatch {
                expected: want,
                got: h.mean_probs.len(),
            });
        }
    }
    if let Some(missing) = label_heads.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "global label {missing} is present in no head"
        )));
    }

    let mut probs = vec![0.0; n * g * plane];
    let field = uncertainty;
    for h in heads {
        let c_h = h.labels.len();
        for (ch, &label) in h.labels.iter().enumerate() {
            let l = label as usize;
            for ni in 0..n {
                let src = ni * c_h * plane + ch * plane;
                let dst = ni * g * plane + l * plane;
                for px in 0..plane {
                    probs[dst + px] += h.mean_probs[src + px];
                }
            }
        }
    }
    for l in 0..g {
        let k = label_heads[l] as f64;
        for ni in 0..n {
            let base = ni * g * plane + l * plane;
            for px in 0..plane {
                probs[base + px] /= k;
            }
        }
    }

    if reweight {
        // absolute total uncertainty, clipped to [0, 1], scales background
        for ni in 0..n {
            let tot = &field.total[ni * plane..(ni + 1) * plane];
            let bg = ni * g * plane;
            for px in 0..plane {
                let u_hat = tot[px].clamp(0.0, 1.0);
                probs[bg + px] *= 1.0 - u_hat;
            }
        }
    }
    // renormalize per pixel
    let mut argmax = vec![0u8; n * plane];
    for ni in 0..n {
        for px in 0..plane {
            let mut sum = 0.0;
            for l in 0..g {
                sum += probs[ni * g * plane + l * plane + px];
            }
            let mut best = 0usize;
            let mut best_p = f64::NEG_INFINITY;
            for l in 0..g {
                let j = ni * g * plane + l * plane + px;
                probs[j] /= sum;
                if probs[j] > best_p {
                    best_p = probs[j];
                    best = l;
                }
            }
            argmax[ni * plane + px] = best as u8;
        }
    }
    Ok(FusedPrediction {
        probs,
        argmax,
        uncertainty: field,
        num_labels: g,
        n,
        plane,
    })
}

/// One stochastic forward pass with a fresh dropout mask; returns softmax
/// probabilities `[n][channels][plane]`.
pub fn mc_dropout_sample(
    model: &Model,
    theta: &ParamVector,
    inputs: &[f64],
    n: usize,
    head: usize,
    rate: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mask = model.dropout_mask(n, rate, seed)?;
    let c = model.head(head)?.channels();
    let plane = model.spec().grid.0 * model.spec().grid.1;
    let logits = model.forward_inputs(theta, inputs, n, head, Some(&mask))?;
    Ok(softmax_maps(&logits, n, c, plane))
}

/// How predictions are produced at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictMode {
    /// Deterministic forward pass of the global mean parameters.
    Plain,
    /// K draws from the global parameter distribution.
    Sampled { k: usize },
    /// K forward passes with fresh dropout masks at the global mean.
    McDropout { k: usize, rate: f64 },
}

/// Full inference pipeline: produce per-head probability samples according
/// to the mode, decompose their uncertainty per head, and fuse the selected
/// heads into a global-label prediction.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    model: &Model,
    global: &GlobalState,
    inputs: &[f64],
    n: usize,
    heads: &[usize],
    mode: PredictMode,
    reweight: bool,
    seed: u64,
) -> Result<FusedPrediction> {
    if heads.is_empty() {
        return Err(Error::Empty("head list"));
    }
    let plane = model.spec().grid.0 * model.spec().grid.1;
    let k = match mode {
        PredictMode::Plain => 1,
        PredictMode::Sampled { k } | PredictMode::McDropout { k, .. } => {
            if k == 0 {
                return Err(Error::InvalidArgument("k must be >= 1".into()));
            }
            k
        }
    };
    // per head, per draw probability maps
    let mut per_head: Vec<Vec<Vec<f64>>> = heads.iter().map(|_| Vec::with_capacity(k)).collect();
    for draw in 0..k {
        let draw_seed = seeds::mix(seed, &[domain::SAMPLE, draw as u64]);
        let (theta, mask) = match mode {
            PredictMode::Plain => (global.theta.clone(), None),
            PredictMode::Sampled { .. } => (sample_model(global, draw_seed).theta, None),
            PredictMode::McDropout { rate, .. } => (
                global.theta.clone(),
                Some(model.dropout_mask(n, rate, draw_seed)?),
            ),
        };
        let logits_all = model.forward_all_heads(&theta, inputs, n, mask.as_ref())?;
        for (slot, &h) in heads.iter().enumerate() {
            let c = model.head(h)?.channels();
            per_head[slot].push(softmax_maps(&logits_all[h], n, c, plane));
        }
    }
    let mut head_predictions = Vec::with_capacity(heads.len());
    let mut labeled_samples = Vec::with_capacity(heads.len());
    for (slot, &h) in heads.iter().enumerate() {
        let labels = model.head(h)?.labels.clone();
        let c = labels.len();
        let uncertainty = decompose_uncertainty(&per_head[slot], n, c, plane)?;
        head_predictions.push(HeadPrediction {
            labels: labels.clone(),
            mean_probs: mean_probs(&per_head[slot]),
            uncertainty,
        });
        labeled_samples.push((labels, std::mem::take(&mut per_head[slot])));
    }
    let pooled = pooled_uncertainty(
        &labeled_samples,
        model.spec().num_global_labels,
        n,
        plane,
    )?;
    fuse_heads(
        &head_predictions,
        pooled,
        model.spec().num_global_labels,
        n,
        plane,
        reweight,
    )
}
