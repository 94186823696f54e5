//! Online per-parameter mean/variance estimation.
//!
//! A [`WelfordAccumulator`] ingests a stream of parameter-sized vectors
//! (gradients or parameters, one per SGD step) and maintains the running mean
//! and the sum of squared deviations in constant memory: two vectors and a
//! counter, no matter how long the stream. The finalizers turn the
//! accumulated statistics into a clamped per-parameter client variance for
//! either estimation variant:
//!
//! - gradient-based: the gradient variance over the round is scaled by
//!   `T * eta^2` and added onto the received global variance;
//! - parameter-based: the population variance of the visited parameters is
//!   used directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;

/// Which client-variance estimator a ClientUpdate carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceMode {
    /// Gradient-based: track g_t, accumulate onto the received variance.
    FivaG,
    /// Parameter-based: track theta_t, population variance of the trajectory.
    FivaP,
    /// No tracking; the update carries an all-ones sentinel (FedAvg).
    None,
}

/// Lower/upper bounds applied to every finalized variance entry.
///
/// Inverse-variance weights need variances bounded away from zero and
/// infinity; the bounds are configurable and default to `[1e-8, 1e2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceClamp {
    pub min: f64,
    pub max: f64,
}

impl Default for VarianceClamp {
    fn default() -> Self {
        VarianceClamp { min: 1e-8, max: 1e2 }
    }
}

impl VarianceClamp {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min < 0.0 || max < min {
            return Err(Error::InvalidArgument(format!(
                "variance clamp must satisfy 0 <= min <= max, got [{min}, {max}]"
            )));
        }
        Ok(VarianceClamp { min, max })
    }

    pub fn apply(&self, mut v: ParamVector) -> ParamVector {
        v.clamp_in_place(self.min, self.max);
        v
    }
}

/// Running count, mean, and sum of squared deviations for a vector stream.
///
/// State is exactly two parameter-sized vectors plus one counter; together
/// with the finalized variance this is the three extra parameter-sized
/// arrays a tracking client keeps on top of standard training.
#[derive(Debug, Clone)]
pub struct WelfordAccumulator {
    t: u64,
    mean: ParamVector,
    m2: ParamVector,
}

impl WelfordAccumulator {
    /// Parameter-sized vectors held by the accumulator itself.
    pub const STATE_ARRAYS: usize = 2;

    pub fn new(len: usize) -> Self {
        WelfordAccumulator {
            t: 0,
            mean: ParamVector::zeros(len),
            m2: ParamVector::zeros(len),
        }
    }

    pub fn count(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn mean(&self) -> &ParamVector {
        &self.mean
    }

    pub fn m2(&self) -> &ParamVector {
        &self.m2
    }

    /// Total f64 slots held, independent of how many updates were ingested.
    pub fn state_size(&self) -> usize {
        self.mean.len() + self.m2.len()
    }

    pub fn reset(&mut self) {
        self.t = 0;
        self.mean.as_mut_slice().fill(0.0);
        self.m2.as_mut_slice().fill(0.0);
    }

    /// Ingest one observation:
    /// `mean += (x - mean)/t`, `m2 += (x - mean_old)*(x - mean_new)`.
    pub fn update(&mut self, x: &ParamVector) -> Result<()> {
        x.check_len(self.mean.len())?;
        if !x.all_finite() {
            return Err(Error::NonFinite("welford update"));
        }
        self.t += 1;
        let t = self.t as f64;
        let mean = self.mean.as_mut_slice();
        let m2 = self.m2.as_mut_slice();
        for ((m, s), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(x.iter()) {
            let delta = v - *m;
            *m += delta / t;
            *s += delta * (v - *m);
        }
        Ok(())
    }

    /// Population variance `m2 / t`, elementwise. Errors when no data was fed.
    pub fn finalize_variance(&self) -> Result<ParamVector> {
        if self.t == 0 {
            return Err(Error::NotEnoughData { need: 1, got: 0 });
        }
        let t = self.t as f64;
        Ok(self.m2.map(|s| s / t))
    }
}

/// A finalized, clamped per-parameter client variance.
#[derive(Debug, Clone)]
pub struct ClientVariance {
    pub sigma2: ParamVector,
    pub mode: VarianceMode,
}

/// Gradient-based finalization: `sigma2_prev + T * eta^2 * grad_var`, clamped.
///
/// `sigma2_prev` is the global variance the client received at the start of
/// the round; `eta` is the (effective) learning rate over the round's steps.
pub fn finalize_fiva_g(
    sigma2_prev: &ParamVector,
    grad_var: &ParamVector,
    steps: u64,
    eta: f64,
    clamp: VarianceClamp,
) -> Result<ClientVariance> {
    grad_var.check_len(sigma2_prev.len())?;
    if steps == 0 {
        return Err(Error::NotEnoughData { need: 1, got: 0 });
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {eta}"
        )));
    }
    if sigma2_prev.iter().any(|&v| v < 0.0) || grad_var.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(
            "variances must be non-negative".into(),
        ));
    }
    let scale = steps as f64 * eta * eta;
    let mut sigma2 = sigma2_prev.clone();
    sigma2.axpy(scale, grad_var)?;
    Ok(ClientVariance {
        sigma2: clamp.apply(sigma2),
        mode: VarianceMode::FivaG,
    })
}

/// Parameter-based finalization: population variance of the tracked
/// parameter trajectory, clamped. Needs at least two observations.
pub fn finalize_fiva_p(acc: &WelfordAccumulator, clamp: VarianceClamp) -> Result<ClientVariance> {
    if acc.count() < 2 {
        return Err(Error::NotEnoughData {
            need: 2,
            got: acc.count(),
        });
    }
    Ok(ClientVariance {
        sigma2: clamp.apply(acc.finalize_variance()?),
        mode: VarianceMode::FivaP,
    })
}
