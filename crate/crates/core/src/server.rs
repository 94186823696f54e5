//! Server-side aggregation.
//!
//! Two strategies: FedAvg (relative sample sizes as weights, reported
//! variances ignored) and inverse-variance averaging (per-parameter weights
//! `n_hat_i / sigma2_i`, plus a Bayesian variance update where the previous
//! global precision is kept with a forgetting factor).
//!
//! Multi-head models share only their backbone across clients: each head is
//! trained by exactly one client, so head parameter ranges are routed from
//! their owner's update instead of being averaged. Routing is configured
//! explicitly and absent by default (plain elementwise aggregation).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::welford::VarianceClamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FedAvg,
    Fiva,
}

/// Parameter range owned by a single client (its segmentation head).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadRouting {
    /// Index into the round's update list.
    pub owner: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub strategy: Strategy,
    /// Forgetting factor on the previous global precision.
    pub lambda: f64,
    pub clamp: VarianceClamp,
    /// Owner-routed parameter ranges; empty for single-head models.
    pub head_routing: Vec<HeadRouting>,
}

impl AggregationConfig {
    pub fn new(strategy: Strategy, lambda: f64, clamp: VarianceClamp) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be in [0, 1], got {lambda}"
            )));
        }
        Ok(AggregationConfig {
            strategy,
            lambda,
            clamp,
            head_routing: Vec::new(),
        })
    }
}

/// The global parameter distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub theta: ParamVector,
    pub sigma2: ParamVector,
    pub round: u64,
}

impl GlobalState {
    /// Round-0 state: freshly initialized parameters with unit variances.
    pub fn initial(theta: ParamVector, len: usize) -> GlobalState {
        debug_assert_eq!(theta.len(), len);
        GlobalState {
            theta,
            sigma2: ParamVector::ones(len),
            round: 0,
        }
    }
}

/// Minimal view of a client update the server needs.
pub trait UpdateView {
    fn theta(&self) -> &ParamVector;
    fn sigma2(&self) -> &ParamVector;
    fn num_samples(&self) -> usize;
}

impl UpdateView for crate::client::ClientUpdate {
    fn theta(&self) -> &ParamVector {
        &self.theta
    }
    fn sigma2(&self) -> &ParamVector {
        &self.sigma2
    }
    fn num_samples(&self) -> usize {
        self.num_samples
    }
}

/// A plain (theta, sigma2, n) triple for tests and fixtures.
#[derive(Debug, Clone)]
pub struct RawUpdate {
    pub theta: ParamVector,
    pub sigma2: ParamVector,
    pub num_samples: usize,
}

impl UpdateView for RawUpdate {
    fn theta(&self) -> &ParamVector {
        &self.theta
    }
    fn sigma2(&self) -> &ParamVector {
        &self.sigma2
    }
    fn num_samples(&self) -> usize {
        self.num_samples
    }
}

fn relative_sizes(updates: &[&dyn UpdateView]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::Empty("update list"));
    }
    let total: usize = updates.iter().map(|u| u.num_samples()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("all clients report zero samples".into()));
    }
    Ok(updates
        .iter()
        .map(|u| u.num_samples() as f64 / total as f64)
        .collect())
}

fn check_lengths(updates: &[&dyn UpdateView]) -> Result<usize> {
    let len = updates[0].theta().len();
    for u in updates {
        u.theta().check_len(len)?;
        u.sigma2().check_len(len)?;
    }
    Ok(len)
}

/// Per-parameter client weight `n_hat / sigma2`.
pub fn client_weight(n_hat: f64, sigma2: &ParamVector) -> ParamVector {
    sigma2.map(|v| n_hat / v)
}

/// Weighted parameter mean. FedAvg weights by relative sample sizes;
/// inverse-variance weights by `n_hat_i / sigma2_i` per parameter. Head
/// ranges are copied from their owners.
pub fn aggregate_mean(updates: &[&dyn UpdateView], config: &AggregationConfig) -> Result<ParamVector> {
    let n_hat = relative_sizes(updates)?;
    let len = check_lengths(updates)?;
    let mut out = ParamVector::zeros(len);
    match config.strategy {
        Strategy::FedAvg => {
            for (u, &w) in updates.iter().zip(&n_hat) {
                out.axpy(w, u.theta())?;
            }
        }
        Strategy::Fiva => {
            let mut weight_sum = vec![0.0; len];
            for (u, &nh) in updates.iter().zip(&n_hat) {
                let theta = u.theta().as_slice();
                let sigma2 = u.sigma2().as_slice();
                let acc = out.as_mut_slice();
                for j in 0..len {
                    let c = nh / sigma2[j];
                    acc[j] += c * theta[j];
                    weight_sum[j] += c;
                }
            }
            let acc = out.as_mut_slice();
            for j in 0..len {
                acc[j] /= weight_sum[j];
            }
        }
    }
    for routing in &config.head_routing {
        let owner = updates
            .get(routing.owner)
            .ok_or_else(|| Error::InvalidArgument(format!("no update {}", routing.owner)))?;
        out.as_mut_slice()[routing.start..routing.end]
            .copy_from_slice(&owner.theta().as_slice()[routing.start..routing.end]);
    }
    if !out.all_finite() {
        return Err(Error::NonFinite("aggregated mean"));
    }
    Ok(out)
}

/// Bayesian variance update: `(lambda / sigma2_prev + sum_i n_hat_i / sigma2_i)^-1`,
/// clamped. Head ranges take the owner's clamped variance.
pub fn aggregate_variance(
    updates: &[&dyn UpdateView],
    prev: &GlobalState,
    config: &AggregationConfig,
) -> Result<ParamVector> {
    let len = prev.sigma2.len();
    let mut precisions: Vec<f64> = prev.sigma2.iter().map(|v| config.lambda / v).collect();
    if !updates.is_empty() {
        let n_hat = relative_sizes(updates)?;
        let ulen = check_lengths(updates)?;
        if ulen != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                got: ulen,
            });
        }
        for (u, &nh) in updates.iter().zip(&n_hat) {
            let sigma2 = u.sigma2().as_slice();
            for (p, &s) in precisions.iter_mut().zip(sigma2) {
                *p += nh / s;
            }
        }
    }
    let mut out = ParamVector::from_vec(precisions.iter().map(|p| 1.0 / p).collect());
    for routing in &config.head_routing {
        let owner = updates
            .get(routing.owner)
            .ok_or_else(|| Error::InvalidArgument(format!("no update {}", routing.owner)))?;
        out.as_mut_slice()[routing.start..routing.end]
            .copy_from_slice(&owner.sigma2().as_slice()[routing.start..routing.end]);
    }
    Ok(config.clamp.apply(out))
}

/// Run one full aggregation: mean, variance (inverse-variance strategy only;
/// FedAvg keeps the previous sentinel), and the round increment.
pub fn aggregate_round(
    updates: &[&dyn UpdateView],
    prev: &GlobalState,
    config: &AggregationConfig,
) -> Result<GlobalState> {
    let theta = aggregate_mean(updates, config)?;
    let sigma2 = match config.strategy {
        Strategy::Fiva => aggregate_variance(updates, prev, config)?,
        Strategy::FedAvg => prev.sigma2.clone(),
    };
    Ok(GlobalState {
        theta,
        sigma2,
        round: prev.round + 1,
    })
}

/// Identical copies of the global distribution for every client, with the
/// round counter advanced.
pub fn broadcast(global: &GlobalState, num_clients: usize) -> Vec<GlobalState> {
    (0..num_clients)
        .map(|_| GlobalState {
            theta: global.theta.clone(),
            sigma2: global.sigma2.clone(),
            round: global.round + 1,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(theta: f64, sigma2: f64, n: usize) -> RawUpdate {
        RawUpdate {
            theta: ParamVector::from_vec(vec![theta]),
            sigma2: ParamVector::from_vec(vec![sigma2]),
            num_samples: n,
        }
    }

    fn config(strategy: Strategy, lambda: f64) -> AggregationConfig {
        AggregationConfig::new(strategy, lambda, VarianceClamp::default()).unwrap()
    }

    #[test]
    fn client_weight_hand_values() {
        let w = client_weight(0.5, &ParamVector::from_vec(vec![1.0]));
        assert_eq!(w[0], 0.5);
        let w = client_weight(0.5, &ParamVector::from_vec(vec![3.0]));
        assert!((w[0] - 1.0 / 6.0).abs() < 1e-15);
        // at the clamp ceiling the weight is minimal but stays positive
        let clamp = VarianceClamp::default();
        let w = client_weight(0.5, &ParamVector::from_vec(vec![clamp.max]));
        assert!(w[0] > 0.0);
    }

    #[test]
    fn equal_variances_reduce_to_fedavg() {
        let a = raw(0.0, 1.0, 10);
        let b = raw(2.0, 1.0, 10);
        let ups: Vec<&dyn UpdateView> = vec![&a, &b];
        let mean = aggregate_mean(&ups, &config(Strategy::Fiva, 0.95)).unwrap();
        assert!((mean[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fiva_mean_hand_value() {
        // n_hat = (0.5, 0.5), sigma2 = (1, 3), theta = (0, 2) -> 0.5
        let a = raw(0.0, 1.0, 10);
        let b = raw(2.0, 3.0, 10);
        let ups: Vec<&dyn UpdateView> = vec![&a, &b];
        let mean = aggregate_mean(&ups, &config(Strategy::Fiva, 0.95)).unwrap();
        assert!((mean[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_client_returns_its_theta() {
        let a = raw(1.234, 0.7, 42);
        let ups: Vec<&dyn UpdateView> = vec![&a];
        for strategy in [Strategy::FedAvg, Strategy::Fiva] {
            let mean = aggregate_mean(&ups, &config(strategy, 0.95)).unwrap();
            assert!((mean[0] - 1.234).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_update_list_errors() {
        let ups: Vec<&dyn UpdateView> = vec![];
        assert!(aggregate_mean(&ups, &config(Strategy::FedAvg, 0.95)).is_err());
    }

    #[test]
    fn variance_hand_value() {
        // lambda=0.95, prev=1, two clients with n_hat=0.5 sigma2=1:
        // (0.95 + 0.5 + 0.5)^-1 = 1/1.95
        let a = raw(0.0, 1.0, 10);
        let b = raw(0.0, 1.0, 10);
        let ups: Vec<&dyn UpdateView> = vec![&a, &b];
        let prev = GlobalState::initial(ParamVector::zeros(1), 1);
        let v = aggregate_variance(&ups, &prev, &config(Strategy::Fiva, 0.95)).unwrap();
        assert!((v[0] - 1.0 / 1.95).abs() < 1e-12);
    }

    #[test]
    fn variance_single_source_identity() {
        // lambda=0, one client with n_hat=1, sigma2=v -> v
        let a = raw(0.0, 0.37, 5);
        let ups: Vec<&dyn UpdateView> = vec![&a];
        let prev = GlobalState::initial(ParamVector::zeros(1), 1);
        let v = aggregate_variance(&ups, &prev, &config(Strategy::Fiva, 0.0)).unwrap();
        assert!((v[0] - 0.37).abs() < 1e-15);
    }

    #[test]
    fn variance_no_clients_keeps_prior_at_lambda_one() {
        let ups: Vec<&dyn UpdateView> = vec![];
        let mut prev = GlobalState::initial(ParamVector::zeros(1), 1);
        prev.sigma2 = ParamVector::from_vec(vec![0.5]);
        let v = aggregate_variance(&ups, &prev, &config(Strategy::Fiva, 1.0)).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn broadcast_copies_state_and_advances_round() {
        let mut global = GlobalState::initial(ParamVector::from_vec(vec![0.1, 0.2]), 2);
        global.round = 6;
        let states = broadcast(&global, 3);
        assert_eq!(states.len(), 3);
        for s in &states {
            assert_eq!(s.theta, global.theta);
            assert_eq!(s.sigma2, global.sigma2);
            assert_eq!(s.round, 7);
        }
    }

    #[test]
    fn head_routing_takes_owner_values() {
        let a = RawUpdate {
            theta: ParamVector::from_vec(vec![1.0, 10.0]),
            sigma2: ParamVector::from_vec(vec![1.0, 0.5]),
            num_samples: 10,
        };
        let b = RawUpdate {
            theta: ParamVector::from_vec(vec![3.0, 20.0]),
            sigma2: ParamVector::from_vec(vec![1.0, 2.0]),
            num_samples: 10,
        };
        let ups: Vec<&dyn UpdateView> = vec![&a, &b];
        let mut cfg = config(Strategy::Fiva, 0.95);
        cfg.head_routing = vec![HeadRouting {
            owner: 1,
            start: 1,
            end: 2,
        }];
        let mean = aggregate_mean(&ups, &cfg).unwrap();
        assert!((mean[0] - 2.0).abs() < 1e-12); // averaged backbone
        assert_eq!(mean[1], 20.0); // owner-routed head
        let prev = GlobalState::initial(ParamVector::zeros(2), 2);
        let var = aggregate_variance(&ups, &prev, &cfg).unwrap();
        assert_eq!(var[1], 2.0);
    }

    #[test]
    fn lambda_out_of_range_rejected() {
        assert!(AggregationConfig::new(Strategy::Fiva, 1.5, VarianceClamp::default()).is_err());
        assert!(AggregationConfig::new(Strategy::Fiva, -0.1, VarianceClamp::default()).is_err());
    }
}
