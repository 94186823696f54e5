//! Client-side local training.
//!
//! One federation round on a client is T mini-batch SGD steps starting from
//! the broadcast global parameters, with the variance tracker fed after
//! every step (gradients for the gradient-based variant, parameters for the
//! parameter-based one). The round returns the final parameters, the
//! finalized clamped variance, and the client's sample count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchTensor, Model};
use crate::param::ParamVector;
use crate::seeds::{self, domain};
use crate::server::GlobalState;
use crate::synthdata::ClientDataset;
use crate::welford::{
    finalize_fiva_g, finalize_fiva_p, ClientVariance, VarianceClamp, VarianceMode,
    WelfordAccumulator,
};

/// Polynomial learning-rate decay over the full experiment:
/// `eta(s) = eta0 * (1 - s/total)^exponent`, reaching zero at `s = total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyLr {
    pub eta0: f64,
    pub exponent: f64,
    pub total_steps: u64,
}

impl PolyLr {
    pub fn at(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        let frac = 1.0 - step as f64 / self.total_steps as f64;
        self.eta0 * frac.powf(self.exponent)
    }
}

/// Nesterov momentum settings (off = plain SGD).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Momentum {
    pub mu: f64,
    pub nesterov: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub client_id: usize,
    /// Local SGD steps per federation round.
    pub local_steps: u64,
    pub batch_size: usize,
    pub schedule: PolyLr,
    pub momentum: Option<Momentum>,
    pub variance_mode: VarianceMode,
    pub clamp: VarianceClamp,
    pub seed: u64,
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(Error::InvalidArgument("local_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.schedule.eta0 > 0.0) {
            return Err(Error::InvalidArgument(
                "initial learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// What a client sends to the server at the end of a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub theta: ParamVector,
    pub sigma2: ParamVector,
    pub num_samples: usize,
    pub mode: VarianceMode,
    /// Mean training loss over the round's steps, for monitoring.
    pub mean_loss: f64,
}

/// Momentum buffer; reset at the start of every round so that a round is a
/// pure function of the broadcast state.
#[derive(Debug, Clone)]
pub struct MomentumState {
    velocity: ParamVector,
}

impl MomentumState {
    pub fn new(len: usize) -> Self {
        MomentumState {
            velocity: ParamVector::zeros(len),
        }
    }
}

/// One SGD step in place. Plain: `theta -= eta * g`. With momentum:
/// `v = mu*v + g`, then `theta -= eta * (g + mu*v)` (Nesterov) or
/// `theta -= eta * v` (classical).
pub fn sgd_step(
    theta: &mut ParamVector,
    grad: &ParamVector,
    eta: f64,
    momentum: Option<(&Momentum, &mut MomentumState)>,
) -> Result<()> {
    grad.check_len(theta.len())?;
    if !grad.all_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    match momentum {
        None => theta.axpy(-eta, grad)?,
        Some((m, state)) => {
            let v = state.velocity.as_mut_slice();
            let th = theta.as_mut_slice();
            if m.nesterov {
                for ((vi, ti), &gi) in v.iter_mut().zip(th.iter_mut()).zip(grad.iter()) {
                    *vi = m.mu * *vi + gi;
                    *ti -= eta * (gi + m.mu * *vi);
                }
            } else {
                for ((vi, ti), &gi) in v.iter_mut().zip(th.iter_mut()).zip(grad.iter()) {
                    *vi = m.mu * *vi + gi;
                    *ti -= eta * *vi;
                }
            }
        }
    }
    Ok(())
}

/// Deterministic 80/20 train/validation index split.
#[derive(Debug, Clone)]
pub struct SplitDataset<'a> {
    pub data: &'a ClientDataset,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffle the dataset once (seeded) and reserve the last 20% of the
/// permutation for validation.
pub fn split_80_20(data: &ClientDataset, seed: u64) -> SplitDataset<'_> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = seeds::rng(seed, &[domain::SPLIT, data.provenance.client_id as u64]);
    idx.shuffle(&mut rng);
    let n_train = ((data.len() as f64) * 0.8).ceil() as usize;
    let n_train = n_train.max(1).min(data.len());
    let val = idx.split_off(n_train);
    SplitDataset {
        data,
        train: idx,
        val,
    }
}

/// Assemble the mini-batch for a given global step: shuffled
/// without-replacement epochs over the training split, deterministic per
/// `(seed, step)`. Targets are translated into the head's local channels.
pub fn batch_sampler(
    split: &SplitDataset<'_>,
    head_labels: &[u8],
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Result<BatchTensor> {
    use rand::seq::SliceRandom;
    let n_train = split.train.len();
    if n_train == 0 {
        return Err(Error::Empty("training split"));
    }
    if batch_size > n_train {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} exceeds training split size {n_train}"
        )));
    }
    let batches_per_epoch = (n_train / batch_size) as u64;
    let epoch = step / batches_per_epoch;
    let slot = (step % batches_per_epoch) as usize;
    let mut order: Vec<usize> = split.train.clone();
    let mut rng = seeds::rng(seed, &[domain::BATCH, epoch]);
    order.shuffle(&mut rng);
    let chosen = &order[slot * batch_size..(slot + 1) * batch_size];

    let (h, w) = split.data.grid;
    let plane = h * w;
    let mut inputs = Vec::with_capacity(chosen.len() * plane);
    let mut targets = Vec::with_capacity(chosen.len() * plane);
    for &i in chosen {
        let sample = &split.data.samples[i];
        inputs.extend_from_slice(&sample.image);
        for &global in &sample.visible_labels {
            let local = head_labels
                .iter()
                .position(|&l| l == global)
                .unwrap_or(0) as u8;
            targets.push(local);
        }
    }
    Ok(BatchTensor {
        inputs,
        targets,
        n: chosen.len(),
        h,
        w,
        provenance: split.data.provenance,
    })
}

/// Run one full local round: exactly T steps from the broadcast state,
/// tracker fed after every step, deterministic given the seed.
///
/// `head` is the index of this client's segmentation head; `round` selects
/// the schedule position and the batch stream offset.
pub fn local_round(
    start: &GlobalState,
    config: &ClientConfig,
    model: &Model,
    split: &SplitDataset<'_>,
    round: u64,
    head: usize,
) -> Result<ClientUpdate> {
    config.validate()?;
    if split.data.is_empty() {
        return Err(Error::Empty("client dataset"));
    }
    if split.data.provenance.holdout {
        return Err(Error::HoldoutLeak(split.data.spec.name.clone()));
    }
    start.theta.check_len(model.param_len())?;
    let head_labels = &model.head(head)?.labels;

    let mut theta = start.theta.clone();
    let mut acc = WelfordAccumulator::new(theta.len());
    let mut momentum_state = MomentumState::new(theta.len());
    let mut eta_sq_sum = 0.0;
    let mut loss_sum = 0.0;
    let t_steps = config.local_steps;

    for t in 0..t_steps {
        let step = round * t_steps + t;
        let eta = config.schedule.at(step);
        let batch = batch_sampler(split, head_labels, config.batch_size, config.seed, step)?;
        if batch.provenance.holdout {
            return Err(Error::HoldoutLeak(split.data.spec.name.clone()));
        }
        let (loss, grad) = model.backward(&theta, &batch, head)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at round {round} step {t}"
            )));
        }
        loss_sum += loss.total;
        sgd_step(
            &mut theta,
            &grad,
            eta,
            config.momentum.as_ref().map(|m| (m, &mut momentum_state)),
        )?;
        eta_sq_sum += eta * eta;
        match config.variance_mode {
            VarianceMode::FivaG => acc.update(&grad)?,
            VarianceMode::FivaP => acc.update(&theta)?,
            VarianceMode::None => {}
        }
    }

    let sigma2 = match config.variance_mode {
        VarianceMode::FivaG => {
            // Effective per-step rate: root mean square of the schedule over
            // the round, equal to the constant eta when the schedule is flat.
            let eta_eff = (eta_sq_sum / t_steps as f64).sqrt();
            let grad_var = acc.finalize_variance()?;
            if eta_eff > 0.0 {
                finalize_fiva_g(&start.sigma2, &grad_var, t_steps, eta_eff, config.clamp)?
            } else {
                // schedule exhausted: no parameter movement this round
                ClientVariance {
                    sigma2: config.clamp.apply(start.sigma2.clone()),
                    mode: VarianceMode::FivaG,
                }
            }
        }
        VarianceMode::FivaP => finalize_fiva_p(&acc, config.clamp)?,
        VarianceMode::None => ClientVariance {
            sigma2: ParamVector::ones(theta.len()),
            mode: VarianceMode::None,
        },
    };

    Ok(ClientUpdate {
        theta,
        sigma2: sigma2.sigma2,
        num_samples: split.train.len(),
        mode: config.variance_mode,
        mean_loss: loss_sum / t_steps as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, BackboneSpec, HeadSpec, ModelSpec};
    use crate::synthdata::{generate_client_dataset, ShapeWorldSpec};

    #[test]
    fn poly_lr_decays_to_zero() {
        let lr = PolyLr {
            eta0: 0.01,
            exponent: 0.9,
            total_steps: 100,
        };
        assert_eq!(lr.at(0), 0.01);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let v = lr.at(s);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
        assert_eq!(lr.at(100), 0.0);
        assert_eq!(lr.at(500), 0.0);
    }

    #[test]
    fn plain_sgd_hand_values() {
        let mut theta = ParamVector::from_vec(vec![1.0]);
        let g = ParamVector::from_vec(vec![0.5]);
        sgd_step(&mut theta, &g, 0.1, None).unwrap();
        assert!((theta[0] - 0.95).abs() < 1e-15);

        // zero gradient leaves theta unchanged
        let mut theta = ParamVector::from_vec(vec![0.3, -0.7]);
        let z = ParamVector::zeros(2);
        sgd_step(&mut theta, &z, 0.5, None).unwrap();
        assert_eq!(theta.as_slice(), &[0.3, -0.7]);

        // two steps with constant g: theta0 - 2*eta*g
        let mut theta = ParamVector::from_vec(vec![2.0]);
        let g = ParamVector::from_vec(vec![0.25]);
        sgd_step(&mut theta, &g, 0.2, None).unwrap();
        sgd_step(&mut theta, &g, 0.2, None).unwrap();
        assert!((theta[0] - (2.0 - 2.0 * 0.2 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn nesterov_momentum_matches_hand_recurrence() {
        let m = Momentum {
            mu: 0.9,
            nesterov: true,
        };
        let mut theta = ParamVector::from_vec(vec![1.0]);
        let mut state = MomentumState::new(1);
        let g = ParamVector::from_vec(vec![0.5]);
        // step 1: v = 0.5; theta -= 0.1*(0.5 + 0.9*0.5) = 1 - 0.095
        sgd_step(&mut theta, &g, 0.1, Some((&m, &mut state))).unwrap();
        assert!((theta[0] - 0.905).abs() < 1e-15);
        // step 2: v = 0.9*0.5 + 0.5 = 0.95; theta -= 0.1*(0.5 + 0.855)
        sgd_step(&mut theta, &g, 0.1, Some((&m, &mut state))).unwrap();
        assert!((theta[0] - (0.905 - 0.1 * (0.5 + 0.9 * 0.95))).abs() < 1e-14);
    }

    #[test]
    fn sgd_rejects_nonfinite_gradient() {
        let mut theta = ParamVector::from_vec(vec![1.0]);
        let g = ParamVector::from_vec(vec![f64::NAN]);
        assert!(sgd_step(&mut theta, &g, 0.1, None).is_err());
    }

    fn tiny_world() -> ShapeWorldSpec {
        let mut spec = ShapeWorldSpec::default_roster((16, 16));
        for c in &mut spec.clients {
            c.samples = 10;
        }
        spec.holdout.samples = 5;
        spec
    }

    fn tiny_model(world: &ShapeWorldSpec) -> Model {
        let heads = world
            .clients
            .iter()
            .map(|c| {
                let mut labels = vec![0u8];
                labels.extend_from_slice(&c.labels);
                HeadSpec::new(labels)
            })
            .collect();
        Model::new(ModelSpec {
            grid: world.grid,
            backbone: BackboneSpec::Conv { channels: 2 },
            heads,
            activation: Activation::Silu,
            dropout_rate: 0.0,
            num_global_labels: world.num_global_labels(),
        })
        .unwrap()
    }

    fn tiny_config(mode: VarianceMode) -> ClientConfig {
        ClientConfig {
            client_id: 0,
            local_steps: 4,
            batch_size: 2,
            schedule: PolyLr {
                eta0: 0.05,
                exponent: 0.9,
                total_steps: 40,
            },
            momentum: None,
            variance_mode: mode,
            clamp: VarianceClamp::default(),
            seed: 11,
        }
    }

    #[test]
    fn split_is_disjoint_and_80_20() {
        let world = tiny_world();
        let mut spec = world.clone();
        spec.clients[0].samples = 100;
        let data = generate_client_dataset(&spec, 0).unwrap();
        let split = split_80_20(&data, 5);
        assert_eq!(split.train.len(), 80);
        assert_eq!(split.val.len(), 20);
        let mut all: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn sampler_is_deterministic_and_full_batch_epochs() {
        let world = tiny_world();
        let data = generate_client_dataset(&world, 0).unwrap();
        let split = split_80_20(&data, 5);
        let labels = [0u8, 1, 2, 3, 4];
        let a = batch_sampler(&split, &labels, 2, 9, 3).unwrap();
        let b = batch_sampler(&split, &labels, 2, 9, 3).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.targets, b.targets);

        // batch size = full training split: one batch per epoch
        let full = batch_sampler(&split, &labels, split.train.len(), 9, 0).unwrap();
        assert_eq!(full.n, split.train.len());
        assert!(batch_sampler(&split, &labels, split.train.len() + 1, 9, 0).is_err());
    }

    #[test]
    fn epochs_are_without_replacement() {
        let world = tiny_world();
        let data = generate_client_dataset(&world, 0).unwrap();
        let split = split_80_20(&data, 5);
        let labels = [0u8, 1, 2, 3, 4];
        // 8 training samples, batch 2 -> 4 batches per epoch; collect one epoch
        let mut seen = Vec::new();
        for step in 0..4 {
            let b = batch_sampler(&split, &labels, 2, 9, step).unwrap();
            // recover which samples these were by matching images
            for s in 0..b.n {
                let img = &b.inputs[s * b.plane()..(s + 1) * b.plane()];
                let idx = split
                    .data
                    .samples
                    .iter()
                    .position(|smp| smp.image == img)
                    .unwrap();
                seen.push(idx);
            }
        }
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn zero_learning_rate_keeps_theta_and_clamps_variance() {
        let world = tiny_world();
        let data = generate_client_dataset(&world, 0).unwrap();
        let split = split_80_20(&data, 5);
        let model = tiny_model(&world);
        let mut config = tiny_config(VarianceMode::FivaP);
        // schedule already exhausted: every step has eta = 0
        config.schedule.total_steps = 1;
        let start = GlobalState::initial(model.init(3), model.param_len());
        let update = local_round(&start, &config, &model, &split, 5, 0).unwrap();
        assert_eq!(update.theta, start.theta);
        assert!(update
            .sigma2
            .iter()
            .all(|&v| v == config.clamp.min));
    }

    #[test]
    fn fedavg_mode_returns_ones_sentinel() {
        let world = tiny_world();
        let data = generate_client_dataset(&world, 0).unwrap();
        let split = split_80_20(&data, 5);
        let model = tiny_model(&world);
        let config = tiny_config(VarianceMode::None);
        let start = GlobalState::initial(model.init(3), model.param_len());
        let update = local_round(&start, &config, &model, &split, 0, 0).unwrap();
        assert!(update.sigma2.iter().all(|&v| v == 1.0));
        assert_eq!(update.num_samples, split.train.len());
    }

    #[test]
    fn tracking_never_perturbs_the_trajectory() {
        let world = tiny_world();
        let data = generate_client_dataset(&world, 0).unwrap();
        let split = split_80_20(&data, 5);
        let model = tiny_model(&world);
        let start = GlobalState::initial(model.init(3), model.param_len());
        let a = local_round(&start, &tiny_config(VarianceMode::None), &model, &split, 0, 0)
            .unwrap();
        let b = local_round(&start, &tiny_config(VarianceMode::FivaP), &model, &split, 0, 0)
            .unwrap();
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn theta_ignores_start_sigma2() {
        let world = tiny_world();
        let data = generate_client_dataset(&world, 0).unwrap();
        let split = split_80_20(&data, 5);
        let model = tiny_model(&world);
        let mut start = GlobalState::initial(model.init(3), model.param_len());
        let a = local_round(&start, &tiny_config(VarianceMode::FivaP), &model, &split, 0, 0)
            .unwrap();
        start.sigma2 = start.sigma2.map(|_| 0.123);
        let b = local_round(&start, &tiny_config(VarianceMode::FivaP), &model, &split, 0, 0)
            .unwrap();
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn holdout_data_is_refused() {
        let world = tiny_world();
        let data = generate_client_dataset(&world, world.clients.len()).unwrap();
        let split = split_80_20(&data, 5);
        let model = tiny_model(&world);
        let start = GlobalState::initial(model.init(3), model.param_len());
        let err = local_round(&start, &tiny_config(VarianceMode::None), &model, &split, 0, 0);
        assert!(matches!(err, Err(Error::HoldoutLeak(_))));
    }

    #[test]
    fn one_parameter_hand_simulation() {
        // Hand-run of the step/track/finalize chain on a 1-parameter model:
        // plain SGD, eta = 0.1, gradients (1.0, -2.0, 3.0) from theta0 = 0.
        //   theta: -0.1, 0.1, -0.2
        // FIVA-P: population variance of the theta trajectory:
        //   mean = -0.0666..., var = mean of squared devs = 0.01555...
        // FIVA-G: grad variance = var(1,-2,3) = 4.2222...,
        //   sigma2 = 0 + 3 * 0.01 * 4.2222... = 0.126666...
        let thetas = [-0.1, 0.1, -0.2];
        let mean: f64 = thetas.iter().sum::<f64>() / 3.0;
        let var_p: f64 = thetas.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / 3.0;

        let grads = [1.0, -2.0, 3.0];
        let gmean: f64 = grads.iter().sum::<f64>() / 3.0;
        let var_g: f64 = grads.iter().map(|g| (g - gmean) * (g - gmean)).sum::<f64>() / 3.0;

        let mut theta = ParamVector::zeros(1);
        let mut acc_p = WelfordAccumulator::new(1);
        let mut acc_g = WelfordAccumulator::new(1);
        for &g in &grads {
            let gv = ParamVector::from_vec(vec![g]);
            sgd_step(&mut theta, &gv, 0.1, None).unwrap();
            acc_p.update(&theta).unwrap();
            acc_g.update(&gv).unwrap();
        }
        assert!((theta[0] - (-0.2)).abs() < 1e-15);

        let clamp = VarianceClamp::default();
        let p = finalize_fiva_p(&acc_p, clamp).unwrap();
        assert!((p.sigma2[0] - var_p).abs() < 1e-12);

        let g = finalize_fiva_g(
            &ParamVector::zeros(1),
            &acc_g.finalize_variance().unwrap(),
            3,
            0.1,
            clamp,
        )
        .unwrap();
        assert!((g.sigma2[0] - 3.0 * 0.01 * var_g).abs() < 1e-12);
    }
}
