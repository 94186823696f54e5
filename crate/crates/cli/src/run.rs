//! Experiment orchestration: the three training regimes, the round loop
//! with checkpointing, and evaluation.
//!
//! Determinism contract: every random draw is keyed by the experiment seed
//! plus structural indices (client, round, repeat), so reruns and resumed
//! runs produce byte-identical results tables and checkpoints. Round
//! boundaries quantize parameters to the checkpoint's 32-bit storage
//! precision, which makes a resume from disk indistinguishable from a
//! continuous run. Wall-clock timings go into their own file.

use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fiva_core::client::{
    batch_sampler, local_round, sgd_step, ClientUpdate, MomentumState, SplitDataset,
};
use fiva_core::error::{Error, Result};
use fiva_core::inference::{predict, FusedPrediction, PredictMode};
use fiva_core::metrics::{dice, ece, mean_std, CalibrationReport};
use fiva_core::nn::{softmax_maps, Model};
use fiva_core::seeds::{self, domain};
use fiva_core::server::{aggregate_round, broadcast, GlobalState, HeadRouting, UpdateView};
use fiva_core::synthdata::{generate_all, heterogeneity_from, ClientDataset};
use fiva_core::welford::VarianceMode;
use fiva_core::ParamVector;

use crate::checkpoint::{quantize_state, read_checkpoint, write_checkpoint, Checkpoint};
use crate::config::{ExperimentConfig, InferenceChoice, Regime};
use crate::results::{
    ClientAggregate, ClientCalibration, ResultsRow, RoundLoss, RunSummary, Timing, RESULTS_SCHEMA,
};

/// Everything derived from a validated config.
pub struct PreparedExperiment {
    pub config: ExperimentConfig,
    pub model: Model,
    /// Training clients in head order, hold-out last.
    pub datasets: Vec<ClientDataset>,
}

impl PreparedExperiment {
    pub fn num_clients(&self) -> usize {
        self.datasets.len() - 1
    }

    pub fn holdout(&self) -> &ClientDataset {
        self.datasets.last().expect("hold-out present")
    }

    fn splits(&self) -> Vec<SplitDataset<'_>> {
        self.datasets
            .iter()
            .map(|d| fiva_core::client::split_80_20(d, self.config.seed))
            .collect()
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<PreparedExperiment> {
    config.validate()?;
    let world = config.world()?;
    let model = Model::new(config.model_spec()?)?;
    let datasets = generate_all(&world)?;
    Ok(PreparedExperiment {
        config: config.clone(),
        model,
        datasets,
    })
}

fn routing_for(model: &Model) -> Result<Vec<HeadRouting>> {
    (0..model.num_heads())
        .map(|i| {
            let range = model.head_param_range(i)?;
            Ok(HeadRouting {
                owner: i,
                start: range.start,
                end: range.end,
            })
        })
        .collect()
}

fn checkpoint_path(dir: &Path, round: u64) -> PathBuf {
    dir.join(format!("round_{round:04}.ckpt"))
}

fn standalone_checkpoint_path(dir: &Path, client: &str, round: u64) -> PathBuf {
    dir.join(format!("standalone_{client}_round_{round:04}.ckpt"))
}

/// Outcome of the training phase.
struct TrainedStates {
    /// Final state per evaluation target. Federated/centralized: one entry.
    /// Standalone: one per client.
    states: Vec<GlobalState>,
    round_losses: Vec<RoundLoss>,
    timings: Vec<Timing>,
}

fn run_federated(
    prep: &PreparedExperiment,
    ckpt_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainedStates> {
    let config = &prep.config;
    let model = &prep.model;
    let n_clients = prep.num_clients();
    let splits = prep.splits();
    let mut agg = config.aggregation_config()?;
    agg.head_routing = routing_for(model)?;
    let client_configs: Vec<_> = (0..n_clients)
        .map(|i| config.client_config(i))
        .collect::<Result<_>>()?;
    let mode = config.strategy.variance_mode();

    let mut global = match resume {
        Some(ckpt) => {
            if ckpt.strategy != mode {
                return Err(Error::InvalidArgument(
                    "checkpoint strategy does not match the config".into(),
                ));
            }
            ckpt.state.theta.check_len(model.param_len())?;
            ckpt.state
        }
        None => {
            let init = quantize_state(&GlobalState::initial(
                model.init(config.seed),
                model.param_len(),
            ));
            write_checkpoint(&checkpoint_path(ckpt_dir, 0), mode, &init)?;
            init
        }
    };

    let mut round_losses = Vec::new();
    let mut timings = Vec::new();
    for r in global.round..config.rounds {
        let started = Instant::now();
        let starts = broadcast(&global, n_clients);
        let updates: Vec<ClientUpdate> = (0..n_clients)
            .into_par_iter()
            .map(|i| local_round(&starts[i], &client_configs[i], model, &splits[i], r, i))
            .collect::<Result<_>>()?;
        let views: Vec<&dyn UpdateView> = updates.iter().map(|u| u as &dyn UpdateView).collect();
        global = quantize_state(&aggregate_round(&views, &global, &agg)?);
        write_checkpoint(&checkpoint_path(ckpt_dir, global.round), mode, &global)?;
        round_losses.push(RoundLoss {
            round: global.round,
            client_losses: updates.iter().map(|u| u.mean_loss).collect(),
        });
        timings.push(Timing {
            phase: "round".into(),
            label: format!("{}", global.round),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainedStates {
        states: vec![global],
        round_losses,
        timings,
    })
}

/// Deterministic client pick sequence for centralized training: step `s`
/// draws a client proportionally to training-split sizes.
fn centralized_pick(seed: u64, step: u64, cumulative: &[f64]) -> usize {
    use rand::Rng;
    let mut rng = seeds::rng(seed, &[domain::CENTRAL, step]);
    let u: f64 = rng.random::<f64>();
    cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1)
}

fn run_centralized(
    prep: &PreparedExperiment,
    ckpt_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainedStates> {
    let config = &prep.config;
    let model = &prep.model;
    let n_clients = prep.num_clients();
    let splits = prep.splits();
    let t_steps = config.training.local_steps;
    let schedule = config.client_config(0)?.schedule;
    let momentum = config.client_config(0)?.momentum;

    let total: usize = splits[..n_clients].iter().map(|s| s.train.len()).sum();
    let mut acc = 0.0;
    let cumulative: Vec<f64> = splits[..n_clients]
        .iter()
        .map(|s| {
            acc += s.train.len() as f64 / total as f64;
            acc
        })
        .collect();

    let (mut state, start_round) = match resume {
        Some(ckpt) => {
            ckpt.state.theta.check_len(model.param_len())?;
            let r = ckpt.state.round;
            (ckpt.state, r)
        }
        None => {
            let init = quantize_state(&GlobalState::initial(
                model.init(config.seed),
                model.param_len(),
            ));
            write_checkpoint(&checkpoint_path(ckpt_dir, 0), VarianceMode::None, &init)?;
            (init, 0)
        }
    };

    // per-client batch counters are derivable: replay the pick sequence
    let mut counters = vec![0u64; n_clients];
    for s in 0..start_round * t_steps {
        counters[centralized_pick(config.seed, s, &cumulative)] += 1;
    }

    let mut round_losses = Vec::new();
    let mut timings = Vec::new();
    let mut theta = state.theta.clone();
    for r in start_round..config.rounds {
        let started = Instant::now();
        let mut momentum_state = MomentumState::new(model.param_len());
        let mut losses = vec![0.0; n_clients];
        let mut picks = vec![0usize; n_clients];
        for t in 0..t_steps {
            let step = r * t_steps + t;
            let c = centralized_pick(config.seed, step, &cumulative);
            let client_cfg = config.client_config(c)?;
            let head_labels = &model.head(c)?.labels;
            let batch = batch_sampler(
                &splits[c],
                head_labels,
                config.training.batch_size,
                client_cfg.seed,
                counters[c],
            )?;
            counters[c] += 1;
            if batch.provenance.holdout {
                return Err(Error::HoldoutLeak("centralized batch".into()));
            }
            let (loss, grad) = model.backward(&theta, &batch, c)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged(format!("round {r} step {t}")));
            }
            losses[c] += loss.total;
            picks[c] += 1;
            let eta = schedule.at(step);
            sgd_step(
                &mut theta,
                &grad,
                eta,
                momentum.as_ref().map(|m| (m, &mut momentum_state)),
            )?;
        }
        theta = crate::checkpoint::quantize(&theta);
        state = GlobalState {
            theta: theta.clone(),
            sigma2: ParamVector::ones(model.param_len()),
            round: r + 1,
        };
        write_checkpoint(
            &checkpoint_path(ckpt_dir, state.round),
            VarianceMode::None,
            &state,
        )?;
        round_losses.push(RoundLoss {
            round: state.round,
            client_losses: losses
                .iter()
                .zip(&picks)
                .map(|(l, &p)| if p > 0 { l / p as f64 } else { 0.0 })
                .collect(),
        });
        timings.push(Timing {
            phase: "round".into(),
            label: format!("{}", state.round),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainedStates {
        states: vec![state],
        round_losses,
        timings,
    })
}

fn run_standalone(prep: &PreparedExperiment, ckpt_dir: &Path) -> Result<TrainedStates> {
    let config = &prep.config;
    let model = &prep.model;
    let n_clients = prep.num_clients();
    let splits = prep.splits();

    let mut states = Vec::with_capacity(n_clients);
    let mut round_losses: Vec<RoundLoss> = (1..=config.rounds)
        .map(|round| RoundLoss {
            round,
            client_losses: vec![0.0; n_clients],
        })
        .collect();
    let mut timings = Vec::new();

    let started = Instant::now();
    let results: Vec<(GlobalState, Vec<f64>)> = (0..n_clients)
        .into_par_iter()
        .map(|i| -> Result<(GlobalState, Vec<f64>)> {
            let client_cfg = config.client_config(i)?;
            let mut state = quantize_state(&GlobalState::initial(
                model.init(seeds::mix(config.seed, &[0x5A, i as u64])),
                model.param_len(),
            ));
            let mut losses = Vec::with_capacity(config.rounds as usize);
            for r in 0..config.rounds {
                let update = local_round(&state, &client_cfg, model, &splits[i], r, i)?;
                state = quantize_state(&GlobalState {
                    theta: update.theta,
                    sigma2: ParamVector::ones(model.param_len()),
                    round: r + 1,
                });
                write_checkpoint(
                    &standalone_checkpoint_path(ckpt_dir, &prep.datasets[i].spec.name, r + 1),
                    VarianceMode::None,
                    &state,
                )?;
                losses.push(update.mean_loss);
            }
            Ok((state, losses))
        })
        .collect::<Result<_>>()?;
    for (i, (state, losses)) in results.into_iter().enumerate() {
        states.push(state);
        for (r, loss) in losses.into_iter().enumerate() {
            round_losses[r].client_losses[i] = loss;
        }
    }
    timings.push(Timing {
        phase: "standalone-training".into(),
        label: "all-clients".into(),
        seconds: started.elapsed().as_secs_f64(),
    });
    Ok(TrainedStates {
        states,
        round_losses,
        timings,
    })
}

// ---- evaluation -------------------------------------------------------------

fn predict_mode(config: &ExperimentConfig, inference: InferenceChoice) -> PredictMode {
    let k = config.evaluation.samples_per_inference;
    match inference {
        InferenceChoice::Plain => PredictMode::Plain,
        InferenceChoice::UncertaintyWeighted => PredictMode::Sampled { k },
        InferenceChoice::McDropout => PredictMode::McDropout {
            k,
            rate: config.model.dropout_rate,
        },
    }
}

/// Evaluation pool for a dataset: the hold-out client contributes all of its
/// samples, training clients their validation split.
fn eval_pool(split: &SplitDataset<'_>) -> Vec<usize> {
    if split.data.provenance.holdout {
        (0..split.data.len()).collect()
    } else {
        split.val.clone()
    }
}

fn subset_for_repeat(
    pool: &[usize],
    fraction: f64,
    seed: u64,
    client_id: usize,
    repeat: usize,
) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order = pool.to_vec();
    let mut rng = seeds::rng(seed, &[domain::EVAL, client_id as u64, repeat as u64]);
    order.shuffle(&mut rng);
    let take = ((pool.len() as f64 * fraction).ceil() as usize).clamp(1, pool.len());
    order.truncate(take);
    order
}

/// Per-repeat metric bundle for one dataset.
struct RepeatMetrics {
    /// per evaluated label: mean Dice over images where defined
    dice_per_label: Vec<(u8, Option<f64>)>,
    /// per evaluated label (background included): ECE over pooled pixels
    ece_per_label: Vec<(u8, Option<f64>)>,
    confidences: Vec<f64>,
    correct: Vec<bool>,
}

/// Run fused prediction over a subset of one dataset and collect metrics.
#[allow(clippy::too_many_arguments)]
fn eval_repeat_fused(
    model: &Model,
    state: &GlobalState,
    data: &ClientDataset,
    subset: &[usize],
    heads: &[usize],
    mode: PredictMode,
    reweight: bool,
    seed: u64,
    eval_labels: &[u8],
) -> Result<RepeatMetrics> {
    let (h, w) = data.grid;
    let plane = h * w;
    let chunks: Vec<&[usize]> = subset.chunks(16).collect();
    let predictions: Vec<(Vec<u8>, Vec<f64>)> = chunks
        .par_iter()
        .map(|chunk| -> Result<(Vec<u8>, Vec<f64>)> {
            let mut inputs = Vec::with_capacity(chunk.len() * plane);
            for &i in *chunk {
                inputs.extend_from_slice(&data.samples[i].image);
            }
            let fused = predict(model, state, &inputs, chunk.len(), heads, mode, reweight, seed)?;
            let mut conf = vec![0.0; chunk.len() * plane];
            let g = fused.num_labels;
            for ni in 0..chunk.len() {
                for px in 0..plane {
                    let l = fused.argmax[ni * plane + px] as usize;
                    conf[ni * plane + px] = fused.probs[ni * g * plane + l * plane + px];
                }
            }
            Ok((fused.argmax, conf))
        })
        .collect::<Result<_>>()?;

    collect_metrics(data, subset, &chunks, &predictions, eval_labels)
}

fn collect_metrics(
    data: &ClientDataset,
    subset: &[usize],
    chunks: &[&[usize]],
    predictions: &[(Vec<u8>, Vec<f64>)],
    eval_labels: &[u8],
) -> Result<RepeatMetrics> {
    let (h, w) = data.grid;
    let plane = h * w;

    let mut confidences = Vec::with_capacity(subset.len() * plane);
    let mut correct = Vec::with_capacity(subset.len() * plane);
    // per-label dice accumulators over images
    let mut dice_sums = vec![(0.0, 0usize); eval_labels.len()];
    // per-label pixel pools for calibration
    let mut label_conf: Vec<Vec<f64>> = vec![Vec::new(); eval_labels.len() + 1];
    let mut label_hits: Vec<Vec<bool>> = vec![Vec::new(); eval_labels.len() + 1];

    for (chunk, (argmax, conf)) in chunks.iter().zip(predictions) {
        for (ni, &idx) in chunk.iter().enumerate() {
            let gt = &data.samples[idx].visible_labels;
            let pred = &argmax[ni * plane..(ni + 1) * plane];
            let pconf = &conf[ni * plane..(ni + 1) * plane];
            for (li, &l) in eval_labels.iter().enumerate() {
                if let Some(score) = dice(pred, gt, l)? {
                    dice_sums[li].0 += score;
                    dice_sums[li].1 += 1;
                }
            }
            for px in 0..plane {
                let c = pconf[px];
                let ok = pred[px] == gt[px];
                confidences.push(c);
                correct.push(ok);
                // slot 0 = background, then eval labels in order
                let slot = if gt[px] == 0 {
                    Some(0)
                } else {
                    eval_labels.iter().position(|&l| l == gt[px]).map(|p| p + 1)
                };
                if let Some(s) = slot {
                    label_conf[s].push(c);
                    label_hits[s].push(ok);
                }
            }
        }
    }

    let dice_per_label = eval_labels
        .iter()
        .zip(&dice_sums)
        .map(|(&l, &(sum, n))| (l, (n > 0).then(|| sum / n as f64)))
        .collect();
    let mut ece_per_label = Vec::with_capacity(eval_labels.len() + 1);
    for (slot, label) in std::iter::once(0u8)
        .chain(eval_labels.iter().copied())
        .enumerate()
    {
        let value = if label_conf[slot].is_empty() {
            None
        } else {
            Some(ece(&label_conf[slot], &label_hits[slot], 10)?.ece)
        };
        ece_per_label.push((label, value));
    }
    Ok(RepeatMetrics {
        dice_per_label,
        ece_per_label,
        confidences,
        correct,
    })
}

/// Aggregate per-repeat metrics into result rows for one dataset.
fn rows_from_repeats(
    method: &str,
    regime: &str,
    data: &ClientDataset,
    repeats: &[RepeatMetrics],
    round: u64,
    eval_labels: &[u8],
) -> Result<(Vec<ResultsRow>, ClientAggregate, ClientCalibration)> {
    let mut rows = Vec::new();
    let mk_row = |label: String, dice: (f64, f64), ece: (f64, f64)| ResultsRow {
        method: method.to_string(),
        regime: regime.to_string(),
        client: data.spec.name.clone(),
        label,
        dice_mean: dice.0,
        dice_std: dice.1,
        ece_mean: ece.0,
        ece_std: ece.1,
        round,
    };

    // per-label rows
    for (li, &label) in eval_labels.iter().enumerate() {
        let dices: Vec<f64> = repeats
            .iter()
            .filter_map(|r| r.dice_per_label[li].1)
            .collect();
        let eces: Vec<f64> = repeats
            .iter()
            .filter_map(|r| r.ece_per_label[li + 1].1)
            .collect();
        rows.push(mk_row(
            format!("{label}"),
            mean_std(&dices),
            mean_std(&eces),
        ));
    }
    // background calibration row
    let bg_eces: Vec<f64> = repeats.iter().filter_map(|r| r.ece_per_label[0].1).collect();
    rows.push(mk_row("0".into(), (0.0, 0.0), mean_std(&bg_eces)));

    // per-repeat aggregates: mean foreground Dice, label-uniform mean ECE
    let mut rep_dice = Vec::new();
    let mut rep_ece = Vec::new();
    for r in repeats {
        let d: Vec<f64> = r.dice_per_label.iter().filter_map(|(_, v)| *v).collect();
        if !d.is_empty() {
            rep_dice.push(d.iter().sum::<f64>() / d.len() as f64);
        }
        let e: Vec<f64> = r.ece_per_label.iter().filter_map(|(_, v)| *v).collect();
        if !e.is_empty() {
            rep_ece.push(e.iter().sum::<f64>() / e.len() as f64);
        }
    }
    let (dice_mean, dice_std) = mean_std(&rep_dice);
    let (ece_mean, ece_std) = mean_std(&rep_ece);
    rows.push(mk_row("mean".into(), (dice_mean, dice_std), (ece_mean, ece_std)));

    // pooled calibration over all repeats
    let mut all_conf = Vec::new();
    let mut all_ok = Vec::new();
    for r in repeats {
        all_conf.extend_from_slice(&r.confidences);
        all_ok.extend_from_slice(&r.correct);
    }
    let report = if all_conf.is_empty() {
        CalibrationReport {
            bins: Vec::new(),
            ece: 0.0,
            total: 0,
        }
    } else {
        ece(&all_conf, &all_ok, 10)?
    };

    Ok((
        rows,
        ClientAggregate {
            client: data.spec.name.clone(),
            holdout: data.provenance.holdout,
            dice_mean,
            dice_std,
            ece_mean,
            ece_std,
        },
        ClientCalibration {
            client: data.spec.name.clone(),
            report,
        },
    ))
}

/// Evaluate a fused multi-head state on the configured datasets.
pub fn evaluate_fused(
    prep: &PreparedExperiment,
    state: &GlobalState,
    inference: InferenceChoice,
    method: &str,
) -> Result<(Vec<ResultsRow>, Vec<ClientAggregate>, Vec<ClientCalibration>)> {
    let config = &prep.config;
    let model = &prep.model;
    let splits = prep.splits();
    let heads: Vec<usize> = (0..model.num_heads()).collect();
    let mode = predict_mode(config, inference);
    let reweight = inference != InferenceChoice::Plain;

    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    let mut calibrations = Vec::new();
    for (id, data) in prep.datasets.iter().enumerate() {
        if config.evaluation.eval_holdout_only && !data.provenance.holdout {
            continue;
        }
        let pool = eval_pool(&splits[id]);
        let eval_labels = data.spec.labels.clone();
        let mut repeats = Vec::with_capacity(config.evaluation.repeats);
        for rep in 0..config.evaluation.repeats {
            let subset = subset_for_repeat(
                &pool,
                config.evaluation.subset_fraction,
                config.seed,
                id,
                rep,
            );
            let seed = seeds::mix(config.seed, &[domain::EVAL, id as u64, rep as u64, 0xF0]);
            repeats.push(eval_repeat_fused(
                model,
                state,
                data,
                &subset,
                &heads,
                mode,
                reweight,
                seed,
                &eval_labels,
            )?);
        }
        let (mut r, agg, cal) = rows_from_repeats(
            method,
            config.regime.as_str(),
            data,
            &repeats,
            state.round,
            &eval_labels,
        )?;
        rows.append(&mut r);
        aggregates.push(agg);
        calibrations.push(cal);
    }
    Ok((rows, aggregates, calibrations))
}

/// Single-head deterministic prediction into the global label space
/// (standalone models know only their own head).
fn predict_single_head(
    model: &Model,
    theta: &ParamVector,
    inputs: &[f64],
    n: usize,
    head: usize,
) -> Result<(Vec<u8>, Vec<f64>)> {
    let labels = &model.head(head)?.labels;
    let c = labels.len();
    let plane = model.spec().grid.0 * model.spec().grid.1;
    let logits = model.forward_inputs(theta, inputs, n, head, None)?;
    let probs = softmax_maps(&logits, n, c, plane);
    let mut argmax = vec![0u8; n * plane];
    let mut conf = vec![0.0; n * plane];
    for ni in 0..n {
        for px in 0..plane {
            let mut best = 0usize;
            let mut best_p = f64::NEG_INFINITY;
            for ch in 0..c {
                let p = probs[ni * c * plane + ch * plane + px];
                if p > best_p {
                    best_p = p;
                    best = ch;
                }
            }
            argmax[ni * plane + px] = labels[best];
            conf[ni * plane + px] = best_p;
        }
    }
    Ok((argmax, conf))
}

#[allow(clippy::too_many_arguments)]
fn eval_repeat_single_head(
    model: &Model,
    theta: &ParamVector,
    head: usize,
    data: &ClientDataset,
    subset: &[usize],
    eval_labels: &[u8],
) -> Result<RepeatMetrics> {
    let (h, w) = data.grid;
    let plane = h * w;
    let chunks: Vec<&[usize]> = subset.chunks(16).collect();
    let predictions: Vec<(Vec<u8>, Vec<f64>)> = chunks
        .par_iter()
        .map(|chunk| {
            let mut inputs = Vec::with_capacity(chunk.len() * plane);
            for &i in *chunk {
                inputs.extend_from_slice(&data.samples[i].image);
            }
            predict_single_head(model, theta, &inputs, chunk.len(), head)
        })
        .collect::<Result<_>>()?;
    collect_metrics(data, subset, &chunks, &predictions, eval_labels)
}

/// Standalone evaluation: same-client (own model on own data) and
/// cross-client (other models applied to each dataset, shared labels only).
pub fn evaluate_standalone(
    prep: &PreparedExperiment,
    states: &[GlobalState],
) -> Result<(Vec<ResultsRow>, Vec<ClientAggregate>, Vec<ClientCalibration>)> {
    let config = &prep.config;
    let model = &prep.model;
    let splits = prep.splits();
    let n_clients = prep.num_clients();

    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    let mut calibrations = Vec::new();

    for (id, data) in prep.datasets.iter().enumerate() {
        if config.evaluation.eval_holdout_only && !data.provenance.holdout {
            continue;
        }
        let pool = eval_pool(&splits[id]);
        // same-client: the dataset's own model, except the hold-out client,
        // which has no standalone model
        if id < n_clients {
            let eval_labels = data.spec.labels.clone();
            let mut repeats = Vec::new();
            for rep in 0..config.evaluation.repeats {
                let subset = subset_for_repeat(
                    &pool,
                    config.evaluation.subset_fraction,
                    config.seed,
                    id,
                    rep,
                );
                repeats.push(eval_repeat_single_head(
                    model,
                    &states[id].theta,
                    id,
                    data,
                    &subset,
                    &eval_labels,
                )?);
            }
            let (mut r, agg, cal) = rows_from_repeats(
                "Same-client",
                config.regime.as_str(),
                data,
                &repeats,
                config.rounds,
                &eval_labels,
            )?;
            rows.append(&mut r);
            aggregates.push(agg);
            calibrations.push(cal);
        }
        // cross-client: every other client's model on this dataset
        let mut cross_repeats = Vec::new();
        for (other, state) in states.iter().enumerate().take(n_clients) {
            if other == id {
                continue;
            }
            let shared: Vec<u8> = prep.datasets[other]
                .spec
                .labels
                .iter()
                .copied()
                .filter(|l| data.spec.labels.contains(l))
                .collect();
            if shared.is_empty() {
                continue;
            }
            for rep in 0..config.evaluation.repeats {
                let subset = subset_for_repeat(
                    &pool,
                    config.evaluation.subset_fraction,
                    config.seed,
                    id,
                    rep,
                );
                cross_repeats.push(eval_repeat_single_head(
                    model,
                    &state.theta,
                    other,
                    data,
                    &subset,
                    &shared,
                )?);
            }
        }
        if !cross_repeats.is_empty() {
            // flatten per-(model, repeat) aggregates
            let mut dices = Vec::new();
            let mut eces = Vec::new();
            let mut all_conf = Vec::new();
            let mut all_ok = Vec::new();
            for r in &cross_repeats {
                let d: Vec<f64> = r.dice_per_label.iter().filter_map(|(_, v)| *v).collect();
                if !d.is_empty() {
                    dices.push(d.iter().sum::<f64>() / d.len() as f64);
                }
                let e: Vec<f64> = r.ece_per_label.iter().filter_map(|(_, v)| *v).collect();
                if !e.is_empty() {
                    eces.push(e.iter().sum::<f64>() / e.len() as f64);
                }
                all_conf.extend_from_slice(&r.confidences);
                all_ok.extend_from_slice(&r.correct);
            }
            let (dm, ds) = mean_std(&dices);
            let (em, es) = mean_std(&eces);
            rows.push(ResultsRow {
                method: "Cross-client".into(),
                regime: config.regime.as_str().into(),
                client: data.spec.name.clone(),
                label: "mean".into(),
                dice_mean: dm,
                dice_std: ds,
                ece_mean: em,
                ece_std: es,
                round: config.rounds,
            });
            calibrations.push(ClientCalibration {
                client: format!("{}-cross", data.spec.name),
                report: ece(&all_conf, &all_ok, 10)?,
            });
        }
    }
    Ok((rows, aggregates, calibrations))
}

// ---- map export -------------------------------------------------------------

fn write_pgm(path: &Path, data: &[u8], h: usize, w: usize) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.write_all(data)?;
    Ok(())
}

fn export_maps(
    prep: &PreparedExperiment,
    state: &GlobalState,
    inference: InferenceChoice,
    dir: &Path,
) -> Result<()> {
    let config = &prep.config;
    let count = config.evaluation.export_maps.min(prep.holdout().len());
    if count == 0 {
        return Ok(());
    }
    std::fs::create_dir_all(dir)?;
    let model = &prep.model;
    let data = prep.holdout();
    let (h, w) = data.grid;
    let plane = h * w;
    let heads: Vec<usize> = (0..model.num_heads()).collect();
    let mode = predict_mode(config, inference);
    let reweight = inference != InferenceChoice::Plain;
    let mut inputs = Vec::with_capacity(count * plane);
    for s in &data.samples[..count] {
        inputs.extend_from_slice(&s.image);
    }
    let fused: FusedPrediction = predict(
        model,
        state,
        &inputs,
        count,
        &heads,
        mode,
        reweight,
        seeds::mix(config.seed, &[domain::EVAL, 0xAB]),
    )?;
    let g = fused.num_labels as f64;
    for i in 0..count {
        let pred: Vec<u8> = fused.argmax[i * plane..(i + 1) * plane]
            .iter()
            .map(|&l| ((l as f64 / (g - 1.0)) * 255.0).round() as u8)
            .collect();
        write_pgm(&dir.join(format!("pred_{i:03}.pgm")), &pred, h, w)?;

        let tot = &fused.uncertainty.total[i * plane..(i + 1) * plane];
        let (lo, hi) = tot
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| {
                (a.min(t), b.max(t))
            });
        let span = (hi - lo).max(1e-12);
        let gray: Vec<u8> = tot
            .iter()
            .map(|&t| (((t - lo) / span) * 255.0).round() as u8)
            .collect();
        write_pgm(&dir.join(format!("uncert_{i:03}.pgm")), &gray, h, w)?;

        let mut raw = Vec::with_capacity(plane * 4);
        for &t in tot {
            raw.extend_from_slice(&(t as f32).to_le_bytes());
        }
        std::fs::write(dir.join(format!("uncert_{i:03}.f32")), raw)?;
    }
    Ok(())
}

// ---- top level --------------------------------------------------------------

/// Run a full experiment end to end. `resume` continues a federated or
/// centralized run from a round checkpoint.
pub fn run_experiment(config: &ExperimentConfig, resume: Option<&Path>) -> Result<RunSummary> {
    let prep = prepare(config)?;
    let out = &config.output_dir;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    std::fs::write(out.join("config.resolved.toml"), config.to_toml())?;

    let resume_ckpt = match resume {
        Some(path) => {
            if config.regime == Regime::Standalone {
                return Err(Error::InvalidArgument(
                    "resume is supported for federated and centralized runs".into(),
                ));
            }
            Some(read_checkpoint(path)?)
        }
        None => None,
    };

    let trained = match config.regime {
        Regime::Federated => run_federated(&prep, &ckpt_dir, resume_ckpt)?,
        Regime::Centralized => run_centralized(&prep, &ckpt_dir, resume_ckpt)?,
        Regime::Standalone => run_standalone(&prep, &ckpt_dir)?,
    };

    let eval_started = Instant::now();
    let (rows, aggregates, calibrations) = match config.regime {
        Regime::Standalone => evaluate_standalone(&prep, &trained.states)?,
        _ => {
            let state = &trained.states[0];
            export_maps(&prep, state, config.inference, &out.join("maps"))?;
            evaluate_fused(&prep, state, config.inference, &config.method_label())?
        }
    };
    let mut timings = trained.timings;
    timings.push(Timing {
        phase: "evaluate".into(),
        label: config.method_label(),
        seconds: eval_started.elapsed().as_secs_f64(),
    });

    let summary = RunSummary {
        schema_version: RESULTS_SCHEMA,
        name: config.name.clone(),
        method: config.method_label(),
        regime: config.regime.as_str().into(),
        seed: config.seed,
        rounds: config.rounds,
        rows,
        aggregates,
        calibration: calibrations,
        heterogeneity: heterogeneity_from(&prep.datasets, prep.config.world()?.foreground_labels),
        round_losses: trained.round_losses,
    };
    crate::results::append_results(&out.join("results.tsv"), &summary.rows)?;
    summary.write_json(&out.join("summary.json"))?;
    std::fs::write(
        out.join("heterogeneity.tsv"),
        crate::results::heterogeneity_tsv(&summary.heterogeneity),
    )?;
    std::fs::write(out.join("timings.tsv"), crate::results::timings_tsv(&timings))?;
    Ok(summary)
}

/// Evaluate an existing checkpoint under the given config (no training).
pub fn evaluate_checkpoint(config: &ExperimentConfig, ckpt: &Path) -> Result<RunSummary> {
    let prep = prepare(config)?;
    let checkpoint = read_checkpoint(ckpt)?;
    checkpoint.state.theta.check_len(prep.model.param_len())?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;

    let eval_started = Instant::now();
    let (rows, aggregates, calibrations) =
        evaluate_fused(&prep, &checkpoint.state, config.inference, &config.method_label())?;
    let timings = vec![Timing {
        phase: "evaluate".into(),
        label: config.method_label(),
        seconds: eval_started.elapsed().as_secs_f64(),
    }];

    let summary = RunSummary {
        schema_version: RESULTS_SCHEMA,
        name: config.name.clone(),
        method: config.method_label(),
        regime: config.regime.as_str().into(),
        seed: config.seed,
        rounds: checkpoint.state.round,
        rows,
        aggregates,
        calibration: calibrations,
        heterogeneity: heterogeneity_from(&prep.datasets, prep.config.world()?.foreground_labels),
        round_losses: Vec::new(),
    };
    crate::results::append_results(&out.join("results.tsv"), &summary.rows)?;
    summary.write_json(&out.join("summary.json"))?;
    std::fs::write(out.join("timings.tsv"), crate::results::timings_tsv(&timings))?;
    Ok(summary)
}
