//! Experiment configuration.
//!
//! Everything a run needs lives in one TOML document; every hyperparameter
//! is a named key with a sensible default, so a minimal config is just a
//! regime, a strategy, and an output directory. The full schema is
//! documented in `docs/formats.md`.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use fiva_core::client::{ClientConfig, Momentum, PolyLr};
use fiva_core::error::{Error, Result};
use fiva_core::nn::{Activation, BackboneSpec, HeadSpec, ModelSpec};
use fiva_core::server::{AggregationConfig, Strategy};
use fiva_core::synthdata::{ClientDataSpec, ShapeWorldSpec};
use fiva_core::welford::{VarianceClamp, VarianceMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Centralized,
    Federated,
    Standalone,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Centralized => "centralized",
            Regime::Federated => "federated",
            Regime::Standalone => "standalone",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyChoice {
    Fedavg,
    FivaG,
    FivaP,
}

impl StrategyChoice {
    pub fn server_strategy(&self) -> Strategy {
        match self {
            StrategyChoice::Fedavg => Strategy::FedAvg,
            StrategyChoice::FivaG | StrategyChoice::FivaP => Strategy::Fiva,
        }
    }

    pub fn variance_mode(&self) -> VarianceMode {
        match self {
            StrategyChoice::Fedavg => VarianceMode::None,
            StrategyChoice::FivaG => VarianceMode::FivaG,
            StrategyChoice::FivaP => VarianceMode::FivaP,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            StrategyChoice::Fedavg => "FedAvg",
            StrategyChoice::FivaG => "FIVA-G",
            StrategyChoice::FivaP => "FIVA-P",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceChoice {
    /// Deterministic forward pass, no reweighting.
    Plain,
    /// K samples from the global distribution, background reweighting on.
    UncertaintyWeighted,
    /// K dropout passes at the global mean, background reweighting on.
    McDropout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub backbone: String,
    pub conv_channels: usize,
    pub mlp_hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone: "conv".into(),
            conv_channels: 8,
            mlp_hidden: vec![16],
            activation: Activation::Silu,
            dropout_rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    /// T: local SGD steps per round.
    pub local_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub poly_exponent: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub use_momentum: bool,
    /// Clamp on the client-side finalized variances (the tracker's own
    /// bounds; the server's global-variance clamp lives under
    /// `[aggregation]`).
    pub variance_min: f64,
    pub variance_max: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            local_steps: 20,
            batch_size: 4,
            learning_rate: 0.01,
            poly_exponent: 0.9,
            momentum: 0.99,
            nesterov: true,
            use_momentum: true,
            variance_min: 1e-4,
            variance_max: 1e2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationSection {
    pub lambda: f64,
    pub sigma2_min: f64,
    pub sigma2_max: f64,
}

impl Default for AggregationSection {
    fn default() -> Self {
        AggregationSection {
            lambda: 0.95,
            sigma2_min: 1e-8,
            sigma2_max: 1e2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub grid: [usize; 2],
    pub foreground_labels: u8,
    /// Empty means the default five-client roster.
    pub clients: Vec<ClientDataSpec>,
    pub holdout: Option<ClientDataSpec>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            grid: [32, 32],
            foreground_labels: 6,
            clients: Vec::new(),
            holdout: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSection {
    /// Evaluation repeats (different image subsets and inference seeds).
    pub repeats: usize,
    /// K: stochastic forward passes per prediction.
    pub samples_per_inference: usize,
    /// Fraction of the evaluation pool drawn per repeat.
    pub subset_fraction: f64,
    pub eval_holdout_only: bool,
    /// Hold-out samples whose prediction/uncertainty maps are exported.
    pub export_maps: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            repeats: 5,
            samples_per_inference: 10,
            subset_fraction: 0.8,
            eval_holdout_only: false,
            export_maps: 4,
        }
    }
}

fn default_schema_version() -> u32 {
    1
}

fn default_name() -> String {
    "experiment".into()
}

fn default_rounds() -> u64 {
    30
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    pub regime: Regime,
    pub strategy: StrategyChoice,
    pub inference: InferenceChoice,
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub aggregation: AggregationSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The default federated benchmark: five-skewed-client roster, 30
    /// rounds.
    pub fn benchmark(strategy: StrategyChoice, inference: InferenceChoice, seed: u64) -> Self {
        ExperimentConfig {
            schema_version: 1,
            name: "benchmark".into(),
            regime: Regime::Federated,
            strategy,
            inference,
            rounds: 30,
            seed,
            output_dir: default_output_dir(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            aggregation: AggregationSection::default(),
            data: DataSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("rounds must be >= 1".into()));
        }
        if self.evaluation.repeats == 0 {
            return Err(Error::InvalidArgument("evaluation.repeats must be >= 1".into()));
        }
        if self.evaluation.samples_per_inference == 0 {
            return Err(Error::InvalidArgument(
                "evaluation.samples_per_inference must be >= 1".into(),
            ));
        }
        if !(0.0 < self.evaluation.subset_fraction && self.evaluation.subset_fraction <= 1.0) {
            return Err(Error::InvalidArgument(
                "evaluation.subset_fraction must be in (0, 1]".into(),
            ));
        }
        if self.strategy == StrategyChoice::Fedavg
            && self.inference == InferenceChoice::UncertaintyWeighted
        {
            return Err(Error::InvalidArgument(
                "uncertainty_weighted inference needs a FIVA strategy; FedAvg carries no \
                 parameter variance (use mc_dropout instead)"
                    .into(),
            ));
        }
        match self.model.backbone.as_str() {
            "conv" | "mlp" => {}
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown backbone '{other}' (conv or mlp)"
                )))
            }
        }
        self.world()?.validate()?;
        self.model_spec().map(|_| ())?;
        Ok(())
    }

    /// Dataset roster (explicit sections or the default roster).
    pub fn world(&self) -> Result<ShapeWorldSpec> {
        let grid = (self.data.grid[0], self.data.grid[1]);
        if self.data.clients.is_empty() && self.data.holdout.is_none() {
            let mut world = ShapeWorldSpec::default_roster(grid);
            world.foreground_labels = self.data.foreground_labels;
            return Ok(world);
        }
        let holdout = self.data.holdout.clone().ok_or_else(|| {
            Error::InvalidArgument("explicit client roster needs a [data.holdout] section".into())
        })?;
        Ok(ShapeWorldSpec {
            grid,
            foreground_labels: self.data.foreground_labels,
            clients: self.data.clients.clone(),
            holdout,
        })
    }

    /// Model with one head per training client (head order = client order).
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let world = self.world()?;
        let heads = world
            .clients
            .iter()
            .map(|c| {
                let mut labels = vec![0u8];
                labels.extend_from_slice(&c.labels);
                HeadSpec::new(labels)
            })
            .collect();
        let backbone = match self.model.backbone.as_str() {
            "conv" => BackboneSpec::Conv {
                channels: self.model.conv_channels,
            },
            "mlp" => BackboneSpec::Mlp {
                hidden: self.model.mlp_hidden.clone(),
            },
            other => {
                return Err(Error::InvalidArgument(format!("unknown backbone '{other}'")))
            }
        };
        let spec = ModelSpec {
            grid: world.grid,
            backbone,
            heads,
            activation: self.model.activation,
            dropout_rate: self.model.dropout_rate,
            num_global_labels: world.num_global_labels(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Server-side clamp on the global variance.
    pub fn clamp(&self) -> Result<VarianceClamp> {
        VarianceClamp::new(self.aggregation.sigma2_min, self.aggregation.sigma2_max)
    }

    /// Client-side clamp on finalized tracker variances.
    pub fn client_clamp(&self) -> Result<VarianceClamp> {
        VarianceClamp::new(self.training.variance_min, self.training.variance_max)
    }

    pub fn aggregation_config(&self) -> Result<AggregationConfig> {
        AggregationConfig::new(
            self.strategy.server_strategy(),
            self.aggregation.lambda,
            self.clamp()?,
        )
    }

    /// Per-client training config for the given client index.
    pub fn client_config(&self, client_id: usize) -> Result<ClientConfig> {
        Ok(ClientConfig {
            client_id,
            local_steps: self.training.local_steps,
            batch_size: self.training.batch_size,
            schedule: PolyLr {
                eta0: self.training.learning_rate,
                exponent: self.training.poly_exponent,
                total_steps: self.rounds * self.training.local_steps,
            },
            momentum: self.training.use_momentum.then_some(Momentum {
                mu: self.training.momentum,
                nesterov: self.training.nesterov,
            }),
            variance_mode: self.strategy.variance_mode(),
            clamp: self.client_clamp()?,
            seed: fiva_core::seeds::mix(self.seed, &[0x10, client_id as u64]),
        })
    }

    /// Human-readable method label for result rows.
    pub fn method_label(&self) -> String {
        match self.regime {
            Regime::Centralized => "Centralized".into(),
            Regime::Standalone => "Standalone".into(),
            Regime::Federated => match self.inference {
                InferenceChoice::Plain => self.strategy.label().to_string(),
                InferenceChoice::UncertaintyWeighted => format!("{}+UN", self.strategy.label()),
                InferenceChoice::McDropout => match self.strategy {
                    StrategyChoice::Fedavg => "FUNAvg".into(),
                    other => format!("{}+MCD", other.label()),
                },
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_round_trips() {
        let text = r#"
            regime = "federated"
            strategy = "fiva_p"
            inference = "uncertainty_weighted"
        "#;
        let config = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(config.rounds, 30);
        assert_eq!(config.training.learning_rate, 0.01);
        assert_eq!(config.aggregation.lambda, 0.95);
        assert_eq!(config.method_label(), "FIVA-P+UN");
        let echoed = config.to_toml();
        let back = ExperimentConfig::from_toml(&echoed).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn default_roster_covers_six_labels() {
        let config =
            ExperimentConfig::benchmark(StrategyChoice::FivaP, InferenceChoice::Plain, 0);
        let world = config.world().unwrap();
        assert_eq!(world.clients.len(), 5);
        assert_eq!(world.holdout.labels, vec![1, 2, 3, 4, 5, 6]);
        let model = config.model_spec().unwrap();
        assert_eq!(model.heads.len(), 5);
        assert!(fiva_core::nn::Model::new(model).unwrap().param_len() <= 100_000);
    }

    #[test]
    fn fedavg_with_sampled_inference_is_rejected() {
        let text = r#"
            regime = "federated"
            strategy = "fedavg"
            inference = "uncertainty_weighted"
        "#;
        assert!(ExperimentConfig::from_toml(text).is_err());
    }

    #[test]
    fn method_labels() {
        let mk = |s, i| ExperimentConfig::benchmark(s, i, 0).method_label();
        assert_eq!(mk(StrategyChoice::Fedavg, InferenceChoice::Plain), "FedAvg");
        assert_eq!(mk(StrategyChoice::FivaG, InferenceChoice::Plain), "FIVA-G");
        assert_eq!(
            mk(StrategyChoice::FivaP, InferenceChoice::UncertaintyWeighted),
            "FIVA-P+UN"
        );
        assert_eq!(mk(StrategyChoice::Fedavg, InferenceChoice::McDropout), "FUNAvg");
    }

    #[test]
    fn schedule_spans_all_rounds() {
        let config = ExperimentConfig::benchmark(StrategyChoice::FivaP, InferenceChoice::Plain, 3);
        let cc = config.client_config(0).unwrap();
        assert_eq!(cc.schedule.total_steps, 30 * 20);
        assert!(cc.momentum.is_some());
    }
}
