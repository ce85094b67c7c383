//! Experiment configuration files.
//!
//! A config is a TOML document with the sections below. Every key has a
//! default; the defaults follow the reference setup (client SGD lr 0.02 and
//! batch 20, momentum 0.9 / lr 1.0 server, 5 clients per round, 9 replicas).
//!
//! ```toml
//! seed = 0
//! replicas = 9
//! output_dir = "runs/example"
//!
//! [dataset]
//! kind = "synthetic"          # or "csv" (then set path, input_dim, num_classes)
//! num_clients = 40
//! eval_fraction = 0.25        # share of clients held out for personalization
//! classes_per_client = 4
//! examples_per_client = 100
//! input_dim = 20
//! num_classes = 10
//! heterogeneity = 0.8
//!
//! [model]
//! hidden = [32]
//! activation = "relu"
//! loss = "softmax_cross_entropy"
//!
//! [client]
//! lr = 0.02
//! batch_size = 20
//!
//! [stage1]
//! algorithm = "fedavg"        # fedavg | reptile | fedsgd | fomaml
//! rounds = 500
//! clients_per_round = 5
//! epochs = 2                  # fedavg; reptile/fomaml use `steps`/`k`
//! [stage1.server]
//! kind = "momentum"
//! lr = 1.0
//! momentum = 0.9
//!
//! [stage2]
//! algorithm = "reptile"
//! rounds = 200
//! steps = 10
//! [stage2.server]
//! kind = "adam"
//! lr = 0.001
//!
//! [personalization]
//! optimizer = "sgd"           # lr defaults to [client].lr
//! epochs = 5
//! batch_size = 100
//! eval_every = 10
//! population = "eval_clients"
//! ```

use std::path::{Path, PathBuf};

use fedmeta::data::{
    generate_synthetic, load_csv_dataset, split_train_eval, CsvSchema, FederatedDataset, SyntheticSpec,
};
use fedmeta::federation::{Algorithm, EvalConfig, LocalMode, RoundConfig, StageConfig, Weighting};
use fedmeta::optim::{ClientOptimizerConfig, ServerOptimizerConfig, ServerOptimizerKind};
use fedmeta::personalization::{PersonalizationConfig, PersonalizationOptimizer, Population};
use fedmeta::{Activation, LossKind, ModelSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub client: ClientSection,
    #[serde(default = "StageSection::default_stage1")]
    pub stage1: StageSection,
    #[serde(default = "StageSection::default_stage2")]
    pub stage2: StageSection,
    #[serde(default)]
    pub personalization: PersonalizationSection,
}

fn default_replicas() -> usize {
    9
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Seeds data generation and the train/eval client split. Defaults to the
    /// top-level seed, so all replicas of a run share one dataset.
    pub seed: Option<u64>,
    pub eval_fraction: f64,
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub examples_per_client: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub heterogeneity: f64,
    pub class_separation: f64,
    pub noise_std: f64,
    pub style_scale: f64,
    pub path: Option<PathBuf>,
    pub has_header: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            seed: None,
            eval_fraction: 0.25,
            num_clients: 40,
            classes_per_client: 4,
            examples_per_client: 100,
            input_dim: 20,
            num_classes: 10,
            heterogeneity: 0.8,
            class_separation: 1.0,
            noise_std: 1.0,
            style_scale: 1.0,
            path: None,
            has_header: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            activation: Activation::Relu,
            loss: LossKind::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientSection {
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ClientSection {
    fn default() -> Self {
        let c = ClientOptimizerConfig::default();
        Self {
            lr: c.lr,
            batch_size: c.batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmName {
    Fedavg,
    Reptile,
    Fedsgd,
    Fomaml,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub algorithm: AlgorithmName,
    #[serde(default)]
    pub rounds: usize,
    #[serde(default = "default_clients_per_round")]
    pub clients_per_round: usize,
    /// Local epochs (fedavg).
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Local steps (reptile, fedavg in step mode, fomaml).
    #[serde(default)]
    pub steps: Option<usize>,
    /// FOMAML's K; the client runs K+1 steps.
    #[serde(default)]
    pub k: Option<usize>,
    /// Defaults to data-proportional for fedavg/fedsgd and uniform otherwise.
    #[serde(default)]
    pub weighting: Option<Weighting>,
    #[serde(default)]
    pub server: ServerSection,
}

fn default_clients_per_round() -> usize {
    5
}

impl StageSection {
    fn default_stage1() -> Self {
        Self {
            algorithm: AlgorithmName::Fedavg,
            rounds: 500,
            clients_per_round: default_clients_per_round(),
            epochs: Some(2),
            steps: None,
            k: None,
            weighting: None,
            server: ServerSection::default(),
        }
    }

    fn default_stage2() -> Self {
        Self {
            algorithm: AlgorithmName::Reptile,
            rounds: 200,
            clients_per_round: default_clients_per_round(),
            epochs: None,
            steps: Some(10),
            k: None,
            weighting: None,
            server: ServerSection {
                kind: ServerKind::Adam,
                lr: Some(0.001),
                ..ServerSection::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    pub kind: ServerKind,
    /// Defaults to 1.0 for sgd/momentum and 0.001 for adam.
    pub lr: Option<f64>,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            kind: ServerKind::Momentum,
            lr: None,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonalizationKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizationSection {
    pub optimizer: PersonalizationKind,
    /// Defaults to `[client].lr` for sgd and 0.001 for adam.
    pub lr: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Evaluate every this many rounds; stage ends are always evaluated.
    pub eval_every: usize,
    pub population: Population,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for PersonalizationSection {
    fn default() -> Self {
        Self {
            optimizer: PersonalizationKind::Sgd,
            lr: None,
            epochs: 5,
            batch_size: 100,
            eval_every: 10,
            population: Population::EvalClients,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Usage(m) => invalid(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(p) = cfg.dataset.path.as_mut() {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Checks every setting that can be checked without touching data.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.replicas == 0 {
            return Err(invalid("replicas must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dataset.eval_fraction) {
            return Err(invalid("dataset.eval_fraction must be in [0, 1)"));
        }
        if self.dataset.kind == DatasetKind::Csv && self.dataset.path.is_none() {
            return Err(invalid("dataset.path is required for csv datasets"));
        }
        self.model_spec().map_err(|e| invalid(format!("model: {e}")))?;
        self.client_optimizer()?;
        for (name, stage) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            self.stage(stage)
                .and_then(|s| s.validate().map_err(|e| invalid(e.to_string())))
                .map_err(|e| invalid(format!("{name}: {e}")))?;
            if stage.clients_per_round > self.expected_train_clients() && self.dataset.kind == DatasetKind::Synthetic {
                return Err(invalid(format!(
                    "{name}.clients_per_round = {} exceeds the {} training clients",
                    stage.clients_per_round,
                    self.expected_train_clients()
                )));
            }
        }
        if self.stage1.rounds + self.stage2.rounds == 0 {
            return Err(invalid("at least one stage needs rounds > 0"));
        }
        self.personalization_config()
            .validate()
            .map_err(|e| invalid(format!("personalization: {e}")))?;
        Ok(())
    }

    fn expected_train_clients(&self) -> usize {
        let n = self.dataset.num_clients;
        n - (self.dataset.eval_fraction * n as f64).floor() as usize
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    pub fn model_spec(&self) -> fedmeta::Result<ModelSpec> {
        let mut dims = self.model.hidden.clone();
        dims.push(self.dataset.num_classes);
        ModelSpec::new(self.dataset.input_dim, dims, self.model.activation, self.model.loss)
    }

    pub fn client_optimizer(&self) -> Result<ClientOptimizerConfig, CliError> {
        ClientOptimizerConfig::new(self.client.lr, self.client.batch_size).map_err(|e| invalid(format!("client: {e}")))
    }

    pub fn stage(&self, s: &StageSection) -> Result<StageConfig, CliError> {
        let client = self.client_optimizer()?;
        let (algorithm, local_mode) = match s.algorithm {
            AlgorithmName::Fedavg => match (s.epochs, s.steps) {
                (Some(e), None) => (Algorithm::Fedavg, LocalMode::Epochs(e)),
                (None, Some(k)) => (Algorithm::Fedavg, LocalMode::Steps(k)),
                (None, None) => (Algorithm::Fedavg, LocalMode::Epochs(1)),
                (Some(_), Some(_)) => return Err(invalid("set either epochs or steps, not both")),
            },
            AlgorithmName::Reptile => {
                if s.epochs.is_some() {
                    return Err(invalid("reptile takes `steps`, not `epochs`"));
                }
                let k = s.steps.ok_or_else(|| invalid("reptile needs `steps`"))?;
                (Algorithm::Reptile, LocalMode::Steps(k))
            }
            AlgorithmName::Fedsgd => {
                if s.epochs.is_some() || s.steps.is_some_and(|k| k != 1) {
                    return Err(invalid("fedsgd always takes exactly one local step"));
                }
                (Algorithm::Fedsgd, LocalMode::Steps(1))
            }
            AlgorithmName::Fomaml => {
                let k = s.k.ok_or_else(|| invalid("fomaml needs `k`"))?;
                if s.epochs.is_some() {
                    return Err(invalid("fomaml takes `k`, not `epochs`"));
                }
                (Algorithm::Fomaml(k), LocalMode::Steps(s.steps.unwrap_or(k + 1)))
            }
        };
        if s.k.is_some() && s.algorithm != AlgorithmName::Fomaml {
            return Err(invalid("`k` only applies to fomaml"));
        }
        let weighting = s.weighting.unwrap_or(match s.algorithm {
            AlgorithmName::Fedavg | AlgorithmName::Fedsgd => Weighting::DataProportional,
            AlgorithmName::Reptile | AlgorithmName::Fomaml => Weighting::Uniform,
        });
        let kind = match s.server.kind {
            ServerKind::Sgd => ServerOptimizerKind::Sgd,
            ServerKind::Momentum => ServerOptimizerKind::Momentum {
                momentum: s.server.momentum,
            },
            ServerKind::Adam => ServerOptimizerKind::Adam {
                beta1: s.server.beta1,
                beta2: s.server.beta2,
                eps: s.server.eps,
            },
        };
        let lr = s.server.lr.unwrap_or(match s.server.kind {
            ServerKind::Adam => 0.001,
            _ => 1.0,
        });
        Ok(StageConfig {
            round: RoundConfig {
                clients_per_round: s.clients_per_round,
                local_mode,
                client,
                weighting,
                algorithm,
            },
            rounds: s.rounds,
            server: ServerOptimizerConfig { kind, lr },
        })
    }

    pub fn stage1(&self) -> Result<StageConfig, CliError> {
        self.stage(&self.stage1)
    }

    pub fn stage2(&self) -> Result<StageConfig, CliError> {
        self.stage(&self.stage2)
    }

    pub fn personalization_config(&self) -> PersonalizationConfig {
        let p = &self.personalization;
        let optimizer = match p.optimizer {
            PersonalizationKind::Sgd => PersonalizationOptimizer::Sgd {
                lr: p.lr.unwrap_or(self.client.lr),
            },
            PersonalizationKind::Adam => PersonalizationOptimizer::Adam {
                lr: p.lr.unwrap_or(0.001),
                beta1: p.beta1,
                beta2: p.beta2,
                eps: p.eps,
            },
        };
        PersonalizationConfig {
            optimizer,
            epochs: p.epochs,
            batch_size: p.batch_size,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            personalization: self.personalization_config(),
            every: self.personalization.eval_every,
            population: self.personalization.population,
        }
    }

    /// Builds (or loads) the dataset and splits off the evaluation clients.
    pub fn dataset(&self) -> fedmeta::Result<FederatedDataset> {
        let d = &self.dataset;
        let seed = self.dataset_seed();
        let ds = match d.kind {
            DatasetKind::Synthetic => generate_synthetic(&SyntheticSpec {
                seed,
                num_clients: d.num_clients,
                classes_per_client: d.classes_per_client,
                examples_per_client: d.examples_per_client,
                input_dim: d.input_dim,
                num_classes: d.num_classes,
                heterogeneity: d.heterogeneity,
                class_separation: d.class_separation,
                noise_std: d.noise_std,
                style_scale: d.style_scale,
            })?,
            DatasetKind::Csv => load_csv_dataset(
                d.path.as_deref().expect("validated"),
                &CsvSchema {
                    input_dim: d.input_dim,
                    num_classes: d.num_classes,
                    seed,
                    has_header: d.has_header,
                },
            )?,
        };
        split_train_eval(ds, d.eval_fraction, seed)
    }

    /// Hash of everything that determines results except the seed, the
    /// replica count and the output location. Runs with equal hashes are
    /// replicas of one experiment.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.seed = 0;
        canonical.replicas = 1;
        canonical.output_dir = None;
        // fields serialize in declaration order, so the encoding is stable
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_reference_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c.replicas, 9);
        let s1 = c.stage1().unwrap();
        assert_eq!(s1.round.client.lr, 0.02);
        assert_eq!(s1.round.client.batch_size, 20);
        assert_eq!(s1.round.clients_per_round, 5);
        assert_eq!(s1.server, ServerOptimizerConfig::momentum(1.0, 0.9));
        assert_eq!(s1.round.weighting, Weighting::DataProportional);
        let s2 = c.stage2().unwrap();
        assert_eq!(s2.round.algorithm, Algorithm::Reptile);
        assert_eq!(s2.round.weighting, Weighting::Uniform);
        assert_eq!(s2.server, ServerOptimizerConfig::adam(0.001));
        let p = c.personalization_config();
        assert_eq!(p.optimizer, PersonalizationOptimizer::Sgd { lr: 0.02 });
        assert_eq!(p.batch_size, 100);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("sed = 3").is_err());
        assert!(ExperimentConfig::from_toml("[client]\nlr = -1.0").is_err());
        assert!(ExperimentConfig::from_toml("[stage1]\nalgorithm = \"fedsgd\"\nsteps = 2").is_err());
        assert!(ExperimentConfig::from_toml("[stage1]\nalgorithm = \"reptile\"\nepochs = 2").is_err());
        assert!(ExperimentConfig::from_toml("[stage1]\nalgorithm = \"fomaml\"").is_err());
        assert!(ExperimentConfig::from_toml("[stage1]\nalgorithm = \"fedavg\"\nclients_per_round = 100").is_err());
        assert!(ExperimentConfig::from_toml("[dataset]\nkind = \"csv\"").is_err());
        assert!(ExperimentConfig::from_toml("replicas = 0").is_err());
    }

    #[test]
    fn fomaml_stage_runs_k_plus_one_steps() {
        let c = ExperimentConfig::from_toml("[stage2]\nalgorithm = \"fomaml\"\nk = 3\nrounds = 4").unwrap();
        let s = c.stage2().unwrap();
        assert_eq!(s.round.algorithm, Algorithm::Fomaml(3));
        assert_eq!(s.round.local_mode, LocalMode::Steps(4));
    }

    #[test]
    fn hash_ignores_seed_and_output_but_not_settings() {
        let a = ExperimentConfig::from_toml("seed = 1\noutput_dir = \"a\"").unwrap();
        let b = ExperimentConfig::from_toml("seed = 2\nreplicas = 3").unwrap();
        let c = ExperimentConfig::from_toml("seed = 1\n[client]\nlr = 0.03").unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash().len(), 16);
    }
}
