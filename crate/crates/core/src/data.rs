//! Federated datasets: synthetic non-i.i.d. generation, CSV ingestion, and
//! train/eval client partitioning.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Example;
use crate::rng::{splitmix64, Purpose, Streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u64);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl ClientDataset {
    /// Aggregation weight under data-proportional weighting.
    pub fn weight(&self) -> usize {
        self.train.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    clients: BTreeMap<ClientId, ClientDataset>,
    train_client_ids: Vec<ClientId>,
    eval_client_ids: Vec<ClientId>,
    input_dim: usize,
    num_classes: usize,
}

impl FederatedDataset {
    /// Builds a dataset with every client assigned to training.
    pub fn new(clients: BTreeMap<ClientId, ClientDataset>, input_dim: usize, num_classes: usize) -> Result<Self> {
        for (id, c) in &clients {
            for ex in c.train.iter().chain(&c.test) {
                if ex.features.len() != input_dim {
                    return Err(Error::contract(format!(
                        "client {id}: example has {} features, expected {input_dim}",
                        ex.features.len()
                    )));
                }
                if ex.label >= num_classes {
                    return Err(Error::contract(format!(
                        "client {id}: label {} out of range for {num_classes} classes",
                        ex.label
                    )));
                }
            }
        }
        let train_client_ids = clients.keys().copied().collect();
        Ok(Self {
            clients,
            train_client_ids,
            eval_client_ids: Vec::new(),
            input_dim,
            num_classes,
        })
    }

    pub fn client(&self, id: ClientId) -> Option<&ClientDataset> {
        self.clients.get(&id)
    }

    pub fn clients(&self) -> &BTreeMap<ClientId, ClientDataset> {
        &self.clients
    }

    pub fn train_client_ids(&self) -> &[ClientId] {
        &self.train_client_ids
    }

    pub fn eval_client_ids(&self) -> &[ClientId] {
        &self.eval_client_ids
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut class_histogram = vec![0usize; self.num_classes];
        let mut per_client = Vec::with_capacity(self.clients.len());
        for (id, c) in &self.clients {
            for ex in c.train.iter().chain(&c.test) {
                class_histogram[ex.label] += 1;
            }
            per_client.push(ClientSummary {
                id: *id,
                n_train: c.train.len(),
                n_test: c.test.len(),
            });
        }
        DatasetManifest {
            num_clients: self.clients.len(),
            train_clients: self.train_client_ids.len(),
            eval_clients: self.eval_client_ids.len(),
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            total_train: per_client.iter().map(|c| c.n_train).sum(),
            total_test: per_client.iter().map(|c| c.n_test).sum(),
            class_histogram,
            per_client,
        }
    }
}

/// Provenance summary written next to experiment outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_clients: usize,
    pub train_clients: usize,
    pub eval_clients: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub total_train: usize,
    pub total_test: usize,
    pub class_histogram: Vec<usize>,
    pub per_client: Vec<ClientSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub id: ClientId,
    pub n_train: usize,
    pub n_test: usize,
}

/// Number of training examples out of `n` under the fixed 80/20 split.
/// Any client with two or more examples keeps at least one test example.
pub fn train_count(n: usize) -> usize {
    if n <= 1 {
        return n;
    }
    (n * 4 / 5).clamp(1, n - 1)
}

/// Parameters of the synthetic non-i.i.d. generator.
///
/// Each client keeps `classes_per_client` classes, draws label proportions
/// from a symmetric Dirichlet with concentration `(1 − h)·10 + 0.05`, and
/// observes class-conditional Gaussian features through a private affine map
/// `x ↦ (I + h·s·R)x + h·s·t` where `R`, `t` are standard Gaussian draws
/// (`R` scaled by `1/√d`) and `s` is `style_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub examples_per_client: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub heterogeneity: f64,
    #[serde(default = "default_class_separation")]
    pub class_separation: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_style")]
    pub style_scale: f64,
}

fn default_class_separation() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    1.0
}
fn default_style() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(
        seed: u64,
        num_clients: usize,
        classes_per_client: usize,
        examples_per_client: usize,
        input_dim: usize,
        num_classes: usize,
        heterogeneity: f64,
    ) -> Self {
        Self {
            seed,
            num_clients,
            classes_per_client,
            examples_per_client,
            input_dim,
            num_classes,
            heterogeneity,
            class_separation: default_class_separation(),
            noise_std: default_noise(),
            style_scale: default_style(),
        }
    }

    pub fn dirichlet_concentration(&self) -> f64 {
        (1.0 - self.heterogeneity) * 10.0 + 0.05
    }

    fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::contract(
                "num_clients, input_dim and num_classes must be positive",
            ));
        }
        if self.classes_per_client == 0 || self.classes_per_client > self.num_classes {
            return Err(Error::contract(format!(
                "classes_per_client must be in 1..={}, got {}",
                self.num_classes, self.classes_per_client
            )));
        }
        if self.examples_per_client < 2 {
            return Err(Error::contract("examples_per_client must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::contract(format!(
                "heterogeneity must be in [0, 1], got {}",
                self.heterogeneity
            )));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("noise_std", self.noise_std),
            ("style_scale", self.style_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Generates a synthetic federated dataset; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FederatedDataset> {
    spec.validate()?;
    let streams = Streams::new(spec.seed);
    let d = spec.input_dim;
    let h = spec.heterogeneity;

    let mut global = streams.stream(Purpose::SyntheticData, &[u64::MAX]);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| gaussian_vec(&mut global, d, spec.class_separation))
        .collect();
    let gamma = Gamma::new(spec.dirichlet_concentration(), 1.0)
        .map_err(|e| Error::contract(format!("invalid Dirichlet concentration: {e}")))?;

    let mut clients = BTreeMap::new();
    for i in 0..spec.num_clients {
        let mut rng = streams.stream(Purpose::SyntheticData, &[i as u64]);

        let mut classes: Vec<usize> = (0..spec.num_classes).collect();
        classes.shuffle(&mut rng);
        classes.truncate(spec.classes_per_client);
        classes.sort_unstable();

        let mut props: Vec<f64> = classes.iter().map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            props.iter_mut().for_each(|p| *p = 1.0);
        }
        let label_dist =
            WeightedIndex::new(&props).map_err(|e| Error::contract(format!("degenerate label distribution: {e}")))?;

        let style = h * spec.style_scale;
        let mix = gaussian_vec(&mut rng, d * d, style / (d as f64).sqrt());
        let shift = gaussian_vec(&mut rng, d, style);

        let examples: Vec<Example> = (0..spec.examples_per_client)
            .map(|_| {
                let label = classes[label_dist.sample(&mut rng)];
                let latent: Vec<f64> = means[label]
                    .iter()
                    .map(|m| m + spec.noise_std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let features = (0..d)
                    .map(|r| {
                        let row = &mix[r * d..(r + 1) * d];
                        latent[r] + row.iter().zip(&latent).map(|(a, z)| a * z).sum::<f64>() + shift[r]
                    })
                    .collect();
                Example::new(features, label)
            })
            .collect();

        let n_train = train_count(examples.len());
        let mut train = examples;
        let test = train.split_off(n_train);
        clients.insert(ClientId(i as u64), ClientDataset { train, test });
    }
    FederatedDataset::new(clients, d, spec.num_classes)
}

/// Column layout of a CSV dataset: `client_id,label,feature_0,...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Seeds the per-client train/test assignment.
    pub seed: u64,
    #[serde(default)]
    pub has_header: bool,
}

/// Reads a client-keyed CSV file and splits each client's rows 80/20.
///
/// The split orders each client's rows by a seeded hash of their position and
/// takes the first 80% for training; both parts keep file order.
pub fn load_csv_dataset(path: &Path, schema: &CsvSchema) -> Result<FederatedDataset> {
    if schema.input_dim == 0 || schema.num_classes == 0 {
        return Err(Error::contract("schema input_dim and num_classes must be positive"));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut rows: BTreeMap<ClientId, Vec<Example>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != schema.input_dim + 2 {
            return Err(Error::Schema {
                line,
                message: format!(
                    "expected {} features, found {}",
                    schema.input_dim,
                    record.len().saturating_sub(2)
                ),
            });
        }
        let client: u64 = record[0].parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid client id {:?}", &record[0]),
        })?;
        let label: usize = record[1].parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid label {:?}", &record[1]),
        })?;
        if label >= schema.num_classes {
            return Err(Error::Schema {
                line,
                message: format!("label {label} is not below num_classes {}", schema.num_classes),
            });
        }
        let features = record
            .iter()
            .skip(2)
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("invalid feature value {f:?}"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.entry(ClientId(client))
            .or_default()
            .push(Example::new(features, label));
    }

    let clients = rows
        .into_iter()
        .map(|(id, examples)| {
            let n = examples.len();
            let mut order: Vec<(u64, usize)> = (0..n)
                .map(|i| {
                    let mut s = schema.seed ^ id.0.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64).rotate_left(32);
                    (splitmix64(&mut s), i)
                })
                .collect();
            order.sort_unstable();
            let mut is_train = vec![false; n];
            for &(_, i) in order.iter().take(train_count(n)) {
                is_train[i] = true;
            }
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (ex, t) in examples.into_iter().zip(is_train) {
                if t {
                    train.push(ex);
                } else {
                    test.push(ex);
                }
            }
            (id, ClientDataset { train, test })
        })
        .collect();
    FederatedDataset::new(clients, schema.input_dim, schema.num_classes)
}

/// Moves `⌊eval_fraction·N⌋` clients, chosen by a seeded shuffle, to the
/// evaluation pool. Evaluation clients are never sampled for training.
pub fn split_train_eval(ds: FederatedDataset, eval_fraction: f64, seed: u64) -> Result<FederatedDataset> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::contract(format!(
            "eval_fraction must be in [0, 1), got {eval_fraction}"
        )));
    }
    let mut ids: Vec<ClientId> = ds.clients.keys().copied().collect();
    let n_eval = (eval_fraction * ids.len() as f64).floor() as usize;
    let mut rng = Streams::new(seed).stream(Purpose::TrainEvalSplit, &[]);
    ids.shuffle(&mut rng);
    let mut eval: Vec<ClientId> = ids[..n_eval].to_vec();
    let mut train: Vec<ClientId> = ids[n_eval..].to_vec();
    eval.sort_unstable();
    train.sort_unstable();
    if let Some(id) = train.iter().find(|id| ds.clients[id].train.is_empty()) {
        return Err(Error::contract(format!(
            "training client {id} has no training examples"
        )));
    }
    Ok(FederatedDataset {
        train_client_ids: train,
        eval_client_ids: eval,
        ..ds
    })
}
