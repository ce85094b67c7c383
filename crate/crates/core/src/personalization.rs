//! Per-client personalization and initial-vs-personalized accuracy reports.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, ClientId, FederatedDataset};
use crate::error::{Error, Result};
use crate::model::{self, Batch, Example, ModelSpec, ParamVector};
use crate::optim::AdamMoments;
use crate::rng::{Purpose, StreamRng, Streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PersonalizationOptimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl PersonalizationOptimizer {
    pub fn default_adam() -> Self {
        PersonalizationOptimizer::Adam {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn label(&self) -> String {
        match self {
            PersonalizationOptimizer::Sgd { lr } => format!("sgd(lr={lr})"),
            PersonalizationOptimizer::Adam { lr, .. } => format!("adam(lr={lr})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationConfig {
    pub optimizer: PersonalizationOptimizer,
    pub epochs: usize,
    pub batch_size: usize,
}

impl PersonalizationConfig {
    pub fn sgd(lr: f64, epochs: usize) -> Self {
        Self {
            optimizer: PersonalizationOptimizer::Sgd { lr },
            epochs,
            batch_size: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("personalization batch_size must be positive"));
        }
        match self.optimizer {
            PersonalizationOptimizer::Sgd { lr } if lr >= 0.0 && lr.is_finite() => Ok(()),
            PersonalizationOptimizer::Adam { lr, beta1, beta2, eps }
                if lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 =>
            {
                Ok(())
            }
            _ => Err(Error::contract("invalid personalization optimizer settings")),
        }
    }
}

/// Which client pool to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    TrainClients,
    EvalClients,
}

impl Population {
    pub fn select(self, ds: &FederatedDataset) -> &[ClientId] {
        match self {
            Population::TrainClients => ds.train_client_ids(),
            Population::EvalClients => ds.eval_client_ids(),
        }
    }
}

/// Fraction of examples whose argmax prediction (lowest index on ties)
/// matches the label.
pub fn evaluate_accuracy(spec: &ModelSpec, params: &ParamVector, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("cannot evaluate accuracy on an empty example set"));
    }
    if params.dim() != spec.param_count() {
        return Err(Error::contract("parameter dimension does not match the model"));
    }
    let correct = examples
        .iter()
        .filter(|ex| model::predict(spec, params, &ex.features) == ex.label)
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

/// Result of adapting a model to one client.
#[derive(Debug, Clone, PartialEq)]
pub struct Personalized {
    /// Last finite iterate.
    pub params: ParamVector,
    pub diverged: bool,
}

/// Epoch-at-a-time local adaptation; `E` calls to [`Personalizer::epoch`]
/// reproduce [`personalize`] with `E` epochs exactly.
pub struct Personalizer<'a> {
    spec: &'a ModelSpec,
    client: &'a ClientDataset,
    cfg: PersonalizationConfig,
    params: ParamVector,
    adam: Option<AdamMoments>,
    step: u64,
    diverged: bool,
    rng: StreamRng,
}

impl<'a> Personalizer<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        params: &ParamVector,
        client: &'a ClientDataset,
        cfg: PersonalizationConfig,
        rng: StreamRng,
    ) -> Result<Self> {
        cfg.validate()?;
        if params.dim() != spec.param_count() {
            return Err(Error::contract("parameter dimension does not match the model"));
        }
        let adam = match cfg.optimizer {
            PersonalizationOptimizer::Adam { .. } => Some(AdamMoments::zeros(params.dim())),
            PersonalizationOptimizer::Sgd { .. } => None,
        };
        Ok(Self {
            spec,
            client,
            cfg,
            params: params.clone(),
            adam,
            step: 0,
            diverged: false,
            rng,
        })
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn epoch(&mut self) -> Result<()> {
        if self.diverged {
            return Ok(());
        }
        if self.client.train.is_empty() {
            return Err(Error::contract("client has no training examples to personalize on"));
        }
        let mut order: Vec<usize> = (0..self.client.train.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch = Batch::new(chunk.iter().map(|&i| self.client.train[i].clone()).collect());
            let g = match model::gradient(self.spec, &self.params, &batch) {
                Ok(g) => g,
                Err(Error::Numeric(_)) => {
                    self.diverged = true;
                    return Ok(());
                }
                Err(e) => return Err(e),
            };
            self.step += 1;
            let next = match (self.cfg.optimizer, self.adam.as_mut()) {
                (PersonalizationOptimizer::Sgd { lr }, _) => self.params.axpy(-lr, g.as_slice()),
                (PersonalizationOptimizer::Adam { lr, beta1, beta2, eps }, Some(m)) => {
                    ParamVector::new(m.step(self.params.as_slice(), g.as_slice(), self.step, lr, beta1, beta2, eps))
                }
                (PersonalizationOptimizer::Adam { .. }, None) => unreachable!("adam moments allocated in new"),
            };
            if !next.is_finite() {
                self.diverged = true;
                return Ok(());
            }
            self.params = next;
        }
        Ok(())
    }

    pub fn finish(self) -> Personalized {
        Personalized {
            params: self.params,
            diverged: self.diverged,
        }
    }
}

/// Runs `cfg.epochs` epochs of the configured optimizer on the client's train split.
pub fn personalize(
    spec: &ModelSpec,
    params: &ParamVector,
    client: &ClientDataset,
    cfg: &PersonalizationConfig,
    rng: StreamRng,
) -> Result<Personalized> {
    let mut p = Personalizer::new(spec, params, client, *cfg, rng)?;
    for _ in 0..cfg.epochs {
        p.epoch()?;
    }
    Ok(p.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientOutcome {
    pub client: ClientId,
    pub n_train: usize,
    pub n_test: usize,
    pub initial_acc: f64,
    pub personalized_acc: f64,
    pub diverged: bool,
}

/// Uniform (unweighted) aggregates over clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub n_clients: usize,
    pub mean_initial_acc: f64,
    pub std_initial_acc: f64,
    pub mean_personalized_acc: f64,
    pub std_personalized_acc: f64,
    pub negative_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationReport {
    outcomes: Vec<ClientOutcome>,
    summary: ReportSummary,
}

/// Mean and population standard deviation. Values are summed in sorted order
/// so the result does not depend on input order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (sq.iter().sum::<f64>() / n).sqrt())
}

impl PersonalizationReport {
    pub fn from_outcomes(mut outcomes: Vec<ClientOutcome>) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::contract("a report needs at least one client"));
        }
        outcomes.sort_by_key(|o| o.client);
        let initial: Vec<f64> = outcomes.iter().map(|o| o.initial_acc).collect();
        let personalized: Vec<f64> = outcomes.iter().map(|o| o.personalized_acc).collect();
        let (mean_initial_acc, std_initial_acc) = mean_std(&initial);
        let (mean_personalized_acc, std_personalized_acc) = mean_std(&personalized);
        let negatives = outcomes.iter().filter(|o| o.personalized_acc < o.initial_acc).count();
        let summary = ReportSummary {
            n_clients: outcomes.len(),
            mean_initial_acc,
            std_initial_acc,
            mean_personalized_acc,
            std_personalized_acc,
            negative_fraction: negatives as f64 / outcomes.len() as f64,
        };
        Ok(Self { outcomes, summary })
    }

    pub fn outcomes(&self) -> &[ClientOutcome] {
        &self.outcomes
    }

    pub fn summary(&self) -> &ReportSummary {
        &self.summary
    }
}

fn checked_clients(ds: &FederatedDataset, which: Population) -> Result<Vec<(ClientId, &ClientDataset)>> {
    let ids = which.select(ds);
    if ids.is_empty() {
        return Err(Error::contract(format!("no clients in population {which:?}")));
    }
    ids.iter()
        .map(|&id| {
            let c = ds
                .client(id)
                .ok_or_else(|| Error::contract(format!("unknown client {id}")))?;
            if c.test.is_empty() {
                return Err(Error::contract(format!("client {id} has no test examples")));
            }
            Ok((id, c))
        })
        .collect()
}

/// Personalizes and scores every client in the population. The per-client
/// random stream is keyed by `(key, client id)`.
pub fn eval_population(
    spec: &ModelSpec,
    params: &ParamVector,
    ds: &FederatedDataset,
    which: Population,
    cfg: &PersonalizationConfig,
    streams: &Streams,
    key: u64,
) -> Result<PersonalizationReport> {
    cfg.validate()?;
    let clients = checked_clients(ds, which)?;
    let outcomes = clients
        .par_iter()
        .map(|&(id, client)| {
            let initial_acc = evaluate_accuracy(spec, params, &client.test)?;
            let (personalized_acc, diverged) = if cfg.epochs == 0 {
                (initial_acc, false)
            } else {
                let rng = streams.stream(Purpose::Personalization, &[key, id.0]);
                let p = personalize(spec, params, client, cfg, rng)?;
                (evaluate_accuracy(spec, &p.params, &client.test)?, p.diverged)
            };
            Ok(ClientOutcome {
                client: id,
                n_train: client.train.len(),
                n_test: client.test.len(),
                initial_acc,
                personalized_acc,
                diverged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PersonalizationReport::from_outcomes(outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub optimizer: String,
    pub epochs: usize,
    pub mean_personalized_acc: f64,
    pub std_personalized_acc: f64,
}

/// Mean personalized accuracy after each of `1..=max_epochs` personalization
/// epochs (and `0` when `include_zero`), for every optimizer.
///
/// Row `E` equals [`eval_population`] run with `E` epochs and the same
/// streams and key.
#[allow(clippy::too_many_arguments)]
pub fn epochs_sweep(
    spec: &ModelSpec,
    params: &ParamVector,
    ds: &FederatedDataset,
    which: Population,
    optimizers: &[PersonalizationConfig],
    max_epochs: usize,
    include_zero: bool,
    streams: &Streams,
    key: u64,
) -> Result<Vec<SweepRow>> {
    if max_epochs == 0 {
        return Err(Error::contract("max_epochs must be at least 1"));
    }
    let clients = checked_clients(ds, which)?;
    let mut rows = Vec::new();
    for cfg in optimizers {
        cfg.validate()?;
        // accuracies[client][e] for e in 0..=max_epochs
        let per_client = clients
            .par_iter()
            .map(|&(id, client)| {
                let rng = streams.stream(Purpose::Personalization, &[key, id.0]);
                let mut p = Personalizer::new(spec, params, client, *cfg, rng)?;
                let mut accs = Vec::with_capacity(max_epochs + 1);
                accs.push(evaluate_accuracy(spec, params, &client.test)?);
                for _ in 0..max_epochs {
                    p.epoch()?;
                    accs.push(evaluate_accuracy(spec, p.params(), &client.test)?);
                }
                Ok(accs)
            })
            .collect::<Result<Vec<_>>>()?;
        let start = if include_zero { 0 } else { 1 };
        for e in start..=max_epochs {
            let values: Vec<f64> = per_client.iter().map(|a| a[e]).collect();
            let (mean, std) = mean_std(&values);
            rows.push(SweepRow {
                optimizer: cfg.optimizer.label(),
                epochs: e,
                mean_personalized_acc: mean,
                std_personalized_acc: std,
            });
        }
    }
    Ok(rows)
}
