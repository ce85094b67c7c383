//! Round engine: client sampling, local updates (FedAvg, Reptile, FedSGD,
//! FOMAML), weighted aggregation, server updates, and the two-stage
//! personalized FedAvg driver.
//!
//! A round samples `M` training clients, runs every client's local update
//! independently from its own random stream, aggregates
//! `Δ = Σ w_i g_i / Σ w_i` in ascending client-id order, and hands `Δ` to the
//! server optimizer. Client updates run in parallel; nothing about the
//! result depends on scheduling.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error as ThisError;

use crate::data::{ClientDataset, ClientId, FederatedDataset};
use crate::error::{Error, Result};
use crate::model::{sgd_trajectory, Gradient, ModelSpec, ParamVector};
use crate::optim::{
    make_client_batches, make_client_steps, ClientOptimizerConfig, ServerOptimizerConfig, ServerOptimizerKind,
    ServerOptimizerState,
};
use crate::personalization::{eval_population, PersonalizationConfig, Population, ReportSummary};
use crate::rng::{Purpose, Streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMode {
    Epochs(usize),
    Steps(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    DataProportional,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Local SGD over the configured epochs or steps; the client returns its delta.
    Fedavg,
    /// `K` local steps, every client weighted equally.
    Reptile,
    /// One local gradient step.
    Fedsgd,
    /// `K` local steps, then the client returns `−β` times the gradient of step `K+1`.
    Fomaml(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub clients_per_round: usize,
    pub local_mode: LocalMode,
    pub client: ClientOptimizerConfig,
    pub weighting: Weighting,
    pub algorithm: Algorithm,
}

impl RoundConfig {
    /// FedAvg(E): `epochs` local epochs, data-proportional weights.
    pub fn fedavg(clients_per_round: usize, epochs: usize, client: ClientOptimizerConfig) -> Self {
        Self {
            clients_per_round,
            local_mode: LocalMode::Epochs(epochs),
            client,
            weighting: Weighting::DataProportional,
            algorithm: Algorithm::Fedavg,
        }
    }

    /// Reptile(K): `steps` local steps, uniform weights.
    pub fn reptile(clients_per_round: usize, steps: usize, client: ClientOptimizerConfig) -> Self {
        Self {
            clients_per_round,
            local_mode: LocalMode::Steps(steps),
            client,
            weighting: Weighting::Uniform,
            algorithm: Algorithm::Reptile,
        }
    }

    pub fn fedsgd(clients_per_round: usize, client: ClientOptimizerConfig) -> Self {
        Self {
            clients_per_round,
            local_mode: LocalMode::Steps(1),
            client,
            weighting: Weighting::DataProportional,
            algorithm: Algorithm::Fedsgd,
        }
    }

    pub fn fomaml(clients_per_round: usize, k: usize, client: ClientOptimizerConfig) -> Self {
        Self {
            clients_per_round,
            local_mode: LocalMode::Steps(k + 1),
            client,
            weighting: Weighting::Uniform,
            algorithm: Algorithm::Fomaml(k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients_per_round == 0 {
            return Err(Error::contract("clients_per_round must be positive"));
        }
        self.client.validate()?;
        match (self.algorithm, self.local_mode) {
            (_, LocalMode::Epochs(0)) | (_, LocalMode::Steps(0)) => {
                Err(Error::contract("local epochs/steps must be positive"))
            }
            (Algorithm::Fedavg, _) => Ok(()),
            (Algorithm::Reptile, LocalMode::Steps(_)) => Ok(()),
            (Algorithm::Reptile, LocalMode::Epochs(_)) => Err(Error::contract("reptile runs a number of local steps")),
            (Algorithm::Fedsgd, LocalMode::Steps(1)) => Ok(()),
            (Algorithm::Fedsgd, _) => Err(Error::contract("fedsgd implies exactly one local step")),
            (Algorithm::Fomaml(k), LocalMode::Steps(s)) if s > k => Ok(()),
            (Algorithm::Fomaml(k), _) => Err(Error::contract(format!(
                "fomaml({k}) needs at least {} local steps",
                k + 1
            ))),
        }
    }
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdateResult {
    pub client: ClientId,
    /// `θ_i − θ`, or the scaled FOMAML gradient for [`Algorithm::Fomaml`].
    /// Dropped from rounds a [`TrainingRun`] does not trace.
    pub delta: Vec<f64>,
    pub weight: f64,
    /// Raw gradients `∇L(θ_{j−1}, b_j)` in step order; empty unless traced.
    pub step_gradients: Vec<Gradient>,
}

/// Uniformly samples `m` distinct ids without replacement, returned in
/// ascending order.
pub fn sample_clients<R: Rng + ?Sized>(ids: &[ClientId], m: usize, rng: &mut R) -> Result<Vec<ClientId>> {
    if m == 0 || m > ids.len() {
        return Err(Error::contract(format!(
            "cannot sample {m} clients from a pool of {}",
            ids.len()
        )));
    }
    let mut picked: Vec<ClientId> = rand::seq::index::sample(rng, ids.len(), m)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

fn weight_of(client: &ClientDataset, weighting: Weighting) -> f64 {
    match weighting {
        Weighting::DataProportional => client.weight() as f64,
        Weighting::Uniform => 1.0,
    }
}

fn local_sgd(
    spec: &ModelSpec,
    params: &ParamVector,
    id: ClientId,
    batches: &[crate::model::Batch],
    beta: f64,
) -> Result<(ParamVector, Vec<Gradient>)> {
    sgd_trajectory(spec, params, batches, beta).map_err(|e| e.with_client(id.0))
}

/// FedAvg's ClientUpdate: `epochs` shuffled passes of SGD, returning
/// `θ_final − θ` with weight `|train|` (data-proportional) or 1.
#[allow(clippy::too_many_arguments)]
pub fn client_update<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParamVector,
    id: ClientId,
    client: &ClientDataset,
    epochs: usize,
    cfg: &ClientOptimizerConfig,
    weighting: Weighting,
    rng: &mut R,
    trace: bool,
) -> Result<ClientUpdateResult> {
    let batches = make_client_batches(client, epochs, cfg, rng)?;
    let (last, grads) = local_sgd(spec, params, id, &batches, cfg.lr)?;
    Ok(ClientUpdateResult {
        client: id,
        delta: last.delta_from(params),
        weight: weight_of(client, weighting),
        step_gradients: if trace { grads } else { Vec::new() },
    })
}

/// Reptile's InnerLoop: exactly `k` SGD steps on batches drawn from the
/// client's train split. The weight is always 1.
#[allow(clippy::too_many_arguments)]
pub fn inner_loop_reptile<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParamVector,
    id: ClientId,
    client: &ClientDataset,
    k: usize,
    cfg: &ClientOptimizerConfig,
    rng: &mut R,
    trace: bool,
) -> Result<ClientUpdateResult> {
    if k == 0 {
        return Err(Error::contract("reptile needs at least one local step"));
    }
    let batches = make_client_steps(client, k, cfg, rng)?;
    let (last, grads) = local_sgd(spec, params, id, &batches, cfg.lr)?;
    Ok(ClientUpdateResult {
        client: id,
        delta: last.delta_from(params),
        weight: 1.0,
        step_gradients: if trace { grads } else { Vec::new() },
    })
}

/// `(1/T) Σ_i −β·g^i_{k+1}`: the mean scaled gradient of step `k+1` along each
/// recorded trajectory. `k = 0` is the FedSGD update.
pub fn fomaml_update(trajectories: &[&[Gradient]], k: usize, beta: f64) -> Result<Vec<f64>> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::contract("fomaml_update needs at least one trajectory"))?;
    let dim = first
        .get(k)
        .ok_or_else(|| {
            Error::contract(format!(
                "trajectory has {} gradients, fomaml({k}) needs {}",
                first.len(),
                k + 1
            ))
        })?
        .dim();
    let mut sum = vec![0.0; dim];
    for (i, t) in trajectories.iter().enumerate() {
        let g = t.get(k).ok_or_else(|| {
            Error::contract(format!(
                "trajectory {i} has {} gradients, fomaml({k}) needs {}",
                t.len(),
                k + 1
            ))
        })?;
        if g.dim() != dim {
            return Err(Error::contract("trajectories disagree on parameter dimension"));
        }
        for (s, v) in sum.iter_mut().zip(g.as_slice()) {
            *s += -beta * v;
        }
    }
    let t = trajectories.len() as f64;
    Ok(sum.into_iter().map(|s| s / t).collect())
}

/// Record of one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    /// Global 1-based round index across all stages.
    pub round: usize,
    pub stage: usize,
    pub beta: f64,
    pub sampled: Vec<ClientId>,
    pub clients: Vec<ClientUpdateResult>,
    /// `Σ w_i g_i / Σ w_i` over `clients`.
    pub aggregated: Vec<f64>,
}

impl RoundTrace {
    pub fn is_traced(&self) -> bool {
        !self.clients.is_empty() && self.clients.iter().all(|c| !c.step_gradients.is_empty())
    }
}

/// Weighted mean of client deltas in the given (ascending id) order.
pub fn aggregate(results: &[ClientUpdateResult]) -> Result<Vec<f64>> {
    let dim = results
        .first()
        .ok_or_else(|| Error::contract("nothing to aggregate"))?
        .delta
        .len();
    let total: f64 = results.iter().map(|r| r.weight).sum();
    if !(total > 0.0) {
        return Err(Error::contract("aggregation weights must sum to a positive value"));
    }
    let mut acc = vec![0.0; dim];
    for r in results {
        for (a, d) in acc.iter_mut().zip(&r.delta) {
            *a += r.weight * d;
        }
    }
    Ok(acc.into_iter().map(|a| a / total).collect())
}

/// Where a round sits in a run; keys the round's random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundIndex {
    pub stage: usize,
    /// 1-based round within the stage.
    pub round_in_stage: usize,
    /// 1-based round across all stages.
    pub global_round: usize,
}

/// Runs one client's local work for the configured algorithm.
fn run_client(
    spec: &ModelSpec,
    params: &ParamVector,
    id: ClientId,
    client: &ClientDataset,
    cfg: &RoundConfig,
    streams: &Streams,
    at: RoundIndex,
    trace: bool,
) -> Result<ClientUpdateResult> {
    let mut rng = streams.stream(
        Purpose::ClientBatches,
        &[at.stage as u64, at.round_in_stage as u64, id.0],
    );
    match (cfg.algorithm, cfg.local_mode) {
        (Algorithm::Fedavg, LocalMode::Epochs(e)) => {
            client_update(spec, params, id, client, e, &cfg.client, cfg.weighting, &mut rng, trace)
        }
        (Algorithm::Fedavg, LocalMode::Steps(k)) | (Algorithm::Fedsgd, LocalMode::Steps(k)) => {
            let mut r = inner_loop_reptile(spec, params, id, client, k, &cfg.client, &mut rng, trace)?;
            r.weight = weight_of(client, cfg.weighting);
            Ok(r)
        }
        (Algorithm::Reptile, LocalMode::Steps(k)) => {
            inner_loop_reptile(spec, params, id, client, k, &cfg.client, &mut rng, trace)
        }
        (Algorithm::Fomaml(k), LocalMode::Steps(_)) => {
            let batches = make_client_steps(client, k + 1, &cfg.client, &mut rng)?;
            let (_, grads) = local_sgd(spec, params, id, &batches, cfg.client.lr)?;
            let delta = fomaml_update(&[grads.as_slice()], k, cfg.client.lr)?;
            Ok(ClientUpdateResult {
                client: id,
                delta,
                weight: weight_of(client, cfg.weighting),
                step_gradients: if trace { grads } else { Vec::new() },
            })
        }
        _ => Err(Error::contract("algorithm and local mode are incompatible")),
    }
}

/// One communication round: sample, local updates, aggregate, server step.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    spec: &ModelSpec,
    params: &ParamVector,
    dataset: &FederatedDataset,
    cfg: &RoundConfig,
    server: &ServerOptimizerState,
    streams: &Streams,
    at: RoundIndex,
    trace: bool,
) -> Result<(ParamVector, ServerOptimizerState, RoundTrace)> {
    cfg.validate()?;
    let pool = dataset.train_client_ids();
    if pool.len() < cfg.clients_per_round {
        return Err(Error::contract(format!(
            "round needs {} training clients, dataset has {}",
            cfg.clients_per_round,
            pool.len()
        )));
    }
    let mut rng = streams.stream(Purpose::ClientSampling, &[at.stage as u64, at.round_in_stage as u64]);
    let sampled = sample_clients(pool, cfg.clients_per_round, &mut rng)?;

    let clients = sampled
        .par_iter()
        .map(|&id| {
            let client = dataset
                .client(id)
                .ok_or_else(|| Error::contract(format!("unknown client {id}")))?;
            run_client(spec, params, id, client, cfg, streams, at, trace)
        })
        .collect::<Result<Vec<_>>>()?;

    let aggregated = aggregate(&clients)?;
    let (next, server) = server.apply(params, &aggregated)?;
    Ok((
        next,
        server,
        RoundTrace {
            round: at.global_round,
            stage: at.stage,
            beta: cfg.client.lr,
            sampled,
            clients,
            aggregated,
        },
    ))
}

/// One training stage: a round configuration, its length, and the server
/// optimizer it starts fresh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub round: RoundConfig,
    pub rounds: usize,
    pub server: ServerOptimizerConfig,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        self.round.validate()?;
        self.server.validate()
    }

    /// FedAvg(E) with heavy-ball momentum at the server.
    pub fn fedavg_momentum(rounds: usize, round: RoundConfig, lr: f64, momentum: f64) -> Self {
        Self {
            round,
            rounds,
            server: ServerOptimizerConfig::momentum(lr, momentum),
        }
    }

    /// Reptile(K) fine-tuning with Adam at the server.
    pub fn reptile_adam(rounds: usize, round: RoundConfig, lr: f64) -> Self {
        Self {
            round,
            rounds,
            server: ServerOptimizerConfig {
                kind: ServerOptimizerKind::default_adam(),
                lr,
            },
        }
    }
}

/// When and how training-time evaluation snapshots are taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub personalization: PersonalizationConfig,
    /// Snapshot every `every` global rounds (0: only at the end of each stage).
    pub every: usize,
    pub population: Population,
}

/// Which rounds keep their per-step gradients.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum TracePolicy {
    #[default]
    Off,
    All,
    Rounds(BTreeSet<usize>),
}

impl TracePolicy {
    pub fn traces(&self, global_round: usize) -> bool {
        match self {
            TracePolicy::Off => false,
            TracePolicy::All => true,
            TracePolicy::Rounds(r) => r.contains(&global_round),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub eval: Option<EvalConfig>,
    pub trace: TracePolicy,
    /// Keep a parameter checkpoint every this many global rounds (0: none).
    pub checkpoint_every: usize,
    /// Stamp snapshots with elapsed wall-clock time (makes runs non-reproducible).
    pub wallclock: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub round: usize,
    pub stage: usize,
    pub summary: ReportSummary,
    pub elapsed_ms: Option<u64>,
}

/// A (possibly multi-stage) training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub spec: ModelSpec,
    pub seed: u64,
    pub stages: Vec<StageConfig>,
    pub initial_params: ParamVector,
    pub params: ParamVector,
    pub rounds: Vec<RoundTrace>,
    pub snapshots: Vec<EvalSnapshot>,
    pub checkpoints: Vec<(usize, ParamVector)>,
}

/// A run that stopped on an error, with everything completed before it.
#[derive(Debug, ThisError)]
#[error("training stopped after round {}: {error}", partial.completed_rounds())]
pub struct RunFailure {
    #[source]
    pub error: Error,
    pub partial: Box<TrainingRun>,
}

impl TrainingRun {
    /// A run starting from the seeded initialization.
    pub fn initialize(spec: &ModelSpec, seed: u64) -> Self {
        let params = spec.init_params(&mut Streams::new(seed).stream(Purpose::Init, &[]));
        Self::from_params(spec, seed, params)
    }

    pub fn from_params(spec: &ModelSpec, seed: u64, params: ParamVector) -> Self {
        Self {
            spec: spec.clone(),
            seed,
            stages: Vec::new(),
            initial_params: params.clone(),
            params,
            rounds: Vec::new(),
            snapshots: Vec::new(),
            checkpoints: Vec::new(),
        }
    }

    pub fn completed_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn streams(&self) -> Streams {
        Streams::new(self.seed)
    }

    /// Appends a stage continuing from the current parameters with a fresh
    /// server optimizer.
    pub fn run_stage(
        mut self,
        dataset: &FederatedDataset,
        stage: &StageConfig,
        opts: &RunOptions,
    ) -> std::result::Result<Self, RunFailure> {
        if let Err(error) = stage.validate() {
            return Err(RunFailure {
                error,
                partial: Box::new(self),
            });
        }
        self.stages.push(*stage);
        let stage_no = self.stages.len();
        let streams = self.streams();
        let started = std::time::Instant::now();
        let elapsed_before = self.snapshots.last().and_then(|s| s.elapsed_ms).unwrap_or(0);
        let elapsed = move || elapsed_before + started.elapsed().as_millis() as u64;
        let mut server = match ServerOptimizerState::new(stage.server, self.params.dim()) {
            Ok(s) => s,
            Err(error) => {
                return Err(RunFailure {
                    error,
                    partial: Box::new(self),
                })
            }
        };
        for r in 1..=stage.rounds {
            let at = RoundIndex {
                stage: stage_no,
                round_in_stage: r,
                global_round: self.rounds.len() + 1,
            };
            let step = run_round(
                &self.spec,
                &self.params,
                dataset,
                &stage.round,
                &server,
                &streams,
                at,
                opts.trace.traces(at.global_round),
            );
            let (next, next_server, mut trace) = match step {
                Ok(v) => v,
                Err(error) => {
                    return Err(RunFailure {
                        error,
                        partial: Box::new(self),
                    })
                }
            };
            self.params = next;
            server = next_server;
            if !opts.trace.traces(at.global_round) {
                trace.clients.iter_mut().for_each(|c| c.delta = Vec::new());
            }
            self.rounds.push(trace);

            if opts.checkpoint_every > 0 && at.global_round % opts.checkpoint_every == 0 {
                self.checkpoints.push((at.global_round, self.params.clone()));
            }
            if let Some(eval) = &opts.eval {
                let due = (eval.every > 0 && at.global_round % eval.every == 0) || r == stage.rounds;
                if due {
                    if let Err(error) = self.snapshot(dataset, eval, stage_no, opts.wallclock.then(elapsed)) {
                        return Err(RunFailure {
                            error,
                            partial: Box::new(self),
                        });
                    }
                }
            }
        }
        Ok(self)
    }

    fn snapshot(
        &mut self,
        dataset: &FederatedDataset,
        eval: &EvalConfig,
        stage: usize,
        elapsed_ms: Option<u64>,
    ) -> Result<()> {
        let round = self.rounds.len();
        let report = eval_population(
            &self.spec,
            &self.params,
            dataset,
            eval.population,
            &eval.personalization,
            &self.streams(),
            round as u64,
        )?;
        self.snapshots.push(EvalSnapshot {
            round,
            stage,
            summary: *report.summary(),
            elapsed_ms,
        });
        Ok(())
    }

    /// Last snapshot taken in `stage` (1-based).
    pub fn stage_end_snapshot(&self, stage: usize) -> Option<&EvalSnapshot> {
        self.snapshots.iter().rev().find(|s| s.stage == stage)
    }
}

/// Two-stage personalized FedAvg: FedAvg(E) with a momentum server, then
/// Reptile(K) fine-tuning with an Adam server, with periodic
/// personalization snapshots using the training client optimizer.
pub fn run_personalized_fedavg(
    spec: &ModelSpec,
    dataset: &FederatedDataset,
    stage1: &StageConfig,
    stage2: &StageConfig,
    opts: &RunOptions,
    seed: u64,
) -> std::result::Result<TrainingRun, RunFailure> {
    let run = TrainingRun::initialize(spec, seed);
    let run = run.run_stage(dataset, stage1, opts)?;
    if stage2.rounds == 0 {
        return Ok(run);
    }
    run.run_stage(dataset, stage2, opts)
}
