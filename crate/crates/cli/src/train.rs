//! `fedmeta train`: runs every replica of a config and writes one run
//! directory per replica seed.
//!
//! Run directory layout:
//!
//! ```text
//! seed-<S>/
//!   manifest.json          config hash, seed, stages, status, stage-end summaries
//!   metrics.csv            one row per evaluation snapshot
//!   stage1.ckpt            parameters at the end of stage 1 (if it ran)
//!   final.ckpt             parameters after the last completed round
//!   checkpoints/round-NNNN.ckpt
//!   traces/round-NNNN.json rounds recorded with --trace
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use fedmeta::checkpoint::Checkpoint;
use fedmeta::data::FederatedDataset;
use fedmeta::federation::{EvalSnapshot, RoundTrace, RunOptions, StageConfig, TracePolicy, TrainingRun};
use fedmeta::personalization::ReportSummary;
use fedmeta::{ModelSpec, ParamVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::output::{self, MetricRow, MANIFEST, METRICS};
use crate::CliError;

pub const MANIFEST_FORMAT: &str = "fedmeta-run/1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceSelection {
    All,
    Rounds(BTreeSet<usize>),
}

impl TraceSelection {
    /// `all` or a comma-separated list of global round numbers.
    pub fn parse(s: &str) -> Result<Self, CliError> {
        if s == "all" {
            return Ok(TraceSelection::All);
        }
        s.split(',')
            .map(|r| {
                r.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&r| r > 0)
                    .ok_or_else(|| CliError::Usage(format!("invalid trace round {r:?}")))
            })
            .collect::<Result<BTreeSet<_>, _>>()
            .map(TraceSelection::Rounds)
    }

    fn policy(&self) -> TracePolicy {
        match self {
            TraceSelection::All => TracePolicy::All,
            TraceSelection::Rounds(r) => TracePolicy::Rounds(r.clone()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out: Option<PathBuf>,
    pub trace: Option<TraceSelection>,
    pub checkpoint_every: usize,
    pub wallclock: bool,
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEnd {
    pub stage: usize,
    pub round: usize,
    pub summary: ReportSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub train_clients: usize,
    pub eval_clients: usize,
    pub input_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_seed: u64,
    /// `personalized-fedavg`, `fedavg-only` (no stage 2) or `fine-tune-only` (no stage 1).
    pub mode: String,
    /// `complete` or `failed`.
    pub status: String,
    pub error: Option<String>,
    pub completed_rounds: usize,
    pub stages: Vec<StageConfig>,
    pub stage_ends: Vec<StageEnd>,
    pub traced_rounds: Vec<usize>,
    pub checkpoints: Vec<String>,
    pub dataset: DatasetInfo,
    pub config: ExperimentConfig,
}

/// A trace file: one recorded round plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub config_hash: String,
    pub seed: u64,
    pub trace: RoundTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub error: Option<String>,
}

pub fn run_dir_name(seed: u64) -> String {
    format!("seed-{seed}")
}

pub fn trace_file_name(round: usize) -> String {
    format!("round-{round:04}.json")
}

pub fn mode(cfg: &ExperimentConfig) -> &'static str {
    match (cfg.stage1.rounds, cfg.stage2.rounds) {
        (_, 0) => "fedavg-only",
        (0, _) => "fine-tune-only",
        _ => "personalized-fedavg",
    }
}

/// Runs all replicas (seeds `seed, seed+1, ...`) and writes their run
/// directories under the output directory.
pub fn cmd_train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<Vec<ReplicaResult>, CliError> {
    cfg.validate()?;
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set output_dir".into()))?;
    let seeds: Vec<u64> = (0..cfg.replicas as u64).map(|i| cfg.seed + i).collect();
    let dirs: Vec<PathBuf> = seeds.iter().map(|&s| out.join(run_dir_name(s))).collect();
    for d in &dirs {
        if d.exists() && !opts.force && std::fs::read_dir(d).map(|mut r| r.next().is_some()).unwrap_or(false) {
            return Err(CliError::Usage(format!(
                "{} already exists; pass --force to overwrite it",
                d.display()
            )));
        }
    }
    let spec = cfg.model_spec()?;
    let dataset = cfg.dataset()?;
    if spec.input_dim() != dataset.input_dim() {
        return Err(CliError::Usage(format!(
            "model input_dim {} does not match the dataset's {}",
            spec.input_dim(),
            dataset.input_dim()
        )));
    }
    for d in &dirs {
        output::claim_dir(d, opts.force)?;
    }
    seeds
        .par_iter()
        .zip(dirs.par_iter())
        .map(|(&seed, dir)| train_replica(cfg, &spec, &dataset, seed, dir, opts))
        .collect()
}

fn train_replica(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    dataset: &FederatedDataset,
    seed: u64,
    dir: &Path,
    opts: &TrainOptions,
) -> Result<ReplicaResult, CliError> {
    let hash = cfg.config_hash();
    let run_opts = RunOptions {
        eval: Some(cfg.eval_config()),
        trace: opts.trace.as_ref().map(TraceSelection::policy).unwrap_or_default(),
        checkpoint_every: opts.checkpoint_every,
        wallclock: opts.wallclock,
    };
    let stages = [cfg.stage1()?, cfg.stage2()?];
    let mut run = TrainingRun::initialize(spec, seed);
    let mut error = None;
    let mut stage1_params: Option<ParamVector> = None;
    for (i, stage) in stages.iter().enumerate() {
        if stage.rounds == 0 {
            continue;
        }
        match run.run_stage(dataset, stage, &run_opts) {
            Ok(r) => run = r,
            Err(failure) => {
                error = Some(failure.error.to_string());
                run = *failure.partial;
                break;
            }
        }
        if i == 0 {
            stage1_params = Some(run.params.clone());
        }
    }

    let ckpt = |params: &ParamVector, round: usize| -> Result<Vec<u8>, CliError> {
        Ok(Checkpoint::new(spec.clone(), params.clone())?
            .with_meta("config_hash", &hash)
            .with_meta("seed", seed)
            .with_meta("round", round)
            .to_bytes())
    };
    let mut checkpoints = Vec::new();
    if let Some(p) = &stage1_params {
        output::write_file(&dir.join("stage1.ckpt"), &ckpt(p, cfg.stage1.rounds)?)?;
        checkpoints.push("stage1.ckpt".to_string());
    }
    output::write_file(&dir.join("final.ckpt"), &ckpt(&run.params, run.completed_rounds())?)?;
    checkpoints.push("final.ckpt".to_string());
    for (round, params) in &run.checkpoints {
        let name = format!("checkpoints/round-{round:04}.ckpt");
        output::write_file(&dir.join(&name), &ckpt(params, *round)?)?;
        checkpoints.push(name);
    }

    let mut traced_rounds = Vec::new();
    for trace in run.rounds.iter().filter(|t| run_opts.trace.traces(t.round)) {
        let file = TraceFile {
            config_hash: hash.clone(),
            seed,
            trace: trace.clone(),
        };
        output::write_json(&dir.join("traces").join(trace_file_name(trace.round)), &file)?;
        traced_rounds.push(trace.round);
    }

    let rows: Vec<MetricRow> = run
        .snapshots
        .iter()
        .map(|s| MetricRow::new(s.round, &s.summary, s.elapsed_ms))
        .collect();
    output::write_file(&dir.join(METRICS), &output::metrics_csv(&hash, seed, &rows))?;

    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        config_hash: hash.clone(),
        seed,
        dataset_seed: cfg.dataset_seed(),
        mode: mode(cfg).into(),
        status: if error.is_some() { "failed" } else { "complete" }.into(),
        error: error.clone(),
        completed_rounds: run.completed_rounds(),
        stages: run.stages.clone(),
        stage_ends: stage_ends(&run.snapshots, &run.stages, &stages),
        traced_rounds,
        checkpoints,
        dataset: DatasetInfo {
            train_clients: dataset.train_client_ids().len(),
            eval_clients: dataset.eval_client_ids().len(),
            input_dim: dataset.input_dim(),
            num_classes: dataset.num_classes(),
        },
        config: cfg.clone(),
    };
    output::write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(ReplicaResult {
        seed,
        dir: dir.to_path_buf(),
        error,
    })
}

/// Stage numbers in snapshots count stages actually run; map them back to
/// the configured stage (1 or 2).
fn stage_ends(snapshots: &[EvalSnapshot], ran: &[StageConfig], configured: &[StageConfig; 2]) -> Vec<StageEnd> {
    let skipped_first = configured[0].rounds == 0;
    (1..=ran.len())
        .filter_map(|k| {
            let last = snapshots.iter().rev().find(|s| s.stage == k)?;
            Some(StageEnd {
                stage: if skipped_first { k + 1 } else { k },
                round: last.round,
                summary: last.summary,
            })
        })
        .collect()
}
