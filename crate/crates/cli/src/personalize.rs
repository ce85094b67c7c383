//! `fedmeta personalize`: per-client adaptation of a checkpointed model.
//!
//! Writes `report.csv` (one row per client), `summary.json`, and with a
//! sweep, `sweep.csv` with one row per (optimizer, epochs) pair.

use std::path::{Path, PathBuf};

use fedmeta::checkpoint::Checkpoint;
use fedmeta::personalization::{
    epochs_sweep, eval_population, PersonalizationConfig, PersonalizationOptimizer, PersonalizationReport, Population,
    ReportSummary,
};
use fedmeta::rng::Streams;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::output::{self, csv_writer, finish_csv};
use crate::CliError;

pub const REPORT_HEADER: &str = "client_id,n_train,n_test,initial_acc,personalized_acc,diverged";
pub const SWEEP_HEADER: &str = "optimizer,epochs,mean_personalized_acc,std_personalized_acc";

#[derive(Debug, Clone, Default)]
pub struct PersonalizeOptions {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub population: Option<Population>,
    /// Sweep personalization epochs `1..=n` for the configured optimizer and default Adam.
    pub sweep_max_epochs: Option<usize>,
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizeSummary {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint: String,
    pub population: Population,
    pub personalization: PersonalizationConfig,
    pub summary: ReportSummary,
}

pub struct PersonalizeOutput {
    pub report: PersonalizationReport,
    pub files: Vec<PathBuf>,
}

pub fn cmd_personalize(cfg: &ExperimentConfig, opts: &PersonalizeOptions) -> Result<PersonalizeOutput, CliError> {
    let spec = cfg.model_spec()?;
    // everything that can fail on inputs happens before any file is written
    let ckpt = Checkpoint::load_for(&opts.checkpoint, &spec)?;
    let dataset = cfg.dataset()?;
    let seed = opts.seed.unwrap_or(cfg.seed);
    let hash = cfg.config_hash();
    let mut pcfg = cfg.personalization_config();
    if let Some(e) = opts.epochs {
        pcfg.epochs = e;
    }
    let population = opts.population.unwrap_or(cfg.personalization.population);
    let key = ckpt.meta.get("round").and_then(|r| r.parse().ok()).unwrap_or(0);

    let report_path = opts.out.join("report.csv");
    let summary_path = opts.out.join("summary.json");
    let sweep_path = opts.out.join("sweep.csv");
    let mut files = vec![report_path.clone(), summary_path.clone()];
    if opts.sweep_max_epochs.is_some() {
        files.push(sweep_path.clone());
    }
    output::check_free(&files, opts.force)?;

    let streams = Streams::new(seed);
    let report = eval_population(&spec, &ckpt.params, &dataset, population, &pcfg, &streams, key)?;
    let sweep = match opts.sweep_max_epochs {
        Some(n) => {
            let adam = PersonalizationConfig {
                optimizer: PersonalizationOptimizer::default_adam(),
                ..pcfg
            };
            Some(epochs_sweep(
                &spec,
                &ckpt.params,
                &dataset,
                population,
                &[pcfg, adam],
                n,
                false,
                &streams,
                key,
            )?)
        }
        None => None,
    };

    let mut w = csv_writer();
    for o in report.outcomes() {
        w.write_record([
            o.client.0.to_string(),
            o.n_train.to_string(),
            o.n_test.to_string(),
            o.initial_acc.to_string(),
            o.personalized_acc.to_string(),
            o.diverged.to_string(),
        ])
        .expect("in-memory csv");
    }
    output::write_file(&report_path, &finish_csv(&hash, seed, REPORT_HEADER, w))?;
    output::write_json(
        &summary_path,
        &PersonalizeSummary {
            config_hash: hash.clone(),
            seed,
            checkpoint: display_name(&opts.checkpoint),
            population,
            personalization: pcfg,
            summary: *report.summary(),
        },
    )?;
    if let Some(rows) = sweep {
        let mut w = csv_writer();
        for r in &rows {
            w.serialize(r).expect("in-memory csv");
        }
        output::write_file(&sweep_path, &finish_csv(&hash, seed, SWEEP_HEADER, w))?;
    }
    Ok(PersonalizeOutput { report, files })
}

fn display_name(p: &Path) -> String {
    p.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default()
}
