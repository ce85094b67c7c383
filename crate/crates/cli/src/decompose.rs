//! `fedmeta decompose`: splits traced rounds of a run into their FedSGD and
//! FOMAML(j) parts and checks that nothing is left over.

use std::path::{Path, PathBuf};

use fedmeta::analysis::{decompose_round, DecompositionReport};
use fedmeta::model;

use crate::output::{self, csv_writer, finish_csv};
use crate::train::{trace_file_name, RunManifest, TraceFile};
use crate::CliError;

/// Residuals above this fail the command.
pub const RESIDUAL_LIMIT: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct DecomposeOptions {
    pub run: PathBuf,
    /// Rounds to decompose; empty means every traced round.
    pub rounds: Vec<usize>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

pub struct DecomposeOutput {
    pub reports: Vec<DecompositionReport>,
    pub text: String,
}

pub fn cmd_decompose(opts: &DecomposeOptions) -> Result<DecomposeOutput, CliError> {
    let manifest: RunManifest = output::read_json(&opts.run.join(output::MANIFEST))?;
    let rounds = if opts.rounds.is_empty() {
        manifest.traced_rounds.clone()
    } else {
        opts.rounds.clone()
    };
    if rounds.is_empty() {
        return Err(CliError::Domain(format!(
            "run {} has no traced rounds; rerun `fedmeta train` with --trace (or --trace=<rounds>)",
            opts.run.display()
        )));
    }
    let mut reports = Vec::new();
    for r in &rounds {
        if !manifest.traced_rounds.contains(r) {
            return Err(CliError::Domain(format!(
                "round {r} was not traced; rerun `fedmeta train` with --trace={r}"
            )));
        }
        let file: TraceFile = output::read_json(&trace_path(&opts.run, *r))?;
        let report = decompose_round(&file.trace, file.trace.beta).map_err(|e| match e {
            fedmeta::Error::Precondition(m) => CliError::Domain(format!(
                "round {r}: {m}; the decomposition assumes identical client weights and a common local step count"
            )),
            other => other.into(),
        })?;
        reports.push(report);
    }

    let text = format!(
        "config_hash {} seed {}\n\n{}",
        manifest.config_hash,
        manifest.seed,
        render(&reports)
    );
    let out = opts.out.clone().unwrap_or_else(|| opts.run.clone());
    let txt = out.join("decomposition.txt");
    let csv = out.join("decomposition.csv");
    output::check_free(&[txt.clone(), csv.clone()], opts.force)?;
    output::write_file(&txt, text.as_bytes())?;
    output::write_file(&csv, &render_csv(&reports, &manifest))?;

    if let Some(bad) = reports.iter().find(|r| !(r.residual_norm <= RESIDUAL_LIMIT)) {
        return Err(CliError::Domain(format!(
            "round {}: residual {:.3e} exceeds {RESIDUAL_LIMIT:e}",
            bad.round, bad.residual_norm
        )));
    }
    Ok(DecomposeOutput { reports, text })
}

fn trace_path(run: &Path, round: usize) -> PathBuf {
    run.join("traces").join(trace_file_name(round))
}

pub fn render(reports: &[DecompositionReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&r.to_string());
        out.push_str("\n\n");
    }
    out
}

fn render_csv(reports: &[DecompositionReport], manifest: &RunManifest) -> Vec<u8> {
    let mut w = csv_writer();
    for r in reports {
        let terms: Vec<String> = r.fomaml_norms().iter().map(|n| format!("{n:e}")).collect();
        w.write_record([
            r.round.to_string(),
            r.clients.to_string(),
            r.steps.to_string(),
            format!("{:e}", model::norm(&r.g_fedavg)),
            format!("{:e}", model::norm(&r.g_fedsgd)),
            terms.join(";"),
            format!("{:e}", r.residual_norm),
        ])
        .expect("in-memory csv");
    }
    finish_csv(
        &manifest.config_hash,
        manifest.seed,
        "round,clients,steps,norm_fedavg,norm_fedsgd,norm_fomaml_by_j,residual",
        w,
    )
}
