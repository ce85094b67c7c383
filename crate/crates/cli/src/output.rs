//! Output directories and file writers shared by the commands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fedmeta::personalization::ReportSummary;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const METRICS_HEADER: &str =
    "round,mean_initial_acc,std_initial_acc,mean_personalized_acc,std_personalized_acc,wallclock_ms";

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Domain(format!("{}: {e}", path.display()))
}

/// Claims a run directory for writing. An existing non-empty directory is an
/// error unless `force` is set; even then only directories holding a run
/// manifest are cleared.
pub fn claim_dir(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() {
        let non_empty = fs::read_dir(path).map_err(|e| io_err(path, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(CliError::Usage(format!(
                    "{} already exists; pass --force to overwrite it",
                    path.display()
                )));
            }
            if !path.join(MANIFEST).exists() {
                return Err(CliError::Usage(format!(
                    "{} is not empty and holds no run manifest; refusing to clear it",
                    path.display()
                )));
            }
            fs::remove_dir_all(path).map_err(|e| io_err(path, e))?;
        }
    }
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Refuses to replace existing files unless `force` is set.
pub fn check_free(paths: &[PathBuf], force: bool) -> Result<(), CliError> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite it",
            p.display()
        ))),
        None => Ok(()),
    }
}

/// Writes through a temporary sibling so readers never see partial files.
pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(contents).map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

/// `# config_hash=<hash> seed=<seed>`: the first line of every CSV output.
pub fn provenance_line(config_hash: &str, seed: u64) -> String {
    format!("# config_hash={config_hash} seed={seed}\n")
}

pub fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new())
}

/// Finishes a CSV body started with [`csv_writer`] and prepends the
/// provenance line.
pub fn finish_csv(config_hash: &str, seed: u64, header: &str, w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    let body = w.into_inner().expect("in-memory writer");
    let mut out = provenance_line(config_hash, seed).into_bytes();
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&body);
    out
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub mean_initial_acc: f64,
    pub std_initial_acc: f64,
    pub mean_personalized_acc: f64,
    pub std_personalized_acc: f64,
    pub wallclock_ms: Option<u64>,
}

impl MetricRow {
    pub fn new(round: usize, s: &ReportSummary, wallclock_ms: Option<u64>) -> Self {
        Self {
            round,
            mean_initial_acc: s.mean_initial_acc,
            std_initial_acc: s.std_initial_acc,
            mean_personalized_acc: s.mean_personalized_acc,
            std_personalized_acc: s.std_personalized_acc,
            wallclock_ms,
        }
    }
}

pub fn metrics_csv(config_hash: &str, seed: u64, rows: &[MetricRow]) -> Vec<u8> {
    let mut w = csv_writer();
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    finish_csv(config_hash, seed, METRICS_HEADER, w)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .collect::<Result<Vec<MetricRow>, _>>()
        .map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}
