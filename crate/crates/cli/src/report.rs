//! `fedmeta report`: aggregates replicas of one experiment into
//! "mean (std)" tables and rounds-to-threshold statistics.

use std::path::{Path, PathBuf};

use fedmeta::analysis::{aggregate_replicas, Metric, ReplicaAggregate, ThresholdStats};

use crate::output::{self, read_metrics, MANIFEST, METRICS};
use crate::train::RunManifest;
use crate::CliError;

pub const DEFAULT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, Default)]
pub struct ReportOptions {
    /// Run directories, or directories whose `seed-*` children are runs.
    pub inputs: Vec<PathBuf>,
    pub thresholds: Vec<f64>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub initial: ReplicaAggregate,
    pub personalized: ReplicaAggregate,
    /// `(threshold, initial, personalized)`.
    pub thresholds: Vec<(f64, ThresholdStats, ThresholdStats)>,
}

/// Expands inputs into run directories sorted by seed.
pub fn find_runs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut runs = Vec::new();
    for p in inputs {
        if p.join(MANIFEST).is_file() {
            runs.push(p.clone());
            continue;
        }
        let entries = std::fs::read_dir(p).map_err(|e| output::io_err(p, e))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join(MANIFEST).is_file())
            .collect();
        if found.is_empty() {
            return Err(CliError::Domain(format!("{} holds no runs", p.display())));
        }
        found.sort();
        runs.extend(found);
    }
    if runs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    Ok(runs)
}

pub fn build_report(runs: &[PathBuf], thresholds: &[f64]) -> Result<Report, CliError> {
    let mut loaded: Vec<(RunManifest, Vec<output::MetricRow>, &Path)> = Vec::new();
    for dir in runs {
        let m: RunManifest = output::read_json(&dir.join(MANIFEST))?;
        let rows = read_metrics(&dir.join(METRICS))?;
        loaded.push((m, rows, dir));
    }
    loaded.sort_by_key(|(m, _, _)| m.seed);
    let hash = loaded[0].0.config_hash.clone();
    if loaded.iter().any(|(m, _, _)| m.config_hash != hash) {
        let listing: Vec<String> = loaded
            .iter()
            .map(|(m, _, d)| format!("  {}  {}", m.config_hash, d.display()))
            .collect();
        return Err(CliError::Domain(format!(
            "runs come from different configs; refusing to aggregate:\n{}",
            listing.join("\n")
        )));
    }
    if let Some((m, _, d)) = loaded.iter().find(|(m, _, _)| m.status != "complete") {
        return Err(CliError::Domain(format!(
            "{} did not complete ({})",
            d.display(),
            m.error.as_deref().unwrap_or(&m.status)
        )));
    }
    let series = |metric: Metric| -> Vec<Vec<(usize, f64)>> {
        loaded
            .iter()
            .map(|(_, rows, _)| {
                rows.iter()
                    .map(|r| {
                        let v = match metric {
                            Metric::Initial => r.mean_initial_acc,
                            Metric::Personalized => r.mean_personalized_acc,
                        };
                        (r.round, v)
                    })
                    .collect()
            })
            .collect()
    };
    let init = series(Metric::Initial);
    let pers = series(Metric::Personalized);
    let thresholds = thresholds
        .iter()
        .map(|&t| {
            Ok((
                t,
                ThresholdStats::from_replicas(&init, t)?,
                ThresholdStats::from_replicas(&pers, t)?,
            ))
        })
        .collect::<Result<Vec<_>, fedmeta::Error>>()?;
    Ok(Report {
        config_hash: hash,
        seeds: loaded.iter().map(|(m, _, _)| m.seed).collect(),
        initial: aggregate_replicas(&init, Metric::Initial.name())?,
        personalized: aggregate_replicas(&pers, Metric::Personalized.name())?,
        thresholds,
    })
}

fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, v)| format!("{v:<w$}", w = widths[c]))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

impl Report {
    fn seeds_text(&self) -> String {
        self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    }

    /// Aligned plain-text rendering.
    pub fn text(&self) -> String {
        let mut out = format!(
            "config_hash {}\nruns {} (seeds {})\n\n",
            self.config_hash,
            self.seeds.len(),
            self.seeds_text()
        );
        let mut rows = vec![vec![
            "round".to_string(),
            "initial acc".into(),
            "personalized acc".into(),
        ]];
        for (k, round) in self.initial.rounds.iter().enumerate() {
            rows.push(vec![
                round.to_string(),
                self.initial.per_round[k].to_string(),
                self.personalized.per_round[k].to_string(),
            ]);
        }
        out.push_str(&table(&rows));
        out.push('\n');

        let mut rows = vec![vec![
            "final round".to_string(),
            "initial acc".into(),
            "personalized acc".into(),
        ]];
        rows[0].extend(
            self.thresholds
                .iter()
                .map(|(t, _, _)| format!("rounds to {t} (init/pers)")),
        );
        let mut last = vec![
            self.initial.rounds.last().expect("non-empty").to_string(),
            self.initial.last().to_string(),
            self.personalized.last().to_string(),
        ];
        last.extend(self.thresholds.iter().map(|(_, i, p)| format!("{i}/{p}")));
        rows.push(last);
        out.push_str(&table(&rows));
        out
    }

    /// `(report.csv, thresholds.csv)`.
    pub fn csv(&self) -> (Vec<u8>, Vec<u8>) {
        let head = format!("# config_hash={} seeds={}\n", self.config_hash, self.seeds_text());
        let mut a = head.clone();
        a.push_str("round,mean_initial_acc,std_initial_acc,mean_personalized_acc,std_personalized_acc,runs\n");
        for (k, round) in self.initial.rounds.iter().enumerate() {
            let (i, p) = (&self.initial.per_round[k], &self.personalized.per_round[k]);
            a.push_str(&format!(
                "{round},{},{},{},{},{}\n",
                i.mean, i.std, p.mean, p.std, i.count
            ));
        }
        let mut b = head;
        b.push_str("threshold,metric,reached,runs,mean_round,formatted\n");
        for (t, i, p) in &self.thresholds {
            for (name, s) in [("initial", i), ("personalized", p)] {
                let mean = s.mean.map(|m| m.to_string()).unwrap_or_default();
                b.push_str(&format!(
                    "{t},{name},{},{},{mean},{s}\n",
                    s.reached_count,
                    s.per_replica.len()
                ));
            }
        }
        (a.into_bytes(), b.into_bytes())
    }
}

pub fn cmd_report(opts: &ReportOptions) -> Result<Report, CliError> {
    let thresholds = if opts.thresholds.is_empty() {
        vec![DEFAULT_THRESHOLD]
    } else {
        opts.thresholds.clone()
    };
    let runs = find_runs(&opts.inputs)?;
    let report = build_report(&runs, &thresholds)?;
    if let Some(out) = &opts.out {
        let files = [
            out.join("report.txt"),
            out.join("report.csv"),
            out.join("thresholds.csv"),
        ];
        output::check_free(&files, opts.force)?;
        let (a, b) = report.csv();
        output::write_file(&files[0], report.text().as_bytes())?;
        output::write_file(&files[1], &a)?;
        output::write_file(&files[2], &b)?;
    }
    Ok(report)
}
