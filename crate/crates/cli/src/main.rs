use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedmeta::personalization::Population;
use fedmeta_cli::decompose::{cmd_decompose, DecomposeOptions};
use fedmeta_cli::personalize::{cmd_personalize, PersonalizeOptions};
use fedmeta_cli::report::{cmd_report, ReportOptions};
use fedmeta_cli::train::{cmd_train, TraceSelection, TrainOptions};
use fedmeta_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedmeta", version, about = "Federated meta-learning experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PopulationArg {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Train every replica of a config; one run directory per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Base seed; replicas use seed, seed+1, ...
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record per-client step gradients; `all` or a list such as `1,50`.
        #[arg(long, num_args = 0..=1, default_missing_value = "all", value_name = "ROUNDS")]
        trace: Option<String>,
        /// Save parameters every N rounds (0 disables).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        /// Fill the wallclock_ms column of metrics.csv.
        #[arg(long)]
        wallclock: bool,
        #[arg(long)]
        force: bool,
    },
    /// Personalize a checkpoint on every client of a population.
    Personalize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum)]
        population: Option<PopulationArg>,
        /// Also sweep personalization epochs 1..=N for the configured optimizer and Adam.
        #[arg(long, value_name = "N")]
        sweep_max_epochs: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Split traced rounds into FedSGD and FOMAML(j) terms.
    Decompose {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Rounds to decompose (default: every traced round).
        #[arg(long, value_delimiter = ',')]
        round: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Aggregate replicas into mean (std) tables and rounds-to-threshold.
    Report {
        /// Run directories, or parents holding seed-* runs.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        threshold: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            seed,
            replicas,
            out,
            trace,
            checkpoint_every,
            wallclock,
            force,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = replicas {
                cfg.replicas = r;
            }
            let opts = TrainOptions {
                out,
                trace: trace.as_deref().map(TraceSelection::parse).transpose()?,
                checkpoint_every,
                wallclock,
                force,
            };
            let results = cmd_train(&cfg, &opts)?;
            let mut failed = Vec::new();
            for r in &results {
                match &r.error {
                    None => println!("seed {}: {}", r.seed, r.dir.display()),
                    Some(e) => {
                        eprintln!("seed {}: failed: {e} (partial outputs in {})", r.seed, r.dir.display());
                        failed.push(r.seed);
                    }
                }
            }
            if !failed.is_empty() {
                return Err(CliError::Domain(format!(
                    "{} of {} replicas failed",
                    failed.len(),
                    results.len()
                )));
            }
            Ok(())
        }
        Command::Personalize {
            config,
            checkpoint,
            out,
            seed,
            epochs,
            population,
            sweep_max_epochs,
            force,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let opts = PersonalizeOptions {
                checkpoint,
                out,
                seed,
                epochs,
                population: population.map(|p| match p {
                    PopulationArg::Train => Population::TrainClients,
                    PopulationArg::Eval => Population::EvalClients,
                }),
                sweep_max_epochs,
                force,
            };
            let result = cmd_personalize(&cfg, &opts)?;
            let s = result.report.summary();
            println!(
                "initial {:.4} ({:.4})  personalized {:.4} ({:.4})",
                s.mean_initial_acc, s.std_initial_acc, s.mean_personalized_acc, s.std_personalized_acc
            );
            Ok(())
        }
        Command::Decompose { run, round, out, force } => {
            let result = cmd_decompose(&DecomposeOptions {
                run,
                rounds: round,
                out,
                force,
            })?;
            print!("{}", result.text);
            Ok(())
        }
        Command::Report {
            runs,
            threshold,
            out,
            force,
        } => {
            let report = cmd_report(&ReportOptions {
                inputs: runs,
                thresholds: threshold,
                out,
                force,
            })?;
            print!("{}", report.text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
