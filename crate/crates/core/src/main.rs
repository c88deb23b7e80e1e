use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use causal_embed::harness::{self, ExperimentConfig, Overrides};
use causal_embed::Result;

#[derive(Parser)]
#[command(name = "causal-embed", version, about = "Neural mean embedding causal effect experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write each replication's sample to `data/`.
    Generate(RunArgs),
    /// Fit stage-one and stage-two models on the saved samples.
    Train(RunArgs),
    /// Evaluate the configured queries against saved models.
    Estimate(RunArgs),
    /// Run the full pipeline and compare with ground truth.
    Evaluate(RunArgs),
    /// Rebuild `aggregate.csv` from the per-replication reports.
    Report(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; replication k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent replications (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    replications: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let overrides = Overrides {
            out: self.out.clone(),
            seed: self.seed,
            workers: self.workers,
            replications: self.replications,
        };
        ExperimentConfig::load_with(&self.config, &overrides)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => harness::run_generate(&a.load()?),
        Command::Train(a) => harness::run_train(&a.load()?),
        Command::Estimate(a) => harness::run_estimate(&a.load()?),
        Command::Evaluate(a) => {
            let cfg = a.load()?;
            let summary = harness::run_experiment(&cfg)?;
            for row in summary.aggregate.iter().filter(|r| r.query == harness::report::ALL_QUERIES) {
                if let Some(mse) = row.squared_error_mean {
                    println!("{} {}: mean squared error {mse:.6}", row.adjustment, row.parameter);
                }
            }
            println!("reports written to {}", cfg.output_dir.display());
            Ok(())
        }
        Command::Report(a) => harness::run_report(&a.load()?).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAUSAL_EMBED_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: code={} {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
