use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedharmony_cli::{commands, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedharmony", version, about = "Federated multi-label learning with consensus label-correlation alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for client training (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic federated dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Run a federation on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Check the alignment convergence laws and block decomposition.
    VerifyTheorems {
        #[command(flatten)]
        common: Common,
    },
    /// Base / +A / +A+B / +A+B+C table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Export ground-truth and per-client label correlations.
    DumpCorrelation {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional config, for `federation.epsilon`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn config(common: &Common) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::load(&common.config)?.resolve(common.seed)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.into()))?;
    }
    match cli.command {
        Command::Generate { common } => {
            let cfg = config(&common)?;
            let out = cfg.output(common.out.as_deref())?;
            println!("{}", commands::generate(&cfg, &out)?.display());
        }
        Command::Train { common, dataset } => {
            let cfg = config(&common)?;
            let out = cfg.output(common.out.as_deref())?;
            let run = commands::train(&cfg, &dataset, &out)?;
            let m = run.final_metrics();
            println!(
                "{} rounds, final mAP {:.1}, results in {}",
                run.records.len(),
                100.0 * m.map,
                out.display()
            );
        }
        Command::VerifyTheorems { common } => {
            let cfg = config(&common)?;
            let out = common.out.clone().or_else(|| cfg.output_dir.clone());
            let report = commands::verify_theorems(&cfg, out.as_deref())?;
            println!("{}", report.summary());
            if !report.passed {
                return Err(CliError::Verification(report.failures.join("; ")));
            }
        }
        Command::Ablate { common, dataset } => {
            let cfg = config(&common)?;
            let out = cfg.output(common.out.as_deref())?;
            let (path, _) = commands::ablate(&cfg, &dataset, &out)?;
            print!("{}", std::fs::read_to_string(&path)?);
        }
        Command::DumpCorrelation {
            dataset,
            out,
            config,
            seed,
        } => {
            let epsilon = match config {
                Some(p) => ExperimentConfig::load(&p)?.resolve(seed)?.federation.epsilon,
                None => fedharmony_core::corrstats::DEFAULT_EPSILON,
            };
            for p in commands::dump_correlation(&dataset, &out, epsilon)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
