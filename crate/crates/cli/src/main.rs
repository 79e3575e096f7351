use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dragevo::config::ExperimentConfig;
use dragevo::error::{Error, Result};
use dragevo::experiment::{self, exit_code, BEST_GENOME_FILE, TRAJECTORY_FILE};

#[derive(Parser)]
#[command(name = "dragevo", version, about = "Contract-gated evolutionary search over drag-surrogate pipelines")]
struct Cli {
    /// Experiment config (JSON). `master_seed` is required.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for candidate evaluation; overrides the config.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the evolutionary search.
    Run {
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Re-evaluate a saved genome.
    Replay {
        /// Genome JSON; defaults to the best genome of the output directory.
        #[arg(long)]
        genome: Option<PathBuf>,
        /// Compare against the trajectory record of the same genome.
        #[arg(long)]
        verify: bool,
        /// Trajectory to verify against; defaults to the output directory's.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Run the four-variant ablation study.
    Ablate {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of seeds per variant; overrides the config.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Screen a batch of designs and escalate uncertain ones.
    Screen {
        /// Batch CSV with one column per dataset feature and an optional label.
        batch: PathBuf,
        #[arg(long)]
        genome: Option<PathBuf>,
        #[arg(long)]
        sigma_max: f64,
        /// Designs sent to validation after screening.
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Directory for the decisions CSV and report; defaults to the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic dataset, its holdout rows and its card.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Argument("--config is required".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(t) = cli.threads {
        config.evolution.threads = t;
    }
    config.validate()?;
    Ok(config)
}

fn execute(cli: &Cli) -> Result<()> {
    let mut config = load_config(cli)?;
    match &cli.command {
        Command::Run { out, force } => {
            if let Some(o) = out {
                config.output_dir = o.clone();
            }
            let outcome = experiment::run(&config, *force)?;
            println!("{}", serde_json::to_string_pretty(&outcome.manifest)?);
        }
        Command::Replay { genome, verify, trajectory } => {
            let genome_path = genome.clone().unwrap_or_else(|| config.output_dir.join(BEST_GENOME_FILE));
            let g = experiment::read_genome(&genome_path)?;
            let records = if *verify {
                let path = trajectory.clone().unwrap_or_else(|| config.output_dir.join(TRAJECTORY_FILE));
                Some(experiment::read_trajectory(&path)?)
            } else {
                None
            };
            let outcome = experiment::replay(&config, &g, records.as_deref())?;
            println!("{}", outcome.evaluation.to_json());
            if *verify {
                eprintln!("verified: metrics match the recorded trajectory");
            }
        }
        Command::Ablate { out, seeds, force } => {
            if let Some(o) = out {
                config.output_dir = o.clone();
            }
            if let Some(s) = seeds {
                config.ablation.seeds = *s;
            }
            config.validate()?;
            let result = experiment::ablate(&config, *force)?;
            print!("{}", result.summary_csv()?);
            for m in result.means() {
                eprintln!("{:12} mean best score {:.4} over {} runs", m.variant.as_str(), m.mean_final_best_score, m.runs);
            }
        }
        Command::Screen { batch, genome, sigma_max, k, out } => {
            let genome_path = genome.clone().unwrap_or_else(|| config.output_dir.join(BEST_GENOME_FILE));
            let g = experiment::read_genome(&genome_path)?;
            let out_dir = out.clone().unwrap_or_else(|| config.output_dir.clone());
            let outcome = experiment::screen(&config, &g, batch, *sigma_max, *k, &out_dir)?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
        }
        Command::Export { out } => {
            let ds = experiment::export(&config, out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
