use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use fiva_cli::config::ExperimentConfig;
use fiva_cli::{plots, run};
use fiva_core::synthdata::{generate_all, write_dataset};

#[derive(Parser)]
#[command(
    name = "fiva",
    about = "Federated inverse-variance averaging simulation on synthetic segmentation tasks",
    version
)]
struct Cli {
    /// Override the config's experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment end to end (train, checkpoint, evaluate, persist).
    Run {
        config: PathBuf,
        /// Continue a federated or centralized run from a round checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate an existing checkpoint under a config (no training).
    Evaluate { checkpoint: PathBuf, config: PathBuf },
    /// Render SVG plots from a results directory.
    Plot { results_dir: PathBuf },
    /// Generate the configured datasets and persist them to binary files.
    GenData { config: PathBuf },
}

fn load_config(path: &PathBuf, cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { config, resume } => {
            let config = load_config(config, &cli)?;
            if !cli.quiet {
                println!(
                    "running {} ({} / {}), {} rounds, seed {} -> {}",
                    config.name,
                    config.regime.as_str(),
                    config.method_label(),
                    config.rounds,
                    config.seed,
                    config.output_dir.display()
                );
            }
            let summary = run::run_experiment(&config, resume.as_deref())?;
            if !cli.quiet {
                for agg in &summary.aggregates {
                    println!(
                        "  {:<12} dice {:.4} +/- {:.4}   ece {:.4} +/- {:.4}{}",
                        agg.client,
                        agg.dice_mean,
                        agg.dice_std,
                        agg.ece_mean,
                        agg.ece_std,
                        if agg.holdout { "   (hold-out)" } else { "" }
                    );
                }
                println!("results under {}", config.output_dir.display());
            }
        }
        Command::Evaluate { checkpoint, config } => {
            let config = load_config(config, &cli)?;
            let summary = run::evaluate_checkpoint(&config, checkpoint)?;
            if !cli.quiet {
                for agg in &summary.aggregates {
                    println!(
                        "  {:<12} dice {:.4} +/- {:.4}   ece {:.4} +/- {:.4}",
                        agg.client, agg.dice_mean, agg.dice_std, agg.ece_mean, agg.ece_std
                    );
                }
            }
        }
        Command::Plot { results_dir } => {
            let written = plots::emit_plots(results_dir)?;
            if !cli.quiet {
                for path in written {
                    println!("wrote {}", path.display());
                }
            }
        }
        Command::GenData { config } => {
            let config = load_config(config, &cli)?;
            let world = config.world()?;
            let out = config.output_dir.join("data");
            std::fs::create_dir_all(&out)?;
            for ds in generate_all(&world)? {
                let path = out.join(format!("{}.fsw", ds.spec.name));
                let file = std::fs::File::create(&path)?;
                write_dataset(&ds, std::io::BufWriter::new(file))?;
                if !cli.quiet {
                    println!(
                        "wrote {} ({} samples, labels {:?})",
                        path.display(),
                        ds.len(),
                        ds.spec.labels
                    );
                }
            }
            std::fs::write(
                config.output_dir.join("heterogeneity.tsv"),
                fiva_cli::results::heterogeneity_tsv(
                    &fiva_core::synthdata::heterogeneity_profile(&world)?,
                ),
            )?;
        }
    }
    Ok(())
}
