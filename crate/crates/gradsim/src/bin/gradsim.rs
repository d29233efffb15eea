//! Command-line front end: train desk-scale models, run gradient
//! inversion experiments and sweeps, inspect label inference, print the
//! recovery cost table, verify the gradient-structure lemma, and render
//! reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use gradsim::cost::{cost_table, render_table};
use gradsim::data_io::{load_config, write_csv, ExperimentConfig};
use gradsim::error::{Error, Result};
use gradsim::harness::{self, SweepConfig, TrainConfig};
use gradsim::label_inference;
use gradsim::models::{client_step, Labels, ShareConfig};
use gradsim::theory;

#[derive(Parser)]
#[command(name = "gradsim", version, about = "Gradient inversion attack and defense laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model under a (possibly defended) pipeline.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one gradient inversion experiment.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Attack a trained checkpoint instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a hyperparameter grid of attack experiments.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Infer private labels from a shared gradient and compare to truth.
    LabelInfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the end-to-end single-image recovery cost table (GPU hours).
    EstimateCost {
        /// Client dataset sizes N.
        #[arg(long, value_delimiter = ',', default_values_t = [5_000.0, 50_000.0, 500_000.0])]
        sizes: Vec<f64>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Check the first-layer span lemma and explicit gradient formulas.
    VerifyLemma {
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3])]
        depths: Vec<usize>,
        /// Number of random seeds per depth.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 3)]
        batch: usize,
    },
    /// Summarize a finished run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Train { config, seed, out } => {
            let mut cfg: TrainConfig = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o.display().to_string();
            }
            let outcome = harness::train(&cfg)?;
            for (epoch, acc) in &outcome.accuracy_log {
                println!("epoch {:>3}  test accuracy {:.4}", epoch, acc);
            }
            println!(
                "trained on {} / tested on {} -> {}",
                outcome.train_size,
                outcome.test_size,
                outcome.checkpoint.display()
            );
        }
        Command::Attack {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let mut cfg: ExperimentConfig = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o.display().to_string();
            }
            let outcome = harness::run_attack_experiment(&cfg, checkpoint.as_deref())?;
            println!(
                "final objective {:.6e}  mean mse {:.6e}  mean psnr {:.2} dB  mean ssim {:.4}",
                outcome.final_objective,
                outcome.metrics.mean_mse,
                outcome.metrics.mean_psnr,
                outcome.metrics.mean_ssim
            );
            println!("bundle in {}", outcome.out_dir.display());
        }
        Command::Sweep { config, out } => {
            let mut cfg: SweepConfig = load_config(&config)?;
            if let Some(o) = out {
                cfg.base.out_dir = o.display().to_string();
            }
            let outcome = harness::sweep(&cfg)?;
            println!("{} cells -> {}", outcome.rows.len(), outcome.out_dir.display());
            println!("best alpha_tv by median mse: {}", outcome.best_alpha_tv);
        }
        Command::LabelInfer { config, seed } => {
            let mut cfg: ExperimentConfig = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let ds = harness::resolve_dataset(&cfg.dataset)?;
            let shape = ds.image_shape();
            let mut model = gradsim::models::build_model(
                &cfg.model.arch,
                (shape[0], shape[1], shape[2]),
                cfg.model.classes,
                cfg.model.seed,
            )?;
            let indices: Vec<usize> = (0..cfg.batch_size).collect();
            let (batch, truth) = ds.batch(&indices)?;
            let packet = client_step(
                &mut model,
                &batch,
                &Labels::Hard(truth.clone()),
                ShareConfig::default(),
            )?;
            if cfg.batch_size == 1 {
                let single = label_inference::infer_single_label(&packet, &model)?;
                println!("single-image rule: {:?} (truth {})", single, truth[0]);
            }
            let guess = label_inference::infer_batch_labels(&packet, &model)?;
            let mut sorted_truth = truth.clone();
            sorted_truth.sort_unstable();
            sorted_truth.dedup();
            println!(
                "batch rule: {:?} decidable={} unique-condition={} (truth set {:?})",
                guess.labels, guess.decidable, guess.unique_label_condition, sorted_truth
            );
        }
        Command::EstimateCost { sizes, csv } => {
            let rows = cost_table(&sizes)?;
            print!("{}", render_table(&rows));
            if let Some(path) = csv {
                let data: Vec<Vec<String>> = rows
                    .iter()
                    .map(|r| {
                        vec![
                            format!("{}", r.dataset_size),
                            format!("{:.2}", r.no_defense),
                            format!("{:.2}", r.gradprune),
                            format!("{:.2}", r.instahide),
                        ]
                    })
                    .collect();
                write_csv(
                    &path,
                    &["dataset_size", "no_defense", "gradprune", "instahide"],
                    &data,
                )?;
                println!("csv written to {}", path.display());
            }
        }
        Command::VerifyLemma { depths, seeds, batch } => {
            let seed_list: Vec<u64> = (0..seeds).collect();
            let rows = theory::lemma_report(&depths, &seed_list, batch)?;
            println!("depth  seed  max span residual  max formula deviation  pass");
            let mut all_pass = true;
            for r in &rows {
                println!(
                    "{:>5}  {:>4}  {:>17.3e}  {:>21.3e}  {}",
                    r.depth,
                    r.seed,
                    r.max_span_residual,
                    r.max_formula_deviation,
                    if r.pass { "yes" } else { "NO" }
                );
                all_pass &= r.pass;
            }
            if !all_pass {
                return Err(Error::Numerical("lemma verification failed".into()));
            }
            println!("all {} rows pass", rows.len());
        }
        Command::Report { dir } => {
            print!("{}", harness::render_report(&dir)?);
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}
