use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trr::sensing::Snr;
use trr::workbench::{self, EvalMode, RunDir, RunOptions};
use trr::{ExperimentConfig, SolverKind};

/// Beamspace channel reconstruction with trimmed-ridge regression.
#[derive(Debug, Parser)]
#[command(name = "trr", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file (`key = value` lines).
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: exact-sparse or desk-train.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Master seed. Precedence: this flag, then TRR_SEED, then the config file, then 42.
    #[arg(long, global = true, env = "TRR_SEED")]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "trr-run")]
    out: PathBuf,
    /// Worker threads for sample-parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Fill the wall_ms column of result tables.
    #[arg(long, global = true)]
    record_timing: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val/test datasets.
    GenData,
    /// Run an iterative solver over the test split.
    Solve {
        /// itrr, itrr-bb, pgd-ridge, pgd-lasso or omp (default: from config).
        #[arg(long)]
        solver: Option<SolverKind>,
        /// Directory holding dataset.trrd (default: the run directory).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one unfolded network per configured top-K.
    Train {
        /// Apply the top-K term in every layer, not only the last.
        #[arg(long)]
        no_rcc: bool,
        /// Directory holding dataset.trrd (default: the run directory).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate trained networks: NMSE, accurate ratio and ZF sum rate.
    Evaluate {
        /// `single` reports each model; `ensemble` also averages them.
        #[arg(long, default_value = "single")]
        mode: EvalMode,
        /// Accurate-reconstruction thresholds (default: from config).
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        /// Models directory (default: <out>/models).
        #[arg(long)]
        models: Option<PathBuf>,
        /// Directory holding dataset.trrd (default: the run directory).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// NMSE versus SNR for the configured solvers.
    SweepSnr {
        /// SNR points in dB, or `noiseless` (default: from config).
        #[arg(long, value_delimiter = ',')]
        snr: Option<Vec<Snr>>,
        /// Solvers to sweep (default: from config).
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<SolverKind>>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), _) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn data_dir(data: &Option<PathBuf>) -> Option<&Path> {
    data.as_deref()
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = load_config(&cli.common)?;
    let run = RunDir::create(&cli.common.out)?;
    let opts = RunOptions {
        record_timing: cli.common.record_timing,
    };
    match cli.command {
        Command::GenData => {
            let (_, summary) = workbench::gen_data(&cfg, &run)?;
            let [train, val, test] = summary.pair_counts;
            println!("real pairs: train {train}, val {val}, test {test}");
        }
        Command::Solve { solver, data } => {
            let splits = workbench::load_or_generate(&cfg, &run, data_dir(&data))?;
            let solver = solver.unwrap_or(cfg.solver);
            let summary = workbench::solve(&cfg, &run, &splits, solver, opts)?;
            println!(
                "{solver}: NMSE {:.3} dB over {} channels",
                summary.nmse_db,
                summary.channel_errors.len()
            );
        }
        Command::Train { no_rcc, data } => {
            let splits = workbench::load_or_generate(&cfg, &run, data_dir(&data))?;
            for m in workbench::train(&cfg, &run, &splits, no_rcc, opts)? {
                println!(
                    "K = {}: {} epochs, test NMSE {:.3} dB, {:.1} s",
                    m.top_k,
                    m.history.epochs.len(),
                    m.test_nmse_db,
                    m.wall.as_secs_f64()
                );
            }
        }
        Command::Evaluate {
            mode,
            thresholds,
            models,
            data,
        } => {
            let splits = workbench::load_or_generate(&cfg, &run, data_dir(&data))?;
            let models_dir = models.unwrap_or_else(|| run.join(workbench::MODELS_DIR));
            let set = workbench::load_models(&models_dir, &splits.train.phi, &cfg)
                .with_context(|| format!("loading models from {}", models_dir.display()))?;
            let thresholds = thresholds.unwrap_or_else(|| cfg.thresholds.clone());
            let eval = workbench::evaluate(&cfg, &run, &splits, &set, mode, &thresholds, opts)?;
            for row in &eval.accuracy {
                let ratios: Vec<String> = row.ratios.iter().map(|(t, r)| format!("ratio@{t} {r:.4}")).collect();
                println!(
                    "{} K = {}: NMSE {:.3} dB {}",
                    row.method,
                    row.k_param,
                    row.nmse_db,
                    ratios.join(" ")
                );
            }
        }
        Command::SweepSnr { snr, methods } => {
            let snrs = snr.unwrap_or_else(|| cfg.sweep_snr.clone());
            let methods = methods.unwrap_or_else(|| cfg.sweep_methods.clone());
            for p in workbench::sweep_snr(&cfg, &run, &snrs, &methods, opts)? {
                println!("{} @ {}: NMSE {:.3} dB", p.method, p.snr, p.nmse_db);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
