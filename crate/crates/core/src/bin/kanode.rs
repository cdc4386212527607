//! Command-line driver for the experiments.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 numerical failure, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kanode::experiments::{
    lv_landscape, run_experiment, run_scaling_files, run_sparse_pipeline,
    write_landscape, ExperimentConfig, ExperimentError, ExperimentId, LandscapeGrid,
};
use kanode::io::{self, parse_config, validate_config};
use kanode::problems::lv_dataset;
use kanode::symbolic::{fit_network, BasisGrammar};

#[derive(Parser)]
#[command(name = "kanode", version, about = "Train and analyse Kolmogorov-Arnold network ODEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment and write its outputs.
    Run(RunArgs),
    /// Train every architecture of a scaling study.
    Scale(RunArgs),
    /// Map the right-hand-side error of a two-state checkpoint against Lotka-Volterra.
    Landscape(LandscapeArgs),
    /// Fit symbolic formulas to every edge of a checkpoint.
    Symbolic(SymbolicArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file.
    #[arg(long, conflicts_with = "experiment")]
    config: Option<PathBuf>,
    /// Experiment id with default settings.
    #[arg(long, short = 'e')]
    experiment: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LandscapeArgs {
    /// Checkpoint of a 2 -> 2 network.
    checkpoint: PathBuf,
    #[arg(long, default_value = "runs/landscape")]
    out: PathBuf,
    #[arg(long, default_value_t = 61)]
    nx: usize,
    #[arg(long, default_value_t = 41)]
    ny: usize,
}

#[derive(Args)]
struct SymbolicArgs {
    /// Checkpoint with recorded input ranges.
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 3)]
    max_terms: usize,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Directory for symbolic.txt and symbolic.csv; printed only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match (&args.config, &args.experiment) {
        (Some(path), _) => parse_config(&io::read_text(path)?)?,
        (None, Some(id)) => {
            let id = ExperimentId::parse(id).ok_or_else(|| {
                ExperimentError::Unsupported(format!("unknown experiment `{id}`"))
            })?;
            ExperimentConfig::defaults(id)
        }
        (None, None) => {
            return Err(ExperimentError::Unsupported(
                "pass --config FILE or --experiment ID".into(),
            ))
        }
    };
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
        if cfg.sparse_epochs > 0 {
            cfg.sparse_epochs = epochs;
            cfg.polish_epochs = cfg.polish_epochs.min(epochs);
            cfg.retrain_epochs = epochs;
        }
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    validate_config(&cfg)?;
    Ok(cfg)
}

fn run(args: &RunArgs) -> Result<(), ExperimentError> {
    let cfg = load_config(args)?;
    match cfg.id {
        ExperimentId::LvScaling => return scale(&cfg),
        ExperimentId::LvSparse => {
            let a = run_sparse_pipeline(&cfg)?;
            println!(
                "params {} -> {}, hidden width {} -> {}",
                a.params_before, a.params_after, a.hidden_width_before, a.hidden_width_after
            );
            let [alpha, beta, gamma, delta] = a.lv_parameters;
            println!("alpha {alpha:.6} beta {beta:.6} gamma {gamma:.6} delta {delta:.6}");
            println!("wrote {} files to {}", a.files.len(), cfg.output_dir.display());
        }
        _ => {
            let r = run_experiment(&cfg)?;
            let m = &r.metrics;
            println!(
                "{}: best train mse {:.4e}, test mse {:.4e}, field mse {:.4e}",
                cfg.id.as_str(),
                m.best_train_mse,
                m.test_mse_at_best,
                m.field_mse
            );
            println!("wrote {} files to {}", r.files.len(), cfg.output_dir.display());
        }
    }
    Ok(())
}

fn scale(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    let archs = if cfg.scaling.is_empty() {
        vec![cfg.architecture.clone()]
    } else {
        cfg.scaling.clone()
    };
    let (table, _) = run_scaling_files(cfg, &archs)?;
    print!("{}", table.to_csv());
    match table.slope {
        Some(s) => println!("log-log slope {s:.4}"),
        None => println!("log-log slope undefined"),
    }
    Ok(())
}

fn landscape(args: &LandscapeArgs) -> Result<(), ExperimentError> {
    let net = io::load_checkpoint(&args.checkpoint)?;
    let grid = LandscapeGrid {
        nx: args.nx,
        ny: args.ny,
        ..LandscapeGrid::default()
    };
    if grid.nx < 2 || grid.ny < 2 {
        return Err(ExperimentError::Unsupported(
            "landscape resolution must be at least 2 per axis".into(),
        ));
    }
    let land = lv_landscape(&net, &grid)?;
    write_landscape(&args.out, &land, &lv_dataset()?)?;
    println!("mean error {:.4e}", land.mean());
    Ok(())
}

fn symbolic(args: &SymbolicArgs) -> Result<(), ExperimentError> {
    let ckpt = io::read_checkpoint(&args.checkpoint)?;
    let net = ckpt.network()?;
    let ranges = ckpt.input_ranges.ok_or_else(|| {
        ExperimentError::Unsupported("checkpoint has no recorded input ranges".into())
    })?;
    let fits = fit_network(
        &net,
        &ranges,
        args.samples,
        &BasisGrammar::default(),
        args.max_terms,
    )?;
    let text = io::symbolic_text(&fits);
    print!("{text}");
    if let Some(dir) = &args.out {
        write_outputs(dir, &text, &io::symbolic_csv(&fits))?;
    }
    Ok(())
}

fn write_outputs(dir: &Path, text: &str, csv: &str) -> Result<(), ExperimentError> {
    io::write_file(&dir.join("symbolic.txt"), text)?;
    io::write_file(&dir.join("symbolic.csv"), csv)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => run(a),
        Command::Scale(a) => load_config(a).and_then(|c| scale(&c)),
        Command::Landscape(a) => landscape(a),
        Command::Symbolic(a) => symbolic(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
