//! Command-line harness: train on the synthetic task, evaluate
//! checkpoints, run the gradient-check suites, run the filter ablation,
//! and export learned filters.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use glog_core::filters::export_filters;
use glog_core::model::ModelConfig;
use glog_core::synth::{synth_generate, SynthConfig};
use glog_core::train::{evaluate_model, run_ablation, train, TrainConfig};
use glog_core::{checkpoint, gradcheck};

#[derive(Parser)]
#[command(
    name = "glog",
    about = "Learnable Gabor/LoG filter banks with a toy segmentation pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic task and write checkpoint, loss curve and
    /// filter exports.
    Train {
        /// JSON file with `train` and `synth` sections; unknown keys are
        /// rejected.
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a regenerated validation set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the dataset seed stored in the checkpoint.
        #[arg(long)]
        data_seed: Option<u64>,
        /// Metrics CSV destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every finite-difference suite; nonzero exit on any failure.
    Gradcheck {
        /// Acceptance-grade budget (more random draws per suite).
        #[arg(long)]
        full: bool,
    },
    /// Train the none / gabor / log / glog variants and tabulate them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a checkpoint's filters as 16-bit PGMs plus a parameter CSV.
    ExportFilters {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// On-disk config: both sections optional, defaults filled in, unknown
/// keys rejected at every level.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    train: TrainConfig,
    synth: SynthConfig,
}

fn load_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Evaluation/batch parallelism cap; reproducibility does not depend on
/// it (results are merged in sample order), so raising it only changes
/// wall time.
fn threads_from_env() -> usize {
    match std::env::var("GLOG_THREADS") {
        Ok(v) => v.parse().unwrap_or(1).max(1),
        Err(_) => 1,
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let threads = threads_from_env();
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, &out, threads),
        Command::Eval {
            checkpoint,
            data_seed,
            out,
        } => cmd_eval(&checkpoint, data_seed, out.as_deref()),
        Command::Gradcheck { full } => cmd_gradcheck(full),
        Command::Ablate { config, out } => cmd_ablate(&config, &out, threads),
        Command::ExportFilters { checkpoint, out } => cmd_export(&checkpoint, &out),
    }
}

fn cmd_train(config: &Path, out: &Path, threads: usize) -> Result<()> {
    let cfg = load_config(config)?;
    std::fs::create_dir_all(out)?;

    let outcome = train::<f64>(&cfg.train, &cfg.synth, threads)?;
    let report = &outcome.report;

    checkpoint::save(&outcome.model, Some(&cfg.synth), &out.join("checkpoint.glog"))?;
    std::fs::write(out.join("loss.csv"), report.loss_csv())?;
    export_filters(&report.initial_bank, &out.join("filters_init"))?;
    export_filters(&report.final_bank, &out.join("filters_final"))?;
    std::fs::write(
        out.join("metrics.csv"),
        report.final_val_report.to_csv(),
    )?;

    println!(
        "trained {} epochs in {:.1}s; final loss {:.6}, val mean dice {:.6}",
        report.epoch_loss.len(),
        report.wall_seconds,
        report.epoch_loss.last().unwrap_or(&f64::NAN),
        report.val_dice.last().unwrap_or(&f64::NAN),
    );
    println!(
        "bank: {} learnable filter parameters; model total {}",
        outcome.model.bank.learnable_param_count(),
        outcome.model.total_param_count(),
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, data_seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let (model, synth) = checkpoint::load::<f64>(ckpt)?;
    let mut synth = synth.context("checkpoint carries no dataset config; cannot regenerate")?;
    if let Some(seed) = data_seed {
        synth.seed = seed;
    }
    let dataset = synth_generate::<f64>(&synth)?;
    let report = evaluate_model(&model, &dataset.val, threads_from_env(), 1.0)?;
    let csv = report.to_csv();
    match out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_gradcheck(full: bool) -> Result<()> {
    let reports = gradcheck::run_all(0xC0FFEE, full)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{:<24} max_rel_err {:>12.3e}  tol {:>7.0e}  cases {:>4}  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            r.cases,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} gradient check(s) failed");
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

fn cmd_ablate(config: &Path, out: &Path, threads: usize) -> Result<()> {
    let cfg = load_config(config)?;
    std::fs::create_dir_all(out)?;
    let model_cfg = ModelConfig {
        n_classes: cfg.synth.n_classes,
        ..ModelConfig::default()
    };
    let table = run_ablation::<f64>(model_cfg, &cfg.train, &cfg.synth, threads)?;
    std::fs::write(out.join("ablation.csv"), table.to_csv())?;
    print!("{}", table.to_csv());
    println!("{}", table.ordering_note());
    println!("wrote {}", out.join("ablation.csv").display());
    Ok(())
}

fn cmd_export(ckpt: &Path, out: &Path) -> Result<()> {
    let (model, _) = checkpoint::load::<f64>(ckpt)?;
    export_filters(&model.bank, out)?;
    println!(
        "wrote {} filter(s) to {}",
        model.bank.filter_count(),
        out.display()
    );
    Ok(())
}
