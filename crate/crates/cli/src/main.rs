use std::path::{Path, PathBuf};
use std::process::ExitCode;

use beamsel::harness::commands::{
    self, latency_csv, train_log_csv, write_config_echo, write_eval_report, write_select_report, TablesDocument,
};
use beamsel::harness::{dataset, Checkpoint, Profile, RunConfig, TrainMode};
use beamsel::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Multimodal beam selection: dataset generation, training, evaluation,
/// top-K selection and latency reports.
#[derive(Parser)]
#[command(name = "beamsel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults to the chosen profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// raymobtime-like or neu-like (ignored when --config is given).
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory (samples.jsonl + manifest.json).
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train the fusion model or a single-modality model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// fusion, gps, lidar or image
        #[arg(long, default_value = "fusion")]
        mode: String,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total epoch budget (overrides the config).
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Trained single-modality checkpoint whose extractor the fusion
        /// model reuses; repeat per modality.
        #[arg(long)]
        extractor: Vec<PathBuf>,
    },
    /// Score the test split: Acc@K, weighted P/R/F1, KL, throughput ratio.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Repeat for several models.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
    },
    /// Choose K per test sample for each alpha.
    SelectK {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Previously built tables; rebuilt from the train split if absent.
        #[arg(long)]
        tables: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        alpha_list: Option<Vec<f64>>,
        /// Contact time in ms.
        #[arg(long)]
        t_total: Option<f64>,
    },
    /// Sweep and end-to-end latency table.
    Latency {
        #[command(flatten)]
        common: Common,
        /// Defaults to every K from 1 to the number of beam pairs.
        #[arg(long, value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
    },
    /// Full pipeline: generate, train, evaluate, select-k, latency.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match (&common.config, &common.profile) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(p)) => RunConfig::for_profile(p.parse::<Profile>()?),
        (None, None) => RunConfig::for_profile(Profile::NeuLike),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, samples } => {
            let mut cfg = resolve(&common)?;
            if let Some(n) = samples {
                cfg.dataset.samples = n;
            }
            let out = cfg.output_dir.clone();
            let manifest = commands::cmd_generate(&cfg, cfg.dataset.samples, &out)?;
            write_config_echo(&cfg, &out)?;
            println!(
                "wrote {} samples to {} ({} scenes skipped)",
                manifest.sample_count,
                out.display(),
                manifest.skipped.len()
            );
        }
        Command::Train { common, dataset: dir, mode, resume, max_epochs, extractor } => {
            let mut cfg = resolve(&common)?;
            if let Some(e) = max_epochs {
                cfg.train.max_epochs = e;
            }
            let mode: TrainMode = mode.parse()?;
            let ds = dataset::load(&dir)?;
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let extractors = extractor.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
            let result = commands::cmd_train_from(&ds, &cfg, mode, resume.as_ref(), &extractors)?;
            let out = &cfg.output_dir;
            write_config_echo(&cfg, out)?;
            result.checkpoint.save(&out.join(format!("{}.json", mode.name())))?;
            write(&out.join(format!("{}_log.csv", mode.name())), &train_log_csv(&result.checkpoint.state)?)?;
            let last = result.checkpoint.state.log.last();
            println!(
                "{}: {} epochs run, best validation top-1 {:.4}{}",
                mode.name(),
                result.epochs_run,
                result.checkpoint.state.best_val_top1,
                last.map(|l| format!(", last train loss {:.4}", l.train_loss)).unwrap_or_default()
            );
        }
        Command::Evaluate { common, dataset: dir, checkpoint, k_list } => {
            let cfg = resolve(&common)?;
            let ds = dataset::load(&dir)?;
            let cks = checkpoint.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
            let ks = k_list.unwrap_or_else(|| cfg.selection.k_list.clone());
            let report = commands::cmd_evaluate(&ds, &cfg, &cks, &ks)?;
            write_config_echo(&cfg, &cfg.output_dir)?;
            write_eval_report(&report, &cfg.output_dir)?;
            print!("{}", commands::evaluation_csv(&report.rows)?);
        }
        Command::SelectK { common, dataset: dir, checkpoint, tables, alpha_list, t_total } => {
            let cfg = resolve(&common)?;
            let ds = dataset::load(&dir)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let tables = tables
                .map(|p| -> Result<TablesDocument> {
                    let bytes = std::fs::read(&p)?;
                    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("tables: {e}")))
                })
                .transpose()?;
            let alphas = alpha_list.unwrap_or_else(|| cfg.selection.alpha_list.clone());
            let t_total = t_total.unwrap_or(cfg.selection.t_total_ms);
            let report = commands::cmd_select_k(&ds, &cfg, &ck, tables, &alphas, t_total)?;
            write_config_echo(&cfg, &cfg.output_dir)?;
            write_select_report(&report, &cfg.output_dir)?;
            print!("{}", commands::select_csv(&report.rows)?);
        }
        Command::Latency { common, k_list } => {
            let cfg = resolve(&common)?;
            let ks = k_list.unwrap_or_else(|| (1..=cfg.class_count()).collect());
            let text = latency_csv(&commands::cmd_latency(&cfg, ks)?)?;
            if let Some(out) = &common.out {
                write_config_echo(&cfg, out)?;
                write(&out.join("latency.csv"), &text)?;
            }
            print!("{text}");
        }
        Command::Report { common, samples } => {
            let mut cfg = resolve(&common)?;
            if let Some(n) = samples {
                cfg.dataset.samples = n;
            }
            let out = cfg.output_dir.clone();
            let report = commands::cmd_report(&cfg, &out)?;
            print!("{}", commands::evaluation_csv(&report.evaluation.rows)?);
            print!("{}", commands::select_csv(&report.selection.rows)?);
            println!("reports written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("BEAMSEL_WORKERS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
