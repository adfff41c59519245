use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use canopyseg_cli::config::PipelineConfig;
use canopyseg_cli::pipeline::{fail, run_pipeline, StageFailure};
use canopyseg_cli::stages::{self, PredictJob, TrainJob};

#[derive(Parser)]
#[command(name = "canopyseg", version, about = "Tree-species segmentation from elevation grids")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value config file with one [section] per stage
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scene and training seeds
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs; inputs default to files inside it
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    /// Single worker thread
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: dtm, dsm, truth, weak16 and plots
    Synth,
    /// Canopy height from surface and terrain models
    Chm {
        #[arg(long)]
        dsm: Option<PathBuf>,
        #[arg(long)]
        dtm: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn 16 m weak labels into 1 m training labels
    Prep {
        #[arg(long)]
        weak: Option<PathBuf>,
        #[arg(long)]
        chm: Option<PathBuf>,
        /// Land mask label raster; 0 marks non-land
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the network
    Train {
        #[arg(long)]
        dtm: Option<PathBuf>,
        #[arg(long)]
        chm: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Start from an existing checkpoint
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Unlabel large regions where labels and predictions disagree
    Relabel {
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tiled prediction of the species map
    Predict {
        #[arg(long)]
        dtm: Option<PathBuf>,
        #[arg(long)]
        chm: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write logits_{c}.csr into this directory
        #[arg(long)]
        logits_dir: Option<PathBuf>,
        /// Also write a colored PPM preview
        #[arg(long)]
        preview: Option<PathBuf>,
    },
    /// Plot-level confusion matrix and metrics
    Eval {
        #[arg(long)]
        species: Option<PathBuf>,
        #[arg(long)]
        plots: Option<PathBuf>,
        /// Report path without extension
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// All stages, two training rounds, with a resumable manifest
    Pipeline {
        #[arg(long)]
        resume: bool,
    },
}

fn threads(deterministic: bool) -> Result<usize> {
    if deterministic {
        return Ok(1);
    }
    match std::env::var("CANOPYSEG_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|n| *n > 0).with_context(|| format!("CANOPYSEG_THREADS={v:?} is not a positive integer")),
        Err(_) => Ok(0),
    }
}

fn or(p: Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    p.unwrap_or_else(|| dir.join(name))
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| fail("config", e))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    let d = c.out_dir.as_path();
    let (name, result) = match cli.command {
        Command::Synth => ("synth", stages::synth(&cfg.synth, d).map(|_| ())),
        Command::Chm { dsm, dtm, out } => ("chm", stages::chm(&or(dsm, d, "dsm.csr"), &or(dtm, d, "dtm.csr"), &or(out, d, "chm.csr"))),
        Command::Prep { weak, chm, mask, out } => ("prep", stages::prep(&or(weak, d, "weak16.csr"), &or(chm, d, "chm.csr"), mask.as_deref(), &cfg.prep, &or(out, d, "labels.csr"))),
        Command::Train { dtm, chm, labels, init, checkpoint, metrics } => {
            let (dtm, chm, labels) = (or(dtm, d, "dtm.csr"), or(chm, d, "chm.csr"), or(labels, d, "labels.csr"));
            let (ckpt, metrics) = (or(checkpoint, d, "model.csnp"), or(metrics, d, "metrics.csv"));
            let job = TrainJob { dtm: &dtm, chm: &chm, labels: &labels, init: init.as_deref(), checkpoint: &ckpt, metrics: &metrics };
            ("train", stages::train(&job, &cfg.train, &cfg.net, &cfg.focal, &cfg.cowmix))
        }
        Command::Relabel { labels, pred, out } => ("relabel", stages::relabel(&or(labels, d, "labels.csr"), &or(pred, d, "species.csr"), &cfg.prep, &or(out, d, "labels_r2.csr"))),
        Command::Predict { dtm, chm, checkpoint, out, logits_dir, preview } => {
            let (dtm, chm, ckpt, out) = (or(dtm, d, "dtm.csr"), or(chm, d, "chm.csr"), or(checkpoint, d, "model.csnp"), or(out, d, "species.csr"));
            let job = PredictJob { dtm: &dtm, chm: &chm, checkpoint: &ckpt, species: &out, logits_dir: logits_dir.as_deref(), preview: preview.as_deref() };
            ("predict", stages::predict(&job, &cfg.net, &cfg.infer).map(|_| ()))
        }
        Command::Eval { species, plots, report } => {
            let r = stages::eval(&or(species, d, "species.csr"), &or(plots, d, "plots.csv"), &or(report, d, "report"));
            if let Ok(cm) = &r {
                print!("{}", canopyseg::eval::format_table(cm));
            }
            ("eval", r.map(|_| ()))
        }
        Command::Pipeline { resume } => {
            let m = run_pipeline(&cfg, d, resume)?;
            let report = d.join(canopyseg_cli::pipeline::final_report(&m).replace(".csv", ".txt"));
            if let Ok(t) = std::fs::read_to_string(report) {
                print!("{t}");
            }
            return Ok(());
        }
    };
    result.map_err(|e| fail(name, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let n = match threads(cli.common.deterministic) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<StageFailure>() {
                Some(f) => eprintln!("error: {f}"),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(1)
        }
    }
}
