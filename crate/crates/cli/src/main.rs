//! `radmamba`: synthesize data, train, evaluate and analyze RadMamba models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};
use radmamba::ExecPolicy;

/// Set by the Ctrl-C handler; training loops poll it between mini-batches.
pub static STOP: AtomicBool = AtomicBool::new(false);

#[derive(Parser, Debug)]
#[command(name = "radmamba", version, about = "Micro-Doppler classification with a bidirectional selective state-space model")]
pub struct Cli {
    /// Worker threads for data-parallel loops (1 = sequential).
    #[arg(long, global = true, env = "RADMAMBA_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

/// Model/training configuration source shared by most subcommands.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON config with `model`, `train` and `data` sections.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Shipped preset (diat, ci4r, uog20), used when --config is absent.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the token width.
    #[arg(long)]
    pub dim: Option<usize>,
}

/// Training flag overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Split driving the scheduler and checkpoint selection.
    #[arg(long, value_parser = ["test", "val"])]
    pub monitor: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic micro-Doppler dataset.
    Synth {
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
        /// Use the first N classes of the default pack.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value_t = 60)]
        per_class: usize,
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file with a `SynthConfig` and optionally a class list.
        #[arg(long)]
        synth_config: Option<PathBuf>,
        /// Also write a labeled continuous recording with this many time
        /// bins per activity segment (one segment per class).
        #[arg(long)]
        sequence_bins: Option<usize>,
    },
    /// Train a model and write the best checkpoint plus a run report.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Dataset directory (overrides `data.dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long, short, default_value = "run")]
        out: PathBuf,
        /// Single run with this seed; without it, a single run with the first
        /// configured seed unless --sweep is given.
        #[arg(long, conflicts_with = "sweep")]
        seed: Option<u64>,
        /// Run every seed in `train.seeds` and summarize.
        #[arg(long)]
        sweep: bool,
    },
    /// Evaluate a checkpoint on a dataset or a continuous recording.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; the test split is evaluated.
        #[arg(long, required_unless_present = "sequence")]
        data: Option<PathBuf>,
        /// Continuous recording directory (sequence.rmt + labels.csv).
        #[arg(long, conflicts_with = "data")]
        sequence: Option<PathBuf>,
        #[arg(long, default_value_t = 224)]
        frame: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Directory for metrics.json, confusion.csv and track.csv.
        #[arg(long, short, default_value = "eval")]
        out: PathBuf,
    },
    /// Per-layer parameter counts.
    Count {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Print the full JSON report instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Per-layer FLOPs per single-sample inference.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Keep norm/elementwise rows below 1% of the total.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        json: bool,
    },
    /// Averaged patch cross-correlation at the P1/P2/P3 inputs and outputs.
    Corr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which split to feed.
        #[arg(long, default_value = "test", value_parser = ["train", "test", "all"])]
        split: String,
        /// Use at most this many samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train the projection × patch × downsampling grid and write a CSV.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Grid rows to run (1-27); all by default.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<usize>,
        /// Seeds per cell (overrides `train.seeds`).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Rectangular patch extents as H,W.
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [7, 7])]
        rect: Vec<usize>,
        #[arg(long, short, default_value = "ablation.csv")]
        out: PathBuf,
    },
    /// Pick the dim from a sweep whose parameter count is nearest a target.
    CalibrateDim {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        target_params: f64,
        /// Dims to scan; defaults to the preset's sweep list.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
    },
}

fn policy_for(threads: Option<usize>) -> ExecPolicy {
    match threads {
        Some(1) => ExecPolicy::Sequential,
        _ => ExecPolicy::default(),
    }
}

fn setup_threads(threads: Option<usize>) -> anyhow::Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<radmamba::Error>())
        .map_or("error", radmamba::Error::kind);
    serde_json::json!({
        "error": {
            "kind": kind,
            "message": format!("{err:#}"),
            "chain": err.chain().map(|e| e.to_string()).collect::<Vec<_>>(),
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let _ = ctrlc::set_handler(|| {
        if STOP.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupt: finishing the current batch and flushing partial reports");
    });
    let result = setup_threads(cli.threads).and_then(|()| commands::run(cli.command, policy_for(cli.threads)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
