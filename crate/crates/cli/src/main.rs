use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "decred", version, about = "Train, decode and evaluate DeCRED models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain benchmark manifests.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes best.ckpt, last.ckpt and train_log.tsv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training manifest; overrides data.train_manifest.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Dev manifest; overrides data.dev_manifest.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from <out>/last.ckpt if present.
        #[arg(long)]
        resume: bool,
    },
    /// Decode a manifest into a hypothesis file.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Fit scalar or vector mixing weights on a dev manifest.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "vector")]
        mode: String,
        /// Share of the manifest used for fitting; the rest is the holdout.
        #[arg(long, default_value_t = 0.7)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
        #[arg(long, default_value_t = 3)]
        patience: usize,
    },
    /// Score hypothesis files against manifests.
    Eval {
        /// Reference manifest; repeat once per dataset.
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Hypothesis file, paired with --manifest in order.
        #[arg(long, required = true)]
        hyp: Vec<PathBuf>,
        /// Baseline hypotheses, paired in order; adds bootstrap p-values.
        #[arg(long)]
        baseline: Vec<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-attention internal language model perplexity.
    IlmPpl {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
    },
    /// Train a grid of auxiliary classifier positions and weights.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        positions: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        weights: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time decoding configurations at a fixed emission length.
    Benchmark {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `name=...,width=...,lambda=...,weights=...`; repeatable.
        #[arg(long = "decode-config")]
        decode_config: Vec<String>,
        /// Tokens emitted per utterance while timing.
        #[arg(long, default_value_t = 20)]
        emit: usize,
    },
}

#[derive(Args, Clone, Debug)]
struct DecodeArgs {
    /// File of decode.* keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    /// 1 is greedy.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// vanilla, scalar or vector.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    weights: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
