use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

/// Spatiotemporal style-transfer metamer synthesis.
#[derive(Parser, Debug)]
#[command(name = "stst", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every configurable subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration file (key = value lines).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (or file, for reports); sets `output`.
    #[arg(long, short)]
    pub output: Option<String>,
    /// Noise seed; sets `seed`.
    #[arg(long)]
    pub seed: Option<String>,
    /// Worker threads inside a frame (0 = one per core).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a metamer of a target video.
    Synth {
        /// Target video directory; sets `target`.
        target: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Phase-scrambled baseline of a video.
    Stps {
        /// Video directory; sets `target`.
        target: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-frame intensity, contrast, pixel change and optical flow as CSV.
    Analyze {
        video: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Similarity metrics as CSV.
    Metrics {
        #[command(subcommand)]
        metric: Metric,
    },
    /// Write a synthetic drifting-texture clip.
    Fixture {
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Horizontal drift in pixels per frame.
        #[arg(long, default_value_t = 2.0)]
        velocity: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// png8 or raw32.
        #[arg(long, default_value = "png8")]
        format: String,
    },
}

#[derive(Subcommand, Debug)]
pub enum Metric {
    /// Linear CKA between activation matrices stored in tensor archives.
    Cka {
        /// Archive holding the X matrices.
        #[arg(long)]
        archive: PathBuf,
        /// Archive holding the Y matrices (defaults to --archive).
        #[arg(long)]
        archive_y: Option<PathBuf>,
        /// Comma-separated X entry names.
        #[arg(long)]
        x: String,
        /// Comma-separated Y entry names.
        #[arg(long)]
        y: String,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Per-frame SSIM between two videos.
    Ssim {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Per-frame conditional SSIM of next-frame predictions; prediction k
    /// is compared with frame k + 1.
    Cssim {
        video: PathBuf,
        predictions: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { target, common } => commands::synth(target, &common),
        Command::Stps { target, common } => commands::stps(target, &common),
        Command::Analyze { video, common } => commands::analyze(&video, &common),
        Command::Metrics { metric } => commands::metrics(metric),
        Command::Fixture {
            output,
            frames,
            size,
            velocity,
            seed,
            format,
        } => commands::fixture(&output, frames, size, velocity, seed, &format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.class());
            if e.class() == "config" {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
