//! `scat-inpaint` command line and HTTP service.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod service;

pub const CHECKPOINT_ENV: &str = "SCAT_INPAINT_CHECKPOINT";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const BAD_INPUT: i32 = 2;
    pub const EMPTY_INTERSECTION: i32 = 3;
    pub const SIZE_MISMATCH: i32 = 4;
}

#[derive(Debug, Parser)]
#[command(name = "scat-inpaint", version, about = "Image inpainting: training, evaluation, inference and serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON config.
    Train(TrainArgs),
    /// Score inpainted results against ground truth.
    Eval(EvalArgs),
    /// Inpaint one image.
    Infer(InferArgs),
    /// Write random free-form masks and a manifest.
    MakeMasks(MakeMasksArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    /// JSON report path; a text table is written next to it with a `.txt` extension.
    #[arg(long)]
    pub report_out: PathBuf,
    /// Feature extractor weights for FID. Without them FID is reported as null.
    #[arg(long)]
    pub extractor_weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, env = CHECKPOINT_ENV)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Resize the mask and image to fit the model instead of failing.
    #[arg(long)]
    pub resize: bool,
    /// Write the raw generator output instead of the composite.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct MakeMasksArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stroke count range as `min,max`.
    #[arg(long, value_parser = parse_range::<u32>)]
    pub strokes: Option<(u32, u32)>,
    /// Vertices per stroke as `min,max`.
    #[arg(long, value_parser = parse_range::<u32>)]
    pub vertices: Option<(u32, u32)>,
    /// Brush width as `min,max` fractions of the shorter side.
    #[arg(long, value_parser = parse_range::<f64>)]
    pub width: Option<(f64, f64)>,
    /// Segment length as `min,max` fractions of the shorter side.
    #[arg(long, value_parser = parse_range::<f64>)]
    pub segment_length: Option<(f64, f64)>,
    /// Rectangle count as `min,max`.
    #[arg(long, value_parser = parse_range::<u32>)]
    pub rectangles: Option<(u32, u32)>,
    /// Rectangle side as `min,max` fractions of the shorter side.
    #[arg(long, value_parser = parse_range::<f64>)]
    pub rectangle_size: Option<(f64, f64)>,
    #[arg(long)]
    pub max_ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = CHECKPOINT_ENV)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub max_concurrent_inferences: u32,
    #[arg(long, default_value_t = 2048)]
    pub max_image_dim: u32,
    /// Directory with the browser bundle, served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

fn parse_range<T>(s: &str) -> Result<(T, T), String>
where
    T: std::str::FromStr,
    T::Err: fmt::Display,
{
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `min,max`, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<T>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

/// An error carrying the exit code it should produce.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: i32, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<scat_core::Error> for Failure {
    fn from(e: scat_core::Error) -> Self {
        use scat_core::Error as E;
        let code = match &e {
            E::Config(_)
            | E::Json(_)
            | E::Format { .. }
            | E::MissingKeys { .. }
            | E::ConfigMismatch(_)
            | E::Io { .. } => exit::BAD_INPUT,
            _ => exit::FAILURE,
        };
        Self::new(code, e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::new(exit::FAILURE, e)
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::MakeMasks(a) => commands::make_masks(&a),
        Command::Serve(a) => service::serve_blocking(&a),
    };
    match outcome {
        Ok(()) => exit::OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}
