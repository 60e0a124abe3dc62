//! Command-line driver. Every command writes its outputs and a
//! [`RunManifest`] under `--out`.

mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

pub use manifest::{RunManifest, MANIFEST_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cmafnet", version, about = "RGB-D defect detector toolkit")]
pub struct Cli {
    /// Seed for initialization, data generation and batch order.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// TOML configuration (training settings for train/ablate, model scale for build).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to runs/<command>.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for commands that fan out over seeds.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a model and report parameters and FLOPs.
    Build(BuildArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Generate synthetic RGB-D scenes.
    Synth(SynthArgs),
    /// Train one variant on synthetic scenes and evaluate it.
    Train(TrainArgs),
    /// Evaluate a prediction dump against an annotation corpus.
    Eval(EvalArgs),
    /// Object size histogram of an annotation corpus.
    Stats(StatsArgs),
    /// Paired-seed ablation over model variants.
    Ablate(AblateArgs),
    /// Re-run a recorded command and compare its metrics.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Build(_) => "build",
            Command::Gradcheck(_) => "gradcheck",
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Stats(_) => "stats",
            Command::Ablate(_) => "ablate",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long, value_parser = ["n", "s", "m", "l", "x", "micro"])]
    pub scale: Option<String>,
    /// Print the per-node table.
    #[arg(long)]
    pub summary: bool,
    #[arg(long, default_value_t = 640)]
    pub img_size: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = ["srm", "asrm", "csib", "csif", "full", "all"], default_value = "all")]
    pub module: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML with `[scene]` and `[noise]` tables.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "fused",
          value_parser = ["fused", "rgb", "depth", "full", "no-srm", "no-csif", "neither"])]
    pub variant: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value_t = 640.0)]
    pub img_size: f64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 640.0)]
    pub img_size: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_parser = ["modality", "modules"])]
    pub experiment: String,
    /// Number of seeds, counted up from --seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Comma-separated subset of the experiment's variants.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Why a command could not complete.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Run(_) => EXIT_CHECK_FAILED,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Run(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<cmafnet::Error> for Failure {
    fn from(e: cmafnet::Error) -> Failure {
        match e {
            cmafnet::Error::Config(m) => Failure::Usage(m),
            other => Failure::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure::Run(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Failure {
        Failure::Run(e.to_string())
    }
}

/// What a finished command reports back.
pub struct Outcome {
    pub exit_code: i32,
    pub config: Value,
    pub metrics: Value,
    pub outputs: Vec<String>,
}

/// Parses and runs one command line (without the program name), returning
/// the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(std::iter::once(OsString::from("cmafnet")).chain(argv.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(&cli, &argv, None) {
        Ok((_, m)) => m.exit_code,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}

/// Runs a parsed command, writing outputs and the manifest. `config`
/// replaces whatever the command would have loaded from files.
pub fn run(cli: &Cli, argv: &[String], config: Option<Value>) -> Result<(PathBuf, RunManifest), Failure> {
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(cli.command.name()));
    std::fs::create_dir_all(&out)?;
    let started = manifest::now_ms();
    let outcome = commands::dispatch(cli, &out, config)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: cli.command.name().to_string(),
        argv: manifest::strip_out(argv),
        config: outcome.config,
        seed: cli.seed,
        threads: cli.threads,
        started_unix_ms: started,
        finished_unix_ms: manifest::now_ms(),
        outputs: outcome.outputs,
        metrics: outcome.metrics,
        exit_code: outcome.exit_code,
    };
    manifest.save(&out)?;
    Ok((out, manifest))
}
