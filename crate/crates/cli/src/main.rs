use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use seedcloud::config::RunConfig;
use seedcloud::data::CloudFormat;
use seedcloud::run;
use seedcloud::train::stored_config;
use seedcloud::Error;

#[derive(Parser)]
#[command(name = "seedcloud", version, about = "Point-cloud auto-encoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lr=5e-5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Replaces the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only errors on the terminal.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ply,
    Xyz,
}

impl From<Format> for CloudFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Ply => CloudFormat::PlyAscii,
            Format::Xyz => CloudFormat::Xyz,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a reconstruction auto-encoder and evaluate it.
    Train,
    /// Evaluate reconstruction quality of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Linear classification on frozen codewords.
    Classify {
        /// Use this checkpoint instead of training a new model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate shape completion from occluded inputs.
    Complete,
    /// Train every configured ablation cell over the replicate seeds.
    Ablate,
    /// Write input/output clouds (and folding seeds) of selected shapes.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated shape ids.
        #[arg(long, value_delimiter = ',')]
        shapes: Vec<String>,
        #[arg(long, value_enum, default_value = "ply")]
        format: Format,
    },
    /// Write the synthetic corpus to disk with a manifest.
    Synth {
        #[arg(long, value_enum, default_value = "ply")]
        format: Format,
    },
}

fn resolve(common: &Common, checkpoint: Option<&Path>) -> seedcloud::Result<RunConfig> {
    let base = match (&common.config, checkpoint) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(ckpt)) => stored_config(ckpt)?,
        (None, None) => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.set)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> seedcloud::Result<()> {
    let c = &cli.common;
    let out = c.out.as_path();
    match &cli.command {
        Command::Train => run::run_train(&resolve(c, None)?, out, c.quiet).map(drop),
        Command::Eval { checkpoint } => run::run_eval(&resolve(c, Some(checkpoint))?, checkpoint, out, c.quiet).map(drop),
        Command::Classify { checkpoint } => {
            let cfg = resolve(c, checkpoint.as_deref())?;
            run::run_classify(&cfg, checkpoint.as_deref(), out, c.quiet).map(drop)
        }
        Command::Complete => run::run_complete(&resolve(c, None)?, out, c.quiet).map(drop),
        Command::Ablate => run::run_ablate(&resolve(c, None)?, out, c.quiet).map(drop),
        Command::Export { checkpoint, shapes, format } => {
            let cfg = resolve(c, Some(checkpoint))?;
            run::run_export(&cfg, checkpoint, shapes, (*format).into(), out, c.quiet).map(drop)
        }
        Command::Synth { format } => run::run_synth(&resolve(c, None)?, (*format).into(), out, c.quiet).map(drop),
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("SEEDCLOUD_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("SEEDCLOUD_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.common.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = init_threads().and_then(|()| execute(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
