//! `kws-adapt`: pretraining, adaptation, evaluation and reporting workflows.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    /// Prefixes the message with context, keeping the class.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{ctx}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{ctx}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{ctx}: {m}")),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<kws_adapt::Error> for CliError {
    fn from(e: kws_adapt::Error) -> Self {
        use kws_adapt::Error as E;
        match e {
            E::Config(_) | E::Spec(_) => CliError::Config(e.to_string()),
            E::Data(_) | E::Io(_) | E::Json(_) | E::Format(_) => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "kws-adapt", version, about = "Text-conditioned few-shot keyword spotting")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contrastive toy pretraining of the acoustic and text encoders.
    Pretrain,
    /// Adapt a pretrained checkpoint to one keyword.
    Adapt {
        #[arg(long)]
        keyword: Option<String>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        method: Option<String>,
    },
    /// Test-set EER/AP for adapted checkpoints.
    Eval,
    /// Tunable-parameter counts per adapter selector.
    ParamAudit,
    /// Normalized activation profiles over [-3, 3].
    PlotLaf,
    /// Compare methods across keywords, shots and samplings.
    Ablate {
        #[arg(long)]
        method: Option<String>,
    },
    /// Write a synthetic dataset directory.
    MakeToy,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let mut o = Overrides { seed: cli.seed, ..Overrides::default() };
    if let Command::Adapt { keyword, shots, method } = &cli.command {
        o.keyword = keyword.clone();
        o.shots = *shots;
        o.method = method.clone();
    }
    cfg.apply(&o);
    if let Command::Ablate { method: Some(m) } = &cli.command {
        cfg.ablate.get_or_insert_with(Default::default).methods = vec![m.clone()];
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", cli.out.display())))?;
    match cli.command {
        Command::Pretrain => commands::pretrain(&cfg, &cli.out),
        Command::Adapt { .. } => commands::adapt(&cfg, &cli.out),
        Command::Eval => commands::eval(&cfg, &cli.out),
        Command::ParamAudit => commands::param_audit(&cfg, &cli.out),
        Command::PlotLaf => commands::plot_laf(&cfg, &cli.out),
        Command::Ablate { .. } => commands::ablate(&cfg, &cli.out),
        Command::MakeToy => commands::make_toy(&cfg, &cli.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
