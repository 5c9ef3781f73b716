//! The bias laboratory command line: generate planted-bias datasets, train
//! the classifier, audit it with global explanations and counterfactual
//! bias insertion, and run the mitigation procedures.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use biaslab::error::Error;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "biaslab",
    about = "Plant biases in synthetic data, discover them with global explanations, quantify them with counterfactual insertion, and mitigate them",
    version
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base directory for timestamped run outputs.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    /// Override every stage seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-bias dataset (manifest + PGM files).
    GenData,
    /// Train the classifier on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Cluster images and attribution maps to surface bias candidates.
    AuditGebi {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Insert the configured artifact into every test sample and measure
    /// prediction changes.
    AuditCbi {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Targeted-data-augmentation sweep over insertion probabilities.
    SweepTda {
        #[arg(long)]
        data: PathBuf,
    },
    /// Attribution-feedback fine-tuning of a pretrained model.
    FinetuneAttr {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Synthesize style-transfer images and pseudo-label them.
    Stda {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Descriptive artifact statistics of a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// The full chain: generate, inspect, train, audit, mitigate.
    Repro,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::AuditGebi { .. } => "audit-gebi",
            Command::AuditCbi { .. } => "audit-cbi",
            Command::SweepTda { .. } => "sweep-tda",
            Command::FinetuneAttr { .. } => "finetune-attr",
            Command::Stda { .. } => "stda",
            Command::Stats { .. } => "stats",
            Command::Repro => "repro",
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        Error::ShapeMismatch { .. } | Error::NonScalarOutput { .. } | Error::Numeric { .. } => 4,
    }
}

/// Create `base/<command>-<timestamp>[-n]`.
fn make_run_dir(base: &Path, command: &str) -> std::io::Result<PathBuf> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .expect("clock after epoch")
        .as_secs();
    let mut dir = base.join(format!("{command}-{stamp}"));
    let mut n = 0;
    while dir.exists() {
        n += 1;
        dir = base.join(format!("{command}-{stamp}-{n}"));
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<PathBuf, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if cli.threads != 0 {
        cfg.threads = cli.threads;
    }
    biaslab::exec::configure_threads(cfg.threads)?;

    let out = make_run_dir(&cli.out, cli.command.name())?;
    cfg.echo(&out)?;

    match &cli.command {
        Command::GenData => commands::gen_data(&cfg, &out)?,
        Command::Train { data } => commands::train(&cfg, data, &out)?,
        Command::AuditGebi { data, model } => commands::audit_gebi(&cfg, data, model, &out)?,
        Command::AuditCbi { data, model } => commands::audit_cbi(&cfg, data, model, &out)?,
        Command::SweepTda { data } => commands::sweep_tda(&cfg, data, &out)?,
        Command::FinetuneAttr { data, model } => {
            commands::finetune_attr(&cfg, data, model, &out)?
        }
        Command::Stda { data, model } => commands::stda(&cfg, data, model, &out)?,
        Command::Stats { data } => commands::stats(&cfg, data, &out)?,
        Command::Repro => commands::repro(&cfg, &out)?,
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
