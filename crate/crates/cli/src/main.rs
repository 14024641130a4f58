use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iclkit::experiment::{self, ExperimentConfig, TEMPLATE};
use iclkit::trainer::{LearnerKind, Variant};
use iclkit::Error;
use serde_json::json;

/// Class-incremental learning experiments.
#[derive(Debug, Parser)]
#[command(name = "iclkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory replacing the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// proposed, finetune_only or replay_only.
    #[arg(long)]
    learner: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a commented configuration with every default.
    InitConfig {
        #[arg(long, default_value = "iclkit.toml")]
        out: PathBuf,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Run one learner over every configured seed.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Lesion applied to the proposed learner.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Run the proposed learner once per variant and tabulate the results.
    Ablate {
        #[command(flatten)]
        args: RunArgs,
        /// Variants to run (repeatable); all of them when omitted.
        #[arg(long)]
        variant: Vec<String>,
    },
    /// Compare completed run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Directory for report.csv, report.md and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot accuracy and forgetting per step for completed runs.
    Plot {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "curves.png")]
        out: PathBuf,
    },
}

fn load(args: &RunArgs) -> iclkit::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(l) = &args.learner {
        cfg.learner = l.parse::<LearnerKind>()?;
    }
    Ok(cfg)
}

fn execute(cmd: Command) -> iclkit::Result<()> {
    match cmd {
        Command::InitConfig { out, force } => {
            if out.exists() && !force {
                return Err(Error::Usage(format!(
                    "{} already exists; pass --force to overwrite",
                    out.display()
                )));
            }
            std::fs::write(&out, TEMPLATE).map_err(|e| Error::io(&out, e))?;
            println!("wrote {}", out.display());
        }
        Command::Run { args, variant } => {
            let mut cfg = load(&args)?;
            if let Some(v) = variant {
                cfg.variant = v.parse()?;
            }
            cfg.validate()?;
            let summary = experiment::run(&cfg)?;
            print!("{}", summary.to_text());
            println!("run directory {}", cfg.out.display());
        }
        Command::Ablate { args, variant } => {
            let cfg = load(&args)?;
            let variants = if variant.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variant
                    .iter()
                    .map(|v| v.parse())
                    .collect::<iclkit::Result<Vec<Variant>>>()?
            };
            cfg.validate()?;
            let dirs: Vec<PathBuf> = variants.iter().map(|v| cfg.out.join(v.name())).collect();
            experiment::ablate(&cfg, &variants)?;
            print!("{}", experiment::report(&dirs)?.to_markdown());
        }
        Command::Report { dirs, out } => {
            let report = experiment::report(&dirs)?;
            if let Some(out) = out {
                std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                report.write(&out, "report")?;
            }
            print!("{}", report.to_markdown());
        }
        Command::Plot { dirs, out } => {
            experiment::plot(&dirs, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

/// One-line JSON error record for stderr.
fn error_record(err: &Error) -> serde_json::Value {
    let mut rec = json!({ "error": err.kind(), "message": err.to_string() });
    match err {
        Error::Config { field, .. } => rec["field"] = json!(field),
        Error::Ingestion { path, .. } | Error::Reporting { path, .. } | Error::Io { path, .. } => {
            rec["path"] = json!(path.display().to_string())
        }
        _ => {}
    }
    rec
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rec = json!({ "error": "usage", "message": e.kind().to_string(), "detail": e.to_string() });
            eprintln!("{rec}");
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_record(&err));
            ExitCode::from(if matches!(err, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
