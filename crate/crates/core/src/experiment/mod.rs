//! Config-driven experiments: seeded multi-run execution, persisted run
//! directories, comparison tables and curve plots.
//!
//! A run directory holds `config.toml`, `data_manifest.json`, the summary
//! `metrics.json`/`summary.txt`/`curves.png`, and one `seed_<s>/` per seed
//! with the stream and memory manifests, per-step checkpoints, the accuracy
//! matrix, per-epoch logs and that seed's metrics and curves.

pub mod config;
pub mod plot;
pub mod report;
pub mod runner;

pub use config::{DataConfig, ExperimentConfig, IngestSource, TEMPLATE};
pub use plot::{plot, render_curves, Curve};
pub use report::{report, Report, ReportRow};
pub use runner::{ablate, read_summary, run, RunSummary, SeedResult, Stat, INCOMPLETE};
