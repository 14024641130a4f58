use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::plot::{render_curves, Curve};
use crate::checkpoint;
use crate::data::{generate_skewed, ingest, make_stream, Dataset};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::trainer::{run_stream, EpochRecord, LearnerKind, StepOptions, Variant};

/// Marker present in a run directory until every artifact is written.
pub const INCOMPLETE: &str = "INCOMPLETE";
pub const SUMMARY_FILE: &str = "metrics.json";

/// Mean and sample standard deviation across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

impl fmt::Display for Stat {
    /// Percentage points with one decimal, e.g. `94.5±0.8`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}±{:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Metrics,
    pub acc_curve: Vec<f64>,
    pub fgt_curve: Vec<f64>,
}

/// Contents of a run directory's `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: String,
    pub learner: LearnerKind,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub acc: Stat,
    pub fgt: Stat,
    pub acc_new: Stat,
    pub acc_old: Stat,
    /// Seed-mean accuracy and forgetting after each step.
    pub acc_curve: Vec<f64>,
    pub fgt_curve: Vec<f64>,
    pub runs: Vec<SeedResult>,
}

impl RunSummary {
    fn from_runs(cfg: &ExperimentConfig, runs: Vec<SeedResult>) -> RunSummary {
        let stat = |f: fn(&Metrics) -> f64| {
            Stat::of(&runs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>())
        };
        let steps = runs[0].acc_curve.len();
        let mean_curve = |f: fn(&SeedResult) -> &Vec<f64>| {
            (0..steps)
                .map(|t| runs.iter().map(|r| f(r)[t]).sum::<f64>() / runs.len() as f64)
                .collect()
        };
        RunSummary {
            version: env!("CARGO_PKG_VERSION").to_string(),
            learner: cfg.learner,
            variant: cfg.variant,
            seeds: cfg.seeds.clone(),
            acc: stat(|m| m.acc),
            fgt: stat(|m| m.fgt),
            acc_new: stat(|m| m.acc_new),
            acc_old: stat(|m| m.acc_old),
            acc_curve: mean_curve(|r| &r.acc_curve),
            fgt_curve: mean_curve(|r| &r.fgt_curve),
            runs,
        }
    }

    /// Row label: the learner, or the variant for lesioned runs.
    pub fn label(&self) -> String {
        match (self.learner, self.variant) {
            (LearnerKind::Proposed, Variant::Full) => "proposed".into(),
            (LearnerKind::Proposed, v) => v.name().into(),
            (l, _) => l.name().into(),
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "learner {}\nvariant {}\nseeds {:?}\nAcc {}\nFgt {}\nAcc_new {}\nAcc_old {}\n",
            self.learner, self.variant, self.seeds, self.acc, self.fgt, self.acc_new, self.acc_old
        )
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn remove_marker(dir: &Path) -> Result<()> {
    let p = dir.join(INCOMPLETE);
    fs::remove_file(&p).map_err(|e| Error::io(&p, e))
}

#[derive(Serialize)]
struct DataManifest<'a> {
    data_seed: Option<u64>,
    samples: usize,
    counts: std::collections::BTreeMap<String, usize>,
    sources: &'a [PathBuf],
}

/// Loads (or generates) the dataset and records its counts in `dir`.
fn load_data(cfg: &ExperimentConfig, dir: &Path) -> Result<(Dataset, Option<u64>)> {
    let (data, seed, sources) = match (&cfg.data.synthetic, &cfg.data.ingest) {
        (Some(spec), _) => (
            generate_skewed(spec, cfg.data.seed)?,
            Some(cfg.data.seed),
            Vec::new(),
        ),
        (None, Some(src)) => {
            let got = ingest(&src.path, &src.format)?;
            (got.dataset, None, got.sources)
        }
        (None, None) => return Err(Error::config("data", "no data source")),
    };
    if data.dim() != cfg.model.input_dim {
        return Err(Error::config(
            "model.input_dim",
            format!(
                "is {} but samples have length {}",
                cfg.model.input_dim,
                data.dim()
            ),
        ));
    }
    write_json(
        &dir.join("data_manifest.json"),
        &DataManifest {
            data_seed: seed,
            samples: data.len(),
            counts: data.count_manifest(),
            sources: &sources,
        },
    )?;
    Ok((data, seed))
}

fn run_seed(
    cfg: &ExperimentConfig,
    data: &Dataset,
    data_seed: Option<u64>,
    seed: u64,
) -> Result<SeedResult> {
    let dir = cfg.out.join(format!("seed_{seed}"));
    create_dir(&dir)?;
    write_file(&dir.join(INCOMPLETE), "")?;
    let stream = make_stream(data, &cfg.protocol, seed)?;
    write_json(
        &dir.join("stream_manifest.json"),
        &stream.manifest(data_seed),
    )?;

    let opts = StepOptions {
        learner: cfg.learner,
        variant: cfg.variant,
        budget: cfg.budget,
    };
    let run = run_stream(
        &stream,
        &cfg.model,
        &cfg.train,
        opts,
        seed,
        |t, learner, matrix| {
            let model = learner.model().expect("trained");
            checkpoint::save(model, &dir.join(format!("checkpoint_step_{t}.ckpt")))?;
            if t > 1 && cfg.learner.uses_memory() {
                write_json(
                    &dir.join(format!("memory_step_{t}.json")),
                    &learner.memory().manifest(),
                )?;
            }
            matrix.write_csv(&dir.join("accuracy_matrix.csv"))
        },
    )?;

    let mut log = String::new();
    for rec in &run.log {
        log += &serde_json::to_string::<EpochRecord>(rec)?;
        log.push('\n');
    }
    write_file(&dir.join("epochs.jsonl"), log)?;
    let (acc_curve, fgt_curve) = run.matrix.curves()?;
    let result = SeedResult {
        seed,
        metrics: run.metrics,
        acc_curve,
        fgt_curve,
    };
    write_json(&dir.join("metrics.json"), &result)?;
    render_curves(
        &dir.join("curves.png"),
        &[curve_pair(&result.acc_curve, &result.fgt_curve)],
    )?;
    remove_marker(&dir)?;
    Ok(result)
}

fn curve_pair(acc: &[f64], fgt: &[f64]) -> Curve {
    Curve {
        acc: acc.to_vec(),
        fgt: fgt.to_vec(),
    }
}

/// Runs every seed of `cfg` in parallel and writes the run directory.
/// On failure the `INCOMPLETE` marker stays in place.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = &cfg.out;
    create_dir(out)?;
    write_file(&out.join(INCOMPLETE), "")?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    let (data, data_seed) = load_data(cfg, out)?;

    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, &data, data_seed, seed))
        .collect::<Result<Vec<_>>>()?;

    let summary = RunSummary::from_runs(cfg, runs);
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    write_file(&out.join("summary.txt"), summary.to_text())?;
    render_curves(
        &out.join("curves.png"),
        &[curve_pair(&summary.acc_curve, &summary.fgt_curve)],
    )?;
    remove_marker(out)?;
    Ok(summary)
}

/// Runs the proposed learner once per variant, each into `out/<variant>`,
/// then writes a comparison table and plot into `out`.
pub fn ablate(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<RunSummary>> {
    if variants.is_empty() {
        return Err(Error::Usage("ablation needs at least one variant".into()));
    }
    let mut dirs = Vec::new();
    let mut summaries = Vec::new();
    for &variant in variants {
        let mut c = cfg.clone();
        c.learner = LearnerKind::Proposed;
        c.variant = variant;
        c.out = cfg.out.join(variant.name());
        summaries.push(run(&c)?);
        dirs.push(c.out);
    }
    let report = super::report::report(&dirs)?;
    report.write(&cfg.out, "ablation")?;
    super::plot::plot(&dirs, &cfg.out.join("ablation_curves.png"))?;
    Ok(summaries)
}

/// Reads the summary of a completed run directory.
pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let reporting = |message: String| Error::Reporting {
        path: dir.to_path_buf(),
        message,
    };
    if dir.join(INCOMPLETE).exists() {
        return Err(reporting("run is marked incomplete".into()));
    }
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| reporting(format!("cannot read {SUMMARY_FILE}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| reporting(format!("malformed {SUMMARY_FILE}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_uses_sample_deviation() {
        let s = Stat::of(&[0.9, 0.95, 1.0]);
        assert!((s.mean - 0.95).abs() < 1e-12);
        assert!((s.std - 0.05).abs() < 1e-12);
        assert_eq!(s.to_string(), "95.0±5.0");
        assert_eq!(Stat::of(&[0.5]).std, 0.0);
        assert_eq!(
            Stat {
                mean: -0.002,
                std: 0.008
            }
            .to_string(),
            "-0.2±0.8"
        );
    }
}
