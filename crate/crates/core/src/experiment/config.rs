use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{IngestFormat, Protocol, SkewSpec};
use crate::error::{Error, Result};
use crate::model::BackboneSpec;
use crate::trainer::{LearnerKind, TrainPlan, Variant};

/// Dataset read from disk instead of generated. Unknown keys are not
/// rejected here because the format fields are flattened in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSource {
    pub path: PathBuf,
    #[serde(flatten)]
    pub format: IngestFormat,
}

/// Exactly one of `synthetic` and `ingest` is set once parsed; a file that
/// names neither gets the default synthetic stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Seed of the synthetic generator; ignored for ingested data.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub synthetic: Option<SkewSpec>,
    #[serde(default)]
    pub ingest: Option<IngestSource>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            synthetic: Some(SkewSpec::default()),
            ingest: None,
        }
    }
}

/// Everything one experiment needs. Each seed fixes both the class order
/// and the training randomness of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub learner: LearnerKind,
    pub variant: Variant,
    /// Exemplars kept per old class.
    pub budget: usize,
    pub data: DataConfig,
    pub protocol: Protocol,
    pub model: BackboneSpec,
    pub train: TrainPlan,
}

impl Default for ExperimentConfig {
    /// The desk-scale preset: library training defaults, except that every
    /// regularizer weight is scaled to 0.1 and gradients are clipped at 1.
    fn default() -> Self {
        let mut train = TrainPlan::default();
        train.optimizer.clip_norm = Some(1.0);
        let l = &mut train.loss;
        l.lambda1 = 0.1;
        l.lambda2 = 0.1;
        l.lambda3 = 0.1;
        l.lambda4 = 0.1;
        l.lambda5 = 0.1;
        ExperimentConfig {
            out: PathBuf::from("runs/experiment"),
            seeds: vec![0, 1, 2],
            learner: LearnerKind::Proposed,
            variant: Variant::Full,
            budget: 20,
            data: DataConfig::default(),
            protocol: Protocol::default(),
            model: BackboneSpec::default(),
            train,
        }
    }
}

/// Commented configuration written by `init-config`. Parsing it yields
/// [`ExperimentConfig::default`].
pub const TEMPLATE: &str = r#"# iclkit experiment configuration. Every value shown is the default.

# Run directory; one sub-directory per seed is created inside it.
out = "runs/experiment"
# Each seed fixes the class order and the training randomness of one run.
seeds = [0, 1, 2]
# proposed | finetune_only | replay_only
learner = "proposed"
# full | no_old_objective | no_aux | no_dist | no_margin | no_expansion
variant = "full"
# Exemplars kept per old class.
budget = 20

[data]
# Seed of the synthetic generator.
seed = 0

# Synthetic class-imbalanced stream. Replace this table with [data.ingest]
# to read a dataset from disk, for example:
#   [data.ingest]
#   path = "data/images"
#   format = "image_folder"   # or "table" with label_column = "label"
#   height = 32
#   width = 32
#   grayscale = false
[data.synthetic]
class_proportions = [0.40, 0.20, 0.12, 0.08, 0.07, 0.06, 0.04, 0.03]
total_samples = 4000
feature_dim = 16
# image_shape = [3, 8, 8]   # channels, height, width; generates images instead
difficulty = 1.0
modes_per_class = 2
min_per_class = 21

[protocol]
initial_classes = 4
per_step = 1
test_fraction = 0.2
split_seed = 0

[model]
# Must equal the flattened sample length.
input_dim = 16
hidden = [64, 64]
feature_dim = 16
# Hidden layers owned by the shared low-level extractor.
split_at = 1
activation = "relu"          # relu | tanh
branch_init = "warm_start"   # warm_start | random

[train]
epochs = 20
batch_size = 64
alternation = "epoch"        # epoch | batch
augment = true

[train.optimizer]
lr = 0.1
min_lr = 0.0001
momentum = 0.9
weight_decay = 0.0005
schedule = "cosine"          # cosine | constant
# The library default leaves clipping off. Without it the temperature can
# collapse early in an incremental step at this scale.
clip_norm = 1.0

# The library default for every lambda is 1.0. At desk scale the
# class-balanced weights shrink the classification term by roughly 1 - beta,
# so the regularizers are scaled to 0.1 to stay comparable with it.
[train.loss]
lambda1 = 0.1   # auxiliary, new-class objective
lambda2 = 0.1   # distillation, new-class objective
lambda3 = 0.1   # margin, new-class objective
lambda4 = 0.1   # distillation, old-class objective
lambda5 = 0.1   # margin, old-class objective
beta_new = 0.9
gamma_new = 1.0
beta_old = 0.99
gamma_old = 2.0
margin = 0.5
top_k = 2
"#;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<root>".into());
            Error::config(field, e.to_string().trim())
        })?;
        if cfg.data.synthetic.is_none() && cfg.data.ingest.is_none() {
            cfg.data.synthetic = Some(SkewSpec::default());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::config("out", "output directory is empty"));
        }
        if self.learner.uses_memory() && self.budget == 0 {
            return Err(Error::config(
                "budget",
                "must be >= 1 for learners with memory",
            ));
        }
        match (&self.data.synthetic, &self.data.ingest) {
            (Some(s), None) => {
                s.validate()
                    .map_err(|e| Error::config("data.synthetic", e.to_string()))?;
                if s.shape().len() != self.model.input_dim {
                    return Err(Error::config(
                        "model.input_dim",
                        format!(
                            "is {} but synthetic samples have length {}",
                            self.model.input_dim,
                            s.shape().len()
                        ),
                    ));
                }
                if self.learner.uses_memory() && s.min_per_class <= self.budget {
                    return Err(Error::config(
                        "budget",
                        "must be below data.synthetic.min_per_class",
                    ));
                }
            }
            (None, Some(_)) => {}
            _ => {
                return Err(Error::config(
                    "data",
                    "set exactly one of data.synthetic or data.ingest",
                ))
            }
        }
        if !(self.protocol.test_fraction > 0.0 && self.protocol.test_fraction < 1.0) {
            return Err(Error::config(
                "protocol.test_fraction",
                "must lie in (0, 1)",
            ));
        }
        self.model
            .validate()
            .map_err(|e| Error::config("model", e.to_string()))?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_matches_defaults() {
        assert_eq!(
            ExperimentConfig::from_toml(TEMPLATE).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn serialized_config_round_trips() {
        let mut cfg = ExperimentConfig {
            seeds: vec![4, 9],
            variant: Variant::NoMargin,
            ..ExperimentConfig::default()
        };
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);

        cfg.data = DataConfig {
            seed: 0,
            synthetic: None,
            ingest: Some(IngestSource {
                path: "x.csv".into(),
                format: IngestFormat::Table {
                    label_column: "y".into(),
                },
            }),
        };
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            ExperimentConfig::from_toml("").unwrap(),
            ExperimentConfig::default()
        );
    }

    fn field_of(text: &str) -> String {
        match ExperimentConfig::from_toml(text).unwrap_err() {
            Error::Config { field, .. } => field,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of("seeds = []"), "seeds");
        assert_eq!(field_of("seeds = [1, 1]"), "seeds");
        assert_eq!(field_of("[train]\nepochs = 0"), "train.epochs");
        assert_eq!(field_of("[train.optimizer]\nlr = -1.0"), "optimizer.lr");
        assert_eq!(field_of("[model]\ninput_dim = 3"), "model.input_dim");
        assert_eq!(field_of("bogus = 1"), "bogus");
        let both = "[data.ingest]\npath = \"x.csv\"\nformat = \"table\"\nlabel_column = \"y\"\n[data.synthetic]\n";
        assert_eq!(field_of(both), "data");
        assert!(matches!(
            ExperimentConfig::from_toml("learner = \"nope\""),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn finetune_needs_no_budget() {
        let cfg = ExperimentConfig::from_toml("learner = \"finetune_only\"\nbudget = 0").unwrap();
        assert_eq!(cfg.learner, LearnerKind::FinetuneOnly);
    }
}
