use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// How classes are divided over incremental steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    pub initial_classes: usize,
    pub per_step: usize,
    /// Fraction of each class held out for testing.
    pub test_fraction: f64,
    /// Seed of the train/test split; independent of the class order.
    pub split_seed: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            initial_classes: 4,
            per_step: 1,
            test_fraction: 0.2,
            split_seed: 0,
        }
    }
}

impl Protocol {
    /// Number of steps for `total` classes, or a protocol error.
    pub fn num_steps(&self, total: usize) -> Result<usize> {
        if self.initial_classes == 0 || self.per_step == 0 {
            return Err(Error::Protocol(
                "initial_classes and per_step must both be positive".into(),
            ));
        }
        if total <= self.initial_classes {
            return Err(Error::Protocol(format!(
                "{total} classes leave nothing to learn after {} initial classes",
                self.initial_classes
            )));
        }
        let rest = total - self.initial_classes;
        if !rest.is_multiple_of(self.per_step) {
            return Err(Error::Protocol(format!(
                "{rest} remaining classes cannot be split into groups of {}",
                self.per_step
            )));
        }
        Ok(1 + rest / self.per_step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamStep {
    /// `Y_t`, in class-order sequence.
    pub classes: Vec<usize>,
    /// `D_t`.
    pub train: Dataset,
}

/// Ordered steps of new classes, with a held-out test split per class.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalStream {
    pub steps: Vec<StreamStep>,
    pub test: Dataset,
    pub class_order: Vec<usize>,
    pub protocol: Protocol,
    pub class_order_seed: u64,
}

impl IncrementalStream {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Test samples of the classes introduced at step `i` (0-based).
    pub fn test_for_step(&self, i: usize) -> Dataset {
        self.test.filter_classes(&self.steps[i].classes)
    }

    pub fn manifest(&self, data_seed: Option<u64>) -> StreamManifest {
        let mut classes = Vec::new();
        for step in &self.steps {
            for &c in &step.classes {
                let train = step.train.positions_of(c);
                classes.push(ClassSplit {
                    class: c,
                    name: step.train.class_name(c),
                    train_ids: train.iter().map(|&p| step.train.ids[p]).collect(),
                    test_ids: self
                        .test
                        .positions_of(c)
                        .iter()
                        .map(|&p| self.test.ids[p])
                        .collect(),
                });
            }
        }
        classes.sort_by_key(|c| c.class);
        StreamManifest {
            data_seed,
            split_seed: self.protocol.split_seed,
            class_order_seed: self.class_order_seed,
            class_order: self.class_order.clone(),
            step_classes: self.steps.iter().map(|s| s.classes.clone()).collect(),
            classes,
        }
    }
}

/// Persisted description of a stream: counts, split membership, seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub data_seed: Option<u64>,
    pub split_seed: u64,
    pub class_order_seed: u64,
    pub class_order: Vec<usize>,
    pub step_classes: Vec<Vec<usize>>,
    pub classes: Vec<ClassSplit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub class: usize,
    pub name: String,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

/// Splits each class into train/test, permutes the class order with
/// `class_order_seed`, and groups classes into steps.
pub fn make_stream(
    data: &Dataset,
    protocol: &Protocol,
    class_order_seed: u64,
) -> Result<IncrementalStream> {
    let classes = data.classes();
    let steps = protocol.num_steps(classes.len())?;
    if !(0.0..1.0).contains(&protocol.test_fraction) {
        return Err(Error::Protocol("test_fraction must lie in [0, 1)".into()));
    }

    let mut split_rng = ChaCha8Rng::seed_from_u64(protocol.split_seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for &c in &classes {
        let mut pos = data.positions_of(c);
        pos.shuffle(&mut split_rng);
        let n_test = (pos.len() as f64 * protocol.test_fraction).round() as usize;
        if n_test == 0 && protocol.test_fraction > 0.0 {
            return Err(Error::Protocol(format!(
                "class {c} is too small to hold out a test split"
            )));
        }
        if n_test >= pos.len() {
            return Err(Error::Protocol(format!(
                "class {c} has no training samples left"
            )));
        }
        let (test, train) = pos.split_at(n_test);
        test_idx.extend_from_slice(test);
        train_idx.extend_from_slice(train);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let train = data.subset(&train_idx);
    let test = data.subset(&test_idx);

    let mut order = classes;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(class_order_seed));

    let mut groups = vec![order[..protocol.initial_classes].to_vec()];
    for chunk in order[protocol.initial_classes..].chunks(protocol.per_step) {
        groups.push(chunk.to_vec());
    }
    debug_assert_eq!(groups.len(), steps);
    let steps = groups
        .into_iter()
        .map(|classes| StreamStep {
            train: train.filter_classes(&classes),
            classes,
        })
        .collect();
    Ok(IncrementalStream {
        steps,
        test,
        class_order: order,
        protocol: protocol.clone(),
        class_order_seed,
    })
}
