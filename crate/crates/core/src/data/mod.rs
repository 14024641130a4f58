//! Labeled datasets, the class-incremental stream, synthetic generation,
//! augmentation and file ingestion.

mod augment;
mod ingest;
mod stream;
mod synthetic;

pub use augment::{augment, augment_with, crop_with_padding, flip_horizontal};
pub use ingest::{ingest, IngestFormat, Ingested};
pub use stream::{make_stream, IncrementalStream, Protocol, StreamManifest, StreamStep};
pub use synthetic::{allocate_counts, generate_skewed, SkewSpec};

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassCounts;

/// Layout of a single sample's flattened feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SampleShape {
    Vector {
        len: usize,
    },
    /// Channel-major `c x h x w` image.
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl SampleShape {
    pub fn len(&self) -> usize {
        match *self {
            SampleShape::Vector { len } => len,
            SampleShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_image(&self) -> bool {
        matches!(self, SampleShape::Image { .. })
    }
}

/// Labeled samples. `ids` are the indices of each row in the dataset the
/// samples were originally drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: SampleShape,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
    /// Optional human-readable class names indexed by label.
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(shape: SampleShape, features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.ncols() != shape.len() {
            return Err(Error::Contract(format!(
                "feature width {} does not match sample shape of {}",
                features.ncols(),
                shape.len()
            )));
        }
        let ids = (0..labels.len()).collect();
        Ok(Dataset {
            shape,
            features,
            labels,
            ids,
            class_names: None,
        })
    }

    pub fn empty(shape: SampleShape) -> Self {
        Dataset {
            shape,
            features: Array2::zeros((0, shape.len())),
            labels: Vec::new(),
            ids: Vec::new(),
            class_names: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, keeping their original ids.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            shape: self.shape,
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Row positions of every sample of `class`, in dataset order.
    pub fn positions_of(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Samples whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.subset(&idx)
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts::from_labels(self.labels.iter().copied())
    }

    /// Per-class counts keyed by class name (or label when unnamed).
    pub fn count_manifest(&self) -> BTreeMap<String, usize> {
        self.counts()
            .iter()
            .map(|(c, n)| (self.class_name(c), n))
            .collect()
    }

    pub fn class_name(&self, class: usize) -> String {
        self.class_names
            .as_ref()
            .and_then(|names| names.get(class).cloned())
            .unwrap_or_else(|| class.to_string())
    }
}
