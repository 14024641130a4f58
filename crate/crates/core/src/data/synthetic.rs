use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, SampleShape};
use crate::error::{Error, Result};

/// Description of a synthetic class-imbalanced dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkewSpec {
    /// Fraction of samples per class; must sum to 1.
    pub class_proportions: Vec<f64>,
    pub total_samples: usize,
    /// Vector length when `image_shape` is absent.
    pub feature_dim: usize,
    /// `[channels, height, width]` to generate textured images instead.
    pub image_shape: Option<[usize; 3]>,
    /// Within-class noise relative to the spacing of class centers. Larger
    /// values mean more overlap between classes.
    pub difficulty: f64,
    /// Gaussian sub-clusters per class.
    pub modes_per_class: usize,
    /// Smallest admissible class size (memory budget + 1).
    pub min_per_class: usize,
}

impl Default for SkewSpec {
    fn default() -> Self {
        SkewSpec {
            class_proportions: vec![0.40, 0.20, 0.12, 0.08, 0.07, 0.06, 0.04, 0.03],
            total_samples: 4000,
            feature_dim: 16,
            image_shape: None,
            difficulty: 1.0,
            modes_per_class: 2,
            min_per_class: 21,
        }
    }
}

impl SkewSpec {
    pub fn num_classes(&self) -> usize {
        self.class_proportions.len()
    }

    pub fn shape(&self) -> SampleShape {
        match self.image_shape {
            Some([channels, height, width]) => SampleShape::Image {
                channels,
                height,
                width,
            },
            None => SampleShape::Vector {
                len: self.feature_dim,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_proportions.is_empty() {
            return Err(Error::Spec(
                "at least one class proportion is required".into(),
            ));
        }
        if self
            .class_proportions
            .iter()
            .any(|&p| !(p > 0.0 && p.is_finite()))
        {
            return Err(Error::Spec("class proportions must be positive".into()));
        }
        let sum: f64 = self.class_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Spec(format!(
                "class proportions sum to {sum}, not 1"
            )));
        }
        if self.shape().is_empty() {
            return Err(Error::Spec("samples must have at least one feature".into()));
        }
        if !(self.difficulty >= 0.0 && self.difficulty.is_finite()) {
            return Err(Error::Spec("difficulty must be >= 0".into()));
        }
        if self.modes_per_class == 0 {
            return Err(Error::Spec("modes_per_class must be >= 1".into()));
        }
        Ok(())
    }
}

/// Rounds `proportions * total` to integers that sum to `total`
/// (largest-remainder method, ties to the lower class index).
pub fn allocate_counts(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws a labeled dataset whose class sizes follow `spec.class_proportions`.
///
/// Vector samples come from per-class Gaussian mixtures; image samples are
/// oriented sinusoidal gratings with per-class frequency and orientation.
pub fn generate_skewed(spec: &SkewSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let counts = allocate_counts(&spec.class_proportions, spec.total_samples);
    if let Some((class, &n)) = counts
        .iter()
        .enumerate()
        .find(|(_, &n)| n < spec.min_per_class)
    {
        return Err(Error::Spec(format!(
            "class {class} receives {n} samples, fewer than the required {}",
            spec.min_per_class
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = spec.shape();
    let dim = shape.len();
    let total: usize = counts.iter().sum();
    let mut features = Array2::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);

    let mut row = 0;
    match shape {
        SampleShape::Vector { .. } => {
            let modes = class_modes(spec.num_classes(), spec.modes_per_class, dim, &mut rng);
            let noise = Normal::new(0.0, spec.difficulty).expect("finite std");
            for (class, &n) in counts.iter().enumerate() {
                for i in 0..n {
                    let centre = &modes[class][i % spec.modes_per_class];
                    for (j, v) in features.row_mut(row).iter_mut().enumerate() {
                        *v = centre[j] + noise.sample(&mut rng);
                    }
                    labels.push(class);
                    row += 1;
                }
            }
        }
        SampleShape::Image {
            channels,
            height,
            width,
        } => {
            let classes = spec.num_classes();
            let noise = Normal::new(0.0, spec.difficulty).expect("finite std");
            for (class, &n) in counts.iter().enumerate() {
                let angle = std::f64::consts::PI * class as f64 / classes as f64;
                let freq = 1.0 + (class % 3) as f64;
                for _ in 0..n {
                    let phase = rng.random::<f64>() * std::f64::consts::TAU;
                    let mut out = features.row_mut(row);
                    for c in 0..channels {
                        let gain = 1.0 - 0.2 * c as f64;
                        for y in 0..height {
                            for x in 0..width {
                                let u = x as f64 / width as f64;
                                let v = y as f64 / height as f64;
                                let proj = u * angle.cos() + v * angle.sin();
                                let wave = (std::f64::consts::TAU * freq * proj + phase).sin();
                                out[(c * height + y) * width + x] =
                                    gain * wave + noise.sample(&mut rng);
                            }
                        }
                    }
                    labels.push(class);
                    row += 1;
                }
            }
        }
    }

    // Interleave classes so dataset order carries no label information.
    let mut perm: Vec<usize> = (0..total).collect();
    perm.shuffle(&mut rng);
    let features = features.select(ndarray::Axis(0), &perm);
    let labels = perm.iter().map(|&i| labels[i]).collect();
    Dataset::new(shape, features, labels)
}

/// Mode centres: each class gets a random anchor; its modes scatter around it.
fn class_modes<R: Rng>(
    classes: usize,
    modes: usize,
    dim: usize,
    rng: &mut R,
) -> Vec<Vec<Vec<f64>>> {
    let radius = 3.0;
    (0..classes)
        .map(|_| {
            let anchor = random_direction(dim, rng);
            (0..modes)
                .map(|_| {
                    let jitter = random_direction(dim, rng);
                    anchor
                        .iter()
                        .zip(&jitter)
                        .map(|(a, j)| radius * a + 0.5 * radius * j)
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn random_direction<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}
