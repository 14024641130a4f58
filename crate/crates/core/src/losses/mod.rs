//! Loss components and the two alternating objectives.
//!
//! The free functions here take probabilities or similarities directly and
//! return scalars. The `*_grad` variants return the gradient with respect to
//! logits or similarities as well; [`composite`] chains them through the model.

mod composite;

pub use composite::{
    auxiliary_loss, classification_loss, composite_new, composite_old, evaluate, Batch,
    LossBreakdown, Objective,
};

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to this value inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `Σp = 1` for distributions passed to the distillation loss.
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// Hyperparameters of the classification, auxiliary, distillation and margin
/// terms for both objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Auxiliary weight in the new-class objective.
    pub lambda1: f64,
    /// Distillation weight in the new-class objective.
    pub lambda2: f64,
    /// Margin weight in the new-class objective.
    pub lambda3: f64,
    /// Distillation weight in the old-class objective.
    pub lambda4: f64,
    /// Margin weight in the old-class objective.
    pub lambda5: f64,
    pub beta_new: f64,
    pub gamma_new: f64,
    pub beta_old: f64,
    pub gamma_old: f64,
    pub margin: f64,
    pub top_k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
            beta_new: 0.9,
            gamma_new: 1.0,
            beta_old: 0.99,
            gamma_old: 2.0,
            margin: 0.5,
            top_k: 2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    format!("loss.{name}"),
                    "must be a finite value >= 0",
                ));
            }
        }
        for (name, beta) in [("beta_new", self.beta_new), ("beta_old", self.beta_old)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(format!("loss.{name}"), "must lie in [0, 1)"));
            }
        }
        for (name, gamma) in [("gamma_new", self.gamma_new), ("gamma_old", self.gamma_old)] {
            if !(gamma >= 0.0 && gamma.is_finite()) {
                return Err(Error::config(format!("loss.{name}"), "must be >= 0"));
            }
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config("loss.margin", "must be >= 0"));
        }
        if self.top_k == 0 {
            return Err(Error::config("loss.top_k", "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-class sample counts over a training set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(BTreeMap<usize, usize>);

impl ClassCounts {
    pub fn from_labels(labels: impl IntoIterator<Item = usize>) -> Self {
        let mut map = BTreeMap::new();
        for l in labels {
            *map.entry(l).or_insert(0) += 1;
        }
        ClassCounts(map)
    }

    pub fn get(&self, class: usize) -> Result<usize> {
        match self.0.get(&class) {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(Error::Contract(format!(
                "no sample count for class {class}"
            ))),
        }
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().map(|(&c, &n)| (c, n))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(usize, usize)> for ClassCounts {
    fn from_iter<I: IntoIterator<Item = (usize, usize)>>(iter: I) -> Self {
        ClassCounts(iter.into_iter().collect())
    }
}

/// `(1 - β) / (1 - βⁿ)`; equals 1 at `β = 0`.
pub fn class_balanced_weight(beta: f64, n: usize) -> f64 {
    if beta == 0.0 {
        return 1.0;
    }
    (1.0 - beta) / (1.0 - beta.powi(n as i32))
}

fn focal_term(p: f64, gamma: f64) -> f64 {
    let q = (1.0 - p).max(0.0);
    let modulator = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    -modulator * p.max(PROB_FLOOR).ln()
}

/// Class-balanced focal loss averaged over samples.
///
/// `p_true[i]` is the predicted probability of sample `i`'s true class and
/// `labels[i]` its label, used to look up `n_y` in `counts`.
pub fn class_balanced_focal(
    p_true: &[f64],
    labels: &[usize],
    counts: &ClassCounts,
    beta: f64,
    gamma: f64,
) -> Result<f64> {
    if p_true.len() != labels.len() {
        return Err(Error::Contract(
            "one label is needed per probability".into(),
        ));
    }
    if p_true.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (&p, &y) in p_true.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract(format!("probability {p} outside [0, 1]")));
        }
        total += class_balanced_weight(beta, counts.get(y)?) * focal_term(p, gamma);
    }
    Ok(total / p_true.len() as f64)
}

/// Numerically stable row softmax of logits.
pub fn softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    crate::model::softmax_rows(logits, 1.0)
}

/// Weighted focal loss on logits; returns the batch mean and `d loss / d logits`.
///
/// `weights[i]` is the class-balanced factor of sample `i`.
pub fn focal_grad(
    logits: ArrayView2<'_, f64>,
    targets: &[usize],
    weights: &[f64],
    gamma: f64,
) -> (f64, Array2<f64>) {
    let probs = softmax(logits);
    let batch = logits.nrows().max(1) as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
        let p = probs[[i, y]];
        total += w * focal_term(p, gamma);
        let q = (1.0 - p).max(0.0);
        // d/dp of -(1-p)^γ log p, multiplied by p.
        let log_part = if p > PROB_FLOOR {
            if gamma == 0.0 {
                1.0
            } else {
                q.powf(gamma)
            }
        } else {
            0.0
        };
        let mod_part = if gamma == 0.0 || q == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * p * p.max(PROB_FLOOR).ln()
        };
        let a = -w * (log_part - mod_part) / batch;
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let delta = if j == y { 1.0 } else { 0.0 };
            *g = a * (delta - probs[[i, j]]);
        }
    }
    (total / batch, grad)
}

fn check_distribution(p: ArrayView1<'_, f64>, what: &str) -> Result<()> {
    let sum = p.sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|&v| v < 0.0) {
        return Err(Error::Contract(format!(
            "{what} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// Old-class KL distillation scaled by the number of old classes, averaged
/// over the batch. Rows of both inputs are distributions over the old classes.
pub fn distillation_loss(
    old_probs: ArrayView2<'_, f64>,
    new_probs: ArrayView2<'_, f64>,
    n_old: usize,
) -> Result<f64> {
    if old_probs.dim() != new_probs.dim() {
        return Err(Error::Contract(format!(
            "teacher {:?} and student {:?} shapes differ",
            old_probs.dim(),
            new_probs.dim()
        )));
    }
    if old_probs.nrows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, q) in old_probs
        .axis_iter(Axis(0))
        .zip(new_probs.axis_iter(Axis(0)))
    {
        check_distribution(p, "teacher distribution")?;
        check_distribution(q, "student distribution")?;
        total += kl(p, q);
    }
    Ok(n_old as f64 * total / old_probs.nrows() as f64)
}

fn kl(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> f64 {
    p.iter()
        .zip(q.iter())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

/// Distillation on student logits restricted to old classes. The student
/// distribution is the softmax of those logits.
pub fn distillation_grad(
    teacher: ArrayView2<'_, f64>,
    student_logits: ArrayView2<'_, f64>,
    n_old: usize,
) -> (f64, Array2<f64>) {
    let q = softmax(student_logits);
    let batch = teacher.nrows().max(1) as f64;
    let scale = n_old as f64 / batch;
    let total: f64 = teacher
        .axis_iter(Axis(0))
        .zip(q.axis_iter(Axis(0)))
        .map(|(p, qi)| kl(p, qi))
        .sum();
    let grad = (&q - &teacher) * scale;
    (total * scale, grad)
}

/// Indices of the `k` new classes with the highest similarity, ties to the
/// lowest index.
pub fn top_k_new(sims: ArrayView1<'_, f64>, new_classes: &[usize], k: usize) -> Vec<usize> {
    let mut ranked: Vec<usize> = new_classes.to_vec();
    ranked.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    ranked.truncate(k);
    ranked
}

/// Hinge loss pushing the true old class above the top-`k` new classes by
/// margin `m`, for one memory sample.
pub fn margin_loss(
    sims: ArrayView1<'_, f64>,
    true_class: usize,
    new_classes: &[usize],
    m: f64,
    k: usize,
) -> Result<f64> {
    if new_classes.contains(&true_class) {
        return Err(Error::Contract(format!(
            "margin loss applies to memory samples; class {true_class} is new"
        )));
    }
    if k == 0 || k > new_classes.len() {
        return Err(Error::Contract(format!(
            "top-k of {k} needs between 1 and {} new classes",
            new_classes.len()
        )));
    }
    let gt = sims[true_class];
    Ok(top_k_new(sims, new_classes, k)
        .into_iter()
        .map(|i| (sims[i] - gt + m).max(0.0))
        .sum())
}

/// Batched margin loss over the memory samples of a batch, with the
/// gradient w.r.t. the similarity matrix. `k` is clamped to the number of
/// new classes.
pub fn margin_grad(
    sims: ArrayView2<'_, f64>,
    targets: &[usize],
    is_memory: &[bool],
    new_classes: &[usize],
    m: f64,
    k: usize,
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(sims.raw_dim());
    let n_mem = is_memory.iter().filter(|&&b| b).count();
    if n_mem == 0 || new_classes.is_empty() {
        return (0.0, grad);
    }
    let k = k.min(new_classes.len());
    let scale = 1.0 / n_mem as f64;
    let mut total = 0.0;
    for (i, (&y, _)) in targets
        .iter()
        .zip(is_memory)
        .enumerate()
        .filter(|(_, (_, &mem))| mem)
    {
        let row = sims.row(i);
        let gt = row[y];
        for j in top_k_new(row, new_classes, k) {
            let hinge = row[j] - gt + m;
            if hinge > 0.0 {
                total += hinge;
                grad[[i, j]] += scale;
                grad[[i, y]] -= scale;
            }
        }
    }
    (total * scale, grad)
}
