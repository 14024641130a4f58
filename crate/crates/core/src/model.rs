//! The dynamically expanding network.
//!
//! A shared low-level extractor feeds one high-level branch per incremental
//! step. Branch outputs are concatenated into `z = [h_1 | h_2 | ... | h_t]`
//! and scored by a cosine classifier whose weight matrix grows by rows (new
//! classes) and by columns (new branch features) at every expansion:
//!
//! ```text
//!              old cols        new cols
//!            +-------------+-----------+
//!  old rows  |  W_{t-1}    |           |
//!            +-------------+    U_t    |
//!  new rows  |    V_t      |           |
//!            +-------------+-----------+
//! ```

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{backward_stack, forward_stack, Activation, Dense, DenseGrad, LayerCache};

/// Lower bound applied to vector norms inside cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BranchInit {
    /// New branch starts as a copy of the previous one.
    #[default]
    WarmStart,
    Random,
}

/// Layout of the backbone and where it splits into low/high level parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    /// Flattened input length (`c*h*w` for images).
    pub input_dim: usize,
    /// Hidden layer widths of the whole backbone, low-level first.
    pub hidden: Vec<usize>,
    /// Output width `d` of each high-level branch.
    pub feature_dim: usize,
    /// Number of hidden layers owned by the shared low-level extractor.
    pub split_at: usize,
    pub activation: Activation,
    pub branch_init: BranchInit,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            input_dim: 16,
            hidden: vec![64, 64],
            feature_dim: 16,
            split_at: 1,
            activation: Activation::Relu,
            branch_init: BranchInit::WarmStart,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("model.feature_dim", "must be positive"));
        }
        if self.split_at > self.hidden.len() {
            return Err(Error::config(
                "model.split_at",
                format!(
                    "{} exceeds {} hidden layers",
                    self.split_at,
                    self.hidden.len()
                ),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config(
                "model.hidden",
                "layer widths must be positive",
            ));
        }
        Ok(())
    }

    fn low_output_dim(&self) -> usize {
        if self.split_at == 0 {
            self.input_dim
        } else {
            self.hidden[self.split_at - 1]
        }
    }

    fn build_low<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Dense> {
        let mut inputs = self.input_dim;
        self.hidden[..self.split_at]
            .iter()
            .map(|&w| {
                let layer = Dense::init(inputs, w, Some(self.activation), rng);
                inputs = w;
                layer
            })
            .collect()
    }

    fn build_branch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Dense> {
        let mut inputs = self.low_output_dim();
        let mut layers: Vec<Dense> = self.hidden[self.split_at..]
            .iter()
            .map(|&w| {
                let layer = Dense::init(inputs, w, Some(self.activation), rng);
                inputs = w;
                layer
            })
            .collect();
        layers.push(Dense::init(inputs, self.feature_dim, None, rng));
        layers
    }
}

/// Which parameters an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Step 1: every parameter trains.
    Initial,
    /// New-class objective: newest branch, `U_t`, `V_t`, temperature.
    New,
    /// Old-class objective: `V_t` and temperature only.
    Old,
    /// Everything trainable at any step (reference learners).
    Plastic,
    /// Everything frozen.
    Inference,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Phase::Initial => "initial",
            Phase::New => "new",
            Phase::Old => "old",
            Phase::Plastic => "plastic",
            Phase::Inference => "inference",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Phase::Initial,
            Phase::New,
            Phase::Old,
            Phase::Plastic,
            Phase::Inference,
        ]
        .into_iter()
        .find(|p| p.to_string() == s)
        .ok_or_else(|| Error::Usage(format!("unknown phase '{s}'")))
    }
}

/// Unified cosine classifier with a learnable temperature `η = exp(ρ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierState {
    pub(crate) weights: Array2<f64>,
    pub(crate) rho: f64,
    /// Step (1-based) at which each row was created.
    pub(crate) row_steps: Vec<usize>,
}

impl ClassifierState {
    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn temperature(&self) -> f64 {
        self.rho.exp()
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn cols(&self) -> usize {
        self.weights.ncols()
    }

    pub fn row_steps(&self) -> &[usize] {
        &self.row_steps
    }
}

/// Bookkeeping of which classifier rows and columns belong to which step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMap {
    pub step: usize,
    pub feature_dim: usize,
    /// Creation step of each classifier row.
    pub row_steps: Vec<usize>,
    /// Creation step of each branch; branch `b` owns columns `b*d..(b+1)*d`.
    pub branch_steps: Vec<usize>,
}

impl BlockMap {
    pub fn old_rows(&self) -> Range<usize> {
        let n = self.row_steps.iter().filter(|&&s| s < self.step).count();
        0..n
    }

    pub fn new_rows(&self) -> Range<usize> {
        self.old_rows().end..self.row_steps.len()
    }

    pub fn newest_cols(&self) -> Range<usize> {
        let b = self.branch_steps.len() - 1;
        b * self.feature_dim..(b + 1) * self.feature_dim
    }

    /// True when the current step added a branch.
    pub fn expanded_this_step(&self) -> bool {
        self.step > 1 && self.branch_steps.last() == Some(&self.step)
    }

    /// Columns inherited from earlier steps (`W_{t-1}` / `V_t` columns).
    pub fn old_cols(&self) -> Range<usize> {
        let old_branches = self.branch_steps.iter().filter(|&&s| s < self.step).count();
        0..old_branches * self.feature_dim
    }
}

/// Identifies one parameter tensor of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorId {
    LowWeight(usize),
    LowBias(usize),
    BranchWeight(usize, usize),
    BranchBias(usize, usize),
    Classifier,
    Temperature,
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorId::LowWeight(l) => write!(f, "low.{l}.weight"),
            TensorId::LowBias(l) => write!(f, "low.{l}.bias"),
            TensorId::BranchWeight(b, l) => write!(f, "branch.{b}.{l}.weight"),
            TensorId::BranchBias(b, l) => write!(f, "branch.{b}.{l}.bias"),
            TensorId::Classifier => f.write_str("classifier.weight"),
            TensorId::Temperature => f.write_str("classifier.rho"),
        }
    }
}

/// Trainability of the entries of one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    All,
    Nothing,
    Entries(Vec<bool>),
}

impl Trainable {
    pub fn get(&self, idx: usize) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Entries(m) => m[idx],
        }
    }

    pub fn any(&self) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Entries(m) => m.iter().any(|&b| b),
        }
    }
}

/// Parameter groups that can be serialized for freeze checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// `θ_L`, branches from earlier steps and the `W_{t-1}` block.
    Previous,
    /// Newest branch and the `U_t` block.
    NewFeatures,
}

/// Gradient buffers shaped like the model parameters.
#[derive(Debug, Clone)]
pub struct Grads {
    pub low: Vec<DenseGrad>,
    pub branches: Vec<Vec<DenseGrad>>,
    pub classifier: Array2<f64>,
    pub rho: f64,
}

impl Grads {
    pub fn zeros_like(model: &ExpandingModel) -> Self {
        Grads {
            low: model.low.iter().map(DenseGrad::zeros_like).collect(),
            branches: model
                .branches
                .iter()
                .map(|b| b.iter().map(DenseGrad::zeros_like).collect())
                .collect(),
            classifier: Array2::zeros(model.classifier.weights.raw_dim()),
            rho: 0.0,
        }
    }

    pub fn tensor(&self, id: TensorId) -> &[f64] {
        match id {
            TensorId::LowWeight(l) => self.low[l].weight.as_slice().expect("contiguous"),
            TensorId::LowBias(l) => self.low[l].bias.as_slice().expect("contiguous"),
            TensorId::BranchWeight(b, l) => {
                self.branches[b][l].weight.as_slice().expect("contiguous")
            }
            TensorId::BranchBias(b, l) => self.branches[b][l].bias.as_slice().expect("contiguous"),
            TensorId::Classifier => self.classifier.as_slice().expect("contiguous"),
            TensorId::Temperature => std::slice::from_ref(&self.rho),
        }
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut [f64] {
        match id {
            TensorId::LowWeight(l) => self.low[l].weight.as_slice_mut().expect("contiguous"),
            TensorId::LowBias(l) => self.low[l].bias.as_slice_mut().expect("contiguous"),
            TensorId::BranchWeight(b, l) => self.branches[b][l]
                .weight
                .as_slice_mut()
                .expect("contiguous"),
            TensorId::BranchBias(b, l) => {
                self.branches[b][l].bias.as_slice_mut().expect("contiguous")
            }
            TensorId::Classifier => self.classifier.as_slice_mut().expect("contiguous"),
            TensorId::Temperature => std::slice::from_mut(&mut self.rho),
        }
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self, ids: &[TensorId]) -> f64 {
        ids.iter()
            .flat_map(|&id| self.tensor(id).iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Cached normalized operands of a batched cosine similarity.
#[derive(Debug, Clone)]
pub(crate) struct CosineCache {
    a_hat: Array2<f64>,
    b_hat: Array2<f64>,
    a_norm: Array1<f64>,
    b_norm: Array1<f64>,
    pub(crate) cos: Array2<f64>,
}

fn normalize_rows(m: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_EPS));
    let mut hat = m.to_owned();
    for (mut row, &n) in hat.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        row /= n;
    }
    (hat, norms)
}

/// `cos[i, j] = cos(a_i, b_j)`.
pub(crate) fn cosine_forward(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> CosineCache {
    let (a_hat, a_norm) = normalize_rows(a);
    let (b_hat, b_norm) = normalize_rows(b);
    let cos = a_hat.dot(&b_hat.t());
    CosineCache {
        a_hat,
        b_hat,
        a_norm,
        b_norm,
        cos,
    }
}

/// Gradients of a scalar w.r.t. both operands given `d loss / d cos`.
pub(crate) fn cosine_backward(cache: &CosineCache, g: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let project = |d_hat: Array2<f64>, hat: &Array2<f64>, norm: &Array1<f64>| {
        let mut out = d_hat;
        for ((mut row, h), &n) in out
            .axis_iter_mut(Axis(0))
            .zip(hat.axis_iter(Axis(0)))
            .zip(norm.iter())
        {
            let along = row.dot(&h);
            row.scaled_add(-along, &h);
            row /= n;
        }
        out
    };
    let da_hat = g.dot(&cache.b_hat);
    let db_hat = g.t().dot(&cache.a_hat);
    (
        project(da_hat, &cache.a_hat, &cache.a_norm),
        project(db_hat, &cache.b_hat, &cache.b_norm),
    )
}

/// Row-wise softmax of `scale * sims`.
pub(crate) fn softmax_rows(sims: ArrayView2<'_, f64>, scale: f64) -> Array2<f64> {
    let mut out = sims.mapv(|v| v * scale);
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Forward pass state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    low_caches: Vec<LayerCache>,
    branch_caches: Vec<Option<Vec<LayerCache>>>,
    /// Concatenated branch features, `batch x t*d`.
    pub z: Array2<f64>,
    pub(crate) cls: CosineCache,
    pub(crate) aux: Option<CosineCache>,
    pub eta: f64,
}

impl Forward {
    /// `cos(z, w_i)` for every sample and class.
    pub fn cosine(&self) -> ArrayView2<'_, f64> {
        self.cls.cos.view()
    }

    /// `cos(h_t, u_{t,i})`, present once the model has more than one step.
    pub fn aux_cosine(&self) -> Option<ArrayView2<'_, f64>> {
        self.aux.as_ref().map(|c| c.cos.view())
    }
}

/// The expanding feature extractor plus unified classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandingModel {
    pub(crate) spec: BackboneSpec,
    pub(crate) low: Vec<Dense>,
    pub(crate) branches: Vec<Vec<Dense>>,
    pub(crate) branch_steps: Vec<usize>,
    pub(crate) classifier: ClassifierState,
    pub(crate) class_groups: Vec<Vec<usize>>,
    pub(crate) phase: Phase,
}

fn check_new_classes(existing: &[Vec<usize>], new_classes: &[usize]) -> Result<()> {
    if new_classes.is_empty() {
        return Err(Error::StreamContract(
            "a step must introduce at least one class".into(),
        ));
    }
    let mut seen: HashSet<usize> = existing.iter().flatten().copied().collect();
    for &c in new_classes {
        if !seen.insert(c) {
            return Err(Error::StreamContract(format!(
                "class {c} was already seen or is repeated"
            )));
        }
    }
    Ok(())
}

fn random_block<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

impl ExpandingModel {
    /// Builds a step-1 model for the initial class group.
    pub fn new<R: Rng + ?Sized>(
        spec: BackboneSpec,
        initial_classes: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        check_new_classes(&[], initial_classes)?;
        let low = spec.build_low(rng);
        let branch = spec.build_branch(rng);
        let d = spec.feature_dim;
        let weights = random_block(initial_classes.len(), d, Self::row_init_std(d), rng);
        Ok(ExpandingModel {
            low,
            branches: vec![branch],
            branch_steps: vec![1],
            classifier: ClassifierState {
                weights,
                rho: 0.0,
                row_steps: vec![1; initial_classes.len()],
            },
            class_groups: vec![initial_classes.to_vec()],
            phase: Phase::Initial,
            spec,
        })
    }

    fn row_init_std(d: usize) -> f64 {
        1.0 / (d as f64).sqrt()
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn step(&self) -> usize {
        self.class_groups.len()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn feature_width(&self) -> usize {
        self.branches.len() * self.spec.feature_dim
    }

    pub fn classifier(&self) -> &ClassifierState {
        &self.classifier
    }

    pub fn class_groups(&self) -> &[Vec<usize>] {
        &self.class_groups
    }

    /// Seen classes in classifier row order.
    pub fn classes(&self) -> Vec<usize> {
        self.class_groups.iter().flatten().copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.rows()
    }

    pub fn row_of(&self, class: usize) -> Option<usize> {
        self.class_groups.iter().flatten().position(|&c| c == class)
    }

    pub fn block_map(&self) -> BlockMap {
        BlockMap {
            step: self.step(),
            feature_dim: self.spec.feature_dim,
            row_steps: self.classifier.row_steps.clone(),
            branch_steps: self.branch_steps.clone(),
        }
    }

    /// Adds a branch for `new_classes` and grows the classifier by rows and
    /// columns. All earlier parameters are left bit-for-bit untouched.
    pub fn expand<R: Rng + ?Sized>(&mut self, new_classes: &[usize], rng: &mut R) -> Result<()> {
        check_new_classes(&self.class_groups, new_classes)?;
        let branch = match self.spec.branch_init {
            BranchInit::WarmStart => self.branches.last().expect("at least one branch").clone(),
            BranchInit::Random => self.spec.build_branch(rng),
        };
        let step = self.step() + 1;
        let d = self.spec.feature_dim;
        let std = Self::row_init_std(d);
        let (old_rows, old_cols) = self.classifier.weights.dim();
        let new_rows = old_rows + new_classes.len();

        let mut weights = Array2::zeros((new_rows, old_cols + d));
        weights
            .slice_mut(s![..old_rows, ..old_cols])
            .assign(&self.classifier.weights);
        let v = random_block(new_classes.len(), old_cols, std, rng);
        weights.slice_mut(s![old_rows.., ..old_cols]).assign(&v);
        let u = random_block(new_rows, d, std, rng);
        weights.slice_mut(s![.., old_cols..]).assign(&u);

        self.branches.push(branch);
        self.branch_steps.push(step);
        self.classifier.weights = weights;
        self.classifier
            .row_steps
            .extend(std::iter::repeat_n(step, new_classes.len()));
        self.class_groups.push(new_classes.to_vec());
        self.phase = Phase::New;
        Ok(())
    }

    /// Grows the classifier by rows only, keeping the branch set fixed.
    pub fn extend_classes<R: Rng + ?Sized>(
        &mut self,
        new_classes: &[usize],
        rng: &mut R,
    ) -> Result<()> {
        check_new_classes(&self.class_groups, new_classes)?;
        let step = self.step() + 1;
        let (old_rows, cols) = self.classifier.weights.dim();
        let fresh = random_block(
            new_classes.len(),
            cols,
            Self::row_init_std(self.spec.feature_dim),
            rng,
        );
        let mut weights = Array2::zeros((old_rows + new_classes.len(), cols));
        weights
            .slice_mut(s![..old_rows, ..])
            .assign(&self.classifier.weights);
        weights.slice_mut(s![old_rows.., ..]).assign(&fresh);
        self.classifier.weights = weights;
        self.classifier
            .row_steps
            .extend(std::iter::repeat_n(step, new_classes.len()));
        self.class_groups.push(new_classes.to_vec());
        self.phase = Phase::New;
        Ok(())
    }

    pub fn set_phase(&mut self, phase: Phase) -> Result<()> {
        match phase {
            Phase::New | Phase::Old if self.step() < 2 => {
                return Err(Error::IllegalState(format!(
                    "phase `{phase}` needs an incremental step, model is at step 1"
                )))
            }
            Phase::Initial if self.step() != 1 => {
                return Err(Error::IllegalState(format!(
                    "initial phase only exists at step 1, model is at step {}",
                    self.step()
                )))
            }
            _ => {}
        }
        self.phase = phase;
        Ok(())
    }

    /// Frozen copy used as the distillation teacher for the next step.
    pub fn snapshot_for_distillation(&self) -> FrozenModel {
        let mut copy = self.clone();
        copy.phase = Phase::Inference;
        FrozenModel(Arc::new(copy))
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::InputContract(format!(
                "expected {} input features, got {}",
                self.spec.input_dim,
                x.ncols()
            )));
        }
        if self.branches.is_empty() {
            return Err(Error::IllegalState("model has no branches".into()));
        }
        Ok(())
    }

    /// Concatenated branch outputs `z_t`, `batch x t*d`.
    pub fn forward_features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let low = forward_stack(&self.low, x, None);
        let d = self.spec.feature_dim;
        let mut z = Array2::zeros((x.nrows(), self.feature_width()));
        for (b, branch) in self.branches.iter().enumerate() {
            let h = forward_stack(branch, low.view(), None);
            z.slice_mut(s![.., b * d..(b + 1) * d]).assign(&h);
        }
        Ok(z)
    }

    fn check_nonzero(v: ArrayView1<'_, f64>, what: &str) -> Result<()> {
        if v.iter().all(|&x| x == 0.0) {
            return Err(Error::DegenerateSimilarity(format!("{what} has zero norm")));
        }
        Ok(())
    }

    /// Cosine classifier probabilities for one feature vector.
    pub fn class_probabilities(&self, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if z.len() != self.feature_width() {
            return Err(Error::InputContract(format!(
                "feature vector has length {}, classifier expects {}",
                z.len(),
                self.feature_width()
            )));
        }
        Self::check_nonzero(z, "feature vector")?;
        for (i, row) in self.classifier.weights.axis_iter(Axis(0)).enumerate() {
            Self::check_nonzero(row, &format!("classifier row {i}"))?;
        }
        let cache = cosine_forward(z.insert_axis(Axis(0)), self.classifier.weights.view());
        Ok(
            softmax_rows(cache.cos.view(), self.classifier.temperature())
                .row(0)
                .to_owned(),
        )
    }

    /// Softmax over `cos(h_t, u_{t,i})` without temperature.
    pub fn aux_probabilities(&self, h: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if self.step() < 2 {
            return Err(Error::IllegalState(
                "auxiliary probabilities need an incremental step".into(),
            ));
        }
        let d = self.spec.feature_dim;
        if h.len() != d {
            return Err(Error::InputContract(format!(
                "branch feature has length {}, expected {d}",
                h.len()
            )));
        }
        Self::check_nonzero(h, "branch feature")?;
        let u = self.u_block();
        for (i, row) in u.axis_iter(Axis(0)).enumerate() {
            Self::check_nonzero(row, &format!("U row {i}"))?;
        }
        let cache = cosine_forward(h.insert_axis(Axis(0)), u);
        Ok(softmax_rows(cache.cos.view(), 1.0).row(0).to_owned())
    }

    /// Columns of the classifier that score the newest branch.
    pub fn u_block(&self) -> ArrayView2<'_, f64> {
        let cols = self.block_map().newest_cols();
        self.classifier.weights.slice(s![.., cols])
    }

    /// Probabilities over seen classes for a batch of raw inputs.
    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let z = self.forward_features(x)?;
        let cache = cosine_forward(z.view(), self.classifier.weights.view());
        Ok(softmax_rows(
            cache.cos.view(),
            self.classifier.temperature(),
        ))
    }

    /// Predicted class labels (argmax over seen classes).
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let z = self.forward_features(x)?;
        let cache = cosine_forward(z.view(), self.classifier.weights.view());
        let classes = self.classes();
        Ok(cache
            .cos
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                classes[best]
            })
            .collect())
    }

    /// Batched forward pass retaining what the current phase needs for backward.
    pub fn forward_train(&self, x: ArrayView2<'_, f64>) -> Result<Forward> {
        self.check_input(x)?;
        let low_trainable = self.low_trainable();
        let mut low_caches = Vec::new();
        let low = forward_stack(
            &self.low,
            x,
            if low_trainable {
                Some(&mut low_caches)
            } else {
                None
            },
        );
        let d = self.spec.feature_dim;
        let mut z = Array2::zeros((x.nrows(), self.feature_width()));
        let mut branch_caches = Vec::with_capacity(self.branches.len());
        for (b, branch) in self.branches.iter().enumerate() {
            let mut caches = Vec::new();
            let keep = self.branch_trainable(b);
            let h = forward_stack(
                branch,
                low.view(),
                if keep { Some(&mut caches) } else { None },
            );
            z.slice_mut(s![.., b * d..(b + 1) * d]).assign(&h);
            branch_caches.push(keep.then_some(caches));
        }
        let cls = cosine_forward(z.view(), self.classifier.weights.view());
        let aux = (self.step() >= 2).then(|| {
            let cols = self.block_map().newest_cols();
            cosine_forward(
                z.slice(s![.., cols.clone()]),
                self.classifier.weights.slice(s![.., cols]),
            )
        });
        Ok(Forward {
            low_caches,
            branch_caches,
            z,
            cls,
            aux,
            eta: self.classifier.temperature(),
        })
    }

    /// Gradients for the trainable set of the current phase. Frozen entries
    /// come back as exact zeros.
    pub fn backward(
        &self,
        fwd: &Forward,
        d_cos: &Array2<f64>,
        d_aux_cos: Option<&Array2<f64>>,
        d_eta: f64,
    ) -> Grads {
        let mut grads = Grads::zeros_like(self);
        let (mut dz, mut dw) = cosine_backward(&fwd.cls, d_cos);
        if let (Some(g), Some(cache)) = (d_aux_cos, fwd.aux.as_ref()) {
            let cols = self.block_map().newest_cols();
            let (dh, du) = cosine_backward(cache, g);
            let mut z_block = dz.slice_mut(s![.., cols.clone()]);
            z_block += &dh;
            let mut w_block = dw.slice_mut(s![.., cols]);
            w_block += &du;
        }
        match self.trainable(TensorId::Classifier) {
            Trainable::All => grads.classifier = dw,
            Trainable::Nothing => {}
            Trainable::Entries(mask) => {
                grads.classifier = dw;
                for (g, &m) in grads.classifier.iter_mut().zip(&mask) {
                    if !m {
                        *g = 0.0;
                    }
                }
            }
        }
        if self.trainable(TensorId::Temperature) == Trainable::All {
            grads.rho = d_eta * fwd.eta;
        }

        let d = self.spec.feature_dim;
        let low_trainable = self.low_trainable();
        let low_dim = self.spec.low_output_dim();
        let mut d_low = low_trainable.then(|| Array2::<f64>::zeros((dz.nrows(), low_dim)));
        for (b, branch) in self.branches.iter().enumerate() {
            let Some(caches) = fwd.branch_caches[b].as_ref() else {
                continue;
            };
            let dh = dz.slice(s![.., b * d..(b + 1) * d]).to_owned();
            let din = backward_stack(branch, caches, dh, &mut grads.branches[b], low_trainable);
            if let (Some(acc), Some(g)) = (d_low.as_mut(), din) {
                *acc += &g;
            }
        }
        if let Some(g) = d_low {
            if !self.low.is_empty() {
                backward_stack(&self.low, &fwd.low_caches, g, &mut grads.low, false);
            }
        }
        grads
    }

    fn low_trainable(&self) -> bool {
        matches!(self.phase, Phase::Initial | Phase::Plastic)
    }

    fn branch_trainable(&self, b: usize) -> bool {
        match self.phase {
            Phase::Initial | Phase::Plastic => true,
            Phase::New => b + 1 == self.branches.len(),
            Phase::Old | Phase::Inference => false,
        }
    }

    /// Entry-level trainability of a tensor under the current phase.
    pub fn trainable(&self, id: TensorId) -> Trainable {
        let flag = |b: bool| {
            if b {
                Trainable::All
            } else {
                Trainable::Nothing
            }
        };
        match id {
            TensorId::LowWeight(_) | TensorId::LowBias(_) => flag(self.low_trainable()),
            TensorId::BranchWeight(b, _) | TensorId::BranchBias(b, _) => {
                flag(self.branch_trainable(b))
            }
            TensorId::Temperature => flag(!matches!(self.phase, Phase::Inference)),
            TensorId::Classifier => match self.phase {
                Phase::Initial | Phase::Plastic => Trainable::All,
                Phase::Inference => Trainable::Nothing,
                Phase::New | Phase::Old => {
                    let map = self.block_map();
                    let step = map.step;
                    let newest = map.newest_cols();
                    let expanded = map.expanded_this_step();
                    let cols = self.classifier.cols();
                    let mut mask = Vec::with_capacity(self.classifier.weights.len());
                    for &row_step in &map.row_steps {
                        for c in 0..cols {
                            let in_u = newest.contains(&c);
                            let new_row = row_step == step;
                            mask.push(match self.phase {
                                Phase::New => in_u || new_row,
                                _ => new_row && (!expanded || !in_u),
                            });
                        }
                    }
                    Trainable::Entries(mask)
                }
            },
        }
    }

    /// Every parameter tensor in canonical order.
    pub fn tensor_ids(&self) -> Vec<TensorId> {
        let mut ids = Vec::new();
        for l in 0..self.low.len() {
            ids.push(TensorId::LowWeight(l));
            ids.push(TensorId::LowBias(l));
        }
        for (b, branch) in self.branches.iter().enumerate() {
            for l in 0..branch.len() {
                ids.push(TensorId::BranchWeight(b, l));
                ids.push(TensorId::BranchBias(b, l));
            }
        }
        ids.push(TensorId::Classifier);
        ids.push(TensorId::Temperature);
        ids
    }

    pub fn tensor(&self, id: TensorId) -> &[f64] {
        match id {
            TensorId::LowWeight(l) => self.low[l].weight.as_slice().expect("contiguous"),
            TensorId::LowBias(l) => self.low[l].bias.as_slice().expect("contiguous"),
            TensorId::BranchWeight(b, l) => {
                self.branches[b][l].weight.as_slice().expect("contiguous")
            }
            TensorId::BranchBias(b, l) => self.branches[b][l].bias.as_slice().expect("contiguous"),
            TensorId::Classifier => self.classifier.weights.as_slice().expect("contiguous"),
            TensorId::Temperature => std::slice::from_ref(&self.classifier.rho),
        }
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut [f64] {
        match id {
            TensorId::LowWeight(l) => self.low[l].weight.as_slice_mut().expect("contiguous"),
            TensorId::LowBias(l) => self.low[l].bias.as_slice_mut().expect("contiguous"),
            TensorId::BranchWeight(b, l) => self.branches[b][l]
                .weight
                .as_slice_mut()
                .expect("contiguous"),
            TensorId::BranchBias(b, l) => {
                self.branches[b][l].bias.as_slice_mut().expect("contiguous")
            }
            TensorId::Classifier => self.classifier.weights.as_slice_mut().expect("contiguous"),
            TensorId::Temperature => std::slice::from_mut(&mut self.classifier.rho),
        }
    }

    /// Dimensions of one parameter tensor.
    pub fn tensor_shape(&self, id: TensorId) -> Vec<usize> {
        match id {
            TensorId::LowWeight(l) => self.low[l].weight.shape().to_vec(),
            TensorId::LowBias(l) => self.low[l].bias.shape().to_vec(),
            TensorId::BranchWeight(b, l) => self.branches[b][l].weight.shape().to_vec(),
            TensorId::BranchBias(b, l) => self.branches[b][l].bias.shape().to_vec(),
            TensorId::Classifier => self.classifier.weights.shape().to_vec(),
            TensorId::Temperature => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensor_ids()
            .iter()
            .map(|&id| self.tensor(id).len())
            .sum()
    }

    /// Little-endian bytes of one parameter region, for freeze checks.
    pub fn region_bytes(&self, region: Region) -> Vec<u8> {
        let map = self.block_map();
        let step = map.step;
        let newest_branch = self.branches.len() - 1;
        let mut out = Vec::new();
        let mut push = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        let cols = self.classifier.cols();
        match region {
            Region::Previous => {
                for l in &self.low {
                    push(l.weight.as_slice().expect("contiguous"));
                    push(l.bias.as_slice().expect("contiguous"));
                }
                for (b, branch) in self.branches.iter().enumerate() {
                    if self.branch_steps[b] < step {
                        for l in branch {
                            push(l.weight.as_slice().expect("contiguous"));
                            push(l.bias.as_slice().expect("contiguous"));
                        }
                    }
                }
                let old_cols = map.old_cols();
                for r in map.old_rows() {
                    for c in old_cols.clone() {
                        push(&[self.classifier.weights[[r, c]]]);
                    }
                }
            }
            Region::NewFeatures => {
                for l in &self.branches[newest_branch] {
                    push(l.weight.as_slice().expect("contiguous"));
                    push(l.bias.as_slice().expect("contiguous"));
                }
                let newest = map.newest_cols();
                for r in 0..self.classifier.rows() {
                    for c in newest.clone() {
                        debug_assert!(c < cols);
                        push(&[self.classifier.weights[[r, c]]]);
                    }
                }
            }
        }
        out
    }
}

/// Immutable, shareable inference-only model.
#[derive(Debug, Clone)]
pub struct FrozenModel(Arc<ExpandingModel>);

impl FrozenModel {
    pub fn model(&self) -> &ExpandingModel {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    pub fn forward_features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.0.forward_features(x)
    }

    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.0.predict_proba(x)
    }

    pub fn class_probabilities(&self, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.0.class_probabilities(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(d: usize) -> BackboneSpec {
        BackboneSpec {
            input_dim: 5,
            hidden: vec![8, 6],
            feature_dim: d,
            split_at: 1,
            activation: Activation::Tanh,
            branch_init: BranchInit::WarmStart,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn model_with_steps(d: usize, groups: &[&[usize]]) -> ExpandingModel {
        let mut r = rng();
        let mut m = ExpandingModel::new(spec(d), groups[0], &mut r).unwrap();
        for g in &groups[1..] {
            m.expand(g, &mut r).unwrap();
        }
        m
    }

    #[test]
    fn single_branch_features_have_width_d() {
        let m = model_with_steps(64, &[&[0, 1]]);
        let z = m.forward_features(Array2::ones((2, 5)).view()).unwrap();
        assert_eq!(z.dim(), (2, 64));
    }

    #[test]
    fn three_steps_concatenate_three_branches() {
        let m = model_with_steps(64, &[&[0, 1], &[2], &[3]]);
        let z = m.forward_features(Array2::ones((3, 5)).view()).unwrap();
        assert_eq!(z.dim(), (3, 192));
    }

    #[test]
    fn warm_started_branch_reproduces_parent_features() {
        let m = model_with_steps(4, &[&[0, 1], &[2]]);
        let z = m
            .forward_features(array![[0.1, -0.3, 0.5, 0.2, 0.9]].view())
            .unwrap();
        assert_eq!(z.slice(s![.., 0..4]), z.slice(s![.., 4..8]));
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let m = model_with_steps(4, &[&[0]]);
        let err = m.forward_features(Array2::ones((1, 4)).view()).unwrap_err();
        assert!(matches!(err, Error::InputContract(_)));
    }

    #[test]
    fn identical_rows_give_uniform_probabilities() {
        let mut m = model_with_steps(3, &[&[0, 1, 2]]);
        m.classifier.weights = array![[1.0, 2.0, 0.5], [1.0, 2.0, 0.5], [1.0, 2.0, 0.5]];
        let p = m
            .class_probabilities(array![0.3, -1.0, 2.0].view())
            .unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_temperature_is_uniform() {
        let mut m = model_with_steps(3, &[&[0, 1]]);
        m.classifier.rho = f64::NEG_INFINITY;
        let p = m
            .class_probabilities(array![0.3, -1.0, 2.0].view())
            .unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_class_probability_matches_hand_value() {
        // cos sims 0.8 and 0.2 with eta = 2
        let mut m = model_with_steps(2, &[&[0, 1]]);
        let a = 0.8f64;
        let b = 0.2f64;
        m.classifier.weights = array![[a, (1.0 - a * a).sqrt()], [b, (1.0 - b * b).sqrt()]];
        m.classifier.rho = 2f64.ln();
        let p = m.class_probabilities(array![1.0, 0.0].view()).unwrap();
        assert!((p[0] - 0.76852).abs() < 1e-5);
        assert!((p[0] - 1.0 / (1.0 + (-1.2f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn zero_feature_vector_is_degenerate() {
        let m = model_with_steps(3, &[&[0, 1]]);
        let err = m.class_probabilities(Array1::zeros(3).view()).unwrap_err();
        assert!(matches!(err, Error::DegenerateSimilarity(_)));
    }

    #[test]
    fn zero_weight_row_is_degenerate() {
        let mut m = model_with_steps(3, &[&[0, 1]]);
        m.classifier.weights.row_mut(1).fill(0.0);
        let err = m
            .class_probabilities(array![1.0, 0.0, 0.0].view())
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateSimilarity(_)));
    }

    #[test]
    fn aux_probabilities_match_hand_value() {
        let mut m = model_with_steps(2, &[&[0], &[1]]);
        // U block is columns 2..4; cos sims (1, -1)
        m.classifier
            .weights
            .slice_mut(s![.., 2..4])
            .assign(&array![[1.0, 0.0], [-3.0, 0.0]]);
        let p = m.aux_probabilities(array![2.0, 0.0].view()).unwrap();
        assert!((p[0] - 0.88080).abs() < 1e-5);
    }

    #[test]
    fn aux_probabilities_ignore_old_blocks() {
        let mut m = model_with_steps(3, &[&[0, 1], &[2]]);
        let h = array![0.2, -0.7, 1.1];
        let before = m.aux_probabilities(h.view()).unwrap();
        m.classifier
            .weights
            .slice_mut(s![.., 0..3])
            .mapv_inplace(|v| v * -7.0 + 1.0);
        let after = m.aux_probabilities(h.view()).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn aux_probabilities_need_step_two() {
        let m = model_with_steps(3, &[&[0, 1]]);
        assert!(matches!(
            m.aux_probabilities(array![1.0, 0.0, 0.0].view()),
            Err(Error::IllegalState(_))
        ));
    }

    #[test]
    fn expand_shapes_follow_block_arithmetic() {
        let m = model_with_steps(64, &[&[0, 1, 2], &[3, 4], &[5, 6]]);
        assert_eq!((m.classifier.rows(), m.classifier.cols()), (7, 192));
        let map = m.block_map();
        assert_eq!(map.new_rows().len() * map.old_cols().len(), 2 * 128);
        assert_eq!(m.u_block().dim(), (7, 64));
    }

    #[test]
    fn expand_preserves_previous_values() {
        let mut r = rng();
        let mut m = ExpandingModel::new(spec(4), &[0, 1], &mut r).unwrap();
        m.expand(&[2], &mut r).unwrap();
        let before = m.clone();
        m.expand(&[3, 4], &mut r).unwrap();
        assert_eq!(
            m.classifier.weights.slice(s![..3, ..8]),
            before.classifier.weights.view()
        );
        assert_eq!(m.low, before.low);
        assert_eq!(m.branches[..2], before.branches[..]);
    }

    #[test]
    fn expand_rejects_empty_and_overlapping_groups() {
        let mut r = rng();
        let mut m = ExpandingModel::new(spec(4), &[0, 1], &mut r).unwrap();
        assert!(matches!(
            m.expand(&[], &mut r),
            Err(Error::StreamContract(_))
        ));
        assert!(matches!(
            m.expand(&[1, 5], &mut r),
            Err(Error::StreamContract(_))
        ));
        assert_eq!(m.step(), 1);
    }

    #[test]
    fn phase_switching_is_idempotent() {
        let mut m = model_with_steps(3, &[&[0, 1], &[2]]);
        m.set_phase(Phase::New).unwrap();
        let first: Vec<_> = m.tensor_ids().iter().map(|&id| m.trainable(id)).collect();
        m.set_phase(Phase::Old).unwrap();
        m.set_phase(Phase::New).unwrap();
        let again: Vec<_> = m.tensor_ids().iter().map(|&id| m.trainable(id)).collect();
        assert_eq!(first, again);
    }

    #[test]
    fn phases_need_incremental_step() {
        let mut m = model_with_steps(3, &[&[0, 1]]);
        assert!(matches!(
            m.set_phase(Phase::Old),
            Err(Error::IllegalState(_))
        ));
        assert!(matches!(
            m.set_phase(Phase::New),
            Err(Error::IllegalState(_))
        ));
    }

    #[test]
    fn old_phase_trains_only_v_block_and_temperature() {
        let mut m = model_with_steps(2, &[&[0, 1], &[2]]);
        m.set_phase(Phase::Old).unwrap();
        let Trainable::Entries(mask) = m.trainable(TensorId::Classifier) else {
            panic!("expected entry mask")
        };
        // 3 rows x 4 cols; only the new row's first two columns train.
        let expect = [
            false, false, false, false, false, false, false, false, true, true, false, false,
        ];
        assert_eq!(mask, expect);
        assert_eq!(m.trainable(TensorId::Temperature), Trainable::All);
        assert_eq!(
            m.trainable(TensorId::BranchWeight(1, 0)),
            Trainable::Nothing
        );
        assert_eq!(m.trainable(TensorId::LowWeight(0)), Trainable::Nothing);
    }

    #[test]
    fn new_phase_trains_newest_branch_u_and_v() {
        let mut m = model_with_steps(2, &[&[0, 1], &[2]]);
        m.set_phase(Phase::New).unwrap();
        let Trainable::Entries(mask) = m.trainable(TensorId::Classifier) else {
            panic!("expected entry mask")
        };
        let expect = [
            false, false, true, true, false, false, true, true, true, true, true, true,
        ];
        assert_eq!(mask, expect);
        assert_eq!(m.trainable(TensorId::BranchWeight(1, 0)), Trainable::All);
        assert_eq!(
            m.trainable(TensorId::BranchWeight(0, 0)),
            Trainable::Nothing
        );
        assert_eq!(m.trainable(TensorId::LowBias(0)), Trainable::Nothing);
    }

    #[test]
    fn snapshot_is_isolated_from_live_model() {
        let mut m = model_with_steps(3, &[&[0, 1, 2]]);
        let snap = m.snapshot_for_distillation();
        let x = array![[0.4, 0.1, -0.2, 0.7, 1.0]];
        let p1 = snap.predict_proba(x.view()).unwrap();
        m.classifier.weights.mapv_inplace(|v| v + 0.5);
        m.low[0].weight.mapv_inplace(|v| -v);
        let p2 = snap.predict_proba(x.view()).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.ncols(), 3);
        assert!((p1.sum() - 1.0).abs() < 1e-6);
    }
}
