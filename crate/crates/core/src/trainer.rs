//! Initial training, incremental steps with alternating objectives, and the
//! reference learners.

use std::fmt;
use std::str::FromStr;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_with, Dataset, IncrementalStream};
use crate::error::{Error, Result};
use crate::losses::{evaluate, Batch, LossBreakdown, LossConfig, Objective};
use crate::memory::{build_training_set, rebuild_memory, ExemplarMemory, TrainingSet};
use crate::metrics::{AccuracyMatrix, Metrics};
use crate::model::{BackboneSpec, ExpandingModel, FrozenModel, Phase, Region};
use crate::optim::{Sgd, SgdConfig};

/// When the optimizer switches between the new- and old-class objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    /// A full pass of the new objective, then a full pass of the old one.
    Epoch,
    /// Both objectives take one update on every minibatch.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    /// Epochs per step. Each incremental epoch is a new/old pair.
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    pub loss: LossConfig,
    pub alternation: Alternation,
    /// Random flips and crops for image samples.
    pub augment: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            epochs: 20,
            batch_size: 64,
            optimizer: SgdConfig::default(),
            loss: LossConfig::default(),
            alternation: Alternation::Epoch,
            augment: true,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

/// Lesioned configurations of the proposed learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoOldObjective,
    NoAux,
    NoDist,
    NoMargin,
    NoExpansion,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoOldObjective,
        Variant::NoAux,
        Variant::NoDist,
        Variant::NoMargin,
        Variant::NoExpansion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoOldObjective => "no_old_objective",
            Variant::NoAux => "no_aux",
            Variant::NoDist => "no_dist",
            Variant::NoMargin => "no_margin",
            Variant::NoExpansion => "no_expansion",
        }
    }

    /// Loss weights with the lesioned terms zeroed.
    pub fn loss_config(self, base: &LossConfig) -> LossConfig {
        let mut cfg = base.clone();
        match self {
            Variant::NoAux => cfg.lambda1 = 0.0,
            Variant::NoDist => {
                cfg.lambda2 = 0.0;
                cfg.lambda4 = 0.0;
            }
            Variant::NoMargin => {
                cfg.lambda3 = 0.0;
                cfg.lambda5 = 0.0;
            }
            Variant::Full | Variant::NoOldObjective | Variant::NoExpansion => {}
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Usage(format!(
                    "unknown variant '{s}', expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Proposed,
    /// Sequential fine-tuning on each step's data alone.
    FinetuneOnly,
    /// Fine-tuning on memory plus new data with the classification loss.
    ReplayOnly,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 3] = [
        LearnerKind::Proposed,
        LearnerKind::FinetuneOnly,
        LearnerKind::ReplayOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Proposed => "proposed",
            LearnerKind::FinetuneOnly => "finetune_only",
            LearnerKind::ReplayOnly => "replay_only",
        }
    }

    /// Whether the learner keeps an exemplar memory.
    pub fn uses_memory(self) -> bool {
        !matches!(self, LearnerKind::FinetuneOnly)
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LearnerKind::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown learner '{s}', expected proposed, finetune_only or replay_only"
                ))
            })
    }
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub step: usize,
    /// 1-based epoch within the step.
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    /// Sample-weighted means over the pass.
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub samples: usize,
    pub temperature: f64,
}

struct PassStats {
    loss: LossBreakdown,
    grad_norm: f64,
    samples: usize,
}

impl PassStats {
    fn new() -> Self {
        PassStats {
            loss: LossBreakdown::default(),
            grad_norm: 0.0,
            samples: 0,
        }
    }

    fn add(&mut self, l: &LossBreakdown, norm: f64, n: usize) {
        let w = n as f64;
        self.loss.class += w * l.class;
        self.loss.aux += w * l.aux;
        self.loss.dist += w * l.dist;
        self.loss.margin += w * l.margin;
        self.loss.total += w * l.total;
        self.grad_norm += w * norm;
        self.samples += n;
    }

    fn finish(
        mut self,
        step: usize,
        epoch: usize,
        phase: Phase,
        lr: f64,
        model: &ExpandingModel,
    ) -> EpochRecord {
        let w = self.samples.max(1) as f64;
        self.loss.class /= w;
        self.loss.aux /= w;
        self.loss.dist /= w;
        self.loss.margin /= w;
        self.loss.total /= w;
        EpochRecord {
            step,
            epoch,
            phase: phase.to_string(),
            lr,
            loss: self.loss,
            grad_norm: self.grad_norm / w,
            samples: self.samples,
            temperature: model.classifier().temperature(),
        }
    }
}

/// Everything one optimizer update needs besides the model.
struct UpdateCtx<'a> {
    set: &'a TrainingSet,
    teacher: Option<&'a FrozenModel>,
    loss: &'a LossConfig,
    plan: &'a TrainPlan,
    step: usize,
    epoch: usize,
}

fn make_batch<R: rand::Rng>(
    set: &TrainingSet,
    idx: &[usize],
    augment: bool,
    rng: &mut R,
) -> Result<Batch> {
    let mut x = set.data.features.select(Axis(0), idx);
    if augment && set.data.shape.is_image() {
        for mut row in x.rows_mut() {
            let aug = augment_with(row.as_slice().expect("contiguous"), set.data.shape, rng);
            row.assign(&ndarray::ArrayView1::from(&aug));
        }
    }
    Batch::new(
        x,
        idx.iter().map(|&i| set.data.labels[i]).collect(),
        idx.iter().map(|&i| set.is_memory[i]).collect(),
    )
}

fn update(
    model: &mut ExpandingModel,
    ctx: &UpdateCtx<'_>,
    batch: &Batch,
    objective: Objective,
    opt: &mut Sgd,
    lr: f64,
) -> Result<(LossBreakdown, f64)> {
    let phase = model.phase().to_string();
    let diverged = |detail: String| Error::Divergence {
        phase: phase.clone(),
        epoch: ctx.epoch,
        detail: format!("step {}: {detail}", ctx.step),
    };
    let (loss, grads) = evaluate(
        model,
        batch,
        ctx.teacher,
        &ctx.set.counts,
        ctx.loss,
        objective,
        true,
    )?;
    if !loss.total.is_finite() {
        return Err(diverged(format!("loss is {}", loss.total)));
    }
    let grads = grads.expect("requested gradients");
    let norm = opt.step(model, &grads, lr);
    if !norm.is_finite() {
        return Err(diverged(format!("gradient norm is {norm}")));
    }
    if !model.classifier().temperature().is_finite() {
        return Err(diverged("temperature is not finite".into()));
    }
    Ok((loss, norm))
}

fn shuffled<R: rand::Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// One full pass over `ctx.set` under the model's current phase.
fn run_pass<R: rand::Rng>(
    model: &mut ExpandingModel,
    ctx: &UpdateCtx<'_>,
    objective: Objective,
    opt: &mut Sgd,
    lr: f64,
    rng: &mut R,
) -> Result<EpochRecord> {
    let mut stats = PassStats::new();
    for chunk in shuffled(ctx.set.len(), rng).chunks(ctx.plan.batch_size) {
        let batch = make_batch(ctx.set, chunk, ctx.plan.augment, rng)?;
        let (loss, norm) = update(model, ctx, &batch, objective, opt, lr)?;
        stats.add(&loss, norm, batch.len());
    }
    let phase = model.phase();
    Ok(stats.finish(ctx.step, ctx.epoch, phase, lr, model))
}

/// Trains every parameter of a step-1 model on `d1` with the class-balanced
/// focal loss for `plan.epochs` epochs.
pub fn train_initial(
    model: &mut ExpandingModel,
    d1: &Dataset,
    plan: &TrainPlan,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochRecord>> {
    plan.validate()?;
    if d1.is_empty() {
        return Err(Error::Contract("initial training data is empty".into()));
    }
    model.set_phase(Phase::Initial)?;
    let set = build_training_set(&ExemplarMemory::new(1, d1.shape)?, d1)?;
    let objective = Objective::Class {
        beta: plan.loss.beta_new,
        gamma: plan.loss.gamma_new,
    };
    let mut opt = Sgd::new(plan.optimizer.clone());
    let mut log = Vec::with_capacity(plan.epochs);
    for e in 0..plan.epochs {
        let ctx = UpdateCtx {
            set: &set,
            teacher: None,
            loss: &plan.loss,
            plan,
            step: 1,
            epoch: e + 1,
        };
        let lr = plan.optimizer.lr_at(e, plan.epochs);
        log.push(run_pass(model, &ctx, objective, &mut opt, lr, rng)?);
    }
    model.set_phase(Phase::Inference)?;
    Ok(log)
}

/// Learner configuration for one incremental step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOptions {
    pub learner: LearnerKind,
    pub variant: Variant,
    /// Exemplars kept per class.
    pub budget: usize,
}

/// Result of [`train_incremental_step`].
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Memory used during the step (`M_{t-1}`).
    pub memory: ExemplarMemory,
    pub log: Vec<EpochRecord>,
}

/// Whether a pass is about to start or has just finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassStage {
    Start,
    End,
}

/// Reported to a pass observer around every optimizer pass of an
/// incremental step. Under batch alternation each per-batch update of an
/// objective counts as its own pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassEvent {
    pub stage: PassStage,
    pub phase: Phase,
    /// 1-based epoch within the step.
    pub epoch: usize,
}

/// Learns the classes of `incoming` on top of a model trained through the
/// previous step. `memory` and `latest` are the previous memory and the
/// previous step's training data, from which the new memory is rebuilt.
pub fn train_incremental_step(
    model: &mut ExpandingModel,
    incoming: &Dataset,
    memory: &ExemplarMemory,
    latest: &Dataset,
    plan: &TrainPlan,
    opts: StepOptions,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    train_incremental_step_observed(
        model,
        incoming,
        memory,
        latest,
        plan,
        opts,
        rng,
        &mut |_, _| {},
    )
}

/// [`train_incremental_step`] that shows the model to `observer` before and
/// after every pass.
#[allow(clippy::too_many_arguments)]
pub fn train_incremental_step_observed(
    model: &mut ExpandingModel,
    incoming: &Dataset,
    memory: &ExemplarMemory,
    latest: &Dataset,
    plan: &TrainPlan,
    opts: StepOptions,
    rng: &mut ChaCha8Rng,
    observer: &mut dyn FnMut(PassEvent, &ExpandingModel),
) -> Result<StepOutcome> {
    plan.validate()?;
    if incoming.is_empty() {
        return Err(Error::Contract(
            "incremental step has no training data".into(),
        ));
    }
    let new_classes = incoming.classes();
    let memory = if opts.learner.uses_memory() {
        rebuild_memory(model, memory, latest, opts.budget)?
    } else {
        ExemplarMemory::new(opts.budget, incoming.shape)?
    };
    let teacher = model.snapshot_for_distillation();

    let proposed = opts.learner == LearnerKind::Proposed;
    let expands = proposed && opts.variant != Variant::NoExpansion;
    if expands {
        model.expand(&new_classes, rng)?;
    } else {
        model.extend_classes(&new_classes, rng)?;
    }
    let step = model.step();
    let previous = expands.then(|| model.region_bytes(Region::Previous));

    let set = build_training_set(&memory, incoming)?;
    let loss = opts.variant.loss_config(&plan.loss);
    let mut log = Vec::new();
    let n = plan.epochs;

    if !proposed {
        model.set_phase(Phase::Plastic)?;
        let objective = Objective::Class {
            beta: plan.loss.beta_new,
            gamma: plan.loss.gamma_new,
        };
        let mut opt = Sgd::new(plan.optimizer.clone());
        for e in 0..n {
            let ctx = UpdateCtx {
                set: &set,
                teacher: None,
                loss: &loss,
                plan,
                step,
                epoch: e + 1,
            };
            let ev = |stage| PassEvent {
                stage,
                phase: Phase::Plastic,
                epoch: e + 1,
            };
            observer(ev(PassStage::Start), model);
            log.push(run_pass(
                model,
                &ctx,
                objective,
                &mut opt,
                plan.optimizer.lr_at(e, n),
                rng,
            )?);
            observer(ev(PassStage::End), model);
        }
    } else {
        let with_old = opts.variant != Variant::NoOldObjective;
        let mut opt_new = Sgd::new(plan.optimizer.clone());
        let mut opt_old = Sgd::new(plan.optimizer.clone());
        for e in 0..n {
            let lr = plan.optimizer.lr_at(e, n);
            let ev = |stage, phase| PassEvent {
                stage,
                phase,
                epoch: e + 1,
            };
            let ctx = UpdateCtx {
                set: &set,
                teacher: Some(&teacher),
                loss: &loss,
                plan,
                step,
                epoch: e + 1,
            };
            match plan.alternation {
                Alternation::Epoch => {
                    model.set_phase(Phase::New)?;
                    observer(ev(PassStage::Start, Phase::New), model);
                    log.push(run_pass(
                        model,
                        &ctx,
                        Objective::New,
                        &mut opt_new,
                        lr,
                        rng,
                    )?);
                    observer(ev(PassStage::End, Phase::New), model);
                    if with_old {
                        model.set_phase(Phase::Old)?;
                        let fixed = expands.then(|| model.region_bytes(Region::NewFeatures));
                        observer(ev(PassStage::Start, Phase::Old), model);
                        log.push(run_pass(
                            model,
                            &ctx,
                            Objective::Old,
                            &mut opt_old,
                            lr,
                            rng,
                        )?);
                        observer(ev(PassStage::End, Phase::Old), model);
                        if fixed.is_some_and(|b| b != model.region_bytes(Region::NewFeatures)) {
                            return Err(Error::IllegalState(
                                "old-class pass modified the newest branch or U block".into(),
                            ));
                        }
                    }
                }
                Alternation::Batch => {
                    let mut new_stats = PassStats::new();
                    let mut old_stats = PassStats::new();
                    for chunk in shuffled(set.len(), rng).chunks(plan.batch_size) {
                        let batch = make_batch(&set, chunk, plan.augment, rng)?;
                        model.set_phase(Phase::New)?;
                        observer(ev(PassStage::Start, Phase::New), model);
                        let (l, g) = update(model, &ctx, &batch, Objective::New, &mut opt_new, lr)?;
                        observer(ev(PassStage::End, Phase::New), model);
                        new_stats.add(&l, g, batch.len());
                        if with_old {
                            model.set_phase(Phase::Old)?;
                            observer(ev(PassStage::Start, Phase::Old), model);
                            let (l, g) =
                                update(model, &ctx, &batch, Objective::Old, &mut opt_old, lr)?;
                            observer(ev(PassStage::End, Phase::Old), model);
                            old_stats.add(&l, g, batch.len());
                        }
                    }
                    log.push(new_stats.finish(step, e + 1, Phase::New, lr, model));
                    if with_old {
                        log.push(old_stats.finish(step, e + 1, Phase::Old, lr, model));
                    }
                }
            }
        }
    }
    model.set_phase(Phase::Inference)?;
    if previous.is_some_and(|b| b != model.region_bytes(Region::Previous)) {
        return Err(Error::IllegalState(
            "incremental step modified parameters frozen from earlier steps".into(),
        ));
    }
    Ok(StepOutcome { memory, log })
}

/// Drives a learner through a stream step by step, keeping the state the
/// next step needs.
#[derive(Debug, Clone)]
pub struct IncrementalLearner {
    model: Option<ExpandingModel>,
    memory: ExemplarMemory,
    latest: Option<Dataset>,
    spec: BackboneSpec,
    plan: TrainPlan,
    opts: StepOptions,
    rng: ChaCha8Rng,
    log: Vec<EpochRecord>,
}

impl IncrementalLearner {
    pub fn new(spec: BackboneSpec, plan: TrainPlan, opts: StepOptions, seed: u64) -> Result<Self> {
        spec.validate()?;
        plan.validate()?;
        Ok(IncrementalLearner {
            model: None,
            memory: ExemplarMemory::new(
                opts.budget,
                crate::data::SampleShape::Vector {
                    len: spec.input_dim,
                },
            )?,
            latest: None,
            spec,
            plan,
            opts,
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> Option<&ExpandingModel> {
        self.model.as_ref()
    }

    /// Memory used in the most recent step.
    pub fn memory(&self) -> &ExemplarMemory {
        &self.memory
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    /// Trains on the data of the next step and returns that step's log.
    pub fn learn(&mut self, data: &Dataset) -> Result<&[EpochRecord]> {
        let start = self.log.len();
        match self.model.as_mut() {
            None => {
                let mut model =
                    ExpandingModel::new(self.spec.clone(), &data.classes(), &mut self.rng)?;
                let log = train_initial(&mut model, data, &self.plan, &mut self.rng)?;
                self.log.extend(log);
                self.model = Some(model);
            }
            Some(model) => {
                let latest = self.latest.as_ref().expect("set after the first step");
                let out = train_incremental_step(
                    model,
                    data,
                    &self.memory,
                    latest,
                    &self.plan,
                    self.opts,
                    &mut self.rng,
                )?;
                self.memory = out.memory;
                self.log.extend(out.log);
            }
        }
        self.latest = Some(data.clone());
        Ok(&self.log[start..])
    }
}

/// Outcome of running one learner over a whole stream.
#[derive(Debug, Clone)]
pub struct StreamRun {
    pub matrix: AccuracyMatrix,
    pub metrics: Metrics,
    pub model: ExpandingModel,
    pub log: Vec<EpochRecord>,
}

/// Runs every step of `stream`, recording the accuracy matrix after each.
/// `after_step` sees the learner once each step's column is recorded.
pub fn run_stream(
    stream: &IncrementalStream,
    spec: &BackboneSpec,
    plan: &TrainPlan,
    opts: StepOptions,
    seed: u64,
    mut after_step: impl FnMut(usize, &IncrementalLearner, &AccuracyMatrix) -> Result<()>,
) -> Result<StreamRun> {
    let mut learner = IncrementalLearner::new(spec.clone(), plan.clone(), opts, seed)?;
    let tests: Vec<Dataset> = (0..stream.num_steps())
        .map(|i| stream.test_for_step(i))
        .collect();
    let mut matrix = AccuracyMatrix::new(stream.num_steps())?;
    for (i, step) in stream.steps.iter().enumerate() {
        learner.learn(&step.train)?;
        matrix.record(i + 1, learner.model().expect("trained"), &tests)?;
        after_step(i + 1, &learner, &matrix)?;
    }
    Ok(StreamRun {
        metrics: matrix.metrics()?,
        model: learner.model.expect("trained"),
        log: learner.log,
        matrix,
    })
}

/// Per-variant report: the three ablation metrics plus the full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variant: Variant,
    pub acc: f64,
    pub acc_new: f64,
    pub acc_old: f64,
    pub fgt: f64,
    pub matrix: AccuracyMatrix,
}

/// Runs the proposed learner with `variant`'s lesion applied.
pub fn run_ablation(
    variant: Variant,
    stream: &IncrementalStream,
    spec: &BackboneSpec,
    plan: &TrainPlan,
    budget: usize,
    seed: u64,
) -> Result<AblationReport> {
    let opts = StepOptions {
        learner: LearnerKind::Proposed,
        variant,
        budget,
    };
    let run = run_stream(stream, spec, plan, opts, seed, |_, _, _| Ok(()))?;
    Ok(AblationReport {
        variant,
        acc: run.metrics.acc,
        acc_new: run.metrics.acc_new,
        acc_old: run.metrics.acc_old,
        fgt: run.metrics.fgt,
        matrix: run.matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_skewed, make_stream, Protocol, SampleShape, SkewSpec};
    use ndarray::Array2;

    fn spec(input: usize) -> BackboneSpec {
        BackboneSpec {
            input_dim: input,
            hidden: vec![16, 16],
            feature_dim: 8,
            ..BackboneSpec::default()
        }
    }

    fn blobs() -> Dataset {
        let n = 60;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| {
            let side = if i % 2 == 0 { 2.0 } else { -2.0 };
            side * if j == 0 { 1.0 } else { 0.5 } + 0.1 * ((i * 7 + j * 3) % 5) as f64
        });
        let labels = (0..n).map(|i| i % 2).collect();
        Dataset::new(SampleShape::Vector { len: 2 }, x, labels).unwrap()
    }

    fn quick_plan(epochs: usize) -> TrainPlan {
        TrainPlan {
            epochs,
            batch_size: 16,
            ..TrainPlan::default()
        }
    }

    fn toy_stream() -> IncrementalStream {
        let data = generate_skewed(
            &SkewSpec {
                class_proportions: vec![0.25; 4],
                total_samples: 240,
                feature_dim: 6,
                ..SkewSpec::default()
            },
            5,
        )
        .unwrap();
        let p = Protocol {
            initial_classes: 2,
            per_step: 1,
            ..Protocol::default()
        };
        make_stream(&data, &p, 0).unwrap()
    }

    fn proposed(variant: Variant) -> StepOptions {
        StepOptions {
            learner: LearnerKind::Proposed,
            variant,
            budget: 10,
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let d = blobs();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ExpandingModel::new(spec(2), &[0, 1], &mut rng).unwrap();
        let log = train_initial(&mut m, &d, &quick_plan(15), &mut rng).unwrap();
        assert_eq!(log.len(), 15);
        let pred = m.predict(d.features.view()).unwrap();
        let acc =
            pred.iter().zip(&d.labels).filter(|(p, y)| p == y).count() as f64 / d.len() as f64;
        assert!(acc >= 0.95, "training accuracy {acc}");
        for w in log[..3].windows(2) {
            assert!(w[1].loss.total <= w[0].loss.total + 1e-12);
            assert!(w[0].loss.total.is_finite());
        }
    }

    #[test]
    fn zero_epochs_and_empty_data_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ExpandingModel::new(spec(2), &[0, 1], &mut rng).unwrap();
        assert!(matches!(
            train_initial(&mut m, &blobs(), &quick_plan(0), &mut rng),
            Err(Error::Config { .. })
        ));
        let empty = Dataset::empty(SampleShape::Vector { len: 2 });
        assert!(matches!(
            train_initial(&mut m, &empty, &quick_plan(1), &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn non_finite_input_reports_divergence() {
        let mut d = blobs();
        d.features[[3, 0]] = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ExpandingModel::new(spec(2), &[0, 1], &mut rng).unwrap();
        match train_initial(&mut m, &d, &quick_plan(2), &mut rng) {
            Err(Error::Divergence { phase, epoch, .. }) => {
                assert_eq!(phase, "initial");
                assert_eq!(epoch, 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn incremental_step_keeps_frozen_blocks() {
        let stream = toy_stream();
        let mut learner =
            IncrementalLearner::new(spec(6), quick_plan(2), proposed(Variant::Full), 1).unwrap();
        learner.learn(&stream.steps[0].train).unwrap();
        for step in &stream.steps[1..] {
            let before = learner.model().unwrap().clone();
            let log = learner.learn(&step.train).unwrap().to_vec();
            assert_eq!(log.len(), 4);
            let after = learner.model().unwrap();
            // Old layout, compared at the old step.
            let prev_bytes = {
                let mut trimmed = Vec::new();
                for id in before.tensor_ids() {
                    if id == crate::model::TensorId::Classifier
                        || id == crate::model::TensorId::Temperature
                    {
                        continue;
                    }
                    for v in after.tensor(id) {
                        trimmed.extend_from_slice(&v.to_le_bytes());
                    }
                }
                trimmed
            };
            let mut expect = Vec::new();
            for id in before.tensor_ids() {
                if id == crate::model::TensorId::Classifier
                    || id == crate::model::TensorId::Temperature
                {
                    continue;
                }
                for v in before.tensor(id) {
                    expect.extend_from_slice(&v.to_le_bytes());
                }
            }
            assert_eq!(prev_bytes, expect);
            let (r, c) = (before.classifier().rows(), before.classifier().cols());
            for i in 0..r {
                for j in 0..c {
                    assert_eq!(
                        before.classifier().weights()[[i, j]].to_bits(),
                        after.classifier().weights()[[i, j]].to_bits()
                    );
                }
            }
        }
        assert!(learner.memory().len() <= 10 * 3);
    }

    #[test]
    fn zero_weights_without_memory_still_run() {
        let stream = toy_stream();
        let mut plan = quick_plan(2);
        plan.loss.lambda1 = 0.0;
        plan.loss.lambda2 = 0.0;
        plan.loss.lambda3 = 0.0;
        plan.loss.lambda4 = 0.0;
        plan.loss.lambda5 = 0.0;
        let run = run_stream(
            &stream,
            &spec(6),
            &plan,
            proposed(Variant::Full),
            2,
            |_, _, _| Ok(()),
        );
        assert!(run.is_ok());
    }

    #[test]
    fn identical_seeds_reproduce_the_matrix() {
        let stream = toy_stream();
        let run = |s| {
            run_stream(
                &stream,
                &spec(6),
                &quick_plan(2),
                proposed(Variant::Full),
                s,
                |_, _, _| Ok(()),
            )
            .unwrap()
            .matrix
        };
        assert_eq!(run(3).to_csv(), run(3).to_csv());
    }

    #[test]
    fn every_variant_and_learner_completes() {
        let stream = toy_stream();
        for v in Variant::ALL {
            let r = run_ablation(v, &stream, &spec(6), &quick_plan(1), 5, 0).unwrap();
            assert!((0.0..=1.0).contains(&r.acc));
            assert!(r.matrix.is_complete());
        }
        for kind in [LearnerKind::FinetuneOnly, LearnerKind::ReplayOnly] {
            let opts = StepOptions {
                learner: kind,
                variant: Variant::Full,
                budget: 5,
            };
            let run =
                run_stream(&stream, &spec(6), &quick_plan(1), opts, 0, |_, _, _| Ok(())).unwrap();
            assert_eq!(run.model.num_branches(), 1);
        }
    }

    #[test]
    fn batch_alternation_logs_both_phases() {
        let stream = toy_stream();
        let mut plan = quick_plan(2);
        plan.alternation = Alternation::Batch;
        let run = run_stream(
            &stream,
            &spec(6),
            &plan,
            proposed(Variant::Full),
            0,
            |_, _, _| Ok(()),
        )
        .unwrap();
        let step2: Vec<&str> = run
            .log
            .iter()
            .filter(|r| r.step == 2)
            .map(|r| r.phase.as_str())
            .collect();
        assert_eq!(step2, vec!["new", "old", "new", "old"]);
    }

    #[test]
    fn names_parse_and_unknown_names_are_usage_errors() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("no_such".parse::<Variant>(), Err(Error::Usage(_))));
        assert_eq!(
            "replay_only".parse::<LearnerKind>().unwrap(),
            LearnerKind::ReplayOnly
        );
        assert!(matches!(
            "icarl".parse::<LearnerKind>(),
            Err(Error::Usage(_))
        ));
    }
}
