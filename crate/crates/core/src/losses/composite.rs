use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{
    class_balanced_weight, distillation_grad, focal_grad, margin_grad, ClassCounts, LossConfig,
};
use crate::error::{Error, Result};
use crate::model::{ExpandingModel, FrozenModel, Grads};

/// A minibatch drawn from `S_t`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    /// Marks samples replayed from exemplar memory.
    pub is_memory: Vec<bool>,
}

impl Batch {
    pub fn new(x: Array2<f64>, labels: Vec<usize>, is_memory: Vec<bool>) -> Result<Self> {
        if x.nrows() != labels.len() || labels.len() != is_memory.len() {
            return Err(Error::Contract(format!(
                "batch has {} rows, {} labels and {} memory flags",
                x.nrows(),
                labels.len(),
                is_memory.len()
            )));
        }
        Ok(Batch {
            x,
            labels,
            is_memory,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Which training objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Classification term alone with explicit `(β, γ)`.
    Class { beta: f64, gamma: f64 },
    /// `L_class + λ1 L_aux + λ2 L_dist + λ3 L_marg` with the new-phase `(β, γ)`.
    New,
    /// `L_class + λ4 L_dist + λ5 L_marg` with the old-phase `(β, γ)`.
    Old,
}

/// Unweighted component values and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class: f64,
    pub aux: f64,
    pub dist: f64,
    pub margin: f64,
    pub total: f64,
}

/// Evaluates an objective on a batch, optionally with parameter gradients
/// for the model's current trainable set.
pub fn evaluate(
    model: &ExpandingModel,
    batch: &Batch,
    teacher: Option<&FrozenModel>,
    counts: &ClassCounts,
    cfg: &LossConfig,
    objective: Objective,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Grads>)> {
    let incremental = matches!(objective, Objective::New | Objective::Old);
    if incremental && model.step() < 2 {
        return Err(Error::IllegalState(
            "incremental objectives need a model at step 2 or later".into(),
        ));
    }
    let targets = batch
        .labels
        .iter()
        .map(|&y| {
            model
                .row_of(y)
                .ok_or_else(|| Error::Contract(format!("label {y} is not a seen class")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (beta, gamma, l_aux, l_dist, l_marg) = match objective {
        Objective::Class { beta, gamma } => (beta, gamma, 0.0, 0.0, 0.0),
        Objective::New => (
            cfg.beta_new,
            cfg.gamma_new,
            cfg.lambda1,
            cfg.lambda2,
            cfg.lambda3,
        ),
        Objective::Old => (cfg.beta_old, cfg.gamma_old, 0.0, cfg.lambda4, cfg.lambda5),
    };
    let weights = batch
        .labels
        .iter()
        .map(|&y| Ok(class_balanced_weight(beta, counts.get(y)?)))
        .collect::<Result<Vec<_>>>()?;

    let fwd = model.forward_train(batch.x.view())?;
    let cos = fwd.cosine();
    let eta = fwd.eta;
    let logits = cos.mapv(|v| v * eta);

    let mut out = LossBreakdown::default();
    let (class, mut d_logits) = focal_grad(logits.view(), &targets, &weights, gamma);
    out.class = class;

    let mut d_aux = None;
    if objective == Objective::New {
        let aux_cos = fwd
            .aux_cosine()
            .ok_or_else(|| Error::IllegalState("model has no auxiliary head".into()))?;
        let (aux, g) = focal_grad(aux_cos, &targets, &weights, gamma);
        out.aux = aux;
        d_aux = Some(g * l_aux);
    }

    if incremental {
        let teacher = teacher.ok_or_else(|| {
            Error::IllegalState("incremental objectives need a distillation snapshot".into())
        })?;
        let n_old = teacher.num_classes();
        if n_old >= model.num_classes() {
            return Err(Error::IllegalState(format!(
                "snapshot covers {n_old} classes but the model only has {}",
                model.num_classes()
            )));
        }
        let teacher_p = teacher.predict_proba(batch.x.view())?;
        let (dist, g) = distillation_grad(teacher_p.view(), logits.slice(s![.., ..n_old]), n_old);
        out.dist = dist;
        let mut block = d_logits.slice_mut(s![.., ..n_old]);
        block.scaled_add(l_dist, &g);

        let new_rows: Vec<usize> = model.block_map().new_rows().collect();
        let (margin, g) = margin_grad(
            cos,
            &targets,
            &batch.is_memory,
            &new_rows,
            cfg.margin,
            cfg.top_k,
        );
        out.margin = margin;
        let mut d_cos = d_logits.mapv(|v| v * eta);
        d_cos.scaled_add(l_marg, &g);
        out.total = out.class + l_aux * out.aux + l_dist * out.dist + l_marg * out.margin;
        let grads = with_grad.then(|| {
            let d_eta = (&d_logits * &cos).sum();
            model.backward(&fwd, &d_cos, d_aux.as_ref(), d_eta)
        });
        return Ok((out, grads));
    }

    out.total = out.class;
    let grads = with_grad.then(|| {
        let d_eta = (&d_logits * &cos).sum();
        let d_cos = d_logits.mapv(|v| v * eta);
        model.backward(&fwd, &d_cos, None, d_eta)
    });
    Ok((out, grads))
}

/// New-class objective value on a batch.
pub fn composite_new(
    batch: &Batch,
    model: &ExpandingModel,
    snapshot: &FrozenModel,
    counts: &ClassCounts,
    cfg: &LossConfig,
) -> Result<f64> {
    evaluate(
        model,
        batch,
        Some(snapshot),
        counts,
        cfg,
        Objective::New,
        false,
    )
    .map(|(l, _)| l.total)
}

/// Old-class objective value on a batch.
pub fn composite_old(
    batch: &Batch,
    model: &ExpandingModel,
    snapshot: &FrozenModel,
    counts: &ClassCounts,
    cfg: &LossConfig,
) -> Result<f64> {
    evaluate(
        model,
        batch,
        Some(snapshot),
        counts,
        cfg,
        Objective::Old,
        false,
    )
    .map(|(l, _)| l.total)
}

/// Class-balanced focal loss on the newest branch's features and `U_t`.
pub fn auxiliary_loss(
    model: &ExpandingModel,
    batch: &Batch,
    counts: &ClassCounts,
    beta: f64,
    gamma: f64,
) -> Result<f64> {
    if model.step() < 2 {
        return Err(Error::IllegalState(
            "auxiliary loss needs step 2 or later".into(),
        ));
    }
    let fwd = model.forward_train(batch.x.view())?;
    let aux_cos = fwd
        .aux_cosine()
        .ok_or_else(|| Error::IllegalState("model has no auxiliary head".into()))?;
    let probs = super::softmax(aux_cos);
    let mut p_true = Vec::with_capacity(batch.len());
    for (row, &y) in probs.axis_iter(Axis(0)).zip(&batch.labels) {
        let r = model
            .row_of(y)
            .ok_or_else(|| Error::Contract(format!("label {y} is not a seen class")))?;
        p_true.push(row[r]);
    }
    super::class_balanced_focal(&p_true, &batch.labels, counts, beta, gamma)
}

/// Class-balanced focal loss on the full cosine classifier.
pub fn classification_loss(
    model: &ExpandingModel,
    batch: &Batch,
    counts: &ClassCounts,
    beta: f64,
    gamma: f64,
) -> Result<f64> {
    evaluate(
        model,
        batch,
        None,
        counts,
        &LossConfig::default(),
        Objective::Class { beta, gamma },
        false,
    )
    .map(|(l, _)| l.class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::class_balanced_focal;
    use crate::model::{BackboneSpec, BranchInit, Phase, TensorId, Trainable};
    use crate::nn::Activation;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ExpandingModel, FrozenModel, Batch, ClassCounts) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = BackboneSpec {
            input_dim: 3,
            hidden: vec![5, 4],
            feature_dim: 3,
            split_at: 1,
            activation: Activation::Tanh,
            branch_init: BranchInit::Random,
        };
        let mut model = ExpandingModel::new(spec, &[0, 1, 2], &mut rng).unwrap();
        let snap = model.snapshot_for_distillation();
        model.expand(&[3, 4], &mut rng).unwrap();
        let batch = Batch::new(
            array![
                [0.5, -0.2, 0.9],
                [-0.7, 0.3, 0.1],
                [0.2, 0.8, -0.6],
                [1.1, -0.4, 0.3]
            ],
            vec![0, 3, 1, 4],
            vec![true, false, true, false],
        )
        .unwrap();
        let counts: ClassCounts = [(0, 20), (1, 20), (2, 20), (3, 300), (4, 90)]
            .into_iter()
            .collect();
        (model, snap, batch, counts)
    }

    #[test]
    fn zero_lambdas_leave_classification_only() {
        let (model, snap, batch, counts) = setup();
        let cfg = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            ..LossConfig::default()
        };
        let new = composite_new(&batch, &model, &snap, &counts, &cfg).unwrap();
        let cls =
            classification_loss(&model, &batch, &counts, cfg.beta_new, cfg.gamma_new).unwrap();
        assert!((new - cls).abs() < 1e-12);
        let old = composite_old(&batch, &model, &snap, &counts, &cfg).unwrap();
        let cls =
            classification_loss(&model, &batch, &counts, cfg.beta_old, cfg.gamma_old).unwrap();
        assert!((old - cls).abs() < 1e-12);
    }

    #[test]
    fn composites_equal_component_sums() {
        let (model, snap, batch, counts) = setup();
        let cfg = LossConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 0.7,
            lambda5: 1.9,
            ..LossConfig::default()
        };
        let (parts, _) = evaluate(
            &model,
            &batch,
            Some(&snap),
            &counts,
            &cfg,
            Objective::New,
            false,
        )
        .unwrap();
        let aux = auxiliary_loss(&model, &batch, &counts, cfg.beta_new, cfg.gamma_new).unwrap();
        assert!((parts.aux - aux).abs() < 1e-12);
        let new = composite_new(&batch, &model, &snap, &counts, &cfg).unwrap();
        assert!((new - (parts.class + parts.aux + parts.dist + parts.margin)).abs() < 1e-9);

        let (old_parts, _) = evaluate(
            &model,
            &batch,
            Some(&snap),
            &counts,
            &cfg,
            Objective::Old,
            false,
        )
        .unwrap();
        let old = composite_old(&batch, &model, &snap, &counts, &cfg).unwrap();
        assert!(
            (old - (old_parts.class + 0.7 * old_parts.dist + 1.9 * old_parts.margin)).abs() < 1e-9
        );
        assert_eq!(old_parts.aux, 0.0);
    }

    #[test]
    fn old_objective_ignores_new_phase_hyperparameters() {
        let (model, snap, batch, counts) = setup();
        let cfg = LossConfig::default();
        let other = LossConfig {
            beta_new: 0.3,
            gamma_new: 4.0,
            ..LossConfig::default()
        };
        assert_eq!(
            composite_old(&batch, &model, &snap, &counts, &cfg).unwrap(),
            composite_old(&batch, &model, &snap, &counts, &other).unwrap()
        );
    }

    #[test]
    fn auxiliary_loss_reuses_focal_form() {
        let (model, _, batch, counts) = setup();
        let fwd = model.forward_train(batch.x.view()).unwrap();
        let probs = crate::losses::softmax(fwd.aux_cosine().unwrap());
        let p_true: Vec<f64> = batch
            .labels
            .iter()
            .enumerate()
            .map(|(i, &y)| probs[[i, model.row_of(y).unwrap()]])
            .collect();
        let direct = class_balanced_focal(&p_true, &batch.labels, &counts, 0.9, 1.0).unwrap();
        let aux = auxiliary_loss(&model, &batch, &counts, 0.9, 1.0).unwrap();
        assert!((direct - aux).abs() < 1e-12);
    }

    #[test]
    fn auxiliary_loss_ignores_old_blocks() {
        let (mut model, _, batch, counts) = setup();
        let before = auxiliary_loss(&model, &batch, &counts, 0.9, 1.0).unwrap();
        model
            .classifier
            .weights
            .slice_mut(s![.., ..3])
            .mapv_inplace(|v| 3.0 * v - 0.2);
        let after = auxiliary_loss(&model, &batch, &counts, 0.9, 1.0).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn auxiliary_loss_rejects_step_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = BackboneSpec {
            input_dim: 3,
            ..BackboneSpec::default()
        };
        let model = ExpandingModel::new(spec, &[0, 1], &mut rng).unwrap();
        let batch = Batch::new(array![[1.0, 0.0, 0.0]], vec![0], vec![false]).unwrap();
        let counts: ClassCounts = [(0, 1), (1, 1)].into_iter().collect();
        assert!(matches!(
            auxiliary_loss(&model, &batch, &counts, 0.5, 1.0),
            Err(Error::IllegalState(_))
        ));
    }

    #[test]
    fn old_phase_gradients_vanish_on_new_features() {
        let (mut model, snap, batch, counts) = setup();
        model.set_phase(Phase::Old).unwrap();
        let (_, grads) = evaluate(
            &model,
            &batch,
            Some(&snap),
            &counts,
            &LossConfig::default(),
            Objective::Old,
            true,
        )
        .unwrap();
        let grads = grads.unwrap();
        for id in model.tensor_ids() {
            let mask = model.trainable(id);
            for (i, g) in grads.tensor(id).iter().enumerate() {
                if !mask.get(i) {
                    assert_eq!(*g, 0.0, "{id} entry {i}");
                }
            }
        }
        assert_eq!(
            model.trainable(TensorId::BranchWeight(1, 0)),
            Trainable::Nothing
        );
    }

    #[test]
    fn confident_matched_batch_drives_loss_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = BackboneSpec {
            input_dim: 2,
            hidden: vec![],
            feature_dim: 2,
            split_at: 0,
            activation: Activation::Relu,
            branch_init: BranchInit::WarmStart,
        };
        let mut model = ExpandingModel::new(spec, &[0], &mut rng).unwrap();
        // Identity branch so z = [x, x].
        model.branches[0][0].weight = array![[1.0, 0.0], [0.0, 1.0]];
        model.branches[0][0].bias = array![0.0, 0.0];
        model.classifier.weights = array![[1.0, 0.0]];
        let snap = model.snapshot_for_distillation();
        model.expand(&[1], &mut rng).unwrap();
        model.classifier.weights = array![[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]];
        model.classifier.rho = 60f64.ln();
        let batch = Batch::new(
            array![[1.0, 0.0], [0.0, 1.0]],
            vec![0, 1],
            vec![true, false],
        )
        .unwrap();
        let counts: ClassCounts = [(0, 1), (1, 1)].into_iter().collect();
        let cfg = LossConfig {
            lambda1: 0.0,
            ..LossConfig::default()
        };
        let total = composite_new(&batch, &model, &snap, &counts, &cfg).unwrap();
        assert!(total < 1e-12, "{total}");
    }
}
