//! Fixed-budget exemplar memory with herding selection.

use std::collections::{BTreeMap, HashMap};

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleShape};
use crate::error::{Error, Result};
use crate::losses::ClassCounts;
use crate::model::ExpandingModel;

/// Greedy herding: repeatedly picks the sample that keeps the running mean
/// of the selection closest to the class mean. Returns at most `budget`
/// row indices in selection order; ties go to the lowest index.
pub fn herding_select(features: ArrayView2<'_, f64>, budget: usize) -> Result<Vec<usize>> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::Contract("herding needs at least one sample".into()));
    }
    if budget == 0 {
        return Err(Error::Contract("herding budget must be at least 1".into()));
    }
    let mu = features.mean_axis(Axis(0)).expect("nonempty");
    let mut sum = Array1::<f64>::zeros(features.ncols());
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(budget.min(n));
    while order.len() < budget.min(n) {
        let j = order.len() as f64;
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let dist: f64 = mu
                .iter()
                .zip(&sum)
                .zip(features.row(i))
                .map(|((m, s), x)| {
                    let d = m - (s + x) / (j + 1.0);
                    d * d
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("a candidate remains");
        taken[i] = true;
        sum += &features.row(i);
        order.push(i);
    }
    Ok(order)
}

/// Exemplars of one class. `samples.ids` are indices into the source
/// dataset the class was introduced with.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassExemplars {
    /// Step (1-based) at which the class was introduced.
    pub step: usize,
    pub samples: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarMemory {
    budget: usize,
    shape: SampleShape,
    classes: BTreeMap<usize, ClassExemplars>,
}

impl ExemplarMemory {
    pub fn new(budget: usize, shape: SampleShape) -> Result<Self> {
        if budget == 0 {
            return Err(Error::Contract("memory budget must be at least 1".into()));
        }
        Ok(ExemplarMemory {
            budget,
            shape,
            classes: BTreeMap::new(),
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn shape(&self) -> SampleShape {
        self.shape
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    pub fn get(&self, class: usize) -> Option<&ClassExemplars> {
        self.classes.get(&class)
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(|c| c.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores the herding selection for `class`, truncated to the budget.
    pub fn insert(&mut self, class: usize, step: usize, samples: Dataset) -> Result<()> {
        if samples.labels.iter().any(|&l| l != class) {
            return Err(Error::Contract(format!(
                "exemplars for class {class} carry other labels"
            )));
        }
        if samples.len() > self.budget {
            return Err(Error::Contract(format!(
                "{} exemplars exceed the budget of {}",
                samples.len(),
                self.budget
            )));
        }
        self.classes.insert(class, ClassExemplars { step, samples });
        Ok(())
    }

    /// All exemplars as one dataset, classes in ascending order.
    pub fn to_dataset(&self) -> Dataset {
        let mut out = Dataset::empty(self.shape);
        for c in self.classes.values() {
            out = concat(&out, &c.samples);
        }
        out
    }

    pub fn manifest(&self) -> MemoryManifest {
        MemoryManifest {
            budget: self.budget,
            classes: self
                .classes
                .iter()
                .map(|(&class, c)| {
                    (
                        class,
                        ManifestEntry {
                            step: c.step,
                            indices: c.samples.ids.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Rebuilds memory from a manifest by looking exemplar ids up in `source`.
    pub fn from_manifest(manifest: &MemoryManifest, source: &Dataset) -> Result<Self> {
        let by_id: HashMap<usize, usize> = source
            .ids
            .iter()
            .enumerate()
            .map(|(pos, &id)| (id, pos))
            .collect();
        let mut mem = ExemplarMemory::new(manifest.budget, source.shape)?;
        for (&class, entry) in &manifest.classes {
            let pos = entry
                .indices
                .iter()
                .map(|id| {
                    by_id.get(id).copied().ok_or_else(|| {
                        Error::Contract(format!("exemplar id {id} is missing from the source data"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            mem.insert(class, entry.step, source.subset(&pos))?;
        }
        Ok(mem)
    }
}

/// Persisted memory layout: class -> originating step and sample indices,
/// in herding order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryManifest {
    pub budget: usize,
    pub classes: BTreeMap<usize, ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub step: usize,
    pub indices: Vec<usize>,
}

fn concat(a: &Dataset, b: &Dataset) -> Dataset {
    let mut labels = a.labels.clone();
    labels.extend_from_slice(&b.labels);
    let mut ids = a.ids.clone();
    ids.extend_from_slice(&b.ids);
    Dataset {
        shape: a.shape,
        features: concatenate(Axis(0), &[a.features.view(), b.features.view()])
            .expect("matching widths"),
        labels,
        ids,
        class_names: a.class_names.clone().or_else(|| b.class_names.clone()),
    }
}

fn unit_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    z
}

/// Constructs the memory used during step `model.step() + 1`.
///
/// Classes already in `previous` are reselected from their stored exemplars;
/// classes of the model's latest step are selected from `latest`, the
/// training data of that step. Selection runs on L2-normalised features of
/// `model`.
pub fn rebuild_memory(
    model: &ExpandingModel,
    previous: &ExemplarMemory,
    latest: &Dataset,
    budget: usize,
) -> Result<ExemplarMemory> {
    let mut next = ExemplarMemory::new(budget, latest.shape)?;
    let latest_step = model.step();
    for (g, group) in model.class_groups().iter().enumerate() {
        for &class in group {
            let (step, pool) = match previous.get(class) {
                Some(c) => (c.step, c.samples.clone()),
                None if g + 1 == latest_step => (latest_step, latest.filter_classes(&[class])),
                None => {
                    return Err(Error::Contract(format!(
                        "class {class} from step {} has no stored exemplars",
                        g + 1
                    )))
                }
            };
            if pool.is_empty() {
                return Err(Error::Contract(format!(
                    "seen class {class} has no samples available for memory"
                )));
            }
            let z = unit_rows(model.forward_features(pool.features.view())?);
            let order = herding_select(z.view(), budget)?;
            next.insert(class, step, pool.subset(&order))?;
        }
    }
    Ok(next)
}

/// `S_t = M_{t-1} ∪ D_t` with memory flags and per-class counts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub data: Dataset,
    pub is_memory: Vec<bool>,
    pub counts: ClassCounts,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn build_training_set(memory: &ExemplarMemory, incoming: &Dataset) -> Result<TrainingSet> {
    let new_classes = incoming.classes();
    if let Some(c) = memory
        .classes()
        .find(|c| new_classes.binary_search(c).is_ok())
    {
        return Err(Error::StreamContract(format!(
            "class {c} appears both in memory and in the incoming data"
        )));
    }
    if memory.shape() != incoming.shape && !memory.is_empty() {
        return Err(Error::StreamContract(
            "memory and incoming sample shapes differ".into(),
        ));
    }
    let mem = memory.to_dataset();
    let mut is_memory = vec![true; mem.len()];
    is_memory.extend(std::iter::repeat_n(false, incoming.len()));
    let data = concat(&mem, incoming);
    Ok(TrainingSet {
        counts: data.counts(),
        data,
        is_memory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneSpec;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec_data(rows: Vec<[f64; 2]>, labels: Vec<usize>) -> Dataset {
        let n = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Dataset::new(
            SampleShape::Vector { len: 2 },
            Array2::from_shape_vec((n, 2), flat).unwrap(),
            labels,
        )
        .unwrap()
    }

    #[test]
    fn mean_sample_is_picked_first() {
        let f = array![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        assert_eq!(herding_select(f.view(), 1).unwrap(), vec![1]);
    }

    #[test]
    fn large_budget_returns_every_index_once() {
        let f = array![[0.0, 1.0], [3.0, 0.0], [2.0, 5.0], [1.0, 1.0]];
        let mut got = herding_select(f.view(), 10).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let f = array![[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]];
        assert_eq!(herding_select(f.view(), 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_and_zero_budget_are_errors() {
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            herding_select(empty.view(), 2),
            Err(Error::Contract(_))
        ));
        let one = array![[1.0, 2.0]];
        assert!(matches!(
            herding_select(one.view(), 0),
            Err(Error::Contract(_))
        ));
    }

    fn oracle(f: &Array2<f64>, budget: usize) -> Vec<usize> {
        // Recompute the full objective from scratch for every candidate.
        let n = f.nrows();
        let mu: Vec<f64> = (0..f.ncols())
            .map(|c| (0..n).map(|r| f[[r, c]]).sum::<f64>() / n as f64)
            .collect();
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < budget.min(n) {
            let mut best = (usize::MAX, f64::INFINITY);
            for cand in 0..n {
                if chosen.contains(&cand) {
                    continue;
                }
                let mut trial = chosen.clone();
                trial.push(cand);
                let obj: f64 = (0..f.ncols())
                    .map(|c| {
                        let m = trial.iter().map(|&r| f[[r, c]]).sum::<f64>() / trial.len() as f64;
                        (mu[c] - m).powi(2)
                    })
                    .sum::<f64>()
                    .sqrt();
                if obj < best.1 {
                    best = (cand, obj);
                }
            }
            chosen.push(best.0);
        }
        chosen
    }

    fn small_instance() -> impl Strategy<Value = (Array2<f64>, usize)> {
        (1usize..=8, 1usize..=4).prop_flat_map(|(n, d)| {
            (
                proptest::collection::vec(-4i32..=4, n * d).prop_map(move |v| {
                    Array2::from_shape_fn((n, d), |(r, c)| v[r * d + c] as f64 * 0.5)
                }),
                1usize..=10,
            )
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force_greedy((f, budget) in small_instance()) {
            prop_assert_eq!(herding_select(f.view(), budget).unwrap(), oracle(&f, budget));
        }

        #[test]
        fn smaller_budget_is_a_prefix((f, budget) in small_instance(), extra in 1usize..5) {
            let short = herding_select(f.view(), budget).unwrap();
            let long = herding_select(f.view(), budget + extra).unwrap();
            prop_assert_eq!(&long[..short.len()], &short[..]);
        }
    }

    fn toy_model(classes: &[usize]) -> ExpandingModel {
        let spec = BackboneSpec {
            input_dim: 2,
            hidden: vec![8, 8],
            feature_dim: 4,
            ..BackboneSpec::default()
        };
        ExpandingModel::new(spec, classes, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn blob(class: usize, n: usize, offset: f64) -> Dataset {
        let rows = (0..n)
            .map(|i| [offset + (i % 5) as f64 * 0.1, offset - (i % 3) as f64 * 0.2])
            .collect();
        vec_data(rows, vec![class; n])
    }

    #[test]
    fn budget_bounds_memory_after_first_step() {
        let model = toy_model(&[0, 1, 2, 3]);
        let mut d1 = blob(0, 30, 1.0);
        for (c, off) in [(1, -1.0), (2, 2.0), (3, 0.5)] {
            d1 = concat(&d1, &blob(c, if c == 3 { 12 } else { 30 }, off));
        }
        let empty = ExemplarMemory::new(20, d1.shape).unwrap();
        let mem = rebuild_memory(&model, &empty, &d1, 20).unwrap();
        assert!(mem.len() <= 80);
        assert_eq!(mem.get(0).unwrap().samples.len(), 20);
        // Pool smaller than the budget is kept whole.
        assert_eq!(mem.get(3).unwrap().samples.len(), 12);
        assert!(mem.get(1).unwrap().samples.labels.iter().all(|&l| l == 1));
        let again = rebuild_memory(&model, &empty, &d1, 20).unwrap();
        assert_eq!(mem, again);
    }

    #[test]
    fn old_classes_are_reselected_from_memory_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = toy_model(&[0]);
        let d1 = blob(0, 25, 1.0);
        let empty = ExemplarMemory::new(10, d1.shape).unwrap();
        let m1 = rebuild_memory(&model, &empty, &d1, 10).unwrap();
        model.expand(&[1], &mut rng).unwrap();
        let d2 = blob(1, 25, -1.0);
        let m2 = rebuild_memory(&model, &m1, &d2, 5).unwrap();
        let old_ids: Vec<usize> = m1.get(0).unwrap().samples.ids.clone();
        assert!(m2
            .get(0)
            .unwrap()
            .samples
            .ids
            .iter()
            .all(|id| old_ids.contains(id)));
        assert_eq!(m2.get(0).unwrap().step, 1);
        assert_eq!(m2.get(1).unwrap().step, 2);
        assert_eq!(m2.len(), 10);
    }

    #[test]
    fn missing_pool_is_a_contract_error() {
        let model = toy_model(&[0, 1]);
        let d1 = blob(0, 5, 1.0);
        let empty = ExemplarMemory::new(3, d1.shape).unwrap();
        assert!(matches!(
            rebuild_memory(&model, &empty, &d1, 3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn training_set_is_a_disjoint_union() {
        let mut mem = ExemplarMemory::new(20, SampleShape::Vector { len: 2 }).unwrap();
        for c in 0..4 {
            mem.insert(c, 1, blob(c, 20, c as f64)).unwrap();
        }
        let incoming = blob(7, 500, 3.0);
        let s = build_training_set(&mem, &incoming).unwrap();
        assert_eq!(s.len(), 580);
        assert_eq!(s.counts.total(), 580);
        assert_eq!(s.counts.get(2).unwrap(), mem.get(2).unwrap().samples.len());
        assert_eq!(s.is_memory.iter().filter(|&&m| m).count(), 80);
        assert!(!s.is_memory[579]);
    }

    #[test]
    fn empty_memory_leaves_incoming_unchanged() {
        let mem = ExemplarMemory::new(20, SampleShape::Vector { len: 2 }).unwrap();
        let incoming = blob(0, 9, 0.0);
        let s = build_training_set(&mem, &incoming).unwrap();
        assert_eq!(s.data, incoming);
        assert!(s.is_memory.iter().all(|&m| !m));
    }

    #[test]
    fn overlapping_labels_are_rejected() {
        let mut mem = ExemplarMemory::new(5, SampleShape::Vector { len: 2 }).unwrap();
        mem.insert(1, 1, blob(1, 5, 0.0)).unwrap();
        assert!(matches!(
            build_training_set(&mem, &blob(1, 3, 0.0)),
            Err(Error::StreamContract(_))
        ));
    }

    #[test]
    fn manifest_restores_memory() {
        let mut source = blob(0, 10, 0.0);
        source = concat(&source, &blob(1, 10, 2.0));
        source.ids = (100..120).collect();
        let mut mem = ExemplarMemory::new(4, source.shape).unwrap();
        mem.insert(0, 1, source.subset(&[3, 1, 7])).unwrap();
        mem.insert(1, 2, source.subset(&[12, 10])).unwrap();
        let text = serde_json::to_string(&mem.manifest()).unwrap();
        let manifest: MemoryManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(manifest.classes[&0].indices, vec![103, 101, 107]);
        assert_eq!(
            ExemplarMemory::from_manifest(&manifest, &source).unwrap(),
            mem
        );
    }
}
