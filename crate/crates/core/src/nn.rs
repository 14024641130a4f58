//! Dense layers with hand-written backward passes.
//!
//! Everything is f64 and batch-major: a batch is an `(n, features)` matrix.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Fully connected layer, `y = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// `None` marks a linear output layer.
    pub activation: Option<Activation>,
}

impl Dense {
    /// He-style normal initialization, zero bias.
    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Option<Activation>,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / inputs.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = Array2::from_shape_fn((outputs, inputs), |_| normal.sample(rng));
        Dense {
            weight,
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseGrad {
    pub fn zeros_like(layer: &Dense) -> Self {
        DenseGrad {
            weight: Array2::zeros(layer.weight.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }
}

/// Per-layer values retained from the forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Array2<f64>,
    pre: Array2<f64>,
}

/// Runs a stack of layers, optionally keeping the caches needed for backward.
pub fn forward_stack(
    layers: &[Dense],
    input: ArrayView2<'_, f64>,
    caches: Option<&mut Vec<LayerCache>>,
) -> Array2<f64> {
    let mut x = input.to_owned();
    let mut store = caches;
    for layer in layers {
        let mut pre = x.dot(&layer.weight.t());
        pre += &layer.bias;
        let out = match layer.activation {
            Some(act) => pre.mapv(|v| act.apply(v)),
            None => pre.clone(),
        };
        if let Some(c) = store.as_deref_mut() {
            c.push(LayerCache { input: x, pre });
        }
        x = out;
    }
    x
}

/// Backpropagates `grad_out` through the stack. Layer gradients are written
/// into `grads`; returns the gradient with respect to the stack input when
/// `need_input_grad` is set.
pub fn backward_stack(
    layers: &[Dense],
    caches: &[LayerCache],
    grad_out: Array2<f64>,
    grads: &mut [DenseGrad],
    need_input_grad: bool,
) -> Option<Array2<f64>> {
    debug_assert_eq!(layers.len(), caches.len());
    let mut g = grad_out;
    for (idx, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        if let Some(act) = layer.activation {
            g.zip_mut_with(&cache.pre, |gv, &p| *gv *= act.derivative(p));
        }
        grads[idx].weight += &g.t().dot(&cache.input);
        grads[idx].bias += &g.sum_axis(Axis(0));
        if idx > 0 || need_input_grad {
            g = g.dot(&layer.weight);
        }
    }
    if need_input_grad {
        Some(g)
    } else {
        None
    }
}
