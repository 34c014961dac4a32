//! Plain f64 neural-network layers with explicit forward and backward passes.
//!
//! Every layer owns its parameters and accumulates gradients in place during
//! `backward`. Forward passes return the layer output together with a cache
//! holding whatever the backward pass needs. There is no autodiff graph; the
//! network blocks wire layer backward calls in reverse order by hand.

mod attention;
mod conv;
mod linear;
mod norm;
mod pool;

pub use attention::{AttentionCache, MultiHeadAttention};
pub use conv::{Conv2d, Conv3d, ConvTranspose3d};
pub use linear::Linear;
pub use norm::{BatchNorm, BnCache, LayerNorm, LnCache};
pub use pool::{MaxPool2d, MaxPool3d, Pool2dCache, Pool3dCache};

use ndarray::{Array, ArrayViewMutD, Dimension};
use rand::Rng;

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<D: Dimension> {
    pub value: Array<f64, D>,
    pub grad: Array<f64, D>,
}

impl<D: Dimension> Param<D> {
    pub fn new(value: Array<f64, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Mutable, rank-erased view of one parameter tensor, used by the optimizer,
/// checkpointing, and gradient checking.
pub struct ParamViewMut<'a> {
    pub value: ArrayViewMutD<'a, f64>,
    pub grad: ArrayViewMutD<'a, f64>,
}

impl<D: Dimension> Param<D> {
    pub fn view_mut(&mut self) -> ParamViewMut<'_> {
        ParamViewMut {
            value: self.value.view_mut().into_dyn(),
            grad: self.grad.view_mut().into_dyn(),
        }
    }
}

/// Anything holding trainable parameters. Visitation order is fixed by the
/// implementation and names are stable, so optimizer state and checkpoints
/// key off the names.
pub trait Module {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>));

    /// Non-trainable state that still belongs in checkpoints
    /// (batch-norm running statistics).
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {}
}

/// Zeroes every gradient accumulator in the module.
pub fn zero_grads(module: &mut impl Module) {
    module.visit_params(&mut |_, mut p| p.grad.fill(0.0));
}

/// Total number of trainable scalars.
pub fn param_count(module: &mut impl Module) -> usize {
    let mut n = 0;
    module.visit_params(&mut |_, p| n += p.value.len());
    n
}

/// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_uniform<D: Dimension>(
    shape: D,
    fan_in: usize,
    rng: &mut impl Rng,
) -> Array<f64, D> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array::from_shape_simple_fn(shape, || rng.random::<f64>() * 2.0 * bound - bound)
}

pub fn relu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of [`relu`] given the forward input.
pub fn relu_backward<D: Dimension>(grad: &Array<f64, D>, x: &Array<f64, D>) -> Array<f64, D> {
    let mut out = grad.clone();
    out.zip_mut_with(x, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    out
}

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Gradient of [`leaky_relu`] given the forward input.
pub fn leaky_relu_backward<D: Dimension>(
    grad: &Array<f64, D>,
    x: &Array<f64, D>,
) -> Array<f64, D> {
    let mut out = grad.clone();
    out.zip_mut_with(x, |g, &v| {
        if v <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    });
    out
}

pub fn sigmoid<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Gradient of [`sigmoid`] given the forward *output* `y`.
pub fn sigmoid_backward<D: Dimension>(grad: &Array<f64, D>, y: &Array<f64, D>) -> Array<f64, D> {
    let mut out = grad.clone();
    out.zip_mut_with(y, |g, &v| *g *= v * (1.0 - v));
    out
}
