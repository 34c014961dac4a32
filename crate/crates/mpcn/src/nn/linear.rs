//! Fully connected layer.

use ndarray::{Array2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{init_uniform, Module, Param, ParamViewMut};

/// `y = x W + b` with `W` of shape `[in, out]`. The bias is optional so the
/// attention projections can stay bias-free.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param<Ix2>,
    pub b: Option<Param<Ix1>>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::new(init_uniform(Ix2(input, output), input, rng)),
            b: Some(Param::new(init_uniform(Ix1(output), input, rng))),
        }
    }

    pub fn no_bias(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::new(init_uniform(Ix2(input, output), input, rng)),
            b: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.value.ncols()
    }

    /// Forward over a batch of rows. The cache is the input itself.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(
            x.ncols(),
            self.input_dim(),
            "linear input width {} != {}",
            x.ncols(),
            self.input_dim()
        );
        let mut y = x.dot(&self.w.value);
        if let Some(b) = &self.b {
            y += &b.value;
        }
        y
    }

    /// Accumulates dW and db, returns dx. `x` is the forward input.
    pub fn backward(&mut self, grad_out: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
        self.w.grad += &x.t().dot(grad_out);
        if let Some(b) = &mut self.b {
            b.grad += &grad_out.sum_axis(Axis(0));
        }
        grad_out.dot(&self.w.value.t())
    }
}

impl Module for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        f("w", self.w.view_mut());
        if let Some(b) = &mut self.b {
            f("b", b.view_mut());
        }
    }
}
