//! Batch and layer normalization.

use ndarray::{Array1, Array2, Array3, Array4, Array5, ArrayView3, ArrayViewMutD, Axis, Ix1};

use super::{Module, Param, ParamViewMut};

/// Batch normalization over the channel axis of `[B, C, spatial...]`.
///
/// Training mode normalizes with the biased batch variance and tracks
/// running statistics with momentum 0.1 (running variance uses the unbiased
/// estimate). Evaluation mode normalizes with the running statistics, making
/// outputs independent across batch elements.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param<Ix1>,
    pub beta: Param<Ix1>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache {
    xhat: Array3<f64>,
    inv_std: Array1<f64>,
    train: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Array1::ones(channels)),
            beta: Param::new(Array1::zeros(channels)),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Core pass over `[B, C, S]` with spatial dims flattened into `S`.
    fn forward_core(&mut self, x: ArrayView3<f64>, train: bool) -> (Array3<f64>, BnCache) {
        let (b, c, s) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm expects {} channels", self.channels());
        let n = (b * s) as f64;
        let mut out = Array3::zeros((b, c, s));
        let mut xhat = Array3::zeros((b, c, s));
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            let (mean, var) = if train {
                let mut acc = 0.0;
                for bi in 0..b {
                    for si in 0..s {
                        acc += x[[bi, ci, si]];
                    }
                }
                let mean = acc / n;
                let mut sq = 0.0;
                for bi in 0..b {
                    for si in 0..s {
                        let d = x[[bi, ci, si]] - mean;
                        sq += d * d;
                    }
                }
                let var = sq / n;
                let unbiased = if n > 1.0 { sq / (n - 1.0) } else { var };
                self.running_mean[ci] =
                    (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
                self.running_var[ci] =
                    (1.0 - self.momentum) * self.running_var[ci] + self.momentum * unbiased;
                (mean, var)
            } else {
                (self.running_mean[ci], self.running_var[ci])
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = istd;
            let (g, be) = (self.gamma.value[ci], self.beta.value[ci]);
            for bi in 0..b {
                for si in 0..s {
                    let xh = (x[[bi, ci, si]] - mean) * istd;
                    xhat[[bi, ci, si]] = xh;
                    out[[bi, ci, si]] = g * xh + be;
                }
            }
        }
        (out, BnCache { xhat, inv_std, train })
    }

    fn backward_core(&mut self, grad_out: &Array3<f64>, cache: &BnCache) -> Array3<f64> {
        let (b, c, s) = grad_out.dim();
        let n = (b * s) as f64;
        let mut dx = Array3::zeros((b, c, s));
        for ci in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for bi in 0..b {
                for si in 0..s {
                    let g = grad_out[[bi, ci, si]];
                    sum_g += g;
                    sum_gx += g * cache.xhat[[bi, ci, si]];
                }
            }
            self.beta.grad[ci] += sum_g;
            self.gamma.grad[ci] += sum_gx;
            let scale = self.gamma.value[ci] * cache.inv_std[ci];
            if cache.train {
                let mean_g = sum_g / n;
                let mean_gx = sum_gx / n;
                for bi in 0..b {
                    for si in 0..s {
                        let g = grad_out[[bi, ci, si]];
                        dx[[bi, ci, si]] =
                            scale * (g - mean_g - cache.xhat[[bi, ci, si]] * mean_gx);
                    }
                }
            } else {
                for bi in 0..b {
                    for si in 0..s {
                        dx[[bi, ci, si]] = scale * grad_out[[bi, ci, si]];
                    }
                }
            }
        }
        dx
    }

    pub fn forward2d(&mut self, x: &Array4<f64>, train: bool) -> (Array4<f64>, BnCache) {
        let (b, c, h, w) = x.dim();
        let flat = x.view().into_shape_with_order((b, c, h * w)).unwrap();
        let (y, cache) = self.forward_core(flat, train);
        (y.into_shape_with_order((b, c, h, w)).unwrap(), cache)
    }

    pub fn backward2d(&mut self, grad_out: &Array4<f64>, cache: &BnCache) -> Array4<f64> {
        let (b, c, h, w) = grad_out.dim();
        let flat = grad_out
            .view()
            .into_shape_with_order((b, c, h * w))
            .unwrap()
            .to_owned();
        let dx = self.backward_core(&flat, cache);
        dx.into_shape_with_order((b, c, h, w)).unwrap()
    }

    pub fn forward3d(&mut self, x: &Array5<f64>, train: bool) -> (Array5<f64>, BnCache) {
        let (b, c, d, h, w) = x.dim();
        let flat = x.view().into_shape_with_order((b, c, d * h * w)).unwrap();
        let (y, cache) = self.forward_core(flat, train);
        (y.into_shape_with_order((b, c, d, h, w)).unwrap(), cache)
    }

    pub fn backward3d(&mut self, grad_out: &Array5<f64>, cache: &BnCache) -> Array5<f64> {
        let (b, c, d, h, w) = grad_out.dim();
        let flat = grad_out
            .view()
            .into_shape_with_order((b, c, d * h * w))
            .unwrap()
            .to_owned();
        let dx = self.backward_core(&flat, cache);
        dx.into_shape_with_order((b, c, d, h, w)).unwrap()
    }
}

impl Module for BatchNorm {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        f("gamma", self.gamma.view_mut());
        f("beta", self.beta.view_mut());
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f("running_mean", self.running_mean.view_mut().into_dyn());
        f("running_var", self.running_var.view_mut().into_dyn());
    }
}

/// Layer normalization over the last axis of `[N, D]`.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param<Ix1>,
    pub beta: Param<Ix1>,
    pub eps: f64,
}

pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Array1::ones(dim)),
            beta: Param::new(Array1::zeros(dim)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let (n, d) = x.dim();
        assert_eq!(d, self.gamma.value.len(), "layernorm width mismatch");
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let row = x.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (x[[i, j]] - mean) * istd;
                xhat[[i, j]] = xh;
                out[[i, j]] = self.gamma.value[j] * xh + self.beta.value[j];
            }
        }
        (out, LnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, grad_out: &Array2<f64>, cache: &LnCache) -> Array2<f64> {
        let (n, d) = grad_out.dim();
        self.beta.grad += &grad_out.sum_axis(Axis(0));
        self.gamma.grad += &(grad_out * &cache.xhat).sum_axis(Axis(0));
        let mut dx = Array2::zeros((n, d));
        for i in 0..n {
            let mut mean_gg = 0.0;
            let mut mean_ggx = 0.0;
            for j in 0..d {
                let gg = grad_out[[i, j]] * self.gamma.value[j];
                mean_gg += gg;
                mean_ggx += gg * cache.xhat[[i, j]];
            }
            mean_gg /= d as f64;
            mean_ggx /= d as f64;
            for j in 0..d {
                let gg = grad_out[[i, j]] * self.gamma.value[j];
                dx[[i, j]] = cache.inv_std[i] * (gg - mean_gg - cache.xhat[[i, j]] * mean_ggx);
            }
        }
        dx
    }
}

impl Module for LayerNorm {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        f("gamma", self.gamma.view_mut());
        f("beta", self.beta.view_mut());
    }
}
