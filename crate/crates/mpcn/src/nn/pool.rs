//! Max pooling with argmax caches for the backward pass.

use ndarray::{Array4, Array5};

/// 2D max pooling over `[B, C, H, W]`, no padding.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
}

/// Cache of flat input indices (per output cell) of the winning elements.
pub struct Pool2dCache {
    argmax: Vec<usize>,
    in_dim: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        MaxPool2d { kernel, stride }
    }

    pub fn out_size(&self, size: usize) -> usize {
        assert!(size >= self.kernel, "pool window {} exceeds input {size}", self.kernel);
        (size - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Pool2dCache) {
        let (batch, c, h, w) = x.dim();
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let mut out = Array4::zeros((batch, c, ho, wo));
        let mut argmax = vec![0usize; batch * c * ho * wo];
        let xs = x.as_slice().expect("standard layout");
        let mut o = 0;
        for bi in 0..batch {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0;
                        for a in 0..self.kernel {
                            let ih = oh * self.stride + a;
                            for b in 0..self.kernel {
                                let iw = ow * self.stride + b;
                                let idx = base + ih * w + iw;
                                // Strict > keeps the first (row-major) winner
                                // on ties, fixing the backward routing.
                                if xs[idx] > best {
                                    best = xs[idx];
                                    best_at = idx;
                                }
                            }
                        }
                        out[[bi, ci, oh, ow]] = best;
                        argmax[o] = best_at;
                        o += 1;
                    }
                }
            }
        }
        (
            out,
            Pool2dCache {
                argmax,
                in_dim: (batch, c, h, w),
            },
        )
    }

    pub fn backward(&self, grad_out: &Array4<f64>, cache: &Pool2dCache) -> Array4<f64> {
        let mut dx = Array4::zeros(cache.in_dim);
        let dxs = dx.as_slice_mut().expect("standard layout");
        for (g, &at) in grad_out.iter().zip(cache.argmax.iter()) {
            dxs[at] += g;
        }
        dx
    }
}

/// 3D max pooling over `[B, C, D, H, W]`, no padding.
#[derive(Debug, Clone)]
pub struct MaxPool3d {
    pub kernel: usize,
    pub stride: usize,
}

pub struct Pool3dCache {
    argmax: Vec<usize>,
    in_dim: (usize, usize, usize, usize, usize),
}

impl MaxPool3d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        MaxPool3d { kernel, stride }
    }

    pub fn out_size(&self, size: usize) -> usize {
        assert!(size >= self.kernel, "pool window {} exceeds input {size}", self.kernel);
        (size - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, x: &Array5<f64>) -> (Array5<f64>, Pool3dCache) {
        let (batch, c, d, h, w) = x.dim();
        let (od, oh, ow) = (self.out_size(d), self.out_size(h), self.out_size(w));
        let mut out = Array5::zeros((batch, c, od, oh, ow));
        let mut argmax = vec![0usize; batch * c * od * oh * ow];
        let xs = x.as_slice().expect("standard layout");
        let mut o = 0;
        for bi in 0..batch {
            for ci in 0..c {
                let base = (bi * c + ci) * d * h * w;
                for odi in 0..od {
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_at = 0;
                            for a in 0..self.kernel {
                                let id = odi * self.stride + a;
                                for b in 0..self.kernel {
                                    let ih = ohi * self.stride + b;
                                    for e in 0..self.kernel {
                                        let iw = owi * self.stride + e;
                                        let idx = base + (id * h + ih) * w + iw;
                                        if xs[idx] > best {
                                            best = xs[idx];
                                            best_at = idx;
                                        }
                                    }
                                }
                            }
                            out[[bi, ci, odi, ohi, owi]] = best;
                            argmax[o] = best_at;
                            o += 1;
                        }
                    }
                }
            }
        }
        (
            out,
            Pool3dCache {
                argmax,
                in_dim: (batch, c, d, h, w),
            },
        )
    }

    pub fn backward(&self, grad_out: &Array5<f64>, cache: &Pool3dCache) -> Array5<f64> {
        let mut dx = Array5::zeros(cache.in_dim);
        let dxs = dx.as_slice_mut().expect("standard layout");
        for (g, &at) in grad_out.iter().zip(cache.argmax.iter()) {
            dxs[at] += g;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pool2d_matches_direct_max() {
        let mut rng = crate::test_rng(71);
        let x = Array4::from_shape_fn((2, 2, 6, 6), |_| rng.random::<f64>());
        let pool = MaxPool2d::new(2, 2);
        let (y, _) = pool.forward(&x);
        assert_eq!(y.dim(), (2, 2, 3, 3));
        for bi in 0..2 {
            for ci in 0..2 {
                for oh in 0..3 {
                    for ow in 0..3 {
                        let mut best = f64::NEG_INFINITY;
                        for a in 0..2 {
                            for b in 0..2 {
                                best = best.max(x[[bi, ci, oh * 2 + a, ow * 2 + b]]);
                            }
                        }
                        assert_eq!(y[[bi, ci, oh, ow]], best);
                    }
                }
            }
        }
    }

    #[test]
    fn pool2d_backward_routes_to_argmax_only() {
        let mut x = Array4::zeros((1, 1, 4, 4));
        x[[0, 0, 1, 2]] = 5.0;
        x[[0, 0, 3, 3]] = 7.0;
        let pool = MaxPool2d::new(2, 2);
        let (y, cache) = pool.forward(&x);
        let g = y.mapv(|_| 1.0);
        let dx = pool.backward(&g, &cache);
        // Windows (0,1) and (1,1) route to the two nonzero cells; the all-zero
        // windows route to their first element.
        assert_eq!(dx[[0, 0, 1, 2]], 1.0);
        assert_eq!(dx[[0, 0, 3, 3]], 1.0);
        assert_eq!(dx[[0, 0, 0, 0]], 1.0);
        assert_eq!(dx[[0, 0, 2, 0]], 1.0);
        assert_eq!(dx.sum(), 4.0);
    }

    #[test]
    fn pool3d_overlapping_windows_accumulate() {
        let mut rng = crate::test_rng(72);
        let x = Array5::from_shape_fn((1, 1, 3, 3, 3), |_| rng.random::<f64>());
        let pool = MaxPool3d::new(2, 1);
        let (y, cache) = pool.forward(&x);
        assert_eq!(y.dim(), (1, 1, 2, 2, 2));
        let g = y.mapv(|_| 1.0);
        let dx = pool.backward(&g, &cache);
        // Total gradient mass is conserved.
        assert_eq!(dx.sum(), 8.0);
        // The global max inside the overlap region collects several windows.
        let max_routed = dx.iter().cloned().fold(0.0, f64::max);
        assert!(max_routed >= 1.0);
    }

    #[test]
    fn pool3d_input_gradient_matches_finite_difference() {
        let mut rng = crate::test_rng(73);
        let x = Array5::from_shape_fn((1, 2, 4, 4, 4), |_| rng.random::<f64>());
        let pool = MaxPool3d::new(2, 2);
        let loss_of = |x: &Array5<f64>| {
            let (y, _) = pool.forward(x);
            y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, cache) = pool.forward(&x);
        let dx = pool.backward(&y.mapv(|v| 2.0 * v), &cache);
        let h = 1e-6;
        for idx in [[0, 0, 0, 0, 0], [0, 1, 2, 3, 1], [0, 0, 3, 3, 3]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss_of(&xp) - loss_of(&xm)) / (2.0 * h);
            assert!((dx[idx] - fd).abs() < 1e-6, "at {idx:?}: {} vs {fd}", dx[idx]);
        }
    }
}
