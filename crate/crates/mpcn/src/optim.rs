//! Adam optimizer over [`Module`] parameters.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::nn::Module;

struct Moments {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

/// Adam with bias correction. Moment buffers are keyed by parameter name, so
/// the update is independent of visitation order.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// untouched; call [`crate::nn::zero_grads`] before the next backward.
    pub fn step(&mut self, model: &mut impl Module) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let state = &mut self.state;
        model.visit_params(&mut |name, mut p| {
            let entry = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: ArrayD::zeros(p.grad.raw_dim()),
                v: ArrayD::zeros(p.grad.raw_dim()),
            });
            assert_eq!(
                entry.m.shape(),
                p.grad.shape(),
                "optimizer state shape changed for {name}"
            );
            entry.m.zip_mut_with(&p.grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            entry.v.zip_mut_with(&p.grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            ndarray::Zip::from(&mut p.value)
                .and(&entry.m)
                .and(&entry.v)
                .for_each(|w, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        });
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, ParamViewMut};
    use ndarray::{array, Array1, Ix1};

    struct Model {
        w: Param<Ix1>,
    }

    impl Module for Model {
        fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
            f("w", self.w.view_mut());
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first Adam step is lr * g / (|g| + eps'),
        // essentially lr * sign(g).
        let mut m = Model {
            w: Param::new(array![1.0, -2.0, 3.0]),
        };
        m.w.grad = array![0.5, -0.1, 4.0];
        let mut opt = Adam::new(1e-3);
        opt.step(&mut m);
        let expect = array![1.0 - 1e-3, -2.0 + 1e-3, 3.0 - 1e-3];
        for i in 0..3 {
            assert!((m.w.value[i] - expect[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_scalar_transcription_over_steps() {
        // Hand-rolled scalar Adam with a fixed gradient sequence.
        let grads = [0.3, -0.7, 1.2, 0.05];
        let (b1, b2, eps, lr): (f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.01);
        let mut w_ref = 0.5;
        let (mut m_ref, mut v_ref) = (0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m_ref = b1 * m_ref + (1.0 - b1) * g;
            v_ref = b2 * v_ref + (1.0 - b2) * g * g;
            let mhat = m_ref / (1.0 - b1.powi(t));
            let vhat = v_ref / (1.0 - b2.powi(t));
            w_ref -= lr * mhat / (vhat.sqrt() + eps);
        }

        let mut model = Model {
            w: Param::new(array![0.5]),
        };
        let mut opt = Adam::new(0.01);
        for &g in &grads {
            model.w.grad = array![g];
            opt.step(&mut model);
        }
        assert!((model.w.value[0] - w_ref).abs() < 1e-15);
        assert_eq!(opt.steps_taken(), 4);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let target = array![1.0, -3.0, 0.25, 8.0];
        let mut m = Model {
            w: Param::new(Array1::zeros(4)),
        };
        let mut opt = Adam::new(0.1);
        for _ in 0..2000 {
            m.w.grad = &m.w.value - &target;
            opt.step(&mut m);
            m.w.zero_grad();
        }
        for i in 0..4 {
            assert!(
                (m.w.value[i] - target[i]).abs() < 1e-3,
                "coordinate {i}: {} vs {}",
                m.w.value[i],
                target[i]
            );
        }
    }
}
