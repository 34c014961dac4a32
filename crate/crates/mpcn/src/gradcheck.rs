//! Central finite-difference gradient checking for any [`Module`].
//!
//! The caller supplies a closure that runs a full forward/backward pass and
//! returns the scalar loss, accumulating analytic gradients into the module.
//! The checker then perturbs sampled parameter coordinates one at a time and
//! compares the analytic gradient against `(f(x+h) - f(x-h)) / 2h`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{zero_grads, Module};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: String,
}

impl GradCheck {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.checked > 0,
            "gradient check compared no coordinates"
        );
        assert!(
            self.max_rel_err < tol,
            "gradient check failed: max relative error {} at {} (tolerance {tol})",
            self.max_rel_err,
            self.worst
        );
    }
}

/// Checks analytic gradients against central finite differences.
///
/// `loss` must be deterministic given the parameter values; it is invoked
/// repeatedly. Up to `samples_per_tensor` coordinates of every parameter
/// tensor are probed, chosen by a seeded RNG so failures reproduce.
/// Coordinates where both gradients are below 1e-7 are counted as agreeing;
/// the relative denominator is floored at 1e-6 to keep tiny gradients from
/// dominating the report.
pub fn check_gradients<M: Module>(
    model: &mut M,
    mut loss: impl FnMut(&mut M) -> f64,
    samples_per_tensor: usize,
    seed: u64,
) -> GradCheck {
    zero_grads(model);
    let _ = loss(model);

    // Snapshot analytic gradients and tensor sizes, in visitation order.
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, p| {
        let flat: Vec<f64> = p.grad.iter().copied().collect();
        analytic.push((name.to_string(), flat));
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan: Vec<Vec<usize>> = Vec::new();
    for (_, grads) in &analytic {
        let n = grads.len();
        let mut picks: Vec<usize> = if n <= samples_per_tensor {
            (0..n).collect()
        } else {
            let mut set = std::collections::BTreeSet::new();
            while set.len() < samples_per_tensor {
                set.insert(rng.random_range(0..n));
            }
            set.into_iter().collect()
        };
        picks.sort_unstable();
        plan.push(picks);
    }

    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    let mut worst = String::from("none");
    for (tensor_idx, picks) in plan.iter().enumerate() {
        for &flat_idx in picks {
            let theta = read_coord(model, tensor_idx, flat_idx);
            let h = 1e-5 * (1.0 + theta.abs());

            write_coord(model, tensor_idx, flat_idx, theta + h);
            zero_grads(model);
            let up = loss(model);
            write_coord(model, tensor_idx, flat_idx, theta - h);
            zero_grads(model);
            let down = loss(model);
            write_coord(model, tensor_idx, flat_idx, theta);

            let fd = (up - down) / (2.0 * h);
            let a = analytic[tensor_idx].1[flat_idx];
            checked += 1;
            if a.abs() < 1e-7 && fd.abs() < 1e-7 {
                continue;
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!(
                    "{}[{flat_idx}] analytic {a} vs finite-difference {fd}",
                    analytic[tensor_idx].0
                );
            }
        }
    }

    // Leave the model with its analytic gradients restored.
    zero_grads(model);
    let _ = loss(model);

    GradCheck {
        max_rel_err,
        checked,
        worst,
    }
}

fn read_coord<M: Module>(model: &mut M, tensor_idx: usize, flat_idx: usize) -> f64 {
    let mut out = 0.0;
    let mut i = 0;
    model.visit_params(&mut |_, p| {
        if i == tensor_idx {
            out = *p.value.iter().nth(flat_idx).expect("coordinate in range");
        }
        i += 1;
    });
    out
}

fn write_coord<M: Module>(model: &mut M, tensor_idx: usize, flat_idx: usize, v: f64) {
    let mut i = 0;
    model.visit_params(&mut |_, mut p| {
        if i == tensor_idx {
            *p.value.iter_mut().nth(flat_idx).expect("coordinate in range") = v;
        }
        i += 1;
    });
}
