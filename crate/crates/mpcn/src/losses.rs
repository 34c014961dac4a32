//! Training objectives: voxel-wise binary cross entropy, the shape-aware
//! contrastive loss, and their weighted total.

use ndarray::{Array2, Array5};

use crate::error::{MpcnError, Result};
use crate::voxelcore::{ProbVolume, VoxelGrid};

/// Clamp bound keeping log arguments strictly positive.
pub const BCE_EPS: f64 = 1e-7;

/// Similarity weight of a positive pair, `max(0, 1 - d * gamma)`.
pub type PairWeight = f64;

pub fn pair_weight(d: f64, gamma: f64) -> PairWeight {
    (1.0 - d * gamma).max(0.0)
}

fn bce_terms(pred: f64, gt: f64) -> (f64, f64) {
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let loss = -(gt * p.ln() + (1.0 - gt) * (1.0 - p).ln());
    let grad = if pred <= BCE_EPS || pred >= 1.0 - BCE_EPS {
        0.0
    } else {
        -gt / p + (1.0 - gt) / (1.0 - p)
    };
    (loss, grad)
}

/// Mean binary cross entropy over all voxels of one volume.
pub fn bce_loss(pred: &ProbVolume, gt: &VoxelGrid) -> Result<f64> {
    if pred.resolution() != gt.resolution() {
        return Err(MpcnError::shape(format!(
            "prediction resolution {} vs ground truth {}",
            pred.resolution(),
            gt.resolution()
        )));
    }
    let n = pred.data().len() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data().iter())
        .map(|(&p, &g)| bce_terms(p, g as f64).0)
        .sum();
    Ok(total / n)
}

/// Mean BCE over a batch of volumes plus the gradient w.r.t. the
/// probabilities. Both arrays are `[B, 1, r, r, r]`.
pub fn bce_batch(probs: &Array5<f64>, targets: &Array5<f64>) -> (f64, Array5<f64>) {
    assert_eq!(probs.dim(), targets.dim(), "bce operand shape mismatch");
    let batch = probs.dim().0 as f64;
    let voxels = (probs.len() / probs.dim().0) as f64;
    let mut grad = Array5::zeros(probs.dim());
    let mut total = 0.0;
    for ((idx, &p), g) in probs.indexed_iter().zip(targets.iter()) {
        let (l, dl) = bce_terms(p, *g);
        total += l;
        grad[idx] = dl / (batch * voxels);
    }
    (total / (batch * voxels), grad)
}

/// Everything the contrastive loss needs: raw (unnormalized) embeddings,
/// pairwise shape distances, and the three scalars of Eq-style weighting.
/// Dot products always use L2-normalized rows.
#[derive(Debug, Clone)]
pub struct ContrastBatch {
    raw: Array2<f64>,
    unit: Array2<f64>,
    norms: Vec<f64>,
    distances: Array2<f64>,
    pub tau: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl ContrastBatch {
    pub fn new(
        features: &Array2<f64>,
        distances: Array2<f64>,
        tau: f64,
        delta: f64,
        gamma: f64,
    ) -> Result<Self> {
        let n = features.dim().0;
        if n < 2 {
            return Err(MpcnError::config("contrastive batch needs at least two items"));
        }
        if distances.dim() != (n, n) {
            return Err(MpcnError::shape(format!(
                "distance matrix {:?} for {n} embeddings",
                distances.dim()
            )));
        }
        if tau <= 0.0 || gamma <= 0.0 || delta <= 0.0 {
            return Err(MpcnError::config("tau, delta, gamma must be positive"));
        }
        for i in 0..n {
            if distances[[i, i]] != 0.0 {
                return Err(MpcnError::config("distance matrix diagonal must be zero"));
            }
            for j in 0..i {
                if (distances[[i, j]] - distances[[j, i]]).abs() > 1e-9 {
                    return Err(MpcnError::config("distance matrix must be symmetric"));
                }
            }
        }
        let mut unit = features.clone();
        let mut norms = Vec::with_capacity(n);
        for mut row in unit.rows_mut() {
            let norm = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / norm);
            norms.push(norm);
        }
        Ok(ContrastBatch {
            raw: features.clone(),
            unit,
            norms,
            distances,
            tau,
            delta,
            gamma,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalized embeddings actually used in the dot products.
    pub fn unit_embeddings(&self) -> &Array2<f64> {
        &self.unit
    }
}

/// Loss value, gradient w.r.t. the raw embeddings, and positive coverage.
#[derive(Debug, Clone)]
pub struct ContrastOutput {
    pub loss: f64,
    pub grad: Array2<f64>,
    /// Queries that had at least one positive (d < delta) partner.
    pub covered_queries: usize,
    pub total_queries: usize,
}

/// Shape-aware contrastive loss: per query, positives are partners closer
/// than `delta` in shape distance, each weighted by `pair_weight`; the score
/// is `-log(sum_p w_p e^{s_p/tau} / (M_q * sum_{k != q} e^{s_k/tau}))`,
/// averaged over queries that have positives. Queries without positives (or
/// whose positives all carry zero weight) contribute nothing.
pub fn contrastive_3d_loss(batch: &ContrastBatch) -> ContrastOutput {
    let n = batch.len();
    let f = &batch.unit;
    let sims = f.dot(&f.t());
    let exp = sims.mapv(|s| (s / batch.tau).exp());

    let mut grad_unit = Array2::<f64>::zeros(f.raw_dim());
    let mut loss = 0.0;
    let mut covered = 0usize;

    let add_pair = |grad_unit: &mut Array2<f64>, q: usize, k: usize, coeff: f64| {
        let scaled = coeff / batch.tau;
        for j in 0..f.dim().1 {
            grad_unit[[q, j]] += scaled * f[[k, j]];
            grad_unit[[k, j]] += scaled * f[[q, j]];
        }
    };

    let mut pair_coeffs = Vec::new();
    for q in 0..n {
        let mut numer = 0.0;
        let mut denom = 0.0;
        let mut positives = 0usize;
        pair_coeffs.clear();
        for k in 0..n {
            if k == q {
                continue;
            }
            denom += exp[[q, k]];
            let d = batch.distances[[q, k]];
            if d < batch.delta {
                positives += 1;
                numer += pair_weight(d, batch.gamma) * exp[[q, k]];
            }
        }
        if positives == 0 || numer == 0.0 {
            continue;
        }
        covered += 1;
        loss += -(numer / (positives as f64 * denom)).ln();
        for k in 0..n {
            if k == q {
                continue;
            }
            let mut coeff = exp[[q, k]] / denom;
            let d = batch.distances[[q, k]];
            if d < batch.delta {
                coeff -= pair_weight(d, batch.gamma) * exp[[q, k]] / numer;
            }
            pair_coeffs.push((k, coeff));
        }
        for &(k, coeff) in &pair_coeffs {
            add_pair(&mut grad_unit, q, k, coeff);
        }
    }

    if covered == 0 {
        return ContrastOutput {
            loss: 0.0,
            grad: Array2::zeros(batch.raw.raw_dim()),
            covered_queries: 0,
            total_queries: n,
        };
    }

    let scale = 1.0 / covered as f64;
    loss *= scale;
    grad_unit.mapv_inplace(|g| g * scale);

    // Through the normalization: df/dr = (I - f f^T) / |r|.
    let mut grad = Array2::zeros(batch.raw.raw_dim());
    for q in 0..n {
        let fq = f.row(q);
        let gq = grad_unit.row(q);
        let dot = fq.dot(&gq);
        let inv = 1.0 / batch.norms[q];
        for j in 0..f.dim().1 {
            grad[[q, j]] = (gq[j] - dot * fq[j]) * inv;
        }
    }

    ContrastOutput {
        loss,
        grad,
        covered_queries: covered,
        total_queries: n,
    }
}

/// Total objective: reconstruction plus weighted contrastive term.
pub fn total_loss(rec: f64, nce: f64, lambda: f64) -> f64 {
    rec + lambda * nce
}
