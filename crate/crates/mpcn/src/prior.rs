//! Memory-prior fusion: project query, keys, and shape features, cross-attend,
//! and emit the fused prior feature for the decoder.
//!
//! The fusion is a single pre-projected attention block with two residual
//! branches: `e_q = Q + LN(MHA(Q, K, V))`, then `prior = e_q + LN(FFN(e_q))`.
//! Retrieved slots form a set; zero-padded slots are masked out of the
//! softmax entirely rather than attended to as zeros.

use ndarray::{Array2, Array3, Array4, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MpcnError, Result};
use crate::nn::{
    relu, relu_backward, LayerNorm, Linear, LnCache, Module, MultiHeadAttention, ParamViewMut,
};
use crate::nn::AttentionCache;

/// Fused prior features, one row of `embed` width per query.
pub type PriorFeature = Array2<f64>;

/// Widths and head count of the fusion block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Attention embedding width (output of all three projections).
    pub embed: usize,
    pub heads: usize,
    /// Hidden width of the position-wise feed-forward branch.
    pub ffn_hidden: usize,
    /// Number of memory slots retrieved per query.
    pub topk: usize,
    /// Width of query features and stored keys (d_e).
    pub query_dim: usize,
    /// Width of flattened shape-encoder features (d_v).
    pub value_dim: usize,
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return Err(MpcnError::config("prior widths must be positive"));
        }
        if self.topk == 0 {
            return Err(MpcnError::config("at least one retrieved slot required"));
        }
        if self.embed % self.heads != 0 {
            return Err(MpcnError::config(format!(
                "prior embedding {} not divisible by {} heads",
                self.embed, self.heads
            )));
        }
        if self.query_dim == 0 || self.value_dim == 0 {
            return Err(MpcnError::config("prior input widths must be positive"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let e = self.embed;
        2 * self.query_dim * e
            + self.value_dim * e
            + e * e
            + 2 * e
            + e * self.ffn_hidden + self.ffn_hidden
            + self.ffn_hidden * e + e
            + 2 * e
    }
}

/// The fusion block. Projections carry no bias (they are plain matrices);
/// the feed-forward branch uses one hidden rectifier layer of twice the
/// embedding width in the presets.
#[derive(Debug, Clone)]
pub struct PriorFusion {
    cfg: PriorConfig,
    w_q: Linear,
    w_k: Linear,
    w_v: Linear,
    mha: MultiHeadAttention,
    ln1: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    ln2: LayerNorm,
}

pub struct PriorCache {
    query: Array2<f64>,
    keys_flat: Array2<f64>,
    shapes_flat: Array2<f64>,
    slots: usize,
    attn: AttentionCache,
    ln1: LnCache,
    e_q: Array2<f64>,
    h_pre: Array2<f64>,
    h: Array2<f64>,
    ln2: LnCache,
}

impl PriorCache {
    /// Softmax weights `[B, heads, 1, k]`, exactly 0 on masked slots.
    pub fn attention_weights(&self) -> &Array4<f64> {
        &self.attn.weights
    }

    /// Queries whose slots were all masked (empty-memory fallback used).
    pub fn all_masked_rows(&self) -> usize {
        self.attn.all_masked_rows
    }
}

/// Gradients of `fuse_prior` w.r.t. its three inputs.
pub struct PriorGrads {
    pub query: Array2<f64>,
    pub keys: Array3<f64>,
    pub shape_feats: Array3<f64>,
}

impl PriorFusion {
    pub fn new(cfg: &PriorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(PriorFusion {
            w_q: Linear::no_bias(cfg.query_dim, cfg.embed, rng),
            w_k: Linear::no_bias(cfg.query_dim, cfg.embed, rng),
            w_v: Linear::no_bias(cfg.value_dim, cfg.embed, rng),
            mha: MultiHeadAttention::new(cfg.embed, cfg.heads, rng),
            ln1: LayerNorm::new(cfg.embed),
            ffn1: Linear::new(cfg.embed, cfg.ffn_hidden, rng),
            ffn2: Linear::new(cfg.ffn_hidden, cfg.embed, rng),
            ln2: LayerNorm::new(cfg.embed),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.cfg
    }

    /// `query: [B, d_e]`, `keys: [B, k, d_e]`, `shape_feats: [B, k, d_v]`,
    /// `pad_mask: [B, k]` with `true` marking zero-padded slots.
    /// Returns the fused prior `[B, embed]`.
    pub fn fuse_prior(
        &self,
        query: &Array2<f64>,
        keys: &Array3<f64>,
        shape_feats: &Array3<f64>,
        pad_mask: &Array2<bool>,
    ) -> (PriorFeature, PriorCache) {
        let (b, d_e) = query.dim();
        let (kb, slots, kd) = keys.dim();
        assert_eq!((kb, kd), (b, d_e), "key batch/width mismatch");
        assert!(slots >= 1, "at least one retrieved slot required");
        assert_eq!(
            shape_feats.dim(),
            (b, slots, self.cfg.value_dim),
            "shape feature dims mismatch"
        );
        assert_eq!(pad_mask.dim(), (b, slots), "pad mask dims mismatch");
        let e = self.cfg.embed;

        let q = self.w_q.forward(query);
        let keys_flat = keys
            .view()
            .into_shape_with_order((b * slots, d_e))
            .unwrap()
            .to_owned();
        let shapes_flat = shape_feats
            .view()
            .into_shape_with_order((b * slots, self.cfg.value_dim))
            .unwrap()
            .to_owned();
        let k3 = self
            .w_k
            .forward(&keys_flat)
            .into_shape_with_order((b, slots, e))
            .unwrap();
        let v3 = self
            .w_v
            .forward(&shapes_flat)
            .into_shape_with_order((b, slots, e))
            .unwrap();
        let q3 = q.view().into_shape_with_order((b, 1, e)).unwrap().to_owned();

        let (attn_out, attn) = self.mha.forward(&q3, &k3, &v3, pad_mask);
        let attn_flat = attn_out.into_shape_with_order((b, e)).unwrap();
        let (ln1_out, ln1) = self.ln1.forward(&attn_flat);
        let e_q = &q + &ln1_out;

        let h_pre = self.ffn1.forward(&e_q);
        let h = relu(&h_pre);
        let f = self.ffn2.forward(&h);
        let (ln2_out, ln2) = self.ln2.forward(&f);
        let prior = &e_q + &ln2_out;

        (
            prior,
            PriorCache {
                query: query.clone(),
                keys_flat,
                shapes_flat,
                slots,
                attn,
                ln1,
                e_q,
                h_pre,
                h,
                ln2,
            },
        )
    }

    /// Backpropagates `grad: [B, embed]`; parameter gradients accumulate.
    pub fn backward(&mut self, grad: &Array2<f64>, cache: &PriorCache) -> PriorGrads {
        let (b, e) = grad.dim();
        assert_eq!(e, self.cfg.embed);
        let slots = cache.slots;

        let g_f = self.ln2.backward(grad, &cache.ln2);
        let g_h = self.ffn2.backward(&g_f, &cache.h);
        let g_h_pre = relu_backward(&g_h, &cache.h_pre);
        let g_eq_ffn = self.ffn1.backward(&g_h_pre, &cache.e_q);
        let g_e_q = grad + &g_eq_ffn;

        let g_attn = self.ln1.backward(&g_e_q, &cache.ln1);
        let g_attn3 = g_attn.into_shape_with_order((b, 1, e)).unwrap();
        let (g_q3, g_k3, g_v3) = self.mha.backward(&g_attn3, &cache.attn);

        let g_q = &g_e_q + &g_q3.into_shape_with_order((b, e)).unwrap();
        let d_query = self.w_q.backward(&g_q, &cache.query);

        let g_k_flat = g_k3.into_shape_with_order((b * slots, e)).unwrap();
        let d_keys = self
            .w_k
            .backward(&g_k_flat, &cache.keys_flat)
            .into_shape_with_order((b, slots, self.cfg.query_dim))
            .unwrap();

        let g_v_flat = g_v3.into_shape_with_order((b * slots, e)).unwrap();
        let d_shapes = self
            .w_v
            .backward(&g_v_flat, &cache.shapes_flat)
            .into_shape_with_order((b, slots, self.cfg.value_dim))
            .unwrap();

        PriorGrads {
            query: d_query,
            keys: d_keys,
            shape_feats: d_shapes,
        }
    }
}

impl Module for PriorFusion {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        self.w_q.visit_params(&mut |n, p| f(&format!("w_q.{n}"), p));
        self.w_k.visit_params(&mut |n, p| f(&format!("w_k.{n}"), p));
        self.w_v.visit_params(&mut |n, p| f(&format!("w_v.{n}"), p));
        self.mha.visit_params(&mut |n, p| f(&format!("mha.{n}"), p));
        self.ln1.visit_params(&mut |n, p| f(&format!("ln1.{n}"), p));
        self.ffn1.visit_params(&mut |n, p| f(&format!("ffn1.{n}"), p));
        self.ffn2.visit_params(&mut |n, p| f(&format!("ffn2.{n}"), p));
        self.ln2.visit_params(&mut |n, p| f(&format!("ln2.{n}"), p));
    }
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {}
}

/// Builds the decoder conditioning: image features first, prior second.
pub fn concat_condition(image_feat: &Array2<f64>, prior: &PriorFeature) -> Array2<f64> {
    let (b, d_e) = image_feat.dim();
    let (pb, pe) = prior.dim();
    assert_eq!(b, pb, "batch mismatch in conditioning concat");
    let mut out = Array2::zeros((b, d_e + pe));
    out.slice_mut(ndarray::s![.., ..d_e]).assign(image_feat);
    out.slice_mut(ndarray::s![.., d_e..]).assign(prior);
    out
}

/// Splits a conditioning gradient back into (image, prior) parts.
pub fn split_condition_grad(grad: &Array2<f64>, d_e: usize) -> (Array2<f64>, Array2<f64>) {
    let image = grad.slice(ndarray::s![.., ..d_e]).to_owned();
    let prior = grad.slice(ndarray::s![.., d_e..]).to_owned();
    (image, prior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1, Axis};
    use rand::Rng;

    fn tiny_cfg() -> PriorConfig {
        PriorConfig {
            embed: 8,
            heads: 2,
            ffn_hidden: 16,
            topk: 3,
            query_dim: 6,
            value_dim: 4,
        }
    }

    fn random_inputs(
        b: usize,
        k: usize,
        cfg: &PriorConfig,
        rng: &mut impl Rng,
    ) -> (Array2<f64>, Array3<f64>, Array3<f64>, Array2<bool>) {
        let query = Array2::from_shape_fn((b, cfg.query_dim), |_| rng.random::<f64>() - 0.5);
        let keys = Array3::from_shape_fn((b, k, cfg.query_dim), |_| rng.random::<f64>() - 0.5);
        let shapes = Array3::from_shape_fn((b, k, cfg.value_dim), |_| rng.random::<f64>() - 0.5);
        let mask = Array2::from_elem((b, k), false);
        (query, keys, shapes, mask)
    }

    #[test]
    fn config_validation() {
        assert!(tiny_cfg().validate().is_ok());
        let mut bad = tiny_cfg();
        bad.embed = 9;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn param_count_matches_visitation() {
        let cfg = tiny_cfg();
        let mut rng = crate::test_rng(130);
        let mut fusion = PriorFusion::new(&cfg, &mut rng).unwrap();
        assert_eq!(crate::nn::param_count(&mut fusion), cfg.param_count());
    }

    #[test]
    fn single_slot_weight_is_exactly_one() {
        let cfg = tiny_cfg();
        let mut rng = crate::test_rng(131);
        let fusion = PriorFusion::new(&cfg, &mut rng).unwrap();
        let (q, k, s, m) = random_inputs(2, 1, &cfg, &mut rng);
        let (out, cache) = fusion.fuse_prior(&q, &k, &s, &m);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(cache.attention_weights().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn weights_sum_to_one_over_unmasked() {
        let cfg = tiny_cfg();
        let mut rng = crate::test_rng(132);
        let fusion = PriorFusion::new(&cfg, &mut rng).unwrap();
        let (q, k, s, mut m) = random_inputs(3, 5, &cfg, &mut rng);
        m[[1, 0]] = true;
        m[[1, 3]] = true;
        let (_, cache) = fusion.fuse_prior(&q, &k, &s, &m);
        let w = cache.attention_weights();
        for b in 0..3 {
            for h in 0..cfg.heads {
                let row: f64 = (0..5).map(|t| w[[b, h, 0, t]]).sum();
                assert_abs_diff_eq!(row, 1.0, epsilon = 1e-6);
                assert!((0..5).all(|t| w[[b, h, 0, t]] >= 0.0));
            }
        }
        assert_eq!(w[[1, 0, 0, 0]], 0.0);
        assert_eq!(w[[1, 1, 0, 3]], 0.0);
    }

    #[test]
    fn permutation_invariance_over_slots() {
        let cfg = tiny_cfg();
        let mut rng = crate::test_rng(133);
        let fusion = PriorFusion::new(&cfg, &mut rng).unwrap();
        let (q, k, s, mut m) = random_inputs(2, 4, &cfg, &mut rng);
        m[[0, 2]] = true;
        let (out, _) = fusion.fuse_prior(&q, &k, &s, &m);
        let perm = [2usize, 0, 3, 1];
        let mut kp = k.clone();
        let mut sp = s.clone();
        let mut mp = m.clone();
        for (dst, &src) in perm.iter().enumerate() {
            kp.index_axis_mut(Axis(1), dst)
                .assign(&k.index_axis(Axis(1), src));
            sp.index_axis_mut(Axis(1), dst)
                .assign(&s.index_axis(Axis(1), src));
            for b in 0..2 {
                mp[[b, dst]] = m[[b, src]];
            }
        }
        let (out_p, _) = fusion.fuse_prior(&q, &kp, &sp, &mp);
        let max_diff = (&out - &out_p)
            .iter()
            .fold(0.0f64, |acc, d| acc.max(d.abs()));
        assert!(max_diff < 1e-5, "permutation changed output by {max_diff}");
    }

    #[test]
    fn two_slot_blend_matches_hand_computed_softmax() {
        // One key equals the projected query direction, the other points the
        // opposite way with a large negative logit. With identity Q and K
        // projections the logits are known scalars, so the blend weights can
        // be computed by hand; feeding the pre-blended shape feature through
        // a single slot must then give the identical output (projections are
        // linear, and a single unmasked slot always gets weight 1).
        let cfg = PriorConfig {
            embed: 2,
            heads: 1,
            ffn_hidden: 4,
            topk: 2,
            query_dim: 2,
            value_dim: 3,
        };
        let mut rng = crate::test_rng(134);
        let mut fusion = PriorFusion::new(&cfg, &mut rng).unwrap();
        fusion.w_q.w.value = array![[1.0, 0.0], [0.0, 1.0]];
        fusion.w_k.w.value = array![[1.0, 0.0], [0.0, 1.0]];

        let query = array![[1.0, 0.0]];
        let keys = array![[[1.0, 0.0], [-20.0, 0.0]]];
        let s1 = [0.3, -0.7, 0.2];
        let s2 = [-1.1, 0.4, 0.9];
        let shapes = Array3::from_shape_fn((1, 2, 3), |(_, t, j)| if t == 0 { s1[j] } else { s2[j] });
        let mask = Array2::from_elem((1, 2), false);
        let (out_two, cache) = fusion.fuse_prior(&query, &keys, &shapes, &mask);

        let scale = 1.0 / (2.0f64).sqrt();
        let l1 = 1.0 * scale;
        let l2 = -20.0 * scale;
        let w1 = l1.exp() / (l1.exp() + l2.exp());
        let w2 = 1.0 - w1;
        assert_abs_diff_eq!(cache.attention_weights()[[0, 0, 0, 0]], w1, epsilon = 1e-12);
        assert_abs_diff_eq!(cache.attention_weights()[[0, 0, 0, 1]], w2, epsilon = 1e-12);

        let blended: Array1<f64> = (0..3).map(|j| w1 * s1[j] + w2 * s2[j]).collect();
        let shapes_one = Array3::from_shape_fn((1, 1, 3), |(_, _, j)| blended[j]);
        let keys_one = array![[[5.0, 5.0]]];
        let mask_one = Array2::from_elem((1, 1), false);
        let (out_one, _) = fusion.fuse_prior(&query, &keys_one, &shapes_one, &mask_one);
        for (a, b) in out_two.iter().zip(out_one.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn all_masked_falls_back_to_query_path() {
        let cfg = tiny_cfg();
        let mut rng = crate::test_rng(135);
        let fusion = PriorFusion::new(&cfg, &mut rng).unwrap();
        let (q, k, s, _) = random_inputs(2, 3, &cfg, &mut rng);
        let mask = Array2::from_elem((2, 3), true);
        let (out, cache) = fusion.fuse_prior(&q, &k, &s, &mask);
        assert_eq!(cache.all_masked_rows(), 2);
        assert!(out.iter().all(|v| v.is_finite()));
        // Masked-out slot contents are irrelevant to the output.
        let (q2, k2, s2, _) = random_inputs(2, 3, &cfg, &mut rng);
        let _ = q2;
        let (out_other, _) = fusion.fuse_prior(&q, &k2, &s2, &mask);
        assert_eq!(out, out_other);
    }

    #[test]
    fn fusion_gradient_check() {
        let cfg = tiny_cfg();
        let mut rng = crate::test_rng(136);
        let mut fusion = PriorFusion::new(&cfg, &mut rng).unwrap();
        let (q, k, s, mut m) = random_inputs(2, 3, &cfg, &mut rng);
        m[[0, 1]] = true;
        let probe = Array2::from_shape_fn((2, cfg.embed), |_| rng.random::<f64>() - 0.5);
        let loss = move |f: &mut PriorFusion| {
            let (out, cache) = f.fuse_prior(&q, &k, &s, &m);
            f.backward(&probe, &cache);
            (&out * &probe).sum()
        };
        check_gradients(&mut fusion, loss, 4, 137).assert_below(1e-3);
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = crate::test_rng(138);
        let mut fusion = PriorFusion::new(&cfg, &mut rng).unwrap();
        let (q, k, s, mut m) = random_inputs(2, 3, &cfg, &mut rng);
        m[[1, 2]] = true;
        let probe = Array2::from_shape_fn((2, cfg.embed), |_| rng.random::<f64>() - 0.5);
        let loss_of = |f: &PriorFusion, q: &Array2<f64>, k: &Array3<f64>, s: &Array3<f64>| {
            let (out, _) = f.fuse_prior(q, k, s, &m);
            (&out * &probe).sum()
        };
        let (_, cache) = fusion.fuse_prior(&q, &k, &s, &m);
        let grads = fusion.backward(&probe, &cache);
        let h = 1e-6;
        for idx in [[0usize, 2usize], [1, 5]] {
            let mut qp = q.clone();
            qp[idx] += h;
            let mut qm = q.clone();
            qm[idx] -= h;
            let fd = (loss_of(&fusion, &qp, &k, &s) - loss_of(&fusion, &qm, &k, &s)) / (2.0 * h);
            assert!((grads.query[idx] - fd).abs() / fd.abs().max(1e-6) < 1e-3);
        }
        for idx in [[0usize, 0usize, 1usize], [1, 1, 3]] {
            let mut sp = s.clone();
            sp[idx] += h;
            let mut sm = s.clone();
            sm[idx] -= h;
            let fd = (loss_of(&fusion, &q, &k, &sp) - loss_of(&fusion, &q, &k, &sm)) / (2.0 * h);
            assert!((grads.shape_feats[idx] - fd).abs() / fd.abs().max(1e-6) < 1e-3);
        }
        // Gradients on a masked slot's inputs are exactly zero.
        for j in 0..cfg.value_dim {
            assert_eq!(grads.shape_feats[[1, 2, j]], 0.0);
        }
        for j in 0..cfg.query_dim {
            assert_eq!(grads.keys[[1, 2, j]], 0.0);
        }
    }

    #[test]
    fn concat_is_image_then_prior() {
        let image = array![[1.0, 2.0, 3.0, 4.0]];
        let prior = array![[5.0, 6.0, 7.0]];
        let cond = concat_condition(&image, &prior);
        assert_eq!(cond.dim(), (1, 7));
        assert_eq!(cond.row(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        // Position-weighted checksum locks the (image, prior) order.
        let checksum: f64 = cond
            .row(0)
            .iter()
            .enumerate()
            .map(|(i, v)| (i + 1) as f64 * v)
            .sum();
        assert_abs_diff_eq!(checksum, 140.0, epsilon = 0.0);
    }

    #[test]
    fn zero_prior_conditions_on_image_alone() {
        let image = array![[1.0, -2.0], [0.5, 3.0]];
        let prior = Array2::zeros((2, 3));
        let cond = concat_condition(&image, &prior);
        assert_eq!(cond.dim(), (2, 5));
        assert_eq!(cond[[0, 0]], 1.0);
        assert_eq!(cond[[1, 1]], 3.0);
        assert!(cond.slice(ndarray::s![.., 2..]).iter().all(|&v| v == 0.0));
        let (gi, gp) = split_condition_grad(&cond, 2);
        assert_eq!(gi, image);
        assert_eq!(gp, prior);
    }
}
