//! Masked multi-head scaled dot-product attention.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;

use super::{Linear, Module, ParamViewMut};

/// Multi-head attention with a bias-free output projection.
///
/// Padding slots are masked out of the softmax entirely. A row whose slots
/// are all masked produces an exactly-zero context vector, so the caller's
/// residual path passes the query through unchanged.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub w_o: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    q: Array3<f64>,
    k: Array3<f64>,
    v: Array3<f64>,
    ctx: Array3<f64>,
    /// Softmax weights `[B, H, Tq, Tk]`; exactly 0 on masked slots.
    pub weights: Array4<f64>,
    /// Number of (batch, query) rows whose slots were all masked.
    pub all_masked_rows: usize,
}

impl MultiHeadAttention {
    pub fn new(embed: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && embed % heads == 0, "embed {embed} not divisible by heads {heads}");
        MultiHeadAttention {
            w_o: Linear::no_bias(embed, embed, rng),
            heads,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w_o.input_dim()
    }

    /// `q: [B, Tq, E]`, `k`/`v`: `[B, Tk, E]`, `mask: [B, Tk]` with `true`
    /// marking padding slots to exclude.
    pub fn forward(
        &self,
        q: &Array3<f64>,
        k: &Array3<f64>,
        v: &Array3<f64>,
        mask: &Array2<bool>,
    ) -> (Array3<f64>, AttentionCache) {
        let (b, tq, e) = q.dim();
        let (kb, tk, ke) = k.dim();
        assert_eq!((kb, ke), (b, e), "key batch/width mismatch");
        assert_eq!(v.dim(), (b, tk, e), "value shape mismatch");
        assert_eq!(mask.dim(), (b, tk), "mask shape mismatch");
        assert_eq!(e, self.embed_dim(), "attention width mismatch");
        let h = self.heads;
        let dh = e / h;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut weights = Array4::zeros((b, h, tq, tk));
        let mut ctx = Array3::zeros((b, tq, e));
        let mut all_masked_rows = 0usize;
        for bi in 0..b {
            let row_all_masked = (0..tk).all(|ti| mask[[bi, ti]]);
            if row_all_masked {
                all_masked_rows += tq;
                continue;
            }
            for hi in 0..h {
                let off = hi * dh;
                for qi in 0..tq {
                    let mut logits = vec![f64::NEG_INFINITY; tk];
                    let mut max_logit = f64::NEG_INFINITY;
                    for ti in 0..tk {
                        if mask[[bi, ti]] {
                            continue;
                        }
                        let mut dot = 0.0;
                        for j in 0..dh {
                            dot += q[[bi, qi, off + j]] * k[[bi, ti, off + j]];
                        }
                        let l = dot * scale;
                        logits[ti] = l;
                        max_logit = max_logit.max(l);
                    }
                    let mut denom = 0.0;
                    for ti in 0..tk {
                        if !mask[[bi, ti]] {
                            denom += (logits[ti] - max_logit).exp();
                        }
                    }
                    for ti in 0..tk {
                        if mask[[bi, ti]] {
                            continue;
                        }
                        let w = (logits[ti] - max_logit).exp() / denom;
                        weights[[bi, hi, qi, ti]] = w;
                        for j in 0..dh {
                            ctx[[bi, qi, off + j]] += w * v[[bi, ti, off + j]];
                        }
                    }
                }
            }
        }

        let ctx_flat = ctx.view().into_shape_with_order((b * tq, e)).unwrap().to_owned();
        let out_flat = self.w_o.forward(&ctx_flat);
        let out = out_flat.into_shape_with_order((b, tq, e)).unwrap();
        let cache = AttentionCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            ctx,
            weights,
            all_masked_rows,
        };
        (out, cache)
    }

    /// Returns `(dq, dk, dv)` and accumulates the output-projection gradient.
    pub fn backward(
        &mut self,
        grad_out: &Array3<f64>,
        cache: &AttentionCache,
    ) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
        let (b, tq, e) = grad_out.dim();
        let tk = cache.k.dim().1;
        let h = self.heads;
        let dh = e / h;
        let scale = 1.0 / (dh as f64).sqrt();

        let g_flat = grad_out
            .view()
            .into_shape_with_order((b * tq, e))
            .unwrap()
            .to_owned();
        let ctx_flat = cache
            .ctx
            .view()
            .into_shape_with_order((b * tq, e))
            .unwrap()
            .to_owned();
        let dctx = self
            .w_o
            .backward(&g_flat, &ctx_flat)
            .into_shape_with_order((b, tq, e))
            .unwrap();

        let mut dq = Array3::zeros(cache.q.raw_dim());
        let mut dk = Array3::zeros(cache.k.raw_dim());
        let mut dv = Array3::zeros(cache.v.raw_dim());
        for bi in 0..b {
            for hi in 0..h {
                let off = hi * dh;
                for qi in 0..tq {
                    // Gradient w.r.t. the softmax weights, then the logits.
                    let mut dw = vec![0.0; tk];
                    for ti in 0..tk {
                        let w = cache.weights[[bi, hi, qi, ti]];
                        if w == 0.0 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for j in 0..dh {
                            let g = dctx[[bi, qi, off + j]];
                            acc += g * cache.v[[bi, ti, off + j]];
                            dv[[bi, ti, off + j]] += w * g;
                        }
                        dw[ti] = acc;
                    }
                    let mut wdw = 0.0;
                    for ti in 0..tk {
                        wdw += cache.weights[[bi, hi, qi, ti]] * dw[ti];
                    }
                    for ti in 0..tk {
                        let w = cache.weights[[bi, hi, qi, ti]];
                        if w == 0.0 {
                            continue;
                        }
                        let dlogit = w * (dw[ti] - wdw);
                        for j in 0..dh {
                            dq[[bi, qi, off + j]] += dlogit * scale * cache.k[[bi, ti, off + j]];
                            dk[[bi, ti, off + j]] += dlogit * scale * cache.q[[bi, qi, off + j]];
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

impl Module for MultiHeadAttention {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        self.w_o.visit_params(&mut |n, p| f(&format!("w_o.{n}"), p));
    }
}
