//! The two encoder towers.
//!
//! The left tower is a conventional post-norm transformer encoder with
//! multi-head attention over all non-pad positions. The right tower attends
//! only along dependency edges:
//!
//! ```text
//! a_ik = (v_i W1)(v_k W2)ᵀ                    for k in N(i)
//! α_i  = softmax over N(i) of a_i·
//! o_i  = Σ_k α_ik (v_k W3) W4
//! ō_i  = v_i + γ (o_i − μ_i) / (σ_i² + ε) + β
//! e_i  = ō_i + γ' (f_i − μ'_i) / (σ'_i² + ε) + β',   f_i = GELU(ō_i W5 + b)
//! ```
//!
//! The normaliser divides by the variance itself, not its square root, and
//! γ, β are scalars. `standard_layernorm` switches both to the usual form.

use rand::Rng;

use crate::error::Result;
use crate::model::ModelConfig;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct LeftLayer {
    pub wq: ParamId,
    pub bq: ParamId,
    /// No key bias: it shifts every score in a softmax row equally.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub ffn_in: ParamId,
    pub ffn_in_bias: ParamId,
    pub ffn_out: ParamId,
    pub ffn_out_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

impl LeftLayer {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, ffn: usize, rng: &mut impl Rng) -> Self {
        let mut w = |name: &str, rows: usize, cols: usize, rng: &mut _| {
            store.add(format!("{prefix}.{name}"), Tensor::xavier(rows, cols, rng))
        };
        let wq = w("wq", d, d, rng);
        let wk = w("wk", d, d, rng);
        let wv = w("wv", d, d, rng);
        let wo = w("wo", d, d, rng);
        let ffn_in = w("ffn_in", d, ffn, rng);
        let ffn_out = w("ffn_out", ffn, d, rng);
        let mut c = |name: &str, len: usize, value: f64| store.add(format!("{prefix}.{name}"), Tensor::full(&[len], value));
        LeftLayer {
            wq,
            bq: c("bq", d, 0.0),
            wk,
            wv,
            bv: c("bv", d, 0.0),
            wo,
            bo: c("bo", d, 0.0),
            norm1_gain: c("norm1_gain", d, 1.0),
            norm1_bias: c("norm1_bias", d, 0.0),
            ffn_in,
            ffn_in_bias: c("ffn_in_bias", ffn, 0.0),
            ffn_out,
            ffn_out_bias: c("ffn_out_bias", d, 0.0),
            norm2_gain: c("norm2_gain", d, 1.0),
            norm2_bias: c("norm2_bias", d, 0.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RightLayer {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub w4: ParamId,
    pub gamma1: ParamId,
    pub beta1: ParamId,
    pub w5: ParamId,
    pub b: ParamId,
    pub gamma2: ParamId,
    pub beta2: ParamId,
}

impl RightLayer {
    /// γ and β are scalars unless `per_feature_norm` is set.
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, per_feature_norm: bool, rng: &mut impl Rng) -> Self {
        let mut w = |name: &str, rng: &mut _| store.add(format!("{prefix}.{name}"), Tensor::xavier(d, d, rng));
        let w1 = w("w1", rng);
        let w2 = w("w2", rng);
        let w3 = w("w3", rng);
        let w4 = w("w4", rng);
        let w5 = w("w5", rng);
        let norm_len = if per_feature_norm { d } else { 1 };
        let mut c = |name: &str, len: usize, value: f64| store.add(format!("{prefix}.{name}"), Tensor::full(&[len], value));
        RightLayer {
            w1,
            w2,
            w3,
            w4,
            gamma1: c("gamma1", norm_len, 1.0),
            beta1: c("beta1", norm_len, 0.0),
            w5,
            b: c("b", d, 0.0),
            gamma2: c("gamma2", norm_len, 1.0),
            beta2: c("beta2", norm_len, 0.0),
        }
    }
}

/// Multi-head attention over stacked segments of `seq_len` rows. Returns the
/// concatenated head outputs and each head's attention matrix.
pub fn segmented_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: &[bool],
    seq_len: usize,
    scale: Option<f64>,
) -> Result<(Var, Vec<Var>)> {
    let d = g.value(q).cols();
    let dv = g.value(v).cols();
    let (hd, hv) = (d / heads, dv / heads);
    let mut outs = Vec::with_capacity(heads);
    let mut alphas = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * hd, hd)?, g.slice_cols(k, h * hd, hd)?, g.slice_cols(v, h * hv, hv)?)
        };
        let mut scores = g.seg_scores(qh, kh, seq_len)?;
        if let Some(s) = scale {
            scores = g.affine(scores, s, 0.0);
        }
        let alpha = g.masked_softmax(scores, mask)?;
        outs.push(g.seg_weighted_sum(alpha, vh, seq_len)?);
        alphas.push(alpha);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, alphas))
}

fn linear(g: &mut Graph<'_>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

fn layer_norm(g: &mut Graph<'_>, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
    let n = g.normalize_rows(x, eps, true)?;
    let n = g.mul_row(n, gain)?;
    g.add_row(n, bias)
}

/// Left tower: scaled multi-head attention with pad keys masked out,
/// residual + layer norm, GELU feed-forward, residual + layer norm.
pub fn left_encode(
    g: &mut Graph<'_>,
    bound: &Bound,
    layers: &[LeftLayer],
    config: &ModelConfig,
    v: Var,
    key_mask: &[bool],
    seq_len: usize,
) -> Result<Var> {
    let scale = 1.0 / ((config.d_model / config.left_heads) as f64).sqrt();
    let mut x = v;
    for layer in layers {
        let q = linear(g, x, bound[layer.wq], Some(bound[layer.bq]))?;
        let k = linear(g, x, bound[layer.wk], None)?;
        let val = linear(g, x, bound[layer.wv], Some(bound[layer.bv]))?;
        let (att, _) = segmented_attention(g, q, k, val, config.left_heads, key_mask, seq_len, Some(scale))?;
        let att = linear(g, att, bound[layer.wo], Some(bound[layer.bo]))?;
        let res = g.add(x, att)?;
        let x1 = layer_norm(g, res, bound[layer.norm1_gain], bound[layer.norm1_bias], config.norm_eps)?;
        let h = linear(g, x1, bound[layer.ffn_in], Some(bound[layer.ffn_in_bias]))?;
        let h = g.gelu(h, config.gelu_tanh);
        let f = linear(g, h, bound[layer.ffn_out], Some(bound[layer.ffn_out_bias]))?;
        let res = g.add(x1, f)?;
        x = layer_norm(g, res, bound[layer.norm2_gain], bound[layer.norm2_bias], config.norm_eps)?;
    }
    Ok(x)
}

/// Dependency-masked attention output and the per-head attention matrices.
#[derive(Clone, Debug)]
pub struct DepAttention {
    pub output: Var,
    pub alpha: Vec<Var>,
}

/// `o_i = Σ_{k∈N(i)} α_ik (v_k W3) W4` with `α_i = softmax_{N(i)}((v_i W1)(v_k W2)ᵀ)`.
/// Unscaled unless `right_attention_scaling` is set.
pub fn dep_attention(
    g: &mut Graph<'_>,
    bound: &Bound,
    layer: &RightLayer,
    config: &ModelConfig,
    v: Var,
    adjacency: &[bool],
    seq_len: usize,
) -> Result<DepAttention> {
    let q = g.matmul(v, bound[layer.w1])?;
    let k = g.matmul(v, bound[layer.w2])?;
    let val = g.matmul(v, bound[layer.w3])?;
    let scale = config
        .right_attention_scaling
        .then(|| 1.0 / ((config.d_model / config.right_heads) as f64).sqrt());
    let (att, alpha) = segmented_attention(g, q, k, val, config.right_heads, adjacency, seq_len, scale)?;
    let output = g.matmul(att, bound[layer.w4])?;
    Ok(DepAttention { output, alpha })
}

/// `v + γ (o − μ) / (σ² + ε) + β` per row; `standard` uses `√(σ² + ε)`.
pub fn paper_add_norm(g: &mut Graph<'_>, v: Var, o: Var, gamma: Var, beta: Var, eps: f64, standard: bool) -> Result<Var> {
    let n = g.normalize_rows(o, eps, standard)?;
    let n = g.mul_row(n, gamma)?;
    let n = g.add_row(n, beta)?;
    g.add(v, n)
}

#[derive(Clone, Debug)]
pub struct RightOutput {
    pub output: Var,
    /// Per layer, per head attention matrices.
    pub alpha: Vec<Vec<Var>>,
}

pub fn right_encode(
    g: &mut Graph<'_>,
    bound: &Bound,
    layers: &[RightLayer],
    config: &ModelConfig,
    v: Var,
    adjacency: &[bool],
    seq_len: usize,
) -> Result<RightOutput> {
    let eps = config.norm_eps;
    let standard = config.standard_layernorm;
    let mut x = v;
    let mut alpha = Vec::with_capacity(layers.len());
    for layer in layers {
        let att = dep_attention(g, bound, layer, config, x, adjacency, seq_len)?;
        let o_bar = paper_add_norm(g, x, att.output, bound[layer.gamma1], bound[layer.beta1], eps, standard)?;
        let f = linear(g, o_bar, bound[layer.w5], Some(bound[layer.b]))?;
        let f = g.gelu(f, config.gelu_tanh);
        x = paper_add_norm(g, o_bar, f, bound[layer.gamma2], bound[layer.beta2], eps, standard)?;
        alpha.push(att.alpha);
    }
    Ok(RightOutput { output: x, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize) -> ModelConfig {
        ModelConfig {
            d_model: d,
            left_heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn add_norm_edge_cases() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![1.0, -1.0, 0.5]]));
        let o = g.constant(Tensor::from_rows(&[vec![0.7; 3], vec![3.0, -2.0, 1.0]]));
        let gamma = g.constant(Tensor::scalar(1.3));
        let beta = g.constant(Tensor::scalar(0.25));
        let out = paper_add_norm(&mut g, v, o, gamma, beta, 1e-5, false).unwrap();
        let row0: Vec<f64> = [0.1, 0.2, 0.3].iter().map(|x| x + 0.25).collect();
        assert_eq!(g.value(out).row(0), &row0[..]);

        let zero = g.constant(Tensor::scalar(0.0));
        let out = paper_add_norm(&mut g, v, o, zero, zero, 1e-5, false).unwrap();
        assert_eq!(g.value(out), g.value(v));
    }

    #[test]
    fn isolated_token_attends_to_itself() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = RightLayer::register(&mut store, "r", d, false, &mut rng);
        let vt = Tensor::uniform(&[3, d], 1.0, &mut rng);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let v = g.constant(vt.clone());
        let eye: Vec<bool> = (0..9).map(|i| i % 4 == 0).collect();
        let att = dep_attention(&mut g, &bound, &layer, &cfg(d), v, &eye, 3).unwrap();
        let vw3 = g.matmul(v, bound[layer.w3]).unwrap();
        let expected = g.matmul(vw3, bound[layer.w4]).unwrap();
        assert_eq!(g.value(att.output), g.value(expected));
    }

    #[test]
    fn empty_right_stack_is_identity() {
        let mut g = Graph::new();
        let vt = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let v = g.constant(vt.clone());
        let bound = Bound::from_vars(Vec::new());
        let out = right_encode(&mut g, &bound, &[], &cfg(2), v, &[true; 4], 2).unwrap();
        assert_eq!(g.value(out.output), &vt);
    }

    #[test]
    fn left_single_real_token_attends_to_itself() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layers = vec![LeftLayer::register(&mut store, "l", d, 8, &mut rng)];
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let v = g.constant(Tensor::uniform(&[3, d], 1.0, &mut rng));
        let pad = [true, false, false];
        let key_mask: Vec<bool> = (0..3).flat_map(|_| pad).collect();
        let config = cfg(d);
        let q = g.matmul(v, bound[layers[0].wq]).unwrap();
        let (_, alphas) = segmented_attention(&mut g, q, q, v, 2, &key_mask, 3, Some(0.5)).unwrap();
        for a in alphas {
            for r in 0..3 {
                assert_eq!(g.value(a).row(r), &[1.0, 0.0, 0.0]);
            }
        }
        left_encode(&mut g, &bound, &layers, &config, v, &key_mask, 3).unwrap();
    }
}
