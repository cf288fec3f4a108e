//! Gated fusion of the tower outputs and the token classifier.

use rand::Rng;

use crate::corpus::{Label, LabelSequence, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub gate_weight: ParamId,
    pub gate_bias: ParamId,
    /// Optional `d → d` GELU layer in front of the classifier.
    pub hidden: Option<(ParamId, ParamId)>,
    pub classifier_weight: ParamId,
    pub classifier_bias: ParamId,
}

impl HeadParams {
    pub fn register(store: &mut ParamStore, d: usize, hidden_layer: bool, rng: &mut impl Rng) -> Self {
        let gate_weight = store.add("gate.w6", Tensor::xavier(d, d, rng));
        let gate_bias = store.add("gate.c", Tensor::zeros(&[d]));
        let hidden = hidden_layer.then(|| {
            (
                store.add("classifier.hidden_w", Tensor::xavier(d, d, rng)),
                store.add("classifier.hidden_b", Tensor::zeros(&[d])),
            )
        });
        HeadParams {
            gate_weight,
            gate_bias,
            hidden,
            classifier_weight: store.add("classifier.w", Tensor::xavier(d, NUM_CLASSES, rng)),
            classifier_bias: store.add("classifier.b", Tensor::zeros(&[NUM_CLASSES])),
        }
    }
}

/// `e = s ⊙ e_b + (1 − s) ⊙ e_t` for a given gate `s`.
pub fn fuse_with_gate(g: &mut Graph<'_>, e_b: Var, e_t: Var, gate: Var) -> Result<Var> {
    let left = g.mul(gate, e_b)?;
    let complement = g.affine(gate, -1.0, 1.0);
    let right = g.mul(complement, e_t)?;
    g.add(left, right)
}

/// Learned gate `s = σ(e_b W6 + c)` conditioned on the left tower only.
/// Returns the fused embedding and the gate values.
pub fn fuse(g: &mut Graph<'_>, e_b: Var, e_t: Var, w6: Var, c: Var) -> Result<(Var, Var)> {
    if g.value(e_b).shape() != g.value(e_t).shape() {
        return Err(Error::shape("fuse", g.value(e_b).shape(), g.value(e_t).shape()));
    }
    let pre = g.matmul(e_b, w6)?;
    let pre = g.add_row(pre, c)?;
    let gate = g.sigmoid(pre);
    Ok((fuse_with_gate(g, e_b, e_t, gate)?, gate))
}

/// `logits = e W + b`, optionally preceded by a GELU hidden layer.
pub fn classify(g: &mut Graph<'_>, bound: &Bound, head: &HeadParams, e: Var, gelu_tanh: bool) -> Result<Var> {
    let mut x = e;
    if let Some((w, b)) = head.hidden {
        let h = g.matmul(x, bound[w])?;
        let h = g.add_row(h, bound[b])?;
        x = g.gelu(h, gelu_tanh);
    }
    let logits = g.matmul(x, bound[head.classifier_weight])?;
    g.add_row(logits, bound[head.classifier_bias])
}

/// Mean cross entropy of the one-hot expanded labels. With `include`, only
/// the flagged rows count (used to drop padding).
pub fn model_loss(g: &mut Graph<'_>, logits: Var, labels: &[Label], include: Option<&[bool]>) -> Result<Var> {
    match include {
        None => {
            let onehot = LabelSequence::from_ids(&labels.iter().map(|l| l.id()).collect::<Vec<_>>())?.onehot();
            g.cross_entropy(logits, &onehot)
        }
        Some(mask) => {
            let targets: Vec<usize> = labels.iter().map(|l| l.class_index()).collect();
            g.cross_entropy_indices(logits, &targets, Some(mask))
        }
    }
}

/// Row-wise argmax; ties go to the lowest class id.
pub fn argmax_labels(logits: &Tensor) -> Vec<Label> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            Label::from_class_index(best)
        })
        .collect()
}
