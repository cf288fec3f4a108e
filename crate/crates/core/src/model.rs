//! The full two-tower token classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AdjacencyOptions, AnnotatedSentence, Label};
use crate::embed::{embed, EmbeddingTables, EncodedBatch, Vocabulary};
use crate::error::{Error, Result};
use crate::head::{argmax_labels, classify, fuse, fuse_with_gate, model_loss, HeadParams};
use crate::params::{Bound, ParamStore};
use crate::tensor::gradcheck::{finite_diff_check, GradCheckReport};
use crate::tensor::{Graph, Tensor, Var};
use crate::towers::{left_encode, right_encode, LeftLayer, RightLayer};

/// Which towers feed the classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Both towers with the learned gate.
    #[default]
    Full,
    /// Gate pinned to 1: standard encoder over token + position + POS embeddings.
    LeftOnly,
    /// Gate pinned to 0: dependency-masked tower only.
    RightOnly,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Ablation::Full),
            "left-only" => Ok(Ablation::LeftOnly),
            "right-only" => Ok(Ablation::RightOnly),
            _ => Err(format!("unknown ablation `{s}` (full, left-only, right-only)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub left_layers: usize,
    pub right_layers: usize,
    pub left_heads: usize,
    pub right_heads: usize,
    /// Left-tower feed-forward width; 0 means `4 · d_model`.
    pub ffn_width: usize,
    /// Use `√(σ² + ε)` and per-feature γ/β in the right tower.
    pub standard_layernorm: bool,
    /// Scale right-tower affinities by `1/√d_head`.
    pub right_attention_scaling: bool,
    pub norm_eps: f64,
    pub gelu_tanh: bool,
    pub ablation: Ablation,
    pub classifier_hidden: bool,
    /// Give the right tower its own embedding tables.
    pub separate_tower_embeddings: bool,
    /// Count padding positions in the loss.
    pub pad_in_loss: bool,
    pub adjacency: AdjacencyOptions,
    /// Positional capacity, including the two special positions.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            left_layers: 2,
            right_layers: 2,
            left_heads: 4,
            right_heads: 1,
            ffn_width: 0,
            standard_layernorm: false,
            right_attention_scaling: false,
            norm_eps: 1e-5,
            gelu_tanh: false,
            ablation: Ablation::Full,
            classifier_hidden: false,
            separate_tower_embeddings: false,
            pad_in_loss: true,
            adjacency: AdjacencyOptions::default(),
            max_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn ffn(&self) -> usize {
        if self.ffn_width == 0 {
            4 * self.d_model
        } else {
            self.ffn_width
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.left_heads == 0 || self.right_heads == 0 {
            return fail("d_model and head counts must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.left_heads) {
            return fail(format!("d_model {} not divisible by left_heads {}", self.d_model, self.left_heads));
        }
        if !self.d_model.is_multiple_of(self.right_heads) {
            return fail(format!("d_model {} not divisible by right_heads {}", self.d_model, self.right_heads));
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        if self.max_len < 3 {
            return fail("max_len must leave room for at least one token".into());
        }
        match self.ablation {
            Ablation::LeftOnly if self.left_layers == 0 => fail("left-only ablation needs left_layers > 0".into()),
            Ablation::RightOnly if self.right_layers == 0 => fail("right-only ablation needs right_layers > 0".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    embed: EmbeddingTables,
    right_embed: Option<EmbeddingTables>,
    left: Vec<LeftLayer>,
    right: Vec<RightLayer>,
    head: HeadParams,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Token vectors `v` fed to the left tower (and the right one when shared).
    pub embeddings: Var,
    pub left: Option<Var>,
    pub right: Option<Var>,
    pub gate: Option<Var>,
    pub fused: Var,
    pub logits: Var,
    /// Right-tower attention, per layer and head.
    pub right_alpha: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct DepBert {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
    layout: Layout,
}

impl DepBert {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.max_len() != config.max_len {
            return Err(Error::Config(format!(
                "vocabulary max_len {} differs from model max_len {}",
                vocab.max_len(),
                config.max_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let embed = EmbeddingTables::register(&mut params, "embed", &vocab, d, &mut rng);
        let right_embed = config
            .separate_tower_embeddings
            .then(|| EmbeddingTables::register(&mut params, "embed_right", &vocab, d, &mut rng));
        let left = (0..config.left_layers)
            .map(|i| LeftLayer::register(&mut params, &format!("left.{i}"), d, config.ffn(), &mut rng))
            .collect();
        let right = (0..config.right_layers)
            .map(|i| RightLayer::register(&mut params, &format!("right.{i}"), d, config.standard_layernorm, &mut rng))
            .collect();
        let head = HeadParams::register(&mut params, d, config.classifier_hidden, &mut rng);
        Ok(DepBert {
            config,
            vocab,
            params,
            layout: Layout {
                embed,
                right_embed,
                left,
                right,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Switches which towers feed the classifier, keeping all parameters.
    pub fn set_ablation(&mut self, ablation: Ablation) -> Result<()> {
        let mut config = self.config.clone();
        config.ablation = ablation;
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn batch(&self, sentences: &[&AnnotatedSentence]) -> Result<EncodedBatch> {
        EncodedBatch::new(sentences, &self.vocab, self.config.adjacency, None)
    }

    /// Batch for sentences without gold spans; its loss is meaningless.
    pub fn batch_unlabeled(&self, sentences: &[&AnnotatedSentence]) -> Result<EncodedBatch> {
        EncodedBatch::unlabeled(sentences, &self.vocab, self.config.adjacency)
    }

    /// Runs the model on `batch`, binding this model's parameters into `g`.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, batch: &EncodedBatch) -> Result<(Bound, ForwardOutput)> {
        let bound = self.params.bind(g);
        let out = self.forward_bound(g, &bound, batch)?;
        Ok((bound, out))
    }

    /// Forward pass over externally bound parameters laid out like [`params`](Self::params).
    pub fn forward_bound(&self, g: &mut Graph<'_>, bound: &Bound, batch: &EncodedBatch) -> Result<ForwardOutput> {
        self.forward_inner(g, bound, batch, None)
    }

    /// Full two-tower pass with every gate entry pinned to `gate` instead of
    /// the learned `σ(e_b W6 + c)`.
    pub fn forward_with_gate<'p>(
        &'p self,
        g: &mut Graph<'p>,
        batch: &EncodedBatch,
        gate: f64,
    ) -> Result<(Bound, ForwardOutput)> {
        if self.config.ablation != Ablation::Full {
            return Err(Error::precondition("forward_with_gate", "needs the full two-tower model"));
        }
        let bound = self.params.bind(g);
        let out = self.forward_inner(g, &bound, batch, Some(gate))?;
        Ok((bound, out))
    }

    fn forward_inner(&self, g: &mut Graph<'_>, bound: &Bound, batch: &EncodedBatch, forced_gate: Option<f64>) -> Result<ForwardOutput> {
        if bound.vars().len() != self.params.len() {
            return Err(Error::precondition("forward", "bound parameter count differs from the model"));
        }
        let cfg = &self.config;
        let l = &self.layout;
        let m = batch.seq_len;
        let v = embed(g, bound, &l.embed, &batch.ids, &batch.positions, &batch.tags)?;
        let use_left = cfg.ablation != Ablation::RightOnly;
        let use_right = cfg.ablation != Ablation::LeftOnly;

        let left = if use_left {
            Some(left_encode(g, bound, &l.left, cfg, v, &batch.key_mask, m)?)
        } else {
            None
        };
        let (right, right_alpha) = if use_right {
            let v_right = match &l.right_embed {
                Some(t) => embed(g, bound, t, &batch.ids, &batch.positions, &batch.tags)?,
                None => v,
            };
            let out = right_encode(g, bound, &l.right, cfg, v_right, &batch.adjacency, m)?;
            (Some(out.output), out.alpha)
        } else {
            (None, Vec::new())
        };
        let (fused, gate) = match (left, right) {
            (Some(e_b), Some(e_t)) => match forced_gate {
                Some(value) => {
                    let s = g.constant(Tensor::full(g.value(e_b).shape(), value));
                    (fuse_with_gate(g, e_b, e_t, s)?, Some(s))
                }
                None => {
                    let (e, s) = fuse(g, e_b, e_t, bound[l.head.gate_weight], bound[l.head.gate_bias])?;
                    (e, Some(s))
                }
            },
            (Some(e_b), None) => (e_b, None),
            (None, Some(e_t)) => (e_t, None),
            (None, None) => unreachable!("validated ablation always keeps a tower"),
        };
        let logits = classify(g, bound, &l.head, fused, cfg.gelu_tanh)?;
        Ok(ForwardOutput {
            embeddings: v,
            left,
            right,
            gate,
            fused,
            logits,
            right_alpha,
        })
    }

    /// Mean cross entropy over the batch; padding rows are dropped unless `pad_in_loss`.
    pub fn loss(&self, g: &mut Graph<'_>, logits: Var, batch: &EncodedBatch) -> Result<Var> {
        let include = (!self.config.pad_in_loss).then_some(batch.pad_mask.as_slice());
        model_loss(g, logits, &batch.labels, include)
    }

    /// Loss value and gradients for every parameter, in store order.
    pub fn loss_and_grads(&self, batch: &EncodedBatch) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let (bound, out) = self.forward(&mut g, batch)?;
        let loss = self.loss(&mut g, out.logits, batch)?;
        g.backward(loss)?;
        Ok((g.value(loss).item(), bound.grads(&g)))
    }

    /// Loss without gradients.
    pub fn evaluate_loss(&self, batch: &EncodedBatch) -> Result<f64> {
        let mut g = Graph::new();
        let (_, out) = self.forward(&mut g, batch)?;
        let loss = self.loss(&mut g, out.logits, batch)?;
        Ok(g.value(loss).item())
    }

    /// Per-position argmax labels for each sentence in the batch, over real tokens only.
    pub fn predict_batch(&self, batch: &EncodedBatch) -> Result<(Vec<Vec<Label>>, f64)> {
        let mut g = Graph::new();
        let (_, out) = self.forward(&mut g, batch)?;
        let loss = self.loss(&mut g, out.logits, batch)?;
        let labels = argmax_labels(g.value(out.logits));
        let m = batch.seq_len;
        let per_sentence = batch
            .lengths
            .iter()
            .enumerate()
            .map(|(b, &n)| labels[b * m + 1..b * m + 1 + n].to_vec())
            .collect();
        Ok((per_sentence, g.value(loss).item()))
    }

    /// Right-tower attention for a single sentence: `(layer → head → M×M matrix, adjacency)`.
    pub fn right_attention(&self, sentence: &AnnotatedSentence) -> Result<(Vec<Vec<Tensor>>, EncodedBatch)> {
        let batch = self.batch(&[sentence])?;
        let mut model = self.clone();
        if model.config.ablation == Ablation::LeftOnly {
            model.config.ablation = Ablation::Full;
        }
        let mut g = Graph::new();
        let (_, out) = model.forward(&mut g, &batch)?;
        let alpha = out
            .right_alpha
            .iter()
            .map(|heads| heads.iter().map(|&a| g.value(a).clone()).collect())
            .collect();
        Ok((alpha, batch))
    }

    /// Central finite differences against autograd for every parameter entry,
    /// using the model loss on `sentences` as a single batch.
    pub fn gradient_check(&self, sentences: &[&AnnotatedSentence], step: f64, tolerance: f64) -> Result<GradCheckReport> {
        let batch = self.batch(sentences)?;
        let names = self.params.names().to_vec();
        let mut tensors = self.params.tensors().to_vec();
        finite_diff_check(
            |g, vars| {
                let bound = Bound::from_vars(vars.to_vec());
                let out = self.forward_bound(g, &bound, &batch)?;
                self.loss(g, out.logits, &batch)
            },
            &names,
            &mut tensors,
            step,
            tolerance,
        )
    }

    /// Replaces parameters from `(name, tensor)` pairs, which must match this
    /// model's layout exactly in name, order and shape.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.params.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            let expected_name = &self.params.names()[i];
            let expected = &self.params.tensors()[i];
            if &name != expected_name {
                return Err(Error::Checkpoint(format!("tensor {i} is `{name}`, expected `{expected_name}`")));
            }
            if t.shape() != expected.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
            self.params.tensors_mut()[i] = t;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vitamin_d_fixture;

    fn small(ablation: Ablation) -> DepBert {
        let config = ModelConfig {
            d_model: 8,
            left_heads: 2,
            max_len: 16,
            ablation,
            ..ModelConfig::default()
        };
        let vocab = Vocabulary::build(&[vitamin_d_fixture()], 1, 16).unwrap();
        DepBert::new(config, vocab, 0).unwrap()
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            d_model: 10,
            left_heads: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn same_seed_same_params() {
        assert_eq!(small(Ablation::Full).params(), small(Ablation::Full).params());
    }

    #[test]
    fn forward_shapes() {
        let model = small(Ablation::Full);
        let s = vitamin_d_fixture();
        let batch = model.batch(&[&s, &s]).unwrap();
        let mut g = Graph::new();
        let (_, out) = model.forward(&mut g, &batch).unwrap();
        assert_eq!(g.value(out.logits).shape(), &[14, 4]);
        assert_eq!(out.right_alpha.len(), 2);
        let (preds, loss) = model.predict_batch(&batch).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].len(), 5);
        assert!(loss.is_finite());
    }

    #[test]
    fn load_params_checks_shapes() {
        let mut model = small(Ablation::Full);
        let mut named: Vec<(String, Tensor)> =
            model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert!(model.clone().load_params(named.clone()).is_ok());
        named[3].1 = Tensor::zeros(&[1, 1]);
        let err = model.load_params(named).unwrap_err().to_string();
        assert!(err.contains(&model.params().names()[3]), "{err}");
    }
}
