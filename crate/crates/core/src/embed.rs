//! Vocabulary, sentence encoding and the summed token/position/POS embedding.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_adjacency, label_sequence, AdjacencyOptions, AnnotatedSentence, Label, UPOS_TAGS};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const SPECIAL_TAG: usize = 0;

const RESERVED_TOKENS: [&str; 4] = ["[PAD]", "[START]", "[END]", "[UNK]"];
const SPECIAL_TAG_NAME: &str = "[SPECIAL]";

/// Token and POS-tag id maps plus the positional capacity.
///
/// Serialised as `{"tokens": {...}, "tags": {...}, "max_len": n}`; the maps
/// are ordered so the JSON is byte-stable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: BTreeMap<String, usize>,
    tags: BTreeMap<String, usize>,
    max_len: usize,
}

impl Vocabulary {
    /// Lowercased forms seen at least `min_count` times get ids in order of
    /// descending frequency, ties broken lexicographically. Tags cover the
    /// Universal POS inventory plus any extra tags in the corpus.
    pub fn build(sentences: &[AnnotatedSentence], min_count: usize, max_len: usize) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Vocab("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut tag_counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in &s.tokens {
                *counts.entry(t.form.to_lowercase()).or_default() += 1;
                *tag_counts.entry(t.upos.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: BTreeMap<String, usize> =
            RESERVED_TOKENS.iter().enumerate().map(|(i, t)| (t.to_string(), i)).collect();
        for (form, _) in ranked {
            let id = tokens.len();
            tokens.entry(form).or_insert(id);
        }

        let mut tags: BTreeMap<String, usize> = BTreeMap::new();
        tags.insert(SPECIAL_TAG_NAME.to_string(), SPECIAL_TAG);
        for t in UPOS_TAGS {
            let id = tags.len();
            tags.insert(t.to_string(), id);
        }
        let mut extra: Vec<(&str, usize)> = tag_counts.into_iter().filter(|(t, _)| !tags.contains_key(*t)).collect();
        extra.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        for (t, _) in extra {
            let id = tags.len();
            tags.insert(t.to_string(), id);
        }
        Ok(Vocabulary { tokens, tags, max_len })
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn tag_count(&self) -> usize {
        self.tags.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn token_id(&self, form: &str) -> usize {
        self.tokens.get(&form.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn tag_id(&self, tag: &str) -> Result<usize> {
        self.tags
            .get(tag)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("unknown POS tag `{tag}`")))
    }

    pub fn tag_name(&self, id: usize) -> Option<&str> {
        self.tags.iter().find(|(_, &v)| v == id).map(|(k, _)| k.as_str())
    }

    /// Surface forms for a sequence of token ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        let mut by_id = vec![""; self.tokens.len()];
        for (k, &v) in &self.tokens {
            by_id[v] = k;
        }
        ids.iter()
            .map(|&i| by_id.get(i).copied().unwrap_or("[UNK]").to_string())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Vocabulary = serde_json::from_str(text)?;
        let dense = |m: &BTreeMap<String, usize>| {
            let mut ids: Vec<usize> = m.values().copied().collect();
            ids.sort_unstable();
            ids.iter().enumerate().all(|(i, &id)| i == id)
        };
        if !dense(&v.tokens) || !dense(&v.tags) {
            return Err(Error::Vocab("ids are not dense".into()));
        }
        Ok(v)
    }
}

/// One sentence laid out as `[START][tokens…][END][PAD…]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSentence {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub tags: Vec<usize>,
    /// True on real and special positions, false on padding.
    pub pad_mask: Vec<bool>,
}

pub fn encode(s: &AnnotatedSentence, vocab: &Vocabulary, padded_len: usize) -> Result<EncodedSentence> {
    let n = s.len();
    if n + 2 > padded_len {
        return Err(Error::precondition(
            "encode",
            format!("sentence {} has {n} tokens; padded length {padded_len} leaves room for {}", s.id, padded_len.saturating_sub(2)),
        ));
    }
    if padded_len > vocab.max_len {
        return Err(Error::precondition(
            "encode",
            format!("padded length {padded_len} exceeds positional capacity {}", vocab.max_len),
        ));
    }
    let mut ids = vec![PAD; padded_len];
    let mut tags = vec![SPECIAL_TAG; padded_len];
    let mut pad_mask = vec![false; padded_len];
    ids[0] = START;
    ids[n + 1] = END;
    pad_mask[..n + 2].iter_mut().for_each(|m| *m = true);
    for (i, t) in s.tokens.iter().enumerate() {
        ids[i + 1] = vocab.token_id(&t.form);
        tags[i + 1] = vocab.tag_id(&t.upos)?;
    }
    Ok(EncodedSentence {
        ids,
        positions: (0..padded_len).collect(),
        tags,
        pad_mask,
    })
}

/// A batch of sentences padded to a common length `seq_len`, stacked row-wise.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub tags: Vec<usize>,
    pub pad_mask: Vec<bool>,
    /// `[batch·seq_len × seq_len]` dependency neighbourhoods.
    pub adjacency: Vec<bool>,
    /// `[batch·seq_len × seq_len]`: every query may attend to every non-pad key.
    pub key_mask: Vec<bool>,
    pub labels: Vec<Label>,
    /// Real token count per sentence.
    pub lengths: Vec<usize>,
}

impl EncodedBatch {
    /// Pads to `padded_len`, or to the longest sentence plus two specials.
    pub fn new(
        sentences: &[&AnnotatedSentence],
        vocab: &Vocabulary,
        adjacency: AdjacencyOptions,
        padded_len: Option<usize>,
    ) -> Result<Self> {
        Self::build(sentences, vocab, adjacency, padded_len, true)
    }

    /// Like [`new`](Self::new) but ignores the gold spans, labelling every
    /// real token Other. For inputs without annotations.
    pub fn unlabeled(sentences: &[&AnnotatedSentence], vocab: &Vocabulary, adjacency: AdjacencyOptions) -> Result<Self> {
        Self::build(sentences, vocab, adjacency, None, false)
    }

    fn build(
        sentences: &[&AnnotatedSentence],
        vocab: &Vocabulary,
        adjacency: AdjacencyOptions,
        padded_len: Option<usize>,
        labeled: bool,
    ) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::precondition("batch", "empty batch"));
        }
        let m = padded_len.unwrap_or_else(|| sentences.iter().map(|s| s.len()).max().unwrap() + 2);
        let b = sentences.len();
        let mut out = EncodedBatch {
            batch: b,
            seq_len: m,
            ids: Vec::with_capacity(b * m),
            positions: Vec::with_capacity(b * m),
            tags: Vec::with_capacity(b * m),
            pad_mask: Vec::with_capacity(b * m),
            adjacency: Vec::with_capacity(b * m * m),
            key_mask: Vec::with_capacity(b * m * m),
            labels: Vec::with_capacity(b * m),
            lengths: Vec::with_capacity(b),
        };
        for s in sentences {
            let enc = encode(s, vocab, m)?;
            let adj = build_adjacency(s, m, adjacency)?;
            let labels = if labeled {
                label_sequence(s, m)?.as_slice().to_vec()
            } else {
                let mut l = vec![Label::Special; m];
                l[1..=s.len()].fill(Label::Other);
                l
            };
            for _ in 0..m {
                out.key_mask.extend_from_slice(&enc.pad_mask);
            }
            out.ids.extend(enc.ids);
            out.positions.extend(enc.positions);
            out.tags.extend(enc.tags);
            out.pad_mask.extend(enc.pad_mask);
            out.adjacency.extend_from_slice(adj.mask());
            out.labels.extend_from_slice(&labels);
            out.lengths.push(s.len());
        }
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    pub fn targets(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.class_index()).collect()
    }
}

/// Handles to the three embedding tables.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTables {
    pub token: ParamId,
    pub position: ParamId,
    pub tag: ParamId,
}

impl EmbeddingTables {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        vocab: &Vocabulary,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // Three summed N(0, 1/3) tables give unit-variance token vectors.
        let std = (1.0f64 / 3.0).sqrt();
        EmbeddingTables {
            token: store.add(format!("{prefix}.token"), Tensor::normal(&[vocab.token_count(), width], std, rng)),
            position: store.add(format!("{prefix}.position"), Tensor::normal(&[vocab.max_len(), width], std, rng)),
            tag: store.add(format!("{prefix}.tag"), Tensor::normal(&[vocab.tag_count(), width], std, rng)),
        }
    }
}

/// `v_i = E_token[id_i] + E_position[pos_i] + E_tag[tag_i]`.
pub fn embed(
    g: &mut Graph<'_>,
    bound: &Bound,
    tables: &EmbeddingTables,
    ids: &[usize],
    positions: &[usize],
    tags: &[usize],
) -> Result<Var> {
    let tok = g.gather(bound[tables.token], ids)?;
    let pos = g.gather(bound[tables.position], positions)?;
    let tag = g.gather(bound[tables.tag], tags)?;
    let sum = g.add(tok, pos)?;
    g.add(sum, tag)
}
