//! Annotated sentences, label sequences, dependency adjacency and corpus I/O.

pub mod conllu;
pub mod jsonl;

use std::fmt;
use std::str::FromStr;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conllu::{parse_conllu, parse_conllu_lenient, write_conllu, ConlluDocument};
pub use jsonl::{read_jsonl, read_jsonl_lenient, read_jsonl_str, write_jsonl, write_jsonl_string};

/// Number of token classes: Special, Cause, Effect, Other.
pub const NUM_CLASSES: usize = 4;

/// Universal POS inventory (UD v2), in its canonical order.
pub const UPOS_TAGS: [&str; 17] = [
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN",
    "PUNCT", "SCONJ", "SYM", "VERB", "X",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedToken {
    pub form: String,
    pub upos: String,
    /// 0-based index of the head token; `None` for the root.
    pub head: Option<usize>,
    pub deprel: String,
}

impl AnnotatedToken {
    pub fn new(form: &str, upos: &str, head: Option<usize>, deprel: &str) -> Self {
        AnnotatedToken {
            form: form.to_string(),
            upos: upos.to_string(),
            head,
            deprel: deprel.to_string(),
        }
    }
}

/// Inclusive token range `start..=end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn len(&self) -> usize {
        (self.end + 1).saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Span { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

impl FromStr for Span {
    type Err = String;

    /// Parses `i..j`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s
            .trim()
            .split_once("..")
            .ok_or_else(|| format!("expected `i..j`, got `{s}`"))?;
        let start = a.trim().parse().map_err(|_| format!("bad span start `{a}`"))?;
        let end = b.trim().parse().map_err(|_| format!("bad span end `{b}`"))?;
        Ok(Span { start, end })
    }
}

/// What is wrong with a sentence, by category.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Tree(String),
    Span(String),
    Pos(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Tree(m) => write!(f, "tree: {m}"),
            Violation::Span(m) => write!(f, "span: {m}"),
            Violation::Pos(m) => write!(f, "pos: {m}"),
        }
    }
}

/// A sentence with POS tags, dependency heads and one cause and one effect span.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub id: String,
    pub tokens: Vec<AnnotatedToken>,
    pub cause: Span,
    pub effect: Span,
}

impl AnnotatedSentence {
    /// Builds and validates a sentence.
    pub fn new(id: impl Into<String>, tokens: Vec<AnnotatedToken>, cause: Span, effect: Span) -> Result<Self> {
        let s = AnnotatedSentence {
            id: id.into(),
            tokens,
            cause,
            effect,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn forms(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.form.as_str())
    }

    pub fn text(&self) -> String {
        self.forms().collect::<Vec<_>>().join(" ")
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            None => Ok(()),
            Some(v) => Err(Error::InvalidSentence {
                id: self.id.clone(),
                message: v.to_string(),
            }),
        }
    }

    /// All problems with this sentence; empty for a well-formed one.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if let Err(m) = self.check_spans() {
            out.push(Violation::Span(m));
        }
        if let Err(m) = self.check_tree() {
            out.push(Violation::Tree(m));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if t.upos.is_empty() || t.upos == "_" {
                out.push(Violation::Pos(format!("token {i} ({}) has no POS tag", t.form)));
            }
        }
        out
    }

    pub fn check_spans(&self) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        for (name, span) in [("cause", self.cause), ("effect", self.effect)] {
            if span.is_empty() {
                return Err(format!("{name} span {span} is empty"));
            }
            if span.end >= n {
                return Err(format!("{name} span {span} out of range for {n} tokens"));
            }
        }
        if self.cause.overlaps(&self.effect) {
            return Err(format!("cause {} and effect {} overlap", self.cause, self.effect));
        }
        Ok(())
    }

    /// Exactly one root, heads in range and not self, no cycles.
    pub fn check_tree(&self) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        if n == 0 {
            return Err("sentence has no tokens".into());
        }
        let roots: Vec<usize> = (0..n).filter(|&i| self.tokens[i].head.is_none()).collect();
        if roots.len() != 1 {
            return Err(format!("expected exactly one root, found {} ({roots:?})", roots.len()));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            match t.head {
                Some(h) if h == i => return Err(format!("token {i} is its own head")),
                Some(h) if h >= n => return Err(format!("token {i} has head {h} out of range")),
                _ => {}
            }
        }
        // Walk up from each token; a walk longer than n steps must revisit a node.
        for start in 0..n {
            let mut path = vec![start];
            let mut cur = start;
            while let Some(h) = self.tokens[cur].head {
                if let Some(pos) = path.iter().position(|&p| p == h) {
                    let cycle: Vec<String> = path[pos..].iter().map(usize::to_string).collect();
                    return Err(format!("cycle through tokens {}", cycle.join(" -> ")));
                }
                path.push(h);
                cur = h;
            }
        }
        Ok(())
    }

    /// Gold class for each real token (Cause, Effect or Other).
    pub fn gold_labels(&self) -> Vec<Label> {
        (0..self.tokens.len())
            .map(|i| {
                if self.cause.contains(i) {
                    Label::Cause
                } else if self.effect.contains(i) {
                    Label::Effect
                } else {
                    Label::Other
                }
            })
            .collect()
    }

    pub fn cause_text(&self) -> String {
        self.span_text(self.cause)
    }

    pub fn effect_text(&self) -> String {
        self.span_text(self.effect)
    }

    fn span_text(&self, span: Span) -> String {
        span.indices()
            .filter_map(|i| self.tokens.get(i))
            .map(|t| t.form.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token class. Discriminants are the 1-based class ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Special = 1,
    Cause = 2,
    Effect = 3,
    Other = 4,
}

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [Label::Special, Label::Cause, Label::Effect, Label::Other];

    pub fn id(self) -> u8 {
        self as u8
    }

    /// 0-based column in a logits matrix.
    pub fn class_index(self) -> usize {
        self as usize - 1
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1..=4 => Ok(Self::ALL[id as usize - 1]),
            _ => Err(Error::precondition("label", format!("invalid label id {id}, expected 1..=4"))),
        }
    }

    pub fn from_class_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

/// Per-position labels over a padded sequence: `[start][tokens…][end][pad…]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSequence(Vec<Label>);

impl LabelSequence {
    pub fn from_ids(ids: &[u8]) -> Result<Self> {
        ids.iter().map(|&i| Label::from_id(i)).collect::<Result<Vec<_>>>().map(LabelSequence)
    }

    pub fn as_slice(&self) -> &[Label] {
        &self.0
    }

    pub fn ids(&self) -> Vec<u8> {
        self.0.iter().map(|l| l.id()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn onehot(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.0.len(), NUM_CLASSES]);
        for (i, l) in self.0.iter().enumerate() {
            t.data_mut()[i * NUM_CLASSES + l.class_index()] = 1.0;
        }
        t
    }
}

pub fn label_sequence(s: &AnnotatedSentence, padded_len: usize) -> Result<LabelSequence> {
    s.check_spans().map_err(|m| Error::InvalidSentence {
        id: s.id.clone(),
        message: m,
    })?;
    check_capacity(s, padded_len)?;
    let mut labels = vec![Label::Special; padded_len];
    labels[1..=s.len()].copy_from_slice(&s.gold_labels());
    Ok(LabelSequence(labels))
}

fn check_capacity(s: &AnnotatedSentence, padded_len: usize) -> Result<()> {
    if s.len() + 2 > padded_len {
        return Err(Error::precondition(
            "padding",
            format!(
                "sentence {} has {} tokens, needs padded length >= {} but got {padded_len}",
                s.id,
                s.len(),
                s.len() + 2
            ),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdjacencyOptions {
    /// When set, a token's neighbourhood is its head only (plus itself),
    /// instead of head and dependents.
    pub directed: bool,
    /// Self-loops on real tokens. Special and pad positions always keep theirs
    /// so that every attention row has at least one entry.
    pub self_loops: bool,
}

impl Default for AdjacencyOptions {
    fn default() -> Self {
        AdjacencyOptions {
            directed: false,
            self_loops: true,
        }
    }
}

/// Padded `M × M` neighbour mask over `[start][tokens…][end][pad…]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencyAdjacency {
    size: usize,
    mask: Vec<bool>,
}

impl DependencyAdjacency {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, k: usize) -> bool {
        self.mask[i * self.size + k]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.size).filter(|&k| self.get(i, k)).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..i).all(|k| self.get(i, k) == self.get(k, i)))
    }

    /// Number of true off-diagonal entries.
    pub fn edge_count(&self) -> usize {
        (0..self.size)
            .flat_map(|i| (0..self.size).map(move |k| (i, k)))
            .filter(|&(i, k)| i != k && self.get(i, k))
            .count()
    }

    /// All-true mask, for dense-attention comparisons.
    pub fn dense(size: usize) -> Self {
        DependencyAdjacency {
            size,
            mask: vec![true; size * size],
        }
    }
}

pub fn build_adjacency(s: &AnnotatedSentence, padded_len: usize, opts: AdjacencyOptions) -> Result<DependencyAdjacency> {
    s.check_tree().map_err(|m| Error::InvalidSentence {
        id: s.id.clone(),
        message: m,
    })?;
    check_capacity(s, padded_len)?;
    let m = padded_len;
    let mut mask = vec![false; m * m];
    for i in 0..m {
        let real = (1..=s.len()).contains(&i);
        mask[i * m + i] = !real || opts.self_loops;
    }
    for (t, tok) in s.tokens.iter().enumerate() {
        if let Some(h) = tok.head {
            let (i, k) = (t + 1, h + 1);
            mask[i * m + k] = true;
            if !opts.directed {
                mask[k * m + i] = true;
            }
        }
    }
    Ok(DependencyAdjacency { size: m, mask })
}

/// Train/test/validation proportions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub validation: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            test: 0.3,
            validation: 0.1,
        }
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.test, self.validation)
    }
}

impl FromStr for SplitRatios {
    type Err = String;

    /// Parses `a:b:c` (train:test:validation), normalising to sum 1.
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad ratio `{p}` in `{s}`")))
            .collect::<Result<_, _>>()?;
        let [a, b, c] = parts[..] else {
            return Err(format!("expected train:test:validation, got `{s}`"));
        };
        let total = a + b + c;
        if parts.iter().any(|&x| x < 0.0 || !x.is_finite()) || total <= 0.0 {
            return Err(format!("ratios must be non-negative with a positive sum, got `{s}`"));
        }
        Ok(SplitRatios {
            train: a / total,
            test: b / total,
            validation: c / total,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<AnnotatedSentence>,
    pub test: Vec<AnnotatedSentence>,
    pub validation: Vec<AnnotatedSentence>,
}

/// Seeded shuffle, then floor-sized test and validation partitions with the
/// remainder going to train.
pub fn split_dataset(sentences: Vec<AnnotatedSentence>, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    if sentences.is_empty() {
        return Err(Error::precondition("split_dataset", "no sentences to split"));
    }
    let sum = ratios.train + ratios.test + ratios.validation;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::precondition("split_dataset", format!("ratios sum to {sum}, expected 1")));
    }
    let n = sentences.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // Guard against 0.3 * 100 = 30.000000000000004 style drift before flooring.
    let size = |r: f64| ((n as f64 * r) + 1e-9).floor() as usize;
    let n_test = size(ratios.test);
    let n_val = size(ratios.validation);
    let n_train = n - n_test - n_val;
    if n_val == 0 {
        log::warn!("validation partition is empty ({n} sentences)");
    }
    let mut slots: Vec<Option<AnnotatedSentence>> = sentences.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| idx.iter().map(|&i| slots[i].take().unwrap()).collect::<Vec<_>>();
    let train = take(&order[..n_train]);
    let test = take(&order[n_train..n_train + n_test]);
    let validation = take(&order[n_train + n_test..]);
    Ok(DatasetSplit { train, test, validation })
}

/// The five-token sentence used throughout the tests: "Vitamin D deficiency causes diabetes".
pub fn vitamin_d_fixture() -> AnnotatedSentence {
    let tokens = vec![
        AnnotatedToken::new("Vitamin", "NOUN", Some(1), "compound"),
        AnnotatedToken::new("D", "NOUN", Some(2), "compound"),
        AnnotatedToken::new("deficiency", "NOUN", Some(3), "nsubj"),
        AnnotatedToken::new("causes", "VERB", None, "ROOT"),
        AnnotatedToken::new("diabetes", "NOUN", Some(3), "dobj"),
    ];
    AnnotatedSentence::new("vitamin-d", tokens, Span::new(0, 2), Span::new(4, 4)).expect("fixture is valid")
}

/// Reads a corpus, picking CoNLL-U for `.conllu`/`.conll` files and JSONL
/// otherwise. With `validate` off, structurally broken trees and spans are
/// kept so they can be reported.
pub fn load_corpus(path: &Path, validate: bool) -> Result<Vec<AnnotatedSentence>> {
    let is_conllu = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("conllu") || e.eq_ignore_ascii_case("conll"));
    if is_conllu {
        let text = crate::io::read_to_string(path)?;
        let doc = if validate { parse_conllu(&text)? } else { parse_conllu_lenient(&text)? };
        if doc.skipped_missing_spans > 0 {
            log::warn!(
                "{}: skipped {} sentences without cause/effect comments",
                path.display(),
                doc.skipped_missing_spans
            );
        }
        Ok(doc.sentences)
    } else if validate {
        read_jsonl(path)
    } else {
        read_jsonl_lenient(path)
    }
}
