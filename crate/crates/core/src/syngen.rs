//! Templated cause/effect sentence generator with dependency annotations
//! derived from hand-written scaffold trees.

use std::collections::HashSet;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{AnnotatedSentence, AnnotatedToken, Span, Violation};
use crate::error::{Error, Result};

pub const CAUSE_SLOT: &str = "CAUSE";
pub const EFFECT_SLOT: &str = "EFFECT";

const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.json");
const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Voice {
    Active,
    Passive,
}

/// A sentence pattern such as `CAUSE can lead to EFFECT`.
///
/// Heads and anchors index the whitespace-separated pattern elements, slots
/// included; pointing at a slot means pointing at that phrase's head word
/// (its last word). `-1` marks the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub pattern: String,
    pub voice: Voice,
    pub scaffold_pos: Vec<String>,
    pub scaffold_heads: Vec<i64>,
    #[serde(default)]
    pub scaffold_deprels: Vec<String>,
    pub cause_anchor: i64,
    #[serde(default = "default_slot_rel")]
    pub cause_deprel: String,
    pub effect_anchor: i64,
    #[serde(default = "default_slot_rel")]
    pub effect_deprel: String,
}

fn default_slot_rel() -> String {
    "dep".into()
}

impl Template {
    fn elements(&self) -> Vec<&str> {
        self.pattern.split_whitespace().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("template `{}`: {m}", self.pattern)));
        let elems = self.elements();
        for slot in [CAUSE_SLOT, EFFECT_SLOT] {
            let count = elems.iter().filter(|&&e| e == slot).count();
            if count != 1 {
                return fail(format!("{slot} must appear exactly once, found {count}"));
            }
        }
        let words = elems.len() - 2;
        if self.scaffold_pos.len() != words || self.scaffold_heads.len() != words {
            return fail(format!(
                "{words} scaffold words but {} POS tags and {} heads",
                self.scaffold_pos.len(),
                self.scaffold_heads.len()
            ));
        }
        if !self.scaffold_deprels.is_empty() && self.scaffold_deprels.len() != words {
            return fail(format!("{words} scaffold words but {} deprels", self.scaffold_deprels.len()));
        }
        // The template must itself be a tree over its elements; phrases hang
        // off their head words, so any filler keeps it one.
        let mut probe = Lexicon::default();
        probe.causes.push(Phrase::new("x", &["NOUN"]));
        probe.effects.push(Phrase::new("y", &["NOUN"]));
        let s = self.instantiate_unchecked("probe", &probe.causes[0], &probe.effects[0])?;
        if let Err(m) = s.check_tree() {
            return fail(m);
        }
        Ok(())
    }

    fn instantiate_unchecked(&self, id: &str, cause: &Phrase, effect: &Phrase) -> Result<AnnotatedSentence> {
        let elems = self.elements();
        // Token offset and head-word index of every pattern element.
        let mut start = Vec::with_capacity(elems.len());
        let mut head_word = Vec::with_capacity(elems.len());
        let mut n = 0;
        for e in &elems {
            let len = match *e {
                CAUSE_SLOT => cause.words.len(),
                EFFECT_SLOT => effect.words.len(),
                _ => 1,
            };
            start.push(n);
            head_word.push(n + len - 1);
            n += len;
        }
        let resolve = |h: i64| -> Result<Option<usize>> {
            match h {
                -1 => Ok(None),
                h if h >= 0 && (h as usize) < elems.len() => Ok(Some(head_word[h as usize])),
                _ => Err(Error::Config(format!("template `{}`: head {h} out of range", self.pattern))),
            }
        };
        let mut tokens = Vec::with_capacity(n);
        let mut scaffold = 0;
        let mut cause_span = Span::new(0, 0);
        let mut effect_span = Span::new(0, 0);
        for (i, e) in elems.iter().enumerate() {
            let slot = match *e {
                CAUSE_SLOT => Some((cause, self.cause_anchor, &self.cause_deprel, &mut cause_span)),
                EFFECT_SLOT => Some((effect, self.effect_anchor, &self.effect_deprel, &mut effect_span)),
                _ => None,
            };
            match slot {
                Some((phrase, anchor, rel, span)) => {
                    *span = Span::new(start[i], head_word[i]);
                    let last = phrase.words.len() - 1;
                    for (k, (w, pos)) in phrase.words.iter().zip(&phrase.pos).enumerate() {
                        if k == last {
                            tokens.push(AnnotatedToken::new(w, pos, resolve(anchor)?, rel));
                        } else {
                            tokens.push(AnnotatedToken::new(w, pos, Some(head_word[i]), modifier_rel(pos)));
                        }
                    }
                }
                None => {
                    let rel = self.scaffold_deprels.get(scaffold).map(String::as_str).unwrap_or("dep");
                    tokens.push(AnnotatedToken::new(
                        e,
                        &self.scaffold_pos[scaffold],
                        resolve(self.scaffold_heads[scaffold])?,
                        rel,
                    ));
                    scaffold += 1;
                }
            }
        }
        if let Some(first) = tokens.first_mut() {
            first.form = capitalize(&first.form);
        }
        Ok(AnnotatedSentence {
            id: id.to_string(),
            tokens,
            cause: cause_span,
            effect: effect_span,
        })
    }

    /// Fills both slots and returns a validated sentence.
    pub fn instantiate(&self, id: &str, cause: &Phrase, effect: &Phrase) -> Result<AnnotatedSentence> {
        let s = self.instantiate_unchecked(id, cause, effect)?;
        s.validate()?;
        Ok(s)
    }
}

fn modifier_rel(pos: &str) -> &'static str {
    match pos {
        "DET" => "det",
        "ADJ" => "amod",
        "NUM" => "nummod",
        "NOUN" | "PROPN" => "compound",
        _ => "dep",
    }
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPhrase", into = "RawPhrase")]
pub struct Phrase {
    pub words: Vec<String>,
    pub pos: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawPhrase {
    text: String,
    pos: Vec<String>,
}

impl TryFrom<RawPhrase> for Phrase {
    type Error = String;

    fn try_from(raw: RawPhrase) -> Result<Self, String> {
        let words: Vec<String> = raw.text.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            return Err("empty phrase".into());
        }
        if words.len() != raw.pos.len() {
            return Err(format!("phrase `{}` has {} words but {} POS tags", raw.text, words.len(), raw.pos.len()));
        }
        Ok(Phrase { words, pos: raw.pos })
    }
}

impl From<Phrase> for RawPhrase {
    fn from(p: Phrase) -> Self {
        RawPhrase {
            text: p.words.join(" "),
            pos: p.pos,
        }
    }
}

impl Phrase {
    pub fn new(text: &str, pos: &[&str]) -> Self {
        Phrase {
            words: text.split_whitespace().map(str::to_string).collect(),
            pos: pos.iter().map(|p| p.to_string()).collect(),
        }
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lexicon {
    pub causes: Vec<Phrase>,
    pub effects: Vec<Phrase>,
}

impl Lexicon {
    pub fn validate(&self) -> Result<()> {
        if self.causes.is_empty() || self.effects.is_empty() {
            return Err(Error::Config("lexicon needs at least one cause and one effect phrase".into()));
        }
        for p in self.causes.iter().chain(&self.effects) {
            if p.words.is_empty() || p.words.len() != p.pos.len() || p.pos.iter().any(|t| t.is_empty()) {
                return Err(Error::Config(format!("phrase `{}` lacks a POS tag per word", p.text())));
            }
        }
        Ok(())
    }
}

pub fn default_templates() -> Vec<Template> {
    serde_json::from_str(DEFAULT_TEMPLATES).expect("bundled templates parse")
}

pub fn default_lexicon() -> Lexicon {
    serde_json::from_str(DEFAULT_LEXICON).expect("bundled lexicon parses")
}

pub fn parse_templates(text: &str) -> Result<Vec<Template>> {
    let templates: Vec<Template> = serde_json::from_str(text)?;
    if templates.is_empty() {
        return Err(Error::Config("template file is empty".into()));
    }
    for t in &templates {
        t.validate()?;
    }
    Ok(templates)
}

pub fn parse_lexicon(text: &str) -> Result<Lexicon> {
    let lexicon: Lexicon = serde_json::from_str(text)?;
    lexicon.validate()?;
    Ok(lexicon)
}

/// Number of distinct sentences the templates and lexicon can produce.
pub fn capacity(templates: &[Template], lexicon: &Lexicon) -> usize {
    let mut seen = HashSet::new();
    for t in templates {
        for c in &lexicon.causes {
            for e in &lexicon.effects {
                if let Ok(s) = t.instantiate_unchecked("", c, e) {
                    seen.insert(s.text());
                }
            }
        }
    }
    seen.len()
}

/// Counters describing one generation run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub seed: u64,
    pub requested: usize,
    pub capacity: usize,
    pub active: usize,
    pub passive: usize,
    pub duplicates_resampled: usize,
    pub templates_sha256: String,
    pub lexicon_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Samples `n` distinct sentences. The voice is drawn first (each with
/// probability 0.5 when both are available), then a template of that voice
/// and a cause and effect phrase uniformly. Repeated sentences are discarded
/// and redrawn.
pub fn generate(templates: &[Template], lexicon: &Lexicon, n: usize, seed: u64) -> Result<(Vec<AnnotatedSentence>, GenerationStats)> {
    if n == 0 {
        return Err(Error::precondition("generate", "n must be positive"));
    }
    if templates.is_empty() {
        return Err(Error::Config("no templates".into()));
    }
    for t in templates {
        t.validate()?;
    }
    lexicon.validate()?;
    let cap = capacity(templates, lexicon);
    if n > cap {
        return Err(Error::Capacity {
            message: format!(
                "{n} distinct sentences requested but {} templates × {} causes × {} effects yield at most {cap}",
                templates.len(),
                lexicon.causes.len(),
                lexicon.effects.len()
            ),
            capacity: cap,
        });
    }
    let active: Vec<&Template> = templates.iter().filter(|t| t.voice == Voice::Active).collect();
    let passive: Vec<&Template> = templates.iter().filter(|t| t.voice == Voice::Passive).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    let mut stats = GenerationStats {
        seed,
        requested: n,
        capacity: cap,
        active: 0,
        passive: 0,
        duplicates_resampled: 0,
        templates_sha256: sha256_hex(serde_json::to_string(templates)?.as_bytes()),
        lexicon_sha256: sha256_hex(serde_json::to_string(lexicon)?.as_bytes()),
    };
    let width = n.to_string().len().max(5);
    while out.len() < n {
        let pool = match (active.is_empty(), passive.is_empty()) {
            (false, false) => {
                if rng.random_bool(0.5) {
                    &active
                } else {
                    &passive
                }
            }
            (false, true) => &active,
            _ => &passive,
        };
        let t = *pool.choose(&mut rng).expect("nonempty pool");
        let c = lexicon.causes.choose(&mut rng).expect("nonempty");
        let e = lexicon.effects.choose(&mut rng).expect("nonempty");
        let id = format!("gen-{:0width$}", out.len(), width = width);
        let s = t.instantiate(&id, c, e)?;
        if !seen.insert(s.text()) {
            stats.duplicates_resampled += 1;
            continue;
        }
        match t.voice {
            Voice::Active => stats.active += 1,
            Voice::Passive => stats.passive += 1,
        }
        out.push(s);
    }
    Ok((out, stats))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SentenceIssue {
    pub id: String,
    pub message: String,
}

/// Violation counts for a corpus, by category.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorpusReport {
    pub sentences: usize,
    pub tree_violations: usize,
    pub span_violations: usize,
    pub pos_violations: usize,
    pub issues: Vec<SentenceIssue>,
}

impl CorpusReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for CorpusReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} sentences: {} tree, {} span, {} POS violations",
            self.sentences, self.tree_violations, self.span_violations, self.pos_violations
        )?;
        for issue in &self.issues {
            writeln!(f, "  {}: {}", issue.id, issue.message)?;
        }
        Ok(())
    }
}

pub fn validate_corpus(sentences: &[AnnotatedSentence]) -> CorpusReport {
    let mut report = CorpusReport {
        sentences: sentences.len(),
        ..CorpusReport::default()
    };
    for s in sentences {
        for v in s.violations() {
            match v {
                Violation::Tree(_) => report.tree_violations += 1,
                Violation::Span(_) => report.span_violations += 1,
                Violation::Pos(_) => report.pos_violations += 1,
            }
            report.issues.push(SentenceIssue {
                id: s.id.clone(),
                message: v.to_string(),
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_inventory() {
        let templates = default_templates();
        assert_eq!(templates.len(), 10);
        assert_eq!(templates.iter().filter(|t| t.voice == Voice::Active).count(), 6);
        for t in &templates {
            t.validate().unwrap();
        }
        let lex = default_lexicon();
        lex.validate().unwrap();
        assert_eq!((lex.causes.len(), lex.effects.len()), (40, 40));
        assert!(lex.causes.iter().chain(&lex.effects).all(|p| (1..=4).contains(&p.words.len())));
    }

    #[test]
    fn diabetes_blindness() {
        let t = &default_templates()[0];
        let s = t
            .instantiate("x", &Phrase::new("diabetes", &["NOUN"]), &Phrase::new("blindness", &["NOUN"]))
            .unwrap();
        assert_eq!(s.text(), "Diabetes can lead to blindness");
        assert_eq!((s.cause, s.effect), (Span::new(0, 0), Span::new(4, 4)));
        let heads: Vec<_> = s.tokens.iter().map(|t| t.head).collect();
        assert_eq!(heads, vec![Some(2), Some(2), None, Some(4), Some(2)]);
    }

    #[test]
    fn multiword_phrases_attach_through_last_word() {
        let t = &default_templates()[6]; // EFFECT is caused by CAUSE
        let s = t
            .instantiate(
                "x",
                &Phrase::new("vitamin D deficiency", &["NOUN", "PROPN", "NOUN"]),
                &Phrase::new("chronic kidney disease", &["ADJ", "NOUN", "NOUN"]),
            )
            .unwrap();
        assert_eq!(s.text(), "Chronic kidney disease is caused by vitamin D deficiency");
        assert_eq!((s.effect, s.cause), (Span::new(0, 2), Span::new(6, 8)));
        let heads: Vec<_> = s.tokens.iter().map(|t| t.head).collect();
        assert_eq!(
            heads,
            vec![Some(2), Some(2), Some(4), Some(4), None, Some(8), Some(8), Some(8), Some(4)]
        );
        assert_eq!(s.tokens[0].deprel, "amod");
        assert_eq!(s.tokens[8].deprel, "obl:agent");
    }

    #[test]
    fn bad_templates_rejected() {
        let mut t = default_templates()[1].clone();
        t.pattern = "CAUSE causes CAUSE".into();
        assert!(t.validate().is_err());
        let mut t = default_templates()[1].clone();
        t.cause_anchor = -1; // two roots
        assert!(t.validate().is_err());
        let mut t = default_templates()[0].clone();
        t.scaffold_heads = vec![2, -1, 3]; // `to` heads itself
        assert!(t.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic_and_distinct() {
        let (a, stats) = generate(&default_templates(), &default_lexicon(), 300, 11).unwrap();
        let (b, _) = generate(&default_templates(), &default_lexicon(), 300, 11).unwrap();
        assert_eq!(a, b);
        let texts: HashSet<String> = a.iter().map(|s| s.text()).collect();
        assert_eq!(texts.len(), 300);
        assert_eq!(stats.active + stats.passive, 300);
        assert!(stats.active > 100 && stats.passive > 100);
        assert!(validate_corpus(&a).is_clean());
    }

    #[test]
    fn capacity_error_states_maximum() {
        let lex = Lexicon {
            causes: vec![Phrase::new("smoking", &["NOUN"]), Phrase::new("stress", &["NOUN"])],
            effects: vec![Phrase::new("cancer", &["NOUN"])],
        };
        let templates = &default_templates()[..3];
        assert_eq!(capacity(templates, &lex), 6);
        assert!(generate(templates, &lex, 6, 0).is_ok());
        match generate(templates, &lex, 7, 0) {
            Err(Error::Capacity { capacity, message }) => {
                assert_eq!(capacity, 6);
                assert!(message.contains("at most 6"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupted_head_counted_once() {
        let (mut corpus, _) = generate(&default_templates(), &default_lexicon(), 20, 1).unwrap();
        let root = corpus[3].tokens.iter().position(|t| t.head.is_none()).unwrap();
        let other = (root + 1) % corpus[3].len();
        corpus[3].tokens[root].head = Some(other);
        // root now points into its own subtree: a cycle, no root
        let report = validate_corpus(&corpus);
        assert_eq!(report.tree_violations, 1);
        assert_eq!((report.span_violations, report.pos_violations), (0, 0));
        assert_eq!(report.issues[0].id, corpus[3].id);
    }
}
