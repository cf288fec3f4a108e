//! One JSON object per line:
//! `{"id", "tokens", "pos_tags", "heads" (-1 = root), "deprels", "cause": [i, j], "effect": [k, l]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotatedSentence, AnnotatedToken, Span};
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    tokens: Vec<String>,
    pos_tags: Vec<String>,
    heads: Vec<i64>,
    deprels: Vec<String>,
    cause: [usize; 2],
    effect: [usize; 2],
}

impl From<&AnnotatedSentence> for Record {
    fn from(s: &AnnotatedSentence) -> Self {
        Record {
            id: s.id.clone(),
            tokens: s.tokens.iter().map(|t| t.form.clone()).collect(),
            pos_tags: s.tokens.iter().map(|t| t.upos.clone()).collect(),
            heads: s.tokens.iter().map(|t| t.head.map_or(-1, |h| h as i64)).collect(),
            deprels: s.tokens.iter().map(|t| t.deprel.clone()).collect(),
            cause: s.cause.into(),
            effect: s.effect.into(),
        }
    }
}

fn schema(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

impl Record {
    fn into_sentence(self, line: usize) -> Result<AnnotatedSentence> {
        let n = self.tokens.len();
        for (field, len) in [
            ("pos_tags", self.pos_tags.len()),
            ("heads", self.heads.len()),
            ("deprels", self.deprels.len()),
        ] {
            if len != n {
                return Err(schema(line, field, format!("has {len} entries but tokens has {n}")));
            }
        }
        let mut tokens = Vec::with_capacity(n);
        for i in 0..n {
            let head = match self.heads[i] {
                -1 => None,
                h if h >= 0 && (h as usize) < n => Some(h as usize),
                h => return Err(schema(line, "heads", format!("head {h} at position {i} out of range"))),
            };
            tokens.push(AnnotatedToken {
                form: self.tokens[i].clone(),
                upos: self.pos_tags[i].clone(),
                head,
                deprel: self.deprels[i].clone(),
            });
        }
        Ok(AnnotatedSentence {
            id: self.id,
            tokens,
            cause: Span::from(self.cause),
            effect: Span::from(self.effect),
        })
    }
}

/// Pulls the offending field name out of a serde message such as
/// "missing field `pos_tags` at line 1 column 80".
fn field_from_serde(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    msg.split('`').nth(1).unwrap_or("<record>").to_string()
}

/// Parses JSONL text. With `validate`, every sentence must satisfy the tree and span invariants.
pub fn read_jsonl_str(text: &str, validate: bool) -> Result<Vec<AnnotatedSentence>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(line).map_err(|e| schema(lineno, &field_from_serde(&e), e.to_string()))?;
        let sentence = record.into_sentence(lineno)?;
        if validate {
            sentence.validate().map_err(|e| schema(lineno, "sentence", e.to_string()))?;
        }
        out.push(sentence);
    }
    Ok(out)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<AnnotatedSentence>> {
    read_jsonl_str(&read_to_string(path.as_ref())?, true)
}

pub fn read_jsonl_lenient(path: impl AsRef<Path>) -> Result<Vec<AnnotatedSentence>> {
    read_jsonl_str(&read_to_string(path.as_ref())?, false)
}

pub fn write_jsonl_string(sentences: &[AnnotatedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&serde_json::to_string(&Record::from(s)).expect("record serialization is infallible"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: impl AsRef<Path>, sentences: &[AnnotatedSentence]) -> Result<()> {
    write_atomic(path.as_ref(), write_jsonl_string(sentences).as_bytes())
}
