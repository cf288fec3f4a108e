//! CoNLL-U reader and writer.
//!
//! Cause and effect spans travel as sentence comments, 0-based and inclusive
//! over the word tokens left after dropping multi-word ranges and empty nodes:
//!
//! ```text
//! # sent_id = vitamin-d
//! # cause = 0..2
//! # effect = 4..4
//! 1	Vitamin	_	NOUN	_	_	2	compound	_	_
//! ```

use std::fmt::Write as _;

use super::{AnnotatedSentence, AnnotatedToken, Span};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConlluDocument {
    pub sentences: Vec<AnnotatedSentence>,
    /// Blocks dropped because a `# cause` or `# effect` comment was missing.
    pub skipped_missing_spans: usize,
}

/// Parses and validates every sentence (tree shape and spans).
pub fn parse_conllu(text: &str) -> Result<ConlluDocument> {
    parse(text, true)
}

/// Parses without tree or span validation, for corpus diagnostics.
pub fn parse_conllu_lenient(text: &str) -> Result<ConlluDocument> {
    parse(text, false)
}

#[derive(Default)]
struct Block {
    first_line: usize,
    sent_id: Option<String>,
    cause: Option<Span>,
    effect: Option<Span>,
    tokens: Vec<AnnotatedToken>,
}

fn parse(text: &str, validate: bool) -> Result<ConlluDocument> {
    let mut doc = ConlluDocument::default();
    let mut block = Block::default();
    let mut started = false;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if started {
                finish(std::mem::take(&mut block), &mut doc, validate)?;
                started = false;
            }
            continue;
        }
        if !started {
            block.first_line = lineno;
            started = true;
        }
        if let Some(comment) = line.strip_prefix('#') {
            parse_comment(comment, lineno, &mut block)?;
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 10 tab-separated columns, found {}", cols.len()),
            });
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad token id `{}`", cols[0]),
        })?;
        if id != block.tokens.len() + 1 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("token id {id} out of sequence, expected {}", block.tokens.len() + 1),
            });
        }
        let head: usize = cols[6].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad HEAD `{}`", cols[6]),
        })?;
        block.tokens.push(AnnotatedToken {
            form: cols[1].to_string(),
            upos: cols[3].to_string(),
            head: head.checked_sub(1),
            deprel: cols[7].to_string(),
        });
    }
    if started {
        finish(block, &mut doc, validate)?;
    }
    Ok(doc)
}

fn parse_comment(comment: &str, lineno: usize, block: &mut Block) -> Result<()> {
    let Some((key, value)) = comment.split_once('=') else {
        return Ok(());
    };
    let value = value.trim();
    let span = |v: &str| {
        v.parse::<Span>().map_err(|message| Error::Parse { line: lineno, message })
    };
    match key.trim() {
        "sent_id" => block.sent_id = Some(value.to_string()),
        "cause" => block.cause = Some(span(value)?),
        "effect" => block.effect = Some(span(value)?),
        _ => {}
    }
    Ok(())
}

fn finish(block: Block, doc: &mut ConlluDocument, validate: bool) -> Result<()> {
    if block.tokens.is_empty() {
        return Ok(());
    }
    let id = block
        .sent_id
        .unwrap_or_else(|| format!("conllu-{}", doc.sentences.len() + doc.skipped_missing_spans + 1));
    let (Some(cause), Some(effect)) = (block.cause, block.effect) else {
        log::warn!("line {}: sentence {id} has no cause/effect comments, skipped", block.first_line);
        doc.skipped_missing_spans += 1;
        return Ok(());
    };
    let sentence = AnnotatedSentence {
        id,
        tokens: block.tokens,
        cause,
        effect,
    };
    if validate {
        sentence.validate()?;
    }
    doc.sentences.push(sentence);
    Ok(())
}

pub fn write_conllu(sentences: &[AnnotatedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        let _ = writeln!(out, "# sent_id = {}", s.id);
        let _ = writeln!(out, "# text = {}", s.text());
        let _ = writeln!(out, "# cause = {}", s.cause);
        let _ = writeln!(out, "# effect = {}", s.effect);
        for (i, t) in s.tokens.iter().enumerate() {
            let head = t.head.map_or(0, |h| h + 1);
            let deprel = if t.deprel.is_empty() { "_" } else { &t.deprel };
            let _ = writeln!(out, "{}\t{}\t_\t{}\t_\t_\t{}\t{}\t_\t_", i + 1, t.form, t.upos, head, deprel);
        }
        out.push('\n');
    }
    out
}
