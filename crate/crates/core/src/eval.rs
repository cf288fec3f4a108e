//! Argmax decoding, sentence-level exact match and token-level P/R/F1.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, Label, Span};
use crate::error::{Error, Result};
use crate::model::DepBert;

/// Predicted classes for the real tokens of one sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub labels: Vec<Label>,
    pub cause: BTreeSet<usize>,
    pub effect: BTreeSet<usize>,
}

impl Prediction {
    pub fn from_labels(labels: Vec<Label>) -> Self {
        let pick = |want: Label| labels.iter().enumerate().filter(|(_, &l)| l == want).map(|(i, _)| i).collect();
        Prediction {
            cause: pick(Label::Cause),
            effect: pick(Label::Effect),
            labels,
        }
    }

    pub fn cause_spans(&self) -> Vec<Span> {
        runs(&self.cause)
    }

    pub fn effect_spans(&self) -> Vec<Span> {
        runs(&self.effect)
    }
}

/// Maximal runs of consecutive indices.
fn runs(set: &BTreeSet<usize>) -> Vec<Span> {
    let mut out: Vec<Span> = Vec::new();
    for &i in set {
        match out.last_mut() {
            Some(s) if s.end + 1 == i => s.end = i,
            _ => out.push(Span::new(i, i)),
        }
    }
    out
}

pub fn predict(model: &DepBert, sentence: &AnnotatedSentence) -> Result<Prediction> {
    let batch = model.batch(&[sentence])?;
    let (mut labels, _) = model.predict_batch(&batch)?;
    Ok(Prediction::from_labels(labels.remove(0)))
}

/// Prediction for a sentence whose cause/effect spans are unknown; the spans
/// on `sentence` are ignored.
pub fn predict_unannotated(model: &DepBert, sentence: &AnnotatedSentence) -> Result<Prediction> {
    let batch = model.batch_unlabeled(&[sentence])?;
    let (mut labels, _) = model.predict_batch(&batch)?;
    Ok(Prediction::from_labels(labels.remove(0)))
}

/// Predictions for a corpus, in input order, plus the batch-weighted mean loss.
/// Batches are scored on up to `threads` workers; results are reassembled in order.
pub fn predict_all(
    model: &DepBert,
    sentences: &[AnnotatedSentence],
    batch_size: usize,
    threads: usize,
) -> Result<(Vec<Prediction>, f64)> {
    if sentences.is_empty() {
        return Ok((Vec::new(), f64::NAN));
    }
    let chunks: Vec<&[AnnotatedSentence]> = sentences.chunks(batch_size.max(1)).collect();
    let score = |chunk: &&[AnnotatedSentence]| -> Result<(Vec<Vec<Label>>, f64, usize)> {
        let refs: Vec<&AnnotatedSentence> = chunk.iter().collect();
        let batch = model.batch(&refs)?;
        let (labels, loss) = model.predict_batch(&batch)?;
        Ok((labels, loss, chunk.len()))
    };
    let scored: Vec<Result<_>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| chunks.par_iter().map(score).collect())
    } else {
        chunks.iter().map(score).collect()
    };
    let mut preds = Vec::with_capacity(sentences.len());
    let mut loss_sum = 0.0;
    for r in scored {
        let (labels, loss, n) = r?;
        loss_sum += loss * n as f64;
        preds.extend(labels.into_iter().map(Prediction::from_labels));
    }
    Ok((preds, loss_sum / sentences.len() as f64))
}

/// Both the cause set and the effect set must equal gold exactly.
pub fn exact_match(pred: &Prediction, gold: &AnnotatedSentence) -> bool {
    pred.labels.len() == gold.len()
        && pred.cause.iter().copied().eq(gold.cause.indices())
        && pred.effect.iter().copied().eq(gold.effect.indices())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold token count (`tp + fn`).
    pub support: usize,
    /// Set when precision or recall had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

impl ClassMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        let precision = p.unwrap_or(0.0);
        let recall = r.unwrap_or(0.0);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            support: tp + fn_,
            zero_division: p.is_none() || r.is_none(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sentences: usize,
    pub exact_matches: usize,
    pub exact_match: f64,
    pub cause: ClassMetrics,
    pub effect: ClassMetrics,
    /// Pooled over cause and effect decisions; the headline numbers.
    pub micro: ClassMetrics,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>9} {:>9} {:>9} {:>7} {:>6} {:>6} {:>8}", "class", "precision", "recall", "f1", "tp", "fp", "fn", "support")?;
        for (name, m) in [("cause", &self.cause), ("effect", &self.effect), ("micro", &self.micro)] {
            writeln!(
                f,
                "{:<8} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>6} {:>6} {:>8}{}",
                name,
                m.precision,
                m.recall,
                m.f1,
                m.tp,
                m.fp,
                m.fn_,
                m.support,
                if m.zero_division { "  (zero division)" } else { "" }
            )?;
        }
        writeln!(f, "{:<8} {:>9.4} {:>9.4} {:>9.4}", "macro", self.macro_precision, self.macro_recall, self.macro_f1)?;
        write!(f, "exact match {:.4} ({}/{})", self.exact_match, self.exact_matches, self.sentences)
    }
}

/// Token-level metrics over classes Cause and Effect plus exact-match accuracy.
pub fn token_prf(preds: &[Prediction], golds: &[AnnotatedSentence]) -> Result<EvalReport> {
    if preds.len() != golds.len() {
        return Err(Error::precondition(
            "token_prf",
            format!("{} predictions for {} gold sentences", preds.len(), golds.len()),
        ));
    }
    // [class][tp, fp, fn]
    let mut counts = [[0usize; 3]; 2];
    let mut exact = 0;
    for (p, s) in preds.iter().zip(golds) {
        if p.labels.len() != s.len() {
            return Err(Error::precondition(
                "token_prf",
                format!("sentence {}: {} predicted labels for {} tokens", s.id, p.labels.len(), s.len()),
            ));
        }
        for (c, (pred_set, gold)) in [(&p.cause, s.cause), (&p.effect, s.effect)].into_iter().enumerate() {
            let tp = pred_set.iter().filter(|&&i| gold.contains(i)).count();
            counts[c][0] += tp;
            counts[c][1] += pred_set.len() - tp;
            counts[c][2] += gold.len() - tp;
        }
        exact += usize::from(exact_match(p, s));
    }
    let cause = ClassMetrics::from_counts(counts[0][0], counts[0][1], counts[0][2]);
    let effect = ClassMetrics::from_counts(counts[1][0], counts[1][1], counts[1][2]);
    let micro = ClassMetrics::from_counts(
        counts[0][0] + counts[1][0],
        counts[0][1] + counts[1][1],
        counts[0][2] + counts[1][2],
    );
    Ok(EvalReport {
        sentences: golds.len(),
        exact_matches: exact,
        exact_match: if golds.is_empty() { 0.0 } else { exact as f64 / golds.len() as f64 },
        macro_precision: (cause.precision + effect.precision) / 2.0,
        macro_recall: (cause.recall + effect.recall) / 2.0,
        macro_f1: (cause.f1 + effect.f1) / 2.0,
        cause,
        effect,
        micro,
    })
}

/// One line of the per-sentence output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceResult {
    pub id: String,
    pub exact_match: bool,
    pub cause: Vec<Span>,
    pub effect: Vec<Span>,
    pub cause_text: Vec<String>,
    pub effect_text: Vec<String>,
}

impl SentenceResult {
    pub fn new(pred: &Prediction, sentence: &AnnotatedSentence) -> Self {
        let text = |spans: &[Span]| {
            spans
                .iter()
                .map(|s| s.indices().map(|i| sentence.tokens[i].form.as_str()).collect::<Vec<_>>().join(" "))
                .collect()
        };
        let cause = pred.cause_spans();
        let effect = pred.effect_spans();
        SentenceResult {
            id: sentence.id.clone(),
            exact_match: exact_match(pred, sentence),
            cause_text: text(&cause),
            effect_text: text(&effect),
            cause,
            effect,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vitamin_d_fixture;
    use Label::{Cause as C, Effect as E, Other as O};

    #[test]
    fn fixture_gold_matches() {
        let s = vitamin_d_fixture();
        let p = Prediction::from_labels(vec![C, C, C, O, E]);
        assert!(exact_match(&p, &s));
        assert_eq!(p.cause_spans(), vec![Span::new(0, 2)]);
    }

    #[test]
    fn missed_effect_token_is_not_exact() {
        let s = vitamin_d_fixture();
        let p = Prediction::from_labels(vec![C, C, C, O, O]);
        assert!(!exact_match(&p, &s));
    }

    #[test]
    fn extra_cause_token_is_not_exact() {
        let s = vitamin_d_fixture();
        let p = Prediction::from_labels(vec![C, C, C, C, E]);
        assert!(!exact_match(&p, &s));
    }

    #[test]
    fn perfect_predictions() {
        let s = vitamin_d_fixture();
        let r = token_prf(&[Prediction::from_labels(s.gold_labels())], &[s]).unwrap();
        assert_eq!((r.micro.precision, r.micro.recall, r.micro.f1, r.exact_match), (1.0, 1.0, 1.0, 1.0));
        assert!(!r.micro.zero_division);
    }

    #[test]
    fn all_other_predictor() {
        let s = vitamin_d_fixture();
        let r = token_prf(&[Prediction::from_labels(vec![O; 5])], &[s]).unwrap();
        assert_eq!((r.micro.precision, r.micro.recall, r.exact_match), (0.0, 0.0, 0.0));
        assert!(r.micro.zero_division);
    }

    #[test]
    fn hand_counted_swap() {
        let s = vitamin_d_fixture();
        // sentence 1 perfect; sentence 2 swaps token 2 (cause) to effect
        let preds = [
            Prediction::from_labels(vec![C, C, C, O, E]),
            Prediction::from_labels(vec![C, C, E, O, E]),
        ];
        let r = token_prf(&preds, &[s.clone(), s]).unwrap();
        // cause: tp 5, fp 0, fn 1; effect: tp 2, fp 1, fn 0
        assert_eq!((r.cause.tp, r.cause.fp, r.cause.fn_), (5, 0, 1));
        assert_eq!((r.effect.tp, r.effect.fp, r.effect.fn_), (2, 1, 0));
        let p = 7.0 / 8.0;
        let rc = 7.0 / 8.0;
        assert!((r.micro.precision - p).abs() < 1e-12);
        assert!((r.micro.recall - rc).abs() < 1e-12);
        assert!((r.micro.f1 - 2.0 * p * rc / (p + rc)).abs() < 1e-12);
        assert!((r.cause.recall - 5.0 / 6.0).abs() < 1e-12);
        assert!((r.effect.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.exact_matches, 1);
    }

    #[test]
    fn length_mismatch_errors() {
        let s = vitamin_d_fixture();
        assert!(token_prf(&[Prediction::from_labels(vec![O; 4])], std::slice::from_ref(&s)).is_err());
        assert!(token_prf(&[], &[s]).is_err());
    }

    #[test]
    fn report_renders() {
        let s = vitamin_d_fixture();
        let r = token_prf(&[Prediction::from_labels(s.gold_labels())], &[s]).unwrap();
        let text = r.to_string();
        assert!(text.contains("micro") && text.contains("exact match 1.0000 (1/1)"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
