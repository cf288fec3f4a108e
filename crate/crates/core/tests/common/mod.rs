#![allow(dead_code)]

use depcause::corpus::{AnnotatedSentence, AnnotatedToken, Span, UPOS_TAGS};
use rand::Rng;

const WORDS: [&str; 12] = [
    "fever", "cough", "virus", "stress", "sugar", "insulin", "lungs", "smoke", "salt", "pain", "sleep", "bone",
];

/// A random single-rooted tree over `n` tokens: each token after the first in
/// a random order attaches to one placed before it.
pub fn random_heads(n: usize, rng: &mut impl Rng) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut heads = vec![None; n];
    for k in 1..n {
        heads[order[k]] = Some(order[rng.random_range(0..k)]);
    }
    heads
}

/// Random tree sentence with 2..=max_n tokens and disjoint cause/effect spans.
pub fn random_sentence(id: usize, max_n: usize, rng: &mut impl Rng) -> AnnotatedSentence {
    let n = rng.random_range(2..=max_n);
    let heads = random_heads(n, rng);
    let tokens = heads
        .iter()
        .map(|&h| {
            AnnotatedToken::new(
                WORDS[rng.random_range(0..WORDS.len())],
                UPOS_TAGS[rng.random_range(0..UPOS_TAGS.len())],
                h,
                if h.is_none() { "root" } else { "dep" },
            )
        })
        .collect();
    let split = rng.random_range(1..n);
    let c_start = rng.random_range(0..split);
    let c_end = rng.random_range(c_start..split);
    let e_start = rng.random_range(split..n);
    let e_end = rng.random_range(e_start..n);
    let (cause, effect) = if rng.random_bool(0.5) {
        (Span::new(c_start, c_end), Span::new(e_start, e_end))
    } else {
        (Span::new(e_start, e_end), Span::new(c_start, c_end))
    };
    AnnotatedSentence::new(format!("r{id}"), tokens, cause, effect).expect("random sentence is valid")
}

/// Undirected neighbours of padded position `p` (1-based token positions), self included.
pub fn padded_neighbours(s: &AnnotatedSentence, p: usize, m: usize) -> Vec<usize> {
    let mut out = vec![p];
    if (1..=s.len()).contains(&p) {
        let t = p - 1;
        if let Some(h) = s.tokens[t].head {
            out.push(h + 1);
        }
        for (c, tok) in s.tokens.iter().enumerate() {
            if tok.head == Some(t) {
                out.push(c + 1);
            }
        }
    }
    debug_assert!(out.iter().all(|&x| x < m));
    out.sort_unstable();
    out
}
