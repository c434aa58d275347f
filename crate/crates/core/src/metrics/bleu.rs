use std::collections::HashMap;

use crate::error::{Error, Result};

use super::tokens;

pub const MAX_ORDER: usize = 4;

/// Sufficient statistics for corpus BLEU; sums over utterances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    /// Candidate length `c`.
    pub hyp_len: usize,
    /// Effective reference length `r`.
    pub ref_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BleuScore {
    /// 0–100.
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'a, 'b>(toks: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut counts = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    /// Statistics for one candidate against its references. Counts are
    /// clipped by the maximum count in any single reference; `r` is the
    /// reference length closest to `c`, shorter on ties.
    pub fn sentence<S: AsRef<str>>(hyp: &str, refs: &[S]) -> Self {
        let h = tokens(hyp);
        let rs: Vec<Vec<&str>> = refs.iter().map(|r| tokens(r.as_ref())).collect();
        let mut stats = BleuStats {
            hyp_len: h.len(),
            ..BleuStats::default()
        };
        stats.ref_len = rs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .unwrap_or(0);
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
            for r in &rs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            stats.totals[n - 1] = h.len().saturating_sub(n - 1);
            stats.matches[n - 1] = hc
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
        }
        stats
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// `BP = min(1, e^{1 - r/c})`; zero for an empty candidate side.
    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        (1.0 - r / c).exp().min(1.0)
    }

    /// Geometric mean of the four precisions times the brevity penalty.
    /// Any zero precision makes the score zero.
    pub fn score(&self, use_bp: bool) -> BleuScore {
        let mut precisions = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            if self.totals[n] > 0 {
                precisions[n] = self.matches[n] as f64 / self.totals[n] as f64;
            }
        }
        let bp = if use_bp { self.brevity_penalty() } else { 1.0 };
        let score = if precisions.iter().all(|&p| p > 0.0) {
            let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
            100.0 * bp * log_mean.exp()
        } else {
            0.0
        };
        BleuScore {
            score,
            precisions,
            brevity_penalty: bp,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
        }
    }
}

/// Corpus-level BLEU over aligned hypotheses and per-utterance reference sets.
pub fn bleu_corpus<S: AsRef<str>>(hyps: &[S], refs: &[Vec<String>], use_bp: bool) -> Result<BleuScore> {
    if hyps.is_empty() {
        return Err(Error::InvalidInput("empty hypothesis set".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::InvalidInput(format!(
            "{} hypotheses but {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    let mut total = BleuStats::default();
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        if r.is_empty() {
            return Err(Error::InvalidInput(format!("utterance {i} has no reference")));
        }
        total.add(&BleuStats::sentence(h.as_ref(), r));
    }
    Ok(total.score(use_bp))
}
