//! Corpus BLEU, a METEOR-style scorer, length statistics and character diff
//! reports. All text is whitespace-tokenized.

mod bleu;
mod diff;
mod length;
mod meteor;

pub use bleu::{bleu_corpus, BleuScore, BleuStats, MAX_ORDER};
pub use diff::{diff_pair, diff_report, write_diff_report, DiffReport, Span, SpanKind};
pub use length::{length_report, LengthReport};
pub use meteor::{meteor_corpus, meteor_lite, MeteorConfig, MeteorStats, SynonymTable};

use crate::error::{Error, Result};

/// Corpus-level metric selector.
#[derive(Clone, Debug, PartialEq)]
pub enum Metric {
    Bleu { use_bp: bool },
    Meteor(MeteorConfig),
}

impl Metric {
    /// Corpus score on the metric's natural scale (BLEU 0–100, METEOR 0–1).
    pub fn corpus<S: AsRef<str>>(&self, hyps: &[S], refs: &[Vec<String>]) -> Result<f64> {
        match self {
            Metric::Bleu { use_bp } => Ok(bleu_corpus(hyps, refs, *use_bp)?.score),
            Metric::Meteor(c) => meteor_corpus(hyps, refs, c),
        }
    }
}

pub(crate) fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Scores against each reference column separately and averages.
pub fn single_ref_average<S: AsRef<str>>(hyps: &[S], refs: &[Vec<String>], metric: &Metric) -> Result<f64> {
    let k = refs.first().map_or(0, Vec::len);
    if k == 0 {
        return Err(Error::InvalidInput("every utterance needs at least one reference".into()));
    }
    if refs.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidInput("ragged reference counts".into()));
    }
    let mut total = 0.0;
    for col in 0..k {
        let column: Vec<Vec<String>> = refs.iter().map(|r| vec![r[col].clone()]).collect();
        total += metric.corpus(hyps, &column)?;
    }
    Ok(total / k as f64)
}
