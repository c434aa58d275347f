//! Post-processing of disfluent output: rule-based filtering and neural
//! monolingual post-editing.

use std::collections::BTreeSet;
use std::path::Path;

use crate::data::normalize_text;
use crate::decode::{translate, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::{Seq2Seq, Source};
use crate::nn::Real;

const DEFAULT_LEXICON: &str = include_str!("../data/fillers.txt");

/// Set of normalized filler tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FillerLexicon {
    words: BTreeSet<String>,
}

impl FillerLexicon {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        FillerLexicon {
            words: words
                .iter()
                .map(|w| normalize_text(w.as_ref()))
                .filter(|w| !w.is_empty() && !w.contains(' '))
                .collect(),
        }
    }

    /// One token per line; `#` starts a comment.
    pub fn parse(text: &str) -> Self {
        let words: Vec<&str> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .collect();
        Self::new(&words)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    /// Synthetic filler symbols plus common English fillers.
    pub fn default_lexicon() -> Self {
        Self::parse(DEFAULT_LEXICON)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterConfig {
    pub lexicon: FillerLexicon,
    pub max_repetition_ngram: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            lexicon: FillerLexicon::default_lexicon(),
            max_repetition_ngram: 3,
        }
    }
}

/// Drops the second copy of every immediately repeated n-gram, longest
/// first. Returns whether anything changed.
fn collapse_once(tokens: &mut Vec<&str>, max_n: usize) -> bool {
    let mut changed = false;
    for n in (1..=max_n).rev() {
        let mut i = 0;
        while i + 2 * n <= tokens.len() {
            if tokens[i..i + n] == tokens[i + n..i + 2 * n] {
                tokens.drain(i + n..i + 2 * n);
                changed = true;
            } else {
                i += 1;
            }
        }
    }
    changed
}

/// Removes lexicon tokens, then collapses immediate repetitions until
/// nothing changes.
pub fn filter_disfluencies(text: &str, config: &FilterConfig) -> Result<String> {
    if config.max_repetition_ngram == 0 {
        return Err(Error::Config("max_repetition_ngram must be at least 1".into()));
    }
    let mut tokens: Vec<&str> = text
        .split_whitespace()
        .filter(|t| !config.lexicon.contains(t))
        .collect();
    while collapse_once(&mut tokens, config.max_repetition_ngram) {}
    Ok(tokens.join(" "))
}

/// Rewrites disfluent text with a trained text-to-text model. Characters
/// outside the source vocabulary are fed as UNK.
pub fn monomt_postedit<T: Real>(disfluent: &str, model: &Seq2Seq<T>, decode: &DecodeConfig) -> Result<String> {
    let tokens = model.source_tokens(disfluent)?;
    translate(model, &Source::Tokens(tokens), decode)
}
