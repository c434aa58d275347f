use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

use super::tokens;

/// Groups of interchangeable words. File format: one group per line,
/// whitespace-separated, `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynonymTable {
    group: HashMap<String, usize>,
}

impl SynonymTable {
    pub fn from_groups<S: AsRef<str>>(groups: &[Vec<S>]) -> Self {
        let mut group = HashMap::new();
        for (i, g) in groups.iter().enumerate() {
            for w in g {
                group.insert(w.as_ref().to_string(), i);
            }
        }
        SynonymTable { group }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let groups: Vec<Vec<&str>> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").split_whitespace().collect::<Vec<_>>())
            .filter(|g| !g.is_empty())
            .collect();
        Ok(Self::from_groups(&groups))
    }

    pub fn same(&self, a: &str, b: &str) -> bool {
        matches!((self.group.get(a), self.group.get(b)), (Some(x), Some(y)) if x == y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeteorConfig {
    /// Weight of precision in the harmonic mean; recall gets `1 - alpha`.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub stem: bool,
    pub synonyms: Option<SynonymTable>,
}

impl Default for MeteorConfig {
    fn default() -> Self {
        MeteorConfig {
            alpha: 0.9,
            beta: 3.0,
            gamma: 0.5,
            stem: true,
            synonyms: None,
        }
    }
}

impl MeteorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("meteor alpha and gamma must lie in [0, 1]".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("meteor beta must be positive".into()));
        }
        Ok(())
    }
}

/// Strips one of a handful of English suffixes.
fn stem(word: &str) -> &str {
    for suffix in ["ing", "es", "ed", "ly", "s"] {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.chars().count() >= 2 {
                return base;
            }
        }
    }
    word
}

/// Alignment statistics for one sentence pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MeteorStats {
    pub matches: usize,
    pub chunks: usize,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl MeteorStats {
    pub fn align(hyp: &str, reference: &str, config: &MeteorConfig) -> Self {
        let h = tokens(hyp);
        let r = tokens(reference);
        let mut link: Vec<Option<usize>> = vec![None; h.len()];
        let mut used = vec![false; r.len()];
        let mut stages: Vec<Box<dyn Fn(&str, &str) -> bool + '_>> = vec![Box::new(|a, b| a == b)];
        if config.stem {
            stages.push(Box::new(|a, b| stem(a) == stem(b)));
        }
        if let Some(table) = &config.synonyms {
            stages.push(Box::new(move |a, b| table.same(a, b)));
        }
        for matches in &stages {
            for i in 0..h.len() {
                if link[i].is_some() {
                    continue;
                }
                // Continue the previous hypothesis word's run when possible.
                let after_prev = i
                    .checked_sub(1)
                    .and_then(|p| link[p])
                    .map(|j| j + 1)
                    .filter(|&j| j < r.len() && !used[j] && matches(h[i], r[j]));
                let pick = after_prev.or_else(|| (0..r.len()).find(|&j| !used[j] && matches(h[i], r[j])));
                if let Some(j) = pick {
                    link[i] = Some(j);
                    used[j] = true;
                }
            }
        }
        let matches = link.iter().flatten().count();
        let mut chunks = 0;
        let mut prev: Option<usize> = None;
        for l in &link {
            match (prev, l) {
                (Some(p), Some(j)) if *j == p + 1 => {}
                (_, Some(_)) => chunks += 1,
                _ => {}
            }
            prev = *l;
        }
        MeteorStats {
            matches,
            chunks,
            hyp_len: h.len(),
            ref_len: r.len(),
        }
    }

    pub fn add(&mut self, other: &MeteorStats) {
        self.matches += other.matches;
        self.chunks += other.chunks;
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// `F · (1 − γ (ch/m)^β)` with `F = PR / (αP + (1−α)R)`.
    pub fn score(&self, config: &MeteorConfig) -> f64 {
        if self.matches == 0 {
            return 0.0;
        }
        let m = self.matches as f64;
        let p = m / self.hyp_len as f64;
        let r = m / self.ref_len as f64;
        let f = p * r / (config.alpha * p + (1.0 - config.alpha) * r);
        let penalty = config.gamma * (self.chunks as f64 / m).powf(config.beta);
        f * (1.0 - penalty)
    }
}

/// Sentence score in `[0, 1]`, maximized over references.
pub fn meteor_lite<S: AsRef<str>>(hyp: &str, refs: &[S], config: &MeteorConfig) -> f64 {
    refs.iter()
        .map(|r| MeteorStats::align(hyp, r.as_ref(), config).score(config))
        .fold(0.0, f64::max)
}

/// Corpus score from pooled alignment statistics; each utterance
/// contributes the statistics of its best-scoring reference.
pub fn meteor_corpus<S: AsRef<str>>(hyps: &[S], refs: &[Vec<String>], config: &MeteorConfig) -> Result<f64> {
    config.validate()?;
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
    let mut total = MeteorStats::default();
    for (i, (h, rs)) in hyps.iter().zip(refs).enumerate() {
        let best = rs
            .iter()
            .map(|r| MeteorStats::align(h.as_ref(), r, config))
            .max_by(|a, b| a.score(config).total_cmp(&b.score(config)))
            .ok_or_else(|| Error::InvalidInput(format!("utterance {i} has no reference")))?;
        total.add(&best);
    }
    Ok(total.score(config))
}
