//! Corpus handling: text normalization, character vocabularies, length
//! filtering, manifests and the synthetic disfluent/fluent corpus.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::audio::{
    apply_cmvn, render_synthetic_frames, speaker_cmvn, speaker_channel, FeatureMatrix, FrontendConfig,
};
use crate::error::{Error, Result};

/// Lowercases, strips punctuation except apostrophes and collapses
/// whitespace. Typographic apostrophes are folded to `'` first.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.chars() {
        let c = if c == '\u{2019}' { '\'' } else { c };
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if c != '\'' && is_punctuation(c) {
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.extend(c.to_lowercase());
    }
    out
}

fn is_punctuation(c: char) -> bool {
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        ConnectorPunctuation
            | DashPunctuation
            | OpenPunctuation
            | ClosePunctuation
            | InitialPunctuation
            | FinalPunctuation
            | OtherPunctuation
    )
}

/// Character inventory with four trailing special symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    /// Builds from a sorted, duplicate-free character list.
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if chars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("vocabulary characters must be strictly increasing".into()));
        }
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Vocabulary { chars, index })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Total size including specials.
    pub fn len(&self) -> usize {
        self.chars.len() + 4
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pad(&self) -> usize {
        self.chars.len()
    }

    pub fn bos(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn eos(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn unk(&self) -> usize {
        self.chars.len() + 3
    }

    pub fn is_special(&self, id: usize) -> bool {
        id >= self.chars.len()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or_else(|| self.unk())
    }

    /// Unknown characters map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Specials are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.chars.get(i)).collect()
    }
}

/// Vocabulary over every character in `texts`, ordered by code point.
pub fn build_vocab<S: AsRef<str>>(texts: &[S]) -> Result<Vocabulary> {
    let set: BTreeSet<char> = texts.iter().flat_map(|t| t.as_ref().chars()).collect();
    Vocabulary::from_chars(set.into_iter().collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub features: Option<FeatureMatrix>,
    pub source_text: String,
    pub disfluent_refs: Vec<String>,
    pub fluent_refs: Vec<String>,
}

/// Which reference column serves as the training target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetSide {
    Disfluent,
    Fluent,
}

impl Utterance {
    pub fn refs(&self, side: TargetSide) -> &[String] {
        match side {
            TargetSide::Disfluent => &self.disfluent_refs,
            TargetSide::Fluent => &self.fluent_refs,
        }
    }

    /// First non-empty reference of the given side.
    pub fn target(&self, side: TargetSide) -> Option<&str> {
        self.refs(side).iter().map(String::as_str).find(|r| !r.is_empty())
    }
}

pub const CONTENT_ALPHABET: &[char] = &['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j'];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub max_frames: usize,
    /// Expected number of inserted disfluent tokens per fluent word.
    pub disfluency_rate: f64,
    /// Symbols that make up filler words; disjoint from the content alphabet.
    pub filler_symbols: Vec<char>,
    pub seed: u64,
    pub min_words: usize,
    pub max_words: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub n_speakers: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            max_frames: 1500,
            disfluency_rate: 0.2,
            filler_symbols: vec!['x', 'y', 'z'],
            seed: 1,
            min_words: 3,
            max_words: 5,
            min_word_len: 2,
            max_word_len: 4,
            n_speakers: 8,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.disfluency_rate) {
            return Err(Error::Config("disfluency_rate must lie in [0, 1]".into()));
        }
        if self.filler_symbols.is_empty() {
            return Err(Error::Config("at least one filler symbol is required".into()));
        }
        if let Some(c) = self
            .filler_symbols
            .iter()
            .find(|c| CONTENT_ALPHABET.contains(c) || !c.is_ascii_lowercase())
        {
            return Err(Error::Config(format!(
                "filler symbol {c:?} must be a lowercase letter outside a-j"
            )));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("need 1 <= min_words <= max_words".into()));
        }
        if self.min_word_len < 2 || self.min_word_len > self.max_word_len {
            return Err(Error::Config("need 2 <= min_word_len <= max_word_len".into()));
        }
        if self.n_speakers == 0 {
            return Err(Error::Config("n_speakers must be positive".into()));
        }
        Ok(())
    }

    /// Every filler word the generator can produce: each symbol once and doubled.
    pub fn filler_words(&self) -> Vec<String> {
        self.filler_symbols
            .iter()
            .flat_map(|&c| [c.to_string(), format!("{c}{c}")])
            .collect()
    }
}

/// Keeps utterances of at most `max_frames` frames, in order.
pub fn filter_long(utterances: Vec<Utterance>, config: &DataConfig) -> Result<Vec<Utterance>> {
    let mut kept = Vec::with_capacity(utterances.len());
    for u in utterances {
        let frames = u
            .features
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("utterance {} has no features", u.id)))?
            .frames();
        if frames <= config.max_frames {
            kept.push(u);
        }
    }
    Ok(kept)
}

fn random_word(rng: &mut impl Rng, config: &DataConfig) -> String {
    let len = rng.gen_range(config.min_word_len..=config.max_word_len);
    (0..len)
        .map(|_| *CONTENT_ALPHABET.choose(rng).expect("non-empty alphabet"))
        .collect()
}

fn clashes(a: &str, b: &str) -> bool {
    a.starts_with(b) || b.starts_with(a)
}

/// Generates `size` utterance texts. The fluent side is random words over
/// a-j where neighbouring words never repeat or prefix one another. Before
/// each fluent word a disfluency is inserted with probability
/// `disfluency_rate`: a filler word, an immediate repetition of the word, or
/// a false start (a strict prefix of the word). Features are not rendered.
pub fn make_synthetic_corpus(config: &DataConfig, size: usize) -> Result<Vec<Utterance>> {
    config.validate()?;
    if size == 0 {
        return Err(Error::InvalidInput("corpus size must be positive".into()));
    }
    let fillers = config.filler_words();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let n_words = rng.gen_range(config.min_words..=config.max_words);
        let mut fluent: Vec<String> = Vec::with_capacity(n_words);
        while fluent.len() < n_words {
            let w = random_word(&mut rng, config);
            if fluent.last().is_some_and(|p| clashes(p, &w)) {
                continue;
            }
            fluent.push(w);
        }
        let mut disfluent: Vec<String> = Vec::with_capacity(n_words * 2);
        for w in &fluent {
            if rng.gen::<f64>() < config.disfluency_rate {
                let kind = rng.gen::<f64>();
                let inserted = if kind < 0.4 {
                    fillers.choose(&mut rng).expect("fillers").clone()
                } else if kind < 0.7 {
                    w.clone()
                } else {
                    let cut = rng.gen_range(1..w.len());
                    w[..cut].to_string()
                };
                disfluent.push(inserted);
            }
            disfluent.push(w.clone());
        }
        let fluent = fluent.join(" ");
        let disfluent = disfluent.join(" ");
        out.push(Utterance {
            id: format!("synth-{i:06}"),
            speaker_id: format!("spk{:02}", i % config.n_speakers),
            features: None,
            source_text: disfluent.clone(),
            disfluent_refs: vec![disfluent],
            fluent_refs: vec![fluent],
        });
    }
    Ok(out)
}

/// Renders `source_text` of every utterance to frames, colours them per
/// speaker and applies per-speaker mean/variance normalization.
pub fn featurize_synthetic(utterances: &mut [Utterance], frontend: &FrontendConfig, seed: u64) -> Result<()> {
    let mut raw = Vec::with_capacity(utterances.len());
    for (i, u) in utterances.iter().enumerate() {
        let frames = render_synthetic_frames(&u.source_text, frontend, seed.wrapping_add(i as u64))?;
        raw.push(speaker_channel(&frames, &u.speaker_id));
    }
    let stats = speaker_cmvn(utterances.iter().map(|u| u.speaker_id.as_str()).zip(&raw))?;
    for (u, f) in utterances.iter_mut().zip(raw) {
        u.features = Some(apply_cmvn(&f, &stats[&u.speaker_id])?);
    }
    Ok(())
}

pub const REF_SEPARATOR: &str = "|||";

/// One manifest line: `id, speaker, feature path, source, disfluent refs,
/// fluent refs`, tab-separated, references joined by `|||`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub speaker_id: String,
    /// Resolved against the manifest directory; `None` when the field is empty.
    pub feature_path: Option<PathBuf>,
    pub source_text: String,
    pub disfluent_refs: Vec<String>,
    pub fluent_refs: Vec<String>,
}

impl ManifestRow {
    pub fn into_utterance(self, features: Option<FeatureMatrix>) -> Utterance {
        Utterance {
            id: self.id,
            speaker_id: self.speaker_id,
            features,
            source_text: self.source_text,
            disfluent_refs: self.disfluent_refs,
            fluent_refs: self.fluent_refs,
        }
    }

    /// Loads the referenced feature file, if any.
    pub fn load_utterance(self) -> Result<Utterance> {
        let features = match &self.feature_path {
            Some(p) => Some(FeatureMatrix::read(p)?),
            None => None,
        };
        Ok(self.into_utterance(features))
    }
}

fn split_refs(field: &str) -> Vec<String> {
    if field.is_empty() {
        return Vec::new();
    }
    field.split(REF_SEPARATOR).map(str::to_string).collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::format(
                path,
                format!("line {}: expected 6 tab-separated fields, found {}", n + 1, fields.len()),
            ));
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::format(path, format!("line {}: duplicate id {}", n + 1, fields[0])));
        }
        rows.push(ManifestRow {
            id: fields[0].to_string(),
            speaker_id: fields[1].to_string(),
            feature_path: (!fields[2].is_empty()).then(|| base.join(fields[2])),
            source_text: fields[3].to_string(),
            disfluent_refs: split_refs(fields[4]),
            fluent_refs: split_refs(fields[5]),
        });
    }
    Ok(rows)
}

/// Writes a manifest; `feature_paths[i]` is stored verbatim (relative paths
/// are interpreted against the manifest's directory when read back).
pub fn write_manifest(path: &Path, utterances: &[Utterance], feature_paths: &[Option<String>]) -> Result<()> {
    let mut out = String::new();
    for (i, u) in utterances.iter().enumerate() {
        let fp = feature_paths.get(i).cloned().flatten().unwrap_or_default();
        let fields = [
            u.id.clone(),
            u.speaker_id.clone(),
            fp,
            u.source_text.clone(),
            u.disfluent_refs.join(REF_SEPARATOR),
            u.fluent_refs.join(REF_SEPARATOR),
        ];
        if let Some(f) = fields.iter().find(|f| f.contains(['\t', '\n', '\r'])) {
            return Err(Error::InvalidInput(format!("field {f:?} contains a tab or newline")));
        }
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a UTF-8 file with one utterance per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Writes one line per entry with LF endings.
pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
