//! Checkpoint files: a text header of `key=value` lines, a blank line, then
//! a tensor block.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::params::{read_tensors, write_tensors};
use crate::nn::{Real, Tensor};

use super::{ModelConfig, Seq2Seq};

const MAGIC_LINE: &str = "fluent-slt checkpoint 1";

/// Ordered `key=value` pairs. Keys are unique; values hold no newlines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parses a value, failing with the key name if absent or malformed.
    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.get(key)
            .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks {key}")))?
            .parse()
            .map_err(|_| Error::InvalidInput(format!("checkpoint value for {key} is malformed")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }
}

pub fn write_checkpoint<'a, T: Real + 'a>(
    path: &Path,
    header: &Header,
    tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut text = format!("{MAGIC_LINE}\n");
    for (k, v) in &header.entries {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::InvalidInput(format!("header entry {k:?} cannot be stored")));
        }
        text.push_str(&format!("{k}={v}\n"));
    }
    text.push('\n');
    out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    write_tensors(&mut out, tensors).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<(Header, Vec<(String, Tensor<T>)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let mut line = String::new();
    input.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if line.trim_end() != MAGIC_LINE {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let mut header = Header::new();
    loop {
        line.clear();
        let n = input.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::format(path, "header not terminated"));
        }
        let l = line.trim_end_matches('\n');
        if l.is_empty() {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("malformed header line {l:?}")))?;
        header.set(k, v);
    }
    let tensors = read_tensors(&mut input).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((header, tensors))
}

pub(crate) fn vocab_to_value(vocab: &Vocabulary) -> String {
    vocab
        .chars()
        .iter()
        .map(|c| (*c as u32).to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) fn vocab_from_value(value: &str) -> Result<Vocabulary> {
    let chars = value
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u32>()
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(|| Error::InvalidInput(format!("bad vocabulary code point {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Vocabulary::from_chars(chars)
}

/// Prefix of tensors that belong to optimizer state rather than the model.
pub const OPTIMIZER_PREFIX: &str = "adam.";

impl<T: Real> Seq2Seq<T> {
    /// Header entries describing shapes and vocabularies.
    pub fn header(&self) -> Header {
        let mut h = Header::new();
        for (k, v) in self.config.to_entries() {
            h.set(k, v);
        }
        h.set("vocab.target", vocab_to_value(&self.target_vocab));
        if let Some(s) = &self.source_vocab {
            h.set("vocab.source", vocab_to_value(s));
        }
        h
    }

    /// Rebuilds a model from a header and its tensors; optimizer tensors
    /// are ignored.
    pub fn from_parts(header: &Header, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let config = ModelConfig::from_entries(|k| header.get(k).map(str::to_string))?;
        let target = vocab_from_value(
            header
                .get("vocab.target")
                .ok_or_else(|| Error::InvalidInput("checkpoint lacks vocab.target".into()))?,
        )?;
        let source = header.get("vocab.source").map(vocab_from_value).transpose()?;
        let mut model = Seq2Seq::new(config, target, source, 0)?;
        let own: Vec<_> = tensors
            .into_iter()
            .filter(|(n, _)| !n.starts_with(OPTIMIZER_PREFIX))
            .collect();
        model.params.load_named(own)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<_> = self.params.named().collect();
        write_checkpoint(path, &self.header(), named.into_iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = read_checkpoint(path)?;
        Self::from_parts(&header, tensors).map_err(|e| match e {
            Error::Io { .. } | Error::Format { .. } => e,
            other => Error::format(path, other.to_string()),
        })
    }
}
