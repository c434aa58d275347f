//! Flat `section.key=value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use fluent_slt::audio::FrontendConfig;
use fluent_slt::data::{DataConfig, TargetSide};
use fluent_slt::decode::DecodeConfig;
use fluent_slt::metrics::{Metric, MeteorConfig, SynonymTable};
use fluent_slt::model::{DecoderConfig, EncoderConfig, ModelConfig, MonoMtConfig};
use fluent_slt::train::TrainConfig;
use fluent_slt::{Error, Result};

pub const SEED_ENV: &str = "FLUENT_SLT_SEED";

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.size", "2000", "utterances generated by synth-data"),
    ("data.dev_size", "100", "of which held out as dev"),
    ("data.test_size", "200", "of which held out as test"),
    ("data.max_frames", "1500", "longer utterances are dropped"),
    ("data.disfluency_rate", "0.2", "chance of a disfluency before each fluent word"),
    ("data.filler_symbols", "xyz", "letters that form filler words"),
    ("data.min_words", "3", "fluent words per utterance, lower bound"),
    ("data.max_words", "5", "fluent words per utterance, upper bound"),
    ("data.min_word_len", "2", "characters per word, lower bound"),
    ("data.max_word_len", "4", "characters per word, upper bound"),
    ("data.n_speakers", "8", "synthetic speakers"),
    ("data.seed", "1", "corpus seed; falls back to FLUENT_SLT_SEED"),
    ("data.target", "fluent", "training target column: fluent | disfluent"),
    ("frontend.sample_rate_hz", "8000", "expected WAV sample rate"),
    ("frontend.window_ms", "25", "analysis window"),
    ("frontend.hop_ms", "10", "frame shift"),
    ("frontend.n_mels", "40", "mel filterbank channels"),
    ("frontend.low_freq_hz", "20", "lowest filter edge"),
    ("frontend.high_freq_hz", "0", "highest filter edge, 0 for Nyquist"),
    ("frontend.dither", "0", "dither amplitude"),
    ("frontend.frames_per_char", "4", "synthetic renderer: frames per character"),
    ("frontend.render_noise", "0.1", "synthetic renderer: noise standard deviation"),
    ("model.kind", "speech", "speech | monomt"),
    ("model.encoder_hidden", "512", "encoder LSTM units per direction"),
    ("model.n_bilstm", "3", "encoder BiLSTM layers"),
    ("model.downsample_blocks", "2", "speech encoder blocks that halve time"),
    ("model.src_emb_dim", "64", "monomt source embedding size"),
    ("model.decoder_hidden", "512", "decoder LSTM units"),
    ("model.emb_dim", "64", "target embedding size"),
    ("model.attention_hidden", "128", "attention MLP width"),
    ("model.input_feeding", "true", "feed the previous context into the decoder"),
    ("train.lr0", "0.0003", "initial Adam learning rate"),
    ("train.decay_factor", "0.5", "learning-rate decay factor"),
    ("train.patience_first", "10", "stale epochs before the first decay"),
    ("train.patience_after", "5", "stale epochs before later decays"),
    ("train.recurrent_dropout", "0.2", "variational dropout on recurrent states"),
    ("train.char_dropout", "0.1", "target character dropout"),
    ("train.label_smoothing", "0.1", "label smoothing epsilon"),
    ("train.avg_batch_size", "36", "mean utterances per dynamic batch"),
    ("train.max_epochs", "100", "epoch cap"),
    ("train.min_lr_ratio", "0.015625", "stop once lr < lr0 times this"),
    ("train.dev_limit", "500", "dev utterances decoded per epoch"),
    ("train.seed", "1", "training seed; falls back to FLUENT_SLT_SEED"),
    ("decode.beam_size", "15", "beam width"),
    ("decode.length_norm_exponent", "1.5", "score = logprob / len^exponent"),
    ("decode.max_len_factor", "3", "output cap relative to encoder length"),
    ("decode.max_len_floor", "50", "minimum output cap"),
    ("metrics.metric", "bleu", "bleu | meteor"),
    ("metrics.use_bp", "true", "apply the BLEU brevity penalty"),
    ("metrics.meteor_alpha", "0.9", "METEOR recall weight"),
    ("metrics.meteor_beta", "3", "METEOR fragmentation exponent"),
    ("metrics.meteor_gamma", "0.5", "METEOR fragmentation weight"),
    ("metrics.meteor_stem", "true", "match on stripped suffixes"),
    ("metrics.synonyms", "", "synonym file, one group per line"),
];

const SEEDED: &[&str] = &["data.seed", "train.seed"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    env_seed: Option<String>,
}

fn known(key: &str) -> Result<()> {
    if KEYS.iter().any(|k| k.0 == key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown configuration key {key:?}")))
    }
}

impl RunConfig {
    pub fn new(env_seed: Option<String>) -> Self {
        RunConfig {
            values: BTreeMap::new(),
            env_seed,
        }
    }

    /// Reads `key=value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        known(key)?;
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        if let Some(v) = self.values.get(key) {
            return v;
        }
        if SEEDED.contains(&key) {
            if let Some(s) = &self.env_seed {
                return s;
            }
        }
        KEYS.iter().find(|k| k.0 == key).map(|k| k.1).expect("known key")
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
    }

    /// All settings after defaults and overrides, in key order.
    pub fn effective(&self) -> Vec<(String, String)> {
        KEYS.iter().map(|k| (k.0.to_string(), self.raw(k.0).to_string())).collect()
    }

    pub fn data(&self) -> Result<DataConfig> {
        let c = DataConfig {
            max_frames: self.get("data.max_frames")?,
            disfluency_rate: self.get("data.disfluency_rate")?,
            filler_symbols: self.raw("data.filler_symbols").chars().collect(),
            seed: self.get("data.seed")?,
            min_words: self.get("data.min_words")?,
            max_words: self.get("data.max_words")?,
            min_word_len: self.get("data.min_word_len")?,
            max_word_len: self.get("data.max_word_len")?,
            n_speakers: self.get("data.n_speakers")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn target(&self) -> Result<TargetSide> {
        match self.raw("data.target") {
            "fluent" => Ok(TargetSide::Fluent),
            "disfluent" => Ok(TargetSide::Disfluent),
            other => Err(Error::Config(format!("data.target must be fluent or disfluent, got {other:?}"))),
        }
    }

    pub fn frontend(&self) -> Result<FrontendConfig> {
        let c = FrontendConfig {
            sample_rate_hz: self.get("frontend.sample_rate_hz")?,
            window_ms: self.get("frontend.window_ms")?,
            hop_ms: self.get("frontend.hop_ms")?,
            n_mels: self.get("frontend.n_mels")?,
            low_freq_hz: self.get("frontend.low_freq_hz")?,
            high_freq_hz: self.get("frontend.high_freq_hz")?,
            dither: self.get("frontend.dither")?,
            frames_per_char: self.get("frontend.frames_per_char")?,
            render_noise: self.get("frontend.render_noise")?,
            ..FrontendConfig::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let decoder = DecoderConfig {
            n_layers: 1,
            hidden: self.get("model.decoder_hidden")?,
            emb_dim: self.get("model.emb_dim")?,
            attention_hidden: self.get("model.attention_hidden")?,
            input_feeding: self.get("model.input_feeding")?,
        };
        let config = match self.raw("model.kind") {
            "speech" => ModelConfig::speech(
                EncoderConfig {
                    input_dim: self.get("frontend.n_mels")?,
                    hidden: self.get("model.encoder_hidden")?,
                    n_bilstm: self.get("model.n_bilstm")?,
                    downsample_blocks: self.get("model.downsample_blocks")?,
                },
                decoder,
            ),
            "monomt" => ModelConfig::text(
                MonoMtConfig {
                    n_bilstm: self.get("model.n_bilstm")?,
                    hidden: self.get("model.encoder_hidden")?,
                    src_emb_dim: self.get("model.src_emb_dim")?,
                },
                decoder,
            ),
            other => return Err(Error::Config(format!("model.kind must be speech or monomt, got {other:?}"))),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            lr0: self.get("train.lr0")?,
            decay_factor: self.get("train.decay_factor")?,
            patience_first: self.get("train.patience_first")?,
            patience_after: self.get("train.patience_after")?,
            recurrent_dropout: self.get("train.recurrent_dropout")?,
            char_dropout: self.get("train.char_dropout")?,
            label_smoothing: self.get("train.label_smoothing")?,
            avg_batch_size: self.get("train.avg_batch_size")?,
            max_epochs: self.get("train.max_epochs")?,
            min_lr_ratio: self.get("train.min_lr_ratio")?,
            dev_limit: self.get("train.dev_limit")?,
            seed: self.get("train.seed")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn decode(&self) -> Result<DecodeConfig> {
        let c = DecodeConfig {
            beam_size: self.get("decode.beam_size")?,
            length_norm_exponent: self.get("decode.length_norm_exponent")?,
            max_len_factor: self.get("decode.max_len_factor")?,
            max_len_floor: self.get("decode.max_len_floor")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn metric(&self) -> Result<Metric> {
        match self.raw("metrics.metric") {
            "bleu" => Ok(Metric::Bleu {
                use_bp: self.get("metrics.use_bp")?,
            }),
            "meteor" => {
                let synonyms = match self.raw("metrics.synonyms") {
                    "" => None,
                    path => Some(SynonymTable::load(Path::new(path))?),
                };
                let c = MeteorConfig {
                    alpha: self.get("metrics.meteor_alpha")?,
                    beta: self.get("metrics.meteor_beta")?,
                    gamma: self.get("metrics.meteor_gamma")?,
                    stem: self.get("metrics.meteor_stem")?,
                    synonyms,
                };
                c.validate()?;
                Ok(Metric::Meteor(c))
            }
            other => Err(Error::Config(format!("metrics.metric must be bleu or meteor, got {other:?}"))),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.get(key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_library() {
        let c = RunConfig::new(None);
        assert_eq!(c.train().unwrap(), TrainConfig::default());
        assert_eq!(c.decode().unwrap(), DecodeConfig::default());
        assert_eq!(c.data().unwrap(), DataConfig::default());
        assert_eq!(c.frontend().unwrap(), FrontendConfig::default());
        assert_eq!(c.model().unwrap(), ModelConfig::default());
        assert_eq!(c.metric().unwrap(), Metric::Bleu { use_bp: true });
    }

    #[test]
    fn file_then_override() {
        let mut c = RunConfig::new(None);
        c.merge_text("# comment\ntrain.lr0 = 0.001\n\ndecode.beam_size=4 # narrow\n", "t")
            .unwrap();
        c.set_pair("decode.beam_size=7").unwrap();
        assert_eq!(c.train().unwrap().lr0, 0.001);
        assert_eq!(c.decode().unwrap().beam_size, 7);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        let mut c = RunConfig::new(None);
        assert!(matches!(c.set_pair("train.lr=1"), Err(Error::Config(_))));
        assert!(matches!(c.merge_text("decode.beam_size 3", "t"), Err(Error::Config(_))));
        c.set_pair("decode.beam_size=wide").unwrap();
        assert!(matches!(c.decode(), Err(Error::Config(_))));
    }

    #[test]
    fn env_seed_is_only_a_fallback() {
        let mut c = RunConfig::new(Some("77".into()));
        assert_eq!(c.train().unwrap().seed, 77);
        assert_eq!(c.data().unwrap().seed, 77);
        c.set_pair("train.seed=5").unwrap();
        assert_eq!(c.train().unwrap().seed, 5);
    }

    #[test]
    fn target_column_selects_the_reference_side() {
        let mut c = RunConfig::new(None);
        assert_eq!(c.target().unwrap(), TargetSide::Fluent);
        c.set_pair("data.target=disfluent").unwrap();
        assert_eq!(c.target().unwrap(), TargetSide::Disfluent);
        c.set_pair("data.target=both").unwrap();
        assert!(c.target().is_err());
    }
}
