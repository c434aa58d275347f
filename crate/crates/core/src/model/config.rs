use crate::error::{Error, Result};

/// Speech encoder: `downsample_blocks` × [BiLSTM → NiN → BatchNorm → ReLU]
/// followed by one more BiLSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Units per direction of every BiLSTM; also the NiN output width.
    pub hidden: usize,
    pub n_bilstm: usize,
    pub downsample_blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 40,
            hidden: 512,
            n_bilstm: 3,
            downsample_blocks: 2,
        }
    }
}

impl EncoderConfig {
    pub fn downsampling(&self) -> usize {
        1 << self.downsample_blocks
    }

    /// Encoder states produced for `frames` input frames.
    pub fn output_len(&self, frames: usize) -> usize {
        (0..self.downsample_blocks).fold(frames, |t, _| t.div_ceil(2))
    }
}

/// Character encoder of the text-to-text post-editor: embeddings and a
/// stack of BiLSTMs without time reduction.
#[derive(Clone, Debug, PartialEq)]
pub struct MonoMtConfig {
    pub n_bilstm: usize,
    pub hidden: usize,
    pub src_emb_dim: usize,
}

impl Default for MonoMtConfig {
    fn default() -> Self {
        MonoMtConfig {
            n_bilstm: 4,
            hidden: 512,
            src_emb_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub emb_dim: usize,
    pub attention_hidden: usize,
    pub input_feeding: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_layers: 1,
            hidden: 512,
            emb_dim: 64,
            attention_hidden: 128,
            input_feeding: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderKind {
    Speech(EncoderConfig),
    Text(MonoMtConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::Speech(EncoderConfig::default()),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn speech(encoder: EncoderConfig, decoder: DecoderConfig) -> Self {
        ModelConfig {
            encoder: EncoderKind::Speech(encoder),
            decoder,
        }
    }

    pub fn text(encoder: MonoMtConfig, decoder: DecoderConfig) -> Self {
        ModelConfig {
            encoder: EncoderKind::Text(encoder),
            decoder,
        }
    }

    /// Width of each encoder state seen by attention.
    pub fn enc_dim(&self) -> usize {
        match &self.encoder {
            EncoderKind::Speech(e) => 2 * e.hidden,
            EncoderKind::Text(e) => 2 * e.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.decoder;
        if d.n_layers != 1 {
            return Err(Error::Config("only a single decoder layer is supported".into()));
        }
        if d.hidden == 0 || d.emb_dim == 0 || d.attention_hidden == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        match &self.encoder {
            EncoderKind::Speech(e) => {
                if e.n_bilstm != e.downsample_blocks + 1 {
                    return Err(Error::Config(format!(
                        "speech encoder needs n_bilstm = downsample_blocks + 1 (got {} and {})",
                        e.n_bilstm, e.downsample_blocks
                    )));
                }
                if e.hidden == 0 || e.input_dim == 0 {
                    return Err(Error::Config("encoder sizes must be positive".into()));
                }
            }
            EncoderKind::Text(e) => {
                if e.n_bilstm == 0 || e.hidden == 0 || e.src_emb_dim == 0 {
                    return Err(Error::Config("text encoder sizes must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// `key=value` lines sufficient to rebuild every parameter shape.
    pub fn to_entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        match &self.encoder {
            EncoderKind::Speech(e) => {
                put("model.kind", "speech".into());
                put("encoder.input_dim", e.input_dim.to_string());
                put("encoder.hidden", e.hidden.to_string());
                put("encoder.n_bilstm", e.n_bilstm.to_string());
                put("encoder.downsample_blocks", e.downsample_blocks.to_string());
            }
            EncoderKind::Text(e) => {
                put("model.kind", "monomt".into());
                put("encoder.hidden", e.hidden.to_string());
                put("encoder.n_bilstm", e.n_bilstm.to_string());
                put("encoder.src_emb_dim", e.src_emb_dim.to_string());
            }
        }
        let d = &self.decoder;
        put("decoder.n_layers", d.n_layers.to_string());
        put("decoder.hidden", d.hidden.to_string());
        put("decoder.emb_dim", d.emb_dim.to_string());
        put("decoder.attention_hidden", d.attention_hidden.to_string());
        put("decoder.input_feeding", d.input_feeding.to_string());
        out
    }

    pub fn from_entries(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            get(k)
                .ok_or_else(|| Error::InvalidInput(format!("missing {k}")))?
                .parse()
                .map_err(|_| Error::InvalidInput(format!("{k} is not an integer")))
        };
        let decoder = DecoderConfig {
            n_layers: num("decoder.n_layers")?,
            hidden: num("decoder.hidden")?,
            emb_dim: num("decoder.emb_dim")?,
            attention_hidden: num("decoder.attention_hidden")?,
            input_feeding: get("decoder.input_feeding").as_deref() == Some("true"),
        };
        let encoder = match get("model.kind").as_deref() {
            Some("speech") => EncoderKind::Speech(EncoderConfig {
                input_dim: num("encoder.input_dim")?,
                hidden: num("encoder.hidden")?,
                n_bilstm: num("encoder.n_bilstm")?,
                downsample_blocks: num("encoder.downsample_blocks")?,
            }),
            Some("monomt") => EncoderKind::Text(MonoMtConfig {
                hidden: num("encoder.hidden")?,
                n_bilstm: num("encoder.n_bilstm")?,
                src_emb_dim: num("encoder.src_emb_dim")?,
            }),
            other => return Err(Error::InvalidInput(format!("unknown model kind {other:?}"))),
        };
        let cfg = ModelConfig { encoder, decoder };
        cfg.validate()?;
        Ok(cfg)
    }
}
