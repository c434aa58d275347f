//! Attention encoder-decoder over characters, with either a speech encoder
//! (BiLSTM/NiN stack with 4× time reduction) or a character text encoder.

mod checkpoint;
mod config;

pub use checkpoint::{read_checkpoint, write_checkpoint, Header, OPTIMIZER_PREFIX};
pub use config::{DecoderConfig, EncoderConfig, EncoderKind, ModelConfig, MonoMtConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::attention::AttentionStep;
use crate::nn::batchnorm::{BatchNormCache, BatchStats};
use crate::nn::dropout::{char_keep_flags, variational_dropout_mask};
use crate::nn::lstm::{activate, cell_backward, lstm_step, BiLstmCache};
use crate::nn::nin::NinCache;
use crate::nn::ops::{label_smoothed_ce_grad, log_softmax, relu, relu_backward};
use crate::nn::params::glorot;
use crate::nn::tensor::{gemm, matvec_acc, matvec_t_acc, MatRef};
use crate::nn::{
    normalize_rows, BatchNorm, BiLstm, LstmLayer, MlpAttention, Nin, ParamId, ParamKind, ParamStore, Real,
    Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechBlock {
    pub lstm: BiLstm,
    pub nin: Nin,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderLayout {
    Speech { blocks: Vec<SpeechBlock>, top: BiLstm },
    Text { embedding: ParamId, layers: Vec<BiLstm> },
}

impl EncoderLayout {
    fn bilstms(&self) -> Vec<&BiLstm> {
        match self {
            EncoderLayout::Speech { blocks, top } => blocks.iter().map(|b| &b.lstm).chain([top]).collect(),
            EncoderLayout::Text { layers, .. } => layers.iter().collect(),
        }
    }
}

/// Parameter handles into the model's [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub encoder: EncoderLayout,
    pub embedding: ParamId,
    pub decoder: LstmLayer,
    pub attention: MlpAttention,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl Layout {
    fn build<T: Real>(
        config: &ModelConfig,
        target_size: usize,
        source_size: Option<usize>,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = match &config.encoder {
            EncoderKind::Speech(e) => {
                let mut input = e.input_dim;
                let mut blocks = Vec::with_capacity(e.downsample_blocks);
                for i in 0..e.downsample_blocks {
                    let p = format!("enc.block{i}");
                    let lstm = BiLstm::new(store, &format!("{p}.lstm"), input, e.hidden, rng);
                    let nin = Nin::new(store, &format!("{p}.nin"), 2 * e.hidden, e.hidden, rng);
                    let bn = BatchNorm::new(store, &format!("{p}.bn"), e.hidden);
                    blocks.push(SpeechBlock { lstm, nin, bn });
                    input = e.hidden;
                }
                let top = BiLstm::new(store, "enc.top", input, e.hidden, rng);
                EncoderLayout::Speech { blocks, top }
            }
            EncoderKind::Text(e) => {
                let size = source_size
                    .ok_or_else(|| Error::Config("text encoder needs a source vocabulary".into()))?;
                let mut table = glorot(size, e.src_emb_dim, rng);
                normalize_rows(&mut table);
                let embedding = store.add("enc.embedding", table, ParamKind::Weight);
                let mut layers = Vec::with_capacity(e.n_bilstm);
                let mut input = e.src_emb_dim;
                for i in 0..e.n_bilstm {
                    layers.push(BiLstm::new(store, &format!("enc.lstm{i}"), input, e.hidden, rng));
                    input = 2 * e.hidden;
                }
                EncoderLayout::Text { embedding, layers }
            }
        };
        let d = &config.decoder;
        let enc_dim = config.enc_dim();
        let mut table = glorot(target_size, d.emb_dim, rng);
        normalize_rows(&mut table);
        let embedding = store.add("dec.embedding", table, ParamKind::Weight);
        let input = d.emb_dim + if d.input_feeding { enc_dim } else { 0 };
        let decoder = LstmLayer::new(store, "dec.lstm", input, d.hidden, rng);
        let attention = MlpAttention::new(store, "dec.att", d.hidden, enc_dim, d.attention_hidden, rng);
        let out_w = store.add("dec.out.w", glorot(target_size, d.hidden + enc_dim, rng), ParamKind::Weight);
        let out_b = store.add("dec.out.b", Tensor::zeros(&[target_size]), ParamKind::Weight);
        Ok(Layout {
            encoder,
            embedding,
            decoder,
            attention,
            out_w,
            out_b,
        })
    }
}

/// Model input: a feature sequence for the speech encoder or character ids
/// for the text encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum Source<T> {
    Features(Tensor<T>),
    Tokens(Vec<usize>),
}

/// Training pair. `target` holds character ids without BOS/EOS; the model
/// adds both.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub source: Source<T>,
    pub target: Vec<usize>,
}

/// Behaviour of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PassOptions {
    /// Normalize with batch statistics rather than running estimates.
    pub batch_stats: bool,
    pub recurrent_dropout: f64,
    pub char_dropout: f64,
    pub label_smoothing: f64,
}

impl PassOptions {
    /// Inference behaviour; the loss is plain negative log-likelihood.
    pub fn eval() -> Self {
        PassOptions {
            batch_stats: false,
            recurrent_dropout: 0.0,
            char_dropout: 0.0,
            label_smoothing: 0.0,
        }
    }
}

/// Token-summed losses of one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    /// Objective actually optimized (label-smoothed cross-entropy).
    pub loss_sum: f64,
    /// Negative log-likelihood of the gold tokens.
    pub nll_sum: f64,
    pub tokens: usize,
}

impl LossReport {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.tokens as f64
    }

    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.tokens as f64
    }
}

/// Gradients of the mean per-token loss, plus the batch statistics that
/// should be folded into the BatchNorm running estimates.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub grads: ParamStore<T>,
    pub bn_stats: Vec<BatchStats<T>>,
}

/// Encoder output prepared for decoding.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub states: Tensor<T>,
    keys: Tensor<T>,
}

impl<T: Real> Encoded<T> {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }
}

/// Recurrent decoder state: LSTM hidden and cell vectors plus the last
/// attention context.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
    pub context: Vec<T>,
    /// Attention weights of the step that produced this state.
    pub attention: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq<T> {
    pub config: ModelConfig,
    pub target_vocab: Vocabulary,
    pub source_vocab: Option<Vocabulary>,
    pub layout: Layout,
    pub params: ParamStore<T>,
}

type LayerMasks<T> = Vec<Option<(Vec<T>, Vec<T>)>>;

struct Noise<T> {
    encoder: LayerMasks<T>,
    decoder: Option<Vec<T>>,
    keep: Vec<bool>,
}

struct BlockCache<T> {
    lstm: Vec<BiLstmCache<T>>,
    nin: Vec<NinCache<T>>,
    bn: BatchNormCache<T>,
    relu_out: Vec<Tensor<T>>,
}

enum EncoderCache<T> {
    Speech {
        blocks: Vec<BlockCache<T>>,
        top: Vec<BiLstmCache<T>>,
    },
    Text {
        tokens: Vec<Vec<usize>>,
        layers: Vec<Vec<BiLstmCache<T>>>,
    },
}

struct DecoderTrace<T> {
    inputs: Vec<usize>,
    keep: Vec<bool>,
    mask: Option<Vec<T>>,
    x: Tensor<T>,
    gates: Tensor<T>,
    c: Tensor<T>,
    tanh_c: Tensor<T>,
    hp: Tensor<T>,
    h: Tensor<T>,
    att: Vec<AttentionStep<T>>,
    o: Tensor<T>,
}

impl<T: Real> Seq2Seq<T> {
    /// Fresh model with Glorot weights drawn from `seed`.
    pub fn new(
        config: ModelConfig,
        target_vocab: Vocabulary,
        source_vocab: Option<Vocabulary>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = Layout::build(
            &config,
            target_vocab.len(),
            source_vocab.as_ref().map(Vocabulary::len),
            &mut params,
            &mut rng,
        )?;
        Ok(Seq2Seq {
            config,
            target_vocab,
            source_vocab,
            layout,
            params,
        })
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.weight_count()
    }

    pub fn cast<U: Real>(&self) -> Seq2Seq<U> {
        Seq2Seq {
            config: self.config.clone(),
            target_vocab: self.target_vocab.clone(),
            source_vocab: self.source_vocab.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Handle of the target embedding table kept at unit row norm.
    pub fn target_embedding(&self) -> ParamId {
        self.layout.embedding
    }

    /// Folds batch statistics from a training pass into running estimates.
    pub fn update_bn(&mut self, stats: &[BatchStats<T>]) {
        if let EncoderLayout::Speech { blocks, .. } = &self.layout.encoder {
            for (b, s) in blocks.iter().zip(stats) {
                b.bn.update_running(&mut self.params, s);
            }
        }
    }

    fn check_source(&self, source: &Source<T>) -> Result<()> {
        match (&self.config.encoder, source) {
            (EncoderKind::Speech(e), Source::Features(f)) => {
                if f.shape().len() != 2 || f.rows() == 0 || f.is_empty() {
                    return Err(Error::InvalidInput("empty feature sequence".into()));
                }
                if f.cols() != e.input_dim {
                    return Err(Error::Dimension(format!(
                        "features have dim {}, encoder expects {}",
                        f.cols(),
                        e.input_dim
                    )));
                }
                if !f.all_finite() {
                    return Err(Error::NonFinite("input features".into()));
                }
                Ok(())
            }
            (EncoderKind::Text(_), Source::Tokens(ids)) => {
                let size = self.source_vocab.as_ref().map_or(0, Vocabulary::len);
                match ids.iter().find(|&&i| i >= size) {
                    Some(i) => Err(Error::InvalidInput(format!("source id {i} outside vocabulary"))),
                    None => Ok(()),
                }
            }
            (EncoderKind::Speech(_), Source::Tokens(_)) => {
                Err(Error::InvalidInput("speech encoder given character input".into()))
            }
            (EncoderKind::Text(_), Source::Features(_)) => {
                Err(Error::InvalidInput("text encoder given feature input".into()))
            }
        }
    }

    /// Source characters as encoder input ids, terminated by EOS.
    pub fn source_tokens(&self, text: &str) -> Result<Vec<usize>> {
        let vocab = self
            .source_vocab
            .as_ref()
            .ok_or_else(|| Error::Config("model has no source vocabulary".into()))?;
        let mut ids = vocab.encode(text);
        ids.push(vocab.eos());
        Ok(ids)
    }

    fn draw_noise(&self, target_len: usize, opts: &PassOptions, rng: &mut impl Rng) -> Noise<T> {
        let p = opts.recurrent_dropout;
        let encoder = self
            .layout
            .encoder
            .bilstms()
            .into_iter()
            .map(|l| {
                (p > 0.0).then(|| {
                    (
                        variational_dropout_mask(l.fwd.hidden, p, rng),
                        variational_dropout_mask(l.bwd.hidden, p, rng),
                    )
                })
            })
            .collect();
        let decoder = (p > 0.0).then(|| variational_dropout_mask(self.layout.decoder.hidden, p, rng));
        let keep = char_keep_flags(target_len, opts.char_dropout, rng);
        Noise {
            encoder,
            decoder,
            keep,
        }
    }

    fn encode_batch(
        &self,
        sources: &[&Source<T>],
        masks: &[&LayerMasks<T>],
        batch_stats: bool,
    ) -> Result<(Vec<Tensor<T>>, EncoderCache<T>, Vec<BatchStats<T>>)> {
        let store = &self.params;
        let mask_of = |u: usize, layer: usize| {
            masks
                .get(u)
                .and_then(|m| m.get(layer))
                .and_then(|m| m.as_ref())
                .map(|(f, b)| (f.as_slice(), b.as_slice()))
        };
        match &self.layout.encoder {
            EncoderLayout::Speech { blocks, top } => {
                let mut xs: Vec<Tensor<T>> = sources
                    .iter()
                    .map(|s| match s {
                        Source::Features(f) => f.clone(),
                        Source::Tokens(_) => unreachable!("checked"),
                    })
                    .collect();
                let mut caches = Vec::with_capacity(blocks.len());
                let mut stats = Vec::with_capacity(blocks.len());
                for (li, block) in blocks.iter().enumerate() {
                    let mut lstm = Vec::with_capacity(xs.len());
                    let mut nin = Vec::with_capacity(xs.len());
                    let mut z = Vec::with_capacity(xs.len());
                    for (u, x) in xs.iter().enumerate() {
                        let (y, lc) = block.lstm.forward(store, x, mask_of(u, li));
                        let (p, nc) = block.nin.forward(store, &y);
                        lstm.push(lc);
                        nin.push(nc);
                        z.push(p);
                    }
                    let (normed, bn) = if batch_stats {
                        let (out, cache, s) = block.bn.forward_train(store, &z)?;
                        stats.push(s);
                        (out, Some(cache))
                    } else {
                        (z.iter().map(|p| block.bn.forward_eval(store, p)).collect(), None)
                    };
                    xs = normed.iter().map(relu).collect();
                    if let Some(bn) = bn {
                        caches.push(BlockCache {
                            lstm,
                            nin,
                            bn,
                            relu_out: xs.clone(),
                        });
                    }
                }
                let mut top_caches = Vec::with_capacity(xs.len());
                let outs = xs
                    .iter()
                    .enumerate()
                    .map(|(u, x)| {
                        let (y, c) = top.forward(store, x, mask_of(u, blocks.len()));
                        top_caches.push(c);
                        y
                    })
                    .collect();
                Ok((
                    outs,
                    EncoderCache::Speech {
                        blocks: caches,
                        top: top_caches,
                    },
                    stats,
                ))
            }
            EncoderLayout::Text { embedding, layers } => {
                let table = store.get(*embedding);
                let tokens: Vec<Vec<usize>> = sources
                    .iter()
                    .map(|s| match s {
                        Source::Tokens(t) => t.clone(),
                        Source::Features(_) => unreachable!("checked"),
                    })
                    .collect();
                let mut xs: Vec<Tensor<T>> = tokens
                    .iter()
                    .map(|ids| {
                        let mut x = Tensor::zeros(&[ids.len(), table.cols()]);
                        for (t, &id) in ids.iter().enumerate() {
                            x.row_mut(t).copy_from_slice(table.row(id));
                        }
                        x
                    })
                    .collect();
                let mut caches = Vec::with_capacity(layers.len());
                for (li, layer) in layers.iter().enumerate() {
                    let mut lc = Vec::with_capacity(xs.len());
                    xs = xs
                        .iter()
                        .enumerate()
                        .map(|(u, x)| {
                            let (y, c) = layer.forward(store, x, mask_of(u, li));
                            lc.push(c);
                            y
                        })
                        .collect();
                    caches.push(lc);
                }
                Ok((
                    xs,
                    EncoderCache::Text {
                        tokens,
                        layers: caches,
                    },
                    Vec::new(),
                ))
            }
        }
    }

    fn encoder_backward(&self, cache: &EncoderCache<T>, denc: Vec<Tensor<T>>, grads: &mut ParamStore<T>) {
        let store = &self.params;
        match (&self.layout.encoder, cache) {
            (EncoderLayout::Speech { blocks, top }, EncoderCache::Speech { blocks: bc, top: tc }) => {
                let mut dx: Vec<Tensor<T>> =
                    denc.iter().zip(tc).map(|(d, c)| top.backward(store, c, d, grads)).collect();
                for (block, cache) in blocks.iter().zip(bc).rev() {
                    let dz: Vec<Tensor<T>> =
                        cache.relu_out.iter().zip(&dx).map(|(y, d)| relu_backward(y, d)).collect();
                    let dp = block.bn.backward(store, &cache.bn, &dz, grads);
                    dx = dp
                        .iter()
                        .zip(cache.nin.iter().zip(&cache.lstm))
                        .map(|(d, (nc, lc))| {
                            let dy = block.nin.backward(store, nc, d, grads);
                            block.lstm.backward(store, lc, &dy, grads)
                        })
                        .collect();
                }
            }
            (EncoderLayout::Text { embedding, layers }, EncoderCache::Text { tokens, layers: lc }) => {
                let mut dx = denc;
                for (layer, caches) in layers.iter().zip(lc).rev() {
                    dx = dx.iter().zip(caches).map(|(d, c)| layer.backward(store, c, d, grads)).collect();
                }
                let g = grads.get_mut(*embedding);
                for (d, ids) in dx.iter().zip(tokens) {
                    for (t, &id) in ids.iter().enumerate() {
                        for (a, b) in g.row_mut(id).iter_mut().zip(d.row(t)) {
                            *a += *b;
                        }
                    }
                }
            }
            _ => unreachable!("cache matches layout"),
        }
    }

    /// Encoder states for one input in inference mode.
    pub fn encode(&self, source: &Source<T>) -> Result<Tensor<T>> {
        Ok(self.prepare(source)?.states)
    }

    /// Encodes and precomputes the attention keys.
    pub fn prepare(&self, source: &Source<T>) -> Result<Encoded<T>> {
        self.check_source(source)?;
        let (mut outs, _, _) = self.encode_batch(&[source], &[], false)?;
        let states = outs.pop().expect("one output");
        let keys = self.layout.attention.keys(&self.params, &states);
        Ok(Encoded { states, keys })
    }

    /// Zero hidden state, cell and context.
    pub fn initial_state(&self) -> DecoderState<T> {
        let h = self.layout.decoder.hidden;
        DecoderState {
            h: vec![T::zero(); h],
            c: vec![T::zero(); h],
            context: vec![T::zero(); self.config.enc_dim()],
            attention: Vec::new(),
        }
    }

    /// One decoder step from `prev` (a target id) returning logits over the
    /// target vocabulary and the next state.
    pub fn decode_step(
        &self,
        enc: &Encoded<T>,
        state: &DecoderState<T>,
        prev: usize,
    ) -> Result<(Vec<T>, DecoderState<T>)> {
        if prev >= self.target_vocab.len() {
            return Err(Error::InvalidInput(format!("previous symbol {prev} outside vocabulary")));
        }
        if enc.is_empty() {
            return Err(Error::InvalidInput("empty encoder output".into()));
        }
        let store = &self.params;
        let l = &self.layout;
        let mut x = store.get(l.embedding).row(prev).to_vec();
        if self.config.decoder.input_feeding {
            x.extend_from_slice(&state.context);
        }
        let (h, c, _) = lstm_step(store, &l.decoder, &x, &state.h, &state.c)?;
        let (context, step) = l.attention.step(store, &enc.keys, &enc.states, &h);
        let mut logits = store.get(l.out_b).data().to_vec();
        let w = store.get(l.out_w).data();
        let stride = h.len() + context.len();
        matvec_acc(w, stride, 0, &h, &mut logits);
        matvec_acc(w, stride, h.len(), &context, &mut logits);
        Ok((
            logits,
            DecoderState {
                h,
                c,
                context,
                attention: step.weights,
            },
        ))
    }

    fn decoder_forward(
        &self,
        enc: &Tensor<T>,
        keys: &Tensor<T>,
        inputs: Vec<usize>,
        keep: Vec<bool>,
        mask: Option<Vec<T>>,
    ) -> (Tensor<T>, DecoderTrace<T>) {
        let store = &self.params;
        let l = &self.layout;
        let hd = l.decoder.hidden;
        let de = self.config.decoder.emb_dim;
        let din = l.decoder.input;
        let feeding = self.config.decoder.input_feeding;
        let steps = inputs.len();
        let emb = store.get(l.embedding);
        let w_ih = store.get(l.decoder.w_ih).data();
        let w_hh = store.get(l.decoder.w_hh).data();
        let mut x = Tensor::zeros(&[steps, din]);
        for (t, (&id, &k)) in inputs.iter().zip(&keep).enumerate() {
            if k {
                x.row_mut(t)[..de].copy_from_slice(emb.row(id));
            }
        }
        let mut gates = Tensor::zeros(&[steps, 4 * hd]);
        let bias = store.get(l.decoder.b).data();
        for t in 0..steps {
            gates.row_mut(t).copy_from_slice(bias);
        }
        gemm(
            MatRef::strided(x.data(), steps, de, din),
            MatRef::strided(w_ih, 4 * hd, de, din).t(),
            T::one(),
            gates.data_mut(),
        );
        let ed = enc.cols();
        let mut c = Tensor::zeros(&[steps, hd]);
        let mut tanh_c = Tensor::zeros(&[steps, hd]);
        let mut hp = Tensor::zeros(&[steps, hd]);
        let mut h = Tensor::zeros(&[steps, hd]);
        let mut o = Tensor::zeros(&[steps, hd + ed]);
        let mut att = Vec::with_capacity(steps);
        for t in 0..steps {
            if t > 0 {
                if feeding {
                    let prev_ctx = o.row(t - 1)[hd..].to_vec();
                    x.row_mut(t)[de..].copy_from_slice(&prev_ctx);
                    matvec_acc(w_ih, din, de, &prev_ctx, gates.row_mut(t));
                }
                let (prev, cur) = (h.row(t - 1), hp.row_mut(t));
                match &mask {
                    Some(m) => {
                        for j in 0..hd {
                            cur[j] = prev[j] * m[j];
                        }
                    }
                    None => cur.copy_from_slice(prev),
                }
                matvec_acc(w_hh, hd, 0, hp.row(t), gates.row_mut(t));
            }
            activate(gates.row_mut(t), hd);
            let a = gates.row(t);
            for j in 0..hd {
                let cp = if t > 0 { c.row(t - 1)[j] } else { T::zero() };
                let cv = a[hd + j] * cp + a[j] * a[2 * hd + j];
                c.row_mut(t)[j] = cv;
                let tc = cv.tanh();
                tanh_c.row_mut(t)[j] = tc;
                h.row_mut(t)[j] = a[3 * hd + j] * tc;
            }
            let (ctx, step) = l.attention.step(store, keys, enc, h.row(t));
            o.row_mut(t)[..hd].copy_from_slice(h.row(t));
            o.row_mut(t)[hd..].copy_from_slice(&ctx);
            att.push(step);
        }
        let v = self.target_vocab.len();
        let mut logits = Tensor::zeros(&[steps, v]);
        let out_b = store.get(l.out_b).data();
        for t in 0..steps {
            logits.row_mut(t).copy_from_slice(out_b);
        }
        gemm(o.matref(), store.get(l.out_w).matref().t(), T::one(), logits.data_mut());
        let trace = DecoderTrace {
            inputs,
            keep,
            mask,
            x,
            gates,
            c,
            tanh_c,
            hp,
            h,
            att,
            o,
        };
        (logits, trace)
    }

    /// Backward through the decoder for one utterance; returns the gradient
    /// with respect to the encoder states.
    fn decoder_backward(
        &self,
        enc: &Tensor<T>,
        tr: &DecoderTrace<T>,
        dlogits: &Tensor<T>,
        grads: &mut ParamStore<T>,
    ) -> Tensor<T> {
        let store = &self.params;
        let l = &self.layout;
        let hd = l.decoder.hidden;
        let de = self.config.decoder.emb_dim;
        let din = l.decoder.input;
        let feeding = self.config.decoder.input_feeding;
        let steps = tr.inputs.len();
        let ed = enc.cols();
        gemm(dlogits.matref().t(), tr.o.matref(), T::one(), grads.get_mut(l.out_w).data_mut());
        {
            let gb = grads.get_mut(l.out_b).data_mut();
            for t in 0..steps {
                for (g, d) in gb.iter_mut().zip(dlogits.row(t)) {
                    *g += *d;
                }
            }
        }
        let mut d_o = Tensor::zeros(&[steps, hd + ed]);
        gemm(dlogits.matref(), store.get(l.out_w).matref(), T::zero(), d_o.data_mut());
        let w_ih = store.get(l.decoder.w_ih).data();
        let w_hh = store.get(l.decoder.w_hh).data();
        let mut dkeys = Tensor::zeros(&[enc.rows(), l.attention.hidden]);
        let mut denc = Tensor::zeros(&[enc.rows(), ed]);
        let mut da = Tensor::zeros(&[steps, 4 * hd]);
        let mut dc = vec![T::zero(); hd];
        let mut dh_next = vec![T::zero(); hd];
        let mut dctx_next = vec![T::zero(); ed];
        let mut dh = vec![T::zero(); hd];
        let mut dctx = vec![T::zero(); ed];
        let zeros = vec![T::zero(); hd];
        for t in (0..steps).rev() {
            for j in 0..hd {
                dh[j] = d_o.row(t)[j] + dh_next[j];
            }
            for j in 0..ed {
                dctx[j] = d_o.row(t)[hd + j] + dctx_next[j];
            }
            l.attention.step_backward(
                store,
                &tr.att[t],
                enc,
                tr.h.row(t),
                &dctx,
                &mut dkeys,
                &mut denc,
                &mut dh,
                grads,
            );
            let c_prev = if t > 0 { tr.c.row(t - 1) } else { &zeros };
            cell_backward(tr.gates.row(t), c_prev, tr.tanh_c.row(t), &dh, &mut dc, da.row_mut(t));
            dh_next.fill(T::zero());
            dctx_next.fill(T::zero());
            if t > 0 {
                matvec_t_acc(w_hh, hd, 0, da.row(t), &mut dh_next);
                if let Some(m) = &tr.mask {
                    for j in 0..hd {
                        dh_next[j] *= m[j];
                    }
                }
                if feeding {
                    matvec_t_acc(w_ih, din, de, da.row(t), &mut dctx_next);
                }
            }
        }
        gemm(da.matref().t(), tr.x.matref(), T::one(), grads.get_mut(l.decoder.w_ih).data_mut());
        gemm(da.matref().t(), tr.hp.matref(), T::one(), grads.get_mut(l.decoder.w_hh).data_mut());
        {
            let gb = grads.get_mut(l.decoder.b).data_mut();
            for t in 0..steps {
                for (g, d) in gb.iter_mut().zip(da.row(t)) {
                    *g += *d;
                }
            }
        }
        let mut demb = Tensor::zeros(&[steps, de]);
        gemm(
            da.matref(),
            MatRef::strided(w_ih, 4 * hd, de, din),
            T::zero(),
            demb.data_mut(),
        );
        let ge = grads.get_mut(l.embedding);
        for t in 0..steps {
            if tr.keep[t] {
                for (a, b) in ge.row_mut(tr.inputs[t]).iter_mut().zip(demb.row(t)) {
                    *a += *b;
                }
            }
        }
        l.attention.finish_backward(store, enc, &dkeys, &mut denc, grads);
        denc
    }

    fn check_target(&self, target: &[usize]) -> Result<()> {
        let v = self.target_vocab.len();
        match target.iter().find(|&&i| i >= v || i == self.target_vocab.pad()) {
            Some(i) => Err(Error::InvalidInput(format!("target id {i} is not a valid output symbol"))),
            None => Ok(()),
        }
    }

    fn run(
        &self,
        batch: &[&Example<T>],
        opts: &PassOptions,
        rng: &mut impl Rng,
        want_grads: bool,
    ) -> Result<(LossReport, Option<Gradients<T>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("batch with zero target tokens".into()));
        }
        if want_grads && !opts.batch_stats && matches!(self.config.encoder, EncoderKind::Speech(_)) {
            return Err(Error::Config("gradients need batch statistics".into()));
        }
        for ex in batch {
            self.check_source(&ex.source)?;
            self.check_target(&ex.target)?;
        }
        let vocab = &self.target_vocab;
        let tokens: usize = batch.iter().map(|e| e.target.len() + 1).sum();
        let noise: Vec<Noise<T>> = batch
            .iter()
            .map(|e| self.draw_noise(e.target.len() + 1, opts, rng))
            .collect();
        let sources: Vec<&Source<T>> = batch.iter().map(|e| &e.source).collect();
        let masks: Vec<&LayerMasks<T>> = noise.iter().map(|n| &n.encoder).collect();
        let (encs, enc_cache, bn_stats) = self.encode_batch(&sources, &masks, opts.batch_stats)?;
        let mut grads = want_grads.then(|| self.params.zeros_like());
        let scale = T::lit(1.0 / tokens as f64);
        let mut report = LossReport {
            tokens,
            ..LossReport::default()
        };
        let mut dencs = Vec::with_capacity(batch.len());
        for ((ex, enc), nz) in batch.iter().zip(&encs).zip(noise) {
            let mut inputs = Vec::with_capacity(ex.target.len() + 1);
            inputs.push(vocab.bos());
            inputs.extend_from_slice(&ex.target);
            let mut gold = ex.target.clone();
            gold.push(vocab.eos());
            let keys = self.layout.attention.keys(&self.params, enc);
            let (logits, trace) = self.decoder_forward(enc, &keys, inputs, nz.keep, nz.decoder);
            let mut dlogits = Tensor::zeros(logits.shape());
            for (t, &y) in gold.iter().enumerate() {
                let (loss, g) = label_smoothed_ce_grad(logits.row(t), y, opts.label_smoothing)?;
                let nll = -log_softmax(logits.row(t))[y];
                if !loss.is_finite() || !nll.is_finite() {
                    return Err(Error::NonFinite(format!("loss at target position {t}")));
                }
                report.loss_sum += loss.as_f64();
                report.nll_sum += nll.as_f64();
                for (d, gv) in dlogits.row_mut(t).iter_mut().zip(g) {
                    *d = gv * scale;
                }
            }
            if let Some(grads) = grads.as_mut() {
                dencs.push(self.decoder_backward(enc, &trace, &dlogits, grads));
            }
        }
        let grads = match grads {
            Some(mut g) => {
                self.encoder_backward(&enc_cache, dencs, &mut g);
                Some(Gradients { grads: g, bn_stats })
            }
            None => None,
        };
        Ok((report, grads))
    }

    /// Teacher-forced loss over a batch. Dropout noise is drawn from `rng`
    /// in batch order.
    pub fn forward_loss(&self, batch: &[&Example<T>], opts: &PassOptions, rng: &mut impl Rng) -> Result<LossReport> {
        Ok(self.run(batch, opts, rng, false)?.0)
    }

    /// Loss and gradients of its per-token mean.
    pub fn forward_backward(
        &self,
        batch: &[&Example<T>],
        opts: &PassOptions,
        rng: &mut impl Rng,
    ) -> Result<(LossReport, Gradients<T>)> {
        let (report, grads) = self.run(batch, opts, rng, true)?;
        Ok((report, grads.expect("requested")))
    }
}
