//! Optimization loop: Adam, patience-based learning-rate decay on dev BLEU,
//! length-bucketed dynamic batches and resumable checkpoints.

mod adam;
mod batching;
mod schedule;

pub use adam::{adam_update, AdamState};
pub use batching::{calibrate_budget, group_by_budget, make_batches, shuffled_order};
pub use schedule::{lr_schedule_step, LrSchedule};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{TargetSide, Utterance, Vocabulary};
use crate::decode::{translate_greedy, DecodeConfig};
use crate::error::{Error, Result};
use crate::metrics::bleu_corpus;
use crate::model::{read_checkpoint, write_checkpoint, Example, Header, PassOptions, Seq2Seq, Source, OPTIMIZER_PREFIX};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub patience_first: usize,
    pub patience_after: usize,
    pub recurrent_dropout: f64,
    pub char_dropout: f64,
    pub label_smoothing: f64,
    pub avg_batch_size: usize,
    pub max_epochs: usize,
    /// Training stops once the learning rate falls below `lr0 × min_lr_ratio`.
    pub min_lr_ratio: f64,
    /// Dev utterances greedily decoded for BLEU after each epoch.
    pub dev_limit: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 3e-4,
            decay_factor: 0.5,
            patience_first: 10,
            patience_after: 5,
            recurrent_dropout: 0.2,
            char_dropout: 0.1,
            label_smoothing: 0.1,
            avg_batch_size: 36,
            max_epochs: 100,
            min_lr_ratio: 1.0 / 64.0,
            dev_limit: 500,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad("decay factor must lie in (0, 1)");
        }
        if self.patience_first == 0 || self.patience_after == 0 {
            return bad("patience values must be at least 1");
        }
        for (name, p) in [
            ("recurrent dropout", self.recurrent_dropout),
            ("character dropout", self.char_dropout),
            ("label smoothing", self.label_smoothing),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.avg_batch_size == 0 {
            return bad("average batch size must be positive");
        }
        if self.dev_limit == 0 {
            return bad("dev limit must be positive");
        }
        Ok(())
    }

    fn pass_options(&self) -> PassOptions {
        PassOptions {
            batch_stats: true,
            recurrent_dropout: self.recurrent_dropout,
            char_dropout: self.char_dropout,
            label_smoothing: self.label_smoothing,
        }
    }
}

/// Deterministic generator for a position in the training run, so that
/// any epoch or batch can be replayed independently.
pub fn derived_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = splitmix(h ^ p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = u64::MAX;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_bleu: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:e}\t{:.3}",
            self.epoch, self.mean_loss, self.dev_bleu, self.lr, self.wall_secs
        )
    }
}

/// Dev input with its references.
#[derive(Clone, Debug)]
pub struct DevItem {
    pub source: Source<f32>,
    pub refs: Vec<String>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub schedule: LrSchedule,
    pub adam: AdamState<f32>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Seq2Seq<f32>,
    pub state: TrainState,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Seq2Seq<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = TrainState {
            epoch: 0,
            schedule: LrSchedule::new(
                config.lr0,
                config.decay_factor,
                config.patience_first,
                config.patience_after,
            ),
            adam: AdamState::new(&model.params),
            seed: config.seed,
        };
        Ok(Trainer { model, state, config })
    }

    /// Whether the stopping rule has fired.
    pub fn finished(&self) -> bool {
        self.state.epoch >= self.config.max_epochs
            || self.state.schedule.lr < self.config.lr0 * self.config.min_lr_ratio
    }

    /// One pass over `train` in shuffled batch order; returns the mean
    /// per-token training loss.
    pub fn run_epoch(&mut self, train: &[Example<f32>], batches: &[Vec<usize>]) -> Result<f64> {
        let epoch = self.state.epoch as u64;
        let seed = self.state.seed;
        let order = shuffled_order(batches.len(), &mut derived_rng(seed, &[epoch, SHUFFLE_STREAM]));
        let opts = self.config.pass_options();
        let emb = self.model.target_embedding();
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for (k, &b) in order.iter().enumerate() {
            let batch: Vec<&Example<f32>> = batches[b].iter().map(|&i| &train[i]).collect();
            let mut rng = derived_rng(seed, &[epoch, k as u64]);
            let (report, g) = self.model.forward_backward(&batch, &opts, &mut rng)?;
            if !report.loss_sum.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss in epoch {} batch {k} ({} utterances)",
                    epoch + 1,
                    batch.len()
                )));
            }
            loss_sum += report.loss_sum;
            tokens += report.tokens;
            adam_update(
                &mut self.model.params,
                &g.grads,
                &mut self.state.adam,
                self.state.schedule.lr,
                &[emb],
            )
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} in epoch {} batch {k}", epoch + 1)),
                other => other,
            })?;
            self.model.update_bn(&g.bn_stats);
        }
        Ok(loss_sum / tokens.max(1) as f64)
    }

    /// Greedy-decoding BLEU on the first `dev_limit` dev items.
    pub fn dev_bleu(&self, dev: &[DevItem]) -> Result<f64> {
        let items = &dev[..dev.len().min(self.config.dev_limit)];
        let decode = DecodeConfig::default();
        let mut hyps = Vec::with_capacity(items.len());
        for item in items {
            hyps.push(translate_greedy(&self.model, &item.source, &decode)?);
        }
        let refs: Vec<Vec<String>> = items.iter().map(|i| i.refs.clone()).collect();
        Ok(bleu_corpus(&hyps, &refs, true)?.score)
    }

    /// Trains until the stopping rule fires. `on_epoch` sees each record
    /// and whether it is the best so far.
    pub fn fit(
        &mut self,
        train: &[Example<f32>],
        dev: &[DevItem],
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord, bool) -> Result<()>,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if dev.is_empty() {
            return Err(Error::InvalidInput("dev set is empty".into()));
        }
        let lengths: Vec<usize> = train.iter().map(source_len).collect();
        let batches = make_batches(&lengths, self.config.avg_batch_size)?;
        while !self.finished() {
            let start = Instant::now();
            let mean_loss = self.run_epoch(train, &batches)?;
            let bleu = self.dev_bleu(dev)?;
            let lr_used = self.state.schedule.lr;
            let best = self.state.schedule.observe(bleu);
            self.state.epoch += 1;
            let record = EpochRecord {
                epoch: self.state.epoch,
                mean_loss,
                dev_bleu: bleu,
                lr: lr_used,
                wall_secs: start.elapsed().as_secs_f64(),
            };
            on_epoch(self, &record, best)?;
        }
        Ok(())
    }

    pub fn header(&self) -> Header {
        let mut h = self.model.header();
        let s = &self.state;
        let c = &self.config;
        h.set("train.epoch", s.epoch);
        h.set("train.seed", s.seed);
        h.set("train.lr", s.schedule.lr);
        h.set("train.lr0", s.schedule.lr0);
        h.set("train.decay_factor", s.schedule.decay_factor);
        h.set("train.patience_first", s.schedule.patience_first);
        h.set("train.patience_after", s.schedule.patience_after);
        h.set(
            "train.best_bleu",
            s.schedule.best.map_or("none".to_string(), |b| b.to_string()),
        );
        h.set("train.stale", s.schedule.stale);
        h.set("train.decays", s.schedule.decays);
        h.set("train.recurrent_dropout", c.recurrent_dropout);
        h.set("train.char_dropout", c.char_dropout);
        h.set("train.label_smoothing", c.label_smoothing);
        h.set("train.avg_batch_size", c.avg_batch_size);
        h.set("adam.step", s.adam.step);
        h.set("adam.beta1", s.adam.beta1);
        h.set("adam.beta2", s.adam.beta2);
        h.set("adam.eps", s.adam.eps);
        h
    }

    /// Model, optimizer moments and loop state in one file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let m_names: Vec<String> = self.state.adam.m.named().map(|(n, _)| format!("{OPTIMIZER_PREFIX}m/{n}")).collect();
        let v_names: Vec<String> = self.state.adam.v.named().map(|(n, _)| format!("{OPTIMIZER_PREFIX}v/{n}")).collect();
        let mut entries: Vec<(&str, &Tensor<f32>)> = self.model.params.named().collect();
        entries.extend(m_names.iter().map(String::as_str).zip(self.state.adam.m.named().map(|(_, t)| t)));
        entries.extend(v_names.iter().map(String::as_str).zip(self.state.adam.v.named().map(|(_, t)| t)));
        write_checkpoint(path, &self.header(), entries.into_iter())
    }

    /// Restores a trainer; `config` supplies the loop limits (epochs,
    /// dev size), the rest comes from the checkpoint.
    pub fn load(path: &Path, config: TrainConfig) -> Result<Self> {
        let (header, tensors) = read_checkpoint::<f32>(path)?;
        let wrap = |e: Error| match e {
            Error::Io { .. } | Error::Format { .. } => e,
            other => Error::format(path, other.to_string()),
        };
        let (opt, own): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|(n, _)| n.starts_with(OPTIMIZER_PREFIX));
        let model = Seq2Seq::from_parts(&header, own).map_err(wrap)?;
        let mut m = model.params.zeros_like();
        let mut v = model.params.zeros_like();
        let (mut ms, mut vs) = (Vec::new(), Vec::new());
        for (name, t) in opt {
            let rest = &name[OPTIMIZER_PREFIX.len()..];
            if let Some(n) = rest.strip_prefix("m/") {
                ms.push((n.to_string(), t));
            } else if let Some(n) = rest.strip_prefix("v/") {
                vs.push((n.to_string(), t));
            } else {
                return Err(Error::format(path, format!("unknown optimizer tensor {name}")));
            }
        }
        if ms.is_empty() {
            return Err(Error::format(path, "checkpoint carries no optimizer state"));
        }
        m.load_named(ms).map_err(wrap)?;
        v.load_named(vs).map_err(wrap)?;
        let p = |k: &str| header.parse::<f64>(k).map_err(wrap);
        let u = |k: &str| header.parse::<usize>(k).map_err(wrap);
        let best = match header.get("train.best_bleu") {
            Some("none") | None => None,
            Some(_) => Some(p("train.best_bleu")?),
        };
        let schedule = LrSchedule {
            lr0: p("train.lr0")?,
            lr: p("train.lr")?,
            decay_factor: p("train.decay_factor")?,
            patience_first: u("train.patience_first")?,
            patience_after: u("train.patience_after")?,
            best,
            stale: u("train.stale")?,
            decays: u("train.decays")?,
        };
        let adam = AdamState {
            m,
            v,
            step: header.parse("adam.step").map_err(wrap)?,
            beta1: p("adam.beta1")?,
            beta2: p("adam.beta2")?,
            eps: p("adam.eps")?,
        };
        let config = TrainConfig {
            lr0: schedule.lr0,
            decay_factor: schedule.decay_factor,
            patience_first: schedule.patience_first,
            patience_after: schedule.patience_after,
            recurrent_dropout: p("train.recurrent_dropout")?,
            char_dropout: p("train.char_dropout")?,
            label_smoothing: p("train.label_smoothing")?,
            avg_batch_size: u("train.avg_batch_size")?,
            ..config
        };
        config.validate()?;
        let state = TrainState {
            epoch: u("train.epoch")?,
            schedule,
            adam,
            seed: header.parse("train.seed").map_err(wrap)?,
        };
        Ok(Trainer { model, state, config })
    }
}

fn source_len(e: &Example<f32>) -> usize {
    match &e.source {
        Source::Features(f) => f.rows(),
        Source::Tokens(t) => t.len(),
    }
}

/// Files written by [`train_to_dir`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunFiles {
    pub best: PathBuf,
    pub last: PathBuf,
    pub log: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        RunFiles {
            best: dir.join("best.ckpt"),
            last: dir.join("last.ckpt"),
            log: dir.join("train.log"),
        }
    }
}

/// Runs [`Trainer::fit`] writing `best.ckpt` on improvement, `last.ckpt`
/// after every epoch and appending to `train.log`.
pub fn train_to_dir(trainer: &mut Trainer, train: &[Example<f32>], dev: &[DevItem], dir: &Path) -> Result<RunFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = RunFiles::in_dir(dir);
    let log_path = files.log.clone();
    trainer.fit(train, dev, |t, record, best| {
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        writeln!(log, "{}", record.log_line()).map_err(|e| Error::io(&log_path, e))?;
        if best {
            t.save(&files.best)?;
        }
        t.save(&files.last)
    })?;
    if !files.best.exists() {
        trainer.save(&files.best)?;
    }
    Ok(files)
}

/// Speech examples with the chosen reference side as target (first
/// reference). Features must be present.
pub fn speech_examples(utts: &[Utterance], vocab: &Vocabulary, side: TargetSide) -> Result<Vec<Example<f32>>> {
    utts.iter()
        .map(|u| {
            let f = u
                .features
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("utterance {} has no features", u.id)))?;
            let target = u
                .target(side)
                .ok_or_else(|| Error::InvalidInput(format!("utterance {} has no reference", u.id)))?;
            Ok(Example {
                source: Source::Features(f.to_tensor()),
                target: vocab.encode(target),
            })
        })
        .collect()
}

/// Dev items for a speech model scored against every reference of `side`.
pub fn speech_dev(utts: &[Utterance], side: TargetSide) -> Result<Vec<DevItem>> {
    utts.iter()
        .map(|u| {
            let f = u
                .features
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("utterance {} has no features", u.id)))?;
            Ok(DevItem {
                source: Source::Features(f.to_tensor()),
                refs: u.refs(side).to_vec(),
            })
        })
        .collect()
}

/// Text-to-text examples for a model with a source vocabulary.
pub fn text_examples(model: &Seq2Seq<f32>, pairs: &[(String, String)]) -> Result<Vec<Example<f32>>> {
    pairs
        .iter()
        .map(|(src, tgt)| {
            Ok(Example {
                source: Source::Tokens(model.source_tokens(src)?),
                target: model.target_vocab.encode(tgt),
            })
        })
        .collect()
}

pub fn text_dev(model: &Seq2Seq<f32>, pairs: &[(String, String)]) -> Result<Vec<DevItem>> {
    pairs
        .iter()
        .map(|(src, tgt)| {
            Ok(DevItem {
                source: Source::Tokens(model.source_tokens(src)?),
                refs: vec![tgt.clone()],
            })
        })
        .collect()
}

/// Mean per-token negative log-likelihood without dropout.
pub fn eval_nll(model: &Seq2Seq<f32>, examples: &[Example<f32>]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut sum, mut tokens) = (0.0, 0usize);
    for chunk in examples.chunks(64) {
        let refs: Vec<&Example<f32>> = chunk.iter().collect();
        let r = model.forward_loss(&refs, &PassOptions::eval(), &mut rng)?;
        sum += r.nll_sum;
        tokens += r.tokens;
    }
    Ok(sum / tokens.max(1) as f64)
}
