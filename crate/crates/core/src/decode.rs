//! Beam search with final-stage length normalization, and greedy decoding.

use crate::error::{Error, Result};
use crate::model::{DecoderState, Encoded, Seq2Seq, Source};
use crate::nn::ops::log_softmax;
use crate::nn::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_norm_exponent: f64,
    pub max_len_factor: usize,
    pub max_len_floor: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 15,
            length_norm_exponent: 1.5,
            max_len_factor: 3,
            max_len_floor: 50,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if !(self.length_norm_exponent >= 0.0) {
            return Err(Error::Config("length normalization exponent must be non-negative".into()));
        }
        Ok(())
    }

    /// Output length cap for a source of `source_len` encoder states.
    pub fn max_len(&self, source_len: usize) -> usize {
        self.max_len_floor.max(self.max_len_factor * source_len)
    }
}

/// Autoregressive scorer driven by the search.
pub trait StepModel {
    type State: Clone;

    fn initial_state(&self) -> Self::State;

    /// Unnormalized scores over the output vocabulary after `prev`.
    fn step(&self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State)>;

    fn bos(&self) -> usize;

    fn eos(&self) -> usize;

    /// Symbols that may never be emitted.
    fn forbidden(&self) -> Vec<usize>;

    /// Length of the source in encoder states.
    fn source_len(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis<S> {
    /// Emitted symbols, excluding BOS and the final EOS.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub state: S,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    /// Emitted length, counting EOS for finished hypotheses.
    pub fn len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn normalized_score(&self, exponent: f64) -> f64 {
        let len = self.len().max(1) as f64;
        self.logprob / len.powf(exponent)
    }
}

/// Outcome of a search.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
}

fn masked_logprobs(scores: &[f64], forbidden: &[usize]) -> Vec<f64> {
    let mut s = scores.to_vec();
    for &f in forbidden {
        if let Some(v) = s.get_mut(f) {
            *v = f64::NEG_INFINITY;
        }
    }
    log_softmax(&s)
}

pub fn beam_search<M: StepModel>(model: &M, config: &DecodeConfig) -> Result<Decoded> {
    config.validate()?;
    if model.source_len() == 0 {
        return Err(Error::InvalidInput("empty encoder output".into()));
    }
    let forbidden = model.forbidden();
    let eos = model.eos();
    let max_len = config.max_len(model.source_len());
    let k = config.beam_size;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        state: model.initial_state(),
        finished: false,
    }];
    let mut pool: Vec<Hypothesis<M::State>> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() || pool.len() >= k {
            break;
        }
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (hi, h) in live.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or_else(|| model.bos());
            let (scores, state) = model.step(&h.state, prev)?;
            let lp = masked_logprobs(&scores, &forbidden);
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    cands.push((h.logprob + l, hi, tok));
                }
            }
            if lp.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite("decoder scores".into()));
            }
            next_states.push(state);
        }
        // Stable sort keeps generation order among ties.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::with_capacity(k);
        for &(score, hi, tok) in cands.iter().take(k) {
            let mut tokens = live[hi].tokens.clone();
            let finished = tok == eos;
            if !finished {
                tokens.push(tok);
            }
            let hyp = Hypothesis {
                tokens,
                logprob: score,
                state: next_states[hi].clone(),
                finished,
            };
            if finished {
                pool.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    let candidates = if pool.is_empty() { &live } else { &pool };
    let best = candidates
        .iter()
        .fold(None::<&Hypothesis<M::State>>, |best, h| match best {
            Some(b) if b.normalized_score(config.length_norm_exponent)
                >= h.normalized_score(config.length_norm_exponent) =>
            {
                Some(b)
            }
            _ => Some(h),
        })
        .ok_or_else(|| Error::InvalidInput("search produced no hypotheses".into()))?;
    Ok(Decoded {
        tokens: best.tokens.clone(),
        logprob: best.logprob,
        score: best.normalized_score(config.length_norm_exponent),
        finished: best.finished,
    })
}

/// Arg-max decoding until EOS or the length cap.
pub fn greedy<M: StepModel>(model: &M, max_len: usize) -> Result<Decoded> {
    if model.source_len() == 0 {
        return Err(Error::InvalidInput("empty encoder output".into()));
    }
    let forbidden = model.forbidden();
    let mut state = model.initial_state();
    let mut prev = model.bos();
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    let mut finished = false;
    for _ in 0..max_len {
        let (scores, next) = model.step(&state, prev)?;
        let lp = masked_logprobs(&scores, &forbidden);
        let (tok, l) = lp
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
        if !l.is_finite() {
            return Err(Error::NonFinite("decoder scores".into()));
        }
        logprob += l;
        state = next;
        if tok == model.eos() {
            finished = true;
            break;
        }
        tokens.push(tok);
        prev = tok;
    }
    let len = (tokens.len() + usize::from(finished)).max(1) as f64;
    Ok(Decoded {
        tokens,
        logprob,
        score: logprob / len,
        finished,
    })
}

/// [`StepModel`] over a trained model and one encoded input.
pub struct ModelStepper<'a, T> {
    model: &'a Seq2Seq<T>,
    encoded: Encoded<T>,
}

impl<'a, T: Real> ModelStepper<'a, T> {
    pub fn new(model: &'a Seq2Seq<T>, source: &Source<T>) -> Result<Self> {
        Ok(ModelStepper {
            model,
            encoded: model.prepare(source)?,
        })
    }
}

impl<T: Real> StepModel for ModelStepper<'_, T> {
    type State = DecoderState<T>;

    fn initial_state(&self) -> Self::State {
        self.model.initial_state()
    }

    fn step(&self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State)> {
        let (logits, next) = self.model.decode_step(&self.encoded, state, prev)?;
        Ok((logits.iter().map(|v| v.as_f64()).collect(), next))
    }

    fn bos(&self) -> usize {
        self.model.target_vocab.bos()
    }

    fn eos(&self) -> usize {
        self.model.target_vocab.eos()
    }

    fn forbidden(&self) -> Vec<usize> {
        let v = &self.model.target_vocab;
        vec![v.pad(), v.bos(), v.unk()]
    }

    fn source_len(&self) -> usize {
        self.encoded.len()
    }
}

/// Beam-decodes one input to text.
pub fn translate<T: Real>(model: &Seq2Seq<T>, source: &Source<T>, config: &DecodeConfig) -> Result<String> {
    let stepper = ModelStepper::new(model, source)?;
    let out = beam_search(&stepper, config)?;
    Ok(model.target_vocab.decode(&out.tokens))
}

/// Greedy-decodes one input to text.
pub fn translate_greedy<T: Real>(model: &Seq2Seq<T>, source: &Source<T>, config: &DecodeConfig) -> Result<String> {
    let stepper = ModelStepper::new(model, source)?;
    let out = greedy(&stepper, config.max_len(stepper.source_len()))?;
    Ok(model.target_vocab.decode(&out.tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Symbols 0..3 are characters, 3 is EOS, 4 is BOS. Scores depend on the
    /// full prefix through a seeded hash so the model has long-range effects.
    struct Toy {
        seed: u64,
        max_len: usize,
    }

    impl StepModel for Toy {
        type State = Vec<usize>;

        fn initial_state(&self) -> Vec<usize> {
            Vec::new()
        }

        fn step(&self, state: &Vec<usize>, prev: usize) -> Result<(Vec<f64>, Vec<usize>)> {
            let mut prefix = state.clone();
            if prev != 4 {
                prefix.push(prev);
            }
            let key = prefix.iter().fold(self.seed, |h, &t| h.wrapping_mul(31).wrapping_add(t as u64 + 1));
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let scores = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            Ok((scores, prefix))
        }

        fn bos(&self) -> usize {
            4
        }

        fn eos(&self) -> usize {
            3
        }

        fn forbidden(&self) -> Vec<usize> {
            vec![4]
        }

        fn source_len(&self) -> usize {
            self.max_len
        }
    }

    fn toy_config(beam: usize, exponent: f64, max_len: usize) -> DecodeConfig {
        DecodeConfig {
            beam_size: beam,
            length_norm_exponent: exponent,
            max_len_factor: 0,
            max_len_floor: max_len,
        }
    }

    fn enumerate_best(toy: &Toy, exponent: f64, max_len: usize) -> (Vec<usize>, f64) {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut stack = vec![(Vec::<usize>::new(), 0.0, Vec::<usize>::new())];
        while let Some((tokens, lp, state)) = stack.pop() {
            let prev = tokens.last().copied().unwrap_or(4);
            let (scores, next) = toy.step(&state, prev).unwrap();
            let l = masked_logprobs(&scores, &[4]);
            let len = tokens.len() + 1;
            let score = (lp + l[3]) / (len as f64).powf(exponent);
            if score > best.1 {
                best = (tokens.clone(), score);
            }
            if len < max_len {
                for c in 0..3 {
                    let mut t = tokens.clone();
                    t.push(c);
                    stack.push((t, lp + l[c], next.clone()));
                }
            }
        }
        best
    }

    #[test]
    fn exhaustive_beam_matches_enumeration() {
        for seed in 0..20 {
            let toy = Toy { seed, max_len: 5 };
            let (tokens, score) = enumerate_best(&toy, 1.5, 5);
            let out = beam_search(&toy, &toy_config(1024, 1.5, 5)).unwrap();
            assert_eq!(out.tokens, tokens, "seed {seed}");
            assert!((out.score - score).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_beam_without_normalization_is_greedy() {
        for seed in 0..20 {
            let toy = Toy { seed, max_len: 7 };
            let b = beam_search(&toy, &toy_config(1, 0.0, 7)).unwrap();
            let g = greedy(&toy, 7).unwrap();
            assert_eq!(b.tokens, g.tokens);
            assert!((b.logprob - g.logprob).abs() < 1e-12);
        }
    }

    struct Forced {
        target: Vec<usize>,
        off: f64,
    }

    impl StepModel for Forced {
        type State = usize;

        fn initial_state(&self) -> usize {
            0
        }

        fn step(&self, pos: &usize, _prev: usize) -> Result<(Vec<f64>, usize)> {
            let want = self.target.get(*pos).copied().unwrap_or(3);
            let scores = (0..6).map(|i| if i == want { 0.0 } else { self.off }).collect();
            Ok((scores, pos + 1))
        }

        fn bos(&self) -> usize {
            4
        }

        fn eos(&self) -> usize {
            3
        }

        fn forbidden(&self) -> Vec<usize> {
            vec![4, 5]
        }

        fn source_len(&self) -> usize {
            4
        }
    }

    #[test]
    fn one_hot_model_forces_its_string() {
        let forced = Forced {
            target: vec![2, 0, 0, 1, 2],
            off: f64::NEG_INFINITY,
        };
        for beam in [1, 2, 5, 15] {
            let out = beam_search(&forced, &DecodeConfig { beam_size: beam, ..DecodeConfig::default() }).unwrap();
            assert_eq!(out.tokens, forced.target);
            assert!(out.finished);
        }
    }

    #[test]
    fn forbidden_symbols_never_emitted() {
        // Wants UNK (5) first; masking must pick something else.
        let forced = Forced { target: vec![5, 1], off: -4.0 };
        let out = beam_search(&forced, &DecodeConfig::default()).unwrap();
        assert!(!out.tokens.contains(&5) && !out.tokens.contains(&4));
    }

    #[test]
    fn length_cap_falls_back_to_live_hypotheses() {
        let forced = Forced {
            target: vec![0; 100],
            off: f64::NEG_INFINITY,
        };
        let out = beam_search(&forced, &toy_config(3, 1.5, 6)).unwrap();
        assert_eq!(out.tokens.len(), 6);
        assert!(!out.finished);
    }

    #[test]
    fn rejects_zero_beam_and_empty_source() {
        let toy = Toy { seed: 0, max_len: 0 };
        assert!(beam_search(&toy, &toy_config(1, 1.5, 3)).is_err());
        let toy = Toy { seed: 0, max_len: 3 };
        assert!(beam_search(&toy, &toy_config(0, 1.5, 3)).is_err());
    }

    #[test]
    fn exhaustive_beam_dominates_narrow_beams() {
        for seed in 0..200 {
            let toy = Toy { seed, max_len: 5 };
            let wide = beam_search(&toy, &toy_config(1024, 1.5, 5)).unwrap();
            for beam in 1..8 {
                let narrow = beam_search(&toy, &toy_config(beam, 1.5, 5)).unwrap();
                if narrow.finished {
                    assert!(wide.score >= narrow.score - 1e-12, "seed {seed} beam {beam}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn logprob_accumulates_non_positive_increments(seed in 0u64..500, beam in 1usize..6) {
            let toy = Toy { seed, max_len: 6 };
            let out = beam_search(&toy, &toy_config(beam, 1.5, 6)).unwrap();
            prop_assert!(out.logprob <= 0.0);
            let mut state = Vec::new();
            let mut prev = 4;
            let mut total = 0.0;
            let mut seq = out.tokens.clone();
            if out.finished {
                seq.push(3);
            }
            for &t in &seq {
                let (s, next) = toy.step(&state, prev).unwrap();
                let inc = masked_logprobs(&s, &[4])[t];
                prop_assert!(inc <= 0.0);
                total += inc;
                state = next;
                prev = t;
            }
            prop_assert!((total - out.logprob).abs() < 1e-9);
        }
    }
}
