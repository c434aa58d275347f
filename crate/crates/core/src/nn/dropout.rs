use rand::Rng;

use crate::nn::{Real, Tensor};

/// Inverted-dropout mask sampled once per sequence and reused at every
/// timestep: entries are `0` with probability `p`, otherwise `1 / (1 - p)`.
pub fn variational_dropout_mask<T: Real>(len: usize, p: f64, rng: &mut impl Rng) -> Vec<T> {
    if p <= 0.0 {
        return vec![T::one(); len];
    }
    let keep = T::lit(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// Per-position keep flags for target character dropout.
pub fn char_keep_flags(len: usize, p: f64, rng: &mut impl Rng) -> Vec<bool> {
    if p <= 0.0 {
        return vec![true; len];
    }
    (0..len).map(|_| rng.gen::<f64>() >= p).collect()
}

/// Zeroes whole embedding rows of `[time, dim]` with probability `p`.
pub fn target_char_dropout<T: Real>(embedded: &Tensor<T>, p: f64, rng: &mut impl Rng) -> Tensor<T> {
    let keep = char_keep_flags(embedded.rows(), p, rng);
    let mut out = embedded.clone();
    for (t, k) in keep.iter().enumerate() {
        if !k {
            out.row_mut(t).fill(T::zero());
        }
    }
    out
}
