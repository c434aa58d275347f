use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, o) in dx.data_mut().iter_mut().zip(y.data()) {
        if *o <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

pub fn softmax_in_place<T: Real>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    x.iter_mut().for_each(|v| *v /= sum);
}

pub fn log_softmax<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = x.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
    x.iter().map(|v| *v - lse).collect()
}

/// Cross-entropy against a smoothed target: `1 - epsilon` on the gold
/// index and `epsilon / (V - 1)` on every other index.
pub fn label_smoothed_ce<T: Real>(logits: &[T], target: usize, epsilon: f64) -> Result<T> {
    Ok(label_smoothed_ce_grad(logits, target, epsilon)?.0)
}

/// Loss and its gradient with respect to the logits, `softmax - q`.
pub fn label_smoothed_ce_grad<T: Real>(
    logits: &[T],
    target: usize,
    epsilon: f64,
) -> Result<(T, Vec<T>)> {
    let v = logits.len();
    if target >= v {
        return Err(Error::InvalidInput(format!(
            "target index {target} outside vocabulary of {v}"
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!("label smoothing {epsilon} not in [0, 1)")));
    }
    let logp = log_softmax(logits);
    let on = T::lit(1.0 - epsilon);
    let off = if v > 1 {
        T::lit(epsilon / (v - 1) as f64)
    } else {
        T::zero()
    };
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(v);
    for (i, lp) in logp.iter().enumerate() {
        let q = if i == target { on } else { off };
        if q != T::zero() {
            loss -= q * *lp;
        }
        grad.push(lp.exp() - q);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_smoothing_is_plain_cross_entropy() {
        let logits = [0.5f64, -1.0, 2.0, 0.0];
        let loss = label_smoothed_ce(&logits, 2, 0.0).unwrap();
        assert!((loss + log_softmax(&logits)[2]).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_cost_log_v() {
        for eps in [0.0, 0.1, 0.5] {
            let loss = label_smoothed_ce(&[0.3f64; 7], 4, eps).unwrap();
            assert!((loss - 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn three_way_hand_value() {
        // logits (1,0,0): log Z = ln(e + 2); q = (0.9, 0.05, 0.05)
        let lz = (std::f64::consts::E + 2.0).ln();
        let expect = 0.9 * (lz - 1.0) + 0.05 * lz + 0.05 * lz;
        let loss = label_smoothed_ce(&[1.0f64, 0.0, 0.0], 0, 0.1).unwrap();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        assert!((loss - 0.651_444_7).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_target() {
        assert!(label_smoothed_ce(&[0.0f32; 3], 3, 0.1).is_err());
    }

    #[test]
    fn relu_gradient_masks_negatives() {
        let x = Tensor::from_vec(&[1, 3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        let y = relu(&x);
        let dy = Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(relu_backward(&y, &dy).data(), &[0.0, 0.0, 1.0]);
    }
}
