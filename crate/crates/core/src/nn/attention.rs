use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ops::softmax_in_place;
use crate::nn::params::glorot;
use crate::nn::tensor::{axpy, dot, gemm, matvec_acc, matvec_t_acc, outer_acc};
use crate::nn::{ParamId, ParamKind, ParamStore, Real, Tensor};

/// Additive attention with one tanh hidden layer:
/// `score_i = v · tanh(W_dec h + W_enc e_i)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpAttention {
    pub w_dec: ParamId,
    pub w_enc: ParamId,
    pub v: ParamId,
    pub dec_dim: usize,
    pub enc_dim: usize,
    pub hidden: usize,
}

/// Per-step activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionStep<T> {
    pub weights: Vec<T>,
    hidden: Tensor<T>,
}

impl MlpAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dec_dim: usize,
        enc_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w_dec = store.add(format!("{prefix}.w_dec"), glorot(hidden, dec_dim, rng), ParamKind::Weight);
        let w_enc = store.add(format!("{prefix}.w_enc"), glorot(hidden, enc_dim, rng), ParamKind::Weight);
        let v_init: Tensor<T> = glorot(1, hidden, rng);
        let v = store.add(
            format!("{prefix}.v"),
            Tensor::from_vec(&[hidden], v_init.into_data()).expect("vector"),
            ParamKind::Weight,
        );
        MlpAttention {
            w_dec,
            w_enc,
            v,
            dec_dim,
            enc_dim,
            hidden,
        }
    }

    /// Encoder-side projections `W_enc e_i`, shared by every decoder step.
    pub fn keys<T: Real>(&self, store: &ParamStore<T>, enc: &Tensor<T>) -> Tensor<T> {
        let mut keys = Tensor::zeros(&[enc.rows(), self.hidden]);
        gemm(enc.matref(), store.get(self.w_enc).matref().t(), T::zero(), keys.data_mut());
        keys
    }

    /// Returns the context vector and the step cache (which holds the weights).
    pub fn step<T: Real>(
        &self,
        store: &ParamStore<T>,
        keys: &Tensor<T>,
        enc: &Tensor<T>,
        dec_state: &[T],
    ) -> (Vec<T>, AttentionStep<T>) {
        let a = self.hidden;
        let mut query = vec![T::zero(); a];
        matvec_acc(store.get(self.w_dec).data(), self.dec_dim, 0, dec_state, &mut query);
        let v = store.get(self.v).data();
        let steps = keys.rows();
        let mut hidden = Tensor::zeros(&[steps, a]);
        let mut weights = vec![T::zero(); steps];
        for i in 0..steps {
            let u = hidden.row_mut(i);
            for ((u, k), q) in u.iter_mut().zip(keys.row(i)).zip(&query) {
                *u = (*k + *q).tanh();
            }
            weights[i] = dot(v, hidden.row(i));
        }
        softmax_in_place(&mut weights);
        let mut context = vec![T::zero(); enc.cols()];
        for (i, &w) in weights.iter().enumerate() {
            axpy(w, enc.row(i), &mut context);
        }
        (context, AttentionStep { weights, hidden })
    }

    /// Backward of one [`step`](Self::step). Gradients for the keys and
    /// encoder states accumulate into `dkeys` / `denc`; call
    /// [`finish_backward`](Self::finish_backward) once after all steps.
    #[allow(clippy::too_many_arguments)]
    pub fn step_backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &AttentionStep<T>,
        enc: &Tensor<T>,
        dec_state: &[T],
        dcontext: &[T],
        dkeys: &mut Tensor<T>,
        denc: &mut Tensor<T>,
        ddec_state: &mut [T],
        grads: &mut ParamStore<T>,
    ) {
        let steps = enc.rows();
        let w = &cache.weights;
        let mut dw = vec![T::zero(); steps];
        for i in 0..steps {
            dw[i] = dot(dcontext, enc.row(i));
            axpy(w[i], dcontext, denc.row_mut(i));
        }
        let mean: T = w.iter().zip(&dw).map(|(a, b)| *a * *b).sum();
        let v = store.get(self.v).data();
        let mut dquery = vec![T::zero(); self.hidden];
        let mut dv = vec![T::zero(); self.hidden];
        let mut dz = vec![T::zero(); self.hidden];
        for i in 0..steps {
            let ds = w[i] * (dw[i] - mean);
            let u = cache.hidden.row(i);
            axpy(ds, u, &mut dv);
            for j in 0..self.hidden {
                dz[j] = ds * v[j] * (T::one() - u[j] * u[j]);
            }
            axpy(T::one(), &dz, dkeys.row_mut(i));
            axpy(T::one(), &dz, &mut dquery);
        }
        axpy(T::one(), &dv, grads.get_mut(self.v).data_mut());
        outer_acc(grads.get_mut(self.w_dec).data_mut(), self.dec_dim, 0, &dquery, dec_state);
        matvec_t_acc(store.get(self.w_dec).data(), self.dec_dim, 0, &dquery, ddec_state);
    }

    pub fn finish_backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        enc: &Tensor<T>,
        dkeys: &Tensor<T>,
        denc: &mut Tensor<T>,
        grads: &mut ParamStore<T>,
    ) {
        gemm(dkeys.matref().t(), enc.matref(), T::one(), grads.get_mut(self.w_enc).data_mut());
        gemm(dkeys.matref(), store.get(self.w_enc).matref(), T::one(), denc.data_mut());
    }
}

/// Single-call form returning `(context, weights)`.
pub fn mlp_attention<T: Real>(
    store: &ParamStore<T>,
    att: &MlpAttention,
    dec_state: &[T],
    enc_states: &Tensor<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    if enc_states.rows() == 0 || enc_states.is_empty() {
        return Err(Error::InvalidInput("attention over an empty sequence".into()));
    }
    if enc_states.cols() != att.enc_dim || dec_state.len() != att.dec_dim {
        return Err(Error::Dimension("attention input widths".into()));
    }
    let keys = att.keys(store, enc_states);
    let (ctx, step) = att.step(store, &keys, enc_states, dec_state);
    Ok((ctx, step.weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore<f64>, MlpAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let att = MlpAttention::new(&mut store, "att", 3, 4, 5, &mut rng);
        (store, att)
    }

    #[test]
    fn single_state_gets_all_weight() {
        let (store, att) = setup();
        let enc = Tensor::from_vec(&[1, 4], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let (ctx, w) = mlp_attention(&store, &att, &[1.0, 0.0, -1.0], &enc).unwrap();
        assert_eq!(w, vec![1.0]);
        for (a, b) in ctx.iter().zip(enc.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_states_get_uniform_weights() {
        let (store, att) = setup();
        let enc = Tensor::from_rows(&vec![vec![0.3, -0.1, 0.7, 0.0]; 6]).unwrap();
        let (_, w) = mlp_attention(&store, &att, &[0.2, 0.5, -0.4], &enc).unwrap();
        for x in w {
            assert!((x - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_encoder_rejected() {
        let (store, att) = setup();
        let enc = Tensor::<f64>::zeros(&[0, 4]);
        assert!(mlp_attention(&store, &att, &[0.0; 3], &enc).is_err());
    }
}
