use rand::Rng;

use crate::nn::params::glorot;
use crate::nn::tensor::gemm;
use crate::nn::{ParamId, ParamKind, ParamStore, Real, Tensor};

/// Network-in-network projection that halves the time axis: adjacent
/// frames are concatenated and mapped through a bias-free linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Nin {
    pub w: ParamId,
    pub input: usize,
    pub output: usize,
}

#[derive(Clone, Debug)]
pub struct NinCache<T> {
    pairs: Tensor<T>,
    steps: usize,
}

/// Length after pairing; an odd tail is paired with a zero frame.
pub fn downsampled_len(steps: usize) -> usize {
    steps.div_ceil(2)
}

impl Nin {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            glorot(output, 2 * input, rng),
            ParamKind::Weight,
        );
        Nin { w, input, output }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, seq: &Tensor<T>) -> (Tensor<T>, NinCache<T>) {
        let steps = seq.rows();
        let out_len = downsampled_len(steps);
        // Row-major [2k, d] is bit-identical to [k, 2d] with rows paired.
        let mut flat = seq.data().to_vec();
        flat.resize(out_len * 2 * self.input, T::zero());
        let pairs = Tensor::from_vec(&[out_len, 2 * self.input], flat).expect("paired shape");
        let mut out = Tensor::zeros(&[out_len, self.output]);
        gemm(pairs.matref(), store.get(self.w).matref().t(), T::zero(), out.data_mut());
        (out, NinCache { pairs, steps })
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &NinCache<T>,
        dy: &Tensor<T>,
        grads: &mut ParamStore<T>,
    ) -> Tensor<T> {
        gemm(dy.matref().t(), cache.pairs.matref(), T::one(), grads.get_mut(self.w).data_mut());
        let mut dpairs = vec![T::zero(); cache.pairs.len()];
        gemm(dy.matref(), store.get(self.w).matref(), T::zero(), &mut dpairs);
        dpairs.truncate(cache.steps * self.input);
        Tensor::from_vec(&[cache.steps, self.input], dpairs).expect("input shape")
    }
}

/// Free-function form: `out[i] = P · concat(seq[2i], seq[2i+1])`.
pub fn nin_downsample<T: Real>(store: &ParamStore<T>, nin: &Nin, seq: &Tensor<T>) -> Tensor<T> {
    nin.forward(store, seq).0
}
