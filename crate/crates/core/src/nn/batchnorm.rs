use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamKind, ParamStore, Real, Tensor};

/// Per-feature batch normalization over every frame of every sequence in
/// the batch, with running statistics for inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
    pub momentum: f64,
    pub eps: f64,
}

/// Batch statistics from a training pass, to be folded into the running
/// estimates by [`BatchNorm::update_running`].
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    xhat: Vec<Tensor<T>>,
    inv_std: Vec<T>,
    count: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        let mut ones = Tensor::zeros(&[dim]);
        ones.fill(T::one());
        let gamma = store.add(format!("{prefix}.gamma"), ones.clone(), ParamKind::Weight);
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim]), ParamKind::Weight);
        let running_mean = store.add(
            format!("{prefix}.running_mean"),
            Tensor::zeros(&[dim]),
            ParamKind::Buffer,
        );
        let running_var = store.add(format!("{prefix}.running_var"), ones, ParamKind::Buffer);
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            dim,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalizes with statistics of the batch itself. Needs at least two
    /// frames across the batch.
    pub fn forward_train<T: Real>(
        &self,
        store: &ParamStore<T>,
        batch: &[Tensor<T>],
    ) -> Result<(Vec<Tensor<T>>, BatchNormCache<T>, BatchStats<T>)> {
        let d = self.dim;
        let count: usize = batch.iter().map(Tensor::rows).sum();
        if count < 2 {
            return Err(Error::InvalidInput(
                "batch normalization in training needs at least two frames".into(),
            ));
        }
        let n = T::lit(count as f64);
        let mut mean = vec![T::zero(); d];
        for x in batch {
            for t in 0..x.rows() {
                for (m, v) in mean.iter_mut().zip(x.row(t)) {
                    *m += *v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); d];
        for x in batch {
            for t in 0..x.rows() {
                for ((s, v), m) in var.iter_mut().zip(x.row(t)).zip(&mean) {
                    let c = *v - *m;
                    *s += c * c;
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let eps = T::lit(self.eps);
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let gamma = store.get(self.gamma).data();
        let beta = store.get(self.beta).data();
        let mut outs = Vec::with_capacity(batch.len());
        let mut xhats = Vec::with_capacity(batch.len());
        for x in batch {
            let mut xhat = Tensor::zeros(x.shape());
            let mut y = Tensor::zeros(x.shape());
            for t in 0..x.rows() {
                for j in 0..d {
                    let xh = (x.row(t)[j] - mean[j]) * inv_std[j];
                    xhat.row_mut(t)[j] = xh;
                    y.row_mut(t)[j] = gamma[j] * xh + beta[j];
                }
            }
            outs.push(y);
            xhats.push(xhat);
        }
        Ok((
            outs,
            BatchNormCache {
                xhat: xhats,
                inv_std,
                count,
            },
            BatchStats { mean, var },
        ))
    }

    /// Normalizes with the running statistics.
    pub fn forward_eval<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let eps = T::lit(self.eps);
        let gamma = store.get(self.gamma).data();
        let beta = store.get(self.beta).data();
        let mean = store.get(self.running_mean).data();
        let var = store.get(self.running_var).data();
        let mut y = Tensor::zeros(x.shape());
        for t in 0..x.rows() {
            for j in 0..self.dim {
                y.row_mut(t)[j] = gamma[j] * (x.row(t)[j] - mean[j]) / (var[j] + eps).sqrt() + beta[j];
            }
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &BatchNormCache<T>,
        dys: &[Tensor<T>],
        grads: &mut ParamStore<T>,
    ) -> Vec<Tensor<T>> {
        let d = self.dim;
        let mut sum_dy = vec![T::zero(); d];
        let mut sum_dy_xhat = vec![T::zero(); d];
        for (dy, xhat) in dys.iter().zip(&cache.xhat) {
            for t in 0..dy.rows() {
                for j in 0..d {
                    sum_dy[j] += dy.row(t)[j];
                    sum_dy_xhat[j] += dy.row(t)[j] * xhat.row(t)[j];
                }
            }
        }
        for (g, s) in grads.get_mut(self.gamma).data_mut().iter_mut().zip(&sum_dy_xhat) {
            *g += *s;
        }
        for (g, s) in grads.get_mut(self.beta).data_mut().iter_mut().zip(&sum_dy) {
            *g += *s;
        }
        let n = T::lit(cache.count as f64);
        let gamma = store.get(self.gamma).data();
        dys.iter()
            .zip(&cache.xhat)
            .map(|(dy, xhat)| {
                let mut dx = Tensor::zeros(dy.shape());
                for t in 0..dy.rows() {
                    for j in 0..d {
                        let k = gamma[j] * cache.inv_std[j];
                        dx.row_mut(t)[j] = k
                            * (dy.row(t)[j] - sum_dy[j] / n - xhat.row(t)[j] * sum_dy_xhat[j] / n);
                    }
                }
                dx
            })
            .collect()
    }

    /// Exponential moving average of batch statistics.
    pub fn update_running<T: Real>(&self, store: &mut ParamStore<T>, stats: &BatchStats<T>) {
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        for (r, b) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * *b;
        }
        for (r, b) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * *b;
        }
    }
}

/// Single-call form over a set of vectors: batch statistics in training,
/// running statistics otherwise.
pub fn batch_norm<T: Real>(
    store: &ParamStore<T>,
    bn: &BatchNorm,
    batch: &Tensor<T>,
    training: bool,
) -> Result<Tensor<T>> {
    if batch.cols() != bn.dim {
        return Err(Error::Dimension(format!(
            "batch norm over {} features, input has {}",
            bn.dim,
            batch.cols()
        )));
    }
    if training {
        let (mut out, _, _) = bn.forward_train(store, std::slice::from_ref(batch))?;
        Ok(out.pop().expect("one output"))
    } else {
        Ok(bn.forward_eval(store, batch))
    }
}
