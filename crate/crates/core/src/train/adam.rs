use crate::error::{Error, Result};
use crate::nn::{normalize_rows, ParamId, ParamKind, ParamStore, Real};

/// Moment estimates with the same layout as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step on every weight tensor, then unit-norm
/// rows for each table in `unit_rows`. Buffers are left alone.
pub fn adam_update<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    unit_rows: &[ParamId],
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dimension("optimizer state does not match parameters".into()));
    }
    for id in params.weight_ids() {
        let (g, p) = (grads.get(id), params.get(id));
        if g.shape() != p.shape() {
            return Err(Error::Dimension(format!("gradient shape mismatch for {}", params.name(id))));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (ob1, ob2) = (T::lit(1.0 - state.beta1), T::lit(1.0 - state.beta2));
    let step_size = T::lit(lr / c1);
    let inv_c2 = T::lit(1.0 / c2);
    let eps = T::lit(state.eps);
    let ids: Vec<ParamId> = params.ids().filter(|&id| params.kind(id) == ParamKind::Weight).collect();
    for id in ids {
        let g = grads.get(id).data();
        let m = state.m.get_mut(id).data_mut();
        let v = state.v.get_mut(id).data_mut();
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + ob1 * g[i];
            v[i] = b2 * v[i] + ob2 * g[i] * g[i];
            p[i] -= step_size * m[i] / ((v[i] * inv_c2).sqrt() + eps);
        }
    }
    for &id in unit_rows {
        normalize_rows(params.get_mut(id));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn store(values: Vec<f64>, table: Vec<f64>) -> (ParamStore<f64>, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let w = s.add("w", Tensor::from_vec(&[n], values).unwrap(), ParamKind::Weight);
        let e = s.add("emb", Tensor::from_vec(&[2, 2], table).unwrap(), ParamKind::Weight);
        s.add("stat", Tensor::from_vec(&[1], vec![5.0]).unwrap(), ParamKind::Buffer);
        (s, w, e)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.37, -2.5, 0.01] {
            let (mut p, w, e) = store(vec![1.0], vec![0.6, 0.8, 1.0, 0.0]);
            let mut grads = p.zeros_like();
            grads.get_mut(w).data_mut()[0] = g;
            let mut st = AdamState::new(&p);
            adam_update(&mut p, &grads, &mut st, 3e-4, &[e]).unwrap();
            let delta = p.get(w).data()[0] - 1.0;
            assert!((delta + 3e-4 * g.signum()).abs() < 1e-9, "{delta}");
        }
    }

    #[test]
    fn zero_gradients_only_renormalize() {
        let (mut p, w, e) = store(vec![0.5, -0.5], vec![3.0, 4.0, 0.0, 2.0]);
        let before = p.clone();
        let grads = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_update(&mut p, &grads, &mut st, 1e-2, &[e]).unwrap();
        assert_eq!(p.get(w), before.get(w));
        assert_eq!(p.get(e).data(), &[0.6, 0.8, 0.0, 1.0]);
        assert_eq!(p.get(p.id("stat").unwrap()).data(), &[5.0]);
    }

    #[test]
    fn embedding_rows_stay_unit_norm() {
        let (mut p, w, e) = store(vec![0.1, 0.2], vec![0.3, -0.1, 0.7, 0.2]);
        let mut st = AdamState::new(&p);
        for k in 0..5 {
            let mut grads = p.zeros_like();
            grads.get_mut(e).data_mut().copy_from_slice(&[0.5, -(k as f64), 2.0, 0.1]);
            grads.get_mut(w).data_mut()[1] = 1.0;
            adam_update(&mut p, &grads, &mut st, 0.1, &[e]).unwrap();
            for r in 0..2 {
                let n: f64 = p.get(e).row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut p, w, _) = store(vec![0.1], vec![1.0, 0.0, 0.0, 1.0]);
        let mut grads = p.zeros_like();
        grads.get_mut(w).data_mut()[0] = f64::NAN;
        let mut st = AdamState::new(&p);
        let before = p.clone();
        match adam_update(&mut p, &grads, &mut st, 0.1, &[]) {
            Err(Error::NonFinite(m)) => assert!(m.contains('w')),
            other => panic!("{other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }
}
