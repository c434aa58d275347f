//! Long short-term memory recurrences with hand-derived gradients.
//!
//! Gate rows are laid out as `[input | forget | candidate | output]`, each
//! `hidden` wide, in `w_ih: [4H, I]`, `w_hh: [4H, H]` and `b: [4H]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::params::glorot;
use crate::nn::tensor::{gemm, matvec_acc, matvec_t_acc, outer_acc};
use crate::nn::{ParamId, ParamKind, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmLayer {
    /// Registers the layer's parameters; the forget-gate bias starts at +1.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w_ih = store.add(
            format!("{prefix}.w_ih"),
            glorot(4 * hidden, input, rng),
            ParamKind::Weight,
        );
        let w_hh = store.add(
            format!("{prefix}.w_hh"),
            glorot(4 * hidden, hidden, rng),
            ParamKind::Weight,
        );
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(T::one());
        let b = store.add(format!("{prefix}.b"), bias, ParamKind::Weight);
        LstmLayer {
            w_ih,
            w_hh,
            b,
            input,
            hidden,
        }
    }
}

/// Applies gate nonlinearities in place to pre-activations `[i|f|g|o]`.
#[inline]
pub(crate) fn activate<T: Real>(a: &mut [T], hidden: usize) {
    let (ifg, o) = a.split_at_mut(3 * hidden);
    let (if_, g) = ifg.split_at_mut(2 * hidden);
    if_.iter_mut().for_each(|x| *x = x.sigmoid());
    g.iter_mut().for_each(|x| *x = x.tanh());
    o.iter_mut().for_each(|x| *x = x.sigmoid());
}

/// Gate-activation gradients for one timestep. `dh` is the total gradient
/// reaching `h_t`, `dc` is updated in place from `dc_t` to `dc_{t-1}`.
#[inline]
pub(crate) fn cell_backward<T: Real>(
    gates: &[T],
    c_prev: &[T],
    tanh_c: &[T],
    dh: &[T],
    dc: &mut [T],
    da: &mut [T],
) {
    let h = dh.len();
    let one = T::one();
    for j in 0..h {
        let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
        let tc = tanh_c[j];
        let dcj = dc[j] + dh[j] * o * (one - tc * tc);
        da[j] = dcj * g * i * (one - i);
        da[h + j] = dcj * c_prev[j] * f * (one - f);
        da[2 * h + j] = dcj * i * (one - g * g);
        da[3 * h + j] = dh[j] * tc * o * (one - o);
        dc[j] = dcj * f;
    }
}

/// Intermediate values of a single [`lstm_step`].
#[derive(Clone, Debug)]
pub struct StepCache<T> {
    x: Vec<T>,
    h: Vec<T>,
    c: Vec<T>,
    gates: Vec<T>,
    tanh_c: Vec<T>,
}

/// One LSTM recurrence: sigmoid input/forget/output gates, tanh candidate
/// and tanh output nonlinearity.
pub fn lstm_step<T: Real>(
    store: &ParamStore<T>,
    layer: &LstmLayer,
    x: &[T],
    h: &[T],
    c: &[T],
) -> Result<(Vec<T>, Vec<T>, StepCache<T>)> {
    let hd = layer.hidden;
    if x.len() != layer.input || h.len() != hd || c.len() != hd {
        return Err(Error::Dimension(format!(
            "lstm_step expects x:{} h:{hd} c:{hd}, got x:{} h:{} c:{}",
            layer.input,
            x.len(),
            h.len(),
            c.len()
        )));
    }
    let mut a = store.get(layer.b).data().to_vec();
    matvec_acc(store.get(layer.w_ih).data(), layer.input, 0, x, &mut a);
    matvec_acc(store.get(layer.w_hh).data(), hd, 0, h, &mut a);
    activate(&mut a, hd);
    let mut c_new = vec![T::zero(); hd];
    let mut h_new = vec![T::zero(); hd];
    let mut tanh_c = vec![T::zero(); hd];
    for j in 0..hd {
        c_new[j] = a[hd + j] * c[j] + a[j] * a[2 * hd + j];
        tanh_c[j] = c_new[j].tanh();
        h_new[j] = a[3 * hd + j] * tanh_c[j];
    }
    let cache = StepCache {
        x: x.to_vec(),
        h: h.to_vec(),
        c: c.to_vec(),
        gates: a,
        tanh_c,
    };
    Ok((h_new, c_new, cache))
}

/// Backward pass of [`lstm_step`]: accumulates parameter gradients into
/// `grads` and returns `(dx, dh, dc)` for the step inputs.
pub fn lstm_step_backward<T: Real>(
    store: &ParamStore<T>,
    layer: &LstmLayer,
    cache: &StepCache<T>,
    dh_new: &[T],
    dc_new: &[T],
    grads: &mut ParamStore<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hd = layer.hidden;
    let mut dc = dc_new.to_vec();
    let mut da = vec![T::zero(); 4 * hd];
    cell_backward(&cache.gates, &cache.c, &cache.tanh_c, dh_new, &mut dc, &mut da);
    outer_acc(grads.get_mut(layer.w_ih).data_mut(), layer.input, 0, &da, &cache.x);
    outer_acc(grads.get_mut(layer.w_hh).data_mut(), hd, 0, &da, &cache.h);
    for (g, d) in grads.get_mut(layer.b).data_mut().iter_mut().zip(&da) {
        *g += *d;
    }
    let mut dx = vec![T::zero(); layer.input];
    matvec_t_acc(store.get(layer.w_ih).data(), layer.input, 0, &da, &mut dx);
    let mut dh = vec![T::zero(); hd];
    matvec_t_acc(store.get(layer.w_hh).data(), hd, 0, &da, &mut dh);
    (dx, dh, dc)
}

/// Cached activations of a unidirectional sequence pass.
#[derive(Clone, Debug)]
pub struct LstmCache<T> {
    x: Tensor<T>,
    gates: Tensor<T>,
    c: Tensor<T>,
    tanh_c: Tensor<T>,
    /// Recurrent input after the dropout mask, `h_{t-1} ⊙ m`.
    hp: Tensor<T>,
    mask: Option<Vec<T>>,
}

impl LstmLayer {
    /// Runs the recurrence over `x: [T, input]` from a zero state.
    /// `mask` is a variational dropout mask applied to `h_{t-1}` at every step.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        mask: Option<&[T]>,
    ) -> (Tensor<T>, LstmCache<T>) {
        let steps = x.rows();
        let hd = self.hidden;
        assert_eq!(x.cols(), self.input, "lstm input width");
        let mut gates = Tensor::zeros(&[steps, 4 * hd]);
        {
            let bias = store.get(self.b).data();
            for t in 0..steps {
                gates.row_mut(t).copy_from_slice(bias);
            }
        }
        gemm(
            x.matref(),
            store.get(self.w_ih).matref().t(),
            T::one(),
            gates.data_mut(),
        );
        let w_hh = store.get(self.w_hh).data();
        let mut h_seq = Tensor::zeros(&[steps, hd]);
        let mut c_seq = Tensor::zeros(&[steps, hd]);
        let mut tanh_c = Tensor::zeros(&[steps, hd]);
        let mut hp = Tensor::zeros(&[steps, hd]);
        for t in 0..steps {
            if t > 0 {
                let (prev, cur) = (h_seq.row(t - 1), hp.row_mut(t));
                match mask {
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
                let c_prev = if t > 0 { c_seq.row(t - 1)[j] } else { T::zero() };
                let c = a[hd + j] * c_prev + a[j] * a[2 * hd + j];
                c_seq.row_mut(t)[j] = c;
                let tc = c.tanh();
                tanh_c.row_mut(t)[j] = tc;
                h_seq.row_mut(t)[j] = a[3 * hd + j] * tc;
            }
        }
        let cache = LstmCache {
            x: x.clone(),
            gates,
            c: c_seq,
            tanh_c,
            hp,
            mask: mask.map(<[T]>::to_vec),
        };
        (h_seq, cache)
    }

    /// Backpropagates `dh: [T, hidden]` and returns `dx: [T, input]`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &LstmCache<T>,
        dh: &Tensor<T>,
        grads: &mut ParamStore<T>,
    ) -> Tensor<T> {
        let steps = dh.rows();
        let hd = self.hidden;
        let w_hh = store.get(self.w_hh).data();
        let mut da = Tensor::zeros(&[steps, 4 * hd]);
        let mut dh_next = vec![T::zero(); hd];
        let mut dc = vec![T::zero(); hd];
        let mut dh_tot = vec![T::zero(); hd];
        let zeros = vec![T::zero(); hd];
        for t in (0..steps).rev() {
            for j in 0..hd {
                dh_tot[j] = dh.row(t)[j] + dh_next[j];
            }
            let c_prev = if t > 0 { cache.c.row(t - 1) } else { &zeros };
            cell_backward(
                cache.gates.row(t),
                c_prev,
                cache.tanh_c.row(t),
                &dh_tot,
                &mut dc,
                da.row_mut(t),
            );
            dh_next.fill(T::zero());
            if t > 0 {
                matvec_t_acc(w_hh, hd, 0, da.row(t), &mut dh_next);
                if let Some(m) = &cache.mask {
                    for j in 0..hd {
                        dh_next[j] *= m[j];
                    }
                }
            }
        }
        gemm(
            da.matref().t(),
            cache.x.matref(),
            T::one(),
            grads.get_mut(self.w_ih).data_mut(),
        );
        gemm(
            da.matref().t(),
            cache.hp.matref(),
            T::one(),
            grads.get_mut(self.w_hh).data_mut(),
        );
        {
            let gb = grads.get_mut(self.b).data_mut();
            for t in 0..steps {
                for (g, d) in gb.iter_mut().zip(da.row(t)) {
                    *g += *d;
                }
            }
        }
        let mut dx = Tensor::zeros(&[steps, self.input]);
        gemm(da.matref(), store.get(self.w_ih).matref(), T::zero(), dx.data_mut());
        dx
    }
}

/// Forward and backward LSTMs over the same sequence; outputs are
/// `[h_fwd_t ; h_bwd_t]` per timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiLstm {
    pub fwd: LstmLayer,
    pub bwd: LstmLayer,
}

#[derive(Clone, Debug)]
pub struct BiLstmCache<T> {
    fwd: LstmCache<T>,
    bwd: LstmCache<T>,
}

impl BiLstm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        BiLstm {
            fwd: LstmLayer::new(store, &format!("{prefix}.fwd"), input, hidden, rng),
            bwd: LstmLayer::new(store, &format!("{prefix}.bwd"), input, hidden, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        masks: Option<(&[T], &[T])>,
    ) -> (Tensor<T>, BiLstmCache<T>) {
        let (hf, cf) = self.fwd.forward(store, x, masks.map(|m| m.0));
        let (hb_rev, cb) = self.bwd.forward(store, &x.reversed_rows(), masks.map(|m| m.1));
        let steps = x.rows();
        let hd = self.fwd.hidden;
        let mut out = Tensor::zeros(&[steps, 2 * hd]);
        for t in 0..steps {
            let row = out.row_mut(t);
            row[..hd].copy_from_slice(hf.row(t));
            row[hd..].copy_from_slice(hb_rev.row(steps - 1 - t));
        }
        (out, BiLstmCache { fwd: cf, bwd: cb })
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &BiLstmCache<T>,
        dy: &Tensor<T>,
        grads: &mut ParamStore<T>,
    ) -> Tensor<T> {
        let steps = dy.rows();
        let hd = self.fwd.hidden;
        let mut dhf = Tensor::zeros(&[steps, hd]);
        let mut dhb = Tensor::zeros(&[steps, hd]);
        for t in 0..steps {
            dhf.row_mut(t).copy_from_slice(&dy.row(t)[..hd]);
            dhb.row_mut(steps - 1 - t).copy_from_slice(&dy.row(t)[hd..]);
        }
        let mut dx = self.fwd.backward(store, &cache.fwd, &dhf, grads);
        let dx_rev = self.bwd.backward(store, &cache.bwd, &dhb, grads);
        for t in 0..steps {
            for (a, b) in dx.row_mut(t).iter_mut().zip(dx_rev.row(steps - 1 - t)) {
                *a += *b;
            }
        }
        dx
    }
}
