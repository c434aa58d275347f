//! Central finite-difference checks for hand-written backward passes.

use crate::nn::{ParamStore, Tensor};

pub const FD_STEP: f64 = 1e-5;
/// Magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(REL_FLOOR)
}

/// Worst mismatch over a set of checked coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, name: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", name());
        }
    }

    pub fn merge(mut self, other: GradReport) -> GradReport {
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self
    }
}

fn central(mut eval: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (eval(x + FD_STEP) - eval(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Compares `grads` with differences of `loss` over every weight entry.
pub fn check_params(
    store: &ParamStore<f64>,
    grads: &ParamStore<f64>,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradReport {
    let mut report = GradReport::default();
    let mut probe = store.clone();
    for id in store.weight_ids().collect::<Vec<_>>() {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            let numeric = central(
                |v| {
                    probe.get_mut(id).data_mut()[i] = v;
                    loss(&probe)
                },
                orig,
            );
            probe.get_mut(id).data_mut()[i] = orig;
            report.record(|| format!("{}[{i}]", store.name(id)), grads.get(id).data()[i], numeric);
        }
    }
    report
}

/// Compares an input gradient `dx` with differences of `loss` in `x`.
pub fn check_input(
    name: &str,
    x: &Tensor<f64>,
    dx: &Tensor<f64>,
    mut loss: impl FnMut(&Tensor<f64>) -> f64,
) -> GradReport {
    let mut report = GradReport::default();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        let numeric = central(
            |v| {
                probe.data_mut()[i] = v;
                loss(&probe)
            },
            orig,
        );
        probe.data_mut()[i] = orig;
        report.record(|| format!("{name}[{i}]"), dx.data()[i], numeric);
    }
    report
}
