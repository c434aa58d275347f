//! Differentiable building blocks with analytic gradients.

pub mod attention;
pub mod batchnorm;
pub mod dropout;
pub mod gradcheck;
pub mod lstm;
pub mod nin;
pub mod ops;
pub mod params;
pub mod real;
pub mod tensor;

pub use attention::{mlp_attention, MlpAttention};
pub use batchnorm::{batch_norm, BatchNorm};
pub use dropout::{target_char_dropout, variational_dropout_mask};
pub use lstm::{lstm_step, BiLstm, LstmLayer};
pub use nin::{nin_downsample, Nin};
pub use ops::label_smoothed_ce;
pub use params::{ParamId, ParamKind, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

/// Rescales every row of `[rows, dim]` to unit L2 norm. All-zero rows are
/// left untouched.
pub fn normalize_rows<T: Real>(table: &mut Tensor<T>) {
    for r in 0..table.rows() {
        let row = table.row_mut(r);
        let norm = row.iter().map(|x| *x * *x).sum::<T>().sqrt();
        if norm > T::zero() {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
}
