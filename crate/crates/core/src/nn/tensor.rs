use crate::error::{Error, Result};
use crate::nn::Real;

/// Dense row-major array. Sequences are stored as `[time, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Stacks equally sized rows into a `[rows.len(), dim]` matrix.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::Dimension(format!(
                    "ragged rows: {} vs {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::from_vec(&[rows.len(), dim], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, k: T) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Reversed time order of a `[time, dim]` sequence.
    pub fn reversed_rows(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(&self.shape);
        let n = self.rows();
        for t in 0..n {
            out.row_mut(n - 1 - t).copy_from_slice(self.row(t));
        }
        out
    }

    pub fn matref(&self) -> MatRef<'_, T> {
        MatRef::new(&self.data, self.rows(), self.cols())
    }
}

/// Borrowed strided matrix view used as a GEMM operand.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Real> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols)
    }

    /// `rows × cols` block starting at `data[0]` with the given row stride.
    pub fn strided(data: &'a [T], rows: usize, cols: usize, row_stride: usize) -> Self {
        let m = MatRef {
            data,
            rows,
            cols,
            rs: row_stride,
            cs: 1,
        };
        m.check();
        m
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = a·b + beta·c` where `c` is a dense row-major `a.rows × b.cols` buffer.
pub fn gemm<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: operand views were bounds-checked on construction, `c` is m×n dense.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `y += W[:, off..off+x.len()] · x` for row-major `W` with `stride` columns.
#[inline]
pub fn matvec_acc<T: Real>(w: &[T], stride: usize, off: usize, x: &[T], y: &mut [T]) {
    let n = x.len();
    for (r, yi) in y.iter_mut().enumerate() {
        let row = &w[r * stride + off..r * stride + off + n];
        *yi += dot(row, x);
    }
}

/// `y += W[:, off..off+y.len()]ᵀ · x` for row-major `W` with `stride` columns.
#[inline]
pub fn matvec_t_acc<T: Real>(w: &[T], stride: usize, off: usize, x: &[T], y: &mut [T]) {
    let n = y.len();
    for (r, &xr) in x.iter().enumerate() {
        if xr != T::zero() {
            axpy(xr, &w[r * stride + off..r * stride + off + n], y);
        }
    }
}

/// `W[:, off..off+x.len()] += a ⊗ x`.
#[inline]
pub fn outer_acc<T: Real>(w: &mut [T], stride: usize, off: usize, a: &[T], x: &[T]) {
    let n = x.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar != T::zero() {
            axpy(ar, x, &mut w[r * stride + off..r * stride + off + n]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a = Tensor::<f64>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 3], vec![0.5, -1., 2., 1., 0., -2.]).unwrap();
        // a · bᵀ
        let mut c = vec![0.0; 4];
        gemm(a.matref(), b.matref().t(), 0.0, &mut c);
        assert_eq!(c, vec![4.5, -5.0, 9.0, -8.0]);
        // aᵀ · b accumulated twice
        let mut d = vec![0.0; 9];
        gemm(a.matref().t(), b.matref(), 0.0, &mut d);
        gemm(a.matref().t(), b.matref(), 1.0, &mut d);
        assert_eq!(d[0], 2.0 * (1.0 * 0.5 + 4.0 * 1.0));
    }

    #[test]
    fn strided_view_selects_columns() {
        let w = Tensor::<f64>::from_vec(&[2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let x = [1.0, 1.0];
        let mut y = vec![0.0; 2];
        matvec_acc(w.data(), 4, 2, &x, &mut y);
        assert_eq!(y, vec![7.0, 15.0]);
        let view = MatRef::strided(&w.data()[1..], 2, 2, 4);
        let mut c = vec![0.0; 4];
        let eye = Tensor::<f64>::from_vec(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
        gemm(view, eye.matref(), 0.0, &mut c);
        assert_eq!(c, vec![2., 3., 6., 7.]);
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f32> = (0..19).map(|i| i as f32).collect();
        let b = vec![1.0f32; 19];
        assert_eq!(dot(&a, &b), 171.0);
    }
}
