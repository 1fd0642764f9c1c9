//! Dense row-major `f64` matrices and the handful of kernels the model needs.

use rand::Rng;

use crate::error::{Error, Result};

/// A dense row-major matrix. Vectors are stored as `1 × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Tensor::from_vec", (rows, cols), (data.len(), 1)));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Builds a `1 × n` row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// Stacks equally sized rows. An empty slice yields a `0 × 0` tensor.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("Tensor::from_rows", (1, cols), (1, row.len())));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform Glorot initialisation, `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of all entries.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copies of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        Tensor {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Matrix-vector product `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape("matvec", (self.cols, 1), (x.len(), 1)));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `self · weightᵀ` restricted to the column window
    /// `weight[:, col..col + self.cols]`. This is the batched form of applying
    /// one block of a weight acting on a concatenated input.
    pub fn matmul_window_t(&self, weight: &Tensor, col: usize) -> Result<Tensor> {
        if col + self.cols > weight.cols {
            return Err(Error::shape(
                "matmul_window_t",
                (weight.rows, col + self.cols),
                weight.shape(),
            ));
        }
        let mut out = Tensor::zeros(self.rows, weight.rows);
        gemm_x_wt(self, weight, col, &mut out, 0.0);
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = beta·out + x · weight[:, col..col+x.cols]ᵀ`.
pub(crate) fn gemm_x_wt(x: &Tensor, weight: &Tensor, col: usize, out: &mut Tensor, beta: f64) {
    let (n, k) = x.shape();
    let m = weight.rows;
    assert!(col + k <= weight.cols);
    assert_eq!(out.shape(), (n, m));
    if n == 0 || m == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            out.data.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: the strides describe x (n×k, row-major), the transposed weight
    // window (k×m) and out (n×m); the asserts above bound every access.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            x.data.as_ptr(),
            k as isize,
            1,
            weight.data.as_ptr().add(col),
            1,
            weight.cols as isize,
            beta,
            out.data.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `out += grad_out · weight[:, col..col+out.cols]`, the input gradient of
/// [`gemm_x_wt`].
pub(crate) fn gemm_grad_x(grad_out: &Tensor, weight: &Tensor, col: usize, out: &mut Tensor) {
    let (n, m) = grad_out.shape();
    let k = out.cols;
    assert_eq!(weight.rows, m);
    assert!(col + k <= weight.cols);
    assert_eq!(out.rows, n);
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    // SAFETY: grad_out is n×m, the weight window is m×k with row stride
    // weight.cols, out is n×k; all bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            k,
            1.0,
            grad_out.data.as_ptr(),
            m as isize,
            1,
            weight.data.as_ptr().add(col),
            weight.cols as isize,
            1,
            1.0,
            out.data.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `grad_w[:, col..col+x.cols] += grad_outᵀ · x`, the weight gradient of
/// [`gemm_x_wt`].
pub(crate) fn gemm_grad_w(grad_out: &Tensor, x: &Tensor, col: usize, grad_w: &mut Tensor) {
    let (n, m) = grad_out.shape();
    let k = x.cols;
    assert_eq!(x.rows, n);
    assert_eq!(grad_w.rows, m);
    assert!(col + k <= grad_w.cols);
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    let ldw = grad_w.cols as isize;
    // SAFETY: grad_outᵀ is read as m×n via swapped strides, x is n×k, and the
    // destination window is m×k inside grad_w; bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            grad_out.data.as_ptr(),
            1,
            m as isize,
            x.data.as_ptr(),
            k as isize,
            1,
            1.0,
            grad_w.data.as_mut_ptr().add(col),
            ldw,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_window(x: &Tensor, w: &Tensor, col: usize) -> Tensor {
        let mut out = Tensor::zeros(x.rows(), w.rows());
        for i in 0..x.rows() {
            for j in 0..w.rows() {
                let mut s = 0.0;
                for k in 0..x.cols() {
                    s += x.get(i, k) * w.get(j, col + k);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn seq(rows: usize, cols: usize, start: f64) -> Tensor {
        let data = (0..rows * cols).map(|i| start + 0.37 * i as f64 - 0.1 * (i % 7) as f64).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn windowed_product_matches_naive() {
        let x = seq(5, 3, -1.0);
        let w = seq(4, 7, 0.5);
        let got = x.matmul_window_t(&w, 2).unwrap();
        let want = naive_window(&x, &w, 2);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_kernels_match_naive() {
        let x = seq(5, 3, -1.0);
        let w = seq(4, 7, 0.5);
        let g = seq(5, 4, 0.2);

        let mut gx = Tensor::zeros(5, 3);
        gemm_grad_x(&g, &w, 2, &mut gx);
        for i in 0..5 {
            for k in 0..3 {
                let want: f64 = (0..4).map(|j| g.get(i, j) * w.get(j, 2 + k)).sum();
                assert!((gx.get(i, k) - want).abs() < 1e-12);
            }
        }

        let mut gw = Tensor::zeros(4, 7);
        gemm_grad_w(&g, &x, 2, &mut gw);
        for j in 0..4 {
            for c in 0..7 {
                let want: f64 = if (2..5).contains(&c) {
                    (0..5).map(|i| g.get(i, j) * x.get(i, c - 2)).sum()
                } else {
                    0.0
                };
                assert!((gw.get(j, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_out_of_bounds_is_shape_error() {
        let x = Tensor::zeros(2, 4);
        let w = Tensor::zeros(3, 5);
        assert!(matches!(x.matmul_window_t(&w, 2), Err(Error::ShapeMismatch { .. })));
    }
}
