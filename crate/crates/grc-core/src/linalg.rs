//! Small dense row-major matrix used throughout the model code.
//!
//! Training and numerical oracles run in `f64`; the serving path runs the
//! same routines in `f32`. The `Scalar` trait is the only abstraction point.

use num_traits::Float;

/// Element type for model math. Implemented for `f32` and `f64`.
pub trait Scalar: Float + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S = f64> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "mat data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    /// Stack a slice of equal-length rows into a matrix.
    pub fn from_rows(rows: &[&[S]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// `self (n×k) · other (k×m)`.
    pub fn matmul(&self, other: &Mat<S>) -> Mat<S> {
        assert_eq!(self.cols, other.rows, "matmul inner dim");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    /// Computes `self^T · other` where `self: (k×n)`, `other: (k×m)`,
    /// result `(n×m)`. Used for weight grads.
    pub fn matmul_tn(&self, other: &Mat<S>) -> Mat<S> {
        assert_eq!(self.rows, other.rows, "matmul_tn outer dim");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    /// Computes `self · other^T` where `self: (n×k)`, `other: (m×k)`,
    /// result `(n×m)`. Used to push grads through a linear layer.
    pub fn matmul_nt(&self, other: &Mat<S>) -> Mat<S> {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dim");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, other.row(j));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat<S>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, s: S) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    /// Append the rows of `other` (same column count) below `self`.
    pub fn append_rows(&mut self, other: &Mat<S>) {
        assert_eq!(self.cols, other.cols, "append_rows column mismatch");
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn map_to<T: Scalar>(&self) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub fn l2_norm<S: Scalar>(v: &[S]) -> S {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        let a = Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![1.0, 0.5, -1.0, 2.0, 0.0, 3.0]);
        let c = a.matmul_tn(&b); // (2×3)·(3×2) → 2×2
        // a^T = [[1,3,5],[2,4,6]]
        assert_eq!(c.data(), &[-2.0, 21.5, -2.0, 27.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(2, 3, vec![1.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let c = a.matmul_nt(&b);
        assert_eq!(c.data(), &[6.0, 2.0, 15.0, 5.0]);
    }
}
