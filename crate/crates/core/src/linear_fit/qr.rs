//! Householder QR for tall dense matrices stored column by column.

use crate::scalar::Scalar;

/// Compact QR factorization: reflectors below the diagonal, R above it.
#[derive(Debug, Clone)]
pub struct Qr<T> {
    cols: Vec<Vec<T>>,
    rdiag: Vec<T>,
    beta: Vec<T>,
    rows: usize,
}

impl<T: Scalar> Qr<T> {
    pub fn new(mut cols: Vec<Vec<T>>) -> Self {
        let rows = cols.first().map_or(0, Vec::len);
        let l = cols.len();
        let mut rdiag = vec![T::zero(); l];
        let mut beta = vec![T::zero(); l];
        for j in 0..l.min(rows) {
            let norm = cols[j][j..].iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                continue;
            }
            let alpha = if cols[j][j] > T::zero() { -norm } else { norm };
            cols[j][j] = cols[j][j] - alpha;
            let vnorm2: T = cols[j][j..].iter().map(|&v| v * v).sum();
            let b = T::of(2.0) / vnorm2;
            beta[j] = b;
            rdiag[j] = alpha;
            let (head, tail) = cols.split_at_mut(j + 1);
            let v = &head[j][j..];
            for col in tail.iter_mut() {
                let s: T = v.iter().zip(&col[j..]).map(|(&a, &c)| a * c).sum();
                let f = b * s;
                for (c, &a) in col[j..].iter_mut().zip(v) {
                    *c = *c - f * a;
                }
            }
        }
        Self { cols, rdiag, beta, rows }
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    /// Columns whose pivot is negligible relative to the largest pivot.
    pub fn deficient_columns(&self, tol: T) -> Vec<usize> {
        let max = self.rdiag.iter().fold(T::zero(), |m, r| m.max(r.abs()));
        (0..self.ncols())
            .filter(|&j| j >= self.rows || max == T::zero() || self.rdiag[j].abs() <= tol * max)
            .collect()
    }

    fn r(&self, i: usize, j: usize) -> T {
        if i == j {
            self.rdiag[i]
        } else {
            self.cols[j][i]
        }
    }

    /// Applies Q' to `y` in place.
    pub fn apply_qt(&self, y: &mut [T]) {
        for j in 0..self.ncols().min(self.rows) {
            if self.beta[j] == T::zero() {
                continue;
            }
            let v = &self.cols[j][j..];
            let s: T = v.iter().zip(&y[j..]).map(|(&a, &c)| a * c).sum();
            let f = self.beta[j] * s;
            for (c, &a) in y[j..].iter_mut().zip(v) {
                *c = *c - f * a;
            }
        }
    }

    /// Least-squares coefficients for the (already scaled) response.
    pub fn solve(&self, y: &[T]) -> Vec<T> {
        let mut qty = y.to_vec();
        self.apply_qt(&mut qty);
        self.back_substitute(&qty[..self.ncols()])
    }

    /// Solves R b = z.
    pub fn back_substitute(&self, z: &[T]) -> Vec<T> {
        let l = self.ncols();
        let mut b = vec![T::zero(); l];
        for i in (0..l).rev() {
            let mut s = z[i];
            for j in i + 1..l {
                s = s - self.r(i, j) * b[j];
            }
            b[i] = s / self.rdiag[i];
        }
        b
    }

    /// Solves R' z = c.
    pub fn forward_substitute(&self, c: &[T]) -> Vec<T> {
        let l = self.ncols();
        let mut z = vec![T::zero(); l];
        for i in 0..l {
            let mut s = c[i];
            for j in 0..i {
                s = s - self.r(j, i) * z[j];
            }
            z[i] = s / self.rdiag[i];
        }
        z
    }

    /// (X'X)^{-1} c, using X'X = R'R.
    pub fn gram_inverse_times(&self, c: &[T]) -> Vec<T> {
        self.back_substitute(&self.forward_substitute(c))
    }
}
