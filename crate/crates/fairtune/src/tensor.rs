//! Dense row-major f64 matrices and the few numeric primitives the model
//! needs: matrix products (plain and transposed), row softmax, and a
//! symmetric eigensolver for the PCA path.

use boxmuller::gaussian;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    /// Gaussian-initialized matrix with the given standard deviation.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for v in &mut m.data {
            *v = gaussian(rng) * std;
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// self · rhs
    pub fn mul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "mul shape mismatch");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        out.add_prod(self, rhs);
        out
    }

    /// self · rhsᵀ
    pub fn mul_transpose(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.cols, "mul_transpose shape mismatch");
        let mut out = Mat::zeros(self.rows, rhs.rows);
        out.add_prod_tb(self, rhs);
        out
    }

    /// self += a · b
    pub fn add_prod(&mut self, a: &Mat, b: &Mat) {
        assert_eq!(a.cols, b.rows);
        assert_eq!(self.rows, a.rows);
        assert_eq!(self.cols, b.cols);
        for i in 0..a.rows {
            let arow = a.row(i);
            let orow = &mut self.data[i * b.cols..(i + 1) * b.cols];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = b.row(k);
                for (j, &bkj) in brow.iter().enumerate() {
                    orow[j] += aik * bkj;
                }
            }
        }
    }

    /// self += aᵀ · b
    pub fn add_prod_ta(&mut self, a: &Mat, b: &Mat) {
        assert_eq!(a.rows, b.rows);
        assert_eq!(self.rows, a.cols);
        assert_eq!(self.cols, b.cols);
        for k in 0..a.rows {
            let arow = a.row(k);
            let brow = b.row(k);
            for (i, &aki) in arow.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                let orow = &mut self.data[i * b.cols..(i + 1) * b.cols];
                for (j, &bkj) in brow.iter().enumerate() {
                    orow[j] += aki * bkj;
                }
            }
        }
    }

    /// self += a · bᵀ
    pub fn add_prod_tb(&mut self, a: &Mat, b: &Mat) {
        assert_eq!(a.cols, b.cols);
        assert_eq!(self.rows, a.rows);
        assert_eq!(self.cols, b.rows);
        for i in 0..a.rows {
            let arow = a.row(i);
            for j in 0..b.rows {
                let brow = b.row(j);
                let mut acc = 0.0;
                for (x, y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                *self.at_mut(i, j) += acc;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
    }
}

/// Free-standing Gaussian sampling so `Mat` does not depend on a
/// distributions crate: Box-Muller on top of the caller's `Rng`.
mod boxmuller {
    use rand::Rng;

    pub fn gaussian(rng: &mut impl Rng) -> f64 {
        // open interval keeps ln() finite
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// In-place numerically stable softmax of a slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// log(Σ exp(row)) with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching orthonormal
/// eigenvectors as the columns of the returned matrix.
pub fn symmetric_eigen(m: &Mat) -> (Vec<f64>, Mat) {
    assert_eq!(m.rows, m.cols, "symmetric_eigen needs a square matrix");
    let n = m.rows;
    let mut a = m.clone();
    let mut v = Mat::zeros(n, n);
    for i in 0..n {
        *v.at_mut(i, i) = 1.0;
    }

    let off = |a: &Mat| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.at(i, j) * a.at(i, j);
                }
            }
        }
        s
    };
    let norm: f64 = a.data.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);

    for _sweep in 0..100 {
        if off(&a).sqrt() <= 1e-14 * norm {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.at(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a.at(p, p);
                let aqq = a.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    *a.at_mut(k, p) = c * akp - s * akq;
                    *a.at_mut(k, q) = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a.at(p, k);
                    let aqk = a.at(q, k);
                    *a.at_mut(p, k) = c * apk - s * aqk;
                    *a.at_mut(q, k) = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    *v.at_mut(k, p) = c * vkp - s * vkq;
                    *v.at_mut(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.at(j, j).partial_cmp(&a.at(i, i)).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.at(i, i)).collect();
    let mut vectors = Mat::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            *vectors.at_mut(r, new_col) = v.at(r, old_col);
        }
    }
    (eigenvalues, vectors)
}
