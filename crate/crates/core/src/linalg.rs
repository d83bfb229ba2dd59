//! Dense linear algebra on desk-scale square matrices: the little that the
//! chain oracles need (LU solves, matrix exponentials, powers), hand-rolled so
//! the oracle path stays auditable end to end.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is singular to working precision")]
    Singular,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Row-major dense square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    n: usize,
    a: Vec<f64>,
}

impl Mat {
    pub fn zeros(n: usize) -> Self {
        Mat {
            n,
            a: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n);
        for i in 0..n {
            m.a[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let n = rows.len();
        let mut a = Vec::with_capacity(n * n);
        for r in rows {
            if r.len() != n {
                return Err(LinalgError::Dimension(format!(
                    "row of length {} in a {n}-row matrix",
                    r.len()
                )));
            }
            a.extend_from_slice(r);
        }
        Ok(Mat { n, a })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.n..(i + 1) * self.n]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Transposed product `A^T x`; applies the dual/adjoint action.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let xi = x[i];
            for j in 0..self.n {
                y[j] += self.a[i * self.n + j] * xi;
            }
        }
        y
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut c = Mat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self.a[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    c.a[i * n + j] += aik * other.a[k * n + j];
                }
            }
        }
        c
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            n: self.n,
            a: self.a.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!(self.n, other.n);
        Mat {
            n: self.n,
            a: self.a.iter().zip(&other.a).map(|(x, y)| x + y).collect(),
        }
    }

    /// `A + diag(d)`.
    pub fn add_diag(&self, d: &[f64]) -> Mat {
        assert_eq!(d.len(), self.n);
        let mut m = self.clone();
        for i in 0..self.n {
            m.a[i * self.n + i] += d[i];
        }
        m
    }

    /// Max absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Solve `A x = b` by LU with partial pivoting.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut lu = self.a.clone();
        let mut x = b.to_vec();
        let mut piv: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let (mut best, mut best_abs) = (col, lu[piv[col] * n + col].abs());
            for r in col + 1..n {
                let v = lu[piv[r] * n + col].abs();
                if v > best_abs {
                    best = r;
                    best_abs = v;
                }
            }
            if best_abs < 1e-300 {
                return Err(LinalgError::Singular);
            }
            piv.swap(col, best);
            let prow = piv[col];
            for r in col + 1..n {
                let row = piv[r];
                let factor = lu[row * n + col] / lu[prow * n + col];
                lu[row * n + col] = factor;
                for c in col + 1..n {
                    lu[row * n + c] -= factor * lu[prow * n + c];
                }
                x[row] -= factor * x[prow];
            }
        }
        let mut out = vec![0.0; n];
        for col in (0..n).rev() {
            let row = piv[col];
            let mut v = x[row];
            for c in col + 1..n {
                v -= lu[row * n + c] * out[c];
            }
            out[col] = v / lu[row * n + col];
        }
        Ok(out)
    }

    /// Integer matrix power by repeated squaring.
    pub fn pow(&self, mut p: u64) -> Mat {
        let mut base = self.clone();
        let mut acc = Mat::identity(self.n);
        while p > 0 {
            if p & 1 == 1 {
                acc = acc.matmul(&base);
            }
            p >>= 1;
            if p > 0 {
                base = base.matmul(&base);
            }
        }
        acc
    }

    /// Matrix exponential by shifted Taylor series with scaling and squaring.
    ///
    /// The diagonal shift makes the scaled matrix entrywise nonnegative for
    /// Metzler inputs (generators, tilted generators), so every Taylor term is
    /// nonnegative and the series is free of cancellation. Series and squaring
    /// tolerances are far below the 1e-12 the chain oracles budget for.
    pub fn expm(&self) -> Mat {
        let n = self.n;
        let shift = (0..n)
            .map(|i| -self.get(i, i))
            .fold(0.0f64, f64::max)
            .max(0.0);
        let shifted = self.add_diag(&vec![shift; n]);
        // Scale so the series argument has small norm.
        let norm = shifted.inf_norm();
        let squarings = if norm <= 0.5 {
            0
        } else {
            (norm / 0.5).log2().ceil() as u32
        };
        let c = shifted.scale(0.5f64.powi(squarings as i32));
        let mut term = Mat::identity(n);
        let mut sum = Mat::identity(n);
        for k in 1..200 {
            term = term.matmul(&c).scale(1.0 / k as f64);
            sum = sum.add(&term);
            if term.max_abs() < 1e-22 * sum.max_abs().max(1.0) {
                break;
            }
        }
        for _ in 0..squarings {
            sum = sum.matmul(&sum);
        }
        // exp(A) = exp(-shift) * exp(A + shift I)
        sum.scale((-shift).exp())
    }
}
