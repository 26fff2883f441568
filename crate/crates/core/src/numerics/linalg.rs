//! LU factorisation with partial pivoting and a Hager-style 1-norm
//! condition estimate.

use super::Matrix;
use crate::error::{Error, Result};

/// Solves above this condition estimate are refused.
pub const MAX_CONDITION: f64 = 1e12;

/// Packed LU factors of a square matrix, `P·A = L·U`.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    norm1: f64,
}

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Lu> {
        let (n, m) = a.shape();
        if n != m {
            return Err(Error::shape("Lu::factor", format!("{n}x{m} is not square")));
        }
        a.ensure_finite("linear system")?;
        let mut lu = a.as_slice().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.max_abs();
        if scale == 0.0 && n > 0 {
            return Err(Error::Singular);
        }
        let tiny = scale * f64::EPSILON * n as f64;

        for k in 0..n {
            let (pivot_row, pivot_abs) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot_abs <= tiny {
                return Err(Error::Singular);
            }
            if pivot_row != k {
                for j in 0..n {
                    lu.swap(k * n + j, pivot_row * n + j);
                }
                perm.swap(k, pivot_row);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }

        let norm1 = (0..n)
            .map(|j| (0..n).map(|i| a[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        Ok(Lu { n, lu, perm, norm1 })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        x
    }

    /// Solves `Aᵀ x = b`.
    fn solve_transposed_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ w = b, Lᵀ v = w, x = Pᵀ v.
        let mut w = b.to_vec();
        for i in 0..n {
            let mut s = w[i];
            for j in 0..i {
                s -= self.lu[j * n + i] * w[j];
            }
            w[i] = s / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = w[i];
            for j in i + 1..n {
                s -= self.lu[j * n + i] * w[j];
            }
            w[i] = s;
        }
        let mut x = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = w[k];
        }
        x
    }

    fn solve_columns(&self, b: &Matrix, transposed: bool) -> Result<Matrix> {
        if b.rows() != self.n {
            return Err(Error::shape(
                "solve",
                format!("system has {} rows, right-hand side {}", self.n, b.rows()),
            ));
        }
        let mut out = Matrix::zeros(b.rows(), b.cols());
        let mut col = vec![0.0; self.n];
        for j in 0..b.cols() {
            for (i, c) in col.iter_mut().enumerate() {
                *c = b[(i, j)];
            }
            let x = if transposed {
                self.solve_transposed_vec(&col)
            } else {
                self.solve_vec(&col)
            };
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }

    /// `A⁻¹ B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        self.solve_columns(b, false)
    }

    /// `A⁻ᵀ B`.
    pub fn solve_transposed(&self, b: &Matrix) -> Result<Matrix> {
        self.solve_columns(b, true)
    }

    /// Estimate of `‖A‖₁ · ‖A⁻¹‖₁` (Hager's method, at most five sweeps).
    pub fn condition_estimate(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 1.0;
        }
        let mut x = vec![1.0 / n as f64; n];
        let mut estimate = 0.0;
        for _ in 0..5 {
            let y = self.solve_vec(&x);
            estimate = y.iter().map(|v| v.abs()).sum::<f64>();
            let xi: Vec<f64> = y.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
            let z = self.solve_transposed_vec(&xi);
            let (j, zmax) = z
                .iter()
                .enumerate()
                .map(|(i, v)| (i, v.abs()))
                .fold((0, -1.0), |b, c| if c.1 > b.1 { c } else { b });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            if zmax <= ztx {
                break;
            }
            x = vec![0.0; n];
            x[j] = 1.0;
        }
        self.norm1 * estimate
    }
}

/// Solves `A X = B`, refusing singular or badly conditioned systems.
pub fn solve_linear(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let lu = Lu::factor(a)?;
    let cond = lu.condition_estimate();
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::IllConditioned(cond));
    }
    lu.solve(b)
}
