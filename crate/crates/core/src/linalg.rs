//! Banded Cholesky factorization and the five-point Dirichlet Laplacian.

use crate::error::{Error, Result};

/// Cholesky factor `L` of a symmetric positive definite band matrix, stored row-wise
/// with `bw + 1` slots per row (sub-diagonals then diagonal).
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    /// Factorizes the matrix whose entry `(i, j)`, `j <= i`, is given by `entry`.
    /// Entries with `i - j > bw` must vanish.
    pub fn factor(n: usize, bw: usize, entry: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = entry(i, j);
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    s -= l[i * w + (k + bw - i)] * l[j * w + (k + bw - j)];
                }
                if j == i {
                    if !(s > 0.0) {
                        return Err(Error::SolverFailure(format!(
                            "matrix not positive definite at row {i}"
                        )));
                    }
                    l[i * w + bw] = s.sqrt();
                } else {
                    l[i * w + (j + bw - i)] = s / l[j * w + bw];
                }
            }
        }
        Ok(BandCholesky { n, bw, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Overwrites `x` with `A^{-1} x`.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        debug_assert_eq!(x.len(), n);
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let row = &self.l[i * w..(i + 1) * w];
            let mut s = x[i];
            for (j, xj) in x.iter().enumerate().take(i).skip(j0) {
                s -= row[j + bw - i] * xj;
            }
            x[i] = s / row[bw];
        }
        for i in (0..n).rev() {
            x[i] /= self.l[i * w + bw];
            let xi = x[i];
            let j0 = i.saturating_sub(bw);
            let row = &self.l[i * w..(i + 1) * w];
            for j in j0..i {
                x[j] -= row[j + bw - i] * xi;
            }
        }
    }
}

/// Five-point Laplacian with homogeneous Dirichlet data on an `nx * ny` interior grid.
#[derive(Debug, Clone, Copy)]
pub struct Laplacian {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
}

impl Laplacian {
    /// `out = Δ_h u`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        let cx = 1.0 / (self.hx * self.hx);
        let cy = 1.0 / (self.hy * self.hy);
        for j in 0..ny {
            for i in 0..nx {
                let k = j * nx + i;
                let c = u[k];
                let w = if i > 0 { u[k - 1] } else { 0.0 };
                let e = if i + 1 < nx { u[k + 1] } else { 0.0 };
                let s = if j > 0 { u[k - nx] } else { 0.0 };
                let n = if j + 1 < ny { u[k + nx] } else { 0.0 };
                out[k] = cx * (w - 2.0 * c + e) + cy * (s - 2.0 * c + n);
            }
        }
    }

    pub fn apply_new(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        self.apply(u, &mut out);
        out
    }

    /// Entry `(i, j)` of `I - c Δ_h` (lower triangle access).
    pub fn shifted_entry(&self, c: f64, i: usize, j: usize) -> f64 {
        let cx = 1.0 / (self.hx * self.hx);
        let cy = 1.0 / (self.hy * self.hy);
        if i == j {
            1.0 + c * 2.0 * (cx + cy)
        } else if i == j + 1 && !i.is_multiple_of(self.nx) {
            -c * cx
        } else if i == j + self.nx {
            -c * cy
        } else {
            0.0
        }
    }

    /// Closed-form eigenpair `(λ, φ)` of `-Δ_h` for the sine mode `(p, q)`, `p, q >= 1`.
    pub fn eigenpair(&self, p: usize, q: usize) -> (f64, Vec<f64>) {
        use std::f64::consts::PI;
        let lx = self.hx * (self.nx + 1) as f64;
        let ly = self.hy * (self.ny + 1) as f64;
        let sx = (p as f64 * PI * self.hx / (2.0 * lx)).sin();
        let sy = (q as f64 * PI * self.hy / (2.0 * ly)).sin();
        let lambda = 4.0 * sx * sx / (self.hx * self.hx) + 4.0 * sy * sy / (self.hy * self.hy);
        let mut phi = vec![0.0; self.nx * self.ny];
        for j in 0..self.ny {
            for i in 0..self.nx {
                let x = (i + 1) as f64 * self.hx;
                let y = (j + 1) as f64 * self.hy;
                phi[j * self.nx + i] = (p as f64 * PI * x / lx).sin() * (q as f64 * PI * y / ly).sin();
            }
        }
        (lambda, phi)
    }
}
