use serde::{Deserialize, Serialize};

use crate::domain::Grid;
use crate::error::{check_len, Error, Result};

/// Uniform time grid on `[0, T]` with `nt` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_final: f64,
    pub nt: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, nt: usize) -> Result<Self> {
        if !(t_final.is_finite() && t_final > 0.0) || nt == 0 {
            return Err(Error::InvalidSpec(format!("bad time grid T={t_final}, Nt={nt}")));
        }
        Ok(TimeGrid { t_final, nt })
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.nt as f64
    }

    pub fn levels(&self) -> usize {
        self.nt + 1
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    /// Trapezoidal weight of level `n`.
    pub fn weight(&self, n: usize) -> f64 {
        let dt = self.dt();
        if n == 0 || n == self.nt {
            0.5 * dt
        } else {
            dt
        }
    }
}

macro_rules! level_data {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            pub time: TimeGrid,
            width: usize,
            data: Vec<f64>,
        }

        impl $name {
            pub fn zeros(time: TimeGrid, width: usize) -> Self {
                $name { time, width, data: vec![0.0; time.levels() * width] }
            }

            /// Builds from row-major (time-outer) values.
            pub fn from_vec(time: TimeGrid, width: usize, data: Vec<f64>) -> Result<Self> {
                check_len(stringify!($name), time.levels() * width, data.len())?;
                Ok($name { time, width, data })
            }

            pub fn from_fn(time: TimeGrid, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
                let mut data = Vec::with_capacity(time.levels() * width);
                for n in 0..time.levels() {
                    for k in 0..width {
                        data.push(f(n, k));
                    }
                }
                $name { time, width, data }
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn levels(&self) -> usize {
                self.time.levels()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.data
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.data
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.data
            }

            pub fn level(&self, n: usize) -> &[f64] {
                &self.data[n * self.width..(n + 1) * self.width]
            }

            pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
                &mut self.data[n * self.width..(n + 1) * self.width]
            }

            pub fn scaled(&self, c: f64) -> Self {
                let mut out = self.clone();
                out.data.iter_mut().for_each(|v| *v *= c);
                out
            }

            /// `self += c * other`.
            pub fn axpy(&mut self, c: f64, other: &Self) {
                debug_assert_eq!(self.data.len(), other.data.len());
                for (a, b) in self.data.iter_mut().zip(&other.data) {
                    *a += c * b;
                }
            }

            pub fn add(&self, other: &Self) -> Self {
                let mut out = self.clone();
                out.axpy(1.0, other);
                out
            }

            pub fn sub(&self, other: &Self) -> Self {
                let mut out = self.clone();
                out.axpy(-1.0, other);
                out
            }

            pub fn sup_norm(&self) -> f64 {
                self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|v| v.is_finite())
            }

            pub fn check_compatible(&self, other: &Self) -> Result<()> {
                check_len(concat!(stringify!($name), " levels"), self.levels(), other.levels())?;
                check_len(concat!(stringify!($name), " width"), self.width, other.width)
            }
        }
    };
}

level_data!(
    /// Scalar field on `(Nt+1)` time levels times the interior nodes.
    SpaceTimeField
);
level_data!(
    /// Samples on `(Nt+1)` time levels times the boundary quadrature nodes.
    BoundaryTrace
);
level_data!(
    /// Control values on `(Nt+1)` time levels times the control-region nodes.
    Control
);

impl SpaceTimeField {
    /// `sum_n w_n sum_k hx hy a b` (trapezoidal in time).
    pub fn inner(&self, other: &Self, grid: &Grid) -> f64 {
        weighted_inner(&self.time, self.width, &self.data, &other.data, |_| grid.cell_area())
    }

    pub fn norm(&self, grid: &Grid) -> f64 {
        self.inner(self, grid).sqrt()
    }

    /// Nodewise product with a spatial mask.
    pub fn masked(&self, mask: &[f64]) -> Self {
        let mut out = self.clone();
        for n in 0..out.levels() {
            for (v, m) in out.level_mut(n).iter_mut().zip(mask) {
                *v *= m;
            }
        }
        out
    }

    pub fn terminal(&self) -> TerminalState {
        TerminalState(self.level(self.time.nt).to_vec())
    }

    /// Reverses the time axis.
    pub fn time_reversed(&self) -> Self {
        let nt = self.time.nt;
        let w = self.width;
        SpaceTimeField::from_fn(self.time, w, |n, k| self.data[(nt - n) * w + k])
    }
}

impl BoundaryTrace {
    /// `sum_n w_n sum_p dσ_p a b`.
    pub fn inner(&self, other: &Self, grid: &Grid) -> f64 {
        let pts = &grid.boundary.points;
        weighted_inner(&self.time, self.width, &self.data, &other.data, |p| pts[p].weight)
    }

    pub fn norm(&self, grid: &Grid) -> f64 {
        self.inner(self, grid).sqrt()
    }
}

impl Control {
    pub fn zeros_on(grid: &Grid, time: TimeGrid) -> Self {
        Control::zeros(time, grid.omega_nodes.len())
    }

    /// `sum_n w_n sum_k hx hy a b` over control nodes.
    pub fn inner(&self, other: &Self, grid: &Grid) -> f64 {
        weighted_inner(&self.time, self.width, &self.data, &other.data, |_| grid.cell_area())
    }

    pub fn norm(&self, grid: &Grid) -> f64 {
        self.inner(self, grid).sqrt()
    }

    /// Zero extension to the full grid.
    pub fn embed(&self, grid: &Grid) -> SpaceTimeField {
        let mut out = SpaceTimeField::zeros(self.time, grid.n_nodes());
        for n in 0..self.levels() {
            let src = self.level(n);
            let dst = out.level_mut(n);
            for (v, &k) in src.iter().zip(&grid.omega_nodes) {
                dst[k] = *v;
            }
        }
        out
    }

    /// Restriction of a full field to the control nodes.
    pub fn restrict(field: &SpaceTimeField, grid: &Grid) -> Control {
        let w = grid.omega_nodes.len();
        let mut out = Control::zeros(field.time, w);
        for n in 0..field.levels() {
            let src = field.level(n);
            for (dst, &k) in out.level_mut(n).iter_mut().zip(&grid.omega_nodes) {
                *dst = src[k];
            }
        }
        out
    }
}

fn weighted_inner(time: &TimeGrid, width: usize, a: &[f64], b: &[f64], space: impl Fn(usize) -> f64) -> f64 {
    let mut total = 0.0;
    for n in 0..time.levels() {
        let row_a = &a[n * width..(n + 1) * width];
        let row_b = &b[n * width..(n + 1) * width];
        let s: f64 = row_a.iter().zip(row_b).enumerate().map(|(k, (x, y))| space(k) * x * y).sum();
        total += time.weight(n) * s;
    }
    total
}

/// State at the final time.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalState(pub Vec<f64>);

impl TerminalState {
    pub fn zeros(n: usize) -> Self {
        TerminalState(vec![0.0; n])
    }

    pub fn inner(&self, other: &Self, grid: &Grid) -> f64 {
        grid.cell_area() * self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn norm(&self, grid: &Grid) -> f64 {
        self.inner(self, grid).sqrt()
    }

    pub fn sub(&self, other: &Self) -> Self {
        TerminalState(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scaled(&self, c: f64) -> Self {
        TerminalState(self.0.iter().map(|a| c * a).collect())
    }
}
