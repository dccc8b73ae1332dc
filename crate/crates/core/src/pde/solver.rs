use super::field::{SpaceTimeField, TimeGrid};
use crate::domain::Grid;
use crate::error::Result;
use crate::linalg::{BandCholesky, Laplacian};

/// Crank–Nicolson marcher for `u_t - Δu = f` on a fixed grid and time grid.
///
/// The implicit matrix `I - (dt/2) Δ_h` is factorized once. Every march has an
/// exact algebraic transpose, obtained by running the linear steps in reverse.
#[derive(Debug, Clone)]
pub struct HeatSolver {
    lap: Laplacian,
    time: TimeGrid,
    chol: BandCholesky,
}

impl HeatSolver {
    pub fn new(grid: &Grid, time: TimeGrid) -> Result<Self> {
        let lap = Laplacian {
            nx: grid.nx,
            ny: grid.ny,
            hx: grid.hx,
            hy: grid.hy,
        };
        let half = 0.5 * time.dt();
        let chol = BandCholesky::factor(grid.n_nodes(), grid.nx, |i, j| lap.shifted_entry(half, i, j))?;
        Ok(HeatSolver { lap, time, chol })
    }

    pub fn time(&self) -> TimeGrid {
        self.time
    }

    pub fn laplacian(&self) -> &Laplacian {
        &self.lap
    }

    /// `out = (I + (dt/2) Δ_h) u`.
    fn explicit_half(&self, u: &[f64], out: &mut [f64]) {
        self.lap.apply(u, out);
        let half = 0.5 * self.time.dt();
        for (o, v) in out.iter_mut().zip(u) {
            *o = v + half * *o;
        }
    }

    /// Forward march from a zero initial state.
    pub fn forward(&self, source: &SpaceTimeField) -> SpaceTimeField {
        let n = source.width();
        let nt = self.time.nt;
        let half = 0.5 * self.time.dt();
        let mut y = SpaceTimeField::zeros(self.time, n);
        let mut rhs = vec![0.0; n];
        for step in 0..nt {
            self.explicit_half(y.level(step), &mut rhs);
            let (f0, f1) = (source.level(step), source.level(step + 1));
            for k in 0..n {
                rhs[k] += half * (f0[k] + f1[k]);
            }
            self.chol.solve_in_place(&mut rhs);
            y.level_mut(step + 1).copy_from_slice(&rhs);
        }
        y
    }

    /// Algebraic transpose of [`HeatSolver::forward`].
    pub fn forward_transpose(&self, adj: &SpaceTimeField) -> SpaceTimeField {
        let n = adj.width();
        let nt = self.time.nt;
        let half = 0.5 * self.time.dt();
        // b[m] = A^{-1} a[m] for m = 1..=nt; b[0] = b[nt+1] = 0.
        let mut b = SpaceTimeField::zeros(self.time, n);
        let mut a = adj.level(nt).to_vec();
        self.chol.solve_in_place(&mut a);
        b.level_mut(nt).copy_from_slice(&a);
        let mut tmp = vec![0.0; n];
        for m in (1..nt).rev() {
            self.explicit_half(b.level(m + 1), &mut tmp);
            for (t, v) in tmp.iter_mut().zip(adj.level(m)) {
                *t += v;
            }
            self.chol.solve_in_place(&mut tmp);
            b.level_mut(m).copy_from_slice(&tmp);
        }
        let mut out = SpaceTimeField::zeros(self.time, n);
        for m in 0..=nt {
            let dst = out.level_mut(m);
            if m < nt {
                for (d, v) in dst.iter_mut().zip(b.level(m + 1)) {
                    *d += half * v;
                }
            }
            if m >= 1 {
                for (d, v) in dst.iter_mut().zip(b.level(m)) {
                    *d += half * v;
                }
            }
        }
        out
    }

    /// Backward march `-z_t - Δz = s`, `z(T) = 0`: the time reversal of the forward march.
    pub fn backward(&self, source: &SpaceTimeField) -> SpaceTimeField {
        self.forward(&source.time_reversed()).time_reversed()
    }

    /// Algebraic transpose of [`HeatSolver::backward`].
    pub fn backward_transpose(&self, adj: &SpaceTimeField) -> SpaceTimeField {
        self.forward_transpose(&adj.time_reversed()).time_reversed()
    }
}
