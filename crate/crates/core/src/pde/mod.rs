//! Discrete heat solves, the forward/backward cascade, Neumann traces and the
//! control-to-trace operator with its exact transpose.

mod field;
mod solver;
mod source;

pub use field::{BoundaryTrace, Control, SpaceTimeField, TerminalState, TimeGrid};
pub use solver::HeatSolver;
pub use source::{SourceTerm, TimeWindow};

use crate::domain::{BoundaryGeometry, Grid};
use crate::error::{check_len, Error, Result};

/// Pair of Neumann traces `(∂ₙy, ∂ₙz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePair {
    pub y: BoundaryTrace,
    pub z: BoundaryTrace,
}

impl TracePair {
    pub fn zeros(time: TimeGrid, n_boundary: usize) -> Self {
        TracePair {
            y: BoundaryTrace::zeros(time, n_boundary),
            z: BoundaryTrace::zeros(time, n_boundary),
        }
    }

    pub fn inner(&self, other: &Self, grid: &Grid) -> f64 {
        self.y.inner(&other.y, grid) + self.z.inner(&other.z, grid)
    }

    /// `‖(∂ₙy, ∂ₙz)‖` in the product space.
    pub fn norm(&self, grid: &Grid) -> f64 {
        self.inner(self, grid).sqrt()
    }

    pub fn axpy(&mut self, c: f64, other: &Self) {
        self.y.axpy(c, &other.y);
        self.z.axpy(c, &other.z);
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

    pub fn scaled(&self, c: f64) -> Self {
        TracePair {
            y: self.y.scaled(c),
            z: self.z.scaled(c),
        }
    }
}

/// Traces plus the terminal state `y(T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTraces {
    pub traces: TracePair,
    pub terminal: TerminalState,
}

/// Second-order one-sided outward normal derivative at every boundary node:
/// `∂ₙu ≈ -(4u₁ - u₂) / (2h)` with `u₁, u₂` the first two interior values.
pub fn neumann_trace(field: &SpaceTimeField, b: &BoundaryGeometry) -> BoundaryTrace {
    let mut out = BoundaryTrace::zeros(field.time, b.len());
    for n in 0..field.levels() {
        let u = field.level(n);
        for (dst, p) in out.level_mut(n).iter_mut().zip(&b.points) {
            *dst = -(4.0 * u[p.inner[0]] - u[p.inner[1]]) / (2.0 * p.spacing);
        }
    }
    out
}

/// Transpose of [`neumann_trace`] (unweighted).
fn neumann_trace_transpose(trace: &BoundaryTrace, b: &BoundaryGeometry, n_nodes: usize) -> SpaceTimeField {
    let mut out = SpaceTimeField::zeros(trace.time, n_nodes);
    for n in 0..trace.levels() {
        let g = trace.level(n);
        let dst = out.level_mut(n);
        for (v, p) in g.iter().zip(&b.points) {
            let c = -1.0 / (2.0 * p.spacing);
            dst[p.inner[0]] += 4.0 * c * v;
            dst[p.inner[1]] -= c * v;
        }
    }
    out
}

/// Grid, time grid and factorized solver for the coupled system
/// `y_t - Δy = ξ + h 1_ω`, `-z_t - Δz = 1_Θ y`.
#[derive(Debug, Clone)]
pub struct HeatCascade {
    pub grid: Grid,
    pub time: TimeGrid,
    solver: HeatSolver,
}

impl HeatCascade {
    pub fn new(grid: Grid, time: TimeGrid) -> Result<Self> {
        let solver = HeatSolver::new(&grid, time)?;
        Ok(HeatCascade { grid, time, solver })
    }

    pub fn solver(&self) -> &HeatSolver {
        &self.solver
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn n_boundary(&self) -> usize {
        self.grid.boundary.len()
    }

    pub fn zero_field(&self) -> SpaceTimeField {
        SpaceTimeField::zeros(self.time, self.n_nodes())
    }

    pub fn zero_control(&self) -> Control {
        Control::zeros_on(&self.grid, self.time)
    }

    fn check_field(&self, f: &SpaceTimeField) -> Result<()> {
        check_len("field levels", self.time.levels(), f.levels())?;
        check_len("field nodes", self.n_nodes(), f.width())
    }

    fn check_control(&self, h: &Control) -> Result<()> {
        check_len("control levels", self.time.levels(), h.levels())?;
        check_len("control nodes", self.grid.omega_nodes.len(), h.width())
    }

    fn check_trace(&self, g: &BoundaryTrace) -> Result<()> {
        check_len("trace levels", self.time.levels(), g.levels())?;
        check_len("trace points", self.n_boundary(), g.width())
    }

    fn finite(f: SpaceTimeField) -> Result<SpaceTimeField> {
        if f.is_finite() {
            Ok(f)
        } else {
            Err(Error::SolverFailure("non-finite values in heat solve".into()))
        }
    }

    /// `y_t - Δy = ξ + h 1_ω`, `y(0) = 0`.
    pub fn solve_forward(&self, xi: &SpaceTimeField, h: Option<&Control>) -> Result<SpaceTimeField> {
        self.check_field(xi)?;
        let source = match h {
            Some(h) => {
                self.check_control(h)?;
                xi.add(&h.embed(&self.grid))
            }
            None => xi.clone(),
        };
        Self::finite(self.solver.forward(&source))
    }

    /// `-z_t - Δz = s`, `z(T) = 0`.
    pub fn solve_backward(&self, source: &SpaceTimeField) -> Result<SpaceTimeField> {
        self.check_field(source)?;
        Self::finite(self.solver.backward(source))
    }

    /// The cascade `(y, z)` driven by `ξ` and the control `h`.
    pub fn solve_cascade(&self, xi: &SpaceTimeField, h: Option<&Control>) -> Result<(SpaceTimeField, SpaceTimeField)> {
        let y = self.solve_forward(xi, h)?;
        let z = self.solve_backward(&y.masked(&self.grid.theta_mask))?;
        Ok((y, z))
    }

    pub fn neumann_trace(&self, field: &SpaceTimeField) -> BoundaryTrace {
        neumann_trace(field, &self.grid.boundary)
    }

    /// Traces of the cascade.
    pub fn cascade_traces(&self, xi: &SpaceTimeField, h: Option<&Control>) -> Result<TracePair> {
        let (y, z) = self.solve_cascade(xi, h)?;
        Ok(TracePair {
            y: self.neumann_trace(&y),
            z: self.neumann_trace(&z),
        })
    }

    /// `ℒh = (∂ₙy_h, ∂ₙz_h)` for the cascade with zero source.
    pub fn apply_l(&self, h: &Control) -> Result<TracePair> {
        self.check_control(h)?;
        let y = self.solver.forward(&h.embed(&self.grid));
        let z = self.solver.backward(&y.masked(&self.grid.theta_mask));
        Ok(TracePair {
            y: self.neumann_trace(&y),
            z: self.neumann_trace(&z),
        })
    }

    /// `ℒh` together with `y_h(T)`.
    pub fn apply_l_augmented(&self, h: &Control) -> Result<AugmentedTraces> {
        self.check_control(h)?;
        let y = self.solver.forward(&h.embed(&self.grid));
        let z = self.solver.backward(&y.masked(&self.grid.theta_mask));
        Ok(AugmentedTraces {
            traces: TracePair {
                y: self.neumann_trace(&y),
                z: self.neumann_trace(&z),
            },
            terminal: y.terminal(),
        })
    }

    /// Adjoint of [`HeatCascade::apply_l`] for the `(dt × dσ)` trace and
    /// `(dt × hx·hy)` control inner products.
    pub fn apply_l_transpose(&self, g: &TracePair) -> Result<Control> {
        self.transpose_impl(Some(g), None)
    }

    /// Adjoint of [`HeatCascade::apply_l_augmented`]; the terminal channel uses `hx·hy`.
    pub fn apply_l_augmented_transpose(&self, g: &AugmentedTraces) -> Result<Control> {
        self.transpose_impl(Some(&g.traces), Some(&g.terminal))
    }

    /// `y_h(T)` alone.
    pub fn apply_terminal(&self, h: &Control) -> Result<TerminalState> {
        self.check_control(h)?;
        Ok(self.solver.forward(&h.embed(&self.grid)).terminal())
    }

    /// Adjoint of [`HeatCascade::apply_terminal`].
    pub fn apply_terminal_transpose(&self, psi: &TerminalState) -> Result<Control> {
        self.transpose_impl(None, Some(psi))
    }

    fn weight_trace(&self, g: &BoundaryTrace) -> BoundaryTrace {
        let mut out = g.clone();
        for n in 0..out.levels() {
            let wt = self.time.weight(n);
            for (v, p) in out.level_mut(n).iter_mut().zip(&self.grid.boundary.points) {
                *v *= wt * p.weight;
            }
        }
        out
    }

    fn transpose_impl(&self, g: Option<&TracePair>, terminal: Option<&TerminalState>) -> Result<Control> {
        let b = &self.grid.boundary;
        let n_nodes = self.n_nodes();
        let mut ybar = match g {
            Some(g) => {
                self.check_trace(&g.y)?;
                self.check_trace(&g.z)?;
                let gz = neumann_trace_transpose(&self.weight_trace(&g.z), b, n_nodes);
                let zbar = self.solver.backward_transpose(&gz).masked(&self.grid.theta_mask);
                let mut ybar = neumann_trace_transpose(&self.weight_trace(&g.y), b, n_nodes);
                ybar.axpy(1.0, &zbar);
                ybar
            }
            None => self.zero_field(),
        };
        if let Some(psi) = terminal {
            check_len("terminal state", n_nodes, psi.0.len())?;
            let area = self.grid.cell_area();
            for (d, v) in ybar.level_mut(self.time.nt).iter_mut().zip(&psi.0) {
                *d += area * v;
            }
        }
        let fbar = self.solver.forward_transpose(&ybar);
        let mut h = Control::restrict(&fbar, &self.grid);
        let area = self.grid.cell_area();
        for n in 0..h.levels() {
            let s = 1.0 / (self.time.weight(n) * area);
            h.level_mut(n).iter_mut().for_each(|v| *v *= s);
        }
        Ok(h)
    }
}
