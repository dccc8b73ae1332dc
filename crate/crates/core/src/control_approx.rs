//! Approximate trace control, approximate insensitizing and the variants with a
//! terminal approximate or null control, all as Tikhonov-regularized least squares
//! on the discrete control-to-trace operator.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{GeometricCase, Grid};
use crate::error::{Error, Result};
use crate::pde::{BoundaryTrace, Control, HeatCascade, SpaceTimeField, TerminalState, TracePair};
use crate::shape::{kernel_l1_norm, sensitivity_kernel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalMode {
    None,
    Approximate,
    Null,
}

/// Relative weights of the trace and terminal channels in the misfit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelWeights {
    pub trace: f64,
    pub terminal: f64,
}

impl Default for ChannelWeights {
    fn default() -> Self {
        ChannelWeights {
            trace: 1.0,
            terminal: 10.0,
        }
    }
}

/// Targets `(f₁, f₂)` and, optionally, a terminal target.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTarget {
    pub f1: BoundaryTrace,
    pub f2: BoundaryTrace,
    pub terminal: Option<TerminalState>,
    pub mode: TerminalMode,
    pub weights: ChannelWeights,
    /// Boundary weights restricting where trace misfits count (`None`: everywhere).
    pub support: Option<Vec<f64>>,
}

impl TraceTarget {
    /// `f₁ = f₂ = 0`, no terminal channel.
    pub fn zero(cascade: &HeatCascade) -> Self {
        TraceTarget {
            f1: BoundaryTrace::zeros(cascade.time, cascade.n_boundary()),
            f2: BoundaryTrace::zeros(cascade.time, cascade.n_boundary()),
            terminal: None,
            mode: TerminalMode::None,
            weights: ChannelWeights::default(),
            support: None,
        }
    }

    pub fn with_support(mut self, support: Vec<f64>) -> Self {
        self.support = Some(support);
        self
    }

    fn restrict(&self, t: &BoundaryTrace) -> BoundaryTrace {
        match &self.support {
            Some(s) => masked(t, s),
            None => t.clone(),
        }
    }

    /// `(‖∂ₙy − f₁‖, ‖∂ₙz − f₂‖)` over the support.
    pub fn residuals(&self, traces: &TracePair, grid: &Grid) -> (f64, f64) {
        (
            self.restrict(&traces.y.sub(&self.f1)).norm(grid),
            self.restrict(&traces.z.sub(&self.f2)).norm(grid),
        )
    }

    pub fn with_terminal(mut self, mode: TerminalMode, target: TerminalState) -> Self {
        self.mode = mode;
        self.terminal = Some(target);
        self
    }

    fn validate(&self, cascade: &HeatCascade) -> Result<()> {
        let probe = BoundaryTrace::zeros(cascade.time, cascade.n_boundary());
        probe.check_compatible(&self.f1)?;
        probe.check_compatible(&self.f2)?;
        if (self.mode == TerminalMode::None) != self.terminal.is_none() {
            return Err(Error::Validation(
                "terminal target must be given exactly when a terminal mode is set".into(),
            ));
        }
        if let Some(t) = &self.terminal {
            crate::error::check_len("terminal target", cascade.n_nodes(), t.0.len())?;
        }
        if let Some(s) = &self.support {
            crate::error::check_len("trace support", cascade.n_boundary(), s.len())?;
        }
        if !(self.weights.trace > 0.0 && self.weights.terminal > 0.0) {
            return Err(Error::Validation("channel weights must be positive".into()));
        }
        Ok(())
    }
}

fn masked(t: &BoundaryTrace, mask: &[f64]) -> BoundaryTrace {
    let mut out = t.clone();
    for n in 0..out.levels() {
        out.level_mut(n).iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
    }
    out
}

/// Decreasing Tikhonov parameters and CG settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizationSchedule {
    pub alphas: Vec<f64>,
    pub cg_tol: f64,
    pub cg_maxit: usize,
    /// Stop as soon as the problem-specific criterion falls below this value.
    pub epsilon: f64,
}

impl Default for RegularizationSchedule {
    fn default() -> Self {
        RegularizationSchedule::geometric(1e-2, 1e-10, 10.0, 1e-10, 2000, 1e-6)
    }
}

impl RegularizationSchedule {
    pub fn geometric(start: f64, end: f64, factor: f64, cg_tol: f64, cg_maxit: usize, epsilon: f64) -> Self {
        let mut alphas = Vec::new();
        let mut a = start;
        if factor > 1.0 && start > 0.0 && end > 0.0 {
            while a >= end * (1.0 - 1e-9) {
                alphas.push(a);
                a /= factor;
            }
        }
        RegularizationSchedule {
            alphas,
            cg_tol,
            cg_maxit,
            epsilon,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::Validation("regularization schedule is empty".into()));
        }
        if self.alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) || self.alphas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Validation("alphas must be positive and strictly decreasing".into()));
        }
        if !(self.cg_tol > 0.0 && self.epsilon > 0.0) || self.cg_maxit == 0 {
            return Err(Error::Validation("tolerances and iteration budget must be positive".into()));
        }
        Ok(())
    }
}

/// Diagnostics of one schedule level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelRecord {
    pub alpha: f64,
    /// Weighted data misfit, recomputed by an independent solve.
    pub misfit: f64,
    pub criterion: f64,
    pub cg_iterations: usize,
    pub cg_converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ControlResult {
    #[serde(skip)]
    pub h: Control,
    /// `‖∂ₙy − f₁‖`.
    pub residual_y: f64,
    /// `‖∂ₙz − f₂‖`.
    pub residual_z: f64,
    /// `‖y(T) − y_T‖` when a terminal channel is active.
    pub residual_terminal: Option<f64>,
    /// `‖y(T)‖` with `h = 0`.
    pub terminal_baseline: f64,
    pub terminal_norm: f64,
    pub kernel_l1_before: f64,
    pub kernel_l1_after: f64,
    /// `‖∂ₙy‖·‖∂ₙz‖`, an upper bound for `kernel_l1_after`.
    pub cauchy_schwarz_bound: f64,
    pub control_norm: f64,
    pub alpha: f64,
    pub cg_iterations: usize,
    pub wall_time_s: f64,
    /// Success criterion met.
    pub met: bool,
    /// Schedule ran out (or CG stalled) before the criterion was met.
    pub schedule_exhausted: bool,
    pub levels: Vec<LevelRecord>,
    pub notes: Vec<String>,
}

/// State recomputed by an independent cascade solve.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub traces: TracePair,
    pub terminal: TerminalState,
    pub kernel_l1: f64,
}

pub fn evaluate(cascade: &HeatCascade, xi: &SpaceTimeField, h: Option<&Control>) -> Result<Evaluation> {
    let (y, z) = cascade.solve_cascade(xi, h)?;
    let traces = TracePair {
        y: cascade.neumann_trace(&y),
        z: cascade.neumann_trace(&z),
    };
    let k = sensitivity_kernel(&traces.y, &traces.z)?;
    Ok(Evaluation {
        kernel_l1: kernel_l1_norm(&k, &cascade.grid.boundary),
        terminal: y.terminal(),
        traces,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Channels {
    Traces,
    Augmented,
    Terminal,
}

struct Output {
    traces: Option<TracePair>,
    terminal: Option<TerminalState>,
}

/// Weighted least-squares operator `h ↦ (√w_t ℒh, √w_T y_h(T))`.
struct LsqOperator<'a> {
    cascade: &'a HeatCascade,
    channels: Channels,
    weights: ChannelWeights,
    support: Option<&'a [f64]>,
}

impl LsqOperator<'_> {
    fn apply(&self, h: &Control) -> Result<Output> {
        Ok(match self.channels {
            Channels::Traces => Output {
                traces: Some(self.cascade.apply_l(h)?),
                terminal: None,
            },
            Channels::Augmented => {
                let a = self.cascade.apply_l_augmented(h)?;
                Output {
                    traces: Some(a.traces),
                    terminal: Some(a.terminal),
                }
            }
            Channels::Terminal => Output {
                traces: None,
                terminal: Some(self.cascade.apply_terminal(h)?),
            },
        })
    }

    /// Adjoint of `apply` composed with the channel weights.
    fn weighted_adjoint(&self, out: &Output) -> Result<Control> {
        let traces = out.traces.as_ref().map(|t| {
            let t = match self.support {
                Some(s) => TracePair {
                    y: masked(&t.y, s),
                    z: masked(&t.z, s),
                },
                None => t.clone(),
            };
            t.scaled(self.weights.trace)
        });
        let terminal = out.terminal.as_ref().map(|t| t.scaled(self.weights.terminal));
        match (traces, terminal) {
            (Some(t), Some(psi)) => self.cascade.apply_l_augmented_transpose(&crate::pde::AugmentedTraces {
                traces: t,
                terminal: psi,
            }),
            (Some(t), None) => self.cascade.apply_l_transpose(&t),
            (None, Some(psi)) => self.cascade.apply_terminal_transpose(&psi),
            (None, None) => Ok(self.cascade.zero_control()),
        }
    }

    fn normal(&self, h: &Control, alpha: f64) -> Result<Control> {
        let mut out = self.weighted_adjoint(&self.apply(h)?)?;
        out.axpy(alpha, h);
        Ok(out)
    }
}

/// Conjugate gradients for `(ℒ*Wℒ + α) h = b` in the control inner product, warm-started at `h`.
fn cg(op: &LsqOperator, b: &Control, h: &mut Control, alpha: f64, tol: f64, maxit: usize) -> Result<(usize, bool)> {
    let grid = &op.cascade.grid;
    let bnorm = b.norm(grid);
    if bnorm == 0.0 {
        *h = op.cascade.zero_control();
        return Ok((0, true));
    }
    let mut r = b.sub(&op.normal(h, alpha)?);
    let mut p = r.clone();
    let mut rr = r.inner(&r, grid);
    let stop = (tol * bnorm).powi(2);
    for it in 0..maxit {
        if rr <= stop {
            return Ok((it, true));
        }
        let ap = op.normal(&p, alpha)?;
        let pap = p.inner(&ap, grid);
        if !(pap > 0.0) {
            return Err(Error::SolverFailure(format!("normal operator lost positivity (pAp = {pap:e})")));
        }
        let step = rr / pap;
        h.axpy(step, &p);
        r.axpy(-step, &ap);
        let rr_new = r.inner(&r, grid);
        let beta = rr_new / rr;
        rr = rr_new;
        p = r.add(&p.scaled(beta));
    }
    if !h.is_finite() {
        return Err(Error::SolverFailure("non-finite CG iterate".into()));
    }
    Ok((maxit, rr <= stop))
}

struct Solved {
    h: Control,
    eval: Evaluation,
    levels: Vec<LevelRecord>,
    met: bool,
    exhausted: bool,
    alpha: f64,
    cg_iterations: usize,
    notes: Vec<String>,
}

fn misfit(eval: &Evaluation, target: &TraceTarget, channels: Channels, cascade: &HeatCascade) -> f64 {
    let g = &cascade.grid;
    let mut m = 0.0;
    if channels != Channels::Terminal {
        let (ry, rz) = target.residuals(&eval.traces, g);
        m += target.weights.trace * (ry * ry + rz * rz);
    }
    if let Some(t) = &target.terminal {
        m += target.weights.terminal * eval.terminal.sub(t).norm(g).powi(2);
    }
    m
}

/// Runs the α schedule for the total control `offset + h`.
fn solve_schedule(
    cascade: &HeatCascade,
    xi: &SpaceTimeField,
    offset: Option<&Control>,
    target: &TraceTarget,
    channels: Channels,
    schedule: &RegularizationSchedule,
    criterion: impl Fn(&Evaluation) -> f64,
) -> Result<Solved> {
    schedule.validate()?;
    let op = LsqOperator {
        cascade,
        channels,
        weights: target.weights,
        support: target.support.as_deref(),
    };
    let base = evaluate(cascade, xi, offset)?;
    let rhs = Output {
        traces: (channels != Channels::Terminal).then(|| TracePair {
            y: target.f1.sub(&base.traces.y),
            z: target.f2.sub(&base.traces.z),
        }),
        terminal: target.terminal.as_ref().map(|t| t.sub(&base.terminal)),
    };
    let b = op.weighted_adjoint(&rhs)?;
    let total = |h: &Control| match offset {
        Some(o) => o.add(h),
        None => h.clone(),
    };

    let mut h = cascade.zero_control();
    let mut best: Option<(Control, Evaluation, f64)> = None;
    let mut levels = Vec::new();
    let mut notes = Vec::new();
    let mut cg_total = 0;
    let mut met = criterion(&base) <= schedule.epsilon;
    if met {
        notes.push("criterion met by the uncontrolled state".into());
        best = Some((cascade.zero_control(), base, f64::NAN));
    }
    let mut exhausted = !met;
    for &alpha in &schedule.alphas {
        if met {
            break;
        }
        let mut trial = h.clone();
        let (iters, converged) = cg(&op, &b, &mut trial, alpha, schedule.cg_tol, schedule.cg_maxit)?;
        cg_total += iters;
        if !converged {
            levels.push(LevelRecord {
                alpha,
                misfit: f64::NAN,
                criterion: f64::NAN,
                cg_iterations: iters,
                cg_converged: false,
            });
            if best.is_none() {
                return Err(Error::SolverFailure(format!(
                    "CG did not reach tolerance {:e} in {} iterations at alpha = {alpha:e}",
                    schedule.cg_tol, schedule.cg_maxit
                )));
            }
            notes.push(format!("CG stalled at alpha = {alpha:e}; kept the previous level"));
            break;
        }
        h = trial;
        let eval = evaluate(cascade, xi, Some(&total(&h)))?;
        let c = criterion(&eval);
        levels.push(LevelRecord {
            alpha,
            misfit: misfit(&eval, target, channels, cascade),
            criterion: c,
            cg_iterations: iters,
            cg_converged: true,
        });
        best = Some((h.clone(), eval, alpha));
        if c <= schedule.epsilon {
            met = true;
            exhausted = false;
        }
    }
    let (h, eval, alpha) = best.expect("schedule produced no level");
    Ok(Solved {
        h: total(&h),
        eval,
        levels,
        met,
        exhausted,
        alpha,
        cg_iterations: cg_total,
        notes,
    })
}

fn report(
    cascade: &HeatCascade,
    xi: &SpaceTimeField,
    target: &TraceTarget,
    solved: Solved,
    started: Instant,
) -> Result<ControlResult> {
    let g = &cascade.grid;
    let base = evaluate(cascade, xi, None)?;
    let e = &solved.eval;
    let (residual_y, residual_z) = target.residuals(&e.traces, g);
    Ok(ControlResult {
        residual_y,
        residual_z,
        residual_terminal: target.terminal.as_ref().map(|t| e.terminal.sub(t).norm(g)),
        terminal_baseline: base.terminal.norm(g),
        terminal_norm: e.terminal.norm(g),
        kernel_l1_before: base.kernel_l1,
        kernel_l1_after: e.kernel_l1,
        cauchy_schwarz_bound: e.traces.y.norm(g) * e.traces.z.norm(g),
        control_norm: solved.h.norm(g),
        alpha: solved.alpha,
        cg_iterations: solved.cg_iterations,
        wall_time_s: started.elapsed().as_secs_f64(),
        met: solved.met,
        schedule_exhausted: solved.exhausted,
        levels: solved.levels,
        notes: solved.notes,
        h: solved.h,
    })
}

/// Drives `(∂ₙy, ∂ₙz[, y(T)])` toward the target; stops once
/// `‖∂ₙy − f₁‖ + ‖∂ₙz − f₂‖ (+ ‖y(T) − y_T‖) ≤ ε`.
pub fn approx_trace_control(
    cascade: &HeatCascade,
    xi: &SpaceTimeField,
    target: &TraceTarget,
    schedule: &RegularizationSchedule,
) -> Result<ControlResult> {
    let started = Instant::now();
    target.validate(cascade)?;
    let channels = if target.terminal.is_some() {
        Channels::Augmented
    } else {
        Channels::Traces
    };
    let g = &cascade.grid;
    let solved = solve_schedule(cascade, xi, None, target, channels, schedule, |e| {
        let (ry, rz) = target.residuals(&e.traces, g);
        let mut r = ry + rz;
        if let Some(t) = &target.terminal {
            r += e.terminal.sub(t).norm(g);
        }
        r
    })?;
    report(cascade, xi, target, solved, started)
}

/// ε-approximate insensitizing control: zero trace targets, success when
/// `‖∫∂ₙy∂ₙz dt‖_{L¹(∂Ω)} ≤ ε` (ε taken from the schedule).
pub fn approx_insensitize(cascade: &HeatCascade, xi: &SpaceTimeField, schedule: &RegularizationSchedule) -> Result<ControlResult> {
    let started = Instant::now();
    let target = TraceTarget::zero(cascade);
    let solved = solve_schedule(cascade, xi, None, &target, Channels::Traces, schedule, |e| e.kernel_l1)?;
    report(cascade, xi, &target, solved, started)
}

/// Terminal-only least squares driving `‖y(T)‖ ≤ rel_tol · ‖y_ξ(T)‖`.
pub fn null_control(
    cascade: &HeatCascade,
    xi: &SpaceTimeField,
    rel_tol: f64,
    schedule: &RegularizationSchedule,
) -> Result<ControlResult> {
    let started = Instant::now();
    let base = evaluate(cascade, xi, None)?;
    let baseline = base.terminal.norm(&cascade.grid);
    let target = TraceTarget::zero(cascade).with_terminal(TerminalMode::Null, TerminalState::zeros(cascade.n_nodes()));
    let schedule = schedule.clone().with_epsilon((rel_tol * baseline).max(f64::MIN_POSITIVE));
    let g = &cascade.grid;
    let solved = solve_schedule(cascade, xi, None, &target, Channels::Terminal, &schedule, |e| e.terminal.norm(g))?;
    report(cascade, xi, &target, solved, started)
}

/// How the terminal state is constrained.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalRequest {
    /// `‖y(T) − y_T‖ ≤ tol`.
    Approximate { target: TerminalState, tol: f64 },
    /// `‖y(T)‖ ≤ rel_tol · ‖y_ξ(T)‖`, through `h = h_nc + h₁`.
    Null { rel_tol: f64 },
}

/// Insensitizing together with terminal control. The disjoint geometry is rejected
/// unless `allow_disjoint` is set, in which case the attempt is flagged as experimental.
pub fn insensitize_with_terminal(
    cascade: &HeatCascade,
    xi: &SpaceTimeField,
    request: &TerminalRequest,
    weights: ChannelWeights,
    schedule: &RegularizationSchedule,
    allow_disjoint: bool,
) -> Result<ControlResult> {
    let started = Instant::now();
    let mut notes = Vec::new();
    if cascade.grid.spec.case == GeometricCase::Disjoint {
        if !allow_disjoint {
            return Err(Error::GeometryUnsupported(
                "terminal control together with insensitizing needs overlapping control and observation regions".into(),
            ));
        }
        notes.push("experimental: terminal channel with disjoint regions".into());
    }
    let g = &cascade.grid;
    let eps = schedule.epsilon;
    let mut result = match request {
        TerminalRequest::Approximate { target: yt, tol } => {
            let mut target = TraceTarget::zero(cascade).with_terminal(TerminalMode::Approximate, yt.clone());
            target.weights = weights;
            target.validate(cascade)?;
            let tol = *tol;
            // Scale the terminal excess so that a single threshold covers both goals.
            let solved = solve_schedule(cascade, xi, None, &target, Channels::Augmented, schedule, |e| {
                let term = e.terminal.sub(yt).norm(g);
                e.kernel_l1.max(eps * term / tol)
            })?;
            report(cascade, xi, &target, solved, started)?
        }
        TerminalRequest::Null { rel_tol } => {
            let nc = null_control(cascade, xi, rel_tol * 0.1, schedule)?;
            notes.push(format!(
                "null stage: |y(T)| {:.3e} -> {:.3e}",
                nc.terminal_baseline, nc.terminal_norm
            ));
            let baseline = nc.terminal_baseline;
            let mut target = TraceTarget::zero(cascade).with_terminal(TerminalMode::Null, TerminalState::zeros(cascade.n_nodes()));
            target.weights = weights;
            let tol = (rel_tol * baseline).max(f64::MIN_POSITIVE);
            let solved = solve_schedule(cascade, xi, Some(&nc.h), &target, Channels::Augmented, schedule, |e| {
                e.kernel_l1.max(eps * e.terminal.norm(g) / tol)
            })?;
            let mut r = report(cascade, xi, &target, solved, started)?;
            r.cg_iterations += nc.cg_iterations;
            r
        }
    };
    notes.append(&mut result.notes);
    result.notes = notes;
    Ok(result)
}

/// Additive correction making the projection of the traces onto `span(basis)` match
/// the targets exactly: `h_c = Σ c_j ℒ*φ_j` with the Gram system `(⟨ℒ*φ_i, ℒ*φ_j⟩) c = (⟨φ_i, f − ℒh⟩)`.
pub fn projection_correction(
    cascade: &HeatCascade,
    xi: &SpaceTimeField,
    h: &Control,
    target: &TraceTarget,
    basis: &[TracePair],
) -> Result<Control> {
    if basis.is_empty() {
        return Ok(h.clone());
    }
    let g = &cascade.grid;
    let e = evaluate(cascade, xi, Some(h))?;
    let d = TracePair {
        y: target.f1.sub(&e.traces.y),
        z: target.f2.sub(&e.traces.z),
    };
    let u = basis.iter().map(|phi| cascade.apply_l_transpose(phi)).collect::<Result<Vec<_>>>()?;
    let m = basis.len();
    let gram = DMatrix::from_fn(m, m, |i, j| u[i].inner(&u[j], g));
    let rhs = DVector::from_fn(m, |i, _| basis[i].inner(&d, g));
    let c = gram
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or_else(|| Error::SolverFailure("singular Gram matrix in projection correction".into()))?;
    let mut out = h.clone();
    for (cj, uj) in c.iter().zip(&u) {
        out.axpy(*cj, uj);
    }
    Ok(out)
}
