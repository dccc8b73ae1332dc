//! Exact insensitizing over a finite-dimensional space of perturbation
//! directions: γ targets, basis controls, the quadratic/linear/constant system
//! and the λ solve.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::control_approx::{
    approx_trace_control, evaluate, ControlResult, RegularizationSchedule, TerminalMode, TraceTarget,
};
use crate::domain::{normal_component, BoundaryGeometry, BoundaryScalar, Grid, PerturbationField};
use crate::error::{check_len, Error, Result};
use crate::pde::{BoundaryTrace, Control, HeatCascade, SpaceTimeField, TerminalState, TimeGrid, TracePair};
use crate::shape::sensitivity_kernel;

/// Orthonormal basis `w_1..w_M` of the span of the normal traces `V_i·n`.
#[derive(Debug, Clone, Serialize)]
pub struct DirectionBasis {
    #[serde(skip)]
    pub directions: Vec<PerturbationField>,
    pub normals: Vec<BoundaryScalar>,
    /// `w_k = Σ_i coeffs[k][i] (V_i·n)`.
    pub coeffs: Vec<Vec<f64>>,
    /// Indices of the directions that contributed a new basis vector.
    pub kept: Vec<usize>,
}

impl DirectionBasis {
    pub fn dim(&self) -> usize {
        self.normals.len()
    }
}

impl Serialize for BoundaryScalar {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

/// Modified Gram–Schmidt in the `dσ` inner product. Directions whose remainder
/// falls below `1e-10` of their initial norm are dropped.
pub fn orthonormalize_normal_traces(directions: &[PerturbationField], b: &BoundaryGeometry) -> Result<DirectionBasis> {
    let n = directions.len();
    let mut normals: Vec<BoundaryScalar> = Vec::new();
    let mut coeffs: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for (i, v) in directions.iter().enumerate() {
        let mut w = normal_component(v, b)?.0;
        let mut c = vec![0.0; n];
        c[i] = 1.0;
        let initial = b.norm(&w);
        if initial == 0.0 {
            continue;
        }
        for (q, qc) in normals.iter().zip(&coeffs) {
            let p = b.inner(&w, q);
            for (a, bq) in w.iter_mut().zip(q.iter()) {
                *a -= p * bq;
            }
            for (a, bq) in c.iter_mut().zip(qc) {
                *a -= p * bq;
            }
        }
        let rest = b.norm(&w);
        if rest <= 1e-10 * initial {
            continue;
        }
        w.iter_mut().for_each(|a| *a /= rest);
        c.iter_mut().for_each(|a| *a /= rest);
        normals.push(BoundaryScalar(w));
        coeffs.push(c);
        kept.push(i);
    }
    if normals.is_empty() {
        return Err(Error::AllDirectionsTangent);
    }
    Ok(DirectionBasis {
        directions: directions.to_vec(),
        normals,
        coeffs,
        kept,
    })
}

/// Smallest multiple of `2M` not below `nt`.
pub fn rounded_nt(nt: usize, m: usize) -> usize {
    let q = 2 * m.max(1);
    nt.div_ceil(q) * q
}

/// Time levels of the two half-windows of block `k` (0-based). Level 0 and level
/// `Nt` belong to no window: `y` vanishes at `t = 0` and `z` at `t = T`.
pub fn window_levels(time: TimeGrid, m: usize, k: usize) -> Result<[Vec<usize>; 2]> {
    if m == 0 || !time.nt.is_multiple_of(2 * m) {
        return Err(Error::BadTimeDivision { nt: time.nt, windows: 2 * m });
    }
    let half = time.nt / (2 * m);
    let w = |s: usize| (s * half..(s + 1) * half).filter(|&n| n >= 1 && n < time.nt).collect::<Vec<_>>();
    Ok([w(2 * k), w(2 * k + 1)])
}

/// `γ_{k,a,y}` and `γ_{k,a,z}`, indexed `[k][a]` with `a ∈ {0, 1}`.
#[derive(Debug, Clone)]
pub struct GammaTargets {
    pub m: usize,
    pub y: Vec<[BoundaryTrace; 2]>,
    pub z: Vec<[BoundaryTrace; 2]>,
}

pub fn build_gamma_targets(basis: &DirectionBasis, time: TimeGrid, b: &BoundaryGeometry) -> Result<GammaTargets> {
    let m = basis.dim();
    let nb = b.len();
    let mut ys = Vec::with_capacity(m);
    let mut zs = Vec::with_capacity(m);
    for (k, w) in basis.normals.iter().enumerate() {
        check_len("basis normal", nb, w.len())?;
        let [w1, w2] = window_levels(time, m, k)?;
        let measure = |ls: &[usize]| ls.iter().map(|&n| time.weight(n)).sum::<f64>();
        // Discrete counterpart of M/T: the windows' total quadrature measure.
        let scale = 1.0 / (measure(&w1) + measure(&w2)) / b.norm(w).powi(2);
        let indicator = |ls: &[usize], spatial: Option<&[f64]>| {
            let mut t = BoundaryTrace::zeros(time, nb);
            for &n in ls {
                match spatial {
                    Some(s) => t.level_mut(n).iter_mut().zip(s).for_each(|(d, v)| *d = scale * v),
                    None => t.level_mut(n).fill(1.0),
                }
            }
            t
        };
        ys.push([indicator(&w1, Some(w)), indicator(&w2, Some(w))]);
        zs.push([indicator(&w2, None), indicator(&w1, None)]);
    }
    Ok(GammaTargets { m, y: ys, z: zs })
}

/// `∫ w_k ∫ a b dt dσ`.
fn weighted_pairing(w: &[f64], a: &BoundaryTrace, b: &BoundaryTrace, grid: &Grid) -> f64 {
    let pts = &grid.boundary.points;
    let mut total = 0.0;
    for n in 0..a.levels() {
        let s: f64 = a
            .level(n)
            .iter()
            .zip(b.level(n))
            .zip(pts.iter().zip(w))
            .map(|((x, y), (p, wk))| p.weight * wk * x * y)
            .sum();
        total += a.time.weight(n) * s;
    }
    total
}

/// `D_k[(i,a),(j,b)] = ∫ w_k ∫ (y_{i,a} z_{j,b} + y_{j,b} z_{i,a}) dt dσ`, flattened with
/// index `2i + a`. Equals `δ_{ijk} 1_{a≠b}` for exact γ targets.
pub fn gamma_identity_tensor(
    basis: &DirectionBasis,
    y: &[[BoundaryTrace; 2]],
    z: &[[BoundaryTrace; 2]],
    grid: &Grid,
) -> Vec<DMatrix<f64>> {
    let m = y.len();
    let flat = |v: &[[BoundaryTrace; 2]]| v.iter().flat_map(|p| p.iter().cloned()).collect::<Vec<_>>();
    let (ys, zs) = (flat(y), flat(z));
    basis
        .normals
        .iter()
        .map(|w| {
            let raw = DMatrix::from_fn(2 * m, 2 * m, |r, c| weighted_pairing(w, &ys[r], &zs[c], grid));
            &raw + raw.transpose()
        })
        .collect()
}

/// Ideal tensor `δ_{ijk} 1_{a≠b}` for block `k`.
pub fn ideal_tensor(m: usize, k: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(2 * m, 2 * m);
    d[(2 * k, 2 * k + 1)] = 1.0;
    d[(2 * k + 1, 2 * k)] = 1.0;
    d
}

/// Largest entrywise deviation from the ideal tensor.
pub fn tensor_deviation(d: &[DMatrix<f64>]) -> f64 {
    let m = d.len();
    d.iter()
        .enumerate()
        .map(|(k, dk)| (dk - ideal_tensor(m, k)).abs().max())
        .fold(0.0, f64::max)
}

/// Controls `h_{k,a}` whose traces approximate the γ targets.
#[derive(Debug, Clone)]
pub struct BasisControls {
    pub controls: Vec<[Control; 2]>,
    pub traces: Vec<[TracePair; 2]>,
    /// `‖∂ₙy − γ_y‖ + ‖∂ₙz − γ_z‖`, recomputed.
    pub trace_errors: Vec<[f64; 2]>,
    pub alphas: Vec<[f64; 2]>,
    /// Relative error target met for every control.
    pub reached: bool,
}

/// Settings for the `2M` basis solves.
#[derive(Debug, Clone)]
pub struct BasisOptions {
    pub schedule: RegularizationSchedule,
    /// Stop once the trace error is below this fraction of `‖γ_y‖ + ‖γ_z‖`.
    pub relative_error: f64,
    /// Also drive `y_{h_{k,a}}(T)` to zero.
    pub terminal: bool,
    /// Measure trace misfits only where some `w_k` is nonzero; the pairings
    /// `∫ w_k ∂ₙy ∂ₙz` never see the rest of the boundary.
    pub restrict_to_support: bool,
    pub parallel: bool,
}

/// Indicator of the boundary points where some basis vector is nonzero.
pub fn basis_support(basis: &DirectionBasis) -> Vec<f64> {
    let n = basis.normals.first().map_or(0, |w| w.len());
    (0..n)
        .map(|p| if basis.normals.iter().any(|w| w[p] != 0.0) { 1.0 } else { 0.0 })
        .collect()
}

pub fn compute_basis_controls(
    cascade: &HeatCascade,
    basis: &DirectionBasis,
    targets: &GammaTargets,
    options: &BasisOptions,
) -> Result<BasisControls> {
    let g = &cascade.grid;
    let support = options.restrict_to_support.then(|| basis_support(basis));
    let jobs: Vec<(usize, usize)> = (0..targets.m).flat_map(|k| [(k, 0), (k, 1)]).collect();
    let zero_xi = cascade.zero_field();
    let solve = |&(k, a): &(usize, usize)| -> Result<(ControlResult, TracePair)> {
        let mut target = TraceTarget::zero(cascade);
        target.f1 = targets.y[k][a].clone();
        target.f2 = targets.z[k][a].clone();
        if options.terminal {
            target = target.with_terminal(TerminalMode::Null, TerminalState::zeros(cascade.n_nodes()));
        }
        if let Some(s) = &support {
            target = target.with_support(s.clone());
        }
        let zero = TracePair::zeros(cascade.time, cascade.n_boundary());
        let (sy, sz) = target.residuals(&zero, g);
        let scale = sy + sz;
        let schedule = options.schedule.clone().with_epsilon(options.relative_error * scale);
        let r = approx_trace_control(cascade, &zero_xi, &target, &schedule)?;
        let traces = evaluate(cascade, &zero_xi, Some(&r.h))?.traces;
        Ok((r, traces))
    };
    let results: Vec<_> = if options.parallel {
        jobs.par_iter().map(solve).collect::<Result<_>>()?
    } else {
        jobs.iter().map(solve).collect::<Result<_>>()?
    };
    let mut out = BasisControls {
        controls: Vec::new(),
        traces: Vec::new(),
        trace_errors: Vec::new(),
        alphas: Vec::new(),
        reached: results.iter().all(|(r, _)| r.met),
    };
    for pair in results.chunks(2) {
        let [(r0, t0), (r1, t1)] = pair else { unreachable!() };
        out.controls.push([r0.h.clone(), r1.h.clone()]);
        out.traces.push([t0.clone(), t1.clone()]);
        out.trace_errors.push([r0.residual_y + r0.residual_z, r1.residual_y + r1.residual_z]);
        out.alphas.push([r0.alpha, r1.alpha]);
    }
    Ok(out)
}

/// `U_k(μ) = μᵀ q_k μ + ℓ_kᵀ μ + c_k` over the `2M` basis controls (index `2j + b`).
#[derive(Debug, Clone)]
pub struct QlcSystem {
    pub m: usize,
    pub q: Vec<DMatrix<f64>>,
    pub l: Vec<DVector<f64>>,
    pub c: Vec<f64>,
    pub xi_traces: TracePair,
    pub basis_traces: Vec<TracePair>,
}

pub fn assemble_qlc(
    basis: &DirectionBasis,
    basis_traces: &[TracePair],
    xi_traces: &TracePair,
    grid: &Grid,
) -> Result<QlcSystem> {
    let m = basis.dim();
    check_len("basis traces", 2 * m, basis_traces.len())?;
    for t in basis_traces {
        t.y.check_compatible(&xi_traces.y)?;
        t.z.check_compatible(&xi_traces.z)?;
    }
    let n = 2 * m;
    let mut q = Vec::with_capacity(m);
    let mut l = Vec::with_capacity(m);
    let mut c = Vec::with_capacity(m);
    for w in &basis.normals {
        let raw = DMatrix::from_fn(n, n, |r, s| weighted_pairing(w, &basis_traces[r].y, &basis_traces[s].z, grid));
        q.push((&raw + raw.transpose()) * 0.5);
        l.push(DVector::from_fn(n, |r, _| {
            weighted_pairing(w, &xi_traces.y, &basis_traces[r].z, grid)
                + weighted_pairing(w, &basis_traces[r].y, &xi_traces.z, grid)
        }));
        c.push(weighted_pairing(w, &xi_traces.y, &xi_traces.z, grid));
    }
    Ok(QlcSystem {
        m,
        q,
        l,
        c,
        xi_traces: xi_traces.clone(),
        basis_traces: basis_traces.to_vec(),
    })
}

/// `μ_{j,1} = λ_j`, `μ_{j,2} = |λ_j|`.
pub fn mu_of(lambda: &[f64]) -> DVector<f64> {
    DVector::from_iterator(2 * lambda.len(), lambda.iter().flat_map(|&v| [v, v.abs()]))
}

pub fn evaluate_u(system: &QlcSystem, lambda: &[f64]) -> Vec<f64> {
    let mu = mu_of(lambda);
    (0..system.m)
        .map(|k| mu.dot(&(&system.q[k] * &mu)) + system.l[k].dot(&mu) + system.c[k])
        .collect()
}

/// `Σ_j (λ_j h_{j,1} + |λ_j| h_{j,2})`.
pub fn assemble_control(controls: &[[Control; 2]], lambda: &[f64], zero: Control) -> Control {
    let mut h = zero;
    for (pair, &v) in controls.iter().zip(lambda) {
        h.axpy(v, &pair[0]);
        h.axpy(v.abs(), &pair[1]);
    }
    h
}

/// `s(y) = sign(y) √|y|`.
pub fn signed_sqrt(y: f64) -> f64 {
    y.signum() * y.abs().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMethod {
    Trivial,
    Bisection,
    DampedFixedPoint,
    NewtonFallback,
    RandomRestart,
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaSolveReport {
    pub lambda: Vec<f64>,
    /// `U_k(λ)` from the assembled system.
    pub residuals: Vec<f64>,
    /// Per-`k` acceptance thresholds `tol_U · max(1, |c_k|)`.
    pub tolerances: Vec<f64>,
    pub iterations: usize,
    pub method: LambdaMethod,
    pub radius: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LambdaOptions {
    pub tol_u: f64,
    pub theta: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Keep iterating until `|U_k| ≤ inner_tol · scale` even after the reported
    /// tolerance is met, with `scale = max_k |c_k|` (or 1 if all vanish).
    pub inner_tol: f64,
}

impl Default for LambdaOptions {
    fn default() -> Self {
        LambdaOptions {
            tol_u: 1e-6,
            theta: 0.5,
            max_iter: 500,
            restarts: 5,
            seed: 0,
            inner_tol: 1e-10,
        }
    }
}

/// Radius of the ball in which the fixed point is sought, from measured constants:
/// `R = 2 √(2 C̃) ‖(∂ₙy_ξ, ∂ₙz_ξ)‖` with `C̃` bounding `|ℓ_k·μ| / (‖ξ‖ ‖λ‖)` and `|c_k| / ‖ξ‖²`.
pub fn ball_radius(system: &QlcSystem, grid: &Grid) -> f64 {
    let xi = system.xi_traces.norm(grid);
    if xi == 0.0 {
        return 0.0;
    }
    let cl = system.l.iter().map(|l| l.norm() * std::f64::consts::SQRT_2 / xi).fold(0.0, f64::max);
    let cc = system.c.iter().map(|c| c.abs() / (xi * xi)).fold(0.0, f64::max);
    2.0 * (2.0 * cl.max(cc)).sqrt() * xi
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn jacobian(system: &QlcSystem, lambda: &[f64]) -> DMatrix<f64> {
    let mu = mu_of(lambda);
    let m = system.m;
    DMatrix::from_fn(m, m, |k, j| {
        let g = 2.0 * (&system.q[k] * &mu) + &system.l[k];
        let sgn = if lambda[j] > 0.0 {
            1.0
        } else if lambda[j] < 0.0 {
            -1.0
        } else {
            0.0
        };
        g[2 * j] + sgn * g[2 * j + 1]
    })
}

fn fixed_point_map(system: &QlcSystem, lambda: &[f64]) -> Vec<f64> {
    let u = evaluate_u(system, lambda);
    lambda
        .iter()
        .zip(&u)
        .map(|(&l, &uk)| signed_sqrt(l * l.abs() - uk))
        .collect()
}

fn project(lambda: &mut [f64], radius: f64) {
    if radius > 0.0 && radius.is_finite() {
        let n = lambda.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > radius {
            lambda.iter_mut().for_each(|v| *v *= radius / n);
        }
    }
}

/// Root of `λ ↦ U(λ)` for `M = 1` by bracketing and bisection.
fn bisection(system: &QlcSystem, goal: f64, max_iter: usize) -> (Vec<f64>, usize) {
    let u = |x: f64| evaluate_u(system, &[x])[0];
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    let mut expansions = 0;
    while u(lo).signum() == u(hi).signum() && expansions < 200 {
        lo *= 2.0;
        hi *= 2.0;
        expansions += 1;
    }
    let (mut ulo, uhi) = (u(lo), u(hi));
    if ulo.signum() == uhi.signum() {
        let best = if ulo.abs() < uhi.abs() { lo } else { hi };
        return (vec![best], expansions);
    }
    let mut it = 0;
    let mut mid = 0.5 * (lo + hi);
    while it < max_iter.max(200) {
        mid = 0.5 * (lo + hi);
        let um = u(mid);
        it += 1;
        if um.abs() <= goal || hi - lo <= f64::EPSILON * mid.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        if um.signum() == ulo.signum() {
            lo = mid;
            ulo = um;
        } else {
            hi = mid;
        }
    }
    (vec![mid], expansions + it)
}

fn newton(system: &QlcSystem, start: &[f64], goal: f64, max_iter: usize) -> (Vec<f64>, usize) {
    let mut x = start.to_vec();
    let mut r = max_abs(&evaluate_u(system, &x));
    for it in 0..max_iter {
        if r <= goal {
            return (x, it);
        }
        let u = DVector::from_vec(evaluate_u(system, &x));
        let step = match jacobian(system, &x).lu().solve(&(-&u)) {
            Some(s) => s,
            None => return (x, it),
        };
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-6 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let rt = max_abs(&evaluate_u(system, &trial));
            if rt < r {
                x = trial;
                r = rt;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            return (x, it);
        }
    }
    (x, max_iter)
}

fn damped_fixed_point(system: &QlcSystem, start: &[f64], goal: f64, opts: &LambdaOptions, radius: f64) -> (Vec<f64>, usize) {
    let mut x = start.to_vec();
    for it in 0..opts.max_iter {
        if max_abs(&evaluate_u(system, &x)) <= goal {
            return (x, it);
        }
        let f = fixed_point_map(system, &x);
        for (a, b) in x.iter_mut().zip(&f) {
            *a = (1.0 - opts.theta) * *a + opts.theta * b;
        }
        project(&mut x, radius);
    }
    (x, opts.max_iter)
}

pub fn solve_lambda(system: &QlcSystem, grid: &Grid, opts: &LambdaOptions) -> Result<LambdaSolveReport> {
    let m = system.m;
    let tolerances: Vec<f64> = system.c.iter().map(|c| opts.tol_u * c.abs().max(1.0)).collect();
    let scale = max_abs(&system.c);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let goal = opts.inner_tol * scale;
    let radius = ball_radius(system, grid);
    let accept = |u: &[f64]| u.iter().zip(&tolerances).all(|(a, t)| a.abs() <= *t);
    let mut warnings = Vec::new();
    let finish = |lambda: Vec<f64>, iterations, method, warnings: Vec<String>| {
        let residuals = evaluate_u(system, &lambda);
        LambdaSolveReport {
            converged: accept(&residuals),
            lambda,
            residuals,
            tolerances: tolerances.clone(),
            iterations,
            method,
            radius,
            warnings,
        }
    };
    if system.c.iter().all(|&c| c == 0.0) && system.l.iter().all(|l| l.iter().all(|&v| v == 0.0)) {
        return Ok(finish(vec![0.0; m], 0, LambdaMethod::Trivial, warnings));
    }
    if m == 1 {
        let (x, it) = bisection(system, goal, opts.max_iter);
        let r = finish(x, it, LambdaMethod::Bisection, warnings);
        return if r.converged {
            Ok(r)
        } else {
            Err(Error::NoSolutionFound { best_residual: max_abs(&r.residuals) })
        };
    }
    let mut total = 0;
    let (x, it) = damped_fixed_point(system, &vec![0.0; m], goal, opts, radius);
    total += it;
    let mut best = (max_abs(&evaluate_u(system, &x)), x, LambdaMethod::DampedFixedPoint);
    if best.0 > goal {
        let (x, it) = newton(system, &best.1, goal, 100);
        total += it;
        let r = max_abs(&evaluate_u(system, &x));
        if r < best.0 {
            best = (r, x, LambdaMethod::NewtonFallback);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ball = if radius > 0.0 && radius.is_finite() { radius } else { 1.0 };
    for _ in 0..opts.restarts {
        if best.0 <= goal {
            break;
        }
        let start: Vec<f64> = (0..m).map(|_| rng.random_range(-ball..ball) / (m as f64).sqrt()).collect();
        let (x, it) = damped_fixed_point(system, &start, goal, opts, radius);
        let (x, it2) = newton(system, &x, goal, 100);
        total += it + it2;
        let r = max_abs(&evaluate_u(system, &x));
        if r < best.0 {
            best = (r, x, LambdaMethod::RandomRestart);
        }
    }
    if best.0 > goal {
        warnings.push(format!("inner tolerance {goal:.3e} not reached (best {:.3e})", best.0));
    }
    let r = finish(best.1, total, best.2, warnings);
    if r.converged {
        Ok(r)
    } else {
        Err(Error::NoSolutionFound { best_residual: best.0 })
    }
}

/// `U_k` recomputed from an independent cascade solve with control `h`.
pub fn recompute_u(cascade: &HeatCascade, xi: &SpaceTimeField, h: &Control, basis: &DirectionBasis) -> Result<Vec<f64>> {
    let e = evaluate(cascade, xi, Some(h))?;
    let k = sensitivity_kernel(&e.traces.y, &e.traces.z)?;
    Ok(basis.normals.iter().map(|w| cascade.grid.boundary.inner(w, &k)).collect())
}

#[derive(Debug, Clone)]
pub struct ExactOptions {
    /// Schedule for the approximate first stage (its `epsilon` is replaced by `ε₀`).
    pub stage1: RegularizationSchedule,
    pub basis: BasisOptions,
    pub lambda: LambdaOptions,
    /// Skip stage 1 (pure finite-dimensional solve).
    pub skip_stage1: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExactResult {
    #[serde(skip)]
    pub h: Control,
    #[serde(skip)]
    pub h0: Control,
    pub m: usize,
    pub epsilon: f64,
    pub epsilon0: f64,
    /// Measured stage-2 amplification used for `ε₀`.
    pub amplification: f64,
    pub stage1_trace_norm: f64,
    pub lambda: LambdaSolveReport,
    /// `U_k` from an independent re-solve of `h₀ + h₁`.
    pub u_recomputed: Vec<f64>,
    pub c: Vec<f64>,
    pub kernel_l1_before: f64,
    pub kernel_l1_after: f64,
    pub gamma_deviation: f64,
    pub basis_trace_errors: Vec<[f64; 2]>,
    pub basis_reached: bool,
    pub u_ok: bool,
    pub kernel_ok: bool,
    pub notes: Vec<String>,
}

fn stage_two(
    cascade: &HeatCascade,
    xi1: &SpaceTimeField,
    basis: &DirectionBasis,
    controls: &BasisControls,
    opts: &LambdaOptions,
) -> Result<(QlcSystem, LambdaSolveReport, Control)> {
    let xi_traces = evaluate(cascade, xi1, None)?.traces;
    let flat: Vec<TracePair> = controls.traces.iter().flat_map(|p| p.iter().cloned()).collect();
    let system = assemble_qlc(basis, &flat, &xi_traces, &cascade.grid)?;
    let report = solve_lambda(&system, &cascade.grid, opts)?;
    let h1 = assemble_control(&controls.controls, &report.lambda, cascade.zero_control());
    Ok((system, report, h1))
}

/// Two-stage exact insensitizing for the span of `directions`, plus `ε`-approximate
/// insensitizing. `Nt` must be a multiple of `2M`.
pub fn exact_insensitize(
    cascade: &HeatCascade,
    xi: &SpaceTimeField,
    directions: &[PerturbationField],
    epsilon: f64,
    options: &ExactOptions,
) -> Result<ExactResult> {
    let g = &cascade.grid;
    let basis = orthonormalize_normal_traces(directions, &g.boundary)?;
    let m = basis.dim();
    let targets = build_gamma_targets(&basis, cascade.time, &g.boundary)?;
    let controls = compute_basis_controls(cascade, &basis, &targets, &options.basis)?;
    let d = gamma_identity_tensor(
        &basis,
        &controls.traces.iter().map(|p| [p[0].y.clone(), p[1].y.clone()]).collect::<Vec<_>>(),
        &controls.traces.iter().map(|p| [p[0].z.clone(), p[1].z.clone()]).collect::<Vec<_>>(),
        g,
    );
    let gamma_deviation = tensor_deviation(&d);
    let mut notes = Vec::new();
    if gamma_deviation > 1.0 / (2 * m) as f64 {
        notes.push(format!(
            "basis traces deviate from the ideal tensor by {gamma_deviation:.3e} > 1/(2M); no convergence guarantee"
        ));
    }
    let before = evaluate(cascade, xi, None)?;

    let (h0, amplification, epsilon0, stage1_norm) = if options.skip_stage1 {
        (cascade.zero_control(), f64::NAN, f64::NAN, before.traces.norm(g))
    } else {
        // Calibration: stage 2 on ξ itself measures ‖traces(h₁)‖ / ‖traces(ξ)‖.
        let amp = match stage_two(cascade, xi, &basis, &controls, &options.lambda) {
            Ok((_, _, h1)) => {
                let xi_norm = before.traces.norm(g);
                if xi_norm > 0.0 {
                    cascade.apply_l(&h1)?.norm(g) / xi_norm
                } else {
                    0.0
                }
            }
            Err(e) => {
                notes.push(format!("calibration solve failed ({e}); using amplification 1"));
                1.0
            }
        };
        let eps0 = epsilon.sqrt() / (amp + 1.0);
        let r = approx_trace_control(cascade, xi, &TraceTarget::zero(cascade), &options.stage1.clone().with_epsilon(eps0))?;
        if !r.met {
            notes.push(format!(
                "stage 1 reached trace norm {:.3e} > eps0 = {eps0:.3e}",
                r.residual_y + r.residual_z
            ));
        }
        (r.h.clone(), amp, eps0, r.residual_y + r.residual_z)
    };
    let xi1 = xi.add(&h0.embed(g));
    let (system, report, h1) = stage_two(cascade, &xi1, &basis, &controls, &options.lambda)?;
    let h = h0.add(&h1);
    let u_recomputed = recompute_u(cascade, xi, &h, &basis)?;
    let after = evaluate(cascade, xi, Some(&h))?;
    let u_ok = u_recomputed
        .iter()
        .zip(&system.c)
        .all(|(u, c)| u.abs() <= options.lambda.tol_u * c.abs().max(1.0));
    let kernel_ok = after.kernel_l1 <= epsilon;
    Ok(ExactResult {
        h,
        h0,
        m,
        epsilon,
        epsilon0,
        amplification,
        stage1_trace_norm: stage1_norm,
        c: system.c.clone(),
        lambda: report,
        u_recomputed,
        kernel_l1_before: before.kernel_l1,
        kernel_l1_after: after.kernel_l1,
        gamma_deviation,
        basis_trace_errors: controls.trace_errors.clone(),
        basis_reached: controls.reached,
        u_ok,
        kernel_ok,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_grid, DomainSpec, Face, GeometricCase, RegionShape};

    fn grid(n: usize) -> Grid {
        build_grid(&DomainSpec::unit_square(
            n,
            RegionShape::Rect { x0: 0.55, x1: 0.9, y0: 0.1, y1: 0.9 },
            RegionShape::Disk { cx: 0.3, cy: 0.5, r: 0.2 },
            GeometricCase::Disjoint,
        ))
        .unwrap()
    }

    fn samples(v: Vec<f64>) -> PerturbationField {
        PerturbationField::NormalTraceSamples { values: v }
    }

    #[test]
    fn orthonormalization_examples() {
        let g = grid(9);
        let b = &g.boundary;
        let one = samples(vec![1.0; b.len()]);
        let basis = orthonormalize_normal_traces(&[one.clone()], b).unwrap();
        assert!(basis.normals[0].iter().all(|v| (v - 0.5).abs() < 1e-14));
        let dup = orthonormalize_normal_traces(&[one.clone(), one.clone()], b).unwrap();
        assert_eq!(dup.dim(), 1);
        let rt = orthonormalize_normal_traces(&[PerturbationField::face(Face::Right), PerturbationField::face(Face::Top)], b).unwrap();
        assert_eq!(rt.dim(), 2);
        assert!(b.inner(&rt.normals[0], &rt.normals[1]).abs() <= 1e-12);
        let zero = samples(vec![0.0; b.len()]);
        assert!(matches!(orthonormalize_normal_traces(&[zero], b), Err(Error::AllDirectionsTangent)));
    }

    #[test]
    fn gamma_identity_is_exact() {
        let g = grid(9);
        let faces = [Face::Right, Face::Top, Face::Left];
        for m in 1..=3 {
            let dirs: Vec<_> = faces[..m].iter().map(|&f| PerturbationField::face(f)).collect();
            let basis = orthonormalize_normal_traces(&dirs, &g.boundary).unwrap();
            let time = TimeGrid::new(1.0, rounded_nt(16, m)).unwrap();
            let t = build_gamma_targets(&basis, time, &g.boundary).unwrap();
            let d = gamma_identity_tensor(&basis, &t.y, &t.z, &g);
            assert!(tensor_deviation(&d) <= 1e-8, "M={m}: {}", tensor_deviation(&d));
            for k in 0..m {
                let [w1, w2] = window_levels(time, m, k).unwrap();
                for n in 0..time.levels() {
                    if !w1.contains(&n) {
                        assert!(t.y[k][0].level(n).iter().all(|&v| v == 0.0));
                    }
                    if !w2.contains(&n) {
                        assert!(t.y[k][1].level(n).iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
        let basis = orthonormalize_normal_traces(&[PerturbationField::face(Face::Right)], &g.boundary).unwrap();
        let bad = TimeGrid::new(1.0, 7).unwrap();
        assert!(matches!(build_gamma_targets(&basis, bad, &g.boundary), Err(Error::BadTimeDivision { .. })));
    }

    fn ideal_system(c: Vec<f64>) -> QlcSystem {
        let m = c.len();
        let time = TimeGrid::new(1.0, 2).unwrap();
        let t = BoundaryTrace::zeros(time, 1);
        QlcSystem {
            m,
            q: (0..m).map(|k| ideal_tensor(m, k) * 0.5).collect(),
            l: vec![DVector::zeros(2 * m); m],
            c,
            xi_traces: TracePair { y: t.clone(), z: t.clone() },
            basis_traces: vec![TracePair { y: t.clone(), z: t }; 2 * m],
        }
    }

    #[test]
    fn ideal_systems_are_solved_exactly() {
        let g = grid(9);
        let s = ideal_system(vec![-1.0]);
        assert_eq!(evaluate_u(&s, &[0.0]), vec![-1.0]);
        assert_eq!(evaluate_u(&s, &[1.0]), vec![0.0]);
        let r = solve_lambda(&s, &g, &LambdaOptions::default()).unwrap();
        assert!((r.lambda[0] - 1.0).abs() < 1e-9);
        let s = ideal_system(vec![-1.0, -4.0]);
        let r = solve_lambda(&s, &g, &LambdaOptions::default()).unwrap();
        assert!((r.lambda[0] - 1.0).abs() < 1e-9 && (r.lambda[1] - 2.0).abs() < 1e-9, "{:?}", r.lambda);
        let s = ideal_system(vec![3.0, -2.0, 0.5]);
        let r = solve_lambda(&s, &g, &LambdaOptions::default()).unwrap();
        for (l, c) in r.lambda.iter().zip([3.0f64, -2.0, 0.5]) {
            assert!((l - signed_sqrt(-c)).abs() < 1e-9);
        }
        let s = ideal_system(vec![0.0, 0.0]);
        let r = solve_lambda(&s, &g, &LambdaOptions::default()).unwrap();
        assert_eq!(r.method, LambdaMethod::Trivial);
        assert_eq!(r.lambda, vec![0.0, 0.0]);
    }

    #[test]
    fn u_is_quadratic_plus_linear_plus_constant() {
        let mut s = ideal_system(vec![0.3, -0.2]);
        s.l[0] = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4]);
        let u0 = evaluate_u(&s, &[0.0, 0.0]);
        assert_eq!(u0, vec![0.3, -0.2]);
        let u = evaluate_u(&s, &[0.5, -1.5]);
        let mu = [0.5, 0.5, -1.5, 1.5];
        let lin: f64 = mu.iter().zip(s.l[0].iter()).map(|(a, b)| a * b).sum();
        assert!((u[0] - (0.25 + lin + 0.3)).abs() < 1e-14);
        assert!((u[1] - (-1.5 * 1.5 - 0.2)).abs() < 1e-14);
    }

    #[test]
    fn assembly_homogeneity_and_zero_source() {
        let g = grid(9);
        let time = TimeGrid::new(1.0, 4).unwrap();
        let basis = orthonormalize_normal_traces(&[PerturbationField::face(Face::Right)], &g.boundary).unwrap();
        let nb = g.boundary.len();
        let mk = |s: f64| TracePair {
            y: BoundaryTrace::from_fn(time, nb, |n, p| s * ((n * 7 + p) % 5) as f64),
            z: BoundaryTrace::from_fn(time, nb, |n, p| s * ((n * 3 + p * 2) % 7) as f64 - s),
        };
        let xi = mk(0.7);
        let traces = vec![mk(1.0), mk(-0.5)];
        let a = assemble_qlc(&basis, &traces, &xi, &g).unwrap();
        let doubled: Vec<_> = traces.iter().map(|t| t.scaled(2.0)).collect();
        let b = assemble_qlc(&basis, &doubled, &xi, &g).unwrap();
        assert!((&b.q[0] - &a.q[0] * 4.0).abs().max() < 1e-12);
        assert!((&b.l[0] - &a.l[0] * 2.0).abs().max() < 1e-12);
        assert_eq!(a.c, b.c);
        assert!((&a.q[0] - a.q[0].transpose()).abs().max() == 0.0);
        let z = assemble_qlc(&basis, &traces, &xi.scaled(0.0), &g).unwrap();
        assert!(z.l[0].iter().all(|&v| v == 0.0) && z.c[0] == 0.0);
        assert!(assemble_qlc(&basis, &traces[..1], &xi, &g).is_err());
    }

    #[test]
    fn nt_rounding() {
        assert_eq!(rounded_nt(64, 1), 64);
        assert_eq!(rounded_nt(64, 3), 66);
        assert_eq!(rounded_nt(5, 2), 8);
    }
}
