//! Explicit exact-insensitizing controls built from smooth cutoffs: `Θ ⋐ ω`, and
//! an annular `ω` around the boundary of a disk `Θ`.

use serde::Serialize;

use crate::control_approx::evaluate;
use crate::domain::{Grid, RegionShape};
use crate::error::{Error, Result};
use crate::pde::{Control, HeatCascade, SpaceTimeField};

/// `r(s) = 6s⁵ − 15s⁴ + 10s³` on `[0, 1]`, clamped outside, with `r'` and `r''`.
pub fn quintic_ramp(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if s >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let s2 = s * s;
        let s3 = s2 * s;
        (
            s3 * (10.0 - 15.0 * s + 6.0 * s2),
            30.0 * s2 * (1.0 - 2.0 * s + s2),
            60.0 * s * (1.0 - 3.0 * s + 2.0 * s2),
        )
    }
}

/// Value, gradient and Laplacian at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub gx: f64,
    pub gy: f64,
    pub lap: f64,
}

impl Jet {
    const ONE: Jet = Jet { v: 1.0, gx: 0.0, gy: 0.0, lap: 0.0 };

    fn mul(self, o: Jet) -> Jet {
        Jet {
            v: self.v * o.v,
            gx: self.gx * o.v + self.v * o.gx,
            gy: self.gy * o.v + self.v * o.gy,
            lap: self.lap * o.v + self.v * o.lap + 2.0 * (self.gx * o.gx + self.gy * o.gy),
        }
    }
}

/// Closed-form `C²` cutoffs.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Cutoff {
    One,
    /// 0 for `ρ ≤ r0`, 1 for `ρ ≥ r1`.
    Radial { cx: f64, cy: f64, r0: f64, r1: f64 },
    /// 0 for `|ρ − radius| ≤ b0`, 1 for `|ρ − radius| ≥ b1`.
    Band { cx: f64, cy: f64, radius: f64, b0: f64, b1: f64 },
    /// 0 on `inner`, 1 outside `outer` (`[x0, x1, y0, y1]`).
    Rect { inner: [f64; 4], outer: [f64; 4] },
    Complement(Box<Cutoff>),
    Product(Vec<Cutoff>),
}

/// `1` on `[a0, a1]`, ramping to 0 at `o0` and `o1`.
fn plateau(x: f64, a0: f64, a1: f64, o0: f64, o1: f64) -> (f64, f64, f64) {
    if x < a0 {
        let w = a0 - o0;
        let (r, d, dd) = quintic_ramp((a0 - x) / w);
        (1.0 - r, d / w, -dd / (w * w))
    } else if x > a1 {
        let w = o1 - a1;
        let (r, d, dd) = quintic_ramp((x - a1) / w);
        (1.0 - r, -d / w, -dd / (w * w))
    } else {
        (1.0, 0.0, 0.0)
    }
}

fn radial_jet(x: f64, y: f64, cx: f64, cy: f64, profile: impl Fn(f64) -> (f64, f64, f64)) -> Jet {
    let (dx, dy) = (x - cx, y - cy);
    let rho = dx.hypot(dy);
    let (v, d, dd) = profile(rho);
    if d == 0.0 && dd == 0.0 {
        return Jet { v, gx: 0.0, gy: 0.0, lap: 0.0 };
    }
    Jet {
        v,
        gx: d * dx / rho,
        gy: d * dy / rho,
        lap: dd + d / rho,
    }
}

impl Cutoff {
    pub fn jet(&self, x: f64, y: f64) -> Jet {
        match self {
            Cutoff::One => Jet::ONE,
            &Cutoff::Radial { cx, cy, r0, r1 } => radial_jet(x, y, cx, cy, |rho| {
                let w = r1 - r0;
                let (r, d, dd) = quintic_ramp((rho - r0) / w);
                (r, d / w, dd / (w * w))
            }),
            &Cutoff::Band { cx, cy, radius, b0, b1 } => radial_jet(x, y, cx, cy, |rho| {
                let w = b1 - b0;
                let sgn = if rho >= radius { 1.0 } else { -1.0 };
                let (r, d, dd) = quintic_ramp(((rho - radius).abs() - b0) / w);
                (r, sgn * d / w, dd / (w * w))
            }),
            Cutoff::Rect { inner, outer } => {
                let (px, dpx, ddpx) = plateau(x, inner[0], inner[1], outer[0], outer[1]);
                let (py, dpy, ddpy) = plateau(y, inner[2], inner[3], outer[2], outer[3]);
                Jet {
                    v: 1.0 - px * py,
                    gx: -dpx * py,
                    gy: -px * dpy,
                    lap: -(ddpx * py + px * ddpy),
                }
            }
            Cutoff::Complement(c) => {
                let j = c.jet(x, y);
                Jet {
                    v: 1.0 - j.v,
                    gx: -j.gx,
                    gy: -j.gy,
                    lap: -j.lap,
                }
            }
            Cutoff::Product(cs) => cs.iter().fold(Jet::ONE, |acc, c| acc.mul(c.jet(x, y))),
        }
    }
}

/// A cutoff sampled at the interior nodes, with its analytic derivatives.
#[derive(Debug, Clone)]
pub struct CutoffFunction {
    pub cutoff: Cutoff,
    pub values: Vec<f64>,
    pub grad_x: Vec<f64>,
    pub grad_y: Vec<f64>,
    pub laplacian: Vec<f64>,
}

impl CutoffFunction {
    pub fn sample(grid: &Grid, cutoff: Cutoff) -> Self {
        let n = grid.n_nodes();
        let mut out = CutoffFunction {
            cutoff,
            values: Vec::with_capacity(n),
            grad_x: Vec::with_capacity(n),
            grad_y: Vec::with_capacity(n),
            laplacian: Vec::with_capacity(n),
        };
        for k in 0..n {
            let (x, y) = grid.node_xy(k);
            let j = out.cutoff.jet(x, y);
            out.values.push(j.v);
            out.grad_x.push(j.gx);
            out.grad_y.push(j.gy);
            out.laplacian.push(j.lap);
        }
        out
    }
}

fn spacing(grid: &Grid) -> f64 {
    grid.hx.max(grid.hy)
}

fn band_check(width: f64, h: f64, required: f64) -> Result<()> {
    let cells = (width / h * 1e9).round() / 1e9;
    if cells < required {
        return Err(Error::BandTooThin { cells, required });
    }
    Ok(())
}

/// `η = 0` on `zero_region`, `η = 1` outside `outer`. The ramp stops one grid
/// spacing short of `outer` so discrete commutators stay inside it.
pub fn build_cutoff(grid: &Grid, zero_region: Option<&RegionShape>, outer: &RegionShape) -> Result<CutoffFunction> {
    let h = spacing(grid);
    let Some(zero) = zero_region else {
        return Ok(CutoffFunction::sample(grid, Cutoff::One));
    };
    let cutoff = match (*zero, *outer) {
        (RegionShape::Disk { cx, cy, r }, RegionShape::Disk { cx: ox, cy: oy, r: or }) => {
            let gap = or - r - (cx - ox).hypot(cy - oy);
            band_check(gap, h, 3.0)?;
            Cutoff::Radial { cx, cy, r0: r, r1: r + gap - h }
        }
        (RegionShape::Disk { cx, cy, r }, RegionShape::Rect { x0, x1, y0, y1 }) => {
            let reach = (cx - x0).min(x1 - cx).min(cy - y0).min(y1 - cy);
            band_check(reach - r, h, 3.0)?;
            Cutoff::Radial { cx, cy, r0: r, r1: reach - h }
        }
        (RegionShape::Rect { x0, x1, y0, y1 }, RegionShape::Rect { x0: a0, x1: a1, y0: b0, y1: b1 }) => {
            let margin = (x0 - a0).min(a1 - x1).min(y0 - b0).min(b1 - y1);
            band_check(margin, h, 3.0)?;
            Cutoff::Rect {
                inner: [x0, x1, y0, y1],
                outer: [a0 + h, a1 - h, b0 + h, b1 - h],
            }
        }
        (z, o) => {
            return Err(Error::GeometryUnsupported(format!(
                "no closed-form cutoff for zero set {z:?} inside {o:?}"
            )))
        }
    };
    Ok(CutoffFunction::sample(grid, cutoff))
}

/// How `[Δ, η] f` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommutatorScheme {
    /// `2∇η·∇f + fΔη` with analytic `η` derivatives and centered differences for `∇f`.
    Analytic,
    /// `Δ_h(ηf) − ηΔ_h f` with the solver's own Laplacian.
    Discrete,
}

fn commutator_level(eta: &CutoffFunction, f: &[f64], grid: &Grid, scheme: CommutatorScheme, out: &mut [f64]) {
    let (nx, ny) = (grid.nx, grid.ny);
    match scheme {
        CommutatorScheme::Discrete => {
            let cx = 1.0 / (grid.hx * grid.hx);
            let cy = 1.0 / (grid.hy * grid.hy);
            let e = &eta.values;
            for j in 0..ny {
                for i in 0..nx {
                    let k = j * nx + i;
                    let mut s = 0.0;
                    if i > 0 {
                        s += cx * (e[k - 1] - e[k]) * f[k - 1];
                    }
                    if i + 1 < nx {
                        s += cx * (e[k + 1] - e[k]) * f[k + 1];
                    }
                    if j > 0 {
                        s += cy * (e[k - nx] - e[k]) * f[k - nx];
                    }
                    if j + 1 < ny {
                        s += cy * (e[k + nx] - e[k]) * f[k + nx];
                    }
                    out[k] = s;
                }
            }
        }
        CommutatorScheme::Analytic => {
            let at = |i: isize, j: isize| {
                if i < 0 || j < 0 || i >= nx as isize || j >= ny as isize {
                    0.0
                } else {
                    f[j as usize * nx + i as usize]
                }
            };
            for j in 0..ny {
                for i in 0..nx {
                    let k = j * nx + i;
                    let (ii, jj) = (i as isize, j as isize);
                    let fx = (at(ii + 1, jj) - at(ii - 1, jj)) / (2.0 * grid.hx);
                    let fy = (at(ii, jj + 1) - at(ii, jj - 1)) / (2.0 * grid.hy);
                    out[k] = 2.0 * (eta.grad_x[k] * fx + eta.grad_y[k] * fy) + f[k] * eta.laplacian[k];
                }
            }
        }
    }
}

/// `[Δ, η] f = Δ(ηf) − ηΔf`, levelwise.
pub fn commutator_apply(eta: &CutoffFunction, f: &SpaceTimeField, grid: &Grid, scheme: CommutatorScheme) -> SpaceTimeField {
    let mut out = SpaceTimeField::zeros(f.time, f.width());
    for n in 0..f.levels() {
        commutator_level(eta, f.level(n), grid, scheme, out.level_mut(n));
    }
    out
}

/// Nodal `g` with `½(gⁿ + gⁿ⁺¹) = (wⁿ⁺¹ − wⁿ)/dt − ½Δ_h(wⁿ⁺¹ + wⁿ)` for every step, so the
/// Crank–Nicolson scheme driven by `g` reproduces `w` exactly from `w⁰`. The free
/// alternating mode `(−1)ⁿ c` of the recurrence is chosen to minimise `Σ |gⁿ|²`.
fn heat_operator(w: &SpaceTimeField, grid: &Grid) -> SpaceTimeField {
    let time = w.time;
    let nt = time.nt;
    let dt = time.dt();
    let lap = crate::linalg::Laplacian {
        nx: grid.nx,
        ny: grid.ny,
        hx: grid.hx,
        hy: grid.hy,
    };
    let n = w.width();
    let mut g = SpaceTimeField::zeros(time, n);
    let mut prev_lap = lap.apply_new(w.level(0));
    for m in 0..nt {
        let next_lap = lap.apply_new(w.level(m + 1));
        for k in 0..n {
            let mid = (w.level(m + 1)[k] - w.level(m)[k]) / dt - 0.5 * (next_lap[k] + prev_lap[k]);
            let v = 2.0 * mid - g.level(m)[k];
            g.level_mut(m + 1)[k] = v;
        }
        prev_lap = next_lap;
    }
    for k in 0..n {
        let c = -(0..=nt)
            .map(|m| if m % 2 == 0 { g.level(m)[k] } else { -g.level(m)[k] })
            .sum::<f64>()
            / (nt + 1) as f64;
        for m in 0..=nt {
            g.level_mut(m)[k] += if m % 2 == 0 { c } else { -c };
        }
    }
    g
}

/// Outcome of a constructive synthesis and its independent re-solve.
#[derive(Debug, Clone, Serialize)]
pub struct ConstructiveReport {
    pub variant: String,
    #[serde(skip)]
    pub h: Control,
    /// Largest `|h|` at nodes outside `ω` before restriction (must be exactly 0).
    pub support_leak: f64,
    pub support_ok: bool,
    /// `sup |y − y₀| / sup |y₀|` for the re-solved state against the constructed one.
    pub state_defect: f64,
    /// `sup |z| / sup |y|` over all nodes.
    pub z_sup_relative: f64,
    /// `sup |z|` off `Θ`, relative to `sup |z|`.
    pub z_outside_relative: f64,
    /// `sup |y₀(0)| / sup |y₀|`: the construction's state does not start at rest.
    pub initial_mismatch: f64,
    pub kernel_l1_before: f64,
    pub kernel_l1_after: f64,
    pub control_norm: f64,
    pub met: bool,
    pub notes: Vec<String>,
}

fn leak(h: &SpaceTimeField, grid: &Grid) -> f64 {
    let mut m: f64 = 0.0;
    for n in 0..h.levels() {
        for (v, w) in h.level(n).iter().zip(&grid.omega_mask) {
            if *w == 0.0 {
                m = m.max(v.abs());
            }
        }
    }
    m
}

fn masked_sup(f: &SpaceTimeField, mask: &[f64], keep: f64) -> f64 {
    let mut m: f64 = 0.0;
    for n in 0..f.levels() {
        for (v, w) in f.level(n).iter().zip(mask) {
            if *w == keep {
                m = m.max(v.abs());
            }
        }
    }
    m
}

fn rel(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        a
    }
}

/// `Θ ⋐ ω`: `h = (η − 1)ξ − [Δ, η] y_ξ` with `η = 0` on `Θ` and `1` off `ω`, so that
/// `y₀ = η y_ξ` vanishes on `Θ` and `z₀ ≡ 0`.
pub fn construct_theta_in_omega(cascade: &HeatCascade, xi: &SpaceTimeField) -> Result<ConstructiveReport> {
    let g = &cascade.grid;
    let spec = &g.spec;
    let eta = build_cutoff(g, Some(&spec.theta), &spec.omega)?;
    if let Some(k) = (0..g.n_nodes()).find(|&k| g.theta_mask[k] != 0.0 && eta.values[k] != 0.0) {
        return Err(Error::GeometryUnsupported(format!("cutoff does not vanish at Θ node {k}")));
    }
    let y_xi = cascade.solve_forward(xi, None)?;
    let mut h_full = xi.masked(&eta.values.iter().map(|e| e - 1.0).collect::<Vec<_>>());
    h_full.axpy(-1.0, &commutator_apply(&eta, &y_xi, g, CommutatorScheme::Discrete));
    finish(cascade, xi, "theta-in-omega", &h_full, &y_xi.masked(&eta.values), 0.0, |r| {
        r.z_sup_relative <= 1e-13 && r.kernel_l1_after <= 1e-12 * r.kernel_l1_before.max(f64::MIN_POSITIVE)
    })
}

fn finish(
    cascade: &HeatCascade,
    xi: &SpaceTimeField,
    variant: &str,
    h_full: &SpaceTimeField,
    y0: &SpaceTimeField,
    initial_mismatch: f64,
    accept: impl Fn(&ConstructiveReport) -> bool,
) -> Result<ConstructiveReport> {
    let g = &cascade.grid;
    let support_leak = leak(h_full, g);
    let h = Control::restrict(h_full, g);
    let (y, z) = cascade.solve_cascade(xi, Some(&h))?;
    let y_sup = y.sup_norm();
    let z_sup = z.sup_norm();
    let before = evaluate(cascade, xi, None)?;
    let after = evaluate(cascade, xi, Some(&h))?;
    let mut r = ConstructiveReport {
        variant: variant.into(),
        control_norm: h.norm(g),
        h,
        support_leak,
        support_ok: support_leak == 0.0,
        state_defect: rel(y.sub(y0).sup_norm(), y0.sup_norm()),
        z_sup_relative: rel(z_sup, y_sup),
        z_outside_relative: rel(masked_sup(&z, &g.theta_mask, 0.0), z_sup),
        initial_mismatch,
        kernel_l1_before: before.kernel_l1,
        kernel_l1_after: after.kernel_l1,
        met: false,
        notes: Vec::new(),
    };
    if !r.support_ok {
        return Err(Error::VerificationFailed(format!(
            "control leaks outside omega (max |h| = {support_leak:e})"
        )));
    }
    r.met = accept(&r);
    Ok(r)
}

/// Radii of the nested bands `ω₀ ⋐ ω₁ ⋐ ω₂ ⋐ ω₃` around `∂Θ`, as half-widths `b₀..b₃`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NestedBands {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub b: [f64; 4],
}

/// Disk `Θ`, concentric annulus `ω ⊃ ∂Θ`, at least 12 cells of usable half-width.
pub fn nested_bands(grid: &Grid) -> Result<NestedBands> {
    let spec = &grid.spec;
    let (RegionShape::Disk { cx, cy, r }, RegionShape::Annulus { cx: ax, cy: ay, r_in, r_out }) = (spec.theta, spec.omega)
    else {
        return Err(Error::GeometryUnsupported(
            "boundary construction needs a disk theta and an annulus omega".into(),
        ));
    };
    if (cx - ax).hypot(cy - ay) > 1e-12 || !(r_in < r && r < r_out) {
        return Err(Error::GeometryUnsupported(
            "omega must be an annulus concentric with theta that contains its boundary".into(),
        ));
    }
    let h = spacing(grid);
    let half = (r - r_in).min(r_out - r);
    band_check(half - h, h, 12.0)?;
    let w = (half - h) / 4.0;
    Ok(NestedBands {
        cx,
        cy,
        radius: r,
        b: [w, 2.0 * w, 3.0 * w, 4.0 * w],
    })
}

/// `∂Θ ⊂ ω`: the control that makes `z₀` vanish off `Θ`,
/// `h = (η₀₁η₁₂η₂₃ − 1)ξ − [Δ, η₀₁η₁₂] y_ξ − (∂_t − Δ)([Δ, 𝟙_Θ η₀₁] z_ξ)`.
/// `tol` bounds `sup |z₀|` off `Θ` relative to `sup |z₀|`.
pub fn construct_boundary_theta(cascade: &HeatCascade, xi: &SpaceTimeField, tol: f64) -> Result<ConstructiveReport> {
    let g = &cascade.grid;
    let nb = nested_bands(g)?;
    let NestedBands { cx, cy, radius, b } = nb;
    let band = |b0, b1| Cutoff::Band { cx, cy, radius, b0, b1 };
    let e01 = band(b[0], b[1]);
    let e12 = band(b[1], b[2]);
    let e23 = band(b[2], b[3]);
    let psi = CutoffFunction::sample(
        g,
        Cutoff::Complement(Box::new(Cutoff::Radial { cx, cy, r0: radius - b[1], r1: radius - b[0] })),
    );
    if let Some(k) = (0..g.n_nodes()).find(|&k| g.theta_mask[k] == 0.0 && psi.values[k] != 0.0) {
        return Err(Error::GeometryUnsupported(format!("inner cutoff is nonzero off theta at node {k}")));
    }
    let eta23 = CutoffFunction::sample(g, e23.clone());
    let eta12 = CutoffFunction::sample(g, e12.clone());
    let eta0112 = CutoffFunction::sample(g, Cutoff::Product(vec![e01.clone(), e12.clone()]));
    let all = CutoffFunction::sample(g, Cutoff::Product(vec![e01, e12, e23]));

    let y_xi = cascade.solve_forward(&xi.masked(&eta23.values), None)?;
    let theta_eta12: Vec<f64> = eta12.values.iter().zip(&g.theta_mask).map(|(a, b)| a * b).collect();
    let z_xi = cascade.solve_backward(&y_xi.masked(&theta_eta12))?;
    let w = commutator_apply(&psi, &z_xi, g, CommutatorScheme::Discrete);
    let y0 = y_xi.masked(&eta0112.values).sub(&w);

    let mut h_full = xi.masked(&all.values.iter().map(|e| e - 1.0).collect::<Vec<_>>());
    h_full.axpy(-1.0, &commutator_apply(&eta0112, &y_xi, g, CommutatorScheme::Discrete));
    h_full.axpy(-1.0, &heat_operator(&w, g));
    let initial_mismatch = rel(
        w.level(0).iter().fold(0.0f64, |m, v| m.max(v.abs())),
        y0.sup_norm(),
    );
    let mut r = finish(cascade, xi, "boundary-theta", &h_full, &y0, initial_mismatch, |r| {
        r.z_outside_relative <= tol
    })?;
    if initial_mismatch > 0.0 {
        r.notes.push(format!(
            "constructed state starts at -[Δ, 1_Θ η01] z_xi(0) (relative size {initial_mismatch:.3e}), not at rest"
        ));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_grid, DomainSpec, GeometricCase};
    use crate::pde::{SourceTerm, TimeGrid, TimeWindow};
    use proptest::prelude::*;

    fn grid(n: usize, omega: RegionShape, theta: RegionShape) -> Grid {
        build_grid(&DomainSpec::unit_square(n, omega, theta, GeometricCase::Intersecting)).unwrap()
    }

    fn nested(n: usize) -> Grid {
        grid(
            n,
            RegionShape::Rect { x0: 0.2, x1: 0.8, y0: 0.2, y1: 0.8 },
            RegionShape::Disk { cx: 0.5, cy: 0.5, r: 0.15 },
        )
    }

    #[test]
    fn quintic_ramp_identities() {
        assert_eq!(quintic_ramp(0.0), (0.0, 0.0, 0.0));
        assert_eq!(quintic_ramp(1.0), (1.0, 0.0, 0.0));
        let r = |s: f64| 6.0 * s.powi(5) - 15.0 * s.powi(4) + 10.0 * s.powi(3);
        assert_eq!(r(1.0), 1.0);
        let e = 1e-7;
        for s in [e, 1.0 - e] {
            let (_, d, dd) = quintic_ramp(s);
            assert!(d.abs() < 1e-12 && dd.abs() < 1e-5, "{s}: {d} {dd}");
        }
    }

    /// True when a ramp breakpoint lies within `e` of `(x, y)`. The quintic ramp
    /// is only C² there, so a finite-difference Laplacian straddling it is off by O(e).
    fn near_break(c: &Cutoff, x: f64, y: f64, e: f64) -> bool {
        let close = |v: f64, knots: &[f64]| knots.iter().any(|k| (v - k).abs() <= e);
        match c {
            Cutoff::One => false,
            &Cutoff::Radial { cx, cy, r0, r1 } => close((x - cx).hypot(y - cy), &[r0, r1]),
            &Cutoff::Band { cx, cy, radius, b0, b1 } => close(((x - cx).hypot(y - cy) - radius).abs(), &[0.0, b0, b1]),
            Cutoff::Rect { inner, outer } => {
                close(x, &[inner[0], inner[1], outer[0], outer[1]]) || close(y, &[inner[2], inner[3], outer[2], outer[3]])
            }
            Cutoff::Complement(c) => near_break(c, x, y, e),
            Cutoff::Product(cs) => cs.iter().any(|c| near_break(c, x, y, e)),
        }
    }

    proptest! {
        #[test]
        fn jets_match_finite_differences(x in 0.05f64..0.95, y in 0.05f64..0.95) {
            let cs = [
                Cutoff::Radial { cx: 0.5, cy: 0.5, r0: 0.1, r1: 0.35 },
                Cutoff::Band { cx: 0.5, cy: 0.5, radius: 0.3, b0: 0.05, b1: 0.15 },
                Cutoff::Rect { inner: [0.3, 0.6, 0.35, 0.55], outer: [0.1, 0.8, 0.2, 0.9] },
                Cutoff::Product(vec![
                    Cutoff::Band { cx: 0.5, cy: 0.5, radius: 0.3, b0: 0.02, b1: 0.1 },
                    Cutoff::Band { cx: 0.5, cy: 0.5, radius: 0.3, b0: 0.1, b1: 0.2 },
                ]),
            ];
            let e = 1e-4;
            prop_assume!(!cs.iter().any(|c| near_break(c, x, y, 2.0 * e)));
            for c in &cs {
                let j = c.jet(x, y);
                prop_assert!((0.0..=1.0).contains(&j.v));
                let v = |a: f64, b: f64| c.jet(a, b).v;
                let d = 1e-6;
                let gx = (v(x + d, y) - v(x - d, y)) / (2.0 * d);
                let gy = (v(x, y + d) - v(x, y - d)) / (2.0 * d);
                let lap = (v(x + e, y) + v(x - e, y) + v(x, y + e) + v(x, y - e) - 4.0 * j.v) / (e * e);
                prop_assert!((gx - j.gx).abs() < 1e-5 * (1.0 + j.gx.abs()) && (gy - j.gy).abs() < 1e-5 * (1.0 + j.gy.abs()), "{c:?}");
                prop_assert!((lap - j.lap).abs() < 1e-2 * (1.0 + j.lap.abs()), "{c:?}: {lap} vs {}", j.lap);
            }
        }
    }

    #[test]
    fn cutoff_construction() {
        let g = nested(33);
        let spec = &g.spec;
        let one = build_cutoff(&g, None, &spec.omega).unwrap();
        assert!(one.values.iter().all(|&v| v == 1.0) && one.laplacian.iter().all(|&v| v == 0.0));
        let eta = build_cutoff(&g, Some(&spec.theta), &spec.omega).unwrap();
        for k in 0..g.n_nodes() {
            let (x, y) = g.node_xy(k);
            if g.theta_mask[k] != 0.0 {
                assert_eq!(eta.values[k], 0.0);
            }
            if !spec.omega.contains(x, y) {
                assert_eq!(eta.values[k], 1.0);
            }
            assert!((0.0..=1.0).contains(&eta.values[k]));
        }
        let thin = RegionShape::Disk { cx: 0.5, cy: 0.5, r: 0.25 };
        assert!(matches!(
            build_cutoff(&g, Some(&thin), &spec.omega),
            Err(Error::BandTooThin { .. })
        ));
        let rect = RegionShape::Rect { x0: 0.4, x1: 0.6, y0: 0.4, y1: 0.6 };
        assert!(build_cutoff(&g, Some(&rect), &spec.omega).is_ok());
        let annulus = RegionShape::Annulus { cx: 0.5, cy: 0.5, r_in: 0.1, r_out: 0.4 };
        assert!(matches!(build_cutoff(&g, Some(&rect), &annulus), Err(Error::GeometryUnsupported(_))));
    }

    #[test]
    fn commutator_examples() {
        let g = nested(33);
        let time = TimeGrid::new(1.0, 2).unwrap();
        let n = g.n_nodes();
        let f = SpaceTimeField::from_fn(time, n, |m, k| {
            let (x, y) = g.node_xy(k);
            (1.0 + m as f64) * (3.0 * x).sin() * (2.0 * y).cos()
        });
        let one = build_cutoff(&g, None, &g.spec.omega).unwrap();
        for s in [CommutatorScheme::Analytic, CommutatorScheme::Discrete] {
            assert_eq!(commutator_apply(&one, &f, &g, s).sup_norm(), 0.0);
        }
        let eta = build_cutoff(&g, Some(&g.spec.theta), &g.spec.omega).unwrap();
        // Discrete scheme is the defining identity.
        let lap = crate::linalg::Laplacian { nx: g.nx, ny: g.ny, hx: g.hx, hy: g.hy };
        let c = commutator_apply(&eta, &f, &g, CommutatorScheme::Discrete);
        for m in 0..time.levels() {
            let ef: Vec<f64> = f.level(m).iter().zip(&eta.values).map(|(a, b)| a * b).collect();
            let lhs = lap.apply_new(&ef);
            let lf = lap.apply_new(f.level(m));
            for k in 0..n {
                let direct = lhs[k] - eta.values[k] * lf[k];
                assert!((direct - c.level(m)[k]).abs() <= 1e-10 * (1.0 + direct.abs()));
            }
        }
        // Constants away from the boundary: the analytic form reduces to c Δη.
        let konst = SpaceTimeField::from_fn(time, n, |_, _| 2.0);
        let ca = commutator_apply(&eta, &konst, &g, CommutatorScheme::Analytic);
        for k in 0..n {
            let (i, j) = (k % g.nx, k / g.nx);
            if i > 0 && j > 0 && i + 1 < g.nx && j + 1 < g.ny {
                assert!((ca.level(0)[k] - 2.0 * eta.laplacian[k]).abs() < 1e-12);
            }
        }
        // Support: both vanish where η is locally constant.
        for s in [CommutatorScheme::Analytic, CommutatorScheme::Discrete] {
            let c = commutator_apply(&eta, &f, &g, s);
            for k in 0..n {
                let (x, y) = g.node_xy(k);
                if !g.spec.omega.contains(x, y) || g.spec.theta.contains(x, y) && eta.laplacian[k] == 0.0 && s == CommutatorScheme::Analytic {
                    assert_eq!(c.level(1)[k], 0.0);
                }
            }
        }
    }

    #[test]
    fn analytic_and_discrete_commutators_agree_under_refinement() {
        let err = |n: usize| {
            let g = nested(n);
            let time = TimeGrid::new(1.0, 1).unwrap();
            let f = SpaceTimeField::from_fn(time, g.n_nodes(), |_, k| {
                let (x, y) = g.node_xy(k);
                (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin()
            });
            let eta = build_cutoff(&g, Some(&g.spec.theta), &g.spec.omega).unwrap();
            let a = commutator_apply(&eta, &f, &g, CommutatorScheme::Analytic);
            let d = commutator_apply(&eta, &f, &g, CommutatorScheme::Discrete);
            a.sub(&d).sup_norm() / d.sup_norm()
        };
        let (e1, e2) = (err(33), err(65));
        assert!(e2 < e1 / 2.0, "{e1} {e2}");
    }

    fn cascade(g: Grid, nt: usize) -> HeatCascade {
        HeatCascade::new(g, TimeGrid::new(1.0, nt).unwrap()).unwrap()
    }

    #[test]
    fn theta_in_omega_is_exact() {
        let c = cascade(nested(25), 32);
        let src = SourceTerm::GaussianBump { cx: 0.3, cy: 0.4, s: 0.1, amplitude: 1.0, window: None };
        let xi = src.sample(&c.grid, c.time, &c.grid.spec);
        let r = construct_theta_in_omega(&c, &xi).unwrap();
        assert!(r.support_ok && r.met, "{r:?}");
        assert!(r.state_defect < 1e-12);
        let inside = SourceTerm::GaussianBump { cx: 0.5, cy: 0.5, s: 0.05, amplitude: 1.0, window: None };
        let r = construct_theta_in_omega(&c, &inside.sample(&c.grid, c.time, &c.grid.spec)).unwrap();
        assert!(r.met && r.kernel_l1_after <= 1e-12 * r.kernel_l1_before, "{r:?}");
        let r = construct_theta_in_omega(&c, &c.zero_field()).unwrap();
        assert_eq!(r.control_norm, 0.0);
        assert_eq!(r.kernel_l1_after, 0.0);
    }

    #[test]
    fn theta_in_omega_rejects_thin_margins() {
        let g = grid(
            17,
            RegionShape::Rect { x0: 0.3, x1: 0.7, y0: 0.3, y1: 0.7 },
            RegionShape::Rect { x0: 0.35, x1: 0.65, y0: 0.35, y1: 0.65 },
        );
        let c = cascade(g, 4);
        assert!(matches!(construct_theta_in_omega(&c, &c.zero_field()), Err(Error::BandTooThin { .. })));
    }

    fn annular(n: usize) -> Grid {
        grid(
            n,
            RegionShape::Annulus { cx: 0.5, cy: 0.5, r_in: 0.05, r_out: 0.45 },
            RegionShape::Disk { cx: 0.5, cy: 0.5, r: 0.25 },
        )
    }

    #[test]
    fn boundary_construction_vanishes_off_theta() {
        let c = cascade(annular(65), 32);
        let src = SourceTerm::GaussianBump {
            cx: 0.5,
            cy: 0.5,
            s: 0.05,
            amplitude: 1.0,
            window: Some(TimeWindow { t0: 0.5, t1: 1.0, smooth: true }),
        };
        let xi = src.sample(&c.grid, c.time, &c.grid.spec);
        let r = construct_boundary_theta(&c, &xi, 1e-2).unwrap();
        assert!(r.support_ok && r.met, "{r:?}");
        assert!(r.kernel_l1_after < 1e-2 * r.kernel_l1_before, "{r:?}");
        let zero = construct_boundary_theta(&c, &c.zero_field(), 1e-3).unwrap();
        assert_eq!(zero.control_norm, 0.0);
        let thin = cascade(annular(25), 8);
        assert!(matches!(
            construct_boundary_theta(&thin, &thin.zero_field(), 1e-3),
            Err(Error::BandTooThin { .. })
        ));
        let wrong = cascade(nested(25), 8);
        assert!(matches!(
            construct_boundary_theta(&wrong, &wrong.zero_field(), 1e-3),
            Err(Error::GeometryUnsupported(_))
        ));
    }
}
