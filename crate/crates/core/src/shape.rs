//! The observation functional, its boundary shape-derivative kernel and a
//! re-solve finite-difference check on dilated rectangles.

use serde::Serialize;

use crate::domain::{build_grid, normal_component, BoundaryGeometry, DomainSpec, Face, Grid, PerturbationField};
use crate::error::{check_len, Error, Result};
use crate::pde::{BoundaryTrace, Control, HeatCascade, SourceTerm, SpaceTimeField, TimeGrid};

/// `k(x) = ∫₀ᵀ ∂ₙy ∂ₙz dt` at every boundary node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityKernel(pub Vec<f64>);

impl std::ops::Deref for SensitivityKernel {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `J = ½ ∫₀ᵀ ∫_Θ y²`.
pub fn evaluate_j(grid: &Grid, y: &SpaceTimeField) -> f64 {
    evaluate_j_weighted(grid, y, &grid.theta_mask)
}

/// `J` with nodal quadrature weights (relative to the cell area) for `Θ`.
pub fn evaluate_j_weighted(grid: &Grid, y: &SpaceTimeField, weights: &[f64]) -> f64 {
    let area = grid.cell_area();
    let mut total = 0.0;
    for n in 0..y.levels() {
        let s: f64 = y.level(n).iter().zip(weights).map(|(v, m)| m * v * v).sum();
        total += y.time.weight(n) * s;
    }
    0.5 * area * total
}

pub fn sensitivity_kernel(y_trace: &BoundaryTrace, z_trace: &BoundaryTrace) -> Result<SensitivityKernel> {
    y_trace.check_compatible(z_trace)?;
    let mut k = vec![0.0; y_trace.width()];
    for n in 0..y_trace.levels() {
        let w = y_trace.time.weight(n);
        for ((dst, a), b) in k.iter_mut().zip(y_trace.level(n)).zip(z_trace.level(n)) {
            *dst += w * a * b;
        }
    }
    Ok(SensitivityKernel(k))
}

/// `∫_{∂Ω} (V·n) k dσ`.
pub fn directional_derivative(kernel: &SensitivityKernel, v: &PerturbationField, b: &BoundaryGeometry) -> Result<f64> {
    check_len("kernel", b.len(), kernel.len())?;
    let vn = normal_component(v, b)?;
    Ok(b.inner(&vn, kernel))
}

/// `‖k‖_{L¹(∂Ω)}`.
pub fn kernel_l1_norm(kernel: &SensitivityKernel, b: &BoundaryGeometry) -> f64 {
    b.points.iter().zip(kernel.iter()).map(|(p, k)| p.weight * k.abs()).sum()
}

/// Shape derivative of `J` for data `(ξ, h)` by the boundary formula.
pub fn formula_dj(cascade: &HeatCascade, xi: &SpaceTimeField, h: Option<&Control>, v: &PerturbationField) -> Result<f64> {
    let traces = cascade.cascade_traces(xi, h)?;
    let k = sensitivity_kernel(&traces.y, &traces.z)?;
    directional_derivative(&k, v, &cascade.grid.boundary)
}

/// Data held fixed in absolute coordinates while the rectangle moves.
#[derive(Debug, Clone)]
pub struct ShapeProblem {
    pub spec: DomainSpec,
    pub time: TimeGrid,
    pub source: SourceTerm,
    /// Control on the reference grid, if any.
    pub control: Option<Control>,
}

/// One centered difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdSample {
    pub tau: f64,
    pub j_plus: f64,
    pub j_minus: f64,
    pub fd_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdEstimate {
    pub samples: Vec<FdSample>,
    /// Extrapolated value from the last two samples (quadratic error model).
    pub richardson: Option<f64>,
}

impl FdEstimate {
    pub fn best(&self) -> f64 {
        self.richardson.unwrap_or_else(|| self.samples.last().map_or(0.0, |s| s.fd_value))
    }
}

impl ShapeProblem {
    pub fn reference_grid(&self) -> Result<Grid> {
        build_grid(&self.spec)
    }

    /// `J` on the rectangle described by `spec`, with source and control resampled.
    pub fn j_on(&self, spec: &DomainSpec) -> Result<f64> {
        for (name, r) in [("omega", &spec.omega), ("theta", &spec.theta)] {
            if !spec.rect_contains_closed(r) {
                return Err(Error::PerturbationTooLarge(format!("{name} leaves the perturbed rectangle")));
            }
        }
        let grid = build_grid(spec)?;
        let xi = self.source.sample(&grid, self.time, &self.spec);
        let control = match &self.control {
            Some(h) => Some(self.resample_control(h, &grid)?),
            None => None,
        };
        let cascade = HeatCascade::new(grid, self.time)?;
        let y = cascade.solve_forward(&xi, control.as_ref())?;
        // Cell-fraction weights keep the measure of Θ independent of where the nodes land.
        let weights = cascade.grid.cell_fractions(&spec.theta);
        Ok(evaluate_j_weighted(&cascade.grid, &y, &weights))
    }

    fn resample_control(&self, h: &Control, target: &Grid) -> Result<Control> {
        let base = self.reference_grid()?;
        let full = h.embed(&base);
        let mut out = Control::zeros_on(target, self.time);
        for n in 0..self.time.levels() {
            let src = full.level(n);
            for (dst, &k) in out.level_mut(n).iter_mut().zip(&target.omega_nodes) {
                let (x, y) = target.node_xy(k);
                *dst = base.interpolate(src, x, y);
            }
        }
        Ok(out)
    }

    /// Boundary-formula value on the reference rectangle.
    pub fn formula_value(&self, v: &PerturbationField) -> Result<f64> {
        let grid = self.reference_grid()?;
        let xi = self.source.sample(&grid, self.time, &self.spec);
        let cascade = HeatCascade::new(grid, self.time)?;
        formula_dj(&cascade, &xi, self.control.as_ref(), v)
    }

    /// `(J(Ω_τ) − J(Ω_{−τ})) / 2τ` for a face dilation.
    pub fn centered_difference(&self, face: Face, tau: f64) -> Result<FdSample> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::PerturbationTooLarge(format!("step must be positive, got {tau}")));
        }
        let plus = self.spec.dilated(face, tau);
        let minus = self.spec.dilated(face, -tau);
        let (jp, jm) = rayon::join(|| self.j_on(&plus), || self.j_on(&minus));
        let (j_plus, j_minus) = (jp?, jm?);
        Ok(FdSample {
            tau,
            j_plus,
            j_minus,
            fd_value: (j_plus - j_minus) / (2.0 * tau),
        })
    }
}

/// Re-solve estimate of the derivative of `J` along a rectangle-preserving `V`.
pub fn finite_difference_dj(problem: &ShapeProblem, v: &PerturbationField, taus: &[f64]) -> Result<FdEstimate> {
    let face = v
        .is_rect_dilation()
        .ok_or_else(|| Error::GeometryUnsupported("finite differences need a unit-profile face dilation".into()))?;
    let samples = taus
        .iter()
        .map(|&t| problem.centered_difference(face, t))
        .collect::<Result<Vec<_>>>()?;
    let richardson = match samples.as_slice() {
        [.., a, b] if a.tau != b.tau => {
            let (t1, t2) = (a.tau * a.tau, b.tau * b.tau);
            Some((t1 * b.fd_value - t2 * a.fd_value) / (t1 - t2))
        }
        _ => None,
    };
    Ok(FdEstimate { samples, richardson })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{GeometricCase, Profile, RegionShape};
    use proptest::prelude::*;

    fn grid(n: usize) -> Grid {
        build_grid(&DomainSpec::unit_square(
            n,
            RegionShape::Rect { x0: 0.55, x1: 0.9, y0: 0.1, y1: 0.9 },
            RegionShape::Rect { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 },
            GeometricCase::Intersecting,
        ))
        .unwrap()
    }

    #[test]
    fn j_of_constant_field() {
        let g = grid(9);
        let t = TimeGrid::new(2.0, 8).unwrap();
        let y = SpaceTimeField::from_fn(t, g.n_nodes(), |_, _| 1.0);
        // Theta covers every node: area of the node cells is 81 h^2.
        let expect = 0.5 * 81.0 * g.cell_area() * 2.0;
        assert!((evaluate_j(&g, &y) - expect).abs() < 1e-12);
        assert!((evaluate_j(&g, &y.scaled(3.0)) - 9.0 * expect).abs() < 1e-11);
        assert_eq!(evaluate_j(&g, &SpaceTimeField::zeros(t, 81)), 0.0);
    }

    #[test]
    fn kernel_examples() {
        let g = grid(9);
        let t = TimeGrid::new(1.0, 16).unwrap();
        let nb = g.boundary.len();
        let one = BoundaryTrace::from_fn(t, nb, |_, _| 1.0);
        let k = sensitivity_kernel(&one, &one).unwrap();
        assert!(k.iter().all(|v| (v - 1.0).abs() < 1e-14));
        let k0 = sensitivity_kernel(&one, &BoundaryTrace::zeros(t, nb)).unwrap();
        assert!(k0.iter().all(|&v| v == 0.0));
        let a = BoundaryTrace::from_fn(t, nb, |n, _| if n < 8 { 1.0 } else { 0.0 });
        let b = BoundaryTrace::from_fn(t, nb, |n, _| if n > 8 { 1.0 } else { 0.0 });
        let kd = sensitivity_kernel(&a, &b).unwrap();
        assert!(kd.iter().all(|v| v.abs() <= t.dt()));
        assert!(sensitivity_kernel(&one, &BoundaryTrace::zeros(t, nb - 1)).is_err());
    }

    #[test]
    fn derivative_examples() {
        let g = grid(9);
        let b = &g.boundary;
        let two = SensitivityKernel(vec![2.0; b.len()]);
        let all = PerturbationField::NormalTraceSamples { values: vec![1.0; b.len()] };
        assert!((directional_derivative(&two, &all, b).unwrap() - 8.0).abs() < 1e-12);
        let none = PerturbationField::NormalTraceSamples { values: vec![0.0; b.len()] };
        assert_eq!(directional_derivative(&two, &none, b).unwrap(), 0.0);
        let k = SensitivityKernel((0..b.len()).map(|p| p as f64).collect());
        let right: f64 = b.points.iter().zip(k.iter()).filter(|(p, _)| p.face == Face::Right).map(|(p, v)| p.weight * v).sum();
        let d = directional_derivative(&k, &PerturbationField::face(Face::Right), b).unwrap();
        assert!((d - right).abs() < 1e-12);
        assert!((kernel_l1_norm(&SensitivityKernel(vec![-3.0; b.len()]), b) - 12.0).abs() < 1e-12);
        assert_eq!(kernel_l1_norm(&SensitivityKernel(vec![0.0; b.len()]), b), 0.0);
        assert!(directional_derivative(&SensitivityKernel(vec![0.0; 3]), &all, b).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn holder_and_norm_axioms(
            k1 in prop::collection::vec(-5.0f64..5.0, 36),
            k2 in prop::collection::vec(-5.0f64..5.0, 36),
            vn in prop::collection::vec(-2.0f64..2.0, 36),
            c in -3.0f64..3.0,
        ) {
            let g = grid(9);
            let b = &g.boundary;
            let (a, bb) = (SensitivityKernel(k1.clone()), SensitivityKernel(k2.clone()));
            let v = PerturbationField::NormalTraceSamples { values: vn.clone() };
            let sup = vn.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let d = directional_derivative(&a, &v, b).unwrap();
            prop_assert!(d.abs() <= kernel_l1_norm(&a, b) * sup * (1.0 + 1e-12));
            let sum = SensitivityKernel(k1.iter().zip(&k2).map(|(x, y)| x + y).collect());
            let ca = SensitivityKernel(k1.iter().map(|x| c * x).collect());
            prop_assert!(kernel_l1_norm(&sum, b) <= kernel_l1_norm(&a, b) + kernel_l1_norm(&bb, b) + 1e-12);
            prop_assert!((kernel_l1_norm(&ca, b) - c.abs() * kernel_l1_norm(&a, b)).abs() < 1e-12 * (1.0 + kernel_l1_norm(&ca, b)));
            let dsum = directional_derivative(&sum, &v, b).unwrap();
            prop_assert!((dsum - d - directional_derivative(&bb, &v, b).unwrap()).abs() < 1e-10);
        }
    }

    fn problem(source: SourceTerm, omega: RegionShape, theta: RegionShape) -> ShapeProblem {
        ShapeProblem {
            spec: DomainSpec::unit_square(11, omega, theta, GeometricCase::Disjoint),
            time: TimeGrid::new(0.5, 16).unwrap(),
            source,
            control: None,
        }
    }

    #[test]
    fn zero_data_gives_zero_difference() {
        let p = problem(
            SourceTerm::Zero,
            RegionShape::Rect { x0: 0.6, x1: 0.9, y0: 0.1, y1: 0.9 },
            RegionShape::Disk { cx: 0.3, cy: 0.5, r: 0.15 },
        );
        let est = finite_difference_dj(&p, &PerturbationField::face(Face::Right), &[1e-2, 5e-3]).unwrap();
        assert_eq!(est.best(), 0.0);
    }

    #[test]
    fn mirrored_left_dilation_matches_right() {
        let src = SourceTerm::GaussianBump { cx: 0.7, cy: 0.4, s: 0.15, amplitude: 1.0, window: None };
        let omega = RegionShape::Rect { x0: 0.6, x1: 0.9, y0: 0.1, y1: 0.9 };
        let theta = RegionShape::Disk { cx: 0.3, cy: 0.5, r: 0.15 };
        let p = problem(src, omega, theta);
        let q = problem(src.mirrored_x(1.0), omega.mirrored_x(1.0), theta.mirrored_x(1.0));
        let a = p.centered_difference(Face::Right, 1e-2).unwrap();
        let b = q.centered_difference(Face::Left, 1e-2).unwrap();
        assert!((a.fd_value - b.fd_value).abs() <= 1e-10 * a.fd_value.abs().max(1e-300));
        assert!(a.fd_value > 0.0);
    }

    #[test]
    fn shrinking_past_a_region_is_reported() {
        let p = problem(
            SourceTerm::Zero,
            RegionShape::Rect { x0: 0.6, x1: 0.9, y0: 0.1, y1: 0.9 },
            RegionShape::Disk { cx: 0.3, cy: 0.5, r: 0.15 },
        );
        assert!(matches!(p.centered_difference(Face::Right, 0.2), Err(Error::PerturbationTooLarge(_))));
        let curved = PerturbationField::FaceDilation { face: Face::Top, profile: Profile::Sine { mode: 1, amplitude: 1.0 } };
        assert!(matches!(finite_difference_dj(&p, &curved, &[1e-2]), Err(Error::GeometryUnsupported(_))));
    }
}
