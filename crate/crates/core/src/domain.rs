//! Reference rectangle, control/observation regions, boundary quadrature and
//! perturbation direction fields.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Concrete open subsets used for the control region and the observation region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionShape {
    #[serde(alias = "axis_rect")]
    Rect { x0: f64, x1: f64, y0: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
    Annulus { cx: f64, cy: f64, r_in: f64, r_out: f64 },
}

impl RegionShape {
    /// Membership in the open set.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            RegionShape::Rect { x0, x1, y0, y1 } => x > x0 && x < x1 && y > y0 && y < y1,
            RegionShape::Disk { cx, cy, r } => (x - cx).hypot(y - cy) < r,
            RegionShape::Annulus { cx, cy, r_in, r_out } => {
                let d = (x - cx).hypot(y - cy);
                d > r_in && d < r_out
            }
        }
    }

    fn is_well_formed(&self) -> bool {
        let finite = |v: &[f64]| v.iter().all(|a| a.is_finite());
        match *self {
            RegionShape::Rect { x0, x1, y0, y1 } => finite(&[x0, x1, y0, y1]) && x0 < x1 && y0 < y1,
            RegionShape::Disk { cx, cy, r } => finite(&[cx, cy, r]) && r > 0.0,
            RegionShape::Annulus { cx, cy, r_in, r_out } => {
                finite(&[cx, cy, r_in, r_out]) && r_in >= 0.0 && r_in < r_out
            }
        }
    }

    /// Closed bounding box `[xmin, xmax, ymin, ymax]`.
    pub fn bounding_box(&self) -> [f64; 4] {
        match *self {
            RegionShape::Rect { x0, x1, y0, y1 } => [x0, x1, y0, y1],
            RegionShape::Disk { cx, cy, r }
            | RegionShape::Annulus {
                cx, cy, r_out: r, ..
            } => [cx - r, cx + r, cy - r, cy + r],
        }
    }

    /// Mirror image under `x -> axis - x`.
    pub fn mirrored_x(&self, axis: f64) -> RegionShape {
        match *self {
            RegionShape::Rect { x0, x1, y0, y1 } => RegionShape::Rect {
                x0: axis - x1,
                x1: axis - x0,
                y0,
                y1,
            },
            RegionShape::Disk { cx, cy, r } => RegionShape::Disk { cx: axis - cx, cy, r },
            RegionShape::Annulus { cx, cy, r_in, r_out } => RegionShape::Annulus {
                cx: axis - cx,
                cy,
                r_in,
                r_out,
            },
        }
    }

    /// Conservative test that the closures of two regions do not meet.
    pub fn closures_disjoint(&self, other: &RegionShape) -> bool {
        use RegionShape::*;
        match (*self, *other) {
            (Rect { .. }, Rect { .. }) => {
                let a = self.bounding_box();
                let b = other.bounding_box();
                a[1] < b[0] || b[1] < a[0] || a[3] < b[2] || b[3] < a[2]
            }
            (Disk { cx, cy, r }, Disk { cx: dx, cy: dy, r: s }) => (cx - dx).hypot(cy - dy) > r + s,
            (Rect { x0, x1, y0, y1 }, Disk { cx, cy, r }) | (Disk { cx, cy, r }, Rect { x0, x1, y0, y1 }) => {
                let px = cx.clamp(x0, x1);
                let py = cy.clamp(y0, y1);
                (cx - px).hypot(cy - py) > r
            }
            (Annulus { cx, cy, r_in, r_out }, s) | (s, Annulus { cx, cy, r_in, r_out }) => {
                let outer = Disk { cx, cy, r: r_out };
                if outer.closures_disjoint(&s) {
                    return true;
                }
                // Inside the hole?
                match s {
                    Rect { x0, x1, y0, y1 } => [(x0, y0), (x0, y1), (x1, y0), (x1, y1)]
                        .iter()
                        .all(|&(x, y)| (x - cx).hypot(y - cy) < r_in),
                    Disk { cx: dx, cy: dy, r } => (dx - cx).hypot(dy - cy) + r < r_in,
                    Annulus { cx: dx, cy: dy, r_out, .. } => (dx - cx).hypot(dy - cy) + r_out < r_in,
                }
            }
        }
    }
}

/// The two geometric settings for control and observation regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometricCase {
    /// Closed observation region strictly inside the domain and away from the control region.
    Disjoint,
    /// Control and observation regions overlap.
    Intersecting,
}

/// Reference rectangle `[x_origin, x_origin + lx] x [y_origin, y_origin + ly]`
/// with `nx * ny` interior nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub lx: f64,
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
    pub omega: RegionShape,
    pub theta: RegionShape,
    pub case: GeometricCase,
    /// Lower-left corner. Nonzero only for left/bottom face dilations.
    #[serde(default)]
    pub origin: [f64; 2],
}

impl DomainSpec {
    pub fn unit_square(n: usize, omega: RegionShape, theta: RegionShape, case: GeometricCase) -> Self {
        DomainSpec {
            lx: 1.0,
            ly: 1.0,
            nx: n,
            ny: n,
            omega,
            theta,
            case,
            origin: [0.0, 0.0],
        }
    }

    /// Image of the rectangle under the face dilation `Id + tau V`.
    pub fn dilated(&self, face: Face, tau: f64) -> DomainSpec {
        let mut out = self.clone();
        match face {
            Face::Right => out.lx += tau,
            Face::Top => out.ly += tau,
            Face::Left => {
                out.lx += tau;
                out.origin[0] -= tau;
            }
            Face::Bottom => {
                out.ly += tau;
                out.origin[1] -= tau;
            }
        }
        out
    }

    /// Whether the closed bounding box of `r` lies in the closed rectangle.
    pub fn rect_contains_closed(&self, r: &RegionShape) -> bool {
        let b = r.bounding_box();
        b[0] >= self.origin[0]
            && b[1] <= self.origin[0] + self.lx
            && b[2] >= self.origin[1]
            && b[3] <= self.origin[1] + self.ly
    }

    fn rect_contains_strict(&self, r: &RegionShape) -> bool {
        let b = r.bounding_box();
        b[0] > self.origin[0]
            && b[1] < self.origin[0] + self.lx
            && b[2] > self.origin[1]
            && b[3] < self.origin[1] + self.ly
    }

    /// Parameter-level checks (no rasterization).
    pub fn validate(&self) -> Result<()> {
        if !(self.lx.is_finite() && self.ly.is_finite() && self.lx > 0.0 && self.ly > 0.0) {
            return Err(Error::InvalidSpec("side lengths must be positive".into()));
        }
        if self.nx < 3 || self.ny < 3 {
            return Err(Error::InvalidSpec(format!(
                "need at least 3 interior nodes per axis, got {}x{}",
                self.nx, self.ny
            )));
        }
        for (name, r) in [("omega", &self.omega), ("theta", &self.theta)] {
            if !r.is_well_formed() {
                return Err(Error::InvalidSpec(format!("{name}: degenerate region parameters")));
            }
            if !self.rect_contains_closed(r) {
                return Err(Error::InvalidSpec(format!("{name}: region leaves the domain rectangle")));
            }
        }
        if self.case == GeometricCase::Disjoint {
            if !self.rect_contains_strict(&self.theta) {
                return Err(Error::InvalidSpec(
                    "disjoint case: closure of theta must lie strictly inside the rectangle".into(),
                ));
            }
            if let RegionShape::Annulus { .. } = self.theta {
                return Err(Error::InvalidSpec(
                    "disjoint case: rectangle minus an annular theta is not connected".into(),
                ));
            }
            if !self.omega.closures_disjoint(&self.theta) {
                return Err(Error::InvalidSpec("disjoint case: omega meets the closure of theta".into()));
            }
        }
        Ok(())
    }
}

/// Faces of the rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    Bottom,
    Right,
    Top,
    Left,
}

impl Face {
    pub fn outward_normal(self) -> [f64; 2] {
        match self {
            Face::Bottom => [0.0, -1.0],
            Face::Right => [1.0, 0.0],
            Face::Top => [0.0, 1.0],
            Face::Left => [-1.0, 0.0],
        }
    }

    pub fn mirrored_x(self) -> Face {
        match self {
            Face::Right => Face::Left,
            Face::Left => Face::Right,
            f => f,
        }
    }
}

/// One boundary quadrature node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPoint {
    pub x: f64,
    pub y: f64,
    pub face: Face,
    pub normal: [f64; 2],
    /// Arc-length quadrature weight.
    pub weight: f64,
    /// Arc-length coordinate counter-clockwise from the lower-left corner.
    pub arc: f64,
    /// Position along its own face, measured from the face start.
    pub face_arc: f64,
    /// First and second interior nodes along the inward normal.
    pub inner: [usize; 2],
    /// Grid spacing along the normal.
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGeometry {
    pub points: Vec<BoundaryPoint>,
}

impl BoundaryGeometry {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.weight)
    }

    pub fn total_length(&self) -> f64 {
        self.weights().sum()
    }

    /// `sum_p w_p a_p b_p`.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.points
            .iter()
            .zip(a.iter().zip(b))
            .map(|(p, (x, y))| p.weight * x * y)
            .sum()
    }

    pub fn norm(&self, a: &[f64]) -> f64 {
        self.inner(a, a).sqrt()
    }
}

/// Values on the boundary quadrature nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryScalar(pub Vec<f64>);

impl std::ops::Deref for BoundaryScalar {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl BoundaryScalar {
    pub fn sup_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Rasterized domain.
#[derive(Debug, Clone)]
pub struct Grid {
    pub spec: DomainSpec,
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    pub omega_mask: Vec<f64>,
    pub theta_mask: Vec<f64>,
    /// Node indices inside the control region, ascending.
    pub omega_nodes: Vec<usize>,
    pub boundary: BoundaryGeometry,
}

impl Grid {
    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn x(&self, i: usize) -> f64 {
        self.spec.origin[0] + (i + 1) as f64 * self.hx
    }

    pub fn y(&self, j: usize) -> f64 {
        self.spec.origin[1] + (j + 1) as f64 * self.hy
    }

    pub fn node_xy(&self, k: usize) -> (f64, f64) {
        (self.x(k % self.nx), self.y(k / self.nx))
    }

    pub fn cell_area(&self) -> f64 {
        self.hx * self.hy
    }

    pub fn rasterize(&self, region: &RegionShape) -> Vec<f64> {
        (0..self.n_nodes())
            .map(|k| {
                let (x, y) = self.node_xy(k);
                if region.contains(x, y) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Fraction of each node's cell `[x ± hx/2] x [y ± hy/2]` covered by `region`.
    /// Exact for rectangles; 16 x 16 subsampling otherwise.
    pub fn cell_fractions(&self, region: &RegionShape) -> Vec<f64> {
        (0..self.n_nodes())
            .map(|k| {
                let (x, y) = self.node_xy(k);
                let (ax, bx) = (x - 0.5 * self.hx, x + 0.5 * self.hx);
                let (ay, by) = (y - 0.5 * self.hy, y + 0.5 * self.hy);
                match *region {
                    RegionShape::Rect { x0, x1, y0, y1 } => {
                        let fx = (bx.min(x1) - ax.max(x0)).max(0.0) / self.hx;
                        let fy = (by.min(y1) - ay.max(y0)).max(0.0) / self.hy;
                        fx * fy
                    }
                    _ => {
                        const S: usize = 16;
                        let mut hits = 0;
                        for a in 0..S {
                            for b in 0..S {
                                let px = ax + (a as f64 + 0.5) * self.hx / S as f64;
                                let py = ay + (b as f64 + 0.5) * self.hy / S as f64;
                                if region.contains(px, py) {
                                    hits += 1;
                                }
                            }
                        }
                        hits as f64 / (S * S) as f64
                    }
                }
            })
            .collect()
    }

    /// Nodal mask of `omega ∩ theta`.
    pub fn overlap_mask(&self) -> Vec<f64> {
        self.omega_mask.iter().zip(&self.theta_mask).map(|(a, b)| a * b).collect()
    }

    /// Bilinear interpolation of a nodal field (zero on the boundary) at an absolute point.
    /// Points outside the rectangle evaluate to zero.
    pub fn interpolate(&self, values: &[f64], x: f64, y: f64) -> f64 {
        let sx = (x - self.spec.origin[0]) / self.hx;
        let sy = (y - self.spec.origin[1]) / self.hy;
        if !(sx >= 0.0 && sy >= 0.0 && sx <= (self.nx + 1) as f64 && sy <= (self.ny + 1) as f64) {
            return 0.0;
        }
        // Padded indices: 0 and n+1 are boundary lines.
        let ix = (sx.floor() as usize).min(self.nx);
        let iy = (sy.floor() as usize).min(self.ny);
        let fx = sx - ix as f64;
        let fy = sy - iy as f64;
        let at = |pi: usize, pj: usize| -> f64 {
            if pi == 0 || pj == 0 || pi > self.nx || pj > self.ny {
                0.0
            } else {
                values[self.index(pi - 1, pj - 1)]
            }
        };
        (1.0 - fx) * (1.0 - fy) * at(ix, iy)
            + fx * (1.0 - fy) * at(ix + 1, iy)
            + (1.0 - fx) * fy * at(ix, iy + 1)
            + fx * fy * at(ix + 1, iy + 1)
    }
}

fn face_weights(n: usize, h: f64) -> Vec<f64> {
    // Trapezoid with corner values replaced by their neighbours; sums to (n+1) h.
    let mut w = vec![h; n];
    w[0] = 1.5 * h;
    w[n - 1] = 1.5 * h;
    w
}

fn build_boundary(spec: &DomainSpec, hx: f64, hy: f64) -> BoundaryGeometry {
    let (nx, ny) = (spec.nx, spec.ny);
    let (ox, oy) = (spec.origin[0], spec.origin[1]);
    let (lx, ly) = (spec.lx, spec.ly);
    let idx = |i: usize, j: usize| j * nx + i;
    let wx = face_weights(nx, hx);
    let wy = face_weights(ny, hy);
    let mut points = Vec::with_capacity(2 * (nx + ny));
    for i in 0..nx {
        let xl = (i + 1) as f64 * hx;
        points.push(BoundaryPoint {
            x: ox + xl,
            y: oy,
            face: Face::Bottom,
            normal: Face::Bottom.outward_normal(),
            weight: wx[i],
            arc: xl,
            face_arc: xl,
            inner: [idx(i, 0), idx(i, 1)],
            spacing: hy,
        });
    }
    for j in 0..ny {
        let yl = (j + 1) as f64 * hy;
        points.push(BoundaryPoint {
            x: ox + lx,
            y: oy + yl,
            face: Face::Right,
            normal: Face::Right.outward_normal(),
            weight: wy[j],
            arc: lx + yl,
            face_arc: yl,
            inner: [idx(nx - 1, j), idx(nx - 2, j)],
            spacing: hx,
        });
    }
    for i in (0..nx).rev() {
        let xl = (i + 1) as f64 * hx;
        points.push(BoundaryPoint {
            x: ox + xl,
            y: oy + ly,
            face: Face::Top,
            normal: Face::Top.outward_normal(),
            weight: wx[i],
            arc: lx + ly + (lx - xl),
            face_arc: xl,
            inner: [idx(i, ny - 1), idx(i, ny - 2)],
            spacing: hy,
        });
    }
    for j in (0..ny).rev() {
        let yl = (j + 1) as f64 * hy;
        points.push(BoundaryPoint {
            x: ox,
            y: oy + yl,
            face: Face::Left,
            normal: Face::Left.outward_normal(),
            weight: wy[j],
            arc: 2.0 * lx + ly + (ly - yl),
            face_arc: yl,
            inner: [idx(0, j), idx(1, j)],
            spacing: hx,
        });
    }
    BoundaryGeometry { points }
}

/// Rasterizes the domain: masks, control node list and boundary quadrature.
pub fn build_grid(spec: &DomainSpec) -> Result<Grid> {
    spec.validate()?;
    let hx = spec.lx / (spec.nx + 1) as f64;
    let hy = spec.ly / (spec.ny + 1) as f64;
    let mut grid = Grid {
        spec: spec.clone(),
        nx: spec.nx,
        ny: spec.ny,
        hx,
        hy,
        omega_mask: Vec::new(),
        theta_mask: Vec::new(),
        omega_nodes: Vec::new(),
        boundary: build_boundary(spec, hx, hy),
    };
    grid.omega_mask = grid.rasterize(&spec.omega);
    grid.theta_mask = grid.rasterize(&spec.theta);
    grid.omega_nodes = (0..grid.n_nodes()).filter(|&k| grid.omega_mask[k] > 0.0).collect();
    if grid.omega_nodes.is_empty() {
        return Err(Error::InvalidSpec("omega contains no grid node".into()));
    }
    if grid.theta_mask.iter().all(|&m| m == 0.0) {
        return Err(Error::InvalidSpec("theta contains no grid node".into()));
    }
    let shared = grid.overlap_mask().iter().filter(|&&m| m > 0.0).count();
    match spec.case {
        GeometricCase::Disjoint if shared > 0 => {
            return Err(Error::InvalidSpec(format!("disjoint case but masks share {shared} nodes")))
        }
        GeometricCase::Intersecting if shared == 0 => {
            return Err(Error::InvalidSpec("intersecting case but masks share no node".into()))
        }
        _ => {}
    }
    Ok(grid)
}

/// Smooth profile along a face, as a function of the face arc coordinate `s ∈ [0, L]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Unit,
    Sine { mode: u32, amplitude: f64 },
    Cosine { mode: u32, amplitude: f64 },
}

impl Profile {
    pub fn eval(&self, s: f64, length: f64) -> f64 {
        match *self {
            Profile::Unit => 1.0,
            Profile::Sine { mode, amplitude } => amplitude * (mode as f64 * std::f64::consts::PI * s / length).sin(),
            Profile::Cosine { mode, amplitude } => amplitude * (mode as f64 * std::f64::consts::PI * s / length).cos(),
        }
    }
}

/// Perturbation direction `V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationField {
    /// `V` equals `profile * n` on one face, vanishes on the opposite face and is
    /// tangent on the two others. With the unit profile the image is a dilated rectangle.
    FaceDilation {
        face: Face,
        #[serde(default = "unit_profile")]
        profile: Profile,
    },
    /// Normal trace given directly, one value per boundary node.
    NormalTraceSamples { values: Vec<f64> },
}

fn unit_profile() -> Profile {
    Profile::Unit
}

impl PerturbationField {
    pub fn face(face: Face) -> Self {
        PerturbationField::FaceDilation {
            face,
            profile: Profile::Unit,
        }
    }

    /// Whether `Id + tau V` keeps the rectangle a rectangle.
    pub fn is_rect_dilation(&self) -> Option<Face> {
        match self {
            PerturbationField::FaceDilation {
                face,
                profile: Profile::Unit,
            } => Some(*face),
            _ => None,
        }
    }

    /// Proxy for the perturbation size: the sup norm of `V·n`.
    pub fn sup_normal(&self, b: &BoundaryGeometry) -> Result<f64> {
        Ok(normal_component(self, b)?.sup_norm())
    }
}

/// `V·n` at every boundary node.
pub fn normal_component(v: &PerturbationField, b: &BoundaryGeometry) -> Result<BoundaryScalar> {
    match v {
        PerturbationField::NormalTraceSamples { values } => {
            check_len("normal trace samples", b.len(), values.len())?;
            Ok(BoundaryScalar(values.clone()))
        }
        PerturbationField::FaceDilation { face, profile } => {
            let len: f64 = b.points.iter().filter(|p| p.face == *face).map(|p| p.weight).sum();
            Ok(BoundaryScalar(
                b.points
                    .iter()
                    .map(|p| if p.face == *face { profile.eval(p.face_arc, len) } else { 0.0 })
                    .collect(),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_rect() -> RegionShape {
        RegionShape::Rect { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 }
    }

    #[test]
    fn full_region_mask_is_all_ones() {
        let spec = DomainSpec::unit_square(3, full_rect(), full_rect(), GeometricCase::Intersecting);
        let g = build_grid(&spec).unwrap();
        assert_eq!(g.omega_mask, vec![1.0; 9]);
        assert_eq!(g.omega_nodes.len(), 9);
    }

    #[test]
    fn perimeter_weights_sum() {
        let spec = DomainSpec::unit_square(3, full_rect(), full_rect(), GeometricCase::Intersecting);
        let g = build_grid(&spec).unwrap();
        assert!((g.boundary.total_length() - 4.0).abs() < 1e-12);
        let spec = DomainSpec {
            lx: 2.5,
            ly: 0.7,
            nx: 17,
            ny: 6,
            omega: RegionShape::Rect { x0: 0.0, x1: 2.5, y0: 0.0, y1: 0.7 },
            theta: RegionShape::Rect { x0: 0.0, x1: 2.5, y0: 0.0, y1: 0.7 },
            ..spec
        };
        let g = build_grid(&spec).unwrap();
        assert!((g.boundary.total_length() - 6.4).abs() < 1e-12 * 6.4);
        for p in &g.boundary.points {
            let n = p.normal;
            assert!((n[0].hypot(n[1]) - 1.0).abs() < 1e-15);
            assert!(n[0] == 0.0 || n[1] == 0.0);
        }
    }

    #[test]
    fn disjoint_case_with_identical_regions_is_rejected() {
        let r = RegionShape::Rect { x0: 0.2, x1: 0.4, y0: 0.2, y1: 0.4 };
        let spec = DomainSpec::unit_square(9, r, r, GeometricCase::Disjoint);
        assert!(matches!(build_grid(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn disjoint_masks_have_empty_product() {
        let spec = DomainSpec::unit_square(
            17,
            RegionShape::Rect { x0: 0.6, x1: 0.9, y0: 0.1, y1: 0.9 },
            RegionShape::Disk { cx: 0.3, cy: 0.5, r: 0.15 },
            GeometricCase::Disjoint,
        );
        let g = build_grid(&spec).unwrap();
        assert!(g.overlap_mask().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn empty_raster_is_invalid() {
        let spec = DomainSpec::unit_square(
            4,
            RegionShape::Disk { cx: 0.5, cy: 0.5, r: 0.01 },
            RegionShape::Disk { cx: 0.5, cy: 0.5, r: 0.3 },
            GeometricCase::Intersecting,
        );
        assert!(matches!(build_grid(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn face_dilation_normal_traces() {
        let spec = DomainSpec::unit_square(5, full_rect(), full_rect(), GeometricCase::Intersecting);
        let g = build_grid(&spec).unwrap();
        let vn = normal_component(&PerturbationField::face(Face::Right), &g.boundary).unwrap();
        for (p, v) in g.boundary.points.iter().zip(vn.iter()) {
            assert_eq!(*v, if p.face == Face::Right { 1.0 } else { 0.0 });
        }
        let top = normal_component(&PerturbationField::face(Face::Top), &g.boundary).unwrap();
        for (p, v) in g.boundary.points.iter().zip(top.iter()) {
            if p.face == Face::Left {
                assert_eq!(*v, 0.0);
            }
        }
        let samples: Vec<f64> = (0..g.boundary.len()).map(|k| k as f64 * 0.5).collect();
        let vn = normal_component(
            &PerturbationField::NormalTraceSamples { values: samples.clone() },
            &g.boundary,
        )
        .unwrap();
        assert_eq!(vn.0, samples);
        assert!(matches!(
            normal_component(&PerturbationField::NormalTraceSamples { values: vec![1.0; 3] }, &g.boundary),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bilinear_interpolation_reproduces_nodes() {
        let spec = DomainSpec::unit_square(6, full_rect(), full_rect(), GeometricCase::Intersecting);
        let g = build_grid(&spec).unwrap();
        let vals: Vec<f64> = (0..g.n_nodes()).map(|k| (k as f64).sin()).collect();
        for k in 0..g.n_nodes() {
            let (x, y) = g.node_xy(k);
            assert!((g.interpolate(&vals, x, y) - vals[k]).abs() < 1e-14);
        }
        assert_eq!(g.interpolate(&vals, 1.2, 0.5), 0.0);
        assert_eq!(g.interpolate(&vals, 0.0, 0.5), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn enlarging_a_region_keeps_its_nodes(r in 0.05f64..0.3, grow in 0.0f64..0.15, n in 5usize..20) {
                let spec = DomainSpec::unit_square(n, full_rect(), full_rect(), GeometricCase::Intersecting);
                let g = build_grid(&spec).unwrap();
                let small = g.rasterize(&RegionShape::Disk { cx: 0.5, cy: 0.45, r });
                let big = g.rasterize(&RegionShape::Disk { cx: 0.5, cy: 0.45, r: r + grow });
                for (a, b) in small.iter().zip(&big) {
                    prop_assert!(b >= a);
                }
                let small = g.rasterize(&RegionShape::Rect { x0: 0.3, x1: 0.3 + r, y0: 0.2, y1: 0.5 });
                let big = g.rasterize(&RegionShape::Rect { x0: 0.3 - grow, x1: 0.3 + r + grow, y0: 0.2, y1: 0.5 + grow });
                for (a, b) in small.iter().zip(&big) {
                    prop_assert!(b >= a);
                }
            }

            #[test]
            fn perimeter_for_any_rectangle(lx in 0.1f64..10.0, ly in 0.1f64..10.0, nx in 3usize..40, ny in 3usize..40) {
                let spec = DomainSpec {
                    lx, ly, nx, ny,
                    omega: RegionShape::Rect { x0: 0.0, x1: lx, y0: 0.0, y1: ly },
                    theta: RegionShape::Rect { x0: 0.0, x1: lx, y0: 0.0, y1: ly },
                    case: GeometricCase::Intersecting,
                    origin: [0.0, 0.0],
                };
                let g = build_grid(&spec).unwrap();
                let p = 2.0 * (lx + ly);
                prop_assert!((g.boundary.total_length() - p).abs() <= 1e-12 * p);
            }
        }
    }
}
