//! Scenario configuration (TOML). Every section rejects unknown keys; parse
//! errors carry `line:column`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{DomainSpec, Face, GeometricCase, Grid, PerturbationField, Profile, RegionShape};
use crate::error::{Error, Result};
use crate::io::{parse_trace_samples, samples_on_boundary};
use crate::pde::{SourceTerm, TimeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    #[serde(default = "one")]
    pub lx: f64,
    #[serde(default = "one")]
    pub ly: f64,
    #[serde(default = "default_n")]
    pub nx: usize,
    #[serde(default = "default_n")]
    pub ny: usize,
    pub omega: RegionShape,
    pub theta: RegionShape,
    /// Inferred from the region closures when absent.
    #[serde(default)]
    pub case: Option<GeometricCase>,
}

impl DomainSection {
    pub fn spec(&self) -> DomainSpec {
        let case = self.case.unwrap_or(if self.omega.closures_disjoint(&self.theta) {
            GeometricCase::Disjoint
        } else {
            GeometricCase::Intersecting
        });
        DomainSpec {
            lx: self.lx,
            ly: self.ly,
            nx: self.nx,
            ny: self.ny,
            omega: self.omega,
            theta: self.theta,
            case,
            origin: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    #[serde(default = "one")]
    pub t_final: f64,
    #[serde(default = "default_nt")]
    pub nt: usize,
}

impl Default for TimeSection {
    fn default() -> Self {
        TimeSection { t_final: 1.0, nt: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalModeKey {
    None,
    Approximate,
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsKey {
    #[serde(default = "one")]
    pub trace: f64,
    #[serde(default = "one")]
    pub terminal: f64,
}

impl Default for WeightsKey {
    fn default() -> Self {
        WeightsKey { trace: 1.0, terminal: 1.0 }
    }
}

/// `y_T = amplitude * φ_{p,q}` with `φ` the discrete sine eigenvector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalTarget {
    pub p: usize,
    pub q: usize,
    pub amplitude: f64,
}

/// `[control]`: one of `epsilon` (absolute) or `epsilon_relative` (fraction of
/// the uncontrolled kernel norm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub epsilon_relative: Option<f64>,
    #[serde(default = "alpha_start")]
    pub alpha_start: f64,
    #[serde(default = "alpha_end")]
    pub alpha_end: f64,
    #[serde(default = "alpha_factor")]
    pub alpha_factor: f64,
    #[serde(default = "cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "cg_maxit")]
    pub cg_maxit: usize,
    #[serde(default = "terminal_none")]
    pub terminal_mode: TerminalModeKey,
    #[serde(default)]
    pub weights: WeightsKey,
    /// Required for `terminal_mode = "approximate"`.
    #[serde(default)]
    pub terminal_target: Option<TerminalTarget>,
    /// Approximate: `‖y(T) − y_T‖ ≤ rel · ‖y_T‖`. Null: `‖y(T)‖ ≤ rel · ‖y_ξ(T)‖`.
    #[serde(default = "terminal_tol")]
    pub terminal_tol_relative: f64,
    #[serde(default)]
    pub allow_disjoint_terminal: bool,
}

impl Default for ControlSection {
    fn default() -> Self {
        toml::from_str("").expect("all control keys have defaults")
    }
}

/// One entry of `[directions].fields`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DirectionEntry {
    FaceDilation {
        face: Face,
        #[serde(default = "unit_profile")]
        profile: Profile,
    },
    NormalTraceSamples {
        values: Vec<f64>,
    },
    /// `arc,value` samples, interpolated onto the boundary nodes. Relative paths
    /// resolve against the config file's directory.
    TraceCsv {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionsSection {
    pub fields: Vec<DirectionEntry>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub epsilon_relative: Option<f64>,
    /// Target accuracy of each basis control, relative to its target trace norm.
    #[serde(default = "basis_error")]
    pub relative_error: f64,
    #[serde(default = "alpha_start")]
    pub alpha_start: f64,
    #[serde(default = "exact_alpha_end")]
    pub alpha_end: f64,
    #[serde(default = "alpha_factor")]
    pub alpha_factor: f64,
    #[serde(default = "exact_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "exact_cg_maxit")]
    pub cg_maxit: usize,
    #[serde(default = "yes")]
    pub restrict_to_support: bool,
    #[serde(default = "tol_u")]
    pub tol_u: f64,
    #[serde(default = "restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub skip_stage1: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstructiveVariant {
    ThetaInOmega,
    BoundaryTheta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstructiveSection {
    pub variant: ConstructiveVariant,
    /// Relative bound on `z` outside Θ (boundary variant).
    #[serde(default = "constructive_tol")]
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSection {
    #[serde(default = "right_face")]
    pub direction: PerturbationField,
    #[serde(default = "taus")]
    pub taus: Vec<f64>,
    #[serde(default = "shape_tol")]
    pub tol: f64,
}

impl Default for ShapeSection {
    fn default() -> Self {
        ShapeSection {
            direction: right_face(),
            taus: taus(),
            tol: shape_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub svg: bool,
    /// Persist the synthesized control as a binary container.
    #[serde(default = "yes")]
    pub control: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: None,
            svg: false,
            control: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    domain: Option<DomainSection>,
    #[serde(default)]
    time: TimeSection,
    #[serde(default = "zero_source")]
    source: SourceTerm,
    #[serde(default)]
    control: ControlSection,
    directions: Option<DirectionsSection>,
    constructive: Option<ConstructiveSection>,
    #[serde(default)]
    shape: ShapeSection,
    #[serde(default)]
    output: OutputSection,
}

/// Validated scenario, defaults filled in. Serializes back to the echo stored in reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub domain: DomainSection,
    pub time: TimeSection,
    pub source: SourceTerm,
    pub control: ControlSection,
    pub directions: Option<DirectionsSection>,
    pub constructive: Option<ConstructiveSection>,
    pub shape: ShapeSection,
    pub output: OutputSection,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_n() -> usize {
    33
}
fn default_nt() -> usize {
    64
}
fn alpha_start() -> f64 {
    1e-2
}
fn alpha_end() -> f64 {
    1e-10
}
fn exact_alpha_end() -> f64 {
    1e-6
}
fn alpha_factor() -> f64 {
    10.0
}
fn cg_tol() -> f64 {
    1e-10
}
fn cg_maxit() -> usize {
    2000
}
fn exact_cg_tol() -> f64 {
    1e-8
}
fn exact_cg_maxit() -> usize {
    5000
}
fn terminal_none() -> TerminalModeKey {
    TerminalModeKey::None
}
fn terminal_tol() -> f64 {
    0.05
}
fn basis_error() -> f64 {
    0.05
}
fn tol_u() -> f64 {
    1e-6
}
fn restarts() -> usize {
    5
}
fn constructive_tol() -> f64 {
    1e-3
}
fn right_face() -> PerturbationField {
    PerturbationField::face(Face::Right)
}
fn taus() -> Vec<f64> {
    vec![1e-2, 5e-3]
}
fn shape_tol() -> f64 {
    0.05
}
fn unit_profile() -> Profile {
    Profile::Unit
}
fn zero_source() -> SourceTerm {
    SourceTerm::Zero
}

/// `line:column` (1-based) of a byte offset.
fn position(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

fn check_positive(what: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} must be positive and finite, got {v}")))
    }
}

fn check_epsilon(section: &str, abs: Option<f64>, rel: Option<f64>) -> Result<()> {
    match (abs, rel) {
        (Some(_), Some(_)) => Err(Error::Validation(format!("[{section}]: give epsilon or epsilon_relative, not both"))),
        (Some(e), None) => check_positive(&format!("[{section}] epsilon"), e),
        (None, Some(e)) => check_positive(&format!("[{section}] epsilon_relative"), e),
        (None, None) => Ok(()),
    }
}

fn check_schedule(section: &str, start: f64, end: f64, factor: f64, cg_tol: f64, cg_maxit: usize) -> Result<()> {
    check_positive(&format!("[{section}] alpha_start"), start)?;
    check_positive(&format!("[{section}] alpha_end"), end)?;
    check_positive(&format!("[{section}] cg_tol"), cg_tol)?;
    if end > start {
        return Err(Error::Validation(format!("[{section}] alpha_end exceeds alpha_start")));
    }
    if !(factor.is_finite() && factor > 1.0) {
        return Err(Error::Validation(format!("[{section}] alpha_factor must exceed 1")));
    }
    if cg_maxit == 0 {
        return Err(Error::Validation(format!("[{section}] cg_maxit must be positive")));
    }
    Ok(())
}

impl ScenarioConfig {
    /// Parses TOML text; `base_dir` anchors relative paths.
    pub fn from_str_in(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| match e.span() {
            Some(span) => {
                let (line, col) = position(text, span.start);
                Error::Parse(format!("line {line}, column {col}: {}", e.message().trim_end()))
            }
            None => Error::Parse(e.message().trim_end().to_string()),
        })?;
        let domain = raw.domain.ok_or_else(|| Error::Validation("missing [domain] section".into()))?;
        let cfg = ScenarioConfig {
            domain,
            time: raw.time,
            source: raw.source,
            control: raw.control,
            directions: raw.directions,
            constructive: raw.constructive,
            shape: raw.shape,
            output: raw.output,
            base_dir: base_dir.to_path_buf(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str_in(&text, &base).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.domain_spec().validate().map_err(|e| Error::Validation(format!("[domain]: {e}")))?;
        self.time_grid().map_err(|e| Error::Validation(format!("[time]: {e}")))?;
        let c = &self.control;
        check_epsilon("control", c.epsilon, c.epsilon_relative)?;
        check_schedule("control", c.alpha_start, c.alpha_end, c.alpha_factor, c.cg_tol, c.cg_maxit)?;
        check_positive("[control] weights.trace", c.weights.trace)?;
        check_positive("[control] weights.terminal", c.weights.terminal)?;
        check_positive("[control] terminal_tol_relative", c.terminal_tol_relative)?;
        if c.terminal_mode == TerminalModeKey::Approximate && c.terminal_target.is_none() {
            return Err(Error::Validation("[control] terminal_mode = \"approximate\" needs terminal_target".into()));
        }
        if let Some(t) = c.terminal_target {
            if t.p == 0 || t.q == 0 || t.p > self.domain.nx || t.q > self.domain.ny || !t.amplitude.is_finite() {
                return Err(Error::Validation("[control] terminal_target: mode indices out of range".into()));
            }
        }
        if let Some(d) = &self.directions {
            if d.fields.is_empty() {
                return Err(Error::Validation("[directions] fields is empty".into()));
            }
            check_epsilon("directions", d.epsilon, d.epsilon_relative)?;
            check_schedule("directions", d.alpha_start, d.alpha_end, d.alpha_factor, d.cg_tol, d.cg_maxit)?;
            check_positive("[directions] relative_error", d.relative_error)?;
            check_positive("[directions] tol_u", d.tol_u)?;
        }
        if let Some(k) = &self.constructive {
            check_positive("[constructive] tol", k.tol)?;
        }
        if self.shape.taus.is_empty() {
            return Err(Error::Validation("[shape] taus is empty".into()));
        }
        for &t in &self.shape.taus {
            check_positive("[shape] taus entry", t)?;
        }
        check_positive("[shape] tol", self.shape.tol)?;
        Ok(())
    }

    pub fn domain_spec(&self) -> DomainSpec {
        self.domain.spec()
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.time.t_final, self.time.nt)
    }

    /// Direction fields with CSV samples resolved onto the boundary of `grid`.
    pub fn resolve_directions(&self, grid: &Grid) -> Result<Vec<PerturbationField>> {
        let d = self
            .directions
            .as_ref()
            .ok_or_else(|| Error::Validation("missing [directions] section".into()))?;
        if d.fields.is_empty() {
            return Err(Error::Validation("[directions] fields is empty".into()));
        }
        d.fields
            .iter()
            .map(|e| match e {
                DirectionEntry::FaceDilation { face, profile } => Ok(PerturbationField::FaceDilation {
                    face: *face,
                    profile: *profile,
                }),
                DirectionEntry::NormalTraceSamples { values } => Ok(PerturbationField::NormalTraceSamples { values: values.clone() }),
                DirectionEntry::TraceCsv { path } => {
                    let full = self.base_dir.join(path);
                    let text = std::fs::read_to_string(&full)
                        .map_err(|e| Error::Validation(format!("[directions] cannot read {}: {e}", full.display())))?;
                    let samples = parse_trace_samples(&text).map_err(|e| match e {
                        Error::Parse(m) => Error::Parse(format!("{}: {m}", full.display())),
                        other => other,
                    })?;
                    Ok(PerturbationField::NormalTraceSamples {
                        values: samples_on_boundary(&samples, &grid.boundary)?,
                    })
                }
            })
            .collect()
    }
}
