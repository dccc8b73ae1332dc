use serde::{Deserialize, Serialize};

use super::field::{SpaceTimeField, TimeGrid};
use crate::domain::{DomainSpec, Grid};

/// Time window applied to a source family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeWindow {
    pub t0: f64,
    pub t1: f64,
    /// Smooth (`sin^2`) edges instead of a sharp indicator.
    #[serde(default)]
    pub smooth: bool,
}

impl TimeWindow {
    pub fn eval(&self, t: f64) -> f64 {
        if t < self.t0 || t > self.t1 {
            return 0.0;
        }
        if self.smooth {
            let s = (t - self.t0) / (self.t1 - self.t0);
            (std::f64::consts::PI * s).sin().powi(2)
        } else {
            1.0
        }
    }
}

/// Analytic source families, defined in absolute coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceTerm {
    Zero,
    /// `amplitude * sin(pπx/Lx) sin(qπy/Ly)` on the reference rectangle, zero outside.
    Eigenmode {
        p: usize,
        q: usize,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        window: Option<TimeWindow>,
    },
    /// `amplitude * exp(-|x - c|^2 / (2 s^2))`.
    GaussianBump {
        cx: f64,
        cy: f64,
        s: f64,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        window: Option<TimeWindow>,
    },
}

fn one() -> f64 {
    1.0
}

impl SourceTerm {
    /// Value at `(t, x, y)`; `reference` fixes the frame of eigenmodes.
    pub fn eval(&self, reference: &DomainSpec, t: f64, x: f64, y: f64) -> f64 {
        use std::f64::consts::PI;
        match *self {
            SourceTerm::Zero => 0.0,
            SourceTerm::Eigenmode {
                p,
                q,
                amplitude,
                window,
            } => {
                let sx = (x - reference.origin[0]) / reference.lx;
                let sy = (y - reference.origin[1]) / reference.ly;
                if !(0.0..=1.0).contains(&sx) || !(0.0..=1.0).contains(&sy) {
                    return 0.0;
                }
                let w = window.map_or(1.0, |w| w.eval(t));
                amplitude * w * (p as f64 * PI * sx).sin() * (q as f64 * PI * sy).sin()
            }
            SourceTerm::GaussianBump {
                cx,
                cy,
                s,
                amplitude,
                window,
            } => {
                let w = window.map_or(1.0, |w| w.eval(t));
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                amplitude * w * (-r2 / (2.0 * s * s)).exp()
            }
        }
    }

    /// Samples the source at the nodes of `grid`.
    pub fn sample(&self, grid: &Grid, time: TimeGrid, reference: &DomainSpec) -> SpaceTimeField {
        SpaceTimeField::from_fn(time, grid.n_nodes(), |n, k| {
            let (x, y) = grid.node_xy(k);
            self.eval(reference, time.t(n), x, y)
        })
    }

    /// Mirror image under `x -> axis - x`, for a reference frame symmetric about `axis / 2`.
    pub fn mirrored_x(&self, axis: f64) -> SourceTerm {
        match *self {
            SourceTerm::Zero => SourceTerm::Zero,
            SourceTerm::Eigenmode { p, q, amplitude, window } => SourceTerm::Eigenmode {
                p,
                q,
                amplitude: if p % 2 == 0 { -amplitude } else { amplitude },
                window,
            },
            SourceTerm::GaussianBump { cx, cy, s, amplitude, window } => SourceTerm::GaussianBump {
                cx: axis - cx,
                cy,
                s,
                amplitude,
                window,
            },
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, SourceTerm::Zero)
    }
}
