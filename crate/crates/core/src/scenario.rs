//! Scenario runner: executes one subcommand on a validated config, re-solves
//! every reported number and writes the report, summary and plot data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{ConstructiveVariant, ScenarioConfig, TerminalModeKey};
use crate::constructive::{construct_boundary_theta, construct_theta_in_omega};
use crate::control_approx::{
    approx_insensitize, evaluate, insensitize_with_terminal, ChannelWeights, ControlResult, RegularizationSchedule,
    TerminalRequest,
};
use crate::domain::{build_grid, BoundaryGeometry, Grid};
use crate::error::{Context, Error, Result};
use crate::exact_fd::{exact_insensitize, orthonormalize_normal_traces, rounded_nt, BasisOptions, ExactOptions, LambdaOptions};
use crate::io::{svg_line_chart, two_column, Container};
use crate::linalg::Laplacian;
use crate::pde::{Control, HeatCascade, SpaceTimeField, TerminalState, TimeGrid};
use crate::shape::{finite_difference_dj, sensitivity_kernel, ShapeProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    VerifyShapeDerivative,
    RunApprox,
    RunExactFd,
    RunConstructive,
}

impl Subcommand {
    pub fn label(self) -> &'static str {
        match self {
            Subcommand::VerifyShapeDerivative => "verify shape-derivative",
            Subcommand::RunApprox => "run approx",
            Subcommand::RunExactFd => "run exact-fd",
            Subcommand::RunConstructive => "run constructive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Met,
    BestEffort,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Met => 0,
            Outcome::BestEffort => 2,
        }
    }

    fn from(met: bool) -> Self {
        if met {
            Outcome::Met
        } else {
            Outcome::BestEffort
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub seed: u64,
    pub parallel: bool,
}

/// Numerical modelling choices recorded with every run.
#[derive(Debug, Clone, Serialize)]
pub struct InterpretationFlag {
    pub name: &'static str,
    pub choice: &'static str,
}

fn interpretation_flags() -> Vec<InterpretationFlag> {
    let f = |name, choice| InterpretationFlag { name, choice };
    vec![
        f("time_stepping", "Crank-Nicolson with source averaged over each step"),
        f("time_quadrature", "trapezoidal weights matching the stepping"),
        f("gamma_windows", "half-windows are level sets of the time grid, end levels excluded"),
        f("gamma_normalization", "1 / ((|W1| + |W2|) |w|^2), making the discrete identity exact"),
        f("q_symmetrization", "q = (raw + raw^T) / 2; the tensor compared with delta is 2q"),
        f("basis_misfit", "measured on the support of the direction traces when restrict_to_support is set"),
        f("commutator", "discrete [L_h, eta] so the constructive state identity holds to round-off"),
        f("boundary_theta_initial_state", "the cutoff state does not start at rest; mismatch is reported"),
        f("null_control", "declared at a relative tolerance, never claimed exact"),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct Environment {
    pub version: &'static str,
    pub os: &'static str,
    pub arch: &'static str,
    pub threads: usize,
    pub parallel: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub run_id: String,
    pub subcommand: Subcommand,
    pub seed: u64,
    pub outcome: Outcome,
    pub config: ScenarioConfig,
    /// Everything here is recomputed by an independent solve.
    pub results: Value,
    pub interpretation: Vec<InterpretationFlag>,
    pub environment: Environment,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        self.outcome.exit_code()
    }
}

/// Report plus the text and binary artifacts that go next to it.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub summary_csv: String,
    pub kernel_dat: String,
    pub schedule_dat: String,
    pub control: Option<Control>,
    pub svgs: Vec<(String, String)>,
}

/// Stable id from the config echo, subcommand and seed.
pub fn run_id(cfg: &ScenarioConfig, sub: Subcommand, seed: u64) -> String {
    let echo = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::new()
        .chain_update(echo.as_bytes())
        .chain_update(sub.label().as_bytes())
        .chain_update(seed.to_le_bytes())
        .finalize();
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

struct Setup {
    cascade: HeatCascade,
    xi: SpaceTimeField,
}

fn setup(cfg: &ScenarioConfig, time: TimeGrid) -> Result<Setup> {
    let spec = cfg.domain_spec();
    let grid = build_grid(&spec).context("building the grid")?;
    let xi = cfg.source.sample(&grid, time, &spec);
    let cascade = HeatCascade::new(grid, time).context("factorizing the heat operator")?;
    Ok(Setup { cascade, xi })
}

fn kernel_rows(b: &BoundaryGeometry, k: &[f64]) -> Vec<(f64, f64)> {
    let mut rows: Vec<(f64, f64)> = b.points.iter().zip(k).map(|(p, v)| (p.arc, *v)).collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    rows
}

/// Kernel of `(ξ, h)` by a fresh cascade solve.
fn kernel_of(c: &HeatCascade, xi: &SpaceTimeField, h: Option<&Control>) -> Result<Vec<f64>> {
    let e = evaluate(c, xi, h)?;
    Ok(sensitivity_kernel(&e.traces.y, &e.traces.z)?.0)
}

/// Re-reads the control from its encoded container and re-evaluates the kernel.
fn replay(c: &HeatCascade, xi: &SpaceTimeField, h: &Control) -> Result<f64> {
    let back = Container::decode(&Container::from_control(h).encode())?.into_control()?;
    Ok(evaluate(c, xi, Some(&back))?.kernel_l1)
}

fn rel_change(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn num(v: f64) -> String {
    format!("{v:.17e}")
}

struct Computed {
    met: bool,
    results: Value,
    summary_csv: String,
    kernel: Vec<(f64, f64)>,
    kernel_before: Vec<(f64, f64)>,
    schedule: Vec<(f64, f64)>,
    schedule_header: [&'static str; 2],
    log_schedule: bool,
    control: Option<Control>,
}

/// Executes one subcommand. Pure computation; nothing touches the filesystem
/// except reading trace-sample files referenced by `[directions]`.
pub fn run_scenario(cfg: &ScenarioConfig, sub: Subcommand, opts: RunOptions) -> Result<RunArtifacts> {
    let started = Instant::now();
    let computed = match sub {
        Subcommand::VerifyShapeDerivative => verify_shape(cfg),
        Subcommand::RunApprox => run_approx(cfg),
        Subcommand::RunExactFd => run_exact(cfg, opts),
        Subcommand::RunConstructive => run_constructive(cfg),
    }
    .context(sub.label())?;
    let report = RunReport {
        run_id: run_id(cfg, sub, opts.seed),
        subcommand: sub,
        seed: opts.seed,
        outcome: Outcome::from(computed.met),
        config: cfg.clone(),
        results: computed.results,
        interpretation: interpretation_flags(),
        environment: Environment {
            version: env!("CARGO_PKG_VERSION"),
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            threads: rayon::current_num_threads(),
            parallel: opts.parallel,
        },
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let mut svgs = Vec::new();
    if cfg.output.svg {
        let mut series = vec![("after", computed.kernel.clone())];
        if !computed.kernel_before.is_empty() {
            series.insert(0, ("before", computed.kernel_before.clone()));
        }
        svgs.push(("kernel.svg".to_string(), svg_line_chart("sensitivity kernel vs arc length", &series, false, false)));
        let title = format!("{} vs {}", computed.schedule_header[1], computed.schedule_header[0]);
        svgs.push((
            "schedule.svg".to_string(),
            svg_line_chart(&title, &[(computed.schedule_header[1], computed.schedule.clone())], computed.log_schedule, true),
        ));
    }
    Ok(RunArtifacts {
        report,
        summary_csv: computed.summary_csv,
        kernel_dat: two_column(["arc", "kernel"], computed.kernel),
        schedule_dat: two_column(computed.schedule_header, computed.schedule),
        control: computed.control,
        svgs,
    })
}

/// Writes the artifacts into `dir` (created if needed) and returns the paths written.
pub fn write_outputs(art: &RunArtifacts, dir: &Path, save_control: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    let report = serde_json::to_string_pretty(&art.report).map_err(|e| Error::Format(e.to_string()))?;
    put("report.json", report.as_bytes())?;
    put("summary.csv", art.summary_csv.as_bytes())?;
    put("kernel.dat", art.kernel_dat.as_bytes())?;
    put("schedule.dat", art.schedule_dat.as_bytes())?;
    for (name, svg) in &art.svgs {
        put(name, svg.as_bytes())?;
    }
    if save_control {
        if let Some(h) = &art.control {
            put("control.iskc", &Container::from_control(h).encode())?;
        }
    }
    Ok(written)
}

/// Re-evaluates a persisted control against the scenario and returns the
/// recomputed kernel L¹ norm.
pub fn verify_control_file(cfg: &ScenarioConfig, path: &Path) -> Result<f64> {
    let h = Container::read(path)?.into_control()?;
    let s = setup(cfg, h.time)?;
    if h.width() != s.cascade.grid.omega_nodes.len() {
        return Err(Error::DimensionMismatch {
            what: "persisted control width",
            expected: s.cascade.grid.omega_nodes.len(),
            got: h.width(),
        });
    }
    Ok(evaluate(&s.cascade, &s.xi, Some(&h))?.kernel_l1)
}

fn verify_shape(cfg: &ScenarioConfig) -> Result<Computed> {
    let time = cfg.time_grid()?;
    let problem = ShapeProblem {
        spec: cfg.domain_spec(),
        time,
        source: cfg.source,
        control: None,
    };
    let v = &cfg.shape.direction;
    let formula = problem.formula_value(v).context("boundary formula")?;
    let est = finite_difference_dj(&problem, v, &cfg.shape.taus).context("finite differences")?;
    let rel = |fd: f64| rel_change(fd, formula);
    let mut rows: Vec<Vec<String>> = est
        .samples
        .iter()
        .map(|s| vec![num(s.tau), num(s.j_plus), num(s.j_minus), num(s.fd_value), num(formula), num(rel(s.fd_value))])
        .collect();
    if let Some(r) = est.richardson {
        rows.push(vec!["0".into(), String::new(), String::new(), num(r), num(formula), num(rel(r))]);
    }
    let best_rel = rel(est.best());
    let met = best_rel <= cfg.shape.tol;
    let s = setup(cfg, time)?;
    let kernel = kernel_of(&s.cascade, &s.xi, None)?;
    Ok(Computed {
        met,
        results: json!({
            "formula_value": formula,
            "fd_samples": est.samples,
            "richardson": est.richardson,
            "best_estimate": est.best(),
            "relative_error": best_rel,
            "tolerance": cfg.shape.tol,
        }),
        summary_csv: csv_table(&["tau", "J_plus", "J_minus", "fd_value", "formula_value", "rel_err"], &rows)?,
        kernel: kernel_rows(&s.cascade.grid.boundary, &kernel),
        kernel_before: Vec::new(),
        schedule: est.samples.iter().map(|s| (s.tau, rel(s.fd_value))).collect(),
        schedule_header: ["tau", "rel_err"],
        log_schedule: true,
        control: None,
    })
}

fn terminal_target(grid: &Grid, p: usize, q: usize, amplitude: f64) -> TerminalState {
    let lap = Laplacian {
        nx: grid.nx,
        ny: grid.ny,
        hx: grid.hx,
        hy: grid.hy,
    };
    let (_, phi) = lap.eigenpair(p, q);
    TerminalState(phi.iter().map(|v| amplitude * v).collect())
}

fn run_approx(cfg: &ScenarioConfig) -> Result<Computed> {
    let c = &cfg.control;
    let s = setup(cfg, cfg.time_grid()?)?;
    let (cascade, xi) = (&s.cascade, &s.xi);
    let g = &cascade.grid;
    let base = evaluate(cascade, xi, None).context("uncontrolled solve")?;
    let epsilon = c.epsilon.unwrap_or_else(|| c.epsilon_relative.unwrap_or(0.1) * base.kernel_l1).max(f64::MIN_POSITIVE);
    let schedule = RegularizationSchedule::geometric(c.alpha_start, c.alpha_end, c.alpha_factor, c.cg_tol, c.cg_maxit, epsilon);
    let weights = ChannelWeights {
        trace: c.weights.trace,
        terminal: c.weights.terminal,
    };
    let (result, terminal_goal): (ControlResult, Option<(f64, Option<TerminalState>)>) = match c.terminal_mode {
        TerminalModeKey::None => (approx_insensitize(cascade, xi, &schedule).context("synthesis")?, None),
        TerminalModeKey::Approximate => {
            let t = c.terminal_target.expect("validated");
            let yt = terminal_target(g, t.p, t.q, t.amplitude);
            let tol = c.terminal_tol_relative * yt.norm(g);
            let req = TerminalRequest::Approximate { target: yt.clone(), tol };
            let r = insensitize_with_terminal(cascade, xi, &req, weights, &schedule, c.allow_disjoint_terminal).context("synthesis")?;
            (r, Some((tol, Some(yt))))
        }
        TerminalModeKey::Null => {
            let req = TerminalRequest::Null {
                rel_tol: c.terminal_tol_relative,
            };
            let r = insensitize_with_terminal(cascade, xi, &req, weights, &schedule, c.allow_disjoint_terminal).context("synthesis")?;
            (r, Some((c.terminal_tol_relative * base.terminal.norm(g), None)))
        }
    };

    // Independent re-solve with the returned control.
    let after = evaluate(cascade, xi, Some(&result.h)).context("verification solve")?;
    let kernel_after = sensitivity_kernel(&after.traces.y, &after.traces.z)?.0;
    let kernel_before = sensitivity_kernel(&base.traces.y, &base.traces.z)?.0;
    let replayed = replay(cascade, xi, &result.h)?;
    let terminal = terminal_goal.as_ref().map(|(tol, yt)| {
        let defect = match yt {
            Some(yt) => after.terminal.sub(yt).norm(g),
            None => after.terminal.norm(g),
        };
        (defect, *tol)
    });
    let terminal_ok = terminal.is_none_or(|(d, tol)| d <= tol);
    let terminal = terminal.map(|(d, tol)| json!({ "defect": d, "tolerance": tol, "baseline": base.terminal.norm(g), "ok": d <= tol }));
    let kernel_ok = after.kernel_l1 <= epsilon;
    let misfit_monotone = result.levels.windows(2).all(|w| w[1].misfit <= w[0].misfit * (1.0 + 1e-12));
    let met = kernel_ok && terminal_ok;
    let rows: Vec<Vec<String>> = result
        .levels
        .iter()
        .map(|l| vec![num(l.alpha), num(l.misfit), num(l.criterion), l.cg_iterations.to_string(), l.cg_converged.to_string()])
        .collect();
    Ok(Computed {
        met,
        results: json!({
            "epsilon": epsilon,
            "kernel_l1_before": base.kernel_l1,
            "kernel_l1_after": after.kernel_l1,
            "kernel_ratio": after.kernel_l1 / base.kernel_l1.max(f64::MIN_POSITIVE),
            "trace_norm_y": after.traces.y.norm(g),
            "trace_norm_z": after.traces.z.norm(g),
            "control_norm": result.h.norm(g),
            "terminal": terminal,
            "kernel_ok": kernel_ok,
            "misfit_nonincreasing": misfit_monotone,
            "replay_kernel_l1": replayed,
            "replay_relative_difference": rel_change(replayed, after.kernel_l1),
            "alpha": result.alpha,
            "cg_iterations": result.cg_iterations,
            "schedule_exhausted": result.schedule_exhausted,
            "levels": result.levels,
            "notes": result.notes,
        }),
        summary_csv: csv_table(&["alpha", "misfit", "criterion", "cg_iterations", "cg_converged"], &rows)?,
        kernel: kernel_rows(&g.boundary, &kernel_after),
        kernel_before: kernel_rows(&g.boundary, &kernel_before),
        schedule: result.levels.iter().map(|l| (l.alpha, l.misfit)).collect(),
        schedule_header: ["alpha", "misfit"],
        log_schedule: true,
        control: Some(result.h),
    })
}

fn run_exact(cfg: &ScenarioConfig, opts: RunOptions) -> Result<Computed> {
    let d = cfg
        .directions
        .as_ref()
        .ok_or_else(|| Error::Validation("run exact-fd needs a [directions] section".into()))?;
    let probe = setup(cfg, cfg.time_grid()?)?;
    let directions = cfg.resolve_directions(&probe.cascade.grid)?;
    let m = orthonormalize_normal_traces(&directions, &probe.cascade.grid.boundary)?.dim();
    let nt = rounded_nt(cfg.time.nt, m);
    let mut notes = Vec::new();
    let s = if nt == cfg.time.nt {
        probe
    } else {
        notes.push(format!("Nt rounded from {} to {nt}, a multiple of 2M", cfg.time.nt));
        setup(cfg, TimeGrid::new(cfg.time.t_final, nt)?)?
    };
    let (cascade, xi) = (&s.cascade, &s.xi);
    let g = &cascade.grid;
    let base = evaluate(cascade, xi, None).context("uncontrolled solve")?;
    let epsilon = d.epsilon.unwrap_or_else(|| d.epsilon_relative.unwrap_or(0.05) * base.kernel_l1).max(f64::MIN_POSITIVE);
    let schedule = RegularizationSchedule::geometric(d.alpha_start, d.alpha_end, d.alpha_factor, d.cg_tol, d.cg_maxit, 1.0);
    let options = ExactOptions {
        stage1: schedule.clone(),
        basis: BasisOptions {
            schedule,
            relative_error: d.relative_error,
            terminal: false,
            restrict_to_support: d.restrict_to_support,
            parallel: opts.parallel,
        },
        lambda: LambdaOptions {
            tol_u: d.tol_u,
            restarts: d.restarts,
            seed: opts.seed,
            ..LambdaOptions::default()
        },
        skip_stage1: d.skip_stage1,
    };
    let r = exact_insensitize(cascade, xi, &directions, epsilon, &options).context("synthesis")?;
    let after = evaluate(cascade, xi, Some(&r.h)).context("verification solve")?;
    let kernel_after = sensitivity_kernel(&after.traces.y, &after.traces.z)?.0;
    let kernel_before = sensitivity_kernel(&base.traces.y, &base.traces.z)?.0;
    let replayed = replay(cascade, xi, &r.h)?;
    let met = r.u_ok && r.kernel_ok;
    notes.extend(r.notes.iter().cloned());
    let rows: Vec<Vec<String>> = (0..r.m)
        .map(|k| vec![(k + 1).to_string(), num(r.u_recomputed[k]), num(r.c[k]), num(r.lambda.lambda[k])])
        .collect();
    Ok(Computed {
        met,
        results: json!({
            "m": r.m,
            "nt": nt,
            "epsilon": epsilon,
            "epsilon0": r.epsilon0,
            "amplification": r.amplification,
            "stage1_trace_norm": r.stage1_trace_norm,
            "lambda": r.lambda,
            "residual_table": (0..r.m).map(|k| json!({"k": k + 1, "u": r.u_recomputed[k], "c": r.c[k]})).collect::<Vec<_>>(),
            "u_ok": r.u_ok,
            "kernel_l1_before": base.kernel_l1,
            "kernel_l1_after": after.kernel_l1,
            "kernel_ratio": after.kernel_l1 / base.kernel_l1.max(f64::MIN_POSITIVE),
            "kernel_ok": r.kernel_ok,
            "gamma_deviation": r.gamma_deviation,
            "gamma_bound": 1.0 / (4 * r.m * r.m) as f64,
            "basis_trace_errors": r.basis_trace_errors,
            "basis_reached": r.basis_reached,
            "control_norm": r.h.norm(g),
            "replay_kernel_l1": replayed,
            "replay_relative_difference": rel_change(replayed, after.kernel_l1),
            "notes": notes,
        }),
        summary_csv: csv_table(&["k", "U_k", "c_k", "lambda_k"], &rows)?,
        kernel: kernel_rows(&g.boundary, &kernel_after),
        kernel_before: kernel_rows(&g.boundary, &kernel_before),
        schedule: exact_schedule_rows(&r.basis_trace_errors),
        schedule_header: ["basis_index", "trace_error"],
        log_schedule: false,
        control: Some(r.h),
    })
}

/// One row per basis control: `(2k + a, relative trace error)`.
fn exact_schedule_rows(errors: &[[f64; 2]]) -> Vec<(f64, f64)> {
    errors
        .iter()
        .enumerate()
        .flat_map(|(k, e)| [(2.0 * k as f64, e[0]), (2.0 * k as f64 + 1.0, e[1])])
        .collect()
}

fn run_constructive(cfg: &ScenarioConfig) -> Result<Computed> {
    let k = cfg
        .constructive
        .ok_or_else(|| Error::Validation("run constructive needs a [constructive] section".into()))?;
    let s = setup(cfg, cfg.time_grid()?)?;
    let (cascade, xi) = (&s.cascade, &s.xi);
    let g = &cascade.grid;
    let r = match k.variant {
        ConstructiveVariant::ThetaInOmega => construct_theta_in_omega(cascade, xi),
        ConstructiveVariant::BoundaryTheta => construct_boundary_theta(cascade, xi, k.tol),
    }
    .context("construction")?;
    let (y, z) = cascade.solve_cascade(xi, Some(&r.h)).context("verification solve")?;
    let y_sup = y.sup_norm();
    let outside: Vec<bool> = g.theta_mask.iter().map(|&m| m == 0.0).collect();
    let profile: Vec<(f64, f64)> = (0..z.levels())
        .map(|n| {
            let zl = z.level(n);
            let v = match k.variant {
                ConstructiveVariant::ThetaInOmega => zl.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                ConstructiveVariant::BoundaryTheta => zl.iter().zip(&outside).filter(|(_, o)| **o).fold(0.0f64, |m, (v, _)| m.max(v.abs())),
            };
            (cascade.time.t(n), v / y_sup.max(f64::MIN_POSITIVE))
        })
        .collect();
    let kernel_after = kernel_of(cascade, xi, Some(&r.h))?;
    let kernel_before = kernel_of(cascade, xi, None)?;
    let replayed = replay(cascade, xi, &r.h)?;
    let mut summary = String::from("metric,value\n");
    for (name, v) in [
        ("support_leak", r.support_leak),
        ("state_defect", r.state_defect),
        ("z_sup_relative", r.z_sup_relative),
        ("z_outside_relative", r.z_outside_relative),
        ("initial_mismatch", r.initial_mismatch),
        ("kernel_l1_before", r.kernel_l1_before),
        ("kernel_l1_after", r.kernel_l1_after),
        ("control_norm", r.control_norm),
    ] {
        let _ = writeln!(summary, "{name},{}", num(v));
    }
    Ok(Computed {
        met: r.met,
        results: json!({
            "report": r,
            "replay_kernel_l1": replayed,
            "replay_relative_difference": rel_change(replayed, r.kernel_l1_after),
        }),
        summary_csv: summary,
        kernel: kernel_rows(&g.boundary, &kernel_after),
        kernel_before: kernel_rows(&g.boundary, &kernel_before),
        schedule: profile,
        schedule_header: ["t", "z_sup_relative"],
        log_schedule: false,
        control: Some(r.h),
    })
}
