//! Experiment configuration, pipelines and report files.
//!
//! A config is a TOML file with the sections `[domain]`, `[grid]`, `[time]`,
//! `[problem]`, `[cascade]`, `[monitors]`, `[converge]`, `[verify]` and
//! `[output]`, plus a top-level `seed`. Every key has a default; unknown keys
//! are rejected by name.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::barriers::{construct_subsolution, guan_barrier_check, GuanReport};
use crate::calculus::GridField;
use crate::error::{Error, Result};
use crate::estimates::{
    bound_monitors, comparison_check, initial_trace_check, bound_constants, sampled_trajectory,
    shift_consistency_check, BoundReport, DecayCurve,
};
use crate::flow::{
    run_cascade, run_flow, BoundaryData, CascadeReport, FlowProblem, Source, Stepper, TimeConfig, Trajectory,
};
use crate::geometry::{axis_name, make_domain, Domain, DomainKind, Grid};
use crate::hermitian::{trace_terms, HermitianForm};
use crate::initial_data::{build_cascade, build_level, CascadeLevel, InitialKind, Tabulated};
use crate::oracle::{
    damped_manufactured_source, exact_quadratic_family, manufactured_source, radial_gap, radial_reference,
    write_reference, ClosedForm, ManufacturedCase, RadialReference,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pipeline {
    Run,
    Cascade,
    Converge,
    Verify,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub domain: DomainConfig,
    pub grid: GridConfig,
    pub time: TimeSection,
    pub problem: ProblemConfig,
    pub cascade: CascadeConfig,
    pub monitors: MonitorConfig,
    pub converge: ConvergeConfig,
    pub verify: VerifyConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainName {
    #[default]
    Ball,
    Ellipsoid,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub kind: DomainName,
    /// Complex dimension.
    pub n: usize,
    /// Ellipsoid `sum_a c_a |z_a|^2 < 1`.
    pub coefficients: Vec<f64>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            kind: DomainName::Ball,
            n: 1,
            coefficients: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub h: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { h: 0.05 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `t_j = T (j/J)^2`.
    #[default]
    Quadratic,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSection {
    pub horizon: f64,
    pub dt: f64,
    pub stepper: Stepper,
    /// Number of snapshot intervals.
    pub snapshots: usize,
    pub schedule: Schedule,
    pub extra_snapshots: Vec<f64>,
    pub newton_tol: f64,
}

impl Default for TimeSection {
    fn default() -> Self {
        Self {
            horizon: 0.5,
            dt: 0.01,
            stepper: Stepper::Implicit,
            snapshots: 10,
            schedule: Schedule::Quadratic,
            extra_snapshots: Vec::new(),
            newton_tol: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialName {
    Constant,
    Quadratic,
    RealPartPositive,
    Bowl,
    Tabulated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionName {
    Quadratic,
    ExpDecay,
    Quartic,
    PluriharmonicShift,
}

/// Either data-driven (`initial`, `source`, `damping`, `boundary_rate`) or a
/// manufactured solution (`manufactured`, `kappa`). Unset parameters take the
/// defaults listed on each kind.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    /// Default `quadratic`.
    pub initial: Option<InitialName>,
    /// Quadratic coefficient (1).
    pub a: Option<f64>,
    /// Time rate of a manufactured solution (1).
    pub b: Option<f64>,
    /// Constant value (0), bowl level (0.5) or quartic coefficient (0.5).
    pub c: Option<f64>,
    /// Pluriharmonic coefficient (0.1).
    pub k: Option<f64>,
    /// Binary grid file holding tabulated initial data.
    pub table: Option<PathBuf>,
    /// `f = source - damping u` (0, 0).
    pub source: Option<f64>,
    pub damping: Option<f64>,
    /// `phi(z, t) = u0(z) + boundary_rate t` (0).
    pub boundary_rate: Option<f64>,
    pub manufactured: Option<SolutionName>,
    /// Damping of the manufactured source (0).
    pub kappa: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub levels: Vec<u32>,
    /// Smallest `k` compared in the cascade inequality; defaults to the first level.
    pub m0: Option<u32>,
    pub tol: f64,
    /// Level used by `run` for nonsmooth initial data.
    pub run_level: u32,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            levels: vec![4, 8, 16, 32],
            m0: None,
            tol: 1e-6,
            run_level: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    pub bounds: bool,
    /// Monitors look at `t >= window`.
    pub window: f64,
    pub trace: bool,
    /// Trace threshold as a fraction of `Osc(u0)`.
    pub trace_fraction: f64,
    pub shift: bool,
    pub shift_m: u32,
    /// Shift tolerance in units of the Newton tolerance.
    pub shift_safety: f64,
    pub radial: bool,
    pub radial_refine: usize,
    pub subsolution: bool,
    /// Report-only boundary barrier diagnostic.
    pub barrier: bool,
    /// Enforced bound on the error against a manufactured solution.
    pub error_tol: Option<f64>,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            bounds: true,
            window: 0.05,
            trace: true,
            trace_fraction: 0.05,
            shift: true,
            shift_m: 4,
            shift_safety: 10.0,
            radial: false,
            radial_refine: 8,
            subsolution: true,
            barrier: false,
            error_tol: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeConfig {
    /// Spatial study at the configured `dt`.
    pub h_sequence: Vec<f64>,
    /// Temporal study at the configured `h`.
    pub dt_sequence: Vec<f64>,
    pub spatial_order: f64,
    pub temporal_order: f64,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        Self {
            h_sequence: Vec::new(),
            dt_sequence: Vec::new(),
            spatial_order: 1.7,
            temporal_order: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random Hermitian pairs per dimension for the trace inequalities.
    pub pairs: usize,
    pub exact_tol: f64,
    pub comparison_tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            pairs: 1000,
            exact_tol: 1e-8,
            comparison_tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub snapshots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            snapshots: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        if !(1..=3).contains(&self.domain.n) {
            return bad("domain.n", "must be 1, 2 or 3");
        }
        if !(self.grid.h > 0.0) {
            return bad("grid.h", "must be positive");
        }
        if !(self.time.horizon > 0.0) || !(self.time.dt > 0.0) {
            return bad("time", "horizon and dt must be positive");
        }
        if self.time.snapshots == 0 {
            return bad("time.snapshots", "must be at least 1");
        }
        let p = &self.problem;
        if p.manufactured.is_some() {
            for (key, set) in [
                ("problem.initial", p.initial.is_some()),
                ("problem.source", p.source.is_some()),
                ("problem.damping", p.damping.is_some()),
                ("problem.boundary_rate", p.boundary_rate.is_some()),
                ("problem.table", p.table.is_some()),
            ] {
                if set {
                    return bad(key, "conflicts with problem.manufactured");
                }
            }
        } else if p.kappa.is_some() {
            return bad("problem.kappa", "only applies to manufactured solutions");
        }
        if p.damping.unwrap_or(0.0) < 0.0 || p.kappa.unwrap_or(0.0) < 0.0 {
            return bad("problem.damping", "f must be nonincreasing in u");
        }
        if p.initial == Some(InitialName::Tabulated) && p.table.is_none() {
            return bad("problem.table", "required for tabulated initial data");
        }
        if self.cascade.levels.windows(2).any(|w| w[1] <= w[0]) {
            return bad("cascade.levels", "must increase");
        }
        if self.cascade.levels.first() == Some(&0) || self.cascade.run_level == 0 || self.monitors.shift_m == 0 {
            return bad("cascade", "levels must be positive");
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<Domain> {
        let kind = match self.domain.kind {
            DomainName::Ball => DomainKind::Ball,
            DomainName::Ellipsoid => DomainKind::Ellipsoid(self.domain.coefficients.clone()),
        };
        make_domain(kind, self.domain.n)
    }

    pub fn time_config(&self) -> TimeConfig {
        let t = &self.time;
        let snaps = match t.schedule {
            Schedule::Quadratic => TimeConfig::quadratic_schedule(t.horizon, t.snapshots),
            Schedule::Uniform => (0..=t.snapshots)
                .map(|j| t.horizon * j as f64 / t.snapshots as f64)
                .collect(),
        };
        let mut extra = t.extra_snapshots.clone();
        if self.monitors.shift {
            extra.push(1.0 / self.monitors.shift_m as f64);
        }
        TimeConfig::new(t.horizon, t.dt, snaps).with_extra_snapshots(&extra)
    }

    /// The manufactured case, if the problem is one.
    pub fn manufactured(&self, domain: &Domain) -> Result<Option<ManufacturedCase>> {
        let p = &self.problem;
        let Some(name) = p.manufactured else {
            return Ok(None);
        };
        let n = self.domain.n;
        let b = p.b.unwrap_or(1.0);
        let w = match name {
            SolutionName::Quadratic => {
                let a = p.a.unwrap_or(1.0);
                if p.kappa.unwrap_or(0.0) == 0.0 {
                    return exact_quadratic_family(a, b, n).map(Some);
                }
                ClosedForm::quadratic(a, b, n)
            }
            SolutionName::ExpDecay => ClosedForm::exp_decay(n),
            SolutionName::Quartic => ClosedForm::quartic(p.c.unwrap_or(0.5), b, n),
            SolutionName::PluriharmonicShift => ClosedForm::pluriharmonic_shift(p.k.unwrap_or(0.1), b, n),
        };
        let horizon = self.time.horizon;
        match p.kappa.unwrap_or(0.0) {
            k if k > 0.0 => damped_manufactured_source(w, k, domain, horizon).map(Some),
            _ => manufactured_source(w, domain, horizon).map(Some),
        }
    }

    fn initial_kind(&self) -> Result<InitialKind> {
        let p = &self.problem;
        Ok(match p.initial.unwrap_or(InitialName::Quadratic) {
            InitialName::Constant => InitialKind::Constant(p.c.unwrap_or(0.0)),
            InitialName::Quadratic => InitialKind::Quadratic(p.a.unwrap_or(1.0)),
            InitialName::RealPartPositive => InitialKind::RealPartPositive,
            InitialName::Bowl => InitialKind::Bowl(p.c.unwrap_or(0.5)),
            InitialName::Tabulated => {
                let path = p.table.as_ref().expect("validated");
                InitialKind::Tabulated(read_grid_binary(path)?.into_table())
            }
        })
    }

    /// Builds the flow problem at spacing `h` and step `dt`.
    pub fn problem_at(&self, h: f64, dt: f64) -> Result<FlowProblem> {
        let domain = self.domain()?;
        let mut time = self.time_config();
        time.dt = dt;
        let mut problem = match self.manufactured(&domain)? {
            Some(case) => case.problem(domain, h, self.time.stepper, time)?,
            None => {
                let kind = self.initial_kind()?;
                let u0 = kind.evaluator().expect("built-in kinds have evaluators");
                let rate = self.problem.boundary_rate.unwrap_or(0.0);
                let boundary = BoundaryData::new(format!("u0 + {rate} t"), move |x, t| u0(x) + rate * t)
                    .with_dt(move |_, _| rate);
                FlowProblem::new(domain, h, self.source(), boundary, kind, self.time.stepper, time)?
            }
        };
        problem.newton.tol = self.time.newton_tol;
        Ok(problem)
    }

    pub fn problem(&self) -> Result<FlowProblem> {
        self.problem_at(self.grid.h, self.time.dt)
    }

    fn source(&self) -> Source {
        let c = self.problem.source.unwrap_or(0.0);
        let k = self.problem.damping.unwrap_or(0.0);
        if k == 0.0 {
            return Source::constant(c);
        }
        Source::new(format!("{c} - {k} u"), move |_, _, u| c - k * u)
            .with_du(move |_, _, _| -k)
            .with_dt(|_, _, _| 0.0)
    }
}

/// One line of the summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: Option<f64>,
    /// Enforced checks decide the exit status.
    pub enforced: bool,
    pub pass: bool,
}

impl Check {
    fn enforced(name: impl Into<String>, measured: f64, bound: Option<f64>, pass: bool) -> Self {
        Self {
            name: name.into(),
            measured,
            bound,
            enforced: true,
            pass,
        }
    }

    fn at_most(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::enforced(name, measured, Some(bound), measured <= bound)
    }

    fn report(name: impl Into<String>, measured: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound: None,
            enforced: false,
            pass: measured.is_finite(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    /// `spatial` or `temporal`.
    pub study: &'static str,
    pub param: f64,
    pub error: f64,
    /// Observed order against the previous row.
    pub order: Option<f64>,
}

/// Everything an experiment produced, complete or not.
#[derive(Clone, Debug, Default)]
pub struct Bundle {
    pub checks: Vec<Check>,
    pub trajectory: Option<Trajectory>,
    pub bounds: Option<BoundReport>,
    pub decay: Option<DecayCurve>,
    pub cascade: Option<CascadeReport>,
    pub convergence: Vec<ConvergenceRow>,
    pub reference: Option<RadialReference>,
    pub barrier: Option<GuanReport>,
    /// Set when a runtime failure stopped the pipeline.
    pub abort: Option<String>,
}

impl Bundle {
    pub fn passed(&self) -> bool {
        self.abort.is_none() && self.checks.iter().filter(|c| c.enforced).all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Runs a pipeline. Configuration problems are returned as errors; failures
/// after the problem is built are recorded in [`Bundle::abort`] with
/// whatever was finished.
pub fn run_experiment(cfg: &ExperimentConfig, pipeline: Pipeline, jobs: usize) -> Result<Bundle> {
    let mut bundle = Bundle::default();
    let outcome = match pipeline {
        Pipeline::Run => run_single(cfg, &mut bundle),
        Pipeline::Cascade => run_cascade_pipeline(cfg, jobs, &mut bundle),
        Pipeline::Converge => run_converge(cfg, &mut bundle),
        Pipeline::Verify => run_verify(cfg, &mut bundle),
    };
    match outcome {
        Ok(()) => Ok(bundle),
        Err(e @ (Error::Config(_) | Error::InvalidInput(_))) => Err(e),
        Err(Error::FlowAborted { t, reason, partial }) => {
            bundle.abort = Some(format!("flow aborted at t = {t}: {reason}"));
            bundle.trajectory.get_or_insert(*partial);
            Ok(bundle)
        }
        Err(e) => {
            bundle.abort = Some(e.to_string());
            Ok(bundle)
        }
    }
}

fn single_level(problem: &FlowProblem, m: u32) -> Result<Arc<CascadeLevel>> {
    let mut levels = build_cascade(
        &problem.initial,
        &[m],
        &problem.domain,
        &problem.ops,
        &problem.source,
        &problem.boundary,
    )?;
    Ok(Arc::new(levels.remove(0)))
}

fn run_single(cfg: &ExperimentConfig, bundle: &mut Bundle) -> Result<()> {
    let problem = cfg.problem()?;
    let mon = &cfg.monitors;
    let level = if problem.initial.smooth || cfg.problem.manufactured.is_some() {
        None
    } else {
        Some(single_level(&problem, cfg.cascade.run_level)?)
    };
    let traj = run_flow(&problem, level.as_ref())?;
    bundle.checks.push(Check::report("steps", traj.steps.len() as f64));
    bundle.trajectory = Some(traj.clone());

    if let Some(case) = cfg.manufactured(&problem.domain)? {
        let err = traj.max_error(|x, t| case.exact(x, t));
        bundle.checks.push(match mon.error_tol {
            Some(tol) => Check::at_most("manufactured_error", err, tol),
            None => Check::report("manufactured_error", err),
        });
    }
    if mon.bounds {
        let base = build_level(&problem.initial, 1, &problem.domain, &problem.ops, &problem.source, &problem.boundary, None)?;
        let m1 = construct_subsolution(&problem, &base)?.big_m;
        let constants = bound_constants(&problem, problem.initial.bound, m1);
        let report = bound_monitors(&traj, &problem, mon.window, constants)?;
        for m in &report.monitors {
            bundle.checks.push(Check {
                name: format!("bound_{}", m.name),
                measured: m.measured,
                bound: m.bound,
                enforced: m.enforced,
                pass: m.pass(),
            });
        }
        bundle.bounds = Some(report);
    }
    if let Some(level) = &level {
        if mon.trace {
            let threshold = mon.trace_fraction * problem.initial.osc;
            let curve = initial_trace_check(&problem, &traj, &problem.initial, threshold)?;
            bundle.checks.push(Check::enforced("trace_monotone", curve.monotone as u8 as f64, None, curve.monotone));
            bundle.checks.push(Check::at_most("trace_e_min", curve.e_min, threshold));
            bundle.checks.push(Check::enforced(
                "trace_lower_barrier",
                curve.barrier.1,
                None,
                curve.barrier_holds,
            ));
            bundle.decay = Some(curve);
        }
        if mon.subsolution {
            let sub = construct_subsolution(&problem, level)?;
            bundle.checks.push(Check::at_most("subsolution_below", sub.excess_over(&traj), 1e-7));
            if mon.barrier {
                let report = guan_barrier_check(&problem, &traj, &sub, mon.window, None, 1e-8)?;
                bundle.checks.push(Check::report("barrier_fraction", report.fraction()));
                bundle.barrier = Some(report);
            }
        }
    }
    if mon.shift && problem.time.horizon > 1.0 / mon.shift_m as f64 {
        let r = shift_consistency_check(&problem, level.as_ref(), &traj, mon.shift_m, mon.shift_safety)?;
        bundle.checks.push(Check::at_most("shift_gap", r.gap, r.tol));
        bundle.checks.push(Check::enforced("shift_lower_barrier", r.barrier.1, None, r.barrier_holds));
    }
    if mon.radial {
        let reference = radial_reference(&problem, mon.radial_refine)?;
        let last = traj.snapshots.len() - 1;
        let gap = radial_gap(&reference, last, &problem.grid, &traj.snapshots[last].values);
        let h = problem.grid.h();
        bundle.checks.push(Check::at_most("radial_gap", gap, 3.0 * h * h + 3.0 * problem.time.dt));
        bundle.reference = Some(reference);
    }
    Ok(())
}

fn run_cascade_pipeline(cfg: &ExperimentConfig, jobs: usize, bundle: &mut Bundle) -> Result<()> {
    let problem = cfg.problem()?;
    let levels = &cfg.cascade.levels;
    let m0 = cfg.cascade.m0.unwrap_or_else(|| levels.first().copied().unwrap_or(1));
    let report = run_cascade(&problem, levels, m0, cfg.cascade.tol, jobs.max(1))?;
    bundle.checks.push(Check::enforced(
        "cascade_complete",
        report.missing().len() as f64,
        Some(0.0),
        report.missing().is_empty(),
    ));
    for p in &report.pairs {
        bundle.checks.push(Check::enforced(
            format!("cascade_order_{}_{}", p.k, p.m),
            p.sup_diff,
            Some(p.bound + report.tol),
            p.holds,
        ));
    }
    for (k, gap) in &report.gaps {
        bundle.checks.push(Check::report(format!("cascade_gap_{k}"), *gap));
    }
    bundle.checks.push(Check::enforced(
        "cascade_gaps_decreasing",
        report.gaps_decreasing() as u8 as f64,
        None,
        report.gaps_decreasing(),
    ));
    if cfg.monitors.trace {
        if let Some(run) = report.runs.last() {
            if let Some(traj) = &run.trajectory {
                let threshold = cfg.monitors.trace_fraction * problem.initial.osc;
                let curve = initial_trace_check(&problem, traj, &problem.initial, threshold)?;
                bundle.checks.push(Check::enforced("trace_monotone", curve.monotone as u8 as f64, None, curve.monotone));
                bundle.checks.push(Check::at_most("trace_e_min", curve.e_min, threshold));
                bundle.checks.push(Check::enforced("trace_lower_barrier", curve.barrier.1, None, curve.barrier_holds));
                bundle.decay = Some(curve);
                bundle.trajectory = Some(traj.clone());
            }
        }
    }
    bundle.cascade = Some(report);
    Ok(())
}

/// `log(e_{i-1} / e_i) / log(p_{i-1} / p_i)` down a refinement sequence.
pub fn observed_orders(params: &[f64], errors: &[f64]) -> Vec<Option<f64>> {
    (0..errors.len())
        .map(|i| {
            (i > 0).then(|| (errors[i - 1] / errors[i]).ln() / (params[i - 1] / params[i]).ln())
        })
        .collect()
}

fn run_converge(cfg: &ExperimentConfig, bundle: &mut Bundle) -> Result<()> {
    let domain = cfg.domain()?;
    let case = cfg
        .manufactured(&domain)?
        .ok_or_else(|| Error::Config("converge needs problem.manufactured".into()))?;
    let studies: [(&'static str, &[f64], f64); 2] = [
        ("spatial", &cfg.converge.h_sequence, cfg.converge.spatial_order),
        ("temporal", &cfg.converge.dt_sequence, cfg.converge.temporal_order),
    ];
    for (study, params, min_order) in studies {
        if params.is_empty() {
            continue;
        }
        let mut errors = Vec::with_capacity(params.len());
        for &p in params {
            let (h, dt) = if study == "spatial" { (p, cfg.time.dt) } else { (cfg.grid.h, p) };
            let problem = cfg.problem_at(h, dt)?;
            let traj = run_flow(&problem, None)?;
            errors.push(traj.max_error(|x, t| case.exact(x, t)));
        }
        let orders = observed_orders(params, &errors);
        for ((&p, &e), &o) in params.iter().zip(&errors).zip(&orders) {
            bundle.convergence.push(ConvergenceRow {
                study,
                param: p,
                error: e,
                order: o,
            });
        }
        let worst = orders.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        if worst.is_finite() {
            bundle.checks.push(Check::enforced(format!("{study}_order"), worst, Some(min_order), worst >= min_order));
        }
    }
    Ok(())
}

/// A random Hermitian positive definite form `B B* + c I`.
pub fn random_pd_form(rng: &mut impl Rng, n: usize) -> HermitianForm {
    let b: Vec<Vec<Complex64>> = (0..n)
        .map(|_| (0..n).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect())
        .collect();
    let shift = rng.gen_range(0.05..1.0);
    let rows: Vec<Vec<Complex64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let s: Complex64 = (0..n).map(|k| b[i][k] * b[j][k].conj()).sum();
                    if i == j {
                        s + shift
                    } else {
                        s
                    }
                })
                .collect()
        })
        .collect();
    HermitianForm::from_rows(&rows).expect("Hermitian by construction")
}

fn run_verify(cfg: &ExperimentConfig, bundle: &mut Bundle) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for n in [2, 3] {
        let mut worst = f64::NEG_INFINITY;
        let mut ok = true;
        for _ in 0..cfg.verify.pairs {
            let (a, b) = (random_pd_form(&mut rng, n), random_pd_form(&mut rng, n));
            let t = trace_terms(&a, &b)?;
            worst = worst.max((t.lower - t.middle) / t.middle).max((t.middle - t.upper) / t.upper);
            ok &= t.holds(1e-12);
        }
        bundle.checks.push(Check::enforced(format!("trace_inequality_n{n}"), worst, Some(1e-12), ok));
    }
    let mut scaling = 0.0f64;
    for _ in 0..cfg.verify.pairs {
        let n = rng.gen_range(1..=3);
        let h = random_pd_form(&mut rng, n);
        let c = rng.gen_range(0.1..10.0);
        let lhs = h.scale(c).log_det_pd()?;
        let rhs = n as f64 * c.ln() + h.log_det_pd()?;
        scaling = scaling.max((lhs - rhs).abs() / (1.0 + rhs.abs()));
    }
    bundle.checks.push(Check::at_most("log_det_scaling", scaling, 1e-12));

    let domain = cfg.domain()?;
    let n = cfg.domain.n;
    let horizon = cfg.time.horizon;
    let time = TimeConfig::new(horizon, cfg.time.dt, TimeConfig::quadratic_schedule(horizon, cfg.time.snapshots));
    let case = exact_quadratic_family(1.0, 1.0, n)?;
    for stepper in [Stepper::Explicit, Stepper::Implicit] {
        let mut problem = case.problem(domain.clone(), cfg.grid.h, stepper, time.clone())?;
        problem.newton.tol = cfg.time.newton_tol;
        let traj = run_flow(&problem, None)?;
        let err = traj.max_error(|x, t| case.exact(x, t));
        bundle.checks.push(Check::at_most(format!("exact_family_{}", stepper.as_str()), err, cfg.verify.exact_tol));
        if stepper == Stepper::Implicit {
            // |z|^2 + t solves the flow with f = 1; |z|^2 + 2t is a supersolution
            let v = sampled_trajectory(&problem.grid, &traj.times(), |x, t| sq(x) + 2.0 * t, |_, _| 2.0);
            let r = comparison_check(&problem.ops, &traj, &v, &problem.source, 1e-6, cfg.verify.comparison_tol)?;
            bundle.checks.push(Check::at_most("comparison_exact_pair", r.excess(), r.tol));
        }
    }
    Ok(())
}

fn sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

const GRID_MAGIC: &[u8; 8] = b"CMAFGRID";
const GRID_VERSION: u32 = 1;

/// A field on the full lattice as stored in the binary grid format:
/// magic `CMAFGRID`, version (u32), axis count d (u32), d sizes (u64), d
/// origin coordinates (f64), `h` (f64), time (f64), then the values as f64
/// in row-major order with the last axis fastest. Exterior points hold NaN.
/// All numbers are little-endian.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeField {
    pub dims: Vec<usize>,
    pub origin: Vec<f64>,
    pub h: f64,
    pub time: f64,
    pub values: Vec<f64>,
}

impl LatticeField {
    pub fn from_field(field: &GridField) -> Self {
        let grid = field.grid();
        let values = (0..grid.lattice_len())
            .map(|i| grid.node_at(i).map_or(f64::NAN, |k| field.values[k]))
            .collect();
        Self {
            dims: grid.dims().to_vec(),
            origin: grid.origin(),
            h: grid.h(),
            time: field.time,
            values,
        }
    }

    pub fn into_table(self) -> Tabulated {
        Tabulated {
            lo: self.origin,
            h: self.h,
            dims: self.dims,
            values: self.values,
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(GRID_MAGIC)?;
        out.write_all(&GRID_VERSION.to_le_bytes())?;
        out.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &o in &self.origin {
            out.write_all(&o.to_le_bytes())?;
        }
        out.write_all(&self.h.to_le_bytes())?;
        out.write_all(&self.time.to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()
    }

    pub fn read<R: Read>(mut input: R) -> std::io::Result<Self> {
        let invalid = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(invalid("not a grid file"));
        }
        if read_u32(&mut input)? != GRID_VERSION {
            return Err(invalid("unsupported grid file version"));
        }
        let d = read_u32(&mut input)? as usize;
        if !(1..=6).contains(&d) {
            return Err(invalid("bad axis count"));
        }
        let dims = (0..d)
            .map(|_| read_u64(&mut input).map(|v| v as usize))
            .collect::<std::io::Result<Vec<usize>>>()?;
        let origin = (0..d).map(|_| read_f64(&mut input)).collect::<std::io::Result<Vec<f64>>>()?;
        let h = read_f64(&mut input)?;
        let time = read_f64(&mut input)?;
        let total = dims.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| invalid("size overflow"))?;
        let values = (0..total).map(|_| read_f64(&mut input)).collect::<std::io::Result<Vec<f64>>>()?;
        Ok(Self {
            dims,
            origin,
            h,
            time,
            values,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    read_u64(r).map(f64::from_bits)
}

pub fn read_grid_binary(path: &Path) -> Result<LatticeField> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    LatticeField::read(std::io::BufReader::new(file)).map_err(|e| Error::io(path, e))
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

struct CsvFile {
    path: PathBuf,
    w: csv::Writer<BufWriter<File>>,
}

impl CsvFile {
    fn create(path: PathBuf, header: &[&str]) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut f = Self {
            w: csv::Writer::from_writer(BufWriter::new(file)),
            path,
        };
        f.row(header.iter().map(|s| s.to_string()))?;
        Ok(f)
    }

    fn row<I: IntoIterator<Item = String>>(&mut self, record: I) -> Result<()> {
        let path = &self.path;
        self.w
            .write_record(record)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes the report files of a bundle into `dir`. The tables that always
/// exist are written with headers even when empty; output depends only on
/// the bundle, so identical runs give identical bytes.
pub fn emit_reports(bundle: &Bundle, dir: &Path, snapshots: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let mut summary = CsvFile::create(dir.join("summary.csv"), &["check", "measured", "bound", "enforced", "pass"])?;
    for c in &bundle.checks {
        summary.row([c.name.clone(), fmt(c.measured), fmt_opt(c.bound), c.enforced.to_string(), c.pass.to_string()])?;
    }
    if let Some(reason) = &bundle.abort {
        summary.row(["abort".into(), String::new(), String::new(), "true".into(), format!("false: {reason}")])?;
    }
    written.push(summary.path.clone());
    summary.finish()?;

    let mut steps = CsvFile::create(
        dir.join("steps.csv"),
        &["t", "dt", "newton_iterations", "linear_iterations", "pd_shifts", "retries", "residual"],
    )?;
    for s in bundle.trajectory.iter().flat_map(|t| &t.steps) {
        steps.row([
            fmt(s.t),
            fmt(s.dt),
            s.newton_iterations.to_string(),
            s.linear_iterations.to_string(),
            s.pd_shifts.to_string(),
            s.retries.to_string(),
            fmt_opt(s.residuals.last().copied()),
        ])?;
    }
    written.push(steps.path.clone());
    steps.finish()?;

    let mut bounds = CsvFile::create(dir.join("bounds.csv"), &["monitor", "measured", "bound", "enforced", "pass"])?;
    if let Some(r) = &bundle.bounds {
        let c = &r.constants;
        for (name, v) in [
            ("C_u", c.c_u),
            ("C_phi", c.c_phi),
            ("C_f", c.c_f),
            ("M_1", c.m1),
            ("C_1", c.c1),
            ("C_2'", c.c2_prime),
            ("C_2", c.c2),
            ("lambda", r.ellipticity.0),
            ("Lambda", r.ellipticity.1),
        ] {
            bounds.row([name.into(), fmt(v), String::new(), "false".into(), String::new()])?;
        }
        for m in &r.monitors {
            bounds.row([m.name.into(), fmt(m.measured), fmt_opt(m.bound), m.enforced.to_string(), m.pass().to_string()])?;
        }
    }
    written.push(bounds.path.clone());
    bounds.finish()?;

    let mut decay = CsvFile::create(dir.join("decay.csv"), &["t", "e"])?;
    if let Some(d) = &bundle.decay {
        for (t, e) in d.times.iter().zip(&d.errors) {
            decay.row([fmt(*t), fmt(*e)])?;
        }
    }
    written.push(decay.path.clone());
    decay.finish()?;

    let mut conv = CsvFile::create(dir.join("convergence.csv"), &["study", "param", "error", "order"])?;
    for r in &bundle.convergence {
        conv.row([r.study.into(), fmt(r.param), fmt(r.error), fmt_opt(r.order)])?;
    }
    written.push(conv.path.clone());
    conv.finish()?;

    if let Some(report) = &bundle.cascade {
        let mut levels = CsvFile::create(
            dir.join("cascade_levels.csv"),
            &["m", "eps_m", "sup_g", "delta_m", "ramp_halvings", "status"],
        )?;
        for run in &report.runs {
            let l = &run.level;
            let status = run.error.clone().unwrap_or_else(|| "ok".into());
            levels.row([l.m.to_string(), fmt(l.eps_m), fmt(l.sup_g), fmt(l.delta_m), l.ramp_halvings.to_string(), status])?;
        }
        written.push(levels.path.clone());
        levels.finish()?;
        let mut pairs = CsvFile::create(dir.join("cascade_pairs.csv"), &["k", "m", "sup_diff", "sup_abs", "bound", "holds"])?;
        for p in &report.pairs {
            pairs.row([p.k.to_string(), p.m.to_string(), fmt(p.sup_diff), fmt(p.sup_abs), fmt(p.bound), p.holds.to_string()])?;
        }
        written.push(pairs.path.clone());
        pairs.finish()?;
    }

    if let Some(reference) = &bundle.reference {
        let path = dir.join("radial_reference.csv");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_reference(reference, BufWriter::new(file)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    if let Some(report) = &bundle.barrier {
        let path = dir.join("barrier.csv");
        report.write_csv(&path)?;
        written.push(path);
    }
    if let Some(traj) = &bundle.trajectory {
        written.push(write_slices(traj, dir)?);
        if snapshots {
            written.extend(write_snapshots(traj, &dir.join("snapshots"))?);
        }
    }
    Ok(written)
}

/// Long-format `(t, x_1, y_1, u)` table of the plane `z_2 = ... = 0`.
fn write_slices(traj: &Trajectory, dir: &Path) -> Result<PathBuf> {
    let mut out = CsvFile::create(dir.join("slices.csv"), &["t", "x1", "y1", "u"])?;
    if let Some(first) = traj.snapshots.first() {
        let grid = first.grid().clone();
        let plane = plane_nodes(&grid);
        for s in &traj.snapshots {
            for &k in &plane {
                let x = grid.coords(k);
                out.row([fmt(s.time), fmt(x[0]), fmt(x[1]), fmt(s.values[k])])?;
            }
        }
    }
    let path = out.path.clone();
    out.finish()?;
    Ok(path)
}

/// Nodes whose coordinates beyond the first complex one sit on the lattice
/// line closest to zero.
fn plane_nodes(grid: &Grid) -> Vec<usize> {
    let h = grid.h();
    let origin = grid.origin();
    let target: Vec<f64> = origin.iter().map(|o| o + ((-o) / h).round() * h).collect();
    (0..grid.num_nodes())
        .filter(|&k| {
            let x = grid.coords(k);
            (2..x.len()).all(|i| (x[i] - target[i]).abs() < 0.5 * h)
        })
        .collect()
}

fn write_snapshots(traj: &Trajectory, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (j, s) in traj.snapshots.iter().enumerate() {
        let grid = s.grid();
        let dim = grid.real_dim();
        let mut header = vec!["kind".to_string(), "index".to_string()];
        header.extend((0..dim).map(axis_name));
        header.push("u".into());
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut table = CsvFile::create(dir.join(format!("u_{j:04}.csv")), &header)?;
        for k in 0..grid.num_nodes() {
            let mut row = vec!["node".to_string(), k.to_string()];
            row.extend(grid.coords(k).iter().map(|&v| fmt(v)));
            row.push(fmt(s.values[k]));
            table.row(row)?;
        }
        for (i, f) in grid.feet().iter().enumerate() {
            let mut row = vec!["foot".to_string(), i.to_string()];
            row.extend(f.coords.iter().map(|&v| fmt(v)));
            row.push(fmt(s.feet[i]));
            table.row(row)?;
        }
        written.push(table.path.clone());
        table.finish()?;

        let path = dir.join(format!("u_{j:04}.bin"));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        LatticeField::from_field(s)
            .write(BufWriter::new(file))
            .map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml_str("[grid]\nh = 0.1\nfoo = 1\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("foo")), "{err}");
        let err = ExperimentConfig::from_toml_str("foo = 1\n").unwrap_err();
        assert!(err.to_string().contains("foo"));
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.cascade.levels, vec![4, 8, 16, 32]);
        assert_eq!(cfg.time.stepper, Stepper::Implicit);
    }

    #[test]
    fn manufactured_conflicts_with_data_keys() {
        let err = ExperimentConfig::from_toml_str("[problem]\nmanufactured = \"exp_decay\"\ninitial = \"bowl\"\n").unwrap_err();
        assert!(err.to_string().contains("problem.initial"));
    }

    #[test]
    fn observed_orders_of_exact_powers() {
        let hs = [0.4, 0.2, 0.1];
        let es: Vec<f64> = hs.iter().map(|h| 3.0 * h * h).collect();
        let o = observed_orders(&hs, &es);
        assert!(o[0].is_none());
        assert!((o[1].unwrap() - 2.0).abs() < 1e-12 && (o[2].unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lattice_field_round_trip() {
        let f = LatticeField {
            dims: vec![2, 3],
            origin: vec![-0.5, -1.0],
            h: 0.5,
            time: 0.25,
            values: vec![1.0, f64::NAN, 3.0, -4.0, 5.5, 6.0],
        };
        let mut bytes = Vec::new();
        f.write(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 8 + 4 + 4 + 2 * 8 + 2 * 8 + 8 + 8 + 6 * 8);
        let g = LatticeField::read(bytes.as_slice()).unwrap();
        assert_eq!(g.dims, f.dims);
        assert_eq!(g.origin, f.origin);
        assert!(g.values[1].is_nan());
        assert_eq!(g.values[5], 6.0);
        assert!(LatticeField::read(&b"NOTAGRID"[..]).is_err());
    }

    #[test]
    fn empty_bundle_gives_header_only_tables() {
        let dir = tempfile::tempdir().unwrap();
        emit_reports(&Bundle::default(), dir.path(), true).unwrap();
        for (name, header) in [
            ("summary.csv", "check,measured,bound,enforced,pass\n"),
            ("decay.csv", "t,e\n"),
            ("convergence.csv", "study,param,error,order\n"),
        ] {
            assert_eq!(fs::read_to_string(dir.path().join(name)).unwrap(), header);
        }
    }

    #[test]
    fn exact_config_passes_every_check() {
        let cfg = ExperimentConfig::from_toml_str(
            "[grid]\nh = 0.1\n[time]\nhorizon = 0.5\ndt = 0.05\nsnapshots = 5\n\
             [problem]\nmanufactured = \"quadratic\"\n[monitors]\nerror_tol = 1e-8\n",
        )
        .unwrap();
        let b = run_experiment(&cfg, Pipeline::Run, 1).unwrap();
        assert!(b.passed(), "{:?}", b.checks);
        assert!(b.check("manufactured_error").unwrap().measured <= 1e-8);
        assert!(b.check("shift_gap").is_some());
    }
}
