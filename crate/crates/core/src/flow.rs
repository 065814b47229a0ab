//! Time integration of `u_t = log det(u_{a b-bar}) + f(t, z, u)` with
//! Dirichlet data: forward Euler with a positivity guard, damped-Newton
//! backward Euler, and the approximation cascade over `m`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calculus::{coefficient_matrix, harmonic_extension, GridField, Operators};
use crate::error::{Error, Result};
use crate::geometry::{classify_grid, Domain, Grid, Link};
use crate::hermitian::HermitianForm;
use crate::initial_data::{boundary_ramp, boundary_ramp_dt, build_cascade, norm2, CascadeLevel, InitialData, InitialKind};
use crate::linsolve::{bicgstab, CsrMatrix};

pub type SourceFn = Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>;
pub type BoundaryFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

/// The source term `f(t, z, u)` with optional closed-form partial derivatives.
#[derive(Clone)]
pub struct Source {
    name: String,
    f: SourceFn,
    f_u: Option<SourceFn>,
    f_t: Option<SourceFn>,
}

impl std::fmt::Debug for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Source({})", self.name)
    }
}

impl Source {
    pub fn new(name: impl Into<String>, f: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
            f_u: None,
            f_t: None,
        }
    }

    pub fn with_du(mut self, f_u: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        self.f_u = Some(Arc::new(f_u));
        self
    }

    pub fn with_dt(mut self, f_t: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        self.f_t = Some(Arc::new(f_t));
        self
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("const({c})"), move |_, _, _| c)
            .with_du(|_, _, _| 0.0)
            .with_dt(|_, _, _| 0.0)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], u: f64) -> f64 {
        (self.f)(t, x, u)
    }

    pub fn du(&self, t: f64, x: &[f64], u: f64) -> f64 {
        match &self.f_u {
            Some(g) => g(t, x, u),
            None => {
                let e = 1e-6 * (1.0 + u.abs());
                (self.eval(t, x, u + e) - self.eval(t, x, u - e)) / (2.0 * e)
            }
        }
    }

    pub fn dt(&self, t: f64, x: &[f64], u: f64) -> f64 {
        match &self.f_t {
            Some(g) => g(t, x, u),
            None => {
                let e = 1e-6 * (1.0 + t.abs());
                (self.eval(t + e, x, u) - self.eval(t - e, x, u)) / (2.0 * e)
            }
        }
    }

    /// `(t, z, u) -> f(t + s, z, u)`.
    pub fn shifted(&self, s: f64) -> Self {
        let (f, fu, ft) = (self.f.clone(), self.f_u.clone(), self.f_t.clone());
        Self {
            name: format!("{}@+{s}", self.name),
            f: Arc::new(move |t, x, u| f(t + s, x, u)),
            f_u: fu.map(|g| Arc::new(move |t, x: &[f64], u| g(t + s, x, u)) as SourceFn),
            f_t: ft.map(|g| Arc::new(move |t, x: &[f64], u| g(t + s, x, u)) as SourceFn),
        }
    }

    /// `f + c`.
    pub fn offset(&self, c: f64) -> Self {
        let (f, fu, ft) = (self.f.clone(), self.f_u.clone(), self.f_t.clone());
        Self {
            name: format!("{}{c:+}", self.name),
            f: Arc::new(move |t, x, u| f(t, x, u) + c),
            f_u: fu,
            f_t: ft,
        }
    }

    /// Spot-checks `f_u <= 0` at seeded random samples.
    pub fn check_nonincreasing(&self, grid: &Grid, horizon: f64, u_range: f64, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..256 {
            let k = rng.gen_range(0..grid.num_nodes());
            let t = rng.gen_range(0.0..=horizon);
            let u = rng.gen_range(-u_range..=u_range);
            let x = grid.coords(k);
            let d = self.du(t, x, u);
            if d > 1e-8 {
                return Err(Error::InvalidInput(format!(
                    "source {} has f_u = {d:.3e} > 0 at t = {t}, z = {x:?}, u = {u}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Boundary data `phi(z, t)`, defined on a neighbourhood of the closed domain.
#[derive(Clone)]
pub struct BoundaryData {
    name: String,
    phi: BoundaryFn,
    phi_t: Option<BoundaryFn>,
}

impl std::fmt::Debug for BoundaryData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BoundaryData({})", self.name)
    }
}

impl BoundaryData {
    pub fn new(name: impl Into<String>, phi: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            phi: Arc::new(phi),
            phi_t: None,
        }
    }

    pub fn with_dt(mut self, phi_t: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        self.phi_t = Some(Arc::new(phi_t));
        self
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("const({c})"), move |_, _| c).with_dt(|_, _| 0.0)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        (self.phi)(x, t)
    }

    pub fn dt(&self, x: &[f64], t: f64) -> f64 {
        match &self.phi_t {
            Some(g) => g(x, t),
            None => {
                let e = 1e-6;
                if t >= e {
                    (self.eval(x, t + e) - self.eval(x, t - e)) / (2.0 * e)
                } else {
                    (self.eval(x, t + e) - self.eval(x, t)) / e
                }
            }
        }
    }

    /// `(z, t) -> phi(z, t + s)`.
    pub fn shifted(&self, s: f64) -> Self {
        let (p, pt) = (self.phi.clone(), self.phi_t.clone());
        Self {
            name: format!("{}@+{s}", self.name),
            phi: Arc::new(move |x, t| p(x, t + s)),
            phi_t: pt.map(|g| Arc::new(move |x: &[f64], t| g(x, t + s)) as BoundaryFn),
        }
    }

    /// `phi + c`.
    pub fn offset(&self, c: f64) -> Self {
        let (p, pt) = (self.phi.clone(), self.phi_t.clone());
        Self {
            name: format!("{}{c:+}", self.name),
            phi: Arc::new(move |x, t| p(x, t) + c),
            phi_t: pt,
        }
    }
}

/// Dirichlet values at the feet as a function of time: plain `phi`, or the
/// ramp `phi_m` of a cascade level, optionally shifted in time.
#[derive(Clone, Debug)]
pub struct BoundaryPlan {
    phi: BoundaryData,
    level: Option<Arc<CascadeLevel>>,
    shift: f64,
}

impl BoundaryPlan {
    pub fn direct(phi: BoundaryData) -> Self {
        Self {
            phi,
            level: None,
            shift: 0.0,
        }
    }

    pub fn ramp(level: Arc<CascadeLevel>, phi: BoundaryData) -> Self {
        Self {
            phi,
            level: Some(level),
            shift: 0.0,
        }
    }

    pub fn shifted(&self, s: f64) -> Self {
        Self {
            shift: self.shift + s,
            ..self.clone()
        }
    }

    pub fn values(&self, grid: &Grid, t: f64) -> Vec<f64> {
        let t = t + self.shift;
        match &self.level {
            Some(level) => boundary_ramp(level, grid, &self.phi, t),
            None => grid.feet().iter().map(|f| self.phi.eval(&f.coords, t)).collect(),
        }
    }

    pub fn dt(&self, grid: &Grid, foot: usize, t: f64) -> f64 {
        let t = t + self.shift;
        let x = &grid.foot(foot).coords;
        match &self.level {
            Some(level) => boundary_ramp_dt(level, foot, x, &self.phi, t),
            None => self.phi.dt(x, t),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stepper {
    Explicit,
    Implicit,
}

impl Stepper {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stepper::Explicit => "explicit",
            Stepper::Implicit => "implicit",
        }
    }
}

#[derive(Clone, Debug)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Linear solves stop at `linear_tol * max|residual|`.
    pub linear_tol: f64,
    pub linear_max_iter: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
            max_halvings: 20,
            linear_tol: 1e-11,
            linear_max_iter: 5000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TimeConfig {
    pub horizon: f64,
    /// Implicit: the step; explicit: an upper cap on the CFL step.
    pub dt: f64,
    pub dt_min: f64,
    /// CFL safety factor for the explicit stepper.
    pub cfl: f64,
    /// Increasing snapshot times, starting at 0 and ending at the horizon.
    pub snapshots: Vec<f64>,
}

impl TimeConfig {
    pub fn new(horizon: f64, dt: f64, snapshots: Vec<f64>) -> Self {
        Self {
            horizon,
            dt,
            dt_min: 1e-12,
            cfl: 0.2,
            snapshots,
        }
    }

    /// Snapshots `t_j = T (j/J)^2`, refined near `t = 0`.
    pub fn quadratic_schedule(horizon: f64, count: usize) -> Vec<f64> {
        (0..=count)
            .map(|j| horizon * (j as f64 / count as f64).powi(2))
            .collect()
    }

    /// Adds snapshot times, keeping the list sorted and free of near duplicates.
    pub fn with_extra_snapshots(mut self, extra: &[f64]) -> Self {
        for &t in extra {
            if t > 0.0 && t < self.horizon && self.snapshots.iter().all(|s| (s - t).abs() > 1e-12) {
                self.snapshots.push(t);
            }
        }
        self.snapshots.sort_by(f64::total_cmp);
        self
    }
}

/// A full flow instance.
#[derive(Clone, Debug)]
pub struct FlowProblem {
    pub domain: Domain,
    pub grid: Arc<Grid>,
    pub ops: Arc<Operators>,
    pub source: Source,
    pub boundary: BoundaryData,
    pub initial: InitialData,
    pub stepper: Stepper,
    pub time: TimeConfig,
    pub newton: NewtonConfig,
}

impl FlowProblem {
    /// Builds the grid, measures the initial data and validates the instance.
    pub fn new(
        domain: Domain,
        h: f64,
        source: Source,
        boundary: BoundaryData,
        initial: InitialKind,
        stepper: Stepper,
        time: TimeConfig,
    ) -> Result<Self> {
        let grid = Arc::new(classify_grid(&domain, h)?);
        let initial = InitialData::new(initial, &domain, &grid)?;
        Self::assemble(domain, grid, source, boundary, initial, stepper, time)
    }

    pub fn assemble(
        domain: Domain,
        grid: Arc<Grid>,
        source: Source,
        boundary: BoundaryData,
        initial: InitialData,
        stepper: Stepper,
        time: TimeConfig,
    ) -> Result<Self> {
        validate_time(&time)?;
        source.check_nonincreasing(&grid, time.horizon, 2.0 * (1.0 + initial.bound), 0)?;
        for f in grid.feet() {
            let gap = (boundary.eval(&f.coords, 0.0) - initial.eval(&f.coords)).abs();
            if gap > 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "phi(z, 0) differs from u0 by {gap:.3e} at boundary point {:?}",
                    f.coords
                )));
            }
        }
        let ops = Arc::new(Operators::new(grid.clone()));
        Ok(Self {
            domain,
            grid,
            ops,
            source,
            boundary,
            initial,
            stepper,
            time,
            newton: NewtonConfig::default(),
        })
    }

    pub fn n(&self) -> usize {
        self.domain.n()
    }
}

fn validate_time(time: &TimeConfig) -> Result<()> {
    let s = &time.snapshots;
    if !(time.horizon > 0.0) || !(time.dt > 0.0) {
        return Err(Error::InvalidInput("horizon and dt must be positive".into()));
    }
    if s.len() < 2 || s[0] != 0.0 || (s[s.len() - 1] - time.horizon).abs() > 1e-12 {
        return Err(Error::InvalidInput(
            "snapshots must start at 0 and end at the horizon".into(),
        ));
    }
    if s.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("snapshots must increase".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct StepRecord {
    /// End time of the step.
    pub t: f64,
    pub dt: f64,
    pub newton_iterations: usize,
    pub linear_iterations: usize,
    pub pd_shifts: usize,
    /// Newton residual after each accepted iterate (first entry is the initial residual).
    pub residuals: Vec<f64>,
    pub retries: usize,
}

/// Snapshots, time derivatives at snapshots, and per-step diagnostics.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub stepper: Option<Stepper>,
    pub snapshots: Vec<GridField>,
    /// Backward difference of the last step before each snapshot
    /// (the first step's difference at `t = 0`).
    pub udot: Vec<GridField>,
    pub steps: Vec<StepRecord>,
    /// Number of steps taken when each snapshot was recorded.
    pub snapshot_steps: Vec<usize>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn final_state(&self) -> Option<&GridField> {
        self.snapshots.last()
    }

    /// Index of the snapshot at time `t`, if any.
    pub fn snapshot_at(&self, t: f64) -> Option<usize> {
        self.snapshots.iter().position(|s| (s.time - t).abs() <= 1e-12)
    }

    pub fn total_pd_shifts(&self) -> usize {
        self.steps.iter().map(|s| s.pd_shifts).sum()
    }

    /// Max over snapshots of `max|u(., t) - exact(., t)|` on nodes and feet.
    pub fn max_error(&self, exact: impl Fn(&[f64], f64) -> f64) -> f64 {
        self.snapshots
            .iter()
            .map(|s| s.max_error(|x| exact(x, s.time)))
            .fold(0.0, f64::max)
    }
}

/// Everything a single integration needs.
#[derive(Clone)]
pub struct FlowContext<'a> {
    pub ops: &'a Operators,
    pub source: Source,
    pub boundary: BoundaryPlan,
    pub stepper: Stepper,
    pub newton: &'a NewtonConfig,
}

fn not_psh_at(grid: &Grid, node: usize, h: &HermitianForm) -> Error {
    Error::NotPlurisubharmonic {
        point: grid.coords(node).to_vec(),
        min_eig: h.min_eigenvalue(),
    }
}

/// `log det H + f` at every node, or the first non-PD node.
fn flow_rhs(ops: &Operators, source: &Source, u: &GridField, t: f64) -> std::result::Result<Vec<f64>, usize> {
    let grid = ops.grid();
    let vals: Vec<Option<f64>> = (0..grid.num_nodes())
        .into_par_iter()
        .map(|k| {
            let h = ops.complex_hessian_at(u, k);
            h.cholesky()
                .ok()
                .map(|c| c.log_det() + source.eval(t, grid.coords(k), u.values[k]))
        })
        .collect();
    vals.into_iter()
        .enumerate()
        .map(|(k, v)| v.ok_or(k))
        .collect()
}

fn first_non_pd(ops: &Operators, u: &GridField) -> Option<usize> {
    (0..ops.grid().num_nodes())
        .into_par_iter()
        .find_first(|&k| !ops.complex_hessian_at(u, k).is_positive_definite())
}

/// Largest stable forward-Euler step for the current state.
pub fn explicit_dt(ops: &Operators, source: &Source, u: &GridField, cfl: f64) -> Result<f64> {
    explicit_analysis(ops, source, u, cfl).map(|(_, dt)| dt)
}

/// `log det H + f` at every node together with the stable step, from one
/// Hessian evaluation per node.
fn explicit_analysis(ops: &Operators, source: &Source, u: &GridField, cfl: f64) -> Result<(Vec<f64>, f64)> {
    let grid = ops.grid();
    let n = grid.n() as f64;
    let h = grid.h();
    let per_node: Vec<Result<(f64, f64, f64)>> = (0..grid.num_nodes())
        .into_par_iter()
        .map(|k| {
            let (d, c) = ops.real_hessian_with_center(u, k);
            let hk = HermitianForm::from_real_hessian(grid.n(), |i, j| d[i][j]);
            let chol = hk.cholesky().map_err(|_| not_psh_at(grid, k, &hk))?;
            let a = coefficient_matrix(&hk).map_err(|_| not_psh_at(grid, k, &hk))?;
            let lmax = 1.0 / hk.min_eigenvalue();
            let dim = grid.real_dim();
            let center: f64 = (0..dim)
                .flat_map(|i| (0..dim).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * c[i][j])
                .sum();
            let x = grid.coords(k);
            let fu = source.du(u.time, x, u.values[k]);
            let rhs = chol.log_det() + source.eval(u.time, x, u.values[k]);
            Ok((rhs, lmax, (center + fu).abs()))
        })
        .collect();
    let (mut lmax, mut diag) = (0.0f64, 0.0f64);
    let mut rhs = Vec::with_capacity(per_node.len());
    for r in per_node {
        let (v, l, d) = r?;
        rhs.push(v);
        lmax = lmax.max(l);
        diag = diag.max(d);
    }
    let cfl_dt = cfl * h * h / (2.0 * n * lmax);
    Ok((rhs, cfl_dt.min(0.5 / diag)))
}

/// One forward-Euler step with the positivity guard.
pub fn step_explicit(ctx: &FlowContext, state: &GridField, dt: f64) -> Result<(GridField, StepRecord)> {
    let grid = ctx.ops.grid();
    let t = state.time;
    let rhs = flow_rhs(ctx.ops, &ctx.source, state, t).map_err(|k| {
        let h = ctx.ops.complex_hessian_at(state, k);
        Error::StepRejected {
            t,
            reason: format!("state not plurisubharmonic at {:?}: {}", grid.coords(k), not_psh_at(grid, k, &h)),
            residuals: Vec::new(),
        }
    })?;
    explicit_update(ctx, state, dt, &rhs)
}

fn explicit_update(ctx: &FlowContext, state: &GridField, dt: f64, rhs: &[f64]) -> Result<(GridField, StepRecord)> {
    let grid = ctx.ops.grid();
    let t = state.time;
    let values: Vec<f64> = state.values.iter().zip(rhs).map(|(u, r)| u + dt * r).collect();
    let feet = ctx.boundary.values(grid, t + dt);
    let mut next = GridField::new(grid.clone(), values, feet, t + dt)?;
    let eps_pd = 1e-8 * (1.0 + state.max_abs());
    let mut shifts = 0;
    while let Some(k) = first_non_pd(ctx.ops, &next) {
        if shifts == 3 {
            let h = ctx.ops.complex_hessian_at(&next, k);
            return Err(Error::StepRejected {
                t: t + dt,
                reason: format!("positivity guard exhausted: {}", not_psh_at(grid, k, &h)),
                residuals: Vec::new(),
            });
        }
        for (node, v) in next.values.iter_mut().enumerate() {
            *v += eps_pd * norm2(grid.coords(node));
        }
        shifts += 1;
    }
    Ok((
        next,
        StepRecord {
            t: t + dt,
            dt,
            pd_shifts: shifts,
            ..Default::default()
        },
    ))
}

fn newton_residual(
    ops: &Operators,
    source: &Source,
    u: &GridField,
    old: &[f64],
    dt: f64,
) -> std::result::Result<Vec<f64>, usize> {
    let rhs = flow_rhs(ops, source, u, u.time)?;
    Ok(u.values
        .iter()
        .zip(&rhs)
        .zip(old)
        .map(|((v, r), o)| v - dt * r - o)
        .collect())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Jacobian `I - dt (sum_ij a_ij D_ij + f_u)` restricted to node unknowns.
fn newton_jacobian(ops: &Operators, source: &Source, u: &GridField, dt: f64) -> Result<CsrMatrix> {
    let grid = ops.grid();
    let rows: Vec<Result<Vec<(usize, f64)>>> = (0..grid.num_nodes())
        .into_par_iter()
        .map_init(Vec::new, |buf, k| {
            let hk = ops.complex_hessian_at(u, k);
            let a = coefficient_matrix(&hk).map_err(|_| not_psh_at(grid, k, &hk))?;
            ops.linear_combination(k, &a, buf);
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(buf.len());
            row.push((k, 1.0 - dt * source.du(u.time, grid.coords(k), u.values[k])));
            for &(l, c) in buf.iter() {
                if let Link::Node(j) = l {
                    row.push((j as usize, -dt * c));
                }
            }
            Ok(row)
        })
        .collect();
    let mut m = CsrMatrix::with_capacity(grid.num_nodes(), grid.num_nodes() * 16);
    for r in rows {
        m.push_row(&r?);
    }
    Ok(m)
}

/// One backward-Euler step solved by damped Newton.
pub fn step_implicit(ctx: &FlowContext, state: &GridField, dt: f64) -> Result<(GridField, StepRecord)> {
    let grid = ctx.ops.grid();
    let t1 = state.time + dt;
    let feet = ctx.boundary.values(grid, t1);
    let increment: Vec<f64> = feet.iter().zip(&state.feet).map(|(a, b)| a - b).collect();
    let scale = max_abs(&increment);
    let mut start = state.values.clone();
    if scale > 0.0 {
        // carry the boundary increment inward harmonically; its Hessian is traceless
        let ext = harmonic_extension(ctx.ops, increment, t1, 1e-6 * scale)?;
        for (v, e) in start.iter_mut().zip(&ext.values) {
            *v += e;
        }
    }
    let mut u = GridField::new(grid.clone(), start.clone(), feet, t1)?;
    let mut record = StepRecord {
        t: t1,
        dt,
        ..Default::default()
    };
    // fall back to a shift inside the psh cone that vanishes on the outermost feet
    let r2 = grid.feet().iter().map(|f| norm2(&f.coords)).fold(0.0, f64::max);
    let mut beta = 1e-8 * (1.0 + state.max_abs());
    while first_non_pd(ctx.ops, &u).is_some() {
        if record.pd_shifts >= 60 {
            return Err(Error::StepRejected {
                t: t1,
                reason: "no plurisubharmonic initial guess".into(),
                residuals: Vec::new(),
            });
        }
        for (node, v) in u.values.iter_mut().enumerate() {
            *v = start[node] + beta * (norm2(grid.coords(node)) - r2);
        }
        beta *= 2.0;
        record.pd_shifts += 1;
    }
    let cfg = ctx.newton;
    let mut res = newton_residual(ctx.ops, &ctx.source, &u, &state.values, dt).expect("guess is psh");
    let mut res_norm = max_abs(&res);
    record.residuals.push(res_norm);
    let mut iter = 0;
    while res_norm > cfg.tol {
        if iter == cfg.max_iter {
            return Err(Error::StepRejected {
                t: t1,
                reason: format!("Newton stalled after {iter} iterations"),
                residuals: record.residuals,
            });
        }
        iter += 1;
        let jac = newton_jacobian(ctx.ops, &ctx.source, &u, dt)?;
        let rhs: Vec<f64> = res.iter().map(|v| -v).collect();
        let mut delta = vec![0.0; rhs.len()];
        let stats = match bicgstab(&jac, &rhs, &mut delta, cfg.linear_tol * res_norm, cfg.linear_max_iter) {
            Ok(s) => s,
            Err(Error::SolverStall { residual, .. }) if residual < 0.1 * res_norm => {
                // an inexact direction is still usable under damping
                crate::linsolve::SolveStats {
                    iterations: cfg.linear_max_iter,
                    residual,
                    history: Vec::new(),
                }
            }
            Err(e) => {
                return Err(Error::StepRejected {
                    t: t1,
                    reason: format!("linear solve failed: {e}"),
                    residuals: record.residuals,
                })
            }
        };
        record.linear_iterations += stats.iterations;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=cfg.max_halvings {
            let mut trial = u.clone();
            for (v, d) in trial.values.iter_mut().zip(&delta) {
                *v += lambda * d;
            }
            if let Ok(r) = newton_residual(ctx.ops, &ctx.source, &trial, &state.values, dt) {
                let rn = max_abs(&r);
                if rn < res_norm {
                    u = trial;
                    res = r;
                    res_norm = rn;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::StepRejected {
                t: t1,
                reason: "damping exhausted without residual decrease".into(),
                residuals: record.residuals,
            });
        }
        record.residuals.push(res_norm);
    }
    record.newton_iterations = iter;
    Ok((u, record))
}

fn take_step(ctx: &FlowContext, state: &GridField, dt: f64) -> Result<(GridField, StepRecord)> {
    match ctx.stepper {
        Stepper::Explicit => step_explicit(ctx, state, dt),
        Stepper::Implicit => step_implicit(ctx, state, dt),
    }
}

/// How steps are chosen between snapshots.
#[derive(Clone, Debug)]
pub enum StepPlan {
    /// Implicit: uniform substeps of at most `time.dt`; explicit: CFL-limited steps.
    Adaptive(TimeConfig),
    /// Exact step end times, with the subset of them that are snapshots.
    Replay { step_ends: Vec<f64>, snapshots: Vec<f64> },
}

fn backward_difference(a: &GridField, b: &GridField) -> GridField {
    let dt = b.time - a.time;
    b.with_values(
        b.values.iter().zip(&a.values).map(|(x, y)| (x - y) / dt).collect(),
        b.feet.iter().zip(&a.feet).map(|(x, y)| (x - y) / dt).collect(),
    )
}

struct Recorder {
    traj: Trajectory,
    /// State before the most recent step.
    last_prev: Option<GridField>,
}

impl Recorder {
    fn snapshot(&mut self, state: &GridField) {
        self.traj.snapshots.push(state.clone());
        self.traj.snapshot_steps.push(self.traj.steps.len());
        let udot = match &self.last_prev {
            Some(p) => backward_difference(p, state),
            None => state.with_values(vec![0.0; state.values.len()], vec![0.0; state.feet.len()]),
        };
        self.traj.udot.push(udot);
    }

    fn step(&mut self, prev: GridField, next: &GridField, rec: StepRecord) {
        if self.traj.steps.is_empty() && self.traj.udot.len() == 1 {
            // the t = 0 derivative is the first step's forward difference
            let mut d = backward_difference(&prev, next);
            d.time = prev.time;
            self.traj.udot[0] = d;
        }
        self.traj.steps.push(rec);
        self.last_prev = Some(prev);
    }

    fn abort(self, t: f64, err: Error) -> Error {
        Error::FlowAborted {
            t,
            reason: err.to_string(),
            partial: Box::new(self.traj),
        }
    }
}

/// Steps from `state` to exactly `target`, halving the step on rejection.
fn advance_to(ctx: &FlowContext, state: GridField, target: f64, dt_min: f64, rec: &mut Recorder) -> Result<GridField> {
    let attempt = take_step(ctx, &state, target - state.time);
    settle(ctx, state, target, dt_min, rec, attempt)
}

fn settle(
    ctx: &FlowContext,
    state: GridField,
    target: f64,
    dt_min: f64,
    rec: &mut Recorder,
    attempt: Result<(GridField, StepRecord)>,
) -> Result<GridField> {
    let dt = target - state.time;
    match attempt {
        Ok((mut next, mut r)) => {
            next.time = target;
            r.t = target;
            r.retries = 0;
            rec.step(state, &next, r);
            Ok(next)
        }
        Err(Error::StepRejected { .. }) if 0.5 * dt >= dt_min => {
            let mid = state.time + 0.5 * dt;
            let half = advance_to(ctx, state, mid, dt_min, rec)?;
            if let Some(last) = rec.traj.steps.last_mut() {
                last.retries += 1;
            }
            advance_to(ctx, half, target, dt_min, rec)
        }
        Err(e) => Err(e),
    }
}

/// Integrates from `initial` according to `plan`.
pub fn integrate(ctx: &FlowContext, initial: GridField, plan: &StepPlan) -> Result<Trajectory> {
    let mut rec = Recorder {
        traj: Trajectory {
            stepper: Some(ctx.stepper),
            ..Default::default()
        },
        last_prev: None,
    };
    let mut state = initial;
    rec.snapshot(&state);
    match plan {
        StepPlan::Replay { step_ends, snapshots } => {
            for &t1 in step_ends {
                let t0 = state.time;
                state = match advance_to(ctx, state, t1, f64::INFINITY, &mut rec) {
                    Ok(s) => s,
                    Err(e) => return Err(rec.abort(t0, e)),
                };
                if snapshots.iter().any(|s| (s - t1).abs() <= 1e-12) {
                    rec.snapshot(&state);
                }
            }
        }
        StepPlan::Adaptive(time) => {
            for w in time.snapshots.windows(2) {
                let (t0, t_next) = (w[0], w[1]);
                if ctx.stepper == Stepper::Implicit {
                    let count = ((t_next - t0) / time.dt - 1e-9).ceil().max(1.0) as usize;
                    for j in 1..=count {
                        let target = if j == count {
                            t_next
                        } else {
                            t0 + (t_next - t0) * j as f64 / count as f64
                        };
                        let at = state.time;
                        state = match advance_to(ctx, state, target, time.dt_min, &mut rec) {
                            Ok(s) => s,
                            Err(e) => return Err(rec.abort(at, e)),
                        };
                    }
                } else {
                    while state.time < t_next - 1e-14 {
                        let at = state.time;
                        let (rhs, cap) = match explicit_analysis(ctx.ops, &ctx.source, &state, time.cfl) {
                            Ok((rhs, v)) => (rhs, v.min(time.dt)),
                            Err(e) => return Err(rec.abort(at, e)),
                        };
                        let target = if at + cap >= t_next - 1e-14 { t_next } else { at + cap };
                        let attempt = explicit_update(ctx, &state, target - at, &rhs);
                        state = match settle(ctx, state, target, time.dt_min, &mut rec, attempt) {
                            Ok(s) => s,
                            Err(e) => return Err(rec.abort(at, e)),
                        };
                    }
                }
                rec.snapshot(&state);
            }
        }
    }
    Ok(rec.traj)
}

/// Initial state and boundary plan of a run: the mollified level if given,
/// otherwise `u0` itself with `phi`.
pub fn start_of(problem: &FlowProblem, level: Option<&Arc<CascadeLevel>>) -> (GridField, BoundaryPlan) {
    match level {
        Some(l) => (
            l.u0m.clone(),
            BoundaryPlan::ramp(l.clone(), problem.boundary.clone()),
        ),
        None => {
            let plan = BoundaryPlan::direct(problem.boundary.clone());
            let grid = problem.grid.clone();
            let values = (0..grid.num_nodes())
                .map(|k| problem.initial.eval(grid.coords(k)))
                .collect();
            let feet = plan.values(&grid, 0.0);
            (GridField::new(grid, values, feet, 0.0).expect("initial data is finite"), plan)
        }
    }
}

/// Integrates the problem from `u_{0,m}` with the ramped boundary `phi_m`, or
/// from `u0` with `phi` when no level is given.
pub fn run_flow(problem: &FlowProblem, level: Option<&Arc<CascadeLevel>>) -> Result<Trajectory> {
    let (init, boundary) = start_of(problem, level);
    let ctx = FlowContext {
        ops: &problem.ops,
        source: problem.source.clone(),
        boundary,
        stepper: problem.stepper,
        newton: &problem.newton,
    };
    integrate(&ctx, init, &StepPlan::Adaptive(problem.time.clone()))
}

/// One cascade level together with its run, or the error that stopped it.
#[derive(Clone, Debug)]
pub struct LevelRun {
    pub level: Arc<CascadeLevel>,
    pub trajectory: Option<Trajectory>,
    pub error: Option<String>,
}

/// Comparison of two levels `k < m` over grid x snapshots.
#[derive(Clone, Debug)]
pub struct PairGap {
    pub k: u32,
    pub m: u32,
    /// `sup (u_m - u_k)`.
    pub sup_diff: f64,
    /// `sup |u_m - u_k|`.
    pub sup_abs: f64,
    /// `2 eps_k (1 + sup|g_k|)`.
    pub bound: f64,
    pub holds: bool,
}

#[derive(Clone, Debug)]
pub struct CascadeReport {
    pub runs: Vec<LevelRun>,
    pub pairs: Vec<PairGap>,
    /// `(k, max_{m > k} sup|u_m - u_k|)` for every completed level but the last.
    pub gaps: Vec<(u32, f64)>,
    pub tol: f64,
}

impl CascadeReport {
    pub fn missing(&self) -> Vec<u32> {
        self.runs
            .iter()
            .filter(|r| r.trajectory.is_none())
            .map(|r| r.level.m)
            .collect()
    }

    /// Every pair satisfies the ordering bound.
    pub fn ordering_holds(&self) -> bool {
        self.pairs.iter().all(|p| p.holds)
    }

    /// Sup-gaps strictly decrease in `k`.
    pub fn gaps_decreasing(&self) -> bool {
        self.gaps.windows(2).all(|w| w[1].1 < w[0].1)
    }

    pub fn passed(&self) -> bool {
        self.missing().is_empty() && self.ordering_holds() && self.gaps_decreasing()
    }
}

fn sup_diff(a: &Trajectory, b: &Trajectory) -> (f64, f64) {
    let mut signed = f64::NEG_INFINITY;
    let mut abs = 0.0f64;
    for (x, y) in a.snapshots.iter().zip(&b.snapshots) {
        for (p, q) in x.values.iter().chain(&x.feet).zip(y.values.iter().chain(&y.feet)) {
            signed = signed.max(p - q);
            abs = abs.max((p - q).abs());
        }
    }
    (signed, abs)
}

/// Builds the levels `ms`, runs each on up to `jobs` threads and compares
/// every pair `m > k` with `k >= m0`.
pub fn run_cascade(problem: &FlowProblem, ms: &[u32], m0: u32, tol: f64, jobs: usize) -> Result<CascadeReport> {
    let levels = build_cascade(
        &problem.initial,
        ms,
        &problem.domain,
        &problem.ops,
        &problem.source,
        &problem.boundary,
    )?;
    let levels: Vec<Arc<CascadeLevel>> = levels.into_iter().map(Arc::new).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let runs: Vec<LevelRun> = pool.install(|| {
        levels
            .par_iter()
            .map(|l| match run_flow(problem, Some(l)) {
                Ok(t) => LevelRun {
                    level: l.clone(),
                    trajectory: Some(t),
                    error: None,
                },
                Err(e) => LevelRun {
                    level: l.clone(),
                    trajectory: None,
                    error: Some(e.to_string()),
                },
            })
            .collect()
    });
    let mut pairs = Vec::new();
    let mut gaps = Vec::new();
    for (i, rk) in runs.iter().enumerate() {
        let Some(tk) = &rk.trajectory else { continue };
        if rk.level.m < m0 {
            continue;
        }
        let mut worst: Option<f64> = None;
        for rm in &runs[i + 1..] {
            let Some(tm) = &rm.trajectory else { continue };
            let (signed, abs) = sup_diff(tm, tk);
            let bound = 2.0 * rk.level.eps_m * (1.0 + rk.level.sup_g);
            pairs.push(PairGap {
                k: rk.level.m,
                m: rm.level.m,
                sup_diff: signed,
                sup_abs: abs,
                bound,
                holds: signed <= bound + tol,
            });
            worst = Some(worst.map_or(abs, |w: f64| w.max(abs)));
        }
        if let Some(w) = worst {
            gaps.push((rk.level.m, w));
        }
    }
    Ok(CascadeReport { runs, pairs, gaps, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_domain, DomainKind};

    fn exact_problem(n: usize, h: f64, stepper: Stepper, b: f64, horizon: f64) -> FlowProblem {
        let domain = make_domain(DomainKind::Ball, n).unwrap();
        let time = TimeConfig::new(horizon, horizon / 8.0, TimeConfig::quadratic_schedule(horizon, 4));
        FlowProblem::new(
            domain,
            h,
            Source::constant(b),
            BoundaryData::new("|z|^2+bt", move |x, t| norm2(x) + b * t).with_dt(move |_, _| b),
            InitialKind::Quadratic(1.0),
            stepper,
            time,
        )
        .unwrap()
    }

    fn ctx(p: &FlowProblem) -> FlowContext<'_> {
        FlowContext {
            ops: &p.ops,
            source: p.source.clone(),
            boundary: BoundaryPlan::direct(p.boundary.clone()),
            stepper: p.stepper,
            newton: &p.newton,
        }
    }

    #[test]
    fn explicit_fixed_point() {
        let p = exact_problem(1, 0.1, Stepper::Explicit, 0.0, 0.1);
        let (u0, _) = start_of(&p, None);
        let (u1, rec) = step_explicit(&ctx(&p), &u0, 1e-3).unwrap();
        assert!(u1.max_abs_diff(&u0) <= 1e-14);
        assert_eq!(rec.pd_shifts, 0);
    }

    #[test]
    fn explicit_constant_rate_is_exact() {
        let p = exact_problem(1, 0.1, Stepper::Explicit, 1.0, 0.1);
        let c = ctx(&p);
        let (mut u, _) = start_of(&p, None);
        let dt = explicit_dt(&p.ops, &p.source, &u, 0.2).unwrap();
        for _ in 0..10 {
            u = step_explicit(&c, &u, dt).unwrap().0;
        }
        assert!(u.max_error(|x| norm2(x) + 10.0 * dt) <= 1e-12);
    }

    #[test]
    fn explicit_local_error_is_second_order() {
        // w = e^{-t}|z|^2 with f = -u + n t
        let domain = make_domain(DomainKind::Ball, 1).unwrap();
        let time = TimeConfig::new(0.1, 0.01, vec![0.0, 0.1]);
        let p = FlowProblem::new(
            domain,
            0.1,
            Source::new("-u+t", |t, _, u| -u + t).with_du(|_, _, _| -1.0),
            BoundaryData::new("w", |x, t| (-t).exp() * norm2(x)),
            InitialKind::Quadratic(1.0),
            Stepper::Explicit,
            time,
        )
        .unwrap();
        let c = ctx(&p);
        let (u0, _) = start_of(&p, None);
        let errs: Vec<f64> = [1e-3, 5e-4]
            .iter()
            .map(|&dt| {
                let u1 = step_explicit(&c, &u0, dt).unwrap().0;
                (0..p.grid.num_nodes())
                    .map(|k| (u1.values[k] - (-dt).exp() * norm2(p.grid.coords(k))).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        assert!((errs[0] / errs[1]).log2() > 1.8, "{errs:?}");
    }

    #[test]
    fn implicit_fixed_point_needs_no_iterations() {
        let p = exact_problem(1, 0.1, Stepper::Implicit, 0.0, 0.1);
        let (u0, _) = start_of(&p, None);
        let (u1, rec) = step_implicit(&ctx(&p), &u0, 0.05).unwrap();
        assert!(u1.max_abs_diff(&u0) <= 1e-14);
        assert!(rec.newton_iterations <= 1);
    }

    #[test]
    fn implicit_constant_rate_is_exact() {
        for n in [1, 2] {
            let p = exact_problem(n, if n == 1 { 0.1 } else { 0.25 }, Stepper::Implicit, 1.0, 0.5);
            let traj = run_flow(&p, None).unwrap();
            assert!(traj.max_error(|x, t| norm2(x) + t) <= 1e-9);
            for s in &traj.steps {
                assert!(s.residuals.windows(2).all(|w| w[1] < w[0]));
            }
        }
    }

    #[test]
    fn stationary_solution_with_constant_boundary() {
        let domain = make_domain(DomainKind::Ball, 1).unwrap();
        let time = TimeConfig::new(0.5, 0.1, TimeConfig::quadratic_schedule(0.5, 5));
        for stepper in [Stepper::Explicit, Stepper::Implicit] {
            let p = FlowProblem::new(
                domain.clone(),
                0.1,
                Source::zero(),
                BoundaryData::constant(1.0),
                InitialKind::Quadratic(1.0),
                stepper,
                time.clone(),
            )
            .unwrap();
            let traj = run_flow(&p, None).unwrap();
            // feet sit on |z| = 1 only up to bisection accuracy
            let err = traj
                .snapshots
                .iter()
                .map(|s| {
                    (0..p.grid.num_nodes())
                        .map(|k| (s.values[k] - norm2(p.grid.coords(k))).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            assert!(err <= 1e-10, "{stepper:?}: {err}");
        }
    }

    #[test]
    fn incompatible_boundary_is_rejected() {
        let domain = make_domain(DomainKind::Ball, 1).unwrap();
        let time = TimeConfig::new(0.5, 0.1, vec![0.0, 0.5]);
        let r = FlowProblem::new(
            domain,
            0.1,
            Source::zero(),
            BoundaryData::constant(2.0),
            InitialKind::Quadratic(1.0),
            Stepper::Implicit,
            time,
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn increasing_source_is_rejected() {
        let domain = make_domain(DomainKind::Ball, 1).unwrap();
        let time = TimeConfig::new(0.5, 0.1, vec![0.0, 0.5]);
        let r = FlowProblem::new(
            domain,
            0.1,
            Source::new("u", |_, _, u| u),
            BoundaryData::constant(1.0),
            InitialKind::Quadratic(1.0),
            Stepper::Implicit,
            time,
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }
}
