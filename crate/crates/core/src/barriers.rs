//! Harmonic majorant, the subsolution `u_m = phi_m + M rho` with its constant
//! search, the sandwich `u_m <= u <= h`, and the boundary barrier diagnostic.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::calculus::{complex_hessian, first_order_ops, harmonic_extension, GridField, Operators};
use crate::hermitian::HermitianForm;
use crate::error::{Error, Result};
use crate::flow::{BoundaryData, FlowProblem, Trajectory};
use crate::geometry::{boundary_distance, Grid, ScalarFn};
use crate::initial_data::{cutoff_zeta, cutoff_zeta_prime, CascadeLevel};

/// Max-norm residual target of the discrete Laplace solve.
pub const LAPLACE_TOL: f64 = 1e-9;

/// Discrete harmonic extension of `phi(., t)`: `sum_i D_ii h = 0` at every
/// node with `h = phi` at the boundary feet.
pub fn harmonic_majorant(ops: &Operators, phi: &BoundaryData, t: f64) -> Result<GridField> {
    let grid = ops.grid();
    let feet: Vec<f64> = grid.feet().iter().map(|f| phi.eval(&f.coords, t)).collect();
    harmonic_extension(ops, feet, t, LAPLACE_TOL)
}

/// `u_m(z, t) = phi(z, t) - Osc(u0) zeta(m t) + M rho(z)`.
#[derive(Clone)]
pub struct Subsolution {
    pub m: u32,
    pub big_m: f64,
    pub osc: f64,
    phi: BoundaryData,
    rho: ScalarFn,
    /// Times at which the inequalities were certified.
    pub sample_times: Vec<f64>,
    /// Smallest `lambda_min - 1` over nodes and samples at `big_m`.
    pub hessian_margin: f64,
    /// Smallest `log det + f - u_t` over nodes and samples at `big_m`.
    pub flow_margin: f64,
    /// Whether `u_m <= phi_m` also holds at the boundary feet (reported only).
    pub boundary_ordered: bool,
}

impl std::fmt::Debug for Subsolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Subsolution")
            .field("m", &self.m)
            .field("big_m", &self.big_m)
            .field("osc", &self.osc)
            .field("hessian_margin", &self.hessian_margin)
            .field("flow_margin", &self.flow_margin)
            .finish()
    }
}

impl Subsolution {
    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        subsolution_value(&self.phi, &self.rho, self.osc, self.m, self.big_m, x, t)
    }

    pub fn eval_dt(&self, x: &[f64], t: f64) -> f64 {
        self.phi.dt(x, t) - self.osc * self.m as f64 * cutoff_zeta_prime(self.m as f64 * t)
    }

    pub fn field(&self, grid: &Arc<Grid>, t: f64) -> GridField {
        let values = (0..grid.num_nodes()).map(|k| self.eval(grid.coords(k), t)).collect();
        let feet = grid.feet().iter().map(|f| self.eval(&f.coords, t)).collect();
        GridField::new(grid.clone(), values, feet, t).expect("subsolution is finite")
    }

    /// `max (u_m - u)` over nodes and feet of every snapshot.
    pub fn excess_over(&self, traj: &Trajectory) -> f64 {
        traj.snapshots
            .iter()
            .map(|s| {
                let grid = s.grid();
                let nodes = (0..grid.num_nodes()).map(|k| self.eval(grid.coords(k), s.time) - s.values[k]);
                let feet = grid
                    .feet()
                    .iter()
                    .zip(&s.feet)
                    .map(|(f, v)| self.eval(&f.coords, s.time) - v);
                nodes.chain(feet).fold(f64::NEG_INFINITY, f64::max)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn subsolution_value(phi: &BoundaryData, rho: &ScalarFn, osc: f64, m: u32, big_m: f64, x: &[f64], t: f64) -> f64 {
    phi.eval(x, t) - osc * cutoff_zeta(m as f64 * t) + big_m * rho(x)
}

/// Outcome of testing one `M`.
enum Trial {
    Pass { hessian_margin: f64, flow_margin: f64 },
    Fail { reason: String, point: Vec<f64> },
}

/// `phi(., t)` data at the nodes for one certification time.
struct PhiSlice {
    t: f64,
    values: Vec<f64>,
    dt: Vec<f64>,
    hessians: Vec<HermitianForm>,
}

/// Forms cached across trials; above this the `phi` Hessians are recomputed per trial.
const HESSIAN_CACHE_BUDGET: usize = 500_000;

struct SubsolutionSearch<'a> {
    problem: &'a FlowProblem,
    level: &'a CascadeLevel,
    osc: f64,
    times: Vec<f64>,
    rho_nodes: Vec<f64>,
    /// The discrete Hessian is linear, so `H(u_m) = H(phi) + M H(rho)`.
    rho_hessians: Vec<HermitianForm>,
    slices: Option<Vec<PhiSlice>>,
}

impl<'a> SubsolutionSearch<'a> {
    fn new(problem: &'a FlowProblem, level: &'a CascadeLevel) -> Self {
        let grid = &problem.grid;
        let rho = problem.domain.rho_fn();
        let rho_field = GridField::from_fn(grid.clone(), 0.0, |x| rho(x));
        let rho_hessians = complex_hessian(&problem.ops, &rho_field);
        let times = subsolution_times(problem, level);
        let mut search = Self {
            problem,
            level,
            osc: problem.initial.osc,
            rho_nodes: rho_field.values,
            rho_hessians,
            slices: None,
            times,
        };
        if grid.num_nodes() * search.times.len() <= HESSIAN_CACHE_BUDGET {
            search.slices = Some(search.times.iter().map(|&t| search.slice(t)).collect());
        }
        search
    }

    fn slice(&self, t: f64) -> PhiSlice {
        let p = self.problem;
        let grid = &p.grid;
        let phi = GridField::new(
            grid.clone(),
            (0..grid.num_nodes()).map(|k| p.boundary.eval(grid.coords(k), t)).collect(),
            grid.feet().iter().map(|f| p.boundary.eval(&f.coords, t)).collect(),
            t,
        )
        .expect("boundary data is finite");
        PhiSlice {
            t,
            dt: (0..grid.num_nodes()).map(|k| p.boundary.dt(grid.coords(k), t)).collect(),
            hessians: complex_hessian(&p.ops, &phi),
            values: phi.values,
        }
    }

    fn trial(&self, big_m: f64) -> Trial {
        let p = self.problem;
        let grid = &p.grid;
        let rho = p.domain.rho_fn();
        let m = self.level.m;
        let mut hess_margin = f64::INFINITY;
        let mut flow_margin = f64::INFINITY;
        // the initial ordering u_m(., 0) <= u_{0,m}
        for k in 0..grid.num_nodes() {
            let x = grid.coords(k);
            let v = subsolution_value(&p.boundary, &rho, self.osc, m, big_m, x, 0.0);
            if v > self.level.u0m.values[k] + 1e-12 {
                return Trial::Fail {
                    reason: format!("above u_0m by {:.3e} at t = 0", v - self.level.u0m.values[k]),
                    point: x.to_vec(),
                };
            }
        }
        for (j, &t) in self.times.iter().enumerate() {
            let owned;
            let slice = match &self.slices {
                Some(s) => &s[j],
                None => {
                    owned = self.slice(t);
                    &owned
                }
            };
            let shift = -self.osc * cutoff_zeta(m as f64 * slice.t);
            let zeta_dt = -self.osc * m as f64 * cutoff_zeta_prime(m as f64 * t);
            let worst = (0..grid.num_nodes())
                .into_par_iter()
                .map(|k| {
                    let x = grid.coords(k);
                    let h = slice.hessians[k].add(&self.rho_hessians[k].scale(big_m));
                    let lam = h.min_eigenvalue();
                    if lam < 1.0 - 1e-8 {
                        return Err((k, format!("complex Hessian eigenvalue {lam:.6} < 1 at t = {t}")));
                    }
                    let ld = h.log_det_pd().map_err(|_| (k, "Hessian not positive definite".to_string()))?;
                    let value = slice.values[k] + shift + big_m * self.rho_nodes[k];
                    let rhs = ld + p.source.eval(t, x, value);
                    let lhs = slice.dt[k] + zeta_dt;
                    if lhs > rhs {
                        return Err((k, format!("u_t exceeds log det + f by {:.3e} at t = {t}", lhs - rhs)));
                    }
                    Ok((lam - 1.0, rhs - lhs))
                })
                .try_reduce(|| (f64::INFINITY, f64::INFINITY), |a, b| Ok((a.0.min(b.0), a.1.min(b.1))));
            match worst {
                Ok((a, b)) => {
                    hess_margin = hess_margin.min(a);
                    flow_margin = flow_margin.min(b);
                }
                Err((k, reason)) => {
                    return Trial::Fail {
                        reason,
                        point: grid.coords(k).to_vec(),
                    }
                }
            }
        }
        Trial::Pass {
            hessian_margin: hess_margin,
            flow_margin,
        }
    }
}

pub const MAX_SQUARINGS: usize = 10;
pub const BISECTIONS: usize = 40;
/// Relative width at which the final bisection stops.
pub const BRACKET_RTOL: f64 = 1e-11;

/// Certification times: the snapshots plus the ramp and cutoff transitions.
pub fn subsolution_times(problem: &FlowProblem, level: &CascadeLevel) -> Vec<f64> {
    let m = level.m as f64;
    let mut times = problem.time.snapshots.clone();
    times.extend([0.0, level.eps_m, 2.0 * level.eps_m, 1.0 / m, 1.5 / m, 2.0 / m]);
    times.retain(|&t| t <= problem.time.horizon);
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() <= 1e-14);
    times
}

/// Smallest certified `M` by doubling from 1, then bisection.
pub fn construct_subsolution(problem: &FlowProblem, level: &CascadeLevel) -> Result<Subsolution> {
    let grid = &problem.grid;
    let rho = problem.domain.rho_fn();
    let search = SubsolutionSearch::new(problem, level);
    let (mut lo, mut hi, mut margins) = match search.trial(1.0) {
        Trial::Pass {
            hessian_margin,
            flow_margin,
        } => (0.0, 1.0, (hessian_margin, flow_margin)),
        Trial::Fail { .. } => {
            let mut big_m: f64 = 1.0;
            let mut found = None;
            let mut last_fail = None;
            for _ in 0..MAX_SQUARINGS {
                let prev = big_m;
                big_m = (2.0 * big_m).max(big_m * big_m);
                match search.trial(big_m) {
                    Trial::Pass {
                        hessian_margin,
                        flow_margin,
                    } => {
                        found = Some((prev, hessian_margin, flow_margin));
                        break;
                    }
                    Trial::Fail { reason, point } => last_fail = Some((reason, point)),
                }
            }
            let Some((prev, hm, fm)) = found else {
                let (reason, point) = last_fail.expect("at least one trial");
                return Err(Error::SubsolutionInfeasible { reason, point });
            };
            // narrow the bracket geometrically before the linear bisection
            let (mut lo, mut hi, mut margins) = (prev, big_m, (hm, fm));
            while hi > 2.0 * lo {
                let mid = (lo * hi).sqrt();
                match search.trial(mid) {
                    Trial::Pass {
                        hessian_margin,
                        flow_margin,
                    } => {
                        hi = mid;
                        margins = (hessian_margin, flow_margin);
                    }
                    Trial::Fail { .. } => lo = mid,
                }
            }
            (lo, hi, margins)
        }
    };
    for _ in 0..BISECTIONS {
        if hi - lo <= BRACKET_RTOL * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        match search.trial(mid) {
            Trial::Pass {
                hessian_margin,
                flow_margin,
            } => {
                hi = mid;
                margins = (hessian_margin, flow_margin);
            }
            Trial::Fail { .. } => lo = mid,
        }
    }
    let boundary_ordered = search.times.iter().all(|&t| {
        let ramp = crate::initial_data::boundary_ramp(level, grid, &problem.boundary, t);
        grid.feet().iter().zip(&ramp).all(|(f, r)| {
            subsolution_value(&problem.boundary, &rho, search.osc, level.m, hi, &f.coords, t) <= r + 1e-12
        })
    });
    Ok(Subsolution {
        m: level.m,
        big_m: hi,
        osc: search.osc,
        phi: problem.boundary.clone(),
        rho,
        sample_times: search.times,
        hessian_margin: margins.0,
        flow_margin: margins.1,
        boundary_ordered,
    })
}

/// `u_m <= u <= h` on snapshots in `(window, T)` and the boundary gradient bound.
#[derive(Clone, Debug)]
pub struct SandwichReport {
    pub window: f64,
    pub snapshots: usize,
    /// `max (u_m - u)`.
    pub below_excess: f64,
    /// `max (u - h)`.
    pub above_excess: f64,
    /// `max |grad u|` over boundary-adjacent nodes.
    pub grad_u: f64,
    pub grad_sub: f64,
    pub grad_gap: f64,
    pub tol: f64,
}

impl SandwichReport {
    pub fn ordered(&self) -> bool {
        self.below_excess <= self.tol && self.above_excess <= self.tol
    }

    pub fn gradient_bounded(&self) -> bool {
        self.grad_u <= self.grad_sub + self.grad_gap + self.tol
    }
}

pub fn sandwich_check(
    ops: &Operators,
    traj: &Trajectory,
    sub: &Subsolution,
    phi: &BoundaryData,
    window: f64,
    tol: f64,
) -> Result<SandwichReport> {
    let grid = ops.grid();
    let mut report = SandwichReport {
        window,
        snapshots: 0,
        below_excess: f64::NEG_INFINITY,
        above_excess: f64::NEG_INFINITY,
        grad_u: 0.0,
        grad_sub: 0.0,
        grad_gap: 0.0,
        tol,
    };
    let rim: Vec<usize> = (0..grid.num_nodes())
        .filter(|&k| grid.class(k) == crate::geometry::PointClass::BoundaryAdjacent)
        .collect();
    for s in traj.snapshots.iter().filter(|s| s.time > window) {
        report.snapshots += 1;
        let h = harmonic_majorant(ops, phi, s.time)?;
        let lower = sub.field(grid, s.time);
        for k in 0..grid.num_nodes() {
            report.below_excess = report.below_excess.max(lower.values[k] - s.values[k]);
            report.above_excess = report.above_excess.max(s.values[k] - h.values[k]);
        }
        let gap = h.with_values(
            h.values.iter().zip(&lower.values).map(|(a, b)| a - b).collect(),
            h.feet.iter().zip(&lower.feet).map(|(a, b)| a - b).collect(),
        );
        let (gu, gs, gg) = (first_order_ops(ops, s), first_order_ops(ops, &lower), first_order_ops(ops, &gap));
        for &k in &rim {
            report.grad_u = report.grad_u.max(gu.gradient_norm(k));
            report.grad_sub = report.grad_sub.max(gs.gradient_norm(k));
            report.grad_gap = report.grad_gap.max(gg.gradient_norm(k));
        }
    }
    if report.snapshots == 0 {
        return Err(Error::WindowEmpty {
            lo: window,
            hi: traj.times().last().copied().unwrap_or(0.0),
        });
    }
    Ok(report)
}

/// Constants of the barrier `v = (u - u_m) + a (h - u_m) - N d^2` on `{d <= delta}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuanParams {
    pub a: f64,
    pub big_n: f64,
    pub delta: f64,
}

#[derive(Clone, Debug)]
pub struct GuanRow {
    pub node: usize,
    pub t: f64,
    pub d: f64,
    pub v: f64,
    pub lv: f64,
    pub target: f64,
}

#[derive(Clone, Debug)]
pub struct GuanReport {
    pub params: GuanParams,
    pub rows: Vec<GuanRow>,
    pub tol: f64,
    /// `v` vanishes identically and `a = N = 0`.
    pub degenerate: bool,
}

impl GuanReport {
    pub fn satisfied(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.lv >= r.target - self.tol && r.v >= -self.tol)
            .count()
    }

    pub fn fraction(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.satisfied() as f64 / self.rows.len() as f64
        }
    }

    pub fn min_v(&self) -> f64 {
        self.rows.iter().map(|r| r.v).fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(["node", "t", "d", "v", "lv", "target"]).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.node.to_string(),
                format!("{:.17e}", r.t),
                format!("{:.17e}", r.d),
                format!("{:.17e}", r.v),
                format!("{:.17e}", r.lv),
                format!("{:.17e}", r.target),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Precomputed fields shared by all candidate constants.
struct GuanFields {
    /// Snapshot index, `h`, `h_t`, subsolution and its time derivative.
    frames: Vec<(usize, GridField, GridField, GridField, Vec<f64>)>,
    dist: Vec<f64>,
}

fn guan_fields(problem: &FlowProblem, traj: &Trajectory, sub: &Subsolution, eps: f64) -> Result<GuanFields> {
    let grid = &problem.grid;
    let phi_t = {
        let phi = problem.boundary.clone();
        BoundaryData::new("phi_t", move |x, t| phi.dt(x, t))
    };
    let mut frames = Vec::new();
    for (j, s) in traj.snapshots.iter().enumerate() {
        if s.time <= eps {
            continue;
        }
        let h = harmonic_majorant(&problem.ops, &problem.boundary, s.time)?;
        let h_t = harmonic_majorant(&problem.ops, &phi_t, s.time)?;
        let lower = sub.field(grid, s.time);
        let lower_t = (0..grid.num_nodes()).map(|k| sub.eval_dt(grid.coords(k), s.time)).collect();
        frames.push((j, h, h_t, lower, lower_t));
    }
    if frames.is_empty() {
        return Err(Error::WindowEmpty {
            lo: eps,
            hi: problem.time.horizon,
        });
    }
    let dist = (0..grid.num_nodes())
        .into_par_iter()
        .map(|k| boundary_distance(&problem.domain, grid.coords(k)).map(|(d, _)| d))
        .collect::<Result<Vec<f64>>>()?;
    Ok(GuanFields { frames, dist })
}

fn guan_evaluate(problem: &FlowProblem, traj: &Trajectory, fields: &GuanFields, params: GuanParams, tol: f64) -> Result<GuanReport> {
    let grid = &problem.grid;
    let GuanParams { a, big_n, delta } = params;
    let collar: Vec<usize> = (0..grid.num_nodes()).filter(|&k| fields.dist[k] <= delta).collect();
    if collar.is_empty() {
        return Err(Error::CollarEmpty { delta });
    }
    let mut rows = Vec::new();
    let mut v_max = 0.0f64;
    for (j, h, h_t, lower, lower_t) in &fields.frames {
        let u = &traj.snapshots[*j];
        let u_t = &traj.udot[*j];
        let values: Vec<f64> = (0..grid.num_nodes())
            .map(|k| (u.values[k] - lower.values[k]) + a * (h.values[k] - lower.values[k]) - big_n * fields.dist[k].powi(2))
            .collect();
        let feet: Vec<f64> = (0..grid.num_feet())
            .map(|i| (u.feet[i] - lower.feet[i]) + a * (h.feet[i] - lower.feet[i]))
            .collect();
        let v = GridField::new(grid.clone(), values, feet, u.time)?;
        for &k in &collar {
            let x = grid.coords(k);
            let hu = problem.ops.complex_hessian_at(u, k);
            let g = hu.inverse_pd().map_err(|_| Error::NotPlurisubharmonic {
                point: x.to_vec(),
                min_eig: hu.min_eigenvalue(),
            })?;
            let hv = problem.ops.complex_hessian_at(&v, k);
            let v_t = (u_t.values[k] - lower_t[k]) + a * (h_t.values[k] - lower_t[k]);
            let lv = v_t - g.trace_product(&hv) - problem.source.du(u.time, x, u.values[k]) * v.values[k];
            v_max = v_max.max(v.values[k].abs());
            rows.push(GuanRow {
                node: k,
                t: u.time,
                d: fields.dist[k],
                v: v.values[k],
                lv,
                target: 0.25 * (1.0 + g.trace()),
            });
        }
    }
    Ok(GuanReport {
        params,
        rows,
        tol,
        degenerate: a == 0.0 && big_n == 0.0 && v_max <= tol,
    })
}

/// Evaluates the barrier on the collar for given constants, or for the best of
/// a small candidate set when `params` is `None`.
pub fn guan_barrier_check(
    problem: &FlowProblem,
    traj: &Trajectory,
    sub: &Subsolution,
    eps: f64,
    params: Option<GuanParams>,
    tol: f64,
) -> Result<GuanReport> {
    let fields = guan_fields(problem, traj, sub, eps)?;
    if let Some(p) = params {
        return guan_evaluate(problem, traj, &fields, p, tol);
    }
    let h = problem.grid.h();
    let mut best: Option<GuanReport> = None;
    for delta in [2.0 * h, 4.0 * h, 8.0 * h] {
        for a in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            for big_n in [0.0, 1.0, 4.0, 16.0, 64.0, 256.0] {
                let r = match guan_evaluate(problem, traj, &fields, GuanParams { a, big_n, delta }, tol) {
                    Ok(r) => r,
                    Err(Error::CollarEmpty { .. }) => continue,
                    Err(e) => return Err(e),
                };
                let better = match &best {
                    None => true,
                    Some(b) => (r.fraction(), r.rows.len()) > (b.fraction(), b.rows.len()),
                };
                if better {
                    best = Some(r);
                }
            }
        }
    }
    best.ok_or(Error::CollarEmpty { delta: 8.0 * h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{run_flow, Source, Stepper, TimeConfig};
    use crate::geometry::{classify_grid, make_domain, DomainKind};
    use crate::initial_data::{build_level, InitialData, InitialKind};

    fn ops(n: usize, h: f64) -> Operators {
        let d = make_domain(DomainKind::Ball, n).unwrap();
        Operators::new(Arc::new(classify_grid(&d, h).unwrap()))
    }

    #[test]
    fn constants_are_harmonic() {
        let o = ops(1, 0.1);
        let h = harmonic_majorant(&o, &BoundaryData::constant(2.5), 0.0).unwrap();
        assert!(h.max_error(|_| 2.5) <= 1e-9);
    }

    #[test]
    fn real_part_extends_to_itself() {
        let o = ops(1, 0.05);
        let h = harmonic_majorant(&o, &BoundaryData::new("Re z", |x, _| x[0]), 0.0).unwrap();
        // Re z is linear, so the extension is exact up to the solver tolerance
        assert!(h.max_error(|x| x[0]) <= 1e-8);
    }

    #[test]
    fn unit_ball_square_norm_extends_to_one() {
        let o = ops(2, 0.25);
        let h = harmonic_majorant(&o, &BoundaryData::new("|z|^2", |x, _| x.iter().map(|v| v * v).sum()), 0.0).unwrap();
        assert!(h.max_error(|_| 1.0) <= 1e-8);
        // discrete maximum principle
        assert!(h.max() <= h.feet.iter().copied().fold(f64::MIN, f64::max) + 1e-12);
    }

    fn zero_problem(c: f64) -> (FlowProblem, CascadeLevel) {
        let domain = make_domain(DomainKind::Ball, 1).unwrap();
        let time = TimeConfig::new(0.5, 0.05, TimeConfig::quadratic_schedule(0.5, 4));
        let p = FlowProblem::new(
            domain,
            0.1,
            Source::constant(-c),
            BoundaryData::constant(0.0),
            InitialKind::Constant(0.0),
            Stepper::Implicit,
            time,
        )
        .unwrap();
        let level = build_level(&p.initial, 1, &p.domain, &p.ops, &p.source, &p.boundary, None).unwrap();
        (p, level)
    }

    #[test]
    fn flat_data_needs_unit_constant() {
        let (p, level) = zero_problem(0.0);
        let s = construct_subsolution(&p, &level).unwrap();
        assert!((s.big_m - 1.0).abs() < 1e-9, "{}", s.big_m);
    }

    #[test]
    fn negative_source_needs_exponential_constant() {
        let c = 1.5;
        let (p, level) = zero_problem(c);
        let s = construct_subsolution(&p, &level).unwrap();
        assert!((s.big_m - c.exp()).abs() < 1e-8 * c.exp(), "{}", s.big_m);
    }

    #[test]
    fn subsolution_lies_below_the_flow() {
        let domain = make_domain(DomainKind::Ball, 1).unwrap();
        let time = TimeConfig::new(0.5, 0.05, TimeConfig::quadratic_schedule(0.5, 5));
        let p = FlowProblem::new(
            domain,
            0.1,
            Source::zero(),
            BoundaryData::new("Re z+", |x, _| x[0].max(0.0)),
            InitialKind::RealPartPositive,
            Stepper::Implicit,
            time,
        )
        .unwrap();
        let level = Arc::new(build_level(&p.initial, 4, &p.domain, &p.ops, &p.source, &p.boundary, None).unwrap());
        let s = construct_subsolution(&p, &level).unwrap();
        let traj = run_flow(&p, Some(&level)).unwrap();
        assert!(s.excess_over(&traj) <= 1e-7);
        let sw = sandwich_check(&p.ops, &traj, &s, &p.boundary, 2.0 * level.eps_m, 1e-7).unwrap();
        assert!(sw.ordered(), "{sw:?}");
        assert!(sw.gradient_bounded(), "{sw:?}");
    }

    #[test]
    fn barrier_on_smooth_data() {
        let domain = make_domain(DomainKind::Ball, 1).unwrap();
        let grid = Arc::new(classify_grid(&domain, 0.05).unwrap());
        let initial = InitialData::with_evaluator(
            InitialKind::Custom("|z|^2 - 1".into()),
            Arc::new(|x: &[f64]| x[0] * x[0] + x[1] * x[1] - 1.0),
            true,
            &domain,
            &grid,
        )
        .unwrap();
        let time = TimeConfig::new(0.5, 0.025, TimeConfig::quadratic_schedule(0.5, 6));
        let p = FlowProblem::assemble(
            domain,
            grid,
            Source::zero(),
            BoundaryData::constant(0.0),
            initial,
            Stepper::Implicit,
            time,
        )
        .unwrap();
        let level = Arc::new(build_level(&p.initial, 4, &p.domain, &p.ops, &p.source, &p.boundary, None).unwrap());
        let s = construct_subsolution(&p, &level).unwrap();
        let traj = run_flow(&p, Some(&level)).unwrap();
        let r = guan_barrier_check(&p, &traj, &s, 2.0 * level.eps_m, None, 1e-9).unwrap();
        assert!(r.fraction() >= 0.9, "{:?} {}", r.params, r.fraction());
        assert!(r.min_v() >= -1e-9);
    }

    #[test]
    fn degenerate_barrier_is_flagged() {
        let (p, level) = zero_problem(0.0);
        let s = construct_subsolution(&p, &level).unwrap();
        let grid = p.grid.clone();
        let times = p.time.snapshots.clone();
        let snapshots: Vec<GridField> = times.iter().map(|&t| s.field(&grid, t)).collect();
        let udot = times
            .iter()
            .map(|&t| GridField::from_fn(grid.clone(), t, |x| s.eval_dt(x, t)))
            .collect();
        let traj = Trajectory {
            stepper: None,
            snapshots,
            udot,
            steps: Vec::new(),
            snapshot_steps: Vec::new(),
        };
        let r = guan_barrier_check(
            &p,
            &traj,
            &s,
            0.1,
            Some(GuanParams {
                a: 0.0,
                big_n: 0.0,
                delta: 0.3,
            }),
            1e-12,
        )
        .unwrap();
        assert!(r.degenerate);
        assert_eq!(r.satisfied(), 0);
        let empty = guan_barrier_check(
            &p,
            &traj,
            &s,
            0.1,
            Some(GuanParams {
                a: 1.0,
                big_n: 1.0,
                delta: 1e-6,
            }),
            1e-12,
        );
        assert!(matches!(empty, Err(Error::CollarEmpty { .. })));
    }
}
