//! Runtime monitors for the a priori estimates, the comparison principle,
//! initial-trace recovery, parabolic Hölder seminorms and the time-shift test.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::calculus::{first_order_ops, GridField, Operators};
use crate::error::{Error, Result};
use crate::flow::{integrate, start_of, FlowContext, FlowProblem, Source, StepPlan, Trajectory};
use crate::geometry::Grid;
use crate::hermitian::HermitianForm;
use crate::initial_data::{CascadeLevel, InitialData};

/// Finite-difference step for the `C_phi` and `C_f` measurements.
pub const FD_STEP: f64 = 0.02;
const SAMPLE_POINTS: usize = 64;
const SAMPLE_TIMES: usize = 5;

/// The constants entering the sup and `t |u_t|` bounds, with their inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Constants {
    pub n: usize,
    pub horizon: f64,
    pub c_u: f64,
    pub c_phi: f64,
    pub c_f: f64,
    pub m1: f64,
    pub c1: f64,
    pub c2_prime: f64,
    pub c2: f64,
}

/// One row of a [`BoundReport`].
#[derive(Clone, Debug, PartialEq)]
pub struct Monitor {
    pub name: &'static str,
    pub measured: f64,
    pub bound: Option<f64>,
    /// Enforced monitors decide pass/fail; the others are reported.
    pub enforced: bool,
}

impl Monitor {
    pub fn margin(&self) -> Option<f64> {
        self.bound.map(|b| b - self.measured)
    }

    pub fn pass(&self) -> bool {
        if !self.measured.is_finite() {
            return false;
        }
        match (self.name, self.bound) {
            ("c_eps", _) => self.measured > 0.0,
            (_, Some(b)) => self.measured < b,
            (_, None) => true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundReport {
    pub constants: Constants,
    pub window: f64,
    pub monitors: Vec<Monitor>,
    /// Ellipticity range `[lambda, Lambda]` of `u^{a b-bar}` on the window.
    pub ellipticity: (f64, f64),
}

impl BoundReport {
    pub fn monitor(&self, name: &str) -> Option<&Monitor> {
        self.monitors.iter().find(|m| m.name == name)
    }

    pub fn passed(&self) -> bool {
        self.monitors.iter().filter(|m| m.enforced).all(Monitor::pass)
    }
}

/// Nested central differences along the listed axes.
fn nested_difference(f: &dyn Fn(&[f64]) -> f64, x: &mut Vec<f64>, axes: &[usize], eta: f64) -> f64 {
    match axes.split_first() {
        None => f(x),
        Some((&i, rest)) => {
            let x0 = x[i];
            x[i] = x0 + eta;
            let p = nested_difference(f, x, rest, eta);
            x[i] = x0 - eta;
            let m = nested_difference(f, x, rest, eta);
            x[i] = x0;
            (p - m) / (2.0 * eta)
        }
    }
}

/// Every non-decreasing axis list of length `0..=order` drawn from `0..dim`.
fn multi_indices(dim: usize, order: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..order {
        let mut next = Vec::new();
        for idx in &frontier {
            let start = idx.last().copied().unwrap_or(0);
            for a in start..dim {
                let mut v: Vec<usize> = idx.clone();
                v.push(a);
                next.push(v);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn sample_nodes(grid: &Grid) -> Vec<Vec<f64>> {
    let stride = (grid.num_nodes() / SAMPLE_POINTS).max(1);
    let fstride = (grid.num_feet() / SAMPLE_POINTS).max(1);
    (0..grid.num_nodes())
        .step_by(stride)
        .map(|k| grid.coords(k).to_vec())
        .chain(grid.feet().iter().step_by(fstride).map(|f| f.coords.clone()))
        .collect()
}

fn sample_times(horizon: f64) -> Vec<f64> {
    // interior times keep the centered differences inside [0, T]
    (0..SAMPLE_TIMES)
        .map(|j| FD_STEP * 2.0 + (horizon - 4.0 * FD_STEP).max(0.0) * j as f64 / (SAMPLE_TIMES - 1) as f64)
        .collect()
}

/// `sum over |j| + 2l <= 4` of `sup |D^j_x D^l_t phi|`, by nested differences
/// on sampled nodes, feet and times.
pub fn measure_c_phi(problem: &FlowProblem) -> f64 {
    let dim = problem.grid.real_dim();
    let phi = problem.boundary.clone();
    // time is the last coordinate
    let f = move |y: &[f64]| phi.eval(&y[..dim], y[dim]);
    let points = sample_nodes(&problem.grid);
    let times = sample_times(problem.time.horizon);
    let mut total = 0.0;
    for l in 0..=2usize {
        for j in multi_indices(dim, 4 - 2 * l) {
            let mut axes = j.clone();
            axes.extend(std::iter::repeat_n(dim, l));
            let sup = points
                .par_iter()
                .map(|x| {
                    let mut y = x.clone();
                    y.push(0.0);
                    times.iter().fold(0.0f64, |acc, &t| {
                        y[dim] = t;
                        acc.max(nested_difference(&f, &mut y, &axes, FD_STEP).abs())
                    })
                })
                .reduce(|| 0.0, f64::max);
            total += sup;
        }
    }
    total
}

/// `sum over orders <= 2` of `sup |D f|` in `(t, x, u)` with `|u| <= u_max`.
pub fn measure_c_f(problem: &FlowProblem, u_max: f64) -> f64 {
    let dim = problem.grid.real_dim();
    let src = problem.source.clone();
    // (x, t, u)
    let f = move |y: &[f64]| src.eval(y[dim], &y[..dim], y[dim + 1]);
    let points = sample_nodes(&problem.grid);
    let times = sample_times(problem.time.horizon);
    let us: Vec<f64> = (0..5).map(|k| -u_max + 2.0 * u_max * k as f64 / 4.0).collect();
    let mut total = 0.0;
    for idx in multi_indices(dim + 2, 2) {
        let sup = points
            .par_iter()
            .map(|x| {
                let mut y = x.clone();
                y.extend([0.0, 0.0]);
                let mut acc = 0.0f64;
                for &t in &times {
                    for &u in &us {
                        y[dim] = t;
                        y[dim + 1] = u;
                        acc = acc.max(nested_difference(&f, &mut y, &idx, FD_STEP).abs());
                    }
                }
                acc
            })
            .reduce(|| 0.0, f64::max);
        total += sup;
    }
    total
}

/// `C_1 = M_1 + 2 C_phi + C_u`, `C_2' = n + C_f (T + C_1)`, `C_2 = (C_phi + 2 C_2') T + 2 C_1`.
pub fn bound_constants(problem: &FlowProblem, c_u: f64, m1: f64) -> Constants {
    let n = problem.n();
    let horizon = problem.time.horizon;
    let c_phi = measure_c_phi(problem);
    let c1 = m1 + 2.0 * c_phi + c_u;
    let c_f = measure_c_f(problem, c1);
    let c2_prime = n as f64 + c_f * (horizon + c1);
    let c2 = (c_phi + 2.0 * c2_prime) * horizon + 2.0 * c1;
    Constants {
        n,
        horizon,
        c_u,
        c_phi,
        c_f,
        m1,
        c1,
        c2_prime,
        c2,
    }
}

/// Orthonormal basis of the complement of `w` in `C^n`.
fn complement_basis(w: &[Complex64]) -> Vec<Vec<Complex64>> {
    let n = w.len();
    let norm = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let mut basis: Vec<Vec<Complex64>> = vec![w.iter().map(|c| c / norm).collect()];
    for e in 0..n {
        let mut v = vec![Complex64::new(0.0, 0.0); n];
        v[e] = Complex64::new(1.0, 0.0);
        for b in &basis {
            let proj: Complex64 = v.iter().zip(b).map(|(x, y)| x * y.conj()).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let len = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if len > 1e-8 {
            basis.push(v.iter().map(|c| c / len).collect());
        }
        if basis.len() == n {
            break;
        }
    }
    basis.remove(0);
    basis
}

/// Minimum eigenvalue of `H` restricted to `{v : sum_a (d rho / d z_a) v_a = 0}`;
/// `None` when `n = 1`.
pub fn tangential_min_eigenvalue(h: &HermitianForm, rho_grad: &[f64]) -> Option<f64> {
    let n = h.dim();
    if n < 2 {
        return None;
    }
    // conj(d rho / d z_a) = (rho_x + i rho_y) / 2
    let w: Vec<Complex64> = (0..n)
        .map(|a| Complex64::new(0.5 * rho_grad[2 * a], 0.5 * rho_grad[2 * a + 1]))
        .collect();
    let basis = complement_basis(&w);
    let k = basis.len();
    let mut rows = vec![vec![Complex64::new(0.0, 0.0); k]; k];
    for (i, bi) in basis.iter().enumerate() {
        for (j, bj) in basis.iter().enumerate() {
            let mut s = Complex64::new(0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    s += h.get(a, b) * bi[a].conj() * bj[b];
                }
            }
            rows[i][j] = s;
        }
    }
    HermitianForm::from_rows(&rows).ok().map(|m| m.min_eigenvalue())
}

/// Sup and `t |u_t|` bounds, gradient/Laplacian sizes, boundary tangential
/// positivity and ellipticity over snapshots in `(eps, T]`.
pub fn bound_monitors(traj: &Trajectory, problem: &FlowProblem, eps: f64, constants: Constants) -> Result<BoundReport> {
    let window: Vec<usize> = (0..traj.snapshots.len())
        .filter(|&j| traj.snapshots[j].time > eps)
        .collect();
    if window.len() < 2 {
        return Err(Error::WindowEmpty {
            lo: eps,
            hi: problem.time.horizon,
        });
    }
    let ops = &problem.ops;
    let grid = &problem.grid;
    let sup_u = traj.snapshots.iter().map(GridField::max_abs).fold(0.0, f64::max);
    let t_udot = traj
        .snapshots
        .iter()
        .zip(&traj.udot)
        .map(|(s, d)| s.time * d.values.iter().fold(0.0f64, |a, v| a.max(v.abs())))
        .fold(0.0, f64::max);
    let mut grad = 0.0f64;
    let mut lap = f64::NEG_INFINITY;
    let mut c_eps: Option<f64> = None;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for &j in &window {
        let u = &traj.snapshots[j];
        let fo = first_order_ops(ops, u);
        for k in 0..grid.num_nodes() {
            grad = grad.max(fo.gradient_norm(k));
            lap = lap.max(fo.laplacian[k]);
        }
        let (l, h) = ellipticity(ops, u)?;
        lo = lo.min(l);
        hi = hi.max(h);
        if let Some(c) = boundary_tangential(problem, u) {
            c_eps = Some(c_eps.map_or(c, |p: f64| p.min(c)));
        }
    }
    let c = &constants;
    let mut monitors = vec![
        Monitor {
            name: "sup_u",
            measured: sup_u,
            bound: Some(c.c1),
            enforced: true,
        },
        Monitor {
            name: "t_udot",
            measured: t_udot,
            bound: Some(c.c2),
            enforced: true,
        },
        Monitor {
            name: "grad_u",
            measured: grad,
            bound: None,
            enforced: false,
        },
        Monitor {
            name: "laplacian_u",
            measured: lap,
            bound: None,
            enforced: false,
        },
    ];
    if let Some(ce) = c_eps {
        monitors.push(Monitor {
            name: "c_eps",
            measured: ce,
            bound: None,
            enforced: true,
        });
    }
    Ok(BoundReport {
        constants,
        window: eps,
        monitors,
        ellipticity: (lo, hi),
    })
}

/// Eigenvalue range of `u^{a b-bar}` over the nodes.
pub fn ellipticity(ops: &Operators, u: &GridField) -> Result<(f64, f64)> {
    let grid = ops.grid();
    (0..grid.num_nodes())
        .into_par_iter()
        .map(|k| {
            let h = ops.complex_hessian_at(u, k);
            let (l, m) = (h.min_eigenvalue(), h.max_eigenvalue());
            if l <= 0.0 {
                return Err(Error::NotPlurisubharmonic {
                    point: grid.coords(k).to_vec(),
                    min_eig: l,
                });
            }
            Ok((1.0 / m, 1.0 / l))
        })
        .try_reduce(|| (f64::INFINITY, 0.0), |a, b| Ok((a.0.min(b.0), a.1.max(b.1))))
}

/// Minimum over feet of the tangential eigenvalue, using the Hessian of the owning node.
pub fn boundary_tangential(problem: &FlowProblem, u: &GridField) -> Option<f64> {
    if problem.n() < 2 {
        return None;
    }
    let grid = &problem.grid;
    grid.feet()
        .par_iter()
        .filter_map(|f| {
            let h = problem.ops.complex_hessian_at(u, f.node as usize);
            tangential_min_eigenvalue(&h, &problem.domain.rho_grad(&f.coords))
        })
        .reduce_with(f64::min)
}

/// Whether two runs at different `h` agree on the unenforced sizes within `rel`.
pub fn h_stable(coarse: &BoundReport, fine: &BoundReport, rel: f64) -> bool {
    ["grad_u", "laplacian_u"].iter().all(|name| match (coarse.monitor(name), fine.monitor(name)) {
        (Some(a), Some(b)) => {
            a.measured.is_finite()
                && b.measured.is_finite()
                && (a.measured - b.measured).abs() <= rel * a.measured.abs().max(b.measured.abs())
        }
        _ => false,
    })
}

/// A trajectory sampled from closed forms `u(x, t)` and `u_t(x, t)`.
pub fn sampled_trajectory(
    grid: &Arc<Grid>,
    times: &[f64],
    u: impl Fn(&[f64], f64) -> f64,
    u_t: impl Fn(&[f64], f64) -> f64,
) -> Trajectory {
    let snapshots = times.iter().map(|&t| GridField::from_fn(grid.clone(), t, |x| u(x, t))).collect();
    let udot = times
        .iter()
        .map(|&t| GridField::from_fn(grid.clone(), t, |x| u_t(x, t)))
        .collect();
    Trajectory {
        stepper: None,
        snapshots,
        udot,
        steps: Vec::new(),
        snapshot_steps: Vec::new(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    /// `sup (u - v)` over nodes at positive snapshot times.
    pub interior_sup: f64,
    /// `sup (u - v)` over the feet and the `t = 0` snapshot.
    pub parabolic_sup: f64,
    pub tol: f64,
    /// Node and time of the interior supremum.
    pub location: (Vec<f64>, f64),
}

impl ComparisonReport {
    pub fn excess(&self) -> f64 {
        self.interior_sup - self.parabolic_sup.max(0.0)
    }

    pub fn holds(&self) -> bool {
        self.excess() <= self.tol
    }
}

/// Checks `sup (u - v) <= max(0, sup over the parabolic boundary of (u - v))`
/// after verifying that `u` is a subsolution and `v` a supersolution at every
/// positive snapshot to `premise_tol`.
pub fn comparison_check(
    ops: &Operators,
    u: &Trajectory,
    v: &Trajectory,
    f: &Source,
    premise_tol: f64,
    tol: f64,
) -> Result<ComparisonReport> {
    let grid = ops.grid();
    if u.snapshots.len() != v.snapshots.len()
        || u.times().iter().zip(v.times()).any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(Error::InvalidInput("comparison needs a common snapshot schedule".into()));
    }
    for (traj, sign, what) in [(u, 1.0, "subsolution"), (v, -1.0, "supersolution")] {
        for (s, d) in traj.snapshots.iter().zip(&traj.udot).filter(|(s, _)| s.time > 0.0) {
            for k in 0..grid.num_nodes() {
                let x = grid.coords(k);
                let h = ops.complex_hessian_at(s, k);
                let ld = h.log_det_pd().map_err(|_| Error::PremiseViolated {
                    what: format!("{what} is not plurisubharmonic"),
                    point: x.to_vec(),
                    t: s.time,
                    excess: -h.min_eigenvalue(),
                })?;
                let excess = sign * (d.values[k] - ld - f.eval(s.time, x, s.values[k]));
                if excess > premise_tol {
                    return Err(Error::PremiseViolated {
                        what: what.into(),
                        point: x.to_vec(),
                        t: s.time,
                        excess,
                    });
                }
            }
        }
    }
    let mut interior_sup = f64::NEG_INFINITY;
    let mut parabolic_sup = f64::NEG_INFINITY;
    let mut location = (Vec::new(), 0.0);
    for (a, b) in u.snapshots.iter().zip(&v.snapshots) {
        for (p, q) in a.feet.iter().zip(&b.feet) {
            parabolic_sup = parabolic_sup.max(p - q);
        }
        for k in 0..grid.num_nodes() {
            let d = a.values[k] - b.values[k];
            if a.time == 0.0 {
                parabolic_sup = parabolic_sup.max(d);
            } else if d > interior_sup {
                interior_sup = d;
                location = (grid.coords(k).to_vec(), a.time);
            }
        }
    }
    Ok(ComparisonReport {
        interior_sup,
        parabolic_sup,
        tol,
        location,
    })
}

/// `e(t) = sup |u(., t) - u0|` with the small-time checks and the lower barrier.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayCurve {
    pub times: Vec<f64>,
    pub errors: Vec<f64>,
    /// `e` at the smallest positive snapshot.
    pub e_min: f64,
    pub threshold: f64,
    /// `e` does not increase as `t` decreases over the last positive snapshots.
    pub monotone: bool,
    /// `(a, A)` with `u >= u0 + a rho - A t` at every node and snapshot.
    pub barrier: (f64, f64),
    pub barrier_holds: bool,
}

impl DecayCurve {
    pub fn passed(&self) -> bool {
        self.monotone && self.e_min <= self.threshold && self.barrier_holds
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "e"])?;
        for (t, e) in self.times.iter().zip(&self.errors) {
            w.write_record([format!("{t:.17e}"), format!("{e:.17e}")])?;
        }
        w.flush()
    }
}

pub const TRACE_WINDOW: usize = 5;

pub fn initial_trace_check(
    problem: &FlowProblem,
    traj: &Trajectory,
    u0: &InitialData,
    threshold: f64,
) -> Result<DecayCurve> {
    let grid = &problem.grid;
    let u0_nodes: Vec<f64> = (0..grid.num_nodes()).map(|k| u0.eval(grid.coords(k))).collect();
    let u0_feet: Vec<f64> = grid.feet().iter().map(|f| u0.eval(&f.coords)).collect();
    let times = traj.times();
    let errors: Vec<f64> = traj
        .snapshots
        .iter()
        .map(|s| {
            let nodes = s.values.iter().zip(&u0_nodes).map(|(a, b)| (a - b).abs());
            let feet = s.feet.iter().zip(&u0_feet).map(|(a, b)| (a - b).abs());
            nodes.chain(feet).fold(0.0, f64::max)
        })
        .collect();
    let positive: Vec<usize> = (0..times.len()).filter(|&j| times[j] > 0.0).collect();
    if positive.len() < 2 {
        return Err(Error::WindowEmpty {
            lo: 0.0,
            hi: problem.time.horizon,
        });
    }
    let last = &positive[..positive.len().min(TRACE_WINDOW)];
    let monotone = last.windows(2).all(|w| errors[w[0]] <= errors[w[1]]);
    let e_min = errors[positive[0]];
    let rho: Vec<f64> = (0..grid.num_nodes()).map(|k| problem.domain.rho(grid.coords(k))).collect();
    let mut best: Option<(f64, f64, f64)> = None;
    for a in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let mut big_a = 0.0f64;
        let mut initial_ok = true;
        for s in &traj.snapshots {
            for k in 0..grid.num_nodes() {
                let gap = u0_nodes[k] + a * rho[k] - s.values[k];
                if s.time > 0.0 {
                    big_a = big_a.max(gap / s.time);
                } else if gap > 1e-12 {
                    initial_ok = false;
                }
            }
        }
        if !initial_ok {
            continue;
        }
        let cost = a + big_a * problem.time.horizon;
        if best.is_none_or(|b| cost < b.2) {
            best = Some((a, big_a, cost));
        }
    }
    let (barrier, barrier_holds) = match best {
        Some((a, big_a, _)) => {
            let holds = traj.snapshots.iter().all(|s| {
                (0..grid.num_nodes()).all(|k| s.values[k] >= u0_nodes[k] + a * rho[k] - big_a * s.time - 1e-10)
            });
            ((a, big_a), holds)
        }
        None => ((f64::NAN, f64::NAN), false),
    };
    Ok(DecayCurve {
        times,
        errors,
        e_min,
        threshold,
        monotone,
        barrier,
        barrier_holds,
    })
}

/// One sample `(x, t, u)` for the Hölder seminorms.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub t: f64,
    pub u: f64,
}

/// Pair budget of the brute-force seminorm.
pub const HOLDER_PAIR_BUDGET: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct HolderReport {
    /// `[u]_alpha` with the parabolic distance `|x1 - x2| + |t1 - t2|^{1/2}`.
    pub seminorm: f64,
    /// `<u>_beta = sup |u(x, t1) - u(x, t2)| / |t1 - t2|^{beta/2}`.
    pub time_seminorm: f64,
    pub pairs: usize,
    pub stride: usize,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Brute force over pairs, keeping every `stride`-th sample so that at most
/// `budget` pairs are visited. With `normalize`, distances are divided by the
/// window's largest parabolic distance so that `d <= 1`.
pub fn holder_seminorms(samples: &[Sample], alpha: f64, beta: f64, budget: usize, normalize: bool) -> HolderReport {
    let total = samples.len() * samples.len().saturating_sub(1) / 2;
    let stride = if total <= budget {
        1
    } else {
        ((total as f64 / budget as f64).sqrt().ceil() as usize).max(1)
    };
    let kept: Vec<&Sample> = samples.iter().step_by(stride).collect();
    let pd = |a: &Sample, b: &Sample| dist(&a.x, &b.x) + (a.t - b.t).abs().sqrt();
    let scale = if normalize {
        let m = (0..kept.len())
            .into_par_iter()
            .map(|i| kept[i + 1..].iter().map(|b| pd(kept[i], b)).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max);
        if m > 0.0 {
            m
        } else {
            1.0
        }
    } else {
        1.0
    };
    let (seminorm, time_seminorm) = (0..kept.len())
        .into_par_iter()
        .map(|i| {
            let a = kept[i];
            let mut s = 0.0f64;
            let mut ts = 0.0f64;
            for b in &kept[i + 1..] {
                let d = pd(a, b) / scale;
                if d > 0.0 {
                    s = s.max((a.u - b.u).abs() / d.powf(alpha));
                }
                if a.t != b.t && a.x == b.x {
                    let dt = (a.t - b.t).abs() / (scale * scale);
                    ts = ts.max((a.u - b.u).abs() / dt.powf(0.5 * beta));
                }
            }
            (s, ts)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    HolderReport {
        seminorm,
        time_seminorm,
        pairs: kept.len() * kept.len().saturating_sub(1) / 2,
        stride,
    }
}

/// Seminorms of a trajectory over nodes and snapshots with `lo <= t <= hi`.
pub fn parabolic_holder_seminorm(traj: &Trajectory, alpha: f64, beta: f64, window: (f64, f64)) -> Result<HolderReport> {
    if !(alpha > 0.0 && alpha < 1.0) && alpha != 1.0 {
        return Err(Error::InvalidInput(format!("alpha = {alpha} outside (0, 1]")));
    }
    if !(beta > 0.0 && beta < 2.0) {
        return Err(Error::InvalidInput(format!("beta = {beta} outside (0, 2)")));
    }
    let snaps: Vec<&GridField> = traj
        .snapshots
        .iter()
        .filter(|s| s.time >= window.0 && s.time <= window.1)
        .collect();
    if snaps.len() < 2 {
        return Err(Error::WindowEmpty {
            lo: window.0,
            hi: window.1,
        });
    }
    let grid = snaps[0].grid().clone();
    let samples: Vec<Sample> = snaps
        .iter()
        .flat_map(|s| {
            let grid = grid.clone();
            (0..grid.num_nodes()).map(move |k| Sample {
                x: grid.coords(k).to_vec(),
                t: s.time,
                u: s.values[k],
            })
        })
        .collect();
    Ok(holder_seminorms(&samples, alpha, beta, HOLDER_PAIR_BUDGET, false))
}

#[derive(Clone, Debug)]
pub struct ShiftReport {
    pub shift: f64,
    /// `max |v(., t) - u(., t + 1/m)|` over common snapshots.
    pub gap: f64,
    pub tol: f64,
    pub compared: usize,
    /// `(eps, A)` with `v >= u0 - eps - A t`.
    pub barrier: (f64, f64),
    pub barrier_holds: bool,
    pub shifted: Trajectory,
}

impl ShiftReport {
    pub fn passed(&self) -> bool {
        self.gap <= self.tol && self.barrier_holds
    }
}

/// Re-solves from `u(., 1/m)` with `phi(., t + 1/m)` and `f(t + 1/m, .)` on the
/// original step times and compares with the shifted original.
pub fn shift_consistency_check(
    problem: &FlowProblem,
    level: Option<&Arc<CascadeLevel>>,
    traj: &Trajectory,
    m: u32,
    safety: f64,
) -> Result<ShiftReport> {
    let s = 1.0 / m as f64;
    if problem.time.horizon <= s {
        return Err(Error::InvalidInput(format!("horizon must exceed 1/m = {s}")));
    }
    let j0 = traj
        .snapshot_at(s)
        .ok_or_else(|| Error::InvalidInput(format!("no snapshot at t = 1/m = {s}")))?;
    let (_, plan) = start_of(problem, level);
    let ctx = FlowContext {
        ops: &problem.ops,
        source: problem.source.shifted(s),
        boundary: plan.shifted(s),
        stepper: problem.stepper,
        newton: &problem.newton,
    };
    let step_ends: Vec<f64> = traj.steps.iter().filter(|r| r.t > s + 1e-12).map(|r| r.t - s).collect();
    let snapshots: Vec<f64> = traj.times().into_iter().filter(|&t| t > s + 1e-12).map(|t| t - s).collect();
    let mut start = traj.snapshots[j0].clone();
    start.time = 0.0;
    let shifted = integrate(&ctx, start, &StepPlan::Replay { step_ends, snapshots })?;
    let mut gap = 0.0f64;
    let mut compared = 0;
    for v in &shifted.snapshots {
        if let Some(j) = traj.snapshot_at(v.time + s) {
            gap = gap.max(v.max_abs_diff(&traj.snapshots[j]));
            compared += 1;
        }
    }
    let tol = safety * problem.newton.tol.max(1e-12);
    // lower barrier v >= u0 - eps - A t
    let grid = &problem.grid;
    let u0: Vec<f64> = (0..grid.num_nodes()).map(|k| problem.initial.eval(grid.coords(k))).collect();
    let first = &shifted.snapshots[0];
    let eps = (0..grid.num_nodes())
        .map(|k| u0[k] - first.values[k])
        .fold(0.0f64, f64::max);
    let big_a = shifted
        .snapshots
        .iter()
        .filter(|v| v.time > 0.0)
        .flat_map(|v| (0..grid.num_nodes()).map(move |k| (k, v)))
        .map(|(k, v)| (u0[k] - eps - v.values[k]) / v.time)
        .fold(0.0f64, f64::max);
    let barrier_holds = shifted
        .snapshots
        .iter()
        .all(|v| (0..grid.num_nodes()).all(|k| v.values[k] >= u0[k] - eps - big_a * v.time - 1e-10));
    Ok(ShiftReport {
        shift: s,
        gap,
        tol,
        compared,
        barrier: (eps, big_a),
        barrier_holds,
        shifted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{run_flow, BoundaryData, Stepper, TimeConfig};
    use crate::geometry::{classify_grid, make_domain, DomainKind};
    use crate::initial_data::InitialKind;
    use approx::assert_relative_eq;

    fn exact_run(n: usize, h: f64) -> (FlowProblem, Trajectory) {
        let domain = make_domain(DomainKind::Ball, n).unwrap();
        let time = TimeConfig::new(0.5, 0.05, TimeConfig::quadratic_schedule(0.5, 5));
        let p = FlowProblem::new(
            domain,
            h,
            Source::constant(1.0),
            BoundaryData::new("|z|^2+t", |x, t| x.iter().map(|v| v * v).sum::<f64>() + t).with_dt(|_, _| 1.0),
            InitialKind::Quadratic(1.0),
            Stepper::Implicit,
            time,
        )
        .unwrap();
        let traj = run_flow(&p, None).unwrap();
        (p, traj)
    }

    #[test]
    fn multi_index_counts() {
        // monomials of degree <= k in d variables: C(d + k, k)
        assert_eq!(multi_indices(2, 4).len(), 15);
        assert_eq!(multi_indices(4, 4).len(), 70);
    }

    #[test]
    fn c_phi_of_quadratic_plus_time() {
        let (p, _) = exact_run(1, 0.1);
        // sup|phi| + sup|phi_x| + sup|phi_y| + 2 + 2 + sup|phi_t| with |z| <= 1, t <= T
        let c = measure_c_phi(&p);
        let t_max = sample_times(0.5).last().copied().unwrap();
        // the sampled feet need not reach |x| = 1 exactly
        let upper = (1.0 + t_max) + 2.0 + 2.0 + 2.0 + 2.0 + 1.0;
        assert!(c <= upper + 1e-6 && c >= upper - 0.5, "{c} vs {upper}");
    }

    #[test]
    fn exact_run_passes_bounds() {
        let (p, traj) = exact_run(1, 0.1);
        let constants = bound_constants(&p, p.initial.bound, 1.0);
        let r = bound_monitors(&traj, &p, 0.01, constants.clone()).unwrap();
        assert!(r.passed(), "{r:?}");
        let tu = r.monitor("t_udot").unwrap();
        assert_relative_eq!(tu.measured, 0.5, epsilon = 1e-8);
        assert!(constants.c2 > 0.5);
        assert_relative_eq!(r.monitor("laplacian_u").unwrap().measured, 4.0, epsilon = 1e-8);
        assert!(r.monitor("grad_u").unwrap().measured <= 2.0 + 1e-9);
        assert!(r.monitor("c_eps").is_none());
    }

    #[test]
    fn tangential_positivity_on_the_ball() {
        let (p, traj) = exact_run(2, 0.25);
        let c = boundary_tangential(&p, traj.final_state().unwrap()).unwrap();
        assert_relative_eq!(c, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn tangential_restriction_drops_the_normal_direction() {
        // H = diag(1, 5) restricted to the tangent space at (1, 0): the z_2 direction
        let h = HermitianForm::from_diag(&[1.0, 5.0]);
        let c = tangential_min_eigenvalue(&h, &[2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(c, 5.0, epsilon = 1e-12);
        assert!(tangential_min_eigenvalue(&HermitianForm::identity(1), &[2.0, 0.0]).is_none());
    }

    #[test]
    fn missing_window_is_reported() {
        let (p, traj) = exact_run(1, 0.1);
        let c = bound_constants(&p, 1.0, 1.0);
        assert!(matches!(bound_monitors(&traj, &p, 0.49, c), Err(Error::WindowEmpty { .. })));
    }

    #[test]
    fn comparison_of_linear_in_time_pair() {
        let d = make_domain(DomainKind::Ball, 1).unwrap();
        let grid = Arc::new(classify_grid(&d, 0.1).unwrap());
        let ops = Operators::new(grid.clone());
        let times = TimeConfig::quadratic_schedule(1.0, 6);
        let sq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let u = sampled_trajectory(&grid, &times, |x, t| sq(x) + t, |_, _| 1.0);
        let v = sampled_trajectory(&grid, &times, |x, t| sq(x) + 2.0 * t, |_, _| 2.0);
        let f = Source::constant(1.0);
        let r = comparison_check(&ops, &u, &v, &f, 1e-9, 1e-7).unwrap();
        assert!(r.holds());
        assert!(r.interior_sup <= 0.0);
        let same = comparison_check(&ops, &u, &u, &f, 1e-9, 1e-7).unwrap();
        assert_eq!(same.interior_sup, 0.0);
        // the reversed pair violates the subsolution premise
        assert!(matches!(
            comparison_check(&ops, &v, &u, &f, 1e-9, 1e-7),
            Err(Error::PremiseViolated { .. })
        ));
    }

    #[test]
    fn stationary_trace_is_exact() {
        let domain = make_domain(DomainKind::Ball, 1).unwrap();
        let time = TimeConfig::new(0.5, 0.05, TimeConfig::quadratic_schedule(0.5, 6));
        let p = FlowProblem::new(
            domain,
            0.1,
            Source::zero(),
            BoundaryData::constant(1.0),
            InitialKind::Quadratic(1.0),
            Stepper::Implicit,
            time,
        )
        .unwrap();
        let traj = run_flow(&p, None).unwrap();
        let c = initial_trace_check(&p, &traj, &p.initial, 1e-10).unwrap();
        assert!(c.errors.iter().all(|&e| e <= 1e-10), "{:?}", c.errors);
        assert!(c.passed());
    }

    fn box_samples(u: impl Fn(&[f64], f64) -> f64) -> Vec<Sample> {
        let mut out = Vec::new();
        for j in 0..5 {
            let t = j as f64 / 4.0;
            for a in 0..9 {
                for b in 0..9 {
                    let x = vec![a as f64 / 8.0, b as f64 / 8.0];
                    out.push(Sample { u: u(&x, t), x, t });
                }
            }
        }
        out
    }

    #[test]
    fn holder_examples() {
        let flat = holder_seminorms(&box_samples(|_, _| 3.0), 0.5, 1.0, HOLDER_PAIR_BUDGET, false);
        assert_eq!(flat.seminorm, 0.0);
        let lin = holder_seminorms(&box_samples(|x, _| x[0]), 1.0, 1.0, HOLDER_PAIR_BUDGET, false);
        assert_relative_eq!(lin.seminorm, 1.0, epsilon = 1e-12);
        assert_eq!(lin.stride, 1);
    }

    #[test]
    fn subsampled_holder_is_a_close_lower_bound() {
        let s = box_samples(|x, t| (3.0 * x[0]).sin() * x[1] + t.sqrt());
        let full = holder_seminorms(&s, 0.5, 1.0, HOLDER_PAIR_BUDGET, false);
        let sub = holder_seminorms(&s, 0.5, 1.0, 20_000, false);
        assert!(sub.stride > 1);
        // a subsample sees fewer pairs, so it can only underestimate
        assert!(sub.seminorm <= full.seminorm);
        assert!(sub.seminorm >= 0.8 * full.seminorm);
    }

    #[test]
    fn shift_reproduces_exact_run() {
        let domain = make_domain(DomainKind::Ball, 1).unwrap();
        let time = TimeConfig::new(0.5, 0.05, TimeConfig::quadratic_schedule(0.5, 5)).with_extra_snapshots(&[0.25]);
        let p = FlowProblem::new(
            domain,
            0.1,
            Source::constant(1.0),
            BoundaryData::new("|z|^2+t", |x, t| x.iter().map(|v| v * v).sum::<f64>() + t).with_dt(|_, _| 1.0),
            InitialKind::Quadratic(1.0),
            Stepper::Implicit,
            time,
        )
        .unwrap();
        let traj = run_flow(&p, None).unwrap();
        let r = shift_consistency_check(&p, None, &traj, 4, 10.0).unwrap();
        assert!(r.gap <= 1e-8, "{}", r.gap);
        assert!(r.compared >= 3);
        assert!(r.passed());
    }
}
