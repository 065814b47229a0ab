//! Reference solutions: manufactured cases with closed-form derivatives, the
//! exact quadratic family, and a fine radial solver for `n = 1` on the ball.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flow::{BoundaryData, FlowProblem, Source, Stepper, TimeConfig};
use crate::geometry::{classify_grid, Domain, DomainKind, Grid};
use crate::hermitian::HermitianForm;
use crate::initial_data::{InitialData, InitialKind};

pub type SpaceTimeFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;
pub type HessianFn = Arc<dyn Fn(&[f64], f64) -> HermitianForm + Send + Sync>;

/// A closed-form `w(z, t)` with its time derivative and complex Hessian.
#[derive(Clone)]
pub struct ClosedForm {
    pub name: String,
    pub n: usize,
    pub w: SpaceTimeFn,
    pub w_t: SpaceTimeFn,
    pub hessian: HessianFn,
}

impl std::fmt::Debug for ClosedForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ClosedForm({}, n = {})", self.name, self.n)
    }
}

fn sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `z_a` from interleaved real coordinates.
fn z(x: &[f64], a: usize) -> (f64, f64) {
    (x[2 * a], x[2 * a + 1])
}

impl ClosedForm {
    /// `a |z|^2 + b t`.
    pub fn quadratic(a: f64, b: f64, n: usize) -> Self {
        Self {
            name: format!("{a}|z|^2 + {b}t"),
            n,
            w: Arc::new(move |x, t| a * sq(x) + b * t),
            w_t: Arc::new(move |_, _| b),
            hessian: Arc::new(move |_, _| HermitianForm::scaled_identity(n, a)),
        }
    }

    /// `exp(-t) |z|^2`.
    pub fn exp_decay(n: usize) -> Self {
        Self {
            name: "exp(-t)|z|^2".into(),
            n,
            w: Arc::new(|x, t| (-t).exp() * sq(x)),
            w_t: Arc::new(|x, t| -(-t).exp() * sq(x)),
            hessian: Arc::new(move |_, t| HermitianForm::scaled_identity(n, (-t).exp())),
        }
    }

    /// `|z|^2 + c |z|^4 + b t`, with `(w_{a b-bar}) = (1 + 2c|z|^2) I + 2c conj(z_a) z_b`.
    pub fn quartic(c: f64, b: f64, n: usize) -> Self {
        Self {
            name: format!("|z|^2 + {c}|z|^4 + {b}t"),
            n,
            w: Arc::new(move |x, t| {
                let s = sq(x);
                s + c * s * s + b * t
            }),
            w_t: Arc::new(move |_, _| b),
            hessian: Arc::new(move |x, _| {
                let s = sq(x);
                let mut h = HermitianForm::scaled_identity(n, 1.0 + 2.0 * c * s);
                for a in 0..n {
                    for bb in a..n {
                        let (xa, ya) = z(x, a);
                        let (xb, yb) = z(x, bb);
                        // conj(z_a) z_b
                        let re = xa * xb + ya * yb;
                        let im = xa * yb - ya * xb;
                        let e = h.get(a, bb) + num_complex::Complex64::new(2.0 * c * re, 2.0 * c * im);
                        h.set(a, bb, e);
                    }
                }
                h
            }),
        }
    }

    /// `|z|^2 + k Re(z_1^2) + b t`; the pluriharmonic part leaves the Hessian at `I`.
    pub fn pluriharmonic_shift(k: f64, b: f64, n: usize) -> Self {
        Self {
            name: format!("|z|^2 + {k}Re(z^2) + {b}t"),
            n,
            w: Arc::new(move |x, t| sq(x) + k * (x[0] * x[0] - x[1] * x[1]) + b * t),
            w_t: Arc::new(move |_, _| b),
            hessian: Arc::new(move |_, _| HermitianForm::identity(n)),
        }
    }
}

/// A closed-form solution with the source it induces.
#[derive(Clone, Debug)]
pub struct ManufacturedCase {
    pub w: ClosedForm,
    /// Linear damping `kappa` in `f = -kappa u + g(t, z)`.
    pub kappa: f64,
    pub source: Source,
    pub boundary: BoundaryData,
    pub notes: String,
}

impl ManufacturedCase {
    pub fn n(&self) -> usize {
        self.w.n
    }

    pub fn exact(&self, x: &[f64], t: f64) -> f64 {
        (self.w.w)(x, t)
    }

    /// The flow problem on `domain` whose solution is `w`.
    pub fn problem(&self, domain: Domain, h: f64, stepper: Stepper, time: TimeConfig) -> Result<FlowProblem> {
        if domain.n() != self.n() {
            return Err(Error::InvalidInput("case and domain dimensions differ".into()));
        }
        let grid = Arc::new(classify_grid(&domain, h)?);
        let w = self.w.w.clone();
        let u0: crate::geometry::ScalarFn = Arc::new(move |x: &[f64]| w(x, 0.0));
        let initial = InitialData::with_evaluator(InitialKind::Custom(self.w.name.clone()), u0, true, &domain, &grid)?;
        FlowProblem::assemble(domain, grid, self.source.clone(), self.boundary.clone(), initial, stepper, time)
    }
}

/// `f(t, z) = w_t - log det(w_{a b-bar})`, after checking `w` is strictly psh
/// on sampled points of `domain x [0, horizon]`.
pub fn manufactured_source(w: ClosedForm, domain: &Domain, horizon: f64) -> Result<ManufacturedCase> {
    damped_manufactured_source(w, 0.0, domain, horizon)
}

/// As [`manufactured_source`] with `f = -kappa u + (w_t + kappa w - log det w_H)`.
pub fn damped_manufactured_source(w: ClosedForm, kappa: f64, domain: &Domain, horizon: f64) -> Result<ManufacturedCase> {
    if kappa < 0.0 {
        return Err(Error::InvalidInput("damping must be non-negative".into()));
    }
    if domain.n() != w.n {
        return Err(Error::InvalidInput("case and domain dimensions differ".into()));
    }
    check_psh(&w, domain, horizon)?;
    let (wf, wt, hess) = (w.w.clone(), w.w_t.clone(), w.hessian.clone());
    let g = move |t: f64, x: &[f64]| {
        let ld = hess(x, t).log_det_pd().unwrap_or(f64::NEG_INFINITY);
        wt(x, t) + kappa * wf(x, t) - ld
    };
    let source = Source::new(format!("manufactured[{}]", w.name), move |t, x, u| -kappa * u + g(t, x))
        .with_du(move |_, _, _| -kappa);
    let (wb, wbt) = (w.w.clone(), w.w_t.clone());
    let boundary = BoundaryData::new(w.name.clone(), move |x, t| wb(x, t)).with_dt(move |x, t| wbt(x, t));
    let notes = if kappa == 0.0 {
        format!("w = {}; f = w_t - log det w_H", w.name)
    } else {
        format!("w = {}; f = -{kappa}u + w_t + {kappa}w - log det w_H", w.name)
    };
    Ok(ManufacturedCase {
        w,
        kappa,
        source,
        boundary,
        notes,
    })
}

fn check_psh(w: &ClosedForm, domain: &Domain, horizon: f64) -> Result<()> {
    let dim = 2 * w.n;
    let per_axis: usize = if dim <= 2 { 21 } else if dim <= 4 { 7 } else { 5 };
    let (lo, hi) = domain.core_box();
    let mut idx = vec![0usize; dim];
    let mut x = vec![0.0; dim];
    loop {
        for i in 0..dim {
            x[i] = lo[i] + (hi[i] - lo[i]) * idx[i] as f64 / (per_axis - 1) as f64;
        }
        if domain.rho(&x) <= 0.0 {
            for k in 0..=4 {
                let t = horizon * k as f64 / 4.0;
                let m = (w.hessian)(&x, t).min_eigenvalue();
                if !(m > 0.0) {
                    return Err(Error::NotPlurisubharmonic {
                        point: x.clone(),
                        min_eig: m,
                    });
                }
            }
        }
        let mut i = 0;
        loop {
            if i == dim {
                return Ok(());
            }
            idx[i] += 1;
            if idx[i] < per_axis {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

/// `w = a |z|^2 + b t` with `f = b - n log a`.
pub fn exact_quadratic_family(a: f64, b: f64, n: usize) -> Result<ManufacturedCase> {
    if !(a > 0.0) {
        return Err(Error::InvalidInput(format!("quadratic coefficient {a} must be positive")));
    }
    let w = ClosedForm::quadratic(a, b, n);
    let c = b - n as f64 * a.ln();
    let (wb, wbt) = (w.w.clone(), w.w_t.clone());
    Ok(ManufacturedCase {
        source: Source::constant(c),
        boundary: BoundaryData::new(w.name.clone(), move |x, t| wb(x, t)).with_dt(move |x, t| wbt(x, t)),
        notes: format!("w = {}; f = {c}", w.name),
        w,
        kappa: 0.0,
    })
}

/// Reference solution `U(r, t)` of the radial reduction at the snapshot times.
#[derive(Clone, Debug)]
pub struct RadialReference {
    pub dr: f64,
    pub dt: f64,
    pub times: Vec<f64>,
    /// `values[j][i] = U(i dr, times[j])`.
    pub values: Vec<Vec<f64>>,
}

impl RadialReference {
    /// Linear interpolation in `r` at snapshot `j`.
    pub fn eval(&self, j: usize, r: f64) -> f64 {
        let u = &self.values[j];
        let s = (r / self.dr).clamp(0.0, (u.len() - 1) as f64);
        let i = (s.floor() as usize).min(u.len() - 2);
        let w = s - i as f64;
        (1.0 - w) * u[i] + w * u[i + 1]
    }

    pub fn snapshot_at(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|s| (s - t).abs() <= 1e-12)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(["r", "t", "value"]).map_err(io)?;
        for (t, u) in self.times.iter().zip(&self.values) {
            for (i, v) in u.iter().enumerate() {
                w.write_record([format!("{:.17e}", i as f64 * self.dr), format!("{t:.17e}"), format!("{v:.17e}")])
                    .map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn radial_sampler(problem: &FlowProblem) -> Result<()> {
    if problem.n() != 1 || !matches!(problem.domain.kind(), DomainKind::Ball) {
        return Err(Error::NotRadial("the reduction needs the unit disc".into()));
    }
    if !problem.initial.kind.is_radial() {
        return Err(Error::NotRadial(format!("initial data {:?}", problem.initial.kind)));
    }
    let horizon = problem.time.horizon;
    for k in 0..8 {
        let r = k as f64 / 8.0;
        let th = 0.7 + k as f64;
        let (a, b) = ([r, 0.0], [r * th.cos(), r * th.sin()]);
        let t = horizon * k as f64 / 8.0;
        let u = 0.3 * k as f64 - 1.0;
        let f_gap = (problem.source.eval(t, &a, u) - problem.source.eval(t, &b, u)).abs();
        let rim = [th.cos(), th.sin()];
        let phi_gap = (problem.boundary.eval(&[1.0, 0.0], t) - problem.boundary.eval(&rim, t)).abs();
        if f_gap > 1e-12 {
            return Err(Error::NotRadial(format!("source {}", problem.source.name())));
        }
        if phi_gap > 1e-12 {
            return Err(Error::NotRadial(format!("boundary data {}", problem.boundary.name())));
        }
    }
    Ok(())
}

/// `(1/4)(U_rr + U_r / r)` at node `i`, with the axis row `(U_1 - U_0) / dr^2`.
fn radial_operator(u: &[f64], i: usize, dr: f64) -> f64 {
    if i == 0 {
        (u[1] - u[0]) / (dr * dr)
    } else {
        let r = i as f64 * dr;
        0.25 * ((u[i + 1] - 2.0 * u[i] + u[i - 1]) / (dr * dr) + (u[i + 1] - u[i - 1]) / (2.0 * r * dr))
    }
}

/// Coefficients `(lower, diag, upper)` of [`radial_operator`] at node `i`.
fn radial_coeffs(i: usize, dr: f64) -> (f64, f64, f64) {
    let d2 = dr * dr;
    if i == 0 {
        (0.0, -1.0 / d2, 1.0 / d2)
    } else {
        let r = i as f64 * dr;
        (0.25 * (1.0 / d2 - 1.0 / (2.0 * r * dr)), -0.5 / d2, 0.25 * (1.0 / d2 + 1.0 / (2.0 * r * dr)))
    }
}

fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Vec<f64> {
    let n = d.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    dp[0] = d[0] / b[0];
    for i in 1..n {
        let m = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / m;
        dp[i] = (d[i] - a[i] * dp[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

/// Backward Euler step of the radial reduction on nodes `0..N` with `U_N` fixed.
fn radial_step(
    prev: &[f64],
    boundary: f64,
    t1: f64,
    dt: f64,
    dr: f64,
    f: &dyn Fn(f64, f64, f64) -> f64,
    f_u: &dyn Fn(f64, f64, f64) -> f64,
) -> Result<Vec<f64>> {
    let n = prev.len() - 1;
    let mut u = prev.to_vec();
    u[n] = boundary;
    // start inside the convex cone: lower the interior by beta (1 - r^2)
    let mut beta = 0.0;
    let positive = |u: &[f64]| (0..n).all(|i| radial_operator(u, i, dr) > 0.0);
    while !positive(&u) {
        beta = if beta == 0.0 { 1e-8 } else { 2.0 * beta };
        if beta > 1e6 {
            return Err(Error::StepRejected {
                t: t1,
                reason: "no convex radial guess".into(),
                residuals: Vec::new(),
            });
        }
        for i in 0..n {
            let r = i as f64 * dr;
            u[i] = prev[i] - beta * (1.0 - r * r);
        }
    }
    let residual = |u: &[f64]| -> Option<Vec<f64>> {
        let mut out = vec![0.0; n];
        for i in 0..n {
            let l = radial_operator(u, i, dr);
            if !(l > 0.0) {
                return None;
            }
            out[i] = u[i] - dt * (l.ln() + f(t1, i as f64 * dr, u[i])) - prev[i];
        }
        Some(out)
    };
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut res = residual(&u).expect("guess is convex");
    let mut rn = norm(&res);
    let mut residuals = vec![rn];
    for _ in 0..60 {
        if rn <= 1e-11 {
            return Ok(u);
        }
        let (mut a, mut b, mut c) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let l = radial_operator(&u, i, dr);
            let (lo, di, up) = radial_coeffs(i, dr);
            let r = i as f64 * dr;
            a[i] = -dt * lo / l;
            b[i] = 1.0 - dt * (di / l + f_u(t1, r, u[i]));
            c[i] = if i + 1 < n { -dt * up / l } else { 0.0 };
        }
        let rhs: Vec<f64> = res.iter().map(|v| -v).collect();
        let delta = thomas(&a, &b, &c, &rhs);
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = u.clone();
            for i in 0..n {
                trial[i] += lambda * delta[i];
            }
            if let Some(r) = residual(&trial) {
                let tn = norm(&r);
                if tn < rn {
                    u = trial;
                    res = r;
                    rn = tn;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        residuals.push(rn);
        if !accepted {
            break;
        }
    }
    if rn <= 1e-11 {
        return Ok(u);
    }
    Err(Error::StepRejected {
        t: t1,
        reason: "radial Newton stalled".into(),
        residuals,
    })
}

/// Solves `U_t = log((1/4)(U_rr + U_r / r)) + f` on `[0, 1]` with spacing
/// `h / refine` and step `dt / refine`, recording the problem's snapshots.
pub fn radial_reference(problem: &FlowProblem, refine: usize) -> Result<RadialReference> {
    radial_sampler(problem)?;
    let refine = refine.max(1);
    let cells = ((1.0 / problem.grid.h()).round() as usize * refine).max(8);
    let dr = 1.0 / cells as f64;
    let dt_max = problem.time.dt / refine as f64;
    let src = problem.source.clone();
    let f = |t: f64, r: f64, u: f64| src.eval(t, &[r, 0.0], u);
    let f_u = |t: f64, r: f64, u: f64| src.du(t, &[r, 0.0], u);
    let mut u: Vec<f64> = (0..=cells).map(|i| problem.initial.eval(&[i as f64 * dr, 0.0])).collect();
    u[cells] = problem.boundary.eval(&[1.0, 0.0], 0.0);
    let times = problem.time.snapshots.clone();
    let mut values = vec![u.clone()];
    let mut t = 0.0;
    for w in times.windows(2) {
        let steps = ((w[1] - w[0]) / dt_max - 1e-9).ceil().max(1.0) as usize;
        for j in 1..=steps {
            let t1 = if j == steps {
                w[1]
            } else {
                w[0] + (w[1] - w[0]) * j as f64 / steps as f64
            };
            let phi = problem.boundary.eval(&[1.0, 0.0], t1);
            u = radial_step(&u, phi, t1, t1 - t, dr, &f, &f_u)?;
            t = t1;
        }
        values.push(u.clone());
    }
    Ok(RadialReference {
        dr,
        dt: dt_max,
        times,
        values,
    })
}

/// Max-norm gap between a 2-D snapshot and the reference at the same time.
pub fn radial_gap(reference: &RadialReference, j: usize, grid: &Grid, values: &[f64]) -> f64 {
    (0..grid.num_nodes())
        .map(|k| {
            let r = sq(grid.coords(k)).sqrt();
            (values[k] - reference.eval(j, r)).abs()
        })
        .fold(0.0, f64::max)
}

/// Writes `(r, t, value)` rows of the reference to any writer.
pub fn write_reference<W: Write>(reference: &RadialReference, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["r", "t", "value"])?;
    for (t, u) in reference.times.iter().zip(&reference.values) {
        for (i, v) in u.iter().enumerate() {
            w.write_record([format!("{:.17e}", i as f64 * reference.dr), format!("{t:.17e}"), format!("{v:.17e}")])?;
        }
    }
    w.flush()
}
