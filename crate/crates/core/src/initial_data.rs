//! Bounded plurisubharmonic initial data, the mollification cascade
//! `u_{0,m}`, the cutoff `zeta`, the compatibility source `g_m` and the ramped
//! boundary data `phi_m`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::calculus::{GridField, Operators};
use crate::error::{Error, Result};
use crate::flow::{BoundaryData, Source};
use crate::geometry::{complex_hessian_fd, Domain, Grid, ScalarFn};

/// Mollifier nodes per axis.
pub const KERNEL_NODES: usize = 7;

const MAX_RAMP_HALVINGS: usize = 40;
const RAMP_SAMPLES: usize = 32;

/// Values on a regular lattice with multilinear interpolation; NaN outside.
#[derive(Clone, Debug, PartialEq)]
pub struct Tabulated {
    pub lo: Vec<f64>,
    pub h: f64,
    pub dims: Vec<usize>,
    /// Row-major, last axis fastest.
    pub values: Vec<f64>,
}

impl Tabulated {
    pub fn from_fn(lo: Vec<f64>, h: f64, dims: Vec<usize>, f: impl Fn(&[f64]) -> f64) -> Self {
        let total: usize = dims.iter().product();
        let d = dims.len();
        let mut x = vec![0.0; d];
        let mut values = Vec::with_capacity(total);
        for idx in 0..total {
            let mut r = idx;
            for i in (0..d).rev() {
                x[i] = lo[i] + (r % dims[i]) as f64 * h;
                r /= dims[i];
            }
            values.push(f(&x));
        }
        Self { lo, h, dims, values }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let d = self.dims.len();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for i in 0..d {
            let s = (x[i] - self.lo[i]) / self.h;
            let top = (self.dims[i] - 1) as f64;
            if !(s >= -1e-12 && s <= top + 1e-12) {
                return f64::NAN;
            }
            let s = s.clamp(0.0, top);
            let k = (s.floor() as usize).min(self.dims[i].saturating_sub(2));
            base[i] = k;
            frac[i] = s - k as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0;
            for i in 0..d {
                let bit = (corner >> i) & 1;
                w *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
                idx = idx * self.dims[i] + (base[i] + bit).min(self.dims[i] - 1);
            }
            if w != 0.0 {
                acc += w * self.values[idx];
            }
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialKind {
    Constant(f64),
    /// `a |z|^2`.
    Quadratic(f64),
    /// `max(Re z_1, 0)`.
    RealPartPositive,
    /// `max(|z|^2 - c, 0)`.
    Bowl(f64),
    Tabulated(Tabulated),
    /// A closed-form function supplied alongside, e.g. a manufactured solution at t = 0.
    Custom(String),
}

impl InitialKind {
    pub fn is_smooth(&self) -> bool {
        matches!(self, InitialKind::Constant(_) | InitialKind::Quadratic(_))
    }

    /// Built-in evaluator; `None` for [`InitialKind::Custom`].
    pub fn evaluator(&self) -> Option<ScalarFn> {
        Some(match self.clone() {
            InitialKind::Constant(c) => Arc::new(move |_: &[f64]| c),
            InitialKind::Quadratic(a) => Arc::new(move |x: &[f64]| a * norm2(x)),
            InitialKind::RealPartPositive => Arc::new(|x: &[f64]| x[0].max(0.0)),
            InitialKind::Bowl(c) => Arc::new(move |x: &[f64]| (norm2(x) - c).max(0.0)),
            InitialKind::Tabulated(t) => Arc::new(move |x: &[f64]| t.eval(x)),
            InitialKind::Custom(_) => return None,
        })
    }

    /// Whether the data is a function of `|z|` only.
    pub fn is_radial(&self) -> bool {
        matches!(self, InitialKind::Constant(_) | InitialKind::Quadratic(_) | InitialKind::Bowl(_))
    }
}

pub(crate) fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Initial data with its measured oscillation and bound over the closed domain.
#[derive(Clone)]
pub struct InitialData {
    pub kind: InitialKind,
    u0: ScalarFn,
    pub smooth: bool,
    /// `sup - inf` over nodes and feet.
    pub osc: f64,
    /// `sup |u0|` over nodes and feet.
    pub bound: f64,
}

impl std::fmt::Debug for InitialData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InitialData")
            .field("kind", &self.kind)
            .field("osc", &self.osc)
            .field("bound", &self.bound)
            .finish()
    }
}

impl InitialData {
    /// Measures `Osc(u0)` and `C_u` on the grid and spot-checks plurisubharmonicity.
    pub fn new(kind: InitialKind, domain: &Domain, grid: &Grid) -> Result<Self> {
        let u0 = kind
            .evaluator()
            .ok_or_else(|| Error::InvalidInput("custom initial data needs an evaluator".into()))?;
        let smooth = kind.is_smooth();
        Self::with_evaluator(kind, u0, smooth, domain, grid)
    }

    pub fn with_evaluator(kind: InitialKind, u0: ScalarFn, smooth: bool, domain: &Domain, grid: &Grid) -> Result<Self> {
        let samples: Vec<f64> = (0..grid.num_nodes())
            .map(|k| u0(grid.coords(k)))
            .chain(grid.feet().iter().map(|f| u0(&f.coords)))
            .collect();
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::DomainTooTight("initial data not finite on the closed domain".into()));
        }
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let data = Self {
            smooth,
            osc: hi - lo,
            bound: hi.abs().max(lo.abs()),
            kind,
            u0,
        };
        data.spot_check_psh(domain, grid)?;
        Ok(data)
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.u0)(x)
    }

    pub fn evaluator(&self) -> ScalarFn {
        self.u0.clone()
    }

    fn spot_check_psh(&self, domain: &Domain, grid: &Grid) -> Result<()> {
        let n = domain.n();
        let delta = domain.margin();
        let rule = KernelRule::new(n);
        let stride = (grid.num_nodes() / 25).max(1);
        for node in (0..grid.num_nodes()).step_by(stride) {
            let x = grid.coords(node);
            let smooth = |y: &[f64]| rule.convolve(|p| self.eval(p), y, delta);
            let hess = complex_hessian_fd(&smooth, x, n, 0.25 * delta);
            let m = hess.min_eigenvalue();
            if m < -1e-8 {
                return Err(Error::NotPlurisubharmonic {
                    point: x.to_vec(),
                    min_eig: m,
                });
            }
        }
        Ok(())
    }
}

/// `exp(-1/s)` for `s > 0`, else 0.
fn psi(s: f64) -> f64 {
    if s > 0.0 {
        (-1.0 / s).exp()
    } else {
        0.0
    }
}

fn psi_prime(s: f64) -> f64 {
    if s > 0.0 {
        psi(s) / (s * s)
    } else {
        0.0
    }
}

/// Smooth non-increasing cutoff, 1 on `(-inf, 1]` and 0 on `[2, inf)`.
pub fn cutoff_zeta(t: f64) -> f64 {
    if t <= 1.0 {
        return 1.0;
    }
    if t >= 2.0 {
        return 0.0;
    }
    let a = psi(2.0 - t);
    let b = psi(t - 1.0);
    a / (a + b)
}

/// Derivative of [`cutoff_zeta`].
pub fn cutoff_zeta_prime(t: f64) -> f64 {
    if t <= 1.0 || t >= 2.0 {
        return 0.0;
    }
    let a = psi(2.0 - t);
    let b = psi(t - 1.0);
    (-psi_prime(2.0 - t) * b - a * psi_prime(t - 1.0)) / ((a + b) * (a + b))
}

/// Tensor-product `(1 - s^2)^3` quadrature on symmetric midpoint nodes.
#[derive(Clone, Debug)]
pub struct KernelRule {
    dim: usize,
    nodes: [f64; KERNEL_NODES],
    weights: [f64; KERNEL_NODES],
}

impl KernelRule {
    pub fn new(n: usize) -> Self {
        let mut nodes = [0.0; KERNEL_NODES];
        let mut weights = [0.0; KERNEL_NODES];
        let k = KERNEL_NODES as f64;
        for i in 0..KERNEL_NODES {
            let s = (2.0 * i as f64 - (k - 1.0)) / k;
            nodes[i] = s;
            weights[i] = (1.0 - s * s).powi(3);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self {
            dim: 2 * n,
            nodes,
            weights,
        }
    }

    /// Second moment of the one-dimensional rule.
    pub fn second_moment(&self) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(s, w)| w * s * s).sum()
    }

    /// `sum_k w_k f(x + delta s_k)`.
    pub fn convolve(&self, f: impl Fn(&[f64]) -> f64, x: &[f64], delta: f64) -> f64 {
        let total = KERNEL_NODES.pow(self.dim as u32);
        let mut y = x.to_vec();
        let mut acc = 0.0;
        for idx in 0..total {
            let mut r = idx;
            let mut w = 1.0;
            for i in 0..self.dim {
                let k = r % KERNEL_NODES;
                r /= KERNEL_NODES;
                y[i] = x[i] + delta * self.nodes[k];
                w *= self.weights[k];
            }
            acc += w * f(&y);
        }
        acc
    }
}

/// One level of the approximation cascade.
#[derive(Clone, Debug)]
pub struct CascadeLevel {
    pub m: u32,
    /// Kernel radius `delta = r0 / m`.
    pub delta_mollify: f64,
    pub u0m: GridField,
    /// `g_m` at the boundary feet.
    pub g_m: Vec<f64>,
    pub eps_m: f64,
    /// `sup` over feet of `u_{0,m} - u0`.
    pub delta_m: f64,
    pub sup_g: f64,
    pub ramp_halvings: usize,
}

/// `u_{0,m} = (u0 + |z|^2/m) * chi_delta` on every node and foot.
pub fn mollify_initial(data: &InitialData, m: u32, domain: &Domain, grid: &Arc<Grid>) -> Result<GridField> {
    if m == 0 {
        return Err(Error::InvalidInput("cascade index must be positive".into()));
    }
    let n = domain.n();
    let delta = domain.margin() / m as f64;
    let rule = KernelRule::new(n);
    // the quadratic part is convolved in closed form; the rule has zero first moment
    let quad_shift = 2.0 * n as f64 * rule.second_moment() * delta * delta;
    let eval = |x: &[f64]| rule.convolve(|y| data.eval(y), x, delta) + (norm2(x) + quad_shift) / m as f64;
    let values: Vec<f64> = (0..grid.num_nodes())
        .into_par_iter()
        .map(|k| eval(grid.coords(k)))
        .collect();
    let feet: Vec<f64> = grid.feet().par_iter().map(|f| eval(&f.coords)).collect();
    if let Some(p) = values.iter().chain(&feet).position(|v| !v.is_finite()) {
        let where_ = if p < values.len() {
            grid.coords(p).to_vec()
        } else {
            grid.foot(p - values.len()).coords.clone()
        };
        return Err(Error::DomainTooTight(format!(
            "u0 not evaluable within {delta:.3e} of {where_:?}"
        )));
    }
    GridField::new(grid.clone(), values, feet, 0.0)
}

/// `g_m = log det (u_{0,m})_{a b-bar} + f(0, z, u_{0,m})` at the boundary feet.
///
/// The Hessian at a foot is taken from the node that owns the foot.
pub fn compatibility_source(ops: &Operators, u0m: &GridField, f: &Source) -> Result<Vec<f64>> {
    let grid = ops.grid();
    let mut node_logdet = vec![f64::NAN; grid.num_nodes()];
    let mut out = Vec::with_capacity(grid.num_feet());
    for (i, foot) in grid.feet().iter().enumerate() {
        let k = foot.node as usize;
        if node_logdet[k].is_nan() {
            let h = ops.complex_hessian_at(u0m, k);
            node_logdet[k] = h.log_det_pd().map_err(|e| match e {
                Error::NotPlurisubharmonic { min_eig, .. } => Error::NotPlurisubharmonic {
                    point: grid.coords(k).to_vec(),
                    min_eig,
                },
                other => other,
            })?;
        }
        out.push(node_logdet[k] + f.eval(0.0, &foot.coords, u0m.feet[i]));
    }
    Ok(out)
}

/// `phi_m(., t) = zeta(t/eps)(t g_m + u_{0,m}) + (1 - zeta(t/eps)) phi` at the feet.
pub fn boundary_ramp(level: &CascadeLevel, grid: &Grid, phi: &BoundaryData, t: f64) -> Vec<f64> {
    let z = cutoff_zeta(t / level.eps_m);
    grid.feet()
        .iter()
        .enumerate()
        .map(|(i, foot)| {
            let p = phi.eval(&foot.coords, t);
            if z == 0.0 {
                p
            } else {
                z * (t * level.g_m[i] + level.u0m.feet[i]) + (1.0 - z) * p
            }
        })
        .collect()
}

/// Time derivative of [`boundary_ramp`] at one foot.
pub fn boundary_ramp_dt(level: &CascadeLevel, foot: usize, x: &[f64], phi: &BoundaryData, t: f64) -> f64 {
    let s = t / level.eps_m;
    let z = cutoff_zeta(s);
    let dz = cutoff_zeta_prime(s) / level.eps_m;
    let p = phi.eval(x, t);
    let ramp = t * level.g_m[foot] + level.u0m.feet[foot];
    dz * (ramp - p) + z * level.g_m[foot] + (1.0 - z) * phi.dt(x, t)
}

/// Builds one cascade level with the default ramp policy
/// `eps_m = 1 / (m (1 + sup|g_m|))`, capped by `eps_cap`, then halved until
/// `zeta(t/eps)(u_{0,m} - phi) >= 0` on the sampled boundary.
pub fn build_level(
    data: &InitialData,
    m: u32,
    domain: &Domain,
    ops: &Operators,
    f: &Source,
    phi: &BoundaryData,
    eps_cap: Option<f64>,
) -> Result<CascadeLevel> {
    let grid = ops.grid();
    let u0m = mollify_initial(data, m, domain, grid)?;
    let g_m = compatibility_source(ops, &u0m, f)?;
    let sup_g = g_m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut eps = 1.0 / (m as f64 * (1.0 + sup_g));
    if let Some(cap) = eps_cap {
        eps = eps.min(cap);
    }
    let delta_m = grid
        .feet()
        .iter()
        .zip(&u0m.feet)
        .map(|(ft, v)| v - data.eval(&ft.coords))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut halvings = 0;
    loop {
        if ramp_nonnegative(&u0m, grid, phi, eps) {
            break;
        }
        halvings += 1;
        if halvings > MAX_RAMP_HALVINGS {
            return Err(Error::RampInfeasible {
                halvings: MAX_RAMP_HALVINGS,
            });
        }
        eps *= 0.5;
    }
    Ok(CascadeLevel {
        m,
        delta_mollify: domain.margin() / m as f64,
        u0m,
        g_m,
        eps_m: eps,
        delta_m: delta_m.max(0.0),
        sup_g,
        ramp_halvings: halvings,
    })
}

fn ramp_nonnegative(u0m: &GridField, grid: &Grid, phi: &BoundaryData, eps: f64) -> bool {
    (0..=RAMP_SAMPLES).all(|k| {
        let t = 2.0 * eps * k as f64 / RAMP_SAMPLES as f64;
        let z = cutoff_zeta(t / eps);
        grid.feet()
            .iter()
            .zip(&u0m.feet)
            .all(|(ft, v)| z * (v - phi.eval(&ft.coords, t)) >= -1e-12)
    })
}

/// Builds levels `m_1 < m_2 < ...` so that `eps_m` and `eps_m sup|g_m|` strictly decrease.
pub fn build_cascade(
    data: &InitialData,
    ms: &[u32],
    domain: &Domain,
    ops: &Operators,
    f: &Source,
    phi: &BoundaryData,
) -> Result<Vec<CascadeLevel>> {
    let mut levels: Vec<CascadeLevel> = Vec::with_capacity(ms.len());
    for &m in ms {
        if let Some(prev) = levels.last() {
            if m <= prev.m {
                return Err(Error::InvalidInput("cascade levels must increase".into()));
            }
        }
        let mut cap = None;
        if let Some(prev) = levels.last() {
            // provisional build to learn sup|g_m|
            let probe = build_level(data, m, domain, ops, f, phi, None)?;
            let mut c = 0.99 * prev.eps_m;
            if probe.sup_g > 0.0 {
                c = c.min(0.99 * prev.eps_m * prev.sup_g / probe.sup_g);
            }
            if probe.eps_m <= c {
                levels.push(probe);
                continue;
            }
            cap = Some(c);
        }
        levels.push(build_level(data, m, domain, ops, f, phi, cap)?);
    }
    Ok(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::complex_hessian;
    use crate::geometry::{classify_grid, make_domain, DomainKind};
    use approx::assert_abs_diff_eq;

    fn setup(n: usize, h: f64) -> (Domain, Arc<Grid>, Operators) {
        let d = make_domain(DomainKind::Ball, n).unwrap();
        let g = Arc::new(classify_grid(&d, h).unwrap());
        let ops = Operators::new(g.clone());
        (d, g, ops)
    }

    #[test]
    fn zeta_plateaus_and_slope() {
        assert_eq!(cutoff_zeta(0.5), 1.0);
        assert_eq!(cutoff_zeta(3.0), 0.0);
        let z = cutoff_zeta(1.5);
        assert!(z > 0.0 && z < 1.0);
        let fd = (cutoff_zeta(1.5 + 1e-6) - cutoff_zeta(1.5 - 1e-6)) / 2e-6;
        assert!(fd < 0.0);
        assert_abs_diff_eq!(cutoff_zeta_prime(1.5), fd, epsilon = 1e-7);
        let mut prev = 1.0;
        for k in 0..=300 {
            let v = cutoff_zeta(k as f64 / 100.0);
            assert!(v <= prev && (0.0..=1.0).contains(&v));
            prev = v;
        }
    }

    #[test]
    fn constant_data_mollifies_to_quadratic() {
        let (d, g, ops) = setup(1, 0.1);
        let data = InitialData::new(InitialKind::Constant(2.0), &d, &g).unwrap();
        let m = 4;
        let u = mollify_initial(&data, m, &d, &g).unwrap();
        let rule = KernelRule::new(1);
        let delta = d.margin() / m as f64;
        let shift = 2.0 * rule.second_moment() * delta * delta;
        let err = u.max_error(|x| 2.0 + (norm2(x) + shift) / m as f64);
        assert!(err < 1e-13);
        for hk in complex_hessian(&ops, &u) {
            assert_abs_diff_eq!(hk.get(0, 0).re, 0.25, epsilon = 1e-9);
        }
    }

    /// Exact convolution of `max(x, 0)` with the normalized continuous
    /// `(1 - s^2)^3` kernel of radius `delta`, by composite Simpson.
    fn exact_kink_convolution(x: f64, delta: f64) -> f64 {
        let k = 20_000;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=k {
            let s = -1.0 + 2.0 * i as f64 / k as f64;
            let w = if i == 0 || i == k { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let ker = (1.0 - s * s).powi(3);
            num += w * ker * (x + delta * s).max(0.0);
            den += w * ker;
        }
        num / den
    }

    #[test]
    fn kink_mollification_matches_continuous_convolution() {
        let (d, g, _) = setup(1, 0.05);
        let data = InitialData::new(InitialKind::RealPartPositive, &d, &g).unwrap();
        let m = 8;
        let u = mollify_initial(&data, m, &d, &g).unwrap();
        let delta = d.margin() / m as f64;
        let rule = KernelRule::new(1);
        let shift = 2.0 * rule.second_moment() * delta * delta;
        for k in 0..g.num_nodes() {
            let x = g.coords(k);
            let quad = (norm2(x) + shift) / m as f64;
            let exact = exact_kink_convolution(x[0], delta) + quad;
            assert!((u.values[k] - exact).abs() <= 0.05 * delta, "{x:?}");
            if x[0].abs() > delta {
                assert_abs_diff_eq!(u.values[k], x[0].max(0.0) + quad, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cascade_invariants_on_kink() {
        let (d, g, ops) = setup(1, 0.05);
        let data = InitialData::new(InitialKind::RealPartPositive, &d, &g).unwrap();
        let f = Source::zero();
        let u0 = data.evaluator();
        let phi = BoundaryData::new("u0", move |x, _t| u0(x));
        let levels = build_cascade(&data, &[4, 8, 16, 32], &d, &ops, &f, &phi).unwrap();
        for w in levels.windows(2) {
            assert!(w[1].eps_m < w[0].eps_m);
            assert!(w[1].eps_m * w[1].sup_g < w[0].eps_m * w[0].sup_g);
            assert!(w[1].delta_m <= w[0].delta_m + 1e-15);
            let diff = w[1]
                .u0m
                .values
                .iter()
                .zip(&w[0].u0m.values)
                .map(|(a, b)| a - b)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(diff <= 1e-8);
        }
        for lvl in &levels {
            assert!(lvl.delta_m >= 0.0);
            for hk in complex_hessian(&ops, &lvl.u0m) {
                assert!(hk.min_eigenvalue() >= 1.0 / lvl.m as f64 - 1e-8);
            }
            let at0 = boundary_ramp(lvl, &g, &phi, 0.0);
            assert_eq!(at0, lvl.u0m.feet);
            let late = boundary_ramp(lvl, &g, &phi, 3.0 * lvl.eps_m);
            for (v, ft) in late.iter().zip(g.feet()) {
                assert_eq!(*v, phi.eval(&ft.coords, 3.0 * lvl.eps_m));
            }
        }
    }

    #[test]
    fn compatibility_source_examples() {
        let (_, g, ops) = setup(1, 0.1);
        let u = GridField::from_fn(g.clone(), 0.0, norm2);
        let gm = compatibility_source(&ops, &u, &Source::zero()).unwrap();
        assert!(gm.iter().all(|v| v.abs() < 1e-9));
        let minus_u = Source::new("-u", |_, _, u| -u);
        let gm = compatibility_source(&ops, &u, &minus_u).unwrap();
        assert!(gm.iter().all(|v| (v + 1.0).abs() < 1e-8));

        let (_, g2, ops2) = setup(2, 0.25);
        let u = GridField::from_fn(g2.clone(), 0.0, |x| 2.0 * norm2(x));
        let gm = compatibility_source(&ops2, &u, &Source::zero()).unwrap();
        assert!(gm.iter().all(|v| (v - 2.0 * 2f64.ln()).abs() < 1e-9));
    }

    #[test]
    fn ramp_formula_at_midpoint() {
        let (_, g, _) = setup(1, 0.1);
        let level = CascadeLevel {
            m: 1,
            delta_mollify: 0.1,
            u0m: GridField::constant(g.clone(), 0.0, 0.0),
            g_m: vec![1.0; g.num_feet()],
            eps_m: 0.1,
            delta_m: 0.0,
            sup_g: 1.0,
            ramp_halvings: 0,
        };
        let phi = BoundaryData::new("zero", |_, _| 0.0);
        let t = 1.5 * level.eps_m;
        for v in boundary_ramp(&level, &g, &phi, t) {
            assert_abs_diff_eq!(v, cutoff_zeta(1.5) * t, epsilon = 1e-15);
        }
    }

    #[test]
    fn ramp_halves_until_nonnegative() {
        let (d, g, ops) = setup(1, 0.1);
        let data = InitialData::new(InitialKind::Constant(0.0), &d, &g).unwrap();
        // phi grows quickly above u_{0,m} once t > 0
        let phi = BoundaryData::new("steep", |_, t| 50.0 * t);
        let lvl = build_level(&data, 2, &d, &ops, &Source::zero(), &phi, None).unwrap();
        assert!(lvl.ramp_halvings > 0);
        let never = BoundaryData::new("high", |_, _| 10.0);
        match build_level(&data, 2, &d, &ops, &Source::zero(), &never, None) {
            Err(Error::RampInfeasible { .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tabulated_interpolates_and_rejects_outside() {
        let t = Tabulated::from_fn(vec![-2.0, -2.0], 0.5, vec![9, 9], |x| x[0] + 2.0 * x[1]);
        assert_abs_diff_eq!(t.eval(&[0.3, -0.7]), 0.3 - 1.4, epsilon = 1e-12);
        assert!(t.eval(&[2.5, 0.0]).is_nan());
        let (d, g, _) = setup(1, 0.1);
        let small = Tabulated::from_fn(vec![-1.1, -1.1], 0.1, vec![23, 23], norm2);
        let data = InitialData::new(InitialKind::Tabulated(small), &d, &g).unwrap();
        match mollify_initial(&data, 1, &d, &g) {
            Err(Error::DomainTooTight(_)) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_psh_initial_data_is_rejected() {
        let (d, g, _) = setup(1, 0.1);
        let bad = Tabulated::from_fn(vec![-1.5, -1.5], 0.05, vec![61, 61], |x| -norm2(x));
        assert!(matches!(
            InitialData::new(InitialKind::Tabulated(bad), &d, &g),
            Err(Error::NotPlurisubharmonic { .. })
        ));
    }
}
