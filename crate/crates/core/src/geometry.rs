//! Strictly pseudoconvex domains given by defining functions, Cartesian grids
//! over R^{2n}, and point classification with Shortley-Weller arms.
//!
//! Coordinates are ordered `(x_1, y_1, ..., x_n, y_n)` with `z_a = x_a + i y_a`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hermitian::HermitianForm;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Default lattice point budget for a single grid.
pub const DEFAULT_POINT_BUDGET: usize = 2_000_000;

const ARM_BISECTIONS: usize = 60;

/// A user-supplied defining function together with a box containing the closed domain.
#[derive(Clone)]
pub struct CustomDomain {
    pub name: String,
    pub rho: ScalarFn,
    pub rho_grad: VectorFn,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl fmt::Debug for CustomDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomDomain")
            .field("name", &self.name)
            .field("lo", &self.lo)
            .field("hi", &self.hi)
            .finish()
    }
}

#[derive(Clone, Debug)]
pub enum DomainKind {
    Ball,
    Ellipsoid(Vec<f64>),
    Custom(CustomDomain),
}

/// A bounded strictly pseudoconvex domain `{rho < 0}` normalized so that `inf rho = -1`.
#[derive(Clone)]
pub struct Domain {
    name: String,
    n: usize,
    kind: DomainKind,
    rho: ScalarFn,
    rho_grad: VectorFn,
    /// Tight box around the closed domain.
    core_lo: Vec<f64>,
    core_hi: Vec<f64>,
    /// Margin factor of the neighbourhood box around the core box.
    dilation: f64,
}

impl fmt::Debug for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Domain")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("kind", &self.kind)
            .field("core_lo", &self.core_lo)
            .field("core_hi", &self.core_hi)
            .field("dilation", &self.dilation)
            .finish()
    }
}

/// Default margin factor of the neighbourhood box.
pub const DEFAULT_DILATION: f64 = 1.25;

/// Builds and validates a normalized domain.
pub fn make_domain(kind: DomainKind, n: usize) -> Result<Domain> {
    if !(1..=crate::hermitian::MAX_DIM).contains(&n) {
        return Err(Error::InvalidInput(format!("complex dimension {n} unsupported")));
    }
    let dim = 2 * n;
    let domain = match &kind {
        DomainKind::Ball => Domain {
            name: format!("ball{n}"),
            n,
            kind: kind.clone(),
            rho: Arc::new(|x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() - 1.0),
            rho_grad: Arc::new(|x: &[f64]| x.iter().map(|v| 2.0 * v).collect()),
            core_lo: vec![-1.0; dim],
            core_hi: vec![1.0; dim],
            dilation: DEFAULT_DILATION,
        },
        DomainKind::Ellipsoid(c) => {
            if c.len() != n || c.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "ellipsoid needs {n} positive coefficients, got {c:?}"
                )));
            }
            let coef: Vec<f64> = c.iter().flat_map(|&v| [v, v]).collect();
            let coef_g = coef.clone();
            let half: Vec<f64> = coef.iter().map(|v| 1.0 / v.sqrt()).collect();
            Domain {
                name: format!("ellipsoid{n}"),
                n,
                kind: kind.clone(),
                rho: Arc::new(move |x: &[f64]| {
                    x.iter().zip(&coef).map(|(v, c)| c * v * v).sum::<f64>() - 1.0
                }),
                rho_grad: Arc::new(move |x: &[f64]| {
                    x.iter().zip(&coef_g).map(|(v, c)| 2.0 * c * v).collect()
                }),
                core_lo: half.iter().map(|v| -v).collect(),
                core_hi: half,
                dilation: DEFAULT_DILATION,
            }
        }
        DomainKind::Custom(custom) => {
            if custom.lo.len() != dim || custom.hi.len() != dim {
                return Err(Error::InvalidInput("custom box has wrong dimension".into()));
            }
            let (inf, _) = minimize_on_box(&custom.rho, &custom.rho_grad, &custom.lo, &custom.hi);
            if !(inf < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "defining function has no negative values (inf = {inf})"
                )));
            }
            let scale = 1.0 / inf.abs();
            let rho = custom.rho.clone();
            let grad = custom.rho_grad.clone();
            Domain {
                name: custom.name.clone(),
                n,
                kind: kind.clone(),
                rho: Arc::new(move |x: &[f64]| scale * rho(x)),
                rho_grad: Arc::new(move |x: &[f64]| grad(x).into_iter().map(|g| scale * g).collect()),
                core_lo: custom.lo.clone(),
                core_hi: custom.hi.clone(),
                dilation: DEFAULT_DILATION,
            }
        }
    };
    domain.check_plurisubharmonic()?;
    Ok(domain)
}

/// Coarse sampling followed by projected gradient descent from the best sample.
fn minimize_on_box(rho: &ScalarFn, grad: &VectorFn, lo: &[f64], hi: &[f64]) -> (f64, Vec<f64>) {
    let dim = lo.len();
    let per_axis: usize = if dim <= 2 { 65 } else { 17 };
    let mut best = (f64::INFINITY, lo.to_vec());
    let total = per_axis.pow(dim as u32);
    let mut x = vec![0.0; dim];
    for idx in 0..total {
        let mut r = idx;
        for i in 0..dim {
            let k = r % per_axis;
            r /= per_axis;
            x[i] = lo[i] + (hi[i] - lo[i]) * k as f64 / (per_axis - 1) as f64;
        }
        let v = rho(&x);
        if v < best.0 {
            best = (v, x.clone());
        }
    }
    let (mut fx, mut x) = best;
    let mut step = 0.1 * (0..dim).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
    for _ in 0..500 {
        let g = grad(&x);
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn < 1e-14 || step < 1e-15 {
            break;
        }
        let trial: Vec<f64> = (0..dim)
            .map(|i| (x[i] - step * g[i] / gn).clamp(lo[i], hi[i]))
            .collect();
        let ft = rho(&trial);
        if ft < fx {
            fx = ft;
            x = trial;
            step *= 1.5;
        } else {
            step *= 0.5;
        }
    }
    (fx, x)
}

/// Complex Hessian of a smooth function by central differences with step `eta`.
pub fn complex_hessian_fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], n: usize, eta: f64) -> HermitianForm {
    let dim = 2 * n;
    let mut d = vec![0.0; dim * dim];
    let mut y = x.to_vec();
    let f0 = f(x);
    for i in 0..dim {
        y[i] = x[i] + eta;
        let fp = f(&y);
        y[i] = x[i] - eta;
        let fm = f(&y);
        y[i] = x[i];
        d[i * dim + i] = (fp - 2.0 * f0 + fm) / (eta * eta);
        for j in i + 1..dim {
            let mut corner = |si: f64, sj: f64| {
                y[i] = x[i] + si * eta;
                y[j] = x[j] + sj * eta;
                let v = f(&y);
                y[i] = x[i];
                y[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * eta * eta);
            d[i * dim + j] = v;
            d[j * dim + i] = v;
        }
    }
    HermitianForm::from_real_hessian(n, |i, j| d[i * dim + j])
}

impl Domain {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Complex dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Real dimension `2n`.
    pub fn real_dim(&self) -> usize {
        2 * self.n
    }

    pub fn kind(&self) -> &DomainKind {
        &self.kind
    }

    #[inline]
    pub fn rho(&self, x: &[f64]) -> f64 {
        (self.rho)(x)
    }

    #[inline]
    pub fn rho_grad(&self, x: &[f64]) -> Vec<f64> {
        (self.rho_grad)(x)
    }

    pub fn rho_fn(&self) -> ScalarFn {
        self.rho.clone()
    }

    pub fn dilation(&self) -> f64 {
        self.dilation
    }

    /// Tight box around the closed domain.
    pub fn core_box(&self) -> (&[f64], &[f64]) {
        (&self.core_lo, &self.core_hi)
    }

    /// The neighbourhood box: the core box dilated about its centre.
    pub fn bbox(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = Vec::with_capacity(self.core_lo.len());
        let mut hi = Vec::with_capacity(self.core_lo.len());
        for (a, b) in self.core_lo.iter().zip(&self.core_hi) {
            let c = 0.5 * (a + b);
            let r = 0.5 * (b - a) * self.dilation;
            lo.push(c - r);
            hi.push(c + r);
        }
        (lo, hi)
    }

    /// Smallest distance between the core box and the neighbourhood box.
    pub fn margin(&self) -> f64 {
        self.core_lo
            .iter()
            .zip(&self.core_hi)
            .map(|(a, b)| 0.5 * (b - a) * (self.dilation - 1.0))
            .fold(f64::INFINITY, f64::min)
    }

    /// Complex Hessian of the defining function.
    pub fn rho_complex_hessian(&self, x: &[f64]) -> HermitianForm {
        match &self.kind {
            DomainKind::Ball => HermitianForm::identity(self.n),
            DomainKind::Ellipsoid(c) => HermitianForm::from_diag(c),
            DomainKind::Custom(_) => complex_hessian_fd(&*self.rho, x, self.n, 1e-3),
        }
    }

    fn check_plurisubharmonic(&self) -> Result<()> {
        let dim = self.real_dim();
        let per_axis: usize = if dim <= 2 { 21 } else { 7 };
        let mut x = vec![0.0; dim];
        for idx in 0..per_axis.pow(dim as u32) {
            let mut r = idx;
            for i in 0..dim {
                let k = r % per_axis;
                r /= per_axis;
                x[i] = self.core_lo[i]
                    + (self.core_hi[i] - self.core_lo[i]) * k as f64 / (per_axis - 1) as f64;
            }
            if self.rho(&x) > 0.0 {
                continue;
            }
            let m = self.rho_complex_hessian(&x).min_eigenvalue();
            if !(m > 0.0) {
                return Err(Error::NotPlurisubharmonic {
                    point: x.clone(),
                    min_eig: m,
                });
            }
        }
        Ok(())
    }

    /// Unit outward normal `grad rho / |grad rho|`.
    pub fn normal(&self, x: &[f64]) -> Vec<f64> {
        let g = self.rho_grad(x);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        g.into_iter().map(|v| v / norm).collect()
    }

    /// Finds `s` in `(0, len]` with `rho(x + s e) = 0` by bisection, given
    /// `rho(x) < 0 <= rho(x + len e)`.
    fn bisect_along(&self, x: &[f64], dir: &[f64], len: f64) -> f64 {
        let mut lo = 0.0;
        let mut hi = len;
        let mut y = x.to_vec();
        for _ in 0..ARM_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            for i in 0..x.len() {
                y[i] = x[i] + mid * dir[i];
            }
            if self.rho(&y) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Boundary point reached from an interior point along a unit direction.
    pub fn ray_to_boundary(&self, x: &[f64], dir: &[f64]) -> Option<Vec<f64>> {
        let (lo, hi) = self.bbox();
        let diam = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt();
        let far: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + diam * d).collect();
        if self.rho(x) >= 0.0 || self.rho(&far) < 0.0 {
            return None;
        }
        let s = self.bisect_along(x, dir, diam);
        Some(x.iter().zip(dir).map(|(a, d)| a + s * d).collect())
    }
}

const PROJECTION_MAX_ITER: usize = 100;

/// Euclidean distance from a point of the closed domain to the boundary and the
/// nearest boundary point.
pub fn boundary_distance(domain: &Domain, point: &[f64]) -> Result<(f64, Vec<f64>)> {
    let dim = domain.real_dim();
    if point.len() != dim {
        return Err(Error::InvalidInput("point has wrong dimension".into()));
    }
    if let DomainKind::Ball = domain.kind {
        let r = point.iter().map(|v| v * v).sum::<f64>().sqrt();
        let foot = if r > 0.0 {
            point.iter().map(|v| v / r).collect()
        } else {
            let mut e = vec![0.0; dim];
            e[0] = 1.0;
            e
        };
        return Ok(((1.0 - r).max(0.0), foot));
    }
    if domain.rho(point) >= 0.0 {
        return Ok((0.0, point.to_vec()));
    }

    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(w) = gradient_projection(domain, point) {
        starts.push(w);
    }
    for i in 0..dim {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; dim];
            e[i] = s;
            if let Some(w) = domain.ray_to_boundary(point, &e) {
                starts.push(w);
            }
        }
    }
    let dist = |w: &[f64]| -> f64 {
        w.iter()
            .zip(point)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut any_converged = false;
    let mut last = point.to_vec();
    for w0 in &starts {
        let mut consider = |w: Vec<f64>| {
            let d = dist(&w);
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, w));
            }
        };
        match kkt_newton(domain, point, w0) {
            Ok(w) => {
                any_converged = true;
                consider(w);
            }
            Err(w) => last = w,
        }
        consider(w0.clone());
    }
    match best {
        Some(b) if any_converged => Ok(b),
        _ => Err(Error::ProjectionDiverged {
            iterations: PROJECTION_MAX_ITER,
            last,
        }),
    }
}

/// Newton projection onto the zero set along the gradient.
fn gradient_projection(domain: &Domain, x: &[f64]) -> Option<Vec<f64>> {
    let mut w = x.to_vec();
    for _ in 0..PROJECTION_MAX_ITER {
        let r = domain.rho(&w);
        if r.abs() < 1e-14 {
            return Some(w);
        }
        let g = domain.rho_grad(&w);
        let g2: f64 = g.iter().map(|v| v * v).sum();
        if g2 < 1e-20 {
            return None;
        }
        for i in 0..w.len() {
            w[i] -= r * g[i] / g2;
        }
    }
    None
}

/// Newton iteration on `w - x = mu grad rho(w)`, `rho(w) = 0`.
/// Returns the last iterate on failure.
fn kkt_newton(domain: &Domain, x: &[f64], w0: &[f64]) -> std::result::Result<Vec<f64>, Vec<f64>> {
    let dim = x.len();
    let mut w = w0.to_vec();
    let g0 = domain.rho_grad(&w);
    let g0n: f64 = g0.iter().map(|v| v * v).sum();
    let mut mu = w.iter().zip(x).zip(&g0).map(|((a, b), g)| (a - b) * g).sum::<f64>() / g0n;
    let eta = 1e-6;
    for _ in 0..PROJECTION_MAX_ITER {
        let g = domain.rho_grad(&w);
        let mut res = vec![0.0; dim + 1];
        for i in 0..dim {
            res[i] = w[i] - x[i] - mu * g[i];
        }
        res[dim] = domain.rho(&w);
        let res_norm = res.iter().map(|v| v * v).sum::<f64>().sqrt();
        if res_norm < 1e-13 {
            return Ok(w);
        }
        // Jacobian [[I - mu Hess rho, -g], [g^T, 0]]
        let m = dim + 1;
        let mut a = vec![0.0; m * m];
        let mut y = w.clone();
        for j in 0..dim {
            y[j] = w[j] + eta;
            let gp = domain.rho_grad(&y);
            y[j] = w[j] - eta;
            let gm = domain.rho_grad(&y);
            y[j] = w[j];
            for i in 0..dim {
                let hij = (gp[i] - gm[i]) / (2.0 * eta);
                a[i * m + j] = if i == j { 1.0 } else { 0.0 } - mu * hij;
            }
        }
        for i in 0..dim {
            a[i * m + dim] = -g[i];
            a[dim * m + i] = g[i];
        }
        let rhs: Vec<f64> = res.iter().map(|v| -v).collect();
        let Some(step) = solve_dense(&mut a, rhs, m) else {
            return Err(w);
        };
        for i in 0..dim {
            w[i] += step[i];
        }
        mu += step[dim];
        if step.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-15 {
            let r = domain.rho(&w);
            return if r.abs() <= 1e-10 { Ok(w) } else { Err(w) };
        }
    }
    Err(w)
}

/// Gaussian elimination with partial pivoting on a small dense system.
pub(crate) fn solve_dense(a: &mut [f64], mut b: Vec<f64>, m: usize) -> Option<Vec<f64>> {
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i * m + col].abs().total_cmp(&a[j * m + col].abs()))?;
        if a[piv * m + col].abs() < 1e-14 {
            return None;
        }
        if piv != col {
            for k in 0..m {
                a.swap(piv * m + k, col * m + k);
            }
            b.swap(piv, col);
        }
        for row in col + 1..m {
            let f = a[row * m + col] / a[col * m + col];
            if f != 0.0 {
                for k in col..m {
                    a[row * m + k] -= f * a[col * m + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; m];
    for row in (0..m).rev() {
        let mut s = b[row];
        for k in row + 1..m {
            s -= a[row * m + k] * x[k];
        }
        x[row] = s / a[row * m + row];
    }
    Some(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PointClass {
    Interior,
    BoundaryAdjacent,
    Exterior,
}

impl PointClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            PointClass::Interior => "interior",
            PointClass::BoundaryAdjacent => "boundary_adjacent",
            PointClass::Exterior => "exterior",
        }
    }
}

/// Where an axis arm of a node ends: at a neighbouring node or at a boundary foot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Link {
    Node(u32),
    Foot(u32),
}

/// A boundary point reached along an axis from a boundary-adjacent node.
#[derive(Clone, Debug)]
pub struct Foot {
    pub node: u32,
    /// Direction index `2 * axis + (0 for minus, 1 for plus)`.
    pub dir: u8,
    pub arm: f64,
    pub coords: Vec<f64>,
}

/// A uniform Cartesian grid over R^{2n} classified against a domain.
///
/// Non-exterior lattice points are called nodes and carry the unknowns;
/// boundary values live on the feet.
#[derive(Clone, Debug)]
pub struct Grid {
    n: usize,
    h: f64,
    dims: Vec<usize>,
    kmin: Vec<i64>,
    strides: Vec<usize>,
    class: Vec<PointClass>,
    node_of: Vec<u32>,
    nodes: Vec<usize>,
    coords: Vec<f64>,
    links: Vec<Link>,
    arms: Vec<f64>,
    feet: Vec<Foot>,
}

const NO_NODE: u32 = u32::MAX;

/// Classifies the lattice `h Z^{2n}` against the domain.
pub fn classify_grid(domain: &Domain, h: f64) -> Result<Grid> {
    classify_grid_with_budget(domain, h, DEFAULT_POINT_BUDGET)
}

pub fn classify_grid_with_budget(domain: &Domain, h: f64, budget: usize) -> Result<Grid> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("grid spacing must be positive, got {h}")));
    }
    let n = domain.n();
    let dim = 2 * n;
    let (lo, hi) = domain.core_box();
    let mut kmin = Vec::with_capacity(dim);
    let mut dims = Vec::with_capacity(dim);
    let mut required: usize = 1;
    for i in 0..dim {
        let a = (lo[i] / h).floor() as i64 - 1;
        let b = (hi[i] / h).ceil() as i64 + 1;
        kmin.push(a);
        let d = (b - a + 1) as usize;
        dims.push(d);
        required = required.saturating_mul(d);
    }
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    // row-major: last axis fastest
    let mut strides = vec![1usize; dim];
    for i in (0..dim - 1).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let total = required;
    let coord_of = |idx: usize, out: &mut [f64]| {
        for i in 0..dim {
            let k = (idx / strides[i]) % dims[i];
            out[i] = (kmin[i] + k as i64) as f64 * h;
        }
    };

    let mut rho = vec![0.0; total];
    let mut x = vec![0.0; dim];
    for (idx, r) in rho.iter_mut().enumerate() {
        coord_of(idx, &mut x);
        *r = domain.rho(&x);
    }

    let mut class = vec![PointClass::Exterior; total];
    let mut node_of = vec![NO_NODE; total];
    let mut nodes = Vec::new();
    let mut n_interior = 0usize;
    for idx in 0..total {
        if rho[idx] >= 0.0 {
            continue;
        }
        // a point with rho < 0 never sits on the lattice edge (two guard layers)
        let all_inside = (0..dim).all(|i| rho[idx - strides[i]] < 0.0 && rho[idx + strides[i]] < 0.0);
        class[idx] = if all_inside {
            n_interior += 1;
            PointClass::Interior
        } else {
            PointClass::BoundaryAdjacent
        };
        node_of[idx] = nodes.len() as u32;
        nodes.push(idx);
    }
    if n_interior == 0 {
        return Err(Error::EmptyGrid { h });
    }

    let nd = 2 * dim;
    let mut coords = vec![0.0; nodes.len() * dim];
    let mut links = Vec::with_capacity(nodes.len() * nd);
    let mut arms = vec![1.0; nodes.len() * nd];
    let mut feet = Vec::new();
    let mut dir_vec = vec![0.0; dim];
    for (k, &idx) in nodes.iter().enumerate() {
        coord_of(idx, &mut coords[k * dim..(k + 1) * dim]);
        for i in 0..dim {
            for (side, sign) in [(0usize, -1isize), (1, 1)] {
                let nb = (idx as isize + sign * strides[i] as isize) as usize;
                if node_of[nb] != NO_NODE {
                    links.push(Link::Node(node_of[nb]));
                } else {
                    let p = &coords[k * dim..(k + 1) * dim];
                    dir_vec.iter_mut().for_each(|v| *v = 0.0);
                    dir_vec[i] = sign as f64;
                    let s = domain.bisect_along(p, &dir_vec, h);
                    let theta = (s / h).clamp(f64::MIN_POSITIVE, 1.0);
                    let mut fc = p.to_vec();
                    fc[i] += sign as f64 * theta * h;
                    arms[k * nd + 2 * i + side] = theta;
                    links.push(Link::Foot(feet.len() as u32));
                    feet.push(Foot {
                        node: k as u32,
                        dir: (2 * i + side) as u8,
                        arm: theta,
                        coords: fc,
                    });
                }
            }
        }
    }

    Ok(Grid {
        n,
        h,
        dims,
        kmin,
        strides,
        class,
        node_of,
        nodes,
        coords,
        links,
        arms,
        feet,
    })
}

impl Grid {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn real_dim(&self) -> usize {
        2 * self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Lattice coordinate of the first point along each axis.
    pub fn origin(&self) -> Vec<f64> {
        self.kmin.iter().map(|&k| k as f64 * self.h).collect()
    }

    pub fn lattice_len(&self) -> usize {
        self.class.len()
    }

    pub fn lattice_class(&self, idx: usize) -> PointClass {
        self.class[idx]
    }

    /// Node index of a lattice point, if it is not exterior.
    pub fn node_at(&self, lattice_idx: usize) -> Option<usize> {
        match self.node_of.get(lattice_idx) {
            Some(&v) if v != NO_NODE => Some(v as usize),
            _ => None,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_feet(&self) -> usize {
        self.feet.len()
    }

    pub fn node_lattice_index(&self, node: usize) -> usize {
        self.nodes[node]
    }

    #[inline]
    pub fn coords(&self, node: usize) -> &[f64] {
        let d = self.real_dim();
        &self.coords[node * d..(node + 1) * d]
    }

    pub fn class(&self, node: usize) -> PointClass {
        self.class[self.nodes[node]]
    }

    pub fn count(&self, class: PointClass) -> usize {
        self.class.iter().filter(|&&c| c == class).count()
    }

    /// Link of a node in direction `dir = 2 * axis + side`.
    #[inline]
    pub fn link(&self, node: usize, dir: usize) -> Link {
        self.links[node * 2 * self.real_dim() + dir]
    }

    #[inline]
    pub fn arm(&self, node: usize, dir: usize) -> f64 {
        self.arms[node * 2 * self.real_dim() + dir]
    }

    pub fn feet(&self) -> &[Foot] {
        &self.feet
    }

    pub fn foot(&self, idx: usize) -> &Foot {
        &self.feet[idx]
    }

    /// Node reached from `node` by lattice offsets `(axis_i, s_i)` and
    /// `(axis_j, s_j)`, if it is not exterior.
    #[inline]
    pub fn diagonal_neighbor(&self, node: usize, i: usize, si: isize, j: usize, sj: isize) -> Option<usize> {
        let idx = self.nodes[node] as isize + si * self.strides[i] as isize + sj * self.strides[j] as isize;
        if idx < 0 || idx as usize >= self.node_of.len() {
            return None;
        }
        self.node_at(idx as usize)
    }

    /// Writes the point table: lattice index, coordinates, class and arms.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let dim = self.real_dim();
        let mut header = vec!["index".to_string()];
        header.extend((0..dim).map(axis_name));
        header.push("class".into());
        for i in 0..dim {
            header.push(format!("arm_minus_{}", axis_name(i)));
            header.push(format!("arm_plus_{}", axis_name(i)));
        }
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for node in 0..self.num_nodes() {
            let mut row = vec![self.nodes[node].to_string()];
            row.extend(self.coords(node).iter().map(|v| format!("{v:.12e}")));
            row.push(self.class(node).as_str().into());
            for d in 0..2 * dim {
                row.push(format!("{:.12e}", self.arm(node, d)));
            }
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// `x1, y1, x2, y2, ...`
pub fn axis_name(i: usize) -> String {
    format!("{}{}", if i.is_multiple_of(2) { 'x' } else { 'y' }, i / 2 + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ball(n: usize) -> Domain {
        make_domain(DomainKind::Ball, n).unwrap()
    }

    #[test]
    fn ball_defining_function() {
        let d = ball(1);
        assert_eq!(d.rho(&[0.0, 0.0]), -1.0);
        assert_abs_diff_eq!(d.rho(&[0.6, 0.8]), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn ellipsoid_is_normalized() {
        let d = make_domain(DomainKind::Ellipsoid(vec![1.0, 4.0]), 2).unwrap();
        assert_eq!(d.rho(&[0.0; 4]), -1.0);
        assert!(make_domain(DomainKind::Ellipsoid(vec![1.0, -4.0]), 2).is_err());
        assert!(make_domain(DomainKind::Ellipsoid(vec![1.0]), 2).is_err());
    }

    #[test]
    fn custom_with_pluriharmonic_term_is_accepted() {
        // |z|^2 - 1 + 0.1 Re(z^2); Re(z^2) = x^2 - y^2 has zero complex Hessian
        let custom = CustomDomain {
            name: "perturbed".into(),
            rho: Arc::new(|x: &[f64]| x[0] * x[0] + x[1] * x[1] - 1.0 + 0.1 * (x[0] * x[0] - x[1] * x[1])),
            rho_grad: Arc::new(|x: &[f64]| vec![2.2 * x[0], 1.8 * x[1]]),
            lo: vec![-1.1, -1.1],
            hi: vec![1.1, 1.1],
        };
        let d = make_domain(DomainKind::Custom(custom), 1).unwrap();
        assert_abs_diff_eq!(d.rho(&[0.0, 0.0]), -1.0, epsilon = 1e-12);
        let m = d.rho_complex_hessian(&[0.3, -0.2]).min_eigenvalue();
        assert_abs_diff_eq!(m, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn custom_non_psh_is_rejected_with_point() {
        // complex Hessian of x^2 - y^2 vanishes
        let custom = CustomDomain {
            name: "saddle".into(),
            rho: Arc::new(|x: &[f64]| x[0] * x[0] - x[1] * x[1] - 1.0),
            rho_grad: Arc::new(|x: &[f64]| vec![2.0 * x[0], -2.0 * x[1]]),
            lo: vec![-1.1, -1.1],
            hi: vec![1.1, 1.1],
        };
        match make_domain(DomainKind::Custom(custom), 1) {
            Err(Error::NotPlurisubharmonic { point, min_eig }) => {
                assert_eq!(point.len(), 2);
                assert!(min_eig <= 0.0);
            }
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn ball_h_half_interior_points() {
        let d = ball(1);
        let g = classify_grid(&d, 0.5).unwrap();
        for node in 0..g.num_nodes() {
            let x = g.coords(node);
            assert!(x[0] * x[0] + x[1] * x[1] < 1.0);
        }
        // |z| < 1 on the 0.5-lattice: 9 points
        assert_eq!(g.num_nodes(), 9);
        let origin = (0..g.num_nodes())
            .find(|&k| g.coords(k).iter().all(|v| *v == 0.0))
            .unwrap();
        assert_eq!(g.class(origin), PointClass::Interior);
    }

    #[test]
    fn east_arm_matches_bisection_oracle() {
        let d = ball(1);
        let g = classify_grid(&d, 0.25).unwrap();
        let node = (0..g.num_nodes())
            .find(|&k| {
                let x = g.coords(k);
                (x[0] - 0.75).abs() < 1e-12 && (x[1] - 0.5).abs() < 1e-12
            })
            .unwrap();
        assert_eq!(g.class(node), PointClass::BoundaryAdjacent);
        let theta = g.arm(node, 1);
        assert!(theta < 1.0);
        // independent root: x = sqrt(1 - 0.25)
        let oracle = ((1.0f64 - 0.25).sqrt() - 0.75) / 0.25;
        assert_abs_diff_eq!(theta, oracle, epsilon = 1e-12);
    }

    #[test]
    fn interior_count_matches_brute_force_scan_n2() {
        let d = ball(2);
        let h = 0.25;
        let g = classify_grid(&d, h).unwrap();
        let mut count = 0;
        let r = 5i64;
        for a in -r..=r {
            for b in -r..=r {
                for c in -r..=r {
                    for e in -r..=r {
                        let s = [a, b, c, e].iter().map(|&k| (k as f64 * h).powi(2)).sum::<f64>();
                        if s < 1.0 {
                            count += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(g.num_nodes(), count);
    }

    #[test]
    fn grid_invariants_hold() {
        for n in [1, 2] {
            let d = make_domain(DomainKind::Ellipsoid(vec![1.0, 2.0][..n].to_vec()), n).unwrap();
            let g = classify_grid(&d, if n == 1 { 0.1 } else { 0.25 }).unwrap();
            let dim = 2 * n;
            for node in 0..g.num_nodes() {
                assert!(d.rho(g.coords(node)) < 0.0);
                for dir in 0..2 * dim {
                    let a = g.arm(node, dir);
                    assert!(a > 0.0 && a <= 1.0);
                    if g.class(node) == PointClass::Interior {
                        assert!(matches!(g.link(node, dir), Link::Node(_)));
                    }
                }
            }
            for f in g.feet() {
                assert!(d.rho(&f.coords).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        let d = ball(2);
        match classify_grid_with_budget(&d, 0.05, 1000) {
            Err(Error::BudgetExceeded { required, budget }) => {
                assert!(required > budget);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn refinement_growth_factor() {
        for n in [1usize, 2] {
            let d = ball(n);
            let (h0, h1) = if n == 1 { (0.1, 0.05) } else { (0.25, 0.125) };
            // points of the open domain, i.e. all non-exterior lattice points
            let a = classify_grid(&d, h0).unwrap().num_nodes() as f64;
            let b = classify_grid(&d, h1).unwrap().num_nodes() as f64;
            let f = 2f64.powi(2 * n as i32);
            assert!(b / a >= 0.8 * f && b / a <= 1.2 * f, "n={n}: ratio {}", b / a);
        }
    }

    #[test]
    fn distance_examples() {
        let d = ball(1);
        let (dist, _) = boundary_distance(&d, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(dist, 1.0);
        let (dist, foot) = boundary_distance(&d, &[0.5, 0.0]).unwrap();
        assert_abs_diff_eq!(dist, 0.5);
        assert_abs_diff_eq!(foot[0], 1.0);
    }

    #[test]
    fn ellipsoid_distance_matches_dense_sampling() {
        let d = make_domain(DomainKind::Ellipsoid(vec![1.0, 4.0]), 2).unwrap();
        let p = [0.3, 0.0, 0.1, 0.0];
        let (dist, foot) = boundary_distance(&d, &p).unwrap();
        assert!(d.rho(&foot).abs() <= 1e-10);
        // dense sampling of the slice ellipse x1^2 + 4 x2^2 = 1
        let k = 2_000_000;
        let oracle = (0..k)
            .map(|i| {
                let th = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                let (a, b) = (th.cos(), 0.5 * th.sin());
                ((a - p[0]).powi(2) + (b - p[2]).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(dist, oracle, epsilon = 1e-6);
    }

    #[test]
    fn distance_bounded_by_axis_arms() {
        let d = make_domain(DomainKind::Ellipsoid(vec![1.0, 4.0]), 2).unwrap();
        let g = classify_grid(&d, 0.25).unwrap();
        for node in 0..g.num_nodes() {
            if g.class(node) != PointClass::BoundaryAdjacent {
                continue;
            }
            let (dist, _) = boundary_distance(&d, g.coords(node)).unwrap();
            let min_arm = (0..8).map(|k| g.arm(node, k)).fold(f64::INFINITY, f64::min);
            assert!(dist <= min_arm * g.h() + 1e-10);
        }
    }
}
