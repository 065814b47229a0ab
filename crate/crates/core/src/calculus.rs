//! Grid fields and discrete differential operators.
//!
//! Pure second derivatives use Shortley-Weller stencils whose arms end on the
//! boundary feet. Mixed derivatives use the centered cross where the full
//! stencil is available and one-sided quadrant differences elsewhere; both are
//! exact on quadratics.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{Grid, Link};
use crate::hermitian::{HermitianForm, MAX_DIM};
use crate::linsolve::{bicgstab, CsrMatrix};

const MAX_REAL: usize = 2 * MAX_DIM;
const LAPLACE_MAX_ITER: usize = 20_000;

/// Real values on the nodes and boundary feet of a grid at one time.
#[derive(Clone, Debug)]
pub struct GridField {
    grid: Arc<Grid>,
    pub values: Vec<f64>,
    pub feet: Vec<f64>,
    pub time: f64,
}

impl GridField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>, feet: Vec<f64>, time: f64) -> Result<Self> {
        if values.len() != grid.num_nodes() || feet.len() != grid.num_feet() {
            return Err(Error::InvalidInput(format!(
                "field has {} node and {} foot values, grid has {} and {}",
                values.len(),
                feet.len(),
                grid.num_nodes(),
                grid.num_feet()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at {:?}",
                grid.coords(k)
            )));
        }
        Ok(Self {
            grid,
            values,
            feet,
            time,
        })
    }

    /// Samples a function at every node and foot.
    pub fn from_fn(grid: Arc<Grid>, time: f64, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.num_nodes()).map(|k| f(grid.coords(k))).collect();
        let feet = grid.feet().iter().map(|ft| f(&ft.coords)).collect();
        Self {
            grid,
            values,
            feet,
            time,
        }
    }

    pub fn constant(grid: Arc<Grid>, time: f64, c: f64) -> Self {
        Self::from_fn(grid, time, |_| c)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// A field on the same grid and time with new values.
    pub fn with_values(&self, values: Vec<f64>, feet: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        assert_eq!(feet.len(), self.feet.len());
        Self {
            grid: self.grid.clone(),
            values,
            feet,
            time: self.time,
        }
    }

    #[inline]
    pub fn at(&self, link: Link) -> f64 {
        match link {
            Link::Node(k) => self.values[k as usize],
            Link::Foot(k) => self.feet[k as usize],
        }
    }

    /// Max over nodes and feet of `|self - other|`.
    pub fn max_abs_diff(&self, other: &GridField) -> f64 {
        let a = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let b = self
            .feet
            .iter()
            .zip(&other.feet)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        a.max(b)
    }

    /// Max over nodes and feet of `|self - f|`.
    pub fn max_error(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let g = &self.grid;
        let a = (0..g.num_nodes())
            .map(|k| (self.values[k] - f(g.coords(k))).abs())
            .fold(0.0, f64::max);
        let b = g
            .feet()
            .iter()
            .zip(&self.feet)
            .map(|(ft, v)| (v - f(&ft.coords)).abs())
            .fold(0.0, f64::max);
        a.max(b)
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .chain(&self.feet)
            .map(|v| v.abs())
            .fold(0.0, f64::max)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().chain(&self.feet).copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().chain(&self.feet).copied().fold(f64::INFINITY, f64::min)
    }
}

/// A linear combination of node and foot values.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    len: usize,
    items: [(Link, f64); 9],
}

impl Default for Stencil {
    fn default() -> Self {
        Self {
            len: 0,
            items: [(Link::Node(0), 0.0); 9],
        }
    }
}

impl Stencil {
    #[inline]
    pub fn push(&mut self, link: Link, c: f64) {
        for item in &mut self.items[..self.len] {
            if item.0 == link {
                item.1 += c;
                return;
            }
        }
        self.items[self.len] = (link, c);
        self.len += 1;
    }

    pub fn items(&self) -> &[(Link, f64)] {
        &self.items[..self.len]
    }

    #[inline]
    pub fn apply(&self, field: &GridField) -> f64 {
        self.items().iter().map(|&(l, c)| c * field.at(l)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MixedRule {
    Centered,
    /// Bit `2 * (si > 0) + (sj > 0)` set for every usable quadrant.
    Quadrants(u8),
    /// Copied from a neighbouring node.
    Donor(u32),
    Zero,
}

/// Per-grid stencil tables.
#[derive(Clone, Debug)]
pub struct Operators {
    grid: Arc<Grid>,
    pairs: Vec<(usize, usize)>,
    mixed: Vec<MixedRule>,
    one_sided: usize,
    copied: usize,
}

/// How mixed derivatives were formed, for diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MixedStats {
    pub centered: usize,
    pub one_sided: usize,
    pub copied: usize,
}

impl Operators {
    pub fn new(grid: Arc<Grid>) -> Self {
        let dim = grid.real_dim();
        let pairs: Vec<(usize, usize)> = (0..dim)
            .flat_map(|i| (i + 1..dim).map(move |j| (i, j)))
            .collect();
        let np = pairs.len();
        let nn = grid.num_nodes();
        let mut mixed = vec![MixedRule::Zero; nn * np];
        let mut one_sided = 0;
        for node in 0..nn {
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let mut mask = 0u8;
                for (bit, (si, sj)) in [(-1isize, -1isize), (-1, 1), (1, -1), (1, 1)].into_iter().enumerate() {
                    let li = grid.link(node, 2 * i + usize::from(si > 0));
                    let lj = grid.link(node, 2 * j + usize::from(sj > 0));
                    if matches!(li, Link::Node(_))
                        && matches!(lj, Link::Node(_))
                        && grid.diagonal_neighbor(node, i, si, j, sj).is_some()
                    {
                        mask |= 1 << bit;
                    }
                }
                mixed[node * np + p] = if mask == 0b1111 {
                    MixedRule::Centered
                } else if mask != 0 {
                    one_sided += 1;
                    MixedRule::Quadrants(mask)
                } else {
                    MixedRule::Zero
                };
            }
        }
        // nodes with no usable quadrant borrow from an axis neighbour that has one
        let mut copied = 0;
        loop {
            let mut changed = false;
            for node in 0..nn {
                for p in 0..np {
                    if mixed[node * np + p] != MixedRule::Zero {
                        continue;
                    }
                    for dir in 0..2 * dim {
                        if let Link::Node(nb) = grid.link(node, dir) {
                            let rule = mixed[nb as usize * np + p];
                            if matches!(rule, MixedRule::Centered | MixedRule::Quadrants(_)) {
                                mixed[node * np + p] = MixedRule::Donor(nb);
                                copied += 1;
                                changed = true;
                                break;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        Self {
            grid,
            pairs,
            mixed,
            one_sided,
            copied,
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn mixed_stats(&self) -> MixedStats {
        let total = self.mixed.len();
        let centered = self.mixed.iter().filter(|r| **r == MixedRule::Centered).count();
        MixedStats {
            centered,
            one_sided: self.one_sided,
            copied: self.copied.min(total - centered),
        }
    }

    /// Whether every mixed derivative at `node` uses the centered cross.
    pub fn is_centered(&self, node: usize) -> bool {
        let np = self.pairs.len();
        self.mixed[node * np..(node + 1) * np]
            .iter()
            .all(|r| *r == MixedRule::Centered)
    }

    /// Stencil of `d/dx_i` at a node: the three-point formula on the (possibly
    /// shortened) arms, exact on quadratics.
    pub fn first(&self, node: usize, i: usize) -> Stencil {
        let g = &*self.grid;
        let h = g.h();
        let (a, b) = (g.arm(node, 2 * i), g.arm(node, 2 * i + 1));
        let mut s = Stencil::default();
        s.push(g.link(node, 2 * i + 1), a / (b * (a + b) * h));
        s.push(g.link(node, 2 * i), -b / (a * (a + b) * h));
        s.push(Link::Node(node as u32), (b - a) / (a * b * h));
        s
    }

    /// Stencil of `d^2/dx_i dx_j` at a node.
    pub fn second(&self, node: usize, i: usize, j: usize) -> Stencil {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        if i == j {
            return self.pure(node, i);
        }
        let np = self.pairs.len();
        let p = self.pair_index(i, j);
        match self.mixed[node * np + p] {
            MixedRule::Donor(nb) => self.direct_mixed(nb as usize, i, j, self.mixed[nb as usize * np + p]),
            rule => self.direct_mixed(node, i, j, rule),
        }
    }

    fn pair_index(&self, i: usize, j: usize) -> usize {
        let dim = self.grid.real_dim();
        // row-major index into the strict upper triangle
        i * (2 * dim - i - 1) / 2 + (j - i - 1)
    }

    fn pure(&self, node: usize, i: usize) -> Stencil {
        let g = &*self.grid;
        let h2 = g.h() * g.h();
        let (a, b) = (g.arm(node, 2 * i), g.arm(node, 2 * i + 1));
        let mut s = Stencil::default();
        s.push(g.link(node, 2 * i), 2.0 / (a * (a + b) * h2));
        s.push(Link::Node(node as u32), -2.0 / (a * b * h2));
        s.push(g.link(node, 2 * i + 1), 2.0 / (b * (a + b) * h2));
        s
    }

    fn direct_mixed(&self, node: usize, i: usize, j: usize, rule: MixedRule) -> Stencil {
        let g = &*self.grid;
        let h2 = g.h() * g.h();
        let mut s = Stencil::default();
        let quads = match rule {
            MixedRule::Centered => {
                for (si, sj) in [(-1isize, -1isize), (-1, 1), (1, -1), (1, 1)] {
                    let d = g.diagonal_neighbor(node, i, si, j, sj).expect("centered stencil");
                    s.push(Link::Node(d as u32), (si * sj) as f64 / (4.0 * h2));
                }
                return s;
            }
            MixedRule::Quadrants(mask) => mask,
            MixedRule::Donor(_) | MixedRule::Zero => return s,
        };
        let count = quads.count_ones() as f64;
        for (bit, (si, sj)) in [(-1isize, -1isize), (-1, 1), (1, -1), (1, 1)].into_iter().enumerate() {
            if quads & (1 << bit) == 0 {
                continue;
            }
            let w = (si * sj) as f64 / (h2 * count);
            let d = g.diagonal_neighbor(node, i, si, j, sj).expect("quadrant stencil");
            s.push(Link::Node(d as u32), w);
            s.push(g.link(node, 2 * i + usize::from(si > 0)), -w);
            s.push(g.link(node, 2 * j + usize::from(sj > 0)), -w);
            s.push(Link::Node(node as u32), w);
        }
        s
    }

    /// Real Hessian of a field at a node, `d[i][j]`.
    pub fn real_hessian(&self, field: &GridField, node: usize) -> [[f64; MAX_REAL]; MAX_REAL] {
        let dim = self.grid.real_dim();
        let mut d = [[0.0; MAX_REAL]; MAX_REAL];
        for i in 0..dim {
            for j in i..dim {
                let v = self.second(node, i, j).apply(field);
                d[i][j] = v;
                d[j][i] = v;
            }
        }
        d
    }

    /// Real Hessian together with each entry's weight on the node itself.
    pub fn real_hessian_with_center(
        &self,
        field: &GridField,
        node: usize,
    ) -> ([[f64; MAX_REAL]; MAX_REAL], [[f64; MAX_REAL]; MAX_REAL]) {
        let dim = self.grid.real_dim();
        let me = Link::Node(node as u32);
        let mut d = [[0.0; MAX_REAL]; MAX_REAL];
        let mut c = [[0.0; MAX_REAL]; MAX_REAL];
        for i in 0..dim {
            for j in i..dim {
                let s = self.second(node, i, j);
                let v = s.apply(field);
                let w = s.items().iter().find(|e| e.0 == me).map_or(0.0, |e| e.1);
                d[i][j] = v;
                d[j][i] = v;
                c[i][j] = w;
                c[j][i] = w;
            }
        }
        (d, c)
    }

    /// Complex Hessian `(u_{a b-bar})` at a node.
    pub fn complex_hessian_at(&self, field: &GridField, node: usize) -> HermitianForm {
        let d = self.real_hessian(field, node);
        HermitianForm::from_real_hessian(self.grid.n(), |i, j| d[i][j])
    }

    /// Gradient of a field at a node.
    pub fn gradient_at(&self, field: &GridField, node: usize) -> [f64; MAX_REAL] {
        let mut g = [0.0; MAX_REAL];
        for (i, gi) in g.iter_mut().enumerate().take(self.grid.real_dim()) {
            *gi = self.first(node, i).apply(field);
        }
        g
    }

    /// Stencil of `sum_ij a[i][j] d^2/dx_i dx_j` at a node, for symmetric `a`.
    pub fn linear_combination(&self, node: usize, a: &[[f64; MAX_REAL]; MAX_REAL], out: &mut Vec<(Link, f64)>) {
        out.clear();
        let dim = self.grid.real_dim();
        let mut add = |s: Stencil, w: f64| {
            if w == 0.0 {
                return;
            }
            for &(l, c) in s.items() {
                match out.iter_mut().find(|e| e.0 == l) {
                    Some(e) => e.1 += w * c,
                    None => out.push((l, w * c)),
                }
            }
        };
        for i in 0..dim {
            add(self.pure(node, i), a[i][i]);
            for j in i + 1..dim {
                add(self.second(node, i, j), 2.0 * a[i][j]);
            }
        }
    }
}

/// Gradient and real Laplacian at every node.
#[derive(Clone, Debug)]
pub struct FirstOrder {
    pub gradient: Vec<[f64; MAX_REAL]>,
    pub laplacian: Vec<f64>,
}

impl FirstOrder {
    pub fn gradient_norm(&self, node: usize) -> f64 {
        self.gradient[node].iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn first_order_ops(ops: &Operators, field: &GridField) -> FirstOrder {
    let g = ops.grid();
    let dim = g.real_dim();
    let mut gradient = Vec::with_capacity(g.num_nodes());
    let mut laplacian = Vec::with_capacity(g.num_nodes());
    for node in 0..g.num_nodes() {
        gradient.push(ops.gradient_at(field, node));
        laplacian.push((0..dim).map(|i| ops.pure(node, i).apply(field)).sum());
    }
    FirstOrder {
        gradient,
        laplacian,
    }
}

/// Complex Hessian at every node.
pub fn complex_hessian(ops: &Operators, field: &GridField) -> Vec<HermitianForm> {
    (0..ops.grid().num_nodes())
        .map(|node| ops.complex_hessian_at(field, node))
        .collect()
}

/// Real coefficients `a` with `delta log det H = sum_ij a[i][j] delta D_ij`
/// for a perturbation of the real Hessian `D`.
pub fn coefficient_matrix(h: &HermitianForm) -> Result<[[f64; MAX_REAL]; MAX_REAL]> {
    let n = h.dim();
    let g = h.inverse_pd()?;
    let mut a = [[0.0; MAX_REAL]; MAX_REAL];
    for al in 0..n {
        for be in 0..n {
            let gba = g.get(be, al);
            let (xa, ya, xb, yb) = (2 * al, 2 * al + 1, 2 * be, 2 * be + 1);
            a[xa][xb] += 0.25 * gba.re;
            a[ya][yb] += 0.25 * gba.re;
            a[xa][yb] -= 0.25 * gba.im;
            a[ya][xb] += 0.25 * gba.im;
        }
    }
    let dim = 2 * n;
    for i in 0..dim {
        for j in i + 1..dim {
            let s = 0.5 * (a[i][j] + a[j][i]);
            a[i][j] = s;
            a[j][i] = s;
        }
    }
    Ok(a)
}

/// Discrete harmonic extension of given foot values, solved to a max-norm
/// residual of `tol`.
pub fn harmonic_extension(ops: &Operators, feet: Vec<f64>, t: f64, tol: f64) -> Result<GridField> {
    let grid = ops.grid();
    let n_nodes = grid.num_nodes();
    let dim = grid.real_dim();
    let mut a = CsrMatrix::with_capacity(n_nodes, n_nodes * (2 * dim + 1));
    let mut b = vec![0.0; n_nodes];
    let mut row = Vec::with_capacity(2 * dim + 1);
    for (k, bk) in b.iter_mut().enumerate() {
        row.clear();
        for i in 0..dim {
            for &(l, c) in ops.second(k, i, i).items() {
                match l {
                    Link::Node(j) => row.push((j as usize, c)),
                    Link::Foot(f) => *bk -= c * feet[f as usize],
                }
            }
        }
        a.push_row(&row);
    }
    // a harmonic function lies between the extreme boundary values
    let mean = feet.iter().sum::<f64>() / feet.len().max(1) as f64;
    let mut x = vec![mean; n_nodes];
    bicgstab(&a, &b, &mut x, tol, LAPLACE_MAX_ITER)?;
    GridField::new(grid.clone(), x, feet, t)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{classify_grid, make_domain, DomainKind};
    use approx::assert_abs_diff_eq;

    fn setup(n: usize, h: f64) -> Operators {
        let d = make_domain(DomainKind::Ball, n).unwrap();
        Operators::new(Arc::new(classify_grid(&d, h).unwrap()))
    }

    fn norm2(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn constants_have_no_derivatives() {
        let ops = setup(1, 0.1);
        let u = GridField::constant(ops.grid().clone(), 0.0, 3.0);
        let fo = first_order_ops(&ops, &u);
        for k in 0..ops.grid().num_nodes() {
            assert!(fo.laplacian[k].abs() < 1e-9);
            assert!(fo.gradient_norm(k) < 1e-9);
        }
    }

    #[test]
    fn quadratics_are_exact() {
        for (n, h) in [(1, 0.1), (2, 0.25)] {
            let ops = setup(n, h);
            let q = |x: &[f64]| {
                norm2(x) + 0.3 * x[0] * x[1] - 0.7 * x[1] * x[1] + 0.2 * x[0] + if x.len() > 2 { 0.4 * x[0] * x[3] - x[2] * x[3] } else { 0.0 }
            };
            let u = GridField::from_fn(ops.grid().clone(), 0.0, q);
            let fo = first_order_ops(&ops, &u);
            let g = ops.grid();
            for k in 0..g.num_nodes() {
                let x = g.coords(k);
                let lap = if n == 1 { 2.0 * 2.0 - 1.4 } else { 2.0 * 4.0 - 1.4 };
                assert_abs_diff_eq!(fo.laplacian[k], lap, epsilon = 1e-9);
                let gx0 = 2.0 * x[0] + 0.3 * x[1] + 0.2 + if n == 2 { 0.4 * x[3] } else { 0.0 };
                assert_abs_diff_eq!(fo.gradient[k][0], gx0, epsilon = 1e-10);
                let d = ops.real_hessian(&u, k);
                assert_abs_diff_eq!(d[0][1], 0.3, epsilon = 1e-9);
                if n == 2 {
                    assert_abs_diff_eq!(d[2][3], -1.0, epsilon = 1e-9);
                    assert_abs_diff_eq!(d[0][3], 0.4, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn complex_hessian_of_norm_squared_is_identity() {
        for (n, h) in [(1, 0.1), (2, 0.25)] {
            let ops = setup(n, h);
            let u = GridField::from_fn(ops.grid().clone(), 0.0, norm2);
            for hk in complex_hessian(&ops, &u) {
                let diff = hk.add(&HermitianForm::identity(n).scale(-1.0));
                assert!(diff.eigenvalues()[..n].iter().all(|e| e.abs() < 1e-9));
                assert_eq!(hk.hermitian_defect(), 0.0);
            }
        }
    }

    #[test]
    fn pluriharmonic_has_zero_complex_hessian() {
        let ops = setup(1, 0.1);
        let u = GridField::from_fn(ops.grid().clone(), 0.0, |x| x[0] * x[0] - x[1] * x[1]);
        for hk in complex_hessian(&ops, &u) {
            assert!(hk.get(0, 0).norm() < 1e-9);
        }
    }

    #[test]
    fn quartic_hessian_converges_at_second_order() {
        // u = |z|^4 has u_{z z-bar} = 4 |z|^2, equal to 1 at z = 0.5
        let mut errs = Vec::new();
        for h in [0.1, 0.05, 0.025] {
            let ops = setup(1, h);
            let u = GridField::from_fn(ops.grid().clone(), 0.0, |x| norm2(x).powi(2));
            let g = ops.grid();
            let k = (0..g.num_nodes())
                .find(|&k| (g.coords(k)[0] - 0.5).abs() < 1e-12 && g.coords(k)[1].abs() < 1e-12)
                .unwrap();
            errs.push((ops.complex_hessian_at(&u, k).get(0, 0).re - 1.0).abs());
        }
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() > 1.9, "{errs:?}");
        }
    }

    #[test]
    fn gradient_order_on_smooth_function() {
        let mut errs = Vec::new();
        for h in [0.1, 0.05, 0.025] {
            let ops = setup(1, h);
            let u = GridField::from_fn(ops.grid().clone(), 0.0, |x| x[0].sin() * x[1]);
            let fo = first_order_ops(&ops, &u);
            let g = ops.grid();
            let e = (0..g.num_nodes())
                .map(|k| {
                    let x = g.coords(k);
                    let ex = [x[0].cos() * x[1], x[0].sin()];
                    (fo.gradient[k][0] - ex[0]).abs().max((fo.gradient[k][1] - ex[1]).abs())
                })
                .fold(0.0, f64::max);
            errs.push(e);
        }
        let order = (errs[1] / errs[2]).log2();
        assert!(order >= 1.7, "{errs:?}");
    }

    #[test]
    fn coefficient_matrix_matches_finite_difference_of_log_det() {
        let n = 2;
        let d0 = [
            [2.0, 0.1, 0.3, -0.2],
            [0.1, 1.5, 0.05, 0.4],
            [0.3, 0.05, 2.5, 0.0],
            [-0.2, 0.4, 0.0, 1.8],
        ];
        let ld = |d: &[[f64; 4]; 4]| HermitianForm::from_real_hessian(n, |i, j| d[i][j]).log_det_pd().unwrap();
        let a = coefficient_matrix(&HermitianForm::from_real_hessian(n, |i, j| d0[i][j])).unwrap();
        let eta = 1e-6;
        for i in 0..4 {
            for j in i..4 {
                let mut dp = d0;
                let mut dm = d0;
                dp[i][j] += eta;
                dm[i][j] -= eta;
                if i != j {
                    dp[j][i] += eta;
                    dm[j][i] -= eta;
                }
                let fd = (ld(&dp) - ld(&dm)) / (2.0 * eta);
                let lin = if i == j { a[i][i] } else { 2.0 * a[i][j] };
                assert_abs_diff_eq!(fd, lin, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn linear_combination_reproduces_operator() {
        let ops = setup(2, 0.25);
        let u = GridField::from_fn(ops.grid().clone(), 0.0, |x| norm2(x).powi(2) + x[0] * x[3]);
        let mut a = [[0.0; MAX_REAL]; MAX_REAL];
        for i in 0..4 {
            for j in 0..4 {
                a[i][j] = if i == j { 1.0 + i as f64 } else { 0.1 * (i + j) as f64 };
            }
        }
        let mut st = Vec::new();
        for k in 0..ops.grid().num_nodes() {
            ops.linear_combination(k, &a, &mut st);
            let via_stencil: f64 = st.iter().map(|&(l, c)| c * u.at(l)).sum();
            let d = ops.real_hessian(&u, k);
            let direct: f64 = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| a[i][j] * d[i][j]).sum();
            assert_abs_diff_eq!(via_stencil, direct, epsilon = 1e-8 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn mixed_fallbacks_are_reported() {
        let ops = setup(2, 0.25);
        let s = ops.mixed_stats();
        assert!(s.centered > 0);
        assert!(s.one_sided > 0);
    }
}
