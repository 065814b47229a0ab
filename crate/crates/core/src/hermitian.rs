//! Dense Hermitian kernels for the small (n <= 3) complex Hessians that appear
//! at every grid point.
//!
//! Everything here works on fixed-size storage so the per-point hot loops in
//! the flow never allocate.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Largest complex dimension supported by the fixed-size kernels.
pub const MAX_DIM: usize = 3;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// An n x n complex Hermitian matrix, `entries[a][b] = H_{a b-bar}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HermitianForm {
    n: usize,
    entries: [[Complex64; MAX_DIM]; MAX_DIM],
}

/// Lower Cholesky factor `H = L L*` with a real positive diagonal.
#[derive(Clone, Copy, Debug)]
pub struct Cholesky {
    n: usize,
    l: [[Complex64; MAX_DIM]; MAX_DIM],
}

impl HermitianForm {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&n), "dimension {n} out of range");
        Self {
            n,
            entries: [[ZERO; MAX_DIM]; MAX_DIM],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, c: f64) -> Self {
        let mut h = Self::zeros(n);
        for a in 0..n {
            h.entries[a][a] = Complex64::new(c, 0.0);
        }
        h
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut h = Self::zeros(diag.len());
        for (a, &d) in diag.iter().enumerate() {
            h.entries[a][a] = Complex64::new(d, 0.0);
        }
        h
    }

    /// Builds a form from full rows, rejecting matrices that are not
    /// conjugate-symmetric to 1e-12.
    pub fn from_rows(rows: &[Vec<Complex64>]) -> Result<Self> {
        let n = rows.len();
        if !(1..=MAX_DIM).contains(&n) || rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidInput(format!(
                "expected a square matrix of size 1..={MAX_DIM}"
            )));
        }
        let mut h = Self::zeros(n);
        for a in 0..n {
            for b in 0..n {
                if (rows[a][b] - rows[b][a].conj()).norm() > 1e-12 {
                    return Err(Error::InvalidInput(format!(
                        "matrix is not Hermitian at ({a}, {b})"
                    )));
                }
            }
        }
        for a in 0..n {
            h.entries[a][a] = Complex64::new(rows[a][a].re, 0.0);
            for b in a + 1..n {
                h.set(a, b, rows[a][b]);
            }
        }
        Ok(h)
    }

    /// Assembles `H_{ab} = 1/4 [(D_{x_a x_b} + D_{y_a y_b}) + i (D_{x_a y_b} - D_{y_a x_b})]`
    /// from a real symmetric Hessian `d(i, j)` over coordinates ordered
    /// `(x_1, y_1, ..., x_n, y_n)`.
    pub fn from_real_hessian(n: usize, d: impl Fn(usize, usize) -> f64) -> Self {
        let mut h = Self::zeros(n);
        for a in 0..n {
            let (xa, ya) = (2 * a, 2 * a + 1);
            h.entries[a][a] = Complex64::new(0.25 * (d(xa, xa) + d(ya, ya)), 0.0);
            for b in a + 1..n {
                let (xb, yb) = (2 * b, 2 * b + 1);
                let re = 0.25 * (d(xa, xb) + d(ya, yb));
                let im = 0.25 * (d(xa, yb) - d(ya, xb));
                h.set(a, b, Complex64::new(re, im));
            }
        }
        h
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> Complex64 {
        self.entries[a][b]
    }

    /// Sets `H[a][b] = v` and `H[b][a] = conj(v)`; diagonal imaginary parts are dropped.
    #[inline]
    pub fn set(&mut self, a: usize, b: usize, v: Complex64) {
        if a == b {
            self.entries[a][a] = Complex64::new(v.re, 0.0);
        } else {
            self.entries[a][b] = v;
            self.entries[b][a] = v.conj();
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = *self;
        for a in 0..self.n {
            for b in 0..self.n {
                out.entries[a][b] *= c;
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.n, other.n);
        let mut out = *self;
        for a in 0..self.n {
            for b in 0..self.n {
                out.entries[a][b] += other.entries[a][b];
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|a| self.entries[a][a].re).sum()
    }

    /// `tr(self * other)`, real for a pair of Hermitian matrices.
    pub fn trace_product(&self, other: &Self) -> f64 {
        let mut s = ZERO;
        for a in 0..self.n {
            for b in 0..self.n {
                s += self.entries[a][b] * other.entries[b][a];
            }
        }
        s.re
    }

    /// Frobenius norm of `H - H*`.
    pub fn hermitian_defect(&self) -> f64 {
        let mut s = 0.0;
        for a in 0..self.n {
            for b in 0..self.n {
                s += (self.entries[a][b] - self.entries[b][a].conj()).norm_sqr();
            }
        }
        s.sqrt()
    }

    /// Transposed copy (equal to the entrywise conjugate for Hermitian input).
    pub fn transpose(&self) -> Self {
        let mut out = *self;
        for a in 0..self.n {
            for b in 0..self.n {
                out.entries[a][b] = self.entries[b][a];
            }
        }
        out
    }

    /// Hermitian Cholesky with the pivot threshold `1e-13 * (1 + max diagonal)`.
    /// Returns the failing pivot index on breakdown.
    pub fn cholesky(&self) -> std::result::Result<Cholesky, usize> {
        let n = self.n;
        let max_diag = (0..n).map(|a| self.entries[a][a].re.abs()).fold(0.0, f64::max);
        let threshold = 1e-13 * (1.0 + max_diag);
        let mut l = [[ZERO; MAX_DIM]; MAX_DIM];
        for j in 0..n {
            let mut d = self.entries[j][j].re;
            for k in 0..j {
                d -= l[j][k].norm_sqr();
            }
            if !(d > threshold) {
                return Err(j);
            }
            let ljj = d.sqrt();
            l[j][j] = Complex64::new(ljj, 0.0);
            for i in j + 1..n {
                let mut s = self.entries[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k].conj();
                }
                l[i][j] = s / ljj;
            }
        }
        Ok(Cholesky { n, l })
    }

    pub fn is_positive_definite(&self) -> bool {
        self.cholesky().is_ok()
    }

    fn not_psh(&self) -> Error {
        Error::NotPlurisubharmonic {
            point: Vec::new(),
            min_eig: self.min_eigenvalue(),
        }
    }

    /// `log det H` on the positive-definite cone.
    pub fn log_det_pd(&self) -> Result<f64> {
        self.cholesky().map(|c| c.log_det()).map_err(|_| self.not_psh())
    }

    /// Inverse of a positive-definite form.
    pub fn inverse_pd(&self) -> Result<Self> {
        self.cholesky().map(|c| c.inverse()).map_err(|_| self.not_psh())
    }

    /// Eigenvalues in ascending order (only the first `dim()` entries are meaningful).
    ///
    /// Uses cyclic Jacobi on the real symmetric embedding `[[A, -B], [B, A]]` of
    /// `H = A + iB`, whose spectrum is that of `H` with every eigenvalue doubled.
    pub fn eigenvalues(&self) -> [f64; MAX_DIM] {
        let n = self.n;
        let mut out = [f64::NAN; MAX_DIM];
        match n {
            1 => {
                out[0] = self.entries[0][0].re;
                return out;
            }
            2 => {
                let (a, d) = (self.entries[0][0].re, self.entries[1][1].re);
                let mean = 0.5 * (a + d);
                let r = (0.5 * (a - d)).hypot(self.entries[0][1].norm());
                out[0] = mean - r;
                out[1] = mean + r;
                return out;
            }
            _ => {}
        }
        let m = 2 * n;
        let mut s = [[0.0f64; 2 * MAX_DIM]; 2 * MAX_DIM];
        for a in 0..n {
            for b in 0..n {
                let z = self.entries[a][b];
                s[a][b] = z.re;
                s[a + n][b + n] = z.re;
                s[a][b + n] = -z.im;
                s[a + n][b] = z.im;
            }
        }
        jacobi_symmetric(&mut s, m);
        let mut diag = [f64::INFINITY; 2 * MAX_DIM];
        for (i, v) in diag.iter_mut().enumerate().take(m) {
            *v = s[i][i];
        }
        diag.sort_by(f64::total_cmp);
        for a in 0..n {
            out[a] = 0.5 * (diag[2 * a] + diag[2 * a + 1]);
        }
        out
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues()[self.n - 1]
    }
}

impl Cholesky {
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|j| self.l[j][j].re.ln()).sum::<f64>()
    }

    pub fn det(&self) -> f64 {
        (0..self.n).map(|j| self.l[j][j].re.powi(2)).product()
    }

    /// Solves `H x = b`.
    pub fn solve(&self, b: &[Complex64]) -> [Complex64; MAX_DIM] {
        let n = self.n;
        let mut y = [ZERO; MAX_DIM];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i][k] * y[k];
            }
            y[i] = s / self.l[i][i];
        }
        let mut x = [ZERO; MAX_DIM];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k][i].conj() * x[k];
            }
            x[i] = s / self.l[i][i];
        }
        x
    }

    pub fn inverse(&self) -> HermitianForm {
        let n = self.n;
        let mut inv = HermitianForm::zeros(n);
        let mut e = [ZERO; MAX_DIM];
        for col in 0..n {
            e.iter_mut().for_each(|v| *v = ZERO);
            e[col] = Complex64::new(1.0, 0.0);
            let x = self.solve(&e[..n]);
            for row in 0..n {
                inv.entries[row][col] = x[row];
            }
        }
        // symmetrize away roundoff
        for a in 0..n {
            inv.entries[a][a] = Complex64::new(inv.entries[a][a].re, 0.0);
            for b in a + 1..n {
                let v = 0.5 * (inv.entries[a][b] + inv.entries[b][a].conj());
                inv.set(a, b, v);
            }
        }
        inv
    }
}

/// Cyclic Jacobi diagonalization of a real symmetric `m x m` block, in place.
fn jacobi_symmetric(s: &mut [[f64; 2 * MAX_DIM]; 2 * MAX_DIM], m: usize) {
    let scale: f64 = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| s[i][j] * s[i][j])
        .sum::<f64>()
        .sqrt();
    if scale == 0.0 {
        return;
    }
    for _sweep in 0..60 {
        let mut off = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                off += s[i][j] * s[i][j];
            }
        }
        if off.sqrt() <= 1e-17 * scale {
            return;
        }
        for p in 0..m {
            for q in p + 1..m {
                let apq = s[p][q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (s[q][q] - s[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..m {
                    let skp = s[k][p];
                    let skq = s[k][q];
                    s[k][p] = c * skp - sn * skq;
                    s[k][q] = sn * skp + c * skq;
                }
                for k in 0..m {
                    let spk = s[p][k];
                    let sqk = s[q][k];
                    s[p][k] = c * spk - sn * sqk;
                    s[q][k] = sn * spk + c * sqk;
                }
            }
        }
    }
}

/// `log det H` via Hermitian Cholesky.
pub fn log_det_pd(h: &HermitianForm) -> Result<f64> {
    h.log_det_pd()
}

/// The coefficients `u^{a b-bar}`: the transpose of the inverse of `H`, so that
/// `H * result^T = I`.
pub fn linearization_coeffs(h: &HermitianForm) -> Result<HermitianForm> {
    Ok(h.inverse_pd()?.transpose())
}

/// The three quantities of the trace inequality for positive forms
/// `n (det H1 / det H2)^{1/n} <= tr(H2^{-1} H1) <= n (det H1/det H2) tr(H1^{-1} H2)^{n-1}`.
#[derive(Clone, Copy, Debug)]
pub struct TraceTerms {
    pub lower: f64,
    pub middle: f64,
    pub upper: f64,
}

impl TraceTerms {
    pub fn holds(&self, rel_tol: f64) -> bool {
        self.lower <= self.middle * (1.0 + rel_tol) && self.middle <= self.upper * (1.0 + rel_tol)
    }
}

pub fn trace_terms(h1: &HermitianForm, h2: &HermitianForm) -> Result<TraceTerms> {
    if h1.dim() != h2.dim() {
        return Err(Error::InvalidInput("forms of different dimension".into()));
    }
    let n = h1.dim() as f64;
    let c1 = h1.cholesky().map_err(|_| h1.not_psh())?;
    let c2 = h2.cholesky().map_err(|_| h2.not_psh())?;
    let ratio = (c1.log_det() - c2.log_det()).exp();
    let middle = c2.inverse().trace_product(h1);
    let dual = c1.inverse().trace_product(h2);
    Ok(TraceTerms {
        lower: n * ratio.powf(1.0 / n),
        middle,
        upper: n * ratio * dual.powf(n - 1.0),
    })
}

/// Checks both trace inequalities at relative tolerance 1e-12.
pub fn trace_inequality_check(h1: &HermitianForm, h2: &HermitianForm) -> Result<bool> {
    Ok(trace_terms(h1, h2)?.holds(1e-12))
}
