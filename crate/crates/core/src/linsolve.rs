//! Sparse matrices and a Jacobi-preconditioned BiCGSTAB for the nonsymmetric
//! systems produced by Shortley-Weller stencils.

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Clone, Debug, Default)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    val: Vec<f64>,
}

impl CsrMatrix {
    pub fn with_capacity(n: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        Self {
            n,
            row_ptr,
            col: Vec::with_capacity(nnz),
            val: Vec::with_capacity(nnz),
        }
    }

    /// Appends the next row; duplicate columns are summed.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        let start = self.col.len();
        for &(c, v) in entries {
            match self.col[start..].iter().position(|&k| k as usize == c) {
                Some(p) => self.val[start + p] += v,
                None => {
                    self.col.push(c as u32);
                    self.val.push(v);
                }
            }
        }
        self.row_ptr.push(self.col.len());
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col[r.clone()].iter().map(|&c| c as usize).zip(self.val[r].iter().copied())
    }

    pub fn mul(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.rows()) {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.val[k] * x[self.col[k] as usize];
            }
            *yi = s;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|i| self.row(i).filter(|&(c, _)| c == i).map(|(_, v)| v).sum())
            .collect()
    }

    /// `b - A x`.
    pub fn residual(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.rows()];
        self.mul(x, &mut r);
        r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
        r
    }
}

#[derive(Clone, Debug)]
pub struct SolveStats {
    pub iterations: usize,
    /// Final max-norm residual of the true system.
    pub residual: f64,
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Solves `A x = b` to `max|b - A x| <= tol`, starting from `x`.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<SolveStats> {
    let n = b.len();
    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .map(|d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = a.residual(x, b);
    let mut history = vec![max_norm(&r)];
    if history[0] <= tol {
        return Ok(SolveStats {
            iterations: 0,
            residual: history[0],
            history,
        });
    }
    let mut r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 || omega == 0.0 {
            // breakdown: restart the shadow residual
            r = a.residual(x, b);
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            v.iter_mut().for_each(|e| *e = 0.0);
            p.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = inv_diag[i] * p[i];
        }
        a.mul(&y, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 {
            omega = 0.0;
            continue;
        }
        alpha = rho / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if max_norm(&s) <= tol {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            let res = max_norm(&a.residual(x, b));
            history.push(res);
            if res <= tol {
                return Ok(SolveStats {
                    iterations: it,
                    residual: res,
                    history,
                });
            }
            r = a.residual(x, b);
            continue;
        }
        for i in 0..n {
            z[i] = inv_diag[i] * s[i];
        }
        a.mul(&z, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        let res = max_norm(&r);
        history.push(res);
        if res <= tol {
            // confirm against the true residual to guard against drift
            let true_res = max_norm(&a.residual(x, b));
            if true_res <= tol {
                return Ok(SolveStats {
                    iterations: it,
                    residual: true_res,
                    history,
                });
            }
            r = a.residual(x, b);
        }
    }
    let residual = max_norm(&a.residual(x, b));
    Err(Error::SolverStall {
        iterations: max_iter,
        residual,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_nonsymmetric_tridiagonal() {
        let n = 50;
        let mut a = CsrMatrix::with_capacity(n, 3 * n);
        for i in 0..n {
            let mut row = vec![(i, 4.0)];
            if i > 0 {
                row.push((i - 1, -1.5));
            }
            if i + 1 < n {
                row.push((i + 1, -0.5));
            }
            a.push_row(&row);
        }
        let exact: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut b = vec![0.0; n];
        a.mul(&exact, &mut b);
        let mut x = vec![0.0; n];
        let stats = bicgstab(&a, &b, &mut x, 1e-12, 200).unwrap();
        assert!(stats.residual <= 1e-12);
        for i in 0..n {
            assert!((x[i] - exact[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicate_columns_are_summed() {
        let mut a = CsrMatrix::with_capacity(1, 2);
        a.push_row(&[(0, 1.0), (0, 2.0)]);
        assert_eq!(a.nnz(), 1);
        assert_eq!(a.diagonal(), vec![3.0]);
    }

    #[test]
    fn stall_reports_history() {
        let mut a = CsrMatrix::with_capacity(2, 2);
        a.push_row(&[(0, 1.0)]);
        a.push_row(&[(1, 1.0)]);
        let mut x = vec![0.0; 2];
        match bicgstab(&a, &[1.0, 1.0], &mut x, -1.0, 3) {
            Err(Error::SolverStall { history, .. }) => assert!(!history.is_empty()),
            other => panic!("{other:?}"),
        }
    }
}
