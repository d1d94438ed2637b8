//! Banded and sparse linear solvers for the implicit time steps.
//!
//! 1d systems are tridiagonal and solved directly (factor once, solve many
//! right-hand sides). 2d systems use BiCGStab with Jacobi preconditioning on
//! a compressed stencil matrix; the matrices here are strictly diagonally
//! dominant so convergence is fast.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinAlgError {
    #[error("tridiagonal factorization broke down at row {0} (pivot too small)")]
    Pivot(usize),
    #[error("iterative solve did not reach residual {tol:e} in {iters} iterations (got {resid:e})")]
    NoConvergence { tol: f64, iters: usize, resid: f64 },
    #[error("iterative solve breakdown (rho = {0:e})")]
    Breakdown(f64),
}

/// Tridiagonal matrix: `lower[i]` multiplies `u[i-1]` in row `i`,
/// `upper[i]` multiplies `u[i+1]`. `lower[0]` and `upper[n-1]` are ignored.
#[derive(Debug, Clone)]
pub struct Tridiag {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiag {
    pub fn zero(n: usize) -> Self {
        Tridiag {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn transpose(&self) -> Tridiag {
        let n = self.n();
        let mut t = Tridiag::zero(n);
        t.diag.copy_from_slice(&self.diag);
        for i in 0..n {
            if i > 0 {
                t.lower[i] = self.upper[i - 1];
            }
            if i + 1 < n {
                t.upper[i] = self.lower[i + 1];
            }
        }
        t
    }

    pub fn mul(&self, v: &[f64], out: &mut [f64]) {
        let n = self.n();
        for i in 0..n {
            let mut acc = self.diag[i] * v[i];
            if i > 0 {
                acc += self.lower[i] * v[i - 1];
            }
            if i + 1 < n {
                acc += self.upper[i] * v[i + 1];
            }
            out[i] = acc;
        }
    }

    /// LU factorization without pivoting (valid for the diagonally dominant
    /// systems produced by the theta scheme).
    pub fn factor(&self) -> Result<TridiagFactor, LinAlgError> {
        let n = self.n();
        let mut dmod = vec![0.0; n];
        let mut mult = vec![0.0; n];
        dmod[0] = self.diag[0];
        if dmod[0].abs() < 1e-300 {
            return Err(LinAlgError::Pivot(0));
        }
        for i in 1..n {
            let m = self.lower[i] / dmod[i - 1];
            mult[i] = m;
            dmod[i] = self.diag[i] - m * self.upper[i - 1];
            if dmod[i].abs() < 1e-300 {
                return Err(LinAlgError::Pivot(i));
            }
        }
        Ok(TridiagFactor {
            mult,
            dmod,
            upper: self.upper.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TridiagFactor {
    mult: Vec<f64>,
    dmod: Vec<f64>,
    upper: Vec<f64>,
}

impl TridiagFactor {
    /// Solve in place; `b` is the right-hand side on entry, solution on exit.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dmod.len();
        for i in 1..n {
            b[i] -= self.mult[i] * b[i - 1];
        }
        b[n - 1] /= self.dmod[n - 1];
        for i in (0..n - 1).rev() {
            b[i] = (b[i] - self.upper[i] * b[i + 1]) / self.dmod[i];
        }
    }
}

/// Sparse matrix stored as per-row stencils (column, value).
#[derive(Debug, Clone)]
pub struct StencilMatrix {
    pub n: usize,
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl StencilMatrix {
    pub fn zero(n: usize) -> Self {
        StencilMatrix {
            n,
            rows: vec![Vec::new(); n],
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        if value != 0.0 {
            self.rows[row].push((col as u32, value));
        }
    }

    pub fn mul(&self, v: &[f64], out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(j, a) in row {
                acc += a * v[j as usize];
            }
            out[i] = acc;
        }
    }

    pub fn transpose(&self) -> StencilMatrix {
        let mut t = StencilMatrix::zero(self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, a) in row {
                t.rows[j as usize].push((i as u32, a));
            }
        }
        t
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, a) in row {
                if j as usize == i {
                    d[i] += a;
                }
            }
        }
        d
    }

    /// Jacobi-preconditioned BiCGStab; solves to `|r|_inf <= tol`.
    pub fn bicgstab(
        &self,
        b: &[f64],
        x0: &[f64],
        tol: f64,
        max_iter: usize,
    ) -> Result<Vec<f64>, LinAlgError> {
        let n = self.n;
        let dinv: Vec<f64> = self
            .diagonal()
            .iter()
            .map(|&d| if d.abs() < 1e-300 { 1.0 } else { 1.0 / d })
            .collect();
        let mut x = x0.to_vec();
        let mut r = vec![0.0; n];
        self.mul(&x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, &z| m.max(z.abs()));
        if inf(&r) <= tol {
            return Ok(x);
        }
        let r0 = r.clone();
        let mut rho = 1.0f64;
        let mut alpha = 1.0f64;
        let mut omega = 1.0f64;
        let mut v = vec![0.0; n];
        let mut p = vec![0.0; n];
        let mut phat = vec![0.0; n];
        let mut shat = vec![0.0; n];
        let mut t = vec![0.0; n];
        for it in 0..max_iter {
            let rho_new: f64 = r0.iter().zip(&r).map(|(a, b)| a * b).sum();
            if rho_new.abs() < 1e-290 {
                return Err(LinAlgError::Breakdown(rho_new));
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
            for i in 0..n {
                phat[i] = dinv[i] * p[i];
            }
            self.mul(&phat, &mut v);
            let denom: f64 = r0.iter().zip(&v).map(|(a, b)| a * b).sum();
            if denom.abs() < 1e-290 {
                return Err(LinAlgError::Breakdown(denom));
            }
            alpha = rho / denom;
            // s = r - alpha v (reuse r)
            for i in 0..n {
                r[i] -= alpha * v[i];
            }
            if inf(&r) <= tol {
                for i in 0..n {
                    x[i] += alpha * phat[i];
                }
                return Ok(x);
            }
            for i in 0..n {
                shat[i] = dinv[i] * r[i];
            }
            self.mul(&shat, &mut t);
            let tt: f64 = t.iter().map(|z| z * z).sum();
            if tt.abs() < 1e-290 {
                return Err(LinAlgError::Breakdown(tt));
            }
            omega = t.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / tt;
            for i in 0..n {
                x[i] += alpha * phat[i] + omega * shat[i];
                r[i] -= omega * t[i];
            }
            let resid = inf(&r);
            if resid <= tol {
                return Ok(x);
            }
            if it == max_iter - 1 {
                return Err(LinAlgError::NoConvergence {
                    tol,
                    iters: max_iter,
                    resid,
                });
            }
        }
        unreachable!()
    }
}
