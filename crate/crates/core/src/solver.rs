//! Finite-difference theta-scheme for the truncated box problems, plus the
//! exhaustion loop over growing boxes.
//!
//! Spatial discretization: second-order centered diffusion, centered
//! convection switched to first-order upwinding wherever the cell Peclet
//! number `|b_k| h / q_kk` exceeds 2 (this keeps `I - dt theta L` an
//! M-matrix, which is what makes the discrete maximum principle a hard
//! invariant). Neumann boundaries use second-order mirror ghosts; Dirichlet
//! rows pin the value to zero. Time stepping is the theta scheme with
//! `theta = 1` (implicit Euler) as the robust default and `theta = 0.5`
//! available for accuracy studies.
//!
//! The per-step update is `u' = M^{-1} P E u` with `E = I + dt(1-theta)L`,
//! `M = I - dt theta L`, and `P` the Dirichlet boundary projector. The
//! transposed update (`step_adjoint_columns`) drives densities and measures
//! backward through the exact discrete adjoint, so kernel/measure duality
//! holds at matrix level.

use crate::expr::Expression;
use crate::grid::{FieldSample, Grid, GridError};
use crate::linalg::{LinAlgError, StencilMatrix, Tridiag, TridiagFactor};
use crate::problem::CoefficientField;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("non-finite coefficient ({what}) at node {node}, t={t}")]
    NonFiniteCoefficient { what: String, node: usize, t: f64 },
    #[error("non-finite state at node {node} after step to t={t}")]
    NonFiniteState { node: usize, t: f64 },
    #[error("invalid time step dt={0}")]
    BadTimeStep(f64),
    #[error("theta={0} outside [0.5, 1]")]
    BadTheta(f64),
    #[error("window end {t_end} not after start {s}")]
    BadWindow { s: f64, t_end: f64 },
    #[error(transparent)]
    LinAlg(#[from] LinAlgError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Expr(#[from] crate::expr::ExprError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bc {
    Dirichlet,
    Neumann,
}

/// One truncated box problem: coefficients, grid, boundary condition and
/// time window.
#[derive(Debug, Clone)]
pub struct TruncatedProblem {
    pub cf: Arc<CoefficientField>,
    pub grid: Arc<Grid>,
    pub bc: Bc,
    pub s: f64,
    pub t_end: f64,
    pub dt: f64,
    pub theta: f64,
    /// Cell Peclet diagnostic `max |b| h / (2 lambda_min Q)` at the initial time.
    pub peclet: f64,
}

impl TruncatedProblem {
    pub fn new(
        cf: Arc<CoefficientField>,
        grid: Arc<Grid>,
        bc: Bc,
        s: f64,
        t_end: f64,
        dt: f64,
        theta: f64,
    ) -> Result<Self, SolverError> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(SolverError::BadTimeStep(dt));
        }
        if !(0.5..=1.0).contains(&theta) {
            return Err(SolverError::BadTheta(theta));
        }
        if t_end < s {
            return Err(SolverError::BadWindow { s, t_end });
        }
        let d = grid.dim();
        let mut peclet = 0.0f64;
        for i in 0..grid.node_count() {
            let x = grid.coord(i);
            let b = cf.b_at(s, &x[..d]);
            let eta = cf.lambda_min_q(s, &x[..d]);
            if eta > 0.0 {
                let bn = (b[0] * b[0] + b[1] * b[1]).sqrt();
                peclet = peclet.max(bn * grid.h() / (2.0 * eta));
            }
        }
        Ok(TruncatedProblem {
            cf,
            grid,
            bc,
            s,
            t_end,
            dt,
            theta,
            peclet,
        })
    }
}

enum OpMatrix {
    Tri(Tridiag),
    Sparse(StencilMatrix),
}

impl OpMatrix {
    fn mul(&self, v: &[f64], out: &mut [f64]) {
        match self {
            OpMatrix::Tri(t) => t.mul(v, out),
            OpMatrix::Sparse(m) => m.mul(v, out),
        }
    }
}

enum ImplicitSolver {
    Tri(TridiagFactor),
    Sparse(StencilMatrix),
}

impl ImplicitSolver {
    fn solve(&self, rhs: &mut [f64], warm: &[f64]) -> Result<(), SolverError> {
        match self {
            ImplicitSolver::Tri(f) => {
                f.solve_in_place(rhs);
                Ok(())
            }
            ImplicitSolver::Sparse(m) => {
                let nrm = rhs.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
                let x = m.bicgstab(rhs, warm, 1e-12 * (1.0 + nrm), 2000)?;
                rhs.copy_from_slice(&x);
                Ok(())
            }
        }
    }
}

struct StepOps {
    explicit: Option<OpMatrix>,
    implicit: ImplicitSolver,
}

/// Reusable stepping engine over one grid. Holds the per-solve linear-algebra
/// workspace; not shared between solves.
pub struct ThetaScheme {
    pub cf: Arc<CoefficientField>,
    pub grid: Arc<Grid>,
    pub bc: Bc,
    pub theta: f64,
    pub dt: f64,
    fwd: Option<StepOps>,
    adj: Option<StepOps>,
    scratch: Vec<f64>,
}

impl ThetaScheme {
    pub fn new(
        cf: Arc<CoefficientField>,
        grid: Arc<Grid>,
        bc: Bc,
        theta: f64,
        dt: f64,
    ) -> Result<Self, SolverError> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(SolverError::BadTimeStep(dt));
        }
        if !(0.5..=1.0).contains(&theta) {
            return Err(SolverError::BadTheta(theta));
        }
        let n = grid.node_count();
        Ok(ThetaScheme {
            cf,
            grid,
            bc,
            theta,
            dt,
            fwd: None,
            adj: None,
            scratch: vec![0.0; n],
        })
    }

    /// Assemble the spatial operator `L(tau)` (rows zeroed on a Dirichlet
    /// boundary). 1d goes to a tridiagonal, 2d to a stencil matrix.
    fn assemble_l(&self, tau: f64) -> Result<OpMatrix, SolverError> {
        let grid = &self.grid;
        let d = grid.dim();
        let h = grid.h();
        let h2 = h * h;
        let n1 = grid.n_per_dim();
        let n = grid.node_count();
        let check = |v: f64, what: &str, node: usize| -> Result<f64, SolverError> {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(SolverError::NonFiniteCoefficient {
                    what: what.into(),
                    node,
                    t: tau,
                })
            }
        };
        if d == 1 {
            let mut l = Tridiag::zero(n);
            for i in 0..n {
                let boundary = i == 0 || i == n - 1;
                if boundary && self.bc == Bc::Dirichlet {
                    continue; // zero row; implicit matrix becomes identity
                }
                let x = grid.coord(i);
                let q = check(self.cf.q_program(0, 0).eval(tau, &x[..1]), "q11", i)?;
                let b = check(self.cf.b_program(0).eval(tau, &x[..1]), "b1", i)?;
                if boundary {
                    // Neumann mirror: u_{-1} = u_1; normal convection vanishes
                    let nb = if i == 0 { i + 1 } else { i - 1 };
                    l.diag[i] += -2.0 * q / h2;
                    if nb > i {
                        l.upper[i] += 2.0 * q / h2;
                    } else {
                        l.lower[i] += 2.0 * q / h2;
                    }
                    continue;
                }
                l.diag[i] += -2.0 * q / h2;
                l.lower[i] += q / h2;
                l.upper[i] += q / h2;
                if b.abs() * h <= 2.0 * q {
                    l.upper[i] += b / (2.0 * h);
                    l.lower[i] -= b / (2.0 * h);
                } else if b > 0.0 {
                    l.upper[i] += b / h;
                    l.diag[i] -= b / h;
                } else {
                    l.lower[i] -= b / h;
                    l.diag[i] += b / h;
                }
            }
            Ok(OpMatrix::Tri(l))
        } else {
            let mut m = StencilMatrix::zero(n);
            // mirror-reflect an out-of-range per-dimension index
            let reflect = |j: isize| -> usize {
                if j < 0 {
                    (-j) as usize
                } else if j as usize >= n1 {
                    2 * (n1 - 1) - j as usize
                } else {
                    j as usize
                }
            };
            let mut row: Vec<(u32, f64)> = Vec::with_capacity(12);
            for i in 0..n {
                row.clear();
                let mi = grid.multi_index(i);
                let on_boundary = grid.is_boundary(i);
                if on_boundary && self.bc == Bc::Dirichlet {
                    continue;
                }
                let xc = grid.coord(i);
                let x = &xc[..d];
                let mut push = |mi2: [usize; 2], v: f64| {
                    let col = grid.flat_index(mi2) as u32;
                    if let Some(e) = row.iter_mut().find(|(c, _)| *c == col) {
                        e.1 += v;
                    } else {
                        row.push((col, v));
                    }
                };
                for k in 0..2usize {
                    let q = check(self.cf.q_program(k, k).eval(tau, x), "q_kk", i)?;
                    let b = check(self.cf.b_program(k).eval(tau, x), "b_k", i)?;
                    let at_wall = mi[k] == 0 || mi[k] == n1 - 1;
                    let mut lo = mi;
                    let mut hi = mi;
                    lo[k] = reflect(mi[k] as isize - 1);
                    hi[k] = reflect(mi[k] as isize + 1);
                    push(mi, -2.0 * q / h2);
                    push(lo, q / h2);
                    push(hi, q / h2);
                    if at_wall {
                        // normal convection vanishes under the mirror
                        continue;
                    }
                    if b.abs() * h <= 2.0 * q {
                        push(hi, b / (2.0 * h));
                        push(lo, -b / (2.0 * h));
                    } else if b > 0.0 {
                        push(hi, b / h);
                        push(mi, -b / h);
                    } else {
                        push(lo, -b / h);
                        push(mi, b / h);
                    }
                }
                // mixed term 2 q12 u_xy with the centered cross stencil
                let q12 = check(self.cf.q_program(0, 1).eval(tau, x), "q12", i)?;
                if q12 != 0.0 {
                    let c = q12 / (2.0 * h2);
                    for (s0, s1, sign) in
                        [(1, 1, 1.0), (-1, -1, 1.0), (1, -1, -1.0), (-1, 1, -1.0)]
                    {
                        let mi2 = [
                            reflect(mi[0] as isize + s0),
                            reflect(mi[1] as isize + s1),
                        ];
                        push(mi2, sign * c);
                    }
                }
                m.rows[i] = row.clone();
            }
            Ok(OpMatrix::Sparse(m))
        }
    }

    fn build_ops(&self, t_from: f64, adjoint: bool) -> Result<StepOps, SolverError> {
        let n = self.grid.node_count();
        // explicit part at the start of the step, implicit at the end
        let explicit = if self.theta < 1.0 {
            let l = self.assemble_l(t_from)?;
            let a = self.dt * (1.0 - self.theta);
            Some(match l {
                OpMatrix::Tri(l) => {
                    let mut e = Tridiag::zero(n);
                    for i in 0..n {
                        e.diag[i] = 1.0 + a * l.diag[i];
                        e.lower[i] = a * l.lower[i];
                        e.upper[i] = a * l.upper[i];
                    }
                    let e = if adjoint { e.transpose() } else { e };
                    OpMatrix::Tri(e)
                }
                OpMatrix::Sparse(l) => {
                    let mut e = StencilMatrix::zero(n);
                    for (i, r) in l.rows.iter().enumerate() {
                        e.rows[i] = r.iter().map(|&(c, v)| (c, a * v)).collect();
                    }
                    for i in 0..n {
                        if let Some(entry) = e.rows[i].iter_mut().find(|(c, _)| *c as usize == i) {
                            entry.1 += 1.0;
                        } else {
                            e.rows[i].push((i as u32, 1.0));
                        }
                    }
                    let e = if adjoint { e.transpose() } else { e };
                    OpMatrix::Sparse(e)
                }
            })
        } else {
            None
        };
        let l_imp = self.assemble_l(t_from + self.dt)?;
        let b = self.dt * self.theta;
        let implicit = match l_imp {
            OpMatrix::Tri(l) => {
                let mut m = Tridiag::zero(n);
                for i in 0..n {
                    m.diag[i] = 1.0 - b * l.diag[i];
                    m.lower[i] = -b * l.lower[i];
                    m.upper[i] = -b * l.upper[i];
                }
                let m = if adjoint { m.transpose() } else { m };
                ImplicitSolver::Tri(m.factor()?)
            }
            OpMatrix::Sparse(l) => {
                let mut m = StencilMatrix::zero(n);
                for (i, r) in l.rows.iter().enumerate() {
                    m.rows[i] = r.iter().map(|&(c, v)| (c, -b * v)).collect();
                }
                for i in 0..n {
                    if let Some(entry) = m.rows[i].iter_mut().find(|(c, _)| *c as usize == i) {
                        entry.1 += 1.0;
                    } else {
                        m.rows[i].push((i as u32, 1.0));
                    }
                }
                let m = if adjoint { m.transpose() } else { m };
                ImplicitSolver::Sparse(m)
            }
        };
        Ok(StepOps { explicit, implicit })
    }

    /// Advance every column by one step: `u <- M^{-1} P E u`, where the step
    /// runs from `t_from` to `t_from + dt`.
    pub fn step_columns(
        &mut self,
        t_from: f64,
        cols: &mut [&mut Vec<f64>],
    ) -> Result<(), SolverError> {
        // autonomous coefficients give t-independent step operators
        if !(self.cf.is_autonomous() && self.fwd.is_some()) {
            self.fwd = Some(self.build_ops(t_from, false)?);
        }
        let ops = self.fwd.as_ref().unwrap();
        for col in cols.iter_mut() {
            if let Some(e) = &ops.explicit {
                e.mul(col, &mut self.scratch);
                col.copy_from_slice(&self.scratch);
            }
            self.scratch.copy_from_slice(col);
            if self.bc == Bc::Dirichlet {
                for i in 0..col.len() {
                    if self.grid.is_boundary(i) {
                        col[i] = 0.0;
                    }
                }
            }
            ops.implicit.solve(col, &self.scratch)?;
        }
        Ok(())
    }

    /// Apply the transpose of the forward step at `t_from` to every column:
    /// `v <- E^T P M^{-T} v`. Used for kernel rows and measure transport.
    pub fn step_adjoint_columns(
        &mut self,
        t_from: f64,
        cols: &mut [&mut Vec<f64>],
    ) -> Result<(), SolverError> {
        let rebuild = !(self.cf.is_autonomous() && self.adj.is_some());
        if rebuild {
            self.adj = Some(self.build_ops(t_from, true)?);
        }
        let ops = self.adj.as_ref().unwrap();
        for col in cols.iter_mut() {
            self.scratch.copy_from_slice(col);
            ops.implicit.solve(col, &self.scratch)?;
            if self.bc == Bc::Dirichlet {
                for i in 0..col.len() {
                    if self.grid.is_boundary(i) {
                        col[i] = 0.0;
                    }
                }
            }
            if let Some(e) = &ops.explicit {
                e.mul(col, &mut self.scratch);
                col.copy_from_slice(&self.scratch);
            }
        }
        Ok(())
    }
}

/// Trajectory of field samples at the requested output times.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<FieldSample>,
}

impl Trajectory {
    pub fn last(&self) -> &FieldSample {
        self.fields.last().expect("nonempty trajectory")
    }

    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        if let Some(f0) = self.fields.first() {
            let _ = writeln!(
                out,
                "# grid d={} R={} h={} nodes={}",
                f0.grid.dim(),
                f0.grid.radius(),
                f0.grid.h(),
                f0.grid.node_count()
            );
            let _ = writeln!(
                out,
                "{}",
                if f0.grid.dim() == 1 {
                    "t,x1,value"
                } else {
                    "t,x1,x2,value"
                }
            );
        }
        for f in &self.fields {
            for (i, v) in f.values.iter().enumerate() {
                let c = f.grid.coord(i);
                if f.grid.dim() == 1 {
                    let _ = writeln!(out, "{},{},{}", f.time, c[0], v);
                } else {
                    let _ = writeln!(out, "{},{},{},{}", f.time, c[0], c[1], v);
                }
            }
        }
        out
    }
}

/// March the theta scheme from `f0` at `tp.s` to `tp.t_end`, storing fields
/// at the requested output times (snapped to step multiples; `tp.s` and
/// `tp.t_end` are always included).
pub fn solve(tp: &TruncatedProblem, f0: &FieldSample, output_times: &[f64]) -> Result<Trajectory, SolverError> {
    debug_assert_eq!(f0.grid.node_count(), tp.grid.node_count());
    let span = tp.t_end - tp.s;
    let mut scheme = ThetaScheme::new(
        tp.cf.clone(),
        tp.grid.clone(),
        tp.bc,
        tp.theta,
        tp.dt,
    )?;
    if span == 0.0 {
        return Ok(Trajectory {
            times: vec![tp.s],
            fields: vec![f0.clone()],
        });
    }
    let n_steps = (span / tp.dt).round().max(1.0) as usize;
    let dt_eff = span / n_steps as f64;
    scheme.dt = dt_eff;

    // snap output times to step indices
    let mut want: Vec<usize> = output_times
        .iter()
        .map(|&t| (((t - tp.s) / dt_eff).round() as isize).clamp(0, n_steps as isize) as usize)
        .collect();
    want.push(0);
    want.push(n_steps);
    want.sort_unstable();
    want.dedup();

    let mut u = f0.values.clone();
    let mut out_times = Vec::with_capacity(want.len());
    let mut out_fields = Vec::with_capacity(want.len());
    let mut record = |k: usize, u: &[f64]| {
        out_times.push(tp.s + k as f64 * dt_eff);
        out_fields.push(FieldSample::new(
            tp.grid.clone(),
            tp.s + k as f64 * dt_eff,
            u.to_vec(),
        ));
    };
    if want.contains(&0) {
        record(0, &u);
    }
    for k in 0..n_steps {
        let t_from = tp.s + k as f64 * dt_eff;
        scheme.step_columns(t_from, &mut [&mut u])?;
        if let Some(node) = u.iter().position(|v| !v.is_finite()) {
            return Err(SolverError::NonFiniteState {
                node,
                t: t_from + dt_eff,
            });
        }
        if want.binary_search(&(k + 1)).is_ok() {
            record(k + 1, &u);
        }
    }
    Ok(Trajectory {
        times: out_times,
        fields: out_fields,
    })
}

/// Settings for the exhaustion loop.
#[derive(Debug, Clone)]
pub struct ExhaustSettings {
    /// Radius of the first box; subsequent boxes double it.
    pub r0: f64,
    pub h: f64,
    pub dt: f64,
    pub theta: f64,
    pub bc: Bc,
    /// Radius of the fixed compact on which convergence is measured.
    pub compact_radius: f64,
    /// Sup-norm tolerance on the compact between successive radii.
    pub tol: f64,
    /// Maximum number of doublings.
    pub n_max: u32,
}

impl Default for ExhaustSettings {
    fn default() -> Self {
        ExhaustSettings {
            r0: 4.0,
            h: 0.05,
            dt: 1e-3,
            theta: 1.0,
            bc: Bc::Neumann,
            compact_radius: 2.0,
            tol: 5e-4,
            n_max: 3,
        }
    }
}

/// Result of the exhaustion loop. When the budget runs out before the gap
/// meets the tolerance, the best trajectory is returned with
/// `converged = false` rather than an error.
#[derive(Debug, Clone)]
pub struct ExhaustResult {
    /// Trajectory restricted to the compact ball.
    pub trajectory: Trajectory,
    /// Final-time field on the full final box (for composition checks).
    pub final_full: FieldSample,
    pub n_final: u32,
    pub radius_final: f64,
    pub gap: f64,
    pub converged: bool,
}

/// Solve on boxes of radius `r0 * 2^n` (fixed `h`) until two successive
/// solutions agree on the compact within `tol`, in sup norm over the stored
/// output times.
pub fn exhaust(
    cf: &Arc<CoefficientField>,
    f: &Expression,
    s: f64,
    t_end: f64,
    output_times: &[f64],
    es: &ExhaustSettings,
) -> Result<ExhaustResult, SolverError> {
    let mut previous: Option<(Trajectory, FieldSample, u32, f64)> = None;
    let mut gap = f64::INFINITY;
    for n in 0..=es.n_max {
        let radius = es.r0 * f64::powi(2.0, n as i32);
        let grid = Grid::new(cf.dim(), radius, es.h)?;
        let tp = TruncatedProblem::new(
            cf.clone(),
            grid.clone(),
            es.bc,
            s,
            t_end,
            es.dt,
            es.theta,
        )?;
        let f0 = FieldSample::from_expression(grid, s, f);
        let traj = solve(&tp, &f0, output_times)?;
        let final_full = traj.last().clone();
        let restricted = Trajectory {
            times: traj.times.clone(),
            fields: traj
                .fields
                .iter()
                .map(|fl| fl.restrict(es.compact_radius))
                .collect::<Result<Vec<_>, _>>()?,
        };
        if let Some((prev, _, _, _)) = &previous {
            gap = prev
                .fields
                .iter()
                .zip(&restricted.fields)
                .map(|(a, b)| a.sup_diff(b))
                .fold(0.0f64, f64::max);
            if gap <= es.tol {
                return Ok(ExhaustResult {
                    trajectory: restricted,
                    final_full,
                    n_final: n,
                    radius_final: radius,
                    gap,
                    converged: true,
                });
            }
        }
        previous = Some((restricted, final_full, n, radius));
    }
    let (trajectory, final_full, n_final, radius_final) =
        previous.expect("at least one radius solved");
    Ok(ExhaustResult {
        trajectory,
        final_full,
        n_final,
        radius_final,
        gap,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::problem::TimeInterval;
    use rand::{Rng, SeedableRng};

    fn ou() -> Arc<CoefficientField> {
        Arc::new(
            CoefficientField::from_strings(1, TimeInterval::new(0.0, None), &["1"], &["-x1"])
                .unwrap(),
        )
    }

    fn heat() -> Arc<CoefficientField> {
        Arc::new(
            CoefficientField::from_strings(1, TimeInterval::new(0.0, None), &["1"], &["0"])
                .unwrap(),
        )
    }

    #[test]
    fn constants_are_steady_states_under_neumann() {
        for cf in [heat(), ou()] {
            let grid = Grid::new(1, 2.0, 0.1).unwrap();
            let tp =
                TruncatedProblem::new(cf, grid.clone(), Bc::Neumann, 0.0, 0.5, 1e-2, 1.0).unwrap();
            let f0 = FieldSample::constant(grid, 0.0, 1.0);
            let out = solve(&tp, &f0, &[0.5]).unwrap();
            for v in &out.last().values {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dirichlet_sine_mode_decays_at_discrete_rate() {
        // u0 = sin(k pi (x+R) / (2R)) is an exact eigenvector of the discrete
        // Dirichlet Laplacian; the trajectory must match the discrete decay
        // factor per step to near machine precision.
        let r = 2.0;
        let h = 0.1;
        let grid = Grid::new(1, r, h).unwrap();
        let n1 = grid.n_per_dim();
        let k = 3usize;
        let mode: Vec<f64> = (0..n1)
            .map(|j| (k as f64 * std::f64::consts::PI * j as f64 / (n1 - 1) as f64).sin())
            .collect();
        // discrete eigenvalue of the second difference
        let lam = 4.0 / (h * h)
            * (k as f64 * std::f64::consts::PI / (2.0 * (n1 - 1) as f64)).sin().powi(2);
        for theta in [1.0, 0.5] {
            let dt = 1e-3;
            let steps = 200usize;
            let tp = TruncatedProblem::new(
                heat(),
                grid.clone(),
                Bc::Dirichlet,
                0.0,
                dt * steps as f64,
                dt,
                theta,
            )
            .unwrap();
            let f0 = FieldSample::new(grid.clone(), 0.0, mode.clone());
            let out = solve(&tp, &f0, &[dt * steps as f64]).unwrap();
            let rho = (1.0 - (1.0 - theta) * dt * lam) / (1.0 + theta * dt * lam);
            let factor = rho.powi(steps as i32);
            for (j, v) in out.last().values.iter().enumerate() {
                assert!(
                    (v - factor * mode[j]).abs() < 1e-8,
                    "theta={theta} node {j}: {v} vs {}",
                    factor * mode[j]
                );
            }
        }
    }

    #[test]
    fn maximum_principle_with_upwinding_and_large_steps() {
        // strong drift so the Peclet switch is active, one huge implicit step
        let cf = Arc::new(
            CoefficientField::from_strings(
                1,
                TimeInterval::new(0.0, None),
                &["0.01"],
                &["100*x1"],
            )
            .unwrap(),
        );
        let grid = Grid::new(1, 1.0, 0.1).unwrap();
        let tp =
            TruncatedProblem::new(cf, grid.clone(), Bc::Dirichlet, 0.0, 10.0, 10.0, 1.0).unwrap();
        assert!(tp.peclet > 2.0, "peclet = {}", tp.peclet);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let f0 = FieldSample::new(
            grid.clone(),
            0.0,
            (0..grid.node_count()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let hi = f0.max();
        let out = solve(&tp, &f0, &[10.0]).unwrap();
        for v in &out.last().values {
            assert!(*v >= -1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn ou_mean_decay_matches_closed_form() {
        let grid = Grid::new(1, 8.0, 0.05).unwrap();
        let tp =
            TruncatedProblem::new(ou(), grid.clone(), Bc::Neumann, 0.0, 1.0, 1e-3, 0.5).unwrap();
        let f0 = FieldSample::from_expression(grid, 0.0, &parse("x1", 1).unwrap());
        let out = solve(&tp, &f0, &[1.0]).unwrap();
        let u = out.last().restrict(4.0).unwrap();
        let decay = (-1.0f64).exp();
        for (i, v) in u.values.iter().enumerate() {
            let x = u.grid.coord(i)[0];
            assert!(
                (v - decay * x).abs() < 1e-3,
                "x={x}: {v} vs {}",
                decay * x
            );
        }
    }

    #[test]
    fn neumann_pure_diffusion_conserves_mass() {
        let grid = Grid::new(1, 2.0, 0.05).unwrap();
        let tp = TruncatedProblem::new(
            heat(),
            grid.clone(),
            Bc::Neumann,
            0.0,
            1.0,
            1e-3,
            1.0,
        )
        .unwrap();
        let f0 = FieldSample::from_expression(grid, 0.0, &parse("exp(-abs2(x))+0.3", 1).unwrap());
        let m0 = f0.mass();
        let out = solve(&tp, &f0, &[1.0]).unwrap();
        let m1 = out.last().mass();
        assert!(
            (m1 - m0).abs() <= 1e-10 * m0.abs().max(1.0),
            "mass drift {}",
            m1 - m0
        );
    }

    #[test]
    fn grid_convergence_second_order() {
        // Gaussian under the OU flow; halving h must cut the error by >= 3x
        let oracle = |x: f64, tau: f64| {
            // closed form: mean e^{-tau} x, variance v = 1 - e^{-2 tau};
            // G f (x) = w/sqrt(w^2+v) exp(-m^2/(2(w^2+v))) for f = exp(-x^2/(2w^2))
            let w2 = 1.0f64;
            let m = (-tau).exp() * x;
            let v = 1.0 - (-2.0 * tau).exp();
            (w2 / (w2 + v)).sqrt() * (-m * m / (2.0 * (w2 + v))).exp()
        };
        let tau = 0.5;
        let mut errs = Vec::new();
        for h in [0.1, 0.05] {
            let grid = Grid::new(1, 6.0, h).unwrap();
            let tp = TruncatedProblem::new(
                ou(),
                grid.clone(),
                Bc::Neumann,
                0.0,
                tau,
                2.5e-4,
                0.5,
            )
            .unwrap();
            let f0 =
                FieldSample::from_expression(grid, 0.0, &parse("exp(-abs2(x)/2)", 1).unwrap());
            let out = solve(&tp, &f0, &[tau]).unwrap();
            let u = out.last().restrict(2.0).unwrap();
            let mut err = 0.0f64;
            for (i, v) in u.values.iter().enumerate() {
                let x = u.grid.coord(i)[0];
                err = err.max((v - oracle(x, tau)).abs());
            }
            errs.push(err);
        }
        assert!(
            errs[0] / errs[1] >= 3.0,
            "convergence ratio {} (errors {:?})",
            errs[0] / errs[1],
            errs
        );
    }

    #[test]
    fn adjoint_step_is_exact_transpose() {
        // <S u, v> == <u, S^T v> for random vectors, both boundary conditions
        let cf = Arc::new(
            CoefficientField::from_strings(
                1,
                TimeInterval::new(0.0, None),
                &["1"],
                &["-(2+sin(t))*x1"],
            )
            .unwrap(),
        );
        let grid = Grid::new(1, 2.0, 0.1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for bc in [Bc::Neumann, Bc::Dirichlet] {
            for theta in [1.0, 0.5] {
                let mut fw =
                    ThetaScheme::new(cf.clone(), grid.clone(), bc, theta, 1e-2).unwrap();
                let mut ad =
                    ThetaScheme::new(cf.clone(), grid.clone(), bc, theta, 1e-2).unwrap();
                let n = grid.node_count();
                let u0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let v0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut u = u0.clone();
                let mut v = v0.clone();
                fw.step_columns(0.3, &mut [&mut u]).unwrap();
                ad.step_adjoint_columns(0.3, &mut [&mut v]).unwrap();
                let lhs: f64 = u.iter().zip(&v0).map(|(a, b)| a * b).sum();
                let rhs: f64 = u0.iter().zip(&v).map(|(a, b)| a * b).sum();
                assert!(
                    (lhs - rhs).abs() < 1e-10,
                    "bc={bc:?} theta={theta}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn autonomous_generator_commutes_with_propagator() {
        // for time-independent coefficients the step operator is a rational
        // function of the spatial operator, so L (S^K f) = S^K (L f) up to
        // solver roundoff — the discrete shadow of the derivative identity
        let grid = Grid::new(1, 4.0, 0.05).unwrap();
        let cf = ou();
        let mut scheme =
            ThetaScheme::new(cf.clone(), grid.clone(), Bc::Neumann, 1.0, 1e-3).unwrap();
        let l = scheme.assemble_l(0.0).unwrap();
        let f0 = FieldSample::from_expression(grid.clone(), 0.0, &parse("exp(-abs2(x)/2)", 1).unwrap());
        let n = grid.node_count();

        let mut lf = vec![0.0; n];
        l.mul(&f0.values, &mut lf);
        let mut a = f0.values.clone();
        let mut b = lf.clone();
        for k in 0..200 {
            scheme
                .step_columns(k as f64 * 1e-3, &mut [&mut a, &mut b])
                .unwrap();
        }
        let mut la = vec![0.0; n];
        l.mul(&a, &mut la);
        for i in 0..n {
            assert!(
                (la[i] - b[i]).abs() < 1e-9,
                "commutation failed at node {i}: {} vs {}",
                la[i],
                b[i]
            );
        }
    }

    #[test]
    fn exhaust_constant_converges_immediately() {
        let es = ExhaustSettings {
            r0: 2.0,
            h: 0.1,
            dt: 1e-2,
            compact_radius: 1.0,
            n_max: 2,
            ..ExhaustSettings::default()
        };
        let r = exhaust(&heat(), &parse("0.7", 1).unwrap(), 0.0, 0.5, &[0.25, 0.5], &es).unwrap();
        assert!(r.converged);
        assert!(r.gap <= 1e-12);
        for f in &r.trajectory.fields {
            for v in &f.values {
                assert!((v - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exhaust_dirichlet_monotone_for_nonnegative_data() {
        let es = ExhaustSettings {
            r0: 2.0,
            h: 0.05,
            dt: 1e-3,
            bc: Bc::Dirichlet,
            compact_radius: 1.0,
            tol: 1e-12, // force both radii to be computed
            n_max: 1,
            ..ExhaustSettings::default()
        };
        let f = parse("exp(-abs2(x)/2)", 1).unwrap();
        // run radii manually to compare
        let mut solutions = Vec::new();
        for n in 0..=1u32 {
            let radius = es.r0 * f64::powi(2.0, n as i32);
            let grid = Grid::new(1, radius, es.h).unwrap();
            let tp = TruncatedProblem::new(
                ou(),
                grid.clone(),
                Bc::Dirichlet,
                0.0,
                1.0,
                es.dt,
                1.0,
            )
            .unwrap();
            let f0 = FieldSample::from_expression(grid, 0.0, &f);
            let traj = solve(&tp, &f0, &[0.5, 1.0]).unwrap();
            solutions.push(
                traj.fields
                    .iter()
                    .map(|fl| fl.restrict(1.0).unwrap())
                    .collect::<Vec<_>>(),
            );
        }
        for (a, b) in solutions[0].iter().zip(&solutions[1]) {
            for (va, vb) in a.values.iter().zip(&b.values) {
                assert!(vb >= &(va - 1e-10), "not monotone: {va} -> {vb}");
            }
        }
    }

    #[test]
    fn exhaust_dirichlet_and_neumann_share_the_limit() {
        let f = parse("1/(1+exp(-4*x1))", 1).unwrap();
        let mut results = Vec::new();
        for bc in [Bc::Dirichlet, Bc::Neumann] {
            let es = ExhaustSettings {
                r0: 4.0,
                h: 0.05,
                dt: 1e-3,
                bc,
                compact_radius: 2.0,
                tol: 5e-4,
                n_max: 3,
                ..ExhaustSettings::default()
            };
            let r = exhaust(&ou(), &f, 0.0, 1.0, &[1.0], &es).unwrap();
            assert!(r.converged, "{bc:?} did not converge");
            results.push(r);
        }
        let gap = results[0]
            .trajectory
            .last()
            .sup_diff(results[1].trajectory.last());
        let tol = 5e-4;
        assert!(gap <= 2.0 * tol, "bc limits differ by {gap}");
    }
}
