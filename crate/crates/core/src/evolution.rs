//! The evolution family `G(t,s)`: exhausted solution operators, discrete
//! transition kernels, and the operator identity checks.
//!
//! A [`KernelEstimate`] row `P[i][j]` approximates the transition mass from
//! the source node `x_i` at time `s` into cell `j` at time `t`. Columns are
//! built by evolving the per-cell hat functions (which sample as unit
//! vectors), so `P` is exactly the composed one-step matrix product and the
//! adjoint route (`kernel_adjoint_rows`) is its exact transpose.

use crate::expr::Expression;
use crate::grid::{FieldSample, Grid, GridError};
use crate::problem::{CoefficientField, ProblemError};
use crate::solver::{
    exhaust, solve, Bc, ExhaustSettings, SolverError, ThetaScheme, TruncatedProblem,
};
use std::fmt::Write as _;
use std::sync::{Arc, OnceLock};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("operator window invalid: s={s} > t={t}")]
    BadWindow { s: f64, t: f64 },
    #[error("exhaustion budget exceeded: gap {gap:e} > tol {tol:e} after {n_final} doublings")]
    Budget { gap: f64, tol: f64, n_final: u32 },
    #[error("kernel mass defect {defect:e} exceeds {threshold:e}; enlarge the box radius")]
    KernelLeak { defect: f64, threshold: f64 },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Expr(#[from] crate::expr::ExprError),
}

/// Discretization settings shared by everything built on the family.
#[derive(Debug, Clone)]
pub struct EvolutionSettings {
    /// Base box radius; exhaustion doubles from here.
    pub r0: f64,
    pub h: f64,
    pub dt: f64,
    pub theta: f64,
    pub bc: Bc,
    /// Sup-norm tolerance of the exhaustion loop on the compact.
    pub exhaust_tol: f64,
    pub n_max: u32,
    /// Radius of the reporting compact (default half the base radius).
    pub compact_radius: f64,
    /// Conservativity tolerance; kernel-derived checks inherit it.
    pub eps_cons: f64,
    /// When true, `apply` fails if the exhaustion budget is exceeded.
    pub strict_budget: bool,
}

impl Default for EvolutionSettings {
    fn default() -> Self {
        EvolutionSettings {
            r0: 4.0,
            h: 0.05,
            dt: 1e-3,
            theta: 1.0,
            bc: Bc::Neumann,
            exhaust_tol: 5e-4,
            n_max: 3,
            compact_radius: 2.0,
            eps_cons: 1e-3,
            strict_budget: true,
        }
    }
}

impl EvolutionSettings {
    pub fn exhaust_settings(&self) -> ExhaustSettings {
        ExhaustSettings {
            r0: self.r0,
            h: self.h,
            dt: self.dt,
            theta: self.theta,
            bc: self.bc,
            compact_radius: self.compact_radius,
            tol: self.exhaust_tol,
            n_max: self.n_max,
        }
    }

    pub fn base_grid(&self, dim: usize) -> Result<Arc<Grid>, GridError> {
        Grid::new(dim, self.r0, self.h)
    }

    pub fn compact_grid(&self, dim: usize) -> Result<Arc<Grid>, GridError> {
        Grid::new(dim, self.compact_radius, self.h)
    }
}

/// Metadata of one exhausted application.
#[derive(Debug, Clone, Copy)]
pub struct ApplyInfo {
    pub n_final: u32,
    pub radius_final: f64,
    pub gap: f64,
    pub converged: bool,
}

/// Row-stochastic discrete transition kernel.
#[derive(Debug, Clone)]
pub struct KernelEstimate {
    pub s: f64,
    pub t: f64,
    /// Box grid whose nodes double as cells (half-cells at the boundary).
    pub grid: Arc<Grid>,
    /// Node indices of the source points.
    pub source_nodes: Vec<usize>,
    /// `rows[k][j]` = transition mass from source `k` into cell `j`.
    pub rows: Vec<Vec<f64>>,
    /// Per-row `max(|1 - row sum|, mass in the outer 5% shell)`; the second
    /// term flags mass piling against the artificial boundary.
    pub row_defect: Vec<f64>,
}

impl KernelEstimate {
    pub fn max_defect(&self) -> f64 {
        self.row_defect.iter().fold(0.0f64, |a, &b| a.max(b))
    }

    pub fn min_entry(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.iter())
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }

    /// CSV export `(i, j, p)` with a metadata sidecar string.
    pub fn to_csv(&self) -> (String, String) {
        let mut data = String::new();
        let _ = writeln!(data, "i,j,p");
        for (k, row) in self.rows.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                if *p != 0.0 {
                    let _ = writeln!(data, "{k},{j},{p}");
                }
            }
        }
        let mut meta = String::new();
        let _ = writeln!(meta, "# transition kernel estimate");
        let _ = writeln!(meta, "s,t,radius,h,sources,max_defect");
        let _ = writeln!(
            meta,
            "{},{},{},{},{},{}",
            self.s,
            self.t,
            self.grid.radius(),
            self.grid.h(),
            self.source_nodes.len(),
            self.max_defect()
        );
        (data, meta)
    }
}

/// One bound `(s, t)` slot of the evolution family.
#[derive(Debug)]
pub struct EvolutionOperator {
    pub cf: Arc<CoefficientField>,
    pub settings: EvolutionSettings,
    pub s: f64,
    pub t: f64,
    kernel_cache: OnceLock<Arc<KernelEstimate>>,
}

impl EvolutionOperator {
    pub fn new(
        cf: Arc<CoefficientField>,
        settings: EvolutionSettings,
        s: f64,
        t: f64,
    ) -> Result<Self, EvolutionError> {
        if t < s {
            return Err(EvolutionError::BadWindow { s, t });
        }
        Ok(EvolutionOperator {
            cf,
            settings,
            s,
            t,
            kernel_cache: OnceLock::new(),
        })
    }

    /// `G(t,s)f` on the reporting compact (exhausted limit).
    pub fn apply(&self, f: &Expression) -> Result<FieldSample, EvolutionError> {
        self.apply_with_info(f).map(|(u, _)| u)
    }

    pub fn apply_with_info(
        &self,
        f: &Expression,
    ) -> Result<(FieldSample, ApplyInfo), EvolutionError> {
        let (full, info) = self.apply_full(f)?;
        Ok((full.restrict(self.settings.compact_radius)?, info))
    }

    /// Like `apply`, but returns the field on the full final box.
    pub fn apply_full(
        &self,
        f: &Expression,
    ) -> Result<(FieldSample, ApplyInfo), EvolutionError> {
        if self.t == self.s {
            let grid = self.settings.base_grid(self.cf.dim())?;
            let u = FieldSample::from_expression(grid, self.s, f);
            return Ok((
                u,
                ApplyInfo {
                    n_final: 0,
                    radius_final: self.settings.r0,
                    gap: 0.0,
                    converged: true,
                },
            ));
        }
        // intermediate comparison times for the exhaustion gap
        let span = self.t - self.s;
        let probes: Vec<f64> = (1..=4).map(|k| self.s + span * k as f64 / 4.0).collect();
        let res = exhaust(
            &self.cf,
            f,
            self.s,
            self.t,
            &probes,
            &self.settings.exhaust_settings(),
        )?;
        let info = ApplyInfo {
            n_final: res.n_final,
            radius_final: res.radius_final,
            gap: res.gap,
            converged: res.converged,
        };
        if !res.converged && self.settings.strict_budget {
            return Err(EvolutionError::Budget {
                gap: res.gap,
                tol: self.settings.exhaust_tol,
                n_final: res.n_final,
            });
        }
        Ok((res.final_full, info))
    }

    /// Evolve an existing field sample on its own grid (no exhaustion).
    pub fn apply_field(&self, f: &FieldSample) -> Result<FieldSample, EvolutionError> {
        if self.t == self.s {
            return Ok(f.clone());
        }
        let tp = TruncatedProblem::new(
            self.cf.clone(),
            f.grid.clone(),
            self.settings.bc,
            self.s,
            self.t,
            self.settings.dt,
            self.settings.theta,
        )?;
        let traj = solve(&tp, f, &[self.t])?;
        Ok(traj.last().clone())
    }

    /// Default sources: every node of the base grid inside the compact.
    fn default_sources(&self, grid: &Grid) -> Vec<usize> {
        grid.nodes_within(self.settings.compact_radius)
    }

    /// Transition kernel on the base box by hat-function columns (cached).
    pub fn kernel(&self) -> Result<Arc<KernelEstimate>, EvolutionError> {
        if let Some(k) = self.kernel_cache.get() {
            return Ok(k.clone());
        }
        let grid = self.settings.base_grid(self.cf.dim())?;
        let sources = self.default_sources(&grid);
        let k = Arc::new(self.kernel_with_sources(&grid, &sources)?);
        let _ = self.kernel_cache.set(k.clone());
        Ok(k)
    }

    /// Column construction: evolve every cell's hat function (a unit vector
    /// on the nodes) in one batched march and read the source rows.
    pub fn kernel_with_sources(
        &self,
        grid: &Arc<Grid>,
        source_nodes: &[usize],
    ) -> Result<KernelEstimate, EvolutionError> {
        let n = grid.node_count();
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                e
            })
            .collect();
        self.march_forward(grid, &mut cols)?;
        let rows: Vec<Vec<f64>> = source_nodes
            .iter()
            .map(|&i| (0..n).map(|j| cols[j][i]).collect())
            .collect();
        self.finish_kernel(grid, source_nodes, rows)
    }

    /// Adjoint cross-check: each source row via one backward transpose sweep.
    /// Must agree with the column route to solver tolerance.
    pub fn kernel_adjoint_rows(
        &self,
        grid: &Arc<Grid>,
        source_nodes: &[usize],
    ) -> Result<KernelEstimate, EvolutionError> {
        let n = grid.node_count();
        let mut rows: Vec<Vec<f64>> = source_nodes
            .iter()
            .map(|&i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                e
            })
            .collect();
        self.march_adjoint(grid, &mut rows)?;
        self.finish_kernel(grid, source_nodes, rows)
    }

    fn finish_kernel(
        &self,
        grid: &Arc<Grid>,
        source_nodes: &[usize],
        rows: Vec<Vec<f64>>,
    ) -> Result<KernelEstimate, EvolutionError> {
        let shell = 0.95 * grid.radius();
        let row_defect: Vec<f64> = rows
            .iter()
            .map(|row| {
                let sum: f64 = row.iter().sum();
                let outer: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| grid.node_norm(*j) > shell)
                    .map(|(_, v)| v)
                    .sum();
                (1.0 - sum).abs().max(outer)
            })
            .collect();
        let k = KernelEstimate {
            s: self.s,
            t: self.t,
            grid: grid.clone(),
            source_nodes: source_nodes.to_vec(),
            rows,
            row_defect,
        };
        let threshold = 10.0 * self.settings.eps_cons;
        if self.t > self.s && k.max_defect() > threshold {
            return Err(EvolutionError::KernelLeak {
                defect: k.max_defect(),
                threshold,
            });
        }
        Ok(k)
    }

    fn march_forward(
        &self,
        grid: &Arc<Grid>,
        cols: &mut [Vec<f64>],
    ) -> Result<(), EvolutionError> {
        let span = self.t - self.s;
        if span == 0.0 {
            return Ok(());
        }
        let n_steps = (span / self.settings.dt).round().max(1.0) as usize;
        let dt_eff = span / n_steps as f64;
        let mut scheme = ThetaScheme::new(
            self.cf.clone(),
            grid.clone(),
            self.settings.bc,
            self.settings.theta,
            dt_eff,
        )?;
        let mut refs: Vec<&mut Vec<f64>> = cols.iter_mut().collect();
        for k in 0..n_steps {
            scheme.step_columns(self.s + k as f64 * dt_eff, &mut refs)?;
        }
        Ok(())
    }

    fn march_adjoint(
        &self,
        grid: &Arc<Grid>,
        rows: &mut [Vec<f64>],
    ) -> Result<(), EvolutionError> {
        let span = self.t - self.s;
        if span == 0.0 {
            return Ok(());
        }
        let n_steps = (span / self.settings.dt).round().max(1.0) as usize;
        let dt_eff = span / n_steps as f64;
        let mut scheme = ThetaScheme::new(
            self.cf.clone(),
            grid.clone(),
            self.settings.bc,
            self.settings.theta,
            dt_eff,
        )?;
        let mut refs: Vec<&mut Vec<f64>> = rows.iter_mut().collect();
        // transposition reverses the step order
        for k in (0..n_steps).rev() {
            scheme.step_adjoint_columns(self.s + k as f64 * dt_eff, &mut refs)?;
        }
        Ok(())
    }
}

/// Residual of the two-parameter composition law on a corpus of functions:
/// `sup |G(t,r)(G(r,s)f) - G(t,s)f|` on the compact. The two paths run their
/// own exhaustion loops, so the residual reflects genuine truncation and
/// restriction differences.
pub fn check_chapman_kolmogorov(
    cf: &Arc<CoefficientField>,
    settings: &EvolutionSettings,
    s: f64,
    r: f64,
    t: f64,
    corpus: &[(String, Expression)],
) -> Result<CkReport, EvolutionError> {
    if !(s <= r && r <= t) {
        return Err(EvolutionError::BadWindow { s, t: r });
    }
    let op_rs = EvolutionOperator::new(cf.clone(), settings.clone(), s, r)?;
    let op_tr = EvolutionOperator::new(cf.clone(), settings.clone(), r, t)?;
    let op_ts = EvolutionOperator::new(cf.clone(), settings.clone(), s, t)?;
    let mut rows = Vec::new();
    let mut max_residual = 0.0f64;
    for (name, f) in corpus {
        // the direct path resolves an adequate box; the composed path reuses
        // it so that both stages are fully supported
        let (direct_full, _) = op_ts.apply_full(f)?;
        let grid = direct_full.grid.clone();
        let f0 = FieldSample::from_expression(grid, s, f);
        let intermediate = op_rs.apply_field(&f0)?;
        let composed = op_tr
            .apply_field(&intermediate)?
            .restrict(settings.compact_radius)?;
        let direct = direct_full.restrict(settings.compact_radius)?;
        let residual = composed.sup_diff(&direct);
        max_residual = max_residual.max(residual);
        rows.push((name.clone(), residual));
    }
    Ok(CkReport { rows, max_residual })
}

#[derive(Debug, Clone)]
pub struct CkReport {
    pub rows: Vec<(String, f64)>,
    pub max_residual: f64,
}

/// Residual of the backward-variable derivative identity
/// `d/ds G(t,s)f = -G(t,s) A(s) f` by central differencing in `s`.
pub fn s_derivative_residual(
    cf: &Arc<CoefficientField>,
    settings: &EvolutionSettings,
    t: f64,
    s: f64,
    f: &Expression,
    delta: f64,
) -> Result<f64, EvolutionError> {
    // fix the box radius by one exhausted run, then difference on that box
    let base = EvolutionOperator::new(cf.clone(), settings.clone(), s, t)?;
    let (_, info) = base.apply_with_info(f)?;
    let grid = Grid::new(cf.dim(), info.radius_final, settings.h)?;

    let single = |from: f64, field: &FieldSample| -> Result<FieldSample, EvolutionError> {
        let op = EvolutionOperator::new(cf.clone(), settings.clone(), from, t)?;
        Ok(op
            .apply_field(field)?
            .restrict(settings.compact_radius)?)
    };
    let f_plus = FieldSample::from_expression(grid.clone(), s + delta, f);
    let f_minus = FieldSample::from_expression(grid.clone(), s - delta, f);
    let u_plus = single(s + delta, &f_plus)?;
    let u_minus = single(s - delta, &f_minus)?;

    let a_f = cf.apply_operator(f)?;
    let d = cf.dim();
    let af_values: Vec<f64> = (0..grid.node_count())
        .map(|i| {
            let c = grid.coord(i);
            a_f.eval(s, &c[..d])
        })
        .collect();
    let af_field = FieldSample::new(grid, s, af_values);
    let u_af = single(s, &af_field)?;

    let mut residual = 0.0f64;
    for i in 0..u_plus.values.len() {
        let ds = (u_plus.values[i] - u_minus.values[i]) / (2.0 * delta);
        residual = residual.max((ds + u_af.values[i]).abs());
    }
    Ok(residual)
}

/// Lipschitz stabilization report for the smoothing of rough data.
#[derive(Debug, Clone)]
pub struct StrongFellerReport {
    /// `(h, discrete Lipschitz constant of G(t,s) jump on the compact)`.
    pub estimates: Vec<(f64, f64)>,
    pub ratios: Vec<f64>,
    pub pass: bool,
}

/// Evolve the half-space indicator across grid refinements and report the
/// discrete Lipschitz constant of the smoothed output; it must stabilize.
pub fn check_strong_feller(
    cf: &Arc<CoefficientField>,
    settings: &EvolutionSettings,
    s: f64,
    t: f64,
    refinements: usize,
) -> Result<StrongFellerReport, EvolutionError> {
    let d = cf.dim();
    let mut estimates = Vec::new();
    for level in 0..refinements {
        let h = settings.h / f64::powi(2.0, level as i32);
        let grid = Grid::new(d, settings.r0, h)?;
        // half-space indicator sampled with the symmetric midpoint value
        let values: Vec<f64> = (0..grid.node_count())
            .map(|i| {
                let x1 = grid.coord(i)[0];
                if x1 > 0.0 {
                    1.0
                } else if x1 < 0.0 {
                    0.0
                } else {
                    0.5
                }
            })
            .collect();
        let f0 = FieldSample::new(grid.clone(), s, values);
        let op = EvolutionOperator::new(cf.clone(), settings.clone(), s, t)?;
        let u = op.apply_field(&f0)?.restrict(settings.compact_radius)?;
        let mut lip = 0.0f64;
        let sub = &u.grid;
        for i in 0..sub.node_count() {
            let mi = sub.multi_index(i);
            for k in 0..d {
                if mi[k] + 1 < sub.n_per_dim() {
                    let mut mi2 = mi;
                    mi2[k] += 1;
                    let j = sub.flat_index(mi2);
                    lip = lip.max((u.values[j] - u.values[i]).abs() / h);
                }
            }
        }
        estimates.push((h, lip));
    }
    let ratios: Vec<f64> = estimates
        .windows(2)
        .map(|w| w[1].1 / w[0].1)
        .collect();
    let pass = ratios.iter().all(|r| (0.8..=1.25).contains(r));
    Ok(StrongFellerReport {
        estimates,
        ratios,
        pass,
    })
}

/// Joint-continuity diagnostic: oscillation of `(t,s,x) -> G(t,s)f(x)` over
/// shrinking neighborhoods of probe points.
#[derive(Debug, Clone)]
pub struct JointContinuityReport {
    /// Per probe: `(neighborhood radius, oscillation)`.
    pub tables: Vec<Vec<(f64, f64)>>,
    pub pass: bool,
}

pub fn check_joint_continuity(
    cf: &Arc<CoefficientField>,
    settings: &EvolutionSettings,
    f: &Expression,
    probes: &[(f64, f64, f64)],
    radii: &[f64],
) -> Result<JointContinuityReport, EvolutionError> {
    let mut tables = Vec::new();
    for &(t0, s0, x0) in probes {
        let mut table = Vec::new();
        for &rho in radii {
            let mut values = Vec::new();
            for ds in [-rho, 0.0, rho] {
                let s = s0 + ds;
                let out_times = [t0 - rho, t0, t0 + rho];
                // one-sided at the diagonal: keep t >= s
                let valid: Vec<f64> = out_times.iter().copied().filter(|&t| t >= s).collect();
                if valid.is_empty() || s > t0 {
                    continue;
                }
                let es = settings.exhaust_settings();
                let res = exhaust(cf, f, s, *valid.last().unwrap(), &valid, &es)?;
                for fld in &res.trajectory.fields {
                    if !valid.iter().any(|&t| (t - fld.time).abs() < settings.dt) {
                        continue;
                    }
                    let grid = &fld.grid;
                    for dx in [-rho, 0.0, rho] {
                        let x = x0 + dx;
                        if x.abs() <= grid.radius() {
                            values.push(fld.values[grid.nearest_node(&[x, 0.0])]);
                        }
                    }
                }
            }
            let osc = values.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v))
                - values.iter().fold(f64::INFINITY, |a, &v| a.min(v));
            table.push((rho, osc));
        }
        tables.push(table);
    }
    // pass when every probe's oscillation decreases (or is already tiny)
    let pass = tables.iter().all(|tab| {
        tab.windows(2)
            .all(|w| w[1].1 <= 0.9 * w[0].1 + 2.0 * 1e-3)
    });
    Ok(JointContinuityReport { tables, pass })
}
