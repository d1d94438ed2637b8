//! Evolution systems of measures: time-average construction, adjoint
//! transport, and the invariance/tightness/asymptotics diagnostics.
//!
//! Measures are nonnegative cell-weight vectors on the solver grid. All
//! transport goes through the exact transpose of the forward step operators,
//! so the duality `<G(t,s)f, mu_t> = <f, G*(t,s) mu_t>` holds at matrix
//! level. The time average
//! `mu_{t,s} = (t-s)^{-1} int_s^t p_{tau,s}(x_0, .) d tau`
//! is accumulated in a single backward sweep: running the suffix recursion
//! `R_k = w_k e + S_k^T R_{k+1}` from the horizon down to `s` produces
//! `sum_k w_k (M_{k<-s})^T e` without ever forming a kernel matrix.

use crate::evolution::{EvolutionError, EvolutionOperator, EvolutionSettings};
use crate::expr::{Expression, Program};
use crate::grid::{FieldSample, Grid};
use crate::problem::CoefficientField;
use crate::solver::ThetaScheme;
use std::fmt::Write as _;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("weights contain a negative entry {value:e} at cell {cell}")]
    NegativeWeight { cell: usize, value: f64 },
    #[error("total mass {total} deviates from 1 beyond eps_meas={eps}")]
    MassDefect { total: f64, eps: f64 },
    #[error("time-average ladder not Cauchy within eps_KB={eps} (last gap {gap})")]
    KbNotConverged { gap: f64, eps: f64 },
    #[error("no anchor at or above requested time {0}")]
    NoAnchorAbove(f64),
    #[error("renormalization factor {0} outside the tolerated band")]
    Renormalization(f64),
    #[error("asymptotics check needs omega < 0 (got {0})")]
    NotContractive(f64),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Solver(#[from] crate::solver::SolverError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

/// Nonnegative cell weights summing to one (within `eps_meas`).
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    pub grid: Arc<Grid>,
    pub weights: Vec<f64>,
    pub time: f64,
}

impl DiscreteMeasure {
    /// Wrap raw weights: clamps solver-level negative dust, rejects genuinely
    /// negative entries, checks the mass budget.
    pub fn new(
        grid: Arc<Grid>,
        mut weights: Vec<f64>,
        time: f64,
        eps_meas: f64,
    ) -> Result<Self, MeasureError> {
        for (cell, w) in weights.iter_mut().enumerate() {
            if *w < 0.0 {
                if *w < -1e-9 {
                    return Err(MeasureError::NegativeWeight { cell, value: *w });
                }
                *w = 0.0;
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > eps_meas {
            return Err(MeasureError::MassDefect {
                total,
                eps: eps_meas,
            });
        }
        Ok(DiscreteMeasure { grid, weights, time })
    }

    pub fn point_mass(grid: Arc<Grid>, x: &[f64], time: f64) -> Self {
        let mut weights = vec![0.0; grid.node_count()];
        weights[grid.nearest_node(x)] = 1.0;
        DiscreteMeasure { grid, weights, time }
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `int f d mu` for a compiled scalar function evaluated at time `t`.
    pub fn expect_program(&self, p: &Program, t: f64) -> f64 {
        let d = self.grid.dim();
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let c = self.grid.coord(i);
                w * p.eval(t, &c[..d])
            })
            .sum()
    }

    /// `int f d mu` for a field on the same grid.
    pub fn expect_field(&self, f: &FieldSample) -> f64 {
        debug_assert_eq!(f.values.len(), self.weights.len());
        self.weights.iter().zip(&f.values).map(|(w, v)| w * v).sum()
    }

    /// The p-th moment `int |x|^p d mu`.
    pub fn moment(&self, p: f64) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * self.grid.node_norm(i).powf(p))
            .sum()
    }

    pub fn mass_outside(&self, rho: f64) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .filter(|(i, _)| self.grid.node_norm(*i) > rho)
            .map(|(_, w)| w)
            .sum()
    }

    pub fn tv_distance(&self, other: &DiscreteMeasure) -> f64 {
        crate::closed_form::tv_distance(&self.weights, &other.weights)
    }

    /// Minimum `weight / cell volume` over the cells inside `rho`.
    pub fn min_density_within(&self, rho: f64) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .filter(|(i, _)| self.grid.node_norm(*i) <= rho)
            .map(|(i, w)| w / self.grid.cell_volume(i))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# measure t={} on d={} R={} h={}",
            self.time,
            self.grid.dim(),
            self.grid.radius(),
            self.grid.h()
        );
        let _ = writeln!(
            out,
            "{}",
            if self.grid.dim() == 1 {
                "x1,weight,density"
            } else {
                "x1,x2,weight,density"
            }
        );
        for (i, w) in self.weights.iter().enumerate() {
            let c = self.grid.coord(i);
            let dens = w / self.grid.cell_volume(i);
            if self.grid.dim() == 1 {
                let _ = writeln!(out, "{},{},{}", c[0], w, dens);
            } else {
                let _ = writeln!(out, "{},{},{},{}", c[0], c[1], w, dens);
            }
        }
        out
    }
}

/// Settings for measure construction on top of the evolution settings.
#[derive(Debug, Clone)]
pub struct MeasureSettings {
    pub evo: EvolutionSettings,
    /// Time step of the long-horizon sweeps (coarser than the solver's).
    pub dt: f64,
    /// Quadrature density of the time average: every `quad_stride`-th step.
    pub quad_stride: usize,
    pub eps_meas: f64,
    /// TV-Cauchy threshold of the horizon ladder.
    pub eps_kb: f64,
    /// Horizon ladder for the time averages.
    pub horizons: Vec<f64>,
}

impl Default for MeasureSettings {
    fn default() -> Self {
        MeasureSettings {
            evo: EvolutionSettings::default(),
            dt: 5e-3,
            quad_stride: 1,
            eps_meas: 1e-3,
            eps_kb: 1e-2,
            horizons: vec![5.0, 10.0, 20.0, 40.0],
        }
    }
}

/// Backward transpose sweep over `[from, to]`: `v <- S_k^T v` for
/// `k = K-1 .. 0`, with a per-index injection hook fired before each
/// application and once more at the end (used by the quadrature
/// accumulation; index `K` fires first, index `0` last).
fn adjoint_sweep(
    cf: &Arc<CoefficientField>,
    ms: &MeasureSettings,
    from: f64,
    to: f64,
    v: &mut Vec<f64>,
    mut inject: impl FnMut(usize, &mut Vec<f64>),
) -> Result<(), MeasureError> {
    let span = to - from;
    if span <= 0.0 {
        inject(0, v);
        return Ok(());
    }
    let grid = ms.evo.base_grid(cf.dim())?;
    let n_steps = (span / ms.dt).round().max(1.0) as usize;
    let dt_eff = span / n_steps as f64;
    let mut scheme = ThetaScheme::new(cf.clone(), grid, ms.evo.bc, ms.evo.theta, dt_eff)?;
    for k in (0..n_steps).rev() {
        inject(k + 1, v);
        scheme.step_adjoint_columns(from + k as f64 * dt_eff, &mut [v])?;
    }
    inject(0, v);
    Ok(())
}

/// The time-average measure
/// `mu_{t,s} = (t-s)^{-1} int_s^t p_{tau,s}(x_0, .) d tau`
/// by trapezoid quadrature at every `quad_stride`-th step.
pub fn time_average_measure(
    cf: &Arc<CoefficientField>,
    ms: &MeasureSettings,
    s: f64,
    x0: &[f64],
    t: f64,
) -> Result<DiscreteMeasure, MeasureError> {
    let grid = ms.evo.base_grid(cf.dim())?;
    let n = grid.node_count();
    let src = grid.nearest_node(x0);
    let span = t - s;
    if span <= 0.0 {
        return Ok(DiscreteMeasure::point_mass(grid, x0, t));
    }
    let n_steps = (span / ms.dt).round().max(1.0) as usize;
    let dt_eff = span / n_steps as f64;
    // quadrature step indices and trapezoid weights normalized by the span
    let mut quads: Vec<usize> = (0..=n_steps).step_by(ms.quad_stride.max(1)).collect();
    if *quads.last().unwrap() != n_steps {
        quads.push(n_steps);
    }
    let weights: Vec<f64> = (0..quads.len())
        .map(|m| {
            let prev = if m == 0 { quads[0] } else { quads[m - 1] };
            let next = if m + 1 == quads.len() { quads[m] } else { quads[m + 1] };
            0.5 * (next - prev) as f64 * dt_eff / span
        })
        .collect();

    let mut acc = vec![0.0; n];
    adjoint_sweep(cf, ms, s, t, &mut acc, |k, v| {
        if let Ok(m) = quads.binary_search(&k) {
            v[src] += weights[m];
        }
    })?;
    let total: f64 = acc.iter().sum();
    if total > 0.0 {
        for w in &mut acc {
            *w /= total;
        }
    }
    DiscreteMeasure::new(grid, acc, t, ms.eps_meas)
}

/// Pull a measure at time `t` back to time `s <= t` through the kernel
/// transpose. Returns the measure and the logged renormalization factor.
pub fn adjoint_propagate(
    cf: &Arc<CoefficientField>,
    ms: &MeasureSettings,
    mu: &DiscreteMeasure,
    t: f64,
    s: f64,
) -> Result<(DiscreteMeasure, f64), MeasureError> {
    let mut v = mu.weights.clone();
    adjoint_sweep(cf, ms, s, t, &mut v, |_, _| {})?;
    let total: f64 = v.iter().sum();
    let band = 10.0 * ms.evo.eps_cons;
    if (total - 1.0).abs() > band {
        return Err(MeasureError::Renormalization(total));
    }
    let renorm = 1.0 / total;
    for w in &mut v {
        *w *= renorm;
    }
    Ok((
        DiscreteMeasure::new(mu.grid.clone(), v, s, ms.eps_meas)?,
        renorm,
    ))
}

/// An evolution system of measures: independently averaged anchors plus
/// adjoint transport in between.
#[derive(Debug, Clone)]
pub struct EvolutionSystem {
    pub anchors: Vec<(f64, DiscreteMeasure)>,
    /// `(anchor, horizon, TV gap to the previous rung)` rows of the ladder.
    pub ladder: Vec<(f64, f64, f64)>,
}

impl EvolutionSystem {
    /// The member at time `s`: an anchor if present, otherwise the next
    /// anchor above propagated backward.
    pub fn member(
        &self,
        cf: &Arc<CoefficientField>,
        ms: &MeasureSettings,
        s: f64,
    ) -> Result<DiscreteMeasure, MeasureError> {
        if let Some((_, mu)) = self.anchors.iter().find(|(a, _)| (a - s).abs() < 1e-12) {
            return Ok(mu.clone());
        }
        let above = self
            .anchors
            .iter()
            .filter(|(a, _)| *a > s)
            .min_by(|x, y| x.0.total_cmp(&y.0))
            .ok_or(MeasureError::NoAnchorAbove(s))?;
        adjoint_propagate(cf, ms, &above.1, above.0, s).map(|(mu, _)| mu)
    }

    pub fn moment_table(&self, p: f64) -> Vec<(f64, f64)> {
        self.anchors
            .iter()
            .map(|(a, mu)| (*a, mu.moment(p)))
            .collect()
    }
}

/// Construct the system: at each anchor run the horizon ladder of time
/// averages until TV-Cauchy within `eps_kb`.
pub fn build_evolution_system(
    cf: &Arc<CoefficientField>,
    ms: &MeasureSettings,
    x0: &[f64],
    anchors: &[f64],
) -> Result<EvolutionSystem, MeasureError> {
    let mut out = Vec::new();
    let mut ladder = Vec::new();
    for &a in anchors {
        let mut prev: Option<DiscreteMeasure> = None;
        let mut last_gap = f64::INFINITY;
        for &horizon in &ms.horizons {
            let mut mu = time_average_measure(cf, ms, a, x0, a + horizon)?;
            mu.time = a; // the average represents the system member at the anchor
            if let Some(p) = &prev {
                last_gap = p.tv_distance(&mu);
                ladder.push((a, horizon, last_gap));
            }
            prev = Some(mu);
        }
        // converged iff the final rung certifies Cauchy-ness; the member is
        // the longest-horizon average (the best proxy of the limit)
        if last_gap > ms.eps_kb {
            return Err(MeasureError::KbNotConverged {
                gap: last_gap,
                eps: ms.eps_kb,
            });
        }
        out.push((a, prev.expect("ladder nonempty")));
    }
    Ok(EvolutionSystem {
        anchors: out,
        ladder,
    })
}

/// Max over the corpus and pairs of `|int G(t,s)f d mu_t - int f d mu_s|`,
/// with the per-row sup norm of `f` for scaling.
#[derive(Debug, Clone)]
pub struct InvarianceReport {
    /// `(name, t, s, residual, sup |f|)` rows.
    pub rows: Vec<(String, f64, f64, f64, f64)>,
    pub max_scaled: f64,
}

pub fn invariance_residual(
    cf: &Arc<CoefficientField>,
    ms: &MeasureSettings,
    system: &EvolutionSystem,
    corpus: &[(String, Expression)],
    pairs: &[(f64, f64)],
) -> Result<InvarianceReport, MeasureError> {
    let grid = ms.evo.base_grid(cf.dim())?;
    let mut rows = Vec::new();
    let mut max_scaled = 0.0f64;
    for &(t, s) in pairs {
        let mu_t = system.member(cf, ms, t)?;
        let mu_s = system.member(cf, ms, s)?;
        let op = EvolutionOperator::new(cf.clone(), ms.evo.clone(), s, t)?;
        for (name, f) in corpus {
            let f0 = FieldSample::from_expression(grid.clone(), s, f);
            let gf = op.apply_field(&f0)?;
            let lhs = mu_t.expect_field(&gf);
            let rhs = mu_s.expect_field(&f0);
            let sup = f0.sup_norm().max(1e-300);
            let residual = (lhs - rhs).abs();
            max_scaled = max_scaled.max(residual / sup);
            rows.push((name.clone(), t, s, residual, sup));
        }
    }
    Ok(InvarianceReport { rows, max_scaled })
}

/// Tail-mass table `sup_measures mass(|x| > rho)` over a rho ladder.
#[derive(Debug, Clone)]
pub struct TightnessTable {
    pub rows: Vec<(f64, f64)>,
    /// Set when the outermost tail mass fails to become small.
    pub escaping: bool,
}

pub fn tightness_diagnostic(measures: &[&DiscreteMeasure], rho_ladder: &[f64]) -> TightnessTable {
    let rows: Vec<(f64, f64)> = rho_ladder
        .iter()
        .map(|&rho| {
            let sup = measures
                .iter()
                .map(|m| m.mass_outside(rho))
                .fold(0.0f64, f64::max);
            (rho, sup)
        })
        .collect();
    let escaping = rows.last().is_some_and(|(_, m)| *m > 0.1);
    TightnessTable { rows, escaping }
}

/// Long-time convergence report: gap per ladder rung and the fitted rate.
#[derive(Debug, Clone)]
pub struct AsymptoticsReport {
    /// `(t, sup over the compact of |G(t,s)f - int f d mu_s|)`.
    pub rungs: Vec<(f64, f64)>,
    pub fitted_rate: f64,
    pub bound_rate: f64,
    pub pass: bool,
}

/// Check that `G(t,s)f` approaches `int f d mu_s` on the compact with an
/// exponential rate no worse than `p * omega` (up to 15%).
#[allow(clippy::too_many_arguments)]
pub fn check_asymptotics(
    cf: &Arc<CoefficientField>,
    ms: &MeasureSettings,
    system: &EvolutionSystem,
    f: &Expression,
    s: f64,
    t_ladder: &[f64],
    p: f64,
    omega: f64,
) -> Result<AsymptoticsReport, MeasureError> {
    if omega >= 0.0 {
        return Err(MeasureError::NotContractive(omega));
    }
    let grid = ms.evo.base_grid(cf.dim())?;
    let mu_s = system.member(cf, ms, s)?;
    let f0 = FieldSample::from_expression(grid.clone(), s, f);
    let target = mu_s.expect_field(&f0);
    let mut rungs = Vec::new();
    for &t in t_ladder {
        let op = EvolutionOperator::new(cf.clone(), ms.evo.clone(), s, t)?;
        let gf = op.apply_field(&f0)?.restrict(ms.evo.compact_radius)?;
        let gap = gf
            .values
            .iter()
            .fold(0.0f64, |m, v| m.max((v - target).abs()));
        rungs.push((t, gap));
    }
    let pts: Vec<(f64, f64)> = rungs
        .iter()
        .filter(|(_, g)| *g > 1e-12)
        .map(|(t, g)| (t - s, g.ln()))
        .collect();
    let fitted_rate = least_squares_slope(&pts);
    let bound_rate = p * omega;
    let decays = rungs.windows(2).all(|w| w[1].1 <= w[0].1 * 1.05);
    let pass = decays && fitted_rate <= bound_rate + 0.15 * bound_rate.abs();
    Ok(AsymptoticsReport {
        rungs,
        fitted_rate,
        bound_rate,
        pass,
    })
}

/// Minimum cell density over the compact across the family members.
pub fn check_lebesgue_equivalence(system: &EvolutionSystem, rho: f64) -> (f64, bool) {
    let min = system
        .anchors
        .iter()
        .map(|(_, mu)| mu.min_density_within(rho))
        .fold(f64::INFINITY, f64::min);
    (min, min > 0.0)
}

pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
