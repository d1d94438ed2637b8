//! The space-time evolution semigroup `(T(t)f)(s,x) = (G(s, s-t) f(s-t, .))(x)`
//! on slab fields, the space-time measure built from the evolution system,
//! and the invariance/contraction checks against it.
//!
//! Time shifts are restricted to slab-lattice multiples: the translation part
//! of the semigroup is then exact on the lattice, and space-constant slices
//! translate bitwise (conservation makes `G c = c` an operator identity).

use crate::evolution::{EvolutionError, EvolutionOperator, EvolutionSettings};
use crate::expr::{Expression, Var};
use crate::grid::{FieldSample, Grid};
use crate::measures::{
    adjoint_propagate, time_average_measure, DiscreteMeasure, MeasureError, MeasureSettings,
};
use crate::problem::{CoefficientField, ProblemError};
use std::fmt::Write as _;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SemigroupError {
    #[error("shift {t} is not a nonnegative multiple of the slab spacing {ds}")]
    OffLattice { t: f64, ds: f64 },
    #[error("lookback leaves the slab: need {needed} slices, have {have}")]
    LookbackOutsideSlab { needed: usize, have: usize },
    #[error("support touches the slab boundary (margin {margin} slices)")]
    SupportTouchesBoundary { margin: usize },
    #[error("norm of f is zero; contraction ratio undefined")]
    ZeroNorm,
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Expr(#[from] crate::expr::ExprError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

/// Uniform time lattice `lo + k ds`, `k = 0 .. count-1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeLattice {
    pub lo: f64,
    pub ds: f64,
    pub count: usize,
}

impl TimeLattice {
    pub fn time(&self, k: usize) -> f64 {
        self.lo + k as f64 * self.ds
    }

    pub fn hi(&self) -> f64 {
        self.time(self.count.saturating_sub(1))
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(|k| self.time(k))
    }

    fn shift_steps(&self, t: f64) -> Result<usize, SemigroupError> {
        let m = t / self.ds;
        let rounded = m.round();
        if t < -1e-12 || (m - rounded).abs() > 1e-9 {
            return Err(SemigroupError::OffLattice { t, ds: self.ds });
        }
        Ok(rounded as usize)
    }
}

/// Values on (time lattice) x (spatial grid).
#[derive(Debug, Clone)]
pub struct SpaceTimeField {
    pub lattice: TimeLattice,
    pub grid: Arc<Grid>,
    /// One value vector per lattice time.
    pub slices: Vec<Vec<f64>>,
}

impl SpaceTimeField {
    pub fn from_expression(
        lattice: TimeLattice,
        grid: Arc<Grid>,
        f: &Expression,
    ) -> SpaceTimeField {
        let prog = f.compile();
        let d = grid.dim();
        let slices = lattice
            .times()
            .map(|s| {
                (0..grid.node_count())
                    .map(|i| {
                        let c = grid.coord(i);
                        prog.eval(s, &c[..d])
                    })
                    .collect()
            })
            .collect();
        SpaceTimeField {
            lattice,
            grid,
            slices,
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.slices
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.slices
            .iter()
            .flat_map(|s| s.iter())
            .fold(f64::INFINITY, |m, v| m.min(*v))
    }

    /// Sup difference over the common (trailing) lattice window.
    pub fn sup_diff_on_common(&self, other: &SpaceTimeField) -> f64 {
        let skip_a = self.slices.len().saturating_sub(other.slices.len().min(self.slices.len()));
        let skip_b = other.slices.len().saturating_sub(self.slices.len().min(other.slices.len()));
        self.slices[skip_a..]
            .iter()
            .zip(&other.slices[skip_b..])
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# slab lo={} ds={} count={} grid R={} h={}",
            self.lattice.lo,
            self.lattice.ds,
            self.lattice.count,
            self.grid.radius(),
            self.grid.h()
        );
        let _ = writeln!(
            out,
            "{}",
            if self.grid.dim() == 1 {
                "s,x1,value"
            } else {
                "s,x1,x2,value"
            }
        );
        for (k, slice) in self.slices.iter().enumerate() {
            let s = self.lattice.time(k);
            for (i, v) in slice.iter().enumerate() {
                let c = self.grid.coord(i);
                if self.grid.dim() == 1 {
                    let _ = writeln!(out, "{},{},{}", s, c[0], v);
                } else {
                    let _ = writeln!(out, "{},{},{},{}", s, c[0], c[1], v);
                }
            }
        }
        out
    }
}

/// The space-time measure: per-slice members of the evolution system with
/// uniform `ds` quadrature (trapezoid halves at the slab ends).
#[derive(Debug, Clone)]
pub struct SpaceTimeMeasure {
    pub lattice: TimeLattice,
    pub slices: Vec<DiscreteMeasure>,
}

impl SpaceTimeMeasure {
    /// Quadrature weight of slice `k`.
    pub fn weight(&self, k: usize) -> f64 {
        if k == 0 || k + 1 == self.lattice.count {
            0.5 * self.lattice.ds
        } else {
            self.lattice.ds
        }
    }

    /// Slab length represented by the quadrature.
    pub fn span(&self) -> f64 {
        self.lattice.ds * (self.lattice.count.saturating_sub(1)) as f64
    }
}

/// Build the space-time measure over a slab: one long time average at the
/// top of the slab, then one backward sweep collecting every slice.
pub fn build_space_time_measure(
    cf: &Arc<CoefficientField>,
    ms: &MeasureSettings,
    lattice: TimeLattice,
    x0: &[f64],
) -> Result<SpaceTimeMeasure, SemigroupError> {
    let top = lattice.hi();
    let horizon = ms.horizons.last().copied().unwrap_or(40.0);
    let mut mu_top = time_average_measure(cf, ms, top, x0, top + horizon)?;
    mu_top.time = top;
    let mut slices = vec![mu_top];
    for k in (0..lattice.count - 1).rev() {
        let upper = slices.last().unwrap().clone();
        let (mu, _) = adjoint_propagate(cf, ms, &upper, upper.time, lattice.time(k))?;
        slices.push(mu);
    }
    slices.reverse();
    Ok(SpaceTimeMeasure { lattice, slices })
}

/// One application of the space-time semigroup. The output lives on the slab
/// trimmed by the lookback; space-constant slices translate bitwise.
pub fn apply_t(
    cf: &Arc<CoefficientField>,
    es: &EvolutionSettings,
    f: &SpaceTimeField,
    t: f64,
) -> Result<SpaceTimeField, SemigroupError> {
    let m = f.lattice.shift_steps(t)?;
    if m >= f.lattice.count {
        return Err(SemigroupError::LookbackOutsideSlab {
            needed: m,
            have: f.lattice.count,
        });
    }
    let out_lattice = TimeLattice {
        lo: f.lattice.time(m),
        ds: f.lattice.ds,
        count: f.lattice.count - m,
    };
    let mut slices = Vec::with_capacity(out_lattice.count);
    for k in 0..out_lattice.count {
        let s_out = out_lattice.time(k);
        let src = &f.slices[k]; // slice at s_out - t
        let constant = src.windows(2).all(|w| w[0] == w[1]);
        if m == 0 || constant {
            // pure translation on the lattice (conservation: G c = c)
            slices.push(src.clone());
            continue;
        }
        let field = FieldSample::new(f.grid.clone(), s_out - t, src.clone());
        let op = EvolutionOperator::new(cf.clone(), es.clone(), s_out - t, s_out)?;
        slices.push(op.apply_field(&field)?.values);
    }
    Ok(SpaceTimeField {
        lattice: out_lattice,
        grid: f.grid.clone(),
        slices,
    })
}

/// Sup-norm residual of the composition law `T(t2) T(t1) = T(t1 + t2)` on
/// the common output window.
pub fn check_semigroup_law(
    cf: &Arc<CoefficientField>,
    es: &EvolutionSettings,
    f: &SpaceTimeField,
    t1: f64,
    t2: f64,
) -> Result<f64, SemigroupError> {
    let one = apply_t(cf, es, f, t1)?;
    let two = apply_t(cf, es, &one, t2)?;
    let direct = apply_t(cf, es, f, t1 + t2)?;
    Ok(two.sup_diff_on_common(&direct))
}

/// `int phi d nu` over the slab by cell/slice quadrature.
pub fn nu_integral(phi: &SpaceTimeField, nu: &SpaceTimeMeasure) -> f64 {
    debug_assert_eq!(phi.lattice.ds, nu.lattice.ds);
    // align by time: phi's lattice may be a trailing sub-window of nu's
    let offset = ((phi.lattice.lo - nu.lattice.lo) / nu.lattice.ds).round() as isize;
    let mut acc = 0.0;
    for (k, slice) in phi.slices.iter().enumerate() {
        let j = k as isize + offset;
        if j < 0 || j as usize >= nu.slices.len() {
            continue;
        }
        let j = j as usize;
        let inner: f64 = slice
            .iter()
            .zip(&nu.slices[j].weights)
            .map(|(v, w)| v * w)
            .sum();
        acc += nu.weight(j) * inner;
    }
    acc
}

/// `|int T(t) phi d nu - int phi d nu|` for compactly supported `phi`.
pub fn check_t_invariance(
    cf: &Arc<CoefficientField>,
    es: &EvolutionSettings,
    phi: &SpaceTimeField,
    nu: &SpaceTimeMeasure,
    t: f64,
) -> Result<f64, SemigroupError> {
    let shifted = apply_t(cf, es, phi, t)?;
    Ok((nu_integral(&shifted, nu) - nu_integral(phi, nu)).abs())
}

/// Quadrature of `G phi = A(t)phi - d_t phi` against `nu`, with the scale
/// `sup |G phi| * |support|` for the tolerance. `phi` is a space-time
/// expression whose support must stay inside the slab interior.
pub fn infinitesimal_invariance_residual(
    cf: &Arc<CoefficientField>,
    phi: &Expression,
    nu: &SpaceTimeMeasure,
) -> Result<(f64, f64), SemigroupError> {
    let d = cf.dim();
    let a_phi = cf.apply_operator(phi)?;
    let dt_phi = phi.diff(Var::Time)?.compile();
    let phi_prog = phi.compile();

    // effective support on the lattice and the slab-interior check
    let grid = &nu.slices[0].grid;
    let tiny = 1e-12;
    let mut support_slices = 0usize;
    let mut first_active = usize::MAX;
    let mut last_active = 0usize;
    for (k, _) in nu.slices.iter().enumerate() {
        let s = nu.lattice.time(k);
        let active = (0..grid.node_count()).any(|i| {
            let c = grid.coord(i);
            phi_prog.eval(s, &c[..d]).abs() > tiny
        });
        if active {
            support_slices += 1;
            first_active = first_active.min(k);
            last_active = last_active.max(k);
        }
    }
    if support_slices > 0 && (first_active == 0 || last_active + 1 == nu.lattice.count) {
        return Err(SemigroupError::SupportTouchesBoundary { margin: 0 });
    }

    let mut acc = 0.0;
    let mut sup_g = 0.0f64;
    for (k, mu) in nu.slices.iter().enumerate() {
        let s = nu.lattice.time(k);
        let mut inner = 0.0;
        for (i, w) in mu.weights.iter().enumerate() {
            let c = grid.coord(i);
            let g = a_phi.eval(s, &c[..d]) - dt_phi.eval(s, &c[..d]);
            sup_g = sup_g.max(g.abs());
            inner += g * w;
        }
        acc += nu.weight(k) * inner;
    }
    let support_len = support_slices as f64 * nu.lattice.ds;
    let scale = sup_g * support_len.max(nu.lattice.ds);
    Ok((acc.abs(), scale))
}

/// `||T(t)f||_{L^p(nu)} / ||f||_{L^p(nu)}` for supported `f` with slab margin.
pub fn check_lp_contraction(
    cf: &Arc<CoefficientField>,
    es: &EvolutionSettings,
    f: &SpaceTimeField,
    nu: &SpaceTimeMeasure,
    t: f64,
    p: f64,
) -> Result<f64, SemigroupError> {
    let norm = |field: &SpaceTimeField| -> f64 {
        let offset = ((field.lattice.lo - nu.lattice.lo) / nu.lattice.ds).round() as isize;
        let mut acc = 0.0;
        for (k, slice) in field.slices.iter().enumerate() {
            let j = k as isize + offset;
            if j < 0 || j as usize >= nu.slices.len() {
                continue;
            }
            let j = j as usize;
            let inner: f64 = slice
                .iter()
                .zip(&nu.slices[j].weights)
                .map(|(v, w)| v.abs().powf(p) * w)
                .sum();
            acc += nu.weight(j) * inner;
        }
        acc.powf(1.0 / p)
    };
    let denom = norm(f);
    if denom <= 0.0 {
        return Err(SemigroupError::ZeroNorm);
    }
    let shifted = apply_t(cf, es, f, t)?;
    Ok(norm(&shifted) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::presets::preset;

    fn slab() -> TimeLattice {
        TimeLattice {
            lo: 0.0,
            ds: 0.1,
            count: 21,
        }
    }

    fn setup() -> (Arc<CoefficientField>, EvolutionSettings, MeasureSettings) {
        let cf = Arc::new(preset("ou-autonomous").unwrap().cf);
        let es = EvolutionSettings::default();
        let ms = MeasureSettings::default();
        (cf, es, ms)
    }

    #[test]
    fn time_only_data_translates_exactly() {
        let (cf, es, _) = setup();
        let grid = es.base_grid(1).unwrap();
        let f = SpaceTimeField::from_expression(slab(), grid, &parse("sin(t)", 1).unwrap());
        let shifted = apply_t(&cf, &es, &f, 0.5).unwrap();
        // (T(t)f)(s) = f(s - t): bitwise equality with the source slices
        for (k, slice) in shifted.slices.iter().enumerate() {
            for (a, b) in slice.iter().zip(&f.slices[k]) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(shifted.lattice.count, 16);
    }

    #[test]
    fn zero_shift_is_identity() {
        let (cf, es, _) = setup();
        let grid = es.base_grid(1).unwrap();
        let f =
            SpaceTimeField::from_expression(slab(), grid, &parse("sin(t)*x1", 1).unwrap());
        let same = apply_t(&cf, &es, &f, 0.0).unwrap();
        assert_eq!(same.slices, f.slices);
    }

    #[test]
    fn off_lattice_shift_rejected() {
        let (cf, es, _) = setup();
        let grid = es.base_grid(1).unwrap();
        let f = SpaceTimeField::from_expression(slab(), grid, &parse("x1", 1).unwrap());
        assert!(matches!(
            apply_t(&cf, &es, &f, 0.05),
            Err(SemigroupError::OffLattice { .. })
        ));
        assert!(matches!(
            apply_t(&cf, &es, &f, 2.1),
            Err(SemigroupError::LookbackOutsideSlab { .. })
        ));
    }

    #[test]
    fn time_constant_data_matches_family() {
        let (cf, es, _) = setup();
        let grid = es.base_grid(1).unwrap();
        let h = parse("exp(-abs2(x)/2)", 1).unwrap();
        let f = SpaceTimeField::from_expression(slab(), grid.clone(), &h);
        let t = 0.5;
        let shifted = apply_t(&cf, &es, &f, t).unwrap();
        // same code path as the family application
        let k = 3usize;
        let s_out = shifted.lattice.time(k);
        let op = EvolutionOperator::new(cf.clone(), es.clone(), s_out - t, s_out).unwrap();
        let f0 = FieldSample::from_expression(grid, s_out - t, &h);
        let direct = op.apply_field(&f0).unwrap();
        for (a, b) in shifted.slices[k].iter().zip(&direct.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn semigroup_law_residuals() {
        let (cf, es, _) = setup();
        let grid = es.base_grid(1).unwrap();
        // space-constant: exact composition
        let f = SpaceTimeField::from_expression(slab(), grid.clone(), &parse("sin(t)", 1).unwrap());
        let r = check_semigroup_law(&cf, &es, &f, 0.3, 0.4).unwrap();
        assert_eq!(r, 0.0);
        // t1 = 0 keeps everything on one code path
        let g = SpaceTimeField::from_expression(slab(), grid.clone(), &parse("sin(t)*x1", 1).unwrap());
        let r = check_semigroup_law(&cf, &es, &g, 0.0, 0.5).unwrap();
        assert!(r <= 1e-12, "residual {r}");
        // general space-time data
        let r = check_semigroup_law(&cf, &es, &g, 0.3, 0.4).unwrap();
        assert!(r <= 5e-3, "residual {r}");
    }

    #[test]
    fn nu_integral_of_one_is_slab_length() {
        let (cf, _, ms) = setup();
        let nu = build_space_time_measure(&cf, &ms, slab(), &[0.0]).unwrap();
        let grid = nu.slices[0].grid.clone();
        let one = SpaceTimeField::from_expression(slab(), grid, &parse("1", 1).unwrap());
        let total = nu_integral(&one, &nu);
        let span = nu.span();
        assert!(
            (total - span).abs() <= span * ms.eps_meas + 1e-9,
            "{total} vs {span}"
        );
    }

    #[test]
    fn nu_integral_second_moment_against_variance_oracle() {
        let (cf, _, ms) = setup();
        let nu = build_space_time_measure(&cf, &ms, slab(), &[0.0]).unwrap();
        let grid = nu.slices[0].grid.clone();
        let x2 = SpaceTimeField::from_expression(slab(), grid, &parse("x1^2", 1).unwrap());
        let total = nu_integral(&x2, &nu);
        // the autonomous member variance is 1 at every slice
        let span = nu.span();
        assert!((total - span).abs() <= 2e-2 * span, "{total} vs {span}");
    }

    #[test]
    fn odd_functions_integrate_to_zero() {
        let (cf, _, ms) = setup();
        let nu = build_space_time_measure(&cf, &ms, slab(), &[0.0]).unwrap();
        let grid = nu.slices[0].grid.clone();
        let odd = SpaceTimeField::from_expression(slab(), grid, &parse("x1", 1).unwrap());
        let total = nu_integral(&odd, &nu);
        assert!(total.abs() <= 1e-2, "{total}");
    }

    #[test]
    fn t_invariance_of_bump() {
        let (cf, es, ms) = setup();
        let nu = build_space_time_measure(&cf, &ms, slab(), &[0.0]).unwrap();
        let grid = nu.slices[0].grid.clone();
        // time bump centered mid-slab, space factor x^2
        let phi_expr = parse("exp(-(t-0.7)^2/0.01)*x1^2", 1).unwrap();
        let phi = SpaceTimeField::from_expression(slab(), grid, &phi_expr);
        let r = check_t_invariance(&cf, &es, &phi, &nu, 0.5).unwrap();
        let scale = phi.sup_norm();
        assert!(r <= 2e-2 * scale.max(1.0), "residual {r}");
        let r0 = check_t_invariance(&cf, &es, &phi, &nu, 0.0).unwrap();
        assert_eq!(r0, 0.0);
    }

    #[test]
    fn infinitesimal_invariance_of_bumps() {
        let (cf, _, ms) = setup();
        let dense = TimeLattice {
            lo: 0.0,
            ds: 0.05,
            count: 41,
        };
        let nu = build_space_time_measure(&cf, &ms, dense, &[0.0]).unwrap();
        // time-only bump: G phi = -phi_t integrates to ~0 by the telescoping
        // of the time derivative
        let phi_t = parse("exp(-(t-1)^2/0.02)", 1).unwrap();
        let (r, scale) = infinitesimal_invariance_residual(&cf, &phi_t, &nu).unwrap();
        assert!(r <= 2e-2 * scale, "time-only: {r} vs scale {scale}");
        // genuine space-time bump
        let phi = parse("exp(-(t-1)^2/0.02)*exp(-abs2(x))", 1).unwrap();
        let (r, scale) = infinitesimal_invariance_residual(&cf, &phi, &nu).unwrap();
        assert!(r <= 2e-2 * scale, "bump: {r} vs scale {scale}");
    }

    #[test]
    fn infinitesimal_invariance_rejects_boundary_support() {
        let (cf, _, ms) = setup();
        let nu = build_space_time_measure(&cf, &ms, slab(), &[0.0]).unwrap();
        let phi = parse("exp(-(t-0)^2/0.01)", 1).unwrap(); // centered at the slab edge
        assert!(matches!(
            infinitesimal_invariance_residual(&cf, &phi, &nu),
            Err(SemigroupError::SupportTouchesBoundary { .. })
        ));
    }

    #[test]
    fn lp_contraction() {
        let (cf, es, ms) = setup();
        let nu = build_space_time_measure(&cf, &ms, slab(), &[0.0]).unwrap();
        let grid = nu.slices[0].grid.clone();
        let f = SpaceTimeField::from_expression(
            slab(),
            grid,
            &parse("exp(-(t-0.7)^2/0.02)*x1", 1).unwrap(),
        );
        for p in [1.0, 2.0] {
            let ratio = check_lp_contraction(&cf, &es, &f, &nu, 0.5, p).unwrap();
            assert!(ratio <= 1.0 + 1e-2, "p={p}: ratio {ratio}");
        }
    }

    #[test]
    fn strong_continuity_surrogate() {
        // ||T(delta) f - f||_{L^p(nu)} decreases to 0 along the delta ladder
        let (cf, es, ms) = setup();
        let lattice = TimeLattice {
            lo: 0.0,
            ds: 0.05,
            count: 41,
        };
        let nu = build_space_time_measure(&cf, &ms, lattice, &[0.0]).unwrap();
        let grid = nu.slices[0].grid.clone();
        let f = SpaceTimeField::from_expression(
            lattice,
            grid,
            &parse("exp(-(t-1)^2/0.1)*sin(x1)", 1).unwrap(),
        );
        let norm_p = |field: &SpaceTimeField, p: f64| -> f64 {
            let offset =
                ((field.lattice.lo - nu.lattice.lo) / nu.lattice.ds).round() as isize;
            let mut acc = 0.0;
            for (k, slice) in field.slices.iter().enumerate() {
                let j = (k as isize + offset) as usize;
                let inner: f64 = slice
                    .iter()
                    .zip(&nu.slices[j].weights)
                    .map(|(v, w)| v.abs().powf(p) * w)
                    .sum();
                acc += nu.weight(j) * inner;
            }
            acc.powf(1.0 / p)
        };
        for p in [1.0, 2.0] {
            let mut prev = f64::INFINITY;
            for delta in [0.4, 0.2, 0.1, 0.05] {
                let shifted = apply_t(&cf, &es, &f, delta).unwrap();
                // difference on the common trailing window
                let skip = f.slices.len() - shifted.slices.len();
                let diff_slices: Vec<Vec<f64>> = shifted
                    .slices
                    .iter()
                    .zip(&f.slices[skip..])
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                    .collect();
                let diff = SpaceTimeField {
                    lattice: shifted.lattice,
                    grid: shifted.grid.clone(),
                    slices: diff_slices,
                };
                let n = norm_p(&diff, p);
                assert!(n <= prev + 1e-12, "p={p}: {n} after {prev}");
                prev = n;
            }
            assert!(prev <= 0.15, "p={p}: did not approach 0 ({prev})");
        }
    }

    #[test]
    fn positivity_and_sup_contraction() {
        let (cf, es, _) = setup();
        let grid = es.base_grid(1).unwrap();
        let f = SpaceTimeField::from_expression(
            slab(),
            grid,
            &parse("exp(-(t-1)^2)*exp(-abs2(x)/2)", 1).unwrap(),
        );
        let shifted = apply_t(&cf, &es, &f, 0.5).unwrap();
        assert!(shifted.min() >= -1e-9);
        assert!(shifted.sup_norm() <= f.sup_norm() + 1e-9);
    }
}
