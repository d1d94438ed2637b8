//! Independent Monte Carlo engine for cross-validating the PDE family.
//!
//! Euler-Maruyama with drift `b` and diffusion `sqrt(2Q)` — the operator
//! carries `Tr(Q D^2)` while the generator of `sigma dW` carries
//! `(1/2) Tr(sigma sigma^T D^2)`, so `sigma sigma^T = 2Q` (the factor 2 is
//! the classic cross-validation bug). Because the family propagates initial
//! data forward through `u_t = A(t)u`, its stochastic representation uses the
//! time-reversed coefficient schedule: a particle at simulation time `tau` in
//! `[s, t]` sees the coefficients at `s + t - tau`. For autonomous problems
//! this is a no-op; for time-dependent drifts it is what makes the variances
//! match (the means agree either way).
//!
//! Randomness is per-particle: each particle owns a counter-derived stream,
//! so results are bitwise reproducible for any worker count, and reductions
//! run in fixed particle order.

use crate::evolution::{EvolutionError, EvolutionOperator, EvolutionSettings};
use crate::expr::{Expression, Program};
use crate::grid::Grid;
use crate::measures::{DiscreteMeasure, MeasureError};
use crate::problem::{sym_eigs_2x2, CoefficientField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("diffusion matrix not positive semidefinite at t={t} (eigenvalue {lambda})")]
    NonPsdDiffusion { t: f64, lambda: f64 },
    #[error("{frac:.1}% of particles left the grid box; enlarge the grid")]
    ParticlesEscaped { frac: f64 },
    #[error("empty ensemble")]
    Empty,
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Debug, Clone)]
pub struct OracleSettings {
    pub n_particles: usize,
    pub dt: f64,
    pub seed: u64,
    /// Tamed-increment clip on |b|; clip events are counted and reported.
    pub drift_clip: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            n_particles: 100_000,
            dt: 1e-3,
            seed: 0x0ddba11,
            drift_clip: 1e4,
        }
    }
}

/// Particle ensemble at one time.
#[derive(Debug, Clone)]
pub struct SdeEnsemble {
    pub dim: usize,
    pub s: f64,
    pub t: f64,
    pub origin: Vec<f64>,
    /// Flat `n x d` positions in particle order.
    pub positions: Vec<f64>,
    pub seed: u64,
    pub clip_count: u64,
}

impl SdeEnsemble {
    pub fn n(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# ensemble n={} s={} t={} seed={} clips={}",
            self.n(),
            self.s,
            self.t,
            self.seed,
            self.clip_count
        );
        let _ = writeln!(
            out,
            "{}",
            if self.dim == 1 {
                "particle,x1"
            } else {
                "particle,x1,x2"
            }
        );
        for p in 0..self.n() {
            if self.dim == 1 {
                let _ = writeln!(out, "{},{}", p, self.positions[p]);
            } else {
                let _ = writeln!(
                    out,
                    "{},{},{}",
                    p,
                    self.positions[2 * p],
                    self.positions[2 * p + 1]
                );
            }
        }
        out
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn particle_rng(seed: u64, particle: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = seed ^ splitmix64(particle.wrapping_add(0x517c_c1b7_2722_0a95));
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Square root of `2 Q(t,x)` (dense 2x2; unused entries zero).
fn sqrt_2q(cf: &CoefficientField, t: f64, x: &[f64]) -> Result<[[f64; 2]; 2], OracleError> {
    let d = cf.dim();
    let q = cf.q_at(t, x);
    if d == 1 {
        let v = 2.0 * q[0][0];
        if v < 0.0 {
            return Err(OracleError::NonPsdDiffusion { t, lambda: v });
        }
        return Ok([[v.sqrt(), 0.0], [0.0, 0.0]]);
    }
    let (a, b, c) = (2.0 * q[0][0], 2.0 * q[0][1], 2.0 * q[1][1]);
    let (l1, l2) = sym_eigs_2x2(a, b, c);
    if l1 < -1e-14 {
        return Err(OracleError::NonPsdDiffusion { t, lambda: l1 });
    }
    // eigenvector of the larger eigenvalue
    let (vx, vy) = if b.abs() > 1e-300 {
        (l2 - c, b)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let norm = (vx * vx + vy * vy).sqrt();
    let (vx, vy) = (vx / norm, vy / norm);
    let (s1, s2) = (l1.max(0.0).sqrt(), l2.max(0.0).sqrt());
    // sqrt = s1 I + (s2 - s1) vv^T with v the lambda_2 eigenvector
    Ok([
        [s1 + (s2 - s1) * vx * vx, (s2 - s1) * vx * vy],
        [(s2 - s1) * vx * vy, s1 + (s2 - s1) * vy * vy],
    ])
}

/// Drive `n` particles from `(s, x)` to time `t`.
pub fn simulate(
    cf: &Arc<CoefficientField>,
    s: f64,
    x: &[f64],
    t: f64,
    os: &OracleSettings,
) -> Result<SdeEnsemble, OracleError> {
    let d = cf.dim();
    let span = t - s;
    let n_steps = if span > 0.0 {
        (span / os.dt).round().max(1.0) as usize
    } else {
        0
    };
    let dt_eff = if n_steps > 0 { span / n_steps as f64 } else { 0.0 };
    let sqrt_dt = dt_eff.sqrt();
    let q_const_x = cf.q_is_x_independent();
    let b_progs: Vec<Program> = (0..d).map(|i| cf.b_program(i).clone()).collect();

    let clips = AtomicU64::new(0);
    let mut positions = vec![0.0f64; os.n_particles * d];

    // reversed schedule: step k of [s,t] uses coefficient time t - k dt
    let coef_time = |k: usize| t - k as f64 * dt_eff;
    let cached_sigma: Option<Vec<[[f64; 2]; 2]>> = if q_const_x {
        let origin = vec![0.0; d];
        let mut v = Vec::with_capacity(n_steps);
        for k in 0..n_steps {
            v.push(sqrt_2q(cf, coef_time(k), &origin)?);
        }
        Some(v)
    } else {
        None
    };

    positions
        .par_chunks_mut(d.max(1))
        .enumerate()
        .try_for_each(|(p, slot)| -> Result<(), OracleError> {
            let mut rng = particle_rng(os.seed, p as u64);
            let mut y = [0.0f64; 2];
            y[..d].copy_from_slice(x);
            let mut local_clips = 0u64;
            for k in 0..n_steps {
                let tc = coef_time(k);
                let mut drift = [0.0f64; 2];
                let mut norm2 = 0.0;
                for i in 0..d {
                    drift[i] = b_progs[i].eval(tc, &y[..d]);
                    norm2 += drift[i] * drift[i];
                }
                let norm = norm2.sqrt();
                if norm > os.drift_clip {
                    let scale = os.drift_clip / norm;
                    for v in drift.iter_mut() {
                        *v *= scale;
                    }
                    local_clips += 1;
                }
                let sigma = match &cached_sigma {
                    Some(c) => c[k],
                    None => sqrt_2q(cf, tc, &y[..d])?,
                };
                let mut dw = [0.0f64; 2];
                for w in dw.iter_mut().take(d) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *w = z * sqrt_dt;
                }
                for i in 0..d {
                    let mut diff = 0.0;
                    for j in 0..d {
                        diff += sigma[i][j] * dw[j];
                    }
                    y[i] += drift[i] * dt_eff + diff;
                }
            }
            slot.copy_from_slice(&y[..d]);
            if local_clips > 0 {
                clips.fetch_add(local_clips, Ordering::Relaxed);
            }
            Ok(())
        })?;

    Ok(SdeEnsemble {
        dim: d,
        s,
        t,
        origin: x.to_vec(),
        positions,
        seed: os.seed,
        clip_count: clips.into_inner(),
    })
}

/// Mean and standard error of `f` over the ensemble (fixed-order sums).
pub fn feynman_kac(ens: &SdeEnsemble, f: &Expression) -> Result<(f64, f64), OracleError> {
    let n = ens.n();
    if n == 0 {
        return Err(OracleError::Empty);
    }
    let prog = f.compile();
    let d = ens.dim;
    let values: Vec<f64> = (0..n)
        .map(|p| prog.eval(ens.t, &ens.positions[p * d..(p + 1) * d]))
        .collect();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
    Ok((mean, (var / n as f64).sqrt()))
}

/// Cell-counted histogram of the ensemble, normalized to 1. Errors when more
/// than 1% of the particles fall outside the grid box.
pub fn ensemble_measure(
    ens: &SdeEnsemble,
    grid: Arc<Grid>,
) -> Result<DiscreteMeasure, OracleError> {
    let d = ens.dim;
    let n = ens.n();
    let mut counts = vec![0.0f64; grid.node_count()];
    let mut outside = 0usize;
    let r = grid.radius() + 0.5 * grid.h();
    for p in 0..n {
        let x = &ens.positions[p * d..(p + 1) * d];
        if x.iter().any(|v| v.abs() > r) {
            outside += 1;
            continue;
        }
        counts[grid.nearest_node(x)] += 1.0;
    }
    let frac = 100.0 * outside as f64 / n.max(1) as f64;
    if frac > 1.0 {
        return Err(OracleError::ParticlesEscaped { frac });
    }
    let total: f64 = counts.iter().sum();
    for c in &mut counts {
        *c /= total;
    }
    Ok(DiscreteMeasure {
        grid,
        weights: counts,
        time: ens.t,
    })
}

/// One cross-check probe: compare the family value `G(t,s)f(x)` with the
/// Monte Carlo estimate at the same point.
#[derive(Debug, Clone)]
pub struct Probe {
    pub name: String,
    pub f: Expression,
    pub s: f64,
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub name: String,
    pub pde: f64,
    pub mc: f64,
    pub se: f64,
    pub diff: f64,
    pub bound: f64,
    pub pass: bool,
    pub clip_count: u64,
}

#[derive(Debug, Clone)]
pub struct CrossCheckReport {
    pub rows: Vec<ProbeRow>,
    pub all_pass: bool,
}

impl CrossCheckReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "probe,pde,mc,se,diff,bound,pass,clips");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.name, r.pde, r.mc, r.se, r.diff, r.bound, r.pass, r.clip_count
            );
        }
        out
    }
}

/// Run every probe through both engines; a probe passes when
/// `|PDE - MC| <= 3 SE + allowance`.
pub fn cross_check(
    cf: &Arc<CoefficientField>,
    es: &EvolutionSettings,
    os: &OracleSettings,
    probes: &[Probe],
    allowance: f64,
) -> Result<CrossCheckReport, OracleError> {
    let mut rows = Vec::new();
    for probe in probes {
        let op = EvolutionOperator::new(cf.clone(), es.clone(), probe.s, probe.t)?;
        let field = op.apply(&probe.f)?;
        let node = field.grid.nearest_node(&probe.x);
        let pde = field.values[node];
        let ens = simulate(cf, probe.s, &probe.x, probe.t, os)?;
        let (mc, se) = feynman_kac(&ens, &probe.f)?;
        let diff = (pde - mc).abs();
        let bound = 3.0 * se + allowance;
        rows.push(ProbeRow {
            name: probe.name.clone(),
            pde,
            mc,
            se,
            diff,
            bound,
            pass: diff <= bound,
            clip_count: ens.clip_count,
        });
    }
    let all_pass = rows.iter().all(|r| r.pass);
    Ok(CrossCheckReport { rows, all_pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::grid::Grid;
    use crate::presets::preset;

    fn small() -> OracleSettings {
        OracleSettings {
            n_particles: 20_000,
            dt: 1e-3,
            seed: 42,
            drift_clip: 1e4,
        }
    }

    #[test]
    fn seed_determinism_across_worker_counts() {
        let cf = Arc::new(preset("ou-autonomous").unwrap().cf);
        let os = OracleSettings {
            n_particles: 500,
            ..small()
        };
        let a = simulate(&cf, 0.0, &[1.0], 0.5, &os).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = pool.install(|| simulate(&cf, 0.0, &[1.0], 0.5, &os).unwrap());
        assert_eq!(a.positions, b.positions, "parallelism changed the draw");
    }

    #[test]
    fn brownian_variance() {
        let cf = Arc::new(preset("heat").unwrap().cf);
        let os = small();
        let tau = 0.5;
        let ens = simulate(&cf, 0.0, &[0.0], tau, &os).unwrap();
        let (m2, se2) = feynman_kac(&ens, &parse("x1^2", 1).unwrap()).unwrap();
        // variance of the heat flow is 2 tau
        assert!(
            (m2 - 2.0 * tau).abs() <= 3.0 * se2 + 1e-3,
            "m2={m2} vs {}",
            2.0 * tau
        );
    }

    #[test]
    fn ou_mean_matches_closed_form() {
        let cf = Arc::new(preset("ou-autonomous").unwrap().cf);
        let ens = simulate(&cf, 0.0, &[1.0], 1.0, &small()).unwrap();
        let (m, se) = feynman_kac(&ens, &parse("x1", 1).unwrap()).unwrap();
        let exact = (-1.0f64).exp();
        assert!((m - exact).abs() <= 3.0 * se + 2e-3, "{m} vs {exact}");
    }

    #[test]
    fn nonautonomous_variance_needs_reversed_schedule() {
        // drift beta(t) = -(2 + sin t): the second moment from the origin is
        // the ODE-integrated variance; the unreversed schedule would give a
        // visibly different number at these tolerances.
        let cf = Arc::new(preset("ou-nonautonomous").unwrap().cf);
        let os = OracleSettings {
            n_particles: 120_000,
            ..small()
        };
        let (s, t) = (0.0f64, 1.0f64);
        let ens = simulate(&cf, s, &[0.0], t, &os).unwrap();
        let (m2, se) = feynman_kac(&ens, &parse("x1^2", 1).unwrap()).unwrap();
        let oracle =
            crate::closed_form::LinearDriftOracle::new(&parse("-(2+sin(t))", 1).unwrap(), 1.0);
        let v = oracle.variance_flow(s, t);
        assert!((m2 - v).abs() <= 3.0 * se + 2e-3, "m2={m2} vs v={v}");
        // the unreversed schedule integrates the other exponential and lands
        // far enough away that this test discriminates between the two
        let wrong = crate::closed_form::simpson(
            |r| 2.0 * (2.0 * (-(2.0 * (r - s) + r.cos() - s.cos()))).exp(),
            s,
            t,
            10_000,
        );
        assert!((v - wrong).abs() > 10.0 * se, "test should discriminate");
    }

    #[test]
    fn deterministic_mode_matches_ode() {
        // zero diffusion: dx/dt = -x from 1 gives e^{-1}
        let cf = Arc::new(
            crate::problem::CoefficientField::from_strings(
                1,
                crate::problem::TimeInterval::new(0.0, None),
                &["0"],
                &["-x1"],
            )
            .unwrap(),
        );
        let os = OracleSettings {
            n_particles: 1,
            dt: 1e-5,
            seed: 7,
            drift_clip: 1e4,
        };
        let ens = simulate(&cf, 0.0, &[1.0], 1.0, &os).unwrap();
        assert!((ens.positions[0] - (-1.0f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn feynman_kac_constant_is_exact() {
        let cf = Arc::new(preset("heat").unwrap().cf);
        let ens = simulate(&cf, 0.0, &[0.0], 0.25, &small()).unwrap();
        let (m, se) = feynman_kac(&ens, &parse("1", 1).unwrap()).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn half_space_probability_by_symmetry() {
        let cf = Arc::new(preset("heat").unwrap().cf);
        let ens = simulate(&cf, 0.0, &[0.0], 0.5, &small()).unwrap();
        let (m, se) = feynman_kac(&ens, &parse("1/(1+exp(-40*x1))", 1).unwrap()).unwrap();
        assert!((m - 0.5).abs() <= 3.0 * se + 1e-3, "{m}");
    }

    #[test]
    fn histogram_point_mass_at_zero_horizon() {
        let cf = Arc::new(preset("ou-autonomous").unwrap().cf);
        let ens = simulate(&cf, 1.0, &[0.5], 1.0, &small()).unwrap();
        let grid = Grid::new(1, 2.0, 0.1).unwrap();
        let mu = ensemble_measure(&ens, grid.clone()).unwrap();
        assert_eq!(mu.weights[grid.nearest_node(&[0.5])], 1.0);
    }

    #[test]
    fn symmetric_problem_centers_histogram() {
        let cf = Arc::new(preset("ou-autonomous").unwrap().cf);
        let ens = simulate(&cf, 0.0, &[0.0], 20.0, &small()).unwrap();
        let (mean, se) = feynman_kac(&ens, &parse("x1", 1).unwrap()).unwrap();
        assert!(mean.abs() <= 3.0 * se, "mean {mean} vs se {se}");
    }

    #[test]
    fn escape_detection() {
        let cf = Arc::new(preset("expanding").unwrap().cf);
        let ens = simulate(&cf, 0.0, &[1.0], 3.0, &small()).unwrap();
        let grid = Grid::new(1, 2.0, 0.1).unwrap();
        assert!(matches!(
            ensemble_measure(&ens, grid),
            Err(OracleError::ParticlesEscaped { .. })
        ));
    }

    #[test]
    fn expanding_particle_view_flags_non_decay() {
        // the tail table of the particle histogram shows the escaping mean
        let cf = Arc::new(preset("expanding").unwrap().cf);
        let ens = simulate(&cf, 0.0, &[1.0], 1.0, &small()).unwrap();
        let grid = Grid::new(1, 16.0, 0.25).unwrap();
        let mu = ensemble_measure(&ens, grid).unwrap();
        let table = crate::measures::tightness_diagnostic(&[&mu], &[1.0, 2.0, 3.0, 4.0]);
        assert!(table.escaping, "tail mass: {:?}", table.rows);
    }

    #[test]
    fn particle_view_of_the_measure_system() {
        // ensemble from the far past vs the time-average construction
        let cf = Arc::new(preset("ou-autonomous").unwrap().cf);
        let os = OracleSettings {
            n_particles: 30_000,
            dt: 2e-3,
            seed: 77,
            drift_clip: 1e4,
        };
        let horizon = 20.0;
        let t = 1.0;
        let ens = simulate(&cf, t - horizon, &[0.0], t, &os).unwrap();
        let ms = crate::measures::MeasureSettings::default();
        let system =
            crate::measures::build_evolution_system(&cf, &ms, &[0.0], &[t]).unwrap();
        let member = &system.anchors[0].1;
        let hist = ensemble_measure(&ens, member.grid.clone()).unwrap();
        let tv = member.tv_distance(&hist);
        assert!(tv <= 7e-2, "particle view TV {tv}");
    }

    #[test]
    fn weak_error_scaling_first_order() {
        // One shared Brownian path per particle, aggregated into coarser
        // increments per level: the level differences then isolate the
        // deterministic Euler bias, which is O(dt).
        let n_particles = 2_000usize;
        let tau = 1.0;
        let fine_steps = 4096usize;
        let dt_fine = tau / fine_steps as f64;
        // block sizes: coarse levels plus the fine reference
        let blocks = [64usize, 32, 16, 1];
        let mut sums = [0.0f64; 4];
        for p in 0..n_particles {
            let mut rng = particle_rng(9, p as u64);
            let mut xs = [1.0f64; 4];
            let mut acc = [0.0f64; 4];
            for k in 0..fine_steps {
                let z: f64 = StandardNormal.sample(&mut rng);
                let dw = z * dt_fine.sqrt();
                for (lvl, &b) in blocks.iter().enumerate() {
                    acc[lvl] += dw;
                    if (k + 1) % b == 0 {
                        let dt = b as f64 * dt_fine;
                        // Euler step of dX = -X dt + sqrt(2) dW
                        xs[lvl] += -xs[lvl] * dt + (2.0f64).sqrt() * acc[lvl];
                        acc[lvl] = 0.0;
                    }
                }
            }
            for lvl in 0..4 {
                sums[lvl] += xs[lvl];
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| s / n_particles as f64).collect();
        let finest = means[3];
        let pts: Vec<(f64, f64)> = blocks[..3]
            .iter()
            .zip(&means[..3])
            .map(|(&b, &m)| ((b as f64 * dt_fine).ln(), (m - finest).abs().ln()))
            .collect();
        let slope = crate::measures::least_squares_slope(&pts);
        assert!(
            (0.7..=1.3).contains(&slope),
            "weak order {slope} (pts {pts:?})"
        );
    }

    #[test]
    fn cross_check_probes_and_negative_control() {
        let cf = Arc::new(preset("heat").unwrap().cf);
        let es = EvolutionSettings::default();
        let os = OracleSettings {
            n_particles: 50_000,
            ..small()
        };
        let probes = vec![
            Probe {
                name: "gauss".into(),
                f: parse("exp(-abs2(x)/2)", 1).unwrap(),
                s: 0.0,
                t: 0.25,
                x: vec![0.5],
            },
            Probe {
                name: "steep".into(),
                f: parse("1/(1+exp(-20*x1))", 1).unwrap(),
                s: 0.0,
                t: 0.25,
                x: vec![0.1],
            },
        ];
        let rep = cross_check(&cf, &es, &os, &probes, 1e-2).unwrap();
        assert!(rep.all_pass, "{:?}", rep.rows);

        // negative control: a grid far too coarse must be flagged
        let mut coarse = es.clone();
        coarse.h = 0.4;
        let rep = cross_check(&cf, &coarse, &os, &probes[1..], 1e-2).unwrap();
        assert!(!rep.all_pass, "coarse grid slipped through: {:?}", rep.rows);
    }
}
