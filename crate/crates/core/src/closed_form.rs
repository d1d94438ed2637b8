//! Closed-form and quadrature oracles for linear-drift problems.
//!
//! These provide the independent reference values the verification batteries
//! compare against: Gaussian transition laws for drifts `b(t,x) = beta(t) x`
//! with constant diffusion, their cell masses on a grid, and expectations of
//! test functions. Everything here is computed by quadrature or ODE
//! integration, never by the finite-difference path it is used to check.

use crate::expr::{Expression, Program};
use crate::grid::Grid;
use statrs::distribution::{ContinuousCDF, Normal};

pub fn normal_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

/// Transition law oracle for `u_t = q u_xx + beta(t) x u_x` in one dimension:
/// the kernel started at `(s, x)` is Gaussian with mean `e^{B(t,s)} x` and
/// variance `v(t)` solving `v' = 2 beta v + 2q`, `v(s) = 0`.
#[derive(Debug, Clone)]
pub struct LinearDriftOracle {
    beta: Program,
    pub q: f64,
}

impl LinearDriftOracle {
    pub fn new(beta: &Expression, q: f64) -> Self {
        LinearDriftOracle {
            beta: beta.compile(),
            q,
        }
    }

    pub fn beta_at(&self, t: f64) -> f64 {
        self.beta.eval(t, &[0.0])
    }

    /// `B(t,s) = int_s^t beta` by Simpson quadrature.
    pub fn integral_beta(&self, s: f64, t: f64) -> f64 {
        simpson(|r| self.beta_at(r), s, t, quad_panels(t - s))
    }

    /// Mean contraction factor `e^{B(t,s)}`.
    pub fn mean_factor(&self, s: f64, t: f64) -> f64 {
        self.integral_beta(s, t).exp()
    }

    /// Variance of the SDE run with the plain (unreversed) schedule:
    /// `v' = 2 beta(t) v + 2q`, `v(s) = 0`, i.e.
    /// `2q int_s^t exp(2 int_r^t beta) dr`. For autonomous drifts this
    /// equals the flow variance; for time-dependent drifts it does not.
    pub fn variance_sde(&self, s: f64, t: f64) -> f64 {
        let n = (quad_panels(t - s) * 2).max(16);
        let h = (t - s) / n as f64;
        let rhs = |t: f64, v: f64| 2.0 * self.beta_at(t) * v + 2.0 * self.q;
        let mut v = 0.0f64;
        let mut tt = s;
        for _ in 0..n {
            let k1 = rhs(tt, v);
            let k2 = rhs(tt + 0.5 * h, v + 0.5 * h * k1);
            let k3 = rhs(tt + 0.5 * h, v + 0.5 * h * k2);
            let k4 = rhs(tt + h, v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            tt += h;
        }
        v
    }

    /// Variance of the transition kernel of the flow `G(t,s)`:
    /// `2q int_s^t exp(2 int_s^r beta) dr`. This is what the family built
    /// from the forward equation carries (equivalently, the variance of the
    /// SDE run with the reversed coefficient schedule).
    pub fn variance_flow(&self, s: f64, t: f64) -> f64 {
        self.integrate_flow(s, t)
    }

    /// Variance of the time-`t` member of the evolution system of measures,
    /// `w(t) = 2q int_t^{+inf} exp(2 int_t^r beta) dr`: the long-horizon
    /// limit of the kernel variances started at `t`.
    pub fn member_variance(&self, t: f64) -> f64 {
        self.integrate_flow(t, t + 40.0)
    }

    /// RK4 on `E' = 2 beta(r) E, w' = 2q E` from `E(s) = 1, w(s) = 0`.
    fn integrate_flow(&self, s: f64, t: f64) -> f64 {
        let n = (quad_panels(t - s) * 2).max(16);
        let h = (t - s) / n as f64;
        let rhs = |r: f64, e: f64| (2.0 * self.beta_at(r) * e, 2.0 * self.q * e);
        let (mut e, mut w) = (1.0f64, 0.0f64);
        let mut r = s;
        for _ in 0..n {
            let (e1, w1) = rhs(r, e);
            let (e2, w2) = rhs(r + 0.5 * h, e + 0.5 * h * e1);
            let (e3, w3) = rhs(r + 0.5 * h, e + 0.5 * h * e2);
            let (e4, w4) = rhs(r + h, e + h * e3);
            w += h / 6.0 * (w1 + 2.0 * w2 + 2.0 * w3 + w4);
            e += h / 6.0 * (e1 + 2.0 * e2 + 2.0 * e3 + e4);
            r += h;
        }
        w
    }

    /// `G(t,s)f(x)` for a scalar `f`, by Gaussian expectation with the flow
    /// mean and variance.
    pub fn apply(&self, f: impl Fn(f64) -> f64, s: f64, t: f64, x: f64) -> f64 {
        let m = self.mean_factor(s, t) * x;
        let v = self.variance_flow(s, t);
        gaussian_expectation(m, v, f)
    }
}

fn quad_panels(span: f64) -> usize {
    ((span.abs() * 2000.0).ceil() as usize).clamp(64, 400_000)
}

/// Composite Simpson rule with `n` panels (rounded up to even).
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    if a == b {
        return 0.0;
    }
    let n = if n.is_multiple_of(2) { n } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

/// `E f(Z)` for `Z ~ N(mean, var)` by Simpson over ten standard deviations.
pub fn gaussian_expectation(mean: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
    if var <= 0.0 {
        return f(mean);
    }
    let sd = var.sqrt();
    let (a, b) = (mean - 10.0 * sd, mean + 10.0 * sd);
    let density = |y: f64| {
        let z = (y - mean) / sd;
        (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
    };
    simpson(|y| f(y) * density(y), a, b, 4000)
}

/// Cell masses of a product Gaussian `N(mean, var I)` on a grid; the
/// infinite tails are folded into the outermost cells so the masses sum to 1.
pub fn gaussian_cell_masses(grid: &Grid, mean: &[f64], var: f64) -> Vec<f64> {
    let d = grid.dim();
    let sd = var.sqrt();
    let n1 = grid.n_per_dim();
    let h = grid.h();
    // per-dimension interval masses
    let mut per_dim: Vec<Vec<f64>> = Vec::with_capacity(d);
    for k in 0..d {
        let mut masses = Vec::with_capacity(n1);
        for j in 0..n1 {
            let c = -grid.radius() + j as f64 * h;
            let lo = if j == 0 {
                f64::NEG_INFINITY
            } else {
                (c - 0.5 * h - mean[k]) / sd
            };
            let hi = if j == n1 - 1 {
                f64::INFINITY
            } else {
                (c + 0.5 * h - mean[k]) / sd
            };
            let plo = if lo.is_finite() { normal_cdf(lo) } else { 0.0 };
            let phi = if hi.is_finite() { normal_cdf(hi) } else { 1.0 };
            masses.push((phi - plo).max(0.0));
        }
        per_dim.push(masses);
    }
    (0..grid.node_count())
        .map(|i| {
            let mi = grid.multi_index(i);
            (0..d).map(|k| per_dim[k][mi[k]]).product()
        })
        .collect()
}

/// Total-variation distance between two weight vectors on the same cells.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// The smoothed-step profile of the unit-diffusion flow applied to the
/// half-space indicator: `G(t,s) 1_{x>0}(x) = Phi(x / sqrt(2 q tau))`.
pub fn heat_indicator_profile(q: f64, tau: f64, x: f64) -> f64 {
    normal_cdf(x / (2.0 * q * tau).sqrt())
}
