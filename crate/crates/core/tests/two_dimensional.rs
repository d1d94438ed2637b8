//! Two-dimensional coverage: the stencil path with mixed second derivatives,
//! kernels on planar grids, and the Monte Carlo square-root of a full
//! diffusion matrix.

use evofam::evolution::{EvolutionOperator, EvolutionSettings};
use evofam::expr::parse;
use evofam::grid::{FieldSample, Grid};
use evofam::oracle::{feynman_kac, simulate, OracleSettings};
use evofam::problem::{CoefficientField, TimeInterval};
use evofam::solver::{solve, Bc, TruncatedProblem};
use std::sync::Arc;

fn anisotropic() -> Arc<CoefficientField> {
    // constant full diffusion matrix with off-diagonal coupling, no drift
    Arc::new(
        CoefficientField::from_strings(
            2,
            TimeInterval::new(0.0, None),
            &["1", "0.4", "1"],
            &["0", "0"],
        )
        .unwrap(),
    )
}

/// Closed form for a Gaussian functional of a Gaussian kernel:
/// `E exp(-|Y|^2/2)` with `Y ~ N(m, 2 Q tau)`.
fn gaussian_functional(m: [f64; 2], q: [[f64; 2]; 2], tau: f64) -> f64 {
    // I + Sigma with Sigma = 2 Q tau
    let s = [
        [1.0 + 2.0 * q[0][0] * tau, 2.0 * q[0][1] * tau],
        [2.0 * q[1][0] * tau, 1.0 + 2.0 * q[1][1] * tau],
    ];
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let inv = [
        [s[1][1] / det, -s[0][1] / det],
        [-s[1][0] / det, s[0][0] / det],
    ];
    let quad = m[0] * (inv[0][0] * m[0] + inv[0][1] * m[1])
        + m[1] * (inv[1][0] * m[0] + inv[1][1] * m[1]);
    (-0.5 * quad).exp() / det.sqrt()
}

#[test]
fn constants_are_steady_in_2d() {
    let cf = anisotropic();
    let grid = Grid::new(2, 1.0, 0.1).unwrap();
    let tp = TruncatedProblem::new(cf, grid.clone(), Bc::Neumann, 0.0, 0.2, 1e-2, 1.0).unwrap();
    let f0 = FieldSample::constant(grid, 0.0, 0.7);
    let out = solve(&tp, &f0, &[0.2]).unwrap();
    for v in &out.last().values {
        assert!((v - 0.7).abs() < 1e-10);
    }
}

#[test]
fn mixed_derivative_against_closed_form() {
    let cf = anisotropic();
    let grid = Grid::new(2, 3.0, 0.1).unwrap();
    let tau = 0.25;
    let tp =
        TruncatedProblem::new(cf, grid.clone(), Bc::Neumann, 0.0, tau, 2.5e-3, 0.5).unwrap();
    let f0 = FieldSample::from_expression(grid.clone(), 0.0, &parse("exp(-abs2(x)/2)", 2).unwrap());
    let out = solve(&tp, &f0, &[tau]).unwrap();
    let u = out.last();
    let q = [[1.0, 0.4], [0.4, 1.0]];
    for probe in [[0.0, 0.0], [0.3, -0.2], [-0.5, 0.4], [0.8, 0.8]] {
        let node = grid.nearest_node(&probe);
        let c = grid.coord(node);
        let exact = gaussian_functional(c, q, tau);
        let got = u.values[node];
        assert!(
            (got - exact).abs() < 5e-3,
            "at {c:?}: {got} vs {exact}"
        );
    }
    // the off-diagonal genuinely matters: the diagonal-only value differs
    let diag_only = gaussian_functional([0.8, 0.8], [[1.0, 0.0], [0.0, 1.0]], tau);
    let full = gaussian_functional([0.8, 0.8], q, tau);
    assert!((diag_only - full).abs() > 5e-3, "test must discriminate");
}

#[test]
fn monte_carlo_matches_full_matrix_square_root() {
    let cf = anisotropic();
    let os = OracleSettings {
        n_particles: 40_000,
        dt: 1e-3,
        seed: 31,
        drift_clip: 1e4,
    };
    let tau = 0.25;
    let x0 = [0.3, -0.2];
    let ens = simulate(&cf, 0.0, &x0, tau, &os).unwrap();
    let (mc, se) = feynman_kac(&ens, &parse("exp(-abs2(x)/2)", 2).unwrap()).unwrap();
    let exact = gaussian_functional(x0, [[1.0, 0.4], [0.4, 1.0]], tau);
    assert!(
        (mc - exact).abs() <= 3.0 * se + 2e-3,
        "mc {mc} vs exact {exact} (se {se})"
    );
    // cross-covariance of the increments reflects q12: E[X1 X2] - m1 m2 = 2 q12 tau
    let n = ens.n();
    let (mut m1, mut m2, mut m12) = (0.0, 0.0, 0.0);
    for p in 0..n {
        let x = &ens.positions[2 * p..2 * p + 2];
        m1 += x[0];
        m2 += x[1];
        m12 += x[0] * x[1];
    }
    m1 /= n as f64;
    m2 /= n as f64;
    m12 /= n as f64;
    let cov = m12 - m1 * m2;
    assert!(
        (cov - 2.0 * 0.4 * tau).abs() < 5e-3,
        "cross covariance {cov} vs {}",
        2.0 * 0.4 * tau
    );
}

#[test]
fn planar_kernel_rows_are_stochastic_and_positive() {
    let cf = Arc::new(
        CoefficientField::from_strings(
            2,
            TimeInterval::new(0.0, None),
            &["1", "0", "1"],
            &["-x1", "-x2"],
        )
        .unwrap(),
    );
    let settings = EvolutionSettings {
        r0: 2.0,
        h: 0.125,
        dt: 2e-3,
        compact_radius: 1.0,
        ..EvolutionSettings::default()
    };
    let op = EvolutionOperator::new(cf, settings, 0.0, 0.1).unwrap();
    let grid = op.settings.base_grid(2).unwrap();
    let origin = grid.origin();
    let off_center = grid.nearest_node(&[0.4, -0.4]);
    let k = op.kernel_with_sources(&grid, &[origin, off_center]).unwrap();
    for row in &k.rows {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-3, "row sum {sum}");
        assert!(row.iter().all(|v| *v > 0.0), "kernel not strictly positive");
    }
}

#[test]
fn planar_identity_kernel_at_equal_times() {
    let cf = anisotropic();
    let settings = EvolutionSettings {
        r0: 1.0,
        h: 0.25,
        compact_radius: 0.5,
        ..EvolutionSettings::default()
    };
    let op = EvolutionOperator::new(cf, settings, 0.5, 0.5).unwrap();
    let grid = op.settings.base_grid(2).unwrap();
    let sources = vec![grid.origin()];
    let k = op.kernel_with_sources(&grid, &sources).unwrap();
    for (j, v) in k.rows[0].iter().enumerate() {
        assert_eq!(*v, if j == grid.origin() { 1.0 } else { 0.0 });
    }
}

#[test]
fn planar_apply_restricts_to_compact() {
    let cf = anisotropic();
    let settings = EvolutionSettings {
        r0: 2.0,
        h: 0.1,
        dt: 2e-3,
        compact_radius: 1.0,
        exhaust_tol: 5e-3,
        n_max: 1,
        strict_budget: false,
        ..EvolutionSettings::default()
    };
    let op = EvolutionOperator::new(cf, settings, 0.0, 0.1).unwrap();
    let u = op.apply(&parse("exp(-abs2(x)/2)", 2).unwrap()).unwrap();
    assert_eq!(u.grid.dim(), 2);
    assert!((u.grid.radius() - 1.0).abs() < 1e-12);
    assert!(u.sup_norm() <= 1.0 + 1e-9);
}
