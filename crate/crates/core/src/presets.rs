//! Built-in problem families used throughout the test batteries.

use crate::expr::parse;
use crate::problem::{CoefficientField, LyapKind, LyapunovCandidate, ProblemError, TimeInterval};

/// A named coefficient field plus its default Lyapunov candidates.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub cf: CoefficientField,
    pub lyapunov: Vec<LyapunovCandidate>,
    /// Drift one-sided bound `C(t)` for the unit-diffusion family, when the
    /// preset is of that form.
    pub c_of_t: Option<crate::expr::Expression>,
}

pub const PRESET_NAMES: [&str; 5] = [
    "heat",
    "ou-autonomous",
    "ou-nonautonomous",
    "sec7",
    "expanding",
];

/// Look up a preset by name. `sec7` takes its defaults `N = 1`,
/// `C(t) = -2 + sin t`; use [`sec7_family`] for other parameters.
pub fn preset(name: &str) -> Result<Preset, ProblemError> {
    match name {
        "heat" => family("heat", "0", Some("0")),
        "ou-autonomous" => family("ou-autonomous", "-x1", Some("-1")),
        "ou-nonautonomous" => family("ou-nonautonomous", "-(2+sin(t))*x1", Some("-2+sin(t)")),
        "sec7" => sec7_family(1, "-2+sin(t)"),
        "expanding" => family("expanding", "x1", Some("1")),
        other => Err(ProblemError::JacobianUnavailable(format!(
            "unknown preset `{other}` (expected one of {PRESET_NAMES:?})"
        ))),
    }
}

/// The unit-diffusion family with drift `C(t) x` and Lyapunov candidates
/// `1 + |x|^(2N)`.
pub fn sec7_family(n: u32, c_of_t: &str) -> Result<Preset, ProblemError> {
    let c = parse(c_of_t, 1)?;
    let drift = format!("({c_of_t})*x1");
    let mut p = family("sec7", &drift, Some(c_of_t))?;
    if n != 1 {
        let phi = parse(&format!("1+abs2(x)^{n}"), 1)?;
        p.lyapunov = vec![
            LyapunovCandidate::new(phi.clone(), LyapKind::H1iii),
            LyapunovCandidate::new(phi.clone(), LyapKind::H4),
            LyapunovCandidate::new(phi, LyapKind::H34),
        ];
    }
    let _ = c;
    Ok(p)
}

fn family(name: &'static str, drift: &str, c_of_t: Option<&str>) -> Result<Preset, ProblemError> {
    let cf = CoefficientField::from_strings(1, TimeInterval::new(0.0, None), &["1"], &[drift])?;
    let phi = parse("1+abs2(x)", 1)?;
    let lyapunov = vec![
        LyapunovCandidate::new(phi.clone(), LyapKind::H1iii),
        LyapunovCandidate::new(phi.clone(), LyapKind::H4),
        LyapunovCandidate::new(phi, LyapKind::H34),
    ];
    Ok(Preset {
        name,
        cf,
        lyapunov,
        c_of_t: c_of_t.map(|s| parse(s, 1).expect("preset C(t) parses")),
    })
}

/// The fixed, seeded corpus of test functions used by the verification
/// batteries: constants, a coordinate, Gaussians, a smoothed indicator and a
/// sinusoid.
pub fn standard_corpus(dim: usize) -> Vec<(String, crate::expr::Expression)> {
    let specs: [&str; 8] = [
        "1",
        "0.7",
        "x1",
        "exp(-abs2(x)/2)",
        "exp(-abs2(x)/8)",
        "1/(1+exp(-4*x1))",
        "sin(x1)",
        "x1*exp(-abs2(x)/4)",
    ];
    specs
        .iter()
        .map(|s| (s.to_string(), parse(s, dim).expect("corpus expression parses")))
        .collect()
}

/// The continuously differentiable members of the corpus with nonconstant
/// gradient content (used by the gradient-estimate batteries).
pub fn c1_corpus(dim: usize) -> Vec<(String, crate::expr::Expression)> {
    standard_corpus(dim)
        .into_iter()
        .filter(|(name, _)| name != "1" && name != "0.7")
        .collect()
}

/// Compactly supported (to machine precision) twice-differentiable corpus for
/// checks that integrate the operator against test functions.
pub fn compact_c2_corpus(dim: usize) -> Vec<(String, crate::expr::Expression)> {
    ["exp(-abs2(x)/2)", "x1*exp(-abs2(x)/4)", "exp(-abs2(x)/8)"]
        .iter()
        .map(|s| (s.to_string(), parse(s, dim).expect("corpus expression parses")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{check_dissipativity, Lattice};

    #[test]
    fn all_presets_resolve() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            assert_eq!(p.cf.dim(), 1);
            assert_eq!(p.lyapunov.len(), 3);
        }
    }

    #[test]
    fn preset_constants() {
        let lat = Lattice::standard((0.0, 2.0 * std::f64::consts::PI), 8.0);
        for (name, want_k0) in [
            ("heat", 0.0),
            ("ou-autonomous", -1.0),
            ("ou-nonautonomous", -1.0),
            ("sec7", -1.0),
            ("expanding", 1.0),
        ] {
            let p = preset(name).unwrap();
            let d = check_dissipativity(&p.cf, &lat, 2.0).unwrap();
            assert!((d.k0 - want_k0).abs() < 1e-12, "{name}: k0 = {}", d.k0);
            assert_eq!(d.rho0, 0.0, "{name} has constant diffusion");
        }
    }

    #[test]
    fn sec7_higher_order_candidate() {
        let p = sec7_family(2, "-2+sin(t)").unwrap();
        let phi = &p.lyapunov[0].phi;
        // 1 + |x|^4 at x = 2
        assert_eq!(phi.eval(0.0, &[2.0]).unwrap(), 17.0);
    }

    #[test]
    fn corpus_sizes() {
        assert_eq!(standard_corpus(1).len(), 8);
        assert!(c1_corpus(1).len() >= 5);
        assert_eq!(compact_c2_corpus(2).len(), 3);
    }
}
