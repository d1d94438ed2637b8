//! Property tests of the expression engine over randomly generated trees.

use evofam::expr::{parse, Expression, Var};
use proptest::prelude::*;

/// Readable expression source strings built recursively from safe pieces
/// (no division or square roots, so evaluation is total and derivatives stay
/// tame on the sampled box).
fn expr_source(depth: u32) -> BoxedStrategy<String> {
    let leaf = prop_oneof![
        (-2.0..2.0f64).prop_map(|c| format!("{c:.3}")),
        Just("t".to_string()),
        Just("x1".to_string()),
        Just("x2".to_string()),
        Just("abs2(x)".to_string()),
    ];
    leaf.prop_recursive(depth, 64, 3, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}+{b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}-{b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}*{b})")),
            inner.clone().prop_map(|a| format!("sin({a})")),
            inner.clone().prop_map(|a| format!("cos({a})")),
            inner.clone().prop_map(|a| format!("-({a})")),
            (inner, 1..4i32).prop_map(|(a, k)| format!("({a})^{k}")),
        ]
    })
    .boxed()
}

fn sample_points() -> Vec<(f64, [f64; 2])> {
    vec![
        (0.0, [0.4, -0.9]),
        (1.3, [-1.2, 0.2]),
        (-0.7, [0.05, 1.4]),
        (2.9, [-0.33, -0.51]),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn print_parse_is_identity_on_values(src in expr_source(4)) {
        let e: Expression = parse(&src, 2).unwrap();
        let printed = e.to_string();
        let reparsed = parse(&printed, 2).unwrap();
        // printing the reparsed tree is a fixed point
        prop_assert_eq!(printed.clone(), reparsed.to_string());
        for (t, x) in sample_points() {
            let a = e.eval(t, &x).unwrap();
            let b = reparsed.eval(t, &x).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits(), "{} at t={} x={:?}", printed, t, x);
        }
    }

    #[test]
    fn symbolic_derivative_matches_central_difference(src in expr_source(3)) {
        let e: Expression = parse(&src, 2).unwrap();
        let h = 1e-5;
        for var in [Var::Time, Var::Coord(0), Var::Coord(1)] {
            let de = e.diff(var).unwrap();
            for (t, x) in sample_points() {
                let exact = de.eval(t, &x).unwrap();
                let (tp, tm, mut xp, mut xm) = (t, t, x, x);
                let (tp, tm) = match var {
                    Var::Time => (tp + h, tm - h),
                    Var::Coord(i) => {
                        xp[i] += h;
                        xm[i] -= h;
                        (tp, tm)
                    }
                };
                let fd = (e.eval(tp, &xp).unwrap() - e.eval(tm, &xm).unwrap()) / (2.0 * h);
                prop_assert!(
                    (exact - fd).abs() <= 1e-5 * (1.0 + exact.abs()),
                    "{src}: d/d{var:?} at t={t} x={x:?}: exact {exact} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn compiled_program_agrees_with_tree(src in expr_source(4)) {
        let e: Expression = parse(&src, 2).unwrap();
        let prog = e.compile();
        for (t, x) in sample_points() {
            let a = e.eval(t, &x).unwrap();
            let b = prog.eval(t, &x);
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
