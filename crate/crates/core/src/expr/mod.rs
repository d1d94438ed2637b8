//! Scalar expressions over the variables `t, x1, .., xd`.
//!
//! Coefficients, Lyapunov candidates and test functions are all given as
//! strings in this little language: infix arithmetic, `sin`, `cos`, `exp`,
//! `sqrt`, `abs`, integer powers, and the radial builtin `abs2(x)` which
//! expands to `x1^2 + .. + xd^2`. Expressions are immutable after parsing and
//! safe to share across worker threads.

mod parse;
mod program;

pub use parse::parse;
pub use program::Program;

use std::fmt;
use thiserror::Error;

/// Variable identity for differentiation and dependency queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// The time variable `t`.
    Time,
    /// The spatial coordinate `x{i+1}` (zero-based index).
    Coord(usize),
}

#[derive(Debug, Error)]
pub enum ExprError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at byte {pos}")]
    UnknownIdent { name: String, pos: usize },
    #[error("arity mismatch for `{name}` at byte {pos}: expected {expected} argument(s)")]
    Arity {
        name: String,
        pos: usize,
        expected: usize,
    },
    #[error("expression is not differentiable at node `{node}`")]
    NonDifferentiable { node: String },
    #[error("domain violation in node `{node}`: {detail}")]
    Domain { node: String, detail: String },
    #[error("wrong point dimension: expression has d={expected}, point has d={got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Node {
    Const(f64),
    Time,
    Coord(usize),
    /// `abs2(x)` = sum of squares of all spatial coordinates.
    RadiusSq,
    Neg(Box<Node>),
    Sin(Box<Node>),
    Cos(Box<Node>),
    Exp(Box<Node>),
    Sqrt(Box<Node>),
    Abs(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    /// Division; the denominator is declared nonvanishing on the problem
    /// domain and this is checked at every sample.
    Div(Box<Node>, Box<Node>),
    /// Power with a constant integer exponent (keeps differentiation closed).
    PowI(Box<Node>, i32),
}

/// A parsed expression together with the spatial dimension it was parsed for.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Node,
    dim: usize,
}

impl Expression {
    /// Constant expression, any dimension.
    pub fn constant(c: f64, dim: usize) -> Self {
        Expression {
            root: Node::Const(c),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Evaluate at `(t, x)`, reporting domain violations with the offending node.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64, ExprError> {
        if x.len() != self.dim {
            return Err(ExprError::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        eval_node(&self.root, t, x)
    }

    /// Exact symbolic derivative with respect to `var`.
    ///
    /// `abs` participates in evaluation only; differentiating through it is an
    /// error. `abs2(x)` differentiates to `2*xi`.
    pub fn diff(&self, var: Var) -> Result<Expression, ExprError> {
        if let Var::Coord(i) = var {
            debug_assert!(i < self.dim.max(1));
        }
        Ok(Expression {
            root: diff_node(&self.root, var)?,
            dim: self.dim,
        })
    }

    /// Whether the expression references `var` anywhere.
    pub fn depends_on(&self, var: Var) -> bool {
        depends(&self.root, var)
    }

    /// Compile to a flat program for fast repeated evaluation.
    ///
    /// The compiled form does not check domain violations; non-finite values
    /// propagate and are caught by the numerical layers.
    pub fn compile(&self) -> Program {
        Program::compile(self)
    }

    pub(crate) fn root(&self) -> &Node {
        &self.root
    }

    pub(crate) fn from_node(root: Node, dim: usize) -> Self {
        Expression { root, dim }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(&self.root, f)
    }
}

fn depends(n: &Node, var: Var) -> bool {
    match n {
        Node::Const(_) => false,
        Node::Time => var == Var::Time,
        Node::Coord(i) => var == Var::Coord(*i),
        Node::RadiusSq => matches!(var, Var::Coord(_)),
        Node::Neg(a) | Node::Sin(a) | Node::Cos(a) | Node::Exp(a) | Node::Sqrt(a)
        | Node::Abs(a) => depends(a, var),
        Node::PowI(a, _) => depends(a, var),
        Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
            depends(a, var) || depends(b, var)
        }
    }
}

fn eval_node(n: &Node, t: f64, x: &[f64]) -> Result<f64, ExprError> {
    Ok(match n {
        Node::Const(c) => *c,
        Node::Time => t,
        Node::Coord(i) => x[*i],
        Node::RadiusSq => x.iter().map(|v| v * v).sum(),
        Node::Neg(a) => -eval_node(a, t, x)?,
        Node::Sin(a) => eval_node(a, t, x)?.sin(),
        Node::Cos(a) => eval_node(a, t, x)?.cos(),
        Node::Exp(a) => eval_node(a, t, x)?.exp(),
        Node::Sqrt(a) => {
            let v = eval_node(a, t, x)?;
            if v < 0.0 {
                return Err(ExprError::Domain {
                    node: render(n),
                    detail: format!("sqrt of negative value {v}"),
                });
            }
            v.sqrt()
        }
        Node::Abs(a) => eval_node(a, t, x)?.abs(),
        Node::Add(a, b) => eval_node(a, t, x)? + eval_node(b, t, x)?,
        Node::Sub(a, b) => eval_node(a, t, x)? - eval_node(b, t, x)?,
        Node::Mul(a, b) => eval_node(a, t, x)? * eval_node(b, t, x)?,
        Node::Div(a, b) => {
            let den = eval_node(b, t, x)?;
            if den == 0.0 {
                return Err(ExprError::Domain {
                    node: render(n),
                    detail: "division by zero".into(),
                });
            }
            eval_node(a, t, x)? / den
        }
        Node::PowI(a, k) => {
            let base = eval_node(a, t, x)?;
            if *k < 0 && base == 0.0 {
                return Err(ExprError::Domain {
                    node: render(n),
                    detail: "zero base with negative exponent".into(),
                });
            }
            base.powi(*k)
        }
    })
}

// Smart constructors with light constant folding; keeps derivative trees small
// without doing any real CAS work.

#[allow(clippy::redundant_guards)] // float patterns are deprecated
pub(crate) fn add(a: Node, b: Node) -> Node {
    match (a, b) {
        (Node::Const(x), Node::Const(y)) => Node::Const(x + y),
        (Node::Const(z), b) if z == 0.0 => b,
        (a, Node::Const(z)) if z == 0.0 => a,
        (a, b) => Node::Add(Box::new(a), Box::new(b)),
    }
}

#[allow(clippy::redundant_guards)] // float patterns are deprecated
pub(crate) fn sub(a: Node, b: Node) -> Node {
    match (a, b) {
        (Node::Const(x), Node::Const(y)) => Node::Const(x - y),
        (a, Node::Const(z)) if z == 0.0 => a,
        (Node::Const(z), b) if z == 0.0 => neg(b),
        (a, b) => Node::Sub(Box::new(a), Box::new(b)),
    }
}

#[allow(clippy::redundant_guards)] // float patterns are deprecated
pub(crate) fn mul(a: Node, b: Node) -> Node {
    match (a, b) {
        (Node::Const(x), Node::Const(y)) => Node::Const(x * y),
        (Node::Const(z), _) | (_, Node::Const(z)) if z == 0.0 => Node::Const(0.0),
        (Node::Const(o), b) if o == 1.0 => b,
        (a, Node::Const(o)) if o == 1.0 => a,
        (a, b) => Node::Mul(Box::new(a), Box::new(b)),
    }
}

#[allow(clippy::redundant_guards)] // float patterns are deprecated
pub(crate) fn div(a: Node, b: Node) -> Node {
    match (a, b) {
        (Node::Const(z), b) if z == 0.0 && !matches!(b, Node::Const(c) if c == 0.0) => {
            Node::Const(0.0)
        }
        (a, Node::Const(o)) if o == 1.0 => a,
        (a, b) => Node::Div(Box::new(a), Box::new(b)),
    }
}

pub(crate) fn neg(a: Node) -> Node {
    match a {
        Node::Const(c) => Node::Const(-c),
        Node::Neg(inner) => *inner,
        a => Node::Neg(Box::new(a)),
    }
}

pub(crate) fn powi(a: Node, k: i32) -> Node {
    match k {
        0 => Node::Const(1.0),
        1 => a,
        _ => match a {
            Node::Const(c) => Node::Const(c.powi(k)),
            a => Node::PowI(Box::new(a), k),
        },
    }
}

fn diff_node(n: &Node, var: Var) -> Result<Node, ExprError> {
    Ok(match n {
        Node::Const(_) => Node::Const(0.0),
        Node::Time => Node::Const(if var == Var::Time { 1.0 } else { 0.0 }),
        Node::Coord(i) => Node::Const(if var == Var::Coord(*i) { 1.0 } else { 0.0 }),
        Node::RadiusSq => match var {
            Var::Coord(i) => mul(Node::Const(2.0), Node::Coord(i)),
            Var::Time => Node::Const(0.0),
        },
        Node::Neg(a) => neg(diff_node(a, var)?),
        Node::Sin(a) => mul(Node::Cos(a.clone()), diff_node(a, var)?),
        Node::Cos(a) => neg(mul(Node::Sin(a.clone()), diff_node(a, var)?)),
        Node::Exp(a) => mul(Node::Exp(a.clone()), diff_node(a, var)?),
        Node::Sqrt(a) => {
            // d sqrt(u) = u' / (2 sqrt(u))
            let du = diff_node(a, var)?;
            div(du, mul(Node::Const(2.0), Node::Sqrt(a.clone())))
        }
        Node::Abs(_) => {
            return Err(ExprError::NonDifferentiable { node: render(n) });
        }
        Node::Add(a, b) => add(diff_node(a, var)?, diff_node(b, var)?),
        Node::Sub(a, b) => sub(diff_node(a, var)?, diff_node(b, var)?),
        Node::Mul(a, b) => add(
            mul(diff_node(a, var)?, (**b).clone()),
            mul((**a).clone(), diff_node(b, var)?),
        ),
        Node::Div(a, b) => {
            // (u/v)' = (u'v - uv')/v^2
            let num = sub(
                mul(diff_node(a, var)?, (**b).clone()),
                mul((**a).clone(), diff_node(b, var)?),
            );
            div(num, powi((**b).clone(), 2))
        }
        Node::PowI(a, k) => mul(
            mul(Node::Const(*k as f64), powi((**a).clone(), k - 1)),
            diff_node(a, var)?,
        ),
    })
}

/// Sum of two expressions (same dimension), with light folding.
pub fn add_exprs(a: &Expression, b: &Expression) -> Expression {
    debug_assert_eq!(a.dim, b.dim);
    Expression::from_node(add(a.root.clone(), b.root.clone()), a.dim)
}

/// Product of two expressions.
pub fn mul_exprs(a: &Expression, b: &Expression) -> Expression {
    debug_assert_eq!(a.dim, b.dim);
    Expression::from_node(mul(a.root.clone(), b.root.clone()), a.dim)
}

/// Difference of two expressions.
pub fn sub_exprs(a: &Expression, b: &Expression) -> Expression {
    debug_assert_eq!(a.dim, b.dim);
    Expression::from_node(sub(a.root.clone(), b.root.clone()), a.dim)
}

/// Scalar multiple.
pub fn scale_expr(a: &Expression, c: f64) -> Expression {
    Expression::from_node(mul(Node::Const(c), a.root.clone()), a.dim)
}

/// Integer power.
pub fn powi_expr(a: &Expression, k: i32) -> Expression {
    Expression::from_node(powi(a.root.clone(), k), a.dim)
}

/// Square root.
pub fn sqrt_expr(a: &Expression) -> Expression {
    Expression::from_node(Node::Sqrt(Box::new(a.root.clone())), a.dim)
}

/// Replace every spatial coordinate by zero, leaving a function of `t` only.
pub fn substitute_space_zero(a: &Expression) -> Expression {
    fn go(n: &Node) -> Node {
        match n {
            Node::Coord(_) | Node::RadiusSq => Node::Const(0.0),
            Node::Const(_) | Node::Time => n.clone(),
            Node::Neg(a) => neg(go(a)),
            Node::Sin(a) => Node::Sin(Box::new(go(a))),
            Node::Cos(a) => Node::Cos(Box::new(go(a))),
            Node::Exp(a) => Node::Exp(Box::new(go(a))),
            Node::Sqrt(a) => Node::Sqrt(Box::new(go(a))),
            Node::Abs(a) => Node::Abs(Box::new(go(a))),
            Node::Add(a, b) => add(go(a), go(b)),
            Node::Sub(a, b) => sub(go(a), go(b)),
            Node::Mul(a, b) => mul(go(a), go(b)),
            Node::Div(a, b) => div(go(a), go(b)),
            Node::PowI(a, k) => powi(go(a), *k),
        }
    }
    Expression::from_node(go(&a.root), a.dim)
}

fn render(n: &Node) -> String {
    struct W<'a>(&'a Node);
    impl fmt::Display for W<'_> {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            write_node(self.0, f)
        }
    }
    W(n).to_string()
}

/// Precedence used for minimal parenthesisation when printing.
fn prec(n: &Node) -> u8 {
    match n {
        Node::Add(..) | Node::Sub(..) => 1,
        Node::Mul(..) | Node::Div(..) => 2,
        Node::Neg(..) => 3,
        Node::PowI(..) => 4,
        _ => 5,
    }
}

fn write_child(n: &Node, min: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if prec(n) < min {
        write!(f, "(")?;
        write_node(n, f)?;
        write!(f, ")")
    } else {
        write_node(n, f)
    }
}

fn write_node(n: &Node, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match n {
        Node::Const(c) => {
            if *c < 0.0 || (c == &0.0 && c.is_sign_negative()) {
                write!(f, "({c})")
            } else {
                write!(f, "{c}")
            }
        }
        Node::Time => write!(f, "t"),
        Node::Coord(i) => write!(f, "x{}", i + 1),
        Node::RadiusSq => write!(f, "abs2(x)"),
        Node::Neg(a) => {
            write!(f, "-")?;
            write_child(a, 3, f)
        }
        Node::Sin(a) => {
            write!(f, "sin(")?;
            write_node(a, f)?;
            write!(f, ")")
        }
        Node::Cos(a) => {
            write!(f, "cos(")?;
            write_node(a, f)?;
            write!(f, ")")
        }
        Node::Exp(a) => {
            write!(f, "exp(")?;
            write_node(a, f)?;
            write!(f, ")")
        }
        Node::Sqrt(a) => {
            write!(f, "sqrt(")?;
            write_node(a, f)?;
            write!(f, ")")
        }
        Node::Abs(a) => {
            write!(f, "abs(")?;
            write_node(a, f)?;
            write!(f, ")")
        }
        Node::Add(a, b) => {
            write_child(a, 1, f)?;
            write!(f, "+")?;
            write_child(b, 2, f)
        }
        Node::Sub(a, b) => {
            write_child(a, 1, f)?;
            write!(f, "-")?;
            write_child(b, 2, f)
        }
        Node::Mul(a, b) => {
            write_child(a, 2, f)?;
            write!(f, "*")?;
            write_child(b, 3, f)
        }
        Node::Div(a, b) => {
            write_child(a, 2, f)?;
            write!(f, "/")?;
            write_child(b, 5, f)
        }
        Node::PowI(a, k) => {
            write_child(a, 5, f)?;
            if *k < 0 {
                write!(f, "^({k})")
            } else {
                write!(f, "^{k}")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str, d: usize) -> Expression {
        parse(s, d).unwrap()
    }

    #[test]
    fn parse_variable_identity() {
        let e = p("x1", 1);
        assert_eq!(e.eval(0.0, &[3.5]).unwrap(), 3.5);
    }

    #[test]
    fn parse_product_tree() {
        let e = p("-(2+sin(t))*x1", 1);
        assert_eq!(e.eval(0.0, &[3.0]).unwrap(), -6.0);
    }

    #[test]
    fn radial_builtin() {
        let e = p("1+abs2(x)", 2);
        assert_eq!(e.eval(0.0, &[1.0, 2.0]).unwrap(), 6.0);
    }

    #[test]
    fn eval_examples() {
        assert_eq!(p("exp(t)", 1).eval(0.0, &[0.0]).unwrap(), 1.0);
        assert_eq!(p("x1^2+x2^2", 2).eval(0.0, &[3.0, 4.0]).unwrap(), 25.0);
        let v = p("sin(t)*x1", 1)
            .eval(std::f64::consts::FRAC_PI_2, &[2.0])
            .unwrap();
        assert!((v - 2.0).abs() < 1e-15);
    }

    #[test]
    fn diff_examples() {
        let e = p("x1^2", 1).diff(Var::Coord(0)).unwrap();
        assert_eq!(e.eval(0.0, &[3.0]).unwrap(), 6.0);

        let e = p("-(2+sin(t))*x1", 1).diff(Var::Coord(0)).unwrap();
        let t = 0.7;
        assert!((e.eval(t, &[10.0]).unwrap() + (2.0 + t.sin())).abs() < 1e-15);

        let e = p("x1", 2).diff(Var::Coord(1)).unwrap();
        assert_eq!(e.eval(0.0, &[5.0, 7.0]).unwrap(), 0.0);
    }

    #[test]
    fn diff_time() {
        let e = p("sin(t)*x1", 1).diff(Var::Time).unwrap();
        assert!((e.eval(0.3, &[2.0]).unwrap() - 2.0 * 0.3f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn abs_not_differentiable() {
        let err = p("abs(x1)", 1).diff(Var::Coord(0)).unwrap_err();
        assert!(matches!(err, ExprError::NonDifferentiable { .. }));
    }

    #[test]
    fn domain_errors_carry_node() {
        let err = p("sqrt(x1)", 1).eval(0.0, &[-1.0]).unwrap_err();
        match err {
            ExprError::Domain { node, .. } => assert!(node.contains("sqrt")),
            other => panic!("unexpected {other:?}"),
        }
        let err = p("1/x1", 1).eval(0.0, &[0.0]).unwrap_err();
        assert!(matches!(err, ExprError::Domain { .. }));
    }

    #[test]
    fn unknown_identifier_rejected() {
        assert!(matches!(
            parse("x3+1", 2).unwrap_err(),
            ExprError::UnknownIdent { .. }
        ));
        assert!(matches!(
            parse("foo(x1)", 1).unwrap_err(),
            ExprError::UnknownIdent { .. }
        ));
    }

    #[test]
    fn print_parse_roundtrip_fixed_point() {
        for s in [
            "-(2+sin(t))*x1",
            "1+abs2(x)",
            "x1^2+x2^2",
            "exp(-abs2(x)/2)",
            "1/(1+exp(-4*x1))",
            "t*x1-x2/(1+x1^2)",
            "sqrt(1+x1^2)",
            "(1+x1^2)^(-2)+2^3",
        ] {
            let e = p(s, 2);
            let printed = e.to_string();
            let reparsed = parse(&printed, 2).unwrap();
            let printed2 = reparsed.to_string();
            assert_eq!(printed, printed2, "print/parse not a fixed point for {s}");
            for (t, x) in [(0.0, [0.3, -1.2]), (1.5, [2.0, 0.5]), (-0.7, [0.0, 4.0])] {
                let a = e.eval(t, &x).unwrap();
                let b = reparsed.eval(t, &x).unwrap();
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn derivative_matches_central_difference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20240601);
        let corpus = [
            "sin(x1)*cos(x2)",
            "exp(-abs2(x)/2)",
            "x1^3-2*x2+t*x1",
            "1/(1+abs2(x))",
            "sqrt(1+abs2(x))",
            "(1+x1^2)^2",
            "sin(t)*exp(x2/4)",
        ];
        let h = 1e-5;
        for s in corpus {
            let e = p(s, 2);
            for i in 0..2 {
                let de = e.diff(Var::Coord(i)).unwrap();
                for _ in 0..100 {
                    let t: f64 = rng.gen_range(-2.0..2.0);
                    let mut x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                    let exact = de.eval(t, &x).unwrap();
                    x[i] += h;
                    let up = e.eval(t, &x).unwrap();
                    x[i] -= 2.0 * h;
                    let dn = e.eval(t, &x).unwrap();
                    let fd = (up - dn) / (2.0 * h);
                    assert!(
                        (exact - fd).abs() <= 1e-6 * (1.0 + exact.abs()),
                        "{s} d/dx{} at t={t} x={x:?}: {exact} vs {fd}",
                        i + 1
                    );
                }
            }
        }
    }
}
