//! Compiled form of an [`Expression`] for hot loops.
//!
//! A flat postfix instruction sequence evaluated over a small stack. No
//! domain checking: invalid operations produce `NaN`/`inf` which the
//! numerical layers detect through their finiteness checks.

use super::{Expression, Node};

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    Time,
    Coord(u32),
    RadiusSq,
    Neg,
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
    Add,
    Sub,
    Mul,
    Div,
    PowI(i32),
}

#[derive(Debug, Clone)]
pub struct Program {
    ops: Vec<Op>,
    stack_depth: usize,
    dim: usize,
    /// Fast path when the expression is a plain constant.
    constant: Option<f64>,
}

impl Program {
    pub(crate) fn compile(e: &Expression) -> Program {
        let mut ops = Vec::new();
        emit(e.root(), &mut ops);
        let mut depth = 0usize;
        let mut max = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::Time | Op::Coord(_) | Op::RadiusSq => depth += 1,
                Op::Add | Op::Sub | Op::Mul | Op::Div => depth -= 1,
                _ => {}
            }
            max = max.max(depth);
        }
        let constant = match e.root() {
            Node::Const(c) => Some(*c),
            _ => None,
        };
        Program {
            ops,
            stack_depth: max,
            dim: e.dim(),
            constant,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_constant(&self) -> Option<f64> {
        self.constant
    }

    /// Evaluate at a single point.
    #[inline]
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        if let Some(c) = self.constant {
            return c;
        }
        debug_assert_eq!(x.len(), self.dim);
        let mut stack = [0.0f64; 16];
        debug_assert!(self.stack_depth <= stack.len());
        let mut sp = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(c) => {
                    stack[sp] = c;
                    sp += 1;
                }
                Op::Time => {
                    stack[sp] = t;
                    sp += 1;
                }
                Op::Coord(i) => {
                    stack[sp] = x[i as usize];
                    sp += 1;
                }
                Op::RadiusSq => {
                    stack[sp] = x.iter().map(|v| v * v).sum();
                    sp += 1;
                }
                Op::Neg => stack[sp - 1] = -stack[sp - 1],
                Op::Sin => stack[sp - 1] = stack[sp - 1].sin(),
                Op::Cos => stack[sp - 1] = stack[sp - 1].cos(),
                Op::Exp => stack[sp - 1] = stack[sp - 1].exp(),
                Op::Sqrt => stack[sp - 1] = stack[sp - 1].sqrt(),
                Op::Abs => stack[sp - 1] = stack[sp - 1].abs(),
                Op::Add => {
                    sp -= 1;
                    stack[sp - 1] += stack[sp];
                }
                Op::Sub => {
                    sp -= 1;
                    stack[sp - 1] -= stack[sp];
                }
                Op::Mul => {
                    sp -= 1;
                    stack[sp - 1] *= stack[sp];
                }
                Op::Div => {
                    sp -= 1;
                    stack[sp - 1] /= stack[sp];
                }
                Op::PowI(k) => stack[sp - 1] = stack[sp - 1].powi(k),
            }
        }
        stack[sp - 1]
    }
}

fn emit(n: &Node, out: &mut Vec<Op>) {
    match n {
        Node::Const(c) => out.push(Op::Const(*c)),
        Node::Time => out.push(Op::Time),
        Node::Coord(i) => out.push(Op::Coord(*i as u32)),
        Node::RadiusSq => out.push(Op::RadiusSq),
        Node::Neg(a) => {
            emit(a, out);
            out.push(Op::Neg);
        }
        Node::Sin(a) => {
            emit(a, out);
            out.push(Op::Sin);
        }
        Node::Cos(a) => {
            emit(a, out);
            out.push(Op::Cos);
        }
        Node::Exp(a) => {
            emit(a, out);
            out.push(Op::Exp);
        }
        Node::Sqrt(a) => {
            emit(a, out);
            out.push(Op::Sqrt);
        }
        Node::Abs(a) => {
            emit(a, out);
            out.push(Op::Abs);
        }
        Node::Add(a, b) => {
            emit(a, out);
            emit(b, out);
            out.push(Op::Add);
        }
        Node::Sub(a, b) => {
            emit(a, out);
            emit(b, out);
            out.push(Op::Sub);
        }
        Node::Mul(a, b) => {
            emit(a, out);
            emit(b, out);
            out.push(Op::Mul);
        }
        Node::Div(a, b) => {
            emit(a, out);
            emit(b, out);
            out.push(Op::Div);
        }
        Node::PowI(a, k) => {
            emit(a, out);
            out.push(Op::PowI(*k));
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::expr::parse;
    use rand::{Rng, SeedableRng};

    #[test]
    fn program_matches_tree_eval() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for s in [
            "-(2+sin(t))*x1",
            "exp(-abs2(x)/2)",
            "1/(1+exp(-4*x1))",
            "(1+x1^2)^(-1)*cos(t)+sqrt(abs2(x)+1)",
        ] {
            let e = parse(s, 2).unwrap();
            let prog = e.compile();
            for _ in 0..200 {
                let t: f64 = rng.gen_range(-3.0..3.0);
                let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
                let a = e.eval(t, &x).unwrap();
                let b = prog.eval(t, &x);
                assert_eq!(a.to_bits(), b.to_bits(), "{s} at t={t} x={x:?}");
            }
        }
    }
}
