//! Recursive-descent parser for the expression language.
//!
//! Precedence, loosest to tightest: `+ -`, `* /`, unary `-`, `^` (constant
//! integer exponent only), primaries. Whitespace is insignificant.

use super::{Expression, ExprError, Node};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn next(&mut self) -> Result<Option<(Tok, usize)>, ExprError> {
        self.skip_ws();
        if self.pos >= self.src.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            b'0'..=b'9' | b'.' => {
                let mut end = self.pos;
                let mut seen_exp = false;
                while end < self.src.len() {
                    let b = self.src[end];
                    if b.is_ascii_digit() || b == b'.' {
                        end += 1;
                    } else if (b == b'e' || b == b'E') && !seen_exp {
                        // accept exponent with optional sign if digits follow
                        let mut k = end + 1;
                        if k < self.src.len() && (self.src[k] == b'+' || self.src[k] == b'-') {
                            k += 1;
                        }
                        if k < self.src.len() && self.src[k].is_ascii_digit() {
                            seen_exp = true;
                            end = k;
                        } else {
                            break;
                        }
                    } else {
                        break;
                    }
                }
                let text = std::str::from_utf8(&self.src[start..end]).unwrap();
                let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
                    pos: start,
                    msg: format!("invalid number literal `{text}`"),
                })?;
                self.pos = end;
                return Ok(Some((Tok::Num(v), start)));
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_')
                {
                    end += 1;
                }
                let name = std::str::from_utf8(&self.src[start..end]).unwrap().to_string();
                self.pos = end;
                return Ok(Some((Tok::Ident(name), start)));
            }
            other => {
                return Err(ExprError::Syntax {
                    pos: start,
                    msg: format!("unexpected character `{}`", other as char),
                })
            }
        };
        self.pos += 1;
        Ok(Some((tok, start)))
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    idx: usize,
    dim: usize,
    len: usize,
}

/// Parse `text` as an expression in dimension `dim`.
pub fn parse(text: &str, dim: usize) -> Result<Expression, ExprError> {
    let mut lx = Lexer::new(text);
    let mut toks = Vec::new();
    while let Some(t) = lx.next()? {
        toks.push(t);
    }
    let mut p = Parser {
        toks,
        idx: 0,
        dim,
        len: text.len(),
    };
    let root = p.expr()?;
    if let Some((_, pos)) = p.peek_tok() {
        return Err(ExprError::Syntax {
            pos,
            msg: "trailing input after expression".into(),
        });
    }
    Ok(Expression::from_node(root, dim))
}

impl Parser {
    fn peek_tok(&self) -> Option<(Tok, usize)> {
        self.toks.get(self.idx).cloned()
    }

    fn bump(&mut self) -> Option<(Tok, usize)> {
        let t = self.toks.get(self.idx).cloned();
        if t.is_some() {
            self.idx += 1;
        }
        t
    }

    fn here(&self) -> usize {
        self.toks.get(self.idx).map(|(_, p)| *p).unwrap_or(self.len)
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<usize, ExprError> {
        match self.bump() {
            Some((t, p)) if t == want => Ok(p),
            Some((_, p)) => Err(ExprError::Syntax {
                pos: p,
                msg: format!("expected {what}"),
            }),
            None => Err(ExprError::Syntax {
                pos: self.len,
                msg: format!("expected {what}, found end of input"),
            }),
        }
    }

    // expr := term (('+'|'-') term)*
    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek_tok() {
                Some((Tok::Plus, _)) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = Node::Add(Box::new(lhs), Box::new(rhs));
                }
                Some((Tok::Minus, _)) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = Node::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // term := unary (('*'|'/') unary)*
    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek_tok() {
                Some((Tok::Star, _)) => {
                    self.bump();
                    let rhs = self.unary()?;
                    lhs = Node::Mul(Box::new(lhs), Box::new(rhs));
                }
                Some((Tok::Slash, _)) => {
                    self.bump();
                    let rhs = self.unary()?;
                    lhs = Node::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // unary := '-' unary | power
    fn unary(&mut self) -> Result<Node, ExprError> {
        if let Some((Tok::Minus, _)) = self.peek_tok() {
            self.bump();
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    // power := primary ('^' int)?   -- binds tighter than unary minus
    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.primary()?;
        if let Some((Tok::Caret, _)) = self.peek_tok() {
            self.bump();
            let k = self.int_exponent()?;
            return Ok(Node::PowI(Box::new(base), k));
        }
        Ok(base)
    }

    fn int_exponent(&mut self) -> Result<i32, ExprError> {
        let mut negate = false;
        let mut parens = false;
        if let Some((Tok::LParen, _)) = self.peek_tok() {
            self.bump();
            parens = true;
        }
        if let Some((Tok::Minus, _)) = self.peek_tok() {
            self.bump();
            negate = true;
        }
        let pos = self.here();
        let k = match self.bump() {
            Some((Tok::Num(v), p)) => {
                if v.fract() != 0.0 || v.abs() > i32::MAX as f64 {
                    return Err(ExprError::Syntax {
                        pos: p,
                        msg: format!("exponent must be a constant integer, got `{v}`"),
                    });
                }
                v as i32
            }
            _ => {
                return Err(ExprError::Syntax {
                    pos,
                    msg: "exponent must be a constant integer".into(),
                })
            }
        };
        if parens {
            self.expect(Tok::RParen, "`)` closing exponent")?;
        }
        Ok(if negate { -k } else { k })
    }

    fn primary(&mut self) -> Result<Node, ExprError> {
        match self.bump() {
            Some((Tok::Num(v), _)) => Ok(Node::Const(v)),
            Some((Tok::LParen, _)) => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Some((Tok::Ident(name), pos)) => self.ident(name, pos),
            Some((_, pos)) => Err(ExprError::Syntax {
                pos,
                msg: "expected a number, variable, function call or `(`".into(),
            }),
            None => Err(ExprError::Syntax {
                pos: self.len,
                msg: "unexpected end of input".into(),
            }),
        }
    }

    fn ident(&mut self, name: String, pos: usize) -> Result<Node, ExprError> {
        let is_call = matches!(self.peek_tok(), Some((Tok::LParen, _)));
        match name.as_str() {
            "t" if !is_call => return Ok(Node::Time),
            "pi" if !is_call => return Ok(Node::Const(std::f64::consts::PI)),
            _ => {}
        }
        if !is_call {
            if let Some(idx) = coord_index(&name) {
                if idx == 0 || idx > self.dim {
                    return Err(ExprError::UnknownIdent { name, pos });
                }
                return Ok(Node::Coord(idx - 1));
            }
            return Err(ExprError::UnknownIdent { name, pos });
        }
        // function call
        self.expect(Tok::LParen, "`(`")?;
        match name.as_str() {
            "sin" | "cos" | "exp" | "sqrt" | "abs" => {
                let arg = self.expr()?;
                if matches!(self.peek_tok(), Some((Tok::Comma, _))) {
                    return Err(ExprError::Arity {
                        name,
                        pos,
                        expected: 1,
                    });
                }
                self.expect(Tok::RParen, "`)`")?;
                let b = Box::new(arg);
                Ok(match name.as_str() {
                    "sin" => Node::Sin(b),
                    "cos" => Node::Cos(b),
                    "exp" => Node::Exp(b),
                    "sqrt" => Node::Sqrt(b),
                    _ => Node::Abs(b),
                })
            }
            "abs2" => {
                // abs2(x): the vector token `x` is only meaningful here
                match self.bump() {
                    Some((Tok::Ident(arg), _)) if arg == "x" => {}
                    Some((_, p)) => {
                        return Err(ExprError::Syntax {
                            pos: p,
                            msg: "abs2 takes the whole point: write `abs2(x)`".into(),
                        })
                    }
                    None => {
                        return Err(ExprError::Syntax {
                            pos: self.len,
                            msg: "abs2 takes the whole point: write `abs2(x)`".into(),
                        })
                    }
                }
                self.expect(Tok::RParen, "`)`")?;
                Ok(Node::RadiusSq)
            }
            _ => Err(ExprError::UnknownIdent { name, pos }),
        }
    }
}

fn coord_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix('x')?;
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok()
}
