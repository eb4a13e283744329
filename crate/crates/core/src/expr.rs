//! Small arithmetic expression language for user-supplied scalar fields.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | primary
//! primary := number | 'pi' | 't' | 'q'k | 'p'k | ('sin' | 'cos') '(' expr ')' | '(' expr ')'
//! ```
//!
//! Variables are 1-based: `q1` is the first configuration coordinate.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::system::{PhaseScalarField, ScalarField, TimeSignal, Vector};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Q(usize),
    P(usize),
    Time,
    Neg(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Bin(Op, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self> {
        let mut p = Parser { src, pos: 0 };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn eval(&self, q: &[f64], p: &[f64], t: f64) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Q(i) => q.get(*i).copied().unwrap_or(f64::NAN),
            Expr::P(i) => p.get(*i).copied().unwrap_or(f64::NAN),
            Expr::Time => t,
            Expr::Neg(e) => -e.eval(q, p, t),
            Expr::Sin(e) => e.eval(q, p, t).sin(),
            Expr::Cos(e) => e.eval(q, p, t).cos(),
            Expr::Bin(op, a, b) => {
                let (x, y) = (a.eval(q, p, t), b.eval(q, p, t));
                match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    Op::Mul => x * y,
                    Op::Div => x / y,
                }
            }
        }
    }

    /// Largest 1-based index of `q` and `p` variables used.
    pub fn max_indices(&self) -> (usize, usize) {
        match self {
            Expr::Q(i) => (i + 1, 0),
            Expr::P(i) => (0, i + 1),
            Expr::Const(_) | Expr::Time => (0, 0),
            Expr::Neg(e) | Expr::Sin(e) | Expr::Cos(e) => e.max_indices(),
            Expr::Bin(_, a, b) => {
                let (x, y) = (a.max_indices(), b.max_indices());
                (x.0.max(y.0), x.1.max(y.1))
            }
        }
    }

    pub fn uses_time(&self) -> bool {
        match self {
            Expr::Time => true,
            Expr::Const(_) | Expr::Q(_) | Expr::P(_) => false,
            Expr::Neg(e) | Expr::Sin(e) | Expr::Cos(e) => e.uses_time(),
            Expr::Bin(_, a, b) => a.uses_time() || b.uses_time(),
        }
    }
}

/// Parses a field of `q` only, rejecting `p`, `t` and indices beyond `n`.
pub fn scalar_field(src: &str, n: usize) -> Result<ScalarField> {
    let e = Expr::parse(src)?;
    let (nq, np) = e.max_indices();
    if np > 0 || e.uses_time() {
        return Err(Error::Parse(format!("`{src}` may only depend on q")));
    }
    if nq > n {
        return Err(Error::Parse(format!(
            "`{src}` uses q{nq} but the model has {n} coordinates"
        )));
    }
    Ok(Arc::new(move |q: &Vector| e.eval(q.as_slice(), &[], 0.0)))
}

/// Parses a field of `(q, p)`; `t` is rejected.
pub fn phase_field(src: &str, n: usize) -> Result<PhaseScalarField> {
    let e = Expr::parse(src)?;
    let (nq, np) = e.max_indices();
    if e.uses_time() {
        return Err(Error::Parse(format!("`{src}` may not depend on t")));
    }
    if nq.max(np) > n {
        return Err(Error::Parse(format!(
            "`{src}` indexes beyond the {n} model coordinates"
        )));
    }
    Ok(Arc::new(move |q: &Vector, p: &Vector| {
        e.eval(q.as_slice(), p.as_slice(), 0.0)
    }))
}

/// Parses a vector-valued signal of time from one expression per component.
pub fn time_signal(srcs: &[String]) -> Result<TimeSignal> {
    let exprs = srcs
        .iter()
        .map(|s| {
            let e = Expr::parse(s)?;
            if e.max_indices() != (0, 0) {
                return Err(Error::Parse(format!("`{s}` may only depend on t")));
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Arc::new(move |t| {
        Vector::from_iterator(exprs.len(), exprs.iter().map(|e| e.eval(&[], &[], t)))
    }))
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> Error {
        Error::Parse(format!("{msg} at offset {} in `{}`", self.pos, self.src))
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek().filter(|c| c.is_whitespace()) {
            self.pos += c.len_utf8();
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                Op::Add
            } else if self.eat('-') {
                Op::Sub
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                Op::Mul
            } else if self.eat('/') {
                Op::Div
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr> {
        self.skip_ws();
        if self.eat('(') {
            let e = self.expr()?;
            if !self.eat(')') {
                return Err(self.error("expected `)`"));
            }
            return Ok(e);
        }
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_digit() || c == '.' => {
                while self.peek().is_some_and(|c| c.is_ascii_digit() || c == '.') {
                    self.pos += 1;
                }
                if matches!(self.peek(), Some('e' | 'E')) {
                    let save = self.pos;
                    self.pos += 1;
                    if matches!(self.peek(), Some('+' | '-')) {
                        self.pos += 1;
                    }
                    if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                            self.pos += 1;
                        }
                    } else {
                        self.pos = save;
                    }
                }
                self.src[start..self.pos]
                    .parse()
                    .map(Expr::Const)
                    .map_err(|_| self.error("malformed number"))
            }
            Some(c) if c.is_ascii_alphabetic() => {
                while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
                    self.pos += 1;
                }
                let word = &self.src[start..self.pos];
                match word {
                    "pi" => Ok(Expr::Const(std::f64::consts::PI)),
                    "t" => Ok(Expr::Time),
                    "sin" | "cos" => {
                        if !self.eat('(') {
                            return Err(self.error("expected `(` after function name"));
                        }
                        let arg = Box::new(self.expr()?);
                        if !self.eat(')') {
                            return Err(self.error("expected `)`"));
                        }
                        Ok(if word == "sin" { Expr::Sin(arg) } else { Expr::Cos(arg) })
                    }
                    _ => {
                        let (kind, idx) = word.split_at(1);
                        match (kind, idx.parse::<usize>()) {
                            ("q", Ok(i)) if i >= 1 => Ok(Expr::Q(i - 1)),
                            ("p", Ok(i)) if i >= 1 => Ok(Expr::P(i - 1)),
                            _ => {
                                self.pos = start;
                                Err(self.error(&format!("unknown identifier `{word}`")))
                            }
                        }
                    }
                }
            }
            _ => Err(self.error("expected a number, variable, function or `(`")),
        }
    }
}
