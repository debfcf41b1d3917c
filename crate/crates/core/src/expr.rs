//! Entry-formula grammar for representation families and subvariety polynomials.
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | atom
//! atom  := integer | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Identifiers: `n` (family index), `z` (parameter), any other name is looked
//! up in the caller's variable table. Functions: `pow(base, k)` with `k` an
//! integer expression in `n`, `E(x) = exp(p·x)`, `seq(name)`, and
//! `root(x0, c_0, …, c_{k-1})` for the Hensel-lifted root of the monic
//! `x^k + c_{k-1} x^{k-1} + … + c_0` near `x0`.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::padic::{hensel_lift_root, FieldSpec, PadicError, PadicScalar, Poly};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("parse error in {src:?} at byte {pos}: {msg}")]
    Parse { src: String, pos: usize, msg: String },
    #[error("unknown variable {0:?}")]
    UnknownVar(String),
    #[error("unknown sequence {0:?}")]
    UnknownSeq(String),
    #[error("`n` is not available when evaluating the limit")]
    IndexInLimit,
    #[error("sequence {0:?} has no limit expression")]
    NoSeqLimit(String),
    #[error("exponent is not an integer expression: {0}")]
    NonIntegerExponent(String),
    #[error(transparent)]
    Padic(#[from] PadicError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Int(i128),
    Var(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    ExpP(Box<Expr>),
    Seq(String),
    Root(Vec<Expr>),
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Int(k) => write!(f, "{k}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(x) => write!(f, "-({x})"),
            Expr::Bin(op, a, b) => {
                let s = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                };
                write!(f, "({a} {s} {b})")
            }
            Expr::Pow(a, b) => write!(f, "pow({a}, {b})"),
            Expr::ExpP(a) => write!(f, "E({a})"),
            Expr::Seq(s) => write!(f, "seq({s})"),
            Expr::Root(args) => {
                let parts: Vec<String> = args.iter().map(|a| a.to_string()).collect();
                write!(f, "root({})", parts.join(", "))
            }
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Parse { src: self.src.to_string(), pos: self.pos, msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), ExprError> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(format!("expected {:?}", c as char))
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(b'-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() => {
                let start = self.pos;
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                match self.src[start..self.pos].parse() {
                    Ok(k) => Ok(Expr::Int(k)),
                    Err(_) => self.err("integer literal out of range"),
                }
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.bytes.len()
                    && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let name = &self.src[start..self.pos];
                if !self.eat(b'(') {
                    return Ok(Expr::Var(name.to_string()));
                }
                if name == "seq" {
                    self.skip_ws();
                    let s = self.pos;
                    while self.pos < self.bytes.len()
                        && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
                    {
                        self.pos += 1;
                    }
                    let seq = self.src[s..self.pos].to_string();
                    if seq.is_empty() {
                        return self.err("expected sequence name");
                    }
                    self.expect(b')')?;
                    return Ok(Expr::Seq(seq));
                }
                let mut args = vec![self.expr()?];
                while self.eat(b',') {
                    args.push(self.expr()?);
                }
                self.expect(b')')?;
                match (name, args.len()) {
                    ("pow", 2) => {
                        let k = args.pop().unwrap();
                        Ok(Expr::Pow(Box::new(args.pop().unwrap()), Box::new(k)))
                    }
                    ("E", 1) => Ok(Expr::ExpP(Box::new(args.pop().unwrap()))),
                    ("root", k) if k >= 2 => Ok(Expr::Root(args)),
                    _ => self.err(format!("unknown function {name}/{}", args.len())),
                }
            }
            _ => self.err("unexpected token"),
        }
    }
}

pub fn parse(src: &str) -> Result<Expr, ExprError> {
    let mut p = Parser { src, bytes: src.as_bytes(), pos: 0 };
    let e = p.expr()?;
    if p.peek().is_some() {
        return p.err("trailing input");
    }
    Ok(e)
}

/// A named integer sequence: explicit table, closure formula, and limit.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqDef {
    pub table: Vec<Expr>,
    pub formula: Option<Expr>,
    pub limit: Option<Expr>,
}

/// Where an expression is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Index {
    Member(i64),
    Limit,
}

impl fmt::Display for Index {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Index::Member(n) => write!(f, "{n}"),
            Index::Limit => write!(f, "limit"),
        }
    }
}

pub struct Env<'a> {
    pub field: FieldSpec,
    pub index: Index,
    pub z: Option<PadicScalar>,
    pub seqs: &'a BTreeMap<String, SeqDef>,
    pub vars: &'a BTreeMap<String, PadicScalar>,
}

impl Env<'_> {
    pub fn eval(&self, e: &Expr) -> Result<PadicScalar, ExprError> {
        let f = self.field;
        Ok(match e {
            Expr::Int(k) => PadicScalar::from_int(f, *k),
            Expr::Var(name) => match name.as_str() {
                "n" => match self.index {
                    Index::Member(n) => PadicScalar::from_int(f, n as i128),
                    Index::Limit => return Err(ExprError::IndexInLimit),
                },
                "z" => self.z.unwrap_or_else(|| PadicScalar::one(f)),
                other => *self.vars.get(other).ok_or_else(|| ExprError::UnknownVar(other.into()))?,
            },
            Expr::Neg(x) => self.eval(x)?.neg(),
            Expr::Bin(op, a, b) => {
                let (a, b) = (self.eval(a)?, self.eval(b)?);
                match op {
                    BinOp::Add => a.add(&b),
                    BinOp::Sub => a.sub(&b),
                    BinOp::Mul => a.mul(&b),
                    BinOp::Div => a.div(&b)?,
                }
            }
            Expr::Pow(base, k) => {
                let k = self.eval_int(k)?;
                self.eval(base)?.pow(k)?
            }
            Expr::ExpP(x) => PadicScalar::from_int(f, f.p() as i128).mul(&self.eval(x)?).exp()?,
            Expr::Seq(name) => {
                let def = self.seqs.get(name).ok_or_else(|| ExprError::UnknownSeq(name.clone()))?;
                match self.index {
                    Index::Member(n) => {
                        let inner = match def.table.get(n as usize) {
                            Some(entry) if n >= 0 => entry,
                            _ => def.formula.as_ref().ok_or_else(|| ExprError::UnknownSeq(name.clone()))?,
                        };
                        self.eval(inner)?
                    }
                    Index::Limit => {
                        let lim = def.limit.as_ref().ok_or_else(|| ExprError::NoSeqLimit(name.clone()))?;
                        self.eval(lim)?
                    }
                }
            }
            Expr::Root(args) => {
                let x0 = self.eval(&args[0])?;
                let mut coeffs = args[1..].iter().map(|a| self.eval(a)).collect::<Result<Vec<_>, _>>()?;
                coeffs.push(PadicScalar::one(f));
                hensel_lift_root(&Poly::new(coeffs), &x0)?
            }
        })
    }

    /// Integer-valued evaluation for exponents.
    pub fn eval_int(&self, e: &Expr) -> Result<i64, ExprError> {
        let bad = || ExprError::NonIntegerExponent(e.to_string());
        Ok(match e {
            Expr::Int(k) => i64::try_from(*k).map_err(|_| bad())?,
            Expr::Var(v) if v == "n" => match self.index {
                Index::Member(n) => n,
                Index::Limit => return Err(ExprError::IndexInLimit),
            },
            Expr::Neg(x) => -self.eval_int(x)?,
            Expr::Bin(op, a, b) => {
                let (a, b) = (self.eval_int(a)?, self.eval_int(b)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div if b != 0 && a % b == 0 => a / b,
                    BinOp::Div => return Err(bad()),
                }
            }
            Expr::Pow(b, k) => {
                let (b, k) = (self.eval_int(b)?, self.eval_int(k)?);
                if k < 0 {
                    return Err(bad());
                }
                b.checked_pow(k as u32).ok_or_else(bad)?
            }
            _ => return Err(bad()),
        })
    }
}

/// Whether an expression mentions the family index `n`.
pub fn mentions_index(e: &Expr) -> bool {
    match e {
        Expr::Var(v) => v == "n",
        Expr::Int(_) | Expr::Seq(_) => false,
        Expr::Neg(x) | Expr::ExpP(x) => mentions_index(x),
        Expr::Bin(_, a, b) | Expr::Pow(a, b) => mentions_index(a) || mentions_index(b),
        Expr::Root(args) => args.iter().any(mentions_index),
    }
}
