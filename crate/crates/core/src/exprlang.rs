//! Small arithmetic language for coefficient expressions in config files.
//!
//! Grammar, lowest precedence first:
//!
//! ```text
//! expr   := sum (cmpop sum)?          cmpop: < <= > >= == !=
//! sum    := prod (('+' | '-') prod)*
//! prod   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?         right associative
//! atom   := number | name | name '(' args ')' | '(' expr ')'
//! ```
//!
//! So `-x1^2` is `-(x1^2)` and `2^-1` is `0.5`. Names `x1`..`xd` are
//! coordinates, `k` is the 1-based regime index, anything else must be bound
//! as a named parameter before evaluation. Comparisons evaluate to 0 or 1;
//! `ind(cond)` is the same value spelled as an indicator.
//!
//! Offsets in errors are 1-based byte columns.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Tanh,
    Abs,
    Sign,
    Sqrt,
    Ind,
    Min,
    Max,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            "sign" => Func::Sign,
            "sqrt" => Func::Sqrt,
            "ind" => Func::Ind,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
            Func::Sign => "sign",
            Func::Sqrt => "sqrt",
            Func::Ind => "ind",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Kind {
    Num(f64),
    /// Unresolved name as written.
    Name(String),
    Coord(usize),
    Regime,
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Expression node with the source column it came from.
///
/// Equality ignores positions, so a printed and reparsed tree compares equal
/// to the original.
#[derive(Debug, Clone)]
pub struct Expr {
    pub kind: Kind,
    pub pos: usize,
}

impl PartialEq for Kind {
    fn eq(&self, other: &Self) -> bool {
        use Kind::*;
        match (self, other) {
            (Num(a), Num(b)) => a.to_bits() == b.to_bits(),
            (Name(a), Name(b)) => a == b,
            (Coord(a), Coord(b)) => a == b,
            (Regime, Regime) => true,
            (Neg(a), Neg(b)) => a == b,
            (Bin(o, a, b), Bin(p, c, d)) => o == p && a == c && b == d,
            (Cmp(o, a, b), Cmp(p, c, d)) => o == p && a == c && b == d,
            (Call(f, a), Call(g, b)) => f == g && a == b,
            _ => false,
        }
    }
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("syntax error at column {offset}: expected {}", expected.join(" or "))]
pub struct SyntaxError {
    pub offset: usize,
    pub expected: Vec<&'static str>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalErrorKind {
    DivisionByZero,
    LogNonPositive,
    SqrtNegative,
    NonFinite,
    UnknownName,
    CoordOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("evaluation error at column {position}: {kind:?}")]
pub struct EvalError {
    pub kind: EvalErrorKind,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Name(String),
    Op(&'static str),
    End,
}

struct Lexer<'a> {
    src: &'a [u8],
    i: usize,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        while self.i < self.src.len() && self.src[self.i].is_ascii_whitespace() {
            self.i += 1;
        }
    }

    /// Returns the token and its 1-based column.
    fn next(&mut self) -> Result<(Tok, usize), SyntaxError> {
        self.skip_ws();
        let start = self.i;
        let col = start + 1;
        let Some(&c) = self.src.get(start) else {
            return Ok((Tok::End, col));
        };
        if c.is_ascii_digit() || c == b'.' {
            let mut j = start;
            while j < self.src.len() && (self.src[j].is_ascii_digit() || self.src[j] == b'.') {
                j += 1;
            }
            if j < self.src.len() && (self.src[j] == b'e' || self.src[j] == b'E') {
                let mut m = j + 1;
                if m < self.src.len() && (self.src[m] == b'+' || self.src[m] == b'-') {
                    m += 1;
                }
                if m < self.src.len() && self.src[m].is_ascii_digit() {
                    while m < self.src.len() && self.src[m].is_ascii_digit() {
                        m += 1;
                    }
                    j = m;
                }
            }
            let text = std::str::from_utf8(&self.src[start..j]).unwrap_or("");
            return match text.parse::<f64>() {
                Ok(v) => {
                    self.i = j;
                    Ok((Tok::Num(v), col))
                }
                Err(_) => Err(SyntaxError { offset: col, expected: vec!["number"] }),
            };
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let mut j = start;
            while j < self.src.len() && (self.src[j].is_ascii_alphanumeric() || self.src[j] == b'_') {
                j += 1;
            }
            self.i = j;
            let text = std::str::from_utf8(&self.src[start..j]).unwrap_or("").to_string();
            return Ok((Tok::Name(text), col));
        }
        let two = if start + 1 < self.src.len() { &self.src[start..start + 2] } else { &[][..] };
        for op in ["<=", ">=", "==", "!="] {
            if two == op.as_bytes() {
                self.i += 2;
                return Ok((Tok::Op(op), col));
            }
        }
        let op = match c {
            b'+' => "+",
            b'-' => "-",
            b'*' => "*",
            b'/' => "/",
            b'^' => "^",
            b'(' => "(",
            b')' => ")",
            b',' => ",",
            b'<' => "<",
            b'>' => ">",
            _ => {
                return Err(SyntaxError {
                    offset: col,
                    expected: vec!["number", "name", "operator", "'('", "')'"],
                })
            }
        };
        self.i += 1;
        Ok((Tok::Op(op), col))
    }
}

struct Parser<'a> {
    lex: Lexer<'a>,
    tok: Tok,
    col: usize,
}

const OPERAND: &[&str] = &["number", "name", "'('", "'-'"];

impl<'a> Parser<'a> {
    fn bump(&mut self) -> Result<(), SyntaxError> {
        let (t, c) = self.lex.next()?;
        self.tok = t;
        self.col = c;
        Ok(())
    }

    fn is_op(&self, op: &str) -> bool {
        matches!(&self.tok, Tok::Op(o) if *o == op)
    }

    fn expect_op(&mut self, op: &'static str) -> Result<(), SyntaxError> {
        if self.is_op(op) {
            self.bump()
        } else {
            Err(SyntaxError { offset: self.col, expected: vec![quote(op)] })
        }
    }

    fn expr(&mut self) -> Result<Expr, SyntaxError> {
        let lhs = self.sum()?;
        let op = match &self.tok {
            Tok::Op("<") => CmpOp::Lt,
            Tok::Op("<=") => CmpOp::Le,
            Tok::Op(">") => CmpOp::Gt,
            Tok::Op(">=") => CmpOp::Ge,
            Tok::Op("==") => CmpOp::Eq,
            Tok::Op("!=") => CmpOp::Ne,
            _ => return Ok(lhs),
        };
        let pos = self.col;
        self.bump()?;
        let rhs = self.sum()?;
        Ok(Expr { kind: Kind::Cmp(op, Box::new(lhs), Box::new(rhs)), pos })
    }

    fn sum(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.prod()?;
        loop {
            let op = if self.is_op("+") {
                BinOp::Add
            } else if self.is_op("-") {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            let pos = self.col;
            self.bump()?;
            let rhs = self.prod()?;
            lhs = Expr { kind: Kind::Bin(op, Box::new(lhs), Box::new(rhs)), pos };
        }
    }

    fn prod(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.is_op("*") {
                BinOp::Mul
            } else if self.is_op("/") {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            let pos = self.col;
            self.bump()?;
            let rhs = self.unary()?;
            lhs = Expr { kind: Kind::Bin(op, Box::new(lhs), Box::new(rhs)), pos };
        }
    }

    fn unary(&mut self) -> Result<Expr, SyntaxError> {
        if self.is_op("-") {
            let pos = self.col;
            self.bump()?;
            let inner = self.unary()?;
            return Ok(Expr { kind: Kind::Neg(Box::new(inner)), pos });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, SyntaxError> {
        let base = self.atom()?;
        if self.is_op("^") {
            let pos = self.col;
            self.bump()?;
            let exp = self.unary()?;
            return Ok(Expr { kind: Kind::Bin(BinOp::Pow, Box::new(base), Box::new(exp)), pos });
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, SyntaxError> {
        let pos = self.col;
        match self.tok.clone() {
            Tok::Num(v) => {
                self.bump()?;
                Ok(Expr { kind: Kind::Num(v), pos })
            }
            Tok::Name(name) => {
                self.bump()?;
                if let Some(f) = Func::from_name(&name) {
                    self.expect_op("(")?;
                    let mut args = vec![self.expr()?];
                    while args.len() < f.arity() {
                        self.expect_op(",")?;
                        args.push(self.expr()?);
                    }
                    self.expect_op(")")?;
                    return Ok(Expr { kind: Kind::Call(f, args), pos });
                }
                Ok(Expr { kind: Kind::Name(name), pos })
            }
            Tok::Op("(") => {
                self.bump()?;
                let inner = self.expr()?;
                self.expect_op(")")?;
                Ok(inner)
            }
            _ => Err(SyntaxError { offset: pos, expected: OPERAND.to_vec() }),
        }
    }
}

fn quote(op: &'static str) -> &'static str {
    match op {
        "(" => "'('",
        ")" => "')'",
        "," => "','",
        _ => "operator",
    }
}

/// Parses expression text into an unresolved tree.
pub fn parse(text: &str) -> Result<Expr, SyntaxError> {
    let mut p = Parser { lex: Lexer { src: text.as_bytes(), i: 0 }, tok: Tok::End, col: 1 };
    p.bump()?;
    let e = p.expr()?;
    if p.tok != Tok::End {
        return Err(SyntaxError { offset: p.col, expected: vec!["operator", "end of input"] });
    }
    Ok(e)
}

/// Parses and resolves names in one go.
pub fn compile(text: &str, dim: usize, params: &BTreeMap<String, f64>) -> Result<Expr, ExprError> {
    let e = parse(text)?;
    Ok(e.resolve(dim, params)?)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn coord_index(name: &str, dim: usize) -> Option<usize> {
    let digits = name.strip_prefix('x')?;
    let i: usize = digits.parse().ok()?;
    (i >= 1 && i <= dim).then_some(i - 1)
}

impl Expr {
    /// Binds coordinates, the regime index and named parameters. Parameters
    /// are substituted as literals.
    pub fn resolve(&self, dim: usize, params: &BTreeMap<String, f64>) -> Result<Expr, EvalError> {
        let kind = match &self.kind {
            Kind::Name(n) => {
                if n == "k" {
                    Kind::Regime
                } else if let Some(i) = coord_index(n, dim) {
                    Kind::Coord(i)
                } else if let Some(v) = params.get(n) {
                    Kind::Num(*v)
                } else {
                    let kind = if n.starts_with('x') && n[1..].parse::<usize>().is_ok() {
                        EvalErrorKind::CoordOutOfRange
                    } else {
                        EvalErrorKind::UnknownName
                    };
                    return Err(EvalError { kind, position: self.pos });
                }
            }
            Kind::Neg(a) => Kind::Neg(Box::new(a.resolve(dim, params)?)),
            Kind::Bin(o, a, b) => Kind::Bin(*o, Box::new(a.resolve(dim, params)?), Box::new(b.resolve(dim, params)?)),
            Kind::Cmp(o, a, b) => Kind::Cmp(*o, Box::new(a.resolve(dim, params)?), Box::new(b.resolve(dim, params)?)),
            Kind::Call(f, args) => {
                Kind::Call(*f, args.iter().map(|a| a.resolve(dim, params)).collect::<Result<_, _>>()?)
            }
            other => other.clone(),
        };
        Ok(Expr { kind, pos: self.pos })
    }

    /// True when the value cannot depend on the point or the regime.
    pub fn is_constant(&self) -> bool {
        match &self.kind {
            Kind::Num(_) => true,
            Kind::Name(_) | Kind::Coord(_) | Kind::Regime => false,
            Kind::Neg(a) => a.is_constant(),
            Kind::Bin(_, a, b) | Kind::Cmp(_, a, b) => a.is_constant() && b.is_constant(),
            Kind::Call(_, args) => args.iter().all(Expr::is_constant),
        }
    }

    fn err(&self, kind: EvalErrorKind) -> EvalError {
        EvalError { kind, position: self.pos }
    }

    /// Evaluates at point `x` in regime `k` (1-based).
    pub fn eval(&self, x: &[f64], k: usize) -> Result<f64, EvalError> {
        let v = match &self.kind {
            Kind::Num(v) => *v,
            Kind::Coord(i) => *x.get(*i).ok_or(self.err(EvalErrorKind::CoordOutOfRange))?,
            Kind::Regime => k as f64,
            Kind::Name(n) => {
                if n == "k" {
                    k as f64
                } else if let Some(i) = coord_index(n, x.len()) {
                    x[i]
                } else {
                    return Err(self.err(EvalErrorKind::UnknownName));
                }
            }
            Kind::Neg(a) => -a.eval(x, k)?,
            Kind::Bin(op, a, b) => {
                let l = a.eval(x, k)?;
                let r = b.eval(x, k)?;
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div => {
                        if r == 0.0 {
                            return Err(self.err(EvalErrorKind::DivisionByZero));
                        }
                        l / r
                    }
                    BinOp::Pow => pow(l, r),
                }
            }
            Kind::Cmp(op, a, b) => {
                let l = a.eval(x, k)?;
                let r = b.eval(x, k)?;
                let t = match op {
                    CmpOp::Lt => l < r,
                    CmpOp::Le => l <= r,
                    CmpOp::Gt => l > r,
                    CmpOp::Ge => l >= r,
                    CmpOp::Eq => l == r,
                    CmpOp::Ne => l != r,
                };
                if t {
                    1.0
                } else {
                    0.0
                }
            }
            Kind::Call(f, args) => {
                let a = args[0].eval(x, k)?;
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Log => {
                        if a <= 0.0 {
                            return Err(self.err(EvalErrorKind::LogNonPositive));
                        }
                        a.ln()
                    }
                    Func::Tanh => a.tanh(),
                    Func::Abs => a.abs(),
                    Func::Sign => {
                        if a > 0.0 {
                            1.0
                        } else if a < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(self.err(EvalErrorKind::SqrtNegative));
                        }
                        a.sqrt()
                    }
                    Func::Ind => {
                        if a != 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Func::Min => a.min(args[1].eval(x, k)?),
                    Func::Max => a.max(args[1].eval(x, k)?),
                }
            }
        };
        if !v.is_finite() {
            return Err(self.err(EvalErrorKind::NonFinite));
        }
        Ok(v)
    }
}

/// Integer exponents go through repeated multiplication so `x^2` equals
/// `x*x` bit for bit.
fn pow(base: f64, e: f64) -> f64 {
    if e.fract() == 0.0 && e.abs() <= 64.0 {
        base.powi(e as i32)
    } else {
        base.powf(e)
    }
}

fn prec(e: &Expr) -> u8 {
    match &e.kind {
        Kind::Cmp(..) => 0,
        Kind::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Kind::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Kind::Neg(_) => 3,
        Kind::Bin(BinOp::Pow, ..) => 4,
        _ => 5,
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, min: u8) -> fmt::Result {
    if prec(e) < min {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            Kind::Num(v) => write!(f, "{v:?}"),
            Kind::Name(n) => write!(f, "{n}"),
            Kind::Coord(i) => write!(f, "x{}", i + 1),
            Kind::Regime => write!(f, "k"),
            Kind::Neg(a) => {
                f.write_str("-")?;
                write_child(f, a, 3)
            }
            Kind::Bin(op, a, b) => {
                let (sym, p) = match op {
                    BinOp::Add => (" + ", 1),
                    BinOp::Sub => (" - ", 1),
                    BinOp::Mul => (" * ", 2),
                    BinOp::Div => (" / ", 2),
                    BinOp::Pow => ("^", 4),
                };
                if *op == BinOp::Pow {
                    // left operand of ^ must be an atom, right may be unary
                    write_child(f, a, 5)?;
                    f.write_str(sym)?;
                    write_child(f, b, 3)
                } else {
                    write_child(f, a, p)?;
                    f.write_str(sym)?;
                    write_child(f, b, p + 1)
                }
            }
            Kind::Cmp(op, a, b) => {
                write_child(f, a, 1)?;
                write!(f, " {} ", op.symbol())?;
                write_child(f, b, 1)
            }
            Kind::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, x: &[f64]) -> f64 {
        compile(s, x.len(), &BTreeMap::new()).unwrap().eval(x, 1).unwrap()
    }

    #[test]
    fn parses_call() {
        let e = parse("sign(x1)").unwrap();
        match e.kind {
            Kind::Call(Func::Sign, ref args) => assert_eq!(args[0].kind, Kind::Name("x1".into())),
            _ => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn unbalanced_paren_reports_column() {
        let err = parse("2*a*(").unwrap_err();
        assert_eq!(err.offset, 6);
        assert!(err.expected.contains(&"'('"));
    }

    #[test]
    fn switch_region_expression() {
        let e = compile("-x1 + ind(abs(x1) > 2)", 1, &BTreeMap::new()).unwrap();
        assert_eq!(e.eval(&[3.0], 1).unwrap(), -2.0);
        assert_eq!(e.eval(&[1.0], 1).unwrap(), -1.0);
        assert_eq!(e.eval(&[-2.5], 1).unwrap(), 3.5);
    }

    #[test]
    fn basic_values() {
        assert_eq!(ev("x1^2", &[3.0]), 9.0);
        assert_eq!(ev("tanh(10*x1)", &[0.0]), 0.0);
        assert_eq!(ev("ind(x1<0)*1.0", &[-1.0]), 1.0);
        assert_eq!(ev("-x1^2", &[3.0]), -9.0);
        assert_eq!(ev("2^-1", &[0.0]), 0.5);
        assert_eq!(ev("2^3^2", &[0.0]), 512.0);
        assert_eq!(ev("sign(0)", &[0.0]), 0.0);
        assert_eq!(ev("min(x1, 2) + max(x1, 2)", &[5.0]), 7.0);
        assert_eq!(ev("1 - 2 - 3", &[0.0]), -4.0);
        assert_eq!(ev("8 / 4 / 2", &[0.0]), 1.0);
        assert_eq!(ev("1.5e1 + .5", &[0.0]), 15.5);
    }

    #[test]
    fn regime_and_params() {
        let mut p = BTreeMap::new();
        p.insert("delta".to_string(), 0.5);
        let e = compile("delta*k", 1, &p).unwrap();
        assert_eq!(e.eval(&[0.0], 2).unwrap(), 1.0);
        assert!(compile("x2", 1, &p).is_err());
        assert!(compile("gamma", 1, &p).is_err());
    }

    #[test]
    fn eval_errors() {
        let e = compile("1/(x1-1)", 1, &BTreeMap::new()).unwrap();
        let err = e.eval(&[1.0], 1).unwrap_err();
        assert_eq!(err.kind, EvalErrorKind::DivisionByZero);
        assert_eq!(err.position, 2);
        let e = compile("log(x1)", 1, &BTreeMap::new()).unwrap();
        assert_eq!(e.eval(&[0.0], 1).unwrap_err().kind, EvalErrorKind::LogNonPositive);
        let e = compile("exp(x1)", 1, &BTreeMap::new()).unwrap();
        assert_eq!(e.eval(&[1000.0], 1).unwrap_err().kind, EvalErrorKind::NonFinite);
    }

    #[test]
    fn syntax_errors() {
        assert!(parse("").is_err());
        assert!(parse("1 +").is_err());
        assert!(parse("min(1)").is_err());
        assert!(parse("(1").is_err());
        assert!(parse("1 2").is_err());
        assert!(parse("x1 $ 2").is_err());
        assert_eq!(parse("sin 1").unwrap_err().offset, 5);
    }

    #[test]
    fn printing_round_trips() {
        for s in [
            "-x1^2",
            "(-x1)^2",
            "2^-1",
            "a - (b - c)",
            "a / (b * c)",
            "-(a + b)",
            "ind(abs(x1) > 2) * delta",
            "min(x1, -x2) <= 3",
            "--x1",
            "(1 < 2) + 1",
            "2^(3^2)",
            "(2^3)^2",
            "1e-300 + 0.1",
        ] {
            let e = parse(s).unwrap();
            let printed = e.to_string();
            assert_eq!(parse(&printed).unwrap(), e, "{s} -> {printed}");
        }
    }
}
