//! A small arithmetic expression language for dynamics right-hand sides and
//! cost integrands.
//!
//! Grammar (whitespace is insignificant between tokens):
//!
//! ```text
//! expr    = term  { ("+" | "-") term } ;
//! term    = unary { ("*" | "/") unary } ;
//! unary   = "-" unary | power ;
//! power   = primary [ "^" unary ] ;
//! primary = number | variable | function "(" expr { "," expr } ")" | "(" expr ")" ;
//! variable = "t" | "tf" | "x" digits | "theta" digits ;
//! function = "exp" | "log" | "sin" | "cos" | "tanh" | "abs" | "sqrt" | "min" | "max" ;
//! ```
//!
//! `^` is right-associative and binds tighter than unary minus, so `-x0^2`
//! is `-(x0^2)` and `2^3^2` is `2^(3^2)`. `min` and `max` take two arguments,
//! every other function takes one. `abs`, `min` and `max` are not smooth;
//! gradient-based tuning may stall at their kinks.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

/// Byte range of a subexpression in its source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    /// `t`
    Time,
    /// `tf`
    FinalTime,
    /// `x<j>`
    State(usize),
    /// `theta<j>`
    Param(usize),
}

impl Var {
    fn from_name(name: &str) -> Option<Var> {
        fn index(digits: &str) -> Option<usize> {
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            // no leading zeros, so that every variable has one spelling
            if digits.len() > 1 && digits.starts_with('0') {
                return None;
            }
            digits.parse().ok()
        }
        match name {
            "t" => Some(Var::Time),
            "tf" => Some(Var::FinalTime),
            _ => {
                if let Some(rest) = name.strip_prefix("theta") {
                    index(rest).map(Var::Param)
                } else if let Some(rest) = name.strip_prefix('x') {
                    index(rest).map(Var::State)
                } else {
                    None
                }
            }
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::Time => write!(f, "t"),
            Var::FinalTime => write!(f, "tf"),
            Var::State(j) => write!(f, "x{j}"),
            Var::Param(j) => write!(f, "theta{j}"),
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

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Abs,
    Sqrt,
    Min,
    Max,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Parsed expression tree. Every node remembers where it came from so that
/// evaluation errors can point at the offending subexpression.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown function `{name}` at byte {offset}")]
    UnknownFunction { name: String, offset: usize },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. } | ParseError::UnknownFunction { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("no binding for variable `{name}` (bytes {span})")]
    MissingBinding { name: String, span: Span },
    #[error("domain error: {message} (bytes {span})")]
    Domain { message: String, span: Span },
}

/// Source of variable values during evaluation.
pub trait Bindings {
    fn lookup(&self, var: Var) -> Option<f64>;
}

impl Bindings for HashMap<String, f64> {
    fn lookup(&self, var: Var) -> Option<f64> {
        self.get(&var.to_string()).copied()
    }
}

/// Positional bindings used on the hot path of simulation.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub t: f64,
    pub tf: f64,
    pub x: &'a [f64],
    pub theta: &'a [f64],
}

impl Bindings for EvalContext<'_> {
    fn lookup(&self, var: Var) -> Option<f64> {
        match var {
            Var::Time => Some(self.t),
            Var::FinalTime => Some(self.tf),
            Var::State(j) => self.x.get(j).copied(),
            Var::Param(j) => self.theta.get(j).copied(),
        }
    }
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr, ParseError> {
        let tokens = lex(text)?;
        let mut parser = Parser { tokens, pos: 0 };
        let expr = parser.expr()?;
        match parser.peek() {
            Token { kind: Tok::Eof, .. } => Ok(expr),
            tok => Err(ParseError::Syntax {
                offset: tok.start,
                message: format!("unexpected {}", tok.kind.describe()),
            }),
        }
    }

    pub fn evaluate<B: Bindings + ?Sized>(&self, bindings: &B) -> Result<f64, EvalError> {
        let value = match &self.kind {
            ExprKind::Num(v) => *v,
            ExprKind::Var(var) => bindings.lookup(*var).ok_or_else(|| EvalError::MissingBinding {
                name: var.to_string(),
                span: self.span,
            })?,
            ExprKind::Neg(inner) => -inner.evaluate(bindings)?,
            ExprKind::Binary(op, lhs, rhs) => {
                let a = lhs.evaluate(bindings)?;
                let b = rhs.evaluate(bindings)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(self.domain("division by zero"));
                        }
                        a / b
                    }
                    BinOp::Pow => {
                        let v = a.powf(b);
                        if v.is_nan() {
                            return Err(self.domain("power has no real value"));
                        }
                        v
                    }
                }
            }
            ExprKind::Call(func, args) => {
                let a = args[0].evaluate(bindings)?;
                match func {
                    Func::Exp => a.exp(),
                    Func::Log => {
                        if a <= 0.0 {
                            return Err(self.domain("log of non-positive value"));
                        }
                        a.ln()
                    }
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Tanh => a.tanh(),
                    Func::Abs => a.abs(),
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(self.domain("sqrt of negative value"));
                        }
                        a.sqrt()
                    }
                    Func::Min => a.min(args[1].evaluate(bindings)?),
                    Func::Max => a.max(args[1].evaluate(bindings)?),
                }
            }
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(self.domain("non-finite result"))
        }
    }

    fn domain(&self, message: &str) -> EvalError {
        EvalError::Domain {
            message: message.to_string(),
            span: self.span,
        }
    }

    pub fn free_variables(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<Var>) {
        match &self.kind {
            ExprKind::Num(_) => {}
            ExprKind::Var(v) => {
                out.insert(*v);
            }
            ExprKind::Neg(e) => e.collect_vars(out),
            ExprKind::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            ExprKind::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }
}

/// Fully parenthesized rendering; parsing it yields an equivalent tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ExprKind::Num(v) => write!(f, "{v:?}"),
            ExprKind::Var(v) => write!(f, "{v}"),
            ExprKind::Neg(e) => write!(f, "(-{e})"),
            ExprKind::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            ExprKind::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// An expression together with the text it was parsed from. Problem files
/// keep the original spelling, so this is what the model stores.
#[derive(Debug, Clone, PartialEq)]
pub struct Formula {
    source: String,
    expr: Expr,
}

impl Formula {
    pub fn parse(source: &str) -> Result<Formula, ParseError> {
        Ok(Formula {
            source: source.to_string(),
            expr: Expr::parse(source)?,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn evaluate<B: Bindings + ?Sized>(&self, bindings: &B) -> Result<f64, EvalError> {
        self.expr.evaluate(bindings)
    }

    pub fn free_variables(&self) -> BTreeSet<Var> {
        self.expr.free_variables()
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

// ---------------------------------------------------------------------------
// lexer

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
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Tok,
    start: usize,
    end: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            b'0'..=b'9' | b'.' => {
                let end = scan_number(bytes, i);
                let literal = &text[i..end];
                let value: f64 = literal.parse().map_err(|_| ParseError::Syntax {
                    offset: start,
                    message: format!("malformed number `{literal}`"),
                })?;
                if !value.is_finite() {
                    return Err(ParseError::Syntax {
                        offset: start,
                        message: format!("number `{literal}` out of range"),
                    });
                }
                i = end;
                tokens.push(Token {
                    kind: Tok::Num(value),
                    start,
                    end,
                });
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut end = i;
                while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                    end += 1;
                }
                tokens.push(Token {
                    kind: Tok::Ident(text[i..end].to_string()),
                    start,
                    end,
                });
                i = end;
                continue;
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        };
        i += 1;
        tokens.push(Token { kind, start, end: i });
    }
    tokens.push(Token {
        kind: Tok::Eof,
        start: text.len(),
        end: text.len(),
    });
    Ok(tokens)
}

fn scan_number(bytes: &[u8], mut i: usize) -> usize {
    while i < bytes.len() && bytes[i].is_ascii_digit() {
        i += 1;
    }
    if i < bytes.len() && bytes[i] == b'.' {
        i += 1;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
    }
    if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
        let mut j = i + 1;
        if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
            j += 1;
        }
        if j < bytes.len() && bytes[j].is_ascii_digit() {
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            i = j;
        }
    }
    i
}

// ---------------------------------------------------------------------------
// parser

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> Token {
        let tok = self.tokens[self.pos].clone();
        if tok.kind != Tok::Eof {
            self.pos += 1;
        }
        tok
    }

    fn expect(&mut self, want: Tok) -> Result<Token, ParseError> {
        let tok = self.peek();
        if tok.kind == want {
            Ok(self.bump())
        } else {
            Err(ParseError::Syntax {
                offset: tok.start,
                message: format!("expected {}, found {}", want.describe(), tok.kind.describe()),
            })
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().kind {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().kind {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek().kind == Tok::Minus {
            let minus = self.bump();
            let inner = self.unary()?;
            let span = Span {
                start: minus.start,
                end: inner.span.end,
            };
            return Ok(Expr {
                kind: ExprKind::Neg(Box::new(inner)),
                span,
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.peek().kind == Tok::Caret {
            self.bump();
            let exponent = self.unary()?;
            return Ok(binary(BinOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let tok = self.bump();
        match tok.kind {
            Tok::Num(v) => Ok(Expr {
                kind: ExprKind::Num(v),
                span: Span {
                    start: tok.start,
                    end: tok.end,
                },
            }),
            Tok::LParen => {
                let inner = self.expr()?;
                let close = self.expect(Tok::RParen)?;
                // keep the parentheses in the span so errors cover what the user wrote
                Ok(Expr {
                    kind: inner.kind,
                    span: Span {
                        start: tok.start,
                        end: close.end,
                    },
                })
            }
            Tok::Ident(name) => {
                if self.peek().kind == Tok::LParen {
                    let func = Func::from_name(&name).ok_or_else(|| ParseError::UnknownFunction {
                        name: name.clone(),
                        offset: tok.start,
                    })?;
                    self.bump();
                    let mut args = vec![self.expr()?];
                    while self.peek().kind == Tok::Comma {
                        self.bump();
                        args.push(self.expr()?);
                    }
                    let close = self.expect(Tok::RParen)?;
                    if args.len() != func.arity() {
                        return Err(ParseError::Syntax {
                            offset: tok.start,
                            message: format!(
                                "`{}` takes {} argument(s), got {}",
                                func.name(),
                                func.arity(),
                                args.len()
                            ),
                        });
                    }
                    return Ok(Expr {
                        kind: ExprKind::Call(func, args),
                        span: Span {
                            start: tok.start,
                            end: close.end,
                        },
                    });
                }
                let var = Var::from_name(&name).ok_or_else(|| ParseError::Syntax {
                    offset: tok.start,
                    message: format!("unknown variable `{name}`"),
                })?;
                Ok(Expr {
                    kind: ExprKind::Var(var),
                    span: Span {
                        start: tok.start,
                        end: tok.end,
                    },
                })
            }
            other => Err(ParseError::Syntax {
                offset: tok.start,
                message: format!("expected an expression, found {}", other.describe()),
            }),
        }
    }
}

fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
    let span = Span {
        start: lhs.span.start,
        end: rhs.span.end,
    };
    Expr {
        kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)),
        span,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval_with(text: &str, vars: &[(&str, f64)]) -> Result<f64, EvalError> {
        let map: HashMap<String, f64> = vars.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        Expr::parse(text).unwrap().evaluate(&map)
    }

    #[test]
    fn precedence() {
        assert_eq!(eval_with("2+3*4", &[]).unwrap(), 14.0);
        assert_eq!(eval_with("-x0^2", &[("x0", 2.0)]).unwrap(), -4.0);
        assert_eq!(eval_with("2^3^2", &[]).unwrap(), 512.0);
        assert_eq!(eval_with("8/4/2", &[]).unwrap(), 1.0);
        assert_eq!(eval_with("8-4-2", &[]).unwrap(), 2.0);
        assert_eq!(eval_with("2^-1", &[]).unwrap(), 0.5);
        assert_eq!(eval_with(" ( 1 +2 ) * 3 ", &[]).unwrap(), 9.0);
    }

    #[test]
    fn unbalanced_paren_reports_end_offset() {
        let err = Expr::parse("exp(").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { offset: 4, .. }), "{err}");
    }

    #[test]
    fn unknown_function() {
        let err = Expr::parse("1 + foo(x0)").unwrap_err();
        assert_eq!(
            err,
            ParseError::UnknownFunction {
                name: "foo".into(),
                offset: 4
            }
        );
    }

    #[test]
    fn bad_arity_and_variable() {
        assert!(Expr::parse("min(1)").is_err());
        assert!(Expr::parse("sin(1, 2)").is_err());
        assert!(Expr::parse("y + 1").is_err());
        assert!(Expr::parse("x01").is_err());
        assert!(Expr::parse("1 2").is_err());
    }

    #[test]
    fn arithmetic() {
        assert_eq!(
            eval_with("x0^2 + theta0", &[("x0", 2.0), ("theta0", 1.0)]).unwrap(),
            5.0
        );
        let v = eval_with("exp(-1)", &[]).unwrap();
        assert!((v - 0.36787944117).abs() < 1e-10);
        assert_eq!(eval_with("max(min(3, 1), 2) + abs(-1.5e0)", &[]).unwrap(), 3.5);
    }

    #[test]
    fn domain_errors_carry_location() {
        let err = eval_with("x1/x0", &[("x0", 0.0), ("x1", 1.0)]).unwrap_err();
        assert_eq!(
            err,
            EvalError::Domain {
                message: "division by zero".into(),
                span: Span { start: 0, end: 5 }
            }
        );
        let err = eval_with("1 + log(x0)", &[("x0", -1.0)]).unwrap_err();
        assert!(matches!(
            err,
            EvalError::Domain {
                span: Span { start: 4, end: 11 },
                ..
            }
        ));
        assert!(eval_with("sqrt(-1)", &[]).is_err());
        assert!(eval_with("(-8)^0.5", &[]).is_err());
        assert!(eval_with("exp(1000)", &[]).is_err());
    }

    #[test]
    fn missing_binding_names_variable() {
        let err = eval_with("x0 + theta3", &[("x0", 1.0)]).unwrap_err();
        match err {
            EvalError::MissingBinding { name, span } => {
                assert_eq!(name, "theta3");
                assert_eq!(span, Span { start: 5, end: 11 });
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn free_variables_is_a_set() {
        let names = |s: &str| -> Vec<String> {
            Expr::parse(s)
                .unwrap()
                .free_variables()
                .iter()
                .map(|v| v.to_string())
                .collect()
        };
        assert_eq!(names("sin(t)*theta0"), vec!["t", "theta0"]);
        assert!(names("3.5").is_empty());
        assert_eq!(names("x0 + x0"), vec!["x0"]);
    }

    #[test]
    fn context_bindings() {
        let e = Expr::parse("t + tf + x1 + theta0").unwrap();
        let ctx = EvalContext {
            t: 1.0,
            tf: 2.0,
            x: &[0.0, 3.0],
            theta: &[4.0],
        };
        assert_eq!(e.evaluate(&ctx).unwrap(), 10.0);
    }

    // Reference interpreter: a tiny tree with its own rendering and its own
    // evaluation, independent of the parser.
    #[derive(Debug, Clone)]
    enum Ref {
        Num(f64),
        X(usize),
        Neg(Box<Ref>),
        Bin(char, Box<Ref>, Box<Ref>),
        Fun(&'static str, Box<Ref>),
    }

    impl Ref {
        fn eval(&self, x: &[f64]) -> f64 {
            match self {
                Ref::Num(v) => *v,
                Ref::X(j) => x[*j],
                Ref::Neg(a) => -a.eval(x),
                Ref::Bin(op, a, b) => {
                    let (a, b) = (a.eval(x), b.eval(x));
                    match op {
                        '+' => a + b,
                        '-' => a - b,
                        '*' => a * b,
                        '/' => a / b,
                        _ => unreachable!(),
                    }
                }
                Ref::Fun(name, a) => {
                    let a = a.eval(x);
                    match *name {
                        "sin" => a.sin(),
                        "cos" => a.cos(),
                        "tanh" => a.tanh(),
                        "abs" => a.abs(),
                        _ => unreachable!(),
                    }
                }
            }
        }

        // Minimal parenthesization driven by the documented precedence.
        fn render(&self, ws: &str) -> String {
            match self {
                Ref::Num(v) => format!("{v}"),
                Ref::X(j) => format!("x{j}"),
                Ref::Neg(a) => format!("-{}", a.render_at(3, ws)),
                Ref::Bin(op, a, b) => {
                    let (lp, rp) = match op {
                        '+' | '-' => (1, 2),
                        _ => (2, 3),
                    };
                    format!("{}{ws}{op}{ws}{}", a.render_at(lp, ws), b.render_at(rp, ws))
                }
                Ref::Fun(name, a) => format!("{name}({ws}{}{ws})", a.render(ws)),
            }
        }

        fn prec(&self) -> u8 {
            match self {
                Ref::Bin('+' | '-', ..) => 1,
                Ref::Bin(..) => 2,
                Ref::Neg(_) => 3,
                _ => 4,
            }
        }

        fn render_at(&self, min_prec: u8, ws: &str) -> String {
            if self.prec() >= min_prec {
                self.render(ws)
            } else {
                format!("({})", self.render(ws))
            }
        }
    }

    fn ref_tree() -> impl Strategy<Value = Ref> {
        let leaf = prop_oneof![
            (0u32..100).prop_map(|v| Ref::Num(v as f64 / 4.0)),
            (0usize..3).prop_map(Ref::X)
        ];
        leaf.prop_recursive(5, 40, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Ref::Neg(Box::new(a))),
                (prop::sample::select(vec!['+', '-', '*']), inner.clone(), inner.clone())
                    .prop_map(|(op, a, b)| Ref::Bin(op, Box::new(a), Box::new(b))),
                (prop::sample::select(vec!["sin", "cos", "tanh", "abs"]), inner)
                    .prop_map(|(f, a)| Ref::Fun(f, Box::new(a))),
            ]
        })
    }

    proptest! {
        #[test]
        fn parse_matches_reference_interpreter(
            tree in ref_tree(),
            ws in prop::sample::select(vec!["", " ", "  \t"]),
            x in prop::collection::vec(-2.0f64..2.0, 3),
        ) {
            let text = tree.render(ws);
            let parsed = Expr::parse(&text).unwrap();
            let ctx = EvalContext { t: 0.0, tf: 0.0, x: &x, theta: &[] };
            let want = tree.eval(&x);
            if let Ok(got) = parsed.evaluate(&ctx) {
                prop_assert_eq!(got, want, "{}", text);
            } else {
                prop_assert!(!want.is_finite());
            }
        }

        #[test]
        fn display_then_parse_is_equivalent(
            tree in ref_tree(),
            points in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 100),
        ) {
            let original = Expr::parse(&tree.render(" ")).unwrap();
            let reparsed = Expr::parse(&original.to_string()).unwrap();
            for x in &points {
                let ctx = EvalContext { t: 0.0, tf: 0.0, x, theta: &[] };
                match (original.evaluate(&ctx), reparsed.evaluate(&ctx)) {
                    (Ok(a), Ok(b)) => prop_assert!((a - b).abs() <= 1e-12),
                    (Err(_), Err(_)) => {}
                    (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
                }
            }
        }
    }
}
