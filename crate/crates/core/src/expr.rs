//! Expression language for Hamiltonians, metrics and ordering rules.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' '-'? INTEGER)?
//! primary := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'
//! ```
//!
//! `i` is the imaginary unit and `pi` is π. Functions are `exp`, `log`,
//! `sin`, `cos` and `sqrt`. Every other identifier is a variable.

use std::collections::BTreeSet;
use std::fmt;

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown function `{name}` at byte {pos}")]
    UnknownFunction { pos: usize, name: String },
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("non-finite value {value} from `{expr}`")]
    NonFinite { expr: String, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    fn apply(self, z: Complex64) -> Complex64 {
        match self {
            Func::Exp => z.exp(),
            Func::Log => z.ln(),
            Func::Sin => z.sin(),
            Func::Cos => z.cos(),
            Func::Sqrt => z.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Imag,
    Pi,
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

pub fn parse_expression(text: &str) -> Result<Expr, ExprError> {
    let tokens = lex(text)?;
    let mut p = Parser { tokens, at: 0, len: text.len() };
    let e = p.expr()?;
    if let Some(t) = p.peek() {
        return Err(ExprError::Syntax { pos: t.pos, msg: format!("unexpected {}", t.kind) });
    }
    Ok(e)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(x) => write!(f, "number {x}"),
            Tok::Ident(s) => write!(f, "identifier `{s}`"),
            Tok::Op(c) => write!(f, "`{c}`"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Tok,
    pos: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut k = i + 1;
                if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                    k += 1;
                }
                if k < bytes.len() && bytes[k].is_ascii_digit() {
                    while k < bytes.len() && bytes[k].is_ascii_digit() {
                        k += 1;
                    }
                    i = k;
                }
            }
            let s = &text[start..i];
            let v: f64 = s
                .parse()
                .map_err(|_| ExprError::Syntax { pos: start, msg: format!("malformed number `{s}`") })?;
            out.push(Token { kind: Tok::Num(v), pos: start });
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token { kind: Tok::Ident(text[start..i].to_string()), pos: start });
        } else if b"+-*/^()".contains(&c) {
            out.push(Token { kind: Tok::Op(c as char), pos: i });
            i += 1;
        } else {
            let ch = text[i..].chars().next().unwrap_or('?');
            return Err(ExprError::Syntax { pos: i, msg: format!("unexpected character `{ch}`") });
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    at: usize,
    len: usize,
}

const MAX_DEPTH: usize = 200;

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.at)
    }

    fn pos(&self) -> usize {
        self.peek().map_or(self.len, |t| t.pos)
    }

    fn eat(&mut self, op: char) -> bool {
        if matches!(self.peek(), Some(Token { kind: Tok::Op(c), .. }) if *c == op) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, op: char) -> Result<(), ExprError> {
        if self.eat(op) {
            Ok(())
        } else {
            let found = self.peek().map_or("end of input".to_string(), |t| t.kind.to_string());
            Err(ExprError::Syntax { pos: self.pos(), msg: format!("expected `{op}`, found {found}") })
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        self.expr_at(0)
    }

    fn expr_at(&mut self, depth: usize) -> Result<Expr, ExprError> {
        if depth > MAX_DEPTH {
            return Err(ExprError::Syntax { pos: self.pos(), msg: "nesting too deep".into() });
        }
        let mut lhs = self.term(depth)?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term(depth)?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term(depth)?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self, depth: usize) -> Result<Expr, ExprError> {
        let mut lhs = self.unary(depth)?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary(depth)?));
            } else if self.eat('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary(depth)?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self, depth: usize) -> Result<Expr, ExprError> {
        if depth > MAX_DEPTH {
            return Err(ExprError::Syntax { pos: self.pos(), msg: "nesting too deep".into() });
        }
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary(depth + 1)?)));
        }
        self.power(depth)
    }

    fn power(&mut self, depth: usize) -> Result<Expr, ExprError> {
        let base = self.primary(depth)?;
        if !self.eat('^') {
            return Ok(base);
        }
        let pos = self.pos();
        let neg = self.eat('-');
        match self.peek().map(|t| t.kind.clone()) {
            Some(Tok::Num(v)) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => {
                self.at += 1;
                let n = v as i32;
                Ok(Expr::Pow(Box::new(base), if neg { -n } else { n }))
            }
            _ => Err(ExprError::Syntax { pos, msg: "exponent must be an integer literal".into() }),
        }
    }

    fn primary(&mut self, depth: usize) -> Result<Expr, ExprError> {
        let pos = self.pos();
        let tok = match self.peek() {
            Some(t) => t.kind.clone(),
            None => return Err(ExprError::Syntax { pos, msg: "unexpected end of input".into() }),
        };
        self.at += 1;
        match tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Ident(name) => {
                if self.eat('(') {
                    let func = Func::from_name(&name).ok_or(ExprError::UnknownFunction { pos, name })?;
                    let arg = self.expr_at(depth + 1)?;
                    self.expect(')')?;
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                Ok(match name.as_str() {
                    "i" => Expr::Imag,
                    "pi" => Expr::Pi,
                    _ => Expr::Var(name),
                })
            }
            Tok::Op('(') => {
                let e = self.expr_at(depth + 1)?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Op(c) => Err(ExprError::Syntax { pos, msg: format!("unexpected `{c}`") }),
        }
    }
}

// Printing. Precedence levels: 1 sum, 2 product, 3 negation, 4 power, 5 atom.
impl Expr {
    fn prec(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }

    fn write_at(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        if self.prec() < min {
            write!(f, "(")?;
            self.write_at(f, 0)?;
            return write!(f, ")");
        }
        match self {
            Expr::Num(v) if *v < 0.0 => write!(f, "-{}", fmt_num(-v)),
            Expr::Num(v) => write!(f, "{}", fmt_num(*v)),
            Expr::Imag => write!(f, "i"),
            Expr::Pi => write!(f, "pi"),
            Expr::Var(s) => write!(f, "{s}"),
            Expr::Neg(a) => {
                write!(f, "-")?;
                let min = if a.prec() == 3 { 3 } else { 4 };
                a.write_at(f, min)
            }
            Expr::Add(a, b) => {
                a.write_at(f, 1)?;
                write!(f, " + ")?;
                b.write_at(f, 2)
            }
            Expr::Sub(a, b) => {
                a.write_at(f, 1)?;
                write!(f, " - ")?;
                b.write_at(f, 2)
            }
            Expr::Mul(a, b) => {
                a.write_at(f, 2)?;
                write!(f, "*")?;
                b.write_at(f, 3)
            }
            Expr::Div(a, b) => {
                a.write_at(f, 2)?;
                write!(f, "/")?;
                b.write_at(f, 3)
            }
            Expr::Pow(a, n) => {
                a.write_at(f, 5)?;
                write!(f, "^{n}")
            }
            Expr::Call(func, a) => {
                write!(f, "{}(", func.name())?;
                a.write_at(f, 0)?;
                write!(f, ")")
            }
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        // keeps the output parseable even after folding produced an overflow
        "(1/0)".to_string()
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_at(f, 0)
    }
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn call(func: Func, a: Expr) -> Expr {
        match (func, &a) {
            (Func::Exp, Expr::Num(v)) if *v == 0.0 => Expr::Num(1.0),
            (Func::Log, Expr::Num(v)) if *v == 1.0 => Expr::Num(0.0),
            (Func::Sin, Expr::Num(v)) if *v == 0.0 => Expr::Num(0.0),
            (Func::Cos, Expr::Num(v)) if *v == 0.0 => Expr::Num(1.0),
            _ => Expr::Call(func, Box::new(a)),
        }
    }

    pub fn powi(self, n: i32) -> Expr {
        match (self, n) {
            (_, 0) => Expr::Num(1.0),
            (a, 1) => a,
            (Expr::Num(v), n) => Expr::Num(v.powi(n)),
            (Expr::Pow(a, m), n) => match m.checked_mul(n) {
                Some(k) => a.powi(k),
                None => Expr::Pow(Box::new(Expr::Pow(a, m)), n),
            },
            (a, n) => Expr::Pow(Box::new(a), n),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }

    fn is_one(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 1.0)
    }

    /// Variables referenced by the expression, sorted.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Var(s) => {
                out.insert(s.clone());
            }
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.collect_vars(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            _ => {}
        }
    }

    pub fn depends_on(&self, var: &str) -> bool {
        match self {
            Expr::Var(s) => s == var,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.depends_on(var),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.depends_on(var) || b.depends_on(var)
            }
            _ => false,
        }
    }

    /// Symbolic partial derivative, simplified.
    pub fn derivative(&self, var: &str) -> Expr {
        if !self.depends_on(var) {
            return Expr::Num(0.0);
        }
        match self {
            Expr::Var(_) => Expr::Num(1.0),
            Expr::Neg(a) => -a.derivative(var),
            Expr::Add(a, b) => a.derivative(var) + b.derivative(var),
            Expr::Sub(a, b) => a.derivative(var) - b.derivative(var),
            Expr::Mul(a, b) => a.derivative(var) * (**b).clone() + (**a).clone() * b.derivative(var),
            Expr::Div(a, b) => {
                let num = a.derivative(var) * (**b).clone() - (**a).clone() * b.derivative(var);
                num / (**b).clone().powi(2)
            }
            Expr::Pow(a, n) => Expr::Num(*n as f64) * (**a).clone().powi(n - 1) * a.derivative(var),
            Expr::Call(func, a) => {
                let da = a.derivative(var);
                let inner = (**a).clone();
                let outer = match func {
                    Func::Exp => Expr::call(Func::Exp, inner),
                    Func::Log => return da / inner,
                    Func::Sin => Expr::call(Func::Cos, inner),
                    Func::Cos => -Expr::call(Func::Sin, inner),
                    Func::Sqrt => return da / (Expr::Num(2.0) * Expr::call(Func::Sqrt, inner)),
                };
                outer * da
            }
            Expr::Num(_) | Expr::Imag | Expr::Pi => Expr::Num(0.0),
        }
    }

    /// Replace every occurrence of `var` by `with`.
    pub fn substitute(&self, var: &str, with: &Expr) -> Expr {
        match self {
            Expr::Var(s) if s == var => with.clone(),
            Expr::Neg(a) => -a.substitute(var, with),
            Expr::Add(a, b) => a.substitute(var, with) + b.substitute(var, with),
            Expr::Sub(a, b) => a.substitute(var, with) - b.substitute(var, with),
            Expr::Mul(a, b) => a.substitute(var, with) * b.substitute(var, with),
            Expr::Div(a, b) => a.substitute(var, with) / b.substitute(var, with),
            Expr::Pow(a, n) => a.substitute(var, with).powi(*n),
            Expr::Call(func, a) => Expr::call(*func, a.substitute(var, with)),
            other => other.clone(),
        }
    }

    /// Resolve variables to slots for fast repeated evaluation.
    pub fn bind(&self, vars: &[&str]) -> Result<Bound, ExprError> {
        let mut code = Vec::new();
        compile(self, vars, &mut code)?;
        Ok(Bound { code, text: self.to_string() })
    }

    /// Evaluate with named values; convenient for one-off use.
    pub fn eval_with(&self, vals: &[(&str, Complex64)]) -> Result<Complex64, ExprError> {
        let names: Vec<&str> = vals.iter().map(|v| v.0).collect();
        let args: Vec<Complex64> = vals.iter().map(|v| v.1).collect();
        self.bind(&names)?.eval_checked(&args)
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        match self {
            Expr::Num(v) => Expr::Num(-v),
            Expr::Neg(a) => *a,
            a => Expr::Neg(Box::new(a)),
        }
    }
}

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        match (self, rhs) {
            (a, b) if b.is_zero() => a,
            (a, b) if a.is_zero() => b,
            (Expr::Num(a), Expr::Num(b)) => Expr::Num(a + b),
            (a, Expr::Neg(b)) => Expr::Sub(Box::new(a), b),
            (a, b) => Expr::Add(Box::new(a), Box::new(b)),
        }
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        match (self, rhs) {
            (a, b) if b.is_zero() => a,
            (a, b) if a.is_zero() => -b,
            (Expr::Num(a), Expr::Num(b)) => Expr::Num(a - b),
            (a, Expr::Neg(b)) => a + *b,
            (a, b) if a == b => Expr::Num(0.0),
            (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
        }
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        match (self, rhs) {
            (a, b) if a.is_zero() || b.is_zero() => Expr::Num(0.0),
            (a, b) if a.is_one() => b,
            (a, b) if b.is_one() => a,
            (Expr::Num(a), Expr::Num(b)) => Expr::Num(a * b),
            (Expr::Neg(a), b) => -(*a * b),
            (a, Expr::Neg(b)) => -(a * *b),
            (Expr::Num(v), b) if v == -1.0 => -b,
            (a, Expr::Num(v)) if v == -1.0 => -a,
            (a, Expr::Num(v)) => Expr::Mul(Box::new(Expr::Num(v)), Box::new(a)),
            (a, b) if a == b => a.powi(2),
            (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
        }
    }
}

impl std::ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        match (self, rhs) {
            (a, _) if a.is_zero() => Expr::Num(0.0),
            (a, b) if b.is_one() => a,
            (Expr::Num(a), Expr::Num(b)) if b != 0.0 => Expr::Num(a / b),
            (Expr::Neg(a), b) => -(*a / b),
            (a, b) if a == b => Expr::Num(1.0),
            (a, b) => Expr::Div(Box::new(a), Box::new(b)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(Complex64),
    Load(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Powi(i32),
    Call(Func),
}

fn compile(e: &Expr, vars: &[&str], code: &mut Vec<Op>) -> Result<(), ExprError> {
    match e {
        Expr::Num(v) => code.push(Op::Const(Complex64::new(*v, 0.0))),
        Expr::Imag => code.push(Op::Const(Complex64::i())),
        Expr::Pi => code.push(Op::Const(Complex64::new(std::f64::consts::PI, 0.0))),
        Expr::Var(s) => {
            let slot = vars.iter().position(|v| v == s).ok_or_else(|| ExprError::Unbound(s.clone()))?;
            code.push(Op::Load(slot));
        }
        Expr::Neg(a) => {
            compile(a, vars, code)?;
            code.push(Op::Neg);
        }
        Expr::Pow(a, n) => {
            compile(a, vars, code)?;
            code.push(Op::Powi(*n));
        }
        Expr::Call(f, a) => {
            compile(a, vars, code)?;
            code.push(Op::Call(*f));
        }
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
            compile(a, vars, code)?;
            compile(b, vars, code)?;
            code.push(match e {
                Expr::Add(..) => Op::Add,
                Expr::Sub(..) => Op::Sub,
                Expr::Mul(..) => Op::Mul,
                _ => Op::Div,
            });
        }
    }
    Ok(())
}

/// An expression compiled against a fixed variable order.
#[derive(Debug, Clone)]
pub struct Bound {
    code: Vec<Op>,
    text: String,
}

fn powi(z: Complex64, n: i32) -> Complex64 {
    if z.im == 0.0 {
        return Complex64::new(z.re.powi(n), 0.0);
    }
    if n >= 0 {
        z.powu(n as u32)
    } else {
        z.powu(n.unsigned_abs()).inv()
    }
}

impl Bound {
    pub fn eval(&self, args: &[Complex64]) -> Complex64 {
        let mut stack: smallstack::Stack = smallstack::Stack::new();
        for op in &self.code {
            match *op {
                Op::Const(c) => stack.push(c),
                Op::Load(i) => stack.push(args[i]),
                Op::Neg => {
                    let a = stack.pop();
                    stack.push(-a);
                }
                Op::Powi(n) => {
                    let a = stack.pop();
                    stack.push(powi(a, n));
                }
                Op::Call(f) => {
                    let a = stack.pop();
                    // real arguments stay on the real branch when it exists
                    let v = if a.im == 0.0 {
                        match f {
                            Func::Exp => Complex64::new(a.re.exp(), 0.0),
                            Func::Sin => Complex64::new(a.re.sin(), 0.0),
                            Func::Cos => Complex64::new(a.re.cos(), 0.0),
                            Func::Log if a.re > 0.0 => Complex64::new(a.re.ln(), 0.0),
                            Func::Sqrt if a.re >= 0.0 => Complex64::new(a.re.sqrt(), 0.0),
                            _ => f.apply(a),
                        }
                    } else {
                        f.apply(a)
                    };
                    stack.push(v);
                }
                Op::Add | Op::Sub | Op::Mul | Op::Div => {
                    let b = stack.pop();
                    let a = stack.pop();
                    stack.push(match op {
                        Op::Add => a + b,
                        Op::Sub => a - b,
                        Op::Mul => {
                            if a.im == 0.0 && b.im == 0.0 {
                                Complex64::new(a.re * b.re, 0.0)
                            } else {
                                a * b
                            }
                        }
                        _ => {
                            if a.im == 0.0 && b.im == 0.0 {
                                Complex64::new(a.re / b.re, 0.0)
                            } else {
                                a / b
                            }
                        }
                    });
                }
            }
        }
        stack.pop()
    }

    pub fn eval_real(&self, args: &[f64]) -> Complex64 {
        let mut z = [Complex64::new(0.0, 0.0); 8];
        if args.len() <= 8 {
            for (zi, &x) in z.iter_mut().zip(args) {
                zi.re = x;
            }
            return self.eval(&z[..args.len()]);
        }
        let z: Vec<Complex64> = args.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.eval(&z)
    }

    pub fn eval_checked(&self, args: &[Complex64]) -> Result<Complex64, ExprError> {
        let v = self.eval(args);
        if v.re.is_finite() && v.im.is_finite() {
            Ok(v)
        } else {
            Err(ExprError::NonFinite { expr: self.text.clone(), value: format!("{v}") })
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

mod smallstack {
    use num_complex::Complex64;

    /// Evaluation stack that avoids heap traffic for typical expressions.
    pub struct Stack {
        inline: [Complex64; 32],
        len: usize,
        spill: Vec<Complex64>,
    }

    impl Stack {
        pub fn new() -> Self {
            Stack { inline: [Complex64::new(0.0, 0.0); 32], len: 0, spill: Vec::new() }
        }

        pub fn push(&mut self, v: Complex64) {
            if self.len < 32 {
                self.inline[self.len] = v;
            } else {
                self.spill.push(v);
            }
            self.len += 1;
        }

        pub fn pop(&mut self) -> Complex64 {
            self.len -= 1;
            if self.len < 32 {
                self.inline[self.len]
            } else {
                self.spill.pop().unwrap_or_default()
            }
        }
    }
}

/// Truncated bivariate power series: coefficients `c[a][b]` of `x^a y^b`
/// for `a + b <= order`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series2 {
    order: usize,
    c: Vec<Complex64>,
}

impl Series2 {
    fn zero(order: usize) -> Self {
        Series2 { order, c: vec![Complex64::new(0.0, 0.0); (order + 1) * (order + 1)] }
    }

    fn constant(order: usize, v: Complex64) -> Self {
        let mut s = Self::zero(order);
        s.c[0] = v;
        s
    }

    fn idx(&self, a: usize, b: usize) -> usize {
        a * (self.order + 1) + b
    }

    /// Coefficient of `x^a y^b`.
    pub fn coeff(&self, a: usize, b: usize) -> Complex64 {
        if a + b > self.order {
            Complex64::new(0.0, 0.0)
        } else {
            self.c[self.idx(a, b)]
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn map2(&self, o: &Series2, f: impl Fn(Complex64, Complex64) -> Complex64) -> Series2 {
        Series2 { order: self.order, c: self.c.iter().zip(&o.c).map(|(a, b)| f(*a, *b)).collect() }
    }

    fn scale(&self, k: Complex64) -> Series2 {
        Series2 { order: self.order, c: self.c.iter().map(|a| a * k).collect() }
    }

    fn mul(&self, o: &Series2) -> Series2 {
        let k = self.order;
        let mut out = Series2::zero(k);
        for a1 in 0..=k {
            for b1 in 0..=k - a1 {
                let x = self.c[self.idx(a1, b1)];
                if x == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for a2 in 0..=k - a1 - b1 {
                    for b2 in 0..=k - a1 - b1 - a2 {
                        let i = out.idx(a1 + a2, b1 + b2);
                        out.c[i] += x * o.c[o.idx(a2, b2)];
                    }
                }
            }
        }
        out
    }

    /// `sum_n coef[n] * v^n` where `v` has no constant term.
    fn compose(v: &Series2, coef: &[Complex64]) -> Series2 {
        let mut out = Series2::constant(v.order, coef[0]);
        let mut pw = Series2::constant(v.order, Complex64::new(1.0, 0.0));
        for cn in coef.iter().skip(1) {
            pw = pw.mul(v);
            out = out.map2(&pw, |a, b| a + b * cn);
        }
        out
    }

    fn split(&self) -> (Complex64, Series2) {
        let mut v = self.clone();
        let c0 = v.c[0];
        v.c[0] = Complex64::new(0.0, 0.0);
        (c0, v)
    }

    fn apply(&self, f: Func) -> Series2 {
        let k = self.order;
        let (u0, v) = self.split();
        let fact = |n: usize| (1..=n).map(|i| i as f64).product::<f64>();
        let coef: Vec<Complex64> = match f {
            Func::Exp => (0..=k).map(|n| u0.exp() / fact(n)).collect(),
            Func::Log => {
                let inv = u0.inv();
                let mut c = vec![u0.ln()];
                for n in 1..=k {
                    let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
                    c.push(inv.powu(n as u32) * (sign / n as f64));
                }
                c
            }
            Func::Sin | Func::Cos => {
                // derivatives of sin cycle through cos, -sin, -cos, sin
                let (s, c) = (u0.sin(), u0.cos());
                let cyc = if f == Func::Sin { [s, c, -s, -c] } else { [c, -s, -c, s] };
                (0..=k).map(|n| cyc[n % 4] / fact(n)).collect()
            }
            Func::Sqrt => {
                let r = u0.sqrt();
                let mut c = vec![r];
                let mut binom = 1.0;
                for n in 1..=k {
                    binom *= (0.5 - (n as f64 - 1.0)) / n as f64;
                    c.push(r * u0.inv().powu(n as u32) * binom);
                }
                c
            }
        };
        Series2::compose(&v, &coef)
    }

    fn recip(&self) -> Series2 {
        let (u0, v) = self.split();
        let inv = u0.inv();
        let coef: Vec<Complex64> = (0..=self.order)
            .map(|n| if n % 2 == 0 { inv.powu(n as u32 + 1) } else { -inv.powu(n as u32 + 1) })
            .collect();
        Series2::compose(&v, &coef)
    }

    fn powi(&self, n: i32) -> Series2 {
        let mut out = Series2::constant(self.order, Complex64::new(1.0, 0.0));
        for _ in 0..n.unsigned_abs() {
            out = out.mul(self);
        }
        if n < 0 {
            out.recip()
        } else {
            out
        }
    }
}

impl Expr {
    /// Taylor expansion in `(x, y)` about `(x0, y0)` up to total degree
    /// `order`, with the remaining variables fixed by `fixed`.
    pub fn taylor2(
        &self,
        x: (&str, Complex64),
        y: (&str, Complex64),
        order: usize,
        fixed: &[(&str, Complex64)],
    ) -> Result<Series2, ExprError> {
        Ok(match self {
            Expr::Num(v) => Series2::constant(order, Complex64::new(*v, 0.0)),
            Expr::Imag => Series2::constant(order, Complex64::i()),
            Expr::Pi => Series2::constant(order, Complex64::new(std::f64::consts::PI, 0.0)),
            Expr::Var(s) => {
                let mut out = Series2::zero(order);
                if s == x.0 {
                    out.c[0] = x.1;
                    if order >= 1 {
                        let i = out.idx(1, 0);
                        out.c[i] = Complex64::new(1.0, 0.0);
                    }
                } else if s == y.0 {
                    out.c[0] = y.1;
                    if order >= 1 {
                        let i = out.idx(0, 1);
                        out.c[i] = Complex64::new(1.0, 0.0);
                    }
                } else {
                    let v = fixed.iter().find(|f| f.0 == s).ok_or_else(|| ExprError::Unbound(s.clone()))?;
                    out.c[0] = v.1;
                }
                out
            }
            Expr::Neg(a) => a.taylor2(x, y, order, fixed)?.scale(Complex64::new(-1.0, 0.0)),
            Expr::Add(a, b) => a.taylor2(x, y, order, fixed)?.map2(&b.taylor2(x, y, order, fixed)?, |u, v| u + v),
            Expr::Sub(a, b) => a.taylor2(x, y, order, fixed)?.map2(&b.taylor2(x, y, order, fixed)?, |u, v| u - v),
            Expr::Mul(a, b) => a.taylor2(x, y, order, fixed)?.mul(&b.taylor2(x, y, order, fixed)?),
            Expr::Div(a, b) => a.taylor2(x, y, order, fixed)?.mul(&b.taylor2(x, y, order, fixed)?.recip()),
            Expr::Pow(a, n) => a.taylor2(x, y, order, fixed)?.powi(*n),
            Expr::Call(f, a) => a.taylor2(x, y, order, fixed)?.apply(*f),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(x: f64) -> Complex64 {
        Complex64::new(x, 0.0)
    }

    #[test]
    fn taylor_coefficients_of_exponential_rule() {
        let e = parse_expression("exp(i*x*y/2)").unwrap();
        let z = Complex64::new(0.0, 0.0);
        let s = e.taylor2(("x", z), ("y", z), 6, &[]).unwrap();
        assert!((s.coeff(1, 1) - Complex64::new(0.0, 0.5)).norm() < 1e-15);
        assert!((s.coeff(2, 2) - Complex64::new(-0.125, 0.0)).norm() < 1e-15);
        assert_eq!(s.coeff(2, 0), z);
        let w = parse_expression("1/exp(-(x^2 + y^2)/4)").unwrap();
        let s = w.taylor2(("x", z), ("y", z), 4, &[]).unwrap();
        assert!((s.coeff(2, 0) - Complex64::new(0.25, 0.0)).norm() < 1e-15);
        assert!((s.coeff(4, 0) - Complex64::new(1.0 / 32.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn taylor_matches_symbolic_derivatives() {
        let e = parse_expression("sqrt(2 + x)*log(3 + y*x) + sin(x - y)/cos(y)").unwrap();
        let (x0, y0) = (Complex64::new(0.3, 0.0), Complex64::new(-0.2, 0.0));
        let s = e.taylor2(("x", x0), ("y", y0), 4, &[]).unwrap();
        let d = e.derivative("x").derivative("x").derivative("y");
        let v = d.eval_with(&[("x", x0), ("y", y0)]).unwrap();
        assert!((s.coeff(2, 1) * 2.0 - v).norm() < 1e-12);
    }

    #[test]
    fn harmonic_at_one_one() {
        let e = parse_expression("p^2/2 + q^2/2").unwrap();
        let v = e.eval_with(&[("q", c(1.0)), ("p", c(1.0))]).unwrap();
        assert!((v - c(1.0)).norm() < 1e-15);
        assert_eq!(e.to_string(), "p^2/2 + q^2/2");
    }

    #[test]
    fn gaussian_rule_at_origin() {
        let e = parse_expression("exp(-(q^2+p^2)/2)").unwrap();
        let v = e.eval_with(&[("q", c(0.0)), ("p", c(0.0))]).unwrap();
        assert_eq!(v, c(1.0));
    }

    #[test]
    fn derivative_of_product() {
        let e = parse_expression("q*p").unwrap();
        assert_eq!(e.derivative("q").to_string(), "p");
        assert_eq!(e.derivative("p").to_string(), "q");
    }

    #[test]
    fn precedence() {
        let e = parse_expression("-q^2 + 2*3^2").unwrap();
        let v = e.eval_with(&[("q", c(3.0))]).unwrap();
        assert_eq!(v, c(9.0));
        let e = parse_expression("2/4/2").unwrap();
        assert_eq!(e.eval_with(&[]).unwrap(), c(0.25));
        let e = parse_expression("1 - 2 - 3").unwrap();
        assert_eq!(e.eval_with(&[]).unwrap(), c(-4.0));
        let e = parse_expression("q^-2").unwrap();
        assert_eq!(e.eval_with(&[("q", c(2.0))]).unwrap(), c(0.25));
    }

    #[test]
    fn imaginary_unit_and_pi() {
        let e = parse_expression("exp(i*pi)").unwrap();
        let v = e.eval_with(&[]).unwrap();
        assert!((v + c(1.0)).norm() < 1e-15);
    }

    #[test]
    fn errors_carry_positions() {
        match parse_expression("q + * p") {
            Err(ExprError::Syntax { pos, .. }) => assert_eq!(pos, 4),
            other => panic!("{other:?}"),
        }
        match parse_expression("foo(q)") {
            Err(ExprError::UnknownFunction { pos: 0, name }) => assert_eq!(name, "foo"),
            other => panic!("{other:?}"),
        }
        match parse_expression("(q + p") {
            Err(ExprError::Syntax { pos: 6, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_expression("q^1.5"), Err(ExprError::Syntax { pos: 2, .. })));
        assert!(matches!(parse_expression("q $ p"), Err(ExprError::Syntax { pos: 2, .. })));
        assert!(parse_expression("").is_err());
    }

    #[test]
    fn unbound_variable_is_reported() {
        let e = parse_expression("q + z").unwrap();
        assert_eq!(e.bind(&["q"]).unwrap_err(), ExprError::Unbound("z".into()));
    }

    #[test]
    fn non_finite_is_reported() {
        let e = parse_expression("1/q").unwrap();
        let b = e.bind(&["q"]).unwrap();
        assert!(b.eval_checked(&[c(0.0)]).is_err());
    }

    #[test]
    fn substitution() {
        let e = parse_expression("q*p + q").unwrap();
        let s = e.substitute("q", &parse_expression("x + 1").unwrap());
        let v = s.eval_with(&[("x", c(1.0)), ("p", c(3.0))]).unwrap();
        assert_eq!(v, c(8.0));
    }

    #[test]
    fn printed_forms_reparse() {
        for text in ["-(q + p)", "-q*p", "(-q)^2", "q - (p - 1)", "q/(p*2)", "--q", "exp(-q^2)*sin(p)/sqrt(2)"] {
            let e = parse_expression(text).unwrap();
            let printed = e.to_string();
            assert_eq!(parse_expression(&printed).unwrap(), e, "{text} -> {printed}");
            assert_eq!(printed.replace(' ', ""), text.replace(' ', ""));
        }
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..1000).prop_map(|v| Expr::Num(v as f64 / 8.0)),
            Just(Expr::Imag),
            Just(Expr::Pi),
            prop_oneof![Just("q"), Just("p"), Just("t"), Just("q1")].prop_map(Expr::var),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Div(Box::new(a), Box::new(b))),
                (inner.clone(), -3i32..4).prop_map(|(a, n)| Expr::Pow(Box::new(a), n)),
                (inner, prop_oneof![Just(Func::Exp), Just(Func::Sin), Just(Func::Cos), Just(Func::Sqrt), Just(Func::Log)])
                    .prop_map(|(a, f)| Expr::Call(f, Box::new(a))),
            ]
        })
    }

    fn arb_smooth() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (1u32..20).prop_map(|v| Expr::Num(v as f64 / 4.0)),
            prop_oneof![Just("q"), Just("p")].prop_map(Expr::var),
        ];
        leaf.prop_recursive(3, 16, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                (inner.clone(), 0i32..4).prop_map(|(a, n)| Expr::Pow(Box::new(a), n)),
                inner.clone().prop_map(|a| Expr::Call(Func::Sin, Box::new(a))),
                inner.prop_map(|a| Expr::Call(Func::Cos, Box::new(a))),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_then_parse_is_identity(e in arb_expr()) {
            let printed = e.to_string();
            let back = parse_expression(&printed).unwrap();
            prop_assert_eq!(&back, &e);
            prop_assert_eq!(back.to_string(), printed);
        }

        #[test]
        fn symbolic_derivative_matches_central_difference(e in arb_smooth(), q in -1.0f64..1.0, p in -1.0f64..1.0) {
            let b = e.bind(&["q", "p"]).unwrap();
            let d = e.derivative("q").bind(&["q", "p"]).unwrap();
            let h = 1e-4;
            let fd = (b.eval_real(&[q + h, p]) - b.eval_real(&[q - h, p])) / (2.0 * h);
            let exact = d.eval_real(&[q, p]);
            // truncation error of the centred difference
            let d3 = e.derivative("q").derivative("q").derivative("q").bind(&["q", "p"]).unwrap();
            let trunc = [q - h, q, q + h].iter().map(|&x| d3.eval_real(&[x, p]).norm()).fold(0.0, f64::max) * h * h / 6.0;
            prop_assert!((fd - exact).norm() <= 1e-6 * (1.0 + exact.norm()) + 1.5 * trunc,
                "{} d/dq: fd {} exact {}", e, fd, exact);
        }
    }
}
