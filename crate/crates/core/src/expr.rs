//! Small arithmetic grammar for coefficient expressions, with symbolic
//! differentiation.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' integer)?
//! atom   := number | name | name '[' integer ']' | func '(' expr ')' | '(' expr ')'
//! func   := sin | cos | exp | tanh
//! ```
//!
//! Variables are `t`, `x[i]` (`1 ≤ i ≤ n`), `u[i]` (`1 ≤ i ≤ d`) and, in
//! control policies, `z[i]` for the current observation; any other name must
//! be a declared parameter and is folded to a constant.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    X(usize),
    U(usize),
    Z(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, i32),
    Call(Func, Box<Node>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    root: Node,
}

/// Names and index ranges an expression may refer to.
#[derive(Debug, Clone, Default)]
pub struct Scope {
    pub n: usize,
    pub d: usize,
    pub z: usize,
    pub params: HashMap<String, f64>,
}

impl Scope {
    pub fn new(n: usize, d: usize) -> Self {
        Self { n, d, z: 0, params: HashMap::new() }
    }
}

#[derive(Clone, Copy)]
struct Env<'a> {
    t: f64,
    x: &'a [f64],
    u: &'a [f64],
    z: &'a [f64],
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    scope: &'a Scope,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl fmt::Display) -> Result<T> {
        Err(Error::Expr(format!("`{}` at column {}: {}", self.src, self.pos + 1, msg)))
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

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(format!("expected `{}`", c as char))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = add(lhs, self.term()?);
            } else if self.eat(b'-') {
                lhs = sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = mul(lhs, self.unary()?);
            } else if self.eat(b'/') {
                lhs = div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat(b'-') {
            return Ok(neg(self.unary()?));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let negative = self.eat(b'-');
            let k = self.integer()? as i32;
            return Ok(pow(base, if negative { -k } else { k }));
        }
        Ok(base)
    }

    fn integer(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err("expected an integer");
        }
        Ok(self.src[start..self.pos].parse().expect("digits"))
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.bytes.len() && (self.bytes[self.pos].is_ascii_digit() || self.bytes[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < self.bytes.len() && (self.bytes[self.pos] == b'e' || self.bytes[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < self.bytes.len() && (self.bytes[self.pos] == b'+' || self.bytes[self.pos] == b'-') {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if digits == self.pos {
                self.pos = save;
            }
        }
        match self.src[start..self.pos].parse::<f64>() {
            Ok(v) => Ok(Node::Num(v)),
            Err(_) => {
                self.pos = start;
                self.err("malformed number")
            }
        }
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.bytes.len() && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_') {
                    self.pos += 1;
                }
                let name = &self.src[start..self.pos];
                let func = match name {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "exp" => Some(Func::Exp),
                    "tanh" => Some(Func::Tanh),
                    _ => None,
                };
                if let Some(f) = func {
                    self.expect(b'(')?;
                    let arg = self.expr()?;
                    self.expect(b')')?;
                    return Ok(call(f, arg));
                }
                match name {
                    "t" => Ok(Node::Var(Var::T)),
                    "x" | "u" | "z" => {
                        self.expect(b'[')?;
                        let i = self.integer()?;
                        self.expect(b']')?;
                        let bound = match name {
                            "x" => self.scope.n,
                            "u" => self.scope.d,
                            _ => self.scope.z,
                        };
                        if i == 0 || i > bound {
                            return self.err(format!("index {name}[{i}] out of range 1..={bound}"));
                        }
                        Ok(Node::Var(match name {
                            "x" => Var::X(i - 1),
                            "u" => Var::U(i - 1),
                            _ => Var::Z(i - 1),
                        }))
                    }
                    _ => match self.scope.params.get(name) {
                        Some(v) => Ok(Node::Num(*v)),
                        None => {
                            self.pos = start;
                            self.err(format!("unknown name `{name}`"))
                        }
                    },
                }
            }
            Some(c) => self.err(format!("unexpected `{}`", c as char)),
            None => self.err("unexpected end of expression"),
        }
    }
}

fn num(v: f64) -> Node {
    Node::Num(v)
}

fn add(a: Node, b: Node) -> Node {
    match (a, b) {
        (Node::Num(x), Node::Num(y)) => num(x + y),
        (Node::Num(z), e) | (e, Node::Num(z)) if z == 0.0 => e,
        (a, b) => Node::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Node, b: Node) -> Node {
    match (a, b) {
        (Node::Num(x), Node::Num(y)) => num(x - y),
        (e, Node::Num(z)) if z == 0.0 => e,
        (Node::Num(z), e) if z == 0.0 => neg(e),
        (a, b) => Node::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Node, b: Node) -> Node {
    match (a, b) {
        (Node::Num(x), Node::Num(y)) => num(x * y),
        (Node::Num(z), _) | (_, Node::Num(z)) if z == 0.0 => num(0.0),
        (Node::Num(o), e) | (e, Node::Num(o)) if o == 1.0 => e,
        (a, b) => Node::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Node, b: Node) -> Node {
    match (a, b) {
        (Node::Num(x), Node::Num(y)) => num(x / y),
        (Node::Num(z), _) if z == 0.0 => num(0.0),
        (e, Node::Num(o)) if o == 1.0 => e,
        (a, b) => Node::Div(Box::new(a), Box::new(b)),
    }
}

fn neg(a: Node) -> Node {
    match a {
        Node::Num(x) => num(-x),
        Node::Neg(e) => *e,
        e => Node::Neg(Box::new(e)),
    }
}

fn pow(a: Node, k: i32) -> Node {
    match (a, k) {
        (_, 0) => num(1.0),
        (e, 1) => e,
        (Node::Num(x), k) => num(x.powi(k)),
        (e, k) => Node::Pow(Box::new(e), k),
    }
}

fn call(f: Func, a: Node) -> Node {
    match a {
        Node::Num(x) => num(apply(f, x)),
        e => Node::Call(f, Box::new(e)),
    }
}

fn apply(f: Func, x: f64) -> f64 {
    match f {
        Func::Sin => x.sin(),
        Func::Cos => x.cos(),
        Func::Exp => x.exp(),
        Func::Tanh => x.tanh(),
    }
}

impl Node {
    fn eval(&self, e: Env) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::Var(Var::T) => e.t,
            Node::Var(Var::X(i)) => e.x[*i],
            Node::Var(Var::U(i)) => e.u[*i],
            Node::Var(Var::Z(i)) => e.z[*i],
            Node::Neg(a) => -a.eval(e),
            Node::Add(a, b) => a.eval(e) + b.eval(e),
            Node::Sub(a, b) => a.eval(e) - b.eval(e),
            Node::Mul(a, b) => a.eval(e) * b.eval(e),
            Node::Div(a, b) => a.eval(e) / b.eval(e),
            Node::Pow(a, k) => a.eval(e).powi(*k),
            Node::Call(f, a) => apply(*f, a.eval(e)),
        }
    }

    fn diff(&self, v: Var) -> Node {
        match self {
            Node::Num(_) => num(0.0),
            Node::Var(w) => num(if *w == v { 1.0 } else { 0.0 }),
            Node::Neg(a) => neg(a.diff(v)),
            Node::Add(a, b) => add(a.diff(v), b.diff(v)),
            Node::Sub(a, b) => sub(a.diff(v), b.diff(v)),
            Node::Mul(a, b) => add(mul(a.diff(v), (**b).clone()), mul((**a).clone(), b.diff(v))),
            Node::Div(a, b) => div(
                sub(mul(a.diff(v), (**b).clone()), mul((**a).clone(), b.diff(v))),
                pow((**b).clone(), 2),
            ),
            Node::Pow(a, k) => mul(mul(num(*k as f64), pow((**a).clone(), k - 1)), a.diff(v)),
            Node::Call(f, a) => {
                let inner = (**a).clone();
                let outer = match f {
                    Func::Sin => call(Func::Cos, inner),
                    Func::Cos => neg(call(Func::Sin, inner)),
                    Func::Exp => call(Func::Exp, inner),
                    Func::Tanh => sub(num(1.0), pow(call(Func::Tanh, inner), 2)),
                };
                mul(outer, a.diff(v))
            }
        }
    }

    fn depends_on(&self, pred: &dyn Fn(Var) -> bool) -> bool {
        match self {
            Node::Num(_) => false,
            Node::Var(w) => pred(*w),
            Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => a.depends_on(pred),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => a.depends_on(pred) || b.depends_on(pred),
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Num(v) => write!(f, "{v}"),
            Node::Var(Var::T) => write!(f, "t"),
            Node::Var(Var::X(i)) => write!(f, "x[{}]", i + 1),
            Node::Var(Var::U(i)) => write!(f, "u[{}]", i + 1),
            Node::Var(Var::Z(i)) => write!(f, "z[{}]", i + 1),
            Node::Neg(a) => write!(f, "-({a})"),
            Node::Add(a, b) => write!(f, "({a} + {b})"),
            Node::Sub(a, b) => write!(f, "({a} - {b})"),
            Node::Mul(a, b) => write!(f, "{a} * {b}"),
            Node::Div(a, b) => write!(f, "{a} / ({b})"),
            Node::Pow(a, k) => write!(f, "({a})^{k}"),
            Node::Call(func, a) => {
                let name = match func {
                    Func::Sin => "sin",
                    Func::Cos => "cos",
                    Func::Exp => "exp",
                    Func::Tanh => "tanh",
                };
                write!(f, "{name}({a})")
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

impl Expr {
    pub fn parse(src: &str, scope: &Scope) -> Result<Self> {
        let mut p = Parser { src, bytes: src.as_bytes(), pos: 0, scope };
        let root = p.expr()?;
        if p.peek().is_some() {
            return p.err("trailing input");
        }
        Ok(Self { root })
    }

    pub fn constant(v: f64) -> Self {
        Self { root: num(v) }
    }

    pub fn eval(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        self.root.eval(Env { t, x, u, z: &[] })
    }

    /// Evaluation with observation values bound to `z[i]`.
    pub fn eval_with_z(&self, t: f64, x: &[f64], u: &[f64], z: &[f64]) -> f64 {
        self.root.eval(Env { t, x, u, z })
    }

    pub fn diff(&self, v: Var) -> Self {
        Self { root: self.root.diff(v) }
    }

    /// The constant value when the expression has no variables.
    pub fn as_constant(&self) -> Option<f64> {
        match self.root {
            Node::Num(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_constant() == Some(0.0)
    }

    pub fn depends_on_x(&self) -> bool {
        self.root.depends_on(&|v| matches!(v, Var::X(_)))
    }

    pub fn depends_on_u(&self) -> bool {
        self.root.depends_on(&|v| matches!(v, Var::U(_)))
    }

    pub fn depends_on_t(&self) -> bool {
        self.root.depends_on(&|v| v == Var::T)
    }
}
