//! Closed-form scalar fields of the plane coordinates `(x, y)`.
//!
//! Conformal factors, external fields and test functions are given in
//! configs as infix text such as `log(2/(1+x^2+y^2))`. This module parses
//! that text into an immutable tree, evaluates it at double precision and
//! differentiates it symbolically, so curvature and divergence formulas can
//! use exact first and second derivatives.
//!
//! Grammar (loosest binding first):
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' unary)?
//! atom    := number | 'x' | 'y' | 'pi' | 'e' | func '(' sum ')'
//!          | 'atan2' '(' sum ',' sum ')' | '(' sum ')'
//! ```
//!
//! `^` binds tighter than unary minus, so `-x^2` is `-(x^2)`. Implicit
//! multiplication is rejected: `2x` is a syntax error.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. } | ParseError::UnknownIdentifier { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("{func} of {arg} is outside its domain")]
    Domain { func: &'static str, arg: f64 },
    #[error("non-finite result {0}")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Tanh,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Tanh => "tanh",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }

    fn apply(self, a: f64) -> Result<f64, EvalError> {
        match self {
            Func::Sin => Ok(a.sin()),
            Func::Cos => Ok(a.cos()),
            Func::Tan => Ok(a.tan()),
            Func::Exp => Ok(a.exp()),
            Func::Tanh => Ok(a.tanh()),
            Func::Log if a > 0.0 => Ok(a.ln()),
            Func::Log => Err(EvalError::Domain { func: "log", arg: a }),
            Func::Sqrt if a >= 0.0 => Ok(a.sqrt()),
            Func::Sqrt => Err(EvalError::Domain { func: "sqrt", arg: a }),
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
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    fn apply(self, a: f64, b: f64) -> Result<f64, EvalError> {
        let v = match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => {
                if b == 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                a / b
            }
            BinOp::Pow => {
                if a == 0.0 && b < 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                let p = if b.fract() == 0.0 && b.abs() <= 64.0 { a.powi(b as i32) } else { a.powf(b) };
                if p.is_nan() {
                    return Err(EvalError::Domain { func: "pow", arg: a });
                }
                p
            }
        };
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Var(Var),
    Neg(Expr),
    Bin(BinOp, Expr, Expr),
    Call(Func, Expr),
    Atan2(Expr, Expr),
}

/// An immutable expression tree over `x` and `y`.
///
/// Cloning is cheap: subtrees are reference counted and shared, which keeps
/// repeated symbolic differentiation from copying whole trees.
#[derive(Clone, PartialEq)]
pub struct Expr(Arc<Node>);

pub type FieldExpr = Expr;

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({self})")
    }
}

impl Expr {
    fn new(node: Node) -> Self {
        Expr(Arc::new(node))
    }

    pub fn constant(c: f64) -> Self {
        Expr::new(Node::Const(c))
    }

    pub fn var(v: Var) -> Self {
        Expr::new(Node::Var(v))
    }

    pub fn x() -> Self {
        Expr::var(Var::X)
    }

    pub fn y() -> Self {
        Expr::var(Var::Y)
    }

    pub fn zero() -> Self {
        Expr::constant(0.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match &*self.0 {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    pub fn neg(&self) -> Expr {
        match &*self.0 {
            Node::Const(c) => Expr::constant(-c),
            Node::Neg(inner) => inner.clone(),
            _ => Expr::new(Node::Neg(self.clone())),
        }
    }

    pub fn add(&self, other: &Expr) -> Expr {
        if self.is_zero() {
            return other.clone();
        }
        if other.is_zero() {
            return self.clone();
        }
        Expr::binary(BinOp::Add, self, other)
    }

    pub fn sub(&self, other: &Expr) -> Expr {
        if other.is_zero() {
            return self.clone();
        }
        if self.is_zero() {
            return other.neg();
        }
        Expr::binary(BinOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Expr) -> Expr {
        if self.is_zero() || other.is_zero() {
            return Expr::zero();
        }
        if self.is_one() {
            return other.clone();
        }
        if other.is_one() {
            return self.clone();
        }
        Expr::binary(BinOp::Mul, self, other)
    }

    pub fn div(&self, other: &Expr) -> Expr {
        if self.is_zero() && other.as_const().is_some_and(|c| c != 0.0) {
            return Expr::zero();
        }
        if other.is_one() {
            return self.clone();
        }
        Expr::binary(BinOp::Div, self, other)
    }

    pub fn pow(&self, other: &Expr) -> Expr {
        if other.is_one() {
            return self.clone();
        }
        if other.is_zero() {
            return Expr::constant(1.0);
        }
        Expr::binary(BinOp::Pow, self, other)
    }

    pub fn call(func: Func, arg: &Expr) -> Expr {
        if let Some(c) = arg.as_const() {
            if let Ok(v) = func.apply(c) {
                return Expr::constant(v);
            }
        }
        Expr::new(Node::Call(func, arg.clone()))
    }

    pub fn exp(&self) -> Expr {
        Expr::call(Func::Exp, self)
    }

    pub fn sin(&self) -> Expr {
        Expr::call(Func::Sin, self)
    }

    pub fn cos(&self) -> Expr {
        Expr::call(Func::Cos, self)
    }

    pub fn atan2(a: &Expr, b: &Expr) -> Expr {
        Expr::new(Node::Atan2(a.clone(), b.clone()))
    }

    pub fn scale(&self, c: f64) -> Expr {
        Expr::constant(c).mul(self)
    }

    fn binary(op: BinOp, a: &Expr, b: &Expr) -> Expr {
        if let (Some(ca), Some(cb)) = (a.as_const(), b.as_const()) {
            if let Ok(v) = op.apply(ca, cb) {
                if v.is_finite() {
                    return Expr::constant(v);
                }
            }
        }
        Expr::new(Node::Bin(op, a.clone(), b.clone()))
    }

    /// Evaluates at `(x, y)`. Log of non-positive values, square roots of
    /// negatives, division by zero and non-finite results are errors.
    pub fn eval(&self, x: f64, y: f64) -> Result<f64, EvalError> {
        let v = match &*self.0 {
            Node::Const(c) => *c,
            Node::Var(Var::X) => x,
            Node::Var(Var::Y) => y,
            Node::Neg(a) => -a.eval(x, y)?,
            Node::Bin(op, a, b) => op.apply(a.eval(x, y)?, b.eval(x, y)?)?,
            Node::Call(func, a) => func.apply(a.eval(x, y)?)?,
            Node::Atan2(a, b) => a.eval(x, y)?.atan2(b.eval(x, y)?),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite(v))
        }
    }

    /// Symbolic partial derivative with light constant folding.
    pub fn differentiate(&self, var: Var) -> Expr {
        match &*self.0 {
            Node::Const(_) => Expr::zero(),
            Node::Var(v) => Expr::constant(if *v == var { 1.0 } else { 0.0 }),
            Node::Neg(a) => a.differentiate(var).neg(),
            Node::Bin(op, a, b) => {
                let da = a.differentiate(var);
                let db = b.differentiate(var);
                match op {
                    BinOp::Add => da.add(&db),
                    BinOp::Sub => da.sub(&db),
                    BinOp::Mul => da.mul(b).add(&a.mul(&db)),
                    BinOp::Div => da.mul(b).sub(&a.mul(&db)).div(&b.pow(&Expr::constant(2.0))),
                    BinOp::Pow => {
                        if db.is_zero() {
                            // d(a^c) = c a^(c-1) a'
                            let c = b.clone();
                            c.mul(&a.pow(&c.sub(&Expr::constant(1.0)))).mul(&da)
                        } else {
                            // d(a^b) = a^b (b' ln a + b a'/a)
                            self.mul(&db.mul(&Expr::call(Func::Log, a)).add(&b.mul(&da).div(a)))
                        }
                    }
                }
            }
            Node::Call(func, a) => {
                let da = a.differentiate(var);
                if da.is_zero() {
                    return Expr::zero();
                }
                let outer = match func {
                    Func::Sin => a.cos(),
                    Func::Cos => a.sin().neg(),
                    Func::Tan => Expr::constant(1.0).div(&a.cos().pow(&Expr::constant(2.0))),
                    Func::Exp => self.clone(),
                    Func::Log => Expr::constant(1.0).div(a),
                    Func::Sqrt => Expr::constant(0.5).div(self),
                    Func::Tanh => Expr::constant(1.0).sub(&self.pow(&Expr::constant(2.0))),
                };
                outer.mul(&da)
            }
            Node::Atan2(a, b) => {
                let da = a.differentiate(var);
                let db = b.differentiate(var);
                let two = Expr::constant(2.0);
                b.mul(&da).sub(&a.mul(&db)).div(&a.pow(&two).add(&b.pow(&two)))
            }
        }
    }

    /// Replaces `x` and `y` by the given expressions.
    pub fn substitute(&self, x: &Expr, y: &Expr) -> Expr {
        match &*self.0 {
            Node::Const(_) => self.clone(),
            Node::Var(Var::X) => x.clone(),
            Node::Var(Var::Y) => y.clone(),
            Node::Neg(a) => a.substitute(x, y).neg(),
            Node::Bin(op, a, b) => Expr::binary(*op, &a.substitute(x, y), &b.substitute(x, y)),
            Node::Call(func, a) => Expr::call(*func, &a.substitute(x, y)),
            Node::Atan2(a, b) => Expr::atan2(&a.substitute(x, y), &b.substitute(x, y)),
        }
    }

    pub fn node_count(&self) -> usize {
        match &*self.0 {
            Node::Const(_) | Node::Var(_) => 1,
            Node::Neg(a) | Node::Call(_, a) => 1 + a.node_count(),
            Node::Bin(_, a, b) | Node::Atan2(a, b) => 1 + a.node_count() + b.node_count(),
        }
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesised output; parsing it back reproduces the same text.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.0 {
            Node::Const(c) if *c < 0.0 => write!(f, "(-{:?})", -c),
            Node::Const(c) => write!(f, "{c:?}"),
            Node::Var(Var::X) => write!(f, "x"),
            Node::Var(Var::Y) => write!(f, "y"),
            Node::Neg(a) => write!(f, "(-{a})"),
            Node::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Node::Call(func, a) => write!(f, "{}({a})", func.name()),
            Node::Atan2(a, b) => write!(f, "atan2({a}, {b})"),
        }
    }
}

impl std::str::FromStr for Expr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

fn tokenize(src: &str) -> Result<Vec<(usize, Token)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
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
            let text = &src[start..i];
            let value = text
                .parse::<f64>()
                .map_err(|_| ParseError::Syntax { offset: start, message: format!("malformed number `{text}`") })?;
            out.push((start, Token::Num(value)));
            if i < bytes.len() && (bytes[i].is_ascii_alphabetic() || bytes[i] == b'_') {
                return Err(ParseError::Syntax { offset: i, message: "implicit multiplication is not allowed".into() });
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Token::Ident(src[start..i].to_string())));
            continue;
        }
        let tok = match c {
            '+' | '-' | '*' | '/' | '^' => Token::Op(c),
            '(' => Token::LParen,
            ')' => Token::RParen,
            ',' => Token::Comma,
            _ => return Err(ParseError::Syntax { offset: start, message: format!("unexpected character `{c}`") }),
        };
        out.push((start, tok));
        i += c.len_utf8();
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    fn error<T>(&self, message: &str) -> Result<T, ParseError> {
        Err(ParseError::Syntax { offset: self.offset(), message: message.to_string() })
    }

    fn expect(&mut self, want: Token, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            self.error(&format!("expected {what}"))
        }
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.product()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek() {
            let op = if *op == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.product()?;
            lhs = Expr::new(Node::Bin(op, lhs, rhs));
        }
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(Token::Op(op @ ('*' | '/'))) = self.peek() {
            let op = if *op == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::new(Node::Bin(op, lhs, rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if let Some(Token::Op('-')) = self.peek() {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(Expr::new(Node::Neg(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if let Some(Token::Op('^')) = self.peek() {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::new(Node::Bin(BinOp::Pow, base, exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        let Some(tok) = self.peek().cloned() else {
            return self.error("unexpected end of input");
        };
        self.pos += 1;
        match tok {
            Token::Num(v) => Ok(Expr::constant(v)),
            Token::LParen => {
                let inner = self.sum()?;
                self.expect(Token::RParen, "`)`")?;
                Ok(inner)
            }
            Token::Ident(name) => match name.as_str() {
                "x" => Ok(Expr::x()),
                "y" => Ok(Expr::y()),
                "pi" => Ok(Expr::constant(std::f64::consts::PI)),
                "e" => Ok(Expr::constant(std::f64::consts::E)),
                "atan2" => {
                    self.expect(Token::LParen, "`(` after atan2")?;
                    let a = self.sum()?;
                    self.expect(Token::Comma, "`,` in atan2")?;
                    let b = self.sum()?;
                    self.expect(Token::RParen, "`)`")?;
                    Ok(Expr::new(Node::Atan2(a, b)))
                }
                other => match Func::from_name(other) {
                    Some(func) => {
                        self.expect(Token::LParen, "`(` after function name")?;
                        let arg = self.sum()?;
                        self.expect(Token::RParen, "`)`")?;
                        Ok(Expr::new(Node::Call(func, arg)))
                    }
                    None => Err(ParseError::UnknownIdentifier { offset, name }),
                },
            },
            _ => {
                self.pos -= 1;
                self.error("expected a number, variable, function or `(`")
            }
        }
    }
}

/// Parses infix expression text into an [`Expr`].
pub fn parse(src: &str) -> Result<Expr, ParseError> {
    let tokens = tokenize(src)?;
    if tokens.is_empty() {
        return Err(ParseError::Syntax { offset: 0, message: "empty expression".into() });
    }
    let mut parser = Parser { tokens, pos: 0, end: src.len() };
    let expr = parser.sum()?;
    if parser.pos != parser.tokens.len() {
        return parser.error("unexpected trailing input");
    }
    Ok(expr)
}

/// An expression together with its first and second partial derivatives.
#[derive(Debug, Clone)]
pub struct Differentiated {
    pub value: Expr,
    pub dx: Expr,
    pub dy: Expr,
    pub dxx: Expr,
    pub dyy: Expr,
}

impl Differentiated {
    pub fn new(value: Expr) -> Self {
        let dx = value.differentiate(Var::X);
        let dy = value.differentiate(Var::Y);
        let dxx = dx.differentiate(Var::X);
        let dyy = dy.differentiate(Var::Y);
        Differentiated { value, dx, dy, dxx, dyy }
    }
}

/// Several expressions flattened into one instruction list with shared
/// subexpressions evaluated once.
#[derive(Debug, Clone)]
pub struct Tape {
    ops: Vec<Op>,
    outputs: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    Var(Var),
    Neg(u32),
    Bin(BinOp, u32, u32),
    Call(Func, u32),
    Atan2(u32, u32),
}

#[derive(Hash, PartialEq, Eq)]
enum OpKey {
    Const(u64),
    Var(bool),
    Neg(u32),
    Bin(u8, u32, u32),
    Call(u8, u32),
    Atan2(u32, u32),
}

struct TapeBuilder {
    ops: Vec<Op>,
    by_key: HashMap<OpKey, u32>,
    by_ptr: HashMap<*const Node, u32>,
}

impl TapeBuilder {
    fn push(&mut self, key: OpKey, op: Op) -> u32 {
        if let Some(&i) = self.by_key.get(&key) {
            return i;
        }
        let i = self.ops.len() as u32;
        self.ops.push(op);
        self.by_key.insert(key, i);
        i
    }

    fn lower(&mut self, e: &Expr) -> u32 {
        let ptr = Arc::as_ptr(&e.0);
        if let Some(&i) = self.by_ptr.get(&ptr) {
            return i;
        }
        let i = match &*e.0 {
            Node::Const(c) => self.push(OpKey::Const(c.to_bits()), Op::Const(*c)),
            Node::Var(v) => self.push(OpKey::Var(*v == Var::X), Op::Var(*v)),
            Node::Neg(a) => {
                let a = self.lower(a);
                self.push(OpKey::Neg(a), Op::Neg(a))
            }
            Node::Bin(op, a, b) => {
                let a = self.lower(a);
                let b = self.lower(b);
                self.push(OpKey::Bin(*op as u8, a, b), Op::Bin(*op, a, b))
            }
            Node::Call(f, a) => {
                let a = self.lower(a);
                self.push(OpKey::Call(*f as u8, a), Op::Call(*f, a))
            }
            Node::Atan2(a, b) => {
                let a = self.lower(a);
                let b = self.lower(b);
                self.push(OpKey::Atan2(a, b), Op::Atan2(a, b))
            }
        };
        self.by_ptr.insert(ptr, i);
        i
    }
}

impl Tape {
    pub fn compile(exprs: &[&Expr]) -> Tape {
        let mut b = TapeBuilder { ops: Vec::new(), by_key: HashMap::new(), by_ptr: HashMap::new() };
        let outputs = exprs.iter().map(|e| b.lower(e)).collect();
        Tape { ops: b.ops, outputs }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Evaluates every output at `(x, y)` into `out`, with the same error
    /// rules as [`Expr::eval`].
    pub fn eval_into(&self, x: f64, y: f64, out: &mut [f64]) -> Result<(), EvalError> {
        assert_eq!(out.len(), self.outputs.len(), "output length");
        TAPE_SCRATCH.with(|cell| {
            let mut regs = cell.borrow_mut();
            regs.clear();
            regs.reserve(self.ops.len());
            for op in &self.ops {
                let v = match *op {
                    Op::Const(c) => c,
                    Op::Var(Var::X) => x,
                    Op::Var(Var::Y) => y,
                    Op::Neg(a) => -regs[a as usize],
                    Op::Bin(o, a, b) => o.apply(regs[a as usize], regs[b as usize])?,
                    Op::Call(f, a) => f.apply(regs[a as usize])?,
                    Op::Atan2(a, b) => regs[a as usize].atan2(regs[b as usize]),
                };
                if !v.is_finite() {
                    return Err(EvalError::NonFinite(v));
                }
                regs.push(v);
            }
            for (o, &i) in out.iter_mut().zip(&self.outputs) {
                *o = regs[i as usize];
            }
            Ok(())
        })
    }

    pub fn eval(&self, x: f64, y: f64) -> Result<Vec<f64>, EvalError> {
        let mut out = vec![0.0; self.outputs.len()];
        self.eval_into(x, y, &mut out)?;
        Ok(out)
    }
}

thread_local! {
    static TAPE_SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ev(src: &str, x: f64, y: f64) -> f64 {
        parse(src).unwrap().eval(x, y).unwrap()
    }

    #[test]
    fn atoms_and_grammar() {
        assert_eq!(parse("x").unwrap(), Expr::x());
        let e = parse("sin(x)*cos(y)").unwrap();
        match &*e.0 {
            Node::Bin(BinOp::Mul, a, b) => {
                assert!(matches!(&*a.0, Node::Call(Func::Sin, _)));
                assert!(matches!(&*b.0, Node::Call(Func::Cos, _)));
            }
            other => panic!("unexpected tree {other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        assert_eq!(parse("x +").unwrap_err().offset(), 3);
        assert!(matches!(parse("2x"), Err(ParseError::Syntax { offset: 1, .. })));
        assert!(matches!(parse("foo(x)"), Err(ParseError::UnknownIdentifier { offset: 0, .. })));
        assert!(matches!(parse("z + 1"), Err(ParseError::UnknownIdentifier { .. })));
        assert!(parse("").is_err());
        assert!(parse("(x").is_err());
        assert!(parse("x y").is_err());
    }

    #[test]
    fn precedence() {
        assert_eq!(ev("-x^2", 3.0, 0.0), -9.0);
        assert_eq!(ev("2^3^2", 0.0, 0.0), 512.0);
        assert_eq!(ev("1-2-3", 0.0, 0.0), -4.0);
        assert_eq!(ev("8/4/2", 0.0, 0.0), 1.0);
        assert_eq!(ev("2*3+4*5", 0.0, 0.0), 26.0);
        assert_eq!(ev("2^-1", 0.0, 0.0), 0.5);
        assert_eq!(ev("1.5e-1*2", 0.0, 0.0), 0.3);
    }

    #[test]
    fn evaluation_examples() {
        assert_eq!(ev("sin(x)", 0.0, 0.0), 0.0);
        assert_eq!(ev("exp(x)+y", 0.0, 2.0), 3.0);
        assert!((ev("atan2(y,x)", 1.0, 1.0) - PI / 4.0).abs() < 1e-15);
        assert!((ev("tanh(x) + sqrt(y) + tan(0)", 0.0, 4.0) - 2.0).abs() < 1e-15);
        assert!((ev("pi", 0.0, 0.0) - PI).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(parse("log(x)").unwrap().eval(-1.0, 0.0), Err(EvalError::Domain { .. })));
        assert!(matches!(parse("1/x").unwrap().eval(0.0, 0.0), Err(EvalError::DivisionByZero)));
        assert!(matches!(parse("sqrt(x)").unwrap().eval(-1.0, 0.0), Err(EvalError::Domain { .. })));
        assert!(parse("exp(x)").unwrap().eval(1000.0, 0.0).is_err());
    }

    #[test]
    fn derivative_examples() {
        let d = parse("x^2").unwrap().differentiate(Var::X);
        for &x in &[-1.5, 0.0, 2.0] {
            assert!((d.eval(x, 0.3).unwrap() - 2.0 * x).abs() < 1e-14);
        }
        assert!(parse("sin(y)").unwrap().differentiate(Var::X).is_zero());
        let d = parse("log(y)").unwrap().differentiate(Var::Y);
        assert!((d.eval(0.0, 4.0).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn second_derivatives_of_round_sphere_factor() {
        // rho = log(2/(1+r^2)) has Laplacian -e^{2 rho}
        let d = Differentiated::new(parse("log(2/(1+x^2+y^2))").unwrap());
        for &(x, y) in &[(0.1, 0.2), (-0.5, 0.3), (0.0, 0.0)] {
            let lap = d.dxx.eval(x, y).unwrap() + d.dyy.eval(x, y).unwrap();
            let e2r = (2.0 / (1.0 + x * x + y * y)).powi(2);
            assert!((lap + e2r).abs() < 1e-13);
        }
    }

    #[test]
    fn display_round_trip() {
        for src in ["x", "-x^2", "sin(x)*cos(y) - 3/(1+y)", "atan2(y, x+1)", "2^-x", "-(-3)"] {
            let p1 = parse(src).unwrap();
            let s1 = p1.to_string();
            let p2 = parse(&s1).unwrap();
            assert_eq!(p2.to_string(), s1, "{src}");
            assert_eq!(p1.eval(0.3, 0.7).unwrap(), p2.eval(0.3, 0.7).unwrap());
        }
    }

    #[test]
    fn tape_matches_tree() {
        let rho = Differentiated::new(parse("log(2/(1+x^2+y^2)) + 0.1*sin(x)*cos(y)").unwrap());
        let es = [&rho.value, &rho.dx, &rho.dy, &rho.dxx, &rho.dyy];
        let tape = Tape::compile(&es);
        let total: usize = es.iter().map(|e| e.node_count()).sum();
        assert!(tape.len() < total);
        for (x, y) in [(0.1, 0.2), (-0.7, 0.4), (0.0, 0.0)] {
            let v = tape.eval(x, y).unwrap();
            for (e, got) in es.iter().zip(v) {
                assert_eq!(e.eval(x, y).unwrap(), got);
            }
        }
        let bad = Tape::compile(&[&parse("log(x)").unwrap()]);
        assert!(matches!(bad.eval(-1.0, 0.0), Err(EvalError::Domain { .. })));
    }
}
