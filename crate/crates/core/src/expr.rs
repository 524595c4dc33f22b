//! Arithmetic expressions over `x1..xd` used for user-supplied potentials.
//!
//! Grammar (whitespace between tokens is ignored):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := ('+' | '-') unary | power
//! power  := atom ('^' unary)?          right-associative; -x^2 = -(x^2)
//! atom   := number | 'pi' | 'e' | var | func '(' expr ')' | '(' expr ')'
//! var    := 'x' [1-9][0-9]*            1-based coordinate index, at most dim
//! func   := 'exp' | 'log'              log is the natural logarithm
//! number := digits ['.' digits*] [('e' | 'E') ['+' | '-'] digits]
//!         | '.' digits [exponent]
//! ```
//!
//! Number lexemes are converted with `str::parse::<f64>`, i.e. correctly
//! rounded. Evaluation follows IEEE-754 double arithmetic in the tree order
//! above; `^` is `f64::powf`. Derivatives are not symbolic: wrap the
//! expression in [`crate::field::FiniteDifference`].

use crate::error::{Error, Result};
use crate::field::ScalarField;

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Exp(Box<Node>),
    Log(Box<Node>),
}

impl Node {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Node::Const(c) => *c,
            Node::Var(i) => x[*i],
            Node::Neg(a) => -a.eval(x),
            Node::Add(a, b) => a.eval(x) + b.eval(x),
            Node::Sub(a, b) => a.eval(x) - b.eval(x),
            Node::Mul(a, b) => a.eval(x) * b.eval(x),
            Node::Div(a, b) => a.eval(x) / b.eval(x),
            Node::Pow(a, b) => a.eval(x).powf(b.eval(x)),
            Node::Exp(a) => a.eval(x).exp(),
            Node::Log(a) => a.eval(x).ln(),
        }
    }

    fn max_var(&self) -> Option<usize> {
        match self {
            Node::Const(_) => None,
            Node::Var(i) => Some(*i),
            Node::Neg(a) | Node::Exp(a) | Node::Log(a) => a.max_var(),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) | Node::Pow(a, b) => {
                a.max_var().max(b.max_var())
            }
        }
    }
}

/// A parsed expression usable as a scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    source: String,
    dim: usize,
    root: Node,
}

impl Expression {
    /// Parses `source`; every variable must satisfy `xi` with `i <= dim`.
    pub fn parse(source: &str, dim: usize) -> Result<Self> {
        let mut p = Parser { src: source.as_bytes(), pos: 0 };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        if let Some(i) = root.max_var() {
            if i >= dim {
                return Err(Error::Parse {
                    offset: 0,
                    message: format!("variable x{} exceeds dimension {dim}", i + 1),
                });
            }
        }
        Ok(Self { source: source.to_string(), dim, root })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.root.eval(x)
    }
}

impl ScalarField for Expression {
    fn value(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::Parse { offset: self.pos, message: message.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat(b'-') {
            Ok(Node::Neg(Box::new(self.unary()?)))
        } else if self.eat(b'+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat(b'^') {
            Ok(Node::Pow(Box::new(base), Box::new(self.unary()?)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected ')'"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(_) => Err(self.error("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            let s = p.pos;
            while p.pos < p.src.len() && p.src[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
            p.pos - s
        };
        let int_digits = digits(self);
        let mut frac_digits = 0;
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            frac_digits = digits(self);
        }
        if int_digits == 0 && frac_digits == 0 {
            self.pos = start;
            return Err(self.error("malformed number"));
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                // not an exponent: leave `e` for the next token
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii lexeme");
        text.parse::<f64>()
            .map(Node::Const)
            .map_err(|_| Error::Parse { offset: start, message: format!("bad number '{text}'") })
    }

    fn ident(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii lexeme");
        match name {
            "pi" => Ok(Node::Const(std::f64::consts::PI)),
            "e" => Ok(Node::Const(std::f64::consts::E)),
            "exp" | "log" => {
                if !self.eat(b'(') {
                    return Err(self.error("expected '(' after function name"));
                }
                let arg = Box::new(self.expr()?);
                if !self.eat(b')') {
                    return Err(self.error("expected ')'"));
                }
                Ok(if name == "exp" { Node::Exp(arg) } else { Node::Log(arg) })
            }
            _ => {
                let idx = name
                    .strip_prefix('x')
                    .filter(|s| !s.is_empty() && !s.starts_with('0'))
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or(Error::Parse { offset: start, message: format!("unknown identifier '{name}'") })?;
                Ok(Node::Var(idx - 1))
            }
        }
    }
}
