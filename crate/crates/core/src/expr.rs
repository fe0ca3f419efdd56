//! A small arithmetic expression language for user-supplied log-densities and
//! weight functions.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' unary)?
//! atom    := number | 'x' index | 'pi' | func '(' expr ')' | '(' expr ')'
//! func    := exp | log | abs | sqrt
//! ```
//!
//! `×`, `÷` and `−` are accepted as aliases of `*`, `/` and `-`. Variables are
//! `x1` through `xd`; `-x1^2` parses as `-(x1^2)`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Exp,
    Log,
    Abs,
    Sqrt,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

impl Node {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::Var(i) => x[*i],
            Node::Neg(a) => -a.eval(x),
            Node::Add(a, b) => a.eval(x) + b.eval(x),
            Node::Sub(a, b) => a.eval(x) - b.eval(x),
            Node::Mul(a, b) => a.eval(x) * b.eval(x),
            Node::Div(a, b) => a.eval(x) / b.eval(x),
            Node::Pow(a, b) => {
                let base = a.eval(x);
                match b.as_ref() {
                    Node::Num(e) if e.fract() == 0.0 && e.abs() < 64.0 => base.powi(*e as i32),
                    _ => base.powf(b.eval(x)),
                }
            }
            Node::Call(f, a) => {
                let v = a.eval(x);
                match f {
                    Func::Exp => v.exp(),
                    Func::Log => v.ln(),
                    Func::Abs => v.abs(),
                    Func::Sqrt => v.sqrt(),
                }
            }
        }
    }

    fn max_var(&self) -> Option<usize> {
        match self {
            Node::Num(_) => None,
            Node::Var(i) => Some(*i),
            Node::Neg(a) | Node::Call(_, a) => a.max_var(),
            Node::Add(a, b)
            | Node::Sub(a, b)
            | Node::Mul(a, b)
            | Node::Div(a, b)
            | Node::Pow(a, b) => match (a.max_var(), b.max_var()) {
                (Some(p), Some(q)) => Some(p.max(q)),
                (p, q) => p.or(q),
            },
        }
    }
}

/// A parsed expression in the variables `x1..xd`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    source: String,
    root: Node,
    dim: usize,
}

impl Expression {
    /// Parses `source`, requiring every variable index to be at most `dim`.
    pub fn parse(source: &str, dim: usize) -> Result<Self> {
        let tokens = tokenize(source)?;
        let mut parser = Parser { tokens, pos: 0 };
        let root = parser.expr()?;
        if let Some(tok) = parser.tokens.get(parser.pos) {
            return Err(Error::Expression {
                column: tok.column,
                message: format!("unexpected `{}`", tok.kind),
            });
        }
        if let Some(max) = root.max_var() {
            if max >= dim {
                return Err(Error::Expression {
                    column: 1,
                    message: format!("variable x{} exceeds dimension {}", max + 1, dim),
                });
            }
        }
        Ok(Self { source: source.to_string(), root, dim })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert!(x.len() >= self.dim);
        self.root.eval(x)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Num(f64),
    Var(usize),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

impl fmt::Display for TokKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokKind::Num(v) => write!(f, "{v}"),
            TokKind::Var(i) => write!(f, "x{}", i + 1),
            TokKind::Ident(s) => f.write_str(s),
            TokKind::Plus => f.write_str("+"),
            TokKind::Minus => f.write_str("-"),
            TokKind::Star => f.write_str("*"),
            TokKind::Slash => f.write_str("/"),
            TokKind::Caret => f.write_str("^"),
            TokKind::LParen => f.write_str("("),
            TokKind::RParen => f.write_str(")"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    column: usize,
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        let single = match c {
            '+' => Some(TokKind::Plus),
            '-' | '−' => Some(TokKind::Minus),
            '*' | '×' => Some(TokKind::Star),
            '/' | '÷' => Some(TokKind::Slash),
            '^' => Some(TokKind::Caret),
            '(' => Some(TokKind::LParen),
            ')' => Some(TokKind::RParen),
            _ => None,
        };
        if let Some(kind) = single {
            out.push(Token { kind, column });
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text.parse::<f64>().map_err(|_| Error::Expression {
                column,
                message: format!("malformed number `{text}`"),
            })?;
            out.push(Token { kind: TokKind::Num(v), column });
            continue;
        }
        if c.is_ascii_alphabetic() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            let kind = match word.strip_prefix('x').map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 1 => TokKind::Var(k - 1),
                Some(Ok(_)) => {
                    return Err(Error::Expression { column, message: "variables start at x1".into() })
                }
                _ => TokKind::Ident(word),
            };
            out.push(Token { kind, column });
            continue;
        }
        return Err(Error::Expression { column, message: format!("unexpected character `{c}`") });
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&TokKind> {
        self.tokens.get(self.pos).map(|t| &t.kind)
    }

    fn column(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|t| t.column)
            .or_else(|| self.tokens.last().map(|t| t.column + 1))
            .unwrap_or(1)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Expression { column: self.column(), message: message.into() })
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(TokKind::Plus) => {
                    self.pos += 1;
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(TokKind::Minus) => {
                    self.pos += 1;
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(TokKind::Star) => {
                    self.pos += 1;
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(TokKind::Slash) => {
                    self.pos += 1;
                    lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if let Some(TokKind::Minus) = self.peek() {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if let Some(TokKind::Caret) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let Some(tok) = self.peek().cloned() else {
            return self.err("unexpected end of expression");
        };
        self.pos += 1;
        match tok {
            TokKind::Num(v) => Ok(Node::Num(v)),
            TokKind::Var(i) => Ok(Node::Var(i)),
            TokKind::LParen => {
                let inner = self.expr()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            TokKind::Ident(name) => {
                let func = match name.as_str() {
                    "pi" => return Ok(Node::Num(std::f64::consts::PI)),
                    "exp" => Func::Exp,
                    "log" | "ln" => Func::Log,
                    "abs" => Func::Abs,
                    "sqrt" => Func::Sqrt,
                    _ => {
                        self.pos -= 1;
                        return self.err(format!("unknown identifier `{name}`"));
                    }
                };
                if self.peek() != Some(&TokKind::LParen) {
                    return self.err(format!("expected `(` after `{name}`"));
                }
                self.pos += 1;
                let arg = self.expr()?;
                self.expect_rparen()?;
                Ok(Node::Call(func, Box::new(arg)))
            }
            other => {
                self.pos -= 1;
                self.err(format!("unexpected `{other}`"))
            }
        }
    }

    fn expect_rparen(&mut self) -> Result<()> {
        if self.peek() == Some(&TokKind::RParen) {
            self.pos += 1;
            Ok(())
        } else {
            self.err("expected `)`")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, x: &[f64]) -> f64 {
        Expression::parse(src, x.len()).unwrap().eval(x)
    }

    #[test]
    fn precedence_and_unary_minus() {
        assert_eq!(ev("-x1^2/2", &[2.0]), -2.0);
        assert_eq!(ev("1 + 2*3", &[0.0]), 7.0);
        assert_eq!(ev("2^3^2", &[0.0]), 512.0);
        assert_eq!(ev("(1+2)*3", &[0.0]), 9.0);
        assert_eq!(ev("2 × 3 ÷ 4 − 1", &[0.0]), 0.5);
    }

    #[test]
    fn functions_and_variables() {
        let v = ev("-log(1 + x1^2 + x2^2)", &[1.0, 1.0]);
        assert!((v + 3f64.ln()).abs() < 1e-15);
        assert_eq!(ev("abs(x1) + sqrt(x2)", &[-3.0, 4.0]), 5.0);
        assert!((ev("exp(1)", &[0.0]) - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(ev("1.5e1 + 2E-1", &[0.0]), 15.2);
    }

    #[test]
    fn errors_carry_columns() {
        match Expression::parse("x1 + * 2", 1) {
            Err(Error::Expression { column, .. }) => assert_eq!(column, 6),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Expression::parse("x3", 2), Err(Error::Expression { .. })));
        assert!(matches!(Expression::parse("foo(x1)", 1), Err(Error::Expression { .. })));
        assert!(matches!(Expression::parse("(x1", 1), Err(Error::Expression { .. })));
        assert!(matches!(Expression::parse("x0", 1), Err(Error::Expression { .. })));
    }
}
