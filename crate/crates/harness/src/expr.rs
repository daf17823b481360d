//! Tiny analytic-expression grammar for spatial config fields.
//!
//! Grammar: identifiers `x`, `y`, `pi`; binary `+ - * / ^` (with `^`
//! right-associative and binding tighter than unary minus); functions
//! `sin`, `cos`, `exp`; decimal literals with optional exponent;
//! parentheses. Whitespace is insignificant.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ExprError {
    #[error("unexpected character '{ch}' at position {pos}")]
    UnexpectedChar { ch: char, pos: usize },
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("expected {expected} at position {pos}, found '{found}'")]
    Expected {
        expected: &'static str,
        pos: usize,
        found: String,
    },
    #[error("unknown identifier '{name}' at position {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("malformed number '{text}' at position {pos}")]
    BadNumber { text: String, pos: usize },
    #[error("trailing input at position {pos}: '{found}'")]
    TrailingInput { pos: usize, found: String },
    #[error("empty expression")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    X,
    Y,
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Neg(Box<Node>),
    Sin(Box<Node>),
    Cos(Box<Node>),
    Exp(Box<Node>),
}

/// A parsed expression over the plane, evaluated pointwise.
#[derive(Debug, Clone)]
pub struct Expr {
    root: Node,
    source: String,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr, ExprError> {
        let tokens = tokenize(source)?;
        if tokens.is_empty() {
            return Err(ExprError::Empty);
        }
        let mut p = Parser { tokens, pos: 0 };
        let root = p.expr()?;
        if let Some(t) = p.peek() {
            return Err(ExprError::TrailingInput {
                pos: t.pos,
                found: t.text(),
            });
        }
        Ok(Expr {
            root,
            source: source.to_string(),
        })
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        eval_node(&self.root, x, y)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// True when the expression has no spatial dependence.
    pub fn is_constant(&self) -> bool {
        fn scan(n: &Node) -> bool {
            match n {
                Node::Const(_) => true,
                Node::X | Node::Y => false,
                Node::Add(a, b)
                | Node::Sub(a, b)
                | Node::Mul(a, b)
                | Node::Div(a, b)
                | Node::Pow(a, b) => scan(a) && scan(b),
                Node::Neg(a) | Node::Sin(a) | Node::Cos(a) | Node::Exp(a) => scan(a),
            }
        }
        scan(&self.root)
    }
}

fn eval_node(n: &Node, x: f64, y: f64) -> f64 {
    match n {
        Node::Const(c) => *c,
        Node::X => x,
        Node::Y => y,
        Node::Add(a, b) => eval_node(a, x, y) + eval_node(b, x, y),
        Node::Sub(a, b) => eval_node(a, x, y) - eval_node(b, x, y),
        Node::Mul(a, b) => eval_node(a, x, y) * eval_node(b, x, y),
        Node::Div(a, b) => eval_node(a, x, y) / eval_node(b, x, y),
        Node::Pow(a, b) => eval_node(a, x, y).powf(eval_node(b, x, y)),
        Node::Neg(a) => -eval_node(a, x, y),
        Node::Sin(a) => eval_node(a, x, y).sin(),
        Node::Cos(a) => eval_node(a, x, y).cos(),
        Node::Exp(a) => eval_node(a, x, y).exp(),
    }
}

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
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
}

impl Token {
    fn text(&self) -> String {
        match &self.tok {
            Tok::Num(v) => format!("{v}"),
            Tok::Ident(s) => s.clone(),
            Tok::Plus => "+".into(),
            Tok::Minus => "-".into(),
            Tok::Star => "*".into(),
            Tok::Slash => "/".into(),
            Tok::Caret => "^".into(),
            Tok::LParen => "(".into(),
            Tok::RParen => ")".into(),
        }
    }
}

fn tokenize(src: &str) -> Result<Vec<Token>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let pos = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
            }
            '+' => {
                out.push(Token { tok: Tok::Plus, pos });
                i += 1;
            }
            '-' => {
                out.push(Token { tok: Tok::Minus, pos });
                i += 1;
            }
            '*' => {
                out.push(Token { tok: Tok::Star, pos });
                i += 1;
            }
            '/' => {
                out.push(Token { tok: Tok::Slash, pos });
                i += 1;
            }
            '^' => {
                out.push(Token { tok: Tok::Caret, pos });
                i += 1;
            }
            '(' => {
                out.push(Token { tok: Tok::LParen, pos });
                i += 1;
            }
            ')' => {
                out.push(Token { tok: Tok::RParen, pos });
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                // Exponent part only when it is unambiguously numeric.
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
                let v: f64 = text.parse().map_err(|_| ExprError::BadNumber {
                    text: text.clone(),
                    pos: start,
                })?;
                out.push(Token {
                    tok: Tok::Num(v),
                    pos: start,
                });
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let name: String = chars[start..i].iter().collect();
                out.push(Token {
                    tok: Tok::Ident(name),
                    pos: start,
                });
            }
            other => return Err(ExprError::UnexpectedChar { ch: other, pos }),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn advance(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        while let Some(t) = self.peek() {
            match t.tok {
                Tok::Plus => {
                    self.advance();
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Minus => {
                    self.advance();
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.factor()?;
        while let Some(t) = self.peek() {
            match t.tok {
                Tok::Star => {
                    self.advance();
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Tok::Slash => {
                    self.advance();
                    lhs = Node::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    /// factor := ('-' | '+')* power, so -x^2 parses as -(x^2).
    fn factor(&mut self) -> Result<Node, ExprError> {
        match self.peek().map(|t| t.tok.clone()) {
            Some(Tok::Minus) => {
                self.advance();
                Ok(Node::Neg(Box::new(self.factor()?)))
            }
            Some(Tok::Plus) => {
                self.advance();
                self.factor()
            }
            _ => self.power(),
        }
    }

    /// power := atom ('^' factor)?, right-associative.
    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if matches!(self.peek().map(|t| &t.tok), Some(Tok::Caret)) {
            self.advance();
            let exponent = self.factor()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let t = self.advance().ok_or(ExprError::UnexpectedEnd)?;
        match t.tok {
            Tok::Num(v) => Ok(Node::Const(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                match self.advance() {
                    Some(Token {
                        tok: Tok::RParen, ..
                    }) => Ok(inner),
                    Some(other) => Err(ExprError::Expected {
                        expected: "')'",
                        pos: other.pos,
                        found: other.text(),
                    }),
                    None => Err(ExprError::UnexpectedEnd),
                }
            }
            Tok::Ident(name) => match name.as_str() {
                "x" => Ok(Node::X),
                "y" => Ok(Node::Y),
                "pi" => Ok(Node::Const(std::f64::consts::PI)),
                "sin" | "cos" | "exp" => {
                    match self.advance() {
                        Some(Token {
                            tok: Tok::LParen, ..
                        }) => {}
                        Some(other) => {
                            return Err(ExprError::Expected {
                                expected: "'(' after function name",
                                pos: other.pos,
                                found: other.text(),
                            })
                        }
                        None => return Err(ExprError::UnexpectedEnd),
                    }
                    let arg = Box::new(self.expr()?);
                    match self.advance() {
                        Some(Token {
                            tok: Tok::RParen, ..
                        }) => {}
                        Some(other) => {
                            return Err(ExprError::Expected {
                                expected: "')'",
                                pos: other.pos,
                                found: other.text(),
                            })
                        }
                        None => return Err(ExprError::UnexpectedEnd),
                    }
                    Ok(match name.as_str() {
                        "sin" => Node::Sin(arg),
                        "cos" => Node::Cos(arg),
                        _ => Node::Exp(arg),
                    })
                }
                _ => Err(ExprError::UnknownIdentifier { name, pos: t.pos }),
            },
            _ => Err(ExprError::Expected {
                expected: "a value",
                pos: t.pos,
                found: t.text(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, x: f64, y: f64) -> f64 {
        Expr::parse(src).unwrap().eval(x, y)
    }

    #[test]
    fn literals_and_identifiers() {
        assert_eq!(ev("42", 0.0, 0.0), 42.0);
        assert_eq!(ev("2.5", 0.0, 0.0), 2.5);
        assert_eq!(ev("x", 3.0, 0.0), 3.0);
        assert_eq!(ev("y", 0.0, -2.0), -2.0);
        assert!((ev("pi", 0.0, 0.0) - std::f64::consts::PI).abs() < 1e-15);
        assert_eq!(ev("1e-3", 0.0, 0.0), 1e-3);
        assert_eq!(ev("2E2", 0.0, 0.0), 200.0);
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("2+3*4", 0.0, 0.0), 14.0);
        assert_eq!(ev("(2+3)*4", 0.0, 0.0), 20.0);
        assert_eq!(ev("2-3-4", 0.0, 0.0), -5.0);
        assert_eq!(ev("12/3/2", 0.0, 0.0), 2.0);
        // Right-associative power: 2^3^2 = 2^9.
        assert_eq!(ev("2^3^2", 0.0, 0.0), 512.0);
        // Unary minus binds looser than power.
        assert_eq!(ev("-2^2", 0.0, 0.0), -4.0);
        assert_eq!(ev("2^-1", 0.0, 0.0), 0.5);
        assert_eq!(ev("--3", 0.0, 0.0), 3.0);
    }

    #[test]
    fn functions_evaluate() {
        assert!((ev("sin(pi/2)", 0.0, 0.0) - 1.0).abs() < 1e-15);
        assert!((ev("cos(0)", 0.0, 0.0) - 1.0).abs() < 1e-15);
        assert!((ev("exp(1)", 0.0, 0.0) - std::f64::consts::E).abs() < 1e-15);
        let f = Expr::parse("10*sin(pi*x)*sin(pi*y)").unwrap();
        assert!((f.eval(0.5, 0.5) - 10.0).abs() < 1e-12);
        assert!(f.eval(0.0, 0.25).abs() < 1e-12);
        assert!(!f.is_constant());
        assert!(Expr::parse("3*pi").unwrap().is_constant());
    }

    #[test]
    fn errors_carry_positions() {
        assert_eq!(
            Expr::parse("2 $ 3").unwrap_err(),
            ExprError::UnexpectedChar { ch: '$', pos: 2 }
        );
        assert!(matches!(
            Expr::parse("sin x").unwrap_err(),
            ExprError::Expected { pos: 4, .. }
        ));
        assert!(matches!(
            Expr::parse("z+1").unwrap_err(),
            ExprError::UnknownIdentifier { pos: 0, .. }
        ));
        assert_eq!(Expr::parse("").unwrap_err(), ExprError::Empty);
        assert_eq!(Expr::parse("1+").unwrap_err(), ExprError::UnexpectedEnd);
        assert!(matches!(
            Expr::parse("1 2").unwrap_err(),
            ExprError::TrailingInput { pos: 2, .. }
        ));
        assert!(matches!(
            Expr::parse("(1+2").unwrap_err(),
            ExprError::UnexpectedEnd
        ));
        assert!(matches!(
            Expr::parse("1..2").unwrap_err(),
            ExprError::BadNumber { pos: 0, .. }
        ));
    }

    #[test]
    fn whitespace_is_insignificant() {
        assert_eq!(ev(" 1 +\t2 * x ", 4.0, 0.0), 9.0);
    }
}
