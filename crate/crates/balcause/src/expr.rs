//! Tiny arithmetic expression language for basis terms and covariate maps.
//!
//! Grammar (infix, usual precedence, `^` binds tightest and is
//! right-associative):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := NUMBER | VAR | FUNC '(' expr ')' | '(' expr ')'
//! VAR     := 'a' | 'x' I | 'a' I          -- I a positive integer
//! FUNC    := exp | log | sin | cos | sqrt | abs | expit | tanh
//! ```
//!
//! `x3` is the third covariate column (1-based), `a` is the treatment dose
//! and `aN` is shorthand for `a^N`, so `x,a,a2,a3` reads naturally as the
//! cubic-in-dose basis. A bare `x` is not an expression by itself; list
//! parsing in [`crate::basis`] expands it to one copy of the term per
//! covariate column.

use crate::error::{Error, Result};

/// Parsed, immutable expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    /// Literal constant.
    Num(f64),
    /// Covariate column, 0-based after parsing (`x1` ⇒ `Cov(0)`).
    Cov(usize),
    /// The treatment dose `a`.
    Dose,
    Neg(Box<Expr>),
    Bin(Op, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Abs,
    Expit,
    Tanh,
}

impl Expr {
    /// Evaluate at covariate row `x` and dose `a`.
    ///
    /// Panics if a covariate index is out of range; call [`Expr::check`]
    /// once against the data dimension before evaluating in a loop.
    pub fn eval(&self, x: &[f64], a: f64) -> f64 {
        match self {
            Expr::Num(c) => *c,
            Expr::Cov(j) => x[*j],
            Expr::Dose => a,
            Expr::Neg(e) => -e.eval(x, a),
            Expr::Bin(op, l, r) => {
                let (l, r) = (l.eval(x, a), r.eval(x, a));
                match op {
                    Op::Add => l + r,
                    Op::Sub => l - r,
                    Op::Mul => l * r,
                    Op::Div => l / r,
                    Op::Pow => l.powf(r),
                }
            }
            Expr::Call(f, e) => {
                let v = e.eval(x, a);
                match f {
                    Func::Exp => v.exp(),
                    Func::Log => v.ln(),
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Sqrt => v.sqrt(),
                    Func::Abs => v.abs(),
                    Func::Expit => 1.0 / (1.0 + (-v).exp()),
                    Func::Tanh => v.tanh(),
                }
            }
        }
    }

    /// Verify every covariate reference fits in `d` columns and, when
    /// `allow_dose` is false, that the dose variable is never used.
    pub fn check(&self, d: usize, allow_dose: bool) -> Result<()> {
        match self {
            Expr::Num(_) => Ok(()),
            Expr::Cov(j) => {
                if *j < d {
                    Ok(())
                } else {
                    Err(Error::UnknownVariable(format!("x{}", j + 1)))
                }
            }
            Expr::Dose => {
                if allow_dose {
                    Ok(())
                } else {
                    Err(Error::UnknownVariable("a".into()))
                }
            }
            Expr::Neg(e) | Expr::Call(_, e) => e.check(d, allow_dose),
            Expr::Bin(_, l, r) => {
                l.check(d, allow_dose)?;
                r.check(d, allow_dose)
            }
        }
    }

    /// True if the tree references the dose variable anywhere.
    pub fn uses_dose(&self) -> bool {
        match self {
            Expr::Dose => true,
            Expr::Num(_) | Expr::Cov(_) => false,
            Expr::Neg(e) | Expr::Call(_, e) => e.uses_dose(),
            Expr::Bin(_, l, r) => l.uses_dose() || r.uses_dose(),
        }
    }

    /// True if the tree references any covariate column.
    pub fn uses_covariate(&self) -> bool {
        match self {
            Expr::Cov(_) => true,
            Expr::Num(_) | Expr::Dose => false,
            Expr::Neg(e) | Expr::Call(_, e) => e.uses_covariate(),
            Expr::Bin(_, l, r) => l.uses_covariate() || r.uses_covariate(),
        }
    }
}

/// Parse a single expression. A bare `x` is rejected here; use the list
/// parser in [`crate::basis`] if you want column expansion.
pub fn parse(src: &str) -> Result<Expr> {
    let tokens = lex(src)?;
    let mut p = Parser { tokens, pos: 0, src };
    let e = p.expr()?;
    if p.pos != p.tokens.len() {
        return Err(Error::ExprParse(format!(
            "unexpected trailing input at `{}` in `{src}`",
            p.describe_current()
        )));
    }
    Ok(e)
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

fn lex(src: &str) -> Result<Vec<Tok>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' => i += 1,
            '+' => {
                out.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                out.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                out.push(Tok::Star);
                i += 1;
            }
            '/' => {
                out.push(Tok::Slash);
                i += 1;
            }
            '^' => {
                out.push(Tok::Caret);
                i += 1;
            }
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && matches!(bytes[i] as char, '0'..='9' | '.') {
                    i += 1;
                }
                // exponent part
                if i < bytes.len() && matches!(bytes[i] as char, 'e' | 'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && matches!(bytes[j] as char, '+' | '-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| Error::ExprParse(format!("bad number `{text}` in `{src}`")))?;
                out.push(Tok::Num(v));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                out.push(Tok::Ident(src[start..i].to_string()));
            }
            _ => {
                return Err(Error::ExprParse(format!(
                    "unexpected character `{c}` in `{src}`"
                )))
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Tok>,
    pos: usize,
    src: &'a str,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn describe_current(&self) -> String {
        match self.peek() {
            Some(t) => format!("{t:?}"),
            None => "end of input".to_string(),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Bin(Op::Add, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Bin(Op::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Expr::Bin(Op::Mul, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Expr::Bin(Op::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if matches!(self.peek(), Some(Tok::Minus)) {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        if matches!(self.peek(), Some(Tok::Caret)) {
            self.pos += 1;
            // right-associative, and `-` binds looser than `^` on the right
            let exp = self.unary()?;
            return Ok(Expr::Bin(Op::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr> {
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Num(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                match self.bump() {
                    Some(Tok::RParen) => Ok(e),
                    _ => Err(Error::ExprParse(format!("missing `)` in `{}`", self.src))),
                }
            }
            Some(Tok::Ident(name)) => self.ident(name),
            other => Err(Error::ExprParse(format!(
                "expected a value, found {other:?} in `{}`",
                self.src
            ))),
        }
    }

    fn ident(&mut self, name: String) -> Result<Expr> {
        // variables first: a, aN, xN
        if name == "a" {
            return Ok(Expr::Dose);
        }
        if name == "pi" {
            return Ok(Expr::Num(std::f64::consts::PI));
        }
        if let Some(rest) = name.strip_prefix('x') {
            if let Ok(idx) = rest.parse::<usize>() {
                if idx == 0 {
                    return Err(Error::ExprParse(
                        "covariate indices are 1-based; `x0` is invalid".into(),
                    ));
                }
                return Ok(Expr::Cov(idx - 1));
            }
        }
        if let Some(rest) = name.strip_prefix('a') {
            if let Ok(p) = rest.parse::<u32>() {
                return Ok(Expr::Bin(
                    Op::Pow,
                    Box::new(Expr::Dose),
                    Box::new(Expr::Num(f64::from(p))),
                ));
            }
        }
        let func = match name.as_str() {
            "exp" => Func::Exp,
            "log" | "ln" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "expit" | "sigmoid" => Func::Expit,
            "tanh" => Func::Tanh,
            "x" => {
                return Err(Error::ExprParse(
                    "bare `x` is only valid as a whole basis term (it expands to one term per column)"
                        .into(),
                ))
            }
            _ => return Err(Error::UnknownVariable(name)),
        };
        match self.bump() {
            Some(Tok::LParen) => {
                let arg = self.expr()?;
                match self.bump() {
                    Some(Tok::RParen) => Ok(Expr::Call(func, Box::new(arg))),
                    _ => Err(Error::ExprParse(format!(
                        "missing `)` after {name}(...) in `{}`",
                        self.src
                    ))),
                }
            }
            _ => Err(Error::ExprParse(format!(
                "function `{name}` must be followed by `(`"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, x: &[f64], a: f64) -> f64 {
        parse(src).unwrap().eval(x, a)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1+2*3", &[], 0.0), 7.0);
        assert_eq!(ev("2^3^2", &[], 0.0), 512.0); // right-assoc
        assert_eq!(ev("-2^2", &[], 0.0), -4.0); // unary minus looser than ^
        assert_eq!(ev("(1+2)*3", &[], 0.0), 9.0);
        assert_eq!(ev("8/4/2", &[], 0.0), 1.0); // left-assoc
    }

    #[test]
    fn variables_and_shorthand() {
        let x = [2.0, 5.0];
        assert_eq!(ev("x1", &x, 0.0), 2.0);
        assert_eq!(ev("x2^2", &x, 0.0), 25.0);
        assert_eq!(ev("a", &x, 3.0), 3.0);
        assert_eq!(ev("a2", &x, 3.0), 9.0);
        assert_eq!(ev("a3", &x, 2.0), 8.0);
        assert_eq!(ev("a*x1", &x, 4.0), 8.0);
    }

    #[test]
    fn functions() {
        assert!((ev("exp(1)", &[], 0.0) - std::f64::consts::E).abs() < 1e-15);
        assert!((ev("expit(0)", &[], 0.0) - 0.5).abs() < 1e-15);
        assert!((ev("sin(pi/2)", &[], 0.0) - 1.0).abs() < 1e-12);
        assert!((ev("x1*sin(x1)^2", &[2.0], 0.0) - 2.0 * (2.0f64).sin().powi(2)).abs() < 1e-14);
    }

    #[test]
    fn check_catches_bad_references() {
        assert!(parse("x3").unwrap().check(2, false).is_err());
        assert!(parse("x2").unwrap().check(2, false).is_ok());
        assert!(parse("a").unwrap().check(2, false).is_err());
        assert!(parse("a*x1").unwrap().check(2, true).is_ok());
    }

    #[test]
    fn parse_errors_are_reported() {
        assert!(parse("1+").is_err());
        assert!(parse("foo(3)").is_err());
        assert!(parse("(1+2").is_err());
        assert!(parse("x").is_err());
        assert!(parse("x0").is_err());
        assert!(parse("1 2").is_err());
    }

    #[test]
    fn scientific_notation() {
        assert_eq!(ev("1e3", &[], 0.0), 1000.0);
        assert_eq!(ev("2.5e-2", &[], 0.0), 0.025);
        assert_eq!(ev("1e3*a", &[], 2.0), 2000.0);
    }
}
