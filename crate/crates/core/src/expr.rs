//! Coefficient expression language.
//!
//! Problem coefficients are closed-form expressions over the time variable
//! `t`, lifted path features `feat[i]`, and per-control constant tables
//! `ctrl[name]`. Supported: `+ - * /`, unary minus, `min(a,b)`, `max(a,b)`,
//! `exp(x)`, `sin(x)`, `abs(x)`, numeric literals. Parsed by recursive
//! descent; parse errors carry line and column.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Time,
    Feature(usize),
    CtrlConst(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
    Sin(Box<Expr>),
    Abs(Box<Expr>),
}

/// Evaluation context: current time, lifted feature values, and the constant
/// table of the active control.
pub struct EvalCtx<'a, T> {
    pub time: T,
    pub feats: &'a [T],
    pub ctrl: &'a BTreeMap<String, f64>,
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr> {
        Parser::new(text).parse_all()
    }

    pub fn eval<T: Scalar>(&self, ctx: &EvalCtx<T>) -> Result<T> {
        Ok(match self {
            Expr::Const(v) => T::of(*v),
            Expr::Time => ctx.time,
            Expr::Feature(i) => *ctx
                .feats
                .get(*i)
                .ok_or_else(|| CoreError::Eval(format!("feat[{i}] out of range")))?,
            Expr::CtrlConst(name) => T::of(*ctx.ctrl.get(name).ok_or_else(|| {
                CoreError::Eval(format!("ctrl[{name}] undefined for the active control"))
            })?),
            Expr::Neg(a) => -a.eval(ctx)?,
            Expr::Add(a, b) => a.eval(ctx)? + b.eval(ctx)?,
            Expr::Sub(a, b) => a.eval(ctx)? - b.eval(ctx)?,
            Expr::Mul(a, b) => a.eval(ctx)? * b.eval(ctx)?,
            Expr::Div(a, b) => {
                let d = b.eval(ctx)?;
                if d == T::zero() {
                    return Err(CoreError::Eval("division by zero".into()));
                }
                a.eval(ctx)? / d
            }
            Expr::Min(a, b) => a.eval(ctx)?.min(b.eval(ctx)?),
            Expr::Max(a, b) => a.eval(ctx)?.max(b.eval(ctx)?),
            Expr::Exp(a) => a.eval(ctx)?.exp(),
            Expr::Sin(a) => a.eval(ctx)?.sin(),
            Expr::Abs(a) => a.eval(ctx)?.abs(),
        })
    }

    /// Largest feature index referenced, if any.
    pub fn max_feature_index(&self) -> Option<usize> {
        let mut m = None;
        self.visit(&mut |e| {
            if let Expr::Feature(i) = e {
                m = Some(m.map_or(*i, |x: usize| x.max(*i)));
            }
        });
        m
    }

    /// Control-table names referenced by the expression.
    pub fn ctrl_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |e| {
            if let Expr::CtrlConst(n) = e {
                if !names.contains(n) {
                    names.push(n.clone());
                }
            }
        });
        names
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Neg(a) | Expr::Exp(a) | Expr::Sin(a) | Expr::Abs(a) => a.visit(f),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Min(a, b)
            | Expr::Max(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            _ => {}
        }
    }
}

/// Canonical fully-parenthesized form; `parse ∘ display` is the identity.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) => write!(f, "{v}"),
            Expr::Time => write!(f, "t"),
            Expr::Feature(i) => write!(f, "feat[{i}]"),
            Expr::CtrlConst(n) => write!(f, "ctrl[{n}]"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a}+{b})"),
            Expr::Sub(a, b) => write!(f, "({a}-{b})"),
            Expr::Mul(a, b) => write!(f, "({a}*{b})"),
            Expr::Div(a, b) => write!(f, "({a}/{b})"),
            Expr::Min(a, b) => write!(f, "min({a},{b})"),
            Expr::Max(a, b) => write!(f, "max({a},{b})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Abs(a) => write!(f, "abs({a})"),
        }
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
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
}

struct Parser {
    toks: Vec<(Tok, usize, usize)>,
    pos: usize,
    end: (usize, usize),
}

impl Parser {
    fn new(text: &str) -> Self {
        let mut toks = Vec::new();
        let (mut line, mut col) = (1usize, 1usize);
        let mut chars = text.chars().peekable();
        let mut err: Option<(usize, usize, String)> = None;
        while let Some(&c) = chars.peek() {
            let (l, co) = (line, col);
            let bump = |ch: char, line: &mut usize, col: &mut usize| {
                if ch == '\n' {
                    *line += 1;
                    *col = 1;
                } else {
                    *col += 1;
                }
            };
            match c {
                ' ' | '\t' | '\n' | '\r' => {
                    chars.next();
                    bump(c, &mut line, &mut col);
                }
                '+' | '-' | '*' | '/' | '(' | ')' | '[' | ']' | ',' => {
                    chars.next();
                    bump(c, &mut line, &mut col);
                    let t = match c {
                        '+' => Tok::Plus,
                        '-' => Tok::Minus,
                        '*' => Tok::Star,
                        '/' => Tok::Slash,
                        '(' => Tok::LParen,
                        ')' => Tok::RParen,
                        '[' => Tok::LBracket,
                        ']' => Tok::RBracket,
                        _ => Tok::Comma,
                    };
                    toks.push((t, l, co));
                }
                '0'..='9' | '.' => {
                    let mut s = String::new();
                    while let Some(&d) = chars.peek() {
                        if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' {
                            s.push(d);
                            chars.next();
                            bump(d, &mut line, &mut col);
                            // exponent sign
                            if (d == 'e' || d == 'E') && matches!(chars.peek(), Some('+') | Some('-')) {
                                let sg = *chars.peek().unwrap();
                                s.push(sg);
                                chars.next();
                                bump(sg, &mut line, &mut col);
                            }
                        } else {
                            break;
                        }
                    }
                    match s.parse::<f64>() {
                        Ok(v) => toks.push((Tok::Num(v), l, co)),
                        Err(_) => {
                            err = Some((l, co, format!("bad numeric literal `{s}`")));
                            break;
                        }
                    }
                }
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let mut s = String::new();
                    while let Some(&d) = chars.peek() {
                        if d.is_ascii_alphanumeric() || d == '_' {
                            s.push(d);
                            chars.next();
                            bump(d, &mut line, &mut col);
                        } else {
                            break;
                        }
                    }
                    toks.push((Tok::Ident(s), l, co));
                }
                other => {
                    err = Some((l, co, format!("unexpected character `{other}`")));
                    break;
                }
            }
        }
        if let Some((l, c, msg)) = err {
            // Poison: a token the grammar can never accept, carrying position.
            toks.push((Tok::Ident(format!("\u{0}{msg}")), l, c));
        }
        Parser { toks, pos: 0, end: (line, col) }
    }

    fn here(&self) -> (usize, usize) {
        self.toks.get(self.pos).map_or(self.end, |&(_, l, c)| (l, c))
    }

    fn fail<S: Into<String>>(&self, msg: S) -> CoreError {
        let (line, col) = self.here();
        let mut msg = msg.into();
        if let Some((Tok::Ident(s), _, _)) = self.toks.get(self.pos) {
            if let Some(stripped) = s.strip_prefix('\u{0}') {
                msg = stripped.to_string();
            }
        }
        CoreError::Parse { line, col, msg }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _, _)| t)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<()> {
        if self.peek() == Some(&t) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.fail(format!("expected {what}")))
        }
    }

    fn parse_all(&mut self) -> Result<Expr> {
        let e = self.expr()?;
        if self.pos != self.toks.len() {
            return Err(self.fail("trailing input"));
        }
        Ok(e)
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        if self.peek() == Some(&Tok::Minus) {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => match name.as_str() {
                "t" => Ok(Expr::Time),
                "feat" => {
                    self.expect(Tok::LBracket, "`[` after feat")?;
                    let idx = match self.next() {
                        Some(Tok::Num(v)) if v >= 0.0 && v.fract() == 0.0 => v as usize,
                        _ => return Err(self.fail("feat index must be a nonnegative integer")),
                    };
                    self.expect(Tok::RBracket, "`]`")?;
                    Ok(Expr::Feature(idx))
                }
                "ctrl" => {
                    self.expect(Tok::LBracket, "`[` after ctrl")?;
                    let id = match self.next() {
                        Some(Tok::Ident(s)) if !s.starts_with('\u{0}') => s,
                        _ => return Err(self.fail("ctrl name must be an identifier")),
                    };
                    self.expect(Tok::RBracket, "`]`")?;
                    Ok(Expr::CtrlConst(id))
                }
                "min" | "max" => {
                    self.expect(Tok::LParen, "`(`")?;
                    let a = self.expr()?;
                    self.expect(Tok::Comma, "`,`")?;
                    let b = self.expr()?;
                    self.expect(Tok::RParen, "`)`")?;
                    Ok(if name == "min" {
                        Expr::Min(Box::new(a), Box::new(b))
                    } else {
                        Expr::Max(Box::new(a), Box::new(b))
                    })
                }
                "exp" | "sin" | "abs" => {
                    self.expect(Tok::LParen, "`(`")?;
                    let a = self.expr()?;
                    self.expect(Tok::RParen, "`)`")?;
                    Ok(match name.as_str() {
                        "exp" => Expr::Exp(Box::new(a)),
                        "sin" => Expr::Sin(Box::new(a)),
                        _ => Expr::Abs(Box::new(a)),
                    })
                }
                _ => {
                    self.pos -= 1;
                    Err(self.fail(format!("unknown identifier `{name}`")))
                }
            },
            _ => {
                if self.pos > 0 {
                    self.pos -= 1;
                }
                Err(self.fail("expected an expression"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx<'a>(t: f64, feats: &'a [f64], tbl: &'a BTreeMap<String, f64>) -> EvalCtx<'a, f64> {
        EvalCtx { time: t, feats, ctrl: tbl }
    }

    #[test]
    fn arithmetic_and_precedence() {
        let tbl = BTreeMap::new();
        let e = Expr::parse("1+2*3-4/2").unwrap();
        assert_eq!(e.eval(&ctx(0.0, &[], &tbl)).unwrap(), 5.0);
        let e = Expr::parse("-(2+1)*2").unwrap();
        assert_eq!(e.eval(&ctx(0.0, &[], &tbl)).unwrap(), -6.0);
    }

    #[test]
    fn features_time_and_ctrl() {
        let mut tbl = BTreeMap::new();
        tbl.insert("rate".to_string(), 2.5);
        let e = Expr::parse("min(feat[0]*feat[0],4)+ctrl[rate]*t").unwrap();
        assert_eq!(e.eval(&ctx(2.0, &[3.0], &tbl)).unwrap(), 4.0 + 5.0);
        assert_eq!(e.max_feature_index(), Some(0));
        assert_eq!(e.ctrl_names(), vec!["rate".to_string()]);
    }

    #[test]
    fn functions() {
        let tbl = BTreeMap::new();
        let e = Expr::parse("exp(0)+sin(0)+abs(-2)+max(1,2)").unwrap();
        assert_eq!(e.eval(&ctx(0.0, &[], &tbl)).unwrap(), 5.0);
    }

    #[test]
    fn division_by_zero_errors() {
        let tbl = BTreeMap::new();
        let e = Expr::parse("1/(t-1)").unwrap();
        assert!(e.eval(&ctx(1.0, &[], &tbl)).is_err());
        assert!(e.eval(&ctx(0.0, &[], &tbl)).is_ok());
    }

    #[test]
    fn parse_errors_carry_position() {
        match Expr::parse("1+\n  $") {
            Err(CoreError::Parse { line, col, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(col, 3);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(Expr::parse("feat[x]").is_err());
        assert!(Expr::parse("bogus(1)").is_err());
        assert!(Expr::parse("1+").is_err());
        assert!(Expr::parse("1 2").is_err());
    }

    #[test]
    fn canonical_display_round_trips() {
        for src in ["1+2*3", "min(feat[1], max(t,-2))", "ctrl[a]/(t+1)", "-abs(sin(t))"] {
            let e = Expr::parse(src).unwrap();
            let canon = e.to_string();
            let e2 = Expr::parse(&canon).unwrap();
            assert_eq!(e2.to_string(), canon);
            assert_eq!(e, e2);
        }
    }

    #[test]
    fn evaluates_generically() {
        let tbl = BTreeMap::new();
        let e = Expr::parse("t*t+1").unwrap();
        let c = EvalCtx { time: 2.0f32, feats: &[], ctrl: &tbl };
        assert_eq!(e.eval(&c).unwrap(), 5.0f32);
    }
}
