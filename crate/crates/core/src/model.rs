//! The `.lag` model definition language: parsing, validation, rendering.
//!
//! Grammar (statements end with `;`, `#` starts a line comment):
//!
//! ```text
//! name "harmonic oscillator";       # optional metadata
//! describe "unit mass, unit spring";
//! dim 1;                            # fibre dimension n, required before L
//! param eps = 0.1;                  # default value optional
//! L = 1/2*qd1^2 - 1/2*q1^2;         # Lagrangian over t, q<k>, qd<k> only
//! ic rest: t=0, q1=1, qd1=0;        # labeled initial conditions, optional
//! ```
//!
//! Expressions are conventional infix with `^` for powers (exponents must
//! normalize to rational constants), `q<k>`/`qd<k>` for positions and
//! velocities, and `sin`, `cos`, `exp`, `log` as functions. The reserved
//! names `tau` and `p<k>` are rejected inside `L`, which keeps the
//! Lagrangian a function on J¹π. Diagnostics carry 1-based line:col
//! positions.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_traits::Zero;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{Expr, Rational};

/// Parsed and validated problem definition.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub n: u32,
    pub lagrangian: Expr,
    pub params: BTreeMap<String, Option<f64>>,
    pub initial_conditions: Vec<InitialCondition>,
    pub name: Option<String>,
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialCondition {
    pub label: String,
    pub t0: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

impl SystemSpec {
    /// Parameter bindings from declared defaults (undeclared-default params
    /// must be bound by the caller before evaluation).
    pub fn default_params(&self) -> BTreeMap<String, f64> {
        self.params
            .iter()
            .filter_map(|(k, v)| v.map(|x| (k.clone(), x)))
            .collect()
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| "unnamed model".to_string())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{line}:{col}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

impl ParseError {
    fn new(line: usize, col: usize, message: impl Into<String>) -> Self {
        ParseError { line, col, message: message.into() }
    }

    /// `file:line:col: message` shape for stderr diagnostics.
    pub fn with_file(&self, file: &str) -> String {
        format!("{}:{}:{}: {}", file, self.line, self.col, self.message)
    }
}

// ----- lexer -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num { value: Rational, float: f64 },
    Str(String),
    Sym(char),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    let mut line = 1usize;
    let mut col = 1usize;
    let mut chars = src.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c == '\n' {
            chars.next();
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            chars.next();
            col += 1;
            continue;
        }
        if c == '#' {
            while let Some(&c2) = chars.peek() {
                if c2 == '\n' {
                    break;
                }
                chars.next();
                col += 1;
            }
            continue;
        }
        let (tline, tcol) = (line, col);
        if c.is_ascii_digit() || (c == '.' && false) {
            let mut raw = String::new();
            while let Some(&c2) = chars.peek() {
                if c2.is_ascii_digit() {
                    raw.push(c2);
                    chars.next();
                    col += 1;
                } else {
                    break;
                }
            }
            if chars.peek() == Some(&'.') {
                raw.push('.');
                chars.next();
                col += 1;
                while let Some(&c2) = chars.peek() {
                    if c2.is_ascii_digit() {
                        raw.push(c2);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
            }
            if matches!(chars.peek(), Some('e') | Some('E')) {
                let mut lookahead = chars.clone();
                lookahead.next();
                let sign = matches!(lookahead.peek(), Some('+') | Some('-'));
                if sign {
                    lookahead.next();
                }
                if matches!(lookahead.peek(), Some(d) if d.is_ascii_digit()) {
                    raw.push(chars.next().unwrap());
                    col += 1;
                    if sign {
                        raw.push(chars.next().unwrap());
                        col += 1;
                    }
                    while let Some(&c2) = chars.peek() {
                        if c2.is_ascii_digit() {
                            raw.push(c2);
                            chars.next();
                            col += 1;
                        } else {
                            break;
                        }
                    }
                }
            }
            let value = rational_from_literal(&raw).ok_or_else(|| {
                ParseError::new(tline, tcol, format!("malformed number `{raw}`"))
            })?;
            let float: f64 = raw.parse().map_err(|_| {
                ParseError::new(tline, tcol, format!("malformed number `{raw}`"))
            })?;
            out.push(Token { tok: Tok::Num { value, float }, line: tline, col: tcol });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let mut raw = String::new();
            while let Some(&c2) = chars.peek() {
                if c2.is_ascii_alphanumeric() || c2 == '_' {
                    raw.push(c2);
                    chars.next();
                    col += 1;
                } else {
                    break;
                }
            }
            out.push(Token { tok: Tok::Ident(raw), line: tline, col: tcol });
            continue;
        }
        if c == '"' {
            chars.next();
            col += 1;
            let mut raw = String::new();
            let mut closed = false;
            for c2 in chars.by_ref() {
                col += 1;
                if c2 == '"' {
                    closed = true;
                    break;
                }
                if c2 == '\n' {
                    break;
                }
                raw.push(c2);
            }
            if !closed {
                return Err(ParseError::new(tline, tcol, "unterminated string literal"));
            }
            out.push(Token { tok: Tok::Str(raw), line: tline, col: tcol });
            continue;
        }
        if "+-*/^()=;:,".contains(c) {
            chars.next();
            col += 1;
            out.push(Token { tok: Tok::Sym(c), line: tline, col: tcol });
            continue;
        }
        return Err(ParseError::new(tline, tcol, format!("unexpected character `{c}`")));
    }
    Ok(out)
}

/// Exact rational for an unsigned decimal literal with optional exponent.
fn rational_from_literal(raw: &str) -> Option<Rational> {
    let (mantissa, exp) = match raw.find(['e', 'E']) {
        Some(i) => (&raw[..i], raw[i + 1..].parse::<i64>().ok()?),
        None => (raw, 0i64),
    };
    let (int_part, frac_part) = match mantissa.find('.') {
        Some(i) => (&mantissa[..i], &mantissa[i + 1..]),
        None => (mantissa, ""),
    };
    let digits: String = format!("{int_part}{frac_part}");
    if digits.is_empty() {
        return None;
    }
    let numer: BigInt = digits.parse().ok()?;
    let shift = exp - frac_part.len() as i64;
    let ten = BigInt::from(10);
    Some(if shift >= 0 {
        Rational::from_integer(numer * ten.pow(shift as u32))
    } else {
        Rational::new(numer, ten.pow((-shift) as u32))
    })
}

// ----- parser ----------------------------------------------------------------

struct Parser<'a> {
    toks: &'a [Token],
    pos: usize,
    eof_line: usize,
    eof_col: usize,
    n: Option<u32>,
    params: BTreeMap<String, Option<f64>>,
    in_lagrangian: bool,
}

type PResult<T> = Result<T, ParseError>;

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn here(&self) -> (usize, usize) {
        match self.peek() {
            Some(t) => (t.line, t.col),
            None => (self.eof_line, self.eof_col),
        }
    }

    fn err_here(&self, msg: impl Into<String>) -> ParseError {
        let (l, c) = self.here();
        ParseError::new(l, c, msg)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect_sym(&mut self, sym: char) -> PResult<()> {
        match self.peek() {
            Some(Token { tok: Tok::Sym(c), .. }) if *c == sym => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err_here(format!("expected `{sym}`"))),
        }
    }

    fn eat_sym(&mut self, sym: char) -> bool {
        if matches!(self.peek(), Some(Token { tok: Tok::Sym(c), .. }) if *c == sym) {
            self.pos += 1;
            return true;
        }
        false
    }

    fn expect_ident(&mut self, what: &str) -> PResult<(String, usize, usize)> {
        match self.peek().cloned() {
            Some(Token { tok: Tok::Ident(s), line, col }) => {
                self.pos += 1;
                Ok((s, line, col))
            }
            _ => Err(self.err_here(format!("expected {what}"))),
        }
    }

    fn require_n(&self, line: usize, col: usize) -> PResult<u32> {
        self.n.ok_or_else(|| ParseError::new(line, col, "`dim` must be declared first"))
    }

    // -- expressions --

    fn parse_expr(&mut self) -> PResult<Expr> {
        let mut acc = self.parse_term()?;
        loop {
            if self.eat_sym('+') {
                let rhs = self.parse_term()?;
                acc = acc + rhs;
            } else if self.eat_sym('-') {
                let rhs = self.parse_term()?;
                acc = acc - rhs;
            } else {
                return Ok(acc);
            }
        }
    }

    fn parse_term(&mut self) -> PResult<Expr> {
        let mut acc = self.parse_unary()?;
        loop {
            if self.eat_sym('*') {
                let rhs = self.parse_unary()?;
                acc = acc * rhs;
            } else if self.eat_sym('/') {
                let rhs = self.parse_unary()?;
                acc = acc / rhs;
            } else {
                return Ok(acc);
            }
        }
    }

    fn parse_unary(&mut self) -> PResult<Expr> {
        if self.eat_sym('-') {
            return Ok(-self.parse_unary()?);
        }
        self.parse_power()
    }

    fn parse_power(&mut self) -> PResult<Expr> {
        let base = self.parse_primary()?;
        if self.eat_sym('^') {
            let (eline, ecol) = self.here();
            let exponent = self.parse_unary()?;
            let r = exponent.as_rational().cloned().ok_or_else(|| {
                ParseError::new(eline, ecol, "exponent must be a rational constant")
            })?;
            return Ok(base.pow(r));
        }
        Ok(base)
    }

    fn parse_primary(&mut self) -> PResult<Expr> {
        match self.next() {
            Some(Token { tok: Tok::Num { value, .. }, .. }) => Ok(Expr::num(value)),
            Some(Token { tok: Tok::Sym('('), .. }) => {
                let e = self.parse_expr()?;
                self.expect_sym(')')?;
                Ok(e)
            }
            Some(Token { tok: Tok::Ident(name), line, col }) => {
                if matches!(name.as_str(), "sin" | "cos" | "exp" | "log") {
                    self.expect_sym('(')?;
                    let arg = self.parse_expr()?;
                    self.expect_sym(')')?;
                    return Ok(match name.as_str() {
                        "sin" => arg.sin(),
                        "cos" => arg.cos(),
                        "exp" => arg.exp(),
                        _ => arg.log(),
                    });
                }
                self.resolve_symbol(&name, line, col)
            }
            Some(t) => Err(ParseError::new(t.line, t.col, "expected expression")),
            None => Err(self.err_here("unexpected end of input in expression")),
        }
    }

    fn resolve_symbol(&self, name: &str, line: usize, col: usize) -> PResult<Expr> {
        if name == "t" {
            return Ok(Expr::t());
        }
        if name == "tau" {
            if self.in_lagrangian {
                return Err(ParseError::new(line, col, "tau coordinate not allowed in L"));
            }
            return Ok(Expr::tau());
        }
        if let Some(kind_and_index) = parse_coord_name(name) {
            let (kind, a) = kind_and_index;
            let n = self.require_n(line, col)?;
            if a < 1 || a > n {
                return Err(ParseError::new(
                    line,
                    col,
                    format!("coordinate index {a} out of range for dim {n}"),
                ));
            }
            return match kind {
                CoordKind::Position => Ok(Expr::q(a)),
                CoordKind::Velocity => Ok(Expr::qd(a)),
                CoordKind::Momentum => {
                    if self.in_lagrangian {
                        Err(ParseError::new(line, col, "momentum coordinate not allowed in L"))
                    } else {
                        Ok(Expr::p(a))
                    }
                }
            };
        }
        if self.params.contains_key(name) {
            return Ok(Expr::param(name));
        }
        Err(ParseError::new(line, col, format!("undeclared symbol `{name}`")))
    }

    // -- statements --

    fn parse_signed_float(&mut self) -> PResult<f64> {
        let neg = self.eat_sym('-');
        match self.next() {
            Some(Token { tok: Tok::Num { float, .. }, .. }) => {
                Ok(if neg { -float } else { float })
            }
            _ => Err(self.err_here("expected number")),
        }
    }
}

enum CoordKind {
    Position,
    Velocity,
    Momentum,
}

/// Recognize `q<k>`, `qd<k>`, `p<k>` shapes; returns the kind and index.
fn parse_coord_name(name: &str) -> Option<(CoordKind, u32)> {
    let (kind, digits) = if let Some(rest) = name.strip_prefix("qd") {
        (CoordKind::Velocity, rest)
    } else if let Some(rest) = name.strip_prefix('q') {
        (CoordKind::Position, rest)
    } else {
        let rest = name.strip_prefix('p')?;
        (CoordKind::Momentum, rest)
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse::<u32>().ok().map(|a| (kind, a))
}

fn reserved_name(name: &str) -> bool {
    matches!(name, "t" | "tau" | "sin" | "cos" | "exp" | "log")
        || parse_coord_name(name).is_some()
}

/// Parse a textual system definition into a validated [`SystemSpec`].
pub fn parse_system(source: &str) -> Result<SystemSpec, ParseError> {
    let toks = lex(source)?;
    let (eof_line, eof_col) = {
        let mut line = 1usize;
        let mut col = 1usize;
        for c in source.chars() {
            if c == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
        }
        (line, col)
    };
    let mut p = Parser {
        toks: &toks,
        pos: 0,
        eof_line,
        eof_col,
        n: None,
        params: BTreeMap::new(),
        in_lagrangian: false,
    };

    let mut lagrangian: Option<Expr> = None;
    let mut ics: Vec<InitialCondition> = Vec::new();
    let mut name: Option<String> = None;
    let mut description: Option<String> = None;

    while p.peek().is_some() {
        let (kw, line, col) = p.expect_ident("statement keyword")?;
        match kw.as_str() {
            "dim" => {
                if p.n.is_some() {
                    return Err(ParseError::new(line, col, "duplicate `dim` declaration"));
                }
                let v = match p.next() {
                    Some(Token { tok: Tok::Num { value, .. }, line, col }) => {
                        if !value.is_integer() || value.numer().is_zero() || value < Rational::from_integer(1.into()) {
                            return Err(ParseError::new(line, col, "dim must be a positive integer"));
                        }
                        value.numer().try_into().map_err(|_| {
                            ParseError::new(line, col, "dim out of range")
                        })?
                    }
                    _ => return Err(p.err_here("expected fibre dimension after `dim`")),
                };
                p.n = Some(v);
                p.expect_sym(';')?;
            }
            "param" => {
                let (pname, pline, pcol) = p.expect_ident("parameter name")?;
                if reserved_name(&pname) {
                    return Err(ParseError::new(
                        pline,
                        pcol,
                        format!("`{pname}` is a reserved coordinate or function name"),
                    ));
                }
                if p.params.contains_key(&pname) {
                    return Err(ParseError::new(pline, pcol, format!("duplicate parameter `{pname}`")));
                }
                let default = if p.eat_sym('=') { Some(p.parse_signed_float()?) } else { None };
                p.params.insert(pname, default);
                p.expect_sym(';')?;
            }
            "L" => {
                if lagrangian.is_some() {
                    return Err(ParseError::new(line, col, "duplicate `L` definition"));
                }
                p.require_n(line, col)?;
                p.expect_sym('=')?;
                p.in_lagrangian = true;
                let e = p.parse_expr()?;
                p.in_lagrangian = false;
                p.expect_sym(';')?;
                lagrangian = Some(e);
            }
            "ic" => {
                let n = p.require_n(line, col)?;
                let (label, lline, lcol) = p.expect_ident("ic label")?;
                if ics.iter().any(|ic| ic.label == label) {
                    return Err(ParseError::new(lline, lcol, format!("duplicate ic label `{label}`")));
                }
                p.expect_sym(':')?;
                let mut t0: Option<f64> = None;
                let mut q: Vec<Option<f64>> = vec![None; n as usize];
                let mut qd: Vec<Option<f64>> = vec![None; n as usize];
                loop {
                    let (cname, cline, ccol) = p.expect_ident("coordinate name")?;
                    p.expect_sym('=')?;
                    let v = p.parse_signed_float()?;
                    if cname == "t" {
                        if t0.replace(v).is_some() {
                            return Err(ParseError::new(cline, ccol, "duplicate `t` in ic"));
                        }
                    } else if let Some((kind, a)) = parse_coord_name(&cname) {
                        if a < 1 || a > n {
                            return Err(ParseError::new(
                                cline,
                                ccol,
                                format!("coordinate index {a} out of range for dim {n}"),
                            ));
                        }
                        let slot = match kind {
                            CoordKind::Position => &mut q[(a - 1) as usize],
                            CoordKind::Velocity => &mut qd[(a - 1) as usize],
                            CoordKind::Momentum => {
                                return Err(ParseError::new(
                                    cline,
                                    ccol,
                                    "initial conditions fix (t, q, qd); momenta are derived",
                                ))
                            }
                        };
                        if slot.replace(v).is_some() {
                            return Err(ParseError::new(cline, ccol, format!("duplicate `{cname}` in ic")));
                        }
                    } else {
                        return Err(ParseError::new(cline, ccol, format!("unknown ic coordinate `{cname}`")));
                    }
                    if !p.eat_sym(',') {
                        break;
                    }
                }
                p.expect_sym(';')?;
                let missing = |what: &str| {
                    ParseError::new(lline, lcol, format!("ic `{label}` missing `{what}`"))
                };
                let t0 = t0.ok_or_else(|| missing("t"))?;
                let q: Vec<f64> = q
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| v.ok_or_else(|| missing(&format!("q{}", i + 1))))
                    .collect::<Result<_, _>>()?;
                let qd: Vec<f64> = qd
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| v.ok_or_else(|| missing(&format!("qd{}", i + 1))))
                    .collect::<Result<_, _>>()?;
                ics.push(InitialCondition { label, t0, q, qd });
            }
            "name" | "describe" => {
                let text = match p.next() {
                    Some(Token { tok: Tok::Str(s), .. }) => s,
                    _ => return Err(p.err_here(format!("expected string literal after `{kw}`"))),
                };
                if kw == "name" {
                    if name.replace(text).is_some() {
                        return Err(ParseError::new(line, col, "duplicate `name`"));
                    }
                } else if description.replace(text).is_some() {
                    return Err(ParseError::new(line, col, "duplicate `describe`"));
                }
                p.expect_sym(';')?;
            }
            other => {
                return Err(ParseError::new(
                    line,
                    col,
                    format!("unknown statement `{other}` (expected dim, param, L, ic, name, describe)"),
                ))
            }
        }
    }

    let n = p.n.ok_or_else(|| p.err_here("missing `dim` declaration"))?;
    let lagrangian = lagrangian.ok_or_else(|| p.err_here("missing `L` definition"))?;
    Ok(SystemSpec {
        n,
        lagrangian,
        params: p.params,
        initial_conditions: ics,
        name,
        description,
    })
}

/// Render a spec back to DSL text; `parse_system(render_system(s)) == s`.
pub fn render_system(spec: &SystemSpec) -> String {
    let mut out = String::new();
    use fmt::Write;
    if let Some(name) = &spec.name {
        writeln!(out, "name \"{name}\";").unwrap();
    }
    if let Some(desc) = &spec.description {
        writeln!(out, "describe \"{desc}\";").unwrap();
    }
    writeln!(out, "dim {};", spec.n).unwrap();
    for (pname, default) in &spec.params {
        match default {
            Some(v) => writeln!(out, "param {pname} = {v};").unwrap(),
            None => writeln!(out, "param {pname};").unwrap(),
        }
    }
    writeln!(out, "L = {};", spec.lagrangian).unwrap();
    for ic in &spec.initial_conditions {
        write!(out, "ic {}: t={}", ic.label, ic.t0).unwrap();
        for (i, v) in ic.q.iter().enumerate() {
            write!(out, ", q{}={}", i + 1, v).unwrap();
        }
        for (i, v) in ic.qd.iter().enumerate() {
            write!(out, ", qd{}={}", i + 1, v).unwrap();
        }
        writeln!(out, ";").unwrap();
    }
    out
}
