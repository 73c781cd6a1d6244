//! Recursive-descent parser for scalar expressions and vector fields.
//!
//! Grammar (whitespace ignored between tokens):
//!
//! ```text
//! expr      := term { ("+" | "-") term }
//! term      := unary { ("*" | "/") unary }
//! unary     := "-" unary | postfix
//! postfix   := primary [ "^" exponent ]
//! exponent  := ["-"] number | "(" ["-"] number [ "/" ["-"] number ] ")"
//! primary   := number | ident | call | "(" expr ")"
//! call      := ("sin"|"cos"|"exp"|"ln"|"sqrt"|"atan") "(" expr ")"
//!            | "piecewise" "(" expr (">="|"<=") expr "," expr "," expr ")"
//! ident     := coordinate name | "t"
//! number    := decimal float literal (digits, optional ".", optional e/E exponent)
//! ```
//!
//! Errors carry the byte offset of the offending token; unknown identifiers
//! are reported by name.

use std::fmt;

use super::{CoordSystem, ScalarExpr, VectorFieldExpr};

/// Parse failure with the byte offset where it happened.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParseErrorKind {
    UnexpectedChar(char),
    BadNumber,
    UnknownIdent(String),
    UnknownFunction(String),
    Expected { what: &'static str, found: String },
    UnexpectedEnd { expected: &'static str },
    BadExponent,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "parse error at byte {}: ", self.offset)?;
        match &self.kind {
            ParseErrorKind::UnexpectedChar(c) => write!(f, "unexpected character `{c}`"),
            ParseErrorKind::BadNumber => write!(f, "malformed number literal"),
            ParseErrorKind::UnknownIdent(name) => write!(f, "unknown identifier `{name}`"),
            ParseErrorKind::UnknownFunction(name) => write!(f, "unknown function `{name}`"),
            ParseErrorKind::Expected { what, found } => {
                write!(f, "expected {what}, found `{found}`")
            }
            ParseErrorKind::UnexpectedEnd { expected } => {
                write!(f, "unexpected end of input, expected {expected}")
            }
            ParseErrorKind::BadExponent => {
                write!(f, "exponent must be a constant integer or rational literal")
            }
        }
    }
}

impl std::error::Error for ParseError {}

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
    Ge,
    Le,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(v) => write!(f, "{v}"),
            Tok::Ident(s) => write!(f, "{s}"),
            Tok::Plus => write!(f, "+"),
            Tok::Minus => write!(f, "-"),
            Tok::Star => write!(f, "*"),
            Tok::Slash => write!(f, "/"),
            Tok::Caret => write!(f, "^"),
            Tok::LParen => write!(f, "("),
            Tok::RParen => write!(f, ")"),
            Tok::Comma => write!(f, ","),
            Tok::Ge => write!(f, ">="),
            Tok::Le => write!(f, "<="),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                toks.push((Tok::Plus, i));
                i += 1;
            }
            '-' => {
                toks.push((Tok::Minus, i));
                i += 1;
            }
            '*' => {
                toks.push((Tok::Star, i));
                i += 1;
            }
            '/' => {
                toks.push((Tok::Slash, i));
                i += 1;
            }
            '^' => {
                toks.push((Tok::Caret, i));
                i += 1;
            }
            '(' => {
                toks.push((Tok::LParen, i));
                i += 1;
            }
            ')' => {
                toks.push((Tok::RParen, i));
                i += 1;
            }
            ',' => {
                toks.push((Tok::Comma, i));
                i += 1;
            }
            '>' | '<' => {
                if i + 1 < bytes.len() && bytes[i + 1] as char == '=' {
                    toks.push((if c == '>' { Tok::Ge } else { Tok::Le }, i));
                    i += 2;
                } else {
                    return Err(ParseError {
                        offset: i,
                        kind: ParseErrorKind::UnexpectedChar(c),
                    });
                }
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && matches!(bytes[i] as char, '0'..='9' | '.') {
                    i += 1;
                }
                // optional exponent part: e.g. 1e-3, 2.5E+4
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
                let v: f64 = text.parse().map_err(|_| ParseError {
                    offset: start,
                    kind: ParseErrorKind::BadNumber,
                })?;
                toks.push((Tok::Num(v), start));
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] as char == '_')
                {
                    i += 1;
                }
                toks.push((Tok::Ident(src[start..i].to_string()), start));
            }
            _ => {
                return Err(ParseError {
                    offset: i,
                    kind: ParseErrorKind::UnexpectedChar(c),
                })
            }
        }
    }
    Ok(toks)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    coords: &'a CoordSystem,
    end: usize,
}

const FUNCTIONS: &[&str] = &["sin", "cos", "exp", "ln", "sqrt", "atan"];

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(_, o)| *o).unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: &Tok, what: &'static str) -> Result<(), ParseError> {
        match self.peek() {
            Some(t) if t == want => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => Err(ParseError {
                offset: self.offset(),
                kind: ParseErrorKind::Expected {
                    what,
                    found: t.to_string(),
                },
            }),
            None => Err(ParseError {
                offset: self.end,
                kind: ParseErrorKind::UnexpectedEnd { expected: what },
            }),
        }
    }

    fn expr(&mut self) -> Result<ScalarExpr, ParseError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    acc = ScalarExpr::add(acc, self.term()?);
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    acc = ScalarExpr::sub(acc, self.term()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<ScalarExpr, ParseError> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    acc = ScalarExpr::mul(acc, self.unary()?);
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    acc = ScalarExpr::div(acc, self.unary()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<ScalarExpr, ParseError> {
        if matches!(self.peek(), Some(Tok::Minus)) {
            self.pos += 1;
            return Ok(ScalarExpr::neg(self.unary()?));
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<ScalarExpr, ParseError> {
        let base = self.primary()?;
        if matches!(self.peek(), Some(Tok::Caret)) {
            self.pos += 1;
            let r = self.exponent()?;
            return Ok(ScalarExpr::powc(base, r));
        }
        Ok(base)
    }

    /// Constant exponent: `2`, `-3`, `2.5`, `(3/2)`, `(-1/2)`, `(0.5)`.
    fn exponent(&mut self) -> Result<f64, ParseError> {
        let off = self.offset();
        let bad = |off| ParseError {
            offset: off,
            kind: ParseErrorKind::BadExponent,
        };
        match self.bump() {
            Some(Tok::Num(v)) => Ok(v),
            Some(Tok::Minus) => match self.bump() {
                Some(Tok::Num(v)) => Ok(-v),
                _ => Err(bad(off)),
            },
            Some(Tok::LParen) => {
                let mut sign = 1.0;
                if matches!(self.peek(), Some(Tok::Minus)) {
                    self.pos += 1;
                    sign = -1.0;
                }
                let num = match self.bump() {
                    Some(Tok::Num(v)) => sign * v,
                    _ => return Err(bad(off)),
                };
                let value = if matches!(self.peek(), Some(Tok::Slash)) {
                    self.pos += 1;
                    let mut dsign = 1.0;
                    if matches!(self.peek(), Some(Tok::Minus)) {
                        self.pos += 1;
                        dsign = -1.0;
                    }
                    let den = match self.bump() {
                        Some(Tok::Num(v)) => dsign * v,
                        _ => return Err(bad(off)),
                    };
                    if den == 0.0 {
                        return Err(bad(off));
                    }
                    num / den
                } else {
                    num
                };
                self.expect(&Tok::RParen, "`)` closing the exponent")?;
                Ok(value)
            }
            _ => Err(bad(off)),
        }
    }

    fn primary(&mut self) -> Result<ScalarExpr, ParseError> {
        let off = self.offset();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(ScalarExpr::Const(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(&Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                let is_call = matches!(self.peek(), Some(Tok::LParen));
                if is_call {
                    if name == "piecewise" {
                        return self.piecewise();
                    }
                    if FUNCTIONS.contains(&name.as_str()) {
                        self.pos += 1; // consume "("
                        let arg = self.expr()?;
                        self.expect(&Tok::RParen, "`)` closing the call")?;
                        let f = match name.as_str() {
                            "sin" => ScalarExpr::sin,
                            "cos" => ScalarExpr::cos,
                            "exp" => ScalarExpr::exp,
                            "ln" => ScalarExpr::ln,
                            "sqrt" => ScalarExpr::sqrt,
                            "atan" => ScalarExpr::atan,
                            _ => unreachable!(),
                        };
                        return Ok(f(arg));
                    }
                    return Err(ParseError {
                        offset: off,
                        kind: ParseErrorKind::UnknownFunction(name),
                    });
                }
                if name == "t" {
                    return Ok(ScalarExpr::Time);
                }
                match self.coords.index_of(&name) {
                    Some(i) => Ok(ScalarExpr::Coord(i)),
                    None => Err(ParseError {
                        offset: off,
                        kind: ParseErrorKind::UnknownIdent(name),
                    }),
                }
            }
            Some(t) => Err(ParseError {
                offset: off,
                kind: ParseErrorKind::Expected {
                    what: "a number, identifier, or `(`",
                    found: t.to_string(),
                },
            }),
            None => Err(ParseError {
                offset: self.end,
                kind: ParseErrorKind::UnexpectedEnd {
                    expected: "a number, identifier, or `(`",
                },
            }),
        }
    }

    /// `piecewise(lhs >= rhs, if_ge, if_lt)`; a `<=` guard is normalized by
    /// swapping sides, preserving which branch the breakpoint selects.
    fn piecewise(&mut self) -> Result<ScalarExpr, ParseError> {
        self.expect(&Tok::LParen, "`(` after piecewise")?;
        let lhs = self.expr()?;
        let flipped = match self.peek() {
            Some(Tok::Ge) => false,
            Some(Tok::Le) => true,
            _ => {
                return Err(ParseError {
                    offset: self.offset(),
                    kind: ParseErrorKind::Expected {
                        what: "`>=` or `<=` in the piecewise guard",
                        found: self.peek().map(|t| t.to_string()).unwrap_or_default(),
                    },
                })
            }
        };
        self.pos += 1;
        let rhs = self.expr()?;
        self.expect(&Tok::Comma, "`,` after the guard")?;
        let first = self.expr()?;
        self.expect(&Tok::Comma, "`,` between branches")?;
        let second = self.expr()?;
        self.expect(&Tok::RParen, "`)` closing piecewise")?;
        // `l <= r` means `r >= l`; the first branch is taken when the guard holds.
        Ok(if flipped {
            ScalarExpr::piecewise(rhs, lhs, first, second)
        } else {
            ScalarExpr::piecewise(lhs, rhs, first, second)
        })
    }
}

/// Parses a scalar expression over `coords` and time `t`.
pub fn parse_scalar(src: &str, coords: &CoordSystem) -> Result<ScalarExpr, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        coords,
        end: src.len(),
    };
    let e = p.expr()?;
    if let Some(t) = p.peek() {
        return Err(ParseError {
            offset: p.offset(),
            kind: ParseErrorKind::Expected {
                what: "end of input",
                found: t.to_string(),
            },
        });
    }
    Ok(e)
}

/// Parses one component expression per coordinate.
pub fn parse_vector_field<S: AsRef<str>>(
    components: &[S],
    coords: &CoordSystem,
) -> Result<VectorFieldExpr, ParseError> {
    assert_eq!(
        components.len(),
        coords.dim(),
        "vector field needs exactly one component per coordinate"
    );
    let comps = components
        .iter()
        .map(|s| parse_scalar(s.as_ref(), coords))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VectorFieldExpr::new(comps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords() -> CoordSystem {
        CoordSystem::new(&["x", "y"]).unwrap()
    }

    #[test]
    fn precedence_shape() {
        let c = coords();
        // x + 2*y parses as Add(x, Mul(2, y))
        let e = parse_scalar("x + 2*y", &c).unwrap();
        match e {
            ScalarExpr::Add(a, b) => {
                assert_eq!(*a, ScalarExpr::Coord(0));
                assert!(matches!(*b, ScalarExpr::Mul(..)));
            }
            other => panic!("unexpected shape: {other:?}"),
        }
        // -x^2 is -(x^2)
        let e = parse_scalar("-x^2", &c).unwrap();
        assert!(matches!(e, ScalarExpr::Neg(inner) if matches!(*inner, ScalarExpr::Pow(..))));
    }

    #[test]
    fn exponent_forms() {
        let c = coords();
        for (src, x, want) in [
            ("x^2", 3.0, 9.0),
            ("x^-2", 2.0, 0.25),
            ("x^(3/2)", 4.0, 8.0),
            ("x^(-1/2)", 4.0, 0.5),
            ("x^(0.5)", 9.0, 3.0),
        ] {
            let e = parse_scalar(src, &c).unwrap();
            let v = e.eval(&[x, 0.0], 0.0).unwrap();
            assert!((v - want).abs() < 1e-14, "{src} at {x}: {v} != {want}");
        }
        // non-constant exponents are rejected
        let err = parse_scalar("x^y", &c).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::BadExponent);
    }

    #[test]
    fn unknown_identifier_named_with_offset() {
        let c = coords();
        let err = parse_scalar("x + h1*y", &c).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnknownIdent("h1".into()));
        assert_eq!(err.offset, 4);
        let err = parse_scalar("foo(x)", &c).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnknownFunction("foo".into()));
    }

    #[test]
    fn syntax_error_offsets() {
        let c = coords();
        let err = parse_scalar("x + * y", &c).unwrap_err();
        assert_eq!(err.offset, 4);
        let err = parse_scalar("(x + y", &c).unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::UnexpectedEnd { .. }));
        let err = parse_scalar("x ? y", &c).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnexpectedChar('?'));
        assert_eq!(err.offset, 2);
        let err = parse_scalar("x + y z", &c).unwrap_err();
        assert_eq!(err.offset, 6);
    }

    #[test]
    fn piecewise_both_guard_directions() {
        let c = coords();
        let ge = parse_scalar("piecewise(x >= 1, 10, 20)", &c).unwrap();
        assert_eq!(ge.eval(&[1.0, 0.0], 0.0).unwrap(), 10.0);
        assert_eq!(ge.eval(&[0.5, 0.0], 0.0).unwrap(), 20.0);
        // `x <= 1` selects the first branch exactly where `1 >= x` holds
        let le = parse_scalar("piecewise(x <= 1, 10, 20)", &c).unwrap();
        assert_eq!(le.eval(&[1.0, 0.0], 0.0).unwrap(), 10.0);
        assert_eq!(le.eval(&[1.5, 0.0], 0.0).unwrap(), 20.0);
    }

    #[test]
    fn scientific_notation() {
        let c = coords();
        let e = parse_scalar("1e-3 * x + 2.5E+1", &c).unwrap();
        let v = e.eval(&[2.0, 0.0], 0.0).unwrap();
        assert!((v - (0.002 + 25.0)).abs() < 1e-15);
    }

    #[test]
    fn vector_field_arity_checked() {
        let c = CoordSystem::new(&["x", "y", "z"]).unwrap();
        let f = parse_vector_field(&["0", "1", "x"], &c).unwrap();
        assert_eq!(f.dim(), 3);
    }
}
