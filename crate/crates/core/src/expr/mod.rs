//! Scalar and vector-field expressions: a small symbolic layer with exact
//! differentiation, used to define coordinate frames, metrics, and control
//! signals.
//!
//! Expressions are trees over named coordinates, time `t`, arithmetic,
//! a fixed set of elementary functions, constant-exponent powers, and a
//! guarded `piecewise` node with lazy branch evaluation. Smart constructors
//! fold constant subtrees and drop trivial `0`/`1` factors so that derivative
//! trees stay small; no other rewriting is performed, so the shape of a
//! derivative is predictable from the shape of its input.

mod parse;

pub use parse::{parse_scalar, parse_vector_field, ParseError, ParseErrorKind};

use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Named coordinates of a state space. `t` is reserved for time and may not
/// be used as a coordinate name, nor may function names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordSystem {
    names: Vec<String>,
}

/// Names that the parser treats specially and therefore cannot be coordinates.
const RESERVED: &[&str] = &["t", "sin", "cos", "exp", "ln", "sqrt", "atan", "piecewise"];

impl CoordSystem {
    /// Builds a coordinate system, rejecting empty, duplicate, or reserved names.
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self, String> {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        if names.is_empty() {
            return Err("coordinate list is empty".into());
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(format!("coordinate {i} has an empty name"));
            }
            if RESERVED.contains(&n.as_str()) {
                return Err(format!("coordinate name `{n}` is reserved"));
            }
            if !n.chars().next().unwrap().is_ascii_alphabetic() && !n.starts_with('_') {
                return Err(format!("coordinate name `{n}` must start with a letter"));
            }
            if !n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(format!("coordinate name `{n}` contains invalid characters"));
            }
            if names[..i].contains(n) {
                return Err(format!("duplicate coordinate name `{n}`"));
            }
        }
        Ok(CoordSystem { names })
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Returns a copy with one extra coordinate appended (used for the
    /// cost-extended state space). Fails if the name collides.
    pub fn extended(&self, extra: &str) -> Result<Self, String> {
        let mut names: Vec<&str> = self.names.iter().map(|s| s.as_str()).collect();
        names.push(extra);
        CoordSystem::new(&names)
    }
}

/// Differentiation variable: a coordinate by index, or time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    Coord(usize),
    Time,
}

/// A scalar expression over coordinates and time.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarExpr {
    Const(f64),
    /// Coordinate by index into the owning [`CoordSystem`].
    Coord(usize),
    Time,
    Neg(Box<ScalarExpr>),
    Add(Box<ScalarExpr>, Box<ScalarExpr>),
    Sub(Box<ScalarExpr>, Box<ScalarExpr>),
    Mul(Box<ScalarExpr>, Box<ScalarExpr>),
    Div(Box<ScalarExpr>, Box<ScalarExpr>),
    /// Power with a constant exponent (integer or rational literal).
    Pow(Box<ScalarExpr>, f64),
    Sin(Box<ScalarExpr>),
    Cos(Box<ScalarExpr>),
    Exp(Box<ScalarExpr>),
    Ln(Box<ScalarExpr>),
    Sqrt(Box<ScalarExpr>),
    Atan(Box<ScalarExpr>),
    /// `if lhs >= rhs { if_ge } else { if_lt }`, with only the selected branch
    /// evaluated. The derivative is taken branch-wise, so at the switching
    /// locus it is the one-sided derivative of the branch the guard selects.
    Piecewise {
        lhs: Box<ScalarExpr>,
        rhs: Box<ScalarExpr>,
        if_ge: Box<ScalarExpr>,
        if_lt: Box<ScalarExpr>,
    },
}

/// Runtime evaluation failure of an expression.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("division by zero")]
    DivByZero,
    #[error("ln of non-positive value {0}")]
    LnNonPositive(f64),
    #[error("sqrt of negative value {0}")]
    SqrtNegative(f64),
    #[error("power domain error: base {base}, exponent {exponent}")]
    PowDomain { base: f64, exponent: f64 },
    #[error("non-finite result in {op}")]
    NonFinite { op: &'static str },
}

fn is_int(r: f64) -> bool {
    r.fract() == 0.0 && r.abs() < 2147483647.0
}

impl ScalarExpr {
    pub fn constant(c: f64) -> Self {
        ScalarExpr::Const(c)
    }

    pub fn coord(i: usize) -> Self {
        ScalarExpr::Coord(i)
    }

    pub fn time() -> Self {
        ScalarExpr::Time
    }

    /// The literal constant value, if the expression is one.
    pub fn as_const(&self) -> Option<f64> {
        match self {
            ScalarExpr::Const(c) => Some(*c),
            _ => None,
        }
    }

    /// True when the expression is the literal constant zero (after the
    /// constructors' folding, exactly cancelling combinations collapse to this).
    pub fn is_zero(&self) -> bool {
        matches!(self, ScalarExpr::Const(c) if *c == 0.0)
    }

    fn is_one(&self) -> bool {
        matches!(self, ScalarExpr::Const(c) if *c == 1.0)
    }

    /// Sum with constant folding and `0 + e -> e`.
    pub fn add(a: ScalarExpr, b: ScalarExpr) -> ScalarExpr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => return ScalarExpr::Const(x + y),
            _ => {}
        }
        if a.is_zero() {
            return b;
        }
        if b.is_zero() {
            return a;
        }
        ScalarExpr::Add(Box::new(a), Box::new(b))
    }

    /// Difference with constant folding, `e - 0 -> e`, `0 - e -> -e`.
    pub fn sub(a: ScalarExpr, b: ScalarExpr) -> ScalarExpr {
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            return ScalarExpr::Const(x - y);
        }
        if b.is_zero() {
            return a;
        }
        if a.is_zero() {
            return ScalarExpr::neg(b);
        }
        ScalarExpr::Sub(Box::new(a), Box::new(b))
    }

    /// Product with constant folding and `0`/`1` factor elimination.
    ///
    /// Dropping a zero factor also drops any domain error the other factor
    /// might raise; derivative trees rely on this pruning to stay small, and
    /// guarded branches keep genuinely singular subterms out of reach.
    pub fn mul(a: ScalarExpr, b: ScalarExpr) -> ScalarExpr {
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            return ScalarExpr::Const(x * y);
        }
        if a.is_zero() || b.is_zero() {
            return ScalarExpr::Const(0.0);
        }
        if a.is_one() {
            return b;
        }
        if b.is_one() {
            return a;
        }
        ScalarExpr::Mul(Box::new(a), Box::new(b))
    }

    /// Quotient; folds only when the constant divisor is nonzero, so a
    /// division-by-zero stays visible at evaluation time. A zero numerator
    /// folds to zero outright (the same pruning as a zero factor in [`mul`]).
    ///
    /// [`mul`]: ScalarExpr::mul
    pub fn div(a: ScalarExpr, b: ScalarExpr) -> ScalarExpr {
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if y != 0.0 {
                return ScalarExpr::Const(x / y);
            }
        }
        if a.is_zero() {
            return ScalarExpr::Const(0.0);
        }
        if b.is_one() {
            return a;
        }
        ScalarExpr::Div(Box::new(a), Box::new(b))
    }

    pub fn neg(a: ScalarExpr) -> ScalarExpr {
        if let Some(x) = a.as_const() {
            return ScalarExpr::Const(-x);
        }
        if let ScalarExpr::Neg(inner) = a {
            return *inner;
        }
        ScalarExpr::Neg(Box::new(a))
    }

    /// Power with a constant exponent; `e^1 -> e`, constant bases fold when
    /// the result is finite.
    pub fn powc(a: ScalarExpr, r: f64) -> ScalarExpr {
        if r == 1.0 {
            return a;
        }
        if let Some(x) = a.as_const() {
            let v = if is_int(r) { x.powi(r as i32) } else { x.powf(r) };
            if v.is_finite() {
                return ScalarExpr::Const(v);
            }
        }
        ScalarExpr::Pow(Box::new(a), r)
    }

    pub fn sin(a: ScalarExpr) -> ScalarExpr {
        if let Some(x) = a.as_const() {
            return ScalarExpr::Const(x.sin());
        }
        ScalarExpr::Sin(Box::new(a))
    }

    pub fn cos(a: ScalarExpr) -> ScalarExpr {
        if let Some(x) = a.as_const() {
            return ScalarExpr::Const(x.cos());
        }
        ScalarExpr::Cos(Box::new(a))
    }

    pub fn exp(a: ScalarExpr) -> ScalarExpr {
        if let Some(x) = a.as_const() {
            let v = x.exp();
            if v.is_finite() {
                return ScalarExpr::Const(v);
            }
        }
        ScalarExpr::Exp(Box::new(a))
    }

    pub fn ln(a: ScalarExpr) -> ScalarExpr {
        if let Some(x) = a.as_const() {
            if x > 0.0 {
                return ScalarExpr::Const(x.ln());
            }
        }
        ScalarExpr::Ln(Box::new(a))
    }

    pub fn sqrt(a: ScalarExpr) -> ScalarExpr {
        if let Some(x) = a.as_const() {
            if x >= 0.0 {
                return ScalarExpr::Const(x.sqrt());
            }
        }
        ScalarExpr::Sqrt(Box::new(a))
    }

    pub fn atan(a: ScalarExpr) -> ScalarExpr {
        if let Some(x) = a.as_const() {
            return ScalarExpr::Const(x.atan());
        }
        ScalarExpr::Atan(Box::new(a))
    }

    pub fn piecewise(lhs: ScalarExpr, rhs: ScalarExpr, if_ge: ScalarExpr, if_lt: ScalarExpr) -> ScalarExpr {
        if let (Some(l), Some(r)) = (lhs.as_const(), rhs.as_const()) {
            return if l >= r { if_ge } else { if_lt };
        }
        ScalarExpr::Piecewise {
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
            if_ge: Box::new(if_ge),
            if_lt: Box::new(if_lt),
        }
    }

    /// Evaluates at state `x` and time `t`. Branches of `piecewise` nodes that
    /// the guard does not select are never evaluated.
    pub fn eval(&self, x: &[f64], t: f64) -> Result<f64, EvalError> {
        use ScalarExpr::*;
        let v = match self {
            Const(c) => *c,
            Coord(i) => x[*i],
            Time => t,
            Neg(a) => -a.eval(x, t)?,
            Add(a, b) => a.eval(x, t)? + b.eval(x, t)?,
            Sub(a, b) => a.eval(x, t)? - b.eval(x, t)?,
            Mul(a, b) => {
                let v = a.eval(x, t)? * b.eval(x, t)?;
                if !v.is_finite() {
                    return Err(EvalError::NonFinite { op: "mul" });
                }
                v
            }
            Div(a, b) => {
                let d = b.eval(x, t)?;
                if d == 0.0 {
                    return Err(EvalError::DivByZero);
                }
                let v = a.eval(x, t)? / d;
                if !v.is_finite() {
                    return Err(EvalError::NonFinite { op: "div" });
                }
                v
            }
            Pow(a, r) => {
                let base = a.eval(x, t)?;
                let v = if is_int(*r) {
                    if base == 0.0 && *r < 0.0 {
                        return Err(EvalError::PowDomain { base, exponent: *r });
                    }
                    base.powi(*r as i32)
                } else {
                    if base < 0.0 || (base == 0.0 && *r < 0.0) {
                        return Err(EvalError::PowDomain { base, exponent: *r });
                    }
                    base.powf(*r)
                };
                if !v.is_finite() {
                    return Err(EvalError::NonFinite { op: "pow" });
                }
                v
            }
            Sin(a) => a.eval(x, t)?.sin(),
            Cos(a) => a.eval(x, t)?.cos(),
            Exp(a) => {
                let v = a.eval(x, t)?.exp();
                if !v.is_finite() {
                    return Err(EvalError::NonFinite { op: "exp" });
                }
                v
            }
            Ln(a) => {
                let arg = a.eval(x, t)?;
                if arg <= 0.0 {
                    return Err(EvalError::LnNonPositive(arg));
                }
                arg.ln()
            }
            Sqrt(a) => {
                let arg = a.eval(x, t)?;
                if arg < 0.0 {
                    return Err(EvalError::SqrtNegative(arg));
                }
                arg.sqrt()
            }
            Atan(a) => a.eval(x, t)?.atan(),
            Piecewise { lhs, rhs, if_ge, if_lt } => {
                if lhs.eval(x, t)? >= rhs.eval(x, t)? {
                    if_ge.eval(x, t)?
                } else {
                    if_lt.eval(x, t)?
                }
            }
        };
        Ok(v)
    }

    /// Exact symbolic partial derivative with respect to `v`.
    ///
    /// `piecewise` guards are differentiated branch-wise with the guard kept
    /// as-is, so the result is the one-sided derivative from the side the
    /// guard assigns to the switching locus.
    pub fn derivative(&self, v: Var) -> ScalarExpr {
        use ScalarExpr::*;
        match self {
            Const(_) => Const(0.0),
            Coord(i) => Const(if v == Var::Coord(*i) { 1.0 } else { 0.0 }),
            Time => Const(if v == Var::Time { 1.0 } else { 0.0 }),
            Neg(a) => ScalarExpr::neg(a.derivative(v)),
            Add(a, b) => ScalarExpr::add(a.derivative(v), b.derivative(v)),
            Sub(a, b) => ScalarExpr::sub(a.derivative(v), b.derivative(v)),
            Mul(a, b) => ScalarExpr::add(
                ScalarExpr::mul(a.derivative(v), (**b).clone()),
                ScalarExpr::mul((**a).clone(), b.derivative(v)),
            ),
            // quotient rule written as a'/b - (a/b)(b'/b): every denominator
            // stays a first power of b under repeated differentiation, where
            // the (a'b - ab')/b^2 form squares it each round and deep
            // derivatives of rational terms underflow near small |b|
            Div(a, b) => ScalarExpr::sub(
                ScalarExpr::div(a.derivative(v), (**b).clone()),
                ScalarExpr::mul(
                    ScalarExpr::div((**a).clone(), (**b).clone()),
                    ScalarExpr::div(b.derivative(v), (**b).clone()),
                ),
            ),
            Pow(a, r) => ScalarExpr::mul(
                ScalarExpr::mul(Const(*r), ScalarExpr::powc((**a).clone(), r - 1.0)),
                a.derivative(v),
            ),
            Sin(a) => ScalarExpr::mul(ScalarExpr::cos((**a).clone()), a.derivative(v)),
            Cos(a) => ScalarExpr::neg(ScalarExpr::mul(ScalarExpr::sin((**a).clone()), a.derivative(v))),
            Exp(a) => ScalarExpr::mul(ScalarExpr::exp((**a).clone()), a.derivative(v)),
            Ln(a) => ScalarExpr::div(a.derivative(v), (**a).clone()),
            Sqrt(a) => ScalarExpr::div(
                a.derivative(v),
                ScalarExpr::mul(Const(2.0), ScalarExpr::sqrt((**a).clone())),
            ),
            Atan(a) => ScalarExpr::div(
                a.derivative(v),
                ScalarExpr::add(Const(1.0), ScalarExpr::powc((**a).clone(), 2.0)),
            ),
            Piecewise { lhs, rhs, if_ge, if_lt } => ScalarExpr::piecewise(
                (**lhs).clone(),
                (**rhs).clone(),
                if_ge.derivative(v),
                if_lt.derivative(v),
            ),
        }
    }

    /// Replaces every occurrence of `t` by `repl` (used for exact linear time
    /// rescaling of control signals).
    pub fn substitute_time(&self, repl: &ScalarExpr) -> ScalarExpr {
        use ScalarExpr::*;
        match self {
            Const(c) => Const(*c),
            Coord(i) => Coord(*i),
            Time => repl.clone(),
            Neg(a) => ScalarExpr::neg(a.substitute_time(repl)),
            Add(a, b) => ScalarExpr::add(a.substitute_time(repl), b.substitute_time(repl)),
            Sub(a, b) => ScalarExpr::sub(a.substitute_time(repl), b.substitute_time(repl)),
            Mul(a, b) => ScalarExpr::mul(a.substitute_time(repl), b.substitute_time(repl)),
            Div(a, b) => ScalarExpr::div(a.substitute_time(repl), b.substitute_time(repl)),
            Pow(a, r) => ScalarExpr::powc(a.substitute_time(repl), *r),
            Sin(a) => ScalarExpr::sin(a.substitute_time(repl)),
            Cos(a) => ScalarExpr::cos(a.substitute_time(repl)),
            Exp(a) => ScalarExpr::exp(a.substitute_time(repl)),
            Ln(a) => ScalarExpr::ln(a.substitute_time(repl)),
            Sqrt(a) => ScalarExpr::sqrt(a.substitute_time(repl)),
            Atan(a) => ScalarExpr::atan(a.substitute_time(repl)),
            Piecewise { lhs, rhs, if_ge, if_lt } => ScalarExpr::piecewise(
                lhs.substitute_time(repl),
                rhs.substitute_time(repl),
                if_ge.substitute_time(repl),
                if_lt.substitute_time(repl),
            ),
        }
    }

    /// Number of AST nodes; used to enforce growth limits in iterated brackets.
    pub fn node_count(&self) -> usize {
        use ScalarExpr::*;
        match self {
            Const(_) | Coord(_) | Time => 1,
            Neg(a) | Sin(a) | Cos(a) | Exp(a) | Ln(a) | Sqrt(a) | Atan(a) => 1 + a.node_count(),
            Pow(a, _) => 1 + a.node_count(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => 1 + a.node_count() + b.node_count(),
            Piecewise { lhs, rhs, if_ge, if_lt } => {
                1 + lhs.node_count() + rhs.node_count() + if_ge.node_count() + if_lt.node_count()
            }
        }
    }

    /// True if the expression mentions `t`.
    pub fn uses_time(&self) -> bool {
        use ScalarExpr::*;
        match self {
            Const(_) | Coord(_) => false,
            Time => true,
            Neg(a) | Sin(a) | Cos(a) | Exp(a) | Ln(a) | Sqrt(a) | Atan(a) | Pow(a, _) => a.uses_time(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => a.uses_time() || b.uses_time(),
            Piecewise { lhs, rhs, if_ge, if_lt } => {
                lhs.uses_time() || rhs.uses_time() || if_ge.uses_time() || if_lt.uses_time()
            }
        }
    }

    /// Largest coordinate index mentioned, if any.
    pub fn max_coord(&self) -> Option<usize> {
        use ScalarExpr::*;
        match self {
            Const(_) | Time => None,
            Coord(i) => Some(*i),
            Neg(a) | Sin(a) | Cos(a) | Exp(a) | Ln(a) | Sqrt(a) | Atan(a) | Pow(a, _) => a.max_coord(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => match (a.max_coord(), b.max_coord()) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, y) => x.or(y),
            },
            Piecewise { lhs, rhs, if_ge, if_lt } => [lhs, rhs, if_ge, if_lt]
                .iter()
                .filter_map(|e| e.max_coord())
                .max(),
        }
    }

    /// Renders with coordinate names from `coords`; `parse_scalar` accepts the
    /// output and evaluates identically.
    pub fn display<'a>(&'a self, coords: &'a CoordSystem) -> DisplayExpr<'a> {
        DisplayExpr { expr: self, coords }
    }
}

/// Precedence levels for printing: additive 1, multiplicative 2, unary 3,
/// power 4, atoms 5.
fn precedence(e: &ScalarExpr) -> u8 {
    use ScalarExpr::*;
    match e {
        Add(..) | Sub(..) => 1,
        Mul(..) | Div(..) => 2,
        Neg(..) => 3,
        Const(c) if *c < 0.0 => 3,
        Pow(..) => 4,
        _ => 5,
    }
}

/// Display adapter returned by [`ScalarExpr::display`].
pub struct DisplayExpr<'a> {
    expr: &'a ScalarExpr,
    coords: &'a CoordSystem,
}

impl fmt::Display for DisplayExpr<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(f, self.expr, self.coords)
    }
}

fn write_child(
    f: &mut fmt::Formatter<'_>,
    child: &ScalarExpr,
    coords: &CoordSystem,
    min_prec: u8,
) -> fmt::Result {
    if precedence(child) < min_prec {
        write!(f, "(")?;
        write_expr(f, child, coords)?;
        write!(f, ")")
    } else {
        write_expr(f, child, coords)
    }
}

fn write_expr(f: &mut fmt::Formatter<'_>, e: &ScalarExpr, coords: &CoordSystem) -> fmt::Result {
    use ScalarExpr::*;
    match e {
        Const(c) => write!(f, "{c:?}"),
        Coord(i) => write!(f, "{}", coords.name(*i)),
        Time => write!(f, "t"),
        Neg(a) => {
            write!(f, "-")?;
            write_child(f, a, coords, 3)
        }
        Add(a, b) => {
            write_child(f, a, coords, 1)?;
            write!(f, " + ")?;
            write_child(f, b, coords, 2)
        }
        Sub(a, b) => {
            write_child(f, a, coords, 1)?;
            write!(f, " - ")?;
            write_child(f, b, coords, 2)
        }
        Mul(a, b) => {
            write_child(f, a, coords, 2)?;
            write!(f, " * ")?;
            write_child(f, b, coords, 3)
        }
        Div(a, b) => {
            write_child(f, a, coords, 2)?;
            write!(f, " / ")?;
            write_child(f, b, coords, 3)
        }
        Pow(a, r) => {
            write_child(f, a, coords, 5)?;
            if is_int(*r) && *r >= 0.0 {
                write!(f, "^{}", *r as i64)
            } else {
                write!(f, "^({r:?})")
            }
        }
        Sin(a) => write_fn(f, "sin", a, coords),
        Cos(a) => write_fn(f, "cos", a, coords),
        Exp(a) => write_fn(f, "exp", a, coords),
        Ln(a) => write_fn(f, "ln", a, coords),
        Sqrt(a) => write_fn(f, "sqrt", a, coords),
        Atan(a) => write_fn(f, "atan", a, coords),
        Piecewise { lhs, rhs, if_ge, if_lt } => {
            write!(f, "piecewise(")?;
            write_expr(f, lhs, coords)?;
            write!(f, " >= ")?;
            write_expr(f, rhs, coords)?;
            write!(f, ", ")?;
            write_expr(f, if_ge, coords)?;
            write!(f, ", ")?;
            write_expr(f, if_lt, coords)?;
            write!(f, ")")
        }
    }
}

fn write_fn(
    f: &mut fmt::Formatter<'_>,
    name: &str,
    arg: &ScalarExpr,
    coords: &CoordSystem,
) -> fmt::Result {
    write!(f, "{name}(")?;
    write_expr(f, arg, coords)?;
    write!(f, ")")
}

/// A vector field on the state space: one scalar component per coordinate.
/// Components may mention `t`, in which case the field is time-dependent.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldExpr {
    pub components: Vec<ScalarExpr>,
}

impl VectorFieldExpr {
    pub fn new(components: Vec<ScalarExpr>) -> Self {
        VectorFieldExpr { components }
    }

    /// The zero field in `dim` coordinates.
    pub fn zero(dim: usize) -> Self {
        VectorFieldExpr {
            components: vec![ScalarExpr::Const(0.0); dim],
        }
    }

    /// The coordinate field `∂/∂x_i` in `dim` coordinates.
    pub fn coordinate(dim: usize, i: usize) -> Self {
        let mut components = vec![ScalarExpr::Const(0.0); dim];
        components[i] = ScalarExpr::Const(1.0);
        VectorFieldExpr { components }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<DVector<f64>, EvalError> {
        let mut out = DVector::zeros(self.components.len());
        for (i, c) in self.components.iter().enumerate() {
            out[i] = c.eval(x, t)?;
        }
        Ok(out)
    }

    /// Symbolic Jacobian: row `i`, column `j` holds `∂(component i)/∂x_j`.
    pub fn jacobian(&self) -> JacobianExpr {
        let n = self.dim();
        let entries = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| self.components[i].derivative(Var::Coord(j)))
                    .collect()
            })
            .collect();
        JacobianExpr { entries }
    }

    /// Component-wise `∂/∂t`.
    pub fn time_derivative(&self) -> VectorFieldExpr {
        VectorFieldExpr {
            components: self
                .components
                .iter()
                .map(|c| c.derivative(Var::Time))
                .collect(),
        }
    }

    /// `Σ coeffs_i * fields_i`, all fields of equal dimension.
    pub fn linear_combination(coeffs: &[ScalarExpr], fields: &[VectorFieldExpr]) -> VectorFieldExpr {
        assert_eq!(coeffs.len(), fields.len());
        assert!(!fields.is_empty());
        let dim = fields[0].dim();
        let mut components = vec![ScalarExpr::Const(0.0); dim];
        for (c, f) in coeffs.iter().zip(fields) {
            assert_eq!(f.dim(), dim);
            for i in 0..dim {
                components[i] = ScalarExpr::add(
                    components[i].clone(),
                    ScalarExpr::mul(c.clone(), f.components[i].clone()),
                );
            }
        }
        VectorFieldExpr { components }
    }

    /// Scales every component by `c`.
    pub fn scale(&self, c: &ScalarExpr) -> VectorFieldExpr {
        VectorFieldExpr {
            components: self
                .components
                .iter()
                .map(|comp| ScalarExpr::mul(c.clone(), comp.clone()))
                .collect(),
        }
    }

    pub fn uses_time(&self) -> bool {
        self.components.iter().any(|c| c.uses_time())
    }

    /// True when every component is the literal constant zero.
    pub fn is_identically_zero(&self) -> bool {
        self.components.iter().all(|c| c.is_zero())
    }

    pub fn node_count(&self) -> usize {
        self.components.iter().map(|c| c.node_count()).sum()
    }

    /// Renders as a comma-separated component list.
    pub fn display_components(&self, coords: &CoordSystem) -> Vec<String> {
        self.components
            .iter()
            .map(|c| c.display(coords).to_string())
            .collect()
    }
}

/// Symbolic Jacobian of a vector field, with a numeric evaluator.
#[derive(Debug, Clone)]
pub struct JacobianExpr {
    pub entries: Vec<Vec<ScalarExpr>>,
}

impl JacobianExpr {
    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<DMatrix<f64>, EvalError> {
        let n = self.entries.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = self.entries[i][j].eval(x, t)?;
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn coords_xy() -> CoordSystem {
        CoordSystem::new(&["x", "y"]).unwrap()
    }

    #[test]
    fn coordinate_names_validated() {
        assert!(CoordSystem::new(&["x", "x"]).is_err());
        assert!(CoordSystem::new(&["t"]).is_err());
        assert!(CoordSystem::new(&["sin"]).is_err());
        assert!(CoordSystem::new(&["2bad"]).is_err());
        assert!(CoordSystem::new(&["x", "y_1"]).is_ok());
    }

    #[test]
    fn eval_basics() {
        let c = coords_xy();
        let e = parse_scalar("x + 2*y", &c).unwrap();
        assert_eq!(e.eval(&[1.0, 3.0], 0.0).unwrap(), 7.0);
        let e = parse_scalar("sin(x)^2 + cos(x)^2", &c).unwrap();
        let v = e.eval(&[0.7, 0.0], 0.0).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn derivative_polynomial_exact() {
        // d/dx (x*y*y + exp(x)) at (0, 2) = y^2 + exp(0) = 5 exactly.
        let c = coords_xy();
        let e = parse_scalar("x*y*y + exp(x)", &c).unwrap();
        let d = e.derivative(Var::Coord(0));
        assert_eq!(d.eval(&[0.0, 2.0], 0.0).unwrap(), 5.0);
    }

    #[test]
    fn derivative_matches_central_differences() {
        let c = coords_xy();
        let exprs = [
            "sin(x)*exp(y) + x^3/(1 + y^2)",
            "sqrt(1 + x^2) * atan(x*y)",
            "ln(1 + x^2) - cos(x - y)",
            "x^(3/2) + y^(-2)",
            "exp(-x^2) * sin(2*y + t)",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for src in exprs {
            let e = parse_scalar(src, &c).unwrap();
            for _ in 0..20 {
                // stay inside every factor's domain
                let x = [rng.gen_range(0.2..1.8), rng.gen_range(0.2..1.8)];
                let t = rng.gen_range(-1.0..1.0);
                for (var, k) in [(Var::Coord(0), 0usize), (Var::Coord(1), 1)] {
                    let exact = e.derivative(var).eval(&x, t).unwrap();
                    let h = 1e-6;
                    let mut xp = x;
                    let mut xm = x;
                    xp[k] += h;
                    xm[k] -= h;
                    let fd = (e.eval(&xp, t).unwrap() - e.eval(&xm, t).unwrap()) / (2.0 * h);
                    assert!(
                        (exact - fd).abs() <= 1e-5 * (1.0 + exact.abs()),
                        "{src}: d/d{k} exact {exact} vs fd {fd}"
                    );
                }
                let exact_t = e.derivative(Var::Time).eval(&x, t).unwrap();
                let h = 1e-6;
                let fd_t = (e.eval(&x, t + h).unwrap() - e.eval(&x, t - h).unwrap()) / (2.0 * h);
                assert!((exact_t - fd_t).abs() <= 1e-5 * (1.0 + exact_t.abs()));
            }
        }
    }

    #[test]
    fn deep_derivatives_of_reciprocal_stay_evaluable_at_small_x() {
        // d^k/dx^k (1/x) = (-1)^k k! x^{-(k+1)}: the closed form is finite at
        // x = 1e-9 for every k here, and the symbolic derivative must agree.
        // A quotient rule that squares denominators each round would build
        // x^(2^k) terms that underflow to an exact zero by k = 6.
        let c = coords_xy();
        let mut e = parse_scalar("1/x", &c).unwrap();
        let x: [f64; 2] = [1e-9, 0.0];
        let mut factorial = 1.0f64;
        for k in 0..=8usize {
            if k > 0 {
                factorial *= k as f64;
            }
            let expect = if k % 2 == 0 { 1.0 } else { -1.0 } * factorial * x[0].powi(-(k as i32) - 1);
            let got = e.eval(&x, 0.0).unwrap();
            assert!(
                (got - expect).abs() <= 1e-10 * expect.abs(),
                "k = {k}: got {got}, expect {expect}"
            );
            e = e.derivative(Var::Coord(0));
        }
    }

    #[test]
    fn derivative_is_linear() {
        let c = coords_xy();
        let f = parse_scalar("sin(x*y) + x^2", &c).unwrap();
        let g = parse_scalar("exp(y) / (1 + x^2)", &c).unwrap();
        let a = 2.75;
        let combo = ScalarExpr::add(
            ScalarExpr::mul(ScalarExpr::Const(a), f.clone()),
            g.clone(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            for var in [Var::Coord(0), Var::Coord(1)] {
                let lhs = combo.derivative(var).eval(&x, 0.0).unwrap();
                let rhs = a * f.derivative(var).eval(&x, 0.0).unwrap()
                    + g.derivative(var).eval(&x, 0.0).unwrap();
                assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
        }
    }

    #[test]
    fn print_parse_round_trip() {
        let c = CoordSystem::new(&["x", "y", "z"]).unwrap();
        let sources = [
            "x + 2*y - z^2",
            "-x^2 * sin(y - z) / (1 + x^2)",
            "piecewise(0 >= x, 0, exp(-1/x)) + sqrt(1 + z^2)",
            "atan(x*y*z) - ln(2 + cos(x))^3",
            "x^(-2) + y^(1/2) * t",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for src in sources {
            let e = parse_scalar(src, &c).unwrap();
            let printed = e.display(&c).to_string();
            let e2 = parse_scalar(&printed, &c).unwrap();
            for _ in 0..100 {
                let x = [
                    rng.gen_range(0.1..2.0),
                    rng.gen_range(0.1..2.0),
                    rng.gen_range(0.1..2.0),
                ];
                let t = rng.gen_range(-1.0..1.0);
                let v1 = e.eval(&x, t).unwrap();
                let v2 = e2.eval(&x, t).unwrap();
                assert!(
                    (v1 - v2).abs() <= 1e-12 * (1.0 + v1.abs()),
                    "round trip of `{src}` via `{printed}`: {v1} vs {v2}"
                );
            }
        }
    }

    #[test]
    fn piecewise_guard_is_lazy_and_one_sided() {
        let c = CoordSystem::new(&["x"]).unwrap();
        // 0 for x <= 0, exp(-1/x) for x > 0; the singular branch must never be
        // touched at or left of the breakpoint.
        let e = parse_scalar("piecewise(0 >= x, 0, exp(-1/x))", &c).unwrap();
        assert_eq!(e.eval(&[0.0], 0.0).unwrap(), 0.0);
        assert_eq!(e.eval(&[-1.0], 0.0).unwrap(), 0.0);
        assert!(e.eval(&[0.5], 0.0).unwrap() > 0.0);
        // derivative keeps the guard: still exactly 0 at and left of 0
        let d = e.derivative(Var::Coord(0));
        assert_eq!(d.eval(&[0.0], 0.0).unwrap(), 0.0);
        assert_eq!(d.eval(&[-0.3], 0.0).unwrap(), 0.0);
        let dv = d.eval(&[0.5], 0.0).unwrap();
        // d/dx exp(-1/x) = exp(-1/x)/x^2
        let want = (-1.0f64 / 0.5).exp() / 0.25;
        assert!((dv - want).abs() < 1e-12);
    }

    #[test]
    fn time_derivative_and_substitution() {
        let c = coords_xy();
        let e = parse_scalar("t^2 * sin(x)", &c).unwrap();
        let d = e.derivative(Var::Time);
        let v = d.eval(&[1.0, 0.0], 3.0).unwrap();
        assert!((v - 6.0 * 1.0f64.sin()).abs() < 1e-14);
        // t -> t/2 substitution
        let half = ScalarExpr::mul(ScalarExpr::Const(0.5), ScalarExpr::Time);
        let sub = e.substitute_time(&half);
        let v = sub.eval(&[1.0, 0.0], 4.0).unwrap();
        assert!((v - 4.0 * 1.0f64.sin()).abs() < 1e-14);
    }

    #[test]
    fn eval_domain_errors() {
        let c = CoordSystem::new(&["x"]).unwrap();
        let e = parse_scalar("1/x", &c).unwrap();
        assert_eq!(e.eval(&[0.0], 0.0), Err(EvalError::DivByZero));
        let e = parse_scalar("ln(x)", &c).unwrap();
        assert!(matches!(e.eval(&[-1.0], 0.0), Err(EvalError::LnNonPositive(_))));
        let e = parse_scalar("sqrt(x)", &c).unwrap();
        assert!(matches!(e.eval(&[-1.0], 0.0), Err(EvalError::SqrtNegative(_))));
        let e = parse_scalar("x^(1/2)", &c).unwrap();
        assert!(matches!(
            e.eval(&[-1.0], 0.0),
            Err(EvalError::PowDomain { .. })
        ));
        let e = parse_scalar("exp(x)", &c).unwrap();
        assert!(matches!(
            e.eval(&[1000.0], 0.0),
            Err(EvalError::NonFinite { .. })
        ));
    }

    #[test]
    fn vector_field_eval_and_jacobian() {
        // the first frame field of the 3-dim nilpotent example: (1, 0, -y)
        let c = CoordSystem::new(&["x", "y", "z"]).unwrap();
        let f = parse_vector_field(&["1", "0", "-y"], &c).unwrap();
        let v = f.eval(&[0.0, 3.0, 0.0], 0.0).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 0.0, -3.0]);
        let j = f.jacobian().eval(&[0.0, 3.0, 0.0], 0.0).unwrap();
        assert_eq!(j[(2, 1)], -1.0);
        assert_eq!(j.iter().map(|v| v.abs()).sum::<f64>(), 1.0);
    }

    #[test]
    fn constant_folding_keeps_trees_small() {
        let c = coords_xy();
        let e = parse_scalar("x^3", &c).unwrap();
        // third derivative of x^3 is the constant 6
        let d3 = e
            .derivative(Var::Coord(0))
            .derivative(Var::Coord(0))
            .derivative(Var::Coord(0));
        assert_eq!(d3, ScalarExpr::Const(6.0));
        // a zero numerator folds away, like a zero factor in a product
        let e = parse_scalar("0/x + 1", &c).unwrap();
        assert_eq!(e, ScalarExpr::Const(1.0));
        // a zero divisor is never folded: it stays visible at evaluation
        let e = parse_scalar("1/0", &c).unwrap();
        assert!(e.eval(&[1.0, 0.0], 0.0).is_err());
        let e = parse_scalar("1/x", &c).unwrap();
        assert!(e.eval(&[0.0, 0.0], 0.0).is_err());
    }
}
