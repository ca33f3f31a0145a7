//! Unit-annotated formula language: expression trees over the state inputs,
//! arithmetic/trig operations and trainable unit-carrying parameters.
//!
//! Enumeration is bounded by formula length: every token (input, parameter
//! or operation) counts once, so `p² + θ·cos q` has length 7. Length bounds
//! tree height, so a length-bounded formula is also height-bounded.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, DiffGraph, ParamVector, Scratch, Tape, Var};
use crate::dynamics::{State, SystemKind, Trajectory};

pub const MAX_DIMS: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DslError {
    #[error("unit mismatch in {subtree}: {reason}")]
    UnitMismatch { subtree: String, reason: String },
    #[error("input {0} has no declared unit")]
    UnknownInput(usize),
    #[error("parse error at byte {pos}: {message}")]
    Parse { pos: usize, message: String },
    #[error("expected {expected} parameter values, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("candidate cannot be fitted: {0}")]
    Unfittable(String),
    #[error(transparent)]
    Numeric(#[from] AdError),
}

/// Physical unit as integer exponents over the base dimensions of a
/// [`DslContext`]. Multiplication adds exponents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Unit(pub [i8; MAX_DIMS]);

impl Unit {
    pub const DIMENSIONLESS: Unit = Unit([0; MAX_DIMS]);

    pub fn base(dim: usize) -> Unit {
        let mut e = [0; MAX_DIMS];
        e[dim] = 1;
        Unit(e)
    }

    pub fn is_dimensionless(self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn mul(self, other: Unit) -> Unit {
        let mut e = self.0;
        for (a, b) in e.iter_mut().zip(other.0) {
            *a += b;
        }
        Unit(e)
    }

    pub fn div(self, other: Unit) -> Unit {
        self.mul(other.inverse())
    }

    pub fn inverse(self) -> Unit {
        Unit(self.0.map(|e| -e))
    }

    pub fn squared(self) -> Unit {
        self.mul(self)
    }

    pub fn within(self, bound: i8) -> bool {
        self.0.iter().all(|e| e.abs() <= bound)
    }

    /// `1`, `p`, `q^2*p^-2`, ... using the given dimension names.
    pub fn format(self, dims: &[String]) -> String {
        let parts: Vec<String> = dims
            .iter()
            .zip(self.0)
            .filter(|(_, e)| *e != 0)
            .map(|(d, e)| if e == 1 { d.clone() } else { format!("{d}^{e}") })
            .collect();
        if parts.is_empty() {
            "1".to_string()
        } else {
            parts.join("*")
        }
    }

    pub fn parse(text: &str, dims: &[String]) -> Option<Unit> {
        if text == "1" {
            return Some(Unit::DIMENSIONLESS);
        }
        let mut u = Unit::DIMENSIONLESS;
        for part in text.split('*') {
            let (name, exp) = match part.split_once('^') {
                Some((n, e)) => (n, e.parse::<i8>().ok()?),
                None => (part, 1),
            };
            let d = dims.iter().position(|x| x == name)?;
            u.0[d] += exp;
        }
        Some(u)
    }

    fn raw(self) -> String {
        let e = self.0;
        format!("[{},{},{},{}]", e[0], e[1], e[2], e[3])
    }
}

/// Input names, base dimensions and the parameter-unit vocabulary for one
/// physical system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DslContext {
    pub dims: Vec<String>,
    pub input_names: Vec<String>,
    pub input_units: Vec<Unit>,
    pub param_units: Vec<Unit>,
    /// Largest absolute exponent allowed in any subformula unit.
    pub exponent_bound: i8,
}

impl DslContext {
    pub fn new(dims: Vec<String>, inputs: Vec<(String, Unit)>, exponent_bound: i8) -> Self {
        assert!(dims.len() <= MAX_DIMS, "at most {MAX_DIMS} base dimensions");
        let mut param_units = Vec::new();
        let n = dims.len();
        let span = (2 * exponent_bound as i32 + 1).pow(n as u32);
        for code in 0..span {
            let mut c = code;
            let mut e = [0i8; MAX_DIMS];
            for slot in e.iter_mut().take(n).rev() {
                *slot = (c % (2 * exponent_bound as i32 + 1)) as i8 - exponent_bound;
                c /= 2 * exponent_bound as i32 + 1;
            }
            param_units.push(Unit(e));
        }
        let (input_names, input_units) = inputs.into_iter().unzip();
        Self {
            dims,
            input_names,
            input_units,
            param_units,
            exponent_bound,
        }
    }

    /// Inputs are `(in 0) = q`, `(in 1) = p`. The pendulum angle is
    /// dimensionless; the spring displacement carries its own unit.
    pub fn for_system(kind: SystemKind) -> Self {
        match kind {
            SystemKind::IdealSpring => Self::new(
                vec!["q".into(), "p".into()],
                vec![("q".into(), Unit::base(0)), ("p".into(), Unit::base(1))],
                2,
            ),
            SystemKind::IdealPendulum | SystemKind::DissipativePendulum => Self::new(
                vec!["p".into()],
                vec![("q".into(), Unit::DIMENSIONLESS), ("p".into(), Unit::base(0))],
                2,
            ),
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.input_units.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnaryOp {
    Sin,
    Cos,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Square => "sq",
        }
    }
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    pub fn is_commutative(self) -> bool {
        matches!(self, BinaryOp::Add | BinaryOp::Mul)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Input(usize),
    Param(Unit),
    Unary(UnaryOp, Expr),
    Binary(BinaryOp, Expr, Expr),
}

#[derive(Debug, PartialEq)]
struct Node {
    kind: ExprKind,
    /// Unit derived at construction, `None` when the subtree is invalid or
    /// contains an input whose unit was not supplied.
    unit: Option<Unit>,
    size: u16,
    depth: u16,
    n_params: u16,
    has_input: bool,
    key: CanonicalKey,
}

/// Formula tree. Subtrees are shared, so cloning is cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr(Arc<Node>);

/// Serialization of an expression with the children of `add`/`mul` sorted,
/// parameter slots erased and units written as raw exponent vectors.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CanonicalKey(Arc<str>);

impl CanonicalKey {
    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Expr {
    fn build(kind: ExprKind, unit: Option<Unit>) -> Expr {
        let (size, depth, n_params, has_input, key) = match &kind {
            ExprKind::Input(i) => (1, 1, 0, true, format!("(in {i})")),
            ExprKind::Param(u) => (1, 1, 1, false, format!("(par {})", u.raw())),
            ExprKind::Unary(op, a) => (
                a.size() + 1,
                a.depth() + 1,
                a.0.n_params,
                a.0.has_input,
                format!("({} {})", op.name(), a.0.key.0),
            ),
            ExprKind::Binary(op, a, b) => {
                let (ka, kb) = (&a.0.key.0, &b.0.key.0);
                let key = if op.is_commutative() && kb.as_bytes() < ka.as_bytes() {
                    format!("({} {} {})", op.name(), kb, ka)
                } else {
                    format!("({} {} {})", op.name(), ka, kb)
                };
                (
                    a.size() + b.size() + 1,
                    a.depth().max(b.depth()) + 1,
                    a.0.n_params + b.0.n_params,
                    a.0.has_input || b.0.has_input,
                    key,
                )
            }
        };
        Expr(Arc::new(Node {
            kind,
            unit,
            size: size as u16,
            depth: depth as u16,
            n_params,
            has_input,
            key: CanonicalKey(Arc::from(key)),
        }))
    }

    pub fn input(index: usize, unit: Unit) -> Expr {
        Self::build(ExprKind::Input(index), Some(unit))
    }

    /// Input whose unit is looked up in `ctx`.
    pub fn input_in(index: usize, ctx: &DslContext) -> Expr {
        Self::build(ExprKind::Input(index), ctx.input_units.get(index).copied())
    }

    pub fn param(unit: Unit) -> Expr {
        Self::build(ExprKind::Param(unit), Some(unit))
    }

    pub fn unary(op: UnaryOp, a: Expr) -> Expr {
        let unit = a.unit().and_then(|u| match op {
            UnaryOp::Sin | UnaryOp::Cos => u.is_dimensionless().then_some(Unit::DIMENSIONLESS),
            UnaryOp::Square => Some(u.squared()),
        });
        Self::build(ExprKind::Unary(op, a), unit)
    }

    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Expr {
        let unit = match (a.unit(), b.unit()) {
            (Some(ua), Some(ub)) => match op {
                BinaryOp::Add | BinaryOp::Sub => (ua == ub).then_some(ua),
                BinaryOp::Mul => Some(ua.mul(ub)),
                BinaryOp::Div => Some(ua.div(ub)),
            },
            _ => None,
        };
        Self::build(ExprKind::Binary(op, a, b), unit)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Self::binary(BinaryOp::Add, a, b)
    }
    pub fn sub(a: Expr, b: Expr) -> Expr {
        Self::binary(BinaryOp::Sub, a, b)
    }
    pub fn mul(a: Expr, b: Expr) -> Expr {
        Self::binary(BinaryOp::Mul, a, b)
    }
    pub fn div(a: Expr, b: Expr) -> Expr {
        Self::binary(BinaryOp::Div, a, b)
    }
    pub fn sin(a: Expr) -> Expr {
        Self::unary(UnaryOp::Sin, a)
    }
    pub fn cos(a: Expr) -> Expr {
        Self::unary(UnaryOp::Cos, a)
    }
    pub fn sq(a: Expr) -> Expr {
        Self::unary(UnaryOp::Square, a)
    }

    pub fn kind(&self) -> &ExprKind {
        &self.0.kind
    }

    /// Unit cached at construction.
    pub fn unit(&self) -> Option<Unit> {
        self.0.unit
    }

    /// Number of tokens (inputs, parameters and operations).
    pub fn size(&self) -> usize {
        self.0.size as usize
    }

    /// Tree height; a leaf has depth 1.
    pub fn depth(&self) -> usize {
        self.0.depth as usize
    }

    pub fn param_count(&self) -> usize {
        self.0.n_params as usize
    }

    pub fn has_input(&self) -> bool {
        self.0.has_input
    }

    pub fn is_param(&self) -> bool {
        matches!(self.0.kind, ExprKind::Param(_))
    }

    pub fn canonical_key(&self) -> &CanonicalKey {
        &self.0.key
    }

    /// Units of the parameter slots in pre-order.
    pub fn param_units(&self) -> Vec<Unit> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |u| out.push(u));
        out
    }

    fn visit_params(&self, f: &mut impl FnMut(Unit)) {
        match &self.0.kind {
            ExprKind::Input(_) => {}
            ExprKind::Param(u) => f(*u),
            ExprKind::Unary(_, a) => a.visit_params(f),
            ExprKind::Binary(_, a, b) => {
                a.visit_params(f);
                b.visit_params(f);
            }
        }
    }

    /// Prefix S-expression, e.g. `(add (sq (in 1)) (mul (par p^2) (cos (in 0))))`.
    pub fn to_sexpr(&self, ctx: &DslContext) -> String {
        let mut s = String::new();
        self.write_sexpr(ctx, &mut s);
        s
    }

    fn write_sexpr(&self, ctx: &DslContext, s: &mut String) {
        match &self.0.kind {
            ExprKind::Input(i) => s.push_str(&format!("(in {i})")),
            ExprKind::Param(u) => s.push_str(&format!("(par {})", u.format(&ctx.dims))),
            ExprKind::Unary(op, a) => {
                s.push('(');
                s.push_str(op.name());
                s.push(' ');
                a.write_sexpr(ctx, s);
                s.push(')');
            }
            ExprKind::Binary(op, a, b) => {
                s.push('(');
                s.push_str(op.name());
                s.push(' ');
                a.write_sexpr(ctx, s);
                s.push(' ');
                b.write_sexpr(ctx, s);
                s.push(')');
            }
        }
    }

    /// Parses the S-expression grammar of [`Expr::to_sexpr`].
    pub fn parse(text: &str, ctx: &DslContext) -> Result<Expr, DslError> {
        let mut p = Parser { src: text, pos: 0, ctx };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != text.len() {
            return Err(p.err("trailing input"));
        }
        Ok(e)
    }

    /// Human-readable infix form with parameter values substituted.
    pub fn to_infix(&self, ctx: &DslContext, params: &[f64]) -> String {
        let mut slot = 0;
        self.infix(ctx, params, &mut slot)
    }

    fn infix(&self, ctx: &DslContext, params: &[f64], slot: &mut usize) -> String {
        match &self.0.kind {
            ExprKind::Input(i) => ctx.input_names.get(*i).cloned().unwrap_or(format!("x{i}")),
            ExprKind::Param(_) => {
                let v = params.get(*slot).copied();
                *slot += 1;
                match v {
                    Some(v) => format!("{v:.4}"),
                    None => format!("θ{}", *slot - 1),
                }
            }
            ExprKind::Unary(op, a) => {
                let inner = a.infix(ctx, params, slot);
                match op {
                    UnaryOp::Square => {
                        if matches!(a.kind(), ExprKind::Input(_)) {
                            format!("{inner}²")
                        } else {
                            format!("({inner})²")
                        }
                    }
                    _ => format!("{}({inner})", op.name()),
                }
            }
            ExprKind::Binary(op, a, b) => {
                let l = a.infix(ctx, params, slot);
                let r = b.infix(ctx, params, slot);
                let sym = match op {
                    BinaryOp::Add => "+",
                    BinaryOp::Sub => "-",
                    BinaryOp::Mul => "·",
                    BinaryOp::Div => "/",
                };
                format!("({l} {sym} {r})")
            }
        }
    }

    /// Records the formula on `tape`. `inputs[i]` feeds `(in i)`, `params`
    /// feed the parameter slots in pre-order.
    pub fn record(&self, tape: &mut Tape, inputs: &[Var], params: &[Var]) -> Var {
        let mut slot = 0;
        self.record_inner(tape, inputs, params, &mut slot)
    }

    fn record_inner(&self, tape: &mut Tape, inputs: &[Var], params: &[Var], slot: &mut usize) -> Var {
        match &self.0.kind {
            ExprKind::Input(i) => inputs[*i],
            ExprKind::Param(_) => {
                let v = params[*slot];
                *slot += 1;
                v
            }
            ExprKind::Unary(op, a) => {
                let x = a.record_inner(tape, inputs, params, slot);
                match op {
                    UnaryOp::Sin => tape.sin(x),
                    UnaryOp::Cos => tape.cos(x),
                    UnaryOp::Square => tape.square(x),
                }
            }
            ExprKind::Binary(op, a, b) => {
                let x = a.record_inner(tape, inputs, params, slot);
                let y = b.record_inner(tape, inputs, params, slot);
                match op {
                    BinaryOp::Add => tape.add(x, y),
                    BinaryOp::Sub => tape.sub(x, y),
                    BinaryOp::Mul => tape.mul(x, y),
                    BinaryOp::Div => tape.div(x, y),
                }
            }
        }
    }

    /// Compiles into a replayable graph with leaf slots
    /// `[inputs..., params...]`.
    pub fn compile(&self, n_inputs: usize) -> CompiledExpr {
        let mut tape = Tape::with_capacity(self.size() + 2);
        let inputs: Vec<Var> = (0..n_inputs).map(|i| tape.leaf(i, 0.0)).collect();
        let params: Vec<Var> = (0..self.param_count())
            .map(|k| tape.leaf(n_inputs + k, 1.0))
            .collect();
        let out = self.record(&mut tape, &inputs, &params);
        // A bare input or parameter is a leaf; route it through one node so
        // the output is always the last node of the graph.
        let out = if out.index() + 1 != tape.len() {
            let zero = tape.constant(0.0);
            tape.add(out, zero)
        } else {
            out
        };
        CompiledExpr {
            graph: tape.into_graph(out),
            n_inputs,
            n_params: self.param_count(),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0.key.as_str())
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    ctx: &'a DslContext,
}

impl Parser<'_> {
    fn err(&self, message: &str) -> DslError {
        DslError::Parse {
            pos: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.src[self.pos..].starts_with(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn token(&mut self) -> Result<&str, DslError> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let len = rest
            .find(|c: char| c.is_whitespace() || c == '(' || c == ')')
            .unwrap_or(rest.len());
        if len == 0 {
            return Err(self.err("expected a token"));
        }
        self.pos += len;
        Ok(&rest[..len])
    }

    fn expect(&mut self, c: char) -> Result<(), DslError> {
        self.skip_ws();
        if self.src[self.pos..].starts_with(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{c}'")))
        }
    }

    fn expr(&mut self) -> Result<Expr, DslError> {
        self.expect('(')?;
        let head = self.token()?.to_string();
        let e = match head.as_str() {
            "in" => {
                let t = self.token()?;
                let i: usize = t.parse().map_err(|_| self.err("input index"))?;
                Expr::input_in(i, self.ctx)
            }
            "par" => {
                let t = self.token()?.to_string();
                let u = Unit::parse(&t, &self.ctx.dims).ok_or_else(|| self.err("unit"))?;
                Expr::param(u)
            }
            "sin" | "cos" | "sq" => {
                let a = self.expr()?;
                let op = match head.as_str() {
                    "sin" => UnaryOp::Sin,
                    "cos" => UnaryOp::Cos,
                    _ => UnaryOp::Square,
                };
                Expr::unary(op, a)
            }
            "add" | "sub" | "mul" | "div" => {
                let a = self.expr()?;
                let b = self.expr()?;
                let op = match head.as_str() {
                    "add" => BinaryOp::Add,
                    "sub" => BinaryOp::Sub,
                    "mul" => BinaryOp::Mul,
                    _ => BinaryOp::Div,
                };
                Expr::binary(op, a, b)
            }
            other => return Err(self.err(&format!("unknown operator '{other}'"))),
        };
        self.expect(')')?;
        Ok(e)
    }
}

/// Recomputes the unit of `e` from scratch, rejecting the first invalid
/// subtree found.
pub fn check_units(e: &Expr, input_units: &[Unit]) -> Result<Unit, DslError> {
    let mismatch = |reason: String| DslError::UnitMismatch {
        subtree: e.to_string(),
        reason,
    };
    match e.kind() {
        ExprKind::Input(i) => input_units.get(*i).copied().ok_or(DslError::UnknownInput(*i)),
        ExprKind::Param(u) => Ok(*u),
        ExprKind::Unary(op, a) => {
            let u = check_units(a, input_units)?;
            match op {
                UnaryOp::Sin | UnaryOp::Cos if !u.is_dimensionless() => {
                    Err(mismatch(format!("{} needs a dimensionless argument", op.name())))
                }
                UnaryOp::Sin | UnaryOp::Cos => Ok(Unit::DIMENSIONLESS),
                UnaryOp::Square => Ok(u.squared()),
            }
        }
        ExprKind::Binary(op, a, b) => {
            let ua = check_units(a, input_units)?;
            let ub = check_units(b, input_units)?;
            match op {
                BinaryOp::Add | BinaryOp::Sub if ua != ub => {
                    Err(mismatch(format!("{} of {:?} and {:?}", op.name(), ua.0, ub.0)))
                }
                BinaryOp::Add | BinaryOp::Sub => Ok(ua),
                BinaryOp::Mul => Ok(ua.mul(ub)),
                BinaryOp::Div => Ok(ua.div(ub)),
            }
        }
    }
}

pub fn canonical_key(e: &Expr) -> CanonicalKey {
    e.canonical_key().clone()
}

/// Total order used for deterministic tie-breaking: fewer tokens first, then
/// the S-expression text.
pub fn simplicity_order(a: &Expr, b: &Expr, ctx: &DslContext) -> Ordering {
    a.size()
        .cmp(&b.size())
        .then_with(|| a.to_sexpr(ctx).cmp(&b.to_sexpr(ctx)))
}

/// Every unit-valid formula up to `max_depth` tokens, one per canonical key,
/// in a fixed order (by length, then construction order).
///
/// Subformulas without any input are not generated (they are equivalent to
/// a single parameter), subformula units stay inside the context's exponent
/// bound, and division by a bare parameter is left out because it only
/// reparametrizes multiplication by one.
pub fn enumerate(max_depth: usize, ctx: &DslContext) -> impl Iterator<Item = Expr> {
    enumerate_levels(max_depth, ctx).into_iter().flatten()
}

/// Enumeration grouped by formula length (index 0 holds length 1).
pub fn enumerate_levels(max_depth: usize, ctx: &DslContext) -> Vec<Vec<Expr>> {
    let bound = ctx.exponent_bound;
    let mut levels: Vec<Vec<Expr>> = Vec::new();
    if max_depth == 0 {
        return levels;
    }
    let mut first: Vec<Expr> = (0..ctx.n_inputs()).map(|i| Expr::input_in(i, ctx)).collect();
    first.extend(ctx.param_units.iter().map(|&u| Expr::param(u)));
    levels.push(first);

    for n in 2..=max_depth {
        let mut out = Vec::new();
        for a in levels[n - 2].iter().filter(|a| a.has_input()) {
            let u = a.unit().expect("enumerated formulas carry units");
            if u.is_dimensionless() {
                out.push(Expr::sin(a.clone()));
                out.push(Expr::cos(a.clone()));
            }
            if u.squared().within(bound) {
                out.push(Expr::sq(a.clone()));
            }
        }
        for i in 1..n - 1 {
            let j = n - 1 - i;
            for a in &levels[i - 1] {
                let ua = a.unit().expect("unit");
                for b in &levels[j - 1] {
                    if !(a.has_input() || b.has_input()) {
                        continue;
                    }
                    let ub = b.unit().expect("unit");
                    let ordered = a.canonical_key().as_bytes() <= b.canonical_key().as_bytes();
                    if ua == ub {
                        if ordered {
                            out.push(Expr::add(a.clone(), b.clone()));
                        }
                        out.push(Expr::sub(a.clone(), b.clone()));
                    }
                    if ordered && ua.mul(ub).within(bound) {
                        out.push(Expr::mul(a.clone(), b.clone()));
                    }
                    if !b.is_param() && ua.div(ub).within(bound) {
                        out.push(Expr::div(a.clone(), b.clone()));
                    }
                }
            }
        }
        levels.push(out);
    }
    levels
}

/// Formula compiled to a [`DiffGraph`] with leaf slots `[inputs..., params...]`.
#[derive(Debug, Clone)]
pub struct CompiledExpr {
    graph: DiffGraph,
    n_inputs: usize,
    n_params: usize,
}

impl CompiledExpr {
    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    fn leaves(&self, s: State, params: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        buf.push(s.q);
        buf.push(s.p);
        buf.resize(self.n_inputs, 0.0);
        buf.extend_from_slice(params);
    }

    pub fn eval(&self, s: State, params: &[f64]) -> Result<f64, DslError> {
        if params.len() != self.n_params {
            return Err(DslError::ParamCount {
                expected: self.n_params,
                got: params.len(),
            });
        }
        let mut buf = Vec::with_capacity(self.n_inputs + self.n_params);
        self.leaves(s, params, &mut buf);
        Ok(self.graph.evaluate(&buf)?)
    }

    /// Value and gradient with respect to all leaf slots (inputs then params).
    pub fn eval_with_grad(
        &self,
        s: State,
        params: &[f64],
        leaves: &mut Vec<f64>,
        scratch: &mut Scratch,
        grad: &mut [f64],
    ) -> Result<f64, AdError> {
        self.leaves(s, params, leaves);
        self.graph.value_and_gradient(leaves, scratch, grad)
    }
}

/// Value of `e` at `s`; a non-finite result is a numeric failure.
pub fn eval_expr(e: &Expr, params: &ParamVector, s: State) -> Result<f64, DslError> {
    e.compile(2).eval(s, params.values())
}

pub const STAT_EPS: f64 = 1e-12;

/// Mean over sequences of the within-sequence variance, divided by the
/// variance over the pooled values plus [`STAT_EPS`].
pub fn conservation_statistic(values: &[f64], seqs: &[Range<usize>]) -> f64 {
    statistic_and_sensitivity(values, seqs, None)
}

/// Same as [`conservation_statistic`]; when `dstat` is given it receives
/// ∂stat/∂value for every entry of `values`.
pub fn statistic_and_sensitivity(values: &[f64], seqs: &[Range<usize>], dstat: Option<&mut [f64]>) -> f64 {
    let n = values.len();
    if n == 0 || seqs.is_empty() {
        return 0.0;
    }
    let mean_all = values.iter().sum::<f64>() / n as f64;
    let var_all = values.iter().map(|v| (v - mean_all).powi(2)).sum::<f64>() / n as f64;
    let denom = var_all + STAT_EPS;
    let k = seqs.len() as f64;
    let mut sum_var = 0.0;
    let mut seq_means = Vec::with_capacity(seqs.len());
    for r in seqs {
        let m = r.len() as f64;
        let mean = values[r.clone()].iter().sum::<f64>() / m;
        let var = values[r.clone()].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        sum_var += var;
        seq_means.push(mean);
    }
    let stat = sum_var / k / denom;
    if let Some(d) = dstat {
        for (r, mean) in seqs.iter().zip(&seq_means) {
            let m = r.len() as f64;
            for i in r.clone() {
                let dv = 2.0 * (values[i] - mean) / m;
                let dd = 2.0 * (values[i] - mean_all) / n as f64;
                d[i] = dv / (k * denom) - sum_var / k / (denom * denom) * dd;
            }
        }
    }
    stat
}

/// States of several trajectories flattened, with per-trajectory ranges.
#[derive(Debug, Clone, Default)]
pub struct PooledStates {
    pub states: Vec<State>,
    pub seqs: Vec<Range<usize>>,
}

impl PooledStates {
    pub fn new(trajs: &[Trajectory]) -> Self {
        let mut states = Vec::new();
        let mut seqs = Vec::new();
        for t in trajs {
            let start = states.len();
            states.extend_from_slice(&t.states);
            seqs.push(start..states.len());
        }
        Self { states, seqs }
    }
}

/// Statistic of a compiled formula over pooled data, or the first failure.
pub fn expr_statistic(c: &CompiledExpr, params: &[f64], data: &PooledStates) -> Result<f64, DslError> {
    let mut leaves = Vec::new();
    let mut scratch = Scratch::default();
    let mut values = Vec::with_capacity(data.states.len());
    for &s in &data.states {
        c.leaves(s, params, &mut leaves);
        values.push(c.graph.evaluate_with(&leaves, &mut scratch)?);
    }
    Ok(conservation_statistic(&values, &data.seqs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Initial gradient-descent step.
    pub lr: f64,
    pub steps: usize,
    pub init: f64,
    pub seed: u64,
    /// Step growth after an accepted step and shrink after a rejected one.
    pub grow: f64,
    pub shrink: f64,
    /// Stop once a step improves the statistic by less than this (relative).
    pub rel_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            steps: 500,
            init: 1.0,
            seed: 0,
            grow: 1.2,
            shrink: 0.5,
            rel_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub params: ParamVector,
    pub loss: f64,
    pub initial_loss: f64,
    pub iterations: usize,
}

struct FitEval<'a> {
    c: &'a CompiledExpr,
    data: &'a PooledStates,
    leaves: Vec<f64>,
    scratch: Scratch,
    grad_buf: Vec<f64>,
    values: Vec<f64>,
    dvals: Vec<f64>,
    value_grads: Vec<f64>,
}

impl<'a> FitEval<'a> {
    fn new(c: &'a CompiledExpr, data: &'a PooledStates) -> Self {
        let n = data.states.len();
        Self {
            c,
            data,
            leaves: Vec::new(),
            scratch: Scratch::default(),
            grad_buf: vec![0.0; c.n_inputs + c.n_params],
            values: vec![0.0; n],
            dvals: vec![0.0; n],
            value_grads: vec![0.0; n * c.n_params],
        }
    }

    /// Statistic and its parameter gradient; `None` on numeric failure.
    fn run(&mut self, params: &[f64], grad: &mut [f64]) -> Option<f64> {
        let np = self.c.n_params;
        for (i, &s) in self.data.states.iter().enumerate() {
            let v = self
                .c
                .eval_with_grad(s, params, &mut self.leaves, &mut self.scratch, &mut self.grad_buf)
                .ok()?;
            self.values[i] = v;
            self.value_grads[i * np..(i + 1) * np].copy_from_slice(&self.grad_buf[self.c.n_inputs..]);
        }
        let stat = statistic_and_sensitivity(&self.values, &self.data.seqs, Some(&mut self.dvals));
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..self.values.len() {
            let d = self.dvals[i];
            for k in 0..np {
                grad[k] += d * self.value_grads[i * np + k];
            }
        }
        (stat.is_finite() && grad.iter().all(|g| g.is_finite())).then_some(stat)
    }
}

/// Fits the parameters of `e` to minimize the conservation statistic on
/// `data` by gradient descent with an adaptive step: a step that would
/// increase the statistic is rejected and the step size halved, an accepted
/// step grows it. The returned loss never exceeds the initial one.
pub fn fit_params(e: &Expr, data: &[Trajectory], cfg: &FitConfig) -> Result<(ParamVector, f64), DslError> {
    let pooled = PooledStates::new(data);
    let c = e.compile(2);
    fit_compiled(&c, &pooled, cfg).map(|o| (o.params, o.loss))
}

pub fn fit_compiled(c: &CompiledExpr, data: &PooledStates, cfg: &FitConfig) -> Result<FitOutcome, DslError> {
    if data.states.is_empty() {
        return Err(DslError::Unfittable("no data".into()));
    }
    let np = c.n_params;
    let mut theta = vec![cfg.init; np];
    let mut ev = FitEval::new(c, data);
    let mut grad = vec![0.0; np];
    let mut loss = ev
        .run(&theta, &mut grad)
        .ok_or_else(|| DslError::Unfittable("numeric failure at initial parameters".into()))?;
    let initial_loss = loss;
    let mut iterations = 0;
    if np > 0 {
        let mut lr = cfg.lr;
        let mut trial = vec![0.0; np];
        let mut trial_grad = vec![0.0; np];
        for _ in 0..cfg.steps {
            iterations += 1;
            if grad.iter().all(|g| *g == 0.0) {
                break;
            }
            for k in 0..np {
                trial[k] = theta[k] - lr * grad[k];
            }
            match ev.run(&trial, &mut trial_grad) {
                Some(l) if l <= loss => {
                    let improvement = loss - l;
                    std::mem::swap(&mut theta, &mut trial);
                    std::mem::swap(&mut grad, &mut trial_grad);
                    loss = l;
                    lr *= cfg.grow;
                    if improvement <= cfg.rel_tol * loss.max(f64::MIN_POSITIVE) {
                        break;
                    }
                }
                _ => {
                    lr *= cfg.shrink;
                    if lr < 1e-14 {
                        break;
                    }
                }
            }
        }
    }
    Ok(FitOutcome {
        params: ParamVector::with_prefix("c", theta),
        loss,
        initial_loss,
        iterations,
    })
}

/// Probe values used for parameters when testing whether a formula is
/// constant in its inputs.
pub fn probe_param_values(n: usize) -> Vec<f64> {
    (0..n).map(|k| 1.234_567 + 0.311 * k as f64).collect()
}

/// A formula is trivial if it is a bare parameter or its gradient with
/// respect to the inputs vanishes (within 1e-10) at every probe state.
pub fn is_trivial(e: &Expr, probes: &[State]) -> bool {
    if !e.has_input() {
        return true;
    }
    let c = e.compile(2);
    let params = probe_param_values(c.n_params);
    let mut leaves = Vec::new();
    let mut scratch = Scratch::default();
    let mut grad = vec![0.0; c.n_inputs + c.n_params];
    for &s in probes {
        match c.eval_with_grad(s, &params, &mut leaves, &mut scratch, &mut grad) {
            Ok(_) => {
                if grad[..c.n_inputs].iter().any(|g| g.abs() > 1e-10) {
                    return false;
                }
            }
            Err(_) => continue,
        }
    }
    true
}

/// Ten probe states spread evenly through the pooled data.
pub fn probe_states(data: &[Trajectory]) -> Vec<State> {
    let all: Vec<State> = data.iter().flat_map(|t| t.states.iter().copied()).collect();
    if all.is_empty() {
        return Vec::new();
    }
    (0..10).map(|i| all[(i * all.len()) / 10]).collect()
}

/// Groups formulas by canonical key, keeping the first of each group.
pub fn dedup_by_key(exprs: impl IntoIterator<Item = Expr>) -> Vec<Expr> {
    let mut seen: HashMap<CanonicalKey, ()> = HashMap::new();
    exprs
        .into_iter()
        .filter(|e| seen.insert(e.canonical_key().clone(), ()).is_none())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_dataset, DataConfig, SystemSpec};

    fn spring() -> DslContext {
        DslContext::for_system(SystemKind::IdealSpring)
    }

    fn pend() -> DslContext {
        DslContext::for_system(SystemKind::IdealPendulum)
    }

    #[test]
    fn units_reject_additive_mismatch() {
        let ctx = spring();
        let e = Expr::add(Expr::input_in(0, &ctx), Expr::input_in(1, &ctx));
        assert!(matches!(
            check_units(&e, &ctx.input_units),
            Err(DslError::UnitMismatch { .. })
        ));
        assert_eq!(e.unit(), None);
    }

    #[test]
    fn units_of_spring_energy_form() {
        let ctx = spring();
        let theta = Unit::parse("q^2*p^-2", &ctx.dims).unwrap();
        let e = Expr::add(
            Expr::sq(Expr::input_in(0, &ctx)),
            Expr::mul(Expr::param(theta), Expr::sq(Expr::input_in(1, &ctx))),
        );
        let u = check_units(&e, &ctx.input_units).unwrap();
        assert_eq!(u, Unit::parse("q^2", &ctx.dims).unwrap());
    }

    #[test]
    fn trig_needs_dimensionless_argument() {
        let ctx = pend();
        let bad = Expr::sin(Expr::input_in(1, &ctx));
        assert!(check_units(&bad, &ctx.input_units).is_err());
        let good = Expr::cos(Expr::input_in(0, &ctx));
        assert_eq!(check_units(&good, &ctx.input_units).unwrap(), Unit::DIMENSIONLESS);
        // spring displacement carries a unit, so cos(q) is illegal there
        let s = spring();
        assert!(check_units(&Expr::cos(Expr::input_in(0, &s)), &s.input_units).is_err());
    }

    #[test]
    fn depth_one_is_inputs_and_params() {
        let ctx = DslContext::new(vec!["x".into()], vec![("x".into(), Unit::base(0))], 2);
        let got: Vec<Expr> = enumerate(1, &ctx).collect();
        assert_eq!(got.len(), 1 + 5);
        assert!(matches!(got[0].kind(), ExprKind::Input(0)));
        assert!(got[1..].iter().all(|e| e.is_param()));
    }

    #[test]
    fn commutative_keys_collide() {
        let ctx = spring();
        let q = Expr::input_in(0, &ctx);
        let p = Expr::input_in(1, &ctx);
        assert_eq!(
            Expr::mul(p.clone(), q.clone()).canonical_key(),
            Expr::mul(q.clone(), p.clone()).canonical_key()
        );
        let pp = Expr::mul(p.clone(), p.clone());
        let u = Unit::parse("q*p^-2", &ctx.dims).unwrap();
        let a = Expr::add(q.clone(), Expr::mul(Expr::param(u), pp.clone()));
        let b = Expr::add(Expr::mul(pp.clone(), Expr::param(u)), q.clone());
        assert_eq!(a.canonical_key(), b.canonical_key());
        let p2 = Expr::sq(p.clone());
        assert_ne!(
            Expr::sub(q.clone(), p2.clone()).canonical_key(),
            Expr::sub(p2.clone(), q.clone()).canonical_key()
        );
        // parameter unit matters
        let u2 = Unit::parse("q^2*p^-2", &ctx.dims).unwrap();
        assert_ne!(Expr::param(u).canonical_key(), Expr::param(u2).canonical_key());
    }

    #[test]
    fn enumeration_yields_one_of_pq_and_qp() {
        let ctx = spring();
        let q = Expr::input_in(0, &ctx);
        let p = Expr::input_in(1, &ctx);
        let k = Expr::mul(p, q).canonical_key().clone();
        let hits = enumerate(3, &ctx).filter(|e| *e.canonical_key() == k).count();
        assert_eq!(hits, 1);
    }

    #[test]
    fn sexpr_round_trip() {
        let ctx = spring();
        let text = "(add (sq (in 0)) (mul (par q^2*p^-2) (sq (in 1))))";
        let e = Expr::parse(text, &ctx).unwrap();
        assert_eq!(e.to_sexpr(&ctx), text);
        assert_eq!(e.size(), 7);
        assert_eq!(e.depth(), 4);
        assert_eq!(e.param_count(), 1);
        assert!(Expr::parse("(add (in 0)", &ctx).is_err());
        assert!(Expr::parse("(foo (in 0))", &ctx).is_err());
    }

    #[test]
    fn eval_examples() {
        let ctx = pend();
        // p² − 3·cos(q) with the coefficient as a parameter
        let e = Expr::parse("(sub (sq (in 1)) (mul (par p^2) (cos (in 0))))", &ctx).unwrap();
        let v = eval_expr(&e, &ParamVector::with_prefix("c", vec![3.0]), State::new(0.0, 0.0)).unwrap();
        assert_eq!(v, -3.0);

        let d = Expr::parse("(div (in 0) (sub (in 0) (in 0)))", &ctx).unwrap();
        assert!(matches!(
            eval_expr(&d, &ParamVector::empty(), State::new(0.3, 0.0)),
            Err(DslError::Numeric(AdError::NumericFailure { .. }))
        ));

        let c = Expr::param(Unit::DIMENSIONLESS);
        let v = eval_expr(&c, &ParamVector::with_prefix("c", vec![4.25]), State::new(1.0, 2.0)).unwrap();
        assert_eq!(v, 4.25);
    }

    #[test]
    fn statistic_sensitivity_matches_finite_differences() {
        let values = vec![0.3, 1.2, -0.4, 2.0, 0.9, 1.7, -1.1];
        let seqs = vec![0..3, 3..7];
        let mut d = vec![0.0; values.len()];
        statistic_and_sensitivity(&values, &seqs, Some(&mut d));
        for i in 0..values.len() {
            let h = 1e-6;
            let mut up = values.clone();
            up[i] += h;
            let mut dn = values.clone();
            dn[i] -= h;
            let fd = (conservation_statistic(&up, &seqs) - conservation_statistic(&dn, &seqs)) / (2.0 * h);
            assert!((fd - d[i]).abs() < 1e-7, "{i}: {fd} vs {}", d[i]);
        }
    }

    #[test]
    fn constant_values_have_near_zero_denominator() {
        let values = vec![2.0; 6];
        assert_eq!(conservation_statistic(&values, &[0..3, 3..6]), 0.0);
    }

    #[test]
    fn fit_recovers_spring_coefficient() {
        let spec = SystemSpec::ideal_spring();
        let data = generate_dataset(&spec, &DataConfig::default(), 1).unwrap();
        let ctx = spring();
        let e = Expr::parse("(add (sq (in 0)) (mul (par q^2*p^-2) (sq (in 1))))", &ctx).unwrap();
        let (params, loss) = fit_params(&e, &data.train, &FitConfig::default()).unwrap();
        let th = params.values()[0];
        assert!((0.95..=1.05).contains(&th), "theta = {th}");
        assert!(loss < 1e-6);
    }

    #[test]
    fn fit_recovers_pendulum_coefficient() {
        let spec = SystemSpec::ideal_pendulum();
        let data = generate_dataset(&spec, &DataConfig::default(), 2).unwrap();
        let ctx = pend();
        let e = Expr::parse("(add (sq (in 1)) (mul (par p^2) (cos (in 0))))", &ctx).unwrap();
        let (params, loss) = fit_params(&e, &data.train, &FitConfig::default()).unwrap();
        let th = params.values()[0];
        assert!((-3.1..=-2.9).contains(&th), "theta = {th}");
        assert!(loss < 1e-6);
    }

    #[test]
    fn fit_without_params_returns_statistic() {
        let spec = SystemSpec::ideal_spring();
        let data = generate_dataset(&spec, &DataConfig::default(), 3).unwrap();
        let ctx = spring();
        let e = Expr::parse("(mul (in 0) (in 1))", &ctx).unwrap();
        let (params, loss) = fit_params(&e, &data.train, &FitConfig::default()).unwrap();
        assert!(params.is_empty());
        let direct = expr_statistic(&e.compile(2), &[], &PooledStates::new(&data.train)).unwrap();
        assert_eq!(loss, direct);
    }

    #[test]
    fn triviality_detection() {
        let ctx = pend();
        let probes = vec![State::new(0.3, 0.1), State::new(-1.0, 0.7)];
        assert!(is_trivial(&Expr::param(Unit::DIMENSIONLESS), &probes));
        let zero = Expr::parse("(sub (in 0) (in 0))", &ctx).unwrap();
        assert!(is_trivial(&zero, &probes));
        let one = Expr::parse("(add (sq (sin (in 0))) (sq (cos (in 0))))", &ctx).unwrap();
        assert!(is_trivial(&one, &probes));
        let h = Expr::parse("(add (sq (in 1)) (mul (par p^2) (cos (in 0))))", &ctx).unwrap();
        assert!(!is_trivial(&h, &probes));
    }
}
