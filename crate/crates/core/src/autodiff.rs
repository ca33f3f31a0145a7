//! Scalar reverse-mode differentiation on an append-only tape.
//!
//! A [`Tape`] records primitive operations eagerly: every node's value is
//! computed when it is pushed, so the tape doubles as a define-by-run
//! forward pass. Two reverse passes are offered:
//!
//! * [`Tape::adjoints`] walks the tape with plain `f64` adjoints. This is the
//!   fast first-order path.
//! * [`Tape::grad`] records the reverse pass itself as new nodes on the same
//!   tape, so the returned gradients are ordinary [`Var`]s that can be
//!   differentiated again (reverse-over-reverse).
//!
//! A finished tape with a designated output can be frozen into a
//! [`DiffGraph`], which is immutable and can be replayed against new leaf
//! values from several threads at once.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdError {
    #[error("leaf slot {slot} is out of range ({available} leaf values supplied)")]
    LeafOutOfRange { slot: usize, available: usize },
    #[error("non-finite value produced at node {node}")]
    NumericFailure { node: usize },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf(u32),
    Const(u32),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Sin(u32),
    Cos(u32),
    Square(u32),
    Tanh(u32),
    /// Sum of products over a run of operand pairs stored in `Tape::pairs`.
    SumProd { start: u32, len: u32 },
}

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<f64>,
    pairs: Vec<(u32, u32)>,
    consts: Vec<f64>,
    leaf_slots: usize,
    first_nonfinite: Option<u32>,
    one: Option<Var>,
    minus_one: Option<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            ops: Vec::with_capacity(nodes),
            values: Vec::with_capacity(nodes),
            ..Self::default()
        }
    }

    /// Drops every node but keeps the allocations.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.values.clear();
        self.pairs.clear();
        self.consts.clear();
        self.leaf_slots = 0;
        self.first_nonfinite = None;
        self.one = None;
        self.minus_one = None;
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Number of leaf slots referenced so far (max slot + 1).
    pub fn leaf_slots(&self) -> usize {
        self.leaf_slots
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    /// First node whose value came out NaN or infinite, if any.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.first_nonfinite.map(|n| n as usize)
    }

    /// Value of `v`, or a numeric failure if it is not finite.
    pub fn checked_value(&self, v: Var) -> Result<f64, AdError> {
        let x = self.value(v);
        if x.is_finite() {
            Ok(x)
        } else {
            Err(AdError::NumericFailure { node: v.index() })
        }
    }

    #[inline]
    fn push(&mut self, op: Op, value: f64) -> Var {
        let id = self.ops.len() as u32;
        if !value.is_finite() && self.first_nonfinite.is_none() {
            self.first_nonfinite = Some(id);
        }
        self.ops.push(op);
        self.values.push(value);
        Var(id)
    }

    #[inline]
    fn v(&self, i: u32) -> f64 {
        self.values[i as usize]
    }

    pub fn leaf(&mut self, slot: usize, value: f64) -> Var {
        self.leaf_slots = self.leaf_slots.max(slot + 1);
        self.push(Op::Leaf(slot as u32), value)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        let idx = self.consts.len() as u32;
        self.consts.push(value);
        self.push(Op::Const(idx), value)
    }

    pub fn one(&mut self) -> Var {
        match self.one {
            Some(v) => v,
            None => {
                let v = self.constant(1.0);
                self.one = Some(v);
                v
            }
        }
    }

    fn minus_one(&mut self) -> Var {
        match self.minus_one {
            Some(v) => v,
            None => {
                let v = self.constant(-1.0);
                self.minus_one = Some(v);
                v
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.v(a.0) + self.v(b.0);
        self.push(Op::Add(a.0, b.0), y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.v(a.0) - self.v(b.0);
        self.push(Op::Sub(a.0, b.0), y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.v(a.0) * self.v(b.0);
        self.push(Op::Mul(a.0, b.0), y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let y = self.v(a.0) / self.v(b.0);
        self.push(Op::Div(a.0, b.0), y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let y = -self.v(a.0);
        self.push(Op::Neg(a.0), y)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let y = self.v(a.0).sin();
        self.push(Op::Sin(a.0), y)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let y = self.v(a.0).cos();
        self.push(Op::Cos(a.0), y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.v(a.0);
        self.push(Op::Square(a.0), x * x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.v(a.0).tanh();
        self.push(Op::Tanh(a.0), y)
    }

    /// `a * c` for a literal `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = self.constant(c);
        self.mul(a, k)
    }

    /// `Σ a_k · b_k`. An empty slice yields the constant 0.
    pub fn sum_prod(&mut self, terms: &[(Var, Var)]) -> Var {
        if terms.is_empty() {
            return self.constant(0.0);
        }
        let start = self.pairs.len() as u32;
        let mut acc = 0.0;
        for &(a, b) in terms {
            acc += self.v(a.0) * self.v(b.0);
            self.pairs.push((a.0, b.0));
        }
        self.push(
            Op::SumProd {
                start,
                len: terms.len() as u32,
            },
            acc,
        )
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let one = self.one();
        let terms: Vec<(Var, Var)> = xs.iter().map(|&x| (x, one)).collect();
        self.sum_prod(&terms)
    }

    /// Affine combination `bias + Σ w_k · x_k`.
    pub fn affine(&mut self, weights: &[Var], xs: &[Var], bias: Option<Var>) -> Var {
        debug_assert_eq!(weights.len(), xs.len());
        let mut terms: Vec<(Var, Var)> = Vec::with_capacity(weights.len() + 1);
        terms.extend(weights.iter().copied().zip(xs.iter().copied()));
        if let Some(b) = bias {
            let one = self.one();
            terms.push((b, one));
        }
        self.sum_prod(&terms)
    }

    /// Plain `f64` reverse pass seeded at `output`. Returns one adjoint per
    /// node up to and including `output`.
    pub fn adjoints(&self, output: Var) -> Result<Vec<f64>, AdError> {
        self.checked_value(output)?;
        let n = output.index() + 1;
        let mut adj = vec![0.0; n];
        adj[n - 1] = 1.0;
        reverse_f64(&self.ops, &self.pairs, &self.values, &mut adj);
        Ok(adj)
    }

    /// Gradient of `output` with respect to each of `wrt`, as plain numbers.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<f64>, AdError> {
        let adj = self.adjoints(output)?;
        wrt.iter()
            .map(|w| {
                let g = adj.get(w.index()).copied().unwrap_or(0.0);
                if g.is_finite() {
                    Ok(g)
                } else {
                    Err(AdError::NumericFailure { node: w.index() })
                }
            })
            .collect()
    }

    /// Records the reverse pass of `output` onto the tape and returns the
    /// gradient nodes for `wrt`. The result can be differentiated again.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        let n = output.index() + 1;
        let mut needed = vec![false; n];
        for w in wrt {
            if w.index() < n {
                needed[w.index()] = true;
            }
        }
        for i in 0..n {
            if needed[i] {
                continue;
            }
            needed[i] = match self.ops[i] {
                Op::Leaf(_) | Op::Const(_) => false,
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    needed[a as usize] || needed[b as usize]
                }
                Op::Neg(a) | Op::Sin(a) | Op::Cos(a) | Op::Square(a) | Op::Tanh(a) => {
                    needed[a as usize]
                }
                Op::SumProd { start, len } => self.pairs
                    [start as usize..(start + len) as usize]
                    .iter()
                    .any(|&(a, b)| needed[a as usize] || needed[b as usize]),
            };
        }

        let one = self.one();
        let minus_one = self.minus_one();
        let mut heads = vec![NONE; n];
        let mut arena: Vec<(u32, u32, u32)> = Vec::new();
        let mut adj_node = vec![NONE; n];
        let mut scratch: Vec<(Var, Var)> = Vec::new();

        let add_term = |heads: &mut Vec<u32>, arena: &mut Vec<(u32, u32, u32)>, at: u32, a: Var, b: Var| {
            let idx = arena.len() as u32;
            arena.push((a.0, b.0, heads[at as usize]));
            heads[at as usize] = idx;
        };

        if needed[n - 1] {
            add_term(&mut heads, &mut arena, output.0, one, one);
        }

        for i in (0..n).rev() {
            if !needed[i] || heads[i] == NONE {
                continue;
            }
            // Collect the adjoint terms in insertion order.
            scratch.clear();
            let mut t = heads[i];
            while t != NONE {
                let (a, b, next) = arena[t as usize];
                scratch.push((Var(a), Var(b)));
                t = next;
            }
            scratch.reverse();
            let ybar = if scratch.len() == 1 {
                let (a, b) = scratch[0];
                if b == one {
                    a
                } else if a == one {
                    b
                } else {
                    self.mul(a, b)
                }
            } else {
                let terms = std::mem::take(&mut scratch);
                let v = self.sum_prod(&terms);
                scratch = terms;
                v
            };
            adj_node[i] = ybar.0;

            match self.ops[i] {
                Op::Leaf(_) | Op::Const(_) => {}
                Op::Add(a, b) => {
                    if needed[a as usize] {
                        add_term(&mut heads, &mut arena, a, ybar, one);
                    }
                    if needed[b as usize] {
                        add_term(&mut heads, &mut arena, b, ybar, one);
                    }
                }
                Op::Sub(a, b) => {
                    if needed[a as usize] {
                        add_term(&mut heads, &mut arena, a, ybar, one);
                    }
                    if needed[b as usize] {
                        add_term(&mut heads, &mut arena, b, ybar, minus_one);
                    }
                }
                Op::Mul(a, b) => {
                    if needed[a as usize] {
                        add_term(&mut heads, &mut arena, a, ybar, Var(b));
                    }
                    if needed[b as usize] {
                        add_term(&mut heads, &mut arena, b, ybar, Var(a));
                    }
                }
                Op::Div(a, b) => {
                    if needed[a as usize] {
                        let inv = self.div(one, Var(b));
                        add_term(&mut heads, &mut arena, a, ybar, inv);
                    }
                    if needed[b as usize] {
                        let q = self.div(Var(i as u32), Var(b));
                        let nq = self.neg(q);
                        add_term(&mut heads, &mut arena, b, ybar, nq);
                    }
                }
                Op::Neg(a) => add_term(&mut heads, &mut arena, a, ybar, minus_one),
                Op::Sin(a) => {
                    let c = self.cos(Var(a));
                    add_term(&mut heads, &mut arena, a, ybar, c);
                }
                Op::Cos(a) => {
                    let s = self.sin(Var(a));
                    let ns = self.neg(s);
                    add_term(&mut heads, &mut arena, a, ybar, ns);
                }
                Op::Square(a) => {
                    let twice = self.add(Var(a), Var(a));
                    add_term(&mut heads, &mut arena, a, ybar, twice);
                }
                Op::Tanh(a) => {
                    let y2 = self.square(Var(i as u32));
                    let d = self.sub(one, y2);
                    add_term(&mut heads, &mut arena, a, ybar, d);
                }
                Op::SumProd { start, len } => {
                    for k in start..start + len {
                        let (a, b) = self.pairs[k as usize];
                        if needed[a as usize] {
                            add_term(&mut heads, &mut arena, a, ybar, Var(b));
                        }
                        if needed[b as usize] {
                            add_term(&mut heads, &mut arena, b, ybar, Var(a));
                        }
                    }
                }
            }
        }

        let mut zero = None;
        wrt.iter()
            .map(|w| {
                let a = adj_node.get(w.index()).copied().unwrap_or(NONE);
                if a == NONE {
                    *zero.get_or_insert_with(|| self.constant(0.0))
                } else {
                    Var(a)
                }
            })
            .collect()
    }

    /// Freezes the tape into a replayable graph with `output` as its result.
    pub fn into_graph(mut self, output: Var) -> DiffGraph {
        let n = output.index() + 1;
        self.ops.truncate(n);
        self.values.truncate(n);
        DiffGraph {
            ops: Arc::from(self.ops),
            pairs: Arc::from(self.pairs),
            consts: Arc::from(self.consts),
            leaf_slots: self.leaf_slots,
        }
    }
}

fn reverse_f64(ops: &[Op], pairs: &[(u32, u32)], values: &[f64], adj: &mut [f64]) {
    for i in (0..adj.len()).rev() {
        let g = adj[i];
        if g == 0.0 {
            continue;
        }
        match ops[i] {
            Op::Leaf(_) | Op::Const(_) => {}
            Op::Add(a, b) => {
                adj[a as usize] += g;
                adj[b as usize] += g;
            }
            Op::Sub(a, b) => {
                adj[a as usize] += g;
                adj[b as usize] -= g;
            }
            Op::Mul(a, b) => {
                adj[a as usize] += g * values[b as usize];
                adj[b as usize] += g * values[a as usize];
            }
            Op::Div(a, b) => {
                let vb = values[b as usize];
                adj[a as usize] += g / vb;
                adj[b as usize] -= g * values[i] / vb;
            }
            Op::Neg(a) => adj[a as usize] -= g,
            Op::Sin(a) => adj[a as usize] += g * values[a as usize].cos(),
            Op::Cos(a) => adj[a as usize] -= g * values[a as usize].sin(),
            Op::Square(a) => adj[a as usize] += 2.0 * g * values[a as usize],
            Op::Tanh(a) => {
                let y = values[i];
                adj[a as usize] += g * (1.0 - y * y);
            }
            Op::SumProd { start, len } => {
                for &(a, b) in &pairs[start as usize..(start + len) as usize] {
                    let va = values[a as usize];
                    let vb = values[b as usize];
                    adj[a as usize] += g * vb;
                    adj[b as usize] += g * va;
                }
            }
        }
    }
}

fn forward_f64(
    ops: &[Op],
    pairs: &[(u32, u32)],
    consts: &[f64],
    leaves: &[f64],
    values: &mut Vec<f64>,
) -> Result<(), AdError> {
    values.clear();
    values.reserve(ops.len());
    for (i, op) in ops.iter().enumerate() {
        let v = |k: u32| values[k as usize];
        let y = match *op {
            Op::Leaf(slot) => match leaves.get(slot as usize) {
                Some(&x) => x,
                None => {
                    return Err(AdError::LeafOutOfRange {
                        slot: slot as usize,
                        available: leaves.len(),
                    })
                }
            },
            Op::Const(c) => consts[c as usize],
            Op::Add(a, b) => v(a) + v(b),
            Op::Sub(a, b) => v(a) - v(b),
            Op::Mul(a, b) => v(a) * v(b),
            Op::Div(a, b) => v(a) / v(b),
            Op::Neg(a) => -v(a),
            Op::Sin(a) => v(a).sin(),
            Op::Cos(a) => v(a).cos(),
            Op::Square(a) => {
                let x = v(a);
                x * x
            }
            Op::Tanh(a) => v(a).tanh(),
            Op::SumProd { start, len } => {
                let mut acc = 0.0;
                for &(a, b) in &pairs[start as usize..(start + len) as usize] {
                    acc += v(a) * v(b);
                }
                acc
            }
        };
        if !y.is_finite() {
            return Err(AdError::NumericFailure { node: i });
        }
        values.push(y);
    }
    Ok(())
}

/// Immutable, replayable computation graph with a single scalar output
/// (the last node).
#[derive(Debug, Clone)]
pub struct DiffGraph {
    ops: Arc<[Op]>,
    pairs: Arc<[(u32, u32)]>,
    consts: Arc<[f64]>,
    leaf_slots: usize,
}

/// Reusable buffers for repeated [`DiffGraph`] evaluation.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    values: Vec<f64>,
    adj: Vec<f64>,
}

impl DiffGraph {
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn leaf_slots(&self) -> usize {
        self.leaf_slots
    }

    fn check_leaves(&self, leaves: &[f64]) -> Result<(), AdError> {
        if leaves.len() < self.leaf_slots {
            return Err(AdError::LeafOutOfRange {
                slot: self.leaf_slots - 1,
                available: leaves.len(),
            });
        }
        Ok(())
    }

    pub fn evaluate(&self, leaves: &[f64]) -> Result<f64, AdError> {
        self.evaluate_with(leaves, &mut Scratch::default())
    }

    pub fn evaluate_with(&self, leaves: &[f64], scratch: &mut Scratch) -> Result<f64, AdError> {
        self.check_leaves(leaves)?;
        forward_f64(&self.ops, &self.pairs, &self.consts, leaves, &mut scratch.values)?;
        Ok(*scratch.values.last().unwrap_or(&0.0))
    }

    /// Gradient of the output with respect to the leaf slots in `wrt`.
    pub fn gradient(&self, leaves: &[f64], wrt: &[usize]) -> Result<Vec<f64>, AdError> {
        let mut out = vec![0.0; self.leaf_slots.max(leaves.len())];
        self.value_and_gradient(leaves, &mut Scratch::default(), &mut out)?;
        wrt.iter()
            .map(|&s| {
                out.get(s).copied().ok_or(AdError::LeafOutOfRange {
                    slot: s,
                    available: leaves.len(),
                })
            })
            .collect()
    }

    /// Forward and reverse pass in one go. `grad_out[slot]` receives the
    /// derivative with respect to each leaf slot; it must be at least
    /// `leaf_slots()` long.
    pub fn value_and_gradient(
        &self,
        leaves: &[f64],
        scratch: &mut Scratch,
        grad_out: &mut [f64],
    ) -> Result<f64, AdError> {
        let y = self.evaluate_with(leaves, scratch)?;
        let n = self.ops.len();
        scratch.adj.clear();
        scratch.adj.resize(n, 0.0);
        if n > 0 {
            scratch.adj[n - 1] = 1.0;
        }
        reverse_f64(&self.ops, &self.pairs, &scratch.values, &mut scratch.adj);
        grad_out.iter_mut().for_each(|g| *g = 0.0);
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Leaf(slot) = *op {
                let g = scratch.adj[i];
                if !g.is_finite() {
                    return Err(AdError::NumericFailure { node: i });
                }
                grad_out[slot as usize] += g;
            }
        }
        Ok(y)
    }
}

/// Forward value of `graph` at `leaves`.
pub fn evaluate(graph: &DiffGraph, leaves: &ParamVector) -> Result<f64, AdError> {
    graph.evaluate(leaves.values())
}

/// Exact reverse-mode gradient of `graph` with respect to the leaf slots in `wrt`.
pub fn gradient(graph: &DiffGraph, leaves: &ParamVector, wrt: &[usize]) -> Result<Vec<f64>, AdError> {
    graph.gradient(leaves.values(), wrt)
}

/// Gradient of a scalar whose construction itself contains a gradient.
///
/// `build` receives a fresh tape, one leaf per entry of `leaves`, and the
/// subset of those leaves named by `inner_wrt`; it typically calls
/// [`Tape::grad`] on an inner loss with respect to the inner leaves and
/// combines the result into the returned scalar. The derivative of that
/// scalar with respect to the `outer_wrt` leaves is returned.
pub fn second_order_gradient<F>(
    leaves: &ParamVector,
    outer_wrt: &[usize],
    inner_wrt: &[usize],
    build: F,
) -> Result<Vec<f64>, AdError>
where
    F: FnOnce(&mut Tape, &[Var], &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves
        .values()
        .iter()
        .enumerate()
        .map(|(i, &x)| tape.leaf(i, x))
        .collect();
    let pick = |idx: &[usize]| -> Result<Vec<Var>, AdError> {
        idx.iter()
            .map(|&i| {
                vars.get(i).copied().ok_or(AdError::LeafOutOfRange {
                    slot: i,
                    available: vars.len(),
                })
            })
            .collect()
    };
    let inner = pick(inner_wrt)?;
    let outer = pick(outer_wrt)?;
    let out = build(&mut tape, &vars, &inner);
    tape.gradient(out, &outer)
}

/// Flat vector of named real parameters. The names are fixed at
/// construction; only the values change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    names: Arc<[String]>,
    values: Vec<f64>,
}

impl ParamVector {
    /// # Panics
    /// If `names` and `values` differ in length.
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Self {
        assert_eq!(names.len(), values.len(), "one name per value");
        Self {
            names: Arc::from(names),
            values,
        }
    }

    /// Names the values `{prefix}0`, `{prefix}1`, ...
    pub fn with_prefix(prefix: &str, values: Vec<f64>) -> Self {
        let names = (0..values.len()).map(|i| format!("{prefix}{i}")).collect();
        Self::new(names, values)
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), Vec::new())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.values[i])
    }

    /// Same names, new values.
    ///
    /// # Panics
    /// If the length changes.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len(), "one value per name");
        Self {
            names: Arc::clone(&self.names),
            values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph1(f: impl FnOnce(&mut Tape, Var) -> Var, x: f64) -> DiffGraph {
        let mut t = Tape::new();
        let v = t.leaf(0, x);
        let y = f(&mut t, v);
        t.into_graph(y)
    }

    #[test]
    fn evaluates_primitives() {
        let sq = graph1(|t, x| t.mul(x, x), 0.0);
        assert_eq!(sq.evaluate(&[3.0]).unwrap(), 9.0);
        let s = graph1(|t, x| t.sin(x), 0.0);
        assert_eq!(s.evaluate(&[0.0]).unwrap(), 0.0);

        let mut t = Tape::new();
        let q = t.leaf(0, 0.0);
        let p = t.leaf(1, 0.0);
        let q2 = t.square(q);
        let p2 = t.square(p);
        let s = t.add(q2, p2);
        let h = t.scale(s, 0.5);
        let g = t.into_graph(h);
        let leaves = ParamVector::with_prefix("x", vec![1.0, 0.0]);
        assert_eq!(evaluate(&g, &leaves).unwrap(), 0.5);
        let grad = gradient(&g, &ParamVector::with_prefix("x", vec![2.0, 1.0]), &[0, 1]).unwrap();
        assert_eq!(grad, vec![2.0, 1.0]);
    }

    #[test]
    fn first_order_examples() {
        let sq = graph1(|t, x| t.square(x), 0.0);
        assert_eq!(sq.gradient(&[3.0], &[0]).unwrap(), vec![6.0]);
        let s = graph1(|t, x| t.sin(x), 0.0);
        assert_eq!(s.gradient(&[0.0], &[0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn out_of_range_leaf_is_structural_error() {
        let mut t = Tape::new();
        let a = t.leaf(0, 1.0);
        let b = t.leaf(2, 1.0);
        let y = t.add(a, b);
        let g = t.into_graph(y);
        assert!(matches!(
            g.evaluate(&[1.0, 2.0]),
            Err(AdError::LeafOutOfRange { .. })
        ));
    }

    #[test]
    fn division_by_zero_is_numeric_failure() {
        let mut t = Tape::new();
        let a = t.leaf(0, 1.0);
        let b = t.leaf(1, 1.0);
        let y = t.div(a, b);
        let g = t.into_graph(y);
        assert!(matches!(g.evaluate(&[1.0, 0.0]), Err(AdError::NumericFailure { .. })));
        assert!(matches!(g.gradient(&[0.0, 0.0], &[0, 1]), Err(AdError::NumericFailure { .. })));
    }

    #[test]
    fn second_derivative_of_cube() {
        let leaves = ParamVector::with_prefix("x", vec![2.0]);
        let g = second_order_gradient(&leaves, &[0], &[0], |t, v, inner| {
            let x2 = t.square(v[0]);
            let x3 = t.mul(x2, v[0]);
            t.grad(x3, inner)[0]
        })
        .unwrap();
        assert!((g[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_through_an_inner_step() {
        // d/da [ b - eps * d/db(a b^2) ] = -2 eps b
        let leaves = ParamVector::new(vec!["a".into(), "b".into()], vec![1.0, 2.0]);
        let g = second_order_gradient(&leaves, &[0], &[1], |t, v, inner| {
            let b2 = t.square(v[1]);
            let ab2 = t.mul(v[0], b2);
            let gb = t.grad(ab2, inner)[0];
            let step = t.scale(gb, 0.1);
            t.sub(v[1], step)
        })
        .unwrap();
        assert!((g[0] + 0.4).abs() < 1e-12);

        // finite differences of the closed form b - 0.2 a b
        let f = |a: f64, b: f64| b - 0.1 * 2.0 * a * b;
        let h = 1e-5;
        let fd = (f(1.0 + h, 2.0) - f(1.0 - h, 2.0)) / (2.0 * h);
        assert!((g[0] - fd).abs() < 1e-8);
    }

    #[test]
    fn constant_inner_loss_reduces_to_plain_gradient() {
        let leaves = ParamVector::with_prefix("x", vec![0.7, -1.3]);
        let g = second_order_gradient(&leaves, &[0, 1], &[1], |t, v, inner| {
            let c = t.constant(4.0);
            let gi = t.grad(c, inner)[0];
            let prod = t.mul(v[0], v[1]);
            let s = t.sin(prod);
            let step = t.scale(gi, 0.3);
            t.sub(s, step)
        })
        .unwrap();
        let c = (0.7f64 * -1.3).cos();
        assert!((g[0] - c * -1.3).abs() < 1e-14);
        assert!((g[1] - c * 0.7).abs() < 1e-14);
    }

    #[test]
    fn recorded_gradient_matches_f64_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(0, 0.3);
        let y = t.leaf(1, -1.7);
        let a = t.mul(x, y);
        let b = t.tanh(a);
        let c = t.div(b, y);
        let d = t.cos(c);
        let e = t.sum_prod(&[(d, x), (y, y), (b, c)]);
        let f = t.sub(e, x);
        let plain = t.gradient(f, &[x, y]).unwrap();
        let rec = t.grad(f, &[x, y]);
        assert!((t.value(rec[0]) - plain[0]).abs() < 1e-14);
        assert!((t.value(rec[1]) - plain[1]).abs() < 1e-14);
    }

    #[test]
    fn unrelated_wrt_gets_zero() {
        let mut t = Tape::new();
        let x = t.leaf(0, 2.0);
        let z = t.leaf(1, 5.0);
        let y = t.square(x);
        let g = t.grad(y, &[x, z]);
        assert_eq!(t.value(g[0]), 4.0);
        assert_eq!(t.value(g[1]), 0.0);
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let mut t = Tape::new();
        let x = t.leaf(0, 0.0);
        let y = t.leaf(1, 0.0);
        let a = t.sin(x);
        let b = t.mul(a, y);
        let c = t.tanh(b);
        let g = t.into_graph(c);
        let v1 = g.evaluate(&[0.123, 4.56]).unwrap();
        let v2 = g.evaluate(&[0.123, 4.56]).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        let g1 = g.gradient(&[0.123, 4.56], &[0, 1]).unwrap();
        let g2 = g.gradient(&[0.123, 4.56], &[0, 1]).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn param_vector_names_are_stable() {
        let p = ParamVector::new(vec!["w".into(), "b".into()], vec![1.0, 2.0]);
        assert_eq!(p.index_of("b"), Some(1));
        let q = p.with_values(vec![3.0, 4.0]);
        assert_eq!(q.names(), p.names());
        assert_eq!(q.get("w"), Some(3.0));
    }
}
