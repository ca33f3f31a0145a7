//! Brute-force enumeration oracle shared by the test targets.

use std::collections::BTreeSet;

use noether_core::dsl::{BinaryOp, DslContext, Expr, ExprKind, UnaryOp, Unit};

/// Independent tree model for the brute-force oracle.
#[derive(Clone, Debug)]
enum T {
    In(usize),
    Par(Unit),
    Un(&'static str, Box<T>),
    Bin(&'static str, Box<T>, Box<T>),
}

fn size(t: &T) -> usize {
    match t {
        T::In(_) | T::Par(_) => 1,
        T::Un(_, a) => 1 + size(a),
        T::Bin(_, a, b) => 1 + size(a) + size(b),
    }
}

fn has_input(t: &T) -> bool {
    match t {
        T::In(_) => true,
        T::Par(_) => false,
        T::Un(_, a) => has_input(a),
        T::Bin(_, a, b) => has_input(a) || has_input(b),
    }
}

fn add_units(a: [i8; 4], b: [i8; 4], sign: i8) -> [i8; 4] {
    let mut out = a;
    for i in 0..4 {
        out[i] += sign * b[i];
    }
    out
}

/// Unit of `t` if every subtree is valid under the enumeration rules.
fn valid_unit(t: &T, ctx: &DslContext) -> Option<[i8; 4]> {
    let ok = |u: [i8; 4]| u.iter().all(|e| e.abs() <= ctx.exponent_bound);
    let u = match t {
        T::In(i) => ctx.input_units[*i].0,
        T::Par(u) => u.0,
        T::Un(op, a) => {
            let ua = valid_unit(a, ctx)?;
            match *op {
                "sin" | "cos" if ua != [0; 4] => return None,
                "sin" | "cos" => [0; 4],
                _ => add_units(ua, ua, 1),
            }
        }
        T::Bin(op, a, b) => {
            let ua = valid_unit(a, ctx)?;
            let ub = valid_unit(b, ctx)?;
            match *op {
                "add" | "sub" if ua != ub => return None,
                "add" | "sub" => ua,
                "mul" => add_units(ua, ub, 1),
                _ => {
                    if matches!(**b, T::Par(_)) {
                        return None;
                    }
                    add_units(ua, ub, -1)
                }
            }
        }
    };
    if !ok(u) {
        return None;
    }
    if size(t) > 1 && !has_input(t) {
        return None;
    }
    Some(u)
}

fn key(t: &T) -> String {
    match t {
        T::In(i) => format!("i{i}"),
        T::Par(u) => format!("P{:?}", u.0),
        T::Un(op, a) => format!("{op}[{}]", key(a)),
        T::Bin(op, a, b) => {
            let (mut ka, mut kb) = (key(a), key(b));
            if (*op == "add" || *op == "mul") && kb < ka {
                std::mem::swap(&mut ka, &mut kb);
            }
            format!("{op}[{ka},{kb}]")
        }
    }
}

fn to_t(e: &Expr) -> T {
    match e.kind() {
        ExprKind::Input(i) => T::In(*i),
        ExprKind::Param(u) => T::Par(*u),
        ExprKind::Unary(op, a) => T::Un(
            match op {
                UnaryOp::Sin => "sin",
                UnaryOp::Cos => "cos",
                UnaryOp::Square => "sq",
            },
            Box::new(to_t(a)),
        ),
        ExprKind::Binary(op, a, b) => T::Bin(
            match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
                BinaryOp::Div => "div",
            },
            Box::new(to_t(a)),
            Box::new(to_t(b)),
        ),
    }
}

/// All trees with exactly `n` tokens, no ordering or validity constraints.
fn all_trees(n: usize, ctx: &DslContext) -> Vec<T> {
    if n == 1 {
        let mut v: Vec<T> = (0..ctx.input_units.len()).map(T::In).collect();
        v.extend(ctx.param_units.iter().map(|&u| T::Par(u)));
        return v;
    }
    let mut out = Vec::new();
    for a in all_trees(n - 1, ctx) {
        for op in ["sin", "cos", "sq"] {
            out.push(T::Un(op, Box::new(a.clone())));
        }
    }
    for i in 1..n - 1 {
        let left = all_trees(i, ctx);
        let right = all_trees(n - 1 - i, ctx);
        for a in &left {
            for b in &right {
                for op in ["add", "sub", "mul", "div"] {
                    out.push(T::Bin(op, Box::new(a.clone()), Box::new(b.clone())));
                }
            }
        }
    }
    out
}

pub fn oracle_keys(max: usize, ctx: &DslContext) -> BTreeSet<String> {
    (1..=max)
        .flat_map(|n| all_trees(n, ctx))
        .filter(|t| valid_unit(t, ctx).is_some())
        .map(|t| key(&t))
        .collect()
}

/// Canonical keys of the enumerated formulas up to `max` tokens, checked
/// for duplicates.
pub fn enumerated_keys(max: usize, ctx: &DslContext) -> (usize, BTreeSet<String>) {
    let got: Vec<Expr> = noether_core::dsl::enumerate(max, ctx).collect();
    let keys = got.iter().map(|e| key(&to_t(e))).collect();
    (got.len(), keys)
}
