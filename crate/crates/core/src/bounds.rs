//! Generalization bound for predictors whose outputs are confined to the
//! preimage of a conservation law, versus unconstrained predictors.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("log of nonpositive argument 2R·ζ^(1-1/ρ)·√n = {0}")]
    LogDomain(f64),
    #[error("negative radicand {0}")]
    NegativeRadicand(f64),
    #[error("unknown sweep variable '{0}'")]
    UnknownVariable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Upper bound of the loss.
    pub c: f64,
    /// Supremum of the parameter-vector norm.
    pub r: f64,
    /// Lipschitz constant.
    pub zeta: f64,
    pub rho: u32,
    pub delta: f64,
    pub n: u64,
    /// Ambient dimension.
    pub d: u32,
    /// Dimension of the preimage of the conserved quantity.
    pub m: u32,
    /// Use ξ = m when true, ξ = d otherwise.
    pub conserved: bool,
}

impl Default for BoundInputs {
    fn default() -> Self {
        Self {
            c: 1.0,
            r: 1.0,
            zeta: 1.0,
            rho: 1,
            delta: 0.05,
            n: 100,
            d: 2,
            m: 1,
            conserved: true,
        }
    }
}

impl BoundInputs {
    pub fn validate(&self) -> Result<(), BoundError> {
        let bad = |m: &str| Err(BoundError::Invalid(m.to_string()));
        if !(self.c >= 0.0 && self.r >= 0.0 && self.zeta >= 0.0) {
            return bad("C, R and ζ must be nonnegative");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("δ must lie in (0, 1)");
        }
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if self.rho == 0 {
            return bad("ρ must be a positive integer");
        }
        if self.m > self.d {
            return bad("m must not exceed d");
        }
        Ok(())
    }

    pub fn xi(&self) -> u32 {
        if self.conserved {
            self.m
        } else {
            self.d
        }
    }

    /// `2R·ζ^(1−1/ρ)·√n`, the argument of the covering logarithm.
    pub fn log_argument(&self) -> f64 {
        2.0 * self.r * self.zeta.powf(1.0 - 1.0 / self.rho as f64) * (self.n as f64).sqrt()
    }
}

/// `C·sqrt((ξ·ln max(√ξ,1) + ξ·ln(2Rζ^(1−1/ρ)√n) + ln(1/δ)) / (2n)) + 1{ξ≥1}·sqrt(ζ^(2/ρ)/n)`.
///
/// For ξ = 0 both ξ-weighted terms vanish and the logarithm is not
/// evaluated, so R and ζ may be zero there.
pub fn eval_bound(b: &BoundInputs) -> Result<f64, BoundError> {
    b.validate()?;
    let xi = b.xi() as f64;
    let n = b.n as f64;
    let mut radicand = (1.0 / b.delta).ln();
    if b.xi() > 0 {
        let arg = b.log_argument();
        if !(arg > 0.0) {
            return Err(BoundError::LogDomain(arg));
        }
        radicand += xi * xi.sqrt().max(1.0).ln() + xi * arg.ln();
    }
    if radicand < 0.0 {
        return Err(BoundError::NegativeRadicand(radicand));
    }
    let mut bound = b.c * (radicand / (2.0 * n)).sqrt();
    if b.xi() >= 1 {
        bound += (b.zeta.powf(2.0 / b.rho as f64) / n).sqrt();
    }
    Ok(bound)
}

/// The ξ = 0 special case: `C·sqrt(ln(1/δ)/(2n))`.
pub fn closed_form_m0(c: f64, delta: f64, n: u64) -> f64 {
    c * ((1.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundComparison {
    pub bound_m: f64,
    pub bound_d: f64,
    /// `bound_d − bound_m`.
    pub gap: f64,
}

pub fn compare_conserved(b: &BoundInputs) -> Result<BoundComparison, BoundError> {
    let bound_m = eval_bound(&BoundInputs {
        conserved: true,
        ..b.clone()
    })?;
    let bound_d = eval_bound(&BoundInputs {
        conserved: false,
        ..b.clone()
    })?;
    Ok(BoundComparison {
        bound_m,
        bound_d,
        gap: bound_d - bound_m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepVar {
    C,
    R,
    Zeta,
    Rho,
    Delta,
    N,
    D,
    M,
}

impl FromStr for SweepVar {
    type Err = BoundError;
    fn from_str(s: &str) -> Result<Self, BoundError> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "c" => SweepVar::C,
            "r" => SweepVar::R,
            "zeta" => SweepVar::Zeta,
            "rho" => SweepVar::Rho,
            "delta" => SweepVar::Delta,
            "n" => SweepVar::N,
            "d" => SweepVar::D,
            "m" => SweepVar::M,
            _ => return Err(BoundError::UnknownVariable(s.to_string())),
        })
    }
}

impl SweepVar {
    pub fn name(self) -> &'static str {
        match self {
            SweepVar::C => "c",
            SweepVar::R => "r",
            SweepVar::Zeta => "zeta",
            SweepVar::Rho => "rho",
            SweepVar::Delta => "delta",
            SweepVar::N => "n",
            SweepVar::D => "d",
            SweepVar::M => "m",
        }
    }

    /// Copy of `base` with this variable set to `value` (rounded for the
    /// integer-valued inputs).
    pub fn apply(self, base: &BoundInputs, value: f64) -> BoundInputs {
        let mut b = base.clone();
        let int = value.round().max(0.0);
        match self {
            SweepVar::C => b.c = value,
            SweepVar::R => b.r = value,
            SweepVar::Zeta => b.zeta = value,
            SweepVar::Rho => b.rho = int as u32,
            SweepVar::Delta => b.delta = value,
            SweepVar::N => b.n = int as u64,
            SweepVar::D => b.d = int as u32,
            SweepVar::M => b.m = int as u32,
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub result: Result<BoundComparison, BoundError>,
}

pub fn sweep(base: &BoundInputs, var: SweepVar, values: &[f64]) -> Vec<SweepRow> {
    values
        .iter()
        .map(|&v| SweepRow {
            value: v,
            result: compare_conserved(&var.apply(base, v)),
        })
        .collect()
}

/// CSV with columns `<var>,conserved,unconserved,gap,error`; rows that hit
/// a domain error leave the numeric columns empty.
pub fn write_sweep_csv(out: &mut impl Write, var: SweepVar, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(out, "{},conserved,unconserved,gap,error", var.name())?;
    for r in rows {
        match &r.result {
            Ok(c) => writeln!(out, "{},{},{},{},", r.value, c.bound_m, c.bound_d, c.gap)?,
            Err(e) => writeln!(out, "{},,,,\"{}\"", r.value, e.to_string().replace('"', "'"))?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn m_zero_example() {
        let b = BoundInputs {
            c: 1.0,
            delta: 0.05,
            n: 100,
            m: 0,
            conserved: true,
            ..Default::default()
        };
        let v = eval_bound(&b).unwrap();
        assert!((v - 0.12239).abs() < 1e-5, "{v}");
        assert_eq!(v, closed_form_m0(1.0, 0.05, 100));
    }

    #[test]
    fn m_equal_d_has_no_gap() {
        let b = BoundInputs {
            m: 3,
            d: 3,
            ..Default::default()
        };
        assert_eq!(compare_conserved(&b).unwrap().gap, 0.0);
    }

    #[test]
    fn log_domain_error() {
        let b = BoundInputs {
            r: 0.0,
            ..Default::default()
        };
        assert!(matches!(eval_bound(&b), Err(BoundError::LogDomain(_))));
    }

    #[test]
    fn invalid_inputs() {
        assert!(eval_bound(&BoundInputs { delta: 1.0, ..Default::default() }).is_err());
        assert!(eval_bound(&BoundInputs { m: 5, d: 2, ..Default::default() }).is_err());
        assert!(eval_bound(&BoundInputs { n: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn sweep_csv_shape() {
        let rows = sweep(&BoundInputs::default(), SweepVar::M, &[0.0, 1.0, 2.0]);
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, SweepVar::M, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("m,conserved,unconserved,gap,error"));
    }
}
