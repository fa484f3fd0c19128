//! Randomized additive synthetic benchmarks with known optima.
//!
//! Each objective is a sum of identical 1-D components, one per
//! coordinate, with a random per-coordinate shift so the optimizer
//! lands uniformly in the unit cube: `f(x) = sum_p g(t_p)` with
//! `t_p = argmin_raw + 2 * half_width * (x_p - u_p - 0.5)` and
//! `u ~ U[-0.5, 0.5]^P`. The optimum is at `x = 0.5 + u`, always
//! inside `[0,1]^P`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The 1-D component family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Ackley,
    Levy,
    Rastrigin,
}

impl Kind {
    /// Raw domain half-width of the 1-D component.
    pub fn half_width(self) -> f64 {
        match self {
            Kind::Ackley => 32.768,
            Kind::Levy => 10.0,
            Kind::Rastrigin => 1.5,
        }
    }

    /// Raw argument at which the 1-D component is minimized.
    pub fn raw_argmin(self) -> f64 {
        match self {
            Kind::Ackley | Kind::Rastrigin => 0.0,
            Kind::Levy => 1.0,
        }
    }

    /// Minimum value of the 1-D component.
    pub fn component_minimum(self) -> f64 {
        match self {
            Kind::Ackley | Kind::Levy => 0.0,
            Kind::Rastrigin => -2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Ackley => "ackley",
            Kind::Levy => "levy",
            Kind::Rastrigin => "rastrigin",
        }
    }
}

impl std::str::FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ackley" => Ok(Kind::Ackley),
            "levy" => Ok(Kind::Levy),
            "rastrigin" => Ok(Kind::Rastrigin),
            other => Err(Error::InvalidArgument(format!(
                "unknown test function '{other}' (expected ackley, levy, or rastrigin)"
            ))),
        }
    }
}

/// Evaluates the 1-D component at a raw (unscaled) argument. The
/// formulas are total; no domain clamping is applied.
pub fn component_eval(kind: Kind, t: f64) -> f64 {
    match kind {
        Kind::Ackley => {
            let (a, b, c) = (20.0, 0.2, 0.1 * std::f64::consts::PI);
            -a * (-b * t.abs()).exp() - (c * t).cos().exp() + a + std::f64::consts::E
        }
        Kind::Levy => {
            let w = 1.0 + (t - 1.0) / 4.0;
            let s2 = (2.0 * std::f64::consts::PI * w).sin();
            (std::f64::consts::PI * w).sin().powi(2) + (w - 1.0).powi(2) * (1.0 + s2 * s2)
        }
        Kind::Rastrigin => t * t - 2.0 * (2.0 * std::f64::consts::PI * t).cos(),
    }
}

/// A shifted additive objective on the unit cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFunction {
    kind: Kind,
    shifts: Vec<f64>,
}

impl SyntheticFunction {
    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn p(&self) -> usize {
        self.shifts.len()
    }

    pub fn shifts(&self) -> &[f64] {
        &self.shifts
    }

    /// The unit-cube minimizer, `0.5 + u` componentwise.
    pub fn optimizer(&self) -> Vec<f64> {
        self.shifts.iter().map(|u| 0.5 + u).collect()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.shifts.len(), "dimension mismatch");
        let k = self.kind;
        let scale = 2.0 * k.half_width();
        x.iter()
            .zip(&self.shifts)
            .map(|(xp, up)| component_eval(k, k.raw_argmin() + scale * (xp - up - 0.5)))
            .sum()
    }
}

/// Draws the shift vector `u ~ U[-0.5, 0.5]^P`.
pub fn make_function<R: Rng>(kind: Kind, p: usize, rng: &mut R) -> Result<SyntheticFunction> {
    if p < 1 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    let shifts = (0..p).map(|_| rng.random_range(-0.5..0.5)).collect();
    Ok(SyntheticFunction { kind, shifts })
}

/// Global minimum value of the P-dimensional objective.
pub fn known_optimum(kind: Kind, p: usize) -> f64 {
    kind.component_minimum() * p as f64
}
