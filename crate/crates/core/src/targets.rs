//! Semi-invariant benchmark targets `g(x₁, {x₂,…,x_n})` and their
//! equivariant lifts. All products, sums and powers act per coordinate, so
//! the output width equals the token width.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::equivariance::{lift, SemiInvariantFn};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    PolynomialType,
    NonPolynomialType,
}

#[derive(Clone)]
pub struct TargetFunction {
    pub name: String,
    pub kind: TargetKind,
    /// Benchmark stand-ins that are not taken from the published experiments.
    pub invented: bool,
    g: Arc<SemiInvariantFn>,
}

impl fmt::Debug for TargetFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TargetFunction")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("invented", &self.invented)
            .finish_non_exhaustive()
    }
}

impl TargetFunction {
    pub fn new(
        name: impl Into<String>,
        kind: TargetKind,
        invented: bool,
        g: impl Fn(&[f64], &[&[f64]]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            kind,
            invented,
            g: Arc::new(g),
        }
    }

    pub fn g(&self) -> &SemiInvariantFn {
        &*self.g
    }

    pub fn eval_point(&self, first: &[f64], rest: &[&[f64]]) -> Vec<f64> {
        (self.g)(first, rest)
    }

    /// The equivariant sequence-to-sequence function induced by `g`.
    pub fn eval(&self, x: &Matrix) -> Result<Matrix> {
        lift(&*self.g, x)
    }
}

fn rest_sum(rest: &[&[f64]], c: usize) -> f64 {
    rest.iter().fold(0.0, |acc, r| acc + r[c])
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// `x + 7x² + 3x·(Σ rest)³`, the latent-dimension sweep target.
pub fn cubic_rest() -> TargetFunction {
    TargetFunction::new("cubic-rest", TargetKind::PolynomialType, false, |x, rest| {
        (0..x.len())
            .map(|c| {
                let s = rest_sum(rest, c);
                x[c] + 7.0 * x[c] * x[c] + 3.0 * x[c] * s * s * s
            })
            .collect()
    })
}

/// `x + (Σ rest)²`.
pub fn poly_square() -> TargetFunction {
    TargetFunction::new("poly-square", TargetKind::PolynomialType, true, |x, rest| {
        (0..x.len())
            .map(|c| {
                let s = rest_sum(rest, c);
                x[c] + s * s
            })
            .collect()
    })
}

/// `sin(πx)·exp(−‖Σ rest‖²)`.
pub fn sin_exp() -> TargetFunction {
    TargetFunction::new("sin-exp", TargetKind::NonPolynomialType, true, |x, rest| {
        let norm2 = (0..x.len()).map(|c| rest_sum(rest, c).powi(2)).sum::<f64>();
        let damp = (-norm2).exp();
        x.iter().map(|&v| (std::f64::consts::PI * v).sin() * damp).collect()
    })
}

/// `max(softplus(3x − 1.5), softplus(3·mean(rest) − 1.5)) + softplus(x − Σ rest)`.
pub fn softplus_max() -> TargetFunction {
    TargetFunction::new("softplus-max", TargetKind::NonPolynomialType, true, |x, rest| {
        let len = rest.len().max(1) as f64;
        (0..x.len())
            .map(|c| {
                let s = rest_sum(rest, c);
                let a = softplus(3.0 * x[c] - 1.5);
                let b = softplus(3.0 * s / len - 1.5);
                a.max(b) + softplus(x[c] - s)
            })
            .collect()
    })
}

/// `x + Σ_{r ∈ rest} r²`, Lipschitz on the unit cube.
pub fn x_plus_rest_squares() -> TargetFunction {
    TargetFunction::new("x-plus-rest-squares", TargetKind::PolynomialType, true, |x, rest| {
        (0..x.len())
            .map(|c| x[c] + rest.iter().fold(0.0, |acc, r| acc + r[c] * r[c]))
            .collect()
    })
}

pub fn constant(value: f64) -> TargetFunction {
    TargetFunction::new("constant", TargetKind::PolynomialType, true, move |x, _| {
        vec![value; x.len()]
    })
}

pub const TARGET_NAMES: &[&str] = &[
    "cubic-rest",
    "poly-square",
    "sin-exp",
    "softplus-max",
    "x-plus-rest-squares",
    "constant",
];

/// The four benchmark functions: two polynomial-type, two non-polynomial-type.
pub fn benchmark_library() -> Vec<TargetFunction> {
    vec![cubic_rest(), poly_square(), sin_exp(), softplus_max()]
}

pub fn by_name(name: &str) -> Result<TargetFunction> {
    Ok(match name {
        "cubic-rest" => cubic_rest(),
        "poly-square" => poly_square(),
        "sin-exp" => sin_exp(),
        "softplus-max" => softplus_max(),
        "x-plus-rest-squares" => x_plus_rest_squares(),
        "constant" => constant(1.0),
        other => return Err(Error::UnknownTarget(other.to_string())),
    })
}
