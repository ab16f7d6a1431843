//! Reverse-mode automatic differentiation over scalars, parameter storage
//! with adaptive-moment updates, and finite-difference gradient checking.
//!
//! Numeric code that must be differentiable is written once, generic over
//! [`Scalar`]. Instantiated with `f64` it is a plain value computation;
//! instantiated with [`Var`] every primitive is recorded on a [`Tape`].

mod dual;
mod params;
mod tape;

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub use dual::Dual;
pub use params::{AdamConfig, ParamGroup, ParamStore};
pub use tape::{Adjoints, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum DomainError {
    #[error("logarithm of non-positive value {0}")]
    Log(f64),
    #[error("square root of negative value {0}")]
    Sqrt(f64),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("output is not recorded on this tape")]
    NotOnTape,
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("gradient shape mismatch for group `{group}`: expected {expected}, got {got}")]
    Shape {
        group: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Real-valued type that the differentiable code paths are generic over.
///
/// `min`/`max` route the whole gradient to the first argument on ties;
/// `clamp`, `relu` and `abs` use one-sided subgradients at their kinks.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    fn constant(v: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Result<Self, DomainError>;
    fn sqrt(self) -> Result<Self, DomainError>;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn atan2(self, x: Self) -> Self;
    fn sigmoid(self) -> Self;
    fn tanh(self) -> Self;
    fn relu(self) -> Self;
    /// `ln(1 + e^x)`, evaluated without overflow.
    fn softplus(self) -> Self;
    fn abs(self) -> Self;
    fn min(self, other: Self) -> Self;
    fn max(self, other: Self) -> Self;
    fn clamp(self, lo: f64, hi: f64) -> Self;

    fn select(cond: bool, a: Self, b: Self) -> Self {
        if cond {
            a
        } else {
            b
        }
    }

    /// `1 - self`.
    fn one_minus(self) -> Self {
        Self::constant(1.0) - self
    }
}

impl Scalar for f64 {
    fn value(self) -> f64 {
        self
    }

    fn constant(v: f64) -> Self {
        v
    }

    fn exp(self) -> Self {
        f64::exp(self)
    }

    fn ln(self) -> Result<Self, DomainError> {
        if self > 0.0 {
            Ok(f64::ln(self))
        } else {
            Err(DomainError::Log(self))
        }
    }

    fn sqrt(self) -> Result<Self, DomainError> {
        if self >= 0.0 {
            Ok(f64::sqrt(self))
        } else {
            Err(DomainError::Sqrt(self))
        }
    }

    fn sin(self) -> Self {
        f64::sin(self)
    }

    fn cos(self) -> Self {
        f64::cos(self)
    }

    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }

    fn sigmoid(self) -> Self {
        if self >= 0.0 {
            1.0 / (1.0 + (-self).exp())
        } else {
            let e = self.exp();
            e / (1.0 + e)
        }
    }

    fn tanh(self) -> Self {
        f64::tanh(self)
    }

    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }

    fn softplus(self) -> Self {
        self.max(0.0) + (-self.abs()).exp().ln_1p()
    }

    fn abs(self) -> Self {
        f64::abs(self)
    }

    fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }

    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }

    fn clamp(self, lo: f64, hi: f64) -> Self {
        if self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }
}

/// Maximum relative error between an analytic gradient and central
/// differences of `f` at `x`.
///
/// Per coordinate: `|analytic - fd| / max(1e-8, |fd|)`.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        let fd = (hi - lo) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
        worst = worst.max(err);
    }
    worst
}

/// Evaluates `f` on a fresh tape and returns its value and gradient.
pub fn value_and_grad<F>(f: F, x: &[f64]) -> Result<(f64, Vec<f64>), DiffError>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>, DiffError>,
{
    let tape = Tape::new();
    let vars: Vec<_> = x.iter().map(|&v| tape.leaf(v)).collect();
    let y = f(&vars)?;
    let adj = tape.backward(&[(y, 1.0)])?;
    Ok((y.value(), vars.iter().map(|v| adj.get(*v)).collect()))
}
