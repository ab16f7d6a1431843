use std::ops::{Add, Div, Mul, Neg, Sub};

use super::{DomainError, Scalar};

/// Forward-mode dual number carrying `N` directional derivatives.
///
/// Kink conventions follow [`super::Var`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    /// Independent variable `k` of `N`.
    pub fn seed(v: f64, k: usize) -> Self {
        let mut d = [0.0; N];
        d[k] = 1.0;
        Self { v, d }
    }

    /// Value `v` with tangent `d`.
    pub fn new(v: f64, d: [f64; N]) -> Self {
        Self { v, d }
    }

    fn chain(self, v: f64, slope: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * slope),
        }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: std::array::from_fn(|k| self.d[k] + o.d[k]),
        }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: std::array::from_fn(|k| self.d[k] - o.d[k]),
        }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: std::array::from_fn(|k| self.d[k] * o.v + self.v * o.d[k]),
        }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let q = self.v * inv;
        Self {
            v: self.v / o.v,
            d: std::array::from_fn(|k| (self.d[k] - q * o.d[k]) * inv),
        }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    fn add(self, c: f64) -> Self {
        Self { v: self.v + c, ..self }
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    fn sub(self, c: f64) -> Self {
        Self { v: self.v - c, ..self }
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        self.chain(self.v * c, c)
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    fn div(self, c: f64) -> Self {
        self.chain(self.v / c, 1.0 / c)
    }
}

impl<const N: usize> Scalar for Dual<N> {
    fn value(self) -> f64 {
        self.v
    }

    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }

    fn ln(self) -> Result<Self, DomainError> {
        Ok(self.chain(Scalar::ln(self.v)?, 1.0 / self.v))
    }

    fn sqrt(self) -> Result<Self, DomainError> {
        let s = Scalar::sqrt(self.v)?;
        let slope = if s > 0.0 { 0.5 / s } else { 0.0 };
        Ok(self.chain(s, slope))
    }

    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }

    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }

    fn atan2(self, x: Self) -> Self {
        let (y, xv) = (self.v, x.v);
        let r2 = y * y + xv * xv;
        let (dy, dx) = if r2 > 0.0 {
            (xv / r2, -y / r2)
        } else {
            (0.0, 0.0)
        };
        Self {
            v: y.atan2(xv),
            d: std::array::from_fn(|k| dy * self.d[k] + dx * x.d[k]),
        }
    }

    fn sigmoid(self) -> Self {
        let s = Scalar::sigmoid(self.v);
        self.chain(s, s * (1.0 - s))
    }

    fn tanh(self) -> Self {
        let t = self.v.tanh();
        self.chain(t, 1.0 - t * t)
    }

    fn relu(self) -> Self {
        if self.v > 0.0 {
            self
        } else {
            Self::constant(0.0)
        }
    }

    fn softplus(self) -> Self {
        self.chain(Scalar::softplus(self.v), Scalar::sigmoid(self.v))
    }

    fn abs(self) -> Self {
        if self.v >= 0.0 {
            self
        } else {
            -self
        }
    }

    fn min(self, other: Self) -> Self {
        if self.v <= other.v {
            self
        } else {
            other
        }
    }

    fn max(self, other: Self) -> Self {
        if self.v >= other.v {
            self
        } else {
            other
        }
    }

    fn clamp(self, lo: f64, hi: f64) -> Self {
        if self.v < lo {
            Self::constant(lo)
        } else if self.v > hi {
            Self::constant(hi)
        } else {
            self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::value_and_grad;

    fn expr<S: Scalar>(x: S, y: S) -> Result<S, DomainError> {
        Ok((x * y).exp().ln()? + (x / y).sqrt()? * x.sin() - y.cos().tanh()
            + x.atan2(y)
            + y.softplus()
            + (x - 0.5) / 3.0
            + x.max(y).min(x * 2.0).clamp(-1.0, 5.0).relu().abs()
            + x.sigmoid() * (y + 1.0))
    }

    #[test]
    fn agrees_with_reverse_mode() {
        for (a, b) in [(1.3, 0.4), (0.2, 2.5), (-0.7, 0.9)] {
            let dual = expr(Dual::<2>::seed(a, 0), Dual::seed(b, 1));
            let Ok(dual) = dual else {
                assert!(expr(a, b).is_err());
                continue;
            };
            let (v, g) = value_and_grad(|p| Ok(expr(p[0], p[1])?), &[a, b]).unwrap();
            assert_eq!(dual.v.to_bits(), v.to_bits());
            for k in 0..2 {
                assert!((dual.d[k] - g[k]).abs() < 1e-12 * g[k].abs().max(1.0), "{k}");
            }
        }
    }
}
