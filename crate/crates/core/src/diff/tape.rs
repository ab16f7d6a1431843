//! Scalar reverse-mode tape.
//!
//! Every node stores the local partial derivatives with respect to its
//! operands at recording time, so the backward sweep is a single reverse
//! pass over a flat edge list. Nodes are appended in evaluation order, which
//! makes the recording order a valid topological order.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::{DiffError, DomainError, Scalar};

#[derive(Default)]
struct TapeInner {
    /// `edge_start[i]..edge_start[i + 1]` indexes the operands of node `i`.
    edge_start: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

/// Recording of primitive operations.
///
/// The tape is single-writer: recording goes through a `RefCell`, so a tape
/// is `Send` but not `Sync`. Parallel work uses one tape per worker.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        let inner = TapeInner {
            edge_start: vec![0],
            ..Default::default()
        };
        Self {
            inner: RefCell::new(inner),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().edge_start.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node while keeping the allocations.
    ///
    /// Requires exclusive access, so no [`Var`] can outlive the reset.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.edge_start.truncate(1);
        inner.parents.clear();
        inner.partials.clear();
    }

    /// Creates an independent variable.
    pub fn leaf(&self, value: f64) -> Var<'_> {
        let idx = self.push_node(std::iter::empty());
        Var {
            value,
            node: Some((self, idx)),
        }
    }

    /// Creates a node with explicit operand partials. Operands that are
    /// constants are skipped; if every operand is constant the result is a
    /// constant too.
    pub fn custom<'t>(&'t self, value: f64, operands: &[(Var<'t>, f64)]) -> Var<'t> {
        if operands.iter().all(|(v, _)| v.node.is_none()) {
            return Var::constant(value);
        }
        let idx = self.push_node(
            operands
                .iter()
                .filter_map(|(v, d)| v.node.map(|(_, i)| (i, *d))),
        );
        Var {
            value,
            node: Some((self, idx)),
        }
    }

    /// Like [`Tape::custom`] but always records a node, even when every
    /// operand is constant, so adjoints can be read back for it later.
    pub fn recorded<'t>(&'t self, value: f64, operands: &[(Var<'t>, f64)]) -> Var<'t> {
        let idx = self.push_node(
            operands
                .iter()
                .filter_map(|(v, d)| v.node.map(|(_, i)| (i, *d))),
        );
        Var {
            value,
            node: Some((self, idx)),
        }
    }

    fn push_node(&self, edges: impl Iterator<Item = (u32, f64)>) -> u32 {
        let mut inner = self.inner.borrow_mut();
        let idx = (inner.edge_start.len() - 1) as u32;
        for (p, d) in edges {
            debug_assert!(p < idx);
            inner.parents.push(p);
            inner.partials.push(d);
        }
        let end = inner.parents.len() as u32;
        inner.edge_start.push(end);
        idx
    }

    /// Reverse sweep from a set of seeded outputs.
    ///
    /// Returns the adjoint of every node. Seeds on the same node add up.
    pub fn backward(&self, seeds: &[(Var<'_>, f64)]) -> Result<Adjoints, DiffError> {
        let mut adjoints = Adjoints {
            values: vec![0.0; self.len()],
        };
        self.backward_into(seeds, &mut adjoints)?;
        Ok(adjoints)
    }

    /// Reverse sweep that accumulates into existing adjoints.
    pub fn backward_into(
        &self,
        seeds: &[(Var<'_>, f64)],
        adjoints: &mut Adjoints,
    ) -> Result<(), DiffError> {
        let n = self.len();
        if adjoints.values.len() < n {
            adjoints.values.resize(n, 0.0);
        }
        let mut local = vec![0.0; n];
        let mut top = 0usize;
        for (v, seed) in seeds {
            let (tape, idx) = v.node.ok_or(DiffError::NotOnTape)?;
            if !std::ptr::eq(tape, self) {
                return Err(DiffError::NotOnTape);
            }
            local[idx as usize] += seed;
            top = top.max(idx as usize + 1);
        }
        let inner = self.inner.borrow();
        for i in (0..top).rev() {
            let a = local[i];
            if a == 0.0 {
                continue;
            }
            let (s, e) = (inner.edge_start[i] as usize, inner.edge_start[i + 1] as usize);
            for k in s..e {
                local[inner.parents[k] as usize] += a * inner.partials[k];
            }
        }
        for (acc, l) in adjoints.values.iter_mut().zip(local) {
            *acc += l;
        }
        Ok(())
    }
}

/// Adjoints produced by a backward sweep, indexed by node.
#[derive(Clone, Debug)]
pub struct Adjoints {
    values: Vec<f64>,
}

impl Adjoints {
    /// Adjoint of `v`; constants have adjoint 0.
    pub fn get(&self, v: Var<'_>) -> f64 {
        match v.node {
            Some((_, i)) => self.values.get(i as usize).copied().unwrap_or(0.0),
            None => 0.0,
        }
    }
}

/// A real value with an optional node on a [`Tape`].
///
/// Without a node the value behaves exactly like a plain `f64`; operations
/// between constants never touch a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    value: f64,
    node: Option<(&'t Tape, u32)>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.node {
            Some((_, i)) => write!(f, "Var({} @{})", self.value, i),
            None => write!(f, "Var({})", self.value),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(value: f64) -> Self {
        Var { value, node: None }
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    pub fn index(&self) -> Option<usize> {
        self.node.map(|(_, i)| i as usize)
    }

    fn tape(&self) -> Option<&'t Tape> {
        self.node.map(|(t, _)| t)
    }

    fn unary(self, value: f64, d: f64) -> Self {
        match self.node {
            None => Var::constant(value),
            Some((tape, i)) => Var {
                value,
                node: Some((tape, tape.push_node(std::iter::once((i, d))))),
            },
        }
    }

    fn binary(self, other: Self, value: f64, da: f64, db: f64) -> Self {
        let tape = match self.tape().or(other.tape()) {
            None => return Var::constant(value),
            Some(t) => t,
        };
        let edges = self
            .node
            .map(|(_, i)| (i, da))
            .into_iter()
            .chain(other.node.map(|(_, i)| (i, db)));
        Var {
            value,
            node: Some((tape, tape.push_node(edges))),
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.binary(rhs, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.unary(self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.unary(self.value / rhs, 1.0 / rhs)
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(self) -> f64 {
        self.value
    }

    fn constant(v: f64) -> Self {
        Var::constant(v)
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }

    fn ln(self) -> Result<Self, DomainError> {
        let v = self.value.ln_checked()?;
        Ok(self.unary(v, 1.0 / self.value))
    }

    fn sqrt(self) -> Result<Self, DomainError> {
        let s = self.value.sqrt_checked()?;
        // Subgradient 0 at the origin instead of +inf.
        let d = if s > 0.0 { 0.5 / s } else { 0.0 };
        Ok(self.unary(s, d))
    }

    fn sin(self) -> Self {
        self.unary(self.value.sin(), self.value.cos())
    }

    fn cos(self) -> Self {
        self.unary(self.value.cos(), -self.value.sin())
    }

    fn atan2(self, x: Self) -> Self {
        let (y, xv) = (self.value, x.value);
        let r2 = y * y + xv * xv;
        let (dy, dx) = if r2 > 0.0 {
            (xv / r2, -y / r2)
        } else {
            (0.0, 0.0)
        };
        self.binary(x, y.atan2(xv), dy, dx)
    }

    fn sigmoid(self) -> Self {
        let s = Scalar::sigmoid(self.value);
        self.unary(s, s * (1.0 - s))
    }

    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn relu(self) -> Self {
        if self.value > 0.0 {
            self
        } else {
            self.unary(0.0, 0.0)
        }
    }

    fn softplus(self) -> Self {
        let v = Scalar::softplus(self.value);
        self.unary(v, Scalar::sigmoid(self.value))
    }

    fn abs(self) -> Self {
        if self.value >= 0.0 {
            self
        } else {
            -self
        }
    }

    fn min(self, other: Self) -> Self {
        if self.value <= other.value {
            self
        } else {
            other
        }
    }

    fn max(self, other: Self) -> Self {
        if self.value >= other.value {
            self
        } else {
            other
        }
    }

    fn clamp(self, lo: f64, hi: f64) -> Self {
        if self.value < lo {
            self.unary(lo, 0.0)
        } else if self.value > hi {
            self.unary(hi, 0.0)
        } else {
            self
        }
    }
}

trait CheckedReal {
    fn ln_checked(self) -> Result<f64, DomainError>;
    fn sqrt_checked(self) -> Result<f64, DomainError>;
}

impl CheckedReal for f64 {
    fn ln_checked(self) -> Result<f64, DomainError> {
        if self > 0.0 {
            Ok(self.ln())
        } else {
            Err(DomainError::Log(self))
        }
    }

    fn sqrt_checked(self) -> Result<f64, DomainError> {
        if self >= 0.0 {
            Ok(self.sqrt())
        } else {
            Err(DomainError::Sqrt(self))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_slope_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(0.0);
        let y = x.sigmoid();
        let adj = tape.backward(&[(y, 1.0)]).unwrap();
        assert_eq!(adj.get(x), 0.25);
    }

    #[test]
    fn square_and_log() {
        let tape = Tape::new();
        let x = tape.leaf(3.0);
        let y = x * x;
        assert_eq!(tape.backward(&[(y, 1.0)]).unwrap().get(x), 6.0);

        let tape = Tape::new();
        let x = tape.leaf(2.0);
        let y = x.ln().unwrap();
        assert_eq!(tape.backward(&[(y, 1.0)]).unwrap().get(x), 0.5);
    }

    #[test]
    fn sum_of_squares() {
        let tape = Tape::new();
        let xs: Vec<_> = (0..10).map(|i| tape.leaf(i as f64 * 0.7 - 2.0)).collect();
        let y = xs.iter().fold(Var::constant(0.0), |acc, &x| acc + x * x);
        let adj = tape.backward(&[(y, 1.0)]).unwrap();
        for x in &xs {
            assert_eq!(adj.get(*x), 2.0 * x.value());
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let a = tape.leaf(0.3);
        let b = tape.leaf(-1.1);
        let y = (a * b + a.exp()).sigmoid();
        let mut adj = tape.backward(&[(y, 1.0)]).unwrap();
        let once = (adj.get(a), adj.get(b));
        tape.backward_into(&[(y, 1.0)], &mut adj).unwrap();
        assert_eq!(adj.get(a), 2.0 * once.0);
        assert_eq!(adj.get(b), 2.0 * once.1);
    }

    #[test]
    fn constant_output_is_rejected() {
        let tape = Tape::new();
        let c = Var::constant(1.0);
        assert!(matches!(
            tape.backward(&[(c, 1.0)]),
            Err(DiffError::NotOnTape)
        ));
        let other = Tape::new();
        let x = other.leaf(1.0);
        assert!(tape.backward(&[(x, 1.0)]).is_err());
    }

    #[test]
    fn domain_errors_are_explicit() {
        let tape = Tape::new();
        let x = tape.leaf(-1.0);
        assert!(x.ln().is_err());
        assert!(x.sqrt().is_err());
        assert!(Scalar::ln(0.0f64).is_err());
    }

    #[test]
    fn ties_route_to_first_argument() {
        let tape = Tape::new();
        let a = tape.leaf(1.0);
        let b = tape.leaf(1.0);
        let adj = tape.backward(&[(a.min(b), 1.0)]).unwrap();
        assert_eq!((adj.get(a), adj.get(b)), (1.0, 0.0));
        let adj = tape.backward(&[(a.max(b), 1.0)]).unwrap();
        assert_eq!((adj.get(a), adj.get(b)), (1.0, 0.0));
    }

    #[test]
    fn constants_do_not_record() {
        let tape = Tape::new();
        let x = tape.leaf(2.0);
        let c = Var::constant(3.0) * Var::constant(4.0) + 1.0;
        assert!(c.is_constant());
        assert_eq!(tape.len(), 1);
        let y = x * c;
        assert_eq!(tape.len(), 2);
        assert_eq!(tape.backward(&[(y, 1.0)]).unwrap().get(x), 13.0);
    }

    #[test]
    fn reset_reuses_tape() {
        let mut tape = Tape::new();
        {
            let x = tape.leaf(1.0);
            let _ = x * x;
        }
        assert_eq!(tape.len(), 2);
        tape.reset();
        assert!(tape.is_empty());
        let x = tape.leaf(4.0);
        let y = x.sqrt().unwrap();
        assert_eq!(tape.backward(&[(y, 1.0)]).unwrap().get(x), 0.25);
    }
}
