use serde::{Deserialize, Serialize};

use super::DiffError;

/// Adaptive-moment optimizer hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One named dense parameter array with its gradient accumulator and
/// optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            name: name.into(),
            values,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Applies one bias-corrected adaptive-moment step and clears the
    /// gradient accumulator.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            let g = self.grad[i];
            let m = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            self.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            self.grad[i] = 0.0;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn reset_moments(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.step = 0;
    }

    /// Appends parameters, extending gradient and moments with zeros.
    pub fn extend(&mut self, values: &[f64]) {
        self.values.extend_from_slice(values);
        let n = self.values.len();
        self.grad.resize(n, 0.0);
        self.m.resize(n, 0.0);
        self.v.resize(n, 0.0);
    }
}

/// Named collection of parameter groups.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, values: Vec<f64>) -> usize {
        self.groups.push(ParamGroup::new(name, values));
        self.groups.len() - 1
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn index_of(&self, name: &str) -> Result<usize, DiffError> {
        self.groups
            .iter()
            .position(|g| g.name == name)
            .ok_or_else(|| DiffError::UnknownGroup(name.to_string()))
    }

    pub fn group(&self, name: &str) -> Result<&ParamGroup, DiffError> {
        Ok(&self.groups[self.index_of(name)?])
    }

    pub fn group_mut(&mut self, name: &str) -> Result<&mut ParamGroup, DiffError> {
        let i = self.index_of(name)?;
        Ok(&mut self.groups[i])
    }

    /// Adds `grad` into the accumulator of `name`.
    pub fn accumulate(&mut self, name: &str, grad: &[f64]) -> Result<(), DiffError> {
        let g = self.group_mut(name)?;
        if g.grad.len() != grad.len() {
            return Err(DiffError::Shape {
                group: name.to_string(),
                expected: g.grad.len(),
                got: grad.len(),
            });
        }
        for (acc, x) in g.grad.iter_mut().zip(grad) {
            *acc += x;
        }
        Ok(())
    }

    pub fn adam_step(&mut self, name: &str, cfg: &AdamConfig) -> Result<(), DiffError> {
        self.group_mut(name)?.adam_step(cfg);
        Ok(())
    }

    pub fn adam_step_all(&mut self, cfg: &AdamConfig) {
        for g in &mut self.groups {
            g.adam_step(cfg);
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.groups {
            g.zero_grad();
        }
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar transcription of the reference update rule, kept separate
    /// from the vectorised group implementation.
    fn reference_adam(w0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut w) = (0.0, 0.0, w0);
        let mut out = vec![];
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        store.add("w", vec![1.0, -2.0]);
        store.adam_step("w", &AdamConfig::with_lr(0.1)).unwrap();
        let g = store.group("w").unwrap();
        assert_eq!(g.values, vec![1.0, -2.0]);
        assert_eq!(g.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.add("w", vec![0.0, 0.0, 0.0]);
        store.accumulate("w", &[3.0, -1e-3, 250.0]).unwrap();
        let lr = 2e-3;
        store.adam_step("w", &AdamConfig::with_lr(lr)).unwrap();
        let g = store.group("w").unwrap();
        for (w, s) in g.values.iter().zip([-1.0, 1.0, -1.0]) {
            // m_hat = g, v_hat = g^2 after bias correction.
            assert!((w - s * lr).abs() < 1e-7 * lr.max(1.0), "{w}");
        }
        assert!(g.grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn quadratic_descent_matches_reference_rule() {
        let lr = 1e-2;
        let mut store = ParamStore::new();
        store.add("w", vec![1.0]);
        let mut grads = vec![];
        let mut trace = vec![];
        for _ in 0..100 {
            let w = store.group("w").unwrap().values[0];
            grads.push(2.0 * w);
            store.accumulate("w", &[2.0 * w]).unwrap();
            store.adam_step("w", &AdamConfig::with_lr(lr)).unwrap();
            trace.push(store.group("w").unwrap().values[0]);
        }
        let reference = reference_adam(1.0, &grads, lr);
        for (a, b) in trace.iter().zip(&reference) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // From w = 1 with lr 1e-2 the iterate never reaches zero in 100
        // steps, so |w| decreases at every step.
        for pair in trace.windows(2) {
            assert!(pair[1].abs() < pair[0].abs());
        }
        assert!(trace[99] < 0.5);
    }

    #[test]
    fn unknown_group_is_an_error() {
        let mut store = ParamStore::new();
        store.add("w", vec![0.0]);
        assert!(matches!(
            store.adam_step("nope", &AdamConfig::with_lr(0.1)),
            Err(DiffError::UnknownGroup(_))
        ));
        assert!(matches!(
            store.accumulate("w", &[1.0, 2.0]),
            Err(DiffError::Shape { .. })
        ));
    }

    #[test]
    fn extend_keeps_existing_state() {
        let mut g = ParamGroup::new("t", vec![1.0]);
        g.grad[0] = 1.0;
        g.adam_step(&AdamConfig::with_lr(0.1));
        let m0 = g.m[0];
        g.extend(&[5.0, 6.0]);
        assert_eq!(g.values.len(), 3);
        assert_eq!(g.m, vec![m0, 0.0, 0.0]);
        g.reset_moments();
        assert_eq!(g.step, 0);
        assert!(g.v.iter().all(|&x| x == 0.0));
    }
}
