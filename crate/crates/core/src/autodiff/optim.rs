//! Parameter storage and the Adam optimizer.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::rng::RngStream;

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Owns all trainable tensors of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Dense-layer weight init: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    pub fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngStream) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        self.add(name, Tensor::from_vec(fan_in, fan_out, data).expect("dense shape"))
    }

    /// Bias init: zeros, 1 x n.
    pub fn bias(&mut self, name: &str, n: usize) -> ParamId {
        self.add(name, Tensor::zeros(1, n))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }
}

/// Tracks which tape node each parameter was bound to in the current graph,
/// so gradients can be gathered back by [`ParamId`] after `backward`.
#[derive(Default)]
pub struct BoundParams {
    pairs: Vec<(ParamId, NodeId)>,
}

impl BoundParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, graph: &mut Graph, store: &ParamStore, id: ParamId) -> NodeId {
        let node = graph.leaf(store.get(id).clone());
        self.pairs.push((id, node));
        node
    }

    /// Gradient per parameter slot; `None` where the parameter was never
    /// bound or the backward pass did not reach it.
    pub fn gradients(&self, graph: &Graph, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; store.len()];
        for &(pid, nid) in &self.pairs {
            if let Some(g) = graph.grad(nid) {
                match &mut grads[pid.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => grads[pid.0] = Some(g.clone()),
                }
            }
        }
        grads
    }

    pub fn node_of(&self, id: ParamId) -> Option<NodeId> {
        self.pairs.iter().find(|(p, _)| *p == id).map(|(_, n)| *n)
    }
}

/// Adam with bias correction. Missing gradients are treated as zero.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn ensure_state(&mut self, store: &ParamStore) {
        while self.m.len() < store.len() {
            let i = self.m.len();
            let (r, c) = store.values[i].shape();
            self.m.push(Tensor::zeros(r, c));
            self.v.push(Tensor::zeros(r, c));
        }
    }

    /// One bias-corrected update over all parameters, in place.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.ensure_state(store);
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..store.len() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut store.values[i];
            match &grads[i] {
                Some(g) => {
                    debug_assert_eq!(g.shape(), p.shape(), "gradient shape mismatch");
                    for j in 0..p.len() {
                        let gj = g.data()[j];
                        let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
                        let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
                        m.data_mut()[j] = mj;
                        v.data_mut()[j] = vj;
                        let mhat = mj / bc1;
                        let vhat = vj / bc2;
                        p.data_mut()[j] -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
                    }
                }
                None => {
                    // Zero gradient: moments decay; update is zero only if
                    // the moments are zero, matching plain Adam.
                    for j in 0..m.len() {
                        let mj = self.beta1 * m.data()[j];
                        let vj = self.beta2 * v.data()[j];
                        m.data_mut()[j] = mj;
                        v.data_mut()[j] = vj;
                        let mhat = mj / bc1;
                        let vhat = vj / bc2;
                        store.values[i].data_mut()[j] -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![1.0, -2.0, 3.0]));
        let before = store.get(id).clone();
        let mut adam = Adam::new(1e-2);
        adam.apply(&mut store, &[None]);
        assert_eq!(store.get(id), &before);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With constant gradient g at t=1, bias-corrected update is
        // lr * g / (|g| + eps) which is lr in magnitude.
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![0.0]));
        let mut adam = Adam::new(1e-2);
        adam.apply(&mut store, &[Some(Tensor::row(vec![5.0]))]);
        let got = store.get(id).data()[0];
        assert!((got + 1e-2).abs() < 1e-8, "got {got}");
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = x^2, grad 2x, 500 steps at lr 1e-2 from x=1.
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0));
        let mut adam = Adam::new(1e-2);
        for _ in 0..500 {
            let x = store.get(id).scalar_value();
            adam.apply(&mut store, &[Some(Tensor::scalar(2.0 * x))]);
        }
        assert!(store.get(id).scalar_value().abs() < 1e-3);
    }

    #[test]
    fn step_counter_increases() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(0.0));
        let mut adam = Adam::new(1e-3);
        assert_eq!(adam.step_count(), 0);
        adam.apply(&mut store, &[None]);
        adam.apply(&mut store, &[None]);
        assert_eq!(adam.step_count(), 2);
    }
}
