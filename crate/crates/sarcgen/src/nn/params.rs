//! Named parameter storage, initialization, and the Adam optimizer with
//! linear warmup. Parameter order is insertion order and is part of the
//! checkpoint format, so it must stay deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::Grads;
use crate::nn::rng::SeededRng;
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Shape(format!("duplicate parameter {name}")));
        }
        self.names.push(name.to_string());
        self.tensors.push(t);
        let idx = self.tensors.len() - 1;
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.index_of(name)?])
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    /// True when both sets hold the same names with the same shapes,
    /// in the same order.
    pub fn congruent(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|(a, b)| a.shape() == b.shape())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Gaussian init with the given std.
pub fn normal_init(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Tensor { rows, cols, data }
}

/// Adam with bias correction and linear LR warmup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, warmup_steps: usize) -> Self {
        let m = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.rows, t.cols))
            .collect();
        let v = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.rows, t.cols))
            .collect();
        Adam {
            lr,
            warmup_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// Effective learning rate after warmup scaling at optimizer step `t`
    /// (1-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * (t as f64 / self.warmup_steps as f64).min(1.0)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn apply(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<f64> {
        self.step += 1;
        let lr = self.lr_at(self.step);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for idx in 0..params.len() {
            let Some(g) = grads.get(idx) else { continue };
            if g.shape() != params.tensor(idx).shape() {
                return Err(Error::Shape(format!(
                    "gradient shape mismatch for {}",
                    params.name(idx)
                )));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let t = params.tensor_mut(idx);
            for k in 0..t.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m.data[k] / bc1;
                let vhat = v.data[k] / bc2;
                t.data[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_and_lookup() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::zeros(2, 3)).unwrap();
        ps.insert("b", Tensor::zeros(1, 1)).unwrap();
        assert_eq!(ps.index_of("a").unwrap(), 0);
        assert_eq!(ps.get("b").unwrap().shape(), (1, 1));
        assert!(ps.insert("a", Tensor::zeros(1, 1)).is_err());
        assert!(ps.index_of("c").is_err());
    }

    #[test]
    fn warmup_ramp() {
        let ps = ParamSet::new();
        let adam = Adam::new(&ps, 1e-3, 100);
        assert!((adam.lr_at(1) - 1e-5).abs() < 1e-15);
        assert!((adam.lr_at(50) - 5e-4).abs() < 1e-15);
        assert!((adam.lr_at(100) - 1e-3).abs() < 1e-15);
        assert!((adam.lr_at(5000) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::scalar(3.0)).unwrap();
        let mut adam = Adam::new(&ps, 0.1, 0);
        for _ in 0..200 {
            // d/dx of x^2
            let x = ps.get("x").unwrap().at(0, 0);
            let grads = Grads {
                by_param: vec![Some(Tensor::scalar(2.0 * x))],
            };
            adam.apply(&mut ps, &grads).unwrap();
        }
        assert!(ps.get("x").unwrap().at(0, 0).abs() < 0.05);
    }

    #[test]
    fn congruence() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::zeros(2, 2)).unwrap();
        let mut b = ParamSet::new();
        b.insert("w", Tensor::zeros(2, 2)).unwrap();
        assert!(a.congruent(&b));
        let mut c = ParamSet::new();
        c.insert("w", Tensor::zeros(2, 3)).unwrap();
        assert!(!a.congruent(&c));
    }
}
