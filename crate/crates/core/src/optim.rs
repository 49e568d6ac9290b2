//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Registers every tensor as a constant (no gradient) on `tape`.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }

    /// Writes each tensor to `<dir>/<name>.ntb`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in self.iter() {
            t.save(&dir.join(format!("{name}.ntb")))?;
        }
        Ok(())
    }

    /// Loads tensors named `names` from `dir`, in order.
    pub fn load_dir(dir: &Path, names: &[String]) -> Result<Self> {
        let mut store = ParamStore::new();
        for name in names {
            store.push(
                name.clone(),
                Tensor::load(&dir.join(format!("{name}.ntb")))?,
            );
        }
        Ok(store)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Shapes keyed by name, for manifests.
    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |t: &Tensor| vec![0.0; t.numel()];
        Adam {
            config,
            step: 0,
            m: params.tensors.iter().map(zeros).collect(),
            v: params.tensors.iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using gradients read from `tape` at `vars`
    /// (parallel to `params`). Parameters without a gradient still decay.
    pub fn step(&mut self, params: &mut ParamStore, tape: &Tape, vars: &[Var]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (slot, var) in vars.iter().enumerate() {
            let grad = tape.grad(*var);
            let p = params.tensors[slot].data_mut();
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..p.len() {
                let g = grad.as_ref().map_or(0.0, |g| g.data()[i]) + c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamStore::new();
        params.push("x", Tensor::from_vec(vec![3.0, -2.0]));
        let cfg = AdamConfig {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut adam = Adam::new(cfg, &params);
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let sq = tape.square(vars[0]).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss).unwrap();
            adam.step(&mut params, &tape, &vars);
        }
        assert!(params.get(0).data().iter().all(|v| v.abs() < 1e-3));
        assert_eq!(adam.steps_taken(), 2000);
    }

    #[test]
    fn param_store_round_trips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamStore::new();
        params.push(
            "w",
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        params.push("b", Tensor::from_vec(vec![0.5]));
        params.save_dir(dir.path()).unwrap();
        let back = ParamStore::load_dir(dir.path(), params.names()).unwrap();
        assert_eq!(back, params);
    }
}
