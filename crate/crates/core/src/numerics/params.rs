//! Trainable parameter storage and the Adam update rule.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::graph::Gradients;
use crate::numerics::tensor::Tensor;
use crate::seed::substream_rng;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameters with Adam moment state. Iteration order is the
/// alphabetical order of names, which fixes checkpoint layout and makes
/// updates independent of insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidInput(format!("duplicate parameter {name:?}")));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            ParamEntry { value, m: Tensor::zeros(&shape), v: Tensor::zeros(&shape) },
        );
        Ok(())
    }

    /// Gaussian init with the given standard deviation, seeded by the master
    /// seed and the parameter name so each tensor gets its own stream.
    pub fn insert_gaussian(&mut self, name: &str, shape: &[usize], std: f64, master_seed: u64) -> Result<()> {
        let mut rng = substream_rng(master_seed, &format!("init/{name}"));
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(format!("bad init std: {e}")))?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// Uniform init on [-bound, bound], seeded per parameter name.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], bound: f64, master_seed: u64) -> Result<()> {
        let mut rng = substream_rng(master_seed, &format!("init/{name}"));
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::filled(shape, value))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::MissingArtifact(format!("parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::MissingArtifact(format!("parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Global L2 norm of a gradient set.
    pub fn grad_norm(grads: &Gradients) -> f64 {
        grads
            .values()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients down so their global L2 norm is at most `max_norm`.
    pub fn clip_grads(grads: &mut Gradients, max_norm: f64) {
        let norm = Self::grad_norm(grads);
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
    }

    /// One Adam step with bias correction. Parameters without a gradient
    /// entry are treated as having zero gradient (their moments still decay).
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        for name in grads.keys() {
            if !self.entries.contains_key(name) {
                return Err(Error::MissingArtifact(format!("gradient for unknown parameter {name:?}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, entry) in self.entries.iter_mut() {
            let zero;
            let g = match grads.get(name) {
                Some(g) => {
                    if g.shape() != entry.value.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "adam_step",
                            detail: format!(
                                "gradient {:?} vs parameter {:?} for {name:?}",
                                g.shape(),
                                entry.value.shape()
                            ),
                        });
                    }
                    g
                }
                None => {
                    zero = Tensor::zeros(entry.value.shape());
                    &zero
                }
            };
            for i in 0..entry.value.len() {
                let gi = g.data()[i];
                let m = cfg.beta1 * entry.m.data()[i] + (1.0 - cfg.beta1) * gi;
                let v = cfg.beta2 * entry.v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
                entry.m.data_mut()[i] = m;
                entry.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                entry.value.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            entry.value.check_finite("adam_step")?;
        }
        Ok(())
    }

    pub(crate) fn raw_entries_mut(&mut self) -> &mut BTreeMap<String, ParamEntry> {
        &mut self.entries
    }
}

impl ParamEntry {
    pub(crate) fn from_value(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self { value, m: Tensor::zeros(&shape), v: Tensor::zeros(&shape) }
    }
}
