//! Named parameter collections and AdamW with linear warmup.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{NumericsError, Result, Tensor};

/// Ordered, named parameter collection with a freeze mask.
///
/// Iteration order is the lexicographic name order (`BTreeMap`), which makes
/// every optimizer sweep deterministic. Frozen parameters stop requiring
/// gradients and are never written by the optimizer.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, mut tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(NumericsError::DuplicateParameter(name.to_string()));
        }
        tensor.set_requires_grad(!self.frozen.contains(name));
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    /// Replace an existing parameter's values, keeping its freeze state.
    pub fn replace(&mut self, name: &str, mut tensor: Tensor) -> Result<()> {
        if !self.params.contains_key(name) {
            return Err(NumericsError::UnknownParameter(name.to_string()));
        }
        tensor.set_requires_grad(!self.frozen.contains(name));
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        let tensor = self
            .params
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?;
        tensor.set_requires_grad(false);
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn unfreeze(&mut self, name: &str) -> Result<()> {
        let tensor = self
            .params
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?;
        tensor.set_requires_grad(true);
        self.frozen.remove(name);
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(name, _)| !self.is_frozen(name))
    }

    pub fn zero_grads(&mut self) {
        for tensor in self.params.values_mut() {
            tensor.zero_grad();
        }
    }

    /// Total element count of trainable parameters.
    pub fn trainable_numel(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }
}

/// Base learning rate scaled by a linear warmup:
/// `lr(i) = base * min(1, (i + 1) / warmup_steps)` for 0-based step `i`.
/// With `warmup_steps == 0` the base rate applies from the first step.
pub fn warmup_lr(base: f64, step_index: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        return base;
    }
    base * 1.0f64.min((step_index + 1) as f64 / warmup_steps as f64)
}

/// One decoupled-weight-decay Adam update on a single parameter.
/// `t` is the 1-based update count used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    values: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(values.len(), grad.len());
    debug_assert_eq!(values.len(), m.len());
    debug_assert_eq!(values.len(), v.len());
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..values.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * values[i]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent in linear warmup.
    pub warmup_fraction: f64,
    /// Planned optimization-step budget; fixes the warmup length.
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            total_steps: 0,
        }
    }
}

impl AdamWConfig {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }
}

/// AdamW over a [`ParameterSet`]. Keeps first/second moment buffers per
/// parameter name; buffers grow in place when a parameter gains rows.
#[derive(Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step_count: usize,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step_count: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Learning rate that the next `step` call will apply.
    pub fn next_lr(&self) -> f64 {
        warmup_lr(
            self.config.learning_rate,
            self.step_count,
            self.config.warmup_steps(),
        )
    }

    /// Apply one update to every trainable parameter. Errors if any
    /// trainable parameter is missing a gradient (an incomplete backward
    /// pass); frozen parameters are left bitwise untouched.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<f64> {
        let lr = self.next_lr();
        self.step_count += 1;
        let t = self.step_count;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            if params.is_frozen(&name) {
                continue;
            }
            let tensor = params.get_mut(&name)?;
            let numel = tensor.numel();
            let grad = tensor
                .grad()
                .ok_or_else(|| NumericsError::IncompleteBackward(name.clone()))?
                .to_vec();
            if grad.len() != numel {
                return Err(NumericsError::GradShapeMismatch {
                    name: name.clone(),
                    got: grad.len(),
                    expect: numel,
                });
            }
            let m = self.first.entry(name.clone()).or_default();
            let v = self.second.entry(name).or_default();
            // A parameter may have grown (new task rows); fresh rows start
            // with zero moments.
            if m.len() != numel {
                m.resize(numel, 0.0);
                v.resize(numel, 0.0);
            }
            adamw_step(
                tensor.values_mut(),
                &grad,
                m,
                v,
                t,
                lr,
                self.config.beta1,
                self.config.beta2,
                self.config.epsilon,
                self.config.weight_decay,
            );
        }
        Ok(lr)
    }
}
