//! Gated-Fusion Layer: a trainable task-conditioned mixture over the
//! normalized encoder layers.
//!
//! For task k with gate row w_k, the fused representation is
//! `h_k = softmax(w_k / t) · H^norm` — a convex combination of the M
//! normalized layer states, selected by the task's one-hot row (Eq. 3).
//! Rows are zero-initialized, so a fresh task starts from the uniform
//! mixture; the very low temperature lets tiny logit gaps commit to a layer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::encoder::NormalizedStack;
use super::{ModelError, Result};
use crate::numerics::{kernels, ParameterSet, Tape, Tensor, Var};

/// Name of the gate weight matrix inside the parameter set.
pub const GATE_PARAM: &str = "gate.w";

/// Default softmax temperature of the gate.
pub const GATE_TEMPERATURE: f64 = 0.0005;

/// Gate bookkeeping: temperature plus the task → row registry. The weight
/// matrix itself lives in the [`ParameterSet`] under [`GATE_PARAM`] so the
/// optimizer and freeze mask treat it like any other parameter.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GateRegistry {
    temperature: f64,
    layers: usize,
    rows: BTreeMap<String, usize>,
}

/// Tape handles produced by [`GateRegistry::fuse_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct FusedVars {
    /// `[T, d]` fused representation h_k.
    pub fused: Var,
    /// `[1, M]` gate distribution for the task row.
    pub gate: Var,
}

impl GateRegistry {
    pub fn new(layers: usize, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(ModelError::Numerics(
                crate::numerics::NumericsError::InvalidTemperature(temperature),
            ));
        }
        if layers == 0 {
            return Err(ModelError::BadEncoderConfig("gate over 0 layers".into()));
        }
        Ok(GateRegistry {
            temperature,
            layers,
            rows: BTreeMap::new(),
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn layer_count(&self) -> usize {
        self.layers
    }

    pub fn task_count(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, task_id: &str) -> Result<usize> {
        self.rows
            .get(task_id)
            .copied()
            .ok_or_else(|| ModelError::UnknownTask(task_id.to_string()))
    }

    pub fn is_registered(&self, task_id: &str) -> bool {
        self.rows.contains_key(task_id)
    }

    /// Append a zero row for a new task and return its row index.
    pub fn register_task(&mut self, params: &mut ParameterSet, task_id: &str) -> Result<usize> {
        if self.rows.contains_key(task_id) {
            return Err(ModelError::TaskAlreadyRegistered(task_id.to_string()));
        }
        let row = self.rows.len();
        if params.contains(GATE_PARAM) {
            let old = params.get(GATE_PARAM)?;
            debug_assert_eq!(old.shape(), &[row, self.layers]);
            let mut values = old.values().to_vec();
            values.extend(std::iter::repeat(0.0).take(self.layers));
            params.replace(GATE_PARAM, Tensor::new(vec![row + 1, self.layers], values)?)?;
        } else {
            debug_assert_eq!(row, 0);
            params.insert(GATE_PARAM, Tensor::zeros(vec![1, self.layers]))?;
        }
        self.rows.insert(task_id.to_string(), row);
        Ok(row)
    }

    /// Gate distribution of a task, gradient-free route. Matches the tape
    /// route bitwise (same kernel, same operation order).
    pub fn gate_weights(&self, params: &ParameterSet, task_id: &str) -> Result<Vec<f64>> {
        let row = self.row(task_id)?;
        let w = params.get(GATE_PARAM)?;
        let m = self.layers;
        let logits = &w.values()[row * m..(row + 1) * m];
        let mut out = vec![0.0; m];
        kernels::softmax_rows(logits, 1, m, self.temperature, false, &mut out);
        Ok(out)
    }

    /// Eq. (3) on the autodiff tape. `w_var` must be a tape leaf of the
    /// [`GATE_PARAM`] tensor (one leaf shared across the whole batch, so the
    /// gradient accumulates on a single node).
    pub fn fuse_on_tape(
        &self,
        tape: &mut Tape,
        w_var: Var,
        task_id: &str,
        stack: &NormalizedStack,
    ) -> Result<FusedVars> {
        let row_index = self.row(task_id)?;
        if stack.layer_count() != self.layers {
            return Err(ModelError::Numerics(
                crate::numerics::NumericsError::DimensionMismatch {
                    op: "fuse",
                    left: vec![self.layers],
                    right: vec![stack.layer_count()],
                },
            ));
        }
        let row = tape.row(w_var, row_index)?;
        let gate = tape.softmax_rows(row, self.temperature, false)?;
        let mats = stack.layers().to_vec();
        let fused = tape.lin_comb(gate, mats, vec![stack.frames, stack.width])?;
        Ok(FusedVars { fused, gate })
    }

    /// Eq. (3) without a tape: the fused `[T, d]` frames.
    pub fn fuse_eval(
        &self,
        params: &ParameterSet,
        task_id: &str,
        stack: &NormalizedStack,
    ) -> Result<Vec<f64>> {
        if stack.layer_count() != self.layers {
            return Err(ModelError::Numerics(
                crate::numerics::NumericsError::DimensionMismatch {
                    op: "fuse",
                    left: vec![self.layers],
                    right: vec![stack.layer_count()],
                },
            ));
        }
        let gate = self.gate_weights(params, task_id)?;
        let mut out = vec![0.0; stack.frames * stack.width];
        for (g, layer) in gate.iter().zip(stack.layers()) {
            for (o, v) in out.iter_mut().zip(layer.iter()) {
                *o += g * v;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encoder::{normalize_stack, EncoderStates};
    use crate::rng::rng_for;
    use std::sync::Arc;

    fn registry_with_tasks(n: usize) -> (GateRegistry, ParameterSet) {
        let mut gate = GateRegistry::new(4, GATE_TEMPERATURE).unwrap();
        let mut params = ParameterSet::new();
        for i in 0..n {
            gate.register_task(&mut params, &format!("task{i}")).unwrap();
        }
        (gate, params)
    }

    fn random_stack(m: usize, t: usize, d: usize, seed: u64) -> NormalizedStack {
        let mut rng = rng_for(seed, &[m as u64, t as u64]);
        let layers = (0..m)
            .map(|_| Tensor::randn(vec![t, d], 1.0, &mut rng))
            .collect();
        normalize_stack(&EncoderStates {
            layers,
            frames: t,
            width: d,
        })
    }

    #[test]
    fn registration_appends_zero_rows_in_order() {
        let (gate, params) = registry_with_tasks(3);
        assert_eq!(gate.row("task0").unwrap(), 0);
        assert_eq!(gate.row("task1").unwrap(), 1);
        assert_eq!(gate.row("task2").unwrap(), 2);
        let w = params.get(GATE_PARAM).unwrap();
        assert_eq!(w.shape(), &[3, 4]);
        assert!(w.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn registration_keeps_existing_rows_bitwise() {
        let (mut gate, mut params) = registry_with_tasks(1);
        let tweaked = Tensor::new(vec![1, 4], vec![0.1, -0.2, 0.3, 0.77]).unwrap();
        params.replace(GATE_PARAM, tweaked.clone()).unwrap();
        gate.register_task(&mut params, "later").unwrap();
        let w = params.get(GATE_PARAM).unwrap();
        assert_eq!(w.shape(), &[2, 4]);
        for (a, b) in w.values()[..4].iter().zip(tweaked.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(w.values()[4..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let (mut gate, mut params) = registry_with_tasks(1);
        assert!(matches!(
            gate.register_task(&mut params, "task0"),
            Err(ModelError::TaskAlreadyRegistered(_))
        ));
    }

    #[test]
    fn unregistered_task_is_an_error() {
        let (gate, params) = registry_with_tasks(1);
        assert!(matches!(
            gate.gate_weights(&params, "ghost"),
            Err(ModelError::UnknownTask(_))
        ));
    }

    #[test]
    fn zero_row_gate_is_uniform_and_fuse_is_layer_mean() {
        let (gate, params) = registry_with_tasks(1);
        let stack = random_stack(4, 3, 8, 11);
        let weights = gate.gate_weights(&params, "task0").unwrap();
        for w in &weights {
            assert!((w - 0.25).abs() <= 1e-12);
        }
        let fused = gate.fuse_eval(&params, "task0", &stack).unwrap();
        for i in 0..fused.len() {
            let mean: f64 = stack.layers().iter().map(|l| l[i]).sum::<f64>() / 4.0;
            assert!((fused[i] - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn gate_rows_are_convex_weights() {
        let (gate, mut params) = registry_with_tasks(2);
        params
            .replace(
                GATE_PARAM,
                Tensor::new(
                    vec![2, 4],
                    vec![0.001, -0.002, 0.0005, 0.0, 0.3, 0.1, -0.4, 0.2],
                )
                .unwrap(),
            )
            .unwrap();
        for task in ["task0", "task1"] {
            let w = gate.gate_weights(&params, task).unwrap();
            assert!(w.iter().all(|v| *v >= 0.0));
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "row sum {sum}");
        }
    }

    #[test]
    fn near_one_hot_row_selects_its_layer() {
        let (gate, mut params) = registry_with_tasks(1);
        // A 0.01 logit margin is enormous at temperature 0.0005.
        params
            .replace(
                GATE_PARAM,
                Tensor::new(vec![1, 4], vec![0.0, 0.01, 0.0, 0.0]).unwrap(),
            )
            .unwrap();
        let stack = random_stack(4, 2, 8, 5);
        let fused = gate.fuse_eval(&params, "task0", &stack).unwrap();
        for (f, v) in fused.iter().zip(stack.layer(1).iter()) {
            assert!((f - v).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_matches_direct_weighted_sum_oracle() {
        let (gate, mut params) = registry_with_tasks(1);
        // Temperature 1.0 for a soft mixture the oracle can reproduce.
        let gate = GateRegistry {
            temperature: 1.0,
            ..gate
        };
        params
            .replace(
                GATE_PARAM,
                Tensor::new(vec![1, 4], vec![0.4, -0.1, 0.9, 0.2]).unwrap(),
            )
            .unwrap();
        let stack = random_stack(4, 2, 8, 19);
        let fused = gate.fuse_eval(&params, "task0", &stack).unwrap();
        // Independent oracle: explicit exp / sum softmax, explicit sum.
        let logits = [0.4, -0.1, 0.9, 0.2];
        let max = 0.9f64;
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for i in 0..fused.len() {
            let mut expect = 0.0;
            for (m, e) in exps.iter().enumerate() {
                expect += e / z * stack.layer(m)[i];
            }
            assert!((fused[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_and_eval_fusion_agree_bitwise() {
        let (gate, mut params) = registry_with_tasks(2);
        params
            .replace(
                GATE_PARAM,
                Tensor::new(
                    vec![2, 4],
                    vec![0.0003, -0.0001, 0.0, 0.0002, 0.1, 0.0, 0.0, -0.1],
                )
                .unwrap(),
            )
            .unwrap();
        let stack = random_stack(4, 3, 8, 23);
        for task in ["task0", "task1"] {
            let eval = gate.fuse_eval(&params, task, &stack).unwrap();
            let mut tape = Tape::new();
            let w = tape.leaf(params.get(GATE_PARAM).unwrap());
            let vars = gate.fuse_on_tape(&mut tape, w, task, &stack).unwrap();
            for (a, b) in eval.iter().zip(tape.values(vars.fused)) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn gradient_from_one_task_leaves_other_rows_exactly_zero() {
        let (gate, mut params) = registry_with_tasks(3);
        // Make requires_grad stick on the gate tensor.
        let w = params.get_mut(GATE_PARAM).unwrap();
        w.set_requires_grad(true);
        let stack = random_stack(4, 2, 8, 31);
        let mut tape = Tape::new();
        let w_var = tape.leaf(params.get(GATE_PARAM).unwrap());
        let vars = gate.fuse_on_tape(&mut tape, w_var, "task1", &stack).unwrap();
        let loss = tape
            .mse_to(vars.fused, Arc::new(vec![0.5; 16]))
            .unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(w_var).unwrap();
        assert_eq!(grad.len(), 12);
        for (i, g) in grad.iter().enumerate() {
            if (4..8).contains(&i) {
                continue; // task1's own row may be anything
            }
            assert_eq!(g.to_bits(), 0.0f64.to_bits(), "row cell {i} leaked {g}");
        }
        // The owned row did receive signal.
        assert!(grad[4..8].iter().any(|g| *g != 0.0));
    }
}
