//! Differentiable computation core: dense f64 tensors, a reverse-mode tape,
//! AdamW with linear warmup, and finite-difference gradient verification.
//!
//! Everything is 64-bit and deterministic: identical inputs give bitwise
//! identical outputs, which the training harness and the acceptance suite
//! rely on.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod tape;

pub use gradcheck::{finite_difference_check, FdReport};
pub use optim::{adamw_step, warmup_lr, AdamW, AdamWConfig, ParameterSet};
pub use tape::{Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not match {len} values")]
    ShapeValueMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid temperature {0}: must be > 0")]
    InvalidTemperature(f64),
    #[error("invalid epsilon {0}: must be > 0")]
    InvalidEpsilon(f64),
    #[error("degenerate normalization: row width {0} < 2")]
    DegenerateNormalization(usize),
    #[error("target index {index} out of range for vocabulary size {vocab}")]
    TargetOutOfRange { index: usize, vocab: usize },
    #[error("incomplete backward: unfrozen parameter '{0}' has no gradient")]
    IncompleteBackward(String),
    #[error("gradient shape mismatch for '{name}': {got} values for {expect}-element parameter")]
    GradShapeMismatch {
        name: String,
        got: usize,
        expect: usize,
    },
    #[error("duplicate parameter name '{0}'")]
    DuplicateParameter(String),
    #[error("unknown parameter name '{0}'")]
    UnknownParameter(String),
    #[error("loss function is not deterministic: {0} vs {1} on repeated evaluation")]
    NonDeterministicLoss(f64, f64),
    #[error("probe budget {0} must be positive")]
    NoProbes(usize),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Dense row-major f64 tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(NumericsError::ShapeValueMismatch {
                shape,
                len: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite("Tensor::new"));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumericsError::DimensionMismatch {
                    op: "from_rows",
                    left: vec![r, c],
                    right: vec![row.len()],
                });
            }
            values.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], values)
    }

    /// N(0, std^2)-initialized tensor from a seeded stream.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let numel = shape.iter().product();
        let mut values = vec![0.0; numel];
        crate::rng::fill_normal(rng, std, &mut values);
        Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Row count for 2-D tensors; 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Width of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulate a gradient contribution of identical shape.
    pub fn accumulate_grad(&mut self, contribution: &[f64]) -> Result<()> {
        if contribution.len() != self.values.len() {
            return Err(NumericsError::GradShapeMismatch {
                name: String::new(),
                got: contribution.len(),
                expect: self.values.len(),
            });
        }
        match &mut self.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => self.grad = Some(contribution.to_vec()),
        }
        Ok(())
    }
}

/// `input[T,d_in] . weight[d_in,d_out] + bias[d_out]`, gradient-free route.
pub fn affine(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (t, d_in) = (input.rows(), input.cols());
    if weight.shape().len() != 2 || weight.shape()[0] != d_in {
        return Err(NumericsError::DimensionMismatch {
            op: "affine",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let d_out = weight.shape()[1];
    if bias.numel() != d_out {
        return Err(NumericsError::DimensionMismatch {
            op: "affine",
            left: weight.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; t * d_out];
    kernels::matmul(input.values(), weight.values(), t, d_in, d_out, &mut out);
    kernels::add_row_inplace(&mut out, bias.values(), t, d_out);
    Tensor::new(vec![t, d_out], out)
}

/// Per-row layer normalization, gradient-free route.
pub fn layer_norm(input: &Tensor, gain: &Tensor, bias: &Tensor, epsilon: f64) -> Result<Tensor> {
    let (t, d) = (input.rows(), input.cols());
    if d < 2 {
        return Err(NumericsError::DegenerateNormalization(d));
    }
    if epsilon <= 0.0 {
        return Err(NumericsError::InvalidEpsilon(epsilon));
    }
    if gain.numel() != d || bias.numel() != d {
        return Err(NumericsError::DimensionMismatch {
            op: "layer_norm",
            left: input.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; t * d];
    kernels::layer_norm_rows(
        input.values(),
        t,
        d,
        epsilon,
        Some(gain.values()),
        Some(bias.values()),
        &mut out,
    );
    Tensor::new(input.shape().to_vec(), out)
}

/// Max-stabilized softmax along the last axis, gradient-free route.
pub fn softmax_with_temperature(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(NumericsError::InvalidTemperature(temperature));
    }
    let cols = logits.cols();
    let rows = logits.numel() / cols.max(1);
    let mut out = vec![0.0; logits.numel()];
    kernels::softmax_rows(logits.values(), rows, cols, temperature, false, &mut out);
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, gradient-free route. Positions equal to `ignore_index` are
/// excluded from the mean.
pub fn cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    ignore_index: Option<usize>,
) -> Result<f64> {
    let (t, v) = (logits.rows(), logits.cols());
    if targets.len() != t {
        return Err(NumericsError::DimensionMismatch {
            op: "cross_entropy",
            left: vec![t, v],
            right: vec![targets.len()],
        });
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (row, &target) in targets.iter().enumerate() {
        if Some(target) == ignore_index {
            continue;
        }
        if target >= v {
            return Err(NumericsError::TargetOutOfRange {
                index: target,
                vocab: v,
            });
        }
        let x = &logits.values()[row * v..(row + 1) * v];
        total += kernels::log_sum_exp(x) - x[target];
        counted += 1;
    }
    if counted == 0 {
        return Ok(0.0);
    }
    Ok(total / counted as f64)
}
