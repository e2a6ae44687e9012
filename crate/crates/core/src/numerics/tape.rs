//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each operation appends one node (values + shape) and one op record that
//! remembers its inputs. `backward` walks the tape in reverse and routes
//! gradient contributions to every node that requires them. Gradients for
//! nodes that never receive a contribution stay `None`; a parameter row that
//! is never touched keeps exact `0.0` entries inside its gradient buffer.

use std::sync::Arc;

use super::{kernels, NumericsError, Result, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    needs: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        row: Var,
        t: usize,
        n: usize,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Relu {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    SliceCols {
        a: Var,
        cols: usize,
        lo: usize,
        hi: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
        widths: Vec<usize>,
        rows: usize,
    },
    Row {
        a: Var,
        r: usize,
        cols: usize,
    },
    GatherRows {
        a: Var,
        indices: Vec<usize>,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
        rows: usize,
        d: usize,
    },
    SoftmaxRows {
        a: Var,
        temperature: f64,
        causal: bool,
        rows: usize,
        cols: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        cols: usize,
        counted: usize,
    },
    KlToTeacher {
        logits: Var,
        teacher: Arc<Vec<f64>>,
        tau: f64,
        rows: usize,
        cols: usize,
    },
    MseTo {
        a: Var,
        target: Arc<Vec<f64>>,
    },
    LinComb {
        coeffs: Var,
        mats: Vec<Arc<Vec<f64>>>,
    },
    MeanScalars {
        parts: Vec<Var>,
    },
    WeightedSum {
        parts: Vec<(Var, f64)>,
    },
}

/// Linear autodiff tape. Create one per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, needs: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite value on tape"
        );
        self.nodes.push(Node {
            values,
            shape,
            needs,
            grad: None,
        });
        self.ops.push(op);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let shape = self.shape(v);
        match shape.len() {
            0 => (1, 1),
            1 => (1, shape[0]),
            _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
        }
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn add_grad(&mut self, v: Var, contribution: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.needs {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    // ------------------------------------------------------------------
    // Node constructors
    // ------------------------------------------------------------------

    /// Leaf from a tensor; participates in backward iff the tensor does.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.values().to_vec(),
            tensor.shape().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// Gradient-free leaf (e.g. frozen features).
    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(NumericsError::ShapeValueMismatch {
                shape,
                len: values.len(),
            });
        }
        Ok(self.push(values, shape, false, Op::Leaf))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if k != k2 {
            return Err(NumericsError::DimensionMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.values(a), self.values(b), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], needs, Op::MatMul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::DimensionMismatch {
                op: name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, shape, needs, op))
    }

    /// Broadcast-add a `[n]` (or `[1,n]`) row vector to each row of `[t,n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (t, n) = self.rows_cols(a);
        let (rr, rn) = self.rows_cols(row);
        if rr != 1 || rn != n {
            return Err(NumericsError::DimensionMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let mut out = self.values(a).to_vec();
        kernels::add_row_inplace(&mut out, self.values(row), t, n);
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(out, shape, needs, Op::AddRow { a, row, t, n }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.values(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(out, shape, needs, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.values(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(out, shape, needs, Op::Relu { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.values(a).iter().map(|x| kernels::gelu(*x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(out, shape, needs, Op::Gelu { a })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(NumericsError::DimensionMismatch {
                op: "transpose",
                left: shape,
                right: vec![],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = self.values(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(out, vec![cols, rows], needs, Op::Transpose { a, rows, cols }))
    }

    /// Columns `lo..hi` of a 2-D node.
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if lo >= hi || hi > cols {
            return Err(NumericsError::DimensionMismatch {
                op: "slice_cols",
                left: self.shape(a).to_vec(),
                right: vec![lo, hi],
            });
        }
        let width = hi - lo;
        let src = self.values(a);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + lo..r * cols + hi]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            out,
            vec![rows, width],
            needs,
            Op::SliceCols { a, cols, lo, hi },
        ))
    }

    /// Horizontally concatenate 2-D nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.rows_cols(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(NumericsError::DimensionMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.values(p)[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            vec![rows, total],
            needs,
            Op::ConcatCols {
                parts: parts.to_vec(),
                widths,
                rows,
            },
        ))
    }

    /// Row `r` of a 2-D node, as `[1, cols]`. Backward touches only row `r`
    /// of the source gradient; all other rows keep exact zeros.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if r >= rows {
            return Err(NumericsError::DimensionMismatch {
                op: "row",
                left: self.shape(a).to_vec(),
                right: vec![r],
            });
        }
        let out = self.values(a)[r * cols..(r + 1) * cols].to_vec();
        let needs = self.needs(a);
        Ok(self.push(out, vec![1, cols], needs, Op::Row { a, r, cols }))
    }

    /// Rows of `a` selected by `indices` (duplicates allowed — embeddings).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            if ix >= rows {
                return Err(NumericsError::TargetOutOfRange {
                    index: ix,
                    vocab: rows,
                });
            }
            out.extend_from_slice(&self.values(a)[ix * cols..(ix + 1) * cols]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            out,
            vec![indices.len(), cols],
            needs,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
                cols,
            },
        ))
    }

    /// Per-row layer normalization with learned gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.rows_cols(x);
        if d < 2 {
            return Err(NumericsError::DegenerateNormalization(d));
        }
        if eps <= 0.0 {
            return Err(NumericsError::InvalidEpsilon(eps));
        }
        if self.values(gain).len() != d || self.values(bias).len() != d {
            return Err(NumericsError::DimensionMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let mut out = vec![0.0; rows * d];
        kernels::layer_norm_rows(
            self.values(x),
            rows,
            d,
            eps,
            Some(self.values(gain)),
            Some(self.values(bias)),
            &mut out,
        );
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            shape,
            needs,
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
                rows,
                d,
            },
        ))
    }

    /// Row-wise temperature softmax; optionally causal (square input).
    pub fn softmax_rows(&mut self, a: Var, temperature: f64, causal: bool) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(NumericsError::InvalidTemperature(temperature));
        }
        let (rows, cols) = self.rows_cols(a);
        if causal && rows != cols {
            return Err(NumericsError::DimensionMismatch {
                op: "softmax_causal",
                left: self.shape(a).to_vec(),
                right: vec![rows, rows],
            });
        }
        let mut out = vec![0.0; rows * cols];
        kernels::softmax_rows(self.values(a), rows, cols, temperature, causal, &mut out);
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(
            out,
            shape,
            needs,
            Op::SoftmaxRows {
                a,
                temperature,
                causal,
                rows,
                cols,
            },
        ))
    }

    /// Mean token-level cross entropy of `targets` under `logits`, skipping
    /// positions whose target equals `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let (rows, cols) = self.rows_cols(logits);
        if targets.len() != rows {
            return Err(NumericsError::DimensionMismatch {
                op: "cross_entropy",
                left: vec![rows, cols],
                right: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        let mut counted = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= cols {
                return Err(NumericsError::TargetOutOfRange {
                    index: t,
                    vocab: cols,
                });
            }
            let x = &self.values(logits)[r * cols..(r + 1) * cols];
            total += kernels::log_sum_exp(x) - x[t];
            counted += 1;
        }
        let loss = if counted == 0 {
            0.0
        } else {
            total / counted as f64
        };
        let needs = self.needs(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            needs,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                cols,
                counted,
            },
        ))
    }

    /// Distillation penalty: mean over rows of
    /// `tau^2 * KL(teacher || softmax(logits / tau))`, with `teacher` given
    /// as tau-softened probability rows.
    pub fn kl_to_teacher(&mut self, logits: Var, teacher: Arc<Vec<f64>>, tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(NumericsError::InvalidTemperature(tau));
        }
        let (rows, cols) = self.rows_cols(logits);
        if teacher.len() != rows * cols {
            return Err(NumericsError::DimensionMismatch {
                op: "kl_to_teacher",
                left: vec![rows, cols],
                right: vec![teacher.len()],
            });
        }
        let mut ls = vec![0.0; rows * cols];
        kernels::log_softmax_rows(self.values(logits), rows, cols, tau, &mut ls);
        let mut total = 0.0;
        for r in 0..rows {
            for j in 0..cols {
                let p = teacher[r * cols + j];
                if p > 0.0 {
                    total += p * (p.ln() - ls[r * cols + j]);
                }
            }
        }
        let loss = tau * tau * total / rows as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            needs,
            Op::KlToTeacher {
                logits,
                teacher,
                tau,
                rows,
                cols,
            },
        ))
    }

    /// Mean squared error of a node against fixed target values.
    pub fn mse_to(&mut self, a: Var, target: Arc<Vec<f64>>) -> Result<Var> {
        let values = self.values(a);
        if target.len() != values.len() {
            return Err(NumericsError::DimensionMismatch {
                op: "mse_to",
                left: self.shape(a).to_vec(),
                right: vec![target.len()],
            });
        }
        let n = values.len() as f64;
        let loss = values
            .iter()
            .zip(target.iter())
            .map(|(x, t)| (x - t) * (x - t))
            .sum::<f64>()
            / n;
        let needs = self.needs(a);
        Ok(self.push(vec![loss], vec![1], needs, Op::MseTo { a, target }))
    }

    /// Weighted sum of constant matrices: `out = sum_m coeffs[m] * mats[m]`.
    /// Gradient flows into `coeffs` only.
    pub fn lin_comb(
        &mut self,
        coeffs: Var,
        mats: Vec<Arc<Vec<f64>>>,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let m = self.values(coeffs).len();
        if m != mats.len() || m == 0 {
            return Err(NumericsError::DimensionMismatch {
                op: "lin_comb",
                left: vec![m],
                right: vec![mats.len()],
            });
        }
        let numel: usize = shape.iter().product();
        let mut out = vec![0.0; numel];
        for (ci, mat) in self.values(coeffs).to_vec().into_iter().zip(&mats) {
            if mat.len() != numel {
                return Err(NumericsError::ShapeValueMismatch {
                    shape,
                    len: mat.len(),
                });
            }
            for (o, v) in out.iter_mut().zip(mat.iter()) {
                *o += ci * v;
            }
        }
        let needs = self.needs(coeffs);
        Ok(self.push(out, shape, needs, Op::LinComb { coeffs, mats }))
    }

    /// Mean of scalar nodes.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::NoProbes(0));
        }
        for &p in parts {
            if self.values(p).len() != 1 {
                return Err(NumericsError::DimensionMismatch {
                    op: "mean_scalars",
                    left: self.shape(p).to_vec(),
                    right: vec![1],
                });
            }
        }
        let mean = parts.iter().map(|&p| self.scalar(p)).sum::<f64>() / parts.len() as f64;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![mean],
            vec![1],
            needs,
            Op::MeanScalars {
                parts: parts.to_vec(),
            },
        ))
    }

    /// `sum_i c_i * part_i` over scalar nodes.
    pub fn weighted_sum(&mut self, parts: &[(Var, f64)]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::NoProbes(0));
        }
        for &(p, _) in parts {
            if self.values(p).len() != 1 {
                return Err(NumericsError::DimensionMismatch {
                    op: "weighted_sum",
                    left: self.shape(p).to_vec(),
                    right: vec![1],
                });
            }
        }
        let sum = parts.iter().map(|&(p, c)| c * self.scalar(p)).sum();
        let needs = parts.iter().any(|&(p, _)| self.needs(p));
        Ok(self.push(
            vec![sum],
            vec![1],
            needs,
            Op::WeightedSum {
                parts: parts.to_vec(),
            },
        ))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Gradients accumulate; call once
    /// per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values(loss).len() != 1 {
            return Err(NumericsError::DimensionMismatch {
                op: "backward",
                left: self.shape(loss).to_vec(),
                right: vec![1],
            });
        }
        if !self.scalar(loss).is_finite() {
            return Err(NumericsError::NonFinite("backward seed"));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.clone() else {
                continue;
            };
            self.route(i, &gout);
        }
        Ok(())
    }

    fn route(&mut self, i: usize, g: &[f64]) {
        // `ops[i]` can't be moved out while `self` is borrowed; match on a
        // raw pointer copy of the small metadata instead of cloning vectors.
        match &self.ops[i] {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g, self.values(b), m, n, k, &mut da);
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(self.values(a), g, m, k, n, &mut db);
                    self.add_grad(b, &db);
                }
            }
            &Op::Add { a, b } => {
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            &Op::AddRow { a, row, t, n } => {
                self.add_grad(a, g);
                if self.needs(row) {
                    let mut dr = vec![0.0; n];
                    for r in 0..t {
                        for (d, gv) in dr.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d += gv;
                        }
                    }
                    self.add_grad(row, &dr);
                }
            }
            &Op::Sub { a, b } => {
                self.add_grad(a, g);
                if self.needs(b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.add_grad(b, &neg);
                }
            }
            &Op::Mul { a, b } => {
                if self.needs(a) {
                    let da: Vec<f64> = g.iter().zip(self.values(b)).map(|(g, y)| g * y).collect();
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = g.iter().zip(self.values(a)).map(|(g, x)| g * x).collect();
                    self.add_grad(b, &db);
                }
            }
            &Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.add_grad(a, &da);
            }
            &Op::Relu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.values(a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.add_grad(a, &da);
            }
            &Op::Gelu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.values(a))
                    .map(|(g, x)| g * kernels::gelu_grad(*x))
                    .collect();
                self.add_grad(a, &da);
            }
            &Op::Transpose { a, rows, cols } => {
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = g[c * rows + r];
                    }
                }
                self.add_grad(a, &da);
            }
            &Op::SliceCols { a, cols, lo, hi } => {
                let rows = g.len() / (hi - lo);
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    da[r * cols + lo..r * cols + hi]
                        .copy_from_slice(&g[r * (hi - lo)..(r + 1) * (hi - lo)]);
                }
                self.add_grad(a, &da);
            }
            Op::ConcatCols {
                parts,
                widths,
                rows,
            } => {
                let parts = parts.clone();
                let widths = widths.clone();
                let rows = *rows;
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, w) in parts.into_iter().zip(widths) {
                    if self.needs(p) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.add_grad(p, &dp);
                    }
                    offset += w;
                }
            }
            &Op::Row { a, r, cols } => {
                let rows = self.values(a).len() / cols;
                let mut da = vec![0.0; rows * cols];
                da[r * cols..(r + 1) * cols].copy_from_slice(g);
                self.add_grad(a, &da);
            }
            Op::GatherRows { a, indices, cols } => {
                let a = *a;
                let cols = *cols;
                let indices = indices.clone();
                let mut da = vec![0.0; self.values(a).len()];
                for (pos, ix) in indices.into_iter().enumerate() {
                    for (d, gv) in da[ix * cols..(ix + 1) * cols]
                        .iter_mut()
                        .zip(&g[pos * cols..(pos + 1) * cols])
                    {
                        *d += gv;
                    }
                }
                self.add_grad(a, &da);
            }
            &Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
                rows,
                d,
            } => {
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                {
                    let xv = self.values(x);
                    let gv = self.values(gain);
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let (mean, inv_std) = kernels::row_mean_inv_std(row, eps);
                        let gr = &g[r * d..(r + 1) * d];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut xhat = vec![0.0; d];
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            xhat[j] = (row[j] - mean) * inv_std;
                            dxhat[j] = gr[j] * gv[j];
                            sum_dxhat += dxhat[j];
                            sum_dxhat_xhat += dxhat[j] * xhat[j];
                            dgain[j] += gr[j] * xhat[j];
                            dbias[j] += gr[j];
                        }
                        let dn = d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std / dn
                                * (dn * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gain, &dgain);
                self.add_grad(bias, &dbias);
            }
            &Op::SoftmaxRows {
                a,
                temperature,
                causal,
                rows,
                cols,
            } => {
                let mut da = vec![0.0; rows * cols];
                let s = &self.nodes[i].values;
                for r in 0..rows {
                    let limit = if causal { r + 1 } else { cols };
                    let srow = &s[r * cols..r * cols + limit];
                    let grow = &g[r * cols..r * cols + limit];
                    let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                    for j in 0..limit {
                        da[r * cols + j] = srow[j] * (grow[j] - dot) / temperature;
                    }
                }
                self.add_grad(a, &da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                cols,
                counted,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let ignore = *ignore;
                let cols = *cols;
                let counted = *counted;
                if counted == 0 {
                    return;
                }
                let g0 = g[0] / counted as f64;
                let mut da = vec![0.0; targets.len() * cols];
                {
                    let lv = self.values(logits);
                    let mut soft = vec![0.0; cols];
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == ignore {
                            continue;
                        }
                        let row = &lv[r * cols..(r + 1) * cols];
                        kernels::softmax_rows(row, 1, cols, 1.0, false, &mut soft);
                        for j in 0..cols {
                            da[r * cols + j] = soft[j] * g0;
                        }
                        da[r * cols + t] -= g0;
                    }
                }
                self.add_grad(logits, &da);
            }
            Op::KlToTeacher {
                logits,
                teacher,
                tau,
                rows,
                cols,
            } => {
                let logits = *logits;
                let teacher = Arc::clone(teacher);
                let (tau, rows, cols) = (*tau, *rows, *cols);
                let mut da = vec![0.0; rows * cols];
                {
                    let lv = self.values(logits);
                    let mut soft = vec![0.0; rows * cols];
                    kernels::softmax_rows(lv, rows, cols, tau, false, &mut soft);
                    let scale = g[0] * tau / rows as f64;
                    for (d, (s, p)) in da.iter_mut().zip(soft.iter().zip(teacher.iter())) {
                        *d = scale * (s - p);
                    }
                }
                self.add_grad(logits, &da);
            }
            Op::MseTo { a, target } => {
                let a = *a;
                let target = Arc::clone(target);
                let n = target.len() as f64;
                let da: Vec<f64> = self
                    .values(a)
                    .iter()
                    .zip(target.iter())
                    .map(|(x, t)| g[0] * 2.0 * (x - t) / n)
                    .collect();
                self.add_grad(a, &da);
            }
            Op::LinComb { coeffs, mats } => {
                let coeffs = *coeffs;
                let mats: Vec<Arc<Vec<f64>>> = mats.iter().map(Arc::clone).collect();
                let dc: Vec<f64> = mats
                    .iter()
                    .map(|mat| mat.iter().zip(g).map(|(v, gv)| v * gv).sum())
                    .collect();
                self.add_grad(coeffs, &dc);
            }
            Op::MeanScalars { parts } => {
                let parts = parts.clone();
                let share = g[0] / parts.len() as f64;
                for p in parts {
                    self.add_grad(p, &[share]);
                }
            }
            Op::WeightedSum { parts } => {
                let parts = parts.clone();
                for (p, c) in parts {
                    self.add_grad(p, &[g[0] * c]);
                }
            }
        }
    }

    /// Copy the accumulated gradient of `v` into tensor `t` (shape-checked).
    pub fn write_grad_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf2(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        let t = Tensor::from_rows(rows).unwrap().with_grad();
        tape.leaf(&t)
    }

    #[test]
    fn matmul_gradients_match_hand_oracle() {
        // f = sum(A.B) for A=[[1,2]], B=[[3],[4]] => f = 11.
        // df/dA = [3,4] (B^T), df/dB = [1,2]^T (A^T).
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, &[vec![1.0, 2.0]]);
        let b = leaf2(&mut tape, &[vec![3.0], vec![4.0]]);
        let prod = tape.matmul(a, b).unwrap();
        tape.backward(prod).unwrap();
        assert_eq!(tape.scalar(prod), 11.0);
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_gradient_masks_negatives() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, &[vec![2.0, -3.0]]);
        let r = tape.relu(a);
        let ones = tape.constant(vec![1.0, 1.0], vec![1, 2]).unwrap();
        let masked = tape.mul(r, ones).unwrap();
        let t = tape.transpose(masked).unwrap();
        let onesc = tape.constant(vec![1.0, 1.0], vec![1, 2]).unwrap();
        let s = tape.matmul(onesc, t).unwrap();
        // s = relu(2) + relu(-3) = 2
        tape.backward(s).unwrap();
        assert_eq!(tape.scalar(s), 2.0);
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn row_gradient_leaves_other_rows_exactly_zero() {
        let mut tape = Tape::new();
        let w = leaf2(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let r1 = tape.row(w, 1).unwrap();
        let coeff = tape.constant(vec![2.0, 7.0], vec![2, 1]).unwrap();
        let s = tape.matmul(r1, coeff).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(w).unwrap();
        assert_eq!(g, &[0.0, 0.0, 2.0, 7.0, 0.0, 0.0]);
        // Untouched rows are bit-exact zeros, not merely small.
        assert_eq!(g[0].to_bits(), 0.0f64.to_bits());
        assert_eq!(g[5].to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = leaf2(&mut tape, &[vec![0.0, 0.0, 0.0, 0.0]]);
        let loss = tape.cross_entropy(logits, &[1], None).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.scalar(loss) - 4.0f64.ln()).abs() < 1e-12);
        let g = tape.grad(logits).unwrap();
        for (j, gv) in g.iter().enumerate() {
            let expect = if j == 1 { 0.25 - 1.0 } else { 0.25 };
            assert!((gv - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_ignored_rows_get_zero_gradient() {
        let mut tape = Tape::new();
        let logits = leaf2(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let loss = tape.cross_entropy(logits, &[0, 9], Some(9)).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        assert_ne!(g[0], 0.0);
        assert_eq!(g[2], 0.0);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn kl_to_teacher_is_zero_when_logits_match_teacher() {
        // Teacher = softened softmax of the same logits => KL = 0, grad = 0.
        let mut tape = Tape::new();
        let logits = leaf2(&mut tape, &[vec![1.0, -0.5, 0.25]]);
        let tau = 2.0;
        let mut teacher = vec![0.0; 3];
        kernels::softmax_rows(&[1.0, -0.5, 0.25], 1, 3, tau, false, &mut teacher);
        let loss = tape.kl_to_teacher(logits, Arc::new(teacher), tau).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.scalar(loss).abs() < 1e-12);
        for gv in tape.grad(logits).unwrap() {
            assert!(gv.abs() < 1e-12);
        }
    }

    #[test]
    fn kl_to_teacher_hand_value_two_classes() {
        // Teacher [0.75, 0.25], logits all-zero at tau=2 => student [0.5,0.5].
        // KL = 0.75 ln(1.5) + 0.25 ln(0.5); loss = tau^2 * KL.
        let mut tape = Tape::new();
        let logits = leaf2(&mut tape, &[vec![0.0, 0.0]]);
        let loss = tape
            .kl_to_teacher(logits, Arc::new(vec![0.75, 0.25]), 2.0)
            .unwrap();
        let expect = 4.0 * (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln());
        assert!((tape.scalar(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn mse_gradient_matches_two_over_n_rule() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, &[vec![1.0, 3.0]]);
        let loss = tape.mse_to(a, Arc::new(vec![0.0, 1.0])).unwrap();
        tape.backward(loss).unwrap();
        // mean((1-0)^2, (3-1)^2) = 2.5 ; da = 2*(a-t)/2 = (a-t)
        assert!((tape.scalar(loss) - 2.5).abs() < 1e-12);
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn lin_comb_routes_gradient_to_coefficients() {
        let mut tape = Tape::new();
        let c = leaf2(&mut tape, &[vec![0.5, 0.5]]);
        let mats = vec![Arc::new(vec![1.0, 0.0]), Arc::new(vec![0.0, 2.0])];
        let mix = tape.lin_comb(c, mats, vec![1, 2]).unwrap();
        assert_eq!(tape.values(mix), &[0.5, 1.0]);
        let loss = tape.mse_to(mix, Arc::new(vec![0.0, 0.0])).unwrap();
        tape.backward(loss).unwrap();
        // loss = (0.25 + 1)/2; dmix = (0.5, 1.0); dc0 = dmix.mat0 = 0.5,
        // dc1 = dmix.mat1 = 2.0
        let g = tape.grad(c).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12);
        assert!((g[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_accumulates_duplicate_indices() {
        let mut tape = Tape::new();
        let emb = leaf2(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let picked = tape.gather_rows(emb, &[0, 0, 1]).unwrap();
        let loss = tape
            .mse_to(picked, Arc::new(vec![0.0; 6]))
            .unwrap();
        tape.backward(loss).unwrap();
        // dpicked = 2*v/6 = v/3; row0 contributes twice.
        let g = tape.grad(emb).unwrap();
        assert!((g[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((g[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let a = leaf2(&mut tape, &[vec![3.0], vec![4.0]]);
        let s = tape.matmul(c, a).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(a).is_some());
    }

    #[test]
    fn weighted_sum_scales_branch_gradients() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, &[vec![1.0]]);
        let b = leaf2(&mut tape, &[vec![2.0]]);
        let total = tape.weighted_sum(&[(a, 1.0), (b, 0.5)]).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.scalar(total), 2.0);
        assert_eq!(tape.grad(a).unwrap(), &[1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.5]);
    }

    #[test]
    fn softmax_temperature_gradient_matches_jacobian_formula() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, &[vec![0.3, -0.2, 0.1]]);
        let temp = 0.7;
        let s = tape.softmax_rows(a, temp, false).unwrap();
        let target = Arc::new(vec![1.0, 0.0, 0.0]);
        let loss = tape.mse_to(s, target).unwrap();
        tape.backward(loss).unwrap();
        // Oracle: ds_i/dx_j = s_i (delta_ij - s_j) / temp, chain with mse grad.
        let sv = tape.values(s).to_vec();
        let gl: Vec<f64> = sv
            .iter()
            .zip([1.0, 0.0, 0.0])
            .map(|(x, t)| 2.0 * (x - t) / 3.0)
            .collect();
        let g = tape.grad(a).unwrap();
        for j in 0..3 {
            let mut expect = 0.0;
            for i in 0..3 {
                let delta = if i == j { 1.0 } else { 0.0 };
                expect += gl[i] * sv[i] * (delta - sv[j]) / temp;
            }
            assert!((g[j] - expect).abs() < 1e-12, "{j}: {} vs {expect}", g[j]);
        }
    }

    #[test]
    fn layer_norm_gradient_sums_to_zero_per_row() {
        // LN output is mean-free, so d(loss)/dx must be orthogonal to shifts.
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, &[vec![0.4, -1.2, 2.0, 0.3]]);
        let gain = tape.constant(vec![1.0; 4], vec![4]).unwrap();
        let bias = tape.constant(vec![0.0; 4], vec![4]).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        let loss = tape.mse_to(y, Arc::new(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        let sum: f64 = g.iter().sum();
        assert!(sum.abs() < 1e-12, "grad row sum {sum}");
    }
}
