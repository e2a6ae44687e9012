//! Sequential training harness: fine-tuning, experience replay, LwF, DER++,
//! multi-task joint training, and the gated-fusion variants (single- and
//! double-stage), with a balanced replay buffer, validation-based early
//! stopping, cumulative evaluation, and learning-curve capture.
//!
//! A training *sequence* visits tasks strictly in order. After each task the
//! model is scored on the test splits of every task seen so far, filling one
//! row of the [`EvalMatrix`]; the matrix is the artifact every forgetting
//! statistic is derived from. All randomness flows through seeded streams
//! keyed by (run seed, roster id, purpose, index), so a (seed, config) pair
//! reproduces its results bitwise.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decoding::{
    build_trie, constrained_greedy_decode, parse_label, transcript_of, unconstrained_decode,
    DecodeConfig, DecodingError, PromptTemplate,
};
use crate::metrics::{
    accuracy, corpus_slot_type_f1, corpus_wer, ColumnSpec, EvalMatrix, MetricsError,
};
use crate::model::encoder::hex_string;
use crate::model::{
    Checkpoint, ModelConfig, ModelError, NormalizedStack, SpeechModel, TapeModel, GATE_PARAM,
};
use crate::numerics::{
    cross_entropy, kernels, AdamW, AdamWConfig, NumericsError, Tape, Tensor, Var,
};
use crate::rng::{label_part, mix, rng_for, shuffled_indices};
use crate::tasks::{
    few_shot_subset, vocabulary_for, MetricId, Sample, Split, TaskData, TaskKind, TaskSpec,
    TasksError,
};

#[derive(Debug, Error)]
pub enum ContinualError {
    #[error("unknown method id '{0}'")]
    UnknownMethod(String),
    #[error("duplicate task '{0}' in the training order")]
    DuplicateTask(String),
    #[error("method '{0}' requires a gated-fusion model")]
    GateRequired(&'static str),
    #[error("method '{method}' does not train sequentially; use {use_instead}")]
    NotSequential {
        method: &'static str,
        use_instead: &'static str,
    },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("task '{0}' has an empty training split")]
    EmptyTrainSplit(String),
    #[error("task '{task}' has no {split} samples to evaluate")]
    EmptyEvalSplit { task: String, split: &'static str },
    #[error("LwF needs the frozen old-model snapshot after the first task")]
    MissingOldModel,
    #[error("non-finite training loss at step {step} of '{task}'")]
    NonFiniteLoss { task: String, step: u64 },
    #[error("frozen gate matrix received a gradient at step {0}")]
    FrozenGateGradient(u64),
    #[error("frozen gate matrix changed during stage 2")]
    FrozenGateDrift,
    #[error("replay buffer holds {len} items over its capacity {capacity}")]
    BufferOverflow { len: usize, capacity: usize },
    #[error("stage {stage} failed: {source}")]
    StageFailed {
        stage: u8,
        #[source]
        source: Box<ContinualError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Decoding(#[from] DecodingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tasks(#[from] TasksError),
}

pub type Result<T> = std::result::Result<T, ContinualError>;

// Purpose tags for the seeded random streams.
const STREAM_SHUFFLE: u64 = 0x5481;
const STREAM_REPLAY: u64 = 0xba7c;
const STREAM_BUFFER: u64 = 0xb0ff;
const STREAM_STAGE1: u64 = 0xfe57;

/// The seven training methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Ft,
    Replay,
    Lwf,
    Derpp,
    Mtl,
    GflS,
    GflD,
}

impl MethodId {
    pub const ALL: [MethodId; 7] = [
        MethodId::Ft,
        MethodId::Replay,
        MethodId::Lwf,
        MethodId::Derpp,
        MethodId::Mtl,
        MethodId::GflS,
        MethodId::GflD,
    ];

    pub fn id(self) -> &'static str {
        match self {
            MethodId::Ft => "ft",
            MethodId::Replay => "replay",
            MethodId::Lwf => "lwf",
            MethodId::Derpp => "derpp",
            MethodId::Mtl => "mtl",
            MethodId::GflS => "gfl_s",
            MethodId::GflD => "gfl_d",
        }
    }

    /// Display label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            MethodId::Ft => "FT",
            MethodId::Replay => "Replay",
            MethodId::Lwf => "LwF",
            MethodId::Derpp => "DERPP",
            MethodId::Mtl => "MTL",
            MethodId::GflS => "GFL_S",
            MethodId::GflD => "GFL_D",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.id() == id)
            .ok_or_else(|| ContinualError::UnknownMethod(id.to_string()))
    }

    /// Gated-fusion methods need a model with a gate matrix.
    pub fn needs_gate(self) -> bool {
        matches!(self, MethodId::GflS | MethodId::GflD)
    }

    /// Methods that store examples in the replay buffer.
    pub fn uses_buffer(self) -> bool {
        matches!(
            self,
            MethodId::Replay | MethodId::Derpp | MethodId::GflS | MethodId::GflD
        )
    }
}

/// Method hyperparameters. [`MethodConfig::for_method`] fills the standard
/// defaults; every field stays adjustable for ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: MethodId,
    /// Maximum stored replay instances.
    pub buffer_capacity: usize,
    /// Replayed mini-batches per current-task mini-batch (each of equal
    /// size), for the replay-based methods.
    pub replay_ratio: usize,
    /// Weight of the LwF knowledge-retention term.
    pub lwf_lambda: f64,
    /// LwF distillation temperature.
    pub lwf_tau: f64,
    /// DER++ logit-distillation weight.
    pub derpp_alpha: f64,
    /// DER++ buffer cross-entropy weight.
    pub derpp_beta: f64,
    /// Gate softmax temperature for the gated-fusion methods.
    pub gfl_temperature: f64,
    /// Fraction of each training split used by stage 1 of the double-stage
    /// pipeline, in (0, 1].
    pub stage1_fraction: f64,
    /// Global multiplier on each task family's base epoch budget
    /// (40 for speaker identification, 60 for emotion recognition, 20
    /// otherwise).
    pub epoch_scale: f64,
    /// Early-stopping patience, in optimization steps since the best
    /// validation loss.
    pub patience_steps: usize,
    /// Gated-fusion methods combine the gate with experience replay by
    /// default; clearing this isolates the gate's contribution (analysis
    /// only).
    pub replay_in_gfl: bool,
}

impl MethodConfig {
    pub fn for_method(method: MethodId) -> Self {
        MethodConfig {
            method,
            buffer_capacity: 1000,
            replay_ratio: 1,
            lwf_lambda: 1.0,
            lwf_tau: 2.0,
            derpp_alpha: 0.5,
            derpp_beta: 0.5,
            gfl_temperature: crate::model::GATE_TEMPERATURE,
            stage1_fraction: 1.0,
            epoch_scale: 1.0,
            patience_steps: 1000,
            replay_in_gfl: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ContinualError::BadConfig(msg));
        if self.buffer_capacity == 0 {
            return bad("buffer capacity must be positive".into());
        }
        if self.replay_ratio == 0 {
            return bad("replay ratio must be positive".into());
        }
        if !(self.lwf_lambda.is_finite() && self.lwf_lambda >= 0.0) {
            return bad(format!("lwf lambda {} must be finite and >= 0", self.lwf_lambda));
        }
        if !(self.lwf_tau.is_finite() && self.lwf_tau > 0.0) {
            return bad(format!("lwf temperature {} must be > 0", self.lwf_tau));
        }
        for (name, v) in [("derpp alpha", self.derpp_alpha), ("derpp beta", self.derpp_beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} {v} must be finite and >= 0"));
            }
        }
        if !(self.gfl_temperature.is_finite() && self.gfl_temperature > 0.0) {
            return bad(format!("gate temperature {} must be > 0", self.gfl_temperature));
        }
        if !(self.stage1_fraction > 0.0 && self.stage1_fraction <= 1.0) {
            return bad(format!("stage-1 fraction {} outside (0, 1]", self.stage1_fraction));
        }
        if !(self.epoch_scale.is_finite() && self.epoch_scale > 0.0) {
            return bad(format!("epoch scale {} must be > 0", self.epoch_scale));
        }
        if self.patience_steps == 0 {
            return bad("early-stopping patience must be positive".into());
        }
        Ok(())
    }

    /// Scaled epoch budget for one task (at least one epoch).
    pub fn max_epochs(&self, spec: &TaskSpec) -> usize {
        ((spec.base_epochs() as f64 * self.epoch_scale).round() as usize).max(1)
    }
}

/// Optimization-loop knobs shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// AdamW settings; `total_steps` is overwritten per task so the linear
    /// warmup covers the planned budget.
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    /// Validation cadence in steps (clamped to the patience so early
    /// stopping can honor its bound).
    pub val_every: usize,
    /// Learning-curve cadence in steps.
    pub curve_every: usize,
    /// Cap on test samples per curve evaluation (`None` = full split).
    pub curve_eval_limit: Option<usize>,
    /// Decode classification tasks with the legality mask during
    /// evaluation.
    pub eval_constrained: bool,
    /// Restore the best-validation parameters at task end (otherwise keep
    /// the last step).
    pub restore_best: bool,
    /// Debug mode: train on the first mini-batch only, skipping validation
    /// and curves; a healthy pipeline drives its loss near zero.
    pub overfit_one_batch: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            optimizer: AdamWConfig::default(),
            batch_size: 16,
            val_every: 50,
            curve_every: 50,
            curve_eval_limit: None,
            eval_constrained: true,
            restore_best: true,
            overfit_one_batch: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ContinualError::BadConfig(msg));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.val_every == 0 || self.curve_every == 0 {
            return bad("validation and curve cadences must be positive".into());
        }
        if self.curve_eval_limit == Some(0) {
            return bad("curve evaluation limit must be positive when set".into());
        }
        let opt = &self.optimizer;
        if !(opt.learning_rate.is_finite() && opt.learning_rate >= 0.0) {
            return bad(format!("learning rate {} must be finite and >= 0", opt.learning_rate));
        }
        if !(0.0..=1.0).contains(&opt.warmup_fraction) {
            return bad(format!("warmup fraction {} outside [0, 1]", opt.warmup_fraction));
        }
        Ok(())
    }
}

/// Teacher-forced logits captured when an item entered the buffer
/// (`[target_len - 1, vocab]`, row-major, shared read-only).
#[derive(Debug, Clone)]
pub struct StoredLogits {
    pub rows: usize,
    pub cols: usize,
    pub values: Arc<Vec<f64>>,
}

/// One buffered example: the owning task, the frozen-encoder states and
/// target ids it is replayed with, and (for DER++ only) the logits the
/// model produced on it at insertion time.
#[derive(Debug, Clone)]
pub struct ReplayItem {
    pub task_id: String,
    pub sample_id: u64,
    pub stack: NormalizedStack,
    pub target_ids: Vec<usize>,
    pub logits: Option<StoredLogits>,
}

/// Bounded example store with the balanced boundary-insertion policy:
/// at each task boundary the capacity is re-partitioned equally over the
/// tasks seen so far (earlier tasks absorb the remainder), earlier tasks
/// are deterministically down-sampled to their new quota, and the finished
/// task fills its quota by seeded uniform sampling from its train split.
#[derive(Debug)]
pub struct ReplayBuffer {
    items: Vec<ReplayItem>,
    capacity: usize,
    store_logits: bool,
    seen: Vec<String>,
    accesses: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, store_logits: bool) -> Self {
        ReplayBuffer {
            items: Vec::new(),
            capacity,
            store_logits,
            seen: Vec::new(),
            accesses: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// How many replay batches have been drawn. Fine-tuning must leave
    /// this at zero.
    pub fn accesses(&self) -> u64 {
        self.accesses
    }

    pub fn seen_tasks(&self) -> &[String] {
        &self.seen
    }

    pub fn items(&self) -> &[ReplayItem] {
        &self.items
    }

    pub fn count_for(&self, task_id: &str) -> usize {
        self.items.iter().filter(|it| it.task_id == task_id).count()
    }

    /// Balanced insertion at the boundary of a finished task.
    pub fn insert_boundary(
        &mut self,
        model: &SpeechModel,
        data: &TaskData,
        seed: u64,
    ) -> Result<()> {
        let task_id = &data.spec.id;
        if self.seen.iter().any(|t| t == task_id) {
            return Err(ContinualError::DuplicateTask(task_id.clone()));
        }
        self.seen.push(task_id.clone());
        let k = self.seen.len();
        let base = self.capacity / k;
        let extra = self.capacity % k;
        let quota = |i: usize| base + usize::from(i < extra);

        // Down-sample each earlier task to its new quota, keeping a seeded
        // uniform subset in the original item order.
        let mut kept: Vec<ReplayItem> = Vec::new();
        for (i, tid) in self.seen[..k - 1].iter().enumerate() {
            let members: Vec<&ReplayItem> =
                self.items.iter().filter(|it| &it.task_id == tid).collect();
            let q = quota(i);
            if members.len() <= q {
                kept.extend(members.into_iter().cloned());
            } else {
                let mut rng = rng_for(seed, &[STREAM_BUFFER, k as u64, label_part(tid)]);
                let mut pick: Vec<usize> = shuffled_indices(&mut rng, members.len())
                    .into_iter()
                    .take(q)
                    .collect();
                pick.sort_unstable();
                kept.extend(pick.into_iter().map(|x| members[x].clone()));
            }
        }

        // Fill the new task's quota from its train split.
        let q_new = quota(k - 1).min(data.train.len());
        let mut rng = rng_for(seed, &[STREAM_BUFFER, k as u64, label_part(task_id)]);
        let mut pick: Vec<usize> = shuffled_indices(&mut rng, data.train.len())
            .into_iter()
            .take(q_new)
            .collect();
        pick.sort_unstable();
        for idx in pick {
            let sample = &data.train[idx];
            let stack = model.stack_for(&sample.features)?;
            let target_ids = target_ids(model, &sample.target)?;
            let logits = if self.store_logits {
                let values = model.sample_logits_eval(&stack, task_id, &target_ids)?;
                Some(StoredLogits {
                    rows: target_ids.len() - 1,
                    cols: model.vocab.len(),
                    values: Arc::new(values),
                })
            } else {
                None
            };
            kept.push(ReplayItem {
                task_id: task_id.clone(),
                sample_id: sample.id,
                stack,
                target_ids,
                logits,
            });
        }

        self.items = kept;
        if self.items.len() > self.capacity {
            return Err(ContinualError::BufferOverflow {
                len: self.items.len(),
                capacity: self.capacity,
            });
        }
        Ok(())
    }

    /// Draw `n` items uniformly with replacement. Counts as one access.
    pub fn draw(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<ReplayItem> {
        if self.items.is_empty() || n == 0 {
            return Vec::new();
        }
        self.accesses += 1;
        (0..n)
            .map(|_| self.items[rng.gen_range(0..self.items.len())].clone())
            .collect()
    }
}

/// One learning-curve record: the score of `task` while `training_task`
/// was being trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub training_task: String,
    pub task: String,
    pub metric: MetricId,
    pub score: f64,
    pub evaluated: usize,
}

/// Mutable training-run state threaded through the task loop.
#[derive(Debug, Default)]
pub struct TrainState {
    pub task_index: usize,
    pub global_step: u64,
    /// Best validation loss within the current task, and the global step
    /// that produced it.
    pub best_val_loss: Option<f64>,
    pub best_val_step: Option<u64>,
    /// Append-only learning curves across the whole run.
    pub curves: Vec<CurvePoint>,
    /// Frozen old-model snapshot, refreshed at each boundary (LwF only).
    pub old_model: Option<SpeechModel>,
}

impl TrainState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Outcome of one task's training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: String,
    pub steps: u64,
    pub max_steps: u64,
    pub final_train_loss: f64,
    pub best_val_loss: Option<f64>,
    pub best_val_step: Option<u64>,
    pub stopped_early: bool,
    pub restored_best: bool,
}

/// Callbacks for artifact persistence; every method has a no-op default.
pub trait SequenceObserver {
    /// A double-stage run is entering the given stage (1 or 2).
    fn on_stage_start(&mut self, _stage: u8) {}
    /// A learning-curve point was recorded.
    fn on_curve(&mut self, _point: &CurvePoint) {}
    /// A task finished: the model was evaluated on everything seen so far.
    fn on_task_end(
        &mut self,
        _task_index: usize,
        _model: &SpeechModel,
        _matrix: &EvalMatrix,
        _report: &TaskReport,
    ) {
    }
}

/// Observer that persists nothing.
#[derive(Debug, Default)]
pub struct NoObserver;

impl SequenceObserver for NoObserver {}

/// One training example, viewed by reference.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub task_id: &'a str,
    pub stack: &'a NormalizedStack,
    pub target: &'a [usize],
}

fn target_ids(model: &SpeechModel, words: &[String]) -> Result<Vec<usize>> {
    Ok(model.vocab.encode(words)?)
}

/// Frozen-encoder states and target ids for one split of one task,
/// computed once per task (the encoder never changes).
#[derive(Debug)]
struct Prepared {
    task_id: String,
    stacks: Vec<NormalizedStack>,
    targets: Vec<Vec<usize>>,
}

fn prepare(model: &SpeechModel, task_id: &str, samples: &[Sample]) -> Result<Prepared> {
    let mut stacks = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for sample in samples {
        stacks.push(model.stack_for(&sample.features)?);
        targets.push(target_ids(model, &sample.target)?);
    }
    Ok(Prepared {
        task_id: task_id.to_string(),
        stacks,
        targets,
    })
}

fn forward_batch(
    tape: &mut Tape,
    tm: &TapeModel,
    model: &SpeechModel,
    batch: &[BatchItem<'_>],
) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut losses = Vec::with_capacity(batch.len());
    for item in batch {
        let (l, loss) =
            model.sample_loss_on_tape(tape, tm, item.stack, item.task_id, item.target)?;
        logits.push(l);
        losses.push(loss);
    }
    Ok((logits, losses))
}

fn batch_ce(
    tape: &mut Tape,
    tm: &TapeModel,
    model: &SpeechModel,
    batch: &[BatchItem<'_>],
) -> Result<Var> {
    let (_, losses) = forward_batch(tape, tm, model, batch)?;
    Ok(tape.mean_scalars(&losses)?)
}

/// Method-specific training loss for one mini-batch, on the tape.
///
/// - `ft` / `mtl`: plain cross-entropy over the batch.
/// - `replay` and the gated-fusion methods: cross-entropy plus the
///   cross-entropy of a same-size replayed mini-batch (exactly the plain
///   loss while the buffer is empty).
/// - `lwf`: cross-entropy plus `lambda ×` the temperature-squared-scaled
///   KL divergence from the old model's softened logits to the new ones,
///   on the current inputs; the old model is required.
/// - `derpp`: cross-entropy plus `alpha ×` the mean squared error between
///   current and stored logits on a buffer draw plus `beta ×` the
///   cross-entropy on that draw's targets.
#[allow(clippy::too_many_arguments)]
pub fn method_loss(
    tape: &mut Tape,
    tm: &TapeModel,
    model: &SpeechModel,
    method: &MethodConfig,
    batch: &[BatchItem<'_>],
    buffer: &mut ReplayBuffer,
    old_model: Option<&SpeechModel>,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(ContinualError::BadConfig("empty training batch".into()));
    }
    if method.method.needs_gate() && model.gate.is_none() {
        return Err(ContinualError::GateRequired(method.method.id()));
    }
    match method.method {
        MethodId::Ft | MethodId::Mtl => batch_ce(tape, tm, model, batch),
        MethodId::Replay | MethodId::GflS | MethodId::GflD => {
            let current = batch_ce(tape, tm, model, batch)?;
            let gfl = method.method.needs_gate();
            if (gfl && !method.replay_in_gfl) || buffer.is_empty() {
                return Ok(current);
            }
            let drawn = buffer.draw(batch.len() * method.replay_ratio, rng);
            let mut losses = Vec::with_capacity(drawn.len());
            for item in &drawn {
                let (_, loss) = model.sample_loss_on_tape(
                    tape,
                    tm,
                    &item.stack,
                    &item.task_id,
                    &item.target_ids,
                )?;
                losses.push(loss);
            }
            let replay_ce = tape.mean_scalars(&losses)?;
            Ok(tape.weighted_sum(&[(current, 1.0), (replay_ce, 1.0)])?)
        }
        MethodId::Lwf => {
            let old = old_model.ok_or(ContinualError::MissingOldModel)?;
            let (logits, losses) = forward_batch(tape, tm, model, batch)?;
            let current = tape.mean_scalars(&losses)?;
            let tau = method.lwf_tau;
            let cols = model.vocab.len();
            let mut kls = Vec::with_capacity(batch.len());
            for (item, &logit_var) in batch.iter().zip(&logits) {
                let old_logits = old.sample_logits_eval(item.stack, item.task_id, item.target)?;
                let rows = item.target.len() - 1;
                let mut teacher = vec![0.0; rows * cols];
                kernels::softmax_rows(&old_logits, rows, cols, tau, false, &mut teacher);
                kls.push(tape.kl_to_teacher(logit_var, Arc::new(teacher), tau)?);
            }
            let kl = tape.mean_scalars(&kls)?;
            Ok(tape.weighted_sum(&[(current, 1.0), (kl, method.lwf_lambda)])?)
        }
        MethodId::Derpp => {
            let current = batch_ce(tape, tm, model, batch)?;
            if buffer.is_empty() {
                return Ok(current);
            }
            let drawn = buffer.draw(batch.len() * method.replay_ratio, rng);
            let mut mses = Vec::with_capacity(drawn.len());
            let mut ces = Vec::with_capacity(drawn.len());
            for item in &drawn {
                let (logit_var, ce) = model.sample_loss_on_tape(
                    tape,
                    tm,
                    &item.stack,
                    &item.task_id,
                    &item.target_ids,
                )?;
                let stored = item.logits.as_ref().ok_or_else(|| {
                    ContinualError::BadConfig("buffer item lacks stored logits".into())
                })?;
                mses.push(tape.mse_to(logit_var, Arc::clone(&stored.values))?);
                ces.push(ce);
            }
            let mse = tape.mean_scalars(&mses)?;
            let buffer_ce = tape.mean_scalars(&ces)?;
            Ok(tape.weighted_sum(&[
                (current, 1.0),
                (mse, method.derpp_alpha),
                (buffer_ce, method.derpp_beta),
            ])?)
        }
    }
}

/// Evaluation knobs for one task/split scoring pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Mask classification decoding to the legal label set.
    pub constrained: bool,
    /// Evaluate under a different prompt template than the task was
    /// generated with (`None` keeps the task's own).
    pub template_override: Option<PromptTemplate>,
    pub max_len: usize,
    /// Score only the first `n` samples of the split (`None` = all).
    pub limit: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            constrained: true,
            template_override: None,
            max_len: 32,
            limit: None,
        }
    }
}

/// One task's score under its own metric (percent-scaled: accuracy and
/// slot-type F1 in [0, 100], word error rate as a percentage).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: String,
    pub metric: MetricId,
    pub score: f64,
    pub evaluated: usize,
    /// Decodes that failed to parse as a legal label (classification
    /// only; structurally zero under constrained decoding).
    pub parse_failures: usize,
}

/// Decode-and-score one split of one task. Classification tasks decode
/// greedily (masked when `constrained`) and score exact-match accuracy;
/// generation tasks always decode unconstrained and score word error rate
/// or slot-type F1.
pub fn evaluate_task(
    model: &SpeechModel,
    data: &TaskData,
    split: Split,
    settings: &EvalSettings,
) -> Result<TaskEval> {
    let spec = &data.spec;
    let all = data.split(split);
    let n = settings.limit.map_or(all.len(), |l| l.min(all.len()));
    let samples = &all[..n];
    if samples.is_empty() {
        return Err(ContinualError::EmptyEvalSplit {
            task: spec.id.clone(),
            split: split.name(),
        });
    }
    let template = settings.template_override.unwrap_or(spec.prompt);
    let decode_cfg = DecodeConfig {
        constrained: settings.constrained,
        max_len: settings.max_len,
        template,
    };
    let metric = spec.metric();
    match spec.kind() {
        TaskKind::Classification => {
            let trie = if settings.constrained {
                Some(build_trie(spec, template, &model.vocab)?)
            } else {
                None
            };
            let mut hypotheses = Vec::with_capacity(n);
            let mut references = Vec::with_capacity(n);
            let mut parse_failures = 0usize;
            for sample in samples {
                let stack = model.stack_for(&sample.features)?;
                let decoded = match &trie {
                    Some(t) => constrained_greedy_decode(model, &stack, &spec.id, t, &decode_cfg)?,
                    None => unconstrained_decode(model, &stack, &spec.id, &decode_cfg)?,
                };
                let words = model.vocab.decode(&decoded.tokens)?;
                let parsed = parse_label(&words, spec, template);
                if parsed.is_none() {
                    parse_failures += 1;
                }
                hypotheses.push(parsed);
                references.push(sample.reference.clone());
            }
            Ok(TaskEval {
                task_id: spec.id.clone(),
                metric,
                score: accuracy(&hypotheses, &references)?,
                evaluated: n,
                parse_failures,
            })
        }
        TaskKind::Generation => {
            let mut pairs = Vec::with_capacity(n);
            for sample in samples {
                let stack = model.stack_for(&sample.features)?;
                let decoded = unconstrained_decode(model, &stack, &spec.id, &decode_cfg)?;
                let words = model.vocab.decode(&decoded.tokens)?;
                pairs.push((transcript_of(&words, spec), sample.reference.clone()));
            }
            let score = match metric {
                MetricId::Wer => corpus_wer(&pairs)? * 100.0,
                MetricId::SlotTypeF1 => corpus_slot_type_f1(&pairs)?,
                MetricId::Accuracy => {
                    return Err(ContinualError::BadConfig(format!(
                        "generation task '{}' reports accuracy",
                        spec.id
                    )))
                }
            };
            Ok(TaskEval {
                task_id: spec.id.clone(),
                metric,
                score,
                evaluated: n,
                parse_failures: 0,
            })
        }
    }
}

/// A training roster: the item stream one optimization loop consumes.
/// Single-task training uses the task's own splits; joint training uses
/// the union of every task's splits under one roster id.
struct RosterRun<'a> {
    roster_id: String,
    prepared: &'a [Prepared],
    train_items: Vec<(usize, usize)>,
    val_items: Vec<(usize, usize)>,
    curve_tasks: &'a [&'a TaskData],
    max_epochs: usize,
}

struct BestSnapshot {
    loss: f64,
    local_step: u64,
    global_step: u64,
    params: crate::numerics::ParameterSet,
}

fn validation_loss(model: &SpeechModel, run: &RosterRun<'_>) -> Result<f64> {
    let mut total = 0.0;
    for &(p, s) in &run.val_items {
        let prepared = &run.prepared[p];
        let target = &prepared.targets[s];
        let logits =
            model.sample_logits_eval(&prepared.stacks[s], &prepared.task_id, target)?;
        let rows = target.len() - 1;
        let tensor = Tensor::new(vec![rows, model.vocab.len()], logits)?;
        total += cross_entropy(&tensor, &target[1..], None)?;
    }
    Ok(total / run.val_items.len() as f64)
}

fn record_curves(
    run: &RosterRun<'_>,
    model: &SpeechModel,
    trainer: &TrainerConfig,
    state: &mut TrainState,
    observer: &mut dyn SequenceObserver,
) -> Result<()> {
    let settings = EvalSettings {
        constrained: trainer.eval_constrained,
        limit: trainer.curve_eval_limit,
        ..EvalSettings::default()
    };
    for data in run.curve_tasks {
        let eval = evaluate_task(model, data, Split::Test, &settings)?;
        let point = CurvePoint {
            step: state.global_step,
            training_task: run.roster_id.clone(),
            task: eval.task_id,
            metric: eval.metric,
            score: eval.score,
            evaluated: eval.evaluated,
        };
        observer.on_curve(&point);
        state.curves.push(point);
    }
    Ok(())
}

/// The shared mini-batch loop: epoch shuffling, method loss, AdamW with
/// warmup, periodic validation with early stopping, best-checkpoint
/// restoration, and learning-curve capture.
fn run_roster(
    run: &RosterRun<'_>,
    method: &MethodConfig,
    trainer: &TrainerConfig,
    model: &mut SpeechModel,
    buffer: &mut ReplayBuffer,
    state: &mut TrainState,
    seed: u64,
    observer: &mut dyn SequenceObserver,
) -> Result<TaskReport> {
    let n = run.train_items.len();
    if n == 0 {
        return Err(ContinualError::EmptyTrainSplit(run.roster_id.clone()));
    }
    let stream = label_part(&run.roster_id);
    let batch_size = trainer.batch_size;
    let steps_per_epoch = n.div_ceil(batch_size);
    let max_steps = (run.max_epochs * steps_per_epoch) as u64;
    let mut optimizer = AdamW::new(AdamWConfig {
        total_steps: max_steps as usize,
        ..trainer.optimizer
    });
    // Checking less often than the patience allows would overshoot the
    // early-stopping bound.
    let val_cadence = trainer.val_every.min(method.patience_steps) as u64;
    let have_val = !run.val_items.is_empty() && !trainer.overfit_one_batch;

    state.best_val_loss = None;
    state.best_val_step = None;
    let mut best: Option<BestSnapshot> = None;
    let mut local_step: u64 = 0;
    let mut last_loss = f64::NAN;
    let mut stopped_early = false;

    let update_best = |model: &SpeechModel,
                           state: &mut TrainState,
                           best: &mut Option<BestSnapshot>,
                           loss: f64,
                           local: u64| {
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            *best = Some(BestSnapshot {
                loss,
                local_step: local,
                global_step: state.global_step,
                params: model.params.clone(),
            });
            state.best_val_loss = Some(loss);
            state.best_val_step = Some(state.global_step);
            true
        } else {
            false
        }
    };

    'training: for epoch in 0..run.max_epochs {
        let order: Vec<usize> = if trainer.overfit_one_batch {
            (0..batch_size.min(n)).collect()
        } else {
            let mut rng = rng_for(seed, &[stream, STREAM_SHUFFLE, epoch as u64]);
            shuffled_indices(&mut rng, n)
        };
        for chunk in order.chunks(batch_size) {
            model.params.zero_grads();
            let mut tape = Tape::new();
            let tm = model.leaf_on_tape(&mut tape)?;
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| {
                    let (p, s) = run.train_items[i];
                    BatchItem {
                        task_id: &run.prepared[p].task_id,
                        stack: &run.prepared[p].stacks[s],
                        target: &run.prepared[p].targets[s],
                    }
                })
                .collect();
            let mut step_rng = rng_for(seed, &[stream, STREAM_REPLAY, state.global_step]);
            let loss = if method.method == MethodId::Lwf && state.old_model.is_none() {
                if state.task_index == 0 {
                    // Nothing to distill from on the first task.
                    batch_ce(&mut tape, &tm, model, &batch)?
                } else {
                    return Err(ContinualError::MissingOldModel);
                }
            } else {
                method_loss(
                    &mut tape,
                    &tm,
                    model,
                    method,
                    &batch,
                    buffer,
                    state.old_model.as_ref(),
                    &mut step_rng,
                )?
            };
            tape.backward(loss)?;
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(ContinualError::NonFiniteLoss {
                    task: run.roster_id.clone(),
                    step: state.global_step,
                });
            }
            if model.params.is_frozen(GATE_PARAM) {
                if let Some(w) = tm.gate_w {
                    if tape.grad(w).is_some() {
                        return Err(ContinualError::FrozenGateGradient(state.global_step));
                    }
                }
            }
            model.pull_grads(&tape, &tm)?;
            optimizer.step(&mut model.params)?;
            local_step += 1;
            state.global_step += 1;
            last_loss = loss_value;

            if have_val && local_step % val_cadence == 0 {
                let val = validation_loss(model, run)?;
                let improved = update_best(model, state, &mut best, val, local_step);
                if !improved {
                    let since = local_step - best.as_ref().expect("best exists").local_step;
                    if since + val_cadence > method.patience_steps as u64 {
                        stopped_early = true;
                        break 'training;
                    }
                }
            }
            if !trainer.overfit_one_batch && local_step % trainer.curve_every as u64 == 0 {
                record_curves(run, model, trainer, state, observer)?;
            }
        }
    }

    // Score the final parameters too when the loop ended off-cadence.
    if have_val && !stopped_early && local_step % val_cadence != 0 {
        let val = validation_loss(model, run)?;
        update_best(model, state, &mut best, val, local_step);
    }

    let mut restored_best = false;
    if trainer.restore_best {
        if let Some(b) = &best {
            model.params = b.params.clone();
            restored_best = true;
        }
    }

    Ok(TaskReport {
        task_id: run.roster_id.clone(),
        steps: local_step,
        max_steps,
        final_train_loss: last_loss,
        best_val_loss: best.as_ref().map(|b| b.loss),
        best_val_step: best.as_ref().map(|b| b.global_step),
        stopped_early,
        restored_best,
    })
}

/// Register a task's gate row if the model has a gate and the row does not
/// exist yet (idempotent across double-stage reuse).
fn register_if_needed(model: &mut SpeechModel, task_id: &str) -> Result<()> {
    let registered = model
        .gate
        .as_ref()
        .is_some_and(|g| g.is_registered(task_id));
    if !registered {
        model.register_task(task_id)?;
    }
    Ok(())
}

fn buffer_active(method: &MethodConfig) -> bool {
    method.method.uses_buffer() && (!method.method.needs_gate() || method.replay_in_gfl)
}

/// Train one task with the method's loss, updating the buffer access
/// pattern, state, and curves. The task's gate row (where applicable) must
/// already be registered; `curve_tasks` are the tasks evaluated at the
/// curve cadence (typically everything seen so far, current included).
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    data: &TaskData,
    curve_tasks: &[&TaskData],
    method: &MethodConfig,
    trainer: &TrainerConfig,
    model: &mut SpeechModel,
    buffer: &mut ReplayBuffer,
    state: &mut TrainState,
    seed: u64,
    observer: &mut dyn SequenceObserver,
) -> Result<TaskReport> {
    method.validate()?;
    trainer.validate()?;
    if data.train.is_empty() {
        return Err(ContinualError::EmptyTrainSplit(data.spec.id.clone()));
    }
    let prepared = vec![
        prepare(model, &data.spec.id, &data.train)?,
        prepare(model, &data.spec.id, &data.validation)?,
    ];
    let run = RosterRun {
        roster_id: data.spec.id.clone(),
        prepared: &prepared,
        train_items: (0..data.train.len()).map(|i| (0, i)).collect(),
        val_items: (0..data.validation.len()).map(|i| (1, i)).collect(),
        curve_tasks,
        max_epochs: method.max_epochs(&data.spec),
    };
    run_roster(&run, method, trainer, model, buffer, state, seed, observer)
}

/// Everything a finished sequential run produces.
#[derive(Debug)]
pub struct SequenceOutcome {
    pub matrix: EvalMatrix,
    pub reports: Vec<TaskReport>,
    pub state: TrainState,
    pub buffer: ReplayBuffer,
    pub checkpoint: Checkpoint,
}

fn check_unique_ids(tasks: &[TaskData]) -> Result<()> {
    let mut ids = BTreeSet::new();
    for task in tasks {
        if !ids.insert(task.spec.id.as_str()) {
            return Err(ContinualError::DuplicateTask(task.spec.id.clone()));
        }
    }
    Ok(())
}

/// Train the tasks strictly in order with a sequential method, evaluating
/// the union of seen test sets at every boundary.
pub fn train_sequence(
    tasks: &[TaskData],
    method: &MethodConfig,
    trainer: &TrainerConfig,
    model: &mut SpeechModel,
    seed: u64,
    observer: &mut dyn SequenceObserver,
) -> Result<SequenceOutcome> {
    method.validate()?;
    trainer.validate()?;
    if tasks.is_empty() {
        return Err(ContinualError::BadConfig("empty task order".into()));
    }
    if method.method == MethodId::Mtl {
        return Err(ContinualError::NotSequential {
            method: "mtl",
            use_instead: "run_mtl",
        });
    }
    check_unique_ids(tasks)?;
    if method.method.needs_gate() && model.gate.is_none() {
        return Err(ContinualError::GateRequired(method.method.id()));
    }

    let columns = tasks
        .iter()
        .map(|t| ColumnSpec {
            task_id: t.spec.id.clone(),
            metric: t.spec.metric(),
        })
        .collect();
    let mut matrix = EvalMatrix::new(columns);
    let mut buffer = ReplayBuffer::new(method.buffer_capacity, method.method == MethodId::Derpp);
    let mut state = TrainState::new();
    let mut reports = Vec::with_capacity(tasks.len());
    let boundary_settings = EvalSettings {
        constrained: trainer.eval_constrained,
        ..EvalSettings::default()
    };

    for (k, data) in tasks.iter().enumerate() {
        state.task_index = k;
        register_if_needed(model, &data.spec.id)?;
        let seen: Vec<&TaskData> = tasks[..=k].iter().collect();
        let report = train_task(
            data, &seen, method, trainer, model, &mut buffer, &mut state, seed, observer,
        )?;
        if buffer_active(method) {
            buffer.insert_boundary(model, data, seed)?;
        }
        if method.method == MethodId::Lwf {
            state.old_model = Some(model.clone());
        }
        for (j, past) in tasks[..=k].iter().enumerate() {
            let eval = evaluate_task(model, past, Split::Test, &boundary_settings)?;
            matrix.record(k, j, eval.score)?;
        }
        observer.on_task_end(k, model, &matrix, &report);
        reports.push(report);
    }

    Ok(SequenceOutcome {
        matrix,
        reports,
        state,
        buffer,
        checkpoint: model.to_checkpoint(),
    })
}

/// Outcome of a joint multi-task run.
#[derive(Debug)]
pub struct MtlOutcome {
    pub matrix: EvalMatrix,
    pub report: TaskReport,
    pub state: TrainState,
    pub checkpoint: Checkpoint,
}

/// Jointly train one model on the shuffled union of every task's training
/// split (task tags preserved per sample), then evaluate every task.
/// Degenerates to `ft` on a single task: same shuffles, same loss, same
/// curves.
pub fn run_mtl(
    tasks: &[TaskData],
    method: &MethodConfig,
    trainer: &TrainerConfig,
    model: &mut SpeechModel,
    seed: u64,
    observer: &mut dyn SequenceObserver,
) -> Result<MtlOutcome> {
    method.validate()?;
    trainer.validate()?;
    if method.method != MethodId::Mtl {
        return Err(ContinualError::BadConfig(format!(
            "run_mtl requires method 'mtl', got '{}'",
            method.method.id()
        )));
    }
    if tasks.is_empty() {
        return Err(ContinualError::BadConfig("empty task set".into()));
    }
    check_unique_ids(tasks)?;

    let mut prepared = Vec::with_capacity(tasks.len() * 2);
    let mut train_items = Vec::new();
    let mut val_items = Vec::new();
    for (t, data) in tasks.iter().enumerate() {
        register_if_needed(model, &data.spec.id)?;
        prepared.push(prepare(model, &data.spec.id, &data.train)?);
        prepared.push(prepare(model, &data.spec.id, &data.validation)?);
        train_items.extend((0..data.train.len()).map(|i| (2 * t, i)));
        val_items.extend((0..data.validation.len()).map(|i| (2 * t + 1, i)));
    }
    let roster_id = tasks
        .iter()
        .map(|t| t.spec.id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    // Budget the union long enough for its slowest member.
    let base = tasks
        .iter()
        .map(|t| t.spec.base_epochs())
        .max()
        .expect("non-empty");
    let max_epochs = ((base as f64 * method.epoch_scale).round() as usize).max(1);
    let curve_tasks: Vec<&TaskData> = tasks.iter().collect();
    let run = RosterRun {
        roster_id,
        prepared: &prepared,
        train_items,
        val_items,
        curve_tasks: &curve_tasks,
        max_epochs,
    };
    let mut buffer = ReplayBuffer::new(method.buffer_capacity, false);
    let mut state = TrainState::new();
    let report = run_roster(
        &run, method, trainer, model, &mut buffer, &mut state, seed, observer,
    )?;

    let columns = tasks
        .iter()
        .map(|t| ColumnSpec {
            task_id: t.spec.id.clone(),
            metric: t.spec.metric(),
        })
        .collect();
    let mut matrix = EvalMatrix::joint(columns);
    let settings = EvalSettings {
        constrained: trainer.eval_constrained,
        ..EvalSettings::default()
    };
    for (j, data) in tasks.iter().enumerate() {
        let eval = evaluate_task(model, data, Split::Test, &settings)?;
        matrix.record(0, j, eval.score)?;
    }
    observer.on_task_end(0, model, &matrix, &report);

    Ok(MtlOutcome {
        matrix,
        report,
        state,
        checkpoint: model.to_checkpoint(),
    })
}

/// SHA-256 over the gate matrix bits; stable across (de)serialization.
pub fn gate_checksum(model: &SpeechModel) -> Result<String> {
    let w = model.params.get(GATE_PARAM)?;
    let mut hasher = Sha256::new();
    for v in w.values() {
        hasher.update(v.to_bits().to_le_bytes());
    }
    Ok(hex_string(&hasher.finalize()))
}

/// Outcome of the two-stage gated-fusion pipeline; `stage2` holds the
/// reported results.
#[derive(Debug)]
pub struct DoubleStageOutcome {
    pub stage1: SequenceOutcome,
    pub stage2: SequenceOutcome,
    /// Checksum of the gate matrix shared by stage 1's final model and the
    /// whole of stage 2.
    pub gate_checksum: String,
}

/// The double-stage pipeline: stage 1 runs a full single-stage
/// (gate + decoder) sequence — optionally on a per-task stratified subset
/// at `stage1_fraction` — then stage 2 re-initializes the decoder, copies
/// the trained gate matrix, freezes it, and trains the sequence again with
/// the decoder as the only learner. The gate temperature comes from
/// `method`; `model_config.gate_temperature` is ignored.
pub fn run_gfl_double_stage(
    tasks: &[TaskData],
    method: &MethodConfig,
    trainer: &TrainerConfig,
    model_config: &ModelConfig,
    seed: u64,
    observer: &mut dyn SequenceObserver,
) -> Result<DoubleStageOutcome> {
    method.validate()?;
    trainer.validate()?;
    if method.method != MethodId::GflD {
        return Err(ContinualError::BadConfig(format!(
            "run_gfl_double_stage requires method 'gfl_d', got '{}'",
            method.method.id()
        )));
    }
    if tasks.is_empty() {
        return Err(ContinualError::BadConfig("empty task order".into()));
    }
    check_unique_ids(tasks)?;

    let specs: Vec<TaskSpec> = tasks.iter().map(|t| t.spec.clone()).collect();
    let vocab = vocabulary_for(&specs)?;
    let config = ModelConfig {
        gate_temperature: Some(method.gfl_temperature),
        ..*model_config
    };

    // Stage 1: single-stage training, optionally few-shot.
    let stage1_owned: Vec<TaskData>;
    let stage1_tasks: &[TaskData] = if method.stage1_fraction < 1.0 {
        stage1_owned = tasks
            .iter()
            .map(|data| {
                let sub_seed = mix(seed, &[STREAM_STAGE1, label_part(&data.spec.id)]);
                Ok(TaskData {
                    spec: data.spec.clone(),
                    train: few_shot_subset(
                        &data.spec,
                        &data.train,
                        method.stage1_fraction,
                        sub_seed,
                    )?,
                    validation: data.validation.clone(),
                    test: data.test.clone(),
                })
            })
            .collect::<Result<_>>()?;
        &stage1_owned
    } else {
        tasks
    };
    let stage1_method = MethodConfig {
        method: MethodId::GflS,
        ..method.clone()
    };
    let mut stage1_model = SpeechModel::build(vocab.clone(), &config)?;
    observer.on_stage_start(1);
    let stage1 = train_sequence(
        stage1_tasks,
        &stage1_method,
        trainer,
        &mut stage1_model,
        seed,
        observer,
    )
    .map_err(|e| ContinualError::StageFailed {
        stage: 1,
        source: Box::new(e),
    })?;

    // Stage 2: fresh decoder, trained gate copied in and frozen.
    let mut stage2_model = SpeechModel::build(vocab, &config)?;
    stage2_model.gate = stage1_model.gate.clone();
    stage2_model
        .params
        .insert(GATE_PARAM, stage1_model.params.get(GATE_PARAM)?.clone())?;
    stage2_model.params.freeze(GATE_PARAM)?;
    let checksum = gate_checksum(&stage2_model)?;
    observer.on_stage_start(2);
    let stage2 = train_sequence(tasks, method, trainer, &mut stage2_model, seed, observer)
        .map_err(|e| ContinualError::StageFailed {
            stage: 2,
            source: Box::new(e),
        })?;
    if gate_checksum(&stage2_model)? != checksum {
        return Err(ContinualError::FrozenGateDrift);
    }

    Ok(DoubleStageOutcome {
        stage1,
        stage2,
        gate_checksum: checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    use crate::model::{EncoderConfig, GATE_TEMPERATURE};
    use crate::tasks::{
        generate_task_data, SplitSizes, TaskFamily, World, WorldConfig,
    };

    const RUN_SEED: u64 = 97;
    const KS: TaskFamily = TaskFamily::KeywordSpotting;
    const SID: TaskFamily = TaskFamily::SpeakerId;
    const ER: TaskFamily = TaskFamily::EmotionRecognition;

    fn tiny_spec(family: TaskFamily) -> TaskSpec {
        TaskSpec::new(
            family,
            PromptTemplate::None,
            SplitSizes {
                train: 24,
                validation: 8,
                test: 8,
            },
        )
    }

    fn make_tasks(families: &[TaskFamily]) -> Vec<TaskData> {
        let encoder = EncoderConfig::default();
        let world = World::new(WorldConfig::default(), &encoder).unwrap();
        families
            .iter()
            .map(|&f| generate_task_data(&tiny_spec(f), &world, RUN_SEED).unwrap())
            .collect()
    }

    fn shared_tasks() -> &'static [TaskData] {
        static TASKS: OnceLock<Vec<TaskData>> = OnceLock::new();
        TASKS.get_or_init(|| make_tasks(&[KS, SID, ER]))
    }

    fn tiny_model(tasks: &[TaskData], gated: bool) -> SpeechModel {
        let specs: Vec<TaskSpec> = tasks.iter().map(|t| t.spec.clone()).collect();
        let vocab = vocabulary_for(&specs).unwrap();
        let config = ModelConfig {
            encoder: EncoderConfig::default(),
            gate_temperature: gated.then_some(GATE_TEMPERATURE),
            decoder_seed: 7,
            ..ModelConfig::default()
        };
        SpeechModel::build(vocab, &config).unwrap()
    }

    fn tiny_method(method: MethodId) -> MethodConfig {
        MethodConfig {
            epoch_scale: 0.05,
            buffer_capacity: 12,
            ..MethodConfig::for_method(method)
        }
    }

    fn tiny_trainer() -> TrainerConfig {
        TrainerConfig {
            batch_size: 8,
            val_every: 1000,
            curve_every: 1_000_000,
            curve_eval_limit: Some(4),
            ..TrainerConfig::default()
        }
    }

    fn params_json(params: &crate::numerics::ParameterSet) -> String {
        serde_json::to_string(params).unwrap()
    }

    fn batch_of<'a>(prep: &'a Prepared, idx: &[usize]) -> Vec<BatchItem<'a>> {
        idx.iter()
            .map(|&i| BatchItem {
                task_id: &prep.task_id,
                stack: &prep.stacks[i],
                target: &prep.targets[i],
            })
            .collect()
    }

    #[test]
    fn method_ids_round_trip() {
        for method in MethodId::ALL {
            assert_eq!(MethodId::from_id(method.id()).unwrap(), method);
            assert!(!method.label().is_empty());
        }
        assert!(matches!(
            MethodId::from_id("sgd"),
            Err(ContinualError::UnknownMethod(_))
        ));
        assert!(MethodId::GflS.needs_gate() && MethodId::GflD.needs_gate());
        assert!(!MethodId::Ft.uses_buffer());
        assert!(MethodId::Replay.uses_buffer() && MethodId::Derpp.uses_buffer());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let cases: Vec<MethodConfig> = vec![
            MethodConfig {
                buffer_capacity: 0,
                ..MethodConfig::for_method(MethodId::Replay)
            },
            MethodConfig {
                replay_ratio: 0,
                ..MethodConfig::for_method(MethodId::Replay)
            },
            MethodConfig {
                lwf_tau: 0.0,
                ..MethodConfig::for_method(MethodId::Lwf)
            },
            MethodConfig {
                lwf_lambda: f64::NAN,
                ..MethodConfig::for_method(MethodId::Lwf)
            },
            MethodConfig {
                derpp_alpha: -0.5,
                ..MethodConfig::for_method(MethodId::Derpp)
            },
            MethodConfig {
                gfl_temperature: 0.0,
                ..MethodConfig::for_method(MethodId::GflS)
            },
            MethodConfig {
                stage1_fraction: 0.0,
                ..MethodConfig::for_method(MethodId::GflD)
            },
            MethodConfig {
                stage1_fraction: 1.5,
                ..MethodConfig::for_method(MethodId::GflD)
            },
            MethodConfig {
                epoch_scale: 0.0,
                ..MethodConfig::for_method(MethodId::Ft)
            },
            MethodConfig {
                patience_steps: 0,
                ..MethodConfig::for_method(MethodId::Ft)
            },
        ];
        for config in cases {
            assert!(
                matches!(config.validate(), Err(ContinualError::BadConfig(_))),
                "accepted: {config:?}"
            );
        }
        assert!(MethodConfig::for_method(MethodId::Derpp).validate().is_ok());

        for trainer in [
            TrainerConfig {
                batch_size: 0,
                ..TrainerConfig::default()
            },
            TrainerConfig {
                val_every: 0,
                ..TrainerConfig::default()
            },
            TrainerConfig {
                curve_eval_limit: Some(0),
                ..TrainerConfig::default()
            },
        ] {
            assert!(matches!(
                trainer.validate(),
                Err(ContinualError::BadConfig(_))
            ));
        }
        assert!(TrainerConfig::default().validate().is_ok());
    }

    #[test]
    fn epoch_budget_scales_and_floors_at_one() {
        let spec = tiny_spec(KS); // base budget: 20 epochs
        let mut method = MethodConfig::for_method(MethodId::Ft);
        assert_eq!(method.max_epochs(&spec), 20);
        method.epoch_scale = 0.05;
        assert_eq!(method.max_epochs(&spec), 1);
        method.epoch_scale = 0.001;
        assert_eq!(method.max_epochs(&spec), 1);
        assert_eq!(method.max_epochs(&tiny_spec(ER)), 1); // 60 * 0.001 rounds to 0
    }

    #[test]
    fn buffer_balances_quotas_across_boundaries() {
        let tasks = shared_tasks();
        let model = tiny_model(tasks, false);
        let mut buffer = ReplayBuffer::new(10, false);

        buffer.insert_boundary(&model, &tasks[0], RUN_SEED).unwrap();
        assert_eq!(buffer.len(), 10);
        assert_eq!(buffer.count_for("KS"), 10);

        buffer.insert_boundary(&model, &tasks[1], RUN_SEED).unwrap();
        assert_eq!(buffer.count_for("KS"), 5);
        assert_eq!(buffer.count_for("SID"), 5);

        buffer.insert_boundary(&model, &tasks[2], RUN_SEED).unwrap();
        assert_eq!(buffer.count_for("KS"), 4);
        assert_eq!(buffer.count_for("SID"), 3);
        assert_eq!(buffer.count_for("ER"), 3);
        assert_eq!(buffer.len(), 10);
        assert_eq!(buffer.seen_tasks(), ["KS", "SID", "ER"]);

        // Re-inserting a seen task is a caller bug.
        assert!(matches!(
            buffer.insert_boundary(&model, &tasks[0], RUN_SEED),
            Err(ContinualError::DuplicateTask(_))
        ));
    }

    #[test]
    fn buffer_quota_respects_small_train_splits() {
        let tasks = shared_tasks();
        let model = tiny_model(tasks, false);
        // Capacity exceeds the 24-sample train split: everything fits.
        let mut buffer = ReplayBuffer::new(100, false);
        buffer.insert_boundary(&model, &tasks[0], RUN_SEED).unwrap();
        assert_eq!(buffer.len(), 24);
    }

    #[test]
    fn buffer_stores_logits_only_when_asked() {
        let tasks = shared_tasks();
        let model = tiny_model(tasks, false);

        let mut with_logits = ReplayBuffer::new(6, true);
        with_logits
            .insert_boundary(&model, &tasks[0], RUN_SEED)
            .unwrap();
        for item in with_logits.items() {
            let logits = item.logits.as_ref().expect("stored logits");
            assert_eq!(logits.rows, item.target_ids.len() - 1);
            assert_eq!(logits.cols, model.vocab.len());
            assert_eq!(logits.values.len(), logits.rows * logits.cols);
        }

        let mut plain = ReplayBuffer::new(6, false);
        plain.insert_boundary(&model, &tasks[0], RUN_SEED).unwrap();
        assert!(plain.items().iter().all(|item| item.logits.is_none()));
    }

    #[test]
    fn buffer_insertion_is_deterministic() {
        let tasks = shared_tasks();
        let model = tiny_model(tasks, false);
        let kept = |buffer: &ReplayBuffer| -> Vec<(String, u64)> {
            buffer
                .items()
                .iter()
                .map(|item| (item.task_id.clone(), item.sample_id))
                .collect()
        };
        let fill = || {
            let mut buffer = ReplayBuffer::new(7, false);
            buffer.insert_boundary(&model, &tasks[0], RUN_SEED).unwrap();
            buffer.insert_boundary(&model, &tasks[1], RUN_SEED).unwrap();
            buffer
        };
        let a = fill();
        let b = fill();
        assert_eq!(kept(&a), kept(&b));
        assert_eq!(a.count_for("KS"), 4); // 7 = 4 + 3, earlier task first
        assert_eq!(a.count_for("SID"), 3);
    }

    #[test]
    fn buffer_draw_counts_accesses() {
        let tasks = shared_tasks();
        let model = tiny_model(tasks, false);
        let mut buffer = ReplayBuffer::new(5, false);
        buffer.insert_boundary(&model, &tasks[0], RUN_SEED).unwrap();

        let mut rng = rng_for(1, &[2]);
        let drawn = buffer.draw(20, &mut rng);
        assert_eq!(drawn.len(), 20); // with replacement: more than stored
        assert_eq!(buffer.accesses(), 1);
        assert!(buffer.draw(0, &mut rng).is_empty());
        assert_eq!(buffer.accesses(), 1); // empty draws do not count
    }

    #[test]
    fn replay_equals_plain_ce_while_buffer_is_empty() {
        let tasks = shared_tasks();
        let model = tiny_model(tasks, false);
        let prep = prepare(&model, "KS", &tasks[0].train).unwrap();
        let batch = batch_of(&prep, &[0, 1, 2, 3]);
        let mut buffer = ReplayBuffer::new(4, false);

        let mut value = |method: MethodId| {
            let mut tape = Tape::new();
            let tm = model.leaf_on_tape(&mut tape).unwrap();
            let mut rng = rng_for(0, &[0]);
            let loss = method_loss(
                &mut tape,
                &tm,
                &model,
                &MethodConfig::for_method(method),
                &batch,
                &mut buffer,
                None,
                &mut rng,
            )
            .unwrap();
            tape.scalar(loss)
        };
        let replay = value(MethodId::Replay);
        let ft = value(MethodId::Ft);
        assert_eq!(replay.to_bits(), ft.to_bits());
        assert_eq!(buffer.accesses(), 0);
    }

    #[test]
    fn lwf_with_identical_old_model_reduces_to_plain_ce() {
        let tasks = shared_tasks();
        let model = tiny_model(tasks, false);
        let old = model.clone();
        let prep = prepare(&model, "KS", &tasks[0].train).unwrap();
        let batch = batch_of(&prep, &[0, 1, 2]);
        let mut buffer = ReplayBuffer::new(4, false);

        let mut value = |method: MethodId, old_model: Option<&SpeechModel>| {
            let mut tape = Tape::new();
            let tm = model.leaf_on_tape(&mut tape).unwrap();
            let mut rng = rng_for(0, &[0]);
            let loss = method_loss(
                &mut tape,
                &tm,
                &model,
                &MethodConfig::for_method(method),
                &batch,
                &mut buffer,
                old_model,
                &mut rng,
            )
            .unwrap();
            tape.scalar(loss)
        };
        let lwf = value(MethodId::Lwf, Some(&old));
        let ft = value(MethodId::Ft, None);
        // The teacher equals the student, so the distillation term is zero.
        assert!((lwf - ft).abs() <= 1e-10, "lwf {lwf} vs ce {ft}");
    }

    #[test]
    fn lwf_without_snapshot_is_an_error() {
        let tasks = shared_tasks();
        let model = tiny_model(tasks, false);
        let prep = prepare(&model, "KS", &tasks[0].train).unwrap();
        let batch = batch_of(&prep, &[0]);
        let mut buffer = ReplayBuffer::new(4, false);
        let mut tape = Tape::new();
        let tm = model.leaf_on_tape(&mut tape).unwrap();
        let mut rng = rng_for(0, &[0]);
        let result = method_loss(
            &mut tape,
            &tm,
            &model,
            &MethodConfig::for_method(MethodId::Lwf),
            &batch,
            &mut buffer,
            None,
            &mut rng,
        );
        assert!(matches!(result, Err(ContinualError::MissingOldModel)));
    }

    #[test]
    fn derpp_loss_decomposes_into_its_terms() {
        let tasks = shared_tasks();
        let model = tiny_model(tasks, false);
        // Stored logits come from this same model, so the distillation
        // (mean-squared-error) term is exactly zero.
        let mut buffer = ReplayBuffer::new(4, true);
        buffer.insert_boundary(&model, &tasks[0], RUN_SEED).unwrap();
        let prep = prepare(&model, "KS", &tasks[0].train).unwrap();
        let batch = batch_of(&prep, &[0, 1]);
        let config = MethodConfig::for_method(MethodId::Derpp);

        let mut tape = Tape::new();
        let tm = model.leaf_on_tape(&mut tape).unwrap();
        let mut rng = rng_for(3, &[1]);
        let total = method_loss(
            &mut tape, &tm, &model, &config, &batch, &mut buffer, None, &mut rng,
        )
        .unwrap();
        let total = tape.scalar(total);

        // Reproduce the draw to compute the expected buffer term.
        let mut rng = rng_for(3, &[1]);
        let drawn = buffer.draw(batch.len() * config.replay_ratio, &mut rng);
        let scalar_ce = |items: &[BatchItem<'_>]| {
            let mut tape = Tape::new();
            let tm = model.leaf_on_tape(&mut tape).unwrap();
            let loss = batch_ce(&mut tape, &tm, &model, items).unwrap();
            tape.scalar(loss)
        };
        let current = scalar_ce(&batch);
        let drawn_items: Vec<BatchItem<'_>> = drawn
            .iter()
            .map(|item| BatchItem {
                task_id: &item.task_id,
                stack: &item.stack,
                target: &item.target_ids,
            })
            .collect();
        let buffer_ce = scalar_ce(&drawn_items);

        let expected = current + config.derpp_beta * buffer_ce;
        assert!(
            (total - expected).abs() <= 1e-10,
            "total {total} vs expected {expected}"
        );
    }

    #[test]
    fn gated_methods_require_a_gate() {
        let tasks = shared_tasks();
        let model = tiny_model(tasks, false);
        let prep = prepare(&model, "KS", &tasks[0].train).unwrap();
        let batch = batch_of(&prep, &[0]);
        let mut buffer = ReplayBuffer::new(4, false);
        let mut tape = Tape::new();
        let tm = model.leaf_on_tape(&mut tape).unwrap();
        let mut rng = rng_for(0, &[0]);
        let result = method_loss(
            &mut tape,
            &tm,
            &model,
            &MethodConfig::for_method(MethodId::GflS),
            &batch,
            &mut buffer,
            None,
            &mut rng,
        );
        assert!(matches!(result, Err(ContinualError::GateRequired("gfl_s"))));

        let mut model = tiny_model(&tasks[..1], false);
        let result = train_sequence(
            &tasks[..1],
            &tiny_method(MethodId::GflD),
            &tiny_trainer(),
            &mut model,
            RUN_SEED,
            &mut NoObserver,
        );
        assert!(matches!(result, Err(ContinualError::GateRequired("gfl_d"))));
    }

    #[test]
    fn overfitting_one_batch_drives_the_loss_down() {
        let tasks = shared_tasks();
        let mut model = tiny_model(&tasks[..1], false);
        let trainer = TrainerConfig {
            optimizer: AdamWConfig {
                learning_rate: 3e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            batch_size: 4,
            overfit_one_batch: true,
            restore_best: false,
            ..tiny_trainer()
        };
        // 20 base epochs * 7.5 = 150 single-batch steps.
        let method = MethodConfig {
            epoch_scale: 7.5,
            ..MethodConfig::for_method(MethodId::Ft)
        };
        let mut buffer = ReplayBuffer::new(4, false);
        let mut state = TrainState::new();
        let report = train_task(
            &tasks[0],
            &[],
            &method,
            &trainer,
            &mut model,
            &mut buffer,
            &mut state,
            RUN_SEED,
            &mut NoObserver,
        )
        .unwrap();
        assert_eq!(report.steps, 150);
        assert!(
            report.final_train_loss < 0.05,
            "loss stuck at {}",
            report.final_train_loss
        );
        assert!(!report.stopped_early);
        assert!(state.curves.is_empty());
    }

    #[test]
    fn flat_validation_stops_early_within_patience() {
        let tasks = shared_tasks();
        let mut model = tiny_model(&tasks[..1], false);
        let trainer = TrainerConfig {
            optimizer: AdamWConfig {
                learning_rate: 0.0,
                ..AdamWConfig::default()
            },
            val_every: 2,
            ..tiny_trainer()
        };
        let method = MethodConfig {
            epoch_scale: 10.0, // 200 epochs * 3 steps: far beyond the patience
            patience_steps: 6,
            ..MethodConfig::for_method(MethodId::Ft)
        };
        let mut buffer = ReplayBuffer::new(4, false);
        let mut state = TrainState::new();
        let report = train_task(
            &tasks[0],
            &[],
            &method,
            &trainer,
            &mut model,
            &mut buffer,
            &mut state,
            RUN_SEED,
            &mut NoObserver,
        )
        .unwrap();
        assert!(report.stopped_early);
        assert!(report.steps < report.max_steps);
        let best = report.best_val_step.expect("validated");
        assert!(
            report.steps - best <= method.patience_steps as u64,
            "ran {} steps past the best at {best}",
            report.steps
        );
        assert!(report.restored_best);
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let tasks = shared_tasks();
        let mut data = tasks[0].clone();
        data.train.clear();
        let mut model = tiny_model(&tasks[..1], false);
        let mut buffer = ReplayBuffer::new(4, false);
        let mut state = TrainState::new();
        let result = train_task(
            &data,
            &[],
            &tiny_method(MethodId::Ft),
            &tiny_trainer(),
            &mut model,
            &mut buffer,
            &mut state,
            RUN_SEED,
            &mut NoObserver,
        );
        assert!(matches!(result, Err(ContinualError::EmptyTrainSplit(_))));
    }

    #[test]
    fn single_task_sequence_fills_a_one_cell_matrix() {
        let tasks = shared_tasks();
        let mut model = tiny_model(&tasks[..1], false);
        let outcome = train_sequence(
            &tasks[..1],
            &tiny_method(MethodId::Ft),
            &tiny_trainer(),
            &mut model,
            RUN_SEED,
            &mut NoObserver,
        )
        .unwrap();
        assert_eq!(outcome.matrix.steps(), 1);
        assert!(outcome.matrix.is_complete());
        let eval = evaluate_task(&model, &tasks[0], Split::Test, &EvalSettings::default()).unwrap();
        assert_eq!(outcome.matrix.get(0, 0).unwrap(), eval.score);
        // Fine-tuning never touches the buffer.
        assert_eq!(outcome.buffer.accesses(), 0);
        assert!(outcome.buffer.is_empty());
        assert_eq!(outcome.reports.len(), 1);
    }

    #[test]
    fn sequence_rejects_duplicates_and_joint_methods() {
        let tasks = shared_tasks();
        let duplicated = vec![tasks[0].clone(), tasks[0].clone()];
        let mut model = tiny_model(&tasks[..1], false);
        assert!(matches!(
            train_sequence(
                &duplicated,
                &tiny_method(MethodId::Ft),
                &tiny_trainer(),
                &mut model,
                RUN_SEED,
                &mut NoObserver,
            ),
            Err(ContinualError::DuplicateTask(_))
        ));
        assert!(matches!(
            train_sequence(
                &tasks[..1],
                &tiny_method(MethodId::Mtl),
                &tiny_trainer(),
                &mut model,
                RUN_SEED,
                &mut NoObserver,
            ),
            Err(ContinualError::NotSequential { .. })
        ));
        assert!(matches!(
            run_mtl(
                &tasks[..1],
                &tiny_method(MethodId::Ft),
                &tiny_trainer(),
                &mut model,
                RUN_SEED,
                &mut NoObserver,
            ),
            Err(ContinualError::BadConfig(_))
        ));
    }

    #[test]
    fn sequences_reproduce_bitwise_across_runs() {
        let tasks = shared_tasks();
        let trainer = TrainerConfig {
            curve_every: 3,
            curve_eval_limit: Some(2),
            ..tiny_trainer()
        };
        let run = || {
            let mut model = tiny_model(&tasks[..2], false);
            let outcome = train_sequence(
                &tasks[..2],
                &tiny_method(MethodId::Replay),
                &trainer,
                &mut model,
                RUN_SEED,
                &mut NoObserver,
            )
            .unwrap();
            (outcome, model)
        };
        let (a, model_a) = run();
        let (b, model_b) = run();
        assert_eq!(a.matrix.to_csv(), b.matrix.to_csv());
        assert_eq!(params_json(&model_a.params), params_json(&model_b.params));
        assert_eq!(a.state.curves, b.state.curves);
        assert!(!a.state.curves.is_empty());
        // The second task actually replayed the first.
        assert!(a.buffer.accesses() > 0);
        assert_eq!(a.buffer.seen_tasks(), ["KS", "SID"]);
    }

    #[test]
    fn joint_training_on_one_task_matches_sequential_fine_tuning() {
        let tasks = shared_tasks();
        let trainer = TrainerConfig {
            curve_every: 2,
            curve_eval_limit: Some(2),
            ..tiny_trainer()
        };
        let mut ft_model = tiny_model(&tasks[..1], false);
        let ft = train_sequence(
            &tasks[..1],
            &tiny_method(MethodId::Ft),
            &trainer,
            &mut ft_model,
            RUN_SEED,
            &mut NoObserver,
        )
        .unwrap();

        let mut mtl_model = tiny_model(&tasks[..1], false);
        let mtl = run_mtl(
            &tasks[..1],
            &tiny_method(MethodId::Mtl),
            &trainer,
            &mut mtl_model,
            RUN_SEED,
            &mut NoObserver,
        )
        .unwrap();

        assert_eq!(params_json(&ft_model.params), params_json(&mtl_model.params));
        assert_eq!(ft.state.curves, mtl.state.curves);
        assert_eq!(
            ft.matrix.final_scores().unwrap(),
            mtl.matrix.final_scores().unwrap()
        );
        assert_eq!(mtl.matrix.steps(), 1);
        assert!(mtl.matrix.is_complete());
    }

    #[test]
    fn joint_shuffles_mix_tasks_within_epochs() {
        // The union stream must interleave tasks rather than concatenate
        // them; check that every window of one eighth of the union touches
        // both tasks.
        let tasks = shared_tasks();
        let n: usize = tasks[..2].iter().map(|t| t.train.len()).sum();
        let mut rng = rng_for(RUN_SEED, &[label_part("KS+SID"), STREAM_SHUFFLE, 0]);
        let order = shuffled_indices(&mut rng, n);
        let window = n / 8;
        for start in (0..n).step_by(window) {
            let end = (start + window).min(n);
            let has_first = order[start..end].iter().any(|&i| i < tasks[0].train.len());
            let has_second = order[start..end].iter().any(|&i| i >= tasks[0].train.len());
            assert!(
                has_first && has_second,
                "window {start}..{end} saw only one task"
            );
        }
    }

    struct StageSpy {
        stages: Vec<u8>,
        boundaries: usize,
    }

    impl SequenceObserver for StageSpy {
        fn on_stage_start(&mut self, stage: u8) {
            self.stages.push(stage);
        }
        fn on_task_end(
            &mut self,
            _task_index: usize,
            _model: &SpeechModel,
            _matrix: &EvalMatrix,
            _report: &TaskReport,
        ) {
            self.boundaries += 1;
        }
    }

    #[test]
    fn double_stage_trains_twice_and_freezes_the_gate() {
        let tasks = shared_tasks();
        let method = MethodConfig {
            stage1_fraction: 0.5,
            ..tiny_method(MethodId::GflD)
        };
        let config = ModelConfig {
            encoder: EncoderConfig::default(),
            gate_temperature: None, // overridden by the method's temperature
            decoder_seed: 7,
            ..ModelConfig::default()
        };
        let mut spy = StageSpy {
            stages: Vec::new(),
            boundaries: 0,
        };
        let outcome = run_gfl_double_stage(
            &tasks[..2],
            &method,
            &tiny_trainer(),
            &config,
            RUN_SEED,
            &mut spy,
        )
        .unwrap();

        assert_eq!(spy.stages, [1, 2]);
        assert_eq!(spy.boundaries, 4); // two tasks per stage
        assert_eq!(outcome.stage1.matrix.steps(), 2);
        assert_eq!(outcome.stage2.matrix.steps(), 2);
        assert!(outcome.stage2.matrix.is_complete());

        // The gate stage 2 trained under is bitwise the gate stage 1 ended
        // with, and it never moved.
        let bits = |tensor: &Tensor| -> Vec<u64> {
            tensor.values().iter().map(|v| v.to_bits()).collect()
        };
        let w1 = outcome.stage1.checkpoint.params.get(GATE_PARAM).unwrap();
        let w2 = outcome.stage2.checkpoint.params.get(GATE_PARAM).unwrap();
        assert_eq!(bits(w1), bits(w2));

        let mut hasher = Sha256::new();
        for v in w2.values() {
            hasher.update(v.to_bits().to_le_bytes());
        }
        assert_eq!(hex_string(&hasher.finalize()), outcome.gate_checksum);
    }
}
