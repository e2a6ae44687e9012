//! Model assembly: vocabulary, frozen synthetic encoder, gated fusion,
//! and the autoregressive decoder, plus checkpoint serialization.

pub mod decoder;
pub mod encoder;
pub mod gate;
pub mod vocab;

pub use decoder::{Decoder, DecoderConfig, DecoderVars};
pub use encoder::{
    normalize_stack, EncoderConfig, EncoderStates, NormalizedStack, SyntheticEncoder,
};
pub use gate::{FusedVars, GateRegistry, GATE_PARAM, GATE_TEMPERATURE};
pub use vocab::{Vocabulary, BOS, EOS, PAD};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, ParameterSet, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown token '{0}'")]
    UnknownToken(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenIdOutOfRange { id: usize, vocab: usize },
    #[error("duplicate token '{0}'")]
    DuplicateToken(String),
    #[error("malformed token '{token}': expected {expected}")]
    MalformedToken {
        token: String,
        expected: &'static str,
    },
    #[error("feature width {found} does not match encoder input width {expected}")]
    FeatureWidthMismatch { expected: usize, found: usize },
    #[error("invalid encoder/decoder configuration: {0}")]
    BadEncoderConfig(String),
    #[error("task '{0}' is not registered")]
    UnknownTask(String),
    #[error("task '{0}' is already registered")]
    TaskAlreadyRegistered(String),
    #[error("target tag mismatch: expected '{expected}', found '{found}'")]
    TagMismatch { expected: String, found: String },
    #[error("token sequence length {len} exceeds decoder position budget {max}")]
    PositionOverflow { len: usize, max: usize },
    #[error("target of {0} tokens is too short to teacher-force")]
    TargetTooShort(usize),
    #[error("model has no gated-fusion layer but a gate operation was requested")]
    MissingGate,
    #[error("checkpoint rejected: {0}")]
    CheckpointFormat(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint (de)serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Build-time switches for a [`SpeechModel`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// `Some(temperature)` builds a gated-fusion model; `None` is the
    /// baseline model whose decoder attends to the last normalized layer.
    pub gate_temperature: Option<f64>,
    pub decoder_seed: u64,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            gate_temperature: None,
            decoder_seed: 0,
            decoder_blocks: 2,
            decoder_heads: 4,
        }
    }
}

/// The full trainable model. The encoder is frozen by construction (it is
/// not part of `params` at all); everything in `params` belongs to the
/// decoder or the gate.
#[derive(Debug, Clone)]
pub struct SpeechModel {
    pub vocab: Vocabulary,
    pub encoder: SyntheticEncoder,
    pub gate: Option<GateRegistry>,
    pub decoder: Decoder,
    pub params: ParameterSet,
}

/// Tape leaves for one forward/backward pass.
#[derive(Debug)]
pub struct TapeModel {
    pub dec: DecoderVars,
    pub gate_w: Option<Var>,
}

impl SpeechModel {
    pub fn build(vocab: Vocabulary, config: &ModelConfig) -> Result<Self> {
        let encoder = SyntheticEncoder::new(config.encoder)?;
        let mut dec_cfg = DecoderConfig::with_vocab(vocab.len(), config.decoder_seed);
        dec_cfg.width = config.encoder.width;
        dec_cfg.blocks = config.decoder_blocks;
        dec_cfg.heads = config.decoder_heads;
        let decoder = Decoder::new(dec_cfg)?;
        let mut params = ParameterSet::new();
        decoder.init_params(&mut params)?;
        let gate = match config.gate_temperature {
            Some(temp) => Some(GateRegistry::new(config.encoder.layers, temp)?),
            None => None,
        };
        Ok(SpeechModel {
            vocab,
            encoder,
            gate,
            decoder,
            params,
        })
    }

    /// Encode features and normalize each layer (Eqs. 1–2).
    pub fn stack_for(&self, features: &Tensor) -> Result<NormalizedStack> {
        Ok(normalize_stack(&self.encoder.encode(features)?))
    }

    /// Register a task row in the gate (no-op target for baseline models).
    pub fn register_task(&mut self, task_id: &str) -> Result<Option<usize>> {
        match &mut self.gate {
            Some(gate) => Ok(Some(gate.register_task(&mut self.params, task_id)?)),
            None => Ok(None),
        }
    }

    /// Tag token convention: task `KS` owns the tag `<|KS|>`.
    pub fn tag_token(task_id: &str) -> String {
        format!("<|{task_id}|>")
    }

    pub fn tag_id(&self, task_id: &str) -> Result<usize> {
        self.vocab.id(&Self::tag_token(task_id))
    }

    /// Leaf all trainable structures onto a fresh tape.
    pub fn leaf_on_tape(&self, tape: &mut Tape) -> Result<TapeModel> {
        let dec = self.decoder.leaf_params(tape, &self.params)?;
        let gate_w = match &self.gate {
            Some(_) => Some(tape.leaf(self.params.get(GATE_PARAM)?)),
            None => None,
        };
        Ok(TapeModel { dec, gate_w })
    }

    /// Cross-attention memory on the tape: fused representation for gate
    /// models, the last normalized layer for baselines.
    pub fn memory_on_tape(
        &self,
        tape: &mut Tape,
        tm: &TapeModel,
        stack: &NormalizedStack,
        task_id: &str,
    ) -> Result<Var> {
        match (&self.gate, tm.gate_w) {
            (Some(gate), Some(w)) => Ok(gate.fuse_on_tape(tape, w, task_id, stack)?.fused),
            (None, None) => {
                let last = stack.layer(stack.layer_count() - 1);
                Ok(tape.constant(last.as_ref().clone(), vec![stack.frames, stack.width])?)
            }
            _ => Err(ModelError::MissingGate),
        }
    }

    /// Gradient-free memory; bitwise identical to [`Self::memory_on_tape`].
    pub fn memory_eval(&self, stack: &NormalizedStack, task_id: &str) -> Result<Vec<f64>> {
        match &self.gate {
            Some(gate) => gate.fuse_eval(&self.params, task_id, stack),
            None => Ok(stack.layer(stack.layer_count() - 1).as_ref().clone()),
        }
    }

    /// Teacher-forced (logits, loss) for one sample on the tape. Verifies
    /// that the target starts with the task's tag.
    pub fn sample_loss_on_tape(
        &self,
        tape: &mut Tape,
        tm: &TapeModel,
        stack: &NormalizedStack,
        task_id: &str,
        target: &[usize],
    ) -> Result<(Var, Var)> {
        self.check_tag(task_id, target)?;
        let memory = self.memory_on_tape(tape, tm, stack, task_id)?;
        self.decoder
            .teacher_forced_on_tape(tape, &tm.dec, memory, target, self.vocab.pad_id())
    }

    /// Teacher-forced logits for one sample, gradient-free route.
    pub fn sample_logits_eval(
        &self,
        stack: &NormalizedStack,
        task_id: &str,
        target: &[usize],
    ) -> Result<Vec<f64>> {
        self.check_tag(task_id, target)?;
        let memory = self.memory_eval(stack, task_id)?;
        self.decoder
            .forward_eval(&self.params, &memory, stack.frames, &target[..target.len() - 1])
    }

    fn check_tag(&self, task_id: &str, target: &[usize]) -> Result<()> {
        if target.len() < 2 {
            return Err(ModelError::TargetTooShort(target.len()));
        }
        let expected = self.tag_id(task_id)?;
        if target[0] != expected {
            return Err(ModelError::TagMismatch {
                expected: Self::tag_token(task_id),
                found: self.vocab.token(target[0])?.to_string(),
            });
        }
        Ok(())
    }

    /// Move gradients accumulated on the tape into the parameter tensors.
    pub fn pull_grads(&mut self, tape: &Tape, tm: &TapeModel) -> Result<()> {
        for (name, var) in tm.dec.iter() {
            tape.write_grad_into(var, self.params.get_mut(name)?)?;
        }
        if let Some(w) = tm.gate_w {
            tape.write_grad_into(w, self.params.get_mut(GATE_PARAM)?)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            vocab: self.vocab.clone(),
            encoder_config: *self.encoder.config(),
            encoder_checksum: self.encoder.checksum(),
            gate: self.gate.clone(),
            decoder_config: *self.decoder.config(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self> {
        if cp.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::CheckpointFormat(format!(
                "unsupported format version {} (expected {CHECKPOINT_VERSION})",
                cp.format_version
            )));
        }
        let encoder = SyntheticEncoder::new(cp.encoder_config)?;
        if encoder.checksum() != cp.encoder_checksum {
            return Err(ModelError::CheckpointFormat(
                "encoder checksum mismatch: frozen weights diverged".into(),
            ));
        }
        let decoder = Decoder::new(cp.decoder_config)?;
        Ok(SpeechModel {
            vocab: cp.vocab,
            encoder,
            gate: cp.gate,
            decoder,
            params: cp.params,
        })
    }

    pub fn save_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn load_json(json: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(json)?)
    }
}

/// Self-describing model snapshot. All floats survive a JSON round trip
/// bitwise (shortest round-trip formatting).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub vocab: Vocabulary,
    pub encoder_config: EncoderConfig,
    pub encoder_checksum: String,
    pub gate: Option<GateRegistry>,
    pub decoder_config: DecoderConfig,
    pub params: ParameterSet,
}
