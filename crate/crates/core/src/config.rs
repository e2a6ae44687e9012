//! Run configuration: one TOML document (or none at all) drives every
//! command. The zero-config defaults reproduce the reference protocol —
//! the six-task order, 800/200/200 splits, batch size 16, AdamW at 1e-4
//! with 10% warmup, early-stopping patience of 1000 steps, per-family
//! epoch budgets (40 for speaker identification, 60 for emotion
//! recognition, 20 otherwise), a 1000-instance replay buffer, gate
//! temperature 5e-4, prompted targets, and constrained decoding.
//!
//! Example document (every key optional):
//!
//! ```toml
//! seed = 3
//! order = ["KS", "SID", "ER"]
//! method = "gfl_d"
//! prompt = "short"
//! constrained = true
//!
//! [splits]
//! train = 800
//! validation = 200
//! test = 200
//!
//! [model]
//! encoder_layers = 6
//! width = 64
//! decoder_blocks = 2
//!
//! [training]
//! batch_size = 16
//! learning_rate = 1e-4
//! stage1_fraction = 0.1
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continual::{MethodConfig, MethodId, TrainerConfig};
use crate::decoding::PromptTemplate;
use crate::model::{EncoderConfig, ModelConfig};
use crate::numerics::AdamWConfig;
use crate::tasks::{SplitSizes, TaskFamily, TaskSpec};

/// Environment variable naming the default output root (falls back to
/// `./runs`).
pub const OUTPUT_ROOT_ENV: &str = "GATEFUSE_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("could not read config file '{path}': {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Emit(#[from] toml::ser::Error),
    #[error("unknown task id '{0}' in the training order")]
    UnknownTask(String),
    #[error("duplicate task id '{0}' in the training order")]
    DuplicateTask(String),
    #[error("field '{field}': {message}")]
    InvalidField {
        field: &'static str,
        message: String,
    },
    #[error(transparent)]
    Continual(#[from] crate::continual::ContinualError),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Model dimensions surfaced to the configuration; every other encoder
/// and decoder knob keeps its library default. The encoder seed is fixed:
/// the frozen encoder is the same "pretrained" network in every run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    /// Encoder depth M.
    pub encoder_layers: usize,
    /// Shared model width d (encoder and decoder).
    pub width: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    /// Decoder initialization seed; `None` reuses the run seed so each
    /// run seed gets its own initialization.
    pub decoder_seed: Option<u64>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            encoder_layers: 6,
            width: 64,
            decoder_blocks: 2,
            decoder_heads: 4,
            decoder_seed: None,
        }
    }
}

/// Every training-loop and method hyperparameter, flat. Methods read the
/// knobs they use and ignore the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub patience_steps: usize,
    /// Validation cadence, in optimization steps.
    pub val_every: usize,
    /// Learning-curve cadence, in optimization steps.
    pub curve_every: usize,
    /// Cap on test samples per curve evaluation (unset = full split).
    pub curve_eval_limit: Option<usize>,
    pub restore_best: bool,
    /// Multiplier on every task's base epoch budget.
    pub epoch_scale: f64,
    pub buffer_capacity: usize,
    pub replay_ratio: usize,
    pub lwf_lambda: f64,
    pub lwf_tau: f64,
    pub derpp_alpha: f64,
    pub derpp_beta: f64,
    pub gate_temperature: f64,
    pub stage1_fraction: f64,
    pub replay_in_gfl: bool,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        let method = MethodConfig::for_method(MethodId::GflD);
        let trainer = TrainerConfig::default();
        let optimizer = AdamWConfig::default();
        TrainingSettings {
            batch_size: trainer.batch_size,
            learning_rate: optimizer.learning_rate,
            weight_decay: optimizer.weight_decay,
            warmup_fraction: optimizer.warmup_fraction,
            patience_steps: method.patience_steps,
            val_every: trainer.val_every,
            curve_every: trainer.curve_every,
            curve_eval_limit: trainer.curve_eval_limit,
            restore_best: trainer.restore_best,
            epoch_scale: method.epoch_scale,
            buffer_capacity: method.buffer_capacity,
            replay_ratio: method.replay_ratio,
            lwf_lambda: method.lwf_lambda,
            lwf_tau: method.lwf_tau,
            derpp_alpha: method.derpp_alpha,
            derpp_beta: method.derpp_beta,
            gate_temperature: method.gfl_temperature,
            stage1_fraction: method.stage1_fraction,
            replay_in_gfl: method.replay_in_gfl,
        }
    }
}

/// One experiment, fully specified. Deserializes from TOML with every
/// field optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Task ids, trained in order.
    pub order: Vec<String>,
    /// Method id: ft | replay | lwf | derpp | mtl | gfl_s | gfl_d.
    pub method: String,
    pub splits: SplitSizes,
    pub model: ModelSettings,
    /// Prompt template: none | short | long.
    pub prompt: PromptTemplate,
    /// Constrained decoding for classification evaluation.
    pub constrained: bool,
    /// Run directory; unset derives `<output root>/<run name>`.
    pub output_dir: Option<PathBuf>,
    /// Dataset directory; unset derives `<output root>/datasets`.
    pub data_dir: Option<PathBuf>,
    pub training: TrainingSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            order: TaskFamily::ALL
                .iter()
                .map(|f| f.default_id().to_string())
                .collect(),
            method: MethodId::GflD.id().to_string(),
            splits: SplitSizes::default(),
            model: ModelSettings::default(),
            prompt: PromptTemplate::Short,
            constrained: true,
            output_dir: None,
            data_dir: None,
            training: TrainingSettings::default(),
        }
    }
}

fn family_for(id: &str) -> Result<TaskFamily> {
    TaskFamily::ALL
        .into_iter()
        .find(|f| f.default_id() == id)
        .ok_or_else(|| ConfigError::UnknownTask(id.to_string()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.order.is_empty() {
            return Err(ConfigError::InvalidField {
                field: "order",
                message: "must list at least one task".into(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &self.order {
            family_for(id)?;
            if !seen.insert(id.as_str()) {
                return Err(ConfigError::DuplicateTask(id.clone()));
            }
        }
        self.method_id()?;
        if self.model.encoder_layers == 0
            || self.model.width == 0
            || self.model.decoder_blocks == 0
            || self.model.decoder_heads == 0
        {
            return Err(ConfigError::InvalidField {
                field: "model",
                message: "dimensions must be positive".into(),
            });
        }
        if self.model.width % self.model.decoder_heads != 0 {
            return Err(ConfigError::InvalidField {
                field: "model.width",
                message: format!(
                    "{} is not divisible by {} attention heads",
                    self.model.width, self.model.decoder_heads
                ),
            });
        }
        if self.splits.train == 0 || self.splits.validation == 0 || self.splits.test == 0 {
            return Err(ConfigError::InvalidField {
                field: "splits",
                message: "every split needs at least one sample".into(),
            });
        }
        self.method_config()?.validate()?;
        self.trainer_config().validate()?;
        Ok(())
    }

    pub fn method_id(&self) -> Result<MethodId> {
        Ok(MethodId::from_id(&self.method)?)
    }

    /// The method hyperparameters this config describes.
    pub fn method_config(&self) -> Result<MethodConfig> {
        let t = &self.training;
        Ok(MethodConfig {
            method: self.method_id()?,
            buffer_capacity: t.buffer_capacity,
            replay_ratio: t.replay_ratio,
            lwf_lambda: t.lwf_lambda,
            lwf_tau: t.lwf_tau,
            derpp_alpha: t.derpp_alpha,
            derpp_beta: t.derpp_beta,
            gfl_temperature: t.gate_temperature,
            stage1_fraction: t.stage1_fraction,
            epoch_scale: t.epoch_scale,
            patience_steps: t.patience_steps,
            replay_in_gfl: t.replay_in_gfl,
        })
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let t = &self.training;
        TrainerConfig {
            optimizer: AdamWConfig {
                learning_rate: t.learning_rate,
                weight_decay: t.weight_decay,
                warmup_fraction: t.warmup_fraction,
                ..AdamWConfig::default()
            },
            batch_size: t.batch_size,
            val_every: t.val_every,
            curve_every: t.curve_every,
            curve_eval_limit: t.curve_eval_limit,
            eval_constrained: self.constrained,
            restore_best: t.restore_best,
            overfit_one_batch: false,
        }
    }

    /// Build-time model switches. Gated methods get a gate at the
    /// configured temperature; the rest run gate-free.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let method = self.method_id()?;
        Ok(ModelConfig {
            encoder: EncoderConfig {
                layers: self.model.encoder_layers,
                width: self.model.width,
                ..EncoderConfig::default()
            },
            gate_temperature: method
                .needs_gate()
                .then_some(self.training.gate_temperature),
            decoder_seed: self.model.decoder_seed.unwrap_or(self.seed),
            decoder_blocks: self.model.decoder_blocks,
            decoder_heads: self.model.decoder_heads,
        })
    }

    /// Task specs for the configured order, all carrying the configured
    /// prompt template and split sizes.
    pub fn specs(&self) -> Result<Vec<TaskSpec>> {
        self.order
            .iter()
            .map(|id| Ok(TaskSpec::new(family_for(id)?, self.prompt, self.splits)))
            .collect()
    }

    /// Output root: `$GATEFUSE_OUT` or `./runs`.
    pub fn output_root() -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Directory holding the generated datasets.
    pub fn resolved_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| Self::output_root().join("datasets"))
    }

    /// Directory this run writes to.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| Self::output_root().join(self.run_name()))
    }

    /// Human-readable, collision-free-per-(method, order, seed) run name.
    pub fn run_name(&self) -> String {
        format!("{}-{}-s{}", self.method, self.order.join("+"), self.seed)
    }

    /// Dataset file for one task: datasets are scoped by generation seed so
    /// multi-seed sweeps never clobber each other.
    pub fn dataset_path(data_dir: &Path, seed: u64, task_id: &str) -> PathBuf {
        data_dir.join(format!("s{seed}")).join(format!("{task_id}.json"))
    }

    /// Dataset file for one task under this configuration.
    pub fn dataset_file(&self, task_id: &str) -> PathBuf {
        Self::dataset_path(&self.resolved_data_dir(), self.seed, task_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_config_defaults_match_the_reference_protocol() {
        let config = RunConfig::default();
        config.validate().unwrap();
        assert_eq!(config.order, ["KS", "SID", "ER", "IC", "SF", "ASR"]);
        assert_eq!(config.splits, SplitSizes { train: 800, validation: 200, test: 200 });
        assert_eq!(config.training.batch_size, 16);
        assert_eq!(config.training.learning_rate, 1e-4);
        assert_eq!(config.training.warmup_fraction, 0.1);
        assert_eq!(config.training.patience_steps, 1000);
        assert_eq!(config.training.buffer_capacity, 1000);
        assert_eq!(config.training.gate_temperature, 5e-4);
        assert!(config.constrained);
        assert_eq!(config.prompt, PromptTemplate::Short);

        let method = config.method_config().unwrap();
        assert_eq!(method.method, MethodId::GflD);
        let trainer = config.trainer_config();
        assert_eq!(trainer.batch_size, 16);
        assert!(trainer.eval_constrained);
        let model = config.model_config().unwrap();
        assert_eq!(model.encoder.layers, 6);
        assert_eq!(model.encoder.width, 64);
        assert_eq!(model.gate_temperature, Some(5e-4));
        assert_eq!(model.decoder_seed, config.seed);
    }

    #[test]
    fn empty_and_partial_toml_documents_parse() {
        let empty = RunConfig::from_toml_str("").unwrap();
        assert_eq!(empty, RunConfig::default());

        let partial = RunConfig::from_toml_str(
            r#"
            seed = 9
            method = "replay"
            order = ["KS", "SID"]

            [training]
            buffer_capacity = 50
            "#,
        )
        .unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.method_id().unwrap(), MethodId::Replay);
        assert_eq!(partial.training.buffer_capacity, 50);
        // Untouched knobs keep their defaults.
        assert_eq!(partial.training.batch_size, 16);
        assert_eq!(partial.splits, SplitSizes::default());
    }

    #[test]
    fn toml_round_trips() {
        let mut config = RunConfig::default();
        config.seed = 42;
        config.method = "lwf".into();
        config.training.stage1_fraction = 0.1;
        config.output_dir = Some(PathBuf::from("/tmp/x"));
        let text = config.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn bad_fields_are_named() {
        let unknown_task = RunConfig {
            order: vec!["KS".into(), "XY".into()],
            ..RunConfig::default()
        };
        assert!(matches!(
            unknown_task.validate(),
            Err(ConfigError::UnknownTask(id)) if id == "XY"
        ));

        let duplicate = RunConfig {
            order: vec!["KS".into(), "KS".into()],
            ..RunConfig::default()
        };
        assert!(matches!(
            duplicate.validate(),
            Err(ConfigError::DuplicateTask(_))
        ));

        let bad_method = RunConfig {
            method: "sgd".into(),
            ..RunConfig::default()
        };
        assert!(bad_method.validate().is_err());

        let bad_width = RunConfig {
            model: ModelSettings {
                width: 62,
                ..ModelSettings::default()
            },
            ..RunConfig::default()
        };
        assert!(matches!(
            bad_width.validate(),
            Err(ConfigError::InvalidField { field: "model.width", .. })
        ));

        // Parse errors carry the offending key.
        let err = RunConfig::from_toml_str("seed = \"many\"").unwrap_err();
        assert!(err.to_string().contains("seed"), "message: {err}");

        let err = RunConfig::from_toml_str("[training]\nbatch_size = -4").unwrap_err();
        assert!(err.to_string().contains("batch_size"), "message: {err}");
    }

    #[test]
    fn specs_follow_order_prompt_and_splits() {
        let config = RunConfig {
            order: vec!["ER".into(), "KS".into()],
            prompt: PromptTemplate::Long,
            splits: SplitSizes { train: 10, validation: 4, test: 4 },
            ..RunConfig::default()
        };
        let specs = config.specs().unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[0].id, "ER");
        assert_eq!(specs[0].family, TaskFamily::EmotionRecognition);
        assert_eq!(specs[1].id, "KS");
        assert!(specs.iter().all(|s| s.prompt == PromptTemplate::Long));
        assert!(specs.iter().all(|s| s.splits.train == 10));
    }

    #[test]
    fn paths_derive_from_the_output_root() {
        let config = RunConfig::default();
        assert_eq!(config.run_name(), "gfl_d-KS+SID+ER+IC+SF+ASR-s1");
        let explicit = RunConfig {
            output_dir: Some(PathBuf::from("/tmp/run")),
            data_dir: Some(PathBuf::from("/tmp/data")),
            ..RunConfig::default()
        };
        assert_eq!(explicit.resolved_output_dir(), PathBuf::from("/tmp/run"));
        assert_eq!(explicit.resolved_data_dir(), PathBuf::from("/tmp/data"));
        assert_eq!(
            RunConfig::dataset_path(Path::new("/tmp/data"), 7, "KS"),
            PathBuf::from("/tmp/data/s7/KS.json")
        );
        assert_eq!(
            explicit.dataset_file("KS"),
            PathBuf::from("/tmp/data/s1/KS.json")
        );
    }
}
