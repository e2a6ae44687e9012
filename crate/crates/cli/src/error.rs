//! CLI error type with a stable exit-code contract:
//! 0 success · 1 unexpected failure · 2 configuration error ·
//! 3 missing input · 4 numeric failure.

use gatefuse_core::config::ConfigError;
use gatefuse_core::continual::ContinualError;
use gatefuse_core::metrics::MetricsError;
use gatefuse_core::model::ModelError;
use gatefuse_core::numerics::NumericsError;
use gatefuse_core::rundir::RunDirError;
use gatefuse_core::tasks::TasksError;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid configuration, flags, or input content (exit 2).
    #[error("{0}")]
    Config(String),
    /// A required file or directory does not exist (exit 3).
    #[error("{0}")]
    MissingInput(String),
    /// Gradient, loss, or other numeric integrity failure (exit 4).
    #[error("{0}")]
    Numeric(String),
    /// Anything else — I/O failures, corrupted artifacts (exit 1).
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

/// Flatten an error and its source chain into one line.
fn chain(err: &dyn std::error::Error) -> String {
    let mut text = err.to_string();
    let mut source = err.source();
    while let Some(cause) = source {
        let cause_text = cause.to_string();
        // `#[error(transparent)]` wrappers repeat their source verbatim.
        if !text.ends_with(&cause_text) {
            text.push_str(": ");
            text.push_str(&cause_text);
        }
        source = cause.source();
    }
    text
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        if err.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingInput(chain(&err))
        } else {
            CliError::Other(chain(&err))
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(err: ConfigError) -> Self {
        match &err {
            ConfigError::Io { source, .. }
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                CliError::MissingInput(chain(&err))
            }
            _ => CliError::Config(chain(&err)),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(err: NumericsError) -> Self {
        CliError::Numeric(chain(&err))
    }
}

impl From<ModelError> for CliError {
    fn from(err: ModelError) -> Self {
        match &err {
            // Asking a checkpoint about tokens or tasks it was never trained
            // with is a request problem, not a program defect.
            ModelError::UnknownToken(_) | ModelError::UnknownTask(_) => {
                CliError::Config(chain(&err))
            }
            ModelError::Numerics(_) => CliError::Numeric(chain(&err)),
            _ => CliError::Other(chain(&err)),
        }
    }
}

impl From<TasksError> for CliError {
    fn from(err: TasksError) -> Self {
        match &err {
            TasksError::Io { source, .. }
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                CliError::MissingInput(chain(&err))
            }
            _ => CliError::Config(chain(&err)),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(err: MetricsError) -> Self {
        CliError::Config(chain(&err))
    }
}

impl From<RunDirError> for CliError {
    fn from(err: RunDirError) -> Self {
        match err {
            RunDirError::DirectoryNotEmpty(_) => CliError::Config(chain(&err)),
            RunDirError::MissingManifest(_) | RunDirError::MissingArtifact(_) => {
                CliError::MissingInput(chain(&err))
            }
            RunDirError::Io { ref source, .. }
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                CliError::MissingInput(chain(&err))
            }
            RunDirError::Model(model) => model.into(),
            _ => CliError::Other(chain(&err)),
        }
    }
}

impl From<ContinualError> for CliError {
    fn from(err: ContinualError) -> Self {
        match err {
            ContinualError::NonFiniteLoss { .. }
            | ContinualError::FrozenGateGradient(_)
            | ContinualError::FrozenGateDrift
            | ContinualError::Numerics(_) => CliError::Numeric(chain(&err)),
            ContinualError::UnknownMethod(_)
            | ContinualError::DuplicateTask(_)
            | ContinualError::GateRequired(_)
            | ContinualError::NotSequential { .. }
            | ContinualError::BadConfig(_)
            | ContinualError::EmptyTrainSplit(_)
            | ContinualError::EmptyEvalSplit { .. }
            | ContinualError::MissingOldModel
            | ContinualError::BufferOverflow { .. } => CliError::Config(chain(&err)),
            ContinualError::StageFailed { stage, source } => {
                let inner: CliError = (*source).into();
                match inner {
                    CliError::Config(m) => CliError::Config(format!("stage {stage}: {m}")),
                    CliError::MissingInput(m) => {
                        CliError::MissingInput(format!("stage {stage}: {m}"))
                    }
                    CliError::Numeric(m) => CliError::Numeric(format!("stage {stage}: {m}")),
                    CliError::Other(m) => CliError::Other(format!("stage {stage}: {m}")),
                }
            }
            ContinualError::Model(model) => model.into(),
            ContinualError::Tasks(tasks) => tasks.into(),
            other => CliError::Other(chain(&other)),
        }
    }
}
