//! Self-describing run directories.
//!
//! A run directory holds everything needed to reproduce its reports:
//! a manifest (config snapshot, version, timestamps, artifact checksums),
//! streamed learning curves (JSON lines), the evaluation matrix (CSV),
//! per-boundary task reports, and per-boundary model checkpoints. The
//! manifest is written before training starts and finalized — checksums
//! included — when the run completes; re-opening verifies every artifact
//! against its recorded checksum.
//!
//! Double-stage runs keep their first stage under `stage1/`; the top-level
//! artifacts always describe the reported (final) model.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;
use crate::continual::{CurvePoint, SequenceObserver, TaskReport};
use crate::metrics::EvalMatrix;
use crate::model::encoder::hex_string;
use crate::model::SpeechModel;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MATRIX_FILE: &str = "eval_matrix.csv";
pub const CURVES_FILE: &str = "curves.jsonl";
pub const REPORTS_FILE: &str = "task_reports.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const STAGE1_DIR: &str = "stage1";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Error)]
pub enum RunDirError {
    #[error("i/o error on '{path}': {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("'{0}' exists and is not empty (pass the overwrite flag to replace it)")]
    DirectoryNotEmpty(PathBuf),
    #[error("'{0}' is not a run directory (no {MANIFEST_FILE})")]
    MissingManifest(PathBuf),
    #[error("artifact '{0}' is recorded in the manifest but missing on disk")]
    MissingArtifact(String),
    #[error("artifact '{0}' does not match its recorded checksum")]
    ChecksumMismatch(String),
    #[error("manifest (de)serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub type Result<T> = std::result::Result<T, RunDirError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
}

/// The run's identity card, stored as `manifest.json` in its root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Crate version that produced the run.
    pub version: String,
    pub config: RunConfig,
    pub status: RunStatus,
    /// Unix timestamps (seconds).
    pub started_at: u64,
    pub finished_at: Option<u64>,
    /// Relative artifact path -> SHA-256 of the file bytes. Filled at
    /// finalization.
    pub artifacts: BTreeMap<String, String>,
}

fn now_epoch_s() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunDirError + '_ {
    move |source| RunDirError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

/// Metric of a standard task id (`KS`, `SID`, ... `ASR`), if it is one.
pub fn standard_metric(task_id: &str) -> Option<crate::tasks::MetricId> {
    crate::tasks::TaskFamily::ALL
        .into_iter()
        .find(|f| f.default_id() == task_id)
        .map(|f| f.metric())
}

/// Handle to a run directory on disk.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Create a fresh run directory and write the initial manifest. An
    /// existing non-empty directory is refused unless `overwrite` is set,
    /// in which case it is deleted first.
    pub fn create(root: &Path, config: &RunConfig, overwrite: bool) -> Result<Self> {
        if root.exists() {
            let not_empty = root
                .read_dir()
                .map_err(io_err(root))?
                .next()
                .is_some();
            if not_empty {
                if !overwrite {
                    return Err(RunDirError::DirectoryNotEmpty(root.to_path_buf()));
                }
                fs::remove_dir_all(root).map_err(io_err(root))?;
            }
        }
        fs::create_dir_all(root).map_err(io_err(root))?;
        let dir = RunDir {
            root: root.to_path_buf(),
        };
        let manifest = RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            status: RunStatus::Running,
            started_at: now_epoch_s(),
            finished_at: None,
            artifacts: BTreeMap::new(),
        };
        dir.write_manifest(&manifest)?;
        Ok(dir)
    }

    /// Open an existing run directory (manifest must be present).
    pub fn open(root: &Path) -> Result<Self> {
        if !root.join(MANIFEST_FILE).is_file() {
            return Err(RunDirError::MissingManifest(root.to_path_buf()));
        }
        Ok(RunDir {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let text = self.read_text(MANIFEST_FILE)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<()> {
        self.write_text(MANIFEST_FILE, &serde_json::to_string_pretty(manifest)?)
    }

    pub fn write_text(&self, rel: &str, contents: &str) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, contents).map_err(io_err(&path))
    }

    pub fn read_text(&self, rel: &str) -> Result<String> {
        let path = self.path(rel);
        fs::read_to_string(&path).map_err(io_err(&path))
    }

    /// Relative paths of every file under the root except the manifest.
    pub fn artifact_paths(&self) -> Result<Vec<String>> {
        let mut rels = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in dir.read_dir().map_err(io_err(&dir))? {
                let entry = entry.map_err(io_err(&dir))?;
                let path = entry.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path
                        .strip_prefix(&self.root)
                        .expect("under root")
                        .to_string_lossy()
                        .replace('\\', "/");
                    if rel != MANIFEST_FILE {
                        rels.push(rel);
                    }
                }
            }
        }
        rels.sort();
        Ok(rels)
    }

    /// Checksum every artifact, stamp the end time, and mark the run
    /// complete.
    pub fn finalize(&self) -> Result<RunManifest> {
        let mut manifest = self.manifest()?;
        manifest.artifacts = self
            .artifact_paths()?
            .into_iter()
            .map(|rel| {
                let path = self.path(&rel);
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                Ok((rel, sha256_hex(&bytes)))
            })
            .collect::<Result<_>>()?;
        manifest.finished_at = Some(now_epoch_s());
        manifest.status = RunStatus::Complete;
        self.write_manifest(&manifest)?;
        Ok(manifest)
    }

    /// Re-verify every recorded artifact checksum and return the manifest.
    pub fn verify(&self) -> Result<RunManifest> {
        let manifest = self.manifest()?;
        for (rel, recorded) in &manifest.artifacts {
            let path = self.path(rel);
            if !path.is_file() {
                return Err(RunDirError::MissingArtifact(rel.clone()));
            }
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if &sha256_hex(&bytes) != recorded {
                return Err(RunDirError::ChecksumMismatch(rel.clone()));
            }
        }
        Ok(manifest)
    }

    /// The run's evaluation matrix (top level = the reported model).
    /// Column metrics resolve through the standard task families.
    pub fn eval_matrix(&self) -> Result<EvalMatrix> {
        let text = self.read_text(MATRIX_FILE)?;
        EvalMatrix::from_csv(&text, standard_metric).map_err(|e| RunDirError::Io {
            path: self.path(MATRIX_FILE),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }

    /// All recorded learning-curve points, file order.
    pub fn curves(&self) -> Result<Vec<CurvePoint>> {
        let text = self.read_text(CURVES_FILE)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }

    pub fn task_reports(&self) -> Result<Vec<TaskReport>> {
        let text = self.read_text(REPORTS_FILE)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }

    /// Load the checkpoint saved at boundary `k` (top-level stage).
    pub fn load_checkpoint(&self, k: usize) -> Result<SpeechModel> {
        let rel = format!("{CHECKPOINT_DIR}/boundary_{k:02}.json");
        Ok(SpeechModel::load_json(&self.read_text(&rel)?)?)
    }

    /// The highest boundary index with a saved top-level checkpoint.
    pub fn last_boundary(&self) -> Result<Option<usize>> {
        let mut last = None;
        for rel in self.artifact_paths()? {
            if let Some(rest) = rel
                .strip_prefix(CHECKPOINT_DIR)
                .and_then(|r| r.strip_prefix("/boundary_"))
                .and_then(|r| r.strip_suffix(".json"))
            {
                if let Ok(k) = rest.parse::<usize>() {
                    last = last.max(Some(k));
                }
            }
        }
        Ok(last)
    }
}

/// Observer that streams training artifacts into a run directory.
///
/// Observer callbacks cannot fail, so I/O errors are captured and
/// surfaced by [`RunDirObserver::finish`]; once an error occurs, further
/// writes are skipped.
pub struct RunDirObserver {
    dir: RunDir,
    stage: Option<u8>,
    error: Option<RunDirError>,
}

impl RunDirObserver {
    pub fn new(dir: RunDir) -> Self {
        RunDirObserver {
            dir,
            stage: None,
            error: None,
        }
    }

    fn prefix(&self) -> &'static str {
        // Stage 1 is preparatory; stage 2 (like single-stage runs) is the
        // reported result and lives at the top level.
        match self.stage {
            Some(1) => "stage1/",
            _ => "",
        }
    }

    fn try_io(&mut self, op: impl FnOnce(&RunDir, &'static str) -> Result<()>) {
        if self.error.is_some() {
            return;
        }
        let prefix = self.prefix();
        if let Err(e) = op(&self.dir, prefix) {
            self.error = Some(e);
        }
    }

    fn append_line(dir: &RunDir, rel: &str, line: &str) -> Result<()> {
        let path = dir.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        writeln!(file, "{line}").map_err(io_err(&path))
    }

    /// Surface any I/O error captured during training.
    pub fn finish(self) -> Result<RunDir> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.dir),
        }
    }
}

impl SequenceObserver for RunDirObserver {
    fn on_stage_start(&mut self, stage: u8) {
        self.stage = Some(stage);
    }

    fn on_curve(&mut self, point: &CurvePoint) {
        let line = serde_json::to_string(point);
        self.try_io(|dir, prefix| {
            Self::append_line(dir, &format!("{prefix}{CURVES_FILE}"), &line?)
        });
    }

    fn on_task_end(
        &mut self,
        task_index: usize,
        model: &SpeechModel,
        matrix: &EvalMatrix,
        report: &TaskReport,
    ) {
        let report_line = serde_json::to_string(report);
        let checkpoint = model.save_json();
        self.try_io(|dir, prefix| {
            dir.write_text(&format!("{prefix}{MATRIX_FILE}"), &matrix.to_csv())?;
            Self::append_line(dir, &format!("{prefix}{REPORTS_FILE}"), &report_line?)?;
            dir.write_text(
                &format!("{prefix}{CHECKPOINT_DIR}/boundary_{task_index:02}.json"),
                &checkpoint?,
            )
        });
    }
}
