use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::notify::NotificationRecord;
use super::OrchestratorError;
use crate::green::Stage;

/// Version of the run directory layout below.
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Split,
    Subword,
    Train,
    Translate,
    Evaluate,
    Report,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 6] =
        [PipelineStage::Split, PipelineStage::Subword, PipelineStage::Train, PipelineStage::Translate, PipelineStage::Evaluate, PipelineStage::Report];

    pub fn name(self) -> &'static str {
        match self {
            PipelineStage::Split => "split",
            PipelineStage::Subword => "subword",
            PipelineStage::Train => "train",
            PipelineStage::Translate => "translate",
            PipelineStage::Evaluate => "evaluate",
            PipelineStage::Report => "report",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// The energy-accounting stage, if this stage is metered.
    pub fn energy_stage(self) -> Option<Stage> {
        Stage::ALL.get(self.index()).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: PipelineStage,
    pub status: StageStatus,
    pub started_at: Option<f64>,
    pub finished_at: Option<f64>,
    pub error: Option<String>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub layout_version: u32,
    pub run_id: String,
    /// SHA-256 of `config.toml`.
    pub config_digest: String,
    pub created_at: f64,
    pub updated_at: f64,
    pub stages: Vec<StageState>,
    pub notification: Option<NotificationRecord>,
}

impl RunManifest {
    pub fn new(run_id: &str, config_digest: &str, now: f64) -> Self {
        Self {
            layout_version: LAYOUT_VERSION,
            run_id: run_id.into(),
            config_digest: config_digest.into(),
            created_at: now,
            updated_at: now,
            stages: PipelineStage::ALL
                .iter()
                .map(|&stage| StageState { stage, status: StageStatus::Pending, started_at: None, finished_at: None, error: None, artifacts: vec![] })
                .collect(),
            notification: None,
        }
    }

    pub fn stage(&self, s: PipelineStage) -> &StageState {
        &self.stages[s.index()]
    }

    pub fn stage_mut(&mut self, s: PipelineStage) -> &mut StageState {
        &mut self.stages[s.index()]
    }

    pub fn first_unfinished(&self) -> Option<PipelineStage> {
        self.stages.iter().find(|s| s.status != StageStatus::Done).map(|s| s.stage)
    }

    pub fn is_complete(&self) -> bool {
        self.first_unfinished().is_none()
    }

    /// Paths of every artifact recorded as produced.
    pub fn artifacts(&self) -> impl Iterator<Item = &str> {
        self.stages.iter().flat_map(|s| s.artifacts.iter().map(String::as_str))
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| OrchestratorError::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| OrchestratorError::CorruptManifest(format!("{}: {e}", path.display())))?;
        if m.layout_version != LAYOUT_VERSION || m.stages.len() != PipelineStage::ALL.len() {
            return Err(OrchestratorError::CorruptManifest(format!("{}: unsupported layout", path.display())));
        }
        Ok(m)
    }

    /// Atomic write. Fails if a recorded artifact is missing.
    pub fn save(&self, layout: &RunLayout) -> Result<(), OrchestratorError> {
        if let Some(missing) = self.artifacts().find(|a| !layout.root.join(a).exists()) {
            return Err(OrchestratorError::CorruptManifest(format!("artifact {missing} is missing")));
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&layout.manifest(), text.as_bytes())
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), OrchestratorError> {
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    std::fs::write(&tmp, bytes).map_err(|e| OrchestratorError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| OrchestratorError::io(path, e))
}

/// Fixed paths inside a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create_dirs(&self) -> Result<(), OrchestratorError> {
        for d in [
            self.root.clone(),
            self.splits(),
            self.subword(),
            self.checkpoints(),
            self.translations(),
            self.reports(),
            self.energy(),
            self.plots(),
            self.logs(),
        ] {
            std::fs::create_dir_all(&d).map_err(|e| OrchestratorError::io(&d, e))?;
        }
        Ok(())
    }

    /// Relative form of a path inside the run, as stored in the manifest.
    pub fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn lock(&self) -> PathBuf {
        self.root.join("run.lock")
    }
    pub fn splits(&self) -> PathBuf {
        self.root.join("splits")
    }
    /// Prefix for `corpus.{train,valid,test}.{lang}`.
    pub fn split_prefix(&self) -> PathBuf {
        self.splits().join("corpus")
    }
    pub fn subword(&self) -> PathBuf {
        self.root.join("subword")
    }
    pub fn source_subword(&self) -> PathBuf {
        self.subword().join("source.model")
    }
    pub fn target_subword(&self) -> PathBuf {
        self.subword().join("target.model")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("best.ckpt")
    }
    pub fn last_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("last.ckpt")
    }
    pub fn translations(&self) -> PathBuf {
        self.root.join("translations")
    }
    pub fn hypotheses(&self) -> PathBuf {
        self.translations().join("test.hyp")
    }
    pub fn translation_details(&self) -> PathBuf {
        self.translations().join("test.jsonl")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn training_summary(&self) -> PathBuf {
        self.reports().join("training.json")
    }
    pub fn evaluation_json(&self) -> PathBuf {
        self.reports().join("evaluation.json")
    }
    pub fn evaluation_text(&self) -> PathBuf {
        self.reports().join("evaluation.txt")
    }
    pub fn green_json(&self) -> PathBuf {
        self.reports().join("green.json")
    }
    pub fn green_text(&self) -> PathBuf {
        self.reports().join("green.txt")
    }
    pub fn results(&self) -> PathBuf {
        self.reports().join("results.md")
    }
    pub fn energy(&self) -> PathBuf {
        self.reports().join("energy")
    }
    pub fn energy_record(&self, stage: Stage) -> PathBuf {
        self.energy().join(format!("{}.json", stage.name()))
    }
    pub fn plots(&self) -> PathBuf {
        self.reports().join("plots")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn events(&self) -> PathBuf {
        self.logs().join("events.jsonl")
    }
    pub fn console(&self) -> PathBuf {
        self.logs().join("console.log")
    }
    pub fn power_log(&self) -> PathBuf {
        self.logs().join("power.jsonl")
    }
}

/// Exclusive hold on a run directory, released when dropped (or when the
/// process dies).
#[derive(Debug)]
pub struct RunLock {
    _file: File,
}

impl RunLock {
    pub fn acquire(layout: &RunLayout) -> Result<Self, OrchestratorError> {
        let path = layout.lock();
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(&path).map_err(|e| OrchestratorError::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(Self { _file: file }),
            Err(std::fs::TryLockError::WouldBlock) => Err(OrchestratorError::Locked(layout.root.clone())),
            Err(std::fs::TryLockError::Error(e)) => Err(OrchestratorError::io(&path, e)),
        }
    }
}
