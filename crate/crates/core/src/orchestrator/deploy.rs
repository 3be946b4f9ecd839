use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{write_atomic, RunLayout, RunManifest};
use super::OrchestratorError;
use crate::models::{translate_corpus, ArchKind, DecodeModel, DecodeSettings, Ensemble, ModelError, Seq2SeqModel, Translation};
use crate::subword::SubwordModel;
use crate::training::load_checkpoint;

pub const BUNDLE_VERSION: u32 = 1;

/// `bundle.json` in a deployment directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleInfo {
    pub bundle_version: u32,
    pub run_id: String,
    /// Copied from the run manifest.
    pub config_digest: String,
    pub architecture: ArchKind,
    pub step: u64,
    pub source_subword_digest: String,
    pub target_subword_digest: String,
}

const MODEL: &str = "model.ckpt";
const SOURCE: &str = "source.model";
const TARGET: &str = "target.model";
const DECODE: &str = "decode.json";
const INFO: &str = "bundle.json";

/// Copies the best checkpoint, both subword models and the decode settings
/// of a run into `dest`.
pub fn deploy(run_dir: &Path, dest: &Path, decode: &DecodeSettings) -> Result<BundleInfo, OrchestratorError> {
    let layout = RunLayout::new(run_dir);
    let manifest = RunManifest::load(&layout.manifest())?;
    let best = layout.best_checkpoint();
    if !best.exists() {
        return Err(OrchestratorError::NoCheckpoint(run_dir.to_path_buf()));
    }
    let ckpt = load_checkpoint(&best).map_err(|e| OrchestratorError::Bundle(e.to_string()))?;
    std::fs::create_dir_all(dest).map_err(|e| OrchestratorError::io(dest, e))?;
    for (from, to) in [(best, MODEL), (layout.source_subword(), SOURCE), (layout.target_subword(), TARGET)] {
        let bytes = std::fs::read(&from).map_err(|e| OrchestratorError::io(&from, e))?;
        write_atomic(&dest.join(to), &bytes)?;
    }
    write_atomic(&dest.join(DECODE), serde_json::to_string_pretty(decode).expect("settings serialize").as_bytes())?;
    let info = BundleInfo {
        bundle_version: BUNDLE_VERSION,
        run_id: manifest.run_id,
        config_digest: manifest.config_digest,
        architecture: ckpt.model.config.kind,
        step: ckpt.progress.step,
        source_subword_digest: ckpt.model.source_subword_digest.clone(),
        target_subword_digest: ckpt.model.target_subword_digest.clone(),
    };
    write_atomic(&dest.join(INFO), serde_json::to_string_pretty(&info).expect("info serializes").as_bytes())?;
    Ok(info)
}

/// A deployed model ready to translate.
#[derive(Debug, Clone)]
pub struct LoadedBundle {
    pub info: BundleInfo,
    pub model: Seq2SeqModel,
    pub source: SubwordModel,
    pub target: SubwordModel,
    pub decode: DecodeSettings,
}

impl LoadedBundle {
    pub fn load(dir: &Path) -> Result<Self, OrchestratorError> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| OrchestratorError::io(&p, e))
        };
        let info: BundleInfo = serde_json::from_str(&read(INFO)?).map_err(|e| OrchestratorError::Bundle(e.to_string()))?;
        if info.bundle_version != BUNDLE_VERSION {
            return Err(OrchestratorError::Bundle(format!("bundle version {} is not supported", info.bundle_version)));
        }
        let decode = serde_json::from_str(&read(DECODE)?).map_err(|e| OrchestratorError::Bundle(e.to_string()))?;
        let bad = |e: &dyn std::fmt::Display| OrchestratorError::Bundle(e.to_string());
        let model = load_checkpoint(&dir.join(MODEL)).map_err(|e| bad(&e))?.model;
        let source = SubwordModel::load(&dir.join(SOURCE)).map_err(|e| bad(&e))?;
        let target = SubwordModel::load(&dir.join(TARGET)).map_err(|e| bad(&e))?;
        if source.digest() != model.source_subword_digest || target.digest() != model.target_subword_digest {
            return Err(OrchestratorError::Bundle("subword models do not match the checkpoint".into()));
        }
        Ok(Self { info, model, source, target, decode })
    }

    /// The model and subword files of a run directory, as if deployed.
    pub fn from_run(run_dir: &Path, decode: DecodeSettings) -> Result<Self, OrchestratorError> {
        let layout = RunLayout::new(run_dir);
        let manifest = RunManifest::load(&layout.manifest())?;
        let path = [layout.best_checkpoint(), layout.last_checkpoint()].into_iter().find(|p| p.exists());
        let path = path.ok_or_else(|| OrchestratorError::NoCheckpoint(run_dir.to_path_buf()))?;
        let bad = |e: &dyn std::fmt::Display| OrchestratorError::Bundle(e.to_string());
        let ckpt = load_checkpoint(&path).map_err(|e| bad(&e))?;
        let source = SubwordModel::load(&layout.source_subword()).map_err(|e| bad(&e))?;
        let target = SubwordModel::load(&layout.target_subword()).map_err(|e| bad(&e))?;
        let info = BundleInfo {
            bundle_version: BUNDLE_VERSION,
            run_id: manifest.run_id,
            config_digest: manifest.config_digest,
            architecture: ckpt.model.config.kind,
            step: ckpt.progress.step,
            source_subword_digest: ckpt.model.source_subword_digest.clone(),
            target_subword_digest: ckpt.model.target_subword_digest.clone(),
        };
        Ok(Self { info, model: ckpt.model, source, target, decode })
    }
}

/// Translates with one bundle, or with the decode-time ensemble of several.
/// All bundles must share both subword models.
pub fn translate_with(bundles: &[&LoadedBundle], texts: &[String], settings: &DecodeSettings) -> Result<Vec<Translation>, ModelError> {
    let first = bundles.first().ok_or_else(|| ModelError::InvalidConfig("no model selected".into()))?;
    if bundles.iter().any(|b| b.source.digest() != first.source.digest()) {
        return Err(ModelError::VocabMismatch);
    }
    if bundles.len() == 1 {
        return translate_corpus(&first.model, &first.source, &first.target, texts, settings);
    }
    let ensemble = Ensemble::new(bundles.iter().map(|b| &b.model as &dyn DecodeModel).collect())?;
    translate_corpus(&ensemble, &first.source, &first.target, texts, settings)
}
