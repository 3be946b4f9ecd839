use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Hyperparameters, TrainingError, Validation};
use crate::models::{ArchitectureConfig, Seq2SeqModel};
use crate::numerics::{read_tensor_table, write_tensor_table, OptimizerState, Tensor};

const MAGIC: &[u8; 8] = b"NMTBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a run: data cursor, schedule and early-stopping state, and
/// the training-loss accumulators of the current validation interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    pub epoch: u64,
    /// Index into the current epoch's batch order.
    pub batch_cursor: usize,
    pub best_ppl: Option<f64>,
    pub bad_validations: u32,
    pub lr_scale: f64,
    pub train_loss_sum: f64,
    pub train_correct: u64,
    pub train_tokens: u64,
    pub last_validation: Option<Validation>,
}

impl Default for Progress {
    fn default() -> Self {
        Self {
            step: 0,
            epoch: 0,
            batch_cursor: 0,
            best_ppl: None,
            bad_validations: 0,
            lr_scale: 1.0,
            train_loss_sum: 0.0,
            train_correct: 0,
            train_tokens: 0,
            last_validation: None,
        }
    }
}

/// Everything needed to continue a run. Dropout and batch-order randomness
/// derive from the seed and the cursor, so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Seq2SeqModel,
    pub optimizer: OptimizerState,
    pub hyperparameters: Hyperparameters,
    pub progress: Progress,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ArchitectureConfig,
    source_subword_digest: String,
    target_subword_digest: String,
    hyperparameters: Hyperparameters,
    optimizer: OptimizerState,
    progress: Progress,
}

fn corrupt(msg: impl Into<String>) -> TrainingError {
    TrainingError::CorruptCheckpoint(msg.into())
}

fn moments_table(ck: &Checkpoint, moments: &[Vec<f64>]) -> Vec<(String, Tensor)> {
    ck.model.params.iter().zip(moments).map(|(p, m)| (p.name.clone(), Tensor::new(vec![m.len()], m.clone()).expect("shape"))).collect()
}

impl Checkpoint {
    /// Layout: magic, `u32` version, `u64` manifest length, JSON manifest,
    /// parameter table, first and second moment tables, SHA-256 of all
    /// preceding bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            format: "nmtbench-checkpoint".into(),
            config: self.model.config.clone(),
            source_subword_digest: self.model.source_subword_digest.clone(),
            target_subword_digest: self.model.target_subword_digest.clone(),
            hyperparameters: self.hyperparameters.clone(),
            optimizer: self.optimizer.clone(),
            progress: self.progress.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        write_tensor_table(&mut out, &self.model.params.named_values());
        write_tensor_table(&mut out, &moments_table(self, &self.optimizer.first_moments));
        write_tensor_table(&mut out, &moments_table(self, &self.optimizer.second_moments));
        let digest = Sha256::digest(&out);
        out.extend(digest.as_slice());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainingError> {
        if bytes.len() < 12 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(TrainingError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let len = u64::from_le_bytes(body.get(12..20).ok_or_else(|| corrupt("truncated header"))?.try_into().unwrap()) as usize;
        let json = body.get(20..20usize.saturating_add(len)).ok_or_else(|| corrupt("truncated manifest"))?;
        let m: Manifest = serde_json::from_slice(json).map_err(|e| corrupt(format!("manifest: {e}")))?;
        let mut cursor = 20 + len;
        let params = read_tensor_table(body, &mut cursor).map_err(|e| corrupt(e.to_string()))?;
        let first = read_tensor_table(body, &mut cursor).map_err(|e| corrupt(e.to_string()))?;
        let second = read_tensor_table(body, &mut cursor).map_err(|e| corrupt(e.to_string()))?;
        if cursor != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let mut model =
            Seq2SeqModel::build(m.config, 0).map_err(|e| corrupt(e.to_string()))?.with_subword_digests(m.source_subword_digest, m.target_subword_digest);
        model.params.load_values(params).map_err(|e| corrupt(e.to_string()))?;
        let mut optimizer = m.optimizer;
        for (table, slot) in [(first, &mut optimizer.first_moments), (second, &mut optimizer.second_moments)] {
            if !table.is_empty() && table.len() != model.params.len() {
                return Err(corrupt("moment table does not match the parameters"));
            }
            for ((name, t), p) in table.iter().zip(model.params.iter()) {
                if *name != p.name || t.len() != p.value.len() {
                    return Err(corrupt(format!("moment entry {name} does not match parameter {}", p.name)));
                }
            }
            *slot = table.into_iter().map(|(_, t)| t.into_data()).collect();
        }
        Ok(Self { model, optimizer, hyperparameters: m.hyperparameters, progress: m.progress })
    }
}

/// Writes through a temporary file and rename so readers never see a
/// partial checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainingError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, ckpt.to_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainingError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
