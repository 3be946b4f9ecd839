use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{digest_hex, OrchestratorError};
use crate::corpus::SplitSpec;
use crate::green::{EmissionFactors, PowerProvider};
use crate::metrics::{EvalConfig, Metric};
use crate::models::{ArchitectureConfig, DecodeSettings};
use crate::subword::ModelKind;
use crate::training::Hyperparameters;

use super::notify::NotifierSettings;

/// One source and one target file, split by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCorpus {
    pub source: PathBuf,
    pub target: PathBuf,
    /// Pairs with either side outside `min_len..=max_len` tokens are dropped.
    #[serde(default = "one")]
    pub min_len: usize,
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default)]
    pub drop_duplicates: bool,
}

fn one() -> usize {
    1
}

/// Train, validation and test files supplied by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreSplit {
    pub train_source: PathBuf,
    pub train_target: PathBuf,
    pub valid_source: PathBuf,
    pub valid_target: PathBuf,
    pub test_source: PathBuf,
    pub test_target: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubwordSettings {
    pub kind: ModelKind,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerSettings {
    pub provider: PowerProvider,
    /// Background sampling period; 0 samples only at stage boundaries and
    /// validations.
    pub sample_period_secs: f64,
}

impl Default for PowerSettings {
    fn default() -> Self {
        Self { provider: PowerProvider::default(), sample_period_secs: 10.0 }
    }
}

/// Everything one AutoBuild run needs. Read from TOML; field names are the
/// file's keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    #[serde(default = "default_root")]
    pub output_root: PathBuf,
    #[serde(default = "default_source_lang")]
    pub source_lang: String,
    #[serde(default = "default_target_lang")]
    pub target_lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<RawCorpus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_split: Option<PreSplit>,
    /// Only with `corpus`; defaults to 80/10/10 with seed 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    pub subword: SubwordSettings,
    pub architecture: ArchitectureConfig,
    /// Defaults depend on the architecture kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparameters: Option<Hyperparameters>,
    #[serde(default)]
    pub decode: DecodeSettings,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default = "all_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default)]
    pub emissions: EmissionFactors,
    #[serde(default)]
    pub power: PowerSettings,
    #[serde(default)]
    pub notifier: NotifierSettings,
}

fn default_root() -> PathBuf {
    PathBuf::from("runs")
}

fn default_source_lang() -> String {
    "src".into()
}

fn default_target_lang() -> String {
    "tgt".into()
}

fn all_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}

impl RunConfig {
    pub fn hyperparameters(&self) -> Hyperparameters {
        self.hyperparameters.clone().unwrap_or_else(|| Hyperparameters::for_arch(self.architecture.kind))
    }

    /// Architecture with vocabulary sizes taken from the subword models.
    pub fn architecture_for(&self, source_vocab: usize, target_vocab: usize) -> ArchitectureConfig {
        ArchitectureConfig { source_vocab_size: source_vocab, target_vocab_size: target_vocab, ..self.architecture.clone() }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::InvalidConfig(m));
        let name_ok = !self.run_name.is_empty()
            && self.run_name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !self.run_name.starts_with('.');
        if !name_ok {
            return bad(format!("run_name {:?} must be non-empty ASCII letters, digits, '-', '_' or '.'", self.run_name));
        }
        for (k, v) in [("source_lang", &self.source_lang), ("target_lang", &self.target_lang)] {
            if v.is_empty() || !v.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return bad(format!("{k} {v:?} must be a short alphanumeric tag"));
            }
        }
        if self.source_lang == self.target_lang {
            return bad("source_lang and target_lang must differ".into());
        }
        match (&self.corpus, &self.pre_split) {
            (Some(_), Some(_)) => return bad("give either corpus or pre_split, not both".into()),
            (None, None) => return bad("one of corpus or pre_split is required".into()),
            (None, Some(_)) if self.split.is_some() => return bad("split applies only to a raw corpus".into()),
            _ => {}
        }
        if let Some(c) = &self.corpus {
            if c.max_len.is_some_and(|m| m < c.min_len) {
                return bad("corpus.max_len is below corpus.min_len".into());
            }
        }
        if let Some(s) = &self.split {
            s.validate().map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
        }
        let min_vocab = crate::subword::SPECIAL_PIECES.len() + 1;
        if self.subword.source_vocab_size < min_vocab || self.subword.target_vocab_size < min_vocab {
            return bad(format!("subword vocabulary sizes must be at least {min_vocab}"));
        }
        let arch = self.architecture_for(self.subword.source_vocab_size, self.subword.target_vocab_size);
        arch.validate().map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
        self.hyperparameters().validate().map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
        if self.decode.beam_size == 0 || self.decode.max_length == 0 || !self.decode.alpha.is_finite() {
            return bad("decode needs beam_size ≥ 1, max_length ≥ 1 and a finite alpha".into());
        }
        self.evaluation.validate().map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
        if self.metrics.is_empty() {
            return bad("metrics must name at least one metric".into());
        }
        self.emissions.validate().map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
        self.power.provider.validate().map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
        if !(self.power.sample_period_secs.is_finite() && self.power.sample_period_secs >= 0.0) {
            return bad("power.sample_period_secs must be non-negative".into());
        }
        self.notifier.validate()
    }

    /// Makes relative data and output paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_root);
        if let Some(c) = &mut self.corpus {
            fix(&mut c.source);
            fix(&mut c.target);
        }
        if let Some(p) = &mut self.pre_split {
            for f in [&mut p.train_source, &mut p.train_target, &mut p.valid_source, &mut p.valid_target, &mut p.test_source, &mut p.test_target] {
                fix(f);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}

/// A config together with the exact text it came from; the run digest is
/// taken over that text.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub config: RunConfig,
    pub text: String,
}

impl RunSpec {
    /// Parses TOML. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, OrchestratorError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
        config.resolve_paths(base);
        Ok(Self { config, text: text.to_string() })
    }

    /// Reads a TOML file; relative paths are taken from the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| OrchestratorError::io(path, e))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn from_config(config: RunConfig) -> Self {
        Self { text: config.to_toml(), config }
    }

    pub fn digest(&self) -> String {
        digest_hex(self.text.as_bytes())
    }
}
