//! AutoBuild and run management.
//!
//! A run lives in one directory:
//!
//! ```text
//! config.toml          exact config text (its SHA-256 is the run digest)
//! manifest.json        stage statuses and artifact paths
//! run.lock             held while a pipeline is active
//! splits/              corpus.{train,valid,test}.{lang}
//! subword/             source.model, target.model
//! checkpoints/         step-N.ckpt, best.ckpt, last.ckpt
//! translations/        test.hyp, test.jsonl
//! reports/             training.json, evaluation.{json,txt}, green.{json,txt},
//!                      results.md, energy/, plots/
//! logs/                events.jsonl, console.log, power.jsonl
//! ```
//!
//! Stages run in order (split, subword, train, translate, evaluate, report).
//! Re-running resumes at the first stage that is not done; a run that is
//! already complete is left untouched.

mod config;
mod deploy;
mod manifest;
mod notify;
mod plots;

pub use config::{PowerSettings, PreSplit, RawCorpus, RunConfig, RunSpec, SubwordSettings};
pub use deploy::{deploy, translate_with, BundleInfo, LoadedBundle, BUNDLE_VERSION};
pub use manifest::{write_atomic, PipelineStage, RunLayout, RunLock, RunManifest, StageState, StageStatus, LAYOUT_VERSION};
pub use notify::{notify, DeliveryAttempt, DeliveryStatus, NotificationRecord, NotifierSettings, Outcome};
pub use plots::{export_plots, line_chart, read_events, series, SeriesFiles, SERIES};

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, ParallelCorpus, Splits};
use crate::green::{render_green_report, PowerMeter, StageRecord};
use crate::metrics::evaluate;
use crate::models::Seq2SeqModel;
use crate::subword::{self, SubwordModel};
use crate::training::{self, Clock, EnergyProbe, EventSink, JsonlSink, StopReason, SystemClock, TrainOptions, TrainingEvent};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("run directory {0} is in use by another pipeline")]
    Locked(PathBuf),
    #[error("run directory {dir} belongs to a different config (digest {expected}, given {found})")]
    ConfigChanged { dir: PathBuf, expected: String, found: String },
    #[error("stage {} failed: {message}", stage.name())]
    StageFailed { stage: PipelineStage, message: String },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("corrupt event log: {0}")]
    CorruptEvents(String),
    #[error("the run has no training events")]
    NoEvents,
    #[error("no checkpoint in {0}")]
    NoCheckpoint(PathBuf),
    #[error("bad bundle: {0}")]
    Bundle(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl OrchestratorError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Process exit status for the command-line tool. Stage failures map to
    /// `10 + stage index`.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } => 1,
            Self::InvalidConfig(_) => 2,
            Self::Locked(_) => 3,
            Self::ConfigChanged { .. } => 4,
            Self::CorruptManifest(_) => 5,
            Self::StageFailed { stage, .. } => 10 + stage.index() as i32,
            Self::NoEvents => 20,
            Self::CorruptEvents(_) => 21,
            Self::NoCheckpoint(_) => 22,
            Self::Bundle(_) => 23,
        }
    }
}

pub(crate) fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct AutobuildOptions {
    pub clock: Arc<dyn Clock>,
    /// Receives every training event as well as `logs/events.jsonl`.
    pub events: Option<Box<dyn EventSink + Send>>,
    /// Stop after this stage.
    pub until: Option<PipelineStage>,
    /// Overrides `output_root/run_name`.
    pub run_dir: Option<PathBuf>,
}

impl Default for AutobuildOptions {
    fn default() -> Self {
        Self { clock: Arc::new(SystemClock), events: None, until: None, run_dir: None }
    }
}

/// Where `spec` puts its run unless overridden.
pub fn run_dir_for(config: &RunConfig) -> PathBuf {
    config.output_root.join(&config.run_name)
}

/// Training results kept in `reports/training.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub steps: u64,
    pub stop: StopReason,
    pub best_step: Option<u64>,
    pub best_valid_ppl: Option<f64>,
    pub best_valid_accuracy: Option<f64>,
    pub last_event: Option<TrainingEvent>,
}

/// Runs the pipeline for `spec`, resuming a partial run in the same
/// directory.
pub fn autobuild(spec: &RunSpec, mut opts: AutobuildOptions) -> Result<RunManifest, OrchestratorError> {
    let cfg = &spec.config;
    cfg.validate()?;
    let layout = RunLayout::new(opts.run_dir.clone().unwrap_or_else(|| run_dir_for(cfg)));
    layout.create_dirs()?;
    let _lock = RunLock::acquire(&layout)?;
    let clock = Arc::clone(&opts.clock);
    let digest = spec.digest();
    let mut manifest = if layout.manifest().exists() {
        let m = RunManifest::load(&layout.manifest())?;
        if m.config_digest != digest {
            return Err(OrchestratorError::ConfigChanged { dir: layout.root.clone(), expected: m.config_digest, found: digest });
        }
        m
    } else {
        write_atomic(&layout.config(), spec.text.as_bytes())?;
        let m = RunManifest::new(&cfg.run_name, &digest, clock.now());
        m.save(&layout)?;
        m
    };
    let last = opts.until.unwrap_or(PipelineStage::Report);
    let Some(first) = manifest.first_unfinished().filter(|s| *s <= last) else {
        return Ok(manifest);
    };
    for st in &mut manifest.stages[first.index()..] {
        *st = StageState { stage: st.stage, status: StageStatus::Pending, started_at: None, finished_at: None, error: None, artifacts: vec![] };
    }
    manifest.notification = None;
    let console = ConsoleLog::open(&layout.console(), Arc::clone(&clock))?;
    console.line(&format!("run {} ({}): starting at stage {}", manifest.run_id, &digest[..12], first.name()));

    for stage in &PipelineStage::ALL[first.index()..=last.index()] {
        let stage = *stage;
        let st = manifest.stage_mut(stage);
        st.status = StageStatus::Running;
        st.started_at = Some(clock.now());
        manifest.updated_at = clock.now();
        manifest.save(&layout)?;
        console.line(&format!("stage {}: started", stage.name()));
        let result = run_metered(stage, cfg, &layout, &console, &clock, &mut opts.events);
        let now = clock.now();
        let st = manifest.stage_mut(stage);
        st.finished_at = Some(now);
        manifest.updated_at = now;
        match result {
            Ok(artifacts) => {
                let st = manifest.stage_mut(stage);
                st.status = StageStatus::Done;
                st.artifacts = artifacts.iter().map(|p| layout.rel(p)).collect();
                manifest.save(&layout)?;
                console.line(&format!("stage {}: done", stage.name()));
            }
            Err(e) => {
                let message = e.to_string();
                let st = manifest.stage_mut(stage);
                st.status = StageStatus::Failed;
                st.error = Some(message.clone());
                console.line(&format!("stage {}: failed: {message}", stage.name()));
                let outcome = Outcome::Failed { stage: stage.name().into(), error: message.clone() };
                manifest.notification = Some(notify(&cfg.notifier, &manifest.run_id, &outcome, clock.now()));
                manifest.save(&layout)?;
                return Err(OrchestratorError::StageFailed { stage, message });
            }
        }
    }
    if manifest.is_complete() {
        let record = notify(&cfg.notifier, &manifest.run_id, &Outcome::Completed, clock.now());
        console.line(&format!("run {}: complete; notification {:?}", manifest.run_id, record.status));
        manifest.notification = Some(record);
        manifest.save(&layout)?;
    }
    Ok(manifest)
}

type StageResult = Result<Vec<PathBuf>, Box<dyn std::error::Error + Send + Sync>>;

fn run_metered(
    stage: PipelineStage,
    cfg: &RunConfig,
    layout: &RunLayout,
    console: &ConsoleLog,
    clock: &Arc<dyn Clock>,
    extra: &mut Option<Box<dyn EventSink + Send>>,
) -> StageResult {
    let Some(energy_stage) = stage.energy_stage() else {
        return stage_report(cfg, layout);
    };
    let period = (cfg.power.sample_period_secs > 0.0).then(|| Duration::from_secs_f64(cfg.power.sample_period_secs));
    let meter = PowerMeter::start(cfg.power.provider.clone(), Arc::clone(clock), period, Some(&layout.power_log()))?;
    let result = match stage {
        PipelineStage::Split => stage_split(cfg, layout, console),
        PipelineStage::Subword => stage_subword(cfg, layout, console),
        PipelineStage::Train => {
            let base = previous_energy(layout, stage);
            let probe = OffsetProbe { base, meter: &meter };
            stage_train(cfg, layout, console, clock.as_ref(), &probe, extra)
        }
        PipelineStage::Translate => stage_translate(cfg, layout, console),
        PipelineStage::Evaluate => stage_evaluate(cfg, layout, console),
        PipelineStage::Report => unreachable!("the report stage is not metered"),
    };
    let record = meter.finish_stage(energy_stage);
    let path = layout.energy_record(energy_stage);
    write_atomic(&path, serde_json::to_string_pretty(&record)?.as_bytes())?;
    let mut artifacts = result?;
    artifacts.push(path);
    Ok(artifacts)
}

/// Energy of the metered stages before `stage`, from their records.
fn previous_energy(layout: &RunLayout, stage: PipelineStage) -> f64 {
    PipelineStage::ALL[..stage.index()]
        .iter()
        .filter_map(|s| s.energy_stage())
        .filter_map(|s| load_energy_record(layout, s))
        .filter_map(|r| crate::green::integrate_energy(&r.samples, r.duration_secs).ok())
        .sum()
}

fn load_energy_record(layout: &RunLayout, stage: crate::green::Stage) -> Option<StageRecord> {
    let text = std::fs::read_to_string(layout.energy_record(stage)).ok()?;
    serde_json::from_str(&text).ok()
}

struct OffsetProbe<'a> {
    base: f64,
    meter: &'a PowerMeter,
}

impl EnergyProbe for OffsetProbe<'_> {
    fn kwh(&self) -> f64 {
        self.base + self.meter.kwh()
    }
}

fn load_run_splits(cfg: &RunConfig, layout: &RunLayout) -> Result<Splits, corpus::CorpusError> {
    corpus::load_splits(&layout.split_prefix(), &cfg.source_lang, &cfg.target_lang)
}

fn stage_split(cfg: &RunConfig, layout: &RunLayout, console: &ConsoleLog) -> StageResult {
    let relabel = |c: ParallelCorpus| ParallelCorpus { source_lang: cfg.source_lang.clone(), target_lang: cfg.target_lang.clone(), ..c };
    let splits = match (&cfg.corpus, &cfg.pre_split) {
        (Some(raw), _) => {
            let all = relabel(corpus::load_parallel(&raw.source, &raw.target)?);
            let cleaned = corpus::clean(&all, raw.min_len, raw.max_len.unwrap_or(usize::MAX), raw.drop_duplicates);
            console.line(&format!("corpus: {} pairs read, {} kept after cleaning", all.len(), cleaned.len()));
            corpus::split(&cleaned, &cfg.split.unwrap_or_default())?
        }
        (None, Some(p)) => Splits {
            train: relabel(corpus::load_parallel(&p.train_source, &p.train_target)?),
            valid: relabel(corpus::load_parallel(&p.valid_source, &p.valid_target)?),
            test: relabel(corpus::load_parallel(&p.test_source, &p.test_target)?),
        },
        (None, None) => unreachable!("validated config has a data source"),
    };
    for (name, part) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        if part.is_empty() {
            return Err(format!("the {name} split is empty").into());
        }
    }
    corpus::write_splits(&splits, &layout.split_prefix())?;
    console.line(&format!("splits: train {}, valid {}, test {}", splits.train.len(), splits.valid.len(), splits.test.len()));
    let mut out = Vec::new();
    for name in ["train", "valid", "test"] {
        let (s, t) = corpus::split_paths(&layout.split_prefix(), name, &cfg.source_lang, &cfg.target_lang);
        out.extend([s, t]);
    }
    Ok(out)
}

fn stage_subword(cfg: &RunConfig, layout: &RunLayout, console: &ConsoleLog) -> StageResult {
    let splits = load_run_splits(cfg, layout)?;
    let kind = cfg.subword.kind;
    let src = subword::train(kind, splits.train.sources(), cfg.subword.source_vocab_size)?;
    let tgt = subword::train(kind, splits.train.targets(), cfg.subword.target_vocab_size)?;
    src.save(&layout.source_subword())?;
    tgt.save(&layout.target_subword())?;
    console.line(&format!("subword ({}): source vocabulary {}, target vocabulary {}", kind.as_str(), src.vocab_size(), tgt.vocab_size()));
    Ok(vec![layout.source_subword(), layout.target_subword()])
}

/// Highest `step-N.ckpt` in `dir`.
fn latest_step_checkpoint(dir: &Path) -> Option<(u64, PathBuf)> {
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(Result::ok)
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step = name.strip_prefix("step-")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((step, e.path()))
        })
        .max_by_key(|(s, _)| *s)
}

/// Drops logged events after `step` so a resumed run can re-emit them.
fn truncate_events(path: &Path, step: u64) -> Result<(), OrchestratorError> {
    let kept: Vec<TrainingEvent> = read_events(path)?.into_iter().filter(|e| e.step <= step).collect();
    let mut text = String::new();
    for e in &kept {
        text.push_str(&serde_json::to_string(e).expect("event serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

struct ConsoleSink(ConsoleLog);

impl EventSink for ConsoleSink {
    fn publish(&mut self, e: &TrainingEvent) -> std::io::Result<()> {
        self.0.line(&format!(
            "step {} epoch {} | train loss {:.4} acc {:.4} | valid acc {:.4} ppl {:.4} | lr {:.3e} | {:.6} kWh",
            e.step, e.epoch, e.train_loss, e.train_accuracy, e.valid_accuracy, e.valid_ppl, e.learning_rate, e.energy_kwh
        ));
        Ok(())
    }
}

struct Fanout<'a>(Vec<&'a mut dyn EventSink>);

impl EventSink for Fanout<'_> {
    fn publish(&mut self, e: &TrainingEvent) -> std::io::Result<()> {
        for s in &mut self.0 {
            s.publish(e)?;
        }
        Ok(())
    }
}

fn stage_train(
    cfg: &RunConfig,
    layout: &RunLayout,
    console: &ConsoleLog,
    clock: &dyn Clock,
    energy: &dyn EnergyProbe,
    extra: &mut Option<Box<dyn EventSink + Send>>,
) -> StageResult {
    let splits = load_run_splits(cfg, layout)?;
    let src = SubwordModel::load(&layout.source_subword())?;
    let tgt = SubwordModel::load(&layout.target_subword())?;
    let train = training::encode_corpus(&splits.train, &src, &tgt);
    let valid = training::encode_corpus(&splits.valid, &src, &tgt);
    let arch = cfg.architecture_for(src.vocab_size(), tgt.vocab_size());
    let hp = cfg.hyperparameters();
    let ckpt_dir = layout.checkpoints();

    let resumable = latest_step_checkpoint(&ckpt_dir).and_then(|(step, path)| {
        let c = training::load_checkpoint(&path).ok()?;
        let same =
            c.model.config == arch && c.hyperparameters == hp && c.model.source_subword_digest == src.digest() && c.model.target_subword_digest == tgt.digest();
        same.then_some((step, c))
    });
    if let Some((step, _)) = &resumable {
        truncate_events(&layout.events(), *step)?;
        console.line(&format!("train: resuming from step {step}"));
    } else {
        let _ = std::fs::remove_file(layout.events());
        for e in std::fs::read_dir(&ckpt_dir)?.filter_map(Result::ok) {
            std::fs::remove_file(e.path())?;
        }
    }

    let mut file_sink = JsonlSink::append(&layout.events())?;
    let mut console_sink = ConsoleSink(console.clone());
    let mut sinks: Vec<&mut dyn EventSink> = vec![&mut file_sink, &mut console_sink];
    if let Some(x) = extra.as_mut() {
        sinks.push(x.as_mut());
    }
    let mut fanout = Fanout(sinks);
    let mut opts = TrainOptions { sink: &mut fanout, clock, energy, checkpoint_dir: Some(&ckpt_dir) };
    let outcome = match resumable {
        Some((_, c)) => training::resume(c, &train, &valid, &hp, &mut opts)?,
        None => {
            let model = Seq2SeqModel::build(arch, hp.seed)?.with_subword_digests(src.digest(), tgt.digest());
            training::train(model, &train, &valid, &hp, &mut opts)?
        }
    };
    drop(fanout);

    let events = read_events(&layout.events())?;
    let best = events.iter().fold(None::<&TrainingEvent>, |b, e| match b {
        Some(b) if b.valid_ppl <= e.valid_ppl => Some(b),
        _ => Some(e),
    });
    let summary = TrainingSummary {
        steps: outcome.last.progress.step,
        stop: outcome.stop,
        best_step: best.map(|e| e.step),
        best_valid_ppl: best.map(|e| e.valid_ppl),
        best_valid_accuracy: best.map(|e| e.valid_accuracy),
        last_event: events.last().cloned(),
    };
    write_atomic(&layout.training_summary(), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    console.line(&format!("train: stopped after {} steps ({:?})", summary.steps, summary.stop));
    let mut out = vec![layout.last_checkpoint(), layout.events(), layout.training_summary()];
    if layout.best_checkpoint().exists() {
        out.push(layout.best_checkpoint());
    }
    Ok(out)
}

fn stage_translate(cfg: &RunConfig, layout: &RunLayout, console: &ConsoleLog) -> StageResult {
    let bundle = LoadedBundle::from_run(&layout.root, cfg.decode)?;
    let splits = load_run_splits(cfg, layout)?;
    let sources: Vec<String> = splits.test.sources().map(String::from).collect();
    let out = translate_with(&[&bundle], &sources, &cfg.decode)?;
    corpus::write_lines(&layout.hypotheses(), out.iter().map(|t| t.text.as_str()))?;
    let mut details = String::new();
    for t in &out {
        let line = serde_json::json!({ "text": t.text, "score": t.score, "log_prob": t.log_prob, "finished": t.finished });
        details.push_str(&line.to_string());
        details.push('\n');
    }
    write_atomic(&layout.translation_details(), details.as_bytes())?;
    console.line(&format!("translate: {} test sentences, beam {}", out.len(), cfg.decode.beam_size));
    Ok(vec![layout.hypotheses(), layout.translation_details()])
}

fn stage_evaluate(cfg: &RunConfig, layout: &RunLayout, console: &ConsoleLog) -> StageResult {
    let hyps = corpus::read_lines(&layout.hypotheses())?;
    let refs: Vec<String> = load_run_splits(cfg, layout)?.test.targets().map(String::from).collect();
    let report = evaluate(&hyps, &refs, &cfg.evaluation, &cfg.metrics)?;
    write_atomic(&layout.evaluation_json(), serde_json::to_string_pretty(&report)?.as_bytes())?;
    let table = report.table();
    write_atomic(&layout.evaluation_text(), table.as_bytes())?;
    for line in table.lines() {
        console.line(line);
    }
    Ok(vec![layout.evaluation_json(), layout.evaluation_text()])
}

fn stage_report(cfg: &RunConfig, layout: &RunLayout) -> StageResult {
    let records: Vec<StageRecord> = crate::green::Stage::ALL
        .iter()
        .map(|&s| load_energy_record(layout, s).unwrap_or(StageRecord { stage: s, samples: vec![], duration_secs: 0.0, fallback_reason: None }))
        .collect();
    let green = render_green_report(&records, &cfg.emissions)?;
    write_atomic(&layout.green_json(), serde_json::to_string_pretty(&green)?.as_bytes())?;
    write_atomic(&layout.green_text(), green.to_text().as_bytes())?;
    let plots = export_plots(&layout.root)?;

    let manifest = RunManifest::load(&layout.manifest())?;
    let training: TrainingSummary = serde_json::from_str(&std::fs::read_to_string(layout.training_summary())?)?;
    let evaluation = std::fs::read_to_string(layout.evaluation_text())?;
    let splits = load_run_splits(cfg, layout)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let mut md = format!("# Run {}\n\nconfig digest: `{}`\n\n", manifest.run_id, manifest.config_digest);
    md.push_str(&format!(
        "## Data\n\ntrain {} pairs, valid {} pairs, test {} pairs ({} → {})\n\n",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        cfg.source_lang,
        cfg.target_lang
    ));
    md.push_str(&format!(
        "## Training\n\nsteps {} ({:?}); best validation at step {}: accuracy {}, perplexity {}\n\n",
        training.steps,
        training.stop,
        training.best_step.map_or("-".to_string(), |s| s.to_string()),
        fmt(training.best_valid_accuracy),
        fmt(training.best_valid_ppl)
    ));
    md.push_str(&format!("## Evaluation\n\n```text\n{evaluation}```\n\n## Energy\n\n```text\n{}```\n", green.to_text()));
    write_atomic(&layout.results(), md.as_bytes())?;

    let mut out = vec![layout.green_json(), layout.green_text(), layout.results()];
    for p in plots {
        out.extend([p.csv, p.svg]);
    }
    Ok(out)
}

/// The stage transcript, `logs/console.log`. Lines carry seconds since the
/// log was opened.
#[derive(Clone)]
pub struct ConsoleLog {
    file: Arc<Mutex<File>>,
    clock: Arc<dyn Clock>,
    opened: f64,
}

impl ConsoleLog {
    pub fn open(path: &Path, clock: Arc<dyn Clock>) -> Result<Self, OrchestratorError> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| OrchestratorError::io(path, e))?;
        let opened = clock.now();
        Ok(Self { file: Arc::new(Mutex::new(file)), clock, opened })
    }

    pub fn line(&self, msg: &str) {
        log::info!("{msg}");
        let t = self.clock.now() - self.opened;
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        let _ = writeln!(f, "[+{t:.3}s] {msg}").and_then(|_| f.flush());
    }
}

/// Manifests of every run directly under `root`, sorted by run id.
pub fn list_runs(root: &Path) -> Result<Vec<(PathBuf, RunManifest)>, OrchestratorError> {
    let mut out = Vec::new();
    let entries = match std::fs::read_dir(root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(OrchestratorError::io(root, e)),
    };
    for e in entries.filter_map(Result::ok) {
        let dir = e.path();
        let layout = RunLayout::new(&dir);
        if layout.manifest().is_file() {
            out.push((dir, RunManifest::load(&layout.manifest())?));
        }
    }
    out.sort_by(|a, b| a.1.run_id.cmp(&b.1.run_id));
    Ok(out)
}
