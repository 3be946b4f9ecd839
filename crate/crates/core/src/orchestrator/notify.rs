use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::OrchestratorError;

/// Where to report that a run finished. Both channels may be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NotifierSettings {
    /// Receives a JSON POST `{"run_id", "outcome", "message"}`.
    pub webhook_url: Option<String>,
    /// Run as `argv... <run_id> <outcome>`.
    pub command: Option<Vec<String>>,
    /// Per channel; 10 s when unset.
    pub timeout_secs: Option<f64>,
}

impl NotifierSettings {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::InvalidConfig(m.into()));
        if let Some(u) = &self.webhook_url {
            if !(u.starts_with("http://") || u.starts_with("https://")) {
                return bad("notifier.webhook_url must be an http(s) URL");
            }
        }
        if self.command.as_ref().is_some_and(|c| c.is_empty()) {
            return bad("notifier.command is empty");
        }
        if self.timeout_secs.is_some_and(|t| !(t.is_finite() && t > 0.0)) {
            return bad("notifier.timeout_secs must be positive");
        }
        Ok(())
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.unwrap_or(10.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum Outcome {
    Completed,
    Failed { stage: String, error: String },
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Completed => "completed",
            Outcome::Failed { .. } => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryStatus {
    /// No channel configured.
    Skipped,
    Delivered,
    DeliveryFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryAttempt {
    pub channel: String,
    pub status: DeliveryStatus,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotificationRecord {
    pub at: f64,
    pub outcome: Outcome,
    /// `Delivered` only if every configured channel delivered.
    pub status: DeliveryStatus,
    pub attempts: Vec<DeliveryAttempt>,
}

/// Sends the outcome on every configured channel. Never fails; problems are
/// recorded and logged.
pub fn notify(settings: &NotifierSettings, run_id: &str, outcome: &Outcome, at: f64) -> NotificationRecord {
    let mut attempts = Vec::new();
    if let Some(url) = &settings.webhook_url {
        let message = match outcome {
            Outcome::Completed => format!("run {run_id} completed"),
            Outcome::Failed { stage, error } => format!("run {run_id} failed in {stage}: {error}"),
        };
        let body = serde_json::json!({ "run_id": run_id, "outcome": outcome, "message": message }).to_string();
        attempts.push(record("webhook", post(url, &body, settings.timeout())));
    }
    if let Some(argv) = &settings.command {
        attempts.push(record("command", run_hook(argv, run_id, outcome.label(), settings.timeout())));
    }
    let status = if attempts.is_empty() {
        DeliveryStatus::Skipped
    } else if attempts.iter().all(|a| a.status == DeliveryStatus::Delivered) {
        DeliveryStatus::Delivered
    } else {
        DeliveryStatus::DeliveryFailed
    };
    NotificationRecord { at, outcome: outcome.clone(), status, attempts }
}

fn record(channel: &str, result: Result<(), String>) -> DeliveryAttempt {
    match result {
        Ok(()) => DeliveryAttempt { channel: channel.into(), status: DeliveryStatus::Delivered, detail: None },
        Err(e) => {
            log::warn!("notification via {channel} failed: {e}");
            DeliveryAttempt { channel: channel.into(), status: DeliveryStatus::DeliveryFailed, detail: Some(e) }
        }
    }
}

fn post(url: &str, body: &str, timeout: Duration) -> Result<(), String> {
    let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
    agent.post(url).header("content-type", "application/json").send(body.as_bytes()).map(|_| ()).map_err(|e| e.to_string())
}

fn run_hook(argv: &[String], run_id: &str, outcome: &str, timeout: Duration) -> Result<(), String> {
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .args([run_id, outcome])
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| format!("{}: {e}", argv[0]))?;
    let started = Instant::now();
    loop {
        match child.try_wait().map_err(|e| e.to_string())? {
            Some(s) if s.success() => return Ok(()),
            Some(s) => return Err(format!("{} exited with {s}", argv[0])),
            None if started.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(format!("{} timed out", argv[0]));
            }
            None => std::thread::sleep(Duration::from_millis(10)),
        }
    }
}
