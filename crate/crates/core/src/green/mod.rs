//! Power sampling, energy integration and the green report (kWh and kgCO₂
//! per pipeline stage).
//!
//! Power comes from a [`PowerProvider`]: either an external command whose
//! standard output starts with a number of watts, or an estimate from a
//! device TDP and utilization. A command that fails falls back to the
//! estimate and the report says so.

mod meter;

pub use meter::{MeterSnapshot, PowerMeter, DEFAULT_PERIOD};

use std::collections::BTreeMap;
use std::io::Read;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GreenError {
    #[error("power provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("power samples for device {device} go back in time at index {index}")]
    UnorderedSamples { device: String, index: usize },
    #[error("no power samples")]
    NoSamples,
    #[error("invalid emission factors: {0}")]
    InvalidFactors(String),
    #[error("invalid power provider: {0}")]
    InvalidProvider(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerSource {
    Measured,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    pub device: String,
    pub watts: f64,
    pub source: PowerSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Estimate {
    pub device: String,
    pub tdp_watts: f64,
    #[serde(default = "one")]
    pub utilization: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Estimate {
    fn default() -> Self {
        Self { device: "cpu".into(), tdp_watts: 65.0, utilization: 1.0 }
    }
}

impl Estimate {
    pub fn watts(&self) -> f64 {
        self.tdp_watts * self.utilization
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PowerProvider {
    Estimated(Estimate),
    /// `argv[0]` is run with the remaining arguments; its output must start
    /// with a real number of watts ("187.4 W").
    Command {
        argv: Vec<String>,
        #[serde(default = "command_timeout")]
        timeout_secs: f64,
        fallback: Estimate,
    },
}

fn command_timeout() -> f64 {
    5.0
}

impl Default for PowerProvider {
    fn default() -> Self {
        PowerProvider::Estimated(Estimate::default())
    }
}

impl PowerProvider {
    pub fn validate(&self) -> Result<(), GreenError> {
        let est = match self {
            PowerProvider::Estimated(e) => e,
            PowerProvider::Command { argv, timeout_secs, fallback } => {
                if argv.is_empty() {
                    return Err(GreenError::InvalidProvider("empty command".into()));
                }
                if !(timeout_secs.is_finite() && *timeout_secs > 0.0) {
                    return Err(GreenError::InvalidProvider("timeout must be positive".into()));
                }
                fallback
            }
        };
        if !(est.tdp_watts.is_finite() && est.tdp_watts >= 0.0 && est.utilization.is_finite() && est.utilization >= 0.0) {
            return Err(GreenError::InvalidProvider("TDP and utilization must be non-negative".into()));
        }
        Ok(())
    }

    pub fn device(&self) -> &str {
        match self {
            PowerProvider::Estimated(e) => &e.device,
            PowerProvider::Command { fallback, .. } => &fallback.device,
        }
    }
}

/// Leading real number of `text`, after whitespace. Negative or non-finite
/// readings are rejected.
pub fn parse_watts(text: &str) -> Option<f64> {
    let t = text.trim_start();
    let end = t
        .char_indices()
        .find(|&(i, c)| !(c.is_ascii_digit() || c == '.' || (i == 0 && (c == '+' || c == '-')) || c == 'e' || c == 'E'))
        .map_or(t.len(), |(i, _)| i);
    // Back off over a trailing exponent marker with no digits ("12e W").
    let mut num = &t[..end];
    while !num.is_empty() && num.parse::<f64>().is_err() {
        num = &num[..num.len() - 1];
    }
    num.parse::<f64>().ok().filter(|w| w.is_finite() && *w >= 0.0)
}

fn run_command(argv: &[String], timeout: Duration) -> Result<f64, GreenError> {
    let fail = |m: String| GreenError::ProviderUnavailable(m);
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| fail(format!("{}: {e}", argv[0])))?;
    let started = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(s)) => break s,
            Ok(None) if started.elapsed() < timeout => std::thread::sleep(Duration::from_millis(5)),
            Ok(None) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(fail(format!("{} timed out", argv[0])));
            }
            Err(e) => return Err(fail(e.to_string())),
        }
    };
    let mut out = String::new();
    if let Some(mut s) = child.stdout.take() {
        s.read_to_string(&mut out).map_err(|e| fail(e.to_string()))?;
    }
    if !status.success() {
        return Err(fail(format!("{} exited with {status}", argv[0])));
    }
    parse_watts(&out).ok_or_else(|| fail(format!("unparseable output {:?}", out.trim())))
}

/// One reading. A failing command yields the fallback estimate together
/// with the reason.
pub fn sample_power(provider: &PowerProvider, timestamp: f64) -> (PowerSample, Option<GreenError>) {
    match provider {
        PowerProvider::Estimated(e) => (PowerSample { timestamp, device: e.device.clone(), watts: e.watts(), source: PowerSource::Estimated }, None),
        PowerProvider::Command { argv, timeout_secs, fallback } => match run_command(argv, Duration::from_secs_f64(*timeout_secs)) {
            Ok(watts) => (PowerSample { timestamp, device: fallback.device.clone(), watts, source: PowerSource::Measured }, None),
            Err(e) => (PowerSample { timestamp, device: fallback.device.clone(), watts: fallback.watts(), source: PowerSource::Estimated }, Some(e)),
        },
    }
}

/// Trapezoidal energy in kWh, summed over devices. A device with a single
/// sample is charged its power for `stage_seconds`.
pub fn integrate_energy(samples: &[PowerSample], stage_seconds: f64) -> Result<f64, GreenError> {
    if samples.is_empty() {
        return Err(GreenError::NoSamples);
    }
    let mut by_device: BTreeMap<&str, Vec<(usize, &PowerSample)>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_device.entry(&s.device).or_default().push((i, s));
    }
    let mut joules = 0.0;
    for (device, list) in by_device {
        if let [(_, s)] = list.as_slice() {
            joules += s.watts * stage_seconds.max(0.0);
            continue;
        }
        for w in list.windows(2) {
            let ((_, a), (i, b)) = (w[0], w[1]);
            let dt = b.timestamp - a.timestamp;
            if dt.is_nan() || dt < 0.0 {
                return Err(GreenError::UnorderedSamples { device: device.to_string(), index: i });
            }
            joules += 0.5 * (a.watts + b.watts) * dt;
        }
    }
    Ok(joules / 3.6e6)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmissionFactors {
    /// Power usage effectiveness, ≥ 1.
    pub pue: f64,
    /// kgCO₂ per kWh.
    pub carbon_intensity: f64,
    pub region: String,
}

impl Default for EmissionFactors {
    fn default() -> Self {
        Self { pue: 1.0, carbon_intensity: 0.475, region: "world average (placeholder)".into() }
    }
}

impl EmissionFactors {
    pub fn validate(&self) -> Result<(), GreenError> {
        if !(self.pue.is_finite() && self.pue >= 1.0) {
            return Err(GreenError::InvalidFactors(format!("pue {} must be at least 1", self.pue)));
        }
        if !(self.carbon_intensity.is_finite() && self.carbon_intensity > 0.0) {
            return Err(GreenError::InvalidFactors(format!("carbon intensity {} must be positive", self.carbon_intensity)));
        }
        Ok(())
    }
}

/// kgCO₂ for `energy_kwh` of device energy.
pub fn emissions(energy_kwh: f64, factors: &EmissionFactors) -> f64 {
    energy_kwh * factors.pue * factors.carbon_intensity
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Split,
    Subword,
    Train,
    Translate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Split, Stage::Subword, Stage::Train, Stage::Translate, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Split => "split",
            Stage::Subword => "subword",
            Stage::Train => "train",
            Stage::Translate => "translate",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Measured,
    Estimated,
    Mixed,
    Unmeasured,
}

impl Method {
    fn of(samples: &[PowerSample]) -> Method {
        let measured = samples.iter().filter(|s| s.source == PowerSource::Measured).count();
        match (samples.len(), measured) {
            (0, _) => Method::Unmeasured,
            (n, m) if m == n => Method::Measured,
            (_, 0) => Method::Estimated,
            _ => Method::Mixed,
        }
    }

    fn combine(methods: impl Iterator<Item = Method>) -> Method {
        methods.fold(Method::Unmeasured, |acc, m| match (acc, m) {
            (Method::Unmeasured, m) | (m, Method::Unmeasured) => m,
            (a, b) if a == b => a,
            _ => Method::Mixed,
        })
    }
}

/// What one stage recorded: its samples, wall time and any provider
/// failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub samples: Vec<PowerSample>,
    pub duration_secs: f64,
    pub fallback_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEnergy {
    pub stage: Stage,
    pub kwh: f64,
    pub kg_co2: f64,
    pub samples: usize,
    pub method: Method,
    pub fallback_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenReport {
    pub stages: Vec<StageEnergy>,
    pub total_kwh: f64,
    pub total_kg_co2: f64,
    pub factors: EmissionFactors,
    pub sample_count: usize,
    pub method: Method,
}

/// Per-stage and total energy and emissions. Stages without samples are
/// reported with zero energy and [`Method::Unmeasured`].
pub fn render_green_report(stages: &[StageRecord], factors: &EmissionFactors) -> Result<GreenReport, GreenError> {
    factors.validate()?;
    let mut out = Vec::new();
    for r in stages {
        let kwh = match integrate_energy(&r.samples, r.duration_secs) {
            Ok(k) => k,
            Err(GreenError::NoSamples) => 0.0,
            Err(e) => return Err(e),
        };
        out.push(StageEnergy {
            stage: r.stage,
            kwh,
            kg_co2: emissions(kwh, factors),
            samples: r.samples.len(),
            method: Method::of(&r.samples),
            fallback_reason: r.fallback_reason.clone(),
        });
    }
    let total_kwh: f64 = out.iter().map(|s| s.kwh).sum();
    Ok(GreenReport {
        total_kg_co2: emissions(total_kwh, factors),
        total_kwh,
        sample_count: out.iter().map(|s| s.samples).sum(),
        method: Method::combine(out.iter().map(|s| s.method)),
        stages: out,
        factors: factors.clone(),
    })
}

impl GreenReport {
    pub fn to_text(&self) -> String {
        let method = |m: Method| match m {
            Method::Measured => "measured",
            Method::Estimated => "estimated",
            Method::Mixed => "mixed",
            Method::Unmeasured => "unmeasured",
        };
        let mut s = String::from("Green report\n");
        s.push_str(&format!(
            "factors: PUE {} | carbon intensity {} kgCO2/kWh | region {}\n",
            self.factors.pue, self.factors.carbon_intensity, self.factors.region
        ));
        s.push_str(&format!("{:<10} {:>14} {:>14} {:>8}  method\n", "stage", "kWh", "kgCO2", "samples"));
        for st in &self.stages {
            s.push_str(&format!("{:<10} {:>14.9} {:>14.9} {:>8}  {}", st.stage.name(), st.kwh, st.kg_co2, st.samples, method(st.method)));
            if let Some(r) = &st.fallback_reason {
                s.push_str(&format!(" (fallback: {r})"));
            }
            s.push('\n');
        }
        s.push_str(&format!("{:<10} {:>14.9} {:>14.9} {:>8}  {}\n", "total", self.total_kwh, self.total_kg_co2, self.sample_count, method(self.method)));
        s
    }
}
