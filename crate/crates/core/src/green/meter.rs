use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::{integrate_energy, sample_power, PowerProvider, PowerSample, Stage, StageRecord};
use crate::training::{Clock, EnergyProbe};

pub const DEFAULT_PERIOD: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeterSnapshot {
    pub samples: Vec<PowerSample>,
    pub fallback_reason: Option<String>,
}

struct State {
    samples: Vec<PowerSample>,
    fallback_reason: Option<String>,
    log: Option<File>,
    stopped: bool,
}

struct Shared {
    provider: PowerProvider,
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
    wake: Condvar,
}

impl Shared {
    fn sample(&self) -> PowerSample {
        let now = self.clock.now();
        let (s, err) = sample_power(&self.provider, now);
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(e) = err {
            if st.fallback_reason.is_none() {
                log::warn!("power measurement unavailable, using the estimate: {e}");
                st.fallback_reason = Some(e.to_string());
            }
        }
        // Keep timestamps non-decreasing even if sampler and probe race.
        let mut s = s;
        if let Some(last) = st.samples.last() {
            s.timestamp = s.timestamp.max(last.timestamp);
        }
        if let Some(f) = st.log.as_mut() {
            if let Ok(line) = serde_json::to_string(&s) {
                let _ = writeln!(f, "{line}").and_then(|_| f.flush());
            }
        }
        st.samples.push(s.clone());
        s
    }
}

/// Samples a provider at the start, periodically on a background thread (if
/// a period is given), whenever [`EnergyProbe::kwh`] is read, and at
/// [`finish`](Self::finish).
pub struct PowerMeter {
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
    started: f64,
}

impl PowerMeter {
    pub fn start(provider: PowerProvider, clock: Arc<dyn Clock>, period: Option<Duration>, sample_log: Option<&Path>) -> std::io::Result<Self> {
        let log = match sample_log {
            Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        };
        let shared = Arc::new(Shared {
            provider,
            clock,
            state: Mutex::new(State { samples: Vec::new(), fallback_reason: None, log, stopped: false }),
            wake: Condvar::new(),
        });
        let started = shared.sample().timestamp;
        let thread = period.map(|period| {
            let sh = Arc::clone(&shared);
            std::thread::spawn(move || loop {
                let st = sh.state.lock().unwrap_or_else(|e| e.into_inner());
                let (st, _) = sh.wake.wait_timeout_while(st, period, |s| !s.stopped).unwrap_or_else(|e| e.into_inner());
                if st.stopped {
                    return;
                }
                drop(st);
                sh.sample();
            })
        });
        Ok(Self { shared, thread, started })
    }

    pub fn snapshot(&self) -> MeterSnapshot {
        let st = self.shared.state.lock().unwrap_or_else(|e| e.into_inner());
        MeterSnapshot { samples: st.samples.clone(), fallback_reason: st.fallback_reason.clone() }
    }

    /// Stops the sampler, takes a closing sample and returns everything.
    pub fn finish(mut self) -> MeterSnapshot {
        self.stop();
        self.shared.sample();
        self.snapshot()
    }

    /// [`finish`](Self::finish), packaged for the report.
    pub fn finish_stage(self, stage: Stage) -> StageRecord {
        let started = self.started;
        let snap = self.finish();
        let end = snap.samples.last().map_or(started, |s| s.timestamp);
        StageRecord { stage, duration_secs: end - started, samples: snap.samples, fallback_reason: snap.fallback_reason }
    }

    fn stop(&mut self) {
        self.shared.state.lock().unwrap_or_else(|e| e.into_inner()).stopped = true;
        self.shared.wake.notify_all();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for PowerMeter {
    fn drop(&mut self) {
        self.stop();
    }
}

impl EnergyProbe for PowerMeter {
    /// Energy since the meter started, sampling now.
    fn kwh(&self) -> f64 {
        self.shared.sample();
        let snap = self.snapshot();
        integrate_energy(&snap.samples, 0.0).unwrap_or(0.0)
    }
}
