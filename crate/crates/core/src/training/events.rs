use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::SyncSender;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// One validation report. Serialized as one JSON object per line in
/// `logs/events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingEvent {
    /// Seconds since the Unix epoch, from the run's [`Clock`].
    pub timestamp: f64,
    pub step: u64,
    pub epoch: u64,
    /// Mean smoothed training loss per token since the previous event.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub valid_accuracy: f64,
    pub valid_ppl: f64,
    pub valid_nll: f64,
    pub learning_rate: f64,
    /// Cumulative energy at the time of the event.
    pub energy_kwh: f64,
}

pub trait EventSink {
    fn publish(&mut self, event: &TrainingEvent) -> io::Result<()>;
}

impl EventSink for Vec<TrainingEvent> {
    fn publish(&mut self, event: &TrainingEvent) -> io::Result<()> {
        self.push(event.clone());
        Ok(())
    }
}

impl<A: EventSink, B: EventSink> EventSink for (A, B) {
    fn publish(&mut self, event: &TrainingEvent) -> io::Result<()> {
        self.0.publish(event)?;
        self.1.publish(event)
    }
}

impl<S: EventSink + ?Sized> EventSink for &mut S {
    fn publish(&mut self, event: &TrainingEvent) -> io::Result<()> {
        (**self).publish(event)
    }
}

/// Appends events to a JSON-lines file, flushing after each line so readers
/// can follow the file live.
pub struct JsonlSink {
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn append(path: &Path) -> io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self { out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?) })
    }
}

impl EventSink for JsonlSink {
    fn publish(&mut self, event: &TrainingEvent) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, event)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

/// Forwards events over a bounded channel. A full channel blocks the trainer
/// rather than dropping events.
pub struct ChannelSink(pub SyncSender<TrainingEvent>);

impl EventSink for ChannelSink {
    fn publish(&mut self, event: &TrainingEvent) -> io::Result<()> {
        self.0.send(event.clone()).map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "event receiver dropped"))
    }
}

pub trait Clock: Send + Sync {
    /// Seconds since the Unix epoch.
    fn now(&self) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
    }
}

/// Deterministic clock: the `n`-th reading is `start + n · tick`.
#[derive(Debug, Default)]
pub struct VirtualClock {
    start: f64,
    tick: f64,
    reads: AtomicU64,
}

impl VirtualClock {
    pub fn new(start: f64, tick: f64) -> Self {
        Self { start, tick, reads: AtomicU64::new(0) }
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> f64 {
        let n = self.reads.fetch_add(1, Ordering::Relaxed);
        self.start + n as f64 * self.tick
    }
}

/// Source of the cumulative energy figure stamped on each event.
pub trait EnergyProbe {
    fn kwh(&self) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoEnergy;

impl EnergyProbe for NoEnergy {
    fn kwh(&self) -> f64 {
        0.0
    }
}
