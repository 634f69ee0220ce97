//! Append-only JSONL experiment log, one file per run.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Metric,
    Param,
    Artifact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventValue {
    Real(f64),
    Text(String),
}

impl From<f64> for EventValue {
    fn from(v: f64) -> Self {
        EventValue::Real(v)
    }
}

impl From<String> for EventValue {
    fn from(v: String) -> Self {
        EventValue::Text(v)
    }
}

impl From<&str> for EventValue {
    fn from(v: &str) -> Self {
        EventValue::Text(v.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingEvent {
    pub run_id: String,
    pub step: u64,
    /// Seconds since the Unix epoch.
    pub wall_time: f64,
    pub kind: EventKind,
    pub key: String,
    pub value: EventValue,
}

/// Single writer for one run. Each event is serialized to a complete line
/// and handed to the OS in one `write` on an append-mode file, so a killed
/// process leaves only whole lines behind.
#[derive(Debug)]
pub struct Tracker {
    run_id: String,
    path: PathBuf,
    file: File,
    last_step: u64,
}

impl Tracker {
    /// Opens `<uri>/run-<run_id>.jsonl`, creating the directory. Fails here,
    /// not mid-run, when the location is not writable.
    pub fn create(uri: &Path, run_id: Option<String>) -> Result<Self> {
        fs::create_dir_all(uri).map_err(|e| Error::io(uri, e))?;
        let run_id = run_id.unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
        let path = uri.join(format!("run-{run_id}.jsonl"));
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { run_id, path, file, last_step: 0 })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log(&mut self, step: u64, kind: EventKind, key: &str, value: impl Into<EventValue>) -> Result<()> {
        if step < self.last_step {
            return Err(Error::InvalidArgument(format!("tracking step went back from {} to {step}", self.last_step)));
        }
        self.last_step = step;
        let wall_time = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let event = TrackingEvent { run_id: self.run_id.clone(), step, wall_time, kind, key: key.to_string(), value: value.into() };
        let mut line = serde_json::to_vec(&event)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }

    pub fn metric(&mut self, step: u64, key: &str, value: f64) -> Result<()> {
        self.log(step, EventKind::Metric, key, value)
    }

    pub fn param(&mut self, step: u64, key: &str, value: impl Into<EventValue>) -> Result<()> {
        self.log(step, EventKind::Param, key, value)
    }
}

/// Parses a run file. A trailing partial line (no newline) is ignored.
pub fn read_events(path: &Path) -> Result<Vec<TrackingEvent>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let complete = match raw.rfind('\n') {
        Some(i) => &raw[..=i],
        None => "",
    };
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed { path: path.to_path_buf(), line: i + 1, message: e.to_string() })
        })
        .collect()
}

/// `(step, value)` series per metric key, in file order.
pub fn metric_curves(events: &[TrackingEvent]) -> BTreeMap<String, Vec<(u64, f64)>> {
    let mut out: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for e in events {
        if let (EventKind::Metric, EventValue::Real(v)) = (e.kind, &e.value) {
            out.entry(e.key.clone()).or_default().push((e.step, *v));
        }
    }
    out
}

/// Human-readable summary of a run file: params, then first/last/best of
/// every metric.
pub fn render_report(events: &[TrackingEvent]) -> String {
    let mut s = String::new();
    if let Some(e) = events.first() {
        s.push_str(&format!("run {}\n", e.run_id));
    }
    for e in events.iter().filter(|e| e.kind != EventKind::Metric) {
        let v = match &e.value {
            EventValue::Real(v) => v.to_string(),
            EventValue::Text(t) => t.clone(),
        };
        s.push_str(&format!("  {:<8} {:<28} {}\n", format!("{:?}", e.kind).to_lowercase(), e.key, v));
    }
    for (key, curve) in metric_curves(events) {
        let (first, last) = (curve[0], curve[curve.len() - 1]);
        let best = curve.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        s.push_str(&format!(
            "  metric   {key:<28} n={:<5} first={:.4} last={:.4} (step {}) max={best:.4}\n",
            curve.len(),
            first.1,
            last.1,
            last.0
        ));
    }
    s
}
