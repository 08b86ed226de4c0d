//! Line-delimited run telemetry: one metrics record per optimizer iteration
//! and a coarse event stream (phase transitions, prior refits, estimator
//! updates) from which the outer loop structure can be audited. Append-only,
//! single writer, no timestamps — records must be bit-identical across
//! repeat runs.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: u64,
    pub phase: String,
    pub t: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub fixed_intrinsics: bool,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Event {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub round: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iter: Option<u64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub info: BTreeMap<String, f64>,
}

impl Event {
    pub fn new(kind: &str) -> Self {
        Event { kind: kind.into(), round: None, iter: None, info: BTreeMap::new() }
    }

    pub fn round(mut self, r: u64) -> Self {
        self.round = Some(r);
        self
    }

    pub fn iter(mut self, i: u64) -> Self {
        self.iter = Some(i);
        self
    }

    pub fn info(mut self, key: &str, value: f64) -> Self {
        self.info.insert(key.into(), value);
        self
    }
}

/// Collects records in memory and, when configured, mirrors each one to a
/// JSONL file as it arrives.
pub struct Telemetry {
    pub iterations: Vec<IterRecord>,
    pub events: Vec<Event>,
    metrics_file: Option<BufWriter<File>>,
    events_file: Option<BufWriter<File>>,
}

impl Telemetry {
    pub fn in_memory() -> Self {
        Telemetry { iterations: Vec::new(), events: Vec::new(), metrics_file: None, events_file: None }
    }

    pub fn with_files(metrics_path: &Path, events_path: &Path) -> Result<Self> {
        Ok(Telemetry {
            iterations: Vec::new(),
            events: Vec::new(),
            metrics_file: Some(BufWriter::new(File::create(metrics_path)?)),
            events_file: Some(BufWriter::new(File::create(events_path)?)),
        })
    }

    pub fn record(&mut self, rec: IterRecord) -> Result<()> {
        if let Some(f) = &mut self.metrics_file {
            serde_json::to_writer(&mut *f, &rec).map_err(std::io::Error::from)?;
            writeln!(f)?;
        }
        self.iterations.push(rec);
        Ok(())
    }

    pub fn event(&mut self, ev: Event) -> Result<()> {
        if let Some(f) = &mut self.events_file {
            serde_json::to_writer(&mut *f, &ev).map_err(std::io::Error::from)?;
            writeln!(f)?;
        }
        self.events.push(ev);
        Ok(())
    }

    pub fn count_events(&self, kind: &str) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.metrics_file {
            f.flush()?;
        }
        if let Some(f) = &mut self.events_file {
            f.flush()?;
        }
        Ok(())
    }
}
