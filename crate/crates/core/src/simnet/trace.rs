use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::check::Verdict;
use super::config::{ConfigError, SimConfig};
use crate::consensus::Exclusion;

pub const TRACE_FORMAT_VERSION: u32 = 1;

/// Node id used for events the harness itself records.
pub const HARNESS_NODE: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub config: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tick: u64,
    pub seq: u64,
    pub node: u32,
    pub event: String,
    pub term: u64,
    pub role: String,
    pub commit_index: u64,
    pub detail: Value,
}

impl TraceEvent {
    pub fn field(&self, name: &str) -> Option<&Value> {
        self.detail.get(name)
    }

    pub fn u64_field(&self, name: &str) -> Option<u64> {
        self.field(name).and_then(Value::as_u64)
    }

    pub fn str_field(&self, name: &str) -> Option<&str> {
        self.field(name).and_then(Value::as_str)
    }

    pub fn bool_field(&self, name: &str) -> Option<bool> {
        self.field(name).and_then(Value::as_bool)
    }

    pub fn threat(&self) -> Option<&str> {
        self.str_field("threat")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub id: u32,
    pub alive: bool,
    pub role: String,
    pub term: u64,
    pub commit_index: u64,
    /// Ledger root after applying the committed log, lowercase hex.
    pub root: String,
    pub fingerprint: String,
    /// Committed log entries, canonical encoding in hex.
    pub log: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub nodes: Vec<NodeSummary>,
    pub membership: Vec<u32>,
    pub exclusions: Vec<Exclusion>,
    /// Outcomes of adversary transactions, keyed by transaction id.
    pub tracked: BTreeMap<String, Value>,
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
    pub summary: TraceSummary,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: expected {expected}")]
    Layout { line: usize, expected: &'static str },
    #[error("unsupported trace format {0}")]
    Version(u32),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum Line {
    Header(TraceHeader),
    Event(TraceEvent),
    Summary(TraceSummary),
}

fn canonical_line<T: Serialize>(v: &T) -> String {
    // Value objects are sorted maps, so this yields sorted keys.
    serde_json::to_value(v).expect("serializable").to_string()
}

impl Trace {
    pub fn config(&self) -> Result<SimConfig, ConfigError> {
        SimConfig::from_pairs(self.header.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Newline-delimited JSON, header first and summary last.
    pub fn to_ndjson(&self) -> String {
        let mut out = canonical_line(&Line::Header(self.header.clone()));
        out.push('\n');
        for e in &self.events {
            out.push_str(&canonical_line(&Line::Event(e.clone())));
            out.push('\n');
        }
        out.push_str(&canonical_line(&Line::Summary(self.summary.clone())));
        out.push('\n');
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self, TraceError> {
        let mut header = None;
        let mut events = Vec::new();
        let mut summary = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(raw).map_err(|source| TraceError::Json { line, source })?;
            match parsed {
                Line::Header(h) if header.is_none() && line == 1 => {
                    if h.format_version != TRACE_FORMAT_VERSION {
                        return Err(TraceError::Version(h.format_version));
                    }
                    header = Some(h)
                }
                Line::Event(e) if header.is_some() && summary.is_none() => events.push(e),
                Line::Summary(s) if header.is_some() && summary.is_none() => summary = Some(s),
                Line::Header(_) => return Err(TraceError::Layout { line, expected: "header on the first line only" }),
                _ => return Err(TraceError::Layout { line, expected: "events between header and summary" }),
            }
        }
        let header = header.ok_or(TraceError::Layout { line: 1, expected: "header" })?;
        let summary = summary.ok_or(TraceError::Layout { line: text.lines().count(), expected: "summary" })?;
        let trace = Self { header, events, summary };
        trace.config()?;
        Ok(trace)
    }
}
