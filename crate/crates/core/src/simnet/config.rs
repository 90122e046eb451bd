use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use super::scenario::ThreatId;
use crate::attestation::ClockRate;
use crate::consensus::ConsensusConfig;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {value}")]
    InvalidValue { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(&'static str),
}

/// Messages between `minority` and everyone else are dropped during
/// `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub start: u64,
    pub end: u64,
    pub minority: Vec<u32>,
}

impl Partition {
    pub fn separates(&self, tick: u64, a: u32, b: u32) -> bool {
        (self.start..self.end).contains(&tick) && self.minority.contains(&a) != self.minority.contains(&b)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.minority.iter().map(u32::to_string).collect();
        write!(f, "{}-{}:{}", self.start, self.end, ids.join(","))
    }
}

impl Partition {
    fn parse(s: &str) -> Option<Self> {
        let (range, ids) = s.split_once(':')?;
        let (start, end) = range.split_once('-')?;
        let minority = ids.split(',').map(|x| x.trim().parse().ok()).collect::<Option<Vec<u32>>>()?;
        Some(Self { start: start.trim().parse().ok()?, end: end.trim().parse().ok()?, minority })
    }
}

/// Individual mitigation switches. All on by default; a scenario mutation
/// turns exactly one mechanism off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mitigations {
    pub verify_client_signatures: bool,
    pub verify_outer: bool,
    pub verify_inner_measurement: bool,
    pub separate_layers: bool,
    pub admission_attestation: bool,
    pub cross_vendor: bool,
}

impl Default for Mitigations {
    fn default() -> Self {
        Self {
            verify_client_signatures: true,
            verify_outer: true,
            verify_inner_measurement: true,
            separate_layers: true,
            admission_attestation: true,
            cross_vendor: true,
        }
    }
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub nodes: u32,
    pub vendors_per_node: u32,
    pub seed: u64,
    pub tick_limit: u64,
    pub delay_min: u64,
    pub delay_max: u64,
    pub drop_rate: f64,
    pub partition: Option<Partition>,
    pub consensus: ConsensusConfig,
    pub client_txs: u32,
    /// Shard threshold; `None` means a majority of members.
    pub shard_threshold: Option<u32>,
    pub scenario: Option<ThreatId>,
    /// Node the scenario acts on; `None` picks the scenario default.
    pub target: Option<u32>,
    pub drift_rate: ClockRate,
    pub corruption_rate: f64,
    pub attack_tick: u64,
    pub mitigations: Mitigations,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            nodes: 5,
            vendors_per_node: 2,
            seed: 0,
            tick_limit: 10_000,
            delay_min: 1,
            delay_max: 5,
            drop_rate: 0.0,
            partition: None,
            consensus: ConsensusConfig::default(),
            client_txs: 12,
            shard_threshold: None,
            scenario: None,
            target: None,
            drift_rate: ClockRate { num: 3, den: 2 },
            corruption_rate: 0.30,
            attack_tick: 2_000,
            mitigations: Mitigations::default(),
        }
    }
}

fn fmt_rate(r: ClockRate) -> String {
    let v = r.as_f64();
    if v.fract() == 0.0 {
        format!("{v:.1}")
    } else {
        v.to_string()
    }
}

fn on_off(b: bool) -> String {
    if b { "on" } else { "off" }.to_string()
}

pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("nodes", "initial cluster size"),
    ("vendors_per_node", "TEEs per platform, each from a different vendor (1-3)"),
    ("seed", "root of all randomness"),
    ("tick_limit", "virtual ticks to simulate"),
    ("delay_min", "minimum link delay in ticks"),
    ("delay_max", "maximum link delay in ticks"),
    ("drop_rate", "probability a message is lost"),
    ("partition", "none, or start-end:id,id,... isolating the listed nodes"),
    ("election_timeout_min", "election timeout lower bound (local ticks)"),
    ("election_timeout_max", "election timeout upper bound (local ticks)"),
    ("heartbeat_interval", "leader heartbeat period (local ticks)"),
    ("drift_window", "drift detector window W"),
    ("drift_threshold", "drift threshold (ratio deviation, inf disables)"),
    ("comm_window", "communication detector window"),
    ("comm_threshold", "communication error-rate threshold (inf disables)"),
    ("max_entries_per_append", "entries per append message"),
    ("client_txs", "client transactions submitted during the run"),
    ("shard_threshold", "auto (majority) or k"),
    ("scenario", "none or one of S1 I1 I3 I4 E1 E2 T2 T3 D1 S2"),
    ("target", "auto or the node id the scenario acts on"),
    ("drift_rate", "clock rate of the drifting node (T3)"),
    ("corruption_rate", "outbound bit-flip probability of the corrupt node (D1)"),
    ("attack_tick", "tick at which the adversary acts"),
    ("verify_client_signatures", "on|off"),
    ("verify_outer", "on|off"),
    ("verify_inner_measurement", "on|off"),
    ("separate_layers", "on|off"),
    ("admission_attestation", "on|off"),
    ("cross_vendor", "on|off"),
];

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.consensus;
        if self.nodes == 0 || self.nodes > 64 {
            return Err(ConfigError::Invalid("nodes must be in 1..=64"));
        }
        if !(1..=3).contains(&self.vendors_per_node) {
            return Err(ConfigError::Invalid("vendors_per_node must be in 1..=3"));
        }
        if self.delay_min == 0 || self.delay_min > self.delay_max {
            return Err(ConfigError::Invalid("need 1 <= delay_min <= delay_max"));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) || !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(ConfigError::Invalid("rates must be in [0, 1]"));
        }
        if c.election_timeout_min == 0
            || c.election_timeout_min > c.election_timeout_max
            || c.heartbeat_interval == 0
            || c.heartbeat_interval >= c.election_timeout_min
        {
            return Err(ConfigError::Invalid("need 0 < heartbeat < election_timeout_min <= election_timeout_max"));
        }
        if c.drift_window == 0 || c.comm_window == 0 || c.max_entries_per_append == 0 {
            return Err(ConfigError::Invalid("windows and batch size must be positive"));
        }
        if c.drift_threshold.is_nan() || c.comm_threshold.is_nan() {
            return Err(ConfigError::Invalid("thresholds must be numbers"));
        }
        if let Some(k) = self.shard_threshold {
            if k == 0 || k > self.nodes {
                return Err(ConfigError::Invalid("need 1 <= shard_threshold <= nodes"));
            }
        }
        if let Some(p) = &self.partition {
            if p.start > p.end || p.minority.iter().any(|id| *id == 0 || *id > self.nodes) {
                return Err(ConfigError::Invalid("partition must name existing nodes"));
            }
        }
        if let Some(t) = self.target {
            if t == 0 || t > self.nodes {
                return Err(ConfigError::Invalid("target must name an existing node"));
            }
        }
        Ok(())
    }

    pub fn shard_k(&self) -> u32 {
        self.shard_threshold.unwrap_or(self.nodes / 2 + 1)
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let c = &self.consensus;
        let m = &self.mitigations;
        let pairs: Vec<(&str, String)> = vec![
            ("nodes", self.nodes.to_string()),
            ("vendors_per_node", self.vendors_per_node.to_string()),
            ("seed", self.seed.to_string()),
            ("tick_limit", self.tick_limit.to_string()),
            ("delay_min", self.delay_min.to_string()),
            ("delay_max", self.delay_max.to_string()),
            ("drop_rate", self.drop_rate.to_string()),
            ("partition", self.partition.as_ref().map_or("none".into(), Partition::to_string)),
            ("election_timeout_min", c.election_timeout_min.to_string()),
            ("election_timeout_max", c.election_timeout_max.to_string()),
            ("heartbeat_interval", c.heartbeat_interval.to_string()),
            ("drift_window", c.drift_window.to_string()),
            ("drift_threshold", c.drift_threshold.to_string()),
            ("comm_window", c.comm_window.to_string()),
            ("comm_threshold", c.comm_threshold.to_string()),
            ("max_entries_per_append", c.max_entries_per_append.to_string()),
            ("client_txs", self.client_txs.to_string()),
            ("shard_threshold", self.shard_threshold.map_or("auto".into(), |k| k.to_string())),
            ("scenario", self.scenario.map_or("none".into(), |s| s.as_str().to_string())),
            ("target", self.target.map_or("auto".into(), |t| t.to_string())),
            ("drift_rate", fmt_rate(self.drift_rate)),
            ("corruption_rate", self.corruption_rate.to_string()),
            ("attack_tick", self.attack_tick.to_string()),
            ("verify_client_signatures", on_off(m.verify_client_signatures)),
            ("verify_outer", on_off(m.verify_outer)),
            ("verify_inner_measurement", on_off(m.verify_inner_measurement)),
            ("separate_layers", on_off(m.separate_layers)),
            ("admission_attestation", on_off(m.admission_attestation)),
            ("cross_vendor", on_off(m.cross_vendor)),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Starts from the defaults and applies every pair.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses flat `key = value` text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            pairs.push((k.trim(), v.trim()));
        }
        Self::from_pairs(pairs)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::InvalidValue { key: key.into(), value: value.into() })
        }
        let flag = |key: &str, value: &str| match value {
            "on" | "true" => Ok(true),
            "off" | "false" => Ok(false),
            _ => Err(ConfigError::InvalidValue { key: key.into(), value: value.into() }),
        };
        let bad = || ConfigError::InvalidValue { key: key.into(), value: value.into() };
        let c = &mut self.consensus;
        let m = &mut self.mitigations;
        match key {
            "nodes" => self.nodes = num(key, value)?,
            "vendors_per_node" => self.vendors_per_node = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "tick_limit" => self.tick_limit = num(key, value)?,
            "delay_min" => self.delay_min = num(key, value)?,
            "delay_max" => self.delay_max = num(key, value)?,
            "drop_rate" => self.drop_rate = num(key, value)?,
            "partition" => {
                self.partition = if value == "none" { None } else { Some(Partition::parse(value).ok_or_else(bad)?) }
            }
            "election_timeout_min" => c.election_timeout_min = num(key, value)?,
            "election_timeout_max" => c.election_timeout_max = num(key, value)?,
            "heartbeat_interval" => c.heartbeat_interval = num(key, value)?,
            "drift_window" => c.drift_window = num(key, value)?,
            "drift_threshold" => c.drift_threshold = num(key, value)?,
            "comm_window" => c.comm_window = num(key, value)?,
            "comm_threshold" => c.comm_threshold = num(key, value)?,
            "max_entries_per_append" => c.max_entries_per_append = num(key, value)?,
            "client_txs" => self.client_txs = num(key, value)?,
            "shard_threshold" => {
                self.shard_threshold = if value == "auto" { None } else { Some(num(key, value)?) }
            }
            "scenario" => {
                self.scenario = if value == "none" { None } else { Some(ThreatId::parse(value).ok_or_else(bad)?) }
            }
            "target" => self.target = if value == "auto" { None } else { Some(num(key, value)?) },
            "drift_rate" => self.drift_rate = ClockRate::parse(value).ok_or_else(bad)?,
            "corruption_rate" => self.corruption_rate = num(key, value)?,
            "attack_tick" => self.attack_tick = num(key, value)?,
            "verify_client_signatures" => m.verify_client_signatures = flag(key, value)?,
            "verify_outer" => m.verify_outer = flag(key, value)?,
            "verify_inner_measurement" => m.verify_inner_measurement = flag(key, value)?,
            "separate_layers" => m.separate_layers = flag(key, value)?,
            "admission_attestation" => m.admission_attestation = flag(key, value)?,
            "cross_vendor" => m.cross_vendor = flag(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }
}
