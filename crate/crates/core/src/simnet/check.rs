use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scenario::ThreatId;
use super::trace::{Trace, TraceEvent};
use super::{exec_config, Setup};
use crate::codec::CodecError;
use crate::consensus::LogEntry;
use crate::execution::{replay, ApplyError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum Verdict {
    Mitigated,
    Violated { detail: String, event: Option<Box<TraceEvent>> },
}

impl Verdict {
    pub fn is_mitigated(&self) -> bool {
        matches!(self, Verdict::Mitigated)
    }

    fn violated(detail: impl Into<String>, event: Option<&TraceEvent>) -> Self {
        Verdict::Violated { detail: detail.into(), event: event.map(|e| Box::new(e.clone())) }
    }
}

type Check = Result<(), Verdict>;

fn events<'a>(trace: &'a Trace, name: &'a str) -> impl Iterator<Item = &'a TraceEvent> + 'a {
    trace.events.iter().filter(move |e| e.event == name)
}

fn adversary_events<'a>(trace: &'a Trace, name: &'a str, threat: ThreatId) -> impl Iterator<Item = &'a TraceEvent> + 'a {
    events(trace, name).filter(move |e| e.threat() == Some(threat.as_str()))
}

/// Nodes the harness made faulty on purpose.
pub fn faulty_nodes(trace: &Trace) -> BTreeSet<u32> {
    events(trace, "fault-injected").filter_map(|e| e.u64_field("platform")).map(|p| p as u32).collect()
}

/// Alive, non-excluded nodes the harness did not corrupt.
pub fn honest_nodes(trace: &Trace) -> BTreeSet<u32> {
    let faulty = faulty_nodes(trace);
    let excluded: BTreeSet<u32> = trace.summary.exclusions.iter().map(|x| x.platform_id.0).collect();
    trace
        .summary
        .nodes
        .iter()
        .filter(|n| n.alive && !faulty.contains(&n.id) && !excluded.contains(&n.id))
        .map(|n| n.id)
        .collect()
}

fn election_safety(trace: &Trace) -> Check {
    let mut leaders: BTreeMap<u64, u32> = BTreeMap::new();
    for e in events(trace, "became-leader") {
        let term = e.u64_field("term").unwrap_or(e.term);
        match leaders.get(&term) {
            Some(&other) if other != e.node => {
                return Err(Verdict::violated(format!("two leaders in term {term}: {other} and {}", e.node), Some(e)))
            }
            _ => {
                leaders.insert(term, e.node);
            }
        }
    }
    Ok(())
}

fn log_matching(trace: &Trace) -> Check {
    let nodes = &trace.summary.nodes;
    for (i, a) in nodes.iter().enumerate() {
        for b in &nodes[i + 1..] {
            let n = a.log.len().min(b.log.len());
            if let Some(idx) = (0..n).find(|&j| a.log[j] != b.log[j]) {
                return Err(Verdict::violated(
                    format!("nodes {} and {} committed different entries at index {}", a.id, b.id, idx + 1),
                    None,
                ));
            }
        }
    }
    Ok(())
}

fn roots_agree(trace: &Trace) -> Check {
    let honest = honest_nodes(trace);
    let roots: BTreeSet<(&str, u64)> = trace
        .summary
        .nodes
        .iter()
        .filter(|n| honest.contains(&n.id))
        .map(|n| (n.root.as_str(), n.commit_index))
        .collect();
    if roots.len() > 1 {
        let detail: Vec<String> = trace
            .summary
            .nodes
            .iter()
            .filter(|n| honest.contains(&n.id))
            .map(|n| format!("{}@{}:{}", n.id, n.commit_index, &n.root[..16]))
            .collect();
        return Err(Verdict::violated(format!("honest nodes disagree: {}", detail.join(" ")), None));
    }
    Ok(())
}

fn no_spurious_exclusions(trace: &Trace) -> Check {
    let faulty = faulty_nodes(trace);
    match events(trace, "excluded").find(|e| !faulty.contains(&(e.u64_field("peer").unwrap_or(0) as u32))) {
        Some(e) => Err(Verdict::violated("a node the harness did not corrupt was excluded", Some(e))),
        None => Ok(()),
    }
}

/// Invariants every trace must satisfy, adversary or not.
pub fn check_safety(trace: &Trace) -> Verdict {
    match election_safety(trace)
        .and_then(|_| log_matching(trace))
        .and_then(|_| roots_agree(trace))
        .and_then(|_| no_spurious_exclusions(trace))
    {
        Ok(()) => Verdict::Mitigated,
        Err(v) => v,
    }
}

fn s1(trace: &Trace) -> Check {
    for e in adversary_events(trace, "adversary-tx", ThreatId::S1) {
        let id = e.str_field("tx_id").unwrap_or_default();
        let outcome = trace.summary.tracked.get(id).and_then(|v| v.get("outcome")).and_then(|v| v.as_str());
        if matches!(outcome, Some(o) if o != "failed") {
            return Err(Verdict::violated(format!("forged ingress {id} committed with outcome {}", outcome.unwrap()), Some(e)));
        }
    }
    Ok(())
}

fn i1(trace: &Trace) -> Check {
    if let Some(e) = adversary_events(trace, "handshake", ThreatId::I1)
        .find(|e| e.str_field("via") == Some("proxy") && e.bool_field("accepted") == Some(true))
    {
        return Err(Verdict::violated("client accepted a session terminated by the proxy", Some(e)));
    }
    if let Some(e) = adversary_events(trace, "proxy-read", ThreatId::I1).find(|e| e.bool_field("recovered") == Some(true)) {
        return Err(Verdict::violated("proxy opened client traffic", Some(e)));
    }
    Ok(())
}

fn i3(trace: &Trace) -> Check {
    if let Some(e) = adversary_events(trace, "payload-delivered", ThreatId::I3)
        .find(|e| e.str_field("measurement") != e.str_field("expected"))
    {
        return Err(Verdict::violated("payload delivered to an enclave with an unexpected measurement", Some(e)));
    }
    Ok(())
}

fn i4(trace: &Trace) -> Check {
    if let Some(e) =
        adversary_events(trace, "runtime-inner-attempt", ThreatId::I4).find(|e| e.bool_field("recovered") == Some(true))
    {
        return Err(Verdict::violated("runtime manager recovered an application payload", Some(e)));
    }
    if let Some(e) = adversary_events(trace, "replay-attempt", ThreatId::I4).find(|e| e.bool_field("accepted") == Some(true))
    {
        return Err(Verdict::violated("replayed envelope accepted", Some(e)));
    }
    Ok(())
}

fn no_decryption(trace: &Trace, threat: ThreatId) -> Check {
    if let Some(e) = adversary_events(trace, "key-extraction", threat).find(|e| e.bool_field("decrypted") == Some(true)) {
        return Err(Verdict::violated("adversary decrypted cluster data", Some(e)));
    }
    Ok(())
}

fn admission(trace: &Trace, threat: ThreatId) -> Check {
    for adv in adversary_events(trace, "adversary-platform", threat) {
        let p = adv.u64_field("platform").unwrap_or(0);
        if let Some(e) = events(trace, "admitted").find(|e| e.u64_field("peer") == Some(p)) {
            return Err(Verdict::violated(format!("adversary platform {p} admitted"), Some(e)));
        }
        if let Some(e) = events(trace, "shard-sent").find(|e| e.u64_field("recipient") == Some(p)) {
            return Err(Verdict::violated(format!("shard sent to adversary platform {p}"), Some(e)));
        }
    }
    Ok(())
}

fn t2(trace: &Trace) -> Check {
    for d in adversary_events(trace, "node-destroyed", ThreatId::T2) {
        let survivors = honest_nodes(trace);
        let progressed = events(trace, "committed")
            .any(|e| e.tick > d.tick && e.str_field("kind") == Some("tx") && survivors.contains(&e.node));
        if !progressed {
            return Err(Verdict::violated("no transaction committed after the destruction", Some(d)));
        }
    }
    no_decryption(trace, ThreatId::T2)
}

fn excluded_for(trace: &Trace, threat: ThreatId, reason: &str, deadline: impl Fn(&TraceEvent) -> Option<u64>) -> Check {
    let honest = honest_nodes(trace);
    for f in adversary_events(trace, "fault-injected", threat) {
        let p = f.u64_field("platform").unwrap_or(0);
        let exclusion = events(trace, "excluded").find(|e| {
            honest.contains(&e.node) && e.u64_field("peer") == Some(p) && e.str_field("reason") == Some(reason)
        });
        let Some(x) = exclusion else {
            return Err(Verdict::violated(format!("platform {p} was never excluded for {reason}"), Some(f)));
        };
        if let Some(limit) = deadline(f) {
            if x.tick > limit {
                return Err(Verdict::violated(format!("exclusion of {p} committed after tick {limit}"), Some(x)));
            }
        }
    }
    Ok(())
}

fn t3(trace: &Trace) -> Check {
    let timeout = trace.config().map(|c| c.consensus.election_timeout_max).unwrap_or(0);
    excluded_for(trace, ThreatId::T3, "drift", |f| {
        let p = f.u64_field("platform");
        events(trace, "drift-detected")
            .find(|e| e.u64_field("peer") == p && e.node as u64 != p.unwrap_or(0))
            .map(|d| d.tick + 2 * timeout)
    })
}

fn d1(trace: &Trace) -> Check {
    excluded_for(trace, ThreatId::D1, "comm-anomaly", |_| None)
}

/// The mitigation predicate for one threat. Vacuous when the trace holds
/// no adversary action for that threat.
pub fn check_threat(trace: &Trace, threat: ThreatId) -> Verdict {
    let r = match threat {
        ThreatId::S1 => s1(trace),
        ThreatId::I1 => i1(trace),
        ThreatId::I3 => i3(trace),
        ThreatId::I4 => i4(trace),
        ThreatId::E1 => no_decryption(trace, ThreatId::E1),
        ThreatId::E2 => admission(trace, ThreatId::E2),
        ThreatId::T2 => t2(trace),
        ThreatId::T3 => t3(trace),
        ThreatId::D1 => d1(trace),
        ThreatId::S2 => admission(trace, ThreatId::S2),
    };
    match r {
        Ok(()) => Verdict::Mitigated,
        Err(v) => v,
    }
}

/// Safety invariants, then the threat predicate if one is named.
pub fn check(trace: &Trace, threat: Option<ThreatId>) -> Verdict {
    match check_safety(trace) {
        Verdict::Mitigated => threat.map_or(Verdict::Mitigated, |t| check_threat(trace, t)),
        v => v,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("config: {0}")]
    Config(String),
    #[error("node {node}: undecodable log entry {index}: {source}")]
    Decode { node: u32, index: usize, source: CodecError },
    #[error("node {node}: {source}")]
    Apply { node: u32, source: ApplyError },
    #[error("node {node}: recorded root {recorded}, replay gives {replayed}")]
    RootMismatch { node: u32, recorded: String, replayed: String },
    #[error("node {node}: replayed results differ")]
    FingerprintMismatch { node: u32 },
}

/// Re-executes every node's committed log from genesis, independently of
/// the simulation, and compares with the recorded final state.
pub fn replay_trace(trace: &Trace) -> Result<(), ReplayError> {
    let cfg = trace.config().map_err(|e| ReplayError::Config(e.to_string()))?;
    let setup = Setup::new(&cfg);
    for n in &trace.summary.nodes {
        let entries = n
            .log
            .iter()
            .enumerate()
            .map(|(index, h)| {
                let bytes = hex::decode(h).map_err(|_| CodecError::Invalid("hex"));
                bytes.and_then(|b| LogEntry::from_bytes(&b)).map_err(|source| ReplayError::Decode { node: n.id, index, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let state = replay(&setup.genesis, exec_config(&cfg), &entries)
            .map_err(|source| ReplayError::Apply { node: n.id, source })?;
        let replayed = state.root().0.to_hex();
        if replayed != n.root {
            return Err(ReplayError::RootMismatch { node: n.id, recorded: n.root.clone(), replayed });
        }
        if state.fingerprint().to_hex() != n.fingerprint {
            return Err(ReplayError::FingerprintMismatch { node: n.id });
        }
    }
    Ok(())
}
