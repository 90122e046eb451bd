use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use super::message::{vote_nonce, vote_request_digest, AppendRejection, Body, Message, VoteDenial};
use super::monitor::{detect_comm_anomaly, detect_drift, CommMonitor, HeartbeatStats, MessageFault};
use super::types::{Exclusion, ExclusionReason, LogEntry, Member, QuorumMembership};
use crate::attestation::{
    cross_vendor_validate, mutual_attest, report_data, verify_quote, AttestationError, AttestationQuote,
    CrossVendorRejection, EnclaveIdentity, MutualAttestError, PlatformId, QuoteSource, TrustedVendors, Vendor,
    NONCE_LEN,
};
use crate::crypto::{hash_parts, Digest, SeededRng, VerifyKey};
use crate::execution::{Command, ExecState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusConfig {
    pub election_timeout_min: u64,
    pub election_timeout_max: u64,
    pub heartbeat_interval: u64,
    pub drift_window: usize,
    pub drift_threshold: f64,
    pub comm_window: usize,
    pub comm_threshold: f64,
    pub max_entries_per_append: usize,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            election_timeout_min: 150,
            election_timeout_max: 300,
            heartbeat_interval: 50,
            drift_window: 20,
            drift_threshold: 0.10,
            comm_window: 20,
            comm_threshold: 0.15,
            max_entries_per_append: 64,
        }
    }
}

/// A platform hosting one enclave per vendor TEE, all expected to run the
/// cluster measurement. The first TEE's AIK is the node's consensus key.
#[derive(Debug, Clone)]
pub struct NodeIdentity {
    pub platform_id: PlatformId,
    pub tees: Vec<EnclaveIdentity>,
}

impl NodeIdentity {
    pub fn primary(&self) -> &EnclaveIdentity {
        &self.tees[0]
    }

    pub fn member(&self) -> Member {
        Member { platform_id: self.platform_id, aik_vk: self.primary().aik_vk.clone(), vendor: self.primary().vendor }
    }

    /// One quote per TEE over the same report payload and nonce.
    pub fn quotes(&self, payload: &[u8], nonce: [u8; NONCE_LEN]) -> Result<Vec<AttestationQuote>, AttestationError> {
        self.tees.iter().map(|t| t.quote(payload, nonce)).collect()
    }
}

impl QuoteSource for NodeIdentity {
    fn platform_id(&self) -> PlatformId {
        self.platform_id
    }

    fn quote(&self, payload: &[u8], nonce: [u8; NONCE_LEN]) -> Result<AttestationQuote, AttestationError> {
        self.primary().quote(payload, nonce)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Follower,
    Candidate,
    Leader,
    /// Excluded from the quorum; the node no longer participates.
    Halted,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Follower => "follower",
            Role::Candidate => "candidate",
            Role::Leader => "leader",
            Role::Halted => "halted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "event")]
pub enum NodeEvent {
    ElectionStarted { term: u64 },
    BecameLeader { term: u64 },
    SteppedDown { term: u64 },
    VoteDenied { candidate: u32, denial: VoteDenial },
    AppendRejected { leader: u32, rejection: AppendRejection },
    MessageFault { peer: u32, fault: MessageFault },
    Committed { index: u64, term: u64, kind: &'static str, proposer: u32 },
    DriftDetected { peer: u32, ratio: f64 },
    CommAnomaly { peer: u32, rate: f64 },
    Quarantined { peer: u32, reason: ExclusionReason },
    SelfSuspect { flagged: Vec<u32> },
    ExclusionProposed { peer: u32, reason: ExclusionReason, evidence_milli: u32, index: u64 },
    Excluded { peer: u32, reason: ExclusionReason, evidence_milli: u32, term: u64 },
    Admitted { peer: u32 },
    AdmissionRejected { peer: u32, reason: String },
    ShardEpochCommitted { epoch: u64, recipients: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub to: PlatformId,
    pub bytes: Vec<u8>,
}

/// Knobs the fault-injection harness turns off to show what each
/// admission check prevents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdmissionPolicy {
    pub require_attestation: bool,
    pub require_cross_vendor: bool,
}

impl Default for AdmissionPolicy {
    fn default() -> Self {
        Self { require_attestation: true, require_cross_vendor: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdmissionError {
    #[error("not the leader")]
    NotLeader,
    #[error("{0} is already a member")]
    DuplicateMember(PlatformId),
    #[error("a membership change is still pending")]
    ChangePending,
    #[error("failed-attestation: {0}")]
    MutualAttestation(MutualAttestError),
    #[error("failed-attestation: {0}")]
    CrossVendor(CrossVendorRejection),
    #[error("failed-attestation: wrong-measurement")]
    WrongMeasurement,
}

#[derive(Debug, Clone)]
struct PeerMonitor {
    drift: HeartbeatStats,
    comm: CommMonitor,
    flagged: Option<(ExclusionReason, u32)>,
}

#[derive(Debug, Clone)]
pub struct RaftNode {
    identity: NodeIdentity,
    cfg: ConsensusConfig,
    measurement: Digest,
    trusted: TrustedVendors,
    role: Role,
    term: u64,
    voted_for: Option<PlatformId>,
    log: Vec<LogEntry>,
    commit_index: u64,
    membership: QuorumMembership,
    /// Every key ever admitted, for verifying entries proposed by members
    /// that were later excluded.
    known_keys: BTreeMap<PlatformId, VerifyKey>,
    exec: ExecState,
    now_local: u64,
    election_deadline: u64,
    next_heartbeat: u64,
    votes: BTreeSet<PlatformId>,
    next_index: BTreeMap<PlatformId, u64>,
    match_index: BTreeMap<PlatformId, u64>,
    monitors: BTreeMap<PlatformId, PeerMonitor>,
    self_suspect: bool,
    shard_epoch: u64,
    queued: Vec<Command>,
    rng: SeededRng,
    outbox: Vec<Outgoing>,
    events: Vec<NodeEvent>,
}

impl RaftNode {
    pub fn new(
        identity: NodeIdentity,
        cfg: ConsensusConfig,
        measurement: Digest,
        trusted: TrustedVendors,
        membership: QuorumMembership,
        exec: ExecState,
        rng: SeededRng,
    ) -> Self {
        let known_keys = membership.members().map(|m| (m.platform_id, m.aik_vk.clone())).collect();
        let mut node = Self {
            identity,
            cfg,
            measurement,
            trusted,
            role: Role::Follower,
            term: 0,
            voted_for: None,
            log: Vec::new(),
            commit_index: 0,
            membership,
            known_keys,
            exec,
            now_local: 0,
            election_deadline: 0,
            next_heartbeat: 0,
            votes: BTreeSet::new(),
            next_index: BTreeMap::new(),
            match_index: BTreeMap::new(),
            monitors: BTreeMap::new(),
            self_suspect: false,
            shard_epoch: 0,
            queued: Vec::new(),
            rng,
            outbox: Vec::new(),
            events: Vec::new(),
        };
        node.reset_election_timer();
        node
    }

    pub fn id(&self) -> PlatformId {
        self.identity.platform_id
    }

    pub fn identity(&self) -> &NodeIdentity {
        &self.identity
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn commit_index(&self) -> u64 {
        self.commit_index
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn committed_log(&self) -> &[LogEntry] {
        &self.log[..self.commit_index as usize]
    }

    pub fn membership(&self) -> &QuorumMembership {
        &self.membership
    }

    pub fn exec(&self) -> &ExecState {
        &self.exec
    }

    pub fn is_self_suspect(&self) -> bool {
        self.self_suspect
    }

    pub fn take_outbox(&mut self) -> Vec<Outgoing> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_events(&mut self) -> Vec<NodeEvent> {
        std::mem::take(&mut self.events)
    }

    fn last_log(&self) -> (u64, u64) {
        self.log.last().map_or((0, 0), |e| (e.index, e.term))
    }

    fn term_at(&self, index: u64) -> u64 {
        if index == 0 {
            0
        } else {
            self.log[index as usize - 1].term
        }
    }

    fn is_quarantined(&self, peer: PlatformId) -> bool {
        !self.self_suspect && self.monitors.get(&peer).is_some_and(|m| m.flagged.is_some())
    }

    fn peers(&self) -> Vec<PlatformId> {
        self.membership.ids().into_iter().filter(|p| *p != self.id()).collect()
    }

    fn reset_election_timer(&mut self) {
        let t = self.rng.range_inclusive(self.cfg.election_timeout_min, self.cfg.election_timeout_max);
        self.election_deadline = self.now_local + t;
    }

    fn send(&mut self, to: PlatformId, body: Body) {
        let msg = Message::new_signed(self.id(), to, self.term, self.now_local, body, &self.identity.primary().aik);
        self.outbox.push(Outgoing { to, bytes: msg.to_bytes() });
    }

    fn set_local_time(&mut self, global_tick: u64) {
        self.now_local = self.identity.primary().clock_rate.local(global_tick);
    }

    /// Advances timers to `global_tick`.
    pub fn on_tick(&mut self, global_tick: u64) {
        if self.role == Role::Halted {
            return;
        }
        self.set_local_time(global_tick);
        match self.role {
            Role::Leader => {
                if self.now_local >= self.next_heartbeat {
                    self.next_heartbeat = self.now_local + self.cfg.heartbeat_interval;
                    self.propose_exclusions();
                    self.broadcast_append();
                }
            }
            _ => {
                if self.now_local >= self.election_deadline {
                    if self.self_suspect || !self.membership.is_member(self.id()) {
                        self.reset_election_timer();
                    } else {
                        self.start_election();
                    }
                }
            }
        }
    }

    fn start_election(&mut self) {
        self.term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id());
        self.votes = BTreeSet::from([self.id()]);
        self.reset_election_timer();
        self.events.push(NodeEvent::ElectionStarted { term: self.term });
        let (last_index, last_term) = self.last_log();
        let digest = vote_request_digest(self.term, self.id(), last_index, last_term);
        let quote = self
            .identity
            .quote(digest.as_bytes(), vote_nonce(self.term, self.id()))
            .expect("members hold endorsed identities");
        for peer in self.peers() {
            if !self.is_quarantined(peer) {
                let body =
                    Body::RequestVote { last_log_index: last_index, last_log_term: last_term, quote: Box::new(quote.clone()) };
                self.send(peer, body);
            }
        }
        self.maybe_win();
    }

    fn maybe_win(&mut self) {
        let votes = self.votes.iter().filter(|v| self.membership.is_member(**v)).count();
        if self.role == Role::Candidate && votes >= self.membership.quorum_size() {
            self.become_leader();
        }
    }

    fn become_leader(&mut self) {
        self.role = Role::Leader;
        self.events.push(NodeEvent::BecameLeader { term: self.term });
        let (last, _) = self.last_log();
        self.next_index = self.peers().into_iter().map(|p| (p, last + 1)).collect();
        self.match_index = self.peers().into_iter().map(|p| (p, 0)).collect();
        self.append_local(Command::Noop);
        self.next_heartbeat = self.now_local + self.cfg.heartbeat_interval;
        self.broadcast_append();
    }

    fn step_down(&mut self, term: u64) {
        if term > self.term {
            self.term = term;
            self.voted_for = None;
        }
        if self.role == Role::Leader || self.role == Role::Candidate {
            self.events.push(NodeEvent::SteppedDown { term: self.term });
            self.role = Role::Follower;
        }
    }

    fn append_local(&mut self, cmd: Command) -> u64 {
        let index = self.log.len() as u64 + 1;
        let entry = LogEntry::new_signed(self.term, index, cmd.to_bytes(), self.id(), &self.identity.primary().aik);
        self.log.push(entry);
        self.advance_commit();
        index
    }

    /// Appends a command to the log if this node leads. Returns its index.
    pub fn propose(&mut self, cmd: Command) -> Option<u64> {
        if self.role != Role::Leader {
            return None;
        }
        let index = self.append_local(cmd);
        self.broadcast_append();
        Some(index)
    }

    fn send_append(&mut self, peer: PlatformId) {
        let next = *self.next_index.get(&peer).unwrap_or(&1);
        let prev_index = next - 1;
        let end = (self.log.len()).min(prev_index as usize + self.cfg.max_entries_per_append);
        let entries = self.log[prev_index as usize..end].to_vec();
        let body = Body::AppendEntries {
            prev_index,
            prev_term: self.term_at(prev_index),
            entries,
            leader_commit: self.commit_index,
        };
        self.send(peer, body);
    }

    fn broadcast_append(&mut self) {
        for peer in self.peers() {
            if !self.is_quarantined(peer) {
                self.send_append(peer);
            }
        }
    }

    fn has_pending_change(&self) -> bool {
        self.log[self.commit_index as usize..].iter().any(|e| {
            matches!(Command::from_bytes(&e.command), Ok(Command::Admit(_)) | Ok(Command::Exclude(_)))
        })
    }

    fn propose_exclusions(&mut self) {
        if self.has_pending_change() || self.membership.len() < 3 {
            return;
        }
        let candidate = self
            .monitors
            .iter()
            .find(|(p, m)| m.flagged.is_some() && self.membership.is_member(**p))
            .map(|(p, m)| (*p, m.flagged.expect("filtered")));
        if let Some((peer, (reason, evidence_milli))) = candidate {
            let others: Vec<PlatformId> = self.peers().into_iter().filter(|p| *p != peer).collect();
            let healthy = others.iter().filter(|p| self.peer_healthy(**p)).count();
            if healthy * 2 <= others.len() {
                return;
            }
            let exclusion = Exclusion { platform_id: peer, reason, term: self.term, evidence_milli };
            let index = self.append_local(Command::Exclude(exclusion));
            self.events.push(NodeEvent::ExclusionProposed { peer: peer.0, reason, evidence_milli, index });
        }
    }

    /// `peer` is unflagged and a quarter window of evidence looks nominal.
    fn peer_healthy(&self, peer: PlatformId) -> bool {
        let Some(mon) = self.monitors.get(&peer) else { return false };
        let min = (self.cfg.drift_window / 4).max(1);
        mon.flagged.is_none()
            && mon.drift.len() >= min
            && mon.drift.median_ratio().is_some_and(|r| (r - 1.0).abs() <= self.cfg.drift_threshold)
            && mon.comm.faults() * 1000 <= mon.comm.observed() * (self.cfg.comm_threshold * 1000.0) as usize
    }

    /// Handles raw bytes that arrived over the link from `link_from`.
    pub fn on_message(&mut self, global_tick: u64, link_from: PlatformId, bytes: &[u8]) {
        if self.role == Role::Halted || !self.membership.is_member(link_from) || link_from == self.id() {
            return;
        }
        self.set_local_time(global_tick);
        let msg = match Message::from_bytes(bytes) {
            Ok(m) if m.from == link_from && m.to == self.id() => m,
            _ => return self.record_fault(link_from, MessageFault::Malformed),
        };
        let vk = self.membership.member(link_from).expect("checked membership").aik_vk.clone();
        if !msg.verify(&vk) {
            return self.record_fault(link_from, MessageFault::BadSignature);
        }
        let (cw, dw, hb) = (self.cfg.comm_window, self.cfg.drift_window, self.cfg.heartbeat_interval);
        let mon = self.monitors.entry(link_from).or_insert_with(|| PeerMonitor {
            drift: HeartbeatStats::new(dw, hb),
            comm: CommMonitor::new(cw),
            flagged: None,
        });
        mon.comm.record(None);
        mon.drift.observe(msg.sent_local, self.now_local);
        self.evaluate(link_from);
        if self.is_quarantined(link_from) {
            return;
        }
        match msg.body {
            Body::RequestVote { last_log_index, last_log_term, quote } => {
                self.handle_request_vote(msg.from, msg.term, last_log_index, last_log_term, &quote)
            }
            Body::Vote { denial } => self.handle_vote(msg.from, msg.term, denial),
            Body::AppendEntries { prev_index, prev_term, entries, leader_commit } => {
                self.handle_append(msg.from, msg.term, prev_index, prev_term, entries, leader_commit)
            }
            Body::AppendReply { rejection, match_index, hint } => {
                self.handle_append_reply(msg.from, msg.term, rejection, match_index, hint)
            }
        }
    }

    fn record_fault(&mut self, peer: PlatformId, fault: MessageFault) {
        let (cw, dw, hb) = (self.cfg.comm_window, self.cfg.drift_window, self.cfg.heartbeat_interval);
        self.monitors
            .entry(peer)
            .or_insert_with(|| PeerMonitor { drift: HeartbeatStats::new(dw, hb), comm: CommMonitor::new(cw), flagged: None })
            .comm
            .record(Some(fault));
        self.events.push(NodeEvent::MessageFault { peer: peer.0, fault });
        self.evaluate(peer);
    }

    /// Runs both detectors for `peer` and quarantines it locally when one
    /// fires. If most peers look faulty, the fault is more likely local.
    fn evaluate(&mut self, peer: PlatformId) {
        let Some(mon) = self.monitors.get_mut(&peer) else { return };
        if mon.flagged.is_some() {
            return;
        }
        let mut event = None;
        if let Ok(v) = detect_drift(&mon.drift, self.cfg.drift_threshold) {
            if v.is_drifted() {
                mon.flagged = Some((ExclusionReason::Drift, (v.ratio() * 1000.0).round() as u32));
                event = Some(NodeEvent::DriftDetected { peer: peer.0, ratio: v.ratio() });
            }
        }
        if mon.flagged.is_none() {
            if let Ok(v) = detect_comm_anomaly(&mon.comm, self.cfg.comm_threshold) {
                if v.is_anomalous() {
                    mon.flagged = Some((ExclusionReason::CommAnomaly, (v.rate() * 1000.0).round() as u32));
                    event = Some(NodeEvent::CommAnomaly { peer: peer.0, rate: v.rate() });
                }
            }
        }
        let Some(event) = event else { return };
        let reason = mon.flagged.expect("just set").0;
        self.events.push(event);
        let peers = self.peers();
        let flagged: Vec<u32> = peers
            .iter()
            .filter(|p| self.monitors.get(p).is_some_and(|m| m.flagged.is_some()))
            .map(|p| p.0)
            .collect();
        if !self.self_suspect && flagged.len() * 2 > peers.len() {
            self.self_suspect = true;
            self.events.push(NodeEvent::SelfSuspect { flagged });
            if self.role == Role::Leader || self.role == Role::Candidate {
                self.events.push(NodeEvent::SteppedDown { term: self.term });
                self.role = Role::Follower;
            }
        } else if !self.self_suspect {
            self.events.push(NodeEvent::Quarantined { peer: peer.0, reason });
        }
    }

    fn handle_request_vote(
        &mut self,
        candidate: PlatformId,
        term: u64,
        last_log_index: u64,
        last_log_term: u64,
        quote: &AttestationQuote,
    ) {
        let denial = self.vote_decision(candidate, term, last_log_index, last_log_term, quote);
        match denial {
            None => {
                self.voted_for = Some(candidate);
                self.reset_election_timer();
            }
            Some(d) => self.events.push(NodeEvent::VoteDenied { candidate: candidate.0, denial: d }),
        }
        self.send(candidate, Body::Vote { denial });
    }

    fn vote_decision(
        &mut self,
        candidate: PlatformId,
        term: u64,
        last_log_index: u64,
        last_log_term: u64,
        quote: &AttestationQuote,
    ) -> Option<VoteDenial> {
        if term < self.term {
            return Some(VoteDenial::StaleTerm);
        }
        if check_vote_quote(quote, candidate, term, last_log_index, last_log_term, &self.measurement, &self.trusted)
            .is_err()
        {
            return Some(VoteDenial::FailedAttestation);
        }
        if term > self.term {
            self.step_down(term);
        }
        if self.voted_for.is_some_and(|v| v != candidate) {
            return Some(VoteDenial::AlreadyVoted);
        }
        let (my_index, my_term) = self.last_log();
        if (last_log_term, last_log_index) < (my_term, my_index) {
            return Some(VoteDenial::LogBehind);
        }
        None
    }

    fn handle_vote(&mut self, from: PlatformId, term: u64, denial: Option<VoteDenial>) {
        if term > self.term {
            self.step_down(term);
            return;
        }
        if self.role == Role::Candidate && term == self.term && denial.is_none() {
            self.votes.insert(from);
            self.maybe_win();
        }
    }

    fn handle_append(
        &mut self,
        leader: PlatformId,
        term: u64,
        prev_index: u64,
        prev_term: u64,
        entries: Vec<LogEntry>,
        leader_commit: u64,
    ) {
        if term < self.term {
            return self.reply_append(leader, Some(AppendRejection::StaleTerm), 0, 0);
        }
        if term > self.term || self.role != Role::Follower {
            self.step_down(term);
        }
        self.reset_election_timer();

        if prev_index > self.log.len() as u64 {
            return self.reply_append(leader, Some(AppendRejection::LogMismatch), 0, self.log.len() as u64 + 1);
        }
        if self.term_at(prev_index) != prev_term {
            let conflict_term = self.term_at(prev_index);
            let first = self.log.iter().find(|e| e.term == conflict_term).map_or(prev_index, |e| e.index);
            return self.reply_append(leader, Some(AppendRejection::LogMismatch), 0, first.max(1));
        }
        for (i, e) in entries.iter().enumerate() {
            let key = self.known_keys.get(&e.proposer);
            if e.index != prev_index + 1 + i as u64 || !key.is_some_and(|k| e.verify(k)) || e.term > term {
                self.record_fault(leader, MessageFault::BadSignature);
                return self.reply_append(leader, Some(AppendRejection::BadSignature), 0, 0);
            }
        }
        for e in entries.iter() {
            let slot = e.index as usize - 1;
            match self.log.get(slot) {
                Some(existing) if existing.term == e.term => {
                    if existing != e {
                        self.record_fault(leader, MessageFault::Contradictory);
                        return self.reply_append(leader, Some(AppendRejection::Contradictory), 0, 0);
                    }
                }
                Some(_) => {
                    if e.index <= self.commit_index {
                        self.record_fault(leader, MessageFault::Contradictory);
                        return self.reply_append(leader, Some(AppendRejection::Contradictory), 0, 0);
                    }
                    self.log.truncate(slot);
                    self.log.push(e.clone());
                }
                None => self.log.push(e.clone()),
            }
        }
        let last_new = prev_index + entries.len() as u64;
        if leader_commit > self.commit_index {
            self.commit_to(leader_commit.min(last_new));
        }
        self.reply_append(leader, None, last_new, 0);
    }

    fn reply_append(&mut self, leader: PlatformId, rejection: Option<AppendRejection>, match_index: u64, hint: u64) {
        self.send(leader, Body::AppendReply { rejection, match_index, hint });
    }

    fn handle_append_reply(
        &mut self,
        from: PlatformId,
        term: u64,
        rejection: Option<AppendRejection>,
        match_index: u64,
        hint: u64,
    ) {
        if term > self.term {
            self.step_down(term);
            return;
        }
        if self.role != Role::Leader || term != self.term {
            return;
        }
        match rejection {
            None => {
                let m = self.match_index.entry(from).or_insert(0);
                *m = (*m).max(match_index);
                self.next_index.insert(from, match_index + 1);
                self.advance_commit();
                if match_index < self.log.len() as u64 {
                    self.send_append(from);
                }
            }
            Some(AppendRejection::LogMismatch) => {
                let next = self.next_index.get(&from).copied().unwrap_or(1);
                self.next_index.insert(from, hint.clamp(1, next.saturating_sub(1).max(1)));
                self.send_append(from);
            }
            Some(_) => {}
        }
    }

    fn advance_commit(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        let me = self.id();
        let last = self.log.len() as u64;
        let mut new_commit = self.commit_index;
        for n in (self.commit_index + 1)..=last {
            if self.term_at(n) != self.term {
                continue;
            }
            let count = self
                .membership
                .members()
                .filter(|m| m.platform_id == me || self.match_index.get(&m.platform_id).is_some_and(|x| *x >= n))
                .count();
            if count >= self.membership.quorum_size() {
                new_commit = n;
            }
        }
        if new_commit > self.commit_index {
            self.commit_to(new_commit);
        }
    }

    fn commit_to(&mut self, index: u64) {
        while self.commit_index < index {
            self.commit_index += 1;
            let entry = self.log[self.commit_index as usize - 1].clone();
            self.exec.apply(&entry).expect("entries apply in order");
            let cmd = Command::from_bytes(&entry.command);
            let kind = match &cmd {
                Ok(Command::Noop) => "noop",
                Ok(Command::Tx(_)) => "tx",
                Ok(Command::Admit(_)) => "admit",
                Ok(Command::Exclude(_)) => "exclude",
                Ok(Command::ShardEpoch { .. }) => "shard-epoch",
                Err(_) => "undecodable",
            };
            self.events.push(NodeEvent::Committed {
                index: entry.index,
                term: entry.term,
                kind,
                proposer: entry.proposer.0,
            });
            match cmd {
                Ok(Command::Admit(m)) => self.apply_admit(m),
                Ok(Command::Exclude(x)) => self.apply_exclude(x),
                Ok(Command::ShardEpoch { epoch, recipients }) => {
                    self.shard_epoch = self.shard_epoch.max(epoch);
                    self.events.push(NodeEvent::ShardEpochCommitted { epoch, recipients })
                }
                _ => {}
            }
        }
        if self.role == Role::Leader && !self.queued.is_empty() {
            for cmd in std::mem::take(&mut self.queued) {
                self.append_local(cmd);
            }
            self.broadcast_append();
        }
    }

    /// After a membership change the leader starts a new shard epoch for
    /// the new member set.
    fn queue_shard_epoch(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        let proposed = self.log.iter().rev().find_map(|e| match Command::from_bytes(&e.command) {
            Ok(Command::ShardEpoch { epoch, .. }) => Some(epoch),
            _ => None,
        });
        let epoch = proposed.unwrap_or(0).max(self.shard_epoch) + 1;
        let recipients = self.membership.ids().into_iter().map(|p| p.0).collect();
        self.queued.push(Command::ShardEpoch { epoch, recipients });
    }

    pub fn shard_epoch(&self) -> u64 {
        self.shard_epoch
    }

    fn apply_admit(&mut self, m: Member) {
        let id = m.platform_id;
        self.known_keys.insert(id, m.aik_vk.clone());
        if self.membership.admit(m).is_ok() {
            self.events.push(NodeEvent::Admitted { peer: id.0 });
            if self.role == Role::Leader && id != self.id() {
                self.next_index.insert(id, 1);
                self.match_index.insert(id, 0);
            }
            self.queue_shard_epoch();
        }
    }

    fn apply_exclude(&mut self, x: Exclusion) {
        if self.membership.exclude(x).is_err() {
            return;
        }
        self.events.push(NodeEvent::Excluded {
            peer: x.platform_id.0,
            reason: x.reason,
            evidence_milli: x.evidence_milli,
            term: x.term,
        });
        self.next_index.remove(&x.platform_id);
        self.match_index.remove(&x.platform_id);
        self.monitors.remove(&x.platform_id);
        if x.platform_id == self.id() {
            self.role = Role::Halted;
        } else {
            self.queue_shard_epoch();
        }
    }

    /// Leader-side admission: mutual attestation against the cluster
    /// measurement, then horizontal cross-vendor validation when the
    /// cluster spans two or more vendors. Success appends an admission
    /// entry; membership changes when it commits.
    pub fn admit_member(&mut self, candidate: &NodeIdentity, policy: AdmissionPolicy) -> Result<u64, AdmissionError> {
        let result = self.check_admission(candidate, policy);
        match result {
            Ok(()) => {
                let index = self.append_local(Command::Admit(candidate.member()));
                self.broadcast_append();
                Ok(index)
            }
            Err(e) => {
                self.events.push(NodeEvent::AdmissionRejected { peer: candidate.platform_id.0, reason: e.to_string() });
                Err(e)
            }
        }
    }

    fn check_admission(&mut self, candidate: &NodeIdentity, policy: AdmissionPolicy) -> Result<(), AdmissionError> {
        if self.role != Role::Leader {
            return Err(AdmissionError::NotLeader);
        }
        if self.membership.is_member(candidate.platform_id) {
            return Err(AdmissionError::DuplicateMember(candidate.platform_id));
        }
        if self.has_pending_change() {
            return Err(AdmissionError::ChangePending);
        }
        if policy.require_attestation {
            let mut rng = SeededRng::new(self.rng.next_array());
            mutual_attest(&self.identity, candidate, &self.measurement, &self.trusted, &mut rng)
                .map_err(AdmissionError::MutualAttestation)?;
        }
        let vendors: BTreeSet<Vendor> = self.membership.members().map(|m| m.vendor).collect();
        if policy.require_cross_vendor && vendors.len() >= 2 {
            let nonce: [u8; NONCE_LEN] = self.rng.next_array();
            let payload = hash_parts("admission", &[&candidate.platform_id.0.to_be_bytes(), &self.term.to_be_bytes()]);
            let quotes = candidate
                .quotes(payload.as_bytes(), nonce)
                .map_err(|_| AdmissionError::CrossVendor(CrossVendorRejection::SingleVendor))?;
            cross_vendor_validate(&quotes, &self.trusted, &nonce).map_err(AdmissionError::CrossVendor)?;
            if quotes.iter().any(|q| q.measurement != self.measurement) {
                return Err(AdmissionError::WrongMeasurement);
            }
        }
        Ok(())
    }
}

/// The attestation check a voter applies to a vote request. Pure, so every
/// honest node reaches the same decision.
pub fn check_vote_quote(
    quote: &AttestationQuote,
    candidate: PlatformId,
    term: u64,
    last_log_index: u64,
    last_log_term: u64,
    measurement: &Digest,
    trusted: &TrustedVendors,
) -> Result<(), VoteDenial> {
    let digest = vote_request_digest(term, candidate, last_log_index, last_log_term);
    if quote.platform_id != candidate || quote.report_data != report_data(digest.as_bytes()) {
        return Err(VoteDenial::FailedAttestation);
    }
    verify_quote(quote, measurement, trusted, &vote_nonce(term, candidate)).map_err(|_| VoteDenial::FailedAttestation)
}
