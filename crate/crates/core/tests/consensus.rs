use std::collections::VecDeque;

use attested_ledger::attestation::{generate_quote, ClockRate, PlatformId, Vendor};
use attested_ledger::consensus::{
    detect_drift, vote_nonce, vote_request_digest, AdmissionError, AdmissionPolicy, Body, ConsensusConfig,
    HeartbeatStats, IntervalSample, LogEntry, Message, NodeEvent, NodeIdentity, QuorumMembership, RaftNode, Role,
    VoteDenial,
};
use attested_ledger::crypto::{hash, SeededRng, SigningKey};
use attested_ledger::execution::{Command, ExecState};
use attested_ledger::simnet::{exec_config, SimConfig, Setup};

/// Minimal in-test cluster: fixed one-tick link delay, no faults.
struct Cluster {
    setup: Setup,
    nodes: Vec<RaftNode>,
    events: Vec<(u32, NodeEvent)>,
    queue: VecDeque<(u64, u32, u32, Vec<u8>)>,
    tick: u64,
}

impl Cluster {
    fn new(n: u32, seed: u64) -> Self {
        let cfg = SimConfig { nodes: n, seed, ..SimConfig::default() };
        let setup = Setup::new(&cfg);
        let rng = SeededRng::from_u64(seed);
        let membership = QuorumMembership::new(setup.genesis.members.clone());
        let nodes = setup
            .identities
            .iter()
            .map(|id| {
                RaftNode::new(
                    id.clone(),
                    ConsensusConfig::default(),
                    setup.measurement,
                    setup.trusted.clone(),
                    membership.clone(),
                    ExecState::genesis(&setup.genesis, exec_config(&cfg)),
                    rng.fork(&format!("node-{}", id.platform_id.0)),
                )
            })
            .collect();
        Self { setup, nodes, events: vec![], queue: VecDeque::new(), tick: 0 }
    }

    fn flush(&mut self, i: usize) {
        let id = self.nodes[i].id().0;
        for o in self.nodes[i].take_outbox() {
            self.queue.push_back((self.tick + 1, id, o.to.0, o.bytes));
        }
        for e in self.nodes[i].take_events() {
            self.events.push((id, e));
        }
    }

    fn step(&mut self) {
        while self.queue.front().is_some_and(|m| m.0 <= self.tick) {
            let (_, from, to, bytes) = self.queue.pop_front().unwrap();
            if let Some(j) = self.nodes.iter().position(|n| n.id().0 == to) {
                self.nodes[j].on_message(self.tick, PlatformId(from), &bytes);
                self.flush(j);
            }
        }
        for i in 0..self.nodes.len() {
            self.nodes[i].on_tick(self.tick);
            self.flush(i);
        }
        self.tick += 1;
    }

    fn run_until(&mut self, limit: u64, mut done: impl FnMut(&Self) -> bool) -> bool {
        while self.tick < limit {
            if done(self) {
                return true;
            }
            self.step();
        }
        done(self)
    }

    fn leader(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.role() == Role::Leader)
    }
}

#[test]
fn single_node_elects_itself() {
    let mut c = Cluster::new(1, 1);
    assert!(c.run_until(400, |c| c.leader().is_some()));
    assert_eq!(c.nodes[0].term(), 1);
    assert!(c.tick <= 301);
}

#[test]
fn five_nodes_elect_and_replicate() {
    let mut c = Cluster::new(5, 2);
    assert!(c.run_until(2_000, |c| c.leader().is_some()));
    let l = c.leader().unwrap();
    let index = c.nodes[l].propose(Command::Noop).unwrap();
    c.flush(l);
    assert!(c.run_until(3_000, |c| c.nodes.iter().all(|n| n.commit_index() >= index)));
    let logs: Vec<_> = c.nodes.iter().map(|n| n.committed_log().to_vec()).collect();
    assert!(logs.windows(2).all(|w| w[0][..index as usize] == w[1][..index as usize]));
}

fn bogus_vote_request(c: &Cluster, to: u32) -> Vec<u8> {
    let candidate = &c.setup.identities[0];
    let mut rng = SeededRng::from_u64(99);
    // Endorsed by a trusted vendor but running other code.
    let rogue = c.setup.roots.root(candidate.primary().vendor).provision(
        candidate.platform_id,
        hash(b"rogue build"),
        ClockRate::NOMINAL,
        &mut rng,
    );
    let term = 1;
    let digest = vote_request_digest(term, candidate.platform_id, 0, 0);
    let quote = generate_quote(&rogue, digest.as_bytes(), vote_nonce(term, candidate.platform_id)).unwrap();
    let body = Body::RequestVote { last_log_index: 0, last_log_term: 0, quote: Box::new(quote) };
    Message::new_signed(candidate.platform_id, PlatformId(to), term, 0, body, &candidate.primary().aik).to_bytes()
}

#[test]
fn invalid_vote_quote_is_denied_identically() {
    let mut c = Cluster::new(5, 3);
    for to in 2..=5u32 {
        let bytes = bogus_vote_request(&c, to);
        let j = to as usize - 1;
        c.nodes[j].on_message(0, PlatformId(1), &bytes);
        c.flush(j);
    }
    let denials: Vec<_> = c
        .events
        .iter()
        .filter_map(|(_, e)| match e {
            NodeEvent::VoteDenied { candidate: 1, denial } => Some(*denial),
            _ => None,
        })
        .collect();
    assert_eq!(denials, vec![VoteDenial::FailedAttestation; 4]);
}

#[test]
fn forged_proposer_signature_is_rejected() {
    let mut c = Cluster::new(3, 4);
    let leader = &c.setup.identities[0];
    let impostor = SigningKey::generate(&mut SeededRng::from_u64(5));
    let entry = LogEntry::new_signed(1, 1, Command::Noop.to_bytes(), leader.platform_id, &impostor);
    let body = Body::AppendEntries { prev_index: 0, prev_term: 0, entries: vec![entry], leader_commit: 1 };
    let bytes = Message::new_signed(leader.platform_id, PlatformId(2), 1, 0, body, &leader.primary().aik).to_bytes();
    c.nodes[1].on_message(0, PlatformId(1), &bytes);
    c.flush(1);
    assert!(c.nodes[1].log().is_empty());
    assert_eq!(c.nodes[1].commit_index(), 0);
    assert!(c.events.iter().any(|(n, e)| *n == 2 && matches!(e, NodeEvent::MessageFault { peer: 1, .. })));
}

#[test]
fn spoofed_link_sender_is_counted_as_fault() {
    let mut c = Cluster::new(3, 6);
    let bytes = bogus_vote_request(&c, 2);
    // Claims to be from 1 but arrives over the link from 3.
    c.nodes[1].on_message(0, PlatformId(3), &bytes);
    c.flush(1);
    assert!(c.events.iter().any(|(_, e)| matches!(e, NodeEvent::MessageFault { peer: 3, .. })));
}

fn candidate(c: &Cluster, platform: u32, measurement: attested_ledger::crypto::Digest, vendors: &[Vendor]) -> NodeIdentity {
    let mut rng = SeededRng::from_u64(platform as u64);
    let tees = vendors
        .iter()
        .map(|v| c.setup.roots.root(*v).provision(PlatformId(platform), measurement, ClockRate::NOMINAL, &mut rng))
        .collect();
    NodeIdentity { platform_id: PlatformId(platform), tees }
}

#[test]
fn honest_candidate_is_admitted_everywhere() {
    let mut c = Cluster::new(3, 7);
    assert!(c.run_until(2_000, |c| c.leader().is_some()));
    let l = c.leader().unwrap();
    let newcomer = candidate(&c, 4, c.setup.measurement, &[Vendor::ALL[0], Vendor::ALL[1]]);
    let index = c.nodes[l].admit_member(&newcomer, AdmissionPolicy::default()).unwrap();
    c.flush(l);
    assert!(c.run_until(4_000, |c| c.nodes.iter().all(|n| n.commit_index() >= index)));
    for n in &c.nodes {
        assert!(n.membership().is_member(PlatformId(4)));
        let entry = &n.committed_log()[index as usize - 1];
        assert!(matches!(Command::from_bytes(&entry.command), Ok(Command::Admit(m)) if m.platform_id == PlatformId(4)));
    }
}

#[test]
fn compromised_candidates_are_rejected() {
    let mut c = Cluster::new(3, 8);
    assert!(c.run_until(2_000, |c| c.leader().is_some()));
    let l = c.leader().unwrap();
    let policy = AdmissionPolicy::default();

    let wrong = candidate(&c, 4, hash(b"compromised"), &[Vendor::ALL[0], Vendor::ALL[1]]);
    assert!(matches!(c.nodes[l].admit_member(&wrong, policy), Err(AdmissionError::MutualAttestation(_))));

    let mut untrusted = c.setup.trusted.clone();
    untrusted.remove(Vendor::ALL[2]);
    let outsider = candidate(&c, 5, c.setup.measurement, &[Vendor::ALL[2]]);
    let mut node = RaftNode::new(
        c.setup.identities[0].clone(),
        ConsensusConfig::default(),
        c.setup.measurement,
        untrusted,
        QuorumMembership::new(vec![c.setup.identities[0].member()]),
        ExecState::genesis(&c.setup.genesis, Default::default()),
        SeededRng::from_u64(1),
    );
    for t in 0..400 {
        node.on_tick(t);
    }
    assert_eq!(node.role(), Role::Leader);
    let err = node.admit_member(&outsider, policy).unwrap_err();
    assert!(err.to_string().contains("untrusted-vendor"), "{err}");

    assert!(matches!(
        c.nodes[l].admit_member(&c.setup.identities[1].clone(), policy),
        Err(AdmissionError::DuplicateMember(_))
    ));
    let follower = (l + 1) % 3;
    let honest = candidate(&c, 6, c.setup.measurement, &[Vendor::ALL[0], Vendor::ALL[1]]);
    assert!(matches!(c.nodes[follower].admit_member(&honest, policy), Err(AdmissionError::NotLeader)));
}

#[test]
fn drift_detector_thresholds() {
    let mut nominal = HeartbeatStats::new(20, 50);
    let mut slight = HeartbeatStats::new(20, 50);
    let mut fast = HeartbeatStats::new(20, 50);
    for _ in 0..20 {
        nominal.push(IntervalSample { expected: 50, observed: 50 });
        slight.push(IntervalSample { expected: 100, observed: 105 });
        fast.push(IntervalSample { expected: 100, observed: 150 });
    }
    assert_eq!(detect_drift(&nominal, 0.10).unwrap().ratio(), 1.0);
    assert!(!detect_drift(&slight, 0.10).unwrap().is_drifted());
    let v = detect_drift(&fast, 0.10).unwrap();
    assert!(v.is_drifted());
    assert!((v.ratio() - 1.5).abs() < 1e-9);
    assert!(detect_drift(&HeartbeatStats::new(20, 50), 0.10).is_err());
}
