//! Deterministic discrete-event harness: one event loop drives the whole
//! cluster, the network, the client, and the adversary.

mod check;
mod config;
mod scenario;
mod trace;

use std::collections::{BTreeMap, VecDeque};

use serde_json::{json, Value};

pub use check::{check, check_safety, check_threat, faulty_nodes, honest_nodes, replay_trace, ReplayError, Verdict};
pub use config::{ConfigError, Mitigations, Partition, SimConfig, CONFIG_KEYS};
pub use scenario::ThreatId;
pub use trace::{NodeSummary, Trace, TraceError, TraceEvent, TraceHeader, TraceSummary, HARNESS_NODE, TRACE_FORMAT_VERSION};

use crate::attestation::{ClockRate, CodeManifest, EnclaveIdentity, PlatformId, TrustedVendors, Vendor, VendorRoots};
use crate::channel::{
    open_at_app, open_at_runtime, respond, reuse_as_inner, unattested_endpoint, ClientHandshake, EnclaveHello,
    ExpectedMeasurements, HandshakePolicy, Layer, LayerEndpoint, RoutingHeader,
};
use crate::crypto::{aead_open, aead_seal, hash, AeadKey, AgreementSecret, Ciphertext, Digest, Nonce, SeededRng, SigningKey};
use crate::consensus::{
    AdmissionPolicy, NodeEvent, NodeIdentity, QuorumMembership, RaftNode, Role,
};
use crate::execution::{Command, ExecConfig, ExecState, Genesis, Op, Transaction};
use crate::lineage::{load_payload, KeyRegistry, StoredPayload};
use crate::sharding::{reconstruct, rotate, split, Shard, ShardedSecret};

pub const APP_ID: &str = "ledger";

/// Everything derived from the config before the first tick. Replay
/// rebuilds it from the trace header alone.
#[derive(Debug, Clone)]
pub struct Setup {
    pub roots: VendorRoots,
    pub trusted: TrustedVendors,
    pub manifest: CodeManifest,
    pub measurement: Digest,
    pub runtime_measurement: Digest,
    pub identities: Vec<NodeIdentity>,
    pub genesis: Genesis,
    pub client: SigningKey,
    pub target: Option<u32>,
}

pub fn exec_config(cfg: &SimConfig) -> ExecConfig {
    ExecConfig { verify_client_signatures: cfg.mitigations.verify_client_signatures, ..ExecConfig::default() }
}

fn vendors_for(platform: u32, count: u32) -> Vec<Vendor> {
    (0..count).map(|j| Vendor::ALL[((platform - 1 + j) % 3) as usize]).collect()
}

impl Setup {
    pub fn new(cfg: &SimConfig) -> Self {
        let rng = SeededRng::from_u64(cfg.seed);
        let roots = VendorRoots::generate(&mut rng.fork("vendor-roots"));
        let author = SigningKey::generate(&mut rng.fork("author"));
        let manifest = CodeManifest::new_signed(APP_ID, 1, hash(b"attested ledger enclave"), &author);
        let runtime = CodeManifest::new_signed("runtime-manager", 1, hash(b"runtime manager enclave"), &author);
        let measurement = manifest.measurement();
        let target = cfg.target.or_else(|| cfg.scenario.and_then(|s| s.default_target(cfg.nodes)));
        let identities: Vec<NodeIdentity> = (1..=cfg.nodes)
            .map(|i| {
                let mut id_rng = rng.fork(&format!("platform-{i}"));
                let rate = if cfg.scenario == Some(ThreatId::T3) && target == Some(i) {
                    cfg.drift_rate
                } else {
                    ClockRate::NOMINAL
                };
                let tees = vendors_for(i, cfg.vendors_per_node)
                    .into_iter()
                    .map(|v| roots.root(v).provision(PlatformId(i), measurement, rate, &mut id_rng))
                    .collect();
                NodeIdentity { platform_id: PlatformId(i), tees }
            })
            .collect();
        let genesis = Genesis {
            cluster_secret: rng.fork("cluster-secret").next_array(),
            members: identities.iter().map(NodeIdentity::member).collect(),
        };
        Self {
            trusted: roots.trust_all(),
            roots,
            manifest,
            measurement,
            runtime_measurement: runtime.measurement(),
            identities,
            genesis,
            client: SigningKey::generate(&mut rng.fork("client")),
            target,
        }
    }

    /// The runtime-manager enclave hosted on `platform`.
    pub fn runtime_identity(&self, platform: u32, rng: &mut SeededRng) -> EnclaveIdentity {
        let primary = self.identities[platform as usize - 1].primary();
        self.roots.root(primary.vendor).provision(PlatformId(platform), self.runtime_measurement, ClockRate::NOMINAL, rng)
    }
}

/// Deals the cluster secret to the current members, sealed under each
/// recipient's platform key, and re-deals on every shard epoch.
struct Ceremony {
    secret: [u8; 32],
    k_override: Option<u32>,
    epoch: u64,
    meta: ShardedSecret,
    shards: Vec<Shard>,
    holders: Vec<u32>,
    sealed: BTreeMap<u32, Ciphertext>,
    rng: SeededRng,
}

fn shard_aad(platform: u32) -> Vec<u8> {
    [b"shard-at-rest".as_slice(), &platform.to_be_bytes()].concat()
}

impl Ceremony {
    fn k_for(&self, n: u32) -> u32 {
        self.k_override.unwrap_or(n / 2 + 1).clamp(1, n)
    }

    fn new(secret: [u8; 32], k_override: Option<u32>, holders: Vec<u32>, rng: SeededRng) -> Self {
        let mut c = Self {
            secret,
            k_override,
            epoch: 0,
            meta: ShardedSecret {
                n: 0,
                k: 0,
                epoch: 0,
                field_modulus: 0,
                width: 0,
                commitments: vec![],
                share_commitments: vec![],
            },
            shards: vec![],
            holders: vec![],
            sealed: BTreeMap::new(),
            rng,
        };
        let n = holders.len() as u32;
        let (meta, shards) = split(&c.secret, n, c.k_for(n), &mut c.rng).expect("valid parameters");
        c.meta = meta;
        c.shards = shards;
        c.holders = holders;
        c
    }

    fn redeal(&mut self, epoch: u64, holders: Vec<u32>) {
        let n = holders.len() as u32;
        let k = self.k_for(n);
        let (meta, shards) = if n == self.meta.n && k == self.meta.k {
            rotate(&self.shards, &self.meta, &mut self.rng).expect("complete current set")
        } else {
            split(&self.secret, n, k, &mut self.rng).expect("valid parameters")
        };
        self.epoch = epoch;
        self.meta = meta;
        self.shards = shards;
        self.holders = holders;
    }

    /// Seals each shard to its holder. Returns (holder, shard index).
    fn deliver(&mut self, sealing: &BTreeMap<u32, AeadKey>) -> Vec<(u32, u32)> {
        self.sealed.clear();
        let mut sent = Vec::new();
        for (holder, shard) in self.holders.iter().zip(&self.shards) {
            let Some(key) = sealing.get(holder) else { continue };
            let ct = aead_seal(
                key,
                Nonce::from_counter(*holder, self.epoch),
                &shard_aad(*holder),
                &shard.to_bytes(self.meta.field_modulus),
            );
            self.sealed.insert(*holder, ct);
            sent.push((*holder, shard.index));
        }
        sent
    }
}

struct InFlight {
    from: u32,
    to: u32,
    bytes: Vec<u8>,
}

pub struct Simulation {
    cfg: SimConfig,
    setup: Setup,
    nodes: Vec<RaftNode>,
    alive: Vec<bool>,
    net: BTreeMap<(u64, u64), InFlight>,
    msg_seq: u64,
    net_rng: SeededRng,
    adv_rng: SeededRng,
    events: Vec<TraceEvent>,
    event_seq: u64,
    ceremony: Ceremony,
    sealing: BTreeMap<u32, AeadKey>,
    client_queue: VecDeque<(u64, Transaction)>,
    attack_pending: bool,
    tracked: Vec<Digest>,
    adversary: Option<NodeIdentity>,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let setup = Setup::new(&cfg);
        let rng = SeededRng::from_u64(cfg.seed).fork("simulation");
        let membership = QuorumMembership::new(setup.genesis.members.clone());
        let nodes: Vec<RaftNode> = setup
            .identities
            .iter()
            .map(|id| {
                RaftNode::new(
                    id.clone(),
                    cfg.consensus,
                    setup.measurement,
                    setup.trusted.clone(),
                    membership.clone(),
                    ExecState::genesis(&setup.genesis, exec_config(&cfg)),
                    rng.fork(&format!("node-{}", id.platform_id.0)),
                )
            })
            .collect();
        let sealing: BTreeMap<u32, AeadKey> =
            setup.identities.iter().map(|id| (id.platform_id.0, id.primary().sealing_key())).collect();
        let ceremony = Ceremony::new(
            setup.genesis.cluster_secret,
            cfg.shard_threshold,
            (1..=cfg.nodes).collect(),
            rng.fork("ceremony"),
        );
        let client_queue = Self::client_workload(&cfg, &setup, ExecState::genesis(&setup.genesis, exec_config(&cfg)).ingress_code());
        Ok(Self {
            alive: vec![true; nodes.len()],
            nodes,
            net: BTreeMap::new(),
            msg_seq: 0,
            net_rng: rng.fork("network"),
            adv_rng: rng.fork("adversary"),
            events: Vec::new(),
            event_seq: 0,
            ceremony,
            sealing,
            client_queue,
            attack_pending: cfg.scenario.is_some(),
            tracked: Vec::new(),
            adversary: None,
            cfg,
            setup,
        })
    }

    fn client_workload(cfg: &SimConfig, setup: &Setup, ingress_code: Digest) -> VecDeque<(u64, Transaction)> {
        let count = cfg.client_txs as u64;
        let start = 500u64.min(cfg.tick_limit);
        let end = cfg.tick_limit.saturating_sub(2_000).max(start + 1);
        (0..count)
            .map(|i| {
                let tick = start + i * (end - start) / count.max(1);
                let tx = match i % 3 {
                    0 => Transaction::ingest(APP_ID, format!("reading {i}").as_bytes(), "sensor-1", &setup.client, i),
                    1 => Transaction::new_signed(
                        APP_ID,
                        Op::Put { key: format!("k/item-{i}").into_bytes(), value: i.to_be_bytes().to_vec() },
                        &setup.client,
                        i,
                    ),
                    _ => Transaction::run(APP_ID, ingress_code, format!("input {i}").as_bytes(), 100, &setup.client, i),
                };
                (tick, tx)
            })
            .collect()
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn nodes(&self) -> &[RaftNode] {
        &self.nodes
    }

    fn idx(id: u32) -> usize {
        id as usize - 1
    }

    fn record(&mut self, tick: u64, node: u32, event: &str, detail: Value) {
        let (term, role, commit_index) = match node {
            HARNESS_NODE => (0, "harness".to_string(), 0),
            n if n as usize <= self.nodes.len() => {
                let r = &self.nodes[Self::idx(n)];
                (r.term(), r.role().as_str().to_string(), r.commit_index())
            }
            _ => (0, "external".to_string(), 0),
        };
        self.events.push(TraceEvent {
            tick,
            seq: self.event_seq,
            node,
            event: event.to_string(),
            term,
            role,
            commit_index,
            detail,
        });
        self.event_seq += 1;
    }

    fn record_node_event(&mut self, tick: u64, node: u32, ev: &NodeEvent) {
        let mut v = serde_json::to_value(ev).expect("serializable");
        let name = v
            .as_object_mut()
            .and_then(|o| o.remove("event"))
            .and_then(|n| n.as_str().map(str::to_string))
            .unwrap_or_default();
        self.record(tick, node, &name, v);
        if let NodeEvent::ShardEpochCommitted { epoch, recipients } = ev {
            if *epoch > self.ceremony.epoch {
                self.ceremony.redeal(*epoch, recipients.clone());
                self.send_shards(tick);
            }
        }
    }

    fn send_shards(&mut self, tick: u64) {
        let epoch = self.ceremony.epoch;
        for (holder, index) in self.ceremony.deliver(&self.sealing) {
            self.record(tick, holder, "shard-sent", json!({ "recipient": holder, "epoch": epoch, "index": index }));
        }
    }

    fn flush(&mut self, tick: u64, id: u32) {
        let node = &mut self.nodes[Self::idx(id)];
        let out = node.take_outbox();
        let evs = node.take_events();
        for ev in &evs {
            self.record_node_event(tick, id, ev);
        }
        for o in out {
            self.route(tick, id, o.to.0, o.bytes);
        }
    }

    fn route(&mut self, tick: u64, from: u32, to: u32, mut bytes: Vec<u8>) {
        if to == 0 || to as usize > self.nodes.len() {
            return;
        }
        if self.cfg.drop_rate > 0.0 && self.net_rng.chance((self.cfg.drop_rate * 1e6) as u64, 1_000_000) {
            return;
        }
        if self.cfg.scenario == Some(ThreatId::D1)
            && self.setup.target == Some(from)
            && tick >= self.cfg.attack_tick
            && !bytes.is_empty()
            && self.adv_rng.chance((self.cfg.corruption_rate * 1e6) as u64, 1_000_000)
        {
            let bit = self.adv_rng.range_inclusive(0, bytes.len() as u64 * 8 - 1);
            bytes[(bit / 8) as usize] ^= 1 << (bit % 8);
        }
        let delay = self.net_rng.range_inclusive(self.cfg.delay_min, self.cfg.delay_max);
        self.net.insert((tick + delay, self.msg_seq), InFlight { from, to, bytes });
        self.msg_seq += 1;
    }

    fn deliver(&mut self, tick: u64) {
        while let Some(entry) = self.net.first_entry() {
            if entry.key().0 > tick {
                break;
            }
            let m = entry.remove();
            let cut = self.cfg.partition.as_ref().is_some_and(|p| p.separates(tick, m.from, m.to));
            if cut || !self.alive[Self::idx(m.to)] {
                continue;
            }
            self.nodes[Self::idx(m.to)].on_message(tick, PlatformId(m.from), &m.bytes);
            self.flush(tick, m.to);
        }
    }

    fn leader(&self) -> Option<u32> {
        self.nodes
            .iter()
            .zip(&self.alive)
            .filter(|(n, alive)| {
                **alive && n.role() == Role::Leader && !n.is_self_suspect() && n.membership().is_member(n.id())
            })
            .max_by_key(|(n, _)| n.term())
            .map(|(n, _)| n.id().0)
    }

    fn propose(&mut self, tick: u64, cmd: Command) -> bool {
        let Some(l) = self.leader() else { return false };
        let ok = self.nodes[Self::idx(l)].propose(cmd).is_some();
        self.flush(tick, l);
        ok
    }

    fn client_step(&mut self, tick: u64) {
        while let Some((due, _)) = self.client_queue.front() {
            if *due > tick {
                break;
            }
            let (due, tx) = self.client_queue.pop_front().expect("peeked");
            if !self.propose(tick, Command::Tx(tx.clone())) {
                self.client_queue.push_front((due, tx));
                break;
            }
        }
    }

    pub fn step(&mut self, tick: u64) {
        if tick == 0 {
            self.start(tick);
        }
        self.deliver(tick);
        for i in 0..self.nodes.len() {
            if self.alive[i] {
                self.nodes[i].on_tick(tick);
                self.flush(tick, i as u32 + 1);
            }
        }
        if self.attack_pending && tick >= self.cfg.attack_tick {
            self.attack_pending = !self.attack(tick);
        }
        self.client_step(tick);
    }

    fn start(&mut self, tick: u64) {
        self.send_shards(tick);
        let (Some(threat), Some(target)) = (self.cfg.scenario, self.setup.target) else { return };
        match threat {
            ThreatId::T3 => {
                let rate = self.cfg.drift_rate.as_f64();
                self.record(tick, HARNESS_NODE, "fault-injected", json!({"threat": "T3", "platform": target, "clock_rate": rate}));
            }
            ThreatId::D1 => {
                let rate = self.cfg.corruption_rate;
                self.record(tick, HARNESS_NODE, "fault-injected", json!({"threat": "D1", "platform": target, "corruption_rate": rate}));
            }
            _ => {}
        }
    }

    /// Runs the scenario's adversary action. Returns false to retry on a
    /// later tick (for example while no leader is known).
    fn attack(&mut self, tick: u64) -> bool {
        let Some(threat) = self.cfg.scenario else { return true };
        match threat {
            ThreatId::S1 => self.attack_forged_ingress(tick),
            ThreatId::I1 => self.attack_proxy(tick),
            ThreatId::I3 => self.attack_modified_app(tick),
            ThreatId::I4 => self.attack_runtime_spy(tick),
            ThreatId::E1 => self.attack_key_extraction(tick, threat, self.setup.target.unwrap_or(1)),
            ThreatId::E2 | ThreatId::S2 => self.attack_admission(tick, threat),
            ThreatId::T2 => self.attack_destroy(tick),
            ThreatId::T3 | ThreatId::D1 => true,
        }
    }

    fn attack_forged_ingress(&mut self, tick: u64) -> bool {
        let Some(_) = self.leader() else { return false };
        let adversary = SigningKey::generate(&mut self.adv_rng);
        let mut tx = Transaction::ingest(APP_ID, b"forged sensor reading", "sensor-1", &adversary, 1 << 40);
        tx.client = self.setup.client.verify_key();
        let id = tx.id();
        self.propose(tick, Command::Tx(tx));
        self.tracked.push(id);
        self.record(tick, HARNESS_NODE, "adversary-tx", json!({"threat": "S1", "tx_id": id.to_hex()}));
        true
    }

    fn channel_target(&self) -> u32 {
        self.setup.target.unwrap_or(1)
    }

    fn policy(&self) -> HandshakePolicy {
        let m = self.cfg.mitigations;
        HandshakePolicy {
            verify_outer: m.verify_outer,
            verify_inner_measurement: m.verify_inner_measurement,
            separate_layers: m.separate_layers,
        }
    }

    fn expected(&self) -> ExpectedMeasurements {
        ExpectedMeasurements { runtime: self.setup.runtime_measurement, app: self.setup.measurement }
    }

    fn app_endpoint(&self, runtime_end: &LayerEndpoint, app_end: LayerEndpoint) -> LayerEndpoint {
        if self.cfg.mitigations.separate_layers {
            app_end
        } else {
            reuse_as_inner(runtime_end)
        }
    }

    /// Client request carried over the channel: an ingest transaction.
    fn channel_request(&self, label: &str) -> Transaction {
        Transaction::ingest(APP_ID, format!("via channel: {label}").as_bytes(), "sensor-1", &self.setup.client, 1 << 41)
    }

    /// Delivers a request through an established session to an app
    /// enclave with `measurement`, and proposes it if it decodes.
    #[allow(clippy::too_many_arguments)]
    fn deliver_request(
        &mut self,
        tick: u64,
        threat: ThreatId,
        session: &mut crate::channel::LayeredSession,
        runtime_end: &mut LayerEndpoint,
        app_end: &mut LayerEndpoint,
        measurement: Digest,
        tx: Transaction,
    ) {
        let env = session.seal_request(&RoutingHeader::for_session(session), &tx.to_bytes());
        let Ok((_, inner)) = open_at_runtime(runtime_end, &env) else { return };
        if let Ok(plain) = open_at_app(app_end, &inner) {
            let target = self.channel_target();
            self.record(
                tick,
                target,
                "payload-delivered",
                json!({"threat": threat.as_str(), "measurement": measurement.to_hex(), "expected": self.setup.measurement.to_hex()}),
            );
            if measurement == self.setup.measurement {
                if let Ok(tx) = Transaction::from_bytes(&plain) {
                    self.propose(tick, Command::Tx(tx));
                }
            }
        }
    }

    fn honest_handshake(&mut self, tick: u64, threat: ThreatId) {
        let target = self.channel_target();
        let mut rng = self.adv_rng.fork("honest-client");
        let runtime = self.setup.runtime_identity(target, &mut rng);
        let app = self.setup.identities[Self::idx(target)].primary().clone();
        let client = ClientHandshake::start(APP_ID, &mut rng);
        let (outer, mut rt_end) = respond(&runtime, Layer::Outer, client.hello(), &mut rng).expect("endorsed");
        let (inner, app_end) = respond(&app, Layer::Inner, client.hello(), &mut rng).expect("endorsed");
        let result = client.finish(&outer, &inner, &self.setup.trusted, &self.expected(), self.policy());
        self.record(
            tick,
            target,
            "handshake",
            json!({"threat": threat.as_str(), "via": "direct", "accepted": result.is_ok(), "failure": result.as_ref().err().map(|e| e.to_string())}),
        );
        if let Ok(mut session) = result {
            let mut app_end = self.app_endpoint(&rt_end, app_end);
            let tx = self.channel_request("direct");
            self.deliver_request(tick, threat, &mut session, &mut rt_end, &mut app_end, app.measurement, tx);
        }
    }

    fn attack_proxy(&mut self, tick: u64) -> bool {
        let Some(_) = self.leader() else { return false };
        let target = self.channel_target();
        let mut rng = self.adv_rng.fork("proxy");
        let runtime = self.setup.runtime_identity(target, &mut rng);
        let app = self.setup.identities[Self::idx(target)].primary().clone();
        let client = ClientHandshake::start(APP_ID, &mut rng);
        // The proxy answers the client's outer half itself and opens its own
        // outer session towards the platform.
        let proxy_secret = AgreementSecret::generate(&mut rng);
        let (_, mut proxy_end) = unattested_endpoint(Layer::Outer, client.hello(), &proxy_secret);
        let mut upstream_hello = client.hello().clone();
        upstream_hello.outer_public = AgreementSecret::generate(&mut rng).public();
        let (genuine, _) = respond(&runtime, Layer::Outer, &upstream_hello, &mut rng).expect("endorsed");
        let forged = EnclaveHello { public: proxy_secret.public(), quote: genuine.quote };
        let (inner, app_end) = respond(&app, Layer::Inner, client.hello(), &mut rng).expect("endorsed");
        let result = client.finish(&forged, &inner, &self.setup.trusted, &self.expected(), self.policy());
        self.record(
            tick,
            HARNESS_NODE,
            "handshake",
            json!({"threat": "I1", "via": "proxy", "accepted": result.is_ok(), "failure": result.as_ref().err().map(|e| e.to_string())}),
        );
        if let Ok(mut session) = result {
            let _ = app_end;
            let tx = self.channel_request("through proxy");
            let env = session.seal_request(&RoutingHeader::for_session(&session), &tx.to_bytes());
            let recovered = open_at_runtime(&mut proxy_end, &env).is_ok();
            self.record(tick, HARNESS_NODE, "proxy-read", json!({"threat": "I1", "recovered": recovered}));
        }
        self.honest_handshake(tick, ThreatId::I1);
        true
    }

    fn attack_modified_app(&mut self, tick: u64) -> bool {
        let Some(_) = self.leader() else { return false };
        let target = self.channel_target();
        let mut rng = self.adv_rng.fork("modified-app");
        let runtime = self.setup.runtime_identity(target, &mut rng);
        let vendor = self.setup.identities[Self::idx(target)].primary().vendor;
        let modified = self.setup.roots.root(vendor).provision(
            PlatformId(target),
            hash(b"modified application"),
            ClockRate::NOMINAL,
            &mut rng,
        );
        let client = ClientHandshake::start(APP_ID, &mut rng);
        let (outer, mut rt_end) = respond(&runtime, Layer::Outer, client.hello(), &mut rng).expect("endorsed");
        let (inner, app_end) = respond(&modified, Layer::Inner, client.hello(), &mut rng).expect("endorsed");
        let result = client.finish(&outer, &inner, &self.setup.trusted, &self.expected(), self.policy());
        self.record(
            tick,
            target,
            "handshake",
            json!({"threat": "I3", "via": "modified-app", "accepted": result.is_ok(), "failure": result.as_ref().err().map(|e| e.to_string())}),
        );
        if let Ok(mut session) = result {
            let mut app_end = self.app_endpoint(&rt_end, app_end);
            let tx = self.channel_request("to modified app");
            self.deliver_request(tick, ThreatId::I3, &mut session, &mut rt_end, &mut app_end, modified.measurement, tx);
        }
        self.honest_handshake(tick, ThreatId::I3);
        true
    }

    fn attack_runtime_spy(&mut self, tick: u64) -> bool {
        let Some(_) = self.leader() else { return false };
        let target = self.channel_target();
        let mut rng = self.adv_rng.fork("runtime-spy");
        let runtime = self.setup.runtime_identity(target, &mut rng);
        let app = self.setup.identities[Self::idx(target)].primary().clone();
        let client = ClientHandshake::start(APP_ID, &mut rng);
        let (outer, mut rt_end) = respond(&runtime, Layer::Outer, client.hello(), &mut rng).expect("endorsed");
        let (inner, app_end) = respond(&app, Layer::Inner, client.hello(), &mut rng).expect("endorsed");
        let Ok(mut session) = client.finish(&outer, &inner, &self.setup.trusted, &self.expected(), self.policy()) else {
            return true;
        };
        let mut app_end = self.app_endpoint(&rt_end, app_end);
        let tx = self.channel_request("spied on");
        let env = session.seal_request(&RoutingHeader::for_session(&session), &tx.to_bytes());
        let mut spy = reuse_as_inner(&rt_end);
        if let Ok((routing, inner)) = open_at_runtime(&mut rt_end, &env) {
            let recovered = open_at_app(&mut spy, &inner).is_ok();
            self.record(
                tick,
                target,
                "runtime-inner-attempt",
                json!({"threat": "I4", "routing_app": routing.app_id, "recovered": recovered}),
            );
            if let Ok(plain) = open_at_app(&mut app_end, &inner) {
                self.record(
                    tick,
                    target,
                    "payload-delivered",
                    json!({"threat": "I4", "measurement": app.measurement.to_hex(), "expected": self.setup.measurement.to_hex()}),
                );
                if let Ok(tx) = Transaction::from_bytes(&plain) {
                    self.propose(tick, Command::Tx(tx));
                }
            }
        }
        let replay_accepted = open_at_runtime(&mut rt_end, &env).is_ok();
        self.record(tick, target, "replay-attempt", json!({"threat": "I4", "accepted": replay_accepted}));
        true
    }

    /// The adversary holds `platform`'s sealing key and its at-rest shard,
    /// and tries to decrypt a datum from the ledger.
    fn attack_key_extraction(&mut self, tick: u64, threat: ThreatId, platform: u32) -> bool {
        let reference = self.reference_node();
        let data_id = self.nodes[reference].exec().emitted.first().copied();
        let Some(data_id) = data_id else { return false };
        let key = self.sealing[&platform].clone();
        let shard = self
            .ceremony
            .sealed
            .get(&platform)
            .and_then(|ct| aead_open(&key, &shard_aad(platform), ct).ok())
            .and_then(|b| Shard::from_bytes(&b).ok())
            .map(|(s, _)| s);
        let held = shard.iter().count();
        let secret = shard.and_then(|s| reconstruct(&[s], &self.ceremony.meta).ok());
        let trie = &self.nodes[reference].exec().trie;
        let decrypted = secret.as_ref().is_some_and(|s| {
            let key = KeyRegistry::new(s).derive_data_key(&data_id);
            matches!(load_payload(trie, &data_id), Ok(StoredPayload::Sealed(ct)) if aead_open(&key, data_id.as_bytes(), &ct).is_ok())
        });
        self.record(
            tick,
            HARNESS_NODE,
            "key-extraction",
            json!({
                "threat": threat.as_str(),
                "platform": platform,
                "shards_held": held,
                "k": self.ceremony.meta.k,
                "reconstructed": secret.is_some(),
                "decrypted": decrypted,
                "data_id": data_id.to_hex(),
            }),
        );
        true
    }

    fn adversary_identity(&mut self, threat: ThreatId) -> NodeIdentity {
        let platform = PlatformId(self.cfg.nodes + 1);
        let mut rng = self.adv_rng.fork("candidate");
        let vendors = vendors_for(1, self.cfg.vendors_per_node.max(2));
        let malicious = hash(b"compromised enclave");
        let tees = match threat {
            // The compromised vendor vouches for the cluster measurement;
            // the second vendor reports what actually runs.
            ThreatId::E2 => vec![
                self.setup.roots.root(vendors[0]).provision(platform, self.setup.measurement, ClockRate::NOMINAL, &mut rng),
                self.setup.roots.root(vendors[1]).provision(platform, malicious, ClockRate::NOMINAL, &mut rng),
            ],
            _ => vendors
                .iter()
                .map(|v| self.setup.roots.root(*v).provision(platform, malicious, ClockRate::NOMINAL, &mut rng))
                .collect(),
        };
        NodeIdentity { platform_id: platform, tees }
    }

    fn attack_admission(&mut self, tick: u64, threat: ThreatId) -> bool {
        let Some(leader) = self.leader() else { return false };
        let candidate = match &self.adversary {
            Some(c) => c.clone(),
            None => {
                let c = self.adversary_identity(threat);
                self.sealing.insert(c.platform_id.0, c.primary().sealing_key());
                self.record(
                    tick,
                    HARNESS_NODE,
                    "adversary-platform",
                    json!({"threat": threat.as_str(), "platform": c.platform_id.0}),
                );
                self.adversary = Some(c.clone());
                c
            }
        };
        let policy = AdmissionPolicy {
            require_attestation: self.cfg.mitigations.admission_attestation,
            require_cross_vendor: self.cfg.mitigations.cross_vendor,
        };
        let result = self.nodes[Self::idx(leader)].admit_member(&candidate, policy);
        self.record(
            tick,
            leader,
            "admission-attempt",
            json!({
                "threat": threat.as_str(),
                "candidate": candidate.platform_id.0,
                "accepted": result.is_ok(),
                "reason": result.as_ref().err().map(|e| e.to_string()),
            }),
        );
        self.flush(tick, leader);
        true
    }

    fn attack_destroy(&mut self, tick: u64) -> bool {
        let Some(victim) = self.setup.target.or_else(|| self.leader()) else { return false };
        if self.reference_alive_data().is_none() {
            return false;
        }
        self.alive[Self::idx(victim)] = false;
        self.record(tick, HARNESS_NODE, "node-destroyed", json!({"threat": "T2", "platform": victim}));
        self.attack_key_extraction(tick, ThreatId::T2, victim);
        true
    }

    fn reference_alive_data(&self) -> Option<Digest> {
        self.nodes[self.reference_node()].exec().emitted.first().copied()
    }

    /// The alive node with the most committed entries, preferring honest ones.
    fn reference_node(&self) -> usize {
        let faulty = match (self.cfg.scenario, self.setup.target) {
            (Some(ThreatId::T3 | ThreatId::D1), Some(t)) => Some(t),
            _ => None,
        };
        (0..self.nodes.len())
            .filter(|&i| self.alive[i])
            .max_by_key(|&i| (Some(i as u32 + 1) != faulty, self.nodes[i].commit_index(), std::cmp::Reverse(i)))
            .unwrap_or(0)
    }

    pub fn run(mut self) -> Trace {
        for t in 0..self.cfg.tick_limit {
            self.step(t);
        }
        self.finish()
    }

    fn finish(self) -> Trace {
        let reference = &self.nodes[self.reference_node()];
        let nodes = self
            .nodes
            .iter()
            .zip(&self.alive)
            .map(|(n, alive)| NodeSummary {
                id: n.id().0,
                alive: *alive,
                role: n.role().as_str().to_string(),
                term: n.term(),
                commit_index: n.commit_index(),
                root: n.exec().root().0.to_hex(),
                fingerprint: n.exec().fingerprint().to_hex(),
                log: n.committed_log().iter().map(|e| hex::encode(e.to_bytes())).collect(),
            })
            .collect();
        let tracked = self
            .tracked
            .iter()
            .map(|id| {
                let outcome = reference
                    .exec()
                    .results
                    .get(id)
                    .map_or(json!({"outcome": "uncommitted"}), |r| serde_json::to_value(&r.outcome).expect("serializable"));
                (id.to_hex(), outcome)
            })
            .collect();
        let mut trace = Trace {
            header: TraceHeader { format_version: TRACE_FORMAT_VERSION, config: self.cfg.to_pairs() },
            events: self.events,
            summary: TraceSummary {
                nodes,
                membership: reference.membership().ids().iter().map(|p| p.0).collect(),
                exclusions: reference.membership().excluded().copied().collect(),
                tracked,
                verdict: None,
            },
        };
        trace.summary.verdict = Some(check(&trace, self.cfg.scenario));
        trace
    }
}

/// Runs a configuration to completion.
pub fn run(cfg: SimConfig) -> Result<Trace, ConfigError> {
    Ok(Simulation::new(cfg)?.run())
}
