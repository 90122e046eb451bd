//! Deterministic transaction engine applied to committed log entries.
//!
//! Every replica runs [`ExecState::apply`] on the same committed entries
//! and ends with byte-identical ledger roots, results and provenance.
//! Per-op failures are recorded as results and leave the root unchanged.

mod local;
mod transaction;
mod vm;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

pub use local::LocalLedger;
pub use transaction::{approval_message, Command, Op, Transaction, RUN_INPUT_SOURCE};
pub use vm::{
    run_program, state_key, EpochSeed, Instr, Program, ProgramFault, ProgramOutput, MAX_SEED_DRAW, MAX_STEP_BUDGET,
    MAX_VALUE_LEN, STATE_PREFIX,
};

use crate::attestation::{CodeManifest, PlatformId};
use crate::codec::{CodecError, Decoder, Encoder};
use crate::consensus::{LogEntry, Member};
use crate::crypto::{hash, hash_parts, Digest, SigningKey};
use crate::lineage::{
    code_key, grant_access, install_record_signer, open_datum, record_ingress, record_ingress_unchecked,
    record_transformation, register_code, revoke_access, CommitContext, KeyRegistry, LineageError, LogicalTime,
    Payload, ProvenanceRecord,
};
use crate::mpt_ledger::{RootHash, Trie, TrieError};

pub const DEFAULT_PROPOSAL_EXPIRY: u64 = 1_000;

pub fn program_key(code_digest: &Digest) -> Vec<u8> {
    [b"prog/".as_slice(), code_digest.as_bytes()].concat()
}

pub fn proposal_key(action_id: &Digest) -> Vec<u8> {
    [b"proc/".as_slice(), action_id.as_bytes()].concat()
}

pub fn executed_key(action_id: &Digest) -> Vec<u8> {
    [b"exec/".as_slice(), action_id.as_bytes()].concat()
}

fn release_key(app_id: &str, version: u32) -> Vec<u8> {
    [b"rel/".as_slice(), hash_parts("release", &[app_id.as_bytes(), &version.to_be_bytes()]).as_bytes()].concat()
}

pub fn member_key(id: PlatformId) -> Vec<u8> {
    [b"member/".as_slice(), &id.0.to_be_bytes()].concat()
}

pub fn exclusion_key(id: PlatformId) -> Vec<u8> {
    [b"excl/".as_slice(), &id.0.to_be_bytes()].concat()
}

pub const SHARD_EPOCH_KEY: &[u8] = b"sys/shard-epoch";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalStatus {
    Pending,
    Approved,
    Executed,
    Expired,
}

impl ProposalStatus {
    fn code(self) -> u8 {
        match self {
            ProposalStatus::Pending => 0,
            ProposalStatus::Approved => 1,
            ProposalStatus::Executed => 2,
            ProposalStatus::Expired => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self, CodecError> {
        Ok(match c {
            0 => ProposalStatus::Pending,
            1 => ProposalStatus::Approved,
            2 => ProposalStatus::Executed,
            3 => ProposalStatus::Expired,
            tag => return Err(CodecError::InvalidTag { what: "proposal status", tag }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessProposal {
    pub action_id: Digest,
    pub action: Vec<u8>,
    /// Sorted approver key fingerprints.
    pub approvers: Vec<Digest>,
    pub threshold: u32,
    /// (approver fingerprint, approval signature), in commit order.
    pub approvals: Vec<(Digest, crate::crypto::Signature)>,
    pub status: ProposalStatus,
    pub created_block: u64,
    pub expiry_block: u64,
}

impl ProcessProposal {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.action_id.encode(&mut enc);
        enc.bytes(&self.action).u32(self.approvers.len() as u32);
        self.approvers.iter().for_each(|a| a.encode(&mut enc));
        enc.u32(self.threshold).u32(self.approvals.len() as u32);
        for (fp, sig) in &self.approvals {
            fp.encode(&mut enc);
            sig.encode(&mut enc);
        }
        enc.u8(self.status.code()).u64(self.created_block).u64(self.expiry_block);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let action_id = Digest::decode(&mut dec)?;
        let action = dec.vec()?;
        let n = dec.count(Digest::ENCODED_LEN)?;
        let approvers = (0..n).map(|_| Digest::decode(&mut dec)).collect::<Result<_, _>>()?;
        let threshold = dec.u32()?;
        let a = dec.count(Digest::ENCODED_LEN)?;
        let approvals = (0..a)
            .map(|_| Ok((Digest::decode(&mut dec)?, crate::crypto::Signature::decode(&mut dec)?)))
            .collect::<Result<_, CodecError>>()?;
        let p = Self {
            action_id,
            action,
            approvers,
            threshold,
            approvals,
            status: ProposalStatus::from_code(dec.u8()?)?,
            created_block: dec.u64()?,
            expiry_block: dec.u64()?,
        };
        dec.finish()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Error)]
#[serde(rename_all = "kebab-case", tag = "failure", content = "detail")]
pub enum TxFailure {
    #[error("transaction signature does not verify")]
    BadSignature,
    #[error("code measurement {0} is not registered")]
    UnregisteredCode(Digest),
    #[error("program fault: {0}")]
    Program(ProgramFault),
    #[error("lineage: {0}")]
    Lineage(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error("unknown action")]
    UnknownAction,
    #[error("signer is not an approver")]
    NonApprover,
    #[error("approval signature does not verify")]
    BadApproval,
    #[error("proposal expired")]
    ProposalExpired,
    #[error("invalid proposal parameters")]
    InvalidProposal,
    #[error("manifest signature or code digest invalid")]
    BadManifest,
    #[error("release already registered")]
    DuplicateRelease,
}

impl From<LineageError> for TxFailure {
    fn from(e: LineageError) -> Self {
        TxFailure::Lineage(e.to_string())
    }
}

impl From<TrieError> for TxFailure {
    fn from(e: TrieError) -> Self {
        TxFailure::Storage(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "outcome")]
pub enum TxOutcome {
    Ok,
    /// GET result; `None` means absent.
    Value { value: Option<String> },
    Output { data_id: Digest, output: String },
    Record { data_id: Digest },
    Proposal { action_id: Digest, status: ProposalStatus },
    Registered { measurement: Digest },
    Failed(TxFailure),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TxResult {
    pub tx_id: Digest,
    pub index: u64,
    pub op: &'static str,
    pub outcome: TxOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecConfig {
    pub proposal_expiry_blocks: u64,
    /// Gate on transaction and ingress signatures. Only fault-injection
    /// runs turn this off.
    pub verify_client_signatures: bool,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self { proposal_expiry_blocks: DEFAULT_PROPOSAL_EXPIRY, verify_client_signatures: true }
    }
}

/// Everything replicas agree on before the first entry.
#[derive(Debug, Clone)]
pub struct Genesis {
    pub cluster_secret: [u8; 32],
    pub members: Vec<Member>,
}

impl Genesis {
    fn author(&self) -> SigningKey {
        SigningKey::from_seed(*hash_parts("genesis-author", &[&self.cluster_secret]).as_bytes())
    }

    fn record_signer(&self) -> SigningKey {
        SigningKey::from_seed(*hash_parts("record-signer", &[&self.cluster_secret]).as_bytes())
    }

    /// The built-in ingress program: the identity over the ingested payload.
    pub fn ingress_manifest(&self) -> CodeManifest {
        CodeManifest::new_signed("ingress", 1, Program::identity().code_digest(), &self.author())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    #[error("expected entry {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
}

#[derive(Debug, Clone)]
pub struct ApplyOutcome {
    pub root: RootHash,
    pub records: Vec<ProvenanceRecord>,
    pub result: Option<TxResult>,
}

#[derive(Debug, Clone)]
pub struct ExecState {
    pub trie: Trie,
    pub keys: KeyRegistry,
    pub results: BTreeMap<Digest, TxResult>,
    pub last_applied: u64,
    /// Data ids of emitted provenance records, in commit order.
    pub emitted: Vec<Digest>,
    signer: SigningKey,
    ingress_code: Digest,
    config: ExecConfig,
}

struct Ctx {
    time: LogicalTime,
    producer: PlatformId,
    seed: EpochSeed,
}

impl ExecState {
    pub fn genesis(genesis: &Genesis, config: ExecConfig) -> Self {
        let signer = genesis.record_signer();
        let ingress = genesis.ingress_manifest();
        let identity = Program::identity();
        let mut trie = install_record_signer(&Trie::new(), &signer.verify_key()).expect("fixed key");
        trie = register_code(&trie, &ingress).expect("small manifest");
        trie = trie.insert(&program_key(&identity.code_digest()), &identity.to_bytes()).expect("small program");
        trie = trie.insert(&release_key(&ingress.app_id, ingress.version), b"").expect("fixed key");
        for m in &genesis.members {
            let mut enc = Encoder::new();
            m.encode(&mut enc);
            trie = trie.insert(&member_key(m.platform_id), enc.as_slice()).expect("small member");
        }
        Self {
            trie,
            keys: KeyRegistry::new(&genesis.cluster_secret),
            results: BTreeMap::new(),
            last_applied: 0,
            emitted: Vec::new(),
            signer,
            ingress_code: ingress.measurement(),
            config,
        }
    }

    pub fn root(&self) -> RootHash {
        self.trie.root_hash()
    }

    pub fn ingress_code(&self) -> Digest {
        self.ingress_code
    }

    /// Digest over everything apply produces, for replica comparison.
    pub fn fingerprint(&self) -> Digest {
        let results = serde_json::to_vec(&self.results.values().collect::<Vec<_>>()).expect("serializable");
        let emitted: Vec<u8> = self.emitted.iter().flat_map(|d| *d.as_bytes()).collect();
        hash_parts(
            "exec-state",
            &[self.root().0.as_bytes(), &results, &emitted, self.keys.fingerprint().as_bytes(), &self.last_applied.to_be_bytes()],
        )
    }

    pub fn apply(&mut self, entry: &LogEntry) -> Result<ApplyOutcome, ApplyError> {
        if entry.index != self.last_applied + 1 {
            return Err(ApplyError::OutOfOrder { expected: self.last_applied + 1, got: entry.index });
        }
        self.last_applied = entry.index;
        let ctx = Ctx {
            time: LogicalTime { term: entry.term, index: entry.index },
            producer: entry.proposer,
            seed: EpochSeed::derive(&self.root(), entry.index),
        };
        let mut records = Vec::new();
        let mut result = None;
        match Command::from_bytes(&entry.command) {
            Ok(Command::Noop) | Err(_) => {}
            Ok(Command::Tx(tx)) => {
                let outcome = if self.config.verify_client_signatures && !tx.signature_valid() {
                    TxOutcome::Failed(TxFailure::BadSignature)
                } else {
                    // Work on copies so a failure leaves no trace.
                    let mut trie = self.trie.clone();
                    let mut keys = self.keys.clone();
                    match self.apply_op(&tx, &ctx, &mut trie, &mut keys, &mut records) {
                        Ok(o) => {
                            self.trie = trie;
                            self.keys = keys;
                            o
                        }
                        Err(f) => {
                            records.clear();
                            TxOutcome::Failed(f)
                        }
                    }
                };
                let r = TxResult { tx_id: tx.id(), index: entry.index, op: tx.op.name(), outcome };
                self.results.insert(r.tx_id, r.clone());
                result = Some(r);
            }
            Ok(Command::Admit(m)) => {
                let mut enc = Encoder::new();
                m.encode(&mut enc);
                self.trie = self.trie.insert(&member_key(m.platform_id), enc.as_slice()).expect("small member");
            }
            Ok(Command::Exclude(x)) => {
                let mut enc = Encoder::new();
                x.encode(&mut enc);
                self.trie = self.trie.delete(&member_key(x.platform_id));
                self.trie = self.trie.insert(&exclusion_key(x.platform_id), enc.as_slice()).expect("small record");
            }
            Ok(Command::ShardEpoch { epoch, recipients }) => {
                let mut enc = Encoder::new();
                enc.u64(epoch).u32(recipients.len() as u32);
                recipients.iter().for_each(|r| {
                    enc.u32(*r);
                });
                self.trie = self.trie.insert(SHARD_EPOCH_KEY, enc.as_slice()).expect("small record");
            }
        }
        self.emitted.extend(records.iter().map(|r| r.data_id));
        Ok(ApplyOutcome { root: self.root(), records, result })
    }

    fn load_program(&self, trie: &Trie, measurement: &Digest) -> Result<Program, TxFailure> {
        let manifest = trie
            .get(&code_key(measurement))
            .and_then(|b| CodeManifest::from_bytes(b).ok())
            .ok_or(TxFailure::UnregisteredCode(*measurement))?;
        trie.get(&program_key(&manifest.code_digest))
            .and_then(|b| Program::from_bytes(b).ok())
            .ok_or(TxFailure::UnregisteredCode(*measurement))
    }

    fn apply_op(
        &self,
        tx: &Transaction,
        ctx: &Ctx,
        trie: &mut Trie,
        keys: &mut KeyRegistry,
        records: &mut Vec<ProvenanceRecord>,
    ) -> Result<TxOutcome, TxFailure> {
        let commit = CommitContext {
            logical_time: ctx.time,
            block_index: ctx.time.index,
            producer: ctx.producer,
            signer: &self.signer,
        };
        match &tx.op {
            Op::Put { key, value } => {
                *trie = trie.insert(&state_key(key), value)?;
                Ok(TxOutcome::Ok)
            }
            Op::Get { key } => Ok(TxOutcome::Value { value: trie.get(&state_key(key)).map(hex::encode) }),
            Op::Delete { key } => {
                *trie = trie.delete(&state_key(key));
                Ok(TxOutcome::Ok)
            }
            Op::Run { measurement, input, step_budget, input_sig } => {
                let program = self.load_program(trie, measurement)?;
                let out = run_program(&program, &[input.clone()], trie, &ctx.seed, *step_budget)
                    .map_err(TxFailure::Program)?;
                let (t, input_record) = self.ingress(
                    &out.state,
                    keys,
                    &Payload::Inline(input.clone()),
                    RUN_INPUT_SOURCE,
                    tx,
                    input_sig,
                    &commit,
                )?;
                let (t, output_record) = record_transformation(
                    &t,
                    keys,
                    &[input_record.data_id],
                    measurement,
                    &Payload::Inline(out.output.clone()),
                    &commit,
                )?;
                *trie = t;
                let data_id = output_record.data_id;
                records.extend([input_record, output_record]);
                Ok(TxOutcome::Output { data_id, output: hex::encode(out.output) })
            }
            Op::Ingest { payload, source, ingress_sig } => {
                let (t, record) = self.ingress(trie, keys, payload, source, tx, ingress_sig, &commit)?;
                *trie = t;
                let data_id = record.data_id;
                records.push(record);
                Ok(TxOutcome::Record { data_id })
            }
            Op::Transform { inputs, measurement, step_budget } => {
                let program = self.load_program(trie, measurement)?;
                let plain = inputs.iter().map(|id| open_datum(trie, keys, id)).collect::<Result<Vec<_>, _>>()?;
                let out = run_program(&program, &plain, trie, &ctx.seed, *step_budget).map_err(TxFailure::Program)?;
                let (t, record) =
                    record_transformation(&out.state, keys, inputs, measurement, &Payload::Inline(out.output), &commit)?;
                *trie = t;
                let data_id = record.data_id;
                records.push(record);
                Ok(TxOutcome::Record { data_id })
            }
            Op::Grant { data_id, grantee, grantee_key } => {
                *trie = grant_access(trie, keys, data_id, grantee, grantee_key, &commit)?;
                Ok(TxOutcome::Ok)
            }
            Op::Revoke { data_id, grantee } => {
                *trie = revoke_access(trie, keys, data_id, grantee, &commit)?;
                Ok(TxOutcome::Ok)
            }
            Op::RegisterProgram { manifest, program } => {
                if !manifest.signature_valid() || hash(program) != manifest.code_digest || Program::from_bytes(program).is_err()
                {
                    return Err(TxFailure::BadManifest);
                }
                let rel = release_key(&manifest.app_id, manifest.version);
                if trie.get(&rel).is_some() {
                    return Err(TxFailure::DuplicateRelease);
                }
                let mut t = register_code(trie, manifest)?;
                t = t.insert(&program_key(&manifest.code_digest), program)?;
                *trie = t.insert(&rel, b"")?;
                Ok(TxOutcome::Registered { measurement: manifest.measurement() })
            }
            Op::Propose { action, approvers, threshold, expiry_blocks } => {
                let mut sorted = approvers.clone();
                sorted.sort();
                sorted.dedup();
                if sorted.len() != approvers.len() || *threshold == 0 || *threshold as usize > sorted.len() {
                    return Err(TxFailure::InvalidProposal);
                }
                let action_id = hash_parts(
                    "action",
                    &[action, &ctx.time.term.to_be_bytes(), &ctx.time.index.to_be_bytes()],
                );
                let expiry = expiry_blocks.unwrap_or(self.config.proposal_expiry_blocks);
                let proposal = ProcessProposal {
                    action_id,
                    action: action.clone(),
                    approvers: sorted,
                    threshold: *threshold,
                    approvals: Vec::new(),
                    status: ProposalStatus::Pending,
                    created_block: ctx.time.index,
                    expiry_block: ctx.time.index.saturating_add(expiry),
                };
                *trie = trie.insert(&proposal_key(&action_id), &proposal.to_bytes())?;
                Ok(TxOutcome::Proposal { action_id, status: ProposalStatus::Pending })
            }
            Op::Approve { action_id, approver, signature } => {
                let key = proposal_key(action_id);
                let mut p = trie
                    .get(&key)
                    .and_then(|b| ProcessProposal::from_bytes(b).ok())
                    .ok_or(TxFailure::UnknownAction)?;
                let fp = approver.fingerprint();
                if p.approvers.binary_search(&fp).is_err() {
                    return Err(TxFailure::NonApprover);
                }
                if !approver.verify(&approval_message(action_id), signature) {
                    return Err(TxFailure::BadApproval);
                }
                match p.status {
                    ProposalStatus::Executed | ProposalStatus::Expired => {
                        return Ok(TxOutcome::Proposal { action_id: *action_id, status: p.status })
                    }
                    _ if ctx.time.index > p.expiry_block => {
                        p.status = ProposalStatus::Expired;
                        *trie = trie.insert(&key, &p.to_bytes())?;
                        return Err(TxFailure::ProposalExpired);
                    }
                    _ => {}
                }
                if p.approvals.iter().any(|(a, _)| *a == fp) {
                    return Ok(TxOutcome::Proposal { action_id: *action_id, status: p.status });
                }
                p.approvals.push((fp, *signature));
                let mut t = trie.clone();
                if p.approvals.len() >= p.threshold as usize {
                    // Approved and executed in the same commit.
                    p.status = ProposalStatus::Executed;
                    let mut enc = Encoder::new();
                    enc.bytes(&p.action).u64(ctx.time.index);
                    t = t.insert(&executed_key(action_id), enc.as_slice())?;
                }
                *trie = t.insert(&key, &p.to_bytes())?;
                Ok(TxOutcome::Proposal { action_id: *action_id, status: p.status })
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn ingress(
        &self,
        trie: &Trie,
        keys: &mut KeyRegistry,
        payload: &Payload,
        source: &str,
        tx: &Transaction,
        sig: &crate::crypto::Signature,
        commit: &CommitContext<'_>,
    ) -> Result<(Trie, ProvenanceRecord), TxFailure> {
        let f = if self.config.verify_client_signatures { record_ingress } else { record_ingress_unchecked };
        Ok(f(trie, keys, payload, source, &tx.client, sig, &self.ingress_code, commit)?)
    }
}

/// Independent from-genesis replay of a committed log.
pub fn replay(genesis: &Genesis, config: ExecConfig, entries: &[LogEntry]) -> Result<ExecState, ApplyError> {
    let mut state = ExecState::genesis(genesis, config);
    for e in entries {
        state.apply(e)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attestation::Vendor;
    use crate::crypto::{SeededRng, VerifyKey};
    use crate::lineage::{trace_lineage, ProvenanceRecord};

    struct Harness {
        genesis: Genesis,
        log: Vec<LogEntry>,
        state: ExecState,
        leader: SigningKey,
        client: SigningKey,
        term: u64,
        nonce: u64,
    }

    impl Harness {
        fn new() -> Self {
            let mut rng = SeededRng::from_u64(77);
            let leader = SigningKey::generate(&mut rng);
            let genesis = Genesis {
                cluster_secret: [9; 32],
                members: vec![Member { platform_id: PlatformId(1), aik_vk: leader.verify_key(), vendor: Vendor::A }],
            };
            Self {
                state: ExecState::genesis(&genesis, ExecConfig::default()),
                genesis,
                log: Vec::new(),
                leader,
                client: SigningKey::generate(&mut rng),
                term: 1,
                nonce: 0,
            }
        }

        fn entry(&self, cmd: &Command) -> LogEntry {
            LogEntry::new_signed(self.term, self.state.last_applied + 1, cmd.to_bytes(), PlatformId(1), &self.leader)
        }

        fn submit(&mut self, op: Op) -> (TxOutcome, Vec<ProvenanceRecord>) {
            self.nonce += 1;
            let tx = Transaction::new_signed("app", op, &self.client, self.nonce);
            self.submit_tx(tx)
        }

        fn submit_tx(&mut self, tx: Transaction) -> (TxOutcome, Vec<ProvenanceRecord>) {
            let e = self.entry(&Command::Tx(tx));
            let out = self.state.apply(&e).unwrap();
            self.log.push(e);
            (out.result.unwrap().outcome, out.records)
        }

        fn register(&mut self, program: &Program, name: &str) -> Digest {
            let manifest = CodeManifest::new_signed(name, 1, program.code_digest(), &self.client);
            let (o, _) = self.submit(Op::RegisterProgram { manifest, program: program.to_bytes() });
            match o {
                TxOutcome::Registered { measurement } => measurement,
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn get_absent_leaves_root_unchanged() {
        let mut h = Harness::new();
        let before = h.state.root();
        let (o, _) = h.submit(Op::Get { key: b"missing".to_vec() });
        assert_eq!(o, TxOutcome::Value { value: None });
        assert_eq!(h.state.root(), before);
        h.submit(Op::Put { key: b"k".to_vec(), value: b"v".to_vec() });
        let (o, _) = h.submit(Op::Get { key: b"k".to_vec() });
        assert_eq!(o, TxOutcome::Value { value: Some(hex::encode(b"v")) });
        h.submit(Op::Delete { key: b"k".to_vec() });
        assert_eq!(h.submit(Op::Get { key: b"k".to_vec() }).0, TxOutcome::Value { value: None });
    }

    #[test]
    fn division_by_zero_is_a_recorded_failure() {
        let mut h = Harness::new();
        let m = h.register(&Program(vec![Instr::PushInt(1), Instr::PushInt(0), Instr::Div]), "div");
        let before = h.state.root();
        h.nonce += 1;
        let tx = Transaction::run("app", m, b"in", 100, &h.client, h.nonce);
        let id = tx.id();
        let (o, records) = h.submit_tx(tx);
        assert_eq!(o, TxOutcome::Failed(TxFailure::Program(ProgramFault::DivisionByZero(2))));
        assert!(records.is_empty());
        assert_eq!(h.state.root(), before);
        assert_eq!(h.state.results[&id].outcome, o);
    }

    #[test]
    fn run_emits_lineage_and_uses_epoch_seed() {
        let mut h = Harness::new();
        let m = h.register(&Program(vec![Instr::Seed(8)]), "random");
        let root_before = h.state.root();
        let epoch = h.state.last_applied + 1;
        h.nonce += 1;
        let (o, records) = h.submit_tx(Transaction::run("app", m, b"x", 10, &h.client, h.nonce));
        let expected = crate::crypto::rng_stream(EpochSeed::derive(&root_before, epoch).seed.as_bytes(), 0, 8);
        match o {
            TxOutcome::Output { data_id, output } => {
                assert_eq!(output, hex::encode(&expected));
                let g = trace_lineage(&h.state.trie, &data_id).unwrap();
                assert_eq!(g.records.len(), 2);
            }
            other => panic!("{other:?}"),
        }
        assert!(records.iter().all(|r| r.block_index == epoch));

        let root2 = h.state.root();
        let epoch2 = h.state.last_applied + 1;
        h.nonce += 1;
        let (o2, records2) = h.submit_tx(Transaction::run("app", m, b"x", 10, &h.client, h.nonce));
        let expected2 = crate::crypto::rng_stream(EpochSeed::derive(&root2, epoch2).seed.as_bytes(), 0, 8);
        assert_ne!(expected, expected2);
        assert!(matches!(o2, TxOutcome::Output { output, .. } if output == hex::encode(&expected2)));
        assert!(records2.iter().all(|r| r.block_index == epoch2));
    }

    #[test]
    fn unregistered_run_fails() {
        let mut h = Harness::new();
        let bogus = hash(b"nope");
        h.nonce += 1;
        let (o, _) = h.submit_tx(Transaction::run("app", bogus, b"x", 10, &h.client, h.nonce));
        assert_eq!(o, TxOutcome::Failed(TxFailure::UnregisteredCode(bogus)));
    }

    fn approvers(n: usize) -> Vec<SigningKey> {
        (0..n).map(|i| SigningKey::from_seed([i as u8 + 100; 32])).collect()
    }

    fn approve(h: &mut Harness, action_id: Digest, sk: &SigningKey) -> TxOutcome {
        let sig = sk.sign(&approval_message(&action_id));
        h.submit(Op::Approve { action_id, approver: sk.verify_key(), signature: sig }).0
    }

    fn propose(h: &mut Harness, keys: &[VerifyKey], m: u32) -> Digest {
        let fps = keys.iter().map(|k| k.fingerprint()).collect();
        match h.submit(Op::Propose { action: b"pay".to_vec(), approvers: fps, threshold: m, expiry_blocks: None }).0 {
            TxOutcome::Proposal { action_id, status: ProposalStatus::Pending } => action_id,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_approver() {
        let mut h = Harness::new();
        let a = approvers(1);
        let id = propose(&mut h, &[a[0].verify_key()], 1);
        assert_eq!(approve(&mut h, id, &a[0]), TxOutcome::Proposal { action_id: id, status: ProposalStatus::Executed });
        assert!(h.state.trie.get(&executed_key(&id)).is_some());
    }

    #[test]
    fn two_of_three() {
        let mut h = Harness::new();
        let a = approvers(3);
        let vks: Vec<_> = a.iter().map(|k| k.verify_key()).collect();
        let id = propose(&mut h, &vks, 2);
        let status = |o: TxOutcome| match o {
            TxOutcome::Proposal { status, .. } => status,
            other => panic!("{other:?}"),
        };
        assert_eq!(status(approve(&mut h, id, &a[0])), ProposalStatus::Pending);
        assert_eq!(status(approve(&mut h, id, &a[0])), ProposalStatus::Pending);
        assert_eq!(status(approve(&mut h, id, &a[1])), ProposalStatus::Executed);
        let exec = h.state.trie.get(&executed_key(&id)).unwrap().to_vec();
        let root = h.state.root();
        assert_eq!(status(approve(&mut h, id, &a[2])), ProposalStatus::Executed);
        assert_eq!(h.state.root(), root);
        assert_eq!(h.state.trie.get(&executed_key(&id)).unwrap(), exec.as_slice());

        let outsider = SigningKey::from_seed([1; 32]);
        let id2 = propose(&mut h, &vks, 2);
        let root = h.state.root();
        assert_eq!(approve(&mut h, id2, &outsider), TxOutcome::Failed(TxFailure::NonApprover));
        assert_eq!(h.state.root(), root);
        assert_eq!(approve(&mut h, hash(b"nothing"), &a[0]), TxOutcome::Failed(TxFailure::UnknownAction));
    }

    #[test]
    fn invalid_proposals_and_expiry() {
        let mut h = Harness::new();
        let a = approvers(2);
        let fp = a[0].verify_key().fingerprint();
        let (o, _) = h.submit(Op::Propose { action: vec![], approvers: vec![fp, fp], threshold: 1, expiry_blocks: None });
        assert_eq!(o, TxOutcome::Failed(TxFailure::InvalidProposal));
        let (o, _) = h.submit(Op::Propose { action: vec![], approvers: vec![fp], threshold: 2, expiry_blocks: None });
        assert_eq!(o, TxOutcome::Failed(TxFailure::InvalidProposal));

        let (o, _) = h.submit(Op::Propose { action: vec![1], approvers: vec![fp], threshold: 1, expiry_blocks: Some(1) });
        let TxOutcome::Proposal { action_id, .. } = o else { panic!() };
        h.submit(Op::Get { key: b"tick".to_vec() });
        h.submit(Op::Get { key: b"tick".to_vec() });
        assert_eq!(approve(&mut h, action_id, &a[0]), TxOutcome::Failed(TxFailure::ProposalExpired));
    }

    #[test]
    fn bad_tx_signature_recorded() {
        let mut h = Harness::new();
        let mut tx = Transaction::new_signed("app", Op::Get { key: b"k".to_vec() }, &h.client, 1);
        tx.app_id = "other".into();
        assert_eq!(h.submit_tx(tx).0, TxOutcome::Failed(TxFailure::BadSignature));
    }

    #[test]
    fn replicas_agree() {
        let mut h = Harness::new();
        let m = h.register(&Program(vec![Instr::Input(0), Instr::Seed(4), Instr::Concat]), "cat");
        for i in 0..20u64 {
            h.nonce += 1;
            let tx = if i % 3 == 0 {
                Transaction::run("app", m, &i.to_be_bytes(), 50, &h.client, h.nonce)
            } else {
                Transaction::ingest("app", &i.to_be_bytes(), "feed", &h.client, h.nonce)
            };
            h.submit_tx(tx);
        }
        let replica = replay(&h.genesis, ExecConfig::default(), &h.log).unwrap();
        assert_eq!(replica.root(), h.state.root());
        assert_eq!(replica.fingerprint(), h.state.fingerprint());
        assert_eq!(replica.emitted, h.state.emitted);
    }
}
