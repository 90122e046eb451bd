//! Provenance records and lineage over the ledger.
//!
//! Ledger layout:
//!
//! | key                              | value                          |
//! |----------------------------------|--------------------------------|
//! | `prov/` ‖ data_id                | [`ProvenanceRecord`]           |
//! | `data/` ‖ data_id                | sealed payload or [`BlobRef`]  |
//! | `code/` ‖ measurement            | [`CodeManifest`]               |
//! | `grant/` ‖ H(data_id ‖ grantee)  | [`GrantRecord`]                |
//! | `rev/` ‖ H(data_id ‖ grantee)    | [`RevocationRecord`]           |
//! | `sys/record-signer`              | record-signing [`VerifyKey`]   |
//!
//! Grant and revocation keys hash the composite so every key stays within
//! the 64-octet limit. Datum keys and wrapped grant keys live only in the
//! enclave-held [`KeyRegistry`]; revocation destroys key material, the
//! sealed payload stays on the ledger.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::attestation::{CodeManifest, PlatformId};
use crate::codec::{CodecError, Decoder, Encoder};
use crate::crypto::{
    aead_open, aead_seal, hash, hash_parts, AeadKey, Ciphertext, CryptoError, Digest, Nonce, Signature, SigningKey,
    VerifyKey,
};
use crate::mpt_ledger::{prove, verify_proof, BlobRef, InclusionProof, ProofRejection, RootHash, Trie, TrieError};

pub const RECORD_SIGNER_KEY: &[u8] = b"sys/record-signer";

const BUNDLE_MAGIC: &[u8; 4] = b"LBDL";
const BUNDLE_VERSION: u8 = 1;

pub fn prov_key(data_id: &Digest) -> Vec<u8> {
    [b"prov/".as_slice(), data_id.as_bytes()].concat()
}

pub fn data_key(data_id: &Digest) -> Vec<u8> {
    [b"data/".as_slice(), data_id.as_bytes()].concat()
}

pub fn code_key(measurement: &Digest) -> Vec<u8> {
    [b"code/".as_slice(), measurement.as_bytes()].concat()
}

fn grant_slot(data_id: &Digest, grantee: &Digest) -> Digest {
    hash_parts("grant-slot", &[data_id.as_bytes(), grantee.as_bytes()])
}

pub fn grant_key(data_id: &Digest, grantee: &Digest) -> Vec<u8> {
    [b"grant/".as_slice(), grant_slot(data_id, grantee).as_bytes()].concat()
}

pub fn revocation_key(data_id: &Digest, grantee: &Digest) -> Vec<u8> {
    [b"rev/".as_slice(), grant_slot(data_id, grantee).as_bytes()].concat()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct LogicalTime {
    pub term: u64,
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    ExternalIngress { source: String, client_vk: VerifyKey, client_sig: Signature },
    Derived,
}

/// Payload handed to ingress or produced by a transformation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Inline(Vec<u8>),
    Blob(BlobRef),
}

impl Payload {
    pub fn digest(&self) -> Digest {
        match self {
            Payload::Inline(bytes) => hash(bytes),
            Payload::Blob(r) => r.digest,
        }
    }
}

/// Message a client signs to vouch for an ingress payload.
pub fn ingress_message(payload_digest: &Digest, source_label: &str) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.str("ingress");
    payload_digest.encode(&mut enc);
    enc.str(source_label);
    enc.finish()
}

pub fn ingress_data_id(payload_digest: &Digest, source_label: &str, time: LogicalTime) -> Digest {
    hash_parts(
        "data-id",
        &[payload_digest.as_bytes(), source_label.as_bytes(), &time.term.to_be_bytes(), &time.index.to_be_bytes()],
    )
}

fn derived_data_id(payload_digest: &Digest, code: &Digest, inputs: &[Digest], time: LogicalTime) -> Digest {
    let inputs: Vec<u8> = inputs.iter().flat_map(|d| *d.as_bytes()).collect();
    hash_parts(
        "derived-data-id",
        &[payload_digest.as_bytes(), code.as_bytes(), &inputs, &time.term.to_be_bytes(), &time.index.to_be_bytes()],
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceRecord {
    pub record_id: Digest,
    pub data_id: Digest,
    pub payload_digest: Digest,
    pub origin: Origin,
    pub input_ids: Vec<Digest>,
    pub code_measurement: Digest,
    pub block_index: u64,
    pub logical_time: LogicalTime,
    pub producer: PlatformId,
    pub signature: Signature,
}

impl ProvenanceRecord {
    fn encode_body(&self, enc: &mut Encoder) {
        self.data_id.encode(enc);
        self.payload_digest.encode(enc);
        match &self.origin {
            Origin::ExternalIngress { source, client_vk, client_sig } => {
                enc.u8(0).str(source);
                client_vk.encode(enc);
                client_sig.encode(enc);
            }
            Origin::Derived => {
                enc.u8(1);
            }
        }
        enc.u32(self.input_ids.len() as u32);
        self.input_ids.iter().for_each(|d| d.encode(enc));
        self.code_measurement.encode(enc);
        enc.u64(self.block_index).u64(self.logical_time.term).u64(self.logical_time.index).u32(self.producer.0);
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("provenance-record");
        self.encode_body(&mut enc);
        enc.finish()
    }

    /// Fills `record_id` and `signature`.
    fn seal(mut self, signer: &SigningKey) -> Self {
        let body = self.body_bytes();
        self.record_id = hash(&body);
        self.signature = signer.sign(self.record_id.as_bytes());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.record_id.encode(&mut enc);
        self.encode_body(&mut enc);
        self.signature.encode(&mut enc);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let record_id = Digest::decode(&mut dec)?;
        let data_id = Digest::decode(&mut dec)?;
        let payload_digest = Digest::decode(&mut dec)?;
        let origin = match dec.u8()? {
            0 => Origin::ExternalIngress {
                source: dec.string()?,
                client_vk: VerifyKey::decode(&mut dec)?,
                client_sig: Signature::decode(&mut dec)?,
            },
            1 => Origin::Derived,
            tag => return Err(CodecError::InvalidTag { what: "origin", tag }),
        };
        let n = dec.count(Digest::ENCODED_LEN)?;
        let input_ids = (0..n).map(|_| Digest::decode(&mut dec)).collect::<Result<_, _>>()?;
        let code_measurement = Digest::decode(&mut dec)?;
        let block_index = dec.u64()?;
        let logical_time = LogicalTime { term: dec.u64()?, index: dec.u64()? };
        let producer = PlatformId(dec.u32()?);
        let signature = Signature::decode(&mut dec)?;
        dec.finish()?;
        Ok(Self {
            record_id,
            data_id,
            payload_digest,
            origin,
            input_ids,
            code_measurement,
            block_index,
            logical_time,
            producer,
            signature,
        })
    }

    pub fn is_ingress(&self) -> bool {
        matches!(self.origin, Origin::ExternalIngress { .. })
    }

    /// Structural invariants, signature and (for ingress) client signature.
    pub fn check(&self, signer: &VerifyKey) -> Result<(), Check> {
        if hash(&self.body_bytes()) != self.record_id {
            return Err(Check::RecordMismatch);
        }
        if !signer.verify(self.record_id.as_bytes(), &self.signature) {
            return Err(Check::BadSignature);
        }
        match &self.origin {
            Origin::ExternalIngress { source, client_vk, client_sig } => {
                if !self.input_ids.is_empty() {
                    return Err(Check::RecordMismatch);
                }
                if !client_vk.verify(&ingress_message(&self.payload_digest, source), client_sig) {
                    return Err(Check::BadClientSignature);
                }
            }
            Origin::Derived => {
                if self.input_ids.is_empty() {
                    return Err(Check::RecordMismatch);
                }
            }
        }
        Ok(())
    }
}

/// Where and when a record is committed, and who signs it.
#[derive(Debug, Clone, Copy)]
pub struct CommitContext<'a> {
    pub logical_time: LogicalTime,
    pub block_index: u64,
    pub producer: PlatformId,
    pub signer: &'a SigningKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrantRecord {
    pub data_id: Digest,
    pub grantee: Digest,
    pub granted_block: u64,
    pub revoked_block: Option<u64>,
}

impl GrantRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.data_id.encode(&mut enc);
        self.grantee.encode(&mut enc);
        enc.u64(self.granted_block);
        match self.revoked_block {
            Some(b) => enc.u8(1).u64(b),
            None => enc.u8(0),
        };
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let data_id = Digest::decode(&mut dec)?;
        let grantee = Digest::decode(&mut dec)?;
        let granted_block = dec.u64()?;
        let revoked_block = if dec.bool()? { Some(dec.u64()?) } else { None };
        dec.finish()?;
        Ok(Self { data_id, grantee, granted_block, revoked_block })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevocationRecord {
    pub data_id: Digest,
    pub grantee: Digest,
    pub block_index: u64,
    pub logical_time: LogicalTime,
}

impl RevocationRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.data_id.encode(&mut enc);
        self.grantee.encode(&mut enc);
        enc.u64(self.block_index).u64(self.logical_time.term).u64(self.logical_time.index);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let r = Self {
            data_id: Digest::decode(&mut dec)?,
            grantee: Digest::decode(&mut dec)?,
            block_index: dec.u64()?,
            logical_time: LogicalTime { term: dec.u64()?, index: dec.u64()? },
        };
        dec.finish()?;
        Ok(r)
    }
}

/// A grant as held by the enclave: the datum key wrapped for the grantee.
/// Revoked grants keep no key material.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessGrant {
    pub data_id: Digest,
    pub grantee: Digest,
    pub wrapped_key: Option<Ciphertext>,
    pub revoked: bool,
    pub revoked_block: Option<u64>,
}

/// Enclave-held key material. Every replica derives the same datum keys
/// from the cluster data secret, so the registry evolves identically under
/// the same committed log.
#[derive(Debug, Clone)]
pub struct KeyRegistry {
    master: Digest,
    data_keys: BTreeMap<Digest, AeadKey>,
    grants: BTreeMap<(Digest, Digest), AccessGrant>,
    wrap_counter: u64,
}

impl KeyRegistry {
    pub fn new(cluster_secret: &[u8]) -> Self {
        Self {
            master: hash_parts("data-master", &[cluster_secret]),
            data_keys: BTreeMap::new(),
            grants: BTreeMap::new(),
            wrap_counter: 0,
        }
    }

    /// The key a datum gets when it is first stored.
    pub fn derive_data_key(&self, data_id: &Digest) -> AeadKey {
        AeadKey::from_digest(&hash_parts("data-key", &[self.master.as_bytes(), data_id.as_bytes()]))
    }

    fn issue_data_key(&mut self, data_id: &Digest) -> AeadKey {
        let key = self.derive_data_key(data_id);
        self.data_keys.insert(*data_id, key.clone());
        key
    }

    pub fn data_key(&self, data_id: &Digest) -> Option<&AeadKey> {
        self.data_keys.get(data_id)
    }

    pub fn grant(&self, data_id: &Digest, grantee: &Digest) -> Option<&AccessGrant> {
        self.grants.get(&(*data_id, *grantee))
    }

    /// Order-independent digest of the registry contents, for replica
    /// comparison.
    pub fn fingerprint(&self) -> Digest {
        let mut enc = Encoder::new();
        enc.raw(self.master.as_bytes()).u64(self.wrap_counter);
        for (id, k) in &self.data_keys {
            enc.raw(id.as_bytes()).raw(k.as_bytes());
        }
        for ((d, g), grant) in &self.grants {
            enc.raw(d.as_bytes()).raw(g.as_bytes()).bool(grant.revoked);
            if let Some(w) = &grant.wrapped_key {
                w.encode(&mut enc);
            }
        }
        hash(enc.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LineageError {
    #[error("client signature does not verify")]
    BadClientSignature,
    #[error("unknown input {0}")]
    UnknownInput(Digest),
    #[error("code measurement {0} is not registered")]
    UnregisteredCode(Digest),
    #[error("derived records need at least one input")]
    NoInputs,
    #[error("unknown data id {0}")]
    UnknownDataId(Digest),
    #[error("no grant for this data id and grantee")]
    UnknownGrant,
    #[error("grant already revoked")]
    AlreadyRevoked,
    #[error("lineage graph contains a cycle")]
    Cycle,
    #[error(transparent)]
    Trie(#[from] TrieError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Writes the record-signing key so auditors can find it by proof.
pub fn install_record_signer(trie: &Trie, signer: &VerifyKey) -> Result<Trie, TrieError> {
    let mut enc = Encoder::new();
    signer.encode(&mut enc);
    trie.insert(RECORD_SIGNER_KEY, enc.as_slice())
}

pub fn register_code(trie: &Trie, manifest: &CodeManifest) -> Result<Trie, TrieError> {
    trie.insert(&code_key(&manifest.measurement()), &manifest.to_bytes())
}

pub fn is_code_registered(trie: &Trie, measurement: &Digest) -> bool {
    trie.get(&code_key(measurement)).is_some()
}

pub fn load_record(trie: &Trie, data_id: &Digest) -> Result<Option<ProvenanceRecord>, LineageError> {
    trie.get(&prov_key(data_id)).map(ProvenanceRecord::from_bytes).transpose().map_err(Into::into)
}

fn store_payload(trie: &Trie, keys: &mut KeyRegistry, data_id: &Digest, payload: &Payload) -> Result<Trie, LineageError> {
    let key = keys.issue_data_key(data_id);
    let value = match payload {
        Payload::Inline(bytes) => {
            let mut enc = Encoder::new();
            enc.u8(0);
            aead_seal(&key, Nonce::from_counter(0, 0), data_id.as_bytes(), bytes).encode(&mut enc);
            enc.finish()
        }
        Payload::Blob(r) => {
            let mut enc = Encoder::new();
            enc.u8(1);
            r.encode(&mut enc);
            enc.finish()
        }
    };
    Ok(trie.insert(&data_key(data_id), &value)?)
}

/// Stored form of a datum: sealed inline bytes or a blob reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoredPayload {
    Sealed(Ciphertext),
    Blob(BlobRef),
}

pub fn load_payload(trie: &Trie, data_id: &Digest) -> Result<StoredPayload, LineageError> {
    let raw = trie.get(&data_key(data_id)).ok_or(LineageError::UnknownDataId(*data_id))?;
    let mut dec = Decoder::new(raw);
    let stored = match dec.u8()? {
        0 => StoredPayload::Sealed(Ciphertext::decode(&mut dec)?),
        1 => StoredPayload::Blob(BlobRef::decode(&mut dec)?),
        tag => return Err(CodecError::InvalidTag { what: "stored payload", tag }.into()),
    };
    dec.finish()?;
    Ok(stored)
}

/// Decrypts an inline datum inside the enclave (transformations read their
/// inputs this way).
pub fn open_datum(trie: &Trie, keys: &KeyRegistry, data_id: &Digest) -> Result<Vec<u8>, LineageError> {
    let key = keys.data_key(data_id).ok_or(CryptoError::AuthenticationFailed)?;
    match load_payload(trie, data_id)? {
        StoredPayload::Sealed(ct) => Ok(aead_open(key, data_id.as_bytes(), &ct)?),
        StoredPayload::Blob(r) => Ok(r.digest.as_bytes().to_vec()),
    }
}

fn commit_record(
    trie: &Trie,
    keys: &mut KeyRegistry,
    record: ProvenanceRecord,
    payload: &Payload,
    ctx: &CommitContext<'_>,
) -> Result<(Trie, ProvenanceRecord), LineageError> {
    let record = record.seal(ctx.signer);
    let trie = store_payload(trie, keys, &record.data_id, payload)?;
    let trie = trie.insert(&prov_key(&record.data_id), &record.to_bytes())?;
    Ok((trie, record))
}

pub fn record_ingress(
    trie: &Trie,
    keys: &mut KeyRegistry,
    payload: &Payload,
    source_label: &str,
    client_vk: &VerifyKey,
    client_sig: &Signature,
    ingress_code: &Digest,
    ctx: &CommitContext<'_>,
) -> Result<(Trie, ProvenanceRecord), LineageError> {
    let payload_digest = payload.digest();
    if !client_vk.verify(&ingress_message(&payload_digest, source_label), client_sig) {
        return Err(LineageError::BadClientSignature);
    }
    record_ingress_unchecked(trie, keys, payload, source_label, client_vk, client_sig, ingress_code, ctx)
}

/// Ingress without the client-signature gate. Only the fault-injection
/// harness uses this, to show what the gate prevents.
#[doc(hidden)]
pub fn record_ingress_unchecked(
    trie: &Trie,
    keys: &mut KeyRegistry,
    payload: &Payload,
    source_label: &str,
    client_vk: &VerifyKey,
    client_sig: &Signature,
    ingress_code: &Digest,
    ctx: &CommitContext<'_>,
) -> Result<(Trie, ProvenanceRecord), LineageError> {
    if !is_code_registered(trie, ingress_code) {
        return Err(LineageError::UnregisteredCode(*ingress_code));
    }
    let payload_digest = payload.digest();
    let record = ProvenanceRecord {
        record_id: payload_digest,
        data_id: ingress_data_id(&payload_digest, source_label, ctx.logical_time),
        payload_digest,
        origin: Origin::ExternalIngress {
            source: source_label.to_string(),
            client_vk: client_vk.clone(),
            client_sig: *client_sig,
        },
        input_ids: Vec::new(),
        code_measurement: *ingress_code,
        block_index: ctx.block_index,
        logical_time: ctx.logical_time,
        producer: ctx.producer,
        signature: *client_sig,
    };
    commit_record(trie, keys, record, payload, ctx)
}

pub fn record_transformation(
    trie: &Trie,
    keys: &mut KeyRegistry,
    input_ids: &[Digest],
    code_measurement: &Digest,
    output: &Payload,
    ctx: &CommitContext<'_>,
) -> Result<(Trie, ProvenanceRecord), LineageError> {
    if input_ids.is_empty() {
        return Err(LineageError::NoInputs);
    }
    if let Some(missing) = input_ids.iter().find(|id| trie.get(&prov_key(id)).is_none()) {
        return Err(LineageError::UnknownInput(*missing));
    }
    if !is_code_registered(trie, code_measurement) {
        return Err(LineageError::UnregisteredCode(*code_measurement));
    }
    let payload_digest = output.digest();
    let record = ProvenanceRecord {
        record_id: payload_digest,
        data_id: derived_data_id(&payload_digest, code_measurement, input_ids, ctx.logical_time),
        payload_digest,
        origin: Origin::Derived,
        input_ids: input_ids.to_vec(),
        code_measurement: *code_measurement,
        block_index: ctx.block_index,
        logical_time: ctx.logical_time,
        producer: ctx.producer,
        signature: Signature::empty(),
    };
    commit_record(trie, keys, record, output, ctx)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineageNode {
    pub record_id: Digest,
    pub data_id: Digest,
    pub origin: String,
    pub inputs: Vec<Digest>,
    pub code: Digest,
    pub block: u64,
    pub time: LogicalTime,
    pub producer: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineageGraph {
    /// Ordered by (logical time, record id).
    pub records: Vec<ProvenanceRecord>,
    /// (input data id, output data id), sorted.
    pub edges: Vec<(Digest, Digest)>,
}

impl LineageGraph {
    pub fn roots(&self) -> impl Iterator<Item = &ProvenanceRecord> {
        self.records.iter().filter(|r| r.is_ingress())
    }

    pub fn is_acyclic(&self) -> bool {
        let mut indegree: BTreeMap<Digest, usize> = self.records.iter().map(|r| (r.data_id, 0)).collect();
        for (_, to) in &self.edges {
            *indegree.entry(*to).or_default() += 1;
        }
        let mut ready: Vec<Digest> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
        let mut seen = 0;
        while let Some(n) = ready.pop() {
            seen += 1;
            for (_, to) in self.edges.iter().filter(|(from, _)| *from == n) {
                let d = indegree.get_mut(to).expect("edge endpoint exists");
                *d -= 1;
                if *d == 0 {
                    ready.push(*to);
                }
            }
        }
        seen == indegree.len()
    }

    /// Canonical JSON with sorted keys.
    pub fn to_json(&self) -> String {
        let nodes: Vec<LineageNode> = self
            .records
            .iter()
            .map(|r| LineageNode {
                record_id: r.record_id,
                data_id: r.data_id,
                origin: match &r.origin {
                    Origin::ExternalIngress { source, .. } => format!("external-ingress:{source}"),
                    Origin::Derived => "derived".to_string(),
                },
                inputs: r.input_ids.clone(),
                code: r.code_measurement,
                block: r.block_index,
                time: r.logical_time,
                producer: r.producer.0,
            })
            .collect();
        let value = serde_json::json!({
            "nodes": nodes,
            "edges": self.edges.iter().map(|(a, b)| [a.to_hex(), b.to_hex()]).collect::<Vec<_>>(),
        });
        // serde_json's map is ordered by key, so this is canonical.
        serde_json::to_string(&value).expect("serializable")
    }
}

pub fn trace_lineage(trie: &Trie, data_id: &Digest) -> Result<LineageGraph, LineageError> {
    let mut found: BTreeMap<Digest, ProvenanceRecord> = BTreeMap::new();
    let mut stack = vec![*data_id];
    let mut edges = BTreeSet::new();
    while let Some(id) = stack.pop() {
        if found.contains_key(&id) {
            continue;
        }
        let record = match load_record(trie, &id)? {
            Some(r) => r,
            None if id == *data_id => return Err(LineageError::UnknownDataId(id)),
            None => return Err(LineageError::UnknownInput(id)),
        };
        for input in &record.input_ids {
            edges.insert((*input, id));
            stack.push(*input);
        }
        found.insert(id, record);
    }
    let mut records: Vec<ProvenanceRecord> = found.into_values().collect();
    records.sort_by_key(|r| (r.logical_time, r.record_id));
    let graph = LineageGraph { records, edges: edges.into_iter().collect() };
    if !graph.is_acyclic() {
        return Err(LineageError::Cycle);
    }
    Ok(graph)
}

/// Everything an auditor needs to check a datum's lineage offline against a
/// root hash: inclusion proofs for every ancestor record, for every code
/// manifest they reference and for the record-signing key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceBundle {
    pub data_id: Digest,
    pub records: Vec<InclusionProof>,
    pub code: Vec<InclusionProof>,
    pub signer: InclusionProof,
}

pub fn build_bundle(trie: &Trie, data_id: &Digest) -> Result<ProvenanceBundle, LineageError> {
    let graph = trace_lineage(trie, data_id)?;
    let records = graph.records.iter().map(|r| prove(trie, &prov_key(&r.data_id))).collect();
    let measurements: BTreeSet<Digest> = graph.records.iter().map(|r| r.code_measurement).collect();
    let code = measurements.iter().map(|m| prove(trie, &code_key(m))).collect();
    Ok(ProvenanceBundle { data_id: *data_id, records, code, signer: prove(trie, RECORD_SIGNER_KEY) })
}

impl ProvenanceBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(BUNDLE_MAGIC, BUNDLE_VERSION);
        self.data_id.encode(&mut enc);
        enc.u32(self.records.len() as u32);
        self.records.iter().for_each(|p| p.encode(&mut enc));
        enc.u32(self.code.len() as u32);
        self.code.iter().for_each(|p| p.encode(&mut enc));
        self.signer.encode(&mut enc);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::with_header(bytes, BUNDLE_MAGIC, BUNDLE_VERSION)?;
        let data_id = Digest::decode(&mut dec)?;
        let n = dec.count(9)?;
        let records = (0..n).map(|_| InclusionProof::decode(&mut dec)).collect::<Result<_, _>>()?;
        let c = dec.count(9)?;
        let code = (0..c).map(|_| InclusionProof::decode(&mut dec)).collect::<Result<_, _>>()?;
        let signer = InclusionProof::decode(&mut dec)?;
        dec.finish()?;
        Ok(Self { data_id, records, code, signer })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    BundleMalformed,
    SignerKey,
    Inclusion(ProofRejection),
    MissingRecord,
    RecordMismatch,
    BadSignature,
    BadClientSignature,
    UnregisteredCode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Error)]
#[error("{check:?} at record {record:?}")]
pub struct ProvenanceRejection {
    /// Data id of the first failing record, when the failure is attributable.
    pub record: Option<Digest>,
    pub check: Check,
}

fn reject(record: Option<Digest>, check: Check) -> ProvenanceRejection {
    ProvenanceRejection { record, check }
}

/// Offline audit: accepts iff every ancestor of `data_id` has a verifying
/// inclusion proof against `root`, a valid producer signature and a
/// registered code measurement, and the bundle holds nothing else.
pub fn verify_provenance(data_id: &Digest, root: &RootHash, bundle: &ProvenanceBundle) -> Result<(), ProvenanceRejection> {
    if bundle.data_id != *data_id {
        return Err(reject(Some(*data_id), Check::MissingRecord));
    }
    // Inclusion first: proofs are cheap and catch most tampering.
    if bundle.signer.key != RECORD_SIGNER_KEY {
        return Err(reject(None, Check::SignerKey));
    }
    verify_proof(root, &bundle.signer).map_err(|e| reject(None, Check::Inclusion(e)))?;
    let signer = bundle
        .signer
        .value
        .as_deref()
        .and_then(|v| {
            let mut dec = Decoder::new(v);
            let vk = VerifyKey::decode(&mut dec).ok()?;
            dec.finish().ok()?;
            Some(vk)
        })
        .ok_or(reject(None, Check::SignerKey))?;

    let mut records: BTreeMap<Digest, ProvenanceRecord> = BTreeMap::new();
    for proof in &bundle.records {
        let id = proof
            .key
            .strip_prefix(b"prov/".as_slice())
            .and_then(|k| <[u8; 32]>::try_from(k).ok())
            .map(|b| Digest::from_bytes(crate::crypto::DEFAULT_HASH, b).expect("default hash"))
            .ok_or(reject(None, Check::BundleMalformed))?;
        verify_proof(root, proof).map_err(|e| reject(Some(id), Check::Inclusion(e)))?;
        let value = proof.value.as_deref().ok_or(reject(Some(id), Check::MissingRecord))?;
        let record = ProvenanceRecord::from_bytes(value).map_err(|_| reject(Some(id), Check::RecordMismatch))?;
        if record.data_id != id {
            return Err(reject(Some(id), Check::RecordMismatch));
        }
        if records.insert(id, record).is_some() {
            return Err(reject(Some(id), Check::BundleMalformed));
        }
    }
    let mut code: BTreeSet<Digest> = BTreeSet::new();
    for proof in &bundle.code {
        let m = proof
            .key
            .strip_prefix(b"code/".as_slice())
            .and_then(|k| <[u8; 32]>::try_from(k).ok())
            .map(|b| Digest::from_bytes(crate::crypto::DEFAULT_HASH, b).expect("default hash"))
            .ok_or(reject(None, Check::BundleMalformed))?;
        verify_proof(root, proof).map_err(|e| reject(None, Check::Inclusion(e)))?;
        match proof.value.as_deref() {
            Some(v) if hash(v) == m && CodeManifest::from_bytes(v).is_ok() => {}
            _ => return Err(reject(None, Check::UnregisteredCode)),
        }
        if !code.insert(m) {
            return Err(reject(None, Check::BundleMalformed));
        }
    }

    // Walk the ancestor closure in bundle order.
    let mut needed = BTreeSet::from([*data_id]);
    let mut frontier = vec![*data_id];
    while let Some(id) = frontier.pop() {
        let r = records.get(&id).ok_or(reject(Some(id), Check::MissingRecord))?;
        for input in &r.input_ids {
            if needed.insert(*input) {
                frontier.push(*input);
            }
        }
    }
    if needed.len() != records.len() {
        return Err(reject(None, Check::BundleMalformed));
    }
    let mut used_code = BTreeSet::new();
    for proof in &bundle.records {
        let record = &records[&ProvenanceRecord::from_bytes(proof.value.as_deref().expect("checked")).expect("checked").data_id];
        let id = Some(record.data_id);
        record.check(&signer).map_err(|c| reject(id, c))?;
        if !code.contains(&record.code_measurement) {
            return Err(reject(id, Check::UnregisteredCode));
        }
        used_code.insert(record.code_measurement);
    }
    if used_code != code {
        return Err(reject(None, Check::BundleMalformed));
    }
    Ok(())
}

pub fn grant_access(
    trie: &Trie,
    keys: &mut KeyRegistry,
    data_id: &Digest,
    grantee: &VerifyKey,
    grantee_key: &AeadKey,
    ctx: &CommitContext<'_>,
) -> Result<Trie, LineageError> {
    let datum_key = keys.data_key(data_id).cloned().ok_or(LineageError::UnknownDataId(*data_id))?;
    let fp = grantee.fingerprint();
    if keys.grants.get(&(*data_id, fp)).is_some_and(|g| g.revoked) {
        return Err(LineageError::AlreadyRevoked);
    }
    keys.wrap_counter += 1;
    let wrapped = aead_seal(grantee_key, Nonce::from_counter(1, keys.wrap_counter), &grant_key(data_id, &fp), datum_key.as_bytes());
    keys.grants.insert(
        (*data_id, fp),
        AccessGrant { data_id: *data_id, grantee: fp, wrapped_key: Some(wrapped), revoked: false, revoked_block: None },
    );
    let record = GrantRecord { data_id: *data_id, grantee: fp, granted_block: ctx.block_index, revoked_block: None };
    Ok(trie.insert(&grant_key(data_id, &fp), &record.to_bytes())?)
}

/// Grantee read path: unwrap the datum key with the grantee's channel key,
/// then open the sealed payload.
pub fn open_as_grantee(
    trie: &Trie,
    keys: &KeyRegistry,
    data_id: &Digest,
    grantee: &Digest,
    grantee_key: &AeadKey,
) -> Result<Vec<u8>, LineageError> {
    let wrapped = keys
        .grant(data_id, grantee)
        .and_then(|g| g.wrapped_key.as_ref())
        .ok_or(CryptoError::AuthenticationFailed)?;
    let raw = aead_open(grantee_key, &grant_key(data_id, grantee), wrapped)?;
    let key = AeadKey::from_bytes(raw.try_into().map_err(|_| CryptoError::AuthenticationFailed)?);
    match load_payload(trie, data_id)? {
        StoredPayload::Sealed(ct) => Ok(aead_open(&key, data_id.as_bytes(), &ct)?),
        StoredPayload::Blob(r) => Ok(r.digest.as_bytes().to_vec()),
    }
}

pub fn revoke_access(
    trie: &Trie,
    keys: &mut KeyRegistry,
    data_id: &Digest,
    grantee: &Digest,
    ctx: &CommitContext<'_>,
) -> Result<Trie, LineageError> {
    let grant = keys.grants.get_mut(&(*data_id, *grantee)).ok_or(LineageError::UnknownGrant)?;
    if grant.revoked {
        return Err(LineageError::AlreadyRevoked);
    }
    grant.revoked = true;
    grant.revoked_block = Some(ctx.block_index);
    grant.wrapped_key = None;

    let gk = grant_key(data_id, grantee);
    let mut record = trie
        .get(&gk)
        .map(GrantRecord::from_bytes)
        .transpose()?
        .ok_or(LineageError::UnknownGrant)?;
    record.revoked_block = Some(ctx.block_index);
    let revocation =
        RevocationRecord { data_id: *data_id, grantee: *grantee, block_index: ctx.block_index, logical_time: ctx.logical_time };
    let trie = trie.insert(&gk, &record.to_bytes())?;
    Ok(trie.insert(&revocation_key(data_id, grantee), &revocation.to_bytes())?)
}

/// Grant records on the ledger for `data_id` that are not revoked.
pub fn active_grants(trie: &Trie, data_id: &Digest) -> Vec<GrantRecord> {
    trie.scan_prefix(b"grant/")
        .into_iter()
        .filter_map(|(_, v)| GrantRecord::from_bytes(&v).ok())
        .filter(|g| g.data_id == *data_id && g.revoked_block.is_none())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SeededRng;

    struct World {
        trie: Trie,
        keys: KeyRegistry,
        signer: SigningKey,
        client: SigningKey,
        ingress_code: Digest,
        transform_code: Digest,
        index: u64,
    }

    impl World {
        fn new() -> Self {
            let mut rng = SeededRng::from_u64(21);
            let signer = SigningKey::generate(&mut rng);
            let client = SigningKey::generate(&mut rng);
            let author = SigningKey::generate(&mut rng);
            let ingress = CodeManifest::new_signed("ingress", 1, hash(b"ingress"), &author);
            let transform = CodeManifest::new_signed("transform", 1, hash(b"transform"), &author);
            let trie = install_record_signer(&Trie::new(), &signer.verify_key()).unwrap();
            let trie = register_code(&trie, &ingress).unwrap();
            let trie = register_code(&trie, &transform).unwrap();
            Self {
                trie,
                keys: KeyRegistry::new(b"cluster secret"),
                signer,
                client,
                ingress_code: ingress.measurement(),
                transform_code: transform.measurement(),
                index: 0,
            }
        }

        fn ctx(&mut self) -> CommitContext<'_> {
            self.index += 1;
            CommitContext {
                logical_time: LogicalTime { term: 1, index: self.index },
                block_index: self.index,
                producer: PlatformId(1),
                signer: &self.signer,
            }
        }

        fn ingest(&mut self, payload: &[u8], source: &str) -> ProvenanceRecord {
            let p = Payload::Inline(payload.to_vec());
            let sig = self.client.sign(&ingress_message(&p.digest(), source));
            let vk = self.client.verify_key();
            let (trie, keys, code) = (self.trie.clone(), &mut self.keys.clone(), self.ingress_code);
            let ctx = self.ctx();
            let (t, r) = record_ingress(&trie, keys, &p, source, &vk, &sig, &code, &ctx).unwrap();
            let keys = keys.clone();
            self.trie = t;
            self.keys = keys;
            r
        }

        fn transform(&mut self, inputs: &[Digest], out: &[u8]) -> Result<ProvenanceRecord, LineageError> {
            let (trie, mut keys, code) = (self.trie.clone(), self.keys.clone(), self.transform_code);
            let ctx = self.ctx();
            let (t, r) = record_transformation(&trie, &mut keys, inputs, &code, &Payload::Inline(out.to_vec()), &ctx)?;
            self.trie = t;
            self.keys = keys;
            Ok(r)
        }
    }

    #[test]
    fn ingress_contract() {
        let mut w = World::new();
        let r = w.ingest(b"reading", "sensor-1");
        assert!(r.is_ingress());
        assert!(r.input_ids.is_empty());
        assert_eq!(open_datum(&w.trie, &w.keys, &r.data_id).unwrap(), b"reading");

        let forged = w.client.sign(b"something else");
        let vk = w.client.verify_key();
        let p = Payload::Inline(b"fake".to_vec());
        let (trie, mut keys, code) = (w.trie.clone(), w.keys.clone(), w.ingress_code);
        let ctx = w.ctx();
        assert_eq!(
            record_ingress(&trie, &mut keys, &p, "sensor-1", &vk, &forged, &code, &ctx).unwrap_err(),
            LineageError::BadClientSignature
        );
    }

    #[test]
    fn identical_payloads_from_different_sources_are_distinct() {
        let mut w = World::new();
        let a = w.ingest(b"same", "source-a");
        let b = w.ingest(b"same", "source-b");
        assert_ne!(a.data_id, b.data_id);
        assert_eq!(a.data_id, ingress_data_id(&hash(b"same"), "source-a", a.logical_time));
        assert_eq!(b.data_id, ingress_data_id(&hash(b"same"), "source-b", b.logical_time));
    }

    #[test]
    fn chain_and_diamond_traces() {
        let mut w = World::new();
        let a = w.ingest(b"A", "src");
        let b = w.transform(&[a.data_id], b"B").unwrap();
        let c = w.transform(&[b.data_id], b"C").unwrap();
        let g = trace_lineage(&w.trie, &c.data_id).unwrap();
        let ids: Vec<_> = g.records.iter().map(|r| r.data_id).collect();
        assert_eq!(ids, vec![a.data_id, b.data_id, c.data_id]);
        let mut expected = vec![(a.data_id, b.data_id), (b.data_id, c.data_id)];
        expected.sort();
        assert_eq!(g.edges, expected);
        assert!(g.records.windows(2).all(|p| p[0].logical_time < p[1].logical_time));

        let b2 = w.transform(&[a.data_id], b"B2").unwrap();
        let c2 = w.transform(&[a.data_id], b"C2").unwrap();
        let d = w.transform(&[b2.data_id, c2.data_id], b"D").unwrap();
        let g = trace_lineage(&w.trie, &d.data_id).unwrap();
        assert_eq!(g.records.len(), 4);
        assert_eq!(g.edges.len(), 4);
        assert!(g.is_acyclic());
        assert_eq!(g.to_json(), trace_lineage(&w.trie, &d.data_id).unwrap().to_json());

        let single = trace_lineage(&w.trie, &a.data_id).unwrap();
        assert_eq!(single.records.len(), 1);
        assert!(single.edges.is_empty());
    }

    #[test]
    fn transformation_errors() {
        let mut w = World::new();
        let ghost = hash(b"ghost");
        assert_eq!(w.transform(&[ghost], b"x").unwrap_err(), LineageError::UnknownInput(ghost));
        assert_eq!(w.transform(&[], b"x").unwrap_err(), LineageError::NoInputs);
        let a = w.ingest(b"A", "src");
        let (trie, mut keys) = (w.trie.clone(), w.keys.clone());
        let bogus = hash(b"unregistered");
        let ctx = w.ctx();
        assert_eq!(
            record_transformation(&trie, &mut keys, &[a.data_id], &bogus, &Payload::Inline(vec![1]), &ctx).unwrap_err(),
            LineageError::UnregisteredCode(bogus)
        );
        assert_eq!(trace_lineage(&w.trie, &ghost).unwrap_err(), LineageError::UnknownDataId(ghost));
    }

    #[test]
    fn offline_verification() {
        let mut w = World::new();
        let a = w.ingest(b"A", "src");
        let b = w.transform(&[a.data_id], b"B").unwrap();
        let root = w.trie.root_hash();
        let bundle = build_bundle(&w.trie, &b.data_id).unwrap();
        assert_eq!(verify_provenance(&b.data_id, &root, &bundle), Ok(()));
        let decoded = ProvenanceBundle::from_bytes(&bundle.to_bytes()).unwrap();
        assert_eq!(decoded, bundle);

        // A forged snapshot in which a record's signature is flipped: the
        // root is recomputed over the forgery, so only the signature check
        // can catch it.
        let mut forged = load_record(&w.trie, &a.data_id).unwrap().unwrap();
        forged.signature = forged.signature.with_bit_flipped(0);
        let forged_trie = w.trie.insert(&prov_key(&a.data_id), &forged.to_bytes()).unwrap();
        let forged_bundle = build_bundle(&forged_trie, &b.data_id).unwrap();
        assert_eq!(
            verify_provenance(&b.data_id, &forged_trie.root_hash(), &forged_bundle),
            Err(ProvenanceRejection { record: Some(a.data_id), check: Check::BadSignature })
        );
    }

    #[test]
    fn unregistered_code_rejected_offline() {
        let mut w = World::new();
        let a = w.ingest(b"A", "src");
        // Forge a record whose code was never registered, signed by the real signer.
        let bogus = hash(b"never registered");
        let mut forged = ProvenanceRecord {
            record_id: bogus,
            data_id: hash(b"forged output"),
            payload_digest: hash(b"x"),
            origin: Origin::Derived,
            input_ids: vec![a.data_id],
            code_measurement: bogus,
            block_index: 99,
            logical_time: LogicalTime { term: 1, index: 99 },
            producer: PlatformId(1),
            signature: w.signer.sign(b""),
        };
        forged = forged.seal(&w.signer);
        let trie = w.trie.insert(&prov_key(&forged.data_id), &forged.to_bytes()).unwrap();
        let mut bundle = build_bundle(&trie, &forged.data_id).unwrap();
        assert!(matches!(
            verify_provenance(&forged.data_id, &trie.root_hash(), &bundle),
            Err(ProvenanceRejection { check: Check::UnregisteredCode, .. })
        ));
        bundle.code.retain(|p| p.value.is_some());
        assert_eq!(
            verify_provenance(&forged.data_id, &trie.root_hash(), &bundle),
            Err(ProvenanceRejection { record: Some(forged.data_id), check: Check::UnregisteredCode })
        );
    }

    #[test]
    fn grant_and_revoke() {
        let mut w = World::new();
        let a = w.ingest(b"secret", "src");
        let mut rng = SeededRng::from_u64(99);
        let grantee = SigningKey::generate(&mut rng).verify_key();
        let channel = AeadKey::generate(&mut rng);
        let (trie, mut keys) = (w.trie.clone(), w.keys.clone());
        let ctx = w.ctx();
        let trie = grant_access(&trie, &mut keys, &a.data_id, &grantee, &channel, &ctx).unwrap();
        let fp = grantee.fingerprint();
        assert_eq!(open_as_grantee(&trie, &keys, &a.data_id, &fp, &channel).unwrap(), b"secret");
        assert_eq!(active_grants(&trie, &a.data_id).len(), 1);

        let ctx = w.ctx();
        let block = ctx.block_index;
        let trie = revoke_access(&trie, &mut keys, &a.data_id, &fp, &ctx).unwrap();
        assert_eq!(
            open_as_grantee(&trie, &keys, &a.data_id, &fp, &channel).unwrap_err(),
            LineageError::Crypto(CryptoError::AuthenticationFailed)
        );
        assert!(active_grants(&trie, &a.data_id).is_empty());
        let proof = prove(&trie, &revocation_key(&a.data_id, &fp));
        assert_eq!(verify_proof(&trie.root_hash(), &proof), Ok(()));
        let rev = RevocationRecord::from_bytes(proof.value.as_deref().unwrap()).unwrap();
        assert_eq!(rev.block_index, block);

        let ctx = w.ctx();
        assert_eq!(revoke_access(&trie, &mut keys, &a.data_id, &fp, &ctx).unwrap_err(), LineageError::AlreadyRevoked);
        let other = hash(b"nobody");
        assert_eq!(revoke_access(&trie, &mut keys, &a.data_id, &other, &ctx).unwrap_err(), LineageError::UnknownGrant);
    }
}
