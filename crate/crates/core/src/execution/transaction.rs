use crate::attestation::CodeManifest;
use crate::codec::{CodecError, Decoder, Encoder};
use crate::consensus::{Exclusion, Member};
use crate::crypto::{hash, hash_parts, AeadKey, Digest, Signature, SigningKey, VerifyKey};
use crate::lineage::{ingress_message, Payload};
use crate::mpt_ledger::BlobRef;

const TX_MAGIC: &[u8; 4] = b"TXN1";
const TX_VERSION: u8 = 1;
const COMMAND_MAGIC: &[u8; 4] = b"CMND";
const COMMAND_VERSION: u8 = 1;

/// Source label under which RUN inputs enter the lineage.
pub const RUN_INPUT_SOURCE: &str = "run-input";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Put { key: Vec<u8>, value: Vec<u8> },
    Get { key: Vec<u8> },
    Delete { key: Vec<u8> },
    /// Runs a registered program on a client-supplied input. The input
    /// enters the lineage as an ingress record, so it carries the client's
    /// ingress signature.
    Run { measurement: Digest, input: Vec<u8>, step_budget: u32, input_sig: Signature },
    Propose { action: Vec<u8>, approvers: Vec<Digest>, threshold: u32, expiry_blocks: Option<u64> },
    Approve { action_id: Digest, approver: VerifyKey, signature: Signature },
    RegisterProgram { manifest: CodeManifest, program: Vec<u8> },
    Ingest { payload: Payload, source: String, ingress_sig: Signature },
    Transform { inputs: Vec<Digest>, measurement: Digest, step_budget: u32 },
    Grant { data_id: Digest, grantee: VerifyKey, grantee_key: AeadKey },
    Revoke { data_id: Digest, grantee: Digest },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Put { .. } => "put",
            Op::Get { .. } => "get",
            Op::Delete { .. } => "delete",
            Op::Run { .. } => "run",
            Op::Propose { .. } => "propose",
            Op::Approve { .. } => "approve",
            Op::RegisterProgram { .. } => "register-program",
            Op::Ingest { .. } => "ingest",
            Op::Transform { .. } => "transform",
            Op::Grant { .. } => "grant",
            Op::Revoke { .. } => "revoke",
        }
    }

    fn encode(&self, enc: &mut Encoder) {
        match self {
            Op::Put { key, value } => {
                enc.u8(1).bytes(key).bytes(value);
            }
            Op::Get { key } => {
                enc.u8(2).bytes(key);
            }
            Op::Delete { key } => {
                enc.u8(3).bytes(key);
            }
            Op::Run { measurement, input, step_budget, input_sig } => {
                enc.u8(4);
                measurement.encode(enc);
                enc.bytes(input).u32(*step_budget);
                input_sig.encode(enc);
            }
            Op::Propose { action, approvers, threshold, expiry_blocks } => {
                enc.u8(5).bytes(action).u32(approvers.len() as u32);
                approvers.iter().for_each(|a| a.encode(enc));
                enc.u32(*threshold);
                match expiry_blocks {
                    Some(b) => enc.u8(1).u64(*b),
                    None => enc.u8(0),
                };
            }
            Op::Approve { action_id, approver, signature } => {
                enc.u8(6);
                action_id.encode(enc);
                approver.encode(enc);
                signature.encode(enc);
            }
            Op::RegisterProgram { manifest, program } => {
                enc.u8(7);
                manifest.encode(enc);
                enc.bytes(program);
            }
            Op::Ingest { payload, source, ingress_sig } => {
                enc.u8(8);
                match payload {
                    Payload::Inline(b) => {
                        enc.u8(0).bytes(b);
                    }
                    Payload::Blob(r) => {
                        enc.u8(1);
                        r.encode(enc);
                    }
                }
                enc.str(source);
                ingress_sig.encode(enc);
            }
            Op::Transform { inputs, measurement, step_budget } => {
                enc.u8(9).u32(inputs.len() as u32);
                inputs.iter().for_each(|d| d.encode(enc));
                measurement.encode(enc);
                enc.u32(*step_budget);
            }
            Op::Grant { data_id, grantee, grantee_key } => {
                enc.u8(10);
                data_id.encode(enc);
                grantee.encode(enc);
                grantee_key.encode(enc);
            }
            Op::Revoke { data_id, grantee } => {
                enc.u8(11);
                data_id.encode(enc);
                grantee.encode(enc);
            }
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.u8()? {
            1 => Op::Put { key: dec.vec()?, value: dec.vec()? },
            2 => Op::Get { key: dec.vec()? },
            3 => Op::Delete { key: dec.vec()? },
            4 => Op::Run {
                measurement: Digest::decode(dec)?,
                input: dec.vec()?,
                step_budget: dec.u32()?,
                input_sig: Signature::decode(dec)?,
            },
            5 => {
                let action = dec.vec()?;
                let n = dec.count(Digest::ENCODED_LEN)?;
                let approvers = (0..n).map(|_| Digest::decode(dec)).collect::<Result<_, _>>()?;
                let threshold = dec.u32()?;
                let expiry_blocks = if dec.bool()? { Some(dec.u64()?) } else { None };
                Op::Propose { action, approvers, threshold, expiry_blocks }
            }
            6 => Op::Approve {
                action_id: Digest::decode(dec)?,
                approver: VerifyKey::decode(dec)?,
                signature: Signature::decode(dec)?,
            },
            7 => Op::RegisterProgram { manifest: CodeManifest::decode(dec)?, program: dec.vec()? },
            8 => {
                let payload = match dec.u8()? {
                    0 => Payload::Inline(dec.vec()?),
                    1 => Payload::Blob(BlobRef::decode(dec)?),
                    tag => return Err(CodecError::InvalidTag { what: "payload", tag }),
                };
                Op::Ingest { payload, source: dec.string()?, ingress_sig: Signature::decode(dec)? }
            }
            9 => {
                let n = dec.count(Digest::ENCODED_LEN)?;
                let inputs = (0..n).map(|_| Digest::decode(dec)).collect::<Result<_, _>>()?;
                Op::Transform { inputs, measurement: Digest::decode(dec)?, step_budget: dec.u32()? }
            }
            10 => Op::Grant {
                data_id: Digest::decode(dec)?,
                grantee: VerifyKey::decode(dec)?,
                grantee_key: AeadKey::decode(dec)?,
            },
            11 => Op::Revoke { data_id: Digest::decode(dec)?, grantee: Digest::decode(dec)? },
            tag => return Err(CodecError::InvalidTag { what: "op", tag }),
        })
    }
}

/// Message an approver signs to approve `action_id`.
pub fn approval_message(action_id: &Digest) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.str("approve");
    action_id.encode(&mut enc);
    enc.finish()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub app_id: String,
    pub op: Op,
    pub client: VerifyKey,
    /// Distinguishes otherwise identical submissions.
    pub nonce: u64,
    pub signature: Signature,
}

impl Transaction {
    fn signed_body(app_id: &str, op: &Op, client: &VerifyKey, nonce: u64) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("transaction").str(app_id);
        op.encode(&mut enc);
        client.encode(&mut enc);
        enc.u64(nonce);
        enc.finish()
    }

    pub fn new_signed(app_id: &str, op: Op, client: &SigningKey, nonce: u64) -> Self {
        let vk = client.verify_key();
        let signature = client.sign(&Self::signed_body(app_id, &op, &vk, nonce));
        Self { app_id: app_id.to_string(), op, client: vk, nonce, signature }
    }

    /// Ingest of an inline payload, with the ingress signature filled in.
    pub fn ingest(app_id: &str, payload: &[u8], source: &str, client: &SigningKey, nonce: u64) -> Self {
        let ingress_sig = client.sign(&ingress_message(&hash(payload), source));
        Self::new_signed(
            app_id,
            Op::Ingest { payload: Payload::Inline(payload.to_vec()), source: source.to_string(), ingress_sig },
            client,
            nonce,
        )
    }

    pub fn run(app_id: &str, measurement: Digest, input: &[u8], step_budget: u32, client: &SigningKey, nonce: u64) -> Self {
        let input_sig = client.sign(&ingress_message(&hash(input), RUN_INPUT_SOURCE));
        Self::new_signed(app_id, Op::Run { measurement, input: input.to_vec(), step_budget, input_sig }, client, nonce)
    }

    pub fn signature_valid(&self) -> bool {
        self.client.verify(&Self::signed_body(&self.app_id, &self.op, &self.client, self.nonce), &self.signature)
    }

    pub fn id(&self) -> Digest {
        hash_parts("tx-id", &[&Self::signed_body(&self.app_id, &self.op, &self.client, self.nonce)])
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.app_id);
        self.op.encode(enc);
        self.client.encode(enc);
        enc.u64(self.nonce);
        self.signature.encode(enc);
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            app_id: dec.string()?,
            op: Op::decode(dec)?,
            client: VerifyKey::decode(dec)?,
            nonce: dec.u64()?,
            signature: Signature::decode(dec)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(TX_MAGIC, TX_VERSION);
        self.encode(&mut enc);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::with_header(bytes, TX_MAGIC, TX_VERSION)?;
        let tx = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(tx)
    }
}

/// What a log entry carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    /// Committed by a new leader at the start of its term.
    Noop,
    Tx(Transaction),
    Admit(Member),
    Exclude(Exclusion),
    /// Records that the cluster secret was re-shared at `epoch`.
    ShardEpoch { epoch: u64, recipients: Vec<u32> },
}

impl Command {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(COMMAND_MAGIC, COMMAND_VERSION);
        match self {
            Command::Noop => {
                enc.u8(0);
            }
            Command::Tx(tx) => {
                enc.u8(1);
                tx.encode(&mut enc);
            }
            Command::Admit(m) => {
                enc.u8(2);
                m.encode(&mut enc);
            }
            Command::Exclude(x) => {
                enc.u8(3);
                x.encode(&mut enc);
            }
            Command::ShardEpoch { epoch, recipients } => {
                enc.u8(4).u64(*epoch).u32(recipients.len() as u32);
                recipients.iter().for_each(|r| {
                    enc.u32(*r);
                });
            }
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::with_header(bytes, COMMAND_MAGIC, COMMAND_VERSION)?;
        let cmd = match dec.u8()? {
            0 => Command::Noop,
            1 => Command::Tx(Transaction::decode(&mut dec)?),
            2 => Command::Admit(Member::decode(&mut dec)?),
            3 => Command::Exclude(Exclusion::decode(&mut dec)?),
            4 => {
                let epoch = dec.u64()?;
                let n = dec.count(4)?;
                let recipients = (0..n).map(|_| dec.u32()).collect::<Result<_, _>>()?;
                Command::ShardEpoch { epoch, recipients }
            }
            tag => return Err(CodecError::InvalidTag { what: "command", tag }),
        };
        dec.finish()?;
        Ok(cmd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attestation::PlatformId;
    use crate::consensus::ExclusionReason;
    use crate::crypto::SeededRng;

    #[test]
    fn every_op_round_trips() {
        let mut rng = SeededRng::from_u64(5);
        let sk = SigningKey::generate(&mut rng);
        let d = hash(b"d");
        let manifest = CodeManifest::new_signed("app", 1, d, &sk);
        let ops = vec![
            Op::Put { key: b"k".to_vec(), value: b"v".to_vec() },
            Op::Get { key: b"k".to_vec() },
            Op::Delete { key: b"k".to_vec() },
            Op::Run { measurement: d, input: vec![1], step_budget: 10, input_sig: sk.sign(b"x") },
            Op::Propose { action: b"a".to_vec(), approvers: vec![d, d], threshold: 1, expiry_blocks: Some(5) },
            Op::Approve { action_id: d, approver: sk.verify_key(), signature: sk.sign(b"y") },
            Op::RegisterProgram { manifest, program: vec![1, 2] },
            Op::Ingest { payload: Payload::Inline(vec![3]), source: "s".into(), ingress_sig: sk.sign(b"z") },
            Op::Ingest {
                payload: Payload::Blob(BlobRef { external_id: 3, digest: d, size: 9 }),
                source: "s".into(),
                ingress_sig: sk.sign(b"z"),
            },
            Op::Transform { inputs: vec![d], measurement: d, step_budget: 5 },
            Op::Grant { data_id: d, grantee: sk.verify_key(), grantee_key: AeadKey::generate(&mut rng) },
            Op::Revoke { data_id: d, grantee: d },
        ];
        for (i, op) in ops.into_iter().enumerate() {
            let tx = Transaction::new_signed("app", op, &sk, i as u64);
            assert!(tx.signature_valid());
            let back = Transaction::from_bytes(&tx.to_bytes()).unwrap();
            assert_eq!(back, tx);
            let cmd = Command::Tx(tx);
            assert_eq!(Command::from_bytes(&cmd.to_bytes()).unwrap(), cmd);
        }
        for cmd in [
            Command::Noop,
            Command::Admit(Member { platform_id: PlatformId(4), aik_vk: sk.verify_key(), vendor: crate::attestation::Vendor::B }),
            Command::Exclude(Exclusion { platform_id: PlatformId(2), reason: ExclusionReason::Drift, term: 3, evidence_milli: 1500 }),
            Command::ShardEpoch { epoch: 2, recipients: vec![1, 2, 3] },
        ] {
            assert_eq!(Command::from_bytes(&cmd.to_bytes()).unwrap(), cmd);
        }
    }

    #[test]
    fn tampered_transaction_fails_signature() {
        let sk = SigningKey::from_seed([1; 32]);
        let mut tx = Transaction::new_signed("app", Op::Get { key: b"k".to_vec() }, &sk, 0);
        tx.nonce = 1;
        assert!(!tx.signature_valid());
    }
}
