use serde::Serialize;

use super::types::LogEntry;
use crate::attestation::{AttestationQuote, PlatformId, NONCE_LEN};
use crate::codec::{CodecError, Decoder, Encoder};
use crate::crypto::{hash_parts, Digest, Signature, SigningKey, VerifyKey};

const MESSAGE_MAGIC: &[u8; 4] = b"RAFT";
const MESSAGE_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoteDenial {
    StaleTerm,
    FailedAttestation,
    AlreadyVoted,
    LogBehind,
}

impl VoteDenial {
    fn code(self) -> u8 {
        match self {
            VoteDenial::StaleTerm => 1,
            VoteDenial::FailedAttestation => 2,
            VoteDenial::AlreadyVoted => 3,
            VoteDenial::LogBehind => 4,
        }
    }

    fn from_code(c: u8) -> Result<Option<Self>, CodecError> {
        Ok(match c {
            0 => None,
            1 => Some(VoteDenial::StaleTerm),
            2 => Some(VoteDenial::FailedAttestation),
            3 => Some(VoteDenial::AlreadyVoted),
            4 => Some(VoteDenial::LogBehind),
            tag => return Err(CodecError::InvalidTag { what: "vote denial", tag }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AppendRejection {
    StaleTerm,
    LogMismatch,
    BadSignature,
    Contradictory,
}

impl AppendRejection {
    fn code(self) -> u8 {
        match self {
            AppendRejection::StaleTerm => 1,
            AppendRejection::LogMismatch => 2,
            AppendRejection::BadSignature => 3,
            AppendRejection::Contradictory => 4,
        }
    }

    fn from_code(c: u8) -> Result<Option<Self>, CodecError> {
        Ok(match c {
            0 => None,
            1 => Some(AppendRejection::StaleTerm),
            2 => Some(AppendRejection::LogMismatch),
            3 => Some(AppendRejection::BadSignature),
            4 => Some(AppendRejection::Contradictory),
            tag => return Err(CodecError::InvalidTag { what: "append rejection", tag }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    RequestVote { last_log_index: u64, last_log_term: u64, quote: Box<AttestationQuote> },
    Vote { denial: Option<VoteDenial> },
    AppendEntries { prev_index: u64, prev_term: u64, entries: Vec<LogEntry>, leader_commit: u64 },
    AppendReply { rejection: Option<AppendRejection>, match_index: u64, hint: u64 },
}

/// A signed consensus message. `sent_local` is the sender's local clock,
/// which receivers use for drift detection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub from: PlatformId,
    pub to: PlatformId,
    pub term: u64,
    pub sent_local: u64,
    pub body: Body,
    pub signature: Signature,
}

/// What a vote request's quote must bind.
pub fn vote_request_digest(term: u64, candidate: PlatformId, last_log_index: u64, last_log_term: u64) -> Digest {
    hash_parts(
        "vote-request",
        &[&term.to_be_bytes(), &candidate.0.to_be_bytes(), &last_log_index.to_be_bytes(), &last_log_term.to_be_bytes()],
    )
}

/// Freshness nonce for a vote request quote: bound to the term.
pub fn vote_nonce(term: u64, candidate: PlatformId) -> [u8; NONCE_LEN] {
    let d = hash_parts("vote-nonce", &[&term.to_be_bytes(), &candidate.0.to_be_bytes()]);
    let mut n = [0u8; NONCE_LEN];
    n.copy_from_slice(&d.as_bytes()[..NONCE_LEN]);
    n
}

impl Message {
    fn encode_unsigned(&self, enc: &mut Encoder) {
        enc.u32(self.from.0).u32(self.to.0).u64(self.term).u64(self.sent_local);
        match &self.body {
            Body::RequestVote { last_log_index, last_log_term, quote } => {
                enc.u8(0).u64(*last_log_index).u64(*last_log_term);
                quote.encode(enc);
            }
            Body::Vote { denial } => {
                enc.u8(1).u8(denial.map_or(0, VoteDenial::code));
            }
            Body::AppendEntries { prev_index, prev_term, entries, leader_commit } => {
                enc.u8(2).u64(*prev_index).u64(*prev_term).u32(entries.len() as u32);
                entries.iter().for_each(|e| e.encode(enc));
                enc.u64(*leader_commit);
            }
            Body::AppendReply { rejection, match_index, hint } => {
                enc.u8(3).u8(rejection.map_or(0, AppendRejection::code)).u64(*match_index).u64(*hint);
            }
        }
    }

    fn signing_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("raft-message");
        self.encode_unsigned(&mut enc);
        enc.finish()
    }

    pub fn new_signed(from: PlatformId, to: PlatformId, term: u64, sent_local: u64, body: Body, aik: &SigningKey) -> Self {
        let mut m = Self { from, to, term, sent_local, body, signature: Signature::empty() };
        m.signature = aik.sign(&m.signing_bytes());
        m
    }

    pub fn verify(&self, vk: &VerifyKey) -> bool {
        vk.verify(&self.signing_bytes(), &self.signature)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(MESSAGE_MAGIC, MESSAGE_VERSION);
        self.encode_unsigned(&mut enc);
        self.signature.encode(&mut enc);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::with_header(bytes, MESSAGE_MAGIC, MESSAGE_VERSION)?;
        let from = PlatformId(dec.u32()?);
        let to = PlatformId(dec.u32()?);
        let term = dec.u64()?;
        let sent_local = dec.u64()?;
        let body = match dec.u8()? {
            0 => Body::RequestVote {
                last_log_index: dec.u64()?,
                last_log_term: dec.u64()?,
                quote: Box::new(AttestationQuote::decode(&mut dec)?),
            },
            1 => Body::Vote { denial: VoteDenial::from_code(dec.u8()?)? },
            2 => {
                let prev_index = dec.u64()?;
                let prev_term = dec.u64()?;
                let n = dec.count(1)?;
                let entries = (0..n).map(|_| LogEntry::decode(&mut dec)).collect::<Result<_, _>>()?;
                Body::AppendEntries { prev_index, prev_term, entries, leader_commit: dec.u64()? }
            }
            3 => Body::AppendReply {
                rejection: AppendRejection::from_code(dec.u8()?)?,
                match_index: dec.u64()?,
                hint: dec.u64()?,
            },
            tag => return Err(CodecError::InvalidTag { what: "message body", tag }),
        };
        let signature = Signature::decode(&mut dec)?;
        dec.finish()?;
        Ok(Self { from, to, term, sent_local, body, signature })
    }
}
