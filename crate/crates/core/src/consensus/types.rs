use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::{PlatformId, Vendor};
use crate::codec::{CodecError, Decoder, Encoder};
use crate::crypto::{Signature, SigningKey, VerifyKey};
use crate::mpt_ledger::quorum_size;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Member {
    pub platform_id: PlatformId,
    pub aik_vk: VerifyKey,
    pub vendor: Vendor,
}

impl Member {
    pub fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.platform_id.0);
        self.aik_vk.encode(enc);
        enc.u8(self.vendor.code());
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self { platform_id: PlatformId(dec.u32()?), aik_vk: VerifyKey::decode(dec)?, vendor: Vendor::from_code(dec.u8()?)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    Drift,
    CommAnomaly,
    FailedAttestation,
}

impl ExclusionReason {
    pub fn code(self) -> u8 {
        match self {
            ExclusionReason::Drift => 1,
            ExclusionReason::CommAnomaly => 2,
            ExclusionReason::FailedAttestation => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self, CodecError> {
        match c {
            1 => Ok(ExclusionReason::Drift),
            2 => Ok(ExclusionReason::CommAnomaly),
            3 => Ok(ExclusionReason::FailedAttestation),
            tag => Err(CodecError::InvalidTag { what: "exclusion reason", tag }),
        }
    }
}

impl std::fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExclusionReason::Drift => "drift",
            ExclusionReason::CommAnomaly => "comm-anomaly",
            ExclusionReason::FailedAttestation => "failed-attestation",
        })
    }
}

/// An exclusion as committed to the log, with the leader's measured
/// evidence (ratio or error rate, in thousandths).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub platform_id: PlatformId,
    pub reason: ExclusionReason,
    pub term: u64,
    pub evidence_milli: u32,
}

impl Exclusion {
    pub fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.platform_id.0).u8(self.reason.code()).u64(self.term).u32(self.evidence_milli);
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            platform_id: PlatformId(dec.u32()?),
            reason: ExclusionReason::from_code(dec.u8()?)?,
            term: dec.u64()?,
            evidence_milli: dec.u32()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MembershipError {
    #[error("{0} is already a member")]
    DuplicateMember(PlatformId),
    #[error("{0} was excluded")]
    PreviouslyExcluded(PlatformId),
    #[error("{0} is not a member")]
    NotAMember(PlatformId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuorumMembership {
    members: BTreeMap<PlatformId, Member>,
    excluded: BTreeMap<PlatformId, Exclusion>,
}

impl QuorumMembership {
    pub fn new(members: impl IntoIterator<Item = Member>) -> Self {
        Self { members: members.into_iter().map(|m| (m.platform_id, m)).collect(), excluded: BTreeMap::new() }
    }

    pub fn members(&self) -> impl Iterator<Item = &Member> {
        self.members.values()
    }

    pub fn member(&self, id: PlatformId) -> Option<&Member> {
        self.members.get(&id)
    }

    pub fn ids(&self) -> Vec<PlatformId> {
        self.members.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_member(&self, id: PlatformId) -> bool {
        self.members.contains_key(&id)
    }

    pub fn excluded(&self) -> impl Iterator<Item = &Exclusion> {
        self.excluded.values()
    }

    pub fn is_excluded(&self, id: PlatformId) -> bool {
        self.excluded.contains_key(&id)
    }

    pub fn quorum_size(&self) -> usize {
        quorum_size(self.members.len())
    }

    pub fn admit(&mut self, member: Member) -> Result<(), MembershipError> {
        if self.members.contains_key(&member.platform_id) {
            return Err(MembershipError::DuplicateMember(member.platform_id));
        }
        if self.excluded.contains_key(&member.platform_id) {
            return Err(MembershipError::PreviouslyExcluded(member.platform_id));
        }
        self.members.insert(member.platform_id, member);
        Ok(())
    }

    pub fn exclude(&mut self, exclusion: Exclusion) -> Result<(), MembershipError> {
        self.members.remove(&exclusion.platform_id).ok_or(MembershipError::NotAMember(exclusion.platform_id))?;
        self.excluded.insert(exclusion.platform_id, exclusion);
        Ok(())
    }
}

/// One replicated log entry, signed by its proposer's AIK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub term: u64,
    pub index: u64,
    pub command: Vec<u8>,
    pub proposer: PlatformId,
    pub signature: Signature,
}

fn entry_message(term: u64, index: u64, command: &[u8], proposer: PlatformId) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.str("log-entry").u64(term).u64(index).bytes(command).u32(proposer.0);
    enc.finish()
}

impl LogEntry {
    pub fn new_signed(term: u64, index: u64, command: Vec<u8>, proposer: PlatformId, aik: &SigningKey) -> Self {
        let signature = aik.sign(&entry_message(term, index, &command, proposer));
        Self { term, index, command, proposer, signature }
    }

    pub fn verify(&self, proposer_vk: &VerifyKey) -> bool {
        proposer_vk.verify(&entry_message(self.term, self.index, &self.command, self.proposer), &self.signature)
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.term).u64(self.index).bytes(&self.command).u32(self.proposer.0);
        self.signature.encode(enc);
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            term: dec.u64()?,
            index: dec.u64()?,
            command: dec.vec()?,
            proposer: PlatformId(dec.u32()?),
            signature: Signature::decode(dec)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let e = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(e)
    }
}
