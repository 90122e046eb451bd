use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::trie::RootHash;
use crate::attestation::PlatformId;
use crate::codec::Encoder;
use crate::crypto::{Signature, VerifyKey};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    pub block_index: u64,
    pub root: RootHash,
    pub term: u64,
    pub leader: PlatformId,
    pub quorum_sigs: Vec<(PlatformId, Signature)>,
    /// Signers whose signature did not verify, or who are not members.
    pub flagged: Vec<PlatformId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HistoryError {
    #[error("only {valid} valid signatures, quorum is {needed}")]
    BadQuorum { valid: usize, needed: usize },
    #[error("expected block index {expected}, got {got}")]
    GapInIndex { expected: u64, got: u64 },
}

/// The message every quorum member signs for a block.
pub fn block_signing_message(block_index: u64, root: &RootHash, term: u64) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.str("block").u64(block_index);
    root.0.encode(&mut enc);
    enc.u64(term);
    enc.finish()
}

pub fn quorum_size(members: usize) -> usize {
    members / 2 + 1
}

/// Append-only chain of committed roots. Entries cannot be modified once
/// appended; the only mutator is [`RootHistory::commit_block`].
#[derive(Debug, Clone, Default)]
pub struct RootHistory {
    entries: Vec<HistoryEntry>,
}

impl RootHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn latest(&self) -> Option<&HistoryEntry> {
        self.entries.last()
    }

    pub fn next_index(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn commit_block(
        &mut self,
        block_index: u64,
        root: RootHash,
        term: u64,
        leader: PlatformId,
        quorum_sigs: Vec<(PlatformId, Signature)>,
        members: &BTreeMap<PlatformId, VerifyKey>,
    ) -> Result<&HistoryEntry, HistoryError> {
        let expected = self.next_index();
        if block_index != expected {
            return Err(HistoryError::GapInIndex { expected, got: block_index });
        }
        let msg = block_signing_message(block_index, &root, term);
        let mut valid = BTreeSet::new();
        let mut flagged = Vec::new();
        for (signer, sig) in &quorum_sigs {
            match members.get(signer) {
                Some(vk) if vk.verify(&msg, sig) => {
                    valid.insert(*signer);
                }
                _ => flagged.push(*signer),
            }
        }
        let needed = quorum_size(members.len());
        if valid.len() < needed {
            return Err(HistoryError::BadQuorum { valid: valid.len(), needed });
        }
        self.entries.push(HistoryEntry { block_index, root, term, leader, quorum_sigs, flagged });
        Ok(self.entries.last().expect("just pushed"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{hash, SeededRng, SigningKey};

    fn members(n: u32) -> (Vec<SigningKey>, BTreeMap<PlatformId, VerifyKey>) {
        let mut rng = SeededRng::from_u64(n as u64);
        let keys: Vec<SigningKey> = (0..n).map(|_| SigningKey::generate(&mut rng)).collect();
        let map = keys.iter().enumerate().map(|(i, k)| (PlatformId(i as u32), k.verify_key())).collect();
        (keys, map)
    }

    fn sigs(keys: &[SigningKey], idx: u64, root: &RootHash, term: u64) -> Vec<(PlatformId, Signature)> {
        let msg = block_signing_message(idx, root, term);
        keys.iter().enumerate().map(|(i, k)| (PlatformId(i as u32), k.sign(&msg))).collect()
    }

    #[test]
    fn first_commit_is_block_zero_and_gaps_rejected() {
        let (keys, m) = members(3);
        let root = RootHash(hash(b"r"));
        let mut h = RootHistory::new();
        let e = h.commit_block(0, root, 1, PlatformId(0), sigs(&keys, 0, &root, 1), &m).unwrap();
        assert_eq!(e.block_index, 0);
        assert_eq!(
            h.commit_block(2, root, 1, PlatformId(0), sigs(&keys, 2, &root, 1), &m).unwrap_err(),
            HistoryError::GapInIndex { expected: 1, got: 2 }
        );
    }

    #[test]
    fn quorum_counting_with_one_bad_signature() {
        for n in [3u32, 5, 7] {
            let (keys, m) = members(n);
            let root = RootHash(hash(b"state"));
            let q = quorum_size(n as usize);

            // Exactly a quorum valid plus one corrupted signature: accepted and flagged.
            let mut s = sigs(&keys, 0, &root, 4);
            s.truncate(q + 1);
            s[q].1 = s[q].1.with_bit_flipped(5);
            let mut h = RootHistory::new();
            let e = h.commit_block(0, root, 4, PlatformId(0), s, &m).unwrap();
            assert_eq!(e.flagged, vec![PlatformId(q as u32)]);

            // One short of quorum once the bad one is discounted.
            let mut s = sigs(&keys, 0, &root, 4);
            s.truncate(q);
            s[0].1 = s[0].1.with_bit_flipped(1);
            assert_eq!(
                RootHistory::new().commit_block(0, root, 4, PlatformId(0), s, &m).unwrap_err(),
                HistoryError::BadQuorum { valid: q - 1, needed: q }
            );

            // Duplicate signers count once.
            let s = sigs(&keys, 0, &root, 4);
            let dup: Vec<_> = std::iter::repeat(s[0].clone()).take(n as usize).collect();
            assert!(RootHistory::new().commit_block(0, root, 4, PlatformId(0), dup, &m).is_err());
        }
    }

    #[test]
    fn signatures_bind_term_and_root() {
        let (keys, m) = members(3);
        let root = RootHash(hash(b"a"));
        let other = RootHash(hash(b"b"));
        let mut h = RootHistory::new();
        assert!(h.commit_block(0, other, 1, PlatformId(0), sigs(&keys, 0, &root, 1), &m).is_err());
        assert!(h.commit_block(0, root, 2, PlatformId(0), sigs(&keys, 0, &root, 1), &m).is_err());
        assert!(h.entries().is_empty());
    }
}
