use std::sync::Arc;

use thiserror::Error;

use super::node::{empty_encoding, DecodedNode, Node, NodeKind};
use super::trie::{RootHash, Trie};
use crate::codec::{CodecError, Decoder, Encoder};
use crate::crypto::{hash, AlgorithmId, Digest, DEFAULT_HASH};
use crate::sharding::PRODUCTION_MODULUS;

const SNAPSHOT_MAGIC: &[u8; 4] = b"SNAP";
const SNAPSHOT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("node digest does not match its parent's reference")]
    DigestMismatch,
    #[error("unsupported algorithm id {0:#04x}")]
    UnsupportedAlgorithm(u8),
    #[error("snapshot root {actual} does not match expected {expected}")]
    RootMismatch { expected: RootHash, actual: RootHash },
}

/// Header echo of a decoded snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotHeader {
    pub version: u8,
    pub algorithm: AlgorithmId,
    pub field_modulus: u32,
}

/// Header, then every node encoding in depth-first order (branch children
/// in slot order).
pub fn encode_snapshot(trie: &Trie) -> Vec<u8> {
    fn walk(node: &Node, enc: &mut Encoder) {
        enc.bytes(&node.encode());
        match &node.kind {
            NodeKind::Leaf { .. } => {}
            NodeKind::Extension { child, .. } => walk(child, enc),
            NodeKind::Branch { children, .. } => children.iter().flatten().for_each(|c| walk(c, enc)),
        }
    }
    let mut enc = Encoder::with_header(SNAPSHOT_MAGIC, SNAPSHOT_VERSION);
    enc.u8(DEFAULT_HASH as u8).u32(PRODUCTION_MODULUS);
    match &trie.root {
        None => {
            enc.bytes(&empty_encoding());
        }
        Some(root) => walk(root, &mut enc),
    }
    enc.finish()
}

fn read_node(dec: &mut Decoder<'_>, expected: Option<Digest>) -> Result<Arc<Node>, SnapshotError> {
    let raw = dec.bytes()?;
    if let Some(d) = expected {
        if hash(raw) != d {
            return Err(SnapshotError::DigestMismatch);
        }
    }
    let kind = match DecodedNode::from_bytes(raw)? {
        DecodedNode::Empty => return Err(CodecError::Invalid("empty node below root").into()),
        DecodedNode::Leaf { path, value } => NodeKind::Leaf { path, value },
        DecodedNode::Extension { path, child } => {
            let child = read_node(dec, Some(child))?;
            if !matches!(child.kind, NodeKind::Branch { .. }) {
                return Err(CodecError::Invalid("extension child must be a branch").into());
            }
            NodeKind::Extension { path, child }
        }
        DecodedNode::Branch { children, value } => {
            let mut out: [Option<Arc<Node>>; 16] = Default::default();
            for (slot, d) in children.iter().enumerate() {
                if let Some(d) = d {
                    out[slot] = Some(read_node(dec, Some(*d))?);
                }
            }
            NodeKind::Branch { children: out, value }
        }
    };
    Ok(Node::new(kind))
}

/// Rebuilds the trie, checking every child reference against the digest of
/// the node that follows it.
pub fn decode_snapshot(bytes: &[u8]) -> Result<(SnapshotHeader, Trie), SnapshotError> {
    let mut dec = Decoder::with_header(bytes, SNAPSHOT_MAGIC, SNAPSHOT_VERSION)?;
    let alg = dec.u8()?;
    let algorithm = AlgorithmId::from_u8(alg).map_err(|_| SnapshotError::UnsupportedAlgorithm(alg))?;
    if algorithm.digest_len().is_none() {
        return Err(SnapshotError::UnsupportedAlgorithm(alg));
    }
    let field_modulus = dec.u32()?;
    let header = SnapshotHeader { version: SNAPSHOT_VERSION, algorithm, field_modulus };
    let mut peek = dec.clone();
    let trie = if peek.bytes()? == empty_encoding().as_slice() {
        dec.bytes()?;
        Trie::new()
    } else {
        Trie { root: Some(read_node(&mut dec, None)?) }
    };
    dec.finish()?;
    Ok((header, trie))
}

/// Recomputes the snapshot root and compares it with `expected`.
pub fn verify_snapshot(bytes: &[u8], expected: &RootHash) -> Result<Trie, SnapshotError> {
    let (_, trie) = decode_snapshot(bytes)?;
    let actual = trie.root_hash();
    if &actual != expected {
        return Err(SnapshotError::RootMismatch { expected: *expected, actual });
    }
    Ok(trie)
}
