use serde::Serialize;
use thiserror::Error;

use super::node::{empty_encoding, to_nibbles, DecodedNode, NodeKind};
use super::trie::{RootHash, Trie};
use crate::codec::{CodecError, Decoder, Encoder};
use crate::crypto::hash;

/// Node path from the root to the terminal node for `key`. `value` is
/// `None` for an absence proof.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InclusionProof {
    pub key: Vec<u8>,
    pub value: Option<Vec<u8>>,
    pub nodes: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Error)]
#[serde(rename_all = "kebab-case")]
pub enum ProofRejection {
    #[error("digest-mismatch")]
    DigestMismatch,
    #[error("path-malformed")]
    PathMalformed,
    #[error("key-mismatch")]
    KeyMismatch,
}

pub fn prove(trie: &Trie, key: &[u8]) -> InclusionProof {
    let nibbles = to_nibbles(key);
    let mut path = nibbles.as_slice();
    let mut nodes = Vec::new();
    let mut value = None;
    let mut cur = trie.root.as_ref();
    while let Some(node) = cur {
        nodes.push(node.encode());
        cur = None;
        match &node.kind {
            NodeKind::Leaf { path: lp, value: v } => {
                if lp.as_slice() == path {
                    value = Some(v.clone());
                }
            }
            NodeKind::Extension { path: ep, child } => {
                if let Some(rest) = path.strip_prefix(ep.as_slice()) {
                    path = rest;
                    cur = Some(child);
                }
            }
            NodeKind::Branch { children, value: bv } => match path.split_first() {
                None => value = bv.clone(),
                Some((first, rest)) => {
                    path = rest;
                    cur = children[*first as usize].as_ref();
                }
            },
        }
    }
    if nodes.is_empty() {
        nodes.push(empty_encoding());
    }
    InclusionProof { key: key.to_vec(), value, nodes }
}

/// Recomputes digests from the root down and checks that the terminal node
/// agrees with the claimed value or absence.
pub fn verify_proof(root: &RootHash, proof: &InclusionProof) -> Result<(), ProofRejection> {
    let nibbles = to_nibbles(&proof.key);
    let mut path = nibbles.as_slice();
    let mut expected = root.0;
    let mut terminal: Option<Option<Vec<u8>>> = None;
    for (i, enc) in proof.nodes.iter().enumerate() {
        if terminal.is_some() {
            return Err(ProofRejection::PathMalformed);
        }
        if hash(enc) != expected {
            return Err(ProofRejection::DigestMismatch);
        }
        let node = DecodedNode::from_bytes(enc).map_err(|_| ProofRejection::PathMalformed)?;
        match node {
            DecodedNode::Empty => {
                if i != 0 {
                    return Err(ProofRejection::PathMalformed);
                }
                terminal = Some(None);
            }
            DecodedNode::Leaf { path: lp, value } => {
                terminal = Some((lp.as_slice() == path).then_some(value));
            }
            DecodedNode::Extension { path: ep, child } => match path.strip_prefix(ep.as_slice()) {
                Some(rest) => {
                    path = rest;
                    expected = child;
                }
                None => terminal = Some(None),
            },
            DecodedNode::Branch { children, value } => match path.split_first() {
                None => terminal = Some(value),
                Some((first, rest)) => match children[*first as usize] {
                    Some(child) => {
                        path = rest;
                        expected = child;
                    }
                    None => terminal = Some(None),
                },
            },
        }
    }
    match terminal {
        None => Err(ProofRejection::PathMalformed),
        Some(found) if found == proof.value => Ok(()),
        Some(_) => Err(ProofRejection::KeyMismatch),
    }
}

impl InclusionProof {
    pub fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.key);
        match &self.value {
            Some(v) => enc.u8(1).bytes(v),
            None => enc.u8(0),
        };
        enc.u32(self.nodes.len() as u32);
        for n in &self.nodes {
            enc.bytes(n);
        }
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let key = dec.vec()?;
        let value = if dec.bool()? { Some(dec.vec()?) } else { None };
        let count = dec.count(4)?;
        let nodes = (0..count).map(|_| dec.vec()).collect::<Result<_, _>>()?;
        Ok(Self { key, value, nodes })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let p = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(p)
    }
}
