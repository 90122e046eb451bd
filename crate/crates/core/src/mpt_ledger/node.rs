use std::sync::Arc;

use crate::codec::{CodecError, Decoder, Encoder};
use crate::crypto::{hash, Digest};

pub(crate) const TAG_EMPTY: u8 = 0x00;
pub(crate) const TAG_LEAF: u8 = 0x01;
pub(crate) const TAG_EXTENSION: u8 = 0x02;
pub(crate) const TAG_BRANCH: u8 = 0x03;

const FLAG_ODD: u8 = 0x01;
const FLAG_LEAF: u8 = 0x02;

pub(crate) fn to_nibbles(key: &[u8]) -> Vec<u8> {
    key.iter().flat_map(|b| [b >> 4, b & 0x0f]).collect()
}

pub(crate) fn from_nibbles(nibbles: &[u8]) -> Option<Vec<u8>> {
    (nibbles.len() % 2 == 0).then(|| nibbles.chunks(2).map(|c| (c[0] << 4) | c[1]).collect())
}

fn encode_path(enc: &mut Encoder, path: &[u8], leaf: bool) {
    let flag = if leaf { FLAG_LEAF } else { 0 } | if path.len() % 2 == 1 { FLAG_ODD } else { 0 };
    let packed: Vec<u8> = path
        .chunks(2)
        .map(|c| (c[0] << 4) | c.get(1).copied().unwrap_or(0))
        .collect();
    enc.u8(flag).bytes(&packed);
}

fn decode_path(dec: &mut Decoder<'_>, leaf: bool) -> Result<Vec<u8>, CodecError> {
    let flag = dec.u8()?;
    if flag & !(FLAG_ODD | FLAG_LEAF) != 0 || (flag & FLAG_LEAF != 0) != leaf {
        return Err(CodecError::InvalidTag { what: "path flag", tag: flag });
    }
    let packed = dec.bytes()?;
    let mut nibbles = to_nibbles(packed);
    if flag & FLAG_ODD != 0 {
        if nibbles.pop() != Some(0) {
            return Err(CodecError::Invalid("odd path padding"));
        }
    }
    Ok(nibbles)
}

/// A trie node. Children are held by reference and addressed in encodings
/// by their digest.
#[derive(Debug)]
pub(crate) struct Node {
    pub kind: NodeKind,
    pub digest: Digest,
}

#[derive(Debug)]
pub(crate) enum NodeKind {
    Leaf { path: Vec<u8>, value: Vec<u8> },
    Extension { path: Vec<u8>, child: Arc<Node> },
    Branch { children: [Option<Arc<Node>>; 16], value: Option<Vec<u8>> },
}

impl Node {
    pub fn new(kind: NodeKind) -> Arc<Node> {
        debug_assert!(kind.is_canonical());
        let digest = hash(&kind.encode());
        Arc::new(Node { kind, digest })
    }

    pub fn leaf(path: Vec<u8>, value: Vec<u8>) -> Arc<Node> {
        Self::new(NodeKind::Leaf { path, value })
    }

    pub fn encode(&self) -> Vec<u8> {
        self.kind.encode()
    }
}

impl NodeKind {
    fn is_canonical(&self) -> bool {
        match self {
            NodeKind::Leaf { .. } => true,
            NodeKind::Extension { path, child } => {
                !path.is_empty() && matches!(child.kind, NodeKind::Branch { .. })
            }
            NodeKind::Branch { children, value } => {
                let occupied = children.iter().filter(|c| c.is_some()).count();
                occupied >= 2 || (occupied == 1 && value.is_some())
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        match self {
            NodeKind::Leaf { path, value } => {
                enc.u8(TAG_LEAF);
                encode_path(&mut enc, path, true);
                enc.bytes(value);
            }
            NodeKind::Extension { path, child } => {
                enc.u8(TAG_EXTENSION);
                encode_path(&mut enc, path, false);
                child.digest.encode(&mut enc);
            }
            NodeKind::Branch { children, value } => {
                enc.u8(TAG_BRANCH);
                let bitmap = children
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.is_some())
                    .fold(0u16, |m, (i, _)| m | (1 << i));
                enc.u16(bitmap);
                for c in children.iter().flatten() {
                    c.digest.encode(&mut enc);
                }
                match value {
                    Some(v) => {
                        enc.u8(1).bytes(v);
                    }
                    None => {
                        enc.u8(0);
                    }
                }
            }
        }
        enc.finish()
    }
}

pub(crate) fn empty_encoding() -> Vec<u8> {
    vec![TAG_EMPTY]
}

/// A node as read back from an encoding, with children still as digests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum DecodedNode {
    Empty,
    Leaf { path: Vec<u8>, value: Vec<u8> },
    Extension { path: Vec<u8>, child: Digest },
    Branch { children: [Option<Digest>; 16], value: Option<Vec<u8>> },
}

impl DecodedNode {
    /// Strict decode; rejects any encoding [`NodeKind::encode`] would not
    /// produce.
    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let tag = dec.u8()?;
        let node = match tag {
            TAG_EMPTY => DecodedNode::Empty,
            TAG_LEAF => {
                let path = decode_path(dec, true)?;
                DecodedNode::Leaf { path, value: dec.vec()? }
            }
            TAG_EXTENSION => {
                let path = decode_path(dec, false)?;
                if path.is_empty() {
                    return Err(CodecError::Invalid("empty extension path"));
                }
                DecodedNode::Extension { path, child: Digest::decode(dec)? }
            }
            TAG_BRANCH => {
                let bitmap = dec.u16()?;
                let mut children = [None; 16];
                for (i, slot) in children.iter_mut().enumerate() {
                    if bitmap & (1 << i) != 0 {
                        *slot = Some(Digest::decode(dec)?);
                    }
                }
                let value = if dec.bool()? { Some(dec.vec()?) } else { None };
                let occupied = bitmap.count_ones();
                if occupied < 2 && !(occupied == 1 && value.is_some()) {
                    return Err(CodecError::Invalid("underfull branch"));
                }
                DecodedNode::Branch { children, value }
            }
            tag => return Err(CodecError::InvalidTag { what: "trie node", tag }),
        };
        Ok(node)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let node = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(node)
    }
}
