use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::node::{empty_encoding, from_nibbles, to_nibbles, Node, NodeKind};
use crate::crypto::{hash, Digest};

pub const MAX_KEY_LEN: usize = 64;
pub const MAX_INLINE_VALUE: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrieError {
    #[error("empty key")]
    EmptyKey,
    #[error("key of {0} octets exceeds {MAX_KEY_LEN}")]
    OversizedKey(usize),
    #[error("value of {0} octets exceeds the {MAX_INLINE_VALUE}-octet inline limit; store it as a blob")]
    ValueTooLarge(usize),
}

/// Commitment to the full key/value map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RootHash(pub Digest);

impl RootHash {
    pub fn empty() -> Self {
        RootHash(hash(&empty_encoding()))
    }
}

impl std::fmt::Display for RootHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Persistent Merkle Patricia trie. Updates copy the touched path and
/// share everything else, so older versions stay valid.
#[derive(Debug, Clone, Default)]
pub struct Trie {
    pub(crate) root: Option<Arc<Node>>,
}

fn common_prefix(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn empty_children() -> [Option<Arc<Node>>; 16] {
    Default::default()
}

fn check_key(key: &[u8]) -> Result<(), TrieError> {
    match key.len() {
        0 => Err(TrieError::EmptyKey),
        n if n > MAX_KEY_LEN => Err(TrieError::OversizedKey(n)),
        _ => Ok(()),
    }
}

/// Places a suffix below a fresh branch: a value when it is empty,
/// otherwise a child in the slot of its first nibble.
fn place_leaf(children: &mut [Option<Arc<Node>>; 16], branch_value: &mut Option<Vec<u8>>, path: &[u8], value: &[u8]) {
    if path.is_empty() {
        *branch_value = Some(value.to_vec());
    } else {
        children[path[0] as usize] = Some(Node::leaf(path[1..].to_vec(), value.to_vec()));
    }
}

fn wrap_extension(prefix: &[u8], branch: Arc<Node>) -> Arc<Node> {
    if prefix.is_empty() {
        branch
    } else {
        Node::new(NodeKind::Extension { path: prefix.to_vec(), child: branch })
    }
}

fn insert_at(node: Option<&Arc<Node>>, path: &[u8], value: &[u8]) -> Arc<Node> {
    let Some(node) = node else {
        return Node::leaf(path.to_vec(), value.to_vec());
    };
    match &node.kind {
        NodeKind::Leaf { path: lp, value: lv } => {
            if lp.as_slice() == path {
                if lv.as_slice() == value {
                    return node.clone();
                }
                return Node::leaf(path.to_vec(), value.to_vec());
            }
            let c = common_prefix(lp, path);
            let mut children = empty_children();
            let mut bvalue = None;
            place_leaf(&mut children, &mut bvalue, &lp[c..], lv);
            place_leaf(&mut children, &mut bvalue, &path[c..], value);
            wrap_extension(&path[..c], Node::new(NodeKind::Branch { children, value: bvalue }))
        }
        NodeKind::Extension { path: ep, child } => {
            let c = common_prefix(ep, path);
            if c == ep.len() {
                let new_child = insert_at(Some(child), &path[c..], value);
                return Node::new(NodeKind::Extension { path: ep.clone(), child: new_child });
            }
            let mut children = empty_children();
            let mut bvalue = None;
            let rest = &ep[c + 1..];
            children[ep[c] as usize] = Some(if rest.is_empty() {
                child.clone()
            } else {
                Node::new(NodeKind::Extension { path: rest.to_vec(), child: child.clone() })
            });
            place_leaf(&mut children, &mut bvalue, &path[c..], value);
            wrap_extension(&path[..c], Node::new(NodeKind::Branch { children, value: bvalue }))
        }
        NodeKind::Branch { children, value: bv } => {
            let mut children = children.clone();
            let mut bv = bv.clone();
            if path.is_empty() {
                if bv.as_deref() == Some(value) {
                    return node.clone();
                }
                bv = Some(value.to_vec());
            } else {
                let slot = path[0] as usize;
                children[slot] = Some(insert_at(children[slot].as_ref(), &path[1..], value));
            }
            Node::new(NodeKind::Branch { children, value: bv })
        }
    }
}

/// Prepends `prefix` to a node that is about to hang directly off an
/// extension or collapsed branch.
fn prefixed(prefix: Vec<u8>, node: &Arc<Node>) -> Arc<Node> {
    match &node.kind {
        NodeKind::Leaf { path, value } => Node::leaf([prefix, path.clone()].concat(), value.clone()),
        NodeKind::Extension { path, child } => {
            Node::new(NodeKind::Extension { path: [prefix, path.clone()].concat(), child: child.clone() })
        }
        NodeKind::Branch { .. } => wrap_extension(&prefix, node.clone()),
    }
}

/// `None` in the outer option means "unchanged".
fn delete_at(node: &Arc<Node>, path: &[u8]) -> Option<Option<Arc<Node>>> {
    match &node.kind {
        NodeKind::Leaf { path: lp, .. } => (lp.as_slice() == path).then_some(None),
        NodeKind::Extension { path: ep, child } => {
            if !path.starts_with(ep) {
                return None;
            }
            let new_child = delete_at(child, &path[ep.len()..])?;
            Some(new_child.map(|c| prefixed(ep.clone(), &c)))
        }
        NodeKind::Branch { children, value } => {
            let mut children = children.clone();
            let mut value = value.clone();
            if path.is_empty() {
                value.take()?;
            } else {
                let slot = path[0] as usize;
                let child = children[slot].as_ref()?;
                children[slot] = delete_at(child, &path[1..])?;
            }
            let occupied: Vec<usize> = (0..16).filter(|&i| children[i].is_some()).collect();
            Some(match (occupied.as_slice(), value) {
                ([], None) => None,
                ([], Some(v)) => Some(Node::leaf(Vec::new(), v)),
                ([only], None) => Some(prefixed(vec![*only as u8], children[*only].as_ref().unwrap())),
                (_, value) => Some(Node::new(NodeKind::Branch { children, value })),
            })
        }
    }
}

impl Trie {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    pub fn insert(&self, key: &[u8], value: &[u8]) -> Result<Trie, TrieError> {
        check_key(key)?;
        if value.len() > MAX_INLINE_VALUE {
            return Err(TrieError::ValueTooLarge(value.len()));
        }
        Ok(Trie { root: Some(insert_at(self.root.as_ref(), &to_nibbles(key), value)) })
    }

    pub fn get(&self, key: &[u8]) -> Option<&[u8]> {
        let nibbles = to_nibbles(key);
        let mut path = nibbles.as_slice();
        let mut node = self.root.as_ref()?;
        loop {
            match &node.kind {
                NodeKind::Leaf { path: lp, value } => return (lp.as_slice() == path).then_some(value.as_slice()),
                NodeKind::Extension { path: ep, child } => {
                    path = path.strip_prefix(ep.as_slice())?;
                    node = child;
                }
                NodeKind::Branch { children, value } => match path.split_first() {
                    None => return value.as_deref(),
                    Some((first, rest)) => {
                        node = children[*first as usize].as_ref()?;
                        path = rest;
                    }
                },
            }
        }
    }

    /// Deleting an absent key is a no-op.
    pub fn delete(&self, key: &[u8]) -> Trie {
        match &self.root {
            None => self.clone(),
            Some(root) => match delete_at(root, &to_nibbles(key)) {
                None => self.clone(),
                Some(new_root) => Trie { root: new_root },
            },
        }
    }

    pub fn root_hash(&self) -> RootHash {
        match &self.root {
            None => RootHash::empty(),
            Some(n) => RootHash(n.digest),
        }
    }

    /// All entries in key order.
    pub fn entries(&self) -> Vec<(Vec<u8>, Vec<u8>)> {
        fn walk(node: &Node, prefix: &mut Vec<u8>, out: &mut Vec<(Vec<u8>, Vec<u8>)>) {
            match &node.kind {
                NodeKind::Leaf { path, value } => {
                    let full = [prefix.as_slice(), path].concat();
                    out.push((from_nibbles(&full).expect("whole-octet key"), value.clone()));
                }
                NodeKind::Extension { path, child } => {
                    let len = prefix.len();
                    prefix.extend_from_slice(path);
                    walk(child, prefix, out);
                    prefix.truncate(len);
                }
                NodeKind::Branch { children, value } => {
                    if let Some(v) = value {
                        out.push((from_nibbles(prefix).expect("whole-octet key"), v.clone()));
                    }
                    for (i, c) in children.iter().enumerate() {
                        if let Some(c) = c {
                            prefix.push(i as u8);
                            walk(c, prefix, out);
                            prefix.pop();
                        }
                    }
                }
            }
        }
        let mut out = Vec::new();
        if let Some(root) = &self.root {
            walk(root, &mut Vec::new(), &mut out);
        }
        out
    }

    /// Entries whose key starts with `prefix`, in key order.
    pub fn scan_prefix(&self, prefix: &[u8]) -> Vec<(Vec<u8>, Vec<u8>)> {
        self.entries().into_iter().filter(|(k, _)| k.starts_with(prefix)).collect()
    }

    pub fn len(&self) -> usize {
        self.entries().len()
    }
}

pub fn insert(trie: &Trie, key: &[u8], value: &[u8]) -> Result<Trie, TrieError> {
    trie.insert(key, value)
}

pub fn get<'a>(trie: &'a Trie, key: &[u8]) -> Option<&'a [u8]> {
    trie.get(key)
}

pub fn delete(trie: &Trie, key: &[u8]) -> Trie {
    trie.delete(key)
}

pub fn root_hash(trie: &Trie) -> RootHash {
    trie.root_hash()
}
