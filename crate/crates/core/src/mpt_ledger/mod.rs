//! Tamper-evident key/value ledger: a Merkle Patricia trie with inclusion
//! and absence proofs, an append-only root history, off-ledger blob
//! storage and a snapshot format.
//!
//! Node encodings are canonical: a tag octet, paths as a parity/kind flag
//! octet plus length-prefixed packed nibbles, children by digest. Values
//! above 1 KiB must go through [`BlobStore`].

mod blob;
mod history;
mod node;
mod proof;
mod snapshot;
mod trie;

pub use blob::{BlobError, BlobRef, BlobStore};
pub use history::{block_signing_message, quorum_size, HistoryEntry, HistoryError, RootHistory};
pub use proof::{prove, verify_proof, InclusionProof, ProofRejection};
pub use snapshot::{decode_snapshot, encode_snapshot, verify_snapshot, SnapshotError, SnapshotHeader};
pub use trie::{delete, get, insert, root_hash, RootHash, Trie, TrieError, MAX_INLINE_VALUE, MAX_KEY_LEN};
