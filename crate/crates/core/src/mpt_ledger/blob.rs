use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec::{CodecError, Decoder, Encoder};
use crate::crypto::{hash, Digest};

/// What the ledger stores for an externally held payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobRef {
    pub external_id: u64,
    pub digest: Digest,
    pub size: u64,
}

impl BlobRef {
    pub fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.external_id);
        self.digest.encode(enc);
        enc.u64(self.size);
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self { external_id: dec.u64()?, digest: Digest::decode(dec)?, size: dec.u64()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlobError {
    #[error("unknown blob id {0}")]
    UnknownId(u64),
    #[error("blob {0} does not match its digest")]
    DigestMismatch(u64),
}

/// Off-ledger payload storage. Forgetting a blob erases the payload while
/// the ledger keeps the digest.
#[derive(Debug, Clone, Default)]
pub struct BlobStore {
    next_id: u64,
    blobs: BTreeMap<u64, Vec<u8>>,
}

impl BlobStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store_external(&mut self, payload: &[u8]) -> BlobRef {
        let id = self.next_id;
        self.next_id += 1;
        self.blobs.insert(id, payload.to_vec());
        BlobRef { external_id: id, digest: hash(payload), size: payload.len() as u64 }
    }

    pub fn forget_external(&mut self, external_id: u64) -> Result<(), BlobError> {
        self.blobs.remove(&external_id).map(|_| ()).ok_or(BlobError::UnknownId(external_id))
    }

    pub fn dereference(&self, r: &BlobRef) -> Result<Vec<u8>, BlobError> {
        let payload = self.blobs.get(&r.external_id).ok_or(BlobError::UnknownId(r.external_id))?;
        if hash(payload) != r.digest {
            return Err(BlobError::DigestMismatch(r.external_id));
        }
        Ok(payload.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_dereference_forget() {
        let mut store = BlobStore::new();
        let r = store.store_external(b"large payload");
        assert_eq!(store.dereference(&r).unwrap(), b"large payload");
        assert_eq!(r.digest, hash(b"large payload"));
        store.forget_external(r.external_id).unwrap();
        assert_eq!(store.dereference(&r), Err(BlobError::UnknownId(r.external_id)));
        assert_eq!(store.forget_external(r.external_id), Err(BlobError::UnknownId(r.external_id)));
    }
}
