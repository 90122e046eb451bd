pub mod attestation;
pub mod channel;
pub mod codec;
pub mod consensus;
pub mod crypto;
pub mod execution;
pub mod lineage;
pub mod mpt_ledger;
pub mod sharding;
pub mod simnet;
