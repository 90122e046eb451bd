mod message;
mod monitor;
mod node;
mod types;

pub use message::{vote_nonce, vote_request_digest, AppendRejection, Body, Message, VoteDenial};
pub use monitor::{
    detect_comm_anomaly, detect_drift, CommMonitor, CommVerdict, DriftVerdict, HeartbeatStats, InsufficientObservations,
    IntervalSample, MessageFault,
};
pub use node::{
    check_vote_quote, AdmissionError, AdmissionPolicy, ConsensusConfig, NodeEvent, NodeIdentity, Outgoing, RaftNode, Role,
};
pub use types::{Exclusion, ExclusionReason, LogEntry, Member, MembershipError, QuorumMembership};
