use serde::{Deserialize, Serialize};

use super::config::SimConfig;

/// The threat catalog, one entry per attack in the threat chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ThreatId {
    S1,
    I1,
    I3,
    I4,
    E1,
    E2,
    T2,
    T3,
    D1,
    S2,
}

impl ThreatId {
    pub const ALL: [ThreatId; 10] = [
        ThreatId::S1,
        ThreatId::I1,
        ThreatId::I3,
        ThreatId::I4,
        ThreatId::E1,
        ThreatId::E2,
        ThreatId::T2,
        ThreatId::T3,
        ThreatId::D1,
        ThreatId::S2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ThreatId::S1 => "S1",
            ThreatId::I1 => "I1",
            ThreatId::I3 => "I3",
            ThreatId::I4 => "I4",
            ThreatId::E1 => "E1",
            ThreatId::E2 => "E2",
            ThreatId::T2 => "T2",
            ThreatId::T3 => "T3",
            ThreatId::D1 => "D1",
            ThreatId::S2 => "S2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str().eq_ignore_ascii_case(s.trim()))
    }

    pub fn describe(self) -> &'static str {
        match self {
            ThreatId::S1 => "compromised client injects forged ingress data",
            ThreatId::I1 => "proxy terminates and re-initiates the outer channel layer",
            ThreatId::I3 => "application enclave runs modified code",
            ThreatId::I4 => "runtime manager reads traffic meant for the application",
            ThreatId::E1 => "adversary extracts one platform's sealing key",
            ThreatId::E2 => "compromised vendor issues quotes over false measurements",
            ThreatId::T2 => "one platform is physically destroyed",
            ThreatId::T3 => "one platform's clock runs fast",
            ThreatId::D1 => "one platform's outbound messages are corrupted",
            ThreatId::S2 => "compromised TEE asks to join the cluster",
        }
    }

    /// The mechanism a mutation run turns off.
    pub fn mitigation(self) -> &'static str {
        match self {
            ThreatId::S1 => "client and ingress signature verification",
            ThreatId::I1 => "outer-layer quote binding check",
            ThreatId::I3 => "inner-layer measurement check",
            ThreatId::I4 => "separate inner layer",
            ThreatId::E1 => "threshold sharding of the cluster secret",
            ThreatId::E2 => "cross-vendor validation",
            ThreatId::T2 => "multi-node replication",
            ThreatId::T3 => "drift detection",
            ThreatId::D1 => "communication anomaly detection",
            ThreatId::S2 => "attestation-gated admission",
        }
    }

    /// Catalog parameters for this scenario.
    pub fn config(self, seed: u64) -> SimConfig {
        let mut cfg = SimConfig { seed, scenario: Some(self), ..SimConfig::default() };
        match self {
            ThreatId::T3 | ThreatId::D1 => cfg.attack_tick = 0,
            ThreatId::T2 => cfg.attack_tick = 3_000,
            _ => {}
        }
        cfg
    }

    /// Disables this scenario's mitigation in `cfg`.
    pub fn mutate(self, cfg: &mut SimConfig) {
        let m = &mut cfg.mitigations;
        match self {
            ThreatId::S1 => m.verify_client_signatures = false,
            ThreatId::I1 => m.verify_outer = false,
            ThreatId::I3 => m.verify_inner_measurement = false,
            ThreatId::I4 => m.separate_layers = false,
            ThreatId::E1 => cfg.shard_threshold = Some(1),
            ThreatId::E2 => m.cross_vendor = false,
            ThreatId::T2 => {
                cfg.nodes = 1;
                cfg.target = None;
            }
            ThreatId::T3 => cfg.consensus.drift_threshold = f64::INFINITY,
            ThreatId::D1 => cfg.consensus.comm_threshold = f64::INFINITY,
            ThreatId::S2 => {
                m.admission_attestation = false;
                m.cross_vendor = false;
            }
        }
    }

    /// Default node the scenario acts on. `None` means "whoever leads at
    /// the attack tick".
    pub fn default_target(self, nodes: u32) -> Option<u32> {
        match self {
            ThreatId::T2 => None,
            _ => Some(nodes),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_covers_the_threat_chain() {
        let ids: Vec<&str> = ThreatId::ALL.iter().map(|t| t.as_str()).collect();
        assert_eq!(ids, ["S1", "I1", "I3", "I4", "E1", "E2", "T2", "T3", "D1", "S2"]);
        for t in ThreatId::ALL {
            assert_eq!(ThreatId::parse(t.as_str()), Some(t));
            assert_eq!(ThreatId::parse(&t.as_str().to_lowercase()), Some(t));
            let mut cfg = t.config(1);
            cfg.validate().unwrap();
            let before = cfg.clone();
            t.mutate(&mut cfg);
            assert_ne!(cfg, before, "{t:?} mutation changes nothing");
            cfg.validate().unwrap();
        }
        assert_eq!(ThreatId::parse("X9"), None);
    }
}
