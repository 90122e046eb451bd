mod common;

use attested_ledger::crypto::hash;
use attested_ledger::execution::{replay, ExecConfig, LocalLedger};
use attested_ledger::lineage::{
    active_grants, build_bundle, open_as_grantee, open_datum, revocation_key, trace_lineage, verify_provenance,
    ProvenanceBundle,
};
use common::audit_workflow;

#[test]
fn workflow_lineage_is_complete() {
    let w = audit_workflow(1);
    let state = w.ledger.state();
    let graph = trace_lineage(&state.trie, &w.combined).unwrap();
    assert!(graph.is_acyclic());
    let ids: Vec<_> = graph.records.iter().map(|r| r.data_id).collect();
    assert_eq!(ids.len(), 3);
    for id in [w.raw, w.hashed, w.combined] {
        assert!(ids.contains(&id));
    }
    assert_eq!(graph.roots().map(|r| r.data_id).collect::<Vec<_>>(), vec![w.raw]);
    let expected = [hash(b"sensor reading 42").as_bytes().as_slice(), b"sensor reading 42"].concat();
    assert_eq!(open_datum(&state.trie, &state.keys, &w.combined).unwrap(), expected);
}

#[test]
fn revocation_destroys_the_grantee_key() {
    let w = audit_workflow(2);
    let state = w.ledger.state();
    let fp = w.grantee.verify_key().fingerprint();
    assert!(open_as_grantee(&state.trie, &state.keys, &w.combined, &fp, &w.grantee_key).is_err());
    assert!(active_grants(&state.trie, &w.combined).is_empty());
    assert!(state.trie.get(&revocation_key(&w.combined, &fp)).is_some());
    // Ciphertext stays on the ledger; only the operator path can open it.
    assert!(open_datum(&state.trie, &state.keys, &w.combined).is_ok());
}

#[test]
fn bundle_verifies_against_final_root_only() {
    let w = audit_workflow(3);
    let root = w.ledger.state().root();
    let bundle = build_bundle(&w.ledger.state().trie, &w.combined).unwrap();
    let bytes = bundle.to_bytes();
    let back = ProvenanceBundle::from_bytes(&bytes).unwrap();
    verify_provenance(&w.combined, &root, &back).unwrap();
    assert!(verify_provenance(&w.hashed, &root, &back).is_err());

    // An earlier root does not vouch for the final bundle.
    let earlier = replay(w.ledger.genesis(), ExecConfig::default(), &w.ledger.log()[..5]).unwrap().root();
    assert!(verify_provenance(&w.combined, &earlier, &back).is_err());
}

#[test]
fn every_single_bit_tamper_is_rejected() {
    let w = audit_workflow(4);
    let root = w.ledger.state().root();
    let bytes = build_bundle(&w.ledger.state().trie, &w.combined).unwrap().to_bytes();
    for bit in 0..bytes.len() * 8 {
        let mut t = bytes.clone();
        t[bit / 8] ^= 1 << (bit % 8);
        let accepted = ProvenanceBundle::from_bytes(&t).is_ok_and(|b| verify_provenance(&w.combined, &root, &b).is_ok());
        assert!(!accepted, "bit {bit} of {}", bytes.len() * 8);
    }
}

#[test]
fn ledger_file_round_trips() {
    let w = audit_workflow(5);
    let back = LocalLedger::from_bytes(&w.ledger.to_bytes()).unwrap();
    assert_eq!(back.state().root(), w.ledger.state().root());
    assert_eq!(back.state().results, w.ledger.state().results);
    let mut bad = w.ledger.to_bytes();
    bad.truncate(bad.len() - 1);
    assert!(LocalLedger::from_bytes(&bad).is_err());
}
