use std::collections::BTreeMap;

use attested_ledger::crypto::SeededRng;
use attested_ledger::mpt_ledger::{
    decode_snapshot, encode_snapshot, prove, verify_proof, verify_snapshot, InclusionProof, RootHash, SnapshotError,
    Trie,
};
use proptest::prelude::*;

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = vec![];
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

fn build(pairs: &[(Vec<u8>, Vec<u8>)]) -> Trie {
    pairs.iter().fold(Trie::new(), |t, (k, v)| t.insert(k, v).unwrap())
}

#[test]
fn all_insertion_orders_agree() {
    // Shared prefixes force extension and branch splits.
    let keys: Vec<&[u8]> = vec![b"dog", b"doge", b"do", b"horse"];
    let pairs: Vec<(Vec<u8>, Vec<u8>)> = keys.iter().map(|k| (k.to_vec(), [b"v-", *k].concat())).collect();
    let orders = permutations(&[0, 1, 2, 3]);
    assert_eq!(orders.len(), 24);
    let oracle: BTreeMap<_, _> = pairs.iter().cloned().collect();
    let roots: Vec<RootHash> = orders
        .iter()
        .map(|o| {
            let t = build(&o.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>());
            assert_eq!(t.entries(), oracle.clone().into_iter().collect::<Vec<_>>());
            t.root_hash()
        })
        .collect();
    assert!(roots.windows(2).all(|w| w[0] == w[1]));
}

fn random_key(rng: &mut SeededRng) -> Vec<u8> {
    // Small alphabet and short keys so operations collide often.
    let len = rng.range_inclusive(1, 4) as usize;
    (0..len).map(|_| b"abcd"[rng.range_inclusive(0, 3) as usize]).collect()
}

#[test]
fn random_ops_match_sorted_map() {
    let mut rng = SeededRng::from_u64(500);
    let mut trie = Trie::new();
    let mut oracle = BTreeMap::new();
    for i in 0..500u32 {
        let key = random_key(&mut rng);
        if rng.range_inclusive(0, 2) == 0 {
            trie = trie.delete(&key);
            oracle.remove(&key);
        } else {
            let value = i.to_be_bytes().to_vec();
            trie = trie.insert(&key, &value).unwrap();
            oracle.insert(key, value);
        }
        assert_eq!(trie.len(), oracle.len());
    }
    assert_eq!(trie.entries(), oracle.clone().into_iter().collect::<Vec<_>>());
    // Same contents by a different route give the same root.
    let rebuilt = build(&oracle.into_iter().rev().collect::<Vec<_>>());
    assert_eq!(rebuilt.root_hash(), trie.root_hash());
}

#[test]
fn proofs_for_present_and_absent_keys() {
    let mut rng = SeededRng::from_u64(7);
    let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..30).map(|i| (random_key(&mut rng), vec![i])).collect();
    let trie = build(&pairs);
    let root = trie.root_hash();
    for k in [b"a".to_vec(), b"abcd".to_vec(), b"zz".to_vec(), b"dddd".to_vec()] {
        let p = prove(&trie, &k);
        assert_eq!(p.value.as_deref(), trie.get(&k));
        verify_proof(&root, &p).unwrap();
        let lie = InclusionProof { value: if p.value.is_some() { None } else { Some(vec![1]) }, ..p.clone() };
        assert!(verify_proof(&root, &lie).is_err());
        assert!(verify_proof(&Trie::new().root_hash(), &p).is_err() || trie.is_empty());
    }
}

#[test]
fn snapshot_rejects_wrong_root() {
    let trie = build(&[(b"k".to_vec(), b"v".to_vec())]);
    let bytes = encode_snapshot(&trie);
    let (_, back) = decode_snapshot(&bytes).unwrap();
    assert_eq!(back.root_hash(), trie.root_hash());
    assert!(matches!(verify_snapshot(&bytes, &Trie::new().root_hash()), Err(SnapshotError::RootMismatch { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contents_determine_root(
        map in proptest::collection::btree_map(proptest::collection::vec(any::<u8>(), 1..6), proptest::collection::vec(any::<u8>(), 0..8), 0..24),
        extra in proptest::collection::vec(any::<u8>(), 1..6),
    ) {
        let pairs: Vec<_> = map.clone().into_iter().collect();
        let forward = build(&pairs);
        let backward = build(&pairs.iter().rev().cloned().collect::<Vec<_>>());
        prop_assert_eq!(forward.root_hash(), backward.root_hash());
        // Insert-then-delete of a fresh key is a no-op on the root.
        if !map.contains_key(&extra) {
            let round = forward.insert(&extra, b"x").unwrap().delete(&extra);
            prop_assert_eq!(round.root_hash(), forward.root_hash());
        }
        for (k, v) in &map {
            let p = prove(&forward, k);
            prop_assert_eq!(p.value.as_ref(), Some(v));
            prop_assert!(verify_proof(&forward.root_hash(), &p).is_ok());
        }
    }
}
