use std::collections::{BTreeMap, HashSet};

use attested_ledger::crypto::{hash, rng_stream, AgreementSecret, SeededRng, SigningKey};
use attested_ledger::mpt_ledger::Trie;

fn vectors() -> BTreeMap<String, Vec<u8>> {
    include_str!("fixtures/vectors.txt")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            (k.trim().to_string(), hex::decode(v.trim()).unwrap())
        })
        .collect()
}

fn arr<const N: usize>(v: &[u8]) -> [u8; N] {
    v.try_into().unwrap()
}

#[test]
fn sha256_reference_vectors() {
    let v = vectors();
    assert_eq!(hash(b"").as_bytes()[..], v["sha256_empty"][..]);
    assert_eq!(hash(b"abc").as_bytes()[..], v["sha256_abc"][..]);
}

#[test]
fn rng_zero_seed_matches_chacha20_block_zero() {
    let v = vectors();
    assert_eq!(rng_stream(&[0; 32], 0, 64), v["rng_zero_seed_64"]);
    assert_eq!(SeededRng::new([0; 32]).next_bytes(32), v["rng_zero_seed_64"][..32]);
}

#[test]
fn ed25519_reference_vector() {
    let v = vectors();
    let sk = SigningKey::from_seed(arr(&v["ed25519_seed"]));
    assert_eq!(sk.verify_key().as_bytes()[..], v["ed25519_public"][..]);
    let sig = sk.sign(b"");
    assert_eq!(sig.as_bytes()[..], v["ed25519_sig_empty"][..]);
    assert!(sk.verify_key().verify(b"", &sig));
}

#[test]
fn x25519_reference_vector() {
    let v = vectors();
    let alice = AgreementSecret::from_bytes(arr(&v["x25519_alice_secret"]));
    let bob = AgreementSecret::from_bytes(arr(&v["x25519_bob_secret"]));
    assert_eq!(alice.public().0[..], v["x25519_alice_public"][..]);
    assert_eq!(bob.public().0[..], v["x25519_bob_public"][..]);
    assert_eq!(alice.agree(&bob.public())[..], v["x25519_shared"][..]);
    assert_eq!(bob.agree(&alice.public())[..], v["x25519_shared"][..]);
}

#[test]
fn empty_trie_root_is_frozen() {
    assert_eq!(Trie::new().root_hash().0.as_bytes()[..], vectors()["mpt_empty_root"][..]);
}

#[test]
fn no_collisions_in_random_corpus() {
    let mut rng = SeededRng::from_u64(2024);
    let mut inputs = HashSet::new();
    let mut digests = HashSet::new();
    while inputs.len() < 10_000 {
        let len = rng.range_inclusive(0, 64) as usize;
        let input = rng.next_bytes(len);
        if inputs.insert(input.clone()) {
            assert!(digests.insert(*hash(&input).as_bytes()), "collision on {}", hex::encode(&input));
        }
    }
}
