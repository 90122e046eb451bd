use attested_ledger::crypto::SeededRng;
use attested_ledger::sharding::{
    reconstruct, reconstruct_checked, reconstruct_elements, rotate, split, split_elements, verify_shard,
    PrimeField, Shard, ShardingError,
};
use proptest::prelude::*;

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n).filter(|m| m.count_ones() as usize == k).map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect()).collect()
}

fn pick(shards: &[Shard], idx: &[usize]) -> Vec<Shard> {
    idx.iter().map(|&i| shards[i].clone()).collect()
}

#[test]
fn every_three_of_five_reconstructs() {
    let secret = b"cluster secret, thirty-two bytes";
    let (meta, shards) = split(secret, 5, 3, &mut SeededRng::from_u64(1)).unwrap();
    let all = subsets(5, 3);
    assert_eq!(all.len(), 10);
    for s in all {
        assert_eq!(reconstruct(&pick(&shards, &s), &meta).unwrap(), secret);
        assert_eq!(reconstruct_checked(&pick(&shards, &s), &meta).unwrap(), secret);
    }
    for s in subsets(5, 2) {
        assert!(matches!(reconstruct(&pick(&shards, &s), &meta), Err(ShardingError::BelowThreshold { .. })));
    }
}

#[test]
fn one_gf7_share_is_consistent_with_every_secret() {
    let field = PrimeField::new(7).unwrap();
    let (_, shards) = split_elements(&[4], 5, 2, field, &mut SeededRng::from_u64(2)).unwrap();
    for held in &shards {
        let (x, y) = (held.index, held.values[0]);
        // Degree-1 polynomials a0 + a1 x through (x, y), grouped by a0.
        let mut per_secret = [0u32; 7];
        for a0 in 0..7 {
            for a1 in 0..7 {
                if (a0 + a1 * x) % 7 == y {
                    per_secret[a0 as usize] += 1;
                }
            }
        }
        assert_eq!(per_secret, [1; 7]);
    }
}

#[test]
fn cross_epoch_mix_fails_for_both_epochs() {
    let secret = [0x5a; 16];
    let (m0, s0) = split(&secret, 5, 3, &mut SeededRng::from_u64(3)).unwrap();
    let (m1, s1) = rotate(&s0, &m0, &mut SeededRng::from_u64(4)).unwrap();
    let mixed: Vec<Shard> = vec![s0[0].clone(), s0[1].clone(), s1[2].clone(), s1[3].clone()];
    assert_eq!(reconstruct(&mixed, &m0), Err(ShardingError::MixedEpoch));
    assert_eq!(reconstruct(&mixed, &m1), Err(ShardingError::MixedEpoch));
    // Relabelled old shards still fail the new epoch's commitments.
    let relabelled: Vec<Shard> =
        vec![Shard { epoch: 1, ..s0[0].clone() }, Shard { epoch: 1, ..s0[1].clone() }, s1[2].clone()];
    assert!(!verify_shard(&relabelled[0], &m1));
    assert!(reconstruct_checked(&relabelled, &m1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_threshold_subset_reconstructs(
        secret in proptest::collection::vec(any::<u8>(), 1..40),
        n in 1u32..9,
        kd in 0u32..8,
        seed in any::<u64>(),
        mask in any::<u32>(),
    ) {
        let k = 1 + kd % n;
        let (meta, shards) = split(&secret, n, k, &mut SeededRng::from_u64(seed)).unwrap();
        // A k-subset chosen by rotating the index list by `mask`.
        let start = (mask % n) as usize;
        let chosen: Vec<Shard> = (0..k as usize).map(|i| shards[(start + i) % n as usize].clone()).collect();
        prop_assert_eq!(reconstruct(&chosen, &meta).unwrap(), secret.clone());
        let (m2, s2) = rotate(&shards, &meta, &mut SeededRng::from_u64(seed ^ 1)).unwrap();
        prop_assert_eq!(m2.epoch, 1);
        prop_assert_eq!(reconstruct(&s2[..k as usize], &m2).unwrap(), secret);
        prop_assert!(s2.iter().all(|s| verify_shard(s, &m2)));
    }

    #[test]
    fn gf7_elements_round_trip(secret in proptest::collection::vec(0u32..7, 1..6), seed in any::<u64>()) {
        let field = PrimeField::new(7).unwrap();
        let (meta, shards) = split_elements(&secret, 6, 4, field, &mut SeededRng::from_u64(seed)).unwrap();
        prop_assert_eq!(reconstruct_elements(&shards[2..], &meta).unwrap(), secret);
    }
}
