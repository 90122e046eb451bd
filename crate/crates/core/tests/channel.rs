mod common;

use attested_ledger::attestation::{ClockRate, PlatformId, Vendor, VendorRoots};
use attested_ledger::channel::{
    handshake, open_at_runtime, ChannelError, Envelope, ExpectedMeasurements, RoutingHeader,
};
use attested_ledger::crypto::{hash, SeededRng};
use proptest::prelude::*;

#[test]
fn runtime_sees_only_routing_over_many_requests() {
    common::channel_separation(200, 1).unwrap();
}

#[test]
fn envelope_from_another_session_is_refused() {
    let mut rng = SeededRng::from_u64(2);
    let roots = VendorRoots::generate(&mut rng);
    let expected = ExpectedMeasurements { runtime: hash(b"rt"), app: hash(b"app") };
    let rt = roots.root(Vendor::A).provision(PlatformId(1), expected.runtime, ClockRate::NOMINAL, &mut rng);
    let app = roots.root(Vendor::A).provision(PlatformId(1), expected.app, ClockRate::NOMINAL, &mut rng);
    let (mut first, _, _) = handshake("ledger", &rt, &app, &roots.trust_all(), &expected, &mut rng).unwrap();
    let (_, mut other_rt, _) = handshake("ledger", &rt, &app, &roots.trust_all(), &expected, &mut rng).unwrap();
    let env = first.seal_request(&RoutingHeader::for_session(&first), b"hello");
    assert_eq!(open_at_runtime(&mut other_rt, &env), Err(ChannelError::WrongSession));
    // Relabelling the session id does not get past the outer key.
    let relabelled = Envelope { session_id: other_rt.session_id, ..env };
    assert!(matches!(open_at_runtime(&mut other_rt, &relabelled), Err(ChannelError::Authentication(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn separation_holds_for_any_seed(seed in any::<u64>()) {
        prop_assert_eq!(common::channel_separation(20, seed), Ok(()));
    }
}
