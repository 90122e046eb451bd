#![allow(dead_code)]

use attested_ledger::attestation::CodeManifest;
use attested_ledger::crypto::{AeadKey, Digest, SeededRng, SigningKey};
use attested_ledger::execution::{Instr, LocalLedger, Op, Program, Transaction, TxOutcome};

pub const APP: &str = "audit";

/// Ledger after ingress → hash → concat(hash, raw) → grant → revoke.
pub struct Workflow {
    pub ledger: LocalLedger,
    pub raw: Digest,
    pub hashed: Digest,
    pub combined: Digest,
    pub grantee: SigningKey,
    pub grantee_key: AeadKey,
}

fn expect_record(outcome: TxOutcome) -> Digest {
    match outcome {
        TxOutcome::Record { data_id } => data_id,
        other => panic!("{other:?}"),
    }
}

fn register(ledger: &mut LocalLedger, client: &SigningKey, nonce: u64, name: &str, program: Program) -> Digest {
    let manifest = CodeManifest::new_signed(name, 1, program.code_digest(), client);
    let tx = Transaction::new_signed(APP, Op::RegisterProgram { manifest, program: program.to_bytes() }, client, nonce);
    match ledger.submit(tx).outcome {
        TxOutcome::Registered { measurement } => measurement,
        other => panic!("{other:?}"),
    }
}

pub fn audit_workflow(seed: u64) -> Workflow {
    let mut rng = SeededRng::from_u64(seed);
    let client = SigningKey::generate(&mut rng);
    let grantee = SigningKey::generate(&mut rng);
    let grantee_key = AeadKey::generate(&mut rng);
    let mut ledger = LocalLedger::new(seed);

    let raw = expect_record(ledger.submit(Transaction::ingest(APP, b"sensor reading 42", "sensor-7", &client, 1)).outcome);
    let hasher = register(&mut ledger, &client, 2, "hasher", Program(vec![Instr::Input(0), Instr::Hash]));
    let joiner =
        register(&mut ledger, &client, 3, "joiner", Program(vec![Instr::Input(0), Instr::Input(1), Instr::Concat]));
    let transform = |inputs: Vec<Digest>, measurement, nonce| {
        Transaction::new_signed(APP, Op::Transform { inputs, measurement, step_budget: 100 }, &client, nonce)
    };
    let hashed = expect_record(ledger.submit(transform(vec![raw], hasher, 4)).outcome);
    let combined = expect_record(ledger.submit(transform(vec![hashed, raw], joiner, 5)).outcome);

    let grant = Op::Grant { data_id: combined, grantee: grantee.verify_key(), grantee_key: grantee_key.clone() };
    assert_eq!(ledger.submit(Transaction::new_signed(APP, grant, &client, 6)).outcome, TxOutcome::Ok);
    let revoke = Op::Revoke { data_id: combined, grantee: grantee.verify_key().fingerprint() };
    assert_eq!(ledger.submit(Transaction::new_signed(APP, revoke, &client, 7)).outcome, TxOutcome::Ok);

    Workflow { ledger, raw, hashed, combined, grantee, grantee_key }
}

use attested_ledger::attestation::{ClockRate, PlatformId, Vendor, VendorRoots};
use attested_ledger::channel::{
    handshake, open_at_app, open_at_runtime, reuse_as_inner, ChannelError, Envelope, ExpectedMeasurements,
    RoutingHeader,
};
use attested_ledger::crypto::hash;

/// Seals `requests` random payloads over one layered session and checks
/// the runtime sees only the routing header and every replay bounces.
pub fn channel_separation(requests: usize, seed: u64) -> Result<(), String> {
    let mut rng = SeededRng::from_u64(seed);
    let roots = VendorRoots::generate(&mut rng);
    let expected = ExpectedMeasurements { runtime: hash(b"runtime-manager"), app: hash(b"ledger-app") };
    let runtime = roots.root(Vendor::A).provision(PlatformId(1), expected.runtime, ClockRate::NOMINAL, &mut rng);
    let app = roots.root(Vendor::B).provision(PlatformId(1), expected.app, ClockRate::NOMINAL, &mut rng);
    let (mut session, mut rt, mut app_end) =
        handshake("ledger", &runtime, &app, &roots.trust_all(), &expected, &mut rng).map_err(|e| e.to_string())?;
    let routing = RoutingHeader::for_session(&session);
    let mut spy = reuse_as_inner(&rt);

    for i in 0..requests {
        let len = rng.range_inclusive(8, 256) as usize;
        let payload = rng.next_bytes(len);
        let wire = session.seal_request(&routing, &payload).to_bytes();
        let env = Envelope::from_bytes(&wire).map_err(|e| e.to_string())?;

        let (seen, inner) = open_at_runtime(&mut rt, &env).map_err(|e| format!("request {i}: {e}"))?;
        if seen != routing {
            return Err(format!("request {i}: runtime saw {seen:?}"));
        }
        // Nothing the runtime holds contains the payload in the clear.
        let exposed = [wire.as_slice(), inner.body.as_slice()];
        if exposed.iter().any(|b| b.windows(8).any(|w| w == &payload[..8])) {
            return Err(format!("request {i}: payload prefix visible to runtime"));
        }
        if open_at_app(&mut spy, &inner).is_ok() {
            return Err(format!("request {i}: runtime key opened the inner layer"));
        }
        if open_at_app(&mut app_end, &inner).map_err(|e| format!("request {i}: {e}"))? != payload {
            return Err(format!("request {i}: app recovered a different payload"));
        }
        if !matches!(open_at_runtime(&mut rt, &env), Err(ChannelError::Replay { .. })) {
            return Err(format!("request {i}: outer replay accepted"));
        }
        if !matches!(open_at_app(&mut app_end, &inner), Err(ChannelError::Replay { .. })) {
            return Err(format!("request {i}: inner replay accepted"));
        }
    }
    Ok(())
}
