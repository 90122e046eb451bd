use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use attested_ledger::attestation::{
    generate_quote, verify_quote, AttestationQuote, ClockRate, PlatformId, Vendor, VendorRoots, NONCE_LEN,
};
use attested_ledger::crypto::{hash_parts, AeadKey, Digest, SigningKey};
use attested_ledger::execution::{Instr, LocalLedger, Op, Program, Transaction};
use attested_ledger::lineage::{build_bundle, trace_lineage, verify_provenance, ProvenanceBundle};
use attested_ledger::mpt_ledger::{encode_snapshot, verify_snapshot, RootHash, SnapshotError};
use attested_ledger::sharding::{reconstruct_checked, rotate, split, ShardedSecret, Shard};
use attested_ledger::attestation::CodeManifest;
use attested_ledger::crypto::SeededRng;
use attested_ledger::simnet::{check, replay_trace, run, SimConfig, ThreatId, Trace};

use crate::{AttestCmd, BuildArgs, Cmd, Ctx, Failure, KeysCmd, LedgerCmd, LineageCmd, SimnetCmd, TxCmd};

type Out = Result<Value, Failure>;

pub fn dispatch(cmd: Cmd, ctx: &Ctx) -> Out {
    match cmd {
        Cmd::Simnet(c) => simnet(c, ctx),
        Cmd::Ledger(c) => ledger(c, ctx),
        Cmd::Lineage(c) => lineage(c, ctx),
        Cmd::Attest(c) => attest(c, ctx),
        Cmd::Keys(c) => keys(c, ctx),
        Cmd::Tx(c) => tx(c, ctx),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::domain("io", format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::domain("io", format!("{}: {e}", path.display())))
}

fn require_out(ctx: &Ctx) -> Result<&Path, Failure> {
    ctx.out.as_deref().ok_or_else(|| Failure::usage("--out is required"))
}

fn digest_arg(name: &str, s: &str) -> Result<Digest, Failure> {
    Digest::from_hex(s).map_err(|_| Failure::usage(format!("--{name}: expected 64 hex digits")))
}

fn threat_arg(s: &str) -> Result<ThreatId, Failure> {
    ThreatId::parse(s).ok_or_else(|| Failure::usage(format!("unknown scenario `{s}`")))
}

fn malformed(what: &str, e: impl ToString) -> Failure {
    Failure::domain("malformed-input", format!("{what}: {}", e.to_string()))
}

fn simnet(cmd: SimnetCmd, ctx: &Ctx) -> Out {
    match cmd {
        SimnetCmd::Run { config } => {
            let text = String::from_utf8(read(&config)?).map_err(|e| malformed("config", e))?;
            let mut cfg = SimConfig::parse(&text).map_err(|e| Failure::domain("invalid-config", e))?;
            if let Some(seed) = ctx.seed {
                cfg.seed = seed;
            }
            let trace = run(cfg).map_err(|e| Failure::domain("invalid-config", e))?;
            if let Some(out) = &ctx.out {
                write(out, trace.to_ndjson().as_bytes())?;
            }
            let s = &trace.summary;
            Ok(json!({
                "events": trace.events.len(),
                "exclusions": s.exclusions.iter().map(|e| e.platform_id.0).collect::<Vec<_>>(),
                "membership": s.membership,
                "roots": s.nodes.iter().map(|n| json!({ "node": n.id, "alive": n.alive, "commit_index": n.commit_index, "root": n.root })).collect::<Vec<_>>(),
                "verdict": s.verdict,
            }))
        }
        SimnetCmd::Check { trace, scenario } => {
            let threat = scenario.as_deref().map(threat_arg).transpose()?;
            let text = String::from_utf8(read(&trace)?).map_err(|e| malformed("trace", e))?;
            let trace = Trace::from_ndjson(&text).map_err(|e| malformed("trace", e))?;
            replay_trace(&trace).map_err(|e| Failure::domain("replay-mismatch", e))?;
            let verdict = check(&trace, threat);
            let v = json!({
                "replay": "ok",
                "scenario": threat.map(|t| t.as_str()),
                "verdict": verdict,
            });
            if verdict.is_mitigated() {
                Ok(v)
            } else {
                Err(Failure::domain("violated", "verdict violated").with_detail(v))
            }
        }
        SimnetCmd::Config { scenario, mutate } => {
            let mut cfg = match scenario.as_deref().map(threat_arg).transpose()? {
                Some(t) => {
                    let mut c = t.config(ctx.seed.unwrap_or(1));
                    if mutate {
                        t.mutate(&mut c);
                    }
                    c
                }
                None => SimConfig::default(),
            };
            if let Some(seed) = ctx.seed {
                cfg.seed = seed;
            }
            if let Some(out) = &ctx.out {
                write(out, cfg.to_text().as_bytes())?;
            }
            Ok(json!(cfg.to_pairs()))
        }
    }
}

fn load_ledger(path: &Path) -> Result<LocalLedger, Failure> {
    LocalLedger::from_bytes(&read(path)?).map_err(|e| malformed("ledger state", e))
}

fn ledger(cmd: LedgerCmd, ctx: &Ctx) -> Out {
    match cmd {
        LedgerCmd::Verify { snapshot, root } => {
            let expected = RootHash(digest_arg("root", &root)?);
            match verify_snapshot(&read(&snapshot)?, &expected) {
                Ok(trie) => Ok(json!({ "entries": trie.len(), "root": expected.0.to_hex(), "valid": true })),
                Err(SnapshotError::RootMismatch { expected, actual }) => Err(Failure::domain(
                    "digest-mismatch",
                    format!("snapshot root {} does not match {}", actual.0.to_hex(), expected.0.to_hex()),
                )),
                Err(SnapshotError::DigestMismatch) => {
                    Err(Failure::domain("node-digest-mismatch", SnapshotError::DigestMismatch))
                }
                Err(e) => Err(malformed("snapshot", e)),
            }
        }
        LedgerCmd::Snapshot { state } => {
            let ledger = load_ledger(&state)?;
            let out = require_out(ctx)?;
            let trie = &ledger.state().trie;
            write(out, &encode_snapshot(trie))?;
            Ok(json!({ "entries": trie.len(), "root": ledger.state().root().0.to_hex() }))
        }
    }
}

fn lineage(cmd: LineageCmd, ctx: &Ctx) -> Out {
    match cmd {
        LineageCmd::Trace { data_id, state } => {
            let id = digest_arg("data-id", &data_id)?;
            let ledger = load_ledger(&state)?;
            let trie = &ledger.state().trie;
            let graph = trace_lineage(trie, &id).map_err(|e| Failure::domain("unknown-data", e))?;
            if let Some(out) = &ctx.out {
                let bundle = build_bundle(trie, &id).map_err(|e| Failure::domain("unknown-data", e))?;
                write(out, &bundle.to_bytes())?;
            }
            let graph: Value = serde_json::from_str(&graph.to_json()).expect("lineage export is JSON");
            Ok(json!({ "lineage": graph, "root": ledger.state().root().0.to_hex() }))
        }
        LineageCmd::Verify { data_id, root, bundle } => {
            let id = digest_arg("data-id", &data_id)?;
            let root = RootHash(digest_arg("root", &root)?);
            let bundle = match ProvenanceBundle::from_bytes(&read(&bundle)?) {
                Ok(b) => b,
                Err(e) => return Err(Failure::domain("bundle-malformed", e)),
            };
            match verify_provenance(&id, &root, &bundle) {
                Ok(()) => Ok(json!({ "data_id": id.to_hex(), "records": bundle.records.len(), "valid": true })),
                Err(r) => Err(Failure::domain("provenance-rejected", &r).with_detail(json!(r))),
            }
        }
    }
}

fn vendor_arg(s: &str) -> Result<Vendor, Failure> {
    Vendor::parse(s.trim()).ok_or_else(|| Failure::usage(format!("unknown vendor `{s}`")))
}

fn nonce_arg(s: &str) -> Result<[u8; NONCE_LEN], Failure> {
    hex::decode(s)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Failure::usage(format!("--nonce: expected {} hex digits", NONCE_LEN * 2)))
}

fn vendor_roots(ctx: &Ctx) -> VendorRoots {
    VendorRoots::from_seed(ctx.seed.unwrap_or(0))
}

fn attest(cmd: AttestCmd, ctx: &Ctx) -> Out {
    match cmd {
        AttestCmd::Verify { quote, measurement, vendors, nonce } => {
            let expected = digest_arg("measurement", &measurement)?;
            let vendors = vendors.iter().map(|v| vendor_arg(v)).collect::<Result<Vec<_>, _>>()?;
            let quote = AttestationQuote::from_bytes(&read(&quote)?).map_err(|e| malformed("quote", e))?;
            let nonce = match nonce {
                Some(n) => nonce_arg(&n)?,
                None => quote.freshness_nonce,
            };
            let trusted = vendor_roots(ctx).trusted(&vendors);
            match verify_quote(&quote, &expected, &trusted, &nonce) {
                Ok(()) => Ok(json!({
                    "measurement": quote.measurement.to_hex(),
                    "platform": quote.platform_id.0,
                    "valid": true,
                    "vendor": format!("{:?}", quote.vendor),
                })),
                Err(r) => Err(Failure::domain("quote-rejected", r).with_detail(json!({ "reason": r }))),
            }
        }
        AttestCmd::Quote { measurement, vendor, platform, nonce } => {
            let measurement = digest_arg("measurement", &measurement)?;
            let vendor = vendor_arg(&vendor)?;
            let nonce = nonce_arg(&nonce)?;
            let out = require_out(ctx)?;
            let mut rng = SeededRng::from_u64(ctx.seed.unwrap_or(0)).fork("cli-enclave");
            let id = vendor_roots(ctx).root(vendor).provision(PlatformId(platform), measurement, ClockRate::NOMINAL, &mut rng);
            let quote = generate_quote(&id, b"alctl", nonce).expect("freshly provisioned");
            write(out, &quote.to_bytes())?;
            Ok(json!({ "digest": quote.digest().to_hex(), "platform": platform, "vendor": format!("{vendor:?}") }))
        }
    }
}

fn shard_name(epoch: u64, index: u32) -> String {
    format!("shard-e{epoch}-{index}.bin")
}

fn meta_name(epoch: u64) -> String {
    format!("meta-e{epoch}.bin")
}

fn write_ceremony(dir: &Path, meta: &ShardedSecret, shards: &[Shard]) -> Out {
    fs::create_dir_all(dir).map_err(|e| Failure::domain("io", format!("{}: {e}", dir.display())))?;
    let meta_path = dir.join(meta_name(meta.epoch));
    write(&meta_path, &meta.to_bytes())?;
    let mut files = vec![];
    for s in shards {
        let p = dir.join(shard_name(s.epoch, s.index));
        write(&p, &s.to_bytes(meta.field_modulus))?;
        files.push(p.display().to_string());
    }
    Ok(json!({ "epoch": meta.epoch, "k": meta.k, "meta": meta_path.display().to_string(), "n": meta.n, "shards": files }))
}

fn load_ceremony(meta: Option<PathBuf>, shards: &[PathBuf]) -> Result<(ShardedSecret, Vec<Shard>), Failure> {
    let loaded = shards
        .iter()
        .map(|p| Shard::from_bytes(&read(p)?).map(|(s, _)| s).map_err(|e| malformed(&p.display().to_string(), e)))
        .collect::<Result<Vec<_>, _>>()?;
    let meta_path = match meta {
        Some(m) => m,
        None => shards[0].parent().unwrap_or(Path::new(".")).join(meta_name(loaded[0].epoch)),
    };
    let meta = ShardedSecret::from_bytes(&read(&meta_path)?).map_err(|e| malformed("meta", e))?;
    Ok((meta, loaded))
}

fn keys(cmd: KeysCmd, ctx: &Ctx) -> Out {
    let mut rng = SeededRng::from_u64(ctx.seed.unwrap_or(0)).fork("cli-keys");
    let dir = ctx.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match cmd {
        KeysCmd::Split { secret_hex, n, k } => {
            let secret = hex::decode(&secret_hex).map_err(|_| Failure::usage("--secret-hex: expected hex"))?;
            let (meta, shards) = split(&secret, n, k, &mut rng).map_err(|e| Failure::usage(e))?;
            write_ceremony(&dir, &meta, &shards)
        }
        KeysCmd::Reconstruct { meta, shards } => {
            let (meta, shards) = load_ceremony(meta, &shards)?;
            let secret = reconstruct_checked(&shards, &meta).map_err(|e| Failure::domain("reconstruct-failed", e))?;
            Ok(json!({ "epoch": meta.epoch, "secret_hex": hex::encode(secret) }))
        }
        KeysCmd::Rotate { meta, shards } => {
            let (meta, shards) = load_ceremony(meta, &shards)?;
            let (m2, s2) = rotate(&shards, &meta, &mut rng).map_err(|e| Failure::domain("rotate-failed", e))?;
            write_ceremony(&dir, &m2, &s2)
        }
    }
}

fn derived_key(label: &str, seed: u64) -> [u8; 32] {
    *hash_parts(label, &[&seed.to_be_bytes()]).as_bytes()
}

fn builtin_program(name: &str) -> Result<Program, Failure> {
    match name {
        "identity" => Ok(Program::identity()),
        "hash" => Ok(Program(vec![Instr::Input(0), Instr::Hash])),
        "concat" => Ok(Program(vec![Instr::Input(0), Instr::Input(1), Instr::Concat])),
        other => Err(Failure::usage(format!("unknown program `{other}` (identity, hash, concat)"))),
    }
}

fn need<'a>(v: &'a Option<String>, flag: &str) -> Result<&'a str, Failure> {
    v.as_deref().ok_or_else(|| Failure::usage(format!("--{flag} is required for this op")))
}

fn build(a: &BuildArgs, seed: u64) -> Result<Transaction, Failure> {
    let client = SigningKey::from_seed(derived_key("cli-client", seed));
    let grantee = || {
        let s = a.grantee_seed.ok_or_else(|| Failure::usage("--grantee-seed is required for this op"))?;
        Ok::<_, Failure>((SigningKey::from_seed(derived_key("cli-grantee", s)), AeadKey::from_bytes(derived_key("cli-grantee-key", s))))
    };
    let op = match a.op.as_str() {
        "put" => Op::Put { key: need(&a.key, "key")?.into(), value: need(&a.value, "value")?.into() },
        "get" => Op::Get { key: need(&a.key, "key")?.into() },
        "delete" => Op::Delete { key: need(&a.key, "key")?.into() },
        "ingest" => {
            return Ok(Transaction::ingest(&a.app, need(&a.payload, "payload")?.as_bytes(), need(&a.source, "source")?, &client, a.nonce))
        }
        "run" => {
            let m = digest_arg("measurement", need(&a.measurement, "measurement")?)?;
            return Ok(Transaction::run(&a.app, m, need(&a.payload, "payload")?.as_bytes(), a.budget, &client, a.nonce));
        }
        "register" => {
            let name = need(&a.program, "program")?;
            let program = builtin_program(name)?;
            let manifest = CodeManifest::new_signed(name, 1, program.code_digest(), &client);
            Op::RegisterProgram { manifest, program: program.to_bytes() }
        }
        "transform" => Op::Transform {
            inputs: a.inputs.iter().map(|s| digest_arg("inputs", s)).collect::<Result<_, _>>()?,
            measurement: digest_arg("measurement", need(&a.measurement, "measurement")?)?,
            step_budget: a.budget,
        },
        "grant" => {
            let (vk, key) = grantee()?;
            Op::Grant { data_id: digest_arg("data-id", need(&a.data_id, "data-id")?)?, grantee: vk.verify_key(), grantee_key: key }
        }
        "revoke" => {
            let (vk, _) = grantee()?;
            Op::Revoke { data_id: digest_arg("data-id", need(&a.data_id, "data-id")?)?, grantee: vk.verify_key().fingerprint() }
        }
        other => return Err(Failure::usage(format!("unknown op `{other}`"))),
    };
    Ok(Transaction::new_signed(&a.app, op, &client, a.nonce))
}

fn tx(cmd: TxCmd, ctx: &Ctx) -> Out {
    match cmd {
        TxCmd::Build(args) => {
            let tx = build(&args, ctx.seed.unwrap_or(0))?;
            write(require_out(ctx)?, &tx.to_bytes())?;
            Ok(json!({ "op": tx.op.name(), "tx_id": tx.id().to_hex() }))
        }
        TxCmd::Submit { file, state } => {
            let tx = Transaction::from_bytes(&read(&file)?).map_err(|e| malformed("transaction", e))?;
            let mut ledger = if state.exists() { load_ledger(&state)? } else { LocalLedger::new(ctx.seed.unwrap_or(0)) };
            let result = ledger.submit(tx);
            write(&state, &ledger.to_bytes())?;
            Ok(json!({ "result": result, "root": ledger.state().root().0.to_hex() }))
        }
        TxCmd::Result { id, state } => {
            let id = digest_arg("id", &id)?;
            let ledger = load_ledger(&state)?;
            match ledger.result(&id) {
                Some(r) => Ok(json!({ "result": r })),
                None => Err(Failure::domain("unknown-transaction", format!("no committed transaction {}", id.to_hex()))),
            }
        }
    }
}
