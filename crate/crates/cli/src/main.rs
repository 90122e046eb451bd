//! `alctl`: operator and auditor entry point.
//!
//! Exit status is 0 on success, 1 on a domain failure and 2 on a usage
//! error. Every failure prints one JSON object with an `error_code` field.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::{json, Value};

use attested_ledger::simnet::CONFIG_KEYS;

#[derive(Parser)]
#[command(name = "alctl", version, about = "Simulate, audit and operate the attested provenance ledger")]
struct Cli {
    /// Seed for simulated vendor roots and derived keys.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print canonical single-line JSON (sorted keys).
    #[arg(long, global = true)]
    json: bool,
    /// Output file or directory for commands that write one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Deterministic cluster simulations and threat scenarios.
    #[command(subcommand)]
    Simnet(SimnetCmd),
    /// Ledger snapshots.
    #[command(subcommand)]
    Ledger(LedgerCmd),
    /// Provenance export and offline audit.
    #[command(subcommand)]
    Lineage(LineageCmd),
    /// Attestation quotes.
    #[command(subcommand)]
    Attest(AttestCmd),
    /// Threshold shard ceremonies.
    #[command(subcommand)]
    Keys(KeysCmd),
    /// Transactions against a local single-writer ledger.
    #[command(subcommand)]
    Tx(TxCmd),
}

fn config_help() -> String {
    let mut s = String::from("Config file: one `key = value` per line, `#` starts a comment.\n\nKeys:\n");
    for (k, d) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<28} {d}\n"));
    }
    s
}

#[derive(Subcommand)]
pub enum SimnetCmd {
    /// Runs a simulation and writes its trace (`--out`).
    #[command(after_help = config_help())]
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Checks a trace's safety invariants, optionally a threat predicate,
    /// and replays every node's log from genesis.
    Check {
        #[arg(long)]
        trace: PathBuf,
        /// Threat id (S1, I1, I3, I4, E1, E2, T2, T3, D1, S2).
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Prints a config file: defaults, or a scenario's catalog parameters.
    #[command(after_help = config_help())]
    Config {
        #[arg(long)]
        scenario: Option<String>,
        /// Apply the scenario's mutation (disables its mitigation).
        #[arg(long, requires = "scenario")]
        mutate: bool,
    },
}

#[derive(Subcommand)]
pub enum LedgerCmd {
    /// Recomputes a snapshot's root and compares it with `--root`.
    Verify {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        root: String,
    },
    /// Writes the current state of a local ledger as a snapshot (`--out`).
    Snapshot {
        #[arg(long, default_value = "ledger.bin")]
        state: PathBuf,
    },
}

#[derive(Subcommand)]
pub enum LineageCmd {
    /// Exports the lineage graph of a datum; `--out` also writes its bundle.
    Trace {
        #[arg(long)]
        data_id: String,
        #[arg(long, default_value = "ledger.bin")]
        state: PathBuf,
    },
    /// Verifies a provenance bundle offline against a root hash.
    Verify {
        #[arg(long)]
        data_id: String,
        #[arg(long)]
        root: String,
        #[arg(long)]
        bundle: PathBuf,
    },
}

#[derive(Subcommand)]
pub enum AttestCmd {
    /// Verifies a quote against the simulated vendor roots for `--seed`.
    Verify {
        #[arg(long)]
        quote: PathBuf,
        #[arg(long)]
        measurement: String,
        /// Trusted vendors, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "A,B,C")]
        vendors: Vec<String>,
        /// Expected freshness nonce (hex); unchecked when absent.
        #[arg(long)]
        nonce: Option<String>,
    },
    /// Issues a quote from a simulated enclave (`--out`).
    Quote {
        #[arg(long)]
        measurement: String,
        #[arg(long, default_value = "A")]
        vendor: String,
        #[arg(long, default_value_t = 1)]
        platform: u32,
        #[arg(long, default_value = "00000000000000000000000000000000")]
        nonce: String,
    },
}

#[derive(Subcommand)]
pub enum KeysCmd {
    /// Splits a secret into `n` shard files, any `k` of which recover it.
    Split {
        #[arg(long)]
        secret_hex: String,
        #[arg(long)]
        n: u32,
        #[arg(long)]
        k: u32,
    },
    /// Recovers the secret from shard files.
    Reconstruct {
        /// Ceremony metadata; defaults to the matching meta file beside the
        /// first shard.
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(required = true)]
        shards: Vec<PathBuf>,
    },
    /// Refreshes every holder's shard into a fresh epoch; needs all `n`.
    Rotate {
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(required = true)]
        shards: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
pub enum TxCmd {
    /// Encodes a signed transaction (`--out`). The client key derives from
    /// `--seed`.
    Build(BuildArgs),
    /// Commits an encoded transaction to the local ledger.
    Submit {
        #[arg(long)]
        file: PathBuf,
        #[arg(long, default_value = "ledger.bin")]
        state: PathBuf,
    },
    /// Looks up a committed transaction's result.
    Result {
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "ledger.bin")]
        state: PathBuf,
    },
}

#[derive(Args)]
pub struct BuildArgs {
    /// put, get, delete, ingest, register, transform, run, grant or revoke.
    #[arg(long)]
    pub op: String,
    #[arg(long, default_value_t = 1)]
    pub nonce: u64,
    #[arg(long, default_value = "app")]
    pub app: String,
    #[arg(long)]
    pub key: Option<String>,
    #[arg(long)]
    pub value: Option<String>,
    /// Payload or program input, as text.
    #[arg(long)]
    pub payload: Option<String>,
    #[arg(long)]
    pub source: Option<String>,
    /// Built-in program to register: identity, hash or concat.
    #[arg(long)]
    pub program: Option<String>,
    #[arg(long)]
    pub measurement: Option<String>,
    /// Input data ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub inputs: Vec<String>,
    #[arg(long)]
    pub data_id: Option<String>,
    /// Seed of the grantee's keys for grant and revoke.
    #[arg(long)]
    pub grantee_seed: Option<u64>,
    #[arg(long, default_value_t = 1_000)]
    pub budget: u32,
}

/// A failed command: stable code, message and exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: &'static str,
    pub message: String,
    pub usage: bool,
    pub detail: Option<Value>,
}

impl Failure {
    pub fn domain(code: &'static str, message: impl ToString) -> Self {
        Self { code, message: message.to_string(), usage: false, detail: None }
    }

    pub fn usage(message: impl ToString) -> Self {
        Self { code: "usage", message: message.to_string(), usage: true, detail: None }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }
}

pub struct Ctx {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn print(json: bool, v: &Value) {
    if json {
        println!("{v}");
        return;
    }
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                match v {
                    Value::String(s) => println!("{k}: {s}"),
                    other => println!("{k}: {other}"),
                }
            }
        }
        Value::String(s) => print!("{s}"),
        other => println!("{other}"),
    }
}

/// Help text of the deepest subcommand named in `args`.
fn help_for(args: &[String]) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    for a in args.iter().skip(1) {
        if let Some(sub) = cmd.find_subcommand(a).cloned() {
            cmd = sub;
        }
    }
    cmd.render_help().to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let message: Vec<&str> =
                text.lines().take_while(|l| !l.trim().is_empty()).map(|l| l.trim().trim_start_matches("error: ")).collect();
            println!("{}", json!({ "error_code": "usage", "message": message.join(" ") }));
            eprintln!("{}", e.render());
            eprint!("{}", help_for(&std::env::args().collect::<Vec<_>>()));
            return ExitCode::from(2);
        }
    };
    let ctx = Ctx { seed: cli.seed, out: cli.out };
    match commands::dispatch(cli.command, &ctx) {
        Ok(v) => {
            print(cli.json, &v);
            ExitCode::SUCCESS
        }
        Err(f) => {
            let mut obj = json!({ "error_code": f.code, "message": f.message });
            if let Some(d) = f.detail {
                obj["detail"] = d;
            }
            println!("{obj}");
            if f.usage {
                eprint!("{}", help_for(&std::env::args().collect::<Vec<_>>()));
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
