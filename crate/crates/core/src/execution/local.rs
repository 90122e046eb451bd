//! Single-writer ledger for offline use: one simulated member orders
//! submitted transactions and applies them immediately. The persisted form
//! is the seed plus the committed log; state is rebuilt by replay.

use crate::attestation::{PlatformId, Vendor};
use crate::codec::{CodecError, Decoder, Encoder};
use crate::consensus::{LogEntry, Member};
use crate::crypto::{hash_parts, Digest, SigningKey};

use super::{replay, Command, ExecConfig, ExecState, Genesis, Transaction, TxResult};

const LEDGER_MAGIC: &[u8; 4] = b"LLDG";
const LEDGER_VERSION: u8 = 1;
const TERM: u64 = 1;
const WRITER: PlatformId = PlatformId(1);

pub struct LocalLedger {
    seed: u64,
    writer: SigningKey,
    genesis: Genesis,
    log: Vec<LogEntry>,
    state: ExecState,
}

impl LocalLedger {
    pub fn new(seed: u64) -> Self {
        let writer = SigningKey::from_seed(*hash_parts("local-writer", &[&seed.to_be_bytes()]).as_bytes());
        let genesis = Genesis {
            cluster_secret: *hash_parts("local-cluster-secret", &[&seed.to_be_bytes()]).as_bytes(),
            members: vec![Member { platform_id: WRITER, aik_vk: writer.verify_key(), vendor: Vendor::A }],
        };
        let state = ExecState::genesis(&genesis, ExecConfig::default());
        Self { seed, writer, genesis, log: Vec::new(), state }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn genesis(&self) -> &Genesis {
        &self.genesis
    }

    pub fn state(&self) -> &ExecState {
        &self.state
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// Commits `tx` as the next entry and returns its result.
    pub fn submit(&mut self, tx: Transaction) -> TxResult {
        let index = self.state.last_applied + 1;
        let entry = LogEntry::new_signed(TERM, index, Command::Tx(tx).to_bytes(), WRITER, &self.writer);
        let out = self.state.apply(&entry).expect("next index");
        self.log.push(entry);
        out.result.expect("transaction entries always yield a result")
    }

    pub fn result(&self, tx_id: &Digest) -> Option<&TxResult> {
        self.state.results.get(tx_id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(LEDGER_MAGIC, LEDGER_VERSION);
        enc.u64(self.seed).u32(self.log.len() as u32);
        for e in &self.log {
            e.encode(&mut enc);
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::with_header(bytes, LEDGER_MAGIC, LEDGER_VERSION)?;
        let seed = dec.u64()?;
        let n = dec.count(8)?;
        let log = (0..n).map(|_| LogEntry::decode(&mut dec)).collect::<Result<Vec<_>, _>>()?;
        dec.finish()?;
        let mut ledger = Self::new(seed);
        ledger.state = replay(&ledger.genesis, ExecConfig::default(), &log).map_err(|_| CodecError::Invalid("log order"))?;
        ledger.log = log;
        Ok(ledger)
    }
}
