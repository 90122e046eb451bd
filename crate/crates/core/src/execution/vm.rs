//! Stack machine for registered programs.
//!
//! Values are signed 64-bit integers or octet strings. Randomness is only
//! reachable through [`Instr::Seed`], which reads the consensus-agreed epoch
//! seed stream; there is no clock, node identity or other ambient input.

use serde::Serialize;
use thiserror::Error;

use crate::codec::{CodecError, Decoder, Encoder};
use crate::crypto::{hash, hash_parts, rng_stream, Digest};
use crate::mpt_ledger::{RootHash, Trie};

pub const MAX_STEP_BUDGET: u32 = 10_000;
pub const MAX_VALUE_LEN: usize = 4096;
pub const MAX_SEED_DRAW: u16 = 1024;

const PROGRAM_MAGIC: &[u8; 4] = b"PROG";
const PROGRAM_VERSION: u8 = 1;

/// Program-visible state lives under this prefix.
pub const STATE_PREFIX: &[u8] = b"k/";

pub fn state_key(user_key: &[u8]) -> Vec<u8> {
    [STATE_PREFIX, user_key].concat()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instr {
    PushInt(i64),
    PushBytes(Vec<u8>),
    /// Pushes the i-th input.
    Input(u8),
    Dup,
    Swap,
    Pop,
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    /// bytes → 32-octet digest
    Hash,
    Concat,
    /// int → 8 octets big-endian
    ToBytes,
    Len,
    /// key → value (empty if absent)
    StateGet,
    /// key value →
    StatePut,
    /// Pushes the next n octets of the epoch seed stream.
    Seed(u16),
    Jump(u32),
    /// Pops an int; jumps if it is zero.
    JumpIfZero(u32),
    Halt,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program(pub Vec<Instr>);

impl Program {
    /// Outputs its first input unchanged.
    pub fn identity() -> Self {
        Program(vec![Instr::Input(0)])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(PROGRAM_MAGIC, PROGRAM_VERSION);
        enc.u32(self.0.len() as u32);
        for i in &self.0 {
            match i {
                Instr::PushInt(v) => enc.u8(0x01).u64(*v as u64),
                Instr::PushBytes(b) => enc.u8(0x02).bytes(b),
                Instr::Input(n) => enc.u8(0x03).u8(*n),
                Instr::Dup => enc.u8(0x04),
                Instr::Swap => enc.u8(0x05),
                Instr::Pop => enc.u8(0x06),
                Instr::Add => enc.u8(0x07),
                Instr::Sub => enc.u8(0x08),
                Instr::Mul => enc.u8(0x09),
                Instr::Div => enc.u8(0x0a),
                Instr::Mod => enc.u8(0x0b),
                Instr::Hash => enc.u8(0x0c),
                Instr::Concat => enc.u8(0x0d),
                Instr::ToBytes => enc.u8(0x0e),
                Instr::Len => enc.u8(0x0f),
                Instr::StateGet => enc.u8(0x10),
                Instr::StatePut => enc.u8(0x11),
                Instr::Seed(n) => enc.u8(0x12).u16(*n),
                Instr::Jump(t) => enc.u8(0x13).u32(*t),
                Instr::JumpIfZero(t) => enc.u8(0x14).u32(*t),
                Instr::Halt => enc.u8(0x15),
            };
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::with_header(bytes, PROGRAM_MAGIC, PROGRAM_VERSION)?;
        let n = dec.count(1)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(match dec.u8()? {
                0x01 => Instr::PushInt(dec.u64()? as i64),
                0x02 => Instr::PushBytes(dec.vec()?),
                0x03 => Instr::Input(dec.u8()?),
                0x04 => Instr::Dup,
                0x05 => Instr::Swap,
                0x06 => Instr::Pop,
                0x07 => Instr::Add,
                0x08 => Instr::Sub,
                0x09 => Instr::Mul,
                0x0a => Instr::Div,
                0x0b => Instr::Mod,
                0x0c => Instr::Hash,
                0x0d => Instr::Concat,
                0x0e => Instr::ToBytes,
                0x0f => Instr::Len,
                0x10 => Instr::StateGet,
                0x11 => Instr::StatePut,
                0x12 => Instr::Seed(dec.u16()?),
                0x13 => Instr::Jump(dec.u32()?),
                0x14 => Instr::JumpIfZero(dec.u32()?),
                0x15 => Instr::Halt,
                tag => return Err(CodecError::InvalidTag { what: "instruction", tag }),
            });
        }
        dec.finish()?;
        Ok(Program(out))
    }

    pub fn code_digest(&self) -> Digest {
        hash(&self.to_bytes())
    }
}

/// Consensus-agreed randomness for one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochSeed {
    pub epoch: u64,
    pub seed: Digest,
}

impl EpochSeed {
    pub fn derive(root: &RootHash, epoch: u64) -> Self {
        Self { epoch, seed: hash_parts("epoch-seed", &[root.0.as_bytes(), &epoch.to_be_bytes()]) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Error)]
#[serde(rename_all = "kebab-case")]
pub enum ProgramFault {
    #[error("stack underflow at pc {0}")]
    StackUnderflow(u32),
    #[error("type mismatch at pc {0}")]
    TypeMismatch(u32),
    #[error("division by zero at pc {0}")]
    DivisionByZero(u32),
    #[error("arithmetic overflow at pc {0}")]
    Overflow(u32),
    #[error("step budget exhausted")]
    BudgetExhausted,
    #[error("step budget above {MAX_STEP_BUDGET}")]
    BudgetTooLarge,
    #[error("jump out of range at pc {0}")]
    BadJump(u32),
    #[error("missing input {0}")]
    MissingInput(u8),
    #[error("value too large at pc {0}")]
    ValueTooLarge(u32),
    #[error("invalid state key or value at pc {0}")]
    InvalidState(u32),
    #[error("program ended with an empty stack")]
    EmptyOutput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Value {
    Int(i64),
    Bytes(Vec<u8>),
}

impl Value {
    fn into_bytes(self) -> Vec<u8> {
        match self {
            Value::Int(v) => v.to_be_bytes().to_vec(),
            Value::Bytes(b) => b,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProgramOutput {
    pub output: Vec<u8>,
    /// State after the program's writes.
    pub state: Trie,
    pub steps: u32,
}

/// Runs `program` to completion. The result is a pure function of the
/// program, inputs, state and seed; a fault discards all state writes.
pub fn run_program(
    program: &Program,
    inputs: &[Vec<u8>],
    state: &Trie,
    seed: &EpochSeed,
    budget: u32,
) -> Result<ProgramOutput, ProgramFault> {
    if budget > MAX_STEP_BUDGET {
        return Err(ProgramFault::BudgetTooLarge);
    }
    let mut stack: Vec<Value> = Vec::new();
    let mut state = state.clone();
    let mut pc: u32 = 0;
    let mut steps: u32 = 0;
    let mut draws: u64 = 0;

    while let Some(instr) = program.0.get(pc as usize) {
        if steps == budget {
            return Err(ProgramFault::BudgetExhausted);
        }
        steps += 1;
        let at = pc;
        pc += 1;
        let pop = |stack: &mut Vec<Value>| stack.pop().ok_or(ProgramFault::StackUnderflow(at));
        let pop_int = |stack: &mut Vec<Value>| match stack.pop() {
            Some(Value::Int(v)) => Ok(v),
            Some(_) => Err(ProgramFault::TypeMismatch(at)),
            None => Err(ProgramFault::StackUnderflow(at)),
        };
        let pop_bytes = |stack: &mut Vec<Value>| match stack.pop() {
            Some(Value::Bytes(b)) => Ok(b),
            Some(_) => Err(ProgramFault::TypeMismatch(at)),
            None => Err(ProgramFault::StackUnderflow(at)),
        };
        match instr {
            Instr::PushInt(v) => stack.push(Value::Int(*v)),
            Instr::PushBytes(b) => stack.push(Value::Bytes(b.clone())),
            Instr::Input(n) => {
                let input = inputs.get(*n as usize).ok_or(ProgramFault::MissingInput(*n))?;
                stack.push(Value::Bytes(input.clone()));
            }
            Instr::Dup => {
                let top = stack.last().cloned().ok_or(ProgramFault::StackUnderflow(at))?;
                stack.push(top);
            }
            Instr::Swap => {
                let a = pop(&mut stack)?;
                let b = pop(&mut stack)?;
                stack.push(a);
                stack.push(b);
            }
            Instr::Pop => {
                pop(&mut stack)?;
            }
            Instr::Add | Instr::Sub | Instr::Mul | Instr::Div | Instr::Mod => {
                let b = pop_int(&mut stack)?;
                let a = pop_int(&mut stack)?;
                if matches!(instr, Instr::Div | Instr::Mod) && b == 0 {
                    return Err(ProgramFault::DivisionByZero(at));
                }
                let r = match instr {
                    Instr::Add => a.checked_add(b),
                    Instr::Sub => a.checked_sub(b),
                    Instr::Mul => a.checked_mul(b),
                    Instr::Div => a.checked_div(b),
                    _ => a.checked_rem(b),
                };
                stack.push(Value::Int(r.ok_or(ProgramFault::Overflow(at))?));
            }
            Instr::Hash => {
                let b = pop(&mut stack)?.into_bytes();
                stack.push(Value::Bytes(hash(&b).as_bytes().to_vec()));
            }
            Instr::Concat => {
                let b = pop_bytes(&mut stack)?;
                let mut a = pop_bytes(&mut stack)?;
                if a.len() + b.len() > MAX_VALUE_LEN {
                    return Err(ProgramFault::ValueTooLarge(at));
                }
                a.extend_from_slice(&b);
                stack.push(Value::Bytes(a));
            }
            Instr::ToBytes => {
                let v = pop_int(&mut stack)?;
                stack.push(Value::Bytes(v.to_be_bytes().to_vec()));
            }
            Instr::Len => {
                let b = pop_bytes(&mut stack)?;
                stack.push(Value::Int(b.len() as i64));
            }
            Instr::StateGet => {
                let key = pop_bytes(&mut stack)?;
                let v = state.get(&state_key(&key)).map(<[u8]>::to_vec).unwrap_or_default();
                stack.push(Value::Bytes(v));
            }
            Instr::StatePut => {
                let value = pop(&mut stack)?.into_bytes();
                let key = pop_bytes(&mut stack)?;
                state = state.insert(&state_key(&key), &value).map_err(|_| ProgramFault::InvalidState(at))?;
            }
            Instr::Seed(n) => {
                if *n > MAX_SEED_DRAW {
                    return Err(ProgramFault::ValueTooLarge(at));
                }
                stack.push(Value::Bytes(rng_stream(seed.seed.as_bytes(), draws, *n as usize)));
                draws += 1;
            }
            Instr::Jump(t) => pc = *t,
            Instr::JumpIfZero(t) => {
                if pop_int(&mut stack)? == 0 {
                    pc = *t;
                }
            }
            Instr::Halt => break,
        }
        if pc as usize > program.0.len() {
            return Err(ProgramFault::BadJump(at));
        }
    }
    let output = stack.pop().ok_or(ProgramFault::EmptyOutput)?.into_bytes();
    Ok(ProgramOutput { output, state, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(epoch: u64) -> EpochSeed {
        EpochSeed::derive(&RootHash::empty(), epoch)
    }

    fn run(p: Vec<Instr>, input: &[u8]) -> Result<Vec<u8>, ProgramFault> {
        run_program(&Program(p), &[input.to_vec()], &Trie::new(), &seed(1), MAX_STEP_BUDGET).map(|o| o.output)
    }

    #[test]
    fn identity_outputs_input() {
        let out = run_program(&Program::identity(), &[b"hello".to_vec()], &Trie::new(), &seed(1), 10).unwrap();
        assert_eq!(out.output, b"hello");
    }

    #[test]
    fn arithmetic_and_faults() {
        use Instr::*;
        assert_eq!(run(vec![PushInt(6), PushInt(7), Mul], b"").unwrap(), 42i64.to_be_bytes());
        assert_eq!(run(vec![PushInt(1), PushInt(0), Div], b""), Err(ProgramFault::DivisionByZero(2)));
        assert_eq!(run(vec![PushInt(i64::MAX), PushInt(1), Add], b""), Err(ProgramFault::Overflow(2)));
        assert_eq!(run(vec![Add], b""), Err(ProgramFault::StackUnderflow(0)));
        assert_eq!(run(vec![PushBytes(vec![1]), PushInt(1), Add], b""), Err(ProgramFault::TypeMismatch(2)));
        assert_eq!(run(vec![Jump(0)], b""), Err(ProgramFault::BudgetExhausted));
        assert_eq!(run(vec![Jump(7)], b""), Err(ProgramFault::BadJump(0)));
        assert_eq!(run(vec![], b""), Err(ProgramFault::EmptyOutput));
        assert_eq!(run(vec![Input(1)], b""), Err(ProgramFault::MissingInput(1)));
    }

    #[test]
    fn budget_above_maximum_rejected() {
        let r = run_program(&Program::identity(), &[vec![]], &Trie::new(), &seed(1), MAX_STEP_BUDGET + 1);
        assert_eq!(r.unwrap_err(), ProgramFault::BudgetTooLarge);
    }

    #[test]
    fn loop_counts_down() {
        use Instr::*;
        // counter = 5; while counter != 0 { counter -= 1 }; push "done"
        let p = vec![PushInt(5), Dup, JumpIfZero(6), PushInt(1), Sub, Jump(1), PushBytes(b"done".to_vec())];
        assert_eq!(run(p, b"").unwrap(), b"done");
    }

    #[test]
    fn seed_reads_follow_the_epoch_stream() {
        let p = Program(vec![Instr::Seed(8)]);
        let a = run_program(&p, &[], &Trie::new(), &seed(3), 10).unwrap().output;
        let b = run_program(&p, &[], &Trie::new(), &seed(3), 10).unwrap().output;
        let c = run_program(&p, &[], &Trie::new(), &seed(4), 10).unwrap().output;
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, rng_stream(seed(3).seed.as_bytes(), 0, 8));
    }

    #[test]
    fn state_writes_are_visible_and_discarded_on_fault() {
        use Instr::*;
        let p = Program(vec![PushBytes(b"x".to_vec()), Input(0), StatePut, PushBytes(b"x".to_vec()), StateGet]);
        let out = run_program(&p, &[b"v".to_vec()], &Trie::new(), &seed(1), 100).unwrap();
        assert_eq!(out.output, b"v");
        assert_eq!(out.state.get(&state_key(b"x")), Some(b"v".as_slice()));

        let faulting = Program(vec![PushBytes(b"x".to_vec()), Input(0), StatePut, PushInt(1), PushInt(0), Div]);
        assert!(run_program(&faulting, &[b"v".to_vec()], &Trie::new(), &seed(1), 100).is_err());
    }

    #[test]
    fn program_encoding_round_trips() {
        use Instr::*;
        let p = Program(vec![
            PushInt(-3),
            PushBytes(vec![1, 2]),
            Input(0),
            Dup,
            Swap,
            Pop,
            Add,
            Sub,
            Mul,
            Div,
            Mod,
            Hash,
            Concat,
            ToBytes,
            Len,
            StateGet,
            StatePut,
            Seed(8),
            Jump(1),
            JumpIfZero(2),
            Halt,
        ]);
        assert_eq!(Program::from_bytes(&p.to_bytes()).unwrap(), p);
        let mut bad = p.to_bytes();
        bad.push(0);
        assert!(Program::from_bytes(&bad).is_err());
    }
}
