//! Threshold sharing of the cluster secret over a small prime field, with
//! hash commitments and proactive epoch rotation.
//!
//! Each secret octet is shared independently with its own degree `k-1`
//! polynomial. The production field is GF(257); tests also run over GF(7).
//! Rotation adds a fresh polynomial with zero constant term, which leaves
//! the secret unchanged while re-randomising every share.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::codec::{CodecError, Decoder, Encoder};
use crate::crypto::{hash_parts, Digest, SeededRng};

pub const PRODUCTION_MODULUS: u32 = 257;

const SHARD_MAGIC: &[u8; 4] = b"SHRD";
const META_MAGIC: &[u8; 4] = b"SHMT";
const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShardingError {
    #[error("invalid parameters: {0}")]
    Parameters(&'static str),
    #[error("{have} shards below threshold {k}")]
    BelowThreshold { have: usize, k: usize },
    #[error("shards from different epochs")]
    MixedEpoch,
    #[error("shard epoch {shard} does not match metadata epoch {meta}")]
    EpochMismatch { shard: u64, meta: u64 },
    #[error("duplicate shard index {0}")]
    DuplicateIndex(u32),
    #[error("rotation needs all {n} shards, got {have}")]
    IncompleteSet { have: usize, n: usize },
    #[error("shard {0} fails its commitment")]
    InvalidShard(u32),
    #[error("reconstructed polynomial does not match the coefficient commitments")]
    CommitmentMismatch,
    #[error("reconstructed value {0} is not an octet")]
    NotAnOctet(u32),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Arithmetic modulo a prime below 2^16.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrimeField {
    modulus: u32,
}

impl PrimeField {
    pub fn new(modulus: u32) -> Result<Self, ShardingError> {
        if !(3..=u16::MAX as u32).contains(&modulus) || !is_prime(modulus) {
            return Err(ShardingError::Parameters("modulus must be an odd prime below 2^16"));
        }
        Ok(Self { modulus })
    }

    pub fn production() -> Self {
        Self { modulus: PRODUCTION_MODULUS }
    }

    pub fn modulus(&self) -> u32 {
        self.modulus
    }

    pub fn add(&self, a: u32, b: u32) -> u32 {
        ((a as u64 + b as u64) % self.modulus as u64) as u32
    }

    pub fn sub(&self, a: u32, b: u32) -> u32 {
        ((a as u64 + self.modulus as u64 - (b as u64 % self.modulus as u64)) % self.modulus as u64)
            as u32
    }

    pub fn mul(&self, a: u32, b: u32) -> u32 {
        ((a as u64 * b as u64) % self.modulus as u64) as u32
    }

    pub fn pow(&self, mut base: u32, mut exp: u32) -> u32 {
        let mut acc = 1u32;
        base %= self.modulus;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    pub fn inv(&self, a: u32) -> u32 {
        debug_assert!(a % self.modulus != 0, "zero has no inverse");
        self.pow(a, self.modulus - 2)
    }

    /// Horner evaluation of `coeffs[0] + coeffs[1] x + ...`.
    pub fn eval(&self, coeffs: &[u32], x: u32) -> u32 {
        coeffs.iter().rev().fold(0, |acc, &c| self.add(self.mul(acc, x), c))
    }

    fn random(&self, rng: &mut SeededRng) -> u32 {
        rng.range_inclusive(0, self.modulus as u64 - 1) as u32
    }
}

fn is_prime(n: u32) -> bool {
    n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| n % d != 0)
}

/// Public parameters and commitments for one epoch of a shared secret.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardedSecret {
    pub n: u32,
    pub k: u32,
    pub epoch: u64,
    pub field_modulus: u32,
    /// Number of field elements per shard (one per secret octet).
    pub width: u32,
    /// One commitment per polynomial degree, over that coefficient of every
    /// per-octet polynomial.
    pub commitments: Vec<Digest>,
    /// One commitment per shard index.
    pub share_commitments: Vec<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub index: u32,
    pub values: Vec<u32>,
    pub epoch: u64,
}

fn encode_values(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as u16).to_be_bytes()).collect()
}

fn coefficient_commitment(epoch: u64, modulus: u32, degree: u32, column: &[u32]) -> Digest {
    hash_parts(
        "shamir-coefficient",
        &[&epoch.to_be_bytes(), &modulus.to_be_bytes(), &degree.to_be_bytes(), &encode_values(column)],
    )
}

fn share_commitment(epoch: u64, modulus: u32, index: u32, values: &[u32]) -> Digest {
    hash_parts(
        "shamir-share",
        &[&epoch.to_be_bytes(), &modulus.to_be_bytes(), &index.to_be_bytes(), &encode_values(values)],
    )
}

/// `polys[i]` holds the coefficients for secret element `i`.
fn build(polys: &[Vec<u32>], n: u32, k: u32, epoch: u64, field: PrimeField) -> (ShardedSecret, Vec<Shard>) {
    let commitments = (0..k)
        .map(|d| {
            let column: Vec<u32> = polys.iter().map(|p| p[d as usize]).collect();
            coefficient_commitment(epoch, field.modulus, d, &column)
        })
        .collect();
    let shards: Vec<Shard> = (1..=n)
        .map(|x| Shard { index: x, values: polys.iter().map(|p| field.eval(p, x)).collect(), epoch })
        .collect();
    let share_commitments =
        shards.iter().map(|s| share_commitment(epoch, field.modulus, s.index, &s.values)).collect();
    let meta = ShardedSecret {
        n,
        k,
        epoch,
        field_modulus: field.modulus,
        width: polys.len() as u32,
        commitments,
        share_commitments,
    };
    (meta, shards)
}

/// Shares a sequence of field elements.
pub fn split_elements(
    secret: &[u32],
    n: u32,
    k: u32,
    field: PrimeField,
    rng: &mut SeededRng,
) -> Result<(ShardedSecret, Vec<Shard>), ShardingError> {
    if secret.is_empty() {
        return Err(ShardingError::Parameters("secret must be nonempty"));
    }
    if k < 1 || k > n {
        return Err(ShardingError::Parameters("need 1 <= k <= n"));
    }
    if n >= field.modulus {
        return Err(ShardingError::Parameters("n exceeds field capacity"));
    }
    if secret.iter().any(|&s| s >= field.modulus) {
        return Err(ShardingError::Parameters("secret element outside the field"));
    }
    let polys: Vec<Vec<u32>> = secret
        .iter()
        .map(|&s| std::iter::once(s).chain((1..k).map(|_| field.random(rng))).collect())
        .collect();
    Ok(build(&polys, n, k, 0, field))
}

/// Shares an octet string over GF(257).
pub fn split(
    secret: &[u8],
    n: u32,
    k: u32,
    rng: &mut SeededRng,
) -> Result<(ShardedSecret, Vec<Shard>), ShardingError> {
    let elems: Vec<u32> = secret.iter().map(|&b| b as u32).collect();
    split_elements(&elems, n, k, PrimeField::production(), rng)
}

fn check_set<'a>(shards: &'a [Shard], meta: &ShardedSecret) -> Result<Vec<&'a Shard>, ShardingError> {
    let k = meta.k as usize;
    if shards.len() < k {
        return Err(ShardingError::BelowThreshold { have: shards.len(), k });
    }
    let epochs: BTreeSet<u64> = shards.iter().map(|s| s.epoch).collect();
    if epochs.len() > 1 {
        return Err(ShardingError::MixedEpoch);
    }
    if shards[0].epoch != meta.epoch {
        return Err(ShardingError::EpochMismatch { shard: shards[0].epoch, meta: meta.epoch });
    }
    let mut seen = BTreeSet::new();
    for s in shards {
        if s.index == 0 || s.index > meta.n || s.values.len() != meta.width as usize {
            return Err(ShardingError::InvalidShard(s.index));
        }
        if !seen.insert(s.index) {
            return Err(ShardingError::DuplicateIndex(s.index));
        }
    }
    let mut sorted: Vec<&Shard> = shards.iter().collect();
    sorted.sort_by_key(|s| s.index);
    sorted.truncate(k);
    Ok(sorted)
}

/// Lagrange interpolation at zero over the first `k` shards by index.
pub fn reconstruct_elements(shards: &[Shard], meta: &ShardedSecret) -> Result<Vec<u32>, ShardingError> {
    let field = PrimeField::new(meta.field_modulus)?;
    let used = check_set(shards, meta)?;
    let weights: Vec<u32> = used
        .iter()
        .map(|si| {
            used.iter().filter(|sj| sj.index != si.index).fold(1, |acc, sj| {
                // L_i(0) = prod x_j / (x_j - x_i)
                let num = sj.index;
                let den = field.sub(sj.index, si.index);
                field.mul(acc, field.mul(num, field.inv(den)))
            })
        })
        .collect();
    Ok((0..meta.width as usize)
        .map(|e| {
            used.iter()
                .zip(&weights)
                .fold(0, |acc, (s, &w)| field.add(acc, field.mul(w, s.values[e] % field.modulus)))
        })
        .collect())
}

pub fn reconstruct(shards: &[Shard], meta: &ShardedSecret) -> Result<Vec<u8>, ShardingError> {
    reconstruct_elements(shards, meta)?
        .into_iter()
        .map(|v| u8::try_from(v).map_err(|_| ShardingError::NotAnOctet(v)))
        .collect()
}

/// Full coefficient recovery from the first `k` shards, one polynomial per
/// element.
fn interpolate(used: &[&Shard], field: PrimeField, width: usize) -> Vec<Vec<u32>> {
    let k = used.len();
    // Basis polynomials l_i(x) = prod_{j != i} (x - x_j) / (x_i - x_j).
    let basis: Vec<Vec<u32>> = used
        .iter()
        .map(|si| {
            let mut poly = vec![1u32];
            let mut denom = 1u32;
            for sj in used.iter().filter(|sj| sj.index != si.index) {
                let mut next = vec![0u32; poly.len() + 1];
                for (d, &c) in poly.iter().enumerate() {
                    next[d + 1] = field.add(next[d + 1], c);
                    next[d] = field.sub(next[d], field.mul(c, sj.index));
                }
                poly = next;
                denom = field.mul(denom, field.sub(si.index, sj.index));
            }
            let inv = field.inv(denom);
            poly.into_iter().map(|c| field.mul(c, inv)).collect()
        })
        .collect();
    (0..width)
        .map(|e| {
            let mut coeffs = vec![0u32; k];
            for (s, b) in used.iter().zip(&basis) {
                for d in 0..k {
                    coeffs[d] = field.add(coeffs[d], field.mul(b[d], s.values[e] % field.modulus));
                }
            }
            coeffs
        })
        .collect()
}

/// Reconstruction that also checks the interpolated polynomial against the
/// published coefficient commitments.
pub fn reconstruct_checked(shards: &[Shard], meta: &ShardedSecret) -> Result<Vec<u8>, ShardingError> {
    let field = PrimeField::new(meta.field_modulus)?;
    let used = check_set(shards, meta)?;
    let polys = interpolate(&used, field, meta.width as usize);
    for d in 0..meta.k {
        let column: Vec<u32> = polys.iter().map(|p| p[d as usize]).collect();
        if coefficient_commitment(meta.epoch, meta.field_modulus, d, &column)
            != meta.commitments[d as usize]
        {
            return Err(ShardingError::CommitmentMismatch);
        }
    }
    reconstruct(shards, meta)
}

pub fn verify_shard(shard: &Shard, meta: &ShardedSecret) -> bool {
    shard.epoch == meta.epoch
        && (1..=meta.n).contains(&shard.index)
        && shard.values.len() == meta.width as usize
        && shard.values.iter().all(|&v| v < meta.field_modulus)
        && meta.share_commitments.get(shard.index as usize - 1)
            == Some(&share_commitment(meta.epoch, meta.field_modulus, shard.index, &shard.values))
}

/// Proactive refresh: requires the complete shard set of the current epoch.
pub fn rotate(
    shards: &[Shard],
    meta: &ShardedSecret,
    rng: &mut SeededRng,
) -> Result<(ShardedSecret, Vec<Shard>), ShardingError> {
    if shards.len() != meta.n as usize {
        return Err(ShardingError::IncompleteSet { have: shards.len(), n: meta.n as usize });
    }
    if let Some(s) = shards.iter().find(|s| s.epoch != meta.epoch) {
        return Err(ShardingError::EpochMismatch { shard: s.epoch, meta: meta.epoch });
    }
    let mut seen = BTreeSet::new();
    for s in shards {
        if !seen.insert(s.index) {
            return Err(ShardingError::DuplicateIndex(s.index));
        }
        if !verify_shard(s, meta) {
            return Err(ShardingError::InvalidShard(s.index));
        }
    }
    let field = PrimeField::new(meta.field_modulus)?;
    let used = check_set(shards, meta)?;
    let mut polys = interpolate(&used, field, meta.width as usize);
    for poly in &mut polys {
        for c in poly.iter_mut().skip(1) {
            *c = field.add(*c, field.random(rng));
        }
    }
    Ok(build(&polys, meta.n, meta.k, meta.epoch + 1, field))
}

impl Shard {
    pub fn to_bytes(&self, field_modulus: u32) -> Vec<u8> {
        let mut enc = Encoder::with_header(SHARD_MAGIC, FORMAT_VERSION);
        enc.u64(self.epoch).u32(self.index).u32(field_modulus).u32(self.values.len() as u32);
        for v in &self.values {
            enc.u16(*v as u16);
        }
        enc.finish()
    }

    /// Returns the shard and the field modulus it was exported with.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, u32), ShardingError> {
        let mut dec = Decoder::with_header(bytes, SHARD_MAGIC, FORMAT_VERSION)?;
        let epoch = dec.u64()?;
        let index = dec.u32()?;
        let modulus = dec.u32()?;
        let count = dec.count(2)?;
        let values = (0..count).map(|_| dec.u16().map(u32::from)).collect::<Result<_, _>>()?;
        dec.finish()?;
        Ok((Self { index, values, epoch }, modulus))
    }
}

impl ShardedSecret {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(META_MAGIC, FORMAT_VERSION);
        enc.u32(self.n).u32(self.k).u64(self.epoch).u32(self.field_modulus).u32(self.width);
        enc.u32(self.commitments.len() as u32);
        self.commitments.iter().for_each(|d| d.encode(&mut enc));
        enc.u32(self.share_commitments.len() as u32);
        self.share_commitments.iter().for_each(|d| d.encode(&mut enc));
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ShardingError> {
        let mut dec = Decoder::with_header(bytes, META_MAGIC, FORMAT_VERSION)?;
        let n = dec.u32()?;
        let k = dec.u32()?;
        let epoch = dec.u64()?;
        let field_modulus = dec.u32()?;
        let width = dec.u32()?;
        let c = dec.count(Digest::ENCODED_LEN)?;
        let commitments = (0..c).map(|_| Digest::decode(&mut dec)).collect::<Result<Vec<_>, _>>()?;
        let s = dec.count(Digest::ENCODED_LEN)?;
        let share_commitments =
            (0..s).map(|_| Digest::decode(&mut dec)).collect::<Result<Vec<_>, _>>()?;
        dec.finish()?;
        PrimeField::new(field_modulus)?;
        if k < 1 || k > n || commitments.len() != k as usize || share_commitments.len() != n as usize {
            return Err(ShardingError::Parameters("inconsistent metadata"));
        }
        Ok(Self { n, k, epoch, field_modulus, width, commitments, share_commitments })
    }
}
