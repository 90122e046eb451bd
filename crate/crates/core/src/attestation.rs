//! Simulated TEE identities, quotes and the checks built on them: quote
//! verification, mutual (friend-or-foe) attestation, cross-vendor
//! validation and the signed code-manifest registry.
//!
//! A quote is signed by the platform's attestation identity key (AIK); the
//! AIK is endorsed by the vendor root, so verification chains back to the
//! vendor root, which is the only trust anchor.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Decoder, Encoder};
use crate::crypto::{hash, hash_parts, AeadKey, AgreementSecret, Digest, SeededRng, Signature, SigningKey, VerifyKey};

pub const REPORT_DATA_LEN: usize = 64;
pub const NONCE_LEN: usize = 16;

const QUOTE_MAGIC: &[u8; 4] = b"QUOT";
const QUOTE_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Vendor {
    A,
    B,
    C,
}

impl Vendor {
    pub const ALL: [Vendor; 3] = [Vendor::A, Vendor::B, Vendor::C];

    pub fn code(self) -> u8 {
        match self {
            Vendor::A => 0,
            Vendor::B => 1,
            Vendor::C => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self, CodecError> {
        Self::ALL.get(c as usize).copied().ok_or(CodecError::InvalidTag { what: "vendor", tag: c })
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "A" | "a" => Some(Vendor::A),
            "B" | "b" => Some(Vendor::B),
            "C" | "c" => Some(Vendor::C),
            _ => None,
        }
    }
}

impl fmt::Display for Vendor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Vendor::A => "A",
            Vendor::B => "B",
            Vendor::C => "C",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlatformId(pub u32);

impl fmt::Display for PlatformId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Clock speed relative to nominal time, as a ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockRate {
    pub num: u32,
    pub den: u32,
}

impl ClockRate {
    pub const NOMINAL: ClockRate = ClockRate { num: 1, den: 1 };

    /// Parses `1.5`-style decimals with up to three fractional digits.
    pub fn parse(s: &str) -> Option<Self> {
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 3 {
            return None;
        }
        let scale = 10u32.pow(frac.len() as u32);
        let num = int.parse::<u32>().ok()? * scale + if frac.is_empty() { 0 } else { frac.parse::<u32>().ok()? };
        (num > 0).then(|| ClockRate::new(num, scale))
    }

    /// Reduced to lowest terms so equal rates compare equal.
    pub fn new(num: u32, den: u32) -> Self {
        fn gcd(a: u32, b: u32) -> u32 {
            if b == 0 { a } else { gcd(b, a % b) }
        }
        let g = gcd(num, den).max(1);
        ClockRate { num: num / g, den: den / g }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Local clock reading at global tick `t`.
    pub fn local(self, t: u64) -> u64 {
        t * self.num as u64 / self.den as u64
    }
}

/// The hardware root of one vendor. Exactly one exists per [`Vendor`].
#[derive(Debug, Clone)]
pub struct VendorRoot {
    pub vendor: Vendor,
    key: SigningKey,
    vk: VerifyKey,
}

fn endorsement_message(vendor: Vendor, platform_id: PlatformId, aik: &VerifyKey) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.str("aik-endorsement").u8(vendor.code()).u32(platform_id.0);
    aik.encode(&mut enc);
    enc.finish()
}

impl VendorRoot {
    pub fn new(vendor: Vendor, key: SigningKey) -> Self {
        let vk = key.verify_key();
        Self { vendor, key, vk }
    }

    pub fn verify_key(&self) -> &VerifyKey {
        &self.vk
    }

    /// Creates a platform identity whose AIK this vendor endorses.
    pub fn provision(
        &self,
        platform_id: PlatformId,
        measurement: Digest,
        clock_rate: ClockRate,
        rng: &mut SeededRng,
    ) -> EnclaveIdentity {
        let mut id = EnclaveIdentity::unendorsed(self.vendor, platform_id, measurement, clock_rate, rng);
        id.endorsement = Some(self.key.sign(&endorsement_message(self.vendor, platform_id, &id.aik_vk)));
        id
    }

    /// A quote over arbitrary claims. Honest vendors only reach this through
    /// [`generate_quote`]; a compromised vendor can call it directly.
    pub fn issue_quote(
        &self,
        platform_id: PlatformId,
        measurement: Digest,
        report_data: [u8; REPORT_DATA_LEN],
        nonce: [u8; NONCE_LEN],
        rng: &mut SeededRng,
    ) -> AttestationQuote {
        let id = self.provision(platform_id, measurement, ClockRate::NOMINAL, rng);
        generate_quote(&id, &report_data, nonce).expect("freshly endorsed")
    }
}

/// Vendor roots created at simulation setup.
#[derive(Debug, Clone)]
pub struct VendorRoots {
    roots: BTreeMap<Vendor, VendorRoot>,
}

impl VendorRoots {
    pub fn generate(rng: &mut SeededRng) -> Self {
        let roots = Vendor::ALL
            .iter()
            .map(|&v| (v, VendorRoot::new(v, SigningKey::generate(rng))))
            .collect();
        Self { roots }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::generate(&mut SeededRng::from_u64(seed).fork("vendor-roots"))
    }

    pub fn root(&self, v: Vendor) -> &VendorRoot {
        &self.roots[&v]
    }

    pub fn trusted(&self, vendors: &[Vendor]) -> TrustedVendors {
        TrustedVendors(vendors.iter().map(|v| (*v, self.roots[v].vk.clone())).collect())
    }

    pub fn trust_all(&self) -> TrustedVendors {
        self.trusted(&Vendor::ALL)
    }
}

/// Trust anchors a verifier accepts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrustedVendors(BTreeMap<Vendor, VerifyKey>);

impl TrustedVendors {
    pub fn get(&self, v: Vendor) -> Option<&VerifyKey> {
        self.0.get(&v)
    }

    pub fn remove(&mut self, v: Vendor) {
        self.0.remove(&v);
    }

    pub fn vendors(&self) -> BTreeSet<Vendor> {
        self.0.keys().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct EnclaveIdentity {
    pub measurement: Digest,
    pub vendor: Vendor,
    pub platform_id: PlatformId,
    pub aik: SigningKey,
    pub aik_vk: VerifyKey,
    pub endorsement: Option<Signature>,
    pub clock_rate: ClockRate,
}

impl EnclaveIdentity {
    pub fn unendorsed(
        vendor: Vendor,
        platform_id: PlatformId,
        measurement: Digest,
        clock_rate: ClockRate,
        rng: &mut SeededRng,
    ) -> Self {
        let aik = SigningKey::generate(rng);
        let aik_vk = aik.verify_key();
        Self { measurement, vendor, platform_id, aik, aik_vk, endorsement: None, clock_rate }
    }

    /// Platform sealing key for at-rest data.
    pub fn sealing_key(&self) -> AeadKey {
        AeadKey::from_digest(&self.aik.derive_secret("platform-sealing"))
    }
}

/// Pads payloads up to 64 octets; longer payloads are hashed first.
pub fn report_data(payload: &[u8]) -> [u8; REPORT_DATA_LEN] {
    let mut out = [0u8; REPORT_DATA_LEN];
    if payload.len() <= REPORT_DATA_LEN {
        out[..payload.len()].copy_from_slice(payload);
    } else {
        out[..32].copy_from_slice(hash(payload).as_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationQuote {
    pub measurement: Digest,
    pub vendor: Vendor,
    pub platform_id: PlatformId,
    pub report_data: [u8; REPORT_DATA_LEN],
    pub freshness_nonce: [u8; NONCE_LEN],
    pub aik_vk: VerifyKey,
    pub endorsement: Signature,
    pub signature: Signature,
}

impl AttestationQuote {
    fn signed_body(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("quote");
        self.encode_body(&mut enc);
        enc.finish()
    }

    fn encode_body(&self, enc: &mut Encoder) {
        self.measurement.encode(enc);
        enc.u8(self.vendor.code()).u32(self.platform_id.0).raw(&self.report_data).raw(&self.freshness_nonce);
        self.aik_vk.encode(enc);
        self.endorsement.encode(enc);
    }

    pub fn encode(&self, enc: &mut Encoder) {
        self.encode_body(enc);
        self.signature.encode(enc);
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            measurement: Digest::decode(dec)?,
            vendor: Vendor::from_code(dec.u8()?)?,
            platform_id: PlatformId(dec.u32()?),
            report_data: dec.array()?,
            freshness_nonce: dec.array()?,
            aik_vk: VerifyKey::decode(dec)?,
            endorsement: Signature::decode(dec)?,
            signature: Signature::decode(dec)?,
        })
    }

    /// Quote file: magic, version, canonical encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(QUOTE_MAGIC, QUOTE_VERSION);
        self.encode(&mut enc);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::with_header(bytes, QUOTE_MAGIC, QUOTE_VERSION)?;
        let q = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(q)
    }

    pub fn digest(&self) -> Digest {
        hash(&self.to_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttestationError {
    #[error("identity has no vendor-endorsed AIK")]
    UnendorsedIdentity,
}

pub fn generate_quote(
    id: &EnclaveIdentity,
    report_payload: &[u8],
    nonce: [u8; NONCE_LEN],
) -> Result<AttestationQuote, AttestationError> {
    let endorsement = id.endorsement.ok_or(AttestationError::UnendorsedIdentity)?;
    let mut q = AttestationQuote {
        measurement: id.measurement,
        vendor: id.vendor,
        platform_id: id.platform_id,
        report_data: report_data(report_payload),
        freshness_nonce: nonce,
        aik_vk: id.aik_vk.clone(),
        endorsement,
        signature: Signature::empty(),
    };
    q.signature = id.aik.sign(&q.signed_body());
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(rename_all = "kebab-case")]
pub enum QuoteRejection {
    #[error("bad-signature")]
    BadSignature,
    #[error("untrusted-vendor")]
    UntrustedVendor,
    #[error("wrong-measurement")]
    WrongMeasurement,
    #[error("stale-nonce")]
    StaleNonce,
}

pub fn verify_quote(
    q: &AttestationQuote,
    expected_measurement: &Digest,
    trusted: &TrustedVendors,
    nonce: &[u8; NONCE_LEN],
) -> Result<(), QuoteRejection> {
    let root = trusted.get(q.vendor).ok_or(QuoteRejection::UntrustedVendor)?;
    verify_quote_signature(q, root)?;
    if &q.measurement != expected_measurement {
        return Err(QuoteRejection::WrongMeasurement);
    }
    if &q.freshness_nonce != nonce {
        return Err(QuoteRejection::StaleNonce);
    }
    Ok(())
}

fn verify_quote_signature(q: &AttestationQuote, root: &VerifyKey) -> Result<(), QuoteRejection> {
    let endorsed = root.verify(&endorsement_message(q.vendor, q.platform_id, &q.aik_vk), &q.endorsement);
    if !endorsed || !q.aik_vk.verify(&q.signed_body(), &q.signature) {
        return Err(QuoteRejection::BadSignature);
    }
    Ok(())
}

/// Anything that can answer an attestation challenge.
pub trait QuoteSource {
    fn platform_id(&self) -> PlatformId;
    fn quote(&self, report_payload: &[u8], nonce: [u8; NONCE_LEN]) -> Result<AttestationQuote, AttestationError>;
}

impl QuoteSource for EnclaveIdentity {
    fn platform_id(&self) -> PlatformId {
        self.platform_id
    }

    fn quote(&self, report_payload: &[u8], nonce: [u8; NONCE_LEN]) -> Result<AttestationQuote, AttestationError> {
        generate_quote(self, report_payload, nonce)
    }
}

/// Result of a successful mutual attestation. Each side derives its key
/// independently from its own agreement secret and the peer's quote.
#[derive(Debug, Clone)]
pub struct PeerTrust {
    pub initiator: PlatformId,
    pub responder: PlatformId,
    pub initiator_key: AeadKey,
    pub responder_key: AeadKey,
    pub initiator_quote: AttestationQuote,
    pub responder_quote: AttestationQuote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// The initiator rejected the responder's quote.
    InitiatorRejects,
    ResponderRejects,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MutualAttestError {
    #[error("{0:?}: {1}")]
    Rejected(Direction, QuoteRejection),
    #[error("{0:?}: {1}")]
    Unendorsed(Direction, AttestationError),
}

impl MutualAttestError {
    pub fn reason(&self) -> Option<QuoteRejection> {
        match self {
            MutualAttestError::Rejected(_, r) => Some(*r),
            MutualAttestError::Unendorsed(..) => None,
        }
    }
}

fn pairwise_key(shared: &[u8; 32], initiator: &AttestationQuote, responder: &AttestationQuote) -> AeadKey {
    AeadKey::from_digest(&hash_parts(
        "pairwise-channel",
        &[shared, &initiator.report_data, &responder.report_data, &initiator.freshness_nonce, &responder.freshness_nonce],
    ))
}

/// Identify-friend-or-foe handshake: each side challenges the other with a
/// fresh nonce and verifies the answering quote against
/// `expected_measurement`. Each quote's report data carries that side's
/// key-agreement contribution.
pub fn mutual_attest(
    a: &dyn QuoteSource,
    b: &dyn QuoteSource,
    expected_measurement: &Digest,
    trusted: &TrustedVendors,
    rng: &mut SeededRng,
) -> Result<PeerTrust, MutualAttestError> {
    let nonce_to_b: [u8; NONCE_LEN] = rng.next_array();
    let nonce_to_a: [u8; NONCE_LEN] = rng.next_array();
    let secret_a = AgreementSecret::generate(rng);
    let secret_b = AgreementSecret::generate(rng);

    let quote_b = b
        .quote(&secret_b.public().0, nonce_to_b)
        .map_err(|e| MutualAttestError::Unendorsed(Direction::InitiatorRejects, e))?;
    verify_quote(&quote_b, expected_measurement, trusted, &nonce_to_b)
        .map_err(|r| MutualAttestError::Rejected(Direction::InitiatorRejects, r))?;
    let quote_a = a
        .quote(&secret_a.public().0, nonce_to_a)
        .map_err(|e| MutualAttestError::Unendorsed(Direction::ResponderRejects, e))?;
    verify_quote(&quote_a, expected_measurement, trusted, &nonce_to_a)
        .map_err(|r| MutualAttestError::Rejected(Direction::ResponderRejects, r))?;

    let peer_pub = |q: &AttestationQuote| {
        let mut p = [0u8; 32];
        p.copy_from_slice(&q.report_data[..32]);
        crate::crypto::AgreementPublic(p)
    };
    let initiator_key = pairwise_key(&secret_a.agree(&peer_pub(&quote_b)), &quote_a, &quote_b);
    let responder_key = pairwise_key(&secret_b.agree(&peer_pub(&quote_a)), &quote_a, &quote_b);
    Ok(PeerTrust {
        initiator: a.platform_id(),
        responder: b.platform_id(),
        initiator_key,
        responder_key,
        initiator_quote: quote_a,
        responder_quote: quote_b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(rename_all = "kebab-case", tag = "reason")]
pub enum CrossVendorRejection {
    #[error("single-vendor")]
    SingleVendor,
    #[error("mismatched-report")]
    MismatchedReport,
    #[error("invalid-member {index}: {cause}")]
    InvalidMember { index: usize, cause: QuoteRejection },
}

/// Horizontal validation: quotes from at least two distinct vendors, all
/// valid, all binding the same measurement and report data. With three or
/// more vendors every member must agree.
pub fn cross_vendor_validate(
    quotes: &[AttestationQuote],
    trusted: &TrustedVendors,
    nonce: &[u8; NONCE_LEN],
) -> Result<(), CrossVendorRejection> {
    let vendors: BTreeSet<Vendor> = quotes.iter().map(|q| q.vendor).collect();
    if vendors.len() < 2 {
        return Err(CrossVendorRejection::SingleVendor);
    }
    for (index, q) in quotes.iter().enumerate() {
        verify_quote(q, &q.measurement, trusted, nonce)
            .map_err(|cause| CrossVendorRejection::InvalidMember { index, cause })?;
    }
    let first = &quotes[0];
    if quotes.iter().any(|q| q.measurement != first.measurement || q.report_data != first.report_data) {
        return Err(CrossVendorRejection::MismatchedReport);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeManifest {
    pub app_id: String,
    pub version: u32,
    pub code_digest: Digest,
    pub author_vk: VerifyKey,
    pub author_signature: Signature,
}

impl CodeManifest {
    fn signed_body(app_id: &str, version: u32, code_digest: &Digest, author_vk: &VerifyKey) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("code-manifest").str(app_id).u32(version);
        code_digest.encode(&mut enc);
        author_vk.encode(&mut enc);
        enc.finish()
    }

    pub fn new_signed(app_id: &str, version: u32, code_digest: Digest, author: &SigningKey) -> Self {
        let author_vk = author.verify_key();
        let author_signature = author.sign(&Self::signed_body(app_id, version, &code_digest, &author_vk));
        Self { app_id: app_id.to_string(), version, code_digest, author_vk, author_signature }
    }

    pub fn signature_valid(&self) -> bool {
        self.author_vk.verify(
            &Self::signed_body(&self.app_id, self.version, &self.code_digest, &self.author_vk),
            &self.author_signature,
        )
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.app_id).u32(self.version);
        self.code_digest.encode(enc);
        self.author_vk.encode(enc);
        self.author_signature.encode(enc);
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            app_id: dec.string()?,
            version: dec.u32()?,
            code_digest: Digest::decode(dec)?,
            author_vk: VerifyKey::decode(dec)?,
            author_signature: Signature::decode(dec)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let m = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(m)
    }

    /// The measurement enclaves running this manifest report.
    pub fn measurement(&self) -> Digest {
        hash(&self.to_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("bad author signature")]
    BadAuthorSignature,
    #[error("manifest {app_id} v{version} already registered")]
    Duplicate { app_id: String, version: u32 },
}

#[derive(Debug, Clone, Default)]
pub struct ManifestRegistry {
    by_release: BTreeMap<(String, u32), Digest>,
    by_measurement: BTreeMap<Digest, CodeManifest>,
}

impl ManifestRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_manifest(&mut self, manifest: CodeManifest) -> Result<Digest, RegistryError> {
        if !manifest.signature_valid() {
            return Err(RegistryError::BadAuthorSignature);
        }
        let release = (manifest.app_id.clone(), manifest.version);
        if self.by_release.contains_key(&release) {
            return Err(RegistryError::Duplicate { app_id: release.0, version: release.1 });
        }
        let m = manifest.measurement();
        self.by_release.insert(release, m);
        self.by_measurement.insert(m, manifest);
        Ok(m)
    }

    pub fn is_registered(&self, measurement: &Digest) -> bool {
        self.by_measurement.contains_key(measurement)
    }

    pub fn get(&self, measurement: &Digest) -> Option<&CodeManifest> {
        self.by_measurement.get(measurement)
    }

    pub fn lookup(&self, app_id: &str, version: u32) -> Option<Digest> {
        self.by_release.get(&(app_id.to_string(), version)).copied()
    }
}

pub fn register_manifest(manifest: CodeManifest, registry: &mut ManifestRegistry) -> Result<Digest, RegistryError> {
    registry.register_manifest(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixture {
        roots: VendorRoots,
        measurement: Digest,
        rng: SeededRng,
    }

    fn fixture() -> Fixture {
        let mut rng = SeededRng::from_u64(5);
        let roots = VendorRoots::generate(&mut rng);
        let author = SigningKey::generate(&mut rng);
        let manifest = CodeManifest::new_signed("ledger", 1, hash(b"program"), &author);
        Fixture { roots, measurement: manifest.measurement(), rng }
    }

    impl Fixture {
        fn node(&mut self, vendor: Vendor, id: u32) -> EnclaveIdentity {
            self.roots.root(vendor).provision(PlatformId(id), self.measurement, ClockRate::NOMINAL, &mut self.rng)
        }
    }

    #[test]
    fn quote_round_trip_and_bindings() {
        let mut f = fixture();
        let id = f.node(Vendor::A, 1);
        let trusted = f.roots.trusted(&[Vendor::A]);
        let q = generate_quote(&id, b"rd", [7; 16]).unwrap();
        assert_eq!(verify_quote(&q, &f.measurement, &trusted, &[7; 16]), Ok(()));
        assert_eq!(verify_quote(&q, &f.measurement, &trusted, &[8; 16]), Err(QuoteRejection::StaleNonce));
        assert_eq!(verify_quote(&q, &hash(b"other"), &trusted, &[7; 16]), Err(QuoteRejection::WrongMeasurement));
        let only_b = f.roots.trusted(&[Vendor::B]);
        assert_eq!(verify_quote(&q, &f.measurement, &only_b, &[7; 16]), Err(QuoteRejection::UntrustedVendor));
        let mut bad = q.clone();
        bad.signature = bad.signature.with_bit_flipped(3);
        assert_eq!(verify_quote(&bad, &f.measurement, &trusted, &[7; 16]), Err(QuoteRejection::BadSignature));
        assert_eq!(AttestationQuote::from_bytes(&q.to_bytes()).unwrap(), q);
    }

    #[test]
    fn unendorsed_identity_cannot_quote() {
        let mut f = fixture();
        let id = EnclaveIdentity::unendorsed(Vendor::A, PlatformId(9), f.measurement, ClockRate::NOMINAL, &mut f.rng);
        assert_eq!(generate_quote(&id, b"", [0; 16]), Err(AttestationError::UnendorsedIdentity));
    }

    #[test]
    fn self_endorsed_aik_is_rejected() {
        // A forged vendor root endorsing its own AIK does not chain to the real root.
        let mut f = fixture();
        let rogue = VendorRoot::new(Vendor::A, SigningKey::generate(&mut f.rng));
        let id = rogue.provision(PlatformId(3), f.measurement, ClockRate::NOMINAL, &mut f.rng);
        let q = generate_quote(&id, b"", [1; 16]).unwrap();
        assert_eq!(
            verify_quote(&q, &f.measurement, &f.roots.trust_all(), &[1; 16]),
            Err(QuoteRejection::BadSignature)
        );
    }

    #[test]
    fn mutual_attestation() {
        let mut f = fixture();
        let a = f.node(Vendor::A, 1);
        let b = f.node(Vendor::B, 2);
        let trusted = f.roots.trust_all();
        let t1 = mutual_attest(&a, &b, &f.measurement, &trusted, &mut f.rng).unwrap();
        assert_eq!(t1.initiator_key, t1.responder_key);
        let t2 = mutual_attest(&a, &b, &f.measurement, &trusted, &mut f.rng).unwrap();
        assert_ne!(t1.initiator_key, t2.initiator_key);

        let mut modified = f.node(Vendor::B, 3);
        modified.measurement = hash(b"modified manifest");
        let err = mutual_attest(&a, &modified, &f.measurement, &trusted, &mut f.rng).unwrap_err();
        assert_eq!(err, MutualAttestError::Rejected(Direction::InitiatorRejects, QuoteRejection::WrongMeasurement));
    }

    struct Replayer {
        recorded: AttestationQuote,
    }

    impl QuoteSource for Replayer {
        fn platform_id(&self) -> PlatformId {
            self.recorded.platform_id
        }
        fn quote(&self, _: &[u8], _: [u8; NONCE_LEN]) -> Result<AttestationQuote, AttestationError> {
            Ok(self.recorded.clone())
        }
    }

    #[test]
    fn replayed_quote_is_stale() {
        let mut f = fixture();
        let a = f.node(Vendor::A, 1);
        let b = f.node(Vendor::A, 2);
        let trusted = f.roots.trust_all();
        let old = mutual_attest(&a, &b, &f.measurement, &trusted, &mut f.rng).unwrap();
        let impostor = Replayer { recorded: old.initiator_quote };
        let err = mutual_attest(&b, &impostor, &f.measurement, &trusted, &mut f.rng).unwrap_err();
        assert_eq!(err.reason(), Some(QuoteRejection::StaleNonce));
    }

    #[test]
    fn cross_vendor() {
        let mut f = fixture();
        let trusted = f.roots.trust_all();
        let n = [4; 16];
        let qa = generate_quote(&f.node(Vendor::A, 1), b"result", n).unwrap();
        let qb = generate_quote(&f.node(Vendor::B, 2), b"result", n).unwrap();
        let qa2 = generate_quote(&f.node(Vendor::A, 3), b"result", n).unwrap();
        assert_eq!(cross_vendor_validate(&[qa.clone(), qb.clone()], &trusted, &n), Ok(()));
        assert_eq!(cross_vendor_validate(&[qa.clone(), qa2], &trusted, &n), Err(CrossVendorRejection::SingleVendor));
        assert_eq!(cross_vendor_validate(&[qa.clone()], &trusted, &n), Err(CrossVendorRejection::SingleVendor));
        let lying = f.roots.root(Vendor::B).issue_quote(PlatformId(2), f.measurement, report_data(b"resulu"), n, &mut f.rng);
        assert_eq!(cross_vendor_validate(&[qa.clone(), lying], &trusted, &n), Err(CrossVendorRejection::MismatchedReport));
        let mut no_b = trusted.clone();
        no_b.remove(Vendor::B);
        assert_eq!(
            cross_vendor_validate(&[qa, qb], &no_b, &n),
            Err(CrossVendorRejection::InvalidMember { index: 1, cause: QuoteRejection::UntrustedVendor })
        );
    }

    #[test]
    fn manifest_registry() {
        let mut rng = SeededRng::from_u64(8);
        let author = SigningKey::generate(&mut rng);
        let m = CodeManifest::new_signed("app", 1, hash(b"code"), &author);
        let mut reg = ManifestRegistry::new();
        let d = register_manifest(m.clone(), &mut reg).unwrap();
        assert_eq!(d, hash(&m.to_bytes()));
        assert!(reg.is_registered(&d));
        assert_eq!(
            register_manifest(m.clone(), &mut reg),
            Err(RegistryError::Duplicate { app_id: "app".into(), version: 1 })
        );
        let mut broken = CodeManifest::new_signed("app", 2, hash(b"code"), &author);
        broken.author_signature = broken.author_signature.with_bit_flipped(0);
        assert_eq!(register_manifest(broken, &mut reg), Err(RegistryError::BadAuthorSignature));
        assert_eq!(CodeManifest::from_bytes(&m.to_bytes()).unwrap(), m);
    }

    #[test]
    fn clock_rate_parsing() {
        assert_eq!(ClockRate::parse("1.5"), Some(ClockRate { num: 3, den: 2 }));
        assert_eq!(ClockRate::new(15, 10), ClockRate::new(3, 2));
        assert_eq!(ClockRate::parse("1"), Some(ClockRate::NOMINAL));
        assert_eq!(ClockRate::parse("1.05").unwrap().local(100), 105);
        assert_eq!(ClockRate::parse("0"), None);
    }
}
