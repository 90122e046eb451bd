//! Two-layer client channel. The outer layer terminates at the platform
//! runtime manager, the inner layer only inside the application enclave.

use serde::Serialize;
use thiserror::Error;

use crate::attestation::{
    report_data, verify_quote, AttestationError, AttestationQuote, EnclaveIdentity, QuoteRejection, QuoteSource,
    TrustedVendors, NONCE_LEN,
};
use crate::codec::{CodecError, Decoder, Encoder};
use crate::crypto::{
    aead_open, aead_seal, hash_parts, AeadKey, AgreementPublic, AgreementSecret, Ciphertext, Digest, Nonce,
    SeededRng,
};

pub const ENVELOPE_VERSION: u8 = 1;
pub const SESSION_ID_LEN: usize = 16;
const OUTER_STREAM: u32 = 1;
const INNER_STREAM: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layer {
    Outer,
    Inner,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HandshakeFailure {
    #[error("outer-attestation: {0}")]
    OuterAttestation(QuoteRejection),
    #[error("inner-attestation: {0}")]
    InnerAttestation(QuoteRejection),
}

impl HandshakeFailure {
    pub fn layer(&self) -> Layer {
        match self {
            HandshakeFailure::OuterAttestation(_) => Layer::Outer,
            HandshakeFailure::InnerAttestation(_) => Layer::Inner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("malformed envelope: {0}")]
    Malformed(#[from] CodecError),
    #[error("{0:?} layer authentication failed")]
    Authentication(Layer),
    #[error("replayed counter {counter} (last accepted {last})")]
    Replay { counter: u64, last: u64 },
    #[error("envelope for another session")]
    WrongSession,
}

/// Client's opening message: one fresh agreement value per layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientHello {
    pub session_id: [u8; SESSION_ID_LEN],
    pub app_id: String,
    pub outer_public: AgreementPublic,
    pub inner_public: AgreementPublic,
    pub nonce: [u8; NONCE_LEN],
}

/// An enclave's answer: its agreement value and a quote binding it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveHello {
    pub public: AgreementPublic,
    pub quote: AttestationQuote,
}

fn layer_label(layer: Layer) -> &'static str {
    match layer {
        Layer::Outer => "outer-kx",
        Layer::Inner => "inner-kx",
    }
}

/// What an enclave's quote must bind for `layer`.
pub fn kx_binding(layer: Layer, hello: &ClientHello, server: &AgreementPublic) -> Digest {
    let client = match layer {
        Layer::Outer => &hello.outer_public,
        Layer::Inner => &hello.inner_public,
    };
    hash_parts(layer_label(layer), &[&hello.session_id, hello.app_id.as_bytes(), &client.0, &server.0])
}

fn derive_key(layer: Layer, shared: &[u8; 32], binding: &Digest) -> AeadKey {
    AeadKey::from_digest(&hash_parts("channel-key", &[layer_label(layer).as_bytes(), shared, binding.as_bytes()]))
}

/// Receiving end of one layer, held by the runtime (outer) or the
/// application enclave (inner).
#[derive(Debug, Clone)]
pub struct LayerEndpoint {
    pub layer: Layer,
    pub session_id: [u8; SESSION_ID_LEN],
    key: AeadKey,
    last_counter: u64,
}

impl LayerEndpoint {
    fn accept(&mut self, nonce: &Nonce) -> Result<(), ChannelError> {
        let counter = nonce.counter();
        if counter <= self.last_counter {
            return Err(ChannelError::Replay { counter, last: self.last_counter });
        }
        Ok(())
    }
}

/// Terminates one layer without attesting: what any party holding an
/// agreement secret can do, including an interposed proxy.
pub fn unattested_endpoint(layer: Layer, hello: &ClientHello, secret: &AgreementSecret) -> (Digest, LayerEndpoint) {
    let public = secret.public();
    let binding = kx_binding(layer, hello, &public);
    let client = match layer {
        Layer::Outer => &hello.outer_public,
        Layer::Inner => &hello.inner_public,
    };
    let key = derive_key(layer, &secret.agree(client), &binding);
    (binding, LayerEndpoint { layer, session_id: hello.session_id, key, last_counter: 0 })
}

/// Enclave side of the handshake for one layer.
pub fn respond(
    enclave: &dyn QuoteSource,
    layer: Layer,
    hello: &ClientHello,
    rng: &mut SeededRng,
) -> Result<(EnclaveHello, LayerEndpoint), AttestationError> {
    let secret = AgreementSecret::generate(rng);
    let (binding, endpoint) = unattested_endpoint(layer, hello, &secret);
    let quote = enclave.quote(binding.as_bytes(), hello.nonce)?;
    Ok((EnclaveHello { public: secret.public(), quote }, endpoint))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpectedMeasurements {
    pub runtime: Digest,
    pub app: Digest,
}

/// Client-side checks. Everything is on by default; the fault-injection
/// harness turns individual checks off to demonstrate what they prevent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandshakePolicy {
    pub verify_outer: bool,
    pub verify_inner_measurement: bool,
    /// When false the inner layer reuses the outer key, so whoever
    /// terminates the outer layer can read payloads.
    pub separate_layers: bool,
}

impl Default for HandshakePolicy {
    fn default() -> Self {
        Self { verify_outer: true, verify_inner_measurement: true, separate_layers: true }
    }
}

pub struct ClientHandshake {
    hello: ClientHello,
    outer_secret: AgreementSecret,
    inner_secret: AgreementSecret,
}

#[derive(Debug, Clone)]
pub struct LayeredSession {
    pub session_id: [u8; SESSION_ID_LEN],
    pub app_id: String,
    outer_key: AeadKey,
    inner_key: AeadKey,
    outer_counter: u64,
    inner_counter: u64,
    pub quotes: Vec<AttestationQuote>,
}

fn check_layer(
    layer: Layer,
    hello: &ClientHello,
    answer: &EnclaveHello,
    expected: &Digest,
    trusted: &TrustedVendors,
) -> Result<(), QuoteRejection> {
    if answer.quote.report_data != report_data(kx_binding(layer, hello, &answer.public).as_bytes()) {
        return Err(QuoteRejection::BadSignature);
    }
    verify_quote(&answer.quote, expected, trusted, &hello.nonce)
}

impl ClientHandshake {
    pub fn start(app_id: &str, rng: &mut SeededRng) -> Self {
        let outer_secret = AgreementSecret::generate(rng);
        let inner_secret = AgreementSecret::generate(rng);
        let hello = ClientHello {
            session_id: rng.next_array(),
            app_id: app_id.to_string(),
            outer_public: outer_secret.public(),
            inner_public: inner_secret.public(),
            nonce: rng.next_array(),
        };
        Self { hello, outer_secret, inner_secret }
    }

    pub fn hello(&self) -> &ClientHello {
        &self.hello
    }

    /// Establishes the session iff both quotes verify and bind the
    /// agreement values that arrived with them.
    pub fn finish(
        self,
        outer: &EnclaveHello,
        inner: &EnclaveHello,
        trusted: &TrustedVendors,
        expected: &ExpectedMeasurements,
        policy: HandshakePolicy,
    ) -> Result<LayeredSession, HandshakeFailure> {
        if policy.verify_outer {
            check_layer(Layer::Outer, &self.hello, outer, &expected.runtime, trusted)
                .map_err(HandshakeFailure::OuterAttestation)?;
        }
        let outer_binding = kx_binding(Layer::Outer, &self.hello, &outer.public);
        let outer_key = derive_key(Layer::Outer, &self.outer_secret.agree(&outer.public), &outer_binding);
        let inner_key = if policy.separate_layers {
            let expected_app = if policy.verify_inner_measurement { expected.app } else { inner.quote.measurement };
            check_layer(Layer::Inner, &self.hello, inner, &expected_app, trusted)
                .map_err(HandshakeFailure::InnerAttestation)?;
            let binding = kx_binding(Layer::Inner, &self.hello, &inner.public);
            derive_key(Layer::Inner, &self.inner_secret.agree(&inner.public), &binding)
        } else {
            outer_key.clone()
        };
        Ok(LayeredSession {
            session_id: self.hello.session_id,
            app_id: self.hello.app_id,
            outer_key,
            inner_key,
            outer_counter: 0,
            inner_counter: 0,
            quotes: vec![outer.quote.clone(), inner.quote.clone()],
        })
    }
}

/// The runtime's outer endpoint relabelled as an inner one: what a runtime
/// manager holds when it tries to read application traffic.
pub fn reuse_as_inner(runtime: &LayerEndpoint) -> LayerEndpoint {
    LayerEndpoint { layer: Layer::Inner, last_counter: 0, ..runtime.clone() }
}

/// Runs both enclave sides and the client side in one call.
pub fn handshake(
    app_id: &str,
    runtime: &EnclaveIdentity,
    app: &EnclaveIdentity,
    trusted: &TrustedVendors,
    expected: &ExpectedMeasurements,
    rng: &mut SeededRng,
) -> Result<(LayeredSession, LayerEndpoint, LayerEndpoint), HandshakeFailure> {
    let client = ClientHandshake::start(app_id, rng);
    let (outer, runtime_end) = respond(runtime, Layer::Outer, client.hello(), rng)
        .map_err(|_| HandshakeFailure::OuterAttestation(QuoteRejection::BadSignature))?;
    let (inner, app_end) = respond(app, Layer::Inner, client.hello(), rng)
        .map_err(|_| HandshakeFailure::InnerAttestation(QuoteRejection::BadSignature))?;
    let session = client.finish(&outer, &inner, trusted, expected, HandshakePolicy::default())?;
    Ok((session, runtime_end, app_end))
}

/// The only plaintext the runtime manager sees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoutingHeader {
    pub app_id: String,
    #[serde(with = "hex::serde")]
    pub session_id: [u8; SESSION_ID_LEN],
}

impl RoutingHeader {
    pub fn for_session(session: &LayeredSession) -> Self {
        Self { app_id: session.app_id.clone(), session_id: session.session_id }
    }
}

/// Wire form: version, session id, outer nonce, length-prefixed body, tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub session_id: [u8; SESSION_ID_LEN],
    pub outer: Ciphertext,
}

fn outer_aad(session_id: &[u8; SESSION_ID_LEN]) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.str("envelope").u8(ENVELOPE_VERSION).raw(session_id);
    enc.finish()
}

fn inner_aad(session_id: &[u8; SESSION_ID_LEN]) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.str("inner").raw(session_id);
    enc.finish()
}

impl Envelope {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u8(ENVELOPE_VERSION).raw(&self.session_id).raw(&self.outer.nonce.0).bytes(&self.outer.body).raw(&self.outer.tag);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let version = dec.u8()?;
        if version != ENVELOPE_VERSION {
            return Err(CodecError::UnsupportedVersion(version));
        }
        let session_id = dec.array()?;
        let outer = Ciphertext { nonce: Nonce(dec.array()?), body: dec.vec()?, tag: dec.array()? };
        dec.finish()?;
        Ok(Self { session_id, outer })
    }
}

impl LayeredSession {
    pub fn outer_counter(&self) -> u64 {
        self.outer_counter
    }

    /// Seals `payload` under the inner key, then wraps it with the routing
    /// header under the outer key. Counters advance on every call.
    pub fn seal_request(&mut self, routing: &RoutingHeader, payload: &[u8]) -> Envelope {
        self.inner_counter += 1;
        self.outer_counter += 1;
        let inner = aead_seal(
            &self.inner_key,
            Nonce::from_counter(INNER_STREAM, self.inner_counter),
            &inner_aad(&self.session_id),
            payload,
        );
        let mut enc = Encoder::new();
        enc.str(&routing.app_id).raw(&routing.session_id);
        inner.encode(&mut enc);
        let outer = aead_seal(
            &self.outer_key,
            Nonce::from_counter(OUTER_STREAM, self.outer_counter),
            &outer_aad(&self.session_id),
            &enc.finish(),
        );
        Envelope { session_id: self.session_id, outer }
    }
}

fn open_layer(end: &mut LayerEndpoint, aad: &[u8], ct: &Ciphertext) -> Result<Vec<u8>, ChannelError> {
    end.accept(&ct.nonce)?;
    let plain = aead_open(&end.key, aad, ct).map_err(|_| ChannelError::Authentication(end.layer))?;
    end.last_counter = ct.nonce.counter();
    Ok(plain)
}

/// Strips the outer layer. Yields the routing header and the opaque inner
/// ciphertext.
pub fn open_at_runtime(runtime: &mut LayerEndpoint, env: &Envelope) -> Result<(RoutingHeader, Ciphertext), ChannelError> {
    if env.session_id != runtime.session_id {
        return Err(ChannelError::WrongSession);
    }
    let plain = open_layer(runtime, &outer_aad(&env.session_id), &env.outer)?;
    let mut dec = Decoder::new(&plain);
    let routing = RoutingHeader { app_id: dec.string()?, session_id: dec.array()? };
    let inner = Ciphertext::decode(&mut dec)?;
    dec.finish()?;
    Ok((routing, inner))
}

pub fn open_at_app(app: &mut LayerEndpoint, inner: &Ciphertext) -> Result<Vec<u8>, ChannelError> {
    let aad = inner_aad(&app.session_id);
    open_layer(app, &aad, inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attestation::{ClockRate, PlatformId, Vendor, VendorRoots};
    use crate::crypto::hash;

    struct Setup {
        roots: VendorRoots,
        runtime: EnclaveIdentity,
        app: EnclaveIdentity,
        expected: ExpectedMeasurements,
        rng: SeededRng,
    }

    fn setup() -> Setup {
        let mut rng = SeededRng::from_u64(11);
        let roots = VendorRoots::generate(&mut rng);
        let expected = ExpectedMeasurements { runtime: hash(b"runtime"), app: hash(b"app") };
        let runtime = roots.root(Vendor::A).provision(PlatformId(1), expected.runtime, ClockRate::NOMINAL, &mut rng);
        let app = roots.root(Vendor::A).provision(PlatformId(1), expected.app, ClockRate::NOMINAL, &mut rng);
        Setup { roots, runtime, app, expected, rng }
    }

    #[test]
    fn nested_round_trip() {
        let mut s = setup();
        let (mut session, mut rt, mut app) =
            handshake("ledger", &s.runtime, &s.app, &s.roots.trust_all(), &s.expected, &mut s.rng).unwrap();
        let routing = RoutingHeader::for_session(&session);
        let env = session.seal_request(&routing, b"payload");
        let env = Envelope::from_bytes(&env.to_bytes()).unwrap();
        let (seen, inner) = open_at_runtime(&mut rt, &env).unwrap();
        assert_eq!(seen, routing);
        assert_eq!(open_at_app(&mut app, &inner).unwrap(), b"payload");
    }

    #[test]
    fn runtime_cannot_open_inner() {
        let mut s = setup();
        let (mut session, mut rt, _) =
            handshake("ledger", &s.runtime, &s.app, &s.roots.trust_all(), &s.expected, &mut s.rng).unwrap();
        let env = session.seal_request(&RoutingHeader::for_session(&session), b"secret");
        let (_, inner) = open_at_runtime(&mut rt, &env).unwrap();
        let mut as_app = LayerEndpoint { layer: Layer::Inner, last_counter: 0, ..rt.clone() };
        assert_eq!(open_at_app(&mut as_app, &inner), Err(ChannelError::Authentication(Layer::Inner)));
    }

    #[test]
    fn modified_app_fails_inner_attestation() {
        let mut s = setup();
        let modified =
            s.roots.root(Vendor::A).provision(PlatformId(1), hash(b"modified"), ClockRate::NOMINAL, &mut s.rng);
        let err = handshake("ledger", &s.runtime, &modified, &s.roots.trust_all(), &s.expected, &mut s.rng).unwrap_err();
        assert_eq!(err, HandshakeFailure::InnerAttestation(QuoteRejection::WrongMeasurement));
    }

    #[test]
    fn substituted_outer_key_fails_outer_attestation() {
        let mut s = setup();
        let trusted = s.roots.trust_all();
        let client = ClientHandshake::start("ledger", &mut s.rng);
        let (outer, _) = respond(&s.runtime, Layer::Outer, client.hello(), &mut s.rng).unwrap();
        let (inner, _) = respond(&s.app, Layer::Inner, client.hello(), &mut s.rng).unwrap();
        let proxy = AgreementSecret::generate(&mut s.rng);
        let forged = EnclaveHello { public: proxy.public(), quote: outer.quote };
        let err = client.finish(&forged, &inner, &trusted, &s.expected, HandshakePolicy::default()).unwrap_err();
        assert_eq!(err.layer(), Layer::Outer);
    }

    #[test]
    fn replay_is_rejected() {
        let mut s = setup();
        let (mut session, mut rt, mut app) =
            handshake("ledger", &s.runtime, &s.app, &s.roots.trust_all(), &s.expected, &mut s.rng).unwrap();
        let routing = RoutingHeader::for_session(&session);
        let e1 = session.seal_request(&routing, b"one");
        let e2 = session.seal_request(&routing, b"two");
        let (_, i2) = open_at_runtime(&mut rt, &e2).unwrap();
        assert_eq!(open_at_runtime(&mut rt, &e1), Err(ChannelError::Replay { counter: 1, last: 2 }));
        assert!(matches!(open_at_runtime(&mut rt, &e2), Err(ChannelError::Replay { .. })));
        open_at_app(&mut app, &i2).unwrap();
        assert!(matches!(open_at_app(&mut app, &i2), Err(ChannelError::Replay { .. })));
    }
}
