//! Simulated trusted execution environment.
//!
//! Every service the protocol needs from an enclave lives here: identity
//! keys, signing, trusted randomness, linkable remote attestation, the
//! shared key pair handed to joiners, and sealed certificates. Code outside
//! this module never sees secret key material; it only holds [`Enclave`]
//! handles and the public [`Crypto`] verifier.
//!
//! Cryptography is pluggable. [`ProviderKind::Stub`] uses keyed SHA-256
//! constructions backed by a run-private key table (fast, tamper-evident,
//! not secure). [`ProviderKind::Real`] (feature `real-crypto`) uses Ed25519
//! signatures and X25519 + ChaCha20-Poly1305 sealed boxes.

mod stub;

#[cfg(feature = "real-crypto")]
mod real;

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::hash::Hash;
use crate::NodeId;

/// Code measurement of the honest enclave build.
pub fn reference_measurement() -> Hash {
    Hash::digest(b"enclave-consensus/enclave-code/v1")
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PublicKey(pub [u8; 32]);

impl PublicKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<PublicKey> {
        Some(PublicKey(hex::decode(s).ok()?.try_into().ok()?))
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pk:{}", &self.to_hex()[..8])
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Secret half of a key pair. Deliberately neither `Debug`, `Clone` outside
/// this module, nor encodable.
pub struct SecretKey([u8; 32]);

impl SecretKey {
    fn duplicate(&self) -> SecretKey {
        SecretKey(self.0)
    }
}

pub struct KeyPair {
    pub public_key: PublicKey,
    secret_key: SecretKey,
}

impl KeyPair {
    fn duplicate(&self) -> KeyPair {
        KeyPair {
            public_key: self.public_key,
            secret_key: self.secret_key.duplicate(),
        }
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public_key", &self.public_key)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Debug)]
pub struct Signature(pub Vec<u8>);

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Debug)]
pub struct Ciphertext(pub Vec<u8>);

/// Linkability tag of one simulated CPU.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Debug)]
pub struct PlatformId(pub u64);

/// Attestation-service credential (`cre`). Checked for presence only.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Credential(pub Hash);

/// Attestation evidence. `report_data` binds the quote to the enclave's
/// identity key; `evidence` is the simulated hardware signature over the
/// other fields.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Quote {
    pub measurement: Hash,
    pub platform_id: PlatformId,
    pub nonce: u64,
    pub report_data: PublicKey,
    pub evidence: Signature,
}

impl Quote {
    fn signed_body(measurement: &Hash, platform: PlatformId, nonce: u64, pk: &PublicKey) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(b"quote").hash(measurement).u64(platform.0).u64(nonce).fixed(&pk.0);
        w.into_bytes()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TeeError {
    #[error("node {0} already has an enclave in this run")]
    DuplicateNode(NodeId),
    #[error("measurement mismatch: expected {expected}, quote carries {actual}")]
    MeasurementMismatch { expected: Hash, actual: Hash },
    #[error("quote evidence does not verify")]
    BadEvidence,
    #[error("quote is bound to a different identity key")]
    IdentityMismatch,
    #[error("challenger holds no attestation credential")]
    MissingCredential,
    #[error("enclave holds no shared key pair")]
    MissingSharedKey,
    #[error("unknown recipient key")]
    UnknownRecipient,
    #[error("provisioning payload did not decrypt")]
    BadProvision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProviderKind {
    #[default]
    Stub,
    #[cfg(feature = "real-crypto")]
    Real,
}

impl ProviderKind {
    pub fn parse(s: &str) -> Option<ProviderKind> {
        match s {
            "stub" => Some(ProviderKind::Stub),
            #[cfg(feature = "real-crypto")]
            "real" => Some(ProviderKind::Real),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProviderKind::Stub => "stub",
            #[cfg(feature = "real-crypto")]
            ProviderKind::Real => "real",
        }
    }
}

/// Primitive operations a crypto backend supplies.
pub(crate) trait CryptoProvider {
    fn keygen(&self, seed: [u8; 32]) -> KeyPair;
    fn sign(&self, sk: &SecretKey, msg: &[u8]) -> Signature;
    fn verify(&self, pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool;
    fn encrypt(&self, recipient: &PublicKey, msg: &[u8], rng: &mut dyn RngCore) -> Option<Ciphertext>;
    fn decrypt(&self, sk: &SecretKey, ct: &Ciphertext) -> Option<Vec<u8>>;
}

struct Shared {
    provider: Box<dyn CryptoProvider>,
    hardware_root: KeyPair,
    seed: u64,
}

/// Public verification services of one simulation run. Cheap to clone.
#[derive(Clone)]
pub struct Crypto(Rc<Shared>);

impl Crypto {
    pub fn verify(&self, pk: &PublicKey, payload: &[u8], sig: &Signature) -> bool {
        self.0.provider.verify(pk, payload, sig)
    }

    /// Seal `payload` to the enclave owning `recipient`.
    pub fn encrypt(
        &self,
        recipient: &PublicKey,
        payload: &[u8],
        rng: &mut dyn RngCore,
    ) -> Result<Ciphertext, TeeError> {
        self.0
            .provider
            .encrypt(recipient, payload, rng)
            .ok_or(TeeError::UnknownRecipient)
    }

    /// Simulated attestation-service check of a quote: evidence signature,
    /// code measurement, identity binding.
    pub fn check_quote(
        &self,
        quote: &Quote,
        expected_measurement: &Hash,
        claimed_pk: &PublicKey,
    ) -> Result<(), TeeError> {
        let body = Quote::signed_body(
            &quote.measurement,
            quote.platform_id,
            quote.nonce,
            &quote.report_data,
        );
        if !self.verify(&self.0.hardware_root.public_key, &body, &quote.evidence) {
            return Err(TeeError::BadEvidence);
        }
        if &quote.measurement != expected_measurement {
            return Err(TeeError::MeasurementMismatch {
                expected: *expected_measurement,
                actual: quote.measurement,
            });
        }
        if &quote.report_data != claimed_pk {
            return Err(TeeError::IdentityMismatch);
        }
        Ok(())
    }
}

impl fmt::Debug for Crypto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Crypto").field("seed", &self.0.seed).finish_non_exhaustive()
    }
}

/// Provisioning options for one enclave.
#[derive(Clone, Debug)]
pub struct EnclaveSpec {
    pub node: NodeId,
    /// Simulated CPU; defaults to the node id.
    pub cpu: u64,
    pub measurement: Hash,
}

impl EnclaveSpec {
    pub fn honest(node: NodeId) -> Self {
        EnclaveSpec {
            node,
            cpu: node as u64,
            measurement: reference_measurement(),
        }
    }
}

/// The enclave factory of one simulation run.
pub struct TeePlatform {
    crypto: Crypto,
    provisioned: BTreeSet<NodeId>,
}

fn derive_seed(tag: &[u8], seed: u64, index: u64) -> [u8; 32] {
    Hash::digest_parts(&[tag, &seed.to_be_bytes(), &index.to_be_bytes()]).0
}

impl TeePlatform {
    pub fn new(harness_seed: u64, provider: ProviderKind) -> Self {
        let provider: Box<dyn CryptoProvider> = match provider {
            ProviderKind::Stub => Box::new(stub::StubProvider::default()),
            #[cfg(feature = "real-crypto")]
            ProviderKind::Real => Box::new(real::RealProvider),
        };
        let hardware_root = provider.keygen(derive_seed(b"hardware-root", harness_seed, 0));
        TeePlatform {
            crypto: Crypto(Rc::new(Shared {
                provider,
                hardware_root,
                seed: harness_seed,
            })),
            provisioned: BTreeSet::new(),
        }
    }

    pub fn crypto(&self) -> Crypto {
        self.crypto.clone()
    }

    pub fn harness_seed(&self) -> u64 {
        self.crypto.0.seed
    }

    /// Harness-issued attestation credential, standing in for registering
    /// with the attestation service.
    pub fn issue_credential(&self) -> Credential {
        Credential(Hash::digest_parts(&[b"ias-credential", &self.harness_seed().to_be_bytes()]))
    }

    pub fn create_enclave(&mut self, node: NodeId) -> Result<Enclave, TeeError> {
        self.create_enclave_with(EnclaveSpec::honest(node))
    }

    pub fn create_enclave_with(&mut self, spec: EnclaveSpec) -> Result<Enclave, TeeError> {
        if !self.provisioned.insert(spec.node) {
            return Err(TeeError::DuplicateNode(spec.node));
        }
        let seed = self.harness_seed();
        let keys = self
            .crypto
            .0
            .provider
            .keygen(derive_seed(b"enclave-key", seed, spec.node as u64));
        let rng = ChaCha20Rng::from_seed(derive_seed(b"enclave-rng", seed, spec.node as u64));
        let platform_id = PlatformId(Hash::digest_parts(&[b"cpu", &seed.to_be_bytes(), &spec.cpu.to_be_bytes()]).prefix_u64());
        Ok(Enclave {
            node: spec.node,
            keys,
            rng,
            platform_id,
            measurement: spec.measurement,
            credential: None,
            shared: None,
            crypto: self.crypto.clone(),
        })
    }
}

/// What a challenger hands a newly attested enclave.
struct Provision {
    shared: KeyPair,
    credential: Credential,
}

impl Provision {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(&self.shared.public_key.0)
            .fixed(&self.shared.secret_key.0)
            .hash(&self.credential.0);
        w.into_bytes()
    }

    fn decode(bytes: &[u8]) -> Result<Provision, DecodeError> {
        let mut r = Reader::new(bytes);
        let pk = PublicKey(r.fixed()?);
        let sk = SecretKey(r.fixed()?);
        let cre = Credential(r.hash()?);
        r.finish()?;
        Ok(Provision {
            shared: KeyPair {
                public_key: pk,
                secret_key: sk,
            },
            credential: cre,
        })
    }
}

/// Handle to one simulated enclave. Owned by exactly one node.
pub struct Enclave {
    node: NodeId,
    keys: KeyPair,
    rng: ChaCha20Rng,
    platform_id: PlatformId,
    measurement: Hash,
    credential: Option<Credential>,
    shared: Option<KeyPair>,
    crypto: Crypto,
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("node", &self.node)
            .field("public_key", &self.keys.public_key)
            .field("platform_id", &self.platform_id)
            .finish_non_exhaustive()
    }
}

impl Enclave {
    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.public_key
    }

    pub fn platform_id(&self) -> PlatformId {
        self.platform_id
    }

    pub fn measurement(&self) -> Hash {
        self.measurement
    }

    pub fn crypto(&self) -> &Crypto {
        &self.crypto
    }

    pub fn has_credential(&self) -> bool {
        self.credential.is_some()
    }

    pub fn shared_public_key(&self) -> Option<PublicKey> {
        self.shared.as_ref().map(|k| k.public_key)
    }

    pub fn install_credential(&mut self, cre: Credential) {
        self.credential = Some(cre);
    }

    pub fn sign(&self, payload: &[u8]) -> Signature {
        self.crypto.0.provider.sign(&self.keys.secret_key, payload)
    }

    pub fn trusted_random(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn random_bytes(&mut self, n: usize) -> Vec<u8> {
        let mut out = vec![0u8; n];
        self.rng.fill_bytes(&mut out);
        out
    }

    /// Generate the network-wide shared key pair. Founder only.
    pub fn generate_shared_pair(&mut self) -> PublicKey {
        let mut seed = [0u8; 32];
        self.rng.fill_bytes(&mut seed);
        let pair = self.crypto.0.provider.keygen(seed);
        let pk = pair.public_key;
        self.shared = Some(pair);
        pk
    }

    /// Produce a quote over this enclave's measurement and identity.
    pub fn quote(&self, nonce: u64) -> Quote {
        let body = Quote::signed_body(&self.measurement, self.platform_id, nonce, &self.keys.public_key);
        let evidence = self
            .crypto
            .0
            .provider
            .sign(&self.crypto.0.hardware_root.secret_key, &body);
        Quote {
            measurement: self.measurement,
            platform_id: self.platform_id,
            nonce,
            report_data: self.keys.public_key,
            evidence,
        }
    }

    /// Challenger-side check of a remote quote. Requires the credential.
    pub fn verify_quote(
        &self,
        quote: &Quote,
        expected_measurement: &Hash,
        claimed_pk: &PublicKey,
    ) -> Result<(), TeeError> {
        if self.credential.is_none() {
            return Err(TeeError::MissingCredential);
        }
        self.crypto.check_quote(quote, expected_measurement, claimed_pk)
    }

    /// Seal the shared key pair and credential to an attested joiner.
    pub fn provision_for(&mut self, joiner: &PublicKey) -> Result<Ciphertext, TeeError> {
        let credential = self.credential.ok_or(TeeError::MissingCredential)?;
        let shared = self.shared.as_ref().ok_or(TeeError::MissingSharedKey)?.duplicate();
        let bytes = Provision { shared, credential }.encode();
        self.crypto.encrypt(joiner, &bytes, &mut self.rng)
    }

    /// Joiner-side install of a provision sealed by [`Enclave::provision_for`].
    pub fn install_provision(&mut self, ct: &Ciphertext) -> Result<(), TeeError> {
        let bytes = self.cert_decrypt(ct).ok_or(TeeError::BadProvision)?;
        let p = Provision::decode(&bytes).map_err(|_| TeeError::BadProvision)?;
        self.shared = Some(p.shared);
        self.credential = Some(p.credential);
        Ok(())
    }

    /// Seal a certificate payload to `recipient`, using enclave randomness.
    pub fn cert_encrypt(&mut self, recipient: &PublicKey, payload: &[u8]) -> Result<Ciphertext, TeeError> {
        self.crypto.encrypt(recipient, payload, &mut self.rng)
    }

    /// `None` when the ciphertext was not sealed to this enclave.
    pub fn cert_decrypt(&self, ct: &Ciphertext) -> Option<Vec<u8>> {
        self.crypto.0.provider.decrypt(&self.keys.secret_key, ct)
    }
}

/// Remote attestation of `target` by `challenger`.
///
/// On success the shared key pair and the credential move into the target
/// over the (simulated) secure channel.
pub fn attest(
    challenger: &mut Enclave,
    target: &mut Enclave,
    expected_measurement: &Hash,
) -> Result<Quote, TeeError> {
    if challenger.credential.is_none() {
        return Err(TeeError::MissingCredential);
    }
    let nonce = challenger.trusted_random();
    let quote = target.quote(nonce);
    challenger.verify_quote(&quote, expected_measurement, &target.public_key())?;
    let sealed = challenger.provision_for(&target.public_key())?;
    target.install_provision(&sealed)?;
    Ok(quote)
}

pub fn verify(crypto: &Crypto, pk: &PublicKey, payload: &[u8], sig: &Signature) -> bool {
    crypto.verify(pk, payload, sig)
}

impl Encode for PublicKey {
    fn encode(&self, w: &mut Writer) {
        w.fixed(&self.0);
    }
}

impl Decode for PublicKey {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(PublicKey(r.fixed()?))
    }
}

impl Encode for Signature {
    fn encode(&self, w: &mut Writer) {
        w.bytes(&self.0);
    }
}

impl Decode for Signature {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Signature(r.bytes()?))
    }
}

impl Encode for Ciphertext {
    fn encode(&self, w: &mut Writer) {
        w.bytes(&self.0);
    }
}

impl Decode for Ciphertext {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Ciphertext(r.bytes()?))
    }
}

impl Encode for Quote {
    fn encode(&self, w: &mut Writer) {
        w.hash(&self.measurement)
            .u64(self.platform_id.0)
            .u64(self.nonce)
            .put(&self.report_data)
            .put(&self.evidence);
    }
}

impl Decode for Quote {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Quote {
            measurement: r.hash()?,
            platform_id: PlatformId(r.u64()?),
            nonce: r.u64()?,
            report_data: r.get()?,
            evidence: r.get()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn platform(seed: u64) -> TeePlatform {
        TeePlatform::new(seed, ProviderKind::Stub)
    }

    #[test]
    fn same_node_and_seed_give_same_identity() {
        let a = platform(42).create_enclave(0).unwrap();
        let b = platform(42).create_enclave(0).unwrap();
        assert_eq!(a.public_key(), b.public_key());
        assert_eq!(a.platform_id(), b.platform_id());
    }

    #[test]
    fn distinct_nodes_get_distinct_keys() {
        let mut p = platform(42);
        let a = p.create_enclave(0).unwrap();
        let b = p.create_enclave(1).unwrap();
        assert_ne!(a.public_key(), b.public_key());
    }

    #[test]
    fn seed_changes_random_stream() {
        let mut a = platform(42).create_enclave(0).unwrap();
        let mut b = platform(43).create_enclave(0).unwrap();
        let xs: Vec<u64> = (0..10).map(|_| a.trusted_random()).collect();
        let ys: Vec<u64> = (0..10).map(|_| b.trusted_random()).collect();
        assert_ne!(xs, ys);
        assert!(xs.iter().zip(&ys).all(|(x, y)| x != y));
    }

    #[test]
    fn duplicate_node_rejected() {
        let mut p = platform(1);
        p.create_enclave(3).unwrap();
        assert_eq!(p.create_enclave(3).unwrap_err(), TeeError::DuplicateNode(3));
    }

    #[test]
    fn signatures_detect_tamper_and_wrong_key() {
        let mut p = platform(7);
        let a = p.create_enclave(0).unwrap();
        let b = p.create_enclave(1).unwrap();
        let c = p.crypto();
        let sig = a.sign(b"block");
        assert!(c.verify(&a.public_key(), b"block", &sig));
        assert!(!c.verify(&a.public_key(), b"blocx", &sig));
        assert!(!c.verify(&b.public_key(), b"block", &sig));
        assert_eq!(sig, a.sign(b"block"));
    }

    #[test]
    fn random_stream_advances_and_replays() {
        let mut a = platform(5).create_enclave(0).unwrap();
        let x = a.trusted_random();
        let y = a.trusted_random();
        assert_ne!(x, y);
        let mut again = platform(5).create_enclave(0).unwrap();
        assert_eq!(again.trusted_random(), x);
        assert_eq!(again.trusted_random(), y);
    }

    #[test]
    fn attestation_accepts_honest_and_transfers_shared_key() {
        let mut p = platform(11);
        let cre = p.issue_credential();
        let mut founder = p.create_enclave(0).unwrap();
        founder.install_credential(cre);
        let shared = founder.generate_shared_pair();
        let mut joiner = p.create_enclave(1).unwrap();
        let q = attest(&mut founder, &mut joiner, &reference_measurement()).unwrap();
        assert_eq!(q.measurement, reference_measurement());
        assert_eq!(joiner.shared_public_key(), Some(shared));
        assert!(joiner.has_credential());
    }

    #[test]
    fn attestation_rejects_altered_measurement() {
        let mut p = platform(11);
        let mut founder = p.create_enclave(0).unwrap();
        founder.install_credential(p.issue_credential());
        founder.generate_shared_pair();
        let mut evil = p
            .create_enclave_with(EnclaveSpec {
                node: 1,
                cpu: 1,
                measurement: Hash::digest(b"patched"),
            })
            .unwrap();
        let err = attest(&mut founder, &mut evil, &reference_measurement()).unwrap_err();
        assert!(matches!(err, TeeError::MeasurementMismatch { .. }));
        assert!(evil.shared_public_key().is_none());
    }

    #[test]
    fn attestation_requires_credential() {
        let mut p = platform(11);
        let mut a = p.create_enclave(0).unwrap();
        let mut b = p.create_enclave(1).unwrap();
        assert_eq!(
            attest(&mut a, &mut b, &reference_measurement()).unwrap_err(),
            TeeError::MissingCredential
        );
    }

    #[test]
    fn quotes_from_same_cpu_are_linkable() {
        let mut p = platform(2);
        let mut founder = p.create_enclave(0).unwrap();
        founder.install_credential(p.issue_credential());
        founder.generate_shared_pair();
        let mut x = p
            .create_enclave_with(EnclaveSpec { node: 1, cpu: 77, measurement: reference_measurement() })
            .unwrap();
        let mut y = p
            .create_enclave_with(EnclaveSpec { node: 2, cpu: 77, measurement: reference_measurement() })
            .unwrap();
        let qx = attest(&mut founder, &mut x, &reference_measurement()).unwrap();
        let qy = attest(&mut founder, &mut y, &reference_measurement()).unwrap();
        assert_eq!(qx.platform_id, qy.platform_id);
        assert_ne!(x.public_key(), y.public_key());
    }

    #[test]
    fn forged_quote_evidence_rejected() {
        let mut p = platform(2);
        let mut ch = p.create_enclave(0).unwrap();
        ch.install_credential(p.issue_credential());
        let t = p.create_enclave(1).unwrap();
        let mut q = t.quote(9);
        q.platform_id = PlatformId(q.platform_id.0 ^ 1);
        assert_eq!(
            ch.verify_quote(&q, &reference_measurement(), &t.public_key()),
            Err(TeeError::BadEvidence)
        );
        let q = t.quote(9);
        assert_eq!(
            ch.verify_quote(&q, &reference_measurement(), &ch.public_key()),
            Err(TeeError::IdentityMismatch)
        );
    }

    #[test]
    fn certificates_open_only_for_recipient() {
        let mut p = platform(3);
        let mut a = p.create_enclave(0).unwrap();
        let b = p.create_enclave(1).unwrap();
        let ct = a.cert_encrypt(&b.public_key(), b"nonce").unwrap();
        assert_eq!(b.cert_decrypt(&ct).as_deref(), Some(&b"nonce"[..]));
        assert!(a.cert_decrypt(&ct).is_none());
    }

    #[test]
    fn certificate_probe_over_ten_nodes() {
        let mut p = platform(4);
        let mut nodes: Vec<Enclave> = (0..10).map(|i| p.create_enclave(i).unwrap()).collect();
        let targets = [2usize, 5, 9];
        let pks: Vec<PublicKey> = targets.iter().map(|&i| nodes[i].public_key()).collect();
        let certs: Vec<Ciphertext> = pks
            .iter()
            .map(|pk| nodes[0].cert_encrypt(pk, b"payload").unwrap())
            .collect();
        let mut opened = Vec::new();
        for (i, n) in nodes.iter().enumerate() {
            if certs.iter().any(|c| n.cert_decrypt(c).is_some()) {
                opened.push(i);
            }
        }
        assert_eq!(opened, targets.to_vec());
    }

    #[test]
    fn unknown_recipient_rejected() {
        let mut p = platform(3);
        let mut a = p.create_enclave(0).unwrap();
        assert_eq!(
            a.cert_encrypt(&PublicKey([9; 32]), b"x").unwrap_err(),
            TeeError::UnknownRecipient
        );
    }

    /// Chi-square over 16 equal buckets of the top four bits, 100k draws.
    /// Critical value for p = 0.01 at 15 degrees of freedom is 30.578.
    #[test]
    fn trusted_random_is_uniform() {
        let mut e = platform(42).create_enclave(0).unwrap();
        let n = 100_000u64;
        let mut buckets = [0u64; 16];
        for _ in 0..n {
            buckets[(e.trusted_random() >> 60) as usize] += 1;
        }
        let expected = n as f64 / 16.0;
        let chi2: f64 = buckets
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 30.578, "chi-square {chi2}");
    }
}
