//! Ed25519 signatures; sealed boxes via ephemeral X25519 against the
//! recipient's Ed25519 key in Montgomery form, then ChaCha20-Poly1305.

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::RngCore;
use x25519_dalek::{PublicKey as XPublic, StaticSecret};

use super::{Ciphertext, CryptoProvider, KeyPair, PublicKey, SecretKey, Signature};
use crate::hash::Hash;

pub(crate) struct RealProvider;

fn box_key(shared: &[u8; 32], eph: &[u8; 32], recipient: &[u8; 32]) -> Key {
    *Key::from_slice(&Hash::digest_parts(&[b"sealed-box", shared, eph, recipient]).0)
}

impl CryptoProvider for RealProvider {
    fn keygen(&self, seed: [u8; 32]) -> KeyPair {
        let sk = SigningKey::from_bytes(&seed);
        KeyPair {
            public_key: PublicKey(sk.verifying_key().to_bytes()),
            secret_key: SecretKey(seed),
        }
    }

    fn sign(&self, sk: &SecretKey, msg: &[u8]) -> Signature {
        Signature(SigningKey::from_bytes(&sk.0).sign(msg).to_bytes().to_vec())
    }

    fn verify(&self, pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
        let Ok(vk) = VerifyingKey::from_bytes(&pk.0) else {
            return false;
        };
        let Ok(bytes) = <[u8; 64]>::try_from(sig.0.as_slice()) else {
            return false;
        };
        vk.verify_strict(msg, &ed25519_dalek::Signature::from_bytes(&bytes)).is_ok()
    }

    fn encrypt(&self, recipient: &PublicKey, msg: &[u8], rng: &mut dyn RngCore) -> Option<Ciphertext> {
        let vk = VerifyingKey::from_bytes(&recipient.0).ok()?;
        let their = XPublic::from(vk.to_montgomery().to_bytes());
        let mut eph_bytes = [0u8; 32];
        rng.fill_bytes(&mut eph_bytes);
        let eph = StaticSecret::from(eph_bytes);
        let eph_pub = XPublic::from(&eph);
        let shared = eph.diffie_hellman(&their);
        let cipher = ChaCha20Poly1305::new(&box_key(shared.as_bytes(), eph_pub.as_bytes(), &recipient.0));
        let body = cipher.encrypt(Nonce::from_slice(&[0u8; 12]), msg).ok()?;
        let mut out = eph_pub.as_bytes().to_vec();
        out.extend_from_slice(&body);
        Some(Ciphertext(out))
    }

    fn decrypt(&self, sk: &SecretKey, ct: &Ciphertext) -> Option<Vec<u8>> {
        if ct.0.len() < 32 {
            return None;
        }
        let signing = SigningKey::from_bytes(&sk.0);
        let secret = StaticSecret::from(signing.to_scalar_bytes());
        let eph: [u8; 32] = ct.0[..32].try_into().ok()?;
        let shared = secret.diffie_hellman(&XPublic::from(eph));
        let me = signing.verifying_key().to_bytes();
        let cipher = ChaCha20Poly1305::new(&box_key(shared.as_bytes(), &eph, &me));
        cipher.decrypt(Nonce::from_slice(&[0u8; 12]), &ct.0[32..]).ok()
    }
}
