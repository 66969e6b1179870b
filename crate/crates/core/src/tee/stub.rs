//! Structural crypto: keyed SHA-256 signatures and XOR-keystream sealed
//! boxes, with verification keys resolved through a run-private table.
//! Tamper-evident inside one simulation, worthless as real cryptography.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::RngCore;

use super::{Ciphertext, CryptoProvider, KeyPair, PublicKey, SecretKey, Signature};
use crate::hash::Hash;

const NONCE_LEN: usize = 16;
const TAG_LEN: usize = 16;

#[derive(Default)]
pub(crate) struct StubProvider {
    keys: RefCell<BTreeMap<PublicKey, [u8; 32]>>,
}

fn seal_key(sk: &[u8; 32]) -> [u8; 32] {
    Hash::digest_parts(&[b"stub-seal", sk]).0
}

fn keystream_xor(key: &[u8; 32], nonce: &[u8], data: &mut [u8]) {
    for (block, chunk) in data.chunks_mut(32).enumerate() {
        let pad = Hash::digest_parts(&[b"stub-stream", key, nonce, &(block as u64).to_be_bytes()]);
        for (b, p) in chunk.iter_mut().zip(pad.0.iter()) {
            *b ^= p;
        }
    }
}

fn tag(key: &[u8; 32], nonce: &[u8], body: &[u8]) -> [u8; TAG_LEN] {
    let h = Hash::digest_parts(&[b"stub-tag", key, nonce, body]);
    h.0[..TAG_LEN].try_into().expect("16 bytes")
}

impl CryptoProvider for StubProvider {
    fn keygen(&self, seed: [u8; 32]) -> KeyPair {
        let sk = Hash::digest_parts(&[b"stub-sk", &seed]).0;
        let pk = PublicKey(Hash::digest_parts(&[b"stub-pk", &sk]).0);
        self.keys.borrow_mut().insert(pk, sk);
        KeyPair {
            public_key: pk,
            secret_key: SecretKey(sk),
        }
    }

    fn sign(&self, sk: &SecretKey, msg: &[u8]) -> Signature {
        Signature(Hash::digest_parts(&[b"stub-sig", &sk.0, msg]).0.to_vec())
    }

    fn verify(&self, pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
        match self.keys.borrow().get(pk) {
            Some(sk) => sig.0 == Hash::digest_parts(&[b"stub-sig", sk, msg]).0,
            None => false,
        }
    }

    fn encrypt(&self, recipient: &PublicKey, msg: &[u8], rng: &mut dyn RngCore) -> Option<Ciphertext> {
        let key = seal_key(self.keys.borrow().get(recipient)?);
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let mut body = msg.to_vec();
        keystream_xor(&key, &nonce, &mut body);
        let t = tag(&key, &nonce, &body);
        let mut out = Vec::with_capacity(NONCE_LEN + body.len() + TAG_LEN);
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&body);
        out.extend_from_slice(&t);
        Some(Ciphertext(out))
    }

    fn decrypt(&self, sk: &SecretKey, ct: &Ciphertext) -> Option<Vec<u8>> {
        if ct.0.len() < NONCE_LEN + TAG_LEN {
            return None;
        }
        let key = seal_key(&sk.0);
        let (nonce, rest) = ct.0.split_at(NONCE_LEN);
        let (body, t) = rest.split_at(rest.len() - TAG_LEN);
        if tag(&key, nonce, body) != t {
            return None;
        }
        let mut out = body.to_vec();
        keystream_xor(&key, nonce, &mut out);
        Some(out)
    }
}
