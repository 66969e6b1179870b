//! Committee and stealth-acceptor selection.
//!
//! Committees are public: any node recomputes them from the seed of the
//! previous block, the committee version and the member list. Acceptors are
//! hidden: the previous block's proposer samples them inside its enclave and
//! publishes only sealed certificates plus nonce commitments.

use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::hash::{commit_nonce, hash_u64, Hash, SeedStream};
use crate::tee::{Ciphertext, Enclave, PublicKey, TeeError};

/// Seed of committee version `version`: the base seed hashed `version` times.
pub fn committee_seed(base_seed: u64, version: u32) -> u64 {
    (0..version).fold(base_seed, |s, _| hash_u64(s))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitteeSpec {
    pub height: u64,
    pub version: u32,
    /// Selected members in sampling order.
    pub members: Vec<PublicKey>,
    pub seed_used: u64,
}

impl CommitteeSpec {
    pub fn derive(height: u64, version: u32, base_seed: u64, list: &[PublicKey], size: u32) -> Self {
        let seed = committee_seed(base_seed, version);
        CommitteeSpec {
            height,
            version,
            members: select_committee(list, seed, size as usize),
            seed_used: seed,
        }
    }

    pub fn contains(&self, pk: &PublicKey) -> bool {
        self.members.contains(pk)
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Seeded Fisher-Yates prefix of length `min(size, list.len())` over the
/// canonical (ascending) member list.
pub fn select_committee(list: &[PublicKey], seed: u64, size: usize) -> Vec<PublicKey> {
    let mut pool = list.to_vec();
    let k = size.min(pool.len());
    let mut stream = SeedStream::new(seed);
    for i in 0..k {
        let j = i + stream.below((pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// One published certificate: the nonce sealed to its acceptor, and a hash
/// commitment that lets any later proposer check a revealed nonce.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcceptorCert {
    pub ciphertext: Ciphertext,
    pub commitment: Hash,
}

impl Encode for AcceptorCert {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.ciphertext).hash(&self.commitment);
    }
}

impl Decode for AcceptorCert {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(AcceptorCert {
            ciphertext: r.get()?,
            commitment: r.hash()?,
        })
    }
}

/// The proposer's secret selection. Only `certs` may leave the enclave.
#[derive(Debug)]
#[cfg_attr(not(test), allow(dead_code))]
pub struct AcceptorSet {
    targets: Vec<PublicKey>,
    nonces: Vec<u64>,
    certs: Vec<AcceptorCert>,
}

impl AcceptorSet {
    pub fn certs(&self) -> &[AcceptorCert] {
        &self.certs
    }

    pub fn into_certs(self) -> Vec<AcceptorCert> {
        self.certs
    }

    /// Test-only view of the hidden selection.
    #[cfg(test)]
    pub(crate) fn secrets(&self) -> (&[PublicKey], &[u64]) {
        (&self.targets, &self.nonces)
    }
}

/// Sample `n` acceptors without replacement using enclave randomness. When
/// fewer than `n` members exist the set degrades to the whole list.
pub fn select_acceptors(proposer: &mut Enclave, list: &[PublicKey], n: usize) -> Result<AcceptorSet, TeeError> {
    let mut pool = list.to_vec();
    let k = n.min(pool.len());
    for i in 0..k {
        let span = (pool.len() - i) as u64;
        let zone = u64::MAX - (u64::MAX % span);
        let draw = loop {
            let x = proposer.trusted_random();
            if x < zone {
                break x % span;
            }
        };
        pool.swap(i, i + draw as usize);
    }
    pool.truncate(k);
    let mut nonces = Vec::with_capacity(k);
    let mut certs = Vec::with_capacity(k);
    for target in &pool {
        let nonce = proposer.trusted_random();
        let ciphertext = proposer.cert_encrypt(target, &nonce.to_be_bytes())?;
        certs.push(AcceptorCert {
            ciphertext,
            commitment: commit_nonce(nonce),
        });
        nonces.push(nonce);
    }
    Ok(AcceptorSet {
        targets: pool,
        nonces,
        certs,
    })
}

/// What a node learns from opening its certificate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AcceptorCredential {
    pub index: usize,
    pub nonce: u64,
}

/// Try every certificate; `None` means this node is not an acceptor.
pub fn probe_acceptor(enclave: &Enclave, certs: &[AcceptorCert]) -> Option<AcceptorCredential> {
    certs.iter().enumerate().find_map(|(index, cert)| {
        let plain = enclave.cert_decrypt(&cert.ciphertext)?;
        let nonce = u64::from_be_bytes(plain.as_slice().try_into().ok()?);
        (commit_nonce(nonce) == cert.commitment).then_some(AcceptorCredential { index, nonce })
    })
}

/// Index of the certificate whose commitment a revealed nonce opens.
pub fn verify_nonce(certs: &[AcceptorCert], nonce: u64) -> Option<usize> {
    let c = commit_nonce(nonce);
    certs.iter().position(|cert| cert.commitment == c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tee::{ProviderKind, TeePlatform};

    fn keys(n: u8) -> Vec<PublicKey> {
        (0..n).map(|i| PublicKey([i; 32])).collect()
    }

    #[test]
    fn seed_chain_identity_and_iteration() {
        assert_eq!(committee_seed(77, 0), 77);
        assert_eq!(committee_seed(77, 2), hash_u64(hash_u64(77)));
        let mut s = SeedStream::new(1);
        for _ in 0..100 {
            let x = s.next_u64();
            assert_ne!(committee_seed(x, 1), committee_seed(x, 0));
        }
    }

    #[test]
    fn singleton_committee() {
        assert_eq!(select_committee(&keys(1), 5, 1), keys(1));
    }

    #[test]
    fn committee_truncates_to_list() {
        let c = select_committee(&keys(3), 5, 7);
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn committee_is_deterministic_and_distinct() {
        let list = keys(20);
        let a = select_committee(&list, 99, 7);
        assert_eq!(a, select_committee(&list, 99, 7));
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 7);
    }

    /// Monte Carlo against uniform sampling: each of 10 members lands in a
    /// size-3 committee with probability 3/10.
    #[test]
    fn committee_inclusion_is_uniform() {
        let list = keys(10);
        let mut counts = [0u32; 10];
        let seeds = 10_000u64;
        let mut s = SeedStream::new(2024);
        for _ in 0..seeds {
            for pk in select_committee(&list, s.next_u64(), 3) {
                counts[pk.0[0] as usize] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / seeds as f64;
            assert!((f - 0.3).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn next_version_committee_changes() {
        let list = keys(20);
        let mut s = SeedStream::new(3);
        let mut differ = 0;
        for _ in 0..100 {
            let base = s.next_u64();
            let a = CommitteeSpec::derive(1, 0, base, &list, 5);
            let b = CommitteeSpec::derive(1, 1, base, &list, 5);
            if a.members != b.members {
                differ += 1;
            }
        }
        assert!(differ >= 99, "{differ}");
    }

    #[test]
    fn acceptors_exhaustive_and_probe() {
        let mut p = TeePlatform::new(8, ProviderKind::Stub);
        let mut nodes: Vec<Enclave> = (0..10).map(|i| p.create_enclave(i).unwrap()).collect();
        let mut list: Vec<PublicKey> = nodes.iter().map(|e| e.public_key()).collect();
        list.sort();

        let small = &list[..3];
        let all = select_acceptors(&mut nodes[0], small, 3).unwrap();
        let mut t = all.secrets().0.to_vec();
        t.sort();
        assert_eq!(t, small.to_vec());

        let set = select_acceptors(&mut nodes[0], &list, 3).unwrap();
        let hits: Vec<_> = nodes.iter().filter_map(|e| probe_acceptor(e, set.certs())).collect();
        assert_eq!(hits.len(), 3);
        let (targets, nonces) = set.secrets();
        for e in &nodes {
            let probed = probe_acceptor(e, set.certs());
            assert_eq!(probed.is_some(), targets.contains(&e.public_key()));
            if let Some(c) = probed {
                assert_eq!(nonces[c.index], c.nonce);
                assert_eq!(verify_nonce(set.certs(), c.nonce), Some(c.index));
            }
        }
        assert_eq!(verify_nonce(set.certs(), 12345), None);
    }

    #[test]
    fn acceptor_count_degrades() {
        let mut p = TeePlatform::new(8, ProviderKind::Stub);
        let mut e = p.create_enclave(0).unwrap();
        let me = e.public_key();
        let set = select_acceptors(&mut e, &[me], 9).unwrap();
        assert_eq!(set.certs().len(), 1);
    }
}
