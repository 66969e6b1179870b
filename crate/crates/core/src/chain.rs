//! Blocks, the genesis procedure, per-node confirmed-chain storage and the
//! global fork oracle.

use std::fmt::Write as _;

use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::hash::Hash;
use crate::membership::RegistrationTx;
use crate::sortition::{select_acceptors, AcceptorCert};
use crate::tee::{Crypto, Enclave, PublicKey, Quote, Signature, TeeError};

/// Protocol parameters fixed at genesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Params {
    /// Committee size C.
    pub committee_size: u32,
    /// Stealth acceptor count N.
    pub acceptor_count: u32,
    /// Committee reformation timeout in simulated milliseconds.
    pub timeout_ms: u64,
    /// Blocks a registration stays active.
    pub membership_lifetime: u64,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            committee_size: 30,
            acceptor_count: 100,
            timeout_ms: 15_000,
            membership_lifetime: 1000,
        }
    }
}

impl Encode for Params {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.committee_size)
            .u32(self.acceptor_count)
            .u64(self.timeout_ms)
            .u64(self.membership_lifetime);
    }
}

impl Decode for Params {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Params {
            committee_size: r.u32()?,
            acceptor_count: r.u32()?,
            timeout_ms: r.u64()?,
            membership_lifetime: r.u64()?,
        })
    }
}

/// Founding member entry of the genesis block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FounderRecord {
    pub pk: PublicKey,
    pub quote: Quote,
}

/// Block 0. Besides the shared key, founder and code measurement it carries
/// the seed and acceptor certificates for height 1, which no earlier block
/// could supply.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenesisBlock {
    pub shared_pk: PublicKey,
    pub founder: FounderRecord,
    pub measurement: Hash,
    pub params: Params,
    pub seed: u64,
    pub acceptor_certs: Vec<AcceptorCert>,
}

impl GenesisBlock {
    pub fn hash(&self) -> Hash {
        Hash::digest_parts(&[b"genesis", &self.to_bytes()])
    }
}

impl Encode for GenesisBlock {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.shared_pk)
            .put(&self.founder.pk)
            .put(&self.founder.quote)
            .hash(&self.measurement)
            .put(&self.params)
            .u64(self.seed)
            .seq(&self.acceptor_certs, |w, c| c.encode(w));
    }
}

impl Decode for GenesisBlock {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(GenesisBlock {
            shared_pk: r.get()?,
            founder: FounderRecord {
                pk: r.get()?,
                quote: r.get()?,
            },
            measurement: r.hash()?,
            params: r.get()?,
            seed: r.u64()?,
            acceptor_certs: r.seq(|r| r.get())?,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GenesisError {
    #[error("founder self-attestation failed: {0}")]
    Attestation(#[from] TeeError),
    #[error("invalid parameters: {0}")]
    Params(&'static str),
}

/// Create the genesis block. The founder self-attests, generates the shared
/// key pair and becomes the sole initial member (and sole acceptor of
/// height 1).
pub fn make_genesis(founder: &mut Enclave, params: Params) -> Result<GenesisBlock, GenesisError> {
    if params.committee_size == 0 || params.acceptor_count == 0 {
        return Err(GenesisError::Params("committee and acceptor sizes must be positive"));
    }
    if params.membership_lifetime == 0 {
        return Err(GenesisError::Params("membership lifetime must be positive"));
    }
    let measurement = founder.measurement();
    let nonce = founder.trusted_random();
    let quote = founder.quote(nonce);
    founder
        .crypto()
        .check_quote(&quote, &crate::tee::reference_measurement(), &founder.public_key())?;
    let shared_pk = founder.generate_shared_pair();
    let seed = founder.trusted_random();
    let founder_pk = founder.public_key();
    let acceptors = select_acceptors(founder, &[founder_pk], params.acceptor_count as usize)?;
    Ok(GenesisBlock {
        shared_pk,
        founder: FounderRecord { pk: founder_pk, quote },
        measurement,
        params,
        seed,
        acceptor_certs: acceptors.into_certs(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockHeader {
    pub height: u64,
    pub parent_hash: Hash,
    /// Committee version under which the block was generated.
    pub committee_version: u32,
    pub proposer_pk: PublicKey,
    /// Trusted random number seeding the next height's committees.
    pub seed: u64,
    pub certs_root: Hash,
    pub registrations_root: Hash,
    pub payload_hash: Hash,
}

impl BlockHeader {
    pub fn hash(&self) -> Hash {
        Hash::digest_parts(&[b"block-header", &self.to_bytes()])
    }
}

impl Encode for BlockHeader {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.height)
            .hash(&self.parent_hash)
            .u32(self.committee_version)
            .put(&self.proposer_pk)
            .u64(self.seed)
            .hash(&self.certs_root)
            .hash(&self.registrations_root)
            .hash(&self.payload_hash);
    }
}

impl Decode for BlockHeader {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(BlockHeader {
            height: r.u64()?,
            parent_hash: r.hash()?,
            committee_version: r.u32()?,
            proposer_pk: r.get()?,
            seed: r.u64()?,
            certs_root: r.hash()?,
            registrations_root: r.hash()?,
            payload_hash: r.hash()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub acceptor_certs: Vec<AcceptorCert>,
    pub registrations: Vec<RegistrationTx>,
    pub payload: Vec<u8>,
    /// Proposer signature over the encoded header.
    pub proposer_sig: Signature,
}

pub fn certs_root(certs: &[AcceptorCert]) -> Hash {
    let mut w = Writer::new();
    w.seq(certs, |w, c| c.encode(w));
    Hash::digest_parts(&[b"certs", &w.into_bytes()])
}

pub fn registrations_root(regs: &[RegistrationTx]) -> Hash {
    let mut w = Writer::new();
    w.seq(regs, |w, r| r.encode(w));
    Hash::digest_parts(&[b"registrations", &w.into_bytes()])
}

/// Block contents before signing.
#[derive(Clone, Debug)]
pub struct BlockDraft {
    pub height: u64,
    pub parent_hash: Hash,
    pub committee_version: u32,
    pub seed: u64,
    pub acceptor_certs: Vec<AcceptorCert>,
    pub registrations: Vec<RegistrationTx>,
    pub payload: Vec<u8>,
}

impl BlockDraft {
    pub fn seal(self, proposer: &Enclave) -> Block {
        let header = BlockHeader {
            height: self.height,
            parent_hash: self.parent_hash,
            committee_version: self.committee_version,
            proposer_pk: proposer.public_key(),
            seed: self.seed,
            certs_root: certs_root(&self.acceptor_certs),
            registrations_root: registrations_root(&self.registrations),
            payload_hash: Hash::digest(&self.payload),
        };
        let proposer_sig = proposer.sign(&header.to_bytes());
        Block {
            header,
            acceptor_certs: self.acceptor_certs,
            registrations: self.registrations,
            payload: self.payload,
            proposer_sig,
        }
    }
}

impl Block {
    pub fn height(&self) -> u64 {
        self.header.height
    }

    pub fn hash(&self) -> Hash {
        self.header.hash()
    }

    /// Body commitments match the header and the proposer signature verifies.
    pub fn verify(&self, crypto: &Crypto) -> bool {
        self.header.certs_root == certs_root(&self.acceptor_certs)
            && self.header.registrations_root == registrations_root(&self.registrations)
            && self.header.payload_hash == Hash::digest(&self.payload)
            && crypto.verify(&self.header.proposer_pk, &self.header.to_bytes(), &self.proposer_sig)
    }
}

impl Encode for Block {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.header)
            .seq(&self.acceptor_certs, |w, c| c.encode(w))
            .seq(&self.registrations, |w, r| r.encode(w))
            .bytes(&self.payload)
            .put(&self.proposer_sig);
    }
}

impl Decode for Block {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Block {
            header: r.get()?,
            acceptor_certs: r.seq(|r| r.get())?,
            registrations: r.seq(|r| r.get())?,
            payload: r.bytes()?,
            proposer_sig: r.get()?,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AppendError {
    /// The block is ahead of the store; the caller keeps it until the gap is
    /// filled.
    #[error("height gap: block {height}, head {head}")]
    Gap { height: u64, head: u64 },
    #[error("parent hash mismatch at height {height}")]
    ParentMismatch { height: u64 },
    /// A different block is already confirmed at this height.
    #[error("fork at height {height}: stored {stored}, offered {offered}")]
    Fork { height: u64, stored: Hash, offered: Hash },
    #[error("block signature or body commitments invalid")]
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appended {
    New,
    /// Same block was already confirmed at this height.
    Duplicate,
}

/// Confirmed blocks of one node. Contiguous and append-only.
#[derive(Clone, Debug)]
pub struct ChainStore {
    genesis: GenesisBlock,
    genesis_hash: Hash,
    blocks: Vec<Block>,
    hashes: Vec<Hash>,
}

impl ChainStore {
    pub fn new(genesis: GenesisBlock) -> Self {
        let genesis_hash = genesis.hash();
        ChainStore {
            genesis,
            genesis_hash,
            blocks: Vec::new(),
            hashes: Vec::new(),
        }
    }

    pub fn genesis(&self) -> &GenesisBlock {
        &self.genesis
    }

    pub fn params(&self) -> &Params {
        &self.genesis.params
    }

    pub fn head_height(&self) -> u64 {
        self.blocks.len() as u64
    }

    /// Block at `height >= 1`.
    pub fn block(&self, height: u64) -> Option<&Block> {
        height.checked_sub(1).and_then(|i| self.blocks.get(i as usize))
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn hash_at(&self, height: u64) -> Option<Hash> {
        match height {
            0 => Some(self.genesis_hash),
            h => self.hashes.get(h as usize - 1).copied(),
        }
    }

    pub fn head_hash(&self) -> Hash {
        self.hash_at(self.head_height()).expect("head exists")
    }

    /// Seed carried by the block at `height` (genesis included).
    pub fn seed_at(&self, height: u64) -> Option<u64> {
        match height {
            0 => Some(self.genesis.seed),
            h => self.block(h).map(|b| b.header.seed),
        }
    }

    /// Acceptor certificates carried by the block at `height`, which name
    /// the acceptors of `height + 1`.
    pub fn certs_at(&self, height: u64) -> Option<&[AcceptorCert]> {
        match height {
            0 => Some(&self.genesis.acceptor_certs),
            h => self.block(h).map(|b| b.acceptor_certs.as_slice()),
        }
    }

    pub fn append_confirmed(&mut self, block: Block, crypto: &Crypto) -> Result<Appended, AppendError> {
        let head = self.head_height();
        let height = block.height();
        if height == 0 {
            return Err(AppendError::Invalid);
        }
        if height <= head {
            let stored = self.hash_at(height).expect("height <= head");
            let offered = block.hash();
            return if stored == offered {
                Ok(Appended::Duplicate)
            } else {
                Err(AppendError::Fork { height, stored, offered })
            };
        }
        if height > head + 1 {
            return Err(AppendError::Gap { height, head });
        }
        if block.header.parent_hash != self.head_hash() {
            return Err(AppendError::ParentMismatch { height });
        }
        if !block.verify(crypto) {
            return Err(AppendError::Invalid);
        }
        self.hashes.push(block.hash());
        self.blocks.push(block);
        Ok(Appended::New)
    }

    /// Header hashes at heights `0..=head`.
    pub fn hash_sequence(&self) -> Vec<Hash> {
        std::iter::once(self.genesis_hash).chain(self.hashes.iter().copied()).collect()
    }

    /// Line-delimited dump for post-run diffing and offline verification.
    pub fn dump(&self) -> String {
        let g = &self.genesis;
        let mut out = String::from("# chain-dump v1\n");
        let _ = writeln!(
            out,
            "genesis {} shared_pk={} founder={}:{} measurement={} committee_size={} acceptor_count={} timeout_ms={} membership_lifetime={} seed={}",
            self.genesis_hash,
            g.shared_pk,
            g.founder.pk,
            g.founder.quote.platform_id.0,
            g.measurement,
            g.params.committee_size,
            g.params.acceptor_count,
            g.params.timeout_ms,
            g.params.membership_lifetime,
            g.seed,
        );
        for (b, h) in self.blocks.iter().zip(&self.hashes) {
            let regs = if b.registrations.is_empty() {
                "-".to_string()
            } else {
                b.registrations
                    .iter()
                    .map(|r| format!("{}:{}", r.pk, r.quote.platform_id.0))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let _ = writeln!(
                out,
                "{} {} {} {} {} seed={} regs={}",
                b.header.height,
                h,
                b.header.parent_hash,
                b.header.committee_version,
                b.header.proposer_pk,
                b.header.seed,
                regs
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct ForkReport {
    pub fork_count: usize,
    pub first_divergent_height: Option<u64>,
}

/// Count node pairs whose confirmed sequences are not prefix-comparable.
pub fn fork_oracle<S: AsRef<[Hash]>>(sequences: &[S]) -> ForkReport {
    let mut report = ForkReport::default();
    for i in 0..sequences.len() {
        for j in i + 1..sequences.len() {
            let (a, b) = (sequences[i].as_ref(), sequences[j].as_ref());
            if let Some(h) = a.iter().zip(b).position(|(x, y)| x != y) {
                report.fork_count += 1;
                let h = h as u64;
                report.first_divergent_height =
                    Some(report.first_divergent_height.map_or(h, |m| m.min(h)));
            }
        }
    }
    report
}

/// Fork oracle over whole stores.
pub fn fork_oracle_stores(stores: &[&ChainStore]) -> ForkReport {
    let seqs: Vec<Vec<Hash>> = stores.iter().map(|s| s.hash_sequence()).collect();
    fork_oracle(&seqs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tee::{ProviderKind, TeePlatform};

    fn h(x: u8) -> Hash {
        Hash([x; 32])
    }

    fn setup(params: Params) -> (TeePlatform, Enclave, GenesisBlock) {
        let mut p = TeePlatform::new(42, ProviderKind::Stub);
        let mut founder = p.create_enclave(0).unwrap();
        founder.install_credential(p.issue_credential());
        let g = make_genesis(&mut founder, params).unwrap();
        (p, founder, g)
    }

    fn child(store: &ChainStore, proposer: &mut Enclave, payload: &[u8]) -> Block {
        BlockDraft {
            height: store.head_height() + 1,
            parent_hash: store.head_hash(),
            committee_version: 0,
            seed: proposer.trusted_random(),
            acceptor_certs: vec![],
            registrations: vec![],
            payload: payload.to_vec(),
        }
        .seal(proposer)
    }

    #[test]
    fn minimal_genesis_has_single_member_and_acceptor() {
        let params = Params { committee_size: 1, acceptor_count: 1, ..Params::default() };
        let (_p, founder, g) = setup(params);
        assert_eq!(g.founder.pk, founder.public_key());
        assert_eq!(g.acceptor_certs.len(), 1);
        assert_eq!(ChainStore::new(g).head_height(), 0);
    }

    #[test]
    fn table_one_parameters_echo() {
        let (_p, _f, g) = setup(Params { committee_size: 30, acceptor_count: 100, ..Params::default() });
        assert_eq!(g.params.committee_size, 30);
        assert_eq!(g.params.acceptor_count, 100);
        assert_eq!(GenesisBlock::from_bytes(&g.to_bytes()).unwrap(), g);
    }

    #[test]
    fn genesis_is_deterministic_per_seed() {
        let (_p1, _f1, g1) = setup(Params::default());
        let (_p2, _f2, g2) = setup(Params::default());
        assert_eq!(g1.to_bytes(), g2.to_bytes());
    }

    #[test]
    fn founders_differ_only_in_identity_fields() {
        let mut p = TeePlatform::new(42, ProviderKind::Stub);
        let mut a = p.create_enclave(0).unwrap();
        let mut b = p.create_enclave(1).unwrap();
        let ga = make_genesis(&mut a, Params::default()).unwrap();
        let gb = make_genesis(&mut b, Params::default()).unwrap();
        assert_ne!(ga.founder, gb.founder);
        assert_eq!(ga.params, gb.params);
        assert_eq!(ga.measurement, gb.measurement);
    }

    #[test]
    fn append_and_reject() {
        let (p, mut founder, g) = setup(Params::default());
        let crypto = p.crypto();
        let mut store = ChainStore::new(g);
        let b1 = child(&store, &mut founder, b"one");
        assert_eq!(store.append_confirmed(b1.clone(), &crypto), Ok(Appended::New));
        assert_eq!(store.head_height(), 1);
        assert_eq!(store.append_confirmed(b1, &crypto), Ok(Appended::Duplicate));

        // Stale parent at the fresh height.
        let mut stale = child(&store, &mut founder, b"two");
        stale.header.parent_hash = store.hash_at(0).unwrap();
        let stale = BlockDraft {
            height: 2,
            parent_hash: stale.header.parent_hash,
            committee_version: 0,
            seed: 1,
            acceptor_certs: vec![],
            registrations: vec![],
            payload: vec![],
        }
        .seal(&founder);
        assert_eq!(
            store.append_confirmed(stale, &crypto),
            Err(AppendError::ParentMismatch { height: 2 })
        );

        // Different block at confirmed height.
        let mut other = ChainStore::new(store.genesis().clone());
        let alt = child(&other, &mut founder, b"alt");
        other.append_confirmed(alt.clone(), &crypto).unwrap();
        assert!(matches!(
            store.append_confirmed(alt, &crypto),
            Err(AppendError::Fork { height: 1, .. })
        ));

        // Gap.
        let b2 = child(&store, &mut founder, b"2");
        let mut ahead = store.clone();
        ahead.append_confirmed(b2, &crypto).unwrap();
        let b3 = child(&ahead, &mut founder, b"3");
        assert_eq!(
            store.append_confirmed(b3, &crypto),
            Err(AppendError::Gap { height: 3, head: 1 })
        );
    }

    #[test]
    fn tampered_block_rejected() {
        let (p, mut founder, g) = setup(Params::default());
        let mut store = ChainStore::new(g);
        let mut b = child(&store, &mut founder, b"x");
        b.payload = b"y".to_vec();
        assert_eq!(store.append_confirmed(b, &p.crypto()), Err(AppendError::Invalid));
    }

    #[test]
    fn oracle_identical_and_lagging() {
        let a = vec![h(0), h(1), h(2)];
        let b = vec![h(0), h(1)];
        assert_eq!(fork_oracle(&[a.clone(), a.clone(), b]).fork_count, 0);
    }

    #[test]
    fn oracle_counts_divergent_pairs() {
        let base: Vec<Hash> = (0..5).map(h).collect();
        let mut bad = base.clone();
        bad[3] = h(99);
        let r = fork_oracle(&[base.clone(), base.clone(), bad, base]);
        assert_eq!(r.fork_count, 3);
        assert_eq!(r.first_divergent_height, Some(3));
    }

    #[test]
    fn dump_lists_every_block() {
        let (p, mut founder, g) = setup(Params::default());
        let mut store = ChainStore::new(g);
        for i in 0..3u8 {
            let b = child(&store, &mut founder, &[i]);
            store.append_confirmed(b, &p.crypto()).unwrap();
        }
        let dump = store.dump();
        assert_eq!(dump.lines().count(), 2 + 3);
        let line = dump.lines().nth(2).unwrap();
        assert!(line.starts_with(&format!("1 {} {} 0 {}", store.hash_at(1).unwrap(), store.hash_at(0).unwrap(), founder.public_key())));
    }
}
