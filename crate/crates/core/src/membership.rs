//! On-chain membership: the join/challenge exchange and derivation of the
//! active member list from confirmed registration transactions.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::chain::ChainStore;
use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::hash::Hash;
use crate::tee::{Ciphertext, Crypto, Enclave, PlatformId, PublicKey, Quote, Signature, TeeError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct MemberRecord {
    #[serde(serialize_with = "ser_pk")]
    pub pk: PublicKey,
    #[serde(serialize_with = "ser_platform")]
    pub platform_id: PlatformId,
    /// Height of the block holding the registration (0 for the founder).
    pub join_height: u64,
    pub expiry_height: u64,
}

fn ser_pk<S: serde::Serializer>(pk: &PublicKey, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&pk.to_hex())
}

fn ser_platform<S: serde::Serializer>(p: &PlatformId, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u64(p.0)
}

impl MemberRecord {
    /// Eligible for the committee or acceptor set of `height`. A record only
    /// takes effect from the height after the block that carries it.
    pub fn active_at(&self, height: u64) -> bool {
        self.join_height < height && height < self.expiry_height
    }
}

/// JOIN: a fresh enclave announces itself with a quote bound to its key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JoinRequest {
    pub pk: PublicKey,
    pub quote: Quote,
    pub sig: Signature,
}

impl JoinRequest {
    fn signed_body(pk: &PublicKey, quote: &Quote) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(b"join").put(pk).put(quote);
        w.into_bytes()
    }

    pub fn verify(&self, crypto: &Crypto) -> bool {
        crypto.verify(&self.pk, &Self::signed_body(&self.pk, &self.quote), &self.sig)
    }
}

/// Build a JOIN request from the joiner's enclave.
pub fn request_join(enclave: &mut Enclave) -> JoinRequest {
    let nonce = enclave.trusted_random();
    let quote = enclave.quote(nonce);
    let pk = enclave.public_key();
    let sig = enclave.sign(&JoinRequest::signed_body(&pk, &quote));
    JoinRequest { pk, quote, sig }
}

/// REG-TX: a challenger's signed statement `member(pk, quote)`, plus the
/// shared key pair and credential sealed to the joiner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistrationTx {
    pub pk: PublicKey,
    pub quote: Quote,
    pub provision: Ciphertext,
    pub challenger_pk: PublicKey,
    pub challenger_sig: Signature,
}

impl RegistrationTx {
    fn signed_body(pk: &PublicKey, quote: &Quote, provision: &Ciphertext) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(b"member").put(pk).put(quote).put(provision);
        w.into_bytes()
    }

    pub fn id(&self) -> Hash {
        Hash::digest_parts(&[b"reg-tx", &self.to_bytes()])
    }

    /// Challenger signature and quote evidence both check out.
    pub fn verify(&self, crypto: &Crypto, measurement: &Hash) -> bool {
        crypto.verify(
            &self.challenger_pk,
            &Self::signed_body(&self.pk, &self.quote, &self.provision),
            &self.challenger_sig,
        ) && crypto.check_quote(&self.quote, measurement, &self.pk).is_ok()
    }
}

impl Encode for RegistrationTx {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.pk)
            .put(&self.quote)
            .put(&self.provision)
            .put(&self.challenger_pk)
            .put(&self.challenger_sig);
    }
}

impl Decode for RegistrationTx {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(RegistrationTx {
            pk: r.get()?,
            quote: r.get()?,
            provision: r.get()?,
            challenger_pk: r.get()?,
            challenger_sig: r.get()?,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChallengeError {
    #[error("challenger is not an active member")]
    NotMember,
    #[error("join request signature invalid")]
    BadRequest,
    #[error("attestation failed: {0}")]
    Attestation(#[from] TeeError),
    #[error("platform already hosts an active member")]
    DuplicatePlatform,
}

/// Challenger side of a join. `active` is the member list the challenger
/// sees for the next height.
pub fn challenge(
    challenger: &mut Enclave,
    active: &[MemberRecord],
    join: &JoinRequest,
    measurement: &Hash,
) -> Result<RegistrationTx, ChallengeError> {
    let me = challenger.public_key();
    if !active.iter().any(|m| m.pk == me) {
        return Err(ChallengeError::NotMember);
    }
    if !join.verify(challenger.crypto()) {
        return Err(ChallengeError::BadRequest);
    }
    challenger.verify_quote(&join.quote, measurement, &join.pk)?;
    if active
        .iter()
        .any(|m| m.platform_id == join.quote.platform_id && m.pk != join.pk)
    {
        return Err(ChallengeError::DuplicatePlatform);
    }
    let provision = challenger.provision_for(&join.pk)?;
    let challenger_sig = challenger.sign(&RegistrationTx::signed_body(&join.pk, &join.quote, &provision));
    Ok(RegistrationTx {
        pk: join.pk,
        quote: join.quote.clone(),
        provision,
        challenger_pk: me,
        challenger_sig,
    })
}

/// Incrementally maintained member table.
///
/// A registration in block `b` for a pk whose record is still active at
/// `b + 1` is a duplicate and ignored; otherwise it (re)starts the record
/// with `join_height = b`. A registration whose platform already hosts a
/// different active member is ignored.
#[derive(Clone, Debug)]
pub struct MembershipLedger {
    lifetime: u64,
    records: BTreeMap<PublicKey, MemberRecord>,
    applied_through: u64,
}

impl MembershipLedger {
    pub fn genesis(founder: PublicKey, platform: PlatformId, lifetime: u64) -> Self {
        let mut records = BTreeMap::new();
        records.insert(
            founder,
            MemberRecord {
                pk: founder,
                platform_id: platform,
                join_height: 0,
                expiry_height: lifetime,
            },
        );
        MembershipLedger {
            lifetime,
            records,
            applied_through: 0,
        }
    }

    pub fn from_store(store: &ChainStore) -> Self {
        let g = store.genesis();
        let mut ledger =
            Self::genesis(g.founder.pk, g.founder.quote.platform_id, g.params.membership_lifetime);
        for b in store.blocks() {
            ledger.apply_block(b.height(), b.registrations.iter().map(|r| (r.pk, r.quote.platform_id)));
        }
        ledger
    }

    pub fn applied_through(&self) -> u64 {
        self.applied_through
    }

    /// Apply the registrations confirmed in block `height`, in block order.
    pub fn apply_block(&mut self, height: u64, regs: impl IntoIterator<Item = (PublicKey, PlatformId)>) {
        debug_assert!(height > self.applied_through, "blocks applied in order");
        self.applied_through = height;
        for (pk, platform) in regs {
            if self.admits(height, &pk, platform) {
                self.records.insert(
                    pk,
                    MemberRecord {
                        pk,
                        platform_id: platform,
                        join_height: height,
                        expiry_height: height + self.lifetime,
                    },
                );
            }
        }
    }

    /// Whether a registration for `pk` would take effect if included in
    /// block `height`.
    pub fn admits(&self, height: u64, pk: &PublicKey, platform: PlatformId) -> bool {
        let next = height + 1;
        if self.records.get(pk).is_some_and(|r| r.active_at(next)) {
            return false;
        }
        !self
            .records
            .values()
            .any(|r| r.pk != *pk && r.platform_id == platform && r.active_at(next))
    }

    pub fn record(&self, pk: &PublicKey) -> Option<&MemberRecord> {
        self.records.get(pk)
    }

    /// Records active at `height`, ascending by pk. Only meaningful for
    /// `height > applied_through`.
    pub fn active_at(&self, height: u64) -> Vec<MemberRecord> {
        self.records.values().filter(|r| r.active_at(height)).copied().collect()
    }

    pub fn active_keys(&self, height: u64) -> Vec<PublicKey> {
        self.active_at(height).into_iter().map(|r| r.pk).collect()
    }
}

/// Active member list for `height` derived from the confirmed blocks below
/// it. Pure function of the chain prefix; `height <= head + 1`.
pub fn active_members(store: &ChainStore, height: u64) -> Vec<MemberRecord> {
    assert!(height <= store.head_height() + 1, "list for height {height} needs unconfirmed blocks");
    let g = store.genesis();
    let mut ledger =
        MembershipLedger::genesis(g.founder.pk, g.founder.quote.platform_id, g.params.membership_lifetime);
    for b in store.blocks().iter().take(height.saturating_sub(1) as usize) {
        ledger.apply_block(b.height(), b.registrations.iter().map(|r| (r.pk, r.quote.platform_id)));
    }
    ledger.active_at(height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tee::{reference_measurement, EnclaveSpec, ProviderKind, TeePlatform};

    fn pk(x: u8) -> PublicKey {
        PublicKey([x; 32])
    }

    #[test]
    fn founder_active_at_height_one() {
        let l = MembershipLedger::genesis(pk(1), PlatformId(1), 1000);
        assert_eq!(l.active_keys(1), vec![pk(1)]);
    }

    #[test]
    fn member_expires_after_lifetime() {
        let mut l = MembershipLedger::genesis(pk(1), PlatformId(1), 1000);
        for h in 1..5 {
            l.apply_block(h, []);
        }
        l.apply_block(5, [(pk(2), PlatformId(2))]);
        assert!(!l.active_keys(5).contains(&pk(2)));
        assert!(l.active_keys(6).contains(&pk(2)));
        assert!(l.active_keys(1004).contains(&pk(2)));
        assert!(!l.active_keys(1005).contains(&pk(2)));
    }

    #[test]
    fn duplicate_registrations_keep_earliest() {
        let mut l = MembershipLedger::genesis(pk(1), PlatformId(1), 20);
        l.apply_block(1, [(pk(2), PlatformId(2)), (pk(2), PlatformId(2))]);
        l.apply_block(2, [(pk(2), PlatformId(2))]);
        assert_eq!(l.record(&pk(2)).unwrap().join_height, 1);
        assert_eq!(l.active_at(3).iter().filter(|r| r.pk == pk(2)).count(), 1);
    }

    #[test]
    fn reregistration_after_expiry_resets() {
        let mut l = MembershipLedger::genesis(pk(1), PlatformId(1), 20);
        l.apply_block(1, [(pk(2), PlatformId(2))]);
        // Record covers heights 2..=20; block 20 is the first that may renew.
        for h in 2..19 {
            l.apply_block(h, []);
        }
        l.apply_block(19, [(pk(2), PlatformId(2))]);
        assert_eq!(l.record(&pk(2)).unwrap().join_height, 1);
        l.apply_block(20, [(pk(2), PlatformId(2))]);
        let r = *l.record(&pk(2)).unwrap();
        assert_eq!((r.join_height, r.expiry_height), (20, 40));
        assert!(l.active_keys(21).contains(&pk(2)));
    }

    #[test]
    fn one_member_per_platform() {
        let mut l = MembershipLedger::genesis(pk(1), PlatformId(1), 100);
        l.apply_block(1, [(pk(2), PlatformId(1))]);
        assert_eq!(l.active_keys(2), vec![pk(1)]);
    }

    #[test]
    fn challenge_flow() {
        let mut p = TeePlatform::new(5, ProviderKind::Stub);
        let mut founder = p.create_enclave(0).unwrap();
        founder.install_credential(p.issue_credential());
        founder.generate_shared_pair();
        let ledger = MembershipLedger::genesis(founder.public_key(), founder.platform_id(), 1000);
        let active = ledger.active_at(1);

        let mut joiner = p.create_enclave(1).unwrap();
        let join = request_join(&mut joiner);
        let tx = challenge(&mut founder, &active, &join, &reference_measurement()).unwrap();
        assert!(tx.verify(&p.crypto(), &reference_measurement()));
        joiner.install_provision(&tx.provision).unwrap();
        assert_eq!(joiner.shared_public_key(), founder.shared_public_key());

        let mut evil = p
            .create_enclave_with(EnclaveSpec { node: 2, cpu: 2, measurement: Hash::digest(b"x") })
            .unwrap();
        let join = request_join(&mut evil);
        assert!(matches!(
            challenge(&mut founder, &active, &join, &reference_measurement()),
            Err(ChallengeError::Attestation(TeeError::MeasurementMismatch { .. }))
        ));

        let mut twin = p
            .create_enclave_with(EnclaveSpec { node: 3, cpu: 0, measurement: reference_measurement() })
            .unwrap();
        let join = request_join(&mut twin);
        assert_eq!(
            challenge(&mut founder, &active, &join, &reference_measurement()),
            Err(ChallengeError::DuplicatePlatform)
        );

        let mut outsider = p.create_enclave(4).unwrap();
        outsider.install_credential(p.issue_credential());
        let join = request_join(&mut joiner);
        assert_eq!(
            challenge(&mut outsider, &active, &join, &reference_measurement()),
            Err(ChallengeError::NotMember)
        );
    }
}
