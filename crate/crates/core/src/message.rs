//! Protocol messages and their canonical wire encoding.
//!
//! Layout: one tag byte, then the variant's fields in declaration order.
//! Integers are fixed-width big-endian; keys are 32 raw bytes; signatures,
//! ciphertexts, payloads and lists carry a `u32` length prefix. Every signed
//! message is signed over its tag byte followed by all fields except the
//! trailing signature.

use crate::chain::{Block, BlockHeader};
use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::hash::Hash;
use crate::membership::{JoinRequest, RegistrationTx};
use crate::tee::{Ciphertext, Crypto, Enclave, PublicKey, Signature};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub enum MessageKind {
    Join,
    RegTx,
    Elect,
    ElectVote,
    Learn,
    LearnReply,
    Propose,
    AcceptVote,
    Confirm,
    BlockRequest,
    BlockResponse,
}

impl MessageKind {
    pub const ALL: [MessageKind; 11] = [
        MessageKind::Join,
        MessageKind::RegTx,
        MessageKind::Elect,
        MessageKind::ElectVote,
        MessageKind::Learn,
        MessageKind::LearnReply,
        MessageKind::Propose,
        MessageKind::AcceptVote,
        MessageKind::Confirm,
        MessageKind::BlockRequest,
        MessageKind::BlockResponse,
    ];

    pub fn tag(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        tag.checked_sub(1).and_then(|i| Self::ALL.get(i as usize).copied())
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Join => "JOIN",
            MessageKind::RegTx => "REG-TX",
            MessageKind::Elect => "ELECT",
            MessageKind::ElectVote => "ELECT-VOTE",
            MessageKind::Learn => "LEARN",
            MessageKind::LearnReply => "LEARN-REPLY",
            MessageKind::Propose => "PROPOSE",
            MessageKind::AcceptVote => "ACCEPT-VOTE",
            MessageKind::Confirm => "CONFIRM",
            MessageKind::BlockRequest => "BLOCK-REQUEST",
            MessageKind::BlockResponse => "BLOCK-RESPONSE",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ElectMsg {
    pub height: u64,
    pub version: u32,
    pub r: u64,
    pub pk: PublicKey,
    pub sig: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ElectVoteMsg {
    pub height: u64,
    pub version: u32,
    pub candidate: PublicKey,
    pub carried_tokens: Vec<PublicKey>,
    pub voter_pk: PublicKey,
    pub sig: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LearnMsg {
    pub height: u64,
    pub version: u32,
    pub pk: PublicKey,
    pub sig: Signature,
}

/// Sealed to the learner; plaintext is a [`LearnReplyBody`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LearnReplyMsg {
    pub height: u64,
    pub version: u32,
    pub learner: PublicKey,
    pub sealed: Ciphertext,
    pub pk: PublicKey,
    pub sig: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProposeMsg {
    pub block: Block,
    pub version: u32,
    pub pk: PublicKey,
    pub sig: Signature,
}

/// Sealed to the proposer; plaintext is an [`AcceptVoteBody`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcceptVoteMsg {
    pub height: u64,
    pub version: u32,
    pub proposer: PublicKey,
    pub sealed: Ciphertext,
    pub pk: PublicKey,
    pub sig: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfirmMsg {
    pub header: BlockHeader,
    pub version: u32,
    pub pk: PublicKey,
    pub sig: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockRequestMsg {
    pub from_height: u64,
    pub pk: PublicKey,
    pub sig: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockResponseMsg {
    pub blocks: Vec<Block>,
    pub pk: PublicKey,
    pub sig: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProtocolMessage {
    Join(JoinRequest),
    RegTx(RegistrationTx),
    Elect(ElectMsg),
    ElectVote(ElectVoteMsg),
    Learn(LearnMsg),
    LearnReply(LearnReplyMsg),
    Propose(ProposeMsg),
    AcceptVote(AcceptVoteMsg),
    Confirm(ConfirmMsg),
    BlockRequest(BlockRequestMsg),
    BlockResponse(BlockResponseMsg),
}

impl ProtocolMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            ProtocolMessage::Join(_) => MessageKind::Join,
            ProtocolMessage::RegTx(_) => MessageKind::RegTx,
            ProtocolMessage::Elect(_) => MessageKind::Elect,
            ProtocolMessage::ElectVote(_) => MessageKind::ElectVote,
            ProtocolMessage::Learn(_) => MessageKind::Learn,
            ProtocolMessage::LearnReply(_) => MessageKind::LearnReply,
            ProtocolMessage::Propose(_) => MessageKind::Propose,
            ProtocolMessage::AcceptVote(_) => MessageKind::AcceptVote,
            ProtocolMessage::Confirm(_) => MessageKind::Confirm,
            ProtocolMessage::BlockRequest(_) => MessageKind::BlockRequest,
            ProtocolMessage::BlockResponse(_) => MessageKind::BlockResponse,
        }
    }

    /// Height the message concerns, when it concerns one.
    pub fn height(&self) -> Option<u64> {
        match self {
            ProtocolMessage::Elect(m) => Some(m.height),
            ProtocolMessage::ElectVote(m) => Some(m.height),
            ProtocolMessage::Learn(m) => Some(m.height),
            ProtocolMessage::LearnReply(m) => Some(m.height),
            ProtocolMessage::Propose(m) => Some(m.block.height()),
            ProtocolMessage::AcceptVote(m) => Some(m.height),
            ProtocolMessage::Confirm(m) => Some(m.header.height),
            _ => None,
        }
    }

    pub fn encode_bytes(&self) -> Vec<u8> {
        self.to_bytes()
    }

    pub fn decode_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        Self::from_bytes(bytes)
    }

    /// Signature check against the embedded sender key. JOIN and REG-TX
    /// carry their own signature schemes.
    pub fn verify_signature(&self, crypto: &Crypto) -> bool {
        match self {
            ProtocolMessage::Join(j) => j.verify(crypto),
            ProtocolMessage::RegTx(_) => true,
            _ => {
                let (pk, sig) = self.signer().expect("signed variant");
                crypto.verify(pk, &self.signing_bytes(), sig)
            }
        }
    }

    fn signer(&self) -> Option<(&PublicKey, &Signature)> {
        Some(match self {
            ProtocolMessage::Join(_) | ProtocolMessage::RegTx(_) => return None,
            ProtocolMessage::Elect(m) => (&m.pk, &m.sig),
            ProtocolMessage::ElectVote(m) => (&m.voter_pk, &m.sig),
            ProtocolMessage::Learn(m) => (&m.pk, &m.sig),
            ProtocolMessage::LearnReply(m) => (&m.pk, &m.sig),
            ProtocolMessage::Propose(m) => (&m.pk, &m.sig),
            ProtocolMessage::AcceptVote(m) => (&m.pk, &m.sig),
            ProtocolMessage::Confirm(m) => (&m.pk, &m.sig),
            ProtocolMessage::BlockRequest(m) => (&m.pk, &m.sig),
            ProtocolMessage::BlockResponse(m) => (&m.pk, &m.sig),
        })
    }

    /// Sender key (the signer, or the joiner/challenger for JOIN/REG-TX).
    pub fn sender(&self) -> PublicKey {
        match self {
            ProtocolMessage::Join(j) => j.pk,
            ProtocolMessage::RegTx(t) => t.challenger_pk,
            _ => *self.signer().expect("signed variant").0,
        }
    }

    fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.kind().tag());
        self.encode_unsigned(&mut w);
        w.into_bytes()
    }

    /// Fields preceding the trailing signature.
    fn encode_unsigned(&self, w: &mut Writer) {
        match self {
            ProtocolMessage::Join(j) => {
                w.put(&j.pk).put(&j.quote);
            }
            ProtocolMessage::RegTx(t) => {
                w.put(&t.pk).put(&t.quote).put(&t.provision).put(&t.challenger_pk);
            }
            ProtocolMessage::Elect(m) => {
                w.u64(m.height).u32(m.version).u64(m.r).put(&m.pk);
            }
            ProtocolMessage::ElectVote(m) => {
                w.u64(m.height)
                    .u32(m.version)
                    .put(&m.candidate)
                    .seq(&m.carried_tokens, |w, t| t.encode(w))
                    .put(&m.voter_pk);
            }
            ProtocolMessage::Learn(m) => {
                w.u64(m.height).u32(m.version).put(&m.pk);
            }
            ProtocolMessage::LearnReply(m) => {
                w.u64(m.height).u32(m.version).put(&m.learner).put(&m.sealed).put(&m.pk);
            }
            ProtocolMessage::Propose(m) => {
                w.put(&m.block).u32(m.version).put(&m.pk);
            }
            ProtocolMessage::AcceptVote(m) => {
                w.u64(m.height).u32(m.version).put(&m.proposer).put(&m.sealed).put(&m.pk);
            }
            ProtocolMessage::Confirm(m) => {
                w.put(&m.header).u32(m.version).put(&m.pk);
            }
            ProtocolMessage::BlockRequest(m) => {
                w.u64(m.from_height).put(&m.pk);
            }
            ProtocolMessage::BlockResponse(m) => {
                w.seq(&m.blocks, |w, b| b.encode(w)).put(&m.pk);
            }
        }
    }

    fn signature(&self) -> &Signature {
        match self {
            ProtocolMessage::Join(j) => &j.sig,
            ProtocolMessage::RegTx(t) => &t.challenger_sig,
            _ => self.signer().expect("signed variant").1,
        }
    }
}

impl Encode for ProtocolMessage {
    fn encode(&self, w: &mut Writer) {
        w.u8(self.kind().tag());
        self.encode_unsigned(w);
        w.put(self.signature());
    }
}

impl Decode for ProtocolMessage {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let tag = r.u8()?;
        let kind = MessageKind::from_tag(tag).ok_or(DecodeError::UnknownTag { what: "message", tag })?;
        Ok(match kind {
            MessageKind::Join => ProtocolMessage::Join(JoinRequest {
                pk: r.get()?,
                quote: r.get()?,
                sig: r.get()?,
            }),
            MessageKind::RegTx => ProtocolMessage::RegTx(r.get()?),
            MessageKind::Elect => ProtocolMessage::Elect(ElectMsg {
                height: r.u64()?,
                version: r.u32()?,
                r: r.u64()?,
                pk: r.get()?,
                sig: r.get()?,
            }),
            MessageKind::ElectVote => ProtocolMessage::ElectVote(ElectVoteMsg {
                height: r.u64()?,
                version: r.u32()?,
                candidate: r.get()?,
                carried_tokens: r.seq(|r| r.get())?,
                voter_pk: r.get()?,
                sig: r.get()?,
            }),
            MessageKind::Learn => ProtocolMessage::Learn(LearnMsg {
                height: r.u64()?,
                version: r.u32()?,
                pk: r.get()?,
                sig: r.get()?,
            }),
            MessageKind::LearnReply => ProtocolMessage::LearnReply(LearnReplyMsg {
                height: r.u64()?,
                version: r.u32()?,
                learner: r.get()?,
                sealed: r.get()?,
                pk: r.get()?,
                sig: r.get()?,
            }),
            MessageKind::Propose => ProtocolMessage::Propose(ProposeMsg {
                block: r.get()?,
                version: r.u32()?,
                pk: r.get()?,
                sig: r.get()?,
            }),
            MessageKind::AcceptVote => ProtocolMessage::AcceptVote(AcceptVoteMsg {
                height: r.u64()?,
                version: r.u32()?,
                proposer: r.get()?,
                sealed: r.get()?,
                pk: r.get()?,
                sig: r.get()?,
            }),
            MessageKind::Confirm => ProtocolMessage::Confirm(ConfirmMsg {
                header: r.get()?,
                version: r.u32()?,
                pk: r.get()?,
                sig: r.get()?,
            }),
            MessageKind::BlockRequest => ProtocolMessage::BlockRequest(BlockRequestMsg {
                from_height: r.u64()?,
                pk: r.get()?,
                sig: r.get()?,
            }),
            MessageKind::BlockResponse => ProtocolMessage::BlockResponse(BlockResponseMsg {
                blocks: r.seq(|r| r.get())?,
                pk: r.get()?,
                sig: r.get()?,
            }),
        })
    }
}

/// Build a signed message: `build` receives the enclave's key and a
/// placeholder signature; the real signature is filled in afterwards.
pub fn signed(enclave: &Enclave, build: impl FnOnce(PublicKey, Signature) -> ProtocolMessage) -> ProtocolMessage {
    let mut msg = build(enclave.public_key(), Signature::default());
    // JOIN and REG-TX are signed by their own constructors.
    if matches!(msg.kind(), MessageKind::Join | MessageKind::RegTx) {
        return msg;
    }
    let sig = enclave.sign(&msg.signing_bytes());
    let slot = match &mut msg {
        ProtocolMessage::Join(_) | ProtocolMessage::RegTx(_) => return msg,
        ProtocolMessage::Elect(m) => &mut m.sig,
        ProtocolMessage::ElectVote(m) => &mut m.sig,
        ProtocolMessage::Learn(m) => &mut m.sig,
        ProtocolMessage::LearnReply(m) => &mut m.sig,
        ProtocolMessage::Propose(m) => &mut m.sig,
        ProtocolMessage::AcceptVote(m) => &mut m.sig,
        ProtocolMessage::Confirm(m) => &mut m.sig,
        ProtocolMessage::BlockRequest(m) => &mut m.sig,
        ProtocolMessage::BlockResponse(m) => &mut m.sig,
    };
    *slot = sig;
    msg
}

/// Plaintext of a LEARN-REPLY.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LearnReplyBody {
    /// `None` encodes EMPTY.
    pub pending: Option<(Block, u32)>,
    pub acceptor_nonce: u64,
    pub acceptor_pk: PublicKey,
}

impl Encode for LearnReplyBody {
    fn encode(&self, w: &mut Writer) {
        match &self.pending {
            None => {
                w.u8(0);
            }
            Some((b, v)) => {
                w.u8(1).put(b).u32(*v);
            }
        }
        w.u64(self.acceptor_nonce).put(&self.acceptor_pk);
    }
}

impl Decode for LearnReplyBody {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let pending = match r.u8()? {
            0 => None,
            1 => Some((r.get()?, r.u32()?)),
            tag => return Err(DecodeError::UnknownTag { what: "learn reply", tag }),
        };
        Ok(LearnReplyBody {
            pending,
            acceptor_nonce: r.u64()?,
            acceptor_pk: r.get()?,
        })
    }
}

/// Plaintext of an ACCEPT-VOTE.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcceptVoteBody {
    pub header_hash: Hash,
    pub acceptor_nonce: u64,
    pub acceptor_pk: PublicKey,
}

impl Encode for AcceptVoteBody {
    fn encode(&self, w: &mut Writer) {
        w.hash(&self.header_hash).u64(self.acceptor_nonce).put(&self.acceptor_pk);
    }
}

impl Decode for AcceptVoteBody {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(AcceptVoteBody {
            header_hash: r.hash()?,
            acceptor_nonce: r.u64()?,
            acceptor_pk: r.get()?,
        })
    }
}
