//! Deterministic simulation of an enclave-assisted blockchain consensus
//! protocol: public per-height committees elect a proposer, and stealth
//! acceptors hidden behind sealed certificates confirm its block.

pub mod chain;
pub mod codec;
pub mod consensus;
pub mod dump;
pub mod election;
pub mod harness;
pub mod hash;
pub mod membership;
pub mod message;
pub mod netsim;
pub mod node;
pub mod sortition;
pub mod tee;

/// Simulator address of a node.
pub type NodeId = u32;
