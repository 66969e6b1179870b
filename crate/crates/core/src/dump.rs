//! Parsers for the two text artifacts a run leaves behind: the chain dump
//! and the committee log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::chain::Params;
use crate::hash::Hash;
use crate::sortition::CommitteeSpec;
use crate::tee::{PlatformId, PublicKey};

pub const CHAIN_DUMP_HEADER: &str = "# chain-dump v1";
pub const COMMITTEE_LOG_HEADER: &str = "# committees v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

fn fail<T>(line: usize, msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError { line, msg: msg.into() })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DumpGenesis {
    pub hash: Hash,
    pub shared_pk: PublicKey,
    pub founder: PublicKey,
    pub founder_platform: PlatformId,
    pub measurement: Hash,
    pub params: Params,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DumpBlock {
    pub height: u64,
    pub hash: Hash,
    pub parent_hash: Hash,
    pub committee_version: u32,
    pub proposer: PublicKey,
    pub seed: u64,
    pub registrations: Vec<(PublicKey, PlatformId)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainDump {
    pub genesis: DumpGenesis,
    pub blocks: Vec<DumpBlock>,
}

impl ChainDump {
    /// Seed carried by the block at `height`.
    pub fn seed_at(&self, height: u64) -> Option<u64> {
        match height {
            0 => Some(self.genesis.seed),
            h => self.blocks.get(h as usize - 1).map(|b| b.seed),
        }
    }

    pub fn head_height(&self) -> u64 {
        self.blocks.len() as u64
    }
}

fn key_value<'a>(line: usize, token: &'a str, key: &str) -> Result<&'a str, ParseError> {
    match token.split_once('=') {
        Some((k, v)) if k == key => Ok(v),
        _ => fail(line, format!("expected `{key}=`")),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T, ParseError> {
    s.parse().or_else(|_| fail(line, format!("bad number `{s}`")))
}

fn parse_hash(line: usize, s: &str) -> Result<Hash, ParseError> {
    Hash::from_hex(s).map_or_else(|| fail(line, format!("bad hash `{s}`")), Ok)
}

fn parse_pk(line: usize, s: &str) -> Result<PublicKey, ParseError> {
    PublicKey::from_hex(s).map_or_else(|| fail(line, format!("bad public key `{s}`")), Ok)
}

fn parse_member(line: usize, s: &str) -> Result<(PublicKey, PlatformId), ParseError> {
    let Some((pk, platform)) = s.split_once(':') else {
        return fail(line, "expected `pk:platform`");
    };
    Ok((parse_pk(line, pk)?, PlatformId(parse_num(line, platform)?)))
}

/// Parse a chain dump, checking height contiguity and parent linkage.
pub fn parse_chain_dump(text: &str) -> Result<ChainDump, ParseError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
    match lines.next() {
        Some((_, CHAIN_DUMP_HEADER)) => {}
        _ => return fail(1, "missing chain-dump header"),
    }
    let Some((gl, gline)) = lines.next() else {
        return fail(2, "missing genesis line");
    };
    let t: Vec<&str> = gline.split(' ').collect();
    if t.len() != 10 || t[0] != "genesis" {
        return fail(gl, "malformed genesis line");
    }
    let (founder, founder_platform) = parse_member(gl, key_value(gl, t[3], "founder")?)?;
    let genesis = DumpGenesis {
        hash: parse_hash(gl, t[1])?,
        shared_pk: parse_pk(gl, key_value(gl, t[2], "shared_pk")?)?,
        founder,
        founder_platform,
        measurement: parse_hash(gl, key_value(gl, t[4], "measurement")?)?,
        params: Params {
            committee_size: parse_num(gl, key_value(gl, t[5], "committee_size")?)?,
            acceptor_count: parse_num(gl, key_value(gl, t[6], "acceptor_count")?)?,
            timeout_ms: parse_num(gl, key_value(gl, t[7], "timeout_ms")?)?,
            membership_lifetime: parse_num(gl, key_value(gl, t[8], "membership_lifetime")?)?,
        },
        seed: parse_num(gl, key_value(gl, t[9], "seed")?)?,
    };

    let mut blocks: Vec<DumpBlock> = Vec::new();
    let mut prev = genesis.hash;
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let t: Vec<&str> = line.split(' ').collect();
        if t.len() != 7 {
            return fail(ln, "expected 7 fields");
        }
        let height: u64 = parse_num(ln, t[0])?;
        if height != blocks.len() as u64 + 1 {
            return fail(ln, format!("height {height} out of sequence"));
        }
        let parent_hash = parse_hash(ln, t[2])?;
        if parent_hash != prev {
            return fail(ln, "parent hash does not link");
        }
        let regs = key_value(ln, t[6], "regs")?;
        let registrations = if regs == "-" {
            Vec::new()
        } else {
            regs.split(',').map(|m| parse_member(ln, m)).collect::<Result<_, _>>()?
        };
        let block = DumpBlock {
            height,
            hash: parse_hash(ln, t[1])?,
            parent_hash,
            committee_version: parse_num(ln, t[3])?,
            proposer: parse_pk(ln, t[4])?,
            seed: parse_num(ln, key_value(ln, t[5], "seed")?)?,
            registrations,
        };
        prev = block.hash;
        blocks.push(block);
    }
    Ok(ChainDump { genesis, blocks })
}

/// One line per committee: `height version seed pk,pk,...`.
pub fn render_committees(specs: &[CommitteeSpec]) -> String {
    let mut out = format!("{COMMITTEE_LOG_HEADER}\n");
    for s in specs {
        let members: Vec<String> = s.members.iter().map(|m| m.to_hex()).collect();
        let _ = writeln!(out, "{} {} {} {}", s.height, s.version, s.seed_used, members.join(","));
    }
    out
}

/// Parse a committee log. Duplicate `(height, version)` entries must agree.
pub fn parse_committees(text: &str) -> Result<Vec<CommitteeSpec>, ParseError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
    match lines.next() {
        Some((_, COMMITTEE_LOG_HEADER)) => {}
        _ => return fail(1, "missing committee-log header"),
    }
    let mut specs: BTreeMap<(u64, u32), CommitteeSpec> = BTreeMap::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let t: Vec<&str> = line.split(' ').collect();
        if t.len() != 4 {
            return fail(ln, "expected 4 fields");
        }
        let spec = CommitteeSpec {
            height: parse_num(ln, t[0])?,
            version: parse_num(ln, t[1])?,
            seed_used: parse_num(ln, t[2])?,
            members: if t[3].is_empty() {
                Vec::new()
            } else {
                t[3].split(',').map(|m| parse_pk(ln, m)).collect::<Result<_, _>>()?
            },
        };
        match specs.get(&(spec.height, spec.version)) {
            Some(prev) if *prev != spec => return fail(ln, "conflicting entries for one committee"),
            Some(_) => {}
            None => {
                specs.insert((spec.height, spec.version), spec);
            }
        }
    }
    Ok(specs.into_values().collect())
}
