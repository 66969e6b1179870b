//! Offline committee verification: recompute every committee from a chain
//! dump and compare it with what the nodes derived during the run.

use serde::Serialize;

use crate::dump::ChainDump;
use crate::membership::MembershipLedger;
use crate::sortition::CommitteeSpec;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub height: u64,
    pub version: u32,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub checked: usize,
    pub matched: usize,
    /// Entries above `head + 1`, which the dump cannot determine.
    pub beyond_dump: usize,
    pub mismatches: Vec<Mismatch>,
    /// Confirmed blocks whose `(height, committee_version)` has no logged
    /// committee.
    pub unlogged_blocks: Vec<u64>,
}

impl VerifyReport {
    pub fn all_match(&self) -> bool {
        self.checked > 0 && self.matched == self.checked && self.beyond_dump == 0 && self.unlogged_blocks.is_empty()
    }
}

/// Committee of `(height, version)` recomputed from the dump alone.
pub fn recompute(dump: &ChainDump, height: u64, version: u32) -> Option<CommitteeSpec> {
    if height == 0 || height > dump.head_height() + 1 {
        return None;
    }
    let g = &dump.genesis;
    let mut ledger = MembershipLedger::genesis(g.founder, g.founder_platform, g.params.membership_lifetime);
    for b in &dump.blocks[..height as usize - 1] {
        ledger.apply_block(b.height, b.registrations.iter().copied());
    }
    let seed = dump.seed_at(height - 1)?;
    Some(CommitteeSpec::derive(
        height,
        version,
        seed,
        &ledger.active_keys(height),
        g.params.committee_size,
    ))
}

pub fn verify_committees(dump: &ChainDump, logged: &[CommitteeSpec]) -> VerifyReport {
    let mut report = VerifyReport::default();
    // Build ledgers incrementally: entries come sorted by height.
    let mut sorted: Vec<&CommitteeSpec> = logged.iter().collect();
    sorted.sort_by_key(|s| (s.height, s.version));
    let g = &dump.genesis;
    let mut ledger = MembershipLedger::genesis(g.founder, g.founder_platform, g.params.membership_lifetime);
    let mut applied = 0u64;
    for spec in sorted {
        report.checked += 1;
        let h = spec.height;
        if h == 0 || h > dump.head_height() + 1 {
            report.beyond_dump += 1;
            continue;
        }
        while applied + 1 < h {
            let b = &dump.blocks[applied as usize];
            ledger.apply_block(b.height, b.registrations.iter().copied());
            applied += 1;
        }
        let seed = dump.seed_at(h - 1).expect("height within dump");
        let expected = CommitteeSpec::derive(h, spec.version, seed, &ledger.active_keys(h), g.params.committee_size);
        let reason = if expected.seed_used != spec.seed_used {
            Some("seed differs")
        } else if expected.members != spec.members {
            Some("members differ")
        } else {
            None
        };
        match reason {
            Some(r) => report.mismatches.push(Mismatch {
                height: h,
                version: spec.version,
                reason: r.into(),
            }),
            None => report.matched += 1,
        }
    }
    for b in &dump.blocks {
        if !logged.iter().any(|s| s.height == b.height && s.version == b.committee_version) {
            report.unlogged_blocks.push(b.height);
        }
    }
    report
}
