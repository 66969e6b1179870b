//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Gating criteria fail the process. The egalitarianism check is reported but
//! does not gate: with 2000 draws per node its tolerance band is about 2.2
//! standard deviations wide, so a fair protocol misses it on a sizeable share
//! of seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use enclave_consensus::dump::render_committees;
use enclave_consensus::harness::checker::{check_consensus, check_election, CheckConfig};
use enclave_consensus::harness::{run, RunReport, Scenario};

const SEEDS: std::ops::RangeInclusive<u64> = 1..=20;
const FIVE_PHASES: [&str; 5] = ["ELECT", "ELECT-VOTE", "PROPOSE", "ACCEPT-VOTE", "CONFIRM"];

struct Verdict {
    id: u32,
    title: &'static str,
    pass: bool,
    gating: bool,
    detail: String,
}

fn scenario(file: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(file);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Scenario::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Reports for every seed, computed on worker threads.
fn sweep(base: &Scenario, seeds: impl Iterator<Item = u64>) -> Vec<RunReport> {
    let seeds: Vec<u64> = seeds.collect();
    let jobs = std::thread::available_parallelism().map_or(4, |n| n.get()).min(seeds.len().max(1));
    let chunks: Vec<Vec<u64>> = (0..jobs)
        .map(|j| seeds.iter().copied().skip(j).step_by(jobs).collect())
        .collect();
    let mut out: Vec<RunReport> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                s.spawn(move || {
                    chunk
                        .iter()
                        .map(|seed| {
                            let mut scn = base.clone();
                            scn.seed = *seed;
                            run(&scn, false).expect("scenario runs").report
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker")).collect()
    });
    out.sort_by_key(|r| r.seed);
    out
}

fn safety_under_faults(suite: &[(Scenario, Vec<RunReport>)], secs: f64) -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for (scn, reports) in suite {
        let forks: usize = reports.iter().map(|r| r.fork_count).sum();
        let violations: usize = reports.iter().map(|r| r.safety_violations).sum();
        let complete = reports.iter().filter(|r| r.oracles.liveness).count();
        pass &= forks == 0 && violations == 0 && reports.len() >= 20;
        parts.push(format!(
            "{}: {} seeds, forks={forks}, violations={violations}, complete={complete}",
            scn.name,
            reports.len()
        ));
    }
    Verdict {
        id: 1,
        title: "safety under faults",
        pass,
        gating: true,
        detail: format!("{}; {secs:.1}s", parts.join("; ")),
    }
}

fn exhaustive_safety() -> Verdict {
    let t = Instant::now();
    let clean = check_consensus(&CheckConfig::new(3, 2));
    let mutant = check_consensus(&CheckConfig {
        skip_learn: Some(2),
        ..CheckConfig::new(3, 2)
    });
    Verdict {
        id: 2,
        title: "exhaustive small-instance safety",
        pass: clean.violations == 0 && mutant.violations > 0,
        gating: true,
        detail: format!(
            "3 acceptors, versions 1 and 2: {} states, {} schedules, {} violating states; skip-learn mutant: {} violating states ({} steps to the first); {:.1}s",
            clean.states,
            clean.schedules,
            clean.violations,
            mutant.violations,
            mutant.counterexample.as_ref().map_or(0, |c| c.len()),
            t.elapsed().as_secs_f64()
        ),
    }
}

fn unique_proposer(suite: &[(Scenario, Vec<RunReport>)]) -> Verdict {
    let duplicates: usize = suite
        .iter()
        .flat_map(|(_, rs)| rs)
        .map(|r| r.duplicate_winners.len())
        .sum();
    let runs: usize = suite.iter().map(|(_, rs)| rs.len()).sum();
    let election = check_election(3);
    Verdict {
        id: 3,
        title: "unique proposer",
        pass: duplicates == 0 && election.multiple_winners == 0 && election.token_duplications == 0,
        gating: true,
        detail: format!(
            "{runs} runs, {duplicates} (height, version) pairs with two winners; exhaustive 3-member election over {} number assignments, {} states: {} multi-winner states",
            election.assignments, election.states, election.multiple_winners
        ),
    }
}

fn egalitarianism() -> Verdict {
    let scn = scenario("egalitarian.scn");
    let report = run(&scn, false).expect("runs").report;
    let counts = &report.proposer_counts;
    let expected = scn.blocks_target as f64 / scn.node_count as f64;
    let per_node = 100 * scn.node_count as u64;
    let (lo, hi) = ((scn.blocks_target * 85).div_ceil(per_node), scn.blocks_target * 115 / per_node);
    let in_band = counts.iter().all(|c| (lo..=hi).contains(c));
    let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    // Chi-square critical value, 9 degrees of freedom, p = 0.01.
    let uniform = chi2 < 21.666;
    Verdict {
        id: 4,
        title: "egalitarianism",
        pass: in_band && report.blocks_confirmed == scn.blocks_target,
        gating: false,
        detail: format!(
            "seed {}: counts {counts:?}, band {lo}..={hi}; chi2={chi2:.1} ({} with uniform selection at p=0.01)",
            scn.seed,
            if uniform { "consistent" } else { "inconsistent" }
        ),
    }
}

fn phase_count(suite: &[(Scenario, Vec<RunReport>)]) -> Verdict {
    let (_, free) = &suite[0];
    let mut measured = 0;
    let mut bad_version = 0;
    let mut bad_phases = 0;
    for b in free.iter().flat_map(|r| &r.blocks).filter(|b| !b.bootstrap) {
        measured += 1;
        bad_version += usize::from(b.version_confirmed != 0);
        bad_phases += usize::from(b.phases != FIVE_PHASES);
    }
    let mut learn_blocks = 0;
    let mut learn_at_zero = 0;
    for b in suite.iter().flat_map(|(_, rs)| rs).flat_map(|r| &r.blocks) {
        if b.phases.contains(&"LEARN") {
            learn_blocks += 1;
            learn_at_zero += usize::from(b.version_confirmed == 0);
        }
    }
    Verdict {
        id: 5,
        title: "message-phase count",
        pass: measured > 0 && bad_version == 0 && bad_phases == 0 && learn_at_zero == 0,
        gating: true,
        detail: format!(
            "{measured} failure-free blocks: {bad_version} above version 0, {bad_phases} without exactly {FIVE_PHASES:?}; {learn_blocks} blocks with LEARN across the suite, {learn_at_zero} of them at version 0"
        ),
    }
}

fn partition_stall() -> Verdict {
    let scn = scenario("stall.scn");
    let reports = sweep(&scn, SEEDS);
    let mut during = 0;
    let mut late = 0;
    let mut worst_heal = 0;
    for r in &reports {
        for p in &r.partitions {
            during += p.confirmations_during;
            late += usize::from(!p.healed_in_time);
            if let Some(t) = p.first_confirmation_after_heal_ms {
                worst_heal = worst_heal.max(t - p.end_ms);
            }
        }
    }
    Verdict {
        id: 6,
        title: "partition stall then progress",
        pass: during == 0 && late == 0 && reports.iter().all(|r| r.fork_count == 0),
        gating: true,
        detail: format!(
            "{} seeds, even split of {} all-acceptor nodes for {} ms: {during} confirmations during the split, {late} runs not advancing within {} ms of healing (slowest {worst_heal} ms)",
            reports.len(),
            scn.node_count,
            scn.partitions[0].end_ms - scn.partitions[0].start_ms,
            3 * scn.timeout_ms
        ),
    }
}

fn membership_expiry() -> Verdict {
    let scn = scenario("expiry.scn");
    let out = run(&scn, false).expect("runs");
    let (late_node, _) = scn.join_schedule[0];
    let pk = out.nodes[late_node as usize].public_key();
    let store = out.nodes.iter().map(|n| n.store()).max_by_key(|s| s.head_height()).expect("nodes");
    let regs: Vec<u64> = store
        .blocks()
        .iter()
        .filter(|b| b.registrations.iter().any(|r| r.pk == pk))
        .map(|b| b.height())
        .collect();
    let (Some(&first), Some(&again)) = (regs.first(), regs.get(1)) else {
        return Verdict {
            id: 7,
            title: "membership expiry",
            pass: false,
            gating: true,
            detail: format!("expected two registrations, found {regs:?}"),
        };
    };
    let expiry = first + scn.membership_lifetime;
    let committee_heights: BTreeSet<u64> = out
        .committees
        .iter()
        .filter(|c| c.contains(&pk))
        .map(|c| c.height)
        .collect();
    let acceptor_heights: BTreeSet<u64> = out.nodes[late_node as usize].acceptor_heights().iter().copied().collect();
    let gap = expiry..=again;
    let in_gap = |hs: &BTreeSet<u64>| hs.iter().filter(|h| gap.contains(h)).count();
    let active_before = (first + 1..expiry).all(|h| committee_heights.contains(&h) && acceptor_heights.contains(&h));
    let back = committee_heights.contains(&(again + 1)) && acceptor_heights.contains(&(again + 1));
    Verdict {
        id: 7,
        title: "membership expiry",
        pass: first == 5 && in_gap(&committee_heights) == 0 && in_gap(&acceptor_heights) == 0 && active_before && back,
        gating: true,
        detail: format!(
            "registered in block {first}, lifetime {}: member of every committee and acceptor set at {}..{expiry}: {active_before}; appearances at {expiry}..={again}: {} committees, {} acceptor sets; back at {}: {back}",
            scn.membership_lifetime,
            first + 1,
            in_gap(&committee_heights),
            in_gap(&acceptor_heights),
            again + 1
        ),
    }
}

fn determinism() -> Verdict {
    let mut checked = Vec::new();
    let mut pass = true;
    for file in ["failure_free.scn", "drop.scn", "rotation.scn", "partition.scn"] {
        let mut scn = scenario(file);
        scn.seed = 7;
        let a = run(&scn, true).expect("runs");
        let b = run(&scn, true).expect("runs");
        let same = a.event_log == b.event_log
            && a.report.to_json() == b.report.to_json()
            && a.chain_dump == b.chain_dump
            && a.event_log.as_ref().is_some_and(|l| !l.is_empty());
        pass &= same;
        checked.push(format!(
            "{} ({} log lines) {}",
            scn.name,
            a.event_log.as_ref().map_or(0, |l| l.lines().count()),
            if same { "identical" } else { "DIFFERS" }
        ));
    }
    Verdict {
        id: 8,
        title: "determinism",
        pass,
        gating: true,
        detail: checked.join("; "),
    }
}

fn committee_verifiability() -> Verdict {
    let mut scn = scenario("drop.scn");
    scn.seed = 3;
    let out = run(&scn, false).expect("runs");
    let dir = std::env::temp_dir().join(format!("enclave-consensus-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    let dump = dir.join("chain.dump");
    let log = dir.join("committees.log");
    std::fs::write(&dump, &out.chain_dump).expect("write dump");
    std::fs::write(&log, render_committees(&out.committees)).expect("write log");
    let result = Command::new(env!("CARGO_BIN_EXE_enclave-consensus"))
        .arg("verify")
        .arg(&dump)
        .arg("--committees")
        .arg(&log)
        .output()
        .expect("verifier starts");
    let _ = std::fs::remove_dir_all(&dir);
    let parsed: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&result.stdout).unwrap_or_default();
    let field = |k: &str| parsed.get(k).and_then(|v| v.as_u64()).unwrap_or(0);
    let versions: BTreeSet<u32> = out.committees.iter().map(|c| c.version).collect();
    Verdict {
        id: 9,
        title: "committee verifiability",
        pass: result.status.success()
            && field("checked") > 0
            && field("matched") == field("checked")
            && out.committee_disagreements == 0,
        gating: true,
        detail: format!(
            "separate verifier process: {} of {} committees recomputed and matched (versions {:?}), exit {}; in-run disagreements {}",
            field("matched"),
            field("checked"),
            versions,
            result.status.code().unwrap_or(-1),
            out.committee_disagreements
        ),
    }
}

fn main() {
    let started = Instant::now();
    let t = Instant::now();
    let suite: Vec<(Scenario, Vec<RunReport>)> = ["failure_free.scn", "drop.scn", "rotation.scn", "partition.scn"]
        .into_iter()
        .map(|f| {
            let scn = scenario(f);
            let reports = sweep(&scn, SEEDS);
            (scn, reports)
        })
        .collect();
    let suite_secs = t.elapsed().as_secs_f64();

    let verdicts = [
        safety_under_faults(&suite, suite_secs),
        exhaustive_safety(),
        unique_proposer(&suite),
        egalitarianism(),
        phase_count(&suite),
        partition_stall(),
        membership_expiry(),
        determinism(),
        committee_verifiability(),
    ];
    let mut gating_failures = 0;
    for v in &verdicts {
        let status = if v.pass { "PASS" } else { "FAIL" };
        let note = if v.gating { "" } else { " [non-gating]" };
        println!("criterion {} {}: {status}{note}: {}", v.id, v.title, v.detail);
        gating_failures += usize::from(v.gating && !v.pass);
    }
    println!(
        "acceptance: {} of {} criteria pass; {:.1}s",
        verdicts.iter().filter(|v| v.pass).count(),
        verdicts.len(),
        started.elapsed().as_secs_f64()
    );
    if gating_failures > 0 {
        std::process::exit(1);
    }
}
