use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;

use enclave_consensus::dump::{parse_chain_dump, parse_committees, render_committees};
use enclave_consensus::harness::verify::verify_committees;
use enclave_consensus::harness::{run, Outcome, Scenario};
use enclave_consensus::message::MessageKind;

fn scenario_path(file: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(file)
}

fn scenario(file: &str) -> Scenario {
    Scenario::parse(&std::fs::read_to_string(scenario_path(file)).unwrap()).unwrap()
}

fn small(extra: &str) -> Scenario {
    Scenario::parse(&format!(
        "node_count = 8\ncommittee_size = 3\nacceptor_count = 5\nblocks_target = 10\n{extra}"
    ))
    .unwrap()
}

#[test]
fn minimal_happy_path() {
    let out = run(&scenario("minimal.scn"), false).unwrap();
    let r = &out.report;
    assert_eq!(r.outcome, Outcome::Complete);
    assert_eq!(r.blocks_confirmed, 5);
    assert_eq!(r.fork_count, 0);
    assert!(r.blocks.iter().all(|b| b.version_confirmed == 0));
    let heads: Vec<u64> = out.nodes.iter().map(|n| n.store().head_height()).collect();
    assert!(heads.iter().all(|h| *h >= r.bootstrap_blocks + 5), "{heads:?}");
}

#[test]
fn every_initial_node_registers_once() {
    let out = run(&small(""), false).unwrap();
    let store = out.nodes[0].store();
    let mut regs: BTreeMap<_, u32> = BTreeMap::new();
    for b in store.blocks() {
        for r in &b.registrations {
            *regs.entry(r.pk).or_default() += 1;
        }
    }
    // The founder is registered by genesis; everyone else exactly once even
    // though every member challenges every JOIN.
    assert_eq!(regs.len(), 7);
    assert!(regs.values().all(|n| *n == 1), "{regs:?}");
    assert!(out.nodes.iter().all(|n| n.pool_len() == 0));
}

#[test]
fn committee_members_multicast_one_elect_per_version() {
    let out = run(&scenario("failure_free.scn"), false).unwrap();
    let r = &out.report;
    let c = 7u64;
    let elects = r.messages.per_kind[MessageKind::Elect.name()];
    assert_eq!(elects % (c * (c - 1)), 0, "{elects}");
    assert!(elects >= c * (c - 1) * r.blocks_confirmed);
    assert!(r.blocks.iter().filter(|b| !b.bootstrap).all(|b| b.message_phase_count == Some(5)));
}

#[test]
fn offline_laggard_catches_up() {
    let mut scn = small("offline = (3, 2_000, 9_000), (4, 1_000, 12_000)");
    scn.blocks_target = 25;
    let out = run(&scn, false).unwrap();
    assert_eq!(out.report.outcome, Outcome::Complete);
    let heads: Vec<u64> = out.nodes.iter().map(|n| n.store().head_height()).collect();
    let target = out.report.bootstrap_blocks + 25;
    assert!(heads.iter().all(|h| *h >= target), "{heads:?}");
    assert!(out.report.messages.per_kind.contains_key(MessageKind::BlockRequest.name()));
    assert_eq!(out.report.fork_count, 0);
}

#[test]
fn lossy_duplicating_jittery_network_stays_safe() {
    for seed in 1..=5 {
        let mut scn = small("drop_rate = 0.3\nduplicate_rate = 0.2\nlatency_jitter_ms = 150");
        scn.seed = seed;
        let r = run(&scn, false).unwrap().report;
        assert_eq!(r.fork_count, 0, "seed {seed}");
        assert!(r.oracles.safety_pass(), "seed {seed}: {:?}", r.oracles);
        assert!(r.messages.duplicated > 0);
    }
}

#[test]
fn total_loss_is_a_liveness_failure() {
    let scn = small("drop_rate = 1.0\nmax_time_ms = 120_000");
    let r = run(&scn, false).unwrap().report;
    assert_eq!(r.outcome, Outcome::LivenessFailure);
    assert_eq!(r.outcome.exit_code(), 2);
    assert!(r.oracles.safety_pass());
}

#[test]
fn higher_versions_learn_before_proposing() {
    let mut scn = scenario("drop.scn");
    scn.seed = 2;
    let r = run(&scn, false).unwrap().report;
    assert!(r.blocks.iter().any(|b| b.version_confirmed > 0));
    for b in r.blocks.iter().filter(|b| b.version_confirmed > 0) {
        assert!(b.phases.contains(&"LEARN"), "height {}: {:?}", b.height, b.phases);
    }
}

#[test]
fn dump_verifies_and_tampering_is_caught() {
    let mut scn = scenario("drop.scn");
    scn.seed = 4;
    let out = run(&scn, false).unwrap();
    let dump = parse_chain_dump(&out.chain_dump).unwrap();
    let log = parse_committees(&render_committees(&out.committees)).unwrap();
    assert_eq!(log, out.committees);
    let ok = verify_committees(&dump, &log);
    assert!(ok.all_match(), "{ok:?}");

    let mut tampered = log.clone();
    let i = tampered.iter().position(|c| c.members.len() > 1).unwrap();
    tampered[i].members.swap(0, 1);
    let bad = verify_committees(&dump, &tampered);
    assert!(!bad.all_match());
    assert_eq!(bad.mismatches.len(), 1);
}

#[test]
fn same_seed_same_bytes_different_seed_different_run() {
    let mut scn = small("drop_rate = 0.1");
    let a = run(&scn, true).unwrap();
    let b = run(&scn, true).unwrap();
    assert_eq!(a.event_log, b.event_log);
    assert_eq!(a.report.to_json(), b.report.to_json());
    scn.seed += 1;
    let c = run(&scn, true).unwrap();
    assert_ne!(a.event_log, c.event_log);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_enclave-consensus"))
}

#[test]
fn cli_run_writes_artifacts_and_verify_accepts_them() {
    let dir = std::env::temp_dir().join(format!("enclave-consensus-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let (report, trace, dump, committees) = (
        dir.join("r.json"),
        dir.join("t.log"),
        dir.join("c.dump"),
        dir.join("c.log"),
    );
    let status = cli()
        .arg("run")
        .arg(scenario_path("minimal.scn"))
        .args(["--seed", "9", "--report"])
        .arg(&report)
        .arg("--trace")
        .arg(&trace)
        .arg("--dump")
        .arg(&dump)
        .arg("--committees")
        .arg(&committees)
        .status()
        .unwrap();
    assert!(status.success());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["seed"], 9);
    assert_eq!(json["outcome"], "complete");
    assert!(std::fs::read_to_string(&trace).unwrap().lines().count() > 10);

    let verify = cli().arg("verify").arg(&dump).arg("--committees").arg(&committees).output().unwrap();
    assert!(verify.status.success(), "{}", String::from_utf8_lossy(&verify.stdout));

    std::fs::write(&dump, "# chain-dump v1\ngarbage\n").unwrap();
    let broken = cli().arg("verify").arg(&dump).arg("--committees").arg(&committees).output().unwrap();
    assert_eq!(broken.status.code(), Some(3));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn cli_check_exit_codes() {
    let clean = cli().args(["check", "--acceptors", "2", "--versions", "2"]).output().unwrap();
    assert!(clean.status.success());
    let mutant = cli()
        .args(["check", "--acceptors", "2", "--versions", "2", "--skip-learn"])
        .output()
        .unwrap();
    assert_eq!(mutant.status.code(), Some(1));
    let too_big = cli().args(["check", "--acceptors", "9"]).output().unwrap();
    assert_eq!(too_big.status.code(), Some(3));
}

#[test]
fn cli_sweep_reports_every_seed() {
    let out = cli()
        .arg("sweep")
        .arg(scenario_path("minimal.scn"))
        .args(["--seeds", "1..4", "--jobs", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("outcome=Complete")).count(), 3);
    assert!(text.contains("complete=3"));
}

#[test]
fn table_shaped_run_completes() {
    let r = run(&scenario("table1.scn"), false).unwrap().report;
    assert_eq!(r.outcome, Outcome::Complete);
    assert_eq!(r.blocks_confirmed, 20);
    assert_eq!(r.fork_count, 0);
}

#[test]
fn fifty_blocks_under_loss_reform_committees() {
    let mut scn = scenario("drop.scn");
    scn.blocks_target = 50;
    let r = run(&scn, false).unwrap().report;
    assert_eq!(r.fork_count, 0);
    assert_eq!(r.blocks_confirmed, 50);
    assert!(r.blocks.iter().any(|b| !b.bootstrap && b.version_confirmed > 0));
}
