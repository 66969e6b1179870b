use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Parser, Subcommand};

use enclave_consensus::consensus::AcceptorRule;
use enclave_consensus::dump::{parse_chain_dump, parse_committees, render_committees};
use enclave_consensus::harness::checker::{check_consensus, check_election, CheckConfig};
use enclave_consensus::harness::verify::verify_committees;
use enclave_consensus::harness::{run, Outcome, Scenario};

#[derive(Parser)]
#[command(name = "enclave-consensus", version, about = "Deterministic simulator for enclave-assisted committee consensus")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and print its report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the delivered-message log here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the longest chain's dump here.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Write every derived committee here.
        #[arg(long)]
        committees: Option<PathBuf>,
    },
    /// Exhaustively explore message schedules of a tiny instance.
    Check {
        #[arg(long, default_value_t = 3)]
        acceptors: usize,
        #[arg(long, default_value_t = 2)]
        versions: u32,
        /// Let the highest-version proposer skip the learn step.
        #[arg(long)]
        skip_learn: bool,
        /// Acceptors vote on version alone, ignoring earlier learns.
        #[arg(long)]
        literal_acceptor: bool,
        /// Also check the election with this many members (1..=4).
        #[arg(long)]
        election: Option<usize>,
    },
    /// Run a scenario over a half-open seed range in parallel.
    Sweep {
        scenario: PathBuf,
        /// Seed range `A..B`, B exclusive.
        #[arg(long, value_parser = parse_range)]
        seeds: (u64, u64),
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Recompute committees from a chain dump and compare with a log.
    Verify {
        dump: PathBuf,
        #[arg(long)]
        committees: PathBuf,
    },
}

fn parse_range(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s.split_once("..").ok_or("expected A..B")?;
    let a: u64 = a.trim().parse().map_err(|_| format!("bad seed `{a}`"))?;
    let b: u64 = b.trim().parse().map_err(|_| format!("bad seed `{b}`"))?;
    if a >= b {
        return Err("empty seed range".into());
    }
    Ok((a, b))
}

fn load_scenario(path: &Path) -> Result<Scenario, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Scenario::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<(), String> {
    std::fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_run(
    scenario: &Path,
    seed: Option<u64>,
    report: Option<&Path>,
    trace: Option<&Path>,
    dump: Option<&Path>,
    committees: Option<&Path>,
) -> Result<u8, String> {
    let mut scn = load_scenario(scenario)?;
    if let Some(s) = seed {
        scn.seed = s;
    }
    let started = Instant::now();
    let out = run(&scn, trace.is_some()).map_err(|e| e.to_string())?;
    eprintln!("wall_time_ms={}", started.elapsed().as_millis());
    eprintln!("{}", out.report.summary_line());
    let json = out.report.to_json();
    match report {
        Some(p) => write(p, &json)?,
        None => println!("{json}"),
    }
    if let (Some(p), Some(log)) = (trace, &out.event_log) {
        write(p, log)?;
    }
    if let Some(p) = dump {
        write(p, &out.chain_dump)?;
    }
    if let Some(p) = committees {
        write(p, &render_committees(&out.committees))?;
    }
    Ok(out.report.outcome.exit_code() as u8)
}

fn cmd_check(
    acceptors: usize,
    versions: u32,
    skip_learn: bool,
    literal: bool,
    election: Option<usize>,
) -> Result<u8, String> {
    if !(1..=3).contains(&acceptors) || !(1..=2).contains(&versions) {
        return Err("the bounded check supports 1..=3 acceptors and 1..=2 versions".into());
    }
    let cfg = CheckConfig {
        acceptors,
        versions,
        skip_learn: skip_learn.then_some(versions),
        rule: if literal { AcceptorRule::Literal } else { AcceptorRule::PromiseOnLearn },
    };
    let started = Instant::now();
    let report = check_consensus(&cfg);
    println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
    let mut clean = report.violations == 0;
    if let Some(c) = election {
        if !(1..=4).contains(&c) {
            return Err("election check supports 1..=4 members".into());
        }
        let e = check_election(c);
        println!("{}", serde_json::to_string_pretty(&e).expect("serializes"));
        clean &= e.multiple_winners == 0 && e.token_duplications == 0;
    }
    eprintln!("wall_time_ms={}", started.elapsed().as_millis());
    Ok(if clean { 0 } else { 1 })
}

type SeedResult = (u64, Result<(Outcome, String), String>);

fn cmd_sweep(scenario: &Path, (a, b): (u64, u64), jobs: Option<usize>) -> Result<u8, String> {
    let base = load_scenario(scenario)?;
    let jobs = jobs
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1)
        .max(1);
    let next = AtomicU64::new(a);
    let results: Mutex<Vec<SeedResult>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let seed = next.fetch_add(1, Ordering::Relaxed);
                if seed >= b {
                    break;
                }
                let mut scn = base.clone();
                scn.seed = seed;
                let r = run(&scn, false)
                    .map(|o| (o.report.outcome, o.report.summary_line()))
                    .map_err(|e| e.to_string());
                results.lock().expect("not poisoned").push((seed, r));
            });
        }
    });
    let mut results = results.into_inner().expect("not poisoned");
    results.sort_by_key(|(s, _)| *s);
    let mut worst = 0u8;
    let mut counts = [0usize; 3];
    for (seed, r) in &results {
        match r {
            Ok((outcome, line)) => {
                println!("{line}");
                counts[outcome.exit_code() as usize] += 1;
                // Safety failures dominate liveness failures.
                worst = match (worst, outcome.exit_code() as u8) {
                    (1, _) | (_, 1) => 1,
                    (w, c) => w.max(c),
                };
            }
            Err(e) => return Err(format!("seed {seed}: {e}")),
        }
    }
    println!(
        "sweep {} seeds={}..{} complete={} safety_failures={} liveness_failures={}",
        base.name, a, b, counts[0], counts[1], counts[2]
    );
    Ok(worst)
}

fn cmd_verify(dump: &Path, committees: &Path) -> Result<u8, String> {
    let d = std::fs::read_to_string(dump).map_err(|e| format!("{}: {e}", dump.display()))?;
    let c = std::fs::read_to_string(committees).map_err(|e| format!("{}: {e}", committees.display()))?;
    let d = parse_chain_dump(&d).map_err(|e| format!("{}: {e}", dump.display()))?;
    let c = parse_committees(&c).map_err(|e| format!("{}: {e}", committees.display()))?;
    let report = verify_committees(&d, &c);
    println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
    Ok(if report.all_match() { 0 } else { 1 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            report,
            trace,
            dump,
            committees,
        } => cmd_run(
            scenario,
            *seed,
            report.as_deref(),
            trace.as_deref(),
            dump.as_deref(),
            committees.as_deref(),
        ),
        Cmd::Check {
            acceptors,
            versions,
            skip_learn,
            literal_acceptor,
            election,
        } => cmd_check(*acceptors, *versions, *skip_learn, *literal_acceptor, *election),
        Cmd::Sweep { scenario, seeds, jobs } => cmd_sweep(scenario, *seeds, *jobs),
        Cmd::Verify { dump, committees } => cmd_verify(dump, committees),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
