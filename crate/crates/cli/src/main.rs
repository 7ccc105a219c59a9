use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dot_core::harness::{bench_rounds, crash_variants, run, BackendSpec, RunReport, Scenario};
use dot_core::ledger::LedgerKind;

/// Round-based simulator for delegated ownership transfer.
#[derive(Parser, Debug)]
#[command(name = "dot-sim", version)]
struct Cli {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the backend: `tee`, `dtc` (4 nodes, threshold 3) or `dtc:N,T`.
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<BackendSpec>,
    /// Override the ledger kind.
    #[arg(long, global = true, value_enum)]
    ledger: Option<LedgerArg>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run one scenario to its horizon.
    Run {
        file: PathBuf,
        /// Write the trace log as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the run report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Re-run a single-swap scenario with a crash at every round of the swap.
    Sweep {
        file: PathBuf,
        /// Write every variant's report as a JSON array.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Repeat a fault-free scenario with varying seeds and sum its counters.
    Bench {
        file: PathBuf,
        #[arg(long, default_value_t = 100)]
        reps: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LedgerArg {
    Scriptless,
    Timelock,
}

fn parse_backend(s: &str) -> Result<BackendSpec, String> {
    match s.split_once(':') {
        None if s == "tee" => Ok(BackendSpec::Tee),
        None if s == "dtc" => Ok(BackendSpec::Dtc { n: 4, t: 3 }),
        Some(("dtc", nt)) => {
            let (n, t) = nt.split_once(',').ok_or("expected dtc:N,T")?;
            let n = n.trim().parse().map_err(|_| "N is not a number")?;
            let t = t.trim().parse().map_err(|_| "T is not a number")?;
            Ok(BackendSpec::Dtc { n, t })
        }
        _ => Err(format!("unknown backend {s:?}")),
    }
}

fn load(cli: &Cli, path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut sc = Scenario::from_json(&text).with_context(|| format!("in {}", path.display()))?;
    if let Some(seed) = cli.seed {
        sc.seed = seed;
    }
    if let Some(b) = cli.backend {
        sc.backend = b;
    }
    if let Some(l) = cli.ledger {
        sc.ledger = match l {
            LedgerArg::Scriptless => LedgerKind::Scriptless,
            LedgerArg::Timelock => LedgerKind::Timelock,
        };
    }
    sc.validate().with_context(|| format!("in {}", path.display()))?;
    Ok(sc)
}

fn summarize(r: &RunReport) {
    println!("scenario {} seed {} final round {}", r.scenario, r.seed, r.final_round);
    for x in &r.receipts {
        let rounds = x.rounds.map_or("-".to_string(), |n| n.to_string());
        println!(
            "  {:<16} {:<8} {:<4} rounds={:<4} msgs={:<4} onchain={} {}",
            x.sid, x.op, x.party, rounds, x.messages, x.onchain, x.outcome
        );
    }
    for f in &r.fairness {
        println!("  fairness {} {}", f.sid, if f.pass { "pass" } else { "FAIL" });
    }
    if let Some(d) = &r.differential {
        println!("  differential {}", if d.is_equal() { "equal" } else { "DIFFERS" });
    }
    for o in &r.owners {
        println!("  owner {} -> {}", o.aid.0, o.owner);
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn execute(cli: &Cli) -> Result<bool> {
    match &cli.cmd {
        Cmd::Run { file, trace, report } => {
            let sc = load(cli, file)?;
            let (r, t) = run(&sc)?;
            summarize(&r);
            if let Some(p) = trace {
                write(p, &t.to_jsonl())?;
            }
            if let Some(p) = report {
                write(p, &r.to_json())?;
            }
            println!("{}", if r.pass { "PASS" } else { "FAIL" });
            Ok(r.pass)
        }
        Cmd::Sweep { file, report } => {
            let sc = load(cli, file)?;
            let variants = crash_variants(&sc);
            if variants.is_empty() {
                bail!("{} has no swap to sweep", file.display());
            }
            let mut reports = Vec::new();
            for v in &variants {
                let (r, _) = run(v)?;
                let fair = r.fairness.iter().all(|f| f.pass);
                println!("{:<48} {}", v.name, if fair { "fair" } else { "UNFAIR" });
                reports.push(r);
            }
            let bad = reports.iter().filter(|r| !r.fairness.iter().all(|f| f.pass)).count();
            println!("{} variants, {} unfair", reports.len(), bad);
            if let Some(p) = report {
                write(p, &serde_json::to_string_pretty(&reports)?)?;
            }
            Ok(bad == 0)
        }
        Cmd::Bench { file, reps } => {
            let sc = load(cli, file)?;
            let c = bench_rounds(&sc, *reps)?;
            println!("{} runs", c.runs);
            for (op, o) in &c.ops {
                let mean = o.rounds as f64 / o.completed.max(1) as f64;
                println!(
                    "  {op:<8} n={:<6} done={:<6} rounds mean={mean:.2} min={} max={} msgs/op={:.2} onchain={}",
                    o.count,
                    o.completed,
                    o.min_rounds.map_or("-".into(), |x| x.to_string()),
                    o.max_rounds.map_or("-".into(), |x| x.to_string()),
                    o.messages as f64 / o.count.max(1) as f64,
                    o.onchain
                );
            }
            Ok(c.ops.values().all(|o| o.completed == o.count))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
