//! Scenario files, the simulation loop, crash sweeps and run reports.

pub mod report;
pub mod scenario;
pub mod sim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use report::{owns, Fairness, Receipt, ReportError, RunReport};
pub use scenario::{Action, BackendSpec, FaultDecl, Funding, Options, ParticipantSpec, Scenario, ScenarioInvalid};
pub use sim::{external_key, wallet_of, Holding, Sim, Snapshot};

use crate::clock_net::{Round, Trace};
use crate::te_dtc::NodeBehaviour;

/// Runs a scenario to its horizon.
pub fn run(sc: &Scenario) -> Result<(RunReport, Trace), ScenarioInvalid> {
    let mut sim = Sim::new(sc)?;
    sim.run();
    let trace = sim.net.trace.clone();
    let report = RunReport::from_trace(&trace).expect("simulator trace has setup and final events");
    Ok((report, trace))
}

/// The first swap in the script, as `(round, initiator, responder)`.
fn first_swap(sc: &Scenario) -> Option<(Round, String, String)> {
    sc.script.iter().find_map(|a| match a {
        Action::Swap { round, initiator, responder, .. } => Some((*round, initiator.clone(), responder.clone())),
        _ => None,
    })
}

/// Variants of `base` with crash faults placed at every round of its first
/// swap, from the initiating round to the round the fault-free run completes.
/// Each variant runs at least until every backup has matured and landed.
///
/// With enclaves, each of the two enclaves crashes. With committees, every
/// group gets one silent node and each of the two swapping groups loses one
/// more node, which leaves it short of its threshold.
pub fn crash_variants(base: &Scenario) -> Vec<Scenario> {
    let Some((tau, ini, res)) = first_swap(base) else { return Vec::new() };
    let end = run(base)
        .ok()
        .and_then(|(r, _)| r.receipt("swap").and_then(|x| x.end))
        .unwrap_or(tau + 3);
    let mut out = Vec::new();
    for party in [&ini, &res] {
        for r in tau..=end {
            let mut sc = base.clone();
            sc.horizon = sc.horizon.max(base.settle_horizon());
            let target = match base.backend {
                BackendSpec::Tee => format!("tee:{}", base.tee_host(party)),
                BackendSpec::Dtc { n, .. } => {
                    for p in &base.participants {
                        let target = format!("{}.n{n}", p.name);
                        sc.faults.push(FaultDecl::Behaviour { target, behaviour: NodeBehaviour::Silent });
                    }
                    format!("{party}.n1")
                }
            };
            sc.name = format!("{}/crash-{target}@{r}", base.name);
            sc.faults.push(FaultDecl::Crash { target, round: r });
            sc.oracle = false;
            out.push(sc);
        }
    }
    out
}

/// Runs every crash variant of `base`.
pub fn sweep_crashes(base: &Scenario) -> Result<Vec<RunReport>, ScenarioInvalid> {
    crash_variants(base).iter().map(|sc| run(sc).map(|(r, _)| r)).collect()
}

/// Totals for one operation kind across benchmark runs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub count: usize,
    pub completed: usize,
    pub rounds: Round,
    pub min_rounds: Option<Round>,
    pub max_rounds: Option<Round>,
    pub messages: usize,
    pub onchain: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchCounters {
    pub runs: usize,
    pub ops: BTreeMap<String, OpCounters>,
}

/// Runs a scenario `reps` times with consecutive seeds, collecting round,
/// message and ledger-submission counts per operation kind.
pub fn bench_rounds(sc: &Scenario, reps: usize) -> Result<BenchCounters, ScenarioInvalid> {
    let mut c = BenchCounters::default();
    for k in 0..reps {
        let mut s = sc.clone();
        s.seed = sc.seed.wrapping_add(k as u64);
        let (report, _) = run(&s)?;
        c.runs += 1;
        for r in &report.receipts {
            if r.op == "swap" && r.outcome == "ok" {
                debug_assert!(r.messages >= 3, "a swap exchanges at least three messages");
            }
            let o = c.ops.entry(r.op.clone()).or_default();
            o.count += 1;
            o.messages += r.messages;
            o.onchain += r.onchain;
            if let Some(n) = r.rounds {
                o.completed += 1;
                o.rounds += n;
                o.min_rounds = Some(o.min_rounds.map_or(n, |m| m.min(n)));
                o.max_rounds = Some(o.max_rounds.map_or(n, |m| m.max(n)));
            }
        }
    }
    Ok(c)
}
