#![allow(dead_code)]

use dot_core::clock_net::{Round, Trace};
use dot_core::harness::{Action, BackendSpec, FaultDecl, Funding, Options, ParticipantSpec, Scenario};
use dot_core::ledger::LedgerKind;

pub const TEE: BackendSpec = BackendSpec::Tee;
pub const DTC: BackendSpec = BackendSpec::Dtc { n: 4, t: 3 };

/// First round at which script actions may run: committee key generation
/// and the initial backup finish well before it.
pub const START: Round = 10;

pub fn scenarios_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn bundled(name: &str) -> Scenario {
    let s = std::fs::read_to_string(scenarios_dir().join(format!("{name}.json"))).expect("bundled scenario");
    Scenario::from_json(&s).expect("bundled scenario validates")
}

pub fn base(name: &str, backend: BackendSpec, ledger: LedgerKind, parties: &[&str]) -> Scenario {
    Scenario {
        name: name.to_string(),
        seed: 11,
        ledger,
        delta: 5,
        backend,
        participants: parties.iter().map(|p| ParticipantSpec { name: p.to_string(), tee: None }).collect(),
        funding: Vec::new(),
        script: Vec::new(),
        faults: Vec::new(),
        horizon: 0,
        oracle: true,
        options: Options::default(),
    }
}

pub fn fund(sc: &mut Scenario, party: &str, aid: &str, release: Round) {
    sc.funding.push(Funding { party: party.into(), aid: aid.into(), release, round: 1 });
}

pub fn pay(round: Round, payer: &str, aid: &str, payee: &str) -> Action {
    Action::Pay { round, payer: payer.into(), aid: aid.into(), payee: payee.into() }
}

pub fn swap(round: Round, initiator: &str, aid_a: &str, responder: &str, aid_b: &str) -> Action {
    Action::Swap { round, initiator: initiator.into(), aid_a: aid_a.into(), responder: responder.into(), aid_b: aid_b.into() }
}

pub fn backup(round: Round, party: &str, aid: &str, release: Round) -> Action {
    Action::Backup { round, party: party.into(), aid: aid.into(), release }
}

pub fn recover(round: Round, party: &str, aid: &str) -> Action {
    Action::Recover { round, party: party.into(), aid: aid.into() }
}

pub fn crash(target: &str, round: Round) -> FaultDecl {
    FaultDecl::Crash { target: target.into(), round }
}

pub fn close(mut sc: Scenario) -> Scenario {
    sc.horizon = sc.settle_horizon();
    sc
}

/// Two funded parties with a release gap wide enough for a swap.
pub fn pair(name: &str, backend: BackendSpec, ledger: LedgerKind) -> Scenario {
    let mut sc = base(name, backend, ledger, &["A", "B"]);
    fund(&mut sc, "A", "a1", 100);
    fund(&mut sc, "B", "b1", 130);
    sc
}

pub fn count(trace: &Trace, kind: &str) -> usize {
    trace.of_kind(kind).count()
}
