//! Property tests over randomly generated scenarios and primitives.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use curve25519_dalek::scalar::Scalar;
use dot_core::clock_net::{AsyncPolicy, Channel, Round, Trace};
use dot_core::crypto::dtc::{interpolate_at_zero, random_scalar, Polynomial};
use dot_core::crypto::{pkc_keygen, pkc_sign, pkc_verify, Signature};
use dot_core::harness::{run, BackendSpec, FaultDecl, RunReport, Scenario, Sim};
use dot_core::ideal_model::{HookEvent, IdealModel};
use dot_core::ledger::{AssetId, InclusionPolicy, LedgerKind};
use dot_core::protocol::LockState;
use dot_core::te_dtc::NodeBehaviour;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

#[derive(Clone, Debug)]
enum Fault {
    None,
    Crash { party: bool, offset: Round },
    Block { offset: Round },
    Silent { party: bool },
    Equivocate { party: bool },
}

#[derive(Clone, Debug)]
struct Gen {
    seed: u64,
    dtc: bool,
    ledger: LedgerKind,
    op: u8,
    fault: Fault,
    inclusion: InclusionPolicy,
    max_delay: Round,
}

fn fault() -> impl Strategy<Value = Fault> {
    prop_oneof![
        2 => Just(Fault::None),
        2 => (any::<bool>(), 0..25u64).prop_map(|(party, offset)| Fault::Crash { party, offset }),
        1 => (0..6u64).prop_map(|offset| Fault::Block { offset }),
        1 => any::<bool>().prop_map(|party| Fault::Silent { party }),
        1 => any::<bool>().prop_map(|party| Fault::Equivocate { party }),
    ]
}

fn gen() -> impl Strategy<Value = Gen> {
    (
        any::<u64>(),
        prop::bool::weighted(0.25),
        prop_oneof![Just(LedgerKind::Timelock), Just(LedgerKind::Scriptless)],
        0..4u8,
        fault(),
        prop_oneof![Just(InclusionPolicy::Next), Just(InclusionPolicy::Worst), Just(InclusionPolicy::Random)],
        0..3u64,
    )
        .prop_map(|(seed, dtc, ledger, op, fault, inclusion, max_delay)| Gen { seed, dtc, ledger, op, fault, inclusion, max_delay })
}

fn scenario(g: &Gen) -> Scenario {
    let backend = if g.dtc { DTC } else { TEE };
    let mut sc = base("prop", backend, g.ledger, &["A", "B", "C"]);
    sc.seed = g.seed;
    fund(&mut sc, "A", "a1", 100);
    fund(&mut sc, "B", "b1", 130);
    sc.options.inclusion = g.inclusion;
    if g.max_delay > 0 {
        sc.options.async_policy = AsyncPolicy::Random { max_delay: g.max_delay };
    }
    sc.script.push(match g.op {
        0 => pay(START, "A", "a1", "B"),
        1 => swap(START, "A", "a1", "B", "b1"),
        2 => backup(START, "A", "a1", 90),
        _ => pay(START, "B", "b1", "C"),
    });
    let who = |p: bool| if p { "B" } else { "A" };
    match (&g.fault, backend) {
        (Fault::None, _) => {}
        (Fault::Crash { party, offset }, BackendSpec::Tee) => sc.faults.push(crash(&format!("tee:{}", who(*party)), START + offset)),
        (Fault::Crash { party, offset }, BackendSpec::Dtc { n, .. }) => {
            sc.faults.extend((1..=n).map(|i| crash(&format!("{}.n{i}", who(*party)), START + offset)))
        }
        (Fault::Block { offset }, BackendSpec::Tee) => {
            sc.faults.push(FaultDecl::Block { src: "tee:A".into(), dst: "tee:B".into(), from: START + offset })
        }
        (Fault::Block { offset }, BackendSpec::Dtc { .. }) => {
            sc.faults.push(FaultDecl::Block { src: "A".into(), dst: "B".into(), from: START + offset })
        }
        (Fault::Silent { party }, BackendSpec::Dtc { .. }) => {
            sc.faults.push(FaultDecl::Behaviour { target: format!("{}.n3", who(*party)), behaviour: NodeBehaviour::Silent })
        }
        (Fault::Equivocate { party }, BackendSpec::Dtc { .. }) => {
            sc.faults.push(FaultDecl::Behaviour { target: format!("{}.n3", who(*party)), behaviour: NodeBehaviour::Equivocate })
        }
        (_, BackendSpec::Tee) => {}
    }
    sc.oracle = false;
    close(sc)
}

fn s(v: &Value, k: &str) -> String {
    v.get(k).and_then(Value::as_str).unwrap_or_default().to_string()
}

fn execute(sc: &Scenario) -> (RunReport, Trace) {
    run(sc).expect("generated scenarios validate")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn runs_are_deterministic(g in gen()) {
        let sc = scenario(&g);
        let (r1, t1) = execute(&sc);
        let (r2, t2) = execute(&sc);
        prop_assert_eq!(t1.to_jsonl(), t2.to_jsonl());
        prop_assert_eq!(r1, r2);
    }

    #[test]
    fn reports_rebuild_from_the_trace_log(g in gen()) {
        let (r, t) = execute(&scenario(&g));
        let back = Trace::from_jsonl(&t.to_jsonl()).expect("trace parses");
        prop_assert_eq!(RunReport::from_trace(&back).expect("report"), r);
    }

    #[test]
    fn trace_invariants(g in gen()) {
        let sc = scenario(&g);
        let (r, t) = execute(&sc);

        prop_assert!(t.events.windows(2).all(|w| w[0].round <= w[1].round), "rounds go backwards");

        let mut applied: BTreeMap<String, usize> = BTreeMap::new();
        for e in t.of_kind("ledger.include") {
            let submitted = e.detail["submitted_round"].as_u64().unwrap();
            prop_assert!(e.round >= submitted && e.round - submitted <= sc.delta, "inclusion outside [0, delta]");
            if e.detail["applied"] == json!(true) {
                *applied.entry(s(&e.detail, "aid")).or_default() += 1;
                if let (LedgerKind::Timelock, Some(tl)) = (sc.ledger, e.detail["timelock"].as_u64()) {
                    prop_assert!(e.round >= tl, "applied before its timelock");
                }
            }
        }
        prop_assert!(applied.values().all(|n| *n <= 1), "conflicting txs both applied: {applied:?}");

        let mut fired: BTreeMap<(String, String, String), usize> = BTreeMap::new();
        for e in t.of_kind("user.watch") {
            *fired.entry((s(&e.detail, "party"), e.sid.clone(), e.detail["action"].to_string())).or_default() += 1;
        }
        prop_assert!(fired.values().all(|n| *n == 1), "a watcher fired twice");

        prop_assert_eq!(r.pending_ops, 0, "obligations left at the horizon");

        if matches!(g.fault, Fault::None) && g.max_delay == 0 {
            prop_assert_eq!(r.ledger_submissions, 0, "fault-free run touched the ledger");
        }

        if g.dtc {
            let first = |step: &str| t.of_kind("dtc.step").filter(|e| s(&e.detail, "step") == step).map(|e| e.round).min();
            if let (Some(a), Some(b)) = (first("sign_a"), first("sign_b")) {
                prop_assert!(a <= b, "outer signature before inner");
            }
        }
    }

    #[test]
    fn channels_keep_their_bounds(g in gen()) {
        let sc = scenario(&g);
        let mut sim = Sim::new(&sc).expect("valid");
        sim.run();
        let horizon = sim.now();
        let clean = sc.faults.is_empty();
        for e in sim.net.envelopes() {
            let crashed = sim.net.crash_round(e.src).is_some()
                || sim.net.crash_round(e.dst).is_some()
                || e.via.is_some_and(|u| sim.net.crash_round(u).is_some());
            match e.channel {
                Channel::Sync if !crashed && !e.blocked => {
                    prop_assert_eq!(e.deliver_at, Some(e.sent_at + 1));
                    prop_assert!(e.delivered || e.sent_at + 1 > horizon);
                }
                Channel::Async if clean => {
                    let at = e.deliver_at.expect("finite delivery without faults");
                    prop_assert!(at > e.sent_at);
                    prop_assert!(e.delivered || at > horizon);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn at_most_one_live_unlocked_record(g in gen()) {
        let sc = scenario(&g);
        let mut sim = Sim::new(&sc).expect("valid");
        while sim.now() < sc.horizon {
            sim.step();
            let snap = sim.snapshot();
            let mut seen = BTreeSet::new();
            for h in snap.holdings.iter().filter(|h| h.live && h.state == LockState::Unlocked) {
                prop_assert!(seen.insert(h.aid.clone()), "{} unlocked twice at round {}", h.aid.0, snap.round);
            }
        }
    }

    #[test]
    fn single_fault_swaps_leave_each_party_one_asset(g in gen()) {
        let sc = scenario(&Gen { op: 1, max_delay: 0, ..g });
        let (r, _) = execute(&sc);
        let f = &r.fairness[0];
        prop_assert!(f.pass, "holdings {:?}", f.holdings);
        let (ia, ib, rb, ra) = f.holdings;
        prop_assert!(ia ^ ib && rb ^ ra);
    }

    #[test]
    fn ideal_swap_blocked_anywhere_leaves_claims(block in 0usize..8, gap in 11u64..40) {
        let mut m = IdealModel::new(5);
        m.run_op(1, "d1", "deposit", "A", json!({"aid": "a", "release": 100}), None).unwrap();
        m.run_op(1, "d2", "deposit", "B", json!({"aid": "b", "release": 100 + gap}), None).unwrap();
        let pk = |n: &str| pkc_keygen(n.as_bytes()).pk;
        m.run_op(2, "k1", "backup", "A", json!({"aid": "a", "release": 100, "pk_r": pk("A")}), None).unwrap();
        m.run_op(2, "k2", "backup", "B", json!({"aid": "b", "release": 100 + gap, "pk_r": pk("B")}), None).unwrap();
        let data = json!({"aid_a": "a", "aid_b": "b", "responder": "B", "pk_a2": pk("A"), "pk_b2": pk("B")});
        let steps = ["lock_a", "move_a", "commit", "sign_a", "sign_b", "move_b", "unlock_a"];
        let stop = steps.get(block).copied();
        let done = m.run_op(5, "s", "swap", "A", data, stop).unwrap();
        prop_assert_eq!(done, block.min(steps.len()));
        for p in ["A", "B"] {
            let party = m.party(p).unwrap();
            let claims: BTreeSet<&AssetId> = party.assets.keys().chain(party.backups.iter().map(|b| &b.0)).collect();
            prop_assert!(!claims.is_empty(), "{p} holds nothing after blocking at {block}");
        }
        for aid in ["a", "b"] {
            let holders = ["A", "B"].iter().filter(|p| m.asset(p, &AssetId::new(aid)).is_some()).count();
            prop_assert_eq!(holders, 1);
        }
    }

    #[test]
    fn ideal_rejects_reordered_steps(i in 0usize..3, j in 0usize..3) {
        prop_assume!(i != j);
        let mut m = IdealModel::new(5);
        m.run_op(1, "d", "deposit", "A", json!({"aid": "a", "release": 100}), None).unwrap();
        let steps = ["lock", "move", "accept"];
        let hook = |k: usize| HookEvent {
            round: 3 + k as Round,
            sid: "p".into(),
            op: "pay".into(),
            step: steps[k].into(),
            party: "A".into(),
            data: json!({"aid": "a", "payee": "B"}),
        };
        let first = m.apply(&hook(i));
        prop_assert_eq!(first.is_ok(), i == 0);
        if i == 0 {
            prop_assert_eq!(m.apply(&hook(j)).is_ok(), j == 1);
        }
    }
}

#[test]
fn flipped_signatures_never_verify() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in 0..1000u32 {
        let kp = pkc_keygen(&k.to_be_bytes());
        let mut msg = vec![0u8; rng.gen_range(1..64)];
        rng.fill(&mut msg[..]);
        let sig = pkc_sign(&kp.sk, &msg);
        assert!(pkc_verify(&kp.pk, &msg, &sig));
        if rng.gen_bool(0.5) {
            let bit = rng.gen_range(0..msg.len() * 8);
            msg[bit / 8] ^= 1 << (bit % 8);
            assert!(!pkc_verify(&kp.pk, &msg, &sig), "pair {k}: flipped message verified");
        } else {
            let mut b = sig.to_bytes();
            let bit = rng.gen_range(0..512);
            b[bit / 8] ^= 1 << (bit % 8);
            let ok = Signature::from_bytes(&b).is_ok_and(|s| pkc_verify(&kp.pk, &msg, &s));
            assert!(!ok, "pair {k}: flipped signature verified");
        }
    }
}

#[test]
fn fewer_than_t_shares_carry_no_information() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let secret = random_scalar(&mut rng);
    let poly = Polynomial::random(secret, 2, &mut rng);
    let real: Vec<(u32, Scalar)> = [1u32, 2].iter().map(|&i| (i, poly.eval(i))).collect();
    let k = 32;
    let guesses: BTreeSet<[u8; 32]> = (0..k)
        .map(|_| {
            let mut pts = real.clone();
            pts.push((3, random_scalar(&mut rng)));
            interpolate_at_zero(&pts).to_bytes()
        })
        .collect();
    assert_eq!(guesses.len(), k);
    let mut pts = real;
    pts.push((3, poly.eval(3)));
    assert_eq!(interpolate_at_zero(&pts), secret);
}
