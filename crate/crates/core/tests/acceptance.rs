//! Acceptance criteria 1 to 9. Each test prints one PASS/FAIL line.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use common::*;
use dot_core::clock_net::{Round, Trace};
use dot_core::crypto::committee::{run_keygen, run_reshare, run_sign};
use dot_core::crypto::tlp::{ConcreteParams, ConcretePuzzle, TlpOracle};
use dot_core::crypto::{pkc_verify, DtcParams, GroupKey, KeyShare};
use dot_core::harness::{crash_variants, run, sweep_crashes, BackendSpec, FaultDecl, RunReport, Scenario};
use dot_core::ledger::{InclusionPolicy, LedgerKind};
use dot_core::te_dtc::NodeBehaviour;
use num_bigint::BigUint;
use num_traits::One;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const LEDGERS: [LedgerKind; 2] = [LedgerKind::Timelock, LedgerKind::Scriptless];

fn verdict(n: u32, title: &str, ok: bool, detail: &str, t0: Instant, budget: Duration) {
    let el = t0.elapsed();
    let pass = ok && el < budget;
    println!(
        "criterion {n} {title}: {} ({detail}; {:.2}s of {}s)",
        if pass { "PASS" } else { "FAIL" },
        el.as_secs_f64(),
        budget.as_secs()
    );
    assert!(ok, "criterion {n} failed: {detail}");
    assert!(el < budget, "criterion {n} over its time budget: {el:?}");
}

fn run_ok(sc: &Scenario) -> (RunReport, Trace) {
    run(sc).unwrap_or_else(|e| panic!("{}: {e}", sc.name))
}

fn s(v: &Value, k: &str) -> String {
    v.get(k).and_then(Value::as_str).unwrap_or_default().to_string()
}

fn u(v: &Value, k: &str) -> u64 {
    v.get(k).and_then(Value::as_u64).unwrap_or(u64::MAX)
}

/// Inclusion round and applied flag per ledger submission index.
fn inclusions(trace: &Trace) -> BTreeMap<u64, (Round, bool)> {
    trace
        .of_kind("ledger.include")
        .map(|e| (u(&e.detail, "index"), (e.round, e.detail.get("applied") == Some(&Value::Bool(true)))))
        .collect()
}

fn applied_per_aid(trace: &Trace) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for e in trace.of_kind("ledger.include") {
        if e.detail.get("applied") == Some(&Value::Bool(true)) {
            *m.entry(s(&e.detail, "aid")).or_default() += 1;
        }
    }
    m
}

#[test]
fn criterion_1_optimistic_payment() {
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for (backend, budget) in [(TEE, 2), (DTC, 3 + DtcParams::new(4, 3).unwrap().t_reshare)] {
        for ledger in LEDGERS {
            let mut sc = pair("c1", backend, ledger);
            sc.script.push(pay(START, "A", "a1", "B"));
            let (r, _) = run_ok(&close(sc));
            let p = r.receipt("pay").expect("pay receipt");
            let good = p.outcome == "ok"
                && match backend {
                    BackendSpec::Tee => p.rounds == Some(budget),
                    BackendSpec::Dtc { .. } => p.rounds.is_some_and(|x| x <= budget),
                }
                && p.onchain == 0
                && r.ledger_submissions == 0;
            ok &= good;
            lines.push(format!("{backend:?}/{ledger:?} rounds={:?} onchain={}", p.rounds, r.ledger_submissions));
        }
    }
    verdict(1, "optimistic payment", ok, &lines.join(", "), t0, Duration::from_secs(1));
}

#[test]
fn criterion_2_optimistic_swap() {
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for ledger in LEDGERS {
        let mut sc = pair("c2", TEE, ledger);
        sc.script.push(swap(START, "A", "a1", "B", "b1"));
        let (r, _) = run_ok(&close(sc));
        let w = r.receipt("swap").expect("swap receipt");
        let good = w.outcome == "ok"
            && w.rounds.is_some_and(|x| x <= 4)
            && w.onchain == 0
            && r.ledger_submissions == 0
            && w.messages >= 3
            && r.fairness.iter().all(|f| f.pass);
        ok &= good;
        lines.push(format!("{ledger:?} rounds={:?} messages={} onchain={}", w.rounds, w.messages, r.ledger_submissions));
    }
    verdict(2, "optimistic swap", ok, &lines.join(", "), t0, Duration::from_secs(1));
}

#[test]
fn criterion_3_fairness_sweep() {
    let t0 = Instant::now();
    let mut total = 0;
    let mut failed = Vec::new();
    for backend in [TEE, DTC] {
        for ledger in LEDGERS {
            let mut sc = pair("c3", backend, ledger);
            sc.script.push(swap(START, "A", "a1", "B", "b1"));
            let sc = close(sc);
            let variants = crash_variants(&sc);
            for v in &variants {
                let (r, _) = run_ok(v);
                total += 1;
                if !r.fairness.iter().all(|f| f.pass) {
                    failed.push(v.name.clone());
                }
            }
        }
    }

    // Without the margin check the responder's contingent backup can release
    // after the initiator's original one, and some crash point loses.
    let mut m = base("c3-mutant", TEE, LedgerKind::Timelock, &["A", "B"]);
    fund(&mut m, "A", "a1", 100);
    fund(&mut m, "B", "b1", 90);
    m.script.push(swap(START, "A", "a1", "B", "b1"));
    m.options.skip_margin_check = true;
    let mutant = sweep_crashes(&close(m)).expect("valid");
    let detected = mutant.iter().any(|r| r.fairness.iter().any(|f| !f.pass));

    let ok = total >= 16 && failed.is_empty() && detected;
    let detail = format!("{total} crash points, unfair={failed:?}, mutant detected={detected}");
    verdict(3, "fairness sweep", ok, &detail, t0, Duration::from_secs(30));
}

struct Chain {
    sc: Scenario,
    holders: Vec<String>,
}

/// Ten pays of one asset among four parties with random re-backups between
/// them, finishing with a recovery by the last holder while every earlier
/// holder replays its stale artifact.
fn pay_chain(seed: u64, backend: BackendSpec, ledger: LedgerKind) -> Chain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parties = ["A", "B", "C", "D"];
    let gap: Round = if backend == TEE { 3 } else { 9 };
    let mut release: Round = if backend == TEE { 200 } else { 400 };
    let mut sc = base(&format!("chain-{seed}"), backend, ledger, &parties);
    sc.seed = seed;
    fund(&mut sc, "A", "x", release);
    sc.options.inclusion = InclusionPolicy::Worst;
    sc.options.submit_stale = true;
    let mut holder = "A".to_string();
    let mut holders = vec![holder.clone()];
    let mut round = START;
    let (mut pays, mut rebackups) = (0, 0);
    while pays < 10 {
        if rebackups < 6 && rng.gen_bool(0.3) {
            rebackups += 1;
            release -= sc.delta * rng.gen_range(1..=2);
            sc.script.push(backup(round, &holder, "x", release));
        } else {
            let others: Vec<&str> = parties.iter().copied().filter(|p| *p != holder).collect();
            let to = others[rng.gen_range(0..others.len())].to_string();
            sc.script.push(pay(round, &holder, "x", &to));
            release -= sc.delta;
            holder = to;
            holders.push(holder.clone());
            pays += 1;
        }
        round += gap;
    }
    sc.script.push(recover(round, &holder, "x"));
    Chain { sc: close(sc), holders }
}

#[test]
fn criterion_4_monotonic_recovery_precedence() {
    let t0 = Instant::now();
    let mut problems = Vec::new();
    let mut races = 0;
    let seeds: Vec<(u64, BackendSpec)> =
        (0..100).map(|k| (k, TEE)).chain((0..4).map(|k| (1000 + k, DTC))).collect();
    for (seed, backend) in seeds {
        let ledger = LEDGERS[(seed % 2) as usize];
        let chain = pay_chain(seed, backend, ledger);
        let (r, trace) = run_ok(&chain.sc);
        let name = &chain.sc.name;
        if r.receipts.iter().any(|x| x.op != "recover" && x.outcome != "ok") {
            problems.push(format!("{name}: an operation did not complete"));
            continue;
        }
        let releases: Vec<Round> = trace
            .of_kind("user.vault")
            .filter(|e| s(&e.detail, "aid") == "x")
            .map(|e| u(&e.detail, "release"))
            .collect();
        let delta = chain.sc.delta;
        if !releases.windows(2).all(|w| w[0] > w[1] && w[0] - w[1] >= delta) {
            problems.push(format!("{name}: releases {releases:?}"));
        }
        let last = chain.holders.last().expect("holder");
        let includes: Vec<_> = trace.of_kind("ledger.include").filter(|e| s(&e.detail, "aid") == "x").collect();
        let winners: Vec<String> = includes
            .iter()
            .filter(|e| e.detail.get("applied") == Some(&Value::Bool(true)))
            .map(|e| s(&e.detail, "submitter"))
            .collect();
        let stale = includes.iter().filter(|e| s(&e.detail, "submitter") != *last).count();
        let distinct_prev: BTreeSet<&String> = chain.holders.iter().filter(|h| *h != last).collect();
        if winners != vec![last.clone()] {
            problems.push(format!("{name}: applied by {winners:?}, newest holder {last}"));
        }
        if stale < distinct_prev.len() {
            problems.push(format!("{name}: only {stale} stale submissions for {} earlier holders", distinct_prev.len()));
        }
        races += stale;
    }
    let detail = format!("104 chains, {races} stale txs rejected, problems={problems:?}");
    verdict(4, "monotonic recovery precedence", problems.is_empty(), &detail, t0, Duration::from_secs(10));
}

/// A pay or swap of `a1` followed by a second spend of it by the same
/// owner, and an on-chain recovery attempt by that previous owner.
fn double_spend(seed: u64) -> (Scenario, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backend = if seed.is_multiple_of(5) { DTC } else { TEE };
    let ledger = LEDGERS[rng.gen_range(0..2)];
    let mut sc = base(&format!("ds-{seed}"), backend, ledger, &["A", "B", "C"]);
    sc.seed = seed;
    fund(&mut sc, "A", "a1", 100);
    fund(&mut sc, "B", "b1", 130);
    fund(&mut sc, "C", "c1", 140);
    sc.options.inclusion = [InclusionPolicy::Next, InclusionPolicy::Worst, InclusionPolicy::Random][rng.gen_range(0..3)];
    sc.options.submit_stale = true;
    let first_swap = rng.gen_bool(0.5);
    sc.script.push(if first_swap { swap(START, "A", "a1", "B", "b1") } else { pay(START, "A", "a1", "B") });
    let d: Round = rng.gen_range(0..=6);
    sc.script.push(if rng.gen_bool(0.5) {
        pay(START + d, "A", "a1", "C")
    } else {
        swap(START + d, "A", "a1", "C", "c1")
    });
    // Sometimes the new holder defends the asset on chain as well.
    sc.script.push(recover(START + 10, "A", "a1"));
    let defended = rng.gen_bool(0.5);
    if defended {
        sc.script.push(recover(START + 10, "B", "a1"));
    }
    (close(sc), defended)
}

#[test]
fn criterion_5_double_spend() {
    let t0 = Instant::now();
    let mut problems = Vec::new();
    for seed in 0..100u64 {
        let (sc, defended) = double_spend(seed);
        let (r, trace) = run_ok(&sc);
        let ops: Vec<_> = r.receipts.iter().filter(|x| x.op == "pay" || x.op == "swap").collect();
        let [first, second] = &ops[..] else {
            problems.push(format!("seed {seed}: receipts {:?}", r.receipts));
            continue;
        };
        if first.outcome != "ok" || second.outcome != "abort" {
            problems.push(format!("seed {seed}: first={} second={}", first.outcome, second.outcome));
        }
        if let Some((aid, n)) = applied_per_aid(&trace).into_iter().find(|(_, n)| *n > 1) {
            problems.push(format!("seed {seed}: {n} applied txs for {aid}"));
        }
        let a1 = r.owners.iter().find(|o| o.aid.0 == "a1").map(|o| o.owner.clone());
        if a1.as_deref() == Some("wallet:C") || (defended && a1.as_deref() != Some("wallet:B")) {
            problems.push(format!("seed {seed}: a1 ended with {a1:?}"));
        }
    }
    let detail = format!("100 schedules, problems={problems:?}");
    verdict(5, "double-spend resistance", problems.is_empty(), &detail, t0, Duration::from_secs(10));
}

fn keygen(params: DtcParams, seed: u64) -> (Vec<KeyShare>, GroupKey) {
    let out = run_keygen(params, &[], seed).all_ok().expect("keygen succeeds");
    let key = out[0].1.clone();
    (out.into_iter().map(|(s, _)| s).collect(), key)
}

#[test]
fn criterion_6_threshold_boundaries() {
    let t0 = Instant::now();
    let p = DtcParams::new(4, 3).unwrap();
    let mut problems = Vec::new();
    let (shares, key) = keygen(p, 1);
    let msg = b"boundary";

    let mut signed = 0;
    let mut refused = 0;
    for mask in 0u32..16 {
        let set: Vec<u32> = (1..=4).filter(|i| mask & (1 << (i - 1)) != 0).collect();
        if set.len() != 2 && set.len() != 3 {
            continue;
        }
        let rep = run_sign(p, &shares, &key, &set, msg, mask as u64);
        match (set.len(), rep.all_ok()) {
            (3, Some(sigs)) if sigs.iter().all(|g| pkc_verify(&key.pk, msg, g)) => {
                signed += 1;
                if rep.latest_round() - rep.invoked_at > p.t_sign {
                    problems.push(format!("sign {set:?} exceeded its bound"));
                }
            }
            (2, _) if rep.all_failed() => refused += 1,
            (_, other) => problems.push(format!("signers {set:?}: {:?}", other.map(|v| v.len()))),
        }
    }

    let (mut sh, mut k) = (shares.clone(), key.clone());
    for step in 0..5u64 {
        let crashed: &[u32] = if step % 2 == 1 { &[2] } else { &[] };
        let rr = run_reshare(p, &sh, &k, p, crashed, &[], 100 + step);
        match rr.receivers.all_ok() {
            Some(out) if out.iter().all(|(_, g)| g.pk == key.pk) => {
                if rr.receivers.latest_round() - rr.receivers.invoked_at > p.t_reshare {
                    problems.push(format!("reshare {step} exceeded its bound"));
                }
                k = out[0].1.clone();
                sh = out.into_iter().map(|(s, _)| s).collect();
            }
            _ => problems.push(format!("reshare {step} failed or changed the key")),
        }
    }
    let sig = run_sign(p, &sh, &k, &[1, 3, 4], msg, 77).all_ok().map(|v| v[0]);
    if !sig.is_some_and(|g| pkc_verify(&key.pk, msg, &g)) {
        problems.push("signature after the reshare chain does not verify under the original key".into());
    }

    let kg1 = run_keygen(p, &[4], 5);
    if !kg1.all_ok().is_some_and(|v| v.len() == 3) || kg1.latest_round() - kg1.invoked_at > p.t_keygen {
        problems.push("keygen with one crash".into());
    }
    if !run_keygen(p, &[3, 4], 6).all_failed() {
        problems.push("keygen with two crashes did not fail closed".into());
    }
    let s1 = run_sign(p, &shares, &key, &[1, 2, 3], msg, 8);
    if s1.all_ok().is_none() || s1.latest_round() - s1.invoked_at > p.t_sign {
        problems.push("sign with one crash".into());
    }
    if !run_sign(p, &shares, &key, &[1, 2], msg, 9).all_failed() {
        problems.push("sign with two crashes did not fail closed".into());
    }
    let r2 = run_reshare(p, &shares, &key, p, &[3, 4], &[], 10);
    if !r2.receivers.all_failed() || !r2.tombstoned.is_empty() {
        problems.push("reshare with two crashes did not fail closed".into());
    }

    let ok = signed == 4 && refused == 6 && problems.is_empty();
    let detail = format!("3-subsets signed {signed}/4, 2-subsets refused {refused}/6, problems={problems:?}");
    verdict(6, "DTC threshold boundaries", ok, &detail, t0, Duration::from_secs(10));
}

#[test]
fn criterion_7_tlp_gating() {
    let t0 = Instant::now();
    let mut problems = Vec::new();
    let mut oracle = TlpOracle::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for gamma in [0u64, 1, 5, 50] {
        let msg = format!("hidden-{gamma}").into_bytes();
        let pz = oracle.pgen(gamma, &msg);
        let mut st = pz.st0;
        for k in 0..gamma {
            if oracle.get_msg(&pz, &st).is_some() {
                problems.push(format!("ideal Γ={gamma} opened at step {k}"));
            }
            st = oracle.solve_step(&st);
        }
        if oracle.get_msg(&pz, &st).as_deref() != Some(&msg[..]) {
            problems.push(format!("ideal Γ={gamma} did not open at step Γ"));
        }

        let params = ConcreteParams { modulus_bits: 64, squarings_per_round: 3 };
        let cz = ConcretePuzzle::pgen(gamma, &msg, params, &mut rng);
        let mut solver = cz.start();
        for k in 0..gamma {
            if cz.get_msg(&solver).is_some() {
                problems.push(format!("concrete Γ={gamma} opened at round {k}"));
            }
            cz.step(&mut solver, params.squarings_per_round);
        }
        let n = BigUint::from_bytes_be(&cz.modulus);
        let expected = BigUint::from_bytes_be(&cz.base).modpow(&(BigUint::one() << (gamma * params.squarings_per_round)), &n);
        if solver.x != expected {
            problems.push(format!("concrete Γ={gamma} final value differs from direct modexp"));
        }
        if cz.open_with(&expected) != msg || cz.get_msg(&solver).as_deref() != Some(&msg[..]) {
            problems.push(format!("concrete Γ={gamma} message mismatch"));
        }
    }
    verdict(7, "TLP gating", problems.is_empty(), &format!("Γ in {{0,1,5,50}}, problems={problems:?}"), t0, Duration::from_secs(5));
}

/// Fault-free and single-fault scenarios for both backends and ledgers.
fn differential_corpus() -> Vec<Scenario> {
    let mut out = Vec::new();
    for ledger in LEDGERS {
        for backend in [TEE, DTC] {
            let tag = if backend == TEE { "tee" } else { "dtc" };
            let step = if backend == TEE { 4 } else { 12 };
            let named = |n: &str| format!("{tag}-{ledger:?}-{n}");

            let mut s = pair(&named("pay"), backend, ledger);
            s.script.push(pay(START, "A", "a1", "B"));
            out.push(close(s));

            let mut s = pair(&named("swap"), backend, ledger);
            s.script.push(swap(START, "A", "a1", "B", "b1"));
            out.push(close(s.clone()));
            out.extend(crash_variants(&close(s)).into_iter().filter(|v| backend == TEE || v.name.ends_with(&format!("@{}", START + 2))).map(|mut v| {
                if backend != TEE {
                    // One silent node plus one crash in a group is two faults;
                    // keep only the silent node here.
                    v.faults.retain(|f| matches!(f, FaultDecl::Behaviour { .. }));
                    v.name = named("swap-silent");
                }
                v.oracle = true;
                v
            }));

            let mut s = pair(&named("backup"), backend, ledger);
            s.script.push(backup(START, "A", "a1", 80));
            out.push(close(s));

            let mut s = base(&named("chain"), backend, ledger, &["A", "B", "C"]);
            fund(&mut s, "A", "a1", 100);
            s.script.push(pay(START, "A", "a1", "B"));
            s.script.push(pay(START + step, "B", "a1", "C"));
            out.push(close(s));

            let mut s = pair(&named("swap-then-pay"), backend, ledger);
            s.script.push(swap(START, "A", "a1", "B", "b1"));
            s.script.push(pay(START + 3 * step, "A", "b1", "B"));
            out.push(close(s));

            for (who, r) in [("A", START), ("B", START), ("A", START + 1), ("B", START + 1)] {
                let mut s = pair(&named(&format!("pay-crash-{who}@{r}")), backend, ledger);
                s.script.push(pay(START, "A", "a1", "B"));
                match backend {
                    BackendSpec::Tee => s.faults.push(crash(&format!("tee:{who}"), r)),
                    BackendSpec::Dtc { n, .. } => s.faults.extend((1..=n).map(|i| crash(&format!("{who}.n{i}"), r))),
                }
                out.push(close(s));
            }

            if backend == TEE {
                let mut s = pair(&named("swap-block"), backend, ledger);
                s.script.push(swap(START, "A", "a1", "B", "b1"));
                s.faults.push(FaultDecl::Block { src: "tee:B".into(), dst: "tee:A".into(), from: START });
                out.push(close(s));
            } else {
                for b in [NodeBehaviour::Silent, NodeBehaviour::Equivocate] {
                    for (op, who) in [("pay", "A"), ("pay", "B"), ("swap", "A"), ("swap", "B")] {
                        let mut s = pair(&named(&format!("{op}-{b:?}-{who}")), backend, ledger);
                        s.script.push(if op == "pay" { pay(START, "A", "a1", "B") } else { swap(START, "A", "a1", "B", "b1") });
                        s.faults.push(FaultDecl::Behaviour { target: format!("{who}.n2"), behaviour: b });
                        out.push(close(s));
                    }
                }
            }
        }
    }
    out
}

#[test]
fn criterion_8_differential_equivalence() {
    let t0 = Instant::now();
    let corpus = differential_corpus();
    let mut diverged = Vec::new();
    for sc in &corpus {
        let (r, _) = run_ok(sc);
        match &r.differential {
            Some(d) if d.is_equal() => {}
            Some(d) => diverged.push(format!("{}: {}", sc.name, serde_json::to_string(d).unwrap_or_default())),
            None => diverged.push(format!("{}: no verdict", sc.name)),
        }
    }

    let mut m = base("mutant", TEE, LedgerKind::Timelock, &["A", "B"]);
    fund(&mut m, "A", "a1", 100);
    fund(&mut m, "B", "b1", 90);
    m.script.push(swap(START, "A", "a1", "B", "b1"));
    m.options.skip_margin_check = true;
    let (mr, _) = run_ok(&close(m));
    let detected = mr.differential.as_ref().is_some_and(|d| !d.is_equal());

    let ok = corpus.len() >= 50 && diverged.is_empty() && detected;
    let detail = format!("{} scenarios, diverged={diverged:?}, mutant detected={detected}", corpus.len());
    verdict(8, "differential equivalence", ok, &detail, t0, Duration::from_secs(60));
}

/// Scenarios where an honest holder must fall back to the ledger.
fn recovery_corpus() -> Vec<Scenario> {
    let mut out = Vec::new();
    for ledger in LEDGERS {
        for backend in [TEE, DTC] {
            let tag = format!("{}-{ledger:?}", if backend == TEE { "tee" } else { "dtc" });
            let kill = |s: &mut Scenario, who: &str, r: Round| match backend {
                BackendSpec::Tee => s.faults.push(crash(&format!("tee:{who}"), r)),
                BackendSpec::Dtc { n, .. } => s.faults.extend((1..=n).map(|i| crash(&format!("{who}.n{i}"), r))),
            };

            let mut s = pair(&format!("{tag}-idle"), backend, ledger);
            kill(&mut s, "A", START);
            out.push(s);

            let mut s = pair(&format!("{tag}-paid"), backend, ledger);
            s.script.push(pay(START, "A", "a1", "B"));
            kill(&mut s, "B", START + 20);
            out.push(s);

            let mut s = pair(&format!("{tag}-swapped"), backend, ledger);
            s.script.push(swap(START, "A", "a1", "B", "b1"));
            kill(&mut s, "A", START + 30);
            kill(&mut s, "B", START + 30);
            out.push(s);

            let mut s = pair(&format!("{tag}-voluntary"), backend, ledger);
            s.script.push(recover(START, "B", "b1"));
            out.push(s);

            let mut s = pair(&format!("{tag}-sweep"), backend, ledger);
            s.script.push(swap(START, "A", "a1", "B", "b1"));
            let variants = crash_variants(&close(s));
            let stride = if backend == TEE { 1 } else { 5 };
            out.extend(variants.into_iter().step_by(stride));
        }
    }
    out.into_iter()
        .map(|mut s| {
            s.options.inclusion = InclusionPolicy::Worst;
            s.oracle = false;
            close(s)
        })
        .collect()
}

#[test]
fn criterion_9_recovery_liveness() {
    let t0 = Instant::now();
    let corpus = recovery_corpus();
    let mut late = Vec::new();
    let mut checked = 0;
    let mut superseded = 0;
    for sc in &corpus {
        let (_, trace) = run_ok(sc);
        let inc = inclusions(&trace);
        let submits: Vec<_> = trace.of_kind("user.submit").collect();
        // A rejection is justified only by a tx for the same asset that was
        // submitted no later and included first.
        let settled_before = |aid: &str, submitted: Round, included: Round, mine: u64| {
            submits.iter().any(|o| {
                s(&o.detail, "aid") == aid
                    && o.round <= submitted
                    && inc.get(&u(&o.detail, "index")).is_some_and(|(r, ok)| *ok && *r <= included)
                    && u(&o.detail, "index") != mine
            })
        };
        for e in &submits {
            if !matches!(s(&e.detail, "why").as_str(), "recover" | "watcher") {
                continue;
            }
            checked += 1;
            let aid = s(&e.detail, "aid");
            match inc.get(&u(&e.detail, "index")) {
                Some((r, true)) if *r <= e.round + sc.delta => {}
                Some((r, false)) if *r <= e.round + sc.delta && settled_before(&aid, e.round, *r, u(&e.detail, "index")) => superseded += 1,
                other => late.push(format!("{} {aid}@{}: {other:?}", sc.name, e.round)),
            }
        }
    }
    let ok = checked > 0 && late.is_empty();
    let detail = format!("{} scenarios, {checked} recoveries ({superseded} lost to an earlier claim), late or rejected={late:?}", corpus.len());
    verdict(9, "recovery liveness", ok, &detail, t0, Duration::from_secs(5));
}



