use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use dot_bench::bundled;
use dot_core::crypto::committee::{run_keygen, run_sign};
use dot_core::crypto::tlp::{ConcreteParams, ConcretePuzzle};
use dot_core::crypto::DtcParams;
use dot_core::harness::{run, sweep_crashes};
use dot_core::ideal_model::differential_check;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scenarios(c: &mut Criterion) {
    let mut g = c.benchmark_group("scenario");
    for name in ["optimistic_pay", "optimistic_swap", "swap_responder_crash", "dtc_optimistic_pay", "dtc_optimistic_swap", "pay_fan_in"] {
        let sc = bundled(name);
        g.bench_function(name, |b| b.iter(|| run(black_box(&sc)).unwrap()));
    }
    g.finish();
}

fn sweep(c: &mut Criterion) {
    let sc = bundled("optimistic_swap");
    c.bench_function("sweep/optimistic_swap", |b| b.iter(|| sweep_crashes(black_box(&sc)).unwrap()));
}

fn oracle(c: &mut Criterion) {
    let (_, trace) = run(&bundled("swap_responder_crash")).unwrap();
    c.bench_function("differential/swap_responder_crash", |b| b.iter(|| differential_check(black_box(&trace))));
}

fn threshold(c: &mut Criterion) {
    let p = DtcParams::new(4, 3).unwrap();
    c.bench_function("dtc/keygen_4_3", |b| b.iter(|| run_keygen(p, &[], black_box(1))));
    let out = run_keygen(p, &[], 1).all_ok().unwrap();
    let key = out[0].1.clone();
    let shares: Vec<_> = out.into_iter().map(|(s, _)| s).collect();
    c.bench_function("dtc/sign_3_of_4", |b| b.iter(|| run_sign(p, &shares, &key, &[1, 2, 3], black_box(b"msg"), 2)));
}

fn puzzles(c: &mut Criterion) {
    let params = ConcreteParams { modulus_bits: 256, squarings_per_round: 100 };
    c.bench_function("tlp/concrete_solve_10_rounds", |b| {
        b.iter_batched(
            || ConcretePuzzle::pgen(10, b"m", params, &mut ChaCha8Rng::seed_from_u64(5)),
            |pz| {
                let mut s = pz.start();
                pz.step(&mut s, pz.steps);
                pz.get_msg(&s).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, scenarios, sweep, oracle, threshold, puzzles);
criterion_main!(benches);
