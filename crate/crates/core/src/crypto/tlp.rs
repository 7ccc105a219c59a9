//! Time-lock puzzles.
//!
//! [`TlpOracle`] is the ideal puzzle functionality: every puzzle is a chain of
//! `Γ + 1` random states and the hidden message is released only against the
//! last one. Solving is queued: `request_solve` records the request, the next
//! [`TlpOracle::tick`] computes it and `take_outputs` hands it back. That gives
//! exactly one chain step per solver per round when the simulation loop ticks
//! the oracle once per round.
//!
//! [`ConcretePuzzle`] is the repeated-squaring construction over an RSA
//! modulus. The generator uses the factorisation as a trapdoor; the solver has
//! to perform all `t` squarings.

use std::collections::BTreeMap;

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type TlpState = [u8; 16];

/// Puzzle handle for the ideal oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdealPuzzle {
    pub st0: TlpState,
    pub gamma: u64,
}

/// Repeated-squaring puzzle. Integers are stored big-endian.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcretePuzzle {
    pub modulus: Vec<u8>,
    pub base: Vec<u8>,
    pub steps: u64,
    pub blinded_key: Vec<u8>,
    pub ciphertext: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TlpPuzzle {
    Ideal(IdealPuzzle),
    Concrete(ConcretePuzzle),
}

/// The ideal puzzle functionality. One instance serves a whole simulation.
#[derive(Clone, Debug)]
pub struct TlpOracle {
    rng: ChaCha20Rng,
    next: BTreeMap<TlpState, TlpState>,
    finals: BTreeMap<TlpState, (TlpState, Vec<u8>)>,
    inbox: Vec<(u64, TlpState)>,
    outbox: BTreeMap<u64, Vec<(TlpState, TlpState)>>,
}

impl TlpOracle {
    pub fn new(seed: u64) -> Self {
        TlpOracle {
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0x746c_7000),
            next: BTreeMap::new(),
            finals: BTreeMap::new(),
            inbox: Vec::new(),
            outbox: BTreeMap::new(),
        }
    }

    fn fresh(&mut self) -> TlpState {
        let mut s = [0u8; 16];
        self.rng.fill_bytes(&mut s);
        s
    }

    /// Registers a fresh chain of `gamma + 1` states hiding `msg`.
    pub fn pgen(&mut self, gamma: u64, msg: &[u8]) -> IdealPuzzle {
        let st0 = self.fresh();
        let mut cur = st0;
        for _ in 0..gamma {
            let nxt = self.fresh();
            self.next.insert(cur, nxt);
            cur = nxt;
        }
        self.finals.insert(cur, (st0, msg.to_vec()));
        IdealPuzzle { st0, gamma }
    }

    /// One chain step, computed immediately. Unknown states start a fresh
    /// random chain.
    pub fn solve_step(&mut self, st: &TlpState) -> TlpState {
        if let Some(n) = self.next.get(st) {
            return *n;
        }
        let n = self.fresh();
        self.next.insert(*st, n);
        n
    }

    /// Returns the message iff `st` is the final state of `puzzle`'s chain.
    pub fn get_msg(&self, puzzle: &IdealPuzzle, st: &TlpState) -> Option<Vec<u8>> {
        match self.finals.get(st) {
            Some((st0, msg)) if *st0 == puzzle.st0 => Some(msg.clone()),
            _ => None,
        }
    }

    /// Queues a solve request on behalf of `solver`.
    pub fn request_solve(&mut self, solver: u64, st: TlpState) {
        self.inbox.push((solver, st));
    }

    /// Processes every queued request.
    pub fn tick(&mut self) {
        let pending = std::mem::take(&mut self.inbox);
        for (solver, st) in pending {
            let n = self.solve_step(&st);
            self.outbox.entry(solver).or_default().push((st, n));
        }
    }

    pub fn take_outputs(&mut self, solver: u64) -> Vec<(TlpState, TlpState)> {
        self.outbox.remove(&solver).unwrap_or_default()
    }
}

/// Parameters for the concrete construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcreteParams {
    pub modulus_bits: u64,
    pub squarings_per_round: u64,
}

impl Default for ConcreteParams {
    fn default() -> Self {
        ConcreteParams { modulus_bits: 512, squarings_per_round: 1000 }
    }
}

/// Solver progress through a concrete puzzle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConcreteSolver {
    pub x: BigUint,
    pub done: u64,
}

impl ConcretePuzzle {
    /// Generates a puzzle that needs `gamma * squarings_per_round` squarings.
    pub fn pgen<R: RngCore>(gamma: u64, msg: &[u8], params: ConcreteParams, rng: &mut R) -> Self {
        let half = (params.modulus_bits / 2).max(16);
        let (p, q) = loop {
            let p = random_prime(half, rng);
            let q = random_prime(half, rng);
            if p != q {
                break (p, q);
            }
        };
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        let steps = gamma * params.squarings_per_round;
        let base = loop {
            let a = rng.gen_biguint_below(&n);
            if a > BigUint::one() {
                break a;
            }
        };
        let e = BigUint::from(2u32).modpow(&BigUint::from(steps), &phi);
        let b = base.modpow(&e, &n);
        let key = rng.gen_biguint_below(&n);
        let blinded = (&key + &b) % &n;
        ConcretePuzzle {
            modulus: n.to_bytes_be(),
            base: base.to_bytes_be(),
            steps,
            blinded_key: blinded.to_bytes_be(),
            ciphertext: xor_keystream(&key, msg),
        }
    }

    pub fn modulus(&self) -> BigUint {
        BigUint::from_bytes_be(&self.modulus)
    }

    pub fn start(&self) -> ConcreteSolver {
        ConcreteSolver { x: BigUint::from_bytes_be(&self.base), done: 0 }
    }

    /// Performs up to `squarings` squarings.
    pub fn step(&self, solver: &mut ConcreteSolver, squarings: u64) {
        let n = self.modulus();
        let todo = squarings.min(self.steps - solver.done);
        for _ in 0..todo {
            solver.x = (&solver.x * &solver.x) % &n;
        }
        solver.done += todo;
    }

    /// Message recovery once all squarings are done.
    pub fn get_msg(&self, solver: &ConcreteSolver) -> Option<Vec<u8>> {
        if solver.done != self.steps {
            return None;
        }
        Some(self.open_with(&solver.x))
    }

    /// Unblinds the key with a claimed value of `a^(2^t) mod N`.
    pub fn open_with(&self, power: &BigUint) -> Vec<u8> {
        let n = self.modulus();
        let blinded = BigUint::from_bytes_be(&self.blinded_key);
        let key = (blinded + &n - (power % &n)) % &n;
        xor_keystream(&key, &self.ciphertext)
    }
}

fn xor_keystream(key: &BigUint, data: &[u8]) -> Vec<u8> {
    let kb = key.to_bytes_be();
    let mut out = Vec::with_capacity(data.len());
    for (i, chunk) in data.chunks(32).enumerate() {
        let mut h = Sha256::new();
        h.update(b"dot/tlp");
        h.update(&kb);
        h.update((i as u64).to_be_bytes());
        let block = h.finalize();
        out.extend(chunk.iter().zip(block.iter()).map(|(a, b)| a ^ b));
    }
    out
}

fn random_prime<R: RngCore>(bits: u64, rng: &mut R) -> BigUint {
    loop {
        let mut c = rng.gen_biguint(bits);
        c.set_bit(bits - 1, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, 24, rng) {
            return c;
        }
    }
}

/// Miller-Rabin with random bases.
pub fn is_probable_prime<R: RngCore>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for small in [2u32, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let s = BigUint::from(small);
        if *n == s {
            return true;
        }
        if (n % &s).is_zero() {
            return false;
        }
    }
    let n1 = n - 1u32;
    let r = n1.trailing_zeros().unwrap_or(0);
    let d = &n1 >> r;
    'outer: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n1 {
            continue;
        }
        for _ in 1..r {
            x = x.modpow(&two, n);
            if x == n1 {
                continue 'outer;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gamma_is_immediately_open() {
        let mut o = TlpOracle::new(1);
        let p = o.pgen(0, b"m");
        assert_eq!(o.get_msg(&p, &p.st0), Some(b"m".to_vec()));
    }

    #[test]
    fn chain_of_three() {
        let mut o = TlpOracle::new(2);
        let p = o.pgen(3, b"msg");
        let s1 = o.solve_step(&p.st0);
        let s2 = o.solve_step(&s1);
        let s3 = o.solve_step(&s2);
        assert_eq!(o.get_msg(&p, &s1), None);
        assert_eq!(o.get_msg(&p, &s2), None);
        assert_eq!(o.get_msg(&p, &s3), Some(b"msg".to_vec()));
    }

    #[test]
    fn unknown_state_starts_fresh_chain() {
        let mut o = TlpOracle::new(3);
        let p = o.pgen(1, b"x");
        let bogus = [9u8; 16];
        let n = o.solve_step(&bogus);
        assert_eq!(o.solve_step(&bogus), n);
        assert_eq!(o.get_msg(&p, &n), None);
    }

    #[test]
    fn final_state_of_other_puzzle_does_not_open() {
        let mut o = TlpOracle::new(4);
        let a = o.pgen(0, b"a");
        let b = o.pgen(0, b"b");
        assert_eq!(o.get_msg(&a, &b.st0), None);
    }

    #[test]
    fn queued_solving_needs_a_tick() {
        let mut o = TlpOracle::new(5);
        let p = o.pgen(1, b"q");
        o.request_solve(7, p.st0);
        assert!(o.take_outputs(7).is_empty());
        o.tick();
        let out = o.take_outputs(7);
        assert_eq!(out.len(), 1);
        assert_eq!(o.get_msg(&p, &out[0].1), Some(b"q".to_vec()));
    }

    #[test]
    fn miller_rabin_agrees_with_trial_division() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for n in 0u32..2000 {
            let trial = n >= 2 && (2..n).take_while(|d| d * d <= n).all(|d| n % d != 0);
            assert_eq!(is_probable_prime(&BigUint::from(n), 16, &mut rng), trial, "n={n}");
        }
    }
}
