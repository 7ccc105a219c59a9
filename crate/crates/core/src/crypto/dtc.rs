//! Threshold cryptography: Shamir sharing with Feldman commitments,
//! sum-of-dealings key generation, two-round threshold Schnorr signing and
//! resharing to a new committee.
//!
//! Each protocol is a session object that is fed inbound messages and polled
//! once per round. Sessions never touch the network; they return `(Dest, msg)`
//! pairs and the caller routes them.

use std::collections::BTreeMap;

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT as G;
use curve25519_dalek::ristretto::RistrettoPoint;
use curve25519_dalek::scalar::Scalar;
use curve25519_dalek::traits::Identity;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::pkc::{challenge, hash_to_scalar, hex_32, pkc_verify, PublicKey, Signature};
use crate::clock_net::Round;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DtcError {
    #[error("threshold {t} of {n} does not exceed two thirds")]
    InvalidThreshold { n: usize, t: usize },
    #[error("key generation failed")]
    KeyGenFail,
    #[error("threshold signing failed")]
    SignFail,
    #[error("reshare failed")]
    ReshareFail,
    #[error("share has been tombstoned")]
    Tombstoned,
}

/// Smallest threshold with `3t > 2n`.
pub fn threshold_for(n: usize) -> usize {
    2 * n / 3 + 1
}

/// Committee parameters and per-protocol round bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DtcParams {
    pub n: usize,
    pub t: usize,
    pub t_keygen: Round,
    pub t_sign: Round,
    pub t_reshare: Round,
}

impl DtcParams {
    pub fn new(n: usize, t: usize) -> Result<Self, DtcError> {
        if n == 0 || t > n || 3 * t <= 2 * n {
            return Err(DtcError::InvalidThreshold { n, t });
        }
        Ok(DtcParams { n, t, t_keygen: 3, t_sign: 3, t_reshare: 3 })
    }

    pub fn for_size(n: usize) -> Result<Self, DtcError> {
        Self::new(n, threshold_for(n))
    }

    pub fn f_max(&self) -> usize {
        self.n - self.t
    }

    /// Share indices `1..=n`.
    pub fn members(&self) -> Vec<u32> {
        (1..=self.n as u32).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyShare {
    pub index: u32,
    pub value: Scalar,
}

/// Public side of a shared key: the group key and every member's public share.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupKey {
    pub pk: PublicKey,
    pub public_shares: BTreeMap<u32, PublicKey>,
}

pub fn lagrange_at_zero(i: u32, set: &[u32]) -> Scalar {
    let xi = Scalar::from(i as u64);
    let mut num = Scalar::ONE;
    let mut den = Scalar::ONE;
    for &j in set {
        if j == i {
            continue;
        }
        let xj = Scalar::from(j as u64);
        num *= xj;
        den *= xj - xi;
    }
    num * den.invert()
}

pub fn interpolate_at_zero(points: &[(u32, Scalar)]) -> Scalar {
    let set: Vec<u32> = points.iter().map(|p| p.0).collect();
    points.iter().map(|&(i, v)| lagrange_at_zero(i, &set) * v).sum()
}

#[derive(Clone, Debug)]
pub struct Polynomial(pub Vec<Scalar>);

impl Polynomial {
    /// Random polynomial of the given degree with a fixed constant term.
    pub fn random<R: RngCore>(constant: Scalar, degree: usize, rng: &mut R) -> Self {
        let mut coeffs = vec![constant];
        for _ in 0..degree {
            coeffs.push(random_scalar(rng));
        }
        Polynomial(coeffs)
    }

    pub fn eval(&self, x: u32) -> Scalar {
        let x = Scalar::from(x as u64);
        self.0.iter().rev().fold(Scalar::ZERO, |acc, c| acc * x + c)
    }

    pub fn commitments(&self) -> Vec<PublicKey> {
        self.0.iter().map(|c| PublicKey::from_point(&(G * c))).collect()
    }
}

pub fn random_scalar<R: RngCore>(rng: &mut R) -> Scalar {
    let mut wide = [0u8; 64];
    rng.fill_bytes(&mut wide);
    Scalar::from_bytes_mod_order_wide(&wide)
}

/// `Σ_k C_k x^k`, or `None` if a commitment is not a valid point.
pub fn feldman_eval(commitments: &[PublicKey], x: u32) -> Option<RistrettoPoint> {
    let x = Scalar::from(x as u64);
    let mut acc = RistrettoPoint::identity();
    for c in commitments.iter().rev() {
        acc = acc * x + c.point()?;
    }
    Some(acc)
}

pub fn feldman_verify(commitments: &[PublicKey], x: u32, share: &Scalar) -> bool {
    feldman_eval(commitments, x).is_some_and(|p| p == G * share)
}

fn scalar_from(bytes: &[u8; 32]) -> Option<Scalar> {
    Option::from(Scalar::from_canonical_bytes(*bytes))
}

/// Wire messages of the threshold protocols.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DtcMsg {
    Dealing {
        commitments: Vec<PublicKey>,
        #[serde(with = "hex_32")]
        share: [u8; 32],
    },
    SignCommit {
        r: PublicKey,
    },
    SignPartial {
        signers: Vec<u32>,
        #[serde(with = "hex_32")]
        z: [u8; 32],
    },
    ReshareDeal {
        commitments: Vec<PublicKey>,
        #[serde(with = "hex_32")]
        share: [u8; 32],
    },
    ReshareConfirm {
        quorum: Vec<u32>,
        pk: PublicKey,
    },
}

/// Routing target relative to the session's committee.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Dest {
    Peer(u32),
    OldMember(u32),
    NewMember(u32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Poll<T> {
    Pending,
    Done(T),
    Failed,
}

impl<T> Poll<T> {
    pub fn is_pending(&self) -> bool {
        matches!(self, Poll::Pending)
    }
}

pub type Outbox = Vec<(Dest, DtcMsg)>;

fn broadcast(me: u32, members: &[u32], msg: &DtcMsg) -> Outbox {
    members
        .iter()
        .filter(|&&m| m != me)
        .map(|&m| (Dest::Peer(m), msg.clone()))
        .collect()
}

/// Sum-of-dealings key generation at one node.
#[derive(Clone, Debug)]
pub struct KeygenSession {
    me: u32,
    members: Vec<u32>,
    params: DtcParams,
    started: Round,
    dealings: BTreeMap<u32, (Vec<PublicKey>, Scalar)>,
    result: Poll<(KeyShare, GroupKey)>,
}

impl KeygenSession {
    pub fn start<R: RngCore>(
        me: u32,
        params: DtcParams,
        started: Round,
        rng: &mut R,
    ) -> (Self, Outbox) {
        let members = params.members();
        let poly = Polynomial::random(random_scalar(rng), params.t - 1, rng);
        let commitments = poly.commitments();
        let mut out = Vec::new();
        for &j in members.iter().filter(|&&j| j != me) {
            out.push((
                Dest::Peer(j),
                DtcMsg::Dealing { commitments: commitments.clone(), share: poly.eval(j).to_bytes() },
            ));
        }
        let mut dealings = BTreeMap::new();
        dealings.insert(me, (commitments, poly.eval(me)));
        let s = KeygenSession { me, members, params, started, dealings, result: Poll::Pending };
        (s, out)
    }

    pub fn on_msg(&mut self, from: u32, msg: &DtcMsg) {
        if !self.result.is_pending() || !self.members.contains(&from) {
            return;
        }
        if let DtcMsg::Dealing { commitments, share } = msg {
            let Some(s) = scalar_from(share) else { return };
            if commitments.len() == self.params.t && feldman_verify(commitments, self.me, &s) {
                self.dealings.entry(from).or_insert((commitments.clone(), s));
            }
        }
    }

    pub fn poll(&mut self, now: Round) -> Poll<(KeyShare, GroupKey)> {
        if !self.result.is_pending() {
            return self.result.clone();
        }
        let complete = self.dealings.len() == self.members.len();
        let cutoff = now > self.started && self.dealings.len() >= self.params.t;
        if complete || cutoff {
            self.result = self.combine().map_or(Poll::Failed, Poll::Done);
        } else if now >= self.started + self.params.t_keygen {
            self.result = Poll::Failed;
        }
        self.result.clone()
    }

    fn combine(&self) -> Option<(KeyShare, GroupKey)> {
        let mut agg = vec![RistrettoPoint::identity(); self.params.t];
        let mut value = Scalar::ZERO;
        for (comms, s) in self.dealings.values() {
            value += s;
            for (a, c) in agg.iter_mut().zip(comms) {
                *a += c.point()?;
            }
        }
        let comms: Vec<PublicKey> = agg.iter().map(PublicKey::from_point).collect();
        let public_shares = self
            .members
            .iter()
            .map(|&j| Some((j, PublicKey::from_point(&feldman_eval(&comms, j)?))))
            .collect::<Option<_>>()?;
        Some((KeyShare { index: self.me, value }, GroupKey { pk: comms[0], public_shares }))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum SignPhase {
    Commit,
    Partial { signers: Vec<u32>, r: RistrettoPoint },
}

/// Two-round threshold Schnorr signing at one node.
#[derive(Clone, Debug)]
pub struct SignSession {
    me: u32,
    members: Vec<u32>,
    params: DtcParams,
    started: Round,
    share: KeyShare,
    key: GroupKey,
    msg: Vec<u8>,
    nonce: Scalar,
    commits: BTreeMap<u32, RistrettoPoint>,
    partials: BTreeMap<u32, Scalar>,
    early: Vec<(u32, DtcMsg)>,
    phase: SignPhase,
    result: Poll<Signature>,
}

impl SignSession {
    /// `members` are the share holders taking part; `instance` separates
    /// nonces of different sessions over the same message.
    pub fn start(
        share: KeyShare,
        key: GroupKey,
        members: Vec<u32>,
        params: DtcParams,
        msg: &[u8],
        instance: &[u8],
        started: Round,
    ) -> (Self, Outbox) {
        let nonce = hash_to_scalar(&[b"dot/tnonce", &share.value.to_bytes(), instance, msg]);
        let r = G * nonce;
        let out = broadcast(share.index, &members, &DtcMsg::SignCommit { r: PublicKey::from_point(&r) });
        let mut commits = BTreeMap::new();
        commits.insert(share.index, r);
        let s = SignSession {
            me: share.index,
            members,
            params,
            started,
            share,
            key,
            msg: msg.to_vec(),
            nonce,
            commits,
            partials: BTreeMap::new(),
            early: Vec::new(),
            phase: SignPhase::Commit,
            result: Poll::Pending,
        };
        (s, out)
    }

    pub fn on_msg(&mut self, from: u32, msg: &DtcMsg) {
        if !self.result.is_pending() || !self.members.contains(&from) {
            return;
        }
        match msg {
            DtcMsg::SignCommit { r } if self.phase == SignPhase::Commit => {
                if let Some(p) = r.point() {
                    self.commits.entry(from).or_insert(p);
                }
            }
            DtcMsg::SignPartial { .. } if self.phase == SignPhase::Commit => {
                self.early.push((from, msg.clone()));
            }
            DtcMsg::SignPartial { signers, z } => {
                if let SignPhase::Partial { signers: mine, .. } = &self.phase {
                    if signers == mine && mine.contains(&from) {
                        if let Some(z) = scalar_from(z) {
                            self.partials.entry(from).or_insert(z);
                        }
                    }
                }
            }
            _ => {}
        }
    }

    pub fn poll(&mut self, now: Round) -> (Outbox, Poll<Signature>) {
        let mut out = Vec::new();
        if !self.result.is_pending() {
            return (out, self.result.clone());
        }
        if self.phase == SignPhase::Commit {
            let complete = self.commits.len() == self.members.len();
            let cutoff = now > self.started && self.commits.len() >= self.params.t;
            if complete || cutoff {
                let signers: Vec<u32> = self.commits.keys().copied().collect();
                let r: RistrettoPoint = self.commits.values().sum();
                let c = challenge(&r.compress().to_bytes(), &self.key.pk, &self.msg);
                let z = self.nonce + c * lagrange_at_zero(self.me, &signers) * self.share.value;
                self.partials.insert(self.me, z);
                out = signers
                    .iter()
                    .filter(|&&j| j != self.me)
                    .map(|&j| (Dest::Peer(j), DtcMsg::SignPartial { signers: signers.clone(), z: z.to_bytes() }))
                    .collect();
                self.phase = SignPhase::Partial { signers, r };
                for (from, m) in std::mem::take(&mut self.early) {
                    self.on_msg(from, &m);
                }
            }
        }
        if let SignPhase::Partial { signers, r } = &self.phase {
            if signers.iter().all(|j| self.partials.contains_key(j)) {
                let z: Scalar = signers.iter().map(|j| self.partials[j]).sum();
                let sig = Signature { r: r.compress().to_bytes(), z: z.to_bytes() };
                self.result = if pkc_verify(&self.key.pk, &self.msg, &sig) {
                    Poll::Done(sig)
                } else {
                    Poll::Failed
                };
                return (out, self.result.clone());
            }
        }
        if now >= self.started + self.params.t_sign {
            self.result = Poll::Failed;
        }
        (out, self.result.clone())
    }
}

/// Old-committee side of a reshare: deals its share, then waits for the new
/// committee to confirm before the share may be tombstoned.
#[derive(Clone, Debug)]
pub struct ReshareDealer {
    started: Round,
    pk: PublicKey,
    new_params: DtcParams,
    bound: Round,
    confirms: BTreeMap<u32, (Vec<u32>, PublicKey)>,
    result: Poll<()>,
}

impl ReshareDealer {
    pub fn start<R: RngCore>(
        share: KeyShare,
        key: &GroupKey,
        new_params: DtcParams,
        bound: Round,
        started: Round,
        rng: &mut R,
    ) -> (Self, Outbox) {
        let poly = Polynomial::random(share.value, new_params.t - 1, rng);
        let commitments = poly.commitments();
        let out = new_params
            .members()
            .into_iter()
            .map(|j| {
                (
                    Dest::NewMember(j),
                    DtcMsg::ReshareDeal { commitments: commitments.clone(), share: poly.eval(j).to_bytes() },
                )
            })
            .collect();
        let s = ReshareDealer {
            started,
            pk: key.pk,
            new_params,
            bound,
            confirms: BTreeMap::new(),
            result: Poll::Pending,
        };
        (s, out)
    }

    pub fn on_msg(&mut self, from_new: u32, msg: &DtcMsg) {
        if let DtcMsg::ReshareConfirm { quorum, pk } = msg {
            self.confirms.entry(from_new).or_insert((quorum.clone(), *pk));
        }
    }

    pub fn poll(&mut self, now: Round) -> Poll<()> {
        if !self.result.is_pending() {
            return self.result.clone();
        }
        if quorum_of(self.confirms.values(), self.new_params.t).is_some_and(|(_, pk)| pk == self.pk) {
            self.result = Poll::Done(());
        } else if now >= self.started + self.bound {
            self.result = Poll::Failed;
        }
        self.result.clone()
    }
}

/// The first payload reaching `t` bytewise-equal copies.
pub fn quorum_of<'a, T: PartialEq + Clone + 'a>(
    items: impl Iterator<Item = &'a T>,
    t: usize,
) -> Option<T> {
    let mut tally: Vec<(T, usize)> = Vec::new();
    for it in items {
        match tally.iter_mut().find(|(v, _)| v == it) {
            Some((_, c)) => *c += 1,
            None => tally.push((it.clone(), 1)),
        }
        if let Some((v, _)) = tally.iter().find(|(_, c)| *c >= t) {
            return Some(v.clone());
        }
    }
    None
}

/// New-committee side of a reshare.
#[derive(Clone, Debug)]
pub struct ReshareReceiver {
    me: u32,
    new_params: DtcParams,
    old_t: usize,
    old_key: GroupKey,
    bound: Round,
    started: Round,
    deals: BTreeMap<u32, (Vec<PublicKey>, Scalar)>,
    computed: Option<(Vec<u32>, KeyShare, GroupKey)>,
    confirms: BTreeMap<u32, (Vec<u32>, PublicKey)>,
    result: Poll<(KeyShare, GroupKey)>,
}

impl ReshareReceiver {
    pub fn new(me: u32, new_params: DtcParams, old_t: usize, old_key: GroupKey, bound: Round, started: Round) -> Self {
        ReshareReceiver {
            me,
            new_params,
            old_t,
            old_key,
            bound,
            started,
            deals: BTreeMap::new(),
            computed: None,
            confirms: BTreeMap::new(),
            result: Poll::Pending,
        }
    }

    /// `from` is an old-committee index for deals and a new-committee index
    /// for confirmations.
    pub fn on_msg(&mut self, from: u32, msg: &DtcMsg) {
        if !self.result.is_pending() {
            return;
        }
        match msg {
            DtcMsg::ReshareDeal { commitments, share } => {
                let Some(s) = scalar_from(share) else { return };
                let Some(y) = self.old_key.public_shares.get(&from) else { return };
                if commitments.len() == self.new_params.t
                    && commitments[0] == *y
                    && feldman_verify(commitments, self.me, &s)
                {
                    self.deals.entry(from).or_insert((commitments.clone(), s));
                }
            }
            DtcMsg::ReshareConfirm { quorum, pk } => {
                self.confirms.entry(from).or_insert((quorum.clone(), *pk));
            }
            _ => {}
        }
    }

    pub fn poll(&mut self, now: Round) -> (Outbox, Poll<(KeyShare, GroupKey)>) {
        let mut out = Vec::new();
        if !self.result.is_pending() {
            return (out, self.result.clone());
        }
        if self.computed.is_none() && self.deals.len() >= self.old_t {
            if let Some((q, share, key)) = self.compute() {
                let confirm = DtcMsg::ReshareConfirm { quorum: q.clone(), pk: key.pk };
                out = broadcast(self.me, &self.new_params.members(), &confirm);
                out.extend(self.deals.keys().map(|&i| (Dest::OldMember(i), confirm.clone())));
                self.confirms.insert(self.me, (q.clone(), key.pk));
                self.computed = Some((q, share, key));
            }
        }
        if let Some((q, share, key)) = &self.computed {
            if quorum_of(self.confirms.values(), self.new_params.t) == Some((q.clone(), key.pk)) {
                self.result = Poll::Done((*share, key.clone()));
                return (out, self.result.clone());
            }
        }
        if now >= self.started + self.bound {
            self.result = Poll::Failed;
        }
        (out, self.result.clone())
    }

    fn compute(&self) -> Option<(Vec<u32>, KeyShare, GroupKey)> {
        let q: Vec<u32> = self.deals.keys().take(self.old_t).copied().collect();
        let lambdas: Vec<Scalar> = q.iter().map(|&i| lagrange_at_zero(i, &q)).collect();
        let value: Scalar = q.iter().zip(&lambdas).map(|(i, l)| l * self.deals[i].1).sum();
        let mut pk = RistrettoPoint::identity();
        for (i, l) in q.iter().zip(&lambdas) {
            pk += self.deals[i].0[0].point()? * l;
        }
        if PublicKey::from_point(&pk) != self.old_key.pk {
            return None;
        }
        let mut public_shares = BTreeMap::new();
        for j in self.new_params.members() {
            let mut y = RistrettoPoint::identity();
            for (i, l) in q.iter().zip(&lambdas) {
                y += feldman_eval(&self.deals[i].0, j)? * l;
            }
            public_shares.insert(j, PublicKey::from_point(&y));
        }
        Some((q, KeyShare { index: self.me, value }, GroupKey { pk: self.old_key.pk, public_shares }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn threshold_rule() {
        assert_eq!(threshold_for(4), 3);
        assert_eq!(threshold_for(7), 5);
        assert_eq!(threshold_for(3), 3);
        assert!(DtcParams::new(4, 2).is_err());
        assert!(DtcParams::new(3, 2).is_err());
        assert!(DtcParams::new(4, 3).is_ok());
        for n in 1..30 {
            let p = DtcParams::for_size(n).unwrap();
            assert!(3 * p.t > 2 * n);
            assert!(3 * p.f_max() < n);
        }
    }

    #[test]
    fn lagrange_recovers_constant() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let secret = random_scalar(&mut rng);
        let poly = Polynomial::random(secret, 2, &mut rng);
        for set in [[1u32, 2, 3], [1, 2, 4], [1, 3, 4], [2, 3, 4]] {
            let pts: Vec<_> = set.iter().map(|&i| (i, poly.eval(i))).collect();
            assert_eq!(interpolate_at_zero(&pts), secret);
        }
        let pts: Vec<_> = [1u32, 2].iter().map(|&i| (i, poly.eval(i))).collect();
        assert_ne!(interpolate_at_zero(&pts), secret);
    }

    #[test]
    fn feldman_checks_shares() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let poly = Polynomial::random(random_scalar(&mut rng), 2, &mut rng);
        let c = poly.commitments();
        assert!(feldman_verify(&c, 3, &poly.eval(3)));
        assert!(!feldman_verify(&c, 3, &poly.eval(2)));
    }

    #[test]
    fn quorum_needs_t_equal_copies() {
        let v = [1, 2, 1, 3, 1];
        assert_eq!(quorum_of(v.iter(), 3), Some(1));
        assert_eq!(quorum_of(v.iter(), 4), None);
    }
}
