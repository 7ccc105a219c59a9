//! Standalone drivers for the threshold protocols over the simulated network.
//!
//! Every node-to-node message is relayed through a single user participant.
//! Nodes listed as crashed never start and never receive anything; `silent`
//! nodes behave the same way but are not marked crashed on the network.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::dtc::{
    DtcError, DtcMsg, DtcParams, Dest, GroupKey, KeygenSession, KeyShare, Poll, ReshareDealer, ReshareReceiver,
    SignSession,
};
use super::Signature;
use crate::clock_net::{AsyncPolicy, FaultSpec, Network, ParticipantId, Round};

/// Per-node outcome and the round it was reached.
#[derive(Clone, Debug)]
pub struct NodeOutcome<T> {
    pub result: Result<T, DtcError>,
    pub round: Round,
}

#[derive(Clone, Debug)]
pub struct RunReport<T> {
    pub invoked_at: Round,
    pub nodes: BTreeMap<u32, NodeOutcome<T>>,
}

impl<T: Clone> RunReport<T> {
    /// The common result if every reporting node succeeded.
    pub fn all_ok(&self) -> Option<Vec<T>> {
        if self.nodes.is_empty() {
            return None;
        }
        self.nodes.values().map(|o| o.result.clone().ok()).collect()
    }

    pub fn latest_round(&self) -> Round {
        self.nodes.values().map(|o| o.round).max().unwrap_or(self.invoked_at)
    }

    pub fn all_failed(&self) -> bool {
        !self.nodes.is_empty() && self.nodes.values().all(|o| o.result.is_err())
    }
}

struct Wire {
    net: Network,
    user: ParticipantId,
    old: BTreeMap<u32, ParticipantId>,
    new: BTreeMap<u32, ParticipantId>,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Side {
    Old,
    New,
}

impl Wire {
    fn new(seed: u64, old_n: usize, new_n: usize, crashed_old: &[u32], crashed_new: &[u32]) -> Self {
        let mut net = Network::new(seed, AsyncPolicy::Next);
        let user = net.register("user");
        let old = (1..=old_n as u32).map(|i| (i, net.register(&format!("old{i}")))).collect::<BTreeMap<_, _>>();
        let new = (1..=new_n as u32).map(|i| (i, net.register(&format!("new{i}")))).collect::<BTreeMap<_, _>>();
        for i in crashed_old {
            net.inject_fault(FaultSpec::CrashAt { participant: old[i], round: 0 });
        }
        for i in crashed_new {
            net.inject_fault(FaultSpec::CrashAt { participant: new[i], round: 0 });
        }
        net.tick();
        Wire { net, user, old, new }
    }

    fn send(&mut self, from: (Side, u32), out: Vec<(Dest, DtcMsg)>) {
        let src = match from.0 {
            Side::Old => self.old[&from.1],
            Side::New => self.new[&from.1],
        };
        for (dest, msg) in out {
            let dst = match (from.0, dest) {
                (Side::Old, Dest::Peer(j)) | (_, Dest::OldMember(j)) => self.old[&j],
                (Side::New, Dest::Peer(j)) | (_, Dest::NewMember(j)) => self.new[&j],
            };
            let payload = serde_json::to_vec(&(from.1, msg)).expect("message serializes");
            self.net.send_relayed("dtc", src, dst, payload, self.user).expect("registered");
        }
    }

    /// Next round's deliveries as `(side, recipient, sender index, msg)`.
    fn step(&mut self) -> Vec<(Side, u32, u32, DtcMsg)> {
        self.net.tick();
        let mut out = Vec::new();
        for env in self.net.drain_due() {
            let (from, msg): (u32, DtcMsg) = serde_json::from_slice(&env.payload).expect("message parses");
            let (side, idx) = match self.old.iter().find(|(_, p)| **p == env.dst) {
                Some((i, _)) => (Side::Old, *i),
                None => (Side::New, *self.new.iter().find(|(_, p)| **p == env.dst).expect("known").0),
            };
            out.push((side, idx, from, msg));
        }
        out
    }
}

/// Runs key generation with `crashed` nodes absent from the start.
pub fn run_keygen(params: DtcParams, crashed: &[u32], seed: u64) -> RunReport<(KeyShare, GroupKey)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut w = Wire::new(seed, params.n, 0, crashed, &[]);
    let r0 = w.net.now();
    let mut sessions = BTreeMap::new();
    for i in params.members().into_iter().filter(|i| !crashed.contains(i)) {
        let (s, out) = KeygenSession::start(i, params, r0, &mut rng);
        w.send((Side::Old, i), out);
        sessions.insert(i, s);
    }
    let mut report = RunReport { invoked_at: r0, nodes: BTreeMap::new() };
    while report.nodes.len() < sessions.len() && w.net.now() <= r0 + params.t_keygen {
        for (_, to, from, msg) in w.step() {
            if let Some(s) = sessions.get_mut(&to) {
                s.on_msg(from, &msg);
            }
        }
        let now = w.net.now();
        for (i, s) in sessions.iter_mut() {
            if report.nodes.contains_key(i) {
                continue;
            }
            match s.poll(now) {
                Poll::Pending => {}
                Poll::Done(v) => {
                    report.nodes.insert(*i, NodeOutcome { result: Ok(v), round: now });
                }
                Poll::Failed => {
                    report.nodes.insert(*i, NodeOutcome { result: Err(DtcError::KeyGenFail), round: now });
                }
            }
        }
    }
    report
}

/// Runs threshold signing among `signers`; the others never take part.
pub fn run_sign(
    params: DtcParams,
    shares: &[KeyShare],
    key: &GroupKey,
    signers: &[u32],
    msg: &[u8],
    seed: u64,
) -> RunReport<Signature> {
    let absent: Vec<u32> = params.members().into_iter().filter(|i| !signers.contains(i)).collect();
    let mut w = Wire::new(seed, params.n, 0, &absent, &[]);
    let r0 = w.net.now();
    let mut sessions = BTreeMap::new();
    for sh in shares.iter().filter(|s| signers.contains(&s.index)) {
        let (s, out) = SignSession::start(*sh, key.clone(), params.members(), params, msg, b"driver", r0);
        w.send((Side::Old, sh.index), out);
        sessions.insert(sh.index, s);
    }
    let mut report = RunReport { invoked_at: r0, nodes: BTreeMap::new() };
    let mut first = true;
    while report.nodes.len() < sessions.len() && w.net.now() <= r0 + params.t_sign {
        if !first {
            for (_, to, from, m) in w.step() {
                if let Some(s) = sessions.get_mut(&to) {
                    s.on_msg(from, &m);
                }
            }
        }
        first = false;
        let now = w.net.now();
        let mut outs = Vec::new();
        for (i, s) in sessions.iter_mut() {
            if report.nodes.contains_key(i) {
                continue;
            }
            let (out, p) = s.poll(now);
            outs.push((*i, out));
            match p {
                Poll::Pending => {}
                Poll::Done(sig) => {
                    report.nodes.insert(*i, NodeOutcome { result: Ok(sig), round: now });
                }
                Poll::Failed => {
                    report.nodes.insert(*i, NodeOutcome { result: Err(DtcError::SignFail), round: now });
                }
            }
        }
        for (i, out) in outs {
            w.send((Side::Old, i), out);
        }
    }
    report
}

/// Result of a reshare: new shares at the receivers, and which old nodes saw
/// Reshare-OK and tombstoned their share.
#[derive(Clone, Debug)]
pub struct ReshareRun {
    pub receivers: RunReport<(KeyShare, GroupKey)>,
    pub tombstoned: BTreeSet<u32>,
    pub dealers_failed: BTreeSet<u32>,
}

#[allow(clippy::too_many_arguments)]
pub fn run_reshare(
    old: DtcParams,
    shares: &[KeyShare],
    key: &GroupKey,
    new: DtcParams,
    crashed_old: &[u32],
    crashed_new: &[u32],
    seed: u64,
) -> ReshareRun {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut w = Wire::new(seed, old.n, new.n, crashed_old, crashed_new);
    let r0 = w.net.now();
    let bound = new.t_reshare;
    let mut dealers = BTreeMap::new();
    for sh in shares.iter().filter(|s| !crashed_old.contains(&s.index)) {
        let (d, out) = ReshareDealer::start(*sh, key, new, bound, r0, &mut rng);
        w.send((Side::Old, sh.index), out);
        dealers.insert(sh.index, d);
    }
    let mut receivers: BTreeMap<u32, ReshareReceiver> = new
        .members()
        .into_iter()
        .filter(|j| !crashed_new.contains(j))
        .map(|j| (j, ReshareReceiver::new(j, new, old.t, key.clone(), bound, r0)))
        .collect();
    let mut report = RunReport { invoked_at: r0, nodes: BTreeMap::new() };
    let mut tombstoned = BTreeSet::new();
    let mut dealers_failed = BTreeSet::new();
    while w.net.now() <= r0 + bound
        && (report.nodes.len() < receivers.len() || tombstoned.len() + dealers_failed.len() < dealers.len())
    {
        for (side, to, from, m) in w.step() {
            match side {
                Side::Old => {
                    if let Some(d) = dealers.get_mut(&to) {
                        d.on_msg(from, &m);
                    }
                }
                Side::New => {
                    if let Some(r) = receivers.get_mut(&to) {
                        r.on_msg(from, &m);
                    }
                }
            }
        }
        let now = w.net.now();
        let mut outs = Vec::new();
        for (j, r) in receivers.iter_mut() {
            if report.nodes.contains_key(j) {
                continue;
            }
            let (out, p) = r.poll(now);
            outs.push((*j, out));
            match p {
                Poll::Pending => {}
                Poll::Done(v) => {
                    report.nodes.insert(*j, NodeOutcome { result: Ok(v), round: now });
                }
                Poll::Failed => {
                    report.nodes.insert(*j, NodeOutcome { result: Err(DtcError::ReshareFail), round: now });
                }
            }
        }
        for (j, out) in outs {
            w.send((Side::New, j), out);
        }
        for (i, d) in dealers.iter_mut() {
            if tombstoned.contains(i) || dealers_failed.contains(i) {
                continue;
            }
            match d.poll(now) {
                Poll::Pending => {}
                Poll::Done(()) => {
                    tombstoned.insert(*i);
                }
                Poll::Failed => {
                    dealers_failed.insert(*i);
                }
            }
        }
    }
    ReshareRun { receivers: report, tombstoned, dealers_failed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::pkc_verify;

    fn p43() -> DtcParams {
        DtcParams::new(4, 3).unwrap()
    }

    #[test]
    fn keygen_then_sign() {
        let kg = run_keygen(p43(), &[], 1);
        let out = kg.all_ok().expect("keygen succeeds");
        assert!(kg.latest_round() <= kg.invoked_at + 3);
        let key = out[0].1.clone();
        assert!(out.iter().all(|(_, k)| *k == key));
        let shares: Vec<KeyShare> = out.iter().map(|o| o.0).collect();
        let run = run_sign(p43(), &shares, &key, &[1, 2, 3, 4], b"m", 2);
        let sigs = run.all_ok().expect("sign succeeds");
        assert!(pkc_verify(&key.pk, b"m", &sigs[0]));
    }

    #[test]
    fn keygen_fails_closed_with_two_crashes() {
        let kg = run_keygen(p43(), &[1, 2], 3);
        assert!(kg.all_failed());
        assert!(kg.nodes.values().all(|o| o.round == kg.invoked_at + 3));
    }
}
