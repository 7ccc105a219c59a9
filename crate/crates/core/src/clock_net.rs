//! Round clock, the adversary-scheduled asynchronous channel, the one-round
//! synchronous channel, fault injection and the trace log.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub type Round = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParticipantId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NetError {
    #[error("unknown participant {0:?}")]
    UnknownParticipant(ParticipantId),
    #[error("unknown envelope {0}")]
    UnknownEnvelope(u64),
    #[error("envelope {0} already delivered")]
    AlreadyDelivered(u64),
    #[error("delivery round {round} not after send round {sent_at}")]
    RoundNotAfterSend { round: Round, sent_at: Round },
    #[error("envelope {0} cannot be deferred forever without a fault covering it")]
    InfiniteDelayWithoutFault(u64),
    #[error("envelope {0} is not on the asynchronous channel")]
    NotSchedulable(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Async,
    Sync,
    Local,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub env_id: u64,
    pub sid: String,
    pub src: ParticipantId,
    pub dst: ParticipantId,
    pub payload: Vec<u8>,
    pub sent_at: Round,
    pub deliver_at: Option<Round>,
    pub blocked: bool,
    pub channel: Channel,
    /// Relaying user, when the message travels through one.
    pub via: Option<ParticipantId>,
    pub delivered: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultSpec {
    CrashAt { participant: ParticipantId, round: Round },
    BlockChannel { src: ParticipantId, dst: ParticipantId, from: Round },
    Delay { env_id: u64, until: Round },
}

/// What the adversary learns about every asynchronous send.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leak {
    pub sid: String,
    pub src: ParticipantId,
    pub dst: ParticipantId,
    pub len: usize,
}

/// Default delivery choice for asynchronous envelopes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum AsyncPolicy {
    #[default]
    Next,
    Random { max_delay: Round },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub round: Round,
    pub kind: String,
    pub sid: String,
    pub src: String,
    pub dst: String,
    pub detail: Value,
}

/// Append-only event log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn push(&mut self, round: Round, kind: &str, sid: &str, src: &str, dst: &str, detail: Value) {
        self.events.push(TraceEvent {
            round,
            kind: kind.to_string(),
            sid: sid.to_string(),
            src: src.to_string(),
            dst: dst.to_string(),
            detail,
        });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(s: &str) -> Result<Self, serde_json::Error> {
        let events = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Trace { events })
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceEvent> + 'a {
        self.events.iter().filter(move |e| e.kind == kind)
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    now: Round,
    names: Vec<String>,
    envelopes: Vec<Envelope>,
    pending: BTreeSet<u64>,
    leaks: Vec<Leak>,
    crashes: BTreeMap<ParticipantId, Round>,
    blocks: Vec<(ParticipantId, ParticipantId, Round)>,
    delays: BTreeMap<u64, Round>,
    policy: AsyncPolicy,
    rng: ChaCha20Rng,
    pub trace: Trace,
}

impl Network {
    pub fn new(seed: u64, policy: AsyncPolicy) -> Self {
        Network {
            now: 0,
            names: Vec::new(),
            envelopes: Vec::new(),
            pending: BTreeSet::new(),
            leaks: Vec::new(),
            crashes: BTreeMap::new(),
            blocks: Vec::new(),
            delays: BTreeMap::new(),
            policy,
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0x6e65_7400),
            trace: Trace::default(),
        }
    }

    pub fn register(&mut self, name: &str) -> ParticipantId {
        self.names.push(name.to_string());
        ParticipantId(self.names.len() as u32 - 1)
    }

    pub fn name(&self, p: ParticipantId) -> &str {
        self.names.get(p.0 as usize).map(String::as_str).unwrap_or("?")
    }

    pub fn lookup(&self, name: &str) -> Option<ParticipantId> {
        self.names.iter().position(|n| n == name).map(|i| ParticipantId(i as u32))
    }

    pub fn participants(&self) -> impl Iterator<Item = ParticipantId> {
        (0..self.names.len() as u32).map(ParticipantId)
    }

    pub fn now(&self) -> Round {
        self.now
    }

    pub fn leaks(&self) -> &[Leak] {
        &self.leaks
    }

    pub fn envelope(&self, env_id: u64) -> Option<&Envelope> {
        env_id.checked_sub(1).and_then(|i| self.envelopes.get(i as usize))
    }

    pub fn envelopes(&self) -> &[Envelope] {
        &self.envelopes
    }

    pub fn crash_round(&self, p: ParticipantId) -> Option<Round> {
        self.crashes.get(&p).copied()
    }

    pub fn is_crashed(&self, p: ParticipantId, round: Round) -> bool {
        self.crashes.get(&p).is_some_and(|&r| round >= r)
    }

    /// Advances the clock by one round and returns it. Deliveries are pulled
    /// separately with [`Network::drain_due`].
    pub fn tick(&mut self) -> Round {
        self.now += 1;
        self.now
    }

    fn check(&self, p: ParticipantId) -> Result<(), NetError> {
        if (p.0 as usize) < self.names.len() {
            Ok(())
        } else {
            Err(NetError::UnknownParticipant(p))
        }
    }

    fn enqueue(
        &mut self,
        channel: Channel,
        sid: &str,
        src: ParticipantId,
        dst: ParticipantId,
        payload: Vec<u8>,
        via: Option<ParticipantId>,
    ) -> Result<u64, NetError> {
        self.check(src)?;
        self.check(dst)?;
        let env_id = self.envelopes.len() as u64 + 1;
        let deliver_at = match channel {
            Channel::Local => self.now,
            Channel::Sync => self.now + 1,
            Channel::Async => match self.delays.get(&env_id) {
                Some(&until) if until > self.now => until,
                _ => match self.policy {
                    AsyncPolicy::Next => self.now + 1,
                    AsyncPolicy::Random { max_delay } => self.now + self.rng.gen_range(1..=max_delay.max(1)),
                },
            },
        };
        let silenced = self.is_crashed(src, self.now) || via.is_some_and(|u| self.is_crashed(u, self.now));
        if channel == Channel::Async {
            self.leaks.push(Leak { sid: sid.to_string(), src, dst, len: payload.len() });
        }
        let (sn, dn) = (self.name(src).to_string(), self.name(dst).to_string());
        let detail = serde_json::json!({
                "env_id": env_id,
                "channel": channel,
                "len": payload.len(),
                "deliver_at": deliver_at,
                "via": via.map(|u| self.name(u).to_string()),
                "silenced": silenced,
        });
        self.trace.push(self.now, "net.send", sid, &sn, &dn, detail);
        self.envelopes.push(Envelope {
            env_id,
            sid: sid.to_string(),
            src,
            dst,
            payload,
            sent_at: self.now,
            deliver_at: Some(deliver_at),
            blocked: silenced,
            channel,
            via,
            delivered: false,
        });
        if !silenced {
            self.pending.insert(env_id);
        }
        Ok(env_id)
    }

    pub fn send_async(&mut self, sid: &str, src: ParticipantId, dst: ParticipantId, payload: Vec<u8>) -> Result<u64, NetError> {
        self.enqueue(Channel::Async, sid, src, dst, payload, None)
    }

    /// Asynchronous send that physically travels through the relaying user.
    pub fn send_relayed(
        &mut self,
        sid: &str,
        src: ParticipantId,
        dst: ParticipantId,
        payload: Vec<u8>,
        via: ParticipantId,
    ) -> Result<u64, NetError> {
        self.check(via)?;
        self.enqueue(Channel::Async, sid, src, dst, payload, Some(via))
    }

    pub fn send_sync(&mut self, sid: &str, src: ParticipantId, dst: ParticipantId, payload: Vec<u8>) -> Result<u64, NetError> {
        self.enqueue(Channel::Sync, sid, src, dst, payload, None)
    }

    /// Host/enclave call completing within the current round.
    pub fn send_local(&mut self, sid: &str, src: ParticipantId, dst: ParticipantId, payload: Vec<u8>) -> Result<u64, NetError> {
        self.enqueue(Channel::Local, sid, src, dst, payload, None)
    }

    fn covered_by_fault(&self, e: &Envelope, at: Round) -> bool {
        self.is_crashed(e.dst, at)
            || e.via.is_some_and(|u| self.is_crashed(u, at))
            || self
                .blocks
                .iter()
                .any(|&(s, d, from)| e.channel == Channel::Async && s == e.src && d == e.dst && at >= from)
    }

    /// Fixes the delivery round of a pending asynchronous envelope. `None`
    /// means never, which is only allowed when a crash or block fault
    /// already covers the envelope.
    pub fn adversary_set_delivery(&mut self, env_id: u64, round: Option<Round>) -> Result<(), NetError> {
        let e = self.envelope(env_id).ok_or(NetError::UnknownEnvelope(env_id))?.clone();
        if e.delivered {
            return Err(NetError::AlreadyDelivered(env_id));
        }
        if e.channel != Channel::Async {
            return Err(NetError::NotSchedulable(env_id));
        }
        let idx = env_id as usize - 1;
        match round {
            Some(r) if r <= e.sent_at => Err(NetError::RoundNotAfterSend { round: r, sent_at: e.sent_at }),
            Some(r) => {
                self.envelopes[idx].deliver_at = Some(r);
                Ok(())
            }
            None if self.covered_by_fault(&e, self.now.max(e.sent_at + 1)) => {
                self.envelopes[idx].deliver_at = None;
                self.envelopes[idx].blocked = true;
                self.pending.remove(&env_id);
                Ok(())
            }
            None => Err(NetError::InfiniteDelayWithoutFault(env_id)),
        }
    }

    pub fn inject_fault(&mut self, spec: FaultSpec) {
        self.trace.push(self.now, "fault.inject", "", "", "", serde_json::to_value(&spec).unwrap_or(Value::Null));
        match spec {
            FaultSpec::CrashAt { participant, round } => {
                let r = self.crashes.entry(participant).or_insert(round);
                *r = (*r).min(round);
            }
            FaultSpec::BlockChannel { src, dst, from } => self.blocks.push((src, dst, from)),
            FaultSpec::Delay { env_id, until } => {
                self.delays.insert(env_id, until);
                if let Some(e) = env_id.checked_sub(1).and_then(|i| self.envelopes.get_mut(i as usize)) {
                    if !e.delivered && e.channel == Channel::Async && until > e.sent_at {
                        e.deliver_at = Some(until);
                    }
                }
            }
        }
    }

    /// Removes and returns every envelope due now, in ascending `env_id`.
    /// Envelopes hit by a crash or block fault are marked blocked instead.
    pub fn drain_due(&mut self) -> Vec<Envelope> {
        let now = self.now;
        let due: Vec<u64> = self
            .pending
            .iter()
            .copied()
            .filter(|id| self.envelopes[*id as usize - 1].deliver_at.is_some_and(|r| r <= now))
            .collect();
        let mut out = Vec::new();
        for id in due {
            self.pending.remove(&id);
            let e = self.envelopes[id as usize - 1].clone();
            if self.covered_by_fault(&e, now) {
                self.envelopes[id as usize - 1].blocked = true;
                let (sn, dn) = (self.name(e.src).to_string(), self.name(e.dst).to_string());
                self.trace.push(now, "net.blocked", &e.sid, &sn, &dn, serde_json::json!({"env_id": id}));
                continue;
            }
            self.envelopes[id as usize - 1].delivered = true;
            out.push(e);
        }
        out
    }

    /// Asynchronous envelopes not yet delivered or blocked.
    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net2() -> (Network, ParticipantId, ParticipantId) {
        let mut n = Network::new(1, AsyncPolicy::Next);
        let a = n.register("a");
        let b = n.register("b");
        (n, a, b)
    }

    fn run_to(n: &mut Network, r: Round) -> Vec<(Round, u64)> {
        let mut got = Vec::new();
        while n.now() < r {
            let now = n.tick();
            got.extend(n.drain_due().into_iter().map(|e| (now, e.env_id)));
        }
        got
    }

    #[test]
    fn empty_tick() {
        let (mut n, _, _) = net2();
        assert_eq!(n.tick(), 1);
        assert!(n.drain_due().is_empty());
    }

    #[test]
    fn sync_takes_one_round() {
        let (mut n, a, b) = net2();
        run_to(&mut n, 3);
        let id = n.send_sync("s", a, b, vec![1]).unwrap();
        assert_eq!(run_to(&mut n, 6), vec![(4, id)]);
    }

    #[test]
    fn async_schedule_and_leak() {
        let (mut n, a, b) = net2();
        run_to(&mut n, 3);
        let id = n.send_async("s1", a, b, vec![0; 5]).unwrap();
        let id2 = n.send_async("s1", b, a, vec![0; 2]).unwrap();
        assert_ne!(id, id2);
        assert_eq!(n.leaks()[0], Leak { sid: "s1".into(), src: a, dst: b, len: 5 });
        assert_eq!(n.leaks()[1].len, 2);
        n.adversary_set_delivery(id, Some(9)).unwrap();
        assert_eq!(run_to(&mut n, 10), vec![(4, id2), (9, id)]);
        assert_eq!(n.adversary_set_delivery(id, Some(12)), Err(NetError::AlreadyDelivered(id)));
    }

    #[test]
    fn schedule_errors() {
        let (mut n, a, b) = net2();
        run_to(&mut n, 3);
        let id = n.send_async("s", a, b, vec![]).unwrap();
        assert!(matches!(n.adversary_set_delivery(id, Some(3)), Err(NetError::RoundNotAfterSend { .. })));
        assert_eq!(n.adversary_set_delivery(id, None), Err(NetError::InfiniteDelayWithoutFault(id)));
        n.inject_fault(FaultSpec::CrashAt { participant: b, round: 4 });
        assert_eq!(n.adversary_set_delivery(id, None), Ok(()));
        assert!(n.envelope(id).unwrap().blocked);
        let s = n.send_sync("s", a, b, vec![]).unwrap();
        assert_eq!(n.adversary_set_delivery(s, Some(9)), Err(NetError::NotSchedulable(s)));
    }

    #[test]
    fn unknown_participant() {
        let (mut n, a, _) = net2();
        assert_eq!(
            n.send_async("s", a, ParticipantId(9), vec![]),
            Err(NetError::UnknownParticipant(ParticipantId(9)))
        );
    }

    #[test]
    fn crash_suppresses_both_directions() {
        let (mut n, a, b) = net2();
        n.inject_fault(FaultSpec::CrashAt { participant: b, round: 2 });
        n.send_sync("s", a, b, vec![]).unwrap();
        assert_eq!(run_to(&mut n, 1), vec![(1, 1)]);
        n.send_sync("s", a, b, vec![]).unwrap();
        run_to(&mut n, 2);
        let id = n.send_async("s", b, a, vec![]).unwrap();
        assert!(n.envelope(id).unwrap().blocked);
        assert!(run_to(&mut n, 5).is_empty());
    }

    #[test]
    fn block_channel_and_delay_fault() {
        let (mut n, a, b) = net2();
        n.inject_fault(FaultSpec::BlockChannel { src: a, dst: b, from: 1 });
        n.inject_fault(FaultSpec::Delay { env_id: 2, until: 20 });
        let blocked = n.send_async("s", a, b, vec![]).unwrap();
        let delayed = n.send_async("s", b, a, vec![]).unwrap();
        assert_eq!(run_to(&mut n, 25), vec![(20, delayed)]);
        assert!(n.envelope(blocked).unwrap().blocked);
    }

    #[test]
    fn local_delivers_same_round() {
        let (mut n, a, b) = net2();
        n.tick();
        let id = n.send_local("s", a, b, vec![]).unwrap();
        assert_eq!(n.drain_due().into_iter().map(|e| e.env_id).collect::<Vec<_>>(), vec![id]);
    }

    #[test]
    fn trace_jsonl_roundtrip() {
        let (mut n, a, b) = net2();
        n.send_async("s", a, b, vec![1, 2]).unwrap();
        let text = n.trace.to_jsonl();
        assert_eq!(Trace::from_jsonl(&text).unwrap(), n.trace);
    }
}
