//! Threshold trusted entity: each user's keys live as shares across a
//! committee of nodes. Deposit runs key generation, backup runs threshold
//! signing, payment reshares to the payee's committee and a swap chains a
//! reshare, two nested signatures and a reshare back.
//!
//! Nodes never talk directly: every node-to-node message is relayed by the
//! sending committee's user over the asynchronous channel.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::clock_net::{Channel, Envelope, ParticipantId, Round};
use crate::crypto::dtc::{
    quorum_of, DtcMsg, DtcParams, Dest, GroupKey, KeyShare, KeygenSession, Outbox, Poll, ReshareDealer,
    ReshareReceiver, SignSession,
};
use crate::crypto::{pkc_verify, PublicKey, Signature};
use crate::ledger::{signing_bytes, AssetId, LedgerKind, LedgerTx};
use crate::protocol::{
    digest_hex, encode_share, swap_ok_bytes, BackupArtifact, LockState, Msg, PayProcBody, SwapOptiBody,
    SwapProcBody,
};
use crate::te_tee::backup_timing;
use crate::world::{Ctx, Role};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeBehaviour {
    #[default]
    Honest,
    /// Never sends or processes anything.
    Silent,
    /// Sends a different release round to every destination in handoffs
    /// and confirmations.
    Equivocate,
}

#[derive(Clone, Debug)]
pub struct NodeAsset {
    pub aid: AssetId,
    pub share: KeyShare,
    pub key: GroupKey,
    pub t_release: Round,
    pub state: LockState,
    pub backed: bool,
    /// Set once the share was handed to another committee.
    pub tombstoned: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeAssetView {
    pub aid: AssetId,
    pub index: u32,
    pub pk: PublicKey,
    pub t_release: Round,
    pub state: LockState,
    pub tombstoned: bool,
}

/// Collects one payload per sender and fires once, on the first payload
/// with `threshold` bytewise-equal copies.
#[derive(Clone, Debug)]
pub struct QuorumTracker<T> {
    threshold: usize,
    received: BTreeMap<u32, T>,
    fired: bool,
}

impl<T: Clone + PartialEq> QuorumTracker<T> {
    pub fn new(threshold: usize) -> Self {
        QuorumTracker { threshold, received: BTreeMap::new(), fired: false }
    }

    pub fn insert(&mut self, from: u32, v: T) {
        self.received.entry(from).or_insert(v);
    }

    pub fn count(&self) -> usize {
        self.received.len()
    }

    pub fn peek(&self) -> Option<T> {
        quorum_of(self.received.values(), self.threshold)
    }

    pub fn check(&mut self) -> Option<T> {
        if self.fired {
            return None;
        }
        let q = self.peek();
        self.fired = q.is_some();
        q
    }
}

#[derive(Clone, Debug)]
enum Proto {
    Keygen(KeygenSession),
    Sign(SignSession),
    Dealer(ReshareDealer),
    Receiver(ReshareReceiver),
}

#[derive(Clone, Debug)]
struct Instance {
    sid: String,
    tag: &'static str,
    other: Option<String>,
    proto: Proto,
}

enum Outcome {
    Key(KeyShare, GroupKey),
    Sig(Signature),
    Dealt,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Waiting,
    Running,
    Done,
    Aborted,
}

#[derive(Clone, Debug)]
enum Flow {
    Deposit { aid: AssetId, release: Round },
    Backup { aid: AssetId, pk_r: PublicKey, release: Round },
    Exit { aid: AssetId, recipient: PublicKey },
    PayOut { aid: AssetId },
    PayIn { aid: AssetId, payer: String, check_at: Round, stage: Stage, release: Round },
    SwapInit { aid_a: AssetId, aid_b: AssetId, responder: String, stage: Stage, release_b: Round },
    SwapResp(Box<SwapResp>),
}

#[derive(Clone, Debug)]
struct SwapResp {
    aid_a: AssetId,
    aid_b: AssetId,
    pk_a2: PublicKey,
    pk_b2: PublicKey,
    initiator: String,
    check_at: Round,
    stage: Stage,
    t_prime: Round,
    m1: Option<LedgerTx>,
}

/// Static configuration shared by every node of a simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub params: DtcParams,
    pub delta: Round,
    pub ledger: LedgerKind,
    pub skip_margin_check: bool,
}

#[derive(Clone, Debug)]
pub struct NodeActor {
    pub id: ParticipantId,
    pub party: String,
    pub index: u32,
    pub behaviour: NodeBehaviour,
    pub cfg: NodeConfig,
    assets: BTreeMap<AssetId, NodeAsset>,
    seen_sids: BTreeSet<String>,
    instances: BTreeMap<String, Instance>,
    closed: BTreeSet<String>,
    early: BTreeMap<String, Vec<(u32, DtcMsg)>>,
    flows: BTreeMap<String, Flow>,
    pay_procs: BTreeMap<String, QuorumTracker<(String, PayProcBody)>>,
    swap_procs: BTreeMap<String, QuorumTracker<(String, SwapProcBody)>>,
    optis: BTreeMap<String, QuorumTracker<(String, SwapOptiBody)>>,
    swap_oks: BTreeMap<String, QuorumTracker<String>>,
    rng: ChaCha20Rng,
}

impl NodeActor {
    pub fn new(id: ParticipantId, party: &str, index: u32, behaviour: NodeBehaviour, cfg: NodeConfig, seed: u64) -> Self {
        NodeActor {
            id,
            party: party.to_string(),
            index,
            behaviour,
            cfg,
            assets: BTreeMap::new(),
            seen_sids: BTreeSet::new(),
            instances: BTreeMap::new(),
            closed: BTreeSet::new(),
            early: BTreeMap::new(),
            flows: BTreeMap::new(),
            pay_procs: BTreeMap::new(),
            swap_procs: BTreeMap::new(),
            optis: BTreeMap::new(),
            swap_oks: BTreeMap::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn asset(&self, aid: &AssetId) -> Option<&NodeAsset> {
        self.assets.get(aid)
    }

    pub fn dump(&self) -> Vec<NodeAssetView> {
        self.assets
            .values()
            .map(|a| NodeAssetView {
                aid: a.aid.clone(),
                index: a.share.index,
                pk: a.key.pk,
                t_release: a.t_release,
                state: a.state,
                tombstoned: a.tombstoned,
            })
            .collect()
    }

    fn t(&self) -> usize {
        self.cfg.params.t
    }

    fn skew(&self, release: Round, dst: u32) -> Round {
        match self.behaviour {
            NodeBehaviour::Equivocate => release + dst as Round,
            _ => release,
        }
    }

    fn fresh(&mut self, sid: &str) -> bool {
        self.seen_sids.insert(sid.to_string())
    }

    fn usable(&self, aid: &AssetId) -> Option<&NodeAsset> {
        self.assets.get(aid).filter(|a| a.state == LockState::Unlocked && !a.tombstoned)
    }

    fn step(&self, ctx: &mut Ctx, sid: &str, op: &str, step: &str, party: &str, detail: serde_json::Value) {
        let mut d = json!({"op": op, "step": step, "party": party, "group": self.party, "node": self.index});
        if let (Some(m), serde_json::Value::Object(extra)) = (d.as_object_mut(), detail) {
            m.extend(extra);
        }
        let name = ctx.net.name(self.id).to_string();
        ctx.log("dtc.step", sid, &name, "", d);
    }

    fn to_user(&self, ctx: &mut Ctx, sid: &str, msg: &Msg) {
        let dir = ctx.dir;
        if let Some(p) = dir.party(&self.party) {
            ctx.send(Channel::Sync, sid, self.id, p.user, msg);
        }
    }

    fn abort(&self, ctx: &mut Ctx, sid: &str, op: &str, aid: &AssetId, reason: &str) {
        let name = ctx.net.name(self.id).to_string();
        ctx.log("dtc.abort", sid, &name, "", json!({"op": op, "aid": aid, "reason": reason, "group": self.party, "node": self.index}));
        self.to_user(ctx, sid, &Msg::OpAbort { op: op.to_string(), aid: aid.clone(), reason: reason.to_string() });
    }

    fn to_node(&self, ctx: &mut Ctx, sid: &str, group: &str, j: u32, msg: &Msg) {
        let dir = ctx.dir;
        let (Some(g), Some(me)) = (dir.party(group), dir.party(&self.party)) else { return };
        if let Some(&dst) = g.nodes.get(&j) {
            ctx.send_relayed(sid, self.id, dst, me.user, msg);
        }
    }

    fn group_members(&self, ctx: &Ctx, group: &str) -> Vec<u32> {
        ctx.dir.party(group).map(|p| p.nodes.keys().copied().collect()).unwrap_or_default()
    }

    fn route(&self, ctx: &mut Ctx, inst: &str, sid: &str, other: Option<&str>, out: Outbox) {
        for (dest, m) in out {
            let (group, j) = match dest {
                Dest::Peer(j) => (self.party.as_str(), j),
                Dest::NewMember(j) | Dest::OldMember(j) => match other {
                    Some(o) => (o, j),
                    None => continue,
                },
            };
            let msg = Msg::Dtc { instance: inst.to_string(), from: self.index, msg: m };
            self.to_node(ctx, sid, group, j, &msg);
        }
    }

    fn open(&mut self, ctx: &mut Ctx, sid: &str, tag: &'static str, other: Option<String>, proto: Proto, out: Outbox) {
        let name = format!("{sid}/{tag}");
        self.route(ctx, &name, sid, other.as_deref(), out);
        let mut inst = Instance { sid: sid.to_string(), tag, other, proto };
        for (from, m) in self.early.remove(&name).unwrap_or_default() {
            feed(&mut inst.proto, from, &m);
        }
        self.instances.insert(name, inst);
    }

    fn start_sign(&mut self, ctx: &mut Ctx, sid: &str, tag: &'static str, aid: &AssetId, msg: &[u8]) -> bool {
        let Some(a) = self.assets.get(aid) else { return false };
        let (share, key) = (a.share, a.key.clone());
        let inst = format!("{sid}/{tag}");
        let p = self.cfg.params;
        let (s, out) = SignSession::start(share, key, p.members(), p, msg, inst.as_bytes(), ctx.now);
        self.open(ctx, sid, tag, None, Proto::Sign(s), out);
        true
    }

    fn start_dealer(&mut self, ctx: &mut Ctx, sid: &str, tag: &'static str, aid: &AssetId, to: &str) {
        let Some(a) = self.assets.get(aid) else { return };
        let (share, key) = (a.share, a.key.clone());
        let p = self.cfg.params;
        let (d, out) = ReshareDealer::start(share, &key, p, p.t_reshare, ctx.now, &mut self.rng);
        self.open(ctx, sid, tag, Some(to.to_string()), Proto::Dealer(d), out);
    }

    fn start_receiver(&mut self, ctx: &mut Ctx, sid: &str, tag: &'static str, old_key: GroupKey, from: &str) {
        let p = self.cfg.params;
        let r = ReshareReceiver::new(self.index, p, p.t, old_key, p.t_reshare, ctx.now);
        self.open(ctx, sid, tag, Some(from.to_string()), Proto::Receiver(r), Vec::new());
    }

    fn sender(&self, ctx: &Ctx, env: &Envelope, from: u32) -> Option<String> {
        match ctx.dir.role(env.src) {
            Some(Role::Node(g, i)) if *i == from => Some(g.clone()),
            _ => None,
        }
    }

    pub fn handle(&mut self, env: &Envelope, ctx: &mut Ctx) {
        if self.behaviour == NodeBehaviour::Silent {
            return;
        }
        let Some(msg) = Msg::decode(&env.payload) else { return };
        let sid = env.sid.clone();
        let t = self.t();
        match msg {
            Msg::Dtc { instance, from, msg } => {
                if self.sender(ctx, env, from).is_none() || self.closed.contains(&instance) {
                    return;
                }
                match self.instances.get_mut(&instance) {
                    Some(inst) => feed(&mut inst.proto, from, &msg),
                    None => self.early.entry(instance).or_default().push((from, msg)),
                }
            }
            Msg::PayProc { from, body } => {
                if let Some(g) = self.sender(ctx, env, from) {
                    self.pay_procs.entry(sid).or_insert_with(|| QuorumTracker::new(t)).insert(from, (g, body));
                }
            }
            Msg::SwapProc { from, body } => {
                if let Some(g) = self.sender(ctx, env, from) {
                    self.swap_procs.entry(sid).or_insert_with(|| QuorumTracker::new(t)).insert(from, (g, body));
                }
            }
            Msg::SwapOpti { from, body } => {
                if let Some(g) = self.sender(ctx, env, from) {
                    self.optis.entry(sid).or_insert_with(|| QuorumTracker::new(t)).insert(from, (g, body));
                }
            }
            Msg::SwapOkGroup { from, sig } => {
                let Some(g) = self.sender(ctx, env, from) else { return };
                let Some(Flow::SwapResp(r)) = self.flows.get(&sid) else { return };
                let Some(a) = self.assets.get(&r.aid_b) else { return };
                if pkc_verify(&a.key.pk, &swap_ok_bytes(&sid), &sig) {
                    self.swap_oks.entry(sid).or_insert_with(|| QuorumTracker::new(t)).insert(from, g);
                }
            }
            other => {
                let dir = ctx.dir;
                if dir.party(&self.party).map(|p| p.user) != Some(env.src) {
                    return;
                }
                self.handle_user(&sid, other, ctx);
            }
        }
    }

    fn handle_user(&mut self, sid: &str, msg: Msg, ctx: &mut Ctx) {
        let now = ctx.now;
        let party = self.party.clone();
        match msg {
            Msg::Ping { nonce } => self.to_user(ctx, sid, &Msg::Pong { nonce }),
            Msg::GetPk { aid, release } => {
                if !self.fresh(sid) {
                    return self.abort(ctx, sid, "deposit", &aid, "StaleSid");
                }
                if release < now {
                    return self.abort(ctx, sid, "deposit", &aid, "PastDeadline");
                }
                if self.assets.contains_key(&aid) {
                    return self.abort(ctx, sid, "deposit", &aid, "DuplicateAsset");
                }
                let (s, out) = KeygenSession::start(self.index, self.cfg.params, now, &mut self.rng);
                self.open(ctx, sid, "kg", None, Proto::Keygen(s), out);
                self.flows.insert(sid.to_string(), Flow::Deposit { aid, release });
            }
            Msg::Backup { aid, pk_r, release } => {
                if !self.fresh(sid) {
                    return self.abort(ctx, sid, "backup", &aid, "StaleSid");
                }
                let Some(a) = self.usable(&aid) else {
                    return self.abort(ctx, sid, "backup", &aid, "NotOwnerOrLocked");
                };
                if let Err(e) = backup_timing(a.t_release, a.backed, release, now, self.cfg.delta) {
                    return self.abort(ctx, sid, "backup", &aid, &format!("{e:?}"));
                }
                self.assets.get_mut(&aid).expect("usable").state = LockState::Locked;
                self.step(ctx, sid, "backup", "lock", &party, json!({"aid": aid, "release": release, "pk_r": pk_r}));
                match self.cfg.ledger {
                    LedgerKind::Timelock => {
                        let m = signing_bytes(&aid, &pk_r, Some(release), &[]);
                        self.start_sign(ctx, sid, "sign", &aid, &m);
                        self.flows.insert(sid.to_string(), Flow::Backup { aid, pk_r, release });
                    }
                    LedgerKind::Scriptless => {
                        let a = self.assets.get_mut(&aid).expect("usable");
                        let gamma = release.saturating_sub(now + 1);
                        let puzzle = ctx.tlp.pgen(gamma, &encode_share(a.share.index, &a.share.value.to_bytes()));
                        a.t_release = release;
                        a.backed = true;
                        a.state = LockState::Unlocked;
                        let art = BackupArtifact::SharePuzzles {
                            aid: aid.clone(),
                            pk_r,
                            pk_a: a.key.pk,
                            payload: Vec::new(),
                            threshold: self.cfg.params.t,
                            puzzles: vec![(a.share.index, puzzle)],
                        };
                        self.step(ctx, sid, "backup", "sign", &party, json!({"aid": aid, "release": release, "pk_r": pk_r}));
                        self.step(ctx, sid, "backup", "unlock", &party, json!({"aid": aid}));
                        self.to_user(ctx, sid, &Msg::BackupOk { aid, pk_r, release, artifact: art });
                    }
                }
            }
            Msg::ExitReq { aid, recipient } => {
                if !self.fresh(sid) || self.usable(&aid).is_none() {
                    return self.abort(ctx, sid, "exit", &aid, "NotOwnerOrLocked");
                }
                self.assets.get_mut(&aid).expect("usable").state = LockState::Locked;
                let m = signing_bytes(&aid, &recipient, None, &[]);
                self.start_sign(ctx, sid, "sign", &aid, &m);
                self.flows.insert(sid.to_string(), Flow::Exit { aid, recipient });
            }
            Msg::PayReq { aid, payee } => {
                if !self.fresh(sid) {
                    return self.abort(ctx, sid, "pay", &aid, "StaleSid");
                }
                if payee == self.party || ctx.dir.party(&payee).is_none_or(|p| p.nodes.is_empty()) {
                    return self.abort(ctx, sid, "pay", &aid, "SelfPay");
                }
                let Some(a) = self.usable(&aid) else {
                    return self.abort(ctx, sid, "pay", &aid, "NotOwnerOrLocked");
                };
                let (key, release) = (a.key.clone(), a.t_release);
                self.assets.get_mut(&aid).expect("usable").state = LockState::Locked;
                self.step(ctx, sid, "pay", "lock", &party, json!({"aid": aid, "payee": payee}));
                for j in self.group_members(ctx, &payee) {
                    let body = PayProcBody { aid: aid.clone(), key: key.clone(), release: self.skew(release, j) };
                    self.to_node(ctx, sid, &payee, j, &Msg::PayProc { from: self.index, body });
                }
                self.start_dealer(ctx, sid, "rs", &aid, &payee);
                self.flows.insert(sid.to_string(), Flow::PayOut { aid });
            }
            Msg::PayAck { aid, payer } => {
                if self.flows.contains_key(sid) {
                    return;
                }
                let flow = Flow::PayIn { aid, payer, check_at: now + 1, stage: Stage::Waiting, release: 0 };
                self.flows.insert(sid.to_string(), flow);
            }
            Msg::SwapPre { aid_a, aid_b, pk_a2, pk_b2, responder } => {
                if !self.fresh(sid) {
                    return self.abort(ctx, sid, "swap", &aid_a, "StaleSid");
                }
                if responder == self.party || ctx.dir.party(&responder).is_none_or(|p| p.nodes.is_empty()) {
                    return self.abort(ctx, sid, "swap", &aid_a, "SelfPay");
                }
                let Some(a) = self.usable(&aid_a) else {
                    return self.abort(ctx, sid, "swap", &aid_a, "NotOwnerOrLocked");
                };
                let (key, release) = (a.key.clone(), a.t_release);
                self.assets.get_mut(&aid_a).expect("usable").state = LockState::Locked;
                let detail = json!({"aid_a": aid_a, "aid_b": aid_b, "responder": responder, "pk_a2": pk_a2, "pk_b2": pk_b2});
                self.step(ctx, sid, "swap", "lock_a", &party, detail);
                for j in self.group_members(ctx, &responder) {
                    let body = SwapProcBody {
                        aid_a: aid_a.clone(),
                        key_a: key.clone(),
                        release_a: self.skew(release, j),
                        aid_b: aid_b.clone(),
                        pk_a2,
                        pk_b2,
                    };
                    self.to_node(ctx, sid, &responder, j, &Msg::SwapProc { from: self.index, body });
                }
                self.start_dealer(ctx, sid, "rs_a", &aid_a, &responder);
                let flow = Flow::SwapInit { aid_a, aid_b, responder, stage: Stage::Waiting, release_b: 0 };
                self.flows.insert(sid.to_string(), flow);
            }
            Msg::SwapConfirm { aid } => {
                let started = self.instances.contains_key(&format!("{sid}/ack")) || self.closed.contains(&format!("{sid}/ack"));
                if let Some(Flow::SwapInit { aid_b, stage: Stage::Done, .. }) = self.flows.get(sid) {
                    if *aid_b == aid && !started {
                        self.start_sign(ctx, sid, "ack", &aid, &swap_ok_bytes(sid));
                    }
                }
            }
            Msg::SwapAck { aid_a, aid_b, pk_a2, pk_b2, initiator } => {
                if self.flows.contains_key(sid) {
                    return;
                }
                let r = SwapResp {
                    aid_a,
                    aid_b,
                    pk_a2,
                    pk_b2,
                    initiator,
                    check_at: now + 1,
                    stage: Stage::Waiting,
                    t_prime: 0,
                    m1: None,
                };
                self.flows.insert(sid.to_string(), Flow::SwapResp(Box::new(r)));
            }
            _ => {}
        }
    }

    /// Runs scheduled checks, then polls every open protocol instance.
    pub fn on_round(&mut self, ctx: &mut Ctx) {
        if self.behaviour == NodeBehaviour::Silent {
            return;
        }
        let sids: Vec<String> = self.flows.keys().cloned().collect();
        for sid in &sids {
            self.check_flow(ctx, sid);
        }
        let mut polled = BTreeSet::new();
        loop {
            let names: Vec<String> =
                self.instances.keys().filter(|n| !polled.contains(*n)).cloned().collect();
            if names.is_empty() {
                break;
            }
            for name in names {
                polled.insert(name.clone());
                let Some(mut inst) = self.instances.remove(&name) else { continue };
                let (out, outcome) = poll(&mut inst.proto, ctx.now);
                self.route(ctx, &name, &inst.sid, inst.other.as_deref(), out);
                match outcome {
                    None => {
                        self.instances.insert(name, inst);
                    }
                    Some(o) => {
                        self.closed.insert(name);
                        self.on_outcome(ctx, &inst.sid, inst.tag, o);
                    }
                }
            }
        }
    }

    fn check_flow(&mut self, ctx: &mut Ctx, sid: &str) {
        let now = ctx.now;
        let party = self.party.clone();
        let Some(flow) = self.flows.get(sid).cloned() else { return };
        match flow {
            Flow::PayIn { aid, payer, check_at, stage: Stage::Waiting, .. } if now >= check_at => {
                let q = self.pay_procs.get_mut(sid).and_then(|q| q.check());
                let ok = self.seen_sids.insert(sid.to_string());
                match q {
                    Some((g, body)) if ok && g == payer && body.aid == aid && !self.assets.contains_key(&aid) => {
                        self.step(ctx, sid, "pay", "move", &party, json!({"aid": aid, "payer": payer}));
                        self.set_flow(sid, Flow::PayIn { aid, payer: payer.clone(), check_at, stage: Stage::Running, release: body.release });
                        self.start_receiver(ctx, sid, "rs", body.key, &payer);
                    }
                    _ => {
                        self.set_flow(sid, Flow::PayIn { aid: aid.clone(), payer, check_at, stage: Stage::Aborted, release: 0 });
                        self.abort(ctx, sid, "pay", &aid, "NoPayProc");
                    }
                }
            }
            Flow::SwapResp(mut r) if r.stage == Stage::Waiting && now >= r.check_at => {
                let q = self.swap_procs.get_mut(sid).and_then(|q| q.check());
                let fresh = self.seen_sids.insert(sid.to_string());
                let reason = match (&q, self.usable(&r.aid_b)) {
                    _ if !fresh => Some("StaleSid"),
                    (None, _) => Some("NoSwapProc"),
                    (Some((g, b)), _) if *g != r.initiator || b.aid_a != r.aid_a || b.aid_b != r.aid_b || b.pk_a2 != r.pk_a2 || b.pk_b2 != r.pk_b2 => {
                        Some("Mismatch")
                    }
                    (_, None) => Some("NotOwnerOrLocked"),
                    (Some((_, b)), Some(own)) => {
                        let margin_ok = own.t_release.saturating_sub(b.release_a) > 2 * self.cfg.delta;
                        if !margin_ok && !self.cfg.skip_margin_check {
                            Some("MarginViolation")
                        } else if self.assets.contains_key(&r.aid_a) {
                            Some("DuplicateAsset")
                        } else {
                            None
                        }
                    }
                };
                if let Some(reason) = reason {
                    r.stage = Stage::Aborted;
                    let aid = r.aid_a.clone();
                    self.set_flow(sid, Flow::SwapResp(r));
                    return self.abort(ctx, sid, "swap", &aid, reason);
                }
                let (_, body) = q.expect("checked");
                self.assets.get_mut(&r.aid_b).expect("usable").state = LockState::Locked;
                self.step(ctx, sid, "swap", "move_a", &party, json!({"aid_a": r.aid_a, "aid_b": r.aid_b}));
                r.stage = Stage::Running;
                r.t_prime = body.release_a.saturating_sub(self.cfg.delta);
                let from = r.initiator.clone();
                self.set_flow(sid, Flow::SwapResp(r));
                self.start_receiver(ctx, sid, "rs_a", body.key_a, &from);
            }
            Flow::SwapResp(mut r) if r.stage == Stage::Running => {
                let Some(g) = self.swap_oks.get_mut(sid).and_then(|q| q.check()) else { return };
                if g != r.initiator {
                    return;
                }
                self.assets.remove(&r.aid_b);
                let Some(a) = self.assets.get_mut(&r.aid_a) else { return };
                a.state = LockState::Unlocked;
                a.backed = false;
                let release = a.t_release;
                r.stage = Stage::Done;
                let aid = r.aid_a.clone();
                self.set_flow(sid, Flow::SwapResp(r));
                self.step(ctx, sid, "swap", "unlock_a", &party, json!({"aid": aid, "release": release}));
                let release = self.skew(release, 1);
                self.to_user(ctx, sid, &Msg::SwapComplete { aid, release });
            }
            Flow::SwapInit { aid_a, aid_b, responder, stage: Stage::Waiting, .. } => {
                let Some((g, body)) = self.optis.get(sid).and_then(|q| q.peek()) else { return };
                if g != responder || body.aid_b != aid_b {
                    return;
                }
                self.optis.get_mut(sid).expect("exists").check();
                let flow = Flow::SwapInit { aid_a, aid_b, responder: responder.clone(), stage: Stage::Running, release_b: body.release_b };
                self.set_flow(sid, flow);
                self.start_receiver(ctx, sid, "rs_b", body.key_b, &responder);
            }
            _ => {}
        }
    }

    fn set_flow(&mut self, sid: &str, f: Flow) {
        self.flows.insert(sid.to_string(), f);
    }

    fn on_outcome(&mut self, ctx: &mut Ctx, sid: &str, tag: &'static str, o: Outcome) {
        let party = self.party.clone();
        let name = ctx.net.name(self.id).to_string();
        if let Outcome::Sig(sig) = &o {
            ctx.log("dtc.leak", sid, &name, "", json!({"instance": format!("{sid}/{tag}"), "sig": hex::encode(sig.to_bytes())}));
        }
        let Some(flow) = self.flows.get(sid).cloned() else { return };
        match (flow, tag, o) {
            (Flow::Deposit { aid, release }, "kg", Outcome::Key(share, key)) => {
                let pk = key.pk;
                self.assets.insert(
                    aid.clone(),
                    NodeAsset { aid: aid.clone(), share, key, t_release: release, state: LockState::Unlocked, backed: false, tombstoned: false },
                );
                self.step(ctx, sid, "deposit", "create", &party, json!({"aid": aid, "release": release, "pk": pk}));
                let release = self.skew(release, 1);
                self.to_user(ctx, sid, &Msg::GetPkOk { aid, pk, release });
            }
            (Flow::Deposit { aid, .. }, _, _) => self.abort(ctx, sid, "deposit", &aid, "KeyGenFail"),
            (Flow::Backup { aid, pk_r, release }, "sign", Outcome::Sig(sig)) => {
                let Some(a) = self.assets.get_mut(&aid) else { return };
                a.t_release = release;
                a.backed = true;
                a.state = LockState::Unlocked;
                let tx = LedgerTx { aid: aid.clone(), pk_dst: pk_r, timelock: Some(release), payload: Vec::new(), sig };
                self.step(ctx, sid, "backup", "sign", &party, json!({"aid": aid, "release": release, "pk_r": pk_r}));
                self.step(ctx, sid, "backup", "unlock", &party, json!({"aid": aid}));
                self.to_user(ctx, sid, &Msg::BackupOk { aid, pk_r, release, artifact: BackupArtifact::Signed { tx } });
            }
            (Flow::Backup { aid, .. }, _, _) => self.abort(ctx, sid, "backup", &aid, "SignFail"),
            (Flow::Exit { aid, recipient }, "sign", Outcome::Sig(sig)) => {
                self.assets.remove(&aid);
                let tx = LedgerTx { aid: aid.clone(), pk_dst: recipient, timelock: None, payload: Vec::new(), sig };
                self.step(ctx, sid, "exit", "sign", &party, json!({"aid": aid}));
                self.to_user(ctx, sid, &Msg::ExitOk { tx });
            }
            (Flow::Exit { aid, .. }, _, _) => self.abort(ctx, sid, "exit", &aid, "SignFail"),
            (Flow::PayOut { aid }, "rs", Outcome::Dealt) => {
                self.assets.remove(&aid);
                self.step(ctx, sid, "pay", "relinquish", &party, json!({"aid": aid}));
            }
            (Flow::PayOut { aid }, _, _) => self.abort(ctx, sid, "pay", &aid, "ReshareFail"),
            (Flow::PayIn { aid, payer, release, check_at, .. }, "rs", Outcome::Key(share, key)) => {
                let release = release.saturating_sub(self.cfg.delta);
                self.assets.insert(
                    aid.clone(),
                    NodeAsset { aid: aid.clone(), share, key, t_release: release, state: LockState::Unlocked, backed: false, tombstoned: false },
                );
                self.set_flow(sid, Flow::PayIn { aid: aid.clone(), payer, check_at, stage: Stage::Done, release });
                self.step(ctx, sid, "pay", "accept", &party, json!({"aid": aid, "release": release}));
                let release = self.skew(release, 1);
                self.to_user(ctx, sid, &Msg::PayComplete { aid, release });
            }
            (Flow::PayIn { aid, .. }, _, _) => self.abort(ctx, sid, "pay", &aid, "ReshareFail"),
            (Flow::SwapInit { aid_a, .. }, "rs_a", Outcome::Dealt) => {
                if let Some(a) = self.assets.get_mut(&aid_a) {
                    a.tombstoned = true;
                }
            }
            (Flow::SwapInit { aid_a, aid_b, responder, release_b, .. }, "rs_b", Outcome::Key(share, key)) => {
                self.assets.remove(&aid_a);
                self.assets.insert(
                    aid_b.clone(),
                    NodeAsset { aid: aid_b.clone(), share, key, t_release: release_b, state: LockState::Unlocked, backed: false, tombstoned: false },
                );
                self.set_flow(sid, Flow::SwapInit { aid_a, aid_b: aid_b.clone(), responder, stage: Stage::Done, release_b });
                self.step(ctx, sid, "swap", "move_b", &party, json!({"aid": aid_b, "release": release_b}));
                let release = self.skew(release_b, 1);
                self.to_user(ctx, sid, &Msg::SwapReceived { aid: aid_b, release });
            }
            (Flow::SwapInit { aid_b, responder, release_b, .. }, "ack", Outcome::Sig(sig)) => {
                for j in self.group_members(ctx, &responder) {
                    self.to_node(ctx, sid, &responder, j, &Msg::SwapOkGroup { from: self.index, sig });
                }
                let release = self.skew(release_b, 1);
                self.to_user(ctx, sid, &Msg::SwapComplete { aid: aid_b, release });
            }
            (Flow::SwapInit { aid_a, .. }, _, _) => self.abort(ctx, sid, "swap", &aid_a, "SubprotocolFail"),
            (Flow::SwapResp(r), tag, o) => self.on_resp_outcome(ctx, sid, *r, tag, o),
        }
    }

    fn on_resp_outcome(&mut self, ctx: &mut Ctx, sid: &str, mut r: SwapResp, tag: &'static str, o: Outcome) {
        let party = self.party.clone();
        let delta = self.cfg.delta;
        let tl = match self.cfg.ledger {
            LedgerKind::Timelock => Some(r.t_prime),
            LedgerKind::Scriptless => None,
        };
        match (tag, o) {
            ("rs_a", Outcome::Key(share, key)) => {
                self.assets.insert(
                    r.aid_a.clone(),
                    NodeAsset {
                        aid: r.aid_a.clone(),
                        share,
                        key,
                        t_release: r.t_prime,
                        state: LockState::Locked,
                        backed: true,
                    tombstoned: false,
                    },
                );
                let release_b = r.t_prime + 2 * delta;
                if let Some(b) = self.assets.get_mut(&r.aid_b) {
                    b.t_release = release_b;
                }
                let d = json!({"aid_a": r.aid_a, "aid_b": r.aid_b, "t_prime": r.t_prime, "release_b": release_b});
                self.step(ctx, sid, "swap", "commit", &party, d);
                let m1 = signing_bytes(&r.aid_b, &r.pk_a2, tl, &[]);
                let aid_b = r.aid_b.clone();
                self.set_flow(sid, Flow::SwapResp(Box::new(r)));
                self.start_sign(ctx, sid, "m1", &aid_b, &m1);
            }
            ("m1", Outcome::Sig(sig)) => {
                let m1 = LedgerTx { aid: r.aid_b.clone(), pk_dst: r.pk_a2, timelock: tl, payload: Vec::new(), sig };
                self.step(ctx, sid, "swap", "sign_a", &party, json!({"aid_a": r.aid_a, "aid_b": r.aid_b}));
                let m2 = signing_bytes(&r.aid_a, &r.pk_b2, tl, &m1.encode());
                r.m1 = Some(m1);
                let aid_a = r.aid_a.clone();
                self.set_flow(sid, Flow::SwapResp(Box::new(r)));
                self.start_sign(ctx, sid, "m2", &aid_a, &m2);
            }
            ("m2", Outcome::Sig(sig)) => {
                let Some(m1) = &r.m1 else { return };
                let m2 = LedgerTx { aid: r.aid_a.clone(), pk_dst: r.pk_b2, timelock: tl, payload: m1.encode(), sig };
                self.step(ctx, sid, "swap", "sign_b", &party, json!({"aid_a": r.aid_a, "aid_b": r.aid_b, "pk_b2": r.pk_b2, "t_prime": r.t_prime}));
                let digest = digest_hex(&m2.encode());
                let artifact = match self.cfg.ledger {
                    LedgerKind::Timelock => BackupArtifact::Signed { tx: m2 },
                    LedgerKind::Scriptless => {
                        let gamma = r.t_prime.saturating_sub(ctx.now + 1);
                        BackupArtifact::Puzzle { puzzle: ctx.tlp.pgen(gamma, &m2.encode()) }
                    }
                };
                let pess = Msg::SwapPess { aid_a: r.aid_a.clone(), pk_b2: r.pk_b2, t_prime: r.t_prime, digest, artifact };
                self.to_user(ctx, sid, &pess);
                let Some(b) = self.assets.get(&r.aid_b) else { return };
                let (key_b, release_b) = (b.key.clone(), b.t_release);
                for j in self.group_members(ctx, &r.initiator) {
                    let body = SwapOptiBody { aid_b: r.aid_b.clone(), key_b: key_b.clone(), release_b: self.skew(release_b, j) };
                    self.to_node(ctx, sid, &r.initiator, j, &Msg::SwapOpti { from: self.index, body });
                }
                let (aid_b, to) = (r.aid_b.clone(), r.initiator.clone());
                self.start_dealer(ctx, sid, "rs_b", &aid_b, &to);
            }
            ("rs_b", Outcome::Dealt) => {
                if let Some(b) = self.assets.get_mut(&r.aid_b) {
                    b.tombstoned = true;
                }
            }
            _ => {
                r.stage = Stage::Aborted;
                let aid = r.aid_a.clone();
                self.set_flow(sid, Flow::SwapResp(Box::new(r)));
                self.abort(ctx, sid, "swap", &aid, "SubprotocolFail");
            }
        }
    }
}

fn feed(p: &mut Proto, from: u32, m: &DtcMsg) {
    match p {
        Proto::Keygen(s) => s.on_msg(from, m),
        Proto::Sign(s) => s.on_msg(from, m),
        Proto::Dealer(s) => s.on_msg(from, m),
        Proto::Receiver(s) => s.on_msg(from, m),
    }
}

fn poll(p: &mut Proto, now: Round) -> (Outbox, Option<Outcome>) {
    let done = |x: Option<Outcome>| x;
    match p {
        Proto::Keygen(s) => match s.poll(now) {
            Poll::Pending => (Vec::new(), None),
            Poll::Done((sh, k)) => (Vec::new(), done(Some(Outcome::Key(sh, k)))),
            Poll::Failed => (Vec::new(), Some(Outcome::Failed)),
        },
        Proto::Sign(s) => {
            let (out, r) = s.poll(now);
            let o = match r {
                Poll::Pending => None,
                Poll::Done(sig) => Some(Outcome::Sig(sig)),
                Poll::Failed => Some(Outcome::Failed),
            };
            (out, o)
        }
        Proto::Dealer(s) => match s.poll(now) {
            Poll::Pending => (Vec::new(), None),
            Poll::Done(()) => (Vec::new(), Some(Outcome::Dealt)),
            Poll::Failed => (Vec::new(), Some(Outcome::Failed)),
        },
        Proto::Receiver(s) => {
            let (out, r) = s.poll(now);
            let o = match r {
                Poll::Pending => None,
                Poll::Done((sh, k)) => Some(Outcome::Key(sh, k)),
                Poll::Failed => Some(Outcome::Failed),
            };
            (out, o)
        }
    }
}
