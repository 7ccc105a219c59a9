//! Wires a scenario into a network, ledger, puzzle oracle and actors, and
//! runs the round loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::scenario::{Action, BackendSpec, FaultDecl, Scenario, ScenarioInvalid};
use crate::clock_net::{Envelope, FaultSpec, Network, ParticipantId, Round};
use crate::crypto::{pkc_keygen, PublicKey, TlpOracle};
use crate::ledger::{AssetId, Ledger};
use crate::protocol::LockState;
use crate::te_dtc::{NodeActor, NodeBehaviour, NodeConfig};
use crate::te_tee::{Enclave, TeeActor, TeeConfig};
use crate::user_agent::{UserAgent, UserConfig};
use crate::world::{Backend, Ctx, Directory, PartyInfo, Role};

/// Rounds a user waits on its trusted entity before treating an operation
/// as stalled.
pub const TEE_OP_TIMEOUT: Round = 6;
pub const DTC_OP_TIMEOUT: Round = 30;

/// Deterministic wallet key of a participant.
pub fn wallet_of(name: &str, seed: u64) -> crate::crypto::KeyPair {
    pkc_keygen(format!("wallet:{name}:{seed}").as_bytes())
}

/// Key outside the system used by exit payments.
pub fn external_key(label: &str) -> PublicKey {
    pkc_keygen(format!("external:{label}").as_bytes()).pk
}

#[derive(Default)]
pub struct Actors {
    pub users: BTreeMap<ParticipantId, UserAgent>,
    pub tees: BTreeMap<ParticipantId, TeeActor>,
    pub nodes: BTreeMap<ParticipantId, NodeActor>,
}

impl Actors {
    fn handle(&mut self, env: &Envelope, ctx: &mut Ctx) {
        if let Some(u) = self.users.get_mut(&env.dst) {
            u.handle(env, ctx);
        } else if let Some(t) = self.tees.get_mut(&env.dst) {
            t.handle(env, ctx);
        } else if let Some(n) = self.nodes.get_mut(&env.dst) {
            n.handle(env, ctx);
        }
    }

    fn on_round(&mut self, id: ParticipantId, ctx: &mut Ctx) {
        if let Some(u) = self.users.get_mut(&id) {
            u.on_round(ctx);
        } else if let Some(t) = self.tees.get_mut(&id) {
            t.on_round(ctx);
        } else if let Some(n) = self.nodes.get_mut(&id) {
            n.on_round(ctx);
        }
    }
}

/// One asset as held by a trusted entity at the end of a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Holding {
    pub party: String,
    pub aid: AssetId,
    pub pk: PublicKey,
    pub t_release: Round,
    pub state: LockState,
    /// False when the holding entity crashed or lost its quorum.
    pub live: bool,
}

/// End-of-run state, logged into the trace so reports can be rebuilt from
/// the trace alone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub round: Round,
    pub ledger: BTreeMap<AssetId, PublicKey>,
    pub wallets: BTreeMap<String, PublicKey>,
    pub holdings: Vec<Holding>,
    pub entitlements: BTreeMap<String, Vec<(AssetId, PublicKey, Round)>>,
    pub pending_ops: usize,
    /// Parties whose trusted entity crashed or lost its quorum.
    pub dead: Vec<String>,
}

pub struct Sim {
    pub scenario: Scenario,
    pub net: Network,
    pub ledger: Ledger,
    pub tlp: TlpOracle,
    pub dir: Directory,
    pub actors: Actors,
    actions: Vec<(String, Action)>,
    next_action: usize,
}

impl Sim {
    pub fn new(sc: &Scenario) -> Result<Self, ScenarioInvalid> {
        sc.validate()?;
        let seed = sc.seed;
        let mut net = Network::new(seed, sc.options.async_policy);
        let ledger = Ledger::new(sc.ledger, sc.delta, sc.options.inclusion, seed);
        let tlp = TlpOracle::new(seed);
        let params = sc.dtc_params();
        let backend = match sc.backend {
            BackendSpec::Tee => Backend::Tee,
            BackendSpec::Dtc { n, t } => Backend::Dtc { n, t },
        };
        let mut dir = Directory {
            parties: BTreeMap::new(),
            roles: BTreeMap::new(),
            delta: sc.delta,
            ledger_kind: sc.ledger,
            backend,
            dtc: params,
        };
        let mut actors = Actors::default();
        let (quorum, timeout) = match params {
            None => (1, TEE_OP_TIMEOUT),
            Some(p) => (p.t, DTC_OP_TIMEOUT),
        };
        let ucfg = UserConfig {
            ledger: sc.ledger,
            delta: sc.delta,
            quorum,
            op_timeout: sc.options.op_timeout.unwrap_or(timeout),
            auto_recover: sc.options.auto_recover,
            submit_stale: sc.options.submit_stale,
            probe_every: sc.options.probe_every.unwrap_or(sc.delta),
        };
        for p in &sc.participants {
            let id = net.register(&p.name);
            let wallet = wallet_of(&p.name, seed);
            dir.roles.insert(id, Role::User(p.name.clone()));
            dir.parties.insert(
                p.name.clone(),
                PartyInfo {
                    name: p.name.clone(),
                    user: id,
                    wallet: wallet.pk,
                    tee: None,
                    tee_identity: None,
                    nodes: BTreeMap::new(),
                },
            );
            actors.users.insert(id, UserAgent::new(id, &p.name, wallet, ucfg));
        }
        match params {
            None => {
                let mut hosts: BTreeMap<String, Vec<String>> = BTreeMap::new();
                for p in &sc.participants {
                    hosts.entry(sc.tee_host(&p.name)).or_default().push(p.name.clone());
                }
                let tcfg = TeeConfig { delta: sc.delta, ledger: sc.ledger, skip_margin_check: sc.options.skip_margin_check };
                for (k, (host, owners)) in hosts.iter().enumerate() {
                    let name = format!("tee:{host}");
                    let id = net.register(&name);
                    let identity = pkc_keygen(format!("enclave:{host}:{seed}").as_bytes());
                    for o in owners {
                        let info = dir.parties.get_mut(o).expect("registered");
                        info.tee = Some(id);
                        info.tee_identity = Some(identity.pk);
                    }
                    dir.roles.insert(id, Role::Tee(host.clone()));
                    let enclave = Enclave::new(identity, owners, tcfg, seed.wrapping_add(k as u64 + 1));
                    actors.tees.insert(id, TeeActor::new(id, &name, enclave));
                }
            }
            Some(p) => {
                let ncfg = NodeConfig { params: p, delta: sc.delta, ledger: sc.ledger, skip_margin_check: sc.options.skip_margin_check };
                for party in &sc.participants {
                    for i in p.members() {
                        let name = format!("{}.n{i}", party.name);
                        let id = net.register(&name);
                        dir.parties.get_mut(&party.name).expect("registered").nodes.insert(i, id);
                        dir.roles.insert(id, Role::Node(party.name.clone(), i));
                        let node_seed = seed ^ (u64::from(id.0) << 32);
                        actors.nodes.insert(id, NodeActor::new(id, &party.name, i, NodeBehaviour::Honest, ncfg, node_seed));
                    }
                }
            }
        }
        for f in &sc.faults {
            match f {
                FaultDecl::Crash { target, round } => {
                    let participant = net.lookup(target).expect("validated");
                    net.inject_fault(FaultSpec::CrashAt { participant, round: *round });
                }
                FaultDecl::Block { src, dst, from } => {
                    let (src, dst) = (net.lookup(src).expect("validated"), net.lookup(dst).expect("validated"));
                    net.inject_fault(FaultSpec::BlockChannel { src, dst, from: *from });
                }
                FaultDecl::Behaviour { target, behaviour } => {
                    let id = net.lookup(target).expect("validated");
                    if let Some(n) = actors.nodes.get_mut(&id) {
                        n.behaviour = *behaviour;
                    }
                    net.trace.push(0, "fault.behaviour", "", target, "", json!({"behaviour": behaviour}));
                }
            }
        }
        let wallets: BTreeMap<&String, PublicKey> = dir.parties.iter().map(|(k, v)| (k, v.wallet)).collect();
        let names: BTreeMap<u32, String> = net.participants().map(|p| (p.0, net.name(p).to_string())).collect();
        let setup = json!({
            "scenario": sc.name,
            "seed": seed,
            "backend": sc.backend,
            "ledger": sc.ledger,
            "delta": sc.delta,
            "horizon": sc.horizon,
            "wallets": wallets,
            "participants": names,
            "dtc": params,
            "oracle": sc.oracle,
            "faults": sc.faults,
        });
        net.trace.push(0, "sim.setup", "", "", "", setup);
        let actions = sc.actions().into_iter().enumerate().map(|(k, a)| (format!("{}-{k}", a.op()), a)).collect();
        Ok(Sim { scenario: sc.clone(), net, ledger, tlp, dir, actors, actions, next_action: 0 })
    }

    pub fn now(&self) -> Round {
        self.net.now()
    }

    pub fn user(&self, party: &str) -> Option<&UserAgent> {
        self.dir.party(party).and_then(|p| self.actors.users.get(&p.user))
    }

    pub fn tee_of(&self, party: &str) -> Option<&TeeActor> {
        self.dir.party(party).and_then(|p| p.tee).and_then(|t| self.actors.tees.get(&t))
    }

    pub fn nodes_of(&self, party: &str) -> Vec<&NodeActor> {
        self.dir
            .party(party)
            .map(|p| p.nodes.values().filter_map(|id| self.actors.nodes.get(id)).collect())
            .unwrap_or_default()
    }

    pub fn action_sids(&self) -> Vec<(String, Action)> {
        self.actions.clone()
    }

    fn deliver(&mut self) {
        let now = self.net.now();
        loop {
            let due = self.net.drain_due();
            if due.is_empty() {
                break;
            }
            let Sim { net, ledger, tlp, dir, actors, .. } = self;
            let mut ctx = Ctx { now, net, ledger, tlp, dir };
            for env in &due {
                actors.handle(env, &mut ctx);
            }
        }
    }

    fn perform(&mut self, sid: &str, action: &Action) {
        let now = self.net.now();
        let Some(uid) = self.dir.party(action.actor()).map(|p| p.user) else { return };
        let mut detail = serde_json::to_value(action).unwrap_or_default();
        detail["party"] = json!(action.actor());
        self.net.trace.push(now, "sim.action", sid, action.actor(), "", detail);
        if self.net.is_crashed(uid, now) {
            return;
        }
        let Sim { net, ledger, tlp, dir, actors, .. } = self;
        let mut ctx = Ctx { now, net, ledger, tlp, dir };
        let Some(u) = actors.users.get_mut(&uid) else { return };
        match action {
            Action::Deposit { aid, release, .. } => u.deposit(&mut ctx, sid, AssetId::new(aid), *release),
            Action::Backup { aid, release, .. } => u.backup(&mut ctx, sid, AssetId::new(aid), *release),
            Action::Pay { aid, payee, .. } => u.pay(&mut ctx, sid, AssetId::new(aid), payee),
            Action::Swap { aid_a, responder, aid_b, .. } => {
                u.swap(&mut ctx, sid, AssetId::new(aid_a), responder, AssetId::new(aid_b))
            }
            Action::Recover { aid, .. } => u.schedule_recover(AssetId::new(aid)),
            Action::Exit { aid, recipient, .. } => u.exit(&mut ctx, sid, AssetId::new(aid), external_key(recipient)),
        }
    }

    /// Advances one round.
    pub fn step(&mut self) {
        let now = self.net.tick();
        self.tlp.tick();
        self.ledger.set_now(now);
        self.deliver();
        while let Some((sid, a)) = self.actions.get(self.next_action).cloned() {
            if a.round() > now {
                break;
            }
            self.next_action += 1;
            self.perform(&sid, &a);
            self.deliver();
        }
        let ids: Vec<ParticipantId> = self.net.participants().collect();
        for id in ids {
            if self.net.is_crashed(id, now) {
                continue;
            }
            {
                let Sim { net, ledger, tlp, dir, actors, .. } = self;
                let mut ctx = Ctx { now, net, ledger, tlp, dir };
                actors.on_round(id, &mut ctx);
            }
            self.deliver();
        }
        for i in self.ledger.process() {
            let e = &self.ledger.tx_log()[i];
            let detail = json!({
                "index": i,
                "aid": e.tx.aid,
                "pk_dst": e.tx.pk_dst,
                "timelock": e.tx.timelock,
                "has_payload": !e.tx.payload.is_empty(),
                "submitter": e.submitter,
                "submitted_round": e.submitted_round,
                "applied": e.applied,
                "reason": e.reason,
            });
            let sub = e.submitter.clone();
            self.net.trace.push(now, "ledger.include", "", &sub, "", detail);
        }
    }

    /// Runs to the horizon, logs the final snapshot and returns it.
    pub fn run(&mut self) -> Snapshot {
        while self.net.now() < self.scenario.horizon {
            self.step();
        }
        let snap = self.snapshot();
        let now = self.net.now();
        self.net.trace.push(now, "sim.final", "", "", "", serde_json::to_value(&snap).expect("snapshot serializes"));
        snap
    }

    pub fn snapshot(&self) -> Snapshot {
        let now = self.net.now();
        let mut holdings = Vec::new();
        for t in self.actors.tees.values() {
            let live = !self.net.is_crashed(t.id, now);
            for r in t.enclave.dump() {
                holdings.push(Holding { party: r.owner, aid: r.aid, pk: r.pk, t_release: r.t_release, state: r.state, live });
            }
        }
        if let Some(p) = self.dir.dtc {
            for party in self.dir.parties.keys() {
                let mut views: BTreeMap<AssetId, Vec<(PublicKey, Round, LockState)>> = BTreeMap::new();
                for n in self.nodes_of(party) {
                    if self.net.is_crashed(n.id, now) || n.behaviour != NodeBehaviour::Honest {
                        continue;
                    }
                    for v in n.dump().into_iter().filter(|v| !v.tombstoned) {
                        views.entry(v.aid).or_default().push((v.pk, v.t_release, v.state));
                    }
                }
                for (aid, vs) in views {
                    let agreed = vs.iter().find(|v| vs.iter().filter(|w| w == v).count() >= p.t);
                    let (pk, t_release, state, live) = match agreed {
                        Some(&(pk, r, s)) => (pk, r, s, true),
                        None => (vs[0].0, vs[0].1, LockState::Locked, false),
                    };
                    holdings.push(Holding { party: party.clone(), aid, pk, t_release, state, live });
                }
            }
        }
        let mut dead = Vec::new();
        for (name, info) in &self.dir.parties {
            let gone = match (info.tee, self.dir.dtc) {
                (Some(t), _) => self.net.is_crashed(t, now),
                (None, Some(p)) => {
                    let up = self
                        .nodes_of(name)
                        .iter()
                        .filter(|n| !self.net.is_crashed(n.id, now) && n.behaviour == NodeBehaviour::Honest)
                        .count();
                    up < p.t
                }
                (None, None) => false,
            };
            if gone {
                dead.push(name.clone());
            }
        }
        let entitlements = self
            .actors
            .users
            .values()
            .map(|u| (u.name.clone(), u.vault.entitlements().into_iter().collect()))
            .collect();
        Snapshot {
            round: now,
            ledger: self.ledger.assets().clone(),
            wallets: self.dir.parties.iter().map(|(k, v)| (k.clone(), v.wallet)).collect(),
            holdings,
            entitlements,
            pending_ops: self.actors.users.values().map(UserAgent::pending_ops).sum(),
            dead,
        }
    }
}
