//! The user/wallet actor. It drives operations against its own trusted
//! entity, keeps every recovery artifact it receives, solves puzzles one step
//! per round, settles on the ledger when an operation stalls and runs the
//! swap watchers.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::clock_net::{Channel, Envelope, ParticipantId, Round};
use crate::crypto::dtc::interpolate_at_zero;
use crate::crypto::{IdealPuzzle, KeyPair, PublicKey, SecretKey, TlpState};
use crate::ledger::{AssetId, LedgerKind, LedgerTx};
use crate::protocol::{decode_share, digest_hex, BackupArtifact, Msg};
use crate::te_dtc::QuorumTracker;
use crate::world::{Ctx, Role};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UserError {
    #[error("no recovery artifact for {0}")]
    NoArtifact(AssetId),
    #[error("artifact for {0} not solved yet")]
    NotYetSolved(AssetId),
    #[error("release round {release} not reached")]
    BeforeRelease { release: Round },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserConfig {
    pub ledger: LedgerKind,
    pub delta: Round,
    /// Identical replies needed from the trusted entity (1 for a TEE, t for
    /// a committee).
    pub quorum: usize,
    /// Rounds after which a pending operation counts as stalled.
    pub op_timeout: Round,
    /// Settle stalled assets on the ledger at their release round.
    pub auto_recover: bool,
    /// Also submit superseded artifacts once they mature.
    pub submit_stale: bool,
    /// Liveness probe period for the user's own trusted entity; 0 disables.
    pub probe_every: Round,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySource {
    Backup,
    Contingent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PuzzleProgress {
    pub index: u32,
    pub puzzle: IdealPuzzle,
    pub cur: TlpState,
    pub steps: u64,
    pending: bool,
    pub msg: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaultEntry {
    pub sid: String,
    pub aid: AssetId,
    pub artifact: BackupArtifact,
    pub pk_r: PublicKey,
    pub release: Round,
    pub created: Round,
    pub source: EntrySource,
    pub digest: Option<String>,
    pub solved_tx: Option<LedgerTx>,
    pub solved_at: Option<Round>,
    pub relinquished: bool,
    pub submitted: bool,
    pub progress: Vec<PuzzleProgress>,
}

/// Every artifact ever received, per asset, in arrival order.
#[derive(Clone, Debug, Default)]
pub struct BackupVault {
    pub entries: BTreeMap<AssetId, Vec<VaultEntry>>,
}

impl BackupVault {
    /// The newest artifact still held for `aid`.
    pub fn newest(&self, aid: &AssetId) -> Option<&VaultEntry> {
        self.entries.get(aid)?.iter().rev().find(|e| !e.relinquished)
    }

    fn newest_mut(&mut self, aid: &AssetId) -> Option<&mut VaultEntry> {
        self.entries.get_mut(aid)?.iter_mut().rev().find(|e| !e.relinquished)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &VaultEntry> {
        self.entries.values().flatten()
    }

    fn all_mut(&mut self) -> impl Iterator<Item = &mut VaultEntry> {
        self.entries.values_mut().flatten()
    }

    /// `(aid, pk_r, release)` of every artifact ever received.
    pub fn entitlements(&self) -> BTreeSet<(AssetId, PublicKey, Round)> {
        self.all()
            .map(|e| (e.aid.clone(), e.pk_r, e.release))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WatchAction {
    SubmitOwnBackup,
    ExtractPayloadAndSubmit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatcherRule {
    pub sid: String,
    pub watch_aid: AssetId,
    pub deadline: Round,
    pub action: WatchAction,
    pub fired: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum OpKind {
    Deposit { aid: AssetId, release: Round, pk: Option<PublicKey> },
    Backup { aid: AssetId, parent: Option<String> },
    Pay { aid: AssetId, payee: String },
    PayIn { aid: AssetId, payer: String },
    SwapInit { aid_a: AssetId, aid_b: AssetId },
    SwapResp { aid_a: AssetId, aid_b: AssetId, pess: bool },
    Exit { aid: AssetId },
}

impl OpKind {
    fn label(&self) -> &'static str {
        match self {
            OpKind::Deposit { .. } => "deposit",
            OpKind::Backup { .. } => "backup",
            OpKind::Pay { .. } => "pay",
            OpKind::PayIn { .. } => "pay_in",
            OpKind::SwapInit { .. } => "swap",
            OpKind::SwapResp { .. } => "swap_resp",
            OpKind::Exit { .. } => "exit",
        }
    }

    /// The asset this party stands to lose if the operation stalls.
    fn at_risk(&self) -> Option<&AssetId> {
        match self {
            OpKind::Backup { aid, .. } | OpKind::Pay { aid, .. } => Some(aid),
            OpKind::SwapInit { aid_a, .. } => Some(aid_a),
            OpKind::SwapResp { aid_b, pess: false, .. } => Some(aid_b),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
struct Op {
    kind: OpKind,
    started: Round,
    done: bool,
}

type PessKey = (AssetId, PublicKey, Round, String);
type ShareKey = (AssetId, PublicKey, PublicKey, Round, Vec<u8>, usize);
type PessState = (QuorumTracker<PessKey>, BTreeMap<u32, (PessKey, BackupArtifact)>);
type ShareState = (BTreeMap<u32, (ShareKey, IdealPuzzle)>, bool);

#[derive(Clone, Debug)]
pub struct UserAgent {
    pub id: ParticipantId,
    pub name: String,
    pub wallet: KeyPair,
    pub cfg: UserConfig,
    pub vault: BackupVault,
    pub watchers: Vec<WatcherRule>,
    ops: BTreeMap<String, Op>,
    replies: BTreeMap<(String, &'static str), QuorumTracker<Msg>>,
    pess: BTreeMap<String, PessState>,
    completed_ok: BTreeSet<String>,
    shares: BTreeMap<String, ShareState>,
    recover: BTreeSet<AssetId>,
    /// Explicit recovery requests; unlike `recover` these survive the
    /// completion of an operation on the asset.
    requested: BTreeSet<AssetId>,
    probe: Option<(u64, Round, QuorumTracker<u64>)>,
    nonce: u64,
    pub te_dead: bool,
}

impl UserAgent {
    pub fn new(id: ParticipantId, name: &str, wallet: KeyPair, cfg: UserConfig) -> Self {
        UserAgent {
            id,
            name: name.to_string(),
            wallet,
            cfg,
            vault: BackupVault::default(),
            watchers: Vec::new(),
            ops: BTreeMap::new(),
            replies: BTreeMap::new(),
            pess: BTreeMap::new(),
            shares: BTreeMap::new(),
            completed_ok: BTreeSet::new(),
            recover: BTreeSet::new(),
            requested: BTreeSet::new(),
            probe: None,
            nonce: 0,
            te_dead: false,
        }
    }

    pub fn pending_ops(&self) -> usize {
        self.ops.values().filter(|o| !o.done).count()
    }

    /// Assets this user will settle on the ledger once an artifact matures.
    pub fn recovering(&self) -> BTreeSet<AssetId> {
        self.recover.union(&self.requested).cloned().collect()
    }

    fn log(&self, ctx: &mut Ctx, kind: &str, sid: &str, detail: serde_json::Value) {
        let mut d = json!({"party": self.name});
        if let (Some(m), serde_json::Value::Object(extra)) = (d.as_object_mut(), detail) {
            m.extend(extra);
        }
        ctx.log(kind, sid, &self.name, "", d);
    }

    fn to_te(&self, ctx: &mut Ctx, sid: &str, msg: &Msg) {
        let dir = ctx.dir;
        let Some(p) = dir.party(&self.name) else { return };
        if let Some(tee) = p.tee {
            ctx.send(Channel::Local, sid, self.id, tee, msg);
        }
        for &node in p.nodes.values() {
            ctx.send(Channel::Sync, sid, self.id, node, msg);
        }
    }

    fn to_user(&self, ctx: &mut Ctx, sid: &str, party: &str, msg: &Msg) {
        let dir = ctx.dir;
        if let Some(p) = dir.party(party) {
            ctx.send(Channel::Sync, sid, self.id, p.user, msg);
        }
    }

    fn start(&mut self, ctx: &mut Ctx, sid: &str, kind: OpKind) {
        self.log(ctx, "user.op_start", sid, json!({"op": kind.label()}));
        self.ops.insert(sid.to_string(), Op { kind, started: ctx.now, done: false });
    }

    fn finish(&mut self, ctx: &mut Ctx, sid: &str, outcome: &str) {
        let Some(op) = self.ops.get_mut(sid) else { return };
        if op.done && outcome != "ok" {
            return;
        }
        op.done = true;
        let (label, started, risk) = (op.kind.label(), op.started, op.kind.at_risk().cloned());
        if outcome == "ok" {
            self.completed_ok.insert(sid.to_string());
            if let Some(aid) = &risk {
                self.recover.remove(aid);
            }
        } else if let Some(aid) = risk.filter(|_| self.cfg.auto_recover) {
            self.recover.insert(aid);
        }
        let rounds = ctx.now - started + 1;
        self.log(ctx, "user.op_done", sid, json!({"op": label, "outcome": outcome, "rounds": rounds}));
    }

    // Script entry points.

    pub fn deposit(&mut self, ctx: &mut Ctx, sid: &str, aid: AssetId, release: Round) {
        self.start(ctx, sid, OpKind::Deposit { aid: aid.clone(), release, pk: None });
        self.to_te(ctx, sid, &Msg::GetPk { aid, release });
    }

    pub fn backup(&mut self, ctx: &mut Ctx, sid: &str, aid: AssetId, release: Round) {
        self.request_backup(ctx, sid, aid, release, None);
    }

    fn request_backup(&mut self, ctx: &mut Ctx, sid: &str, aid: AssetId, release: Round, parent: Option<String>) {
        self.start(ctx, sid, OpKind::Backup { aid: aid.clone(), parent });
        self.to_te(ctx, sid, &Msg::Backup { aid, pk_r: self.wallet.pk, release });
    }

    pub fn pay(&mut self, ctx: &mut Ctx, sid: &str, aid: AssetId, payee: &str) {
        self.start(ctx, sid, OpKind::Pay { aid: aid.clone(), payee: payee.to_string() });
        self.to_te(ctx, sid, &Msg::PayReq { aid: aid.clone(), payee: payee.to_string() });
        self.to_user(ctx, sid, payee, &Msg::PayNotify { aid, payer: self.name.clone() });
    }

    pub fn swap(&mut self, ctx: &mut Ctx, sid: &str, aid_a: AssetId, responder: &str, aid_b: AssetId) {
        let Some(pk_b2) = ctx.dir.party(responder).map(|p| p.wallet) else { return };
        let pk_a2 = self.wallet.pk;
        self.start(ctx, sid, OpKind::SwapInit { aid_a: aid_a.clone(), aid_b: aid_b.clone() });
        self.watchers.push(WatcherRule {
            sid: sid.to_string(),
            watch_aid: aid_a.clone(),
            deadline: Round::MAX,
            action: WatchAction::ExtractPayloadAndSubmit,
            fired: false,
        });
        let pre = Msg::SwapPre { aid_a: aid_a.clone(), aid_b: aid_b.clone(), pk_a2, pk_b2, responder: responder.to_string() };
        self.to_te(ctx, sid, &pre);
        let offer = Msg::SwapOffer { aid_a, aid_b, pk_a2, pk_b2, initiator: self.name.clone() };
        self.to_user(ctx, sid, responder, &offer);
    }

    /// Payment to a key outside the system: the trusted entity signs an
    /// immediately valid transaction that the user broadcasts.
    pub fn exit(&mut self, ctx: &mut Ctx, sid: &str, aid: AssetId, recipient: PublicKey) {
        self.start(ctx, sid, OpKind::Exit { aid: aid.clone() });
        self.to_te(ctx, sid, &Msg::ExitReq { aid, recipient });
    }

    /// Settle `aid` on the ledger as soon as its newest artifact matures.
    pub fn schedule_recover(&mut self, aid: AssetId) {
        self.requested.insert(aid);
    }

    /// Submits the newest artifact for `aid` now.
    pub fn try_recover(&mut self, ctx: &mut Ctx, aid: &AssetId) -> Result<usize, UserError> {
        let now = ctx.now;
        let e = self.vault.newest(aid).ok_or_else(|| UserError::NoArtifact(aid.clone()))?;
        if now < e.release {
            return Err(UserError::BeforeRelease { release: e.release });
        }
        let tx = e.solved_tx.clone().ok_or_else(|| UserError::NotYetSolved(aid.clone()))?;
        let sid = e.sid.clone();
        self.vault.newest_mut(aid).expect("exists").submitted = true;
        Ok(self.submit(ctx, &sid, tx, "recover"))
    }

    fn submit(&self, ctx: &mut Ctx, sid: &str, tx: LedgerTx, why: &str) -> usize {
        let aid = tx.aid.clone();
        let pk = tx.pk_dst;
        let idx = ctx.ledger.submit(tx, &self.name);
        self.log(ctx, "user.submit", sid, json!({"aid": aid, "pk_dst": pk, "index": idx, "why": why}));
        idx
    }

    fn add_entry(&mut self, ctx: &mut Ctx, mut e: VaultEntry) {
        let now = ctx.now;
        match &e.artifact {
            BackupArtifact::Signed { tx } => {
                e.solved_tx = Some(tx.clone());
                e.solved_at = Some(now);
            }
            BackupArtifact::Puzzle { puzzle } => e.progress.push(progress(0, *puzzle)),
            BackupArtifact::SharePuzzles { puzzles, .. } => {
                e.progress.extend(puzzles.iter().map(|(i, p)| progress(*i, *p)));
            }
        }
        let d = json!({"aid": e.aid, "pk_r": e.pk_r, "release": e.release, "source": e.source, "artifact": e.artifact.kind()});
        self.log(ctx, "user.vault", &e.sid.clone(), d);
        let solver = self.id.0 as u64;
        for p in &mut e.progress {
            p.msg = ctx.tlp.get_msg(&p.puzzle, &p.cur);
            if p.msg.is_none() {
                ctx.tlp.request_solve(solver, p.cur);
                p.pending = true;
            }
        }
        finish_solve(&mut e, now);
        if e.solved_tx.is_some() && e.solved_at == Some(now) && !e.progress.is_empty() {
            self.log(ctx, "user.solved", &e.sid.clone(), json!({"aid": e.aid, "release": e.release}));
        }
        self.vault.entries.entry(e.aid.clone()).or_default().push(e);
    }

    fn relinquish(&mut self, ctx: &mut Ctx, sid: &str, aid: &AssetId) {
        let mut any = false;
        for e in self.vault.entries.get_mut(aid).into_iter().flatten() {
            any |= !e.relinquished;
            e.relinquished = true;
        }
        self.recover.remove(aid);
        self.requested.remove(aid);
        if any {
            self.log(ctx, "user.relinquish", sid, json!({"aid": aid}));
        }
    }

    /// Share index of a reply from this user's own trusted entity.
    fn own_sender(&self, ctx: &Ctx, src: ParticipantId) -> Option<u32> {
        let me = ctx.dir.party(&self.name)?;
        match ctx.dir.role(src)? {
            Role::Tee(_) if me.tee == Some(src) => Some(0),
            Role::Node(g, i) if *g == self.name => Some(*i),
            _ => None,
        }
    }

    fn agreed(&mut self, sid: &str, from: u32, msg: &Msg) -> bool {
        let q = self.cfg.quorum;
        let t = self.replies.entry((sid.to_string(), msg.name())).or_insert_with(|| QuorumTracker::new(q));
        t.insert(from, msg.clone());
        t.check().is_some()
    }

    pub fn handle(&mut self, env: &Envelope, ctx: &mut Ctx) {
        let Some(msg) = Msg::decode(&env.payload) else { return };
        let sid = env.sid.clone();
        if let Some(from) = self.own_sender(ctx, env.src) {
            if let Msg::Pong { nonce } = msg {
                if let Some((n, _, q)) = &mut self.probe {
                    q.insert(from, nonce);
                    if q.peek() == Some(*n) {
                        self.probe = None;
                    }
                }
                return;
            }
            if let Msg::SwapPess { aid_a, pk_b2, t_prime, digest, artifact } = msg {
                return self.on_pess(ctx, &sid, from, (aid_a, pk_b2, t_prime, digest), artifact);
            }
            if let Msg::BackupOk { artifact: BackupArtifact::SharePuzzles { .. }, .. } = &msg {
                return self.on_shares(ctx, &sid, from, msg);
            }
            if self.agreed(&sid, from, &msg) {
                self.on_te_reply(ctx, &sid, msg);
            }
            return;
        }
        if !matches!(ctx.dir.role(env.src), Some(Role::User(_))) {
            return;
        }
        match msg {
            Msg::PayNotify { aid, payer } => {
                self.start(ctx, &sid, OpKind::PayIn { aid: aid.clone(), payer: payer.clone() });
                self.to_te(ctx, &sid, &Msg::PayAck { aid, payer });
            }
            Msg::PayReceipt { aid } => {
                if matches!(self.ops.get(&sid), Some(Op { kind: OpKind::Pay { aid: a, .. }, .. }) if *a == aid) {
                    self.relinquish(ctx, &sid, &aid);
                    self.finish(ctx, &sid, "ok");
                }
            }
            Msg::SwapOffer { aid_a, aid_b, pk_a2, pk_b2, initiator } => {
                if pk_b2 != self.wallet.pk {
                    return;
                }
                self.start(ctx, &sid, OpKind::SwapResp { aid_a: aid_a.clone(), aid_b: aid_b.clone(), pess: false });
                self.to_te(ctx, &sid, &Msg::SwapAck { aid_a, aid_b, pk_a2, pk_b2, initiator });
            }
            _ => {}
        }
    }

    fn on_te_reply(&mut self, ctx: &mut Ctx, sid: &str, msg: Msg) {
        let Some(op) = self.ops.get(sid).cloned() else { return };
        let now = ctx.now;
        match (op.kind, msg) {
            (OpKind::Deposit { aid, release, .. }, Msg::GetPkOk { pk, .. }) => {
                if let Some(o) = self.ops.get_mut(sid) {
                    o.kind = OpKind::Deposit { aid: aid.clone(), release, pk: Some(pk) };
                }
                self.request_backup(ctx, &format!("{sid}/bk/{}", self.name), aid, release, Some(sid.to_string()));
            }
            (OpKind::Backup { aid, parent }, Msg::BackupOk { pk_r, release, artifact, .. }) => {
                let entry = new_entry(sid, aid.clone(), artifact, pk_r, release, now, EntrySource::Backup, None);
                self.add_entry(ctx, entry);
                self.finish(ctx, sid, "ok");
                self.after_backup(ctx, parent);
            }
            (OpKind::Pay { .. }, Msg::PayStarted { .. }) => {}
            (OpKind::PayIn { aid, .. }, Msg::PayComplete { release, .. }) => {
                self.finish(ctx, sid, "ok");
                self.request_backup(ctx, &format!("{sid}/bk/{}", self.name), aid, release, Some(sid.to_string()));
            }
            (OpKind::SwapInit { aid_b, .. }, Msg::SwapReceived { aid, release }) if aid == aid_b => {
                self.request_backup(ctx, &format!("{sid}/bk/{}", self.name), aid_b, release, Some(sid.to_string()));
            }
            (OpKind::SwapInit { aid_a, aid_b }, Msg::SwapComplete { aid, release }) if aid == aid_b => {
                self.relinquish(ctx, sid, &aid_a);
                self.finish(ctx, sid, "ok");
                let bk = format!("{sid}/bk/{}", self.name);
                if !self.vault.all().any(|e| e.sid == bk) {
                    self.request_backup(ctx, &bk, aid_b, release, None);
                }
            }
            (OpKind::SwapResp { aid_a, aid_b, .. }, Msg::SwapComplete { aid, release }) if aid == aid_a => {
                self.relinquish(ctx, sid, &aid_b);
                self.finish(ctx, sid, "ok");
                self.request_backup(ctx, &format!("{sid}/bk/{}", self.name), aid_a, release, None);
            }
            (OpKind::Exit { .. }, Msg::ExitOk { tx }) => {
                self.submit(ctx, sid, tx, "exit");
                self.finish(ctx, sid, "ok");
            }
            (kind, Msg::OpAbort { reason, .. }) => {
                self.log(ctx, "user.abort", sid, json!({"op": kind.label(), "reason": reason}));
                self.finish(ctx, sid, "abort");
                if let OpKind::Backup { parent: Some(p), .. } = kind {
                    if matches!(self.ops.get(&p), Some(Op { kind: OpKind::Deposit { .. }, .. })) {
                        self.finish(ctx, &p, "abort");
                    }
                }
            }
            _ => {}
        }
    }

    fn after_backup(&mut self, ctx: &mut Ctx, parent: Option<String>) {
        let Some(p) = parent else { return };
        let Some(op) = self.ops.get(&p).cloned() else { return };
        match op.kind {
            OpKind::Deposit { aid, pk: Some(pk), .. } => {
                let ok = ctx.ledger.genesis_mint(aid.clone(), pk).is_ok();
                self.log(ctx, "user.fund", &p, json!({"aid": aid, "pk": pk, "ok": ok}));
                self.finish(ctx, &p, if ok { "ok" } else { "abort" });
            }
            OpKind::PayIn { aid, payer } => self.to_user(ctx, &p, &payer, &Msg::PayReceipt { aid }),
            OpKind::SwapInit { aid_b, .. } => self.to_te(ctx, &p, &Msg::SwapConfirm { aid: aid_b }),
            _ => {}
        }
    }

    fn on_pess(&mut self, ctx: &mut Ctx, sid: &str, from: u32, key: PessKey, artifact: BackupArtifact) {
        let q = self.cfg.quorum;
        let (tracker, arts) = self.pess.entry(sid.to_string()).or_insert_with(|| (QuorumTracker::new(q), BTreeMap::new()));
        tracker.insert(from, key.clone());
        arts.entry(from).or_insert((key, artifact));
        let Some(agreed) = tracker.check() else { return };
        let chosen = arts.values().find(|(k, _)| *k == agreed).map(|(_, a)| a.clone());
        let Some(artifact) = chosen else { return };
        let Some(Op { kind: OpKind::SwapResp { aid_a, aid_b, .. }, .. }) = self.ops.get(sid).cloned() else { return };
        if agreed.0 != aid_a {
            return;
        }
        if let Some(o) = self.ops.get_mut(sid) {
            o.kind = OpKind::SwapResp { aid_a: aid_a.clone(), aid_b: aid_b.clone(), pess: true };
        }
        self.recover.remove(&aid_b);
        let (_, pk_b2, t_prime, digest) = agreed;
        let entry = new_entry(sid, aid_a.clone(), artifact, pk_b2, t_prime, ctx.now, EntrySource::Contingent, Some(digest));
        self.add_entry(ctx, entry);
        self.watchers.push(WatcherRule {
            sid: sid.to_string(),
            watch_aid: aid_a,
            deadline: t_prime,
            action: WatchAction::SubmitOwnBackup,
            fired: false,
        });
    }

    fn on_shares(&mut self, ctx: &mut Ctx, sid: &str, from: u32, msg: Msg) {
        let Msg::BackupOk { artifact: BackupArtifact::SharePuzzles { aid, pk_r, pk_a, payload, threshold, puzzles }, release, .. } =
            msg
        else {
            return;
        };
        let Some(&(_, puzzle)) = puzzles.first() else { return };
        let key: ShareKey = (aid.clone(), pk_r, pk_a, release, payload.clone(), threshold);
        let q = self.cfg.quorum;
        let (got, fired) = self.shares.entry(sid.to_string()).or_default();
        got.entry(from).or_insert((key.clone(), puzzle));
        let matching: Vec<(u32, IdealPuzzle)> =
            got.iter().filter(|(_, (k, _))| *k == key).map(|(i, (_, p))| (*i, *p)).collect();
        if *fired {
            // Late shares still help if some earlier ones turn out bad.
            if let Some(e) = self
                .vault
                .entries
                .get_mut(&aid)
                .and_then(|v| v.iter_mut().rev().find(|e| e.sid == sid && e.solved_tx.is_none()))
            {
                if !e.progress.iter().any(|p| p.index == from) {
                    let mut p = progress(from, puzzle);
                    ctx.tlp.request_solve(self.id.0 as u64, p.cur);
                    p.pending = true;
                    e.progress.push(p);
                }
            }
            return;
        }
        if matching.len() < q {
            return;
        }
        *fired = true;
        let artifact = BackupArtifact::SharePuzzles { aid: aid.clone(), pk_r, pk_a, payload, threshold, puzzles: matching };
        let msg = Msg::BackupOk { aid, pk_r, release, artifact };
        self.on_te_reply(ctx, sid, msg);
    }

    /// Per-round work: puzzle steps, stalled operations, recovery and
    /// watchers.
    pub fn on_round(&mut self, ctx: &mut Ctx) {
        let now = ctx.now;
        self.solve(ctx);
        let stalled: Vec<String> = self
            .ops
            .iter()
            .filter(|(_, o)| !o.done && now >= o.started + self.cfg.op_timeout)
            .map(|(s, _)| s.clone())
            .collect();
        for sid in stalled {
            self.finish(ctx, &sid, "timeout");
        }
        self.run_probe(ctx);
        for aid in self.recovering() {
            let fresh = self.vault.newest(&aid).is_some_and(|e| !e.submitted);
            if fresh && self.try_recover(ctx, &aid).is_ok() {
                self.recover.remove(&aid);
                self.requested.remove(&aid);
            }
        }
        if self.cfg.submit_stale {
            let stale: Vec<(String, LedgerTx)> = self
                .vault
                .all_mut()
                .filter(|e| e.relinquished && !e.submitted && e.release <= now)
                .filter_map(|e| {
                    let tx = e.solved_tx.clone()?;
                    e.submitted = true;
                    Some((e.sid.clone(), tx))
                })
                .collect();
            for (sid, tx) in stale {
                self.submit(ctx, &sid, tx, "stale");
            }
        }
        self.run_watchers(ctx);
    }

    /// Pings the trusted entity; once a ping goes unanswered past the
    /// operation timeout, every asset still backed in the vault is settled.
    fn run_probe(&mut self, ctx: &mut Ctx) {
        let now = ctx.now;
        if self.te_dead || self.cfg.probe_every == 0 || !self.cfg.auto_recover {
            return;
        }
        match &self.probe {
            Some((_, sent, _)) if now >= sent + self.cfg.op_timeout => {
                self.te_dead = true;
                let held: Vec<AssetId> =
                    self.vault.entries.keys().filter(|a| self.vault.newest(a).is_some()).cloned().collect();
                self.log(ctx, "user.te_dead", "", json!({"assets": held}));
                self.recover.extend(held);
            }
            Some(_) => {}
            None if now.is_multiple_of(self.cfg.probe_every) && !self.vault.is_empty() => {
                self.nonce += 1;
                let sid = format!("ping:{}:{}", self.name, self.nonce);
                self.probe = Some((self.nonce, now, QuorumTracker::new(self.cfg.quorum)));
                self.to_te(ctx, &sid, &Msg::Ping { nonce: self.nonce });
            }
            None => {}
        }
    }

    fn solve(&mut self, ctx: &mut Ctx) {
        let now = ctx.now;
        let solver = self.id.0 as u64;
        let outs = ctx.tlp.take_outputs(solver);
        let mut solved = Vec::new();
        for e in self.vault.all_mut() {
            if e.progress.is_empty() || e.solved_tx.is_some() {
                continue;
            }
            for p in e.progress.iter_mut().filter(|p| p.pending && p.msg.is_none()) {
                if let Some((_, out)) = outs.iter().find(|(i, _)| *i == p.cur) {
                    p.cur = *out;
                    p.steps += 1;
                    p.pending = false;
                    p.msg = ctx.tlp.get_msg(&p.puzzle, &p.cur);
                }
            }
            finish_solve(e, now);
            if e.solved_tx.is_some() {
                solved.push((e.sid.clone(), e.aid.clone(), e.release));
                continue;
            }
            for p in e.progress.iter_mut().filter(|p| !p.pending && p.msg.is_none()) {
                ctx.tlp.request_solve(solver, p.cur);
                p.pending = true;
            }
        }
        for (sid, aid, release) in solved {
            self.log(ctx, "user.solved", &sid, json!({"aid": aid, "release": release}));
        }
    }

    fn run_watchers(&mut self, ctx: &mut Ctx) {
        let now = ctx.now;
        let mut fire = Vec::new();
        for (k, w) in self.watchers.iter().enumerate().filter(|(_, w)| !w.fired) {
            match w.action {
                WatchAction::SubmitOwnBackup => {
                    if now < w.deadline || self.completed_ok.contains(&w.sid) {
                        continue;
                    }
                    let tx = self
                        .vault
                        .entries
                        .get(&w.watch_aid)
                        .and_then(|v| v.iter().find(|e| e.sid == w.sid && e.source == EntrySource::Contingent))
                        .and_then(|e| e.solved_tx.clone());
                    if let Some(tx) = tx {
                        fire.push((k, tx));
                    }
                }
                WatchAction::ExtractPayloadAndSubmit => {
                    let prev = now.saturating_sub(1);
                    let found = ctx
                        .ledger
                        .observe(prev)
                        .into_iter()
                        .filter(|e| e.applied && e.tx.aid == w.watch_aid && !e.tx.payload.is_empty())
                        .find_map(|e| LedgerTx::decode(&e.tx.payload).ok());
                    if let Some(m1) = found {
                        fire.push((k, m1));
                    }
                }
            }
        }
        for (k, tx) in fire {
            self.watchers[k].fired = true;
            for e in self.vault.all_mut().filter(|e| e.solved_tx.as_ref() == Some(&tx)) {
                e.submitted = true;
            }
            let (sid, action) = (self.watchers[k].sid.clone(), self.watchers[k].action);
            self.log(ctx, "user.watch", &sid, json!({"action": action, "aid": tx.aid, "digest": digest_hex(&tx.encode())}));
            self.submit(ctx, &sid, tx, "watcher");
        }
    }
}

fn progress(index: u32, puzzle: IdealPuzzle) -> PuzzleProgress {
    PuzzleProgress { index, puzzle, cur: puzzle.st0, steps: 0, pending: false, msg: None }
}

#[allow(clippy::too_many_arguments)]
fn new_entry(
    sid: &str,
    aid: AssetId,
    artifact: BackupArtifact,
    pk_r: PublicKey,
    release: Round,
    now: Round,
    source: EntrySource,
    digest: Option<String>,
) -> VaultEntry {
    VaultEntry {
        sid: sid.to_string(),
        aid,
        artifact,
        pk_r,
        release,
        created: now,
        source,
        digest,
        solved_tx: None,
        solved_at: None,
        relinquished: false,
        submitted: false,
        progress: Vec::new(),
    }
}

/// Turns solved puzzle contents into a ledger transaction when possible.
fn finish_solve(e: &mut VaultEntry, now: Round) {
    if e.solved_tx.is_some() {
        return;
    }
    let tx = match &e.artifact {
        BackupArtifact::Signed { tx } => Some(tx.clone()),
        BackupArtifact::Puzzle { .. } => e
            .progress
            .first()
            .and_then(|p| p.msg.as_ref())
            .and_then(|m| LedgerTx::decode(m).ok())
            .filter(|tx| e.digest.as_ref().is_none_or(|d| *d == digest_hex(&tx.encode()))),
        BackupArtifact::SharePuzzles { aid, pk_r, pk_a, payload, threshold, .. } => {
            let points: Vec<(u32, [u8; 32])> =
                e.progress.iter().filter_map(|p| p.msg.as_deref().and_then(decode_share)).collect();
            rebuild_key(&points, *threshold, pk_a)
                .map(|sk| LedgerTx::sign(aid.clone(), *pk_r, None, payload.clone(), &sk))
        }
    };
    if tx.is_some() {
        e.solved_tx = tx;
        e.solved_at = Some(now);
    }
}

/// Interpolates the first `t`-subset of shares whose key matches `pk`.
pub fn rebuild_key(points: &[(u32, [u8; 32])], t: usize, pk: &PublicKey) -> Option<SecretKey> {
    let pts: Vec<_> = points
        .iter()
        .filter_map(|(i, b)| SecretKey::from_bytes(*b).ok().map(|s| (*i, s.scalar())))
        .collect();
    if t == 0 || pts.len() < t {
        return None;
    }
    let mut idx: Vec<usize> = (0..t).collect();
    loop {
        let subset: Vec<_> = idx.iter().map(|&k| pts[k]).collect();
        let sk = SecretKey::from_scalar(interpolate_at_zero(&subset));
        if sk.public() == *pk {
            return Some(sk);
        }
        // next combination in lexicographic order
        let mut k = t;
        loop {
            if k == 0 {
                return None;
            }
            k -= 1;
            if idx[k] < pts.len() - t + k {
                break;
            }
        }
        idx[k] += 1;
        for j in k + 1..t {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
