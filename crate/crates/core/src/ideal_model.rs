//! Reference model of delegated ownership. Each operation is a fixed
//! sequence of steps applied to per-party asset lists, and the protocol
//! drives it through hooks derived from the step events it logs. Comparing
//! the model's end state with the real one catches protocol behaviour that
//! has no counterpart in the model.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::clock_net::{Round, Trace};
use crate::crypto::PublicKey;
use crate::harness::sim::Snapshot;
use crate::ledger::AssetId;
use crate::protocol::LockState;
use crate::te_tee::{backup_timing, TeeError};

pub const DEPOSIT_STEPS: &[&str] = &["create"];
pub const BACKUP_STEPS: &[&str] = &["lock", "sign", "unlock"];
pub const PAY_STEPS: &[&str] = &["lock", "move", "accept"];
pub const SWAP_STEPS: &[&str] = &["lock_a", "move_a", "commit", "sign_a", "sign_b", "move_b", "unlock_a"];

pub fn steps_of(op: &str) -> Option<&'static [&'static str]> {
    match op {
        "deposit" => Some(DEPOSIT_STEPS),
        "backup" => Some(BACKUP_STEPS),
        "pay" => Some(PAY_STEPS),
        "swap" => Some(SWAP_STEPS),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdealError {
    #[error("no ideal step {op}.{step}")]
    UnknownStep { op: String, step: String },
    #[error("step {step} out of order in session {sid}")]
    OutOfOrder { sid: String, step: String },
    #[error("hook data lacks {0}")]
    BadData(&'static str),
    #[error("{0}")]
    Check(#[from] TeeError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdealAsset {
    pub t_release: Round,
    pub state: LockState,
    pub backed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdealParty {
    pub assets: BTreeMap<AssetId, IdealAsset>,
    pub backups: BTreeSet<(AssetId, PublicKey, Round)>,
}

/// A request to run one step of one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HookEvent {
    pub round: Round,
    pub sid: String,
    pub op: String,
    pub step: String,
    pub party: String,
    pub data: Value,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Params {
    Deposit,
    Backup { party: String, aid: AssetId, release: Round, pk_r: PublicKey },
    Pay { payer: String, payee: String, aid: AssetId },
    Swap { ini: String, res: String, aid_a: AssetId, aid_b: AssetId, pk_a2: PublicKey, pk_b2: PublicKey, t_prime: Round },
}

#[derive(Clone, Debug)]
struct Session {
    steps: &'static [&'static str],
    next: usize,
    last: Round,
    params: Params,
}

/// An entitlement the ledger shadow grants once a contingent transaction
/// lands: `(aid, pk)` applied grants `party` the triple.
type Contingent = (String, AssetId, PublicKey, Round);

#[derive(Clone, Debug)]
pub struct IdealModel {
    pub delta: Round,
    pub parties: BTreeMap<String, IdealParty>,
    sids: BTreeSet<String>,
    sessions: BTreeMap<String, Session>,
    /// Round at which each `(party, aid, pk, release)` entitlement appeared.
    granted: BTreeMap<(String, AssetId, PublicKey, Round), Round>,
    contingent: BTreeMap<(AssetId, PublicKey), Contingent>,
}

fn field<'a>(d: &'a Value, k: &'static str) -> Result<&'a Value, IdealError> {
    d.get(k).filter(|v| !v.is_null()).ok_or(IdealError::BadData(k))
}

fn aid_of(d: &Value, k: &'static str) -> Result<AssetId, IdealError> {
    field(d, k)?.as_str().map(AssetId::new).ok_or(IdealError::BadData(k))
}

fn str_of(d: &Value, k: &'static str) -> Result<String, IdealError> {
    field(d, k)?.as_str().map(str::to_string).ok_or(IdealError::BadData(k))
}

fn round_of(d: &Value, k: &'static str) -> Result<Round, IdealError> {
    field(d, k)?.as_u64().ok_or(IdealError::BadData(k))
}

fn pk_of(d: &Value, k: &'static str) -> Result<PublicKey, IdealError> {
    serde_json::from_value(field(d, k)?.clone()).map_err(|_| IdealError::BadData(k))
}

impl IdealModel {
    pub fn new(delta: Round) -> Self {
        IdealModel {
            delta,
            parties: BTreeMap::new(),
            sids: BTreeSet::new(),
            sessions: BTreeMap::new(),
            granted: BTreeMap::new(),
            contingent: BTreeMap::new(),
        }
    }

    pub fn party(&self, name: &str) -> Option<&IdealParty> {
        self.parties.get(name)
    }

    pub fn asset(&self, party: &str, aid: &AssetId) -> Option<&IdealAsset> {
        self.parties.get(party).and_then(|p| p.assets.get(aid))
    }

    /// Party whose list currently contains `aid`.
    pub fn holder(&self, aid: &AssetId) -> Option<&str> {
        self.parties.iter().find(|(_, p)| p.assets.contains_key(aid)).map(|(n, _)| n.as_str())
    }

    fn unlocked(&self, party: &str, aid: &AssetId) -> Result<&IdealAsset, TeeError> {
        let a = self.asset(party, aid).ok_or(TeeError::NotOwner)?;
        if a.state != LockState::Unlocked {
            return Err(TeeError::AssetLocked);
        }
        Ok(a)
    }

    fn asset_mut(&mut self, party: &str, aid: &AssetId) -> Result<&mut IdealAsset, TeeError> {
        self.parties.get_mut(party).and_then(|p| p.assets.get_mut(aid)).ok_or(TeeError::NotOwner)
    }

    fn set_state(&mut self, party: &str, aid: &AssetId, state: LockState) -> Result<(), TeeError> {
        self.asset_mut(party, aid)?.state = state;
        Ok(())
    }

    fn transfer(&mut self, from: &str, to: &str, aid: &AssetId) -> Result<(), TeeError> {
        let a = self.parties.get_mut(from).and_then(|p| p.assets.remove(aid)).ok_or(TeeError::NotOwner)?;
        self.parties.entry(to.to_string()).or_default().assets.insert(aid.clone(), a);
        Ok(())
    }

    fn grant(&mut self, party: &str, e: (AssetId, PublicKey, Round), round: Round) {
        self.granted.entry((party.to_string(), e.0.clone(), e.1, e.2)).or_insert(round);
        self.parties.entry(party.to_string()).or_default().backups.insert(e);
    }

    /// Entitlement learned from the ledger rather than handed out as a
    /// backup, so it never enters the backup list.
    fn grant_observed(&mut self, party: &str, e: (AssetId, PublicKey, Round), round: Round) {
        self.granted.entry((party.to_string(), e.0, e.1, e.2)).or_insert(round);
    }

    /// Entitlement of `party` to move `aid` to `pk` usable at `round`.
    pub fn entitled(&self, party: &str, aid: &AssetId, pk: &PublicKey, round: Round) -> bool {
        self.granted
            .iter()
            .any(|((p, a, k, rel), g)| p == party && a == aid && k == pk && *rel <= round && *g <= round)
    }

    /// Applies one hook. A rejected hook leaves the model unchanged.
    pub fn apply(&mut self, h: &HookEvent) -> Result<(), IdealError> {
        let unknown = || IdealError::UnknownStep { op: h.op.clone(), step: h.step.clone() };
        let steps = steps_of(&h.op).ok_or_else(unknown)?;
        let idx = steps.iter().position(|s| *s == h.step).ok_or_else(unknown)?;
        let out_of_order = || IdealError::OutOfOrder { sid: h.sid.clone(), step: h.step.clone() };
        if idx == 0 {
            if self.sids.contains(&h.sid) {
                return Err(TeeError::StaleSid.into());
            }
            let params = self.open(h)?;
            self.sids.insert(h.sid.clone());
            self.sessions.insert(h.sid.clone(), Session { steps, next: 1, last: h.round, params });
            return Ok(());
        }
        let sess = self.sessions.get(&h.sid).ok_or_else(out_of_order)?;
        // Accepting a payment happens strictly after the move.
        let strict = h.op == "pay" && h.step == "accept";
        if sess.steps != steps || sess.next != idx || h.round < sess.last || (strict && h.round == sess.last) {
            return Err(out_of_order());
        }
        let params = sess.params.clone();
        self.advance(h, &params)?;
        let sess = self.sessions.get_mut(&h.sid).expect("checked");
        sess.next += 1;
        sess.last = h.round;
        Ok(())
    }

    fn open(&mut self, h: &HookEvent) -> Result<Params, IdealError> {
        let d = &h.data;
        let party = h.party.as_str();
        match h.op.as_str() {
            "deposit" => {
                let (aid, release) = (aid_of(d, "aid")?, round_of(d, "release")?);
                if self.holder(&aid).is_some() {
                    return Err(TeeError::DuplicateAsset.into());
                }
                if release < h.round {
                    return Err(TeeError::PastDeadline.into());
                }
                let asset = IdealAsset { t_release: release, state: LockState::Unlocked, backed: false };
                self.parties.entry(party.to_string()).or_default().assets.insert(aid, asset);
                Ok(Params::Deposit)
            }
            "backup" => {
                let (aid, release, pk_r) = (aid_of(d, "aid")?, round_of(d, "release")?, pk_of(d, "pk_r")?);
                let a = self.unlocked(party, &aid)?;
                backup_timing(a.t_release, a.backed, release, h.round, self.delta)?;
                self.set_state(party, &aid, LockState::Locked)?;
                Ok(Params::Backup { party: party.to_string(), aid, release, pk_r })
            }
            "pay" => {
                let (aid, payee) = (aid_of(d, "aid")?, str_of(d, "payee")?);
                if payee == party {
                    return Err(TeeError::SelfPay.into());
                }
                self.unlocked(party, &aid)?;
                self.set_state(party, &aid, LockState::Locked)?;
                Ok(Params::Pay { payer: party.to_string(), payee, aid })
            }
            "swap" => {
                let (aid_a, aid_b) = (aid_of(d, "aid_a")?, aid_of(d, "aid_b")?);
                let res = str_of(d, "responder")?;
                let (pk_a2, pk_b2) = (pk_of(d, "pk_a2")?, pk_of(d, "pk_b2")?);
                if res == party {
                    return Err(TeeError::SelfPay.into());
                }
                self.unlocked(party, &aid_a)?;
                self.set_state(party, &aid_a, LockState::Locked)?;
                Ok(Params::Swap { ini: party.to_string(), res, aid_a, aid_b, pk_a2, pk_b2, t_prime: 0 })
            }
            _ => unreachable!("filtered by steps_of"),
        }
    }

    fn advance(&mut self, h: &HookEvent, params: &Params) -> Result<(), IdealError> {
        let delta = self.delta;
        match (params, h.step.as_str()) {
            (Params::Backup { party, aid, release, pk_r }, "sign") => {
                let a = self.asset_mut(party, aid)?;
                a.t_release = *release;
                a.backed = true;
                self.grant(party, (aid.clone(), *pk_r, *release), h.round);
            }
            (Params::Backup { party, aid, .. }, "unlock") => self.set_state(party, aid, LockState::Unlocked)?,
            (Params::Pay { payer, payee, aid }, "move") => self.transfer(payer, payee, aid)?,
            (Params::Pay { payee, aid, .. }, "accept") => {
                let a = self.asset_mut(payee, aid)?;
                a.t_release = a.t_release.saturating_sub(delta);
                a.state = LockState::Unlocked;
                a.backed = false;
            }
            (Params::Swap { ini, res, aid_a, .. }, "move_a") => self.transfer(ini, res, aid_a)?,
            (Params::Swap { res, aid_a, aid_b, .. }, "commit") => {
                let rel_a = self.asset(res, aid_a).ok_or(TeeError::NotOwner)?.t_release;
                let rel_b = self.unlocked(res, aid_b)?.t_release;
                if rel_b <= rel_a || rel_b - rel_a <= 2 * delta {
                    return Err(TeeError::MarginViolation.into());
                }
                let t_prime = rel_a.saturating_sub(delta);
                self.asset_mut(res, aid_a)?.t_release = t_prime;
                let b = self.asset_mut(res, aid_b)?;
                b.t_release = t_prime + 2 * delta;
                b.state = LockState::Locked;
                if let Some(Params::Swap { t_prime: t, .. }) = self.sessions.get_mut(&h.sid).map(|s| &mut s.params) {
                    *t = t_prime;
                }
            }
            (Params::Swap { .. }, "sign_a") => {}
            (Params::Swap { ini, res, aid_a, aid_b, pk_a2, pk_b2, .. }, "sign_b") => {
                let t_prime = self.asset(res, aid_a).ok_or(TeeError::NotOwner)?.t_release;
                self.grant(res, (aid_a.clone(), *pk_b2, t_prime), h.round);
                self.contingent.insert((aid_a.clone(), *pk_b2), (ini.clone(), aid_b.clone(), *pk_a2, t_prime));
            }
            (Params::Swap { ini, res, aid_b, .. }, "move_b") => {
                self.transfer(res, ini, aid_b)?;
                let b = self.asset_mut(ini, aid_b)?;
                b.state = LockState::Unlocked;
                b.backed = false;
            }
            (Params::Swap { res, aid_a, .. }, "unlock_a") => {
                let a = self.asset_mut(res, aid_a)?;
                a.state = LockState::Unlocked;
                a.backed = false;
            }
            _ => return Err(IdealError::UnknownStep { op: h.op.clone(), step: h.step.clone() }),
        }
        Ok(())
    }

    /// Runs the steps of one operation in a single round, stopping before
    /// `block_before` if given. Returns the number of steps applied.
    pub fn run_op(
        &mut self,
        round: Round,
        sid: &str,
        op: &str,
        party: &str,
        data: Value,
        block_before: Option<&str>,
    ) -> Result<usize, IdealError> {
        let steps = steps_of(op).ok_or(IdealError::UnknownStep { op: op.into(), step: String::new() })?;
        let mut n = 0;
        for s in steps {
            if Some(*s) == block_before {
                break;
            }
            let mut r = round;
            // Keep the strict move/accept gap.
            if op == "pay" && *s == "accept" {
                r += 1;
            }
            self.apply(&HookEvent { round: r, sid: sid.into(), op: op.into(), step: (*s).into(), party: party.into(), data: data.clone() })?;
            n += 1;
        }
        Ok(n)
    }

    /// Ledger shadow: whether a submission by `party` moving `aid` to `pk`
    /// should apply given the current shadow owners, updating them if so.
    fn shadow_apply(
        &mut self,
        owners: &mut BTreeMap<AssetId, Option<PublicKey>>,
        party: &str,
        aid: &AssetId,
        pk: &PublicKey,
        submitted: Round,
        included: Round,
    ) -> bool {
        let held_by_ta = matches!(owners.get(aid), Some(None));
        if !held_by_ta || !self.entitled(party, aid, pk, submitted) {
            return false;
        }
        owners.insert(aid.clone(), Some(*pk));
        if let Some((ini, aid_b, pk_a2, t)) = self.contingent.get(&(aid.clone(), *pk)).cloned() {
            self.grant_observed(&ini, (aid_b, pk_a2, t), included);
        }
        true
    }
}

/// How an asset looks from outside: who holds it and whether it can move.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Projected {
    Unlocked { holder: String, t_release: Round },
    /// `t_release` is `None` when the holder's trusted entity is gone.
    Locked { holder: String, t_release: Option<Round> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetDiff {
    pub aid: AssetId,
    pub real: Option<Projected>,
    pub ideal: Option<Projected>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitlementDiff {
    pub party: String,
    pub only_real: Vec<(AssetId, PublicKey, Round)>,
    pub only_ideal: Vec<(AssetId, PublicKey, Round)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffVerdict {
    /// Set when the run lies outside what the model can describe.
    pub invalid: Option<String>,
    pub hooks: usize,
    /// Protocol steps the model refused.
    pub gaps: Vec<String>,
    pub assets: Vec<AssetDiff>,
    pub entitlements: Vec<EntitlementDiff>,
    pub ledger: Vec<String>,
}

impl DiffVerdict {
    pub fn is_equal(&self) -> bool {
        self.invalid.is_none()
            && self.gaps.is_empty()
            && self.assets.is_empty()
            && self.entitlements.is_empty()
            && self.ledger.is_empty()
    }
}

fn group_of(node: &str) -> &str {
    node.rsplit_once(".n").map_or(node, |(g, _)| g)
}

/// Turns the step events of a trace into hooks. Fails with a reason when
/// the run is outside the model's scope.
pub fn hooks_from_trace(trace: &Trace) -> Result<Vec<HookEvent>, String> {
    let setup = trace.of_kind("sim.setup").last().ok_or("trace has no setup event")?;
    let wallets: BTreeMap<String, Value> = setup
        .detail
        .get("wallets")
        .and_then(|w| serde_json::from_value(w.clone()).ok())
        .unwrap_or_default();
    let t = setup.detail.get("dtc").and_then(|d| d.get("t")).and_then(Value::as_u64);
    let faults = setup.detail.get("faults").and_then(Value::as_array).cloned().unwrap_or_default();
    let names: Vec<&str> = setup
        .detail
        .get("participants")
        .and_then(Value::as_object)
        .map(|ps| ps.values().filter_map(Value::as_str).collect())
        .unwrap_or_default();
    let crashed: BTreeSet<&str> = faults
        .iter()
        .filter(|f| f.get("kind").and_then(Value::as_str) == Some("crash"))
        .filter_map(|f| f.get("target").and_then(Value::as_str))
        .collect();
    for c in &crashed {
        if wallets.contains_key(*c) {
            return Err(format!("user {c} crashes"));
        }
        if t.is_some() {
            let g = group_of(c);
            if !names.iter().filter(|n| **n != g && group_of(n) == g).all(|n| crashed.contains(n)) {
                return Err(format!("partial crash of group {g}"));
            }
        }
    }
    let mut actions: BTreeMap<&str, &Value> = BTreeMap::new();
    for a in trace.of_kind("sim.action") {
        if a.detail.get("op").and_then(Value::as_str) == Some("exit") {
            return Err("exit payments have no ideal counterpart".into());
        }
        actions.insert(a.sid.as_str(), &a.detail);
    }
    let enrich = |sid: &str, op: &str, step: &str, data: &mut Value| {
        let Some(a) = actions.get(sid) else { return };
        match (op, step) {
            ("pay", "lock") => data["payee"] = a["payee"].clone(),
            ("swap", "lock_a") => {
                data["aid_a"] = a["aid_a"].clone();
                data["aid_b"] = a["aid_b"].clone();
                data["responder"] = a["responder"].clone();
                let w = |k: &str| a.get(k).and_then(Value::as_str).and_then(|n| wallets.get(n)).cloned();
                data["pk_a2"] = w("initiator").unwrap_or(Value::Null);
                data["pk_b2"] = w("responder").unwrap_or(Value::Null);
            }
            _ => {}
        }
    };
    let mut hooks = Vec::new();
    let mut host_of: BTreeMap<String, String> = BTreeMap::new();
    for e in trace.of_kind("te.step") {
        if let Some(p) = e.detail.get("party").and_then(Value::as_str) {
            host_of.insert(p.to_string(), e.src.clone());
        }
    }
    for a in actions.values() {
        if a.get("op").and_then(Value::as_str) == Some("pay") {
            let (x, y) = (a["payer"].as_str().unwrap_or_default(), a["payee"].as_str().unwrap_or_default());
            if host_of.get(x).is_some_and(|h| host_of.get(y) == Some(h)) {
                return Err(format!("{x} and {y} share an enclave"));
            }
        }
    }
    let byz: BTreeSet<&str> = trace
        .of_kind("fault.behaviour")
        .filter(|e| e.detail.get("behaviour").and_then(Value::as_str) != Some("honest"))
        .map(|e| e.src.as_str())
        .collect();
    let mut counts: BTreeMap<(String, String, String), u64> = BTreeMap::new();
    for e in &trace.events {
        let op = e.detail.get("op").and_then(Value::as_str).unwrap_or_default();
        let step = e.detail.get("step").and_then(Value::as_str).unwrap_or_default();
        let party = e.detail.get("party").and_then(Value::as_str).unwrap_or_default().to_string();
        if op == "exit" && (e.kind == "te.step" || e.kind == "dtc.step") {
            return Err("exit payments have no ideal counterpart".into());
        }
        let fire = match e.kind.as_str() {
            "te.step" => true,
            "dtc.step" => {
                if byz.contains(e.src.as_str()) || step == "relinquish" {
                    continue;
                }
                let g = group_of(&e.src);
                let f = byz.iter().filter(|b| group_of(b) == g).count() as u64;
                let need = t.unwrap_or(1).saturating_sub(f).max(1);
                let c = counts.entry((e.sid.clone(), op.to_string(), step.to_string())).or_default();
                *c += 1;
                *c == need
            }
            _ => false,
        };
        if !fire {
            continue;
        }
        let mut data = e.detail.clone();
        enrich(&e.sid, op, step, &mut data);
        let mk = |step: &str| HookEvent {
            round: e.round,
            sid: e.sid.clone(),
            op: op.to_string(),
            step: step.to_string(),
            party: party.clone(),
            data: data.clone(),
        };
        // The enclave signs a backup atomically.
        if e.kind == "te.step" && op == "backup" && step == "sign" {
            hooks.extend(BACKUP_STEPS.iter().map(|s| mk(s)));
        } else {
            hooks.push(mk(step));
        }
    }
    Ok(hooks)
}

fn project_real(snap: &Snapshot) -> BTreeMap<AssetId, Projected> {
    let dead: BTreeSet<&str> = snap.dead.iter().map(String::as_str).collect();
    let mut by_aid: BTreeMap<&AssetId, Vec<_>> = BTreeMap::new();
    for h in &snap.holdings {
        by_aid.entry(&h.aid).or_default().push(h);
    }
    by_aid
        .into_iter()
        .map(|(aid, hs)| {
            let alive = |h: &&&crate::harness::sim::Holding| h.live && !dead.contains(h.party.as_str());
            // The newest holder always has the earliest release.
            let pick = |state| hs.iter().filter(alive).filter(|h| h.state == state).min_by_key(|h| h.t_release);
            let p = if let Some(h) = pick(LockState::Unlocked) {
                Projected::Unlocked { holder: h.party.clone(), t_release: h.t_release }
            } else if let Some(h) = pick(LockState::Locked) {
                Projected::Locked { holder: h.party.clone(), t_release: Some(h.t_release) }
            } else {
                let h = hs.iter().min_by_key(|h| h.t_release).expect("non-empty");
                Projected::Locked { holder: h.party.clone(), t_release: None }
            };
            (aid.clone(), p)
        })
        .collect()
}

fn project_ideal(m: &IdealModel, dead: &[String]) -> BTreeMap<AssetId, Projected> {
    let mut out = BTreeMap::new();
    for (party, p) in &m.parties {
        for (aid, a) in &p.assets {
            let holder = party.clone();
            let v = if dead.contains(party) {
                Projected::Locked { holder, t_release: None }
            } else if a.state == LockState::Unlocked {
                Projected::Unlocked { holder, t_release: a.t_release }
            } else {
                Projected::Locked { holder, t_release: Some(a.t_release) }
            };
            out.insert(aid.clone(), v);
        }
    }
    out
}

/// Replays a trace through the model and compares end states.
pub fn differential_check(trace: &Trace) -> DiffVerdict {
    let mut v = DiffVerdict::default();
    let hooks = match hooks_from_trace(trace) {
        Ok(h) => h,
        Err(reason) => {
            v.invalid = Some(reason);
            return v;
        }
    };
    let Some(fin) = trace.of_kind("sim.final").last() else {
        v.invalid = Some("trace has no final snapshot".into());
        return v;
    };
    let Ok(snap) = serde_json::from_value::<Snapshot>(fin.detail.clone()) else {
        v.invalid = Some("malformed final snapshot".into());
        return v;
    };
    let delta = trace
        .of_kind("sim.setup")
        .last()
        .and_then(|s| s.detail.get("delta"))
        .and_then(Value::as_u64)
        .unwrap_or(1);
    let mut m = IdealModel::new(delta);
    for name in snap.wallets.keys() {
        m.parties.entry(name.clone()).or_default();
    }
    v.hooks = hooks.len();

    // Interleave hooks and ledger inclusions in trace order.
    let mut owners: BTreeMap<AssetId, Option<PublicKey>> = BTreeMap::new();
    let mut hook_iter = hooks.into_iter().peekable();
    for e in &trace.events {
        match e.kind.as_str() {
            "user.fund" if e.detail.get("ok") == Some(&Value::Bool(true)) => {
                if let Some(aid) = e.detail.get("aid").and_then(Value::as_str) {
                    owners.insert(AssetId::new(aid), None);
                }
            }
            "ledger.include" => {
                while let Some(h) = hook_iter.next_if(|h| h.round <= e.round) {
                    if let Err(err) = m.apply(&h) {
                        v.gaps.push(format!("round {} {} {}.{}: {err}", h.round, h.sid, h.op, h.step));
                    }
                }
                let d = &e.detail;
                let (Ok(aid), Ok(pk)) = (aid_of(d, "aid"), pk_of(d, "pk_dst")) else { continue };
                let submitted = d.get("submitted_round").and_then(Value::as_u64).unwrap_or(e.round);
                let real = d.get("applied") == Some(&Value::Bool(true));
                let ideal = m.shadow_apply(&mut owners, &e.src, &aid, &pk, submitted, e.round);
                if real != ideal {
                    let idx = d.get("index").cloned().unwrap_or(json!(null));
                    v.ledger.push(format!("tx {idx} on {aid:?} by {}: real applied={real}, ideal={ideal}", e.src));
                }
            }
            _ => {}
        }
    }
    for h in hook_iter {
        if let Err(err) = m.apply(&h) {
            v.gaps.push(format!("round {} {} {}.{}: {err}", h.round, h.sid, h.op, h.step));
        }
    }

    let wallets: BTreeSet<PublicKey> = snap.wallets.values().copied().collect();
    for (aid, shadow) in &owners {
        let real = snap.ledger.get(aid).filter(|pk| wallets.contains(pk)).copied();
        if real != *shadow {
            v.ledger.push(format!("final owner of {aid:?}: real {real:?}, ideal {shadow:?}"));
        }
    }

    let real = project_real(&snap);
    let ideal = project_ideal(&m, &snap.dead);
    let aids: BTreeSet<&AssetId> = real.keys().chain(ideal.keys()).collect();
    for aid in aids {
        // Assets paid out to a wallet leave every trusted entity.
        let on_chain_wallet = snap.ledger.get(aid).is_some_and(|pk| wallets.contains(pk));
        let (r, i) = (real.get(aid), ideal.get(aid));
        if r != i && !on_chain_wallet {
            v.assets.push(AssetDiff { aid: aid.clone(), real: r.cloned(), ideal: i.cloned() });
        }
    }

    let parties: BTreeSet<&String> = snap.entitlements.keys().chain(m.parties.keys()).collect();
    for party in parties {
        let r: BTreeSet<_> = snap.entitlements.get(party).into_iter().flatten().cloned().collect();
        let i: BTreeSet<_> = m.parties.get(party).map(|p| p.backups.clone()).unwrap_or_default();
        if r != i {
            v.entitlements.push(EntitlementDiff {
                party: party.clone(),
                only_real: r.difference(&i).cloned().collect(),
                only_ideal: i.difference(&r).cloned().collect(),
            });
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::pkc_keygen;

    fn pk(s: &str) -> PublicKey {
        pkc_keygen(s.as_bytes()).pk
    }

    fn funded(delta: Round) -> IdealModel {
        let mut m = IdealModel::new(delta);
        m.run_op(1, "d1", "deposit", "A", json!({"aid": "a", "release": 100}), None).unwrap();
        m.run_op(1, "d2", "deposit", "B", json!({"aid": "b", "release": 130}), None).unwrap();
        m
    }

    fn swap_data() -> Value {
        json!({"aid_a": "a", "aid_b": "b", "responder": "B", "pk_a2": pk("A"), "pk_b2": pk("B")})
    }

    #[test]
    fn pay_moves_and_shortens_release() {
        let mut m = funded(10);
        m.run_op(5, "p", "pay", "A", json!({"aid": "a", "payee": "B"}), None).unwrap();
        let a = m.asset("B", &AssetId::new("a")).unwrap();
        assert_eq!((a.t_release, a.state), (90, LockState::Unlocked));
        assert!(m.asset("A", &AssetId::new("a")).is_none());
    }

    #[test]
    fn swap_blocked_before_move_b() {
        let mut m = funded(10);
        let n = m.run_op(5, "s", "swap", "A", swap_data(), Some("move_b")).unwrap();
        assert_eq!(n, 5);
        let a = m.asset("B", &AssetId::new("a")).unwrap();
        assert_eq!((a.t_release, a.state), (90, LockState::Locked));
        assert!(m.party("B").unwrap().backups.contains(&(AssetId::new("a"), pk("B"), 90)));
        assert_eq!(m.asset("B", &AssetId::new("b")).unwrap().t_release, 110);
    }

    #[test]
    fn swap_margin_is_enforced() {
        let mut m = IdealModel::new(10);
        m.run_op(1, "d1", "deposit", "A", json!({"aid": "a", "release": 100}), None).unwrap();
        m.run_op(1, "d2", "deposit", "B", json!({"aid": "b", "release": 120}), None).unwrap();
        let err = m.run_op(5, "s", "swap", "A", swap_data(), None).unwrap_err();
        assert_eq!(err, IdealError::Check(TeeError::MarginViolation));
    }

    #[test]
    fn steps_are_ordered() {
        let mut m = funded(10);
        let h = HookEvent { round: 3, sid: "p".into(), op: "pay".into(), step: "move".into(), party: "A".into(), data: json!({}) };
        assert!(matches!(m.apply(&h), Err(IdealError::OutOfOrder { .. })));
        m.run_op(3, "p", "pay", "A", json!({"aid": "a", "payee": "B"}), Some("accept")).unwrap();
        let accept = HookEvent { step: "accept".into(), ..h };
        assert!(matches!(m.apply(&accept), Err(IdealError::OutOfOrder { .. })));
    }

    #[test]
    fn stale_sid_rejected() {
        let mut m = funded(10);
        let err = m.run_op(2, "d1", "deposit", "A", json!({"aid": "z", "release": 50}), None).unwrap_err();
        assert_eq!(err, IdealError::Check(TeeError::StaleSid));
    }

    #[test]
    fn backup_grants_entitlement() {
        let mut m = funded(10);
        m.run_op(2, "b1", "backup", "A", json!({"aid": "a", "release": 90, "pk_r": pk("A")}), None).unwrap();
        assert!(m.entitled("A", &AssetId::new("a"), &pk("A"), 90));
        assert!(!m.entitled("A", &AssetId::new("a"), &pk("A"), 89));
        let err = m.run_op(3, "b2", "backup", "A", json!({"aid": "a", "release": 85, "pk_r": pk("A")}), None).unwrap_err();
        assert_eq!(err, IdealError::Check(TeeError::MonotonicityViolation));
    }
}
