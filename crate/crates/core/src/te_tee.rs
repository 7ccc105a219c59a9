//! Single-signer trusted entity: an enclave holding temporary-account keys.
//!
//! [`Enclave`] is the pure state machine. [`TeeActor`] binds it to the
//! simulated network: it answers its users, seals handoffs to peer enclaves
//! and enforces the per-round deadlines of payment and swap.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::clock_net::{Channel, Envelope, ParticipantId, Round};
use crate::crypto::{pkc_decrypt, pkc_encrypt, pkc_sign, pkc_verify, KeyPair, PublicKey, SecretKey, TlpOracle};
use crate::ledger::{AssetId, LedgerKind, LedgerTx};
use crate::protocol::{digest_hex, swap_ok_bytes, BackupArtifact, LockState, Msg, Sealed};
use crate::world::Ctx;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TeeError {
    #[error("session id already used")]
    StaleSid,
    #[error("release round is in the past")]
    PastDeadline,
    #[error("asset already held")]
    DuplicateAsset,
    #[error("asset not owned")]
    NotOwner,
    #[error("asset is locked")]
    AssetLocked,
    #[error("new release must precede the current one by at least delta")]
    MonotonicityViolation,
    #[error("payment to self")]
    SelfPay,
    #[error("no payment handoff received")]
    NoPayInfo,
    #[error("handoff signature or encryption invalid")]
    BadHandoffSig,
    #[error("no swap proposal received")]
    NoSwapProc,
    #[error("release gap does not exceed twice delta")]
    MarginViolation,
    #[error("no swap counter-handoff received")]
    NoSwapOpti,
    #[error("no valid swap acknowledgement")]
    NoSwapOk,
    #[error("request does not match the received handoff")]
    Mismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeeConfig {
    pub delta: Round,
    pub ledger: LedgerKind,
    /// Mutation used to check that the differential oracle notices a
    /// missing margin check.
    pub skip_margin_check: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssetRecord {
    pub aid: AssetId,
    pub owner: String,
    pub sk: SecretKey,
    pub pk: PublicKey,
    pub t_release: Round,
    pub state: LockState,
    /// Whether the current owner already holds a backup at `t_release`.
    pub backed: bool,
}

/// Serializable view of a record without the secret.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordView {
    pub aid: AssetId,
    pub owner: String,
    pub pk: PublicKey,
    pub t_release: Round,
    pub state: LockState,
}

/// Plaintext of a sealed handoff.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Handoff {
    PayInfo { sid: String, aid: AssetId, sk: [u8; 32], pk: PublicKey, t_release: Round, payee: String },
    SwapProc {
        sid: String,
        aid_a: AssetId,
        sk: [u8; 32],
        pk: PublicKey,
        t_release: Round,
        aid_b: AssetId,
        pk_a2: PublicKey,
        pk_b2: PublicKey,
    },
    SwapOpti { sid: String, aid_b: AssetId, sk: [u8; 32], pk: PublicKey, t_release: Round },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapRole {
    Initiator,
    Responder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapStage {
    SentA,
    LockedA,
    SentB,
    Done,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwapSessionTee {
    pub sid: String,
    pub role: SwapRole,
    pub owner: String,
    pub aid_a: AssetId,
    pub aid_b: AssetId,
    pub pk_a2: PublicKey,
    pub pk_b2: PublicKey,
    pub peer: PublicKey,
    pub t_prime: Option<Round>,
    pub stage: SwapStage,
    opti: Option<(SecretKey, PublicKey, Round)>,
}

/// Output of the responder step.
#[derive(Clone, Debug)]
pub struct SwapResponse {
    pub artifact: BackupArtifact,
    pub digest: String,
    pub t_prime: Round,
    pub opti: Sealed,
}

#[derive(Clone, Debug)]
pub struct Enclave {
    pub identity: KeyPair,
    pub cfg: TeeConfig,
    owners: BTreeSet<String>,
    assets: BTreeMap<AssetId, AssetRecord>,
    seen_sids: BTreeSet<String>,
    rng: ChaCha20Rng,
    pay_inbox: BTreeMap<String, (AssetId, SecretKey, PublicKey, Round, String)>,
    accepted: BTreeSet<String>,
    proc_inbox: BTreeMap<String, (Handoff, PublicKey)>,
    swaps: BTreeMap<String, SwapSessionTee>,
}

impl Enclave {
    pub fn new(identity: KeyPair, owners: &[String], cfg: TeeConfig, seed: u64) -> Self {
        Enclave {
            identity,
            cfg,
            owners: owners.iter().cloned().collect(),
            assets: BTreeMap::new(),
            seen_sids: BTreeSet::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
            pay_inbox: BTreeMap::new(),
            accepted: BTreeSet::new(),
            proc_inbox: BTreeMap::new(),
            swaps: BTreeMap::new(),
        }
    }

    pub fn serves(&self, owner: &str) -> bool {
        self.owners.contains(owner)
    }

    pub fn record(&self, aid: &AssetId) -> Option<&AssetRecord> {
        self.assets.get(aid)
    }

    pub fn swap(&self, sid: &str) -> Option<&SwapSessionTee> {
        self.swaps.get(sid)
    }

    pub fn dump(&self) -> Vec<RecordView> {
        self.assets
            .values()
            .map(|r| RecordView {
                aid: r.aid.clone(),
                owner: r.owner.clone(),
                pk: r.pk,
                t_release: r.t_release,
                state: r.state,
            })
            .collect()
    }

    fn fresh(&mut self, sid: &str) -> Result<(), TeeError> {
        if !self.seen_sids.insert(sid.to_string()) {
            return Err(TeeError::StaleSid);
        }
        Ok(())
    }

    fn owned_unlocked(&self, owner: &str, aid: &AssetId) -> Result<&AssetRecord, TeeError> {
        let r = self.assets.get(aid).filter(|r| r.owner == owner).ok_or(TeeError::NotOwner)?;
        if r.state == LockState::Locked {
            return Err(TeeError::AssetLocked);
        }
        Ok(r)
    }

    pub fn getpk(&mut self, sid: &str, owner: &str, aid: &AssetId, t: Round, now: Round) -> Result<PublicKey, TeeError> {
        self.fresh(sid)?;
        if t < now {
            return Err(TeeError::PastDeadline);
        }
        if self.assets.contains_key(aid) {
            return Err(TeeError::DuplicateAsset);
        }
        let kp = KeyPair::random(&mut self.rng);
        self.assets.insert(
            aid.clone(),
            AssetRecord {
                aid: aid.clone(),
                owner: owner.to_string(),
                sk: kp.sk,
                pk: kp.pk,
                t_release: t,
                state: LockState::Unlocked,
                backed: false,
            },
        );
        Ok(kp.pk)
    }

    /// Checks the backup timing rule without changing state.
    pub fn check_backup(&self, owner: &str, aid: &AssetId, t_new: Round, now: Round) -> Result<(), TeeError> {
        let r = self.owned_unlocked(owner, aid)?;
        backup_timing(r.t_release, r.backed, t_new, now, self.cfg.delta)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backup(
        &mut self,
        sid: &str,
        owner: &str,
        aid: &AssetId,
        pk_r: PublicKey,
        t_new: Round,
        now: Round,
        tlp: &mut TlpOracle,
    ) -> Result<BackupArtifact, TeeError> {
        self.fresh(sid)?;
        self.check_backup(owner, aid, t_new, now)?;
        let ledger = self.cfg.ledger;
        let r = self.assets.get_mut(aid).expect("checked");
        r.state = LockState::Locked;
        let art = make_artifact(ledger, aid, pk_r, t_new, Vec::new(), &r.sk, now, tlp);
        r.t_release = t_new;
        r.backed = true;
        r.state = LockState::Unlocked;
        Ok(art)
    }

    fn seal(&mut self, dest: &PublicKey, h: &Handoff) -> Sealed {
        let plain = serde_json::to_vec(h).expect("handoff serializes");
        let ct = pkc_encrypt(dest, &plain, &mut self.rng).expect("peer identity is a valid point");
        let sig = pkc_sign(&self.identity.sk, &sealed_bytes(&ct, dest));
        Sealed { sender: self.identity.pk, ct, sig }
    }

    /// Verifies and decrypts a handoff addressed to this enclave.
    pub fn open(&self, s: &Sealed) -> Result<Handoff, TeeError> {
        if !pkc_verify(&s.sender, &sealed_bytes(&s.ct, &self.identity.pk), &s.sig) {
            return Err(TeeError::BadHandoffSig);
        }
        let plain = pkc_decrypt(&self.identity.sk, &s.ct).map_err(|_| TeeError::BadHandoffSig)?;
        serde_json::from_slice(&plain).map_err(|_| TeeError::BadHandoffSig)
    }

    /// Stores a verified handoff for the step that consumes it.
    pub fn receive(&mut self, s: &Sealed) -> Result<Handoff, TeeError> {
        let h = self.open(s)?;
        match &h {
            Handoff::PayInfo { sid, aid, sk, pk, t_release, payee } => {
                let sk = SecretKey::from_bytes(*sk).map_err(|_| TeeError::BadHandoffSig)?;
                self.pay_inbox
                    .entry(sid.clone())
                    .or_insert((aid.clone(), sk, *pk, *t_release, payee.clone()));
            }
            Handoff::SwapProc { sid, .. } => {
                self.proc_inbox.entry(sid.clone()).or_insert_with(|| (h.clone(), s.sender));
            }
            Handoff::SwapOpti { sid, sk, pk, t_release, .. } => {
                let sk = SecretKey::from_bytes(*sk).map_err(|_| TeeError::BadHandoffSig)?;
                if let Some(sess) = self.swaps.get_mut(sid) {
                    if sess.role == SwapRole::Initiator && sess.opti.is_none() {
                        sess.opti = Some((sk, *pk, *t_release));
                    }
                }
            }
        }
        Ok(h)
    }

    pub fn pay_initiate(
        &mut self,
        sid: &str,
        owner: &str,
        aid: &AssetId,
        payee: &str,
        dest: &PublicKey,
    ) -> Result<Sealed, TeeError> {
        if self.seen_sids.contains(sid) {
            return Err(TeeError::StaleSid);
        }
        if *dest == self.identity.pk && payee == owner {
            return Err(TeeError::SelfPay);
        }
        self.owned_unlocked(owner, aid)?;
        self.fresh(sid)?;
        let r = self.assets.get_mut(aid).expect("checked");
        r.state = LockState::Locked;
        let r = self.assets.remove(aid).expect("checked");
        let h = Handoff::PayInfo {
            sid: sid.to_string(),
            aid: aid.clone(),
            sk: r.sk.to_bytes(),
            pk: r.pk,
            t_release: r.t_release,
            payee: payee.to_string(),
        };
        Ok(self.seal(dest, &h))
    }

    /// Ownership move between two users of this same enclave.
    pub fn pay_local(&mut self, sid: &str, owner: &str, aid: &AssetId, payee: &str) -> Result<Round, TeeError> {
        if payee == owner {
            return Err(TeeError::SelfPay);
        }
        if !self.serves(payee) {
            return Err(TeeError::NotOwner);
        }
        if self.seen_sids.contains(sid) {
            return Err(TeeError::StaleSid);
        }
        self.owned_unlocked(owner, aid)?;
        self.fresh(sid)?;
        let delta = self.cfg.delta;
        let r = self.assets.get_mut(aid).expect("checked");
        r.owner = payee.to_string();
        r.t_release = r.t_release.saturating_sub(delta);
        r.backed = false;
        self.accepted.insert(sid.to_string());
        Ok(r.t_release)
    }

    pub fn pay_accept(&mut self, sid: &str, owner: &str, aid: &AssetId) -> Result<Round, TeeError> {
        if self.accepted.contains(sid) {
            return Err(TeeError::StaleSid);
        }
        let (got_aid, sk, pk, t_release, payee) = self.pay_inbox.get(sid).cloned().ok_or(TeeError::NoPayInfo)?;
        if got_aid != *aid || payee != owner {
            return Err(TeeError::Mismatch);
        }
        if self.assets.contains_key(aid) {
            return Err(TeeError::DuplicateAsset);
        }
        self.accepted.insert(sid.to_string());
        self.pay_inbox.remove(sid);
        let release = t_release.saturating_sub(self.cfg.delta);
        self.assets.insert(
            aid.clone(),
            AssetRecord {
                aid: aid.clone(),
                owner: owner.to_string(),
                sk,
                pk,
                t_release: release,
                state: LockState::Unlocked,
                backed: false,
            },
        );
        Ok(release)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn swap_initiate(
        &mut self,
        sid: &str,
        owner: &str,
        aid_a: &AssetId,
        aid_b: &AssetId,
        dest: &PublicKey,
        pk_a2: PublicKey,
        pk_b2: PublicKey,
    ) -> Result<Sealed, TeeError> {
        if self.seen_sids.contains(sid) {
            return Err(TeeError::StaleSid);
        }
        if *dest == self.identity.pk {
            return Err(TeeError::SelfPay);
        }
        self.owned_unlocked(owner, aid_a)?;
        self.fresh(sid)?;
        let r = self.assets.get_mut(aid_a).expect("checked");
        r.state = LockState::Locked;
        let h = Handoff::SwapProc {
            sid: sid.to_string(),
            aid_a: aid_a.clone(),
            sk: r.sk.to_bytes(),
            pk: r.pk,
            t_release: r.t_release,
            aid_b: aid_b.clone(),
            pk_a2,
            pk_b2,
        };
        self.swaps.insert(
            sid.to_string(),
            SwapSessionTee {
                sid: sid.to_string(),
                role: SwapRole::Initiator,
                owner: owner.to_string(),
                aid_a: aid_a.clone(),
                aid_b: aid_b.clone(),
                pk_a2,
                pk_b2,
                peer: *dest,
                t_prime: None,
                stage: SwapStage::SentA,
                opti: None,
            },
        );
        Ok(self.seal(dest, &h))
    }

    /// Margin check plus nested contingent backup. Both assets end locked here.
    #[allow(clippy::too_many_arguments)]
    pub fn swap_respond(
        &mut self,
        sid: &str,
        owner: &str,
        aid_a: &AssetId,
        aid_b: &AssetId,
        pk_a2: PublicKey,
        pk_b2: PublicKey,
        now: Round,
        tlp: &mut TlpOracle,
    ) -> Result<SwapResponse, TeeError> {
        let Some((Handoff::SwapProc { aid_a: pa, sk, pk, t_release: rel_a, aid_b: pb, pk_a2: p2a, pk_b2: p2b, .. }, peer)) =
            self.proc_inbox.get(sid).cloned()
        else {
            return Err(TeeError::NoSwapProc);
        };
        if pa != *aid_a || pb != *aid_b || p2a != pk_a2 || p2b != pk_b2 {
            return Err(TeeError::Mismatch);
        }
        self.fresh(sid)?;
        let delta = self.cfg.delta;
        let rel_b = self.owned_unlocked(owner, aid_b)?.t_release;
        if !self.cfg.skip_margin_check && rel_b.saturating_sub(rel_a) <= 2 * delta {
            return Err(TeeError::MarginViolation);
        }
        if self.assets.contains_key(aid_a) {
            return Err(TeeError::DuplicateAsset);
        }
        let sk_a = SecretKey::from_bytes(sk).map_err(|_| TeeError::BadHandoffSig)?;
        let t_prime = rel_a.saturating_sub(delta);
        self.assets.insert(
            aid_a.clone(),
            AssetRecord {
                aid: aid_a.clone(),
                owner: owner.to_string(),
                sk: sk_a.clone(),
                pk,
                t_release: t_prime,
                state: LockState::Locked,
                backed: true,
            },
        );
        let ledger = self.cfg.ledger;
        let rb = self.assets.get_mut(aid_b).expect("checked");
        rb.state = LockState::Locked;
        rb.t_release = t_prime + 2 * delta;
        let (sk_b, pk_b, rel_b_new) = (rb.sk.clone(), rb.pk, rb.t_release);
        let (artifact, digest) = contingent_backup(ledger, aid_a, aid_b, pk_a2, pk_b2, t_prime, &sk_a, &sk_b, now, tlp);
        let opti = Handoff::SwapOpti {
            sid: sid.to_string(),
            aid_b: aid_b.clone(),
            sk: sk_b.to_bytes(),
            pk: pk_b,
            t_release: rel_b_new,
        };
        self.proc_inbox.remove(sid);
        self.swaps.insert(
            sid.to_string(),
            SwapSessionTee {
                sid: sid.to_string(),
                role: SwapRole::Responder,
                owner: owner.to_string(),
                aid_a: aid_a.clone(),
                aid_b: aid_b.clone(),
                pk_a2,
                pk_b2,
                peer,
                t_prime: Some(t_prime),
                stage: SwapStage::SentB,
                opti: None,
            },
        );
        let opti = self.seal(&peer, &opti);
        Ok(SwapResponse { artifact, digest, t_prime, opti })
    }

    pub fn swap_finalize_initiator(&mut self, sid: &str) -> Result<(Round, crate::crypto::Signature), TeeError> {
        let sess = self.swaps.get(sid).filter(|s| s.role == SwapRole::Initiator && s.stage == SwapStage::SentA);
        let Some(sess) = sess.cloned() else { return Err(TeeError::NoSwapOpti) };
        let Some((sk_b, pk_b, rel_b)) = sess.opti.clone() else { return Err(TeeError::NoSwapOpti) };
        self.assets.remove(&sess.aid_a);
        self.assets.insert(
            sess.aid_b.clone(),
            AssetRecord {
                aid: sess.aid_b.clone(),
                owner: sess.owner.clone(),
                sk: sk_b,
                pk: pk_b,
                t_release: rel_b,
                state: LockState::Unlocked,
                backed: false,
            },
        );
        let s = self.swaps.get_mut(sid).expect("exists");
        s.stage = SwapStage::Done;
        s.t_prime = Some(rel_b.saturating_sub(2 * self.cfg.delta));
        Ok((rel_b, pkc_sign(&self.identity.sk, &swap_ok_bytes(sid))))
    }

    pub fn swap_abort(&mut self, sid: &str) {
        if let Some(s) = self.swaps.get_mut(sid) {
            if s.stage != SwapStage::Done {
                s.stage = SwapStage::Aborted;
            }
        }
    }

    pub fn swap_finalize_responder(
        &mut self,
        sid: &str,
        sender: &PublicKey,
        sig: &crate::crypto::Signature,
    ) -> Result<Round, TeeError> {
        let sess = self.swaps.get(sid).filter(|s| s.role == SwapRole::Responder && s.stage == SwapStage::SentB);
        let Some(sess) = sess.cloned() else { return Err(TeeError::NoSwapOk) };
        if *sender != sess.peer || !pkc_verify(sender, &swap_ok_bytes(sid), sig) {
            return Err(TeeError::NoSwapOk);
        }
        self.assets.remove(&sess.aid_b);
        let r = self.assets.get_mut(&sess.aid_a).ok_or(TeeError::NoSwapOk)?;
        r.state = LockState::Unlocked;
        r.backed = false;
        let rel = r.t_release;
        self.swaps.get_mut(sid).expect("exists").stage = SwapStage::Done;
        Ok(rel)
    }

    /// Payment to a recipient outside the system: a ready-to-broadcast
    /// transfer, after which the record is retired.
    pub fn exit_pay(&mut self, sid: &str, owner: &str, aid: &AssetId, recipient: PublicKey) -> Result<LedgerTx, TeeError> {
        self.owned_unlocked(owner, aid)?;
        self.fresh(sid)?;
        let r = self.assets.remove(aid).expect("checked");
        Ok(LedgerTx::sign(aid.clone(), recipient, None, Vec::new(), &r.sk))
    }
}

/// Backup timing: before the first backup of the current owner the release
/// may stay where it is; afterwards each new release must be at least `Δ`
/// earlier than the previous one.
pub fn backup_timing(current: Round, backed: bool, t_new: Round, now: Round, delta: Round) -> Result<(), TeeError> {
    if t_new < now {
        return Err(TeeError::PastDeadline);
    }
    let ok = if backed { current >= t_new && current - t_new >= delta } else { t_new <= current };
    if ok {
        Ok(())
    } else {
        Err(TeeError::MonotonicityViolation)
    }
}

fn sealed_bytes(ct: &[u8], dest: &PublicKey) -> Vec<u8> {
    let mut out = b"dot/handoff".to_vec();
    out.extend_from_slice(&dest.0);
    out.extend_from_slice(ct);
    out
}

/// Signed recovery transaction, wrapped according to the ledger kind. The
/// puzzle delay is counted from `created`, the round the user receives it.
#[allow(clippy::too_many_arguments)]
pub fn make_artifact(
    ledger: LedgerKind,
    aid: &AssetId,
    pk_r: PublicKey,
    release: Round,
    payload: Vec<u8>,
    sk: &SecretKey,
    created: Round,
    tlp: &mut TlpOracle,
) -> BackupArtifact {
    match ledger {
        LedgerKind::Timelock => BackupArtifact::Signed { tx: LedgerTx::sign(aid.clone(), pk_r, Some(release), payload, sk) },
        LedgerKind::Scriptless => {
            let tx = LedgerTx::sign(aid.clone(), pk_r, None, payload, sk);
            BackupArtifact::Puzzle { puzzle: tlp.pgen(release.saturating_sub(created), &tx.encode()) }
        }
    }
}

/// The responder's nested backup: `m1` moves `aid_b` to the initiator and is
/// signed with `aid_b`'s key; `m2` moves `aid_a` to the responder, carries
/// `(m1, σ_A)` as payload and is signed with `aid_a`'s key. Returns the
/// artifact and a digest of the signed `m2`.
#[allow(clippy::too_many_arguments)]
pub fn contingent_backup(
    ledger: LedgerKind,
    aid_a: &AssetId,
    aid_b: &AssetId,
    pk_a2: PublicKey,
    pk_b2: PublicKey,
    t_prime: Round,
    sk_a: &SecretKey,
    sk_b: &SecretKey,
    created: Round,
    tlp: &mut TlpOracle,
) -> (BackupArtifact, String) {
    let tl = match ledger {
        LedgerKind::Timelock => Some(t_prime),
        LedgerKind::Scriptless => None,
    };
    let m1 = LedgerTx::sign(aid_b.clone(), pk_a2, tl, Vec::new(), sk_b);
    let m2 = LedgerTx::sign(aid_a.clone(), pk_b2, tl, m1.encode(), sk_a);
    let digest = digest_hex(&m2.encode());
    let art = match ledger {
        LedgerKind::Timelock => BackupArtifact::Signed { tx: m2 },
        LedgerKind::Scriptless => {
            BackupArtifact::Puzzle { puzzle: tlp.pgen(t_prime.saturating_sub(created), &m2.encode()) }
        }
    };
    (art, digest)
}

/// Network binding of an [`Enclave`].
#[derive(Clone, Debug)]
pub struct TeeActor {
    pub id: ParticipantId,
    pub name: String,
    pub enclave: Enclave,
    pay_acks: Vec<(String, String, AssetId)>,
    swap_acks: Vec<(String, String, Msg)>,
    swap_deadlines: BTreeMap<String, Round>,
}

impl TeeActor {
    pub fn new(id: ParticipantId, name: &str, enclave: Enclave) -> Self {
        TeeActor {
            id,
            name: name.to_string(),
            enclave,
            pay_acks: Vec::new(),
            swap_acks: Vec::new(),
            swap_deadlines: BTreeMap::new(),
        }
    }

    fn step(&self, ctx: &mut Ctx, sid: &str, party: &str, op: &str, step: &str, detail: serde_json::Value) {
        let mut d = json!({"op": op, "step": step, "party": party});
        if let (Some(m), serde_json::Value::Object(extra)) = (d.as_object_mut(), detail) {
            m.extend(extra);
        }
        ctx.log("te.step", sid, &self.name, "", d);
    }

    fn abort(&self, ctx: &mut Ctx, sid: &str, user: &str, op: &str, aid: &AssetId, err: &TeeError) {
        ctx.log("te.abort", sid, &self.name, user, json!({"op": op, "aid": aid, "reason": format!("{err:?}"), "party": user}));
        if let Some(p) = ctx.dir.party(user) {
            let msg = Msg::OpAbort { op: op.to_string(), aid: aid.clone(), reason: format!("{err:?}") };
            ctx.send(Channel::Local, sid, self.id, p.user, &msg);
        }
    }

    fn user_of(&self, ctx: &Ctx, p: ParticipantId) -> Option<String> {
        match ctx.dir.role(p) {
            Some(crate::world::Role::User(u)) if self.enclave.serves(u) => Some(u.clone()),
            _ => None,
        }
    }

    pub fn handle(&mut self, env: &Envelope, ctx: &mut Ctx) {
        let Some(msg) = Msg::decode(&env.payload) else { return };
        let sid = env.sid.as_str();
        let now = ctx.now;
        match msg {
            Msg::Sealed(s) => match self.enclave.receive(&s) {
                Ok(h) => {
                    let kind = match h {
                        Handoff::PayInfo { .. } => "pay_info",
                        Handoff::SwapProc { .. } => "swap_proc",
                        Handoff::SwapOpti { .. } => "swap_opti",
                    };
                    ctx.log("te.recv", sid, &self.name, "", json!({"handoff": kind}));
                }
                Err(e) => ctx.log("te.reject", sid, &self.name, "", json!({"reason": format!("{e:?}")})),
            },
            Msg::SwapOk { sender, sig } => {
                let owner = self.enclave.swap(sid).map(|s| s.owner.clone());
                match self.enclave.swap_finalize_responder(sid, &sender, &sig) {
                    Ok(rel) => {
                        let owner = owner.expect("session exists");
                        let aid = self.enclave.swap(sid).expect("exists").aid_a.clone();
                        self.step(ctx, sid, &owner, "swap", "unlock_a", json!({"aid": aid, "release": rel}));
                        if let Some(p) = ctx.dir.party(&owner) {
                            ctx.send(Channel::Local, sid, self.id, p.user, &Msg::SwapComplete { aid, release: rel });
                        }
                    }
                    Err(e) => ctx.log("te.reject", sid, &self.name, "", json!({"reason": format!("{e:?}")})),
                }
            }
            other => {
                let Some(user) = self.user_of(ctx, env.src) else { return };
                self.handle_user(sid, &user, other, now, ctx);
            }
        }
    }

    fn handle_user(&mut self, sid: &str, user: &str, msg: Msg, now: Round, ctx: &mut Ctx) {
        let user_id = ctx.dir.party(user).expect("known user").user;
        match msg {
            Msg::GetPk { aid, release } => match self.enclave.getpk(sid, user, &aid, release, now) {
                Ok(pk) => {
                    self.step(ctx, sid, user, "deposit", "create", json!({"aid": aid, "release": release, "pk": pk}));
                    ctx.send(Channel::Local, sid, self.id, user_id, &Msg::GetPkOk { aid, pk, release });
                }
                Err(e) => self.abort(ctx, sid, user, "deposit", &aid, &e),
            },
            Msg::Backup { aid, pk_r, release } => {
                match self.enclave.backup(sid, user, &aid, pk_r, release, now, ctx.tlp) {
                    Ok(artifact) => {
                        self.step(ctx, sid, user, "backup", "sign", json!({"aid": aid, "release": release, "pk_r": pk_r}));
                        ctx.send(Channel::Local, sid, self.id, user_id, &Msg::BackupOk { aid, pk_r, release, artifact });
                    }
                    Err(e) => self.abort(ctx, sid, user, "backup", &aid, &e),
                }
            }
            Msg::PayReq { aid, payee } => {
                let Some(dest) = ctx.dir.party(&payee).cloned() else {
                    return self.abort(ctx, sid, user, "pay", &aid, &TeeError::NotOwner);
                };
                if dest.tee == Some(self.id) {
                    match self.enclave.pay_local(sid, user, &aid, &payee) {
                        Ok(rel) => {
                            self.step(ctx, sid, user, "pay", "lock", json!({"aid": aid}));
                            self.step(ctx, sid, user, "pay", "move", json!({"aid": aid, "payee": payee}));
                            self.step(ctx, sid, &payee, "pay", "accept", json!({"aid": aid, "release": rel}));
                            ctx.send(Channel::Local, sid, self.id, user_id, &Msg::PayStarted { aid: aid.clone() });
                            ctx.send(Channel::Local, sid, self.id, dest.user, &Msg::PayComplete { aid, release: rel });
                        }
                        Err(e) => self.abort(ctx, sid, user, "pay", &aid, &e),
                    }
                    return;
                }
                let Some(dest_pk) = dest.tee_identity else {
                    return self.abort(ctx, sid, user, "pay", &aid, &TeeError::NotOwner);
                };
                match self.enclave.pay_initiate(sid, user, &aid, &payee, &dest_pk) {
                    Ok(sealed) => {
                        self.step(ctx, sid, user, "pay", "lock", json!({"aid": aid}));
                        self.step(ctx, sid, user, "pay", "move", json!({"aid": aid, "payee": payee}));
                        ctx.send(Channel::Async, sid, self.id, dest.tee.expect("tee"), &Msg::Sealed(sealed));
                        ctx.send(Channel::Local, sid, self.id, user_id, &Msg::PayStarted { aid });
                    }
                    Err(e) => self.abort(ctx, sid, user, "pay", &aid, &e),
                }
            }
            Msg::PayAck { aid, .. } => self.pay_acks.push((sid.to_string(), user.to_string(), aid)),
            Msg::SwapPre { aid_a, aid_b, pk_a2, pk_b2, responder } => {
                let Some(dest) = ctx.dir.party(&responder).cloned() else {
                    return self.abort(ctx, sid, user, "swap", &aid_a, &TeeError::NotOwner);
                };
                let dest_pk = dest.tee_identity.unwrap_or(self.enclave.identity.pk);
                match self.enclave.swap_initiate(sid, user, &aid_a, &aid_b, &dest_pk, pk_a2, pk_b2) {
                    Ok(sealed) => {
                        self.step(ctx, sid, user, "swap", "lock_a", json!({"aid": aid_a}));
                        ctx.send(Channel::Async, sid, self.id, dest.tee.expect("tee"), &Msg::Sealed(sealed));
                        self.swap_deadlines.insert(sid.to_string(), now + 2);
                    }
                    Err(e) => self.abort(ctx, sid, user, "swap", &aid_a, &e),
                }
            }
            m @ Msg::SwapAck { .. } => self.swap_acks.push((sid.to_string(), user.to_string(), m)),
            Msg::Ping { nonce } => ctx.send(Channel::Local, sid, self.id, user_id, &Msg::Pong { nonce }),
            Msg::ExitReq { aid, recipient } => match self.enclave.exit_pay(sid, user, &aid, recipient) {
                Ok(tx) => {
                    self.step(ctx, sid, user, "exit", "sign", json!({"aid": aid}));
                    ctx.send(Channel::Local, sid, self.id, user_id, &Msg::ExitOk { tx });
                }
                Err(e) => self.abort(ctx, sid, user, "exit", &aid, &e),
            },
            _ => {}
        }
    }

    /// End-of-round steps: payment acceptance, swap response and the
    /// initiator's finalize-or-abort deadline.
    pub fn on_round(&mut self, ctx: &mut Ctx) {
        let now = ctx.now;
        for (sid, user, aid) in std::mem::take(&mut self.pay_acks) {
            let user_id = ctx.dir.party(&user).expect("known").user;
            match self.enclave.pay_accept(&sid, &user, &aid) {
                Ok(rel) => {
                    self.step(ctx, &sid, &user, "pay", "accept", json!({"aid": aid, "release": rel}));
                    ctx.send(Channel::Local, &sid, self.id, user_id, &Msg::PayComplete { aid, release: rel });
                }
                Err(e) => self.abort(ctx, &sid, &user, "pay", &aid, &e),
            }
        }
        for (sid, user, m) in std::mem::take(&mut self.swap_acks) {
            let Msg::SwapAck { aid_a, aid_b, pk_a2, pk_b2, initiator } = m else { continue };
            let user_id = ctx.dir.party(&user).expect("known").user;
            match self.enclave.swap_respond(&sid, &user, &aid_a, &aid_b, pk_a2, pk_b2, now, ctx.tlp) {
                Ok(resp) => {
                    let a = json!({"aid_a": aid_a, "aid_b": aid_b});
                    self.step(ctx, &sid, &user, "swap", "move_a", a.clone());
                    let mut c = a.clone();
                    c["t_prime"] = json!(resp.t_prime);
                    c["release_b"] = json!(resp.t_prime + 2 * self.enclave.cfg.delta);
                    self.step(ctx, &sid, &user, "swap", "commit", c);
                    self.step(ctx, &sid, &user, "swap", "sign_a", a.clone());
                    self.step(ctx, &sid, &user, "swap", "sign_b", a);
                    let pess = Msg::SwapPess {
                        aid_a: aid_a.clone(),
                        pk_b2,
                        t_prime: resp.t_prime,
                        digest: resp.digest,
                        artifact: resp.artifact,
                    };
                    ctx.send(Channel::Local, &sid, self.id, user_id, &pess);
                    if let Some(dest) = ctx.dir.party(&initiator).and_then(|p| p.tee) {
                        ctx.send(Channel::Async, &sid, self.id, dest, &Msg::Sealed(resp.opti));
                    }
                }
                Err(e) => self.abort(ctx, &sid, &user, "swap", &aid_a, &e),
            }
        }
        let due: Vec<String> = self.swap_deadlines.iter().filter(|(_, d)| **d <= now).map(|(s, _)| s.clone()).collect();
        for sid in due {
            self.swap_deadlines.remove(&sid);
            let Some(sess) = self.enclave.swap(&sid).cloned() else { continue };
            let user_id = ctx.dir.party(&sess.owner).expect("known").user;
            match self.enclave.swap_finalize_initiator(&sid) {
                Ok((rel_b, sig)) => {
                    self.step(ctx, &sid, &sess.owner, "swap", "move_b", json!({"aid": sess.aid_b, "release": rel_b}));
                    let peer_tee = ctx.dir.party_by_identity(&sess.peer).and_then(|p| p.tee);
                    if let Some(dst) = peer_tee {
                        ctx.send(Channel::Async, &sid, self.id, dst, &Msg::SwapOk { sender: self.enclave.identity.pk, sig });
                    }
                    let done = Msg::SwapComplete { aid: sess.aid_b.clone(), release: rel_b };
                    ctx.send(Channel::Local, &sid, self.id, user_id, &done);
                }
                Err(e) => {
                    self.enclave.swap_abort(&sid);
                    self.abort(ctx, &sid, &sess.owner, "swap", &sess.aid_a, &e);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::pkc_keygen;

    const D: Round = 10;

    fn enclave(name: &str, ledger: LedgerKind) -> Enclave {
        let cfg = TeeConfig { delta: D, ledger, skip_margin_check: false };
        Enclave::new(pkc_keygen(name.as_bytes()), &[name.to_string()], cfg, 1)
    }

    fn aid(s: &str) -> AssetId {
        AssetId::new(s)
    }

    #[test]
    fn getpk_checks() {
        let mut e = enclave("A", LedgerKind::Timelock);
        let pk = e.getpk("s1", "A", &aid("a"), 100, 0).unwrap();
        let r = e.record(&aid("a")).unwrap();
        assert_eq!((r.pk, r.t_release, r.state), (pk, 100, LockState::Unlocked));
        assert_eq!(e.getpk("s2", "A", &aid("b"), 5, 10), Err(TeeError::PastDeadline));
        assert_eq!(e.getpk("s1", "A", &aid("c"), 100, 0), Err(TeeError::StaleSid));
    }

    #[test]
    fn backup_timing_boundaries() {
        let mut e = enclave("A", LedgerKind::Timelock);
        let mut tlp = TlpOracle::new(0);
        let w = pkc_keygen(b"w").pk;
        e.getpk("g", "A", &aid("a"), 100, 0).unwrap();
        e.backup("b0", "A", &aid("a"), w, 100, 0, &mut tlp).unwrap();
        assert_eq!(e.backup("b1", "A", &aid("a"), w, 91, 0, &mut tlp), Err(TeeError::MonotonicityViolation));
        e.backup("b2", "A", &aid("a"), w, 90, 0, &mut tlp).unwrap();
        assert_eq!(e.record(&aid("a")).unwrap().t_release, 90);
    }

    #[test]
    fn scriptless_backup_is_puzzle_with_remaining_delay() {
        let mut e = enclave("A", LedgerKind::Scriptless);
        let mut tlp = TlpOracle::new(0);
        let w = pkc_keygen(b"w").pk;
        e.getpk("g", "A", &aid("a"), 100, 0).unwrap();
        let art = e.backup("b", "A", &aid("a"), w, 100, 30, &mut tlp).unwrap();
        let BackupArtifact::Puzzle { puzzle } = art else { panic!("expected puzzle") };
        assert_eq!(puzzle.gamma, 70);
    }

    #[test]
    fn pay_moves_key_and_lowers_release() {
        let mut a = enclave("A", LedgerKind::Timelock);
        let mut b = enclave("B", LedgerKind::Timelock);
        let pk = a.getpk("g", "A", &aid("x"), 100, 0).unwrap();
        let sealed = a.pay_initiate("p", "A", &aid("x"), "B", &b.identity.pk).unwrap();
        assert!(a.record(&aid("x")).is_none());
        assert_eq!(a.pay_initiate("p2", "A", &aid("x"), "B", &b.identity.pk), Err(TeeError::NotOwner));
        assert_eq!(b.pay_accept("p", "B", &aid("x")), Err(TeeError::NoPayInfo));
        b.receive(&sealed).unwrap();
        assert_eq!(b.pay_accept("p", "B", &aid("x")), Ok(90));
        assert_eq!(b.record(&aid("x")).unwrap().pk, pk);
        assert_eq!(b.pay_accept("p", "B", &aid("x")), Err(TeeError::StaleSid));
    }

    #[test]
    fn tampered_handoff_rejected() {
        let mut a = enclave("A", LedgerKind::Timelock);
        let mut b = enclave("B", LedgerKind::Timelock);
        a.getpk("g", "A", &aid("x"), 100, 0).unwrap();
        let mut sealed = a.pay_initiate("p", "A", &aid("x"), "B", &b.identity.pk).unwrap();
        sealed.ct[40] ^= 1;
        assert_eq!(b.receive(&sealed), Err(TeeError::BadHandoffSig));
        assert_eq!(b.pay_accept("p", "B", &aid("x")), Err(TeeError::NoPayInfo));
    }

    #[test]
    fn pay_errors() {
        let mut a = enclave("A", LedgerKind::Timelock);
        let mut tlp = TlpOracle::new(0);
        let me = a.identity.pk;
        a.getpk("g", "A", &aid("x"), 100, 0).unwrap();
        assert_eq!(a.pay_initiate("p", "A", &aid("x"), "A", &me), Err(TeeError::SelfPay));
        a.swap_initiate("s", "A", &aid("x"), &aid("y"), &pkc_keygen(b"B").pk, me, me).unwrap();
        assert_eq!(a.pay_initiate("p", "A", &aid("x"), "B", &pkc_keygen(b"B").pk), Err(TeeError::AssetLocked));
        assert_eq!(
            a.backup("b", "A", &aid("x"), me, 90, 0, &mut tlp),
            Err(TeeError::AssetLocked)
        );
    }

    fn swap_setup(rel_a: Round, rel_b: Round) -> (Enclave, Enclave, PublicKey, PublicKey, Result<SwapResponse, TeeError>) {
        let mut a = enclave("A", LedgerKind::Timelock);
        let mut b = enclave("B", LedgerKind::Timelock);
        let mut tlp = TlpOracle::new(0);
        let (wa, wb) = (pkc_keygen(b"wa").pk, pkc_keygen(b"wb").pk);
        a.getpk("ga", "A", &aid("A1"), rel_a, 0).unwrap();
        b.getpk("gb", "B", &aid("B1"), rel_b, 0).unwrap();
        let proc_ = a.swap_initiate("s", "A", &aid("A1"), &aid("B1"), &b.identity.pk, wa, wb).unwrap();
        b.receive(&proc_).unwrap();
        let resp = b.swap_respond("s", "B", &aid("A1"), &aid("B1"), wa, wb, 1, &mut tlp);
        (a, b, wa, wb, resp)
    }

    #[test]
    fn swap_margin_boundary() {
        let (_, b, _, _, resp) = swap_setup(80, 101);
        let resp = resp.unwrap();
        assert_eq!(resp.t_prime, 70);
        assert_eq!(b.record(&aid("B1")).unwrap().t_release, 90);
        let (_, _, _, _, resp) = swap_setup(80, 100);
        assert_eq!(resp.err(), Some(TeeError::MarginViolation));
    }

    #[test]
    fn contingent_backup_layers_verify() {
        let (a, b, wa, wb, resp) = swap_setup(80, 101);
        let resp = resp.unwrap();
        let BackupArtifact::Signed { tx: m2 } = resp.artifact else { panic!() };
        let m1 = LedgerTx::decode(&m2.payload).unwrap();
        assert_eq!((m2.aid.clone(), m2.pk_dst), (aid("A1"), wb));
        assert_eq!((m1.aid.clone(), m1.pk_dst), (aid("B1"), wa));
        assert!(m2.verify(&b.record(&aid("A1")).unwrap().pk));
        assert!(m1.verify(&b.record(&aid("B1")).unwrap().pk));
        assert_eq!(m2.timelock, Some(70));
        let _ = a;
    }

    #[test]
    fn optimistic_swap_end_state() {
        let (mut a, mut b, _, _, resp) = swap_setup(80, 101);
        let resp = resp.unwrap();
        a.receive(&resp.opti).unwrap();
        let (rel_b, sig) = a.swap_finalize_initiator("s").unwrap();
        assert_eq!(rel_b, 90);
        assert!(a.record(&aid("A1")).is_none());
        assert_eq!(a.record(&aid("B1")).unwrap().state, LockState::Unlocked);
        let forged = pkc_sign(&pkc_keygen(b"evil").sk, &swap_ok_bytes("s"));
        assert_eq!(b.swap_finalize_responder("s", &pkc_keygen(b"evil").pk, &forged), Err(TeeError::NoSwapOk));
        let pk_a = a.identity.pk;
        assert_eq!(b.swap_finalize_responder("s", &pk_a, &sig), Ok(70));
        assert!(b.record(&aid("B1")).is_none());
        assert_eq!(b.record(&aid("A1")).unwrap().state, LockState::Unlocked);
    }

    #[test]
    fn initiator_without_opti_cannot_finalize() {
        let (mut a, _, _, _, _) = swap_setup(80, 101);
        assert_eq!(a.swap_finalize_initiator("s"), Err(TeeError::NoSwapOpti));
        a.swap_abort("s");
        assert_eq!(a.record(&aid("A1")).unwrap().state, LockState::Locked);
    }
}
