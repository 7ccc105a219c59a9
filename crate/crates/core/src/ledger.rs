//! Simulated ledgers: a scriptless one and one with native spend-after
//! timelocks. Both include transactions within `Δ` rounds of submission.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::clock_net::Round;
use crate::crypto::{pkc_sign, pkc_verify, PublicKey, SecretKey, Signature};

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AssetId(pub String);

impl AssetId {
    pub fn new(s: impl Into<String>) -> Self {
        AssetId(s.into())
    }
}

impl fmt::Debug for AssetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for AssetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LedgerKind {
    Scriptless,
    #[default]
    Timelock,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("asset {0} already exists")]
    DuplicateAsset(AssetId),
    #[error("asset {0} not found")]
    NotFound(AssetId),
    #[error("malformed transaction encoding: {0}")]
    Malformed(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BadSig,
    TimelockNotReached,
    UnknownAsset,
    TimelockUnsupported,
}

/// Ownership transfer `(aid, pk_dst, [timelock], payload)` plus signature.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTx {
    pub aid: AssetId,
    pub pk_dst: PublicKey,
    pub timelock: Option<Round>,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    pub sig: Signature,
}

fn put(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_be_bytes());
    out.extend_from_slice(bytes);
}

/// Canonical encoding of the signed part of a transaction.
pub fn signing_bytes(aid: &AssetId, pk_dst: &PublicKey, timelock: Option<Round>, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + aid.0.len() + payload.len());
    put(&mut out, aid.0.as_bytes());
    put(&mut out, &pk_dst.0);
    match timelock {
        None => out.push(0),
        Some(t) => {
            out.push(1);
            out.extend_from_slice(&t.to_be_bytes());
        }
    }
    put(&mut out, payload);
    out
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LedgerError> {
        if self.0.len() < n {
            return Err(LedgerError::Malformed("truncated"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64, LedgerError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn field(&mut self) -> Result<&'a [u8], LedgerError> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| LedgerError::Malformed("length"))?;
        self.take(n)
    }
}

impl LedgerTx {
    pub fn sign(aid: AssetId, pk_dst: PublicKey, timelock: Option<Round>, payload: Vec<u8>, sk: &SecretKey) -> Self {
        let sig = pkc_sign(sk, &signing_bytes(&aid, &pk_dst, timelock, &payload));
        LedgerTx { aid, pk_dst, timelock, payload, sig }
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        signing_bytes(&self.aid, &self.pk_dst, self.timelock, &self.payload)
    }

    pub fn verify(&self, pk: &PublicKey) -> bool {
        pkc_verify(pk, &self.signing_bytes(), &self.sig)
    }

    /// Signed part followed by the length-prefixed 64-byte signature.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.signing_bytes();
        put(&mut out, &self.sig.to_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LedgerError> {
        let mut r = Reader(bytes);
        let aid = String::from_utf8(r.field()?.to_vec()).map_err(|_| LedgerError::Malformed("aid"))?;
        let pk: [u8; 32] = r.field()?.try_into().map_err(|_| LedgerError::Malformed("pk length"))?;
        let timelock = match r.take(1)?[0] {
            0 => None,
            1 => Some(r.u64()?),
            _ => return Err(LedgerError::Malformed("timelock tag")),
        };
        let payload = r.field()?.to_vec();
        let sig = Signature::from_bytes(r.field()?).map_err(|_| LedgerError::Malformed("signature"))?;
        if !r.0.is_empty() {
            return Err(LedgerError::Malformed("trailing bytes"));
        }
        Ok(LedgerTx { aid: AssetId(aid), pk_dst: PublicKey(pk), timelock, payload, sig })
    }
}

/// How the ledger picks an inclusion round in `[now, now + Δ]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InclusionPolicy {
    #[default]
    Next,
    Worst,
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxLogEntry {
    pub index: usize,
    pub tx: LedgerTx,
    pub submitter: String,
    pub submitted_round: Round,
    pub included_round: Round,
    pub processed: bool,
    pub applied: bool,
    pub reason: Option<RejectReason>,
}

#[derive(Clone, Debug)]
pub struct Ledger {
    kind: LedgerKind,
    delta: Round,
    now: Round,
    assets: BTreeMap<AssetId, PublicKey>,
    tx_log: Vec<TxLogEntry>,
    policy: InclusionPolicy,
    rng: ChaCha20Rng,
}

impl Ledger {
    pub fn new(kind: LedgerKind, delta: Round, policy: InclusionPolicy, seed: u64) -> Self {
        Ledger {
            kind,
            delta,
            now: 0,
            assets: BTreeMap::new(),
            tx_log: Vec::new(),
            policy,
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0x6c65_6400),
        }
    }

    pub fn kind(&self) -> LedgerKind {
        self.kind
    }

    pub fn delta(&self) -> Round {
        self.delta
    }

    pub fn now(&self) -> Round {
        self.now
    }

    pub fn set_policy(&mut self, policy: InclusionPolicy) {
        self.policy = policy;
    }

    pub fn genesis_mint(&mut self, aid: AssetId, pk: PublicKey) -> Result<(), LedgerError> {
        if self.assets.contains_key(&aid) {
            return Err(LedgerError::DuplicateAsset(aid));
        }
        self.assets.insert(aid, pk);
        Ok(())
    }

    pub fn query(&self, aid: &AssetId) -> Result<PublicKey, LedgerError> {
        self.assets.get(aid).copied().ok_or_else(|| LedgerError::NotFound(aid.clone()))
    }

    pub fn assets(&self) -> &BTreeMap<AssetId, PublicKey> {
        &self.assets
    }

    pub fn tx_log(&self) -> &[TxLogEntry] {
        &self.tx_log
    }

    /// Submits with the policy's inclusion delay. Returns the log index.
    pub fn submit(&mut self, tx: LedgerTx, submitter: &str) -> usize {
        let delay = match self.policy {
            InclusionPolicy::Next => 1.min(self.delta),
            InclusionPolicy::Worst => self.delta,
            InclusionPolicy::Random => self.rng.gen_range(0..=self.delta),
        };
        self.submit_with_delay(tx, submitter, delay)
    }

    /// Submits with an explicit inclusion delay, clamped to `Δ`.
    pub fn submit_with_delay(&mut self, tx: LedgerTx, submitter: &str, delay: Round) -> usize {
        let index = self.tx_log.len();
        self.tx_log.push(TxLogEntry {
            index,
            tx,
            submitter: submitter.to_string(),
            submitted_round: self.now,
            included_round: self.now + delay.min(self.delta),
            processed: false,
            applied: false,
            reason: None,
        });
        index
    }

    /// Moves the ledger clock forward.
    pub fn set_now(&mut self, now: Round) {
        self.now = self.now.max(now);
    }

    /// Includes every transaction scheduled at or before the current round,
    /// in submission order. Returns the indices processed.
    pub fn process(&mut self) -> Vec<usize> {
        let now = self.now;
        let due: Vec<usize> = self
            .tx_log
            .iter()
            .filter(|e| !e.processed && e.included_round <= now)
            .map(|e| e.index)
            .collect();
        for &i in &due {
            let verdict = self.validate(&self.tx_log[i].tx, now);
            let entry = &mut self.tx_log[i];
            entry.processed = true;
            entry.included_round = now;
            match verdict {
                Ok(()) => {
                    entry.applied = true;
                    self.assets.insert(entry.tx.aid.clone(), entry.tx.pk_dst);
                }
                Err(r) => entry.reason = Some(r),
            }
        }
        due
    }

    fn validate(&self, tx: &LedgerTx, now: Round) -> Result<(), RejectReason> {
        let owner = self.assets.get(&tx.aid).ok_or(RejectReason::UnknownAsset)?;
        if !tx.verify(owner) {
            return Err(RejectReason::BadSig);
        }
        match (self.kind, tx.timelock) {
            (LedgerKind::Scriptless, Some(_)) => Err(RejectReason::TimelockUnsupported),
            (LedgerKind::Timelock, Some(t)) if now < t => Err(RejectReason::TimelockNotReached),
            _ => Ok(()),
        }
    }

    /// Every transaction included at `round`, applied or not.
    pub fn observe(&self, round: Round) -> Vec<&TxLogEntry> {
        self.tx_log.iter().filter(|e| e.processed && e.included_round == round).collect()
    }

    pub fn tx_log_jsonl(&self) -> String {
        self.tx_log
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
            .collect()
    }
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}
