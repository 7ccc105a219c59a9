//! Messages exchanged between users, trusted entities and ledger watchers,
//! plus the recovery artifacts users keep.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock_net::Round;
use crate::crypto::dtc::{DtcMsg, GroupKey};
use crate::crypto::{IdealPuzzle, PublicKey, Signature};
use crate::ledger::{hex_bytes, AssetId, LedgerTx};

/// Lock state of an asset record inside a trusted entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockState {
    Unlocked,
    Locked,
}

/// A user-held unilateral recovery object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BackupArtifact {
    /// Signed transaction, usable as is (natively timelocked where supported).
    Signed { tx: LedgerTx },
    /// Puzzle hiding the canonical encoding of a signed transaction.
    Puzzle { puzzle: IdealPuzzle },
    /// Puzzles hiding key shares; any `threshold` of them rebuild the key,
    /// which then signs `(aid, pk_r, payload)`.
    SharePuzzles {
        aid: AssetId,
        pk_r: PublicKey,
        pk_a: PublicKey,
        #[serde(with = "hex_bytes")]
        payload: Vec<u8>,
        threshold: usize,
        puzzles: Vec<(u32, IdealPuzzle)>,
    },
}

impl BackupArtifact {
    pub fn kind(&self) -> &'static str {
        match self {
            BackupArtifact::Signed { .. } => "signed",
            BackupArtifact::Puzzle { .. } => "puzzle",
            BackupArtifact::SharePuzzles { .. } => "share_puzzles",
        }
    }
}

/// Encoding of one key share hidden in a puzzle: `index (u32 BE) || scalar`.
pub fn encode_share(index: u32, value: &[u8; 32]) -> Vec<u8> {
    let mut out = index.to_be_bytes().to_vec();
    out.extend_from_slice(value);
    out
}

pub fn decode_share(bytes: &[u8]) -> Option<(u32, [u8; 32])> {
    if bytes.len() != 36 {
        return None;
    }
    let idx = u32::from_be_bytes(bytes[..4].try_into().ok()?);
    Some((idx, bytes[4..].try_into().ok()?))
}

pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Encrypted, identity-signed handoff between enclaves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sealed {
    pub sender: PublicKey,
    #[serde(with = "hex_bytes")]
    pub ct: Vec<u8>,
    pub sig: Signature,
}

/// Committee handoff of a payment: the asset's group key and release round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayProcBody {
    pub aid: AssetId,
    pub key: GroupKey,
    pub release: Round,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapProcBody {
    pub aid_a: AssetId,
    pub key_a: GroupKey,
    pub release_a: Round,
    pub aid_b: AssetId,
    pub pk_a2: PublicKey,
    pub pk_b2: PublicKey,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapOptiBody {
    pub aid_b: AssetId,
    pub key_b: GroupKey,
    pub release_b: Round,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Msg {
    // user -> own trusted entity
    GetPk { aid: AssetId, release: Round },
    Backup { aid: AssetId, pk_r: PublicKey, release: Round },
    PayReq { aid: AssetId, payee: String },
    PayAck { aid: AssetId, payer: String },
    SwapPre { aid_a: AssetId, aid_b: AssetId, pk_a2: PublicKey, pk_b2: PublicKey, responder: String },
    SwapAck { aid_a: AssetId, aid_b: AssetId, pk_a2: PublicKey, pk_b2: PublicKey, initiator: String },
    ExitReq { aid: AssetId, recipient: PublicKey },
    Ping { nonce: u64 },
    /// Committee initiator: the received asset is backed up, finish the swap.
    SwapConfirm { aid: AssetId },

    // trusted entity -> own user
    GetPkOk { aid: AssetId, pk: PublicKey, release: Round },
    BackupOk { aid: AssetId, pk_r: PublicKey, release: Round, artifact: BackupArtifact },
    OpAbort { op: String, aid: AssetId, reason: String },
    PayStarted { aid: AssetId },
    PayComplete { aid: AssetId, release: Round },
    SwapPess { aid_a: AssetId, pk_b2: PublicKey, t_prime: Round, digest: String, artifact: BackupArtifact },
    SwapComplete { aid: AssetId, release: Round },
    ExitOk { tx: LedgerTx },
    Pong { nonce: u64 },
    /// Committee initiator: the counter-asset arrived and must be backed up
    /// before the swap is acknowledged.
    SwapReceived { aid: AssetId, release: Round },

    // user <-> user
    PayNotify { aid: AssetId, payer: String },
    PayReceipt { aid: AssetId },
    SwapOffer { aid_a: AssetId, aid_b: AssetId, pk_a2: PublicKey, pk_b2: PublicKey, initiator: String },

    // enclave <-> enclave
    Sealed(Sealed),
    SwapOk { sender: PublicKey, sig: Signature },

    // committee node <-> committee node
    Dtc { instance: String, from: u32, msg: DtcMsg },
    PayProc { from: u32, body: PayProcBody },
    SwapProc { from: u32, body: SwapProcBody },
    SwapOpti { from: u32, body: SwapOptiBody },
    SwapOkGroup { from: u32, sig: Signature },
}

impl Msg {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("message serializes")
    }

    pub fn decode(bytes: &[u8]) -> Option<Msg> {
        serde_json::from_slice(bytes).ok()
    }

    pub fn name(&self) -> &'static str {
        match self {
            Msg::GetPk { .. } => "GETPK",
            Msg::Backup { .. } => "BACKUP",
            Msg::PayReq { .. } => "PAY",
            Msg::PayAck { .. } => "PAY-ACK",
            Msg::SwapPre { .. } => "SWAP-PRE",
            Msg::SwapAck { .. } => "SWAP-ACK",
            Msg::ExitReq { .. } => "EXIT",
            Msg::Ping { .. } => "PING",
            Msg::Pong { .. } => "PONG",
            Msg::SwapConfirm { .. } => "SWAP-CONFIRM",
            Msg::SwapReceived { .. } => "SWAP-RECEIVED",
            Msg::GetPkOk { .. } => "GETPK-OK",
            Msg::BackupOk { .. } => "BACKUP-OK",
            Msg::OpAbort { .. } => "ABORT",
            Msg::PayStarted { .. } => "PAY-STARTED",
            Msg::PayComplete { .. } => "PAY-COMPLETE",
            Msg::SwapPess { .. } => "SWAP-PESS",
            Msg::SwapComplete { .. } => "SWAP-COMPLETE",
            Msg::ExitOk { .. } => "EXIT-OK",
            Msg::PayNotify { .. } => "PAY-NOTIFY",
            Msg::PayReceipt { .. } => "PAY-RECEIPT",
            Msg::SwapOffer { .. } => "SWAP-OFFER",
            Msg::Sealed(_) => "SEALED",
            Msg::SwapOk { .. } => "SWAP-OK",
            Msg::Dtc { .. } => "DTC",
            Msg::PayProc { .. } => "PAY-PROC",
            Msg::SwapProc { .. } => "SWAP-PROC",
            Msg::SwapOpti { .. } => "SWAP-OPTI",
            Msg::SwapOkGroup { .. } => "SWAP-OK",
        }
    }
}

/// Canonical bytes signed for a swap acknowledgement.
pub fn swap_ok_bytes(sid: &str) -> Vec<u8> {
    let mut out = b"SWAP-OK".to_vec();
    out.extend_from_slice(&(sid.len() as u64).to_be_bytes());
    out.extend_from_slice(sid.as_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn share_encoding_roundtrip() {
        let v = [7u8; 32];
        assert_eq!(decode_share(&encode_share(3, &v)), Some((3, v)));
        assert_eq!(decode_share(&[0; 5]), None);
    }

    #[test]
    fn msg_roundtrip() {
        let m = Msg::PayNotify { aid: AssetId::new("a"), payer: "A".into() };
        assert_eq!(Msg::decode(&m.encode()), Some(m));
    }

    #[test]
    fn pay_proc_with_group_key_roundtrip() {
        let pk = crate::crypto::pkc_keygen(b"g").pk;
        let key = GroupKey { pk, public_shares: (1..=4).map(|i| (i, pk)).collect() };
        let m = Msg::PayProc { from: 2, body: PayProcBody { aid: AssetId::new("a"), key, release: 95 } };
        assert_eq!(Msg::decode(&m.encode()), Some(m));
    }
}
