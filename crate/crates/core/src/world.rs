//! Participant directory and the per-call context handed to actors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock_net::{Channel, Network, ParticipantId, Round};
use crate::crypto::dtc::DtcParams;
use crate::crypto::{PublicKey, TlpOracle};
use crate::ledger::{Ledger, LedgerKind};
use crate::protocol::Msg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Tee,
    Dtc { n: usize, t: usize },
}

impl Backend {
    pub fn label(&self) -> &'static str {
        match self {
            Backend::Tee => "tee",
            Backend::Dtc { .. } => "dtc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Role {
    User(String),
    Tee(String),
    Node(String, u32),
}

#[derive(Clone, Debug)]
pub struct PartyInfo {
    pub name: String,
    pub user: ParticipantId,
    pub wallet: PublicKey,
    pub tee: Option<ParticipantId>,
    pub tee_identity: Option<PublicKey>,
    /// Committee members by share index (1-based), DTC backend only.
    pub nodes: BTreeMap<u32, ParticipantId>,
}

#[derive(Clone, Debug)]
pub struct Directory {
    pub parties: BTreeMap<String, PartyInfo>,
    pub roles: BTreeMap<ParticipantId, Role>,
    pub delta: Round,
    pub ledger_kind: LedgerKind,
    pub backend: Backend,
    pub dtc: Option<DtcParams>,
}

impl Directory {
    pub fn party(&self, name: &str) -> Option<&PartyInfo> {
        self.parties.get(name)
    }

    pub fn party_of_tee(&self, tee: ParticipantId) -> Vec<&PartyInfo> {
        self.parties.values().filter(|p| p.tee == Some(tee)).collect()
    }

    pub fn party_by_identity(&self, id: &PublicKey) -> Option<&PartyInfo> {
        self.parties.values().find(|p| p.tee_identity.as_ref() == Some(id))
    }

    pub fn party_by_wallet(&self, pk: &PublicKey) -> Option<&PartyInfo> {
        self.parties.values().find(|p| p.wallet == *pk)
    }

    pub fn role(&self, p: ParticipantId) -> Option<&Role> {
        self.roles.get(&p)
    }
}

/// Mutable simulation services available to an actor during one call.
pub struct Ctx<'a> {
    pub now: Round,
    pub net: &'a mut Network,
    pub ledger: &'a mut Ledger,
    pub tlp: &'a mut TlpOracle,
    pub dir: &'a Directory,
}

impl Ctx<'_> {
    pub fn send(&mut self, channel: Channel, sid: &str, src: ParticipantId, dst: ParticipantId, msg: &Msg) {
        let payload = msg.encode();
        let res = match channel {
            Channel::Async => self.net.send_async(sid, src, dst, payload),
            Channel::Sync => self.net.send_sync(sid, src, dst, payload),
            Channel::Local => self.net.send_local(sid, src, dst, payload),
        };
        if res.is_ok() {
            self.label_last(msg.name());
        }
    }

    pub fn send_relayed(&mut self, sid: &str, src: ParticipantId, dst: ParticipantId, via: ParticipantId, msg: &Msg) {
        if self.net.send_relayed(sid, src, dst, msg.encode(), via).is_ok() {
            self.label_last(msg.name());
        }
    }

    fn label_last(&mut self, name: &str) {
        if let Some(Value::Object(m)) = self.net.trace.events.last_mut().map(|e| &mut e.detail) {
            m.insert("msg".into(), Value::String(name.into()));
        }
    }

    pub fn log(&mut self, kind: &str, sid: &str, src: &str, dst: &str, detail: Value) {
        self.net.trace.push(self.now, kind, sid, src, dst, detail);
    }
}
