//! Run reports. Everything here is derived from the trace log, so a report
//! can be recomputed from a saved trace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::sim::Snapshot;
use crate::clock_net::{Round, Trace, TraceEvent};
use crate::crypto::PublicKey;
use crate::ideal_model::{differential_check, DiffVerdict};
use crate::ledger::AssetId;
use crate::protocol::LockState;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReportError {
    #[error("trace has no {0} event")]
    Missing(&'static str),
    #[error("malformed {0} event")]
    Malformed(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub sid: String,
    pub op: String,
    pub party: String,
    pub start: Round,
    pub end: Option<Round>,
    pub rounds: Option<Round>,
    pub onchain: usize,
    pub messages: usize,
    pub outcome: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fairness {
    pub sid: String,
    pub initiator: String,
    pub responder: String,
    /// `(initiator keeps aid_a, initiator got aid_b, responder keeps aid_b, responder got aid_a)`
    pub holdings: (bool, bool, bool, bool),
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnerRow {
    pub aid: AssetId,
    pub pk: PublicKey,
    /// `wallet:<party>`, `te:<party>` for a live unlocked holding,
    /// `locked:<party>` otherwise, or `external`.
    pub owner: String,
    pub t_release: Option<Round>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub backend: Value,
    pub ledger: Value,
    pub final_round: Round,
    pub receipts: Vec<Receipt>,
    pub fairness: Vec<Fairness>,
    pub differential: Option<DiffVerdict>,
    pub owners: Vec<OwnerRow>,
    pub ledger_submissions: usize,
    pub ledger_applied: usize,
    pub messages: usize,
    pub pending_ops: usize,
    pub pass: bool,
}

fn find<'a>(trace: &'a Trace, kind: &'static str) -> Result<&'a TraceEvent, ReportError> {
    trace.of_kind(kind).last().ok_or(ReportError::Missing(kind))
}

fn str_of<'a>(v: &'a Value, k: &str) -> &'a str {
    v.get(k).and_then(Value::as_str).unwrap_or_default()
}

/// True if `party` controls `aid` at the end of the run: either the ledger
/// pays it to the party's wallet, or a live entity holds the still-funded
/// account unlocked for the party.
pub fn owns(s: &Snapshot, party: &str, aid: &AssetId) -> bool {
    let Some(on_chain) = s.ledger.get(aid) else { return false };
    if s.wallets.get(party) == Some(on_chain) {
        return true;
    }
    s.holdings
        .iter()
        .any(|h| h.party == party && h.aid == *aid && h.live && h.state == LockState::Unlocked && h.pk == *on_chain)
}

pub fn owner_table(s: &Snapshot) -> Vec<OwnerRow> {
    s.ledger
        .iter()
        .map(|(aid, pk)| {
            let wallet = s.wallets.iter().find(|(_, w)| *w == pk).map(|(p, _)| format!("wallet:{p}"));
            let held = s.holdings.iter().filter(|h| h.aid == *aid && h.pk == *pk);
            let live = held.clone().find(|h| h.live && h.state == LockState::Unlocked);
            let (owner, t_release) = match (wallet, live, held.clone().next()) {
                (Some(w), _, _) => (w, None),
                (None, Some(h), _) => (format!("te:{}", h.party), Some(h.t_release)),
                (None, None, Some(h)) => (format!("locked:{}", h.party), Some(h.t_release)),
                _ => ("external".to_string(), None),
            };
            OwnerRow { aid: aid.clone(), pk: *pk, owner, t_release }
        })
        .collect()
}

impl RunReport {
    pub fn from_trace(trace: &Trace) -> Result<Self, ReportError> {
        let setup = &find(trace, "sim.setup")?.detail;
        let fin = find(trace, "sim.final")?;
        let snap: Snapshot =
            serde_json::from_value(fin.detail.clone()).map_err(|_| ReportError::Malformed("sim.final"))?;
        let mut done: BTreeMap<(&str, &str), (Round, &str)> = BTreeMap::new();
        for e in trace.of_kind("user.op_done") {
            let op = str_of(&e.detail, "op");
            done.entry((e.sid.as_str(), op)).or_insert((e.round, str_of(&e.detail, "outcome")));
        }
        let submits: Vec<&TraceEvent> = trace.of_kind("user.submit").collect();
        // An asset whose deposit never completed was never minted and stays
        // with its depositor off the ledger.
        let depositors: BTreeMap<&str, &str> = trace
            .of_kind("sim.action")
            .filter(|a| str_of(&a.detail, "op") == "deposit")
            .map(|a| (str_of(&a.detail, "aid"), str_of(&a.detail, "party")))
            .collect();
        let mut receipts = Vec::new();
        let mut fairness = Vec::new();
        for a in trace.of_kind("sim.action") {
            let d = &a.detail;
            let op = str_of(d, "op");
            let party = str_of(d, "party").to_string();
            let sid = a.sid.as_str();
            let ok = |o: &str| done.get(&(sid, o)).filter(|(_, out)| *out == "ok").map(|(r, _)| *r);
            let end = match op {
                "pay" => ok("pay_in"),
                "swap" => ok("swap").zip(ok("swap_resp")).map(|(x, y)| x.max(y)),
                "recover" => trace
                    .of_kind("ledger.include")
                    .find(|e| {
                        e.round >= a.round
                            && e.src == party
                            && str_of(&e.detail, "aid") == str_of(d, "aid")
                            && e.detail.get("applied") == Some(&Value::Bool(true))
                    })
                    .map(|e| e.round),
                other => ok(other),
            };
            let failed = done.iter().find(|((s, _), (_, out))| *s == sid && *out != "ok").map(|(_, (_, out))| *out);
            let outcome = match (end, failed) {
                (Some(_), _) => "ok",
                (None, Some(f)) => f,
                (None, None) => "pending",
            };
            let prefix = format!("{sid}/");
            let onchain = submits
                .iter()
                .filter(|e| {
                    e.sid == sid
                        || e.sid.starts_with(&prefix)
                        || (op == "recover"
                            && e.src == party
                            && e.round >= a.round
                            && str_of(&e.detail, "aid") == str_of(d, "aid"))
                })
                .count();
            let messages = trace
                .of_kind("net.send")
                .filter(|e| e.sid == sid && str_of(&e.detail, "channel") != "local")
                .count();
            receipts.push(Receipt {
                sid: sid.to_string(),
                op: op.to_string(),
                party: party.clone(),
                start: a.round,
                end,
                rounds: end.map(|e| e - a.round + 1),
                onchain,
                messages,
                outcome: outcome.to_string(),
            });
            if op == "swap" {
                let (ini, res) = (str_of(d, "initiator"), str_of(d, "responder"));
                let (aa, ab) = (AssetId::new(str_of(d, "aid_a")), AssetId::new(str_of(d, "aid_b")));
                let has = |party: &str, aid: &AssetId| {
                    owns(&snap, party, aid) || (!snap.ledger.contains_key(aid) && depositors.get(aid.0.as_str()) == Some(&party))
                };
                let h = (has(ini, &aa), has(ini, &ab), has(res, &ab), has(res, &aa));
                let pass = matches!(h, (true, false, true, false) | (false, true, false, true));
                fairness.push(Fairness { sid: sid.to_string(), initiator: ini.into(), responder: res.into(), holdings: h, pass });
            }
        }
        let oracle = setup.get("oracle").and_then(Value::as_bool).unwrap_or(false);
        let differential = oracle.then(|| differential_check(trace));
        let pass = fairness.iter().all(|f| f.pass) && differential.as_ref().is_none_or(DiffVerdict::is_equal);
        let includes: Vec<&TraceEvent> = trace.of_kind("ledger.include").collect();
        Ok(RunReport {
            scenario: str_of(setup, "scenario").to_string(),
            seed: setup.get("seed").and_then(Value::as_u64).unwrap_or(0),
            backend: setup.get("backend").cloned().unwrap_or(Value::Null),
            ledger: setup.get("ledger").cloned().unwrap_or(Value::Null),
            final_round: fin.round,
            receipts,
            fairness,
            differential,
            owners: owner_table(&snap),
            ledger_submissions: submits.len(),
            ledger_applied: includes.iter().filter(|e| e.detail.get("applied") == Some(&Value::Bool(true))).count(),
            messages: trace.of_kind("net.send").filter(|e| str_of(&e.detail, "channel") != "local").count(),
            pending_ops: snap.pending_ops,
            pass,
        })
    }

    pub fn receipt(&self, op: &str) -> Option<&Receipt> {
        self.receipts.iter().find(|r| r.op == op)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
