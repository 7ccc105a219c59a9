//! Scenario files: participants, funding, a timed script of operations and
//! faults, all with explicit rounds.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::clock_net::{AsyncPolicy, Round};
use crate::crypto::DtcParams;
use crate::ledger::{InclusionPolicy, LedgerKind};
use crate::te_dtc::NodeBehaviour;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScenarioInvalid {
    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("{field}: {msg}")]
    Field { field: String, msg: String },
}

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> ScenarioInvalid {
    ScenarioInvalid::Field { field: field.into(), msg: msg.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Tee,
    Dtc { n: usize, t: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantSpec {
    pub name: String,
    /// Enclave shared with other participants naming the same host.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tee: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Funding {
    pub party: String,
    pub aid: String,
    pub release: Round,
    #[serde(default = "one")]
    pub round: Round,
}

fn one() -> Round {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Deposit { round: Round, party: String, aid: String, release: Round },
    Backup { round: Round, party: String, aid: String, release: Round },
    Pay { round: Round, payer: String, aid: String, payee: String },
    Swap { round: Round, initiator: String, aid_a: String, responder: String, aid_b: String },
    Recover { round: Round, party: String, aid: String },
    /// Payment to a key outside the system, derived from `recipient`.
    Exit { round: Round, party: String, aid: String, recipient: String },
}

impl Action {
    pub fn round(&self) -> Round {
        match self {
            Action::Deposit { round, .. }
            | Action::Backup { round, .. }
            | Action::Pay { round, .. }
            | Action::Swap { round, .. }
            | Action::Recover { round, .. }
            | Action::Exit { round, .. } => *round,
        }
    }

    pub fn op(&self) -> &'static str {
        match self {
            Action::Deposit { .. } => "deposit",
            Action::Backup { .. } => "backup",
            Action::Pay { .. } => "pay",
            Action::Swap { .. } => "swap",
            Action::Recover { .. } => "recover",
            Action::Exit { .. } => "exit",
        }
    }

    /// The party that performs the action.
    pub fn actor(&self) -> &str {
        match self {
            Action::Deposit { party, .. }
            | Action::Backup { party, .. }
            | Action::Recover { party, .. }
            | Action::Exit { party, .. } => party,
            Action::Pay { payer, .. } => payer,
            Action::Swap { initiator, .. } => initiator,
        }
    }

    fn parties(&self) -> Vec<(&'static str, &str)> {
        match self {
            Action::Pay { payer, payee, .. } => vec![("payer", payer), ("payee", payee)],
            Action::Swap { initiator, responder, .. } => vec![("initiator", initiator), ("responder", responder)],
            a => vec![("party", a.actor())],
        }
    }

    fn aids(&self) -> Vec<(&'static str, &str)> {
        match self {
            Action::Swap { aid_a, aid_b, .. } => vec![("aid_a", aid_a), ("aid_b", aid_b)],
            Action::Deposit { aid, .. }
            | Action::Backup { aid, .. }
            | Action::Pay { aid, .. }
            | Action::Recover { aid, .. }
            | Action::Exit { aid, .. } => vec![("aid", aid)],
        }
    }
}

/// Participants are addressed by name: `A` for a user, `tee:A` for the
/// enclave serving `A` (or `tee:<host>` when shared), `A.n2` for node 2 of
/// `A`'s committee.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultDecl {
    Crash { target: String, round: Round },
    Block { src: String, dst: String, from: Round },
    Behaviour { target: String, behaviour: NodeBehaviour },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Options {
    pub skip_margin_check: bool,
    pub inclusion: InclusionPolicy,
    pub async_policy: AsyncPolicy,
    pub auto_recover: bool,
    pub submit_stale: bool,
    /// Defaults to `delta`.
    pub probe_every: Option<Round>,
    pub op_timeout: Option<Round>,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            skip_margin_check: false,
            inclusion: InclusionPolicy::Next,
            async_policy: AsyncPolicy::Next,
            auto_recover: true,
            submit_stale: false,
            probe_every: None,
            op_timeout: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub ledger: LedgerKind,
    pub delta: Round,
    pub backend: BackendSpec,
    pub participants: Vec<ParticipantSpec>,
    #[serde(default)]
    pub funding: Vec<Funding>,
    #[serde(default)]
    pub script: Vec<Action>,
    #[serde(default)]
    pub faults: Vec<FaultDecl>,
    pub horizon: Round,
    #[serde(default)]
    pub oracle: bool,
    #[serde(default)]
    pub options: Options,
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self, ScenarioInvalid> {
        let sc: Scenario = serde_json::from_str(s).map_err(|e| ScenarioInvalid::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn tee_host(&self, party: &str) -> String {
        let p = self.participants.iter().find(|p| p.name == party);
        p.and_then(|p| p.tee.clone()).unwrap_or_else(|| party.to_string())
    }

    /// Funding entries followed by the script, in execution order.
    pub fn actions(&self) -> Vec<Action> {
        let mut all: Vec<Action> = self
            .funding
            .iter()
            .map(|f| Action::Deposit { round: f.round, party: f.party.clone(), aid: f.aid.clone(), release: f.release })
            .chain(self.script.iter().cloned())
            .collect();
        all.sort_by_key(Action::round);
        all
    }

    /// Latest release round named anywhere, plus three deltas: by then every
    /// backup has matured and had time to land.
    pub fn settle_horizon(&self) -> Round {
        let latest = self
            .actions()
            .iter()
            .map(|a| match a {
                Action::Deposit { release, .. } | Action::Backup { release, .. } => *release,
                other => other.round(),
            })
            .max()
            .unwrap_or(0);
        latest + 3 * self.delta
    }

    pub fn dtc_params(&self) -> Option<DtcParams> {
        match self.backend {
            BackendSpec::Tee => None,
            BackendSpec::Dtc { n, t } => DtcParams::new(n, t).ok(),
        }
    }

    /// Every participant name a fault may target.
    pub fn participant_names(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for p in &self.participants {
            out.insert(p.name.clone());
            match self.backend {
                BackendSpec::Tee => {
                    out.insert(format!("tee:{}", self.tee_host(&p.name)));
                }
                BackendSpec::Dtc { n, .. } => {
                    out.extend((1..=n).map(|i| format!("{}.n{i}", p.name)));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ScenarioInvalid> {
        if self.delta == 0 {
            return Err(invalid("delta", "must be at least 1"));
        }
        if let BackendSpec::Dtc { n, t } = self.backend {
            DtcParams::new(n, t).map_err(|e| invalid("backend", e.to_string()))?;
        }
        if self.participants.is_empty() {
            return Err(invalid("participants", "at least one participant required"));
        }
        let mut names = BTreeSet::new();
        for (i, p) in self.participants.iter().enumerate() {
            let f = format!("participants[{i}].name");
            if p.name.is_empty() || p.name.contains([':', '.', '/']) {
                return Err(invalid(f, "must be non-empty without ':', '.' or '/'"));
            }
            if !names.insert(p.name.as_str()) {
                return Err(invalid(f, format!("duplicate participant {}", p.name)));
            }
            if p.tee.is_some() && self.backend != BackendSpec::Tee {
                return Err(invalid(format!("participants[{i}].tee"), "shared enclaves need the tee backend"));
            }
        }
        let mut funded = BTreeSet::new();
        for (i, f) in self.funding.iter().enumerate() {
            if !names.contains(f.party.as_str()) {
                return Err(invalid(format!("funding[{i}].party"), format!("unknown participant {}", f.party)));
            }
            if !funded.insert(f.aid.as_str()) {
                return Err(invalid(format!("funding[{i}].aid"), format!("asset {} funded twice", f.aid)));
            }
            if f.round == 0 {
                return Err(invalid(format!("funding[{i}].round"), "rounds start at 1"));
            }
        }
        for (i, a) in self.script.iter().enumerate() {
            if a.round() == 0 {
                return Err(invalid(format!("script[{i}].round"), "rounds start at 1"));
            }
            for (field, p) in a.parties() {
                if !names.contains(p) {
                    return Err(invalid(format!("script[{i}].{field}"), format!("unknown participant {p}")));
                }
            }
            if let Action::Deposit { aid, .. } = a {
                if !funded.insert(aid.as_str()) {
                    return Err(invalid(format!("script[{i}].aid"), format!("asset {aid} funded twice")));
                }
            }
        }
        for (i, a) in self.script.iter().enumerate() {
            for (field, aid) in a.aids() {
                if !funded.contains(aid) {
                    return Err(invalid(format!("script[{i}].{field}"), format!("undeclared asset {aid}")));
                }
            }
        }
        let known = self.participant_names();
        for (i, f) in self.faults.iter().enumerate() {
            let targets: Vec<(&str, &String)> = match f {
                FaultDecl::Crash { target, .. } | FaultDecl::Behaviour { target, .. } => vec![("target", target)],
                FaultDecl::Block { src, dst, .. } => vec![("src", src), ("dst", dst)],
            };
            for (field, t) in targets {
                if !known.contains(t) {
                    return Err(invalid(format!("faults[{i}].{field}"), format!("unknown participant {t}")));
                }
            }
            if let FaultDecl::Behaviour { target, .. } = f {
                if !target.contains(".n") {
                    return Err(invalid(format!("faults[{i}].target"), "behaviour faults apply to committee nodes"));
                }
            }
        }
        let last = self.actions().iter().map(Action::round).max().unwrap_or(0);
        if self.horizon < last + 3 * self.delta {
            return Err(invalid("horizon", format!("must be at least {} (last action + 3*delta)", last + 3 * self.delta)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "seed": 1, "ledger": "timelock", "delta": 10, "backend": {"kind": "tee"},
        "participants": [{"name": "A"}, {"name": "B"}],
        "funding": [{"party": "A", "aid": "a1", "release": 100}],
        "script": [{"op": "pay", "round": 5, "payer": "A", "aid": "a1", "payee": "B"}],
        "horizon": 40
    }"#;

    #[test]
    fn parses_and_orders_actions() {
        let sc = Scenario::from_json(BASE).unwrap();
        let ops: Vec<_> = sc.actions().iter().map(|a| a.op()).collect();
        assert_eq!(ops, ["deposit", "pay"]);
        assert!(sc.options.auto_recover);
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = Scenario::from_json("{\n  \"seed\": }").unwrap_err();
        assert!(matches!(err, ScenarioInvalid::Parse { line: 2, .. }));
    }

    #[test]
    fn unknown_payee_names_field() {
        let bad = BASE.replace("\"payee\": \"B\"", "\"payee\": \"Z\"");
        let err = Scenario::from_json(&bad).unwrap_err();
        assert_eq!(err, invalid("script[0].payee", "unknown participant Z"));
    }

    #[test]
    fn short_horizon_rejected() {
        let bad = BASE.replace("\"horizon\": 40", "\"horizon\": 34");
        assert!(matches!(Scenario::from_json(&bad), Err(ScenarioInvalid::Field { field, .. }) if field == "horizon"));
    }

    #[test]
    fn unknown_field_rejected() {
        let bad = BASE.replace("\"seed\": 1", "\"seed\": 1, \"sed\": 2");
        assert!(matches!(Scenario::from_json(&bad), Err(ScenarioInvalid::Parse { .. })));
    }
}
