//! Orchestration schedules: a state machine whose states run up to four
//! ordered actions and leave through condition-gated transitions.

mod condition;
mod engine;
pub mod sim;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::app::AppSpec;
use crate::infra::{display_list, InfraUpdate, InfrastructureModel, NodeId, Violation};

pub use condition::{evaluate_condition, ConditionDoc, ConditionTree};
pub use engine::{
    run_schedule, ActionError, ActionTiming, Clock, DeliveryReport, EventRecord, EventSource, ExperimentTrace,
    IncomingEvent, Outcome, ScheduleDriver, StateVisit, TransitionRecord, WaitResult, EVALUATION_TICK,
};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandTarget {
    Container(String),
    Machine(String),
}

impl fmt::Display for CommandTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CommandTarget::Container(c) => write!(f, "container `{c}`"),
            CommandTarget::Machine(m) => write!(f, "machine `{m}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppCommand {
    pub target: CommandTarget,
    #[serde(default)]
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BroadcastPayload {
    pub payload: serde_json::Value,
}

/// `true`/`false`, or an object carrying an extra payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Broadcast {
    Enabled(bool),
    Payload(BroadcastPayload),
}

impl Default for Broadcast {
    fn default() -> Self {
        Broadcast::Enabled(true)
    }
}

impl Broadcast {
    /// The message sent to every notification endpoint, if any.
    pub fn message(&self, state: &str) -> Option<serde_json::Value> {
        match self {
            Broadcast::Enabled(false) => None,
            Broadcast::Enabled(true) => Some(serde_json::json!({ "state": state })),
            Broadcast::Payload(p) => Some(serde_json::json!({ "state": state, "payload": p.payload })),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub when: ConditionTree,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infra_update: Option<InfraUpdate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub commands: Vec<AppCommand>,
    #[serde(default)]
    pub broadcast: Broadcast,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transitions: Vec<Transition>,
}

impl StateSpec {
    pub fn is_terminal(&self) -> bool {
        self.transitions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub initial: String,
    /// Where unrecoverable action errors lead, if anywhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_state: Option<String>,
    pub states: Vec<StateSpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("malformed schedule document: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("invalid schedule:\n{}", display_list(.0))]
    Invalid(Vec<ScheduleViolation>),
}

impl Schedule {
    pub fn parse(json: &str) -> Result<Self, ScheduleError> {
        Ok(serde_json::from_str(json)?)
    }

    /// Parses and rejects any structural violation.
    pub fn parse_valid(json: &str) -> Result<Self, ScheduleError> {
        let s = Self::parse(json)?;
        let report = validate_schedule(&s);
        if report.violations.is_empty() {
            Ok(s)
        } else {
            Err(ScheduleError::Invalid(report.violations))
        }
    }

    pub fn state(&self, name: &str) -> Option<&StateSpec> {
        self.states.iter().find(|s| s.name == name)
    }

    fn successors(&self, name: &str) -> Vec<&str> {
        let mut out: Vec<&str> =
            self.state(name).map(|s| s.transitions.iter().map(|t| t.to.as_str()).collect()).unwrap_or_default();
        if let Some(f) = &self.failure_state {
            out.push(f);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleViolation {
    NoStates,
    EmptyStateName,
    DuplicateState(String),
    UnknownInitial(String),
    UnknownFailureState(String),
    UnknownTarget { state: String, to: String },
    Condition { state: String, transition: usize, problem: String },
    Infra { state: String, violation: Violation },
    UnknownCommandTarget { state: String, target: CommandTarget },
}

impl fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleViolation::NoStates => write!(f, "schedule has no states"),
            ScheduleViolation::EmptyStateName => write!(f, "state name must not be empty"),
            ScheduleViolation::DuplicateState(s) => write!(f, "state `{s}` declared more than once"),
            ScheduleViolation::UnknownInitial(s) => write!(f, "initial state `{s}` is not declared"),
            ScheduleViolation::UnknownFailureState(s) => write!(f, "failure state `{s}` is not declared"),
            ScheduleViolation::UnknownTarget { state, to } => write!(f, "state `{state}` transitions to undeclared `{to}`"),
            ScheduleViolation::Condition { state, transition, problem } => {
                write!(f, "state `{state}`, transition #{transition}: {problem}")
            }
            ScheduleViolation::Infra { state, violation } => write!(f, "state `{state}` infrastructure update: {violation}"),
            ScheduleViolation::UnknownCommandTarget { state, target } => {
                write!(f, "state `{state}` sends a command to unknown {target}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScheduleReport {
    pub violations: Vec<ScheduleViolation>,
    pub warnings: Vec<String>,
}

impl ScheduleReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Structural checks. Unreachable states and states that can never reach a
/// terminal state are warnings, not violations.
pub fn validate_schedule(s: &Schedule) -> ScheduleReport {
    let mut r = ScheduleReport::default();
    if s.states.is_empty() {
        r.violations.push(ScheduleViolation::NoStates);
        return r;
    }
    let mut names = BTreeSet::new();
    for st in &s.states {
        if st.name.is_empty() {
            r.violations.push(ScheduleViolation::EmptyStateName);
        } else if !names.insert(st.name.as_str()) {
            r.violations.push(ScheduleViolation::DuplicateState(st.name.clone()));
        }
    }
    if !names.contains(s.initial.as_str()) {
        r.violations.push(ScheduleViolation::UnknownInitial(s.initial.clone()));
    }
    if let Some(f) = s.failure_state.as_ref().filter(|f| !names.contains(f.as_str())) {
        r.violations.push(ScheduleViolation::UnknownFailureState(f.clone()));
    }
    for st in &s.states {
        for (i, t) in st.transitions.iter().enumerate() {
            if !names.contains(t.to.as_str()) {
                r.violations.push(ScheduleViolation::UnknownTarget { state: st.name.clone(), to: t.to.clone() });
            }
            for problem in t.when.problems() {
                r.violations.push(ScheduleViolation::Condition { state: st.name.clone(), transition: i, problem });
            }
        }
    }
    if !r.violations.is_empty() {
        return r;
    }

    let mut reachable = BTreeSet::from([s.initial.as_str()]);
    let mut queue = VecDeque::from([s.initial.as_str()]);
    while let Some(n) = queue.pop_front() {
        for next in s.successors(n) {
            if reachable.insert(next) {
                queue.push_back(next);
            }
        }
    }
    // backwards from terminal states
    let mut preds: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for st in &s.states {
        for next in s.successors(&st.name) {
            preds.entry(next).or_default().push(&st.name);
        }
    }
    let mut finishing: BTreeSet<&str> = s.states.iter().filter(|s| s.is_terminal()).map(|s| s.name.as_str()).collect();
    let mut queue: VecDeque<&str> = finishing.iter().copied().collect();
    while let Some(n) = queue.pop_front() {
        for p in preds.get(n).into_iter().flatten() {
            if finishing.insert(p) {
                queue.push_back(p);
            }
        }
    }
    for st in &s.states {
        if !reachable.contains(st.name.as_str()) {
            r.warnings.push(format!("state `{}` is unreachable from `{}`", st.name, s.initial));
        }
        if !finishing.contains(st.name.as_str()) {
            r.warnings.push(format!("state `{}` has no path to a terminal state", st.name));
        }
    }
    r
}

/// Checks infrastructure updates and command targets against the model and
/// the application, when given.
pub fn check_references(s: &Schedule, model: &InfrastructureModel, app: Option<&AppSpec>) -> Vec<ScheduleViolation> {
    let mut out = Vec::new();
    for st in &s.states {
        if let Some(u) = &st.infra_update {
            out.extend(u.check(model).into_iter().map(|violation| ScheduleViolation::Infra { state: st.name.clone(), violation }));
        }
        for c in &st.commands {
            let known = match &c.target {
                CommandTarget::Machine(m) => model.require_machine(&NodeId::new(m.clone())).is_ok(),
                CommandTarget::Container(name) => app.is_none_or(|a| a.container(name).is_some()),
            };
            if !known {
                out.push(ScheduleViolation::UnknownCommandTarget { state: st.name.clone(), target: c.target.clone() });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MEMORY_PRESSURE: &str = r#"{
      "initial": "INIT",
      "states": [
        {"name": "INIT", "transitions": [{"when": {"time": "20m"}, "to": "MEMORY -20%"}]},
        {"name": "MEMORY -20%",
         "infra_update": {"machines": [{"id": "*", "memory_scale": 0.8}]},
         "transitions": [{"when": {"event": "memory error"}, "to": "MEMORY RESET"},
                         {"when": {"time": "20m"}, "to": "HIGH LATENCY"}]},
        {"name": "MEMORY RESET",
         "infra_update": {"reset": true},
         "transitions": [{"when": {"and": [{"event": "application started"}, {"time": "1m"}]}, "to": "HIGH LATENCY"}]},
        {"name": "HIGH LATENCY",
         "infra_update": {"reset": true, "links": [{"from": "M1", "to": "M2", "delay_ms_oneway": 50}]},
         "transitions": [{"when": {"time": "20m"}, "to": "FINAL"}]},
        {"name": "FINAL"}
      ]
    }"#;

    #[test]
    fn memory_pressure_schedule_valid() {
        let s = Schedule::parse_valid(MEMORY_PRESSURE).unwrap();
        assert_eq!(s.states.len(), 5);
        let r = validate_schedule(&s);
        assert!(r.is_valid() && r.warnings.is_empty(), "{r:?}");
    }

    #[test]
    fn reports_all_violations() {
        let s = Schedule::parse(
            r#"{"initial":"X","failure_state":"F","states":[
                {"name":"A","transitions":[{"when":{"or":[{"time":"1s"}]},"to":"B"}]},
                {"name":"A"}]}"#,
        )
        .unwrap();
        let v = validate_schedule(&s).violations;
        assert!(v.contains(&ScheduleViolation::DuplicateState("A".into())));
        assert!(v.contains(&ScheduleViolation::UnknownInitial("X".into())));
        assert!(v.contains(&ScheduleViolation::UnknownFailureState("F".into())));
        assert!(v.contains(&ScheduleViolation::UnknownTarget { state: "A".into(), to: "B".into() }));
        assert!(v.iter().any(|v| matches!(v, ScheduleViolation::Condition { .. })));
    }

    #[test]
    fn warns_on_unreachable_and_trapped_states() {
        let s = Schedule::parse(
            r#"{"initial":"A","states":[
                {"name":"A","transitions":[{"when":{"time":"1s"},"to":"B"},{"when":{"time":"2s"},"to":"LOOP"}]},
                {"name":"B"},
                {"name":"LOOP","transitions":[{"when":{"time":"1s"},"to":"LOOP"}]},
                {"name":"ORPHAN"}]}"#,
        )
        .unwrap();
        let r = validate_schedule(&s);
        assert!(r.is_valid());
        assert_eq!(r.warnings.len(), 2, "{:?}", r.warnings);
        assert!(r.warnings.iter().any(|w| w.contains("ORPHAN") && w.contains("unreachable")));
        assert!(r.warnings.iter().any(|w| w.contains("LOOP") && w.contains("no path")));
    }

    #[test]
    fn broadcast_forms() {
        let st: StateSpec = serde_json::from_str(r#"{"name":"S"}"#).unwrap();
        assert_eq!(st.broadcast.message("S"), Some(serde_json::json!({"state":"S"})));
        let st: StateSpec = serde_json::from_str(r#"{"name":"S","broadcast":false}"#).unwrap();
        assert_eq!(st.broadcast.message("S"), None);
        let st: StateSpec = serde_json::from_str(r#"{"name":"S","broadcast":{"payload":7}}"#).unwrap();
        assert_eq!(st.broadcast.message("S"), Some(serde_json::json!({"state":"S","payload":7})));
    }

    #[test]
    fn references_checked() {
        let model = InfrastructureModel::parse(
            r#"{"machines":[{"id":"M1","cpu_cores":1,"memory_mb":512},{"id":"M2","cpu_cores":1,"memory_mb":512}],
                "connections":[{"from":"M1","to":"M2"}]}"#,
        )
        .unwrap();
        let s = Schedule::parse(MEMORY_PRESSURE).unwrap();
        assert!(check_references(&s, &model, None).is_empty());
        let bad = Schedule::parse(
            r#"{"initial":"A","states":[{"name":"A",
                "infra_update":{"partitions":["M9"]},
                "commands":[{"target":{"machine":"M7"},"payload":{}}]}]}"#,
        )
        .unwrap();
        assert_eq!(check_references(&bad, &model, None).len(), 2);
    }

    #[test]
    fn document_round_trip() {
        let s = Schedule::parse(MEMORY_PRESSURE).unwrap();
        let again = Schedule::parse(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, again);
    }
}
