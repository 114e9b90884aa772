use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AppCommand, Schedule, StateSpec, Transition};
use crate::infra::InfraUpdate;

/// Conditions are re-evaluated on every event and on this grid, anchored at
/// the start of monitoring.
pub const EVALUATION_TICK: Duration = Duration::from_millis(100);

/// Time since the start of the run.
pub trait Clock {
    fn now(&self) -> Duration;
    fn sleep_until(&self, t: Duration);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncomingEvent {
    pub name: String,
    pub source: String,
    /// Arrival time on the run clock.
    #[serde(with = "micros")]
    pub at: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WaitResult {
    Event(IncomingEvent),
    Deadline,
    /// No event will ever arrive again.
    Closed,
}

pub trait EventSource {
    /// Returns the next queued event, or waits for one until `deadline`.
    fn wait(&mut self, clock: &dyn Clock, deadline: Duration) -> WaitResult;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ActionError(pub String);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryReport {
    pub delivered: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failed: BTreeMap<String, String>,
}

/// Executes the side effects of each state.
pub trait ScheduleDriver {
    /// Applies the update and returns once every agent acknowledged it.
    /// Returns the acknowledging agents.
    fn update_infrastructure(&mut self, state: &str, update: &InfraUpdate) -> Result<Vec<String>, ActionError>;
    fn issue_commands(&mut self, state: &str, commands: &[AppCommand]) -> Result<DeliveryReport, ActionError>;
    /// Failures are reported, never fatal.
    fn broadcast(&mut self, state: &str, message: &serde_json::Value) -> DeliveryReport;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTiming {
    pub started_us: u64,
    pub completed_us: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ok: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failed: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub name: String,
    pub source: String,
    pub at_us: u64,
    pub state: String,
    /// Arrived before monitoring started; credited at its start.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub buffered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cause", rename_all = "snake_case")]
pub enum TransitionRecord {
    Condition {
        to: String,
        at_us: u64,
        index: usize,
        condition: String,
        elapsed_us: u64,
        counts: BTreeMap<String, u64>,
    },
    ActionFailure {
        to: String,
        at_us: u64,
        error: String,
    },
}

impl TransitionRecord {
    pub fn to(&self) -> &str {
        match self {
            TransitionRecord::Condition { to, .. } | TransitionRecord::ActionFailure { to, .. } => to,
        }
    }

    pub fn at_us(&self) -> u64 {
        match self {
            TransitionRecord::Condition { at_us, .. } | TransitionRecord::ActionFailure { at_us, .. } => *at_us,
        }
    }
}

/// One activation of a state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateVisit {
    pub state: String,
    /// 1 for the first time this state is entered.
    pub visit: u32,
    pub entered_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infra: Option<ActionTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commands: Option<ActionTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub broadcast: Option<ActionTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitoring_started_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<EventRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit: Option<TransitionRecord>,
}

impl StateVisit {
    /// Time from monitoring start to the transition.
    pub fn dwell(&self) -> Option<Duration> {
        let start = self.monitoring_started_us?;
        Some(Duration::from_micros(self.exit.as_ref()?.at_us() - start))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    /// A terminal state was reached.
    Completed { state: String, at_us: u64 },
    Aborted { state: String, at_us: u64, error: String },
    /// Event sources closed and no transition can fire any more.
    Deadlock { state: String, at_us: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentTrace {
    pub visits: Vec<StateVisit>,
    pub outcome: Outcome,
}

impl ExperimentTrace {
    pub fn states(&self) -> Vec<&str> {
        self.visits.iter().map(|v| v.state.as_str()).collect()
    }

    pub fn final_state(&self) -> &str {
        match &self.outcome {
            Outcome::Completed { state, .. } | Outcome::Aborted { state, .. } | Outcome::Deadlock { state, .. } => state,
        }
    }

    pub fn completed(&self) -> bool {
        matches!(self.outcome, Outcome::Completed { .. })
    }

    /// One JSON object per visit, then the outcome.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for v in &self.visits {
            out.push_str(&serde_json::to_string(v).expect("trace serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.outcome).expect("trace serializes"));
        out.push('\n');
        out
    }
}

fn us(d: Duration) -> u64 {
    u64::try_from(d.as_micros()).unwrap_or(u64::MAX)
}

fn ceil_to_tick(d: Duration) -> Duration {
    let t = EVALUATION_TICK.as_micros();
    let n = d.as_micros().div_ceil(t);
    Duration::from_micros(u64::try_from(n * t).unwrap_or(u64::MAX))
}

fn first_satisfied<'a>(
    transitions: &'a [Transition],
    elapsed: Duration,
    counts: &BTreeMap<String, u64>,
) -> Option<(usize, &'a Transition)> {
    transitions.iter().enumerate().find(|(_, t)| super::evaluate_condition(&t.when, elapsed, counts))
}

/// With counts frozen, a condition only changes value at time thresholds.
/// Sampling every threshold (on the tick grid) and the far future covers
/// every interval that is still ahead.
fn can_still_fire(transitions: &[Transition], elapsed: Duration, counts: &BTreeMap<String, u64>) -> bool {
    let mut points = vec![elapsed, Duration::MAX];
    points.extend(
        transitions.iter().flat_map(|t| t.when.thresholds()).map(ceil_to_tick).filter(|p| *p > elapsed),
    );
    points.into_iter().any(|p| first_satisfied(transitions, p, counts).is_some())
}

enum StateResult {
    Next(String),
    Done(Outcome),
}

struct Runner<'a> {
    schedule: &'a Schedule,
    driver: &'a mut dyn ScheduleDriver,
    clock: &'a dyn Clock,
    events: &'a mut dyn EventSource,
    closed: bool,
}

impl Runner<'_> {
    fn now(&self) -> Duration {
        self.clock.now()
    }

    fn fail(&self, state: &StateSpec, visit: &mut StateVisit, error: ActionError) -> StateResult {
        let at_us = us(self.now());
        match &self.schedule.failure_state {
            Some(f) if *f != state.name => {
                visit.exit = Some(TransitionRecord::ActionFailure { to: f.clone(), at_us, error: error.0 });
                StateResult::Next(f.clone())
            }
            _ => StateResult::Done(Outcome::Aborted { state: state.name.clone(), at_us, error: error.0 }),
        }
    }

    fn run_state(&mut self, state: &StateSpec, visit: &mut StateVisit) -> StateResult {
        if let Some(update) = state.infra_update.as_ref().filter(|u| !u.is_empty()) {
            let started = self.now();
            match self.driver.update_infrastructure(&state.name, update) {
                Ok(acks) => {
                    visit.infra = Some(ActionTiming {
                        started_us: us(started),
                        completed_us: us(self.now()),
                        ok: acks,
                        failed: BTreeMap::new(),
                    })
                }
                Err(e) => return self.fail(state, visit, e),
            }
        }
        if !state.commands.is_empty() {
            let started = self.now();
            match self.driver.issue_commands(&state.name, &state.commands) {
                Ok(r) => {
                    visit.commands = Some(ActionTiming {
                        started_us: us(started),
                        completed_us: us(self.now()),
                        ok: r.delivered,
                        failed: r.failed,
                    })
                }
                Err(e) => return self.fail(state, visit, e),
            }
        }
        if let Some(message) = state.broadcast.message(&state.name) {
            let started = self.now();
            let r = self.driver.broadcast(&state.name, &message);
            visit.broadcast =
                Some(ActionTiming { started_us: us(started), completed_us: us(self.now()), ok: r.delivered, failed: r.failed });
        }

        let start = self.now();
        visit.monitoring_started_us = Some(us(start));
        if state.is_terminal() {
            return StateResult::Done(Outcome::Completed { state: state.name.clone(), at_us: us(start) });
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut next_tick = start + EVALUATION_TICK;
        loop {
            let now = self.now();
            let elapsed = now.saturating_sub(start);
            if let Some((index, t)) = first_satisfied(&state.transitions, elapsed, &counts) {
                visit.exit = Some(TransitionRecord::Condition {
                    to: t.to.clone(),
                    at_us: us(now),
                    index,
                    condition: t.when.to_string(),
                    elapsed_us: us(elapsed),
                    counts: counts.clone(),
                });
                return StateResult::Next(t.to.clone());
            }
            if self.closed && !can_still_fire(&state.transitions, elapsed, &counts) {
                return StateResult::Done(Outcome::Deadlock { state: state.name.clone(), at_us: us(now) });
            }
            while next_tick <= now {
                next_tick += EVALUATION_TICK;
            }
            if self.closed {
                self.clock.sleep_until(next_tick);
                continue;
            }
            match self.events.wait(self.clock, next_tick) {
                WaitResult::Event(ev) => {
                    *counts.entry(ev.name.clone()).or_default() += 1;
                    visit.events.push(EventRecord {
                        buffered: ev.at < start,
                        name: ev.name,
                        source: ev.source,
                        at_us: us(ev.at),
                        state: state.name.clone(),
                    });
                }
                WaitResult::Deadline => {}
                WaitResult::Closed => self.closed = true,
            }
        }
    }
}

/// Runs `schedule` from its initial state until a terminal state, an
/// unrecoverable error, or a deadlock.
pub fn run_schedule(
    schedule: &Schedule,
    driver: &mut dyn ScheduleDriver,
    clock: &dyn Clock,
    events: &mut dyn EventSource,
) -> ExperimentTrace {
    let mut runner = Runner { schedule, driver, clock, events, closed: false };
    let mut visits: Vec<StateVisit> = Vec::new();
    let mut seen: BTreeMap<String, u32> = BTreeMap::new();
    let mut current = schedule.initial.clone();
    loop {
        let Some(state) = schedule.state(&current) else {
            let at_us = us(runner.now());
            return ExperimentTrace {
                visits,
                outcome: Outcome::Aborted { state: current.clone(), at_us, error: format!("state `{current}` is not declared") },
            };
        };
        let n = seen.entry(current.clone()).or_default();
        *n += 1;
        let mut visit = StateVisit {
            state: current.clone(),
            visit: *n,
            entered_us: us(runner.now()),
            infra: None,
            commands: None,
            broadcast: None,
            monitoring_started_us: None,
            events: Vec::new(),
            exit: None,
        };
        let result = runner.run_state(state, &mut visit);
        visits.push(visit);
        match result {
            StateResult::Next(next) => current = next,
            StateResult::Done(outcome) => return ExperimentTrace { visits, outcome },
        }
    }
}

mod micros {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(super::us(*d))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_micros)
    }
}
