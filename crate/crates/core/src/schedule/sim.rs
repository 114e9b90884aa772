//! Deterministic clock, event script and driver for replaying schedules
//! without a testbed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::{ActionError, AppCommand, Clock, DeliveryReport, EventSource, IncomingEvent, ScheduleDriver, WaitResult};
use crate::infra::InfraUpdate;

/// A clock that only moves when someone sleeps on it.
#[derive(Debug, Clone, Default)]
pub struct SimClock {
    micros: Arc<AtomicU64>,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, d: Duration) {
        self.micros.fetch_add(d.as_micros() as u64, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now(&self) -> Duration {
        Duration::from_micros(self.micros.load(Ordering::SeqCst))
    }

    fn sleep_until(&self, t: Duration) {
        self.micros.fetch_max(t.as_micros() as u64, Ordering::SeqCst);
    }
}

/// Events at fixed run-clock times. Closes once the script is exhausted.
#[derive(Debug, Clone, Default)]
pub struct ScriptedEvents {
    queue: VecDeque<IncomingEvent>,
}

impl ScriptedEvents {
    pub fn new(mut events: Vec<IncomingEvent>) -> Self {
        events.sort_by_key(|e| e.at);
        ScriptedEvents { queue: events.into() }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn at(secs: f64, name: &str) -> IncomingEvent {
        IncomingEvent { name: name.to_string(), source: "script".into(), at: Duration::from_secs_f64(secs) }
    }

    /// `name` every `every`, from `first` up to and including `until`.
    pub fn periodic(name: &str, source: &str, first: Duration, every: Duration, until: Duration) -> Vec<IncomingEvent> {
        let mut out = Vec::new();
        let mut t = first;
        while t <= until {
            out.push(IncomingEvent { name: name.to_string(), source: source.to_string(), at: t });
            t += every;
        }
        out
    }
}

impl EventSource for ScriptedEvents {
    fn wait(&mut self, clock: &dyn Clock, deadline: Duration) -> WaitResult {
        match self.queue.front() {
            None => WaitResult::Closed,
            Some(e) if e.at <= deadline => {
                clock.sleep_until(e.at);
                WaitResult::Event(self.queue.pop_front().expect("front exists"))
            }
            Some(_) => {
                clock.sleep_until(deadline);
                WaitResult::Deadline
            }
        }
    }
}

/// One driver call, as recorded by [`SimulatedDriver`].
#[derive(Debug, Clone, PartialEq)]
pub enum DriverCall {
    Infra { state: String, update: InfraUpdate },
    Commands { state: String, commands: Vec<AppCommand> },
    Broadcast { state: String, message: serde_json::Value },
}

/// Records every call and acknowledges after a fixed simulated latency.
#[derive(Debug, Clone)]
pub struct SimulatedDriver {
    pub clock: SimClock,
    pub agents: Vec<String>,
    pub recipients: Vec<String>,
    pub ack_latency: Duration,
    /// Agents that never acknowledge.
    pub failing_agents: BTreeSet<String>,
    pub unreachable_recipients: BTreeSet<String>,
    pub calls: Vec<DriverCall>,
}

impl SimulatedDriver {
    pub fn new(clock: SimClock, agents: &[&str]) -> Self {
        SimulatedDriver {
            clock,
            agents: agents.iter().map(|a| a.to_string()).collect(),
            recipients: Vec::new(),
            ack_latency: Duration::ZERO,
            failing_agents: BTreeSet::new(),
            unreachable_recipients: BTreeSet::new(),
            calls: Vec::new(),
        }
    }
}

impl ScheduleDriver for SimulatedDriver {
    fn update_infrastructure(&mut self, state: &str, update: &InfraUpdate) -> Result<Vec<String>, ActionError> {
        self.calls.push(DriverCall::Infra { state: state.to_string(), update: update.clone() });
        self.clock.advance(self.ack_latency);
        if let Some(a) = self.failing_agents.iter().next() {
            return Err(ActionError(format!("agent `{a}` did not acknowledge")));
        }
        Ok(self.agents.clone())
    }

    fn issue_commands(&mut self, state: &str, commands: &[AppCommand]) -> Result<DeliveryReport, ActionError> {
        self.calls.push(DriverCall::Commands { state: state.to_string(), commands: commands.to_vec() });
        self.clock.advance(self.ack_latency);
        Ok(DeliveryReport { delivered: commands.iter().map(|c| c.target.to_string()).collect(), failed: BTreeMap::new() })
    }

    fn broadcast(&mut self, state: &str, message: &serde_json::Value) -> DeliveryReport {
        self.calls.push(DriverCall::Broadcast { state: state.to_string(), message: message.clone() });
        self.clock.advance(self.ack_latency);
        let mut report = DeliveryReport::default();
        for r in &self.recipients {
            if self.unreachable_recipients.contains(r) {
                report.failed.insert(r.clone(), "connection refused".into());
            } else {
                report.delivered.push(r.clone());
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::MEMORY_PRESSURE;
    use super::super::*;
    use super::*;

    fn mins(m: u64) -> Duration {
        Duration::from_secs(60 * m)
    }

    fn run(json: &str, events: Vec<IncomingEvent>) -> (ExperimentTrace, SimulatedDriver) {
        let schedule = Schedule::parse_valid(json).unwrap();
        let clock = SimClock::new();
        let mut driver = SimulatedDriver::new(clock.clone(), &["M1", "M2"]);
        let trace = run_schedule(&schedule, &mut driver, &clock, &mut ScriptedEvents::new(events));
        (trace, driver)
    }

    #[test]
    fn no_events_walks_the_time_path() {
        let (trace, _) = run(MEMORY_PRESSURE, vec![]);
        assert_eq!(trace.states(), ["INIT", "MEMORY -20%", "HIGH LATENCY", "FINAL"]);
        for v in &trace.visits[..3] {
            assert_eq!(v.dwell(), Some(mins(20)), "{}", v.state);
        }
        assert_eq!(trace.outcome, Outcome::Completed { state: "FINAL".into(), at_us: us(mins(60)) });
    }

    fn us(d: Duration) -> u64 {
        d.as_micros() as u64
    }

    #[test]
    fn memory_error_detour_waits_a_minute() {
        let events = vec![ScriptedEvents::at(25.0 * 60.0, "memory error"), ScriptedEvents::at(25.0 * 60.0 + 10.0, "application started")];
        let (trace, _) = run(MEMORY_PRESSURE, events);
        assert_eq!(trace.states(), ["INIT", "MEMORY -20%", "MEMORY RESET", "HIGH LATENCY", "FINAL"]);
        let reset = &trace.visits[2];
        assert_eq!(reset.events.len(), 1);
        assert_eq!(reset.dwell(), Some(mins(1)));
        assert_eq!(trace.visits[1].dwell(), Some(mins(5)));
    }

    #[test]
    fn replay_is_byte_identical() {
        let events = || vec![ScriptedEvents::at(1500.0, "memory error"), ScriptedEvents::at(1600.0, "application started")];
        let first = run(MEMORY_PRESSURE, events()).0.to_jsonl();
        for _ in 0..4 {
            assert_eq!(run(MEMORY_PRESSURE, events()).0.to_jsonl(), first);
        }
    }

    #[test]
    fn single_terminal_state() {
        let (trace, driver) = run(r#"{"initial":"ONLY","states":[{"name":"ONLY","broadcast":false}]}"#, vec![]);
        assert_eq!(trace.visits.len(), 1);
        assert!(trace.completed());
        assert!(driver.calls.is_empty());
    }

    #[test]
    fn events_are_counted_per_state() {
        let json = r#"{"initial":"INIT","states":[
            {"name":"INIT","transitions":[{"when":{"time":"10s"},"to":"A"}]},
            {"name":"A","transitions":[{"when":{"event":"x","count":2},"to":"DONE"},{"when":{"time":"30s"},"to":"TIMEOUT"}]},
            {"name":"DONE"},{"name":"TIMEOUT"}]}"#;
        // two events in INIT, one in A: A must not see the INIT ones
        let events = vec![ScriptedEvents::at(1.0, "x"), ScriptedEvents::at(2.0, "x"), ScriptedEvents::at(15.0, "x")];
        let (trace, _) = run(json, events);
        assert_eq!(trace.states(), ["INIT", "A", "TIMEOUT"]);
        let Some(TransitionRecord::Condition { counts, .. }) = &trace.visits[1].exit else { panic!() };
        assert_eq!(counts["x"], 1);
        assert_eq!(trace.visits[0].events.len(), 2);
    }

    #[test]
    fn events_during_actions_are_buffered() {
        let json = r#"{"initial":"A","states":[
            {"name":"A","transitions":[{"when":{"time":"1s"},"to":"B"}]},
            {"name":"B","infra_update":{"reset":true},
             "transitions":[{"when":{"event":"x"},"to":"DONE"},{"when":{"time":"10s"},"to":"LATE"}]},
            {"name":"DONE"},{"name":"LATE"}]}"#;
        let schedule = Schedule::parse_valid(json).unwrap();
        let clock = SimClock::new();
        let mut driver = SimulatedDriver::new(clock.clone(), &["M1"]);
        driver.ack_latency = Duration::from_millis(500);
        // A: broadcast until 0.5s, leaves at 1.5s; B acks until 2.0s
        let mut events = ScriptedEvents::new(vec![ScriptedEvents::at(1.7, "x")]);
        let trace = run_schedule(&schedule, &mut driver, &clock, &mut events);
        assert_eq!(trace.states(), ["A", "B", "DONE"]);
        let b = &trace.visits[1];
        assert!(b.events[0].buffered);
        assert_eq!(b.dwell(), Some(Duration::ZERO));
    }

    #[test]
    fn action_order_in_every_visit() {
        let json = r#"{"initial":"A","states":[
            {"name":"A","infra_update":{"reset":true},"commands":[{"target":{"container":"c"},"payload":1}],
             "transitions":[{"when":{"time":"1s"},"to":"B"}]},
            {"name":"B","infra_update":{"reset":true}}]}"#;
        let schedule = Schedule::parse_valid(json).unwrap();
        let clock = SimClock::new();
        let mut driver = SimulatedDriver::new(clock.clone(), &["M1"]);
        driver.ack_latency = Duration::from_millis(30);
        driver.recipients = vec!["c@M1".into()];
        let trace = run_schedule(&schedule, &mut driver, &clock, &mut ScriptedEvents::none());
        for v in &trace.visits {
            let mut stamps = vec![v.entered_us];
            for a in [&v.infra, &v.commands, &v.broadcast].into_iter().flatten() {
                stamps.extend([a.started_us, a.completed_us]);
            }
            stamps.push(v.monitoring_started_us.unwrap());
            assert!(stamps.windows(2).all(|w| w[0] <= w[1]), "{stamps:?}");
        }
        assert_eq!(trace.visits[0].commands.as_ref().unwrap().ok, ["container `c`"]);
        assert!(matches!(driver.calls[0], DriverCall::Infra { .. }));
        assert!(matches!(driver.calls[1], DriverCall::Commands { .. }));
        assert!(matches!(driver.calls[2], DriverCall::Broadcast { .. }));
    }

    #[test]
    fn first_declared_transition_wins() {
        let json = r#"{"initial":"A","states":[
            {"name":"A","transitions":[{"when":{"time":"1s"},"to":"FIRST"},{"when":{"time":"1s"},"to":"SECOND"}]},
            {"name":"FIRST"},{"name":"SECOND"}]}"#;
        assert_eq!(run(json, vec![]).0.final_state(), "FIRST");
    }

    #[test]
    fn deadlock_when_only_events_remain() {
        let json = r#"{"initial":"A","states":[
            {"name":"A","transitions":[{"when":{"event":"never"},"to":"B"}]},{"name":"B"}]}"#;
        let (trace, _) = run(json, vec![]);
        assert!(matches!(trace.outcome, Outcome::Deadlock { .. }));

        // a window that closes before any tick can see it
        let json = r#"{"initial":"A","states":[
            {"name":"A","transitions":[{"when":{"and":[{"time":"150ms"},{"not":{"time":"160ms"}}]},"to":"B"}]},{"name":"B"}]}"#;
        assert!(matches!(run(json, vec![]).0.outcome, Outcome::Deadlock { .. }));
    }

    #[test]
    fn agent_failure_routes_to_failure_state() {
        let json = r#"{"initial":"A","failure_state":"FAILED","states":[
            {"name":"A","infra_update":{"reset":true},"transitions":[{"when":{"time":"1s"},"to":"B"}]},
            {"name":"B"},{"name":"FAILED","broadcast":false}]}"#;
        let schedule = Schedule::parse_valid(json).unwrap();
        let clock = SimClock::new();
        let mut driver = SimulatedDriver::new(clock.clone(), &["M1"]);
        driver.failing_agents.insert("M1".into());
        let trace = run_schedule(&schedule, &mut driver, &clock, &mut ScriptedEvents::none());
        assert_eq!(trace.states(), ["A", "FAILED"]);
        assert!(matches!(trace.visits[0].exit, Some(TransitionRecord::ActionFailure { .. })));

        let mut no_failure_state = schedule.clone();
        no_failure_state.failure_state = None;
        let trace = run_schedule(&no_failure_state, &mut driver, &clock, &mut ScriptedEvents::none());
        assert!(matches!(trace.outcome, Outcome::Aborted { .. }));
    }

    #[test]
    fn broadcast_failures_are_not_fatal() {
        let json = r#"{"initial":"A","states":[{"name":"A","transitions":[{"when":{"time":"1s"},"to":"B"}]},{"name":"B"}]}"#;
        let schedule = Schedule::parse_valid(json).unwrap();
        let clock = SimClock::new();
        let mut driver = SimulatedDriver::new(clock.clone(), &[]);
        driver.recipients = vec!["a".into(), "b".into()];
        driver.unreachable_recipients.insert("b".into());
        let trace = run_schedule(&schedule, &mut driver, &clock, &mut ScriptedEvents::none());
        assert!(trace.completed());
        let b = trace.visits[0].broadcast.as_ref().unwrap();
        assert_eq!(b.ok, ["a"]);
        assert!(b.failed.contains_key("b"));
    }

    #[test]
    fn reentry_restarts_timer() {
        let json = r#"{"initial":"A","states":[
            {"name":"A","transitions":[{"when":{"event":"done"},"to":"END"},{"when":{"time":"2s"},"to":"A"}]},
            {"name":"END"}]}"#;
        let (trace, _) = run(json, vec![ScriptedEvents::at(5.0, "done")]);
        assert_eq!(trace.states(), ["A", "A", "A", "END"]);
        assert_eq!(trace.visits[2].visit, 3);
        assert_eq!(trace.visits[2].dwell(), Some(Duration::from_secs(1)));
    }

    #[test]
    fn time_only_dwell_within_a_tick() {
        let json = r#"{"initial":"A","states":[{"name":"A","transitions":[{"when":{"time":"1234ms"},"to":"B"}]},{"name":"B"}]}"#;
        let d = run(json, vec![]).0.visits[0].dwell().unwrap();
        assert!(d >= Duration::from_millis(1234) && d - Duration::from_millis(1234) <= EVALUATION_TICK);
    }
}
