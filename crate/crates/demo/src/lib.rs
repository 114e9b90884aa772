//! Browser playground over `fogbed-core`: path lookups, per-agent plans and
//! simulated schedule replays. Everything runs client side.
//!
//! The plain functions return `Result<String, String>` so they can be tested
//! natively; the `#[wasm_bindgen]` wrappers turn errors into JS exceptions.

use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr};
use std::time::Duration;

use fogbed_core::infra::{effective_properties, InfraOverlay, InfraUpdate, PartitionSpec};
use fogbed_core::netem::{build_agent_configs, render_impairment_table, render_shaper_script, BaselineMeasurement, ScriptOptions};
use fogbed_core::schedule::sim::{ScriptedEvents, SimClock, SimulatedDriver};
use fogbed_core::schedule::{run_schedule, IncomingEvent, Schedule};
use fogbed_core::units::Micros;
use fogbed_core::{InfrastructureModel, NodeId};
use serde::Deserialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Base model with `updates` (a JSON array of update documents, or empty)
/// applied in order.
fn manipulated(infra: &str, updates: &str) -> Result<(InfrastructureModel, Vec<PartitionSpec>), String> {
    let base = InfrastructureModel::parse(infra).map_err(err)?;
    let updates: Vec<InfraUpdate> = if updates.trim().is_empty() { Vec::new() } else { serde_json::from_str(updates).map_err(err)? };
    let mut overlay = InfraOverlay::default();
    for (i, u) in updates.iter().enumerate() {
        if let Some(v) = u.check(&base).first() {
            return Err(format!("update {}: {v}", i + 1));
        }
        overlay.apply(u);
    }
    let model = overlay.materialize(&base).map_err(err)?;
    Ok((model, overlay.partitions().cloned().collect()))
}

/// Machine ids of an infrastructure document, as a JSON array.
pub fn machine_list(infra: &str) -> Result<String, String> {
    let model = InfrastructureModel::parse(infra).map_err(err)?;
    let ids: Vec<String> = model.machine_ids().iter().map(|m| m.to_string()).collect();
    Ok(json!(ids).to_string())
}

/// Effective properties between two machines, as JSON.
pub fn path_between(infra: &str, updates: &str, from: &str, to: &str) -> Result<String, String> {
    let (model, partitions) = manipulated(infra, updates)?;
    let (a, b) = (NodeId::from(from), NodeId::from(to));
    let eff = effective_properties(&model, &a, &b).map_err(err)?;
    let partitioned = partitions.iter().any(|p| p.separates(&a, &b));
    Ok(json!({
        "path": eff.path,
        "delay_ms": eff.delay.as_millis_f64(),
        "dispersion_ms": eff.dispersion.as_millis_f64(),
        "rate_mbit": eff.rate_bps.map(|r| r as f64 / 1e6),
        "loss_pct": if partitioned { 100.0 } else { eff.loss.as_percent() },
        "corruption_pct": eff.corruption.as_percent(),
        "reorder_pct": eff.reorder.as_percent(),
        "duplicate_pct": eff.duplicate.as_percent(),
        "partitioned": partitioned,
    })
    .to_string())
}

/// What the agent on `machine` would be sent: the impairment table and the
/// traffic-control script. Machines get 10.0.0.x addresses in id order and
/// every pair is assumed to have the same baseline round trip.
pub fn agent_plan(infra: &str, updates: &str, machine: &str, baseline_rtt_ms: f64) -> Result<String, String> {
    let (model, partitions) = manipulated(infra, updates)?;
    let ids = model.machine_ids();
    let addresses: BTreeMap<NodeId, IpAddr> =
        ids.iter().enumerate().map(|(i, id)| (id.clone(), IpAddr::V4(Ipv4Addr::new(10, 0, 0, i as u8 + 1)))).collect();
    let rtt = Micros::from_millis_f64(baseline_rtt_ms.max(0.0));
    let mut baselines = Vec::new();
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            baselines.push(BaselineMeasurement { a: a.clone(), b: b.clone(), rtt });
        }
    }
    let plan = build_agent_configs(&model, &addresses, &baselines, &partitions, 1).map_err(err)?;
    let config = plan.config(&NodeId::from(machine)).ok_or_else(|| format!("no machine `{machine}`"))?;
    let script = render_shaper_script(config, &ScriptOptions::default()).to_text();
    Ok(json!({
        "table": render_impairment_table(config),
        "script": script,
        "warnings": plan.warnings,
    })
    .to_string())
}

#[derive(Deserialize)]
struct EventDoc {
    at: String,
    name: String,
    #[serde(default)]
    count: Option<u32>,
    #[serde(default)]
    every: Option<String>,
}

fn duration(s: &str) -> Result<Duration, String> {
    humantime::parse_duration(s).map_err(|e| format!("`{s}`: {e}"))
}

/// Replays `schedule` on a simulated clock. `events` is a JSON array of
/// `{at, name}` with optional `count` and `every` for repeated events.
/// Returns the trace as JSON lines.
pub fn replay(schedule: &str, events: &str) -> Result<String, String> {
    let schedule = Schedule::parse_valid(schedule).map_err(err)?;
    let docs: Vec<EventDoc> = if events.trim().is_empty() { Vec::new() } else { serde_json::from_str(events).map_err(err)? };
    let mut incoming = Vec::new();
    for d in docs {
        let start = duration(&d.at)?;
        let every = d.every.as_deref().map(duration).transpose()?.unwrap_or(Duration::ZERO);
        for k in 0..d.count.unwrap_or(1) {
            incoming.push(IncomingEvent { name: d.name.clone(), source: "demo".into(), at: start + every * k });
        }
    }
    let clock = SimClock::new();
    let mut driver = SimulatedDriver::new(clock.clone(), &[]);
    let trace = run_schedule(&schedule, &mut driver, &clock, &mut ScriptedEvents::new(incoming));
    Ok(trace.to_jsonl())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = machines)]
pub fn machines_js(infra: &str) -> Result<String, JsError> {
    js(machine_list(infra))
}

#[wasm_bindgen(js_name = pathBetween)]
pub fn path_between_js(infra: &str, updates: &str, from: &str, to: &str) -> Result<String, JsError> {
    js(path_between(infra, updates, from, to))
}

#[wasm_bindgen(js_name = agentPlan)]
pub fn agent_plan_js(infra: &str, updates: &str, machine: &str, baseline_rtt_ms: f64) -> Result<String, JsError> {
    js(agent_plan(infra, updates, machine, baseline_rtt_ms))
}

#[wasm_bindgen(js_name = replaySchedule)]
pub fn replay_js(schedule: &str, events: &str) -> Result<String, JsError> {
    js(replay(schedule, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    const ROUTED: &str = include_str!("../../../fixtures/routed_six_machines.json");
    const FACTORY: &str = include_str!("../../../fixtures/smart_factory_infra.json");
    const MEMORY: &str = include_str!("../../../fixtures/memory_pressure_schedule.json");

    fn parse(s: Result<String, String>) -> Value {
        serde_json::from_str(&s.unwrap()).unwrap()
    }

    #[test]
    fn lists_machines_only() {
        assert_eq!(parse(machine_list(ROUTED)), json!(["M1", "M2", "M3", "M4", "M5", "M6"]));
    }

    #[test]
    fn routed_path() {
        let v = parse(path_between(ROUTED, "", "M2", "M6"));
        assert_eq!(v["delay_ms"], 10.0);
        assert_eq!(v["rate_mbit"], 50.0);
        assert_eq!(v["path"], json!(["M2", "R1", "R2", "M6"]));
    }

    #[test]
    fn updates_accumulate() {
        let updates = r#"[{"links":[{"from":"factory-server","to":"cloud","delay_ms_oneway":50}]},{"partitions":["gateway"]}]"#;
        let v = parse(path_between(FACTORY, updates, "factory-server", "cloud"));
        assert_eq!(v["delay_ms"], 18.0);
        let v = parse(path_between(FACTORY, updates, "gateway", "cloud"));
        assert_eq!(v["partitioned"], true);
        assert_eq!(v["loss_pct"], 100.0);
        assert!(path_between(FACTORY, r#"[{"links":[{"from":"x","to":"cloud"}]}]"#, "gateway", "cloud").unwrap_err().starts_with("update 1"));
    }

    #[test]
    fn plan_compensates_baseline() {
        let v = parse(agent_plan(ROUTED, "", "M2", 1.4));
        let table: Value = serde_json::from_str(v["table"].as_str().unwrap()).unwrap();
        let m6 = table["entries"].as_array().unwrap().iter().find(|e| e["target"] == "M6").unwrap();
        assert_eq!(m6["injected_delay_us"], 9_300);
        assert!(v["script"].as_str().unwrap().contains("tc qdisc"));
        assert!(agent_plan(ROUTED, "", "R1", 1.0).is_err());
    }

    #[test]
    fn replay_takes_the_detour() {
        let events = r#"[{"at":"25m","name":"memory error"},{"at":"26m","name":"application started"}]"#;
        let trace = replay(MEMORY, events).unwrap();
        let lines: Vec<Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let states: Vec<&str> = lines.iter().filter(|l| l.get("visit").is_some()).map(|l| l["state"].as_str().unwrap()).collect();
        assert_eq!(states, ["INIT", "MEMORY -20%", "MEMORY RESET", "HIGH LATENCY", "FINAL"]);
        assert_eq!(trace, replay(MEMORY, events).unwrap());
    }

    #[test]
    fn repeated_events_expand() {
        let schedule = r#"{"initial":"A","states":[
            {"name":"A","transitions":[{"when":{"event":"tick","count":3},"to":"B"},{"when":{"time":"1m"},"to":"C"}]},
            {"name":"B"},{"name":"C"}]}"#;
        let trace = replay(schedule, r#"[{"at":"1s","name":"tick","count":3,"every":"10s"}]"#).unwrap();
        assert!(trace.lines().last().unwrap().contains("\"B\""));
        let trace = replay(schedule, r#"[{"at":"1s","name":"tick","count":2,"every":"10s"}]"#).unwrap();
        assert!(trace.lines().last().unwrap().contains("\"C\""));
    }
}
