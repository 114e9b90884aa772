//! Independent reference implementations used to cross-check the path math.

use fogbed_core::infra::{Connection, ConnectionProperties, MachineSpec};
use fogbed_core::units::{Micros, Millicores, Probability};
use fogbed_core::{InfrastructureModel, NodeId};
use rand::Rng;

/// A connected random graph with up to `max_nodes` nodes, integer-millisecond
/// delays (ties and zero delays are common) and random loss.
pub fn random_model<R: Rng>(rng: &mut R, max_nodes: usize) -> InfrastructureModel {
    let n = rng.random_range(2..=max_nodes);
    let mut nodes = Vec::new();
    for i in 0..n {
        // keep at least two machines
        if i >= 2 && rng.random_bool(0.3) {
            nodes.push(MachineSpec::router(format!("R{i}")));
        } else {
            nodes.push(MachineSpec::machine(format!("M{i}"), Millicores(1000), 1 << 20, 0));
        }
    }
    let ids: Vec<NodeId> = nodes.iter().map(|m| m.id.clone()).collect();
    let mut pairs = std::collections::BTreeSet::new();
    for i in 1..n {
        pairs.insert((rng.random_range(0..i), i));
    }
    let extra = rng.random_range(0..=n);
    for _ in 0..extra {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let connections = pairs
        .into_iter()
        .map(|(a, b)| {
            let mut p = ConnectionProperties::with_delay_ms(rng.random_range(0..=10) as f64);
            p.loss = Probability::from_percent(rng.random_range(0..=300) as f64 / 10.0).unwrap();
            p.rate_bps = rng.random_range(1..=10) * 100_000_000;
            Connection { endpoint_a: ids[a].clone(), endpoint_b: ids[b].clone(), properties: p }
        })
        .collect();
    InfrastructureModel::new(nodes, connections).expect("generated model is valid")
}

/// Shortest delay and its path by enumerating every simple path. Ties go to
/// the lexicographically smallest node sequence, walked from the smaller
/// endpoint and then mirrored.
pub fn brute_force_path(model: &InfrastructureModel, from: &NodeId, to: &NodeId) -> Option<(Micros, Vec<NodeId>)> {
    let (lo, hi) = if from <= to { (from, to) } else { (to, from) };
    let mut best: Option<(u64, Vec<NodeId>)> = None;
    let mut stack = vec![lo.clone()];
    fn go(
        model: &InfrastructureModel,
        hi: &NodeId,
        stack: &mut Vec<NodeId>,
        delay: u64,
        best: &mut Option<(u64, Vec<NodeId>)>,
    ) {
        let last = stack.last().unwrap().clone();
        if &last == hi {
            let cand = (delay, stack.clone());
            if best.as_ref().is_none_or(|b| cand < *b) {
                *best = Some(cand);
            }
            return;
        }
        let next: Vec<(NodeId, u64)> = model.neighbours(&last).map(|(n, p)| (n.clone(), p.delay.0)).collect();
        for (n, d) in next {
            if !stack.contains(&n) {
                stack.push(n);
                go(model, hi, stack, delay + d, best);
                stack.pop();
            }
        }
    }
    go(model, hi, &mut stack, 0, &mut best);
    best.map(|(d, mut path)| {
        if from > to {
            path.reverse();
        }
        (Micros(d), path)
    })
}

/// Fraction of `trials` messages lost when every link on `path` drops
/// independently with its own probability.
pub fn monte_carlo_loss<R: Rng>(model: &InfrastructureModel, path: &[NodeId], trials: u32, rng: &mut R) -> f64 {
    let probs: Vec<f64> = path.windows(2).map(|w| model.link(&w[0], &w[1]).expect("path edge").loss.value()).collect();
    let mut lost = 0u32;
    for _ in 0..trials {
        if probs.iter().any(|p| rng.random::<f64>() < *p) {
            lost += 1;
        }
    }
    f64::from(lost) / f64::from(trials)
}
