use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

use super::{ConnectionProperties, InfraError, InfrastructureModel, NodeId};
use crate::units::{Micros, Probability};

/// End-to-end characteristics between two machines, aggregated along the
/// delay-shortest path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectivePathProperties {
    pub delay: Micros,
    /// `None` means unbounded (the empty path).
    pub rate_bps: Option<u64>,
    pub dispersion: Micros,
    pub loss: Probability,
    pub corruption: Probability,
    pub reorder: Probability,
    pub duplicate: Probability,
    pub path: Vec<NodeId>,
}

impl EffectivePathProperties {
    /// Aggregates the given links in path order.
    pub fn aggregate<'a>(path: Vec<NodeId>, links: impl IntoIterator<Item = &'a ConnectionProperties> + Clone) -> Self {
        let links: Vec<&ConnectionProperties> = links.into_iter().collect();
        EffectivePathProperties {
            delay: links.iter().map(|l| l.delay).sum(),
            rate_bps: links.iter().map(|l| l.rate_bps).min(),
            dispersion: links.iter().map(|l| l.dispersion).sum(),
            loss: Probability::any_of(links.iter().map(|l| l.loss)),
            corruption: Probability::any_of(links.iter().map(|l| l.corruption)),
            reorder: Probability::any_of(links.iter().map(|l| l.reorder)),
            duplicate: Probability::any_of(links.iter().map(|l| l.duplicate)),
            path,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PathError {
    #[error(transparent)]
    Model(#[from] InfraError),
    #[error("no path between `{from}` and `{to}`")]
    Unreachable { from: NodeId, to: NodeId },
}

type Adjacency<'a> = BTreeMap<&'a NodeId, Vec<(&'a NodeId, &'a ConnectionProperties)>>;

fn adjacency(model: &InfrastructureModel) -> Adjacency<'_> {
    let mut adj: Adjacency<'_> = BTreeMap::new();
    for (key, props) in model.links() {
        adj.entry(&key.a).or_default().push((&key.b, props));
        adj.entry(&key.b).or_default().push((&key.a, props));
    }
    for list in adj.values_mut() {
        list.sort_by(|x, y| x.0.cmp(y.0));
    }
    adj
}

fn distances<'a>(adj: &Adjacency<'a>, source: &'a NodeId) -> BTreeMap<&'a NodeId, u64> {
    let mut dist: BTreeMap<&NodeId, u64> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    dist.insert(source, 0);
    heap.push(Reverse((0u64, source)));
    while let Some(Reverse((d, node))) = heap.pop() {
        if dist.get(node).is_some_and(|best| d > *best) {
            continue;
        }
        for (next, props) in adj.get(node).into_iter().flatten() {
            let nd = d + props.delay.0;
            if dist.get(next).is_none_or(|cur| nd < *cur) {
                dist.insert(next, nd);
                heap.push(Reverse((nd, *next)));
            }
        }
    }
    dist
}

/// Effective properties between two machines.
///
/// The path is the minimum-delay simple path; routers and other machines may
/// appear as interior nodes. Among equal-delay paths the lexicographically
/// smallest node-id sequence wins, read from the endpoint with the smaller id;
/// the reverse query returns the same path reversed, so results are
/// symmetric. Rate, dispersion and the probabilities are aggregated along
/// that path rather than optimized independently.
pub fn effective_properties(
    model: &InfrastructureModel,
    from: &NodeId,
    to: &NodeId,
) -> Result<EffectivePathProperties, PathError> {
    model.require_machine(from)?;
    model.require_machine(to)?;
    if from == to {
        return Ok(EffectivePathProperties::aggregate(vec![from.clone()], []));
    }
    if from > to {
        let mut eff = canonical_path(model, to, from).map_err(|e| match e {
            PathError::Unreachable { .. } => PathError::Unreachable { from: from.clone(), to: to.clone() },
            other => other,
        })?;
        eff.path.reverse();
        return Ok(eff);
    }
    canonical_path(model, from, to)
}

fn canonical_path(
    model: &InfrastructureModel,
    from: &NodeId,
    to: &NodeId,
) -> Result<EffectivePathProperties, PathError> {
    let adj = adjacency(model);
    let from_src = distances(&adj, from);
    let Some(&total) = from_src.get(to) else {
        return Err(PathError::Unreachable { from: from.clone(), to: to.clone() });
    };
    let from_dst = distances(&adj, to);

    // An edge u->v lies on some shortest path iff it is tight from the source
    // side and v still reaches the target within the remaining budget.
    let tight = |u: &NodeId, v: &NodeId, w: u64| -> bool {
        match (from_src.get(u), from_src.get(v), from_dst.get(v)) {
            (Some(du), Some(dv), Some(dt)) => du + w == *dv && dv + dt == total,
            _ => false,
        }
    };

    // Depth-first over tight edges, smallest id first: the first complete
    // path found is the lexicographically smallest. Backtracking only matters
    // when zero-delay links form cycles.
    let mut path: Vec<&NodeId> = vec![from];
    let mut links: Vec<&ConnectionProperties> = Vec::new();
    let mut on_path: HashSet<&NodeId> = HashSet::from([from]);
    let mut cursor: Vec<usize> = vec![0];
    while let Some(&node) = path.last() {
        if node == to {
            break;
        }
        let depth = path.len() - 1;
        let candidates = adj.get(node).map(Vec::as_slice).unwrap_or(&[]);
        let mut advanced = false;
        while cursor[depth] < candidates.len() {
            let (next, props) = candidates[cursor[depth]];
            cursor[depth] += 1;
            if !on_path.contains(next) && tight(node, next, props.delay.0) {
                path.push(next);
                links.push(props);
                on_path.insert(next);
                cursor.push(0);
                advanced = true;
                break;
            }
        }
        if !advanced {
            cursor.pop();
            let dead = path.pop().expect("non-empty path");
            on_path.remove(dead);
            links.pop();
            if path.is_empty() {
                // unreachable in practice: a shortest path always exists here
                return Err(PathError::Unreachable { from: from.clone(), to: to.clone() });
            }
        }
    }

    let nodes = path.into_iter().cloned().collect();
    Ok(EffectivePathProperties::aggregate(nodes, links))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infra::{Connection, MachineSpec};
    use crate::units::Millicores;

    fn m(id: &str) -> MachineSpec {
        MachineSpec::machine(id, Millicores(1000), 1 << 30, 0)
    }

    fn c(a: &str, b: &str, ms: f64) -> Connection {
        Connection { endpoint_a: a.into(), endpoint_b: b.into(), properties: ConnectionProperties::with_delay_ms(ms) }
    }

    fn ids(path: &[NodeId]) -> Vec<&str> {
        path.iter().map(|n| n.as_str()).collect()
    }

    #[test]
    fn routed_path_sums_delay() {
        let model = InfrastructureModel::new(
            vec![m("M2"), m("M6"), MachineSpec::router("R1"), MachineSpec::router("R2")],
            vec![c("M2", "R1", 5.0), c("R1", "R2", 4.0), c("R2", "M6", 1.0)],
        )
        .unwrap();
        let eff = effective_properties(&model, &"M2".into(), &"M6".into()).unwrap();
        assert_eq!(eff.delay, Micros(10_000));
        assert_eq!(ids(&eff.path), ["M2", "R1", "R2", "M6"]);
    }

    #[test]
    fn identity_path() {
        let model = InfrastructureModel::new(vec![m("A"), m("B")], vec![c("A", "B", 3.0)]).unwrap();
        let eff = effective_properties(&model, &"A".into(), &"A".into()).unwrap();
        assert_eq!(eff.delay, Micros::ZERO);
        assert_eq!(eff.dispersion, Micros::ZERO);
        assert_eq!(eff.rate_bps, None);
        assert_eq!(eff.loss, Probability::ZERO);
        assert_eq!(ids(&eff.path), ["A"]);
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // A-B-D and A-C-D both cost 2 ms
        let model = InfrastructureModel::new(
            vec![m("A"), m("C"), m("B"), m("D")],
            vec![c("A", "C", 1.0), c("C", "D", 1.0), c("A", "B", 1.0), c("B", "D", 1.0)],
        )
        .unwrap();
        let eff = effective_properties(&model, &"A".into(), &"D".into()).unwrap();
        assert_eq!(ids(&eff.path), ["A", "B", "D"]);
        let back = effective_properties(&model, &"D".into(), &"A".into()).unwrap();
        assert_eq!(ids(&back.path), ["D", "B", "A"]);
    }

    #[test]
    fn reverse_query_mirrors_forward_path() {
        // from A the smallest is A-B-Y-D, from D it would be D-X-C-A
        let model = InfrastructureModel::new(
            vec![m("A"), m("B"), m("C"), m("D"), m("X"), m("Y")],
            vec![c("A", "B", 1.0), c("B", "Y", 1.0), c("Y", "D", 1.0), c("A", "C", 1.0), c("C", "X", 1.0), c("X", "D", 1.0)],
        )
        .unwrap();
        let fwd = effective_properties(&model, &"A".into(), &"D".into()).unwrap();
        let mut back = effective_properties(&model, &"D".into(), &"A".into()).unwrap();
        assert_eq!(ids(&fwd.path), ["A", "B", "Y", "D"]);
        back.path.reverse();
        assert_eq!(fwd, back);
    }

    #[test]
    fn zero_delay_cycle_does_not_loop() {
        let model = InfrastructureModel::new(
            vec![m("A"), m("B"), m("C"), m("D")],
            vec![c("A", "B", 0.0), c("B", "C", 0.0), c("C", "A", 0.0), c("C", "D", 0.0)],
        )
        .unwrap();
        let eff = effective_properties(&model, &"A".into(), &"D".into()).unwrap();
        assert_eq!(ids(&eff.path), ["A", "B", "C", "D"]);
    }

    #[test]
    fn two_lossy_hops() {
        let mut a = c("A", "B", 1.0);
        let mut b = c("B", "C", 1.0);
        a.properties.loss = Probability::new(0.2).unwrap();
        b.properties.loss = Probability::new(0.2).unwrap();
        a.properties.rate_bps = 10_000_000;
        let model = InfrastructureModel::new(vec![m("A"), m("B"), m("C")], vec![a, b]).unwrap();
        let eff = effective_properties(&model, &"A".into(), &"C".into()).unwrap();
        assert!((eff.loss.value() - 0.36).abs() < 1e-12);
        assert_eq!(eff.rate_bps, Some(10_000_000));
    }

    #[test]
    fn routers_are_not_endpoints() {
        let model =
            InfrastructureModel::new(vec![m("A"), MachineSpec::router("R")], vec![c("A", "R", 1.0)]).unwrap();
        let err = effective_properties(&model, &"A".into(), &"R".into()).unwrap_err();
        assert!(matches!(err, PathError::Model(InfraError::NotAMachine(_))));
        let err = effective_properties(&model, &"A".into(), &"Q".into()).unwrap_err();
        assert!(matches!(err, PathError::Model(InfraError::UnknownMachine(_))));
    }
}
