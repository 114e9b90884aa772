use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Boolean tree over the experiment timer and per-state event counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ConditionDoc", into = "ConditionDoc")]
pub enum ConditionTree {
    Time(Duration),
    Event { name: String, count: u64 },
    And(Vec<ConditionTree>),
    Or(Vec<ConditionTree>),
    Not(Box<ConditionTree>),
}

impl ConditionTree {
    pub fn time(d: Duration) -> Self {
        ConditionTree::Time(d)
    }

    pub fn event(name: &str, count: u64) -> Self {
        ConditionTree::Event { name: name.to_string(), count }
    }

    /// Structural problems: `and`/`or` with fewer than two children, zero
    /// thresholds or counts.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_problems(&mut out);
        out
    }

    fn collect_problems(&self, out: &mut Vec<String>) {
        match self {
            ConditionTree::Time(d) if d.is_zero() => out.push("time threshold must be positive".into()),
            ConditionTree::Event { count: 0, name } => out.push(format!("event `{name}` needs a count of at least 1")),
            ConditionTree::Event { name, .. } if name.is_empty() => out.push("event name must not be empty".into()),
            ConditionTree::And(c) | ConditionTree::Or(c) => {
                if c.len() < 2 {
                    let op = if matches!(self, ConditionTree::And(_)) { "and" } else { "or" };
                    out.push(format!("`{op}` needs at least two children, has {}", c.len()));
                }
                c.iter().for_each(|c| c.collect_problems(out));
            }
            ConditionTree::Not(c) => c.collect_problems(out),
            _ => {}
        }
    }

    /// Every time threshold in the tree.
    pub fn thresholds(&self) -> Vec<Duration> {
        let mut out = Vec::new();
        self.walk(&mut |n| {
            if let ConditionTree::Time(d) = n {
                out.push(*d);
            }
        });
        out
    }

    /// Every event name in the tree.
    pub fn event_names(&self) -> Vec<&str> {
        let mut out = Vec::new();
        fn go<'a>(n: &'a ConditionTree, out: &mut Vec<&'a str>) {
            match n {
                ConditionTree::Event { name, .. } => out.push(name),
                ConditionTree::And(c) | ConditionTree::Or(c) => c.iter().for_each(|c| go(c, out)),
                ConditionTree::Not(c) => go(c, out),
                ConditionTree::Time(_) => {}
            }
        }
        go(self, &mut out);
        out
    }

    fn walk(&self, f: &mut impl FnMut(&ConditionTree)) {
        f(self);
        match self {
            ConditionTree::And(c) | ConditionTree::Or(c) => c.iter().for_each(|c| c.walk(f)),
            ConditionTree::Not(c) => c.walk(f),
            _ => {}
        }
    }
}

impl fmt::Display for ConditionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |f: &mut fmt::Formatter<'_>, op: &str, c: &[ConditionTree]| {
            write!(f, "(")?;
            for (i, c) in c.iter().enumerate() {
                if i > 0 {
                    write!(f, " {op} ")?;
                }
                write!(f, "{c}")?;
            }
            write!(f, ")")
        };
        match self {
            ConditionTree::Time(d) => write!(f, "T >= {}", humantime::format_duration(*d)),
            ConditionTree::Event { name, count } => write!(f, "#{name} >= {count}"),
            ConditionTree::And(c) => join(f, "AND", c),
            ConditionTree::Or(c) => join(f, "OR", c),
            ConditionTree::Not(c) => write!(f, "NOT {c}"),
        }
    }
}

/// True when `tree` holds for the given timer value and event counts.
pub fn evaluate_condition(tree: &ConditionTree, elapsed: Duration, counts: &BTreeMap<String, u64>) -> bool {
    match tree {
        ConditionTree::Time(t) => elapsed >= *t,
        ConditionTree::Event { name, count } => counts.get(name).copied().unwrap_or(0) >= *count,
        ConditionTree::And(c) => c.iter().all(|c| evaluate_condition(c, elapsed, counts)),
        ConditionTree::Or(c) => c.iter().any(|c| evaluate_condition(c, elapsed, counts)),
        ConditionTree::Not(c) => !evaluate_condition(c, elapsed, counts),
    }
}

fn default_count() -> u64 {
    1
}

fn is_one(n: &u64) -> bool {
    *n == 1
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    event: Option<String>,
    #[serde(default = "default_count", skip_serializing_if = "is_one")]
    count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    and: Option<Vec<ConditionTree>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    or: Option<Vec<ConditionTree>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    not: Option<Box<ConditionTree>>,
}

impl TryFrom<ConditionDoc> for ConditionTree {
    type Error = String;

    fn try_from(d: ConditionDoc) -> Result<Self, String> {
        let keys = [d.time.is_some(), d.event.is_some(), d.and.is_some(), d.or.is_some(), d.not.is_some()];
        if keys.iter().filter(|k| **k).count() != 1 {
            return Err("a condition needs exactly one of `time`, `event`, `and`, `or`, `not`".into());
        }
        if d.event.is_none() && d.count != 1 {
            return Err("`count` only applies to `event` conditions".into());
        }
        Ok(if let Some(t) = d.time {
            ConditionTree::Time(humantime::parse_duration(&t).map_err(|e| format!("bad duration `{t}`: {e}"))?)
        } else if let Some(name) = d.event {
            ConditionTree::Event { name, count: d.count }
        } else if let Some(c) = d.and {
            ConditionTree::And(c)
        } else if let Some(c) = d.or {
            ConditionTree::Or(c)
        } else {
            ConditionTree::Not(d.not.expect("checked above"))
        })
    }
}

impl From<ConditionTree> for ConditionDoc {
    fn from(t: ConditionTree) -> Self {
        let mut d = ConditionDoc { count: 1, ..Default::default() };
        match t {
            ConditionTree::Time(x) => d.time = Some(humantime::format_duration(x).to_string()),
            ConditionTree::Event { name, count } => {
                d.event = Some(name);
                d.count = count;
            }
            ConditionTree::And(c) => d.and = Some(c),
            ConditionTree::Or(c) => d.or = Some(c),
            ConditionTree::Not(c) => d.not = Some(c),
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mins(m: u64) -> Duration {
        Duration::from_secs(60 * m)
    }

    fn counts(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn dge_threshold_boundary() {
        let tree = ConditionTree::And(vec![ConditionTree::event("dge", 295), ConditionTree::time(mins(5))]);
        assert!(evaluate_condition(&tree, mins(5), &counts(&[("dge", 295)])));
        assert!(!evaluate_condition(&tree, mins(5), &counts(&[("dge", 294)])));
        assert!(!evaluate_condition(&tree, mins(5) - Duration::from_millis(1), &counts(&[("dge", 295)])));
    }

    #[test]
    fn or_with_event() {
        let tree = ConditionTree::Or(vec![ConditionTree::time(mins(20)), ConditionTree::event("memory error", 1)]);
        assert!(evaluate_condition(&tree, Duration::ZERO, &counts(&[("memory error", 1)])));
        assert!(!evaluate_condition(&tree, Duration::ZERO, &counts(&[("other", 3)])));
    }

    #[test]
    fn parses_json_forms() {
        let t: ConditionTree =
            serde_json::from_str(r#"{"and":[{"event":"application started"},{"time":"1m"}]}"#).unwrap();
        assert_eq!(t, ConditionTree::And(vec![ConditionTree::event("application started", 1), ConditionTree::time(mins(1))]));
        let t: ConditionTree = serde_json::from_str(r#"{"not":{"event":"dge","count":4}}"#).unwrap();
        assert_eq!(t, ConditionTree::Not(Box::new(ConditionTree::event("dge", 4))));
        assert!(serde_json::from_str::<ConditionTree>(r#"{"time":"1m","event":"x"}"#).is_err());
        assert!(serde_json::from_str::<ConditionTree>(r#"{"time":"soon"}"#).is_err());
        assert!(serde_json::from_str::<ConditionTree>(r#"{"time":"1m","count":3}"#).is_err());
        assert!(serde_json::from_str::<ConditionTree>(r#"{}"#).is_err());
    }

    #[test]
    fn structural_problems() {
        assert_eq!(ConditionTree::Or(vec![ConditionTree::time(mins(1))]).problems().len(), 1);
        assert_eq!(ConditionTree::And(vec![]).problems().len(), 1);
        assert_eq!(ConditionTree::Not(Box::new(ConditionTree::event("x", 0))).problems().len(), 1);
        assert_eq!(ConditionTree::time(Duration::ZERO).problems().len(), 1);
        assert!(ConditionTree::event("x", 1).problems().is_empty());
    }

    #[test]
    fn display() {
        let t = ConditionTree::And(vec![ConditionTree::event("dge", 4), ConditionTree::time(Duration::from_secs(5))]);
        assert_eq!(t.to_string(), "(#dge >= 4 AND T >= 5s)");
    }

    fn arb_tree() -> impl Strategy<Value = ConditionTree> {
        let leaf = prop_oneof![
            (1u64..100_000).prop_map(|ms| ConditionTree::Time(Duration::from_millis(ms))),
            ("[a-c]", 1u64..5).prop_map(|(n, c)| ConditionTree::Event { name: n, count: c }),
        ];
        leaf.prop_recursive(4, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 2..4).prop_map(ConditionTree::And),
                prop::collection::vec(inner.clone(), 2..4).prop_map(ConditionTree::Or),
                inner.prop_map(|c| ConditionTree::Not(Box::new(c))),
            ]
        })
    }

    proptest! {
        #[test]
        fn json_round_trip(t in arb_tree()) {
            let json = serde_json::to_string(&t).unwrap();
            prop_assert_eq!(serde_json::from_str::<ConditionTree>(&json).unwrap(), t);
        }

        #[test]
        fn de_morgan(a in arb_tree(), b in arb_tree(), ms in 0u64..200_000, x in 0u64..6, y in 0u64..6) {
            let c = counts(&[("a", x), ("b", y), ("c", x + y)]);
            let e = Duration::from_millis(ms);
            let not = |t: ConditionTree| ConditionTree::Not(Box::new(t));
            let lhs = not(ConditionTree::And(vec![a.clone(), b.clone()]));
            let rhs = ConditionTree::Or(vec![not(a), not(b)]);
            prop_assert_eq!(evaluate_condition(&lhs, e, &c), evaluate_condition(&rhs, e, &c));
        }

        #[test]
        fn positive_trees_monotone(ms in 0u64..100_000, extra in 0u64..50_000, n in 0u64..10) {
            // without `not`, more time and more events never falsify a condition
            let t = ConditionTree::Or(vec![
                ConditionTree::And(vec![ConditionTree::event("a", 3), ConditionTree::time(Duration::from_millis(40_000))]),
                ConditionTree::event("b", 5),
            ]);
            let before = evaluate_condition(&t, Duration::from_millis(ms), &counts(&[("a", n), ("b", n)]));
            let after = evaluate_condition(&t, Duration::from_millis(ms + extra), &counts(&[("a", n + 1), ("b", n + 1)]));
            prop_assert!(!before || after);
        }
    }
}
