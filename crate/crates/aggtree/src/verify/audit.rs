//! Structural and aggregate audit of a quiescent tree at a timestamp.
//!
//! Walks the structure through versioned reads at `ts` and checks search
//! order, sentinel integrity, the lock discipline around unlinked nodes
//! ("everything still pointing at a deleted node is permanently locked"),
//! and that every internal node's stored aggregate equals a direct fold
//! over the leaves of its subtree as of `ts`.

use std::collections::HashSet;
use std::fmt;

use crate::aggregate::AggValue;
use crate::backbone::{Tree, TreeValue};
use crate::basetree::{Direction, Node, NodeRef};
use crate::{Key, Ts, KEY_NEG_INF};

#[derive(Debug)]
pub struct AuditReport {
    pub ts: Ts,
    pub internal_nodes: usize,
    pub live_leaves: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "audit @ts={}: {} internal nodes, {} live leaves, {} violation(s)",
            self.ts,
            self.internal_nodes,
            self.live_leaves,
            self.violations.len()
        )?;
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

fn fmt_bound(b: Option<Key>) -> String {
    b.map_or("∞".to_string(), |k| k.to_string())
}

/// Audits a quiescent tree as of timestamp `ts`. The caller must have
/// joined all updating threads first.
pub fn audit_tree<V: TreeValue>(tree: &Tree<V>, ts: Ts) -> AuditReport {
    let inner = tree.inner();
    let mut report = AuditReport {
        ts,
        internal_nodes: 0,
        live_leaves: 0,
        violations: Vec::new(),
    };

    // Sentinel frame.
    let root = inner.root;
    let root_node = root.node().as_internal().expect("root is internal");
    if root_node.key != KEY_NEG_INF {
        report.violations.push("root key is not -inf".into());
    }
    match root_node.left.versioned_read(ts).node() {
        Node::Leaf(l) if l.key == KEY_NEG_INF => {}
        _ => report
            .violations
            .push("root's left child is not the -inf sentinel leaf".into()),
    }

    // Iterative post-order walk of the structure as of `ts` (trees may be
    // spine-deep; no call-stack recursion). Each internal node's live
    // leaves are accumulated to cross-check its stored aggregate.
    enum Step<V: 'static> {
        Visit(NodeRef<V>, Option<Key>, Option<Key>),
        Check(NodeRef<V>, usize),
    }
    let mut leaves: Vec<NodeRef<V>> = Vec::new();
    let mut steps = vec![Step::Visit(root, None, None)];
    while let Some(step) = steps.pop() {
        match step {
            Step::Visit(nref, lo, hi) => match nref.node() {
                Node::Leaf(l) => {
                    let in_range =
                        lo.is_none_or(|b| l.key >= b) && hi.is_none_or(|b| l.key < b);
                    if !in_range && !l.is_sentinel() {
                        report.violations.push(format!(
                            "leaf {} outside range [{}, {})",
                            l.key,
                            fmt_bound(lo),
                            fmt_bound(hi)
                        ));
                    }
                    let mark = l.mark_timestamp();
                    if mark != 0 && mark <= ts {
                        report.violations.push(format!(
                            "leaf {} deleted at {} still reachable at {}",
                            l.key, mark, ts
                        ));
                        continue;
                    }
                    if !l.is_sentinel() {
                        report.live_leaves += 1;
                        leaves.push(nref);
                    }
                }
                Node::Internal(n) => {
                    report.internal_nodes += 1;
                    let in_range = (lo.is_none_or(|b| n.key >= b)
                        && hi.is_none_or(|b| n.key <= b))
                        || n.key == KEY_NEG_INF;
                    if !in_range {
                        report.violations.push(format!(
                            "internal key {} outside range [{}, {}]",
                            n.key,
                            fmt_bound(lo),
                            fmt_bound(hi)
                        ));
                    }
                    // Children pop before the check; leaves gathered from
                    // this point on belong to this subtree.
                    steps.push(Step::Check(nref, leaves.len()));
                    steps.push(Step::Visit(n.right.versioned_read(ts), Some(n.key), hi));
                    steps.push(Step::Visit(n.left.versioned_read(ts), lo, Some(n.key)));
                }
            },
            Step::Check(nref, first_leaf) => {
                let n = nref.node().as_internal().unwrap();
                let stored = inner.variant.read_agg_quiescent(&n.agg, ts, &inner.spec);
                let folded = inner.spec.fold(leaves[first_leaf..].iter().map(|p| {
                    let l = p.node().as_leaf().unwrap();
                    (l.key, l.user_value())
                }));
                let matches = match (&stored, &folded) {
                    (AggValue::Float(_), _) | (_, AggValue::Float(_)) => {
                        stored.approx_eq(&folded, 1e-9)
                    }
                    _ => stored == folded,
                };
                if !matches {
                    report.violations.push(format!(
                        "node key {} aggregate {} != fold {} at ts {}",
                        n.key, stored, folded, ts
                    ));
                }
            }
        }
    }

    // Announcement lifecycle: a quiescent tree has no live announcements
    // (every record is withdrawn after its done flag is set).
    {
        let mut counters = crate::verify::counters::OpCounters::default();
        let outstanding = match inner.variant.gather(ts, false, &mut counters) {
            crate::backbone::LocalUpdates::Slots(s) => s.iter().flatten().count(),
            crate::backbone::LocalUpdates::Queue(q) => q.len(),
        };
        if outstanding > 0 {
            report.violations.push(format!(
                "{outstanding} announcement(s) outstanding on a quiescent tree"
            ));
        }
    }

    // Lock discipline over the full version graph: any head pointer to a
    // marked leaf or to a permanently locked internal node must itself sit
    // in a permanently locked node.
    let mut stack = vec![root];
    let mut seen: HashSet<NodeRef<V>> = HashSet::new();
    while let Some(p) = stack.pop() {
        if !seen.insert(p) {
            continue;
        }
        if let Node::Internal(n) = p.node() {
            let mut targets = Vec::new();
            n.left.for_each_version(|c| targets.push(*c));
            n.right.for_each_version(|c| targets.push(*c));
            stack.extend(targets.iter().copied());
            for dir in [Direction::Left, Direction::Right] {
                let head = n.child(dir).read();
                let points_at_deleted = match head.node() {
                    Node::Leaf(l) => l.marked(),
                    Node::Internal(c) => c.lock.is_permanent(),
                };
                if points_at_deleted && !n.lock.is_permanent() {
                    report.violations.push(format!(
                        "node key {} points at a deleted node but is not permanently locked",
                        n.key
                    ));
                }
            }
        }
    }

    report
}
