//! The algorithm-agnostic tree backbone: announcement records, the staged
//! effectual-operation scheme, `contains` and its auxiliary checks, and the
//! aggregate traversal template shared by every query.
//!
//! A successful insert or delete (an *effectual* operation) proceeds in
//! stages: (1) run the base-tree search until the necessary edge locks are
//! held, (2) announce itself with an `Update` record and obtain a timestamp,
//! (3) update the aggregate metadata along its root-to-leaf path in versions
//! tagged with that timestamp, (4) apply itself to the target leaf area
//! (link the new routing node, or mark the deleted leaf), (5) set the
//! record's `done` flag and withdraw the announcement, (6) for deletions,
//! swing the grandparent pointer to the sibling, and (7) release the locks.
//!
//! Queries pin a timestamp once, gather the announcements they must account
//! for, and then traverse, resolving child pointers and aggregate values at
//! that timestamp with announced-but-unapplied effects plugged in.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::aggregate::{AggValue, AggregateSpec};
use crate::basetree::{alloc_node, Direction, Internal, Leaf, LockWord, Node, NodeRef};
use crate::fastquery::FastQueryState;
use crate::fastupdate::FastUpdateState;
use crate::queries::{QueryDef, QueryError, QueryValue};
use crate::verify::counters::OpCounters;
use crate::verify::history::{Event, OpRecord, QueryOutcome};
use crate::versioned::VersionedField;
use crate::{is_user_key, Key, Ts, KEY_NEG_INF, KEY_POS_INF, TS_NOT_SET};

/// Values storable in the tree.
pub trait TreeValue: Clone + Send + Sync + fmt::Debug + 'static {}
impl<T: Clone + Send + Sync + fmt::Debug + 'static> TreeValue for T {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum OpKind {
    Insert,
    Delete,
}

/// Announcement record of one in-flight effectual operation.
pub(crate) struct Update<V: 'static> {
    pub timestamp: AtomicU64,
    pub leaf: NodeRef<V>,
    pub edge_source: NodeRef<V>,
    pub edge_target: NodeRef<V>,
    pub direction: Direction,
    pub done: AtomicBool,
    pub kind: OpKind,
    pub owner_tid: u16,
    /// Back-pointer into the announcement queue (queue-based variant only).
    pub queue_node: AtomicPtr<crate::fastquery::QueueNode<V>>,
}

unsafe impl<V: Send + Sync + 'static> Send for Update<V> {}
unsafe impl<V: Send + Sync + 'static> Sync for Update<V> {}

impl<V: 'static> Update<V> {
    pub fn ts(&self) -> Ts {
        self.timestamp.load(Ordering::Acquire)
    }

    pub fn is_done(&self) -> bool {
        self.done.load(Ordering::Acquire)
    }

    pub fn leaf_node(&self) -> &Leaf<V> {
        self.leaf.node().as_leaf().expect("update leaf is a leaf")
    }

    pub fn key(&self) -> Key {
        self.leaf_node().key
    }

    pub fn is_insert(&self) -> bool {
        self.kind == OpKind::Insert
    }
}

pub(crate) fn alloc_update<V: 'static>(
    leaf: NodeRef<V>,
    edge_source: NodeRef<V>,
    edge_target: NodeRef<V>,
    direction: Direction,
    kind: OpKind,
    owner_tid: u16,
) -> &'static Update<V> {
    // Announcement records are referenced from registries, gathered local
    // copies, and aggregate version annotations; they are leaked
    // (reclamation is out of scope).
    Box::leak(Box::new(Update {
        timestamp: AtomicU64::new(TS_NOT_SET),
        leaf,
        edge_source,
        edge_target,
        direction,
        done: AtomicBool::new(false),
        kind,
        owner_tid,
        queue_node: AtomicPtr::new(std::ptr::null_mut()),
    }))
}

/// Per-thread aggregate cell payload: the running aggregate plus the
/// announcement that produced this version, so a reader can tell whether an
/// announced operation is already reflected in the cell.
pub(crate) struct CellValue<V: 'static> {
    pub agg: AggValue,
    pub update: Option<&'static Update<V>>,
}

impl<V: 'static> Clone for CellValue<V> {
    fn clone(&self) -> Self {
        CellValue {
            agg: self.agg.clone(),
            update: self.update,
        }
    }
}

/// Node aggregate storage, per algorithm variant.
pub(crate) enum AggField<V: 'static> {
    /// One versioned cell per registered thread; the subtree aggregate is
    /// the combine of all cells.
    PerThread(Box<[VersionedField<CellValue<V>>]>),
    /// A single versioned field maintained cooperatively.
    Single(VersionedField<AggValue>),
}

/// Working copy of gathered announcements, range-narrowed as a traversal
/// descends.
pub(crate) enum LocalUpdates<V: 'static> {
    /// Indexed by owner tid.
    Slots(Vec<Option<&'static Update<V>>>),
    /// Ascending timestamp order.
    Queue(Vec<&'static Update<V>>),
}

impl<V: 'static> LocalUpdates<V> {
    pub fn empty_slots(threads: usize) -> Self {
        LocalUpdates::Slots(vec![None; threads])
    }

    /// Drops announcements whose key falls outside the subtree entered by
    /// descending from a node with key `node_key` in the given direction.
    pub fn narrow(&mut self, node_key: Key, went_right: bool) {
        let out_of_range = |k: Key| if went_right { k < node_key } else { k >= node_key };
        match self {
            LocalUpdates::Slots(slots) => {
                for s in slots.iter_mut() {
                    if let Some(u) = s {
                        if out_of_range(u.key()) {
                            *s = None;
                        }
                    }
                }
            }
            LocalUpdates::Queue(items) => {
                items.retain(|u| !out_of_range(u.key()));
            }
        }
    }

    /// Announced-but-unapplied modification of `(source, dir)`, if any.
    /// Done entries observed along the way are eliminated.
    pub fn find_edge(&mut self, source: NodeRef<V>, dir: Direction) -> Option<&'static Update<V>> {
        match self {
            LocalUpdates::Slots(slots) => {
                for s in slots.iter_mut() {
                    if let Some(u) = *s {
                        if u.is_done() {
                            *s = None;
                            continue;
                        }
                        if u.edge_source == source && u.direction == dir {
                            return Some(u);
                        }
                    }
                }
                None
            }
            LocalUpdates::Queue(items) => {
                let mut found = None;
                items.retain(|u| {
                    if u.is_done() {
                        return false;
                    }
                    if found.is_none() && u.edge_source == source && u.direction == dir {
                        found = Some(*u);
                    }
                    true
                });
                found
            }
        }
    }

    /// The gathered deletion of exactly this leaf, if present. Done entries
    /// are kept: the caller distinguishes by the leaf's mark.
    pub fn delete_of(&self, leaf: NodeRef<V>) -> Option<&'static Update<V>> {
        let matches = |u: &'static Update<V>| u.kind == OpKind::Delete && u.leaf == leaf;
        match self {
            LocalUpdates::Slots(slots) => slots.iter().flatten().copied().find(|u| matches(u)),
            LocalUpdates::Queue(items) => items.iter().copied().find(|u| matches(u)),
        }
    }

    pub fn slot(&self, tid: usize) -> Option<&'static Update<V>> {
        match self {
            LocalUpdates::Slots(slots) => slots[tid],
            LocalUpdates::Queue(_) => unreachable!("slot access on queue-local"),
        }
    }

    pub fn clear_slot(&mut self, tid: usize) {
        if let LocalUpdates::Slots(slots) = self {
            slots[tid] = None;
        }
    }
}

/// Algorithm variant selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantKind {
    /// Single-writer announcement slots and per-thread aggregate cells;
    /// effectual operations pay nothing extra, queries combine per-thread
    /// cells.
    FastUpdate,
    /// Timestamped announcement queue and one aggregate field per node,
    /// maintained by helping; queries read one field per node.
    FastQuery,
}

impl VariantKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            VariantKind::FastUpdate => "fastupdate",
            VariantKind::FastQuery => "fastquery",
        }
    }
}

impl FromStr for VariantKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fastupdate" => Ok(VariantKind::FastUpdate),
            "fastquery" => Ok(VariantKind::FastQuery),
            other => Err(format!(
                "unknown variant {other:?} (expected fastupdate|fastquery)"
            )),
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub(crate) enum Variant<V: 'static> {
    FastUpdate(FastUpdateState<V>),
    FastQuery(FastQueryState<V>),
}

impl<V: TreeValue> Variant<V> {
    pub fn kind(&self) -> VariantKind {
        match self {
            Variant::FastUpdate(_) => VariantKind::FastUpdate,
            Variant::FastQuery(_) => VariantKind::FastQuery,
        }
    }

    /// Makes the announcement globally visible. Timestamp assignment is a
    /// separate step for the slot variant (queries may help); the queue
    /// variant stamps atomically with the link.
    pub fn publish(&self, tid: usize, u: &'static Update<V>) {
        match self {
            Variant::FastUpdate(s) => s.publish(tid, u),
            Variant::FastQuery(s) => s.enqueue(u),
        }
    }

    pub fn assign_ts(&self, u: &'static Update<V>, counters: &mut OpCounters) {
        match self {
            Variant::FastUpdate(s) => s.assign_ts(u, counters),
            Variant::FastQuery(_) => debug_assert_ne!(u.ts(), TS_NOT_SET),
        }
    }

    pub fn unannounce(&self, tid: usize, u: &'static Update<V>) {
        match self {
            Variant::FastUpdate(s) => s.unannounce(tid),
            Variant::FastQuery(s) => s.remove(u),
        }
    }

    pub fn guarantee_ts(&self, u: &'static Update<V>, counters: &mut OpCounters) {
        match self {
            Variant::FastUpdate(s) => s.guarantee_ts(u, counters),
            // Queue announcements are born with a timestamp.
            Variant::FastQuery(_) => debug_assert_ne!(u.ts(), TS_NOT_SET),
        }
    }

    pub fn acquire_query_ts(&self) -> Ts {
        match self {
            Variant::FastUpdate(s) => s.acquire_query_ts(),
            Variant::FastQuery(s) => s.current_timestamp(),
        }
    }

    /// Current logical time: every effectual operation so far has a
    /// timestamp at or below this.
    pub fn current_ts(&self) -> Ts {
        match self {
            Variant::FastUpdate(s) => s.current_ts(),
            Variant::FastQuery(s) => s.current_timestamp(),
        }
    }

    pub fn gather(
        &self,
        ts: Ts,
        first_traversal: bool,
        counters: &mut OpCounters,
    ) -> LocalUpdates<V> {
        match self {
            Variant::FastUpdate(s) => s.gather(ts, first_traversal, counters),
            Variant::FastQuery(s) => s.gather(ts, counters),
        }
    }

    /// Gathered set for an effectual operation's aggregate-update pass.
    pub fn gather_for_update(&self, ts: Ts, counters: &mut OpCounters) -> LocalUpdates<V> {
        match self {
            // Slot-variant effectual operations work only on their own
            // cells; they neither gather nor help.
            Variant::FastUpdate(s) => LocalUpdates::empty_slots(s.threads()),
            Variant::FastQuery(s) => s.gather(ts, counters),
        }
    }

    pub fn find_delete_of(
        &self,
        leaf: NodeRef<V>,
        owner_hint: Option<u16>,
        counters: &mut OpCounters,
    ) -> Option<&'static Update<V>> {
        match self {
            Variant::FastUpdate(s) => s.find_delete_of(leaf, owner_hint, counters),
            Variant::FastQuery(s) => s.find_delete_of(leaf, counters),
        }
    }

    pub fn find_insert_of(
        &self,
        key: Key,
        owner_hint: Option<u16>,
        counters: &mut OpCounters,
    ) -> Option<&'static Update<V>> {
        match self {
            Variant::FastUpdate(s) => s.find_insert_of(key, owner_hint, counters),
            Variant::FastQuery(s) => s.find_insert_of(key, counters),
        }
    }

    /// Fresh aggregate field whose timestamp-0 version carries `initial`
    /// (the identity for the root, the surviving leaf's contribution for a
    /// new routing node).
    pub fn new_agg_field(
        &self,
        initial: AggValue,
        creator_tid: usize,
        identity: AggValue,
    ) -> AggField<V> {
        match self {
            Variant::FastUpdate(s) => s.new_agg_field(initial, creator_tid, identity),
            Variant::FastQuery(_) => AggField::Single(VersionedField::new(initial)),
        }
    }

    /// Publishes the head version of a freshly created routing node's
    /// aggregate: the timestamp-0 contribution combined with the announced
    /// leaf, tagged with the announcement's timestamp. The node is not yet
    /// linked, so no other writer can reach it.
    pub fn seed_insert_agg(
        &self,
        field: &AggField<V>,
        spec: &AggregateSpec<V>,
        u: &'static Update<V>,
        tid: usize,
    ) {
        let leaf = u.leaf_node();
        let leaf_agg = spec.leaf_value(leaf.key, leaf.user_value());
        match (self, field) {
            (Variant::FastUpdate(_), AggField::PerThread(cells)) => {
                let cur = cells[tid].read();
                let total = spec.combine(&cur.agg, &leaf_agg);
                cells[tid].write(
                    CellValue {
                        agg: total,
                        update: Some(u),
                    },
                    u.ts(),
                );
            }
            (Variant::FastQuery(_), AggField::Single(f)) => {
                let cur = f.read();
                f.write(spec.combine(&cur, &leaf_agg), u.ts());
            }
            _ => unreachable!("variant/agg-field mismatch"),
        }
    }

    /// One node's aggregate update on behalf of the operation `u` (and, for
    /// the queue variant, every gathered predecessor not yet reflected).
    pub fn update_agg(
        &self,
        field: &AggField<V>,
        spec: &AggregateSpec<V>,
        u: &'static Update<V>,
        tid: usize,
        local: &mut LocalUpdates<V>,
        counters: &mut OpCounters,
    ) {
        match (self, field) {
            (Variant::FastUpdate(s), AggField::PerThread(cells)) => {
                s.update_agg(&cells[tid], spec, u)
            }
            (Variant::FastQuery(s), AggField::Single(f)) => {
                s.update_agg_helping(f, spec, local, counters)
            }
            _ => unreachable!("variant/agg-field mismatch"),
        }
    }

    /// Aggregate of an internal child's subtree at timestamp `ts`, with the
    /// effect of relevant gathered announcements plugged in. `parent_key`
    /// bounds the child's key range from above (left children only).
    pub fn read_agg(
        &self,
        field: &AggField<V>,
        ts: Ts,
        local: &mut LocalUpdates<V>,
        parent_key: Key,
        spec: &AggregateSpec<V>,
        counters: &mut OpCounters,
    ) -> AggValue {
        match (self, field) {
            (Variant::FastUpdate(s), AggField::PerThread(cells)) => {
                s.read_agg(cells, ts, local, parent_key, spec, counters)
            }
            (Variant::FastQuery(s), AggField::Single(f)) => {
                s.read_agg(f, ts, local, parent_key, spec, counters)
            }
            _ => unreachable!("variant/agg-field mismatch"),
        }
    }

    /// Aggregate of a node's own subtree at `ts` with no announcements in
    /// flight. Used by quiescent audits.
    pub fn read_agg_quiescent(
        &self,
        field: &AggField<V>,
        ts: Ts,
        spec: &AggregateSpec<V>,
    ) -> AggValue {
        let mut counters = OpCounters::default();
        let mut local = match self {
            Variant::FastUpdate(s) => LocalUpdates::empty_slots(s.threads()),
            Variant::FastQuery(_) => LocalUpdates::Queue(Vec::new()),
        };
        self.read_agg(field, ts, &mut local, KEY_POS_INF, spec, &mut counters)
    }
}

/// Stage boundaries an instrumented build can pause at. The harness in
/// `verify::interleave` drives these to replay documented races
/// deterministically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PausePoint {
    /// Effectual operation holds its locks, nothing announced yet.
    LocksAcquired,
    /// Announcement visible with its timestamp assigned.
    Announced,
    /// All path aggregates updated.
    AggregatesUpdated,
    /// Applied to the target leaf area (new node linked / leaf marked).
    Applied,
    /// `done` set and announcement withdrawn.
    Unannounced,
    /// Deletion finalized: grandparent pointer swung.
    Finalized,
    /// `contains` landed on its leaf, auxiliary checks not yet run.
    SearchLanded,
    /// Announcement visible, timestamp not yet assigned (slot variant).
    AnnouncePublished,
    /// Query pinned its timestamp.
    QueryTimestamped,
}

/// Receiver for [`PausePoint`] notifications (test builds only).
pub trait StepHook: Send + Sync {
    fn pause(&self, tid: usize, point: PausePoint);
}

/// Tree tuning and instrumentation switches.
#[derive(Clone, Debug)]
pub struct TreeConfig {
    /// Record the search path of an effectual operation's final traversal
    /// and replay it in the aggregate-update pass instead of re-searching.
    pub path_record: bool,
    /// Use the owner tid stored in lock words to examine a single
    /// announcement slot in the auxiliary checks (slot variant).
    pub tid_in_lock: bool,
    /// Skip the announcement search when resolving a child whose edge is
    /// not locked (an announced edge modification always holds its lock).
    pub resolve_lock_check: bool,
    /// Exponential backoff between lock-failure restarts.
    pub backoff: bool,
    /// Append every completed operation to the in-memory history log.
    pub record_history: bool,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            path_record: true,
            tid_in_lock: true,
            resolve_lock_check: true,
            backoff: false,
            record_history: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeError {
    /// All `threads` registration slots are taken.
    ThreadLimit { threads: usize },
    /// Thread count must be in `1..=u16::MAX`.
    BadThreadCount(usize),
}

impl fmt::Display for TreeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeError::ThreadLimit { threads } => {
                write!(f, "all {threads} thread registrations are taken")
            }
            TreeError::BadThreadCount(n) => write!(f, "invalid thread count {n}"),
        }
    }
}

impl std::error::Error for TreeError {}

/// What a traversal saw at its landing leaf, resolved at the traversal's
/// timestamp (a landing leaf may be logically absent at that time).
#[derive(Clone, Debug)]
pub struct LeafSnapshot {
    pub key: Key,
    pub present: bool,
    pub leaf_agg: AggValue,
    pub is_sentinel: bool,
}

/// One traversal's result: the aggregate over every leaf with a key below
/// the landing leaf's key, plus the landing leaf itself.
#[derive(Clone, Debug)]
pub struct TraversalOutput {
    pub skipped: AggValue,
    pub leaf: LeafSnapshot,
}

struct HistoryLog {
    seq: AtomicU64,
    events: Mutex<Vec<Event>>,
}

pub(crate) struct TreeInner<V: 'static> {
    pub spec: AggregateSpec<V>,
    pub root: NodeRef<V>,
    pub variant: Variant<V>,
    pub threads: usize,
    pub cfg: TreeConfig,
    next_tid: AtomicUsize,
    history: Option<HistoryLog>,
    updates_started: AtomicU64,
    updates_inflight: AtomicU64,
    #[cfg(feature = "step-hooks")]
    hook: std::sync::OnceLock<Arc<dyn StepHook>>,
}

unsafe impl<V: Send + Sync + 'static> Send for TreeInner<V> {}
unsafe impl<V: Send + Sync + 'static> Sync for TreeInner<V> {}

impl<V: 'static> Drop for TreeInner<V> {
    fn drop(&mut self) {
        // Every node ever linked stays reachable through the version chains
        // of child pointers, so a full-chain walk finds them all.
        let mut stack = vec![self.root];
        let mut seen: HashSet<NodeRef<V>> = HashSet::new();
        while let Some(p) = stack.pop() {
            if !seen.insert(p) {
                continue;
            }
            if let Node::Internal(n) = p.node() {
                let mut children = Vec::new();
                n.left.for_each_version(|c| children.push(*c));
                n.right.for_each_version(|c| children.push(*c));
                stack.extend(children);
            }
        }
        for p in seen {
            drop(unsafe { Box::from_raw(p.ptr() as *mut Node<V>) });
        }
    }
}

/// Concurrent aggregate-augmented BST. Cloning shares the tree.
pub struct Tree<V: 'static> {
    inner: Arc<TreeInner<V>>,
}

impl<V: 'static> Clone for Tree<V> {
    fn clone(&self) -> Self {
        Tree {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<V: TreeValue> Tree<V> {
    pub fn new(
        kind: VariantKind,
        spec: AggregateSpec<V>,
        threads: usize,
    ) -> Result<Self, TreeError> {
        Self::with_config(kind, spec, threads, TreeConfig::default())
    }

    pub fn with_config(
        kind: VariantKind,
        spec: AggregateSpec<V>,
        threads: usize,
        cfg: TreeConfig,
    ) -> Result<Self, TreeError> {
        if threads == 0 || threads > u16::MAX as usize {
            return Err(TreeError::BadThreadCount(threads));
        }
        let variant = match kind {
            VariantKind::FastUpdate => Variant::FastUpdate(FastUpdateState::new(threads)),
            VariantKind::FastQuery => Variant::FastQuery(FastQueryState::new()),
        };
        let neg_leaf = alloc_node(Node::Leaf(Leaf::sentinel(KEY_NEG_INF)));
        let pos_leaf = alloc_node(Node::Leaf(Leaf::sentinel(KEY_POS_INF)));
        let root_agg = variant.new_agg_field(spec.identity(), 0, spec.identity());
        let root = alloc_node(Node::Internal(Internal {
            key: KEY_NEG_INF,
            lock: LockWord::new(),
            left: VersionedField::new(neg_leaf),
            right: VersionedField::new(pos_leaf),
            agg: root_agg,
        }));
        let history = cfg.record_history.then(|| HistoryLog {
            seq: AtomicU64::new(0),
            events: Mutex::new(Vec::new()),
        });
        Ok(Tree {
            inner: Arc::new(TreeInner {
                spec,
                root,
                variant,
                threads,
                cfg,
                next_tid: AtomicUsize::new(0),
                history,
                updates_started: AtomicU64::new(0),
                updates_inflight: AtomicU64::new(0),
                #[cfg(feature = "step-hooks")]
                hook: std::sync::OnceLock::new(),
            }),
        })
    }

    /// Claims the next thread slot. The handle is the sole way to operate
    /// on the tree and keeps each thread's operations serial.
    pub fn register(&self) -> Result<ThreadHandle<V>, TreeError> {
        let tid = self.inner.next_tid.fetch_add(1, Ordering::AcqRel);
        if tid >= self.inner.threads {
            return Err(TreeError::ThreadLimit {
                threads: self.inner.threads,
            });
        }
        Ok(ThreadHandle {
            tree: self.clone(),
            tid,
            counters: OpCounters::default(),
        })
    }

    pub fn variant_kind(&self) -> VariantKind {
        self.inner.variant.kind()
    }

    pub fn spec(&self) -> &AggregateSpec<V> {
        &self.inner.spec
    }

    pub fn threads(&self) -> usize {
        self.inner.threads
    }

    /// Current logical time; every effectual operation so far is stamped at
    /// or below this.
    pub fn current_ts(&self) -> Ts {
        self.inner.variant.current_ts()
    }

    /// `(effectual operations ever started, currently in flight)`.
    pub fn update_activity(&self) -> (u64, u64) {
        (
            self.inner.updates_started.load(Ordering::Acquire),
            self.inner.updates_inflight.load(Ordering::Acquire),
        )
    }

    /// Drains the recorded operation history (requires
    /// [`TreeConfig::record_history`]).
    pub fn drain_history(&self) -> Vec<Event> {
        match &self.inner.history {
            Some(log) => std::mem::take(&mut *log.events.lock().unwrap()),
            None => Vec::new(),
        }
    }

    #[cfg(feature = "step-hooks")]
    pub fn set_step_hook(&self, hook: Arc<dyn StepHook>) {
        if self.inner.hook.set(hook).is_err() {
            panic!("step hook already set");
        }
    }

    /// Current head-pointer structure in DOT format, for debugging.
    pub fn dump_dot(&self) -> String {
        fn fmt_key(k: Key) -> String {
            if k == KEY_NEG_INF {
                "-inf".into()
            } else if k == KEY_POS_INF {
                "+inf".into()
            } else {
                k.to_string()
            }
        }
        fn id<V>(p: NodeRef<V>) -> String {
            match p.node() {
                Node::Internal(_) => format!("i{:x}", p.ptr() as usize),
                Node::Leaf(_) => format!("l{:x}", p.ptr() as usize),
            }
        }
        let mut out = String::from("digraph tree {\n");
        let mut stack = vec![self.inner.root];
        let mut seen = HashSet::new();
        while let Some(p) = stack.pop() {
            if !seen.insert(p) {
                continue;
            }
            match p.node() {
                Node::Internal(n) => {
                    out.push_str(&format!("  {} [label=\"{}\"]\n", id(p), fmt_key(n.key)));
                    for dir in [Direction::Left, Direction::Right] {
                        let c = n.child(dir).read();
                        out.push_str(&format!("  {} -> {}\n", id(p), id(c)));
                        stack.push(c);
                    }
                }
                Node::Leaf(l) => {
                    out.push_str(&format!(
                        "  {} [shape=box,label=\"{}{}\"]\n",
                        id(p),
                        fmt_key(l.key),
                        if l.marked() { " x" } else { "" }
                    ));
                }
            }
        }
        out.push_str("}\n");
        out
    }

    pub(crate) fn inner(&self) -> &TreeInner<V> {
        &self.inner
    }
}

impl<V: 'static> TreeInner<V> {
    #[inline]
    pub(crate) fn pause(&self, _tid: usize, _point: PausePoint) {
        #[cfg(feature = "step-hooks")]
        if let Some(h) = self.hook.get() {
            h.pause(_tid, _point);
        }
    }
}

struct SearchOutcome<V: 'static> {
    /// Internal nodes from the root down to (and including) the leaf's
    /// parent. Empty unless path recording is on.
    path: Vec<NodeRef<V>>,
    gparent: Option<(NodeRef<V>, Direction)>,
    parent: NodeRef<V>,
    dir: Direction,
    leaf: NodeRef<V>,
}

/// Per-thread operating handle. Not clonable, and operations take
/// `&mut self`: one in-flight operation per registered thread.
pub struct ThreadHandle<V: 'static> {
    tree: Tree<V>,
    tid: usize,
    pub(crate) counters: OpCounters,
}

impl<V: TreeValue> ThreadHandle<V> {
    pub fn tid(&self) -> usize {
        self.tid
    }

    pub fn tree(&self) -> &Tree<V> {
        &self.tree
    }

    /// Counters accumulated by the most recently completed operation.
    pub fn last_op_counters(&self) -> OpCounters {
        self.counters
    }

    fn restart_backoff(&self, inner: &TreeInner<V>, attempt: u32) {
        if inner.cfg.backoff {
            for _ in 0..(1u32 << attempt.min(10)) {
                std::hint::spin_loop();
            }
            if attempt > 4 {
                std::thread::yield_now();
            }
        }
    }

    fn invoke_seq(&self, inner: &TreeInner<V>) -> Option<u64> {
        inner
            .history
            .as_ref()
            .map(|log| log.seq.fetch_add(1, Ordering::AcqRel))
    }

    fn record(&self, inner: &TreeInner<V>, invoke: Option<u64>, ts: Option<Ts>, op: OpRecord) {
        if let (Some(invoke_seq), Some(log)) = (invoke, inner.history.as_ref()) {
            let response_seq = log.seq.fetch_add(1, Ordering::AcqRel);
            log.events.lock().unwrap().push(Event {
                tid: self.tid,
                invoke_seq,
                response_seq,
                ts,
                op,
            });
        }
    }

    /// Standard-read search for `key`, tracking the parent, its direction
    /// to the leaf, the grandparent edge, and (optionally) the internal
    /// path.
    fn search(&mut self, inner: &TreeInner<V>, key: Key, record_path: bool) -> SearchOutcome<V> {
        let mut path = Vec::new();
        let mut gparent = None;
        let mut cur = inner.root;
        loop {
            let n = match cur.node() {
                Node::Internal(n) => n,
                Node::Leaf(_) => unreachable!("search entered a leaf"),
            };
            self.counters.nodes_visited += 1;
            if record_path {
                path.push(cur);
            }
            let dir = if key < n.key {
                Direction::Left
            } else {
                Direction::Right
            };
            let child = n.child(dir).read();
            if child.node().as_leaf().is_some() {
                return SearchOutcome {
                    path,
                    gparent,
                    parent: cur,
                    dir,
                    leaf: child,
                };
            }
            gparent = Some((cur, dir));
            cur = child;
        }
    }

    /// Inserts `key → value`; returns false when the key is already
    /// (logically) present.
    ///
    /// Panics on the reserved extreme keys.
    pub fn insert(&mut self, key: Key, value: V) -> bool {
        assert!(is_user_key(key), "key {key} is reserved for tree sentinels");
        self.counters.reset();
        let tree = self.tree.clone();
        let inner = tree.inner();
        let invoke = self.invoke_seq(inner);
        let (ok, ts) = self.insert_inner(inner, key, &value);
        self.record(
            inner,
            invoke,
            ts,
            OpRecord::Insert {
                key,
                value: format!("{value:?}"),
                ok,
            },
        );
        ok
    }

    fn insert_inner(&mut self, inner: &TreeInner<V>, key: Key, value: &V) -> (bool, Option<Ts>) {
        let mut attempt = 0u32;
        loop {
            let s = self.search(inner, key, inner.cfg.path_record);
            let leaf = s.leaf.node().as_leaf().expect("search lands on a leaf");
            let parent = s.parent.node().as_internal().unwrap();
            if leaf.key == key {
                // Found: failure is only valid while the leaf is not already
                // considered deleted by an announced deletion.
                if !self.is_deleted(inner, s.leaf, s.parent) {
                    return (false, None);
                }
                self.counters.restarts += 1;
                self.restart_backoff(inner, attempt);
                attempt += 1;
                continue;
            }
            if !parent.lock.try_lock_edge(s.dir, self.tid as u16) {
                self.counters.restarts += 1;
                self.restart_backoff(inner, attempt);
                attempt += 1;
                continue;
            }
            if parent.child(s.dir).read() != s.leaf {
                parent.lock.unlock_edge(s.dir, self.tid as u16);
                self.counters.restarts += 1;
                self.restart_backoff(inner, attempt);
                attempt += 1;
                continue;
            }
            // Locked and validated: the operation is guaranteed to succeed.
            inner.updates_started.fetch_add(1, Ordering::AcqRel);
            inner.updates_inflight.fetch_add(1, Ordering::AcqRel);
            inner.pause(self.tid, PausePoint::LocksAcquired);

            let new_leaf = alloc_node(Node::Leaf(Leaf::new(key, value.clone())));
            let (left, right, node_key) = if key < leaf.key {
                (new_leaf, s.leaf, leaf.key)
            } else {
                (s.leaf, new_leaf, key)
            };
            let existing_contrib = if leaf.is_sentinel() {
                inner.spec.identity()
            } else {
                inner.spec.leaf_value(leaf.key, leaf.user_value())
            };
            let new_internal = alloc_node(Node::Internal(Internal {
                key: node_key,
                lock: LockWord::new(),
                left: VersionedField::new(left),
                right: VersionedField::new(right),
                agg: inner
                    .variant
                    .new_agg_field(existing_contrib, self.tid, inner.spec.identity()),
            }));
            let u = alloc_update(
                new_leaf,
                s.parent,
                new_internal,
                s.dir,
                OpKind::Insert,
                self.tid as u16,
            );

            inner.variant.publish(self.tid, u);
            inner.pause(self.tid, PausePoint::AnnouncePublished);
            inner.variant.assign_ts(u, &mut self.counters);
            let ts = u.ts();
            inner.pause(self.tid, PausePoint::Announced);

            // The new routing node is not on the recorded path; publish its
            // aggregate head before walking the path.
            inner.variant.seed_insert_agg(
                &new_internal.node().as_internal().unwrap().agg,
                &inner.spec,
                u,
                self.tid,
            );
            self.update_path_aggs(inner, u, &s, key);
            inner.pause(self.tid, PausePoint::AggregatesUpdated);

            // Apply: swing the locked edge to the new routing node.
            parent.child(s.dir).write(new_internal, ts);
            inner.pause(self.tid, PausePoint::Applied);

            u.done.store(true, Ordering::Release);
            inner.variant.unannounce(self.tid, u);
            inner.pause(self.tid, PausePoint::Unannounced);

            parent.lock.unlock_edge(s.dir, self.tid as u16);
            inner.updates_inflight.fetch_sub(1, Ordering::AcqRel);
            return (true, Some(ts));
        }
    }

    /// Deletes `key`, returning its value, or `None` when the key is
    /// (logically) absent.
    pub fn delete(&mut self, key: Key) -> Option<V> {
        assert!(is_user_key(key), "key {key} is reserved for tree sentinels");
        self.counters.reset();
        let tree = self.tree.clone();
        let inner = tree.inner();
        let invoke = self.invoke_seq(inner);
        let (removed, ts) = self.delete_inner(inner, key);
        self.record(
            inner,
            invoke,
            ts,
            OpRecord::Delete {
                key,
                removed: removed.as_ref().map(|v| format!("{v:?}")),
            },
        );
        removed
    }

    fn delete_inner(&mut self, inner: &TreeInner<V>, key: Key) -> (Option<V>, Option<Ts>) {
        let mut attempt = 0u32;
        loop {
            let s = self.search(inner, key, inner.cfg.path_record);
            let leaf = s.leaf.node().as_leaf().unwrap();
            if leaf.key != key {
                // Absent: failure is only valid while no announced insertion
                // has already (logically) added the key.
                if self
                    .get_value_if_inserted(inner, s.parent, s.dir, key)
                    .is_none()
                {
                    return (None, None);
                }
                self.counters.restarts += 1;
                self.restart_backoff(inner, attempt);
                attempt += 1;
                continue;
            }
            let Some((gref, gdir)) = s.gparent else {
                // User-key leaves hang below the root's right subtree, so a
                // grandparent exists; a stale search can still land here.
                self.counters.restarts += 1;
                attempt += 1;
                continue;
            };
            let g = gref.node().as_internal().unwrap();
            let parent = s.parent.node().as_internal().unwrap();
            let tid = self.tid as u16;
            if !g.lock.try_lock_edge(gdir, tid) {
                self.counters.restarts += 1;
                self.restart_backoff(inner, attempt);
                attempt += 1;
                continue;
            }
            if g.child(gdir).read() != s.parent {
                g.lock.unlock_edge(gdir, tid);
                self.counters.restarts += 1;
                self.restart_backoff(inner, attempt);
                attempt += 1;
                continue;
            }
            // Pin the target leaf with its edge before freezing the parent:
            // the permanent word can never be released, so it must only be
            // taken once the leaf is known to still hang off this node.
            if !parent.lock.try_lock_edge(s.dir, tid) {
                g.lock.unlock_edge(gdir, tid);
                self.counters.restarts += 1;
                self.restart_backoff(inner, attempt);
                attempt += 1;
                continue;
            }
            if parent.child(s.dir).read() != s.leaf
                || !parent.lock.try_permanent_upgrade(s.dir, tid)
            {
                parent.lock.unlock_edge(s.dir, tid);
                g.lock.unlock_edge(gdir, tid);
                self.counters.restarts += 1;
                self.restart_backoff(inner, attempt);
                attempt += 1;
                continue;
            }
            inner.updates_started.fetch_add(1, Ordering::AcqRel);
            inner.updates_inflight.fetch_add(1, Ordering::AcqRel);
            inner.pause(self.tid, PausePoint::LocksAcquired);

            // The parent's edges are frozen; the sibling read is final.
            let sibling = parent.child(s.dir.opposite()).read();
            let u = alloc_update(s.leaf, gref, sibling, gdir, OpKind::Delete, tid);

            inner.variant.publish(self.tid, u);
            inner.pause(self.tid, PausePoint::AnnouncePublished);
            inner.variant.assign_ts(u, &mut self.counters);
            let ts = u.ts();
            inner.pause(self.tid, PausePoint::Announced);

            self.update_path_aggs(inner, u, &s, key);
            inner.pause(self.tid, PausePoint::AggregatesUpdated);

            leaf.mark(ts);
            inner.pause(self.tid, PausePoint::Applied);

            u.done.store(true, Ordering::Release);
            inner.variant.unannounce(self.tid, u);
            inner.pause(self.tid, PausePoint::Unannounced);

            g.child(gdir).write(sibling, ts);
            inner.pause(self.tid, PausePoint::Finalized);

            g.lock.unlock_edge(gdir, tid);
            inner.updates_inflight.fetch_sub(1, Ordering::AcqRel);
            return (Some(leaf.user_value().clone()), Some(ts));
        }
    }

    /// Aggregate-update pass: combine (insert) or subtract (delete) the
    /// operation's leaf into every internal node from the root down to the
    /// target's parent, in versions tagged with the operation's timestamp.
    fn update_path_aggs(
        &mut self,
        inner: &TreeInner<V>,
        u: &'static Update<V>,
        s: &SearchOutcome<V>,
        key: Key,
    ) {
        let ts = u.ts();
        let mut local = inner.variant.gather_for_update(ts, &mut self.counters);
        if inner.cfg.path_record {
            for &nref in &s.path {
                let n = nref.node().as_internal().unwrap();
                inner.variant.update_agg(
                    &n.agg,
                    &inner.spec,
                    u,
                    self.tid,
                    &mut local,
                    &mut self.counters,
                );
                local.narrow(n.key, key >= n.key);
            }
        } else {
            let mut cur = inner.root;
            loop {
                let n = cur.node().as_internal().unwrap();
                inner.variant.update_agg(
                    &n.agg,
                    &inner.spec,
                    u,
                    self.tid,
                    &mut local,
                    &mut self.counters,
                );
                let dir = if key < n.key {
                    Direction::Left
                } else {
                    Direction::Right
                };
                local.narrow(n.key, dir == Direction::Right);
                let next = n
                    .child(dir)
                    .versioned_read_counted(ts, &mut self.counters.step3_chain_steps);
                if next.node().as_leaf().is_some() {
                    break;
                }
                cur = next;
            }
        }
    }

    /// Returns the value mapped to `key`, or `None`.
    pub fn contains(&mut self, key: Key) -> Option<V> {
        self.counters.reset();
        let tree = self.tree.clone();
        let inner = tree.inner();
        let invoke = self.invoke_seq(inner);
        let s = self.search(inner, key, false);
        inner.pause(self.tid, PausePoint::SearchLanded);
        let leaf = s.leaf.node().as_leaf().unwrap();
        let found = if leaf.key == key {
            if self.is_deleted(inner, s.leaf, s.parent) {
                None
            } else {
                Some(leaf.user_value().clone())
            }
        } else {
            self.get_value_if_inserted(inner, s.parent, s.dir, key)
        };
        self.record(
            inner,
            invoke,
            None,
            OpRecord::Contains {
                key,
                found: found.as_ref().map(|v| format!("{v:?}")),
            },
        );
        found
    }

    /// Whether the found leaf is already considered deleted: its parent is
    /// permanently locked and either a deletion of it is announced (whose
    /// timestamp is first guaranteed) or the leaf is marked.
    fn is_deleted(&mut self, inner: &TreeInner<V>, leaf: NodeRef<V>, parent: NodeRef<V>) -> bool {
        let p = parent.node().as_internal().unwrap();
        if !p.lock.is_permanent() {
            return false;
        }
        let owner_hint = if inner.cfg.tid_in_lock {
            p.lock.edge_locked(Direction::Left)
        } else {
            None
        };
        if let Some(del) = inner
            .variant
            .find_delete_of(leaf, owner_hint, &mut self.counters)
        {
            inner.variant.guarantee_ts(del, &mut self.counters);
            return true;
        }
        leaf.node().as_leaf().unwrap().marked()
    }

    /// Whether `key`, not found by the caller's search, is already
    /// considered inserted: the edge it would hang off is locked by an
    /// announced insertion of the key (whose timestamp is first
    /// guaranteed), or a re-descent from the parent's current child finds
    /// it.
    fn get_value_if_inserted(
        &mut self,
        inner: &TreeInner<V>,
        parent: NodeRef<V>,
        dir: Direction,
        key: Key,
    ) -> Option<V> {
        let p = parent.node().as_internal().unwrap();
        if let Some(owner) = p.lock.edge_locked(dir) {
            let owner_hint = inner.cfg.tid_in_lock.then_some(owner);
            if let Some(ins) = inner
                .variant
                .find_insert_of(key, owner_hint, &mut self.counters)
            {
                inner.variant.guarantee_ts(ins, &mut self.counters);
                return Some(ins.leaf_node().user_value().clone());
            }
        }
        let mut cur = p.child(dir).read();
        loop {
            match cur.node() {
                Node::Leaf(l) => {
                    return (l.key == key).then(|| l.user_value().clone());
                }
                Node::Internal(n) => {
                    self.counters.nodes_visited += 1;
                    cur = n
                        .child(if key < n.key {
                            Direction::Left
                        } else {
                            Direction::Right
                        })
                        .read();
                }
            }
        }
    }

    /// Resolves a child pointer at `ts`: an announced-but-unapplied edge
    /// modification wins, otherwise the versioned chain.
    fn resolve_child(
        &mut self,
        inner: &TreeInner<V>,
        nref: NodeRef<V>,
        dir: Direction,
        ts: Ts,
        local: &mut LocalUpdates<V>,
    ) -> NodeRef<V> {
        let n = nref.node().as_internal().unwrap();
        let may_have_announcement =
            !inner.cfg.resolve_lock_check || n.lock.edge_locked(dir).is_some();
        if may_have_announcement {
            if let Some(u) = local.find_edge(nref, dir) {
                return u.edge_target;
            }
        }
        n.child(dir)
            .versioned_read_counted(ts, &mut self.counters.chain_steps)
    }

    /// Whether a landing or child leaf is logically present at `ts`.
    fn leaf_alive_at(&mut self, leaf: NodeRef<V>, ts: Ts, local: &LocalUpdates<V>) -> bool {
        let l = leaf.node().as_leaf().unwrap();
        let mark = l.mark_timestamp();
        if mark != 0 {
            return mark > ts;
        }
        if let Some(u) = local.delete_of(leaf) {
            if !u.is_done() {
                // Gathered, so u.ts ≤ ts: logically deleted at ts.
                return false;
            }
            // Completed while we looked: the mark is authoritative now.
            let mark = l.mark_timestamp();
            return mark == 0 || mark > ts;
        }
        true
    }

    /// Aggregate of a resolved child at `ts`. Internal children go through
    /// the variant's metadata scheme; a leaf's value is computed directly,
    /// resolved against its mark and the gathered announcements.
    fn child_agg(
        &mut self,
        inner: &TreeInner<V>,
        child: NodeRef<V>,
        ts: Ts,
        local: &mut LocalUpdates<V>,
        parent_key: Key,
    ) -> AggValue {
        match child.node() {
            Node::Leaf(l) => {
                if l.is_sentinel() || !self.leaf_alive_at(child, ts, local) {
                    inner.spec.identity()
                } else {
                    inner.spec.leaf_value(l.key, l.user_value())
                }
            }
            Node::Internal(n) => inner.variant.read_agg(
                &n.agg,
                ts,
                local,
                parent_key,
                &inner.spec,
                &mut self.counters,
            ),
        }
    }

    /// The traversal template: root-to-leaf descent steered by `descend`,
    /// accumulating the aggregate of every subtree jumped over.
    pub(crate) fn traverse(
        &mut self,
        inner: &TreeInner<V>,
        ts: Ts,
        local: &mut LocalUpdates<V>,
        descend: &dyn Fn(&AggValue, Key) -> bool,
    ) -> TraversalOutput {
        let mut cur = inner.root;
        let mut skipped = inner.spec.identity();
        loop {
            match cur.node() {
                Node::Leaf(l) => {
                    let (present, leaf_agg) = if l.is_sentinel() {
                        (true, inner.spec.identity())
                    } else if self.leaf_alive_at(cur, ts, local) {
                        (true, inner.spec.leaf_value(l.key, l.user_value()))
                    } else {
                        (false, inner.spec.identity())
                    };
                    return TraversalOutput {
                        skipped,
                        leaf: LeafSnapshot {
                            key: l.key,
                            present,
                            leaf_agg,
                            is_sentinel: l.is_sentinel(),
                        },
                    };
                }
                Node::Internal(n) => {
                    self.counters.nodes_visited += 1;
                    let left = self.resolve_child(inner, cur, Direction::Left, ts, local);
                    let left_agg = self.child_agg(inner, left, ts, local, n.key);
                    let up_to_current = inner.spec.combine(&skipped, &left_agg);
                    if descend(&up_to_current, n.key) {
                        local.narrow(n.key, true);
                        skipped = up_to_current;
                        cur = self.resolve_child(inner, cur, Direction::Right, ts, local);
                    } else {
                        local.narrow(n.key, false);
                        cur = left;
                    }
                }
            }
        }
    }

    /// Runs a (possibly chained) query: one timestamp for every traversal
    /// of every stage; the first traversal performs the gathered-set
    /// guarantee.
    pub fn run_query(&mut self, q: &QueryDef) -> Result<QueryValue, QueryError> {
        self.counters.reset();
        let tree = self.tree.clone();
        let inner = tree.inner();
        let invoke = self.invoke_seq(inner);
        let ts = inner.variant.acquire_query_ts();
        inner.pause(self.tid, PausePoint::QueryTimestamped);
        let res = self.query_at_ts(inner, q, ts);
        self.record(
            inner,
            invoke,
            Some(ts),
            OpRecord::Query {
                name: q.name().to_string(),
                args: q.args().to_vec(),
                outcome: match &res {
                    Ok(v) => QueryOutcome::Ok(v.clone()),
                    Err(e) => QueryOutcome::Err(e.to_string()),
                },
            },
        );
        res
    }

    /// Re-executes a query at a previously obtained timestamp. Versioned
    /// state makes the answer independent of updates stamped later.
    pub fn query_at(&mut self, q: &QueryDef, ts: Ts) -> Result<QueryValue, QueryError> {
        self.counters.reset();
        let tree = self.tree.clone();
        let inner = tree.inner();
        self.query_at_ts(inner, q, ts)
    }

    /// Obtains (and consumes) a query timestamp without running a query,
    /// pinning a snapshot that later [`Self::query_at`] calls can read.
    pub fn snapshot_ts(&mut self) -> Ts {
        self.tree.inner().variant.acquire_query_ts()
    }

    fn query_at_ts(
        &mut self,
        inner: &TreeInner<V>,
        q: &QueryDef,
        ts: Ts,
    ) -> Result<QueryValue, QueryError> {
        let mut first = true;
        let mut carry: Option<QueryValue> = None;
        for stage in q.stages() {
            let descends = stage.build_traversals(carry.as_ref());
            debug_assert!(!descends.is_empty(), "query stage with no traversals");
            let mut outputs = Vec::with_capacity(descends.len());
            for d in &descends {
                let mut local = inner.variant.gather(ts, first, &mut self.counters);
                first = false;
                outputs.push(self.traverse(inner, ts, &mut local, d.as_ref()));
            }
            carry = Some(stage.compute(carry.as_ref(), &outputs)?);
        }
        Ok(carry.expect("query with no stages"))
    }
}
