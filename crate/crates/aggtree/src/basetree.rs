//! Base external BST pieces: node types, sentinels, and the packed
//! two-lock word.
//!
//! The tree is external (items live in leaves; internal nodes route) with
//! three permanent sentinels: a root keyed −∞ whose left child is a −∞ leaf
//! and whose right subtree holds everything else, framed by a +∞ leaf. Keys
//! smaller than a node's key go left, keys equal or greater go right.
//!
//! Each internal node carries one 64-bit lock word holding both edge locks,
//! a permanent flag, and the owning thread id per edge. An edge lock is
//! acquired and released independently of its sibling; the permanent state
//! freezes the whole word forever and is taken when a node is about to be
//! unlinked by a deletion.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::backbone::AggField;
use crate::versioned::VersionedField;
use crate::{Key, Ts, KEY_NEG_INF, KEY_POS_INF};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
}

impl Direction {
    pub fn opposite(self) -> Direction {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
        }
    }
}

const LEFT_FLAG: u64 = 1;
const RIGHT_FLAG: u64 = 1 << 1;
const PERM_FLAG: u64 = 1 << 2;
const LEFT_TID_SHIFT: u32 = 16;
const RIGHT_TID_SHIFT: u32 = 32;
const TID_MASK: u64 = 0xFFFF;

fn flag(dir: Direction) -> u64 {
    match dir {
        Direction::Left => LEFT_FLAG,
        Direction::Right => RIGHT_FLAG,
    }
}

fn tid_shift(dir: Direction) -> u32 {
    match dir {
        Direction::Left => LEFT_TID_SHIFT,
        Direction::Right => RIGHT_TID_SHIFT,
    }
}

/// One machine word packing both edge locks: flags in the low bits, a
/// 16-bit owner tid per edge. The permanent acquisition sets all three
/// flags in a single compare-and-swap and is absorbing.
pub(crate) struct LockWord(AtomicU64);

impl LockWord {
    pub fn new() -> Self {
        LockWord(AtomicU64::new(0))
    }

    /// Single attempt to lock one edge. Fails on any contention on that
    /// edge or on a permanent word; the caller restarts its traversal.
    pub fn try_lock_edge(&self, dir: Direction, tid: u16) -> bool {
        let cur = self.0.load(Ordering::Acquire);
        if cur & (flag(dir) | PERM_FLAG) != 0 {
            return false;
        }
        let new = cur | flag(dir) | ((tid as u64) << tid_shift(dir));
        self.0
            .compare_exchange(cur, new, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }

    /// Clears one edge's flag and owner. Caller must hold that edge.
    pub fn unlock_edge(&self, dir: Direction, tid: u16) {
        let clear = !(flag(dir) | (TID_MASK << tid_shift(dir)));
        let prev = self.0.fetch_and(clear, Ordering::AcqRel);
        debug_assert_eq!(prev & flag(dir), flag(dir), "unlock of unheld edge");
        debug_assert_eq!(
            (prev >> tid_shift(dir)) & TID_MASK,
            tid as u64,
            "unlock by non-owner"
        );
        debug_assert_eq!(prev & PERM_FLAG, 0, "permanent words are never unlocked");
    }

    /// Permanent acquisition from the fully-unlocked word: one
    /// compare-and-swap setting both edge flags and the permanent flag.
    /// The deletion path pins its target leaf first and uses the upgrade
    /// below instead; this form stays for callers with no edge to hold.
    #[allow(dead_code)]
    pub fn try_permanent_lock(&self, tid: u16) -> bool {
        let new = PERM_FLAG
            | LEFT_FLAG
            | RIGHT_FLAG
            | ((tid as u64) << LEFT_TID_SHIFT)
            | ((tid as u64) << RIGHT_TID_SHIFT);
        self.0
            .compare_exchange(0, new, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }

    /// Permanent acquisition upgrading from an edge the caller already
    /// holds, so the deletion target under that edge stays pinned across
    /// the transition. Fails while the other edge is held by anyone.
    pub fn try_permanent_upgrade(&self, held: Direction, tid: u16) -> bool {
        let expected = flag(held) | ((tid as u64) << tid_shift(held));
        let new = PERM_FLAG
            | LEFT_FLAG
            | RIGHT_FLAG
            | ((tid as u64) << LEFT_TID_SHIFT)
            | ((tid as u64) << RIGHT_TID_SHIFT);
        self.0
            .compare_exchange(expected, new, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }

    pub fn is_permanent(&self) -> bool {
        self.0.load(Ordering::Acquire) & PERM_FLAG != 0
    }

    /// Snapshot of one edge's state: `Some(owner)` when locked.
    pub fn edge_locked(&self, dir: Direction) -> Option<u16> {
        let cur = self.0.load(Ordering::Acquire);
        if cur & flag(dir) != 0 {
            Some(((cur >> tid_shift(dir)) & TID_MASK) as u16)
        } else {
            None
        }
    }

    #[cfg(test)]
    pub fn raw(&self) -> u64 {
        self.0.load(Ordering::Acquire)
    }
}

pub(crate) struct Leaf<V> {
    pub key: Key,
    /// `None` only for the two sentinel leaves.
    value: Option<V>,
    /// 0 while the leaf is live; the deleting operation's timestamp once it
    /// is logically removed. Set exactly once.
    mark_ts: AtomicU64,
}

impl<V> Leaf<V> {
    pub fn new(key: Key, value: V) -> Self {
        Leaf {
            key,
            value: Some(value),
            mark_ts: AtomicU64::new(0),
        }
    }

    pub fn sentinel(key: Key) -> Self {
        debug_assert!(key == KEY_NEG_INF || key == KEY_POS_INF);
        Leaf {
            key,
            value: None,
            mark_ts: AtomicU64::new(0),
        }
    }

    pub fn user_value(&self) -> &V {
        self.value.as_ref().expect("sentinel leaf has no value")
    }

    pub fn marked(&self) -> bool {
        self.mark_ts.load(Ordering::Acquire) != 0
    }

    pub fn mark(&self, ts: Ts) {
        debug_assert_ne!(ts, 0);
        let prev = self.mark_ts.swap(ts, Ordering::AcqRel);
        debug_assert_eq!(prev, 0, "leaf marked twice");
    }

    pub fn mark_timestamp(&self) -> Ts {
        self.mark_ts.load(Ordering::Acquire)
    }

    pub fn is_sentinel(&self) -> bool {
        self.key == KEY_NEG_INF || self.key == KEY_POS_INF
    }
}

pub(crate) struct Internal<V: 'static> {
    pub key: Key,
    pub lock: LockWord,
    pub left: VersionedField<NodeRef<V>>,
    pub right: VersionedField<NodeRef<V>>,
    pub agg: AggField<V>,
}

impl<V: 'static> Internal<V> {
    pub fn child(&self, dir: Direction) -> &VersionedField<NodeRef<V>> {
        match dir {
            Direction::Left => &self.left,
            Direction::Right => &self.right,
        }
    }
}

pub(crate) enum Node<V: 'static> {
    Internal(Internal<V>),
    Leaf(Leaf<V>),
}

impl<V: 'static> Node<V> {
    pub fn as_internal(&self) -> Option<&Internal<V>> {
        match self {
            Node::Internal(n) => Some(n),
            Node::Leaf(_) => None,
        }
    }

    pub fn as_leaf(&self) -> Option<&Leaf<V>> {
        match self {
            Node::Leaf(l) => Some(l),
            Node::Internal(_) => None,
        }
    }
}

/// Shared reference to a tree node. Nodes live until the owning tree drops,
/// so dereferencing is sound for as long as any handle exists.
pub(crate) struct NodeRef<V: 'static>(*const Node<V>);

impl<V: 'static> NodeRef<V> {
    pub fn node<'a>(self) -> &'a Node<V> {
        unsafe { &*self.0 }
    }

    pub fn ptr(self) -> *const Node<V> {
        self.0
    }
}

impl<V: 'static> Clone for NodeRef<V> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<V: 'static> Copy for NodeRef<V> {}
impl<V: 'static> PartialEq for NodeRef<V> {
    fn eq(&self, other: &Self) -> bool {
        std::ptr::eq(self.0, other.0)
    }
}
impl<V: 'static> Eq for NodeRef<V> {}
impl<V: 'static> std::hash::Hash for NodeRef<V> {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        (self.0 as usize).hash(state);
    }
}

unsafe impl<V: Send + Sync + 'static> Send for NodeRef<V> {}
unsafe impl<V: Send + Sync + 'static> Sync for NodeRef<V> {}

/// Heap-allocates a node. The owning tree reclaims every node reachable
/// through version chains when it drops.
pub(crate) fn alloc_node<V: 'static>(node: Node<V>) -> NodeRef<V> {
    NodeRef(Box::into_raw(Box::new(node)))
}
