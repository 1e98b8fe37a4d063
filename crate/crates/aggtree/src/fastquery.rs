//! Query-optimized variant: a timestamped announcement queue and a single
//! versioned aggregate field per node, maintained cooperatively.
//!
//! Effectual operations serialize by enqueueing their announcement with a
//! timestamp exactly one above the current tail's, so timestamps form a
//! total order with no gaps. Queries obtain their timestamp by reading the
//! last queue node's — nothing enqueued later can slip below it, so no
//! helping compare-and-swap on announcement timestamps is ever needed.
//!
//! When an operation updates a node's aggregate it first catches the field
//! up on behalf of every gathered predecessor not yet reflected, in
//! timestamp order, with guarded conditional writes: any number of helpers
//! produce exactly one version per effectual timestamp, and a failed write
//! just means another helper already installed it.

use std::sync::atomic::{AtomicBool, AtomicPtr, Ordering};

use crate::aggregate::{AggValue, AggregateSpec};
use crate::backbone::{LocalUpdates, OpKind, Update};
use crate::basetree::NodeRef;
use crate::verify::counters::OpCounters;
use crate::versioned::VersionedField;
use crate::{Key, Ts};

pub(crate) struct QueueNode<V: 'static> {
    update: Option<&'static Update<V>>,
    ts: Ts,
    next: AtomicPtr<QueueNode<V>>,
    removed: AtomicBool,
}

/// Announcement queue: a linked queue with compare-and-swap tail insertion
/// carrying consecutive timestamps, plus two-phase interior removal
/// (logical flag, then best-effort unlink; flagged nodes are skipped).
/// The sentinel head carries timestamp 0 and is never removed.
pub(crate) struct FastQueryState<V: 'static> {
    head: *const QueueNode<V>,
    tail: AtomicPtr<QueueNode<V>>,
}

unsafe impl<V: Send + Sync + 'static> Send for FastQueryState<V> {}
unsafe impl<V: Send + Sync + 'static> Sync for FastQueryState<V> {}

impl<V: 'static> FastQueryState<V> {
    pub fn new() -> Self {
        let sentinel = Box::into_raw(Box::new(QueueNode {
            update: None,
            ts: 0,
            next: AtomicPtr::new(std::ptr::null_mut()),
            removed: AtomicBool::new(false),
        }));
        FastQueryState {
            head: sentinel,
            tail: AtomicPtr::new(sentinel),
        }
    }

    /// Links the announcement at the tail with timestamp `tail.ts + 1`.
    /// The link is the moment the operation takes effect.
    pub fn enqueue(&self, u: &'static Update<V>) {
        let node = Box::into_raw(Box::new(QueueNode {
            update: Some(u),
            ts: 0,
            next: AtomicPtr::new(std::ptr::null_mut()),
            removed: AtomicBool::new(false),
        }));
        u.queue_node.store(node, Ordering::Release);
        loop {
            let tail_ptr = self.tail.load(Ordering::Acquire);
            let tail = unsafe { &*tail_ptr };
            let next = tail.next.load(Ordering::Acquire);
            if !next.is_null() {
                // Tail lagging: help it forward.
                let _ = self
                    .tail
                    .compare_exchange(tail_ptr, next, Ordering::AcqRel, Ordering::Acquire);
                continue;
            }
            let ts = tail.ts + 1;
            // The node is unpublished until the link lands, so these plain
            // stores are race-free (re-run per attempt with a fresh ts).
            unsafe { (*node).ts = ts };
            u.timestamp.store(ts, Ordering::Release);
            if tail
                .next
                .compare_exchange(
                    std::ptr::null_mut(),
                    node,
                    Ordering::AcqRel,
                    Ordering::Acquire,
                )
                .is_ok()
            {
                let _ = self
                    .tail
                    .compare_exchange(tail_ptr, node, Ordering::AcqRel, Ordering::Acquire);
                return;
            }
        }
    }

    /// Timestamp in the last queue node at the moment it is loaded. This is
    /// the query linearization point.
    pub fn current_timestamp(&self) -> Ts {
        let mut cur = self.tail.load(Ordering::Acquire);
        loop {
            let next = unsafe { &*cur }.next.load(Ordering::Acquire);
            if next.is_null() {
                return unsafe { &*cur }.ts;
            }
            cur = next;
        }
    }

    /// Copies announcements with timestamp ≤ `ts`, oldest first. The
    /// timestamp bound keeps the scan from chasing newer enqueues; flagged
    /// (removed) nodes are skipped.
    pub fn gather(&self, ts: Ts, counters: &mut OpCounters) -> LocalUpdates<V> {
        let mut items = Vec::new();
        let mut p = unsafe { &*self.head }.next.load(Ordering::Acquire);
        while !p.is_null() {
            let node = unsafe { &*p };
            if node.ts > ts {
                break;
            }
            counters.gather_scans += 1;
            if !node.removed.load(Ordering::Acquire) {
                if let Some(u) = node.update {
                    items.push(u);
                }
            }
            p = node.next.load(Ordering::Acquire);
        }
        LocalUpdates::Queue(items)
    }

    /// Withdraws a completed announcement: flag first, then one cleanup
    /// sweep from the head that splices out every flagged run it meets
    /// (this node's included, and any strays earlier removals left
    /// behind). The current last node is never unlinked — the tail
    /// timestamp chain must stay anchored — so a node flagged while at
    /// the tail is reclaimed by a later operation's sweep instead.
    /// Gathers never write; cleanup rides on effectual operations only.
    pub fn remove(&self, u: &'static Update<V>) {
        debug_assert!(u.is_done());
        let node_ptr = u.queue_node.load(Ordering::Acquire);
        debug_assert!(!node_ptr.is_null());
        let node = unsafe { &*node_ptr };
        node.removed.store(true, Ordering::Release);
        let node_ts = node.ts;
        let mut pred = self.head;
        loop {
            let first = unsafe { &*pred }.next.load(Ordering::Acquire);
            if first.is_null() {
                return;
            }
            // Advance over a run of flagged nodes. Flags are sticky and
            // interior next pointers are written once, so everything the
            // walk skipped is still flagged at splice time; runs stop
            // short of the tail.
            let mut cur = first;
            loop {
                let c = unsafe { &*cur };
                if !c.removed.load(Ordering::Acquire) {
                    break;
                }
                let nxt = c.next.load(Ordering::Acquire);
                if nxt.is_null() {
                    break;
                }
                cur = nxt;
            }
            if !std::ptr::eq(cur, first) {
                // Splice the run out; a failure means a concurrent sweep
                // or enqueue touched this edge — the next removal's sweep
                // reclaims whatever this one left.
                let _ = unsafe { &*pred }.next.compare_exchange(
                    first,
                    cur as *mut _,
                    Ordering::AcqRel,
                    Ordering::Acquire,
                );
            }
            let c = unsafe { &*cur };
            if c.next.load(Ordering::Acquire).is_null() || c.ts > node_ts {
                return; // reached the tail or swept past this node
            }
            pred = cur;
        }
    }

    fn scan_prefix(
        &self,
        counters: &mut OpCounters,
        mut pred: impl FnMut(&'static Update<V>) -> bool,
    ) -> Option<&'static Update<V>> {
        let bound = self.current_timestamp();
        let mut p = unsafe { &*self.head }.next.load(Ordering::Acquire);
        while !p.is_null() {
            let node = unsafe { &*p };
            if node.ts > bound {
                return None;
            }
            counters.aux_registry_scans += 1;
            if !node.removed.load(Ordering::Acquire) {
                if let Some(u) = node.update {
                    if pred(u) {
                        return Some(u);
                    }
                }
            }
            p = node.next.load(Ordering::Acquire);
        }
        None
    }

    pub fn find_delete_of(
        &self,
        leaf: NodeRef<V>,
        counters: &mut OpCounters,
    ) -> Option<&'static Update<V>> {
        self.scan_prefix(counters, |u| u.kind == OpKind::Delete && u.leaf == leaf)
    }

    pub fn find_insert_of(&self, key: Key, counters: &mut OpCounters) -> Option<&'static Update<V>> {
        self.scan_prefix(counters, |u| u.kind == OpKind::Insert && u.key() == key)
    }

    /// Catch-up write loop: apply, in timestamp order, every live gathered
    /// operation not yet reflected in the field (the caller's own entry is
    /// the last of `local`). Guarded writes make helpers idempotent: a
    /// failure only means another thread installed that version.
    pub fn update_agg_helping(
        &self,
        field: &VersionedField<AggValue>,
        spec: &AggregateSpec<V>,
        local: &mut LocalUpdates<V>,
        counters: &mut OpCounters,
    ) {
        let LocalUpdates::Queue(items) = local else {
            unreachable!("queue variant uses queue-local")
        };
        let mut cursor = 0usize;
        loop {
            let (last_val, last_ts) = field.timestamped_read();
            // Advance to the first live entry above the head timestamp. The
            // head only moves forward, so entries skipped here stay skipped.
            let mut chosen = None;
            let mut i = cursor;
            while i < items.len() {
                let u = items[i];
                if u.is_done() {
                    // Finished: its version (if this node is in its range)
                    // is already linked, so the timestamp guard below would
                    // reject a replay anyway.
                    items.remove(i);
                    continue;
                }
                if u.ts() <= last_ts {
                    i += 1;
                    continue;
                }
                chosen = Some(u);
                break;
            }
            cursor = i;
            let Some(u) = chosen else {
                return;
            };
            let leaf = u.leaf_node();
            let leaf_agg = spec.leaf_value(leaf.key, leaf.user_value());
            let new_val = spec.apply_signed(&last_val, &leaf_agg, u.is_insert());
            counters.agg_cas_attempts += 1;
            // Failure means another helper linked a version first; the
            // re-read at the top of the loop picks the chain up from there.
            let _ = field.write_if_timestamp(last_ts, new_val, u.ts());
        }
    }

    /// Field value at `ts`: the head when it matches, an older version when
    /// the head is newer, and otherwise the head value with the effect of
    /// every gathered in-range operation stamped after it plugged in.
    pub fn read_agg(
        &self,
        field: &VersionedField<AggValue>,
        ts: Ts,
        local: &mut LocalUpdates<V>,
        parent_key: Key,
        spec: &AggregateSpec<V>,
        counters: &mut OpCounters,
    ) -> AggValue {
        let LocalUpdates::Queue(items) = local else {
            unreachable!("queue variant uses queue-local")
        };
        'restart: loop {
            let (value, cur_ts) = field.timestamped_read();
            if cur_ts == ts {
                return value;
            }
            if cur_ts > ts {
                return field.versioned_read_counted(ts, &mut counters.chain_steps);
            }
            // cur_ts < ts: plug in gathered operations stamped in
            // (cur_ts, ts] whose leaves fall below parent_key. A live entry
            // cannot have reached this field yet (the head would have moved),
            // so each is plugged exactly once. An entry observed done may
            // already be reflected above our base read — drop it and restart
            // from a fresh base instead of guessing.
            let mut acc = value;
            let mut i = 0;
            while i < items.len() {
                let u = items[i];
                if u.is_done() {
                    items.remove(i);
                    if u.ts() > cur_ts {
                        continue 'restart;
                    }
                    continue;
                }
                if u.key() < parent_key && u.ts() > cur_ts {
                    debug_assert!(u.ts() <= ts, "gather bounded by ts");
                    let leaf = u.leaf_node();
                    let leaf_agg = spec.leaf_value(leaf.key, leaf.user_value());
                    acc = spec.apply_signed(&acc, &leaf_agg, u.is_insert());
                }
                i += 1;
            }
            return acc;
        }
    }
}

impl<V: 'static> Drop for FastQueryState<V> {
    fn drop(&mut self) {
        // Free the nodes still linked; interior-removed ones stay leaked
        // like the announcement records themselves.
        let mut p = self.head as *mut QueueNode<V>;
        while !p.is_null() {
            let node = unsafe { Box::from_raw(p) };
            p = node.next.load(Ordering::Acquire);
        }
    }
}
