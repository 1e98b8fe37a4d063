//! Update-optimized variant: per-thread announcement slots, a global query
//! timestamp, and per-thread versioned aggregate cells.
//!
//! Effectual operations never serialize on shared state: each writes only
//! its own announcement slot and its own aggregate cell per node. They take
//! the current global timestamp as theirs (several operations may share
//! one); only queries advance it, with a fetch-and-increment. An operation
//! first publishes its announcement with an unset timestamp and then
//! installs the global value with a compare-and-swap — a concurrent query's
//! first traversal performs the same compare-and-swap on any unset
//! announcement it meets, so by the time the query's gathered set is fixed,
//! nothing else can slip below its timestamp.
//!
//! A node's subtree aggregate at time `ts` is the combine over all per-tid
//! cells read at `ts`; the version payload carries the announcement that
//! produced it so readers can tell whether a gathered in-flight operation
//! is already reflected in a cell.

use std::sync::atomic::{AtomicPtr, AtomicU64, Ordering};

use crate::aggregate::{AggValue, AggregateSpec};
use crate::backbone::{AggField, CellValue, LocalUpdates, OpKind, Update};
use crate::basetree::NodeRef;
use crate::verify::counters::OpCounters;
use crate::versioned::VersionedField;
use crate::{Key, Ts, TS_NOT_SET};

/// The global timestamp is the only point queries contend on; keep it on
/// its own cache line.
#[repr(align(64))]
struct PaddedU64(AtomicU64);

pub(crate) struct FastUpdateState<V: 'static> {
    slots: Box<[AtomicPtr<Update<V>>]>,
    global_ts: PaddedU64,
}

unsafe impl<V: Send + Sync + 'static> Send for FastUpdateState<V> {}
unsafe impl<V: Send + Sync + 'static> Sync for FastUpdateState<V> {}

impl<V: 'static> FastUpdateState<V> {
    pub fn new(threads: usize) -> Self {
        FastUpdateState {
            slots: (0..threads)
                .map(|_| AtomicPtr::new(std::ptr::null_mut()))
                .collect(),
            global_ts: PaddedU64(AtomicU64::new(1)),
        }
    }

    pub fn threads(&self) -> usize {
        self.slots.len()
    }

    pub fn publish(&self, tid: usize, u: &'static Update<V>) {
        debug_assert_eq!(u.ts(), TS_NOT_SET);
        debug_assert_eq!(u.owner_tid as usize, tid);
        // SeqCst pairs with the query side: an announcement invisible to a
        // query's slot scan implies this store follows that scan in the
        // total order, so the global read below returns a value past the
        // query's increment and the operation stamps after the query.
        self.slots[tid].store(u as *const _ as *mut _, Ordering::SeqCst);
    }

    /// Installs the current global timestamp unless a helping query beat us
    /// to it; either way the timestamp is set on return.
    pub fn assign_ts(&self, u: &Update<V>, counters: &mut OpCounters) {
        let cur = self.global_ts.0.load(Ordering::SeqCst);
        counters.ts_cas_attempts += 1;
        let _ = u
            .timestamp
            .compare_exchange(TS_NOT_SET, cur, Ordering::AcqRel, Ordering::Acquire);
        debug_assert_ne!(u.ts(), TS_NOT_SET);
    }

    pub fn guarantee_ts(&self, u: &Update<V>, counters: &mut OpCounters) {
        if u.ts() == TS_NOT_SET {
            self.assign_ts(u, counters);
        }
    }

    pub fn unannounce(&self, tid: usize) {
        self.slots[tid].store(std::ptr::null_mut(), Ordering::Release);
    }

    pub fn acquire_query_ts(&self) -> Ts {
        self.global_ts.0.fetch_add(1, Ordering::SeqCst)
    }

    pub fn current_ts(&self) -> Ts {
        self.global_ts.0.load(Ordering::Acquire)
    }

    fn slot_load(&self, tid: usize) -> Option<&'static Update<V>> {
        let p = self.slots[tid].load(Ordering::SeqCst);
        if p.is_null() {
            None
        } else {
            Some(unsafe { &*p })
        }
    }

    /// Scans all slots for announcements stamped at or below `ts`. The
    /// first traversal of a query resolves unset timestamps itself (the
    /// resolved value is the incremented global, hence above `ts` and
    /// excluded); later traversals treat unset ones as future.
    pub fn gather(&self, ts: Ts, first_traversal: bool, counters: &mut OpCounters) -> LocalUpdates<V> {
        let mut gathered = vec![None; self.slots.len()];
        for (tid, out) in gathered.iter_mut().enumerate() {
            let Some(u) = self.slot_load(tid) else {
                continue;
            };
            counters.gather_scans += 1;
            let mut uts = u.ts();
            if uts == TS_NOT_SET {
                if !first_traversal {
                    continue;
                }
                self.guarantee_ts(u, counters);
                uts = u.ts();
            }
            if uts <= ts {
                *out = Some(u);
            }
        }
        LocalUpdates::Slots(gathered)
    }

    pub fn find_delete_of(
        &self,
        leaf: NodeRef<V>,
        owner_hint: Option<u16>,
        counters: &mut OpCounters,
    ) -> Option<&'static Update<V>> {
        let check = |tid: usize, counters: &mut OpCounters| -> Option<&'static Update<V>> {
            let u = self.slot_load(tid)?;
            counters.aux_registry_scans += 1;
            (u.kind == OpKind::Delete && u.leaf == leaf).then_some(u)
        };
        match owner_hint {
            Some(tid) => check(tid as usize, counters),
            None => (0..self.slots.len()).find_map(|tid| check(tid, counters)),
        }
    }

    pub fn find_insert_of(
        &self,
        key: Key,
        owner_hint: Option<u16>,
        counters: &mut OpCounters,
    ) -> Option<&'static Update<V>> {
        let check = |tid: usize, counters: &mut OpCounters| -> Option<&'static Update<V>> {
            let u = self.slot_load(tid)?;
            counters.aux_registry_scans += 1;
            (u.kind == OpKind::Insert && u.key() == key).then_some(u)
        };
        match owner_hint {
            Some(tid) => check(tid as usize, counters),
            None => (0..self.slots.len()).find_map(|tid| check(tid, counters)),
        }
    }

    /// Per-thread cells all start at timestamp 0: the creator's carries the
    /// initial contribution, the rest the identity.
    pub fn new_agg_field(
        &self,
        initial: AggValue,
        creator_tid: usize,
        identity: AggValue,
    ) -> AggField<V> {
        let cells = (0..self.slots.len())
            .map(|tid| {
                VersionedField::new(CellValue {
                    agg: if tid == creator_tid {
                        initial.clone()
                    } else {
                        identity.clone()
                    },
                    update: None,
                })
            })
            .collect();
        AggField::PerThread(cells)
    }

    /// Single-writer cell update: head value combined with (or less) the
    /// operation's leaf, written at the operation's timestamp with the
    /// announcement annotated.
    pub fn update_agg(
        &self,
        cell: &VersionedField<CellValue<V>>,
        spec: &AggregateSpec<V>,
        u: &'static Update<V>,
    ) {
        let cur = cell.read();
        let leaf = u.leaf_node();
        let leaf_agg = spec.leaf_value(leaf.key, leaf.user_value());
        let next = spec.apply_signed(&cur.agg, &leaf_agg, u.is_insert());
        cell.write(
            CellValue {
                agg: next,
                update: Some(u),
            },
            u.ts(),
        );
    }

    /// Subtree aggregate at `ts`: combine of all per-tid cells read at
    /// `ts`, plugging in any gathered in-flight operation whose leaf lies
    /// in the child's range and whose cell version does not already carry
    /// it.
    pub fn read_agg(
        &self,
        cells: &[VersionedField<CellValue<V>>],
        ts: Ts,
        local: &mut LocalUpdates<V>,
        parent_key: Key,
        spec: &AggregateSpec<V>,
        counters: &mut OpCounters,
    ) -> AggValue {
        let mut total = spec.identity();
        for (tid, cell) in cells.iter().enumerate() {
            let val = cell.versioned_read_counted(ts, &mut counters.chain_steps);
            let part = match local.slot(tid) {
                None => val.agg,
                Some(u) if u.is_done() => {
                    // The operation finished while we were reading: all its
                    // cell writes landed, so a fresh read is fully resolved
                    // (or the cell was never in its range).
                    local.clear_slot(tid);
                    cell.versioned_read_counted(ts, &mut counters.chain_steps)
                        .agg
                }
                Some(u) => {
                    let reflected = val.update.is_some_and(|w| std::ptr::eq(w, u));
                    if u.key() < parent_key && !reflected {
                        let leaf = u.leaf_node();
                        let leaf_agg = spec.leaf_value(leaf.key, leaf.user_value());
                        spec.apply_signed(&val.agg, &leaf_agg, u.is_insert())
                    } else {
                        val.agg
                    }
                }
            };
            total = spec.combine(&total, &part);
        }
        total
    }
}
