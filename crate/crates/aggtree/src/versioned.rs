//! Timestamp-tagged version chains.
//!
//! A `VersionedField` holds a linked chain of immutable versions, newest
//! first, with non-increasing timestamps down the chain and a timestamp-0
//! tail written at construction. Readers never block; a versioned read walks
//! to the first version at or below the requested timestamp. Plain writes
//! require external writer exclusivity (a held edge lock or per-thread cell
//! ownership); `write_if_timestamp` is safe under arbitrary concurrency and
//! links at most one version per (expected, new) timestamp pair across any
//! number of helpers.
//!
//! Chains are never pruned; they are reclaimed only when the field is dropped.

use std::sync::atomic::{AtomicPtr, Ordering};

use crate::Ts;

struct Version<T> {
    value: T,
    ts: Ts,
    next: *const Version<T>,
}

pub struct VersionedField<T> {
    head: AtomicPtr<Version<T>>,
}

unsafe impl<T: Send + Sync> Send for VersionedField<T> {}
unsafe impl<T: Send + Sync> Sync for VersionedField<T> {}

impl<T: Clone> VersionedField<T> {
    /// Creates the field with its initial version at timestamp 0.
    pub fn new(initial: T) -> Self {
        let v = Box::into_raw(Box::new(Version {
            value: initial,
            ts: 0,
            next: std::ptr::null(),
        }));
        VersionedField {
            head: AtomicPtr::new(v),
        }
    }

    fn head_ref(&self) -> &Version<T> {
        // The head pointer is never null and versions are never freed while
        // the field is alive.
        unsafe { &*self.head.load(Ordering::Acquire) }
    }

    /// Value of the most recent version.
    pub fn read(&self) -> T {
        self.head_ref().value.clone()
    }

    /// Value and timestamp of the most recent version, from a single
    /// version object (no torn read).
    pub fn timestamped_read(&self) -> (T, Ts) {
        let v = self.head_ref();
        (v.value.clone(), v.ts)
    }

    /// Value of the newest version with timestamp ≤ `ts`. The timestamp-0
    /// tail guarantees termination. When several versions share a timestamp
    /// the newest-linked one wins.
    pub fn versioned_read(&self, ts: Ts) -> T {
        let mut steps = 0;
        self.versioned_read_counted(ts, &mut steps)
    }

    /// As [`versioned_read`](Self::versioned_read), also counting skipped
    /// versions into `steps`.
    pub fn versioned_read_counted(&self, ts: Ts, steps: &mut u64) -> T {
        let mut v = self.head_ref();
        while v.ts > ts {
            *steps += 1;
            // Tail has ts 0 ≤ ts, so `next` is non-null here.
            v = unsafe { &*v.next };
        }
        v.value.clone()
    }

    /// Links a new head version. Caller must hold writer exclusivity for
    /// this field; `ts` must be ≥ the current head timestamp.
    pub fn write(&self, value: T, ts: Ts) {
        let cur = self.head.load(Ordering::Acquire);
        debug_assert!(unsafe { (*cur).ts } <= ts, "version timestamps regressed");
        let v = Box::into_raw(Box::new(Version {
            value,
            ts,
            next: cur,
        }));
        self.head.store(v, Ordering::Release);
    }

    /// Links `(value, new_ts)` iff the head timestamp is still `last_ts`,
    /// using a single compare-and-swap. Returns whether this caller's link
    /// landed. A failure means another thread moved the head first.
    pub fn write_if_timestamp(&self, last_ts: Ts, value: T, new_ts: Ts) -> bool {
        debug_assert!(new_ts > last_ts);
        let cur = self.head.load(Ordering::Acquire);
        if unsafe { (*cur).ts } != last_ts {
            return false;
        }
        let v = Box::into_raw(Box::new(Version {
            value,
            ts: new_ts,
            next: cur,
        }));
        match self
            .head
            .compare_exchange(cur, v, Ordering::AcqRel, Ordering::Acquire)
        {
            Ok(_) => true,
            Err(_) => {
                // Never published; safe to reclaim.
                drop(unsafe { Box::from_raw(v) });
                false
            }
        }
    }

    /// Chain rendered newest-first as `(timestamp, value)` pairs.
    pub fn dump(&self) -> Vec<(Ts, T)> {
        let mut out = Vec::new();
        let mut p = self.head.load(Ordering::Acquire) as *const Version<T>;
        while !p.is_null() {
            let v = unsafe { &*p };
            out.push((v.ts, v.value.clone()));
            p = v.next;
        }
        out
    }

    /// Visits every version value, newest first. Used by structural audits
    /// and the tree's teardown walk.
    pub(crate) fn for_each_version(&self, mut f: impl FnMut(&T)) {
        let mut p = self.head.load(Ordering::Acquire) as *const Version<T>;
        while !p.is_null() {
            let v = unsafe { &*p };
            f(&v.value);
            p = v.next;
        }
    }
}

impl<T> Drop for VersionedField<T> {
    fn drop(&mut self) {
        let mut p = *self.head.get_mut();
        while !p.is_null() {
            let boxed = unsafe { Box::from_raw(p) };
            p = boxed.next as *mut Version<T>;
        }
    }
}
