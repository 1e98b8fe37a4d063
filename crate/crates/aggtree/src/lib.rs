//! A concurrent external binary search tree augmented with subtractive
//! aggregate metadata, supporting snapshot-consistent aggregate queries
//! (rank, select, range sums, averages, percentiles) that run concurrently
//! with inserts and deletes.
//!
//! Two tree variants implement the same dictionary-plus-queries contract:
//!
//! * [`VariantKind::FastUpdate`] keeps effectual operations (successful
//!   inserts and deletes) on single-writer state: a per-thread announcement
//!   slot and per-thread versioned aggregate cells in every node. Queries
//!   pay for combining the per-thread cells.
//! * [`VariantKind::FastQuery`] serializes effectual operations through a
//!   timestamped announcement queue and keeps a single versioned aggregate
//!   field per node, maintained cooperatively (operations help their
//!   predecessors), so queries read one field per node.
//!
//! Every mutable node field is a timestamped version chain
//! ([`versioned::VersionedField`]); queries pin a timestamp once and read
//! the whole traversal at that logical time, plugging in the effect of
//! announced-but-unapplied operations.
//!
//! The [`verify`] module carries the test oracle, structural/aggregate
//! audits, an offline linearizability checker, and (behind the
//! `step-hooks` feature) a deterministic interleaving harness.

pub mod aggregate;
pub mod backbone;
pub mod basetree;
pub mod fastquery;
pub mod fastupdate;
pub mod queries;
pub mod verify;
pub mod versioned;

pub use aggregate::{AggValue, AggregateError, AggregateSpec};
pub use backbone::{
    StepHook, ThreadHandle, Tree, TreeConfig, TreeError, TreeValue, VariantKind,
};
pub use basetree::Direction;
pub use queries::{QueryDef, QueryError, QueryValue, RangeSpec};

/// Dictionary key. The extreme values are reserved for the tree sentinels.
pub type Key = i64;

/// Logical timestamp. Version chains are tagged with these; queries read at one.
pub type Ts = u64;

/// Timestamp value of an announcement whose timestamp has not been assigned yet.
pub const TS_NOT_SET: Ts = u64::MAX;

pub(crate) const KEY_NEG_INF: Key = i64::MIN;
pub(crate) const KEY_POS_INF: Key = i64::MAX;

/// True iff `k` may be stored by callers (the extreme values are sentinel-reserved).
pub fn is_user_key(k: Key) -> bool {
    k != KEY_NEG_INF && k != KEY_POS_INF
}
