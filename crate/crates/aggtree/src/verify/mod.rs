//! Verification stack: the sequential oracle, structural and aggregate
//! audits, an offline linearizability checker over recorded histories,
//! instrumentation counters, and (in instrumented builds) a deterministic
//! interleaving scheduler.

pub mod audit;
pub mod checker;
pub mod counters;
pub mod history;
pub mod oracle;
pub mod stress;

#[cfg(feature = "step-hooks")]
pub mod interleave;

pub use audit::{audit_tree, AuditReport};
pub use checker::{check_linearizable, Budget, CheckError, Verdict};
pub use counters::OpCounters;
pub use history::{Event, History, OpRecord, QueryOutcome};
pub use oracle::SeqOracle;
