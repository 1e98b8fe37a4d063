//! Per-operation instrumentation tallies, reset at operation start.
//!
//! These back the complexity checks: with path recording on, an effectual
//! operation's aggregate-update pass performs no version-chain hops
//! (`step3_chain_steps` stays 0); with owner tids in lock words, the
//! auxiliary announcement lookups examine at most one slot
//! (`aux_registry_scans`).

/// Counters for one operation.
#[derive(Clone, Copy, Debug, Default)]
pub struct OpCounters {
    /// Internal nodes visited by searches and traversals.
    pub nodes_visited: u64,
    /// Versions skipped by versioned reads (query side).
    pub chain_steps: u64,
    /// Versions skipped by an effectual operation's aggregate-update pass.
    pub step3_chain_steps: u64,
    /// Announcement-store entries examined by the auxiliary checks.
    pub aux_registry_scans: u64,
    /// Announcement-store entries examined by gathers.
    pub gather_scans: u64,
    /// Conditional aggregate-version writes attempted.
    pub agg_cas_attempts: u64,
    /// Announcement-timestamp compare-and-swaps attempted.
    pub ts_cas_attempts: u64,
    /// Whole-operation restarts (lock failures, revalidation).
    pub restarts: u64,
}

impl OpCounters {
    pub fn reset(&mut self) {
        *self = OpCounters::default();
    }

    /// Sums the other counter set into this one (workload aggregation).
    pub fn absorb(&mut self, other: &OpCounters) {
        self.nodes_visited += other.nodes_visited;
        self.chain_steps += other.chain_steps;
        self.step3_chain_steps += other.step3_chain_steps;
        self.aux_registry_scans += other.aux_registry_scans;
        self.gather_scans += other.gather_scans;
        self.agg_cas_attempts += other.agg_cas_attempts;
        self.ts_cas_attempts += other.ts_cas_attempts;
        self.restarts += other.restarts;
    }
}
