//! Offline linearizability checker.
//!
//! Searches for an order of a recorded history's operations that respects
//! real-time precedence (an operation that responded before another was
//! invoked must come first) and replays legally through the sequential
//! oracle. Recorded timestamps prune the search: effectual operations must
//! appear in timestamp order, and a query must follow every effectual
//! operation stamped at or below its timestamp — the order the tree's
//! snapshot semantics define. Operations without a timestamp (`contains`
//! and failing updates) are constrained by real-time order and their
//! recorded results only.
//!
//! The search is exhaustive for small histories and falls back to
//! randomized-restart search with a node budget beyond that, reporting
//! budget exhaustion distinctly from a genuine non-linearizable verdict.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{self, AggregateError};
use crate::verify::history::{History, OpRecord, QueryOutcome};
use crate::verify::oracle::{query_values_match, SeqOracle};
use crate::Key;

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    /// A witness order (indices into the history) was found.
    Linearizable(Vec<usize>),
    /// The full search space was covered without finding an order.
    NotLinearizable,
    /// The search budget ran out before covering the space.
    BudgetExhausted,
}

#[derive(Debug, Clone)]
pub struct Budget {
    /// Histories up to this many operations are searched exhaustively.
    pub exhaustive_limit: usize,
    /// Node budget per search attempt beyond the exhaustive limit.
    pub node_budget: u64,
    /// Randomized restarts beyond the exhaustive limit.
    pub restarts: u32,
    pub seed: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            exhaustive_limit: 8,
            node_budget: 2_000_000,
            restarts: 16,
            seed: 0xC0FFEE,
        }
    }
}

#[derive(Debug)]
pub enum CheckError {
    /// The checker handles histories of at most 32 operations.
    TooLarge(usize),
    /// A recorded value could not be parsed back for replay.
    BadValue(String),
    Spec(AggregateError),
}

impl fmt::Display for CheckError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckError::TooLarge(n) => {
                write!(f, "history of {n} operations exceeds checker bound")
            }
            CheckError::BadValue(v) => write!(f, "unparseable recorded value {v:?}"),
            CheckError::Spec(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CheckError {}

#[derive(Clone, Debug)]
enum Replay {
    Insert { key: Key, value: i64, ok: bool },
    Delete { key: Key, removed: Option<i64> },
    Contains { key: Key, found: Option<i64> },
    Query {
        name: String,
        args: Vec<i64>,
        outcome: QueryOutcome,
    },
}

fn parse_value(s: &str) -> Result<i64, CheckError> {
    s.parse().map_err(|_| CheckError::BadValue(s.to_string()))
}

enum Undo {
    None,
    RemoveKey(Key),
    Reinsert(Key, i64),
}

struct Search<'a> {
    replays: &'a [Replay],
    invoke: &'a [u64],
    response: &'a [u64],
    eff_ts: &'a [Option<u64>],
    query_ts: &'a [Option<u64>],
    /// Dictionary state; mirrored into the oracle for query evaluation.
    map: BTreeMap<Key, i64>,
    oracle: SeqOracle<i64>,
    order: Vec<usize>,
    visited: HashSet<(u64, u64)>,
    nodes: u64,
    budget: &'a Budget,
    try_order: Vec<usize>,
}

impl Search<'_> {
    fn state_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (k, v) in &self.map {
            k.hash(&mut h);
            v.hash(&mut h);
        }
        h.finish()
    }

    fn candidate(&self, i: usize, remaining: u64) -> bool {
        let mut rem = remaining;
        while rem != 0 {
            let j = rem.trailing_zeros() as usize;
            rem &= rem - 1;
            if j == i {
                continue;
            }
            // Real-time precedence.
            if self.response[j] < self.invoke[i] {
                return false;
            }
            if let Some(t) = self.eff_ts[i] {
                if self.eff_ts[j].is_some_and(|tj| tj < t) {
                    return false;
                }
                if self.query_ts[j].is_some_and(|tj| tj < t) {
                    return false;
                }
            }
            if let Some(tq) = self.query_ts[i] {
                if self.eff_ts[j].is_some_and(|tj| tj <= tq) {
                    return false;
                }
            }
        }
        true
    }

    /// Applies op `i` iff its recorded result matches the sequential
    /// specification; returns the undo token.
    fn apply(&mut self, i: usize) -> Option<Undo> {
        match &self.replays[i] {
            Replay::Insert { key, value, ok } => {
                let would = !self.map.contains_key(key);
                if would != *ok {
                    return None;
                }
                if *ok {
                    self.map.insert(*key, *value);
                    self.oracle.insert(*key, *value);
                    Some(Undo::RemoveKey(*key))
                } else {
                    Some(Undo::None)
                }
            }
            Replay::Delete { key, removed } => {
                let actual = self.map.get(key).copied();
                if actual != *removed {
                    return None;
                }
                if let Some(v) = actual {
                    self.map.remove(key);
                    self.oracle.delete(*key);
                    Some(Undo::Reinsert(*key, v))
                } else {
                    Some(Undo::None)
                }
            }
            Replay::Contains { key, found } => {
                (self.map.get(key).copied() == *found).then_some(Undo::None)
            }
            Replay::Query { name, args, outcome } => {
                let actual = self.oracle.eval(name, args);
                let matches = match (&actual, outcome) {
                    (Ok(a), QueryOutcome::Ok(b)) => query_values_match(a, b),
                    (Err(e), QueryOutcome::Err(s)) => &e.to_string() == s,
                    _ => false,
                };
                matches.then_some(Undo::None)
            }
        }
    }

    fn undo(&mut self, u: Undo) {
        match u {
            Undo::None => {}
            Undo::RemoveKey(k) => {
                self.map.remove(&k);
                self.oracle.delete(k);
            }
            Undo::Reinsert(k, v) => {
                self.map.insert(k, v);
                self.oracle.insert(k, v);
            }
        }
    }

    fn dfs(&mut self, remaining: u64) -> Option<bool> {
        if remaining == 0 {
            return Some(true);
        }
        self.nodes += 1;
        if self.replays.len() > self.budget.exhaustive_limit
            && self.nodes > self.budget.node_budget
        {
            return None;
        }
        let key = (remaining, self.state_hash());
        if self.visited.contains(&key) {
            return Some(false);
        }
        for idx in 0..self.try_order.len() {
            let i = self.try_order[idx];
            if remaining & (1 << i) == 0 || !self.candidate(i, remaining) {
                continue;
            }
            let Some(undo) = self.apply(i) else { continue };
            self.order.push(i);
            match self.dfs(remaining & !(1 << i)) {
                Some(true) => return Some(true),
                Some(false) => {
                    self.order.pop();
                    self.undo(undo);
                }
                None => {
                    self.order.pop();
                    self.undo(undo);
                    return None;
                }
            }
        }
        self.visited.insert(key);
        Some(false)
    }
}

/// Checks a recorded history against the sequential dictionary-plus-queries
/// specification under `spec_name`'s aggregate.
pub fn check_linearizable(
    history: &History,
    spec_name: &str,
    budget: &Budget,
) -> Result<Verdict, CheckError> {
    let n = history.len();
    if n > 32 {
        return Err(CheckError::TooLarge(n));
    }
    if n == 0 {
        return Ok(Verdict::Linearizable(Vec::new()));
    }
    let spec = aggregate::by_name::<i64>(spec_name).map_err(CheckError::Spec)?;

    let mut replays = Vec::with_capacity(n);
    for e in &history.events {
        replays.push(match &e.op {
            OpRecord::Insert { key, value, ok } => Replay::Insert {
                key: *key,
                value: parse_value(value)?,
                ok: *ok,
            },
            OpRecord::Delete { key, removed } => Replay::Delete {
                key: *key,
                removed: removed.as_deref().map(parse_value).transpose()?,
            },
            OpRecord::Contains { key, found } => Replay::Contains {
                key: *key,
                found: found.as_deref().map(parse_value).transpose()?,
            },
            OpRecord::Query { name, args, outcome } => Replay::Query {
                name: name.clone(),
                args: args.clone(),
                outcome: outcome.clone(),
            },
        });
    }
    let invoke: Vec<u64> = history.events.iter().map(|e| e.invoke_seq).collect();
    let response: Vec<u64> = history.events.iter().map(|e| e.response_seq).collect();
    let eff_ts: Vec<Option<u64>> = history
        .events
        .iter()
        .map(|e| if e.is_effectual() { e.ts } else { None })
        .collect();
    let query_ts: Vec<Option<u64>> = history
        .events
        .iter()
        .map(|e| if e.is_query() { e.ts } else { None })
        .collect();

    let attempts = if n <= budget.exhaustive_limit {
        1
    } else {
        budget.restarts.max(1)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    for attempt in 0..attempts {
        let mut try_order: Vec<usize> = (0..n).collect();
        if attempt > 0 {
            try_order.shuffle(&mut rng);
        }
        let mut search = Search {
            replays: &replays,
            invoke: &invoke,
            response: &response,
            eff_ts: &eff_ts,
            query_ts: &query_ts,
            map: BTreeMap::new(),
            oracle: SeqOracle::new(spec.clone()),
            order: Vec::new(),
            visited: HashSet::new(),
            nodes: 0,
            budget,
            try_order,
        };
        match search.dfs(if n == 64 { u64::MAX } else { (1u64 << n) - 1 }) {
            Some(true) => return Ok(Verdict::Linearizable(search.order)),
            Some(false) => return Ok(Verdict::NotLinearizable),
            None => continue,
        }
    }
    Ok(Verdict::BudgetExhausted)
}
