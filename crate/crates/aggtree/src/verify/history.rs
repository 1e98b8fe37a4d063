//! Recorded operation histories, drainable as JSON lines.
//!
//! Every completed operation appends one event carrying its thread, global
//! invoke/response sequence numbers (the real-time order), its timestamp
//! when it has one (effectual operations and queries), and the operation
//! with its result. Values are recorded in their debug rendering so the
//! log is value-type agnostic.

use serde::{Deserialize, Serialize};

use crate::queries::QueryValue;
use crate::{Key, Ts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QueryOutcome {
    Ok(QueryValue),
    Err(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OpRecord {
    Insert { key: Key, value: String, ok: bool },
    Delete { key: Key, removed: Option<String> },
    Contains { key: Key, found: Option<String> },
    Query {
        name: String,
        args: Vec<i64>,
        outcome: QueryOutcome,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tid: usize,
    pub invoke_seq: u64,
    pub response_seq: u64,
    /// Timestamp for effectual operations and queries; absent for
    /// `contains` and failing updates.
    pub ts: Option<Ts>,
    pub op: OpRecord,
}

impl Event {
    /// An operation that modified the tree.
    pub fn is_effectual(&self) -> bool {
        matches!(
            &self.op,
            OpRecord::Insert { ok: true, .. } | OpRecord::Delete { removed: Some(_), .. }
        )
    }

    pub fn is_query(&self) -> bool {
        matches!(&self.op, OpRecord::Query { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub events: Vec<Event>,
}

impl History {
    pub fn new(events: Vec<Event>) -> Self {
        History { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_json_lines(s: &str) -> Result<Self, serde_json::Error> {
        let events = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<Event>, _>>()?;
        Ok(History { events })
    }
}
