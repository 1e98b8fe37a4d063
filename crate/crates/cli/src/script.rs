//! Op-script parsing and execution: one operation per line,
//! `ins K V | del K | get K | q NAME ARGS`, chosen for trivially diffable
//! fixtures. Parse errors carry their line number.

use std::fmt;

use aggtree::queries::QueryValue;
use aggtree::{Key, QueryError, RangeSpec, ThreadHandle};

#[derive(Clone, Debug, PartialEq)]
pub enum ScriptOp {
    Insert(Key, i64),
    Delete(Key),
    Get(Key),
    Query(QuerySpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySpec {
    pub name: String,
    pub args: Vec<i64>,
}

#[derive(Debug, PartialEq)]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ScriptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ScriptError {}

fn bad(line: usize, message: impl Into<String>) -> ScriptError {
    ScriptError {
        line,
        message: message.into(),
    }
}

fn parse_int(line: usize, tok: &str) -> Result<i64, ScriptError> {
    tok.parse()
        .map_err(|_| bad(line, format!("expected an integer, got {tok:?}")))
}

/// Parses a query spec like `rank 9` or `range 2 9`.
pub fn parse_query(line: usize, text: &str) -> Result<QuerySpec, ScriptError> {
    let mut toks = text.split_whitespace();
    let name = toks.next().ok_or_else(|| bad(line, "empty query"))?;
    let args: Vec<i64> = toks
        .map(|t| parse_int(line, t))
        .collect::<Result<_, _>>()?;
    let arity = match name {
        "rank" | "select" | "aggless" => 1,
        "range" | "avg" | "var" | "median" => 2,
        other => return Err(bad(line, format!("unknown query {other:?}"))),
    };
    if args.len() != arity {
        return Err(bad(
            line,
            format!("query {name} takes {arity} argument(s), got {}", args.len()),
        ));
    }
    Ok(QuerySpec {
        name: name.to_string(),
        args,
    })
}

/// Parses a newline-delimited op script. Blank lines and `#` comments are
/// skipped; line numbers are 1-based.
pub fn parse_script(text: &str) -> Result<Vec<ScriptOp>, ScriptError> {
    let mut ops = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut toks = trimmed.split_whitespace();
        let op = toks.next().unwrap();
        let rest: Vec<&str> = toks.collect();
        let parsed = match op {
            "ins" => {
                if rest.len() != 2 {
                    return Err(bad(line, "ins takes a key and a value"));
                }
                ScriptOp::Insert(parse_int(line, rest[0])?, parse_int(line, rest[1])?)
            }
            "del" => {
                if rest.len() != 1 {
                    return Err(bad(line, "del takes a key"));
                }
                ScriptOp::Delete(parse_int(line, rest[0])?)
            }
            "get" => {
                if rest.len() != 1 {
                    return Err(bad(line, "get takes a key"));
                }
                ScriptOp::Get(parse_int(line, rest[0])?)
            }
            "q" => ScriptOp::Query(parse_query(line, &rest.join(" "))?),
            other => return Err(bad(line, format!("unknown op {other:?}"))),
        };
        ops.push(parsed);
    }
    Ok(ops)
}

/// Runs a parsed query against a handle.
pub fn run_query_spec(
    handle: &mut ThreadHandle<i64>,
    q: &QuerySpec,
) -> Result<QueryValue, QueryError> {
    let range = |args: &[i64]| RangeSpec::new(args[0], args[1]);
    match q.name.as_str() {
        "rank" => handle.rank(q.args[0]).map(QueryValue::Int),
        "select" => handle.select(q.args[0]).map(QueryValue::Key),
        "aggless" => handle.agg_less_than(q.args[0]).map(QueryValue::Agg),
        "range" => range(&q.args).and_then(|r| handle.range_aggregate(r).map(QueryValue::Agg)),
        "avg" => range(&q.args).and_then(|r| handle.average_in_range(r).map(QueryValue::Float)),
        "var" => range(&q.args).and_then(|r| handle.variance_in_range(r).map(QueryValue::Float)),
        "median" => range(&q.args).and_then(|r| handle.median_key_in_range(r).map(QueryValue::Key)),
        other => unreachable!("parse_query admitted {other:?}"),
    }
}

/// Applies the script's operations in order; query lines are executed for
/// effect but their answers are discarded.
pub fn run_script(handle: &mut ThreadHandle<i64>, ops: &[ScriptOp]) {
    for op in ops {
        match op {
            ScriptOp::Insert(k, v) => {
                handle.insert(*k, *v);
            }
            ScriptOp::Delete(k) => {
                handle.delete(*k);
            }
            ScriptOp::Get(k) => {
                handle.contains(*k);
            }
            ScriptOp::Query(q) => {
                let _ = run_query_spec(handle, q);
            }
        }
    }
}
