//! Query library built on the traversal template: prefix aggregates,
//! rank/select, range aggregates, statistical queries over tuple carriers,
//! and the chained median-in-range.
//!
//! A query is one or more stages run at a single pinned timestamp. Each
//! stage issues independent traversals (differing only in their
//! descend-right decision) and computes a value from their outputs; a later
//! stage's traversals may depend on the previous stage's value.
//!
//! Range boundaries are half-open `[low, up)` throughout: the prefix
//! aggregate below a key is the primitive, and half-open ranges compose
//! cleanly under the subtract operation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::aggregate::{AggValue, AggregateSpec};
use crate::backbone::{ThreadHandle, TraversalOutput, TreeValue};
use crate::{is_user_key, Key};

/// A query's result value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum QueryValue {
    Agg(AggValue),
    Int(i64),
    Key(Key),
    Float(f64),
}

impl fmt::Display for QueryValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryValue::Agg(a) => write!(f, "{a}"),
            QueryValue::Int(v) => write!(f, "{v}"),
            QueryValue::Key(k) => write!(f, "{k}"),
            QueryValue::Float(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QueryError {
    /// select index outside `0..size`.
    IndexOutOfRange(i64),
    /// Range holds no elements where one is required.
    EmptyRange,
    /// The tree's aggregate carries no element count.
    CountUnavailable,
    /// The tree's aggregate does not have the shape this query needs.
    SpecMismatch(&'static str),
    /// Range bounds out of order or reserved.
    InvalidRange { low: Key, up: Key },
    /// Carrier arithmetic failed (e.g. subtracting a non-invertible value).
    Aggregate(String),
}

impl fmt::Display for QueryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryError::IndexOutOfRange(i) => write!(f, "index {i} out of range"),
            QueryError::EmptyRange => write!(f, "empty key range"),
            QueryError::CountUnavailable => {
                write!(f, "tree aggregate carries no element count")
            }
            QueryError::SpecMismatch(need) => write!(f, "tree aggregate lacks {need}"),
            QueryError::InvalidRange { low, up } => {
                write!(f, "invalid range [{low}, {up})")
            }
            QueryError::Aggregate(e) => write!(f, "aggregate arithmetic failed: {e}"),
        }
    }
}

impl std::error::Error for QueryError {}

/// Half-open key range `[low, up)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RangeSpec {
    low: Key,
    up: Key,
}

impl RangeSpec {
    pub fn new(low: Key, up: Key) -> Result<Self, QueryError> {
        if low > up || !is_user_key(low) {
            return Err(QueryError::InvalidRange { low, up });
        }
        Ok(RangeSpec { low, up })
    }

    pub fn low(&self) -> Key {
        self.low
    }

    pub fn up(&self) -> Key {
        self.up
    }
}

/// Descend-right decision: takes the aggregate up to (excluding) the
/// current node's key and the node's key.
pub type DescendRight = Box<dyn Fn(&AggValue, Key) -> bool + Send + Sync>;

type BuildFn = Box<dyn Fn(Option<&QueryValue>) -> Vec<DescendRight> + Send + Sync>;
type ComputeFn =
    Box<dyn Fn(Option<&QueryValue>, &[TraversalOutput]) -> Result<QueryValue, QueryError> + Send + Sync>;

pub(crate) struct QueryStage {
    build: BuildFn,
    compute: ComputeFn,
}

impl QueryStage {
    pub fn build_traversals(&self, carry: Option<&QueryValue>) -> Vec<DescendRight> {
        (self.build)(carry)
    }

    pub fn compute(
        &self,
        carry: Option<&QueryValue>,
        outputs: &[TraversalOutput],
    ) -> Result<QueryValue, QueryError> {
        (self.compute)(carry, outputs)
    }
}

/// A chain of one or more query stages, evaluated serially at one shared
/// timestamp; traversals within a stage are independent of each other.
pub struct QueryDef {
    name: String,
    args: Vec<i64>,
    stages: Vec<QueryStage>,
}

impl QueryDef {
    pub fn new(name: impl Into<String>, args: Vec<i64>) -> Self {
        QueryDef {
            name: name.into(),
            args,
            stages: Vec::new(),
        }
    }

    pub fn stage(
        mut self,
        build: impl Fn(Option<&QueryValue>) -> Vec<DescendRight> + Send + Sync + 'static,
        compute: impl Fn(Option<&QueryValue>, &[TraversalOutput]) -> Result<QueryValue, QueryError>
            + Send
            + Sync
            + 'static,
    ) -> Self {
        self.stages.push(QueryStage {
            build: Box::new(build),
            compute: Box::new(compute),
        });
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn args(&self) -> &[i64] {
        &self.args
    }

    pub(crate) fn stages(&self) -> &[QueryStage] {
        &self.stages
    }
}

/// Key-search descent: right iff the searched key is at or above the
/// node's key.
fn descend_to_key(k: Key) -> DescendRight {
    Box::new(move |_, node_key| k >= node_key)
}

/// Landing-leaf inclusion for a prefix aggregate below `k`: the template's
/// skipped aggregate excludes the landing leaf, which belongs iff it is
/// logically present with a key below `k`.
fn prefix_value<V: TreeValue>(spec: &AggregateSpec<V>, out: &TraversalOutput, k: Key) -> AggValue {
    if out.leaf.present && !out.leaf.is_sentinel && out.leaf.key < k {
        spec.combine(&out.skipped, &out.leaf.leaf_agg)
    } else {
        out.skipped.clone()
    }
}

/// Aggregate over all keys strictly below `k`.
pub fn agg_less_than_def<V: TreeValue>(spec: &AggregateSpec<V>, k: Key) -> QueryDef {
    let spec = spec.clone();
    QueryDef::new("aggless", vec![k]).stage(
        move |_| vec![descend_to_key(k)],
        move |_, outs| Ok(QueryValue::Agg(prefix_value(&spec, &outs[0], k))),
    )
}

/// Number of keys strictly below `k`.
pub fn rank_def<V: TreeValue>(spec: &AggregateSpec<V>, k: Key) -> Result<QueryDef, QueryError> {
    if !spec.has_count() {
        return Err(QueryError::CountUnavailable);
    }
    let spec = spec.clone();
    Ok(QueryDef::new("rank", vec![k]).stage(
        move |_| vec![descend_to_key(k)],
        move |_, outs| {
            let agg = prefix_value(&spec, &outs[0], k);
            Ok(QueryValue::Int(
                spec.count_component(&agg).ok_or(QueryError::CountUnavailable)?,
            ))
        },
    ))
}

fn select_descend<V: TreeValue>(spec: &AggregateSpec<V>, index: i64) -> DescendRight {
    let spec = spec.clone();
    Box::new(move |up_to, _| {
        let below = spec.count_component(up_to).unwrap_or(0);
        index >= below
    })
}

fn select_compute(index: i64, outs: &[TraversalOutput]) -> Result<QueryValue, QueryError> {
    let leaf = &outs[0].leaf;
    if leaf.is_sentinel || !leaf.present {
        return Err(QueryError::IndexOutOfRange(index));
    }
    Ok(QueryValue::Key(leaf.key))
}

/// The `index`-th smallest key (0-based).
pub fn select_def<V: TreeValue>(
    spec: &AggregateSpec<V>,
    index: i64,
) -> Result<QueryDef, QueryError> {
    if !spec.has_count() {
        return Err(QueryError::CountUnavailable);
    }
    let descend_spec = spec.clone();
    Ok(QueryDef::new("select", vec![index]).stage(
        move |_| vec![select_descend(&descend_spec, index)],
        move |_, outs| select_compute(index, outs),
    ))
}

/// Aggregate over the half-open range: two independent prefix traversals
/// subtracted.
pub fn range_aggregate_def<V: TreeValue>(spec: &AggregateSpec<V>, r: RangeSpec) -> QueryDef {
    let spec = spec.clone();
    QueryDef::new("range", vec![r.low, r.up]).stage(
        move |_| vec![descend_to_key(r.up), descend_to_key(r.low)],
        move |_, outs| {
            let up_val = prefix_value(&spec, &outs[0], r.up);
            let low_val = prefix_value(&spec, &outs[1], r.low);
            spec.subtract(&up_val, &low_val)
                .map(QueryValue::Agg)
                .map_err(|e| QueryError::Aggregate(e.to_string()))
        },
    )
}

fn tuple_stat(agg: &AggValue, idx: usize) -> Result<f64, QueryError> {
    agg.component(idx)
        .and_then(|c| c.as_float())
        .ok_or(QueryError::SpecMismatch("a ⟨sum, …⟩ tuple component"))
}

/// Mean of the values in the range; requires a tuple carrier whose first
/// component is the value sum and which carries a count.
pub fn average_in_range_def<V: TreeValue>(
    spec: &AggregateSpec<V>,
    r: RangeSpec,
) -> Result<QueryDef, QueryError> {
    if !spec.has_count() {
        return Err(QueryError::CountUnavailable);
    }
    let spec = spec.clone();
    Ok(QueryDef::new("avg", vec![r.low, r.up]).stage(
        move |_| vec![descend_to_key(r.up), descend_to_key(r.low)],
        move |_, outs| {
            let up_val = prefix_value(&spec, &outs[0], r.up);
            let low_val = prefix_value(&spec, &outs[1], r.low);
            let range = spec
                .subtract(&up_val, &low_val)
                .map_err(|e| QueryError::Aggregate(e.to_string()))?;
            let n = spec.count_component(&range).ok_or(QueryError::CountUnavailable)?;
            if n == 0 {
                return Err(QueryError::EmptyRange);
            }
            let sum = tuple_stat(&range, 0)?;
            Ok(QueryValue::Float(sum / n as f64))
        },
    ))
}

/// Population variance of the values in the range; requires a
/// ⟨sum, sum of squares, size⟩ carrier.
pub fn variance_in_range_def<V: TreeValue>(
    spec: &AggregateSpec<V>,
    r: RangeSpec,
) -> Result<QueryDef, QueryError> {
    if !spec.has_count() {
        return Err(QueryError::CountUnavailable);
    }
    let spec = spec.clone();
    Ok(QueryDef::new("var", vec![r.low, r.up]).stage(
        move |_| vec![descend_to_key(r.up), descend_to_key(r.low)],
        move |_, outs| {
            let up_val = prefix_value(&spec, &outs[0], r.up);
            let low_val = prefix_value(&spec, &outs[1], r.low);
            let range = spec
                .subtract(&up_val, &low_val)
                .map_err(|e| QueryError::Aggregate(e.to_string()))?;
            let n = spec.count_component(&range).ok_or(QueryError::CountUnavailable)?;
            if n == 0 {
                return Err(QueryError::EmptyRange);
            }
            let sum = tuple_stat(&range, 0)?;
            let sum_sq = tuple_stat(&range, 1)?;
            let mean = sum / n as f64;
            Ok(QueryValue::Float(sum_sq / n as f64 - mean * mean))
        },
    ))
}

/// Median key of the range: a two-stage chain. Stage one runs both rank
/// traversals and computes `rank_low + (rank_up - rank_low) / 2` (integer
/// division, so even-sized ranges yield the upper middle); stage two
/// selects at that index. Both stages read at the same timestamp.
pub fn median_key_in_range_def<V: TreeValue>(
    spec: &AggregateSpec<V>,
    r: RangeSpec,
) -> Result<QueryDef, QueryError> {
    if !spec.has_count() {
        return Err(QueryError::CountUnavailable);
    }
    let rank_spec = spec.clone();
    let sel_spec = spec.clone();
    Ok(QueryDef::new("median", vec![r.low, r.up])
        .stage(
            move |_| vec![descend_to_key(r.up), descend_to_key(r.low)],
            move |_, outs| {
                let up_val = prefix_value(&rank_spec, &outs[0], r.up);
                let low_val = prefix_value(&rank_spec, &outs[1], r.low);
                let rank_up = rank_spec
                    .count_component(&up_val)
                    .ok_or(QueryError::CountUnavailable)?;
                let rank_low = rank_spec
                    .count_component(&low_val)
                    .ok_or(QueryError::CountUnavailable)?;
                if rank_up == rank_low {
                    return Err(QueryError::EmptyRange);
                }
                Ok(QueryValue::Int(rank_low + (rank_up - rank_low) / 2))
            },
        )
        .stage(
            move |carry| {
                let Some(QueryValue::Int(index)) = carry else {
                    unreachable!("median stage chaining")
                };
                vec![select_descend(&sel_spec, *index)]
            },
            move |carry, outs| {
                let Some(QueryValue::Int(index)) = carry else {
                    unreachable!("median stage chaining")
                };
                select_compute(*index, outs)
            },
        ))
}

impl<V: TreeValue> ThreadHandle<V> {
    /// Aggregate over all keys strictly below `k`.
    pub fn agg_less_than(&mut self, k: Key) -> Result<AggValue, QueryError> {
        let def = agg_less_than_def(self.tree().spec(), k);
        match self.run_query(&def)? {
            QueryValue::Agg(a) => Ok(a),
            other => unreachable!("aggless produced {other:?}"),
        }
    }

    /// Number of keys strictly below `k`.
    pub fn rank(&mut self, k: Key) -> Result<i64, QueryError> {
        let def = rank_def(self.tree().spec(), k)?;
        match self.run_query(&def)? {
            QueryValue::Int(n) => Ok(n),
            other => unreachable!("rank produced {other:?}"),
        }
    }

    /// The `index`-th smallest key (0-based).
    pub fn select(&mut self, index: i64) -> Result<Key, QueryError> {
        let def = select_def(self.tree().spec(), index)?;
        match self.run_query(&def)? {
            QueryValue::Key(k) => Ok(k),
            other => unreachable!("select produced {other:?}"),
        }
    }

    /// Aggregate over the half-open range.
    pub fn range_aggregate(&mut self, r: RangeSpec) -> Result<AggValue, QueryError> {
        let def = range_aggregate_def(self.tree().spec(), r);
        match self.run_query(&def)? {
            QueryValue::Agg(a) => Ok(a),
            other => unreachable!("range produced {other:?}"),
        }
    }

    pub fn average_in_range(&mut self, r: RangeSpec) -> Result<f64, QueryError> {
        let def = average_in_range_def(self.tree().spec(), r)?;
        match self.run_query(&def)? {
            QueryValue::Float(v) => Ok(v),
            other => unreachable!("avg produced {other:?}"),
        }
    }

    pub fn variance_in_range(&mut self, r: RangeSpec) -> Result<f64, QueryError> {
        let def = variance_in_range_def(self.tree().spec(), r)?;
        match self.run_query(&def)? {
            QueryValue::Float(v) => Ok(v),
            other => unreachable!("var produced {other:?}"),
        }
    }

    pub fn median_key_in_range(&mut self, r: RangeSpec) -> Result<Key, QueryError> {
        let def = median_key_in_range_def(self.tree().spec(), r)?;
        match self.run_query(&def)? {
            QueryValue::Key(k) => Ok(k),
            other => unreachable!("median produced {other:?}"),
        }
    }
}
