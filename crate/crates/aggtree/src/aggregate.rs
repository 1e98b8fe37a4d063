//! Additive/subtractive aggregate functions used as node metadata.
//!
//! An aggregate function maps a set of `(key, value)` pairs into a carrier
//! `B` via a per-element base function and a commutative, associative
//! `combine` (so disjoint sets combine pointwise). To support deletions the
//! carrier must form a group: `subtract` applies the inverse element.
//! Functions without an inverse (min, max) are rejected at construction.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Key, KEY_NEG_INF, KEY_POS_INF};

/// Aggregate carrier value: an integer, a float, or a fixed-arity tuple of such.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AggValue {
    Int(i64),
    Float(f64),
    Tuple(Vec<AggValue>),
}

impl AggValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            AggValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            AggValue::Float(v) => Some(*v),
            AggValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    /// Component access for tuple carriers.
    pub fn component(&self, idx: usize) -> Option<&AggValue> {
        match self {
            AggValue::Tuple(parts) => parts.get(idx),
            _ => None,
        }
    }

    /// Equality with a relative tolerance on float components. Integer
    /// components still compare exactly.
    pub fn approx_eq(&self, other: &AggValue, rel_tol: f64) -> bool {
        match (self, other) {
            (AggValue::Int(a), AggValue::Int(b)) => a == b,
            (AggValue::Float(a), AggValue::Float(b)) => {
                let scale = a.abs().max(b.abs()).max(1.0);
                (a - b).abs() <= rel_tol * scale
            }
            (AggValue::Tuple(xs), AggValue::Tuple(ys)) => {
                xs.len() == ys.len()
                    && xs.iter().zip(ys).all(|(x, y)| x.approx_eq(y, rel_tol))
            }
            _ => false,
        }
    }
}

impl fmt::Display for AggValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggValue::Int(v) => write!(f, "{v}"),
            AggValue::Float(v) => write!(f, "{v}"),
            AggValue::Tuple(parts) => {
                write!(f, "(")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{p}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AggregateError {
    /// The requested function has no inverse operation (e.g. min/max).
    NotSubtractive(String),
    /// No built-in spec registered under this name.
    UnknownSpec(String),
    /// The right operand has no inverse in the carrier (e.g. division by zero).
    NoInverse,
}

impl fmt::Display for AggregateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregateError::NotSubtractive(name) => {
                write!(f, "aggregate function {name:?} has no subtract operation")
            }
            AggregateError::UnknownSpec(name) => write!(f, "unknown aggregate spec {name:?}"),
            AggregateError::NoInverse => write!(f, "operand has no inverse element"),
        }
    }
}

impl std::error::Error for AggregateError {}

type LeafFn<V> = Arc<dyn Fn(Key, &V) -> AggValue + Send + Sync>;
type CombineFn = Arc<dyn Fn(&AggValue, &AggValue) -> AggValue + Send + Sync>;
type SubtractFn = Arc<dyn Fn(&AggValue, &AggValue) -> Result<AggValue, AggregateError> + Send + Sync>;

/// Where the element count lives inside this spec's carrier, if anywhere.
/// Rank/select/median queries need it.
#[derive(Clone, Copy, Debug)]
enum CountAccess {
    Whole,
    TupleIndex(usize),
}

/// A subtractive aggregate function: per-leaf base value, group operation,
/// inverse application, and the group identity.
pub struct AggregateSpec<V> {
    name: String,
    leaf_fn: LeafFn<V>,
    combine_fn: CombineFn,
    subtract_fn: SubtractFn,
    identity: AggValue,
    count_access: Option<CountAccess>,
}

impl<V> Clone for AggregateSpec<V> {
    fn clone(&self) -> Self {
        AggregateSpec {
            name: self.name.clone(),
            leaf_fn: Arc::clone(&self.leaf_fn),
            combine_fn: Arc::clone(&self.combine_fn),
            subtract_fn: Arc::clone(&self.subtract_fn),
            identity: self.identity.clone(),
            count_access: self.count_access,
        }
    }
}

impl<V> fmt::Debug for AggregateSpec<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AggregateSpec")
            .field("name", &self.name)
            .field("identity", &self.identity)
            .finish()
    }
}

impl<V> AggregateSpec<V> {
    /// Builds a spec from its parts. `subtract` is mandatory: a function
    /// without one cannot back node metadata (deletions could not update
    /// ancestors in place).
    pub fn from_parts(
        name: impl Into<String>,
        leaf_fn: LeafFn<V>,
        combine: CombineFn,
        subtract: Option<SubtractFn>,
        identity: AggValue,
    ) -> Result<Self, AggregateError> {
        let name = name.into();
        let subtract_fn = subtract.ok_or_else(|| AggregateError::NotSubtractive(name.clone()))?;
        Ok(AggregateSpec {
            name,
            leaf_fn,
            combine_fn: combine,
            subtract_fn,
            identity,
            count_access: None,
        })
    }

    fn with_count(mut self, access: CountAccess) -> Self {
        self.count_access = Some(access);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn identity(&self) -> AggValue {
        self.identity.clone()
    }

    /// Base value of a single `(key, value)` pair. Sentinel keys carry the
    /// identity so the sentinel leaves never contribute.
    pub fn leaf_value(&self, key: Key, value: &V) -> AggValue {
        if key == KEY_NEG_INF || key == KEY_POS_INF {
            return self.identity.clone();
        }
        (self.leaf_fn)(key, value)
    }

    pub fn combine(&self, a: &AggValue, b: &AggValue) -> AggValue {
        (self.combine_fn)(a, b)
    }

    pub fn subtract(&self, a: &AggValue, b: &AggValue) -> Result<AggValue, AggregateError> {
        (self.subtract_fn)(a, b)
    }

    /// `base ⊕ leaf` for an insertion, `base ⊖ leaf` for a deletion.
    ///
    /// The subtract contract (operands invertible, e.g. nonzero values under
    /// the product spec) is the caller's; a violation here is a bug upstream.
    pub(crate) fn apply_signed(&self, base: &AggValue, leaf: &AggValue, insert: bool) -> AggValue {
        if insert {
            self.combine(base, leaf)
        } else {
            self.subtract(base, leaf)
                .expect("subtractive contract violated while updating metadata")
        }
    }

    /// Combine of `leaf_value` over all items; the empty set folds to the
    /// identity so empty subtrees and empty ranges are uniform.
    pub fn fold<'a, I>(&self, items: I) -> AggValue
    where
        I: IntoIterator<Item = (Key, &'a V)>,
        V: 'a,
    {
        let mut acc = self.identity.clone();
        for (k, v) in items {
            let lv = self.leaf_value(k, v);
            acc = self.combine(&acc, &lv);
        }
        acc
    }

    /// Extracts the element count from an aggregate of this spec, when the
    /// spec carries one (count itself, or a tuple with a size component).
    pub fn count_component(&self, agg: &AggValue) -> Option<i64> {
        match self.count_access? {
            CountAccess::Whole => agg.as_int(),
            CountAccess::TupleIndex(i) => agg.component(i)?.as_int(),
        }
    }

    pub fn has_count(&self) -> bool {
        self.count_access.is_some()
    }
}

fn add_vals(a: &AggValue, b: &AggValue) -> AggValue {
    match (a, b) {
        (AggValue::Int(x), AggValue::Int(y)) => AggValue::Int(x + y),
        (AggValue::Float(x), AggValue::Float(y)) => AggValue::Float(x + y),
        (AggValue::Tuple(xs), AggValue::Tuple(ys)) => {
            assert_eq!(xs.len(), ys.len(), "aggregate carrier arity mismatch");
            AggValue::Tuple(xs.iter().zip(ys).map(|(x, y)| add_vals(x, y)).collect())
        }
        _ => panic!("aggregate carrier mismatch: {a:?} vs {b:?}"),
    }
}

fn sub_vals(a: &AggValue, b: &AggValue) -> Result<AggValue, AggregateError> {
    Ok(match (a, b) {
        (AggValue::Int(x), AggValue::Int(y)) => AggValue::Int(x - y),
        (AggValue::Float(x), AggValue::Float(y)) => AggValue::Float(x - y),
        (AggValue::Tuple(xs), AggValue::Tuple(ys)) => {
            assert_eq!(xs.len(), ys.len(), "aggregate carrier arity mismatch");
            let parts: Result<Vec<_>, _> =
                xs.iter().zip(ys).map(|(x, y)| sub_vals(x, y)).collect();
            AggValue::Tuple(parts?)
        }
        _ => panic!("aggregate carrier mismatch: {a:?} vs {b:?}"),
    })
}

fn arc_add() -> CombineFn {
    Arc::new(add_vals)
}

fn arc_sub() -> SubtractFn {
    Arc::new(sub_vals)
}

/// Values usable by the built-in value-based specs.
pub trait NumericValue {
    fn as_num(&self) -> i64;
}

impl NumericValue for i64 {
    fn as_num(&self) -> i64 {
        *self
    }
}

/// Element count. `⊕ = +` over the integers.
pub fn count_spec<V>() -> AggregateSpec<V> {
    AggregateSpec::from_parts(
        "count",
        Arc::new(|_, _: &V| AggValue::Int(1)),
        arc_add(),
        Some(arc_sub()),
        AggValue::Int(0),
    )
    .unwrap()
    .with_count(CountAccess::Whole)
}

/// Sum of keys.
pub fn key_sum_spec<V>() -> AggregateSpec<V> {
    AggregateSpec::from_parts(
        "keysum",
        Arc::new(|k, _: &V| AggValue::Int(k)),
        arc_add(),
        Some(arc_sub()),
        AggValue::Int(0),
    )
    .unwrap()
}

/// Sum of values.
pub fn value_sum_spec<V: NumericValue>() -> AggregateSpec<V> {
    AggregateSpec::from_parts(
        "valsum",
        Arc::new(|_, v: &V| AggValue::Int(v.as_num())),
        arc_add(),
        Some(arc_sub()),
        AggValue::Int(0),
    )
    .unwrap()
}

/// Sum of squared values.
pub fn value_sum_sq_spec<V: NumericValue>() -> AggregateSpec<V> {
    AggregateSpec::from_parts(
        "sumsq",
        Arc::new(|_, v: &V| {
            let x = v.as_num();
            AggValue::Int(x * x)
        }),
        arc_add(),
        Some(arc_sub()),
        AggValue::Int(0),
    )
    .unwrap()
}

/// Product of values over a float carrier. Values must be nonzero: zero has
/// no multiplicative inverse, so deleting it could not be applied in place.
pub fn value_product_spec<V: NumericValue>() -> AggregateSpec<V> {
    AggregateSpec::from_parts(
        "product",
        Arc::new(|_, v: &V| AggValue::Float(v.as_num() as f64)),
        Arc::new(|a, b| match (a, b) {
            (AggValue::Float(x), AggValue::Float(y)) => AggValue::Float(x * y),
            _ => panic!("product spec expects float carrier"),
        }),
        Some(Arc::new(|a, b| match (a, b) {
            (AggValue::Float(x), AggValue::Float(y)) => {
                if *y == 0.0 {
                    Err(AggregateError::NoInverse)
                } else {
                    Ok(AggValue::Float(x / y))
                }
            }
            _ => panic!("product spec expects float carrier"),
        })),
        AggValue::Float(1.0),
    )
    .unwrap()
}

/// `⟨sum, size⟩` tuple over values; backs average-in-range queries and
/// provides the size component rank/select need.
pub fn sum_size_spec<V: NumericValue>() -> AggregateSpec<V> {
    AggregateSpec::from_parts(
        "sumsize",
        Arc::new(|_, v: &V| AggValue::Tuple(vec![AggValue::Int(v.as_num()), AggValue::Int(1)])),
        arc_add(),
        Some(arc_sub()),
        AggValue::Tuple(vec![AggValue::Int(0), AggValue::Int(0)]),
    )
    .unwrap()
    .with_count(CountAccess::TupleIndex(1))
}

/// `⟨sum, sum of squares, size⟩` tuple; backs variance-in-range queries.
pub fn stats_spec<V: NumericValue>() -> AggregateSpec<V> {
    AggregateSpec::from_parts(
        "stats",
        Arc::new(|_, v: &V| {
            let x = v.as_num();
            AggValue::Tuple(vec![
                AggValue::Int(x),
                AggValue::Int(x * x),
                AggValue::Int(1),
            ])
        }),
        arc_add(),
        Some(arc_sub()),
        AggValue::Tuple(vec![AggValue::Int(0), AggValue::Int(0), AggValue::Int(0)]),
    )
    .unwrap()
    .with_count(CountAccess::TupleIndex(2))
}

/// Looks up a built-in spec by its CLI/config name.
pub fn by_name<V: NumericValue>(name: &str) -> Result<AggregateSpec<V>, AggregateError> {
    match name {
        "count" => Ok(count_spec()),
        "keysum" => Ok(key_sum_spec()),
        "valsum" => Ok(value_sum_spec()),
        "sumsq" => Ok(value_sum_sq_spec()),
        "product" => Ok(value_product_spec()),
        "sumsize" => Ok(sum_size_spec()),
        "stats" => Ok(stats_spec()),
        "min" | "max" => Err(AggregateError::NotSubtractive(name.to_string())),
        other => Err(AggregateError::UnknownSpec(other.to_string())),
    }
}
