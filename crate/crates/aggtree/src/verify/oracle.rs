//! Sequential reference: a sorted map plus the same aggregate spec,
//! evaluating every operation and query with the formulas the tree must
//! realize. Differential tests replay operation streams through both; the
//! linearizability checker replays candidate orders through this.

use std::collections::BTreeMap;

use crate::aggregate::{AggValue, AggregateSpec};
use crate::backbone::TreeValue;
use crate::queries::{QueryError, QueryValue, RangeSpec};
use crate::Key;

pub struct SeqOracle<V> {
    map: BTreeMap<Key, V>,
    spec: AggregateSpec<V>,
}

impl<V: TreeValue> SeqOracle<V> {
    pub fn new(spec: AggregateSpec<V>) -> Self {
        SeqOracle {
            map: BTreeMap::new(),
            spec,
        }
    }

    pub fn spec(&self) -> &AggregateSpec<V> {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = Key> + '_ {
        self.map.keys().copied()
    }

    pub fn insert(&mut self, key: Key, value: V) -> bool {
        match self.map.entry(key) {
            std::collections::btree_map::Entry::Occupied(_) => false,
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(value);
                true
            }
        }
    }

    pub fn delete(&mut self, key: Key) -> Option<V> {
        self.map.remove(&key)
    }

    pub fn contains(&self, key: Key) -> Option<&V> {
        self.map.get(&key)
    }

    pub fn fold_all(&self) -> AggValue {
        self.spec.fold(self.map.iter().map(|(k, v)| (*k, v)))
    }

    pub fn agg_less_than(&self, k: Key) -> AggValue {
        self.spec.fold(self.map.range(..k).map(|(k, v)| (*k, v)))
    }

    pub fn rank(&self, k: Key) -> Result<i64, QueryError> {
        if !self.spec.has_count() {
            return Err(QueryError::CountUnavailable);
        }
        Ok(self.map.range(..k).count() as i64)
    }

    pub fn select(&self, index: i64) -> Result<Key, QueryError> {
        if !self.spec.has_count() {
            return Err(QueryError::CountUnavailable);
        }
        if index < 0 || index as usize >= self.map.len() {
            return Err(QueryError::IndexOutOfRange(index));
        }
        Ok(*self.map.keys().nth(index as usize).unwrap())
    }

    pub fn range_aggregate(&self, r: RangeSpec) -> Result<AggValue, QueryError> {
        Ok(self
            .spec
            .fold(self.map.range(r.low()..r.up()).map(|(k, v)| (*k, v))))
    }

    fn range_stats(&self, r: RangeSpec) -> Result<(AggValue, i64), QueryError> {
        if !self.spec.has_count() {
            return Err(QueryError::CountUnavailable);
        }
        let agg = self.range_aggregate(r)?;
        let n = self
            .spec
            .count_component(&agg)
            .ok_or(QueryError::CountUnavailable)?;
        Ok((agg, n))
    }

    pub fn average_in_range(&self, r: RangeSpec) -> Result<f64, QueryError> {
        let (agg, n) = self.range_stats(r)?;
        if n == 0 {
            return Err(QueryError::EmptyRange);
        }
        let sum = agg
            .component(0)
            .and_then(|c| c.as_float())
            .ok_or(QueryError::SpecMismatch("a ⟨sum, …⟩ tuple component"))?;
        Ok(sum / n as f64)
    }

    pub fn variance_in_range(&self, r: RangeSpec) -> Result<f64, QueryError> {
        let (agg, n) = self.range_stats(r)?;
        if n == 0 {
            return Err(QueryError::EmptyRange);
        }
        let sum = agg
            .component(0)
            .and_then(|c| c.as_float())
            .ok_or(QueryError::SpecMismatch("a ⟨sum, …⟩ tuple component"))?;
        let sum_sq = agg
            .component(1)
            .and_then(|c| c.as_float())
            .ok_or(QueryError::SpecMismatch("a ⟨sum, …⟩ tuple component"))?;
        let mean = sum / n as f64;
        Ok(sum_sq / n as f64 - mean * mean)
    }

    /// Median key with the upper-middle index `rank_low + (rank_up - rank_low) / 2`.
    pub fn median_key_in_range(&self, r: RangeSpec) -> Result<Key, QueryError> {
        let rank_low = self.rank(r.low())?;
        let rank_up = self.rank(r.up())?;
        if rank_up == rank_low {
            return Err(QueryError::EmptyRange);
        }
        self.select(rank_low + (rank_up - rank_low) / 2)
    }

    /// Evaluates a query by its recorded name and arguments, mirroring the
    /// tree's query surface.
    pub fn eval(&self, name: &str, args: &[i64]) -> Result<QueryValue, QueryError> {
        let range = |args: &[i64]| RangeSpec::new(args[0], args[1]);
        match (name, args.len()) {
            ("aggless", 1) => Ok(QueryValue::Agg(self.agg_less_than(args[0]))),
            ("rank", 1) => self.rank(args[0]).map(QueryValue::Int),
            ("select", 1) => self.select(args[0]).map(QueryValue::Key),
            ("range", 2) => self.range_aggregate(range(args)?).map(QueryValue::Agg),
            ("avg", 2) => self.average_in_range(range(args)?).map(QueryValue::Float),
            ("var", 2) => self.variance_in_range(range(args)?).map(QueryValue::Float),
            ("median", 2) => self.median_key_in_range(range(args)?).map(QueryValue::Key),
            _ => Err(QueryError::SpecMismatch("a known query name")),
        }
    }
}

/// Result comparison: exact for integers and keys, relative 1e-9 for
/// floats (concurrent re-association of float carriers).
pub fn query_values_match(a: &QueryValue, b: &QueryValue) -> bool {
    match (a, b) {
        (QueryValue::Float(x), QueryValue::Float(y)) => {
            let scale = x.abs().max(y.abs()).max(1.0);
            (x - y).abs() <= 1e-9 * scale
        }
        (QueryValue::Agg(x), QueryValue::Agg(y)) => x.approx_eq(y, 1e-9),
        _ => a == b,
    }
}
