//! Managed function state, partial states held by lessees and their
//! consolidation through combining functions.

use std::collections::BTreeMap;
use std::fmt;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::StateError;
use crate::model::{InstanceAddress, SequencedMessage};

/// Relative tolerance for floating-point consolidation checks.
pub const FLOAT_REL_TOLERANCE: f64 = 1e-9;

/// Default cap on holistic update lists.
pub const DEFAULT_LIST_LIMIT: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Int(i64),
    Float(f64),
    /// Partial representation of an average.
    SumCount {
        sum: f64,
        count: u64,
    },
}

impl Value {
    pub fn as_f64(&self) -> f64 {
        match self {
            Value::Int(v) => *v as f64,
            Value::Float(v) => *v,
            Value::SumCount { sum, count } => {
                if *count == 0 {
                    0.0
                } else {
                    sum / *count as f64
                }
            }
        }
    }

    /// Equality up to [`FLOAT_REL_TOLERANCE`] for float components; exact otherwise.
    pub fn approx_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => rel_eq(*a, *b),
            (Value::SumCount { sum: a, count: n }, Value::SumCount { sum: b, count: m }) => n == m && rel_eq(*a, *b),
            _ => false,
        }
    }
}

pub fn rel_eq(a: f64, b: f64) -> bool {
    if a == b {
        return true;
    }
    let scale = a.abs().max(b.abs()).max(1.0);
    (a - b).abs() <= FLOAT_REL_TOLERANCE * scale
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ManagedState {
    /// `None` is the empty value (identity of every combining function).
    Value(Option<Value>),
    List(Vec<Value>),
    Map(BTreeMap<u64, Value>),
}

impl ManagedState {
    pub fn variant(&self) -> &'static str {
        match self {
            ManagedState::Value(_) => "ValueState",
            ManagedState::List(_) => "ListState",
            ManagedState::Map(_) => "MapState",
        }
    }

    /// An empty state of the same variant.
    pub fn empty_like(&self) -> ManagedState {
        match self {
            ManagedState::Value(_) => ManagedState::Value(None),
            ManagedState::List(_) => ManagedState::List(Vec::new()),
            ManagedState::Map(_) => ManagedState::Map(BTreeMap::new()),
        }
    }

    pub fn size_bytes(&self) -> u64 {
        fn value_bytes(v: &Value) -> u64 {
            match v {
                Value::Int(_) | Value::Float(_) => 8,
                Value::SumCount { .. } => 16,
            }
        }
        match self {
            ManagedState::Value(v) => v.as_ref().map_or(0, value_bytes),
            ManagedState::List(l) => l.iter().map(value_bytes).sum(),
            ManagedState::Map(m) => m.values().map(|v| 8 + value_bytes(v)).sum(),
        }
    }

    pub fn approx_eq(&self, other: &ManagedState) -> bool {
        match (self, other) {
            (ManagedState::Value(a), ManagedState::Value(b)) => match (a, b) {
                (None, None) => true,
                (Some(a), Some(b)) => a.approx_eq(b),
                _ => false,
            },
            (ManagedState::List(a), ManagedState::List(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.approx_eq(y))
            }
            (ManagedState::Map(a), ManagedState::Map(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|((k, x), (j, y))| k == j && x.approx_eq(y))
            }
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregateClass {
    /// Bounded partials merged with an associative, commutative combine.
    DistributiveAlgebraic,
    /// Partials are full update lists, concatenated before finalizing.
    Holistic,
}

/// User-supplied rule for merging partial states.
#[derive(Clone, Copy)]
pub struct CombiningFunction {
    pub name: &'static str,
    pub class: AggregateClass,
    pub combine: fn(&Value, &Value) -> Value,
    pub identity: Option<fn() -> Value>,
    /// Reduces a (consolidated) state to its reported value.
    pub finalize: fn(&ManagedState) -> Option<Value>,
    /// Draws a random element of the function's domain for the registration check.
    pub sample: fn(&mut StdRng) -> Value,
}

impl fmt::Debug for CombiningFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CombiningFunction").field("name", &self.name).field("class", &self.class).finish()
    }
}

impl CombiningFunction {
    /// Spot-checks associativity and commutativity with seeded random triples.
    pub fn register(self, trials: usize, seed: u64) -> Result<Self, StateError> {
        if self.class == AggregateClass::Holistic {
            return Ok(self);
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let c = self.combine;
        for _ in 0..trials {
            let (a, b, x) = ((self.sample)(&mut rng), (self.sample)(&mut rng), (self.sample)(&mut rng));
            if !c(&a, &c(&b, &x)).approx_eq(&c(&c(&a, &b), &x)) {
                return Err(StateError::NotAlgebraic { name: self.name, property: "associative" });
            }
            if !c(&a, &b).approx_eq(&c(&b, &a)) {
                return Err(StateError::NotAlgebraic { name: self.name, property: "commutative" });
            }
        }
        Ok(self)
    }

    fn combine_opt(&self, acc: Option<Value>, next: &Option<Value>) -> Option<Value> {
        match (acc, next) {
            (None, None) => None,
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b.clone()),
            (Some(a), Some(b)) => Some((self.combine)(&a, b)),
        }
    }

    pub fn finalize(&self, state: &ManagedState) -> Option<Value> {
        (self.finalize)(state)
    }
}

fn sum_combine(a: &Value, b: &Value) -> Value {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => Value::Int(x.wrapping_add(*y)),
        _ => Value::Float(a.as_f64() + b.as_f64()),
    }
}

fn max_combine(a: &Value, b: &Value) -> Value {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => Value::Int(*x.max(y)),
        _ => Value::Float(a.as_f64().max(b.as_f64())),
    }
}

fn avg_combine(a: &Value, b: &Value) -> Value {
    match (a, b) {
        (Value::SumCount { sum: s1, count: n1 }, Value::SumCount { sum: s2, count: n2 }) => {
            Value::SumCount { sum: s1 + s2, count: n1 + n2 }
        }
        _ => Value::Float(f64::NAN),
    }
}

fn keep_value(state: &ManagedState) -> Option<Value> {
    match state {
        ManagedState::Value(v) => v.clone(),
        _ => None,
    }
}

fn finalize_average(state: &ManagedState) -> Option<Value> {
    match state {
        ManagedState::Value(Some(Value::SumCount { sum, count })) if *count > 0 => {
            Some(Value::Float(sum / *count as f64))
        }
        _ => None,
    }
}

/// Median of a list of values; the mean of the middle pair for even lengths.
pub fn median_of(values: &[Value]) -> Option<Value> {
    if values.is_empty() {
        return None;
    }
    let mut xs: Vec<f64> = values.iter().map(Value::as_f64).collect();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    Some(Value::Float(if n % 2 == 1 { xs[n / 2] } else { (xs[n / 2 - 1] + xs[n / 2]) / 2.0 }))
}

fn finalize_median(state: &ManagedState) -> Option<Value> {
    match state {
        ManagedState::List(l) => median_of(l),
        _ => None,
    }
}

fn sample_int(rng: &mut StdRng) -> Value {
    Value::Int(rng.random_range(-1_000_000..1_000_000))
}

fn sample_sum_count(rng: &mut StdRng) -> Value {
    Value::SumCount { sum: rng.random_range(-1e6..1e6), count: rng.random_range(0..1000) }
}

pub fn sum() -> CombiningFunction {
    CombiningFunction {
        name: "sum",
        class: AggregateClass::DistributiveAlgebraic,
        combine: sum_combine,
        identity: Some(|| Value::Int(0)),
        finalize: keep_value,
        sample: sample_int,
    }
}

pub fn max() -> CombiningFunction {
    CombiningFunction {
        name: "max",
        class: AggregateClass::DistributiveAlgebraic,
        combine: max_combine,
        identity: None,
        finalize: keep_value,
        sample: sample_int,
    }
}

/// Average over `(sum, count)` partials with a dividing finalize step.
pub fn average() -> CombiningFunction {
    CombiningFunction {
        name: "average",
        class: AggregateClass::DistributiveAlgebraic,
        combine: avg_combine,
        identity: Some(|| Value::SumCount { sum: 0.0, count: 0 }),
        finalize: finalize_average,
        sample: sample_sum_count,
    }
}

pub fn median() -> CombiningFunction {
    CombiningFunction {
        name: "median",
        class: AggregateClass::Holistic,
        combine: |a, _| a.clone(),
        identity: None,
        finalize: finalize_median,
        sample: sample_int,
    }
}

/// For stateless operators: the state never holds a value.
pub fn stateless() -> CombiningFunction {
    CombiningFunction {
        name: "none",
        class: AggregateClass::DistributiveAlgebraic,
        combine: |a, _| a.clone(),
        identity: None,
        finalize: |_| None,
        sample: |_| Value::Int(0),
    }
}

/// One instance's fragment of a function's state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialState {
    pub owner: InstanceAddress,
    pub state: ManagedState,
    pub update_count: u64,
}

impl PartialState {
    pub fn new(owner: InstanceAddress, state: ManagedState) -> Self {
        Self { owner, state, update_count: 0 }
    }

    /// Hands the accumulated fragment out and resets to an empty one.
    pub fn take(&mut self) -> PartialState {
        let empty = self.state.empty_like();
        let out = PartialState {
            owner: self.owner,
            state: std::mem::replace(&mut self.state, empty),
            update_count: self.update_count,
        };
        self.update_count = 0;
        out
    }
}

/// Runs `user_fn` against a copy of the state. On failure the original is untouched.
pub fn apply_update<T>(
    state: &PartialState,
    message: &SequencedMessage,
    user_fn: impl FnOnce(&mut ManagedState, &SequencedMessage) -> Result<T, String>,
    list_limit: usize,
) -> Result<(PartialState, T), StateError> {
    let mut next = state.state.clone();
    let out = user_fn(&mut next, message).map_err(StateError::UserFunction)?;
    if let ManagedState::List(l) = &next {
        if l.len() > list_limit {
            return Err(StateError::ListLimit { limit: list_limit });
        }
    }
    Ok((PartialState { owner: state.owner, state: next, update_count: state.update_count + 1 }, out))
}

/// Merges all partials (the lessor's included) into one state.
pub fn consolidate(
    partials: &[PartialState],
    cf: &CombiningFunction,
    list_limit: usize,
) -> Result<ManagedState, StateError> {
    let first = partials.first().ok_or(StateError::Empty)?;
    if !partials.iter().any(|p| p.owner.is_lessor()) {
        return Err(StateError::MissingLessorPartial);
    }
    for p in partials {
        if p.state.variant() != first.state.variant() {
            return Err(StateError::VariantMismatch(first.state.variant(), p.state.variant()));
        }
    }
    match &first.state {
        ManagedState::Value(_) => {
            let mut acc: Option<Value> = None;
            for p in partials {
                if let ManagedState::Value(v) = &p.state {
                    acc = cf.combine_opt(acc, v);
                }
            }
            Ok(ManagedState::Value(acc))
        }
        ManagedState::List(_) => {
            let mut all = Vec::new();
            for p in partials {
                if let ManagedState::List(l) = &p.state {
                    all.extend(l.iter().cloned());
                }
                if all.len() > list_limit {
                    return Err(StateError::ListLimit { limit: list_limit });
                }
            }
            Ok(ManagedState::List(all))
        }
        ManagedState::Map(_) => {
            let mut merged: BTreeMap<u64, Value> = BTreeMap::new();
            for p in partials {
                if let ManagedState::Map(m) = &p.state {
                    for (k, v) in m {
                        let slot = merged.remove(k);
                        let combined = cf.combine_opt(slot, &Some(v.clone())).expect("non-empty");
                        merged.insert(*k, combined);
                    }
                }
            }
            Ok(ManagedState::Map(merged))
        }
    }
}

/// An independent copy of the state for serving reads.
pub fn read_state_snapshot(state: &ManagedState) -> ManagedState {
    state.clone()
}
