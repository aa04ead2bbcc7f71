//! Built-in user functions: stateless transforms, key partitioning and
//! windowed aggregates.

use serde::{Deserialize, Serialize};

use crate::model::{CriticalEvent, CriticalKind, Event, MsgId, Payload, SequencedMessage};
use crate::state::{self, CombiningFunction, ManagedState, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Map,
    Filter,
    KeyBy,
    WindowSum,
    WindowMax,
    WindowAverage,
    WindowMedian,
}

impl OperatorKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "map" => Self::Map,
            "filter" => Self::Filter,
            "key_by" => Self::KeyBy,
            "window_sum" => Self::WindowSum,
            "window_max" => Self::WindowMax,
            "window_average" => Self::WindowAverage,
            "window_median" => Self::WindowMedian,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Map => "map",
            Self::Filter => "filter",
            Self::KeyBy => "key_by",
            Self::WindowSum => "window_sum",
            Self::WindowMax => "window_max",
            Self::WindowAverage => "window_average",
            Self::WindowMedian => "window_median",
        }
    }

    pub fn combining(&self) -> CombiningFunction {
        match self {
            Self::WindowSum => state::sum(),
            Self::WindowMax => state::max(),
            Self::WindowAverage => state::average(),
            Self::WindowMedian => state::median(),
            _ => state::stateless(),
        }
    }

    pub fn initial_state(&self) -> ManagedState {
        match self {
            Self::WindowMedian => ManagedState::List(Vec::new()),
            _ => ManagedState::Value(None),
        }
    }

    pub fn is_window(&self) -> bool {
        matches!(self, Self::WindowSum | Self::WindowMax | Self::WindowAverage | Self::WindowMedian)
    }
}

/// Parameters shared by the built-ins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Operator {
    pub kind: OperatorKind,
    /// Map multiplies values by this.
    pub factor: i64,
    /// Filter keeps values at or above this.
    pub threshold: i64,
    /// Key partitions for key_by.
    pub partitions: u32,
}

impl Operator {
    pub fn new(kind: OperatorKind) -> Self {
        Self { kind, factor: 1, threshold: i64::MIN, partitions: 1 }
    }
}

/// One output of a user function. `index` pins a downstream instance.
#[derive(Clone, Debug, PartialEq)]
pub enum Output {
    Data { event: Event, index: Option<u32> },
    Critical(CriticalEvent),
}

/// What executing one message produced, beyond state changes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Execution {
    pub outputs: Vec<Output>,
    /// The finalized aggregate a critical observed.
    pub observed: Option<Value>,
}

/// Hands out message ids for derived events.
pub trait IdSource {
    fn next_id(&mut self) -> MsgId;
}

impl IdSource for u64 {
    fn next_id(&mut self) -> MsgId {
        *self += 1;
        MsgId(*self)
    }
}

impl Operator {
    /// The user function body, run through `apply_update`.
    pub fn apply(
        &self,
        state: &mut ManagedState,
        msg: &SequencedMessage,
        ids: &mut dyn IdSource,
    ) -> Result<Execution, String> {
        match &msg.payload {
            Payload::Event(e) => self.on_event(state, e, ids),
            Payload::Critical(c) => Ok(self.on_critical(state, c, ids)),
            other => Err(format!("{} cannot execute {:?}", self.kind.name(), other.kind())),
        }
    }

    fn on_event(&self, state: &mut ManagedState, e: &Event, ids: &mut dyn IdSource) -> Result<Execution, String> {
        let derived = |value: i64, ids: &mut dyn IdSource| Event { id: ids.next_id(), value, ..e.clone() };
        let outputs = match self.kind {
            OperatorKind::Map => {
                let v = e.value.checked_mul(self.factor).ok_or("map overflow")?;
                vec![Output::Data { event: derived(v, ids), index: None }]
            }
            OperatorKind::Filter => {
                if e.value >= self.threshold {
                    vec![Output::Data { event: derived(e.value, ids), index: None }]
                } else {
                    Vec::new()
                }
            }
            OperatorKind::KeyBy => {
                let index = (e.key % self.partitions.max(1) as u64) as u32;
                vec![Output::Data { event: derived(e.value, ids), index: Some(index) }]
            }
            OperatorKind::WindowMedian => {
                let ManagedState::List(l) = state else { return Err("median needs list state".into()) };
                l.push(Value::Int(e.value));
                Vec::new()
            }
            OperatorKind::WindowSum | OperatorKind::WindowMax | OperatorKind::WindowAverage => {
                let ManagedState::Value(v) = state else { return Err("window needs value state".into()) };
                let update = if self.kind == OperatorKind::WindowAverage {
                    Value::SumCount { sum: e.value as f64, count: 1 }
                } else {
                    Value::Int(e.value)
                };
                let cf = self.kind.combining();
                *v = Some(match v.take() {
                    None => update,
                    Some(cur) => (cf.combine)(&cur, &update),
                });
                Vec::new()
            }
        };
        Ok(Execution { outputs, observed: None })
    }

    fn on_critical(&self, state: &mut ManagedState, c: &CriticalEvent, ids: &mut dyn IdSource) -> Execution {
        let mut out = Execution::default();
        if self.kind.is_window() {
            let aggregate = self.kind.combining().finalize(state);
            if let Some(a) = &aggregate {
                let event = Event {
                    id: ids.next_id(),
                    key: 0,
                    value: a.as_f64().round() as i64,
                    event_time: c.ts,
                    injected_at: c.injected_at,
                };
                out.outputs.push(Output::Data { event, index: None });
            }
            out.observed = aggregate;
            if c.kind == CriticalKind::Watermark {
                *state = state.empty_like();
            }
        }
        out.outputs.push(Output::Critical(CriticalEvent { id: ids.next_id(), ..c.clone() }));
        out
    }
}
