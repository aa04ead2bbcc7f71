use thiserror::Error;

use crate::model::{BarrierId, ChannelId, InstanceAddress};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DmaError {
    #[error("send on unregistered channel {0}")]
    UnregisteredChannel(ChannelId),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("protocol violation at {at}: {reason}")]
    ProtocolAt { at: InstanceAddress, reason: String },

    #[error("barrier {0} did not complete: stuck in {1}")]
    IncompleteBarrier(BarrierId, String),

    #[error("state error: {0}")]
    State(#[from] StateError),

    #[error("unknown instance {0}")]
    UnknownInstance(InstanceAddress),

    #[error("invalid job: {0}")]
    InvalidJob(String),
}

impl DmaError {
    pub fn at(at: InstanceAddress, reason: impl Into<String>) -> Self {
        DmaError::ProtocolAt { at, reason: reason.into() }
    }

    pub fn is_protocol(&self) -> bool {
        matches!(self, DmaError::Protocol(_) | DmaError::ProtocolAt { .. } | DmaError::UnregisteredChannel(_))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("mismatched state variants: {0} vs {1}")]
    VariantMismatch(&'static str, &'static str),

    #[error("consolidation needs the lessor partial")]
    MissingLessorPartial,

    #[error("nothing to consolidate")]
    Empty,

    #[error("holistic state exceeds {limit} entries")]
    ListLimit { limit: usize },

    #[error("combining function {name} is not {property}")]
    NotAlgebraic { name: &'static str, property: &'static str },

    #[error("user function failed: {0}")]
    UserFunction(String),
}
