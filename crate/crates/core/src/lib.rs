//! Stream processing on dual-mode virtual actors.
//!
//! Functions run as a lessor instance plus optional lessees. Critical
//! messages (watermarks, snapshots, reads) are executed sequentially at the
//! lessor behind a barrier that consolidates lessee partial state first.

pub mod checker;
pub mod error;
pub mod model;
pub mod operators;
pub mod protocol;
pub mod runtime;
pub mod scenario;
pub mod scheduling;
pub mod sim;
pub mod state;
pub mod trace;
