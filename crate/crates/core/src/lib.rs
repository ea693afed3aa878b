//! Transfinite fixed-point iteration.
//!
//! Self-maps on finite lattices, metric spaces and ordinal chains are
//! iterated along ordinal stages (successor steps, limits via fundamental
//! sequences) until a stage is fixed. Runs produce traces and fixed-point
//! certificates; nested games compose inner equilibria into an outer map;
//! brute-force oracles cross-check small instances.

pub mod engine;
pub mod games;
pub mod oracle;
pub mod ordinal;
pub mod records;
pub mod scenario;
pub mod space;

pub use engine::{
    detect_stable, Convergence, Engine, EngineConfig, EngineError, FixpointCertificate,
    IterationTrace, StageRecord, Uniqueness,
};
pub use ordinal::{Ordinal, OrdinalClass, OrdinalError};
pub use space::{
    CheckMode, Elem, FiniteLattice, MetricSpaceSpec, Operator, OperatorKind, OrdinalSpace, Space,
    Validated,
};
