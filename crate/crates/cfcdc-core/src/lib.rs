//! Core model and execution logic for clause-decoupled NL2SQL.
//!
//! Everything in this crate is pure computation over in-memory data:
//! candidate serialization and tokenization, the trainable sequence
//! encoder, the clause-decoupled ranking modules with their expert
//! networks, the coupling/voting stage, the single-table SQL executor,
//! and the evaluation metrics. File formats, checkpoints, and the CLI
//! live in the companion `cfcdc` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cfcc;
pub mod cfcd;
pub mod data;
pub mod encoder;
pub mod ifcd;
pub mod mathx;
pub mod metrics;
pub mod opt;
pub mod rng;
pub mod sql;
pub mod synth;
pub mod tensor;

pub use cfcd::{CfcdModule, ClauseRole};
pub use data::{
    ColumnSpec, ColumnType, NlExample, SqlLabel, TableSchema, TableStore, TokenizedInput,
    Vocabulary,
};
pub use metrics::MetricsReport;
pub use sql::{AggOp, CondOp, ResultSet, SqlQuery};
