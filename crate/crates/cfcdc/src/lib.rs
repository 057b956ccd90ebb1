//! Pipeline companion to `cfcdc-core`: data ingestion, dataset preparation,
//! staged training, checkpointing, evaluation, and the CLI surface.

pub mod checkpoint;
pub mod config;
pub mod ingest;
pub mod pipeline;
pub mod prepare;
pub mod train;
