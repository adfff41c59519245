//! Command-line front end: configuration, file-level stages and the
//! resumable two-round pipeline.

pub mod config;
pub mod pipeline;
pub mod stages;
