//! Batch pipeline around `socfusion`: simulate a cell, identify its model,
//! train the virtual sensor, calibrate both filters and score them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::PipelineConfig;
pub use error::CliError;
pub use pipeline::{Layout, Method, Score};
