//! State-of-charge estimation for lithium-ion cells.
//!
//! An extended Kalman filter on a Thevenin circuit model is fused with a
//! learned virtual sensor that reads SOC off a bank of local observers.
//! The modules follow the data flow:
//!
//! - [`simulate`] generates synthetic cells, drive cycles and protocol tests.
//! - [`identify`] recovers circuit parameters from those protocols.
//! - [`neural`] trains the small networks used by the virtual sensor.
//! - [`virtual_sensor`] builds the observer bank and SOC predictor.
//! - [`ekf`] runs the baseline and fused filters.
//! - [`calibrate`] tunes the filter noise with a surrogate optimizer.
//! - [`datamodel`] holds the shared dataset types and CSV I/O.
//!
//! The guide in `book/` walks through each stage with runnable examples.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod datamodel;
pub mod ekf;
pub mod error;
pub mod identify;
mod lm;
pub mod neural;
pub mod poly;
pub mod simulate;
pub mod virtual_sensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cell-model.md")]
    mod cell_model {}
    #[doc = include_str!("../../../book/src/identification.md")]
    mod identification {}
    #[doc = include_str!("../../../book/src/neural.md")]
    mod neural {}
    #[doc = include_str!("../../../book/src/virtual-sensor.md")]
    mod virtual_sensor {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
