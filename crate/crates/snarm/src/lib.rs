//! SNARM: universal anomaly detection by two-stage residual matching against
//! a coreset prototype bank, waypoint-guided selective state-space scanning,
//! multi-view atrous decoding and cyclic ensemble training.

pub mod bank;
pub mod encoder;
pub mod error;
pub mod grid;
pub mod navigator;
pub mod ops;
pub mod decoder;
pub mod metrics;
pub mod model;
pub mod param;
pub mod pipeline;
pub mod seeding;
pub mod train;
pub mod snmm;

pub use error::{Result, SnarmError};
