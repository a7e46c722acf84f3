//! MicroSegNet: prostate segmentation on micro-ultrasound with annotation-guided
//! BCE and multi-scale deep supervision, plus a synthetic data generator and
//! evaluation tooling.

pub mod checkpoint;
pub mod config;
pub mod domain;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod hard_region;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod report;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
