//! File formats, experiment runs and reports around [`adafilter_core`].

pub mod config;
pub mod dataset;
pub mod error;
pub mod run;

pub use error::{Error, Result};
