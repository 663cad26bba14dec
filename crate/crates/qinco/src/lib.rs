//! File formats, evaluation reports and the `qinco` command line on top of
//! [`qinco_core`].

pub use qinco_core as core;

pub mod cli;
pub mod container;
mod error;
pub mod formats;
pub mod report;
pub mod vecs;

pub use error::{Error, Result};
