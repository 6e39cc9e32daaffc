//! Model-based optimal design of selection experiments under linear mixed
//! models with genetic relatedness.

pub mod error;
pub mod frame;
pub mod mme;
pub mod relatedness;
pub mod search;
pub mod spec;
pub mod constraints;
pub mod simped;
pub mod stages;

pub use error::{Error, Result};
