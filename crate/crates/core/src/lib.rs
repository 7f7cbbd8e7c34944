//! Joint endpointing and streaming speech recognition on synthetic corpora.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod models;
pub mod netkit;
pub mod runtime;
pub mod trainer;

pub use error::{Error, Result};
