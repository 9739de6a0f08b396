//! Files, command-line plumbing and experiment drivers around `mumo-core`.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod dump;
pub mod error;
pub mod run;
pub mod verify;
pub mod vocab;

pub use error::{Error, Result};
