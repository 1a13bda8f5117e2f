//! Expected-utility maximization under ratchet and drawdown consumption
//! constraints: running essential suprema, chronological orderings,
//! certified duality on finite trees, complete-market closed forms and the
//! envelope construction.

pub mod cli;
pub mod complete;
pub mod envelope;
pub mod error;
pub mod esssup;
pub mod grid;
pub mod primal;
pub mod random;
pub mod tree;
pub mod utility;

pub use error::{Error, Result};
