//! Filter-pruning engine that scores convolution filters under twelve
//! importance criteria, groups the criteria per layer by Spearman rank
//! similarity, and evolves a calibrated blend of one criterion per group.
//!
//! Pipeline: [`snapshot`] → [`criteria`] → [`rankstats`] → [`clustering`]
//! → [`evolution`] (scored by a [`fitness::Evaluator`]) → [`blend`] masks.

pub mod blend;
pub mod clustering;
pub mod criteria;
pub mod error;
pub mod evolution;
pub mod fitness;
pub mod rankstats;
pub mod snapshot;

pub use error::{Error, Result};
