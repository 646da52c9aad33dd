//! Hierarchical user-interaction fields for content-based job recommendation.
//!
//! Users start from profile-derived field vectors; a view layer and an apply
//! layer learned from interaction logs refine them, and a logistic regression
//! over user/job similarities scores candidates.

pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod hash;
pub mod hier;
pub mod models;
pub mod optim;
pub mod regression;
pub mod rng;
pub mod schema;
pub mod serving;
pub mod store;

pub use error::{Error, ErrorClass, Result};
