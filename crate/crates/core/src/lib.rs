//! Competitive multi-service UAV deployment: a sealed-bid auction
//! environment, brute-force game verification, and a Byzantine-resilient
//! federated policy-gradient trainer.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod auction;
pub mod env;
pub mod error;
pub mod estimator;
pub mod fedtrain;
pub mod filter;
pub mod game_oracle;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
