//! Replay-buffer sample selection for continual federated learning.
//!
//! Clients keep a small buffer of past samples to replay in later training
//! periods. This crate chooses those samples by gradient diversity: the
//! chosen samples' unit loss-gradient directions should have the smallest
//! possible summed pairwise cosine similarity. It provides
//!
//! - the discrete and relaxed objectives and top-N rounding ([`selection`]),
//! - a capped-simplex QP solver for the relaxations ([`qp`]),
//! - random, greedy and relaxation-based per-client strategies ([`strategies`]),
//! - server-coordinated selection across clients ([`coordination`]) and its
//!   wire protocol ([`transport`]),
//! - a synthetic selection-quality benchmark with a brute-force oracle
//!   ([`synthetic`]),
//! - a small FedAvg simulator that measures forgetting ([`sim`]).

pub mod coordination;
pub mod error;
pub mod exec;
pub mod gset;
pub mod qp;
pub mod selection;
pub mod sim;
pub mod strategies;
pub mod synthetic;
pub mod transport;

pub use error::{Error, Result};
