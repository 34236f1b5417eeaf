//! Osmotic learning simulator.
//!
//! Agents encode their local time series into 5-wide embeddings with a private
//! GRU encoder. A central [`diffuser`] turns the submitted embeddings into
//! per-group context targets, broadcasts them back, and periodically regroups
//! agents whose embeddings agree. Each agent trains against its context target
//! plus a contrastive term that keeps its embeddings informative.
//!
//! The whole worker/master protocol runs in-process; see [`orchestrator`].

pub mod datagen;
pub mod diffuser;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod orchestrator;

use serde::{Deserialize, Serialize};

pub use error::{Error, ErrorClass, Result};

/// Identifier of an agent. Agents are always processed in ascending id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Width of every embedding exchanged with the diffuser.
pub const EMBEDDING_DIM: usize = 5;

/// Hidden width of every agent's GRU.
pub const HIDDEN_DIM: usize = 20;
