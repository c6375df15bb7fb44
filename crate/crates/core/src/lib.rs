//! Clustered stacked federated learning.
//!
//! Local clients train small dense classifiers on non-IID partitions. A server
//! stacks their predicted probabilities into a global meta-model, groups the
//! clients by their output-layer weights (k chosen by BIC over Gaussian
//! mixtures) and trains one intermediate stacked model per cluster.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod clustered_models;
pub mod clustering;
pub mod config;
pub mod data;
pub mod federation;
pub mod lr_schedule;
pub mod metrics;
pub mod model_selection;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod seed;

/// Identifier of a local client. Stacks and reports are ordered by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
