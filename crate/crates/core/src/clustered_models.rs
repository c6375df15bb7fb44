//! One stacked meta-model per cluster, trained on its members' predictions.

use rayon::prelude::*;

use crate::clustering::ClusterAssignment;
use crate::data::LabeledDataset;
use crate::federation::{evaluate, train_meta_model, FederationError, StackedModel, TrainedClient};
use crate::lr_schedule::CyclicalSchedule;
use crate::nn::TrainOptions;
use crate::ClientId;

pub use crate::metrics::{compute_metrics, Metrics};

#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub method: String,
    pub cluster: usize,
    /// Ascending.
    pub members: Vec<ClientId>,
    pub model: StackedModel,
}

#[derive(Debug, Clone)]
pub struct ClusterEvaluation {
    pub method: String,
    pub cluster: usize,
    pub members: Vec<ClientId>,
    pub metrics: Metrics,
}

/// Trains a meta-model for every cluster of `assignment`. All clusters share
/// `seed`, so a single cluster holding every client reproduces the global
/// model exactly.
pub fn build_cluster_models(
    assignment: &ClusterAssignment,
    clients: &[TrainedClient],
    meta: &LabeledDataset,
    test: Option<&LabeledDataset>,
    schedule: &CyclicalSchedule,
    options: &TrainOptions,
    seed: u64,
) -> Result<Vec<ClusterModel>, FederationError> {
    (0..assignment.k)
        .into_par_iter()
        .map(|cluster| {
            let members = assignment.members(cluster);
            let model = train_meta_model(clients, &members, meta, test, schedule, options, seed)?;
            Ok(ClusterModel {
                method: assignment.method.clone(),
                cluster,
                members,
                model,
            })
        })
        .collect()
}

/// Scores each cluster model on the test rows whose labels its members cover.
pub fn evaluate_clusters(
    models: &[ClusterModel],
    clients: &[TrainedClient],
    test: &LabeledDataset,
) -> Result<Vec<ClusterEvaluation>, FederationError> {
    models
        .par_iter()
        .map(|m| {
            Ok(ClusterEvaluation {
                method: m.method.clone(),
                cluster: m.cluster,
                members: m.members.clone(),
                metrics: evaluate(&m.model, clients, test)?,
            })
        })
        .collect()
}
