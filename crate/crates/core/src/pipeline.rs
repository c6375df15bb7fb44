//! End-to-end run: split, partition, train clients, stack, select k, cluster,
//! train cluster models, evaluate.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::clustered_models::{build_cluster_models, evaluate_clusters};
use crate::clustering::{prepare, ClusterAssignment, ClusterInput, DistanceMatrix, MethodRegistry};
use crate::config::{ConfigError, DatasetConfig, RunConfig};
use crate::data::{self, generate_synthetic, test_count, CountMatrix, LabeledDataset, SyntheticSpec};
use crate::federation::{build_stack, evaluate, train_clients, train_global, ClientSpec, TrainedClient};
use crate::lr_schedule::CyclicalSchedule;
use crate::metrics::Metrics;
use crate::model_selection::{select_k, BicResult};
use crate::nn::{TrainTrace, WeightSet};
use crate::{seed, ClientId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Partition,
    ClientTraining,
    Stacking,
    GlobalModel,
    Distances,
    ModelSelection,
    Clustering,
    ClusterModels,
    Evaluation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Data => "data",
            Stage::Partition => "partition",
            Stage::ClientTraining => "client training",
            Stage::Stacking => "stacking",
            Stage::GlobalModel => "global model",
            Stage::Distances => "distances",
            Stage::ModelSelection => "model selection",
            Stage::Clustering => "clustering",
            Stage::ClusterModels => "cluster models",
            Stage::Evaluation => "evaluation",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

trait StageContext<T> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> StageContext<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}

/// Sub-seeds for every stage, each derived from the root by its own label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSeeds {
    pub root: u64,
    pub data: u64,
    pub split_test: u64,
    pub split_meta: u64,
    pub partition: u64,
    pub clients: u64,
    pub meta: u64,
    pub selection: u64,
    pub clustering: Vec<(String, u64)>,
}

impl StageSeeds {
    pub fn new(root: u64, methods: &[String]) -> Self {
        Self {
            root,
            data: seed::derive(root, "data"),
            split_test: seed::derive(root, "split/test"),
            split_meta: seed::derive(root, "split/meta"),
            partition: seed::derive(root, "partition"),
            clients: seed::derive(root, "clients"),
            meta: seed::derive(root, "meta"),
            selection: seed::derive(root, "selection"),
            clustering: methods
                .iter()
                .map(|m| (m.clone(), seed::derive(root, &format!("cluster/{m}"))))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientSummary {
    pub client_id: ClientId,
    pub hidden_layers: Vec<usize>,
    pub samples: usize,
    pub label_histogram: Vec<usize>,
    pub final_loss: f64,
    pub train_accuracy: f64,
    /// On the test rows whose labels the client trained on.
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub version: String,
    /// The configuration minus execution-only settings (output directory,
    /// worker count), so equal runs produce equal manifests.
    pub config: RunConfig,
    pub seeds: StageSeeds,
    pub num_labels: usize,
    pub feature_dim: usize,
    pub dataset_rows: usize,
    pub meta_rows: usize,
    pub test_rows: usize,
    pub counts: CountMatrix,
    pub declared_total_mismatches: Vec<ClientId>,
    pub clients: Vec<ClientSummary>,
    pub client_schedule: CyclicalSchedule,
    pub meta_schedule: CyclicalSchedule,
    pub k_max: usize,
    pub selected_k: usize,
    pub k: usize,
}

/// A trained stacked model's members, training trace and test metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelReport {
    pub members: Vec<ClientId>,
    pub trace: TrainTrace,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub assignment: ClusterAssignment,
    /// Indexed by cluster.
    pub clusters: Vec<ModelReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub manifest: Manifest,
    pub weights: WeightSet,
    pub distances: DistanceMatrix,
    pub bic: BicResult,
    pub global: ModelReport,
    pub methods: Vec<MethodReport>,
}

/// Smallest per-label row count whose client pool, after the test and meta
/// splits, still covers `needed` rows.
fn rows_for(needed: usize, test_fraction: f64, meta_fraction: f64) -> usize {
    let meta_of_rest = meta_fraction / (1.0 - test_fraction);
    let pool = |n: usize| {
        let rest = n - test_count(n, test_fraction);
        rest - test_count(rest, meta_of_rest)
    };
    // every label needs a couple of rows on each side of both splits
    let mut n = needed.max(4);
    while pool(n) < needed || test_count(n, test_fraction) == 0 || test_count(n - test_count(n, test_fraction), meta_of_rest) == 0 {
        n += 1;
    }
    n
}

fn load_dataset(config: &RunConfig, counts: &CountMatrix, seeds: &StageSeeds) -> Result<LabeledDataset, PipelineError> {
    match &config.dataset {
        DatasetConfig::Synthetic {
            dim,
            separation,
            scale,
            ..
        } => {
            let k = counts.num_labels();
            let per_class = counts
                .label_totals()
                .into_iter()
                .map(|t| rows_for(t, config.test_fraction, config.meta_fraction))
                .collect();
            let spec = SyntheticSpec::one_hot_blobs(k, *dim, *separation, *scale, per_class).stage(Stage::Data)?;
            generate_synthetic(&spec, seeds.data).stage(Stage::Data)
        }
        DatasetConfig::Csv { path, label_column } => {
            let d = data::load_csv(path, label_column).stage(Stage::Data)?;
            if d.num_labels() != counts.num_labels() {
                return Err(PipelineError::Stage {
                    stage: Stage::Data,
                    source: format!(
                        "dataset has {} labels, count matrix has {}",
                        d.num_labels(),
                        counts.num_labels()
                    )
                    .into(),
                });
            }
            Ok(d)
        }
    }
}

fn echo(config: &RunConfig) -> RunConfig {
    RunConfig {
        output_dir: None,
        workers: 0,
        ..config.clone()
    }
}

/// Runs every stage on a pool of `config.workers` threads. The config is
/// validated before any compute.
pub fn run_pipeline(config: &RunConfig) -> Result<RunReport, PipelineError> {
    let counts = config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| ConfigError::Invalid(format!("workers: {e}")))?;
    pool.install(|| run_validated(config, counts))
}

fn run_validated(config: &RunConfig, counts: CountMatrix) -> Result<RunReport, PipelineError> {
    let seeds = StageSeeds::new(config.seed, &config.methods);
    let dataset = load_dataset(config, &counts, &seeds)?;
    log::info!("dataset: {} rows, {} features, {} labels", dataset.len(), dataset.dim(), dataset.num_labels());

    let (rest, test) = data::split(&dataset, config.test_fraction, seeds.split_test).stage(Stage::Data)?;
    let meta_of_rest = config.meta_fraction / (1.0 - config.test_fraction);
    let (pool, meta) = data::split(&rest, meta_of_rest, seeds.split_meta).stage(Stage::Data)?;
    let parts = data::partition_non_iid(&pool, &counts, seeds.partition).stage(Stage::Partition)?;

    let archs = &config.clients.architectures;
    let specs = parts
        .into_iter()
        .enumerate()
        .map(|(i, (id, d))| ClientSpec::new(id, archs[i % archs.len()].clone(), d, config.clients.training()))
        .collect::<Result<Vec<_>, _>>()
        .stage(Stage::ClientTraining)?;
    log::info!("training {} clients", specs.len());
    // client traces track training accuracy; scoring the whole test set every
    // epoch for every client dominates the run time at 100 clients
    let clients = train_clients(specs, &config.clients.schedule, None, seeds.clients).stage(Stage::ClientTraining)?;
    let summaries = clients
        .par_iter()
        .map(|c| summarize(c, &test))
        .collect::<Result<Vec<_>, _>>()
        .stage(Stage::Evaluation)?;

    let (_, weights) = build_stack(&clients, &meta).stage(Stage::Stacking)?;
    let meta_training = config.meta.training();
    let schedule = &config.meta.schedule;
    let global = train_global(&clients, &meta, Some(&test), schedule, &meta_training, seeds.meta).stage(Stage::GlobalModel)?;
    let global_metrics = evaluate(&global, &clients, &test).stage(Stage::Evaluation)?;

    let (points, distances) = prepare(&weights).stage(Stage::Distances)?;
    let k_max = config.k_max(clients.len());
    let bic = select_k(
        points.view(),
        k_max,
        seeds.selection,
        config.selection.restarts,
        &config.selection.gmm,
    )
    .stage(Stage::ModelSelection)?;
    let k = config.k.unwrap_or(bic.selected_k);
    log::info!("BIC selected k = {}, using k = {k}", bic.selected_k);

    let registry = MethodRegistry::with_options(config.selection.kmeans, config.selection.gmm);
    let input = ClusterInput::new(points.view(), &distances).stage(Stage::Clustering)?;
    let mut methods = Vec::with_capacity(config.methods.len());
    for (name, method_seed) in &seeds.clustering {
        let assignment = registry
            .get(name)
            .and_then(|m| m.cluster(&input, k, *method_seed))
            .stage(Stage::Clustering)?;
        log::info!("{name}: cluster sizes {:?}", assignment.sizes());
        let models = build_cluster_models(&assignment, &clients, &meta, Some(&test), schedule, &meta_training, seeds.meta)
            .stage(Stage::ClusterModels)?;
        let evaluations = evaluate_clusters(&models, &clients, &test).stage(Stage::Evaluation)?;
        let clusters = models
            .into_iter()
            .zip(evaluations)
            .map(|(m, e)| ModelReport {
                members: m.members,
                trace: m.model.trace,
                metrics: e.metrics,
            })
            .collect();
        methods.push(MethodReport { assignment, clusters });
    }

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: echo(config),
        seeds,
        num_labels: dataset.num_labels(),
        feature_dim: dataset.dim(),
        dataset_rows: dataset.len(),
        meta_rows: meta.len(),
        test_rows: test.len(),
        declared_total_mismatches: counts.declared_mismatches(),
        counts,
        clients: summaries,
        client_schedule: config.clients.schedule,
        meta_schedule: config.meta.schedule,
        k_max,
        selected_k: bic.selected_k,
        k,
    };
    Ok(RunReport {
        manifest,
        weights,
        distances,
        bic,
        global: ModelReport {
            members: global.client_ids,
            trace: global.trace,
            metrics: global_metrics,
        },
        methods,
    })
}

fn summarize(c: &TrainedClient, test: &LabeledDataset) -> Result<ClientSummary, crate::nn::NnError> {
    let last = c.trace.last();
    let held_out = test.filter_labels(&c.labels_present()).ok();
    let test_accuracy = match &held_out {
        Some(h) => c.net.accuracy(h.features(), h.labels())?,
        None => f64::NAN,
    };
    Ok(ClientSummary {
        client_id: c.client_id(),
        hidden_layers: c.spec.hidden_layers.clone(),
        samples: c.spec.dataset.len(),
        label_histogram: c.spec.dataset.label_histogram(),
        final_loss: last.map_or(f64::NAN, |r| r.loss),
        train_accuracy: last.map_or(f64::NAN, |r| r.accuracy),
        test_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_for_leaves_enough_for_the_pool() {
        for needed in [1, 7, 28, 94, 333] {
            let n = rows_for(needed, 0.2, 0.2);
            let rest = n - test_count(n, 0.2);
            let pool = rest - test_count(rest, 0.25);
            assert!(pool >= needed);
            let smaller = n - 1;
            let rest = smaller - test_count(smaller, 0.2);
            assert!(smaller < 4 || rest - test_count(rest, 0.25) < needed || test_count(smaller, 0.2) == 0);
        }
    }

    #[test]
    fn stage_seeds_do_not_collide() {
        let s = StageSeeds::new(42, &["kmeans".into(), "gmm".into()]);
        let mut all = vec![s.data, s.split_test, s.split_meta, s.partition, s.clients, s.meta, s.selection];
        all.extend(s.clustering.iter().map(|(_, v)| *v));
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }
}
