//! Client training and stacked meta-models.
//!
//! Each client trains its own net on local data. A meta-model never sees raw
//! features: its input is the concatenation of member clients' predicted class
//! probabilities on a shared meta set, ordered by ascending client id.

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{DataError, LabeledDataset};
use crate::lr_schedule::CyclicalSchedule;
use crate::metrics::{compute_metrics, Metrics, MetricsError};
use crate::nn::{fit, DenseNet, NnError, TrainOptions, TrainTrace, WeightSet, WeightVector};
use crate::{seed, ClientId};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("interface mismatch: {0}")]
    Interface(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
}

type Result<T> = std::result::Result<T, FederationError>;

#[derive(Debug, Clone)]
pub struct ClientSpec {
    pub client_id: ClientId,
    pub hidden_layers: Vec<usize>,
    pub dataset: LabeledDataset,
    pub training: TrainOptions,
}

impl ClientSpec {
    pub fn new(
        client_id: ClientId,
        hidden_layers: Vec<usize>,
        dataset: LabeledDataset,
        training: TrainOptions,
    ) -> Result<Self> {
        if training.epochs == 0 {
            return Err(FederationError::Precondition(format!("client {client_id}: epochs must be >= 1")));
        }
        if hidden_layers.is_empty() || hidden_layers.contains(&0) {
            return Err(FederationError::Precondition(format!(
                "client {client_id}: hidden layers {hidden_layers:?}"
            )));
        }
        if dataset.is_empty() {
            return Err(FederationError::Precondition(format!("client {client_id} has no data")));
        }
        Ok(Self {
            client_id,
            hidden_layers,
            dataset,
            training,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainedClient {
    pub spec: ClientSpec,
    pub net: DenseNet,
    pub weight_vector: WeightVector,
    pub trace: TrainTrace,
}

impl TrainedClient {
    pub fn client_id(&self) -> ClientId {
        self.spec.client_id
    }

    pub fn labels_present(&self) -> Vec<bool> {
        self.spec.dataset.labels_present()
    }
}

/// Trains one client from a seeded Glorot init. The trace's accuracy is taken
/// on the rows of `held_out` whose labels occur in the client's own data.
pub fn train_client(
    spec: ClientSpec,
    schedule: &CyclicalSchedule,
    held_out: Option<&LabeledDataset>,
    seed: u64,
) -> Result<TrainedClient> {
    let data = &spec.dataset;
    if let Some(h) = held_out {
        if h.dim() != data.dim() || h.num_labels() != data.num_labels() {
            return Err(FederationError::Interface(format!(
                "held-out set is {}x{} labels, client data {}x{}",
                h.dim(),
                h.num_labels(),
                data.dim(),
                data.num_labels()
            )));
        }
    }
    let mut rng = seed::rng(seed);
    let mut net = DenseNet::new(data.dim(), &spec.hidden_layers, data.num_labels(), &mut rng)?;
    let present = data.labels_present();
    let slice = held_out.and_then(|h| h.filter_labels(&present).ok());
    let trace = fit(
        &mut net,
        data.features(),
        data.labels(),
        schedule,
        &spec.training,
        slice.as_ref().map(|h| (h.features(), h.labels())),
        &mut rng,
    )?;
    let weight_vector = net.extract_output_weights(spec.client_id);
    Ok(TrainedClient {
        spec,
        net,
        weight_vector,
        trace,
    })
}

/// Trains every client on the current rayon pool. Client `i` is seeded from
/// `root` and its id, so the result does not depend on thread count.
pub fn train_clients(
    specs: Vec<ClientSpec>,
    schedule: &CyclicalSchedule,
    held_out: Option<&LabeledDataset>,
    root: u64,
) -> Result<Vec<TrainedClient>> {
    specs
        .into_par_iter()
        .map(|spec| {
            let s = seed::derive(root, &format!("client/{}", spec.client_id));
            train_client(spec, schedule, held_out, s)
        })
        .collect()
}

/// Concatenated client probabilities, `K` columns per client.
#[derive(Debug, Clone, PartialEq)]
pub struct StackFeatures {
    /// Block order, ascending.
    pub client_ids: Vec<ClientId>,
    pub num_labels: usize,
    pub features: Array2<f64>,
}

impl StackFeatures {
    pub fn block(&self, index: usize) -> ArrayView2<'_, f64> {
        let k = self.num_labels;
        self.features.slice(s![.., index * k..(index + 1) * k])
    }
}

fn sorted_members<'a>(clients: &[&'a TrainedClient]) -> Result<Vec<&'a TrainedClient>> {
    if clients.is_empty() {
        return Err(FederationError::Precondition("no clients to stack".into()));
    }
    let mut members = clients.to_vec();
    members.sort_by_key(|c| c.client_id());
    if members.windows(2).any(|w| w[0].client_id() == w[1].client_id()) {
        return Err(FederationError::Precondition("duplicate client id in stack".into()));
    }
    let k = members[0].net.num_labels();
    let width = members[0].net.penultimate_width();
    let dim = members[0].net.input_dim();
    for c in &members[1..] {
        if c.net.num_labels() != k {
            return Err(FederationError::Interface(format!(
                "client {} predicts {} labels, client {} predicts {k}",
                c.client_id(),
                c.net.num_labels(),
                members[0].client_id()
            )));
        }
        if c.net.penultimate_width() != width {
            return Err(FederationError::Interface(format!(
                "client {} has penultimate width {}, client {} has {width}",
                c.client_id(),
                c.net.penultimate_width(),
                members[0].client_id()
            )));
        }
        if c.net.input_dim() != dim {
            return Err(FederationError::Interface(format!(
                "client {} takes {} features, client {} takes {dim}",
                c.client_id(),
                c.net.input_dim(),
                members[0].client_id()
            )));
        }
    }
    Ok(members)
}

/// Stack features of `features` under the given clients.
pub fn stack_predictions(clients: &[&TrainedClient], features: ArrayView2<f64>) -> Result<StackFeatures> {
    let members = sorted_members(clients)?;
    let k = members[0].net.num_labels();
    let mut out = Array2::zeros((features.nrows(), k * members.len()));
    for (i, c) in members.iter().enumerate() {
        let p = c.net.forward(features)?;
        out.slice_mut(s![.., i * k..(i + 1) * k]).assign(&p);
    }
    Ok(StackFeatures {
        client_ids: members.iter().map(|c| c.client_id()).collect(),
        num_labels: k,
        features: out,
    })
}

/// Meta-set stack features for all clients, plus their weight vectors in the
/// same ascending-id order.
pub fn build_stack(clients: &[TrainedClient], meta: &LabeledDataset) -> Result<(StackFeatures, WeightSet)> {
    let refs: Vec<&TrainedClient> = clients.iter().collect();
    let members = sorted_members(&refs)?;
    if members[0].net.num_labels() != meta.num_labels() {
        return Err(FederationError::Interface(format!(
            "clients predict {} labels, meta set has {}",
            members[0].net.num_labels(),
            meta.num_labels()
        )));
    }
    let stack = stack_predictions(&members, meta.features())?;
    let weights = members.iter().map(|c| c.weight_vector.clone()).collect();
    Ok((stack, weights))
}

/// Labels seen in training by at least one member.
pub fn covered_labels(clients: &[&TrainedClient]) -> Vec<bool> {
    let k = clients.first().map_or(0, |c| c.net.num_labels());
    let mut covered = vec![false; k];
    for c in clients {
        for (slot, present) in covered.iter_mut().zip(c.labels_present()) {
            *slot |= present;
        }
    }
    covered
}

/// The test rows a meta-model over `clients` is scored on: those whose label
/// some member trained on. Returns the stacked rows and their labels.
pub fn evaluation_slice(clients: &[&TrainedClient], test: &LabeledDataset) -> Result<(StackFeatures, Vec<usize>)> {
    let covered = covered_labels(clients);
    let slice = test.filter_labels(&covered)?;
    let stack = stack_predictions(clients, slice.features())?;
    Ok((stack, slice.labels().to_vec()))
}

/// A net trained on stack features. The global model is the one whose members
/// are all clients.
#[derive(Debug, Clone)]
pub struct StackedModel {
    pub client_ids: Vec<ClientId>,
    pub net: DenseNet,
    pub trace: TrainTrace,
}

pub type GlobalModel = StackedModel;

/// Hidden layer of the meta-net: one relu layer of width `2K`.
pub fn meta_hidden(num_labels: usize) -> Vec<usize> {
    vec![2 * num_labels]
}

pub fn train_stacked(
    stack: &StackFeatures,
    labels: &[usize],
    schedule: &CyclicalSchedule,
    options: &TrainOptions,
    held_out: Option<(&StackFeatures, &[usize])>,
    seed: u64,
) -> Result<StackedModel> {
    if let Some((h, _)) = held_out {
        if h.client_ids != stack.client_ids {
            return Err(FederationError::Interface("held-out stack has different members".into()));
        }
    }
    let mut rng = seed::rng(seed);
    let k = stack.num_labels;
    let mut net = DenseNet::new(stack.features.ncols(), &meta_hidden(k), k, &mut rng)?;
    let trace = fit(
        &mut net,
        stack.features.view(),
        labels,
        schedule,
        options,
        held_out.map(|(h, y)| (h.features.view(), y)),
        &mut rng,
    )?;
    Ok(StackedModel {
        client_ids: stack.client_ids.clone(),
        net,
        trace,
    })
}

fn select<'a>(clients: &'a [TrainedClient], ids: &[ClientId]) -> Result<Vec<&'a TrainedClient>> {
    ids.iter()
        .map(|id| {
            clients
                .iter()
                .find(|c| c.client_id() == *id)
                .ok_or_else(|| FederationError::Precondition(format!("client {id} not trained")))
        })
        .collect()
}

/// Stacks the meta set over `members` and trains a meta-net on it. Both the
/// training rows and the trace's accuracy rows are restricted to labels some
/// member trained on; no member carries signal for the others.
pub fn train_meta_model(
    clients: &[TrainedClient],
    members: &[ClientId],
    meta: &LabeledDataset,
    test: Option<&LabeledDataset>,
    schedule: &CyclicalSchedule,
    options: &TrainOptions,
    seed: u64,
) -> Result<StackedModel> {
    let chosen = select(clients, members)?;
    let (stack, labels) = evaluation_slice(&chosen, meta)?;
    let held_out = test.map(|t| evaluation_slice(&chosen, t)).transpose()?;
    train_stacked(
        &stack,
        &labels,
        schedule,
        options,
        held_out.as_ref().map(|(s, y)| (s, y.as_slice())),
        seed,
    )
}

/// Global model over every client.
pub fn train_global(
    clients: &[TrainedClient],
    meta: &LabeledDataset,
    test: Option<&LabeledDataset>,
    schedule: &CyclicalSchedule,
    options: &TrainOptions,
    seed: u64,
) -> Result<GlobalModel> {
    let mut ids: Vec<ClientId> = clients.iter().map(|c| c.client_id()).collect();
    ids.sort_unstable();
    train_meta_model(clients, &ids, meta, test, schedule, options, seed)
}

/// Scores a stacked model on its evaluation slice of `test`.
pub fn evaluate(model: &StackedModel, clients: &[TrainedClient], test: &LabeledDataset) -> Result<Metrics> {
    let chosen = select(clients, &model.client_ids)?;
    let (stack, truth) = evaluation_slice(&chosen, test)?;
    let predicted = model.net.predict(stack.features.view())?;
    Ok(compute_metrics(&predicted, &truth, stack.num_labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn blobs(per_class: usize, seed: u64) -> LabeledDataset {
        let spec = SyntheticSpec::one_hot_blobs(3, 4, 4.0, 0.5, vec![per_class; 3]).unwrap();
        generate_synthetic(&spec, seed).unwrap()
    }

    fn quick() -> TrainOptions {
        TrainOptions {
            epochs: 3,
            batch_size: 8,
        }
    }

    fn client(id: u32, hidden: Vec<usize>, data: LabeledDataset) -> TrainedClient {
        let spec = ClientSpec::new(ClientId(id), hidden, data, quick()).unwrap();
        train_client(spec, &CyclicalSchedule::new(0.01, 0.1, 2).unwrap(), None, id as u64).unwrap()
    }

    #[test]
    fn zero_epochs_rejected() {
        let opts = TrainOptions {
            epochs: 0,
            batch_size: 8,
        };
        assert!(ClientSpec::new(ClientId(1), vec![4], blobs(5, 0), opts).is_err());
    }

    #[test]
    fn stack_blocks_follow_ascending_ids_and_sum_to_one() {
        let data = blobs(10, 1);
        let clients = vec![
            client(7, vec![6, 5], data.clone()),
            client(2, vec![8, 5], data.clone()),
            client(4, vec![5], data.clone()),
        ];
        let (stack, weights) = build_stack(&clients, &data).unwrap();
        assert_eq!(stack.client_ids, vec![ClientId(2), ClientId(4), ClientId(7)]);
        assert_eq!(stack.features.dim(), (30, 9));
        let wids: Vec<ClientId> = weights.iter().map(|w| w.client_id).collect();
        assert_eq!(wids, stack.client_ids);
        for b in 0..3 {
            for row in stack.block(b).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        // block 1 is client 4's own forward pass
        let direct = clients[2].net.forward(data.features()).unwrap();
        assert_eq!(stack.block(1), direct.view());
    }

    #[test]
    fn penultimate_mismatch_is_an_interface_error() {
        let data = blobs(5, 2);
        let clients = vec![client(1, vec![6, 5], data.clone()), client(2, vec![6, 4], data.clone())];
        assert!(matches!(build_stack(&clients, &data), Err(FederationError::Interface(_))));
    }

    #[test]
    fn label_count_mismatch_with_meta_set() {
        let data = blobs(5, 3);
        let clients = vec![client(1, vec![5], data.clone())];
        let spec = SyntheticSpec::one_hot_blobs(4, 4, 4.0, 0.5, vec![3; 4]).unwrap();
        let meta = generate_synthetic(&spec, 0).unwrap();
        assert!(matches!(build_stack(&clients, &meta), Err(FederationError::Interface(_))));
    }

    #[test]
    fn evaluation_slice_drops_uncovered_labels() {
        let data = blobs(10, 4);
        let partial = data.filter_labels(&[true, true, false]).unwrap();
        let c = client(1, vec![5], partial);
        let (stack, truth) = evaluation_slice(&[&c], &data).unwrap();
        assert_eq!(truth.len(), 20);
        assert!(truth.iter().all(|&l| l < 2));
        assert_eq!(stack.features.nrows(), 20);
    }

    #[test]
    fn meta_net_has_one_hidden_layer_of_twice_k() {
        let data = blobs(10, 5);
        let clients = vec![client(1, vec![5], data.clone()), client(2, vec![5], data.clone())];
        let g = train_global(&clients, &data, Some(&data), &CyclicalSchedule::default(), &quick(), 9).unwrap();
        let widths: Vec<usize> = g.net.layers().iter().map(|l| l.out_dim()).collect();
        assert_eq!(widths, vec![6, 3]);
        assert_eq!(g.net.input_dim(), 6);
        assert_eq!(g.trace.epochs.len(), 3);
        let m = evaluate(&g, &clients, &data).unwrap();
        assert!((0.0..=1.0).contains(&m.balanced_accuracy));
    }

    #[test]
    fn parallel_training_is_deterministic() {
        let data = blobs(8, 6);
        let specs = |()| {
            (1..=4)
                .map(|i| ClientSpec::new(ClientId(i), vec![5], data.clone(), quick()).unwrap())
                .collect::<Vec<_>>()
        };
        let sched = CyclicalSchedule::new(0.01, 0.1, 2).unwrap();
        let a = train_clients(specs(()), &sched, None, 11).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| train_clients(specs(()), &sched, None, 11).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.weight_vector, y.weight_vector);
        }
    }
}
