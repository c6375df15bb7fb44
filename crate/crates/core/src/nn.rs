//! Minimal dense network: forward pass, softmax cross-entropy backprop and
//! minibatch SGD. Enough to train local clients and stacked meta-models.

use std::fmt;
use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lr_schedule::CyclicalSchedule;
use crate::ClientId;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected} input columns, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("layer {index} expects {expected} inputs but previous layer produces {actual}")]
    LayerChain {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("label {label} out of range for {num_labels} labels")]
    Label { label: usize, num_labels: usize },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("weight csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out_dim x in_dim`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-limit..limit));
        Self {
            weights,
            bias: Array1::zeros(out_dim),
            activation,
        }
    }
}

/// Gradient of the mean loss with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

pub type Gradients = Vec<LayerGradient>;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
}

impl DenseNet {
    /// Glorot-uniform initialized net: relu hidden layers, softmax output.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        num_labels: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let widths = Self::widths(input_dim, hidden, num_labels)?;
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last {
                    Activation::Softmax
                } else {
                    Activation::Relu
                };
                DenseLayer::glorot(w[0], w[1], act, rng)
            })
            .collect();
        Self::from_layers(layers)
    }

    /// All-zero parameters; outputs the uniform distribution for any input.
    pub fn zeros(input_dim: usize, hidden: &[usize], num_labels: usize) -> Result<Self, NnError> {
        let widths = Self::widths(input_dim, hidden, num_labels)?;
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
                activation: if i == last {
                    Activation::Softmax
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Self::from_layers(layers)
    }

    fn widths(input_dim: usize, hidden: &[usize], num_labels: usize) -> Result<Vec<usize>, NnError> {
        if input_dim == 0 || num_labels < 2 || hidden.contains(&0) {
            return Err(NnError::Invalid(format!(
                "input_dim {input_dim}, hidden {hidden:?}, num_labels {num_labels}"
            )));
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input_dim);
        widths.extend_from_slice(hidden);
        widths.push(num_labels);
        Ok(widths)
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self, NnError> {
        let Some(last) = layers.last() else {
            return Err(NnError::Invalid("network has no layers".into()));
        };
        if last.activation != Activation::Softmax {
            return Err(NnError::Invalid("final layer must be softmax".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(NnError::Invalid(format!(
                    "layer {i}: bias length {} != out_dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if i + 1 < layers.len() && layer.activation != Activation::Relu {
                return Err(NnError::Invalid(format!("hidden layer {i} must be relu")));
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return Err(NnError::LayerChain {
                    index: i,
                    expected: layer.in_dim(),
                    actual: layers[i - 1].out_dim(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_labels(&self) -> usize {
        self.output_layer().out_dim()
    }

    pub fn penultimate_width(&self) -> usize {
        self.output_layer().in_dim()
    }

    pub fn output_layer(&self) -> &DenseLayer {
        self.layers.last().expect("validated non-empty")
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::Shape {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[usize]) -> Result<(), NnError> {
        let k = self.num_labels();
        match labels.iter().find(|&&l| l >= k) {
            Some(&label) => Err(NnError::Label {
                label,
                num_labels: k,
            }),
            None => Ok(()),
        }
    }

    /// Activations of every layer; index 0 is the input, the last entry holds logits.
    fn activations(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for layer in &self.layers {
            let prev = acts.last().expect("input pushed");
            let mut z = prev.dot(&layer.weights.t());
            z += &layer.bias;
            if layer.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(x)?;
        Ok(self.activations(x).pop().expect("at least one layer"))
    }

    /// Row-wise class probabilities.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        let mut z = self.logits(x)?;
        for mut row in z.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        Ok(z)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>, NnError> {
        Ok(self.logits(x)?.rows().into_iter().map(|r| argmax(r.iter().copied())).collect())
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64, NnError> {
        self.check_input(x)?;
        self.check_labels(labels)?;
        let z = self.logits(x)?;
        Ok(cross_entropy(&z, labels))
    }

    pub fn accuracy(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64, NnError> {
        if labels.is_empty() {
            return Err(NnError::Precondition("accuracy on empty set".into()));
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, t)| p == t).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Loss and analytic gradient of the batch-mean cross-entropy.
    pub fn backprop(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<(f64, Gradients), NnError> {
        self.check_input(x)?;
        self.check_labels(labels)?;
        if labels.len() != x.nrows() {
            return Err(NnError::Precondition(format!(
                "{} rows but {} labels",
                x.nrows(),
                labels.len()
            )));
        }
        let n = x.nrows() as f64;
        let acts = self.activations(x);
        let logits = acts.last().expect("logits");
        let loss = cross_entropy(logits, labels);

        // d(mean loss)/d(logits) = (softmax - onehot) / n
        let mut delta = logits.clone();
        for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
            row[y] -= 1.0;
        }
        delta /= n;

        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[i];
            grads.push(LayerGradient {
                weights: delta.t().dot(input),
                bias: delta.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut back = delta.dot(&layer.weights);
                // inputs to layer i are relu outputs of layer i-1
                back.zip_mut_with(input, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        Ok((loss, grads))
    }

    pub fn apply_gradients(&mut self, grads: &[LayerGradient], lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            layer.weights.scaled_add(-lr, &g.weights);
            layer.bias.scaled_add(-lr, &g.bias);
        }
    }

    /// One pass of shuffled minibatch SGD. Returns the mean of per-sample losses
    /// as evaluated in each minibatch before its update.
    pub fn train_epoch<R: Rng + ?Sized>(
        &mut self,
        x: ArrayView2<f64>,
        labels: &[usize],
        lr: f64,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<f64, NnError> {
        if labels.is_empty() || x.nrows() == 0 {
            return Err(NnError::Precondition("empty training set".into()));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(NnError::Precondition(format!("learning rate {lr}")));
        }
        if batch_size == 0 {
            return Err(NnError::Precondition("batch size 0".into()));
        }
        self.check_input(x)?;
        self.check_labels(labels)?;
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let bx = x.select(Axis(0), chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = self.backprop(bx.view(), &by)?;
            total += loss * chunk.len() as f64;
            if lr > 0.0 {
                self.apply_gradients(&grads, lr);
            }
        }
        Ok(total / labels.len() as f64)
    }

    /// Flattened output layer: weight matrix row-major, then bias.
    pub fn extract_output_weights(&self, client_id: ClientId) -> WeightVector {
        let out = self.output_layer();
        let mut values = Vec::with_capacity(out.weights.len() + out.bias.len());
        values.extend(out.weights.iter().copied());
        values.extend(out.bias.iter().copied());
        WeightVector { client_id, values }
    }
}

fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum::<f64>()
        / n
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Max relative error between `analytic` gradients and central differences of
/// the single-sample loss, over every parameter.
pub fn gradient_check_with<F>(
    net: &DenseNet,
    sample: &[f64],
    label: usize,
    epsilon: f64,
    analytic: F,
) -> Result<f64, NnError>
where
    F: Fn(&DenseNet, ArrayView2<f64>, &[usize]) -> Result<Gradients, NnError>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(NnError::Precondition(format!("epsilon {epsilon} not in (0, 1e-2]")));
    }
    let x = Array2::from_shape_vec((1, sample.len()), sample.to_vec())
        .map_err(|e| NnError::Precondition(e.to_string()))?;
    let labels = [label];
    let grads = analytic(net, x.view(), &labels)?;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    let loss_at = |p: &DenseNet| p.loss(x.view(), &labels);

    for (li, g) in grads.iter().enumerate() {
        let (rows, cols) = g.weights.dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = probe.layers[li].weights[[r, c]];
                probe.layers[li].weights[[r, c]] = orig + epsilon;
                let plus = loss_at(&probe)?;
                probe.layers[li].weights[[r, c]] = orig - epsilon;
                let minus = loss_at(&probe)?;
                probe.layers[li].weights[[r, c]] = orig;
                worst = worst.max(relative_error(g.weights[[r, c]], (plus - minus) / (2.0 * epsilon)));
            }
        }
        for r in 0..g.bias.len() {
            let orig = probe.layers[li].bias[r];
            probe.layers[li].bias[r] = orig + epsilon;
            let plus = loss_at(&probe)?;
            probe.layers[li].bias[r] = orig - epsilon;
            let minus = loss_at(&probe)?;
            probe.layers[li].bias[r] = orig;
            worst = worst.max(relative_error(g.bias[r], (plus - minus) / (2.0 * epsilon)));
        }
    }
    Ok(worst)
}

pub fn gradient_check(
    net: &DenseNet,
    sample: &[f64],
    label: usize,
    epsilon: f64,
) -> Result<f64, NnError> {
    gradient_check_with(net, sample, label, epsilon, |n, x, y| n.backprop(x, y).map(|(_, g)| g))
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn accuracy_at(&self, epoch: usize) -> Option<f64> {
        self.epochs.iter().find(|r| r.epoch == epoch).map(|r| r.accuracy)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.accuracy));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_batch_size() -> usize {
    32
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: default_batch_size(),
        }
    }
}

/// Trains for `options.epochs` epochs, taking each epoch's rate from the
/// schedule. Accuracy in the trace is measured on `held_out` when given,
/// otherwise on the training rows.
pub fn fit<R: Rng + ?Sized>(
    net: &mut DenseNet,
    x: ArrayView2<f64>,
    labels: &[usize],
    schedule: &CyclicalSchedule,
    options: &TrainOptions,
    held_out: Option<(ArrayView2<f64>, &[usize])>,
    rng: &mut R,
) -> Result<TrainTrace, NnError> {
    if options.epochs == 0 {
        return Err(NnError::Precondition("epochs must be >= 1".into()));
    }
    let mut trace = TrainTrace::default();
    for epoch in 0..options.epochs {
        let lr = schedule.lr_at(epoch);
        let loss = net.train_epoch(x, labels, lr, options.batch_size, rng)?;
        let accuracy = match held_out {
            Some((hx, hy)) if !hy.is_empty() => net.accuracy(hx, hy)?,
            _ => net.accuracy(x, labels)?,
        };
        trace.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss,
            accuracy,
        });
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub client_id: ClientId,
    pub values: Vec<f64>,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl fmt::Display for WeightVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.client_id)?;
        for v in &self.values {
            write!(f, ",{v:.16e}")?;
        }
        Ok(())
    }
}

/// Output-layer weight vectors of every client in a run.
pub type WeightSet = Vec<WeightVector>;

/// Stacks a weight set into an `N x len` matrix, checking equal lengths and finiteness.
pub fn weight_matrix(weights: &[WeightVector]) -> Result<Array2<f64>, NnError> {
    let Some(first) = weights.first() else {
        return Err(NnError::Precondition("empty weight set".into()));
    };
    let dim = first.len();
    let mut m = Array2::zeros((weights.len(), dim));
    for (i, w) in weights.iter().enumerate() {
        if w.len() != dim {
            return Err(NnError::Precondition(format!(
                "client {} has {} weights, expected {dim}",
                w.client_id,
                w.len()
            )));
        }
        if w.values.iter().any(|v| !v.is_finite()) {
            return Err(NnError::Precondition(format!(
                "client {} has non-finite weights",
                w.client_id
            )));
        }
        m.slice_mut(s![i, ..]).assign(&Array1::from(w.values.clone()));
    }
    Ok(m)
}

pub fn write_weight_csv<W: Write>(mut out: W, weights: &[WeightVector]) -> std::io::Result<()> {
    for w in weights {
        writeln!(out, "{w}")?;
    }
    Ok(())
}

pub fn read_weight_csv<R: Read>(input: R) -> Result<WeightSet, NnError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut set = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| NnError::Csv(e.to_string()))?;
        let mut fields = record.iter();
        let id = fields
            .next()
            .and_then(|f| f.trim().parse::<u32>().ok())
            .ok_or_else(|| NnError::Csv(format!("row {}: bad client id", row + 1)))?;
        let values = fields
            .enumerate()
            .map(|(col, f)| {
                f.trim().parse::<f64>().map_err(|_| {
                    NnError::Csv(format!("row {}, column {}: not a number: {f:?}", row + 1, col + 2))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        set.push(WeightVector {
            client_id: ClientId(id),
            values,
        });
    }
    weight_matrix(&set)?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::array;

    fn single_layer(weights: Array2<f64>, bias: Array1<f64>) -> DenseNet {
        DenseNet::from_layers(vec![DenseLayer {
            weights,
            bias,
            activation: Activation::Softmax,
        }])
        .unwrap()
    }

    #[test]
    fn zero_net_is_uniform() {
        let net = DenseNet::zeros(3, &[4], 5).unwrap();
        let p = net.forward(array![[1.0, -2.0, 7.0], [0.0, 0.0, 0.0]].view()).unwrap();
        for v in p.iter() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_ten_and_zero() {
        let net = single_layer(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0]);
        let p = net.forward(array![[10.0, 0.0]].view()).unwrap();
        let expected = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((p[[0, 0]] - expected).abs() < 1e-15);
        assert!((p[[0, 0]] - 0.99995).abs() < 1e-5);
        assert!((p[[0, 1]] - 0.00005).abs() < 1e-5);
    }

    #[test]
    fn batch_rows_are_distributions() {
        let mut rng = seed::rng(3);
        let net = DenseNet::new(4, &[6, 5], 3, &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 - 5.0);
        let p = net.forward(x.view()).unwrap();
        assert_eq!(p.nrows(), 3);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = DenseNet::zeros(3, &[2], 2).unwrap();
        match net.forward(Array2::zeros((1, 4)).view()) {
            Err(NnError::Shape { expected: 3, actual: 4 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layer_chain_is_validated() {
        let layers = vec![
            DenseLayer {
                weights: Array2::zeros((3, 2)),
                bias: Array1::zeros(3),
                activation: Activation::Relu,
            },
            DenseLayer {
                weights: Array2::zeros((2, 4)),
                bias: Array1::zeros(2),
                activation: Activation::Softmax,
            },
        ];
        assert!(matches!(
            DenseNet::from_layers(layers),
            Err(NnError::LayerChain { index: 1, .. })
        ));
    }

    #[test]
    fn output_weights_flatten_row_major_then_bias() {
        let net = single_layer(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], array![7.0, 8.0]);
        let w = net.extract_output_weights(ClientId(1));
        assert_eq!(w.values, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn output_weight_length_depends_only_on_interface() {
        let mut rng = seed::rng(0);
        let a = DenseNet::new(5, &[32, 8], 8, &mut rng).unwrap();
        let b = DenseNet::new(5, &[16, 64, 8], 8, &mut rng).unwrap();
        assert_eq!(a.extract_output_weights(ClientId(0)).len(), 72);
        assert_eq!(b.extract_output_weights(ClientId(1)).len(), 72);
    }

    #[test]
    fn zero_lr_leaves_weights_and_reports_initial_loss() {
        let mut rng = seed::rng(11);
        let mut net = DenseNet::new(2, &[4], 2, &mut rng).unwrap();
        let before = net.clone();
        let x = array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]];
        let y = [0, 1, 1];
        let initial = net.loss(x.view(), &y).unwrap();
        let loss = net.train_epoch(x.view(), &y, 0.0, 2, &mut rng).unwrap();
        assert_eq!(net, before);
        assert!((loss - initial).abs() < 1e-12);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut rng = seed::rng(1);
        let mut net = DenseNet::zeros(2, &[2], 2).unwrap();
        let x = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            net.train_epoch(x.view(), &[], 0.1, 4, &mut rng),
            Err(NnError::Precondition(_))
        ));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let net = DenseNet::zeros(2, &[2], 2).unwrap();
        assert!(matches!(
            net.loss(array![[0.0, 0.0]].view(), &[2]),
            Err(NnError::Label { label: 2, num_labels: 2 })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seed::rng(5);
        let net = DenseNet::new(3, &[5, 4], 3, &mut rng).unwrap();
        let err = gradient_check(&net, &[0.3, -1.2, 0.8], 2, 1e-5).unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn zero_input_gives_zero_first_layer_weight_gradient() {
        let mut rng = seed::rng(8);
        let net = DenseNet::new(3, &[4], 2, &mut rng).unwrap();
        let (_, g) = net.backprop(Array2::zeros((1, 3)).view(), &[1]).unwrap();
        assert!(g[0].weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = seed::rng(5);
        let net = DenseNet::new(3, &[5], 3, &mut rng).unwrap();
        let err = gradient_check_with(&net, &[0.3, -1.2, 0.8], 0, 1e-5, |n, x, y| {
            let (_, mut g) = n.backprop(x, y)?;
            g[0].weights[[0, 0]] += 0.5;
            Ok(g)
        })
        .unwrap();
        assert!(err > 1e-2);
    }

    #[test]
    fn gradient_check_rejects_large_epsilon() {
        let net = DenseNet::zeros(1, &[1], 2).unwrap();
        assert!(gradient_check(&net, &[1.0], 0, 0.5).is_err());
    }

    #[test]
    fn weight_csv_round_trips_exactly() {
        let set = vec![
            WeightVector {
                client_id: ClientId(3),
                values: vec![0.1, -1.0 / 3.0, 1e-300, 12345.678901234567],
            },
            WeightVector {
                client_id: ClientId(10),
                values: vec![std::f64::consts::PI, 0.0, -0.0, 2.5e17],
            },
        ];
        let mut buf = Vec::new();
        write_weight_csv(&mut buf, &set).unwrap();
        let back = read_weight_csv(buf.as_slice()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn weight_csv_rejects_ragged_rows() {
        let text = "1,0.5,0.25\n2,0.5\n";
        assert!(read_weight_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn median_loss_on_fixed_batch_falls_through_first_epoch() {
        use crate::data::{generate_synthetic, SyntheticSpec};
        let spec = SyntheticSpec::one_hot_blobs(8, 16, 8.0, 1.0, vec![40; 8]).unwrap();
        let data = generate_synthetic(&spec, 3).unwrap();
        let fixed: Vec<usize> = (0..data.len()).step_by(10).collect();
        let fx = data.features().select(Axis(0), &fixed);
        let fy: Vec<usize> = fixed.iter().map(|&i| data.labels()[i]).collect();
        for lr in [1e-3, 1e-4] {
            let mut curves = Vec::new();
            for s in 0..20u64 {
                let mut rng = seed::rng(s);
                let mut net = DenseNet::new(16, &[32, 16], 8, &mut rng).unwrap();
                let mut order: Vec<usize> = (0..data.len()).collect();
                order.shuffle(&mut rng);
                let mut curve = vec![net.loss(fx.view(), &fy).unwrap()];
                for chunk in order.chunks(32) {
                    let bx = data.features().select(Axis(0), chunk);
                    let by: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
                    let (_, g) = net.backprop(bx.view(), &by).unwrap();
                    net.apply_gradients(&g, lr);
                    curve.push(net.loss(fx.view(), &fy).unwrap());
                }
                curves.push(curve);
            }
            let medians: Vec<f64> = (0..curves[0].len())
                .map(|step| {
                    let mut v: Vec<f64> = curves.iter().map(|c| c[step]).collect();
                    v.sort_by(f64::total_cmp);
                    (v[9] + v[10]) / 2.0
                })
                .collect();
            for w in medians.windows(2) {
                assert!(w[1] <= w[0], "lr {lr}: median loss rose {} -> {}", w[0], w[1]);
            }
        }
    }
}
