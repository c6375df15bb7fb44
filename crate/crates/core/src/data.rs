//! Labeled datasets: synthetic Gaussian blobs, CSV ingestion, stratified
//! splitting and non-IID per-client partitioning driven by a count matrix.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{seed, ClientId};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("infeasible partition, deficient labels: {}", format_deficits(.0))]
    Infeasible(Vec<LabelDeficit>),
    #[error("row {row}, column {column:?}: cannot parse {value:?} as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("label {label} has {count} sample(s); stratified split needs at least 2")]
    Stratification { label: usize, count: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelDeficit {
    pub label: usize,
    pub requested: usize,
    pub available: usize,
}

fn format_deficits(d: &[LabelDeficit]) -> String {
    d.iter()
        .map(|d| format!("label {} (requested {}, available {})", d.label, d.requested, d.available))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_labels: usize,
    feature_names: Option<Vec<String>>,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_labels: usize) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Precondition("dataset has no rows".into()));
        }
        if features.nrows() != labels.len() {
            return Err(DataError::Precondition(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.ncols() == 0 {
            return Err(DataError::Precondition("dataset has no feature columns".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_labels) {
            return Err(DataError::Precondition(format!(
                "label {bad} out of range for {num_labels} labels"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Precondition("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            num_labels,
            feature_names: None,
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Self {
        self.feature_names = Some(names);
        self
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_labels];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// `present[l]` is true when at least one row carries label `l`.
    pub fn labels_present(&self) -> Vec<bool> {
        self.label_histogram().into_iter().map(|c| c > 0).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut out = Self::new(features, labels, self.num_labels)?;
        out.feature_names = self.feature_names.clone();
        Ok(out)
    }

    /// Rows whose label is flagged in `keep`.
    pub fn filter_labels(&self, keep: &[bool]) -> Result<Self, DataError> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| keep.get(self.labels[i]).copied().unwrap_or(false))
            .collect();
        self.subset(&idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_labels: usize,
    pub dim: usize,
    /// One mean vector per class.
    pub means: Vec<Vec<f64>>,
    /// Isotropic standard deviation of every class.
    pub scale: f64,
    pub samples_per_class: Vec<usize>,
}

impl SyntheticSpec {
    /// Class `c` centred at `separation * e_c`; requires `dim >= num_labels`.
    pub fn one_hot_blobs(
        num_labels: usize,
        dim: usize,
        separation: f64,
        scale: f64,
        samples_per_class: Vec<usize>,
    ) -> Result<Self, DataError> {
        if dim < num_labels {
            return Err(DataError::Precondition(format!(
                "one-hot blobs need dim >= num_labels ({dim} < {num_labels})"
            )));
        }
        let means = (0..num_labels)
            .map(|c| {
                let mut m = vec![0.0; dim];
                m[c] = separation;
                m
            })
            .collect();
        let spec = Self {
            num_labels,
            dim,
            means,
            scale,
            samples_per_class,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_labels < 2 || self.dim == 0 {
            return Err(DataError::Precondition(format!(
                "need >= 2 labels and >= 1 dimension, got {} and {}",
                self.num_labels, self.dim
            )));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(DataError::Precondition(format!("scale {}", self.scale)));
        }
        if self.means.len() != self.num_labels || self.means.iter().any(|m| m.len() != self.dim) {
            return Err(DataError::Precondition("means must be num_labels x dim".into()));
        }
        if self.samples_per_class.len() != self.num_labels {
            return Err(DataError::Precondition("samples_per_class must have num_labels entries".into()));
        }
        if self.samples_per_class.iter().sum::<usize>() == 0 {
            return Err(DataError::Precondition("synthetic spec requests 0 samples".into()));
        }
        Ok(())
    }
}

/// Gaussian blob per class, rows grouped by class in label order.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<LabeledDataset, DataError> {
    spec.validate()?;
    let mut rng = seed::rng(seed);
    let n: usize = spec.samples_per_class.iter().sum();
    let mut features = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (class, &count) in spec.samples_per_class.iter().enumerate() {
        for _ in 0..count {
            for j in 0..spec.dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                features[[row, j]] = spec.means[class][j] + spec.scale * z;
            }
            labels.push(class);
            row += 1;
        }
    }
    LabeledDataset::new(features, labels, spec.num_labels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub client_id: ClientId,
    pub declared_total: usize,
    pub counts: Vec<usize>,
}

impl CountRow {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Per-client, per-label sample counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMatrix {
    rows: Vec<CountRow>,
}

/// Per-subject activity counts of the PPG-DALiA study (15 subjects, 8 activities).
const SUBJECT_COUNTS: [(usize, [usize; 8]); 15] = [
    (27724, [2800, 1148, 1380, 1648, 3556, 9420, 3016, 4756]),
    (22712, [2400, 1068, 1216, 1548, 3680, 4880, 2756, 5164]),
    (26900, [2400, 1740, 1172, 1516, 3640, 8640, 2952, 4840]),
    (26528, [2280, 2092, 1312, 1900, 4028, 7580, 2376, 4960]),
    (26924, [2400, 1860, 1160, 1728, 3320, 9020, 2356, 5080]),
    (11812, [2532, 1720, 1236, 2132, 4192, 9020, 0, 0]),
    (28580, [2472, 1624, 1096, 2012, 4140, 9700, 2836, 4700]),
    (23992, [2400, 1648, 1292, 1680, 3080, 7200, 1924, 4768]),
    (26212, [2400, 1932, 1140, 2216, 3820, 7368, 2356, 4980]),
    (28424, [2392, 1868, 1220, 1952, 3748, 8336, 4328, 4580]),
    (28052, [2400, 1828, 1296, 1960, 3440, 9632, 2616, 4880]),
    (23680, [2408, 1936, 1120, 1920, 3560, 5840, 2116, 4780]),
    (26996, [2420, 1988, 1160, 1992, 3588, 8112, 2836, 4900]),
    (25584, [2432, 1824, 1300, 2008, 3816, 6924, 2460, 4820]),
    (23504, [2444, 1676, 1416, 1620, 3140, 5760, 2636, 4812]),
];

impl CountMatrix {
    pub fn new(rows: Vec<CountRow>) -> Result<Self, DataError> {
        let Some(first) = rows.first() else {
            return Err(DataError::Precondition("count matrix has no rows".into()));
        };
        let k = first.counts.len();
        if k == 0 {
            return Err(DataError::Precondition("count matrix has no label columns".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for row in &rows {
            if row.counts.len() != k {
                return Err(DataError::Precondition(format!(
                    "client {} has {} label counts, expected {k}",
                    row.client_id,
                    row.counts.len()
                )));
            }
            if row.total() == 0 {
                return Err(DataError::Precondition(format!(
                    "client {} has no positive count",
                    row.client_id
                )));
            }
            if !seen.insert(row.client_id) {
                return Err(DataError::Precondition(format!(
                    "duplicate client id {}",
                    row.client_id
                )));
            }
            if row.total() != row.declared_total {
                log::warn!(
                    "client {}: per-label counts sum to {} but declared total is {}; using per-label counts",
                    row.client_id,
                    row.total(),
                    row.declared_total
                );
            }
        }
        Ok(Self { rows })
    }

    /// The 15-subject, 8-label table; client ids 1..=15.
    pub fn table_one() -> Self {
        Self::table_one_cycled(SUBJECT_COUNTS.len())
    }

    /// `n` clients with ids 1..=n; client i takes subject row `(i - 1) mod 15`.
    pub fn table_one_cycled(n: usize) -> Self {
        let rows = (0..n)
            .map(|i| {
                let (declared_total, counts) = SUBJECT_COUNTS[i % SUBJECT_COUNTS.len()];
                CountRow {
                    client_id: ClientId(i as u32 + 1),
                    declared_total,
                    counts: counts.to_vec(),
                }
            })
            .collect();
        Self { rows }
    }

    pub fn uniform(clients: usize, per_label: usize, num_labels: usize) -> Result<Self, DataError> {
        let rows = (0..clients)
            .map(|i| CountRow {
                client_id: ClientId(i as u32 + 1),
                declared_total: per_label * num_labels,
                counts: vec![per_label; num_labels],
            })
            .collect();
        Self::new(rows)
    }

    pub fn rows(&self) -> &[CountRow] {
        &self.rows
    }

    pub fn num_labels(&self) -> usize {
        self.rows[0].counts.len()
    }

    pub fn num_clients(&self) -> usize {
        self.rows.len()
    }

    /// Rows whose per-label counts disagree with their declared total.
    pub fn declared_mismatches(&self) -> Vec<ClientId> {
        self.rows
            .iter()
            .filter(|r| r.total() != r.declared_total)
            .map(|r| r.client_id)
            .collect()
    }

    /// Sum over clients of each label's count.
    pub fn label_totals(&self) -> Vec<usize> {
        let mut t = vec![0; self.num_labels()];
        for row in &self.rows {
            for (acc, c) in t.iter_mut().zip(&row.counts) {
                *acc += c;
            }
        }
        t
    }

    /// Multiplies every count by `factor`, rounding down but keeping nonzero
    /// entries at least 1. Zero entries stay zero.
    pub fn scaled(&self, factor: f64) -> Result<Self, DataError> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(DataError::Precondition(format!("scale factor {factor}")));
        }
        let scale = |c: usize| {
            if c == 0 {
                0
            } else {
                ((c as f64 * factor).floor() as usize).max(1)
            }
        };
        let rows = self
            .rows
            .iter()
            .map(|r| CountRow {
                client_id: r.client_id,
                declared_total: (r.declared_total as f64 * factor).floor() as usize,
                counts: r.counts.iter().map(|&c| scale(c)).collect(),
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("client_id,total");
        for l in 0..self.num_labels() {
            out.push_str(&format!(",label_{l}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{}", r.client_id, r.declared_total));
            for c in &r.counts {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, DataError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = reader.headers()?.clone();
        if headers.len() < 3
            || &headers[0] != "client_id"
            || &headers[1] != "total"
            || headers.iter().skip(2).enumerate().any(|(i, h)| h != format!("label_{i}"))
        {
            return Err(DataError::Schema(
                "count matrix header must be client_id,total,label_0..label_{K-1}".into(),
            ));
        }
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let field = |col: usize| -> Result<u64, DataError> {
                record[col].parse::<u64>().map_err(|_| DataError::Parse {
                    row: i + 1,
                    column: headers[col].to_string(),
                    value: record[col].to_string(),
                })
            };
            let client_id = ClientId(field(0)? as u32);
            let declared_total = field(1)? as usize;
            let counts = (2..record.len())
                .map(|c| field(c).map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(CountRow {
                client_id,
                declared_total,
                counts,
            });
        }
        Self::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::read_csv(File::open(path)?)
    }
}

/// Distributes `data` across clients so that each client receives exactly its
/// row of `counts` per label, sampling without replacement within each label.
pub fn partition_non_iid(
    data: &LabeledDataset,
    counts: &CountMatrix,
    seed: u64,
) -> Result<Vec<(ClientId, LabeledDataset)>, DataError> {
    if counts.num_labels() != data.num_labels() {
        return Err(DataError::Precondition(format!(
            "count matrix has {} labels, dataset has {}",
            counts.num_labels(),
            data.num_labels()
        )));
    }
    let available = data.label_histogram();
    let requested = counts.label_totals();
    let deficits: Vec<LabelDeficit> = (0..data.num_labels())
        .filter(|&l| requested[l] > available[l])
        .map(|l| LabelDeficit {
            label: l,
            requested: requested[l],
            available: available[l],
        })
        .collect();
    if !deficits.is_empty() {
        return Err(DataError::Infeasible(deficits));
    }

    let mut rng = seed::rng(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); data.num_labels()];
    for (i, &l) in data.labels().iter().enumerate() {
        pools[l].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; data.num_labels()];
    counts
        .rows()
        .iter()
        .map(|row| {
            let mut idx = Vec::with_capacity(row.total());
            for (l, &c) in row.counts.iter().enumerate() {
                idx.extend_from_slice(&pools[l][cursor[l]..cursor[l] + c]);
                cursor[l] += c;
            }
            Ok((row.client_id, data.subset(&idx)?))
        })
        .collect()
}

/// Reads a CSV with a header row. `label_column` is re-encoded to dense
/// integers by first appearance; every other column must be numeric.
pub fn read_csv<R: Read>(input: R, label_column: &str) -> Result<LabeledDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::Schema(format!("missing label column {label_column:?}")))?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut encoding: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                let next = encoding.len();
                labels.push(*encoding.entry(cell.to_string()).or_insert(next));
            } else {
                let v = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    DataError::Parse {
                        row,
                        column: headers[col].to_string(),
                        value: cell.to_string(),
                    }
                })?;
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(DataError::Precondition("csv has no data rows".into()));
    }
    if names.is_empty() {
        return Err(DataError::Schema("csv has no feature columns".into()));
    }
    let features = Array2::from_shape_vec((labels.len(), names.len()), values)
        .map_err(|e| DataError::Schema(e.to_string()))?;
    // at least two classes keep the classifier well defined
    let k = encoding.len().max(2);
    Ok(LabeledDataset::new(features, labels, k)?.with_feature_names(names))
}

pub fn load_csv(path: &Path, label_column: &str) -> Result<LabeledDataset, DataError> {
    read_csv(File::open(path)?, label_column)
}

pub fn write_csv<W: Write>(out: W, data: &LabeledDataset, label_column: &str) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_writer(out);
    let names: Vec<String> = match data.feature_names() {
        Some(n) => n.to_vec(),
        None => (0..data.dim()).map(|j| format!("x{j}")).collect(),
    };
    let mut header = names;
    header.push(label_column.to_string());
    writer.write_record(&header)?;
    for (row, &label) in data.features().rows().into_iter().zip(data.labels()) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        rec.push(label.to_string());
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

/// Stratified split: each label contributes `floor(n_label * test_fraction)`
/// rows to the test side. Both sides keep the input's row order.
pub fn split(
    data: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Precondition(format!(
            "test fraction {test_fraction} not in (0, 1)"
        )));
    }
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); data.num_labels()];
    for (i, &l) in data.labels().iter().enumerate() {
        by_label[l].push(i);
    }
    if let Some((label, pool)) = by_label.iter().enumerate().find(|(_, p)| p.len() == 1) {
        return Err(DataError::Stratification {
            label,
            count: pool.len(),
        });
    }
    let mut rng = seed::rng(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut pool in by_label {
        pool.shuffle(&mut rng);
        let n_test = test_count(pool.len(), test_fraction);
        test.extend_from_slice(&pool[..n_test]);
        train.extend_from_slice(&pool[n_test..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(DataError::Precondition(format!(
            "split with fraction {test_fraction} leaves one side empty"
        )));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train)?, data.subset(&test)?))
}

/// Rows of a label with `n` samples that go to the test side.
pub fn test_count(n: usize, fraction: f64) -> usize {
    // the epsilon keeps products like 0.29 * 100 from flooring one short
    ((n as f64 * fraction + 1e-9).floor() as usize).min(n)
}
