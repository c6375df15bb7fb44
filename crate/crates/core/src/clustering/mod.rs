//! Grouping clients by their output-layer weight vectors.
//!
//! Three interchangeable methods live behind [`ClusteringMethod`] and are looked
//! up by name in a [`MethodRegistry`]: centroid-based K-Means, average-linkage
//! agglomerative clustering over cosine distances, and a diagonal Gaussian
//! mixture fitted by EM.

use std::io::Read;

use thiserror::Error;

use crate::ClientId;

pub mod agglomerative;
pub mod distance;
pub mod gmm;
pub mod kmeans;
pub mod registry;

pub use agglomerative::{agglomerative, AgglomerativeFit, Merge};
pub use distance::{cosine_similarity, distance_matrix, DistanceMatrix};
pub use gmm::{gmm_fit, GmmFit, GmmModel, GmmOptions};
pub use kmeans::{kmeans, wcss, KMeansFit, KMeansOptions};
pub use registry::{
    prepare, AgglomerativeMethod, ClusterInput, ClusteringMethod, GmmMethod, KMeansMethod, MethodRegistry,
};

#[derive(Debug, Error)]
pub enum ClusteringError {
    #[error("cosine similarity undefined for a zero vector{}", client_suffix(.0))]
    ZeroVector(Option<ClientId>),
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("k = {k} must be in 1..={n}")]
    InvalidK { k: usize, n: usize },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("unknown clustering method {0:?}")]
    UnknownMethod(String),
    #[error("csv: {0}")]
    Csv(String),
}

fn client_suffix(c: &Option<ClientId>) -> String {
    c.map(|id| format!(" (client {id})")).unwrap_or_default()
}

pub(crate) fn check_k(k: usize, n: usize) -> Result<(), ClusteringError> {
    if k == 0 || k > n {
        return Err(ClusteringError::InvalidK { k, n });
    }
    Ok(())
}

/// Client to cluster mapping produced by one method.
///
/// Cluster indices are canonical: clusters are numbered by the position of
/// their first member in `clients`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub method: String,
    pub k: usize,
    pub clients: Vec<ClientId>,
    pub labels: Vec<usize>,
    /// Per-cluster centre in the clustered space, when the method has one.
    pub centroids: Option<Vec<Vec<f64>>>,
}

impl ClusterAssignment {
    /// Builds a canonical assignment. Every index in `0..k` must be used.
    pub fn new(
        method: impl Into<String>,
        k: usize,
        clients: Vec<ClientId>,
        labels: Vec<usize>,
        centroids: Option<Vec<Vec<f64>>>,
    ) -> Result<Self, ClusteringError> {
        if clients.len() != labels.len() {
            return Err(ClusteringError::Precondition(format!(
                "{} clients but {} labels",
                clients.len(),
                labels.len()
            )));
        }
        check_k(k, clients.len())?;
        let mut unique = clients.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != clients.len() {
            return Err(ClusteringError::Precondition("duplicate client id".into()));
        }
        let (labels, order) = canonicalize(&labels, k)?;
        let centroids = centroids.map(|c| order.iter().map(|&old| c[old].clone()).collect());
        Ok(Self {
            method: method.into(),
            k,
            clients,
            labels,
            centroids,
        })
    }

    pub fn cluster_of(&self, client: ClientId) -> Option<usize> {
        self.clients
            .iter()
            .position(|&c| c == client)
            .map(|i| self.labels[i])
    }

    /// Members of `cluster` in ascending client id order.
    pub fn members(&self, cluster: usize) -> Vec<ClientId> {
        let mut m: Vec<ClientId> = self
            .clients
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == cluster)
            .map(|(&c, _)| c)
            .collect();
        m.sort_unstable();
        m
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("client_id,cluster\n");
        for (c, l) in self.clients.iter().zip(&self.labels) {
            out.push_str(&format!("{c},{l}\n"));
        }
        out
    }

    pub fn read_csv<R: Read>(method: &str, input: R) -> Result<Self, ClusteringError> {
        let mut reader = csv::Reader::from_reader(input);
        let mut clients = Vec::new();
        let mut labels = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| ClusteringError::Csv(e.to_string()))?;
            let parse = |i: usize| {
                record
                    .get(i)
                    .and_then(|f| f.trim().parse::<u32>().ok())
                    .ok_or_else(|| ClusteringError::Csv(format!("bad record {record:?}")))
            };
            clients.push(ClientId(parse(0)?));
            labels.push(parse(1)? as usize);
        }
        let k = labels.iter().max().map_or(0, |&m| m + 1);
        Self::new(method, k, clients, labels, None)
    }

    /// True when both assignments induce the same partition of the clients.
    pub fn same_partition(&self, other: &ClusterAssignment) -> bool {
        if self.clients != other.clients {
            return false;
        }
        let n = self.labels.len();
        (0..n).all(|i| {
            (0..n).all(|j| (self.labels[i] == self.labels[j]) == (other.labels[i] == other.labels[j]))
        })
    }
}

/// Relabels clusters by first appearance. Returns the new labels and, for each
/// new index, the old index it came from.
fn canonicalize(labels: &[usize], k: usize) -> Result<(Vec<usize>, Vec<usize>), ClusteringError> {
    let mut map = vec![usize::MAX; k];
    let mut order = Vec::with_capacity(k);
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        if l >= k {
            return Err(ClusteringError::Precondition(format!("cluster index {l} >= k = {k}")));
        }
        if map[l] == usize::MAX {
            map[l] = order.len();
            order.push(l);
        }
        out.push(map[l]);
    }
    if order.len() != k {
        return Err(ClusteringError::Precondition(format!(
            "only {} of {k} clusters have members",
            order.len()
        )));
    }
    Ok((out, order))
}
