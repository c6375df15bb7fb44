use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use super::{
    agglomerative, gmm_fit, kmeans, ClusterAssignment, ClusteringError, DistanceMatrix, GmmOptions,
    KMeansOptions,
};
use crate::nn::{weight_matrix, WeightVector};
use crate::ClientId;

/// Everything a clustering method may look at: the raw weight vectors (one
/// row per client) and their cosine distance matrix, in the same client order.
pub struct ClusterInput<'a> {
    pub clients: Vec<ClientId>,
    pub points: ArrayView2<'a, f64>,
    pub distances: &'a DistanceMatrix,
}

impl<'a> ClusterInput<'a> {
    pub fn new(points: ArrayView2<'a, f64>, distances: &'a DistanceMatrix) -> Result<Self, ClusteringError> {
        if points.nrows() != distances.len() {
            return Err(ClusteringError::Precondition(format!(
                "{} weight rows but {} distance rows",
                points.nrows(),
                distances.len()
            )));
        }
        Ok(Self {
            clients: distances.ids.clone(),
            points,
            distances,
        })
    }
}

/// Owned points + distances for a weight set.
pub fn prepare(weights: &[WeightVector]) -> Result<(Array2<f64>, DistanceMatrix), ClusteringError> {
    let points = weight_matrix(weights).map_err(|e| ClusteringError::Precondition(e.to_string()))?;
    let distances = super::distance_matrix(weights)?;
    Ok((points, distances))
}

pub trait ClusteringMethod: Send + Sync {
    /// Registry key and the method tag stamped on assignments.
    fn name(&self) -> &'static str;

    fn cluster(&self, input: &ClusterInput<'_>, k: usize, seed: u64) -> Result<ClusterAssignment, ClusteringError>;
}

/// Centroid-based: Lloyd iterations on the raw weight vectors.
#[derive(Debug, Clone, Default)]
pub struct KMeansMethod {
    pub options: KMeansOptions,
}

impl ClusteringMethod for KMeansMethod {
    fn name(&self) -> &'static str {
        "kmeans"
    }

    fn cluster(&self, input: &ClusterInput<'_>, k: usize, seed: u64) -> Result<ClusterAssignment, ClusteringError> {
        let fit = kmeans(input.points, k, seed, &self.options)?;
        let centroids = fit.centroids.rows().into_iter().map(|r| r.to_vec()).collect();
        ClusterAssignment::new(self.name(), k, input.clients.clone(), fit.labels, Some(centroids))
    }
}

/// Hierarchical: average linkage over cosine distances.
#[derive(Debug, Clone, Default)]
pub struct AgglomerativeMethod;

impl ClusteringMethod for AgglomerativeMethod {
    fn name(&self) -> &'static str {
        "agglomerative"
    }

    fn cluster(&self, input: &ClusterInput<'_>, k: usize, _seed: u64) -> Result<ClusterAssignment, ClusteringError> {
        let fit = agglomerative(input.distances, k)?;
        ClusterAssignment::new(self.name(), k, input.clients.clone(), fit.labels, None)
    }
}

/// Distribution-based: diagonal GMM fitted by EM on the raw weight vectors.
#[derive(Debug, Clone, Default)]
pub struct GmmMethod {
    pub options: GmmOptions,
}

impl ClusteringMethod for GmmMethod {
    fn name(&self) -> &'static str {
        "gmm"
    }

    fn cluster(&self, input: &ClusterInput<'_>, k: usize, seed: u64) -> Result<ClusterAssignment, ClusteringError> {
        let fit = gmm_fit(input.points, k, seed, &self.options)?;
        let means = fit.model.means.rows().into_iter().map(|r| r.to_vec()).collect();
        ClusterAssignment::new(self.name(), k, input.clients.clone(), fit.labels, Some(means))
    }
}

/// Clustering methods keyed by name.
pub struct MethodRegistry {
    methods: BTreeMap<&'static str, Box<dyn ClusteringMethod>>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        Self {
            methods: BTreeMap::new(),
        }
    }

    pub fn with_options(kmeans: KMeansOptions, gmm: GmmOptions) -> Self {
        let mut r = Self::empty();
        r.register(Box::new(KMeansMethod { options: kmeans }));
        r.register(Box::new(AgglomerativeMethod));
        r.register(Box::new(GmmMethod { options: gmm }));
        r
    }

    /// Replaces any method already registered under the same name.
    pub fn register(&mut self, method: Box<dyn ClusteringMethod>) {
        self.methods.insert(method.name(), method);
    }

    pub fn get(&self, name: &str) -> Result<&dyn ClusteringMethod, ClusteringError> {
        self.methods
            .get(name)
            .map(|m| m.as_ref())
            .ok_or_else(|| ClusteringError::UnknownMethod(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }
}

impl Default for MethodRegistry {
    fn default() -> Self {
        Self::with_options(KMeansOptions::default(), GmmOptions::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Vec<WeightVector> {
        let centres = [[10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0]];
        (0..9)
            .map(|i| {
                let c = centres[i % 3];
                let jitter = 0.01 * i as f64;
                WeightVector {
                    client_id: ClientId(i as u32 + 1),
                    values: vec![c[0] + jitter, c[1] - jitter, c[2] + 2.0 * jitter],
                }
            })
            .collect()
    }

    #[test]
    fn defaults_are_registered_by_name() {
        let r = MethodRegistry::default();
        assert_eq!(r.names(), vec!["agglomerative", "gmm", "kmeans"]);
        assert!(matches!(r.get("spectral"), Err(ClusteringError::UnknownMethod(_))));
    }

    #[test]
    fn all_methods_agree_on_separated_blobs() {
        let ws = blobs();
        let (points, dist) = prepare(&ws).unwrap();
        let input = ClusterInput::new(points.view(), &dist).unwrap();
        let r = MethodRegistry::default();
        let results: Vec<_> = r
            .names()
            .into_iter()
            .map(|n| r.get(n).unwrap().cluster(&input, 3, 4).unwrap())
            .collect();
        for a in &results {
            assert_eq!(a.k, 3);
            assert_eq!(a.sizes(), vec![3, 3, 3]);
            assert!(a.same_partition(&results[0]));
        }
        assert_eq!(results[2].method, "kmeans");
    }

    struct Everything;

    impl ClusteringMethod for Everything {
        fn name(&self) -> &'static str {
            "one"
        }

        fn cluster(&self, input: &ClusterInput<'_>, _k: usize, _seed: u64) -> Result<ClusterAssignment, ClusteringError> {
            ClusterAssignment::new("one", 1, input.clients.clone(), vec![0; input.clients.len()], None)
        }
    }

    #[test]
    fn custom_methods_can_be_registered() {
        let mut r = MethodRegistry::empty();
        r.register(Box::new(Everything));
        let ws = blobs();
        let (points, dist) = prepare(&ws).unwrap();
        let input = ClusterInput::new(points.view(), &dist).unwrap();
        assert_eq!(r.get("one").unwrap().cluster(&input, 1, 0).unwrap().sizes(), vec![9]);
    }
}
