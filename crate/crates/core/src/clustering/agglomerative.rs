//! Average-linkage agglomerative clustering over a precomputed distance matrix.

use super::{check_k, ClusteringError, DistanceMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    /// Lowest member index of each merged cluster, `left < right`.
    pub left: usize,
    pub right: usize,
    /// Average pairwise distance between the two clusters at merge time.
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgglomerativeFit {
    pub labels: Vec<usize>,
    pub merges: Vec<Merge>,
}

/// Repeatedly merges the pair of clusters with the smallest average linkage
/// until `k` remain. Ties go to the pair whose lowest member indices are
/// lexicographically smallest.
pub fn agglomerative(dist: &DistanceMatrix, k: usize) -> Result<AgglomerativeFit, ClusteringError> {
    let n = dist.len();
    check_k(k, n)?;
    // Slot i holds the cluster whose lowest member is i; sums[i][j] is the
    // total distance over all member pairs across slots i and j.
    let mut sizes: Vec<usize> = vec![1; n];
    let mut alive: Vec<bool> = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut sums = dist.values.clone();
    let mut merges = Vec::with_capacity(n - k);

    for _ in 0..n - k {
        let mut best: Option<(usize, usize)> = None;
        let mut best_d = f64::INFINITY;
        for a in (0..n).filter(|&a| alive[a]) {
            for b in (a + 1..n).filter(|&b| alive[b]) {
                let d = sums[[a, b]] / (sizes[a] * sizes[b]) as f64;
                if d < best_d || best.is_none() {
                    best = Some((a, b));
                    best_d = d;
                }
            }
        }
        let (a, b) = best.expect("more than k clusters remain");
        for c in (0..n).filter(|&c| alive[c] && c != a && c != b) {
            let s = sums[[a, c]] + sums[[b, c]];
            sums[[a, c]] = s;
            sums[[c, a]] = s;
        }
        sizes[a] += sizes[b];
        alive[b] = false;
        for o in owner.iter_mut().filter(|o| **o == b) {
            *o = a;
        }
        merges.push(Merge {
            left: a,
            right: b,
            distance: best_d,
            size: sizes[a],
        });
    }

    let mut slot_label = vec![usize::MAX; n];
    let mut next = 0;
    let labels = owner
        .iter()
        .map(|&slot| {
            if slot_label[slot] == usize::MAX {
                slot_label[slot] = next;
                next += 1;
            }
            slot_label[slot]
        })
        .collect();
    Ok(AgglomerativeFit { labels, merges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ClientId;
    use ndarray::{array, Array2};

    fn dm(values: Array2<f64>) -> DistanceMatrix {
        DistanceMatrix {
            ids: (0..values.nrows() as u32).map(ClientId).collect(),
            values,
        }
    }

    #[test]
    fn k_equals_n_is_identity() {
        let d = dm(array![[0.0, 0.3, 0.5], [0.3, 0.0, 0.2], [0.5, 0.2, 0.0]]);
        let fit = agglomerative(&d, 3).unwrap();
        assert_eq!(fit.labels, vec![0, 1, 2]);
        assert!(fit.merges.is_empty());
    }

    #[test]
    fn unique_minimum_merges_first() {
        let d = dm(array![[0.0, 0.1, 0.9], [0.1, 0.0, 0.9], [0.9, 0.9, 0.0]]);
        let fit = agglomerative(&d, 2).unwrap();
        assert_eq!(fit.labels, vec![0, 0, 1]);
        assert_eq!(fit.merges[0].left, 0);
        assert_eq!(fit.merges[0].right, 1);
    }

    #[test]
    fn single_cluster_takes_n_minus_one_merges() {
        let d = dm(array![
            [0.0, 0.4, 0.7, 0.2],
            [0.4, 0.0, 0.1, 0.6],
            [0.7, 0.1, 0.0, 0.3],
            [0.2, 0.6, 0.3, 0.0]
        ]);
        let fit = agglomerative(&d, 1).unwrap();
        assert_eq!(fit.labels, vec![0; 4]);
        assert_eq!(fit.merges.len(), 3);
    }

    #[test]
    fn ties_resolve_to_lowest_indices() {
        let d = dm(array![[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]);
        let fit = agglomerative(&d, 2).unwrap();
        assert_eq!((fit.merges[0].left, fit.merges[0].right), (0, 1));
    }

    #[test]
    fn average_linkage_not_single_linkage() {
        // single linkage would join {0,1} with 2 (d(1,2)=0.3); the averages favour 3
        let d = dm(array![
            [0.0, 0.1, 0.9, 0.35],
            [0.1, 0.0, 0.3, 0.35],
            [0.9, 0.3, 0.0, 0.8],
            [0.35, 0.35, 0.8, 0.0]
        ]);
        let fit = agglomerative(&d, 2).unwrap();
        assert_eq!(fit.labels, vec![0, 0, 1, 0]);
    }

    #[test]
    fn k_zero_is_rejected() {
        let d = dm(array![[0.0, 1.0], [1.0, 0.0]]);
        assert!(agglomerative(&d, 0).is_err());
    }
}
