//! Lloyd's algorithm from k-means++ seeds.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_k, ClusteringError};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    /// Independent seedings; the lowest final WCSS wins.
    pub n_init: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    /// WCSS of the seeded assignment, then after every centroid update.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansFit {
    pub fn wcss(&self) -> f64 {
        *self.wcss_history.last().expect("history has the seeded entry")
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row indices chosen by k-means++ D^2 sampling.
pub(crate) fn kmeanspp_seeds<R: Rng + ?Sized>(points: ArrayView2<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `acc` just short of `target`
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            // all remaining points coincide with a seed
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    chosen
}

fn member_means(points: ArrayView2<f64>, labels: &[usize], k: usize) -> Array2<f64> {
    let mut sums = Array2::zeros((k, points.ncols()));
    let mut counts = vec![0usize; k];
    for (row, &l) in points.rows().into_iter().zip(labels) {
        let mut s = sums.row_mut(l);
        s += &row;
        counts[l] += 1;
    }
    for (mut s, &c) in sums.rows_mut().into_iter().zip(&counts) {
        if c > 0 {
            s /= c as f64;
        }
    }
    sums
}

/// Within-cluster sum of squared distances to member means.
pub fn wcss(points: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let means = member_means(points, labels, k);
    points
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &l)| sq_dist(row, means.row(l)))
        .sum()
}

fn total_cost(points: ArrayView2<f64>, labels: &[usize], centroids: &Array2<f64>) -> f64 {
    points
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &l)| sq_dist(row, centroids.row(l)))
        .sum()
}

/// Nearest-centroid step. A point only leaves its current cluster for a
/// strictly closer centroid.
fn assign(points: ArrayView2<f64>, centroids: &Array2<f64>, labels: &mut [usize]) {
    for (i, row) in points.rows().into_iter().enumerate() {
        let mut best = labels[i];
        let mut best_d = sq_dist(row, centroids.row(best));
        for (c, centroid) in centroids.rows().into_iter().enumerate() {
            let d = sq_dist(row, centroid);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        labels[i] = best;
    }
}

/// Gives each empty cluster the point farthest from its own centroid, taken
/// from clusters that keep at least one member.
fn repair_empty(points: ArrayView2<f64>, centroids: &mut Array2<f64>, labels: &mut [usize]) {
    let k = centroids.nrows();
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, row) in points.rows().into_iter().enumerate() {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = sq_dist(row, centroids.row(labels[i]));
            if d > far_d {
                far = Some(i);
                far_d = d;
            }
        }
        let i = far.expect("k <= n guarantees a donor cluster");
        labels[i] = empty;
        centroids.row_mut(empty).assign(&points.row(i));
    }
}

fn lloyd(points: ArrayView2<f64>, k: usize, options: &KMeansOptions, rng: &mut seed::Rng) -> KMeansFit {
    let seeds = kmeanspp_seeds(points, k, rng);
    let mut centroids = Array2::zeros((k, points.ncols()));
    for (c, &i) in seeds.iter().enumerate() {
        centroids.row_mut(c).assign(&points.row(i));
    }
    let mut labels = vec![0usize; points.nrows()];
    assign(points, &centroids, &mut labels);
    repair_empty(points, &mut centroids, &mut labels);
    let mut history = vec![total_cost(points, &labels, &centroids)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        let updated = member_means(points, &labels, k);
        let shift = updated
            .rows()
            .into_iter()
            .zip(centroids.rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0f64, f64::max);
        centroids = updated;
        history.push(total_cost(points, &labels, &centroids));
        if shift < options.tol {
            converged = true;
            break;
        }
        let before = labels.clone();
        assign(points, &centroids, &mut labels);
        repair_empty(points, &mut centroids, &mut labels);
        if labels != before {
            history.push(total_cost(points, &labels, &centroids));
        }
    }
    KMeansFit {
        labels,
        centroids,
        wcss_history: history,
        iterations,
        converged,
    }
}

/// K-Means on the rows of `points`. With `n_init > 1` the run with the lowest
/// final WCSS is returned (earliest run on ties).
pub fn kmeans(
    points: ArrayView2<f64>,
    k: usize,
    seed: u64,
    options: &KMeansOptions,
) -> Result<KMeansFit, ClusteringError> {
    check_k(k, points.nrows())?;
    if points.ncols() == 0 {
        return Err(ClusteringError::Precondition("points have no dimensions".into()));
    }
    let mut best: Option<KMeansFit> = None;
    for run in 0..options.n_init.max(1) {
        let mut rng = seed::rng(seed::derive(seed, &format!("kmeans/init{run}")));
        let fit = lloyd(points, k, options, &mut rng);
        if best.as_ref().is_none_or(|b| fit.wcss() < b.wcss()) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one run"))
}
