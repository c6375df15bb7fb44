//! Diagonal-covariance Gaussian mixture fitted by expectation-maximization.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::kmeans::kmeanspp_seeds;
use super::{check_k, ClusteringError};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmOptions {
    pub max_iter: usize,
    /// Stop once one EM step gains less log-likelihood than this.
    pub tol: f64,
    pub variance_floor: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
            variance_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Array1<f64>,
    /// `k x d`.
    pub means: Array2<f64>,
    /// `k x d`, every entry at least the variance floor.
    pub variances: Array2<f64>,
    /// Log-likelihood of the fitted data under this model.
    pub log_likelihood: f64,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// `ln pi_j + ln N(x_i | mu_j, diag var_j)` for every point and component.
    pub fn log_joint(&self, points: ArrayView2<f64>) -> Array2<f64> {
        let k = self.k();
        let mut out = Array2::zeros((points.nrows(), k));
        let consts: Vec<f64> = (0..k)
            .map(|j| {
                self.weights[j].ln()
                    - 0.5
                        * self
                            .variances
                            .row(j)
                            .iter()
                            .map(|v| (2.0 * PI * v).ln())
                            .sum::<f64>()
            })
            .collect();
        for (i, x) in points.rows().into_iter().enumerate() {
            for j in 0..k {
                let quad: f64 = x
                    .iter()
                    .zip(self.means.row(j))
                    .zip(self.variances.row(j))
                    .map(|((xi, m), v)| (xi - m) * (xi - m) / v)
                    .sum();
                out[[i, j]] = consts[j] - 0.5 * quad;
            }
        }
        out
    }

    /// Total log-likelihood and normalized responsibilities, in log space.
    pub fn e_step(&self, points: ArrayView2<f64>) -> (f64, Array2<f64>) {
        let mut resp = self.log_joint(points);
        let mut ll = 0.0;
        for mut row in resp.rows_mut() {
            let lse = log_sum_exp(row.iter().copied());
            ll += lse;
            row.mapv_inplace(|v| (v - lse).exp());
        }
        (ll, resp)
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    pub responsibilities: Array2<f64>,
    /// Hard assignment: argmax responsibility, every component non-empty.
    pub labels: Vec<usize>,
    /// Log-likelihood before the first M-step and after each one.
    pub ll_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Effective component mass below which a component counts as collapsed.
const MIN_MASS: f64 = 10.0 * f64::EPSILON;

fn m_step(points: ArrayView2<f64>, resp: &Array2<f64>, floor: f64) -> (Array1<f64>, Array2<f64>, Array2<f64>) {
    let (n, d) = points.dim();
    let k = resp.ncols();
    let mass: Array1<f64> = resp.sum_axis(Axis(0)).mapv(|m| m.max(MIN_MASS));
    let mut means = resp.t().dot(&points);
    for (mut row, &m) in means.rows_mut().into_iter().zip(mass.iter()) {
        row /= m;
    }
    let mut variances = Array2::<f64>::zeros((k, d));
    for j in 0..k {
        for i in 0..n {
            let r = resp[[i, j]];
            if r == 0.0 {
                continue;
            }
            for c in 0..d {
                let diff = points[[i, c]] - means[[j, c]];
                variances[[j, c]] += r * diff * diff;
            }
        }
        for c in 0..d {
            let v: f64 = variances[[j, c]] / mass[j];
            variances[[j, c]] = v.max(floor);
        }
    }
    let total = mass.sum();
    (mass / total, means, variances)
}

fn hard_labels(resp: &Array2<f64>) -> Vec<usize> {
    let k = resp.ncols();
    let mut labels: Vec<usize> = resp
        .rows()
        .into_iter()
        .map(|r| crate::nn::argmax(r.iter().copied()))
        .collect();
    // a component that wins no point takes its most responsible point from a
    // component that keeps at least one other member
    loop {
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return labels;
        };
        let donor = (0..labels.len())
            .filter(|&i| counts[labels[i]] >= 2)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if resp[[b, empty]] >= resp[[i, empty]] => Some(b),
                _ => Some(i),
            })
            .expect("k <= n guarantees a donor");
        labels[donor] = empty;
    }
}

/// Fits a `k`-component diagonal GMM. Means start at k-means++ seeds, variances
/// at the per-dimension data variance, weights uniform.
pub fn gmm_fit(
    points: ArrayView2<f64>,
    k: usize,
    seed: u64,
    options: &GmmOptions,
) -> Result<GmmFit, ClusteringError> {
    let (n, d) = points.dim();
    check_k(k, n)?;
    if d == 0 {
        return Err(ClusteringError::Precondition("points have no dimensions".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(ClusteringError::Precondition("non-finite coordinate".into()));
    }
    let floor = options.variance_floor;
    if !(floor > 0.0) {
        return Err(ClusteringError::Precondition(format!("variance floor {floor}")));
    }

    let mut rng = seed::rng(seed);
    let seeds = kmeanspp_seeds(points, k, &mut rng);
    let data_var = points.var_axis(Axis(0), 0.0).mapv(|v| v.max(floor));
    let mut model = GmmModel {
        weights: Array1::from_elem(k, 1.0 / k as f64),
        means: points.select(Axis(0), &seeds),
        variances: Array2::from_shape_fn((k, d), |(_, c)| data_var[c]),
        log_likelihood: f64::NEG_INFINITY,
    };

    let (mut ll, mut resp) = model.e_step(points);
    let mut history = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        let (weights, means, variances) = m_step(points, &resp, floor);
        model.weights = weights;
        model.means = means;
        model.variances = variances;
        let (next_ll, next_resp) = model.e_step(points);
        history.push(next_ll);
        let gain = next_ll - ll;
        ll = next_ll;
        resp = next_resp;
        if gain < options.tol {
            converged = true;
            break;
        }
    }
    model.log_likelihood = ll;
    let labels = hard_labels(&resp);
    Ok(GmmFit {
        model,
        responsibilities: resp,
        labels,
        ll_history: history,
        iterations,
        converged,
    })
}
