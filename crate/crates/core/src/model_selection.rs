//! Choosing the cluster count by the Bayesian information criterion over
//! diagonal Gaussian mixture fits.

use std::io::Read;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::gmm::log_sum_exp;
use crate::clustering::{gmm_fit, ClusteringError, GmmFit, GmmModel, GmmOptions};
use crate::seed;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("model has dimension {expected}, data has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error("csv: {0}")]
    Csv(String),
}

/// `sum_i ln sum_j pi_j N(x_i | mu_j, diag var_j)`, evaluated in log space.
pub fn log_likelihood(gmm: &GmmModel, points: ArrayView2<f64>) -> Result<f64, SelectionError> {
    if gmm.dim() != points.ncols() {
        return Err(SelectionError::DimensionMismatch {
            expected: gmm.dim(),
            actual: points.ncols(),
        });
    }
    Ok(gmm
        .log_joint(points)
        .rows()
        .into_iter()
        .map(|r| log_sum_exp(r.iter().copied()))
        .sum())
}

/// Free parameters of a `k`-component diagonal GMM in `d` dimensions:
/// a mean and a variance per dimension per component, plus `k - 1` weights.
pub fn parameter_count(k: usize, d: usize) -> usize {
    k * 2 * d + k - 1
}

pub fn bic_score(log_likelihood: f64, parameters: usize, n: usize) -> f64 {
    -2.0 * log_likelihood + parameters as f64 * (n as f64).ln()
}

pub fn bic(gmm: &GmmModel, points: ArrayView2<f64>) -> Result<f64, SelectionError> {
    let n = points.nrows();
    if n < 2 {
        return Err(SelectionError::Precondition(format!("BIC needs n >= 2, got {n}")));
    }
    let ll = log_likelihood(gmm, points)?;
    Ok(bic_score(ll, parameter_count(gmm.k(), gmm.dim()), n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicRecord {
    pub k: usize,
    pub log_likelihood: f64,
    pub m_p: usize,
    pub n: usize,
    pub bic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicResult {
    pub records: Vec<BicRecord>,
    pub selected_k: usize,
}

impl BicResult {
    /// Selects the record with the lowest score; ties go to the smallest k.
    pub fn from_records(mut records: Vec<BicRecord>) -> Result<Self, SelectionError> {
        if records.is_empty() {
            return Err(SelectionError::Precondition("no BIC records".into()));
        }
        records.sort_by_key(|r| r.k);
        let selected_k = records
            .iter()
            .fold(None::<&BicRecord>, |best, r| match best {
                Some(b) if b.bic <= r.bic => Some(b),
                _ => Some(r),
            })
            .map(|r| r.k)
            .expect("non-empty");
        Ok(Self { records, selected_k })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,log_likelihood,m_p,n,bic\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{}\n", r.k, r.log_likelihood, r.m_p, r.n, r.bic));
        }
        out
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, SelectionError> {
        let mut reader = csv::Reader::from_reader(input);
        let mut records = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| SelectionError::Csv(e.to_string()))?;
            let field = |i: usize| -> Result<&str, SelectionError> {
                rec.get(i).ok_or_else(|| SelectionError::Csv(format!("short record {rec:?}")))
            };
            let bad = |what: &str| SelectionError::Csv(format!("bad {what} in {rec:?}"));
            records.push(BicRecord {
                k: field(0)?.parse().map_err(|_| bad("k"))?,
                log_likelihood: field(1)?.parse().map_err(|_| bad("log_likelihood"))?,
                m_p: field(2)?.parse().map_err(|_| bad("m_p"))?,
                n: field(3)?.parse().map_err(|_| bad("n"))?,
                bic: field(4)?.parse().map_err(|_| bad("bic"))?,
            });
        }
        Self::from_records(records)
    }
}

/// Best of `restarts` EM fits by log-likelihood; the earliest restart wins ties.
pub fn best_fit(
    points: ArrayView2<f64>,
    k: usize,
    seed: u64,
    restarts: usize,
    options: &GmmOptions,
) -> Result<GmmFit, SelectionError> {
    let mut best: Option<GmmFit> = None;
    for r in 0..restarts.max(1) {
        let fit = gmm_fit(points, k, seed::derive(seed, &format!("k{k}/restart{r}")), options)?;
        if best
            .as_ref()
            .is_none_or(|b| fit.model.log_likelihood > b.model.log_likelihood)
        {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Fits every k in `1..=k_max` and picks the lowest BIC. Per-k fits run on the
/// current rayon pool; the result does not depend on its size.
pub fn select_k(
    points: ArrayView2<f64>,
    k_max: usize,
    seed: u64,
    restarts: usize,
    options: &GmmOptions,
) -> Result<BicResult, SelectionError> {
    let n = points.nrows();
    if k_max == 0 || k_max > n {
        return Err(SelectionError::Precondition(format!("k_max = {k_max} must be in 1..={n}")));
    }
    if n < 2 {
        return Err(SelectionError::Precondition(format!("BIC needs n >= 2, got {n}")));
    }
    let records = (1..=k_max)
        .into_par_iter()
        .map(|k| {
            let fit = best_fit(points, k, seed, restarts, options)?;
            let m_p = parameter_count(k, points.ncols());
            let ll = log_likelihood(&fit.model, points)?;
            Ok(BicRecord {
                k,
                log_likelihood: ll,
                m_p,
                n,
                bic: bic_score(ll, m_p, n),
            })
        })
        .collect::<Result<Vec<_>, SelectionError>>()?;
    BicResult::from_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array2, Axis};
    use rand_distr::{Distribution, StandardNormal};

    fn model_1d(mean: f64, var: f64) -> GmmModel {
        GmmModel {
            weights: Array1::from(vec![1.0]),
            means: array![[mean]],
            variances: array![[var]],
            log_likelihood: 0.0,
        }
    }

    #[test]
    fn point_at_mean_of_unit_gaussian() {
        let ll = log_likelihood(&model_1d(0.0, 1.0), array![[0.0]].view()).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((ll - expected).abs() < 1e-15);
        assert!((ll + 0.918939).abs() < 1e-6);
    }

    #[test]
    fn wider_variance_lowers_density_at_mode() {
        let p = array![[3.0]];
        let a = log_likelihood(&model_1d(3.0, 1.0), p.view()).unwrap();
        let b = log_likelihood(&model_1d(3.0, 2.0), p.view()).unwrap();
        assert!(b < a);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            log_likelihood(&model_1d(0.0, 1.0), array![[0.0, 1.0]].view()),
            Err(SelectionError::DimensionMismatch { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn single_component_fit_matches_closed_form_mle() {
        let mut rng = seed::rng(4);
        let p: Array2<f64> = Array2::from_shape_fn((30, 3), |_| StandardNormal.sample(&mut rng));
        let fit = gmm_fit(p.view(), 1, 0, &GmmOptions::default()).unwrap();
        // MLE of a diagonal Gaussian: -n/2 * sum_d (ln(2 pi var_d) + 1)
        let var = p.var_axis(Axis(0), 0.0);
        let n = p.nrows() as f64;
        let closed = -0.5 * n * var.iter().map(|v| (2.0 * std::f64::consts::PI * v).ln() + 1.0).sum::<f64>();
        let ll = log_likelihood(&fit.model, p.view()).unwrap();
        assert!((ll - closed).abs() < 1e-9, "{ll} vs {closed}");
    }

    #[test]
    fn parameter_count_diagonal() {
        assert_eq!(parameter_count(3, 4), 26);
        assert_eq!(parameter_count(1, 72), 144);
    }

    #[test]
    fn bic_formula_instantiation() {
        let m = model_1d(0.0, 1.0);
        let p = Array2::from_shape_fn((15, 1), |(i, _)| i as f64 / 10.0 - 0.7);
        let ll = log_likelihood(&m, p.view()).unwrap();
        let b = bic(&m, p.view()).unwrap();
        assert!((b - (-2.0 * ll + 2.0 * 15f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn bic_needs_two_points() {
        assert!(bic(&model_1d(0.0, 1.0), array![[0.0]].view()).is_err());
    }

    #[test]
    fn penalty_strictly_increases_with_parameters() {
        for n in 3..50 {
            assert!(bic_score(-10.0, 5, n) < bic_score(-10.0, 6, n));
        }
    }

    #[test]
    fn argmin_fixture_picks_three() {
        let scores = [-298.47, -423.66, -468.54, -342.25, -416.19, -363.91, -273.43, -201.97, -113.34];
        let records = scores
            .iter()
            .enumerate()
            .map(|(i, &bic)| BicRecord {
                k: i + 1,
                log_likelihood: 0.0,
                m_p: 1,
                n: 15,
                bic,
            })
            .collect();
        assert_eq!(BicResult::from_records(records).unwrap().selected_k, 3);
    }

    #[test]
    fn ties_pick_smallest_k() {
        let rec = |k, bic| BicRecord {
            k,
            log_likelihood: 0.0,
            m_p: 1,
            n: 2,
            bic,
        };
        let r = BicResult::from_records(vec![rec(3, -5.0), rec(1, 0.0), rec(2, -5.0)]).unwrap();
        assert_eq!(r.selected_k, 2);
    }

    #[test]
    fn extra_component_raises_ll_but_not_bic_on_one_blob() {
        let mut rng = seed::rng(21);
        let p: Array2<f64> = Array2::from_shape_fn((60, 2), |_| StandardNormal.sample(&mut rng));
        let r = select_k(p.view(), 2, 3, 5, &GmmOptions::default()).unwrap();
        assert!(r.records[1].log_likelihood >= r.records[0].log_likelihood);
        assert!(r.records[1].bic > r.records[0].bic);
        assert_eq!(r.selected_k, 1);
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = seed::rng(1);
        let p: Array2<f64> = Array2::from_shape_fn((20, 2), |_| StandardNormal.sample(&mut rng));
        let r = select_k(p.view(), 4, 0, 2, &GmmOptions::default()).unwrap();
        assert_eq!(BicResult::read_csv(r.to_csv().as_bytes()).unwrap(), r);
    }
}
