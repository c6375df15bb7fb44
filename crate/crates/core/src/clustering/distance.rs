use std::io::Read;

use ndarray::Array2;

use super::ClusteringError;
use crate::nn::WeightVector;
use crate::ClientId;

/// `a . b / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, ClusteringError> {
    if a.len() != b.len() {
        return Err(ClusteringError::LengthMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(ClusteringError::ZeroVector(None));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Pairwise cosine distances `1 - similarity` between clients.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub ids: Vec<ClientId>,
    pub values: Array2<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.len();
        (0..n).all(|i| self.values[[i, i]] == 0.0)
            && (0..n).all(|i| (0..i).all(|j| (self.values[[i, j]] - self.values[[j, i]]).abs() <= tol))
    }

    /// Header of client ids, then one row of distances per client at 6 decimals.
    pub fn to_csv(&self) -> String {
        let header: Vec<String> = self.ids.iter().map(|c| c.to_string()).collect();
        let mut out = header.join(",");
        out.push('\n');
        for row in self.values.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, ClusteringError> {
        let mut reader = csv::Reader::from_reader(input);
        let csv_err = |e: csv::Error| ClusteringError::Csv(e.to_string());
        let ids = reader
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(|h| {
                h.trim()
                    .parse::<u32>()
                    .map(ClientId)
                    .map_err(|_| ClusteringError::Csv(format!("bad client id {h:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let n = ids.len();
        let mut values = Vec::with_capacity(n * n);
        let mut rows = 0;
        for record in reader.records() {
            let record = record.map_err(csv_err)?;
            for cell in record.iter() {
                values.push(
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|_| ClusteringError::Csv(format!("bad distance {cell:?}")))?,
                );
            }
            rows += 1;
        }
        if rows != n {
            return Err(ClusteringError::Csv(format!("{rows} rows for {n} clients")));
        }
        let values = Array2::from_shape_vec((n, n), values).map_err(|e| ClusteringError::Csv(e.to_string()))?;
        Ok(Self { ids, values })
    }
}

pub fn distance_matrix(weights: &[WeightVector]) -> Result<DistanceMatrix, ClusteringError> {
    if weights.len() < 2 {
        return Err(ClusteringError::Precondition(format!(
            "distance matrix needs >= 2 vectors, got {}",
            weights.len()
        )));
    }
    for w in weights {
        if w.values.iter().all(|&v| v == 0.0) {
            return Err(ClusteringError::ZeroVector(Some(w.client_id)));
        }
    }
    let n = weights.len();
    let mut values = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..i {
            let d = 1.0 - cosine_similarity(&weights[i].values, &weights[j].values)?;
            values[[i, j]] = d;
            values[[j, i]] = d;
        }
    }
    Ok(DistanceMatrix {
        ids: weights.iter().map(|w| w.client_id).collect(),
        values,
    })
}
