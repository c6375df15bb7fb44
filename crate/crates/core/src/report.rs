//! Writing a [`RunReport`] to disk. Every file is a pure function of the
//! report and is written through a temporary file plus rename.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metrics::Metrics;
use crate::nn::write_weight_csv;
use crate::pipeline::RunReport;
use crate::ClientId;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(String),
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// `global` or `cluster`.
    pub model: String,
    /// Clustering method; empty for the global model.
    pub method: String,
    pub cluster: Option<usize>,
    pub members: Vec<ClientId>,
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricsRow {
    fn new(model: &str, method: &str, cluster: Option<usize>, members: &[ClientId], m: &Metrics) -> Self {
        Self {
            model: model.into(),
            method: method.into(),
            cluster,
            members: members.to_vec(),
            balanced_accuracy: m.balanced_accuracy,
            precision: m.macro_precision,
            recall: m.macro_recall,
            f1: m.macro_f1,
        }
    }
}

pub fn metrics_rows(report: &RunReport) -> Vec<MetricsRow> {
    let mut rows = vec![MetricsRow::new(
        "global",
        "",
        None,
        &report.global.members,
        &report.global.metrics,
    )];
    for m in &report.methods {
        for (c, cluster) in m.clusters.iter().enumerate() {
            rows.push(MetricsRow::new(
                "cluster",
                &m.assignment.method,
                Some(c),
                &cluster.members,
                &cluster.metrics,
            ));
        }
    }
    rows
}

const METRICS_HEADER: &str = "model,method,cluster,members,balanced_accuracy,precision,recall,f1";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let members: Vec<String> = r.members.iter().map(|c| c.to_string()).collect();
        let cluster = r.cluster.map(|c| c.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.model,
            r.method,
            cluster,
            members.join(" "),
            r.balanced_accuracy,
            r.precision,
            r.recall,
            r.f1
        ));
    }
    out
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>, ReportError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| ReportError::Csv(e.to_string()))?;
        if rec.len() != 8 {
            return Err(ReportError::Csv(format!("expected 8 fields in {rec:?}")));
        }
        let bad = |what: &str| ReportError::Csv(format!("bad {what} in {rec:?}"));
        let float = |i: usize, what: &str| rec[i].parse::<f64>().map_err(|_| bad(what));
        let cluster = match &rec[2] {
            "" => None,
            s => Some(s.parse().map_err(|_| bad("cluster"))?),
        };
        let members = rec[3]
            .split_whitespace()
            .map(|s| s.parse().map(ClientId).map_err(|_| bad("members")))
            .collect::<Result<_, _>>()?;
        rows.push(MetricsRow {
            model: rec[0].to_string(),
            method: rec[1].to_string(),
            cluster,
            members,
            balanced_accuracy: float(4, "balanced_accuracy")?,
            precision: float(5, "precision")?,
            recall: float(6, "recall")?,
            f1: float(7, "f1")?,
        });
    }
    Ok(rows)
}

/// File name and contents of every report file, in emission order.
pub fn render(report: &RunReport) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let manifest = serde_json::to_string_pretty(&report.manifest).expect("manifest serializes") + "\n";
    files.push(("manifest.json".to_string(), manifest.into_bytes()));
    let mut weights = Vec::new();
    write_weight_csv(&mut weights, &report.weights).expect("writing to memory");
    files.push(("weights.csv".to_string(), weights));
    files.push(("distance_matrix.csv".to_string(), report.distances.to_csv().into_bytes()));
    files.push(("bic_curve.csv".to_string(), report.bic.to_csv().into_bytes()));
    for m in &report.methods {
        let name = &m.assignment.method;
        files.push((format!("assignments_{name}.csv"), m.assignment.to_csv().into_bytes()));
        for (c, cluster) in m.clusters.iter().enumerate() {
            files.push((format!("convergence_{name}_{c}.csv"), cluster.trace.to_csv().into_bytes()));
        }
    }
    files.push(("metrics.csv".to_string(), metrics_csv(&metrics_rows(report)).into_bytes()));
    files
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, ReportError> {
    let path = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| ReportError::Io { path: p, source }
    };
    let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
    f.write_all(bytes).map_err(io(&tmp))?;
    f.sync_all().map_err(io(&tmp))?;
    fs::rename(&tmp, &path).map_err(io(&path))?;
    Ok(path)
}

/// Writes every report file into `dir`, creating it if needed, and returns
/// the written paths.
pub fn emit_reports(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    render(report)
        .into_iter()
        .map(|(name, bytes)| write_atomic(dir, &name, &bytes))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_csv_round_trips() {
        let rows = vec![
            MetricsRow {
                model: "global".into(),
                method: String::new(),
                cluster: None,
                members: vec![ClientId(1), ClientId(2), ClientId(3)],
                balanced_accuracy: 0.875,
                precision: 0.1 + 0.2,
                recall: 1.0 / 3.0,
                f1: 0.0,
            },
            MetricsRow {
                model: "cluster".into(),
                method: "gmm".into(),
                cluster: Some(1),
                members: vec![ClientId(7)],
                balanced_accuracy: 1.0,
                precision: 0.5,
                recall: 0.25,
                f1: 2.0 / 7.0,
            },
        ];
        let text = metrics_csv(&rows);
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(read_metrics_csv(text.as_bytes()).unwrap(), rows);
    }

    #[test]
    fn short_metrics_row_is_rejected() {
        let text = format!("{METRICS_HEADER}\nglobal,,,1 2,0.5,0.5,0.5\n");
        assert!(read_metrics_csv(text.as_bytes()).is_err());
    }
}
