//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{GmmOptions, KMeansOptions, MethodRegistry};
use crate::data::{CountMatrix, CountRow};
use crate::lr_schedule::CyclicalSchedule;
use crate::nn::TrainOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Where `run` writes reports; the CLI's `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Rayon worker threads; 0 uses one per core. Results do not depend on it.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    /// Cluster count override; the BIC choice is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default = "default_fraction")]
    pub meta_fraction: f64,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
    pub dataset: DatasetConfig,
    pub counts: CountsConfig,
    #[serde(default)]
    pub clients: ClientsConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
}

fn default_methods() -> Vec<String> {
    vec!["kmeans".into(), "agglomerative".into(), "gmm".into()]
}

fn default_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// One Gaussian blob per label, centred at `separation` along its own axis.
    /// Per-label sample counts are sized so the count matrix is feasible.
    Synthetic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        num_labels: Option<usize>,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_noise")]
        scale: f64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
    },
}

fn default_dim() -> usize {
    16
}

fn default_separation() -> f64 {
    8.0
}

fn default_noise() -> f64 {
    1.0
}

/// Per-client label counts. `scale` multiplies every count (floored, nonzero
/// entries kept at least 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CountsConfig {
    /// The built-in 15-subject table; with `clients` set, rows are cycled.
    TableOne {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clients: Option<usize>,
        #[serde(default = "default_table_scale")]
        scale: f64,
    },
    File {
        path: PathBuf,
        #[serde(default = "unit_scale")]
        scale: f64,
    },
    Uniform {
        clients: usize,
        per_label: usize,
        num_labels: usize,
    },
    Inline {
        rows: Vec<CountRow>,
        #[serde(default = "unit_scale")]
        scale: f64,
    },
}

fn default_table_scale() -> f64 {
    0.01
}

fn unit_scale() -> f64 {
    1.0
}

impl CountsConfig {
    pub fn resolve(&self) -> Result<CountMatrix, ConfigError> {
        let bad = |e: crate::data::DataError| invalid(format!("counts: {e}"));
        match self {
            CountsConfig::TableOne { clients, scale } => {
                let m = match clients {
                    Some(n) => CountMatrix::table_one_cycled(*n),
                    None => CountMatrix::table_one(),
                };
                if m.num_clients() == 0 {
                    return Err(invalid("counts: table_one with 0 clients"));
                }
                m.scaled(*scale).map_err(bad)
            }
            CountsConfig::File { path, scale } => CountMatrix::load(path).and_then(|m| m.scaled(*scale)).map_err(bad),
            CountsConfig::Uniform {
                clients,
                per_label,
                num_labels,
            } => CountMatrix::uniform(*clients, *per_label, *num_labels).map_err(bad),
            CountsConfig::Inline { rows, scale } => {
                CountMatrix::new(rows.clone()).and_then(|m| m.scaled(*scale)).map_err(bad)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientsConfig {
    /// Hidden layer stacks, assigned round robin by client order. All must end
    /// in the same width.
    pub architectures: Vec<Vec<usize>>,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: CyclicalSchedule,
}

impl Default for ClientsConfig {
    fn default() -> Self {
        Self {
            architectures: vec![vec![32, 16], vec![64, 16], vec![16, 16]],
            epochs: 100,
            batch_size: 32,
            schedule: CyclicalSchedule::default(),
        }
    }
}

impl ClientsConfig {
    pub fn training(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: CyclicalSchedule,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            schedule: CyclicalSchedule::default(),
        }
    }
}

impl MetaConfig {
    pub fn training(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Largest k tried by BIC; defaults to `min(9, clients)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
    pub restarts: usize,
    pub gmm: GmmOptions,
    pub kmeans: KMeansOptions,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k_max: None,
            restarts: 5,
            gmm: GmmOptions::default(),
            kmeans: KMeansOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that can be checked without touching data and
    /// returns the resolved count matrix.
    pub fn validate(&self) -> Result<CountMatrix, ConfigError> {
        for (name, f) in [("meta_fraction", self.meta_fraction), ("test_fraction", self.test_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(invalid(format!("{name} = {f} must be in (0, 1)")));
            }
        }
        if self.meta_fraction + self.test_fraction >= 1.0 {
            return Err(invalid("meta_fraction + test_fraction must be < 1"));
        }
        let registry = MethodRegistry::default();
        for (i, m) in self.methods.iter().enumerate() {
            registry.get(m).map_err(|e| invalid(e.to_string()))?;
            if self.methods[..i].contains(m) {
                return Err(invalid(format!("method {m:?} listed twice")));
            }
        }

        let counts = self.counts.resolve()?;
        let n = counts.num_clients();
        if n < 2 {
            return Err(invalid(format!("need at least 2 clients, got {n}")));
        }
        if let Some(k) = self.k {
            if k == 0 || k > n {
                return Err(invalid(format!("k = {k} must be in 1..={n}")));
            }
        }
        if let Some(k_max) = self.selection.k_max {
            if k_max == 0 || k_max > n {
                return Err(invalid(format!("selection.k_max = {k_max} must be in 1..={n}")));
            }
        }
        if self.selection.restarts == 0 {
            return Err(invalid("selection.restarts must be >= 1"));
        }

        let archs = &self.clients.architectures;
        if archs.is_empty() || archs.iter().any(|a| a.is_empty() || a.contains(&0)) {
            return Err(invalid("clients.architectures must be non-empty lists of positive widths"));
        }
        let width = archs[0].last();
        if archs.iter().any(|a| a.last() != width) {
            return Err(invalid("all client architectures must share the penultimate width"));
        }
        for (name, t) in [("clients", self.clients.training()), ("meta", self.meta.training())] {
            if t.epochs == 0 || t.batch_size == 0 {
                return Err(invalid(format!("{name}: epochs and batch_size must be >= 1")));
            }
        }
        self.clients
            .schedule
            .validate()
            .map_err(|e| invalid(format!("clients.schedule: {e}")))?;
        self.meta
            .schedule
            .validate()
            .map_err(|e| invalid(format!("meta.schedule: {e}")))?;

        if let DatasetConfig::Synthetic {
            num_labels,
            dim,
            separation,
            scale,
        } = &self.dataset
        {
            let k = num_labels.unwrap_or(counts.num_labels());
            if k != counts.num_labels() {
                return Err(invalid(format!(
                    "dataset has {k} labels, count matrix has {}",
                    counts.num_labels()
                )));
            }
            if *dim < k {
                return Err(invalid(format!("synthetic dim {dim} must be >= num_labels {k}")));
            }
            if !(separation.is_finite() && scale.is_finite() && *scale >= 0.0) {
                return Err(invalid("synthetic separation and scale must be finite, scale >= 0"));
            }
        }
        Ok(counts)
    }

    pub fn k_max(&self, clients: usize) -> usize {
        self.selection.k_max.unwrap_or(clients.min(9))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7

[dataset]
source = "synthetic"

[counts]
source = "table_one"
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.methods, vec!["kmeans", "agglomerative", "gmm"]);
        assert_eq!(c.selection.restarts, 5);
        assert_eq!(c.clients.architectures[1], vec![64, 16]);
        let counts = c.validate().unwrap();
        assert_eq!(counts.num_clients(), 15);
        assert_eq!(counts.rows()[0].counts[0], 28);
        assert_eq!(c.k_max(15), 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[clients]\nepoch = 3\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(ConfigError::Parse(_))));
        let text = format!("{MINIMAL}\n[meta.schedule]\nmax = 0.1\n");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn fractions_must_leave_room_for_clients() {
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.meta_fraction = 0.5;
        c.test_fraction = 0.5;
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
        c.test_fraction = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn one_client_is_rejected() {
        let text = "seed = 1\n[dataset]\nsource = \"synthetic\"\n[counts]\nsource = \"uniform\"\nclients = 1\nper_label = 4\nnum_labels = 3\n";
        let c = RunConfig::from_toml(text).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("at least 2 clients"));
    }

    #[test]
    fn penultimate_widths_must_agree() {
        let text = format!("{MINIMAL}\n[clients]\narchitectures = [[8, 4], [8, 5]]\n");
        let c = RunConfig::from_toml(&text).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_method_and_bad_k() {
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.methods = vec!["spectral".into()];
        assert!(c.validate().is_err());
        c.methods = vec!["gmm".into()];
        c.k = Some(16);
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.k = Some(3);
        c.counts = CountsConfig::Inline {
            rows: CountMatrix::table_one().rows()[..2].to_vec(),
            scale: 0.5,
        };
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
