//! Experiment configuration: a strict JSON document with documented defaults.
//!
//! ```json
//! {
//!   "dataset": {"blobs": {"classes": 3, "per_class": 300, "dim": 2, "separation": 6.0}},
//!   "objectives": ["softmax", "svm", "lda"],
//!   "architecture": [{"type": "dense", "in": 2, "out": 32}, {"type": "relu"},
//!                    {"type": "dense", "in": 32, "out": 3}],
//!   "eta": 0.01, "epochs": 10, "batch_size": 64, "seed": 0,
//!   "lambda_svm": 1.0, "eps_lda": 0.001, "min_per_class": 4,
//!   "bpa_refresh_every": 1, "mode": "shared-trunk", "unified": true
//! }
//! ```
//!
//! `dataset` may also be `"mnist"` or `"cifar10"` (read from the data
//! directory). Omitting `architecture` selects `dense(d→64) · relu · dense(64→|C|)`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, Dataset};
use crate::heads::HeadKind;
use crate::nn::LayerSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Mode {
    /// All heads share one trunk; each head's update is scaled by its own Γ.
    #[default]
    #[serde(rename = "shared-trunk")]
    SharedTrunk,
    /// One trunk per objective, combined only at prediction time.
    #[serde(rename = "per-objective-ensemble")]
    PerObjectiveEnsemble,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SharedTrunk => "shared-trunk",
            Mode::PerObjectiveEnsemble => "per-objective-ensemble",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetConfig {
    Mnist,
    Cifar10,
    Blobs(BlobsConfig),
}

impl DatasetConfig {
    pub fn classes(&self) -> usize {
        match self {
            DatasetConfig::Mnist | DatasetConfig::Cifar10 => 10,
            DatasetConfig::Blobs(b) => b.classes,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            DatasetConfig::Mnist => vec![1, 28, 28],
            DatasetConfig::Cifar10 => vec![3, 32, 32],
            DatasetConfig::Blobs(b) => vec![b.dim],
        }
    }

    pub fn needs_data_dir(&self) -> bool {
        !matches!(self, DatasetConfig::Blobs(_))
    }
}

fn default_eta() -> f64 {
    0.01
}
fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    64
}
fn default_lambda() -> f64 {
    1.0
}
fn default_eps() -> f64 {
    1e-3
}
fn default_min_per_class() -> usize {
    4
}
fn default_refresh() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub objectives: Vec<HeadKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Vec<LayerSpec>>,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lambda")]
    pub lambda_svm: f64,
    #[serde(default = "default_eps")]
    pub eps_lda: f64,
    #[serde(default = "default_min_per_class")]
    pub min_per_class: usize,
    #[serde(default = "default_refresh")]
    pub bpa_refresh_every: usize,
    #[serde(default)]
    pub mode: Mode,
    /// `false` pins Γ ≡ 1 (plain SGD baseline).
    #[serde(default = "default_true")]
    pub unified: bool,
    /// Use only the first `n` training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// A config with every default filled in.
    pub fn new(dataset: DatasetConfig, objectives: Vec<HeadKind>) -> Self {
        Self {
            dataset,
            objectives,
            architecture: None,
            eta: default_eta(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            lambda_svm: default_lambda(),
            eps_lda: default_eps(),
            min_per_class: default_min_per_class(),
            bpa_refresh_every: default_refresh(),
            mode: Mode::default(),
            unified: true,
            train_limit: None,
            test_limit: None,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn has_lda(&self) -> bool {
        self.objectives.contains(&HeadKind::Lda)
    }

    /// The architecture to build, with the default MLP substituted if none was given.
    pub fn resolved_architecture(&self) -> Vec<LayerSpec> {
        self.architecture.clone().unwrap_or_else(|| {
            let d: usize = self.dataset.input_shape().iter().product();
            vec![
                LayerSpec::Dense { inputs: d, out: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 64,
                    out: self.dataset.classes(),
                },
            ]
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.objectives.is_empty() {
            return Err(invalid("objectives", "at least one objective is required"));
        }
        let mut seen = HashSet::new();
        for o in &self.objectives {
            if !seen.insert(o) {
                return Err(invalid("objectives", format!("`{o}` listed twice")));
            }
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(invalid("eta", format!("must be > 0, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be ≥ 1"));
        }
        if !(self.lambda_svm > 0.0 && self.lambda_svm.is_finite()) {
            return Err(invalid("lambda_svm", "must be > 0"));
        }
        if !(self.eps_lda >= 0.0 && self.eps_lda.is_finite()) {
            return Err(invalid("eps_lda", "must be ≥ 0"));
        }
        if self.min_per_class < 2 {
            return Err(invalid("min_per_class", "must be ≥ 2"));
        }
        if self.bpa_refresh_every == 0 {
            return Err(invalid("bpa_refresh_every", "must be ≥ 1"));
        }
        if let DatasetConfig::Blobs(b) = &self.dataset {
            if b.classes < 2 || b.per_class < 4 || b.dim == 0 {
                return Err(invalid("dataset.blobs", "needs classes ≥ 2, per_class ≥ 4, dim ≥ 1"));
            }
            if !(b.separation >= 0.0 && b.separation.is_finite()) {
                return Err(invalid("dataset.blobs.separation", "must be ≥ 0"));
            }
        }
        let classes = self.dataset.classes();
        if self.has_lda() && self.batch_size < classes * self.min_per_class {
            return Err(invalid(
                "batch_size",
                format!(
                    "LDA needs {} samples of each of {classes} classes per batch, batch_size is {}",
                    self.min_per_class, self.batch_size
                ),
            ));
        }
        let arch = self.resolved_architecture();
        if arch.is_empty() {
            return Err(invalid("architecture", "at least one layer is required"));
        }
        if !matches!(arch.last(), Some(LayerSpec::Dense { .. })) {
            return Err(invalid("architecture", "the last layer must be dense (affine head input)"));
        }
        if let Some(LayerSpec::Dense { out, .. }) = arch.last() {
            if self.objectives.contains(&HeadKind::Softmax) && *out != classes {
                return Err(invalid(
                    "architecture",
                    format!("softmax needs {classes} outputs, last layer has {out}"),
                ));
            }
        }
        Ok(())
    }

    /// Loads (or generates) the train/test split this config names.
    pub fn load_data(&self, data_dir: Option<&Path>) -> Result<(Dataset, Dataset), DataError> {
        let dir = || {
            data_dir.ok_or_else(|| {
                DataError::InvalidParameter("this dataset needs a data directory".into())
            })
        };
        let (train, test) = match &self.dataset {
            DatasetConfig::Mnist => data::load_mnist(dir()?)?,
            DatasetConfig::Cifar10 => data::load_cifar10(dir()?)?,
            DatasetConfig::Blobs(b) => data::synth_blobs(
                b.seed.unwrap_or(self.seed),
                b.classes,
                b.per_class,
                b.dim,
                b.separation,
            )?,
        };
        let train = match self.train_limit {
            Some(n) => train.truncated(n),
            None => train,
        };
        let test = match self.test_limit {
            Some(n) => test.truncated(n),
            None => test,
        };
        Ok((train, test))
    }
}

/// Reads and validates a JSON config file.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_json(r#"{"dataset": "mnist", "objectives": ["softmax"]}"#).unwrap();
        assert_eq!(cfg.eta, 0.01);
        assert_eq!(cfg.lambda_svm, 1.0);
        assert_eq!(cfg.eps_lda, 1e-3);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.min_per_class, 4);
        assert_eq!(cfg.bpa_refresh_every, 1);
        assert_eq!(cfg.mode, Mode::SharedTrunk);
        assert!(cfg.unified);
        assert_eq!(cfg, RunConfig::new(DatasetConfig::Mnist, vec![HeadKind::Softmax]));
    }

    #[test]
    fn empty_objectives_rejected() {
        let err = RunConfig::from_json(r#"{"dataset": "mnist", "objectives": []}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Validation { ref field, .. } if field == "objectives"));
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let err = RunConfig::from_json(r#"{"dataset": "mnist", "objectives": ["softmax"], "ephocs": 3}"#)
            .unwrap_err();
        match err {
            ConfigError::Parse { line, message, .. } => {
                assert_eq!(line, 1);
                assert!(message.contains("ephocs"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_error_reports_position() {
        let err = RunConfig::from_json("{\n  \"dataset\": \"mnist\",\n  \"objectives\": [softmax]\n}").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn validation_rules() {
        let base = r#""dataset": {"blobs": {"classes": 3, "per_class": 10, "dim": 2, "separation": 4.0}}"#;
        let bad = [
            (r#""objectives": ["softmax"], "eta": 0"#, "eta"),
            (r#""objectives": ["softmax", "softmax"]"#, "objectives"),
            (r#""objectives": ["lda"], "batch_size": 8"#, "batch_size"),
            (r#""objectives": ["softmax"], "min_per_class": 1"#, "min_per_class"),
            (r#""objectives": ["softmax"], "bpa_refresh_every": 0"#, "bpa_refresh_every"),
            (
                r#""objectives": ["softmax"], "architecture": [{"type": "dense", "in": 2, "out": 4}]"#,
                "architecture",
            ),
            (
                r#""objectives": ["svm"], "architecture": [{"type": "dense", "in": 2, "out": 4}, {"type": "relu"}]"#,
                "architecture",
            ),
        ];
        for (body, field) in bad {
            let err = RunConfig::from_json(&format!("{{{base}, {body}}}")).unwrap_err();
            assert!(
                matches!(err, ConfigError::Validation { field: ref f, .. } if f == field),
                "{body}: {err}"
            );
        }
        let ok = RunConfig::from_json(&format!(
            r#"{{{base}, "objectives": ["svm", "lda"], "mode": "per-objective-ensemble", "unified": false}}"#
        ))
        .unwrap();
        assert_eq!(ok.mode, Mode::PerObjectiveEnsemble);
        assert!(!ok.unified);
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = RunConfig::new(
            DatasetConfig::Blobs(BlobsConfig {
                classes: 3,
                per_class: 20,
                dim: 2,
                separation: 6.0,
                seed: Some(4),
            }),
            vec![HeadKind::Svm, HeadKind::Lda],
        );
        cfg.train_limit = Some(10);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
