//! TOML experiment configuration.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/reference"
//!
//! [feature_space]
//! rows = [[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.2, 0.3, 0.5]]
//! prior = [0.3333333333333333, 0.3333333333333333, 0.3333333333333334]  # optional, uniform by default
//! labels = ["a", "b", "c"]                                            # optional
//!
//! [dataset]   # n_classes, n_items, noise_sigma, feature_dim, train_fraction, seed, split_seed
//! [train]     # batch_size, epochs, checkpoint_every, eval_batches, [train.optimizer], [train.encoder]
//! [loss]      # kind, tau, lambda, delta, gamma, alpha_mode
//! ```
//!
//! Unknown keys are rejected. Errors carry `path:line`.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::Spanned;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::synth::SyntheticDatasetConfig;
use crate::tpm::{FeatureSpace, Prior, TransitionMatrix, Violation};
use crate::trainer::{EncoderConfig, OptimizerConfig, TrainConfig};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpaceSpec {
    pub rows: Vec<Spanned<Vec<f64>>>,
    #[serde(default)]
    pub prior: Option<Spanned<Vec<f64>>>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

/// `[train]` section; the loss and seed live at the top level.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub batch_size: usize,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub eval_batches: usize,
    pub optimizer: OptimizerConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            epochs: d.epochs,
            checkpoint_every: d.checkpoint_every,
            eval_batches: d.eval_batches,
            optimizer: d.optimizer,
            encoder: d.encoder,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    feature_space: FeatureSpaceSpec,
    #[serde(default)]
    dataset: SyntheticDatasetConfig,
    #[serde(default)]
    train: TrainSpec,
    #[serde(default = "default_loss")]
    loss: LossConfig,
}

fn default_loss() -> LossConfig {
    LossConfig::infonce(1.0)
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Training seed; dataset seeds live in `[dataset]`.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub feature_space: FeatureSpaceSpec,
    pub dataset: SyntheticDatasetConfig,
    pub train: TrainSpec,
    pub loss: LossConfig,
    origin: String,
    text: String,
}

fn line_of(text: &str, span: Range<usize>) -> usize {
    text[..span.start.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    /// Parses TOML text. `origin` prefixes error messages, usually the path.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|s| format!("{origin}:{}", line_of(text, s)))
                .unwrap_or_else(|| origin.to_string());
            Error::Config(format!("{at}: {}", e.message()))
        })?;
        let cfg = Self {
            seed: raw.seed,
            output_dir: raw.output_dir,
            feature_space: raw.feature_space,
            dataset: raw.dataset,
            train: raw.train,
            loss: raw.loss,
            origin: origin.to_string(),
            text: text.to_string(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Raw text the config was parsed from.
    pub fn source_text(&self) -> &str {
        &self.text
    }

    fn at(&self, span: Range<usize>) -> String {
        format!("{}:{}", self.origin, line_of(&self.text, span))
    }

    fn validate(&self) -> Result<()> {
        self.feature_space()?;
        self.dataset
            .validate()
            .map_err(|e| Error::Config(format!("{}: [dataset] {e}", self.origin)))?;
        self.train_config()
            .validate()
            .map_err(|e| Error::Config(format!("{}: [train]/[loss] {e}", self.origin)))?;
        if self.dataset.n_classes != self.feature_space.rows.len() {
            return Err(Error::Config(format!(
                "{}: dataset has {} classes but the transition matrix has {} rows",
                self.origin,
                self.dataset.n_classes,
                self.feature_space.rows.len()
            )));
        }
        Ok(())
    }

    /// Validated transition matrix and prior.
    pub fn feature_space(&self) -> Result<FeatureSpace> {
        let spec = &self.feature_space;
        let m = spec.rows.len();
        if m == 0 {
            return Err(Error::Config(format!(
                "{}: feature_space.rows is empty",
                self.origin
            )));
        }
        for (i, row) in spec.rows.iter().enumerate() {
            if row.get_ref().len() != m {
                return Err(Error::Config(format!(
                    "{}: row {i} has {} entries, expected {m}",
                    self.at(row.span()),
                    row.get_ref().len()
                )));
            }
        }
        let rows: Vec<Vec<f64>> = spec.rows.iter().map(|r| r.get_ref().clone()).collect();
        let labels = spec
            .labels
            .clone()
            .unwrap_or_else(|| (0..m).map(|i| i.to_string()).collect());
        let tpm = TransitionMatrix::unchecked(rows, labels)
            .map_err(|e| Error::Config(format!("{}: {e}", self.origin)))?;
        let violations = crate::tpm::validate(&tpm);
        if let Some(v) = violations.first() {
            let at = match v.row() {
                Some(r) if r < m => self.at(spec.rows[r].span()),
                _ => self.origin.clone(),
            };
            let all: Vec<String> = violations.iter().map(Violation::to_string).collect();
            return Err(Error::Config(format!(
                "{at}: invalid transition matrix: {}",
                all.join("; ")
            )));
        }
        let prior = match &spec.prior {
            None => Prior::uniform(m),
            Some(p) => Prior::new(p.get_ref().clone())
                .map_err(|e| Error::Config(format!("{}: {e}", self.at(p.span()))))?,
        };
        FeatureSpace::with_prior_support(tpm, prior)
            .map_err(|e| Error::Config(format!("{}: {e}", self.origin)))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            optimizer: self.train.optimizer.clone(),
            checkpoint_every: self.train.checkpoint_every,
            eval_batches: self.train.eval_batches,
            encoder: self.train.encoder.clone(),
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE: &str = r#"
seed = 3

[feature_space]
rows = [
  [0.5, 0.3, 0.2],
  [0.2, 0.5, 0.3],
  [0.2, 0.3, 0.5],
]

[train]
epochs = 10

[loss]
kind = "infonce"
tau = 1.0
"#;

    #[test]
    fn reference_config_parses() {
        let cfg = ExperimentConfig::parse(REFERENCE, "ref.toml").unwrap();
        assert_eq!(cfg.seed, 3);
        let tc = cfg.train_config();
        assert_eq!(tc.epochs, 10);
        assert_eq!(tc.batch_size, 1000);
        assert_eq!(tc.seed, 3);
        assert_eq!(cfg.feature_space().unwrap().size(), 3);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = REFERENCE.replace("epochs = 10", "epochs = 10\nlearning_rate = 0.1");
        let err = ExperimentConfig::parse(&text, "ref.toml")
            .unwrap_err()
            .to_string();
        assert!(err.contains("ref.toml:13"), "{err}");
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn bad_row_is_named_with_its_line() {
        let text = REFERENCE.replace("[0.2, 0.5, 0.3]", "[0.2, 0.5, 0.4]");
        let err = ExperimentConfig::parse(&text, "ref.toml")
            .unwrap_err()
            .to_string();
        assert!(err.contains("ref.toml:7"), "{err}");
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn ragged_row_rejected() {
        let text = REFERENCE.replace("[0.2, 0.3, 0.5]", "[0.2, 0.8]");
        let err = ExperimentConfig::parse(&text, "ref.toml")
            .unwrap_err()
            .to_string();
        assert!(err.contains("ref.toml:8") && err.contains("row 2"), "{err}");
    }

    #[test]
    fn syntax_error_has_line() {
        let text = REFERENCE.replace("tau = 1.0", "tau = = 1.0");
        let err = ExperimentConfig::parse(&text, "ref.toml")
            .unwrap_err()
            .to_string();
        assert!(err.contains("ref.toml:16"), "{err}");
    }

    #[test]
    fn class_count_must_match() {
        let text = format!("{REFERENCE}\n[dataset]\nn_classes = 4\n");
        assert!(ExperimentConfig::parse(&text, "x").is_err());
    }

    #[test]
    fn prior_outside_simplex_rejected() {
        let text = REFERENCE.replace("[train]", "prior = [0.5, 0.5, 0.5]\n\n[train]");
        let err = ExperimentConfig::parse(&text, "p.toml")
            .unwrap_err()
            .to_string();
        assert!(err.contains("p.toml:11"), "{err}");
    }
}
