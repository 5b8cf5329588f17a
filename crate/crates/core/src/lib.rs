//! Predicting and measuring what contrastive objectives converge to when
//! positive pairs are drawn from a feature transition matrix.
//!
//! [`theory`] turns a transition matrix and prior into per-pair targets and
//! error bounds. [`losses`], [`encoder`], [`synth`] and [`trainer`] train small
//! encoders on synthetic views so that [`metrics`] can compare what training
//! reaches against those targets. [`config`] and [`report`] handle files.

pub mod config;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod report;
pub mod synth;
pub mod theory;
pub mod tpm;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{LossConfig, LossKind};
pub use tpm::{FeatureSpace, Prior, TransitionMatrix};
pub use trainer::{RunResult, SweepAxis, TrainConfig};
