//! Transition probability matrices over a finite explicit feature space.
//!
//! Features are class indices `0..m`. Row `i` of a [`TransitionMatrix`] is the
//! distribution of the feature obtained by augmenting feature `i`. A
//! [`FeatureSpace`] pairs the matrix with the sampling prior over base
//! features; features outside the prior support are reachable only through
//! augmentation.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking constructed probability vectors.
pub const CONSTRUCTION_TOL: f64 = 1e-12;
/// Tolerance used when checking derived quantities (marginals, products).
pub const DERIVED_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RowSum { row: usize, sum: f64 },
    Negative { row: usize, col: usize, value: f64 },
    AboveOne { row: usize, col: usize, value: f64 },
    NonFinite { row: usize, col: usize },
    DuplicateLabel { label: String },
    LabelCount { expected: usize, found: usize },
}

impl Violation {
    /// Offending row, when the violation is tied to one.
    pub fn row(&self) -> Option<usize> {
        match self {
            Violation::RowSum { row, .. }
            | Violation::Negative { row, .. }
            | Violation::AboveOne { row, .. }
            | Violation::NonFinite { row, .. } => Some(*row),
            _ => None,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RowSum { row, sum } => write!(f, "row {row} sums to {sum}"),
            Violation::Negative { row, col, value } => {
                write!(f, "entry ({row},{col}) is negative ({value})")
            }
            Violation::AboveOne { row, col, value } => {
                write!(f, "entry ({row},{col}) exceeds 1 ({value})")
            }
            Violation::NonFinite { row, col } => write!(f, "entry ({row},{col}) is not finite"),
            Violation::DuplicateLabel { label } => write!(f, "label `{label}` is not unique"),
            Violation::LabelCount { expected, found } => {
                write!(f, "expected {expected} labels, found {found}")
            }
        }
    }
}

/// Row-stochastic matrix with one label per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    entries: DMatrix<f64>,
    labels: Vec<String>,
}

impl TransitionMatrix {
    /// Builds a matrix and rejects it unless [`validate`] reports nothing.
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        let tpm = Self::unchecked(rows, labels)?;
        let report = validate(&tpm);
        if report.is_empty() {
            Ok(tpm)
        } else {
            Err(Error::InvalidTransitionMatrix(report))
        }
    }

    /// Builds a matrix with labels `"0".."m-1"`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let labels = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::new(rows, labels)
    }

    /// Builds a square matrix without checking the probability invariants, so
    /// that malformed input can be handed to [`validate`].
    pub fn unchecked(rows: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::InvalidArgument {
                name: "rows",
                reason: "transition matrix must have at least one row".into(),
            });
        }
        for row in &rows {
            if row.len() != m {
                return Err(Error::DimensionMismatch {
                    context: "transition matrix row length",
                    expected: m,
                    found: row.len(),
                });
            }
        }
        let entries = DMatrix::from_fn(m, m, |i, j| rows[i][j]);
        Ok(Self { entries, labels })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            entries: DMatrix::identity(m, m),
            labels: (0..m).map(|i| i.to_string()).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.entries.row(i).iter().copied().collect()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Relabels features by `perm`: new feature `k` is old feature `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let m = self.size();
        Self {
            entries: DMatrix::from_fn(m, m, |i, j| self.entries[(perm[i], perm[j])]),
            labels: perm.iter().map(|&p| self.labels[p].clone()).collect(),
        }
    }

    /// Hex SHA-256 over the labels and the bit patterns of the entries.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for l in &self.labels {
            h.update(l.as_bytes());
            h.update([0u8]);
        }
        for i in 0..self.size() {
            for j in 0..self.size() {
                h.update(self.entries[(i, j)].to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes `row_label,col_label,prob` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row_label", "col_label", "prob"])?;
        for i in 0..self.size() {
            for j in 0..self.size() {
                w.write_record([
                    self.labels[i].as_str(),
                    self.labels[j].as_str(),
                    &self.entries[(i, j)].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Lists every invariant a transition matrix violates. An empty list means the
/// matrix is row-stochastic with unique labels.
pub fn validate(tpm: &TransitionMatrix) -> Vec<Violation> {
    let mut out = Vec::new();
    let m = tpm.size();
    for i in 0..m {
        let mut sum = 0.0;
        let mut finite = true;
        for j in 0..m {
            let v = tpm.entries[(i, j)];
            if !v.is_finite() {
                out.push(Violation::NonFinite { row: i, col: j });
                finite = false;
                continue;
            }
            if v < 0.0 {
                out.push(Violation::Negative {
                    row: i,
                    col: j,
                    value: v,
                });
            } else if v > 1.0 {
                out.push(Violation::AboveOne {
                    row: i,
                    col: j,
                    value: v,
                });
            }
            sum += v;
        }
        if finite && (sum - 1.0).abs() > CONSTRUCTION_TOL {
            out.push(Violation::RowSum { row: i, sum });
        }
    }
    if tpm.labels.len() != m {
        out.push(Violation::LabelCount {
            expected: m,
            found: tpm.labels.len(),
        });
    }
    let mut seen = HashSet::new();
    for l in &tpm.labels {
        if !seen.insert(l.as_str()) {
            out.push(Violation::DuplicateLabel { label: l.clone() });
        }
    }
    out
}

/// Sampling distribution over features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Prior {
    weights: Vec<f64>,
}

impl Prior {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidPrior("prior is empty".into()));
        }
        if let Some((k, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(Error::InvalidPrior(format!(
                "weight {k} is {w}, expected a finite nonnegative value"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > CONSTRUCTION_TOL {
            return Err(Error::InvalidPrior(format!("weights sum to {sum}")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            weights: vec![1.0 / m as f64; m],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `lambda * self + (1 - lambda) * other`.
    pub fn mix(&self, other: &Prior, lambda: f64) -> Result<Prior> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch {
                context: "prior mixture",
                expected: self.len(),
                found: other.len(),
            });
        }
        let weights = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        Prior::new(weights)
    }
}

impl TryFrom<Vec<f64>> for Prior {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Prior::new(v)
    }
}

impl From<Prior> for Vec<f64> {
    fn from(p: Prior) -> Self {
        p.weights
    }
}

/// Cumulative table for inverse-CDF draws from a finite distribution.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Categorical {
    cumulative: Vec<f64>,
}

impl Categorical {
    pub(crate) fn new(weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Self { cumulative }
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty distribution");
        let u = rng.random::<f64>() * total;
        // first index whose cumulative weight exceeds u; skips zero-weight entries
        let idx = self.cumulative.partition_point(|&c| c <= u);
        idx.min(self.cumulative.len() - 1)
    }
}

/// Finite explicit feature space: transition matrix, prior and base-feature mask.
#[derive(Debug, Clone)]
pub struct FeatureSpace {
    tpm: TransitionMatrix,
    prior: Prior,
    base_mask: Vec<bool>,
    prior_sampler: Categorical,
    row_samplers: Vec<Categorical>,
}

impl FeatureSpace {
    pub fn new(tpm: TransitionMatrix, prior: Prior, base_mask: Vec<bool>) -> Result<Self> {
        let m = tpm.size();
        if prior.len() != m {
            return Err(Error::DimensionMismatch {
                context: "prior length",
                expected: m,
                found: prior.len(),
            });
        }
        if base_mask.len() != m {
            return Err(Error::DimensionMismatch {
                context: "base mask length",
                expected: m,
                found: base_mask.len(),
            });
        }
        if let Some(k) = (0..m).find(|&k| !base_mask[k] && prior.weights[k] != 0.0) {
            return Err(Error::InvalidPrior(format!(
                "feature {k} is not a base feature but has prior weight {}",
                prior.weights[k]
            )));
        }
        let prior_sampler = Categorical::new(&prior.weights);
        let row_samplers = (0..m).map(|i| Categorical::new(&tpm.row(i))).collect();
        Ok(Self {
            tpm,
            prior,
            base_mask,
            prior_sampler,
            row_samplers,
        })
    }

    /// Base features are exactly the prior's support.
    pub fn with_prior_support(tpm: TransitionMatrix, prior: Prior) -> Result<Self> {
        let mask = prior.weights.iter().map(|&w| w > 0.0).collect();
        Self::new(tpm, prior, mask)
    }

    pub fn uniform(tpm: TransitionMatrix) -> Self {
        let m = tpm.size();
        Self::new(tpm, Prior::uniform(m), vec![true; m]).expect("uniform prior is consistent")
    }

    pub fn tpm(&self) -> &TransitionMatrix {
        &self.tpm
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn base_mask(&self) -> &[bool] {
        &self.base_mask
    }

    pub fn size(&self) -> usize {
        self.tpm.size()
    }

    /// `s_k = sum_i prior_i * A[i][k]`.
    pub fn marginal(&self) -> Vec<f64> {
        marginal(&self.tpm, &self.prior).expect("sizes checked at construction")
    }

    /// Simultaneously relabels the matrix, prior and mask.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let prior = Prior {
            weights: perm.iter().map(|&p| self.prior.weights[p]).collect(),
        };
        let mask = perm.iter().map(|&p| self.base_mask[p]).collect();
        Self::new(self.tpm.permuted(perm), prior, mask).expect("permutation preserves invariants")
    }

    pub(crate) fn draw_transition<R: Rng + ?Sized>(&self, source: usize, rng: &mut R) -> usize {
        self.row_samplers[source].sample(rng)
    }
}

/// Distribution of the augmented feature when the source is drawn from `prior`.
pub fn marginal(tpm: &TransitionMatrix, prior: &Prior) -> Result<Vec<f64>> {
    let m = tpm.size();
    if prior.len() != m {
        return Err(Error::DimensionMismatch {
            context: "marginal",
            expected: m,
            found: prior.len(),
        });
    }
    Ok((0..m)
        .map(|k| (0..m).map(|i| prior.weights[i] * tpm.get(i, k)).sum())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransitionSample {
    pub source: usize,
    pub target: usize,
}

/// Draws a source feature from the prior and its augmentation from the source's row.
pub fn sample_transition<R: Rng + ?Sized>(space: &FeatureSpace, rng: &mut R) -> TransitionSample {
    let source = space.prior_sampler.sample(rng);
    let target = space.draw_transition(source, rng);
    TransitionSample { source, target }
}

/// Counts transitions into a row-stochastic estimate with additive smoothing.
///
/// Rows that received no samples (and no smoothing mass) fall back to uniform.
pub fn estimate_tpm(
    samples: &[TransitionSample],
    m: usize,
    smoothing: f64,
) -> Result<TransitionMatrix> {
    if m == 0 {
        return Err(Error::InvalidArgument {
            name: "m",
            reason: "must be positive".into(),
        });
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::InvalidArgument {
            name: "smoothing",
            reason: format!("must be finite and nonnegative, got {smoothing}"),
        });
    }
    if samples.is_empty() && smoothing == 0.0 {
        return Err(Error::NoData);
    }
    let mut counts = vec![vec![0.0f64; m]; m];
    for s in samples {
        if s.source >= m || s.target >= m {
            return Err(Error::InvalidArgument {
                name: "samples",
                reason: format!(
                    "transition {}->{} out of range for m={m}",
                    s.source, s.target
                ),
            });
        }
        counts[s.source][s.target] += 1.0;
    }
    let rows = counts
        .into_iter()
        .map(|row| {
            let total: f64 = row.iter().sum::<f64>() + m as f64 * smoothing;
            if total == 0.0 {
                vec![1.0 / m as f64; m]
            } else {
                let mut r: Vec<f64> = row.iter().map(|c| (c + smoothing) / total).collect();
                renormalize(&mut r);
                r
            }
        })
        .collect();
    TransitionMatrix::from_rows(rows)
}

/// Empirical distribution of the sample sources.
pub fn estimate_prior(samples: &[TransitionSample], m: usize) -> Result<Prior> {
    if samples.is_empty() {
        return Err(Error::NoData);
    }
    let mut counts = vec![0.0; m];
    for s in samples {
        if s.source >= m {
            return Err(Error::InvalidArgument {
                name: "samples",
                reason: format!("source {} out of range for m={m}", s.source),
            });
        }
        counts[s.source] += 1.0;
    }
    let n = samples.len() as f64;
    let mut w: Vec<f64> = counts.iter().map(|c| c / n).collect();
    renormalize(&mut w);
    Prior::new(w)
}

// Division leaves the sum within a few ulps of 1; fold the residue into the
// largest entry so the construction tolerance always holds.
fn renormalize(v: &mut [f64]) {
    let sum: f64 = v.iter().sum();
    let residue = 1.0 - sum;
    if residue != 0.0 {
        if let Some(max) = v
            .iter_mut()
            .max_by(|a, b| a.partial_cmp(b).expect("finite probabilities"))
        {
            *max += residue;
        }
    }
}

/// The 3x3 matrix used for the reference synthetic experiment.
pub fn reference_tpm() -> TransitionMatrix {
    TransitionMatrix::from_rows(vec![
        vec![0.5, 0.3, 0.2],
        vec![0.2, 0.5, 0.3],
        vec![0.2, 0.3, 0.5],
    ])
    .expect("reference matrix is row-stochastic")
}
