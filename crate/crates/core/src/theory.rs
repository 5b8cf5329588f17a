//! Closed-form predictions derived from a feature space.
//!
//! With `s = prior^T A` the augmented-feature marginal, every pair of features
//! `(i, j)` gets
//!
//! * `c1[i][j] = sum_k prior_k A[k][i] A[k][j]` (positive co-occurrence),
//! * `c2[i][j] = s_i s_j` (independent co-occurrence),
//!
//! and InfoNCE with `n` softmax candidates drives the pair probability towards
//! `c1 / (c1 + (n - 1) c2)`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tpm::FeatureSpace;

fn second_moment(space: &FeatureSpace) -> DMatrix<f64> {
    let a = space.tpm().as_matrix();
    let p = space.prior().weights();
    let m = space.size();
    DMatrix::from_fn(m, m, |i, j| {
        (0..m).map(|k| p[k] * (a[(k, i)] * a[(k, j)])).sum::<f64>()
    })
}

/// Expected gradient-direction weights `E[A_i A_j] - lambda E[A_i] E[A_j]`.
///
/// At `lambda = 1` this is the covariance of the transition columns under the
/// prior.
pub fn pi_matrix(space: &FeatureSpace, lambda: f64) -> Result<DMatrix<f64>> {
    if !lambda.is_finite() {
        return Err(Error::InvalidArgument {
            name: "lambda",
            reason: format!("must be finite, got {lambda}"),
        });
    }
    let s = space.marginal();
    let c1 = second_moment(space);
    let m = space.size();
    Ok(DMatrix::from_fn(m, m, |i, j| {
        c1[(i, j)] - lambda * s[i] * s[j]
    }))
}

/// Pair coefficient `C_ij^{nk}` of the overlap-corrected gradient weights: the
/// positive term counts only third features `l != i, j`, and the negative term
/// only features `l != j`.
pub fn overlap_coefficient(space: &FeatureSpace, i: usize, j: usize, n: usize, k: usize) -> f64 {
    let a = space.tpm().as_matrix();
    let m = space.size();
    let mut pos = 0.0;
    let mut neg = 0.0;
    for l in 0..m {
        if l != i && l != j {
            pos += a[(n, l)] * a[(k, j)];
        }
        if l != j {
            neg += a[(n, j)] * a[(k, l)];
        }
    }
    a[(k, i)] * (pos - neg)
}

/// Gradient-direction weights when a feature drawn as positive can also show
/// up among the negatives of the same anchor (the two cancel).
pub fn pi_matrix_corrected(space: &FeatureSpace) -> DMatrix<f64> {
    let p = space.prior().weights();
    let m = space.size();
    DMatrix::from_fn(m, m, |i, j| {
        let mut total = 0.0;
        for n in 0..m {
            if p[n] == 0.0 {
                continue;
            }
            let mut inner = 0.0;
            for k in 0..m {
                inner += p[k] * overlap_coefficient(space, i, j, n, k);
            }
            total += p[n] * inner;
        }
        total
    })
}

/// InfoNCE convergence targets for a given softmax candidate count.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergencePrediction {
    pub c1: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub target: DMatrix<f64>,
    pub n: usize,
}

fn check_candidates(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument {
            name: "n",
            reason: format!("candidate count must be at least 2, got {n}"),
        });
    }
    Ok(())
}

/// Computes `c1`, `c2` and the target `c1 / (c1 + (n-1) c2)`.
///
/// Pairs with no co-occurrence mass at all (`c1 = c2 = 0`) get target 0.
pub fn predict_target(space: &FeatureSpace, n: usize) -> Result<ConvergencePrediction> {
    check_candidates(n)?;
    let s = space.marginal();
    let m = space.size();
    let c1 = second_moment(space);
    let c2 = DMatrix::from_fn(m, m, |i, j| s[i] * s[j]);
    let nm1 = (n - 1) as f64;
    let target = DMatrix::from_fn(m, m, |i, j| {
        let denom = c1[(i, j)] + nm1 * c2[(i, j)];
        if denom == 0.0 {
            0.0
        } else {
            c1[(i, j)] / denom
        }
    });
    Ok(ConvergencePrediction { c1, c2, target, n })
}

impl ConvergencePrediction {
    pub fn size(&self) -> usize {
        self.target.nrows()
    }

    /// `D = c1 + (n - 1) c2` for one pair.
    pub fn denominator_margin(&self, i: usize, j: usize) -> f64 {
        self.c1[(i, j)] + (self.n - 1) as f64 * self.c2[(i, j)]
    }

    /// Writes `i,j,c1,c2,target` with zero-based feature indices.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "c1", "c2", "target"])?;
        for i in 0..self.size() {
            for j in 0..self.size() {
                w.write_record([
                    i.to_string(),
                    j.to_string(),
                    self.c1[(i, j)].to_string(),
                    self.c2[(i, j)].to_string(),
                    self.target[(i, j)].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Scale (`delta`) and bias (`gamma`) of the SC-InfoNCE target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledTargetConfig {
    pub delta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub failed: Vec<String>,
}

/// Checks the sufficient condition `delta >= 0 && gamma >= 0`.
///
/// The exact conditions involve `c1 / ((n-1) c2)` and ratios of similarity
/// gradients that drift during training, so only the sufficient one is tested.
pub fn feasibility_check(cfg: &ScaledTargetConfig) -> FeasibilityReport {
    let mut failed = Vec::new();
    if !(cfg.delta >= 0.0) {
        failed.push(format!("delta >= 0 violated (delta = {})", cfg.delta));
    }
    if !(cfg.gamma >= 0.0) {
        failed.push(format!("gamma >= 0 violated (gamma = {})", cfg.gamma));
    }
    FeasibilityReport {
        feasible: failed.is_empty(),
        failed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryFlag {
    InRange,
    OutOfRange,
    /// `c2 = 0` with a positive scale; the value is reported as `+inf`.
    Undefined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledPrediction {
    /// Raw, unclipped values.
    pub values: DMatrix<f64>,
    pub flags: DMatrix<EntryFlag>,
}

impl ScaledPrediction {
    pub fn warnings(&self) -> Vec<String> {
        let m = self.values.nrows();
        let mut out = Vec::new();
        for i in 0..m {
            for j in 0..m {
                match self.flags[(i, j)] {
                    EntryFlag::InRange => {}
                    EntryFlag::OutOfRange => out.push(format!(
                        "entry ({i},{j}) = {} lies outside [0, 1]",
                        self.values[(i, j)]
                    )),
                    EntryFlag::Undefined => {
                        out.push(format!("entry ({i},{j}) is undefined (c2 = 0)"))
                    }
                }
            }
        }
        out
    }
}

/// SC-InfoNCE target `delta * c1 / ((n-1) c2) - gamma`, flagged where it leaves `[0, 1]`.
pub fn predict_scaled_target(
    space: &FeatureSpace,
    n: usize,
    cfg: &ScaledTargetConfig,
) -> Result<ScaledPrediction> {
    check_candidates(n)?;
    let report = feasibility_check(cfg);
    if !report.feasible {
        return Err(Error::Infeasible(report.failed.join("; ")));
    }
    let base = predict_target(space, n)?;
    let m = space.size();
    let nm1 = (n - 1) as f64;
    let mut flags = DMatrix::from_element(m, m, EntryFlag::InRange);
    let values = DMatrix::from_fn(m, m, |i, j| {
        let c2 = base.c2[(i, j)];
        if c2 == 0.0 {
            if cfg.delta > 0.0 {
                flags[(i, j)] = EntryFlag::Undefined;
                return f64::INFINITY;
            }
            let v = -cfg.gamma;
            if !(0.0..=1.0).contains(&v) {
                flags[(i, j)] = EntryFlag::OutOfRange;
            }
            return v;
        }
        let v = base.c1[(i, j)] / (nm1 * c2) * cfg.delta - cfg.gamma;
        if !(0.0..=1.0).contains(&v) {
            flags[(i, j)] = EntryFlag::OutOfRange;
        }
        v
    });
    Ok(ScaledPrediction { values, flags })
}

/// Scalar multiplying `grad S_ij` in the expected InfoNCE gradient at pair
/// probability `p`; zero exactly at the convergence target.
pub fn expected_gradient_coefficient(p: f64, c1: f64, c2: f64, n: usize, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument {
            name: "tau",
            reason: format!("temperature must be positive, got {tau}"),
        });
    }
    Ok(-(c1 * (1.0 - p) - c2 * (n as f64 - 1.0) * p) / tau)
}

/// Inputs to [`error_bounds`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Number of observed transitions used to estimate the prior and matrix.
    pub n_samples: usize,
    /// Failure probability of the concentration bound, in `(0, 1)`.
    pub confidence_delta: f64,
    /// Worst column-wise sup-norm error of the estimated matrix.
    pub eta_max: f64,
    /// Target accuracy.
    pub epsilon: f64,
    /// Softmax candidate count for the exact constants; defaults to `n_samples`.
    pub candidates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBoundReport {
    pub m: usize,
    pub s_min: f64,
    pub eta_max: f64,
    /// l1 concentration radius of the empirical prior.
    pub eps_p: f64,
    /// Max-entry target error bound with the constants 6 and 8.
    pub target_error_bound: f64,
    pub c1_exact: f64,
    pub c2_exact: f64,
    /// Same bound with the candidate-count dependent constants.
    pub target_error_bound_exact: f64,
    /// Transitions needed for accuracy `epsilon` at the requested confidence.
    pub sample_complexity: f64,
    /// Largest matrix error compatible with accuracy `epsilon`.
    pub eta_max_limit: f64,
    pub samples_sufficient: bool,
    pub eta_sufficient: bool,
    pub feasible: bool,
}

/// `sqrt(2 (m ln 2 + ln(1/delta)) / n)`.
pub fn prior_concentration_radius(m: usize, n_samples: usize, confidence_delta: f64) -> f64 {
    let log_term = m as f64 * std::f64::consts::LN_2 + (1.0 / confidence_delta).ln();
    (2.0 * log_term / n_samples as f64).sqrt()
}

/// First-order error analysis of targets computed from an estimated prior and
/// matrix.
pub fn error_bounds(space: &FeatureSpace, inputs: &BoundInputs) -> Result<ErrorBoundReport> {
    let BoundInputs {
        n_samples,
        confidence_delta,
        eta_max,
        epsilon,
        candidates,
    } = *inputs;
    if n_samples < 3 {
        return Err(Error::InvalidArgument {
            name: "n_samples",
            reason: format!("must be at least 3, got {n_samples}"),
        });
    }
    if !(confidence_delta > 0.0 && confidence_delta < 1.0) {
        return Err(Error::InvalidArgument {
            name: "confidence_delta",
            reason: format!("must lie in (0, 1), got {confidence_delta}"),
        });
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument {
            name: "epsilon",
            reason: format!("must be positive, got {epsilon}"),
        });
    }
    if !(eta_max >= 0.0 && eta_max.is_finite()) {
        return Err(Error::InvalidArgument {
            name: "eta_max",
            reason: format!("must be finite and nonnegative, got {eta_max}"),
        });
    }
    let cand = candidates.unwrap_or(n_samples);
    if cand < 2 {
        return Err(Error::InvalidArgument {
            name: "candidates",
            reason: format!("must be at least 2, got {cand}"),
        });
    }
    let m = space.size();
    let s_min = space.marginal().into_iter().fold(f64::INFINITY, f64::min);
    if !(s_min > 0.0) {
        return Err(Error::DegenerateMarginal(s_min));
    }
    let s2 = s_min * s_min;
    let eps_p = prior_concentration_radius(m, n_samples, confidence_delta);
    let (c1_simple, c2_simple) = (6.0, 8.0);
    let nc = cand as f64;
    let c1_exact = 4.0 * nc / (nc - 1.0);
    let c2_exact = (4.0 * nc + 4.0) / (nc - 1.0);
    let log_term = m as f64 * std::f64::consts::LN_2 + (1.0 / confidence_delta).ln();
    let sample_complexity = 8.0 * c1_simple * c1_simple / (epsilon * epsilon * s2 * s2) * log_term;
    let eta_max_limit = epsilon * s2 / (2.0 * c2_simple);
    let samples_sufficient = n_samples as f64 >= sample_complexity;
    let eta_sufficient = eta_max <= eta_max_limit;
    Ok(ErrorBoundReport {
        m,
        s_min,
        eta_max,
        eps_p,
        target_error_bound: (c1_simple * eps_p + c2_simple * eta_max) / s2,
        c1_exact,
        c2_exact,
        target_error_bound_exact: (c1_exact * eps_p + c2_exact * eta_max) / s2,
        sample_complexity,
        eta_max_limit,
        samples_sufficient,
        eta_sufficient,
        feasible: samples_sufficient && eta_sufficient,
    })
}

/// `max_k ||A_hat[:, k] - A[:, k]||_inf`, i.e. the largest absolute entry error.
pub fn matrix_sup_error(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (estimate - truth).amax()
}
