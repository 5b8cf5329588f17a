//! Cosine similarity blocks, pair probabilities and the four contrastive losses.
//!
//! A block pairs `B` anchors (first views) with `B` candidates (second views);
//! the positive of anchor `b` is candidate `b`. Every loss returns its value
//! averaged over anchors together with the gradient with respect to the
//! similarity table, which [`SimilarityBlock::backward`] pulls back to the raw
//! embeddings.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::theory::{feasibility_check, ScaledTargetConfig};

/// Rows whose norm falls below this are rejected by [`cosine_block`].
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "scl")]
    Scl,
    #[serde(rename = "infonce")]
    InfoNce,
    #[serde(rename = "dcl")]
    Dcl,
    #[serde(rename = "sc_infonce")]
    ScInfoNce,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Scl,
        LossKind::InfoNce,
        LossKind::Dcl,
        LossKind::ScInfoNce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Scl => "scl",
            LossKind::InfoNce => "infonce",
            LossKind::Dcl => "dcl",
            LossKind::ScInfoNce => "sc_infonce",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How SC-InfoNCE sets the positive weight `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// `alpha = p_pos - 1 + delta` at the current positive probability, with no
    /// gradient through `alpha`.
    #[default]
    Dynamic,
    /// `alpha = delta - 1`, a fixed constant.
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Weight of the negative term in SCL.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub alpha_mode: AlphaMode,
}

fn default_tau() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    1.0
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            tau: default_tau(),
            lambda: default_lambda(),
            delta: default_delta(),
            gamma: 0.0,
            alpha_mode: AlphaMode::Dynamic,
        }
    }

    pub fn infonce(tau: f64) -> Self {
        Self {
            tau,
            ..Self::new(LossKind::InfoNce)
        }
    }

    pub fn sc_infonce(tau: f64, delta: f64, gamma: f64) -> Self {
        Self {
            tau,
            delta,
            gamma,
            lambda: 0.0,
            ..Self::new(LossKind::ScInfoNce)
        }
    }

    pub fn scaled_target(&self) -> ScaledTargetConfig {
        ScaledTargetConfig {
            delta: self.delta,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !self.lambda.is_finite() {
            return Err(Error::InvalidArgument {
                name: "lambda",
                reason: format!("must be finite, got {}", self.lambda),
            });
        }
        if self.kind == LossKind::ScInfoNce {
            let report = feasibility_check(&self.scaled_target());
            if !report.feasible {
                return Err(Error::Infeasible(report.failed.join("; ")));
            }
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument {
            name: "tau",
            reason: format!("temperature must be positive, got {tau}"),
        })
    }
}

/// Cosine similarities between normalized anchors and candidates.
#[derive(Debug, Clone)]
pub struct SimilarityBlock {
    anchors: DMatrix<f64>,
    candidates: DMatrix<f64>,
    anchor_norms: Vec<f64>,
    candidate_norms: Vec<f64>,
    sims: DMatrix<f64>,
}

fn normalize_rows(x: &DMatrix<f64>, offset: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for r in 0..x.nrows() {
        let norm = x.row(r).norm();
        if !(norm >= MIN_NORM) {
            return Err(Error::ZeroNormRow { row: r + offset });
        }
        out.row_mut(r).unscale_mut(norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// L2-normalizes every row and tabulates all anchor/candidate inner products.
///
/// A zero-norm row is reported by index; candidate rows are numbered after
/// the anchors.
pub fn cosine_block(anchors: &DMatrix<f64>, candidates: &DMatrix<f64>) -> Result<SimilarityBlock> {
    if anchors.ncols() != candidates.ncols() {
        return Err(Error::DimensionMismatch {
            context: "embedding dimension",
            expected: anchors.ncols(),
            found: candidates.ncols(),
        });
    }
    let (a, anchor_norms) = normalize_rows(anchors, 0)?;
    let (c, candidate_norms) = normalize_rows(candidates, anchors.nrows())?;
    let mut sims = &a * c.transpose();
    // rounding can push |cos| a hair past 1
    sims.apply(|v| *v = v.clamp(-1.0, 1.0));
    Ok(SimilarityBlock {
        anchors: a,
        candidates: c,
        anchor_norms,
        candidate_norms,
        sims,
    })
}

impl SimilarityBlock {
    pub fn sims(&self) -> &DMatrix<f64> {
        &self.sims
    }

    pub fn batch_size(&self) -> usize {
        self.sims.nrows()
    }

    pub fn num_candidates(&self) -> usize {
        self.sims.ncols()
    }

    /// Candidate index holding the positive of `anchor`.
    pub fn positive_index(&self, anchor: usize) -> usize {
        anchor
    }

    pub fn normalized_anchors(&self) -> &DMatrix<f64> {
        &self.anchors
    }

    pub fn normalized_candidates(&self) -> &DMatrix<f64> {
        &self.candidates
    }

    /// Pulls `dL/dsims` back to the raw (pre-normalization) anchor and candidate rows.
    pub fn backward(&self, grad_sims: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let ga = grad_sims * &self.candidates;
        let gc = grad_sims.transpose() * &self.anchors;
        (
            project_out(&ga, &self.anchors, &self.anchor_norms),
            project_out(&gc, &self.candidates, &self.candidate_norms),
        )
    }
}

// d(x/|x|)^T g = (g - (g.u) u) / |x|
fn project_out(g: &DMatrix<f64>, unit: &DMatrix<f64>, norms: &[f64]) -> DMatrix<f64> {
    let mut out = g.clone();
    for r in 0..g.nrows() {
        let dot = g.row(r).dot(&unit.row(r));
        let mut row = out.row_mut(r);
        row -= unit.row(r) * dot;
        row.unscale_mut(norms[r]);
    }
    out
}

/// Row-wise softmax of `sims / tau` with the row maximum shifted out.
pub fn softmax_rows(sims: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let mut p = sims / tau;
    for r in 0..p.nrows() {
        let mut row = p.row_mut(r);
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row.unscale_mut(sum);
    }
    p
}

/// Probability that candidate `j` is the positive of `anchor` under a softmax
/// over all candidates.
pub fn pair_probability(block: &SimilarityBlock, anchor: usize, j: usize, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let b = block.batch_size();
    if anchor >= b || j >= block.num_candidates() {
        return Err(Error::InvalidArgument {
            name: "anchor/j",
            reason: format!(
                "({anchor},{j}) outside a {b}x{} block",
                block.num_candidates()
            ),
        });
    }
    let row = block.sims.row(anchor);
    let max = row.max();
    let denom: f64 = row.iter().map(|s| ((s - max) / tau).exp()).sum();
    Ok(((block.sims[(anchor, j)] - max) / tau).exp() / denom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// `dL/dsims`, already divided by the number of anchors.
    pub grad_sims: DMatrix<f64>,
}

fn check_square(sims: &DMatrix<f64>) -> Result<usize> {
    if sims.nrows() != sims.ncols() {
        return Err(Error::DimensionMismatch {
            context: "similarity block must be square",
            expected: sims.nrows(),
            found: sims.ncols(),
        });
    }
    if sims.nrows() == 0 {
        return Err(Error::NoData);
    }
    Ok(sims.nrows())
}

/// Simplified contrastive loss: `-s_pos + lambda * sum s_neg`, no softmax.
pub fn scl_from_sims(sims: &DMatrix<f64>, lambda: f64) -> Result<LossOutput> {
    let b = check_square(sims)?;
    let inv_b = 1.0 / b as f64;
    let mut value = 0.0;
    let mut grad = DMatrix::from_element(b, b, lambda * inv_b);
    for r in 0..b {
        let row_sum: f64 = sims.row(r).sum();
        let pos = sims[(r, r)];
        value += -pos + lambda * (row_sum - pos);
        grad[(r, r)] = -inv_b;
    }
    Ok(LossOutput {
        value: value * inv_b,
        grad_sims: grad,
    })
}

/// InfoNCE: mean negative log softmax probability of the positive.
pub fn infonce_from_sims(sims: &DMatrix<f64>, tau: f64) -> Result<LossOutput> {
    infonce_with_positive_probs(sims, tau).map(|(out, _)| out)
}

/// InfoNCE plus the softmax probability of each anchor's positive.
fn infonce_with_positive_probs(sims: &DMatrix<f64>, tau: f64) -> Result<(LossOutput, Vec<f64>)> {
    check_tau(tau)?;
    let b = check_square(sims)?;
    let inv_b = 1.0 / b as f64;
    let mut value = 0.0;
    // column c of `grad_t` holds the gradient row of anchor c
    let sims_t = sims.transpose();
    let mut grad_t = DMatrix::zeros(b, b);
    let mut positive = Vec::with_capacity(b);
    for r in 0..b {
        let row = sims_t.column(r);
        let max = row.max();
        let mut col = grad_t.column_mut(r);
        let mut sum = 0.0;
        for k in 0..b {
            let e = ((row[k] - max) / tau).exp();
            col[k] = e;
            sum += e;
        }
        value += -((row[r] - max) / tau - sum.ln());
        positive.push(col[r] / sum);
        col.scale_mut(inv_b / (tau * sum));
        col[r] -= inv_b / tau;
    }
    Ok((
        LossOutput {
            value: value * inv_b,
            grad_sims: grad_t.transpose(),
        },
        positive,
    ))
}

/// Decoupled contrastive loss: the positive is dropped from the denominator.
pub fn dcl_from_sims(sims: &DMatrix<f64>, tau: f64) -> Result<LossOutput> {
    check_tau(tau)?;
    let b = check_square(sims)?;
    if b < 2 {
        return Err(Error::InvalidArgument {
            name: "batch_size",
            reason: "DCL needs at least one negative (B >= 2)".into(),
        });
    }
    let inv_b = 1.0 / b as f64;
    let mut value = 0.0;
    let mut grad = DMatrix::zeros(b, b);
    for r in 0..b {
        let row = sims.row(r);
        let max = (0..b)
            .filter(|&k| k != r)
            .map(|k| row[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in (0..b).filter(|&k| k != r) {
            let e = ((row[k] - max) / tau).exp();
            grad[(r, k)] = e;
            sum += e;
        }
        value += -(row[r] / tau - (max / tau + sum.ln()));
        for k in 0..b {
            grad[(r, k)] = if k == r { -1.0 } else { grad[(r, k)] / sum } * inv_b / tau;
        }
    }
    Ok(LossOutput {
        value: value * inv_b,
        grad_sims: grad,
    })
}

/// SC-InfoNCE with caller-supplied per-anchor `alpha`, treated as constants:
/// `L_InfoNCE - (alpha s_pos - gamma sum s_neg) / tau`.
pub fn sc_infonce_with_alpha(
    sims: &DMatrix<f64>,
    tau: f64,
    gamma: f64,
    alpha: &[f64],
) -> Result<LossOutput> {
    let base = infonce_from_sims(sims, tau)?;
    sc_correction(sims, base, tau, gamma, alpha)
}

fn sc_correction(
    sims: &DMatrix<f64>,
    base: LossOutput,
    tau: f64,
    gamma: f64,
    alpha: &[f64],
) -> Result<LossOutput> {
    let b = check_square(sims)?;
    if alpha.len() != b {
        return Err(Error::DimensionMismatch {
            context: "alpha length",
            expected: b,
            found: alpha.len(),
        });
    }
    let LossOutput {
        mut value,
        grad_sims: mut grad,
    } = base;
    let inv_b = 1.0 / b as f64;
    let mut extra = 0.0;
    let row_sums = sims.column_sum();
    grad.add_scalar_mut(gamma * inv_b / tau);
    for r in 0..b {
        let pos = sims[(r, r)];
        extra += -(alpha[r] * pos - gamma * (row_sums[r] - pos)) / tau;
        grad[(r, r)] -= (alpha[r] + gamma) * inv_b / tau;
    }
    value += extra * inv_b;
    Ok(LossOutput {
        value,
        grad_sims: grad,
    })
}

/// Per-anchor `alpha` for SC-InfoNCE at the current similarities.
pub fn sc_alpha(sims: &DMatrix<f64>, cfg: &LossConfig) -> Vec<f64> {
    match cfg.alpha_mode {
        AlphaMode::Static => vec![cfg.delta - 1.0; sims.nrows()],
        AlphaMode::Dynamic => {
            let p = softmax_rows(sims, cfg.tau);
            (0..sims.nrows())
                .map(|r| p[(r, r)] - 1.0 + cfg.delta)
                .collect()
        }
    }
}

pub fn sc_infonce_from_sims(sims: &DMatrix<f64>, cfg: &LossConfig) -> Result<LossOutput> {
    let (base, positive) = infonce_with_positive_probs(sims, cfg.tau)?;
    let alpha: Vec<f64> = match cfg.alpha_mode {
        AlphaMode::Static => vec![cfg.delta - 1.0; positive.len()],
        AlphaMode::Dynamic => positive.iter().map(|p| p - 1.0 + cfg.delta).collect(),
    };
    sc_correction(sims, base, cfg.tau, cfg.gamma, &alpha)
}

fn expect_kind(cfg: &LossConfig, kind: LossKind) -> Result<()> {
    if cfg.kind == kind {
        Ok(())
    } else {
        Err(Error::InvalidArgument {
            name: "kind",
            reason: format!("expected a {kind} config, got {}", cfg.kind),
        })
    }
}

pub fn scl_loss(block: &SimilarityBlock, cfg: &LossConfig) -> Result<LossOutput> {
    expect_kind(cfg, LossKind::Scl)?;
    scl_from_sims(&block.sims, cfg.lambda)
}

pub fn infonce_loss(block: &SimilarityBlock, cfg: &LossConfig) -> Result<LossOutput> {
    expect_kind(cfg, LossKind::InfoNce)?;
    infonce_from_sims(&block.sims, cfg.tau)
}

pub fn dcl_loss(block: &SimilarityBlock, cfg: &LossConfig) -> Result<LossOutput> {
    expect_kind(cfg, LossKind::Dcl)?;
    dcl_from_sims(&block.sims, cfg.tau)
}

pub fn sc_infonce_loss(block: &SimilarityBlock, cfg: &LossConfig) -> Result<LossOutput> {
    expect_kind(cfg, LossKind::ScInfoNce)?;
    cfg.validate()?;
    sc_infonce_from_sims(&block.sims, cfg)
}

/// Dispatches on `cfg.kind`.
pub fn loss_from_sims(sims: &DMatrix<f64>, cfg: &LossConfig) -> Result<LossOutput> {
    match cfg.kind {
        LossKind::Scl => scl_from_sims(sims, cfg.lambda),
        LossKind::InfoNce => infonce_from_sims(sims, cfg.tau),
        LossKind::Dcl => dcl_from_sims(sims, cfg.tau),
        LossKind::ScInfoNce => {
            cfg.validate()?;
            sc_infonce_from_sims(sims, cfg)
        }
    }
}

pub fn evaluate(block: &SimilarityBlock, cfg: &LossConfig) -> Result<LossOutput> {
    loss_from_sims(&block.sims, cfg)
}
