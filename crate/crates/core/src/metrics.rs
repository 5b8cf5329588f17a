//! Measured co-occurrence probabilities, class similarities and spectrum
//! diagnostics, plus their comparison against predicted targets.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{softmax_rows, SimilarityBlock};

/// Square matrix as nested rows for serialization.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, c, |i, j| rows[i][j])
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// A similarity block together with the view classes of its rows and columns.
#[derive(Debug, Clone)]
pub struct LabeledBlock {
    pub block: SimilarityBlock,
    pub anchor_classes: Vec<usize>,
    pub candidate_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PMeasurement {
    /// Raw (asymmetric) mean over blocks; `NaN` where a pair was never observed.
    pub mean: DMatrix<f64>,
    /// Sample standard deviation of the per-block means.
    pub sd: DMatrix<f64>,
    pub symmetrized: DMatrix<f64>,
    /// `max |P - P^T|`.
    pub asymmetry: f64,
    pub missing: Vec<(usize, usize)>,
}

/// Mean softmax probability per (anchor class, candidate class) pair, averaged
/// within each block and then across blocks.
pub fn measure_p(blocks: &[LabeledBlock], m: usize, tau: f64) -> Result<PMeasurement> {
    if blocks.is_empty() {
        return Err(Error::NoData);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument {
            name: "tau",
            reason: format!("temperature must be positive, got {tau}"),
        });
    }
    let mut per_block: Vec<DMatrix<f64>> = Vec::with_capacity(blocks.len());
    for lb in blocks {
        let sims = lb.block.sims();
        if lb.anchor_classes.len() != sims.nrows() || lb.candidate_classes.len() != sims.ncols() {
            return Err(Error::DimensionMismatch {
                context: "block labels",
                expected: sims.nrows(),
                found: lb.anchor_classes.len(),
            });
        }
        if let Some(&c) = lb
            .anchor_classes
            .iter()
            .chain(&lb.candidate_classes)
            .find(|&&c| c >= m)
        {
            return Err(Error::InvalidArgument {
                name: "labels",
                reason: format!("class {c} outside 0..{m}"),
            });
        }
        let p = softmax_rows(sims, tau);
        let mut sum = DMatrix::<f64>::zeros(m, m);
        let mut count = DMatrix::<f64>::zeros(m, m);
        for (a, &ca) in lb.anchor_classes.iter().enumerate() {
            for (c, &cc) in lb.candidate_classes.iter().enumerate() {
                sum[(ca, cc)] += p[(a, c)];
                count[(ca, cc)] += 1.0;
            }
        }
        per_block.push(sum.zip_map(&count, |s, n| if n > 0.0 { s / n } else { f64::NAN }));
    }
    let mut mean = DMatrix::from_element(m, m, f64::NAN);
    let mut sd = DMatrix::from_element(m, m, f64::NAN);
    let mut missing = Vec::new();
    for i in 0..m {
        for j in 0..m {
            let vals: Vec<f64> = per_block
                .iter()
                .map(|b| b[(i, j)])
                .filter(|v| !v.is_nan())
                .collect();
            if vals.is_empty() {
                missing.push((i, j));
                continue;
            }
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            mean[(i, j)] = mu;
            sd[(i, j)] = sample_sd(&vals, mu);
        }
    }
    let symmetrized = symmetrize(&mean);
    let asymmetry = (&mean - mean.transpose())
        .iter()
        .filter(|v| !v.is_nan())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    Ok(PMeasurement {
        mean,
        sd,
        symmetrized,
        asymmetry,
        missing,
    })
}

fn sample_sd(vals: &[f64], mu: f64) -> f64 {
    if vals.len() < 2 {
        return 0.0;
    }
    let ss: f64 = vals.iter().map(|v| (v - mu) * (v - mu)).sum();
    (ss / (vals.len() - 1) as f64).sqrt()
}

fn unit_rows(embeddings: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut u = embeddings.clone();
    for r in 0..u.nrows() {
        let n = u.row(r).norm();
        if !(n >= crate::losses::MIN_NORM) {
            return Err(Error::ZeroNormRow { row: r });
        }
        u.row_mut(r).unscale_mut(n);
    }
    Ok(u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSimilarity {
    /// Mean cosine similarity per class pair; `NaN` where undefined.
    pub matrix: DMatrix<f64>,
    /// Classes with no embeddings (or a single one, for the diagonal).
    pub missing: Vec<usize>,
}

/// Mean pairwise cosine similarity between embeddings of classes `i` and `j`,
/// never pairing an embedding with itself.
pub fn class_similarity(
    embeddings: &DMatrix<f64>,
    labels: &[usize],
    m: usize,
) -> Result<ClassSimilarity> {
    if labels.len() != embeddings.nrows() {
        return Err(Error::DimensionMismatch {
            context: "class similarity labels",
            expected: embeddings.nrows(),
            found: labels.len(),
        });
    }
    let u = unit_rows(embeddings)?;
    let d = u.ncols();
    // per-class sums of unit vectors: sum_{a in i, b in j} u_a.u_b = S_i.S_j
    let mut sums = DMatrix::<f64>::zeros(m, d);
    let mut counts = vec![0usize; m];
    for (r, &c) in labels.iter().enumerate() {
        if c >= m {
            return Err(Error::InvalidArgument {
                name: "labels",
                reason: format!("class {c} outside 0..{m}"),
            });
        }
        let mut row = sums.row_mut(c);
        row += u.row(r);
        counts[c] += 1;
    }
    let gram = &sums * sums.transpose();
    let mut matrix = DMatrix::from_element(m, m, f64::NAN);
    let mut missing = Vec::new();
    for i in 0..m {
        if counts[i] == 0 {
            missing.push(i);
        }
        for j in 0..m {
            let (ni, nj) = (counts[i] as f64, counts[j] as f64);
            if i == j {
                if counts[i] >= 2 {
                    matrix[(i, i)] = ((gram[(i, i)] - ni) / (ni * (ni - 1.0))).clamp(-1.0, 1.0);
                }
            } else if counts[i] > 0 && counts[j] > 0 {
                matrix[(i, j)] = (gram[(i, j)] / (ni * nj)).clamp(-1.0, 1.0);
            }
        }
    }
    for i in 0..m {
        if counts[i] == 1 {
            missing.push(i);
        }
    }
    Ok(ClassSimilarity { matrix, missing })
}

/// Mean cosine similarity over all distinct pairs of embeddings.
pub fn mean_pairwise_similarity(embeddings: &DMatrix<f64>) -> Result<f64> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(Error::NoData);
    }
    let u = unit_rows(embeddings)?;
    let total = u.row_sum();
    let nf = n as f64;
    Ok((total.norm_squared() - nf) / (nf * (nf - 1.0)))
}

/// Mean absolute difference between the symmetrized matrices.
pub fn mae(measured: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Result<f64> {
    let diff = abs_diff(measured, predicted)?;
    Ok(diff.mean())
}

/// [`mae`] restricted to each row of the symmetrized matrices.
pub fn row_mae(measured: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Result<Vec<f64>> {
    let diff = abs_diff(measured, predicted)?;
    Ok((0..diff.nrows()).map(|r| diff.row(r).mean()).collect())
}

fn abs_diff(measured: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if measured.shape() != predicted.shape() || measured.nrows() != measured.ncols() {
        return Err(Error::DimensionMismatch {
            context: "mae operands",
            expected: predicted.nrows(),
            found: measured.nrows(),
        });
    }
    Ok((symmetrize(measured) - symmetrize(predicted)).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    /// Measured order agrees with every strict predicted comparison.
    pub matches: bool,
    /// Spearman correlation over the unique pairs (average ranks for ties).
    pub rank_correlation: f64,
    /// Unique unordered pairs `(i, j)`, `i <= j`, by descending predicted value.
    pub predicted_order: Vec<(usize, usize)>,
    pub measured_order: Vec<(usize, usize)>,
    /// Present when predicted ties forced the comparison onto strict pairs only.
    pub note: Option<String>,
}

fn unique_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|i| (i..m).map(move |j| (i, j))).collect()
}

fn descending(pairs: &[(usize, usize)], vals: &[f64]) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    idx.into_iter().map(|k| pairs[k]).collect()
}

fn average_ranks(vals: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let mut ranks = vec![0.0; vals.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && vals[idx[end + 1]] == vals[idx[start]] {
            end += 1;
        }
        let r = (start + end) as f64 / 2.0 + 1.0;
        for &k in &idx[start..=end] {
            ranks[k] = r;
        }
        start = end + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Compares the descending order of the unique class pairs.
pub fn ordering_check(measured: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Result<OrderingReport> {
    if measured.shape() != predicted.shape() || measured.nrows() != measured.ncols() {
        return Err(Error::DimensionMismatch {
            context: "ordering operands",
            expected: predicted.nrows(),
            found: measured.nrows(),
        });
    }
    let ms = symmetrize(measured);
    let ps = symmetrize(predicted);
    let pairs = unique_pairs(measured.nrows());
    let mv: Vec<f64> = pairs.iter().map(|&(i, j)| ms[(i, j)]).collect();
    let pv: Vec<f64> = pairs.iter().map(|&(i, j)| ps[(i, j)]).collect();
    let mut matches = mv.iter().all(|v| !v.is_nan());
    let mut ties = 0usize;
    for a in 0..pairs.len() {
        for b in (a + 1)..pairs.len() {
            if pv[a] == pv[b] {
                ties += 1;
                continue;
            }
            if (pv[a] > pv[b]) != (mv[a] > mv[b]) || mv[a] == mv[b] {
                matches = false;
            }
        }
    }
    let rank_correlation = pearson(&average_ranks(&mv), &average_ranks(&pv));
    Ok(OrderingReport {
        matches,
        rank_correlation,
        predicted_order: descending(&pairs, &pv),
        measured_order: descending(&pairs, &mv),
        note: (ties > 0).then(|| format!("{ties} tied predicted comparisons skipped")),
    })
}

/// Eigenvalues of the covariance of the L2-normalized embeddings, descending.
pub fn covariance_spectrum(embeddings: &DMatrix<f64>) -> Result<Vec<f64>> {
    let (n, d) = embeddings.shape();
    if n < d + 1 {
        return Err(Error::InvalidArgument {
            name: "embeddings",
            reason: format!(
                "need at least {} rows for a {d}-dimensional covariance, got {n}",
                d + 1
            ),
        });
    }
    let u = unit_rows(embeddings)?;
    let mean = u.row_mean();
    let mut centered = u;
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let trace = cov.trace();
    let mut eig: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    debug_assert!((eig.iter().sum::<f64>() - trace).abs() <= 1e-8 * trace.max(1.0));
    Ok(eig)
}
