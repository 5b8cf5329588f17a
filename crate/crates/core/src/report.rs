//! On-disk artifacts: predicted targets, per-run logs and reports, sweep
//! summaries and bound reports. Column layouts are listed in `docs/artifacts.md`.
//!
//! JSON floats use the shortest representation that round-trips exactly;
//! non-finite values become `null`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::encoder::write_snapshot;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::metrics::{self, to_rows, OrderingReport};
use crate::synth::SyntheticDatasetConfig;
use crate::theory::{
    predict_scaled_target, predict_target, BoundInputs, EntryFlag, ErrorBoundReport,
};
use crate::tpm::FeatureSpace;
use crate::trainer::{RunResult, SweepRun, TrainConfig};

pub const PREDICTED_CSV: &str = "predicted.csv";
pub const PREDICTED_JSON: &str = "predicted.json";
pub const LOG_CSV: &str = "log.csv";
pub const SPECTRUM_CSV: &str = "spectrum.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const REPORT_JSON: &str = "report.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const BOUNDS_JSON: &str = "bounds.json";
pub const ENCODER_STEM: &str = "encoder";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn finish_csv(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct ScaledTargetArtifact {
    pub values: Vec<Vec<f64>>,
    /// `in_range`, `out_of_range` or `undefined` per entry.
    pub flags: Vec<Vec<&'static str>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictedArtifact {
    pub tpm_hash: String,
    pub labels: Vec<String>,
    pub prior: Vec<f64>,
    pub n: usize,
    pub loss: LossKind,
    pub delta: f64,
    pub gamma: f64,
    pub c1: Vec<Vec<f64>>,
    pub c2: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    pub scaled_target: Option<ScaledTargetArtifact>,
}

fn flag_name(f: EntryFlag) -> &'static str {
    match f {
        EntryFlag::InRange => "in_range",
        EntryFlag::OutOfRange => "out_of_range",
        EntryFlag::Undefined => "undefined",
    }
}

/// Targets for `n` candidates per anchor. The scaled target is included for
/// SC-InfoNCE losses.
pub fn predicted_artifact(
    space: &FeatureSpace,
    n: usize,
    loss: &LossConfig,
) -> Result<PredictedArtifact> {
    let pred = predict_target(space, n)?;
    let scaled_target = if loss.kind == LossKind::ScInfoNce {
        let sp = predict_scaled_target(space, n, &loss.scaled_target())?;
        Some(ScaledTargetArtifact {
            values: to_rows(&sp.values),
            flags: (0..sp.flags.nrows())
                .map(|i| {
                    (0..sp.flags.ncols())
                        .map(|j| flag_name(sp.flags[(i, j)]))
                        .collect()
                })
                .collect(),
            warnings: sp.warnings(),
        })
    } else {
        None
    };
    Ok(PredictedArtifact {
        tpm_hash: space.tpm().content_hash(),
        labels: space.tpm().labels().to_vec(),
        prior: space.prior().weights().to_vec(),
        n,
        loss: loss.kind,
        delta: loss.delta,
        gamma: loss.gamma,
        c1: to_rows(&pred.c1),
        c2: to_rows(&pred.c2),
        target: to_rows(&pred.target),
        scaled_target,
    })
}

/// Writes `predicted.csv` and `predicted.json` into `dir`.
pub fn write_predicted(
    dir: &Path,
    space: &FeatureSpace,
    n: usize,
    loss: &LossConfig,
) -> Result<PredictedArtifact> {
    let pred = predict_target(space, n)?;
    let csv_path = dir.join(PREDICTED_CSV);
    let mut w = create(&csv_path)?;
    pred.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let artifact = predicted_artifact(space, n, loss)?;
    write_json(&dir.join(PREDICTED_JSON), &artifact)?;
    Ok(artifact)
}

fn pair_columns(prefix: &str, m: usize) -> Vec<String> {
    (0..m)
        .flat_map(|i| (0..m).map(move |j| format!("{prefix}_{i}_{j}")))
        .collect()
}

/// Header of `log.csv` for `m` classes.
pub fn log_header(m: usize) -> Vec<String> {
    let mut h = vec!["run_id".to_string(), "epoch".into(), "loss".into()];
    h.extend(pair_columns("p", m));
    h.extend(pair_columns("m", m));
    h.extend(["eval_loss", "mae", "mean_similarity", "asymmetry"].map(String::from));
    h
}

fn write_log(path: &Path, run_id: &str, run: &RunResult) -> Result<()> {
    let m = run.records.first().map_or(0, |r| r.measured_p.nrows());
    let mut w = csv_writer(path)?;
    w.write_record(log_header(m))?;
    for r in &run.records {
        let mut rec = vec![
            run_id.to_string(),
            r.epoch.to_string(),
            r.loss_value.to_string(),
        ];
        rec.extend(r.measured_p.transpose().iter().map(f64::to_string));
        rec.extend(r.class_sim.transpose().iter().map(f64::to_string));
        rec.extend(
            [
                r.eval_loss,
                r.mae_vs_predicted,
                r.mean_similarity,
                r.asymmetry,
            ]
            .map(|v| v.to_string()),
        );
        w.write_record(&rec)?;
    }
    finish_csv(w, path)
}

fn write_spectrum(path: &Path, run_id: &str, run: &RunResult) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["run_id", "epoch", "rank", "eigenvalue"])?;
    for r in &run.records {
        for (k, v) in r.spectrum.iter().enumerate() {
            w.write_record([
                run_id.to_string(),
                r.epoch.to_string(),
                k.to_string(),
                v.to_string(),
            ])?;
        }
    }
    finish_csv(w, path)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tpm_hash: String,
    pub train: TrainConfig,
    pub dataset: SyntheticDatasetConfig,
    pub checkpoints: usize,
    pub epochs: Vec<usize>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub status: &'static str,
    pub run_id: String,
    pub loss: LossKind,
    pub n: usize,
    pub final_epoch: usize,
    /// Checkpoints averaged into the final values.
    pub final_checkpoints: usize,
    pub predicted: Vec<Vec<f64>>,
    /// Symmetrized, averaged over the final checkpoints.
    pub measured: Vec<Vec<f64>>,
    /// Unsymmetrized, at the last checkpoint.
    pub measured_raw: Vec<Vec<f64>>,
    /// Spread across evaluation blocks at the last checkpoint.
    pub measured_sd: Vec<Vec<f64>>,
    pub asymmetry: f64,
    pub mae: f64,
    pub row_mae: Vec<f64>,
    pub missing_pairs: Vec<(usize, usize)>,
    pub class_sim: Vec<Vec<f64>>,
    /// Order of the class similarities against the predicted targets.
    pub ordering: OrderingReport,
    /// Order of the measured probabilities against the predicted targets.
    pub ordering_p: OrderingReport,
    pub mean_similarity: f64,
    pub inter_class_similarity: f64,
    pub intra_class_similarity: f64,
    pub final_loss: f64,
    pub spectrum: Vec<f64>,
    pub scaled_target: Option<ScaledTargetArtifact>,
}

pub fn run_report(run_id: &str, run: &RunResult, space: &FeatureSpace) -> Result<RunReport> {
    let last = run.records.last().ok_or(Error::NoData)?;
    let fin = run.final_summary()?;
    let n = run.config.batch_size;
    let pred = predict_target(space, n)?.target;
    Ok(RunReport {
        status: "ok",
        run_id: run_id.to_string(),
        loss: run.config.loss.kind,
        n,
        final_epoch: last.epoch,
        final_checkpoints: fin.checkpoints,
        predicted: to_rows(&pred),
        measured: to_rows(&fin.measured_p_sym),
        measured_raw: to_rows(&last.measured_p),
        measured_sd: to_rows(&last.measured_p_sd),
        asymmetry: last.asymmetry,
        mae: metrics::mae(&fin.measured_p_sym, &pred)?,
        row_mae: metrics::row_mae(&fin.measured_p_sym, &pred)?,
        missing_pairs: last.missing_pairs.clone(),
        class_sim: to_rows(&fin.class_sim),
        ordering: metrics::ordering_check(&fin.class_sim, &pred)?,
        ordering_p: metrics::ordering_check(&fin.measured_p_sym, &pred)?,
        mean_similarity: fin.mean_similarity,
        inter_class_similarity: fin.inter_class_similarity,
        intra_class_similarity: fin.intra_class_similarity,
        final_loss: fin.loss_value,
        spectrum: last.spectrum.clone(),
        scaled_target: predicted_artifact(space, n, &run.config.loss)?.scaled_target,
    })
}

/// Writes `log.csv`, `spectrum.csv`, `manifest.json`, `report.json` and the
/// encoder snapshot into `dir`.
pub fn write_run(
    dir: &Path,
    run_id: &str,
    run: &RunResult,
    space: &FeatureSpace,
    dataset: &SyntheticDatasetConfig,
) -> Result<RunReport> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_log(&dir.join(LOG_CSV), run_id, run)?;
    write_spectrum(&dir.join(SPECTRUM_CSV), run_id, run)?;
    write_snapshot(&run.encoder, dir, ENCODER_STEM)?;
    let report = run_report(run_id, run, space)?;
    write_json(&dir.join(REPORT_JSON), &report)?;
    let manifest = RunManifest {
        run_id: run_id.to_string(),
        tpm_hash: space.tpm().content_hash(),
        train: run.config.clone(),
        dataset: dataset.clone(),
        checkpoints: run.records.len(),
        epochs: run.records.iter().map(|r| r.epoch).collect(),
        files: [
            LOG_CSV,
            SPECTRUM_CSV,
            REPORT_JSON,
            "encoder.json",
            "encoder.csv",
        ]
        .map(String::from)
        .to_vec(),
    };
    write_json(&dir.join(MANIFEST_JSON), &manifest)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureReport {
    pub status: &'static str,
    pub run_id: String,
    pub numerical: bool,
    pub error: String,
}

/// `report.json` for a run that aborted.
pub fn write_failure(dir: &Path, run_id: &str, err: &Error) -> Result<()> {
    write_json(
        &dir.join(REPORT_JSON),
        &FailureReport {
            status: "failed",
            run_id: run_id.to_string(),
            numerical: err.is_numerical(),
            error: err.to_string(),
        },
    )
}

/// Directory name of one sweep point, e.g. `delta=0.5/rep0`.
pub fn sweep_run_dir(run: &SweepRun) -> String {
    format!("{}={}/rep{}", run.axis, run.value, run.repeat)
}

pub fn sweep_run_id(run: &SweepRun) -> String {
    format!("{}={}-rep{}", run.axis, run.value, run.repeat)
}

pub const SUMMARY_HEADER: [&str; 15] = [
    "axis",
    "value",
    "repeat",
    "seed",
    "batch_size",
    "negatives",
    "tau",
    "delta",
    "gamma",
    "final_mae",
    "ordering_match",
    "rank_correlation",
    "mean_inter_similarity",
    "mean_intra_similarity",
    "mean_similarity",
];

/// One row per sweep run, in the order given.
pub fn write_sweep_summary(path: &Path, runs: &[(SweepRun, RunReport)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for (run, rep) in runs {
        let c = &run.result.config;
        w.write_record([
            run.axis.to_string(),
            run.value.to_string(),
            run.repeat.to_string(),
            c.seed.to_string(),
            c.batch_size.to_string(),
            (c.batch_size - 1).to_string(),
            c.loss.tau.to_string(),
            c.loss.delta.to_string(),
            c.loss.gamma.to_string(),
            rep.mae.to_string(),
            rep.ordering.matches.to_string(),
            rep.ordering.rank_correlation.to_string(),
            rep.inter_class_similarity.to_string(),
            rep.intra_class_similarity.to_string(),
            rep.mean_similarity.to_string(),
        ])?;
    }
    finish_csv(w, path)
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsArtifact {
    pub tpm_hash: String,
    pub n_samples: usize,
    pub confidence_delta: f64,
    pub epsilon: f64,
    pub candidates: Option<usize>,
    /// Includes `eta_max`.
    #[serde(flatten)]
    pub report: ErrorBoundReport,
}

pub fn write_bounds(
    dir: &Path,
    space: &FeatureSpace,
    inputs: &BoundInputs,
    report: &ErrorBoundReport,
) -> Result<()> {
    write_json(
        &dir.join(BOUNDS_JSON),
        &BoundsArtifact {
            tpm_hash: space.tpm().content_hash(),
            n_samples: inputs.n_samples,
            confidence_delta: inputs.confidence_delta,
            epsilon: inputs.epsilon,
            candidates: inputs.candidates,
            report: report.clone(),
        },
    )
}

/// Six significant digits per entry, for terminal output.
pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:>12.5e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tpm::reference_tpm;

    #[test]
    fn log_header_layout() {
        let h = log_header(2);
        assert_eq!(
            h,
            vec![
                "run_id",
                "epoch",
                "loss",
                "p_0_0",
                "p_0_1",
                "p_1_0",
                "p_1_1",
                "m_0_0",
                "m_0_1",
                "m_1_0",
                "m_1_1",
                "eval_loss",
                "mae",
                "mean_similarity",
                "asymmetry"
            ]
        );
    }

    #[test]
    fn predicted_files_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let space = FeatureSpace::uniform(reference_tpm());
        write_predicted(dir.path(), &space, 1000, &LossConfig::infonce(1.0)).unwrap();
        let a = fs::read(dir.path().join(PREDICTED_JSON)).unwrap();
        write_predicted(dir.path(), &space, 1000, &LossConfig::infonce(1.0)).unwrap();
        assert_eq!(a, fs::read(dir.path().join(PREDICTED_JSON)).unwrap());
        let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
        assert_eq!(v["n"], 1000);
        assert!(v["scaled_target"].is_null());
    }

    #[test]
    fn json_floats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = [0.1 + 0.2, 1.0 / 3.0, 1e-300, 0.00122];
        write_json(&dir.path().join("x.json"), &x).unwrap();
        let back: Vec<f64> =
            serde_json::from_slice(&fs::read(dir.path().join("x.json")).unwrap()).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn scaled_target_included_for_sc_loss() {
        let space = FeatureSpace::uniform(reference_tpm());
        let a = predicted_artifact(&space, 1000, &LossConfig::sc_infonce(1.0, 0.5, 0.0)).unwrap();
        let st = a.scaled_target.unwrap();
        assert_eq!(st.values.len(), 3);
        assert_eq!(st.flags[0][0], "in_range");
    }

    #[test]
    fn matrix_formatting_uses_six_digits() {
        let s = format_matrix(&DMatrix::from_element(1, 1, 0.001221_4));
        assert_eq!(s.trim(), "1.22140e-3");
    }
}
