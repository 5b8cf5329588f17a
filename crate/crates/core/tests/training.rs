use ccl_core::losses::LossConfig;
use ccl_core::synth::{generate, Dataset, SyntheticDatasetConfig};
use ccl_core::theory::predict_target;
use ccl_core::tpm::{reference_tpm, FeatureSpace};
use ccl_core::trainer::{repeat_seed, sweep, train, SweepAxis, TrainConfig};

fn setup() -> (Dataset, FeatureSpace) {
    (
        generate(&SyntheticDatasetConfig::default()).unwrap(),
        FeatureSpace::uniform(reference_tpm()),
    )
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in ys.iter().enumerate() {
        num += (x as f64 - xm) * (y - ym);
        den += (x as f64 - xm).powi(2);
    }
    num / den
}

#[test]
fn max_entry_error_does_not_grow_late_in_training() {
    let (ds, space) = setup();
    let pred = predict_target(&space, 1000).unwrap().target;
    let slopes: Vec<f64> = (0..5)
        .map(|r| {
            let cfg = TrainConfig {
                seed: repeat_seed(0, r),
                ..Default::default()
            };
            let run = train(&cfg, &ds, &space).unwrap();
            let errs: Vec<f64> = run
                .records
                .iter()
                .map(|c| (&c.measured_p_sym - &pred).abs().max())
                .collect();
            let tail = &errs[errs.len() - errs.len().div_ceil(4)..];
            slope(tail)
        })
        .collect();
    let n = slopes.len() as f64;
    let mean = slopes.iter().sum::<f64>() / n;
    let sd = (slopes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean <= 2.0 * sd / n.sqrt(), "slopes {slopes:?}");
}

#[test]
fn temperature_moves_similarities_but_not_predictions() {
    let (ds, space) = setup();
    let base = TrainConfig {
        epochs: 40,
        ..Default::default()
    };
    let runs: Vec<_> = [1.0, 0.5]
        .iter()
        .map(|&tau| {
            let cfg = TrainConfig {
                loss: LossConfig::infonce(tau),
                ..base.clone()
            };
            train(&cfg, &ds, &space).unwrap()
        })
        .collect();
    assert_eq!(
        predict_target(&space, runs[0].config.batch_size).unwrap(),
        predict_target(&space, runs[1].config.batch_size).unwrap()
    );
    let window = |run: &ccl_core::RunResult| -> Vec<f64> {
        let n = run.records.len();
        run.records[n / 2..]
            .iter()
            .map(|r| r.inter_class_similarity())
            .collect()
    };
    let (a, b) = (window(&runs[0]), window(&runs[1]));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let spread = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    let noise = spread(&a).max(spread(&b));
    assert!(
        (mean(&a) - mean(&b)).abs() > 5.0 * noise,
        "{} vs {} (noise {noise})",
        mean(&a),
        mean(&b)
    );
}

#[test]
fn tau_sweep_yields_one_run_per_value() {
    let (ds, space) = setup();
    let base = TrainConfig {
        epochs: 1,
        batch_size: 64,
        ..Default::default()
    };
    let values = [0.05, 0.5, 1.0, 5.0];
    let runs = sweep(&base, &ds, &space, SweepAxis::Tau, &values, 1, 1).unwrap();
    assert_eq!(runs.len(), 4);
    for (run, v) in runs.iter().zip(values) {
        assert_eq!(run.value, v);
        assert_eq!(run.result.config.loss.tau, v);
        assert_eq!(run.result.config.seed, base.seed);
    }
}

#[test]
fn noiseless_table_encoder_separates_two_classes() {
    let ds = generate(&SyntheticDatasetConfig {
        n_classes: 2,
        n_items: 400,
        noise_sigma: 0.0,
        ..Default::default()
    })
    .unwrap();
    let space = FeatureSpace::uniform(ccl_core::TransitionMatrix::identity(2));
    let cfg = TrainConfig {
        batch_size: 20,
        epochs: 20,
        encoder: ccl_core::trainer::EncoderConfig {
            kind: ccl_core::trainer::EncoderKind::Table,
            ..Default::default()
        },
        optimizer: ccl_core::trainer::OptimizerConfig {
            lr: 0.05,
            ..Default::default()
        },
        checkpoint_every: 20,
        ..Default::default()
    };
    // 200 training items / B = 20 gives 10 steps per epoch, 200 steps in all.
    let run = train(&cfg, &ds, &space).unwrap();
    let last = run.records.last().unwrap();
    assert!(last.intra_class_similarity() > last.inter_class_similarity());
}
