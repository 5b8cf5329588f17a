//! Contrastive batches, the training loop, checkpoint metrics and sweeps.

use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    EmbeddingTableEncoder, Encoder, EncoderInput, MlpEncoder, OptimizerKind, OptimizerState,
};
use crate::encoder::{DEFAULT_EMBED_DIM, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::losses::{cosine_block, evaluate, LossConfig, LossKind};
use crate::metrics::{self, LabeledBlock};
use crate::synth::{feature_matrix, Dataset, View};
use crate::theory::predict_target;
use crate::tpm::FeatureSpace;

/// Offset mixed into the run seed for the held-out evaluation batches.
const EVAL_STREAM: u64 = 0x6576_616c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Mlp,
    /// One learnable row per view class.
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub hidden: usize,
    pub dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Mlp,
            hidden: DEFAULT_HIDDEN,
            dim: DEFAULT_EMBED_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub checkpoint_every: usize,
    /// Held-out evaluation blocks, each of `batch_size` pairs.
    pub eval_batches: usize,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::infonce(1.0),
            batch_size: 1000,
            epochs: 300,
            optimizer: OptimizerConfig::default(),
            checkpoint_every: 5,
            eval_batches: 2,
            encoder: EncoderConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let checks: [(&'static str, bool, String); 5] = [
            (
                "batch_size",
                self.batch_size >= 2,
                format!("must be at least 2, got {}", self.batch_size),
            ),
            (
                "epochs",
                self.epochs >= 1,
                format!("must be at least 1, got {}", self.epochs),
            ),
            (
                "checkpoint_every",
                self.checkpoint_every >= 1,
                format!("must be at least 1, got {}", self.checkpoint_every),
            ),
            (
                "eval_batches",
                self.eval_batches >= 1,
                format!("must be at least 1, got {}", self.eval_batches),
            ),
            (
                "lr",
                self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite(),
                format!("must be finite and nonnegative, got {}", self.optimizer.lr),
            ),
        ];
        for (name, ok, reason) in checks {
            if !ok {
                return Err(Error::InvalidArgument { name, reason });
            }
        }
        if self.encoder.dim < 2
            || (self.encoder.kind == EncoderKind::Mlp && self.encoder.hidden < 1)
        {
            return Err(Error::InvalidArgument {
                name: "encoder",
                reason: format!("dim must be ≥ 2 and hidden ≥ 1, got {:?}", self.encoder),
            });
        }
        Ok(())
    }
}

/// Paired views; anchor `b` and candidate `b` come from the same item.
#[derive(Debug, Clone)]
pub struct Batch {
    pub anchors: Vec<View>,
    pub candidates: Vec<View>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchor_classes(&self) -> Vec<usize> {
        self.anchors.iter().map(|v| v.view_class).collect()
    }

    pub fn candidate_classes(&self) -> Vec<usize> {
        self.candidates.iter().map(|v| v.view_class).collect()
    }
}

/// Two independent views of each listed item.
pub fn views_for<R: Rng + ?Sized>(
    dataset: &Dataset,
    items: &[usize],
    space: &FeatureSpace,
    rng: &mut R,
) -> Result<Batch> {
    let mut anchors = Vec::with_capacity(items.len());
    let mut candidates = Vec::with_capacity(items.len());
    for &i in items {
        let item = &dataset.items[i];
        anchors.push(dataset.augment(item, space, rng)?);
        candidates.push(dataset.augment(item, space, rng)?);
    }
    Ok(Batch {
        anchors,
        candidates,
    })
}

/// `b` items drawn without replacement from `pool`, two views each.
pub fn build_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    pool: &[usize],
    space: &FeatureSpace,
    b: usize,
    rng: &mut R,
) -> Result<Batch> {
    if pool.len() < b {
        return Err(Error::DatasetTooSmall {
            needed: b,
            available: pool.len(),
        });
    }
    let chosen: Vec<usize> = index::sample(rng, pool.len(), b)
        .iter()
        .map(|k| pool[k])
        .collect();
    views_for(dataset, &chosen, space, rng)
}

fn encoder_input(kind: EncoderKind, views: &[View]) -> EncoderInput {
    match kind {
        EncoderKind::Mlp => EncoderInput::Features(feature_matrix(views)),
        EncoderKind::Table => EncoderInput::Indices(views.iter().map(|v| v.view_class).collect()),
    }
}

fn stacked_input(kind: EncoderKind, batch: &Batch) -> EncoderInput {
    let all: Vec<View> = batch
        .anchors
        .iter()
        .chain(&batch.candidates)
        .cloned()
        .collect();
    encoder_input(kind, &all)
}

pub fn init_encoder(cfg: &EncoderConfig, dataset: &Dataset, seed: u64) -> Result<Encoder> {
    Ok(match cfg.kind {
        EncoderKind::Mlp => Encoder::Mlp(MlpEncoder::new(
            dataset.feature_dim(),
            cfg.hidden,
            cfg.dim,
            seed,
        )?),
        EncoderKind::Table => Encoder::Table(EmbeddingTableEncoder::new(
            dataset.n_classes(),
            cfg.dim,
            seed,
        )?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss_value: f64,
    pub eval_loss: f64,
    #[serde(with = "matrix_rows")]
    pub measured_p: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub measured_p_sd: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub measured_p_sym: DMatrix<f64>,
    pub asymmetry: f64,
    pub missing_pairs: Vec<(usize, usize)>,
    #[serde(with = "matrix_rows")]
    pub class_sim: DMatrix<f64>,
    pub mean_similarity: f64,
    pub spectrum: Vec<f64>,
    pub mae_vs_predicted: f64,
}

impl MetricsRecord {
    /// Mean of the off-diagonal class similarities.
    pub fn inter_class_similarity(&self) -> f64 {
        off_diagonal_mean(&self.class_sim)
    }

    pub fn intra_class_similarity(&self) -> f64 {
        self.class_sim.diagonal().mean()
    }
}

fn off_diagonal_mean(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n < 2 {
        return f64::NAN;
    }
    (m.sum() - m.trace()) / (n * (n - 1)) as f64
}

pub(crate) mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        crate::metrics::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<Option<f64>>>::deserialize(d)?;
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
            .collect();
        Ok(crate::metrics::from_rows(&rows))
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: TrainConfig,
    pub records: Vec<MetricsRecord>,
    pub encoder: Encoder,
    pub duration_secs: f64,
}

/// Averages over the last 10% of checkpoints (at least one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSummary {
    pub checkpoints: usize,
    #[serde(with = "matrix_rows")]
    pub measured_p_sym: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub class_sim: DMatrix<f64>,
    pub mean_similarity: f64,
    pub inter_class_similarity: f64,
    pub intra_class_similarity: f64,
    pub loss_value: f64,
}

pub fn final_window(records: &[MetricsRecord]) -> Result<FinalSummary> {
    if records.is_empty() {
        return Err(Error::NoData);
    }
    let k = records.len().div_ceil(10).max(1);
    let tail = &records[records.len() - k..];
    let kf = k as f64;
    let m = tail[0].measured_p_sym.nrows();
    let mut p = DMatrix::zeros(m, m);
    let mut s = DMatrix::zeros(m, m);
    for r in tail {
        p += &r.measured_p_sym;
        s += &r.class_sim;
    }
    p /= kf;
    s /= kf;
    let mean_of = |f: &dyn Fn(&MetricsRecord) -> f64| tail.iter().map(f).sum::<f64>() / kf;
    Ok(FinalSummary {
        checkpoints: k,
        inter_class_similarity: off_diagonal_mean(&s),
        intra_class_similarity: s.diagonal().mean(),
        measured_p_sym: p,
        class_sim: s,
        mean_similarity: mean_of(&|r| r.mean_similarity),
        loss_value: mean_of(&|r| r.loss_value),
    })
}

impl RunResult {
    pub fn final_summary(&self) -> Result<FinalSummary> {
        final_window(&self.records)
    }
}

struct EvalSet {
    batches: Vec<Batch>,
    predicted: DMatrix<f64>,
}

fn checkpoint(
    encoder: &Encoder,
    cfg: &TrainConfig,
    eval: &EvalSet,
    m: usize,
    epoch: usize,
    loss_value: f64,
) -> Result<MetricsRecord> {
    let mut blocks = Vec::with_capacity(eval.batches.len());
    let mut eval_loss = 0.0;
    let mut all_emb: Vec<DMatrix<f64>> = Vec::new();
    let mut all_labels = Vec::new();
    for batch in &eval.batches {
        let b = batch.len();
        let out = encoder.forward(&stacked_input(cfg.encoder.kind, batch))?;
        let anchors = out.rows(0, b).into_owned();
        let cands = out.rows(b, b).into_owned();
        let block = cosine_block(&anchors, &cands)?;
        eval_loss += evaluate(&block, &cfg.loss)?.value;
        all_labels.extend(batch.anchor_classes());
        all_labels.extend(batch.candidate_classes());
        all_emb.push(out);
        blocks.push(LabeledBlock {
            block,
            anchor_classes: batch.anchor_classes(),
            candidate_classes: batch.candidate_classes(),
        });
    }
    eval_loss /= eval.batches.len() as f64;
    let rows: usize = all_emb.iter().map(|e| e.nrows()).sum();
    let mut emb = DMatrix::zeros(rows, encoder.dim());
    let mut at = 0;
    for e in &all_emb {
        emb.rows_mut(at, e.nrows()).copy_from(e);
        at += e.nrows();
    }
    let p = metrics::measure_p(&blocks, m, cfg.loss.tau)?;
    let cs = metrics::class_similarity(&emb, &all_labels, m)?;
    let spectrum = if emb.nrows() > emb.ncols() {
        metrics::covariance_spectrum(&emb)?
    } else {
        Vec::new()
    };
    Ok(MetricsRecord {
        epoch,
        loss_value,
        eval_loss,
        mae_vs_predicted: metrics::mae(&p.mean, &eval.predicted)?,
        measured_p: p.mean,
        measured_p_sd: p.sd,
        measured_p_sym: p.symmetrized,
        asymmetry: p.asymmetry,
        missing_pairs: p.missing,
        class_sim: cs.matrix,
        mean_similarity: metrics::mean_pairwise_similarity(&emb)?,
        spectrum,
    })
}

fn step_encoder(
    encoder: &mut Encoder,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    batch: &Batch,
) -> Result<f64> {
    let b = batch.len();
    let pass = encoder.forward_cached(&stacked_input(cfg.encoder.kind, batch))?;
    let anchors = pass.output.rows(0, b).into_owned();
    let cands = pass.output.rows(b, b).into_owned();
    let block = cosine_block(&anchors, &cands)?;
    let loss = evaluate(&block, &cfg.loss)?;
    if !loss.value.is_finite() {
        return Ok(loss.value);
    }
    let (ga, gc) = block.backward(&loss.grad_sims);
    let mut upstream = DMatrix::zeros(2 * b, encoder.dim());
    upstream.rows_mut(0, b).copy_from(&ga);
    upstream.rows_mut(b, b).copy_from(&gc);
    let grads = encoder.backward(&pass, &upstream)?;
    opt.step_encoder(encoder, &grads)?;
    Ok(loss.value)
}

/// Trains from scratch on the dataset's train split and checkpoints on
/// held-out batches drawn once from the test split.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, space: &FeatureSpace) -> Result<RunResult> {
    cfg.validate()?;
    let m = dataset.n_classes();
    if space.size() != m {
        return Err(Error::DimensionMismatch {
            context: "feature space size vs dataset classes",
            expected: m,
            found: space.size(),
        });
    }
    let b = cfg.batch_size;
    if dataset.train.len() < b {
        return Err(Error::DatasetTooSmall {
            needed: b,
            available: dataset.train.len(),
        });
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = init_encoder(&cfg.encoder, dataset, rng.next_u64())?;
    let mut opt = OptimizerState::new(cfg.optimizer.kind, cfg.optimizer.lr)?;

    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_STREAM);
    let eval = EvalSet {
        batches: (0..cfg.eval_batches)
            .map(|_| build_batch(dataset, &dataset.test, space, b, &mut eval_rng))
            .collect::<Result<_>>()?,
        predicted: predict_target(space, b)?.target,
    };

    let mut pool = dataset.train.clone();
    let n_batches = pool.len() / b;
    let mut records = Vec::new();
    for epoch in 1..=cfg.epochs {
        pool.shuffle(&mut rng);
        let mut total = 0.0;
        for (k, chunk) in pool.chunks_exact(b).enumerate() {
            let batch = views_for(dataset, chunk, space, &mut rng)?;
            let value = step_encoder(&mut encoder, &mut opt, cfg, &batch)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: k,
                    loss: cfg.loss.kind.name().to_string(),
                    value,
                });
            }
            total += value;
        }
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            let rec = checkpoint(&encoder, cfg, &eval, m, epoch, total / n_batches as f64)?;
            log::debug!(
                "seed {} epoch {epoch}: loss {:.6} mae {:.3e}",
                cfg.seed,
                rec.loss_value,
                rec.mae_vs_predicted
            );
            records.push(rec);
        }
    }
    Ok(RunResult {
        config: cfg.clone(),
        records,
        encoder,
        duration_secs: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Delta,
    Gamma,
    Tau,
    BatchSize,
    Lr,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::Delta,
        SweepAxis::Gamma,
        SweepAxis::Tau,
        SweepAxis::BatchSize,
        SweepAxis::Lr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Delta => "delta",
            SweepAxis::Gamma => "gamma",
            SweepAxis::Tau => "tau",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Lr => "lr",
        }
    }

    /// Config for one sweep point. Gamma values are per-negative totals and
    /// are divided by `B - 1`.
    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Delta => cfg.loss.delta = value,
            SweepAxis::Gamma => cfg.loss.gamma = value / (cfg.batch_size.max(2) - 1) as f64,
            SweepAxis::Tau => cfg.loss.tau = value,
            SweepAxis::Lr => cfg.optimizer.lr = value,
            SweepAxis::BatchSize => {
                if !(value >= 2.0 && value.fract() == 0.0 && value <= usize::MAX as f64) {
                    return Err(Error::InvalidArgument {
                        name: "batch_size",
                        reason: format!("sweep value must be an integer ≥ 2, got {value}"),
                    });
                }
                cfg.batch_size = value as usize;
            }
        }
        if matches!(self, SweepAxis::Delta | SweepAxis::Gamma)
            && cfg.loss.kind == LossKind::ScInfoNce
        {
            cfg.loss.lambda = 0.0;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownAxis(s.to_string()))
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Seed for repeat `r`; identical across sweep values so runs are paired.
pub fn repeat_seed(base: u64, repeat: usize) -> u64 {
    if repeat == 0 {
        return base;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(repeat as u64);
    rng.next_u64()
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub axis: SweepAxis,
    pub value: f64,
    pub repeat: usize,
    pub result: RunResult,
}

/// One run per `(value, repeat)`, executed on up to `jobs` threads and
/// returned sorted by value then repeat.
pub fn sweep(
    base: &TrainConfig,
    dataset: &Dataset,
    space: &FeatureSpace,
    axis: SweepAxis,
    values: &[f64],
    repeats: usize,
    jobs: usize,
) -> Result<Vec<SweepRun>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument {
            name: "values",
            reason: "sweep needs at least one value".into(),
        });
    }
    if repeats == 0 {
        return Err(Error::InvalidArgument {
            name: "repeats",
            reason: "repeats must be ≥ 1".into(),
        });
    }
    let mut points = Vec::new();
    for &v in values {
        let cfg = axis.apply(base, v)?;
        for r in 0..repeats {
            let mut c = cfg.clone();
            c.seed = repeat_seed(base.seed, r);
            points.push((v, r, c));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut runs: Vec<SweepRun> = pool.install(|| {
        points
            .into_par_iter()
            .map(|(value, repeat, cfg)| {
                train(&cfg, dataset, space).map(|result| SweepRun {
                    axis,
                    value,
                    repeat,
                    result,
                })
            })
            .collect::<Result<_>>()
    })?;
    runs.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.repeat.cmp(&b.repeat)));
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SyntheticDatasetConfig};
    use crate::tpm::{reference_tpm, TransitionMatrix};

    fn small_data(n: usize) -> Dataset {
        generate(&SyntheticDatasetConfig {
            n_items: n,
            ..Default::default()
        })
        .unwrap()
    }

    fn quick(b: usize, epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: b,
            epochs,
            checkpoint_every: 1,
            eval_batches: 1,
            ..Default::default()
        }
    }

    #[test]
    fn smallest_batch_has_one_negative() {
        let ds = small_data(30);
        let space = FeatureSpace::uniform(reference_tpm());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = build_batch(&ds, &ds.train, &space, 2, &mut rng).unwrap();
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.anchors[0].parent_id, batch.candidates[0].parent_id);
        assert_ne!(batch.anchors[0].parent_id, batch.anchors[1].parent_id);
    }

    #[test]
    fn identity_tpm_pairs_share_class() {
        let ds = small_data(60);
        let space = FeatureSpace::uniform(TransitionMatrix::identity(3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = build_batch(&ds, &ds.train, &space, 20, &mut rng).unwrap();
        assert_eq!(batch.anchor_classes(), batch.candidate_classes());
    }

    #[test]
    fn oversized_batch_rejected() {
        let ds = small_data(30);
        let space = FeatureSpace::uniform(reference_tpm());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            build_batch(&ds, &ds.train, &space, 16, &mut rng),
            Err(Error::DatasetTooSmall {
                needed: 16,
                available: 15
            })
        ));
    }

    #[test]
    fn one_epoch_one_record() {
        let ds = small_data(200);
        let space = FeatureSpace::uniform(reference_tpm());
        let run = train(&quick(20, 1), &ds, &space).unwrap();
        assert_eq!(run.records.len(), 1);
        assert_eq!(run.records[0].epoch, 1);
    }

    #[test]
    fn final_epoch_always_recorded() {
        let ds = small_data(200);
        let space = FeatureSpace::uniform(reference_tpm());
        let mut cfg = quick(20, 7);
        cfg.checkpoint_every = 5;
        let epochs: Vec<usize> = train(&cfg, &ds, &space)
            .unwrap()
            .records
            .iter()
            .map(|r| r.epoch)
            .collect();
        assert_eq!(epochs, vec![5, 7]);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let ds = small_data(200);
        let space = FeatureSpace::uniform(reference_tpm());
        let mut cfg = quick(20, 3);
        cfg.optimizer.lr = 0.0;
        let run = train(&cfg, &ds, &space).unwrap();
        let init = init_encoder(
            &cfg.encoder,
            &ds,
            ChaCha8Rng::seed_from_u64(cfg.seed).next_u64(),
        )
        .unwrap();
        assert_eq!(run.encoder, init);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_data(200);
        let space = FeatureSpace::uniform(reference_tpm());
        let cfg = quick(20, 3);
        let a = train(&cfg, &ds, &space).unwrap();
        let b = train(&cfg, &ds, &space).unwrap();
        assert_eq!(a.encoder, b.encoder);
        let ja = serde_json::to_string(&a.records).unwrap();
        let jb = serde_json::to_string(&b.records).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn table_encoder_trains() {
        let ds = small_data(200);
        let space = FeatureSpace::uniform(reference_tpm());
        let mut cfg = quick(20, 2);
        cfg.encoder.kind = EncoderKind::Table;
        let run = train(&cfg, &ds, &space).unwrap();
        assert_eq!(run.records.len(), 2);
    }

    #[test]
    fn axis_parsing() {
        assert_eq!(
            "batch_size".parse::<SweepAxis>().unwrap(),
            SweepAxis::BatchSize
        );
        assert!(matches!(
            "beta".parse::<SweepAxis>(),
            Err(Error::UnknownAxis(_))
        ));
    }

    #[test]
    fn gamma_axis_is_normalized() {
        let base = TrainConfig {
            loss: LossConfig::sc_infonce(1.0, 1.0, 0.0),
            ..TrainConfig::default()
        };
        let cfg = SweepAxis::Gamma.apply(&base, 2.0).unwrap();
        assert_eq!(cfg.loss.gamma, 2.0 / 999.0);
        assert_eq!(cfg.loss.lambda, 0.0);
    }

    #[test]
    fn singleton_sweep() {
        let ds = small_data(200);
        let space = FeatureSpace::uniform(reference_tpm());
        let mut base = quick(20, 1);
        base.loss = LossConfig::sc_infonce(1.0, 1.0, 0.0);
        let runs = sweep(&base, &ds, &space, SweepAxis::Delta, &[0.5], 1, 1).unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].result.config.loss.delta, 0.5);
        assert_eq!(runs[0].result.config.seed, base.seed);
    }

    #[test]
    fn sweep_sorted_and_paired() {
        let ds = small_data(200);
        let space = FeatureSpace::uniform(reference_tpm());
        let base = quick(20, 1);
        let runs = sweep(&base, &ds, &space, SweepAxis::Tau, &[5.0, 0.5], 2, 2).unwrap();
        let keys: Vec<(f64, usize)> = runs.iter().map(|r| (r.value, r.repeat)).collect();
        assert_eq!(keys, vec![(0.5, 0), (0.5, 1), (5.0, 0), (5.0, 1)]);
        assert_eq!(runs[1].result.config.seed, runs[3].result.config.seed);
        assert_ne!(runs[0].result.config.seed, runs[1].result.config.seed);
        assert!(sweep(&base, &ds, &space, SweepAxis::Tau, &[1.0], 0, 1).is_err());
    }

    #[test]
    fn final_window_uses_last_tenth() {
        let ds = small_data(200);
        let space = FeatureSpace::uniform(reference_tpm());
        let run = train(&quick(20, 20), &ds, &space).unwrap();
        let s = run.final_summary().unwrap();
        assert_eq!(s.checkpoints, 2);
        let tail = &run.records[18..];
        let expect = (tail[0].mean_similarity + tail[1].mean_similarity) / 2.0;
        assert!((s.mean_similarity - expect).abs() < 1e-15);
    }
}
