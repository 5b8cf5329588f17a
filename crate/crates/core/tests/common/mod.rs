//! Central finite differences through encoder, normalization, cosine
//! similarity and loss.

#![allow(dead_code)]

use ccl_core::encoder::{Encoder, EncoderInput, MlpEncoder};
use ccl_core::losses::{
    cosine_block, loss_from_sims, sc_alpha, sc_infonce_with_alpha, LossConfig, LossKind,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const STEP: f64 = 1e-5;
/// Pre-activations closer than this to zero are rejected so that a step of
/// `STEP` never crosses a ReLU kink.
pub const KINK_MARGIN: f64 = 1e-3;

pub struct Instance {
    pub encoder: Encoder,
    pub anchors: DMatrix<f64>,
    pub candidates: DMatrix<f64>,
    pub loss: LossConfig,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn min_abs_pre_activation(m: &MlpEncoder, x: &DMatrix<f64>) -> f64 {
    let mut pre = x * &m.w1;
    for mut row in pre.row_iter_mut() {
        row += &m.b1;
    }
    pre.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()))
}

pub fn loss_config(kind: LossKind, rng: &mut ChaCha8Rng) -> LossConfig {
    let mut cfg = LossConfig::new(kind);
    cfg.tau = rng.random_range(0.2..2.0);
    match kind {
        LossKind::Scl => cfg.lambda = rng.random_range(0.0..2.0),
        LossKind::ScInfoNce => {
            cfg.lambda = 0.0;
            cfg.delta = rng.random_range(0.0..3.0);
            cfg.gamma = rng.random_range(0.0..0.1);
        }
        _ => {}
    }
    cfg
}

/// Random MLP instance with inputs away from every ReLU kink.
pub fn instance(kind: LossKind, b: usize, d: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss = loss_config(kind, &mut rng);
    let input_dim = 6;
    let hidden = 8;
    loop {
        let mut mlp = MlpEncoder::new(input_dim, hidden, d, rng.random()).unwrap();
        mlp.b1 = DMatrix::from_fn(1, hidden, |_, _| 0.1 * normal(&mut rng));
        mlp.b2 = DMatrix::from_fn(1, d, |_, _| 0.1 * normal(&mut rng));
        let anchors = DMatrix::from_fn(b, input_dim, |_, _| normal(&mut rng));
        let candidates = DMatrix::from_fn(b, input_dim, |_, _| normal(&mut rng));
        if min_abs_pre_activation(&mlp, &anchors) > KINK_MARGIN
            && min_abs_pre_activation(&mlp, &candidates) > KINK_MARGIN
        {
            return Instance {
                encoder: Encoder::Mlp(mlp),
                anchors,
                candidates,
                loss,
            };
        }
    }
}

fn stacked(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(a.nrows() + c.nrows(), a.ncols());
    x.rows_mut(0, a.nrows()).copy_from(a);
    x.rows_mut(a.nrows(), c.nrows()).copy_from(c);
    x
}

/// Loss at the encoder's current parameters. SC-InfoNCE uses `alpha` as a
/// constant when given.
fn value(enc: &Encoder, inst: &Instance, alpha: Option<&[f64]>) -> f64 {
    let b = inst.anchors.nrows();
    let out = enc
        .forward(&EncoderInput::Features(stacked(
            &inst.anchors,
            &inst.candidates,
        )))
        .unwrap();
    let block = cosine_block(&out.rows(0, b).into_owned(), &out.rows(b, b).into_owned()).unwrap();
    match alpha {
        Some(a) => {
            sc_infonce_with_alpha(block.sims(), inst.loss.tau, inst.loss.gamma, a)
                .unwrap()
                .value
        }
        None => loss_from_sims(block.sims(), &inst.loss).unwrap().value,
    }
}

/// Analytic and finite-difference gradients over all parameters, flattened.
pub fn gradients(inst: &Instance) -> (Vec<f64>, Vec<f64>) {
    let b = inst.anchors.nrows();
    let input = EncoderInput::Features(stacked(&inst.anchors, &inst.candidates));
    let pass = inst.encoder.forward_cached(&input).unwrap();
    let block = cosine_block(
        &pass.output.rows(0, b).into_owned(),
        &pass.output.rows(b, b).into_owned(),
    )
    .unwrap();
    let out = loss_from_sims(block.sims(), &inst.loss).unwrap();
    let (ga, gc) = block.backward(&out.grad_sims);
    let upstream = stacked(&ga, &gc);
    let analytic: Vec<f64> = inst
        .encoder
        .backward(&pass, &upstream)
        .unwrap()
        .iter()
        .flat_map(|g| g.iter().copied().collect::<Vec<_>>())
        .collect();

    // alpha carries no gradient, so it stays frozen at the unperturbed value
    let alpha = (inst.loss.kind == LossKind::ScInfoNce).then(|| sc_alpha(block.sims(), &inst.loss));
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut enc = inst.encoder.clone();
    let n_params = enc.params().len();
    for p in 0..n_params {
        let len = enc.params()[p].len();
        for k in 0..len {
            let orig = enc.params()[p][k];
            enc.params_mut()[p][k] = orig + STEP;
            let up = value(&enc, inst, alpha.as_deref());
            enc.params_mut()[p][k] = orig - STEP;
            let down = value(&enc, inst, alpha.as_deref());
            enc.params_mut()[p][k] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    (analytic, numeric)
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub const BATCH_SIZES: [usize; 3] = [2, 8, 32];
pub const DIMS: [usize; 2] = [4, 16];
pub const INSTANCES: usize = 50;

/// Worst relative error over the instance grid for one loss.
pub fn worst_error(kind: LossKind, instances: usize) -> f64 {
    (0..instances)
        .map(|t| {
            let b = BATCH_SIZES[t % BATCH_SIZES.len()];
            let d = DIMS[(t / BATCH_SIZES.len()) % DIMS.len()];
            let inst = instance(kind, b, d, 1_000 * kind as u64 + t as u64);
            let (a, n) = gradients(&inst);
            relative_error(&a, &n)
        })
        .fold(0.0, f64::max)
}
