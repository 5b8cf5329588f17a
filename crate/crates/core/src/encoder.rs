//! Tiny trainable encoders and first-order optimizers.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderInput {
    /// One row per example.
    Features(DMatrix<f64>),
    /// Row indices into an embedding table.
    Indices(Vec<usize>),
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        match self {
            EncoderInput::Features(x) => x.nrows(),
            EncoderInput::Indices(ix) => ix.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Learnable vector per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTableEncoder {
    pub table: DMatrix<f64>,
}

impl EmbeddingTableEncoder {
    /// Entries drawn uniformly from `(-0.1, 0.1)`.
    pub fn new(instances: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument {
                name: "dim",
                reason: format!("embedding dimension must be at least 2, got {dim}"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = DMatrix::from_fn(instances, dim, |_, _| rng.random_range(-0.1..0.1));
        Ok(Self { table })
    }
}

/// `relu(x W1 + b1) W2 + b2`, rows are examples.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    pub w1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
}

impl MlpEncoder {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new(input_dim: usize, hidden: usize, dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || dim < 2 {
            return Err(Error::InvalidArgument {
                name: "mlp shape",
                reason: format!(
                    "need input_dim >= 1, hidden >= 1, dim >= 2 (got {input_dim}, {hidden}, {dim})"
                ),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r1 = 1.0 / (input_dim as f64).sqrt();
        let w1 = DMatrix::from_fn(input_dim, hidden, |_, _| rng.random_range(-r1..r1));
        let r2 = 1.0 / (hidden as f64).sqrt();
        let w2 = DMatrix::from_fn(hidden, dim, |_, _| rng.random_range(-r2..r2));
        Ok(Self {
            w1,
            b1: DMatrix::zeros(1, hidden),
            w2,
            b2: DMatrix::zeros(1, dim),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    fn pre_activation(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut pre = x * &self.w1;
        for mut row in pre.row_iter_mut() {
            row += &self.b1;
        }
        pre
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Table(EmbeddingTableEncoder),
    Mlp(MlpEncoder),
}

/// Intermediate values kept for [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: DMatrix<f64>,
    input: EncoderInput,
    hidden_pre: Option<DMatrix<f64>>,
    hidden: Option<DMatrix<f64>>,
}

impl Encoder {
    pub fn dim(&self) -> usize {
        match self {
            Encoder::Table(t) => t.table.ncols(),
            Encoder::Mlp(m) => m.w2.ncols(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Encoder::Table(_) => "table",
            Encoder::Mlp(_) => "mlp",
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Encoder::Table(_) => &["table"],
            Encoder::Mlp(_) => &["w1", "b1", "w2", "b2"],
        }
    }

    pub fn params(&self) -> Vec<&DMatrix<f64>> {
        match self {
            Encoder::Table(t) => vec![&t.table],
            Encoder::Mlp(m) => vec![&m.w1, &m.b1, &m.w2, &m.b2],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        match self {
            Encoder::Table(t) => vec![&mut t.table],
            Encoder::Mlp(m) => vec![&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2],
        }
    }

    pub fn forward(&self, input: &EncoderInput) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(input)?.output)
    }

    pub fn forward_cached(&self, input: &EncoderInput) -> Result<ForwardPass> {
        match (self, input) {
            (Encoder::Table(t), EncoderInput::Indices(ix)) => {
                let n = t.table.nrows();
                if let Some(&bad) = ix.iter().find(|&&i| i >= n) {
                    return Err(Error::InvalidArgument {
                        name: "indices",
                        reason: format!("index {bad} out of range for a table of {n} rows"),
                    });
                }
                let output =
                    DMatrix::from_fn(ix.len(), t.table.ncols(), |r, c| t.table[(ix[r], c)]);
                Ok(ForwardPass {
                    output,
                    input: input.clone(),
                    hidden_pre: None,
                    hidden: None,
                })
            }
            (Encoder::Mlp(m), EncoderInput::Features(x)) => {
                if x.ncols() != m.input_dim() {
                    return Err(Error::DimensionMismatch {
                        context: "mlp input width",
                        expected: m.input_dim(),
                        found: x.ncols(),
                    });
                }
                let pre = m.pre_activation(x);
                let hidden = pre.map(|v| v.max(0.0));
                let mut output = &hidden * &m.w2;
                for mut row in output.row_iter_mut() {
                    row += &m.b2;
                }
                Ok(ForwardPass {
                    output,
                    input: input.clone(),
                    hidden_pre: Some(pre),
                    hidden: Some(hidden),
                })
            }
            (Encoder::Table(_), EncoderInput::Features(_)) => Err(Error::InvalidArgument {
                name: "input",
                reason: "embedding table expects indices".into(),
            }),
            (Encoder::Mlp(_), EncoderInput::Indices(_)) => Err(Error::InvalidArgument {
                name: "input",
                reason: "mlp expects feature rows".into(),
            }),
        }
    }

    /// Parameter gradients for `upstream = dL/doutput`, in [`Encoder::params`] order.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        upstream: &DMatrix<f64>,
    ) -> Result<Vec<DMatrix<f64>>> {
        if upstream.shape() != pass.output.shape() {
            return Err(Error::DimensionMismatch {
                context: "upstream gradient rows",
                expected: pass.output.nrows(),
                found: upstream.nrows(),
            });
        }
        match (self, &pass.input) {
            (Encoder::Table(t), EncoderInput::Indices(ix)) => {
                let mut g = DMatrix::zeros(t.table.nrows(), t.table.ncols());
                for (r, &i) in ix.iter().enumerate() {
                    let mut row = g.row_mut(i);
                    row += upstream.row(r);
                }
                Ok(vec![g])
            }
            (Encoder::Mlp(m), EncoderInput::Features(x)) => {
                let hidden = pass.hidden.as_ref().expect("mlp pass keeps activations");
                let pre = pass
                    .hidden_pre
                    .as_ref()
                    .expect("mlp pass keeps activations");
                let gw2 = hidden.transpose() * upstream;
                let gb2 = column_sums(upstream);
                let mut gh = upstream * m.w2.transpose();
                gh.zip_apply(pre, |g, p| {
                    if p <= 0.0 {
                        *g = 0.0
                    }
                });
                let gw1 = x.transpose() * &gh;
                let gb1 = column_sums(&gh);
                Ok(vec![gw1, gb1, gw2, gb2])
            }
            _ => Err(Error::InvalidArgument {
                name: "pass",
                reason: "forward pass was produced by a different encoder kind".into(),
            }),
        }
    }
}

fn column_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, c| m.column(c).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<DMatrix<f64>>,
    second: Vec<DMatrix<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument {
                name: "lr",
                reason: format!("learning rate must be finite and nonnegative, got {lr}"),
            });
        }
        Ok(Self {
            kind,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients are checked before anything is modified.
    pub fn step(
        &mut self,
        names: &[&str],
        params: &mut [&mut DMatrix<f64>],
        grads: &[DMatrix<f64>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::DimensionMismatch {
                context: "gradient count",
                expected: params.len(),
                found: grads.len(),
            });
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(k).copied().unwrap_or("?");
            if p.shape() != g.shape() {
                return Err(Error::InvalidArgument {
                    name: "grads",
                    reason: format!(
                        "gradient for `{name}` has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    ),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: name.to_string(),
                });
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    **p -= g * self.lr;
                }
            }
            OptimizerKind::Adam => {
                if self.first.is_empty() {
                    self.first = grads
                        .iter()
                        .map(|g| DMatrix::zeros(g.nrows(), g.ncols()))
                        .collect();
                    self.second = self.first.clone();
                }
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut().zip(self.second.iter_mut()))
                {
                    for idx in 0..g.len() {
                        let gi = g[idx];
                        m[idx] = b1 * m[idx] + (1.0 - b1) * gi;
                        v[idx] = b2 * v[idx] + (1.0 - b2) * gi * gi;
                        let m_hat = m[idx] / bc1;
                        let v_hat = v[idx] / bc2;
                        p[idx] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn step_encoder(&mut self, encoder: &mut Encoder, grads: &[DMatrix<f64>]) -> Result<()> {
        let names = encoder.param_names();
        let mut params = encoder.params_mut();
        self.step(names, &mut params, grads)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub kind: String,
    pub params: Vec<ParamShape>,
}

/// Writes `<stem>.json` (shapes) and `<stem>.csv` (`param,row,col,value`).
pub fn write_snapshot(encoder: &Encoder, dir: &Path, stem: &str) -> Result<()> {
    let header = SnapshotHeader {
        kind: encoder.kind_name().to_string(),
        params: encoder
            .param_names()
            .iter()
            .zip(encoder.params())
            .map(|(n, p)| ParamShape {
                name: n.to_string(),
                rows: p.nrows(),
                cols: p.ncols(),
            })
            .collect(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&header)?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["param", "row", "col", "value"])?;
    for (name, p) in encoder.param_names().iter().zip(encoder.params()) {
        for r in 0..p.nrows() {
            for c in 0..p.ncols() {
                w.write_record([
                    name.to_string(),
                    r.to_string(),
                    c.to_string(),
                    p[(r, c)].to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

pub fn read_snapshot(dir: &Path, stem: &str) -> Result<Encoder> {
    let json_path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: SnapshotHeader = serde_json::from_str(&text)?;
    let mut mats: Vec<DMatrix<f64>> = header
        .params
        .iter()
        .map(|s| DMatrix::zeros(s.rows, s.cols))
        .collect();
    let mut rdr = csv::Reader::from_path(dir.join(format!("{stem}.csv")))?;
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |what: &str| Error::Config(format!("snapshot csv: bad {what} in {:?}", rec));
        let k = header
            .params
            .iter()
            .position(|s| s.name == rec[0])
            .ok_or_else(|| bad("param"))?;
        let r: usize = rec[1].parse().map_err(|_| bad("row"))?;
        let c: usize = rec[2].parse().map_err(|_| bad("col"))?;
        let v: f64 = rec[3].parse().map_err(|_| bad("value"))?;
        if r >= mats[k].nrows() || c >= mats[k].ncols() {
            return Err(bad("index"));
        }
        mats[k][(r, c)] = v;
    }
    match header.kind.as_str() {
        "table" if mats.len() == 1 => Ok(Encoder::Table(EmbeddingTableEncoder {
            table: mats.remove(0),
        })),
        "mlp" if mats.len() == 4 => {
            let mut it = mats.into_iter();
            Ok(Encoder::Mlp(MlpEncoder {
                w1: it.next().unwrap(),
                b1: it.next().unwrap(),
                w2: it.next().unwrap(),
                b2: it.next().unwrap(),
            }))
        }
        other => Err(Error::Config(format!(
            "snapshot: unknown encoder kind `{other}`"
        ))),
    }
}
