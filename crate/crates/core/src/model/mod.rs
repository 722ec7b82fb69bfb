//! SASRec-style causal transformer over item sequences.
//!
//! Item embeddings are tied to the output layer: the logits at position `j`
//! are the final hidden state dotted with every catalogue embedding. Row 0
//! of the embedding table is padding and never receives gradient.

pub mod tape;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{PaddedInput, PAD};
use crate::error::{Error, Result};
use crate::objectives::Aggregate;
use crate::rng::{stream_rng, Stream};
pub use tape::{AttentionShape, Matrix, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// |I|, excluding the padding row.
    pub catalogue_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Best backbone reported for Retailrocket views.
    pub fn retailrocket(catalogue_size: usize) -> Self {
        ModelConfig { embed_dim: 256, ff_dim: 256, num_blocks: 3, num_heads: 1, dropout: 0.2, max_len: 200, catalogue_size, seed: 0 }
    }

    /// Best backbone reported for MovieLens-1M.
    pub fn ml1m(catalogue_size: usize) -> Self {
        ModelConfig { dropout: 0.5, ..Self::retailrocket(catalogue_size) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.embed_dim == 0 || self.ff_dim == 0 || self.num_blocks == 0 || self.num_heads == 0 {
            return bad("dimensions, blocks and heads must be >= 1");
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad("embed_dim must be divisible by num_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.max_len == 0 || self.catalogue_size == 0 {
            return bad("max_len and catalogue_size must be >= 1");
        }
        Ok(())
    }
}

/// Per-user loss denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Denominator {
    /// Number of non-padding targets.
    #[default]
    #[serde(rename = "valid")]
    Valid,
    /// The padded length `L`.
    #[serde(rename = "L", alias = "l")]
    MaxLen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
}

const PER_BLOCK: usize = 16;
const ITEM_EMB: usize = 0;
const POS_EMB: usize = 1;

#[derive(Clone, Copy)]
struct BlockIdx(usize);

impl BlockIdx {
    fn at(self, offset: usize) -> usize {
        2 + self.0 * PER_BLOCK + offset
    }
}

const BLOCK_PARAMS: [&str; PER_BLOCK] = [
    "attn_ln.gamma",
    "attn_ln.beta",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ffn_ln.gamma",
    "ffn_ln.beta",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    /// Epoch counter carried into checkpoints.
    pub epoch: usize,
}

fn apply_dropout(tape: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>, rate: f64) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let n = tape.value(x).data.len();
            let keep = 1.0 / (1.0 - rate);
            let mask = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
            tape.mul_const(x, mask)
        }
        _ => x,
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

fn truncated_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).unwrap();
    let data = (0..rows * cols)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Per-user training losses for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLosses {
    pub users: Vec<u32>,
    /// Target item per position, `PAD` where masked.
    pub targets: Vec<Vec<u32>>,
    /// `l_{u,j}`, zero at masked positions.
    pub per_position: Vec<Vec<f64>>,
    pub per_user: Vec<f64>,
    pub valid_counts: Vec<usize>,
    pub normalizers: Vec<f64>,
}

impl BatchLosses {
    pub fn new(users: Vec<u32>, targets: Vec<Vec<u32>>, per_position: Vec<Vec<f64>>, denominator: Denominator) -> Self {
        let mut per_user = Vec::with_capacity(users.len());
        let mut valid_counts = Vec::with_capacity(users.len());
        let mut normalizers = Vec::with_capacity(users.len());
        for (t, l) in targets.iter().zip(&per_position) {
            let valid = t.iter().filter(|x| **x != PAD).count();
            let norm = match denominator {
                Denominator::Valid => valid.max(1) as f64,
                Denominator::MaxLen => t.len().max(1) as f64,
            };
            let sum: f64 = l.iter().zip(t).filter(|(_, t)| **t != PAD).map(|(l, _)| *l).sum();
            per_user.push(if valid == 0 { 0.0 } else { sum / norm });
            valid_counts.push(valid);
            normalizers.push(norm);
        }
        BatchLosses { users, targets, per_position, per_user, valid_counts, normalizers }
    }

    /// One position per user with the given losses; handy for aggregator tests.
    pub fn from_user_losses(losses: &[f64]) -> Self {
        let n = losses.len();
        BatchLosses::new(
            (0..n as u32).collect(),
            vec![vec![1]; n],
            losses.iter().map(|l| vec![*l]).collect(),
            Denominator::Valid,
        )
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Users with no valid target (loss defined as zero).
    pub fn empty_users(&self) -> Vec<u32> {
        self.users.iter().zip(&self.valid_counts).filter(|(_, c)| **c == 0).map(|(u, _)| *u).collect()
    }

    /// Spreads per-user gradient weights over that user's valid positions.
    pub fn spread_user_weights(&self, user_weights: &[f64]) -> Vec<Vec<f64>> {
        self.targets
            .iter()
            .zip(user_weights.iter().zip(&self.normalizers))
            .map(|(t, (w, n))| t.iter().map(|x| if *x == PAD { 0.0 } else { w / n }).collect())
            .collect()
    }
}

/// A differentiable forward pass producing [`BatchLosses`].
pub struct LossGraph {
    tape: Tape,
    params: Vec<Var>,
    losses: Var,
    pub batch: BatchLosses,
}

impl LossGraph {
    /// Parameter gradients of `sum_{u,j} w_{u,j} * l_{u,j}`.
    pub fn backward(&self, position_weights: &[Vec<f64>]) -> Vec<Matrix> {
        let seed: Vec<f64> = position_weights.iter().flatten().copied().collect();
        let n = seed.len();
        self.tape.backward(self.losses, Matrix::from_vec(n, 1, seed), &self.params)
    }
}

impl ModelState {
    /// Seeded initialisation. Positional embeddings use a truncated normal
    /// (std 0.02), item embeddings a truncated normal with row 0 zeroed,
    /// projections Xavier normal, layer norms identity.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, Stream::Init);
        let d = config.embed_dim;
        let mut params = Vec::new();
        let mut item = truncated_normal(&mut rng, config.catalogue_size + 1, d, 0.02);
        item.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
        params.push(Param { name: "item_emb".into(), value: item });
        params.push(Param { name: "pos_emb".into(), value: truncated_normal(&mut rng, config.max_len, d, 0.02) });
        for b in 0..config.num_blocks {
            for name in BLOCK_PARAMS {
                let value = match name {
                    "attn_ln.gamma" | "ffn_ln.gamma" => Matrix::from_vec(1, d, vec![1.0; d]),
                    "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => xavier(&mut rng, d, d),
                    "ffn.w1" => xavier(&mut rng, d, config.ff_dim),
                    "ffn.w2" => xavier(&mut rng, config.ff_dim, d),
                    "ffn.b1" => Matrix::zeros(1, config.ff_dim),
                    _ => Matrix::zeros(1, d),
                };
                params.push(Param { name: format!("block{b}.{name}"), value });
            }
        }
        params.push(Param { name: "last_ln.gamma".into(), value: Matrix::from_vec(1, d, vec![1.0; d]) });
        params.push(Param { name: "last_ln.beta".into(), value: Matrix::zeros(1, d) });
        Ok(ModelState { config, params, epoch: 0 })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.data.iter().all(|v| v.is_finite()))
    }

    fn check_inputs(&self, inputs: &[PaddedInput]) -> Result<()> {
        let l = self.config.max_len;
        for inp in inputs {
            if inp.len() != l || inp.mask.len() != l {
                return Err(Error::Data(format!("input length {} does not match max_len {l}", inp.len())));
            }
            if let Some(t) = inp.tokens.iter().find(|t| **t as usize > self.config.catalogue_size) {
                return Err(Error::Data(format!("token {t} outside catalogue of {}", self.config.catalogue_size)));
            }
        }
        Ok(())
    }

    /// Builds the hidden states `(B*L) x d` on `tape`. Dropout is active iff `dropout_rng` is given.
    pub fn forward_hidden(
        &self,
        tape: &mut Tape,
        inputs: &[PaddedInput],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_inputs(inputs)?;
        let cfg = &self.config;
        let (b, l, d) = (inputs.len(), cfg.max_len, cfg.embed_dim);
        let rate = cfg.dropout;
        let p: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();

        let ids: Vec<u32> = inputs.iter().flat_map(|i| i.tokens.iter().copied()).collect();
        let valid: Vec<bool> = inputs.iter().flat_map(|i| i.mask.iter().copied()).collect();
        let row_mask: Vec<f64> = valid.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
        let positions: Vec<u32> = (0..b).flat_map(|_| 0..l as u32).collect();

        let emb = tape.gather(p[ITEM_EMB], ids, true);
        let emb = tape.scale(emb, (d as f64).sqrt());
        let pos = tape.gather(p[POS_EMB], positions, false);
        let mut x = tape.add(emb, pos);
        x = apply_dropout(tape, x, dropout_rng.as_deref_mut(), rate);
        x = tape.scale_rows(x, &row_mask);

        let shape = AttentionShape { batch: b, len: l, heads: cfg.num_heads };
        for blk in 0..cfg.num_blocks {
            let at = |o: usize| p[BlockIdx(blk).at(o)];
            let q_in = tape.layer_norm(x, at(0), at(1));
            let q = tape.linear(q_in, at(2), at(3));
            let k = tape.linear(x, at(4), at(5));
            let v = tape.linear(x, at(6), at(7));
            let attn = match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    tape.attention(q, k, v, shape, &valid, || Some(if rng.gen::<f64>() < rate { 0.0 } else { keep }))
                }
                _ => tape.attention(q, k, v, shape, &valid, || None),
            };
            let attn = tape.linear(attn, at(8), at(9));
            let h = tape.add(q_in, attn);
            let h = tape.layer_norm(h, at(10), at(11));
            let f = tape.linear(h, at(12), at(13));
            let f = apply_dropout(tape, f, dropout_rng.as_deref_mut(), rate);
            let f = tape.relu(f);
            let f = tape.linear(f, at(14), at(15));
            let f = apply_dropout(tape, f, dropout_rng.as_deref_mut(), rate);
            x = tape.add(f, h);
            x = tape.scale_rows(x, &row_mask);
        }
        let last = 2 + cfg.num_blocks * PER_BLOCK;
        let out = tape.layer_norm(x, p[last], p[last + 1]);
        Ok((out, p))
    }

    /// Full-catalogue logits per input, each `L x |I|` (column `c` scores item `c + 1`). Eval mode.
    pub fn logits(&self, inputs: &[PaddedInput]) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let (h, _) = self.forward_hidden(&mut tape, inputs, None)?;
        let hidden = tape.value(h);
        let table = &self.params[ITEM_EMB].value;
        let (l, n_items) = (self.config.max_len, self.config.catalogue_size);
        Ok((0..inputs.len())
            .map(|b| {
                let mut m = Matrix::zeros(l, n_items);
                for j in 0..l {
                    let hr = hidden.row(b * l + j);
                    for c in 0..n_items {
                        m.data[j * n_items + c] = hr.iter().zip(table.row(c + 1)).map(|(x, y)| x * y).sum();
                    }
                }
                m
            })
            .collect())
    }

    /// Next-item scores after the last position of each input. Slot 0
    /// (padding) is `-inf`; slot `i` scores item `i`.
    pub fn score_next(&self, inputs: &[PaddedInput]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let (h, _) = self.forward_hidden(&mut tape, inputs, None)?;
        let hidden = tape.value(h);
        let table = &self.params[ITEM_EMB].value;
        let l = self.config.max_len;
        Ok((0..inputs.len())
            .map(|b| {
                let hr = hidden.row(b * l + l - 1);
                let mut s = Vec::with_capacity(table.rows);
                s.push(f64::NEG_INFINITY);
                for c in 1..table.rows {
                    s.push(hr.iter().zip(table.row(c)).map(|(x, y)| x * y).sum());
                }
                s
            })
            .collect())
    }

    /// Forward pass with per-position cross entropy against `targets`.
    pub fn batch_losses(
        &self,
        users: &[u32],
        inputs: &[PaddedInput],
        targets: &[Vec<u32>],
        denominator: Denominator,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossGraph> {
        let l = self.config.max_len;
        if targets.len() != inputs.len() || users.len() != inputs.len() || targets.iter().any(|t| t.len() != l) {
            return Err(Error::Data("targets must align with inputs".into()));
        }
        if let Some(t) = targets.iter().flatten().find(|t| **t as usize > self.config.catalogue_size) {
            return Err(Error::Data(format!("target {t} outside catalogue")));
        }
        let mut tape = Tape::new();
        let (h, params) = self.forward_hidden(&mut tape, inputs, dropout_rng)?;
        let flat: Vec<u32> = targets.iter().flatten().copied().collect();
        let losses = tape.tied_cross_entropy(h, params[ITEM_EMB], flat);
        let per_position: Vec<Vec<f64>> = tape.value(losses).data.chunks(l).map(<[f64]>::to_vec).collect();
        let batch = BatchLosses::new(users.to_vec(), targets.to_vec(), per_position, denominator);
        Ok(LossGraph { tape, params, losses, batch })
    }

    /// Writes a self-describing checkpoint: magic, JSON header, raw little-endian f64 parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format: 1,
            config: self.config.clone(),
            epoch: self.epoch,
            tensors: self
                .params
                .iter()
                .map(|p| TensorInfo { name: p.name.clone(), rows: p.value.rows, cols: p.value.cols })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + header.len() + 8 * self.num_parameters());
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for p in &self.params {
            for v in &p.value.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = || Error::Format(format!("{} is not a valid checkpoint", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad());
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(bytes.get(16..16 + hlen).ok_or_else(bad)?)?;
        let mut offset = 16 + hlen;
        let mut params = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n = t.rows * t.cols;
            let raw = bytes.get(offset..offset + 8 * n).ok_or_else(bad)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            offset += 8 * n;
            params.push(Param { name: t.name, value: Matrix::from_vec(t.rows, t.cols, data) });
        }
        if offset != bytes.len() {
            return Err(bad());
        }
        let state = ModelState { config: header.config, params, epoch: header.epoch };
        let fresh = ModelState::new(state.config.clone())?;
        let layout_ok = fresh.params.len() == state.params.len()
            && fresh.params.iter().zip(&state.params).all(|(a, b)| {
                a.name == b.name && a.value.rows == b.value.rows && a.value.cols == b.value.cols
            });
        if !layout_ok {
            return Err(Error::Format("checkpoint tensor layout does not match its config".into()));
        }
        Ok(state)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"SQFCKPT1";

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: u32,
    config: ModelConfig,
    epoch: usize,
    tensors: Vec<TensorInfo>,
}

/// Compares analytic parameter gradients of `objective` against central
/// finite differences with step `epsilon`. Up to `max_per_tensor` entries of
/// every tensor are probed (evenly strided). Returns the max relative error
/// `|a - n| / max(|a|, |n|, 1e-6)`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    state: &ModelState,
    users: &[u32],
    inputs: &[PaddedInput],
    targets: &[Vec<u32>],
    denominator: Denominator,
    objective: &dyn Fn(&BatchLosses) -> Result<Aggregate>,
    epsilon: f64,
    max_per_tensor: usize,
) -> Result<f64> {
    let graph = state.batch_losses(users, inputs, targets, denominator, None)?;
    let agg = objective(&graph.batch)?;
    let grads = graph.backward(&agg.position_weights);
    if grads.iter().any(|g| g.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("non-finite analytic gradient".into()));
    }
    let eval = |s: &ModelState| -> Result<f64> {
        let g = s.batch_losses(users, inputs, targets, denominator, None)?;
        Ok(objective(&g.batch)?.value)
    };
    let mut probe = state.clone();
    let mut worst = 0.0f64;
    for (pi, grad) in grads.iter().enumerate() {
        let n = grad.data.len();
        let stride = n.div_ceil(max_per_tensor.max(1)).max(1);
        for idx in (0..n).step_by(stride) {
            let orig = probe.params[pi].value.data[idx];
            probe.params[pi].value.data[idx] = orig + epsilon;
            let up = eval(&probe)?;
            probe.params[pi].value.data[idx] = orig - epsilon;
            let down = eval(&probe)?;
            probe.params[pi].value.data[idx] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = grad.data[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
