//! Encoder stack: embeddings with sinusoidal positions, a per-layer choice
//! of dependency-scaled vs vanilla attention, position-wise feed-forward
//! sublayers, residual connections, and post-sublayer layer norm.
//!
//! The dependency-scale matrix is built once per sentence from the tree
//! distances and shared by every scaled layer; RS-sparsing resamples a
//! fresh replacement pattern per scaled layer on each training pass.
//! Sparsing and dropout apply during training only; inference with
//! sparsing configured is bit-identical to inference without it.

use std::collections::BTreeSet;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{deps_attention, AttentionError, AttentionParams, AttentionTrace};
use crate::deptree::{tree_distance_matrix, DepTree};
use crate::scaling::{
    rs_sparsify, scale_matrix, wink_mask, ScaledMatrix, ScalingError, SparsingConfig, SparsingMode,
};
use crate::tensor::{Tensor, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Hard cap on encoder depth; configs beyond it are rejected outright so
/// that layer lists and parameter vectors stay at desk scale.
pub const MAX_LAYERS: usize = 1024;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("sentence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("{tokens} token ids but tree of length {tree}")]
    LengthMismatch { tokens: usize, tree: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// What the scaled layers multiply into their scores. `Ones` swaps the
/// Gaussian matrix for all-ones, a diagnostic that must reproduce the
/// baseline bitwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DsMode {
    #[default]
    Gauss,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    /// 1-based indices of layers that apply the dependency scale.
    pub deps_layers: BTreeSet<usize>,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub sigma: f64,
    pub sparsing: SparsingConfig,
    pub dropout: f64,
    pub max_len: usize,
    pub ds_mode: DsMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 6,
            deps_layers: [1, 2, 3].into_iter().collect(),
            n_heads: 4,
            d_model: 32,
            d_ff: 64,
            sigma: 1.0,
            sparsing: SparsingConfig::default(),
            dropout: 0.1,
            max_len: 80,
            ds_mode: DsMode::Gauss,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(EncoderError::InvalidConfig(
                "n_layers, d_model, d_ff, and max_len must be positive".to_string(),
            ));
        }
        if self.n_layers > MAX_LAYERS {
            return Err(EncoderError::InvalidConfig(format!(
                "n_layers {} exceeds the limit of {MAX_LAYERS}",
                self.n_layers
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if let Some(&l) = self.deps_layers.iter().find(|&&l| l == 0 || l > self.n_layers) {
            return Err(EncoderError::InvalidConfig(format!(
                "deps layer {} outside 1..={}",
                l, self.n_layers
            )));
        }
        if !(self.sigma > 0.0) || !(self.sigma * self.sigma).is_normal() {
            return Err(EncoderError::InvalidConfig(format!(
                "sigma must be positive with a representable square, got {}",
                self.sigma
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::InvalidConfig(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        self.sparsing.validate()?;
        Ok(())
    }

    /// Copy with every layer running vanilla attention.
    pub fn baseline(&self) -> EncoderConfig {
        EncoderConfig {
            deps_layers: BTreeSet::new(),
            ..self.clone()
        }
    }
}

/// Learned token vectors.
pub struct EmbeddingTable {
    pub vocab: usize,
    pub d_model: usize,
    /// vocab x d_model parameter matrix.
    pub weights: Tensor,
}

/// Sinusoidal position encoding for positions 0..len.
pub fn positional_encoding(len: usize, d_model: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d_model];
    for pos in 0..len {
        for j in 0..d_model {
            let pair = (j - j % 2) as f64;
            let rate = (pos as f64) / 10000f64.powf(pair / d_model as f64);
            pe[pos * d_model + j] = if j % 2 == 0 { rate.sin() } else { rate.cos() };
        }
    }
    pe
}

/// H0 rows: embedding scaled by sqrt(d_model) plus the position encoding.
pub fn embed(
    tokens: &[usize],
    table: &EmbeddingTable,
    max_len: usize,
) -> Result<Tensor, EncoderError> {
    if tokens.len() > max_len {
        return Err(EncoderError::TooLong {
            len: tokens.len(),
            max_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= table.vocab) {
        return Err(EncoderError::OutOfVocab {
            id,
            vocab: table.vocab,
        });
    }
    let rows = table.weights.gather_rows(tokens)?;
    let scaled = rows.scalar_mul((table.d_model as f64).sqrt());
    let pe = Tensor::from_vec(
        &[tokens.len(), table.d_model],
        positional_encoding(tokens.len(), table.d_model),
    )?;
    Ok(scaled.add(&pe)?)
}

/// Weights of one encoder layer.
pub struct LayerParams {
    pub attn: AttentionParams,
    pub attn_gain: Tensor,
    pub attn_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ffn_gain: Tensor,
    pub ffn_bias: Tensor,
}

/// All weights of the encoder plus its embedding table.
pub struct EncoderParams {
    pub embedding: EmbeddingTable,
    pub layers: Vec<LayerParams>,
}

fn uniform_param<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::param(&[rows, cols], data).expect("shape matches data")
}

impl EncoderParams {
    /// Fan-scaled uniform init with a fixed draw order: embedding first,
    /// then per layer the attention weights, FFN weights, and biases; norm
    /// gains start at 1 and all biases at 0 (no draws).
    pub fn init<R: Rng>(
        cfg: &EncoderConfig,
        vocab: usize,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        cfg.validate()?;
        if vocab == 0 {
            return Err(EncoderError::InvalidConfig(
                "vocab must be positive".to_string(),
            ));
        }
        // Bound the total parameter count before allocating anything so
        // that absurd configs (e.g. from a corrupt checkpoint) fail with
        // an error instead of exhausting memory.
        const MAX_PARAMS: u128 = 1 << 26;
        let (v, d128, ff, nl) = (
            vocab as u128,
            cfg.d_model as u128,
            cfg.d_ff as u128,
            cfg.n_layers as u128,
        );
        let per_layer = 4 * d128 * d128 + 2 * d128 * ff + ff + 5 * d128;
        let total = v * d128 + nl * per_layer;
        if total > MAX_PARAMS {
            return Err(EncoderError::InvalidConfig(format!(
                "model would have {total} parameters (limit {MAX_PARAMS})"
            )));
        }
        let d = cfg.d_model;
        let embedding = EmbeddingTable {
            vocab,
            d_model: d,
            weights: uniform_param(vocab, d, rng),
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let attn = AttentionParams::init(d, cfg.n_heads, rng)?;
            let ffn_w1 = uniform_param(d, cfg.d_ff, rng);
            let ffn_w2 = uniform_param(cfg.d_ff, d, rng);
            layers.push(LayerParams {
                attn,
                attn_gain: Tensor::param(&[d], vec![1.0; d])?,
                attn_bias: Tensor::param(&[d], vec![0.0; d])?,
                ffn_w1,
                ffn_b1: Tensor::param(&[cfg.d_ff], vec![0.0; cfg.d_ff])?,
                ffn_w2,
                ffn_b2: Tensor::param(&[d], vec![0.0; d])?,
                ffn_gain: Tensor::param(&[d], vec![1.0; d])?,
                ffn_bias: Tensor::param(&[d], vec![0.0; d])?,
            });
        }
        Ok(EncoderParams { embedding, layers })
    }

    /// All trainable tensors in a fixed order (optimizer / checkpoint order).
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = vec![self.embedding.weights.clone()];
        for layer in &self.layers {
            out.extend(layer.attn.tensors());
            out.push(layer.attn_gain.clone());
            out.push(layer.attn_bias.clone());
            out.push(layer.ffn_w1.clone());
            out.push(layer.ffn_b1.clone());
            out.push(layer.ffn_w2.clone());
            out.push(layer.ffn_b2.clone());
            out.push(layer.ffn_gain.clone());
            out.push(layer.ffn_bias.clone());
        }
        out
    }

    pub fn zero_grads(&self) {
        for t in self.tensors() {
            t.zero_grad();
        }
    }
}

/// Whether a pass is a training pass; training passes carry one RNG stream
/// for dropout masks and a separate one for sparsing draws, so enabling a
/// sparsing mode never shifts the dropout pattern.
pub enum ForwardMode<'a> {
    Inference,
    Training {
        dropout_rng: &'a mut ChaCha8Rng,
        sparsing_rng: &'a mut ChaCha8Rng,
    },
}

/// One layer's record from a forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerTrace {
    /// 1-based layer index.
    pub layer: usize,
    /// Whether this layer applied the dependency scale.
    pub deps: bool,
    pub attn: AttentionTrace,
}

fn dropout_mask(numel: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..numel)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect()
}

fn sublayer_finish(
    x: &Tensor,
    sub: Tensor,
    gain: &Tensor,
    bias: &Tensor,
    rate: f64,
    dropout_rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Tensor, EncoderError> {
    let sub = match dropout_rng {
        Some(rng) if rate > 0.0 => {
            let mask = Tensor::from_vec(sub.shape(), dropout_mask(sub.numel(), rate, rng))?;
            sub.mul(&mask)?
        }
        _ => sub,
    };
    Ok(x.add(&sub)?.layer_norm()?.scale_cols(gain)?.add_bias(bias)?)
}

/// Full encoder pass over one sentence. Layer l applies the dependency
/// scale iff l is in `cfg.deps_layers`; every layer shares the scale
/// matrix built from `tree` except under RS-sparsing, which redraws its
/// replacement pattern per scaled layer. Returns final hidden states
/// (I x d_model) and one trace per layer.
pub fn encoder_forward(
    tokens: &[usize],
    tree: &DepTree,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    mode: ForwardMode<'_>,
) -> Result<(Tensor, Vec<LayerTrace>), EncoderError> {
    cfg.validate()?;
    if tokens.len() != tree.len() {
        return Err(EncoderError::LengthMismatch {
            tokens: tokens.len(),
            tree: tree.len(),
        });
    }
    if params.layers.len() != cfg.n_layers {
        return Err(EncoderError::InvalidConfig(format!(
            "params hold {} layers but config wants {}",
            params.layers.len(),
            cfg.n_layers
        )));
    }
    let (mut dropout_rng, mut sparsing_rng) = match mode {
        ForwardMode::Inference => (None, None),
        ForwardMode::Training {
            dropout_rng,
            sparsing_rng,
        } => (Some(dropout_rng), Some(sparsing_rng)),
    };
    let training = dropout_rng.is_some();

    let uses_deps = !cfg.deps_layers.is_empty();
    let dist = uses_deps.then(|| tree_distance_matrix(tree));
    let shared_ds = match (&dist, cfg.ds_mode) {
        (Some(_), DsMode::Ones) => Some(ScaledMatrix::ones(tree.len())),
        (Some(d), DsMode::Gauss) => Some(scale_matrix(d, cfg.sigma)?),
        (None, _) => None,
    };
    let wink = match (&dist, training && cfg.sparsing.mode == SparsingMode::Wink) {
        (Some(d), true) => Some(wink_mask(d, cfg.sparsing.k)),
        _ => None,
    };

    let mut x = embed(tokens, &params.embedding, cfg.max_len)?;
    let mut traces = Vec::with_capacity(cfg.n_layers);
    for (idx, layer) in params.layers.iter().enumerate() {
        let l = idx + 1;
        let deps = cfg.deps_layers.contains(&l);
        let rs_ds = match (&dist, deps && training && cfg.sparsing.mode == SparsingMode::Rs) {
            (Some(d), true) => {
                let rng = sparsing_rng.as_deref_mut().expect("training mode");
                let diluted = rs_sparsify(d, cfg.sparsing.k, cfg.sparsing.q, rng.next_u64())?;
                match cfg.ds_mode {
                    DsMode::Gauss => Some(scale_matrix(&diluted, cfg.sigma)?),
                    DsMode::Ones => None,
                }
            }
            _ => None,
        };
        let ds = if deps {
            rs_ds.as_ref().or(shared_ds.as_ref())
        } else {
            None
        };
        let layer_wink = if deps { wink.as_ref() } else { None };
        let (attn_out, attn_trace) = deps_attention(&x, ds, &layer.attn, None, layer_wink)?;
        x = sublayer_finish(
            &x,
            attn_out,
            &layer.attn_gain,
            &layer.attn_bias,
            cfg.dropout,
            &mut dropout_rng,
        )?;
        let ffn = x
            .matmul(&layer.ffn_w1)?
            .add_bias(&layer.ffn_b1)?
            .relu()
            .matmul(&layer.ffn_w2)?
            .add_bias(&layer.ffn_b2)?;
        x = sublayer_finish(
            &x,
            ffn,
            &layer.ffn_gain,
            &layer.ffn_bias,
            cfg.dropout,
            &mut dropout_rng,
        )?;
        traces.push(LayerTrace {
            layer: l,
            deps,
            attn: attn_trace,
        });
    }
    Ok((x, traces))
}

#[derive(Serialize, Deserialize)]
struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: EncoderConfig,
    vocab: usize,
    tensors: Vec<TensorData>,
}

/// Serialize config plus all weights as a versioned JSON checkpoint.
pub fn save_checkpoint(cfg: &EncoderConfig, params: &EncoderParams) -> String {
    let tensors = params
        .tensors()
        .iter()
        .map(|t| TensorData {
            shape: t.shape().to_vec(),
            data: t.data().clone(),
        })
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        vocab: params.embedding.vocab,
        tensors,
    };
    serde_json::to_string(&file).expect("checkpoint serializes")
}

/// Rebuild config and weights from a JSON checkpoint.
pub fn load_checkpoint(text: &str) -> Result<(EncoderConfig, EncoderParams), EncoderError> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| EncoderError::BadCheckpoint(e.to_string()))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(EncoderError::BadCheckpoint(format!(
            "version {} unsupported (expected {})",
            file.version, CHECKPOINT_VERSION
        )));
    }
    use rand::SeedableRng;
    let params = EncoderParams::init(&file.config, file.vocab, &mut ChaCha8Rng::seed_from_u64(0))?;
    let slots = params.tensors();
    if slots.len() != file.tensors.len() {
        return Err(EncoderError::BadCheckpoint(format!(
            "{} tensors in file, expected {}",
            file.tensors.len(),
            slots.len()
        )));
    }
    for (slot, saved) in slots.iter().zip(file.tensors) {
        if slot.shape() != saved.shape.as_slice() || saved.data.len() != slot.numel() {
            return Err(EncoderError::BadCheckpoint(format!(
                "tensor shape {:?} with {} values, expected {:?}",
                saved.shape,
                saved.data.len(),
                slot.shape()
            )));
        }
        if saved.data.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::BadCheckpoint(
                "non-finite weight value".to_string(),
            ));
        }
        slot.set_data(saved.data);
    }
    Ok((file.config, params))
}
