//! Pre-norm decoder-only transformer with windowed attention, distance-based
//! hidden-state reset and `[SUM]`-token scoring.
//!
//! Parameters live in one flat buffer described by a [`ParamLayout`]; gradients
//! share the layout, which keeps the optimizer, checkpoints and
//! finite-difference checks tensor-agnostic.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    alibi_slopes, apply_positional_encoding, attention_backward, attention_forward, rotate_rows,
    AlibiRows, AttentionConfig, AttentionError, AttentionOutput, PairBlend, PositionalMode,
};
use crate::data::Vocabulary;
use crate::flops::MacCounter;
use crate::prompt::{AttentionPlan, TokenizedPrompt};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const CHECKPOINT_FORMAT: &str = "dti-checkpoint-v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("non-finite activation at layer {layer} ({stage})")]
    NonFinite { layer: usize, stage: &'static str },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{logits} [SUM] logits but {labels} labels")]
    LabelMismatch { logits: usize, labels: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResetGranularity {
    /// Each (query, key) pair blends with the ratio of its own distance.
    #[default]
    PerQuery,
    /// Each token is blended once, by its distance to the nearest target at or
    /// after it.
    PerToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResetConfig {
    pub enabled: bool,
    pub y_min: f64,
    pub y_max: f64,
    pub granularity: ResetGranularity,
    /// 1-based layers whose key/value inputs are blended; `None` means every
    /// layer from the second on.
    pub active_layers: Option<Vec<usize>>,
}

impl Default for ResetConfig {
    fn default() -> Self {
        ResetConfig {
            enabled: true,
            y_min: 0.0,
            y_max: 0.9,
            granularity: ResetGranularity::PerQuery,
            active_layers: None,
        }
    }
}

impl ResetConfig {
    pub fn disabled() -> Self {
        ResetConfig {
            enabled: false,
            ..ResetConfig::default()
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.y_min) || !(0.0..=1.0).contains(&self.y_max) {
            return Err(ModelError::InvalidConfig(format!(
                "reset.y_min={} and reset.y_max={} must lie in [0, 1]",
                self.y_min, self.y_max
            )));
        }
        if self.y_min > self.y_max {
            return Err(ModelError::InvalidConfig(format!(
                "reset.y_min={} exceeds reset.y_max={}",
                self.y_min, self.y_max
            )));
        }
        if let Some(layers) = &self.active_layers {
            if let Some(&bad) = layers.iter().find(|&&l| l < 2 || l > num_layers) {
                return Err(ModelError::InvalidConfig(format!(
                    "reset.active_layers contains {bad}, allowed range is 2..={num_layers}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_active(&self, layer: usize, num_layers: usize) -> bool {
        self.enabled
            && match &self.active_layers {
                None => layer >= 2 && layer <= num_layers,
                Some(layers) => layers.contains(&layer),
            }
    }

    /// `ratio[d]` for interaction distances `0..=n`.
    pub fn ratio_table(&self, n: usize) -> Vec<f64> {
        (0..=n)
            .map(|d| logistic_ratio(d as f64, n, self.y_min, self.y_max))
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logistic_ratio(d: f64, n: usize, y_min: f64, y_max: f64) -> f64 {
    y_min + (y_max - y_min) * sigmoid(d - n as f64 / 2.0)
}

/// `y_min + (y_max - y_min) * sigmoid(d - n / 2)` with `d` in interactions.
pub fn interpolation_ratio(d: f64, n: usize, y_min: f64, y_max: f64) -> Result<f64, ModelError> {
    if y_min > y_max {
        return Err(ModelError::InvalidConfig(format!(
            "y_min={y_min} exceeds y_max={y_max}"
        )));
    }
    Ok(logistic_ratio(d, n, y_min, y_max))
}

/// `ratio * initial + (1 - ratio) * current`.
pub fn hidden_state_blend(initial: ArrayView1<'_, f64>, current: ArrayView1<'_, f64>, ratio: f64) -> Array1<f64> {
    if ratio == 0.0 {
        return current.to_owned();
    }
    if ratio == 1.0 {
        return initial.to_owned();
    }
    &initial * ratio + &current * (1.0 - ratio)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlibiConfig {
    pub enabled: bool,
    /// Global multiplier on the geometric per-head slopes.
    pub slope_multiplier: f64,
    pub rows: AlibiRows,
}

impl Default for AlibiConfig {
    fn default() -> Self {
        AlibiConfig {
            enabled: true,
            slope_multiplier: 1.0,
            rows: AlibiRows::SumOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    /// Rows of the absolute position table.
    pub max_positions: usize,
    pub positional_mode: PositionalMode,
    pub rope_base: f64,
    pub alibi: AlibiConfig,
    pub reset: ResetConfig,
    /// Residual-branch dropout, active only when the caller supplies an RNG.
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            d_model: 32,
            num_heads: 2,
            ff_dim: 128,
            vocab_size: 32,
            max_positions: 1024,
            positional_mode: PositionalMode::Absolute,
            rope_base: 10_000.0,
            alibi: AlibiConfig::default(),
            reset: ResetConfig::default(),
            dropout: 0.0,
            init_std: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.num_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!(
                "d_model={} must be a positive multiple of num_heads={}",
                self.d_model, self.num_heads
            ));
        }
        if self.positional_mode == PositionalMode::Rope && !self.d_model.is_multiple_of(2) {
            return bad(format!("rope needs an even d_model, got {}", self.d_model));
        }
        if self.ff_dim == 0 || self.max_positions == 0 {
            return bad("ff_dim and max_positions must be positive".into());
        }
        if self.vocab_size <= Vocabulary::SEP as usize {
            return bad(format!("vocab_size={} leaves no room for the reserved tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout={} must lie in [0, 1)", self.dropout));
        }
        if self.alibi.enabled && self.alibi.slope_multiplier <= 0.0 {
            return bad("alibi.slope_multiplier must be positive".into());
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        self.reset.validate(self.num_layers)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            num_heads: self.num_heads,
            head_dim: self.head_dim(),
            alibi_slopes: if self.alibi.enabled {
                alibi_slopes(self.num_heads, self.alibi.slope_multiplier)
            } else {
                Vec::new()
            },
            alibi_rows: self.alibi.rows,
            positional_mode: self.positional_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSlots {
    ln1_gain: usize,
    ln1_bias: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    ff1_weight: usize,
    ff1_bias: usize,
    ff2_weight: usize,
    ff2_bias: usize,
}

/// Named tensors packed into one flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    embedding: usize,
    position: usize,
    layers: Vec<LayerSlots>,
    final_gain: usize,
    final_bias: usize,
    output: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            let offset = tensors.last().map_or(0, |t: &TensorSpec| t.offset + t.len());
            tensors.push(TensorSpec { name, shape, offset });
            tensors.len() - 1
        };
        let (d, ff, v) = (cfg.d_model, cfg.ff_dim, cfg.vocab_size);
        let embedding = add("embedding".into(), vec![v, d]);
        let position = add("position".into(), vec![cfg.max_positions, d]);
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let mut named = |suffix: &str, shape: Vec<usize>| add(format!("layer{l}.{suffix}"), shape);
                LayerSlots {
                    ln1_gain: named("ln1.gain", vec![d]),
                    ln1_bias: named("ln1.bias", vec![d]),
                    wq: named("attn.wq", vec![d, d]),
                    wk: named("attn.wk", vec![d, d]),
                    wv: named("attn.wv", vec![d, d]),
                    wo: named("attn.wo", vec![d, d]),
                    ln2_gain: named("ln2.gain", vec![d]),
                    ln2_bias: named("ln2.bias", vec![d]),
                    ff1_weight: named("ff1.weight", vec![d, ff]),
                    ff1_bias: named("ff1.bias", vec![ff]),
                    ff2_weight: named("ff2.weight", vec![ff, d]),
                    ff2_bias: named("ff2.bias", vec![d]),
                }
            })
            .collect();
        let final_gain = add("final_ln.gain".into(), vec![d]);
        let final_bias = add("final_ln.bias".into(), vec![d]);
        let output = add("output".into(), vec![d, v]);
        ParamLayout {
            tensors,
            embedding,
            position,
            layers,
            final_gain,
            final_bias,
            output,
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.last().map_or(0, |t| t.offset + t.len())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn slice<'a>(&self, data: &'a [f64], idx: usize) -> &'a [f64] {
        &data[self.tensors[idx].range()]
    }

    pub fn slice_mut<'a>(&self, data: &'a mut [f64], idx: usize) -> &'a mut [f64] {
        &mut data[self.tensors[idx].range()]
    }

    pub fn matrix<'a>(&self, data: &'a [f64], idx: usize) -> ArrayView2<'a, f64> {
        let spec = &self.tensors[idx];
        ArrayView2::from_shape((spec.shape[0], spec.shape[1]), &data[spec.range()]).expect("layout shape")
    }

    pub fn matrix_mut<'a>(&self, data: &'a mut [f64], idx: usize) -> ArrayViewMut2<'a, f64> {
        let spec = &self.tensors[idx];
        ArrayViewMut2::from_shape((spec.shape[0], spec.shape[1]), &mut data[spec.range()]).expect("layout shape")
    }

    pub fn vector<'a>(&self, data: &'a [f64], idx: usize) -> ArrayView1<'a, f64> {
        ArrayView1::from(self.slice(data, idx))
    }

    /// Indices of tensors that weight decay applies to (matrices only).
    pub fn is_matrix(&self, idx: usize) -> bool {
        self.tensors[idx].shape.len() == 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    seed: u64,
    num_values: usize,
    config: ModelConfig,
    tensors: Vec<TensorSpec>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let data = vec![0.0; layout.num_values()];
        Ok(ModelParams {
            config,
            layout,
            data,
            seed: 0,
        })
    }

    /// Gaussian weights with `init_std`, unit norm gains and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut params = Self::zeros(config)?;
        params.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, params.config.init_std).expect("positive std");
        for idx in 0..params.layout.tensors.len() {
            let name = params.layout.tensors[idx].name.clone();
            let values = params.layout.slice_mut(&mut params.data, idx);
            if name.ends_with(".gain") {
                values.fill(1.0);
            } else if name.ends_with(".bias") {
                values.fill(0.0);
            } else {
                values.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        }
        Ok(params)
    }

    pub fn num_parameters(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.index_of(name).map(|i| self.layout.slice(&self.data, i))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let idx = self.layout.index_of(name)?;
        Some(self.layout.slice_mut(&mut self.data, idx))
    }

    /// Writes `<stem>.bin` (little-endian f64 values) and `<stem>.json`.
    pub fn save_checkpoint(&self, stem: &Path) -> Result<(PathBuf, PathBuf), ModelError> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(&bin)?.write_all(&bytes)?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            seed: self.seed,
            num_values: self.data.len(),
            config: self.config.clone(),
            tensors: self.layout.tensors.clone(),
        };
        fs::write(&json, serde_json::to_string_pretty(&manifest)?)?;
        Ok((bin, json))
    }

    pub fn load_checkpoint(stem: &Path) -> Result<Self, ModelError> {
        let manifest: CheckpointManifest =
            serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format {:?}", manifest.format)));
        }
        let mut params = ModelParams::zeros(manifest.config)?;
        if params.layout.tensors != manifest.tensors || manifest.num_values != params.data.len() {
            return Err(ModelError::Checkpoint("tensor table does not match the config".into()));
        }
        let mut bytes = Vec::new();
        fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut bytes)?;
        if bytes.len() != params.data.len() * 8 {
            return Err(ModelError::Checkpoint(format!(
                "expected {} bytes, found {}",
                params.data.len() * 8,
                bytes.len()
            )));
        }
        for (v, chunk) in params.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        params.seed = manifest.seed;
        Ok(params)
    }
}

/// Yes/no logits at every `[SUM]` position of a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumLogits {
    pub yes: Vec<f64>,
    pub no: Vec<f64>,
}

impl SumLogits {
    pub fn len(&self) -> usize {
        self.yes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.yes.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.yes.iter().zip(&self.no).map(|(&y, &n)| pointwise_score(y, n)).collect()
    }
}

/// Two-way softmax `exp(yes) / (exp(yes) + exp(no))`.
pub fn pointwise_score(logit_yes: f64, logit_no: f64) -> f64 {
    sigmoid(logit_yes - logit_no)
}

fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean over unmasked `[SUM]` rows of the full-vocabulary cross-entropy of the
/// label token. `logits` has one row per `[SUM]`.
pub fn sum_token_loss(
    logits: ArrayView2<'_, f64>,
    sum_labels: &[u32],
    mask: Option<&[bool]>,
) -> Result<f64, ModelError> {
    if logits.nrows() != sum_labels.len() {
        return Err(ModelError::LabelMismatch {
            logits: logits.nrows(),
            labels: sum_labels.len(),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &label) in sum_labels.iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let row = logits.row(i);
        total += log_sum_exp(row) - row[label as usize];
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[derive(Debug, Clone)]
struct LnCache {
    normalized: Array2<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: ArrayView2<'_, f64>, gain: ArrayView1<'_, f64>, bias: ArrayView1<'_, f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut normalized = x.to_owned();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in normalized.rows_mut() {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row *= r;
        inv_std.push(r);
    }
    let out = &normalized * &gain + &bias;
    (out, LnCache { normalized, inv_std })
}

fn layer_norm_backward(
    dy: ArrayView2<'_, f64>,
    cache: &LnCache,
    gain: ArrayView1<'_, f64>,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (t, (dy_row, xhat)) in dy.rows().into_iter().zip(cache.normalized.rows()).enumerate() {
        for j in 0..dy_row.len() {
            dgain[j] += dy_row[j] * xhat[j];
            dbias[j] += dy_row[j];
        }
        let dxhat = &dy_row * &gain;
        let mean_dxhat = dxhat.sum() / d;
        let mean_dxhat_xhat = (&dxhat * &xhat).sum() / d;
        let r = cache.inv_std[t];
        let mut out = dx.row_mut(t);
        for j in 0..dy_row.len() {
            out[j] = r * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn check_finite(x: &Array2<f64>, layer: usize, stage: &'static str) -> Result<(), ModelError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { layer, stage })
    }
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    /// `LN1(h0)` and its normalization cache, present on reset layers.
    initial: Option<(LnCache, Array2<f64>)>,
    /// Per-token blend ratios; the blended key/value input is `kv_input`.
    row_ratio: Option<Vec<f64>>,
    kv_input: Option<Array2<f64>>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    k0: Option<Array2<f64>>,
    v0: Option<Array2<f64>>,
    ratios: Option<Vec<f64>>,
    attn: AttentionOutput,
    attn_mask: Option<Array2<f64>>,
    ln2: LnCache,
    b: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
    ff_mask: Option<Array2<f64>>,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    final_ln: LnCache,
    final_sum: Array2<f64>,
}

impl ForwardCache {
    /// Attention weights of 1-based `layer`.
    pub fn attention(&self, layer: usize) -> Option<&AttentionOutput> {
        layer.checked_sub(1).and_then(|l| self.layers.get(l)).map(|c| &c.attn)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub sum_logits: SumLogits,
    /// Full-vocabulary logits, one row per `[SUM]`.
    pub logits: Array2<f64>,
    pub cache: Option<ForwardCache>,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Added to the token embeddings before positional encoding.
    pub input_offsets: Option<ArrayView2<'a, f64>>,
    pub counter: Option<&'a mut MacCounter>,
    /// Enables dropout when the config asks for it.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    pub keep_cache: bool,
}

/// Forward pass returning the yes/no logits at every `[SUM]`.
pub fn forward(params: &ModelParams, tp: &TokenizedPrompt, plan: &AttentionPlan) -> Result<SumLogits, ModelError> {
    Ok(forward_with(params, tp, plan, ForwardOptions::default())?.sum_logits)
}

pub fn forward_with(
    params: &ModelParams,
    tp: &TokenizedPrompt,
    plan: &AttentionPlan,
    mut opts: ForwardOptions<'_>,
) -> Result<ForwardOutput, ModelError> {
    let cfg = &params.config;
    let layout = &params.layout;
    let data = params.data.as_slice();
    let len = tp.len();
    let d = cfg.d_model;
    if plan.len() != len {
        return Err(ModelError::Shape(format!("prompt has {len} tokens, plan has {}", plan.len())));
    }
    if let Some(&bad) = tp.token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::Shape(format!("token id {bad} outside vocab of {}", cfg.vocab_size)));
    }
    let att_cfg = cfg.attention_config();
    let dropout = cfg.dropout > 0.0 && opts.dropout_rng.is_some();

    let embedding = layout.matrix(data, layout.embedding);
    let mut h0 = embedding.select(Axis(0), &tp.token_ids.iter().map(|&i| i as usize).collect::<Vec<_>>());
    if let Some(offsets) = opts.input_offsets {
        if offsets.dim() != (len, d) {
            return Err(ModelError::Shape(format!("input offsets are {:?}", offsets.dim())));
        }
        h0 += &offsets;
    }
    apply_positional_encoding(
        &mut h0,
        &tp.position_ids,
        cfg.positional_mode,
        Some(layout.matrix(data, layout.position)),
        cfg.rope_base,
    )?;
    check_finite(&h0, 0, "embedding")?;

    let ratio_table = cfg.reset.ratio_table(plan.n);
    let mut h = h0.clone();
    let mut caches = Vec::with_capacity(cfg.num_layers);
    for (l, slots) in layout.layers.iter().enumerate() {
        let layer = l + 1;
        let g1 = layout.vector(data, slots.ln1_gain);
        let b1 = layout.vector(data, slots.ln1_bias);
        let (a, ln1) = layer_norm(h.view(), g1, b1);
        let wq = layout.matrix(data, slots.wq);
        let wk = layout.matrix(data, slots.wk);
        let wv = layout.matrix(data, slots.wv);
        let active = cfg.reset.is_active(layer, cfg.num_layers);
        let initial = active.then(|| {
            let (a0, cache) = layer_norm(h0.view(), g1, b1);
            (cache, a0)
        });

        let (mut row_ratio, mut kv_input, mut k0, mut v0, mut ratios) = (None, None, None, None, None);
        let q = a.dot(&wq);
        let (k, v) = match (&initial, cfg.reset.granularity) {
            (Some((_, a0)), ResetGranularity::PerToken) => {
                let rr: Vec<f64> = plan
                    .target_distance
                    .iter()
                    .map(|dist| dist.map_or(0.0, |dd| ratio_table[dd.min(plan.n)]))
                    .collect();
                let mut blended = a.clone();
                for (t, &r) in rr.iter().enumerate() {
                    if r != 0.0 {
                        let row = hidden_state_blend(a0.row(t), a.row(t), r);
                        blended.row_mut(t).assign(&row);
                    }
                }
                if let Some(c) = opts.counter.as_deref_mut() {
                    c.blend += (len * d) as u64;
                }
                let kv = (blended.dot(&wk), blended.dot(&wv));
                row_ratio = Some(rr);
                kv_input = Some(blended);
                kv
            }
            (Some((_, a0)), ResetGranularity::PerQuery) => {
                k0 = Some(a0.dot(&wk));
                v0 = Some(a0.dot(&wv));
                ratios = Some(ratio_table.clone());
                if let Some(c) = opts.counter.as_deref_mut() {
                    c.linear += (2 * len * d * d) as u64;
                }
                (a.dot(&wk), a.dot(&wv))
            }
            (None, _) => (a.dot(&wk), a.dot(&wv)),
        };
        let blend = match (&k0, &v0, &ratios) {
            (Some(k0), Some(v0), Some(r)) => Some(PairBlend {
                initial_keys: k0.view(),
                initial_values: v0.view(),
                ratio_by_distance: r,
            }),
            _ => None,
        };
        let attn = attention_forward(q.view(), k.view(), v.view(), blend, plan, &att_cfg, opts.counter.as_deref_mut())?;
        let mut o = attn.output.dot(&layout.matrix(data, slots.wo));
        let attn_mask = dropout.then(|| dropout_mask(len, d, cfg.dropout, opts.dropout_rng.as_deref_mut().expect("rng")));
        if let Some(mask) = &attn_mask {
            o *= mask;
        }
        h += &o;

        let (b, ln2) = layer_norm(
            h.view(),
            layout.vector(data, slots.ln2_gain),
            layout.vector(data, slots.ln2_bias),
        );
        let u = b.dot(&layout.matrix(data, slots.ff1_weight)) + layout.vector(data, slots.ff1_bias);
        let g = u.mapv(gelu);
        let mut f = g.dot(&layout.matrix(data, slots.ff2_weight)) + layout.vector(data, slots.ff2_bias);
        let ff_mask = dropout.then(|| dropout_mask(len, d, cfg.dropout, opts.dropout_rng.as_deref_mut().expect("rng")));
        if let Some(mask) = &ff_mask {
            f *= mask;
        }
        h += &f;
        check_finite(&h, layer, "block output")?;
        if let Some(c) = opts.counter.as_deref_mut() {
            c.linear += (4 * len * d * d + 2 * len * d * cfg.ff_dim) as u64;
        }

        if opts.keep_cache {
            caches.push(LayerCache {
                ln1,
                a,
                initial,
                row_ratio,
                kv_input,
                q,
                k,
                v,
                k0,
                v0,
                ratios,
                attn,
                attn_mask,
                ln2,
                b,
                u,
                g,
                ff_mask,
            });
        }
    }

    let sum_rows = h.select(Axis(0), &tp.sum_positions);
    let (final_sum, final_ln) = layer_norm(
        sum_rows.view(),
        layout.vector(data, layout.final_gain),
        layout.vector(data, layout.final_bias),
    );
    let logits = final_sum.dot(&layout.matrix(data, layout.output));
    check_finite(&logits, cfg.num_layers + 1, "output logits")?;
    if let Some(c) = opts.counter.as_deref_mut() {
        c.output += (tp.sum_positions.len() * d * cfg.vocab_size) as u64;
        c.tokens += len as u64;
        c.targets += tp.sum_positions.len() as u64;
        c.forward_passes += 1;
    }
    let sum_logits = SumLogits {
        yes: logits.column(Vocabulary::YES as usize).to_vec(),
        no: logits.column(Vocabulary::NO as usize).to_vec(),
    };
    let cache = opts.keep_cache.then_some(ForwardCache {
        layers: caches,
        final_ln,
        final_sum,
    });
    Ok(ForwardOutput {
        sum_logits,
        logits,
        cache,
    })
}

fn add_at_b(grads: &mut [f64], layout: &ParamLayout, idx: usize, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) {
    let mut target = layout.matrix_mut(grads, idx);
    general_mat_mul(1.0, &a.t(), &b, 1.0, &mut target);
}

fn add_column_sums(grads: &mut [f64], layout: &ParamLayout, idx: usize, x: ArrayView2<'_, f64>) {
    for (g, s) in layout.slice_mut(grads, idx).iter_mut().zip(x.sum_axis(Axis(0))) {
        *g += s;
    }
}

/// Reverse pass of one prompt. Accumulates into `grads` and returns the
/// gradient with respect to the pre-encoding input embeddings.
pub fn backward(
    params: &ModelParams,
    tp: &TokenizedPrompt,
    plan: &AttentionPlan,
    cache: &ForwardCache,
    dlogits: ArrayView2<'_, f64>,
    grads: &mut [f64],
) -> Array2<f64> {
    let cfg = &params.config;
    let layout = &params.layout;
    let data = params.data.as_slice();
    let len = tp.len();
    let d = cfg.d_model;
    let att_cfg = cfg.attention_config();

    add_at_b(grads, layout, layout.output, cache.final_sum.view(), dlogits);
    let dfinal = dlogits.dot(&layout.matrix(data, layout.output).t());
    let (fg, fb) = (layout.final_gain, layout.final_bias);
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let dsum = layer_norm_backward(dfinal.view(), &cache.final_ln, layout.vector(data, fg), &mut dgain, &mut dbias);
    accumulate(layout.slice_mut(grads, fg), &dgain);
    accumulate(layout.slice_mut(grads, fb), &dbias);

    let mut dh = Array2::<f64>::zeros((len, d));
    for (i, &p) in tp.sum_positions.iter().enumerate() {
        let mut row = dh.row_mut(p);
        row += &dsum.row(i);
    }
    let mut dh0 = Array2::<f64>::zeros((len, d));

    for (slots, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        // feed-forward branch
        let mut df = dh.clone();
        if let Some(mask) = &lc.ff_mask {
            df *= mask;
        }
        add_at_b(grads, layout, slots.ff2_weight, lc.g.view(), df.view());
        add_column_sums(grads, layout, slots.ff2_bias, df.view());
        let mut du = df.dot(&layout.matrix(data, slots.ff2_weight).t());
        du.zip_mut_with(&lc.u, |g, &u| *g *= gelu_grad(u));
        add_at_b(grads, layout, slots.ff1_weight, lc.b.view(), du.view());
        add_column_sums(grads, layout, slots.ff1_bias, du.view());
        let db = du.dot(&layout.matrix(data, slots.ff1_weight).t());
        dgain.fill(0.0);
        dbias.fill(0.0);
        let dmid = layer_norm_backward(db.view(), &lc.ln2, layout.vector(data, slots.ln2_gain), &mut dgain, &mut dbias);
        accumulate(layout.slice_mut(grads, slots.ln2_gain), &dgain);
        accumulate(layout.slice_mut(grads, slots.ln2_bias), &dbias);
        dh += &dmid;

        // attention branch
        let mut dout = dh.clone();
        if let Some(mask) = &lc.attn_mask {
            dout *= mask;
        }
        add_at_b(grads, layout, slots.wo, lc.attn.output.view(), dout.view());
        let dattn = dout.dot(&layout.matrix(data, slots.wo).t());
        let blend = match (&lc.k0, &lc.v0, &lc.ratios) {
            (Some(k0), Some(v0), Some(r)) => Some(PairBlend {
                initial_keys: k0.view(),
                initial_values: v0.view(),
                ratio_by_distance: r,
            }),
            _ => None,
        };
        let ag = attention_backward(
            dattn.view(),
            lc.q.view(),
            lc.k.view(),
            lc.v.view(),
            blend,
            &lc.attn,
            plan,
            &att_cfg,
        );
        let wq = layout.matrix(data, slots.wq);
        let wk = layout.matrix(data, slots.wk);
        let wv = layout.matrix(data, slots.wv);
        add_at_b(grads, layout, slots.wq, lc.a.view(), ag.queries.view());
        let mut da = ag.queries.dot(&wq.t());
        let kv_input = lc.kv_input.as_ref().unwrap_or(&lc.a);
        add_at_b(grads, layout, slots.wk, kv_input.view(), ag.keys.view());
        add_at_b(grads, layout, slots.wv, kv_input.view(), ag.values.view());
        let dkv = ag.keys.dot(&wk.t()) + ag.values.dot(&wv.t());
        let mut da0: Option<Array2<f64>> = None;
        match (&lc.row_ratio, &lc.initial) {
            (Some(rr), Some(_)) => {
                let mut d0 = dkv.clone();
                for (t, &r) in rr.iter().enumerate() {
                    let mut cur = dkv.row(t).to_owned();
                    cur *= 1.0 - r;
                    let mut row = da.row_mut(t);
                    row += &cur;
                    d0.row_mut(t).mapv_inplace(|v| v * r);
                }
                da0 = Some(d0);
            }
            _ => {
                da += &dkv;
                if let (Some(dk0), Some(dv0), Some((_, a0))) = (&ag.initial_keys, &ag.initial_values, &lc.initial) {
                    add_at_b(grads, layout, slots.wk, a0.view(), dk0.view());
                    add_at_b(grads, layout, slots.wv, a0.view(), dv0.view());
                    da0 = Some(dk0.dot(&wk.t()) + dv0.dot(&wv.t()));
                }
            }
        }
        let g1 = layout.vector(data, slots.ln1_gain);
        dgain.fill(0.0);
        dbias.fill(0.0);
        let dh_in = layer_norm_backward(da.view(), &lc.ln1, g1, &mut dgain, &mut dbias);
        if let (Some(da0), Some((ln0, _))) = (&da0, &lc.initial) {
            let d_initial = layer_norm_backward(da0.view(), ln0, g1, &mut dgain, &mut dbias);
            dh0 += &d_initial;
        }
        accumulate(layout.slice_mut(grads, slots.ln1_gain), &dgain);
        accumulate(layout.slice_mut(grads, slots.ln1_bias), &dbias);
        dh += &dh_in;
    }

    dh0 += &dh;
    match cfg.positional_mode {
        PositionalMode::Absolute => {
            let mut table = layout.matrix_mut(grads, layout.position);
            for (t, position) in tp.position_ids.iter().enumerate() {
                if let Some(p) = *position {
                    let mut row = table.row_mut(p);
                    row += &dh0.row(t);
                }
            }
        }
        PositionalMode::Rope => {
            rotate_rows(dh0.view_mut(), &tp.position_ids, cfg.rope_base, true).expect("even dimension validated");
        }
        PositionalMode::None => {}
    }
    let mut table = layout.matrix_mut(grads, layout.embedding);
    for (t, &id) in tp.token_ids.iter().enumerate() {
        let mut row = table.row_mut(id as usize);
        row += &dh0.row(t);
    }
    dh0
}

fn accumulate(target: &mut [f64], values: &[f64]) {
    for (t, v) in target.iter_mut().zip(values) {
        *t += v;
    }
}

/// One training example: a tokenized prompt, its plan and an optional label
/// mask over its `[SUM]` tokens.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub prompt: &'a TokenizedPrompt,
    pub plan: &'a AttentionPlan,
    pub label_mask: Option<&'a [bool]>,
}

impl<'a> Example<'a> {
    pub fn new(prompt: &'a TokenizedPrompt, plan: &'a AttentionPlan) -> Self {
        Example {
            prompt,
            plan,
            label_mask: None,
        }
    }

    fn active_targets(&self) -> usize {
        match self.label_mask {
            Some(mask) => mask.iter().filter(|&&m| m).count(),
            None => self.prompt.sum_positions.len(),
        }
    }
}

/// How per-prompt losses are combined into the batch loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Mean over prompts of each prompt's mean `[SUM]` loss.
    #[default]
    PerPrompt,
    /// Mean over all `[SUM]` tokens of the batch.
    PerTarget,
}

#[derive(Default)]
pub struct GradientOptions<'a> {
    pub weighting: LossWeighting,
    /// Multiplies the loss (and every gradient).
    pub scale: Option<f64>,
    pub counter: Option<&'a mut MacCounter>,
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

fn prompt_weights(batch: &[Example<'_>], weighting: LossWeighting) -> Vec<f64> {
    match weighting {
        LossWeighting::PerPrompt => vec![1.0 / batch.len().max(1) as f64; batch.len()],
        LossWeighting::PerTarget => {
            let total: usize = batch.iter().map(Example::active_targets).sum();
            batch
                .iter()
                .map(|e| e.active_targets() as f64 / total.max(1) as f64)
                .collect()
        }
    }
}

/// Batch loss without gradients.
pub fn batch_loss(params: &ModelParams, batch: &[Example<'_>], weighting: LossWeighting) -> Result<f64, ModelError> {
    let weights = prompt_weights(batch, weighting);
    let mut loss = 0.0;
    for (example, w) in batch.iter().zip(weights) {
        let out = forward_with(params, example.prompt, example.plan, ForwardOptions::default())?;
        loss += w * sum_token_loss(out.logits.view(), &example.prompt.sum_labels, example.label_mask)?;
    }
    Ok(loss)
}

/// Exact reverse-mode gradients of the batch loss. Returns `(loss, gradients)`
/// with gradients in the parameter layout.
pub fn compute_gradients(
    params: &ModelParams,
    batch: &[Example<'_>],
    mut opts: GradientOptions<'_>,
) -> Result<(f64, Vec<f64>), ModelError> {
    let scale = opts.scale.unwrap_or(1.0);
    let weights = prompt_weights(batch, opts.weighting);
    let mut grads = vec![0.0; params.data.len()];
    let mut loss = 0.0;
    for (example, w) in batch.iter().zip(weights) {
        let tp = example.prompt;
        let out = forward_with(
            params,
            tp,
            example.plan,
            ForwardOptions {
                input_offsets: None,
                counter: opts.counter.as_deref_mut(),
                dropout_rng: opts.dropout_rng.as_deref_mut(),
                keep_cache: true,
            },
        )?;
        let prompt_loss = sum_token_loss(out.logits.view(), &tp.sum_labels, example.label_mask)?;
        loss += scale * w * prompt_loss;
        let active = example.active_targets();
        if active == 0 {
            continue;
        }
        let coefficient = scale * w / active as f64;
        let mut dlogits = Array2::<f64>::zeros(out.logits.raw_dim());
        for (i, &label) in tp.sum_labels.iter().enumerate() {
            if example.label_mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let row = out.logits.row(i);
            let lse = log_sum_exp(row);
            let mut drow = dlogits.row_mut(i);
            for (j, &z) in row.iter().enumerate() {
                drow[j] = coefficient * (z - lse).exp();
            }
            drow[label as usize] -= coefficient;
        }
        backward(params, tp, example.plan, out.cache.as_ref().expect("cache kept"), dlogits.view(), &mut grads);
    }
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        let name = params
            .layout
            .tensors
            .iter()
            .find(|t| t.range().contains(&bad))
            .map_or_else(|| "?".to_owned(), |t| t.name.clone());
        return Err(ModelError::NonFiniteGradient(name));
    }
    Ok((loss, grads))
}

/// Yes-logit minus no-logit at `[SUM]` index `i`, for sensitivity probes.
pub fn margin(logits: &SumLogits, i: usize) -> f64 {
    logits.yes[i] - logits.no[i]
}
