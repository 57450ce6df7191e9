//! Windowed causal attention, ALiBi biases, positional encodings and the
//! receptive-field analyzer.
//!
//! Attention weights are stored sparsely, aligned with [`AttentionPlan::keys`]:
//! pairs outside a query's window are structural zeros and never materialized.

use std::io::Write;

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flops::MacCounter;
use crate::prompt::AttentionPlan;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("query {0} has an empty attention window")]
    EmptyWindow(usize),
    #[error("acausal pair: query position {query} precedes key position {key}")]
    Acausal { query: usize, key: usize },
    #[error("rotary encoding needs an even dimension, got {0}")]
    OddRopeDimension(usize),
    #[error("position {position} exceeds the absolute position table ({rows} rows)")]
    PositionOutOfRange { position: usize, rows: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// Learned position vectors added to the token embeddings.
    #[default]
    Absolute,
    /// Pairwise rotation of the token embeddings.
    Rope,
    /// No positional encoding.
    None,
}

/// Which query rows receive the ALiBi bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlibiRows {
    #[default]
    SumOnly,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    /// Per-head ALiBi slopes; empty disables the bias.
    pub alibi_slopes: Vec<f64>,
    pub alibi_rows: AlibiRows,
    pub positional_mode: PositionalMode,
}

impl AttentionConfig {
    pub fn new(num_heads: usize, head_dim: usize) -> Self {
        AttentionConfig {
            num_heads,
            head_dim,
            alibi_slopes: Vec::new(),
            alibi_rows: AlibiRows::SumOnly,
            positional_mode: PositionalMode::None,
        }
    }

    pub fn with_alibi(mut self, multiplier: f64, rows: AlibiRows) -> Self {
        self.alibi_slopes = alibi_slopes(self.num_heads, multiplier);
        self.alibi_rows = rows;
        self
    }

    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    fn bias_applies(&self, plan: &AttentionPlan, t: usize) -> bool {
        !self.alibi_slopes.is_empty()
            && (self.alibi_rows == AlibiRows::All || plan.is_sum[t])
    }
}

/// Geometric per-head slopes `multiplier * 2^(-8 (h + 1) / heads)`.
pub fn alibi_slopes(num_heads: usize, multiplier: f64) -> Vec<f64> {
    (0..num_heads)
        .map(|h| multiplier * 2f64.powf(-8.0 * (h + 1) as f64 / num_heads as f64))
        .collect()
}

/// Linear distance penalty `-slope * (p - q)` for query position `p` and key
/// position `q`.
pub fn alibi_bias(p: usize, q: usize, slope: f64) -> Result<f64, AttentionError> {
    if p < q {
        return Err(AttentionError::Acausal { query: p, key: q });
    }
    Ok(-slope * (p - q) as f64)
}

/// Per-pair blend of two key/value streams, `ratio * initial + (1 - ratio) * current`.
/// The ratio is looked up by interaction distance between query and key.
#[derive(Debug, Clone, Copy)]
pub struct PairBlend<'a> {
    pub initial_keys: ArrayView2<'a, f64>,
    pub initial_values: ArrayView2<'a, f64>,
    pub ratio_by_distance: &'a [f64],
}

impl PairBlend<'_> {
    fn ratio(&self, plan: &AttentionPlan, t: usize, s: usize) -> f64 {
        let d = plan.interaction[t] - plan.interaction[s];
        self.ratio_by_distance[d.min(self.ratio_by_distance.len() - 1)]
    }
}

/// Output of the attention kernel. `weights` is laid out per query `t` as
/// `heads` consecutive runs of `plan.keys(t).len()` entries.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Array2<f64>,
    pub weights: Vec<f64>,
}

impl AttentionOutput {
    /// Dense `T x T` weight matrix of one head, zero outside every window.
    pub fn dense_weights(&self, plan: &AttentionPlan, num_heads: usize, head: usize) -> Array2<f64> {
        let len = plan.len();
        let mut dense = Array2::zeros((len, len));
        for t in 0..len {
            let keys = plan.keys(t);
            let base = plan.key_offset(t) * num_heads + head * keys.len();
            for (j, &s) in keys.iter().enumerate() {
                dense[[t, s as usize]] = self.weights[base + j];
            }
        }
        dense
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn row<'a>(m: &'a ArrayView2<'_, f64>, r: usize) -> &'a [f64] {
    let cols = m.ncols();
    &m.as_slice().expect("standard layout")[r * cols..(r + 1) * cols]
}

/// Windowed causal attention over heads laid out as column blocks of width
/// `head_dim`:
///
/// `out_t = sum_{s in window(t)} a_ts V_s`, with `a_ts` the softmax over the
/// window of `Q_t . K_s / sqrt(d_k)` plus the ALiBi bias on biased rows.
pub fn windowed_attention(
    queries: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    values: ArrayView2<'_, f64>,
    plan: &AttentionPlan,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput, AttentionError> {
    attention_forward(queries, keys, values, None, plan, cfg, None)
}

pub(crate) fn attention_forward(
    queries: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    values: ArrayView2<'_, f64>,
    blend: Option<PairBlend<'_>>,
    plan: &AttentionPlan,
    cfg: &AttentionConfig,
    mut counter: Option<&mut MacCounter>,
) -> Result<AttentionOutput, AttentionError> {
    let len = plan.len();
    let dim = cfg.model_dim();
    for (name, m) in [("queries", &queries), ("keys", &keys), ("values", &values)] {
        if m.dim() != (len, dim) {
            return Err(AttentionError::Shape(format!(
                "{name} is {:?}, expected ({len}, {dim})",
                m.dim()
            )));
        }
    }
    let (queries, keys, values) = (
        queries.as_standard_layout(),
        keys.as_standard_layout(),
        values.as_standard_layout(),
    );
    let (queries, keys, values) = (queries.view(), keys.view(), values.view());
    let dh = cfg.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut output = Array2::<f64>::zeros((len, dim));
    let mut weights = vec![0.0; plan.num_pairs() * cfg.num_heads];
    let mut scores = Vec::new();
    let mut ratios = Vec::new();
    let mut pair_macs = 0u64;

    for t in 0..len {
        let window = plan.keys(t);
        if window.is_empty() {
            return Err(AttentionError::EmptyWindow(t));
        }
        let biased = cfg.bias_applies(plan, t);
        ratios.clear();
        if let Some(b) = &blend {
            ratios.extend(window.iter().map(|&s| b.ratio(plan, t, s as usize)));
        }
        let q_row = row(&queries, t);
        let mut out_row = vec![0.0; dim];
        for h in 0..cfg.num_heads {
            let cols = h * dh..(h + 1) * dh;
            let q = &q_row[cols.clone()];
            scores.clear();
            for (j, &s) in window.iter().enumerate() {
                let s = s as usize;
                let mut score = dot(q, &row(&keys, s)[cols.clone()]);
                if let Some(b) = &blend {
                    let initial = dot(q, &row(&b.initial_keys, s)[cols.clone()]);
                    score = ratios[j] * initial + (1.0 - ratios[j]) * score;
                }
                score *= scale;
                if biased {
                    let distance = plan.alibi_positions[t] - plan.alibi_positions[s];
                    score -= cfg.alibi_slopes[h] * distance as f64;
                }
                scores.push(score);
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for score in scores.iter_mut() {
                *score = (*score - max).exp();
                total += *score;
            }
            let base = plan.key_offset(t) * cfg.num_heads + h * window.len();
            let out = &mut out_row[cols.clone()];
            for (j, &s) in window.iter().enumerate() {
                let w = scores[j] / total;
                weights[base + j] = w;
                let s = s as usize;
                match &blend {
                    None => axpy(w, &row(&values, s)[cols.clone()], out),
                    Some(b) => {
                        axpy(w * ratios[j], &row(&b.initial_values, s)[cols.clone()], out);
                        axpy(w * (1.0 - ratios[j]), &row(&values, s)[cols.clone()], out);
                    }
                }
            }
        }
        output.row_mut(t).as_slice_mut().expect("standard layout").copy_from_slice(&out_row);
        pair_macs += window.len() as u64;
    }
    if let Some(counter) = counter.as_deref_mut() {
        let per_pair = if blend.is_some() { 4 } else { 2 };
        counter.attention += pair_macs * (per_pair * dim) as u64;
    }
    Ok(AttentionOutput { output, weights })
}

/// Gradients of the attention kernel inputs.
pub(crate) struct AttentionGrads {
    pub queries: Array2<f64>,
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
    pub initial_keys: Option<Array2<f64>>,
    pub initial_values: Option<Array2<f64>>,
}

pub(crate) fn attention_backward(
    grad_output: ArrayView2<'_, f64>,
    queries: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    values: ArrayView2<'_, f64>,
    blend: Option<PairBlend<'_>>,
    forward: &AttentionOutput,
    plan: &AttentionPlan,
    cfg: &AttentionConfig,
) -> AttentionGrads {
    let len = plan.len();
    let dim = cfg.model_dim();
    let dh = cfg.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::<f64>::zeros((len, dim));
    let mut dk = Array2::<f64>::zeros((len, dim));
    let mut dv = Array2::<f64>::zeros((len, dim));
    let mut dk0 = blend.map(|_| Array2::<f64>::zeros((len, dim)));
    let mut dv0 = blend.map(|_| Array2::<f64>::zeros((len, dim)));
    let grad_output = grad_output.as_standard_layout();
    let grad_output = grad_output.view();

    let dk_s = dk.as_slice_mut().expect("standard layout");
    let dv_s = dv.as_slice_mut().expect("standard layout");
    let mut dk0_s = dk0.as_mut().map(|m| m.as_slice_mut().expect("standard layout"));
    let mut dv0_s = dv0.as_mut().map(|m| m.as_slice_mut().expect("standard layout"));

    let mut dweights = Vec::new();
    let mut ratios = Vec::new();
    for t in 0..len {
        let window = plan.keys(t);
        ratios.clear();
        if let Some(b) = &blend {
            ratios.extend(window.iter().map(|&s| b.ratio(plan, t, s as usize)));
        }
        let go_row = row(&grad_output, t);
        let q_row = row(&queries, t);
        let mut dq_row = vec![0.0; dim];
        for h in 0..cfg.num_heads {
            let cols = h * dh..(h + 1) * dh;
            let go = &go_row[cols.clone()];
            let q = &q_row[cols.clone()];
            let base = plan.key_offset(t) * cfg.num_heads + h * window.len();
            let w = &forward.weights[base..base + window.len()];

            dweights.clear();
            for (j, &s) in window.iter().enumerate() {
                let s = s as usize;
                let current = dot(go, &row(&values, s)[cols.clone()]);
                let dw = match &blend {
                    None => current,
                    Some(b) => {
                        let initial = dot(go, &row(&b.initial_values, s)[cols.clone()]);
                        ratios[j] * initial + (1.0 - ratios[j]) * current
                    }
                };
                dweights.push(dw);
                let off = s * dim + h * dh;
                match (&blend, dv0_s.as_deref_mut()) {
                    (Some(_), Some(dv0)) => {
                        axpy(w[j] * ratios[j], go, &mut dv0[off..off + dh]);
                        axpy(w[j] * (1.0 - ratios[j]), go, &mut dv_s[off..off + dh]);
                    }
                    _ => axpy(w[j], go, &mut dv_s[off..off + dh]),
                }
            }
            let weighted: f64 = w.iter().zip(&dweights).map(|(a, b)| a * b).sum();
            let dq_h = &mut dq_row[cols.clone()];
            for (j, &s) in window.iter().enumerate() {
                let s = s as usize;
                let dscore = w[j] * (dweights[j] - weighted) * scale;
                let off = s * dim + h * dh;
                match (&blend, dk0_s.as_deref_mut()) {
                    (Some(b), Some(dk0)) => {
                        let r = ratios[j];
                        axpy(dscore * r, &row(&b.initial_keys, s)[cols.clone()], dq_h);
                        axpy(dscore * (1.0 - r), &row(&keys, s)[cols.clone()], dq_h);
                        axpy(dscore * r, q, &mut dk0[off..off + dh]);
                        axpy(dscore * (1.0 - r), q, &mut dk_s[off..off + dh]);
                    }
                    _ => {
                        axpy(dscore, &row(&keys, s)[cols.clone()], dq_h);
                        axpy(dscore, q, &mut dk_s[off..off + dh]);
                    }
                }
            }
        }
        dq.row_mut(t).as_slice_mut().expect("standard layout").copy_from_slice(&dq_row);
    }
    AttentionGrads {
        queries: dq,
        keys: dk,
        values: dv,
        initial_keys: dk0,
        initial_values: dv0,
    }
}

/// Adds absolute position vectors or applies the pairwise rotation to every row
/// with a position id. Rows whose id is `None` (position-free `[SUM]` tokens)
/// are left untouched in every mode.
///
/// The rotation turns dims `(2i, 2i + 1)` by `p * base^(-2i / dim)`.
pub fn apply_positional_encoding(
    embeddings: &mut Array2<f64>,
    position_ids: &[Option<usize>],
    mode: PositionalMode,
    position_table: Option<ArrayView2<'_, f64>>,
    rope_base: f64,
) -> Result<(), AttentionError> {
    match mode {
        PositionalMode::None => Ok(()),
        PositionalMode::Absolute => {
            let table = position_table
                .ok_or_else(|| AttentionError::Shape("absolute mode needs a position table".into()))?;
            for (t, position) in position_ids.iter().enumerate() {
                if let Some(p) = *position {
                    if p >= table.nrows() {
                        return Err(AttentionError::PositionOutOfRange {
                            position: p,
                            rows: table.nrows(),
                        });
                    }
                    let mut target = embeddings.row_mut(t);
                    target += &table.row(p);
                }
            }
            Ok(())
        }
        PositionalMode::Rope => rotate_rows(embeddings.view_mut(), position_ids, rope_base, false),
    }
}

/// Rotates row pairs by `+angle` (or `-angle` when `inverse`). The inverse
/// rotation is the transpose, which is what the backward pass needs.
pub fn rotate_rows(
    mut rows: ArrayViewMut2<'_, f64>,
    position_ids: &[Option<usize>],
    base: f64,
    inverse: bool,
) -> Result<(), AttentionError> {
    let dim = rows.ncols();
    if !dim.is_multiple_of(2) {
        return Err(AttentionError::OddRopeDimension(dim));
    }
    let frequencies: Vec<f64> = (0..dim / 2)
        .map(|i| base.powf(-2.0 * i as f64 / dim as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    for (t, position) in position_ids.iter().enumerate() {
        let Some(p) = *position else { continue };
        let mut r = rows.row_mut(t);
        for (i, &theta) in frequencies.iter().enumerate() {
            let (sin, cos) = (sign * p as f64 * theta).sin_cos();
            let (a, b) = (r[2 * i], r[2 * i + 1]);
            r[2 * i] = a * cos - b * sin;
            r[2 * i + 1] = a * sin + b * cos;
        }
    }
    Ok(())
}

/// Span `[lo, hi]` of layer-0 positions that can influence token `token` after
/// `layer` attention layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub token: usize,
    pub layer: usize,
    pub lo: usize,
    pub hi: usize,
}

impl ReceptiveField {
    /// Closed-form span for a uniform token-level window of width `window_tokens`:
    /// `lo = max(0, t - layer * window_tokens)`.
    pub fn uniform(token: usize, layer: usize, window_tokens: usize) -> Self {
        ReceptiveField {
            token,
            layer,
            lo: token.saturating_sub(layer * window_tokens),
            hi: token,
        }
    }

    pub fn contains(&self, position: usize) -> bool {
        (self.lo..=self.hi).contains(&position)
    }
}

/// Exact structural receptive field of token `t` after `layer` layers: each
/// layer lets every position reached so far pull in its attendable keys.
/// Masked keys (`[SUM]`, `[PAD]`) never relay information to other tokens.
pub fn receptive_field(t: usize, layer: usize, plan: &AttentionPlan) -> ReceptiveField {
    assert!(layer >= 1, "receptive field is defined for layer >= 1");
    let mut lo = t;
    for _ in 0..layer {
        let mut next = lo;
        for u in lo..=t {
            if u != t && !plan.sum_key_mask[u] {
                continue;
            }
            if let Some(&first) = plan.keys(u).first() {
                next = next.min(first as usize);
            }
        }
        lo = next;
    }
    ReceptiveField {
        token: t,
        layer,
        lo,
        hi: t,
    }
}

/// Writes a dense matrix as `rows cols` followed by one whitespace-separated
/// row per line.
pub fn write_matrix<W: Write>(mut writer: W, matrix: &Array2<f64>) -> std::io::Result<()> {
    writeln!(writer, "{} {}", matrix.nrows(), matrix.ncols())?;
    for r in matrix.rows() {
        let line: Vec<String> = r.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(writer, "{}", line.join(" "))?;
    }
    Ok(())
}
