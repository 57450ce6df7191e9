//! Analytic training-cost formulas and an instrumented multiply-accumulate
//! counter.
//!
//! The analytic model prices one layer of a length-`T` pass over window `W` as
//! `T * W * d + T * d^2`, counted twice for forward plus backward. The
//! instrumented counter instead records every matmul MAC the model performs,
//! with attention restricted to structural non-zero window entries.

use std::fmt::Write as _;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ResetGranularity};
use crate::prompt::{AttentionPlan, TokenizedPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelInputs {
    /// Interactions per user sequence.
    pub m: usize,
    /// Context interactions.
    pub n: usize,
    /// Targets per streaming prompt.
    pub k: usize,
    /// Tokens per sliding-window prompt.
    pub big_n: usize,
    /// Extra tokens contributed by the `k` targets of a streaming prompt.
    pub big_k: usize,
    pub layers: usize,
    pub d_model: usize,
    /// Tokens per interaction.
    pub c: usize,
}

impl CostModelInputs {
    /// Uniform accounting: `N = n c` and `K = k c`.
    pub fn uniform(m: usize, n: usize, k: usize, c: usize, layers: usize, d_model: usize) -> Self {
        CostModelInputs {
            m,
            n,
            k,
            big_n: n * c,
            big_k: k * c,
            layers,
            d_model,
            c,
        }
    }

    /// Token counts taken from real tokenized prompts: `N` is the mean
    /// sliding-window prompt length and `K` the mean streaming prompt length
    /// minus `N`.
    pub fn from_token_counts(self, sw_tokens_per_prompt: f64, dti_tokens_per_prompt: f64) -> Self {
        let big_n = sw_tokens_per_prompt.round() as usize;
        CostModelInputs {
            big_n,
            big_k: (dti_tokens_per_prompt.round() as usize).saturating_sub(big_n),
            ..self
        }
    }
}

/// How many streaming prompts a sequence yields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptCount {
    /// `m / k`, the large-`m` approximation.
    Approximate,
    /// `ceil((m - n) / k)`, every target covered exactly once.
    Exact,
}

fn per_layer(tokens: f64, window: f64, d: f64) -> f64 {
    tokens * window * d + tokens * d * d
}

/// `(m - n) * 2L * (N^2 d + N d^2)`.
pub fn sliding_window_flops(inputs: &CostModelInputs) -> f64 {
    let n = inputs.big_n as f64;
    let d = inputs.d_model as f64;
    (inputs.m - inputs.n) as f64 * 2.0 * inputs.layers as f64 * per_layer(n, n, d)
}

/// `P * 2L * ((N + K) N d + (N + K) d^2)` with `P` prompts per sequence.
pub fn dti_flops(inputs: &CostModelInputs, count: PromptCount) -> f64 {
    let prompts = match count {
        PromptCount::Approximate => inputs.m as f64 / inputs.k as f64,
        PromptCount::Exact => (inputs.m - inputs.n).div_ceil(inputs.k) as f64,
    };
    let n = inputs.big_n as f64;
    let total = (inputs.big_n + inputs.big_k) as f64;
    prompts * 2.0 * inputs.layers as f64 * per_layer(total, n, inputs.d_model as f64)
}

/// `N k / (N + K)`.
pub fn reduction_ratio(big_n: usize, big_k: usize, k: usize) -> f64 {
    (big_n * k) as f64 / (big_n + big_k) as f64
}

/// Per-category multiply-accumulate tally of forward passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounter {
    /// Projection and feed-forward matmuls.
    pub linear: u64,
    /// Score and value products over attendable pairs.
    pub attention: u64,
    /// Element-wise per-token reset blending.
    pub blend: u64,
    /// Vocabulary projection at `[SUM]` rows.
    pub output: u64,
    /// Tokens fed through the model, padding included.
    pub tokens: u64,
    /// `[SUM]` positions scored.
    pub targets: u64,
    pub forward_passes: u64,
}

impl MacCounter {
    pub fn forward_macs(&self) -> u64 {
        self.linear + self.attention + self.blend + self.output
    }

    /// Forward plus backward, priced at twice the forward count.
    pub fn training_macs(&self) -> u64 {
        2 * self.forward_macs()
    }

    pub fn tokens_per_target(&self) -> f64 {
        self.tokens as f64 / self.targets.max(1) as f64
    }
}

impl AddAssign for MacCounter {
    fn add_assign(&mut self, other: Self) {
        self.linear += other.linear;
        self.attention += other.attention;
        self.blend += other.blend;
        self.output += other.output;
        self.tokens += other.tokens;
        self.targets += other.targets;
        self.forward_passes += other.forward_passes;
    }
}

/// MACs of one forward pass derived from the plan alone. Matches the
/// instrumented forward exactly.
pub fn structural_macs(tp: &TokenizedPrompt, plan: &AttentionPlan, cfg: &ModelConfig) -> MacCounter {
    let t = tp.len() as u64;
    let d = cfg.d_model as u64;
    let ff = cfg.ff_dim as u64;
    let pairs = plan.num_pairs() as u64;
    let mut counter = MacCounter {
        tokens: t,
        targets: tp.sum_positions.len() as u64,
        forward_passes: 1,
        output: tp.sum_positions.len() as u64 * d * cfg.vocab_size as u64,
        ..MacCounter::default()
    };
    for layer in 1..=cfg.num_layers {
        counter.linear += 4 * t * d * d + 2 * t * d * ff;
        let mut per_pair = 2 * d;
        if cfg.reset.is_active(layer, cfg.num_layers) {
            match cfg.reset.granularity {
                ResetGranularity::PerQuery => {
                    counter.linear += 2 * t * d * d;
                    per_pair = 4 * d;
                }
                ResetGranularity::PerToken => counter.blend += t * d,
            }
        }
        counter.attention += pairs * per_pair;
    }
    counter
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub inputs: CostModelInputs,
    /// Inputs with `N`, `K` taken from the measured prompts.
    pub token_inputs: CostModelInputs,
    pub analytic_sw: f64,
    pub analytic_dti: f64,
    /// `N k / (N + K)` with uniform token accounting.
    pub analytic_reduction: f64,
    /// Same formula on the measured prompt token counts.
    pub token_reduction: f64,
    /// `sliding_window_flops / dti_flops` with the exact prompt count.
    pub exact_count_reduction: f64,
    pub measured_sw: u64,
    pub measured_dti: u64,
    pub measured_reduction: f64,
    /// `(measured - analytic) / analytic` reduction.
    pub relative_gap: f64,
}

impl FlopsReport {
    pub fn new(inputs: CostModelInputs, token_inputs: CostModelInputs, sw: &MacCounter, dti: &MacCounter) -> Self {
        let analytic_reduction = reduction_ratio(inputs.big_n, inputs.big_k, inputs.k);
        let measured_sw = sw.training_macs();
        let measured_dti = dti.training_macs();
        let measured_reduction = measured_sw as f64 / measured_dti as f64;
        FlopsReport {
            inputs,
            token_inputs,
            analytic_sw: sliding_window_flops(&inputs),
            analytic_dti: dti_flops(&inputs, PromptCount::Approximate),
            analytic_reduction,
            token_reduction: reduction_ratio(token_inputs.big_n, token_inputs.big_k, token_inputs.k),
            exact_count_reduction: sliding_window_flops(&inputs) / dti_flops(&inputs, PromptCount::Exact),
            measured_sw,
            measured_dti,
            measured_reduction,
            relative_gap: (measured_reduction - analytic_reduction) / analytic_reduction,
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let i = &self.inputs;
        let _ = writeln!(
            out,
            "m={} n={} k={} c={} L={} d={} N={} K={} (measured N={} K={})",
            i.m, i.n, i.k, i.c, i.layers, i.d_model, i.big_n, i.big_k, self.token_inputs.big_n, self.token_inputs.big_k
        );
        let _ = writeln!(out, "{:<28}{:>18}{:>18}{:>12}", "", "sliding window", "dti", "reduction");
        let _ = writeln!(
            out,
            "{:<28}{:>18.0}{:>18.0}{:>12.4}",
            "analytic", self.analytic_sw, self.analytic_dti, self.analytic_reduction
        );
        let _ = writeln!(out, "{:<28}{:>18}{:>18}{:>12.4}", "analytic, exact prompt count", "", "", self.exact_count_reduction);
        let _ = writeln!(out, "{:<28}{:>18}{:>18}{:>12.4}", "analytic, measured tokens", "", "", self.token_reduction);
        let _ = writeln!(
            out,
            "{:<28}{:>18}{:>18}{:>12.4}",
            "measured MACs", self.measured_sw, self.measured_dti, self.measured_reduction
        );
        let _ = writeln!(out, "relative gap: {:+.2}%", 100.0 * self.relative_gap);
        out
    }
}
