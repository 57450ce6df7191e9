//! Optimization loop, evaluation and the finite-difference gradient check.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SplitDataset;
use crate::flops::MacCounter;
use crate::metrics::{EpochRecord, MetricsReport};
use crate::model::{
    batch_loss, compute_gradients, forward, Example, GradientOptions, LossWeighting, ModelError, ModelParams,
};
use crate::prompt::{
    build_streaming_prompts, compute_attention_plan, sliding_window_prompts, tokenize_prompt, AttentionPlan,
    Prompt, PromptError, PromptingConfig, TokenizedPrompt,
};

/// Relative errors use `max(|analytic|, |numeric|, REL_ERR_FLOOR)` as denominator.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} set is empty")]
    EmptySplit(&'static str),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
        /// Parameters before the failing step.
        last_good: Box<ModelParams>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    #[default]
    SlidingWindow,
    Dti,
}

/// What `batch_size` counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatchUnit {
    Prompts,
    /// Prompts are packed until they hold at least `batch_size` targets, so
    /// both paradigms take a comparable number of optimizer steps.
    #[default]
    Targets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub batch_unit: BatchUnit,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub paradigm: Paradigm,
    /// Targets per streaming prompt; ignored by the sliding-window paradigm.
    pub k: usize,
    pub loss_weighting: LossWeighting,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            warmup_ratio: 0.1,
            weight_decay: 0.001,
            batch_size: 32,
            batch_unit: BatchUnit::Targets,
            max_epochs: 10,
            patience: 2,
            seed: 0,
            paradigm: Paradigm::SlidingWindow,
            k: 1,
            loss_weighting: LossWeighting::PerPrompt,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.paradigm == Paradigm::Dti && self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0) || !(0.0..=1.0).contains(&self.warmup_ratio) || self.weight_decay < 0.0 {
            return bad("learning_rate, warmup_ratio and weight_decay must be non-negative (warmup_ratio <= 1)".into());
        }
        Ok(())
    }
}

/// A tokenized prompt with its attention plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPrompt {
    pub prompt: TokenizedPrompt,
    pub plan: AttentionPlan,
}

impl PreparedPrompt {
    pub fn new(prompt: &Prompt, split: &SplitDataset, cfg: &PromptingConfig) -> Result<Self, PromptError> {
        let tp = tokenize_prompt(prompt, &split.vocabulary, cfg)?;
        let plan = compute_attention_plan(&tp, cfg);
        Ok(PreparedPrompt { prompt: tp, plan })
    }

    pub fn example(&self) -> Example<'_> {
        Example::new(&self.prompt, &self.plan)
    }

    pub fn num_targets(&self) -> usize {
        self.prompt.sum_positions.len()
    }
}

/// Training prompts over each user's training interactions.
pub fn training_prompts(
    split: &SplitDataset,
    cfg: &PromptingConfig,
    paradigm: Paradigm,
    k: usize,
) -> Result<Vec<PreparedPrompt>, TrainError> {
    let mut out = Vec::new();
    for user in &split.users {
        let seq = user.train_sequence();
        let prompts = match paradigm {
            Paradigm::SlidingWindow => sliding_window_prompts(&seq, cfg.n, cfg.n..seq.len())?,
            Paradigm::Dti => build_streaming_prompts(&seq, &PromptingConfig { k, ..cfg.clone() }),
        };
        for p in &prompts {
            out.push(PreparedPrompt::new(p, split, cfg)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Validation,
    Test,
}

/// Single-target sliding-window prompts for every validation or test target.
pub fn evaluation_prompts(
    split: &SplitDataset,
    cfg: &PromptingConfig,
    which: EvalSplit,
) -> Result<Vec<PreparedPrompt>, TrainError> {
    let mut out = Vec::new();
    for user in &split.users {
        let range = match which {
            EvalSplit::Validation => user.val_range(),
            EvalSplit::Test => user.test_range(),
        };
        for p in &sliding_window_prompts(&user.sequence, cfg.n, range)? {
            out.push(PreparedPrompt::new(p, split, cfg)?);
        }
    }
    Ok(out)
}

/// Scores and labels for every `[SUM]` in `prompts`.
pub fn score_prompts(params: &ModelParams, prompts: &[PreparedPrompt]) -> Result<(Vec<f64>, Vec<bool>), TrainError> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for p in prompts {
        scores.extend(forward(params, &p.prompt, &p.plan)?.scores());
        labels.extend_from_slice(&p.prompt.labels);
    }
    Ok((scores, labels))
}

pub fn evaluate(params: &ModelParams, prompts: &[PreparedPrompt]) -> Result<MetricsReport, TrainError> {
    if prompts.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let start = Instant::now();
    let (scores, labels) = score_prompts(params, prompts)?;
    let mut report = MetricsReport::from_scores(&scores, &labels);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Linear warm-up over `ceil(warmup_ratio * total)` steps, then cosine decay
/// to zero. `step` is 1-based.
pub fn learning_rate_at(step: usize, total_steps: usize, base: f64, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step <= warmup {
        return base * step as f64 / warmup as f64;
    }
    let decay_steps = total_steps.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / decay_steps as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay, `theta <- theta (1 - lr wd)` before the
/// moment update.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(num_params: usize, cfg: &TrainConfig) -> Self {
        AdamW {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *p *= decay;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / bias1) / ((*v / bias2).sqrt() + self.eps);
        }
    }
}

fn make_batches(order: &[usize], prompts: &[PreparedPrompt], cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut filled = 0;
    for &i in order {
        current.push(i);
        filled += match cfg.batch_unit {
            BatchUnit::Prompts => 1,
            BatchUnit::Targets => prompts[i].num_targets(),
        };
        if filled >= cfg.batch_size {
            batches.push(std::mem::take(&mut current));
            filled = 0;
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation AUC.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
    /// Forward-pass MACs and token counts of every training step.
    pub counter: MacCounter,
    pub train_seconds: f64,
}

pub fn train(
    initial: ModelParams,
    train_set: &[PreparedPrompt],
    val_set: &[PreparedPrompt],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = initial;
    let mut optimizer = AdamW::new(params.data.len(), cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let steps_per_epoch = make_batches(&order, train_set, cfg).len();
    let total_steps = steps_per_epoch * cfg.max_epochs;

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut stale = 0;
    let mut step = 0;
    let mut counter = MacCounter::default();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let batches = make_batches(&order, train_set, cfg);
        let mut loss_sum = 0.0;
        for batch in &batches {
            step += 1;
            let examples: Vec<Example> = batch.iter().map(|&i| train_set[i].example()).collect();
            let result = compute_gradients(
                &params,
                &examples,
                GradientOptions {
                    weighting: cfg.loss_weighting,
                    scale: None,
                    counter: Some(&mut counter),
                    dropout_rng: Some(&mut rng),
                },
            );
            let diverged = |reason: String, params: &ModelParams| TrainError::Diverged {
                epoch,
                step,
                reason,
                last_good: Box::new(params.clone()),
            };
            let (loss, grads) = match result {
                Ok(r) => r,
                Err(e @ (ModelError::NonFinite { .. } | ModelError::NonFiniteGradient(_))) => {
                    return Err(diverged(e.to_string(), &params))
                }
                Err(e) => return Err(e.into()),
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss}"), &params));
            }
            loss_sum += loss;
            let lr = learning_rate_at(step, total_steps, cfg.learning_rate, cfg.warmup_ratio);
            optimizer.step(&mut params.data, &grads, lr);
        }
        let val = evaluate(&params, val_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_auc: val.auc,
            val_log_loss: val.log_loss,
        };
        log::info!(
            "epoch {epoch}: train loss {:.5}, val auc {:?}, val log loss {:.5}",
            record.train_loss,
            record.val_auc,
            record.val_log_loss
        );
        history.push(record);
        let score = val.auc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
        steps: step,
        counter,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub eps: f64,
    pub max_relative_error: f64,
    /// `(tensor name, max relative error, samples)`.
    pub per_tensor: Vec<(String, f64, usize)>,
}

/// Central differences on `samples_per_tensor` random coordinates of every
/// tensor versus the analytic gradient of the batch loss.
pub fn finite_difference_check(
    params: &ModelParams,
    batch: &[Example<'_>],
    eps: f64,
    samples_per_tensor: usize,
    seed: u64,
    weighting: LossWeighting,
) -> Result<GradientCheckReport, TrainError> {
    let (_, grads) = compute_gradients(
        params,
        batch,
        GradientOptions {
            weighting,
            ..GradientOptions::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut per_tensor = Vec::new();
    let mut max_relative_error: f64 = 0.0;
    for spec in &params.layout.tensors {
        let samples = samples_per_tensor.min(spec.len());
        let mut indices: Vec<usize> = (0..spec.len()).collect();
        indices.shuffle(&mut rng);
        let mut worst: f64 = 0.0;
        for &j in &indices[..samples] {
            let i = spec.offset + j;
            let original = probe.data[i];
            probe.data[i] = original + eps;
            let plus = batch_loss(&probe, batch, weighting)?;
            probe.data[i] = original - eps;
            let minus = batch_loss(&probe, batch, weighting)?;
            probe.data[i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            worst = worst.max(err);
        }
        max_relative_error = max_relative_error.max(worst);
        per_tensor.push((spec.name.clone(), worst, samples));
    }
    Ok(GradientCheckReport {
        eps,
        max_relative_error,
        per_tensor,
    })
}
