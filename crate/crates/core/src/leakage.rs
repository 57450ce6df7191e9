//! Hidden-state leakage sensitivity curves, the positional slot probe and the
//! fix-ablation grid.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{InteractionSequence, SplitDataset};
use crate::model::{forward_with, ForwardOptions, ModelConfig, ModelError, ModelParams};
use crate::prompt::{streaming_prompts, PromptError, PromptingConfig, SumPositions, TokenKind};
use crate::train::{
    evaluate, evaluation_prompts, train, training_prompts, EvalSplit, Paradigm, PreparedPrompt, TrainConfig,
    TrainError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// `[SUM]` index inside the prompt; `None` picks the last one.
    pub sum_index: Option<usize>,
    pub eps: f64,
    /// Random unit directions averaged per interaction.
    pub directions: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            sum_index: None,
            eps: 1e-4,
            directions: 4,
            seed: 0,
        }
    }
}

/// Mean absolute directional derivative of a `[SUM]` yes-logit with respect to
/// the mean embedding of the interaction at each distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub n: usize,
    /// Interaction distances `1..=2n` that exist in the prompt.
    pub distances: Vec<usize>,
    pub values: Vec<f64>,
}

impl SensitivityCurve {
    pub fn value_at(&self, d: usize) -> Option<f64> {
        self.distances.iter().position(|&x| x == d).map(|i| self.values[i])
    }

    /// Largest value over distances in `(lo, hi]`.
    pub fn max_in(&self, lo: usize, hi: usize) -> f64 {
        self.points_in(lo, hi).fold(0.0, |m, v| m.max(v))
    }

    /// Sum of values over distances in `(lo, hi]`.
    pub fn area_in(&self, lo: usize, hi: usize) -> f64 {
        self.points_in(lo, hi).sum()
    }

    fn points_in(&self, lo: usize, hi: usize) -> impl Iterator<Item = f64> + '_ {
        self.distances
            .iter()
            .zip(&self.values)
            .filter(move |(&d, _)| d > lo && d <= hi)
            .map(|(_, &v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("distance,sensitivity\n");
        for (d, v) in self.distances.iter().zip(&self.values) {
            let _ = writeln!(out, "{d},{v:e}");
        }
        out
    }
}

/// Central finite differences of the chosen `[SUM]`'s yes-logit. Every
/// non-`[SUM]` token of an interaction is shifted by the same vector, which
/// shifts the interaction's mean embedding by that vector.
pub fn sensitivity_curve(
    params: &ModelParams,
    prepared: &PreparedPrompt,
    probe: &ProbeConfig,
) -> Result<SensitivityCurve, ModelError> {
    let tp = &prepared.prompt;
    let plan = &prepared.plan;
    let n = plan.n;
    let d = params.config.d_model;
    let sum = probe.sum_index.unwrap_or(tp.sum_positions.len().saturating_sub(1));
    let target = tp.target_interactions[sum];
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let directions: Vec<Vec<f64>> = (0..probe.directions)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    let yes_logit = |offsets: &Array2<f64>| -> Result<f64, ModelError> {
        let out = forward_with(
            params,
            tp,
            plan,
            ForwardOptions {
                input_offsets: Some(offsets.view()),
                ..ForwardOptions::default()
            },
        )?;
        Ok(out.sum_logits.yes[sum])
    };

    let mut distances = Vec::new();
    let mut values = Vec::new();
    for dist in 1..=(2 * n).min(target) {
        let interaction = target - dist;
        let rows: Vec<usize> = (0..tp.len())
            .filter(|&t| tp.interaction[t] == interaction && tp.kinds[t] != TokenKind::Sum)
            .collect();
        let mut total = 0.0;
        for dir in &directions {
            let mut plus = Array2::zeros((tp.len(), d));
            for &t in &rows {
                for (j, &x) in dir.iter().enumerate() {
                    plus[[t, j]] = probe.eps * x;
                }
            }
            let minus = -&plus;
            total += ((yes_logit(&plus)? - yes_logit(&minus)?) / (2.0 * probe.eps)).abs();
        }
        distances.push(dist);
        values.push(total / directions.len() as f64);
    }
    Ok(SensitivityCurve { n, distances, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Max over pairs and slots of `|score_j - score_sliding_window|`.
    pub divergence: f64,
    pub mean_divergence: f64,
    /// Max divergence per slot `j = 1..`.
    pub per_slot: Vec<f64>,
    pub pairs: usize,
}

/// Re-embeds each (target, context) pair as the `j`-th target of a streaming
/// prompt over the same `n + 1` interactions (the last `j` of them become
/// targets) and compares its score with the single-target sliding-window
/// score. Slots run over `1..=max_slot.min(n + 1)`.
pub fn positional_probe(
    params: &ModelParams,
    split: &SplitDataset,
    cfg: &PromptingConfig,
    max_slot: usize,
    max_pairs: usize,
) -> Result<ProbeResult, TrainError> {
    let n = cfg.n;
    let slots = max_slot.min(n + 1).max(1);
    let mut per_slot = vec![0.0f64; slots];
    let mut total = 0.0;
    let mut count = 0usize;
    let mut pairs = 0usize;
    'users: for user in &split.users {
        for target in user.val_range() {
            if pairs >= max_pairs {
                break 'users;
            }
            let window: InteractionSequence = InteractionSequence {
                user_id: user.sequence.user_id,
                interactions: user.sequence.interactions[target - n..=target].to_vec(),
            };
            let reference = probe_score(params, split, cfg, &window, n, 1)?;
            for j in 1..=slots {
                let score = probe_score(params, split, cfg, &window, n + 1 - j, j)?;
                let gap = (score - reference).abs();
                per_slot[j - 1] = per_slot[j - 1].max(gap);
                total += gap;
                count += 1;
            }
            pairs += 1;
        }
    }
    Ok(ProbeResult {
        divergence: per_slot.iter().copied().fold(0.0, f64::max),
        mean_divergence: total / count.max(1) as f64,
        per_slot,
        pairs,
    })
}

fn probe_score(
    params: &ModelParams,
    split: &SplitDataset,
    cfg: &PromptingConfig,
    window: &InteractionSequence,
    context: usize,
    targets: usize,
) -> Result<f64, TrainError> {
    let prompt = streaming_prompts(window, context, targets, context..window.len())?
        .pop()
        .ok_or(PromptError::InvalidRange {
            start: context,
            end: window.len(),
            len: window.len(),
            n: context,
        })?;
    let prepared = PreparedPrompt::new(&prompt, split, cfg)?;
    let out = forward_with(params, &prepared.prompt, &prepared.plan, ForwardOptions::default())?;
    Ok(*out.sum_logits.scores().last().expect("at least one target"))
}

/// Which bottleneck fixes a training run applies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub reset: bool,
    /// Position-free `[SUM]` tokens with ALiBi.
    pub positional_fix: bool,
}

impl AblationVariant {
    pub fn standard() -> Vec<AblationVariant> {
        [
            ("both_fixes", true, true),
            ("positional_fix_only", false, true),
            ("reset_only", true, false),
            ("no_fixes", false, false),
        ]
        .into_iter()
        .map(|(name, reset, positional_fix)| AblationVariant {
            name: name.into(),
            reset,
            positional_fix,
        })
        .collect()
    }

    pub fn apply(&self, model: &ModelConfig, prompting: &PromptingConfig) -> (ModelConfig, PromptingConfig) {
        let mut model = model.clone();
        model.reset.enabled = self.reset;
        model.alibi.enabled = self.positional_fix;
        let prompting = PromptingConfig {
            sum_positions: if self.positional_fix {
                SumPositions::Free
            } else {
                SumPositions::Encoded
            },
            ..prompting.clone()
        };
        (model, prompting)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub k: usize,
    pub val_auc: Option<f64>,
    pub val_log_loss: Option<f64>,
    pub test_auc: Option<f64>,
    pub test_log_loss: Option<f64>,
    pub test_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub ks: Vec<usize>,
    pub variants: Vec<AblationVariant>,
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn cell(&self, variant: &str, k: usize) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.variant == variant && c.k == k)
    }

    /// Validation AUC per k for one variant, in `ks` order.
    pub fn auc_trend(&self, variant: &str) -> Vec<Option<f64>> {
        self.ks
            .iter()
            .map(|&k| self.cell(variant, k).and_then(|c| c.val_auc))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,k,metric,value\n");
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_owned(), |x| format!("{x}"));
        for c in &self.cells {
            for (metric, value) in [
                ("val_auc", c.val_auc),
                ("val_log_loss", c.val_log_loss),
                ("test_auc", c.test_auc),
                ("test_log_loss", c.test_log_loss),
                ("test_f1", c.test_f1),
            ] {
                let _ = writeln!(out, "{},{},{},{}", c.variant, c.k, metric, fmt(value));
            }
        }
        out
    }
}

/// Shared settings for every training run of a grid.
#[derive(Debug, Clone)]
pub struct GridSettings {
    pub model: ModelConfig,
    pub prompting: PromptingConfig,
    pub train: TrainConfig,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

/// Trains one DTI run and returns its trained parameters with the
/// validation/test prompts it was scored on.
pub fn train_cell(
    split: &SplitDataset,
    settings: &GridSettings,
    variant: &AblationVariant,
    k: usize,
) -> Result<(crate::train::TrainOutcome, PromptingConfig), TrainError> {
    let (model, prompting) = variant.apply(&settings.model, &settings.prompting);
    let train_cfg = TrainConfig {
        paradigm: Paradigm::Dti,
        k,
        ..settings.train.clone()
    };
    let train_set = training_prompts(split, &prompting, Paradigm::Dti, k)?;
    let val = evaluation_prompts(split, &prompting, EvalSplit::Validation)?;
    let params = ModelParams::init(model, settings.init_seed)?;
    Ok((train(params, &train_set, &val, &train_cfg)?, prompting))
}

pub fn run_ablation_grid(
    split: &SplitDataset,
    settings: &GridSettings,
    ks: &[usize],
    variants: &[AblationVariant],
) -> AblationGrid {
    let mut cells = Vec::new();
    for variant in variants {
        for &k in ks {
            let mut cell = AblationCell {
                variant: variant.name.clone(),
                k,
                val_auc: None,
                val_log_loss: None,
                test_auc: None,
                test_log_loss: None,
                test_f1: None,
                best_epoch: None,
                error: None,
            };
            let result = train_cell(split, settings, variant, k).and_then(|(outcome, prompting)| {
                let record = &outcome.history[outcome.best_epoch - 1];
                cell.val_auc = record.val_auc;
                cell.val_log_loss = Some(record.val_log_loss);
                cell.best_epoch = Some(outcome.best_epoch);
                let test = evaluation_prompts(split, &prompting, EvalSplit::Test)?;
                evaluate(&outcome.params, &test)
            });
            match result {
                Ok(report) => {
                    cell.test_auc = report.auc;
                    cell.test_log_loss = Some(report.log_loss);
                    cell.test_f1 = Some(report.f1);
                }
                Err(e) => {
                    log::warn!("ablation cell {} k={k} failed: {e}", variant.name);
                    cell.error = Some(e.to_string());
                }
            }
            cells.push(cell);
        }
    }
    AblationGrid {
        ks: ks.to_vec(),
        variants: variants.to_vec(),
        cells,
    }
}
