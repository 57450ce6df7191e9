//! Sliding-window and streaming prompt construction, tokenization and the
//! attention plan that restricts every token to its preceding `n` interactions.
//!
//! Token layout: interactions are concatenated in chronological order and
//! joined by `[SEP]`. A target interaction is followed by its `[SUM]` token.
//! When `context_labels` is on, every interaction that is not the last one in
//! the prompt also shows its label token (`[YES]`/`[NO]`), placed after the
//! `[SUM]` for targets so a target's own `[SUM]` never sees its label.
//!
//! ```text
//! ctx0 ctx0 [YES] [SEP] ctx1 ctx1 [NO] [SEP] tgt0 tgt0 [SUM] [YES] [SEP] tgt1 tgt1 [SUM]
//! ```

use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Interaction, InteractionSequence, Vocabulary};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("invalid prompting config: {0}")]
    InvalidConfig(String),
    #[error("target range {start}..{end} invalid for sequence of length {len} with n = {n}")]
    InvalidRange {
        start: usize,
        end: usize,
        len: usize,
        n: usize,
    },
    #[error("prompt serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// How `[SUM]` tokens take part in positional numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SumPositions {
    /// `[SUM]` tokens get no position id and are skipped by the numbering of
    /// the other tokens. For ALiBi each `[SUM]` uses the position of its
    /// target's last token plus one.
    #[default]
    Free,
    /// Every token, `[SUM]` included, is numbered consecutively.
    Encoded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptingConfig {
    /// Context interactions per target.
    pub n: usize,
    /// Targets per streaming prompt.
    pub k: usize,
    /// Maximum attention span in tokens.
    pub token_cap: usize,
    /// Show the label token of every non-final interaction.
    pub context_labels: bool,
    pub sum_positions: SumPositions,
}

impl Default for PromptingConfig {
    fn default() -> Self {
        PromptingConfig {
            n: 20,
            k: 1,
            token_cap: 1024,
            context_labels: true,
            sum_positions: SumPositions::Free,
        }
    }
}

impl PromptingConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.n == 0 {
            return Err(PromptError::InvalidConfig("n must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(PromptError::InvalidConfig("k must be >= 1".into()));
        }
        if self.token_cap == 0 {
            return Err(PromptError::InvalidConfig("token_cap must be >= 1".into()));
        }
        Ok(())
    }

    /// Tokens occupied by one interaction with `c` descriptor tokens when it
    /// sits in a context position (descriptors, label, separator).
    pub fn context_interaction_tokens(&self, c: usize) -> usize {
        c + usize::from(self.context_labels) + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub user_id: u64,
    /// Sequence index of the first context interaction.
    pub start_index: usize,
    pub context: Vec<Interaction>,
    pub targets: Vec<Interaction>,
    pub labels: Vec<bool>,
}

impl Prompt {
    fn new(seq: &InteractionSequence, context: Range<usize>, targets: Range<usize>) -> Self {
        let targets_vec = seq.interactions[targets].to_vec();
        Prompt {
            user_id: seq.user_id,
            start_index: context.start,
            labels: targets_vec.iter().map(|i| i.label).collect(),
            context: seq.interactions[context].to_vec(),
            targets: targets_vec,
        }
    }

    pub fn interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.context.iter().chain(&self.targets)
    }

    pub fn num_interactions(&self) -> usize {
        self.context.len() + self.targets.len()
    }

    /// Sequence indices of the targets.
    pub fn target_indices(&self) -> Range<usize> {
        let first = self.start_index + self.context.len();
        first..first + self.targets.len()
    }
}

fn check_range(seq: &InteractionSequence, n: usize, targets: &Range<usize>) -> Result<(), PromptError> {
    if targets.start < n || targets.end > seq.len() || targets.start > targets.end {
        return Err(PromptError::InvalidRange {
            start: targets.start,
            end: targets.end,
            len: seq.len(),
            n,
        });
    }
    Ok(())
}

/// One prompt per target in `targets` (sequence indices), each with the `n`
/// interactions preceding it as context.
pub fn sliding_window_prompts(
    seq: &InteractionSequence,
    n: usize,
    targets: Range<usize>,
) -> Result<Vec<Prompt>, PromptError> {
    check_range(seq, n, &targets)?;
    Ok(targets.map(|j| Prompt::new(seq, j - n..j, j..j + 1)).collect())
}

/// Streaming prompts over `targets`: consecutive chunks of up to `k` targets,
/// each preceded by the `n` interactions before the chunk's first target.
pub fn streaming_prompts(
    seq: &InteractionSequence,
    n: usize,
    k: usize,
    targets: Range<usize>,
) -> Result<Vec<Prompt>, PromptError> {
    check_range(seq, n, &targets)?;
    if k == 0 {
        return Err(PromptError::InvalidConfig("k must be >= 1".into()));
    }
    let mut prompts = Vec::with_capacity(targets.len().div_ceil(k));
    let mut start = targets.start;
    while start < targets.end {
        let end = (start + k).min(targets.end);
        prompts.push(Prompt::new(seq, start - n..start, start..end));
        start = end;
    }
    Ok(prompts)
}

/// All `m - n` sliding-window prompts of a sequence; empty when `m <= n`.
pub fn build_sliding_window_prompts(seq: &InteractionSequence, cfg: &PromptingConfig) -> Vec<Prompt> {
    if seq.len() <= cfg.n {
        log::warn!(
            "user {}: {} interactions cannot fill a context of {}",
            seq.user_id,
            seq.len(),
            cfg.n
        );
        return Vec::new();
    }
    sliding_window_prompts(seq, cfg.n, cfg.n..seq.len()).expect("range checked above")
}

/// All `ceil((m - n) / k)` streaming prompts of a sequence; empty when `m <= n`.
pub fn build_streaming_prompts(seq: &InteractionSequence, cfg: &PromptingConfig) -> Vec<Prompt> {
    if seq.len() <= cfg.n {
        log::warn!(
            "user {}: {} interactions cannot fill a context of {}",
            seq.user_id,
            seq.len(),
            cfg.n
        );
        return Vec::new();
    }
    streaming_prompts(seq, cfg.n, cfg.k.max(1), cfg.n..seq.len()).expect("range checked above")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Descriptor,
    Label,
    Separator,
    Sum,
    Pad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedPrompt {
    pub token_ids: Vec<u32>,
    pub kinds: Vec<TokenKind>,
    /// Interaction ordinal within the prompt for every token. Separators and
    /// label tokens belong to the interaction they follow, `[SUM]` to its
    /// target, padding to `num_interactions`.
    pub interaction: Vec<usize>,
    pub sum_positions: Vec<usize>,
    /// `[YES]`/`[NO]` ids aligned with `sum_positions`.
    pub sum_labels: Vec<u32>,
    pub labels: Vec<bool>,
    /// `None` marks a token without an encoded position.
    pub position_ids: Vec<Option<usize>>,
    /// Position used for ALiBi distances.
    pub alibi_positions: Vec<usize>,
    pub num_interactions: usize,
    /// Interaction ordinal of each target, aligned with `sum_positions`.
    pub target_interactions: Vec<usize>,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn is_sum(&self, t: usize) -> bool {
        self.kinds[t] == TokenKind::Sum
    }

    /// Right-pads with `[PAD]` up to `len` tokens.
    pub fn right_pad(&mut self, len: usize) {
        let mut next_position = self.alibi_positions.last().map_or(0, |p| p + 1);
        while self.token_ids.len() < len {
            self.token_ids.push(Vocabulary::PAD);
            self.kinds.push(TokenKind::Pad);
            self.interaction.push(self.num_interactions);
            self.position_ids.push(Some(next_position));
            self.alibi_positions.push(next_position);
            next_position += 1;
        }
    }

    pub fn write_jsonl<W: Write>(prompts: &[TokenizedPrompt], mut writer: W) -> Result<(), PromptError> {
        for prompt in prompts {
            serde_json::to_writer(&mut writer, prompt)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<TokenizedPrompt>, PromptError> {
        let mut prompts = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            prompts.push(serde_json::from_str(&line)?);
        }
        Ok(prompts)
    }
}

pub fn tokenize_prompt(
    prompt: &Prompt,
    vocab: &Vocabulary,
    cfg: &PromptingConfig,
) -> Result<TokenizedPrompt, PromptError> {
    let total = prompt.num_interactions();
    let first_target = prompt.context.len();
    let mut tp = TokenizedPrompt {
        token_ids: Vec::new(),
        kinds: Vec::new(),
        interaction: Vec::new(),
        sum_positions: Vec::with_capacity(prompt.targets.len()),
        sum_labels: Vec::with_capacity(prompt.targets.len()),
        labels: prompt.labels.clone(),
        position_ids: Vec::new(),
        alibi_positions: Vec::new(),
        num_interactions: total,
        target_interactions: Vec::with_capacity(prompt.targets.len()),
    };
    let mut next_position = 0usize;
    let mut push = |tp: &mut TokenizedPrompt, id: u32, kind: TokenKind, ordinal: usize| {
        let encoded = kind != TokenKind::Sum || cfg.sum_positions == SumPositions::Encoded;
        tp.token_ids.push(id);
        tp.kinds.push(kind);
        tp.interaction.push(ordinal);
        tp.alibi_positions.push(next_position);
        if encoded {
            tp.position_ids.push(Some(next_position));
            next_position += 1;
        } else {
            tp.position_ids.push(None);
        }
    };

    for (ordinal, interaction) in prompt.interactions().enumerate() {
        for token in &interaction.descriptor_tokens {
            let id = vocab
                .id(token)
                .ok_or_else(|| PromptError::UnknownToken(token.clone()))?;
            push(&mut tp, id, TokenKind::Descriptor, ordinal);
        }
        let is_last = ordinal + 1 == total;
        if ordinal >= first_target {
            tp.sum_positions.push(tp.token_ids.len());
            tp.sum_labels.push(Vocabulary::label_id(interaction.label));
            tp.target_interactions.push(ordinal);
            push(&mut tp, Vocabulary::SUM, TokenKind::Sum, ordinal);
        }
        if !is_last {
            if cfg.context_labels {
                push(
                    &mut tp,
                    Vocabulary::label_id(interaction.label),
                    TokenKind::Label,
                    ordinal,
                );
            }
            push(&mut tp, Vocabulary::SEP, TokenKind::Separator, ordinal);
        }
    }
    Ok(tp)
}

/// Structural attention pattern for one tokenized prompt.
///
/// Token `t` may attend key `s` iff `s <= t`, `interaction(t) - interaction(s) <= n`,
/// `t - s < token_cap` and `s` is neither `[SUM]` nor `[PAD]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPlan {
    pub n: usize,
    pub token_cap: usize,
    pub window_start: Vec<usize>,
    /// `false` for tokens that may never be used as keys.
    pub sum_key_mask: Vec<bool>,
    pub is_sum: Vec<bool>,
    pub interaction: Vec<usize>,
    pub alibi_positions: Vec<usize>,
    /// Per token: interactions between it and the nearest target at or after
    /// it (per-token reset granularity).
    pub target_distance: Vec<Option<usize>>,
    key_offsets: Vec<usize>,
    keys: Vec<u32>,
}

impl AttentionPlan {
    pub fn len(&self) -> usize {
        self.window_start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window_start.is_empty()
    }

    /// Attendable keys of query `t`, ascending.
    pub fn keys(&self, t: usize) -> &[u32] {
        &self.keys[self.key_offsets[t]..self.key_offsets[t + 1]]
    }

    /// Index of the first pair of query `t` in pair-aligned buffers.
    pub fn key_offset(&self, t: usize) -> usize {
        self.key_offsets[t]
    }

    /// Total number of attendable (query, key) pairs.
    pub fn num_pairs(&self) -> usize {
        self.keys.len()
    }

    pub fn attendable(&self, q: usize, s: usize) -> bool {
        s <= q && s >= self.window_start[q] && self.sum_key_mask[s]
    }

    /// ALiBi distance `p - q` for an attendable pair.
    pub fn alibi_distance(&self, q: usize, s: usize) -> Option<usize> {
        self.attendable(q, s)
            .then(|| self.alibi_positions[q] - self.alibi_positions[s])
    }

    /// Interaction distance used by per-query blending, for attendable pairs.
    pub fn blend_distance(&self, q: usize, s: usize) -> Option<usize> {
        self.attendable(q, s)
            .then(|| self.interaction[q] - self.interaction[s])
    }

    /// Token-level plan with one token per interaction and no `[SUM]` tokens.
    pub fn from_windows(window_start: Vec<usize>) -> Self {
        let len = window_start.len();
        Self::from_parts(window_start, vec![true; len])
    }

    pub fn from_parts(window_start: Vec<usize>, sum_key_mask: Vec<bool>) -> Self {
        let len = window_start.len();
        let (key_offsets, keys) = build_keys(&window_start, &sum_key_mask);
        AttentionPlan {
            n: len,
            token_cap: len.max(1),
            window_start,
            sum_key_mask,
            is_sum: vec![false; len],
            interaction: (0..len).collect(),
            alibi_positions: (0..len).collect(),
            target_distance: vec![None; len],
            key_offsets,
            keys,
        }
    }
}

fn build_keys(window_start: &[usize], sum_key_mask: &[bool]) -> (Vec<usize>, Vec<u32>) {
    let mut key_offsets = Vec::with_capacity(window_start.len() + 1);
    let mut keys = Vec::new();
    key_offsets.push(0);
    for (t, &start) in window_start.iter().enumerate() {
        keys.extend((start..=t).filter(|&s| sum_key_mask[s]).map(|s| s as u32));
        key_offsets.push(keys.len());
    }
    (key_offsets, keys)
}

pub fn compute_attention_plan(tp: &TokenizedPrompt, cfg: &PromptingConfig) -> AttentionPlan {
    let len = tp.len();
    let n = cfg.n;
    let token_cap = cfg.token_cap.max(1);
    let mut first_token = vec![usize::MAX; tp.num_interactions + 1];
    for (t, &i) in tp.interaction.iter().enumerate() {
        if first_token[i] == usize::MAX {
            first_token[i] = t;
        }
    }
    let window_start: Vec<usize> = (0..len)
        .map(|t| {
            let i = tp.interaction[t];
            let by_interaction = if i >= n { first_token[i - n] } else { 0 };
            by_interaction.max((t + 1).saturating_sub(token_cap))
        })
        .collect();
    let sum_key_mask: Vec<bool> = tp
        .kinds
        .iter()
        .map(|k| !matches!(k, TokenKind::Sum | TokenKind::Pad))
        .collect();

    let mut target_distance = vec![None; len];
    for (t, d) in target_distance.iter_mut().enumerate() {
        let i = tp.interaction[t];
        *d = tp
            .target_interactions
            .iter()
            .find(|&&g| g >= i)
            .map(|&g| g - i);
    }

    let (key_offsets, keys) = build_keys(&window_start, &sum_key_mask);

    AttentionPlan {
        n,
        token_cap,
        window_start,
        sum_key_mask,
        is_sum: tp.kinds.iter().map(|&k| k == TokenKind::Sum).collect(),
        interaction: tp.interaction.clone(),
        alibi_positions: tp.alibi_positions.clone(),
        target_distance,
        key_offsets,
        keys,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sequence(m: usize, c: usize) -> InteractionSequence {
        InteractionSequence {
            user_id: 1,
            interactions: (0..m)
                .map(|j| Interaction {
                    item_id: j as u32,
                    descriptor_tokens: (0..c).map(|s| format!("tok{}", (j + s) % 7)).collect(),
                    label: j % 3 != 0,
                    order_index: j,
                })
                .collect(),
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens((0..7).map(|i| format!("tok{i}")))
    }

    fn cfg(n: usize, k: usize) -> PromptingConfig {
        PromptingConfig {
            n,
            k,
            ..PromptingConfig::default()
        }
    }

    #[test]
    fn sliding_window_counts() {
        assert_eq!(build_sliding_window_prompts(&sequence(1000, 1), &cfg(20, 1)).len(), 980);
        assert_eq!(build_sliding_window_prompts(&sequence(21, 1), &cfg(20, 1)).len(), 1);
        assert!(build_sliding_window_prompts(&sequence(20, 1), &cfg(20, 1)).is_empty());
    }

    #[test]
    fn consecutive_sliding_prompts_share_n_minus_one_context() {
        let prompts = build_sliding_window_prompts(&sequence(40, 1), &cfg(20, 1));
        let a: Vec<usize> = prompts[0].context.iter().map(|i| i.order_index).collect();
        let b: Vec<usize> = prompts[1].context.iter().map(|i| i.order_index).collect();
        let shared = a.iter().filter(|x| b.contains(x)).count();
        assert_eq!(shared, 19);
        assert_eq!(prompts[0].targets[0].order_index, 20);
        assert_eq!(a, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn streaming_counts() {
        let seq = sequence(1000, 1);
        assert_eq!(build_streaming_prompts(&seq, &cfg(20, 50)).len(), 20);
        let prompts = build_streaming_prompts(&seq, &cfg(20, 33));
        assert_eq!(prompts.len(), 30);
        assert_eq!(prompts.last().unwrap().targets.len(), 980 - 29 * 33);
        assert_eq!(prompts.last().unwrap().targets.len(), 23);
    }

    #[test]
    fn streaming_with_k_one_matches_sliding_window() {
        let seq = sequence(50, 2);
        assert_eq!(
            build_streaming_prompts(&seq, &cfg(10, 1)),
            build_sliding_window_prompts(&seq, &cfg(10, 1))
        );
    }

    #[test]
    fn invalid_range_is_rejected() {
        let seq = sequence(30, 1);
        assert!(sliding_window_prompts(&seq, 10, 5..20).is_err());
        assert!(streaming_prompts(&seq, 10, 3, 10..31).is_err());
    }

    #[test]
    fn layout_one_context_one_target() {
        let seq = sequence(2, 2);
        let config = PromptingConfig {
            n: 1,
            context_labels: false,
            ..PromptingConfig::default()
        };
        let prompt = &build_sliding_window_prompts(&seq, &config)[0];
        let tp = tokenize_prompt(prompt, &vocab(), &config).unwrap();
        use TokenKind::*;
        assert_eq!(tp.kinds, vec![Descriptor, Descriptor, Separator, Descriptor, Descriptor, Sum]);
        assert_eq!(tp.sum_positions, vec![5]);
        assert_eq!(tp.token_ids[2], Vocabulary::SEP);
        assert_eq!(tp.token_ids[5], Vocabulary::SUM);
        assert_eq!(tp.interaction, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(tp.position_ids[5], None);
        assert_eq!(tp.alibi_positions[5], 5);
    }

    #[test]
    fn layout_with_context_labels() {
        let seq = sequence(4, 1);
        let config = PromptingConfig {
            n: 2,
            k: 2,
            ..PromptingConfig::default()
        };
        let prompt = &build_streaming_prompts(&seq, &config)[0];
        let tp = tokenize_prompt(prompt, &vocab(), &config).unwrap();
        use TokenKind::*;
        assert_eq!(
            tp.kinds,
            vec![
                Descriptor, Label, Separator, Descriptor, Label, Separator, Descriptor, Sum, Label,
                Separator, Descriptor, Sum
            ]
        );
        // The first target's label token comes after its [SUM].
        assert_eq!(tp.sum_positions, vec![7, 11]);
        assert_eq!(tp.token_ids[8], Vocabulary::label_id(seq.interactions[2].label));
        // Non-[SUM] tokens are numbered consecutively, skipping [SUM].
        assert_eq!(tp.position_ids[6], Some(6));
        assert_eq!(tp.position_ids[7], None);
        assert_eq!(tp.position_ids[8], Some(7));
        assert_eq!(tp.alibi_positions[7], 7);
        assert_eq!(tp.alibi_positions[11], 10);
    }

    #[test]
    fn encoded_sum_positions_are_numbered() {
        let seq = sequence(4, 1);
        let config = PromptingConfig {
            n: 2,
            k: 2,
            sum_positions: SumPositions::Encoded,
            ..PromptingConfig::default()
        };
        let prompt = &build_streaming_prompts(&seq, &config)[0];
        let tp = tokenize_prompt(prompt, &vocab(), &config).unwrap();
        let expected: Vec<Option<usize>> = (0..tp.len()).map(Some).collect();
        assert_eq!(tp.position_ids, expected);
    }

    #[test]
    fn k_sum_tokens_and_label_mapping() {
        let seq = InteractionSequence {
            user_id: 0,
            interactions: [true, true, false, true]
                .iter()
                .enumerate()
                .map(|(j, &label)| Interaction {
                    item_id: j as u32,
                    descriptor_tokens: vec!["tok1".into()],
                    label,
                    order_index: j,
                })
                .collect(),
        };
        let config = cfg(1, 3);
        let prompt = &build_streaming_prompts(&seq, &config)[0];
        let tp = tokenize_prompt(prompt, &vocab(), &config).unwrap();
        assert_eq!(tp.token_ids.iter().filter(|&&t| t == Vocabulary::SUM).count(), 3);
        assert_eq!(
            tp.sum_labels,
            vec![Vocabulary::YES, Vocabulary::NO, Vocabulary::YES]
        );
    }

    #[test]
    fn unknown_token_is_named() {
        let seq = sequence(3, 1);
        let prompt = &build_sliding_window_prompts(&seq, &cfg(1, 1))[0];
        let err = tokenize_prompt(prompt, &Vocabulary::default(), &cfg(1, 1)).unwrap_err();
        assert!(matches!(err, PromptError::UnknownToken(ref t) if t.starts_with("tok")));
    }

    #[test]
    fn window_covers_preceding_n_interactions() {
        // c = 2 plus a separator, no labels: three tokens per context interaction.
        let config = PromptingConfig {
            n: 20,
            k: 10,
            context_labels: false,
            ..PromptingConfig::default()
        };
        let seq = sequence(40, 2);
        let prompt = &build_streaming_prompts(&seq, &config)[0];
        let tp = tokenize_prompt(prompt, &vocab(), &config).unwrap();
        let plan = compute_attention_plan(&tp, &config);
        let t = tp.interaction.iter().position(|&i| i == 25).unwrap();
        assert_eq!(plan.interaction[plan.window_start[t]], 5);
        assert_eq!(
            plan.window_start[t],
            tp.interaction.iter().position(|&i| i == 5).unwrap()
        );
        let keys = plan.keys(t);
        assert!(keys.iter().all(|&s| (5..=25).contains(&plan.interaction[s as usize])));
    }

    #[test]
    fn earlier_sum_is_masked_inside_a_later_window() {
        let config = cfg(2, 3);
        let seq = sequence(5, 1);
        let prompt = &build_streaming_prompts(&seq, &config)[0];
        let tp = tokenize_prompt(prompt, &vocab(), &config).unwrap();
        let plan = compute_attention_plan(&tp, &config);
        let (first, second) = (tp.sum_positions[0], tp.sum_positions[1]);
        assert!(plan.window_start[second] <= first);
        assert!(!plan.sum_key_mask[first]);
        assert!(!plan.keys(second).contains(&(first as u32)));
        for &s in &tp.sum_positions {
            for q in 0..tp.len() {
                assert!(!plan.attendable(q, s));
            }
        }
    }

    #[test]
    fn token_cap_truncates_oldest_tokens() {
        let config = PromptingConfig {
            n: 5,
            k: 1,
            token_cap: 4,
            context_labels: false,
            ..PromptingConfig::default()
        };
        let seq = sequence(6, 2);
        let prompt = &build_sliding_window_prompts(&seq, &config)[0];
        let tp = tokenize_prompt(prompt, &vocab(), &config).unwrap();
        let plan = compute_attention_plan(&tp, &config);
        let last = tp.len() - 1;
        assert_eq!(plan.window_start[last], last + 1 - 4);
    }

    #[test]
    fn padding_is_never_a_key() {
        let config = cfg(2, 2);
        let seq = sequence(6, 1);
        let prompt = &build_streaming_prompts(&seq, &config)[0];
        let mut tp = tokenize_prompt(prompt, &vocab(), &config).unwrap();
        let original = tp.len();
        tp.right_pad(original + 3);
        let plan = compute_attention_plan(&tp, &config);
        for s in original..tp.len() {
            assert!(!plan.sum_key_mask[s]);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let config = cfg(3, 4);
        let seq = sequence(20, 2);
        let prompts: Vec<TokenizedPrompt> = build_streaming_prompts(&seq, &config)
            .iter()
            .map(|p| tokenize_prompt(p, &vocab(), &config).unwrap())
            .collect();
        let mut buffer = Vec::new();
        TokenizedPrompt::write_jsonl(&prompts, &mut buffer).unwrap();
        assert_eq!(buffer.iter().filter(|&&b| b == b'\n').count(), prompts.len());
        let back = TokenizedPrompt::read_jsonl(buffer.as_slice()).unwrap();
        assert_eq!(back, prompts);
    }

    proptest! {
        #[test]
        fn streaming_and_sliding_cover_the_same_targets(m in 2usize..80, n in 1usize..12, k in 1usize..15) {
            prop_assume!(m > n);
            let seq = sequence(m, 1);
            let config = cfg(n, k);
            let sliding = build_sliding_window_prompts(&seq, &config);
            let streaming = build_streaming_prompts(&seq, &config);
            prop_assert_eq!(streaming.len(), (m - n).div_ceil(k));
            prop_assert!(streaming.len() <= sliding.len());
            prop_assert_eq!(streaming.len() == sliding.len(), k == 1 || m - n == 1);

            let mut sliding_pairs: Vec<(usize, Vec<usize>)> = sliding
                .iter()
                .map(|p| (p.targets[0].order_index, p.context.iter().map(|i| i.order_index).collect()))
                .collect();
            let mut streaming_pairs = Vec::new();
            for p in &streaming {
                let all: Vec<usize> = p.interactions().map(|i| i.order_index).collect();
                for (offset, target) in p.targets.iter().enumerate() {
                    let pos = p.context.len() + offset;
                    streaming_pairs.push((target.order_index, all[pos - n..pos].to_vec()));
                }
            }
            sliding_pairs.sort();
            streaming_pairs.sort();
            prop_assert_eq!(sliding_pairs, streaming_pairs);
        }

        #[test]
        fn attendable_set_is_exact(
            n in 1usize..5,
            k in 1usize..6,
            c in 1usize..4,
            cap in 1usize..40,
            labels in any::<bool>(),
        ) {
            let config = PromptingConfig { n, k, token_cap: cap, context_labels: labels, ..PromptingConfig::default() };
            let seq = sequence(n + k, c);
            let prompt = &build_streaming_prompts(&seq, &config)[0];
            let tp = tokenize_prompt(prompt, &vocab(), &config).unwrap();
            let plan = compute_attention_plan(&tp, &config);
            for t in 0..tp.len() {
                let expected: Vec<u32> = (0..tp.len())
                    .filter(|&s| {
                        s <= t
                            && tp.interaction[t] - tp.interaction[s].min(tp.interaction[t]) <= n
                            && t - s.min(t) < cap
                            && !tp.is_sum(s)
                    })
                    .map(|s| s as u32)
                    .collect();
                prop_assert_eq!(plan.keys(t), expected.as_slice());
                for s in 0..tp.len() {
                    prop_assert_eq!(plan.attendable(t, s), expected.contains(&(s as u32)));
                }
            }
            // Strictly increasing [SUM] positions, each right after its target's tokens.
            for w in tp.sum_positions.windows(2) {
                prop_assert!(w[0] < w[1]);
            }
            for (&pos, &target) in tp.sum_positions.iter().zip(&tp.target_interactions) {
                prop_assert_eq!(tp.interaction[pos - 1], target);
                prop_assert_eq!(tp.kinds[pos - 1], TokenKind::Descriptor);
            }
        }
    }
}
