//! Training laboratory for sequential CTR prediction with a small decoder-only
//! transformer.
//!
//! Two training paradigms are implemented side by side:
//!
//! * **sliding window**: one prompt per target, built from its `n` preceding
//!   interactions;
//! * **dynamic target isolation (DTI)**: one streaming prompt per `k` targets,
//!   with windowed causal attention, a `[SUM]` token after every target,
//!   distance-based hidden-state reset and ALiBi-positioned `[SUM]` tokens.
//!
//! The crate also carries analytic and instrumented FLOPs accounting, leakage
//! analysis tooling and a reproducible experiment runner.

pub mod attention;
pub mod data;
pub mod experiment;
pub mod flops;
pub mod leakage;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod train;

pub use attention::{AlibiRows, AttentionConfig, PositionalMode, ReceptiveField};
pub use data::{
    Dataset, Interaction, InteractionSequence, SplitDataset, SyntheticConfig, Vocabulary,
};
pub use experiment::{DatasetSource, ExperimentConfig, ExperimentError, RunManifest};
pub use flops::{CostModelInputs, FlopsReport, MacCounter};
pub use metrics::MetricsReport;
pub use model::{ModelConfig, ModelParams, ResetConfig, ResetGranularity, SumLogits};
pub use prompt::{AttentionPlan, Prompt, PromptingConfig, SumPositions, TokenizedPrompt};
pub use train::{Paradigm, TrainConfig};
