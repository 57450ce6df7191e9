//! Shared fixtures for the benchmarks.

use dti_core::data::{chronological_split, generate_synthetic_dataset, DEFAULT_SPLIT_RATIOS};
use dti_core::train::{training_prompts, Paradigm, PreparedPrompt};
use dti_core::{ModelConfig, ModelParams, PromptingConfig, SplitDataset, SyntheticConfig};

pub struct Fixture {
    pub split: SplitDataset,
    pub prompting: PromptingConfig,
    pub params: ModelParams,
}

/// `users` synthetic users with `m = 60`, `n = 10` and the default model.
pub fn fixture(users: usize) -> Fixture {
    let data = generate_synthetic_dataset(&SyntheticConfig {
        num_users: users,
        ..SyntheticConfig::default()
    })
    .expect("valid synthetic config");
    let prompting = PromptingConfig {
        n: 10,
        ..PromptingConfig::default()
    };
    let split = chronological_split(&data, DEFAULT_SPLIT_RATIOS, prompting.n).expect("valid split");
    let config = ModelConfig {
        vocab_size: split.vocabulary.len(),
        ..ModelConfig::default()
    };
    let params = ModelParams::init(config, 0).expect("valid model config");
    Fixture {
        split,
        prompting,
        params,
    }
}

impl Fixture {
    /// First prompt of the first user under `paradigm`.
    pub fn prompt(&self, paradigm: Paradigm, k: usize) -> PreparedPrompt {
        training_prompts(&self.split, &self.prompting, paradigm, k)
            .expect("prompts build")
            .swap_remove(0)
    }
}
