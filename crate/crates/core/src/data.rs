//! Sequential CTR datasets: synthetic generation, CSV loading, chronological
//! splitting and vocabulary construction.
//!
//! Both training paradigms consume the same [`SplitDataset`], so any difference
//! between them comes from prompt construction and attention, never from data.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Users with fewer interactions than this are dropped by the CSV loader.
pub const MIN_INTERACTIONS_PER_USER: usize = 5;

pub const SUM_TOKEN: &str = "[SUM]";
pub const YES_TOKEN: &str = "[YES]";
pub const NO_TOKEN: &str = "[NO]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const SEP_TOKEN: &str = "[SEP]";

const RESERVED: [&str; 5] = [SUM_TOKEN, YES_TOKEN, NO_TOKEN, PAD_TOKEN, SEP_TOKEN];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    MalformedRow { line: u64, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid split ratios {0:?}: must be positive and sum to 1")]
    InvalidRatios([f64; 3]),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub item_id: u32,
    pub descriptor_tokens: Vec<String>,
    pub label: bool,
    pub order_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: u64,
    pub interactions: Vec<Interaction>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Prefix of the sequence holding the first `len` interactions.
    pub fn prefix(&self, len: usize) -> InteractionSequence {
        InteractionSequence {
            user_id: self.user_id,
            interactions: self.interactions[..len].to_vec(),
        }
    }
}

/// Token to id mapping. Ids `0..5` are reserved for `[SUM]`, `[YES]`, `[NO]`,
/// `[PAD]` and `[SEP]`; every other token is numbered in first-occurrence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for token in RESERVED {
            vocab.insert(token);
        }
        vocab
    }
}

impl Vocabulary {
    pub const SUM: u32 = 0;
    pub const YES: u32 = 1;
    pub const NO: u32 = 2;
    pub const PAD: u32 = 3;
    pub const SEP: u32 = 4;

    /// Builds a vocabulary from an ordered token list. Reserved tokens are
    /// always placed first; duplicates keep their first id.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary::default();
        for token in tokens {
            vocab.insert(token.as_ref());
        }
        vocab
    }

    fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.to_owned(), id);
        self.id_to_token.push(token.to_owned());
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn label_id(label: bool) -> u32 {
        if label {
            Self::YES
        } else {
            Self::NO
        }
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.id_to_token.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(deserializer)?;
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(serde::de::Error::custom(
                "vocabulary must start with the reserved tokens",
            ));
        }
        let vocab = Vocabulary::from_tokens(&tokens);
        if vocab.len() != tokens.len() {
            return Err(serde::de::Error::custom("vocabulary contains duplicate tokens"));
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sequences: Vec<InteractionSequence>,
    pub vocabulary: Vocabulary,
}

impl Dataset {
    pub fn new(sequences: Vec<InteractionSequence>) -> Self {
        let vocabulary = build_vocabulary(&sequences);
        Dataset {
            sequences,
            vocabulary,
        }
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(InteractionSequence::len).sum()
    }
}

/// Ids are assigned in first-occurrence order (users, then interactions, then
/// descriptor tokens) after the reserved tokens.
pub fn build_vocabulary(sequences: &[InteractionSequence]) -> Vocabulary {
    Vocabulary::from_tokens(
        sequences
            .iter()
            .flat_map(|s| s.interactions.iter())
            .flat_map(|i| i.descriptor_tokens.iter()),
    )
}

/// Desk-scale generator configuration.
///
/// Every item owns a latent feature vector whose coordinates are bucket centres
/// on `[-1, 1]`; descriptor token `s` names the bucket of latent coordinate
/// `s mod latent_dim`, so the tokens determine the features exactly. Slots beyond
/// `latent_dim` carry an item-identity token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub items_per_user: usize,
    pub num_items: usize,
    /// Quantisation levels per descriptor slot.
    pub vocab_size: usize,
    pub tokens_per_interaction: usize,
    pub latent_dim: usize,
    pub label_noise: f64,
    pub history_weight: f64,
    /// Every coordinate of a user preference is drawn from `N(preference_mean, 1)`.
    pub preference_mean: f64,
    /// Number of preceding interactions whose liked items feed the history term.
    pub history_window: usize,
    pub rng_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 200,
            items_per_user: 60,
            num_items: 400,
            vocab_size: 8,
            tokens_per_interaction: 2,
            latent_dim: 1,
            label_noise: 0.2,
            history_weight: 0.5,
            preference_mean: 1.0,
            history_window: 10,
            rng_seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let counts = [
            ("num_users", self.num_users),
            ("items_per_user", self.items_per_user),
            ("num_items", self.num_items),
            ("vocab_size", self.vocab_size),
            ("tokens_per_interaction", self.tokens_per_interaction),
            ("latent_dim", self.latent_dim),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(DataError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        for (name, value) in [
            ("label_noise", self.label_noise),
            ("history_weight", self.history_weight),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(DataError::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {value}"
                )));
            }
        }
        if !self.preference_mean.is_finite() {
            return Err(DataError::InvalidConfig("preference_mean must be finite".into()));
        }
        Ok(())
    }
}

/// Generator-side ground truth, kept next to the dataset for oracle checks.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    /// Noise-free label logit per user and interaction.
    pub logits: Vec<Vec<f64>>,
    /// Label before noise flipping.
    pub clean_labels: Vec<Vec<bool>>,
}

pub fn generate_synthetic_dataset(config: &SyntheticConfig) -> Result<Dataset, DataError> {
    generate_with_oracle(config).map(|(dataset, _)| dataset)
}

/// Label rule: `logit_j = v_j . (u + history_weight * mean(v_i))` where the mean
/// runs over liked items among the previous `history_window` interactions, the
/// clean label is `logit_j > 0`, and the observed label is flipped with
/// probability `label_noise`.
pub fn generate_with_oracle(
    config: &SyntheticConfig,
) -> Result<(Dataset, SyntheticOracle), DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let dim = config.latent_dim;
    let levels = config.vocab_size;

    let mut item_buckets = Vec::with_capacity(config.num_items);
    let mut item_features = Vec::with_capacity(config.num_items);
    for _ in 0..config.num_items {
        let buckets: Vec<usize> = (0..dim).map(|_| rng.random_range(0..levels)).collect();
        let features: Vec<f64> = buckets
            .iter()
            .map(|&b| -1.0 + (2 * b + 1) as f64 / levels as f64)
            .collect();
        item_buckets.push(buckets);
        item_features.push(features);
    }
    let item_tokens: Vec<Vec<String>> = (0..config.num_items)
        .map(|item| {
            (0..config.tokens_per_interaction)
                .map(|slot| {
                    if slot < dim {
                        format!("f{slot}_{}", item_buckets[item][slot])
                    } else {
                        format!("x{slot}_{}", item % levels)
                    }
                })
                .collect()
        })
        .collect();

    let mut sequences = Vec::with_capacity(config.num_users);
    let mut logits = Vec::with_capacity(config.num_users);
    let mut clean_labels = Vec::with_capacity(config.num_users);
    for user in 0..config.num_users {
        let preference: Vec<f64> = (0..dim)
            .map(|_| config.preference_mean + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut interactions: Vec<Interaction> = Vec::with_capacity(config.items_per_user);
        let mut user_logits = Vec::with_capacity(config.items_per_user);
        let mut user_clean = Vec::with_capacity(config.items_per_user);
        for j in 0..config.items_per_user {
            let item = rng.random_range(0..config.num_items);
            let features = &item_features[item];

            let start = j.saturating_sub(config.history_window);
            let mut liked_mean = vec![0.0; dim];
            let mut liked = 0usize;
            for prev in &interactions[start..j] {
                if prev.label {
                    for (acc, x) in liked_mean.iter_mut().zip(&item_features[prev.item_id as usize])
                    {
                        *acc += x;
                    }
                    liked += 1;
                }
            }
            if liked > 0 {
                liked_mean.iter_mut().for_each(|x| *x /= liked as f64);
            }
            let logit: f64 = features
                .iter()
                .zip(preference.iter().zip(&liked_mean))
                .map(|(v, (u, h))| v * (u + config.history_weight * h))
                .sum();
            let clean = logit > 0.0;
            let flip = rng.random::<f64>() < config.label_noise;
            interactions.push(Interaction {
                item_id: item as u32,
                descriptor_tokens: item_tokens[item].clone(),
                label: clean ^ flip,
                order_index: j,
            });
            user_logits.push(logit);
            user_clean.push(clean);
        }
        sequences.push(InteractionSequence {
            user_id: user as u64,
            interactions,
        });
        logits.push(user_logits);
        clean_labels.push(user_clean);
    }
    Ok((
        Dataset::new(sequences),
        SyntheticOracle {
            logits,
            clean_labels,
        },
    ))
}

/// Loads `user_id,item_id,timestamp,label,item_text` rows.
///
/// Rows are grouped per user (users ordered by id), sorted by timestamp with
/// input order breaking ties, and users with fewer than
/// [`MIN_INTERACTIONS_PER_USER`] rows are pruned.
pub fn load_interactions_csv(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header = reader
        .headers()
        .map_err(|e| DataError::MalformedRow {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let expected = ["user_id", "item_id", "timestamp", "label", "item_text"];
    if header.iter().collect::<Vec<_>>() != expected {
        if header.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        return Err(DataError::MalformedRow {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }

    // (timestamp, row order, item, label, tokens)
    type Row = (i64, usize, u32, bool, Vec<String>);
    let mut per_user: BTreeMap<u64, Vec<Row>> = BTreeMap::new();
    for (row_index, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::MalformedRow {
            line: e.position().map_or(row_index as u64 + 2, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(row_index as u64 + 2, |p| p.line());
        let malformed = |message: String| DataError::MalformedRow { line, message };
        if record.len() != expected.len() {
            return Err(malformed(format!(
                "expected {} fields, found {}",
                expected.len(),
                record.len()
            )));
        }
        let user: u64 = record[0]
            .parse()
            .map_err(|_| malformed(format!("bad user_id {:?}", &record[0])))?;
        let item: u32 = record[1]
            .parse()
            .map_err(|_| malformed(format!("bad item_id {:?}", &record[1])))?;
        let timestamp: i64 = record[2]
            .parse()
            .map_err(|_| malformed(format!("bad timestamp {:?}", &record[2])))?;
        let label = match &record[3] {
            "1" => true,
            "0" => false,
            other => return Err(malformed(format!("label must be 0 or 1, got {other:?}"))),
        };
        let tokens: Vec<String> = record[4].split_whitespace().map(str::to_owned).collect();
        if tokens.is_empty() {
            return Err(malformed("item_text is empty".to_owned()));
        }
        per_user
            .entry(user)
            .or_default()
            .push((timestamp, row_index, item, label, tokens));
    }
    if per_user.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    let mut pruned = 0usize;
    let mut sequences = Vec::with_capacity(per_user.len());
    for (user_id, mut rows) in per_user {
        if rows.len() < MIN_INTERACTIONS_PER_USER {
            pruned += 1;
            continue;
        }
        rows.sort_by_key(|row| (row.0, row.1));
        let interactions = rows
            .into_iter()
            .enumerate()
            .map(|(order_index, (_, _, item_id, label, descriptor_tokens))| Interaction {
                item_id,
                descriptor_tokens,
                label,
                order_index,
            })
            .collect();
        sequences.push(InteractionSequence {
            user_id,
            interactions,
        });
    }
    if pruned > 0 {
        log::info!("pruned {pruned} users with fewer than {MIN_INTERACTIONS_PER_USER} interactions");
    }
    Ok(Dataset::new(sequences))
}

/// One user's admitted sequence with chronological split boundaries.
///
/// Targets in `train` use only training interactions as context; validation and
/// test targets draw their `n` preceding interactions from the full sequence,
/// which may reach back into an earlier split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub sequence: InteractionSequence,
    pub train_end: usize,
    pub val_end: usize,
}

impl UserSplit {
    pub fn train_sequence(&self) -> InteractionSequence {
        self.sequence.prefix(self.train_end)
    }

    pub fn train_range(&self) -> Range<usize> {
        0..self.train_end
    }

    pub fn val_range(&self) -> Range<usize> {
        self.train_end..self.val_end
    }

    pub fn test_range(&self) -> Range<usize> {
        self.val_end..self.sequence.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
    pub vocabulary: Vocabulary,
    pub context_size: usize,
    pub excluded_users: usize,
}

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Per user: the earliest `floor(r0 * m)` interactions go to train, the next
/// `floor(r1 * m)` to validation, the remainder to test. Users that cannot
/// supply at least one training target (`> n` training interactions) plus one
/// validation and one test target are excluded and counted.
pub fn chronological_split(
    dataset: &Dataset,
    ratios: [f64; 3],
    context_size: usize,
) -> Result<SplitDataset, DataError> {
    if ratios.iter().any(|&r| !(r > 0.0)) || ((ratios.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidRatios(ratios));
    }
    let mut users = Vec::with_capacity(dataset.sequences.len());
    let mut excluded = 0usize;
    for sequence in &dataset.sequences {
        let m = sequence.len();
        // Guard against 0.8 * 10 = 7.999... style rounding.
        let train_len = (ratios[0] * m as f64 + 1e-9).floor() as usize;
        let val_len = (ratios[1] * m as f64 + 1e-9).floor() as usize;
        let test_len = m.saturating_sub(train_len + val_len);
        if m < context_size + 3 || train_len <= context_size || val_len == 0 || test_len == 0 {
            excluded += 1;
            continue;
        }
        users.push(UserSplit {
            sequence: sequence.clone(),
            train_end: train_len,
            val_end: train_len + val_len,
        });
    }
    if excluded > 0 {
        log::warn!(
            "excluded {excluded} users too short for context size {context_size} after splitting"
        );
    }
    Ok(SplitDataset {
        users,
        vocabulary: dataset.vocabulary.clone(),
        context_size,
        excluded_users: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn small_config() -> SyntheticConfig {
        SyntheticConfig {
            num_users: 2,
            items_per_user: 30,
            tokens_per_interaction: 4,
            rng_seed: 7,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_dataset(&small_config()).unwrap();
        let b = generate_synthetic_dataset(&small_config()).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        assert_eq!(a.sequences.len(), 2);
        assert!(a.sequences.iter().all(|s| s.len() == 30));
        assert!(a
            .sequences
            .iter()
            .flat_map(|s| &s.interactions)
            .all(|i| i.descriptor_tokens.len() == 4));
    }

    #[test]
    fn rejects_zero_users_and_vocab() {
        for config in [
            SyntheticConfig {
                num_users: 0,
                ..small_config()
            },
            SyntheticConfig {
                vocab_size: 0,
                ..small_config()
            },
            SyntheticConfig {
                label_noise: 1.5,
                ..small_config()
            },
        ] {
            assert!(matches!(
                generate_synthetic_dataset(&config),
                Err(DataError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn descriptor_tokens_are_in_vocabulary() {
        let dataset = generate_synthetic_dataset(&small_config()).unwrap();
        for token in dataset
            .sequences
            .iter()
            .flat_map(|s| &s.interactions)
            .flat_map(|i| &i.descriptor_tokens)
        {
            assert!(dataset.vocabulary.id(token).unwrap() >= 5);
        }
    }

    #[test]
    fn empty_token_stream_gives_reserved_only() {
        let vocab = build_vocabulary(&[]);
        assert_eq!(vocab.len(), 5);
        assert_eq!(vocab.id(SUM_TOKEN), Some(Vocabulary::SUM));
        assert_eq!(vocab.id(YES_TOKEN), Some(Vocabulary::YES));
        assert_eq!(vocab.id(NO_TOKEN), Some(Vocabulary::NO));
        assert_eq!(vocab.id(PAD_TOKEN), Some(Vocabulary::PAD));
        assert_eq!(vocab.id(SEP_TOKEN), Some(Vocabulary::SEP));
    }

    #[test]
    fn vocabulary_dedups_and_is_idempotent() {
        let seq = |user, tokens: &[&str]| InteractionSequence {
            user_id: user,
            interactions: vec![Interaction {
                item_id: 0,
                descriptor_tokens: tokens.iter().map(|t| t.to_string()).collect(),
                label: true,
                order_index: 0,
            }],
        };
        let sequences = vec![seq(0, &["genre_3", "a"]), seq(1, &["b", "genre_3"])];
        let first = build_vocabulary(&sequences);
        let second = build_vocabulary(&sequences);
        assert_eq!(first, second);
        assert_eq!(first.len(), 8);
        assert_eq!(first.id("genre_3"), Some(5));
        assert_eq!(first.id("a"), Some(6));
        assert_eq!(first.id("b"), Some(7));
    }

    #[test]
    fn vocabulary_serde_round_trip() {
        let vocab = Vocabulary::from_tokens(["x", "y"]);
        let json = serde_json::to_string(&vocab).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(vocab, back);
        assert!(serde_json::from_str::<Vocabulary>("[\"x\"]").is_err());
    }

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(contents.as_bytes()).unwrap();
        file
    }

    #[test]
    fn csv_sorts_by_timestamp_with_stable_ties() {
        let file = write_csv(
            "user_id,item_id,timestamp,label,item_text\n\
             1,10,3,1,c\n\
             1,11,1,0,a a2\n\
             1,12,2,1,b\n\
             1,13,2,0,b2\n\
             1,14,5,1,e\n",
        );
        let dataset = load_interactions_csv(file.path()).unwrap();
        let items: Vec<u32> = dataset.sequences[0]
            .interactions
            .iter()
            .map(|i| i.item_id)
            .collect();
        assert_eq!(items, vec![11, 12, 13, 10, 14]);
        assert_eq!(
            dataset.sequences[0].interactions[0].descriptor_tokens,
            vec!["a", "a2"]
        );
        let order: Vec<usize> = dataset.sequences[0]
            .interactions
            .iter()
            .map(|i| i.order_index)
            .collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn csv_three_rows_sort_order() {
        // Below the pruning threshold, so check ordering through the raw loader
        // by padding the user with later rows.
        let file = write_csv(
            "user_id,item_id,timestamp,label,item_text\n\
             7,1,3,1,t3\n7,2,1,1,t1\n7,3,2,0,t2\n7,4,10,0,t10\n7,5,11,0,t11\n",
        );
        let dataset = load_interactions_csv(file.path()).unwrap();
        let tokens: Vec<&str> = dataset.sequences[0].interactions[..3]
            .iter()
            .map(|i| i.descriptor_tokens[0].as_str())
            .collect();
        assert_eq!(tokens, vec!["t1", "t2", "t3"]);
    }

    #[test]
    fn csv_prunes_short_users() {
        let mut contents = String::from("user_id,item_id,timestamp,label,item_text\n");
        for t in 0..4 {
            contents.push_str(&format!("1,{t},{t},1,x\n"));
        }
        for t in 0..5 {
            contents.push_str(&format!("2,{t},{t},0,y\n"));
        }
        let file = write_csv(&contents);
        let dataset = load_interactions_csv(file.path()).unwrap();
        assert_eq!(dataset.sequences.len(), 1);
        assert_eq!(dataset.sequences[0].user_id, 2);
    }

    #[test]
    fn csv_malformed_row_names_line() {
        let file = write_csv(
            "user_id,item_id,timestamp,label,item_text\n\
             1,10,3,1,c\n\
             1,11,notanumber,0,a\n",
        );
        match load_interactions_csv(file.path()) {
            Err(DataError::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let file = write_csv("user_id,item_id,timestamp,label,item_text\n1,10,3,2,c\n");
        assert!(matches!(
            load_interactions_csv(file.path()),
            Err(DataError::MalformedRow { line: 2, .. })
        ));
    }

    #[test]
    fn csv_empty_file_is_an_error() {
        let file = write_csv("");
        assert!(matches!(
            load_interactions_csv(file.path()),
            Err(DataError::EmptyDataset)
        ));
        let file = write_csv("user_id,item_id,timestamp,label,item_text\n");
        assert!(matches!(
            load_interactions_csv(file.path()),
            Err(DataError::EmptyDataset)
        ));
    }

    fn dataset_with_lengths(lengths: &[usize]) -> Dataset {
        let sequences = lengths
            .iter()
            .enumerate()
            .map(|(user, &m)| InteractionSequence {
                user_id: user as u64,
                interactions: (0..m)
                    .map(|j| Interaction {
                        item_id: j as u32,
                        descriptor_tokens: vec![format!("t{}", j % 3)],
                        label: j % 2 == 0,
                        order_index: j,
                    })
                    .collect(),
            })
            .collect();
        Dataset::new(sequences)
    }

    #[test]
    fn split_sizes() {
        let dataset = dataset_with_lengths(&[100, 10]);
        let split = chronological_split(&dataset, DEFAULT_SPLIT_RATIOS, 5).unwrap();
        assert_eq!(split.users.len(), 2);
        let sizes = |u: &UserSplit| {
            (
                u.train_range().len(),
                u.val_range().len(),
                u.test_range().len(),
            )
        };
        assert_eq!(sizes(&split.users[0]), (80, 10, 10));
        assert_eq!(sizes(&split.users[1]), (8, 1, 1));
    }

    #[test]
    fn split_excludes_short_users() {
        let dataset = dataset_with_lengths(&[12, 30]);
        let split = chronological_split(&dataset, DEFAULT_SPLIT_RATIOS, 10).unwrap();
        assert_eq!(split.users.len(), 1);
        assert_eq!(split.excluded_users, 1);
        assert_eq!(split.users[0].sequence.user_id, 1);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let dataset = dataset_with_lengths(&[30]);
        assert!(chronological_split(&dataset, [0.8, 0.1, 0.2], 5).is_err());
        assert!(chronological_split(&dataset, [1.0, 0.0, 0.0], 5).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let dataset = generate_synthetic_dataset(&SyntheticConfig {
            num_users: 20,
            items_per_user: 37,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let split = chronological_split(&dataset, DEFAULT_SPLIT_RATIOS, 10).unwrap();
        for user in &split.users {
            let m = user.sequence.len();
            let mut seen = vec![0u8; m];
            for range in [user.train_range(), user.val_range(), user.test_range()] {
                for j in range {
                    seen[j] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn label_noise_half_gives_one_bit() {
        let (dataset, _) = generate_with_oracle(&SyntheticConfig {
            num_users: 100,
            items_per_user: 120,
            label_noise: 0.5,
            rng_seed: 11,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let labels: Vec<bool> = dataset
            .sequences
            .iter()
            .flat_map(|s| s.interactions.iter().map(|i| i.label))
            .collect();
        assert!(labels.len() >= 10_000);
        let p = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
        let entropy = -(p * p.log2() + (1.0 - p) * (1.0 - p).log2());
        assert!(entropy > 0.999, "entropy {entropy}");
    }

    #[test]
    fn history_free_labels_are_independent_of_context_items() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let config = SyntheticConfig {
            num_users: 200,
            items_per_user: 60,
            history_weight: 0.0,
            label_noise: 0.0,
            rng_seed: 5,
            ..SyntheticConfig::default()
        };
        let (dataset, _) = generate_with_oracle(&config).unwrap();
        // Contingency table: target label x bucket of the preceding item's first
        // descriptor slot.
        let levels = config.vocab_size;
        let mut table = vec![[0f64; 2]; levels];
        let mut samples = 0;
        for seq in &dataset.sequences {
            for pair in seq.interactions.windows(2) {
                let bucket: usize = pair[0].descriptor_tokens[0]
                    .rsplit('_')
                    .next()
                    .unwrap()
                    .parse()
                    .unwrap();
                table[bucket][pair[1].label as usize] += 1.0;
                samples += 1;
            }
        }
        assert!(samples >= 10_000);
        let total: f64 = table.iter().map(|r| r[0] + r[1]).sum();
        let col = [
            table.iter().map(|r| r[0]).sum::<f64>(),
            table.iter().map(|r| r[1]).sum::<f64>(),
        ];
        let mut chi2 = 0.0;
        for row in &table {
            let row_total = row[0] + row[1];
            for c in 0..2 {
                let expected = row_total * col[c] / total;
                chi2 += (row[c] - expected).powi(2) / expected;
            }
        }
        let dof = (levels - 1) as f64;
        let p_value = 1.0 - ChiSquared::new(dof).unwrap().cdf(chi2);
        assert!(p_value > 0.01, "chi2 {chi2} p {p_value}");
    }

    #[test]
    fn oracle_logits_rank_noise_free_labels_perfectly() {
        let (dataset, oracle) = generate_with_oracle(&SyntheticConfig {
            num_users: 50,
            label_noise: 0.0,
            history_weight: 0.7,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (seq, logits) in dataset.sequences.iter().zip(&oracle.logits) {
            for (interaction, &logit) in seq.interactions.iter().zip(logits) {
                scores.push(logit);
                labels.push(interaction.label);
            }
        }
        assert_eq!(crate::metrics::auc(&scores, &labels), Some(1.0));
    }
}
