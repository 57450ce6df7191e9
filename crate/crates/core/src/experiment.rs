//! Config-driven runs. Every run writes into a fresh directory, and a
//! `manifest.json` listing each emitted file with its SHA-256 seals it.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::write_matrix;
use crate::data::{
    chronological_split, generate_synthetic_dataset, load_interactions_csv, DataError, Dataset, SplitDataset,
    SyntheticConfig, Vocabulary, DEFAULT_SPLIT_RATIOS,
};
use crate::flops::{structural_macs, CostModelInputs, FlopsReport, MacCounter};
use crate::leakage::{run_ablation_grid, AblationGrid, AblationVariant, GridSettings};
use crate::metrics::MetricsReport;
use crate::model::{forward_with, ForwardOptions, ModelConfig, ModelError, ModelParams};
use crate::prompt::PromptingConfig;
use crate::train::{
    evaluate, evaluation_prompts, train, training_prompts, EvalSplit, Paradigm, PreparedPrompt, TrainConfig,
    TrainError, TrainOutcome,
};

pub const ARTIFACT_VERSION: &str = concat!("dti-lab/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        ExperimentError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// 2 for configuration errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config { .. } => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    Csv { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticConfig {
            num_users: 2000,
            tokens_per_interaction: 1,
            ..SyntheticConfig::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free-form tag copied into reports.
    pub label: Option<String>,
    pub dataset: DatasetSource,
    pub split_ratios: [f64; 3],
    pub prompting: PromptingConfig,
    /// `vocab_size` is overwritten with the dataset vocabulary size.
    pub model: ModelConfig,
    /// Carries the paradigm and `k` of a single run.
    pub train: TrainConfig,
    /// Run directory; must not exist yet, or be empty.
    pub output_dir: PathBuf,
    /// Parameter initialization seed.
    pub seed: u64,
    /// DTI `k` values of `compare`.
    pub compare_ks: Vec<usize>,
    /// `k` values of `ablate`.
    pub ablation_ks: Vec<usize>,
    /// Write the attention maps of the first validation prompt to `attention.txt`.
    pub dump_attention: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            label: None,
            dataset: DatasetSource::default(),
            split_ratios: DEFAULT_SPLIT_RATIOS,
            prompting: PromptingConfig {
                n: 10,
                ..PromptingConfig::default()
            },
            model: ModelConfig {
                init_std: 0.3,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            compare_ks: vec![5, 10],
            ablation_ks: vec![1, 5, 10, 20],
            dump_attention: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::config("config", format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::config("config", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Field-level checks that need no data. Nothing touches the disk except
    /// existence checks.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        match &self.dataset {
            DatasetSource::Synthetic(s) => s.validate().map_err(|e| ExperimentError::config("dataset", e.to_string()))?,
            DatasetSource::Csv { path } => {
                if !path.is_file() {
                    return Err(ExperimentError::config(
                        "dataset.path",
                        format!("{} does not exist", path.display()),
                    ));
                }
            }
        }
        let ratios = self.split_ratios;
        if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(ExperimentError::config(
                "split_ratios",
                format!("{ratios:?} must be positive and sum to 1"),
            ));
        }
        self.prompting
            .validate()
            .map_err(|e| ExperimentError::config("prompting", e.to_string()))?;
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(Vocabulary::default().len());
        model.validate().map_err(|e| ExperimentError::config("model", e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ExperimentError::config("train", e.to_string()))?;
        for (field, ks) in [("compare_ks", &self.compare_ks), ("ablation_ks", &self.ablation_ks)] {
            if ks.is_empty() || ks.contains(&0) {
                return Err(ExperimentError::config(field, "needs at least one k, all >= 1"));
            }
        }
        check_output_dir(&self.output_dir)
    }

    pub fn load_dataset(&self) -> Result<Dataset, ExperimentError> {
        Ok(match &self.dataset {
            DatasetSource::Synthetic(s) => generate_synthetic_dataset(s)?,
            DatasetSource::Csv { path } => load_interactions_csv(path)?,
        })
    }

    pub fn load_split(&self) -> Result<SplitDataset, ExperimentError> {
        Ok(chronological_split(&self.load_dataset()?, self.split_ratios, self.prompting.n)?)
    }

    /// Copy with the model vocabulary sized to `vocab`.
    pub fn resolved(&self, vocab: &Vocabulary) -> Self {
        let mut cfg = self.clone();
        cfg.model.vocab_size = vocab.len();
        cfg
    }
}

fn check_output_dir(dir: &Path) -> Result<(), ExperimentError> {
    if dir.as_os_str().is_empty() {
        return Err(ExperimentError::config("output_dir", "must not be empty"));
    }
    if dir.exists() {
        let empty = dir.is_dir() && fs::read_dir(dir).map_err(io_err(dir))?.next().is_none();
        if !empty {
            return Err(ExperimentError::config(
                "output_dir",
                format!("{} already exists; run directories are never reused", dir.display()),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// Runtime failure; the listed files are partial outputs.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    /// `run`, `compare` or `ablate`.
    pub command: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub config: ExperimentConfig,
    pub files: Vec<FileRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self, ExperimentError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Files whose current hash differs from the recorded one.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>, ExperimentError> {
        let mut bad = Vec::new();
        for record in &self.files {
            let path = dir.join(&record.path);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if sha256_hex(&bytes) != record.sha256 {
                bad.push(record.path.clone());
            }
        }
        Ok(bad)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Write-once directory that records every file it creates.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    files: Vec<FileRecord>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, ExperimentError> {
        check_output_dir(root)?;
        fs::create_dir_all(root).map_err(io_err(root))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), ExperimentError> {
        let path = self.root.join(name);
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.write_all(bytes).map_err(io_err(&path))?;
        self.record(name, bytes);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), ExperimentError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Records a file some other writer created inside the directory.
    pub fn adopt(&mut self, name: &str) -> Result<(), ExperimentError> {
        let path = self.root.join(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        self.record(name, &bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.files.push(FileRecord {
            path: name.to_owned(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }

    pub fn seal(
        mut self,
        command: &str,
        config: &ExperimentConfig,
        started_unix: f64,
        error: Option<String>,
    ) -> Result<RunManifest, ExperimentError> {
        let manifest = RunManifest {
            artifact_version: ARTIFACT_VERSION.to_owned(),
            command: command.to_owned(),
            status: if error.is_some() {
                RunStatus::Failed
            } else {
                RunStatus::Complete
            },
            error,
            started_unix,
            finished_unix: unix_now(),
            config: config.clone(),
            files: std::mem::take(&mut self.files),
        };
        let path = self.root.join(MANIFEST_FILE);
        let mut file = File::create_new(&path).map_err(io_err(&path))?;
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        file.write_all(text.as_bytes()).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub paradigm: Paradigm,
    pub k: usize,
    pub best_epoch: usize,
    pub steps: usize,
    /// Best-epoch parameters on the validation targets.
    pub validation: MetricsReport,
    /// Same parameters on the test targets, with the epoch history attached.
    pub test: MetricsReport,
}

/// Wall-clock numbers live apart from the metrics so metric files hash-compare
/// across repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub seconds_per_step: f64,
    pub training_macs: u64,
    pub tokens_per_target: f64,
    pub counter: MacCounter,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub metrics: RunMetrics,
    pub timing: Timing,
    pub flops: FlopsReport,
    pub manifest: RunManifest,
}

/// Structural training MACs of both paradigms over the training split.
pub fn flops_report(
    split: &SplitDataset,
    prompting: &PromptingConfig,
    model: &ModelConfig,
    k: usize,
) -> Result<FlopsReport, ExperimentError> {
    let sw = training_prompts(split, prompting, Paradigm::SlidingWindow, 1)?;
    let dti = training_prompts(split, prompting, Paradigm::Dti, k)?;
    let tally = |prompts: &[PreparedPrompt]| {
        let mut counter = MacCounter::default();
        for p in prompts {
            counter += structural_macs(&p.prompt, &p.plan, model);
        }
        counter
    };
    let mean_len = |prompts: &[PreparedPrompt], targets: usize| {
        let lens: Vec<usize> = prompts
            .iter()
            .filter(|p| p.num_targets() == targets)
            .map(|p| p.prompt.len())
            .collect();
        lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64
    };
    let first = split.users.first().ok_or(DataError::EmptyDataset)?;
    let m = first.train_end;
    let c = first.sequence.interactions.first().map_or(1, |i| i.descriptor_tokens.len());
    let dti_full = if dti.iter().any(|p| p.num_targets() == k) { k } else { 1 };
    let inputs = CostModelInputs::uniform(m, prompting.n, k, c, model.num_layers, model.d_model);
    let token_inputs = inputs.from_token_counts(mean_len(&sw, 1), mean_len(&dti, dti_full));
    Ok(FlopsReport::new(inputs, token_inputs, &tally(&sw), &tally(&dti)))
}

/// Trains, evaluates and accounts one configuration into `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary, ExperimentError> {
    config.validate()?;
    let started = unix_now();
    let split = config.load_split()?;
    let resolved = config.resolved(&split.vocabulary);
    let mut dir = RunDir::create(&config.output_dir)?;
    dir.write_json("config.json", &resolved)?;
    match execute_run(&resolved, &split, &mut dir) {
        Ok((metrics, timing, flops)) => {
            let manifest = dir.seal("run", &resolved, started, None)?;
            Ok(RunSummary {
                dir: config.output_dir.clone(),
                metrics,
                timing,
                flops,
                manifest,
            })
        }
        Err(e) => {
            if let ExperimentError::Train(TrainError::Diverged { last_good, .. }) = &e {
                if last_good.save_checkpoint(&dir.path().join("last_good")).is_ok() {
                    let _ = dir.adopt("last_good.bin");
                    let _ = dir.adopt("last_good.json");
                }
            }
            dir.seal("run", &resolved, started, Some(e.to_string()))?;
            Err(e)
        }
    }
}

fn execute_run(
    cfg: &ExperimentConfig,
    split: &SplitDataset,
    dir: &mut RunDir,
) -> Result<(RunMetrics, Timing, FlopsReport), ExperimentError> {
    let k = match cfg.train.paradigm {
        Paradigm::SlidingWindow => 1,
        Paradigm::Dti => cfg.train.k,
    };
    let outcome = train_one(split, &cfg.prompting, &cfg.model, &cfg.train, cfg.seed)?;
    let eval_start = Instant::now();
    let val = evaluation_prompts(split, &cfg.prompting, EvalSplit::Validation)?;
    let test = evaluation_prompts(split, &cfg.prompting, EvalSplit::Test)?;
    let validation = evaluate(&outcome.params, &val)?;
    let mut test_report = evaluate(&outcome.params, &test)?;
    test_report.history = outcome.history.clone();
    let eval_seconds = eval_start.elapsed().as_secs_f64();
    let metrics = RunMetrics {
        paradigm: cfg.train.paradigm,
        k,
        best_epoch: outcome.best_epoch,
        steps: outcome.steps,
        validation,
        test: test_report,
    };
    dir.write_json("metrics.json", &metrics)?;
    dir.write("history.csv", metrics.test.history_csv().as_bytes())?;
    outcome.params.save_checkpoint(&dir.path().join("checkpoint"))?;
    dir.adopt("checkpoint.bin")?;
    dir.adopt("checkpoint.json")?;

    let flops = flops_report(split, &cfg.prompting, &cfg.model, cfg.train.k.max(1))?;
    dir.write_json("flops.json", &flops)?;
    dir.write("flops.txt", flops.to_table().as_bytes())?;
    let timing = Timing {
        train_seconds: outcome.train_seconds,
        eval_seconds,
        seconds_per_step: outcome.train_seconds / outcome.steps.max(1) as f64,
        training_macs: outcome.counter.training_macs(),
        tokens_per_target: outcome.counter.tokens_per_target(),
        counter: outcome.counter,
    };
    dir.write_json("timing.json", &timing)?;
    if cfg.dump_attention {
        if let Some(first) = val.first() {
            dir.write("attention.txt", attention_dump(&outcome.params, first)?.as_bytes())?;
        }
    }
    Ok((metrics, timing, flops))
}

/// Dense attention matrices of every layer and head for one prompt, each
/// block headed `# layer L head H` followed by `write_matrix` output.
pub fn attention_dump(params: &ModelParams, prepared: &PreparedPrompt) -> Result<String, ExperimentError> {
    let out = forward_with(
        params,
        &prepared.prompt,
        &prepared.plan,
        ForwardOptions {
            keep_cache: true,
            ..ForwardOptions::default()
        },
    )?;
    let cache = out.cache.expect("cache requested");
    let heads = params.config.num_heads;
    let mut buf = Vec::new();
    for layer in 1..=params.config.num_layers {
        let attn = cache.attention(layer).expect("layer exists");
        for head in 0..heads {
            writeln!(buf, "# layer {layer} head {head}").expect("in-memory write");
            write_matrix(&mut buf, &attn.dense_weights(&prepared.plan, heads, head)).expect("in-memory write");
        }
    }
    Ok(String::from_utf8(buf).expect("ascii output"))
}

pub fn train_one(
    split: &SplitDataset,
    prompting: &PromptingConfig,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, ExperimentError> {
    let train_set = training_prompts(split, prompting, train_cfg.paradigm, train_cfg.k)?;
    let val = evaluation_prompts(split, prompting, EvalSplit::Validation)?;
    let params = ModelParams::init(model.clone(), seed)?;
    Ok(train(params, &train_set, &val, train_cfg)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub paradigm: Paradigm,
    pub k: usize,
    pub val_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub test_log_loss: Option<f64>,
    pub test_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub train_seconds: Option<f64>,
    /// `1 - t / t_sliding_window`.
    pub wall_clock_reduction: Option<f64>,
    pub training_macs: Option<u64>,
    /// Sliding-window MACs over this row's MACs.
    pub measured_reduction: Option<f64>,
    /// `N k / (N + K)` with uniform token accounting.
    pub analytic_reduction: f64,
    pub tokens_per_target: Option<f64>,
    pub error: Option<String>,
    /// Epoch history, kept for plot data.
    #[serde(skip)]
    pub report: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl ComparisonReport {
    pub const CSV_HEADER: &'static str = "paradigm,k,val_auc,test_auc,test_log_loss,test_f1,best_epoch,train_seconds,\
wall_clock_reduction,training_macs,measured_reduction,analytic_reduction,tokens_per_target,error";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let paradigm = match r.paradigm {
                Paradigm::SlidingWindow => "sliding_window",
                Paradigm::Dti => "dti",
            };
            let _ = writeln!(
                out,
                "{paradigm},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.k,
                opt(r.val_auc),
                opt(r.test_auc),
                opt(r.test_log_loss),
                opt(r.test_f1),
                opt(r.best_epoch),
                opt(r.train_seconds),
                opt(r.wall_clock_reduction),
                opt(r.training_macs),
                opt(r.measured_reduction),
                r.analytic_reduction,
                opt(r.tokens_per_target),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>, p: usize| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.p$}"));
        let mut out = format!(
            "{:<16}{:>4}{:>9}{:>9}{:>9}{:>9}{:>10}{:>9}{:>10}{:>10}\n",
            "paradigm", "k", "val_auc", "test_auc", "logloss", "f1", "train_s", "rel_red", "mac_red", "eq_red"
        );
        for r in &self.rows {
            let name = format!("{:?}", r.paradigm);
            let _ = writeln!(
                out,
                "{:<16}{:>4}{:>9}{:>9}{:>9}{:>9}{:>10}{:>9}{:>10}{:>10.3}{}",
                name,
                r.k,
                f(r.val_auc, 4),
                f(r.test_auc, 4),
                f(r.test_log_loss, 4),
                f(r.test_f1, 4),
                f(r.train_seconds, 1),
                f(r.wall_clock_reduction.map(|x| 100.0 * x), 1),
                f(r.measured_reduction, 3),
                r.analytic_reduction,
                r.error.as_ref().map_or_else(String::new, |e| format!("  error: {e}")),
            );
        }
        out
    }
}

/// Trains the sliding-window baseline and DTI at each `compare_ks`, isolating
/// per-cell failures, and writes the comparison into `config.output_dir`.
pub fn compare_paradigms(config: &ExperimentConfig) -> Result<ComparisonReport, ExperimentError> {
    config.validate()?;
    let started = unix_now();
    let split = config.load_split()?;
    let resolved = config.resolved(&split.vocabulary);
    let mut dir = RunDir::create(&config.output_dir)?;
    dir.write_json("config.json", &resolved)?;

    let c = split
        .users
        .first()
        .and_then(|u| u.sequence.interactions.first())
        .map_or(1, |i| i.descriptor_tokens.len());
    let big_n = resolved.prompting.n * c;
    let mut cells = vec![(Paradigm::SlidingWindow, 1)];
    cells.extend(resolved.compare_ks.iter().map(|&k| (Paradigm::Dti, k)));
    let mut rows: Vec<ComparisonRow> = Vec::new();
    for (paradigm, k) in cells {
        let train_cfg = TrainConfig {
            paradigm,
            k,
            ..resolved.train.clone()
        };
        let mut row = ComparisonRow {
            paradigm,
            k,
            val_auc: None,
            test_auc: None,
            test_log_loss: None,
            test_f1: None,
            best_epoch: None,
            train_seconds: None,
            wall_clock_reduction: None,
            training_macs: None,
            measured_reduction: None,
            analytic_reduction: crate::flops::reduction_ratio(big_n, k * c, k),
            tokens_per_target: None,
            error: None,
            report: None,
        };
        let result = train_one(&split, &resolved.prompting, &resolved.model, &train_cfg, resolved.seed).and_then(
            |outcome| {
                let test = evaluation_prompts(&split, &resolved.prompting, EvalSplit::Test)?;
                let mut report = evaluate(&outcome.params, &test)?;
                report.history = outcome.history.clone();
                Ok((outcome, report))
            },
        );
        match result {
            Ok((outcome, report)) => {
                row.val_auc = outcome.history[outcome.best_epoch - 1].val_auc;
                row.test_auc = report.auc;
                row.test_log_loss = Some(report.log_loss);
                row.test_f1 = Some(report.f1);
                row.best_epoch = Some(outcome.best_epoch);
                row.train_seconds = Some(outcome.train_seconds);
                row.training_macs = Some(outcome.counter.training_macs());
                row.tokens_per_target = Some(outcome.counter.tokens_per_target());
                row.report = Some(report);
            }
            Err(e) => {
                log::warn!("compare cell {paradigm:?} k={k} failed: {e}");
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    let baseline = rows[0].clone();
    for row in &mut rows {
        if let (Some(t), Some(t0)) = (row.train_seconds, baseline.train_seconds) {
            row.wall_clock_reduction = Some(1.0 - t / t0);
        }
        if let (Some(m), Some(m0)) = (row.training_macs, baseline.training_macs) {
            row.measured_reduction = Some(m0 as f64 / m as f64);
        }
    }
    let report = ComparisonReport { rows };
    dir.write("comparison.csv", report.to_csv().as_bytes())?;
    dir.write("comparison.txt", report.to_table().as_bytes())?;
    dir.write_json("comparison.json", &report)?;
    let series: Vec<PlotSeries> = report
        .rows
        .iter()
        .filter_map(|r| {
            r.report.as_ref().map(|rep| PlotSeries {
                run_id: format!("{:?}-k{}", r.paradigm, r.k).to_lowercase(),
                k: r.k,
                variant: match r.paradigm {
                    Paradigm::SlidingWindow => "sliding_window".into(),
                    Paradigm::Dti => "dti".into(),
                },
                history_csv: rep.history_csv(),
            })
        })
        .collect();
    dir.write("plot_data.csv", emit_plot_data(&series).as_bytes())?;
    dir.seal("compare", &resolved, started, None)?;
    Ok(report)
}

/// DTI fix-ablation grid over `ablation_ks`, written into `config.output_dir`.
pub fn ablate(config: &ExperimentConfig, variants: &[AblationVariant]) -> Result<AblationGrid, ExperimentError> {
    config.validate()?;
    let started = unix_now();
    let split = config.load_split()?;
    let resolved = config.resolved(&split.vocabulary);
    let mut dir = RunDir::create(&config.output_dir)?;
    dir.write_json("config.json", &resolved)?;
    let settings = GridSettings {
        model: resolved.model.clone(),
        prompting: resolved.prompting.clone(),
        train: resolved.train.clone(),
        init_seed: resolved.seed,
    };
    let grid = run_ablation_grid(&split, &settings, &resolved.ablation_ks, variants);
    dir.write("ablation.csv", grid.to_csv().as_bytes())?;
    dir.write_json("ablation.json", &grid)?;
    dir.seal("ablate", &resolved, started, None)?;
    Ok(grid)
}

/// One run's epoch history in the `epoch,split,metric,value` layout of
/// `history.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub run_id: String,
    pub k: usize,
    pub variant: String,
    pub history_csv: String,
}

impl PlotSeries {
    pub fn from_run_dir(dir: &Path, run_id: &str, variant: &str) -> Result<Self, ExperimentError> {
        let path = dir.join("history.csv");
        let history_csv = fs::read_to_string(&path).map_err(io_err(&path))?;
        let metrics_path = dir.join("metrics.json");
        let metrics: RunMetrics =
            serde_json::from_str(&fs::read_to_string(&metrics_path).map_err(io_err(&metrics_path))?)?;
        Ok(PlotSeries {
            run_id: run_id.to_owned(),
            k: metrics.k,
            variant: variant.to_owned(),
            history_csv,
        })
    }
}

pub const PLOT_HEADER: &str = "run_id,k,variant,epoch,metric,value";

/// Long-format rows copied verbatim from each history; the metric column is
/// `split_metric`.
pub fn emit_plot_data(runs: &[PlotSeries]) -> String {
    let mut out = String::from(PLOT_HEADER);
    out.push('\n');
    for run in runs {
        for line in run.history_csv.lines().skip(1) {
            let mut parts = line.splitn(4, ',');
            let (Some(epoch), Some(split), Some(metric), Some(value)) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                continue;
            };
            let _ = writeln!(out, "{},{},{},{epoch},{split}_{metric},{value}", run.run_id, run.k, run.variant);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::EpochRecord;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(SyntheticConfig {
                num_users: 12,
                items_per_user: 20,
                num_items: 30,
                ..SyntheticConfig::default()
            }),
            prompting: PromptingConfig {
                n: 3,
                ..PromptingConfig::default()
            },
            model: ModelConfig {
                d_model: 8,
                num_heads: 2,
                ff_dim: 16,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                max_epochs: 2,
                batch_size: 8,
                ..TrainConfig::default()
            },
            output_dir: dir.to_path_buf(),
            compare_ks: vec![2, 4],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ExperimentConfig {
            label: Some("x".into()),
            dataset: DatasetSource::Csv {
                path: "data.csv".into(),
            },
            ..ExperimentConfig::default()
        };
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let default_back: ExperimentConfig = serde_json::from_str(&ExperimentConfig::default().to_json()).unwrap();
        assert_eq!(default_back, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sede": 3}"#).is_err());
    }

    #[test]
    fn missing_csv_is_a_config_error_without_side_effects() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        let cfg = ExperimentConfig {
            dataset: DatasetSource::Csv {
                path: tmp.path().join("missing.csv"),
            },
            ..tiny_config(&out)
        };
        let err = run_experiment(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("dataset.path"));
        assert!(!out.exists());
    }

    #[test]
    fn bad_fields_are_named() {
        let tmp = tempfile::tempdir().unwrap();
        let base = tiny_config(&tmp.path().join("r"));
        let mut cfg = base.clone();
        cfg.split_ratios = [0.5, 0.5, 0.5];
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config { field, .. }) if field == "split_ratios"));
        let mut cfg = base.clone();
        cfg.model.d_model = 7;
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config { field, .. }) if field == "model"));
        let mut cfg = base;
        cfg.train.max_epochs = 0;
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config { field, .. }) if field == "train"));
    }

    #[test]
    fn run_directory_is_sealed_and_reproducible() {
        let tmp = tempfile::tempdir().unwrap();
        let a = run_experiment(&tiny_config(&tmp.path().join("a"))).unwrap();
        let b = run_experiment(&tiny_config(&tmp.path().join("b"))).unwrap();
        assert_eq!(a.manifest.status, RunStatus::Complete);
        assert!(a.manifest.verify(&a.dir).unwrap().is_empty());
        let names: Vec<&str> = a.manifest.files.iter().map(|f| f.path.as_str()).collect();
        for expected in ["config.json", "metrics.json", "history.csv", "checkpoint.bin", "flops.json", "timing.json"] {
            assert!(names.contains(&expected), "{expected} missing from {names:?}");
        }
        let hash = |m: &RunManifest, name: &str| m.files.iter().find(|f| f.path == name).unwrap().sha256.clone();
        for name in ["metrics.json", "history.csv", "checkpoint.bin", "flops.json"] {
            assert_eq!(hash(&a.manifest, name), hash(&b.manifest, name), "{name}");
        }
        // Sealed directories are never reused.
        let err = run_experiment(&tiny_config(&tmp.path().join("a"))).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn attention_dump_rows_are_distributions() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(&tmp.path().join("a"));
        cfg.dump_attention = true;
        cfg.train.max_epochs = 1;
        let run = run_experiment(&cfg).unwrap();
        let text = fs::read_to_string(run.dir.join("attention.txt")).unwrap();
        let blocks = text.matches("# layer").count();
        assert_eq!(blocks, cfg.model.num_layers * cfg.model.num_heads);
        for line in text.lines().filter(|l| !l.starts_with('#') && l.contains('e')) {
            let sum: f64 = line.split(' ').map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-9 || sum == 0.0, "row sums to {sum}");
        }
    }

    #[test]
    fn manifest_config_reproduces_the_run() {
        let tmp = tempfile::tempdir().unwrap();
        let first = run_experiment(&tiny_config(&tmp.path().join("a"))).unwrap();
        let mut replay = RunManifest::load(&first.dir).unwrap().config;
        replay.output_dir = tmp.path().join("replay");
        let second = run_experiment(&replay).unwrap();
        assert_eq!(serde_json::to_value(&first.metrics).unwrap(), serde_json::to_value(&second.metrics).unwrap());
    }

    #[test]
    fn dti_with_k1_matches_sliding_window_end_to_end() {
        let tmp = tempfile::tempdir().unwrap();
        let sw = run_experiment(&tiny_config(&tmp.path().join("sw"))).unwrap();
        let mut cfg = tiny_config(&tmp.path().join("dti"));
        cfg.train.paradigm = Paradigm::Dti;
        cfg.train.k = 1;
        let dti = run_experiment(&cfg).unwrap();
        let (a, b) = (&sw.metrics.test, &dti.metrics.test);
        assert!((a.auc.unwrap() - b.auc.unwrap()).abs() < 1e-6);
        assert!((a.log_loss - b.log_loss).abs() < 1e-6);
    }

    #[test]
    fn comparison_has_one_populated_row_per_cell() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&tmp.path().join("cmp"));
        let report = compare_paradigms(&cfg).unwrap();
        assert_eq!(report.rows.len(), 3);
        for row in &report.rows {
            assert!(row.error.is_none());
            assert!(row.val_auc.is_some() && row.test_log_loss.is_some() && row.training_macs.is_some());
            assert!(row.wall_clock_reduction.is_some() && row.measured_reduction.is_some());
        }
        assert_eq!(report.rows[0].measured_reduction, Some(1.0));
        // Uniform N = n c, K = k c: reduction n k / (n + k).
        assert!((report.rows[2].analytic_reduction - 3.0 * 4.0 / 7.0).abs() < 1e-12);
        let csv = fs::read_to_string(tmp.path().join("cmp/comparison.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(RunManifest::load(&tmp.path().join("cmp")).unwrap().verify(&tmp.path().join("cmp")).unwrap().is_empty());
    }

    #[test]
    fn plot_data_of_no_runs_is_header_only() {
        assert_eq!(emit_plot_data(&[]), format!("{PLOT_HEADER}\n"));
    }

    #[test]
    fn plot_data_copies_history_values_verbatim() {
        let mut report = MetricsReport::from_scores(&[0.2, 0.7], &[false, true]);
        report.history = vec![
            EpochRecord {
                epoch: 1,
                train_loss: 0.1 + 0.2,
                val_auc: Some(1.0 / 3.0),
                val_log_loss: std::f64::consts::LN_2,
            },
            EpochRecord {
                epoch: 2,
                train_loss: 0.25,
                val_auc: None,
                val_log_loss: 0.5,
            },
        ];
        let series = PlotSeries {
            run_id: "r".into(),
            k: 5,
            variant: "dti".into(),
            history_csv: report.history_csv(),
        };
        let csv = emit_plot_data(std::slice::from_ref(&series));
        let mut seen = std::collections::HashSet::new();
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            assert!(seen.insert((cols[0].to_owned(), cols[3].to_owned(), cols[4].to_owned())));
        }
        assert_eq!(seen.len(), 6);
        for line in series.history_csv.lines().skip(1) {
            let value = line.rsplit(',').next().unwrap();
            assert!(csv.lines().any(|l| l.ends_with(&format!(",{value}"))));
        }
        assert!(csv.contains("r,5,dti,1,train_loss,0.30000000000000004\n"));
    }
}
