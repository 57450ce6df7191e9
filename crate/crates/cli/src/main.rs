use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dti_core::experiment::{
    ablate, compare_paradigms, flops_report, run_experiment, DatasetSource, ExperimentConfig, ExperimentError,
};
use dti_core::flops::{dti_flops, reduction_ratio, sliding_window_flops, CostModelInputs, PromptCount};
use dti_core::leakage::AblationVariant;
use dti_core::model::{LossWeighting, ModelParams, ResetGranularity};
use dti_core::prompt::build_streaming_prompts;
use dti_core::train::{finite_difference_check, Paradigm, PreparedPrompt};
use dti_core::{PositionalMode, PromptingConfig, SyntheticConfig};

#[derive(Parser)]
#[command(name = "dti", version, about = "Sliding-window vs. DTI training laboratory")]
struct Cli {
    /// Root joined onto relative output directories.
    #[arg(long, env = "DTI_OUTPUT_ROOT", global = true)]
    output_root: Option<PathBuf>,
    /// Worker budget for `compare` and `ablate`; cells run one after another.
    #[arg(long, env = "DTI_WORKERS", default_value_t = 1, global = true)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run(RunArgs),
    /// Sliding-window baseline versus DTI at each k.
    Compare(GridArgs),
    /// DTI fix-ablation grid.
    Ablate(GridArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Analytic (and optionally measured) training-cost comparison.
    Flops(FlopsArgs),
    /// Print the default configuration as JSON.
    Config,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// JSON experiment configuration; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    label: Option<String>,
    /// Context interactions per target.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Synthetic users (synthetic datasets only).
    #[arg(long)]
    users: Option<usize>,
    /// Interaction CSV replacing the configured dataset.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long, value_enum)]
    paradigm: Option<ParadigmArg>,
    #[arg(long)]
    k: Option<usize>,
    /// Write the attention maps of the first validation prompt.
    #[arg(long)]
    dump_attention: bool,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Overrides,
    /// Comma-separated k values.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Absolute)]
    positional_mode: ModeArg,
    #[arg(long, value_enum, default_value_t = GranularityArg::PerQuery)]
    granularity: GranularityArg,
    #[arg(long)]
    no_reset: bool,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 3)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, default_value_t = 1000)]
    m: usize,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    k: usize,
    /// Tokens per interaction.
    #[arg(long, default_value_t = 5)]
    c: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    /// Also count MACs over the training prompts of this configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParadigmArg {
    SlidingWindow,
    Dti,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Absolute,
    Rope,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    PerQuery,
    PerToken,
}

fn load_config(o: &Overrides, output_root: Option<&PathBuf>) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &o.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = &o.csv {
        cfg.dataset = DatasetSource::Csv { path: path.clone() };
    }
    if let Some(users) = o.users {
        match &mut cfg.dataset {
            DatasetSource::Synthetic(s) => s.num_users = users,
            DatasetSource::Csv { .. } => {
                return Err(ExperimentError::config("users", "only applies to synthetic datasets"))
            }
        }
    }
    if let Some(dir) = &o.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(root) = output_root {
        if cfg.output_dir.is_relative() {
            cfg.output_dir = root.join(&cfg.output_dir);
        }
    }
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if o.label.is_some() {
        cfg.label = o.label.clone();
    }
    if let Some(n) = o.n {
        cfg.prompting.n = n;
    }
    if let Some(epochs) = o.epochs {
        cfg.train.max_epochs = epochs;
    }
    if let Some(lr) = o.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    if cli.workers == 0 {
        return Err(ExperimentError::config("workers", "must be at least 1"));
    }
    let root = cli.output_root.as_ref();
    match cli.command {
        Command::Run(args) => {
            let mut cfg = load_config(&args.common, root)?;
            if let Some(p) = args.paradigm {
                cfg.train.paradigm = match p {
                    ParadigmArg::SlidingWindow => Paradigm::SlidingWindow,
                    ParadigmArg::Dti => Paradigm::Dti,
                };
            }
            if let Some(k) = args.k {
                cfg.train.k = k;
            }
            cfg.dump_attention |= args.dump_attention;
            let summary = run_experiment(&cfg)?;
            let m = &summary.metrics;
            println!(
                "{}: best epoch {}, val auc {}, test auc {}, test log loss {:.5}, test f1 {:.4}, {:.1}s",
                summary.dir.display(),
                m.best_epoch,
                fmt_auc(m.validation.auc),
                fmt_auc(m.test.auc),
                m.test.log_loss,
                m.test.f1,
                summary.timing.train_seconds
            );
        }
        Command::Compare(args) => {
            let mut cfg = load_config(&args.common, root)?;
            if let Some(ks) = args.ks {
                cfg.compare_ks = ks;
            }
            log::info!("running {} cells sequentially (workers={})", cfg.compare_ks.len() + 1, cli.workers);
            let report = compare_paradigms(&cfg)?;
            print!("{}", report.to_table());
        }
        Command::Ablate(args) => {
            let mut cfg = load_config(&args.common, root)?;
            if let Some(ks) = args.ks {
                cfg.ablation_ks = ks;
            }
            let grid = ablate(&cfg, &AblationVariant::standard())?;
            for variant in &grid.variants {
                let trend: Vec<String> = grid.auc_trend(&variant.name).into_iter().map(fmt_auc).collect();
                println!("{:<22}{}", variant.name, trend.join("  "));
            }
        }
        Command::Gradcheck(args) => gradcheck(&args)?,
        Command::Flops(args) => flops(&args)?,
        Command::Config => println!("{}", ExperimentConfig::default().to_json()),
    }
    Ok(())
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"))
}

fn gradcheck(args: &GradcheckArgs) -> Result<(), ExperimentError> {
    let cfg = ExperimentConfig {
        dataset: DatasetSource::Synthetic(SyntheticConfig {
            num_users: 3,
            items_per_user: 16,
            num_items: 20,
            rng_seed: args.seed,
            ..SyntheticConfig::default()
        }),
        prompting: PromptingConfig {
            n: 3,
            k: 4,
            ..PromptingConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let split = cfg.load_split()?;
    let mut model = cfg.resolved(&split.vocabulary).model;
    model.d_model = 8;
    model.ff_dim = 16;
    model.positional_mode = match args.positional_mode {
        ModeArg::Absolute => PositionalMode::Absolute,
        ModeArg::Rope => PositionalMode::Rope,
        ModeArg::None => PositionalMode::None,
    };
    model.reset.enabled = !args.no_reset;
    model.reset.granularity = match args.granularity {
        GranularityArg::PerQuery => ResetGranularity::PerQuery,
        GranularityArg::PerToken => ResetGranularity::PerToken,
    };
    let params = ModelParams::init(model, args.seed)?;
    let mut prepared = Vec::new();
    for user in split.users.iter().take(2) {
        for p in build_streaming_prompts(&user.train_sequence(), &cfg.prompting).iter().take(1) {
            prepared.push(PreparedPrompt::new(p, &split, &cfg.prompting).map_err(dti_core::train::TrainError::from)?);
        }
    }
    let batch: Vec<_> = prepared.iter().map(|p| p.example()).collect();
    let report = finite_difference_check(&params, &batch, args.eps, args.samples, args.seed, LossWeighting::PerPrompt)?;
    for (name, err, samples) in &report.per_tensor {
        println!("{name:<24}{err:>12.3e}  ({samples} samples)");
    }
    println!("max relative error {:.3e} (tolerance {:.1e})", report.max_relative_error, args.tolerance);
    if report.max_relative_error >= args.tolerance {
        return Err(ExperimentError::Train(dti_core::train::TrainError::InvalidConfig(format!(
            "gradient check failed: {:.3e} >= {:.1e}",
            report.max_relative_error, args.tolerance
        ))));
    }
    Ok(())
}

fn flops(args: &FlopsArgs) -> Result<(), ExperimentError> {
    if args.k == 0 || args.n == 0 || args.m <= args.n || args.c == 0 {
        return Err(ExperimentError::config("flops", "need m > n >= 1, k >= 1, c >= 1"));
    }
    let inputs = CostModelInputs::uniform(args.m, args.n, args.k, args.c, args.layers, args.d_model);
    let sw = sliding_window_flops(&inputs);
    let approx = dti_flops(&inputs, PromptCount::Approximate);
    let exact = dti_flops(&inputs, PromptCount::Exact);
    let ratio = reduction_ratio(inputs.big_n, inputs.big_k, inputs.k);
    if args.json {
        let value = serde_json::json!({
            "inputs": inputs,
            "sliding_window": sw,
            "dti_approximate": approx,
            "dti_exact": exact,
            "reduction_ratio": ratio,
        });
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        println!("N={} K={} L={} d={}", inputs.big_n, inputs.big_k, inputs.layers, inputs.d_model);
        println!("sliding window      {sw:.0}");
        println!("dti (m/k prompts)   {approx:.0}");
        println!("dti (exact prompts) {exact:.0}");
        println!("reduction N k/(N+K) {ratio:.4}");
    }
    if let Some(path) = &args.config {
        let mut cfg = ExperimentConfig::from_json_file(path)?;
        cfg.output_dir = PathBuf::from("unused");
        let split = cfg.load_split()?;
        let resolved = cfg.resolved(&split.vocabulary);
        let report = flops_report(&split, &resolved.prompting, &resolved.model, args.k)?;
        if args.json {
            println!("{}", serde_json::to_string_pretty(&report)?);
        } else {
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
