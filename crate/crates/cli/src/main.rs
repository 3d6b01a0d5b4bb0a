//! `dnfnet`: train/evaluate DNF-Net and FCN models, run grid searches and
//! ablations, generate the synthetic benchmark suite, compare
//! feature-selection regimes, and emit VC-dimension curve tables.
//!
//! All runs are deterministic for a fixed manifest: outputs carry no
//! timestamps, and `--jobs 1` guarantees fully serial execution, so reruns
//! are byte-identical.

use clap::{Args, Parser, Subcommand, ValueEnum};
use dnfnet_core::data::{
    gen_synth, load_csv, write_csv, RawDataset, SynthManifest, SynthSpec, SynthTask,
    SYNTH_DIMENSIONS,
};
use dnfnet_core::feature_selection::MaskPair;
use dnfnet_core::model::{
    AblationFlags, Checkpoint, DnfNet, DnfNetSpec, Fcn, FcnSpec, MaskMode, MaskedFcn, RngState,
    Task, TrainModel, WidthScheme,
};
use dnfnet_core::train::{
    evaluate_split, grid_search, make_partitions, mean, sem, train_model, CellOutcome,
    ScoreMetric, SealedScore, TrainConfig,
};
use dnfnet_core::vc::emit_vc_curves;
use dnfnet_core::{data::DatasetSplit, Real};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dnfnet", version, about = "Soft-DNF networks for tabular data")]
struct CliArgs {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset as CSV
    Synth(SynthArgs),
    /// Train a single model configuration on one partition
    Train(TrainArgs),
    /// Score a saved checkpoint on a CSV dataset
    Evaluate(EvaluateArgs),
    /// Grid search over configurations with validation-based selection
    Gridsearch(GridArgs),
    /// Compare oracle / learned / no feature selection on a synthetic task
    FsCompare(FsCompareArgs),
    /// Emit tree-vs-DNF VC-dimension curve tables
    VcCurves(VcCurvesArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Table,
    Records,
}

#[derive(Args, Serialize)]
struct OutputArgs {
    /// Output directory for results, manifests, and checkpoints
    #[arg(long, env = "DNFNET_OUT_DIR", default_value = ".")]
    #[serde(skip)] // keep manifests byte-identical across output locations
    out_dir: PathBuf,
    /// Output style on stdout
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum TaskArg {
    Syn1,
    Syn2,
    Syn3,
    Syn4,
    Syn5,
    Syn6,
}

impl From<TaskArg> for SynthTask {
    fn from(t: TaskArg) -> SynthTask {
        match t {
            TaskArg::Syn1 => SynthTask::Syn1,
            TaskArg::Syn2 => SynthTask::Syn2,
            TaskArg::Syn3 => SynthTask::Syn3,
            TaskArg::Syn4 => SynthTask::Syn4,
            TaskArg::Syn5 => SynthTask::Syn5,
            TaskArg::Syn6 => SynthTask::Syn6,
        }
    }
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Feature dimension (≥ 11; the first 11 features drive the labels)
    #[arg(long, default_value_t = 11)]
    d: usize,
    /// Number of samples
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Emit one file per benchmark dimension (11..300) instead of a single d
    #[arg(long)]
    sweep_d: bool,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FamilyArg {
    Dnfnet,
    Fcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SchemeArg {
    Constant,
    Halving,
}

impl From<SchemeArg> for WidthScheme {
    fn from(s: SchemeArg) -> WidthScheme {
        match s {
            SchemeArg::Constant => WidthScheme::Constant,
            SchemeArg::Halving => WidthScheme::Halving,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
enum MetricArg {
    #[value(name = "log-loss")]
    LogLoss,
    #[value(name = "roc-auc")]
    RocAuc,
    #[value(name = "accuracy")]
    Accuracy,
}

impl From<MetricArg> for ScoreMetric {
    fn from(m: MetricArg) -> ScoreMetric {
        match m {
            MetricArg::LogLoss => ScoreMetric::LogLoss,
            MetricArg::RocAuc => ScoreMetric::RocAuc,
            MetricArg::Accuracy => ScoreMetric::Accuracy,
        }
    }
}

/// Score used in selection and reporting: ROC AUC for binary tasks,
/// log-loss for multiclass, unless overridden.
fn resolve_metric(choice: Option<MetricArg>, class_count: usize) -> ScoreMetric {
    match choice {
        Some(m) => m.into(),
        None if class_count == 2 => ScoreMetric::RocAuc,
        None => ScoreMetric::LogLoss,
    }
}

#[derive(Args, Serialize)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = FamilyArg::Dnfnet)]
    model: FamilyArg,
    /// Number of DNNF formulas (dnfnet)
    #[arg(long, default_value_t = 16)]
    n_formulas: usize,
    /// Feature-selection cardinality hyperparameter (dnfnet)
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Ablation preset exp1..exp7 (overrides the --no-* flags)
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    no_dnf_structure: bool,
    #[arg(long)]
    no_feature_selection: bool,
    #[arg(long)]
    no_localization: bool,
    /// Hidden-block count (fcn)
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// First-block width (fcn)
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::Constant)]
    width_scheme: SchemeArg,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
}

impl ModelArgs {
    fn ablation_flags(&self) -> Result<AblationFlags, String> {
        match &self.ablation {
            Some(name) => AblationFlags::preset(name).map_err(|e| e.to_string()),
            None => Ok(AblationFlags {
                dnf_structure: !self.no_dnf_structure,
                feature_selection: !self.no_feature_selection,
                localization: !self.no_localization,
            }),
        }
    }
}

#[derive(Args, Serialize)]
struct ProtocolArgs {
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    #[arg(long, default_value_t = 30)]
    early_stop_patience: usize,
    /// Selection/report metric; defaults to roc-auc (binary) or log-loss
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
}

impl ProtocolArgs {
    fn config(&self, lr: f64, seed: u64, metric: ScoreMetric) -> TrainConfig {
        let mut config = TrainConfig::desk(lr, seed, metric);
        config.batch_size = self.batch_size;
        config.max_epochs = self.max_epochs;
        config.early_stop_patience = self.early_stop_patience.min(self.max_epochs - 1);
        config
    }
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Dataset CSV with a header row
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "label")]
    label_column: String,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Which of the five partitions to train on (0..=4)
    #[arg(long, default_value_t = 0)]
    partition: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "label")]
    label_column: String,
    /// Standardization statistics from training (a `scaler.json`); without
    /// it the evaluation data is standardized on itself
    #[arg(long)]
    scaler: Option<PathBuf>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Serialize)]
struct GridArgs {
    /// Dataset CSV (mutually exclusive with --synth-task)
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    label_column: String,
    /// Generate the dataset in memory instead of reading a CSV
    #[arg(long, value_enum)]
    synth_task: Option<TaskArg>,
    #[arg(long, default_value_t = 11)]
    d: usize,
    #[arg(long, default_value_t = 10_000)]
    n_samples: usize,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    #[arg(long, value_enum, default_value_t = FamilyArg::Dnfnet)]
    model: FamilyArg,
    /// Ablation preset exp1..exp7 (dnfnet)
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "16")]
    n_formulas_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    beta_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.05")]
    lr_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    depth_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    width_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.0")]
    l2_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.0")]
    dropout_grid: Vec<f64>,
    #[arg(long, value_enum, default_value_t = SchemeArg::Constant)]
    width_scheme: SchemeArg,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Restrict to a subset of partitions, e.g. `0` or `0,1,2` (default all 5)
    #[arg(long, value_delimiter = ',')]
    partitions: Option<Vec<usize>>,
    /// Concurrent grid cells; 1 is fully serial and deterministic
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Serialize)]
struct FsCompareArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long, default_value_t = 11)]
    d: usize,
    #[arg(long, default_value_t = 10_000)]
    n_samples: usize,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// β grid for the learned-mask regime
    #[arg(long, value_delimiter = ',', default_value = "1.3,1.0,0.7,0.4")]
    beta_grid: Vec<f64>,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    #[arg(long, default_value_t = 30)]
    early_stop_patience: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Serialize)]
struct VcCurvesArgs {
    #[arg(long, default_value_t = 1)]
    n_min: usize,
    #[arg(long, default_value_t = 300)]
    n_max: usize,
    #[arg(long, default_value_t = 1)]
    n_step: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    tree_ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64,2048")]
    dnf_ks: Vec<usize>,
    /// Logarithm base of the DNF bound
    #[arg(long, default_value_t = 2.0)]
    log_base: f64,
    #[command(flatten)]
    out: OutputArgs,
}

fn main() -> ExitCode {
    let cli = CliArgs::parse();
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Gridsearch(args) => cmd_gridsearch(args),
        Command::FsCompare(args) => cmd_fs_compare(args),
        Command::VcCurves(args) => cmd_vc_curves(args),
    };
    match outcome {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

type CmdResult = Result<ExitCode, String>;

fn usage_error(msg: &str) -> CmdResult {
    eprintln!("usage error: {msg}");
    Ok(ExitCode::from(2))
}

fn write_manifest<T: Serialize>(out_dir: &Path, name: &str, subcommand: &str, args: &T) -> Result<(), String> {
    let manifest = json!({
        "schema": "run-manifest-v1",
        "subcommand": subcommand,
        "args": serde_json::to_value(args).map_err(|e| e.to_string())?,
    });
    std::fs::create_dir_all(out_dir).map_err(|e| e.to_string())?;
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| e.to_string())?;
    text.push('\n');
    std::fs::write(out_dir.join(name), text).map_err(|e| e.to_string())
}

fn write_records(path: &Path, records: &[serde_json::Value]) -> Result<(), String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| e.to_string())?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| e.to_string())
}

fn print_output(format: Format, records: &[serde_json::Value], table: &str) {
    match format {
        Format::Table => println!("{table}"),
        Format::Records => {
            for r in records {
                println!("{r}");
            }
        }
    }
}

// ---- synth -----------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> CmdResult {
    if args.d < 11 {
        return usage_error("--d must be at least 11 (the label laws read features 1..11)");
    }
    let dims: Vec<usize> = if args.sweep_d {
        SYNTH_DIMENSIONS.to_vec()
    } else {
        vec![args.d]
    };
    write_manifest(&args.out.out_dir, "synth_manifest.json", "synth", &args)?;
    let task: SynthTask = args.task.into();
    let mut summary = Vec::new();
    for d in dims {
        let spec = SynthSpec {
            task,
            d,
            n_samples: args.n,
            seed: args.seed,
        };
        let data = gen_synth::<Real>(&spec).map_err(|e| e.to_string())?;
        let name = format!("{task}_d{d}_n{}_seed{}", args.n, args.seed);
        let csv_path = args.out.out_dir.join(format!("{name}.csv"));
        write_csv(&data, &csv_path).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&csv_path).map_err(|e| e.to_string())?;
        let manifest = SynthManifest::new(spec, &bytes);
        let manifest_path = args.out.out_dir.join(format!("{name}.manifest.json"));
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| e.to_string())?;
        text.push('\n');
        std::fs::write(&manifest_path, text).map_err(|e| e.to_string())?;
        summary.push(json!({
            "schema": "synth-file-v1",
            "path": csv_path.to_string_lossy(),
            "rows": data.n,
            "d": d,
        }));
    }
    let table = summary
        .iter()
        .map(|r| format!("{}  ({} rows)", r["path"].as_str().unwrap(), r["rows"]))
        .collect::<Vec<_>>()
        .join("\n");
    print_output(args.out.format, &summary, &table);
    Ok(ExitCode::SUCCESS)
}

// ---- shared model/training plumbing ----------------------------------------

fn mix_seed(seed: u64, partition: usize, config: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((partition as u64 + 1) << 48)
        ^ ((config as u64 + 1) << 24)
}

enum AnyModel {
    Dnfnet(DnfNet<Real>),
    Fcn(Fcn<Real>),
}

impl AnyModel {
    fn as_train(&mut self) -> &mut dyn TrainModel<Real> {
        match self {
            AnyModel::Dnfnet(m) => m,
            AnyModel::Fcn(m) => m,
        }
    }
}

fn build_dnfnet(
    n_formulas: usize,
    d: usize,
    task: Task,
    beta: f64,
    ablation: AblationFlags,
    init_seed: u64,
) -> Result<DnfNet<Real>, String> {
    let spec = DnfNetSpec {
        n: n_formulas,
        d,
        task,
        beta,
        ablation,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    DnfNet::init(spec, &mut rng).map_err(|e| e.to_string())
}

fn build_fcn(
    depth: usize,
    width: usize,
    scheme: WidthScheme,
    dropout: f64,
    l2: f64,
    lr: f64,
    d: usize,
    task: Task,
    init_seed: u64,
) -> Fcn<Real> {
    let spec = FcnSpec {
        depth,
        width,
        width_scheme: scheme,
        dropout,
        l2,
        initial_lr: lr,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    Fcn::init(spec, d, task, &mut rng)
}

fn metric_records(m: &dnfnet_core::metrics::Metrics) -> serde_json::Value {
    json!({
        "log_loss": m.log_loss,
        "roc_auc": m.roc_auc,
        "accuracy": m.accuracy,
    })
}

// ---- train -----------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> CmdResult {
    if args.partition > 4 {
        return usage_error("--partition must be in 0..=4");
    }
    let data = load_csv::<Real>(&args.data, &args.label_column).map_err(|e| e.to_string())?;
    let partitions = make_partitions(&data, 1).map_err(|e| e.to_string())?;
    let (train, val, test) = partitions[args.partition]
        .materialize(&data)
        .map_err(|e| e.to_string())?;
    let task = Task::for_class_count(data.class_count);
    let metric = resolve_metric(args.protocol.metric, data.class_count);
    let config = args.protocol.config(args.protocol.lr, args.seed, metric);

    let init_seed = mix_seed(args.seed, args.partition, 0);
    let mut model = match args.model.model {
        FamilyArg::Dnfnet => AnyModel::Dnfnet(build_dnfnet(
            args.model.n_formulas,
            data.d,
            task,
            args.model.beta,
            args.model.ablation_flags()?,
            init_seed,
        )?),
        FamilyArg::Fcn => AnyModel::Fcn(build_fcn(
            args.model.depth,
            args.model.width,
            args.model.width_scheme.into(),
            args.model.dropout,
            args.model.l2,
            args.protocol.lr,
            data.d,
            task,
            init_seed,
        )),
    };

    write_manifest(&args.out.out_dir, "train_manifest.json", "train", &args)?;
    let history =
        train_model(model.as_train(), &train, &val, &config).map_err(|e| e.to_string())?;
    let val_metrics = evaluate_split(model.as_train(), &val).map_err(|e| e.to_string())?;
    let test_metrics = evaluate_split(model.as_train(), &test).map_err(|e| e.to_string())?;

    let mut records: Vec<serde_json::Value> = history
        .epochs
        .iter()
        .map(|e| {
            json!({
                "schema": "train-epoch-v1",
                "epoch": e.epoch,
                "train_loss": e.train_loss,
                "val_score": e.val_score,
                "lr": e.lr,
            })
        })
        .collect();
    let summary = json!({
        "schema": "train-summary-v1",
        "metric": metric.to_string(),
        "best_epoch": history.best_epoch,
        "best_val_score": history.best_val_score,
        "stopped_early": history.stopped_early,
        "val": metric_records(&val_metrics),
        "test": metric_records(&test_metrics),
    });
    records.push(summary.clone());
    write_records(&args.out.out_dir.join("train_results.jsonl"), &records)?;

    // standardization statistics for later `evaluate --scaler`
    let scaler = json!({
        "schema": "scaler-v1",
        "means": train.feature_means,
        "stds": train.feature_stds,
    });
    std::fs::write(
        args.out.out_dir.join("scaler.json"),
        serde_json::to_string_pretty(&scaler).map_err(|e| e.to_string())? + "\n",
    )
    .map_err(|e| e.to_string())?;

    let rng_state = RngState::capture(&ChaCha8Rng::seed_from_u64(config.seed));
    let ckpt = match model {
        AnyModel::Dnfnet(m) => Checkpoint::DnfNet(Box::new(m)),
        AnyModel::Fcn(m) => Checkpoint::Fcn(Box::new(m)),
    };
    ckpt.save(&args.out.out_dir.join("model.ckpt"), &rng_state)
        .map_err(|e| e.to_string())?;

    let table = format!(
        "metric: {metric}\nbest epoch: {} (val {:.6})\ntest: log-loss {:.6}  accuracy {:.4}{}",
        history.best_epoch,
        history.best_val_score,
        test_metrics.log_loss,
        test_metrics.accuracy,
        test_metrics
            .roc_auc
            .map(|a| format!("  roc-auc {a:.3}"))
            .unwrap_or_default(),
    );
    print_output(args.out.format, &[summary], &table);
    Ok(ExitCode::SUCCESS)
}

// ---- evaluate --------------------------------------------------------------

fn cmd_evaluate(args: EvaluateArgs) -> CmdResult {
    let (ckpt, _) = Checkpoint::load(&args.checkpoint).map_err(|e| e.to_string())?;
    let data = load_csv::<Real>(&args.data, &args.label_column).map_err(|e| e.to_string())?;
    let split = standardized_full_split(&data, args.scaler.as_deref())?;
    let metrics = match &ckpt {
        Checkpoint::DnfNet(m) => evaluate_split(m.as_ref(), &split),
        Checkpoint::Fcn(m) => evaluate_split(m.as_ref(), &split),
    }
    .map_err(|e| e.to_string())?;
    let record = json!({
        "schema": "evaluate-v1",
        "rows": split.n,
        "metrics": metric_records(&metrics),
    });
    let table = format!(
        "rows: {}\nlog-loss {:.6}  accuracy {:.4}{}",
        split.n,
        metrics.log_loss,
        metrics.accuracy,
        metrics
            .roc_auc
            .map(|a| format!("  roc-auc {a:.3}"))
            .unwrap_or_default(),
    );
    print_output(args.out.format, &[record], &table);
    Ok(ExitCode::SUCCESS)
}

fn standardized_full_split(
    data: &RawDataset<Real>,
    scaler: Option<&Path>,
) -> Result<DatasetSplit<Real>, String> {
    let all: Vec<usize> = (0..data.n).collect();
    let mut split = dnfnet_core::data::standardize(data, &[&all])
        .map_err(|e| e.to_string())?
        .pop()
        .unwrap();
    if let Some(path) = scaler {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let read = |key: &str| -> Result<Vec<f64>, String> {
            v[key]
                .as_array()
                .ok_or_else(|| format!("scaler file missing `{key}`"))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| "non-numeric scaler entry".to_string()))
                .collect()
        };
        let means = read("means")?;
        let stds = read("stds")?;
        if means.len() != data.d || stds.len() != data.d {
            return Err("scaler dimension does not match the dataset".into());
        }
        for (i, row) in data.features.chunks(data.d).enumerate() {
            for (j, &x) in row.iter().enumerate() {
                split.features[i * data.d + j] = (x - means[j]) / stds[j];
            }
        }
        split.feature_means = means;
        split.feature_stds = stds;
    }
    Ok(split)
}

// ---- gridsearch ------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "family", rename_all = "lowercase")]
enum GridConfig {
    Dnfnet {
        n_formulas: usize,
        beta: f64,
        lr: f64,
    },
    Fcn {
        depth: usize,
        width: usize,
        scheme: WidthScheme,
        l2: f64,
        dropout: f64,
        lr: f64,
    },
}

impl GridConfig {
    fn lr(&self) -> f64 {
        match self {
            GridConfig::Dnfnet { lr, .. } | GridConfig::Fcn { lr, .. } => *lr,
        }
    }
}

fn load_grid_dataset(args: &GridArgs) -> Result<RawDataset<Real>, String> {
    match (&args.data, args.synth_task) {
        (Some(_), Some(_)) => Err("pass either --data or --synth-task, not both".into()),
        (None, None) => Err("one of --data or --synth-task is required".into()),
        (Some(path), None) => load_csv::<Real>(path, &args.label_column).map_err(|e| e.to_string()),
        (None, Some(task)) => gen_synth::<Real>(&SynthSpec {
            task: task.into(),
            d: args.d,
            n_samples: args.n_samples,
            seed: args.data_seed,
        })
        .map_err(|e| e.to_string()),
    }
}

fn cmd_gridsearch(args: GridArgs) -> CmdResult {
    let data = load_grid_dataset(&args)?;
    let ablation = match &args.ablation {
        Some(name) => match AblationFlags::preset(name) {
            Ok(f) => f,
            Err(e) => return usage_error(&e.to_string()),
        },
        None => AblationFlags::ALL_ON,
    };
    let configs: Vec<GridConfig> = match args.model {
        FamilyArg::Dnfnet => {
            let mut out = Vec::new();
            for &n in &args.n_formulas_grid {
                for &beta in &args.beta_grid {
                    for &lr in &args.lr_grid {
                        out.push(GridConfig::Dnfnet { n_formulas: n, beta, lr });
                    }
                }
            }
            out
        }
        FamilyArg::Fcn => {
            let mut out = Vec::new();
            for &depth in &args.depth_grid {
                for &width in &args.width_grid {
                    for &l2 in &args.l2_grid {
                        for &dropout in &args.dropout_grid {
                            for &lr in &args.lr_grid {
                                out.push(GridConfig::Fcn {
                                    depth,
                                    width,
                                    scheme: args.width_scheme.into(),
                                    l2,
                                    dropout,
                                    lr,
                                });
                            }
                        }
                    }
                }
            }
            out
        }
    };
    if configs.is_empty() {
        return usage_error("the configuration grid is empty");
    }

    let all_partitions = make_partitions(&data, 1).map_err(|e| e.to_string())?;
    let partition_ids: Vec<usize> = match &args.partitions {
        Some(ids) => {
            if ids.iter().any(|&i| i >= all_partitions.len()) {
                return usage_error("--partitions indices must be in 0..=4");
            }
            ids.clone()
        }
        None => (0..all_partitions.len()).collect(),
    };
    let splits: Vec<_> = partition_ids
        .iter()
        .map(|&i| all_partitions[i].materialize(&data))
        .collect::<dnfnet_core::Result<_>>()
        .map_err(|e| e.to_string())?;
    let task = Task::for_class_count(data.class_count);
    let metric = resolve_metric(args.protocol.metric, data.class_count);

    write_manifest(&args.out.out_dir, "grid_manifest.json", "gridsearch", &args)?;

    let run = |seed: u64, p: usize, c: usize| -> dnfnet_core::Result<CellOutcome> {
        let (train, val, test) = &splits[p];
        let config = &configs[c];
        let init_seed = mix_seed(seed, partition_ids[p], c);
        let tc = args.protocol.config(config.lr(), mix_seed(seed, partition_ids[p], c + 7919), metric);
        let (val_metrics, test_metrics) = match config {
            GridConfig::Dnfnet { n_formulas, beta, .. } => {
                let spec = DnfNetSpec {
                    n: *n_formulas,
                    d: data.d,
                    task,
                    beta: *beta,
                    ablation,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
                let mut model = DnfNet::<Real>::init(spec, &mut rng)?;
                train_model(&mut model, train, val, &tc)?;
                (evaluate_split(&model, val)?, evaluate_split(&model, test)?)
            }
            GridConfig::Fcn {
                depth,
                width,
                scheme,
                l2,
                dropout,
                lr,
            } => {
                let spec = FcnSpec {
                    depth: *depth,
                    width: *width,
                    width_scheme: *scheme,
                    dropout: *dropout,
                    l2: *l2,
                    initial_lr: *lr,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
                let mut model = Fcn::<Real>::init(spec, data.d, task, &mut rng);
                train_model(&mut model, train, val, &tc)?;
                (evaluate_split(&model, val)?, evaluate_split(&model, test)?)
            }
        };
        Ok(CellOutcome {
            val_score: metric.extract(&val_metrics)?,
            test_score: SealedScore::seal(metric.extract(&test_metrics)?),
        })
    };

    let result = grid_search(
        configs.len(),
        partition_ids.len(),
        &args.seeds,
        metric,
        args.jobs,
        run,
    )
    .map_err(|e| e.to_string())?;

    let mut records: Vec<serde_json::Value> = Vec::new();
    for cell in &result.cells {
        records.push(json!({
            "schema": "grid-cell-v1",
            "seed": cell.seed,
            "partition": partition_ids[cell.partition],
            "config": serde_json::to_value(&configs[cell.config]).unwrap(),
            "val_score": cell.val_score,
        }));
    }
    for seed_summary in &result.per_seed {
        for choice in &seed_summary.choices {
            records.push(json!({
                "schema": "grid-choice-v1",
                "seed": seed_summary.seed,
                "partition": partition_ids[choice.partition],
                "config": serde_json::to_value(&configs[choice.config]).unwrap(),
                "val_score": choice.val_score,
                "test_score": choice.test_score,
            }));
        }
        records.push(json!({
            "schema": "grid-seed-aggregate-v1",
            "seed": seed_summary.seed,
            "mean_test": seed_summary.mean_test,
            "sem_test": seed_summary.sem_test,
        }));
    }
    records.push(json!({
        "schema": "grid-aggregate-v1",
        "metric": metric.to_string(),
        "mean_test": result.mean_test,
        "sem_test": result.sem_test,
        "failures": result.failures,
    }));
    write_records(&args.out.out_dir.join("grid_results.jsonl"), &records)?;

    let mut table = format!("metric: {metric}\n");
    for s in &result.per_seed {
        table.push_str(&format!(
            "seed {}: {:.6} ± {:.6}\n",
            s.seed, s.mean_test, s.sem_test
        ));
    }
    table.push_str(&format!(
        "overall: {:.6} ± {:.6}",
        result.mean_test, result.sem_test
    ));
    print_output(args.out.format, &records, &table);

    if result.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

// ---- fs-compare ------------------------------------------------------------

fn fs_fcn(d: usize, lr: f64, init_seed: u64) -> Fcn<Real> {
    // the comparison network: two ReLU blocks of 64 and 32 units
    build_fcn(
        2,
        64,
        WidthScheme::Halving,
        0.0,
        0.0,
        lr,
        d,
        Task::Binary,
        init_seed,
    )
}

fn cmd_fs_compare(args: FsCompareArgs) -> CmdResult {
    if args.d < 11 {
        return usage_error("--d must be at least 11");
    }
    let task: SynthTask = args.task.into();
    let data = gen_synth::<Real>(&SynthSpec {
        task,
        d: args.d,
        n_samples: args.n_samples,
        seed: args.data_seed,
    })
    .map_err(|e| e.to_string())?;
    let partitions = make_partitions(&data, 1).map_err(|e| e.to_string())?;
    let (train, val, test) = partitions[0].materialize(&data).map_err(|e| e.to_string())?;

    write_manifest(&args.out.out_dir, "fs_compare_manifest.json", "fs-compare", &args)?;

    let oracle_mask: Vec<u8> = {
        let relevant = dnfnet_core::data::relevant_features(task);
        // `relevant_features` is 1-based; columns are 0-based.
        (0..args.d).map(|j| u8::from(relevant.contains(&(j + 1)))).collect()
    };

    // jobs: (regime id, seed, beta index or 0)
    #[derive(Clone, Copy)]
    struct Job {
        regime: usize, // 0 oracle, 1 learned, 2 none
        seed: u64,
        beta_idx: usize,
    }
    let mut jobs_list = Vec::new();
    for &seed in &args.seeds {
        jobs_list.push(Job { regime: 0, seed, beta_idx: 0 });
        for b in 0..args.beta_grid.len() {
            jobs_list.push(Job { regime: 1, seed, beta_idx: b });
        }
        jobs_list.push(Job { regime: 2, seed, beta_idx: 0 });
    }

    let run_job = |job: Job| -> dnfnet_core::Result<(f64, f64)> {
        let init_seed = mix_seed(job.seed, job.regime, job.beta_idx);
        let mut tc = TrainConfig::desk(args.lr, mix_seed(job.seed, job.regime, job.beta_idx + 101), ScoreMetric::LogLoss);
        tc.batch_size = args.batch_size;
        tc.max_epochs = args.max_epochs;
        tc.early_stop_patience = args.early_stop_patience.min(args.max_epochs - 1);
        let fcn = fs_fcn(args.d, args.lr, init_seed);
        let mode = match job.regime {
            0 => MaskMode::Oracle(oracle_mask.clone()),
            1 => {
                let mut rng = ChaCha8Rng::seed_from_u64(init_seed ^ 0xF5);
                MaskMode::Learned(MaskPair::init_full(
                    args.d,
                    args.beta_grid[job.beta_idx],
                    "fs",
                    &mut rng,
                ))
            }
            _ => MaskMode::None,
        };
        let mut model = MaskedFcn::new(fcn, mode);
        let history = train_model(&mut model, &train, &val, &tc)?;
        let test_acc = evaluate_split(&model, &test)?.accuracy;
        Ok((history.best_val_score, test_acc))
    };

    let outcomes: Vec<Result<(f64, f64), String>> = if args.jobs <= 1 {
        jobs_list.iter().map(|&j| run_job(j).map_err(|e| e.to_string())).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<(f64, f64), String>>>> =
            (0..jobs_list.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..args.jobs.min(jobs_list.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= jobs_list.len() {
                        break;
                    }
                    let r = run_job(jobs_list[i]).map_err(|e| e.to_string());
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("job executed"))
            .collect()
    };

    let mut records: Vec<serde_json::Value> = Vec::new();
    let mut failed = false;
    // per-seed accuracy per regime; learned picks β by validation log-loss
    // (a smoother selector than accuracy at desk-scale validation sizes)
    let regime_names = ["oracle", "learned", "no-selection"];
    let mut per_regime_acc: Vec<Vec<f64>> = vec![Vec::new(); 3];
    let mut chosen_betas: Vec<f64> = Vec::new();
    for &seed in &args.seeds {
        for regime in 0..3usize {
            let candidates: Vec<(usize, &Result<(f64, f64), String>)> = jobs_list
                .iter()
                .enumerate()
                .filter(|(_, j)| j.seed == seed && j.regime == regime)
                .map(|(i, _)| (i, &outcomes[i]))
                .collect();
            let mut best: Option<(f64, f64, usize)> = None;
            for (i, outcome) in candidates {
                match outcome {
                    Ok((val_ll, test_acc)) => {
                        records.push(json!({
                            "schema": "fs-run-v1",
                            "regime": regime_names[regime],
                            "seed": seed,
                            "beta": (regime == 1).then(|| args.beta_grid[jobs_list[i].beta_idx]),
                            "val_log_loss": val_ll,
                            "test_accuracy": test_acc,
                        }));
                        if best.map(|(v, _, _)| *val_ll < v).unwrap_or(true) {
                            best = Some((*val_ll, *test_acc, jobs_list[i].beta_idx));
                        }
                    }
                    Err(msg) => {
                        eprintln!(
                            "warning: {} run failed (seed {seed}): {msg}",
                            regime_names[regime]
                        );
                        failed = true;
                    }
                }
            }
            if let Some((_, test_acc, beta_idx)) = best {
                per_regime_acc[regime].push(test_acc);
                if regime == 1 {
                    chosen_betas.push(args.beta_grid[beta_idx]);
                }
            }
        }
    }

    let mut table = format!("task {task}, d {}\n", args.d);
    for regime in 0..3usize {
        let accs = &per_regime_acc[regime];
        let (m, s) = if accs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (mean(accs), sem(accs))
        };
        let beta = (regime == 1 && !chosen_betas.is_empty()).then(|| {
            // most frequently selected β; ties go to the larger value
            let mut best = chosen_betas[0];
            let mut best_count = 0;
            for &b in &chosen_betas {
                let count = chosen_betas.iter().filter(|&&x| x == b).count();
                if count > best_count || (count == best_count && b > best) {
                    best = b;
                    best_count = count;
                }
            }
            best
        });
        records.push(json!({
            "schema": "fs-compare-v1",
            "task": task.to_string(),
            "d": args.d,
            "regime": regime_names[regime],
            "accuracy_mean": m,
            "accuracy_sem": s,
            "beta": beta,
        }));
        table.push_str(&format!(
            "{:<13} {:.4} ± {:.4}{}\n",
            regime_names[regime],
            m,
            s,
            beta.map(|b| format!("  (β = {b})")).unwrap_or_default()
        ));
    }
    write_records(&args.out.out_dir.join("fs_compare_results.jsonl"), &records)?;
    print_output(args.out.format, &records, table.trim_end());
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

// ---- vc-curves -------------------------------------------------------------

fn cmd_vc_curves(args: VcCurvesArgs) -> CmdResult {
    if args.n_step == 0 || args.n_max < args.n_min {
        return usage_error("need n-min ≤ n-max and n-step ≥ 1");
    }
    let ns: Vec<usize> = (args.n_min..=args.n_max).step_by(args.n_step).collect();
    let rows = emit_vc_curves(&ns, &args.tree_ranks, &args.dnf_ks, args.log_base)
        .map_err(|e| e.to_string())?;
    write_manifest(&args.out.out_dir, "vc_curves_manifest.json", "vc-curves", &args)?;

    let records: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            json!({
                "schema": "vc-curve-v1",
                "n": r.n,
                "series": r.series,
                "value": r.value,
            })
        })
        .collect();
    write_records(&args.out.out_dir.join("vc_curves.jsonl"), &records)?;

    let mut tsv = String::from("n\tseries\tvalue\n");
    for r in &rows {
        tsv.push_str(&format!("{}\t{}\t{}\n", r.n, r.series, r.value));
    }
    let tsv_path = args.out.out_dir.join("vc_curves.tsv");
    std::fs::write(&tsv_path, &tsv).map_err(|e| e.to_string())?;

    match args.out.format {
        Format::Table => println!("{}", tsv.trim_end()),
        Format::Records => {
            let mut stdout = std::io::stdout().lock();
            for r in &records {
                writeln!(stdout, "{r}").map_err(|e| e.to_string())?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
