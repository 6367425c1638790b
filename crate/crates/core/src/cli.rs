//! Command-line front end.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or validation error,
//! 3 I/O or malformed input. Relative output paths are resolved against
//! `PLPP_OUTPUT_ROOT` when it is set.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{base_novel_split, generate_task, harmonic_mean, restrict_task, AccuracyRow, FewShotTask, SyntheticTaskSpec};
use crate::error::Error;
use crate::fmt::sig17;
use crate::losses::{Objective, PlppConfig};
use crate::model::{init_model, ClassSpec, ImageFeatureBank, ModelConfig, TextModel, WeightSnapshot};
use crate::par::Execution;
use crate::training::{evaluate, train_prompts, GradCheckSetup, Schedule, TrainConfig, TrainData};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;

pub const OUTPUT_ROOT_VAR: &str = "PLPP_OUTPUT_ROOT";
pub const ARTIFACT_VERSION: &str = concat!("plpp ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "plpp", version, about = "Perplexity-regularized prompt tuning on synthetic few-shot tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic few-shot task file.
    GenData(GenDataArgs),
    /// Train a prompt on a task file.
    Train(TrainArgs),
    /// Compare analytic and finite-difference prompt gradients on a toy model.
    GradCheck(GradCheckArgs),
    /// Train over a lambda x alpha x k x seed grid.
    Sweep(SweepArgs),
    /// Summarise a sweep CSV as markdown.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 4)]
    pub shots: usize,
    #[arg(long, default_value_t = 20)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub joint_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 256)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Share of classes in the base group; omit for no base/novel partition.
    #[arg(long)]
    pub base_fraction: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveArg {
    Ce,
    Plpp,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Ce => Objective::CeOnly,
            ObjectiveArg::Plpp => Objective::Plpp,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleArg {
    Constant,
    CosineDecay,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub prompt_len: usize,
    /// Seed of the frozen model weights.
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
}

impl ModelArgs {
    fn config(&self, task: &FewShotTask) -> ModelConfig {
        ModelConfig {
            vocab_size: task.spec.vocab_size,
            embed_dim: self.embed_dim,
            encoder_layers: self.layers,
            attention_heads: self.heads,
            joint_dim: task.spec.joint_dim,
            prompt_len: self.prompt_len,
            seed: self.model_seed,
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.002)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, value_enum, default_value_t = ScheduleArg::CosineDecay)]
    pub schedule: ScheduleArg,
    /// Temperature of the class prediction softmax.
    #[arg(long, default_value_t = 0.07)]
    pub tau: f64,
    /// Temperature of the soft prompt labels.
    #[arg(long, default_value_t = 1.0)]
    pub tau_q: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub epsilon: f64,
}

impl OptimArgs {
    fn train_config(&self, seed: u64, objective: Objective) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            schedule: match self.schedule {
                ScheduleArg::Constant => Schedule::Constant,
                ScheduleArg::CosineDecay => Schedule::CosineDecay,
            },
            seed,
            objective,
        }
    }

    fn plpp(&self, lambda: f64, alpha: f64, k: usize) -> PlppConfig {
        PlppConfig {
            lambda,
            alpha,
            k,
            tau: self.tau,
            tau_q: self.tau_q,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Plpp)]
    pub objective: ObjectiveArg,
    #[arg(long, default_value_t = 10.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradCheckArgs {
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Plpp)]
    pub objective: ObjectiveArg,
    #[arg(long, default_value_t = 10.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    /// Evaluate finite differences on one thread.
    #[arg(long)]
    pub serial: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 10.0])]
    pub lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.2])]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [5])]
    pub ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4])]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Run grid points one after another instead of across threads.
    #[arg(long)]
    pub serial: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Markdown destination; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Written once per command next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: Option<u64>,
    pub config: C,
    pub outputs: Vec<String>,
}

#[derive(Debug)]
enum Failure {
    Lib(Error),
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Check(_) => EXIT_CHECK,
            Failure::Lib(e) => match e {
                Error::Dimension(_) | Error::Parameter(_) => EXIT_USAGE,
                Error::Io { .. } | Error::Format { .. } => EXIT_IO,
                Error::Degenerate(_) | Error::Contract(_) | Error::Undefined(_) => EXIT_CHECK,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Lib(e) => e.fmt(f),
            Failure::Usage(m) | Failure::Check(m) => f.write_str(m),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (program name first) and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from);
    run_with_root(args, root.as_deref())
}

pub fn run_with_root<I, T>(args: I, output_root: Option<&Path>) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::GenData(a) => cmd_gen_data(a, output_root),
        Command::Train(a) => cmd_train(a, output_root),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::Sweep(a) => cmd_sweep(a, output_root),
        Command::Report(a) => cmd_report(a, output_root),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}

fn resolve(path: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_manifest<C: Serialize>(path: &Path, manifest: &RunManifest<'_, C>) -> CmdResult {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    write_file(path, &text)
}

/// `results.csv` -> `results.manifest.json`
fn manifest_beside(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

fn display(paths: &[&Path]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn cmd_gen_data(args: GenDataArgs, root: Option<&Path>) -> CmdResult {
    let spec = SyntheticTaskSpec {
        num_classes: args.classes,
        shots_per_class: args.shots,
        test_per_class: args.test_per_class,
        joint_dim: args.joint_dim,
        noise_sigma: args.noise,
        seed: args.seed,
        vocab_size: args.vocab_size,
    };
    let mut task = generate_task(&spec)?;
    if let Some(f) = args.base_fraction {
        task = base_novel_split(&task, f)?;
    }
    let out = resolve(&args.out, root);
    write_file(&out, &task.to_text())?;
    let manifest_path = manifest_beside(&out);
    write_manifest(
        &manifest_path,
        &RunManifest {
            command: "gen-data",
            version: ARTIFACT_VERSION,
            seed: Some(args.seed),
            config: &args,
            outputs: display(&[&out]),
        },
    )?;
    println!("wrote {} ({} train, {} test images)", out.display(), task.train.len(), task.test.len());
    Ok(())
}

fn load_task(path: &Path) -> Result<FewShotTask, Failure> {
    Ok(FewShotTask::load(path)?)
}

/// Training view of a task: base classes only when it carries a partition.
struct Split {
    classes: Vec<ClassSpec>,
    train: ImageFeatureBank,
    test: ImageFeatureBank,
    novel: Option<(Vec<ClassSpec>, ImageFeatureBank)>,
}

fn split(task: &FewShotTask) -> Result<Split, Failure> {
    Ok(match &task.partition {
        None => Split {
            classes: task.classes.clone(),
            train: task.train.clone(),
            test: task.test.clone(),
            novel: None,
        },
        Some(p) => {
            let (classes, train, test) = restrict_task(task, &p.base)?;
            let (novel_classes, _, novel_test) = restrict_task(task, &p.novel)?;
            Split {
                classes,
                train,
                test,
                novel: Some((novel_classes, novel_test)),
            }
        }
    })
}

struct RunOutcome {
    prompt: crate::model::PromptContext,
    record: crate::training::TrainRecord,
    train_accuracy: f64,
    test_accuracy: f64,
    novel_accuracy: Option<f64>,
}

fn train_once(
    split: &Split,
    model: &TextModel,
    plpp: &PlppConfig,
    config: &TrainConfig,
) -> Result<RunOutcome, Failure> {
    let data = TrainData {
        classes: &split.classes,
        train: &split.train,
        test: &split.test,
    };
    let (prompt, record) = train_prompts(data, model, plpp, config)?;
    let last = record.final_epoch().expect("epoch 0 always recorded");
    let (train_accuracy, test_accuracy) = (last.train_accuracy, last.test_accuracy);
    let novel_accuracy = match &split.novel {
        Some((classes, bank)) => Some(evaluate(&prompt, model, classes, bank, Execution::Serial)?),
        None => None,
    };
    Ok(RunOutcome {
        prompt,
        record,
        train_accuracy,
        test_accuracy,
        novel_accuracy,
    })
}

fn check_hyper(plpp: &PlppConfig, optim: &TrainConfig) -> CmdResult {
    // k is bounded by the vocabulary again once the task is loaded
    plpp.validate(usize::MAX)?;
    optim.validate()?;
    Ok(())
}

fn task_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "task".into())
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::CeOnly => "ce",
        Objective::Plpp => "plpp",
    }
}

fn cmd_train(args: TrainArgs, root: Option<&Path>) -> CmdResult {
    let objective = Objective::from(args.objective);
    let plpp = args.optim.plpp(args.lambda, args.alpha, args.k);
    let config = args.optim.train_config(args.seed, objective);
    check_hyper(&plpp, &config)?;

    let task = load_task(&args.task)?;
    let model = init_model(&args.model.config(&task))?;
    let split = split(&task)?;
    let run = train_once(&split, &model, &plpp, &config)?;

    let dir = resolve(&args.out_dir, root);
    let steps = dir.join("steps.csv");
    let epochs = dir.join("epochs.csv");
    let accuracy = dir.join("accuracy.csv");
    let snapshot = dir.join("snapshot.json");
    write_file(&steps, &run.record.steps_csv())?;
    write_file(&epochs, &run.record.epochs_csv())?;

    let name = task_name(&args.task);
    let row = |split: &str, accuracy: f64| AccuracyRow {
        task: name.clone(),
        seed: args.seed,
        objective: objective_name(objective).into(),
        lambda: plpp.lambda,
        alpha: plpp.alpha,
        k: plpp.k,
        split: split.into(),
        accuracy,
    };
    let mut rows = vec![row("train", run.train_accuracy), row("test", run.test_accuracy)];
    if let Some(novel) = run.novel_accuracy {
        rows.push(row("novel", novel));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(AccuracyRow::CSV_HEADER).expect("in-memory write");
    for r in &rows {
        w.write_record(r.csv_record()).expect("in-memory write");
    }
    write_file(&accuracy, &String::from_utf8(w.into_inner().expect("flush")).expect("utf8"))?;
    write_file(&snapshot, &WeightSnapshot::new(model, Some(run.prompt)).to_json())?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a TrainArgs,
        plpp: &'a PlppConfig,
        train: &'a TrainConfig,
    }
    write_manifest(
        &dir.join("manifest.json"),
        &RunManifest {
            command: "train",
            version: ARTIFACT_VERSION,
            seed: Some(args.seed),
            config: Resolved {
                args: &args,
                plpp: &plpp,
                train: &config,
            },
            outputs: display(&[&steps, &epochs, &accuracy, &snapshot]),
        },
    )?;
    for r in &rows {
        println!("{} accuracy {}", r.split, sig17(r.accuracy));
    }
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> CmdResult {
    let plpp = PlppConfig {
        lambda: args.lambda,
        alpha: args.alpha,
        k: args.k,
        ..PlppConfig::default()
    };
    if args.threshold.is_nan() || args.threshold < 0.0 {
        return Err(Failure::Usage(format!("threshold must be non-negative, got {}", args.threshold)));
    }
    let exec = if args.serial { Execution::Serial } else { Execution::default() };
    let setup = GradCheckSetup::toy(args.seed)?;
    let report = setup.run(&plpp, args.objective.into(), exec)?;
    let pass = report.max_rel_err < args.threshold;
    println!("objective {}", objective_name(args.objective.into()));
    println!("coordinates {}", report.coordinates);
    println!("max_rel_err {}", sig17(report.max_rel_err));
    println!("worst m={} d={}", report.position, report.dim);
    println!("analytic {}", sig17(report.analytic));
    println!("numeric {}", sig17(report.numeric));
    println!("threshold {}", sig17(args.threshold));
    println!("{}", if pass { "PASS" } else { "FAIL" });
    if pass {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {} is not below {}",
            report.max_rel_err, args.threshold
        )))
    }
}

/// One line of the sweep CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: String,
    pub lambda: f64,
    pub alpha: f64,
    pub k: usize,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub gap: f64,
    pub base_accuracy: Option<f64>,
    pub novel_accuracy: Option<f64>,
}

impl SweepRow {
    pub const CSV_HEADER: [&'static str; 10] = [
        "task",
        "lambda",
        "alpha",
        "k",
        "seed",
        "train_accuracy",
        "test_accuracy",
        "gap",
        "base_accuracy",
        "novel_accuracy",
    ];

    pub fn csv_record(&self) -> [String; 10] {
        let opt = |v: Option<f64>| v.map(sig17).unwrap_or_default();
        [
            self.task.clone(),
            sig17(self.lambda),
            sig17(self.alpha),
            self.k.to_string(),
            self.seed.to_string(),
            sig17(self.train_accuracy),
            sig17(self.test_accuracy),
            sig17(self.gap),
            opt(self.base_accuracy),
            opt(self.novel_accuracy),
        ]
    }

    fn sort_key(&self) -> (f64, f64, usize, u64) {
        (self.lambda, self.alpha, self.k, self.seed)
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SweepRow::CSV_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record(r.csv_record()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

fn cmd_sweep(args: SweepArgs, root: Option<&Path>) -> CmdResult {
    if args.lambdas.is_empty() || args.alphas.is_empty() || args.ks.is_empty() || args.seeds.is_empty() {
        return Err(Failure::Usage("every grid list needs at least one value".into()));
    }
    let mut grid = Vec::new();
    for &lambda in &args.lambdas {
        for &alpha in &args.alphas {
            for &k in &args.ks {
                let plpp = args.optim.plpp(lambda, alpha, k);
                for &seed in &args.seeds {
                    let config = args.optim.train_config(seed, Objective::Plpp);
                    check_hyper(&plpp, &config)?;
                    grid.push((plpp.clone(), config));
                }
            }
        }
    }

    let task = load_task(&args.task)?;
    let model = init_model(&args.model.config(&task))?;
    let split = split(&task)?;
    let name = task_name(&args.task);
    let exec = if args.serial { Execution::Serial } else { Execution::default() };
    let mut rows = exec.try_map_slice(&grid, |(plpp, config)| {
        let run = train_once(&split, &model, plpp, config)?;
        Ok::<_, Failure>(SweepRow {
            task: name.clone(),
            lambda: plpp.lambda,
            alpha: plpp.alpha,
            k: plpp.k,
            seed: config.seed,
            train_accuracy: run.train_accuracy,
            test_accuracy: run.test_accuracy,
            gap: run.train_accuracy - run.test_accuracy,
            base_accuracy: run.novel_accuracy.map(|_| run.test_accuracy),
            novel_accuracy: run.novel_accuracy,
        })
    })?;
    rows.sort_by(|a, b| {
        let (x, y) = (a.sort_key(), b.sort_key());
        x.0.total_cmp(&y.0)
            .then(x.1.total_cmp(&y.1))
            .then(x.2.cmp(&y.2))
            .then(x.3.cmp(&y.3))
    });

    let out = resolve(&args.out, root);
    write_file(&out, &sweep_csv(&rows))?;
    write_manifest(
        &manifest_beside(&out),
        &RunManifest {
            command: "sweep",
            version: ARTIFACT_VERSION,
            seed: None,
            config: &args,
            outputs: display(&[&out]),
        },
    )?;
    println!("wrote {} ({} runs)", out.display(), rows.len());
    Ok(())
}

/// Aggregate of every sweep row sharing one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigSummary {
    pub task: String,
    pub lambda: f64,
    pub alpha: f64,
    pub k: usize,
    pub runs: usize,
    pub train: MeanStd,
    pub test: MeanStd,
    pub gap: MeanStd,
    /// Mean base and novel accuracy with their harmonic mean, when every run has both.
    pub base_novel: Option<(f64, f64, Option<f64>)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

pub fn parse_sweep_csv(text: &str) -> crate::error::Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::format("sweep", e.to_string()))?
        .clone();
    if header.iter().ne(SweepRow::CSV_HEADER) {
        return Err(Error::format("sweep", "unexpected header"));
    }
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<SweepRow>, _>>()
        .map_err(|e| Error::format("sweep", e.to_string()))?;
    if rows.is_empty() {
        return Err(Error::format("sweep", "no rows"));
    }
    Ok(rows)
}

/// Groups rows by (task, lambda, alpha, k) in first-appearance order.
pub fn summarize(rows: &[SweepRow]) -> Vec<ConfigSummary> {
    let mut groups: Vec<(String, f64, f64, usize, Vec<&SweepRow>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|g| {
            g.0 == r.task && g.1.to_bits() == r.lambda.to_bits() && g.2.to_bits() == r.alpha.to_bits() && g.3 == r.k
        }) {
            Some(g) => g.4.push(r),
            None => groups.push((r.task.clone(), r.lambda, r.alpha, r.k, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(task, lambda, alpha, k, members)| {
            let col = |f: fn(&SweepRow) -> f64| MeanStd::of(&members.iter().map(|r| f(r)).collect::<Vec<_>>());
            let base: Option<Vec<f64>> = members.iter().map(|r| r.base_accuracy).collect();
            let novel: Option<Vec<f64>> = members.iter().map(|r| r.novel_accuracy).collect();
            let base_novel = base.zip(novel).map(|(b, n)| {
                let (b, n) = (MeanStd::of(&b).mean, MeanStd::of(&n).mean);
                (b, n, harmonic_mean(100.0 * b, 100.0 * n).ok().map(|h| h / 100.0))
            });
            ConfigSummary {
                task,
                lambda,
                alpha,
                k,
                runs: members.len(),
                train: col(|r| r.train_accuracy),
                test: col(|r| r.test_accuracy),
                gap: col(|r| r.gap),
                base_novel,
            }
        })
        .collect()
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn pm(m: MeanStd) -> String {
    format!("{} ± {}", pct(m.mean), pct(m.std))
}

/// Markdown table of [`summarize`], accuracies in percent.
pub fn render_report(summaries: &[ConfigSummary]) -> String {
    let mut out = String::from("# Sweep report\n\nAccuracies in percent, mean ± sample std over seeds.\n\n");
    out.push_str("| task | lambda | alpha | k | runs | train | test | gap | base | novel | H |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
    for s in summaries {
        let (base, novel, h) = match s.base_novel {
            Some((b, n, h)) => (pct(b), pct(n), h.map(pct).unwrap_or_else(|| "n/a".into())),
            None => ("-".into(), "-".into(), "-".into()),
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            s.task,
            s.lambda,
            s.alpha,
            s.k,
            s.runs,
            pm(s.train),
            pm(s.test),
            pm(s.gap),
            base,
            novel,
            h
        ));
    }
    out
}

fn cmd_report(args: ReportArgs, root: Option<&Path>) -> CmdResult {
    let text = fs::read_to_string(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let rows = parse_sweep_csv(&text).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(&args.input, message),
        other => other,
    })?;
    let report = render_report(&summarize(&rows));
    match &args.out {
        None => print!("{report}"),
        Some(out) => {
            let out = resolve(out, root);
            write_file(&out, &report)?;
            write_manifest(
                &manifest_beside(&out),
                &RunManifest {
                    command: "report",
                    version: ARTIFACT_VERSION,
                    seed: None,
                    config: &args,
                    outputs: display(&[&out]),
                },
            )?;
        }
    }
    Ok(())
}
