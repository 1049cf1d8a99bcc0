//! `flava`: corpus building, codebook fitting, pretraining, evaluation and
//! the global-contrastive verification harness.
//!
//! Results are printed as `key=value` lines. Failures print a single line
//! `error category=<category> message=<text>` to stderr and exit with
//!
//! | code | categories |
//! |------|------------|
//! | 2 | `usage` |
//! | 3 | `config` |
//! | 4 | `input`, `missing_input`, `format`, `checkpoint` |
//! | 5 | `shape`, `range`, `numeric`, `verification` |

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flava_core::config::{DatasetKind, FlavaConfig};
use flava_core::corpus::{self, HeuristicDetector};
use flava_core::data::{load_labels, Dataset};
use flava_core::error::FlavaError;
use flava_core::evaluation::{
    evaluate_retrieval, finetune_head, lambda_grid, linear_probe, probe_features, split_rows,
    zero_shot_with_model, ClassifierHead, FinetuneRecipe, HeadKind, Targets, Task, TaskData,
};
use flava_core::model::FlavaModel;
use flava_core::trainer::{fit_codebook_from, pretrain, resume, PretrainOptions};
use flava_core::distributed;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "flava", version, about = "Vision-language pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an image-text corpus from a sources manifest.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Fit the visual codebook used for masked image targets.
    Tokenizer {
        #[command(subcommand)]
        action: TokenizerAction,
    },
    /// Run joint pretraining.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint.
    Eval {
        #[command(subcommand)]
        action: EvalAction,
    },
    /// Check sharded contrastive gradients against a full-batch oracle.
    VerifyGlobalContrastive {
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0.07)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
enum CorpusAction {
    Build {
        /// JSON manifest listing `{tag, path}` sources.
        #[arg(long)]
        sources: PathBuf,
        #[arg(long, env = "FLAVA_OUT")]
        out: PathBuf,
        #[arg(long, default_value_t = corpus::DEFAULT_SHARD_SIZE)]
        shard_size: usize,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Config file (TOML) or `preset:<desk|paper>`.
    #[arg(long, default_value = "preset:desk")]
    config: PathBuf,
    /// `dotted.key=value` overrides, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set model.seed=<seed>`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<FlavaConfig, FlavaError> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("model.seed={s}"));
        }
        let cfg = FlavaConfig::load_with_overrides(&self.config, &overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum TokenizerAction {
    Fit {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, env = "FLAVA_OUT")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, env = "FLAVA_OUT")]
    out: PathBuf,
    /// Image-encoder checkpoint to initialize from.
    #[arg(long)]
    image_init: Option<PathBuf>,
    /// Text-encoder checkpoint to initialize from.
    #[arg(long)]
    text_init: Option<PathBuf>,
    /// Continue the run stored in this checkpoint; its config is used.
    #[arg(long, conflicts_with_all = ["image_init", "text_init"])]
    resume: Option<PathBuf>,
    /// Stop after this step without a final checkpoint.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalCommon {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset source: JSONL file, corpus directory or `synthetic:<n>[:<variant>]`.
    #[arg(long)]
    data: String,
    /// Directory for `report.json`.
    #[arg(long, env = "FLAVA_OUT")]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Vision,
    Text,
    Regression,
    Multimodal,
    Concat,
}

impl TaskArg {
    fn task(self) -> Task {
        match self {
            TaskArg::Vision => Task::VisionCls,
            TaskArg::Text => Task::TextCls,
            TaskArg::Regression => Task::TextRegression,
            TaskArg::Multimodal => Task::MultimodalCls,
            TaskArg::Concat => Task::ConcatBaseline,
        }
    }

    fn kind(self) -> DatasetKind {
        match self {
            TaskArg::Vision => DatasetKind::UnimodalImages,
            TaskArg::Text | TaskArg::Regression => DatasetKind::UnimodalText,
            TaskArg::Multimodal | TaskArg::Concat => DatasetKind::MultimodalPairs,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HeadArg {
    Linear,
    TwoLayer,
}

#[derive(Debug, Subcommand)]
enum EvalAction {
    /// Zero-shot image-text retrieval (R@1, R@5 in both directions).
    Retrieval(EvalCommon),
    /// Zero-shot classification with text templates over record labels.
    Zeroshot {
        #[command(flatten)]
        common: EvalCommon,
        /// Prompt template; `{}` is replaced by the class name. Repeatable.
        #[arg(long = "template", default_values_t = ["a photo of a {}.".to_string()])]
        templates: Vec<String>,
    },
    /// Logistic-regression probe on frozen image features.
    Probe {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long, default_value_t = 0.25)]
        val_fraction: f64,
    },
    /// Fine-tune a task head (and by default the trunk).
    Finetune {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_enum, default_value_t = HeadArg::Linear)]
        head: HeadArg,
        /// desk, vqa, snli_ve or hateful_memes.
        #[arg(long, default_value = "desk")]
        recipe: String,
        #[arg(long)]
        freeze_trunk: bool,
        #[arg(long, default_value_t = 0.25)]
        val_fraction: f64,
    },
}

/// A failure with its CLI category.
#[derive(Debug)]
struct Failure {
    category: &'static str,
    message: String,
}

impl From<FlavaError> for Failure {
    fn from(e: FlavaError) -> Self {
        Self {
            category: e.category(),
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn new(category: &'static str, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.category {
            "usage" => 2,
            "config" => 3,
            "input" | "missing_input" | "format" | "checkpoint" => 4,
            _ => 5,
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn report_line(task: &str, metric: &str, value: f64) -> String {
    format!("task={task} metric={metric} value={value}")
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::new("missing_input", format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).map_err(FlavaError::from)?;
    std::fs::write(&path, text).map_err(|e| Failure::new("missing_input", format!("{}: {e}", path.display())))
}

/// Records the exact invocation next to the outputs.
fn write_invocation(dir: &Path, seed: Option<u64>) -> CliResult {
    let argv: Vec<String> = std::env::args().collect();
    write_json(dir, "invocation.json", &json!({ "argv": argv, "seed": seed }))
}

/// Prints the report lines and writes them to `report.json` when asked.
fn emit(task: &str, metrics: &[(String, f64)], out: Option<&Path>, seed: u64) -> CliResult {
    for (m, v) in metrics {
        println!("{}", report_line(task, m, *v));
    }
    if let Some(dir) = out {
        write_invocation(dir, Some(seed))?;
        let rows: Vec<_> = metrics
            .iter()
            .map(|(m, v)| json!({ "task": task, "metric": m, "value": v }))
            .collect();
        write_json(dir, "report.json", &json!(rows))?;
    }
    Ok(())
}

fn class_indices(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut classes = labels.to_vec();
    classes.sort();
    classes.dedup();
    let y = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label is in its own class list"))
        .collect();
    (classes, y)
}

fn all_rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn run_eval(action: EvalAction) -> CliResult {
    match action {
        EvalAction::Retrieval(c) => {
            let model = FlavaModel::load(&c.checkpoint)?;
            let ds = Dataset::load(DatasetKind::MultimodalPairs, &c.data, &model.config)?;
            let rows = all_rows(ds.len());
            let pairs = ds.pair_batch(&rows)?;
            let rep = evaluate_retrieval(&model, &pairs.images, &pairs.texts)?;
            emit("retrieval", &rep.lines(), c.out.as_deref(), c.seed)
        }
        EvalAction::Zeroshot { common: c, templates } => {
            let model = FlavaModel::load(&c.checkpoint)?;
            let ds = Dataset::load(DatasetKind::UnimodalImages, &c.data, &model.config)?;
            let (classes, y) = class_indices(&load_labels(&c.data)?);
            let images = ds.image_batch(&all_rows(ds.len()))?;
            let pred = zero_shot_with_model(&model, &images, &classes, &templates)?;
            let acc = pred.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64;
            emit("zeroshot", &[("accuracy".into(), acc)], c.out.as_deref(), c.seed)
        }
        EvalAction::Probe { common: c, val_fraction } => {
            let model = FlavaModel::load(&c.checkpoint)?;
            let ds = Dataset::load(DatasetKind::UnimodalImages, &c.data, &model.config)?;
            let (_, y) = class_indices(&load_labels(&c.data)?);
            let x = probe_features(&model, &ds.image_batch(&all_rows(ds.len()))?)?;
            let (tr, va) = split_rows(y.len(), val_fraction, c.seed);
            let pick = |rows: &[usize]| rows.iter().map(|&r| y[r]).collect::<Vec<_>>();
            let res = linear_probe(
                x.select(ndarray::Axis(0), &tr).view(),
                &pick(&tr),
                x.select(ndarray::Axis(0), &va).view(),
                &pick(&va),
                &lambda_grid(),
            )?;
            emit(
                "probe",
                &[("accuracy".into(), res.best_accuracy), ("lambda".into(), res.best_lambda)],
                c.out.as_deref(),
                c.seed,
            )
        }
        EvalAction::Finetune {
            common: c,
            task,
            head,
            recipe,
            freeze_trunk,
            val_fraction,
        } => {
            let model = FlavaModel::load(&c.checkpoint)?;
            let mut recipe = FinetuneRecipe::preset(&recipe)
                .ok_or_else(|| Failure::new("config", format!("unknown recipe `{recipe}`")))?;
            recipe.freeze_trunk |= freeze_trunk;
            let ds = Dataset::load(task.kind(), &c.data, &model.config)?;
            let labels = load_labels(&c.data)?;
            let t = task.task();
            let targets = if t.is_regression() {
                let v: Result<Vec<f64>, _> = labels.iter().map(|l| l.parse::<f64>()).collect();
                Targets::Values(v.map_err(|e| Failure::new("input", format!("regression label: {e}")))?)
            } else {
                let (classes, y) = class_indices(&labels);
                if classes.len() < 2 {
                    return Err(Failure::new("input", "classification needs at least two classes"));
                }
                Targets::Classes(y)
            };
            let outputs = match &targets {
                Targets::Classes(y) => y.iter().max().map_or(0, |m| m + 1),
                Targets::Values(_) => 1,
            };
            let input_dim = t.input_dim(model.config.hidden_size);
            let head = match head {
                HeadArg::Linear => ClassifierHead::new(HeadKind::Linear, input_dim, outputs)?,
                HeadArg::TwoLayer => ClassifierHead::two_layer(input_dim, outputs),
            };
            let (tr, va) = split_rows(ds.len(), val_fraction, c.seed);
            let select = |rows: &[usize]| -> CliResult<TaskData> {
                Ok(TaskData {
                    images: ds.images.as_ref().map(|i| i.select(rows)),
                    texts: match &ds.token_ids {
                        Some(_) => Some(ds.text_batch(rows)?),
                        None => None,
                    },
                    targets: match &targets {
                        Targets::Classes(y) => Targets::Classes(rows.iter().map(|&r| y[r]).collect()),
                        Targets::Values(v) => Targets::Values(rows.iter().map(|&r| v[r]).collect()),
                    },
                })
            };
            let res = finetune_head(&model, t, head, &recipe, &select(&tr)?, &select(&va)?, c.seed)?;
            emit("finetune", &[(res.metric_name.to_string(), res.metric)], c.out.as_deref(), c.seed)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Corpus {
            action: CorpusAction::Build { sources, out, shard_size },
        } => {
            let rep = corpus::build(&sources, &out, shard_size, &HeuristicDetector::default())?;
            write_invocation(&out, None)?;
            for l in rep.lines() {
                println!("{l}");
            }
            Ok(())
        }
        Command::Tokenizer {
            action: TokenizerAction::Fit { config, out },
        } => {
            let cfg = config.resolve()?;
            let datasets = cfg
                .datasets
                .iter()
                .filter(|d| d.kind != DatasetKind::UnimodalText)
                .map(|d| Dataset::load(d.kind, &d.source, &cfg.model))
                .collect::<Result<Vec<_>, _>>()?;
            let cb = fit_codebook_from(&datasets, &cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Failure::new("missing_input", format!("{}: {e}", out.display())))?;
            cb.save(&out.join("codebook.ckpt"))?;
            let cfg_path = out.join("resolved_config.toml");
            std::fs::write(&cfg_path, cfg.to_toml())
                .map_err(|e| Failure::new("missing_input", format!("{}: {e}", cfg_path.display())))?;
            write_invocation(&out, Some(cfg.model.seed))?;
            println!("codebook_size={} code_dim={}", cb.size(), cb.code_dim());
            Ok(())
        }
        Command::Pretrain(a) => {
            let opts = PretrainOptions {
                image_init: a.image_init,
                text_init: a.text_init,
                stop_after: a.stop_after,
            };
            let summary = match &a.resume {
                Some(ckpt) => {
                    if !a.config.overrides.is_empty() || a.config.seed.is_some() {
                        return Err(Failure::new("config", "--resume takes its config from the checkpoint"));
                    }
                    resume(ckpt, &a.out, &opts)?
                }
                None => {
                    let cfg = a.config.resolve()?;
                    pretrain(&cfg, &a.out, &opts)?
                }
            };
            write_invocation(&a.out, a.config.seed)?;
            println!(
                "event=summary final_step={} budget={} stopped_early={}",
                summary.final_step, summary.budget, summary.stopped_early
            );
            if let Some(b) = &summary.best {
                println!("event=best step={} mean_r1={}", b.step, b.mean_r1);
            }
            Ok(())
        }
        Command::Eval { action } => run_eval(action),
        Command::VerifyGlobalContrastive {
            workers,
            batch,
            dim,
            temperature,
            seed,
        } => {
            let r = distributed::verify(workers, batch, dim, temperature, seed)?;
            println!(
                "variant=global workers={} batch={} max_rel_err={:e} loss_diff={:e} pass={}",
                r.workers,
                r.batch,
                r.global_max_rel_err,
                r.global_loss_diff,
                r.global_pass()
            );
            println!(
                "variant=local workers={} batch={} max_rel_err={:e} loss_diff={:e} grad_diff_norm={:e} pass={}",
                r.workers,
                r.batch,
                r.local_max_rel_err,
                r.local_loss_diff,
                r.local_vs_global_grad_norm,
                r.local_pass()
            );
            if r.pass() {
                Ok(())
            } else {
                Err(Failure::new("verification", "sharded contrastive gradients disagree with the oracle"))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("error category=usage message={first}");
            eprintln!("{}", e.render());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = f.message.replace(['\n', '\r'], " ");
            eprintln!("error category={} message={message}", f.category);
            ExitCode::from(f.exit_code())
        }
    }
}
