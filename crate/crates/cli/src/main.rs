use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aib_core::config::{DatasetKind, RunConfig};
use aib_core::data::{load_cifar10, load_mnist, FreqKeep, ImageDataset, Modification, ModificationKind};
use aib_core::gradcheck::{run_suite, Scale};
use aib_core::interp::{export_attention, interpretability_score, InterpReport};
use aib_core::train::{evaluate, train, write_metrics, Averaging, EvalMode, MetricRecord};
use aib_core::{AibError, AibModel, OpKind, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Variational spatial attention with anchor quantization: training,
/// evaluation, interpretability scoring and gradient self-checks.
#[derive(Parser)]
#[command(name = "aib", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes the effective config, metrics log and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` overrides applied after the config file; later ones win.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Print every step record to standard error.
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate a checkpoint on the test split; prints JSON.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value_t = Mode::Mean)]
        mode: Mode,
        /// Noise seed for stochastic mode.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = AveragingArg::Probabilities)]
        averaging: AveragingArg,
        /// Evaluate the training split instead of the test split.
        #[arg(long)]
        train_split: bool,
    },
    /// Score attention stability under one input modification.
    Interp {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        modification: ModificationArgs,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        r: Option<f64>,
        /// Directory for report.json, samples.csv and histogram.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a grid of window sizes (occlusion) or radii (frequency filters);
    /// writes one CSV row per value.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        modification: ModificationArgs,
        /// Comma-separated `p` (occlusion) or `r` (frequency) values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// CSV output path; each value's report JSON is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write attention maps and inputs as PGM/PPM images.
    Export {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Finite-difference checks of every operation and model component.
    Gradcheck {
        #[arg(value_enum)]
        scale: ScaleArg,
        /// Corrupt one backward rule (by operation name) to exercise the checks.
        #[arg(long)]
        fault: Option<String>,
        /// Print the table as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config; defaults to `config.txt` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Args)]
struct ModificationArgs {
    #[arg(long, default_value = "none")]
    kind: String,
    #[arg(long, default_value_t = 0.8)]
    tau: f64,
    /// Seed of the modification randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset supplying occlusion patches (`mnist` or `cifar10`), test split.
    #[arg(long)]
    patch_dataset: Option<String>,
    #[arg(long)]
    patch_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mean,
    Stochastic,
}

#[derive(Clone, Copy, ValueEnum)]
enum AveragingArg {
    Probabilities,
    LogProbabilities,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Tiny,
    Small,
}

fn exit_code(err: &AibError) -> u8 {
    match err {
        AibError::Io { .. } | AibError::Format { .. } => 2,
        AibError::Divergence { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Train {
            config,
            overrides,
            verbose,
        } => cmd_train(&config, &overrides, verbose),
        Command::Eval {
            model,
            mode,
            seed,
            averaging,
            train_split,
        } => cmd_eval(&model, mode, seed, averaging, train_split),
        Command::Interp {
            model,
            modification,
            p,
            r,
            out,
        } => cmd_interp(&model, &modification, p, r, &out),
        Command::Sweep {
            model,
            modification,
            values,
            out,
        } => cmd_sweep(&model, &modification, &values, &out),
        Command::Export { model, out, limit } => {
            let (cfg, model) = load_model(&model)?;
            let (_, test) = cfg.load_data()?;
            let n = export_attention(&model, &test, &out, limit)?;
            write_text(&out.join("config.txt"), &cfg.to_text())?;
            println!("wrote {n} attention maps to {}", out.display());
            Ok(0)
        }
        Command::Gradcheck { scale, fault, json } => cmd_gradcheck(scale, fault.as_deref(), json),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| AibError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| AibError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn cmd_train(config: &Path, overrides: &[String], verbose: bool) -> Result<u8> {
    let mut cfg = load_config(config, overrides)?;
    cfg.finalize(true)?;
    let out = cfg.out_dir.clone().expect("finalize checked out_dir");
    let (train_set, test_set) = cfg.load_data()?;
    let model_cfg = cfg.model_config(train_set.num_classes(), train_set.image_shape())?;
    create_dir(&out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;

    let mut model = AibModel::new(model_cfg, cfg.seed)?;
    let mut log: Vec<MetricRecord> = Vec::new();
    let result = train(&mut model, &train_set, Some(&test_set), &cfg.train, cfg.seed, |r| {
        if verbose || r.test_acc.is_some() {
            eprintln!("{}", r.to_json_line());
        }
        log.push(r.clone());
    });
    // The log is written even when training diverges, up to the failing step.
    write_metrics(&out.join("metrics.jsonl"), &log)?;
    let report = result?;
    model.params().save(&out.join("checkpoint.aib"))?;
    report.best_params.save(&out.join("best.aib"))?;
    let summary = serde_json::json!({
        "steps": report.steps,
        "best_epoch": report.best_epoch,
        "best_test_acc": report.best_accuracy,
        "final_test_acc": report.epoch_records().last().and_then(|r| r.test_acc),
        "params": model.params().param_count(),
    });
    write_text(&out.join("summary.json"), &format!("{summary:#}\n"))?;
    println!("{summary}");
    Ok(0)
}

fn load_model(args: &ModelArgs) -> Result<(RunConfig, AibModel)> {
    let config = match &args.config {
        Some(p) => p.clone(),
        None => args
            .checkpoint
            .parent()
            .map(|d| d.join("config.txt"))
            .unwrap_or_else(|| PathBuf::from("config.txt")),
    };
    let mut cfg = load_config(&config, &args.overrides)?;
    cfg.finalize(false)?;
    cfg.train.eval_batch_size = args.batch_size.max(1);
    let (c, shape) = dataset_shape(&cfg)?;
    let mut model = AibModel::new(cfg.model_config(c, shape)?, cfg.seed)?;
    model.params_mut().load(&args.checkpoint)?;
    Ok((cfg, model))
}

/// Class count and image shape of the configured (sub)set, without keeping it.
fn dataset_shape(cfg: &RunConfig) -> Result<(usize, [usize; 3])> {
    let (train, _) = cfg.load_data()?;
    Ok((train.num_classes(), train.image_shape()))
}

fn cmd_eval(args: &ModelArgs, mode: Mode, seed: u64, averaging: AveragingArg, train_split: bool) -> Result<u8> {
    let (cfg, model) = load_model(args)?;
    let (train_set, test_set) = cfg.load_data()?;
    let ds = if train_split { &train_set } else { &test_set };
    let mode = match mode {
        Mode::Mean => EvalMode::Mean,
        Mode::Stochastic => EvalMode::Stochastic {
            seed,
            averaging: match averaging {
                AveragingArg::Probabilities => Averaging::Probabilities,
                AveragingArg::LogProbabilities => Averaging::LogProbabilities,
            },
        },
    };
    let report = evaluate(&model, ds, mode, cfg.train.eval_batch_size)?;
    let out = serde_json::json!({
        "split": if train_split { "train" } else { "test" },
        "eval": mode,
        "accuracy": report.accuracy,
        "samples": report.samples,
        "loss": report.loss,
    });
    println!("{out}");
    Ok(0)
}

fn patch_source(args: &ModificationArgs, cfg: &RunConfig) -> Result<Option<ImageDataset>> {
    let kind: ModificationKind = args.kind.parse()?;
    if kind != ModificationKind::OccludePatch {
        return Ok(None);
    }
    let dir = args
        .patch_dir
        .clone()
        .or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| AibError::Config("occlude-patch needs --patch-dir".into()))?;
    let which = match args.patch_dataset.as_deref() {
        Some("mnist") => DatasetKind::Mnist,
        Some("cifar10") => DatasetKind::Cifar10,
        Some(other) => return Err(AibError::Config(format!("unknown patch dataset `{other}`"))),
        None => cfg.dataset.expect("finalized config names a dataset"),
    };
    let (_, test) = match which {
        DatasetKind::Mnist => load_mnist(&dir)?,
        DatasetKind::Cifar10 => load_cifar10(&dir)?,
    };
    Ok(Some(test))
}

fn build_modification(args: &ModificationArgs, p: Option<usize>, r: Option<f64>) -> Result<Modification> {
    let kind: ModificationKind = args.kind.parse()?;
    let m = match kind {
        ModificationKind::None => Modification::none(),
        ModificationKind::OccludeColor | ModificationKind::OccludePatch => Modification {
            kind,
            p: p.ok_or_else(|| AibError::Config(format!("--kind {kind} needs --p")))?,
            r: 0.0,
            seed: args.seed,
        },
        ModificationKind::FreqHigh | ModificationKind::FreqLow => {
            let keep = if kind == ModificationKind::FreqHigh {
                FreqKeep::High
            } else {
                FreqKeep::Low
            };
            let mut m = Modification::freq(keep, r.ok_or_else(|| AibError::Config(format!("--kind {kind} needs --r")))?);
            m.seed = args.seed;
            m
        }
    };
    Ok(m)
}

fn write_report(dir: &Path, report: &InterpReport) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join("report.json"), &report.to_json())?;
    write_text(&dir.join("samples.csv"), &report.samples_csv())?;
    write_text(&dir.join("histogram.csv"), &report.histogram_csv())
}

fn cmd_interp(args: &ModelArgs, margs: &ModificationArgs, p: Option<usize>, r: Option<f64>, out: &Path) -> Result<u8> {
    let modification = build_modification(margs, p, r)?;
    let (cfg, model) = load_model(args)?;
    let (_, test) = cfg.load_data()?;
    let [_, h, w] = test.image_shape();
    modification.validate(h, w)?;
    let patches = patch_source(margs, &cfg)?;
    let report = interpretability_score(&model, &test, &modification, margs.tau, patches.as_ref(), args.batch_size)?;
    write_report(out, &report)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    println!("{}", summary_line(&report));
    Ok(0)
}

fn summary_line(r: &InterpReport) -> serde_json::Value {
    serde_json::json!({
        "kind": r.modification.kind,
        "p": r.modification.p,
        "r": r.modification.r,
        "tau": r.tau,
        "n_total": r.n_total,
        "n_pred_consistent": r.n_pred_consistent,
        "n_att_consistent": r.n_att_consistent,
        "score": r.score,
    })
}

fn cmd_sweep(args: &ModelArgs, margs: &ModificationArgs, values: &[f64], out: &Path) -> Result<u8> {
    let kind: ModificationKind = margs.kind.parse()?;
    let (cfg, model) = load_model(args)?;
    let (_, test) = cfg.load_data()?;
    let [_, h, w] = test.image_shape();
    let patches = patch_source(margs, &cfg)?;
    let occlusion = matches!(kind, ModificationKind::OccludeColor | ModificationKind::OccludePatch);
    let mods: Vec<Modification> = values
        .iter()
        .map(|&v| {
            if occlusion && (v.fract() != 0.0 || v < 0.0) {
                return Err(AibError::Config(format!("window size {v} is not a whole number")));
            }
            let m = build_modification(margs, Some(v as usize), Some(v))?;
            m.validate(h, w)?;
            Ok(m)
        })
        .collect::<Result<_>>()?;

    let reports_dir = out.with_extension("reports");
    let mut csv = String::from("kind,value,tau,n_total,n_pred_consistent,n_att_consistent,score_percent\n");
    for (m, &v) in mods.iter().zip(values) {
        let report = interpretability_score(&model, &test, m, margs.tau, patches.as_ref(), args.batch_size)?;
        write_report(&reports_dir.join(format!("{kind}-{v}")), &report)?;
        let score = report.score.map(|s| format!("{:.2}", 100.0 * s)).unwrap_or_default();
        csv.push_str(&format!(
            "{kind},{v},{},{},{},{},{score}\n",
            margs.tau, report.n_total, report.n_pred_consistent, report.n_att_consistent
        ));
        eprintln!("{}", summary_line(&report));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(out, &csv)?;
    write_text(&reports_dir.join("config.txt"), &cfg.to_text())?;
    print!("{csv}");
    Ok(0)
}

fn cmd_gradcheck(scale: ScaleArg, fault: Option<&str>, json: bool) -> Result<u8> {
    let fault = match fault {
        Some(name) => Some(
            OpKind::from_name(name)
                .filter(|k| *k != OpKind::Leaf)
                .ok_or_else(|| AibError::Config(format!("unknown operation `{name}`")))?,
        ),
        None => None,
    };
    let scale = match scale {
        ScaleArg::Tiny => Scale::Tiny,
        ScaleArg::Small => Scale::Small,
    };
    let report = run_suite(scale, fault)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.table());
    }
    if report.passed() {
        Ok(0)
    } else {
        let names: Vec<&str> = report.failures().map(|o| o.name.as_str()).collect();
        eprintln!("gradient check failed: {}", names.join(", "));
        Ok(1)
    }
}
