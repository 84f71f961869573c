//! Command-line front end.
//!
//! Every command reads one [`RunConfig`] (a preset, a JSON file, or both,
//! plus `--set key=value` overrides) and writes its results to files. Log
//! lines go to standard error; failures end with a single
//! `error code=<n> kind=<kind>: <message>` line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::assignment::{apply_postprocess_with, argmax_predictions, write_predictions_csv, Balancer};
use crate::config::RunConfig;
use crate::ensemble::{fit_ensemble, write_pseudo_labels, EnsembleState};
use crate::error::{Error, Result};
use crate::ladder::run_ablation_ladder;
use crate::metrics::EvalResult;
use crate::plate_data::{
    compute_norm_stats, generate_synthetic, read_dataset, read_manifest, read_manifest_file, read_stats, write_dataset, write_stats,
    NormalizedImages, STATS_FILE,
};
use crate::trainer::{
    finetune_per_celltype, read_checkpoint, write_checkpoint, CellTypeRouter, EpochLog, TrainData, TrainState,
};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const THREADS_ENV: &str = "PLATESCOPE_THREADS";

pub const EXIT_MISSING_FILE: i32 = 2;
pub const EXIT_BAD_CONFIG: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "platescope", version, about = "Semi-supervised plate-screen phenotype classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArgs {
    /// JSON run configuration; keys not given keep the preset's values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting point before `--config` and `--set` are applied.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Dotted override, e.g. `train.total_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BalancerArg {
    Heuristic,
    Oracle,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic plate dataset.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mean-teacher ensemble on a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trained checkpoints on the hidden-label wells.
    Evaluate {
        /// Directory written by `train`.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plate-balance a predictions file into a CSV of classes.
    Postprocess {
        #[arg(long)]
        predictions: PathBuf,
        /// Dataset directory or manifest file.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "heuristic")]
        balancer: BalancerArg,
    },
    /// Run the ablation ladder and write report.json / report.txt / report.svg.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a configuration.
    Config {
        /// Print the resolved configuration as JSON.
        #[arg(long)]
        dump_defaults: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Exit code and short kind for an error.
pub fn classify(err: &Error) -> (i32, &'static str) {
    match err {
        Error::Io { .. } => (EXIT_MISSING_FILE, "io"),
        Error::Config(_) | Error::Json { .. } => (EXIT_BAD_CONFIG, "config"),
        Error::Shape { .. } => (EXIT_INVARIANT, "shape"),
        Error::Numeric(_) => (EXIT_INVARIANT, "numeric"),
        Error::MissingGroup(_) | Error::EmptyGroup(_) => (EXIT_INVARIANT, "normalization"),
        Error::BadMagic { .. } | Error::Truncated(_) | Error::Checksum { .. } | Error::Format(_) => {
            (EXIT_INVARIANT, "format")
        }
        Error::Invariant(_) => (EXIT_INVARIANT, "invariant"),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, record| writeln!(buf, "{} {} {}", buf.timestamp_millis(), record.level(), record.args()))
        .try_init();
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got {raw:?}")))?;
    // a pool may already exist when called in-process more than once
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_BAD_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match init_threads().and_then(|_| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("error code={code} kind={kind}: {}", one_line(&e.to_string()));
            code
        }
    }
}

pub fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let base = RunConfig::preset(&args.preset)?;
    let cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut tree = serde_json::to_value(&base).map_err(|e| Error::json("config", e))?;
            let patch: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
            merge(&mut tree, patch);
            serde_json::from_value(tree).map_err(|e| Error::json(path.display().to_string(), e))?
        }
        None => base,
    };
    let cfg = cfg.with_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Recursive object merge; non-object values in `patch` replace the target.
fn merge(target: &mut serde_json::Value, patch: serde_json::Value) {
    match (target, patch) {
        (serde_json::Value::Object(t), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match t.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        t.insert(k, v);
                    }
                }
            }
        }
        (t, p) => *t = p,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_run_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(RUN_CONFIG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg = RunConfig::from_json(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn member_file(member: usize) -> String {
    format!("member{member}.ckpt")
}

pub fn finetuned_file(member: usize, cell_type: u32) -> String {
    format!("member{member}.cell{cell_type}.ckpt")
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { cfg, out } => cmd_generate(&resolve_config(&cfg)?, &out),
        Command::Train { cfg, dataset, out } => cmd_train(&resolve_config(&cfg)?, &dataset, &out),
        Command::Evaluate {
            checkpoints,
            dataset,
            out,
        } => cmd_evaluate(&checkpoints, &dataset, out.as_deref().unwrap_or(&checkpoints)),
        Command::Postprocess {
            predictions,
            manifest,
            out,
            balancer,
        } => {
            let balancer = match balancer {
                BalancerArg::Heuristic => Balancer::Heuristic,
                BalancerArg::Oracle => Balancer::Oracle,
            };
            cmd_postprocess(&predictions, &manifest, &out, balancer)
        }
        Command::Ablation { cfg, dataset, out } => cmd_ablation(&resolve_config(&cfg)?, &dataset, &out),
        Command::Config { dump_defaults, cfg } => {
            let resolved = resolve_config(&cfg)?;
            if dump_defaults {
                print!("{}", resolved.to_json());
            }
            Ok(())
        }
    }
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dataset = generate_synthetic(&cfg.synthetic)?;
    create_dir(out)?;
    write_dataset(out, &dataset)?;
    write_json(&out.join(RUN_CONFIG_FILE), cfg)?;
    info!(
        "generated {} images on {} plates into {}",
        dataset.manifest.records.len(),
        dataset.manifest.num_plates(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, dataset_dir: &Path, out: &Path) -> Result<()> {
    let dataset = read_dataset(dataset_dir)?;
    create_dir(out)?;
    let stats = compute_norm_stats(&dataset.manifest, &dataset.images, cfg.grouping)?;
    write_stats(&out.join(STATS_FILE), &stats)?;
    let images = NormalizedImages::new(&dataset, &stats)?;
    let data = TrainData::from_manifest(&dataset.manifest);
    info!(
        "training {} members: {} labeled, {} unlabeled, {} validation images",
        cfg.member_widths.len(),
        data.labeled.len(),
        data.unlabeled.len(),
        data.validation.len()
    );
    let members = cfg
        .ladder()
        .member_backbones()
        .iter()
        .enumerate()
        .map(|(i, b)| TrainState::new(b, cfg.head(), cfg.train.seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut ens = EnsembleState::new(members)?;
    let logs = fit_ensemble(
        &mut ens,
        &cfg.train,
        &dataset.manifest,
        &data,
        &images,
        cfg.pseudo_start_epoch,
        Some(out),
    )?;
    for (m, state) in ens.members.iter().enumerate() {
        let mut state = state.clone();
        state.best_val_accuracy = ens.best_val_accuracy;
        write_checkpoint(&out.join(member_file(m)), &state)?;
    }
    let per_member: Vec<Vec<&EpochLog>> = (0..ens.members.len())
        .map(|m| logs.iter().map(|epoch| &epoch[m]).collect())
        .collect();
    write_json(&out.join("train_log.json"), &per_member)?;
    write_pseudo_labels(&out.join("pseudo_labels.json"), &ens.pseudo_labels)?;
    if cfg.finetune.epochs > 0 {
        let pseudo = (!ens.pseudo_labels.is_empty()).then_some(&ens.pseudo_labels);
        for (m, joint) in ens.members.iter().enumerate() {
            let tuned = finetune_per_celltype(joint, &cfg.train, &cfg.finetune, &dataset.manifest, &images, pseudo)?;
            for (cell, state) in tuned {
                write_checkpoint(&out.join(finetuned_file(m, cell)), &state)?;
            }
        }
    }
    write_json(&out.join(RUN_CONFIG_FILE), cfg)?;
    info!("ensemble validation accuracy {:.4}", ens.best_val_accuracy);
    Ok(())
}

/// Loads each member's joint checkpoint plus any per-cell-type checkpoints.
pub fn load_routers(dir: &Path, cfg: &RunConfig, num_cell_types: usize) -> Result<Vec<CellTypeRouter>> {
    (0..cfg.member_widths.len())
        .map(|m| {
            let joint = read_checkpoint(&dir.join(member_file(m)), cfg.head())?;
            let mut per_cell = BTreeMap::new();
            for cell in 0..num_cell_types as u32 {
                let path = dir.join(finetuned_file(m, cell));
                if path.exists() {
                    per_cell.insert(cell, read_checkpoint(&path, cfg.head())?);
                }
            }
            Ok(CellTypeRouter { joint, per_cell })
        })
        .collect()
}

pub fn cmd_evaluate(checkpoints: &Path, dataset_dir: &Path, out: &Path) -> Result<()> {
    let cfg = read_run_config(checkpoints)?;
    let dataset = read_dataset(dataset_dir)?;
    let stats = read_stats(&checkpoints.join(STATS_FILE))?;
    let images = NormalizedImages::new(&dataset, &stats)?;
    let data = TrainData::from_manifest(&dataset.manifest);
    let routers = load_routers(checkpoints, &cfg, dataset.manifest.cell_types.len())?;
    let mut sum: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for router in &routers {
        for (w, p) in router.predict(&dataset.manifest, &images, &data.unlabeled)? {
            let acc = sum.entry(w).or_insert_with(|| vec![0.0; p.len()]);
            acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / routers.len() as f64;
    let predictions: BTreeMap<u32, Vec<f64>> = sum
        .into_iter()
        .map(|(w, p)| (w, p.into_iter().map(|v| v * scale).collect()))
        .collect();
    create_dir(out)?;
    let keyed: BTreeMap<String, &Vec<f64>> = predictions.iter().map(|(w, p)| (w.to_string(), p)).collect();
    write_json(&out.join(PREDICTIONS_FILE), &keyed)?;
    let raw = EvalResult::score(&argmax_predictions(&predictions), &dataset.manifest)?;
    write_json(&out.join("eval.json"), &raw)?;
    let balanced = apply_postprocess_with(&predictions, &dataset.manifest, Balancer::Heuristic)?;
    let post = EvalResult::score(&balanced, &dataset.manifest)?;
    write_json(&out.join("eval_postprocessed.json"), &post)?;
    info!(
        "test accuracy {:.4} (argmax), {:.4} (plate-balanced) over {} images",
        raw.multiclass_accuracy, post.multiclass_accuracy, raw.total
    );
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<u32, Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let keyed: BTreeMap<String, Vec<f64>> =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    keyed
        .into_iter()
        .map(|(k, v)| {
            let w = k
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad image index {k:?}", path.display())))?;
            Ok((w, v))
        })
        .collect()
}

pub fn cmd_postprocess(predictions: &Path, manifest: &Path, out: &Path, balancer: Balancer) -> Result<()> {
    let preds = read_predictions(predictions)?;
    let manifest = if manifest.is_dir() {
        read_manifest(manifest)?
    } else {
        read_manifest_file(manifest)?
    };
    let assigned = apply_postprocess_with(&preds, &manifest, balancer)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_predictions_csv(out, &assigned)?;
    info!("wrote {} balanced predictions to {}", assigned.len(), out.display());
    Ok(())
}

pub fn cmd_ablation(cfg: &RunConfig, dataset_dir: &Path, out: &Path) -> Result<()> {
    let dataset = read_dataset(dataset_dir)?;
    let report = run_ablation_ladder(&dataset, &cfg.ladder())?;
    create_dir(out)?;
    report.write(out)?;
    write_json(&out.join(RUN_CONFIG_FILE), cfg)?;
    Ok(())
}
