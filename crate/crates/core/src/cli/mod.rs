//! `qumab` command line: synth, train, eval, sweep and viz.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::datahub::{sparsify, split, AnnotationMatrix, LabeledSet, WorldSpec};
use crate::datahub::gen_synthetic_world;
use crate::error::{Error, Result};
use crate::evalsuite::{
    cell_dir, evaluate, run_ablation, run_sparse_sweep, threads_from_env, MetricsReport,
};
use crate::focusviz::{average_focus, export_heatmap, focus_recovery_score, grid_layout, FocusUnit};
use crate::fsio;
use crate::model::checkpoint::read_manifest;
use crate::model::{init_model, load_checkpoint, save_checkpoint, ModelConfig, ModelParams, Variant};
use crate::numkernel::Tensor;
use crate::trainer::train;
pub use config::{apply_override, DataSource, Dataset, ModelSpec, RunConfig, SplitSpec};

pub const CONFIG_ECHO: &str = "config.echo.json";
pub const HISTORY: &str = "history.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const REPORT: &str = "report.json";
pub const TABLE: &str = "table.txt";
pub const SWEEP: &str = "sweep.json";
pub const FOCUS_SUMMARY: &str = "focus_summary.json";

#[derive(Debug, Parser)]
#[command(name = "qumab", version, about = "Multi-annotator behavior modeling with annotator query tokens")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. --set train.peak_lr=0.003
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotator world.
    Synth {
        /// World spec JSON; defaults describe the standard world.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and keep the best checkpoint.
    Train(ConfigArgs),
    /// Score a checkpoint and write report.json and table.txt.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// test, val, train or all
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory; defaults to the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Removal-rate sweep, or the variant ablation with --ablation.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        ablation: bool,
    },
    /// Export per-annotator focus heatmaps.
    Viz {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotator ids; all when omitted.
        #[arg(long, value_delimiter = ',')]
        annotators: Option<Vec<String>>,
        /// Average over at most this many test samples.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, overrides, out } => {
            cmd_synth(spec.as_deref(), &overrides, &out)?;
            println!("world written to {}", out.display());
            Ok(())
        }
        Command::Train(a) => {
            let cfg = RunConfig::load(a.config.as_deref(), &a.overrides)?;
            let h = cmd_train(&cfg)?;
            println!(
                "best epoch {} of {}, validation accuracy {:.4}; checkpoint in {}",
                h.best_epoch,
                h.stopped_epoch,
                h.best_metric,
                cfg.out_dir.join(CHECKPOINT_DIR).display()
            );
            Ok(())
        }
        Command::Eval { cfg, checkpoint, split, out } => {
            let rc = RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
            let report = cmd_eval(&rc, &checkpoint, &split, out.as_deref())?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Sweep { cfg, rates, seeds, variants, ablation } => {
            let rc = RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
            let variants = variants
                .map(|vs| vs.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>())
                .transpose()?;
            let table = cmd_sweep(&rc, rates, seeds, variants, ablation)?;
            print!("{table}");
            Ok(())
        }
        Command::Viz { cfg, checkpoint, annotators, samples, out } => {
            let rc = RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
            let summary = cmd_viz(&rc, &checkpoint, annotators.as_deref(), samples, out.as_deref())?;
            for s in &summary.annotators {
                match s.recovery_score {
                    Some(r) => println!("{}  {}  score {r:.3}", s.annotator_id, s.heatmap),
                    None => println!("{}  {}", s.annotator_id, s.heatmap),
                }
            }
            Ok(())
        }
    }
}

fn echo<V: Serialize>(dir: &Path, cfg: &V) -> Result<()> {
    fsio::write_json(&dir.join(CONFIG_ECHO), cfg)
}

pub fn cmd_synth(spec: Option<&Path>, overrides: &[String], out: &Path) -> Result<WorldSpec> {
    let mut value = match spec {
        Some(p) => serde_json::from_str(&fsio::read_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => serde_json::Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let spec: WorldSpec =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("world spec: {e}")))?;
    spec.validate()?;
    let world = gen_synthetic_world(&spec)?;
    world.save(out)?;
    echo(out, &spec)?;
    Ok(spec)
}

/// Effective configuration written beside every run's outputs.
#[derive(Debug, Serialize)]
struct Echo<'a> {
    run: &'a RunConfig,
    model: &'a ModelConfig,
}

type Splits = (AnnotationMatrix, AnnotationMatrix, AnnotationMatrix);

fn splits(cfg: &RunConfig, data: &Dataset) -> Result<Splits> {
    split(&data.annotations, cfg.split.train_fraction, cfg.split.val_fraction, cfg.split.seed)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<crate::trainer::TrainHistory> {
    let data = Dataset::load(&cfg.data)?;
    let mc = data.model_config(cfg)?;
    let (tr, va, _) = splits(cfg, &data)?;
    let tr = if cfg.removal_rate > 0.0 { sparsify(&tr, cfg.removal_rate, cfg.seed)? } else { tr };
    let train_set = LabeledSet::join(&data.features, &tr)?;
    let val_set = LabeledSet::join(&data.features, &va)?;
    let params = init_model::<f32>(&mc, cfg.seed)?;
    let tc = crate::trainer::TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let (best, mut history) = train(params, &train_set, &val_set, &tc)?;
    history.best_checkpoint = Some(CHECKPOINT_DIR.to_string());
    save_checkpoint(&best, &cfg.out_dir.join(CHECKPOINT_DIR))?;
    fsio::write_json(&cfg.out_dir.join(HISTORY), &history)?;
    echo(&cfg.out_dir, &Echo { run: cfg, model: &mc })?;
    Ok(history)
}

/// Names of fields where the checkpoint disagrees with what the data needs.
fn config_mismatch(checkpoint: &ModelConfig, expected: &ModelConfig) -> Vec<String> {
    let a = serde_json::to_value(checkpoint).expect("config serialises");
    let b = serde_json::to_value(expected).expect("config serialises");
    let (a, b) = (a.as_object().expect("object"), b.as_object().expect("object"));
    let mut fields: Vec<String> = a
        .keys()
        .filter(|k| a.get(*k) != b.get(*k))
        .filter(|k| *k != "max_frames")
        .cloned()
        .collect();
    if checkpoint.is_sequence() != expected.is_sequence() || checkpoint.max_frames < expected.max_frames {
        fields.push("max_frames".into());
    }
    fields
}

fn load_compatible(cfg: &RunConfig, data: &Dataset, checkpoint: &Path) -> Result<ModelParams<f32>> {
    let manifest = read_manifest(checkpoint)?;
    let expected = data.model_config(cfg)?;
    let bad = config_mismatch(&manifest.config, &expected);
    if !bad.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint {} does not match the run config in: {}",
            checkpoint.display(),
            bad.join(", ")
        )));
    }
    load_checkpoint(checkpoint)
}

fn pick_split(cfg: &RunConfig, data: &Dataset, which: &str) -> Result<AnnotationMatrix> {
    let (tr, va, te) = splits(cfg, data)?;
    match which {
        "train" => Ok(tr),
        "val" => Ok(va),
        "test" => Ok(te),
        "all" => Ok(data.annotations.clone()),
        other => Err(Error::Config(format!("unknown split {other:?}; use train, val, test or all"))),
    }
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, which: &str, out: Option<&Path>) -> Result<MetricsReport> {
    let data = Dataset::load(&cfg.data)?;
    let params = load_compatible(cfg, &data, checkpoint)?;
    let annotations = pick_split(cfg, &data, which)?;
    let mut report = evaluate(&params, &data.features, &annotations, &cfg.eval)?;
    report.config = serde_json::json!({
        "checkpoint": checkpoint,
        "split": which,
        "model": params.config,
    });
    let dir = out.unwrap_or(&cfg.out_dir);
    fsio::write_json(&dir.join(REPORT), &report)?;
    fsio::write(&dir.join(TABLE), report.to_table().as_bytes())?;
    echo(dir, &Echo { run: cfg, model: &params.config })?;
    Ok(report)
}

/// Returns the text table that was also written to `table.txt`.
pub fn cmd_sweep(
    cfg: &RunConfig,
    rates: Option<Vec<f64>>,
    seeds: Option<Vec<u64>>,
    variants: Option<Vec<Variant>>,
    ablation: bool,
) -> Result<String> {
    let data = Dataset::load(&cfg.data)?;
    let mc = data.model_config(cfg)?;
    let setup = cfg.experiment(mc.clone());
    let seeds = seeds.unwrap_or_else(|| cfg.seeds.clone());
    let cells = cell_dir(&cfg.out_dir);
    let threads = threads_from_env();
    echo(&cfg.out_dir, &Echo { run: cfg, model: &mc })?;
    let table = if ablation {
        let variants = variants.unwrap_or_else(|| Variant::ALL.to_vec());
        let t = run_ablation(&setup, &data.features, &data.annotations, &seeds, &variants, Some(&cells), threads)?;
        fsio::write_json(&cfg.out_dir.join(SWEEP), &t)?;
        t.to_table()
    } else {
        let variants = variants.unwrap_or_else(|| vec![Variant::Full, Variant::NoSelfAttn]);
        let rates = rates.unwrap_or_else(|| vec![0.0, 0.4]);
        let t = run_sparse_sweep(
            &setup,
            &data.features,
            &data.annotations,
            &rates,
            &seeds,
            &variants,
            Some(&cells),
            threads,
        )?;
        fsio::write_json(&cfg.out_dir.join(SWEEP), &t)?;
        t.to_table()
    };
    fsio::write(&cfg.out_dir.join(TABLE), table.as_bytes())?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct FocusEntry {
    pub annotator_id: String,
    pub heatmap: String,
    pub recovery_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct FocusSummary {
    pub samples: usize,
    pub annotators: Vec<FocusEntry>,
    pub mean_recovery_score: Option<f64>,
}

pub fn cmd_viz(
    cfg: &RunConfig,
    checkpoint: &Path,
    annotators: Option<&[String]>,
    samples: Option<usize>,
    out: Option<&Path>,
) -> Result<FocusSummary> {
    let data = Dataset::load(&cfg.data)?;
    let params = load_compatible(cfg, &data, checkpoint)?;
    let ids = data.annotations.annotator_ids().to_vec();
    let chosen: Vec<usize> = match annotators {
        None => (0..ids.len()).collect(),
        Some(want) => want
            .iter()
            .map(|a| {
                ids.iter()
                    .position(|i| i == a)
                    .ok_or_else(|| Error::Config(format!("unknown annotator {a:?}")))
            })
            .collect::<Result<_>>()?,
    };
    let (_, _, te) = splits(cfg, &data)?;
    let index = data.features.index();
    let limit = samples.unwrap_or(usize::MAX);
    let inputs: Vec<Tensor<f32>> = te
        .sample_ids()
        .iter()
        .filter_map(|s| index.get(s.as_str()).map(|&i| data.features.tensors[i].clone()))
        .take(limit)
        .collect();
    let maps = average_focus(&params, &inputs, &ids)?;
    let dir = out.map_or_else(|| cfg.out_dir.join("viz"), Path::to_path_buf);
    let mut entries = Vec::new();
    for &k in &chosen {
        let map = &maps[k];
        let file = format!("focus_{}.pgm", ids[k]);
        let layout = match map.provenance.unit {
            FocusUnit::Patch => grid_layout(map.weights.len()),
            FocusUnit::Frame => (1, map.weights.len()),
        };
        export_heatmap(map, layout, &dir.join(&file))?;
        let score = match (&data.masks, map.provenance.unit) {
            (Some(m), FocusUnit::Patch) => {
                let mk = m.annotators.iter().position(|a| *a == ids[k]);
                mk.map(|j| focus_recovery_score(map, &m.masks[j])).transpose()?
            }
            _ => None,
        };
        entries.push(FocusEntry {
            annotator_id: ids[k].clone(),
            heatmap: file,
            recovery_score: score,
        });
    }
    let scores: Vec<f64> = entries.iter().filter_map(|e| e.recovery_score).collect();
    let summary = FocusSummary {
        samples: inputs.len(),
        mean_recovery_score: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
        annotators: entries,
    };
    fsio::write_json(&dir.join(FOCUS_SUMMARY), &summary)?;
    echo(&dir, &Echo { run: cfg, model: &params.config })?;
    Ok(summary)
}
