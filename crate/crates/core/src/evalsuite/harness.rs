//! Train-and-evaluate cells over (variant, removal rate, seed), with
//! per-cell persistence so an interrupted sweep resumes where it stopped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::report::{evaluate, EvalOptions, MetricsReport};
use crate::datahub::{sparsify, split, AnnotationMatrix, FeatureSet, LabeledSet};
use crate::error::{Error, Result};
use crate::fsio;
use crate::model::{init_model, ModelConfig, Variant};
use crate::trainer::{train, TrainConfig};

/// Everything shared by the cells of one experiment. The variant and seed
/// fields of `model` and `train` are overwritten per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub eval: EvalOptions,
}

impl ExperimentSetup {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        Self {
            model,
            train,
            train_fraction: 0.8,
            val_fraction: 0.1,
            split_seed: 0,
            eval: EvalOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub variant: Variant,
    pub rate: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn file_name(&self) -> String {
        format!("cell_{}_rate{}_seed{}.json", self.variant, self.rate, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub report: MetricsReport,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    /// Set when the result was read back from a previous run.
    #[serde(skip)]
    pub resumed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Avg,
    CoPr,
}

impl CellResult {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Avg => Some(self.report.avg_accuracy),
            Metric::CoPr => self.report.copr.as_ref().map(|c| c.accuracy),
        }
    }
}

/// Splits, optionally sparsifies the training part, trains and scores the
/// test part.
pub fn run_cell(
    setup: &ExperimentSetup,
    features: &FeatureSet,
    annotations: &AnnotationMatrix,
    key: CellKey,
) -> Result<CellResult> {
    let (tr, va, te) = split(annotations, setup.train_fraction, setup.val_fraction, setup.split_seed)?;
    let tr = if key.rate > 0.0 { sparsify(&tr, key.rate, key.seed)? } else { tr };
    let train_set = LabeledSet::join(features, &tr)?;
    let val_set = LabeledSet::join(features, &va)?;
    let model = setup.model.clone().with_variant(key.variant);
    let tc = TrainConfig {
        seed: key.seed,
        ..setup.train.clone()
    };
    let params = init_model::<f32>(&model, key.seed)?;
    let (best, history) = train(params, &train_set, &val_set, &tc)?;
    let mut report = evaluate(&best, features, &te, &setup.eval)?;
    report.config = serde_json::to_value(key)?;
    Ok(CellResult {
        key,
        report,
        best_epoch: history.best_epoch,
        stopped_epoch: history.stopped_epoch,
        resumed: false,
    })
}

/// Worker count from `QUMAB_THREADS`, defaulting to 1.
pub fn threads_from_env() -> usize {
    std::env::var("QUMAB_THREADS")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

fn load_cell(dir: &Path, key: &CellKey) -> Option<CellResult> {
    let path = dir.join(key.file_name());
    let cell: CellResult = fsio::read_json(&path).ok()?;
    (cell.key == *key).then_some(CellResult { resumed: true, ..cell })
}

/// Runs every cell, reusing results persisted in `cell_dir`. Results come
/// back in `keys` order regardless of `threads`.
pub fn run_cells(
    setup: &ExperimentSetup,
    features: &FeatureSet,
    annotations: &AnnotationMatrix,
    keys: &[CellKey],
    cell_dir: Option<&Path>,
    threads: usize,
) -> Result<Vec<CellResult>> {
    let slots: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new((0..keys.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&key) = keys.get(i) else { break };
        let out = match cell_dir.and_then(|d| load_cell(d, &key)) {
            Some(cell) => Ok(cell),
            None => run_cell(setup, features, annotations, key).and_then(|cell| {
                if let Some(d) = cell_dir {
                    fsio::write_json(&d.join(key.file_name()), &cell)?;
                }
                Ok(cell)
            }),
        };
        slots.lock().expect("no worker panicked")[i] = Some(out);
    };
    std::thread::scope(|s| {
        for _ in 1..threads.clamp(1, keys.len().max(1)) {
            s.spawn(work);
        }
        work();
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Stat { mean, std: var.sqrt(), n })
    }
}

fn fmt_stat(s: Option<Stat>, scale: f64) -> String {
    s.map_or_else(|| "-".into(), |s| format!("{:.2}±{:.2}", s.mean * scale, s.std * scale))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub rate: f64,
    pub avg: Option<Stat>,
    pub copr: Option<Stat>,
    /// Mean over seeds of (full − sparse) / full on Avg, against the rate-0
    /// cell with the same variant and seed.
    pub relative_drop: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellResult>,
}

/// Per-seed relative Avg drop of `variant` at `rate`.
pub fn relative_drops(cells: &[CellResult], variant: Variant, rate: f64) -> Vec<f64> {
    let find = |r: f64, seed: u64| {
        cells
            .iter()
            .find(|c| c.key.variant == variant && c.key.rate == r && c.key.seed == seed)
    };
    cells
        .iter()
        .filter(|c| c.key.variant == variant && c.key.rate == rate)
        .filter_map(|c| {
            let full = find(0.0, c.key.seed)?.report.avg_accuracy;
            Some((full - c.report.avg_accuracy) / full)
        })
        .collect()
}

pub fn summarize_sweep(cells: &[CellResult], variants: &[Variant], rates: &[f64]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &rate in rates {
            let these: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.key.variant == variant && c.key.rate == rate)
                .collect();
            let collect = |m| these.iter().filter_map(|c| c.metric(m)).collect::<Vec<_>>();
            rows.push(SweepRow {
                variant,
                rate,
                avg: Stat::of(&collect(Metric::Avg)),
                copr: Stat::of(&collect(Metric::CoPr)),
                relative_drop: Stat::of(&relative_drops(cells, variant, rate)),
            });
        }
    }
    rows
}

fn check_rates(rates: &[f64]) -> Result<()> {
    if let Some(r) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::Config(format!("removal rate {r} outside [0, 1)")));
    }
    Ok(())
}

fn grid(variants: &[Variant], rates: &[f64], seeds: &[u64]) -> Vec<CellKey> {
    let mut keys = Vec::new();
    for &variant in variants {
        for &rate in rates {
            for &seed in seeds {
                keys.push(CellKey { variant, rate, seed });
            }
        }
    }
    keys
}

/// Trains every (variant, rate, seed) cell. Rate 0 is always included so
/// relative drops can be computed.
#[allow(clippy::too_many_arguments)]
pub fn run_sparse_sweep(
    setup: &ExperimentSetup,
    features: &FeatureSet,
    annotations: &AnnotationMatrix,
    rates: &[f64],
    seeds: &[u64],
    variants: &[Variant],
    cell_dir: Option<&Path>,
    threads: usize,
) -> Result<SweepTable> {
    check_rates(rates)?;
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Config("a sweep needs at least one seed and one variant".into()));
    }
    let mut all_rates = vec![0.0];
    all_rates.extend(rates.iter().copied().filter(|&r| r != 0.0));
    let cells = run_cells(setup, features, annotations, &grid(variants, &all_rates, seeds), cell_dir, threads)?;
    Ok(SweepTable {
        rows: summarize_sweep(&cells, variants, &all_rates),
        rates: all_rates,
        seeds: seeds.to_vec(),
        variants: variants.to_vec(),
        cells,
    })
}

impl SweepTable {
    pub fn to_table(&self) -> String {
        let mut out = String::from("variant             rate   Avg           CoPr          drop%\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<18}  {:<5}  {:<12}  {:<12}  {}",
                r.variant.name(),
                r.rate,
                fmt_stat(r.avg, 100.0),
                fmt_stat(r.copr, 100.0),
                fmt_stat(r.relative_drop, 100.0),
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub avg: Option<Stat>,
    pub copr: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// Majority vote over the full model's per-annotator predictions.
    pub post_mv: Option<Stat>,
    pub cells: Vec<CellResult>,
}

/// Trains each variant on identical data and seeds.
pub fn run_ablation(
    setup: &ExperimentSetup,
    features: &FeatureSet,
    annotations: &AnnotationMatrix,
    seeds: &[u64],
    variants: &[Variant],
    cell_dir: Option<&Path>,
    threads: usize,
) -> Result<AblationTable> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Config("an ablation needs at least one seed and one variant".into()));
    }
    let cells = run_cells(setup, features, annotations, &grid(variants, &[0.0], seeds), cell_dir, threads)?;
    let stat = |v: Variant, m: Metric| {
        Stat::of(
            &cells
                .iter()
                .filter(|c| c.key.variant == v)
                .filter_map(|c| c.metric(m))
                .collect::<Vec<_>>(),
        )
    };
    let rows = variants
        .iter()
        .map(|&v| AblationRow {
            variant: v,
            avg: stat(v, Metric::Avg),
            copr: stat(v, Metric::CoPr),
        })
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
        post_mv: stat(Variant::Full, Metric::CoPr),
        cells,
    })
}

impl AblationTable {
    pub fn to_table(&self) -> String {
        let mut out = String::from("variant             Avg           CoPr\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<18}  {:<12}  {}",
                r.variant.name(),
                fmt_stat(r.avg, 100.0),
                fmt_stat(r.copr, 100.0)
            );
        }
        let _ = writeln!(out, "{:<18}  {:<12}  {}", "post_mv", "-", fmt_stat(self.post_mv, 100.0));
        out
    }
}

/// Seeds on which `a`'s metric beats `b`'s, and the number of non-tied
/// seeds compared.
pub fn paired_wins(cells: &[CellResult], a: (Variant, Metric), b: (Variant, Metric)) -> (usize, usize) {
    let pick = |v: Variant, m: Metric, seed: u64| {
        cells
            .iter()
            .find(|c| c.key.variant == v && c.key.seed == seed && c.key.rate == 0.0)
            .and_then(|c| c.metric(m))
    };
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.key.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let (mut wins, mut trials) = (0, 0);
    for s in seeds {
        if let (Some(x), Some(y)) = (pick(a.0, a.1, s), pick(b.0, b.1, s)) {
            if x != y {
                trials += 1;
                wins += usize::from(x > y);
            }
        }
    }
    (wins, trials)
}

/// Default location of persisted cells under a run directory.
pub fn cell_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("cells")
}
