//! Loss × scene × seed experiment grids.
//!
//! Every cell trains one [`TinySegNet`](crate::trainer::TinySegNet) from its
//! own seed on a dataset shared by all cells of the same scene. Per-image
//! test metrics are pooled over seeds for each (scene, loss) and summarised
//! as mean ± 95% CI, with pairwise rank-sum p-values on DSC.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json};
use crate::losses::{preset, LossSpec, UnifiedParams, Variant};
use crate::metrics::{mean_ci, wilcoxon_rank_sum, Metric, MetricsRow, METRICS_CSV_HEADER};
use crate::synth::{generate, split, Dataset, SceneConfig, Splits, PROTOCOL_RATIOS};
use crate::trainer::{train_cancellable, Outcome, TrainConfig, TrainReport};

/// Environment variable capping the number of cells trained concurrently.
pub const WORKERS_ENV: &str = "IMLOSS_WORKERS";

/// A scene given by preset name or spelled out in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneEntry {
    Preset(String),
    Config(SceneConfig),
}

impl SceneEntry {
    pub fn resolve(&self) -> Result<SceneConfig> {
        match self {
            SceneEntry::Preset(name) => SceneConfig::preset(name),
            SceneEntry::Config(c) => Ok(c.clone()),
        }
    }
}

/// A loss given by preset name or as a named spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LossEntry {
    Preset(String),
    Named { name: String, spec: LossSpec },
}

impl LossEntry {
    pub fn resolve(&self) -> Result<(String, LossSpec)> {
        match self {
            LossEntry::Preset(name) => Ok((name.clone(), preset(name)?)),
            LossEntry::Named { name, spec } => {
                spec.validate()?;
                Ok((name.clone(), spec.clone()))
            }
        }
    }
}

fn d_lr() -> f64 {
    0.1
}
fn d_batch() -> usize {
    2
}
fn d_factor() -> f64 {
    0.1
}
fn d_plateau() -> usize {
    10
}
fn d_stop() -> usize {
    20
}
fn d_epochs() -> usize {
    200
}
fn d_delta() -> f64 {
    1e-6
}

/// Training settings shared by every cell; loss and seed come from the cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTemplate {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_factor")]
    pub plateau_factor: f64,
    #[serde(default = "d_plateau")]
    pub plateau_patience: usize,
    #[serde(default = "d_stop")]
    pub early_stop_patience: usize,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_delta")]
    pub min_delta: f64,
}

impl Default for TrainTemplate {
    fn default() -> Self {
        Self {
            learning_rate: d_lr(),
            batch_size: d_batch(),
            plateau_factor: d_factor(),
            plateau_patience: d_plateau(),
            early_stop_patience: d_stop(),
            max_epochs: d_epochs(),
            min_delta: d_delta(),
        }
    }
}

impl TrainTemplate {
    pub fn config(&self, loss: LossSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            early_stop_patience: self.early_stop_patience,
            max_epochs: self.max_epochs,
            min_delta: self.min_delta,
            seed,
            loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkGrid {
    pub scenes: Vec<SceneEntry>,
    pub losses: Vec<LossEntry>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainTemplate,
}

#[derive(Debug, Clone)]
struct ResolvedGrid {
    scenes: Vec<SceneConfig>,
    losses: Vec<(String, LossSpec)>,
    seeds: Vec<u64>,
    train: TrainTemplate,
}

impl BenchmarkGrid {
    fn resolve(&self) -> Result<ResolvedGrid> {
        if self.scenes.is_empty() || self.losses.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("grid", "scenes, losses and seeds must be nonempty"));
        }
        let scenes = self
            .scenes
            .iter()
            .map(|s| {
                let c = s.resolve()?;
                c.validate()?;
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        let losses = self
            .losses
            .iter()
            .map(LossEntry::resolve)
            .collect::<Result<Vec<_>>>()?;
        let mut seen = HashSet::new();
        for s in &scenes {
            if !seen.insert(&s.name) {
                return Err(Error::invalid("scenes", format!("duplicate scene {:?}", s.name)));
            }
            for (_, spec) in &losses {
                spec.validate_for_classes(s.num_classes)?;
            }
        }
        let mut seen = HashSet::new();
        for (name, _) in &losses {
            if !seen.insert(name) {
                return Err(Error::invalid("losses", format!("duplicate loss {name:?}")));
            }
            if name.contains(',') || name.contains('\n') {
                return Err(Error::invalid("losses", format!("{name:?} cannot appear in CSV")));
            }
        }
        let mut seen = HashSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                return Err(Error::invalid("seeds", format!("duplicate seed {s}")));
            }
        }
        self.train.config(LossSpec::Ce, 0).validate()?;
        Ok(ResolvedGrid {
            scenes,
            losses,
            seeds: self.seeds.clone(),
            train: self.train.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Completed,
    /// Diverged or otherwise failed; excluded from the summary.
    Failed { reason: String },
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub scene: String,
    pub loss: String,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(skip)]
    pub report: Option<TrainReport>,
}

/// Mean ± CI of one metric over the pooled per-image values of one (scene, loss, class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scene: String,
    pub loss: String,
    pub class: usize,
    pub metric: Metric,
    pub mean: f64,
    pub ci_halfwidth: f64,
    /// Seeds that contributed.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueRow {
    pub scene: String,
    pub class: usize,
    pub loss_a: String,
    pub loss_b: String,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<SummaryRow>,
    pub pvalues: Vec<PValueRow>,
}

impl ResultTable {
    pub fn get(&self, scene: &str, loss: &str, class: usize, metric: Metric) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.scene == scene && r.loss == loss && r.class == class && r.metric == metric)
    }

    pub fn p_value(&self, scene: &str, class: usize, a: &str, b: &str) -> Option<f64> {
        self.pvalues
            .iter()
            .find(|r| r.scene == scene && r.class == class && r.loss_a == a && r.loss_b == b)
            .map(|r| r.p_value)
    }
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub cells: Vec<CellResult>,
    pub table: ResultTable,
    /// False when the run was cancelled before every cell finished.
    pub complete: bool,
}

impl GridResult {
    fn completed(&self) -> impl Iterator<Item = (&CellResult, &TrainReport)> {
        self.cells.iter().filter_map(|c| match (&c.status, &c.report) {
            (CellStatus::Completed, Some(r)) => Some((c, r)),
            _ => None,
        })
    }

    /// Rows of `results.csv`: per-cell metrics pooled over test pixels.
    pub fn results_rows(&self) -> Vec<MetricsRow> {
        let mut rows = Vec::new();
        for (cell, report) in self.completed() {
            let test = report.test.as_ref().expect("completed cells have test metrics");
            for (class, m) in test.pooled.classes.iter().enumerate() {
                rows.push(MetricsRow {
                    dataset: cell.scene.clone(),
                    loss: cell.loss.clone(),
                    seed: cell.seed,
                    class,
                    dsc: m.dsc,
                    iou: m.iou,
                    precision: m.precision,
                    recall: m.recall,
                });
            }
        }
        rows
    }

    pub fn results_csv(&self) -> String {
        let mut s = format!("{}\n", METRICS_CSV_HEADER.replacen("dataset", "scene", 1));
        for r in self.results_rows() {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn per_image_csv(&self) -> String {
        let mut s = String::from("scene,loss,seed,image,class,dsc,iou,precision,recall\n");
        for (cell, report) in self.completed() {
            let test = report.test.as_ref().expect("completed cells have test metrics");
            for (i, img) in test.per_image.iter().enumerate() {
                for (class, m) in img.classes.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                        cell.scene, cell.loss, cell.seed, i, class, m.dsc, m.iou, m.precision, m.recall
                    );
                }
            }
        }
        s
    }

    /// Writes `results.csv`, `per_image.csv`, `summary.csv`, `pvalues.csv`,
    /// `cells.json` and `report.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("results.csv"), self.results_csv().as_bytes())?;
        write_atomic(&dir.join("per_image.csv"), self.per_image_csv().as_bytes())?;
        write_atomic(&dir.join("summary.csv"), summary_csv(&self.table.rows).as_bytes())?;
        write_atomic(&dir.join("pvalues.csv"), pvalues_csv(&self.table.pvalues).as_bytes())?;
        write_json(&dir.join("cells.json"), &self.cells)?;
        let mut md = String::new();
        if !self.complete {
            md.push_str("**Incomplete run**: cancelled before every cell finished.\n\n");
        }
        md.push_str(&render_report(&self.table.rows));
        let failed: Vec<&CellResult> = self
            .cells
            .iter()
            .filter(|c| c.status != CellStatus::Completed)
            .collect();
        if !failed.is_empty() {
            md.push_str("\n## Missing cells\n\n");
            for c in failed {
                let why = match &c.status {
                    CellStatus::Failed { reason } => reason.as_str(),
                    _ => "cancelled",
                };
                let _ = writeln!(md, "- {} / {} / seed {}: {}", c.scene, c.loss, c.seed, why);
            }
        }
        write_atomic(&dir.join("report.md"), md.as_bytes())
    }
}

/// Worker count: `IMLOSS_WORKERS` if set, else the available parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::invalid(WORKERS_ENV, format!("{v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

struct Prepared {
    data: Dataset,
    splits: Splits,
}

fn prepare(scene: &SceneConfig) -> Result<Prepared> {
    Ok(Prepared {
        data: generate(scene)?,
        splits: split(scene.count, PROTOCOL_RATIOS, scene.seed)?,
    })
}

pub fn run_grid(grid: &BenchmarkGrid) -> Result<GridResult> {
    run_grid_cancellable(grid, &AtomicBool::new(false))
}

/// Runs every cell; cells left unstarted when `cancel` is raised are marked cancelled.
pub fn run_grid_cancellable(grid: &BenchmarkGrid, cancel: &AtomicBool) -> Result<GridResult> {
    let g = grid.resolve()?;
    let prepared = g.scenes.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let mut plan = Vec::new();
    for si in 0..g.scenes.len() {
        for li in 0..g.losses.len() {
            for &seed in &g.seeds {
                plan.push((si, li, seed));
            }
        }
    }
    let workers = worker_count()?.min(plan.len());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(WORKERS_ENV, e.to_string()))?;
    let cells: Vec<CellResult> = pool.install(|| {
        plan.par_iter()
            .map(|&(si, li, seed)| {
                let (name, spec) = &g.losses[li];
                let p = &prepared[si];
                let config = g.train.config(spec.clone(), seed);
                let (status, report) = if cancel.load(Ordering::Relaxed) {
                    (CellStatus::Cancelled, None)
                } else {
                    match train_cancellable(&config, &p.data, &p.splits, cancel) {
                        Ok((r, _)) => match &r.outcome {
                            Outcome::Diverged { epoch, reason } => (
                                CellStatus::Failed {
                                    reason: format!("diverged at epoch {epoch}: {reason}"),
                                },
                                Some(r),
                            ),
                            _ => (CellStatus::Completed, Some(r)),
                        },
                        Err(Error::Cancelled) => (CellStatus::Cancelled, None),
                        Err(e) => (CellStatus::Failed { reason: e.to_string() }, None),
                    }
                };
                CellResult {
                    scene: g.scenes[si].name.clone(),
                    loss: name.clone(),
                    seed,
                    status,
                    report,
                }
            })
            .collect()
    });
    let complete = !cells.iter().any(|c| c.status == CellStatus::Cancelled);
    let table = summarize(&g, &cells)?;
    Ok(GridResult {
        cells,
        table,
        complete,
    })
}

fn summarize(g: &ResolvedGrid, cells: &[CellResult]) -> Result<ResultTable> {
    let mut rows = Vec::new();
    let mut pvalues = Vec::new();
    for scene in &g.scenes {
        // pooled[loss][class][metric] -> per-image values over all completed seeds
        let mut pooled: Vec<Vec<BTreeMap<Metric, Vec<f64>>>> =
            vec![vec![BTreeMap::new(); scene.num_classes]; g.losses.len()];
        let mut seeds_used = vec![0usize; g.losses.len()];
        for (li, (loss, _)) in g.losses.iter().enumerate() {
            for cell in cells.iter().filter(|c| &c.scene == &scene.name && &c.loss == loss) {
                let (CellStatus::Completed, Some(report)) = (&cell.status, &cell.report) else {
                    continue;
                };
                seeds_used[li] += 1;
                let test = report.test.as_ref().expect("completed cells have test metrics");
                for img in &test.per_image {
                    for (class, m) in img.classes.iter().enumerate() {
                        for metric in Metric::ALL {
                            pooled[li][class].entry(metric).or_default().push(m.get(metric));
                        }
                    }
                }
            }
            for class in 0..scene.num_classes {
                for metric in Metric::ALL {
                    let values = pooled[li][class].get(&metric).map_or(&[][..], |v| &v[..]);
                    let (mean, ci) = match values.len() {
                        0 => (f64::NAN, f64::NAN),
                        1 => (values[0], f64::NAN),
                        _ => mean_ci(values)?,
                    };
                    rows.push(SummaryRow {
                        scene: scene.name.clone(),
                        loss: loss.clone(),
                        class,
                        metric,
                        mean,
                        ci_halfwidth: ci,
                        n: seeds_used[li],
                    });
                }
            }
        }
        for class in 0..scene.num_classes {
            for (a, (name_a, _)) in g.losses.iter().enumerate() {
                for (b, (name_b, _)) in g.losses.iter().enumerate() {
                    let va = pooled[a][class].get(&Metric::Dsc);
                    let vb = pooled[b][class].get(&Metric::Dsc);
                    let p = match (va, vb) {
                        _ if a == b => 1.0,
                        (Some(va), Some(vb)) => {
                            if a < b {
                                wilcoxon_rank_sum(va, vb)?
                            } else {
                                wilcoxon_rank_sum(vb, va)?
                            }
                        }
                        _ => f64::NAN,
                    };
                    pvalues.push(PValueRow {
                        scene: scene.name.clone(),
                        class,
                        loss_a: name_a.clone(),
                        loss_b: name_b.clone(),
                        p_value: p,
                    });
                }
            }
        }
    }
    Ok(ResultTable { rows, pvalues })
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

pub const SUMMARY_CSV_HEADER: &str = "scene,loss,class,metric,mean,ci_halfwidth,n";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.scene,
            r.loss,
            r.class,
            r.metric.name(),
            fmt_num(r.mean),
            fmt_num(r.ci_halfwidth),
            r.n
        );
    }
    s
}

pub fn pvalues_csv(rows: &[PValueRow]) -> String {
    let mut s = String::from("scene,class,loss_a,loss_b,p_value\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.scene,
            r.class,
            r.loss_a,
            r.loss_b,
            fmt_num(r.p_value)
        );
    }
    s
}

/// Markdown tables, one per (scene, foreground class): a row per loss,
/// `mean ± CI` per metric, best mean per column in bold.
pub fn render_report(rows: &[SummaryRow]) -> String {
    let mut md = String::new();
    let mut keys: Vec<(&str, usize)> = Vec::new();
    for r in rows {
        if r.class > 0 && !keys.contains(&(r.scene.as_str(), r.class)) {
            keys.push((r.scene.as_str(), r.class));
        }
    }
    for (scene, class) in keys {
        let _ = writeln!(md, "## {scene}, class {class}\n");
        md.push_str("| Loss | DSC | IoU | Precision | Recall | n |\n");
        md.push_str("|---|---|---|---|---|---|\n");
        let sub: Vec<&SummaryRow> = rows
            .iter()
            .filter(|r| r.scene == scene && r.class == class)
            .collect();
        let best: BTreeMap<Metric, f64> = Metric::ALL
            .iter()
            .map(|&m| {
                let top = sub
                    .iter()
                    .filter(|r| r.metric == m && !r.mean.is_nan())
                    .map(|r| (r.mean * 1e3).round() / 1e3)
                    .fold(f64::NEG_INFINITY, f64::max);
                (m, top)
            })
            .collect();
        let mut losses: Vec<&str> = Vec::new();
        for r in &sub {
            if !losses.contains(&r.loss.as_str()) {
                losses.push(&r.loss);
            }
        }
        for loss in losses {
            let mut line = format!("| {loss} |");
            let mut n = 0;
            for m in Metric::ALL {
                let Some(r) = sub.iter().find(|r| r.loss == loss && r.metric == m) else {
                    line.push_str(" - |");
                    continue;
                };
                n = r.n;
                let cell = if r.mean.is_nan() {
                    "-".to_string()
                } else if r.ci_halfwidth.is_nan() {
                    format!("{:.3}", r.mean)
                } else {
                    format!("{:.3} ± {:.3}", r.mean, r.ci_halfwidth)
                };
                if !r.mean.is_nan() && (r.mean * 1e3).round() / 1e3 == best[&m] {
                    let _ = write!(line, " **{cell}** |");
                } else {
                    let _ = write!(line, " {cell} |");
                }
            }
            let _ = writeln!(line, " {n} |");
            md.push_str(&line);
        }
        md.push('\n');
    }
    md
}

/// Summary rows computed from a `results.csv` alone: the unit is one
/// (cell, class) row, so `n` and the CI are over seeds.
pub fn summarize_results_csv(text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let expected = METRICS_CSV_HEADER.replacen("dataset", "scene", 1);
    if header.trim() != expected && header.trim() != METRICS_CSV_HEADER {
        return Err(Error::Format(format!("unexpected results header {header:?}")));
    }
    let mut groups: Vec<((String, String, usize), Vec<[f64; 4]>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!("line {}: expected 8 fields", i + 2)));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("line {}: bad number {s:?}", i + 2)))
        };
        let class = f[3]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("line {}: bad class {:?}", i + 2, f[3])))?;
        let key = (f[0].to_string(), f[1].to_string(), class);
        let vals = [num(f[4])?, num(f[5])?, num(f[6])?, num(f[7])?];
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(vals),
            None => groups.push((key, vec![vals])),
        }
    }
    let mut rows = Vec::new();
    for ((scene, loss, class), vals) in groups {
        for (mi, metric) in Metric::ALL.into_iter().enumerate() {
            let v: Vec<f64> = vals.iter().map(|r| r[mi]).collect();
            let (mean, ci) = if v.len() >= 2 {
                mean_ci(&v)?
            } else {
                (v[0], f64::NAN)
            };
            rows.push(SummaryRow {
                scene: scene.clone(),
                loss: loss.clone(),
                class,
                metric,
                mean,
                ci_halfwidth: ci,
                n: v.len(),
            });
        }
    }
    Ok(rows)
}

/// One point of a γ sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub variant: Variant,
    pub gamma: f64,
    /// Mean over seeds and test images of the mean foreground-class DSC.
    pub mean_dsc: f64,
    pub ci_halfwidth: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub scene: SceneEntry,
    pub variants: Vec<Variant>,
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "half")]
    pub lambda: f64,
    #[serde(default = "d_sweep_delta")]
    pub delta: f64,
    #[serde(default)]
    pub train: TrainTemplate,
}

fn half() -> f64 {
    0.5
}
fn d_sweep_delta() -> f64 {
    0.6
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Sym => "sym",
        Variant::Asym => "asym",
    }
}

/// Unified Focal runs over a γ grid; one curve per variant.
pub fn gamma_sweep(config: &SweepConfig, cancel: &AtomicBool) -> Result<(Vec<SweepPoint>, GridResult)> {
    if config.gammas.is_empty() || config.variants.is_empty() {
        return Err(Error::invalid("gammas", "gammas and variants must be nonempty"));
    }
    let mut losses = Vec::new();
    for &v in &config.variants {
        for &g in &config.gammas {
            let spec = LossSpec::UnifiedFocal(UnifiedParams::new(v, config.lambda, config.delta, g));
            spec.validate()?;
            losses.push(LossEntry::Named {
                name: format!("unified_focal_{}@{g}", variant_name(v)),
                spec,
            });
        }
    }
    let grid = BenchmarkGrid {
        scenes: vec![config.scene.clone()],
        losses,
        seeds: config.seeds.clone(),
        train: config.train.clone(),
    };
    let result = run_grid_cancellable(&grid, cancel)?;
    let mut points = Vec::new();
    for &v in &config.variants {
        for &g in &config.gammas {
            let name = format!("unified_focal_{}@{g}", variant_name(v));
            let mut values = Vec::new();
            let mut n = 0;
            for (cell, report) in result.completed() {
                if cell.loss != name {
                    continue;
                }
                n += 1;
                for img in &report.test.as_ref().expect("test metrics").per_image {
                    let fg = &img.classes[1..];
                    values.push(fg.iter().map(|m| m.dsc).sum::<f64>() / fg.len() as f64);
                }
            }
            let (mean_dsc, ci_halfwidth) = match values.len() {
                0 => (f64::NAN, f64::NAN),
                1 => (values[0], f64::NAN),
                _ => mean_ci(&values)?,
            };
            points.push(SweepPoint {
                variant: v,
                gamma: g,
                mean_dsc,
                ci_halfwidth,
                n,
            });
        }
    }
    Ok((points, result))
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("variant,gamma,mean_dsc,ci_halfwidth,n\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            variant_name(p.variant),
            p.gamma,
            fmt_num(p.mean_dsc),
            fmt_num(p.ci_halfwidth),
            p.n
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::BlobKind;

    fn toy_scene() -> SceneConfig {
        SceneConfig {
            name: "toy".into(),
            height: 12,
            width: 12,
            num_classes: 2,
            target_foreground_fraction: vec![0.2],
            noise_sigma: 0.1,
            blob_kind: BlobKind::Ellipse,
            nesting: false,
            count: 15,
            seed: 2,
        }
    }

    fn toy_grid(losses: &[&str], seeds: &[u64]) -> BenchmarkGrid {
        BenchmarkGrid {
            scenes: vec![SceneEntry::Config(toy_scene())],
            losses: losses.iter().map(|l| LossEntry::Preset(l.to_string())).collect(),
            seeds: seeds.to_vec(),
            train: TrainTemplate {
                max_epochs: 3,
                plateau_patience: 1,
                early_stop_patience: 2,
                ..TrainTemplate::default()
            },
        }
    }

    #[test]
    fn bookkeeping() {
        let r = run_grid(&toy_grid(&["ce", "dice"], &[0, 1, 2])).unwrap();
        assert!(r.complete);
        assert_eq!(r.table.rows.len(), 2 * 2 * 4);
        for row in &r.table.rows {
            assert_eq!(row.n, 3);
        }
        for l in ["ce", "dice"] {
            assert_eq!(r.table.p_value("toy", 1, l, l), Some(1.0));
        }
        assert_eq!(
            r.table.p_value("toy", 1, "ce", "dice"),
            r.table.p_value("toy", 1, "dice", "ce")
        );
        assert_eq!(r.results_csv().lines().count(), 1 + 2 * 3 * 2);
    }

    #[test]
    fn same_spec_under_two_names_gives_identical_rows() {
        let mut g = toy_grid(&["dice"], &[0, 1]);
        g.losses.push(LossEntry::Named {
            name: "dice_again".into(),
            spec: LossSpec::Dice,
        });
        let r = run_grid(&g).unwrap();
        for m in Metric::ALL {
            let a = r.table.get("toy", "dice", 1, m).unwrap();
            let b = r.table.get("toy", "dice_again", 1, m).unwrap();
            assert_eq!((a.mean, a.ci_halfwidth, a.n), (b.mean, b.ci_halfwidth, b.n));
        }
    }

    #[test]
    fn cells_are_independent_and_runs_reproduce() {
        let full = run_grid(&toy_grid(&["ce", "dice"], &[0, 1])).unwrap();
        let again = run_grid(&toy_grid(&["ce", "dice"], &[0, 1])).unwrap();
        assert_eq!(full.results_csv(), again.results_csv());
        let only = run_grid(&toy_grid(&["dice"], &[0, 1])).unwrap();
        let dice_rows = |r: &GridResult| -> Vec<String> {
            r.results_csv().lines().filter(|l| l.contains(",dice,")).map(String::from).collect()
        };
        assert_eq!(dice_rows(&full), dice_rows(&only));
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(toy_grid(&[], &[0]).validate().is_err());
        assert!(toy_grid(&["ce"], &[0, 0]).validate().is_err());
        assert!(toy_grid(&["ce", "ce"], &[0]).validate().is_err());
        assert!(toy_grid(&["nope"], &[0]).validate().is_err());
        let g: BenchmarkGrid = serde_json::from_str(
            r#"{"scenes": ["moderate"], "losses": ["dice", {"name": "t", "spec": {"family": "tversky", "alpha": 0.3, "beta": 0.7}}], "seeds": [0]}"#,
        )
        .unwrap();
        g.validate().unwrap();
    }

    #[test]
    fn cancelled_grid_is_flagged() {
        let flag = AtomicBool::new(true);
        let r = run_grid_cancellable(&toy_grid(&["ce"], &[0]), &flag).unwrap();
        assert!(!r.complete);
        assert_eq!(r.cells[0].status, CellStatus::Cancelled);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
        assert!(md.starts_with("**Incomplete run**"));
    }

    #[test]
    fn report_bolds_best_per_metric() {
        let row = |loss: &str, metric, mean| SummaryRow {
            scene: "s".into(),
            loss: loss.into(),
            class: 1,
            metric,
            mean,
            ci_halfwidth: 0.01,
            n: 3,
        };
        let mut rows = Vec::new();
        for m in Metric::ALL {
            rows.push(row("a", m, if m == Metric::Recall { 0.9 } else { 0.5 }));
            rows.push(row("b", m, if m == Metric::Recall { 0.8 } else { 0.7 }));
        }
        let md = render_report(&rows);
        assert!(md.contains("| a | 0.500 ± 0.010 | 0.500 ± 0.010 | 0.500 ± 0.010 | **0.900 ± 0.010** | 3 |"), "{md}");
        assert!(md.contains("| b | **0.700 ± 0.010** | **0.700 ± 0.010** | **0.700 ± 0.010** | 0.800 ± 0.010 | 3 |"), "{md}");
    }

    #[test]
    fn report_from_results_csv() {
        let csv = "scene,loss,seed,class,dsc,iou,precision,recall\n\
                   s,a,0,1,0.5,0.333333,0.5,0.5\n\
                   s,a,1,1,0.7,0.538462,0.7,0.7\n";
        let rows = summarize_results_csv(csv).unwrap();
        let dsc = rows.iter().find(|r| r.metric == Metric::Dsc).unwrap();
        assert!((dsc.mean - 0.6).abs() < 1e-12);
        assert_eq!(dsc.n, 2);
        assert!(summarize_results_csv("a,b\n").is_err());
    }

    #[test]
    fn sweep_bookkeeping() {
        let cfg = SweepConfig {
            scene: SceneEntry::Config(toy_scene()),
            variants: vec![Variant::Sym, Variant::Asym],
            gammas: vec![0.1, 0.5],
            seeds: vec![0],
            lambda: 0.5,
            delta: 0.6,
            train: toy_grid(&["ce"], &[0]).train,
        };
        let (points, _) = gamma_sweep(&cfg, &AtomicBool::new(false)).unwrap();
        assert_eq!(points.len(), 4);
        assert!(points.iter().all(|p| (0.0..=1.0).contains(&p.mean_dsc)));
        assert_eq!(sweep_csv(&points).lines().count(), 5);
        let bad = SweepConfig { gammas: vec![1.0], ..cfg };
        assert!(gamma_sweep(&bad, &AtomicBool::new(false)).is_err());
    }
}
