//! Training loop for [`TinySegNet`]: SGD with a validation plateau schedule,
//! early stopping and best-validation model selection.

mod net;
mod schedule;

pub use net::{init_xavier, Activations, Conv, Real, TinySegNet, HIDDEN};
pub use schedule::{EarlyStopping, Patience, PlateauSchedule};

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{evaluate, LossSpec};
use crate::metrics::{compute_metrics, confusion_from_labels, ConfusionCounts, SegMetrics};
use crate::numerics::segt::SegtArray;
use crate::numerics::{one_hot, Labels, OneHotMask, Tensor};
use crate::oracle::trial_rng;
use crate::synth::{Dataset, Splits};

fn default_lr() -> f64 {
    0.1
}
fn default_batch() -> usize {
    2
}
fn default_factor() -> f64 {
    0.1
}
fn default_plateau() -> usize {
    10
}
fn default_early_stop() -> usize {
    20
}
fn default_max_epochs() -> usize {
    200
}
fn default_min_delta() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_factor")]
    pub plateau_factor: f64,
    #[serde(default = "default_plateau")]
    pub plateau_patience: usize,
    #[serde(default = "default_early_stop")]
    pub early_stop_patience: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Smallest decrease of the validation loss that counts as improvement.
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    #[serde(default)]
    pub seed: u64,
    pub loss: LossSpec,
}

impl TrainConfig {
    pub fn new(loss: LossSpec, seed: u64) -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            plateau_factor: default_factor(),
            plateau_patience: default_plateau(),
            early_stop_patience: default_early_stop(),
            max_epochs: default_max_epochs(),
            min_delta: default_min_delta(),
            seed,
            loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid("plateau_factor", "must lie in (0, 1)"));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::invalid("patience", "patiences must be positive"));
        }
        if self.plateau_patience >= self.early_stop_patience {
            return Err(Error::invalid(
                "plateau_patience",
                "must be smaller than early_stop_patience",
            ));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs", "must be positive"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::invalid("min_delta", "must be >= 0"));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    MaxEpochs,
    EarlyStopped,
    Diverged { epoch: usize, reason: String },
}

/// Metrics of the selected model on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// Counts pooled over all test pixels.
    pub counts: ConfusionCounts,
    pub pooled: SegMetrics,
    pub per_image: Vec<SegMetrics>,
}

impl TestResult {
    /// Mean over test images of one class's DSC.
    pub fn mean_dsc(&self, class: usize) -> f64 {
        self.per_image.iter().map(|m| m.classes[class].dsc).sum::<f64>() / self.per_image.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose model was selected (0 if no epoch finished).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub outcome: Outcome,
    /// Absent when training diverged.
    pub test: Option<TestResult>,
    pub wall_seconds: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_loss,val_loss,learning_rate";

impl TrainReport {
    pub fn epochs_csv(&self) -> String {
        let mut s = format!("{EPOCH_CSV_HEADER}\n");
        for r in &self.history {
            let _ = writeln!(
                s,
                "{},{:.9},{:.9},{:e}",
                r.epoch, r.train_loss, r.val_loss, r.learning_rate
            );
        }
        s
    }

    pub fn diverged(&self) -> bool {
        matches!(self.outcome, Outcome::Diverged { .. })
    }
}

struct Batches<'a> {
    data: &'a Dataset,
    pixels: usize,
}

impl Batches<'_> {
    fn images(&self, idx: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(idx.len() * self.pixels);
        for &i in idx {
            out.extend_from_slice(self.data.image(i));
        }
        out
    }

    fn truth(&self, idx: &[usize]) -> OneHotMask {
        let c = &self.data.config;
        let labels = idx
            .iter()
            .flat_map(|&i| self.data.label(i).iter().map(|&l| l as usize))
            .collect();
        let labels = Labels::new(vec![idx.len(), c.height, c.width], labels).expect("label shape");
        one_hot(&labels, c.num_classes).expect("labels below class count")
    }
}

fn logits_tensor(logits: &[f32], n: usize, h: usize, w: usize, c: usize) -> Result<Tensor> {
    Tensor::new(
        vec![n, h, w, c],
        logits.iter().map(|&v| v as f64).collect(),
    )
}

fn batch_loss(
    net: &TinySegNet<f32>,
    spec: &LossSpec,
    batches: &Batches,
    idx: &[usize],
) -> Result<f64> {
    let c = &batches.data.config;
    let acts = net.forward(&batches.images(idx), idx.len(), c.height, c.width)?;
    let t = logits_tensor(&acts.logits, idx.len(), c.height, c.width, c.num_classes)?;
    Ok(evaluate(spec, &t, &batches.truth(idx))?.value)
}

/// Trains on `splits.train`, selects by `splits.val`, scores on `splits.test`.
pub fn train(config: &TrainConfig, data: &Dataset, splits: &Splits) -> Result<(TrainReport, TinySegNet)> {
    train_cancellable(config, data, splits, &AtomicBool::new(false))
}

/// As [`train`], checking `cancel` between batches.
pub fn train_cancellable(
    config: &TrainConfig,
    data: &Dataset,
    splits: &Splits,
    cancel: &AtomicBool,
) -> Result<(TrainReport, TinySegNet)> {
    config.validate()?;
    let sc = &data.config;
    config.loss.validate_for_classes(sc.num_classes)?;
    if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
        return Err(Error::invalid("splits", "train, val and test must be nonempty"));
    }
    if let Some(&i) = splits
        .train
        .iter()
        .chain(&splits.val)
        .chain(&splits.test)
        .find(|&&i| i >= data.count())
    {
        return Err(Error::invalid("splits", format!("index {i} beyond dataset of {}", data.count())));
    }
    let start = Instant::now();
    let (h, w, classes) = (sc.height, sc.width, sc.num_classes);
    let batches = Batches {
        data,
        pixels: sc.pixels(),
    };
    let mut net = init_xavier::<f32>(classes, config.seed);
    let mut best = net.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut schedule = PlateauSchedule::new(
        config.learning_rate,
        config.plateau_factor,
        config.plateau_patience,
        config.min_delta,
    );
    let mut stopper = EarlyStopping::new(config.early_stop_patience, config.min_delta);
    let mut shuffle_rng = trial_rng(config.seed, 1);
    let mut order = splits.train.clone();
    let mut history = Vec::new();
    let mut outcome = Outcome::MaxEpochs;

    'epochs: for epoch in 1..=config.max_epochs {
        let lr = schedule.lr;
        order.shuffle(&mut shuffle_rng);
        let mut train_sum = 0.0;
        let mut train_batches = 0usize;
        for idx in order.chunks(config.batch_size) {
            if cancel.load(Ordering::Relaxed) {
                return Err(Error::Cancelled);
            }
            let images = batches.images(idx);
            let acts = net.forward(&images, idx.len(), h, w)?;
            let out = logits_tensor(&acts.logits, idx.len(), h, w, classes)
                .and_then(|t| evaluate(&config.loss, &t, &batches.truth(idx)));
            let out = match out {
                Ok(o) if o.value.is_finite() => o,
                Ok(o) => {
                    outcome = Outcome::Diverged {
                        epoch,
                        reason: format!("training loss {}", o.value),
                    };
                    break 'epochs;
                }
                Err(Error::NonFinite { value, .. }) => {
                    outcome = Outcome::Diverged {
                        epoch,
                        reason: format!("non-finite logit {value}"),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let d: Vec<f32> = out.grad_logits.data().iter().map(|&v| v as f32).collect();
            let grad = net.backward(&images, &acts, &d, idx.len(), h, w);
            net.sgd_step(&grad, lr);
            train_sum += out.value;
            train_batches += 1;
        }
        let train_loss = train_sum / train_batches as f64;

        let mut val_sum = 0.0;
        let mut val_batches = 0usize;
        for idx in splits.val.chunks(config.batch_size) {
            match batch_loss(&net, &config.loss, &batches, idx) {
                Ok(v) => val_sum += v,
                Err(Error::NonFinite { .. }) => val_sum = f64::NAN,
                Err(e) => return Err(e),
            }
            val_batches += 1;
        }
        let val_loss = val_sum / val_batches as f64;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
        });
        if !val_loss.is_finite() || !net.is_finite() {
            outcome = Outcome::Diverged {
                epoch,
                reason: format!("validation loss {val_loss}"),
            };
            break;
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best.clone_from(&net);
        }
        schedule.step(val_loss);
        if stopper.should_stop(val_loss) {
            outcome = if epoch == config.max_epochs {
                Outcome::MaxEpochs
            } else {
                Outcome::EarlyStopped
            };
            break;
        }
    }

    let test = if matches!(outcome, Outcome::Diverged { .. }) {
        None
    } else {
        Some(evaluate_split(&best, data, &splits.test)?)
    };
    let report = TrainReport {
        config: config.clone(),
        history,
        best_epoch,
        best_val_loss: best_val,
        outcome,
        test,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, best))
}

/// Hard-label argmax predictions of `net` on one image.
pub fn predict(net: &TinySegNet, image: &[f32], h: usize, w: usize) -> Result<Vec<usize>> {
    let acts = net.forward(image, 1, h, w)?;
    let c = net.classes();
    Ok(acts
        .logits
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Per-image and pooled metrics of `net` on the images `idx`.
pub fn evaluate_split(net: &TinySegNet, data: &Dataset, idx: &[usize]) -> Result<TestResult> {
    let c = &data.config;
    let mut pooled = ConfusionCounts {
        classes: vec![Default::default(); c.num_classes],
    };
    let mut per_image = Vec::with_capacity(idx.len());
    for &i in idx {
        let pred = predict(net, data.image(i), c.height, c.width)?;
        let counts = confusion_from_labels(
            pred.into_iter(),
            data.label(i).iter().map(|&l| l as usize),
            c.num_classes,
        );
        per_image.push(compute_metrics(&counts));
        pooled.merge(&counts);
    }
    Ok(TestResult {
        pooled: compute_metrics(&pooled),
        counts: pooled,
        per_image,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub num_classes: usize,
    pub parameters: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

/// Writes one SEGT file per parameter tensor plus `checkpoint.json`.
pub fn save_checkpoint(net: &TinySegNet, dir: &Path) -> Result<()> {
    let mut entries = Vec::new();
    for (name, t) in net.tensors() {
        let file = format!("{name}.segt");
        SegtArray::from_tensor(&t).write(&dir.join(&file))?;
        entries.push(CheckpointEntry {
            name,
            file,
            shape: t.shape().to_vec(),
        });
    }
    crate::io::write_json(
        &dir.join("checkpoint.json"),
        &CheckpointManifest {
            num_classes: net.classes(),
            parameters: entries,
        },
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<TinySegNet> {
    let manifest: CheckpointManifest = crate::io::read_json(&dir.join("checkpoint.json"))?;
    let tensors = manifest
        .parameters
        .iter()
        .map(|e| Ok((e.name.clone(), SegtArray::read(&dir.join(&e.file))?.to_tensor()?)))
        .collect::<Result<Vec<_>>>()?;
    TinySegNet::from_tensors(&tensors)
}
