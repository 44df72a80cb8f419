//! AdamW with linear warmup and cosine decay, global-norm clipping and
//! early stopping on validation accuracy.

mod optim;
mod schedule;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datahub::LabeledSet;
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, predict, total_loss, ModelParams};
use crate::numkernel::{Scalar, Tape};

pub use optim::{adamw_step, clip_gradients, global_grad_norm, AdamState};
pub use schedule::{lr_at, warmup_steps};

fn default_peak_lr() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_clip() -> f64 {
    1.0
}
fn default_warmup() -> f64 {
    0.2
}
fn default_max_epochs() -> usize {
    200
}
fn default_patience() -> usize {
    25
}
fn default_batch() -> usize {
    32
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub clip_max_norm: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: default_peak_lr(),
            weight_decay: default_weight_decay(),
            clip_max_norm: default_clip(),
            warmup_fraction: default_warmup(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            batch_size: default_batch(),
            seed: 0,
            betas: default_betas(),
            eps: default_eps(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return fail(format!("warmup_fraction must be in (0, 1), got {}", self.warmup_fraction));
        }
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return fail(format!(
                "need 0 < max_epochs and patience < max_epochs, got {} / {}",
                self.max_epochs, self.patience
            ));
        }
        if self.patience == 0 {
            return fail("patience must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_max_norm > 0.0) {
            return fail("peak_lr and weight_decay must be >= 0, clip_max_norm > 0".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) {
            return fail("betas must lie in [0, 1) and eps must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Learning rate used by every optimizer step, in order.
    pub lr_trace: Vec<f64>,
    pub total_steps: usize,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Where the caller stored the best parameters, if anywhere.
    pub best_checkpoint: Option<String>,
}

/// What happened on one optimizer step; passed to observers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Patience counter over a metric where larger is better.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Only a strict improvement resets the counter.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if metric <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, metric));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Mean over annotators of accuracy on their observed labels. A single
/// pooled prediction row is compared against every annotator.
pub fn average_accuracy<T: Scalar>(params: &ModelParams<T>, set: &LabeledSet<T>) -> Result<f64> {
    let n = params.config.n_annotators;
    let mut hits = vec![0usize; n];
    let mut seen = vec![0usize; n];
    for (x, labels) in set.inputs.iter().zip(&set.labels) {
        let preds = predict(x, params)?;
        for (k, label) in labels.iter().enumerate() {
            if let Some(y) = *label {
                seen[k] += 1;
                let p = if preds.len() == 1 { preds[0] } else { preds[k] };
                hits[k] += usize::from(p == y);
            }
        }
    }
    let per: Vec<f64> = hits
        .iter()
        .zip(&seen)
        .filter(|(_, &s)| s > 0)
        .map(|(&h, &s)| h as f64 / s as f64)
        .collect();
    if per.is_empty() {
        return Err(Error::Contract("validation set has no labels".into()));
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Trains with validation accuracy as the early-stopping metric.
pub fn train(
    params: ModelParams<f32>,
    train_set: &LabeledSet<f32>,
    val_set: &LabeledSet<f32>,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainHistory)> {
    if val_set.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    train_with(params, train_set, cfg, |p| average_accuracy(p, val_set), |_| {})
}

/// Training loop with a caller-supplied validation metric (larger is better)
/// and a per-step observer. Returns the parameters of the best epoch.
pub fn train_with<T: Scalar>(
    mut params: ModelParams<T>,
    train_set: &LabeledSet<T>,
    cfg: &TrainConfig,
    mut validate: impl FnMut(&ModelParams<T>) -> Result<f64>,
    mut observe: impl FnMut(&StepStats),
) -> Result<(ModelParams<T>, TrainHistory)> {
    cfg.validate()?;
    let usable: Vec<usize> = (0..train_set.len())
        .filter(|&i| train_set.labels[i].iter().any(Option::is_some))
        .collect();
    if usable.is_empty() {
        return Err(Error::Config("training split has no labelled samples".into()));
    }
    let batches_per_epoch = usable.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.max_epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&params);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = params.clone();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        lr_trace: Vec::with_capacity(total_steps),
        total_steps,
        stopped_epoch: 0,
        early_stopped: false,
        best_epoch: 0,
        best_metric: f64::NEG_INFINITY,
        best_checkpoint: None,
    };
    let mut order = usable;
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let this_step = step + 1;
            let diverged = move |loss: f64| Error::Diverged {
                epoch,
                step: this_step,
                loss,
            };
            let numeric = |e: Error| match e {
                Error::Numeric { .. } => diverged(f64::NAN),
                e => e,
            };
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, true)?;
            let mean = batch_loss(&mut tape, &params, &vars, train_set, batch).map_err(numeric)?;
            let loss = tape.value(mean)[0].as_f64();
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            tape.backward(mean)?;
            params.zero_grads();
            params.collect_grads(&tape, &vars)?;
            let grad_norm = global_grad_norm(&params)?;
            if !grad_norm.is_finite() {
                return Err(diverged(loss));
            }
            clip_gradients(&mut params, cfg.clip_max_norm)?;
            let clipped_norm = global_grad_norm(&params)?;
            step = this_step;
            let lr = lr_at(step, total_steps, cfg)?;
            adamw_step(&mut params, &mut state, lr, cfg)?;
            if params.params().iter().any(|p| !p.tensor.is_finite()) {
                return Err(diverged(loss));
            }
            history.lr_trace.push(lr);
            loss_sum += loss * batch.len() as f64;
            observe(&StepStats {
                epoch,
                step,
                loss,
                lr,
                grad_norm,
                clipped_norm,
            });
        }
        let metric = validate(&params).map_err(|e| match e {
            Error::Numeric { .. } => Error::Diverged {
                epoch,
                step,
                loss: f64::NAN,
            },
            e => e,
        })?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_metric: metric,
        });
        history.stopped_epoch = epoch;
        match stopper.observe(epoch, metric) {
            StopDecision::Improved => best = params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                history.early_stopped = true;
                break;
            }
        }
    }
    params.zero_grads();
    best.zero_grads();
    let (best_epoch, best_metric) = stopper.best().expect("at least one epoch ran");
    history.best_epoch = best_epoch;
    history.best_metric = best_metric;
    Ok((best, history))
}

fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    vars: &[crate::numkernel::Var],
    set: &LabeledSet<T>,
    batch: &[usize],
) -> Result<crate::numkernel::Var> {
    let mut losses = Vec::with_capacity(batch.len());
    for &i in batch {
        let pass = forward_on_tape(tape, params, vars, &set.inputs[i], false)?;
        losses.push(total_loss(tape, pass.logits, &set.labels[i])?);
    }
    let sum = tape.add_all(&losses)?;
    tape.scale(sum, T::from_f64(1.0 / batch.len() as f64))
}
