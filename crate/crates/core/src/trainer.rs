//! Adam with global-norm clipping, plateau learning-rate halving, validation
//! tracking, checkpoints and a metrics log.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::parse_value;
use crate::data::{seeded_rng, MixtureSample, MixtureSource};
use crate::error::{Error, Result};
use crate::loss::{mean_si_snri, pit_loss_tensor};
use crate::params::Parameterized;
use crate::separator::{save_checkpoint, SepFormer};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,step,train_loss,val_si_snri_db,lr,wall_clock_s";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// First epoch (1-based) at which the plateau rule may halve the rate.
    pub anneal_start_epoch: usize,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub grad_clip_norm: f64,
    /// Mixtures per optimizer step; gradients are accumulated.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub steps_per_epoch: usize,
    pub val_mixtures: usize,
    /// Random crop length for training mixtures; 0 keeps them whole.
    pub max_train_samples: usize,
    /// When false the metrics log records 0 for wall-clock time, making it
    /// reproducible byte for byte.
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 15e-5,
            anneal_start_epoch: 65,
            plateau_patience: 3,
            lr_factor: 0.5,
            grad_clip_norm: 5.0,
            batch_size: 1,
            max_epochs: 200,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            steps_per_epoch: 100,
            val_mixtures: 20,
            max_train_samples: 0,
            log_wall_clock: true,
        }
    }
}

impl TrainConfig {
    /// Defaults for training with dynamic mixing: later, more patient annealing.
    pub fn dynamic_mixing() -> TrainConfig {
        TrainConfig {
            anneal_start_epoch: 100,
            plateau_patience: 5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::config(format!(
                "lr_factor must lie in (0, 1), got {}",
                self.lr_factor
            )));
        }
        if self.plateau_patience == 0 {
            return Err(Error::config("plateau_patience must be at least 1"));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::config(
                "batch_size and steps_per_epoch must be positive",
            ));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::config("grad_clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps <= 0.0
        {
            return Err(Error::config(
                "adam betas must lie in [0, 1) and adam_eps must be positive",
            ));
        }
        Ok(())
    }

    /// Sets one field by name. Returns `false` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "anneal_start_epoch" => self.anneal_start_epoch = parse_value(key, value)?,
            "plateau_patience" => self.plateau_patience = parse_value(key, value)?,
            "lr_factor" => self.lr_factor = parse_value(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_value(key, value)?,
            "val_mixtures" => self.val_mixtures = parse_value(key, value)?,
            "max_train_samples" => self.max_train_samples = parse_value(key, value)?,
            "log_wall_clock" => self.log_wall_clock = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Global L2 norm of all gradients and the factor they were scaled by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipResult {
    pub norm: f64,
    pub scale: f64,
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_gradients<P: Parameterized + ?Sized>(model: &P, max_norm: f64) -> ClipResult {
    let params = model.parameters();
    let norm = params
        .iter()
        .filter_map(|(_, t)| {
            t.grad()
                .as_ref()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        })
        .sum::<f64>()
        .sqrt();
    let scale = if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    };
    if scale < 1.0 {
        for (_, t) in params {
            t.update_grad(|g| g.iter_mut().for_each(|v| *v *= scale));
        }
    }
    ClipResult { norm, scale }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<P: Parameterized + ?Sized>(model: &P) -> AdamState {
        let zeros: Vec<Vec<f64>> = model
            .parameters()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are skipped.
pub fn adam_step<P: Parameterized + ?Sized>(
    model: &mut P,
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, (_, param)) in model.parameters_mut().into_iter().enumerate() {
        let Some(grad) = param.grad().clone() else {
            continue;
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = param.data_mut()?;
        for j in 0..grad.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * grad[j];
            v[j] = b2 * v[j] + (1.0 - b2) * grad[j] * grad[j];
            data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// Plateau bookkeeping for the learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub best: f64,
    pub since_improvement: usize,
}

impl Default for Plateau {
    fn default() -> Self {
        Plateau {
            best: f64::NEG_INFINITY,
            since_improvement: 0,
        }
    }
}

/// Records this epoch's validation score and returns the new learning rate.
///
/// `epoch` is 1-based. Improvement is a strictly higher score. From
/// `anneal_start_epoch` on, `plateau_patience` epochs in a row without
/// improvement multiply the rate by `lr_factor` and restart the count.
pub fn lr_schedule_step(
    plateau: &mut Plateau,
    epoch: usize,
    lr: f64,
    val_si_snri: f64,
    config: &TrainConfig,
) -> f64 {
    if val_si_snri > plateau.best {
        plateau.best = val_si_snri;
        plateau.since_improvement = 0;
    } else {
        plateau.since_improvement += 1;
    }
    if epoch >= config.anneal_start_epoch && plateau.since_improvement >= config.plateau_patience {
        plateau.since_improvement = 0;
        lr * config.lr_factor
    } else {
        lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_si_snri_db: f64,
    pub lr: f64,
    pub wall_clock_s: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.step, self.train_loss, self.val_si_snri_db, self.lr, self.wall_clock_s
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub lr: f64,
    pub adam: AdamState,
    pub plateau: Plateau,
    pub last_grad_norm: f64,
    pub history: Vec<EpochRecord>,
    pub seed: u64,
}

impl TrainState {
    pub fn new<P: Parameterized + ?Sized>(model: &P, config: &TrainConfig) -> TrainState {
        TrainState {
            epoch: 0,
            step: 0,
            lr: config.lr,
            adam: AdamState::new(model),
            plateau: Plateau::default(),
            last_grad_norm: 0.0,
            history: Vec::new(),
            seed: config.seed,
        }
    }

    pub fn best_val_si_snri(&self) -> f64 {
        self.plateau.best
    }
}

/// Mean PIT-aligned SI-SNRi of `model` over `samples`.
pub fn validate(model: &SepFormer, samples: &[MixtureSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let ests = model.separate(&s.mixture.samples)?;
        total += mean_si_snri(&ests, &s.mixture.samples, &s.targets())?;
    }
    Ok(total / samples.len() as f64)
}

/// Where training writes `metrics.csv` and `best.ckpt`.
#[derive(Debug, Clone)]
pub struct OutputDir(pub PathBuf);

impl OutputDir {
    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.csv")
    }

    pub fn best(&self) -> PathBuf {
        self.0.join("best.ckpt")
    }
}

fn write_metrics(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in history {
        let _ = writeln!(text, "{}", r.csv_line());
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train_step(
    model: &mut SepFormer,
    data: &dyn MixtureSource,
    state: &mut TrainState,
    config: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<f64> {
    model.zero_grads();
    let mut rng = seeded_rng(config.seed, &[1, epoch as u64, step as u64]);
    let mut total = 0.0;
    for b in 0..config.batch_size {
        let sample = data
            .mixture(epoch, step * config.batch_size + b)?
            .crop(config.max_train_samples, &mut rng);
        let x = Tensor::new(sample.mixture.samples.clone(), &[sample.mixture.len()])?;
        let ests = model.forward(&x)?;
        let (loss, result) = pit_loss_tensor(&ests, &sample.targets())?;
        if !result.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step,
                lr: state.lr,
                grad_norm: state.last_grad_norm,
            });
        }
        loss.scale(1.0 / config.batch_size as f64).backward()?;
        total += result.loss;
    }
    let clip = clip_gradients(model, config.grad_clip_norm);
    if !clip.norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            step,
            lr: state.lr,
            grad_norm: clip.norm,
        });
    }
    state.last_grad_norm = clip.norm;
    adam_step(model, &mut state.adam, state.lr, config)?;
    state.step += 1;
    Ok(total / config.batch_size as f64)
}

/// Runs `config.max_epochs` epochs of `config.steps_per_epoch` steps.
///
/// After each epoch the model is scored on `valid`, the schedule is
/// updated, and (with `out`) the metrics log is rewritten and `best.ckpt`
/// saved whenever the score strictly improves.
pub fn train(
    model: &mut SepFormer,
    data: &dyn MixtureSource,
    valid: &[MixtureSample],
    config: &TrainConfig,
    out: Option<&OutputDir>,
) -> Result<TrainState> {
    config.validate()?;
    let mut state = TrainState::new(model, config);
    if let Some(out) = out {
        std::fs::create_dir_all(&out.0).map_err(|e| Error::io(&out.0, e))?;
        write_metrics(&out.metrics(), &state.history)?;
    }
    let start = Instant::now();
    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        for step in 0..config.steps_per_epoch {
            loss_sum += train_step(model, data, &mut state, config, epoch, step)?;
        }
        model.zero_grads();
        let val = validate(model, valid)?;
        let improved = val > state.plateau.best;
        let lr_used = state.lr;
        state.lr = lr_schedule_step(&mut state.plateau, epoch, state.lr, val, config);
        state.epoch = epoch;
        state.history.push(EpochRecord {
            epoch,
            step: state.step,
            train_loss: loss_sum / config.steps_per_epoch as f64,
            val_si_snri_db: val,
            lr: lr_used,
            wall_clock_s: if config.log_wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        if let Some(out) = out {
            write_metrics(&out.metrics(), &state.history)?;
            if improved {
                save_checkpoint(model, &out.best())?;
            }
        }
    }
    Ok(state)
}
