//! Optimization: Adam, the tri-stage learning-rate schedule, the training
//! loop and VTM finetuning.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seld_core::model::{stack_features, Model};
use seld_core::objective::{adpit_loss, vtm_loss, AdpitTargets, VtmGradient};
use seld_tensor::{Graph, Mode, Scalar, Tensor};

use crate::augment::{self, Augmentation, Example};
use crate::config::{RunConfig, TriStageFractions};
use crate::error::{CliError, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Ramp start as a fraction of the peak rate.
pub const RAMP_START: f64 = 0.01;

/// Linear ramp from `peak / 100`, hold at `peak`, cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriStage {
    pub peak: f64,
    pub total_steps: usize,
    pub fractions: TriStageFractions,
}

impl TriStage {
    fn boundaries(&self) -> (usize, usize) {
        let n = self.total_steps as f64;
        let ramp = (self.fractions.ramp * n).round() as usize;
        let hold = (self.fractions.hold * n).round() as usize;
        (ramp, (ramp + hold).min(self.total_steps))
    }

    pub fn lr(&self, step: usize) -> f64 {
        let (r, h) = self.boundaries();
        let start = self.peak * RAMP_START;
        if step < r {
            start + (self.peak - start) * step as f64 / r as f64
        } else if step < h {
            self.peak
        } else {
            let d = self.total_steps.saturating_sub(h).max(1) as f64;
            let p = ((step - h) as f64 / d).min(1.0);
            0.5 * self.peak * (1.0 + (PI * p).cos())
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Adam {
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step<S: Scalar>(&mut self, model: &mut Model<S>, grads: &IndexMap<String, Tensor<S>>, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1t, b2t) = (1.0 - ADAM_BETA1.powi(self.t as i32), 1.0 - ADAM_BETA2.powi(self.t as i32));
        for (name, p) in model.params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| CliError::Data(format!("no gradient for `{name}`")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let update = lr * (*mi / b1t) / ((*vi / b2t).sqrt() + ADAM_EPS);
                *pi = S::lit(pi.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Adpit,
    Vtm(VtmGradient),
}

fn targets_of(batch: &[Example]) -> Vec<AdpitTargets> {
    batch.iter().map(|e| e.targets.clone()).collect()
}

/// Loss of a batch and, when `grads` is set, the parameter gradients and
/// batch-norm statistics.
#[allow(clippy::type_complexity)]
fn run_batch<S: Scalar>(
    model: &Model<S>,
    batch: &[Example],
    objective: Objective,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    grads: bool,
) -> Result<(f64, IndexMap<String, Tensor<S>>, Vec<(String, Vec<S>, Vec<S>)>)> {
    let feats: Vec<_> = batch.iter().map(|e| &e.feat).collect();
    let x = stack_features::<S>(&feats)?;
    let mut g = Graph::new(mode);
    let bound = model.bind(&mut g)?;
    let xv = g.constant(x)?;
    let out = model.forward(&mut g, &bound, xv, rng, false)?;
    let targets = targets_of(batch);
    let (loss, _) = match objective {
        Objective::Adpit => adpit_loss(&mut g, out.output, &targets)?,
        Objective::Vtm(gr) => vtm_loss(&mut g, out.output, &targets, gr)?,
    };
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(CliError::Numeric(format!("non-finite loss {value}")));
    }
    let mut gmap = IndexMap::new();
    if grads {
        g.backward(loss)?;
        for (name, &v) in bound.iter() {
            gmap.insert(name.clone(), g.grad_tensor(v));
        }
    }
    Ok((value, gmap, out.bn_stats))
}

/// One optimizer step; returns the pre-update loss.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut Adam,
    batch: &[Example],
    objective: Objective,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (loss, grads, stats) = run_batch(model, batch, objective, Mode::Train, rng, true)?;
    opt.step(model, &grads, lr)?;
    for (name, mean, var) in stats {
        model.update_running_stats(&name, &mean, &var)?;
    }
    Ok(loss)
}

/// Loss of `data` without updating anything, in batches of `batch_size`.
/// Train mode uses batch statistics; eval mode the running ones.
pub fn dataset_loss<S: Scalar>(
    model: &Model<S>,
    data: &[Example],
    objective: Objective,
    mode: Mode,
    batch_size: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut acc = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let (l, _, _) = run_batch(model, chunk, objective, mode, &mut rng, false)?;
        acc += l * chunk.len() as f64;
    }
    Ok(acc / data.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub augmentation: String,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|l| l.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,loss,augmentation\n");
        for l in &self.log {
            let _ = writeln!(s, "{},{},{:.6e},{:.8},{}", l.step, l.epoch, l.lr, l.loss, l.augmentation);
        }
        s
    }
}

fn aug_name(a: &Augmentation) -> String {
    match a {
        Augmentation::Identity => "none".into(),
        Augmentation::FrameShift(s) => format!("frameshift:{s}"),
        Augmentation::TimeMask { start, len } => format!("time_mask:{start}+{len}"),
        Augmentation::Acs(t) => format!("acs:{}", t.id()),
        Augmentation::Mixup { partner, lambda } => format!("mixup:{partner}:{lambda:.3}"),
    }
}

/// Settings of one optimization run, derived from a [`RunConfig`].
#[derive(Clone, Debug)]
pub struct LoopSettings {
    pub objective: Objective,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub schedule: Option<TriStage>,
    /// Used when `schedule` is `None`.
    pub constant_lr: f64,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_prefix: String,
}

impl LoopSettings {
    pub fn pretraining(cfg: &RunConfig, n_examples: usize) -> Self {
        let per_epoch = n_examples.div_ceil(cfg.batch_size).max(1);
        let total = (cfg.epochs * per_epoch).min(cfg.max_steps.unwrap_or(usize::MAX));
        Self {
            objective: Objective::Adpit,
            epochs: cfg.epochs,
            max_steps: cfg.max_steps,
            schedule: Some(TriStage { peak: cfg.lr_peak, total_steps: total, fractions: cfg.schedule }),
            constant_lr: cfg.lr_peak,
            checkpoint_dir: Some(cfg.checkpoint_dir.clone()),
            checkpoint_prefix: "epoch".into(),
        }
    }

    pub fn finetune(cfg: &RunConfig) -> Self {
        Self {
            objective: Objective::Vtm(cfg.vtm_gradient),
            epochs: usize::MAX,
            max_steps: Some(cfg.vtm_steps),
            schedule: None,
            constant_lr: cfg.vtm_lr,
            checkpoint_dir: Some(cfg.checkpoint_dir.clone()),
            checkpoint_prefix: "vtm_epoch".into(),
        }
    }
}

/// Run the optimization loop. Every epoch reshuffles the data, every batch
/// draws one augmentation, and a checkpoint is written after every epoch
/// (and when the step budget ends mid-epoch).
pub fn fit<S: Scalar>(model: &mut Model<S>, data: &[Example], cfg: &RunConfig, settings: &LoopSettings) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(CliError::Data("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new();
    let mut report = TrainReport::default();
    let max_steps = settings.max_steps.unwrap_or(usize::MAX);
    let label_frames = data[0].targets.frames;
    let mut step = 0;
    if let Some(dir) = &settings.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut epoch = 0;
    while epoch < settings.epochs && step < max_steps {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break;
            }
            let batch: Vec<Example> = idx.iter().map(|&i| data[i].clone()).collect();
            let aug = augment::choose(&cfg.augment, label_frames, batch.len(), &mut rng);
            let batch = augment::apply(&batch, aug);
            let lr = settings.schedule.map_or(settings.constant_lr, |s| s.lr(step));
            let loss = train_step(model, &mut opt, &batch, settings.objective, lr, &mut rng)?;
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                eprintln!("step {step} epoch {epoch} lr {lr:.3e} loss {loss:.6}");
            }
            report.log.push(StepLog { step, epoch, lr, loss, augmentation: aug_name(&aug) });
            step += 1;
        }
        if let Some(dir) = &settings.checkpoint_dir {
            let path = dir.join(format!("{}_{:03}.ckpt", settings.checkpoint_prefix, epoch + 1));
            model.save(&path)?;
            report.checkpoints.push(path);
        }
        epoch += 1;
    }
    Ok(report)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
