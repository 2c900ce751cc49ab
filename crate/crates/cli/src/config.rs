//! Run configuration: a flat `key=value` text file.
//!
//! Model keys (`preset`, `ule_scheme`, `channels`, `n_cst`, `pooling`,
//! `ule_kernels`, `attention_order`, `heads`, `n_classes`, `n_tracks`,
//! `dropout`, `fc_hidden`, `input_frames`) are passed to the model
//! configuration. Run keys:
//!
//! | key | default |
//! |-----|---------|
//! | `epochs` | 1 |
//! | `max_steps` | unlimited |
//! | `batch_size` | 32 |
//! | `lr_peak` | 1e-3 for C ≤ 64, else 1e-4 |
//! | `ramp_frac`, `hold_frac`, `decay_frac` | 0.1, 0.4, 0.5 |
//! | `seed` | 0 |
//! | `dtype` | f32 |
//! | `aug_frameshift`, `aug_time_mask`, `aug_acs`, `aug_mixup` | true |
//! | `mixup_alpha` | 0.5 |
//! | `data_dir`, `labels_dir`, `checkpoint_dir`, `report_dir` | `data`, `labels`, `checkpoints`, `reports` |
//! | `seq_len_s` | 5 (one of 5, 10, 20) |
//! | `io`, `io_hop_s` | false, 1 |
//! | `ctai`, `ctai_threshold`, `kmeans_n_init` | false, 1e-3, 4 |
//! | `acs_count` | 16 (rotations including the original, 1 to 16) |
//! | `vtm_steps`, `vtm_lr`, `vtm_gradient` | 50, 1e-4, hard |
//!
//! Lines starting with `#` and blank lines are ignored; unknown keys are
//! rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use seld_core::model::ModelConfig;
use seld_core::objective::VtmGradient;
use seld_tensor::DType;

use crate::error::{CliError, Result};

const MODEL_KEYS: [&str; 13] = [
    "preset",
    "ule_scheme",
    "channels",
    "n_cst",
    "pooling",
    "ule_kernels",
    "attention_order",
    "heads",
    "n_classes",
    "n_tracks",
    "dropout",
    "fc_hidden",
    "input_frames",
];

const RUN_KEYS: [&str; 30] = [
    "epochs",
    "max_steps",
    "batch_size",
    "lr_peak",
    "ramp_frac",
    "hold_frac",
    "decay_frac",
    "seed",
    "dtype",
    "aug_frameshift",
    "aug_time_mask",
    "aug_acs",
    "aug_mixup",
    "mixup_alpha",
    "data_dir",
    "labels_dir",
    "checkpoint_dir",
    "report_dir",
    "seq_len_s",
    "io",
    "io_hop_s",
    "ctai",
    "ctai_threshold",
    "kmeans_n_init",
    "acs_count",
    "vtm_steps",
    "vtm_lr",
    "vtm_gradient",
    "time_mask_max_s",
    "log_every",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentations {
    pub frameshift: bool,
    pub time_mask: bool,
    pub acs: bool,
    pub mixup: bool,
    pub mixup_alpha: f64,
    /// Longest masked span in seconds.
    pub time_mask_max_s: f64,
}

impl Augmentations {
    pub fn none() -> Self {
        Self { frameshift: false, time_mask: false, acs: false, mixup: false, ..Self::default() }
    }
}

impl Default for Augmentations {
    fn default() -> Self {
        Self { frameshift: true, time_mask: true, acs: true, mixup: true, mixup_alpha: 0.5, time_mask_max_s: 1.0 }
    }
}

/// Fractions of the total step budget spent ramping, holding and decaying.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriStageFractions {
    pub ramp: f64,
    pub hold: f64,
    pub decay: f64,
}

impl Default for TriStageFractions {
    fn default() -> Self {
        Self { ramp: 0.1, hold: 0.4, decay: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub schedule: TriStageFractions,
    pub seed: u64,
    pub dtype: DType,
    pub augment: Augmentations,
    pub data_dir: PathBuf,
    pub labels_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    pub seq_len_s: u32,
    pub io: bool,
    pub io_hop_s: f64,
    pub ctai: bool,
    pub ctai_threshold: f64,
    pub kmeans_n_init: usize,
    pub acs_count: usize,
    pub vtm_steps: usize,
    pub vtm_lr: f64,
    pub vtm_gradient: VtmGradient,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_model(ModelConfig::default())
    }
}

fn parse<T: std::str::FromStr>(kv: &IndexMap<String, String>, key: &str, default: T) -> Result<T> {
    match kv.get(key) {
        None => Ok(default),
        Some(v) => v.trim().parse().map_err(|_| CliError::Config(format!("{key}: bad value `{v}`"))),
    }
}

fn parse_bool(kv: &IndexMap<String, String>, key: &str, default: bool) -> Result<bool> {
    match kv.get(key).map(|v| v.trim().to_ascii_lowercase()) {
        None => Ok(default),
        Some(v) if ["1", "true", "yes", "on"].contains(&v.as_str()) => Ok(true),
        Some(v) if ["0", "false", "no", "off"].contains(&v.as_str()) => Ok(false),
        Some(v) => Err(CliError::Config(format!("{key}: bad boolean `{v}`"))),
    }
}

impl RunConfig {
    /// Defaults for every run setting around a given model.
    pub fn from_model(model: ModelConfig) -> Self {
        let lr_peak = if model.channels <= 64 { 1e-3 } else { 1e-4 };
        Self {
            model,
            epochs: 1,
            max_steps: None,
            batch_size: 32,
            lr_peak,
            schedule: TriStageFractions::default(),
            seed: 0,
            dtype: DType::F32,
            augment: Augmentations::default(),
            data_dir: "data".into(),
            labels_dir: "labels".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
            seq_len_s: 5,
            io: false,
            io_hop_s: 1.0,
            ctai: false,
            ctai_threshold: 1e-3,
            kmeans_n_init: 4,
            acs_count: 16,
            vtm_steps: 50,
            vtm_lr: 1e-4,
            vtm_gradient: VtmGradient::Hard,
            log_every: 0,
        }
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut kv = IndexMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got `{line}`", no + 1)))?;
            let k = k.trim().to_string();
            if !MODEL_KEYS.contains(&k.as_str()) && !RUN_KEYS.contains(&k.as_str()) {
                return Err(CliError::Config(format!("line {}: unknown key `{k}`", no + 1)));
            }
            if kv.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key `{k}`", no + 1)));
            }
        }
        Self::from_kv(&kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn from_kv(kv: &IndexMap<String, String>) -> Result<Self> {
        let model = ModelConfig::from_kv(kv)?;
        let d = Self::from_model(model);
        let dtype = match kv.get("dtype") {
            None => d.dtype,
            Some(v) => DType::parse(v.trim()).ok_or_else(|| CliError::Config(format!("dtype: bad value `{v}`")))?,
        };
        let vtm_gradient = match kv.get("vtm_gradient").map(|v| v.trim().to_ascii_lowercase()) {
            None => d.vtm_gradient,
            Some(v) if v == "hard" => VtmGradient::Hard,
            Some(v) if v == "straight_through" || v == "ste" => VtmGradient::StraightThrough,
            Some(v) => return Err(CliError::Config(format!("vtm_gradient: bad value `{v}`"))),
        };
        let max_steps = match kv.get("max_steps") {
            None => None,
            Some(_) => Some(parse(kv, "max_steps", 0usize)?),
        };
        let cfg = Self {
            epochs: parse(kv, "epochs", d.epochs)?,
            max_steps,
            batch_size: parse(kv, "batch_size", d.batch_size)?,
            lr_peak: parse(kv, "lr_peak", d.lr_peak)?,
            schedule: TriStageFractions {
                ramp: parse(kv, "ramp_frac", d.schedule.ramp)?,
                hold: parse(kv, "hold_frac", d.schedule.hold)?,
                decay: parse(kv, "decay_frac", d.schedule.decay)?,
            },
            seed: parse(kv, "seed", d.seed)?,
            dtype,
            augment: Augmentations {
                frameshift: parse_bool(kv, "aug_frameshift", d.augment.frameshift)?,
                time_mask: parse_bool(kv, "aug_time_mask", d.augment.time_mask)?,
                acs: parse_bool(kv, "aug_acs", d.augment.acs)?,
                mixup: parse_bool(kv, "aug_mixup", d.augment.mixup)?,
                mixup_alpha: parse(kv, "mixup_alpha", d.augment.mixup_alpha)?,
                time_mask_max_s: parse(kv, "time_mask_max_s", d.augment.time_mask_max_s)?,
            },
            data_dir: parse(kv, "data_dir", d.data_dir)?,
            labels_dir: parse(kv, "labels_dir", d.labels_dir)?,
            checkpoint_dir: parse(kv, "checkpoint_dir", d.checkpoint_dir)?,
            report_dir: parse(kv, "report_dir", d.report_dir)?,
            seq_len_s: parse(kv, "seq_len_s", d.seq_len_s)?,
            io: parse_bool(kv, "io", d.io)?,
            io_hop_s: parse(kv, "io_hop_s", d.io_hop_s)?,
            ctai: parse_bool(kv, "ctai", d.ctai)?,
            ctai_threshold: parse(kv, "ctai_threshold", d.ctai_threshold)?,
            kmeans_n_init: parse(kv, "kmeans_n_init", d.kmeans_n_init)?,
            acs_count: parse(kv, "acs_count", d.acs_count)?,
            vtm_steps: parse(kv, "vtm_steps", d.vtm_steps)?,
            vtm_lr: parse(kv, "vtm_lr", d.vtm_lr)?,
            vtm_gradient,
            log_every: parse(kv, "log_every", d.log_every)?,
            model: d.model,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(CliError::Config("batch_size must be positive".into()));
        }
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) || !(self.vtm_lr >= 0.0 && self.vtm_lr.is_finite()) {
            return Err(CliError::Config("learning rates must be finite and non-negative".into()));
        }
        let s = self.schedule;
        if [s.ramp, s.hold, s.decay].iter().any(|f| *f < 0.0) || ((s.ramp + s.hold + s.decay) - 1.0).abs() > 1e-9 {
            return Err(CliError::Config("tri-stage fractions must be non-negative and sum to 1".into()));
        }
        if ![5, 10, 20].contains(&self.seq_len_s) {
            return Err(CliError::Config(format!("seq_len_s must be 5, 10 or 20, got {}", self.seq_len_s)));
        }
        self.model.validate_frames(self.seq_frames())?;
        if !(self.io_hop_s > 0.0) || (self.io_hop_s * 10.0).fract().abs() > 1e-9 {
            return Err(CliError::Config("io_hop_s must be a positive multiple of 0.1 s".into()));
        }
        if !(self.augment.mixup_alpha > 0.0) {
            return Err(CliError::Config("mixup_alpha must be positive".into()));
        }
        if !(1..=16).contains(&self.acs_count) || self.kmeans_n_init == 0 {
            return Err(CliError::Config("acs_count must be in 1..=16 and kmeans_n_init positive".into()));
        }
        if !(self.ctai_threshold > 0.0) {
            return Err(CliError::Config("ctai_threshold must be positive".into()));
        }
        Ok(())
    }

    /// Input frames of one inference window.
    pub fn seq_frames(&self) -> usize {
        self.seq_len_s as usize * 50
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let a = self.augment;
        let mut kv = self.model.to_kv();
        let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
        push("epochs", self.epochs.to_string());
        if let Some(m) = self.max_steps {
            push("max_steps", m.to_string());
        }
        push("batch_size", self.batch_size.to_string());
        push("lr_peak", self.lr_peak.to_string());
        push("ramp_frac", self.schedule.ramp.to_string());
        push("hold_frac", self.schedule.hold.to_string());
        push("decay_frac", self.schedule.decay.to_string());
        push("seed", self.seed.to_string());
        push("dtype", self.dtype.name().to_string());
        push("aug_frameshift", a.frameshift.to_string());
        push("aug_time_mask", a.time_mask.to_string());
        push("aug_acs", a.acs.to_string());
        push("aug_mixup", a.mixup.to_string());
        push("mixup_alpha", a.mixup_alpha.to_string());
        push("time_mask_max_s", a.time_mask_max_s.to_string());
        push("data_dir", self.data_dir.display().to_string());
        push("labels_dir", self.labels_dir.display().to_string());
        push("checkpoint_dir", self.checkpoint_dir.display().to_string());
        push("report_dir", self.report_dir.display().to_string());
        push("seq_len_s", self.seq_len_s.to_string());
        push("io", self.io.to_string());
        push("io_hop_s", self.io_hop_s.to_string());
        push("ctai", self.ctai.to_string());
        push("ctai_threshold", self.ctai_threshold.to_string());
        push("kmeans_n_init", self.kmeans_n_init.to_string());
        push("acs_count", self.acs_count.to_string());
        push("vtm_steps", self.vtm_steps.to_string());
        push("vtm_lr", self.vtm_lr.to_string());
        let g = match self.vtm_gradient {
            VtmGradient::Hard => "hard",
            VtmGradient::StraightThrough => "straight_through",
        };
        push("vtm_gradient", g.to_string());
        push("log_every", self.log_every.to_string());
        kv
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_kv() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
