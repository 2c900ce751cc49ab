//! Batch augmentations. Feature frames are 20 ms and label frames 100 ms;
//! every time operation works in whole label frames so features and labels
//! stay aligned.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use seld_core::features::{FeatureTensor, N_FEATURE_CHANNELS, N_MELS};
use seld_core::infertools::AcsTransform;
use seld_core::objective::AdpitTargets;
use seld_tensor::Tensor;

use crate::config::Augmentations;

pub const FEATURE_FRAMES_PER_LABEL: usize = 5;

/// One training window: features `[7, T, 64]` with `T / 5` label frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub feat: FeatureTensor,
    pub targets: AdpitTargets,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augmentation {
    Identity,
    /// Circular shift by this many label frames.
    FrameShift(isize),
    /// Mask `len` label frames starting at `start`.
    TimeMask { start: usize, len: usize },
    Acs(AcsTransform),
    /// Blend with the batch example at `partner` using ratio `lambda`.
    Mixup { partner: usize, lambda: f64 },
}

pub fn frameshift(ex: &Example, shift: isize) -> Example {
    let t = ex.feat.frames();
    let fs = shift * FEATURE_FRAMES_PER_LABEL as isize;
    let src = ex.feat.data.data();
    let mut out = vec![0f32; src.len()];
    for c in 0..N_FEATURE_CHANNELS {
        for ti in 0..t {
            let dst = (ti as isize + fs).rem_euclid(t as isize) as usize;
            out[(c * t + dst) * N_MELS..(c * t + dst + 1) * N_MELS]
                .copy_from_slice(&src[(c * t + ti) * N_MELS..(c * t + ti + 1) * N_MELS]);
        }
    }
    Example {
        feat: FeatureTensor { data: Tensor::new(ex.feat.data.shape().to_vec(), out).expect("same shape") },
        targets: ex.targets.roll(shift),
    }
}

pub fn time_mask(ex: &Example, start: usize, len: usize) -> Example {
    let t = ex.feat.frames();
    let mut feat = ex.feat.clone();
    let (f0, f1) = ((start * FEATURE_FRAMES_PER_LABEL).min(t), ((start + len) * FEATURE_FRAMES_PER_LABEL).min(t));
    let d = feat.data.data_mut();
    for c in 0..N_FEATURE_CHANNELS {
        d[(c * t + f0) * N_MELS..(c * t + f1) * N_MELS].iter_mut().for_each(|v| *v = 0.0);
    }
    let mut targets = ex.targets.clone();
    for f in start..(start + len).min(targets.frames) {
        targets.clear(f);
    }
    Example { feat, targets }
}

pub fn acs(ex: &Example, t: AcsTransform) -> Example {
    Example { feat: t.apply_features(&ex.feat), targets: t.apply_targets(&ex.targets) }
}

/// `lambda * a + (1 - lambda) * b`; labels of the clip with the larger ratio.
pub fn mixup(a: &Example, b: &Example, lambda: f64) -> Example {
    let l = lambda as f32;
    let data: Vec<f32> = a.feat.data.data().iter().zip(b.feat.data.data()).map(|(x, y)| l * x + (1.0 - l) * y).collect();
    let targets = if lambda >= 0.5 { a.targets.clone() } else { b.targets.clone() };
    Example { feat: FeatureTensor { data: Tensor::new(a.feat.data.shape().to_vec(), data).expect("same shape") }, targets }
}

/// Draw one augmentation for a whole batch among the enabled kinds.
pub fn choose(cfg: &Augmentations, label_frames: usize, batch: usize, rng: &mut impl Rng) -> Augmentation {
    let mut kinds = Vec::new();
    if cfg.frameshift {
        kinds.push(0);
    }
    if cfg.time_mask {
        kinds.push(1);
    }
    if cfg.acs {
        kinds.push(2);
    }
    if cfg.mixup && batch > 1 {
        kinds.push(3);
    }
    if kinds.is_empty() || label_frames == 0 {
        return Augmentation::Identity;
    }
    match kinds[rng.gen_range(0..kinds.len())] {
        0 => Augmentation::FrameShift(rng.gen_range(0..label_frames) as isize),
        1 => {
            let max = ((cfg.time_mask_max_s * 10.0).round() as usize).clamp(1, label_frames);
            let len = rng.gen_range(1..=max);
            Augmentation::TimeMask { start: rng.gen_range(0..=label_frames - len), len }
        }
        2 => Augmentation::Acs(AcsTransform::from_id(rng.gen_range(0..16u8)).expect("id in range")),
        _ => {
            let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).expect("positive alpha");
            Augmentation::Mixup { partner: rng.gen_range(1..batch), lambda: beta.sample(rng) }
        }
    }
}

/// Apply `aug` to every example of a batch. Mix-up pairs example `i` with
/// `(i + partner) mod B`.
pub fn apply(batch: &[Example], aug: Augmentation) -> Vec<Example> {
    let n = batch.len();
    batch
        .iter()
        .enumerate()
        .map(|(i, ex)| match aug {
            Augmentation::Identity => ex.clone(),
            Augmentation::FrameShift(s) => frameshift(ex, s),
            Augmentation::TimeMask { start, len } => time_mask(ex, start, len),
            Augmentation::Acs(t) => acs(ex, t),
            Augmentation::Mixup { partner, lambda } => mixup(ex, &batch[(i + partner) % n], lambda),
        })
        .collect()
}
