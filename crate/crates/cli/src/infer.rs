//! Clip-level inference: windowing with optional overlap fusion, optional
//! test-time augmentation, then decoding.

use rayon::prelude::*;
use seld_core::decode::{decode, DecodedEvent};
use seld_core::features::FeatureTensor;
use seld_core::infertools::{ctai, inference_overlap, AcsTransform, CtaiConfig, OverlapConfig};
use seld_core::model::Model;
use seld_core::MultiAccdoa;
use seld_tensor::Scalar;

use crate::config::RunConfig;
use crate::error::Result;

/// Windows per forward pass.
pub const INFER_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct InferSettings {
    pub seq_s: f64,
    /// Hop between windows; equal to `seq_s` without overlap.
    pub hop_s: f64,
    pub ctai: Option<CtaiConfig>,
    /// Rotations used by test-time augmentation, including the original.
    pub acs_count: usize,
}

impl InferSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let seq_s = cfg.seq_len_s as f64;
        Self {
            seq_s,
            hop_s: if cfg.io { cfg.io_hop_s } else { seq_s },
            ctai: cfg.ctai.then(|| CtaiConfig {
                mse_threshold: cfg.ctai_threshold,
                kmeans_n_init: cfg.kmeans_n_init,
                seed: cfg.seed,
                ..CtaiConfig::default()
            }),
            acs_count: cfg.acs_count,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClipInference {
    pub output: MultiAccdoa,
    pub events: Vec<DecodedEvent>,
    /// Rotations kept by test-time augmentation (empty without it).
    pub ctai_survivors: Vec<AcsTransform>,
}

fn windowed<S: Scalar>(model: &Model<S>, feat: &FeatureTensor, s: &InferSettings) -> Result<MultiAccdoa> {
    let cfg = OverlapConfig::seconds(s.seq_s, s.hop_s);
    let out = inference_overlap(feat, cfg, |windows| {
        let mut res = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFER_BATCH) {
            let refs: Vec<&FeatureTensor> = chunk.iter().collect();
            res.extend(model.predict(&refs)?);
        }
        Ok(res)
    })?;
    Ok(out.output)
}

/// Multi-ACCDOA output and decoded events of one clip.
pub fn infer_clip<S: Scalar>(model: &Model<S>, feat: &FeatureTensor, s: &InferSettings) -> Result<ClipInference> {
    let original = windowed(model, feat, s)?;
    let (output, survivors) = match &s.ctai {
        None => (original, Vec::new()),
        Some(cc) => {
            let transforms: Vec<AcsTransform> = AcsTransform::all()
                .into_iter()
                .filter(|t| *t != AcsTransform::IDENTITY)
                .take(s.acs_count.saturating_sub(1))
                .collect();
            let rotated = transforms
                .par_iter()
                .map(|t| Ok(t.unrotate_output(&windowed(model, &t.apply_features(feat), s)?)))
                .collect::<Result<Vec<_>>>()?;
            let fused = ctai(&original, &rotated, cc)?;
            (fused.output, fused.survivors.iter().map(|&i| transforms[i]).collect())
        }
    };
    let events = decode(&output);
    Ok(ClipInference { output, events, ctai_survivors: survivors })
}
