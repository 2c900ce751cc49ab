//! Clip loading and windowing.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use seld_core::features::{extract, read_wav, FeatureTensor, MelBank};
use seld_core::objective::{assemble_adpit_targets, read_labels, EventLabel};
use seld_core::Layout;

use crate::augment::{Example, FEATURE_FRAMES_PER_LABEL};
use crate::error::{CliError, Result};

#[derive(Clone, Debug)]
pub struct Clip {
    pub name: String,
    pub feat: FeatureTensor,
    pub labels: Vec<EventLabel>,
}

impl Clip {
    pub fn label_frames(&self) -> usize {
        self.feat.frames() / FEATURE_FRAMES_PER_LABEL
    }
}

/// Audio (`.wav`) or cached feature (`.feat`) files of a directory, sorted.
pub fn list_inputs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|x| x.to_str()), Some("wav") | Some("feat")))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(CliError::Data(format!("no .wav or .feat files in {}", dir.display())));
    }
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Features of one input file: cached tensors load directly, audio is
/// extracted.
pub fn load_features(path: &Path, bank: &MelBank) -> Result<FeatureTensor> {
    if path.extension().and_then(|x| x.to_str()) == Some("feat") {
        Ok(FeatureTensor::load(path)?)
    } else {
        Ok(extract(&read_wav(path)?, bank)?)
    }
}

/// Load every clip of `data_dir` with labels `<labels_dir>/<stem>.csv`.
pub fn load_clips(data_dir: &Path, labels_dir: &Path) -> Result<Vec<Clip>> {
    let bank = MelBank::standard();
    let inputs = list_inputs(data_dir)?;
    inputs
        .par_iter()
        .map(|p| {
            let name = stem(p);
            let feat = load_features(p, &bank)?;
            let labels = read_labels(&labels_dir.join(format!("{name}.csv")))?;
            Ok(Clip { name, feat, labels })
        })
        .collect()
}

/// Cut clips into training windows of `input_frames` feature frames; the
/// last window of a clip is zero-padded.
pub fn windows(clips: &[Clip], input_frames: usize, layout: Layout) -> Result<Vec<Example>> {
    if input_frames % FEATURE_FRAMES_PER_LABEL != 0 {
        return Err(CliError::Config(format!("input_frames {input_frames} is not a multiple of 5")));
    }
    let label_len = input_frames / FEATURE_FRAMES_PER_LABEL;
    let mut out = Vec::new();
    for clip in clips {
        let n = clip.feat.frames().div_ceil(input_frames).max(1);
        for w in 0..n {
            let l0 = w * label_len;
            let labels: Vec<EventLabel> = clip
                .labels
                .iter()
                .filter(|l| l.frame >= l0 && l.frame < l0 + label_len)
                .map(|l| EventLabel { frame: l.frame - l0, ..l.clone() })
                .collect();
            out.push(Example {
                feat: clip.feat.window(w * input_frames, input_frames),
                targets: assemble_adpit_targets(&labels, layout, label_len)?,
            });
        }
    }
    Ok(out)
}
