use crate::accdoa::MultiAccdoa;
use crate::error::{CoreError, Result};
use crate::features::FeatureTensor;

/// Sliding-window geometry in input (feature) frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OverlapConfig {
    pub seq_frames: usize,
    pub hop_frames: usize,
    /// Input frames per output frame.
    pub frames_per_output: usize,
}

impl OverlapConfig {
    /// Windows of `seq_s` seconds every `hop_s` seconds at 50 input and
    /// 10 output frames per second.
    pub fn seconds(seq_s: f64, hop_s: f64) -> Self {
        Self { seq_frames: (seq_s * 50.0).round() as usize, hop_frames: (hop_s * 50.0).round() as usize, frames_per_output: 5 }
    }

    fn validate(&self) -> Result<()> {
        let r = self.frames_per_output;
        if r == 0 || self.seq_frames == 0 || self.hop_frames == 0 || self.seq_frames % r != 0 || self.hop_frames % r != 0 {
            return Err(CoreError::Config(format!("invalid overlap geometry {self:?}")));
        }
        Ok(())
    }
}

/// Output-frame start of each window: regular hops, plus a final window
/// aligned to the clip end. A clip shorter than one window has one window.
pub fn window_starts(total_out: usize, seq_out: usize, hop_out: usize) -> Vec<usize> {
    if total_out <= seq_out {
        return vec![0];
    }
    let last = total_out - seq_out;
    let mut starts: Vec<usize> = (0..=last).step_by(hop_out).collect();
    if *starts.last().expect("non-empty") != last {
        starts.push(last);
    }
    starts
}

/// Componentwise median; even counts average the two middle values.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fused output plus, per output frame, the number of contributing windows.
#[derive(Clone, Debug)]
pub struct OverlapOutput {
    pub output: MultiAccdoa,
    pub counts: Vec<usize>,
}

/// Run `infer` on overlapping windows of `feat` and fuse the estimates of
/// every output frame by the componentwise median.
pub fn inference_overlap<F>(feat: &FeatureTensor, cfg: OverlapConfig, infer: F) -> Result<OverlapOutput>
where
    F: Fn(&[FeatureTensor]) -> Result<Vec<MultiAccdoa>>,
{
    cfg.validate()?;
    let r = cfg.frames_per_output;
    let total_out = feat.frames() / r;
    if total_out == 0 {
        return Err(CoreError::EmptyInput("clip shorter than one output frame".into()));
    }
    let (seq_out, hop_out) = (cfg.seq_frames / r, cfg.hop_frames / r);
    let starts = window_starts(total_out, seq_out, hop_out);
    let windows: Vec<FeatureTensor> = starts.iter().map(|&s| feat.window(s * r, cfg.seq_frames)).collect();
    let outs = infer(&windows)?;
    if outs.len() != windows.len() || outs.iter().any(|o| o.frames != seq_out) {
        return Err(CoreError::Data("window inference returned unexpected frame counts".into()));
    }
    let layout = outs[0].layout;
    let w = layout.width();
    let mut fused = MultiAccdoa::zeros(layout, total_out);
    let mut counts = vec![0usize; total_out];
    let mut buf = Vec::new();
    for t in 0..total_out {
        let covering: Vec<(usize, usize)> = starts
            .iter()
            .enumerate()
            .filter(|(_, &s)| t >= s && t < s + seq_out)
            .map(|(i, &s)| (i, t - s))
            .collect();
        counts[t] = covering.len();
        for j in 0..w {
            buf.clear();
            buf.extend(covering.iter().map(|&(i, lt)| outs[i].frame(lt)[j]));
            fused.data[t * w + j] = median(&mut buf);
        }
    }
    Ok(OverlapOutput { output: fused, counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_cover_clip_end() {
        assert_eq!(window_starts(200, 50, 10).len(), 16);
        assert_eq!(window_starts(55, 50, 10), vec![0, 5]);
        assert_eq!(window_starts(30, 50, 10), vec![0]);
        assert_eq!(window_starts(100, 50, 50), vec![0, 50]);
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&mut [2.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}
