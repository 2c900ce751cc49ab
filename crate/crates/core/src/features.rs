//! First-order Ambisonics feature extraction.
//!
//! Audio arrives as four channels in ACN order (W, Y, Z, X) with SN3D
//! normalization at 24 kHz. The output is a 7-channel block: four log-mel
//! spectrograms followed by the three mel-domain intensity-vector components
//! ordered (x, y, z).
//!
//! Framing: frame `t` covers samples `[480 t, 480 t + 960)`; the number of
//! frames is `floor(N / 480)` and the signal is zero-padded at the end so the
//! last frame is complete. A 5 s clip therefore yields exactly 250 frames.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use seld_tensor::{Scalar, Tensor};

use crate::error::{CoreError, Result};

pub const SAMPLE_RATE: u32 = 24_000;
pub const WIN_LEN: usize = 960;
pub const HOP_LEN: usize = 480;
pub const N_BINS: usize = WIN_LEN / 2 + 1;
pub const N_MELS: usize = 64;
pub const N_FEATURE_CHANNELS: usize = 7;
pub const LOG_EPS: f64 = 1e-10;
pub const IV_EPS: f64 = 1e-10;
pub const FRAME_HOP_S: f64 = 0.02;

/// Channel indices in ACN order.
pub const W: usize = 0;
pub const Y: usize = 1;
pub const Z: usize = 2;
pub const X: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelAudio {
    /// Four channels, ACN order (W, Y, Z, X).
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl MultichannelAudio {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.len() != 4 {
            return Err(CoreError::Data(format!("expected 4 FoA channels, got {}", channels.len())));
        }
        let n = channels[0].len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(CoreError::Data("FoA channels differ in length".into()));
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn silence(num_samples: usize) -> Self {
        Self { channels: vec![vec![0.0; num_samples]; 4], sample_rate: SAMPLE_RATE }
    }

    pub fn num_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn duration_s(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }
}

/// SN3D first-order encoding gains `(W, Y, Z, X)` for a direction in radians.
pub fn foa_gains(azimuth: f64, elevation: f64) -> [f64; 4] {
    let ce = elevation.cos();
    [1.0, azimuth.sin() * ce, elevation.sin(), azimuth.cos() * ce]
}

/// Encode a mono signal at a fixed direction (radians).
pub fn encode_static(mono: &[f64], azimuth: f64, elevation: f64) -> MultichannelAudio {
    let g = foa_gains(azimuth, elevation);
    let channels = g.iter().map(|&gi| mono.iter().map(|&s| s * gi).collect()).collect();
    MultichannelAudio { channels, sample_rate: SAMPLE_RATE }
}

pub fn frame_count(num_samples: usize) -> usize {
    num_samples / HOP_LEN
}

/// Periodic Hann window of length [`WIN_LEN`].
pub fn hann_window() -> Vec<f64> {
    (0..WIN_LEN)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WIN_LEN as f64).cos())
        .collect()
}

/// Complex spectrogram, `[4][frames][N_BINS]` flattened.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn at(&self, ch: usize, t: usize, k: usize) -> Complex64 {
        self.data[(ch * self.frames + t) * N_BINS + k]
    }

    fn row(&self, ch: usize, t: usize) -> &[Complex64] {
        let s = (ch * self.frames + t) * N_BINS;
        &self.data[s..s + N_BINS]
    }
}

pub fn stft(audio: &MultichannelAudio) -> Result<Spectrogram> {
    let n = audio.num_samples();
    if n < WIN_LEN {
        return Err(CoreError::EmptyInput(format!("{n} samples is shorter than one {WIN_LEN}-sample window")));
    }
    if audio.sample_rate != SAMPLE_RATE {
        return Err(CoreError::Data(format!("sample rate {} Hz, expected {SAMPLE_RATE}", audio.sample_rate)));
    }
    let frames = frame_count(n);
    let window = hann_window();
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(WIN_LEN);
    let mut data = Vec::with_capacity(4 * frames * N_BINS);
    let mut buf = vec![Complex64::new(0.0, 0.0); WIN_LEN];
    for ch in &audio.channels {
        for t in 0..frames {
            let start = t * HOP_LEN;
            for (i, b) in buf.iter_mut().enumerate() {
                let s = ch.get(start + i).copied().unwrap_or(0.0);
                *b = Complex64::new(s * window[i], 0.0);
            }
            fft.process(&mut buf);
            data.extend_from_slice(&buf[..N_BINS]);
        }
    }
    Ok(Spectrogram { frames, data })
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, `[N_MELS][N_BINS]`.
#[derive(Clone, Debug)]
pub struct MelBank {
    pub weights: Vec<f64>,
    pub centers_hz: Vec<f64>,
}

impl MelBank {
    pub fn htk(fmin: f64, fmax: f64) -> Self {
        let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / WIN_LEN as f64;
        let mut weights = vec![0.0; N_MELS * N_BINS];
        for m in 0..N_MELS {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..N_BINS {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= c {
                    (f - lo) / (c - lo)
                } else if f > c && f < hi {
                    (hi - f) / (hi - c)
                } else {
                    0.0
                };
                weights[m * N_BINS + k] = w;
            }
        }
        Self { weights, centers_hz: edges[1..=N_MELS].to_vec() }
    }

    pub fn standard() -> Self {
        Self::htk(0.0, SAMPLE_RATE as f64 / 2.0)
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * N_BINS..(m + 1) * N_BINS]
    }

    /// Project a per-bin quantity onto the mel bands.
    pub fn project(&self, bins: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(bins).map(|(w, v)| w * v).sum();
        }
    }
}

/// `ln(|S|^2 mel + eps)` per channel, `[4, T, 64]`.
pub fn logmel(spec: &Spectrogram, bank: &MelBank) -> Tensor<f64> {
    let t = spec.frames;
    let mut out = vec![0.0; 4 * t * N_MELS];
    let mut power = vec![0.0; N_BINS];
    for ch in 0..4 {
        for ti in 0..t {
            for (p, s) in power.iter_mut().zip(spec.row(ch, ti)) {
                *p = s.norm_sqr();
            }
            let o = &mut out[(ch * t + ti) * N_MELS..(ch * t + ti + 1) * N_MELS];
            bank.project(&power, o);
            o.iter_mut().for_each(|v| *v = (*v + LOG_EPS).ln());
        }
    }
    Tensor::new(vec![4, t, N_MELS], out).expect("consistent shape")
}

/// Mel-domain intensity vectors normalized by mel-projected total energy,
/// `[3, T, 64]` with components ordered (x, y, z).
pub fn intensity_vectors(spec: &Spectrogram, bank: &MelBank) -> Tensor<f64> {
    let t = spec.frames;
    let mut out = vec![0.0; 3 * t * N_MELS];
    let mut iv = [vec![0.0; N_BINS], vec![0.0; N_BINS], vec![0.0; N_BINS]];
    let mut energy = vec![0.0; N_BINS];
    let mut iv_mel = [vec![0.0; N_MELS], vec![0.0; N_MELS], vec![0.0; N_MELS]];
    let mut e_mel = vec![0.0; N_MELS];
    // output component -> source channel
    let src = [X, Y, Z];
    for ti in 0..t {
        let w = spec.row(W, ti);
        for (d, &ch) in src.iter().enumerate() {
            for (k, s) in spec.row(ch, ti).iter().enumerate() {
                iv[d][k] = (w[k].conj() * s).re;
            }
        }
        for k in 0..N_BINS {
            let (sw, sy, sz, sx) =
                (w[k].norm_sqr(), spec.at(Y, ti, k).norm_sqr(), spec.at(Z, ti, k).norm_sqr(), spec.at(X, ti, k).norm_sqr());
            // grouped so that swapping or negating X and Y leaves it bit-identical
            energy[k] = (sw + sz) + (sx + sy);
        }
        bank.project(&energy, &mut e_mel);
        for d in 0..3 {
            bank.project(&iv[d], &mut iv_mel[d]);
            for m in 0..N_MELS {
                out[(d * t + ti) * N_MELS + m] = iv_mel[d][m] / (e_mel[m] + IV_EPS);
            }
        }
    }
    Tensor::new(vec![3, t, N_MELS], out).expect("consistent shape")
}

/// Seven-channel network input, `[7, T, 64]`, stored at 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub data: Tensor<f32>,
}

impl FeatureTensor {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] != N_FEATURE_CHANNELS || s[2] != N_MELS {
            return Err(CoreError::Data(format!("feature shape {s:?}, expected [7, T, 64]")));
        }
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        self.data.cast()
    }

    /// Frames `[start, start + len)`, zero-filled past the end.
    pub fn window(&self, start: usize, len: usize) -> FeatureTensor {
        let t = self.frames();
        let d = self.data.data();
        let mut out = vec![0f32; N_FEATURE_CHANNELS * len * N_MELS];
        for c in 0..N_FEATURE_CHANNELS {
            for i in 0..len.min(t.saturating_sub(start)) {
                let src = (c * t + start + i) * N_MELS;
                let dst = (c * len + i) * N_MELS;
                out[dst..dst + N_MELS].copy_from_slice(&d[src..src + N_MELS]);
            }
        }
        FeatureTensor { data: Tensor::new(vec![N_FEATURE_CHANNELS, len, N_MELS], out).expect("consistent") }
    }

    /// Pad with zeros or truncate to exactly `frames` frames.
    pub fn fit_frames(&self, frames: usize) -> FeatureTensor {
        self.window(0, frames)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bin = bin_path(path);
        let mut payload = Vec::with_capacity(self.data.numel() * 4);
        for &v in self.data.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let s = self.data.shape();
        let manifest = format!(
            "format_version=1\ndtype=f32\nshape={},{},{}\npayload={}\nframe_hop_s={FRAME_HOP_S}\nmel_bands={N_MELS}\n",
            s[0],
            s[1],
            s[2],
            bin.file_name().and_then(|n| n.to_str()).unwrap_or_default()
        );
        fs::write(path, manifest).map_err(|e| CoreError::io(path, e))?;
        fs::write(&bin, payload).map_err(|e| CoreError::io(&bin, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut shape = None;
        for line in text.lines() {
            match line.split_once('=') {
                Some(("dtype", v)) if v != "f32" => {
                    return Err(CoreError::Data(format!("feature cache dtype {v}, expected f32")))
                }
                Some(("shape", v)) => {
                    let dims = v
                        .split(',')
                        .map(|d| d.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| CoreError::Data(format!("bad shape `{v}`: {e}")))?;
                    shape = Some(dims);
                }
                _ => {}
            }
        }
        let shape = shape.ok_or_else(|| CoreError::Data("feature manifest lacks shape".into()))?;
        let bin = bin_path(path);
        let bytes = fs::read(&bin).map_err(|e| CoreError::io(&bin, e))?;
        let n: usize = shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(CoreError::Data(format!("payload has {} bytes, expected {}", bytes.len(), n * 4)));
        }
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Self::new(Tensor::new(shape, data)?)
    }
}

fn bin_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".bin");
    p.into()
}

/// Stack `[logmel(4), iv(3)]` along the channel axis.
pub fn build_input(logmel: &Tensor<f64>, iv: &Tensor<f64>) -> Result<FeatureTensor> {
    let (a, b) = (logmel.shape(), iv.shape());
    if a.len() != 3 || b.len() != 3 || a[0] != 4 || b[0] != 3 || a[1..] != b[1..] {
        return Err(CoreError::Data(format!("cannot stack log-mel {a:?} with intensity vectors {b:?}")));
    }
    let data: Vec<f32> = logmel.data().iter().chain(iv.data()).map(|&v| v as f32).collect();
    FeatureTensor::new(Tensor::new(vec![N_FEATURE_CHANNELS, a[1], a[2]], data)?)
}

/// Full pipeline: STFT, log-mel, intensity vectors, stacking.
pub fn extract(audio: &MultichannelAudio, bank: &MelBank) -> Result<FeatureTensor> {
    let spec = stft(audio)?;
    build_input(&logmel(&spec, bank), &intensity_vectors(&spec, bank))
}

pub fn read_wav(path: &Path) -> Result<MultichannelAudio> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 4 {
        return Err(CoreError::Data(format!("{}: {} channels, expected 4", path.display(), spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(CoreError::Data(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE} (no resampling)",
            path.display(),
            spec.sample_rate
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()?
        }
        (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader.samples::<i32>().map(|s| s.map(|v| v as f64 * scale)).collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => return Err(CoreError::Data(format!("unsupported WAV encoding {fmt:?} {bits}-bit"))),
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / 4); 4];
    for frame in interleaved.chunks_exact(4) {
        for (c, &s) in channels.iter_mut().zip(frame) {
            c.push(s);
        }
    }
    MultichannelAudio::new(channels, spec.sample_rate)
}

/// Write 32-bit float PCM.
pub fn write_wav(path: &Path, audio: &MultichannelAudio) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 4,
        sample_rate: audio.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for i in 0..audio.num_samples() {
        for c in &audio.channels {
            w.write_sample(c[i] as f32)?;
        }
    }
    w.finalize()?;
    Ok(())
}

/// Activity-weighted mean IV direction over all bins of a feature block,
/// weighting each mel bin by its omni log-mel power.
pub fn mean_iv_direction(f: &FeatureTensor) -> [f64; 3] {
    let t = f.frames();
    let d = f.data.data();
    let mut acc = [0.0; 3];
    for ti in 0..t {
        for m in 0..N_MELS {
            let w = (d[ti * N_MELS + m] as f64).exp();
            for (c, a) in acc.iter_mut().enumerate() {
                *a += w * d[((4 + c) * t + ti) * N_MELS + m] as f64;
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()).collect()
    }

    #[test]
    fn five_seconds_gives_250_frames() {
        let spec = stft(&MultichannelAudio::silence(5 * SAMPLE_RATE as usize)).unwrap();
        assert_eq!(spec.frames, 250);
        assert!(spec.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn short_audio_is_rejected() {
        assert!(matches!(stft(&MultichannelAudio::silence(959)), Err(CoreError::EmptyInput(_))));
        assert_eq!(stft(&MultichannelAudio::silence(960)).unwrap().frames, 2);
    }

    #[test]
    fn filterbank_rows_positive_and_centers_increasing() {
        let bank = MelBank::standard();
        for m in 0..N_MELS {
            assert!(bank.row(m).iter().sum::<f64>() > 0.0, "band {m} empty");
        }
        assert!(bank.centers_hz.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn silence_features_are_log_eps_and_zero_iv() {
        let bank = MelBank::standard();
        let spec = stft(&MultichannelAudio::silence(4800)).unwrap();
        let lm = logmel(&spec, &bank);
        assert!(lm.data().iter().all(|&v| v == LOG_EPS.ln()));
        assert!(intensity_vectors(&spec, &bank).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stacking_order() {
        let lm = Tensor::from_fn(&[4, 5, 64], |i| i as f64);
        let iv = Tensor::from_fn(&[3, 5, 64], |i| -(i as f64));
        let f = build_input(&lm, &iv).unwrap();
        assert_eq!(f.data.shape(), &[7, 5, 64]);
        assert_eq!(f.data.at(&[4, 2, 3]) as f64, iv.at(&[0, 2, 3]));
        assert!(build_input(&lm, &Tensor::zeros(&[3, 4, 64])).is_err());
    }

    #[test]
    fn encoding_gains_on_axes() {
        let g = foa_gains(0.0, 0.0);
        assert_eq!(g, [1.0, 0.0, 0.0, 1.0]);
        let g = foa_gains(std::f64::consts::FRAC_PI_2, 0.0);
        assert!((g[1] - 1.0).abs() < 1e-15 && g[3].abs() < 1e-15);
    }

    #[test]
    fn iv_magnitude_bounded() {
        let mono = sine(1500.0, 9600);
        let a = encode_static(&mono, 0.7, 0.3);
        let bank = MelBank::standard();
        let iv = intensity_vectors(&stft(&a).unwrap(), &bank);
        let t = iv.shape()[1];
        for ti in 0..t {
            for m in 0..N_MELS {
                let n: f64 = (0..3).map(|d| iv.at(&[d, ti, m]).powi(2)).sum::<f64>().sqrt();
                assert!(n <= 1.0 + 1e-6);
            }
        }
    }
}
