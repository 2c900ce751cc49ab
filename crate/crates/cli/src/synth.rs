//! Synthetic FoA scenes: mono tone, noise or chirp bursts encoded at static
//! or azimuth-ramping directions over a low diffuse noise floor, with
//! 100 ms reference labels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seld_core::accdoa::doa_from_angles;
use seld_core::features::{foa_gains, MultichannelAudio, SAMPLE_RATE};
use seld_core::objective::EventLabel;

use crate::error::{CliError, Result};

pub const LABEL_HOP_S: f64 = 0.1;
const FADE_S: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SignalKind {
    Tone { freq_hz: f64 },
    Noise,
    Chirp { f0_hz: f64, f1_hz: f64 },
}

impl SignalKind {
    /// Default signal of a class in the toy vocabulary.
    pub fn for_class(class: usize) -> Self {
        let octave = (class / 4) as f64;
        match class % 4 {
            0 => SignalKind::Tone { freq_hz: 1000.0 * (1.0 + 0.5 * octave) },
            1 => SignalKind::Noise,
            2 => SignalKind::Chirp { f0_hz: 500.0 * (1.0 + octave), f1_hz: 4000.0 },
            _ => SignalKind::Tone { freq_hz: 250.0 * (1.0 + octave) },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trajectory {
    Static { azimuth_deg: f64, elevation_deg: f64 },
    /// Azimuth moves linearly from `from_deg` to `to_deg` over the event.
    AzimuthRamp { from_deg: f64, to_deg: f64, elevation_deg: f64 },
}

impl Trajectory {
    /// Direction at fraction `u` in [0, 1] of the event, degrees.
    pub fn angles_at(&self, u: f64) -> (f64, f64) {
        match *self {
            Trajectory::Static { azimuth_deg, elevation_deg } => (azimuth_deg, elevation_deg),
            Trajectory::AzimuthRamp { from_deg, to_deg, elevation_deg } => (from_deg + (to_deg - from_deg) * u, elevation_deg),
        }
    }

    fn validate(&self) -> Result<()> {
        let (az0, el) = self.angles_at(0.0);
        let (az1, _) = self.angles_at(1.0);
        if ![az0, az1, el].iter().all(|v| v.is_finite()) || !(-90.0..=90.0).contains(&el) {
            return Err(CliError::Data(format!("invalid trajectory {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneEvent {
    pub class: usize,
    pub onset_s: f64,
    pub offset_s: f64,
    pub trajectory: Trajectory,
    pub kind: SignalKind,
    /// Level relative to the diffuse noise floor.
    pub snr_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub duration_s: f64,
    pub events: Vec<SceneEvent>,
    /// RMS of the diffuse noise floor.
    pub noise_rms: f64,
}

impl SyntheticScene {
    pub fn num_samples(&self) -> usize {
        (self.duration_s * SAMPLE_RATE as f64).round() as usize
    }

    pub fn label_frames(&self) -> usize {
        (self.duration_s / LABEL_HOP_S).round() as usize
    }

    /// Events overlapping frame `f`, judged at the frame center.
    fn active_at(&self, f: usize) -> impl Iterator<Item = &SceneEvent> {
        let t = (f as f64 + 0.5) * LABEL_HOP_S;
        self.events.iter().filter(move |e| e.onset_s <= t && t < e.offset_s)
    }

    pub fn validate(&self, n_classes: usize, n_tracks: usize) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(CliError::Data("scene duration must be positive".into()));
        }
        for e in &self.events {
            e.trajectory.validate()?;
            if e.class >= n_classes {
                return Err(CliError::Data(format!("event class {} out of range", e.class)));
            }
            if !(0.0 <= e.onset_s && e.onset_s < e.offset_s && e.offset_s <= self.duration_s) {
                return Err(CliError::Data(format!("event span {}..{} s outside the scene", e.onset_s, e.offset_s)));
            }
        }
        for f in 0..self.label_frames() {
            for c in 0..n_classes {
                if self.active_at(f).filter(|e| e.class == c).count() > n_tracks {
                    return Err(CliError::Data(format!("more than {n_tracks} events of class {c} at frame {f}")));
                }
            }
        }
        Ok(())
    }

    /// Reference labels at 100 ms resolution.
    pub fn labels(&self) -> Vec<EventLabel> {
        let mut out = Vec::new();
        for f in 0..self.label_frames() {
            let t = (f as f64 + 0.5) * LABEL_HOP_S;
            let mut per_class: Vec<usize> = Vec::new();
            for e in self.active_at(f) {
                let source = per_class.iter().filter(|&&c| c == e.class).count();
                per_class.push(e.class);
                let (az, el) = e.trajectory.angles_at((t - e.onset_s) / (e.offset_s - e.onset_s));
                out.push(EventLabel { frame: f, class: e.class, source, doa: doa_from_angles(az, el) });
            }
        }
        out.sort_by_key(|l| (l.frame, l.class, l.source));
        out
    }

    /// Render the FoA mixture. `seed` drives noise signals and the floor.
    pub fn render(&self, seed: u64) -> MultichannelAudio {
        let n = self.num_samples();
        let sr = SAMPLE_RATE as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = vec![vec![0.0; n]; 4];
        for e in &self.events {
            let (s0, s1) = ((e.onset_s * sr).round() as usize, ((e.offset_s * sr).round() as usize).min(n));
            let len = s1.saturating_sub(s0);
            let amp = self.noise_rms.max(1e-4) * 10f64.powf(e.snr_db / 20.0) * std::f64::consts::SQRT_2;
            let fade = (FADE_S * sr) as usize;
            for i in 0..len {
                let t = i as f64 / sr;
                let u = i as f64 / len.max(1) as f64;
                let x = match e.kind {
                    SignalKind::Tone { freq_hz } => (2.0 * PI * freq_hz * t).sin(),
                    SignalKind::Noise => rng.gen_range(-1.0..1.0) * 3f64.sqrt(),
                    SignalKind::Chirp { f0_hz, f1_hz } => {
                        let dur = len as f64 / sr;
                        let k = (f1_hz - f0_hz) / dur;
                        (2.0 * PI * (f0_hz * t + 0.5 * k * t * t)).sin()
                    }
                };
                let w = if i < fade {
                    0.5 - 0.5 * (PI * i as f64 / fade as f64).cos()
                } else if len - i <= fade {
                    0.5 - 0.5 * (PI * (len - i) as f64 / fade as f64).cos()
                } else {
                    1.0
                };
                let (az, el) = e.trajectory.angles_at(u);
                let g = foa_gains(az.to_radians(), el.to_radians());
                for (ch, gc) in channels.iter_mut().zip(g) {
                    ch[s0 + i] += amp * w * x * gc;
                }
            }
        }
        if self.noise_rms > 0.0 {
            // uncorrelated channels with equal energy per axis
            let scale = [1.0, 1.0 / 3f64.sqrt(), 1.0 / 3f64.sqrt(), 1.0 / 3f64.sqrt()];
            for (ch, s) in channels.iter_mut().zip(scale) {
                for v in ch.iter_mut() {
                    *v += self.noise_rms * s * rng.gen_range(-1.0..1.0) * 3f64.sqrt();
                }
            }
        }
        MultichannelAudio { channels, sample_rate: SAMPLE_RATE }
    }
}

/// Parameters of the random toy-scene generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySceneSpec {
    pub duration_s: f64,
    pub n_classes: usize,
    pub max_events: usize,
    pub moving: bool,
}

impl Default for ToySceneSpec {
    fn default() -> Self {
        Self { duration_s: 5.0, n_classes: 4, max_events: 3, moving: true }
    }
}

/// Random scene with 1..=max_events bursts of at least 1 s on 100 ms
/// boundaries, at most one event per class at any time.
pub fn toy_scene(spec: &ToySceneSpec, rng: &mut impl Rng) -> SyntheticScene {
    let frames = (spec.duration_s / LABEL_HOP_S).round() as usize;
    let mut events: Vec<SceneEvent> = Vec::new();
    let count = rng.gen_range(1..=spec.max_events.max(1));
    let mut attempts = 0;
    while events.len() < count && attempts < 100 {
        attempts += 1;
        let class = rng.gen_range(0..spec.n_classes);
        let min_len = 10.min(frames);
        let len = rng.gen_range(min_len..=frames);
        let start = rng.gen_range(0..=frames - len);
        let (onset_s, offset_s) = (start as f64 * LABEL_HOP_S, (start + len) as f64 * LABEL_HOP_S);
        if events.iter().any(|e| e.class == class && e.onset_s < offset_s && onset_s < e.offset_s) {
            continue;
        }
        let az = rng.gen_range(-180.0..180.0);
        let el = rng.gen_range(-40.0..40.0);
        let trajectory = if spec.moving && rng.gen_bool(0.3) {
            Trajectory::AzimuthRamp { from_deg: az, to_deg: az + rng.gen_range(-45.0..45.0), elevation_deg: el }
        } else {
            Trajectory::Static { azimuth_deg: az, elevation_deg: el }
        };
        events.push(SceneEvent {
            class,
            onset_s,
            offset_s,
            trajectory,
            kind: SignalKind::for_class(class),
            snr_db: rng.gen_range(20.0..30.0),
        });
    }
    SyntheticScene { duration_s: spec.duration_s, events, noise_rms: 0.01 }
}

/// Two static sources taking turns in segments of `segment_s` seconds,
/// starting with `a`; each source is `(class, azimuth_deg)`.
pub fn alternating_scene(duration_s: f64, segment_s: f64, a: (usize, f64), b: (usize, f64)) -> SyntheticScene {
    let n = (duration_s / segment_s).round() as usize;
    let events = (0..n)
        .map(|i| {
            let (class, az) = if i % 2 == 0 { a } else { b };
            SceneEvent {
                class,
                onset_s: i as f64 * segment_s,
                offset_s: ((i + 1) as f64 * segment_s).min(duration_s),
                trajectory: Trajectory::Static { azimuth_deg: az, elevation_deg: 0.0 },
                kind: SignalKind::for_class(class),
                snr_db: 25.0,
            }
        })
        .collect();
    SyntheticScene { duration_s, events, noise_rms: 0.01 }
}

/// Parse a scene file: a `duration_s=<s>` line, an optional
/// `noise_rms=<v>` line, then one CSV row per event:
/// `class,onset_s,offset_s,azimuth_deg,elevation_deg,azimuth_end_deg,snr_db[,kind]`
/// with kind `tone:<hz>`, `noise` or `chirp:<f0>:<f1>` (default by class).
pub fn parse_scene(text: &str) -> Result<SyntheticScene> {
    let mut duration = None;
    let mut noise_rms = 0.01;
    let mut events = Vec::new();
    let bad = |line: &str| CliError::Data(format!("bad scene line `{line}`"));
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        if let Some(v) = line.strip_prefix("duration_s=") {
            duration = Some(v.trim().parse::<f64>().map_err(|_| bad(line))?);
            continue;
        }
        if let Some(v) = line.strip_prefix("noise_rms=") {
            noise_rms = v.trim().parse::<f64>().map_err(|_| bad(line))?;
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() < 7 {
            return Err(bad(line));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line));
        let class: usize = f[0].parse().map_err(|_| bad(line))?;
        let (az0, el, az1) = (num(3)?, num(4)?, num(5)?);
        let trajectory = if az0 == az1 {
            Trajectory::Static { azimuth_deg: az0, elevation_deg: el }
        } else {
            Trajectory::AzimuthRamp { from_deg: az0, to_deg: az1, elevation_deg: el }
        };
        let kind = match f.get(7).copied() {
            None => SignalKind::for_class(class),
            Some("noise") => SignalKind::Noise,
            Some(k) => {
                let parts: Vec<&str> = k.split(':').collect();
                let p = |i: usize| parts.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(line));
                match parts[0] {
                    "tone" => SignalKind::Tone { freq_hz: p(1)? },
                    "chirp" => SignalKind::Chirp { f0_hz: p(1)?, f1_hz: p(2)? },
                    _ => return Err(bad(line)),
                }
            }
        };
        events.push(SceneEvent { class, onset_s: num(1)?, offset_s: num(2)?, trajectory, kind, snr_db: num(6)? });
    }
    let duration_s = duration.ok_or_else(|| CliError::Data("scene file lacks duration_s".into()))?;
    Ok(SyntheticScene { duration_s, events, noise_rms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use seld_core::features::{W, X, Y, Z};

    fn single(az: f64) -> SyntheticScene {
        SyntheticScene {
            duration_s: 1.0,
            events: vec![SceneEvent {
                class: 0,
                onset_s: 0.0,
                offset_s: 1.0,
                trajectory: Trajectory::Static { azimuth_deg: az, elevation_deg: 0.0 },
                kind: SignalKind::Tone { freq_hz: 1000.0 },
                snr_db: 20.0,
            }],
            noise_rms: 0.0,
        }
    }

    #[test]
    fn frontal_source_encoding() {
        let a = single(0.0).render(0);
        for i in 0..a.num_samples() {
            assert_eq!(a.channels[X][i], a.channels[W][i]);
            assert!(a.channels[Y][i].abs() < 1e-12 && a.channels[Z][i].abs() < 1e-12);
        }
    }

    #[test]
    fn lateral_source_encoding() {
        let a = single(90.0).render(0);
        for i in 0..a.num_samples() {
            assert!((a.channels[Y][i] - a.channels[W][i]).abs() < 1e-12);
            assert!(a.channels[X][i].abs() < 1e-12);
        }
    }

    #[test]
    fn labels_every_hundred_ms() {
        let s = single(30.0);
        let l = s.labels();
        assert_eq!(l.len(), 10);
        assert!(l.iter().enumerate().all(|(i, e)| e.frame == i && e.source == 0));
    }

    #[test]
    fn validation_catches_overlap_and_bad_trajectory() {
        let mut s = single(0.0);
        s.events.push(s.events[0]);
        assert!(s.validate(1, 1).is_err());
        assert!(s.validate(1, 3).is_ok());
        s.events[0].trajectory = Trajectory::Static { azimuth_deg: 0.0, elevation_deg: 120.0 };
        assert!(s.validate(1, 3).is_err());
    }

    #[test]
    fn scene_file_parses() {
        let s = parse_scene("duration_s=2\nnoise_rms=0\n0,0.0,1.0,10,0,10,20\n1,0.5,2.0,0,10,90,15,chirp:300:900\n").unwrap();
        assert_eq!(s.events.len(), 2);
        assert!(matches!(s.events[1].trajectory, Trajectory::AzimuthRamp { .. }));
        assert!(matches!(s.events[1].kind, SignalKind::Chirp { .. }));
    }
}
