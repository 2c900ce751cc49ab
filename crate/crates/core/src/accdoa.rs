//! Multi-ACCDOA frame layout.
//!
//! A frame holds `n_classes * n_tracks` 3-vectors whose direction is the DoA
//! and whose length is the activity. Element `(c, n, d)` of a frame lives at
//! `c * n_tracks * 3 + n * 3 + d`.

use seld_tensor::{Scalar, Tensor};

use crate::error::{CoreError, Result};

pub const DOA_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n_classes: usize,
    pub n_tracks: usize,
}

impl Layout {
    pub fn new(n_classes: usize, n_tracks: usize) -> Self {
        Self { n_classes, n_tracks }
    }

    pub fn width(&self) -> usize {
        self.n_classes * self.n_tracks * DOA_DIM
    }

    pub fn index(&self, class: usize, track: usize, dim: usize) -> usize {
        (class * self.n_tracks + track) * DOA_DIM + dim
    }
}

/// Frame-major multi-ACCDOA values, `[frames, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiAccdoa {
    pub layout: Layout,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl MultiAccdoa {
    pub fn zeros(layout: Layout, frames: usize) -> Self {
        Self { layout, frames, data: vec![0.0; frames * layout.width()] }
    }

    pub fn from_vec(layout: Layout, frames: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * layout.width() {
            return Err(CoreError::Data(format!(
                "multi-ACCDOA payload has {} values, expected {}x{}",
                data.len(),
                frames,
                layout.width()
            )));
        }
        Ok(Self { layout, frames, data })
    }

    /// Accept `[frames, width]` or a leading unit batch axis.
    pub fn from_tensor<S: Scalar>(layout: Layout, t: &Tensor<S>) -> Result<Self> {
        let s = t.shape();
        let frames = match s {
            [f, w] if *w == layout.width() => *f,
            [1, f, w] if *w == layout.width() => *f,
            _ => {
                return Err(CoreError::Data(format!(
                    "output shape {s:?} does not match width {}",
                    layout.width()
                )))
            }
        };
        Ok(Self { layout, frames, data: t.to_f64_vec() })
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.frames, self.layout.width()], self.data.clone()).expect("consistent layout")
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.layout.width();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn vector(&self, t: usize, class: usize, track: usize) -> [f64; 3] {
        let i = t * self.layout.width() + self.layout.index(class, track, 0);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_vector(&mut self, t: usize, class: usize, track: usize, v: [f64; 3]) {
        let i = t * self.layout.width() + self.layout.index(class, track, 0);
        self.data[i..i + 3].copy_from_slice(&v);
    }

    /// Mean squared difference per element.
    pub fn mse(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "mse on mismatched outputs");
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        s / self.data.len() as f64
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let w = self.layout.width();
        Self { layout: self.layout, frames: len, data: self.data[start * w..(start + len) * w].to_vec() }
    }

    pub fn concat(parts: &[MultiAccdoa]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| CoreError::EmptyInput("no outputs to concatenate".into()))?;
        let mut out = Self { layout: first.layout, frames: 0, data: Vec::new() };
        for p in parts {
            if p.layout != first.layout {
                return Err(CoreError::Data("layout mismatch in concatenation".into()));
            }
            out.frames += p.frames;
            out.data.extend_from_slice(&p.data);
        }
        Ok(out)
    }
}

pub fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Angle in degrees between two non-zero vectors.
pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let c = dot3(a, b) / (norm3(a) * norm3(b));
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Unit vector for azimuth/elevation in degrees (x front, y left, z up).
pub fn doa_from_angles(azimuth_deg: f64, elevation_deg: f64) -> [f64; 3] {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [az.cos() * el.cos(), az.sin() * el.cos(), el.sin()]
}

/// Azimuth in (-180, 180] and elevation in [-90, 90], degrees.
pub fn angles_from_doa(d: [f64; 3]) -> (f64, f64) {
    let n = norm3(d);
    let mut az = d[1].atan2(d[0]).to_degrees();
    if az <= -180.0 {
        az += 360.0;
    }
    let el = (d[2] / n).clamp(-1.0, 1.0).asin().to_degrees();
    (az, el)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_index_is_class_track_dim_major() {
        let l = Layout::new(13, 3);
        assert_eq!(l.width(), 117);
        assert_eq!(l.index(0, 0, 0), 0);
        assert_eq!(l.index(0, 1, 0), 3);
        assert_eq!(l.index(1, 0, 2), 11);
    }

    #[test]
    fn axis_angles() {
        assert_eq!(angles_from_doa([1.0, 0.0, 0.0]), (0.0, 0.0));
        let (az, el) = angles_from_doa([0.0, 1.0, 0.0]);
        assert!((az - 90.0).abs() < 1e-12 && el.abs() < 1e-12);
        assert!((angles_from_doa([0.0, 0.0, 1.0]).1 - 90.0).abs() < 1e-12);
        assert_eq!(angles_from_doa([-1.0, -0.0, 0.0]).0, 180.0);
    }

    #[test]
    fn angles_roundtrip() {
        for &(az, el) in &[(10.0, 20.0), (-170.0, -45.0), (90.0, 0.0)] {
            let (a, e) = angles_from_doa(doa_from_angles(az, el));
            assert!((a - az).abs() < 1e-9 && (e - el).abs() < 1e-9);
        }
    }
}
