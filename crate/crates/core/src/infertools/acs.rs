use crate::accdoa::MultiAccdoa;
use crate::error::{CoreError, Result};
use crate::features::{FeatureTensor, MultichannelAudio, N_MELS, X, Y, Z};
use crate::objective::AdpitTargets;

/// Audio channel swap: optional exchange of the x and y axes followed by
/// optional sign flips of x, y and z. The same linear map acts on the X/Y/Z
/// dipole channels and on DoA vectors; its inverse is the transpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct AcsTransform {
    pub swap_xy: bool,
    pub neg_x: bool,
    pub neg_y: bool,
    pub neg_z: bool,
}

pub const ACS_GROUP_SIZE: usize = 16;

impl AcsTransform {
    pub const IDENTITY: AcsTransform = AcsTransform { swap_xy: false, neg_x: false, neg_y: false, neg_z: false };

    /// Rotation by -90° in azimuth combined with elevation reversal.
    pub const PERTURB: AcsTransform = AcsTransform { swap_xy: true, neg_x: false, neg_y: true, neg_z: true };

    pub fn id(self) -> u8 {
        (self.swap_xy as u8) << 3 | (self.neg_x as u8) << 2 | (self.neg_y as u8) << 1 | self.neg_z as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        if id as usize >= ACS_GROUP_SIZE {
            return Err(CoreError::Config(format!("unknown ACS transform id {id}")));
        }
        Ok(Self { swap_xy: id & 8 != 0, neg_x: id & 4 != 0, neg_y: id & 2 != 0, neg_z: id & 1 != 0 })
    }

    /// All 16 transforms, identity first.
    pub fn all() -> Vec<Self> {
        (0..ACS_GROUP_SIZE as u8).map(|i| Self::from_id(i).expect("id in range")).collect()
    }

    pub fn matrix(self) -> [[f64; 3]; 3] {
        let s = |neg: bool| if neg { -1.0 } else { 1.0 };
        let (sx, sy, sz) = (s(self.neg_x), s(self.neg_y), s(self.neg_z));
        if self.swap_xy {
            [[0.0, sx, 0.0], [sy, 0.0, 0.0], [0.0, 0.0, sz]]
        } else {
            [[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, sz]]
        }
    }

    pub fn inverse(self) -> Self {
        if self.swap_xy {
            Self { swap_xy: true, neg_x: self.neg_y, neg_y: self.neg_x, neg_z: self.neg_z }
        } else {
            self
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(self, other: Self) -> Self {
        let (a, b) = (self.matrix(), other.matrix());
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Self::all().into_iter().find(|t| t.matrix() == m).expect("ACS transforms form a group")
    }

    pub fn apply_doa(self, v: [f64; 3]) -> [f64; 3] {
        let (x, y) = if self.swap_xy { (v[1], v[0]) } else { (v[0], v[1]) };
        let f = |neg: bool, a: f64| if neg { -a } else { a };
        [f(self.neg_x, x), f(self.neg_y, y), f(self.neg_z, v[2])]
    }

    pub fn unrotate_doa(self, v: [f64; 3]) -> [f64; 3] {
        self.inverse().apply_doa(v)
    }

    pub fn apply_audio(self, audio: &MultichannelAudio) -> MultichannelAudio {
        let mut out = audio.clone();
        let n = audio.num_samples();
        for i in 0..n {
            let v = [audio.channels[X][i], audio.channels[Y][i], audio.channels[Z][i]];
            let r = self.apply_doa(v);
            out.channels[X][i] = r[0];
            out.channels[Y][i] = r[1];
            out.channels[Z][i] = r[2];
        }
        out
    }

    /// The feature-domain counterpart of [`AcsTransform::apply_audio`]:
    /// log-mel channels Y and X are exchanged under a swap (signs do not
    /// affect power), and the (x, y, z) intensity components are mapped like
    /// a DoA vector.
    pub fn apply_features(self, f: &FeatureTensor) -> FeatureTensor {
        let t = f.frames();
        let src = f.data.data();
        let mut out = src.to_vec();
        let plane = t * N_MELS;
        if self.swap_xy {
            out[Y * plane..(Y + 1) * plane].copy_from_slice(&src[X * plane..(X + 1) * plane]);
            out[X * plane..(X + 1) * plane].copy_from_slice(&src[Y * plane..(Y + 1) * plane]);
        }
        for i in 0..plane {
            let v = [src[4 * plane + i] as f64, src[5 * plane + i] as f64, src[6 * plane + i] as f64];
            let r = self.apply_doa(v);
            for d in 0..3 {
                out[(4 + d) * plane + i] = r[d] as f32;
            }
        }
        FeatureTensor { data: seld_tensor::Tensor::new(f.data.shape().to_vec(), out).expect("same shape") }
    }

    /// Map every track vector of an output by the inverse transform.
    pub fn unrotate_output(self, out: &MultiAccdoa) -> MultiAccdoa {
        let inv = self.inverse();
        let mut r = out.clone();
        for chunk in r.data.chunks_exact_mut(3) {
            let v = inv.apply_doa([chunk[0], chunk[1], chunk[2]]);
            chunk.copy_from_slice(&v);
        }
        r
    }

    pub fn apply_targets(self, t: &AdpitTargets) -> AdpitTargets {
        t.map_doas(|d| self.apply_doa(d))
    }
}
