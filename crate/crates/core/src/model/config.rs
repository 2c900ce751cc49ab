use std::fmt;

use indexmap::IndexMap;
use seld_tensor::TensorError;

use crate::accdoa::{Layout, DOA_DIM};
use crate::error::{CoreError, Result};
use crate::features::N_MELS;

/// Where the encoder (and optionally the output head) pools time and frequency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolingProfile {
    Front,
    Middle,
    End,
}

impl PoolingProfile {
    /// `(time, frequency)` max-pool kernels of the three ConvBlocks.
    pub fn conv_pools(self) -> [(usize, usize); 3] {
        match self {
            PoolingProfile::Front => [(5, 2), (1, 2), (1, 1)],
            PoolingProfile::Middle => [(1, 1), (1, 2), (5, 2)],
            PoolingProfile::End => [(1, 1), (1, 2), (1, 2)],
        }
    }

    /// Time-pool kernel in front of the FC head.
    pub fn fc_time_pool(self) -> usize {
        match self {
            PoolingProfile::End => 5,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PoolingProfile::Front => "front",
            PoolingProfile::Middle => "middle",
            PoolingProfile::End => "end",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "front" => Ok(PoolingProfile::Front),
            "middle" => Ok(PoolingProfile::Middle),
            "end" => Ok(PoolingProfile::End),
            _ => Err(CoreError::Config(format!("unknown pooling profile `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Channel,
    Spectral,
    Temporal,
}

impl Domain {
    pub fn letter(self) -> char {
        match self {
            Domain::Channel => 'C',
            Domain::Spectral => 'S',
            Domain::Temporal => 'T',
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Domain::Channel => "c",
            Domain::Spectral => "s",
            Domain::Temporal => "t",
        }
    }
}

/// Parse an attention order such as `CST`, `TCS` or the ablation `CT`.
pub fn parse_order(s: &str) -> Result<Vec<Domain>> {
    let mut out = Vec::new();
    for ch in s.trim().chars() {
        let d = match ch.to_ascii_uppercase() {
            'C' => Domain::Channel,
            'S' => Domain::Spectral,
            'T' => Domain::Temporal,
            _ => return Err(CoreError::Config(format!("attention order `{s}`: unknown domain `{ch}`"))),
        };
        if out.contains(&d) {
            return Err(CoreError::Config(format!("attention order `{s}` repeats `{ch}`")));
        }
        out.push(d);
    }
    if out.is_empty() {
        return Err(CoreError::Config("attention order is empty".into()));
    }
    Ok(out)
}

pub fn order_string(order: &[Domain]) -> String {
    order.iter().map(|d| d.letter()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Small,
    Base,
    Large,
    Huge,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Small, Preset::Base, Preset::Large, Preset::Huge];

    /// `(pooling, N_CST, C)`.
    pub fn dims(self) -> (PoolingProfile, usize, usize) {
        match self {
            Preset::Small => (PoolingProfile::Front, 2, 64),
            Preset::Base => (PoolingProfile::Middle, 2, 64),
            Preset::Large => (PoolingProfile::End, 4, 128),
            Preset::Huge => (PoolingProfile::End, 6, 128),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Preset::Small),
            "base" => Ok(Preset::Base),
            "large" => Ok(Preset::Large),
            "huge" => Ok(Preset::Huge),
            _ => Err(CoreError::Config(format!("unknown preset `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelScheme {
    Uniscale,
    Multiscale,
}

/// Default ULE kernels per block.
pub fn ule_kernels(n_cst: usize, scheme: KernelScheme) -> Vec<(usize, usize)> {
    match scheme {
        KernelScheme::Uniscale => {
            let k = if n_cst <= 2 { (10, 4) } else { (25, 4) };
            vec![k; n_cst]
        }
        KernelScheme::Multiscale => {
            const MS: [(usize, usize); 4] = [(25, 4), (10, 4), (5, 4), (5, 2)];
            (0..n_cst).map(|i| MS[i.min(3)]).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Encoder filters `C`.
    pub channels: usize,
    pub n_cst: usize,
    pub pooling: PoolingProfile,
    /// `(P_T, P_F)` per CST block.
    pub ule_kernels: Vec<(usize, usize)>,
    pub attention_order: Vec<Domain>,
    pub heads: usize,
    pub n_classes: usize,
    pub n_tracks: usize,
    pub dropout: f64,
    pub fc_hidden: usize,
    /// Input frames of one inference window.
    pub input_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(Preset::Large, KernelScheme::Uniscale, 13)
    }
}

impl ModelConfig {
    pub fn preset(preset: Preset, scheme: KernelScheme, n_classes: usize) -> Self {
        let (pooling, n_cst, channels) = preset.dims();
        Self {
            channels,
            n_cst,
            pooling,
            ule_kernels: ule_kernels(n_cst, scheme),
            attention_order: vec![Domain::Channel, Domain::Spectral, Domain::Temporal],
            heads: 8,
            n_classes,
            n_tracks: 3,
            dropout: 0.05,
            fc_hidden: 256,
            input_frames: 250,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.n_classes, self.n_tracks)
    }

    pub fn output_width(&self) -> usize {
        self.n_classes * self.n_tracks * DOA_DIM
    }

    pub fn has_domain(&self, d: Domain) -> bool {
        self.attention_order.contains(&d)
    }

    /// Per-head width for an embedding of size `d`; heads are padded so that
    /// `heads * head_dim >= d`.
    pub fn head_dim(&self, d: usize) -> usize {
        d.div_ceil(self.heads)
    }

    /// Encoded `(T', F')` for an input of `frames` frames.
    pub fn encoded_dims(&self, frames: usize) -> Result<(usize, usize)> {
        let (mut t, mut f) = (frames, N_MELS);
        for (i, &(pt, pf)) in self.pooling.conv_pools().iter().enumerate() {
            let op = ["convblock1_pool", "convblock2_pool", "convblock3_pool"][i];
            if t % pt != 0 {
                return Err(TensorError::Indivisible { op, axis: "time", extent: t, kernel: pt }.into());
            }
            if f % pf != 0 {
                return Err(TensorError::Indivisible { op, axis: "frequency", extent: f, kernel: pf }.into());
            }
            t /= pt;
            f /= pf;
        }
        Ok((t, f))
    }

    pub fn output_frames(&self, frames: usize) -> Result<usize> {
        Ok(self.encoded_dims(frames)?.0 / self.pooling.fc_time_pool())
    }

    /// Check every divisibility constraint for an input of `frames` frames.
    pub fn validate_frames(&self, frames: usize) -> Result<()> {
        let (t, f) = self.encoded_dims(frames)?;
        if self.has_domain(Domain::Channel) {
            for &(pt, pf) in &self.ule_kernels {
                if pt == 0 || t % pt != 0 {
                    return Err(TensorError::Indivisible { op: "ule_kernel", axis: "time", extent: t, kernel: pt }.into());
                }
                if pf == 0 || f % pf != 0 {
                    return Err(
                        TensorError::Indivisible { op: "ule_kernel", axis: "frequency", extent: f, kernel: pf }.into()
                    );
                }
            }
        }
        let p = self.pooling.fc_time_pool();
        if t % p != 0 {
            return Err(TensorError::Indivisible { op: "fc_time_pool", axis: "time", extent: t, kernel: p }.into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("heads", self.heads),
            ("n_classes", self.n_classes),
            ("n_tracks", self.n_tracks),
            ("fc_hidden", self.fc_hidden),
            ("input_frames", self.input_frames),
            ("n_cst", self.n_cst),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CoreError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ule_kernels.len() != self.n_cst {
            return Err(CoreError::Config(format!(
                "{} ULE kernels given for {} CST blocks",
                self.ule_kernels.len(),
                self.n_cst
            )));
        }
        if self.attention_order.is_empty() {
            return Err(CoreError::Config("attention order is empty".into()));
        }
        self.validate_frames(self.input_frames)
    }

    /// Flat key/value echo, the inverse of [`ModelConfig::from_kv`].
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let kernels = self.ule_kernels.iter().map(|(t, f)| format!("{t}x{f}")).collect::<Vec<_>>().join(",");
        vec![
            ("channels".into(), self.channels.to_string()),
            ("n_cst".into(), self.n_cst.to_string()),
            ("pooling".into(), self.pooling.name().into()),
            ("ule_kernels".into(), kernels),
            ("attention_order".into(), order_string(&self.attention_order)),
            ("heads".into(), self.heads.to_string()),
            ("n_classes".into(), self.n_classes.to_string()),
            ("n_tracks".into(), self.n_tracks.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("fc_hidden".into(), self.fc_hidden.to_string()),
            ("input_frames".into(), self.input_frames.to_string()),
        ]
    }

    /// Override fields from key/value pairs; unknown keys are ignored so the
    /// same map can carry run settings. A `preset` key (with optional
    /// `ule_scheme`) is applied before the explicit fields.
    pub fn from_kv(kv: &IndexMap<String, String>) -> Result<Self> {
        let n_classes = match kv.get("n_classes") {
            Some(v) => parse_num(v, "n_classes")?,
            None => 13,
        };
        let scheme = match kv.get("ule_scheme").map(|s| s.to_ascii_lowercase()) {
            None => KernelScheme::Uniscale,
            Some(s) if s == "ule" || s == "uniscale" => KernelScheme::Uniscale,
            Some(s) if s == "msule" || s == "multiscale" => KernelScheme::Multiscale,
            Some(s) => return Err(CoreError::Config(format!("unknown ule_scheme `{s}`"))),
        };
        let preset = kv.get("preset").map(|p| Preset::parse(p)).transpose()?.unwrap_or(Preset::Large);
        let mut cfg = ModelConfig::preset(preset, scheme, n_classes);
        if let Some(v) = kv.get("channels") {
            cfg.channels = parse_num(v, "channels")?;
        }
        if let Some(v) = kv.get("n_cst") {
            cfg.n_cst = parse_num(v, "n_cst")?;
            cfg.ule_kernels = ule_kernels(cfg.n_cst, scheme);
        }
        if let Some(v) = kv.get("pooling") {
            cfg.pooling = PoolingProfile::parse(v)?;
        }
        if let Some(v) = kv.get("ule_kernels") {
            cfg.ule_kernels = parse_kernels(v)?;
        }
        if let Some(v) = kv.get("attention_order") {
            cfg.attention_order = parse_order(v)?;
        }
        if let Some(v) = kv.get("heads") {
            cfg.heads = parse_num(v, "heads")?;
        }
        if let Some(v) = kv.get("n_tracks") {
            cfg.n_tracks = parse_num(v, "n_tracks")?;
        }
        if let Some(v) = kv.get("dropout") {
            cfg.dropout = v.trim().parse().map_err(|_| CoreError::Config(format!("dropout: bad value `{v}`")))?;
        }
        if let Some(v) = kv.get("fc_hidden") {
            cfg.fc_hidden = parse_num(v, "fc_hidden")?;
        }
        if let Some(v) = kv.get("input_frames") {
            cfg.input_frames = parse_num(v, "input_frames")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_kv() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

fn parse_num(v: &str, key: &str) -> Result<usize> {
    v.trim().parse().map_err(|_| CoreError::Config(format!("{key}: bad value `{v}`")))
}

/// Parse `25x4,10x4`.
pub fn parse_kernels(v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(|item| {
            let (t, f) = item
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| CoreError::Config(format!("kernel `{item}` is not of the form PTxPF")))?;
            Ok((parse_num(t, "ule_kernels")?, parse_num(f, "ule_kernels")?))
        })
        .collect()
}
