use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seld_tensor::{DType, Scalar, Tensor};

use super::config::{Domain, ModelConfig};
use crate::error::{CoreError, Result};
use crate::features::N_FEATURE_CHANNELS;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const BN_MOMENTUM: f64 = 0.9;
pub const FFN_EXPANSION: usize = 4;

/// Named trainable parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar = f32> {
    pub config: ModelConfig,
    pub params: IndexMap<String, Tensor<S>>,
    /// Running mean/variance of every batch norm, keyed `<bn>.running_mean`
    /// and `<bn>.running_var`.
    pub buffers: IndexMap<String, Tensor<S>>,
}

enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    He(usize),
    Zeros,
    Ones,
}

struct Builder<'a, S: Scalar> {
    rng: ChaCha8Rng,
    params: &'a mut IndexMap<String, Tensor<S>>,
    buffers: &'a mut IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> Builder<'_, S> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        let t = match init {
            Init::He(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| S::lit(rng.gen_range(-bound..bound)))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
        };
        self.params.insert(name, t);
    }

    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        self.add(format!("{prefix}.w"), &[c_out, c_in, k, k], Init::He(c_in * k * k));
        self.add(format!("{prefix}.b"), &[c_out], Init::Zeros);
    }

    fn depthwise(&mut self, prefix: &str, c: usize) {
        self.add(format!("{prefix}.w"), &[c, 1, 3, 3], Init::He(9));
        self.add(format!("{prefix}.b"), &[c], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.add(format!("{prefix}.gamma"), &[c], Init::Ones);
        self.add(format!("{prefix}.beta"), &[c], Init::Zeros);
    }

    fn batch_norm(&mut self, prefix: &str, c: usize) {
        self.norm(prefix, c);
        self.buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{prefix}.running_var"), Tensor::ones(&[c]));
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, bias: bool) {
        self.add(format!("{prefix}.w"), &[d_in, d_out], Init::He(d_in));
        if bias {
            self.add(format!("{prefix}.b"), &[d_out], Init::Zeros);
        }
    }
}

impl<S: Scalar> Model<S> {
    /// Fresh parameters for `config`, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = IndexMap::new();
        let mut buffers = IndexMap::new();
        let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(seed), params: &mut params, buffers: &mut buffers };
        let c = config.channels;
        let (_, f_enc) = config.encoded_dims(config.input_frames)?;
        for i in 0..3 {
            let c_in = if i == 0 { N_FEATURE_CHANNELS } else { c };
            b.conv(&format!("enc.{i}.conv"), c, c_in, 3);
            b.batch_norm(&format!("enc.{i}.bn"), c);
        }
        let e = FFN_EXPANSION * c;
        for blk in 0..config.n_cst {
            let p = format!("cst.{blk}");
            b.depthwise(&format!("{p}.lpu"), c);
            for &d in &config.attention_order {
                let dim = match d {
                    Domain::Channel => config.ule_kernels[blk].0 * config.ule_kernels[blk].1,
                    _ => c,
                };
                let inner = config.heads * config.head_dim(dim);
                let a = format!("{p}.attn.{}", d.key());
                b.linear(&format!("{a}.wq"), dim, inner, false);
                b.linear(&format!("{a}.wk"), dim, inner, false);
                b.linear(&format!("{a}.wv"), dim, inner, false);
                b.linear(&format!("{a}.wo"), inner, dim, true);
                b.norm(&format!("{a}.ln"), c);
            }
            b.norm(&format!("{p}.ffn.ln"), c);
            b.conv(&format!("{p}.ffn.expand"), e, c, 1);
            b.batch_norm(&format!("{p}.ffn.bn1"), e);
            b.depthwise(&format!("{p}.ffn.dw"), e);
            b.batch_norm(&format!("{p}.ffn.bn2"), e);
            b.conv(&format!("{p}.ffn.project"), c, e, 1);
            b.batch_norm(&format!("{p}.ffn.bn3"), c);
        }
        b.linear("fc1", c * f_enc, config.fc_hidden, true);
        b.linear("fc2", config.fc_hidden, config.output_width(), true);
        Ok(Self { config, params, buffers })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<S>> {
        self.params.get(name).ok_or_else(|| CoreError::Config(format!("missing parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<S>> {
        self.buffers.get(name).ok_or_else(|| CoreError::Config(format!("missing buffer `{name}`")))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Fold one batch of statistics into the running estimates:
    /// `running = m * running + (1 - m) * batch` with `m = 0.9`.
    pub fn update_running_stats(&mut self, bn: &str, mean: &[S], var: &[S]) -> Result<()> {
        let m = S::lit(BN_MOMENTUM);
        let one_m = S::one() - m;
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let key = format!("{bn}.{suffix}");
            let buf = self.buffers.get_mut(&key).ok_or_else(|| CoreError::Config(format!("missing buffer `{key}`")))?;
            for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                *r = m * *r + one_m * b;
            }
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Write `<path>` (text manifest) and `<path>.bin` (little-endian payload).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bin = payload_path(path);
        let mut manifest = format!("format_version={CHECKPOINT_FORMAT_VERSION}\ndtype={}\n", S::DTYPE.name());
        for (k, v) in self.config.to_kv() {
            manifest.push_str(&format!("config.{k}={v}\n"));
        }
        manifest.push_str(&format!(
            "payload={}\n",
            bin.file_name().and_then(|n| n.to_str()).unwrap_or_default()
        ));
        let mut payload = Vec::new();
        for (kind, map) in [("param", &self.params), ("buffer", &self.buffers)] {
            for (name, t) in map {
                let shape = t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
                manifest.push_str(&format!(
                    "tensor={kind} {name} {} {shape} {} {}\n",
                    S::DTYPE.name(),
                    payload.len(),
                    t.numel()
                ));
                for &x in t.data() {
                    x.write_le(&mut payload);
                }
            }
        }
        fs::write(path, manifest).map_err(|e| CoreError::io(path, e))?;
        fs::write(&bin, payload).map_err(|e| CoreError::io(&bin, e))
    }

    /// Load a checkpoint, validating every tensor against the echoed config.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut kv = IndexMap::new();
        let mut entries = Vec::new();
        let mut version = None;
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            if let Some(ck) = k.strip_prefix("config.") {
                kv.insert(ck.to_string(), v.to_string());
            } else if k == "tensor" {
                entries.push(parse_entry(v)?);
            } else if k == "format_version" {
                version = Some(v.trim().parse::<u32>().map_err(|_| CoreError::Data(format!("bad format_version `{v}`")))?);
            }
        }
        if version != Some(CHECKPOINT_FORMAT_VERSION) {
            return Err(CoreError::Data(format!("unsupported checkpoint format {version:?}")));
        }
        let config = ModelConfig::from_kv(&kv)?;
        let mut model = Model::<S>::init(config, 0)?;
        let bin = payload_path(path);
        let bytes = fs::read(&bin).map_err(|e| CoreError::io(&bin, e))?;
        let expected = model.params.len() + model.buffers.len();
        if entries.len() != expected {
            return Err(CoreError::Data(format!("checkpoint has {} tensors, config implies {expected}", entries.len())));
        }
        for e in entries {
            let map = if e.kind == "param" { &mut model.params } else { &mut model.buffers };
            let slot = map
                .get_mut(&e.name)
                .ok_or_else(|| CoreError::Data(format!("unexpected tensor `{}`", e.name)))?;
            if slot.shape() != e.shape.as_slice() {
                return Err(CoreError::Data(format!(
                    "tensor `{}` has shape {:?}, config implies {:?}",
                    e.name,
                    e.shape,
                    slot.shape()
                )));
            }
            let size = e.dtype.size_bytes();
            let end = e.offset + e.numel * size;
            let raw = bytes
                .get(e.offset..end)
                .ok_or_else(|| CoreError::Data(format!("tensor `{}` extends past the payload", e.name)))?;
            let data: Vec<S> = match e.dtype {
                DType::F32 => raw.chunks_exact(4).map(|b| S::lit(f32::read_le(b) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|b| S::lit(f64::read_le(b))).collect(),
            };
            *slot = Tensor::new(e.shape, data)?;
        }
        Ok(model)
    }
}

struct Entry {
    kind: String,
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    numel: usize,
}

fn parse_entry(v: &str) -> Result<Entry> {
    let bad = || CoreError::Data(format!("malformed tensor line `{v}`"));
    let f: Vec<&str> = v.split_whitespace().collect();
    if f.len() != 6 || (f[0] != "param" && f[0] != "buffer") {
        return Err(bad());
    }
    let shape = f[3].split(',').map(|d| d.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| bad())?;
    let entry = Entry {
        kind: f[0].to_string(),
        name: f[1].to_string(),
        dtype: DType::parse(f[2]).ok_or_else(bad)?,
        shape,
        offset: f[4].parse().map_err(|_| bad())?,
        numel: f[5].parse().map_err(|_| bad())?,
    };
    if entry.shape.iter().product::<usize>() != entry.numel {
        return Err(bad());
    }
    Ok(entry)
}

pub fn payload_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".bin");
    p.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{KernelScheme, Preset};

    fn micro() -> ModelConfig {
        let mut cfg = ModelConfig::preset(Preset::Small, KernelScheme::Uniscale, 2);
        cfg.channels = 8;
        cfg.n_cst = 1;
        cfg.ule_kernels = vec![(10, 4)];
        cfg.fc_hidden = 16;
        cfg
    }

    #[test]
    fn init_is_deterministic_and_named() {
        let a = Model::<f64>::init(micro(), 3).unwrap();
        let b = Model::<f64>::init(micro(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.param("cst.0.attn.c.wq.w").unwrap().shape(), &[40, 40]);
        assert_eq!(a.param("cst.0.ffn.expand.w").unwrap().shape(), &[32, 8, 1, 1]);
        assert_eq!(a.param("fc1.w").unwrap().shape(), &[8 * 16, 16]);
        assert_eq!(a.param("fc2.w").unwrap().shape(), &[16, 18]);
        assert!(a.param("cst.0.ffn.expand.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_stats_momentum() {
        let mut m = Model::<f64>::init(micro(), 0).unwrap();
        m.update_running_stats("enc.0.bn", &[1.0; 8], &[3.0; 8]).unwrap();
        assert!((m.buffer("enc.0.bn.running_mean").unwrap().data()[0] - 0.1).abs() < 1e-15);
        assert!((m.buffer("enc.0.bn.running_var").unwrap().data()[0] - 1.2).abs() < 1e-15);
    }
}
