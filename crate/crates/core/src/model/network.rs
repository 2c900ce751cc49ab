use indexmap::IndexMap;
use rand::Rng;
use seld_tensor::{Graph, Mode, NormStats, Scalar, Tensor, Var};

use super::config::Domain;
use super::params::Model;
use crate::accdoa::MultiAccdoa;
use crate::error::{CoreError, Result};
use crate::features::FeatureTensor;

/// Parameters inserted into one graph, addressable by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a String, Var)>) -> Self {
        Self { vars: pairs.into_iter().map(|(k, v)| (k.clone(), v)).collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| CoreError::Config(format!("unbound parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Softmax attention maps of one CST block, each `[N, H, L, L]`.
#[derive(Clone, Debug)]
pub struct BlockAttention<S: Scalar> {
    pub channel: Option<Tensor<S>>,
    pub spectral: Option<Tensor<S>>,
    pub temporal: Option<Tensor<S>>,
}

impl<S: Scalar> BlockAttention<S> {
    pub fn get(&self, d: Domain) -> Option<&Tensor<S>> {
        match d {
            Domain::Channel => self.channel.as_ref(),
            Domain::Spectral => self.spectral.as_ref(),
            Domain::Temporal => self.temporal.as_ref(),
        }
    }
}

/// Attention maps of a forward pass plus the geometry needed to reshape them.
#[derive(Clone, Debug)]
pub struct AttentionMapBundle<S: Scalar> {
    pub blocks: Vec<BlockAttention<S>>,
    pub batch: usize,
    /// Encoded `(T', F')`.
    pub encoded: (usize, usize),
    pub kernels: Vec<(usize, usize)>,
    pub channels: usize,
    pub heads: usize,
}

pub struct ForwardOutput<S: Scalar> {
    /// `[B, T_out, N_cls * N_T * 3]`.
    pub output: Var,
    /// Batch statistics of every batch norm (training mode only).
    pub bn_stats: Vec<(String, Vec<S>, Vec<S>)>,
    pub attention: Option<AttentionMapBundle<S>>,
}

struct Ctx<'a, S: Scalar, R: Rng + ?Sized> {
    g: &'a mut Graph<S>,
    model: &'a Model<S>,
    bound: &'a Bound,
    rng: &'a mut R,
    bn_stats: Vec<(String, Vec<S>, Vec<S>)>,
    capture: Option<BlockAttention<S>>,
}

impl<S: Scalar, R: Rng + ?Sized> Ctx<'_, S, R> {
    fn p(&self, name: &str) -> Result<Var> {
        self.bound.get(name)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        Ok(self.g.dropout(x, self.model.config.dropout, self.rng)?)
    }

    fn batch_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let (gamma, beta) = (self.p(&format!("{name}.gamma"))?, self.p(&format!("{name}.beta"))?);
        let stats = match self.g.mode() {
            Mode::Train => NormStats::Batch,
            Mode::Eval => NormStats::Running {
                mean: self.model.buffer(&format!("{name}.running_mean"))?.data(),
                var: self.model.buffer(&format!("{name}.running_var"))?.data(),
            },
        };
        let (y, st) = self.g.batch_norm(x, gamma, beta, stats)?;
        if let Some((m, v)) = st {
            self.bn_stats.push((name.to_string(), m, v));
        }
        Ok(y)
    }

    /// Layer norm over the channel axis of `[B, C, T, F]`.
    fn channel_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let (gamma, beta) = (self.p(&format!("{name}.gamma"))?, self.p(&format!("{name}.beta"))?);
        let t = self.g.permute(x, &[0, 2, 3, 1])?;
        let t = self.g.layer_norm(t, gamma, beta)?;
        Ok(self.g.permute(t, &[0, 3, 1, 2])?)
    }

    fn conv_block(&mut self, x: Var, i: usize, pool: (usize, usize)) -> Result<Var> {
        let p = format!("enc.{i}");
        let y = self.g.conv2d(x, self.p(&format!("{p}.conv.w"))?, Some(self.p(&format!("{p}.conv.b"))?))?;
        let y = self.batch_norm(y, &format!("{p}.bn"))?;
        let y = self.g.relu(y)?;
        let y = self.g.max_pool2d(y, pool.0, pool.1)?;
        self.dropout(y)
    }

    /// Multi-head self-attention over `[N, L, D]`; returns `[N, L, D]`.
    fn mhsa(&mut self, x: Var, prefix: &str, domain: Domain) -> Result<Var> {
        let w = AttentionWeights {
            wq: self.p(&format!("{prefix}.wq.w"))?,
            wk: self.p(&format!("{prefix}.wk.w"))?,
            wv: self.p(&format!("{prefix}.wv.w"))?,
            wo: self.p(&format!("{prefix}.wo.w"))?,
            bo: Some(self.p(&format!("{prefix}.wo.b"))?),
        };
        let (o, attn) = multi_head_attention(self.g, x, &w, self.model.config.heads)?;
        if let Some(cap) = self.capture.as_mut() {
            let a = Some(self.g.value(attn).clone());
            match domain {
                Domain::Channel => cap.channel = a,
                Domain::Spectral => cap.spectral = a,
                Domain::Temporal => cap.temporal = a,
            }
        }
        Ok(o)
    }

    /// Unfolded-local-embedding channel attention on `[B, C, T', F']`.
    fn channel_attention(&mut self, z: Var, blk: usize) -> Result<Var> {
        let (pt, pf) = self.model.config.ule_kernels[blk];
        let s = self.g.shape(z).to_vec();
        let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
        let (gt, gf, pd) = (t / pt, f / pf, pt * pf);
        let u = self.g.unfold(z, pt, pf)?;
        let u = self.g.reshape(u, &[b, c, pd, gt, gf])?;
        let u = self.g.permute(u, &[0, 3, 4, 1, 2])?;
        let u = self.g.reshape(u, &[b * gt * gf, c, pd])?;
        let prefix = format!("cst.{blk}.attn.c");
        let o = self.mhsa(u, &prefix, Domain::Channel)?;
        let o = self.g.reshape(o, &[b, gt, gf, c, pd])?;
        let o = self.g.permute(o, &[0, 3, 4, 1, 2])?;
        let o = self.g.reshape(o, &[b, c * pd, gt, gf])?;
        let o = self.g.fold(o, pt, pf)?;
        let o = self.dropout(o)?;
        let y = self.g.add(z, o)?;
        self.channel_norm(y, &format!("{prefix}.ln"))
    }

    /// Spectral (sequence F') or temporal (sequence T') attention with
    /// channels as the embedding.
    fn axis_attention(&mut self, z: Var, blk: usize, domain: Domain) -> Result<Var> {
        let s = self.g.shape(z).to_vec();
        let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
        let (axes, outer, seq) = match domain {
            Domain::Spectral => ([0, 2, 3, 1], t, f),
            _ => ([0, 3, 2, 1], f, t),
        };
        let x = self.g.permute(z, &axes)?;
        let xs = self.g.reshape(x, &[b * outer, seq, c])?;
        let prefix = format!("cst.{blk}.attn.{}", domain.key());
        let o = self.mhsa(xs, &prefix, domain)?;
        let o = self.dropout(o)?;
        let y = self.g.add(xs, o)?;
        let y = self.g.layer_norm(y, self.p(&format!("{prefix}.ln.gamma"))?, self.p(&format!("{prefix}.ln.beta"))?)?;
        let y = self.g.reshape(y, &[b, outer, seq, c])?;
        let back = match domain {
            Domain::Spectral => [0, 3, 1, 2],
            _ => [0, 3, 2, 1],
        };
        Ok(self.g.permute(y, &back)?)
    }

    fn lpu(&mut self, z: Var, blk: usize) -> Result<Var> {
        let p = format!("cst.{blk}.lpu");
        let y = self.g.depthwise_conv2d(z, self.p(&format!("{p}.w"))?, Some(self.p(&format!("{p}.b"))?))?;
        Ok(self.g.add(y, z)?)
    }

    fn irffn(&mut self, z: Var, blk: usize) -> Result<Var> {
        let p = format!("cst.{blk}.ffn");
        let h = self.channel_norm(z, &format!("{p}.ln"))?;
        let h = self.g.conv2d(h, self.p(&format!("{p}.expand.w"))?, Some(self.p(&format!("{p}.expand.b"))?))?;
        let h = self.g.gelu(h)?;
        let h = self.batch_norm(h, &format!("{p}.bn1"))?;
        let d = self.g.depthwise_conv2d(h, self.p(&format!("{p}.dw.w"))?, Some(self.p(&format!("{p}.dw.b"))?))?;
        let d = self.g.add(d, h)?;
        let d = self.g.gelu(d)?;
        let d = self.batch_norm(d, &format!("{p}.bn2"))?;
        let o = self.g.conv2d(d, self.p(&format!("{p}.project.w"))?, Some(self.p(&format!("{p}.project.b"))?))?;
        let o = self.batch_norm(o, &format!("{p}.bn3"))?;
        Ok(self.g.add(o, z)?)
    }

    fn cst_block(&mut self, z: Var, blk: usize) -> Result<Var> {
        let mut z = self.lpu(z, blk)?;
        for &d in &self.model.config.attention_order {
            z = match d {
                Domain::Channel => self.channel_attention(z, blk)?,
                _ => self.axis_attention(z, blk, d)?,
            };
        }
        self.irffn(z, blk)
    }

    fn head(&mut self, z: Var) -> Result<Var> {
        let s = self.g.shape(z).to_vec();
        let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
        let y = self.g.permute(z, &[0, 2, 1, 3])?;
        let mut y = self.g.reshape(y, &[b, t, c * f])?;
        let pool = self.model.config.pooling.fc_time_pool();
        if pool > 1 {
            y = self.g.avg_pool2d(y, pool, 1)?;
        }
        let y = self.g.linear(y, self.p("fc1.w")?, Some(self.p("fc1.b")?))?;
        let y = self.g.linear(y, self.p("fc2.w")?, Some(self.p("fc2.b")?))?;
        Ok(self.g.tanh(y)?)
    }
}

/// Projection weights of one attention module: `wq`, `wk`, `wv` are
/// `[D, H * D_h]`, `wo` is `[H * D_h, D]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Option<Var>,
}

/// Scaled dot-product attention with `heads` heads over `[N, L, D]`.
/// Returns the projected output `[N, L, D]` and the maps `[N, H, L, L]`.
pub fn multi_head_attention<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || heads == 0 {
        return Err(CoreError::Data(format!("attention input {s:?} is not [N, L, D]")));
    }
    let (n, l) = (s[0], s[1]);
    let inner = g.shape(w.wq)[1];
    if inner % heads != 0 {
        return Err(CoreError::Config(format!("projection width {inner} not divisible by {heads} heads")));
    }
    let dh = inner / heads;
    let mut split = |wt: Var, axes: &[usize]| -> Result<Var> {
        let y = g.linear(x, wt, None)?;
        let y = g.reshape(y, &[n, l, heads, dh])?;
        Ok(g.permute(y, axes)?)
    };
    let q = split(w.wq, &[0, 2, 1, 3])?;
    let kt = split(w.wk, &[0, 2, 3, 1])?;
    let v = split(w.wv, &[0, 2, 1, 3])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, S::lit(1.0 / (dh as f64).sqrt()))?;
    let attn = g.softmax_last(scores)?;
    let o = g.matmul(attn, v)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[n, l, inner])?;
    Ok((g.linear(o, w.wo, w.bo)?, attn))
}

impl<S: Scalar> Model<S> {
    /// Insert every parameter into `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<S>) -> Result<Bound> {
        let mut vars = IndexMap::with_capacity(self.params.len());
        for (k, t) in &self.params {
            vars.insert(k.clone(), g.param(t.clone())?);
        }
        Ok(Bound { vars })
    }

    /// Encoder output `[B, C, T', F']` for input `[B, 7, T, 64]`.
    pub fn encode<R: Rng + ?Sized>(&self, g: &mut Graph<S>, bound: &Bound, x: Var, rng: &mut R) -> Result<Var> {
        let mut ctx = Ctx { g, model: self, bound, rng, bn_stats: Vec::new(), capture: None };
        let mut z = x;
        for (i, &pool) in self.config.pooling.conv_pools().iter().enumerate() {
            z = ctx.conv_block(z, i, pool)?;
        }
        Ok(z)
    }

    /// Full network on input `[B, 7, T, 64]`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        x: Var,
        rng: &mut R,
        capture_attention: bool,
    ) -> Result<ForwardOutput<S>> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != crate::features::N_FEATURE_CHANNELS || s[3] != crate::features::N_MELS {
            return Err(CoreError::Data(format!("network input shape {s:?}, expected [B, 7, T, 64]")));
        }
        self.config.validate_frames(s[2])?;
        let mut ctx = Ctx { g, model: self, bound, rng, bn_stats: Vec::new(), capture: None };
        let mut z = x;
        for (i, &pool) in self.config.pooling.conv_pools().iter().enumerate() {
            z = ctx.conv_block(z, i, pool)?;
        }
        let encoded = (ctx.g.shape(z)[2], ctx.g.shape(z)[3]);
        let mut blocks = Vec::new();
        for blk in 0..self.config.n_cst {
            if capture_attention {
                ctx.capture = Some(BlockAttention { channel: None, spectral: None, temporal: None });
            }
            z = ctx.cst_block(z, blk)?;
            if let Some(c) = ctx.capture.take() {
                blocks.push(c);
            }
        }
        let output = ctx.head(z)?;
        let attention = capture_attention.then(|| AttentionMapBundle {
            blocks,
            batch: s[0],
            encoded,
            kernels: self.config.ule_kernels.clone(),
            channels: self.config.channels,
            heads: self.config.heads,
        });
        Ok(ForwardOutput { output, bn_stats: ctx.bn_stats, attention })
    }

    /// Local perception unit of block `blk` on `[B, C, T', F']`.
    pub fn lpu<R: Rng + ?Sized>(&self, g: &mut Graph<S>, bound: &Bound, z: Var, blk: usize, rng: &mut R) -> Result<Var> {
        Ctx { g, model: self, bound, rng, bn_stats: Vec::new(), capture: None }.lpu(z, blk)
    }

    /// One attention module (with residual and normalization) of block `blk`.
    pub fn attention<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        z: Var,
        blk: usize,
        domain: Domain,
        rng: &mut R,
    ) -> Result<Var> {
        let mut ctx = Ctx { g, model: self, bound, rng, bn_stats: Vec::new(), capture: None };
        match domain {
            Domain::Channel => ctx.channel_attention(z, blk),
            _ => ctx.axis_attention(z, blk, domain),
        }
    }

    /// Inverted residual feed-forward network of block `blk`.
    pub fn irffn<R: Rng + ?Sized>(&self, g: &mut Graph<S>, bound: &Bound, z: Var, blk: usize, rng: &mut R) -> Result<Var> {
        Ctx { g, model: self, bound, rng, bn_stats: Vec::new(), capture: None }.irffn(z, blk)
    }

    /// Evaluation-mode inference on a batch of equally long feature blocks.
    pub fn predict(&self, feats: &[&FeatureTensor]) -> Result<Vec<MultiAccdoa>> {
        Ok(self.predict_with_attention(feats, false)?.0)
    }

    pub fn predict_with_attention(
        &self,
        feats: &[&FeatureTensor],
        capture: bool,
    ) -> Result<(Vec<MultiAccdoa>, Option<AttentionMapBundle<S>>)> {
        let first = feats.first().ok_or_else(|| CoreError::EmptyInput("no feature blocks".into()))?;
        let t = first.frames();
        if feats.iter().any(|f| f.frames() != t) {
            return Err(CoreError::Data("feature blocks in one batch differ in length".into()));
        }
        let x = stack_features::<S>(feats)?;
        let mut g = Graph::new(Mode::Eval);
        let mut vars = IndexMap::with_capacity(self.params.len());
        for (k, p) in &self.params {
            vars.insert(k.clone(), g.constant(p.clone())?);
        }
        let bound = Bound { vars };
        let xv = g.constant(x)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.forward(&mut g, &bound, xv, &mut rng, capture)?;
        let y = g.value(out.output);
        let (frames, w) = (y.shape()[1], y.shape()[2]);
        let layout = self.config.layout();
        let mut res = Vec::with_capacity(feats.len());
        for bi in 0..feats.len() {
            let data = y.data()[bi * frames * w..(bi + 1) * frames * w].iter().map(|v| v.as_f64()).collect();
            res.push(MultiAccdoa::from_vec(layout, frames, data)?);
        }
        Ok((res, out.attention))
    }
}

/// Stack feature blocks into `[B, 7, T, 64]`.
pub fn stack_features<S: Scalar>(feats: &[&FeatureTensor]) -> Result<Tensor<S>> {
    let first = feats.first().ok_or_else(|| CoreError::EmptyInput("no feature blocks".into()))?;
    let mut shape = vec![feats.len()];
    shape.extend_from_slice(first.data.shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for f in feats {
        if f.data.shape() != first.data.shape() {
            return Err(CoreError::Data("feature blocks in one batch differ in shape".into()));
        }
        data.extend(f.data.data().iter().map(|&v| S::lit(v as f64)));
    }
    Ok(Tensor::new(shape, data)?)
}
