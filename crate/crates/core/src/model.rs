//! Convolutional generator mapping a sampled initial condition `[B,N]` to a
//! space-time field `[B,1,N,N]`.
//!
//! Layout: dense embedding to `C0` planes of `base x base`, a stack of
//! residual upsampling blocks (each doubles the extent), a pointwise head to
//! one channel and a sigmoid.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{batchnorm, kernels};
use crate::autodiff::{BatchNormState, BatchReducer, Graph, Mode, NodeId, Padding, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PDGNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub resolution: usize,
    #[serde(default = "default_base_resolution")]
    pub base_resolution: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_channel_floor")]
    pub channel_floor: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_base_resolution() -> usize {
    8
}
fn default_base_channels() -> usize {
    32
}
fn default_channel_floor() -> usize {
    8
}

impl GeneratorConfig {
    pub fn new(resolution: usize, seed: u64) -> Self {
        Self {
            resolution,
            base_resolution: default_base_resolution(),
            base_channels: default_base_channels(),
            channel_floor: default_channel_floor(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.resolution;
        if !n.is_power_of_two() || !(8..=1024).contains(&n) {
            return Err(Error::Config(format!(
                "resolution must be a power of two in [8, 1024], got {n}"
            )));
        }
        let b = self.base_resolution;
        if b < 3 || b > n || !n.is_multiple_of(b) || !(n / b).is_power_of_two() {
            return Err(Error::Config(format!(
                "resolution {n} must be base_resolution {b} times a power of two (base >= 3)"
            )));
        }
        if self.base_channels == 0 || self.channel_floor == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        (self.resolution / self.base_resolution).trailing_zeros() as usize
    }

    /// Output channels after `stage` blocks (stage 0 is the embedding).
    pub fn channels(&self, stage: usize) -> usize {
        if stage == 0 {
            return self.base_channels;
        }
        let halved = self.base_channels.checked_shr(stage as u32).unwrap_or(0);
        halved.max(self.channel_floor)
    }

    fn block_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.num_blocks())
            .map(|k| (self.channels(k), self.channels(k + 1)))
            .collect()
    }

    /// Shapes of every trainable tensor in flattening order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (n, b, c0) = (self.resolution, self.base_resolution, self.base_channels);
        let mut out = vec![vec![b * b * c0, n], vec![b * b * c0]];
        for (ci, co) in self.block_shapes() {
            out.push(vec![co, ci, 3, 3]);
            out.push(vec![co]);
            out.push(vec![co]);
            out.push(vec![co, co, 3, 3]);
            out.push(vec![co]);
            out.push(vec![co]);
            out.push(vec![co, ci]);
            out.push(vec![co]);
        }
        let last = self.channels(self.num_blocks());
        out.push(vec![1, last]);
        out.push(vec![1]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block<S> {
    conv1: Tensor<S>,
    bn1: BatchNormState<S>,
    conv2: Tensor<S>,
    bn2: BatchNormState<S>,
    skip_w: Tensor<S>,
    skip_b: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<S> {
    config: GeneratorConfig,
    embed_w: Tensor<S>,
    embed_b: Tensor<S>,
    blocks: Vec<Block<S>>,
    head_w: Tensor<S>,
    head_b: Tensor<S>,
}

/// Handles produced by [`Generator::build`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: NodeId,
    /// Parameter nodes in flattening order.
    pub params: Vec<NodeId>,
}

fn he_uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::from_f64(rng.random_range(-bound..bound)))
}

impl<S: Scalar> Generator<S> {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_init(config, |shape, fan_in| he_uniform(&mut rng, shape, fan_in))
    }

    /// Weights from `init(shape, fan_in)` in flattening order; biases zero.
    fn with_init(
        config: GeneratorConfig,
        mut init: impl FnMut(&[usize], usize) -> Tensor<S>,
    ) -> Result<Self> {
        config.validate()?;
        let (n, b, c0) = (config.resolution, config.base_resolution, config.base_channels);
        let embed_w = init(&[b * b * c0, n], n);
        let embed_b = Tensor::zeros(&[b * b * c0]);
        let blocks = config
            .block_shapes()
            .into_iter()
            .map(|(ci, co)| Block {
                conv1: init(&[co, ci, 3, 3], ci * 9),
                bn1: BatchNormState::new(co),
                conv2: init(&[co, co, 3, 3], co * 9),
                bn2: BatchNormState::new(co),
                skip_w: init(&[co, ci], ci),
                skip_b: Tensor::zeros(&[co]),
            })
            .collect();
        let last = config.channels(config.num_blocks());
        let head_w = init(&[1, last], last);
        Ok(Self {
            config,
            embed_w,
            embed_b,
            blocks,
            head_w,
            head_b: Tensor::zeros(&[1]),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.embed_w, &self.embed_b];
        for blk in &self.blocks {
            out.extend([
                &blk.conv1,
                &blk.bn1.gamma,
                &blk.bn1.beta,
                &blk.conv2,
                &blk.bn2.gamma,
                &blk.bn2.beta,
                &blk.skip_w,
                &blk.skip_b,
            ]);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.embed_w, &mut self.embed_b];
        for blk in &mut self.blocks {
            out.push(&mut blk.conv1);
            out.push(&mut blk.bn1.gamma);
            out.push(&mut blk.bn1.beta);
            out.push(&mut blk.conv2);
            out.push(&mut blk.bn2.gamma);
            out.push(&mut blk.bn2.beta);
            out.push(&mut blk.skip_w);
            out.push(&mut blk.skip_b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// All trainable parameters in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensors() {
            out.extend(t.data().iter().map(|v| v.as_f64()));
        }
        out
    }

    /// Inverse of [`Generator::flatten`]; values are rounded to `S`.
    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(
                "unflatten",
                format!(
                    "expected {} parameters, got {}",
                    self.param_count(),
                    values.len()
                ),
            ));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            for (d, &v) in t.data_mut().iter_mut().zip(&values[off..off + n]) {
                *d = S::from_f64(v);
            }
            off += n;
        }
        Ok(())
    }

    fn bn_states(&self) -> impl Iterator<Item = &BatchNormState<S>> {
        self.blocks.iter().flat_map(|b| [&b.bn1, &b.bn2])
    }

    fn bn_states_mut(&mut self) -> impl Iterator<Item = &mut BatchNormState<S>> {
        self.blocks.iter_mut().flat_map(|b| [&mut b.bn1, &mut b.bn2])
    }

    pub fn bn_layers(&self) -> usize {
        2 * self.blocks.len()
    }

    /// Running `(mean, var)` of every batch-norm layer.
    pub fn bn_stats(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.bn_states()
            .map(|s| {
                (
                    s.running_mean.iter().map(|v| v.as_f64()).collect(),
                    s.running_var.iter().map(|v| v.as_f64()).collect(),
                )
            })
            .collect()
    }

    pub fn set_bn_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        if stats.len() != self.bn_layers() {
            return Err(Error::shape(
                "set_bn_stats",
                format!("expected {} layers, got {}", self.bn_layers(), stats.len()),
            ));
        }
        for (st, (m, v)) in self.bn_states().zip(stats) {
            if m.len() != st.channels() || v.len() != st.channels() {
                return Err(Error::shape("set_bn_stats", "channel count mismatch"));
            }
        }
        for (st, (m, v)) in self.bn_states_mut().zip(stats) {
            st.running_mean = m.iter().map(|&x| S::from_f64(x)).collect();
            st.running_var = v.iter().map(|&x| S::from_f64(x)).collect();
        }
        Ok(())
    }

    pub fn set_bn_momentum(&mut self, momentum: f64) -> Result<()> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Config(format!(
                "batch-norm momentum must lie in (0, 1], got {momentum}"
            )));
        }
        for st in self.bn_states_mut() {
            st.momentum = momentum;
        }
        Ok(())
    }

    fn bn_momentum(&self) -> f64 {
        self.bn_states()
            .next()
            .map_or(crate::autodiff::batchnorm::DEFAULT_MOMENTUM, |s| s.momentum)
    }

    /// Records the forward pass on `g`. `ic` must be `[B,N]`. With `sync`,
    /// train-mode batch statistics are reduced through `reducer`, which must
    /// then also be passed to [`Graph::backward`].
    pub fn build(
        &mut self,
        g: &mut Graph<S>,
        ic: NodeId,
        mode: Mode,
        sync: bool,
        reducer: &mut dyn BatchReducer,
    ) -> Result<ForwardPass> {
        let n = self.config.resolution;
        let base = self.config.base_resolution;
        let c0 = self.config.base_channels;
        match g.value(ic).shape() {
            &[_, w] if w == n => {}
            other => {
                return Err(Error::shape(
                    "generator",
                    format!("initial conditions must be [B,{n}], got {other:?}"),
                ))
            }
        }
        let b = g.value(ic).batch();
        let params: Vec<NodeId> = self
            .tensors()
            .into_iter()
            .cloned()
            .collect::<Vec<_>>()
            .into_iter()
            .map(|t| g.param(t))
            .collect();

        let e = g.dense(ic, params[0], Some(params[1]))?;
        let e = g.relu(e)?;
        let mut x = g.reshape(e, &[b, c0, base, base])?;
        for (k, blk) in self.blocks.iter_mut().enumerate() {
            let p = &params[2 + 8 * k..2 + 8 * (k + 1)];
            let up = g.upsample2x(x)?;
            let h = g.conv2d(up, p[0], Padding::Same)?;
            let h = g.batchnorm(h, p[1], p[2], &mut blk.bn1, mode, sync, reducer)?;
            let h = g.relu(h)?;
            let h = g.conv2d(h, p[3], Padding::Same)?;
            let h = g.batchnorm(h, p[4], p[5], &mut blk.bn2, mode, sync, reducer)?;
            let s = g.conv1x1(up, p[6], Some(p[7]))?;
            let sum = g.add(h, s)?;
            x = g.relu(sum)?;
        }
        let last = params.len();
        let head = g.conv1x1(x, params[last - 2], Some(params[last - 1]))?;
        let output = g.sigmoid(head)?;
        Ok(ForwardPass { output, params })
    }

    /// Eval-mode forward pass. Computes the same values as [`Generator::build`]
    /// in [`Mode::Eval`] without recording a graph.
    pub fn infer(&self, ic: &Tensor<S>) -> Result<Tensor<S>> {
        let n = self.config.resolution;
        let base = self.config.base_resolution;
        let c0 = self.config.base_channels;
        let b = match ic.shape() {
            &[b, w] if w == n => b,
            other => {
                return Err(Error::shape(
                    "generator",
                    format!("initial conditions must be [B,{n}], got {other:?}"),
                ))
            }
        };
        let finite = |name: &str, v: &[S]| -> Result<()> {
            let ok = v.chunks(256).all(|c| c.iter().fold(true, |ok, x| ok & x.is_finite()));
            if ok {
                Ok(())
            } else {
                Err(Error::NonFinite(format!("output of {name}")))
            }
        };
        finite("input", ic.data())?;
        let mut x = kernels::dense_forward(
            ic.data(),
            b,
            n,
            self.embed_w.data(),
            c0 * base * base,
            Some(self.embed_b.data()),
        );
        x.iter_mut().for_each(|v| *v = kernels::relu(*v));
        finite("dense", &x)?;
        let (mut c, mut h) = (c0, base);
        for blk in &self.blocks {
            let co = blk.conv1.shape()[0];
            let up = kernels::upsample2x_batch(&x, b, c, h, h);
            h *= 2;
            let plane = h * h;
            let mut y = kernels::conv3x3_forward(&up, b, c, h, h, blk.conv1.data(), co, Padding::Same);
            finite("conv2d", &y)?;
            batchnorm::eval_in_place(&mut y, co, plane, blk.bn1.gamma.data(), blk.bn1.beta.data(), &blk.bn1)?;
            y.iter_mut().for_each(|v| *v = kernels::relu(*v));
            finite("batchnorm", &y)?;
            let mut y = kernels::conv3x3_forward(&y, b, co, h, h, blk.conv2.data(), co, Padding::Same);
            finite("conv2d", &y)?;
            batchnorm::eval_in_place(&mut y, co, plane, blk.bn2.gamma.data(), blk.bn2.beta.data(), &blk.bn2)?;
            finite("batchnorm", &y)?;
            let skip = kernels::conv1x1_forward(&up, b, c, plane, blk.skip_w.data(), co, Some(blk.skip_b.data()));
            finite("conv1x1", &skip)?;
            for (v, s) in y.iter_mut().zip(&skip) {
                *v = kernels::relu(*v + *s);
            }
            finite("add", &y)?;
            x = y;
            c = co;
        }
        let mut out = kernels::conv1x1_forward(&x, b, c, h * h, self.head_w.data(), 1, Some(self.head_b.data()));
        out.iter_mut().for_each(|v| *v = kernels::sigmoid(*v));
        finite("sigmoid", &out)?;
        Tensor::new(vec![b, 1, n, n], out)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(S::PRECISION.tag());
        let c = &self.config;
        for v in [c.resolution, c.base_resolution, c.base_channels, c.channel_floor] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        buf.extend_from_slice(&c.seed.to_le_bytes());
        buf.extend_from_slice(&self.bn_momentum().to_le_bytes());
        let params = self.flatten();
        buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for v in params {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let stats = self.bn_stats();
        buf.extend_from_slice(&(stats.len() as u64).to_le_bytes());
        for (m, v) in stats {
            buf.extend_from_slice(&(m.len() as u64).to_le_bytes());
            for x in m.iter().chain(&v) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Decodes a checkpoint held in memory.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a generator checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(cur.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let tag = cur.take(1)?[0];
        let prec = Precision::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("unknown precision tag {tag}")))?;
        if prec != S::PRECISION {
            return Err(Error::Format(format!(
                "checkpoint holds {prec:?} parameters, requested {:?}",
                S::PRECISION
            )));
        }
        let config = GeneratorConfig {
            resolution: cur.usize()?,
            base_resolution: cur.usize()?,
            base_channels: cur.usize()?,
            channel_floor: cur.usize()?,
            seed: cur.u64()?,
        };
        let momentum = cur.f64()?;
        let mut gen = Generator::with_init(config, |shape, _| Tensor::zeros(shape))?;
        let count = cur.usize()?;
        if count != gen.param_count() {
            return Err(Error::Format(format!(
                "checkpoint stores {count} parameters, config implies {}",
                gen.param_count()
            )));
        }
        for t in gen.tensors_mut() {
            let raw = cur.take(t.len() * 8)?;
            for (d, c) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *d = S::from_f64(f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
            }
        }
        let layers = cur.usize()?;
        let mut stats = Vec::with_capacity(layers.min(1 << 16));
        for _ in 0..layers {
            let ch = cur.usize()?;
            let m = cur.f64s(ch)?;
            let v = cur.f64s(ch)?;
            stats.push((m, v));
        }
        gen.set_bn_stats(&stats)?;
        gen.set_bn_momentum(momentum)?;
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(gen)
    }
}

/// Reads the precision tag of a checkpoint without decoding it.
pub fn checkpoint_precision(bytes: &[u8]) -> Result<Precision> {
    if bytes.len() < 13 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a generator checkpoint (bad magic)".into()));
    }
    Precision::from_tag(bytes[12])
        .ok_or_else(|| Error::Format(format!("unknown precision tag {}", bytes[12])))
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn array<const K: usize>(&mut self) -> Result<[u8; K]> {
        let mut a = [0u8; K];
        a.copy_from_slice(self.take(K)?);
        Ok(a)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format("length overflows usize".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}
