//! Generator, discriminator and auxiliary code network.
//!
//! The discriminator `D` and the auxiliary network `Q` share a feature
//! trunk; each adds its own head. Two architecture families exist: the
//! convolutional stack for 768- (and 1024-) dimensional embeddings and a
//! small dense stack for arbitrary dimensions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::Float;

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, Rng};

pub mod grad;
pub mod layers;

pub use grad::{backward, backward_with, BackwardOptions, Evaluation, GradMask, GradientSet, LossInputs, LossTag};
pub use layers::{Activation, Batch, Layer, Mode};

use layers::{BatchNorm, Cache, Conv1d, ConvTranspose1d, Linear};

/// Floating-point scalar the networks are generic over (`f32` for training
/// and persistence, `f64` for gradient verification).
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-layer forward caches of one [`Sequential`] pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, mut x: Batch<T>, mode: Mode) -> (Batch<T>, Tape<T>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(x, mode);
            caches.push(cache);
            x = y;
        }
        (x, Tape { caches })
    }

    pub fn infer(&self, x: Batch<T>, mode: Mode) -> Batch<T> {
        self.layers.iter().fold(x, |x, l| l.forward(x, mode).0)
    }

    /// Backpropagates `dy`. `grads` (if given) holds one buffer per tensor of
    /// [`Sequential::params`] and is accumulated into.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        dy: Batch<T>,
        mut grads: Option<&mut [Vec<T>]>,
        need_input: bool,
    ) -> Option<Batch<T>> {
        let counts: Vec<usize> = self.layers.iter().map(|l| l.params().len()).collect();
        let mut offset: usize = counts.iter().sum();
        let mut dy = dy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            offset -= counts[i];
            let g = grads.as_deref_mut().map(|g| &mut g[offset..offset + counts[i]]);
            let want_input = need_input || i > 0;
            {
                let dx = layer.backward(&tape.caches[i], &dy, g, want_input)?;
                dy = dx
            }
        }
        Some(dy)
    }

    pub fn commit_stats(&mut self, tape: &Tape<T>) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            layer.commit_stats(cache);
        }
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params().iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let kinds: &[&str] = match layer {
                Layer::BatchNorm(_) => &["gamma", "beta"],
                _ => &["weight", "bias"],
            };
            for k in kinds.iter().take(layer.params().len()) {
                names.push(format!("{prefix}.{i}.{}.{k}", layer.name()));
            }
        }
        names
    }

    /// Running mean and variance of every batch-norm layer, in layer order.
    pub fn buffers(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(b) => Some([b.running_mean.as_slice(), b.running_var.as_slice()]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::BatchNorm(b) => Some([&mut b.running_mean, &mut b.running_var]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Output `(channels, len)` for an input shape, or `None` on mismatch.
    pub fn out_shape(&self, channels: usize, len: usize) -> Option<(usize, usize)> {
        self.layers
            .iter()
            .try_fold((channels, len), |(c, l), layer| layer.out_shape(c, l))
    }

    /// `(channels, len)` after every layer that changes the shape.
    pub fn shape_chain(&self, channels: usize, len: usize) -> Vec<(usize, usize)> {
        let mut chain = vec![(channels, len)];
        let mut cur = (channels, len);
        for layer in &self.layers {
            if let Some(next) = layer.out_shape(cur.0, cur.1) {
                if next != cur {
                    chain.push(next);
                }
                cur = next;
            }
        }
        chain
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Preset {
    /// Transposed-convolution generator / convolution trunk for 768-dim embeddings.
    Conv768,
    /// The same stack with the outermost layers resized for 1024-dim embeddings.
    Conv1024,
    /// Dense layers for any embedding dimension.
    Mlp,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Conv768 => "conv768",
            Preset::Conv1024 => "conv1024",
            Preset::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv768" => Some(Preset::Conv768),
            "conv1024" => Some(Preset::Conv1024),
            "mlp" => Some(Preset::Mlp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ArchConfig {
    pub preset: Preset,
    pub embedding_dim: usize,
    /// Number of categorical code values `K`.
    pub codes: usize,
    /// Dimension `d` of the continuous latent `z`.
    pub latent_dim: usize,
    /// `false` drops the code input entirely (connected-prior baseline).
    pub disconnected: bool,
    #[cfg_attr(feature = "serde", serde(default))]
    pub mlp_widths: Option<Vec<usize>>,
}

impl ArchConfig {
    pub fn conv768(codes: usize, latent_dim: usize) -> Self {
        Self {
            preset: Preset::Conv768,
            embedding_dim: 768,
            codes,
            latent_dim,
            disconnected: true,
            mlp_widths: None,
        }
    }

    pub fn mlp(embedding_dim: usize, codes: usize, latent_dim: usize) -> Self {
        Self {
            preset: Preset::Mlp,
            embedding_dim,
            codes,
            latent_dim,
            disconnected: true,
            mlp_widths: None,
        }
    }

    pub fn connected(mut self) -> Self {
        self.disconnected = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.preset {
            Preset::Conv768 if self.embedding_dim != 768 => {
                return Err(Error::Config("conv768 requires embedding_dim = 768".into()))
            }
            Preset::Conv1024 if self.embedding_dim != 1024 => {
                return Err(Error::Config("conv1024 requires embedding_dim = 1024".into()))
            }
            Preset::Mlp if self.embedding_dim < 2 => {
                return Err(Error::Config("mlp requires embedding_dim >= 2".into()))
            }
            _ => {}
        }
        if self.codes == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("d must be at least 1".into()));
        }
        if let Some(w) = &self.mlp_widths {
            if w.is_empty() || w.contains(&0) {
                return Err(Error::Config("mlp_widths must be non-empty and positive".into()));
            }
        }
        Ok(())
    }

    /// Generator input width: `d`, plus `K` for the disconnected model.
    pub fn generator_input(&self) -> usize {
        self.latent_dim + if self.disconnected { self.codes } else { 0 }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.mlp_widths
            .clone()
            .unwrap_or_else(|| vec![4 * self.embedding_dim, 4 * self.embedding_dim])
    }

    /// Shape `(channels, len)` under which an embedding enters the trunk.
    pub fn embedding_shape(&self) -> (usize, usize) {
        match self.preset {
            Preset::Mlp => (self.embedding_dim, 1),
            _ => (1, self.embedding_dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub arch: ArchConfig,
    pub generator: Sequential<T>,
    /// Feature layers shared by `D` and `Q`.
    pub trunk: Sequential<T>,
    pub d_head: Sequential<T>,
    /// Absent for the connected baseline.
    pub q_head: Option<Sequential<T>>,
}

struct Init<'a> {
    rng: &'a mut Rng,
}

impl Init<'_> {
    fn normal<T: Real>(&mut self, len: usize, mean: f64) -> Vec<T> {
        (0..len)
            .map(|_| T::from_f64(mean + INIT_STD * rng::standard_normal(self.rng)))
            .collect()
    }

    fn linear<T: Real>(&mut self, fin: usize, fout: usize, bias: bool) -> Layer<T> {
        Layer::Linear(Linear {
            in_features: fin,
            out_features: fout,
            weight: self.normal(fin * fout, 0.0),
            bias: bias.then(|| vec![T::zero(); fout]),
        })
    }

    fn conv<T: Real>(&mut self, cin: usize, cout: usize, k: usize, s: usize, p: usize, bias: bool) -> Layer<T> {
        Layer::Conv(Conv1d {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: s,
            pad: p,
            weight: self.normal(cin * cout * k, 0.0),
            bias: bias.then(|| vec![T::zero(); cout]),
        })
    }

    fn conv_t<T: Real>(&mut self, cin: usize, cout: usize, k: usize, s: usize, p: usize, bias: bool) -> Layer<T> {
        Layer::ConvT(ConvTranspose1d {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: s,
            pad: p,
            weight: self.normal(cin * cout * k, 0.0),
            bias: bias.then(|| vec![T::zero(); cout]),
        })
    }

    fn batch_norm<T: Real>(&mut self, ch: usize) -> Layer<T> {
        Layer::BatchNorm(BatchNorm {
            channels: ch,
            gamma: self.normal(ch, 1.0),
            beta: vec![T::zero(); ch],
            running_mean: vec![T::zero(); ch],
            running_var: vec![T::one(); ch],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }
}

/// Generator channel widths of the convolutional stack.
pub const CONV_GEN_CHANNELS: [usize; 4] = [512, 384, 256, 128];
/// Trunk channel widths of the convolutional stack.
pub const CONV_TRUNK_CHANNELS: [usize; 5] = [128, 256, 384, 512, 768];
/// Trunk output length of the convolutional stack.
pub const CONV_TRUNK_LEN: usize = 16;

impl<T: Real> Network<T> {
    /// Builds a network with DCGAN-style initialization: weights ~ N(0, 0.02²),
    /// batch-norm scales ~ N(1, 0.02²), biases and shifts zero.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::seeded(rng::derive_seed(seed, 0x1417));
        let mut init = Init { rng: &mut rng };
        let lrelu = Layer::Act(Activation::LeakyRelu(LEAKY_SLOPE));
        let net = match arch.preset {
            Preset::Conv768 | Preset::Conv1024 => {
                // outermost (kernel, stride, pad): 768 via (5,3,1), 1024 via (4,4,0)
                let (k, s, p) = if arch.preset == Preset::Conv768 { (5, 3, 1) } else { (4, 4, 0) };
                let [g0, g1, g2, g3] = CONV_GEN_CHANNELS;
                let generator = Sequential::new(vec![
                    init.conv_t(arch.generator_input(), g0, 32, 1, 0, false),
                    init.batch_norm(g0),
                    Layer::Act(Activation::Relu),
                    init.conv_t(g0, g1, 4, 2, 1, false),
                    init.batch_norm(g1),
                    Layer::Act(Activation::Relu),
                    init.conv_t(g1, g2, 4, 2, 1, false),
                    init.batch_norm(g2),
                    Layer::Act(Activation::Relu),
                    init.conv_t(g2, g3, 4, 2, 1, false),
                    init.batch_norm(g3),
                    Layer::Act(Activation::Relu),
                    init.conv_t(g3, 1, k, s, p, true),
                    Layer::Act(Activation::Tanh),
                ]);
                let [t0, t1, t2, t3, t4] = CONV_TRUNK_CHANNELS;
                let trunk = Sequential::new(vec![
                    init.conv(1, t0, k, s, p, true),
                    lrelu.clone(),
                    init.conv(t0, t1, 4, 2, 1, false),
                    init.batch_norm(t1),
                    lrelu.clone(),
                    init.conv(t1, t2, 4, 2, 1, false),
                    init.batch_norm(t2),
                    lrelu.clone(),
                    init.conv(t2, t3, 4, 2, 1, false),
                    init.batch_norm(t3),
                    lrelu.clone(),
                    init.conv(t3, t4, 4, 2, 1, false),
                    init.batch_norm(t4),
                    lrelu,
                ]);
                let d_head = Sequential::new(vec![init.conv(t4, 1, CONV_TRUNK_LEN, 1, 0, true)]);
                let q_head = arch
                    .disconnected
                    .then(|| Sequential::new(vec![init.linear(t4 * CONV_TRUNK_LEN, arch.codes, true)]));
                Network {
                    arch: arch.clone(),
                    generator,
                    trunk,
                    d_head,
                    q_head,
                }
            }
            Preset::Mlp => {
                let widths = arch.widths();
                let mut g = Vec::new();
                let mut fin = arch.generator_input();
                for &w in &widths {
                    g.push(init.linear(fin, w, true));
                    g.push(Layer::Act(Activation::Relu));
                    fin = w;
                }
                g.push(init.linear(fin, arch.embedding_dim, true));
                g.push(Layer::Act(Activation::Tanh));
                let mut t = Vec::new();
                let mut fin = arch.embedding_dim;
                for &w in widths.iter().rev() {
                    t.push(init.linear(fin, w, true));
                    t.push(lrelu.clone());
                    fin = w;
                }
                let d_head = Sequential::new(vec![init.linear(fin, 1, true)]);
                let q_head = arch
                    .disconnected
                    .then(|| Sequential::new(vec![init.linear(fin, arch.codes, true)]));
                Network {
                    arch: arch.clone(),
                    generator: Sequential::new(g),
                    trunk: Sequential::new(t),
                    d_head,
                    q_head,
                }
            }
        };
        net.check_shapes()?;
        Ok(net)
    }

    /// Verifies that the layer stack realizes the configured shapes: the
    /// generator maps its input to one embedding, the trunk feeds both heads,
    /// and for the convolutional presets every intermediate length matches
    /// the reference table.
    pub fn check_shapes(&self) -> Result<()> {
        let arch = &self.arch;
        let (ec, el) = arch.embedding_shape();
        let gen_in = match arch.preset {
            Preset::Mlp => (arch.generator_input(), 1),
            _ => (arch.generator_input(), 1),
        };
        let out = self
            .generator
            .out_shape(gen_in.0, gen_in.1)
            .ok_or_else(|| Error::Config("generator layers do not chain".into()))?;
        if out.0 * out.1 != arch.embedding_dim {
            return Err(Error::Config(format!(
                "generator emits {}x{}, expected {} values",
                out.0, out.1, arch.embedding_dim
            )));
        }
        let feat = self
            .trunk
            .out_shape(ec, el)
            .ok_or_else(|| Error::Config("trunk layers do not chain".into()))?;
        if self.d_head.out_shape(feat.0, feat.1).map(|(c, l)| c * l) != Some(1) {
            return Err(Error::Config("discriminator head must emit one value".into()));
        }
        if let Some(q) = &self.q_head {
            if q.out_shape(feat.0, feat.1).map(|(c, l)| c * l) != Some(arch.codes) {
                return Err(Error::Config("Q head must emit K values".into()));
            }
        }
        if arch.preset != Preset::Mlp {
            let gen_chain: Vec<usize> = self.generator.shape_chain(gen_in.0, gen_in.1).iter().map(|s| s.1).collect();
            let trunk_chain: Vec<usize> = self.trunk.shape_chain(ec, el).iter().map(|s| s.1).collect();
            let (gen_expect, trunk_expect): (&[usize], &[usize]) = match arch.preset {
                Preset::Conv768 => (&[1, 32, 64, 128, 256, 768], &[768, 256, 128, 64, 32, 16]),
                _ => (&[1, 32, 64, 128, 256, 1024], &[1024, 256, 128, 64, 32, 16]),
            };
            if gen_chain != gen_expect || trunk_chain != trunk_expect {
                return Err(Error::Config(format!(
                    "convolutional length chain mismatch: generator {gen_chain:?}, trunk {trunk_chain:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn has_codes(&self) -> bool {
        self.q_head.is_some()
    }

    /// Packs `z` rows (`n × d`) and optional code indices into generator input.
    pub fn generator_input(&self, z: &[T], codes: Option<&[usize]>) -> Result<Batch<T>> {
        let d = self.arch.latent_dim;
        if !z.len().is_multiple_of(d) {
            return Err(Error::Dimension {
                context: "latent z",
                expected: d,
                got: z.len() % d,
            });
        }
        let n = z.len() / d;
        let width = self.arch.generator_input();
        let k = self.arch.codes;
        let mut data = vec![T::zero(); n * width];
        match (self.arch.disconnected, codes) {
            (true, Some(c)) => {
                check_dim("latent codes", n, c.len())?;
                for (s, &code) in c.iter().enumerate() {
                    if code >= k {
                        return Err(Error::Validation(format!("code {code} outside 0..{k}")));
                    }
                    data[s * width..s * width + d].copy_from_slice(&z[s * d..(s + 1) * d]);
                    data[s * width + d + code] = T::one();
                }
            }
            (false, None) => data.copy_from_slice(z),
            (true, None) => {
                return Err(Error::Validation("disconnected generator needs latent codes".into()))
            }
            (false, Some(_)) => {
                return Err(Error::Validation("connected generator takes no latent codes".into()))
            }
        }
        Ok(Batch::new(n, width, 1, data))
    }

    fn flatten_output(&self, out: Batch<T>) -> Batch<T> {
        let n = out.n;
        Batch::from_rows(n, self.arch.embedding_dim, out.data)
    }

    /// Embedding rows (`n × dim`) reshaped for the trunk.
    pub fn embedding_batch(&self, rows: &[T]) -> Result<Batch<T>> {
        let dim = self.arch.embedding_dim;
        if !rows.len().is_multiple_of(dim) {
            return Err(Error::Dimension {
                context: "embedding",
                expected: dim,
                got: rows.len() % dim,
            });
        }
        let (c, l) = self.arch.embedding_shape();
        Ok(Batch::new(rows.len() / dim, c, l, rows.to_vec()))
    }

    /// Runs the generator; returns `n × dim` rows.
    pub fn generate(&self, z: &[T], codes: Option<&[usize]>, mode: Mode) -> Result<(Batch<T>, Tape<T>)> {
        let input = self.generator_input(z, codes)?;
        let (out, tape) = self.generator.forward(input, mode);
        Ok((self.flatten_output(out), tape))
    }

    pub fn generator_forward(&self, z: &[T], code: Option<usize>, mode: Mode) -> Result<Vec<T>> {
        check_dim("latent z", self.arch.latent_dim, z.len())?;
        let codes = code.map(|c| [c]);
        let input = self.generator_input(z, codes.as_ref().map(|c| c.as_slice()))?;
        Ok(self.generator.infer(input, mode).data)
    }

    /// Discriminator logits (`n` values) for embedding rows.
    pub fn discriminator_logits(&self, rows: &[T], mode: Mode) -> Result<Vec<T>> {
        let feat = self.trunk.infer(self.embedding_batch(rows)?, mode);
        Ok(self.d_head.infer(feat, mode).data)
    }

    pub fn discriminator_forward(&self, t: &[T], mode: Mode) -> Result<T> {
        check_dim("embedding", self.arch.embedding_dim, t.len())?;
        Ok(sigmoid(self.discriminator_logits(t, mode)?[0]))
    }

    /// `Q(·|t)` rows (`n × K`) for embedding rows.
    pub fn q_batch(&self, rows: &[T], mode: Mode) -> Result<Vec<T>> {
        let q = self
            .q_head
            .as_ref()
            .ok_or_else(|| Error::Unsupported("connected model has no auxiliary network".into()))?;
        let feat = self.trunk.infer(self.embedding_batch(rows)?, mode);
        let mut logits = q.infer(feat, mode).data;
        for row in logits.chunks_exact_mut(self.arch.codes) {
            softmax_in_place(row);
        }
        Ok(logits)
    }

    pub fn q_forward(&self, t: &[T], mode: Mode) -> Result<Vec<T>> {
        check_dim("embedding", self.arch.embedding_dim, t.len())?;
        self.q_batch(t, mode)
    }

    pub fn commit_stats(&mut self, eval: &Evaluation<T>) {
        if let Some(tape) = &eval.generator_tape {
            self.generator.commit_stats(tape);
        }
        for tape in &eval.trunk_tapes {
            self.trunk.commit_stats(tape);
        }
    }

    pub fn zero_grads(&self) -> GradientSet<T> {
        GradientSet {
            generator: self.generator.zero_grads(),
            trunk: self.trunk.zero_grads(),
            d_head: self.d_head.zero_grads(),
            q_head: self.q_head.as_ref().map_or_else(Vec::new, Sequential::zero_grads),
            prior: Vec::new(),
        }
    }

    /// Converts every parameter and buffer to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        fn seq<T: Real, U: Real>(s: &Sequential<T>) -> Sequential<U> {
            let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.as_f64())).collect::<Vec<U>>();
            let layers = s
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Linear(l) => Layer::Linear(Linear {
                        in_features: l.in_features,
                        out_features: l.out_features,
                        weight: conv(&l.weight),
                        bias: l.bias.as_ref().map(conv),
                    }),
                    Layer::Conv(c) => Layer::Conv(Conv1d {
                        in_channels: c.in_channels,
                        out_channels: c.out_channels,
                        kernel: c.kernel,
                        stride: c.stride,
                        pad: c.pad,
                        weight: conv(&c.weight),
                        bias: c.bias.as_ref().map(conv),
                    }),
                    Layer::ConvT(c) => Layer::ConvT(ConvTranspose1d {
                        in_channels: c.in_channels,
                        out_channels: c.out_channels,
                        kernel: c.kernel,
                        stride: c.stride,
                        pad: c.pad,
                        weight: conv(&c.weight),
                        bias: c.bias.as_ref().map(conv),
                    }),
                    Layer::BatchNorm(b) => Layer::BatchNorm(BatchNorm {
                        channels: b.channels,
                        gamma: conv(&b.gamma),
                        beta: conv(&b.beta),
                        running_mean: conv(&b.running_mean),
                        running_var: conv(&b.running_var),
                        eps: b.eps,
                        momentum: b.momentum,
                    }),
                    Layer::Act(a) => Layer::Act(*a),
                })
                .collect();
            Sequential::new(layers)
        }
        Network {
            arch: self.arch.clone(),
            generator: seq(&self.generator),
            trunk: seq(&self.trunk),
            d_head: seq(&self.d_head),
            q_head: self.q_head.as_ref().map(seq),
        }
    }
}

pub fn sigmoid<T: Real>(a: T) -> T {
    T::one() / (T::one() + (-a).exp())
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let mut v = logits.to_vec();
    softmax_in_place(&mut v);
    v
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weight_shapes(s: &Sequential<f32>) -> Vec<(usize, usize, usize)> {
        s.layers
            .iter()
            .filter_map(|l| match l {
                Layer::ConvT(c) => Some((c.in_channels, c.out_channels, c.kernel)),
                Layer::Conv(c) => Some((c.out_channels, c.in_channels, c.kernel)),
                Layer::Linear(l) => Some((l.out_features, l.in_features, 1)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn conv768_layer_table() {
        let net = Network::<f32>::init(&ArchConfig::conv768(50, 20), 0).unwrap();
        assert_eq!(
            weight_shapes(&net.generator),
            vec![(70, 512, 32), (512, 384, 4), (384, 256, 4), (256, 128, 4), (128, 1, 5)]
        );
        assert_eq!(
            net.generator.shape_chain(70, 1),
            vec![(70, 1), (512, 32), (384, 64), (256, 128), (128, 256), (1, 768)]
        );
        assert_eq!(
            net.trunk.shape_chain(1, 768),
            vec![(1, 768), (128, 256), (256, 128), (384, 64), (512, 32), (768, 16)]
        );
        assert_eq!(weight_shapes(&net.d_head), vec![(1, 768, 16)]);
        assert_eq!(weight_shapes(net.q_head.as_ref().unwrap()), vec![(50, 768 * 16, 1)]);
        // batch norm exactly where the reference table marks it
        let bn = |s: &Sequential<f32>| {
            s.layers
                .iter()
                .filter_map(|l| match l {
                    Layer::BatchNorm(b) => Some(b.channels),
                    _ => None,
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(bn(&net.generator), vec![512, 384, 256, 128]);
        assert_eq!(bn(&net.trunk), vec![256, 384, 512, 768]);
    }

    #[test]
    fn conv1024_variant_chains() {
        let arch = ArchConfig {
            preset: Preset::Conv1024,
            embedding_dim: 1024,
            ..ArchConfig::conv768(10, 10)
        };
        let net = Network::<f32>::init(&arch, 0).unwrap();
        assert_eq!(net.generator.shape_chain(20, 1).last(), Some(&(1, 1024)));
        assert_eq!(net.trunk.shape_chain(1, 1024)[1], (128, 256));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut a = ArchConfig::conv768(50, 20);
        a.embedding_dim = 512;
        assert!(matches!(Network::<f32>::init(&a, 0), Err(Error::Config(_))));
        assert!(Network::<f32>::init(&ArchConfig::mlp(8, 0, 4), 0).is_err());
        assert!(Network::<f32>::init(&ArchConfig::mlp(8, 3, 0), 0).is_err());
        assert!(Network::<f32>::init(&ArchConfig::mlp(1, 3, 2), 0).is_err());
    }

    #[test]
    fn mlp_shapes_follow_widths() {
        let mut arch = ArchConfig::mlp(16, 4, 3);
        arch.mlp_widths = Some(vec![32, 24]);
        let net = Network::<f32>::init(&arch, 1).unwrap();
        assert_eq!(weight_shapes(&net.generator), vec![(32, 7, 1), (24, 32, 1), (16, 24, 1)]);
        assert_eq!(weight_shapes(&net.trunk), vec![(24, 16, 1), (32, 24, 1)]);
        assert_eq!(weight_shapes(&net.d_head), vec![(1, 32, 1)]);
        let default = Network::<f32>::init(&ArchConfig::mlp(16, 4, 3), 1).unwrap();
        assert_eq!(weight_shapes(&default.generator)[0], (64, 7, 1));
    }

    #[test]
    fn connected_generator_omits_codes() {
        let net = Network::<f32>::init(&ArchConfig::mlp(8, 5, 3).connected(), 2).unwrap();
        assert!(net.q_head.is_none());
        assert_eq!(weight_shapes(&net.generator)[0], (32, 3, 1));
        assert!(net.generator_forward(&[0.1, 0.2, 0.3], Some(0), Mode::Eval).is_err());
        assert_eq!(net.generator_forward(&[0.1, 0.2, 0.3], None, Mode::Eval).unwrap().len(), 8);
    }

    #[test]
    fn init_is_deterministic_and_dcgan_like() {
        let a = Network::<f32>::init(&ArchConfig::mlp(16, 4, 3), 9).unwrap();
        let b = Network::<f32>::init(&ArchConfig::mlp(16, 4, 3), 9).unwrap();
        let c = Network::<f32>::init(&ArchConfig::mlp(16, 4, 3), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = a.generator.params()[0];
        let mean = w.iter().map(|&x| f64::from(x)).sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(mean.abs() < 0.005 && (sd - 0.02).abs() < 0.003, "{mean} {sd}");
        assert!(a.generator.params()[1].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_parameters_give_indifferent_discriminator_and_uniform_q() {
        let mut net = Network::<f64>::init(&ArchConfig::mlp(6, 4, 2), 3).unwrap();
        for p in net.d_head.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        for p in net.q_head.as_mut().unwrap().params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let t = [0.3, -0.2, 0.9, 0.1, 0.0, -0.7];
        assert_eq!(net.discriminator_forward(&t, Mode::Eval).unwrap(), 0.5);
        assert_eq!(net.q_forward(&t, Mode::Eval).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn single_code_q_is_certain() {
        let net = Network::<f64>::init(&ArchConfig::mlp(4, 1, 2), 3).unwrap();
        assert_eq!(net.q_forward(&[0.5, 0.1, -0.3, 0.2], Mode::Eval).unwrap(), vec![1.0]);
    }

    #[test]
    fn conv768_forward_ranges() {
        let net = Network::<f32>::init(&ArchConfig::conv768(5, 4), 4).unwrap();
        let out = net.generator_forward(&[0.5, -1.0, 2.0, 0.1], Some(3), Mode::Eval).unwrap();
        assert_eq!(out.len(), 768);
        assert!(out.iter().all(|v| v.abs() < 1.0));
        let p = net.discriminator_forward(&out, Mode::Eval).unwrap();
        assert!(p > 0.0 && p < 1.0);
        let q = net.q_forward(&out, Mode::Eval).unwrap();
        assert!((q.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert_eq!(out, net.generator_forward(&[0.5, -1.0, 2.0, 0.1], Some(3), Mode::Eval).unwrap());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
