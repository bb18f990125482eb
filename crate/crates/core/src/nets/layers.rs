//! Dense, 1-D convolution, transposed 1-D convolution, batch normalization
//! and pointwise activations, each with an exact backward pass.
//!
//! Activations flow as [`Batch`] values shaped `n × channels × len`. Dense
//! layers flatten `channels × len` and produce `len = 1`.

use alloc::vec;
use alloc::vec::Vec;

use super::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub n: usize,
    pub channels: usize,
    pub len: usize,
    pub data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(n: usize, channels: usize, len: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), n * channels * len);
        Self {
            n,
            channels,
            len,
            data,
        }
    }

    pub fn zeros(n: usize, channels: usize, len: usize) -> Self {
        Self::new(n, channels, len, vec![T::zero(); n * channels * len])
    }

    /// Rows of features, one per sample.
    pub fn from_rows(n: usize, features: usize, data: Vec<T>) -> Self {
        Self::new(n, features, 1, data)
    }

    pub fn features(&self) -> usize {
        self.channels * self.len
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let f = self.features();
        &self.data[i * f..(i + 1) * f]
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm layers.
    Train,
    /// Running statistics in batch-norm layers.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `out × in`
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out × in × kernel`
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose1d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `in × out × kernel`
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Linear(Linear<T>),
    Conv(Conv1d<T>),
    ConvT(ConvTranspose1d<T>),
    BatchNorm(BatchNorm<T>),
    Act(Activation),
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

pub fn conv_transpose_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((len.checked_sub(1)?) * stride + kernel).checked_sub(2 * pad)
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    Input(Batch<T>),
    Norm {
        xhat: Vec<T>,
        /// Per-channel `1/sqrt(var + eps)` of the statistics used.
        inv_std: Vec<T>,
        mode: Mode,
        /// Batch statistics (train mode), for running-stat updates.
        mean: Vec<T>,
        var: Vec<T>,
        count: usize,
    },
    /// Activation output (and input for leaky units).
    Act { input: Batch<T>, output: Batch<T> },
}

impl<T: Real> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Conv(_) => "conv1d",
            Layer::ConvT(_) => "conv_transpose1d",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Act(_) => "activation",
        }
    }

    /// Trainable tensors in a fixed order (weight, bias / gamma, beta).
    pub fn params(&self) -> Vec<&[T]> {
        match self {
            Layer::Linear(l) => weight_bias(&l.weight, &l.bias),
            Layer::Conv(l) => weight_bias(&l.weight, &l.bias),
            Layer::ConvT(l) => weight_bias(&l.weight, &l.bias),
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Act(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        fn wb<'a, T>(w: &'a mut Vec<T>, b: &'a mut Option<Vec<T>>) -> Vec<&'a mut Vec<T>> {
            let mut v = vec![w];
            if let Some(b) = b.as_mut() {
                v.push(b);
            }
            v
        }
        match self {
            Layer::Linear(l) => wb(&mut l.weight, &mut l.bias),
            Layer::Conv(l) => wb(&mut l.weight, &mut l.bias),
            Layer::ConvT(l) => wb(&mut l.weight, &mut l.bias),
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Act(_) => Vec::new(),
        }
    }

    /// Output `(channels, len)` for an input of `(channels, len)`.
    pub fn out_shape(&self, channels: usize, len: usize) -> Option<(usize, usize)> {
        match self {
            Layer::Linear(l) => (channels * len == l.in_features).then_some((l.out_features, 1)),
            Layer::Conv(c) => {
                if channels != c.in_channels {
                    return None;
                }
                conv_out_len(len, c.kernel, c.stride, c.pad).map(|l| (c.out_channels, l))
            }
            Layer::ConvT(c) => {
                if channels != c.in_channels {
                    return None;
                }
                conv_transpose_out_len(len, c.kernel, c.stride, c.pad).map(|l| (c.out_channels, l))
            }
            Layer::BatchNorm(b) => (channels == b.channels).then_some((channels, len)),
            Layer::Act(_) => Some((channels, len)),
        }
    }

    pub fn forward(&self, x: Batch<T>, mode: Mode) -> (Batch<T>, Cache<T>) {
        match self {
            Layer::Linear(l) => {
                let y = linear_forward(l, &x);
                (y, Cache::Input(x))
            }
            Layer::Conv(c) => {
                let y = conv_forward(c, &x);
                (y, Cache::Input(x))
            }
            Layer::ConvT(c) => {
                let y = conv_t_forward(c, &x);
                (y, Cache::Input(x))
            }
            Layer::BatchNorm(b) => batch_norm_forward(b, x, mode),
            Layer::Act(a) => {
                let mut y = x.clone();
                for v in &mut y.data {
                    *v = activate(*a, *v);
                }
                (y.clone(), Cache::Act { input: x, output: y })
            }
        }
    }

    /// Propagates `dy` back through the layer. Parameter gradients are
    /// accumulated into `grads` (one buffer per tensor of [`Layer::params`])
    /// when given; the input gradient is returned when `need_input` is set.
    pub fn backward(
        &self,
        cache: &Cache<T>,
        dy: &Batch<T>,
        grads: Option<&mut [Vec<T>]>,
        need_input: bool,
    ) -> Option<Batch<T>> {
        match (self, cache) {
            (Layer::Linear(l), Cache::Input(x)) => linear_backward(l, x, dy, grads, need_input),
            (Layer::Conv(c), Cache::Input(x)) => conv_backward(c, x, dy, grads, need_input),
            (Layer::ConvT(c), Cache::Input(x)) => conv_t_backward(c, x, dy, grads, need_input),
            (Layer::BatchNorm(b), cache) => batch_norm_backward(b, cache, dy, grads, need_input),
            (Layer::Act(a), Cache::Act { input, output }) => need_input.then(|| {
                let mut dx = dy.clone();
                for ((g, &xi), &yi) in dx.data.iter_mut().zip(&input.data).zip(&output.data) {
                    *g = *g * activation_derivative(*a, xi, yi);
                }
                dx
            }),
            _ => unreachable!("cache does not belong to this layer"),
        }
    }

    /// Folds batch statistics from a train-mode pass into the running estimates.
    pub fn commit_stats(&mut self, cache: &Cache<T>) {
        if let (
            Layer::BatchNorm(b),
            Cache::Norm {
                mode: Mode::Train,
                mean,
                var,
                count,
                ..
            },
        ) = (self, cache)
        {
            let m = T::from_f64(b.momentum);
            let keep = T::one() - m;
            let unbias = if *count > 1 {
                T::from_f64(*count as f64 / (*count as f64 - 1.0))
            } else {
                T::one()
            };
            for c in 0..b.channels {
                b.running_mean[c] = keep * b.running_mean[c] + m * mean[c];
                b.running_var[c] = keep * b.running_var[c] + m * var[c] * unbias;
            }
        }
    }
}

fn weight_bias<'a, T>(w: &'a [T], b: &'a Option<Vec<T>>) -> Vec<&'a [T]> {
    let mut v = vec![w];
    if let Some(b) = b {
        v.push(b.as_slice());
    }
    v
}

/// `tanh`, kept strictly inside `(-1, 1)` at the working precision.
pub fn bounded_tanh<T: Real>(x: T) -> T {
    let limit = T::one() - T::epsilon();
    x.tanh().max(-limit).min(limit)
}

pub fn activate<T: Real>(a: Activation, x: T) -> T {
    match a {
        Activation::Identity => x,
        Activation::Relu => x.max(T::zero()),
        Activation::LeakyRelu(slope) => {
            if x > T::zero() {
                x
            } else {
                x * T::from_f64(slope)
            }
        }
        Activation::Tanh => bounded_tanh(x),
    }
}

fn activation_derivative<T: Real>(a: Activation, x: T, y: T) -> T {
    match a {
        Activation::Identity => T::one(),
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::LeakyRelu(slope) => {
            if x > T::zero() {
                T::one()
            } else {
                T::from_f64(slope)
            }
        }
        Activation::Tanh => T::one() - y * y,
    }
}

fn linear_forward<T: Real>(l: &Linear<T>, x: &Batch<T>) -> Batch<T> {
    let (fi, fo) = (l.in_features, l.out_features);
    let mut y = Batch::zeros(x.n, fo, 1);
    for s in 0..x.n {
        let xs = x.sample(s);
        let ys = &mut y.data[s * fo..(s + 1) * fo];
        for (o, out) in ys.iter_mut().enumerate() {
            let w = &l.weight[o * fi..(o + 1) * fi];
            let mut acc = l.bias.as_ref().map_or(T::zero(), |b| b[o]);
            for (wi, xi) in w.iter().zip(xs) {
                acc = acc + *wi * *xi;
            }
            *out = acc;
        }
    }
    y
}

fn linear_backward<T: Real>(
    l: &Linear<T>,
    x: &Batch<T>,
    dy: &Batch<T>,
    grads: Option<&mut [Vec<T>]>,
    need_input: bool,
) -> Option<Batch<T>> {
    let (fi, fo) = (l.in_features, l.out_features);
    if let Some(g) = grads {
        let (gw, rest) = g.split_at_mut(1);
        for s in 0..x.n {
            let xs = x.sample(s);
            let ds = &dy.data[s * fo..(s + 1) * fo];
            for (o, &d) in ds.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                let row = &mut gw[0][o * fi..(o + 1) * fi];
                for (gwi, xi) in row.iter_mut().zip(xs) {
                    *gwi = *gwi + d * *xi;
                }
                if let Some(gb) = rest.first_mut() {
                    gb[o] = gb[o] + d;
                }
            }
        }
    }
    need_input.then(|| {
        let mut dx = Batch::zeros(x.n, x.channels, x.len);
        for s in 0..x.n {
            let ds = &dy.data[s * fo..(s + 1) * fo];
            let dxs = &mut dx.data[s * fi..(s + 1) * fi];
            for (o, &d) in ds.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                let w = &l.weight[o * fi..(o + 1) * fi];
                for (g, wi) in dxs.iter_mut().zip(w) {
                    *g = *g + d * *wi;
                }
            }
        }
        dx
    })
}

/// Input position read by output `l` through tap `k`, if inside the signal.
#[inline]
fn tap(l: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    (l * stride + k).checked_sub(pad).filter(|&p| p < len)
}

fn conv_forward<T: Real>(c: &Conv1d<T>, x: &Batch<T>) -> Batch<T> {
    let lin = x.len;
    let lout = conv_out_len(lin, c.kernel, c.stride, c.pad).expect("conv shape checked at build");
    let (ci, co, kk) = (c.in_channels, c.out_channels, c.kernel);
    let mut y = Batch::zeros(x.n, co, lout);
    for s in 0..x.n {
        let xs = x.sample(s);
        let ys = &mut y.data[s * co * lout..(s + 1) * co * lout];
        for o in 0..co {
            let b = c.bias.as_ref().map_or(T::zero(), |b| b[o]);
            for l in 0..lout {
                let mut acc = b;
                for i in 0..ci {
                    let w = &c.weight[(o * ci + i) * kk..(o * ci + i + 1) * kk];
                    let xi = &xs[i * lin..(i + 1) * lin];
                    for (k, wk) in w.iter().enumerate() {
                        if let Some(p) = tap(l, k, c.stride, c.pad, lin) {
                            acc = acc + *wk * xi[p];
                        }
                    }
                }
                ys[o * lout + l] = acc;
            }
        }
    }
    y
}

fn conv_backward<T: Real>(
    c: &Conv1d<T>,
    x: &Batch<T>,
    dy: &Batch<T>,
    grads: Option<&mut [Vec<T>]>,
    need_input: bool,
) -> Option<Batch<T>> {
    let (lin, lout) = (x.len, dy.len);
    let (ci, co, kk) = (c.in_channels, c.out_channels, c.kernel);
    if let Some(g) = grads {
        let (gw, rest) = g.split_at_mut(1);
        for s in 0..x.n {
            let xs = x.sample(s);
            let ds = dy.sample(s);
            for o in 0..co {
                for l in 0..lout {
                    let d = ds[o * lout + l];
                    if d == T::zero() {
                        continue;
                    }
                    if let Some(gb) = rest.first_mut() {
                        gb[o] = gb[o] + d;
                    }
                    for i in 0..ci {
                        let gwr = &mut gw[0][(o * ci + i) * kk..(o * ci + i + 1) * kk];
                        for (k, g) in gwr.iter_mut().enumerate() {
                            if let Some(p) = tap(l, k, c.stride, c.pad, lin) {
                                *g = *g + d * xs[i * lin + p];
                            }
                        }
                    }
                }
            }
        }
    }
    need_input.then(|| {
        let mut dx = Batch::zeros(x.n, ci, lin);
        for s in 0..x.n {
            let ds = dy.sample(s);
            let dxs = &mut dx.data[s * ci * lin..(s + 1) * ci * lin];
            for o in 0..co {
                for l in 0..lout {
                    let d = ds[o * lout + l];
                    if d == T::zero() {
                        continue;
                    }
                    for i in 0..ci {
                        let w = &c.weight[(o * ci + i) * kk..(o * ci + i + 1) * kk];
                        for (k, wk) in w.iter().enumerate() {
                            if let Some(p) = tap(l, k, c.stride, c.pad, lin) {
                                dxs[i * lin + p] = dxs[i * lin + p] + d * *wk;
                            }
                        }
                    }
                }
            }
        }
        dx
    })
}

fn conv_t_forward<T: Real>(c: &ConvTranspose1d<T>, x: &Batch<T>) -> Batch<T> {
    let lin = x.len;
    let lout =
        conv_transpose_out_len(lin, c.kernel, c.stride, c.pad).expect("conv shape checked at build");
    let (ci, co, kk) = (c.in_channels, c.out_channels, c.kernel);
    let mut y = Batch::zeros(x.n, co, lout);
    for s in 0..x.n {
        let xs = x.sample(s);
        let ys = &mut y.data[s * co * lout..(s + 1) * co * lout];
        if let Some(b) = &c.bias {
            for o in 0..co {
                ys[o * lout..(o + 1) * lout].iter_mut().for_each(|v| *v = b[o]);
            }
        }
        for i in 0..ci {
            for l in 0..lin {
                let xv = xs[i * lin + l];
                if xv == T::zero() {
                    continue;
                }
                for o in 0..co {
                    let w = &c.weight[(i * co + o) * kk..(i * co + o + 1) * kk];
                    for (k, wk) in w.iter().enumerate() {
                        if let Some(p) = tap(l, k, c.stride, c.pad, lout) {
                            ys[o * lout + p] = ys[o * lout + p] + xv * *wk;
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_t_backward<T: Real>(
    c: &ConvTranspose1d<T>,
    x: &Batch<T>,
    dy: &Batch<T>,
    grads: Option<&mut [Vec<T>]>,
    need_input: bool,
) -> Option<Batch<T>> {
    let (lin, lout) = (x.len, dy.len);
    let (ci, co, kk) = (c.in_channels, c.out_channels, c.kernel);
    if let Some(g) = grads {
        let (gw, rest) = g.split_at_mut(1);
        for s in 0..x.n {
            let xs = x.sample(s);
            let ds = dy.sample(s);
            if let Some(gb) = rest.first_mut() {
                for o in 0..co {
                    for l in 0..lout {
                        gb[o] = gb[o] + ds[o * lout + l];
                    }
                }
            }
            for i in 0..ci {
                for l in 0..lin {
                    let xv = xs[i * lin + l];
                    if xv == T::zero() {
                        continue;
                    }
                    for o in 0..co {
                        let gwr = &mut gw[0][(i * co + o) * kk..(i * co + o + 1) * kk];
                        for (k, g) in gwr.iter_mut().enumerate() {
                            if let Some(p) = tap(l, k, c.stride, c.pad, lout) {
                                *g = *g + xv * ds[o * lout + p];
                            }
                        }
                    }
                }
            }
        }
    }
    need_input.then(|| {
        let mut dx = Batch::zeros(x.n, ci, lin);
        for s in 0..x.n {
            let ds = dy.sample(s);
            let dxs = &mut dx.data[s * ci * lin..(s + 1) * ci * lin];
            for i in 0..ci {
                for l in 0..lin {
                    let mut acc = T::zero();
                    for o in 0..co {
                        let w = &c.weight[(i * co + o) * kk..(i * co + o + 1) * kk];
                        for (k, wk) in w.iter().enumerate() {
                            if let Some(p) = tap(l, k, c.stride, c.pad, lout) {
                                acc = acc + *wk * ds[o * lout + p];
                            }
                        }
                    }
                    dxs[i * lin + l] = acc;
                }
            }
        }
        dx
    })
}

fn batch_norm_forward<T: Real>(b: &BatchNorm<T>, x: Batch<T>, mode: Mode) -> (Batch<T>, Cache<T>) {
    let (n, ch, len) = (x.n, x.channels, x.len);
    let count = n * len;
    let eps = T::from_f64(b.eps);
    let mut mean = vec![T::zero(); ch];
    let mut var = vec![T::zero(); ch];
    let (use_mean, use_var) = match mode {
        Mode::Train => {
            let inv = T::one() / T::from_f64(count.max(1) as f64);
            for c in 0..ch {
                let mut acc = T::zero();
                for s in 0..n {
                    for v in &x.data[(s * ch + c) * len..(s * ch + c + 1) * len] {
                        acc = acc + *v;
                    }
                }
                mean[c] = acc * inv;
                let mut acc = T::zero();
                for s in 0..n {
                    for v in &x.data[(s * ch + c) * len..(s * ch + c + 1) * len] {
                        let d = *v - mean[c];
                        acc = acc + d * d;
                    }
                }
                var[c] = acc * inv;
            }
            (mean.clone(), var.clone())
        }
        Mode::Eval => (b.running_mean.clone(), b.running_var.clone()),
    };
    let inv_std: Vec<T> = use_var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = x.data;
    let mut y = vec![T::zero(); xhat.len()];
    for s in 0..n {
        for c in 0..ch {
            let range = (s * ch + c) * len..(s * ch + c + 1) * len;
            for (xh, yv) in xhat[range.clone()].iter_mut().zip(&mut y[range]) {
                *xh = (*xh - use_mean[c]) * inv_std[c];
                *yv = b.gamma[c] * *xh + b.beta[c];
            }
        }
    }
    (
        Batch::new(n, ch, len, y),
        Cache::Norm {
            xhat,
            inv_std,
            mode,
            mean,
            var,
            count,
        },
    )
}

fn batch_norm_backward<T: Real>(
    b: &BatchNorm<T>,
    cache: &Cache<T>,
    dy: &Batch<T>,
    grads: Option<&mut [Vec<T>]>,
    need_input: bool,
) -> Option<Batch<T>> {
    let Cache::Norm {
        xhat,
        inv_std,
        mode,
        count,
        ..
    } = cache
    else {
        unreachable!("batch-norm backward needs a norm cache")
    };
    let (n, ch, len) = (dy.n, dy.channels, dy.len);
    let mut sum_dy = vec![T::zero(); ch];
    let mut sum_dy_xhat = vec![T::zero(); ch];
    for s in 0..n {
        for c in 0..ch {
            let range = (s * ch + c) * len..(s * ch + c + 1) * len;
            for (d, xh) in dy.data[range.clone()].iter().zip(&xhat[range]) {
                sum_dy[c] = sum_dy[c] + *d;
                sum_dy_xhat[c] = sum_dy_xhat[c] + *d * *xh;
            }
        }
    }
    if let Some(g) = grads {
        for c in 0..ch {
            g[0][c] = g[0][c] + sum_dy_xhat[c];
            g[1][c] = g[1][c] + sum_dy[c];
        }
    }
    need_input.then(|| {
        let mut dx = Batch::zeros(n, ch, len);
        let m = T::from_f64(*count as f64);
        for s in 0..n {
            for c in 0..ch {
                let range = (s * ch + c) * len..(s * ch + c + 1) * len;
                let scale = b.gamma[c] * inv_std[c];
                for ((g, d), xh) in dx.data[range.clone()]
                    .iter_mut()
                    .zip(&dy.data[range.clone()])
                    .zip(&xhat[range])
                {
                    *g = match mode {
                        Mode::Eval => scale * *d,
                        Mode::Train => {
                            scale * (*d - sum_dy[c] / m - *xh * sum_dy_xhat[c] / m)
                        }
                    };
                }
            }
        }
        dx
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn randn(len: usize, rng: &mut rng::Rng) -> Vec<f64> {
        (0..len).map(|_| rng::standard_normal(rng)).collect()
    }

    /// Loss = sum(y * probe) with a fixed random probe, checked against
    /// central differences for parameters and inputs.
    fn check_layer(mut layer: Layer<f64>, x: Batch<f64>, mode: Mode) {
        let mut r = rng::seeded(11);
        let (y0, _) = layer.forward(x.clone(), mode);
        let probe = randn(y0.data.len(), &mut r);
        let loss = |l: &Layer<f64>, x: &Batch<f64>| -> f64 {
            let (y, _) = l.forward(x.clone(), mode);
            y.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer.forward(x.clone(), mode);
        let dy = Batch::new(y0.n, y0.channels, y0.len, probe.clone());
        let mut grads: Vec<Vec<f64>> = layer.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let dx = layer.backward(&cache, &dy, Some(&mut grads), true).unwrap();
        let h = 1e-5;
        for (pi, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let orig = layer.params()[pi][j];
                layer.params_mut()[pi][j] = orig + h;
                let up = loss(&layer, &x);
                layer.params_mut()[pi][j] = orig - h;
                let down = loss(&layer, &x);
                layer.params_mut()[pi][j] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-6 * (1.0 + fd.abs()), "{} param {pi}[{j}]: {fd} vs {}", layer.name(), g[j]);
            }
        }
        for j in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[j] += h;
            let up = loss(&layer, &xp);
            xp.data[j] -= 2.0 * h;
            let down = loss(&layer, &xp);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dx.data[j]).abs() <= 1e-6 * (1.0 + fd.abs()), "{} input[{j}]: {fd} vs {}", layer.name(), dx.data[j]);
        }
    }

    #[test]
    fn output_length_arithmetic() {
        assert_eq!(conv_out_len(768, 5, 3, 1), Some(256));
        assert_eq!(conv_out_len(32, 4, 2, 1), Some(16));
        assert_eq!(conv_out_len(16, 16, 1, 0), Some(1));
        assert_eq!(conv_transpose_out_len(1, 32, 1, 0), Some(32));
        assert_eq!(conv_transpose_out_len(32, 4, 2, 1), Some(64));
        assert_eq!(conv_transpose_out_len(256, 5, 3, 1), Some(768));
        assert_eq!(conv_transpose_out_len(256, 4, 4, 0), Some(1024));
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng::seeded(1);
        let layer = Layer::Linear(Linear {
            in_features: 6,
            out_features: 3,
            weight: randn(18, &mut r),
            bias: Some(randn(3, &mut r)),
        });
        check_layer(layer, Batch::new(2, 2, 3, randn(12, &mut r)), Mode::Train);
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng::seeded(2);
        let layer = Layer::Conv(Conv1d {
            in_channels: 2,
            out_channels: 3,
            kernel: 4,
            stride: 2,
            pad: 1,
            weight: randn(24, &mut r),
            bias: Some(randn(3, &mut r)),
        });
        check_layer(layer, Batch::new(2, 2, 9, randn(36, &mut r)), Mode::Train);
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut r = rng::seeded(3);
        let layer = Layer::ConvT(ConvTranspose1d {
            in_channels: 3,
            out_channels: 2,
            kernel: 5,
            stride: 3,
            pad: 1,
            weight: randn(30, &mut r),
            bias: Some(randn(2, &mut r)),
        });
        check_layer(layer, Batch::new(2, 3, 4, randn(24, &mut r)), Mode::Train);
    }

    #[test]
    fn batch_norm_gradients_both_modes() {
        let mut r = rng::seeded(4);
        let bn = BatchNorm {
            channels: 3,
            gamma: randn(3, &mut r),
            beta: randn(3, &mut r),
            running_mean: randn(3, &mut r),
            running_var: vec![0.5, 1.5, 2.0],
            eps: 1e-5,
            momentum: 0.1,
        };
        let x = Batch::new(3, 3, 4, randn(36, &mut r));
        check_layer(Layer::BatchNorm(bn.clone()), x.clone(), Mode::Train);
        check_layer(Layer::BatchNorm(bn), x, Mode::Eval);
    }

    #[test]
    fn activation_gradients() {
        let mut r = rng::seeded(5);
        let x = Batch::new(2, 5, 1, randn(10, &mut r));
        for a in [Activation::Relu, Activation::LeakyRelu(0.2), Activation::Tanh, Activation::Identity] {
            check_layer(Layer::Act(a), x.clone(), Mode::Train);
        }
    }

    #[test]
    fn bounded_tanh_stays_open() {
        assert!(bounded_tanh(50.0f32) < 1.0);
        assert!(bounded_tanh(-50.0f32) > -1.0);
        assert!(bounded_tanh(50.0f64) < 1.0);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut layer = Layer::BatchNorm(BatchNorm {
            channels: 1,
            gamma: vec![1.0f64],
            beta: vec![0.0],
            running_mean: vec![0.0],
            running_var: vec![1.0],
            eps: 1e-5,
            momentum: 0.1,
        });
        let (_, cache) = layer.forward(Batch::new(2, 1, 1, vec![1.0, 3.0]), Mode::Train);
        layer.commit_stats(&cache);
        let Layer::BatchNorm(b) = layer else { unreachable!() };
        assert!((b.running_mean[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance = 2
        assert!((b.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
