//! Losses, latent sampling, the learnable categorical prior and the
//! alternating optimization loop.
//!
//! One generator update consists of `dg_ratio` discriminator ascent steps on
//! `V(D, G)`, one joint descent step for the generator and `Q` on the
//! non-saturating generator loss `-mean log D(G(z, c)) - λ·L_I`, and one
//! descent step on the prior logits `r̂` for `L_P` over the current real batch.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::bundle::ModelBundle;
use crate::dataset::EmbeddingDataset;
use crate::error::{check_dim, Error, Result};
use crate::nets::grad::{clamped_ln, PROB_CLAMP};
use crate::nets::{
    backward_with, softmax, ArchConfig, BackwardOptions, GradMask, LossInputs, LossTag, Mode, Network, Real,
};
use crate::projection;
use crate::rng::{self, Rng};

use num_traits::Float;

/// Categorical prior `r = softmax(r̂)` over the `K` latent codes.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PriorState {
    logits: Vec<f64>,
}

impl PriorState {
    pub fn uniform(k: usize) -> Self {
        Self { logits: vec![0.0; k] }
    }

    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Validation("prior needs at least one code".into()));
        }
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("prior logit {i} is not finite")));
        }
        Ok(Self { logits })
    }

    /// Prior whose probabilities are `probs` (zeros map to a very negative logit).
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        Self::from_logits(probs.iter().map(|&p| if p > 0.0 { Float::ln(p) } else { -1e3 }).collect())
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// `H(c)` of the prior, in nats.
    pub fn entropy(&self) -> f64 {
        self.probs().iter().filter(|&&p| p > 0.0).map(|&p| -p * Float::ln(p)).sum()
    }

    /// Total probability of the `m` largest entries.
    pub fn top_mass(&self, m: usize) -> f64 {
        let mut p = self.probs();
        p.sort_by(|a, b| b.total_cmp(a));
        p.iter().take(m).sum()
    }

    /// Inverse-CDF draw from `r`.
    pub fn sample(&self, rng: &mut Rng) -> usize {
        let p = self.probs();
        let u = rng::uniform(rng);
        let mut acc = 0.0;
        for (c, &pc) in p.iter().enumerate() {
            acc += pc;
            if u < acc {
                return c;
            }
        }
        // rounding left `u` above the accumulated mass
        p.iter().rposition(|&pc| pc > 0.0).unwrap_or(0)
    }

    /// One plain gradient-descent step on `L_P` with fixed `Q` rows.
    pub fn descend(&mut self, q_rows: &[f64], lr: f64) -> Result<()> {
        let g = prior_gradient(q_rows, self)?;
        for (l, g) in self.logits.iter_mut().zip(g) {
            *l -= lr * g;
        }
        Ok(())
    }

    pub(crate) fn logits_mut(&mut self) -> &mut Vec<f64> {
        &mut self.logits
    }
}

/// Continuous latents and categorical codes for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub batch: usize,
    pub latent_dim: usize,
    pub codes_k: usize,
    /// `batch × d`, row-major.
    pub z: Vec<f64>,
    /// One code index per row; empty for the connected model.
    pub codes: Vec<usize>,
}

impl LatentBatch {
    /// Codes as one-hot rows (`batch × K`).
    pub fn one_hot(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.codes.len() * self.codes_k];
        for (s, &c) in self.codes.iter().enumerate() {
            out[s * self.codes_k + c] = 1.0;
        }
        out
    }

    pub fn z_as<T: Real>(&self) -> Vec<T> {
        self.z.iter().map(|&v| T::from_f64(v)).collect()
    }

    pub fn codes(&self) -> Option<&[usize]> {
        (!self.codes.is_empty()).then_some(self.codes.as_slice())
    }
}

/// `z ~ N(0, I_d)` per row and `c ~ Cat(K, r)`. Draws are interleaved row by
/// row so the stream position fixes every value.
pub fn sample_latent(prior: &PriorState, batch: usize, d: usize, rng: &mut Rng) -> LatentBatch {
    let mut z = Vec::with_capacity(batch * d);
    let mut codes = Vec::with_capacity(batch);
    for _ in 0..batch {
        z.extend((0..d).map(|_| rng::standard_normal(rng)));
        codes.push(prior.sample(rng));
    }
    LatentBatch {
        batch,
        latent_dim: d,
        codes_k: prior.k(),
        z,
        codes,
    }
}

/// Latents without codes, for the connected model.
pub fn sample_z(batch: usize, d: usize, rng: &mut Rng) -> LatentBatch {
    LatentBatch {
        batch,
        latent_dim: d,
        codes_k: 0,
        z: (0..batch * d).map(|_| rng::standard_normal(rng)).collect(),
        codes: Vec::new(),
    }
}

fn clamp_ln(p: f64) -> f64 {
    clamped_ln(p).0
}

/// Number of probabilities that would be clamped before a logarithm.
pub fn clamp_count(probs: &[f64]) -> usize {
    probs
        .iter()
        .filter(|&&p| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP) != p)
        .count()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// `V(D, G) = mean log D(t) + mean log(1 - D(G(z, c)))`.
pub fn gan_value(real_probs: &[f64], fake_probs: &[f64]) -> f64 {
    mean(real_probs.iter().map(|&p| clamp_ln(p))) + mean(fake_probs.iter().map(|&p| clamp_ln(1.0 - p)))
}

/// `L_I = mean log Q(c | G(z, c))` for `q_rows` (`batch × K`) on generated rows.
pub fn info_reg(codes: &[usize], q_rows: &[f64], k: usize) -> Result<f64> {
    check_dim("Q rows", codes.len() * k, q_rows.len())?;
    if let Some(&c) = codes.iter().find(|&&c| c >= k) {
        return Err(Error::Validation(format!("code {c} outside 0..{k}")));
    }
    Ok(mean(codes.iter().enumerate().map(|(s, &c)| clamp_ln(q_rows[s * k + c]))))
}

/// `L_P = mean_t H(Q(·|t), r)` for `q_rows` (`batch × K`) on real rows.
pub fn prior_loss(q_rows: &[f64], prior: &PriorState) -> Result<f64> {
    let k = prior.k();
    if !q_rows.len().is_multiple_of(k) {
        return Err(Error::Dimension {
            context: "Q rows",
            expected: k,
            got: q_rows.len() % k,
        });
    }
    let ln_r: Vec<f64> = prior.probs().into_iter().map(clamp_ln).collect();
    Ok(mean(
        q_rows
            .chunks_exact(k)
            .map(|q| -q.iter().zip(&ln_r).map(|(a, b)| a * b).sum::<f64>()),
    ))
}

/// `∂L_P/∂r̂ = r - mean_t Q(·|t)` (clamped entries of `r` excluded).
pub fn prior_gradient(q_rows: &[f64], prior: &PriorState) -> Result<Vec<f64>> {
    let k = prior.k();
    if q_rows.is_empty() || !q_rows.len().is_multiple_of(k) {
        return Err(Error::Dimension {
            context: "Q rows",
            expected: k,
            got: q_rows.len() % k,
        });
    }
    let n = (q_rows.len() / k) as f64;
    let r = prior.probs();
    let mut qbar = vec![0.0; k];
    for row in q_rows.chunks_exact(k) {
        for (m, q) in qbar.iter_mut().zip(row) {
            *m += q / n;
        }
    }
    // dL/dr_c = -qbar_c / r_c, zero where the log clamp is active
    let g: Vec<f64> = r
        .iter()
        .zip(&qbar)
        .map(|(&rc, &qc)| if clamped_ln(rc).1 { -qc / rc } else { 0.0 })
        .collect();
    let dot: f64 = r.iter().zip(&g).map(|(a, b)| a * b).sum();
    Ok(r.iter().zip(&g).map(|(rc, gc)| rc * (gc - dot)).collect())
}

/// Adaptive moment estimation over a list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<T: Real>(&mut self, params: Vec<&mut Vec<T>>, grads: Vec<&[T]>) {
        debug_assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - Float::powi(self.beta1, self.t);
        let c2 = 1.0 - Float::powi(self.beta2, self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j].as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let upd = self.lr * (m[j] / c1) / (Float::sqrt(v[j] / c2) + self.eps);
                p[j] = T::from_f64(p[j].as_f64() - upd);
            }
        }
    }

    pub fn step_f64(&mut self, params: &mut [f64], grads: &[f64]) {
        let mut p: Vec<f64> = params.to_vec();
        self.step(vec![&mut p], vec![grads]);
        params.copy_from_slice(&p);
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    /// Generator (and `Q`) learning rate.
    pub lr_g: f64,
    /// Discriminator learning rate.
    pub lr_d: f64,
    /// Prior learning rate; 0 keeps the prior uniform.
    pub lr_p: f64,
    /// Weight of the information regularizer.
    pub lambda: f64,
    /// Number of latent codes `K`.
    pub codes: usize,
    /// Dimension `d` of `z`.
    pub latent_dim: usize,
    /// Discriminator steps per generator update.
    pub dg_ratio: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Train the connected model: no codes, no `Q`, no prior.
    pub baseline_mode: bool,
    /// Draw training codes uniformly instead of from the learned prior.
    pub uniform_codes: bool,
    pub beta1: f64,
    pub beta2: f64,
    /// Rows held out for the per-epoch reconstruction probe (0 disables it).
    pub probe_size: usize,
    /// Candidates per probe projection.
    pub probe_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_g: 1e-4,
            lr_d: 1e-4,
            lr_p: 0.0,
            lambda: 1.0,
            codes: 50,
            latent_dim: 40,
            dg_ratio: 1,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            baseline_mode: false,
            uniform_codes: false,
            beta1: 0.5,
            beta2: 0.999,
            probe_size: 64,
            probe_k: projection::DEFAULT_K,
        }
    }
}

/// Tuned settings per (model, dataset): `(model, dataset, α_g, α_d, α_p, d/g, K, d)`.
pub const TUNED: [(&str, &str, f64, f64, f64, usize, usize, usize); 9] = [
    ("bert", "agnews", 1e-4, 1e-4, 0.0, 1, 50, 20),
    ("bert", "imdb", 1e-4, 1e-4, 0.0, 1, 50, 40),
    ("bert", "yelp", 1e-4, 9e-5, 0.0, 1, 100, 20),
    ("roberta", "agnews", 2e-4, 2e-4, 1e-2, 1, 100, 20),
    ("roberta", "imdb", 3e-4, 3e-4, 0.0, 1, 200, 20),
    ("roberta", "yelp", 3e-5, 1e-3, 1e-4, 2, 100, 20),
    ("xlnet", "agnews", 1e-4, 1e-4, 1e-4, 1, 100, 20),
    ("xlnet", "imdb", 1e-4, 1e-4, 1e-4, 1, 100, 20),
    ("xlnet", "yelp", 5e-4, 9e-5, 1e-3, 5, 100, 30),
];

impl TrainConfig {
    /// Defaults overridden by the tuned row for `model`/`dataset`.
    pub fn tuned(model: &str, dataset: &str) -> Option<Self> {
        TUNED
            .iter()
            .find(|r| r.0.eq_ignore_ascii_case(model) && r.1.eq_ignore_ascii_case(dataset))
            .map(|&(_, _, lr_g, lr_d, lr_p, dg_ratio, codes, latent_dim)| Self {
                lr_g,
                lr_d,
                lr_p,
                dg_ratio,
                codes,
                latent_dim,
                ..Self::default()
            })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("lr_p", self.lr_p), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam decay rates must lie in [0, 1)".into()));
        }
        if self.dg_ratio == 0 {
            return Err(Error::Config("dg_ratio must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.codes == 0 || self.latent_dim == 0 {
            return Err(Error::Config("K and d must be at least 1".into()));
        }
        if self.probe_size > 0 && self.probe_k == 0 {
            return Err(Error::Config("probe_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Architecture of the given preset and embedding dimension matching this config.
    pub fn arch(&self, preset: crate::nets::Preset, embedding_dim: usize) -> ArchConfig {
        ArchConfig {
            preset,
            embedding_dim,
            codes: self.codes,
            latent_dim: self.latent_dim,
            disconnected: !self.baseline_mode,
            mlp_widths: None,
        }
    }
}

/// Per-epoch means.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// `V(D, G)` over the discriminator steps.
    pub gan_value: f64,
    /// `L_I` over the generator steps; `None` for the connected model.
    pub info: Option<f64>,
    /// `L_P` over the prior evaluations; `None` for the connected model.
    pub prior_loss: Option<f64>,
    /// Mean reconstruction distance of the probe rows.
    pub probe: Option<f64>,
    pub d_steps: usize,
    pub g_steps: usize,
    /// Probabilities clamped before a logarithm.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Final prior; `None` for the connected model.
    pub prior: Option<PriorState>,
    /// Wall-clock duration, filled in by callers that own a clock.
    pub seconds: f64,
    /// Rows of the input dataset held out for the probe.
    pub probe_rows: Vec<usize>,
}

/// Stream identifiers for [`rng::derive_seed`].
mod stream {
    pub const INIT: u64 = 1;
    pub const PROBE: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const LATENT: u64 = 4;
    pub const PROJECT: u64 = 5;
}

pub fn train(ds: &EmbeddingDataset, cfg: &TrainConfig, arch: &ArchConfig) -> Result<(ModelBundle, TrainReport)> {
    train_observed(ds, cfg, arch, &mut |_| {})
}

/// [`train`], calling `observe` after every epoch.
pub fn train_observed(
    ds: &EmbeddingDataset,
    cfg: &TrainConfig,
    arch: &ArchConfig,
    observe: &mut dyn FnMut(&EpochRecord),
) -> Result<(ModelBundle, TrainReport)> {
    cfg.validate()?;
    arch.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !ds.is_scaled() {
        return Err(Error::Validation("training data must be scaled".into()));
    }
    check_dim("training data", arch.embedding_dim, ds.dim())?;
    if arch.codes != cfg.codes || arch.latent_dim != cfg.latent_dim {
        return Err(Error::Config(format!(
            "architecture (K={}, d={}) disagrees with training config (K={}, d={})",
            arch.codes, arch.latent_dim, cfg.codes, cfg.latent_dim
        )));
    }
    if arch.disconnected == cfg.baseline_mode {
        return Err(Error::Config(
            "baseline_mode requires a connected architecture and vice versa".into(),
        ));
    }

    let mut net: Network<f32> = Network::init(arch, rng::derive_seed(cfg.seed, stream::INIT))?;
    let mut prior = PriorState::uniform(arch.codes);
    let sampling_prior = PriorState::uniform(arch.codes);
    let mut opt_d = Adam::new(cfg.lr_d, cfg.beta1, cfg.beta2);
    let mut opt_g = Adam::new(cfg.lr_g, cfg.beta1, cfg.beta2);
    let mut opt_p = Adam::new(cfg.lr_p, cfg.beta1, cfg.beta2);

    let n = ds.n();
    let (probe_rows, train_rows) = split_probe(n, cfg);
    let n_train = train_rows.len();
    let batches = n_train.div_ceil(cfg.batch_size);
    let gen_steps = (batches / cfg.dg_ratio).max(1);
    let mut latent_rng = rng::seeded(rng::derive_seed(cfg.seed, stream::LATENT));
    let probe_seed = rng::derive_seed(cfg.seed, stream::PROJECT);
    let dim = ds.dim();

    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        prior: None,
        seconds: 0.0,
        probe_rows: probe_rows.clone(),
    };
    let step_err = |epoch: usize, step: usize, e: Error| match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, step {step}: {m}")),
        other => other,
    };

    for epoch in 1..=cfg.epochs {
        let mut shuffle = rng::seeded(rng::derive_seed(
            rng::derive_seed(cfg.seed, stream::SHUFFLE),
            epoch as u64,
        ));
        let order: Vec<usize> = rng::permutation(n_train, &mut shuffle)
            .into_iter()
            .map(|i| train_rows[i])
            .collect();
        let batch_rows = |b: usize| -> Vec<f32> {
            let lo = b * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(n_train);
            let mut rows = Vec::with_capacity((hi - lo) * dim);
            for &i in &order[lo..hi] {
                rows.extend_from_slice(ds.row(i));
            }
            rows
        };

        let (mut v_sum, mut li_sum, mut lp_sum) = (0.0, 0.0, 0.0);
        let (mut d_steps, mut g_steps, mut lp_count, mut clamped) = (0usize, 0usize, 0usize, 0usize);
        for g in 0..gen_steps {
            let step = g + 1;
            let mut last_real = Vec::new();
            for j in 0..cfg.dg_ratio {
                let real = batch_rows((g * cfg.dg_ratio + j) % batches);
                let m = real.len() / dim;
                let latent = draw(&prior, &sampling_prior, cfg, m, arch, &mut latent_rng);
                let z: Vec<f32> = latent.z_as();
                let opts = BackwardOptions {
                    mask: GradMask {
                        generator: false,
                        trunk: true,
                        d_head: true,
                        q_head: false,
                        prior: false,
                    },
                    ..BackwardOptions::default()
                };
                let inputs = LossInputs {
                    real: &real,
                    z: &z,
                    codes: latent.codes(),
                    prior_logits: &[],
                };
                let ev = backward_with(&net, LossTag::Discriminator, inputs, opts)
                    .map_err(|e| step_err(epoch, step, e))?;
                v_sum -= ev.loss;
                clamped += ev.clamped;
                net.commit_stats(&ev);
                if cfg.lr_d > 0.0 {
                    let grads = ev.gradients;
                    let params: Vec<&mut Vec<f32>> =
                        net.trunk.params_mut().into_iter().chain(net.d_head.params_mut()).collect();
                    let gs: Vec<&[f32]> = grads.trunk.iter().chain(&grads.d_head).map(Vec::as_slice).collect();
                    opt_d.step(params, gs);
                }
                d_steps += 1;
                last_real = real;
            }

            let m = last_real.len() / dim;
            let latent = draw(&prior, &sampling_prior, cfg, m, arch, &mut latent_rng);
            let z: Vec<f32> = latent.z_as();
            let opts = BackwardOptions {
                mask: GradMask {
                    generator: true,
                    trunk: net.has_codes(),
                    d_head: false,
                    q_head: net.has_codes(),
                    prior: false,
                },
                trunk_from_q_only: true,
                ..BackwardOptions::default()
            };
            let inputs = LossInputs {
                real: &[],
                z: &z,
                codes: latent.codes(),
                prior_logits: &[],
            };
            let ev = backward_with(&net, LossTag::Generator { lambda: cfg.lambda }, inputs, opts)
                .map_err(|e| step_err(epoch, step, e))?;
            clamped += ev.clamped;
            if net.has_codes() {
                li_sum += info_reg(&latent.codes, &ev.q_rows, arch.codes)?;
            }
            net.commit_stats(&ev);
            if cfg.lr_g > 0.0 {
                let grads = ev.gradients;
                let mut params: Vec<&mut Vec<f32>> = net.generator.params_mut();
                let mut gs: Vec<&[f32]> = grads.generator.iter().map(Vec::as_slice).collect();
                if let Some(q) = net.q_head.as_mut() {
                    params.extend(q.params_mut());
                    params.extend(net.trunk.params_mut());
                    gs.extend(grads.q_head.iter().chain(&grads.trunk).map(Vec::as_slice));
                }
                opt_g.step(params, gs);
            }
            g_steps += 1;

            if net.has_codes() {
                let q_rows: Vec<f64> = net
                    .q_batch(&last_real, Mode::Train)?
                    .into_iter()
                    .map(f64::from)
                    .collect();
                let lp = prior_loss(&q_rows, &prior)?;
                if !lp.is_finite() {
                    return Err(Error::Numeric(format!("epoch {epoch}, step {step}: prior loss is not finite")));
                }
                lp_sum += lp;
                lp_count += 1;
                if cfg.lr_p > 0.0 {
                    let grad = prior_gradient(&q_rows, &prior)?;
                    opt_p.step_f64(prior.logits_mut(), &grad);
                    if prior.logits().iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric(format!("epoch {epoch}, step {step}: prior logits diverged")));
                    }
                }
            }
        }

        if let Some(name) = first_non_finite(&net) {
            return Err(Error::Numeric(format!("epoch {epoch}: parameter {name} is not finite")));
        }
        let probe = if probe_rows.is_empty() {
            None
        } else {
            Some(probe_distance(&net, ds, &probe_rows, cfg.probe_k, probe_seed)?)
        };
        let record = EpochRecord {
            epoch,
            gan_value: v_sum / d_steps as f64,
            info: net.has_codes().then(|| li_sum / g_steps as f64),
            prior_loss: net.has_codes().then(|| lp_sum / lp_count.max(1) as f64),
            probe,
            d_steps,
            g_steps,
            clamped,
        };
        observe(&record);
        report.epochs.push(record);
    }

    let prior = net.has_codes().then_some(prior);
    report.prior = prior.clone();
    let bundle = ModelBundle::new(net, prior)?;
    Ok((bundle, report))
}

fn draw(
    prior: &PriorState,
    uniform: &PriorState,
    cfg: &TrainConfig,
    m: usize,
    arch: &ArchConfig,
    rng: &mut Rng,
) -> LatentBatch {
    if !arch.disconnected {
        sample_z(m, arch.latent_dim, rng)
    } else if cfg.uniform_codes {
        sample_latent(uniform, m, arch.latent_dim, rng)
    } else {
        sample_latent(prior, m, arch.latent_dim, rng)
    }
}

/// Held-out probe rows and the remaining training rows, both ascending.
/// At most a tenth of the data is held out; with too little data the probe
/// falls back to training rows.
fn split_probe(n: usize, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let all: Vec<usize> = (0..n).collect();
    if cfg.probe_size == 0 {
        return (Vec::new(), all);
    }
    let held = cfg.probe_size.min(n / 10);
    if held == 0 {
        return (all[..cfg.probe_size.min(n)].to_vec(), all);
    }
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, stream::PROBE));
    let perm = rng::permutation(n, &mut rng);
    let mut probe = perm[..held].to_vec();
    probe.sort_unstable();
    let mut train: Vec<usize> = perm[held..].to_vec();
    train.sort_unstable();
    (probe, train)
}

fn probe_distance(net: &Network<f32>, ds: &EmbeddingDataset, rows: &[usize], k: usize, seed: u64) -> Result<f64> {
    let mut sum = 0.0;
    for &i in rows {
        let t = ds.row(i);
        let r = projection::project_sampling(net, t, k, projection::row_seed(seed, t))?;
        sum += r.distance;
    }
    Ok(sum / rows.len() as f64)
}

fn first_non_finite(net: &Network<f32>) -> Option<String> {
    let mut seqs = vec![("generator", &net.generator), ("trunk", &net.trunk), ("d_head", &net.d_head)];
    if let Some(q) = &net.q_head {
        seqs.push(("q_head", q));
    }
    for (prefix, seq) in seqs {
        for (name, p) in seq.param_names(prefix).into_iter().zip(seq.params()) {
            if p.iter().any(|v| !v.is_finite()) {
                return Some(name);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_synthetic, Scaler, SyntheticSpec};
    use crate::nets::Preset;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn degenerate_prior_always_draws_its_code() {
        let p = PriorState::from_probs(&[1.0, 0.0, 0.0]).unwrap();
        let lb = sample_latent(&p, 500, 2, &mut rng::seeded(1));
        assert!(lb.codes.iter().all(|&c| c == 0));
        let oh = lb.one_hot();
        for row in oh.chunks_exact(3) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn uniform_code_frequencies() {
        let p = PriorState::uniform(4);
        let lb = sample_latent(&p, 100_000, 1, &mut rng::seeded(2));
        for c in 0..4 {
            let f = lb.codes.iter().filter(|&&x| x == c).count() as f64 / 1e5;
            assert!(close(f, 0.25, 0.01), "code {c}: {f}");
        }
    }

    #[test]
    fn latent_moments() {
        let lb = sample_latent(&PriorState::uniform(3), 100_000, 3, &mut rng::seeded(3));
        for j in 0..3 {
            let col: Vec<f64> = lb.z.iter().skip(j).step_by(3).copied().collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
            assert!(close(m, 0.0, 0.02) && close(v, 1.0, 0.05), "coord {j}: mean {m}, var {v}");
        }
    }

    #[test]
    fn loss_unit_values() {
        assert!(close(gan_value(&[0.5], &[0.5]), -2.0 * 2f64.ln(), 1e-12));
        assert!(gan_value(&[1.0], &[0.0]) < 0.0 && gan_value(&[1.0], &[0.0]) > -1e-6);
        let k = 50;
        let q = vec![1.0 / k as f64; 3 * k];
        assert!(close(info_reg(&[0, 7, 49], &q, k).unwrap(), (1.0 / 50f64).ln(), 1e-12));
        let onehot: Vec<f64> = (0..3).flat_map(|s| (0..4).map(move |c| f64::from(u8::from(c == s)))).collect();
        // the clamp keeps a perfect Q within 1e-7 of the maximum 0
        assert!(close(info_reg(&[0, 1, 2], &onehot, 4).unwrap(), 0.0, 1e-6));
        let p = PriorState::uniform(4);
        assert!(close(prior_loss(&p.probs(), &p).unwrap(), 4f64.ln(), 1e-12));
        let p = PriorState::from_probs(&[0.9, 0.1]).unwrap();
        assert!(close(prior_loss(&[1.0, 0.0], &p).unwrap(), -(0.9f64).ln(), 1e-12));
    }

    #[test]
    fn clamp_keeps_losses_finite() {
        assert!(gan_value(&[0.0, 1.0], &[1.0, 0.0]).is_finite());
        assert_eq!(clamp_count(&[0.0, 1.0, 0.5]), 2);
        assert!(info_reg(&[0], &[0.0, 1.0], 2).unwrap().is_finite());
        assert!(info_reg(&[2], &[0.0, 1.0], 2).is_err());
        assert!(prior_loss(&[0.5, 0.5, 0.5], &PriorState::uniform(2)).is_err());
    }

    #[test]
    fn prior_gradient_matches_finite_differences() {
        let p = PriorState::from_logits(vec![0.3, -1.0, 0.8]).unwrap();
        let q = [0.2, 0.5, 0.3, 0.6, 0.1, 0.3];
        let g = prior_gradient(&q, &p).unwrap();
        for j in 0..3 {
            let h = 1e-6;
            let mut a = p.logits().to_vec();
            let mut b = a.clone();
            a[j] += h;
            b[j] -= h;
            let fd = (prior_loss(&q, &PriorState::from_logits(a).unwrap()).unwrap()
                - prior_loss(&q, &PriorState::from_logits(b).unwrap()).unwrap())
                / (2.0 * h);
            assert!(close(g[j], fd, 1e-8), "{j}: {} vs {fd}", g[j]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::new(0.1, 0.5, 0.999);
        let mut p = vec![1.0f64, -1.0];
        opt.step_f64(&mut p, &[3.0, -0.01]);
        assert!(close(p[0], 0.9, 1e-6) && close(p[1], -0.9, 1e-5));
    }

    #[test]
    fn tuned_table_lookup() {
        let c = TrainConfig::tuned("BERT", "imdb").unwrap();
        assert_eq!((c.codes, c.latent_dim, c.dg_ratio, c.lr_p), (50, 40, 1, 0.0));
        assert!(TrainConfig::tuned("gpt", "imdb").is_none());
    }

    fn tiny_data() -> EmbeddingDataset {
        let spec = SyntheticSpec {
            num_clusters: 2,
            dim: 4,
            points_per_cluster: 20,
            center_scale: 4.0,
            sigma: 0.3,
            seed: 5,
            intrinsic_dim: None,
        };
        let raw = make_synthetic(&spec).unwrap();
        Scaler::fit(&raw).unwrap().scale_dataset(&raw).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            codes: 3,
            latent_dim: 2,
            epochs: 2,
            batch_size: 8,
            dg_ratio: 2,
            lr_p: 1e-2,
            probe_size: 4,
            probe_k: 3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_counts_steps() {
        let ds = tiny_data();
        let cfg = tiny_cfg();
        let arch = cfg.arch(Preset::Mlp, 4);
        let (a, ra) = train(&ds, &cfg, &arch).unwrap();
        let (b, rb) = train(&ds, &cfg, &arch).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.epochs.len(), 2);
        for e in &ra.epochs {
            assert_eq!(e.d_steps, cfg.dg_ratio * e.g_steps);
            assert!(e.gan_value.is_finite() && e.info.unwrap().is_finite());
            assert!(e.probe.unwrap() >= 0.0);
        }
        assert_eq!(ra.probe_rows.len(), 4);
        let r = ra.prior.unwrap().probs();
        assert!(close(r.iter().sum(), 1.0, 1e-9));
    }

    #[test]
    fn baseline_mode_skips_code_losses() {
        let ds = tiny_data();
        let cfg = TrainConfig {
            baseline_mode: true,
            ..tiny_cfg()
        };
        let arch = cfg.arch(Preset::Mlp, 4);
        assert!(!arch.disconnected);
        let (bundle, report) = train(&ds, &cfg, &arch).unwrap();
        assert!(report.prior.is_none() && bundle.prior.is_none());
        assert!(report.epochs.iter().all(|e| e.info.is_none() && e.prior_loss.is_none()));
    }

    #[test]
    fn rejects_inconsistent_inputs() {
        let ds = tiny_data();
        let cfg = tiny_cfg();
        let arch = cfg.arch(Preset::Mlp, 4);
        let bad = ArchConfig { codes: 4, ..arch.clone() };
        assert!(matches!(train(&ds, &cfg, &bad), Err(Error::Config(_))));
        assert!(matches!(train(&ds, &cfg, &arch.clone().connected()), Err(Error::Config(_))));
        let raw = EmbeddingDataset::new(4, vec![0.0; 8], None, false).unwrap();
        assert!(matches!(train(&raw, &cfg, &arch), Err(Error::Validation(_))));
        let empty = EmbeddingDataset::new(4, Vec::new(), None, true).unwrap();
        assert!(matches!(train(&empty, &cfg, &arch), Err(Error::EmptyDataset)));
        let zero = TrainConfig { dg_ratio: 0, ..cfg };
        assert!(matches!(train(&ds, &zero, &arch), Err(Error::Config(_))));
    }
}
