//! Exact gradients of the four scalar training losses.
//!
//! * [`LossTag::Discriminator`]: `-V(D, G)`, i.e.
//!   `-mean log D(t) - mean log(1 - D(G(z, c)))`.
//! * [`LossTag::Generator`]: `-mean log D(G(z, c)) - λ·L_I`.
//! * [`LossTag::Info`]: `L_I = mean log Q(c | G(z, c))`.
//! * [`LossTag::Prior`]: `L_P = mean_t H(Q(·|t), softmax(r̂))` over real rows.
//!
//! Probabilities entering a logarithm are clamped to `[1e-7, 1 - 1e-7]`; a
//! clamped term contributes no gradient.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::layers::{Batch, Mode};
use super::{sigmoid, softmax_in_place, Network, Real, Sequential, Tape};
use crate::error::{check_dim, Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;

/// `ln(clamp(p))` and whether the clamp was inactive.
pub fn clamped_ln(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (num_traits::Float::ln(c), c == p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossTag {
    Discriminator,
    Generator { lambda: f64 },
    Info,
    Prior,
}

/// One gradient buffer per parameter tensor, grouped like [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    pub generator: Vec<Vec<T>>,
    pub trunk: Vec<Vec<T>>,
    pub d_head: Vec<Vec<T>>,
    pub q_head: Vec<Vec<T>>,
    /// Gradient with respect to the prior logits `r̂`.
    pub prior: Vec<T>,
}

impl<T: Real> GradientSet<T> {
    pub fn groups(&self) -> [(&'static str, &Vec<Vec<T>>); 4] {
        [
            ("generator", &self.generator),
            ("trunk", &self.trunk),
            ("d_head", &self.d_head),
            ("q_head", &self.q_head),
        ]
    }

    pub fn scale(&mut self, s: T) {
        for g in self
            .generator
            .iter_mut()
            .chain(&mut self.trunk)
            .chain(&mut self.d_head)
            .chain(&mut self.q_head)
            .chain(core::iter::once(&mut self.prior))
        {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradMask {
    pub generator: bool,
    pub trunk: bool,
    pub d_head: bool,
    pub q_head: bool,
    pub prior: bool,
}

impl GradMask {
    pub const ALL: Self = Self {
        generator: true,
        trunk: true,
        d_head: true,
        q_head: true,
        prior: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardOptions {
    pub mask: GradMask,
    /// Trunk parameters take gradient only from the `Q` head. The generator
    /// still receives the full input gradient.
    pub trunk_from_q_only: bool,
    /// Multiplier applied to the loss (and so to every gradient).
    pub scale: f64,
    pub mode: Mode,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            mask: GradMask::ALL,
            trunk_from_q_only: false,
            scale: 1.0,
            mode: Mode::Train,
        }
    }
}

/// Inputs of one loss evaluation. `real` holds `n × dim` embedding rows,
/// `z` holds `m × d` latents, `codes` the `m` code indices.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a, T> {
    pub real: &'a [T],
    pub z: &'a [T],
    pub codes: Option<&'a [usize]>,
    pub prior_logits: &'a [T],
}

#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    /// Loss value (after `scale`).
    pub loss: f64,
    pub gradients: GradientSet<T>,
    /// Probabilities that hit the log clamp.
    pub clamped: usize,
    /// Discriminator probabilities on the real and generated rows, when computed.
    pub real_probs: Vec<f64>,
    pub fake_probs: Vec<f64>,
    /// `Q` rows on generated (Generator/Info) or real (Prior) inputs.
    pub q_rows: Vec<f64>,
    pub generator_tape: Option<Tape<T>>,
    pub trunk_tapes: Vec<Tape<T>>,
}

pub fn backward<T: Real>(net: &Network<T>, tag: LossTag, inputs: LossInputs<'_, T>) -> Result<Evaluation<T>> {
    backward_with(net, tag, inputs, BackwardOptions::default())
}

struct Branch<T> {
    feat_tape: Tape<T>,
    feat: Batch<T>,
    d_tape: Option<Tape<T>>,
    d_logits: Vec<T>,
    q_tape: Option<Tape<T>>,
    q_logits: Vec<T>,
}

fn run_branch<T: Real>(net: &Network<T>, x: Batch<T>, mode: Mode, with_d: bool, with_q: bool) -> Result<Branch<T>> {
    let (feat, feat_tape) = net.trunk.forward(x, mode);
    let (d_logits, d_tape) = if with_d {
        let (y, t) = net.d_head.forward(feat.clone(), mode);
        (y.data, Some(t))
    } else {
        (Vec::new(), None)
    };
    let (q_logits, q_tape) = if with_q {
        let q = net
            .q_head
            .as_ref()
            .ok_or_else(|| Error::Unsupported("connected model has no auxiliary network".into()))?;
        let (y, t) = q.forward(feat.clone(), mode);
        (y.data, Some(t))
    } else {
        (Vec::new(), None)
    };
    Ok(Branch {
        feat_tape,
        feat,
        d_tape,
        d_logits,
        q_tape,
        q_logits,
    })
}

/// Backpropagates head gradients through the trunk; returns the gradient
/// with respect to the trunk input when `need_input`.
#[allow(clippy::too_many_arguments)]
fn backprop_branch<T: Real>(
    net: &Network<T>,
    branch: &Branch<T>,
    d_up: Option<Vec<T>>,
    q_up: Option<Vec<T>>,
    grads: &mut GradientSet<T>,
    opts: &BackwardOptions,
    need_input: bool,
) -> Option<Batch<T>> {
    let shape = |data: Vec<T>, width: usize| Batch::from_rows(data.len() / width, width, data);
    let n = branch.feat.n;
    let (fc, fl) = (branch.feat.channels, branch.feat.len);
    let need_feat = need_input || opts.mask.trunk;
    let d_feat = match (d_up, &branch.d_tape) {
        (Some(up), Some(tape)) => net.d_head.backward(
            tape,
            shape(up, 1),
            opts.mask.d_head.then_some(grads.d_head.as_mut_slice()),
            need_feat,
        ),
        _ => None,
    };
    let q_feat = match (q_up, &branch.q_tape, &net.q_head) {
        (Some(up), Some(tape), Some(q)) => q.backward(
            tape,
            shape(up, net.arch.codes),
            opts.mask.q_head.then_some(grads.q_head.as_mut_slice()),
            need_feat,
        ),
        _ => None,
    };
    let reshape = |b: Batch<T>| Batch::new(n, fc, fl, b.data);
    let d_feat = d_feat.map(reshape);
    let q_feat = q_feat.map(reshape);
    if opts.trunk_from_q_only {
        let dx_q = q_feat.and_then(|qf| {
            net.trunk.backward(
                &branch.feat_tape,
                qf,
                opts.mask.trunk.then_some(grads.trunk.as_mut_slice()),
                need_input,
            )
        });
        let dx_d = if need_input {
            d_feat.and_then(|df| net.trunk.backward(&branch.feat_tape, df, None, true))
        } else {
            None
        };
        match (dx_q, dx_d) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            (a, b) => a.or(b),
        }
    } else {
        let total = match (d_feat, q_feat) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            (a, b) => a.or(b),
        };
        if !(need_input || opts.mask.trunk) {
            return None;
        }
        total.and_then(|t| {
            net.trunk.backward(
                &branch.feat_tape,
                t,
                opts.mask.trunk.then_some(grads.trunk.as_mut_slice()),
                need_input,
            )
        })
    }
}

pub fn backward_with<T: Real>(
    net: &Network<T>,
    tag: LossTag,
    inputs: LossInputs<'_, T>,
    opts: BackwardOptions,
) -> Result<Evaluation<T>> {
    let k = net.arch.codes;
    let mode = opts.mode;
    let scale = opts.scale;
    let mut grads = net.zero_grads();
    let mut clamped = 0usize;
    let mut eval_real = Vec::new();
    let mut eval_fake = Vec::new();
    let mut q_rows_out = Vec::new();
    let mut trunk_tapes = Vec::new();
    let mut generator_tape = None;
    let loss;

    if matches!(tag, LossTag::Info | LossTag::Prior) && !net.has_codes() {
        return Err(Error::Unsupported(format!("{tag:?} loss needs latent codes")));
    }

    match tag {
        LossTag::Prior => {
            check_dim("prior logits", k, inputs.prior_logits.len())?;
            let real = net.embedding_batch(inputs.real)?;
            let n = real.n;
            if n == 0 {
                return Err(Error::EmptyDataset);
            }
            let branch = run_branch(net, real, mode, false, true)?;
            let r: Vec<f64> = {
                let mut v: Vec<f64> = inputs.prior_logits.iter().map(|x| x.as_f64()).collect();
                softmax_in_place(&mut v);
                v
            };
            let ln_r: Vec<(f64, bool)> = r.iter().map(|&p| clamped_ln(p)).collect();
            clamped += ln_r.iter().filter(|x| !x.1).count();
            let inv_n = 1.0 / n as f64;
            let mut total = 0.0;
            // dL/dr_c accumulated over the batch
            let mut d_r = vec![0.0f64; k];
            let mut q_up = vec![T::zero(); n * k];
            for s in 0..n {
                let mut q: Vec<f64> = branch.q_logits[s * k..(s + 1) * k].iter().map(|x| x.as_f64()).collect();
                softmax_in_place(&mut q);
                let mut ce = 0.0;
                for c in 0..k {
                    ce -= q[c] * ln_r[c].0;
                    if ln_r[c].1 {
                        d_r[c] -= inv_n * q[c] / r[c];
                    }
                }
                total += ce * inv_n;
                // dL/dq_c = -ln r_c / n, then through the softmax
                let u: Vec<f64> = ln_r.iter().map(|l| -l.0 * inv_n).collect();
                let dot: f64 = q.iter().zip(&u).map(|(a, b)| a * b).sum();
                for c in 0..k {
                    q_up[s * k + c] = T::from_f64(scale * q[c] * (u[c] - dot));
                }
                q_rows_out.extend_from_slice(&q);
            }
            let rdot: f64 = r.iter().zip(&d_r).map(|(a, b)| a * b).sum();
            if opts.mask.prior {
                grads.prior = r.iter().zip(&d_r).map(|(rc, g)| T::from_f64(scale * rc * (g - rdot))).collect();
            }
            if opts.mask.q_head || opts.mask.trunk {
                backprop_branch(net, &branch, None, Some(q_up), &mut grads, &opts, false);
            }
            trunk_tapes.push(branch.feat_tape);
            loss = total * scale;
        }
        LossTag::Discriminator | LossTag::Generator { .. } | LossTag::Info => {
            let codes = if net.has_codes() {
                let c = inputs
                    .codes
                    .ok_or_else(|| Error::Validation("latent codes required".into()))?;
                Some(c)
            } else {
                None
            };
            let (fake, g_tape) = net.generate(inputs.z, codes, mode)?;
            let m = fake.n;
            if m == 0 {
                return Err(Error::EmptyDataset);
            }
            let fake_in = net.embedding_batch(&fake.data)?;
            let inv_m = 1.0 / m as f64;
            let (with_d, with_q) = match tag {
                LossTag::Discriminator => (true, false),
                LossTag::Generator { .. } => (true, net.has_codes()),
                _ => (false, true),
            };
            let fb = run_branch(net, fake_in, mode, with_d, with_q)?;
            let mut total = 0.0;
            let mut d_up = None;
            let mut q_up = None;

            if with_d {
                let probs: Vec<f64> = fb.d_logits.iter().map(|a| sigmoid(a.as_f64())).collect();
                let mut up = vec![T::zero(); m];
                for (s, &p) in probs.iter().enumerate() {
                    match tag {
                        LossTag::Discriminator => {
                            // -mean ln(1 - p)
                            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                            let active = pc == p;
                            clamped += usize::from(!active);
                            total -= inv_m * num_traits::Float::ln(1.0 - pc);
                            if active {
                                up[s] = T::from_f64(scale * inv_m * p);
                            }
                        }
                        _ => {
                            // -mean ln p (non-saturating)
                            let (lp, active) = clamped_ln(p);
                            clamped += usize::from(!active);
                            total -= inv_m * lp;
                            if active {
                                up[s] = T::from_f64(-scale * inv_m * (1.0 - p));
                            }
                        }
                    }
                }
                eval_fake = probs;
                d_up = Some(up);
            }
            if with_q {
                let codes = codes.expect("codes present with a Q head");
                let weight = match tag {
                    LossTag::Generator { lambda } => -lambda,
                    _ => 1.0,
                };
                let mut up = vec![T::zero(); m * k];
                for s in 0..m {
                    let mut q: Vec<f64> = fb.q_logits[s * k..(s + 1) * k].iter().map(|x| x.as_f64()).collect();
                    softmax_in_place(&mut q);
                    let (lq, active) = clamped_ln(q[codes[s]]);
                    clamped += usize::from(!active);
                    total += weight * inv_m * lq;
                    if active {
                        for c in 0..k {
                            let delta = if c == codes[s] { 1.0 } else { 0.0 };
                            up[s * k + c] = T::from_f64(scale * weight * inv_m * (delta - q[c]));
                        }
                    }
                    q_rows_out.extend_from_slice(&q);
                }
                q_up = Some(up);
            }

            let need_gen = opts.mask.generator;
            let dx = backprop_branch(net, &fb, d_up, q_up, &mut grads, &opts, need_gen);
            if let (true, Some(dx)) = (need_gen, dx) {
                let (oc, ol) = fake_out_shape(net);
                let dy = Batch::new(m, oc, ol, dx.data);
                net.generator
                    .backward(&g_tape, dy, Some(grads.generator.as_mut_slice()), false);
            }
            trunk_tapes.push(fb.feat_tape);
            generator_tape = Some(g_tape);

            if tag == LossTag::Discriminator {
                let real = net.embedding_batch(inputs.real)?;
                let n = real.n;
                if n == 0 {
                    return Err(Error::EmptyDataset);
                }
                let inv_n = 1.0 / n as f64;
                let rb = run_branch(net, real, mode, true, false)?;
                let probs: Vec<f64> = rb.d_logits.iter().map(|a| sigmoid(a.as_f64())).collect();
                let mut up = vec![T::zero(); n];
                for (s, &p) in probs.iter().enumerate() {
                    let (lp, active) = clamped_ln(p);
                    clamped += usize::from(!active);
                    total -= inv_n * lp;
                    if active {
                        up[s] = T::from_f64(-scale * inv_n * (1.0 - p));
                    }
                }
                backprop_branch(net, &rb, Some(up), None, &mut grads, &opts, false);
                trunk_tapes.insert(0, rb.feat_tape);
                eval_real = probs;
            }
            loss = total * scale;
        }
    }

    check_finite(net, &grads)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("{tag:?} loss is not finite")));
    }
    Ok(Evaluation {
        loss,
        gradients: grads,
        clamped,
        real_probs: eval_real,
        fake_probs: eval_fake,
        q_rows: q_rows_out,
        generator_tape,
        trunk_tapes,
    })
}

/// Shape of the last generator layer output, before flattening.
fn fake_out_shape<T: Real>(net: &Network<T>) -> (usize, usize) {
    net.generator
        .out_shape(net.arch.generator_input(), 1)
        .expect("generator shape validated at construction")
}

fn check_finite<T: Real>(net: &Network<T>, grads: &GradientSet<T>) -> Result<()> {
    let seqs: [(&str, Option<&Sequential<T>>, &Vec<Vec<T>>); 4] = [
        ("generator", Some(&net.generator), &grads.generator),
        ("trunk", Some(&net.trunk), &grads.trunk),
        ("d_head", Some(&net.d_head), &grads.d_head),
        ("q_head", net.q_head.as_ref(), &grads.q_head),
    ];
    for (prefix, seq, g) in seqs {
        if let Some(seq) = seq {
            for (name, tensor) in seq.param_names(prefix).iter().zip(g) {
                if tensor.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient in {name}")));
                }
            }
        }
    }
    if grads.prior.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient in prior logits".into()));
    }
    Ok(())
}
