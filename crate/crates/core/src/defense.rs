//! Linear classifier head and the defended prediction path
//! `ŷ = C(t̂)`, where `t̂` is the on-manifold projection of `t`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::{Direction, EmbeddingDataset, Scaler};
use crate::error::{check_dim, Error, Result};
use crate::nets::{argmax, softmax_in_place, Network};
use crate::projection::project_sampling;
use crate::rng;

use num_traits::Float;

/// Space a head was trained in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Space {
    Scaled,
    Raw,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::Scaled => "scaled",
            Space::Raw => "raw",
        }
    }
}

pub const HEAD_INIT_STD: f64 = 0.01;
pub const DEFAULT_HEAD_LR: f64 = 0.1;
pub const DEFAULT_HEAD_EPOCHS: usize = 500;

/// Multinomial logistic regression `softmax(W t + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub classes: usize,
    pub dim: usize,
    /// `classes × dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub space: Space,
}

impl ClassifierHead {
    pub fn new(classes: usize, dim: usize, weight: Vec<f64>, bias: Vec<f64>, space: Space) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Validation("a classifier needs at least two classes".into()));
        }
        check_dim("head weight", classes * dim, weight.len())?;
        check_dim("head bias", classes, bias.len())?;
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Validation("head parameters must be finite".into()));
        }
        Ok(Self {
            classes,
            dim,
            weight,
            bias,
            space,
        })
    }

    pub fn logits(&self, t: &[f32]) -> Result<Vec<f64>> {
        check_dim("embedding", self.dim, t.len())?;
        Ok(self.logits_unchecked(t))
    }

    fn logits_unchecked(&self, t: &[f32]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let w = &self.weight[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + w.iter().zip(t).map(|(a, &b)| a * f64::from(b)).sum::<f64>()
            })
            .collect()
    }

    /// Label for `t`, given in the head's own space.
    pub fn classify(&self, t: &[f32]) -> Result<usize> {
        Ok(argmax(&self.logits(t)?))
    }

    /// Mean softmax cross-entropy over a labeled dataset.
    pub fn loss(&self, ds: &EmbeddingDataset) -> Result<f64> {
        let labels = labels_of(ds)?;
        check_dim("embedding", self.dim, ds.dim())?;
        let mut total = 0.0;
        for (t, &y) in ds.rows().zip(labels) {
            let mut p = self.logits_unchecked(t);
            softmax_in_place(&mut p);
            total -= Float::ln(p.get(y as usize).copied().unwrap_or(0.0).max(1e-300));
        }
        Ok(total / ds.n().max(1) as f64)
    }

    pub fn accuracy(&self, ds: &EmbeddingDataset) -> Result<f64> {
        let labels = labels_of(ds)?;
        check_dim("embedding", self.dim, ds.dim())?;
        let hits = ds
            .rows()
            .zip(labels)
            .filter(|(t, &y)| argmax(&self.logits_unchecked(t)) == y as usize)
            .count();
        Ok(hits as f64 / ds.n().max(1) as f64)
    }

    /// Maps a scaled-space embedding into the head's space.
    pub fn prepare(&self, t_scaled: &[f32], scaler: Option<&Scaler>) -> Result<Vec<f32>> {
        match self.space {
            Space::Scaled => Ok(t_scaled.to_vec()),
            Space::Raw => scaler
                .ok_or(Error::Space {
                    expected: Space::Raw.as_str(),
                    got: Space::Scaled.as_str(),
                })?
                .scale(t_scaled, Direction::Inverse),
        }
    }
}

fn labels_of(ds: &EmbeddingDataset) -> Result<&[i32]> {
    ds.labels()
        .ok_or_else(|| Error::Validation("dataset has no labels".into()))
}

/// Full-batch gradient descent on the mean softmax cross-entropy.
pub fn train_head(ds: &EmbeddingDataset, epochs: usize, lr: f64, seed: u64) -> Result<ClassifierHead> {
    train_head_traced(ds, epochs, lr, seed).map(|(h, _)| h)
}

/// [`train_head`], also returning the loss before every step and after the last.
pub fn train_head_traced(ds: &EmbeddingDataset, epochs: usize, lr: f64, seed: u64) -> Result<(ClassifierHead, Vec<f64>)> {
    let labels = labels_of(ds)?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Validation("learning rate must be finite and >= 0".into()));
    }
    let classes = ds.num_classes().unwrap_or(0);
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&y| seen[y as usize] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Validation("head training needs at least two classes".into()));
    }
    let dim = ds.dim();
    let mut r = rng::seeded(rng::derive_seed(seed, 0x4ead));
    let weight = (0..classes * dim)
        .map(|_| HEAD_INIT_STD * rng::standard_normal(&mut r))
        .collect();
    let space = if ds.is_scaled() { Space::Scaled } else { Space::Raw };
    let mut head = ClassifierHead::new(classes, dim, weight, vec![0.0; classes], space)?;
    let n = ds.n() as f64;
    let mut trace = Vec::with_capacity(epochs + 1);
    for _ in 0..epochs {
        let mut gw = vec![0.0; classes * dim];
        let mut gb = vec![0.0; classes];
        let mut loss = 0.0;
        for (t, &y) in ds.rows().zip(labels) {
            let mut p = head.logits_unchecked(t);
            softmax_in_place(&mut p);
            loss -= Float::ln(p[y as usize].max(1e-300)) / n;
            for c in 0..classes {
                let delta = (p[c] - f64::from(u8::from(c == y as usize))) / n;
                gb[c] += delta;
                for (g, &x) in gw[c * dim..(c + 1) * dim].iter_mut().zip(t) {
                    *g += delta * f64::from(x);
                }
            }
        }
        trace.push(loss);
        for (w, g) in head.weight.iter_mut().zip(&gw) {
            *w -= lr * g;
        }
        for (b, g) in head.bias.iter_mut().zip(&gb) {
            *b -= lr * g;
        }
        if head.weight.iter().chain(&head.bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("head training diverged at lr {lr}")));
        }
    }
    trace.push(head.loss(ds)?);
    Ok((head, trace))
}

/// Label of `t` (scaled space) without projection.
pub fn classify(head: &ClassifierHead, t_scaled: &[f32], scaler: Option<&Scaler>) -> Result<usize> {
    head.classify(&head.prepare(t_scaled, scaler)?)
}

/// Label of the on-manifold projection of `t` (scaled space).
pub fn classify_defended(
    head: &ClassifierHead,
    net: &Network<f32>,
    scaler: Option<&Scaler>,
    t_scaled: &[f32],
    k: usize,
    seed: u64,
) -> Result<usize> {
    if head.space == Space::Raw && scaler.is_none() {
        return Err(Error::Space {
            expected: Space::Raw.as_str(),
            got: Space::Scaled.as_str(),
        });
    }
    let r = project_sampling(net, t_scaled, k, seed)?;
    classify(head, &r.t_hat, scaler)
}
