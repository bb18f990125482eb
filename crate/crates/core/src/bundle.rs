//! The trained manifold approximation and everything needed to use it.

use alloc::format;
use alloc::vec::Vec;

use crate::dataset::{Direction, Scaler};
use crate::defense::{self, ClassifierHead};
use crate::error::{check_dim, Error, Result};
use crate::nets::{ArchConfig, Network};
use crate::projection::{self, GdConfig, ProjectionResult};
use crate::training::PriorState;

/// Generator, discriminator, `Q`, prior, scaler and optional classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub network: Network<f32>,
    /// `None` for the connected model.
    pub prior: Option<PriorState>,
    pub scaler: Option<Scaler>,
    pub head: Option<ClassifierHead>,
}

impl ModelBundle {
    pub fn new(network: Network<f32>, prior: Option<PriorState>) -> Result<Self> {
        match (&prior, network.has_codes()) {
            (Some(p), true) => check_dim("prior logits", network.arch.codes, p.k())?,
            (None, false) => {}
            (Some(_), false) => return Err(Error::Validation("a connected model has no prior".into())),
            (None, true) => return Err(Error::Validation("a disconnected model needs a prior".into())),
        }
        Ok(Self {
            network,
            prior,
            scaler: None,
            head: None,
        })
    }

    /// Freshly initialized network with a uniform prior.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let network = Network::init(arch, seed)?;
        let prior = arch.disconnected.then(|| PriorState::uniform(arch.codes));
        Self::new(network, prior)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.network.arch
    }

    pub fn with_scaler(mut self, scaler: Scaler) -> Result<Self> {
        check_dim("scaler", self.arch().embedding_dim, scaler.dim())?;
        self.scaler = Some(scaler);
        Ok(self)
    }

    pub fn with_head(mut self, head: ClassifierHead) -> Result<Self> {
        check_dim("classifier head", self.arch().embedding_dim, head.dim)?;
        self.head = Some(head);
        Ok(self)
    }

    /// Scales a raw embedding with the bundled scaler.
    pub fn scale(&self, t_raw: &[f32]) -> Result<Vec<f32>> {
        self.scaler
            .as_ref()
            .ok_or_else(|| Error::Validation("bundle has no scaler".into()))?
            .scale(t_raw, Direction::Forward)
    }

    pub fn project(&self, t_scaled: &[f32], k: usize, seed: u64) -> Result<ProjectionResult> {
        projection::project_sampling(&self.network, t_scaled, k, seed)
    }

    pub fn project_gd(&self, t_scaled: &[f32], cfg: &GdConfig, seed: u64) -> Result<ProjectionResult> {
        projection::project_gd(&self.network, t_scaled, cfg, seed)
    }

    fn head(&self) -> Result<&ClassifierHead> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::Validation("bundle has no classifier head".into()))
    }

    pub fn classify(&self, t_scaled: &[f32]) -> Result<usize> {
        defense::classify(self.head()?, t_scaled, self.scaler.as_ref())
    }

    pub fn classify_defended(&self, t_scaled: &[f32], k: usize, seed: u64) -> Result<usize> {
        defense::classify_defended(self.head()?, &self.network, self.scaler.as_ref(), t_scaled, k, seed)
    }

    /// Every parameter, buffer, prior logit and head weight is finite.
    pub fn validate(&self) -> Result<()> {
        self.network.check_shapes()?;
        let net = &self.network;
        let mut seqs = alloc::vec![("generator", &net.generator), ("trunk", &net.trunk), ("d_head", &net.d_head)];
        if let Some(q) = &net.q_head {
            seqs.push(("q_head", q));
        }
        for (prefix, seq) in seqs {
            for (name, p) in seq.param_names(prefix).iter().zip(seq.params()) {
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!("parameter {name} is not finite")));
                }
            }
            if seq.buffers().iter().any(|b| b.iter().any(|v| !v.is_finite())) {
                return Err(Error::Validation(format!("{prefix} running statistics are not finite")));
            }
        }
        if let Some(p) = &self.prior {
            PriorState::from_logits(p.logits().to_vec())?;
        }
        if let Some(h) = &self.head {
            ClassifierHead::new(h.classes, h.dim, h.weight.clone(), h.bias.clone(), h.space)?;
        }
        Ok(())
    }
}
