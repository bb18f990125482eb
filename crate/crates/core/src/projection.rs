//! On-manifold projection and the distance to the learned manifold.
//!
//! An embedding `t` is assigned the code `c_t = argmax Q(·|t)`; `k` latents
//! are drawn from `N(0, I)` and `t̂ = G(z*, c_t)` for the candidate closest
//! to `t`. The distance `d_G(t) = ‖t − t̂‖₂`. Everything happens in scaled
//! space with batch-norm layers in evaluation mode.
//!
//! Candidates come from a ChaCha stream seeded per call, drawn row after row,
//! so the first `k₁` candidates of a `k₂ ≥ k₁` call are exactly the `k₁`
//! candidates of the smaller call.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::EmbeddingDataset;
use crate::error::{check_dim, Error, Result};
use crate::nets::{argmax, Batch, Mode, Network};
use crate::rng;

pub const DEFAULT_K: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    /// Reconstruction in scaled space.
    pub t_hat: Vec<f32>,
    /// Inferred code; `None` for the connected model.
    pub code: Option<usize>,
    pub z_star: Vec<f32>,
    /// `‖t − t̂‖₂`.
    pub distance: f64,
    pub candidates_evaluated: usize,
}

/// Gradient-descent refinement of sampled latents.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GdConfig {
    /// Step size `α`.
    pub alpha: f64,
    /// Step count `N`.
    pub steps: usize,
    /// Initial latents per input.
    pub k_init: usize,
    /// Revert any step that increases the objective and stop refining that candidate.
    pub reject: bool,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            steps: 10,
            k_init: DEFAULT_K,
            reject: true,
        }
    }
}

impl GdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Validation("GD step size must be positive".into()));
        }
        if self.steps == 0 || self.k_init == 0 {
            return Err(Error::Validation("GD needs at least one step and one initial latent".into()));
        }
        Ok(())
    }
}

/// How candidate latents are drawn across the rows of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum CandidateMode {
    /// Fresh candidates per row, seeded by the row content.
    #[default]
    PerRow,
    /// One candidate set for every row.
    Shared,
}

/// Seed for one row: the base seed mixed with a hash of the row's bits.
pub fn row_seed(seed: u64, row: &[f32]) -> u64 {
    rng::derive_seed(seed, rng::content_hash(row))
}

/// `k × d` standard-normal latents; smaller `k` yields a prefix.
pub fn sample_candidates(k: usize, d: usize, seed: u64) -> Vec<f32> {
    let mut r = rng::seeded(seed);
    (0..k * d).map(|_| rng::standard_normal(&mut r) as f32).collect()
}

pub fn l2(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>();
    num_traits::Float::sqrt(s)
}

fn check_input(net: &Network<f32>, t: &[f32]) -> Result<()> {
    check_dim("embedding", net.arch.embedding_dim, t.len())?;
    if let Some(i) = t.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("embedding entry {i} is not finite")));
    }
    Ok(())
}

/// `argmax Q(·|t)`, lowest index on ties.
pub fn infer_code(net: &Network<f32>, t: &[f32]) -> Result<usize> {
    if !net.has_codes() {
        return Err(Error::Unsupported("code inference needs a disconnected model".into()));
    }
    check_input(net, t)?;
    Ok(argmax(&net.q_forward(t, Mode::Eval)?))
}

fn code_for(net: &Network<f32>, t: &[f32]) -> Result<Option<usize>> {
    if net.has_codes() {
        infer_code(net, t).map(Some)
    } else {
        Ok(None)
    }
}

/// Generator outputs (`k × dim`) for `k` latents sharing one code.
fn generate_all(net: &Network<f32>, z: &[f32], code: Option<usize>) -> Result<Vec<f32>> {
    let k = z.len() / net.arch.latent_dim;
    let codes = code.map(|c| vec![c; k]);
    Ok(net.generate(z, codes.as_deref(), Mode::Eval)?.0.data)
}

/// Best of the given candidates (`k × d`), lowest index on ties.
pub fn project_from_candidates(net: &Network<f32>, t: &[f32], candidates: &[f32]) -> Result<ProjectionResult> {
    check_input(net, t)?;
    let d = net.arch.latent_dim;
    if candidates.is_empty() || !candidates.len().is_multiple_of(d) {
        return Err(Error::Validation(format!(
            "candidate latents must be a non-empty multiple of d = {d}"
        )));
    }
    let code = code_for(net, t)?;
    let out = generate_all(net, candidates, code)?;
    pick_best(net, t, candidates, &out, code)
}

fn pick_best(net: &Network<f32>, t: &[f32], z: &[f32], out: &[f32], code: Option<usize>) -> Result<ProjectionResult> {
    let (d, dim) = (net.arch.latent_dim, net.arch.embedding_dim);
    let k = z.len() / d;
    let mut best: Option<(usize, f64)> = None;
    for i in 0..k {
        let dist = l2(t, &out[i * dim..(i + 1) * dim]);
        if dist.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| dist < b) {
            best = Some((i, dist));
        }
    }
    let (i, distance) = best.ok_or_else(|| Error::Numeric("every candidate reconstruction is NaN".into()))?;
    Ok(ProjectionResult {
        t_hat: out[i * dim..(i + 1) * dim].to_vec(),
        code,
        z_star: z[i * d..(i + 1) * d].to_vec(),
        distance,
        candidates_evaluated: k,
    })
}

pub fn project_sampling(net: &Network<f32>, t: &[f32], k: usize, seed: u64) -> Result<ProjectionResult> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    project_from_candidates(net, t, &sample_candidates(k, net.arch.latent_dim, seed))
}

pub fn distance_to_manifold(net: &Network<f32>, t: &[f32], k: usize, seed: u64) -> Result<f64> {
    project_sampling(net, t, k, seed).map(|r| r.distance)
}

/// Squared distances `‖G(z_i, c) − t‖²` and their gradients with respect to
/// each `z_i`.
fn objective_and_grad(net: &Network<f32>, t: &[f32], z: &[f32], code: Option<usize>) -> Result<(Vec<f64>, Vec<f32>)> {
    let (d, dim) = (net.arch.latent_dim, net.arch.embedding_dim);
    let k = z.len() / d;
    let codes = code.map(|c| vec![c; k]);
    let input = net.generator_input(z, codes.as_deref())?;
    let width = input.channels;
    let (out, tape) = net.generator.forward(input, Mode::Eval);
    let mut f = vec![0.0; k];
    let mut dy = vec![0.0f32; out.data.len()];
    for i in 0..k {
        let row = &out.data[i * dim..(i + 1) * dim];
        let mut s = 0.0f64;
        for j in 0..dim {
            let diff = f64::from(row[j]) - f64::from(t[j]);
            s += diff * diff;
            dy[i * dim + j] = (2.0 * diff) as f32;
        }
        f[i] = s;
    }
    let dy = Batch::new(out.n, out.channels, out.len, dy);
    let dx = net
        .generator
        .backward(&tape, dy, None, true)
        .expect("input gradient requested");
    let mut g = Vec::with_capacity(k * d);
    for i in 0..k {
        g.extend_from_slice(&dx.data[i * width..i * width + d]);
    }
    Ok((f, g))
}

/// Refines `k_init` sampled latents by `N` gradient-descent steps on
/// `‖G(z, c_t) − t‖²` and returns the best final candidate.
pub fn project_gd(net: &Network<f32>, t: &[f32], cfg: &GdConfig, seed: u64) -> Result<ProjectionResult> {
    cfg.validate()?;
    check_input(net, t)?;
    let d = net.arch.latent_dim;
    let k = cfg.k_init;
    let code = code_for(net, t)?;
    let mut z = sample_candidates(k, d, seed);
    let mut alive = vec![true; k];
    let mut active = vec![true; k];
    let (mut f, mut g) = objective_and_grad(net, t, &z, code)?;
    for _ in 0..cfg.steps {
        if !active.iter().any(|&a| a) {
            break;
        }
        let mut next = z.clone();
        for i in (0..k).filter(|&i| active[i]) {
            for j in 0..d {
                let v = f64::from(z[i * d + j]) - cfg.alpha * f64::from(g[i * d + j]);
                next[i * d + j] = v as f32;
            }
        }
        let (fn_, gn) = objective_and_grad(net, t, &next, code)?;
        for i in 0..k {
            if !active[i] {
                continue;
            }
            let bad = !fn_[i].is_finite() || next[i * d..(i + 1) * d].iter().any(|v| !v.is_finite());
            if bad {
                alive[i] = false;
                active[i] = false;
            } else if cfg.reject && fn_[i] > f[i] {
                active[i] = false;
            } else {
                z[i * d..(i + 1) * d].copy_from_slice(&next[i * d..(i + 1) * d]);
                g[i * d..(i + 1) * d].copy_from_slice(&gn[i * d..(i + 1) * d]);
                f[i] = fn_[i];
            }
        }
    }
    let keep: Vec<usize> = (0..k).filter(|&i| alive[i]).collect();
    if keep.is_empty() {
        return Err(Error::Numeric("gradient descent diverged for every candidate".into()));
    }
    let zk: Vec<f32> = keep.iter().flat_map(|&i| z[i * d..(i + 1) * d].iter().copied()).collect();
    let out = generate_all(net, &zk, code)?;
    let mut r = pick_best(net, t, &zk, &out, code)?;
    r.candidates_evaluated = k;
    Ok(r)
}

/// Projections of every row, with per-row or shared candidate seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchProjection {
    pub projected: EmbeddingDataset,
    pub distances: Vec<f64>,
    pub codes: Vec<Option<usize>>,
}

pub fn seed_for(seed: u64, row: &[f32], mode: CandidateMode) -> u64 {
    match mode {
        CandidateMode::PerRow => row_seed(seed, row),
        CandidateMode::Shared => seed,
    }
}

pub fn project_batch(
    net: &Network<f32>,
    ts: &EmbeddingDataset,
    k: usize,
    seed: u64,
    mode: CandidateMode,
) -> Result<BatchProjection> {
    let results = ts
        .rows()
        .enumerate()
        .map(|(i, t)| project_sampling(net, t, k, seed_for(seed, t, mode)).map_err(|e| with_row(e, i)))
        .collect::<Result<Vec<_>>>()?;
    collect_batch(ts, results)
}

/// Assembles per-row results (in row order) into a [`BatchProjection`].
pub fn collect_batch(ts: &EmbeddingDataset, results: Vec<ProjectionResult>) -> Result<BatchProjection> {
    let mut data = Vec::with_capacity(ts.n() * ts.dim());
    let mut distances = Vec::with_capacity(ts.n());
    let mut codes = Vec::with_capacity(ts.n());
    for r in results {
        data.extend_from_slice(&r.t_hat);
        distances.push(r.distance);
        codes.push(r.code);
    }
    let projected = EmbeddingDataset::new(ts.dim(), data, ts.labels().map(<[i32]>::to_vec), true)?;
    Ok(BatchProjection {
        projected,
        distances,
        codes,
    })
}

/// Prefixes an error message with the offending row.
pub fn with_row(e: Error, row: usize) -> Error {
    match e {
        Error::Validation(m) => Error::Validation(format!("row {row}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("row {row}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ArchConfig, Layer};

    fn net(seed: u64) -> Network<f32> {
        let mut arch = ArchConfig::mlp(6, 3, 2);
        arch.mlp_widths = Some(vec![16]);
        Network::init(&arch, seed).unwrap()
    }

    fn probe(seed: u64) -> Vec<f32> {
        let mut r = rng::seeded(seed);
        (0..6).map(|_| (rng::uniform(&mut r) * 2.0 - 1.0) as f32).collect()
    }

    #[test]
    fn candidates_are_nested() {
        let a = sample_candidates(5, 3, 9);
        let b = sample_candidates(50, 3, 9);
        assert_eq!(a[..], b[..15]);
    }

    #[test]
    fn forced_member_has_zero_distance() {
        let z0 = [0.3f32, -1.2];
        let connected = Network::<f32>::init(&ArchConfig::mlp(6, 3, 2).connected(), 1).unwrap();
        let t = connected.generator_forward(&z0, None, Mode::Eval).unwrap();
        let mut cand = sample_candidates(4, 2, 3);
        cand.extend_from_slice(&z0);
        let r = project_from_candidates(&connected, &t, &cand).unwrap();
        assert!(r.distance < 1e-6);
        assert_eq!(r.z_star, z0);

        let n = net(1);
        for c in 0..3 {
            let t = n.generator_forward(&z0, Some(c), Mode::Eval).unwrap();
            if infer_code(&n, &t).unwrap() == c {
                let r = project_from_candidates(&n, &t, &cand).unwrap();
                assert!(r.distance < 1e-6);
            }
        }
    }

    #[test]
    fn result_fields_are_consistent() {
        let n = net(2);
        for s in 0..10 {
            let t = probe(s);
            let r = project_sampling(&n, &t, 7, s).unwrap();
            assert!((r.distance - l2(&t, &r.t_hat)).abs() < 1e-12);
            assert_eq!(r.candidates_evaluated, 7);
            let again = n.generator_forward(&r.z_star, r.code, Mode::Eval).unwrap();
            assert_eq!(again, r.t_hat);
            assert_eq!(r.code, Some(argmax(&n.q_forward(&t, Mode::Eval).unwrap())));
            assert_eq!(project_sampling(&n, &t, 7, s).unwrap(), r);
        }
    }

    #[test]
    fn more_candidates_never_hurt() {
        let n = net(3);
        for s in 0..20 {
            let t = probe(100 + s);
            let ds: Vec<f64> = [1, 5, 25, 125]
                .iter()
                .map(|&k| distance_to_manifold(&n, &t, k, s).unwrap())
                .collect();
            assert!(ds.windows(2).all(|w| w[1] <= w[0]), "{ds:?}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let n = net(4);
        let t = probe(1);
        assert!(matches!(project_sampling(&n, &t, 0, 1), Err(Error::Validation(_))));
        assert!(matches!(project_sampling(&n, &t[..5], 3, 1), Err(Error::Dimension { .. })));
        let mut bad = t.clone();
        bad[2] = f32::NAN;
        assert!(matches!(project_sampling(&n, &bad, 3, 1), Err(Error::Validation(_))));
        let gd = GdConfig { steps: 0, ..GdConfig::default() };
        assert!(project_gd(&n, &t, &gd, 1).is_err());
        let connected = Network::<f32>::init(&ArchConfig::mlp(6, 3, 2).connected(), 1).unwrap();
        assert!(matches!(infer_code(&connected, &t), Err(Error::Unsupported(_))));
        let r = project_sampling(&connected, &t, 3, 1).unwrap();
        assert_eq!(r.code, None);
    }

    #[test]
    fn gd_zero_step_limit_matches_sampling() {
        let n = net(5);
        for s in 0..5 {
            let t = probe(200 + s);
            let cfg = GdConfig {
                alpha: 1e-12,
                steps: 1,
                k_init: 15,
                reject: true,
            };
            let a = project_gd(&n, &t, &cfg, s).unwrap();
            let b = project_sampling(&n, &t, 15, s).unwrap();
            assert!((a.distance - b.distance).abs() < 1e-6);
        }
    }

    #[test]
    fn gd_with_rejection_never_worsens() {
        let n = net(6);
        for s in 0..10 {
            let t = probe(300 + s);
            let base = project_sampling(&n, &t, 15, s).unwrap();
            {
                let reject = true;
                let cfg = GdConfig {
                    alpha: 0.1,
                    steps: 10,
                    k_init: 15,
                    reject,
                };
                assert!(project_gd(&n, &t, &cfg, s).unwrap().distance <= base.distance);
            }
        }
    }

    #[test]
    fn gd_reaches_least_squares_optimum_of_affine_generator() {
        // G(z) = A z + b: the optimum is the least-squares fit
        let mut n = Network::<f32>::init(&ArchConfig::mlp(3, 1, 2).connected(), 7).unwrap();
        let a = [1.0f32, 0.5, -0.3, 0.8, 0.2, -0.6];
        let b = [0.1f32, -0.2, 0.05];
        n.generator.layers = vec![Layer::Linear(crate::nets::layers::Linear {
            in_features: 2,
            out_features: 3,
            weight: a.to_vec(),
            bias: Some(b.to_vec()),
        })];
        let t = [0.9f32, -0.4, 0.7];
        // normal equations (AᵀA) z = Aᵀ(t − b)
        let col = |j: usize| [f64::from(a[j]), f64::from(a[2 + j]), f64::from(a[4 + j])];
        let (c0, c1) = (col(0), col(1));
        let r: Vec<f64> = (0..3).map(|i| f64::from(t[i]) - f64::from(b[i])).collect();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        let (m00, m01, m11) = (dot(&c0, &c0), dot(&c0, &c1), dot(&c1, &c1));
        let (v0, v1) = (dot(&c0, &r), dot(&c1, &r));
        let det = m00 * m11 - m01 * m01;
        let z = [(m11 * v0 - m01 * v1) / det, (m00 * v1 - m01 * v0) / det];
        let fit: Vec<f64> = (0..3).map(|i| c0[i] * z[0] + c1[i] * z[1]).collect();
        let best = dot(
            &r.iter().zip(&fit).map(|(p, q)| p - q).collect::<Vec<_>>(),
            &r.iter().zip(&fit).map(|(p, q)| p - q).collect::<Vec<_>>(),
        )
        .sqrt();
        let cfg = GdConfig {
            alpha: 0.2,
            steps: 500,
            k_init: 3,
            reject: true,
        };
        let res = project_gd(&n, &t, &cfg, 1).unwrap();
        assert!((res.distance - best).abs() < 1e-4, "{} vs {best}", res.distance);
    }

    #[test]
    fn batch_matches_single_calls() {
        let n = net(8);
        let rows: Vec<Vec<f32>> = (0..12).map(probe).collect();
        let ds = EmbeddingDataset::from_rows(&rows, None, true).unwrap();
        let b = project_batch(&n, &ds, 9, 42, CandidateMode::PerRow).unwrap();
        for (i, t) in rows.iter().enumerate() {
            let r = project_sampling(&n, t, 9, row_seed(42, t)).unwrap();
            assert_eq!(b.projected.row(i), &r.t_hat[..]);
            assert_eq!(b.distances[i], r.distance);
        }
        let mut rev = rows.clone();
        rev.reverse();
        let rb = project_batch(&n, &EmbeddingDataset::from_rows(&rev, None, true).unwrap(), 9, 42, CandidateMode::PerRow)
            .unwrap();
        let mut d = rb.distances.clone();
        d.reverse();
        assert_eq!(d, b.distances);
        let shared = project_batch(&n, &ds, 9, 42, CandidateMode::Shared).unwrap();
        assert_eq!(shared.distances[3], project_sampling(&n, &rows[3], 9, 42).unwrap().distance);
    }
}
