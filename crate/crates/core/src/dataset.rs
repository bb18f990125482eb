//! In-memory embedding datasets, per-dimension scaling and synthetic
//! clustered data.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, Rng};

/// A row-major `n × dim` matrix of embeddings with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    data: Vec<f32>,
    labels: Option<Vec<i32>>,
    scaled: bool,
}

impl EmbeddingDataset {
    /// Builds a dataset, checking every invariant. Reports the first row that
    /// holds a non-finite value.
    pub fn new(dim: usize, data: Vec<f32>, labels: Option<Vec<i32>>, scaled: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("embedding dimension must be at least 1".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Validation(format!(
                "{} values do not form rows of length {dim}",
                data.len()
            )));
        }
        let n = data.len() / dim;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value in row {} (column {})",
                pos / dim,
                pos % dim
            )));
        }
        if scaled {
            if let Some(pos) = data.iter().position(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!(
                    "scaled dataset has out-of-range value {} in row {}",
                    data[pos],
                    pos / dim
                )));
            }
        }
        if let Some(l) = &labels {
            check_dim("labels", n, l.len())?;
            if let Some(pos) = l.iter().position(|&y| y < 0) {
                return Err(Error::Validation(format!("negative label in row {pos}")));
            }
        }
        Ok(Self {
            dim,
            data,
            labels,
            scaled,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], labels: Option<Vec<i32>>, scaled: bool) -> Result<Self> {
        let dim = rows.first().map_or(1, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Validation(format!(
                    "row {i} has {} entries, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data, labels, scaled)
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> core::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    /// Number of distinct classes, i.e. `max(label) + 1`.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m as usize + 1))
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self {
            dim: self.dim,
            data,
            labels,
            scaled: self.scaled,
        }
    }

    pub fn with_labels(mut self, labels: Option<Vec<i32>>) -> Result<Self> {
        if let Some(l) = &labels {
            check_dim("labels", self.n(), l.len())?;
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn into_parts(self) -> (usize, Vec<f32>, Option<Vec<i32>>, bool) {
        (self.dim, self.data, self.labels, self.scaled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Per-dimension min/max affine map into the generator's `[-1, 1]` output range.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
    pub epsilon: f32,
}

pub const DEFAULT_SCALER_EPSILON: f32 = 1e-8;

impl Scaler {
    pub fn fit(ds: &EmbeddingDataset) -> Result<Self> {
        if ds.is_scaled() {
            return Err(Error::Validation("scaler must be fit on unscaled data".into()));
        }
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut lo = ds.row(0).to_vec();
        let mut hi = lo.clone();
        for row in ds.rows().skip(1) {
            for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(row) {
                *l = l.min(v);
                *h = h.max(v);
            }
        }
        Ok(Self {
            lo,
            hi,
            epsilon: DEFAULT_SCALER_EPSILON,
        })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn width(&self, i: usize) -> f64 {
        (f64::from(self.hi[i]) - f64::from(self.lo[i])).max(f64::from(self.epsilon))
    }

    pub fn scale(&self, t: &[f32], direction: Direction) -> Result<Vec<f32>> {
        check_dim("scaler input", self.dim(), t.len())?;
        let out = t
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (lo, hi, w) = (f64::from(self.lo[i]), f64::from(self.hi[i]), self.width(i));
                match direction {
                    Direction::Forward => ((2.0 * f64::from(v) - lo - hi) / w).clamp(-1.0, 1.0) as f32,
                    Direction::Inverse => ((f64::from(v) * w + lo + hi) / 2.0) as f32,
                }
            })
            .collect();
        Ok(out)
    }

    /// Scales every row forward; the result carries `scaled = true`.
    pub fn scale_dataset(&self, ds: &EmbeddingDataset) -> Result<EmbeddingDataset> {
        if ds.is_scaled() {
            return Err(Error::Validation("dataset is already scaled".into()));
        }
        check_dim("dataset", self.dim(), ds.dim())?;
        let mut data = Vec::with_capacity(ds.data().len());
        for row in ds.rows() {
            data.extend(self.scale(row, Direction::Forward)?);
        }
        EmbeddingDataset::new(ds.dim(), data, ds.labels.clone(), true)
    }

    pub fn unscale_dataset(&self, ds: &EmbeddingDataset) -> Result<EmbeddingDataset> {
        if !ds.is_scaled() {
            return Err(Error::Validation("dataset is not scaled".into()));
        }
        check_dim("dataset", self.dim(), ds.dim())?;
        let mut data = Vec::with_capacity(ds.data().len());
        for row in ds.rows() {
            data.extend(self.scale(row, Direction::Inverse)?);
        }
        EmbeddingDataset::new(ds.dim(), data, ds.labels.clone(), false)
    }
}

/// Parameters for a mixture of well-separated Gaussian clusters.
///
/// With `intrinsic_dim = None` each cluster is isotropic in all `dim`
/// coordinates. `Some(m)` confines each cluster's spread to its own random
/// `m`-dimensional subspace, which leaves off-manifold directions to displace
/// points along.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSpec {
    pub num_clusters: usize,
    pub dim: usize,
    pub points_per_cluster: usize,
    pub center_scale: f64,
    pub sigma: f64,
    pub seed: u64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub intrinsic_dim: Option<usize>,
}

/// Minimum center separation, in units of `sigma`.
pub const MIN_SEPARATION_SIGMAS: f64 = 6.0;
const MAX_CENTER_DRAWS: usize = 1000;
const MAX_POINT_DRAWS: usize = 1000;

/// Cluster geometry behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterGeometry {
    pub centers: Vec<Vec<f64>>,
    /// Orthonormal spread directions per cluster (`intrinsic_dim` vectors each),
    /// empty for isotropic clusters.
    pub bases: Vec<Vec<Vec<f64>>>,
}

impl ClusterGeometry {
    pub fn nearest_center(&self, p: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (j, c) in self.centers.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 {
            return Err(Error::Config("num_clusters must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if !(self.center_scale >= 0.0 && self.center_scale.is_finite()) {
            return Err(Error::Config("center_scale must be non-negative".into()));
        }
        if let Some(m) = self.intrinsic_dim {
            if m == 0 || m > self.dim {
                return Err(Error::Config(format!("intrinsic_dim must be in 1..={}", self.dim)));
            }
        }
        Ok(())
    }

    /// Draws cluster centers (uniform in `[-center_scale, center_scale]^dim`)
    /// until all pairs are at least six sigmas apart, plus per-cluster spread
    /// bases when `intrinsic_dim` is set.
    pub fn geometry(&self) -> Result<ClusterGeometry> {
        self.validate()?;
        let mut rng = rng::seeded(rng::derive_seed(self.seed, 0xC3A7));
        let min_sep = MIN_SEPARATION_SIGMAS * self.sigma;
        let mut centers = None;
        for _ in 0..MAX_CENTER_DRAWS {
            let cand: Vec<Vec<f64>> = (0..self.num_clusters)
                .map(|_| {
                    (0..self.dim)
                        .map(|_| (2.0 * rng::uniform(&mut rng) - 1.0) * self.center_scale)
                        .collect()
                })
                .collect();
            let separated = (0..cand.len()).all(|i| {
                (i + 1..cand.len()).all(|j| Float::sqrt(sq_dist(&cand[i], &cand[j])) >= min_sep)
            });
            if separated {
                centers = Some(cand);
                break;
            }
        }
        let centers = centers.ok_or_else(|| {
            Error::Config(format!(
                "could not place {} centers {min_sep} apart within {MAX_CENTER_DRAWS} draws",
                self.num_clusters
            ))
        })?;
        let bases = match self.intrinsic_dim {
            None => Vec::new(),
            Some(m) => (0..self.num_clusters)
                .map(|_| orthonormal_basis(self.dim, m, &mut rng))
                .collect(),
        };
        Ok(ClusterGeometry { centers, bases })
    }
}

/// `m` orthonormal vectors in `R^dim` by Gram-Schmidt on Gaussian draws.
fn orthonormal_basis(dim: usize, m: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v: Vec<f64> = (0..dim).map(|_| rng::standard_normal(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = Float::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Samples `points_per_cluster` points around every center, labelled by
/// cluster id, in cluster-major order. A draw that lands closer to a foreign
/// center than to its own is redrawn.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingDataset> {
    make_synthetic_with_geometry(spec).map(|(ds, _)| ds)
}

pub fn make_synthetic_with_geometry(
    spec: &SyntheticSpec,
) -> Result<(EmbeddingDataset, ClusterGeometry)> {
    let geometry = spec.geometry()?;
    let ds = geometry.sample(spec.sigma, spec.points_per_cluster, rng::derive_seed(spec.seed, 0x5A3B))?;
    Ok((ds, geometry))
}

impl ClusterGeometry {
    /// Draws `per_cluster` raw points around every center with spread
    /// `sigma`, labelled by cluster id, in cluster-major order. A draw that
    /// lands closer to a foreign center than to its own is redrawn.
    pub fn sample(&self, sigma: f64, per_cluster: usize, seed: u64) -> Result<EmbeddingDataset> {
        let dim = self.centers.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::Config("geometry has no centers".into()));
        }
        let mut rng = rng::seeded(seed);
        let n = self.centers.len() * per_cluster;
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        let mut point = alloc::vec![0.0f64; dim];
        for (j, center) in self.centers.iter().enumerate() {
            for _ in 0..per_cluster {
                let mut accepted = false;
                for _ in 0..MAX_POINT_DRAWS {
                    point.copy_from_slice(center);
                    match self.bases.get(j) {
                        None => point
                            .iter_mut()
                            .for_each(|p| *p += sigma * rng::standard_normal(&mut rng)),
                        Some(basis) => {
                            for b in basis {
                                let a = sigma * rng::standard_normal(&mut rng);
                                point.iter_mut().zip(b).for_each(|(p, x)| *p += a * x);
                            }
                        }
                    }
                    let own = sq_dist(&point, center);
                    let foreign = self
                        .centers
                        .iter()
                        .enumerate()
                        .filter(|&(i, _)| i != j)
                        .all(|(_, c)| sq_dist(&point, c) > own);
                    if foreign {
                        accepted = true;
                        break;
                    }
                }
                if !accepted {
                    return Err(Error::Config(format!(
                        "cluster {j} keeps producing points nearer a foreign center"
                    )));
                }
                data.extend(point.iter().map(|&v| v as f32));
                labels.push(j as i32);
            }
        }
        EmbeddingDataset::new(dim, data, Some(labels), false)
    }
}
