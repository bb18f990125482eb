//! Whole-dataset operations shared by the command line and the tests:
//! parallel projection, evaluation, k-sweeps and the connected-baseline
//! comparison.

use rayon::prelude::*;
use serde_json::Value;
use tmd_core::defense::{self, ClassifierHead};
use tmd_core::nets::Preset;
use tmd_core::projection::{self, BatchProjection, CandidateMode, GdConfig};
use tmd_core::training::{self, TrainReport};
use tmd_core::{ArchConfig, EmbeddingDataset, ModelBundle, Scaler, TrainConfig};

use crate::config::{ArchSection, Config};
use crate::error::{Error, Result};
use crate::report::{mean, median};

pub fn arch_for(cfg: &TrainConfig, section: &ArchSection, dim: usize) -> Result<ArchConfig> {
    let preset = Preset::parse(&section.preset)
        .ok_or_else(|| Error::Usage(format!("unknown preset {:?}", section.preset)))?;
    let mut arch = cfg.arch(preset, dim);
    arch.mlp_widths = section.mlp_widths.clone();
    arch.validate()?;
    Ok(arch)
}

/// `ds` in the bundle's scaled space: unscaled data goes through the bundled scaler.
pub fn to_scaled(ds: &EmbeddingDataset, bundle: &ModelBundle) -> Result<EmbeddingDataset> {
    if ds.dim() != bundle.arch().embedding_dim {
        return Err(tmd_core::Error::Dimension {
            context: "dataset",
            expected: bundle.arch().embedding_dim,
            got: ds.dim(),
        }
        .into());
    }
    if ds.is_scaled() {
        return Ok(ds.clone());
    }
    let scaler = bundle
        .scaler
        .as_ref()
        .ok_or_else(|| Error::Usage("data is unscaled and the bundle has no scaler".into()))?;
    Ok(scaler.scale_dataset(ds)?)
}

/// Fits a scaler when `ds` is unscaled, trains, and returns the bundle with
/// the scaler attached.
pub fn train_on(ds: &EmbeddingDataset, cfg: &TrainConfig, arch: &ArchConfig) -> Result<(ModelBundle, TrainReport)> {
    let (scaled, scaler) = if ds.is_scaled() {
        (ds.clone(), None)
    } else {
        let s = Scaler::fit(ds)?;
        (s.scale_dataset(ds)?, Some(s))
    };
    let (mut bundle, report) = training::train(&scaled, cfg, arch)?;
    if let Some(s) = scaler {
        bundle = bundle.with_scaler(s)?;
    }
    Ok((bundle, report))
}

/// Sampling projection of every row, rows processed in parallel.
pub fn project_all(
    bundle: &ModelBundle,
    ds: &EmbeddingDataset,
    k: usize,
    seed: u64,
    mode: CandidateMode,
) -> Result<BatchProjection> {
    let net = &bundle.network;
    let results = (0..ds.n())
        .into_par_iter()
        .map(|i| {
            let t = ds.row(i);
            projection::project_sampling(net, t, k, projection::seed_for(seed, t, mode))
                .map_err(|e| projection::with_row(e, i))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(projection::collect_batch(ds, results)?)
}

/// Gradient-descent projection of every row, rows processed in parallel.
pub fn project_all_gd(
    bundle: &ModelBundle,
    ds: &EmbeddingDataset,
    gd: &GdConfig,
    seed: u64,
    mode: CandidateMode,
) -> Result<BatchProjection> {
    let net = &bundle.network;
    let results = (0..ds.n())
        .into_par_iter()
        .map(|i| {
            let t = ds.row(i);
            projection::project_gd(net, t, gd, projection::seed_for(seed, t, mode))
                .map_err(|e| projection::with_row(e, i))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(projection::collect_batch(ds, results)?)
}

/// Distances in raw space: `‖t_raw − unscale(t̂)‖₂` per row.
pub fn raw_distances(bundle: &ModelBundle, raw: &EmbeddingDataset, proj: &BatchProjection) -> Result<Vec<f64>> {
    let scaler = bundle
        .scaler
        .as_ref()
        .ok_or_else(|| Error::Usage("raw-space distances need a bundle with a scaler".into()))?;
    let back = scaler.unscale_dataset(&proj.projected)?;
    Ok(raw.rows().zip(back.rows()).map(|(a, b)| projection::l2(a, b)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub n: usize,
    pub undefended: f64,
    pub defended: f64,
}

/// Undefended and defended accuracy of the bundled head on a labeled, scaled dataset.
pub fn evaluate(bundle: &ModelBundle, head: &ClassifierHead, ds: &EmbeddingDataset, k: usize, seed: u64, mode: CandidateMode) -> Result<Accuracy> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Usage("evaluation needs a labeled dataset".into()))?;
    let proj = project_all(bundle, ds, k, seed, mode)?;
    let scaler = bundle.scaler.as_ref();
    let mut hits_u = 0usize;
    let mut hits_d = 0usize;
    for ((t, t_hat), &y) in ds.rows().zip(proj.projected.rows()).zip(labels) {
        hits_u += usize::from(defense::classify(head, t, scaler)? == y as usize);
        hits_d += usize::from(defense::classify(head, t_hat, scaler)? == y as usize);
    }
    let n = ds.n();
    let frac = |h: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(Accuracy {
        n,
        undefended: frac(hits_u),
        defended: frac(hits_d),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub median_distance: f64,
    pub defended_accuracy: Option<f64>,
}

/// Median distance (and defended accuracy with a head and labels) per `k`.
/// Candidates are nested across `k` for each row.
pub fn sweep_k(bundle: &ModelBundle, ds: &EmbeddingDataset, ks: &[usize], seed: u64, mode: CandidateMode) -> Result<Vec<SweepRow>> {
    if ks.is_empty() {
        return Err(Error::Usage("k list must not be empty".into()));
    }
    if ks.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Usage("k list must be ascending".into()));
    }
    ks.iter()
        .map(|&k| {
            let proj = project_all(bundle, ds, k, seed, mode)?;
            let defended_accuracy = match (&bundle.head, ds.labels()) {
                (Some(h), Some(labels)) => {
                    let hits = proj
                        .projected
                        .rows()
                        .zip(labels)
                        .map(|(t, &y)| defense::classify(h, t, bundle.scaler.as_ref()).map(|c| c == y as usize))
                        .collect::<Result<Vec<_>, _>>()?
                        .into_iter()
                        .filter(|&b| b)
                        .count();
                    Some(hits as f64 / ds.n().max(1) as f64)
                }
                _ => None,
            };
            Ok(SweepRow {
                k,
                median_distance: median(&proj.distances).unwrap_or(f64::NAN),
                defended_accuracy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub variant: &'static str,
    pub seed: u64,
    /// Mean distance to the manifold over the held-out rows.
    pub rl: Option<f64>,
    /// Defended accuracy on the held-out clean rows.
    pub cln: Option<f64>,
    /// Defended accuracy on the perturbed set.
    pub aua: Option<f64>,
    pub error: Option<String>,
}

pub const VARIANTS: [&str; 2] = ["disconnected", "connected"];

/// Effective per-variant configuration; `codes` (K) is absent for the connected model.
pub fn config_echo(cfg: &Config) -> Result<Value> {
    let mut out = serde_json::Map::new();
    for variant in VARIANTS {
        let mut t = cfg.train.clone();
        t.baseline_mode = variant == "connected";
        let mut v = serde_json::to_value(&t)?;
        if t.baseline_mode {
            if let Value::Object(m) = &mut v {
                m.remove("codes");
                m.remove("lr_p");
                m.remove("uniform_codes");
            }
        }
        let mut entry = serde_json::Map::new();
        entry.insert("train".into(), v);
        entry.insert("arch".into(), serde_json::to_value(&cfg.arch)?);
        out.insert(variant.into(), Value::Object(entry));
    }
    Ok(Value::Object(out))
}

/// Trains the disconnected and the connected model on identical data, seeds
/// and budgets and measures each.
pub fn baseline_compare(
    ds: &EmbeddingDataset,
    perturbed: Option<&EmbeddingDataset>,
    cfg: &Config,
    seeds: &[u64],
) -> Result<Vec<VariantResult>> {
    if let Some(p) = perturbed {
        if p.dim() != ds.dim() {
            return Err(Error::Usage(format!(
                "perturbed set has dim {}, data has dim {}",
                p.dim(),
                ds.dim()
            )));
        }
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for variant in VARIANTS {
            let mut t = cfg.train.clone();
            t.seed = seed;
            t.baseline_mode = variant == "connected";
            let outcome = run_variant(ds, perturbed, cfg, &t);
            rows.push(match outcome {
                Ok((rl, cln, aua)) => VariantResult {
                    variant,
                    seed,
                    rl: Some(rl),
                    cln,
                    aua,
                    error: None,
                },
                Err(e) => {
                    log::warn!("{variant} seed {seed}: {e}");
                    VariantResult {
                        variant,
                        seed,
                        rl: None,
                        cln: None,
                        aua: None,
                        error: Some(e.to_string()),
                    }
                }
            });
        }
    }
    Ok(rows)
}

fn run_variant(
    ds: &EmbeddingDataset,
    perturbed: Option<&EmbeddingDataset>,
    cfg: &Config,
    t: &TrainConfig,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    let arch = arch_for(t, &cfg.arch, ds.dim())?;
    let (mut bundle, report) = train_on(ds, t, &arch)?;
    let scaled = to_scaled(ds, &bundle)?;
    let held_out = if report.probe_rows.is_empty() {
        scaled.clone()
    } else {
        scaled.select(&report.probe_rows)
    };
    let k = cfg.projection.k;
    let mode = cfg.projection.candidates;
    let seed = t.seed;
    let proj = project_all(&bundle, &held_out, k, seed, mode)?;
    let rl = mean(&proj.distances).ok_or(tmd_core::Error::EmptyDataset)?;
    if scaled.labels().is_none() {
        return Ok((rl, None, None));
    }
    let train_rows: Vec<usize> = (0..scaled.n()).filter(|i| !report.probe_rows.contains(i)).collect();
    let head = defense::train_head(&scaled.select(&train_rows), cfg.head.epochs, cfg.head.lr, seed)?;
    bundle = bundle.with_head(head.clone())?;
    let cln = evaluate(&bundle, &head, &held_out, k, seed, mode)?.defended;
    let aua = match perturbed {
        Some(p) if p.labels().is_some() => {
            let p = to_scaled(p, &bundle)?;
            Some(evaluate(&bundle, &head, &p, k, seed, mode)?.defended)
        }
        _ => None,
    };
    Ok((rl, Some(cln), aua))
}

/// Median of each metric per variant over the successful seeds.
pub fn variant_medians(rows: &[VariantResult]) -> Vec<(&'static str, Option<f64>, Option<f64>, Option<f64>)> {
    VARIANTS
        .iter()
        .map(|&v| {
            let pick = |f: fn(&VariantResult) -> Option<f64>| {
                let xs: Vec<f64> = rows.iter().filter(|r| r.variant == v).filter_map(f).collect();
                median(&xs)
            };
            (v, pick(|r| r.rl), pick(|r| r.cln), pick(|r| r.aua))
        })
        .collect()
}
