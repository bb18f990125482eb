//! Summary statistics and the CSV reports.
//!
//! Numbers are written with Rust's shortest round-trip float formatting, so
//! output is locale-independent; missing values are `NA` and lines end in LF.

use std::io::Write;

use crate::error::{Error, Result};

pub const HIST_BINS: usize = 64;
pub const NA: &str = "NA";

pub fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

pub fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

/// Linear-interpolation quantile of already sorted values.
pub fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(&sorted(values), 0.5)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Probability that a random `positive` exceeds a random `negative`, ties
/// counting one half (the Mann-Whitney statistic).
pub fn auc(negative: &[f64], positive: &[f64]) -> Option<f64> {
    if negative.is_empty() || positive.is_empty() {
        return None;
    }
    let neg = sorted(negative);
    let mut wins = 0.0;
    for &p in positive {
        let below = neg.partition_point(|&x| x < p);
        let equal = neg[below..].partition_point(|&x| x <= p);
        wins += below as f64 + 0.5 * equal as f64;
    }
    Some(wins / (negative.len() as f64 * positive.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let s = sorted(values);
        Some(Self {
            count: s.len(),
            mean: mean(&s)?,
            median: quantile(&s, 0.5)?,
            p5: quantile(&s, 0.05)?,
            p95: quantile(&s, 0.95)?,
        })
    }
}

/// Per-dataset distance summaries plus histograms over shared bins.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub names: Vec<String>,
    pub summaries: Vec<Option<Summary>>,
    /// `bins + 1` edges spanning the pooled range.
    pub edges: Vec<f64>,
    pub counts: Vec<Vec<usize>>,
}

impl DistanceReport {
    pub fn build(sets: &[(String, Vec<f64>)], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Usage("histogram needs at least one bin".into()));
        }
        let pooled = sets.iter().flat_map(|(_, v)| v.iter().copied());
        let (lo, hi) = pooled.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let counts = sets
            .iter()
            .map(|(_, v)| {
                let mut c = vec![0usize; bins];
                for &x in v {
                    let b = if width > 0.0 { ((x - lo) / width) as usize } else { 0 };
                    c[b.min(bins - 1)] += 1;
                }
                c
            })
            .collect();
        Ok(Self {
            names: sets.iter().map(|(n, _)| n.clone()).collect(),
            summaries: sets.iter().map(|(_, v)| Summary::of(v)).collect(),
            edges,
            counts,
        })
    }

    pub const HEADER: [&'static str; 11] = [
        "kind", "dataset", "bin", "bin_lo", "bin_hi", "count", "n", "mean", "median", "p5", "p95",
    ];

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        out.write_record(Self::HEADER)?;
        for (name, s) in self.names.iter().zip(&self.summaries) {
            let n = s.as_ref().map_or(0, |s| s.count);
            out.write_record([
                "summary".to_string(),
                name.clone(),
                NA.into(),
                NA.into(),
                NA.into(),
                NA.into(),
                n.to_string(),
                fmt_opt(s.as_ref().map(|s| s.mean)),
                fmt_opt(s.as_ref().map(|s| s.median)),
                fmt_opt(s.as_ref().map(|s| s.p5)),
                fmt_opt(s.as_ref().map(|s| s.p95)),
            ])?;
        }
        for (name, counts) in self.names.iter().zip(&self.counts) {
            for (b, c) in counts.iter().enumerate() {
                out.write_record([
                    "bin".to_string(),
                    name.clone(),
                    b.to_string(),
                    self.edges[b].to_string(),
                    self.edges[b + 1].to_string(),
                    c.to_string(),
                    NA.into(),
                    NA.into(),
                    NA.into(),
                    NA.into(),
                    NA.into(),
                ])?;
            }
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}
