//! Command-line interface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tmd_core::dataset::{make_synthetic, SyntheticSpec};
use tmd_core::defense::{self, Space};
use tmd_core::projection::{BatchProjection, CandidateMode};
use tmd_core::training::TrainReport;
use tmd_core::{EmbeddingDataset, TrainConfig};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::pipeline::{self, Accuracy};
use crate::report::{self, csv_writer, fmt_opt, DistanceReport, HIST_BINS};
use crate::{tmdb, tmde};

#[derive(Debug, Parser)]
#[command(name = "tmd", version, about = "Manifold approximation and on-manifold projection defense for text embeddings")]
pub struct Cli {
    /// JSON configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Primary output path (stdout for CSV-only commands when omitted).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for projection (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic cluster dataset (TMDE, unscaled).
    Synth(SynthArgs),
    /// Train a model bundle.
    Train(TrainArgs),
    /// Project embeddings onto the learned manifold.
    Project(ProjectArgs),
    /// Distance of each embedding to the learned manifold (CSV).
    Distance(DistanceArgs),
    /// Distance summaries and shared-bin histograms for up to three sets (CSV).
    ReportDistances(ReportArgs),
    /// Median distance and defended accuracy across sampling sizes (CSV).
    SweepK(SweepArgs),
    /// Train disconnected and connected models side by side (CSV).
    BaselineCompare(BaselineArgs),
    /// Undefended and defended accuracy of the bundled head (CSV).
    Eval(EvalArgs),
    /// Fit a classifier head and store it in the bundle.
    TrainHead(TrainHeadArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Points per cluster.
    #[arg(long)]
    pub per: Option<usize>,
    #[arg(long)]
    pub center_scale: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Spread each cluster over this many random orthonormal directions.
    #[arg(long)]
    pub intrinsic_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Start from the tuned settings of a language model (bert, roberta, xlnet)...
    #[arg(long, requires = "tuned_dataset")]
    pub tuned_model: Option<String>,
    /// ...on a dataset (agnews, imdb, yelp).
    #[arg(long, requires = "tuned_model")]
    pub tuned_dataset: Option<String>,
    #[arg(long)]
    pub lr_g: Option<f64>,
    #[arg(long)]
    pub lr_d: Option<f64>,
    #[arg(long)]
    pub lr_p: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of latent codes K.
    #[arg(long)]
    pub codes: Option<usize>,
    /// Dimension d of z.
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub dg_ratio: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub probe_size: Option<usize>,
    #[arg(long)]
    pub probe_k: Option<usize>,
    /// Train the connected baseline (no codes, no Q, no prior).
    #[arg(long)]
    pub baseline: bool,
    /// Sample training codes uniformly instead of from the learned prior.
    #[arg(long)]
    pub uniform_codes: bool,
    /// mlp, conv768 or conv1024.
    #[arg(long)]
    pub preset: Option<String>,
    /// Hidden widths of the mlp preset, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training embeddings (TMDE); unscaled data gets a fitted scaler.
    #[arg(long)]
    pub data: PathBuf,
    /// Per-epoch CSV (default: <out>.report.csv).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Scaled,
    Raw,
}

#[derive(Debug, Args)]
pub struct ProjectionFlags {
    /// Candidate latents per embedding.
    #[arg(long)]
    pub k: Option<usize>,
    /// Draw one candidate set for all rows instead of one per row.
    #[arg(long)]
    pub shared_candidates: bool,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Per-row CSV of row, code, distance.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Space of the written embeddings and distances.
    #[arg(long, value_enum, default_value_t = SpaceArg::Scaled)]
    pub space: SpaceArg,
    /// Refine sampled latents by gradient descent.
    #[arg(long)]
    pub gd: bool,
    #[arg(long)]
    pub gd_alpha: Option<f64>,
    #[arg(long)]
    pub gd_steps: Option<usize>,
    /// Keep steps that increase the objective.
    #[arg(long)]
    pub gd_no_reject: bool,
    #[command(flatten)]
    pub projection: ProjectionFlags,
}

#[derive(Debug, Args)]
pub struct DistanceArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SpaceArg::Scaled)]
    pub space: SpaceArg,
    #[command(flatten)]
    pub projection: ProjectionFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub aug: Option<PathBuf>,
    #[arg(long)]
    pub adv: Option<PathBuf>,
    #[command(flatten)]
    pub projection: ProjectionFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Ascending sampling sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,5,25,125")]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub shared_candidates: bool,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Labeled perturbed embeddings for defended accuracy.
    #[arg(long)]
    pub perturbed: Option<PathBuf>,
    /// Seeds, comma separated (default: the global seed).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Where to write the effective configuration (default: <out>.config.json).
    #[arg(long)]
    pub config_echo: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub projection: ProjectionFlags,
    #[arg(long)]
    pub head_epochs: Option<usize>,
    #[arg(long)]
    pub head_lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Labeled embeddings.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub projection: ProjectionFlags,
}

#[derive(Debug, Args)]
pub struct TrainHeadArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Labeled embeddings.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Train the head on raw (unscaled) embeddings.
    #[arg(long, value_enum, default_value_t = SpaceArg::Scaled)]
    pub space: SpaceArg,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut Config) -> Result<()> {
        if let (Some(m), Some(d)) = (&self.tuned_model, &self.tuned_dataset) {
            let tuned = TrainConfig::tuned(m, d)
                .ok_or_else(|| Error::Usage(format!("no tuned settings for {m}/{d}")))?;
            let t = &mut cfg.train;
            (t.lr_g, t.lr_d, t.lr_p, t.dg_ratio, t.codes, t.latent_dim) =
                (tuned.lr_g, tuned.lr_d, tuned.lr_p, tuned.dg_ratio, tuned.codes, tuned.latent_dim);
        }
        let t = &mut cfg.train;
        set(&mut t.lr_g, self.lr_g);
        set(&mut t.lr_d, self.lr_d);
        set(&mut t.lr_p, self.lr_p);
        set(&mut t.lambda, self.lambda);
        set(&mut t.codes, self.codes);
        set(&mut t.latent_dim, self.latent_dim);
        set(&mut t.dg_ratio, self.dg_ratio);
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.beta1, self.beta1);
        set(&mut t.beta2, self.beta2);
        set(&mut t.probe_size, self.probe_size);
        set(&mut t.probe_k, self.probe_k);
        t.baseline_mode |= self.baseline;
        t.uniform_codes |= self.uniform_codes;
        set(&mut cfg.arch.preset, self.preset.clone());
        if self.widths.is_some() {
            cfg.arch.mlp_widths = self.widths.clone();
        }
        cfg.train.validate()?;
        Ok(())
    }
}

impl ProjectionFlags {
    fn apply(&self, cfg: &mut Config) {
        set(&mut cfg.projection.k, self.k);
        if self.shared_candidates {
            cfg.projection.candidates = CandidateMode::Shared;
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = cli.threads {
        // A pool configured earlier in the process keeps its size.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
    let seed = cfg.train.seed;
    let out = cli.out.as_deref();
    match cli.command {
        Command::Synth(a) => synth(a, &mut cfg, out),
        Command::Train(a) => train(a, &mut cfg, out),
        Command::Project(a) => project(a, &mut cfg, seed, out),
        Command::Distance(a) => distance(a, &mut cfg, seed, out),
        Command::ReportDistances(a) => report_distances(a, &mut cfg, seed, out),
        Command::SweepK(a) => sweep_k(a, seed, out),
        Command::BaselineCompare(a) => baseline_compare(a, &mut cfg, out),
        Command::Eval(a) => eval(a, &mut cfg, seed, out),
        Command::TrainHead(a) => train_head(a, &mut cfg, seed, out),
    }
}

fn require_out(out: Option<&Path>, what: &str) -> Result<PathBuf> {
    out.map(Path::to_path_buf)
        .ok_or_else(|| Error::Usage(format!("--out is required for the {what}")))
}

/// Writes CSV bytes to `out`, or stdout when absent.
fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).map_err(|e| Error::io(p, e)),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn synth(a: SynthArgs, cfg: &mut Config, out: Option<&Path>) -> Result<()> {
    let s = &mut cfg.synth;
    set(&mut s.clusters, a.clusters);
    set(&mut s.dim, a.dim);
    set(&mut s.per, a.per);
    set(&mut s.center_scale, a.center_scale);
    set(&mut s.sigma, a.sigma);
    if a.intrinsic_dim.is_some() {
        s.intrinsic_dim = a.intrinsic_dim;
    }
    let spec = SyntheticSpec {
        num_clusters: s.clusters,
        dim: s.dim,
        points_per_cluster: s.per,
        center_scale: s.center_scale,
        sigma: s.sigma,
        seed: cfg.train.seed,
        intrinsic_dim: s.intrinsic_dim,
    };
    let ds = make_synthetic(&spec)?;
    let path = require_out(out, "synthetic dataset")?;
    tmde::write(&ds, &path)?;
    log::info!("wrote {} rows of dim {} to {}", ds.n(), ds.dim(), path.display());
    Ok(())
}

pub const TRAIN_REPORT_HEADER: [&str; 8] = [
    "epoch", "gan_value", "info", "prior_loss", "probe", "d_steps", "g_steps", "clamped",
];

pub fn write_train_report<W: Write>(report: &TrainReport, w: W) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(TRAIN_REPORT_HEADER)?;
    for e in &report.epochs {
        out.write_record([
            e.epoch.to_string(),
            e.gan_value.to_string(),
            fmt_opt(e.info),
            fmt_opt(e.prior_loss),
            fmt_opt(e.probe),
            e.d_steps.to_string(),
            e.g_steps.to_string(),
            e.clamped.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn train(a: TrainArgs, cfg: &mut Config, out: Option<&Path>) -> Result<()> {
    a.train.apply(cfg)?;
    let path = require_out(out, "bundle")?;
    let ds = tmde::read(&a.data)?;
    let arch = pipeline::arch_for(&cfg.train, &cfg.arch, ds.dim())?;
    let start = Instant::now();
    let (bundle, report) = pipeline::train_on(&ds, &cfg.train, &arch)?;
    log::info!("trained {} epochs in {:.1}s", report.epochs.len(), start.elapsed().as_secs_f64());
    tmdb::write(&bundle, &path)?;
    let mut buf = Vec::new();
    write_train_report(&report, &mut buf)?;
    let report_path = a.report.unwrap_or_else(|| with_suffix(&path, ".report.csv"));
    fs::write(&report_path, buf).map_err(|e| Error::io(&report_path, e))
}

struct Loaded {
    bundle: tmd_core::ModelBundle,
    raw: Option<EmbeddingDataset>,
    scaled: EmbeddingDataset,
}

fn load_pair(bundle: &Path, data: &Path) -> Result<Loaded> {
    let bundle = tmdb::read(bundle)?;
    let ds = tmde::read(data)?;
    let scaled = pipeline::to_scaled(&ds, &bundle).map_err(|e| e.in_file(data))?;
    let raw = (!ds.is_scaled()).then_some(ds);
    Ok(Loaded { bundle, raw, scaled })
}

/// Distances in the requested space.
fn distances_in(space: SpaceArg, l: &Loaded, proj: &BatchProjection) -> Result<Vec<f64>> {
    match space {
        SpaceArg::Scaled => Ok(proj.distances.clone()),
        SpaceArg::Raw => {
            let scaler = l
                .bundle
                .scaler
                .as_ref()
                .ok_or_else(|| Error::Usage("raw space needs a bundle with a scaler".into()))?;
            let raw = match &l.raw {
                Some(r) => r.clone(),
                None => scaler.unscale_dataset(&l.scaled)?,
            };
            pipeline::raw_distances(&l.bundle, &raw, proj)
        }
    }
}

fn distance_csv(codes: &[Option<usize>], distances: &[f64], space: SpaceArg) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv_writer(&mut buf);
        let col = match space {
            SpaceArg::Scaled => "distance_scaled",
            SpaceArg::Raw => "distance_raw",
        };
        w.write_record(["row", "code", col])?;
        for (i, (c, d)) in codes.iter().zip(distances).enumerate() {
            w.write_record([i.to_string(), fmt_opt(*c), d.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
    }
    Ok(buf)
}

fn project(a: ProjectArgs, cfg: &mut Config, seed: u64, out: Option<&Path>) -> Result<()> {
    a.projection.apply(cfg);
    let path = require_out(out, "projected embeddings")?;
    let l = load_pair(&a.bundle, &a.data)?;
    let mode = cfg.projection.candidates;
    let proj = if a.gd {
        let gd = &mut cfg.projection.gd;
        set(&mut gd.alpha, a.gd_alpha);
        set(&mut gd.steps, a.gd_steps);
        set(&mut gd.k_init, a.projection.k);
        gd.reject &= !a.gd_no_reject;
        pipeline::project_all_gd(&l.bundle, &l.scaled, gd, seed, mode)?
    } else {
        pipeline::project_all(&l.bundle, &l.scaled, cfg.projection.k, seed, mode)?
    };
    let distances = distances_in(a.space, &l, &proj)?;
    let written = match a.space {
        SpaceArg::Scaled => proj.projected.clone(),
        SpaceArg::Raw => l
            .bundle
            .scaler
            .as_ref()
            .ok_or_else(|| Error::Usage("raw space needs a bundle with a scaler".into()))?
            .unscale_dataset(&proj.projected)?,
    };
    tmde::write(&written, &path)?;
    if let Some(csv_path) = a.csv {
        let bytes = distance_csv(&proj.codes, &distances, a.space)?;
        fs::write(&csv_path, bytes).map_err(|e| Error::io(&csv_path, e))?;
    }
    Ok(())
}

fn distance(a: DistanceArgs, cfg: &mut Config, seed: u64, out: Option<&Path>) -> Result<()> {
    a.projection.apply(cfg);
    let l = load_pair(&a.bundle, &a.data)?;
    let proj = pipeline::project_all(&l.bundle, &l.scaled, cfg.projection.k, seed, cfg.projection.candidates)?;
    let distances = distances_in(a.space, &l, &proj)?;
    emit(out, &distance_csv(&proj.codes, &distances, a.space)?)
}

fn report_distances(a: ReportArgs, cfg: &mut Config, seed: u64, out: Option<&Path>) -> Result<()> {
    a.projection.apply(cfg);
    let bundle = tmdb::read(&a.bundle)?;
    let mut sets = Vec::new();
    for (name, path) in [("clean", Some(&a.clean)), ("aug", a.aug.as_ref()), ("adv", a.adv.as_ref())] {
        let Some(path) = path else { continue };
        let ds = tmde::read(path)?;
        let scaled = pipeline::to_scaled(&ds, &bundle).map_err(|e| e.in_file(path))?;
        let proj = pipeline::project_all(&bundle, &scaled, cfg.projection.k, seed, cfg.projection.candidates)?;
        sets.push((name.to_string(), proj.distances));
    }
    let r = DistanceReport::build(&sets, HIST_BINS)?;
    let mut buf = Vec::new();
    r.write_csv(&mut buf)?;
    emit(out, &buf)
}

fn sweep_k(a: SweepArgs, seed: u64, out: Option<&Path>) -> Result<()> {
    let l = load_pair(&a.bundle, &a.data)?;
    let mode = if a.shared_candidates {
        CandidateMode::Shared
    } else {
        CandidateMode::PerRow
    };
    let rows = pipeline::sweep_k(&l.bundle, &l.scaled, &a.ks, seed, mode)?;
    let mut buf = Vec::new();
    {
        let mut w = csv_writer(&mut buf);
        w.write_record(["k", "median_distance", "defended_accuracy"])?;
        for r in rows {
            w.write_record([r.k.to_string(), r.median_distance.to_string(), fmt_opt(r.defended_accuracy)])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
    }
    emit(out, &buf)
}

fn baseline_compare(a: BaselineArgs, cfg: &mut Config, out: Option<&Path>) -> Result<()> {
    a.train.apply(cfg)?;
    a.projection.apply(cfg);
    set(&mut cfg.head.epochs, a.head_epochs);
    set(&mut cfg.head.lr, a.head_lr);
    let ds = tmde::read(&a.data)?;
    let perturbed = a.perturbed.as_deref().map(tmde::read).transpose()?;
    let seeds = a.seeds.clone().unwrap_or_else(|| vec![cfg.train.seed]);
    let rows = pipeline::baseline_compare(&ds, perturbed.as_ref(), cfg, &seeds)?;
    let mut buf = Vec::new();
    {
        let mut w = csv_writer(&mut buf);
        w.write_record(["variant", "seed", "rl", "cln", "aua", "error"])?;
        for r in &rows {
            w.write_record([
                r.variant.to_string(),
                r.seed.to_string(),
                fmt_opt(r.rl),
                fmt_opt(r.cln),
                fmt_opt(r.aua),
                r.error.clone().unwrap_or_else(|| report::NA.into()),
            ])?;
        }
        for (v, rl, cln, aua) in pipeline::variant_medians(&rows) {
            w.write_record([v.to_string(), "median".into(), fmt_opt(rl), fmt_opt(cln), fmt_opt(aua), report::NA.into()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
    }
    let echo = serde_json::to_string_pretty(&pipeline::config_echo(cfg)?)? + "\n";
    let echo_path = a.config_echo.or_else(|| out.map(|p| with_suffix(p, ".config.json")));
    match echo_path {
        Some(p) => fs::write(&p, echo).map_err(|e| Error::io(&p, e))?,
        None => eprint!("{echo}"),
    }
    emit(out, &buf)
}

pub fn accuracy_csv(acc: &Accuracy) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv_writer(&mut buf);
        w.write_record(["n", "undefended_accuracy", "defended_accuracy"])?;
        w.write_record([acc.n.to_string(), acc.undefended.to_string(), acc.defended.to_string()])?;
        w.flush().map_err(|e| Error::io("<csv>", e))?;
    }
    Ok(buf)
}

fn eval(a: EvalArgs, cfg: &mut Config, seed: u64, out: Option<&Path>) -> Result<()> {
    a.projection.apply(cfg);
    let l = load_pair(&a.bundle, &a.data)?;
    let head = l
        .bundle
        .head
        .clone()
        .ok_or_else(|| Error::Usage("bundle has no classifier head; run train-head first".into()))?;
    let acc = pipeline::evaluate(&l.bundle, &head, &l.scaled, cfg.projection.k, seed, cfg.projection.candidates)?;
    emit(out, &accuracy_csv(&acc)?)
}

fn train_head(a: TrainHeadArgs, cfg: &mut Config, seed: u64, out: Option<&Path>) -> Result<()> {
    set(&mut cfg.head.epochs, a.epochs);
    set(&mut cfg.head.lr, a.lr);
    let path = require_out(out, "bundle with head")?;
    let l = load_pair(&a.bundle, &a.data)?;
    let ds = match a.space {
        SpaceArg::Scaled => l.scaled.clone(),
        SpaceArg::Raw => match l.raw.clone() {
            Some(r) => r,
            None => l
                .bundle
                .scaler
                .as_ref()
                .ok_or_else(|| Error::Usage("raw head needs a bundle with a scaler".into()))?
                .unscale_dataset(&l.scaled)?,
        },
    };
    let head = defense::train_head(&ds, cfg.head.epochs, cfg.head.lr, seed)?;
    debug_assert_eq!(head.space == Space::Raw, a.space == SpaceArg::Raw);
    log::info!("head training accuracy {:.4}", head.accuracy(&ds)?);
    let bundle = l.bundle.with_head(head)?;
    tmdb::write(&bundle, &path)
}
