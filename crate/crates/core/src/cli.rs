//! Command-line driver: one subcommand per pipeline stage plus a
//! self-contained `demo`.
//!
//! Every successful run ends by writing a reproducibility manifest —
//! `run_manifest.json` inside the output directory for directory-producing
//! commands, `<name>.manifest.json` next to the output file otherwise. The
//! manifest records the resolved configuration and all seeds, but not output
//! locations or the `--threads` cap, so re-running the same command against
//! a different directory (or thread count) reproduces the outputs bitwise.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::conditioning::{assemble, Modality};
use crate::flowmatch::checkpoint::{load_checkpoint, save_checkpoint};
use crate::flowmatch::model::{ModelConfig, VelocityModel};
use crate::flowmatch::train::{train, TrainConfig, TrainItem, TrainOutcome};
use crate::flowmatch::FieldStack;
use crate::grid::{GridSpec, LabelMask, TissueMap};
use crate::growth::{
    concentration_to_mask, fit_growth_params, simulate, FitSearch, GrowthParams, SimClock,
    ThresholdPolicy,
};
use crate::io::{self, Intent, IoError, Volume};
use crate::longitudinal::{corruption_sweep, generate_trajectory, LongitudinalPlan, SweepRow, TrajectoryBundle};
use crate::manifest::{sha256_hex, RunManifest};
use crate::metrics::{dice, ms_ssim, psnr, MetricRecord, MetricsError};
use crate::phantom::{head_phantom, synthesize_image, training_pairs};

#[derive(Debug, Parser)]
#[command(name = "tfk", version, about = "Tumor growth simulation and flow-matching MRI synthesis")]
struct Cli {
    /// Worker thread cap; TFK_THREADS is the fallback, all cores the default.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the growth solver and write concentration snapshots.
    Simulate(SimulateArgs),
    /// Calibrate growth parameters against an observed tumor volume.
    Fit(FitArgs),
    /// Train the velocity model on a dataset directory.
    Train(TrainArgs),
    /// Synthesize a longitudinal trajectory from a trained model.
    Generate(GenerateArgs),
    /// Re-generate one trajectory across several corruption levels.
    Sweep(SweepArgs),
    /// Compare same-named volumes between two directories.
    Evaluate(EvaluateArgs),
    /// End-to-end phantom run: synthesize data, train, generate, evaluate.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Tissue segmentation volume (u8 payload + JSON sidecar).
    #[arg(long)]
    tissue: PathBuf,
    /// Proliferation rate, 1/day.
    #[arg(long)]
    rho: f64,
    /// White-matter diffusivity, mm²/day.
    #[arg(long)]
    d: f64,
    /// Seed center as `x,y,z` in mm.
    #[arg(long, value_parser = parse_point)]
    seed: [f64; 3],
    /// Gaussian seed radius, mm.
    #[arg(long)]
    sigma: f64,
    /// Solver step, days.
    #[arg(long)]
    dt: f64,
    /// Final simulated time, days.
    #[arg(long)]
    t_end: f64,
    /// Snapshot cadence, days.
    #[arg(long)]
    snapshot_every: f64,
    /// Gray-matter diffusivity as a fraction of the white-matter value.
    #[arg(long, default_value_t = 0.1)]
    gray_ratio: f64,
    /// Peak seed concentration.
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    /// Output directory for `conc_t<days>.f32` snapshots.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Observed tumor: a concentration volume (thresholded at 0.2) or a mask.
    #[arg(long)]
    target: PathBuf,
    /// Tissue segmentation volume.
    #[arg(long)]
    tissue: PathBuf,
    /// Search grid JSON: rhos, d_whites, seed_centers, t_end, optional dt.
    #[arg(long)]
    grid: PathBuf,
    /// Output JSON for the calibrated parameters.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory containing `dataset.json`.
    #[arg(long)]
    data: PathBuf,
    /// Training configuration JSON.
    #[arg(long)]
    cfg: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Tissue segmentation volume.
    #[arg(long)]
    tissue: PathBuf,
    /// Growth parameter JSON (bare parameters or a `fit` result).
    #[arg(long)]
    growth: PathBuf,
    /// Trajectory plan JSON: time_points, modalities, tau_tilde, integrator_steps.
    #[arg(long)]
    plan: PathBuf,
    /// Trajectory noise seed.
    #[arg(long)]
    seed: u64,
    /// Output directory for per-timepoint volumes and `metrics.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Tissue segmentation volume.
    #[arg(long)]
    tissue: PathBuf,
    /// Growth parameter JSON (bare parameters or a `fit` result).
    #[arg(long)]
    growth: PathBuf,
    /// Trajectory plan JSON; its tau_tilde is overridden per sweep level.
    #[arg(long)]
    plan: PathBuf,
    /// Corruption levels to sweep, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    taus: Vec<f64>,
    /// Trajectory noise seed, shared by all levels.
    #[arg(long)]
    seed: u64,
    /// Output directory for `sweep.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory of predicted volumes.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of reference volumes with matching file names.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DemoArgs {
    /// Master seed for phantom data, training, and trajectory noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Entry point for the `tfk` binary.
pub fn main() -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    ExitCode::from(run(std::env::args_os()))
}

/// Parse and execute one invocation; returns the process exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = configure_threads(cli.threads) {
        eprintln!("error: {msg}");
        return 2;
    }
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Demo(a) => cmd_demo(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn configure_threads(flag: Option<u64>) -> Result<(), String> {
    let n = match flag {
        Some(n) => Some(n as usize),
        None => match std::env::var("TFK_THREADS") {
            Ok(v) => {
                Some(v.parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(|| {
                    format!("TFK_THREADS must be a positive integer, got {v:?}")
                })?)
            }
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// `<days>` tag used in snapshot file names; integral times print without a
/// trailing `.0` so `t = 10.0` becomes `conc_t10.f32`.
fn fmt_days(t: f64) -> String {
    format!("{t}")
}

fn parse_point(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected x,y,z, got {s:?}"));
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| format!("bad coordinate {part:?}"))?;
    }
    Ok(out)
}

/// Wrapper stamping the mandatory `schema_version` onto written JSON.
#[derive(Debug, Serialize)]
struct Versioned<'a, T: Serialize> {
    schema_version: u32,
    #[serde(flatten)]
    value: &'a T,
}

impl<'a, T: Serialize> Versioned<'a, T> {
    fn new(value: &'a T) -> Versioned<'a, T> {
        Versioned { schema_version: 1, value }
    }
}

/// Manifest path for commands whose primary output is a single file.
fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

/// Digest a raw volume input: payload plus its JSON sidecar.
fn record_volume_input(manifest: &mut RunManifest, payload: &Path) -> Result<(), IoError> {
    manifest.record_input(payload)?;
    manifest.record_input(&io::sidecar_path(payload))
}

// ---------------------------------------------------------------- simulate

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let started = Instant::now();
    let tissue = io::read_tissue(&args.tissue)
        .with_context(|| format!("reading tissue {}", args.tissue.display()))?;
    let params = GrowthParams {
        rho: args.rho,
        d_white: args.d,
        gray_ratio: args.gray_ratio,
        seed_center: args.seed,
        seed_sigma: args.sigma,
        seed_amplitude: args.amplitude,
    };
    let clock = SimClock { dt: args.dt, t_end: args.t_end, snapshot_every: args.snapshot_every };
    let snapshots = simulate(&tissue, &params, &clock)?;
    fs::create_dir_all(&args.out)?;
    for (t, field) in &snapshots {
        let name = format!("conc_t{}.f32", fmt_days(*t));
        io::write_scalar(&args.out.join(name), field, Intent::Concentration)?;
    }

    let mut manifest = RunManifest::new("simulate", json!({ "params": params, "clock": clock }));
    record_volume_input(&mut manifest, &args.tissue)?;
    manifest.duration_seconds = started.elapsed().as_secs_f64();
    manifest.write_into(&args.out)?;
    println!("wrote {} snapshots to {}", snapshots.len(), args.out.display());
    Ok(())
}

// --------------------------------------------------------------------- fit

#[derive(Debug, Serialize, Deserialize)]
struct FitGridFile {
    #[serde(flatten)]
    search: FitSearch,
    /// Days between seeding and the observation.
    t_end: f64,
    /// Solver step, days; derived from the stability bound when omitted.
    #[serde(default)]
    dt: Option<f64>,
}

/// Default fit step: stable for twice the largest searched diffusivity
/// (coordinate descent probes past the grid), capped at one day.
fn fit_default_dt(spec: &GridSpec, search: &FitSearch) -> f64 {
    let d_max = search.d_whites.iter().cloned().fold(0.0, f64::max);
    SimClock::max_stable_dt(spec, 2.0 * d_max).min(1.0)
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let started = Instant::now();
    let tissue = io::read_tissue(&args.tissue)
        .with_context(|| format!("reading tissue {}", args.tissue.display()))?;
    let target = match io::read_volume(&args.target)
        .with_context(|| format!("reading target {}", args.target.display()))?
    {
        Volume::Mask(m) => m,
        Volume::Scalar(c) => concentration_to_mask(&c, ThresholdPolicy::default().edema),
        Volume::Tissue(_) => bail!("--target must be a concentration or mask volume, not a tissue map"),
    };
    let grid: FitGridFile = io::read_json_config(&args.grid)
        .with_context(|| format!("reading search grid {}", args.grid.display()))?;
    let dt = grid.dt.unwrap_or_else(|| fit_default_dt(tissue.spec(), &grid.search));
    let clock = SimClock { dt, t_end: grid.t_end, snapshot_every: grid.t_end.max(dt) };
    let outcome = fit_growth_params(&target, &tissue, &grid.search, &clock)?;
    io::write_json_atomic(&args.out, &Versioned::new(&outcome))?;

    let mut manifest = RunManifest::new(
        "fit",
        json!({ "grid": grid, "dt": dt, "threshold": ThresholdPolicy::default().edema }),
    );
    record_volume_input(&mut manifest, &args.target)?;
    record_volume_input(&mut manifest, &args.tissue)?;
    manifest.record_input(&args.grid)?;
    manifest.duration_seconds = started.elapsed().as_secs_f64();
    io::write_json_atomic(&manifest_path(&args.out), &manifest)?;
    println!(
        "best dice {:.4} at rho={} d={} after {} simulations",
        outcome.dice, outcome.params.rho, outcome.params.d_white, outcome.evaluations
    );
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainFile {
    #[serde(flatten)]
    optim: TrainConfig,
    #[serde(default)]
    model: ModelSection,
}

/// Model hyperparameters as they appear in `train.json`; the data channel
/// count is fixed at 1 because the pipeline transports scalar images.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ModelSection {
    hidden: usize,
    tau_frequencies: usize,
    modality_embed: usize,
    init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> ModelSection {
        let base = ModelConfig::new(1, 0);
        ModelSection {
            hidden: base.hidden,
            tau_frequencies: base.tau_frequencies,
            modality_embed: base.modality_embed,
            init_seed: base.init_seed,
        }
    }
}

impl ModelSection {
    fn to_config(&self) -> ModelConfig {
        ModelConfig {
            data_channels: 1,
            hidden: self.hidden,
            tau_frequencies: self.tau_frequencies,
            modality_embed: self.modality_embed,
            init_seed: self.init_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetFile {
    schema_version: u32,
    /// Tissue volume path, relative to the dataset directory.
    tissue: String,
    items: Vec<DatasetItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetItem {
    /// Concentration volume path, relative to the dataset directory.
    conc: String,
    /// Target image path, relative to the dataset directory.
    image: String,
    modality: Modality,
}

fn load_dataset(dir: &Path) -> Result<(TissueMap, Vec<TrainItem>, DatasetFile)> {
    let ds: DatasetFile = io::read_json_config(&dir.join("dataset.json"))
        .with_context(|| format!("reading {}", dir.join("dataset.json").display()))?;
    if ds.items.is_empty() {
        bail!("dataset {} lists no items", dir.display());
    }
    let tissue = io::read_tissue(&dir.join(&ds.tissue))?;
    let mut items = Vec::with_capacity(ds.items.len());
    for item in &ds.items {
        let conc = io::read_scalar(&dir.join(&item.conc))?;
        let image = io::read_scalar(&dir.join(&item.image))?;
        let cond = assemble(&tissue, &conc, item.modality)?;
        items.push(TrainItem { z1: FieldStack::from_field(&image), cond });
    }
    Ok((tissue, items, ds))
}

fn run_train(data_dir: &Path, cfg: &TrainFile, out: &Path) -> Result<TrainOutcome> {
    let (_, items, _) = load_dataset(data_dir)?;
    let model = VelocityModel::new(cfg.model.to_config())?;
    let outcome = train(model, &items, &cfg.optim)?;
    save_checkpoint(out, &outcome.model, &outcome.ema_model, Some(cfg.optim.rng_seed))?;
    Ok(outcome)
}

/// One digest over every item payload, in dataset order, so the manifest
/// stays small for large datasets.
fn dataset_items_digest(dir: &Path, ds: &DatasetFile) -> Result<String> {
    let mut all = Vec::new();
    for item in &ds.items {
        all.extend_from_slice(&fs::read(dir.join(&item.conc))?);
        all.extend_from_slice(&fs::read(dir.join(&item.image))?);
    }
    Ok(sha256_hex(&all))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let cfg: TrainFile = io::read_json_config(&args.cfg)
        .with_context(|| format!("reading training config {}", args.cfg.display()))?;
    let outcome = run_train(&args.data, &cfg, &args.out)?;

    let mut manifest = RunManifest::new("train", serde_json::to_value(&cfg)?);
    manifest.record_seed("init", cfg.model.init_seed);
    manifest.record_seed("train", cfg.optim.rng_seed);
    manifest.record_input(&args.cfg)?;
    manifest.record_input(&args.data.join("dataset.json"))?;
    let ds: DatasetFile = io::read_json_config(&args.data.join("dataset.json"))?;
    record_volume_input(&mut manifest, &args.data.join(&ds.tissue))?;
    manifest
        .input_digests
        .insert(format!("{}::items", args.data.display()), dataset_items_digest(&args.data, &ds)?);
    manifest.duration_seconds = started.elapsed().as_secs_f64();
    io::write_json_atomic(&manifest_path(&args.out), &manifest)?;
    let final_loss = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!("trained {} steps, final loss {final_loss:.6}", outcome.losses.len());
    Ok(())
}

// ---------------------------------------------------------------- generate

/// `--growth` accepts either bare parameters or the JSON written by `fit`.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum GrowthFile {
    Bare(GrowthParams),
    Fit { params: GrowthParams },
}

fn read_growth_file(path: &Path) -> Result<GrowthParams> {
    let parsed: GrowthFile = io::read_json_config(path)
        .with_context(|| format!("reading growth parameters {}", path.display()))?;
    Ok(match parsed {
        GrowthFile::Bare(p) | GrowthFile::Fit { params: p } => p,
    })
}

fn write_bundle(dir: &Path, bundle: &TrajectoryBundle) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    for entry in &bundle.entries {
        let t = fmt_days(entry.t_days);
        io::write_scalar(
            &dir.join(format!("conc_t{t}.f32")),
            &entry.concentration,
            Intent::Concentration,
        )?;
        for (mi, modality) in bundle.plan.modalities.iter().enumerate() {
            let tag = modality.name().to_ascii_lowercase();
            io::write_scalar(&dir.join(format!("img_t{t}_{tag}.f32")), &entry.image(mi), Intent::Image)?;
            io::write_mask(&dir.join(format!("mask_t{t}_{tag}.u8")), &entry.masks[mi])?;
            let m = &entry.metrics[mi];
            rows.push(vec![
                t.clone(),
                modality.name().to_string(),
                format!("{}", m.dice_vs_conditioning),
                m.psnr_nontumor_vs_previous.map(|v| format!("{v}")).unwrap_or_default(),
            ]);
        }
    }
    io::write_csv(&dir.join("metrics.csv"), &["t_days", "modality", "dice", "psnr"], &rows)?;
    Ok(())
}

/// Load, generate, and write one trajectory; shared by `generate` and `demo`.
/// Inference always uses the EMA weights.
fn run_generate(
    model_path: &Path,
    tissue_path: &Path,
    growth_path: &Path,
    plan_path: &Path,
    seed: u64,
    out: &Path,
) -> Result<(GrowthParams, TrajectoryBundle)> {
    let ckpt = load_checkpoint(model_path)
        .with_context(|| format!("loading checkpoint {}", model_path.display()))?;
    let tissue = io::read_tissue(tissue_path)
        .with_context(|| format!("reading tissue {}", tissue_path.display()))?;
    let growth = read_growth_file(growth_path)?;
    let plan: LongitudinalPlan = io::read_json_config(plan_path)
        .with_context(|| format!("reading plan {}", plan_path.display()))?;
    let bundle = generate_trajectory(&ckpt.ema_model, &tissue, &growth, &plan, None, seed)?;
    write_bundle(out, &bundle)?;
    Ok((growth, bundle))
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let started = Instant::now();
    let (growth, bundle) =
        run_generate(&args.model, &args.tissue, &args.growth, &args.plan, args.seed, &args.out)?;

    let mut manifest =
        RunManifest::new("generate", json!({ "growth": growth, "plan": bundle.plan }));
    manifest.record_seed("trajectory", args.seed);
    manifest.record_input(&args.model)?;
    record_volume_input(&mut manifest, &args.tissue)?;
    manifest.record_input(&args.growth)?;
    manifest.record_input(&args.plan)?;
    manifest.duration_seconds = started.elapsed().as_secs_f64();
    manifest.write_into(&args.out)?;
    println!("generated {} time points to {}", bundle.entries.len(), args.out.display());
    Ok(())
}

// ------------------------------------------------------------------- sweep

fn run_sweep(
    model_path: &Path,
    tissue_path: &Path,
    growth_path: &Path,
    plan_path: &Path,
    taus: &[f64],
    seed: u64,
    out: &Path,
) -> Result<(GrowthParams, LongitudinalPlan, Vec<SweepRow>)> {
    let ckpt = load_checkpoint(model_path)
        .with_context(|| format!("loading checkpoint {}", model_path.display()))?;
    let tissue = io::read_tissue(tissue_path)
        .with_context(|| format!("reading tissue {}", tissue_path.display()))?;
    let growth = read_growth_file(growth_path)?;
    let plan: LongitudinalPlan = io::read_json_config(plan_path)
        .with_context(|| format!("reading plan {}", plan_path.display()))?;
    let rows = corruption_sweep(&ckpt.ema_model, &tissue, &growth, &plan, taus, seed)?;
    fs::create_dir_all(out)?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![format!("{}", r.tau_tilde), format!("{}", r.mean_dice), format!("{}", r.mean_psnr)]
        })
        .collect();
    io::write_csv(&out.join("sweep.csv"), &["tau_tilde", "mean_dice", "mean_psnr"], &csv_rows)?;
    Ok((growth, plan, rows))
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let started = Instant::now();
    let (growth, plan, rows) = run_sweep(
        &args.model,
        &args.tissue,
        &args.growth,
        &args.plan,
        &args.taus,
        args.seed,
        &args.out,
    )?;

    let mut manifest = RunManifest::new(
        "sweep",
        json!({ "growth": growth, "plan": plan, "taus": args.taus }),
    );
    manifest.record_seed("trajectory", args.seed);
    manifest.record_input(&args.model)?;
    record_volume_input(&mut manifest, &args.tissue)?;
    manifest.record_input(&args.growth)?;
    manifest.record_input(&args.plan)?;
    manifest.duration_seconds = started.elapsed().as_secs_f64();
    manifest.write_into(&args.out)?;
    println!("swept {} corruption levels to {}", rows.len(), args.out.join("sweep.csv").display());
    Ok(())
}

// ---------------------------------------------------------------- evaluate

/// Pull `t<days>` and a modality tag out of names like `img_t25_t1c.f32`.
/// Unknown patterns yield empty CSV columns rather than an error.
fn parse_volume_name(name: &str) -> (Option<f64>, Option<Modality>) {
    let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
    let mut t_days = None;
    let mut modality = None;
    for token in stem.split('_') {
        if t_days.is_none() {
            if let Some(num) = token.strip_prefix('t') {
                if !num.is_empty()
                    && num.bytes().all(|b| b.is_ascii_digit() || b == b'.')
                    && num.parse::<f64>().is_ok()
                {
                    t_days = num.parse().ok();
                    continue;
                }
            }
        }
        if let Some(m) = Modality::parse(token) {
            modality = Some(m);
        }
    }
    (t_days, modality)
}

fn try_ms_ssim(
    a: &crate::grid::ScalarField3D,
    b: &crate::grid::ScalarField3D,
) -> Result<Option<f64>, MetricsError> {
    for levels in (1..=3).rev() {
        match ms_ssim(a, b, levels, 7) {
            Ok(v) => return Ok(Some(v)),
            Err(MetricsError::GridTooSmall { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

fn run_evaluate(pred_dir: &Path, ref_dir: &Path, out: &Path) -> Result<Vec<MetricRecord>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(pred_dir)
        .with_context(|| format!("listing {}", pred_dir.display()))?
    {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n.to_string(),
            None => continue,
        };
        let is_volume = name.ends_with(".f32") || name.ends_with(".u8");
        if is_volume && ref_dir.join(&name).exists() {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        bail!(
            "no volume names shared between {} and {}",
            pred_dir.display(),
            ref_dir.display()
        );
    }

    let mut records = Vec::new();
    for name in &names {
        let (t_days, modality) = parse_volume_name(name);
        let tag = |mut r: MetricRecord| {
            if let Some(t) = t_days {
                r = r.at(t);
            }
            if let Some(m) = modality {
                r = r.tagged(m);
            }
            r
        };
        if name.ends_with(".u8") {
            let a = io::read_mask(&pred_dir.join(name))?;
            let b = io::read_mask(&ref_dir.join(name))?;
            records.push(tag(MetricRecord::new("dice", dice(&a, &b)?, b.count())));
        } else {
            let a = io::read_scalar(&pred_dir.join(name))?;
            let b = io::read_scalar(&ref_dir.join(name))?;
            let full = LabelMask::new(*a.spec(), true)?;
            records.push(tag(MetricRecord::new("psnr", psnr(&a, &b, &full, 1.0)?, full.count())));
            if let Some(v) = try_ms_ssim(&a, &b)? {
                records.push(tag(MetricRecord::new("ms_ssim", v, full.count())));
            }
        }
    }

    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                format!("{}", r.value),
                format!("{}", r.mask_voxels),
                r.t_days.map(fmt_days).unwrap_or_default(),
                r.modality.map(|m| m.name().to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    io::write_csv(out, &["metric", "value", "mask_voxels", "t_days", "modality"], &rows)?;
    Ok(records)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    let records = run_evaluate(&args.pred, &args.reference, &args.out)?;

    let mut manifest = RunManifest::new(
        "evaluate",
        json!({ "window": 7, "max_levels": 3, "data_max": 1.0 }),
    );
    for dir_role in [("pred", &args.pred), ("ref", &args.reference)] {
        let (role, dir) = dir_role;
        let mut combined = Vec::new();
        let mut listing: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().and_then(|e| e.to_str()).is_some_and(|e| e == "f32" || e == "u8")
            })
            .collect();
        listing.sort();
        for path in listing {
            combined.extend_from_slice(&fs::read(&path)?);
        }
        manifest.input_digests.insert(format!("{}::{role}", dir.display()), sha256_hex(&combined));
    }
    manifest.duration_seconds = started.elapsed().as_secs_f64();
    io::write_json_atomic(&manifest_path(&args.out), &manifest)?;
    println!("wrote {} metric rows to {}", records.len(), args.out.display());
    Ok(())
}

// -------------------------------------------------------------------- demo

const DEMO_GRID: usize = 12;
const DEMO_TRAIN_PAIRS: usize = 48;
const DEMO_TRAIN_STEPS: usize = 1200;
const DEMO_LEARNING_RATE: f64 = 3e-3;
const DEMO_MODALITY: Modality = Modality::Flair;
const DEMO_TIME_POINTS: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];
const DEMO_SWEEP_TAUS: [f64; 3] = [0.05, 0.5, 0.9];

fn write_demo_dataset(dir: &Path, tissue: &TissueMap, count: usize, seed: u64) -> Result<()> {
    let pairs = training_pairs(tissue, count, seed, &[DEMO_MODALITY])?;
    let mut listed = Vec::with_capacity(pairs.len());
    for (i, item) in pairs.iter().enumerate() {
        let tag = item.cond.modality.name().to_ascii_lowercase();
        let conc_name = format!("conc_{i:03}.f32");
        let img_name = format!("img_{i:03}_{tag}.f32");
        io::write_scalar(&dir.join(&conc_name), &item.cond.concentration(), Intent::Concentration)?;
        io::write_scalar(&dir.join(&img_name), &item.z1.to_field(0), Intent::Image)?;
        listed.push(DatasetItem { conc: conc_name, image: img_name, modality: item.cond.modality });
    }
    let ds = DatasetFile { schema_version: 1, tissue: "tissue.u8".into(), items: listed };
    io::write_json_atomic(&dir.join("dataset.json"), &ds)?;
    Ok(())
}

/// Ideal references for `evaluate`: images rendered straight from the
/// simulated concentrations, masks from thresholding them.
fn write_demo_references(dir: &Path, tissue: &TissueMap, bundle: &TrajectoryBundle) -> Result<()> {
    fs::create_dir_all(dir)?;
    let threshold = ThresholdPolicy::default().edema;
    for entry in &bundle.entries {
        let t = fmt_days(entry.t_days);
        let mask = concentration_to_mask(&entry.concentration, threshold);
        for modality in &bundle.plan.modalities {
            let tag = modality.name().to_ascii_lowercase();
            let cond = assemble(tissue, &entry.concentration, *modality)?;
            io::write_scalar(
                &dir.join(format!("img_t{t}_{tag}.f32")),
                &synthesize_image(&cond),
                Intent::Image,
            )?;
            io::write_mask(&dir.join(format!("mask_t{t}_{tag}.u8")), &mask)?;
        }
    }
    Ok(())
}

fn cmd_demo(args: &DemoArgs) -> Result<()> {
    let started = Instant::now();
    let out = &args.out;
    let data_dir = out.join("data");
    fs::create_dir_all(&data_dir)
        .with_context(|| format!("creating output directory {}", out.display()))?;

    log::info!("demo: building {DEMO_GRID}³ phantom and {DEMO_TRAIN_PAIRS} training pairs");
    let spec = GridSpec::isotropic(DEMO_GRID, 1.0)?;
    let tissue = head_phantom(spec)?;
    let tissue_path = data_dir.join("tissue.u8");
    io::write_tissue(&tissue_path, &tissue)?;
    write_demo_dataset(&data_dir, &tissue, DEMO_TRAIN_PAIRS, args.seed)?;

    log::info!("demo: training {DEMO_TRAIN_STEPS} steps");
    let train_file = TrainFile {
        optim: TrainConfig {
            steps: DEMO_TRAIN_STEPS,
            learning_rate: DEMO_LEARNING_RATE,
            // a 0.999 EMA barely moves off its init over a short run
            ema_decay: 0.995,
            rng_seed: args.seed.wrapping_add(2),
            ..TrainConfig::default()
        },
        model: ModelSection { init_seed: args.seed.wrapping_add(1), ..ModelSection::default() },
    };
    io::write_json_atomic(&out.join("train.json"), &Versioned::new(&train_file))?;
    let model_path = out.join("model.tfm");
    let outcome = run_train(&data_dir, &train_file, &model_path)?;
    log::info!("demo: final training loss {:.6}", outcome.losses.last().copied().unwrap_or(f64::NAN));

    let growth = GrowthParams { seed_center: [8.0, 5.5, 5.5], ..GrowthParams::default() };
    let plan = LongitudinalPlan::new(DEMO_TIME_POINTS.to_vec(), vec![DEMO_MODALITY]);
    io::write_json_atomic(&out.join("params.json"), &Versioned::new(&growth))?;
    io::write_json_atomic(&out.join("plan.json"), &Versioned::new(&plan))?;

    log::info!("demo: generating {}-time-point trajectory", DEMO_TIME_POINTS.len());
    let traj_seed = args.seed.wrapping_add(3);
    let gen_dir = out.join("gen");
    let (growth, bundle) = run_generate(
        &model_path,
        &tissue_path,
        &out.join("params.json"),
        &out.join("plan.json"),
        traj_seed,
        &gen_dir,
    )?;

    log::info!("demo: evaluating against toy-rule references");
    let ref_dir = out.join("ref");
    write_demo_references(&ref_dir, &tissue, &bundle)?;
    run_evaluate(&gen_dir, &ref_dir, &out.join("eval.csv"))?;

    log::info!("demo: corruption sweep over {DEMO_SWEEP_TAUS:?}");
    run_sweep(
        &model_path,
        &tissue_path,
        &out.join("params.json"),
        &out.join("plan.json"),
        &DEMO_SWEEP_TAUS,
        traj_seed,
        out,
    )?;

    let mut manifest = RunManifest::new(
        "demo",
        json!({
            "grid": DEMO_GRID,
            "train_pairs": DEMO_TRAIN_PAIRS,
            "train": train_file,
            "growth": growth,
            "plan": plan,
            "sweep_taus": DEMO_SWEEP_TAUS,
        }),
    );
    manifest.record_seed("data", args.seed);
    manifest.record_seed("init", args.seed.wrapping_add(1));
    manifest.record_seed("train", args.seed.wrapping_add(2));
    manifest.record_seed("trajectory", traj_seed);
    manifest.duration_seconds = started.elapsed().as_secs_f64();
    manifest.write_into(out)?;
    println!("demo complete: {}", out.display());
    Ok(())
}
