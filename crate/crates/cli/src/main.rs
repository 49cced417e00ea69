use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::{info, warn};

use esnet::config::{ExperimentConfig, DEFAULT_SEED};
use esnet::data::{read_image, read_kitti_disparity, read_pfm, write_pfm};
use esnet::data::{load_dataset, write_dataset, DatasetId, DisparityStyle, StereoSample, SynthSpec};
use esnet::gradcheck::{run_suite, SUITE_TOLERANCE};
use esnet::metrics::{export_artifacts, EvalReport, ExportOptions, ImageMetrics};
use esnet::network::{Network, SIZE_MULTIPLE};
use esnet::train::{fit_to_network, predict, run_schedule};
use esnet::{Error, ErrorClass, ParamStore, Tensor};

/// Exit codes. Usage errors caught by the argument parser also exit with 2.
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "esnet",
    version,
    about = "Warping-based multi-scale stereo matching: data synthesis, training, inference and evaluation",
    after_help = "Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure."
)]
struct Cli {
    /// Experiment config (TOML with [model], [schedule], [data], [loss]).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Random seed. Overrides schedule.seed for training; seeds synth and
    /// gradcheck. Default: the config value, else 20200406.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for commands that write files [default: out].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Config override as dotted key=value, e.g. schedule.order=DS+K.
    /// Repeatable; applied in order after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic stereo dataset (left/, right/, disp/).
    Synth {
        /// Disparity layout: uniform-shift, smooth-ramp or two-layer-occlusion.
        #[arg(long, default_value = "smooth-ramp")]
        style: DisparityStyle,
        /// Number of pairs.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Image size HxW, both multiples of 64.
        #[arg(long, default_value = "128x256")]
        size: String,
        /// Disparity range lo-hi in pixels.
        #[arg(long, default_value = "2-12")]
        range: String,
    },
    /// Run only the unsupervised stages of the configured schedule.
    Pretrain {
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
    },
    /// Run the full dataset schedule.
    Train {
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
    },
    /// Predict disparity for one pair; writes <name>_disp.pfm and PNG exports.
    Infer {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "IMAGE")]
        left: PathBuf,
        #[arg(long, value_name = "IMAGE")]
        right: PathBuf,
        /// Ground truth (.pfm or KITTI 16-bit .png) for error maps and metrics.
        #[arg(long, value_name = "DISP")]
        gt: Option<PathBuf>,
        /// Output file prefix [default: stem of the left image].
        #[arg(long)]
        name: Option<String>,
        /// Centre-crop inputs whose size is not a multiple of 64 instead of
        /// rejecting them.
        #[arg(long)]
        center_crop: bool,
        /// Disparity mapped to white in the PNG exports [default: largest value].
        #[arg(long)]
        max_disparity: Option<f32>,
        /// Error at which the error map saturates.
        #[arg(long, default_value_t = 5.0)]
        max_error: f32,
    },
    /// Score predicted disparities (.pfm) against ground truth with the same stem.
    Eval {
        /// Directory of predicted .pfm maps.
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        /// Directory of ground truth (.pfm or KITTI 16-bit .png).
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
    },
    /// Finite-difference check of every differentiable operator.
    Gradcheck,
    /// Print parameter counts and layer shapes of the configured model.
    Inspect {
        /// Also verify that this checkpoint matches the layout.
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<GradcheckFailed>().is_some() {
        return EXIT_NUMERICAL;
    }
    match e.chain().find_map(|c| c.downcast_ref::<Error>()).map(Error::class) {
        Some(ErrorClass::Config) => EXIT_CONFIG,
        Some(ErrorClass::Numerical) => EXIT_NUMERICAL,
        Some(ErrorClass::Data) | None => EXIT_DATA,
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0} gradient checks exceeded the tolerance")]
struct GradcheckFailed(usize);

fn run(cli: &Cli) -> anyhow::Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match &cli.command {
        Command::Synth {
            style,
            count,
            size,
            range,
        } => synth(&out, cli.seed.unwrap_or(DEFAULT_SEED), *style, *count, size, range),
        Command::Pretrain { init } => {
            let mut cfg = load_config(cli)?;
            let stages: Vec<&str> = cfg.schedule.order.split('+').filter(|s| s.trim().ends_with('*')).collect();
            if stages.is_empty() {
                return Err(Error::Config(format!(
                    "schedule.order {:?} has no unsupervised stage (NAME*)",
                    cfg.schedule.order
                ))
                .into());
            }
            cfg.schedule.order = stages.join("+");
            cfg.validate()?;
            train(&cfg, &out, init.as_deref())
        }
        Command::Train { init } => train(&load_config(cli)?, &out, init.as_deref()),
        Command::Infer {
            checkpoint,
            left,
            right,
            gt,
            name,
            center_crop,
            max_disparity,
            max_error,
        } => {
            let cfg = load_config(cli)?;
            let opts = ExportOptions {
                max_disparity: *max_disparity,
                max_error: *max_error,
            };
            infer(&cfg, &out, checkpoint, left, right, gt.as_deref(), name.as_deref(), *center_crop, &opts)
        }
        Command::Eval { pred, gt } => eval(cli.out.as_deref(), pred, gt),
        Command::Gradcheck => gradcheck(cli.seed.unwrap_or(DEFAULT_SEED)),
        Command::Inspect { checkpoint } => inspect(&load_config(cli)?, checkpoint.as_deref()),
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("schedule.seed={seed}"));
    }
    Ok(ExperimentConfig::load(cli.config.as_deref(), &overrides)?)
}

fn parse_pair<T: std::str::FromStr>(s: &str, sep: char, what: &str) -> anyhow::Result<(T, T)> {
    let bad = || Error::Config(format!("{what} {s:?} is not of the form a{sep}b"));
    let (a, b) = s.split_once(sep).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn synth(out: &Path, seed: u64, style: DisparityStyle, count: usize, size: &str, range: &str) -> anyhow::Result<()> {
    let (h, w) = parse_pair::<usize>(size, 'x', "--size")?;
    let (lo, hi) = parse_pair::<f64>(range, '-', "--range")?;
    if count == 0 {
        return Err(Error::Config("--count must be at least 1".into()).into());
    }
    let spec = SynthSpec::new(count, h, w, style).with_range(lo, hi);
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let ds = load_dataset(&DatasetId::Synthetic { spec, seed })?;
    write_dataset(out, &ds.samples)?;
    println!("wrote {count} {style} pairs of {h}x{w} to {}", out.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path, init: Option<&Path>) -> anyhow::Result<()> {
    let init = match init {
        Some(p) => {
            let params = ParamStore::<f32>::load(p)?;
            Network::new(cfg.model.network_config()?)?
                .check_params(&params)
                .with_context(|| format!("checkpoint {}", p.display()))?;
            Some(params)
        }
        None => None,
    };
    let start = Instant::now();
    let outcome = run_schedule(cfg, out, init, &mut |_| {})?;
    if let Some(last) = outcome.log.last() {
        info!("last epoch: {}", last.to_csv());
    }
    println!(
        "trained {} epochs in {:.1} s; final checkpoint {}",
        outcome.log.len(),
        start.elapsed().as_secs_f64(),
        outcome.final_checkpoint.display()
    );
    Ok(())
}

/// Ground truth and validity mask. PFM: finite, non-negative values are
/// valid. PNG: KITTI encoding, zero means invalid.
fn read_ground_truth(path: &Path) -> anyhow::Result<(Tensor<f32>, Tensor<f32>)> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "pfm" => {
            let d = read_pfm(path)?;
            let valid = d.map(|v| if v.is_finite() && v >= 0.0 { 1.0 } else { 0.0 });
            Ok((d.map(|v| if v.is_finite() && v >= 0.0 { v } else { 0.0 }), valid))
        }
        "png" => Ok(read_kitti_disparity(path)?),
        _ => Err(Error::Data(format!("{}: ground truth must be .pfm or .png", path.display())).into()),
    }
}

#[allow(clippy::too_many_arguments)]
fn infer(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
    left: &Path,
    right: &Path,
    gt: Option<&Path>,
    name: Option<&str>,
    center_crop: bool,
    opts: &ExportOptions,
) -> anyhow::Result<()> {
    let net = Network::new(cfg.model.network_config()?)?;
    let params = ParamStore::<f32>::load(checkpoint)?;
    net.check_params(&params)
        .with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let mut sample = StereoSample::new(read_image(left)?, read_image(right)?, left.display().to_string())?;
    if let Some(p) = gt {
        let (d, valid) = read_ground_truth(p)?;
        sample = sample.with_ground_truth(d, Some(valid))?;
    }
    let (h, w) = (sample.height(), sample.width());
    if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        if !center_crop {
            return Err(Error::Data(format!(
                "input {h}x{w} is not a multiple of {SIZE_MULTIPLE}; pass --center-crop to crop it"
            ))
            .into());
        }
        sample = fit_to_network(&sample)?;
        warn!("centre-cropped {h}x{w} to {}x{}", sample.height(), sample.width());
    }
    let name = match name {
        Some(n) => n.to_string(),
        None => left
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "pair".into()),
    };

    let pred = predict(&net, &params, &sample)?;
    let disp = &pred.pyramid[0];
    std::fs::create_dir_all(out)?;
    let pfm_path = out.join(format!("{name}_disp.pfm"));
    write_pfm(&pfm_path, disp)?;
    println!("{}", pfm_path.display());
    let truth = sample.gt_disparity.as_ref().zip(sample.valid_mask.as_ref());
    for p in export_artifacts(out, &name, disp, truth, &pred.masks, opts)? {
        println!("{}", p.display());
    }
    if let Some((g, v)) = truth {
        let m = ImageMetrics::compute(&name, disp, g, v)?;
        println!("EPE {:.4} px, D1 {:.4}% (KITTI rule {:.4}%)", m.epe, 100.0 * m.d1_paper_or, 100.0 * m.d1_kitti_and);
    }
    Ok(())
}

fn eval(out: Option<&Path>, pred_dir: &Path, gt_dir: &Path) -> anyhow::Result<()> {
    for d in [pred_dir, gt_dir] {
        if !d.is_dir() {
            return Err(Error::Data(format!("{} is not a directory", d.display())).into());
        }
    }
    let mut preds: Vec<PathBuf> = std::fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm")))
        .collect();
    preds.sort();
    if preds.is_empty() {
        return Err(Error::Data(format!("no .pfm predictions in {}", pred_dir.display())).into());
    }
    // Resolve every pair before reading any pixels.
    let mut pairs = Vec::with_capacity(preds.len());
    for p in preds {
        let stem = p.file_stem().expect("file").to_string_lossy().into_owned();
        let stem = stem.strip_suffix("_disp").unwrap_or(&stem).to_string();
        let gt = ["pfm", "png"]
            .iter()
            .map(|ext| gt_dir.join(format!("{stem}.{ext}")))
            .find(|g| g.is_file())
            .ok_or_else(|| Error::Data(format!("no ground truth for {stem} in {}", gt_dir.display())))?;
        pairs.push((stem, p, gt));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    for (stem, p, g) in &pairs {
        let pred = read_pfm(p)?;
        let (gt, valid) = read_ground_truth(g)?;
        per_image.push(ImageMetrics::compute(stem.clone(), &pred, &gt, &valid)?);
    }
    let report = EvalReport::from_images(per_image)?;
    println!("{}", report.summary());
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        let path = out.join("eval.csv");
        std::fs::write(&path, report.to_csv())?;
        println!("report: {}", path.display());
    }
    Ok(())
}

fn gradcheck(seed: u64) -> anyhow::Result<()> {
    let start = Instant::now();
    let entries = run_suite(seed)?;
    let width = entries.iter().map(|e| e.op.len() + e.input.len() + 3).max().unwrap_or(0);
    let mut failed = 0;
    for e in &entries {
        let label = format!("{} / {}", e.op, e.input);
        let verdict = if e.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!e.passed());
        println!("{label:<width$}  {:>4} coords  max rel err {:.2e}  {verdict}", e.coords, e.max_rel_error);
    }
    let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    println!(
        "{} of {} checks within {SUITE_TOLERANCE:e}; worst {worst:.2e}; {:.1} s",
        entries.len() - failed,
        entries.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        bail!(GradcheckFailed(failed));
    }
    Ok(())
}

fn inspect(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let ncfg = cfg.model.network_config()?;
    let net = Network::new(ncfg.clone())?;
    let layout = net.layout();
    println!(
        "model {} ({:?} preset), channels {:?}, {} blocks per scale",
        ncfg.variant, ncfg.size_preset, ncfg.channel_schedule, ncfg.blocks_per_scale
    );
    let width = layout.shapes().map(|(n, _)| n.len()).max().unwrap_or(0);
    for (name, shape) in layout.shapes() {
        println!("  {name:<width$}  {:<16}  {}", shape.to_string(), shape.numel());
    }
    println!("{} tensors, {} parameters", layout.len(), net.param_count());
    if let Some(p) = checkpoint {
        let params = ParamStore::<f32>::load(p)?;
        net.check_params(&params).with_context(|| format!("checkpoint {}", p.display()))?;
        println!("checkpoint {} matches", p.display());
    }
    Ok(())
}
