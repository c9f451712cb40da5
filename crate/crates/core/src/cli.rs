//! Command-line surface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench;
use crate::data::{self, formats, ChannelStats, StereoSample, SynthParams};
use crate::error::{Error, Result};
use crate::metrics::{self, FrameRow, MetricReport};
use crate::model::StereoModel;
use crate::ssm;
use crate::tensor::Tensor;
use crate::train::{self, ablation, Checkpoint, LossCsv, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "stereomamba", version, about = "State-space stereo disparity: data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic stereo dataset.
    Synth(SynthArgs),
    /// Train a model; writes checkpoints and a loss CSV.
    Train(TrainArgs),
    /// Predict disparity for one image pair.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Warp-synthesis evaluation (SSIM / PSNR of the re-rendered right view).
    WarpEval(WarpEvalArgs),
    /// Check scan, matrix and attention forms agree on random inputs.
    DualityCheck(DualityArgs),
    /// Time the linear scan against the materialized matrix.
    Bench(BenchArgs),
    /// Train the backbone / fusion variants and tabulate held-out metrics.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 16)]
    pub d_max_gt: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) once this many optimizer steps are done.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelSource {
    /// Trained checkpoint; without it a freshly initialized model is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Config for an untrained model (ignored with --checkpoint).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    /// Output prefix: writes `<out>.pfm` and `<out>.ppm`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelSource,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory with ground truth.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of `<stem>.pfm` predictions; otherwise the model predicts.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelSource,
}

#[derive(Debug, Args)]
pub struct WarpEvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelSource,
}

#[derive(Debug, Args)]
pub struct DualityArgs {
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_LENGTHS)]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub const DUALITY_MATRIX_TOL: f64 = 1e-10;
pub const DUALITY_ATTENTION_TOL: f64 = 1e-12;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Blue-to-red ramp over `[0, d_max)`.
pub fn colorize(disp: &Tensor, d_max: usize) -> Tensor {
    let plane = disp.numel();
    let (h, w) = (disp.shape()[0], disp.shape()[1]);
    let mut out = vec![0.0; 3 * plane];
    for (i, &d) in disp.data().iter().enumerate() {
        let t = (d / (d_max.max(2) - 1) as f64).clamp(0.0, 1.0);
        let ramp = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
        out[i] = ramp(3.0);
        out[plane + i] = ramp(2.0);
        out[2 * plane + i] = ramp(1.0);
    }
    Tensor::from_parts(vec![3, h, w], out)
}

/// Model plus the normalization it expects.
struct Loaded {
    model: StereoModel,
    stats: ChannelStats,
}

fn load_model(src: &ModelSource, fallback_stats: impl FnOnce() -> Result<ChannelStats>) -> Result<Loaded> {
    match &src.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let mut model = StereoModel::new(ckpt.config.model.clone(), ckpt.config.seed)?;
            ckpt.restore_params(&mut model.params)?;
            Ok(Loaded { model, stats: ckpt.stats })
        }
        None => {
            let cfg = load_config(src.config.as_deref(), Some(src.seed))?;
            Ok(Loaded {
                model: StereoModel::new(cfg.model, cfg.seed)?,
                stats: fallback_stats()?,
            })
        }
    }
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    let p = SynthParams {
        height: a.height,
        width: a.width,
        d_max_gt: a.d_max_gt,
        n_layers: a.layers,
    };
    p.validate()?;
    create_dir(&a.out)?;
    for i in 0..a.count {
        let s = data::synth_stereogram(&p, train::derive_seed(a.seed, 0, i as u64))?;
        data::save_sample(&a.out, &format!("{i:05}"), &s)?;
    }
    data::save_calib(&a.out, &data::Calib::default())?;
    println!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    create_dir(&a.out)?;
    let loss_path = a.out.join("loss.csv");
    let ckpt_path = a.out.join("checkpoint.bin");
    let (mut trainer, append) = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if let Some(cfg_path) = &a.config {
                let cfg = load_config(Some(cfg_path), a.seed)?;
                if cfg.fingerprint() != ckpt.config.fingerprint() {
                    return Err(Error::invalid("--config differs from the checkpoint's configuration"));
                }
            }
            let (data, _) = train::load_data(&ckpt.config)?;
            (Trainer::resume(&ckpt, data)?, true)
        }
        None => (Trainer::new(load_config(a.config.as_deref(), a.seed)?)?, false),
    };
    trainer.config.save(&a.out.join("config.json"))?;
    let mut csv = LossCsv::open(&loss_path, append)?;
    let total = trainer.total_steps();
    let spe = trainer.steps_per_epoch() as u64;
    let started = std::time::Instant::now();
    trainer.run(a.stop_after, |log| {
        csv.write(log)?;
        if (log.step + 1) % spe == 0 {
            eprintln!(
                "epoch {} step {}/{} loss {:.4} lr {:.3e} ({:.0}s)",
                log.epoch + 1,
                log.step + 1,
                total,
                log.loss,
                log.lr,
                started.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&ckpt_path)?;
    if trainer.done() {
        let (_, val) = train::load_data(&trainer.config)?;
        if !val.is_empty() {
            let reports = trainer.evaluate(&val)?;
            let rows: Vec<FrameRow> = reports.iter().enumerate().map(|(i, r)| FrameRow::new(format!("val{i:04}"), r)).collect();
            metrics::write_csv(&a.out.join("val_metrics.csv"), &rows)?;
            if let Some(m) = metrics::aggregate_rows(&rows) {
                println!("{}", metrics::summary_line(&m, rows.len(), 0));
            }
        }
    }
    println!("step {}/{} checkpoint {}", trainer.step, total, ckpt_path.display());
    Ok(())
}

fn run_infer(a: &InferArgs) -> Result<()> {
    let left = formats::read_ppm(&a.left)?;
    let right = formats::read_ppm(&a.right)?;
    let pair = [StereoSample {
        gt_disparity: Tensor::zeros(&left.shape()[1..]),
        valid_mask: vec![false; left.numel() / 3],
        left: left.clone(),
        right: right.clone(),
        calib: data::Calib::default(),
    }];
    let m = load_model(&a.model, || ChannelStats::measure(&pair))?;
    let disp = train::predict_normalized(&m.model, &m.stats, &left, &right)?;
    let with_ext = |ext: &str| {
        let mut p = a.out.clone().into_os_string();
        p.push(ext);
        PathBuf::from(p)
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    formats::write_pfm(with_ext(".pfm"), &disp)?;
    formats::write_ppm(with_ext(".ppm"), &colorize(&disp, m.model.config.d_max))?;
    println!("wrote {} and {}", with_ext(".pfm").display(), with_ext(".ppm").display());
    Ok(())
}

/// Predictions per frame: from `<stem>.pfm` (or `<stem>.disp.pfm`) files, or
/// from the model.
fn predictions(
    frames: &[(String, StereoSample)],
    pred_dir: Option<&Path>,
    src: &ModelSource,
) -> Result<Vec<Tensor>> {
    if let Some(dir) = pred_dir {
        return frames
            .iter()
            .map(|(stem, _)| {
                let plain = dir.join(format!("{stem}.pfm"));
                let p = if plain.exists() { plain } else { dir.join(format!("{stem}.disp.pfm")) };
                formats::read_pfm(p)
            })
            .collect();
    }
    let samples: Vec<StereoSample> = frames.iter().map(|(_, s)| s.clone()).collect();
    let m = load_model(src, || ChannelStats::measure(&samples))?;
    let pool = train::thread_pool()?;
    pool.install(|| {
        use rayon::prelude::*;
        frames
            .par_iter()
            .map(|(_, s)| train::predict_normalized(&m.model, &m.stats, &s.left, &s.right))
            .collect()
    })
}

/// Frames with enough ground truth to score, and the number skipped.
fn scorable(data_dir: &Path) -> Result<(Vec<(String, StereoSample)>, usize)> {
    let all = data::load_dataset(data_dir)?;
    if all.is_empty() {
        return Err(Error::invalid(format!("no samples in {}", data_dir.display())));
    }
    let n = all.len();
    let kept: Vec<_> = all
        .into_iter()
        .filter(|(_, s)| s.valid_fraction() >= metrics::MIN_VALID_FRACTION)
        .collect();
    Ok((kept.clone(), n - kept.len()))
}

fn finish_report(out: &Path, rows: &[FrameRow], skipped: usize) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    metrics::write_csv(out, rows)?;
    match metrics::aggregate_rows(rows) {
        Some(m) => println!("{}", metrics::summary_line(&m, rows.len(), skipped)),
        None => println!("no frame passed the valid-coverage filter (skipped {skipped})"),
    }
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let (frames, skipped) = scorable(&a.data)?;
    let preds = predictions(&frames, a.pred.as_deref(), &a.model)?;
    let mut rows = Vec::with_capacity(frames.len());
    for ((stem, s), p) in frames.iter().zip(&preds) {
        let r = metrics::disparity_metrics(p, &s.gt_disparity, &s.valid_mask, &s.calib)?;
        rows.push(FrameRow::new(stem.clone(), &r));
    }
    finish_report(&a.out, &rows, skipped)
}

/// SSIM / PSNR of `right` against the left image warped by `disp`, over
/// in-frame samples intersected with `hint`.
pub fn warp_scores(s: &StereoSample, disp: &Tensor, hint: Option<&[bool]>) -> Result<(f64, f64)> {
    let (synth, valid) = metrics::warp_synthesize(&s.left, disp, hint)?;
    Ok((
        metrics::ssim_masked(&synth, &s.right, Some(&valid))?,
        metrics::psnr_masked(&synth, &s.right, Some(&valid))?,
    ))
}

fn run_warp_eval(a: &WarpEvalArgs) -> Result<()> {
    let (frames, skipped) = scorable(&a.data)?;
    let preds = predictions(&frames, a.pred.as_deref(), &a.model)?;
    let mut rows = Vec::with_capacity(frames.len());
    let mut gt_ssim = Vec::new();
    for ((stem, s), p) in frames.iter().zip(&preds) {
        let (ssim, psnr) = warp_scores(s, p, None)?;
        let mut r: MetricReport = metrics::disparity_metrics(p, &s.gt_disparity, &s.valid_mask, &s.calib)?;
        r.ssim = Some(ssim);
        r.psnr_db = Some(psnr);
        rows.push(FrameRow::new(stem.clone(), &r));
        gt_ssim.push(warp_scores(s, &s.gt_disparity, None)?.0);
    }
    finish_report(&a.out, &rows, skipped)?;
    if !gt_ssim.is_empty() {
        println!(
            "ground-truth warp SSIM {:.4}",
            gt_ssim.iter().sum::<f64>() / gt_ssim.len() as f64
        );
    }
    Ok(())
}

fn run_duality(a: &DualityArgs) -> Result<bool> {
    let s = ssm::duality_suite(a.count, 64, 16, a.seed)?;
    let ok_m = s.max_scan_vs_matrix < DUALITY_MATRIX_TOL;
    let ok_a = s.max_scan_vs_attention < DUALITY_ATTENTION_TOL;
    println!(
        "{} scan vs M·x: max |diff| {:.3e} over {} cases (tol {:e})",
        if ok_m { "PASS" } else { "FAIL" },
        s.max_scan_vs_matrix,
        s.cases,
        DUALITY_MATRIX_TOL
    );
    println!(
        "{} unit-decay scan vs masked attention: max |diff| {:.3e} (tol {:e})",
        if ok_a { "PASS" } else { "FAIL" },
        s.max_scan_vs_attention,
        DUALITY_ATTENTION_TOL
    );
    Ok(ok_m && ok_a)
}

fn run_bench(a: &BenchArgs) -> Result<()> {
    create_dir(&a.out)?;
    let rows = bench::scan_bench(&a.lengths, a.n, a.seed)?;
    let report = bench::format_report(&rows);
    print!("{report}");
    write_text(&a.out.join("bench.txt"), &report)?;
    write_text(&a.out.join("bench.json"), &serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}

fn run_ablation(a: &AblationArgs) -> Result<()> {
    create_dir(&a.out)?;
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let rows = ablation::ablation_run(&cfg, &ablation::default_variants(), |name| eprintln!("training {name}"))?;
    let table = ablation::format_table(&rows);
    print!("{table}");
    write_text(&a.out.join("ablation.txt"), &table)?;
    let path = a.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Runs a parsed command. `Ok(false)` means the command ran but a check failed.
pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth(a) => run_synth(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Infer(a) => run_infer(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::WarpEval(a) => run_warp_eval(a).map(|_| true),
        Command::DualityCheck(a) => run_duality(a),
        Command::Bench(a) => run_bench(a).map(|_| true),
        Command::Ablation(a) => run_ablation(a).map(|_| true),
    }
}

/// Process exit code: 0 success, 2 validation error (including bad usage),
/// 1 runtime failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}
