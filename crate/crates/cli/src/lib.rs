//! `stitchkit` command line.
//!
//! Every subcommand reads an optional JSON pipeline config and applies
//! explicitly given flags on top of it. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use stitchkit::align::{align_with_offsets, estimate_offsets, AlignmentResult, LevelTrace};
use stitchkit::config::PipelineConfig;
use stitchkit::datakit::{
    load_dataset, load_image, procedural_source, save_image, write_synthetic_set, SynthParams,
};
use stitchkit::evalkit::{
    build_report, cap_psnr, four_pt_rmse, psnr_overlap, ssim_overlap, EvalReport, Quality, SampleMetric,
    MIN_REPORT_SAMPLES,
};
use stitchkit::geometry::{CanvasSpec, FourPointOffsets, Homography};
use stitchkit::reconstruct::{build_model, dump_feature_maps, reconstruct, train, BranchConfig, StitchModel};
use stitchkit::warpmask::save_mask_png;
use stitchkit::{Error, Tensor4};

fn defaults() -> PipelineConfig {
    PipelineConfig::default()
}

#[derive(Parser)]
#[command(name = "stitchkit", version, about = "Unsupervised two-stage image stitching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic reference/target pairs with known corner offsets.
    GenSynth(GenSynthArgs),
    /// Estimate the aligning homography of one pair and warp it onto the canvas.
    Align(AlignArgs),
    /// Align and reconstruct one pair.
    Stitch(StitchArgs),
    /// Train the reconstruction network on a dataset.
    Train(TrainArgs),
    /// Evaluate alignment over a dataset and write a bucketed report.
    Eval(EvalArgs),
    /// Write the low-resolution branch feature maps of one pair.
    DumpFeatures(DumpArgs),
}

#[derive(Args)]
struct Common {
    /// JSON pipeline config; explicitly given flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed of every random stream.
    #[arg(long, default_value_t = defaults().seed)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value_os_t = defaults().output)]
    out: PathBuf,
}

#[derive(Args)]
struct PyramidArgs {
    /// Pyramid levels.
    #[arg(long, default_value_t = defaults().pyramid.levels)]
    levels: usize,
    /// Optimizer iterations per level.
    #[arg(long, default_value_t = defaults().pyramid.iterations_per_level)]
    iterations_per_level: usize,
    /// Initial step in pixels.
    #[arg(long, default_value_t = defaults().pyramid.step_init)]
    step_init: f64,
    /// Step multiplier on rejection or plateau.
    #[arg(long, default_value_t = defaults().pyramid.step_decay)]
    step_decay: f64,
    /// Offset bound in pixels [default: 0.45 x image width].
    #[arg(long)]
    max_offset: Option<f64>,
}

#[derive(Args)]
struct BranchArgs {
    /// Width multiplier of every branch layer.
    #[arg(long, default_value_t = defaults().branch.channel_scale)]
    channel_scale: f64,
    /// Side of the square low-resolution working size.
    #[arg(long, default_value_t = defaults().branch.lr_working_size.0)]
    lr_size: usize,
    /// Residual blocks in the high-resolution branch.
    #[arg(long, default_value_t = defaults().branch.resblock_count)]
    resblocks: usize,
    /// Stop high-resolution gradients from reaching the low-resolution branch.
    #[arg(long)]
    detach_hr_input: bool,
}

#[derive(Args)]
struct GenSynthArgs {
    #[command(flatten)]
    common: Common,
    /// Source image; a procedural texture is used when absent.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Number of pairs.
    #[arg(long, default_value_t = defaults().synth.count)]
    n: usize,
    /// Maximum corner displacement in pixels.
    #[arg(long, default_value_t = defaults().synth.disturbance)]
    disturbance: f64,
    /// Side of the square crops.
    #[arg(long, default_value_t = defaults().synth.crop_size)]
    crop_size: usize,
    /// Side of the procedural source.
    #[arg(long, default_value_t = defaults().synth.source_size)]
    source_size: usize,
    /// Per-target gain/bias jitter amplitude (0 disables).
    #[arg(long, default_value_t = defaults().synth.photometric_jitter)]
    jitter: f64,
}

#[derive(Args)]
struct AlignArgs {
    #[command(flatten)]
    common: Common,
    /// Reference image.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Target image, warped onto the reference.
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    pyramid: PyramidArgs,
}

#[derive(Args)]
struct StitchArgs {
    #[command(flatten)]
    common: Common,
    /// Reference image.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Target image, warped onto the reference.
    #[arg(long)]
    target: PathBuf,
    /// Trained checkpoint; an untrained model from the seed is used when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    pyramid: PyramidArgs,
    #[command(flatten)]
    branch: BranchArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Passes over the dataset.
    #[arg(long, default_value_t = defaults().train.epochs)]
    epochs: usize,
    /// Cap on the number of updates.
    #[arg(long)]
    iterations: Option<usize>,
    /// Initial Adam learning rate.
    #[arg(long, default_value_t = defaults().train.adam.lr)]
    lr: f64,
    /// Learning-rate multiplier per epoch.
    #[arg(long, default_value_t = defaults().train.decay_rate)]
    decay_rate: f64,
    /// Seam weight.
    #[arg(long, default_value_t = defaults().weights.lambda_s)]
    lambda_s: f64,
    /// Content weight.
    #[arg(long, default_value_t = defaults().weights.lambda_c)]
    lambda_c: f64,
    /// Low-resolution stage weight.
    #[arg(long, default_value_t = defaults().weights.omega_lr)]
    omega_lr: f64,
    /// High-resolution stage weight.
    #[arg(long, default_value_t = defaults().weights.omega_hr)]
    omega_hr: f64,
    /// Consistency weight.
    #[arg(long, default_value_t = defaults().weights.omega_cs)]
    omega_cs: f64,
    /// Warp with the manifest's ground-truth offsets instead of estimating them.
    #[arg(long)]
    truth_offsets: bool,
    #[command(flatten)]
    pyramid: PyramidArgs,
    #[command(flatten)]
    branch: BranchArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset manifest; without one, a synthetic set is generated and
    /// evaluated for every disturbance in `synth.sweep`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory of per-record `<id>.offsets.json`; missing ones are estimated
    /// and written. The report goes here too.
    #[arg(long)]
    results: PathBuf,
    #[command(flatten)]
    pyramid: PyramidArgs,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    common: Common,
    /// Reference image.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Target image, warped onto the reference.
    #[arg(long)]
    target: PathBuf,
    /// Trained checkpoint; an untrained model from the seed is used when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    pyramid: PyramidArgs,
    #[command(flatten)]
    branch: BranchArgs,
}

/// Flags that appear on the command line (not defaulted).
struct Given<'a>(&'a ArgMatches);

impl Given<'_> {
    fn has(&self, id: &str) -> bool {
        matches!(self.0.try_get_raw(id), Ok(Some(_))) && self.0.value_source(id) == Some(ValueSource::CommandLine)
    }
}

fn base_config(common: &Common, given: &Given) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if given.has("seed") {
        cfg.seed = common.seed;
    }
    if given.has("out") {
        cfg.output = common.out.clone();
    }
    Ok(cfg)
}

fn apply_pyramid(cfg: &mut PipelineConfig, a: &PyramidArgs, given: &Given) {
    let p = &mut cfg.pyramid;
    if given.has("levels") {
        p.levels = a.levels;
    }
    if given.has("iterations_per_level") {
        p.iterations_per_level = a.iterations_per_level;
    }
    if given.has("step_init") {
        p.step_init = a.step_init;
    }
    if given.has("step_decay") {
        p.step_decay = a.step_decay;
    }
    if a.max_offset.is_some() {
        p.max_offset = a.max_offset;
    }
}

fn apply_branch(cfg: &mut PipelineConfig, a: &BranchArgs, given: &Given) {
    let b = &mut cfg.branch;
    if given.has("channel_scale") {
        b.channel_scale = a.channel_scale;
    }
    if given.has("lr_size") {
        b.lr_working_size = (a.lr_size, a.lr_size);
    }
    if given.has("resblocks") {
        b.resblock_count = a.resblocks;
    }
    if a.detach_hr_input {
        b.detach_hr_input = true;
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct AlignReport<'a> {
    offsets: &'a FourPointOffsets,
    homography: &'a Homography,
    canvas: &'a CanvasSpec,
    final_loss: f64,
    identity_loss: f64,
    overlap_rate: f64,
    trace: &'a [LevelTrace],
}

fn estimate_and_warp(cfg: &PipelineConfig, reference: &Tensor4, target: &Tensor4, out: &Path) -> anyhow::Result<AlignmentResult> {
    let est = estimate_offsets(reference, target, &cfg.pyramid)?;
    let r = align_with_offsets(reference, target, &est.offsets)?;
    fs::create_dir_all(out)?;
    write_json(
        &out.join("offsets.json"),
        &AlignReport {
            offsets: &r.offsets,
            homography: &r.homography,
            canvas: &r.canvas,
            final_loss: est.final_loss,
            identity_loss: est.identity_loss,
            overlap_rate: r.masks.overlap_rate()?,
            trace: &est.trace,
        },
    )?;
    Ok(r)
}

fn write_alignment_images(r: &AlignmentResult, out: &Path) -> anyhow::Result<()> {
    save_image(&r.warped_a.clamp01(), &out.join("warped_a.png"))?;
    save_image(&r.warped_b.clamp01(), &out.join("warped_b.png"))?;
    save_mask_png(&r.masks.content_a, &out.join("mask_content_a.png"))?;
    save_mask_png(&r.masks.content_b, &out.join("mask_content_b.png"))?;
    save_mask_png(&r.masks.seam_a, &out.join("mask_seam_a.png"))?;
    save_mask_png(&r.masks.seam_b, &out.join("mask_seam_b.png"))?;
    Ok(())
}

fn load_pair(reference: &Path, target: &Path) -> anyhow::Result<(Tensor4, Tensor4)> {
    let a = load_image(reference)?;
    let b = load_image(target)?;
    if a.shape() != b.shape() {
        return Err(Error::Record {
            id: target.display().to_string(),
            detail: format!("size {} differs from the reference {}", b.shape(), a.shape()),
        }
        .into());
    }
    Ok((a, b))
}

fn model_config_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

fn load_or_build(cfg: &PipelineConfig, model: Option<&Path>) -> anyhow::Result<StitchModel> {
    match model {
        Some(p) => {
            let side = model_config_path(p);
            let branch: BranchConfig = if side.exists() {
                serde_json::from_str(&fs::read_to_string(&side)?)?
            } else {
                cfg.branch
            };
            Ok(StitchModel::load(p, &branch)?)
        }
        None => Ok(build_model(&cfg.branch, cfg.seed)?),
    }
}

fn gen_synth(a: &GenSynthArgs, given: &Given) -> anyhow::Result<()> {
    let mut cfg = base_config(&a.common, given)?;
    let s = &mut cfg.synth;
    if given.has("n") {
        s.count = a.n;
    }
    if given.has("disturbance") {
        s.disturbance = a.disturbance;
    }
    if given.has("crop_size") {
        s.crop_size = a.crop_size;
    }
    if given.has("source_size") {
        s.source_size = a.source_size;
    }
    if given.has("jitter") {
        s.photometric_jitter = a.jitter;
    }
    cfg.validate()?;
    let (source, name) = match &a.source {
        Some(p) => (load_image(p)?, p.display().to_string()),
        None => (
            procedural_source(cfg.synth.source_size, cfg.synth.source_size, cfg.seed),
            "procedural".to_string(),
        ),
    };
    let params = SynthParams {
        source: name,
        count: cfg.synth.count,
        disturbance: cfg.synth.disturbance,
        crop_size: cfg.synth.crop_size,
        photometric_jitter: cfg.synth.photometric_jitter,
    };
    let m = write_synthetic_set(&source, &params, cfg.seed, &cfg.output)?;
    println!("wrote {} pairs to {}", m.records.len(), cfg.output.display());
    Ok(())
}

fn align(a: &AlignArgs, given: &Given) -> anyhow::Result<()> {
    let mut cfg = base_config(&a.common, given)?;
    apply_pyramid(&mut cfg, &a.pyramid, given);
    cfg.validate()?;
    let (reference, target) = load_pair(&a.reference, &a.target)?;
    let r = estimate_and_warp(&cfg, &reference, &target, &cfg.output)?;
    write_alignment_images(&r, &cfg.output)?;
    println!("offsets {:?}, ablation loss {:.6}", r.offsets.to_flat(), r.final_loss);
    Ok(())
}

fn stitch(a: &StitchArgs, given: &Given) -> anyhow::Result<()> {
    let mut cfg = base_config(&a.common, given)?;
    apply_pyramid(&mut cfg, &a.pyramid, given);
    apply_branch(&mut cfg, &a.branch, given);
    cfg.validate()?;
    let model = load_or_build(&cfg, a.model.as_deref())?;
    let (reference, target) = load_pair(&a.reference, &a.target)?;
    let r = estimate_and_warp(&cfg, &reference, &target, &cfg.output)?;
    write_alignment_images(&r, &cfg.output)?;
    let out = reconstruct(&model, r)?;
    save_image(&out.s_lr.clamp01(), &cfg.output.join("s_lr.png"))?;
    save_image(&out.s_hr.clamp01(), &cfg.output.join("s_hr.png"))?;
    println!("stitched {}x{} canvas, consistency loss {:.6}", out.alignment.canvas.width, out.alignment.canvas.height, out.l_cs);
    Ok(())
}

fn dataset_path(cfg: &PipelineConfig, flag: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    match flag.clone().or_else(|| cfg.dataset.clone()) {
        Some(p) => Ok(p),
        None => bail!(Error::Config("no dataset manifest given (--manifest or `dataset` in the config)".into())),
    }
}

fn train_cmd(a: &TrainArgs, given: &Given) -> anyhow::Result<()> {
    let mut cfg = base_config(&a.common, given)?;
    apply_pyramid(&mut cfg, &a.pyramid, given);
    apply_branch(&mut cfg, &a.branch, given);
    let t = &mut cfg.train;
    if given.has("epochs") {
        t.epochs = a.epochs;
    }
    if a.iterations.is_some() {
        t.max_iterations = a.iterations;
    }
    if given.has("lr") {
        t.adam.lr = a.lr;
    }
    if given.has("decay_rate") {
        t.decay_rate = a.decay_rate;
    }
    let w = &mut cfg.weights;
    for (id, slot, v) in [
        ("lambda_s", &mut w.lambda_s, a.lambda_s),
        ("lambda_c", &mut w.lambda_c, a.lambda_c),
        ("omega_lr", &mut w.omega_lr, a.omega_lr),
        ("omega_hr", &mut w.omega_hr, a.omega_hr),
        ("omega_cs", &mut w.omega_cs, a.omega_cs),
    ] {
        if given.has(id) {
            *slot = v;
        }
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    let manifest = dataset_path(&cfg, &a.manifest)?;
    let pairs = load_dataset(&manifest)?;
    let mut data = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let offsets = match (a.truth_offsets, p.record.truth_offsets) {
            (true, Some(t)) => t,
            (true, None) => bail!(Error::Record {
                id: p.record.id.clone(),
                detail: "no ground-truth offsets in the manifest".into(),
            }),
            (false, _) => estimate_offsets(&p.reference, &p.target, &cfg.pyramid)?.offsets,
        };
        data.push(align_with_offsets(&p.reference, &p.target, &offsets)?);
    }
    let mut model = build_model(&cfg.branch, cfg.seed)?;
    let trace = train(&mut model, &data, &cfg.weights, &cfg.train)?;
    fs::create_dir_all(&cfg.output)?;
    let ckpt = cfg.output.join("model.ckpt");
    model.save(&ckpt)?;
    write_json(&model_config_path(&ckpt), &model.config)?;
    fs::write(cfg.output.join("trace.csv"), trace.to_csv())?;
    let totals = trace.total();
    if let (Some(first), Some(last)) = (totals.first(), totals.last()) {
        println!("trained {} iterations, L_R {first:.4} -> {last:.4}", totals.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct FullReport {
    records: usize,
    rmse: Option<EvalReport>,
    identity_rmse: Option<EvalReport>,
    psnr: EvalReport,
    ssim: EvalReport,
}

fn eval_cmd(a: &EvalArgs, given: &Given) -> anyhow::Result<()> {
    let mut cfg = base_config(&a.common, given)?;
    apply_pyramid(&mut cfg, &a.pyramid, given);
    cfg.validate()?;
    match a.manifest.clone().or_else(|| cfg.dataset.clone()) {
        Some(manifest) => {
            let text = eval_manifest(&cfg, &manifest, &a.results)?.1;
            print!("{text}");
        }
        None => eval_sweep(&cfg, &a.results)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    disturbance: f64,
    rmse: f64,
    identity_rmse: f64,
    psnr: f64,
    ssim: f64,
}

/// No manifest: generate one synthetic set per sweep disturbance and
/// evaluate each in its own subdirectory.
fn eval_sweep(cfg: &PipelineConfig, results: &Path) -> anyhow::Result<()> {
    if cfg.synth.sweep.is_empty() {
        bail!(Error::Config("no dataset manifest given and synth.sweep is empty".into()));
    }
    let source = procedural_source(cfg.synth.source_size, cfg.synth.source_size, cfg.seed);
    let mut rows = Vec::new();
    for &d in &cfg.synth.sweep {
        let dir = results.join(format!("sweep_d{d}"));
        let params = SynthParams {
            source: "procedural".into(),
            count: cfg.synth.count.max(MIN_REPORT_SAMPLES),
            disturbance: d,
            crop_size: cfg.synth.crop_size,
            photometric_jitter: cfg.synth.photometric_jitter,
        };
        write_synthetic_set(&source, &params, cfg.seed, &dir.join("data"))?;
        let (r, _) = eval_manifest(cfg, &dir.join("data").join("manifest.json"), &dir)?;
        let avg = |r: &Option<EvalReport>| r.as_ref().map_or(f64::NAN, |r| r.average);
        rows.push(SweepRow {
            disturbance: d,
            rmse: avg(&r.rmse),
            identity_rmse: avg(&r.identity_rmse),
            psnr: r.psnr.average,
            ssim: r.ssim.average,
        });
    }
    write_json(&results.join("sweep.json"), &rows)?;
    println!("{:>12} {:>10} {:>14} {:>8} {:>8}", "disturbance", "rmse", "identity_rmse", "psnr", "ssim");
    for r in &rows {
        println!(
            "{:>12} {:>10.4} {:>14.4} {:>8.2} {:>8.4}",
            r.disturbance, r.rmse, r.identity_rmse, r.psnr, r.ssim
        );
    }
    Ok(())
}

fn eval_manifest(cfg: &PipelineConfig, manifest: &Path, results: &Path) -> anyhow::Result<(FullReport, String)> {
    let pairs = load_dataset(manifest)?;
    fs::create_dir_all(results)?;
    let (mut rmse, mut ident, mut psnr, mut ssim) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for p in &pairs {
        let id = &p.record.id;
        let path = results.join(format!("{id}.offsets.json"));
        let offsets: FourPointOffsets = if path.exists() {
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
            serde_json::from_value(v.get("offsets").cloned().unwrap_or(v))?
        } else {
            let est = estimate_offsets(&p.reference, &p.target, &cfg.pyramid)?;
            write_json(&path, &serde_json::json!({ "offsets": est.offsets }))?;
            est.offsets
        };
        let h = stitchkit::geometry::solve_dlt(&offsets, (p.reference.shape().w, p.reference.shape().h))?;
        let metric = |value| SampleMetric { id: id.clone(), value };
        psnr.push(metric(cap_psnr(psnr_overlap(&p.reference, &p.target, &h)?)));
        ssim.push(metric(ssim_overlap(&p.reference, &p.target, &h)?));
        if let Some(t) = p.record.truth_offsets {
            rmse.push(metric(four_pt_rmse(&offsets, &t)));
            ident.push(metric(four_pt_rmse(&FourPointOffsets::ZERO, &t)));
        }
    }
    let with_truth = !rmse.is_empty() && rmse.len() == pairs.len();
    let report = FullReport {
        records: pairs.len(),
        rmse: with_truth.then(|| build_report("rmse", &rmse, Quality::LowerIsBetter)).transpose()?,
        identity_rmse: with_truth
            .then(|| build_report("identity_rmse", &ident, Quality::LowerIsBetter))
            .transpose()?,
        psnr: build_report("psnr", &psnr, Quality::HigherIsBetter)?,
        ssim: build_report("ssim", &ssim, Quality::HigherIsBetter)?,
    };
    write_json(&results.join("report.json"), &report)?;
    let mut text = String::new();
    for r in [&report.rmse, &report.identity_rmse].into_iter().flatten().chain([&report.psnr, &report.ssim]) {
        text.push_str(&r.to_text());
        text.push('\n');
    }
    fs::write(results.join("report.txt"), &text)?;
    Ok((report, text))
}

fn dump_cmd(a: &DumpArgs, given: &Given) -> anyhow::Result<()> {
    let mut cfg = base_config(&a.common, given)?;
    apply_pyramid(&mut cfg, &a.pyramid, given);
    apply_branch(&mut cfg, &a.branch, given);
    cfg.validate()?;
    let model = load_or_build(&cfg, a.model.as_deref())?;
    let (reference, target) = load_pair(&a.reference, &a.target)?;
    let est = estimate_offsets(&reference, &target, &cfg.pyramid)?;
    let r = align_with_offsets(&reference, &target, &est.offsets)?;
    let files = dump_feature_maps(&model, &r.warped_a, &r.warped_b, &cfg.output)?;
    println!("wrote {} feature maps to {}", files.len(), cfg.output.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 1,
        Some(e) if e.is_numeric() => 3,
        _ => 2,
    }
}

/// Parse `argv` (program name first) and run one subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("a subcommand is required");
    let given = Given(sub);
    let result = match &cli.command {
        Command::GenSynth(a) => gen_synth(a, &given),
        Command::Align(a) => align(a, &given),
        Command::Stitch(a) => stitch(a, &given),
        Command::Train(a) => train_cmd(a, &given),
        Command::Eval(a) => eval_cmd(a, &given),
        Command::DumpFeatures(a) => dump_cmd(a, &given),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
