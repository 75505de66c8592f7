//! Command-line front end stitching the library into a workflow: synthesize
//! phantom datasets, pretrain on labels, adapt with unlabeled scans, predict,
//! and score. One process per command; everything is deterministic given the
//! config plus seed.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::{ImageBuffer, Rgb};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::SegNetConfig;
use crate::data::{self, BinaryMask, HuSlice, PatientVolume};
use crate::discriminator::DiscriminatorConfig;
use crate::metrics::{Aggregation, EvalPair, MetricsError, evaluate_dataset};
use crate::phantom::{self, DomainShift, PhantomError, PhantomSpec};
use crate::postprocess::{PostprocessConfig, PostprocessError, postprocess_prediction};
use crate::train::{
    self, Checkpoint, EpochLoss, LabeledSlice, Phase, TrainError, TrainingConfig,
};

/// Exit codes are a stable contract for automation:
/// 2 config error, 3 data error, 4 pipeline precondition (missing pretrain).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Pretrain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Pretrain(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Pretrain(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::InvalidConfig(_)
            | TrainError::Model(_)
            | TrainError::Discriminator(_)
            | TrainError::Loss(_) => CliError::Config(e.to_string()),
            TrainError::MissingPretrain(_) => CliError::Pretrain(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PostprocessError> for CliError {
    fn from(e: PostprocessError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("i/o failure: {e}"))
    }
}

/// HU display window applied before images enter the network.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Window {
    pub lo: i16,
    pub hi: i16,
}

impl Default for Window {
    fn default() -> Self {
        Window { lo: -1000, hi: 400 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    pub labeled_dir: Option<PathBuf>,
    pub unlabeled_dir: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

/// Whole-run configuration: one JSON document covering every module, with
/// command-line flags overriding individual keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: SegNetConfig,
    pub discriminator: DiscriminatorConfig,
    pub training: TrainingConfig,
    pub postprocess: PostprocessConfig,
    pub phantom: PhantomSpec,
    pub paths: RunPaths,
    pub window: Window,
    /// Sigmoid cutoff for turning logits into mask pixels.
    pub threshold: f32,
    pub aggregation: Aggregation,
    /// Patient count for `synth`.
    pub patients: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: SegNetConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            training: TrainingConfig::default(),
            postprocess: PostprocessConfig::default(),
            phantom: PhantomSpec::default(),
            paths: RunPaths::default(),
            window: Window::default(),
            threshold: 0.5,
            aggregation: Aggregation::Slice,
            patients: 10,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "peseg",
    version,
    about = "Semi-supervised lesion segmentation for synthetic chest CT"
)]
pub struct Cli {
    /// JSON run configuration; flags override matching keys.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Base RNG seed (overrides training.seed from the config).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory (overrides paths.output_dir from the config).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate a synthetic chest-CT phantom dataset.
    Synth(SynthArgs),
    /// Supervised training on a labeled dataset.
    Train(TrainArgs),
    /// Adversarial semi-supervised training from a pretrained checkpoint.
    TrainSemi(SemiArgs),
    /// Unlabeled-only adaptation of a semi-supervised checkpoint.
    Finetune(FinetuneArgs),
    /// Write predicted masks for every slice of a dataset.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of patients to generate.
    #[arg(long, value_name = "N")]
    pub patients: Option<usize>,
    /// Domain shift as `offset=I,scale=F,noise=F` (all keys optional).
    #[arg(long, value_name = "SPEC")]
    pub domain_shift: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Labeled dataset directory (default: paths.labeled_dir).
    #[arg(long, value_name = "DIR")]
    pub labeled: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "F")]
    pub seg_lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SemiArgs {
    /// Pretrained checkpoint directory (default: paths.init_checkpoint).
    #[arg(long, value_name = "DIR")]
    pub init: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub labeled: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub unlabeled: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "F")]
    pub seg_lr: Option<f64>,
    #[arg(long, value_name = "F")]
    pub disc_lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Semi-supervised checkpoint directory (default: paths.init_checkpoint).
    #[arg(long, value_name = "DIR")]
    pub init: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub unlabeled: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "F")]
    pub seg_lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Checkpoint directory (default: paths.init_checkpoint).
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Input dataset (default: paths.unlabeled_dir, then paths.labeled_dir).
    #[arg(long, value_name = "DIR")]
    pub input: Option<PathBuf>,
    /// Apply lung-region post-processing to the raw masks.
    #[arg(long)]
    pub postprocess: bool,
    /// Also write 8-bit composites of each slice with its mask tinted red.
    #[arg(long)]
    pub overlay: bool,
    #[arg(long, value_name = "F")]
    pub threshold: Option<f32>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory holding predicted masks (layout of `predict` output).
    #[arg(long, value_name = "DIR")]
    pub pred: Option<PathBuf>,
    /// Ground-truth dataset directory (default: paths.labeled_dir).
    #[arg(long, value_name = "DIR")]
    pub gt: Option<PathBuf>,
    /// slice | patient | global (default from config).
    #[arg(long, value_name = "MODE")]
    pub aggregation: Option<String>,
}

/// Parses arguments, runs one command, and returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let _ = env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or("warn"),
    )
    .try_init();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
    }
    let out = cli
        .out
        .or_else(|| cfg.paths.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(cfg, &out, a),
        Cmd::Train(a) => cmd_train(cfg, &out, a),
        Cmd::TrainSemi(a) => cmd_train_semi(cfg, &out, a),
        Cmd::Finetune(a) => cmd_finetune(cfg, &out, a),
        Cmd::Predict(a) => cmd_predict(cfg, &out, a),
        Cmd::Eval(a) => cmd_eval(cfg, &out, a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(p) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(p)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", p.display())))
}

fn require_dir(p: &Path, what: &str) -> Result<(), CliError> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{what} directory not found: {}",
            p.display()
        )))
    }
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint, CliError> {
    require_dir(p, "checkpoint")?;
    Ok(Checkpoint::load(p)?)
}

/// Sorted patient subdirectories of a dataset root.
fn patient_dirs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    require_dir(dir, "dataset")?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Data(format!(
            "no patient directories under {}",
            dir.display()
        )));
    }
    Ok(dirs)
}

fn load_labeled(dir: &Path, window: Window) -> Result<Vec<LabeledSlice>, CliError> {
    let mut out = Vec::new();
    for pd in patient_dirs(dir)? {
        let v = data::load_volume(&pd)?;
        let masks = v.masks.as_ref().ok_or_else(|| {
            CliError::Data(format!("{} has no ground-truth masks", pd.display()))
        })?;
        for (s, m) in v.slices.iter().zip(masks) {
            out.push(LabeledSlice {
                image: data::window_normalize::<f32>(s, window.lo, window.hi)?,
                mask: m.clone(),
            });
        }
    }
    Ok(out)
}

fn load_unlabeled(dir: &Path, window: Window) -> Result<Vec<Array2<f32>>, CliError> {
    let mut out = Vec::new();
    for pd in patient_dirs(dir)? {
        let v = data::load_volume(&pd)?;
        for s in &v.slices {
            out.push(data::window_normalize::<f32>(s, window.lo, window.hi)?);
        }
    }
    Ok(out)
}

/// Streams per-epoch loss lines to stdout and `train.log`.
struct EpochLogger {
    file: File,
    total: usize,
}

impl EpochLogger {
    fn new(out: &Path, total: usize) -> Result<Self, CliError> {
        fs::create_dir_all(out)?;
        let file = File::create(out.join("train.log"))?;
        Ok(EpochLogger { file, total })
    }

    fn log(&mut self, e: &EpochLoss) {
        let mut line = format!("epoch {}/{} seg={:.6}", e.epoch + 1, self.total, e.seg);
        if let Some(v) = e.adv {
            line.push_str(&format!(" adv={v:.6}"));
        }
        if let Some(v) = e.semi {
            line.push_str(&format!(" semi={v:.6}"));
        }
        if let Some(v) = e.disc {
            line.push_str(&format!(" disc={v:.6}"));
        }
        println!("{line}");
        let _ = writeln!(self.file, "{line}");
    }
}

fn parse_domain_shift(s: &str) -> Result<DomainShift, CliError> {
    let mut d = DomainShift::default();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| {
            CliError::Config(format!(
                "bad domain-shift entry '{part}', expected key=value"
            ))
        })?;
        let v = v.trim();
        match k.trim() {
            "offset" => {
                d.hu_offset = v.parse().map_err(|_| {
                    CliError::Config(format!("domain-shift offset '{v}' is not an integer"))
                })?;
            }
            "scale" => {
                d.contrast_scale = v.parse().map_err(|_| {
                    CliError::Config(format!("domain-shift scale '{v}' is not a number"))
                })?;
            }
            "noise" => {
                d.extra_noise_sigma = v.parse().map_err(|_| {
                    CliError::Config(format!("domain-shift noise '{v}' is not a number"))
                })?;
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown domain-shift key '{other}' (expected offset, scale, noise)"
                )));
            }
        }
    }
    Ok(d)
}

fn parse_aggregation(s: &str) -> Result<Aggregation, CliError> {
    match s {
        "slice" => Ok(Aggregation::Slice),
        "patient" => Ok(Aggregation::Patient),
        "global" => Ok(Aggregation::Global),
        other => Err(CliError::Config(format!(
            "unknown aggregation '{other}' (expected slice, patient, global)"
        ))),
    }
}

fn cmd_synth(mut cfg: RunConfig, out: &Path, args: &SynthArgs) -> Result<(), CliError> {
    if let Some(n) = args.patients {
        cfg.patients = n;
    }
    if let Some(s) = &args.domain_shift {
        cfg.phantom.domain_shift = parse_domain_shift(s)?;
    }
    cfg.phantom.validate()?;
    if cfg.patients == 0 {
        return Err(CliError::Config("patients must be at least 1".into()));
    }
    fs::create_dir_all(out)?;

    let base_seed = cfg.training.seed;
    let shifted = cfg.phantom.domain_shift != DomainShift::default();
    let mut ids = Vec::with_capacity(cfg.patients);
    let mut n_slices = 0usize;
    let mut hu_sum = 0f64;
    let mut hu_n = 0usize;
    let mut lesion_px = 0usize;
    for i in 0..cfg.patients {
        let seed = base_seed + i as u64;
        let mut v = phantom::generate_patient(&cfg.phantom, seed)?;
        if shifted {
            v = phantom::apply_domain_shift(
                &v,
                &cfg.phantom.domain_shift,
                cfg.phantom.lung_hu_mean,
                seed,
            );
        }
        n_slices += v.slices.len();
        for s in &v.slices {
            hu_sum += s.iter().map(|&h| h as f64).sum::<f64>();
            hu_n += s.len();
        }
        if let Some(masks) = &v.masks {
            lesion_px += masks
                .iter()
                .map(|m| m.iter().filter(|&&p| p == 1).count())
                .sum::<usize>();
        }
        data::save_volume(&v, &out.join(&v.patient_id))?;
        ids.push(v.patient_id);
    }

    let manifest = serde_json::json!({
        "base_seed": base_seed,
        "phantom": cfg.phantom,
        "patients": ids,
    });
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Data(format!("cannot serialize dataset manifest: {e}")))?;
    fs::write(out.join("dataset.json"), body + "\n")?;

    let d = &cfg.phantom.domain_shift;
    println!(
        "domain offset={} scale={} noise={}: patients={} slices={} mean_hu={:.1} lesion_px={}",
        d.hu_offset,
        d.contrast_scale,
        d.extra_noise_sigma,
        cfg.patients,
        n_slices,
        hu_sum / hu_n.max(1) as f64,
        lesion_px,
    );
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, out: &Path, args: &TrainArgs) -> Result<(), CliError> {
    if let Some(n) = args.epochs {
        cfg.training.epochs = n;
    }
    if let Some(n) = args.batch_size {
        cfg.training.batch_size = n;
    }
    if let Some(lr) = args.seg_lr {
        cfg.training.seg_lr = lr;
    }
    cfg.training.phase = Phase::Supervised;

    let labeled_dir = args
        .labeled
        .clone()
        .or_else(|| cfg.paths.labeled_dir.clone())
        .ok_or_else(|| {
            CliError::Config("no labeled dataset; set --labeled or paths.labeled_dir".into())
        })?;
    let labeled = load_labeled(&labeled_dir, cfg.window)?;

    let mut logger = EpochLogger::new(out, cfg.training.epochs)?;
    let ckpt = train::train_supervised(
        &cfg.training,
        &cfg.model,
        &cfg.discriminator,
        &labeled,
        |e| logger.log(e),
    )?;
    let ckpt_dir = out.join("checkpoint");
    ckpt.save(&ckpt_dir)?;
    println!("checkpoint written to {}", ckpt_dir.display());
    Ok(())
}

fn cmd_train_semi(mut cfg: RunConfig, out: &Path, args: &SemiArgs) -> Result<(), CliError> {
    if let Some(n) = args.epochs {
        cfg.training.epochs = n;
    }
    if let Some(n) = args.batch_size {
        cfg.training.batch_size = n;
    }
    if let Some(lr) = args.seg_lr {
        cfg.training.seg_lr = lr;
    }
    if let Some(lr) = args.disc_lr {
        cfg.training.disc_lr = lr;
    }
    cfg.training.phase = Phase::Semi;

    let init_path = args
        .init
        .clone()
        .or_else(|| cfg.paths.init_checkpoint.clone())
        .ok_or_else(|| {
            CliError::Pretrain(
                "train-semi requires a pretrained checkpoint; set --init or paths.init_checkpoint"
                    .into(),
            )
        })?;
    let init = load_checkpoint(&init_path)?;

    let labeled_dir = args
        .labeled
        .clone()
        .or_else(|| cfg.paths.labeled_dir.clone())
        .ok_or_else(|| {
            CliError::Config("no labeled dataset; set --labeled or paths.labeled_dir".into())
        })?;
    let unlabeled_dir = args
        .unlabeled
        .clone()
        .or_else(|| cfg.paths.unlabeled_dir.clone())
        .ok_or_else(|| {
            CliError::Config("no unlabeled dataset; set --unlabeled or paths.unlabeled_dir".into())
        })?;
    let labeled = load_labeled(&labeled_dir, cfg.window)?;
    let unlabeled = load_unlabeled(&unlabeled_dir, cfg.window)?;

    let mut logger = EpochLogger::new(out, cfg.training.epochs)?;
    let ckpt = train::train_semi(&cfg.training, &labeled, &unlabeled, Some(&init), |e| {
        logger.log(e)
    })?;
    let ckpt_dir = out.join("checkpoint");
    ckpt.save(&ckpt_dir)?;
    println!("checkpoint written to {}", ckpt_dir.display());
    Ok(())
}

fn cmd_finetune(mut cfg: RunConfig, out: &Path, args: &FinetuneArgs) -> Result<(), CliError> {
    if let Some(n) = args.epochs {
        cfg.training.epochs = n;
    }
    if let Some(n) = args.batch_size {
        cfg.training.batch_size = n;
    }
    if let Some(lr) = args.seg_lr {
        cfg.training.seg_lr = lr;
    }

    let init_path = args
        .init
        .clone()
        .or_else(|| cfg.paths.init_checkpoint.clone())
        .ok_or_else(|| {
            CliError::Pretrain(
                "finetune requires a trained checkpoint; set --init or paths.init_checkpoint"
                    .into(),
            )
        })?;
    let init = load_checkpoint(&init_path)?;

    let unlabeled_dir = args
        .unlabeled
        .clone()
        .or_else(|| cfg.paths.unlabeled_dir.clone())
        .ok_or_else(|| {
            CliError::Config("no unlabeled dataset; set --unlabeled or paths.unlabeled_dir".into())
        })?;
    let unlabeled = load_unlabeled(&unlabeled_dir, cfg.window)?;

    let mut logger = EpochLogger::new(out, cfg.training.epochs)?;
    let ckpt = train::fine_tune(&cfg.training, &unlabeled, Some(&init), |e| logger.log(e))?;
    let ckpt_dir = out.join("checkpoint");
    ckpt.save(&ckpt_dir)?;
    println!("checkpoint written to {}", ckpt_dir.display());
    Ok(())
}

fn cmd_predict(mut cfg: RunConfig, out: &Path, args: &PredictArgs) -> Result<(), CliError> {
    if let Some(t) = args.threshold {
        cfg.threshold = t;
    }
    let ckpt_path = args
        .checkpoint
        .clone()
        .or_else(|| cfg.paths.init_checkpoint.clone())
        .ok_or_else(|| {
            CliError::Data(
                "predict requires a checkpoint; set --checkpoint or paths.init_checkpoint".into(),
            )
        })?;
    let input = args
        .input
        .clone()
        .or_else(|| cfg.paths.unlabeled_dir.clone())
        .or_else(|| cfg.paths.labeled_dir.clone())
        .ok_or_else(|| {
            CliError::Data(
                "predict requires an input dataset; set --input, paths.unlabeled_dir, or paths.labeled_dir"
                    .into(),
            )
        })?;

    let ckpt = load_checkpoint(&ckpt_path)?;
    let (mut seg, _) = train::build_models(&ckpt)?;
    fs::create_dir_all(out)?;

    for pd in patient_dirs(&input)? {
        let v = data::load_volume(&pd)?;
        let images: Vec<Array2<f32>> = v
            .slices
            .iter()
            .map(|s| data::window_normalize::<f32>(s, cfg.window.lo, cfg.window.hi))
            .collect::<Result<_, _>>()?;
        let mut masks =
            train::predict_masks(&mut seg, &images, cfg.threshold, cfg.training.batch_size)?;
        if args.postprocess {
            masks = masks
                .iter()
                .zip(&v.slices)
                .map(|(m, s)| postprocess_prediction(m, s, &cfg.postprocess))
                .collect::<Result<_, _>>()?;
        }
        data::save_masks(&masks, &out.join(&v.patient_id).join("masks"))?;
        if args.overlay {
            write_overlays(
                &v,
                &masks,
                cfg.window,
                &out.join(&v.patient_id).join("overlay"),
            )?;
        }
        println!("{}: {} masks", v.patient_id, masks.len());
    }
    Ok(())
}

/// 8-bit review images: windowed grayscale with mask pixels tinted red.
fn write_overlays(
    v: &PatientVolume,
    masks: &[BinaryMask],
    window: Window,
    dir: &Path,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    for (i, (s, m)) in v.slices.iter().zip(masks).enumerate() {
        let img = overlay_image(s, m, window)?;
        let path = dir.join(format!("{i:04}.png"));
        img.save(&path)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn overlay_image(
    slice: &HuSlice,
    mask: &BinaryMask,
    window: Window,
) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>, CliError> {
    let gray = data::window_normalize::<f32>(slice, window.lo, window.hi)?;
    let (h, w) = gray.dim();
    let mut img = ImageBuffer::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let g = (gray[(y as usize, x as usize)] * 255.0).round() as u8;
        *p = if mask[(y as usize, x as usize)] > 0 {
            Rgb([255, g / 2, g / 2])
        } else {
            Rgb([g, g, g])
        };
    }
    Ok(img)
}

fn cmd_eval(mut cfg: RunConfig, out: &Path, args: &EvalArgs) -> Result<(), CliError> {
    if let Some(a) = &args.aggregation {
        cfg.aggregation = parse_aggregation(a)?;
    }
    let pred_dir = args.pred.clone().ok_or_else(|| {
        CliError::Config("no prediction directory; set --pred".into())
    })?;
    let gt_dir = args
        .gt
        .clone()
        .or_else(|| cfg.paths.labeled_dir.clone())
        .ok_or_else(|| {
            CliError::Config("no ground-truth dataset; set --gt or paths.labeled_dir".into())
        })?;
    require_dir(&pred_dir, "prediction")?;

    let mut pairs = Vec::new();
    for pd in patient_dirs(&gt_dir)? {
        let v = data::load_volume(&pd)?;
        let gts = v.masks.as_ref().ok_or_else(|| {
            CliError::Data(format!("{} has no ground-truth masks", pd.display()))
        })?;
        let mask_dir = pred_dir.join(&v.patient_id).join("masks");
        if !mask_dir.is_dir() {
            return Err(CliError::Data(format!(
                "no predictions for patient {}: {} missing",
                v.patient_id,
                mask_dir.display()
            )));
        }
        let preds = data::load_masks(&mask_dir)?;
        if preds.len() != gts.len() {
            return Err(CliError::Data(format!(
                "prediction/ground-truth slice count mismatch for {}: {} vs {}",
                v.patient_id,
                preds.len(),
                gts.len()
            )));
        }
        for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
            if p.dim() != g.dim() {
                return Err(CliError::Data(format!(
                    "prediction/ground-truth shape mismatch for {} slice {i}: {:?} vs {:?}",
                    v.patient_id,
                    p.dim(),
                    g.dim()
                )));
            }
            pairs.push(EvalPair {
                slice_id: format!("{}/{:04}", v.patient_id, i),
                patient_id: v.patient_id.clone(),
                pred: p.clone(),
                gt: g.clone(),
            });
        }
    }

    let report = evaluate_dataset(&pairs, cfg.aggregation)?;
    fs::create_dir_all(out)?;
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Data(format!("cannot serialize metrics report: {e}")))?;
    fs::write(out.join("metrics.json"), body + "\n")?;

    let sens = report
        .aggregate
        .sensitivity
        .map(|v| format!("{v:.4}"))
        .unwrap_or_else(|| "nan".into());
    println!(
        "miou={:.4} dice={:.4} sensitivity={sens}",
        report.aggregate.miou, report.aggregate.dice
    );
    Ok(())
}
