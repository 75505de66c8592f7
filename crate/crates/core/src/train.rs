//! Two-phase training: supervised pretraining of the segmentation network,
//! then adversarial semi-supervised training where labeled batches update
//! both networks and unlabeled batches update only the segmentation side
//! through self-training and adversarial terms.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{concatenate, Array2, Array3, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{ModelError, SegNet, SegNetConfig};
use crate::data::BinaryMask;
use crate::discriminator::{
    build_discriminator_input, split_input_gradient, DiscError, Discriminator,
    DiscriminatorConfig,
};
use crate::losses::{
    adversarial_loss_grad, bce_dice_loss_grad, discriminator_loss_grad, semi_supervised_loss_grad,
    LossError,
};
use crate::nn::act::sigmoid_map;
use crate::nn::optim::{poly_lr, Adam, SgdMomentum};
use crate::nn::store::{self, StoreError};
use crate::nn::{seeded_rng, HasParams, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Supervised,
    Semi,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub seg_lr: f64,
    pub disc_lr: f64,
    pub momentum: f64,
    pub lr_decay_power: f64,
    pub lambda_adv_labeled: f64,
    pub lambda_adv_unlabeled: f64,
    pub lambda_semi: f64,
    pub t_semi: f64,
    pub dice_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            phase: Phase::Supervised,
            epochs: 100,
            batch_size: 8,
            seg_lr: 1e-4,
            disc_lr: 1e-4,
            momentum: 0.9,
            lr_decay_power: 0.9,
            lambda_adv_labeled: 0.01,
            lambda_adv_unlabeled: 0.001,
            lambda_semi: 0.1,
            t_semi: 0.2,
            dice_smoothing: 1.0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.into()));
        if self.seg_lr <= 0.0 || self.disc_lr <= 0.0 {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.t_semi <= 0.0 || self.t_semi >= 1.0 {
            return bad("t_semi must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.lambda_adv_labeled < 0.0
            || self.lambda_adv_unlabeled < 0.0
            || self.lambda_semi < 0.0
        {
            return bad("loss weights must be non-negative");
        }
        if self.dice_smoothing < 0.0 {
            return bad("dice_smoothing must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("{0} requires a pretrained checkpoint")]
    MissingPretrain(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Discriminator(#[from] DiscError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// One windowed image plus its lesion mask.
#[derive(Debug, Clone)]
pub struct LabeledSlice {
    pub image: Array2<f32>,
    pub mask: BinaryMask,
}

pub type UnlabeledSlice = Array2<f32>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean labeled-batch segmentation objective.
    pub seg: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub semi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub disc: Option<f64>,
}

/// Everything needed to rebuild both networks exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub training: TrainingConfig,
    pub model: SegNetConfig,
    pub discriminator: DiscriminatorConfig,
}

pub const CHECKPOINT_VERSION: u32 = 1;
pub const SEG_BLOB: &str = "seg.params";
pub const DISC_BLOB: &str = "disc.params";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestBody {
    version: u32,
    config: ConfigSnapshot,
    epoch: usize,
    loss_history: Vec<EpochLoss>,
    /// Manifest hash of the checkpoint this run started from, if any.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    init_hash: Option<String>,
    seg_params_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    disc_params_sha256: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    #[serde(flatten)]
    body: ManifestBody,
    manifest_hash: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ConfigSnapshot,
    pub epoch: usize,
    pub loss_history: Vec<EpochLoss>,
    pub init_hash: Option<String>,
    pub seg_params: BTreeMap<String, ArrayD<f32>>,
    pub disc_params: Option<BTreeMap<String, ArrayD<f32>>>,
    pub manifest_hash: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(
        config: ConfigSnapshot,
        epoch: usize,
        loss_history: Vec<EpochLoss>,
        init_hash: Option<String>,
        seg_params: BTreeMap<String, ArrayD<f32>>,
        disc_params: Option<BTreeMap<String, ArrayD<f32>>>,
    ) -> Checkpoint {
        let mut ckpt = Checkpoint {
            config,
            epoch,
            loss_history,
            init_hash,
            seg_params,
            disc_params,
            manifest_hash: String::new(),
        };
        ckpt.manifest_hash = ckpt.compute_hash();
        ckpt
    }

    fn manifest_body(&self) -> ManifestBody {
        ManifestBody {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
            init_hash: self.init_hash.clone(),
            seg_params_sha256: sha256_hex(&store::map_to_bytes(&self.seg_params)),
            disc_params_sha256: self
                .disc_params
                .as_ref()
                .map(|m| sha256_hex(&store::map_to_bytes(m))),
        }
    }

    fn compute_hash(&self) -> String {
        let body = self.manifest_body();
        sha256_hex(serde_json::to_string(&body).expect("manifest serializes").as_bytes())
    }

    /// Writes `manifest.json` + parameter blobs into `dir`, staging in a
    /// temp directory and renaming so no partial checkpoint is observable.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        let body = self.manifest_body();
        let manifest = ManifestFile {
            manifest_hash: sha256_hex(serde_json::to_string(&body)?.as_bytes()),
            body,
        };
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty());
        let name = dir
            .file_name()
            .ok_or_else(|| TrainError::InvalidConfig("checkpoint path has no name".into()))?;
        let tmp = parent
            .unwrap_or(Path::new("."))
            .join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        std::fs::write(tmp.join(SEG_BLOB), store::map_to_bytes(&self.seg_params))?;
        if let Some(disc) = &self.disc_params {
            std::fs::write(tmp.join(DISC_BLOB), store::map_to_bytes(disc))?;
        }
        std::fs::write(tmp.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        if dir.exists() {
            std::fs::remove_dir_all(dir)?;
        }
        std::fs::rename(&tmp, dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint, TrainError> {
        let manifest: ManifestFile =
            serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST))?)?;
        if manifest.body.version != CHECKPOINT_VERSION {
            return Err(TrainError::CorruptCheckpoint(format!(
                "unsupported checkpoint version {}",
                manifest.body.version
            )));
        }
        let seg_bytes = std::fs::read(dir.join(SEG_BLOB))?;
        if sha256_hex(&seg_bytes) != manifest.body.seg_params_sha256 {
            return Err(TrainError::CorruptCheckpoint(
                "seg.params does not match its manifest hash".into(),
            ));
        }
        let seg_params = store::parse_bytes(&seg_bytes)?;
        let disc_params = match &manifest.body.disc_params_sha256 {
            None => None,
            Some(expected) => {
                let bytes = std::fs::read(dir.join(DISC_BLOB))?;
                if &sha256_hex(&bytes) != expected {
                    return Err(TrainError::CorruptCheckpoint(
                        "disc.params does not match its manifest hash".into(),
                    ));
                }
                Some(store::parse_bytes(&bytes)?)
            }
        };
        let ckpt = Checkpoint::new(
            manifest.body.config,
            manifest.body.epoch,
            manifest.body.loss_history,
            manifest.body.init_hash,
            seg_params,
            disc_params,
        );
        if ckpt.manifest_hash != manifest.manifest_hash {
            return Err(TrainError::CorruptCheckpoint(
                "manifest hash does not match its content".into(),
            ));
        }
        Ok(ckpt)
    }
}

/// Rebuilds the networks recorded in a checkpoint with their stored weights.
pub fn build_models(
    ckpt: &Checkpoint,
) -> Result<(SegNet<f32>, Option<Discriminator<f32>>), TrainError> {
    let mut rng = seeded_rng(ckpt.config.training.seed, "seg-init");
    let mut seg = SegNet::<f32>::new(&ckpt.config.model, &mut rng);
    store::load_into(&mut seg, &ckpt.seg_params)?;
    let disc = match &ckpt.disc_params {
        None => None,
        Some(params) => {
            let mut rng = seeded_rng(ckpt.config.training.seed, "disc-init");
            let mut d = Discriminator::<f32>::new(
                ckpt.config.model.fused_channels + 1,
                ckpt.config.discriminator.clone(),
                &mut rng,
            );
            store::load_into(&mut d, params)?;
            Some(d)
        }
    };
    Ok((seg, disc))
}

/// Batched evaluation-mode inference to binary masks.
pub fn predict_masks(
    seg: &mut SegNet<f32>,
    images: &[Array2<f32>],
    threshold: f32,
    batch_size: usize,
) -> Result<Vec<BinaryMask>, TrainError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let x = stack_images(chunk.iter());
        let res = seg.forward(&x, Mode::Eval)?;
        for n in 0..chunk.len() {
            let logits = res.logits.index_axis(Axis(0), n);
            let (_, h, w) = logits.dim();
            let mask = Array2::from_shape_fn((h, w), |(i, j)| {
                (crate::nn::act::sigmoid(logits[(0, i, j)]) >= threshold) as u8
            });
            out.push(mask);
        }
    }
    Ok(out)
}

fn stack_images<'a>(images: impl Iterator<Item = &'a Array2<f32>>) -> Array4<f32> {
    let items: Vec<&Array2<f32>> = images.collect();
    let (h, w) = items[0].dim();
    let mut x = Array4::<f32>::zeros((items.len(), 1, h, w));
    for (n, img) in items.iter().enumerate() {
        x.index_axis_mut(Axis(0), n)
            .index_axis_mut(Axis(0), 0)
            .assign(img);
    }
    x
}

/// Shuffled index batches for one epoch; the final batch may be short.
fn epoch_batches(
    rng: &mut rand_chacha::ChaCha8Rng,
    n: usize,
    batch_size: usize,
) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Mean BCE+dice over a batch, with the matching logit gradient.
fn batch_bce_dice(
    logits: &Array4<f32>,
    masks: &[&BinaryMask],
    smoothing: f32,
) -> Result<(f64, Array4<f32>), TrainError> {
    let n = masks.len();
    let mut g = Array4::<f32>::zeros(logits.raw_dim());
    let mut total = 0.0;
    for i in 0..n {
        let sample = logits.index_axis(Axis(0), i).to_owned();
        let (loss, grad) = bce_dice_loss_grad(&sample, masks[i], smoothing)?;
        total += loss as f64;
        let scale = 1.0 / n as f32;
        g.index_axis_mut(Axis(0), i).assign(&grad.mapv(|v| v * scale));
    }
    Ok((total / n as f64, g))
}

/// Mean adversarial loss over a batch of confidence maps.
fn batch_adversarial(conf: &Array4<f32>) -> (f64, Array4<f32>) {
    let n = conf.dim().0;
    let mut g = Array4::<f32>::zeros(conf.raw_dim());
    let mut total = 0.0;
    for i in 0..n {
        let sample = Discriminator::conf_slice(conf, i);
        let (loss, grad) = adversarial_loss_grad(&sample);
        total += loss as f64;
        let scale = 1.0 / n as f32;
        g.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&grad.mapv(|v| v * scale));
    }
    (total / n as f64, g)
}

/// Stacks per-sample discriminator inputs (soft or hard masks against the
/// same encoder features) into one batch.
fn disc_input_batch(
    masks: &[Array2<f32>],
    encoder: &Array4<f32>,
    mask_weight: f32,
) -> Result<Array4<f32>, TrainError> {
    let n = masks.len();
    let mut per_sample: Vec<Array3<f32>> = Vec::with_capacity(n);
    for (i, mask) in masks.iter().enumerate() {
        let feats = encoder.index_axis(Axis(0), i).to_owned();
        per_sample.push(build_discriminator_input(mask, &feats, mask_weight)?);
    }
    let (c, h, w) = per_sample[0].dim();
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    for (i, s) in per_sample.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&s);
    }
    Ok(out)
}

fn mask_to_f32(mask: &BinaryMask) -> Array2<f32> {
    mask.mapv(|v| v as f32)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn train_supervised(
    config: &TrainingConfig,
    segnet_config: &SegNetConfig,
    disc_config: &DiscriminatorConfig,
    labeled: &[LabeledSlice],
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    segnet_config
        .validate()
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    if labeled.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let mut init_rng = seeded_rng(config.seed, "seg-init");
    let mut seg = SegNet::<f32>::new(segnet_config, &mut init_rng);
    let mut batch_rng = seeded_rng(config.seed, "labeled-batches");
    let n_batches = labeled.len().div_ceil(config.batch_size);
    let max_iter = config.epochs * n_batches;
    let opt = SgdMomentum::new(config.momentum);
    let smoothing = config.dice_smoothing as f32;

    let mut history = Vec::with_capacity(config.epochs);
    let mut iter = 0usize;
    for epoch in 0..config.epochs {
        let mut losses = Vec::with_capacity(n_batches);
        for batch in epoch_batches(&mut batch_rng, labeled.len(), config.batch_size) {
            let x = stack_images(batch.iter().map(|&i| &labeled[i].image));
            let masks: Vec<&BinaryMask> = batch.iter().map(|&i| &labeled[i].mask).collect();
            let out = seg.forward(&x, Mode::Train)?;
            let (loss, g) = batch_bce_dice(&out.logits, &masks, smoothing)?;
            seg.zero_grads();
            seg.backward(&g, None);
            opt.step(
                &mut seg,
                poly_lr(config.seg_lr, iter, max_iter, config.lr_decay_power),
            );
            iter += 1;
            losses.push(loss);
        }
        let record = EpochLoss {
            epoch,
            seg: mean(&losses),
            adv: None,
            semi: None,
            disc: None,
        };
        on_epoch(&record);
        history.push(record);
    }

    let snapshot = ConfigSnapshot {
        training: config.clone(),
        model: segnet_config.clone(),
        discriminator: disc_config.clone(),
    };
    Ok(Checkpoint::new(
        snapshot,
        config.epochs,
        history,
        None,
        store::to_map(&mut seg),
        None,
    ))
}

/// One segmentation step on an unlabeled batch: self-training against
/// pseudo-labels where the discriminator is confident, plus an adversarial
/// term. Returns `(semi_loss, adv_loss)`; `None` when both weights are 0.
#[allow(clippy::too_many_arguments)]
fn unlabeled_seg_step(
    seg: &mut SegNet<f32>,
    disc: &mut Discriminator<f32>,
    images: &[&Array2<f32>],
    config: &TrainingConfig,
    mask_weight: f32,
    opt: &SgdMomentum,
    lr: f64,
) -> Result<Option<(f64, f64)>, TrainError> {
    let l_semi = config.lambda_semi as f32;
    let l_adv = config.lambda_adv_unlabeled as f32;
    if l_semi == 0.0 && l_adv == 0.0 {
        return Ok(None);
    }
    let x = stack_images(images.iter().copied());
    let out = seg.forward(&x, Mode::Train)?;
    let n = images.len();
    let probs = sigmoid_map(&out.logits);
    let soft_masks: Vec<Array2<f32>> = (0..n)
        .map(|i| {
            probs
                .index_axis(Axis(0), i)
                .index_axis(Axis(0), 0)
                .to_owned()
        })
        .collect();
    let d_in = disc_input_batch(&soft_masks, &out.encoder_features, mask_weight)?;
    let conf = disc.forward(&d_in)?;

    let mut g_logits = Array4::<f32>::zeros(out.logits.raw_dim());
    let mut g_encoder: Option<Array4<f32>> = None;
    let mut semi_total = 0.0;
    let mut adv_total = 0.0;

    if l_semi > 0.0 {
        for i in 0..n {
            let conf_i = Discriminator::conf_slice(&conf, i);
            let logits_i = out.logits.index_axis(Axis(0), i).to_owned();
            let (loss, grad) =
                semi_supervised_loss_grad(&conf_i, &logits_i, config.t_semi as f32)?;
            semi_total += loss as f64;
            let scale = l_semi / n as f32;
            g_logits
                .index_axis_mut(Axis(0), i)
                .zip_mut_with(&grad, |a, &b| *a += scale * b);
        }
        semi_total /= n as f64;
    }

    if l_adv > 0.0 {
        let (loss, mut g_conf) = batch_adversarial(&conf);
        adv_total = loss;
        g_conf.mapv_inplace(|v| v * l_adv);
        let g_in = disc.backward(&g_conf);
        let (fh, fw) = {
            let (_, _, fh, fw) = out.encoder_features.dim();
            (fh, fw)
        };
        let (g_mask, g_feat) = split_input_gradient(&g_in, mask_weight, (fh, fw));
        // The soft mask is sigmoid(logits); chain through its derivative.
        ndarray::Zip::from(&mut g_logits)
            .and(&g_mask)
            .and(&probs)
            .for_each(|g, &gm, &p| *g += gm * p * (1.0 - p));
        g_encoder = Some(g_feat);
    }

    seg.zero_grads();
    seg.backward(&g_logits, g_encoder.as_ref());
    opt.step(seg, lr);
    Ok(Some((semi_total, adv_total)))
}

pub fn train_semi(
    config: &TrainingConfig,
    labeled: &[LabeledSlice],
    unlabeled: &[UnlabeledSlice],
    init: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    let init = init.ok_or(TrainError::MissingPretrain("train_semi"))?;
    if labeled.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let model_cfg = init.config.model.clone();
    let disc_cfg = init.config.discriminator.clone();
    let mask_weight = disc_cfg.mask_weight as f32;

    let (mut seg, disc) = build_models(init)?;
    let mut disc = match disc {
        Some(d) => d,
        None => {
            let mut rng = seeded_rng(config.seed, "disc-init");
            Discriminator::<f32>::new(model_cfg.fused_channels + 1, disc_cfg.clone(), &mut rng)
        }
    };

    let mut lab_rng = seeded_rng(config.seed, "labeled-batches");
    let mut unlab_rng = seeded_rng(config.seed, "unlabeled-batches");
    let n_lab_batches = labeled.len().div_ceil(config.batch_size);
    let u_steps_per_epoch = if unlabeled.is_empty() { 0 } else { n_lab_batches };
    let seg_max_iter = config.epochs * (n_lab_batches + u_steps_per_epoch);
    let disc_max_iter = config.epochs * n_lab_batches;

    let seg_opt = SgdMomentum::new(config.momentum);
    let mut disc_opt = Adam::new(0.9, 0.99);
    let smoothing = config.dice_smoothing as f32;
    let l_adv_lab = config.lambda_adv_labeled as f32;

    let mut history = Vec::with_capacity(config.epochs);
    let mut seg_iter = 0usize;
    let mut disc_iter = 0usize;

    for epoch in 0..config.epochs {
        let lab_batches = epoch_batches(&mut lab_rng, labeled.len(), config.batch_size);
        let unlab_batches = if unlabeled.is_empty() {
            Vec::new()
        } else {
            epoch_batches(&mut unlab_rng, unlabeled.len(), config.batch_size)
        };

        let mut seg_losses = Vec::new();
        let mut adv_losses = Vec::new();
        let mut semi_losses = Vec::new();
        let mut disc_losses = Vec::new();

        for (b, batch) in lab_batches.iter().enumerate() {
            // (a) Labeled segmentation step: BCE+dice plus adversarial term.
            let x = stack_images(batch.iter().map(|&i| &labeled[i].image));
            let masks: Vec<&BinaryMask> = batch.iter().map(|&i| &labeled[i].mask).collect();
            let out = seg.forward(&x, Mode::Train)?;
            let (bd_loss, mut g_logits) = batch_bce_dice(&out.logits, &masks, smoothing)?;
            let probs = sigmoid_map(&out.logits);
            let soft_masks: Vec<Array2<f32>> = (0..batch.len())
                .map(|i| {
                    probs
                        .index_axis(Axis(0), i)
                        .index_axis(Axis(0), 0)
                        .to_owned()
                })
                .collect();
            let mut g_encoder: Option<Array4<f32>> = None;
            let mut seg_objective = bd_loss;
            if l_adv_lab > 0.0 {
                let d_in = disc_input_batch(&soft_masks, &out.encoder_features, mask_weight)?;
                let conf = disc.forward(&d_in)?;
                let (adv_loss, mut g_conf) = batch_adversarial(&conf);
                adv_losses.push(adv_loss);
                seg_objective += config.lambda_adv_labeled * adv_loss;
                g_conf.mapv_inplace(|v| v * l_adv_lab);
                let g_in = disc.backward(&g_conf);
                let (_, _, fh, fw) = out.encoder_features.dim();
                let (g_mask, g_feat) = split_input_gradient(&g_in, mask_weight, (fh, fw));
                ndarray::Zip::from(&mut g_logits)
                    .and(&g_mask)
                    .and(&probs)
                    .for_each(|g, &gm, &p| *g += gm * p * (1.0 - p));
                g_encoder = Some(g_feat);
            }
            seg.zero_grads();
            seg.backward(&g_logits, g_encoder.as_ref());
            seg_opt.step(
                &mut seg,
                poly_lr(config.seg_lr, seg_iter, seg_max_iter, config.lr_decay_power),
            );
            seg_iter += 1;
            seg_losses.push(seg_objective);
            let encoder = out.encoder_features;

            // (b) Unlabeled segmentation step.
            if !unlab_batches.is_empty() {
                let u_batch = &unlab_batches[b % unlab_batches.len()];
                let images: Vec<&Array2<f32>> = u_batch.iter().map(|&i| &unlabeled[i]).collect();
                let lr = poly_lr(config.seg_lr, seg_iter, seg_max_iter, config.lr_decay_power);
                if let Some((semi_l, adv_l)) = unlabeled_seg_step(
                    &mut seg,
                    &mut disc,
                    &images,
                    config,
                    mask_weight,
                    &seg_opt,
                    lr,
                )? {
                    semi_losses.push(semi_l);
                    adv_losses.push(adv_l);
                    seg_iter += 1;
                }
            }

            // (c) Discriminator step on the labeled batch, real and fake
            // stacked into one forward pass.
            let gt_masks: Vec<Array2<f32>> = masks.iter().map(|m| mask_to_f32(m)).collect();
            let in_pred = disc_input_batch(&soft_masks, &encoder, mask_weight)?;
            let in_gt = disc_input_batch(&gt_masks, &encoder, mask_weight)?;
            let stacked = concatenate(Axis(0), &[in_pred.view(), in_gt.view()]).unwrap();
            let conf = disc.forward(&stacked)?;
            let n = batch.len();
            let mut g_conf = Array4::<f32>::zeros(conf.raw_dim());
            let mut d_loss = 0.0;
            for i in 0..n {
                let c_pred = Discriminator::conf_slice(&conf, i);
                let c_gt = Discriminator::conf_slice(&conf, n + i);
                let (loss, g_pred, g_gt) = discriminator_loss_grad(&c_pred, &c_gt)?;
                d_loss += loss as f64;
                let scale = 1.0 / n as f32;
                g_conf
                    .index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), 0)
                    .assign(&g_pred.mapv(|v| v * scale));
                g_conf
                    .index_axis_mut(Axis(0), n + i)
                    .index_axis_mut(Axis(0), 0)
                    .assign(&g_gt.mapv(|v| v * scale));
            }
            disc_losses.push(d_loss / n as f64);
            disc.zero_grads();
            disc.backward(&g_conf);
            disc_opt.step(
                &mut disc,
                poly_lr(config.disc_lr, disc_iter, disc_max_iter, config.lr_decay_power),
            );
            disc_iter += 1;
        }

        let record = EpochLoss {
            epoch,
            seg: mean(&seg_losses),
            adv: (!adv_losses.is_empty()).then(|| mean(&adv_losses)),
            semi: (!semi_losses.is_empty()).then(|| mean(&semi_losses)),
            disc: (!disc_losses.is_empty()).then(|| mean(&disc_losses)),
        };
        on_epoch(&record);
        history.push(record);
    }

    let snapshot = ConfigSnapshot {
        training: config.clone(),
        model: model_cfg,
        discriminator: disc_cfg,
    };
    Ok(Checkpoint::new(
        snapshot,
        config.epochs,
        history,
        Some(init.manifest_hash.clone()),
        store::to_map(&mut seg),
        Some(store::to_map(&mut disc)),
    ))
}

/// Adapts a pretrained model with a handful of unlabeled volumes: the
/// unlabeled loop of `train_semi` with the discriminator frozen.
pub fn fine_tune(
    config: &TrainingConfig,
    unlabeled_small: &[UnlabeledSlice],
    init: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    let init = init.ok_or(TrainError::MissingPretrain("fine_tune"))?;
    if init.disc_params.is_none() {
        return Err(TrainError::MissingPretrain(
            "fine_tune (no discriminator in checkpoint)",
        ));
    }
    if unlabeled_small.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let (mut seg, disc) = build_models(init)?;
    let mut disc = disc.expect("checked above");
    let mask_weight = init.config.discriminator.mask_weight as f32;

    let mut batch_rng = seeded_rng(config.seed, "unlabeled-batches");
    let n_batches = unlabeled_small.len().div_ceil(config.batch_size);
    let max_iter = config.epochs * n_batches;
    let opt = SgdMomentum::new(config.momentum);

    let mut history = Vec::with_capacity(config.epochs);
    let mut iter = 0usize;
    for epoch in 0..config.epochs {
        let mut semi_losses = Vec::new();
        let mut adv_losses = Vec::new();
        for batch in epoch_batches(&mut batch_rng, unlabeled_small.len(), config.batch_size) {
            let images: Vec<&Array2<f32>> =
                batch.iter().map(|&i| &unlabeled_small[i]).collect();
            let lr = poly_lr(config.seg_lr, iter, max_iter, config.lr_decay_power);
            if let Some((semi_l, adv_l)) = unlabeled_seg_step(
                &mut seg,
                &mut disc,
                &images,
                config,
                mask_weight,
                &opt,
                lr,
            )? {
                semi_losses.push(semi_l);
                adv_losses.push(adv_l);
                iter += 1;
            }
        }
        let record = EpochLoss {
            epoch,
            seg: config.lambda_semi * mean(&semi_losses)
                + config.lambda_adv_unlabeled * mean(&adv_losses),
            adv: Some(mean(&adv_losses)),
            semi: Some(mean(&semi_losses)),
            disc: None,
        };
        on_epoch(&record);
        history.push(record);
    }

    let snapshot = ConfigSnapshot {
        training: config.clone(),
        model: init.config.model.clone(),
        discriminator: init.config.discriminator.clone(),
    };
    Ok(Checkpoint::new(
        snapshot,
        config.epochs,
        history,
        Some(init.manifest_hash.clone()),
        store::to_map(&mut seg),
        Some(store::to_map(&mut disc)),
    ))
}
