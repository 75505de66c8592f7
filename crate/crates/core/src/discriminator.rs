//! Fully-convolutional discriminator scoring each pixel's realism.
//!
//! Input is the encoder feature map bilinearly lifted to mask resolution,
//! concatenated with the weighted mask as one extra channel. A stack of
//! stride-2 convolutions with leaky rectification ends in a single-channel
//! sigmoid, bilinearly upsampled back to the input size: the confidence map.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::act::LeakyRelu;
use crate::nn::conv::Conv2d;
use crate::nn::resize::{bilinear_resize, bilinear_resize_backward};
use crate::nn::{HasParams, Param, Scalar};

/// Per-pixel realism scores in (0,1), same dims as the scored mask.
pub type ConfidenceMap<T> = Array2<T>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Output channels per conv layer; the last must be 1.
    pub channel_widths: Vec<usize>,
    pub kernel_size: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    /// Multiplier applied to the mask channel before concatenation.
    pub mask_weight: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channel_widths: vec![64, 128, 256, 512, 1],
            kernel_size: 4,
            stride: 2,
            leaky_slope: 0.2,
            mask_weight: 5.0,
        }
    }
}

impl DiscriminatorConfig {
    pub fn n_conv_layers(&self) -> usize {
        self.channel_widths.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.channel_widths.last() != Some(&1) {
            return Err("last channel width must be 1".into());
        }
        if self.channel_widths.is_empty() || self.stride < 1 || self.kernel_size < 1 {
            return Err("need at least one conv layer with positive kernel/stride".into());
        }
        if self.mask_weight <= 0.0 {
            return Err("mask_weight must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DiscError {
    #[error("feature dims {fh}x{fw} must be exactly half of mask dims {mh}x{mw}")]
    ShapeMismatch {
        fh: usize,
        fw: usize,
        mh: usize,
        mw: usize,
    },
    #[error("input {h}x{w} too small for layer {layer} (kernel {k})")]
    ShapeTooSmall {
        h: usize,
        w: usize,
        layer: usize,
        k: usize,
    },
}

/// Lifts encoder features to mask resolution and appends the weighted mask
/// as the final channel.
pub fn build_discriminator_input<T: Scalar>(
    mask: &Array2<T>,
    encoder_features: &Array3<T>,
    mask_weight: T,
) -> Result<Array3<T>, DiscError> {
    let (mh, mw) = mask.dim();
    let (c, fh, fw) = encoder_features.dim();
    if fh * 2 != mh || fw * 2 != mw {
        return Err(DiscError::ShapeMismatch { fh, fw, mh, mw });
    }
    let feats4 = encoder_features
        .view()
        .insert_axis(Axis(0))
        .to_owned();
    let up = bilinear_resize(&feats4, mh, mw);
    let mut out = Array3::<T>::zeros((c + 1, mh, mw));
    out.slice_mut(s![..c, .., ..])
        .assign(&up.index_axis(Axis(0), 0));
    out.slice_mut(s![c, .., ..])
        .assign(&mask.mapv(|v| v * mask_weight));
    Ok(out)
}

/// Splits an input-space gradient back into the mask gradient and the
/// encoder-feature gradient (undoing the weighting and the bilinear lift).
pub fn split_input_gradient<T: Scalar>(
    g_input: &Array4<T>,
    mask_weight: T,
    feat_hw: (usize, usize),
) -> (Array4<T>, Array4<T>) {
    let (n, c1, h, w) = g_input.dim();
    let c = c1 - 1;
    let g_mask = g_input
        .slice(s![.., c..c1, .., ..])
        .mapv(|v| v * mask_weight);
    let g_up = g_input.slice(s![.., ..c, .., ..]).to_owned();
    let g_feat = bilinear_resize_backward(&g_up, feat_hw.0, feat_hw.1);
    debug_assert_eq!(g_mask.dim(), (n, 1, h, w));
    (g_mask, g_feat)
}

pub struct Discriminator<T> {
    pub cfg: DiscriminatorConfig,
    pub in_channels: usize,
    convs: Vec<Conv2d<T>>,
    acts: Vec<LeakyRelu<T>>,
    cache: Option<DiscCache<T>>,
}

struct DiscCache<T> {
    /// Sigmoid output before the final upsample.
    prob: Array4<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(in_channels: usize, cfg: DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate().expect("invalid discriminator config");
        let mut convs = Vec::with_capacity(cfg.channel_widths.len());
        let mut c_in = in_channels;
        for (i, &c_out) in cfg.channel_widths.iter().enumerate() {
            convs.push(Conv2d::new(
                &format!("disc.conv{i}"),
                c_in,
                c_out,
                cfg.kernel_size,
                cfg.stride,
                (cfg.kernel_size - 1) / 2,
                true,
                rng,
            ));
            c_in = c_out;
        }
        let acts = (0..cfg.channel_widths.len().saturating_sub(1))
            .map(|_| LeakyRelu::new(T::fl(cfg.leaky_slope)))
            .collect();
        Discriminator {
            cfg,
            in_channels,
            convs,
            acts,
            cache: None,
        }
    }

    /// Scores a batch, returning per-pixel confidences `(N, 1, H, W)` at the
    /// input's spatial size.
    pub fn forward(&mut self, x: &Array4<T>) -> Result<Array4<T>, DiscError> {
        let (_, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "discriminator channel mismatch");
        let k = self.cfg.kernel_size;
        let pad = (k - 1) / 2;
        let mut y = x.clone();
        for (i, conv) in self.convs.iter_mut().enumerate() {
            let (_, _, yh, yw) = y.dim();
            if yh + 2 * pad < k || yw + 2 * pad < k {
                return Err(DiscError::ShapeTooSmall {
                    h: yh,
                    w: yw,
                    layer: i,
                    k,
                });
            }
            y = conv.forward(&y);
            if i < self.acts.len() {
                y = self.acts[i].forward(&y);
            }
        }
        let prob = y.mapv(crate::nn::act::sigmoid);
        let conf = bilinear_resize(&prob, h, w);
        self.cache = Some(DiscCache { prob });
        Ok(conf)
    }

    /// Backpropagates a confidence-map gradient to the input grid.
    pub fn backward(&mut self, g_conf: &Array4<T>) -> Array4<T> {
        let cache = self.cache.take().expect("discriminator backward before forward");
        let (_, _, ph, pw) = cache.prob.dim();
        let g_prob = bilinear_resize_backward(g_conf, ph, pw);
        // Sigmoid backward on the cached probabilities.
        let mut g = &g_prob * &cache.prob.mapv(|p| p * (T::one() - p));
        for i in (0..self.convs.len()).rev() {
            if i + 1 < self.convs.len() {
                g = self.acts[i].backward(&g);
            }
            g = self.convs[i].backward(&g);
        }
        g
    }

    /// Confidence map of the first sample as a 2D grid.
    pub fn conf_slice(conf: &Array4<T>, n: usize) -> ConfidenceMap<T> {
        conf.index_axis(Axis(0), n)
            .index_axis(Axis(0), 0)
            .to_owned()
    }
}

impl<T: Scalar> HasParams<T> for Discriminator<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for c in self.convs.iter_mut() {
            c.visit_params(f);
        }
    }
}
