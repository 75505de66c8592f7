//! Half-resolution multi-branch segmentation backbone.
//!
//! A single stride-2 stem keeps the finest branch at 1/2 resolution; two
//! further stride-2 transitions add branches at 1/4 and 1/8 (three
//! downsamplings total, no deeper stage). Stage modules run residual blocks
//! per branch and exchange information through all-pairs fusion. The decoder
//! lifts every branch back to 1/2 resolution with content-aware upsampling,
//! fuses them into the encoder feature map handed to the discriminator, then
//! upsamples once more to full resolution for the one-channel lesion logits.

use ndarray::{concatenate, s, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::carafe::{Carafe, CarafeConfig};
use crate::data::BinaryMask;
use crate::nn::act::{sigmoid, Relu};
use crate::nn::conv::Conv2d;
use crate::nn::norm::BatchNorm2d;
use crate::nn::resize::{nearest_upsample, nearest_upsample_backward};
use crate::nn::{seeded_rng, HasParams, Mode, Param, Scalar};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    /// Square input side, divisible by 8.
    pub input_size: usize,
    pub stem_channels: usize,
    /// Channel widths of the branches at 1/2, 1/4, 1/8 resolution.
    pub branch_widths: (usize, usize, usize),
    pub blocks_per_module: usize,
    pub modules_per_stage: (usize, usize, usize),
    /// Decoder fusion width; also the encoder-feature channel count.
    pub fused_channels: usize,
    pub carafe: CarafeConfig,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            input_size: 400,
            stem_channels: 64,
            branch_widths: (18, 36, 72),
            blocks_per_module: 4,
            modules_per_stage: (1, 1, 4),
            fused_channels: 64,
            carafe: CarafeConfig::default(),
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_size < 8 || self.input_size % 8 != 0 {
            return Err(ModelError::InvalidShape {
                height: self.input_size,
                width: self.input_size,
                reason: "input_size must be a multiple of 8 and at least 8",
            });
        }
        let (w1, w2, w3) = self.branch_widths;
        let (m1, m2, m3) = self.modules_per_stage;
        if w1 == 0 || w2 == 0 || w3 == 0 || m1 == 0 || m2 == 0 || m3 == 0 {
            return Err(ModelError::InvalidShape {
                height: 0,
                width: 0,
                reason: "branch widths and module counts must be positive",
            });
        }
        if self.blocks_per_module == 0 || self.fused_channels == 0 || self.stem_channels == 0 {
            return Err(ModelError::InvalidShape {
                height: 0,
                width: 0,
                reason: "channel and block counts must be positive",
            });
        }
        self.carafe
            .validate()
            .map_err(|_| ModelError::InvalidShape {
                height: 0,
                width: 0,
                reason: "invalid upsampler config",
            })?;
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid input shape {height}x{width}: {reason}")]
    InvalidShape {
        height: usize,
        width: usize,
        reason: &'static str,
    },
}

/// Network outputs for a batch: pre-sigmoid lesion logits at input
/// resolution and the fused encoder features at half resolution.
pub struct SegNetOutput<T> {
    pub logits: Array4<T>,
    pub encoder_features: Array4<T>,
}

/// conv + batchnorm + relu in sequence; pad keeps spatial size at stride 1.
struct ConvBnRelu<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(&format!("{name}.conv"), c_in, c_out, k, stride, (k - 1) / 2, false, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), c_out),
            relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let y = self.conv.forward(x);
        let y = self.bn.forward(&y, mode);
        self.relu.forward(&y)
    }

    fn backward(&mut self, gy: &Array4<T>) -> Array4<T> {
        let g = self.relu.backward(gy);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }
}

/// Two-convolution residual block with identity skip (constant width).
struct BasicBlock<T> {
    c1: Conv2d<T>,
    b1: BatchNorm2d<T>,
    r1: Relu<T>,
    c2: Conv2d<T>,
    b2: BatchNorm2d<T>,
    r2: Relu<T>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        BasicBlock {
            c1: Conv2d::new(&format!("{name}.c1"), channels, channels, 3, 1, 1, false, rng),
            b1: BatchNorm2d::new(&format!("{name}.b1"), channels),
            r1: Relu::new(),
            c2: Conv2d::new(&format!("{name}.c2"), channels, channels, 3, 1, 1, false, rng),
            b2: BatchNorm2d::new(&format!("{name}.b2"), channels),
            r2: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let h = self.c1.forward(x);
        let h = self.b1.forward(&h, mode);
        let h = self.r1.forward(&h);
        let z = self.c2.forward(&h);
        let z = self.b2.forward(&z, mode);
        self.r2.forward(&(z + x))
    }

    fn backward(&mut self, gy: &Array4<T>) -> Array4<T> {
        let g = self.r2.backward(gy);
        let gh = self.b2.backward(&g);
        let gh = self.c2.backward(&gh);
        let gh = self.r1.backward(&gh);
        let gh = self.b1.backward(&gh);
        self.c1.backward(&gh) + g
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.c1.visit_params(f);
        self.b1.visit_params(f);
        self.c2.visit_params(f);
        self.b2.visit_params(f);
    }
}

struct DownStep<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Option<Relu<T>>,
}

/// One source-to-target route inside a fusion unit.
enum FusePath<T> {
    Identity,
    /// 1x1 conv + bn, then nearest upsample by `factor`.
    Up {
        conv: Conv2d<T>,
        bn: BatchNorm2d<T>,
        factor: usize,
    },
    /// Chain of stride-2 3x3 convs; relu between steps, none after the last.
    Down { steps: Vec<DownStep<T>> },
}

impl<T: Scalar> FusePath<T> {
    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        match self {
            FusePath::Identity => x.clone(),
            FusePath::Up { conv, bn, factor } => {
                let y = conv.forward(x);
                let y = bn.forward(&y, mode);
                nearest_upsample(&y, *factor)
            }
            FusePath::Down { steps } => {
                let mut y = x.clone();
                for s in steps.iter_mut() {
                    y = s.conv.forward(&y);
                    y = s.bn.forward(&y, mode);
                    if let Some(r) = &mut s.relu {
                        y = r.forward(&y);
                    }
                }
                y
            }
        }
    }

    fn backward(&mut self, gy: &Array4<T>) -> Array4<T> {
        match self {
            FusePath::Identity => gy.clone(),
            FusePath::Up { conv, bn, factor } => {
                let g = nearest_upsample_backward(gy, *factor);
                let g = bn.backward(&g);
                conv.backward(&g)
            }
            FusePath::Down { steps } => {
                let mut g = gy.clone();
                for s in steps.iter_mut().rev() {
                    if let Some(r) = &mut s.relu {
                        g = r.backward(&g);
                    }
                    g = s.bn.backward(&g);
                    g = s.conv.backward(&g);
                }
                g
            }
        }
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            FusePath::Identity => {}
            FusePath::Up { conv, bn, .. } => {
                conv.visit_params(f);
                bn.visit_params(f);
            }
            FusePath::Down { steps } => {
                for s in steps.iter_mut() {
                    s.conv.visit_params(f);
                    s.bn.visit_params(f);
                }
            }
        }
    }
}

/// All-pairs exchange: target i receives every branch j resampled to its
/// resolution, summed, then rectified.
struct Fusion<T> {
    paths: Vec<Vec<FusePath<T>>>,
    relus: Vec<Relu<T>>,
}

impl<T: Scalar> Fusion<T> {
    fn new(name: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let n = widths.len();
        let mut paths = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::with_capacity(n);
            for j in 0..n {
                let path = if j == i {
                    FusePath::Identity
                } else if j > i {
                    FusePath::Up {
                        conv: Conv2d::new(
                            &format!("{name}.up{j}to{i}"),
                            widths[j],
                            widths[i],
                            1,
                            1,
                            0,
                            false,
                            rng,
                        ),
                        bn: BatchNorm2d::new(&format!("{name}.up{j}to{i}.bn"), widths[i]),
                        factor: 1 << (j - i),
                    }
                } else {
                    let hops = i - j;
                    let steps = (0..hops)
                        .map(|k| {
                            let c_out = if k + 1 == hops { widths[i] } else { widths[j] };
                            DownStep {
                                conv: Conv2d::new(
                                    &format!("{name}.down{j}to{i}.s{k}"),
                                    widths[j],
                                    c_out,
                                    3,
                                    2,
                                    1,
                                    false,
                                    rng,
                                ),
                                bn: BatchNorm2d::new(
                                    &format!("{name}.down{j}to{i}.s{k}.bn"),
                                    c_out,
                                ),
                                relu: (k + 1 < hops).then(Relu::new),
                            }
                        })
                        .collect();
                    FusePath::Down { steps }
                };
                row.push(path);
            }
            paths.push(row);
        }
        Fusion {
            paths,
            relus: (0..n).map(|_| Relu::new()).collect(),
        }
    }

    fn forward(&mut self, xs: &[Array4<T>], mode: Mode) -> Vec<Array4<T>> {
        let n = xs.len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc: Option<Array4<T>> = None;
            for j in 0..n {
                let y = self.paths[i][j].forward(&xs[j], mode);
                acc = Some(match acc {
                    None => y,
                    Some(a) => a + y,
                });
            }
            out.push(self.relus[i].forward(&acc.unwrap()));
        }
        out
    }

    fn backward(&mut self, gys: &[Array4<T>]) -> Vec<Array4<T>> {
        let n = gys.len();
        let mut gxs: Vec<Option<Array4<T>>> = (0..n).map(|_| None).collect();
        for i in 0..n {
            let g = self.relus[i].backward(&gys[i]);
            for j in 0..n {
                let gj = self.paths[i][j].backward(&g);
                gxs[j] = Some(match gxs[j].take() {
                    None => gj,
                    Some(a) => a + gj,
                });
            }
        }
        gxs.into_iter().map(Option::unwrap).collect()
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for row in self.paths.iter_mut() {
            for p in row.iter_mut() {
                p.visit(f);
            }
        }
    }
}

/// Residual blocks per branch followed by fusion (fusion only when the
/// stage has more than one branch).
struct StageModule<T> {
    branches: Vec<Vec<BasicBlock<T>>>,
    fusion: Option<Fusion<T>>,
}

impl<T: Scalar> StageModule<T> {
    fn new(name: &str, widths: &[usize], blocks: usize, rng: &mut ChaCha8Rng) -> Self {
        let branches = widths
            .iter()
            .enumerate()
            .map(|(b, &w)| {
                (0..blocks)
                    .map(|k| BasicBlock::new(&format!("{name}.br{b}.blk{k}"), w, rng))
                    .collect()
            })
            .collect();
        let fusion = (widths.len() > 1).then(|| Fusion::new(&format!("{name}.fuse"), widths, rng));
        StageModule { branches, fusion }
    }

    fn forward(&mut self, xs: Vec<Array4<T>>, mode: Mode) -> Vec<Array4<T>> {
        let mut ys = Vec::with_capacity(xs.len());
        for (blocks, x) in self.branches.iter_mut().zip(xs) {
            let mut y = x;
            for b in blocks.iter_mut() {
                y = b.forward(&y, mode);
            }
            ys.push(y);
        }
        match &mut self.fusion {
            Some(fu) => fu.forward(&ys, mode),
            None => ys,
        }
    }

    fn backward(&mut self, gys: Vec<Array4<T>>) -> Vec<Array4<T>> {
        let gys = match &mut self.fusion {
            Some(fu) => fu.backward(&gys),
            None => gys,
        };
        let mut gxs = Vec::with_capacity(gys.len());
        for (blocks, gy) in self.branches.iter_mut().zip(gys) {
            let mut g = gy;
            for b in blocks.iter_mut().rev() {
                g = b.backward(&g);
            }
            gxs.push(g);
        }
        gxs
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for blocks in self.branches.iter_mut() {
            for b in blocks.iter_mut() {
                b.visit(f);
            }
        }
        if let Some(fu) = &mut self.fusion {
            fu.visit(f);
        }
    }
}

pub struct SegNet<T> {
    widths: Vec<usize>,
    stem: ConvBnRelu<T>,
    entry: ConvBnRelu<T>,
    new_branches: Vec<ConvBnRelu<T>>,
    stages: Vec<Vec<StageModule<T>>>,
    dec_ups: Vec<Vec<Carafe<T>>>,
    fuse: ConvBnRelu<T>,
    up_final: Carafe<T>,
    head: Conv2d<T>,
    ledger: Vec<(String, usize, usize)>,
}

impl<T: Scalar> SegNet<T> {
    pub fn new(cfg: &SegNetConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate().expect("invalid backbone config");
        let (w1, w2, w3) = cfg.branch_widths;
        let (m1, m2, m3) = cfg.modules_per_stage;
        Self::build(
            &[w1, w2, w3],
            &[m1, m2, m3],
            cfg.stem_channels,
            cfg.blocks_per_module,
            cfg.fused_channels,
            cfg.carafe,
            rng,
        )
    }

    /// Branch-count-generic constructor; the public config fixes three
    /// branches, tests also build deeper variants for comparisons.
    fn build(
        widths: &[usize],
        modules: &[usize],
        stem_channels: usize,
        blocks: usize,
        fused_channels: usize,
        carafe: CarafeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(widths.len(), modules.len());
        assert!(!widths.is_empty());
        // Decoder hops double resolution each time, whatever the config's
        // sigma says; only the kernel sizes come from it.
        let dec_cfg = CarafeConfig { sigma: 2, ..carafe };

        let stem = ConvBnRelu::new("stem", 1, stem_channels, 3, 2, rng);
        let entry = ConvBnRelu::new("entry", stem_channels, widths[0], 3, 1, rng);
        let new_branches = (1..widths.len())
            .map(|i| ConvBnRelu::new(&format!("trans{i}"), widths[i - 1], widths[i], 3, 2, rng))
            .collect();
        let stages = (0..widths.len())
            .map(|s| {
                (0..modules[s])
                    .map(|m| {
                        StageModule::new(&format!("stage{s}.m{m}"), &widths[..=s], blocks, rng)
                    })
                    .collect()
            })
            .collect();
        let dec_ups = (0..widths.len())
            .map(|i| {
                (0..i)
                    .map(|k| Carafe::new(&format!("dec.br{i}.up{k}"), widths[i], dec_cfg, rng))
                    .collect()
            })
            .collect();
        let fuse = ConvBnRelu::new("dec.fuse", widths.iter().sum(), fused_channels, 1, 1, rng);
        let up_final = Carafe::new("dec.final", fused_channels, dec_cfg, rng);
        let head = Conv2d::new("head", fused_channels, 1, 1, 1, 0, true, rng);

        SegNet {
            widths: widths.to_vec(),
            stem,
            entry,
            new_branches,
            stages,
            dec_ups,
            fuse,
            up_final,
            head,
            ledger: Vec::new(),
        }
    }

    fn validate_input(&self, x: &Array4<T>) -> Result<(), ModelError> {
        let (n, c, h, w) = x.dim();
        if n == 0 || c != 1 {
            return Err(ModelError::InvalidShape {
                height: h,
                width: w,
                reason: "expected a non-empty batch of single-channel images",
            });
        }
        if h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
            return Err(ModelError::InvalidShape {
                height: h,
                width: w,
                reason: "spatial dims must be multiples of 8 and at least 8",
            });
        }
        Ok(())
    }

    /// The single stride-2 stem convolution block; halves both spatial dims.
    pub fn stem_forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>, ModelError> {
        self.validate_input(x)?;
        Ok(self.stem.forward(x, mode))
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<SegNetOutput<T>, ModelError> {
        self.validate_input(x)?;
        self.ledger.clear();
        let s = self.stem.forward(x, mode);
        self.record("stem", &s);
        let mut xs = vec![self.entry.forward(&s, mode)];
        self.record("entry", &xs[0]);

        for si in 0..self.stages.len() {
            if si > 0 {
                let nb = self.new_branches[si - 1].forward(xs.last().unwrap(), mode);
                self.record(&format!("trans{si}"), &nb);
                xs.push(nb);
            }
            for mi in 0..self.stages[si].len() {
                xs = self.stages[si][mi].forward(xs, mode);
                for (b, xb) in xs.iter().enumerate() {
                    self.record(&format!("stage{si}.m{mi}.br{b}"), xb);
                }
            }
        }

        let mut lifted = Vec::with_capacity(xs.len());
        for (i, x_b) in xs.into_iter().enumerate() {
            let mut u = x_b;
            for k in 0..self.dec_ups[i].len() {
                u = self.dec_ups[i][k].forward(&u);
                let (_, _, h, w) = u.dim();
                self.ledger.push((format!("dec.br{i}.up{k}"), h, w));
            }
            lifted.push(u);
        }
        let views: Vec<_> = lifted.iter().map(|a| a.view()).collect();
        // concatenate along axis 1 leaves that axis outermost in memory;
        // im2col needs standard layout, so normalize here.
        let mut cat = concatenate(Axis(1), &views).expect("branch concat");
        if !cat.is_standard_layout() {
            cat = cat.as_standard_layout().into_owned();
        }
        let enc = self.fuse.forward(&cat, mode);
        self.record("encoder_features", &enc);
        let up = self.up_final.forward(&enc);
        self.record("dec.final", &up);
        let logits = self.head.forward(&up);
        self.record("logits", &logits);
        Ok(SegNetOutput {
            logits,
            encoder_features: enc,
        })
    }

    /// Backpropagates from the logits gradient plus an optional gradient
    /// arriving directly at the encoder features (the adversarial path).
    /// Returns the input-image gradient.
    pub fn backward(&mut self, g_logits: &Array4<T>, g_encoder: Option<&Array4<T>>) -> Array4<T> {
        let g = self.head.backward(g_logits);
        let mut g_enc = self.up_final.backward(&g);
        if let Some(ge) = g_encoder {
            g_enc = g_enc + ge;
        }
        let g_cat = self.fuse.backward(&g_enc);

        let mut gxs = Vec::with_capacity(self.widths.len());
        let mut off = 0;
        for (i, &wd) in self.widths.iter().enumerate() {
            let mut g = g_cat.slice(s![.., off..off + wd, .., ..]).to_owned();
            off += wd;
            for c in self.dec_ups[i].iter_mut().rev() {
                g = c.backward(&g);
            }
            gxs.push(g);
        }

        for si in (0..self.stages.len()).rev() {
            for mi in (0..self.stages[si].len()).rev() {
                gxs = self.stages[si][mi].backward(gxs);
            }
            if si > 0 {
                let gnb = gxs.pop().unwrap();
                let gprev = self.new_branches[si - 1].backward(&gnb);
                *gxs.last_mut().unwrap() += &gprev;
            }
        }
        let g0 = gxs.pop().unwrap();
        let gs = self.entry.backward(&g0);
        self.stem.backward(&gs)
    }

    fn record(&mut self, name: &str, x: &Array4<T>) {
        let (_, _, h, w) = x.dim();
        self.ledger.push((name.to_string(), h, w));
    }

    /// Spatial dims of every intermediate map from the latest forward pass.
    pub fn shape_ledger(&self) -> &[(String, usize, usize)] {
        &self.ledger
    }

    /// Smallest side length seen anywhere in the latest forward pass.
    pub fn min_ledger_side(&self) -> Option<usize> {
        self.ledger.iter().map(|(_, h, w)| (*h).min(*w)).min()
    }
}

impl<T: Scalar> HasParams<T> for SegNet<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit(f);
        self.entry.visit(f);
        for t in self.new_branches.iter_mut() {
            t.visit(f);
        }
        for stage in self.stages.iter_mut() {
            for m in stage.iter_mut() {
                m.visit(f);
            }
        }
        for chain in self.dec_ups.iter_mut() {
            for c in chain.iter_mut() {
                c.visit_params(f);
            }
        }
        self.fuse.visit(f);
        self.up_final.visit_params(f);
        self.head.visit_params(f);
    }
}

/// Thresholds the first sample's sigmoid probabilities into a mask;
/// probability exactly at the threshold counts as lesion.
pub fn predict_mask<T: Scalar>(output: &SegNetOutput<T>, threshold: T) -> BinaryMask {
    debug_assert!(threshold > T::zero() && threshold < T::one());
    let logits = output.logits.index_axis(Axis(0), 0);
    let (_, h, w) = logits.dim();
    ndarray::Array2::from_shape_fn((h, w), |(i, j)| {
        (sigmoid(logits[(0, i, j)]) >= threshold) as u8
    })
}

/// Total trainable scalar count for a given config.
pub fn count_parameters(cfg: &SegNetConfig) -> usize {
    let mut rng = seeded_rng(0, "param-count");
    let mut net = SegNet::<f32>::new(cfg, &mut rng);
    net.n_trainable()
}
