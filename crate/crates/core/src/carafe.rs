//! Content-aware upsampling: a small kernel-prediction head emits a
//! softmax-normalized reassembly kernel per output pixel, and the output is
//! the corresponding convex combination of the source neighborhood.
//!
//! Border handling renormalizes the softmax over in-bounds taps, so every
//! output is a true convex combination of source values (constant inputs are
//! reproduced exactly, everywhere).

use ndarray::{Array3, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::conv::Conv2d;
use crate::nn::resize::{pixel_shuffle, pixel_shuffle_backward};
use crate::nn::{HasParams, Param, Scalar};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default, deny_unknown_fields)]
pub struct CarafeConfig {
    /// Integer upscale factor.
    pub sigma: usize,
    /// Reassembly kernel size (odd).
    pub k_up: usize,
    /// Kernel-encoder convolution size (odd).
    pub k_enc: usize,
    /// Compressed channel count for the kernel-prediction path.
    pub c_mid: usize,
}

impl Default for CarafeConfig {
    fn default() -> Self {
        CarafeConfig {
            sigma: 2,
            k_up: 5,
            k_enc: 3,
            c_mid: 64,
        }
    }
}

impl CarafeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.sigma < 2 {
            return Err(format!("sigma must be >= 2, got {}", self.sigma));
        }
        if self.k_up % 2 == 0 || self.k_up < 3 {
            return Err(format!("k_up must be odd and >= 3, got {}", self.k_up));
        }
        if self.k_enc % 2 == 0 || self.k_enc < 1 {
            return Err(format!("k_enc must be odd and >= 1, got {}", self.k_enc));
        }
        if self.c_mid < 1 {
            return Err("c_mid must be >= 1".into());
        }
        Ok(())
    }
}

struct CarafeCache<T> {
    x: Array4<T>,
    /// Normalized kernels, `(N, k_up^2, sigma*H, sigma*W)`; zero at
    /// out-of-bounds taps.
    kernels: Array4<T>,
}

/// The learnable upsampling operator.
pub struct Carafe<T> {
    pub cfg: CarafeConfig,
    pub channels: usize,
    compressor: Conv2d<T>,
    encoder: Conv2d<T>,
    cache: Option<CarafeCache<T>>,
}

impl<T: Scalar> Carafe<T> {
    pub fn new(name: &str, channels: usize, cfg: CarafeConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate().expect("invalid carafe config");
        let compressor = Conv2d::new(
            &format!("{name}.compressor"),
            channels,
            cfg.c_mid,
            1,
            1,
            0,
            true,
            rng,
        );
        let mut encoder = Conv2d::new(
            &format!("{name}.encoder"),
            cfg.c_mid,
            cfg.sigma * cfg.sigma * cfg.k_up * cfg.k_up,
            cfg.k_enc,
            1,
            (cfg.k_enc - 1) / 2,
            true,
            rng,
        );
        // Near-zero kernel logits make the initial operator an averaging
        // upsampler, which keeps early training stable.
        encoder.reinit_uniform(1e-3, rng);
        Carafe {
            cfg,
            channels,
            compressor,
            encoder,
            cache: None,
        }
    }

    /// Upsamples `(N, C, H, W)` to `(N, C, sigma*H, sigma*W)`.
    pub fn forward(&mut self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "carafe channel mismatch");
        assert!(h >= 1 && w >= 1, "carafe input too small");
        let sigma = self.cfg.sigma;
        let k = self.cfg.k_up;
        let q = k * k;
        let (ho, wo) = (h * sigma, w * sigma);

        let comp = self.compressor.forward(x);
        let raw = self.encoder.forward(&comp);
        let logits = pixel_shuffle(&raw, sigma); // (N, q, ho, wo)

        // Masked softmax over the k_up^2 tap axis, restricted to in-bounds
        // taps so border outputs stay convex combinations.
        let r = (k - 1) / 2;
        let mut kernels = Array4::<T>::zeros((n, q, ho, wo));
        {
            let zs = logits.as_slice().expect("contiguous logits");
            let ks = kernels.as_slice_mut().expect("contiguous kernels");
            let plane = ho * wo;
            for ni in 0..n {
                for oy in 0..ho {
                    let sy = oy / sigma;
                    for ox in 0..wo {
                        let sx = ox / sigma;
                        let base = ni * q * plane + oy * wo + ox;
                        let mut maxz = T::neg_infinity();
                        for_valid_taps(sy, sx, h, w, r, k, |qi, _, _| {
                            let z = zs[base + qi * plane];
                            if z > maxz {
                                maxz = z;
                            }
                        });
                        let mut sum = T::zero();
                        for_valid_taps(sy, sx, h, w, r, k, |qi, _, _| {
                            let e = (zs[base + qi * plane] - maxz).exp();
                            ks[base + qi * plane] = e;
                            sum += e;
                        });
                        for_valid_taps(sy, sx, h, w, r, k, |qi, _, _| {
                            ks[base + qi * plane] /= sum;
                        });
                    }
                }
            }
        }

        let y = reassemble(x, &kernels, sigma, k);
        self.cache = Some(CarafeCache {
            x: x.clone(),
            kernels,
        });
        y
    }

    pub fn backward(&mut self, gy: &Array4<T>) -> Array4<T> {
        let cache = self.cache.as_ref().expect("carafe backward before forward");
        let x = &cache.x;
        let kernels = &cache.kernels;
        let (n, c, h, w) = x.dim();
        let sigma = self.cfg.sigma;
        let k = self.cfg.k_up;
        let q = k * k;
        let (ho, wo) = (h * sigma, w * sigma);
        let r = (k - 1) / 2;
        let plane_in = h * w;
        let plane_out = ho * wo;

        // Reassembly backward: gradients w.r.t. kernels and features.
        let mut gk = Array4::<T>::zeros((n, q, ho, wo));
        let mut gx = Array4::<T>::zeros((n, c, h, w));
        {
            let xs = x.as_slice().unwrap();
            let ks = kernels.as_slice().unwrap();
            let gys = gy.as_slice().unwrap();
            let gks = gk.as_slice_mut().unwrap();
            let gxs = gx.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let xoff = (ni * c + ci) * plane_in;
                    let goff = (ni * c + ci) * plane_out;
                    for oy in 0..ho {
                        let sy = oy / sigma;
                        for ox in 0..wo {
                            let sx = ox / sigma;
                            let g = gys[goff + oy * wo + ox];
                            let kbase = ni * q * plane_out + oy * wo + ox;
                            for_valid_taps(sy, sx, h, w, r, k, |qi, yy, xx| {
                                let xi = xoff + yy * w + xx;
                                gks[kbase + qi * plane_out] += g * xs[xi];
                                gxs[xi] += g * ks[kbase + qi * plane_out];
                            });
                        }
                    }
                }
            }
        }

        // Softmax backward; out-of-bounds taps carry zero weight so the
        // unmasked formula already yields zero gradient there.
        let mut gz = Array4::<T>::zeros((n, q, ho, wo));
        {
            let ks = kernels.as_slice().unwrap();
            let gks = gk.as_slice().unwrap();
            let gzs = gz.as_slice_mut().unwrap();
            for ni in 0..n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let base = ni * q * plane_out + oy * wo + ox;
                        let mut dot = T::zero();
                        for qi in 0..q {
                            dot += ks[base + qi * plane_out] * gks[base + qi * plane_out];
                        }
                        for qi in 0..q {
                            let kv = ks[base + qi * plane_out];
                            gzs[base + qi * plane_out] = kv * (gks[base + qi * plane_out] - dot);
                        }
                    }
                }
            }
        }

        let graw = pixel_shuffle_backward(&gz, sigma);
        let gcomp = self.encoder.backward(&graw);
        let gx_kernel_path = self.compressor.backward(&gcomp);
        gx + gx_kernel_path
    }

    /// Normalized kernels from the most recent forward pass,
    /// `(N, k_up^2, sigma*H, sigma*W)`.
    pub fn last_kernels(&self) -> Option<&Array4<T>> {
        self.cache.as_ref().map(|c| &c.kernels)
    }
}

impl<T: Scalar> HasParams<T> for Carafe<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.compressor.visit_params(f);
        self.encoder.visit_params(f);
    }
}

#[inline]
fn for_valid_taps(
    sy: usize,
    sx: usize,
    h: usize,
    w: usize,
    r: usize,
    k: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let ri = r as isize;
    for dy in -ri..=ri {
        let yy = sy as isize + dy;
        if yy < 0 || yy >= h as isize {
            continue;
        }
        for dx in -ri..=ri {
            let xx = sx as isize + dx;
            if xx < 0 || xx >= w as isize {
                continue;
            }
            let qi = ((dy + ri) as usize) * k + (dx + ri) as usize;
            f(qi, yy as usize, xx as usize);
        }
    }
}

/// The reassembly step shared by the operator and used on explicit kernels.
fn reassemble<T: Scalar>(
    x: &Array4<T>,
    kernels: &Array4<T>,
    sigma: usize,
    k: usize,
) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let (_, q, ho, wo) = kernels.dim();
    debug_assert_eq!(q, k * k);
    let r = (k - 1) / 2;
    let plane_in = h * w;
    let plane_out = ho * wo;
    let mut y = Array4::<T>::zeros((n, c, ho, wo));
    let xs = x.as_slice().unwrap();
    let ks = kernels.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let xoff = (ni * c + ci) * plane_in;
            let yoff = (ni * c + ci) * plane_out;
            for oy in 0..ho {
                let sy = oy / sigma;
                for ox in 0..wo {
                    let sx = ox / sigma;
                    let kbase = ni * q * plane_out + oy * wo + ox;
                    let mut acc = T::zero();
                    for_valid_taps(sy, sx, h, w, r, k, |qi, yy, xx| {
                        acc += ks[kbase + qi * plane_out] * xs[xoff + yy * w + xx];
                    });
                    ys[yoff + oy * wo + ox] = acc;
                }
            }
        }
    }
    y
}

/// Slow nested-loop oracle for the reassembly step. `kernels` must already
/// be normalized, shape `(k_up^2, sigma*H, sigma*W)`; out-of-bounds taps
/// read zero (plain zero padding, no renormalization).
pub fn carafe_reference<T: Scalar>(
    features: &Array3<T>,
    kernels: &Array3<T>,
    sigma: usize,
) -> Array3<T> {
    let (c, h, w) = features.dim();
    let (q, ho, wo) = kernels.dim();
    let k = (q as f64).sqrt() as usize;
    assert_eq!(k * k, q, "kernel count must be a perfect square");
    assert_eq!((ho, wo), (h * sigma, w * sigma), "kernel grid mismatch");
    let r = (k as isize - 1) / 2;
    let mut out = Array3::<T>::zeros((c, ho, wo));
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let sy = (oy / sigma) as isize;
                let sx = (ox / sigma) as isize;
                let mut acc = T::zero();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (sy + dy, sx + dx);
                        let v = if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            features[(ci, yy as usize, xx as usize)]
                        } else {
                            T::zero()
                        };
                        let qi = ((dy + r) * k as isize + dx + r) as usize;
                        acc += kernels[(qi, oy, ox)] * v;
                    }
                }
                out[(ci, oy, ox)] = acc;
            }
        }
    }
    out
}
