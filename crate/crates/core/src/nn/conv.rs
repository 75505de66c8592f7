//! 2D convolution via im2col + GEMM.

use ndarray::{Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::{Param, Scalar};

/// Square-kernel 2D convolution with stride and zero padding.
///
/// Weights are stored flattened as `(c_out, c_in * k * k)` so forward and
/// backward passes are single matrix products per sample.
pub struct Conv2d<T> {
    pub w: Param<T>,
    pub b: Option<Param<T>>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache_x: Option<Array4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // He-normal initialization for rectified nets.
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Array2::from_shape_fn((c_out, c_in * k * k), |_| {
            T::fl(sample_normal(rng) * std)
        });
        let b = bias.then(|| {
            Param::new(
                format!("{name}.b"),
                ndarray::ArrayD::zeros(vec![c_out]),
                true,
            )
        });
        Conv2d {
            w: Param::new(format!("{name}.w"), w.into_dyn(), true),
            b,
            c_in,
            c_out,
            k,
            stride,
            pad,
            cache_x: None,
        }
    }

    /// Re-initializes the weight with a uniform distribution on `[-a, a]`
    /// (near-zero kernels for the reassembly-kernel prediction path).
    pub fn reinit_uniform(&mut self, a: f64, rng: &mut ChaCha8Rng) {
        for w in self.w.data.iter_mut() {
            *w = T::fl(rng.random_range(-a..a));
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<T>) -> Array4<T> {
        let (n, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "{}: channel mismatch", self.w.name);
        assert!(
            h + 2 * self.pad >= self.k && w + 2 * self.pad >= self.k,
            "{}: input {h}x{w} too small for k={}",
            self.w.name,
            self.k
        );
        let (ho, wo) = self.out_hw(h, w);
        let w2 = self
            .w
            .data
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut y = Array4::<T>::zeros((n, self.c_out, ho, wo));
        let mut col = Array2::<T>::zeros((self.c_in * self.k * self.k, ho * wo));
        for i in 0..n {
            im2col(
                x.index_axis(ndarray::Axis(0), i),
                self.k,
                self.stride,
                self.pad,
                ho,
                wo,
                &mut col,
            );
            let yi = w2.dot(&col);
            let mut out = y.index_axis_mut(ndarray::Axis(0), i);
            let yi = yi
                .into_shape_with_order((self.c_out, ho, wo))
                .unwrap();
            out.assign(&yi);
        }
        if let Some(b) = &self.b {
            for c in 0..self.c_out {
                let bc = b.data[c];
                y.index_axis_mut(ndarray::Axis(1), c).mapv_inplace(|v| v + bc);
            }
        }
        self.cache_x = Some(x.clone());
        y
    }

    pub fn backward(&mut self, gy: &Array4<T>) -> Array4<T> {
        let x = self
            .cache_x
            .as_ref()
            .expect("conv backward before forward");
        let (n, _, h, w) = x.dim();
        let (_, _, ho, wo) = gy.dim();
        let w2 = self
            .w
            .data
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut gx = Array4::<T>::zeros(x.raw_dim());
        let mut gw = Array2::<T>::zeros((self.c_out, self.c_in * self.k * self.k));
        let mut col = Array2::<T>::zeros((self.c_in * self.k * self.k, ho * wo));
        for i in 0..n {
            im2col(
                x.index_axis(ndarray::Axis(0), i),
                self.k,
                self.stride,
                self.pad,
                ho,
                wo,
                &mut col,
            );
            let gyi = gy.index_axis(ndarray::Axis(0), i);
            let gyi = gyi
                .into_shape_with_order((self.c_out, ho * wo))
                .unwrap();
            gw = gw + gyi.dot(&col.t());
            let gcol = w2.t().dot(&gyi);
            col2im(
                gcol.view(),
                self.k,
                self.stride,
                self.pad,
                ho,
                wo,
                gx.index_axis_mut(ndarray::Axis(0), i),
            );
        }
        self.w.grad += &gw.into_dyn();
        if let Some(b) = &mut self.b {
            for c in 0..self.c_out {
                let s: T = gy.index_axis(ndarray::Axis(1), c).iter().copied().sum();
                b.grad[c] += s;
            }
        }
        let _ = (h, w);
        gx
    }

    pub fn clear_cache(&mut self) {
        self.cache_x = None;
    }
}

impl<T: Scalar> super::HasParams<T> for Conv2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

pub(crate) fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

/// Unfolds one sample `(C, H, W)` into a `(C*k*k, ho*wo)` matrix with zero
/// padding. `col` must already have the right shape.
fn im2col<T: Scalar>(
    x: ArrayView3<T>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut Array2<T>,
) {
    let (c_in, h, w) = x.dim();
    let xs = x.as_slice().expect("contiguous input");
    let cs = col.as_slice_mut().expect("contiguous col");
    let ncols = ho * wo;
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let base = row * ncols;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = base + oy * wo;
                    if iy < 0 || iy >= h as isize {
                        cs[dst..dst + wo].fill(T::zero());
                        continue;
                    }
                    let src_row = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        cs[dst + ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            xs[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatters column gradients back onto the input
/// grid, accumulating where patches overlap.
fn col2im<T: Scalar>(
    gcol: ArrayView2<T>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    mut gx: ArrayViewMut3<T>,
) {
    let (c_in, h, w) = gx.dim();
    let gs = gcol.as_slice().expect("contiguous gcol");
    let out = gx.as_slice_mut().expect("contiguous gx");
    let ncols = ho * wo;
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let base = row * ncols;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (c * h + iy as usize) * w;
                    let src = base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[dst_row + ix as usize] += gs[src + ox];
                        }
                    }
                }
            }
        }
    }
}
