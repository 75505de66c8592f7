//! Spatial resampling: bilinear resize, nearest-neighbor upsampling, and
//! pixel shuffle. Each forward has a matching linear backward (transpose).

use ndarray::Array4;

use super::Scalar;

/// Per-axis bilinear sampling table: `(lo, hi, weight_hi)`.
fn bilinear_axis<T: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            // align_corners = false convention.
            let src = (o as f64 + 0.5) * scale - 0.5;
            let src = src.clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, T::fl(src - lo as f64))
        })
        .collect()
}

pub fn bilinear_resize<T: Scalar>(x: &Array4<T>, out_h: usize, out_w: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let ys = bilinear_axis::<T>(h, out_h);
    let xs = bilinear_axis::<T>(w, out_w);
    let mut y = Array4::<T>::zeros((n, c, out_h, out_w));
    let xin = x.as_slice().expect("contiguous input");
    let yout = y.as_slice_mut().expect("contiguous output");
    for ni in 0..n {
        for ci in 0..c {
            let src = (ni * c + ci) * h * w;
            let dst = (ni * c + ci) * out_h * out_w;
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let a = xin[src + y0 * w + x0];
                    let b = xin[src + y0 * w + x1];
                    let cc = xin[src + y1 * w + x0];
                    let d = xin[src + y1 * w + x1];
                    let top = a + wx * (b - a);
                    let bot = cc + wx * (d - cc);
                    yout[dst + oy * out_w + ox] = top + wy * (bot - top);
                }
            }
        }
    }
    y
}

/// Transpose of [`bilinear_resize`]: scatters output gradients back to the
/// `in_h x in_w` grid with the same interpolation weights.
pub fn bilinear_resize_backward<T: Scalar>(
    gy: &Array4<T>,
    in_h: usize,
    in_w: usize,
) -> Array4<T> {
    let (n, c, out_h, out_w) = gy.dim();
    let ys = bilinear_axis::<T>(in_h, out_h);
    let xs = bilinear_axis::<T>(in_w, out_w);
    let mut gx = Array4::<T>::zeros((n, c, in_h, in_w));
    let gin = gy.as_slice().expect("contiguous grad");
    let gout = gx.as_slice_mut().expect("contiguous output");
    for ni in 0..n {
        for ci in 0..c {
            let src = (ni * c + ci) * out_h * out_w;
            let dst = (ni * c + ci) * in_h * in_w;
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let g = gin[src + oy * out_w + ox];
                    let one = T::one();
                    gout[dst + y0 * in_w + x0] += (one - wy) * (one - wx) * g;
                    gout[dst + y0 * in_w + x1] += (one - wy) * wx * g;
                    gout[dst + y1 * in_w + x0] += wy * (one - wx) * g;
                    gout[dst + y1 * in_w + x1] += wy * wx * g;
                }
            }
        }
    }
    gx
}

pub fn nearest_upsample<T: Scalar>(x: &Array4<T>, factor: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<T>::zeros((n, c, h * factor, w * factor));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..h * factor {
                for ox in 0..w * factor {
                    y[(ni, ci, oy, ox)] = x[(ni, ci, oy / factor, ox / factor)];
                }
            }
        }
    }
    y
}

pub fn nearest_upsample_backward<T: Scalar>(gy: &Array4<T>, factor: usize) -> Array4<T> {
    let (n, c, oh, ow) = gy.dim();
    let (h, w) = (oh / factor, ow / factor);
    let mut gx = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    gx[(ni, ci, oy / factor, ox / factor)] += gy[(ni, ci, oy, ox)];
                }
            }
        }
    }
    gx
}

/// `(N, C*r^2, H, W)` -> `(N, C, rH, rW)`, torch channel ordering:
/// output `(c, r*y + i, r*x + j)` reads input channel `c*r^2 + i*r + j`.
pub fn pixel_shuffle<T: Scalar>(x: &Array4<T>, r: usize) -> Array4<T> {
    let (n, c_r2, h, w) = x.dim();
    let c = c_r2 / (r * r);
    assert_eq!(c * r * r, c_r2, "channels not divisible by r^2");
    let mut y = Array4::<T>::zeros((n, c, h * r, w * r));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = ci * r * r + i * r + j;
                    for yy in 0..h {
                        for xx in 0..w {
                            y[(ni, ci, yy * r + i, xx * r + j)] = x[(ni, src_c, yy, xx)];
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn pixel_shuffle_backward<T: Scalar>(gy: &Array4<T>, r: usize) -> Array4<T> {
    let (n, c, hr, wr) = gy.dim();
    let (h, w) = (hr / r, wr / r);
    let mut gx = Array4::<T>::zeros((n, c * r * r, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = ci * r * r + i * r + j;
                    for yy in 0..h {
                        for xx in 0..w {
                            gx[(ni, src_c, yy, xx)] = gy[(ni, ci, yy * r + i, xx * r + j)];
                        }
                    }
                }
            }
        }
    }
    gx
}
