//! Per-channel batch normalization with running statistics for
//! evaluation-mode determinism.

use ndarray::{Array1, Array4, ArrayD, Axis};

use super::{Mode, Param, Scalar};

pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: T,
    pub eps: T,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    xhat: Array4<T>,
    invstd: Array1<T>,
    count: usize,
    mode: Mode,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), ArrayD::ones(vec![channels]), true),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(vec![channels]), true),
            running_mean: Param::new(
                format!("{name}.running_mean"),
                ArrayD::zeros(vec![channels]),
                false,
            ),
            running_var: Param::new(
                format!("{name}.running_var"),
                ArrayD::ones(vec![channels]),
                false,
            ),
            momentum: T::fl(0.1),
            eps: T::fl(1e-5),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let count = n * h * w;
        let mut y = Array4::<T>::zeros(x.raw_dim());
        let mut xhat = Array4::<T>::zeros(x.raw_dim());
        let mut invstd = Array1::<T>::zeros(c);
        for ci in 0..c {
            let xc = x.index_axis(Axis(1), ci);
            let (mean, var) = match mode {
                Mode::Train => {
                    let m: T = xc.iter().copied().sum::<T>() / T::fl(count as f64);
                    let v: T = xc
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>()
                        / T::fl(count as f64);
                    // Unbiased variance feeds the running estimate.
                    let unbiased = if count > 1 {
                        v * T::fl(count as f64 / (count as f64 - 1.0))
                    } else {
                        v
                    };
                    let mom = self.momentum;
                    self.running_mean.data[ci] =
                        (T::one() - mom) * self.running_mean.data[ci] + mom * m;
                    self.running_var.data[ci] =
                        (T::one() - mom) * self.running_var.data[ci] + mom * unbiased;
                    (m, v)
                }
                Mode::Eval => (self.running_mean.data[ci], self.running_var.data[ci]),
            };
            let istd = T::one() / (var + self.eps).sqrt();
            invstd[ci] = istd;
            let g = self.gamma.data[ci];
            let b = self.beta.data[ci];
            let mut xh = xhat.index_axis_mut(Axis(1), ci);
            let mut yc = y.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut xh).and(&mut yc).and(&xc).for_each(
                |xh, yc, &xv| {
                    let z = (xv - mean) * istd;
                    *xh = z;
                    *yc = g * z + b;
                },
            );
        }
        self.cache = Some(BnCache {
            xhat,
            invstd,
            count,
            mode,
        });
        y
    }

    pub fn backward(&mut self, gy: &Array4<T>) -> Array4<T> {
        let cache = self.cache.as_ref().expect("bn backward before forward");
        let (_, c, _, _) = gy.dim();
        let mut gx = Array4::<T>::zeros(gy.raw_dim());
        let cnt = T::fl(cache.count as f64);
        for ci in 0..c {
            let gyc = gy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let sum_gy: T = gyc.iter().copied().sum();
            let sum_gy_xh: T = gyc.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
            self.beta.grad[ci] += sum_gy;
            self.gamma.grad[ci] += sum_gy_xh;
            let g = self.gamma.data[ci];
            let istd = cache.invstd[ci];
            let mut gxc = gx.index_axis_mut(Axis(1), ci);
            match cache.mode {
                Mode::Train => {
                    ndarray::Zip::from(&mut gxc).and(&gyc).and(&xh).for_each(
                        |gx, &gy, &xh| {
                            *gx = g * istd / cnt * (cnt * gy - sum_gy - xh * sum_gy_xh);
                        },
                    );
                }
                Mode::Eval => {
                    ndarray::Zip::from(&mut gxc).and(&gyc).for_each(|gx, &gy| {
                        *gx = g * istd * gy;
                    });
                }
            }
        }
        gx
    }
}

impl<T: Scalar> super::HasParams<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}
