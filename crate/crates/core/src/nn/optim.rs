//! Optimizers and the polynomial learning-rate schedule.

use super::{HasParams, Param, Scalar};

/// `lr0 * (1 - iter/max_iter)^power`, the schedule paired with "initial
/// learning rate" settings.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return base;
    }
    let frac = (iter.min(max_iter)) as f64 / max_iter as f64;
    base * (1.0 - frac).powf(power)
}

/// Classic SGD with momentum: `v = mu*v + g; w -= lr*v`.
pub struct SgdMomentum {
    pub momentum: f64,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum { momentum }
    }

    pub fn step<T: Scalar, M: HasParams<T>>(&self, module: &mut M, lr: f64) {
        let mu = T::fl(self.momentum);
        let lr = T::fl(lr);
        module.visit_params(&mut |p: &mut Param<T>| {
            if !p.trainable {
                return;
            }
            if p.state.is_empty() {
                p.state.push(ndarray::ArrayD::zeros(p.data.raw_dim()));
            }
            let v = &mut p.state[0];
            ndarray::Zip::from(v)
                .and(&p.grad)
                .for_each(|v, &g| *v = mu * *v + g);
            ndarray::Zip::from(&mut p.data)
                .and(&p.state[0])
                .for_each(|w, &v| *w = *w - lr * v);
        });
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn step<T: Scalar, M: HasParams<T>>(&mut self, module: &mut M, lr: f64) {
        self.t += 1;
        let b1 = T::fl(self.beta1);
        let b2 = T::fl(self.beta2);
        let c1 = T::fl(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let c2 = T::fl(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let eps = T::fl(self.eps);
        let lr = T::fl(lr);
        module.visit_params(&mut |p: &mut Param<T>| {
            if !p.trainable {
                return;
            }
            while p.state.len() < 2 {
                p.state.push(ndarray::ArrayD::zeros(p.data.raw_dim()));
            }
            let (m, rest) = p.state.split_at_mut(1);
            let v = &mut rest[0];
            ndarray::Zip::from(&mut m[0])
                .and(&p.grad)
                .for_each(|m, &g| *m = b1 * *m + (T::one() - b1) * g);
            ndarray::Zip::from(v)
                .and(&p.grad)
                .for_each(|v, &g| *v = b2 * *v + (T::one() - b2) * g * g);
            ndarray::Zip::from(&mut p.data)
                .and(&p.state[0])
                .and(&p.state[1])
                .for_each(|w, &m, &v| {
                    *w = *w - lr * (m * c1) / ((v * c2).sqrt() + eps);
                });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use ndarray::ArrayD;

    struct One(Param<f64>);
    impl HasParams<f64> for One {
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0);
        }
    }

    #[test]
    fn poly_schedule_endpoints() {
        assert!((poly_lr(1e-4, 0, 100, 0.9) - 1e-4).abs() < 1e-18);
        assert!(poly_lr(1e-4, 100, 100, 0.9).abs() < 1e-18);
        assert!(poly_lr(1e-4, 50, 100, 0.9) < 1e-4);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut m = One(Param::new("w", ArrayD::zeros(vec![1]), true));
        m.0.grad.fill(1.0);
        let opt = SgdMomentum::new(0.9);
        opt.step(&mut m, 0.1);
        assert!((m.0.data[0] - (-0.1)).abs() < 1e-12);
        opt.step(&mut m, 0.1);
        // v = 0.9*1 + 1 = 1.9 -> w = -0.1 - 0.19
        assert!((m.0.data[0] - (-0.29)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut m = One(Param::new("w", ArrayD::zeros(vec![1]), true));
        m.0.grad.fill(0.5);
        let mut opt = Adam::new(0.9, 0.99);
        opt.step(&mut m, 1e-3);
        // Bias-corrected first step is ~lr * sign(g).
        assert!((m.0.data[0] + 1e-3).abs() < 1e-6);
    }

    #[test]
    fn non_trainable_params_are_skipped() {
        let mut m = One(Param::new("rm", ArrayD::zeros(vec![2]), false));
        m.0.grad.fill(5.0);
        SgdMomentum::new(0.9).step(&mut m, 1.0);
        assert!(m.0.data.iter().all(|&v| v == 0.0));
    }
}
