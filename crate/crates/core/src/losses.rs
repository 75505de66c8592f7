//! Training losses: BCE+dice for supervised masks, the discriminator's
//! real/fake objective, the adversarial term, and confidence-masked
//! self-training on pseudo-labels.
//!
//! Each loss has a value-only form and a `_grad` form returning the
//! gradient w.r.t. the differentiable input. BCE on logits uses the
//! log-sum-exp-stable formulation; BCE on probabilities clamps to
//! [eps, 1-eps] and treats the clamp as flat (zero gradient outside).

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::nn::act::sigmoid;
use crate::nn::Scalar;

/// Probability clamp for losses taking confidence values directly.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
}

fn logits_hw<T: Scalar>(logits: &Array3<T>) -> (usize, usize) {
    let (c, h, w) = logits.dim();
    assert_eq!(c, 1, "expected single-channel logits");
    (h, w)
}

/// Stable per-pixel BCE given a logit and a binary target.
#[inline]
fn bce_from_logit<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::fl(CLAMP_EPS);
    p.max(eps).min(T::one() - eps)
}

/// Mean BCE on sigmoid probabilities plus soft dice loss
/// `1 - (2*sum(p*g) + s)/(sum(p) + sum(g) + s)`, equally weighted.
pub fn bce_dice_loss<T: Scalar>(
    logits: &Array3<T>,
    gt: &Array2<u8>,
    smoothing: T,
) -> Result<T, LossError> {
    bce_dice_loss_grad(logits, gt, smoothing).map(|(v, _)| v)
}

pub fn bce_dice_loss_grad<T: Scalar>(
    logits: &Array3<T>,
    gt: &Array2<u8>,
    smoothing: T,
) -> Result<(T, Array3<T>), LossError> {
    bce_dice_weighted(logits, gt, smoothing, T::one(), T::one())
}

/// Weighted decomposition used by tests to isolate the BCE term.
pub(crate) fn bce_dice_weighted<T: Scalar>(
    logits: &Array3<T>,
    gt: &Array2<u8>,
    smoothing: T,
    w_bce: T,
    w_dice: T,
) -> Result<(T, Array3<T>), LossError> {
    let (h, w) = logits_hw(logits);
    if gt.dim() != (h, w) {
        return Err(LossError::ShapeMismatch {
            expected: (h, w),
            got: gt.dim(),
        });
    }
    let n = T::fl((h * w) as f64);
    let mut grad = Array3::<T>::zeros((1, h, w));

    let mut bce = T::zero();
    let mut sum_p = T::zero();
    let mut sum_g = T::zero();
    let mut sum_pg = T::zero();
    for i in 0..h {
        for j in 0..w {
            let z = logits[(0, i, j)];
            let y = T::fl(gt[(i, j)] as f64);
            bce += bce_from_logit(z, y);
            let p = sigmoid(z);
            sum_p += p;
            sum_g += y;
            sum_pg += p * y;
        }
    }
    bce /= n;
    let two = T::fl(2.0);
    let a = two * sum_pg + smoothing;
    let b = sum_p + sum_g + smoothing;
    let dice = T::one() - a / b;

    for i in 0..h {
        for j in 0..w {
            let z = logits[(0, i, j)];
            let y = T::fl(gt[(i, j)] as f64);
            let p = sigmoid(z);
            let dbce = (p - y) / n;
            let ddice_dp = -(two * y * b - a) / (b * b);
            grad[(0, i, j)] = w_bce * dbce + w_dice * ddice_dp * p * (T::one() - p);
        }
    }
    Ok((w_bce * bce + w_dice * dice, grad))
}

/// Mean BCE of `conf_pred` against target 0 plus mean BCE of `conf_gt`
/// against target 1.
pub fn discriminator_loss<T: Scalar>(
    conf_pred: &Array2<T>,
    conf_gt: &Array2<T>,
) -> Result<T, LossError> {
    discriminator_loss_grad(conf_pred, conf_gt).map(|(v, _, _)| v)
}

/// Returns `(value, d/d conf_pred, d/d conf_gt)`.
pub fn discriminator_loss_grad<T: Scalar>(
    conf_pred: &Array2<T>,
    conf_gt: &Array2<T>,
) -> Result<(T, Array2<T>, Array2<T>), LossError> {
    if conf_pred.dim() != conf_gt.dim() {
        return Err(LossError::ShapeMismatch {
            expected: conf_pred.dim(),
            got: conf_gt.dim(),
        });
    }
    let n = T::fl(conf_pred.len() as f64);
    let eps = T::fl(CLAMP_EPS);
    let one = T::one();

    let mut value = T::zero();
    let mut g_pred = Array2::<T>::zeros(conf_pred.dim());
    let mut g_gt = Array2::<T>::zeros(conf_gt.dim());
    for ((gp, gg), (&p, &g)) in g_pred
        .iter_mut()
        .zip(g_gt.iter_mut())
        .zip(conf_pred.iter().zip(conf_gt.iter()))
    {
        let pc = clamp_prob(p);
        let gc = clamp_prob(g);
        value += -(one - pc).ln() - gc.ln();
        if p > eps && p < one - eps {
            *gp = one / ((one - pc) * n);
        }
        if g > eps && g < one - eps {
            *gg = -one / (gc * n);
        }
    }
    Ok((value / n, g_pred, g_gt))
}

/// Mean BCE of `conf_pred` against target 1: the segmentation side tries
/// to make its predictions score as real.
pub fn adversarial_loss<T: Scalar>(conf_pred: &Array2<T>) -> T {
    adversarial_loss_grad(conf_pred).0
}

pub fn adversarial_loss_grad<T: Scalar>(conf_pred: &Array2<T>) -> (T, Array2<T>) {
    let n = T::fl(conf_pred.len() as f64);
    let eps = T::fl(CLAMP_EPS);
    let one = T::one();
    let mut value = T::zero();
    let mut grad = Array2::<T>::zeros(conf_pred.dim());
    for (g, &p) in grad.iter_mut().zip(conf_pred.iter()) {
        let pc = clamp_prob(p);
        value += -pc.ln();
        if p > eps && p < one - eps {
            *g = -one / (pc * n);
        }
    }
    (value / n, grad)
}

/// Self-training loss on pseudo-labels `1[sigmoid(logit) >= 0.5]`, averaged
/// over pixels whose confidence exceeds `t_semi`. Zero when nothing passes.
pub fn semi_supervised_loss<T: Scalar>(
    conf: &Array2<T>,
    logits: &Array3<T>,
    t_semi: T,
) -> Result<T, LossError> {
    semi_supervised_loss_grad(conf, logits, t_semi).map(|(v, _)| v)
}

/// Returns `(value, d/d logits)`; the confidence mask is treated as constant.
pub fn semi_supervised_loss_grad<T: Scalar>(
    conf: &Array2<T>,
    logits: &Array3<T>,
    t_semi: T,
) -> Result<(T, Array3<T>), LossError> {
    let (h, w) = logits_hw(logits);
    if conf.dim() != (h, w) {
        return Err(LossError::ShapeMismatch {
            expected: (h, w),
            got: conf.dim(),
        });
    }
    let mut grad = Array3::<T>::zeros((1, h, w));
    let mut value = T::zero();
    let mut count = 0usize;
    for i in 0..h {
        for j in 0..w {
            if conf[(i, j)] > t_semi {
                count += 1;
                let z = logits[(0, i, j)];
                let y = if z >= T::zero() { T::one() } else { T::zero() };
                value += bce_from_logit(z, y);
                grad[(0, i, j)] = sigmoid(z) - y;
            }
        }
    }
    if count == 0 {
        return Ok((T::zero(), grad));
    }
    let n = T::fl(count as f64);
    grad.mapv_inplace(|g| g / n);
    Ok((value / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn fd_check_3d(
        f: &mut dyn FnMut(&Array3<f64>) -> f64,
        x: &Array3<f64>,
        grad: &Array3<f64>,
        tol: f64,
    ) {
        let step = 1e-5;
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let v0 = x.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = v0 + step;
            let f1 = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = v0 - step;
            let f2 = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = v0;
            let fd = (f1 - f2) / (2.0 * step);
            let an = grad.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() <= tol * fd.abs().max(an.abs()).max(1.0),
                "idx {idx}: fd {fd} analytic {an}"
            );
        }
    }

    #[test]
    fn bce_dice_perfect_prediction_is_near_zero() {
        let gt = Array2::from_shape_fn((4, 4), |(i, j)| ((i + j) % 2) as u8);
        let logits = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| {
            if gt[(i, j)] == 1 { 20.0 } else { -20.0 }
        });
        let loss = bce_dice_loss(&logits, &gt, 1.0).unwrap();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn bce_dice_all_zero_logits_empty_gt() {
        let gt = Array2::<u8>::zeros((2, 2));
        let logits = Array3::<f64>::zeros((1, 2, 2));
        let loss = bce_dice_loss(&logits, &gt, 1.0).unwrap();
        // BCE = ln 2; dice = 1 - 1/(2 + 1) = 2/3.
        assert!((loss - (LN2 + 2.0 / 3.0)).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn bce_term_alone_is_mean_bce() {
        let gt = Array2::from_shape_fn((3, 5), |(i, j)| ((i * j) % 2) as u8);
        let logits = Array3::from_shape_fn((1, 3, 5), |(_, i, j)| {
            (i as f64 - 1.0) * 0.7 + j as f64 * 0.3 - 0.8
        });
        let (loss, _) = bce_dice_weighted(&logits, &gt, 1.0, 1.0, 0.0).unwrap();
        let mut want = 0.0;
        for i in 0..3 {
            for j in 0..5 {
                let z: f64 = logits[(0, i, j)];
                let p = 1.0 / (1.0 + (-z).exp());
                let y = gt[(i, j)] as f64;
                want += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            }
        }
        want /= 15.0;
        assert!((loss - want).abs() < 1e-9);
    }

    #[test]
    fn bce_dice_shape_mismatch() {
        let gt = Array2::<u8>::zeros((2, 3));
        let logits = Array3::<f64>::zeros((1, 2, 2));
        assert!(matches!(
            bce_dice_loss(&logits, &gt, 1.0),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn bce_dice_gradient_matches_finite_differences() {
        let gt = Array2::from_shape_fn((3, 4), |(i, j)| ((i + 2 * j) % 3 == 0) as u8);
        let logits =
            Array3::from_shape_fn((1, 3, 4), |(_, i, j)| 0.3 * i as f64 - 0.5 * j as f64 + 0.1);
        let (_, grad) = bce_dice_loss_grad(&logits, &gt, 1.0).unwrap();
        fd_check_3d(
            &mut |z| bce_dice_loss(z, &gt, 1.0).unwrap(),
            &logits,
            &grad,
            1e-5,
        );
    }

    #[test]
    fn discriminator_loss_analytic_values() {
        let half = Array2::from_elem((3, 3), 0.5);
        let v = discriminator_loss(&half, &half).unwrap();
        assert!((v - 2.0 * LN2).abs() < 1e-6);

        let lo = Array2::from_elem((3, 3), CLAMP_EPS);
        let hi = Array2::from_elem((3, 3), 1.0 - CLAMP_EPS);
        assert!(discriminator_loss(&lo, &hi).unwrap() < 1e-5);

        let p9 = Array2::from_elem((2, 2), 0.9);
        let v = discriminator_loss(&p9, &p9).unwrap();
        assert!((v - (-(0.1f64).ln() - (0.9f64).ln())).abs() < 1e-6);
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let pred = Array2::from_shape_fn((2, 3), |(i, j)| 0.2 + 0.1 * (i + j) as f64);
        let gt = Array2::from_shape_fn((2, 3), |(i, j)| 0.8 - 0.07 * (i * 2 + j) as f64);
        let (_, gp, gg) = discriminator_loss_grad(&pred, &gt).unwrap();
        let step = 1e-6;
        for idx in 0..pred.len() {
            let mut p2 = pred.clone();
            let v0 = p2.as_slice().unwrap()[idx];
            p2.as_slice_mut().unwrap()[idx] = v0 + step;
            let f1 = discriminator_loss(&p2, &gt).unwrap();
            p2.as_slice_mut().unwrap()[idx] = v0 - step;
            let f2 = discriminator_loss(&p2, &gt).unwrap();
            let fd = (f1 - f2) / (2.0 * step);
            assert!((fd - gp.as_slice().unwrap()[idx]).abs() < 1e-4);

            let mut g2 = gt.clone();
            let v0 = g2.as_slice().unwrap()[idx];
            g2.as_slice_mut().unwrap()[idx] = v0 + step;
            let f1 = discriminator_loss(&pred, &g2).unwrap();
            g2.as_slice_mut().unwrap()[idx] = v0 - step;
            let f2 = discriminator_loss(&pred, &g2).unwrap();
            let fd = (f1 - f2) / (2.0 * step);
            assert!((fd - gg.as_slice().unwrap()[idx]).abs() < 1e-4);
        }
    }

    #[test]
    fn adversarial_loss_analytic_values() {
        let fooled = Array2::from_elem((4, 4), 1.0 - CLAMP_EPS);
        assert!(adversarial_loss(&fooled) < 1e-5);
        let half = Array2::from_elem((4, 4), 0.5);
        assert!((adversarial_loss(&half) - LN2).abs() < 1e-6);
        let q = Array2::from_elem((4, 4), 0.25);
        assert!((adversarial_loss(&q) - (-(0.25f64).ln())).abs() < 1e-6);
    }

    #[test]
    fn semi_loss_fully_masked_is_zero() {
        let conf = Array2::<f64>::zeros((3, 3));
        let logits = Array3::from_elem((1, 3, 3), 0.7);
        let (v, g) = semi_supervised_loss_grad(&conf, &logits, 0.2).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn semi_loss_saturated_logits_near_zero() {
        let conf = Array2::from_elem((3, 3), 1.0);
        let logits = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| {
            if (i + j) % 2 == 0 { 20.0 } else { -20.0 }
        });
        assert!(semi_supervised_loss(&conf, &logits, 0.2).unwrap() < 1e-6);
    }

    #[test]
    fn semi_loss_half_masked_zero_logits() {
        // Confidence passes on exactly half the pixels; logits are 0 there,
        // so the masked mean BCE is ln 2 regardless of the other half.
        let conf = Array2::from_shape_fn((4, 4), |(i, _)| if i < 2 { 0.9 } else { 0.0 });
        let logits = Array3::from_shape_fn((1, 4, 4), |(_, i, _)| if i < 2 { 0.0 } else { 5.0 });
        let v = semi_supervised_loss(&conf, &logits, 0.2).unwrap();
        assert!((v - LN2).abs() < 1e-6);
    }

    #[test]
    fn semi_loss_gradient_matches_finite_differences() {
        let conf = Array2::from_shape_fn((3, 4), |(i, j)| if (i + j) % 2 == 0 { 0.9 } else { 0.1 });
        // Keep logits away from the pseudo-label flip at 0.
        let logits = Array3::from_shape_fn((1, 3, 4), |(_, i, j)| {
            if (i * 4 + j) % 3 == 0 { 1.5 } else { -0.8 }
        });
        let (_, grad) = semi_supervised_loss_grad(&conf, &logits, 0.2).unwrap();
        fd_check_3d(
            &mut |z| semi_supervised_loss(&conf, z, 0.2).unwrap(),
            &logits,
            &grad,
            1e-5,
        );
    }

    #[test]
    fn saturated_confidence_maps_stay_finite() {
        let zeros = Array2::<f64>::zeros((2, 2));
        let ones = Array2::from_elem((2, 2), 1.0);
        for (p, g) in [(&zeros, &ones), (&ones, &zeros), (&zeros, &zeros)] {
            let v = discriminator_loss(p, g).unwrap();
            assert!(v.is_finite());
            assert!(adversarial_loss(p).is_finite());
        }
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(
            zs in proptest::collection::vec(-30.0f64..30.0, 12),
            ps in proptest::collection::vec(0.0f64..=1.0, 12),
            gs in proptest::collection::vec(0.0f64..=1.0, 12),
            mask in proptest::collection::vec(0u8..=1, 12),
            t in 0.05f64..0.95,
        ) {
            let logits = Array3::from_shape_vec((1, 3, 4), zs).unwrap();
            let conf_p = Array2::from_shape_vec((3, 4), ps).unwrap();
            let conf_g = Array2::from_shape_vec((3, 4), gs).unwrap();
            let gt = Array2::from_shape_vec((3, 4), mask).unwrap();
            prop_assert!(bce_dice_loss(&logits, &gt, 1.0).unwrap() >= 0.0);
            prop_assert!(discriminator_loss(&conf_p, &conf_g).unwrap() >= 0.0);
            prop_assert!(adversarial_loss(&conf_p) >= 0.0);
            prop_assert!(semi_supervised_loss(&conf_p, &logits, t).unwrap() >= 0.0);
        }
    }
}
