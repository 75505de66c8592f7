//! Central finite-difference gradient verification.
//!
//! The checker is independent of any layer's backward pass: it only needs a
//! way to evaluate the scalar loss after perturbing one parameter entry.

use super::{HasParams, Param, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub n_checked: usize,
}

impl GradCheckReport {
    fn update(&mut self, fd: f64, an: f64) {
        let abs = (fd - an).abs();
        let denom = fd.abs().max(an.abs());
        if denom > 1e-10 {
            let rel = abs / denom;
            if rel > self.max_rel_err {
                self.max_rel_err = rel;
            }
        }
        if abs > self.max_abs_err {
            self.max_abs_err = abs;
        }
        self.n_checked += 1;
    }
}

/// Default finite-difference step from the acceptance gradient checks.
pub const FD_STEP: f64 = 1e-3;

/// Compares analytic parameter gradients of `module` against central finite
/// differences of `loss`.
///
/// `backward` must leave the full analytic gradients in each `Param::grad`
/// (the checker zeroes them first). Up to `max_per_param` entries per
/// parameter are probed, strided evenly across the tensor; pass `usize::MAX`
/// to probe every entry.
pub fn check_against_fd<T, M>(
    module: &mut M,
    mut loss: impl FnMut(&mut M) -> f64,
    mut backward: impl FnMut(&mut M),
    step: f64,
    max_per_param: usize,
) -> GradCheckReport
where
    T: Scalar,
    M: HasParams<T>,
{
    module.zero_grads();
    backward(module);

    // Snapshot analytic grads by name; the perturbation loop below reuses
    // `loss`, which may overwrite caches but must not touch grads.
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    module.visit_params(&mut |p: &mut Param<T>| {
        if p.trainable {
            analytic.push((p.name.clone(), p.grad.iter().map(|g| g.as_f64()).collect()));
        }
    });

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        n_checked: 0,
    };

    for (name, grads) in &analytic {
        let n = grads.len();
        let stride = (n / max_per_param.min(n).max(1)).max(1);
        let mut idx = 0;
        while idx < n {
            let fd = {
                let mut probe = |delta: f64| {
                    set_entry(module, name, idx, delta);
                    let v = loss(module);
                    set_entry(module, name, idx, -delta);
                    v
                };
                let f1 = probe(step);
                let f2 = probe(-step);
                (f1 - f2) / (2.0 * step)
            };
            report.update(fd, grads[idx]);
            idx += stride;
        }
    }
    report
}

fn set_entry<T: Scalar, M: HasParams<T>>(module: &mut M, name: &str, idx: usize, delta: f64) {
    module.visit_params(&mut |p: &mut Param<T>| {
        if p.name == name {
            let v = p.data.as_slice_mut().expect("contiguous param");
            v[idx] = v[idx] + T::fl(delta);
        }
    });
}
