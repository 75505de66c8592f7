//! Pointwise activations.

use ndarray::Array4;

use super::Scalar;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_map<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(sigmoid)
}

/// ReLU that caches the activation mask.
#[derive(Default)]
pub struct Relu<T> {
    mask: Option<Array4<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu { mask: None }
    }

    pub fn forward(&mut self, x: &Array4<T>) -> Array4<T> {
        let mask = x.mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
        let y = x * &mask;
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, gy: &Array4<T>) -> Array4<T> {
        gy * self.mask.as_ref().expect("relu backward before forward")
    }
}

/// Leaky ReLU with configurable negative slope.
pub struct LeakyRelu<T> {
    pub slope: T,
    mask: Option<Array4<T>>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: T) -> Self {
        LeakyRelu { slope, mask: None }
    }

    pub fn forward(&mut self, x: &Array4<T>) -> Array4<T> {
        let slope = self.slope;
        let mask = x.mapv(|v| if v > T::zero() { T::one() } else { slope });
        let y = x * &mask;
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, gy: &Array4<T>) -> Array4<T> {
        gy * self.mask.as_ref().expect("leaky relu backward before forward")
    }
}
