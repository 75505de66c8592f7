//! Minimal deterministic neural-network engine: explicit forward/backward
//! layers over `ndarray` tensors in NCHW layout.
//!
//! Every layer caches what its backward pass needs during `forward`, and
//! `backward` returns the gradient with respect to the layer input while
//! accumulating parameter gradients in place. All computations are generic
//! over [`Scalar`] so the same code runs in `f32` for training and `f64`
//! for finite-difference gradient verification.

pub mod act;
pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod optim;
pub mod resize;
pub mod store;

use ndarray::{ArrayD, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Floating-point element type usable by the engine.
pub trait Scalar: NdFloat + std::iter::Sum + 'static {
    fn fl(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn fl(v: f64) -> f32 {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn fl(v: f64) -> f64 {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Forward-pass mode. Batch statistics are collected (and running averages
/// updated) only in `Train`; `Eval` forwards are side-effect free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named tensor with its gradient and optional optimizer state.
///
/// Non-trainable entries (batch-norm running statistics) are serialized with
/// checkpoints but skipped by optimizers.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub data: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub trainable: bool,
    pub state: Vec<ArrayD<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, data: ArrayD<T>, trainable: bool) -> Self {
        let grad = ArrayD::zeros(data.raw_dim());
        Param {
            name: name.into(),
            data,
            grad,
            trainable,
            state: Vec::new(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Anything that owns parameters and can hand them to a visitor in a stable,
/// construction-defined order.
pub trait HasParams<T: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    /// Total number of trainable scalars.
    fn n_trainable(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.trainable {
                n += p.len();
            }
        });
        n
    }
}

/// Deterministic named RNG stream derived from a base seed. Separate streams
/// keep independent concerns (weight init, batch shuffling, noise) from
/// perturbing each other's sequences.
pub fn seeded_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    // FNV-1a over the stream label, folded into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&h.to_le_bytes());
    key[16..24].copy_from_slice(&seed.rotate_left(17).to_le_bytes());
    key[24..32].copy_from_slice(&h.rotate_left(31).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
