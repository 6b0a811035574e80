//! Spatially transformed adversarial examples at desk scale.
//!
//! The crate generates adversarial images by optimizing a per-pixel
//! displacement field against a differentiable classifier instead of editing
//! pixel values directly. It bundles everything needed to reproduce that
//! pipeline end to end: a small f64 autodiff engine, differentiable bilinear
//! warping, the attack objective (margin loss plus a total-variation flow
//! penalty), an L-BFGS solver, MNIST/CIFAR classifiers with standard and
//! adversarial training, baseline attacks (FGSM, C&W, PGD), the mean-blur
//! defense and its adaptive counter-attack, flow magnitude metrics, and
//! byte-level dataset/weight/image IO.

pub mod attacks;
pub mod data;
pub mod defense;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod solver;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};

/// Seeded RNG used everywhere randomness is needed; ChaCha8 keeps streams
/// stable across platforms and crate versions.
pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
