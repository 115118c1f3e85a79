use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ClassDataset;
use crate::error::{Error, Result};

const TURNS: f64 = 1.25;

/// Noise-free point at parameter `t ∈ [0, 1]` on the spiral of `class`:
/// radius `t`, angle `2π (class / classes + TURNS · t)`.
pub fn spiral_point(class: usize, classes: usize, t: f64) -> (f64, f64) {
    let theta = std::f64::consts::TAU * (class as f64 / classes as f64 + TURNS * t);
    (t * theta.cos(), t * theta.sin())
}

/// `n_per_class` points per class on interleaved spiral arms, with
/// Gaussian noise of `noise_std` added to both coordinates. Classes are
/// interleaved in the output order.
pub fn synth_spirals(n_per_class: usize, classes: usize, noise_std: f64, seed: u64) -> Result<ClassDataset> {
    if n_per_class == 0 || classes == 0 {
        return Err(Error::config("spirals", "need at least one class and one point per class"));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::config("spirals.noise_std", "must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).expect("valid std");
    let mut features = Vec::with_capacity(2 * n_per_class * classes);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for i in 0..n_per_class {
        let t = (i + 1) as f64 / n_per_class as f64;
        for c in 0..classes {
            let (x, y) = spiral_point(c, classes, t);
            if noise_std > 0.0 {
                features.push(x + noise.sample(&mut rng));
                features.push(y + noise.sample(&mut rng));
            } else {
                features.push(x);
                features.push(y);
            }
            labels.push(c);
        }
    }
    ClassDataset::new(vec![2], features, labels, classes)
}
