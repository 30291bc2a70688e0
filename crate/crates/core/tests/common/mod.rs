//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use mracl::losses::ContrastiveBatch;
use mracl::numcore::l2_normalize;
use mracl::synth::{generate_dataset, Dataset, SceneConfig, SplitSizes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v = gaussian(dim, rng);
        if let Ok(u) = l2_normalize(&v) {
            return u.into_inner();
        }
    }
}

/// Random unit-norm batch with `n` anchors and `k` negatives each.
pub fn random_batch<R: Rng>(n: usize, k: usize, dim: usize, rng: &mut R) -> ContrastiveBatch {
    let anchors = (0..n).map(|_| unit(dim, rng)).collect();
    let positives = (0..n).map(|_| unit(dim, rng)).collect();
    let negatives = (0..n).map(|_| (0..k).map(|_| unit(dim, rng)).collect()).collect();
    ContrastiveBatch::new(anchors, positives, negatives).unwrap()
}

/// Rotates unit vector `a` towards a random orthogonal direction by `phi`.
pub fn at_angle<R: Rng>(a: &[f64], phi: f64, rng: &mut R) -> Vec<f64> {
    let mut w = gaussian(a.len(), rng);
    let proj: f64 = w.iter().zip(a).map(|(x, y)| x * y).sum();
    w.iter_mut().zip(a).for_each(|(x, y)| *x -= proj * y);
    let w = l2_normalize(&w).unwrap().into_inner();
    a.iter().zip(&w).map(|(x, y)| phi.cos() * x + phi.sin() * y).collect()
}

/// Small 8×8 dataset for end-to-end gradient and training checks.
pub fn small_dataset(seed: u64, train: usize) -> Dataset {
    let scene = SceneConfig {
        grid: 8,
        max_side: 3,
        seed,
        ..SceneConfig::default()
    };
    let sizes = SplitSizes {
        train,
        test_static: 8,
        test_motion: 8,
    };
    generate_dataset(&scene, &sizes).unwrap()
}
