//! Seeded inputs for the kernel benchmarks in `benches/`.

use fusionlens::{FeatureMap, FeatureMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    FeatureMatrix::new(rows, cols, data).expect("finite data")
}

pub fn random_map(k: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..k * h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    FeatureMap::new(k, h, w, data).expect("consistent shape")
}

/// Labels in `{-1, 0, 1}` with roughly a fifth of the pixels on concept 1.
pub fn random_labels(n: usize, seed: u64) -> Vec<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| match rng.random_range(0..10) {
            0 => -1,
            1 | 2 => 1,
            _ => 0,
        })
        .collect()
}
