//! Fixtures shared by the benchmarks.

use bilisting::synth::{generate, GeneratorConfig, ListingRecord};
use bilisting::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = StandardNormal.sample(&mut rng);
    }
    m
}

/// Gaussian rows scaled to unit length.
pub fn unit_rows(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut m = gaussian(rows, cols, seed);
    for i in 0..rows {
        let row = m.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    m
}

pub fn listings(n: usize, seed: u64) -> Vec<ListingRecord> {
    generate(&GeneratorConfig {
        n_listings: n,
        seed,
        ..GeneratorConfig::default()
    })
    .expect("valid generator config")
}
