//! Seeded fixtures shared by the kernel benchmarks.

use efcp_core::{topk_block, Compressed, GradientWindow, Precision, SparseGradWindow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vec(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// A full sparse window of `m` Top-k rows over `d` coordinates.
pub fn sparse_window(
    m: usize,
    d: usize,
    density: f64,
    block_size: usize,
    precision: Precision,
) -> SparseGradWindow {
    let mut w =
        SparseGradWindow::new(m, d, block_size, density, precision).expect("valid window shape");
    for i in 0..m {
        let g = random_vec(d, 1000 + i as u64);
        let c = topk_block(&g, density, block_size).expect("valid compression");
        w.push(&Compressed::Sparse(c)).expect("row fits");
    }
    w
}
