#![allow(dead_code)]

use fedharmony_core::clustering::LabelPartition;
use fedharmony_core::consensus::ConsensusMatrix;
use fedharmony_core::corrstats::CorrelationMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

/// Random symmetric matrix with unit diagonal and entries in (-0.9, 0.9).
pub fn random_correlation(rng: &mut ChaCha8Rng, c: usize) -> CorrelationMatrix {
    let mut m = Array2::eye(c);
    for i in 0..c {
        for j in i + 1..c {
            let v = rng.random_range(-0.9..0.9);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    CorrelationMatrix::from_values(m, 1e-8).unwrap()
}

pub fn random_consensus(rng: &mut ChaCha8Rng, c: usize) -> ConsensusMatrix {
    ConsensusMatrix::from_matrix(random_correlation(rng, c), 0)
}

/// Random partition of `c` labels into exactly `g` nonempty clusters.
pub fn random_partition(rng: &mut ChaCha8Rng, c: usize, g: usize) -> LabelPartition {
    let mut labels: Vec<usize> = (0..c).map(|i| if i < g { i } else { rng.random_range(0..g) }).collect();
    for i in (1..c).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    LabelPartition::from_assignment(&labels).unwrap()
}

/// Central differences of `f` at `x`, entry by entry.
pub fn numeric_grad(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = xp[idx];
        xp[idx] = orig + h;
        let up = f(&xp);
        xp[idx] = orig - h;
        let down = f(&xp);
        xp[idx] = orig;
        g[idx] = (up - down) / (2.0 * h);
    }
    g
}

/// Largest absolute error scaled by the largest reference magnitude.
pub fn max_rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}
