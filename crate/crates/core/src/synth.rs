//! Gaussian-mixture fixtures for benchmarks, walkthroughs and tests.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// `n` points in `dim` dimensions from `n_classes` isotropic unit-variance
/// Gaussians whose means are pairwise `separation` apart (class `c` is
/// centred at `separation / sqrt(2) * e_c`). Labels cycle `0, 1, ..., K-1`.
pub fn gaussian_mixture(
    n: usize,
    dim: usize,
    n_classes: usize,
    separation: f64,
    seed: u64,
) -> Result<(FeatureMatrix, Vec<usize>)> {
    if n_classes == 0 || dim < n_classes {
        return Err(Error::Config(format!(
            "need 1 <= n_classes <= dim, got {n_classes} classes in {dim} dimensions"
        )));
    }
    let offset = separation / std::f64::consts::SQRT_2;
    let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    let mut data = vec![0.0; n * dim];
    data.par_chunks_mut(dim).enumerate().for_each(|(i, row)| {
        // counter 1<<40 onwards keeps these streams apart from noise injection
        let mut rng = stream_rng(seed, Stream::NoiseInstance, (1 << 40) + i as u64);
        for v in row.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        row[labels[i]] += offset;
    });
    Ok((FeatureMatrix::new(n, dim, data)?, labels))
}
