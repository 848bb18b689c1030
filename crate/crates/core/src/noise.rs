//! Synthetic label-noise injection for benchmarking detectors.
//!
//! Each instance draws from its own derived RNG stream, so output is
//! independent of thread count.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{check_label_range, FeatureMatrix};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Standard deviation of the per-instance flip rate for instance-dependent
/// noise.
pub const DEFAULT_RATE_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub eta: f64,
    pub seed: u64,
    /// Spread of the per-instance flip rate (instance-dependent noise only).
    #[serde(default = "default_rate_std")]
    pub rate_std: f64,
}

fn default_rate_std() -> f64 {
    DEFAULT_RATE_STD
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, eta: f64, seed: u64) -> Self {
        Self {
            kind,
            eta,
            seed,
            rate_std: DEFAULT_RATE_STD,
        }
    }
}

fn check_args(labels: &[usize], n_classes: usize, eta: f64) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "noise injection needs at least 2 classes, got {n_classes}"
        )));
    }
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must lie in [0, 1), got {eta}")));
    }
    check_label_range(labels, n_classes)
}

/// Flip each label with probability `eta` to one of the other classes,
/// chosen uniformly.
pub fn inject_symmetric(labels: &[usize], n_classes: usize, eta: f64, seed: u64) -> Result<Vec<usize>> {
    check_args(labels, n_classes, eta)?;
    if eta == 0.0 {
        return Ok(labels.to_vec());
    }
    Ok(labels
        .par_iter()
        .enumerate()
        .map(|(n, &y)| {
            let mut rng = stream_rng(seed, Stream::NoiseInstance, n as u64);
            if rng.random::<f64>() < eta {
                let r = rng.random_range(0..n_classes - 1);
                if r >= y {
                    r + 1
                } else {
                    r
                }
            } else {
                y
            }
        })
        .collect())
}

/// Flip each label with probability `eta` to its cyclic successor
/// `(y + 1) mod K`.
pub fn inject_asymmetric(labels: &[usize], n_classes: usize, eta: f64, seed: u64) -> Result<Vec<usize>> {
    check_args(labels, n_classes, eta)?;
    if eta >= 0.5 {
        log::warn!("asymmetric noise with eta={eta} >= 0.5 makes the successor class dominant");
    }
    if eta == 0.0 {
        return Ok(labels.to_vec());
    }
    Ok(labels
        .par_iter()
        .enumerate()
        .map(|(n, &y)| {
            let mut rng = stream_rng(seed, Stream::NoiseInstance, n as u64);
            if rng.random::<f64>() < eta {
                (y + 1) % n_classes
            } else {
                y
            }
        })
        .collect())
}

/// Instance-dependent noise from random per-class projections.
///
/// For clean class `i` a `d x K` matrix `W_i` with standard-normal entries is
/// drawn once. Instance `n` gets a flip rate `q_n ~ N(eta, rate_std^2)`
/// truncated to `[0, 1]`, keeps its label with probability `1 - q_n`, and
/// otherwise moves to wrong class `j` with probability proportional to
/// `exp(x_n . W_{y_n}[:, j])`.
pub fn inject_instance_dependent(
    features: &FeatureMatrix,
    labels: &[usize],
    n_classes: usize,
    eta: f64,
    rate_std: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    check_args(labels, n_classes, eta)?;
    if labels.len() != features.n_rows() {
        return Err(Error::Validation(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.n_rows()
        )));
    }
    if !(rate_std >= 0.0 && rate_std.is_finite()) {
        return Err(Error::Config(format!("rate std must be >= 0, got {rate_std}")));
    }
    if eta == 0.0 {
        return Ok(labels.to_vec());
    }
    let d = features.n_cols();
    let k = n_classes;
    // W_i stored row-major d x K
    let projections: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::NoiseProjection, i as u64);
            (0..d * k).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect();
    let rate = Normal::new(eta, rate_std).map_err(|e| Error::Config(e.to_string()))?;

    Ok(labels
        .par_iter()
        .enumerate()
        .map(|(n, &y)| {
            let mut rng = stream_rng(seed, Stream::NoiseInstance, n as u64);
            let q = truncated_sample(&rate, &mut rng);
            if rng.random::<f64>() >= q {
                return y;
            }
            let probs = flip_distribution(features.row(n), &projections[y], y, k);
            sample_categorical(&probs, &mut rng)
        })
        .collect())
}

/// Rejection sample restricted to `[0, 1]`. Falls back to clamping after many
/// rejections, which only matters for means far outside the interval.
fn truncated_sample<R: Rng>(dist: &Normal<f64>, rng: &mut R) -> f64 {
    let mut last = 0.0;
    for _ in 0..1000 {
        last = dist.sample(rng);
        if (0.0..=1.0).contains(&last) {
            return last;
        }
    }
    last.clamp(0.0, 1.0)
}

/// Softmax of `x . W[:, j]` over wrong classes `j != y`; zero at `y`.
pub fn flip_distribution(x: &[f64], w: &[f64], y: usize, k: usize) -> Vec<f64> {
    let mut s = vec![0.0; k];
    for (xv, wrow) in x.iter().zip(w.chunks_exact(k)) {
        for (sj, wj) in s.iter_mut().zip(wrow) {
            *sj += xv * wj;
        }
    }
    let max = s
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (j, v) in s.iter_mut().enumerate() {
        *v = if j == y { 0.0 } else { (*v - max).exp() };
        total += *v;
    }
    s.iter_mut().for_each(|v| *v /= total);
    s
}

fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

/// Apply a [`NoiseSpec`]. `features` is required for instance-dependent noise.
pub fn inject(
    spec: &NoiseSpec,
    labels: &[usize],
    n_classes: usize,
    features: Option<&FeatureMatrix>,
) -> Result<Vec<usize>> {
    // keep per-kind streams apart even when users reuse a seed
    let seed = derive_seed(spec.seed, Stream::NoiseInstance, spec.kind as u64);
    match spec.kind {
        NoiseKind::Symmetric => inject_symmetric(labels, n_classes, spec.eta, seed),
        NoiseKind::Asymmetric => inject_asymmetric(labels, n_classes, spec.eta, seed),
        NoiseKind::Instance => {
            let f = features.ok_or_else(|| {
                Error::Config("instance-dependent noise needs a feature matrix".into())
            })?;
            inject_instance_dependent(f, labels, n_classes, spec.eta, spec.rate_std, seed)
        }
    }
}

/// Fraction of positions where `noisy` differs from `clean`.
pub fn corruption_rate(clean: &[usize], noisy: &[usize]) -> f64 {
    let flipped = clean.iter().zip(noisy).filter(|(a, b)| a != b).count();
    flipped as f64 / clean.len().max(1) as f64
}
