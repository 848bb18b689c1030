//! Noise-model estimation from neighbourhood label consensus.
//!
//! Under clusterability an instance and its two nearest neighbours share a
//! clean class, so the joint frequencies of their noisy labels are moments of
//! `(p, T)`:
//!
//! ```text
//! nu1[i]     = sum_c p_c T[c,i]
//! nu2[i,j]   = sum_c p_c T[c,i] T[c,j]
//! nu3[i,j,l] = sum_c p_c T[c,i] T[c,j] T[c,l]
//! ```
//!
//! [`fit_noise_model`] matches these moments by projected gradient descent
//! over the probability simplices, keeping the best of several restarts.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::KnnIndex;
use crate::rng::{stream_rng, Stream};

/// Clean prior `p`, transition matrix `T[i][j] = P(noisy = j | clean = i)` and
/// noisy-label marginal `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub prior: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    /// Empty when loaded from a file that omits it; filled from label counts
    /// by the pipeline.
    #[serde(default)]
    pub noisy_marginal: Vec<f64>,
}

const SIMPLEX_TOL: f64 = 1e-6;

fn on_simplex(v: &[f64]) -> bool {
    v.iter().all(|&x| x >= -SIMPLEX_TOL) && (v.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
}

impl NoiseModel {
    pub fn n_classes(&self) -> usize {
        self.prior.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_classes();
        if k == 0 {
            return Err(Error::Validation("noise model has no classes".into()));
        }
        if !on_simplex(&self.prior) {
            return Err(Error::Validation("noise model prior is not on the simplex".into()));
        }
        if self.transition.len() != k {
            return Err(Error::Validation(format!(
                "transition matrix has {} rows, expected {k}",
                self.transition.len()
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != k || !on_simplex(row) {
                return Err(Error::Validation(format!(
                    "transition row {i} is not on the {k}-simplex"
                )));
            }
        }
        if !self.noisy_marginal.is_empty()
            && (self.noisy_marginal.len() != k || !on_simplex(&self.noisy_marginal))
        {
            return Err(Error::Validation(
                "noisy marginal is not on the simplex".into(),
            ));
        }
        Ok(())
    }

    /// `T^T p`, the noisy marginal implied by prior and transitions.
    pub fn implied_marginal(&self) -> Vec<f64> {
        let k = self.n_classes();
        (0..k)
            .map(|j| (0..k).map(|c| self.prior[c] * self.transition[c][j]).sum())
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: NoiseModel = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        model.validate()?;
        Ok(model)
    }
}

/// Empirical first-, second- and third-order label agreement frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusStats {
    pub n_classes: usize,
    pub nu1: Vec<f64>,
    /// Row-major `K x K`.
    pub nu2: Vec<f64>,
    /// Row-major `K x K x K`.
    pub nu3: Vec<f64>,
}

impl ConsensusStats {
    pub fn nu2_at(&self, i: usize, j: usize) -> f64 {
        self.nu2[i * self.n_classes + j]
    }

    pub fn nu3_at(&self, i: usize, j: usize, l: usize) -> f64 {
        let k = self.n_classes;
        self.nu3[(i * k + j) * k + l]
    }
}

/// Frequencies of `(label(n), label(1st NN), label(2nd NN))` over all `n`.
pub fn consensus_stats(
    index: &KnnIndex,
    noisy_labels: &[usize],
    n_classes: usize,
) -> Result<ConsensusStats> {
    if index.k() < 2 {
        return Err(Error::Config(format!(
            "consensus statistics need k >= 2, index has k={}",
            index.k()
        )));
    }
    let n = index.len();
    if noisy_labels.len() != n {
        return Err(Error::Validation(format!(
            "{} labels for an index over {n} rows",
            noisy_labels.len()
        )));
    }
    crate::dataset::check_label_range(noisy_labels, n_classes)?;
    let k = n_classes;

    // integer counts merge exactly, so the parallel fold is deterministic
    let counts = (0..n)
        .into_par_iter()
        .fold(
            || vec![0u64; k * k * k],
            |mut acc, row| {
                let nb = index.neighbors(row);
                let (a, b, c) = (noisy_labels[row], noisy_labels[nb[0]], noisy_labels[nb[1]]);
                acc[(a * k + b) * k + c] += 1;
                acc
            },
        )
        .reduce(
            || vec![0u64; k * k * k],
            |mut x, y| {
                x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
                x
            },
        );

    let total = n as f64;
    let mut nu1 = vec![0u64; k];
    let mut nu2 = vec![0u64; k * k];
    for a in 0..k {
        for b in 0..k {
            for c in 0..k {
                let v = counts[(a * k + b) * k + c];
                nu1[a] += v;
                nu2[a * k + b] += v;
            }
        }
    }
    let freq = |v: Vec<u64>| v.into_iter().map(|x| x as f64 / total).collect::<Vec<_>>();
    Ok(ConsensusStats {
        n_classes: k,
        nu1: freq(nu1),
        nu2: freq(nu2),
        nu3: freq(counts),
    })
}

/// Optimizer settings for [`fit_noise_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HocConfig {
    pub weights: [f64; 3],
    pub learning_rate: f64,
    pub max_iters: usize,
    pub restarts: usize,
    /// Stop once no coordinate moves by more than this in an accepted step.
    pub tolerance: f64,
}

impl Default for HocConfig {
    fn default() -> Self {
        Self {
            weights: [1.0, 1.0, 1.0],
            learning_rate: 0.1,
            max_iters: 1500,
            restarts: 10,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HocFit {
    pub model: NoiseModel,
    pub objective: f64,
    pub iterations: usize,
    /// `false` when the best restart hit `max_iters` before settling.
    pub converged: bool,
    pub restart: usize,
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Parameters being fitted: prior and row-major transition matrix.
#[derive(Debug, Clone)]
struct Params {
    p: Vec<f64>,
    t: Vec<f64>,
}

struct Moments {
    m1: Vec<f64>,
    m2: Vec<f64>,
    m3: Vec<f64>,
}

fn moments(k: usize, x: &Params) -> Moments {
    let mut m1 = vec![0.0; k];
    let mut m2 = vec![0.0; k * k];
    let mut m3 = vec![0.0; k * k * k];
    for c in 0..k {
        let pc = x.p[c];
        let t = &x.t[c * k..(c + 1) * k];
        for i in 0..k {
            let a = pc * t[i];
            m1[i] += a;
            for j in 0..k {
                let b = a * t[j];
                m2[i * k + j] += b;
                for l in 0..k {
                    m3[(i * k + j) * k + l] += b * t[l];
                }
            }
        }
    }
    Moments { m1, m2, m3 }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn objective(stats: &ConsensusStats, w: &[f64; 3], x: &Params) -> f64 {
    let m = moments(stats.n_classes, x);
    w[0] * sq_dist(&m.m1, &stats.nu1)
        + w[1] * sq_dist(&m.m2, &stats.nu2)
        + w[2] * sq_dist(&m.m3, &stats.nu3)
}

fn gradient(stats: &ConsensusStats, w: &[f64; 3], x: &Params) -> Params {
    let k = stats.n_classes;
    let m = moments(k, x);
    let r1: Vec<f64> = m.m1.iter().zip(&stats.nu1).map(|(a, b)| a - b).collect();
    let r2: Vec<f64> = m.m2.iter().zip(&stats.nu2).map(|(a, b)| a - b).collect();
    let r3: Vec<f64> = m.m3.iter().zip(&stats.nu3).map(|(a, b)| a - b).collect();

    let mut gp = vec![0.0; k];
    let mut gt = vec![0.0; k * k];
    for c in 0..k {
        let t = &x.t[c * k..(c + 1) * k];
        // d/dT[c,a] of each residual contraction, before the p_c factor
        let mut d1 = vec![0.0; k];
        let mut d2 = vec![0.0; k];
        let mut d3 = vec![0.0; k];
        let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
        for i in 0..k {
            d1[i] = r1[i];
            s1 += r1[i] * t[i];
            for j in 0..k {
                let v = r2[i * k + j];
                d2[i] += v * t[j];
                d2[j] += v * t[i];
                s2 += v * t[i] * t[j];
                for l in 0..k {
                    let v = r3[(i * k + j) * k + l];
                    d3[i] += v * t[j] * t[l];
                    d3[j] += v * t[i] * t[l];
                    d3[l] += v * t[i] * t[j];
                    s3 += v * t[i] * t[j] * t[l];
                }
            }
        }
        gp[c] = 2.0 * (w[0] * s1 + w[1] * s2 + w[2] * s3);
        for a in 0..k {
            gt[c * k + a] = 2.0 * x.p[c] * (w[0] * d1[a] + w[1] * d2[a] + w[2] * d3[a]);
        }
    }
    Params { p: gp, t: gt }
}

fn projected_step(k: usize, x: &Params, g: &Params, lr: f64) -> Params {
    let p: Vec<f64> = x.p.iter().zip(&g.p).map(|(a, b)| a - lr * b).collect();
    let mut t = Vec::with_capacity(k * k);
    for c in 0..k {
        let row: Vec<f64> = (0..k)
            .map(|a| x.t[c * k + a] - lr * g.t[c * k + a])
            .collect();
        t.extend(project_simplex(&row));
    }
    Params {
        p: project_simplex(&p),
        t,
    }
}

fn max_change(a: &Params, b: &Params) -> f64 {
    a.p.iter()
        .zip(&b.p)
        .chain(a.t.iter().zip(&b.t))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

struct Descent {
    x: Params,
    objective: f64,
    iterations: usize,
    converged: bool,
}

/// Projected gradient descent from `x`. A step that would raise the
/// objective is rejected and the rate halved, so the accepted objective
/// sequence is non-increasing. `trace` receives the objective after every
/// iteration.
/// Accepted steps stretch the step size a little; rejected ones halve it.
const STEP_GROWTH: f64 = 1.05;

fn descend(
    stats: &ConsensusStats,
    cfg: &HocConfig,
    mut x: Params,
    mut trace: impl FnMut(f64),
) -> Descent {
    let k = stats.n_classes;
    let mut lr = cfg.learning_rate;
    let mut f = objective(stats, &cfg.weights, &x);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let g = gradient(stats, &cfg.weights, &x);
        let cand = projected_step(k, &x, &g, lr);
        let fc = objective(stats, &cfg.weights, &cand);
        if fc <= f {
            let moved = max_change(&x, &cand);
            x = cand;
            f = fc;
            lr *= STEP_GROWTH;
            if moved <= cfg.tolerance {
                converged = true;
            }
        } else {
            lr *= 0.5;
            if lr < 1e-14 {
                converged = true;
            }
        }
        trace(f);
        if converged {
            break;
        }
    }
    Descent {
        x,
        objective: f,
        iterations,
        converged,
    }
}

fn initial_params(k: usize, seed: u64, restart: usize) -> Params {
    let mut rng = stream_rng(seed, Stream::HocInit, restart as u64);
    // Dirichlet(1, ..., 1) via normalized unit exponentials
    let e: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = e.iter().sum();
    let p = e.iter().map(|v| v / s).collect();
    let off = 0.3 / k as f64;
    let mut t = vec![off; k * k];
    for c in 0..k {
        t[c * k + c] += 0.7;
    }
    Params { p, t }
}

fn check_stats(stats: &ConsensusStats) -> Result<()> {
    let k = stats.n_classes;
    if k == 0
        || stats.nu1.len() != k
        || stats.nu2.len() != k * k
        || stats.nu3.len() != k * k * k
    {
        return Err(Error::Validation(
            "consensus statistics have inconsistent shapes".into(),
        ));
    }
    Ok(())
}

/// Fit `(p, T)` to consensus statistics. The returned model carries the
/// counted noisy marginal `nu1` as `q`. `seed` drives the restart
/// initializations.
pub fn fit_noise_model(stats: &ConsensusStats, cfg: &HocConfig, seed: u64) -> Result<HocFit> {
    check_stats(stats)?;
    if cfg.restarts == 0 || cfg.max_iters == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config(
            "HOC needs restarts >= 1, max_iters >= 1 and a positive learning rate".into(),
        ));
    }
    let k = stats.n_classes;
    let runs: Vec<Descent> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| descend(stats, cfg, initial_params(k, seed, r), |_| {}))
        .collect();
    let (restart, best) = runs
        .into_iter()
        .enumerate()
        .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective))
        .expect("at least one restart");
    if !best.converged {
        log::info!(
            "noise-model fit stopped at max_iters={} (objective {:.3e})",
            cfg.max_iters,
            best.objective
        );
    }
    let transition = best.x.t.chunks_exact(k).map(<[f64]>::to_vec).collect();
    Ok(HocFit {
        model: NoiseModel {
            prior: best.x.p,
            transition,
            noisy_marginal: stats.nu1.clone(),
        },
        objective: best.objective,
        iterations: best.iterations,
        converged: best.converged,
        restart,
    })
}

/// `P(clean = j | noisy = j) = T[j][j] p_j / q_j`, clipped to `[0, 1]`.
///
/// `class_counts[j]` is the number of instances with noisy label `j`; a class
/// that occurs in the data but has `q_j = 0` is an inconsistency. Absent
/// classes get posterior 1.
pub fn posterior_clean(model: &NoiseModel, class_counts: &[usize]) -> Result<Vec<f64>> {
    let k = model.n_classes();
    if model.noisy_marginal.len() != k || class_counts.len() != k {
        return Err(Error::Internal(format!(
            "posterior needs {k} marginals and counts, got {} and {}",
            model.noisy_marginal.len(),
            class_counts.len()
        )));
    }
    (0..k)
        .map(|j| {
            let q = model.noisy_marginal[j];
            if q <= 0.0 {
                return if class_counts[j] > 0 {
                    Err(Error::Internal(format!(
                        "class {j} has {} instances but zero noisy marginal",
                        class_counts[j]
                    )))
                } else {
                    Ok(1.0)
                };
            }
            let raw = model.transition[j][j] * model.prior[j] / q;
            if !(0.0..=1.0).contains(&raw) {
                log::warn!("posterior for class {j} is {raw:.6}, clipped to [0, 1]");
            }
            Ok(raw.clamp(0.0, 1.0))
        })
        .collect()
}
