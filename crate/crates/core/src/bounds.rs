//! Numerical forms of the detector guarantees: the majority-vote lower
//! bound, the break-even rule for growing `k`, and the rank-detection F1
//! bound with its success probability estimated by Monte Carlo.

use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

const CF_EPS: f64 = 1e-16;
const CF_TINY: f64 = 1e-300;
const CF_MAX_ITER: usize = 10_000;

/// Continued fraction for `I_x(a, b)` evaluated with the modified Lentz method.
fn beta_cf(x: f64, a: f64, b: f64) -> Result<f64> {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let clamp = |v: f64| if v.abs() < CF_TINY { CF_TINY } else { v };

    let mut c = 1.0;
    let mut d = 1.0 / clamp(1.0 - qab * x / qap);
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;

        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 / clamp(1.0 + aa * d);
        c = clamp(1.0 + aa / c);
        h *= d * c;

        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 / clamp(1.0 + aa * d);
        c = clamp(1.0 + aa / c);
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_EPS {
            return Ok(h);
        }
    }
    Err(Error::Internal(format!(
        "incomplete beta continued fraction did not converge for x={x}, a={a}, b={b}"
    )))
}

/// Regularized incomplete beta function `I_x(a, b)`, the Beta(a, b) CDF.
pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || !(a > 0.0) || !(b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!(
            "I_x(a, b) needs x in [0, 1] and a, b > 0; got x={x}, a={a}, b={b}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b)).exp();
    // the fraction converges fast only below the mean; use symmetry above it
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(x, a, b)? / a)
    } else {
        Ok(1.0 - front * beta_cf(1.0 - x, b, a)? / b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteBoundInput {
    pub k: usize,
    /// Upper bound on the noise rate, in `[0, 0.5)`.
    pub e: f64,
    pub delta_k: f64,
}

/// Half the vote count minus one: `ceil((k + 1) / 2) - 1`.
pub fn vote_margin(k: usize) -> usize {
    (k + 1).div_ceil(2) - 1
}

/// Probability that a pure majority vote over `k + 1` labels, each wrong
/// independently with rate `e`, is correct: `I_{1-e}(k + 1 - k', k' + 1)`.
pub fn majority_vote_term(k: usize, e: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    if !(0.0..0.5).contains(&e) {
        return Err(Error::Domain(format!("noise bound e must lie in [0, 0.5), got {e}")));
    }
    let kp = vote_margin(k);
    reg_inc_beta(1.0 - e, (k + 1 - kp) as f64, (kp + 1) as f64)
}

/// `(1 - delta_k) * I_{1-e}(k + 1 - k', k' + 1)`.
pub fn vote_lower_bound(input: &VoteBoundInput) -> Result<f64> {
    if !(0.0..=1.0).contains(&input.delta_k) {
        return Err(Error::Domain(format!(
            "delta_k must lie in [0, 1], got {}",
            input.delta_k
        )));
    }
    Ok((1.0 - input.delta_k) * majority_vote_term(input.k, input.e)?)
}

/// `I(k2) / I(k1)`: how much the pure-vote term improves from `k1` to `k2`.
pub fn vote_term_ratio(k1: usize, k2: usize, e: f64) -> Result<f64> {
    Ok(majority_vote_term(k2, e)? / majority_vote_term(k1, e)?)
}

/// The `delta_{k2}` at which the vote bound for `k2` equals the bound for
/// `k1`; any larger `delta_{k2}` makes the larger `k` worse.
pub fn k_breakeven(k1: usize, k2: usize, e: f64, delta_k1: f64) -> Result<f64> {
    if k1 >= k2 {
        return Err(Error::Domain(format!("need k1 < k2, got k1={k1}, k2={k2}")));
    }
    if !(0.0..=1.0).contains(&delta_k1) {
        return Err(Error::Domain(format!("delta_k1 must lie in [0, 1], got {delta_k1}")));
    }
    Ok(1.0 - (1.0 - delta_k1) / vote_term_ratio(k1, k2, e)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankBoundInput {
    /// Corrupted instances in the class.
    pub n_minus: usize,
    /// Clean instances in the class.
    pub n_plus: usize,
    pub alpha: usize,
    /// `mu_true - mu_false`, the gap between mean clean and corrupted scores.
    pub mu_gap: f64,
    pub delta: f64,
    /// Tail decay rate.
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankBound {
    pub f1_lower: f64,
    pub prob_p: f64,
    /// Half-width of the 95% normal-approximation interval for `prob_p`.
    pub ci_half_width: f64,
    pub samples: usize,
}

pub const MIN_MC_SAMPLES: usize = 10_000;
const MC_CHUNK: usize = 1 << 16;

impl RankBoundInput {
    fn validate(&self) -> Result<()> {
        if self.n_minus == 0 {
            return Err(Error::Domain("n_minus must be at least 1".into()));
        }
        if self.alpha > self.n_plus {
            return Err(Error::Domain(format!(
                "alpha={} exceeds n_plus={}",
                self.alpha, self.n_plus
            )));
        }
        if !(-1.0..=1.0).contains(&self.mu_gap) {
            return Err(Error::Domain(format!("mu_gap must lie in [-1, 1], got {}", self.mu_gap)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Domain(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.v > 0.0) {
            return Err(Error::Domain(format!("v must be > 0, got {}", self.v)));
        }
        Ok(())
    }

    /// `1 - (exp(-v) * max(N-, N+) + alpha) / N-`.
    pub fn f1_lower(&self) -> f64 {
        let worst = self.n_minus.max(self.n_plus) as f64;
        1.0 - ((-self.v).exp() * worst + self.alpha as f64) / self.n_minus as f64
    }
}

/// F1 lower bound for rank detection and the probability `P(b1 - b2 < gap - delta)`
/// with `b1 ~ Beta(N-, 1)` and `b2 ~ Beta(alpha + 1, N+ - alpha)`.
///
/// Samples are drawn in fixed-size chunks with one RNG stream per chunk, so
/// the estimate depends only on `seed` and `mc_samples`.
pub fn rank_f1_bound(input: &RankBoundInput, mc_samples: usize, seed: u64) -> Result<RankBound> {
    input.validate()?;
    if mc_samples < MIN_MC_SAMPLES {
        return Err(Error::Config(format!(
            "need at least {MIN_MC_SAMPLES} Monte-Carlo samples, got {mc_samples}"
        )));
    }
    let f1_lower = input.f1_lower();
    let threshold = input.mu_gap - input.delta;
    let exact = |p: f64| RankBound {
        f1_lower,
        prob_p: p,
        ci_half_width: 0.0,
        samples: mc_samples,
    };
    // b1 - b2 lies in (-1, 1)
    if threshold >= 1.0 {
        return Ok(exact(1.0));
    }
    if threshold <= -1.0 {
        return Ok(exact(0.0));
    }

    let b1 = Beta::new(input.n_minus as f64, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    let b2 = if input.alpha < input.n_plus {
        Some(
            Beta::new((input.alpha + 1) as f64, (input.n_plus - input.alpha) as f64)
                .map_err(|e| Error::Domain(e.to_string()))?,
        )
    } else {
        // Beta(alpha + 1, 0) is a point mass at 1
        None
    };

    let n_chunks = mc_samples.div_ceil(MC_CHUNK);
    let hits: usize = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let len = MC_CHUNK.min(mc_samples - c * MC_CHUNK);
            let mut rng = stream_rng(seed, Stream::MonteCarlo, c as u64);
            (0..len)
                .filter(|_| {
                    let x1 = b1.sample(&mut rng);
                    let x2 = b2.as_ref().map_or(1.0, |d| d.sample(&mut rng));
                    x1 - x2 < threshold
                })
                .count()
        })
        .sum();

    let p = hits as f64 / mc_samples as f64;
    Ok(RankBound {
        f1_lower,
        prob_p: p,
        ci_half_width: 1.96 * (p * (1.0 - p) / mc_samples as f64).sqrt(),
        samples: mc_samples,
    })
}
