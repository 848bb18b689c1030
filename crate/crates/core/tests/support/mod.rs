//! Independent reference implementations used as test oracles. Nothing here
//! calls into the code paths it is used to check.
#![allow(dead_code)]

use knnclean::hoc::ConsensusStats;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

/// O(N^2) k-NN: every pair, full sort by (sim desc, index asc).
pub fn naive_knn(rows: &[Vec<f64>], k: usize) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let n = rows.len();
    let mut ids = Vec::with_capacity(n);
    let mut sims = Vec::with_capacity(n);
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut s = 0.0;
            for t in 0..rows[i].len() {
                s += rows[i][t] * rows[j][t];
            }
            cand.push((s, j));
        }
        cand.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        ids.push(cand[..k].iter().map(|c| c.1).collect());
        sims.push(cand[..k].iter().map(|c| c.0).collect());
    }
    (ids, sims)
}

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
            + recurse(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, m, fm, whole, tol, 50)
}

/// `I_x(a, b)` as the ratio of two quadratures of the Beta kernel, with the
/// kernel scaled by its mode value to avoid underflow. Valid for `a, b >= 1`.
pub fn inc_beta_quadrature(x: f64, a: f64, b: f64) -> f64 {
    let mode = if a + b > 2.0 { (a - 1.0) / (a + b - 2.0) } else { 0.5 };
    let log_peak = (a - 1.0) * mode.max(1e-300).ln() + (b - 1.0) * (1.0 - mode).max(1e-300).ln();
    let kernel = move |t: f64| {
        if t <= 0.0 || t >= 1.0 {
            let v: f64 = if t <= 0.0 { (a == 1.0) as u8 as f64 } else { (b == 1.0) as u8 as f64 };
            return v * (-log_peak).exp();
        }
        ((a - 1.0) * t.ln() + (b - 1.0) * (1.0 - t).ln() - log_peak).exp()
    };
    // split at the mode so each piece is monotone
    let whole = adaptive_simpson(&kernel, 0.0, mode, 1e-15) + adaptive_simpson(&kernel, mode, 1.0, 1e-15);
    let part = if x <= mode {
        adaptive_simpson(&kernel, 0.0, x, 1e-15)
    } else {
        adaptive_simpson(&kernel, 0.0, mode, 1e-15) + adaptive_simpson(&kernel, mode, x, 1e-15)
    };
    part / whole
}

/// Exact consensus moments of `(p, T)`, computed term by term.
pub fn analytic_stats(p: &[f64], t: &[Vec<f64>]) -> ConsensusStats {
    let k = p.len();
    let mut nu1 = vec![0.0; k];
    let mut nu2 = vec![0.0; k * k];
    let mut nu3 = vec![0.0; k * k * k];
    for c in 0..k {
        for i in 0..k {
            nu1[i] += p[c] * t[c][i];
            for j in 0..k {
                nu2[i * k + j] += p[c] * t[c][i] * t[c][j];
                for l in 0..k {
                    nu3[(i * k + j) * k + l] += p[c] * t[c][i] * t[c][j] * t[c][l];
                }
            }
        }
    }
    ConsensusStats {
        n_classes: k,
        nu1,
        nu2,
        nu3,
    }
}

/// Random prior bounded away from zero and a diagonal-dominant transition
/// matrix (diagonal in [0.6, 0.9]).
pub fn random_noise_model(k: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut p: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    let t = (0..k)
        .map(|c| {
            let diag = rng.random_range(0.6..0.9);
            let mut off: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            off[c] = 0.0;
            let so: f64 = off.iter().sum();
            (0..k)
                .map(|j| if j == c { diag } else { (1.0 - diag) * off[j] / so })
                .collect()
        })
        .collect();
    (p, t)
}

pub fn linf(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `P(b1 - b2 < c)` by plain Monte Carlo, sampling `b1 ~ Beta(n_minus, 1)` by
/// inverse CDF and `b2 ~ Beta(alpha + 1, n_plus - alpha)` as a Gamma ratio.
pub fn mc_prob_oracle(n_minus: usize, n_plus: usize, alpha: usize, c: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ga = Gamma::new((alpha + 1) as f64, 1.0).unwrap();
    let gb = (alpha < n_plus).then(|| Gamma::new((n_plus - alpha) as f64, 1.0).unwrap());
    let inv = 1.0 / n_minus as f64;
    let mut hits = 0usize;
    for _ in 0..samples {
        let u: f64 = rng.random();
        let b1 = u.powf(inv);
        let b2 = match &gb {
            Some(gb) => {
                let x = ga.sample(&mut rng);
                let y = gb.sample(&mut rng);
                x / (x + y)
            }
            None => 1.0,
        };
        if b1 - b2 < c {
            hits += 1;
        }
    }
    hits as f64 / samples as f64
}

/// Same probability by quadrature: `int f_b2(y) * clamp(c + y)^n_minus dy`.
pub fn quad_prob_oracle(n_minus: usize, n_plus: usize, alpha: usize, c: f64) -> f64 {
    assert!(alpha < n_plus);
    let (a, b) = ((alpha + 1) as f64, (n_plus - alpha) as f64);
    let lb = ln_beta_by_quadrature(a, b);
    let integrand = move |y: f64| {
        if y <= 0.0 || y >= 1.0 {
            return 0.0;
        }
        let dens = ((a - 1.0) * y.ln() + (b - 1.0) * (1.0 - y).ln() - lb).exp();
        dens * (c + y).clamp(0.0, 1.0).powi(n_minus as i32)
    };
    // split at the kink points of the clamp
    let mut cuts = vec![0.0, 1.0, (-c).clamp(0.0, 1.0), (1.0 - c).clamp(0.0, 1.0)];
    let mode = if a + b > 2.0 { (a - 1.0) / (a + b - 2.0) } else { 0.5 };
    cuts.push(mode);
    cuts.sort_by(f64::total_cmp);
    cuts.windows(2)
        .map(|w| adaptive_simpson(&integrand, w[0], w[1], 1e-13))
        .sum()
}

fn ln_beta_by_quadrature(a: f64, b: f64) -> f64 {
    let mode = if a + b > 2.0 { (a - 1.0) / (a + b - 2.0) } else { 0.5 };
    let log_peak = (a - 1.0) * mode.max(1e-300).ln() + (b - 1.0) * (1.0 - mode).max(1e-300).ln();
    let kernel = move |t: f64| {
        if t <= 0.0 || t >= 1.0 {
            return 0.0;
        }
        ((a - 1.0) * t.ln() + (b - 1.0) * (1.0 - t).ln() - log_peak).exp()
    };
    let s = adaptive_simpson(&kernel, 0.0, mode, 1e-15) + adaptive_simpson(&kernel, mode, 1.0, 1e-15);
    s.ln() + log_peak
}

/// Standard-normal rows.
pub fn gaussian_rows(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// Random point on the K-simplex (flat Dirichlet).
pub fn random_simplex(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
