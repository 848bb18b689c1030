//! Exact cosine k-nearest-neighbour search and k-NN soft labels.
//!
//! The search is brute force: query rows are processed in blocks (in
//! parallel), candidate rows in cache-sized tiles, and each query keeps a
//! sorted top-k buffer. Candidates are ordered by similarity descending and
//! then by row index ascending, which is a total order, so the result does
//! not depend on tiling or on the number of threads.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

const QUERY_BLOCK: usize = 32;
const CANDIDATE_TILE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnIndex {
    features: FeatureMatrix,
    k: usize,
    ids: Vec<usize>,
    sims: Vec<f64>,
}

impl KnnIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.features.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unit-norm copy of the indexed features.
    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    /// Neighbours of row `n`, nearest first.
    pub fn neighbors(&self, n: usize) -> &[usize] {
        &self.ids[n * self.k..(n + 1) * self.k]
    }

    /// Cosine similarities matching [`KnnIndex::neighbors`].
    pub fn similarities(&self, n: usize) -> &[f64] {
        &self.sims[n * self.k..(n + 1) * self.k]
    }

    /// Keep only the nearest `k` neighbours of every row. Because ordering is
    /// total, this equals an index built directly with the smaller `k`.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k {
            return Err(Error::Config(format!(
                "cannot truncate a {}-NN index to k={k}",
                self.k
            )));
        }
        let n = self.len();
        let mut ids = Vec::with_capacity(n * k);
        let mut sims = Vec::with_capacity(n * k);
        for row in 0..n {
            ids.extend_from_slice(&self.neighbors(row)[..k]);
            sims.extend_from_slice(&self.similarities(row)[..k]);
        }
        Ok(Self {
            features: self.features.clone(),
            k,
            ids,
            sims,
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sorted buffer of the best `cap` candidates seen so far.
struct TopK {
    cap: usize,
    items: Vec<(f64, usize)>,
}

impl TopK {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            items: Vec::with_capacity(cap + 1),
        }
    }

    #[inline]
    fn precedes(a: (f64, usize), b: (f64, usize)) -> bool {
        a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
    }

    /// Lowest similarity that could still enter the buffer.
    #[inline]
    fn floor(&self) -> f64 {
        if self.items.len() < self.cap {
            f64::NEG_INFINITY
        } else {
            self.items[self.cap - 1].0
        }
    }

    #[inline]
    fn offer(&mut self, sim: f64, id: usize) {
        let cand = (sim, id);
        if self.items.len() == self.cap {
            match self.items.last() {
                Some(&worst) if !Self::precedes(cand, worst) => return,
                _ => {}
            }
        }
        let pos = self.items.partition_point(|&it| Self::precedes(it, cand));
        self.items.insert(pos, cand);
        self.items.truncate(self.cap);
    }
}

fn scan_tile_fixed<const D: usize>(query: &[f64], q: usize, first: usize, rows: &[f64], heap: &mut TopK) {
    let query: &[f64; D] = query.try_into().expect("row width");
    let mut floor = heap.floor();
    for (c, crow) in (first..).zip(rows.chunks_exact(D)) {
        let crow: &[f64; D] = crow.try_into().expect("row width");
        let sim = dot(query, crow);
        if sim >= floor && c != q {
            heap.offer(sim, c);
            floor = heap.floor();
        }
    }
}

fn scan_tile_dyn(query: &[f64], q: usize, first: usize, rows: &[f64], heap: &mut TopK) {
    let mut floor = heap.floor();
    for (c, crow) in (first..).zip(rows.chunks_exact(query.len())) {
        let sim = dot(query, crow);
        if sim >= floor && c != q {
            heap.offer(sim, c);
            floor = heap.floor();
        }
    }
}

/// Offer every row of a candidate tile to one query's buffer. Narrow rows get
/// a fully unrolled kernel; the summation order is the same either way.
fn scan_tile(query: &[f64], q: usize, first: usize, rows: &[f64], heap: &mut TopK) {
    macro_rules! dispatch {
        ($($d:literal)*) => {
            match query.len() {
                $($d => scan_tile_fixed::<$d>(query, q, first, rows, heap),)*
                _ => scan_tile_dyn(query, q, first, rows, heap),
            }
        };
    }
    dispatch!(1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16)
}

/// Exact k-NN under cosine similarity. Rows are L2-normalized first; the
/// query row itself is never its own neighbour.
pub fn build_index(features: &FeatureMatrix, k: usize) -> Result<KnnIndex> {
    let n = features.n_rows();
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "k must satisfy 1 <= k <= N-1, got k={k} with N={n}"
        )));
    }
    let features = features.normalized()?;
    let dim = features.n_cols();
    let data = features.data();

    let blocks: Vec<(Vec<usize>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .step_by(QUERY_BLOCK)
        .map(|start| {
            let end = (start + QUERY_BLOCK).min(n);
            let mut heaps: Vec<TopK> = (start..end).map(|_| TopK::new(k)).collect();
            for tile in (0..n).step_by(CANDIDATE_TILE) {
                let tile_end = (tile + CANDIDATE_TILE).min(n);
                let tile_rows = &data[tile * dim..tile_end * dim];
                for (q, heap) in (start..end).zip(heaps.iter_mut()) {
                    scan_tile(features.row(q), q, tile, tile_rows, heap);
                }
            }
            let mut ids = Vec::with_capacity((end - start) * k);
            let mut sims = Vec::with_capacity((end - start) * k);
            for heap in heaps {
                for (s, id) in heap.items {
                    ids.push(id);
                    sims.push(s);
                }
            }
            (ids, sims)
        })
        .collect();

    let mut ids = Vec::with_capacity(n * k);
    let mut sims = Vec::with_capacity(n * k);
    for (bi, bs) in blocks {
        ids.extend(bi);
        sims.extend(bs);
    }
    Ok(KnnIndex {
        features,
        k,
        ids,
        sims,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Uniform,
    /// Neighbour weight proportional to `max(cos, 0)`; the centre gets 1.
    Similarity,
}

/// Row-stochastic `N x K` matrix of neighbourhood label frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMatrix {
    n_classes: usize,
    values: Vec<f64>,
    weighting: Weighting,
}

impl SoftLabelMatrix {
    /// Wrap precomputed rows. Each row must be non-negative and sum to one.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_classes = rows.first().map_or(0, Vec::len);
        for (i, r) in rows.iter().enumerate() {
            let sum: f64 = r.iter().sum();
            if r.len() != n_classes || r.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "soft label row {i} is not on the {n_classes}-simplex"
                )));
            }
        }
        Ok(Self {
            n_classes,
            values: rows.concat(),
            weighting: Weighting::Uniform,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        if self.n_classes == 0 {
            0
        } else {
            self.values.len() / self.n_classes
        }
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_classes..(n + 1) * self.n_classes]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.n_classes)
    }
}

/// Soft label of every instance from its own label and its neighbours'.
///
/// With `include_self` the centre counts as one of `k + 1` observations.
pub fn knn_soft_labels(
    index: &KnnIndex,
    noisy_labels: &[usize],
    n_classes: usize,
    include_self: bool,
    weighting: Weighting,
) -> Result<SoftLabelMatrix> {
    let n = index.len();
    if noisy_labels.len() != n {
        return Err(Error::Validation(format!(
            "{} labels for an index over {n} rows",
            noisy_labels.len()
        )));
    }
    crate::dataset::check_label_range(noisy_labels, n_classes)?;

    let mut values = vec![0.0; n * n_classes];
    values
        .par_chunks_mut(n_classes)
        .enumerate()
        .for_each(|(row, out)| {
            let nbrs = index.neighbors(row);
            let sims = index.similarities(row);
            match weighting {
                Weighting::Uniform => {
                    let mut total = 0usize;
                    if include_self {
                        out[noisy_labels[row]] += 1.0;
                        total += 1;
                    }
                    for &m in nbrs {
                        out[noisy_labels[m]] += 1.0;
                        total += 1;
                    }
                    let total = total as f64;
                    out.iter_mut().for_each(|v| *v /= total);
                }
                Weighting::Similarity => {
                    let mut total = 0.0;
                    if include_self {
                        out[noisy_labels[row]] += 1.0;
                        total += 1.0;
                    }
                    for (&m, &s) in nbrs.iter().zip(sims) {
                        let w = s.max(0.0);
                        out[noisy_labels[m]] += w;
                        total += w;
                    }
                    if total > 0.0 {
                        out.iter_mut().for_each(|v| *v /= total);
                    } else {
                        // every neighbour is orthogonal or opposite: fall back to counts
                        out.iter_mut().for_each(|v| *v = 0.0);
                        for &m in nbrs {
                            out[noisy_labels[m]] += 1.0;
                        }
                        let k = nbrs.len() as f64;
                        out.iter_mut().for_each(|v| *v /= k);
                    }
                }
            }
        });
    Ok(SoftLabelMatrix {
        n_classes,
        values,
        weighting,
    })
}

/// Add i.i.d. `N(0, sigma^2)` noise to every entry and renormalize rows.
/// `sigma == 0` returns an exact copy.
pub fn perturb_features(features: &FeatureMatrix, sigma: f64, seed: u64) -> Result<FeatureMatrix> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("jitter sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(features.clone());
    }
    let d = features.n_cols();
    let mut data = features.data().to_vec();
    data.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
        let mut rng = stream_rng(seed, Stream::Jitter, i as u64);
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
    });
    FeatureMatrix::new(features.n_rows(), d, data)?.normalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        FeatureMatrix::new(n, d, data).unwrap()
    }

    #[test]
    fn three_points_on_a_circle() {
        let rows: Vec<Vec<f64>> = [0.0f64, 1.0, 90.0]
            .iter()
            .map(|deg| {
                let r = deg.to_radians();
                vec![r.cos(), r.sin()]
            })
            .collect();
        let idx = build_index(&FeatureMatrix::from_rows(&rows).unwrap(), 1).unwrap();
        let nn: Vec<usize> = (0..3).map(|i| idx.neighbors(i)[0]).collect();
        assert_eq!(nn, vec![1, 0, 1]);
    }

    #[test]
    fn duplicates_find_each_other() {
        let base = gaussian(6, 4, 3);
        let mut rows: Vec<Vec<f64>> = base.rows().map(<[f64]>::to_vec).collect();
        rows.extend(base.rows().map(<[f64]>::to_vec));
        let idx = build_index(&FeatureMatrix::from_rows(&rows).unwrap(), 1).unwrap();
        for i in 0..12 {
            assert_eq!(idx.neighbors(i)[0], (i + 6) % 12);
            assert!((idx.similarities(i)[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_neighbourhood_is_a_permutation() {
        let idx = build_index(&gaussian(5, 3, 11), 4).unwrap();
        for i in 0..5 {
            let mut ids = idx.neighbors(i).to_vec();
            ids.sort_unstable();
            let expected: Vec<usize> = (0..5).filter(|&j| j != i).collect();
            assert_eq!(ids, expected);
            let s = idx.similarities(i);
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        // rows 1..=3 are identical, so row 0 sees a three-way tie
        let rows = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let idx = build_index(&FeatureMatrix::from_rows(&rows).unwrap(), 2).unwrap();
        assert_eq!(idx.neighbors(0), &[1, 2]);
        assert_eq!(idx.neighbors(3), &[1, 2]);
    }

    #[test]
    fn k_out_of_range() {
        let f = gaussian(4, 2, 0);
        assert!(matches!(build_index(&f, 4), Err(Error::Config(_))));
        assert!(matches!(build_index(&f, 0), Err(Error::Config(_))));
    }

    #[test]
    fn truncation_matches_direct_build() {
        let f = gaussian(300, 5, 9);
        let big = build_index(&f, 12).unwrap();
        assert_eq!(big.truncated(4).unwrap(), build_index(&f, 4).unwrap());
    }

    fn index_with_labels(labels_k: usize) -> KnnIndex {
        // a line of points: neighbours of 0 are 1, 2, 3 ... in order
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let a = (i as f64 * 5.0).to_radians();
                vec![a.cos(), a.sin()]
            })
            .collect();
        build_index(&FeatureMatrix::from_rows(&rows).unwrap(), labels_k).unwrap()
    }

    #[test]
    fn soft_label_counts() {
        let idx = index_with_labels(2);
        assert_eq!(idx.neighbors(0), &[1, 2]);
        let labels = [0, 0, 1, 1, 1, 1];
        let soft = knn_soft_labels(&idx, &labels, 2, true, Weighting::Uniform).unwrap();
        assert_eq!(soft.row(0), &[2.0 / 3.0, 1.0 / 3.0]);

        let idx = index_with_labels(3);
        let labels = [1, 1, 2, 2, 0, 0];
        let soft = knn_soft_labels(&idx, &labels, 3, true, Weighting::Uniform).unwrap();
        assert_eq!(soft.row(0), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn uniform_labels_give_one_hot_rows() {
        let idx = build_index(&gaussian(40, 3, 1), 5).unwrap();
        let labels = vec![2; 40];
        for w in [Weighting::Uniform, Weighting::Similarity] {
            let soft = knn_soft_labels(&idx, &labels, 4, true, w).unwrap();
            for r in soft.rows() {
                assert_eq!(r, &[0.0, 0.0, 1.0, 0.0]);
            }
        }
    }

    #[test]
    fn similarity_weights_clamp_negatives() {
        let rows = vec![vec![1.0, 0.0], vec![-1.0, 0.1], vec![-1.0, -0.1]];
        let idx = build_index(&FeatureMatrix::from_rows(&rows).unwrap(), 2).unwrap();
        let soft = knn_soft_labels(&idx, &[0, 1, 1], 2, true, Weighting::Similarity).unwrap();
        assert_eq!(soft.row(0), &[1.0, 0.0]);
        let soft = knn_soft_labels(&idx, &[0, 1, 1], 2, false, Weighting::Similarity).unwrap();
        assert_eq!(soft.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn jitter_zero_is_identity_and_seeded() {
        let f = gaussian(20, 8, 2).normalized().unwrap();
        assert_eq!(perturb_features(&f, 0.0, 1).unwrap(), f);
        let a = perturb_features(&f, 0.01, 5).unwrap();
        let b = perturb_features(&f, 0.01, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, f);
        assert!(a.is_unit_norm());
        assert!(perturb_features(&f, -1.0, 0).is_err());
    }

    #[test]
    fn jitter_keeps_rows_close() {
        let f = gaussian(1000, 512, 4).normalized().unwrap();
        let g = perturb_features(&f, 0.01, 17).unwrap();
        let mean_cos: f64 =
            f.rows().zip(g.rows()).map(|(a, b)| dot(a, b)).sum::<f64>() / 1000.0;
        // E[cos] ~= 1/sqrt(1 + d * sigma^2) = 0.975 at d = 512
        assert!((mean_cos - (1.0f64 + 512.0 * 1e-4).sqrt().recip()).abs() < 2e-3, "{mean_cos}");
    }
}
