mod support;

use knnclean::dataset::FeatureMatrix;
use knnclean::detect::{cosine_score, rank_detect, rank_threshold, vote_detect};
use knnclean::eval::{delta_k, delta_k_profile};
use knnclean::knn::{build_index, knn_soft_labels, SoftLabelMatrix, Weighting};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::*;

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("non-zero mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.into_iter().map(|x| x / s).collect())
    })
}

fn labeled_cloud() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, usize, usize)> {
    (3usize..60, 1usize..8, 2usize..5, any::<u64>()).prop_flat_map(|(n, d, k, seed)| {
        (
            Just(n),
            Just(d),
            Just(k),
            prop::collection::vec(0..k, n),
            1..n,
            Just(seed),
        )
            .prop_map(|(n, d, nc, labels, kn, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let rows = gaussian_rows(n, d, &mut rng);
                (rows, labels, nc, kn)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn soft_labels_on_simplex(
        (rows, labels, nc, k) in labeled_cloud(),
        include_self in any::<bool>(),
        similarity in any::<bool>(),
    ) {
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let idx = build_index(&f, k).unwrap();
        let w = if similarity { Weighting::Similarity } else { Weighting::Uniform };
        let soft = knn_soft_labels(&idx, &labels, nc, include_self, w).unwrap();
        prop_assert_eq!(soft.len(), rows.len());
        for row in soft.rows() {
            prop_assert_eq!(row.len(), nc);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unanimous_neighbourhood_wins((rows, labels, nc, k) in labeled_cloud()) {
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let idx = build_index(&f, k).unwrap();
        let soft = knn_soft_labels(&idx, &labels, nc, true, Weighting::Uniform).unwrap();
        for n in 0..rows.len() {
            let j = labels[n];
            if idx.neighbors(n).iter().all(|&m| labels[m] == j) {
                let row = soft.row(n);
                prop_assert!((0..nc).filter(|&c| c != j).all(|c| row[c] < row[j]));
            }
        }
    }

    #[test]
    fn argmax_has_top_score(y in (2usize..12).prop_flat_map(simplex)) {
        let top = (0..y.len()).max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
        let unique = y.iter().enumerate().all(|(j, &v)| j == top || v < y[top]);
        prop_assume!(unique);
        let best = cosine_score(&y, top).unwrap();
        for j in 0..y.len() {
            if j != top {
                prop_assert!(best > cosine_score(&y, j).unwrap());
            }
        }
    }

    #[test]
    fn moving_mass_away_lowers_score(
        y in (2usize..12).prop_flat_map(simplex),
        from in any::<prop::sample::Index>(),
        to in any::<prop::sample::Index>(),
        frac in 0.01f64..1.0,
    ) {
        let k = y.len();
        let j = from.index(k);
        let other = to.index(k);
        prop_assume!(other != j && y[j] > 1e-6);
        let eps = frac * y[j];
        let mut moved = y.clone();
        moved[j] -= eps;
        moved[other] += eps;
        prop_assert!(cosine_score(&moved, j).unwrap() < cosine_score(&y, j).unwrap());
    }

    #[test]
    fn vote_ignores_positive_scale(
        rows in (2usize..7).prop_flat_map(|k| prop::collection::vec(simplex(k), 1..40)),
        scale in 0.01f64..100.0,
        seed in any::<u64>(),
    ) {
        let k = rows[0].len();
        let labels: Vec<usize> = (0..rows.len()).map(|i| i % k).collect();
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let s: Vec<f64> = r.iter().map(|v| v * scale).collect();
                let t: f64 = s.iter().sum();
                s.into_iter().map(|v| v / t).collect()
            })
            .collect();
        let a = vote_detect(&SoftLabelMatrix::from_rows(&rows).unwrap(), &labels, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = vote_detect(&SoftLabelMatrix::from_rows(&scaled).unwrap(), &labels, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        // ties can be broken differently only if rescaling changed which entries tie
        for (n, (x, y)) in a.iter().zip(&b).enumerate() {
            let r = &rows[n];
            let max = r.iter().cloned().fold(f64::MIN, f64::max);
            if r.iter().filter(|&&v| v == max).count() == 1 {
                prop_assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn rank_flags_match_thresholds(
        (rows, labels) in (2usize..6).prop_flat_map(|k| {
            prop::collection::vec(simplex(k), 1..80).prop_flat_map(move |rows| {
                let n = rows.len();
                (Just(rows), prop::collection::vec(0..k, n))
            })
        }),
        post_seed in any::<u64>(),
    ) {
        let k = rows[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(post_seed);
        let posterior: Vec<f64> = (0..k).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let soft = SoftLabelMatrix::from_rows(&rows).unwrap();
        let out = rank_detect(&soft, &labels, &posterior).unwrap();
        let mut expected = 0;
        for j in 0..k {
            let nj = labels.iter().filter(|&&l| l == j).count();
            prop_assert_eq!(out.thresholds[j], rank_threshold(posterior[j], nj));
            prop_assert_eq!(out.thresholds[j], ((1.0 - posterior[j]) * nj as f64 + 1e-9).floor() as usize);
            expected += out.thresholds[j];
            // flagged members of class j have the lowest scores
            let mut members: Vec<usize> = (0..labels.len()).filter(|&n| labels[n] == j).collect();
            members.sort_by(|&a, &b| out.scores[a].total_cmp(&out.scores[b]).then(a.cmp(&b)));
            for (rank, &n) in members.iter().enumerate() {
                prop_assert_eq!(out.flags[n], rank < out.thresholds[j]);
            }
        }
        prop_assert_eq!(out.flags.iter().filter(|&&f| f).count(), expected);
    }

    #[test]
    fn delta_k_non_decreasing(seed in any::<u64>(), n in 30usize..150, nc in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = gaussian_rows(n, 4, &mut rng);
        let clean: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % nc).collect();
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let ks: Vec<usize> = (1..=20).collect();
        let profile = delta_k_profile(&f, &clean, &ks).unwrap();
        for w in profile.windows(2) {
            prop_assert!(w[1].1 >= w[0].1, "{:?}", w);
        }
        prop_assert_eq!(profile[4].1, delta_k(&f, &clean, 5).unwrap());
    }
}

#[test]
fn paper_example_scores() {
    assert!((cosine_score(&[0.6, 0.4, 0.0], 0).unwrap() - 0.832).abs() < 0.001);
    assert!((cosine_score(&[0.6, 0.4, 0.0], 1).unwrap() - 0.555).abs() < 0.001);
    assert!((cosine_score(&[0.34, 0.33, 0.33], 0).unwrap() - 0.589).abs() < 0.001);
}
