use knnclean::dataset::FeatureMatrix;
use knnclean::eval::{delta_k, detection_metrics};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn confusion(flags: &[bool], noisy: &[usize], clean: &[usize]) -> [[usize; 2]; 2] {
    // [flagged][corrupted]
    let mut m = [[0; 2]; 2];
    for i in 0..flags.len() {
        m[flags[i] as usize][(noisy[i] != clean[i]) as usize] += 1;
    }
    m
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p > 0.0 && r > 0.0 {
        2.0 / (1.0 / p + 1.0 / r)
    } else {
        0.0
    }
}

proptest! {
    #[test]
    fn matches_confusion_matrix(
        rows in prop::collection::vec((any::<bool>(), 0usize..3, 0usize..3), 1..200)
    ) {
        let flags: Vec<bool> = rows.iter().map(|r| r.0).collect();
        let noisy: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let clean: Vec<usize> = rows.iter().map(|r| r.2).collect();
        let m = confusion(&flags, &noisy, &clean);
        let got = detection_metrics(&flags, &noisy, &clean).unwrap();
        prop_assert_eq!(got.tp, m[1][1]);
        prop_assert_eq!(got.fp, m[1][0]);
        prop_assert_eq!(got.fn_, m[0][1]);
        prop_assert_eq!(got.corrupted_total, m[1][1] + m[0][1]);
        if got.corrupted_total == 0 {
            prop_assert!(got.recall.is_none() && got.f1.is_none());
        } else {
            let p = if m[1][0] + m[1][1] == 0 { 0.0 } else { m[1][1] as f64 / (m[1][0] + m[1][1]) as f64 };
            let r = m[1][1] as f64 / (m[1][1] + m[0][1]) as f64;
            prop_assert!((got.precision.unwrap() - p).abs() < 1e-12);
            prop_assert!((got.recall.unwrap() - r).abs() < 1e-12);
            prop_assert!((got.f1.unwrap() - harmonic(p, r)).abs() < 1e-12);
        }
    }
}

#[test]
fn degenerate_silent_detector() {
    let n = 1000;
    let clean: Vec<usize> = vec![0; n];
    let noisy: Vec<usize> = (0..n).map(|i| (i % 5 == 0) as usize).collect();
    let m = detection_metrics(&vec![false; n], &noisy, &clean).unwrap();
    assert_eq!(m.f1, Some(0.0));
    let clean_f1 = m.clean.f1.unwrap();
    assert!((clean_f1 - 2.0 / (1.0 / 0.8 + 1.0)).abs() < 1e-12);
    assert!((clean_f1 - 0.89).abs() < 0.005);
}

#[test]
fn random_labels_violate_half_the_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 20_000;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let clean: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let f = FeatureMatrix::from_rows(&rows).unwrap();
    let d = delta_k(&f, &clean, 1).unwrap();
    assert!((d - 0.5).abs() < 0.02, "{d}");
}
