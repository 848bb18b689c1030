//! Detection quality, treating "corrupted" as the positive class, and the
//! empirical clusterability profile of a feature set.

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::knn::{build_index, KnnIndex};

/// Precision/recall/F1 for one positive class. `None` marks an undefined
/// value and serializes as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub corrupted_total: usize,
    /// Same scores with "clean" as the positive class.
    pub clean: ClassScores,
}

fn scores(tp: usize, fp: usize, fn_: usize) -> ClassScores {
    let positives = tp + fn_;
    if positives == 0 {
        return ClassScores {
            precision: None,
            recall: None,
            f1: None,
        };
    }
    let flagged = tp + fp;
    let precision = if flagged == 0 {
        0.0
    } else {
        tp as f64 / flagged as f64
    };
    let recall = tp as f64 / positives as f64;
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 / (precision.recip() + recall.recip())
    };
    ClassScores {
        precision: Some(precision),
        recall: Some(recall),
        f1: Some(f1),
    }
}

/// Score detector flags against the clean labels.
///
/// All corrupted-class metrics are `None` when nothing is corrupted.
pub fn detection_metrics(
    flags: &[bool],
    noisy_labels: &[usize],
    clean_labels: &[usize],
) -> Result<DetectionMetrics> {
    if flags.len() != noisy_labels.len() || noisy_labels.len() != clean_labels.len() {
        return Err(Error::Validation(format!(
            "length mismatch: {} flags, {} noisy labels, {} clean labels",
            flags.len(),
            noisy_labels.len(),
            clean_labels.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for ((&flag, &noisy), &clean) in flags.iter().zip(noisy_labels).zip(clean_labels) {
        match (flag, noisy != clean) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let corrupted = scores(tp, fp, fn_);
    Ok(DetectionMetrics {
        precision: corrupted.precision,
        recall: corrupted.recall,
        f1: corrupted.f1,
        tp,
        fp,
        fn_,
        corrupted_total: tp + fn_,
        // for the clean class, an unflagged clean instance is a true positive
        clean: scores(tn, fn_, fp),
    })
}

/// Fraction of instances whose `k` nearest neighbours do not all share the
/// instance's clean label.
pub fn delta_k(features: &FeatureMatrix, clean_labels: &[usize], k: usize) -> Result<f64> {
    let index = build_index(features, k)?;
    delta_k_from_index(&index, clean_labels, k)
}

/// Like [`delta_k`] but reuses an index built with at least `k` neighbours.
pub fn delta_k_from_index(index: &KnnIndex, clean_labels: &[usize], k: usize) -> Result<f64> {
    if clean_labels.len() != index.len() {
        return Err(Error::Validation(format!(
            "{} clean labels for an index over {} rows",
            clean_labels.len(),
            index.len()
        )));
    }
    if k == 0 || k > index.k() {
        return Err(Error::Config(format!(
            "k={k} outside the index range 1..={}",
            index.k()
        )));
    }
    let violations = (0..index.len())
        .filter(|&n| {
            index.neighbors(n)[..k]
                .iter()
                .any(|&m| clean_labels[m] != clean_labels[n])
        })
        .count();
    Ok(violations as f64 / index.len() as f64)
}

/// `(k, delta_k)` for every requested `k`, sharing one index.
pub fn delta_k_profile(
    features: &FeatureMatrix,
    clean_labels: &[usize],
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let k_max = ks.iter().copied().max().ok_or_else(|| {
        Error::Config("profile needs at least one k".into())
    })?;
    let index = build_index(features, k_max)?;
    ks.iter()
        .map(|&k| Ok((k, delta_k_from_index(&index, clean_labels, k)?)))
        .collect()
}
