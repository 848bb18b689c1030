//! Vote and rank detectors and the multi-epoch detection pipeline.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{check_label_range, LabeledDataset};
use crate::error::{Error, Result};
use crate::eval::detection_metrics;
use crate::hoc::{consensus_stats, fit_noise_model, posterior_clean, HocConfig, HocFit, NoiseModel};
use crate::knn::{build_index, knn_soft_labels, perturb_features, SoftLabelMatrix, Weighting};
use crate::report::{DetectionReport, NoiseFitSummary};
use crate::rng::{derive_seed, stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Vote,
    Rank,
}

/// Where the rank detector gets `P(clean | noisy)` from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseSource {
    /// Estimate from the data with [`crate::hoc`].
    #[default]
    Hoc,
    Supplied { model: NoiseModel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub method: Method,
    pub k: usize,
    /// Number of detection rounds; must be odd.
    pub epochs: usize,
    pub seed: u64,
    pub weighting: Weighting,
    pub include_self: bool,
    /// Per-entry std of the feature jitter applied in each epoch.
    pub jitter_sigma: f64,
    pub noise_source: NoiseSource,
    pub hoc: HocConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            method: Method::Vote,
            k: 10,
            epochs: 21,
            seed: 0,
            weighting: Weighting::Uniform,
            include_self: true,
            jitter_sigma: 0.0,
            noise_source: NoiseSource::Hoc,
            hoc: HocConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self, n: usize, n_classes: usize) -> Result<()> {
        if self.epochs == 0 || self.epochs.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "epochs must be a positive odd number, got {}",
                self.epochs
            )));
        }
        if self.k == 0 || self.k >= n {
            return Err(Error::Config(format!(
                "k must satisfy 1 <= k <= N-1, got k={} with N={n}",
                self.k
            )));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "jitter sigma must be >= 0, got {}",
                self.jitter_sigma
            )));
        }
        if self.method == Method::Rank {
            match &self.noise_source {
                NoiseSource::Hoc if n < 3 => {
                    return Err(Error::Config(
                        "noise estimation needs at least 3 instances".into(),
                    ))
                }
                NoiseSource::Supplied { model } => {
                    model.validate()?;
                    if model.n_classes() != n_classes {
                        return Err(Error::Config(format!(
                            "noise model has {} classes, data has {n_classes}",
                            model.n_classes()
                        )));
                    }
                }
                NoiseSource::Hoc => {}
            }
        }
        Ok(())
    }
}

/// Instances grouped by noisy label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPartition {
    members: Vec<Vec<usize>>,
}

impl ClassPartition {
    pub fn from_labels(labels: &[usize], n_classes: usize) -> Result<Self> {
        check_label_range(labels, n_classes)?;
        let mut members = vec![Vec::new(); n_classes];
        for (n, &l) in labels.iter().enumerate() {
            members[l].push(n);
        }
        Ok(Self { members })
    }

    pub fn members(&self, class: usize) -> &[usize] {
        &self.members[class]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.members.len()
    }
}

/// Index of the largest entry; exact ties are broken uniformly at random.
pub fn argmax_random_tie<R: Rng>(values: &[f64], rng: &mut R) -> usize {
    let mut best = 0;
    let mut ties = 1u32;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
            ties = 1;
        } else if v == values[best] {
            ties += 1;
            if rng.random_range(0..ties) == 0 {
                best = i;
            }
        }
    }
    best
}

/// Flag instances whose neighbourhood majority disagrees with their label.
pub fn vote_detect<R: Rng>(soft: &SoftLabelMatrix, noisy_labels: &[usize], rng: &mut R) -> Result<Vec<bool>> {
    if soft.len() != noisy_labels.len() {
        return Err(Error::Validation(format!(
            "{} soft labels for {} noisy labels",
            soft.len(),
            noisy_labels.len()
        )));
    }
    Ok(soft
        .rows()
        .zip(noisy_labels)
        .map(|(row, &y)| argmax_random_tie(row, rng) != y)
        .collect())
}

/// Cosine between a soft label and the one-hot vector of `class`:
/// `y[class] / ||y||_2`.
pub fn cosine_score(soft_label: &[f64], class: usize) -> Result<f64> {
    let norm = soft_label.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Domain("cosine score of a zero vector".into()));
    }
    let v = soft_label.get(class).ok_or_else(|| {
        Error::Domain(format!(
            "class {class} out of range for a {}-class soft label",
            soft_label.len()
        ))
    })?;
    Ok(v / norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankOutcome {
    pub flags: Vec<bool>,
    /// Score of each instance against its own noisy label.
    pub scores: Vec<f64>,
    /// Number flagged per class.
    pub thresholds: Vec<usize>,
}

/// `floor((1 - posterior) * count)`, with slack for representation error so
/// that e.g. `(1 - 0.9) * 10` yields 1.
pub fn rank_threshold(posterior: f64, count: usize) -> usize {
    let raw = (1.0 - posterior) * count as f64;
    ((raw + 1e-9).floor().max(0.0) as usize).min(count)
}

/// Within each noisy class, flag the lowest-scoring instances. The number
/// flagged in class `j` is [`rank_threshold`] of `P(clean = j | noisy = j)`.
/// Equal scores are ordered by instance index.
pub fn rank_detect(soft: &SoftLabelMatrix, noisy_labels: &[usize], posterior: &[f64]) -> Result<RankOutcome> {
    let n_classes = soft.n_classes();
    if soft.len() != noisy_labels.len() {
        return Err(Error::Validation(format!(
            "{} soft labels for {} noisy labels",
            soft.len(),
            noisy_labels.len()
        )));
    }
    if posterior.len() != n_classes {
        return Err(Error::Validation(format!(
            "{} posterior entries for {n_classes} classes",
            posterior.len()
        )));
    }
    let partition = ClassPartition::from_labels(noisy_labels, n_classes)?;
    let scores = soft
        .rows()
        .zip(noisy_labels)
        .map(|(row, &y)| cosine_score(row, y))
        .collect::<Result<Vec<f64>>>()?;

    let mut flags = vec![false; noisy_labels.len()];
    let mut thresholds = Vec::with_capacity(n_classes);
    for (j, &post) in posterior.iter().enumerate() {
        let post = if (0.0..=1.0).contains(&post) {
            post
        } else {
            log::warn!("posterior {post} for class {j} clipped to [0, 1]");
            post.clamp(0.0, 1.0)
        };
        let mut order = partition.members(j).to_vec();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let cut = rank_threshold(post, order.len());
        for &n in &order[..cut] {
            flags[n] = true;
        }
        thresholds.push(cut);
    }
    Ok(RankOutcome {
        flags,
        scores,
        thresholds,
    })
}

/// Strict majority: flagged in more than half of the epochs.
pub fn majority(per_epoch: &[Vec<bool>]) -> Vec<bool> {
    let m = per_epoch.len();
    let n = per_epoch.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| 2 * per_epoch.iter().filter(|e| e[i]).count() > m)
        .collect()
}

struct RankState {
    posterior: Vec<f64>,
    model: NoiseModel,
    fit: Option<HocFit>,
}

/// Everything one epoch produces.
struct EpochResult {
    flags: Vec<bool>,
    rank: Option<(RankOutcome, RankState)>,
}

struct Ctx<'a> {
    data: &'a LabeledDataset,
    cfg: &'a DetectorConfig,
    counts: Vec<usize>,
}

impl Ctx<'_> {
    fn soft_and_rank_state(&self, features_seed: Option<u64>) -> Result<(SoftLabelMatrix, Option<RankState>)> {
        let features = match features_seed {
            Some(seed) => perturb_features(&self.data.features, self.cfg.jitter_sigma, seed)?,
            None => self.data.features.clone(),
        };
        let needs_hoc =
            self.cfg.method == Method::Rank && matches!(self.cfg.noise_source, NoiseSource::Hoc);
        let index_k = if needs_hoc { self.cfg.k.max(2) } else { self.cfg.k };
        let index = build_index(&features, index_k)?;
        let state = match (&self.cfg.method, &self.cfg.noise_source) {
            (Method::Vote, _) => None,
            (Method::Rank, NoiseSource::Hoc) => {
                let stats = consensus_stats(&index, &self.data.noisy_labels, self.data.n_classes)?;
                let seed = derive_seed(self.cfg.seed, Stream::HocInit, features_seed.unwrap_or(0));
                let fit = fit_noise_model(&stats, &self.cfg.hoc, seed)?;
                let posterior = posterior_clean(&fit.model, &self.counts)?;
                Some(RankState {
                    posterior,
                    model: fit.model.clone(),
                    fit: Some(fit),
                })
            }
            (Method::Rank, NoiseSource::Supplied { model }) => {
                let mut model = model.clone();
                if model.noisy_marginal.is_empty() {
                    let n = self.data.len() as f64;
                    model.noisy_marginal = self.counts.iter().map(|&c| c as f64 / n).collect();
                }
                let posterior = posterior_clean(&model, &self.counts)?;
                Some(RankState {
                    posterior,
                    model,
                    fit: None,
                })
            }
        };
        let index = if index_k == self.cfg.k {
            index
        } else {
            index.truncated(self.cfg.k)?
        };
        let soft = knn_soft_labels(
            &index,
            &self.data.noisy_labels,
            self.data.n_classes,
            self.cfg.include_self,
            self.cfg.weighting,
        )?;
        Ok((soft, state))
    }

    fn detect(&self, soft: &SoftLabelMatrix, state: Option<RankState>, epoch: usize) -> Result<EpochResult> {
        match state {
            None => {
                let mut rng = stream_rng(self.cfg.seed, Stream::VoteTies, epoch as u64);
                Ok(EpochResult {
                    flags: vote_detect(soft, &self.data.noisy_labels, &mut rng)?,
                    rank: None,
                })
            }
            Some(state) => {
                let outcome = rank_detect(soft, &self.data.noisy_labels, &state.posterior)?;
                Ok(EpochResult {
                    flags: outcome.flags.clone(),
                    rank: Some((outcome, state)),
                })
            }
        }
    }
}

/// Run the detector for `config.epochs` rounds and combine the rounds by
/// strict majority.
///
/// Without jitter every round sees the same neighbourhoods, so the index,
/// soft labels and noise estimate are computed once and rounds differ only in
/// vote tie-breaking. With jitter each round perturbs the features from its
/// own seed and re-estimates everything.
pub fn run_pipeline(data: &LabeledDataset, config: &DetectorConfig) -> Result<DetectionReport> {
    config.validate(data.len(), data.n_classes)?;
    let ctx = Ctx {
        data,
        cfg: config,
        counts: ClassPartition::from_labels(&data.noisy_labels, data.n_classes)?.counts(),
    };

    let epochs: Vec<EpochResult> = if config.jitter_sigma == 0.0 {
        let (soft, state) = ctx.soft_and_rank_state(None)?;
        match state {
            None => (0..config.epochs)
                .into_par_iter()
                .map(|m| ctx.detect(&soft, None, m))
                .collect::<Result<_>>()?,
            Some(state) => {
                // ranking is deterministic, so one pass stands for every epoch
                let first = ctx.detect(&soft, Some(state), 0)?;
                let flags = first.flags.clone();
                let mut all = vec![first];
                all.extend((1..config.epochs).map(|_| EpochResult {
                    flags: flags.clone(),
                    rank: None,
                }));
                all
            }
        }
    } else {
        (0..config.epochs)
            .into_par_iter()
            .map(|m| {
                let seed = derive_seed(config.seed, Stream::Epoch, m as u64);
                let (soft, state) = ctx.soft_and_rank_state(Some(seed))?;
                ctx.detect(&soft, state, m)
            })
            .collect::<Result<_>>()?
    };

    let per_epoch_flags: Vec<Vec<bool>> = epochs.iter().map(|e| e.flags.clone()).collect();
    let flags = majority(&per_epoch_flags);
    let ranked: Vec<&(RankOutcome, RankState)> = epochs.iter().filter_map(|e| e.rank.as_ref()).collect();

    let (scores, thresholds, posterior, noise_model, noise_fit) = match ranked.first() {
        None => (None, None, None, None, None),
        Some((_, state)) => {
            let r = ranked.len() as f64;
            let n = data.len();
            let scores: Vec<f64> = (0..n)
                .map(|i| ranked.iter().map(|(o, _)| o.scores[i]).sum::<f64>() / r)
                .collect();
            let thresholds: Vec<usize> = (0..data.n_classes)
                .map(|j| {
                    let mut v: Vec<usize> = ranked.iter().map(|(o, _)| o.thresholds[j]).collect();
                    v.sort_unstable();
                    v[v.len() / 2]
                })
                .collect();
            (
                Some(scores),
                Some(thresholds),
                Some(state.posterior.clone()),
                Some(state.model.clone()),
                state.fit.as_ref().map(NoiseFitSummary::from),
            )
        }
    };

    let evaluation = match &data.clean_labels {
        Some(clean) => Some(detection_metrics(&flags, &data.noisy_labels, clean)?),
        None => None,
    };

    Ok(DetectionReport {
        n_instances: data.len(),
        n_classes: data.n_classes,
        flags,
        per_epoch_flags,
        noisy_labels: data.noisy_labels.clone(),
        scores,
        thresholds,
        posterior,
        noise_model,
        noise_fit,
        evaluation,
        config: config.clone(),
    })
}
