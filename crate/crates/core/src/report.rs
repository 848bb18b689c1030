//! JSON detection reports.
//!
//! Keys appear in struct declaration order, floats use shortest round-trip
//! formatting, and optional blocks are omitted when absent, so identical runs
//! produce identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::{majority, DetectorConfig};
use crate::error::{Error, Result};
use crate::eval::DetectionMetrics;
use crate::hoc::{HocFit, NoiseModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseFitSummary {
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl From<&HocFit> for NoiseFitSummary {
    fn from(fit: &HocFit) -> Self {
        Self {
            objective: fit.objective,
            iterations: fit.iterations,
            converged: fit.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub n_instances: usize,
    pub n_classes: usize,
    /// Final decision per instance; `true` means the label looks corrupted.
    pub flags: Vec<bool>,
    pub per_epoch_flags: Vec<Vec<bool>>,
    pub noisy_labels: Vec<usize>,
    /// Rank mode: mean score of each instance against its own label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    /// Rank mode: instances flagged per class (median over epochs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_model: Option<NoiseModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_fit: Option<NoiseFitSummary>,
    /// Present only when clean labels were supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<DetectionMetrics>,
    pub config: DetectorConfig,
}

impl DetectionReport {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_instances;
        if self.flags.len() != n || self.noisy_labels.len() != n {
            return Err(Error::Validation(
                "report vectors do not match n_instances".into(),
            ));
        }
        if self.per_epoch_flags.len() != self.config.epochs
            || self.per_epoch_flags.iter().any(|e| e.len() != n)
        {
            return Err(Error::Validation(
                "per-epoch flags do not match the epoch count".into(),
            ));
        }
        if majority(&self.per_epoch_flags) != self.flags {
            return Err(Error::Validation(
                "final flags are not the majority of per-epoch flags".into(),
            ));
        }
        Ok(())
    }

    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec(self).expect("report serializes");
        bytes.push(b'\n');
        bytes
    }
}

pub fn write_report(report: &DetectionReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_json_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<DetectionReport> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let report: DetectionReport = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    report.validate()?;
    Ok(report)
}
