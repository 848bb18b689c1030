//! Training-free detection of corrupted labels.
//!
//! Given feature vectors and (possibly wrong) labels, each instance's label
//! is compared with the labels of its nearest neighbours in feature space.
//! Two detectors are provided: a local majority vote and a global per-class
//! ranking whose cut-off comes from an estimated noise transition matrix.
//! Detection is repeated over several epochs and combined by majority.
//!
//! Modules:
//! - [`dataset`]: feature and label I/O
//! - [`knn`]: exact cosine k-NN and soft labels
//! - [`detect`]: vote and rank detectors and the epoch pipeline
//! - [`hoc`]: noise-model estimation from neighbour consensus
//! - [`noise`]: synthetic noise injection
//! - [`eval`]: detection metrics and clusterability profiling
//! - [`bounds`]: numerical forms of the detector guarantees
//! - [`report`]: JSON detection reports

pub mod bounds;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod eval;
pub mod hoc;
pub mod knn;
pub mod noise;
pub mod report;
pub mod rng;
pub mod synth;

pub use dataset::{FeatureFormat, FeatureMatrix, LabeledDataset};
pub use detect::{run_pipeline, DetectorConfig, Method, NoiseSource};
pub use error::{Error, ErrorKind, Result};
pub use hoc::NoiseModel;
pub use report::DetectionReport;
