use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use knnclean::bounds::{self, RankBoundInput, VoteBoundInput};
use knnclean::dataset::{self, infer_num_classes, FeatureFormat, FeatureMatrix, LabeledDataset};
use knnclean::detect::{run_pipeline, DetectorConfig, Method, NoiseSource};
use knnclean::eval::{delta_k_profile, detection_metrics};
use knnclean::hoc::{HocConfig, NoiseModel};
use knnclean::knn::Weighting;
use knnclean::noise::{self, NoiseKind, NoiseSpec};
use knnclean::report::{read_report, write_report};
use knnclean::synth::gaussian_mixture;

#[derive(Debug)]
pub enum CliError {
    Core(knnclean::Error),
    Config(String),
    Internal(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<knnclean::Error> for CliError {
    fn from(e: knnclean::Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Detect corrupted labels from k-NN consensus in feature space.
///
/// Class labels are 0-based integers throughout.
#[derive(Debug, Parser)]
#[command(name = "knnclean", version)]
pub struct Cli {
    /// Cap on worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Log informational messages to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Flag instances whose labels look corrupted and write a JSON report.
    Detect(DetectArgs),
    /// Inject synthetic label noise into clean labels.
    Inject(InjectArgs),
    /// Score a detection report against clean labels.
    Eval(EvalArgs),
    /// Tabulate the clusterability violation rate delta_k against k (TSV).
    ProfileK(ProfileArgs),
    /// Evaluate the vote and rank detection bounds.
    Bound(BoundArgs),
    /// Generate a Gaussian-mixture dataset for trying the pipeline.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Raw,
}

#[derive(Debug, Args)]
pub struct FeatureInput {
    /// Feature file: `.csv`, or raw little-endian f32 with a `<name>.json` sidecar.
    #[arg(long)]
    pub features: PathBuf,

    /// Override the format inferred from the file extension.
    #[arg(long, value_enum)]
    pub features_format: Option<FormatArg>,

    /// Keep feature rows as stored instead of scaling them to unit L2 norm.
    #[arg(long)]
    pub no_normalize: bool,
}

impl FeatureInput {
    fn load(&self) -> CliResult<FeatureMatrix> {
        let format = match self.features_format {
            Some(FormatArg::Csv) => FeatureFormat::Csv,
            Some(FormatArg::Raw) => FeatureFormat::Raw,
            None => FeatureFormat::from_path(&self.features),
        };
        let features = dataset::load_features(&self.features, format)?;
        Ok(if self.no_normalize {
            features
        } else {
            features.normalized()?
        })
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Vote,
    Rank,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightingArg {
    Uniform,
    Similarity,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NoiseSourceArg {
    Hoc,
    Supplied,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub input: FeatureInput,

    /// Noisy labels, one 0-based class index per line.
    #[arg(long)]
    pub labels: PathBuf,

    /// Read labels from this named column of a CSV file with a header row.
    #[arg(long)]
    pub label_column: Option<String>,

    /// Number of classes (default: largest label + 1).
    #[arg(long)]
    pub num_classes: Option<usize>,

    /// Clean labels; when given the report carries an evaluation block.
    #[arg(long)]
    pub clean: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "vote")]
    pub method: MethodArg,

    /// Neighbours per instance.
    #[arg(long, default_value_t = 10)]
    pub k: usize,

    /// Detection rounds combined by majority; must be odd.
    #[arg(long, default_value_t = 21)]
    pub epochs: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Std of Gaussian feature jitter applied in each round.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,

    #[arg(long, value_enum, default_value = "uniform")]
    pub weighting: WeightingArg,

    /// Build soft labels from the k neighbours only, without the instance's own label.
    #[arg(long)]
    pub exclude_self: bool,

    /// Where rank mode gets P(clean | noisy) from.
    #[arg(long, value_enum, default_value = "hoc")]
    pub noise_source: NoiseSourceArg,

    /// JSON noise model (`prior`, `transition`, optional `noisy_marginal`) for `--noise-source supplied`.
    #[arg(long)]
    pub noise_model: Option<PathBuf>,

    /// Random restarts of the noise-model fit.
    #[arg(long, default_value_t = 10)]
    pub hoc_restarts: usize,

    /// Iteration cap of the noise-model fit.
    #[arg(long, default_value_t = 1500)]
    pub hoc_iters: usize,

    /// Report destination.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Symmetric,
    Asymmetric,
    Instance,
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    /// Clean labels, one per line.
    #[arg(long)]
    pub labels: PathBuf,

    #[arg(long, value_enum)]
    pub kind: KindArg,

    /// Flip probability in [0, 1).
    #[arg(long)]
    pub eta: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub num_classes: Option<usize>,

    /// Features, required for `--kind instance`.
    #[arg(long)]
    pub features: Option<PathBuf>,

    #[arg(long, value_enum)]
    pub features_format: Option<FormatArg>,

    #[arg(long)]
    pub no_normalize: bool,

    /// Std of the per-instance flip rate for instance-dependent noise.
    #[arg(long, default_value_t = noise::DEFAULT_RATE_STD)]
    pub rate_std: f64,

    /// Noisy label output.
    #[arg(long)]
    pub out: PathBuf,

    /// Manifest output (default: stdout).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub report: PathBuf,

    /// Clean labels, one per line.
    #[arg(long)]
    pub clean: PathBuf,

    /// Metrics output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub input: FeatureInput,

    /// Clean labels, one per line.
    #[arg(long)]
    pub clean: PathBuf,

    /// Profile k = 1..=k-max.
    #[arg(long, default_value_t = 20, conflicts_with = "ks")]
    pub k_max: usize,

    /// Explicit comma-separated list of k values.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,

    /// Table output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("which").required(true).args(["vote_bound", "breakeven", "rank_bound"])))]
pub struct BoundArgs {
    /// Lower bound on the probability that the k-NN majority vote is correct.
    #[arg(long)]
    pub vote_bound: bool,

    /// delta_{k2} at which moving from k1 to k2 stops helping the vote bound.
    #[arg(long)]
    pub breakeven: bool,

    /// F1 lower bound of rank detection and the probability it holds.
    #[arg(long)]
    pub rank_bound: bool,

    #[arg(long, required_if_eq("vote_bound", "true"))]
    pub k: Option<usize>,

    /// Noise-rate upper bound e.
    #[arg(long, required_if_eq_any([("vote_bound", "true"), ("breakeven", "true")]))]
    pub e: Option<f64>,

    /// delta_k (vote bound) or delta_{k1} (break-even).
    #[arg(long, required_if_eq_any([("vote_bound", "true"), ("breakeven", "true")]))]
    pub delta: Option<f64>,

    #[arg(long, required_if_eq("breakeven", "true"))]
    pub k1: Option<usize>,

    #[arg(long, required_if_eq("breakeven", "true"))]
    pub k2: Option<usize>,

    /// Corrupted instances in the class.
    #[arg(long, required_if_eq("rank_bound", "true"))]
    pub n_minus: Option<usize>,

    /// Clean instances in the class.
    #[arg(long, required_if_eq("rank_bound", "true"))]
    pub n_plus: Option<usize>,

    #[arg(long, required_if_eq("rank_bound", "true"))]
    pub alpha: Option<usize>,

    /// Gap between mean clean and mean corrupted scores.
    #[arg(long, required_if_eq("rank_bound", "true"), allow_hyphen_values = true)]
    pub mu_gap: Option<f64>,

    /// Margin subtracted from the score gap.
    #[arg(long, required_if_eq("rank_bound", "true"))]
    pub gap_margin: Option<f64>,

    /// Tail decay rate v.
    #[arg(long, required_if_eq("rank_bound", "true"))]
    pub v: Option<f64>,

    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// JSON output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3000)]
    pub n: usize,

    #[arg(long, default_value_t = 10)]
    pub dim: usize,

    #[arg(long, default_value_t = 3)]
    pub classes: usize,

    /// Distance between class means in units of the within-class std.
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Feature output; `.csv` or raw f32 (sidecar written next to it).
    #[arg(long)]
    pub features_out: PathBuf,

    #[arg(long)]
    pub labels_out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    match cli.command {
        Command::Detect(a) => detect(a),
        Command::Inject(a) => inject(a),
        Command::Eval(a) => eval(a),
        Command::ProfileK(a) => profile_k(a),
        Command::Bound(a) => bound(a),
        Command::Synth(a) => synth(a),
    }
}

fn write_text(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| {
            CliError::Core(knnclean::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn resolve_classes(labels: &[usize], given: Option<usize>) -> CliResult<usize> {
    let inferred = infer_num_classes(labels);
    match given {
        Some(k) if k < inferred => Err(CliError::Core(knnclean::Error::Validation(format!(
            "--num-classes {k} but labels go up to {}",
            inferred - 1
        )))),
        Some(k) => Ok(k),
        None => Ok(inferred),
    }
}

fn detect(a: DetectArgs) -> CliResult {
    let features = a.input.load()?;
    let noisy = dataset::load_labels(&a.labels, a.label_column.as_deref())?;
    let clean = a
        .clean
        .as_deref()
        .map(|p| dataset::load_labels(p, None))
        .transpose()?;
    let mut n_classes = resolve_classes(&noisy, a.num_classes)?;
    if let (None, Some(c)) = (a.num_classes, &clean) {
        n_classes = n_classes.max(infer_num_classes(c));
    }

    let noise_source = match (a.noise_source, &a.noise_model) {
        (NoiseSourceArg::Hoc, None) => NoiseSource::Hoc,
        (NoiseSourceArg::Hoc, Some(_)) => {
            return Err(CliError::Config(
                "--noise-model requires --noise-source supplied".into(),
            ))
        }
        (NoiseSourceArg::Supplied, Some(path)) => NoiseSource::Supplied {
            model: NoiseModel::load(path)?,
        },
        (NoiseSourceArg::Supplied, None) => {
            return Err(CliError::Config(
                "--noise-source supplied needs --noise-model".into(),
            ))
        }
    };
    let config = DetectorConfig {
        method: match a.method {
            MethodArg::Vote => Method::Vote,
            MethodArg::Rank => Method::Rank,
        },
        k: a.k,
        epochs: a.epochs,
        seed: a.seed,
        weighting: match a.weighting {
            WeightingArg::Uniform => Weighting::Uniform,
            WeightingArg::Similarity => Weighting::Similarity,
        },
        include_self: !a.exclude_self,
        jitter_sigma: a.jitter,
        noise_source,
        hoc: HocConfig {
            restarts: a.hoc_restarts,
            max_iters: a.hoc_iters,
            ..HocConfig::default()
        },
    };
    // check the configuration before touching the data shape
    config.validate(features.n_rows(), n_classes)?;
    let data = LabeledDataset::new(features, noisy, clean, n_classes)?;
    let report = run_pipeline(&data, &config)?;
    write_report(&report, &a.out)?;

    let mut summary = format!(
        "N={} K={} flagged={}",
        report.n_instances,
        report.n_classes,
        report.flagged_count()
    );
    if let Some(t) = &report.thresholds {
        let parts: Vec<String> = t.iter().map(usize::to_string).collect();
        summary.push_str(&format!(" thresholds=[{}]", parts.join(",")));
    }
    if let Some(f1) = report.evaluation.as_ref().and_then(|e| e.f1) {
        summary.push_str(&format!(" f1={f1:.4}"));
    }
    println!("{summary}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct InjectManifest {
    kind: NoiseKind,
    eta: f64,
    seed: u64,
    n: usize,
    n_classes: usize,
    realized_rate: f64,
}

fn inject(a: InjectArgs) -> CliResult {
    let clean = dataset::load_labels(&a.labels, None)?;
    let n_classes = resolve_classes(&clean, a.num_classes)?;
    let kind = match a.kind {
        KindArg::Symmetric => NoiseKind::Symmetric,
        KindArg::Asymmetric => NoiseKind::Asymmetric,
        KindArg::Instance => NoiseKind::Instance,
    };
    let spec = NoiseSpec {
        rate_std: a.rate_std,
        ..NoiseSpec::new(kind, a.eta, a.seed)
    };
    let features = match (kind, &a.features) {
        (NoiseKind::Instance, None) => {
            return Err(CliError::Config(
                "--kind instance needs --features".into(),
            ))
        }
        (NoiseKind::Instance, Some(path)) => Some(
            FeatureInput {
                features: path.clone(),
                features_format: a.features_format,
                no_normalize: a.no_normalize,
            }
            .load()?,
        ),
        _ => None,
    };
    let noisy = noise::inject(&spec, &clean, n_classes, features.as_ref())?;
    dataset::write_labels(&noisy, &a.out)?;
    let manifest = InjectManifest {
        kind,
        eta: a.eta,
        seed: a.seed,
        n: clean.len(),
        n_classes,
        realized_rate: noise::corruption_rate(&clean, &noisy),
    };
    write_text(a.manifest.as_deref(), &to_json(&manifest))
}

fn eval(a: EvalArgs) -> CliResult {
    let report = read_report(&a.report)?;
    let clean = dataset::load_labels(&a.clean, None)?;
    let metrics = detection_metrics(&report.flags, &report.noisy_labels, &clean)?;
    write_text(a.out.as_deref(), &to_json(&metrics))
}

fn profile_k(a: ProfileArgs) -> CliResult {
    let features = a.input.load()?;
    let clean = dataset::load_labels(&a.clean, None)?;
    if clean.len() != features.n_rows() {
        return Err(CliError::Core(knnclean::Error::Validation(format!(
            "{} clean labels for {} feature rows",
            clean.len(),
            features.n_rows()
        ))));
    }
    let ks: Vec<usize> = match a.ks {
        Some(ks) => ks,
        None => (1..=a.k_max).collect(),
    };
    let rows = delta_k_profile(&features, &clean, &ks)?;
    let mut out = String::from("k\tdelta_k\n");
    for (k, d) in rows {
        out.push_str(&format!("{k}\t{d}\n"));
    }
    write_text(a.out.as_deref(), &out)
}

#[derive(Debug, Serialize)]
#[serde(tag = "bound", rename_all = "snake_case")]
enum BoundOutput {
    Vote {
        k: usize,
        e: f64,
        delta_k: f64,
        vote_margin: usize,
        majority_term: f64,
        lower_bound: f64,
    },
    Breakeven {
        k1: usize,
        k2: usize,
        e: f64,
        delta_k1: f64,
        term_ratio: f64,
        delta_k2_breakeven: f64,
    },
    Rank {
        input: RankBoundInput,
        f1_lower: f64,
        prob_p: f64,
        ci_half_width: f64,
        samples: usize,
        seed: u64,
    },
}

fn bound(a: BoundArgs) -> CliResult {
    let missing = |name: &str| CliError::Config(format!("--{name} is required"));
    let out = if a.vote_bound {
        let input = VoteBoundInput {
            k: a.k.ok_or_else(|| missing("k"))?,
            e: a.e.ok_or_else(|| missing("e"))?,
            delta_k: a.delta.ok_or_else(|| missing("delta"))?,
        };
        BoundOutput::Vote {
            k: input.k,
            e: input.e,
            delta_k: input.delta_k,
            vote_margin: bounds::vote_margin(input.k),
            majority_term: bounds::majority_vote_term(input.k, input.e)?,
            lower_bound: bounds::vote_lower_bound(&input)?,
        }
    } else if a.breakeven {
        let k1 = a.k1.ok_or_else(|| missing("k1"))?;
        let k2 = a.k2.ok_or_else(|| missing("k2"))?;
        let e = a.e.ok_or_else(|| missing("e"))?;
        let d = a.delta.ok_or_else(|| missing("delta"))?;
        BoundOutput::Breakeven {
            k1,
            k2,
            e,
            delta_k1: d,
            term_ratio: bounds::vote_term_ratio(k1, k2, e)?,
            delta_k2_breakeven: bounds::k_breakeven(k1, k2, e, d)?,
        }
    } else {
        let input = RankBoundInput {
            n_minus: a.n_minus.ok_or_else(|| missing("n-minus"))?,
            n_plus: a.n_plus.ok_or_else(|| missing("n-plus"))?,
            alpha: a.alpha.ok_or_else(|| missing("alpha"))?,
            mu_gap: a.mu_gap.ok_or_else(|| missing("mu-gap"))?,
            delta: a.gap_margin.ok_or_else(|| missing("gap-margin"))?,
            v: a.v.ok_or_else(|| missing("v"))?,
        };
        let r = bounds::rank_f1_bound(&input, a.samples, a.seed)?;
        BoundOutput::Rank {
            input,
            f1_lower: r.f1_lower,
            prob_p: r.prob_p,
            ci_half_width: r.ci_half_width,
            samples: r.samples,
            seed: a.seed,
        }
    };
    write_text(a.out.as_deref(), &to_json(&out))
}

fn synth(a: SynthArgs) -> CliResult {
    let (features, labels) = gaussian_mixture(a.n, a.dim, a.classes, a.separation, a.seed)?;
    match FeatureFormat::from_path(&a.features_out) {
        FeatureFormat::Csv => dataset::write_features_csv(&features, &a.features_out)?,
        FeatureFormat::Raw => dataset::write_features_raw(&features, &a.features_out)?,
    }
    dataset::write_labels(&labels, &a.labels_out)?;
    Ok(())
}
