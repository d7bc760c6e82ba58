//! End-to-end audit: verification metrics, P_max filtering, recall accounting and temporal
//! consistency over a train/test/synthetic trio, written as a bundle of JSON and CSV reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::{
    cross_video_baseline, first_frame_curves, mcc, ConsistencyMode, ConsistencyReport,
    DEFAULT_MAX_OFFSET, DEFAULT_MIN_FRAMES,
};
use crate::embedding_store::{load_dataset, EmbeddingDataset, Split, VideoEmbedding};
use crate::error::{Error, Result};
use crate::head_trainer::{sample_training_pairs, train_head, TrainConfig};
use crate::pair_eval::{evaluate, sample_eval_pairs, EvalOptions, DEFAULT_RESAMPLES};
use crate::privacy_filter::{apply_filter, calibrate_threshold, pmax_all, Aggregation};
use crate::recall_analyzer::{analyze_recall, export_projection_table, RecallSummary};
use crate::seeding::sub_seed;
use crate::similarity::{load_head, Metric, SimilaritySpec};

pub const ARTIFACTS: [&str; 10] = [
    "eval_report.json",
    "pmax_test.csv",
    "pmax_synthetic.csv",
    "privacy_report.json",
    "recall_report.json",
    "frequency.csv",
    "consistency_report.json",
    "curves.csv",
    "projection.csv",
    "manifest.json",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    pub synthetic: PathBuf,
    pub metric: Metric,
    /// HEAD1 file; required for `pred` unless `train_head` is set.
    pub head: Option<PathBuf>,
    /// Train a head on the training split when `metric` is `pred` and no head file is given.
    pub train_head: Option<TrainConfig>,
    pub n_train_pairs: usize,
    pub percentile: f64,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Size of the worker pool; `None` uses the ambient pool.
    pub workers: Option<usize>,
    pub min_frames: usize,
    pub max_offset: usize,
    pub consistency_mode: ConsistencyMode,
    pub n_resamples: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            train: PathBuf::new(),
            test: PathBuf::new(),
            synthetic: PathBuf::new(),
            metric: Metric::Corr,
            head: None,
            train_head: None,
            n_train_pairs: 20_000,
            percentile: 95.0,
            aggregation: Aggregation::FirstVsFirst,
            seed: 0,
            out_dir: PathBuf::from("audit_out"),
            workers: None,
            min_frames: DEFAULT_MIN_FRAMES,
            max_offset: DEFAULT_MAX_OFFSET,
            consistency_mode: ConsistencyMode::AllPairs,
            n_resamples: DEFAULT_RESAMPLES,
        }
    }
}

impl AuditConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::InvalidConfig(format!(
                "percentile {} outside (0, 100)",
                self.percentile
            )));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        if self.max_offset == 0 {
            return Err(Error::InvalidConfig("max_offset must be positive".into()));
        }
        if self.metric == Metric::Pred && self.head.is_none() && self.train_head.is_none() {
            return Err(Error::InvalidConfig(
                "metric `pred` needs a head file or a train_head configuration".into(),
            ));
        }
        if let Some(tc) = &self.train_head {
            tc.validate()?;
        }
        for (role, path) in [
            ("train", &self.train),
            ("test", &self.test),
            ("synthetic", &self.synthetic),
        ]
        .into_iter()
        .chain(self.head.iter().map(|h| ("head", h)))
        {
            if !path.is_file() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("{role} file does not exist"),
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> AuditSeeds {
        AuditSeeds {
            master: self.seed,
            training_pairs: sub_seed(self.seed, 1, 0),
            training: sub_seed(self.seed, 2, 0),
            eval_pairs: sub_seed(self.seed, 3, 0),
            bootstrap: sub_seed(self.seed, 4, 0),
            baseline: sub_seed(self.seed, 5, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSeeds {
    pub master: u64,
    pub training_pairs: u64,
    pub training: u64,
    pub eval_pairs: u64,
    pub bootstrap: u64,
    pub baseline: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactChecksum {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub timestamp: String,
    pub config: AuditConfig,
    pub seeds: AuditSeeds,
    pub spec: String,
    pub artifacts: Vec<ArtifactChecksum>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallBundle {
    #[serde(flatten)]
    pub summary: RecallSummary,
    /// Fraction of train videos that are the argmax of at least one real test video.
    pub test_argmax_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyBundle {
    #[serde(flatten)]
    pub report: ConsistencyReport,
    pub first_frame_column_means: Vec<f64>,
    pub cross_video_column_means: Vec<f64>,
}

/// Outcome of a successful audit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditSummary {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    pub flagged_count: usize,
    pub n_synthetic: usize,
    pub threshold: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Videos of `path` whose split tag equals `role`.
fn role_videos(path: &Path, role: Split) -> Result<EmbeddingDataset> {
    let ds = load_dataset(path)?;
    let videos: Vec<VideoEmbedding> = ds
        .videos()
        .iter()
        .filter(|v| v.split == role)
        .cloned()
        .collect();
    EmbeddingDataset::new(ds.dimension(), videos, path.display().to_string())
}

/// Tracks written files so a failed run can remove them.
struct Bundle {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Bundle {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn csv(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut bytes = Vec::new();
        fill(&mut bytes)?;
        self.write(name, &bytes)
    }

    fn remove_all(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }
}

/// Runs the audit, on a dedicated pool when `config.workers` is set.
pub fn run_audit(config: &AuditConfig) -> Result<AuditSummary> {
    config.validate()?;
    match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot build worker pool: {e}")))?
            .install(|| run_in_pool(config)),
        None => run_in_pool(config),
    }
}

fn run_in_pool(config: &AuditConfig) -> Result<AuditSummary> {
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let mut bundle = Bundle {
        dir: config.out_dir.clone(),
        written: Vec::new(),
    };
    let result = write_bundle(config, &mut bundle);
    if result.is_err() {
        bundle.remove_all();
    }
    result
}

fn write_bundle(config: &AuditConfig, bundle: &mut Bundle) -> Result<AuditSummary> {
    let seeds = config.seeds();
    let train = role_videos(&config.train, Split::Train)?;
    let test = role_videos(&config.test, Split::Test)?;
    let synthetic = role_videos(&config.synthetic, Split::Synthetic)?;
    for ds in [&test, &synthetic] {
        if ds.dimension() != train.dimension() {
            return Err(Error::DimensionMismatch(format!(
                "{} has dimension {} but the training set has {}",
                ds.provenance,
                ds.dimension(),
                train.dimension()
            )));
        }
    }

    let head = match (&config.head, config.metric) {
        (_, m) if m != Metric::Pred => None,
        (Some(path), _) => Some(load_head(path)?),
        (None, _) => {
            let pairs = sample_training_pairs(&train, Split::Train, config.n_train_pairs, seeds.training_pairs)?;
            let tc = TrainConfig {
                seed: seeds.training,
                ..config.train_head.clone().unwrap_or_default()
            };
            Some(train_head(&pairs, &train, &tc)?.0)
        }
    };
    let spec = SimilaritySpec::new(config.metric, head)?;
    spec.check_dimension(train.dimension())?;

    let eval_pairs = sample_eval_pairs(&test, Split::Test, seeds.eval_pairs)?;
    let eval = evaluate(
        &eval_pairs,
        &test,
        &spec,
        &EvalOptions {
            threshold: None,
            n_resamples: config.n_resamples,
            seed: seeds.bootstrap,
        },
    )?;
    bundle.json("eval_report.json", &eval)?;

    let train_refs = train.split(Split::Train);
    let test_refs = test.split(Split::Test);
    let syn_refs = synthetic.split(Split::Synthetic);
    let pmax_test = pmax_all(&test_refs, &train_refs, &spec, config.aggregation)?.with_reference("train");
    bundle.csv("pmax_test.csv", |w| pmax_test.write_csv(w))?;
    let pmax_syn = pmax_all(&syn_refs, &train_refs, &spec, config.aggregation)?.with_reference("train");
    bundle.csv("pmax_synthetic.csv", |w| pmax_syn.write_csv(w))?;

    let threshold = calibrate_threshold(&pmax_test, config.percentile)?;
    let privacy = apply_filter(&pmax_syn, &threshold)?;
    bundle.json("privacy_report.json", &privacy)?;

    let recall = analyze_recall(&pmax_syn, &threshold, train_refs.len())?;
    let covered: std::collections::BTreeSet<&str> =
        pmax_test.rows.iter().map(|r| r.argmax_train_id.as_str()).collect();
    bundle.json(
        "recall_report.json",
        &RecallBundle {
            summary: recall.summary(),
            test_argmax_coverage: covered.len() as f64 / train_refs.len() as f64,
        },
    )?;
    bundle.csv("frequency.csv", |w| recall.write_frequency_csv(w))?;

    let report = mcc(&test_refs, &spec, config.min_frames, config.consistency_mode)?;
    let curves = first_frame_curves(&test_refs, &spec, config.min_frames, config.max_offset)?;
    let baseline = cross_video_baseline(
        &test_refs,
        &spec,
        seeds.baseline,
        config.min_frames,
        config.max_offset,
    )?;
    bundle.json(
        "consistency_report.json",
        &ConsistencyBundle {
            report,
            first_frame_column_means: curves.column_means(),
            cross_video_column_means: baseline.column_means(),
        },
    )?;
    bundle.csv("curves.csv", |w| curves.write_csv(w))?;

    let projection = bundle.dir.join("projection.csv");
    bundle.written.push(projection.clone());
    export_projection_table(&train_refs, &syn_refs, &recall, &projection)?;

    let mut artifacts = Vec::with_capacity(ARTIFACTS.len() - 1);
    for name in &ARTIFACTS[..ARTIFACTS.len() - 1] {
        let path = bundle.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        artifacts.push(ArtifactChecksum {
            name: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        config: config.clone(),
        seeds,
        spec: spec.describe(),
        artifacts,
    };
    bundle.json("manifest.json", &manifest)?;

    Ok(AuditSummary {
        out_dir: bundle.dir.clone(),
        manifest,
        flagged_count: privacy.flagged_count,
        n_synthetic: privacy.n_synthetic,
        threshold: threshold.value,
    })
}
