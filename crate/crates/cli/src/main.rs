use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use reid_audit::audit::{run_audit, AuditConfig};
use reid_audit::consistency::{cross_video_baseline, first_frame_curves, mcc, ConsistencyMode};
use reid_audit::embedding_store::{import_csv_manifest, load_dataset, validate, write_dataset, EmbeddingDataset, Split};
use reid_audit::head_trainer::{sample_training_pairs, train_head, TrainConfig};
use reid_audit::pair_eval::{evaluate, sample_eval_pairs, EvalOptions};
use reid_audit::privacy_filter::{apply_filter, calibrate_threshold, pmax_all, Aggregation, PmaxTable, PrivacyThreshold};
use reid_audit::recall_analyzer::{analyze_recall, select_recall_subsets};
use reid_audit::similarity::{load_head, write_head, Metric, SimilaritySpec};
use reid_audit::synthbench::{generate_clustered_dataset, ClusterConfig, SyntheticMode};
use reid_audit::{Error, Result};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  configuration error (bad flags, missing files, incompatible threshold/table)
  3  data error (malformed or inconsistent input data)
  4  numeric error (diverging training, degenerate bootstrap, non-finite weights)

Errors are printed to stderr as a single JSON object.
REID_AUDIT_WORKERS overrides --workers.";

#[derive(Parser)]
#[command(name = "reid-audit", version, about = "Re-identification based privacy and recall audit of synthetic video embeddings", after_help = EXIT_CODES)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Base seed for every randomized step [default: 0, or the audit config's seed].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism. REID_AUDIT_WORKERS takes precedence.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output file or directory; results go to stdout when omitted and the command allows it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SpecArgs {
    #[arg(long, default_value = "corr")]
    metric: Metric,
    /// HEAD1 predictor head, required for `--metric pred`.
    #[arg(long)]
    head: Option<PathBuf>,
}

impl SpecArgs {
    fn build(&self) -> Result<SimilaritySpec> {
        let head = match (&self.head, self.metric) {
            (Some(p), Metric::Pred) => Some(load_head(p)?),
            _ => None,
        };
        SimilaritySpec::new(self.metric, head)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Convert a CSV manifest of per-video feature files into an EMB1 dataset.
    IngestCsv {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        dimension: usize,
    },
    /// Generate a clustered synthetic benchmark as train.emb1, test.emb1 and synthetic.emb1.
    GenSynth {
        /// JSON cluster configuration; the flags below are ignored when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        identities: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        dimension: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma_intra: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma_inter: f64,
        /// resample, copy or independent.
        #[arg(long, default_value = "resample")]
        mode: String,
        /// Noise scale for `--mode copy`.
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
    },
    /// Train a predictor head on frame pairs of one split.
    TrainHead {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 20_000)]
        pairs: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.05)]
        learning_rate: f64,
        #[arg(long, default_value_t = 256)]
        hidden: usize,
        #[arg(long, default_value_t = 20)]
        patience: usize,
        /// Per-epoch loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Pair-verification metrics on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 10_000)]
        resamples: usize,
    },
    /// P_max of every query video against a reference split.
    Pmax {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value = "synthetic")]
        query_split: Split,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value = "train")]
        reference_split: Split,
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value = "first_vs_first")]
        aggregation: Aggregation,
    },
    /// Nearest-rank percentile threshold of a test P_max table.
    Calibrate {
        #[arg(long)]
        pmax: PathBuf,
        #[arg(long, default_value_t = 95.0)]
        percentile: f64,
    },
    /// Flag synthetic videos above a threshold.
    Filter {
        #[arg(long)]
        threshold: PathBuf,
        #[arg(long)]
        pmax: PathBuf,
    },
    /// Learned / memorized accounting of a synthetic P_max table.
    Recall {
        #[arg(long)]
        pmax: PathBuf,
        #[arg(long)]
        threshold: PathBuf,
        #[arg(long)]
        n_train: usize,
        /// Full frequency histogram CSV.
        #[arg(long)]
        frequency: Option<PathBuf>,
    },
    /// Synthetic ids representing each learned, non-memorized training video.
    SelectSubset {
        #[arg(long)]
        pmax: PathBuf,
        #[arg(long)]
        threshold: PathBuf,
        #[arg(long)]
        n_train: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Temporal consistency of the videos of one split.
    Consistency {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 80)]
        min_frames: usize,
        #[arg(long, default_value_t = 80)]
        max_offset: usize,
        #[arg(long, default_value = "all_pairs")]
        mode: ConsistencyMode,
        /// First-frame curves CSV.
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Cross-video baseline curves CSV.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Full audit from a JSON configuration.
    Audit {
        #[arg(long)]
        config: PathBuf,
    },
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).map_err(|e| io_error(p, e)),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| io_error(Path::new("<stdout>"), e)),
    }
}

fn emit_json<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    emit(out, &bytes)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn require_out(out: Option<&Path>, what: &str) -> Result<PathBuf> {
    out.map(Path::to_path_buf)
        .ok_or_else(|| Error::InvalidConfig(format!("--out is required for {what}")))
}

fn load_threshold(path: &Path) -> Result<PrivacyThreshold> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn split_dataset(ds: &EmbeddingDataset, split: Split) -> Result<EmbeddingDataset> {
    let videos = ds.split(split).into_iter().cloned().collect();
    EmbeddingDataset::new(ds.dimension(), videos, format!("{}:{split}", ds.provenance))
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.common.out.as_deref();
    let seed = cli.common.seed.unwrap_or(0);
    match cli.command {
        Command::IngestCsv { manifest, dimension } => {
            let target = require_out(out, "ingest-csv")?;
            let ds = import_csv_manifest(&manifest, dimension)?;
            write_dataset(&ds, &target)?;
            let report = validate(&ds);
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::GenSynth {
            config,
            identities,
            frames,
            dimension,
            sigma_intra,
            sigma_inter,
            mode,
            epsilon,
        } => {
            let dir = require_out(out, "gen-synth")?;
            let cfg = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| io_error(&p, e))?;
                    serde_json::from_str(&text)?
                }
                None => ClusterConfig {
                    n_identities: identities,
                    frames_per_video: frames,
                    dimension,
                    sigma_intra,
                    sigma_inter,
                    synthetic_mode: match mode.as_str() {
                        "resample" => SyntheticMode::ResampleIdentity,
                        "copy" => SyntheticMode::CopyWithNoise { epsilon },
                        "independent" => SyntheticMode::Independent,
                        other => {
                            return Err(Error::InvalidConfig(format!("unknown synthetic mode `{other}`")))
                        }
                    },
                    seed,
                    ..ClusterConfig::default()
                },
            };
            let ds = generate_clustered_dataset(&cfg)?;
            fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
            let mut written = serde_json::Map::new();
            for split in [Split::Train, Split::Test, Split::Synthetic] {
                let path = dir.join(format!("{split}.emb1"));
                let part = split_dataset(&ds, split)?;
                write_dataset(&part, &path)?;
                written.insert(split.to_string(), json!({"path": path, "videos": part.len()}));
            }
            println!("{}", serde_json::to_string_pretty(&written)?);
        }
        Command::TrainHead {
            data,
            split,
            pairs,
            epochs,
            batch_size,
            learning_rate,
            hidden,
            patience,
            log,
        } => {
            let target = require_out(out, "train-head")?;
            let ds = load_dataset(&data)?;
            let cfg = TrainConfig {
                epochs,
                batch_size,
                learning_rate,
                hidden_size: hidden,
                seed,
                early_stop_patience: patience,
            };
            cfg.validate()?;
            let pair_set = sample_training_pairs(&ds, split, pairs, seed)?;
            let (head, train_log) = train_head(&pair_set, &ds, &cfg)?;
            write_head(&head, &target)?;
            if let Some(p) = log {
                train_log.save_csv(p)?;
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "head": target,
                    "fingerprint": head.fingerprint(),
                    "epochs_run": train_log.epochs.len(),
                    "best_epoch": train_log.best_epoch,
                    "initial_heldout_loss": train_log.initial_heldout_loss,
                    "best_heldout_loss": train_log.best_heldout_loss,
                }))?
            );
        }
        Command::Eval {
            data,
            split,
            spec,
            threshold,
            resamples,
        } => {
            let ds = load_dataset(&data)?;
            let spec = spec.build()?;
            let pairs = sample_eval_pairs(&ds, split, seed)?;
            let report = evaluate(
                &pairs,
                &ds,
                &spec,
                &EvalOptions {
                    threshold,
                    n_resamples: resamples,
                    seed,
                },
            )?;
            emit_json(out, &report)?;
        }
        Command::Pmax {
            queries,
            query_split,
            reference,
            reference_split,
            spec,
            aggregation,
        } => {
            let q = load_dataset(&queries)?;
            let r = load_dataset(&reference)?;
            let spec = spec.build()?;
            let table = pmax_all(&q.split(query_split), &r.split(reference_split), &spec, aggregation)?
                .with_reference(reference.display().to_string());
            let mut bytes = Vec::new();
            table.write_csv(&mut bytes)?;
            emit(out, &bytes)?;
        }
        Command::Calibrate { pmax, percentile } => {
            let table = PmaxTable::load_csv(&pmax)?;
            emit_json(out, &calibrate_threshold(&table, percentile)?)?;
        }
        Command::Filter { threshold, pmax } => {
            let table = PmaxTable::load_csv(&pmax)?;
            emit_json(out, &apply_filter(&table, &load_threshold(&threshold)?)?)?;
        }
        Command::Recall {
            pmax,
            threshold,
            n_train,
            frequency,
        } => {
            let table = PmaxTable::load_csv(&pmax)?;
            let report = analyze_recall(&table, &load_threshold(&threshold)?, n_train)?;
            if let Some(p) = frequency {
                report.save_frequency_csv(p)?;
            }
            emit_json(out, &report.summary())?;
        }
        Command::SelectSubset {
            pmax,
            threshold,
            n_train,
            k,
        } => {
            let table = PmaxTable::load_csv(&pmax)?;
            let report = analyze_recall(&table, &load_threshold(&threshold)?, n_train)?;
            let ids = select_recall_subsets(&report, &table, k)?;
            let mut text = ids.join("\n");
            if !text.is_empty() {
                text.push('\n');
            }
            emit(out, text.as_bytes())?;
        }
        Command::Consistency {
            data,
            split,
            spec,
            min_frames,
            max_offset,
            mode,
            curves,
            baseline,
        } => {
            let ds = load_dataset(&data)?;
            let spec = spec.build()?;
            let videos = ds.split(split);
            let report = mcc(&videos, &spec, min_frames, mode)?;
            if let Some(p) = curves {
                first_frame_curves(&videos, &spec, min_frames, max_offset)?.save_csv(p)?;
            }
            if let Some(p) = baseline {
                cross_video_baseline(&videos, &spec, seed, min_frames, max_offset)?.save_csv(p)?;
            }
            emit_json(out, &report)?;
        }
        Command::Audit { config } => {
            let mut cfg = AuditConfig::load(&config)?;
            if let Some(dir) = out {
                cfg.out_dir = dir.to_path_buf();
            }
            if let Some(s) = cli.common.seed {
                cfg.seed = s;
            }
            cfg.workers = cli.common.workers.or(cfg.workers);
            let summary = run_audit(&cfg)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "out_dir": summary.out_dir,
                    "threshold": summary.threshold,
                    "flagged": summary.flagged_count,
                    "n_synthetic": summary.n_synthetic,
                }))?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let mut cli = Cli::parse();
    if let Ok(raw) = std::env::var("REID_AUDIT_WORKERS") {
        match raw.trim().parse::<usize>() {
            Ok(n) => cli.common.workers = Some(n),
            Err(_) => {
                return report(Error::InvalidConfig(format!(
                    "REID_AUDIT_WORKERS=`{raw}` is not a worker count"
                )))
            }
        }
    }
    if let Some(n) = cli.common.workers {
        if n == 0 {
            return report(Error::InvalidConfig("--workers must be at least 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return report(Error::InvalidConfig(format!("cannot build worker pool: {e}")));
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: Error) -> ExitCode {
    let class = e.class();
    let mut body = json!({
        "error": e.kind(),
        "class": class.as_str(),
        "exit_code": class.exit_code(),
        "message": e.to_string(),
    });
    if let Error::Io { path, .. } = &e {
        body["path"] = json!(path);
    }
    eprintln!("{body}");
    ExitCode::from(class.exit_code() as u8)
}
