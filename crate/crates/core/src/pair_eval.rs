//! Pair-verification metrics: equal-probability pair sampling, Mann-Whitney AUC, thresholded
//! classification metrics, bootstrap intervals and the cross-dataset generalization table.

use std::io;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{EmbeddingDataset, Split};
use crate::error::{Error, Result};
use crate::head_trainer::{FramePair, FrameRef, PairSet};
use crate::privacy_filter::nearest_rank;
use crate::seeding::stream_rng;
use crate::similarity::{score, Metric, SimilaritySpec};

const STREAM_EVAL_PAIRS: u64 = 21;
const STREAM_BOOTSTRAP: u64 = 22;

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const MIN_RESAMPLES: usize = 100;
/// Consecutive single-class redraws tolerated per bootstrap resample.
pub const MAX_REDRAWS: usize = 100;

/// One pair per video of `split`: a random anchor frame, and with probability 1/2 another
/// frame of the same video, otherwise a frame of a different random video.
pub fn sample_eval_pairs(dataset: &EmbeddingDataset, split: Split, seed: u64) -> Result<PairSet> {
    let videos = dataset.split(split);
    if videos.len() < 2 {
        return Err(Error::InsufficientVideos {
            needed: 2,
            found: videos.len(),
        });
    }
    let pairs = videos
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut rng = stream_rng(seed, STREAM_EVAL_PAIRS, i as u64);
            let a = FrameRef {
                video_id: v.id.clone(),
                frame: rng.random_range(0..v.num_frames()),
            };
            let same = rng.random::<bool>();
            let partner = if same {
                v
            } else {
                let mut j = rng.random_range(0..videos.len() - 1);
                if j >= i {
                    j += 1;
                }
                videos[j]
            };
            let b = FrameRef {
                video_id: partner.id.clone(),
                frame: rng.random_range(0..partner.num_frames()),
            };
            FramePair { a, b, same }
        })
        .collect();
    Ok(PairSet { pairs, seed })
}

fn check_scores(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() {
        return Err(Error::EmptyScoreList("no positive scores"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyScoreList("no negative scores"));
    }
    if pos.iter().chain(neg).any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig("scores must be finite".into()));
    }
    Ok(())
}

/// `twice_u / (2·n_pos·n_neg)`, evaluated so that swapping the classes yields exactly
/// `1 - auc`.
fn auc_from_twice_u(twice_u: u64, n_pos: u64, n_neg: u64) -> f64 {
    let twice_total = 2 * n_pos * n_neg;
    let other = twice_total - twice_u;
    if twice_u <= other {
        twice_u as f64 / twice_total as f64
    } else {
        1.0 - other as f64 / twice_total as f64
    }
}

/// Mann-Whitney AUC: `(concordant + 0.5·tied) / (|pos|·|neg|)`, computed by midranks.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut twice_u = 0u64;
    let mut neg_below = 0u64;
    for group in all.chunk_by(|a, b| a.0 == b.0) {
        let p = group.iter().filter(|r| r.1).count() as u64;
        let n = group.len() as u64 - p;
        twice_u += p * (2 * neg_below + n);
        neg_below += n;
    }
    Ok(auc_from_twice_u(twice_u, pos.len() as u64, neg.len() as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    Given,
    /// 0.5 on the predictor's probability.
    PredDefault,
    /// Maximizes `TPR - FPR` on the evaluated pairs.
    Youden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold: Option<f64>,
    pub n_resamples: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: None,
            n_resamples: DEFAULT_RESAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub auc: f64,
    pub auc_ci: (f64, f64),
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Rows are truth, columns prediction; index 0 = different, 1 = same.
    pub confusion: [[u64; 2]; 2],
    pub n_pairs: usize,
    pub threshold_used: f64,
    pub threshold_source: ThresholdSource,
    pub n_resamples: usize,
    pub seed: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Threshold maximizing Youden's J among the distinct scores, with positives `score > t`.
/// Ties resolve to the smallest threshold.
pub fn youden_threshold(records: &[(f64, bool)]) -> Result<f64> {
    let pos: Vec<f64> = records.iter().filter(|r| r.1).map(|r| r.0).collect();
    let neg: Vec<f64> = records.iter().filter(|r| !r.1).map(|r| r.0).collect();
    check_scores(&pos, &neg)?;
    let (n_pos, n_neg) = (pos.len() as i128, neg.len() as i128);
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut pos_above, mut neg_above) = (n_pos, n_neg);
    let mut best: Option<(i128, f64)> = None;
    for group in sorted.chunk_by(|a, b| a.0 == b.0) {
        let p = group.iter().filter(|r| r.1).count() as i128;
        pos_above -= p;
        neg_above -= group.len() as i128 - p;
        // J scaled by n_pos·n_neg keeps the comparison exact
        let j = pos_above * n_neg - neg_above * n_pos;
        if best.is_none_or(|(bj, _)| j > bj) {
            best = Some((j, group[0].0));
        }
    }
    Ok(best.expect("non-empty records").1)
}

fn confusion(records: &[(f64, bool)], threshold: f64) -> [[u64; 2]; 2] {
    let mut m = [[0u64; 2]; 2];
    for &(s, same) in records {
        m[same as usize][(s > threshold) as usize] += 1;
    }
    m
}

/// Scores every pair, then reports AUC with a bootstrap interval and thresholded metrics.
pub fn evaluate(
    pairs: &PairSet,
    dataset: &EmbeddingDataset,
    spec: &SimilaritySpec,
    options: &EvalOptions,
) -> Result<EvalReport> {
    spec.check_dimension(dataset.dimension())?;
    let records: Vec<(f64, bool)> = pairs
        .resolve(dataset)?
        .iter()
        .map(|e| Ok((score(spec, e.a, e.b)?, e.label == 1.0)))
        .collect::<Result<_>>()?;
    let pos: Vec<f64> = records.iter().filter(|r| r.1).map(|r| r.0).collect();
    let neg: Vec<f64> = records.iter().filter(|r| !r.1).map(|r| r.0).collect();
    let point = auc(&pos, &neg)?;
    let (lo, hi) = bootstrap_ci(&records, options.n_resamples, options.seed)?;

    let (threshold_used, threshold_source) = match (options.threshold, spec.metric()) {
        (Some(t), _) => (t, ThresholdSource::Given),
        (None, Metric::Pred) => (0.5, ThresholdSource::PredDefault),
        (None, _) => (youden_threshold(&records)?, ThresholdSource::Youden),
    };
    let confusion = confusion(&records, threshold_used);
    let [[tn, fp], [fn_, tp]] = confusion;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EvalReport {
        metric: spec.describe(),
        auc: point,
        // percentile endpoints can exclude the point estimate on very skewed resample
        // distributions; the reported interval always contains it
        auc_ci: (lo.min(point), hi.max(point)),
        accuracy: ratio(tp + tn, records.len() as u64),
        f1,
        precision,
        recall,
        confusion,
        n_pairs: records.len(),
        threshold_used,
        threshold_source,
        n_resamples: options.n_resamples,
        seed: options.seed,
    })
}

/// Percentile (2.5, 97.5) interval of the AUC over pair-level resamples with replacement.
pub fn bootstrap_ci(records: &[(f64, bool)], n_resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::EmptyScoreList("no scored pairs"));
    }
    if n_resamples < MIN_RESAMPLES {
        return Err(Error::InvalidConfig(format!(
            "n_resamples {n_resamples} below the minimum of {MIN_RESAMPLES}"
        )));
    }
    if records.iter().any(|r| !r.0.is_finite()) {
        return Err(Error::InvalidConfig("scores must be finite".into()));
    }
    // Sorting once lets every resample be summarized as multiplicities over the same order.
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut group_ends = Vec::new();
    for i in 1..=sorted.len() {
        if i == sorted.len() || sorted[i].0 != sorted[i - 1].0 {
            group_ends.push(i);
        }
    }
    let n = sorted.len();

    let mut stats: Vec<f64> = (0..n_resamples)
        .into_par_iter()
        .map_init(
            || vec![0u64; n],
            |counts, index| {
                let mut rng = stream_rng(seed, STREAM_BOOTSTRAP, index as u64);
                for _ in 0..MAX_REDRAWS {
                    counts.fill(0);
                    for _ in 0..n {
                        counts[rng.random_range(0..n)] += 1;
                    }
                    if let Some(a) = weighted_auc(&sorted, &group_ends, counts) {
                        return Ok(a);
                    }
                }
                Err(Error::DegenerateResample {
                    index,
                    attempts: MAX_REDRAWS,
                })
            },
        )
        .collect::<Result<_>>()?;
    stats.sort_by(f64::total_cmp);
    let lo = stats[nearest_rank(2.5, stats.len()) - 1];
    let hi = stats[nearest_rank(97.5, stats.len()) - 1];
    Ok((lo, hi))
}

fn weighted_auc(sorted: &[(f64, bool)], group_ends: &[usize], counts: &[u64]) -> Option<f64> {
    let (mut twice_u, mut neg_below, mut n_pos) = (0u64, 0u64, 0u64);
    let mut start = 0;
    for &end in group_ends {
        let (mut p, mut q) = (0u64, 0u64);
        for i in start..end {
            if sorted[i].1 {
                p += counts[i];
            } else {
                q += counts[i];
            }
        }
        twice_u += p * (2 * neg_below + q);
        neg_below += q;
        n_pos += p;
        start = end;
    }
    (n_pos > 0 && neg_below > 0).then(|| auc_from_twice_u(twice_u, n_pos, neg_below))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossDatasetRow {
    pub train: String,
    pub test: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossDatasetTable {
    pub rows: Vec<CrossDatasetRow>,
}

impl CrossDatasetTable {
    pub fn get(&self, train: &str, test: &str) -> Option<&EvalReport> {
        self.rows
            .iter()
            .find(|r| r.train == train && r.test == test)
            .map(|r| &r.report)
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "train", "test", "metric", "auc", "auc_lo", "auc_hi", "accuracy", "f1", "precision",
            "recall", "threshold",
        ])?;
        for row in &self.rows {
            let r = &row.report;
            w.write_record([
                row.train.clone(),
                row.test.clone(),
                r.metric.clone(),
                r.auc.to_string(),
                r.auc_ci.0.to_string(),
                r.auc_ci.1.to_string(),
                r.accuracy.to_string(),
                r.f1.to_string(),
                r.precision.to_string(),
                r.recall.to_string(),
                r.threshold_used.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(io::BufWriter::new(file))
    }
}

/// Evaluates every named spec (keyed by the dataset it was trained on) on the test split of
/// every named dataset.
pub fn cross_dataset_matrix(
    datasets: &[(&str, &EmbeddingDataset)],
    specs: &[(&str, SimilaritySpec)],
    options: &EvalOptions,
) -> Result<CrossDatasetTable> {
    for (_, spec) in specs {
        for (_, ds) in datasets {
            spec.check_dimension(ds.dimension())?;
        }
    }
    let mut rows = Vec::with_capacity(datasets.len() * specs.len());
    for (train, spec) in specs {
        for (test, ds) in datasets {
            let pairs = sample_eval_pairs(ds, Split::Test, options.seed)?;
            rows.push(CrossDatasetRow {
                train: train.to_string(),
                test: test.to_string(),
                report: evaluate(&pairs, ds, spec, options)?,
            });
        }
    }
    Ok(CrossDatasetTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::{generate_clustered_dataset, oracle_auc, ClusterConfig, SyntheticMode};
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.4], &[0.6, 0.2]).unwrap(), 0.75);
        assert!(matches!(auc(&[], &[1.0]), Err(Error::EmptyScoreList(_))));
        assert!(matches!(auc(&[1.0], &[]), Err(Error::EmptyScoreList(_))));
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![(0i32..20).prop_map(|k| k as f64 / 4.0), -1e3f64..1e3], 1..60)
    }

    proptest! {
        #[test]
        fn auc_matches_exhaustive_count(pos in scores(), neg in scores()) {
            let a = auc(&pos, &neg).unwrap();
            prop_assert!((a - oracle_auc(&pos, &neg).unwrap()).abs() <= 1e-12);
            prop_assert_eq!(a + auc(&neg, &pos).unwrap(), 1.0);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn auc_invariant_under_increasing_maps(pos in scores(), neg in scores()) {
            let f = |v: &[f64]| v.iter().map(|x| (x / 100.0).exp() * 3.0 - 7.0).collect::<Vec<_>>();
            prop_assert_eq!(auc(&pos, &neg).unwrap(), auc(&f(&pos), &f(&neg)).unwrap());
        }

        #[test]
        fn youden_never_worse_than_trivial(records in prop::collection::vec((-5i32..5, any::<bool>()), 2..50)) {
            let records: Vec<(f64, bool)> = records.into_iter().map(|(s, l)| (s as f64, l)).collect();
            prop_assume!(records.iter().any(|r| r.1) && records.iter().any(|r| !r.1));
            let t = youden_threshold(&records).unwrap();
            prop_assert!(records.iter().any(|r| r.0 == t));
            let m = confusion(&records, t);
            let j = ratio(m[1][1], m[1][0] + m[1][1]) - ratio(m[0][1], m[0][0] + m[0][1]);
            prop_assert!(j >= 0.0);
        }
    }

    #[test]
    fn bootstrap_basics() {
        let perfect: Vec<(f64, bool)> = (0..40).map(|i| (i as f64, i >= 20)).collect();
        assert_eq!(bootstrap_ci(&perfect, 200, 1).unwrap(), (1.0, 1.0));
        let noisy: Vec<(f64, bool)> = (0..60).map(|i| (((i * 37) % 23) as f64, i % 3 == 0)).collect();
        let (lo, hi) = bootstrap_ci(&noisy, 500, 9).unwrap();
        assert_eq!((lo, hi), bootstrap_ci(&noisy, 500, 9).unwrap());
        assert!(0.0 <= lo && lo <= hi && hi <= 1.0);
        assert!(bootstrap_ci(&noisy, 99, 9).is_err());
        assert!(matches!(bootstrap_ci(&[], 100, 9), Err(Error::EmptyScoreList(_))));
        let one_class: Vec<(f64, bool)> = (0..10).map(|i| (i as f64, true)).collect();
        assert!(matches!(
            bootstrap_ci(&one_class, 100, 0),
            Err(Error::DegenerateResample { .. })
        ));
    }

    #[test]
    fn bootstrap_resample_matches_direct_auc() {
        // a resample with unit multiplicities is the original sample
        let records: Vec<(f64, bool)> = (0..30).map(|i| (((i * 7) % 11) as f64, i % 2 == 0)).collect();
        let mut sorted = records.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let ends: Vec<usize> = (1..=sorted.len())
            .filter(|&i| i == sorted.len() || sorted[i].0 != sorted[i - 1].0)
            .collect();
        let pos: Vec<f64> = records.iter().filter(|r| r.1).map(|r| r.0).collect();
        let neg: Vec<f64> = records.iter().filter(|r| !r.1).map(|r| r.0).collect();
        assert_eq!(
            weighted_auc(&sorted, &ends, &vec![1; 30]).unwrap(),
            auc(&pos, &neg).unwrap()
        );
    }

    fn separable(seed: u64) -> EmbeddingDataset {
        generate_clustered_dataset(&ClusterConfig {
            n_identities: 200,
            frames_per_video: 4,
            dimension: 16,
            sigma_intra: 0.05,
            sigma_inter: 1.0,
            split_fractions: [0.5, 0.5, 0.0],
            synthetic_mode: SyntheticMode::Independent,
            seed,
            ..ClusterConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn eval_pairs_one_per_video() {
        let ds = separable(1);
        let ps = sample_eval_pairs(&ds, Split::Test, 3).unwrap();
        assert_eq!(ps.len(), 100);
        assert_eq!(ps, sample_eval_pairs(&ds, Split::Test, 3).unwrap());
        for (p, v) in ps.pairs.iter().zip(ds.split(Split::Test)) {
            assert_eq!(p.a.video_id, v.id);
            assert_eq!(p.same, p.b.video_id == v.id);
        }
        assert!(matches!(
            sample_eval_pairs(&ds, Split::Synthetic, 3),
            Err(Error::InsufficientVideos { .. })
        ));
    }

    #[test]
    fn corr_separates_clusters() {
        let ds = separable(2);
        let ps = sample_eval_pairs(&ds, Split::Test, 5).unwrap();
        let opts = EvalOptions {
            n_resamples: 500,
            ..EvalOptions::default()
        };
        let r = evaluate(&ps, &ds, &SimilaritySpec::corr(), &opts).unwrap();
        assert!(r.auc >= 0.99, "{}", r.auc);
        assert!(r.auc_ci.0 <= r.auc && r.auc <= r.auc_ci.1);
        assert_eq!(r.threshold_source, ThresholdSource::Youden);
        assert_eq!(r.confusion.iter().flatten().sum::<u64>(), r.n_pairs as u64);
        let acc = (r.confusion[0][0] + r.confusion[1][1]) as f64 / r.n_pairs as f64;
        assert_eq!(acc, r.accuracy);
    }

    #[test]
    fn constant_scores() {
        let ds = separable(3);
        let ps = sample_eval_pairs(&ds, Split::Test, 5).unwrap();
        let head = crate::similarity::PredictorHead::zeros(16, 4);
        let opts = EvalOptions {
            n_resamples: 100,
            ..EvalOptions::default()
        };
        let r = evaluate(&ps, &ds, &SimilaritySpec::pred(head), &opts).unwrap();
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.threshold_used, 0.5);
        // every score is 0.5, never strictly above the threshold
        assert_eq!(r.confusion[0][1] + r.confusion[1][1], 0);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn cross_matrix_single_cell_matches_evaluate() {
        let ds = separable(4);
        let opts = EvalOptions {
            n_resamples: 100,
            seed: 8,
            ..EvalOptions::default()
        };
        let table = cross_dataset_matrix(&[("a", &ds)], &[("a", SimilaritySpec::l2())], &opts).unwrap();
        let direct = evaluate(
            &sample_eval_pairs(&ds, Split::Test, 8).unwrap(),
            &ds,
            &SimilaritySpec::l2(),
            &opts,
        )
        .unwrap();
        assert_eq!(table.get("a", "a"), Some(&direct));
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("train,test,metric,auc,auc_lo,auc_hi,accuracy,f1,precision,recall,threshold\na,a,l2,"));
    }
}
