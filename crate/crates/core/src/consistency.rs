//! Temporal consistency of videos: mean correlation coefficient (MCC) per video, first-frame
//! consistency curves and the matching cross-video baseline.

use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::VideoEmbedding;
use crate::error::{Error, Result};
use crate::seeding::stream_rng;
use crate::similarity::{score, SimilaritySpec};

const STREAM_BASELINE: u64 = 31;

pub const DEFAULT_MIN_FRAMES: usize = 80;
pub const DEFAULT_MAX_OFFSET: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// Every ordered pair of distinct frames.
    #[default]
    AllPairs,
    /// The first frame against every later frame.
    FirstVsAll,
}

impl ConsistencyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConsistencyMode::AllPairs => "all_pairs",
            ConsistencyMode::FirstVsAll => "first_vs_all",
        }
    }
}

impl fmt::Display for ConsistencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConsistencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all_pairs" => Ok(ConsistencyMode::AllPairs),
            "first_vs_all" => Ok(ConsistencyMode::FirstVsAll),
            other => Err(Error::InvalidConfig(format!("unknown consistency mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoConsistency {
    pub video_id: String,
    pub mean_score: f64,
    /// Population standard deviation of the pair scores.
    pub std_score: f64,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub per_video: Vec<VideoConsistency>,
    /// Mean of the per-video means.
    pub aggregate_mean: f64,
    /// Population standard deviation of the per-video means.
    pub aggregate_std: f64,
    pub spec: String,
    pub min_frames: usize,
    pub mode: ConsistencyMode,
    /// Videos dropped by the frame filter or for having a single frame.
    pub n_skipped: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn eligible<'a>(videos: &[&'a VideoEmbedding], min_frames: usize) -> Result<Vec<&'a VideoEmbedding>> {
    let kept: Vec<&VideoEmbedding> = videos
        .iter()
        .copied()
        .filter(|v| v.num_frames() >= min_frames)
        .collect();
    if kept.is_empty() {
        return Err(Error::AllVideosFiltered { min_frames });
    }
    Ok(kept)
}

fn video_scores(v: &VideoEmbedding, spec: &SimilaritySpec, mode: ConsistencyMode) -> Result<Vec<f64>> {
    let n = v.num_frames();
    match mode {
        // scores are symmetric, so unordered pairs give the ordered-pair mean and spread
        ConsistencyMode::AllPairs => {
            let mut out = Vec::with_capacity(n * (n - 1) / 2);
            for t in 0..n {
                for u in t + 1..n {
                    out.push(score(spec, v.frame(t), v.frame(u))?);
                }
            }
            Ok(out)
        }
        ConsistencyMode::FirstVsAll => (1..n)
            .map(|t| score(spec, v.first_frame(), v.frame(t)))
            .collect(),
    }
}

/// Per-video mean pair score over videos with at least `min_frames` frames.
pub fn mcc(
    videos: &[&VideoEmbedding],
    spec: &SimilaritySpec,
    min_frames: usize,
    mode: ConsistencyMode,
) -> Result<ConsistencyReport> {
    let kept: Vec<&VideoEmbedding> = eligible(videos, min_frames)?
        .into_iter()
        .filter(|v| v.num_frames() >= 2)
        .collect();
    if kept.is_empty() {
        return Err(Error::AllVideosFiltered {
            min_frames: min_frames.max(2),
        });
    }
    let per_video = kept
        .par_iter()
        .map(|v| {
            spec.check_dimension(v.dimension())?;
            let (mean_score, std_score) = mean_std(&video_scores(v, spec, mode)?);
            Ok(VideoConsistency {
                video_id: v.id.clone(),
                mean_score,
                std_score,
                n_frames: v.num_frames(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = per_video.iter().map(|p| p.mean_score).collect();
    let (aggregate_mean, aggregate_std) = mean_std(&means);
    Ok(ConsistencyReport {
        n_skipped: videos.len() - per_video.len(),
        per_video,
        aggregate_mean,
        aggregate_std,
        spec: spec.describe(),
        min_frames,
        mode,
    })
}

/// Rows of scores by frame offset; rows are shorter than `max_offset` for shorter videos.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveMatrix {
    pub video_ids: Vec<String>,
    /// Video whose frames were scored, when it differs from the row's video.
    pub partner_ids: Option<Vec<String>>,
    pub max_offset: usize,
    /// `rows[v][t - 1]` is the score at offset `t`.
    pub rows: Vec<Vec<f64>>,
}

impl CurveMatrix {
    /// Mean and population std of each offset column over the rows that reach it.
    pub fn column_stats(&self) -> Vec<(f64, f64)> {
        (0..self.max_offset)
            .map_while(|t| {
                let col: Vec<f64> = self.rows.iter().filter_map(|r| r.get(t).copied()).collect();
                (!col.is_empty()).then(|| mean_std(&col))
            })
            .collect()
    }

    pub fn column_means(&self) -> Vec<f64> {
        self.column_stats().into_iter().map(|s| s.0).collect()
    }

    /// Long-form CSV `video_id,offset,score`, offsets starting at 1.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["video_id", "offset", "score"])?;
        for (id, row) in self.video_ids.iter().zip(&self.rows) {
            for (t, s) in row.iter().enumerate() {
                w.write_record([id.clone(), (t + 1).to_string(), s.to_string()])?;
            }
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

fn curve(anchor: &[f32], v: &VideoEmbedding, spec: &SimilaritySpec, max_offset: usize) -> Result<Vec<f64>> {
    (0..max_offset.min(v.num_frames()))
        .map(|t| score(spec, anchor, v.frame(t)))
        .collect()
}

/// Score of each video's first frame against its own frames at offsets `1..=max_offset`.
pub fn first_frame_curves(
    videos: &[&VideoEmbedding],
    spec: &SimilaritySpec,
    min_frames: usize,
    max_offset: usize,
) -> Result<CurveMatrix> {
    let kept = eligible(videos, min_frames)?;
    let rows = kept
        .par_iter()
        .map(|v| curve(v.first_frame(), v, spec, max_offset))
        .collect::<Result<Vec<_>>>()?;
    Ok(CurveMatrix {
        video_ids: kept.iter().map(|v| v.id.clone()).collect(),
        partner_ids: None,
        max_offset,
        rows,
    })
}

/// Like [`first_frame_curves`], but each first frame is scored against the frames of a
/// seeded random other video.
pub fn cross_video_baseline(
    videos: &[&VideoEmbedding],
    spec: &SimilaritySpec,
    seed: u64,
    min_frames: usize,
    max_offset: usize,
) -> Result<CurveMatrix> {
    let kept = eligible(videos, min_frames)?;
    if kept.len() < 2 {
        return Err(Error::InsufficientVideos {
            needed: 2,
            found: kept.len(),
        });
    }
    let partners: Vec<usize> = (0..kept.len())
        .map(|i| {
            let mut j = stream_rng(seed, STREAM_BASELINE, i as u64).random_range(0..kept.len() - 1);
            if j >= i {
                j += 1;
            }
            j
        })
        .collect();
    let rows = kept
        .par_iter()
        .zip(&partners)
        .map(|(v, &j)| curve(v.first_frame(), kept[j], spec, max_offset))
        .collect::<Result<Vec<_>>>()?;
    Ok(CurveMatrix {
        video_ids: kept.iter().map(|v| v.id.clone()).collect(),
        partner_ids: Some(partners.iter().map(|&j| kept[j].id.clone()).collect()),
        max_offset,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::Split;
    use crate::similarity::{sigmoid, PredictorHead};
    use crate::synthbench::{generate_drifting_dataset, DriftConfig};
    use proptest::prelude::*;

    fn vid(id: &str, frames: &[Vec<f32>]) -> VideoEmbedding {
        VideoEmbedding::from_frames(id, Split::Test, frames, None).unwrap()
    }

    #[test]
    fn constant_and_linear_videos() {
        let constant = vid("c", &vec![vec![0.3, -1.0, 2.0, 5.0]; 6]);
        let linear = vid("l", &[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]);
        let corr = SimilaritySpec::corr();
        for mode in [ConsistencyMode::AllPairs, ConsistencyMode::FirstVsAll] {
            let r = mcc(&[&constant], &corr, 2, mode).unwrap();
            assert_eq!(r.per_video[0].mean_score, 1.0);
            assert_eq!(r.aggregate_std, 0.0);
            assert_eq!(mcc(&[&linear], &corr, 2, mode).unwrap().per_video[0].mean_score, 1.0);
        }
        let curves = first_frame_curves(&[&constant], &corr, 1, 80).unwrap();
        assert_eq!(curves.rows[0], vec![1.0; 6]);
    }

    #[test]
    fn filtering() {
        let short = vid("s", &[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let single = vid("one", &[vec![1.0, 2.0]]);
        let corr = SimilaritySpec::corr();
        assert!(matches!(
            mcc(&[&short], &corr, 80, ConsistencyMode::AllPairs),
            Err(Error::AllVideosFiltered { min_frames: 80 })
        ));
        assert!(mcc(&[&single], &corr, 1, ConsistencyMode::AllPairs).is_err());
        let r = mcc(&[&short, &single], &corr, 1, ConsistencyMode::AllPairs).unwrap();
        assert_eq!(r.per_video.len(), 1);
        assert_eq!(r.n_skipped, 1);
        assert!(first_frame_curves(&[&short], &corr, 3, 80).is_err());
    }

    #[test]
    fn pred_offset_one_is_identity_constant() {
        let mut head = PredictorHead::zeros(3, 2);
        head.layers_mut()[1].bias[0] = 0.7;
        let expected = sigmoid(0.7);
        let vids = [
            vid("a", &[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 2.0]]),
            vid("b", &[vec![5.0, 1.0, 2.0], vec![3.0, 3.0, 3.0]]),
        ];
        let refs: Vec<&VideoEmbedding> = vids.iter().collect();
        let c = first_frame_curves(&refs, &SimilaritySpec::pred(head), 1, 80).unwrap();
        assert!(c.rows.iter().all(|r| r[0] == expected));
    }

    #[test]
    fn drifting_curves_decay() {
        let ds = generate_drifting_dataset(&DriftConfig {
            n_videos: 40,
            frames_per_video: 80,
            dimension: 32,
            drift: 0.02,
            noise: 0.05,
            seed: 3,
        })
        .unwrap();
        let refs = ds.split(Split::Test);
        let means = first_frame_curves(&refs, &SimilaritySpec::corr(), 80, 80)
            .unwrap()
            .column_means();
        assert_eq!(means.len(), 80);
        for w in means.windows(2) {
            assert!(w[1] <= w[0] + 0.05, "{means:?}");
        }
        assert!(means[79] < means[1]);
    }

    #[test]
    fn baseline_pairs_and_determinism() {
        let vids = [vid("a", &[vec![1.0, 2.0, 4.0]]), vid("b", &[vec![3.0, 1.0, 0.0]])];
        let refs: Vec<&VideoEmbedding> = vids.iter().collect();
        let corr = SimilaritySpec::corr();
        let b = cross_video_baseline(&refs, &corr, 5, 1, 80).unwrap();
        assert_eq!(b.partner_ids, Some(vec!["b".to_string(), "a".to_string()]));
        assert_eq!(b, cross_video_baseline(&refs, &corr, 5, 1, 80).unwrap());
        assert!(matches!(
            cross_video_baseline(&refs[..1], &corr, 5, 1, 80),
            Err(Error::InsufficientVideos { .. })
        ));
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("video_id,offset,score\na,1,"));
    }

    proptest! {
        #[test]
        fn all_pairs_invariant_to_frame_reversal(
            frames in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 4), 2..10)
        ) {
            let fwd = vid("f", &frames);
            let rev: Vec<Vec<f32>> = frames.iter().rev().cloned().collect();
            let back = vid("f", &rev);
            for spec in [SimilaritySpec::corr(), SimilaritySpec::l1()] {
                let a = mcc(&[&fwd], &spec, 2, ConsistencyMode::AllPairs).unwrap();
                let b = mcc(&[&back], &spec, 2, ConsistencyMode::AllPairs).unwrap();
                prop_assert!((a.per_video[0].mean_score - b.per_video[0].mean_score).abs() <= 1e-9);
                if spec.metric() == crate::similarity::Metric::Corr {
                    prop_assert!((-1.0..=1.0).contains(&a.per_video[0].mean_score));
                }
            }
        }
    }
}
