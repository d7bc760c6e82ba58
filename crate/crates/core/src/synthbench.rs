//! Deterministic cluster-structured embedding datasets and brute-force reference
//! implementations used to verify the fast paths.
//!
//! Each identity is a centre drawn from `N(0, sigma_inter²·I)`; every frame of a video of
//! that identity is the centre plus `N(0, sigma_intra²·I)` noise. Real videos are shuffled
//! into train and test; the synthetic split is derived according to [`SyntheticMode`].

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{EmbeddingDataset, Split, VideoEmbedding};
use crate::error::{Error, Result};
use crate::privacy_filter::{better, Aggregation, PmaxRow, PmaxTable};
use crate::seeding::stream_rng;
use crate::similarity::{score, SimilaritySpec};

const STREAM_CENTER: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_VIDEO: u64 = 3;
const STREAM_SYNTHETIC: u64 = 4;
const STREAM_DRIFT: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SyntheticMode {
    /// New videos around uniformly chosen training identities.
    ResampleIdentity,
    /// Training videos (cycled in order) plus `N(0, epsilon²)` noise.
    CopyWithNoise { epsilon: f64 },
    /// Videos around fresh identity centres.
    Independent,
}

fn default_videos_per_identity() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub n_identities: usize,
    /// Real videos recorded per identity; above 1 an identity can span train and test.
    #[serde(default = "default_videos_per_identity")]
    pub videos_per_identity: usize,
    pub frames_per_video: usize,
    pub dimension: usize,
    pub sigma_intra: f64,
    pub sigma_inter: f64,
    /// Shares of (train, test, synthetic) over `n_identities · videos_per_identity` videos.
    pub split_fractions: [f64; 3],
    pub synthetic_mode: SyntheticMode,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            n_identities: 100,
            videos_per_identity: 1,
            frames_per_video: 8,
            dimension: 128,
            sigma_intra: 0.05,
            sigma_inter: 1.0,
            split_fractions: [0.6, 0.2, 0.2],
            synthetic_mode: SyntheticMode::ResampleIdentity,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_identities == 0 || self.videos_per_identity == 0 {
            return bad("n_identities and videos_per_identity must be positive".into());
        }
        if self.frames_per_video == 0 || self.frames_per_video > crate::embedding_store::MAX_FRAMES {
            return bad(format!("frames_per_video {} out of range", self.frames_per_video));
        }
        if self.dimension == 0 || self.dimension > crate::embedding_store::MAX_DIMENSION {
            return bad(format!("dimension {} out of range", self.dimension));
        }
        if !(self.sigma_intra > 0.0 && self.sigma_intra.is_finite())
            || !(self.sigma_inter > 0.0 && self.sigma_inter.is_finite())
        {
            return bad("sigma_intra and sigma_inter must be positive and finite".into());
        }
        if self.split_fractions.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.split_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "split fractions {:?} must be in [0, 1] and sum to 1",
                self.split_fractions
            ));
        }
        if let SyntheticMode::CopyWithNoise { epsilon } = self.synthetic_mode {
            if !(epsilon >= 0.0 && epsilon.is_finite()) {
                return bad(format!("copy epsilon {epsilon} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Video counts for (train, test, synthetic).
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let total = self.n_identities * self.videos_per_identity;
        let n_train = ((self.split_fractions[0] * total as f64).round() as usize).min(total);
        let n_test =
            ((self.split_fractions[1] * total as f64).round() as usize).min(total - n_train);
        (n_train, n_test, total - n_train - n_test)
    }
}

fn id_width(total: usize) -> usize {
    total.to_string().len().max(5)
}

fn noisy_frames<R: Rng>(rng: &mut R, center: &[f64], frames: usize, sigma: f64) -> Vec<f32> {
    let mut data = Vec::with_capacity(frames * center.len());
    for _ in 0..frames {
        for &c in center {
            let z: f64 = StandardNormal.sample(rng);
            data.push((c + sigma * z) as f32);
        }
    }
    data
}

fn draw_center<R: Rng>(rng: &mut R, dimension: usize, sigma: f64) -> Vec<f64> {
    (0..dimension)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect()
}

/// Generates the train, test and synthetic splits of a clustered dataset.
pub fn generate_clustered_dataset(config: &ClusterConfig) -> Result<EmbeddingDataset> {
    config.validate()?;
    let (n_train, n_test, n_syn) = config.split_counts();
    let needs_train = !matches!(config.synthetic_mode, SyntheticMode::Independent);
    if n_syn > 0 && needs_train && n_train == 0 {
        return Err(Error::InvalidConfig(
            "this synthetic mode needs at least one training video".into(),
        ));
    }
    let d = config.dimension;
    let seed = config.seed;
    let centers: Vec<Vec<f64>> = (0..config.n_identities)
        .into_par_iter()
        .map(|i| draw_center(&mut stream_rng(seed, STREAM_CENTER, i as u64), d, config.sigma_inter))
        .collect();

    // Real slots are (identity) entries; the first n_train + n_test after shuffling are real.
    let mut slots: Vec<usize> = (0..config.n_identities)
        .flat_map(|i| std::iter::repeat_n(i, config.videos_per_identity))
        .collect();
    slots.shuffle(&mut stream_rng(seed, STREAM_SHUFFLE, 0));
    let width = id_width(slots.len());

    let real: Vec<(Split, usize, usize)> = (0..n_train + n_test)
        .map(|k| {
            if k < n_train {
                (Split::Train, k, slots[k])
            } else {
                (Split::Test, k - n_train, slots[k])
            }
        })
        .collect();
    let frames = config.frames_per_video;
    let mut videos: Vec<VideoEmbedding> = real
        .par_iter()
        .enumerate()
        .map(|(global, &(split, k, identity))| {
            let mut rng = stream_rng(seed, STREAM_VIDEO, global as u64);
            let ef = rng.random_range(10.0f32..80.0);
            let data = noisy_frames(&mut rng, &centers[identity], frames, config.sigma_intra);
            let prefix = if split == Split::Train { "train" } else { "test" };
            VideoEmbedding::new(format!("{prefix}_{k:0width$}"), split, d, data, Some(ef))
        })
        .collect::<Result<_>>()?;

    let synthetic: Vec<VideoEmbedding> = (0..n_syn)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, STREAM_SYNTHETIC, j as u64);
            let data = match config.synthetic_mode {
                SyntheticMode::ResampleIdentity => {
                    let source = rng.random_range(0..n_train);
                    noisy_frames(&mut rng, &centers[real[source].2], frames, config.sigma_intra)
                }
                SyntheticMode::CopyWithNoise { epsilon } => {
                    let source = videos[j % n_train].data();
                    if epsilon == 0.0 {
                        source.to_vec()
                    } else {
                        source
                            .iter()
                            .map(|&x| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                (x as f64 + epsilon * z) as f32
                            })
                            .collect()
                    }
                }
                SyntheticMode::Independent => {
                    let center = draw_center(&mut rng, d, config.sigma_inter);
                    noisy_frames(&mut rng, &center, frames, config.sigma_intra)
                }
            };
            VideoEmbedding::new(format!("syn_{j:0width$}"), Split::Synthetic, d, data, None)
        })
        .collect::<Result<_>>()?;
    videos.extend(synthetic);
    EmbeddingDataset::new(d, videos, format!("synthbench(seed={seed})"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub dimension: usize,
    /// Per-frame displacement along a fixed random direction.
    pub drift: f64,
    /// Per-frame isotropic noise.
    pub noise: f64,
    pub seed: u64,
}

/// Videos whose frame `t` is `base + t · drift · direction + noise`, so that similarity to the
/// first frame decays with `t`. All videos land in the test split.
pub fn generate_drifting_dataset(config: &DriftConfig) -> Result<EmbeddingDataset> {
    if config.n_videos == 0 || config.frames_per_video == 0 || config.dimension == 0 {
        return Err(Error::InvalidConfig("drift fixture sizes must be positive".into()));
    }
    let d = config.dimension;
    let width = id_width(config.n_videos);
    let videos = (0..config.n_videos)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(config.seed, STREAM_DRIFT, i as u64);
            let base = draw_center(&mut rng, d, 1.0);
            let direction = draw_center(&mut rng, d, 1.0);
            let mut data = Vec::with_capacity(config.frames_per_video * d);
            for t in 0..config.frames_per_video {
                for (b, u) in base.iter().zip(&direction) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push((b + t as f64 * config.drift * u + config.noise * z) as f32);
                }
            }
            VideoEmbedding::new(format!("drift_{i:0width$}"), Split::Test, d, data, None)
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingDataset::new(d, videos, format!("drift(seed={})", config.seed))
}

/// Reference P_max: plain double loop over `score`, no blocking, no parallelism.
pub fn oracle_pmax(
    queries: &[&VideoEmbedding],
    reference: &[&VideoEmbedding],
    spec: &SimilaritySpec,
    aggregation: Aggregation,
) -> Result<PmaxTable> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let mut rows = Vec::with_capacity(queries.len());
    for q in queries {
        let first = q.first_frame();
        let mut best_score = f64::NEG_INFINITY;
        let mut best_id = "";
        for r in reference {
            let s = match aggregation {
                Aggregation::FirstVsFirst => score(spec, first, r.first_frame())?,
                Aggregation::FirstVsAllMean => {
                    let mut total = 0.0f64;
                    for t in 0..r.num_frames() {
                        total += score(spec, first, r.frame(t))?;
                    }
                    total / r.num_frames() as f64
                }
            };
            if best_id.is_empty() || better(s, &r.id, best_score, best_id) {
                best_score = s;
                best_id = &r.id;
            }
        }
        rows.push(PmaxRow {
            query_id: q.id.clone(),
            pmax: best_score,
            argmax_train_id: best_id.to_string(),
            aggregation,
        });
    }
    Ok(PmaxTable {
        rows,
        aggregation,
        reference: "oracle".into(),
        spec: Some(spec.describe()),
    })
}

/// Reference AUC: exhaustive count of concordant and tied positive/negative pairs.
pub fn oracle_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::EmptyScoreList("no positive scores"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyScoreList("no negative scores"));
    }
    let mut concordant = 0u64;
    let mut ties = 0u64;
    for &p in pos {
        for &n in neg {
            if p > n {
                concordant += 1;
            } else if p == n {
                ties += 1;
            }
        }
    }
    Ok((concordant as f64 + 0.5 * ties as f64) / (pos.len() as f64 * neg.len() as f64))
}
