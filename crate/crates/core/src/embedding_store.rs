//! Embedding datasets and the EMB1 on-disk format.
//!
//! An [`EmbeddingDataset`] is an ordered collection of videos, each carrying
//! its frame embeddings contiguously (`num_frames × dimension` row-major
//! `f32`). The EMB1 format is the boundary to upstream feature extractors and
//! is little-endian throughout:
//!
//! ```text
//! magic "EMB1" | version u32 = 1 | dimension u32 | num_videos u64
//! per video: id_len u16 | id (UTF-8) | split u8 | num_frames u32 | ef f32 (NaN = absent)
//!            | frames f32[num_frames * dimension]
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_VERSION: u32 = 1;
pub const MAX_DIMENSION: usize = 4096;
pub const MAX_FRAMES: usize = 1 << 16;

/// Which partition of the audit a video belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Synthetic];

    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
            Split::Synthetic => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Split> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            2 => Some(Split::Synthetic),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "0" => Ok(Split::Train),
            "test" | "1" => Ok(Split::Test),
            "synthetic" | "syn" | "2" => Ok(Split::Synthetic),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

/// One video: an ordered run of frame embeddings stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEmbedding {
    pub id: String,
    pub split: Split,
    /// Ejection fraction in percent, when known.
    pub ef_value: Option<f32>,
    dimension: usize,
    data: Vec<f32>,
}

impl VideoEmbedding {
    /// Builds a video from row-major frame data. Only the shape is checked here;
    /// value-level checks happen when the video joins a dataset.
    pub fn new(
        id: impl Into<String>,
        split: Split,
        dimension: usize,
        data: Vec<f32>,
        ef_value: Option<f32>,
    ) -> Result<Self> {
        let id = id.into();
        if dimension == 0 {
            return Err(Error::DimensionMismatch(format!(
                "video `{id}` declares dimension 0"
            )));
        }
        if !data.len().is_multiple_of(dimension) {
            return Err(Error::DimensionMismatch(format!(
                "video `{id}` has {} values, not a multiple of dimension {dimension}",
                data.len()
            )));
        }
        Ok(Self {
            id,
            split,
            ef_value,
            dimension,
            data,
        })
    }

    pub fn from_frames(
        id: impl Into<String>,
        split: Split,
        frames: &[Vec<f32>],
        ef_value: Option<f32>,
    ) -> Result<Self> {
        let id = id.into();
        let dimension = frames.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = frames.iter().position(|f| f.len() != dimension) {
            return Err(Error::DimensionMismatch(format!(
                "video `{id}` frame {bad} has length {} instead of {dimension}",
                frames[bad].len()
            )));
        }
        let data = frames.concat();
        Self::new(id, split, dimension.max(1), data, ef_value)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.dimension
    }

    /// Zero-based frame access.
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dimension..(t + 1) * self.dimension]
    }

    pub fn first_frame(&self) -> &[f32] {
        self.frame(0)
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dimension)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Result of one validation check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// First failing check turned into the matching error.
    fn into_error(self, dataset: &EmbeddingDataset) -> Option<Error> {
        let failed = self.checks.into_iter().find(|c| !c.passed)?;
        let detail = failed.detail.unwrap_or_default();
        Some(match failed.name {
            "finiteness" => {
                let (video_id, frame) = dataset.first_non_finite().unwrap_or_default();
                Error::NonFiniteValue { video_id, frame }
            }
            "id_uniqueness" => Error::DuplicateVideoId(detail),
            "ef_range" => Error::InvalidMetadata {
                video_id: detail,
                reason: "ejection fraction outside [0, 100]".into(),
            },
            _ => Error::DimensionMismatch(detail),
        })
    }
}

/// Indexed collection of videos sharing one feature dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingDataset {
    dimension: usize,
    videos: Vec<VideoEmbedding>,
    split_index: BTreeMap<Split, Vec<usize>>,
    id_index: HashMap<String, usize>,
    /// Free-text source label. Not persisted in EMB1 and not part of equality.
    pub provenance: String,
}

impl PartialEq for EmbeddingDataset {
    fn eq(&self, other: &Self) -> bool {
        self.dimension == other.dimension && self.videos == other.videos
    }
}

impl EmbeddingDataset {
    /// Builds and fully validates a dataset.
    pub fn new(
        dimension: usize,
        videos: Vec<VideoEmbedding>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let dataset = Self::from_parts(dimension, videos, provenance);
        match validate(&dataset).into_error(&dataset) {
            Some(err) => Err(err),
            None => Ok(dataset),
        }
    }

    /// Builds a dataset without validation; use [`validate`] to inspect it.
    pub fn from_parts(
        dimension: usize,
        videos: Vec<VideoEmbedding>,
        provenance: impl Into<String>,
    ) -> Self {
        let mut split_index: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
        let mut id_index = HashMap::with_capacity(videos.len());
        for (pos, video) in videos.iter().enumerate() {
            split_index.entry(video.split).or_default().push(pos);
            id_index.entry(video.id.clone()).or_insert(pos);
        }
        Self {
            dimension,
            videos,
            split_index,
            id_index,
            provenance: provenance.into(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn videos(&self) -> &[VideoEmbedding] {
        &self.videos
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(VideoEmbedding::num_frames).sum()
    }

    pub fn split_positions(&self, split: Split) -> &[usize] {
        self.split_index.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn split(&self, split: Split) -> Vec<&VideoEmbedding> {
        self.split_positions(split)
            .iter()
            .map(|&i| &self.videos[i])
            .collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&VideoEmbedding> {
        self.position(id).map(|i| &self.videos[i])
    }

    pub fn video(&self, id: &str) -> Result<&VideoEmbedding> {
        self.get(id).ok_or_else(|| Error::UnknownVideo(id.to_string()))
    }

    fn first_non_finite(&self) -> Option<(String, usize)> {
        self.videos.iter().find_map(|v| {
            v.frames()
                .position(|f| f.iter().any(|x| !x.is_finite()))
                .map(|t| (v.id.clone(), t))
        })
    }
}

/// Runs every structural check on a dataset, recording failures instead of erroring.
pub fn validate(dataset: &EmbeddingDataset) -> ValidationReport {
    let mut checks = Vec::with_capacity(6);
    let d = dataset.dimension;

    let dim_ok = (1..=MAX_DIMENSION).contains(&d);
    let mismatched = dataset.videos.iter().find(|v| v.dimension != d);
    checks.push(CheckResult {
        name: "dimension_uniformity",
        passed: dim_ok && mismatched.is_none(),
        detail: if !dim_ok {
            Some(format!("dataset dimension {d} outside 1..={MAX_DIMENSION}"))
        } else {
            mismatched.map(|v| {
                format!(
                    "video `{}` has dimension {} but dataset declares {d}",
                    v.id, v.dimension
                )
            })
        },
    });

    let non_finite = dataset.first_non_finite();
    checks.push(CheckResult {
        name: "finiteness",
        passed: non_finite.is_none(),
        detail: non_finite.map(|(id, t)| format!("video `{id}` frame {t}")),
    });

    let mut seen = HashSet::with_capacity(dataset.videos.len());
    let duplicate = dataset
        .videos
        .iter()
        .find(|v| !seen.insert(v.id.as_str()))
        .map(|v| v.id.clone());
    checks.push(CheckResult {
        name: "id_uniqueness",
        passed: duplicate.is_none(),
        detail: duplicate,
    });

    let mut covered = vec![0usize; dataset.videos.len()];
    let mut misfiled = None;
    for (split, positions) in &dataset.split_index {
        for &p in positions {
            match dataset.videos.get(p) {
                Some(v) if v.split == *split => covered[p] += 1,
                _ => misfiled = Some(p),
            }
        }
    }
    let uncovered = covered.iter().position(|&c| c != 1);
    checks.push(CheckResult {
        name: "split_partition",
        passed: misfiled.is_none() && uncovered.is_none(),
        detail: misfiled
            .or(uncovered)
            .map(|p| format!("video position {p} is not filed under exactly one split")),
    });

    let bad_frames = dataset
        .videos
        .iter()
        .find(|v| v.num_frames() == 0 || v.num_frames() > MAX_FRAMES);
    checks.push(CheckResult {
        name: "frame_count",
        passed: bad_frames.is_none(),
        detail: bad_frames.map(|v| format!("video `{}` has {} frames", v.id, v.num_frames())),
    });

    let bad_ef = dataset.videos.iter().find(|v| {
        v.ef_value
            .is_some_and(|ef| !ef.is_finite() || !(0.0..=100.0).contains(&ef))
    });
    checks.push(CheckResult {
        name: "ef_range",
        passed: bad_ef.is_none(),
        detail: bad_ef.map(|v| v.id.clone()),
    });

    ValidationReport { checks }
}

/// Serializes a dataset to EMB1 bytes. Output depends only on the dataset contents.
pub fn encode_dataset(dataset: &EmbeddingDataset) -> Vec<u8> {
    let payload: usize = dataset
        .videos
        .iter()
        .map(|v| 2 + v.id.len() + 1 + 4 + 4 + 4 * v.data.len())
        .sum();
    let mut out = Vec::with_capacity(20 + payload);
    out.extend_from_slice(EMB1_MAGIC);
    out.extend_from_slice(&EMB1_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.dimension as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.videos.len() as u64).to_le_bytes());
    for video in &dataset.videos {
        out.extend_from_slice(&(video.id.len() as u16).to_le_bytes());
        out.extend_from_slice(video.id.as_bytes());
        out.push(video.split.code());
        out.extend_from_slice(&(video.num_frames() as u32).to_le_bytes());
        out.extend_from_slice(&video.ef_value.unwrap_or(f32::NAN).to_le_bytes());
        for x in &video.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn write_dataset(dataset: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let report = validate(dataset);
    if let Some(err) = report.into_error(dataset) {
        return Err(err);
    }
    for v in &dataset.videos {
        if v.id.len() > u16::MAX as usize {
            return Err(Error::InvalidMetadata {
                video_id: v.id.clone(),
                reason: "id longer than 65535 bytes".into(),
            });
        }
    }
    fs::write(path, encode_dataset(dataset)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes, path.display().to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::MalformedHeader(format!(
                "truncated {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(bytes: &[u8], provenance: impl Into<String>) -> Result<EmbeddingDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != EMB1_MAGIC {
        return Err(Error::MalformedHeader("missing EMB1 magic".into()));
    }
    let version = r.u32("version")?;
    if version != EMB1_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported version {version}"
        )));
    }
    let dimension = r.u32("dimension")? as usize;
    if !(1..=MAX_DIMENSION).contains(&dimension) {
        return Err(Error::MalformedHeader(format!(
            "dimension {dimension} outside 1..={MAX_DIMENSION}"
        )));
    }
    let num_videos = r.u64("video count")?;

    let mut videos = Vec::new();
    let mut ids = HashSet::new();
    for _ in 0..num_videos {
        let id_len = r.u16("id length")? as usize;
        let id = std::str::from_utf8(r.take(id_len, "video id")?)
            .map_err(|_| Error::MalformedHeader("video id is not UTF-8".into()))?
            .to_string();
        let split_code = r.take(1, "split")?[0];
        let split = Split::from_code(split_code).ok_or_else(|| {
            Error::MalformedHeader(format!("video `{id}` has unknown split code {split_code}"))
        })?;
        let num_frames = r.u32("frame count")? as usize;
        if num_frames == 0 || num_frames > MAX_FRAMES {
            return Err(Error::MalformedHeader(format!(
                "video `{id}` declares {num_frames} frames"
            )));
        }
        let ef = r.f32("ef value")?;
        let ef_value = if ef.is_nan() { None } else { Some(ef) };
        if let Some(ef) = ef_value {
            if !ef.is_finite() || !(0.0..=100.0).contains(&ef) {
                return Err(Error::InvalidMetadata {
                    video_id: id,
                    reason: format!("ejection fraction {ef} outside [0, 100]"),
                });
            }
        }

        let n_values = num_frames * dimension;
        if r.remaining() < 4 * n_values {
            return Err(Error::DimensionMismatch(format!(
                "video `{id}` declares {num_frames} frames of dimension {dimension} \
                 ({} bytes) but only {} bytes remain",
                4 * n_values,
                r.remaining()
            )));
        }
        let raw = r.take(4 * n_values, "frames")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue {
                video_id: id,
                frame: bad / dimension,
            });
        }
        if !ids.insert(id.clone()) {
            return Err(Error::DuplicateVideoId(id));
        }
        videos.push(VideoEmbedding {
            id,
            split,
            ef_value,
            dimension,
            data,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} trailing bytes after the last declared frame",
            r.remaining()
        )));
    }
    EmbeddingDataset::new(dimension, videos, provenance)
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    video_id: String,
    split: String,
    ef_value: Option<String>,
    feature_file: String,
    num_frames: usize,
}

/// Imports a dataset from a CSV manifest (`video_id,split,ef_value,feature_file,num_frames`).
/// Each feature file holds raw row-major little-endian `f32` of shape `(num_frames, dimension)`;
/// relative paths resolve against the manifest's directory.
pub fn import_csv_manifest(manifest: impl AsRef<Path>, dimension: usize) -> Result<EmbeddingDataset> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::Reader::from_path(manifest).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(manifest, io),
            _ => unreachable!(),
        },
        _ => Error::Csv(e),
    })?;
    let mut videos = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row?;
        let split: Split = row.split.parse()?;
        let ef_value = match row.ef_value.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<f32>().map_err(|_| Error::InvalidMetadata {
                video_id: row.video_id.clone(),
                reason: format!("unparseable ef_value `{s}`"),
            })?)
            .filter(|v| !v.is_nan()),
        };
        let feature_path = base.join(&row.feature_file);
        let raw = fs::read(&feature_path).map_err(|e| Error::io(&feature_path, e))?;
        let expected = 4 * row.num_frames * dimension;
        if raw.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "feature file {} has {} bytes, expected {expected} for {} frames of dimension {dimension}",
                feature_path.display(),
                raw.len(),
                row.num_frames
            )));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        videos.push(VideoEmbedding::new(row.video_id, split, dimension, data, ef_value)?);
    }
    EmbeddingDataset::new(dimension, videos, manifest.display().to_string())
}
