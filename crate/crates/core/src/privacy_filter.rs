//! P_max computation, percentile threshold calibration and synthetic-video flagging.
//!
//! For a query video, P_max is the highest same-source score between its first frame and
//! any reference (training) video. The privacy threshold is the nearest-rank percentile of
//! the P_max values of real held-out videos; synthetic videos strictly above it are flagged
//! as memorized and dropped from the released set.

use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::VideoEmbedding;
use crate::error::{Error, Result};
use crate::similarity::{score, ScoreKernel, SimilaritySpec};

/// How a query's first frame is compared against one reference video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Score against the reference video's first frame.
    #[default]
    FirstVsFirst,
    /// Mean score against every frame of the reference video.
    FirstVsAllMean,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::FirstVsFirst => "first_vs_first",
            Aggregation::FirstVsAllMean => "first_vs_all_mean",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "first_vs_first" => Ok(Aggregation::FirstVsFirst),
            "first_vs_all_mean" => Ok(Aggregation::FirstVsAllMean),
            other => Err(Error::InvalidConfig(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmaxRow {
    pub query_id: String,
    pub pmax: f64,
    pub argmax_train_id: String,
    pub aggregation: Aggregation,
}

/// One row per query video.
#[derive(Debug, Clone, PartialEq)]
pub struct PmaxTable {
    pub rows: Vec<PmaxRow>,
    pub aggregation: Aggregation,
    /// Label of the reference dataset.
    pub reference: String,
    /// Tag of the similarity spec; unknown for tables read back from CSV.
    pub spec: Option<String>,
}

impl PmaxTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn with_reference(mut self, label: impl Into<String>) -> Self {
        self.reference = label.into();
        self
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if self.rows.is_empty() {
            w.write_record(["query_id", "pmax", "argmax_train_id", "aggregation"])?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(io::BufWriter::new(file))
    }

    pub fn read_csv<R: io::Read>(reader: R, reference: impl Into<String>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let rows = r.deserialize().collect::<std::result::Result<Vec<PmaxRow>, _>>()?;
        let aggregation = rows.first().map(|r| r.aggregation).unwrap_or_default();
        if let Some(bad) = rows.iter().find(|r| r.aggregation != aggregation) {
            return Err(Error::SpecMismatch(format!(
                "row `{}` uses aggregation {} but the table uses {aggregation}",
                bad.query_id, bad.aggregation
            )));
        }
        if let Some(bad) = rows.iter().find(|r| !r.pmax.is_finite()) {
            return Err(Error::NonFiniteValue {
                video_id: bad.query_id.clone(),
                frame: 0,
            });
        }
        Ok(Self {
            rows,
            aggregation,
            reference: reference.into(),
            spec: None,
        })
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(io::BufReader::new(file), path.display().to_string())
    }
}

/// `a` beats `b` when strictly higher, or equal with the smaller id.
pub(crate) fn better(score: f64, id: &str, best_score: f64, best_id: &str) -> bool {
    score > best_score || (score == best_score && id < best_id)
}

fn check_inputs(queries: &[&VideoEmbedding], reference: &[&VideoEmbedding]) -> Result<usize> {
    let dimension = reference.first().ok_or(Error::EmptyReference)?.dimension();
    if let Some(v) = queries
        .iter()
        .chain(reference)
        .find(|v| v.dimension() != dimension)
    {
        return Err(Error::DimensionMismatch(format!(
            "video `{}` has dimension {} but the reference uses {dimension}",
            v.id,
            v.dimension()
        )));
    }
    Ok(dimension)
}

/// P_max of a single query, scored pair by pair.
pub fn pmax(
    query: &VideoEmbedding,
    reference: &[&VideoEmbedding],
    spec: &SimilaritySpec,
    aggregation: Aggregation,
) -> Result<(f64, String)> {
    check_inputs(&[query], reference)?;
    let q = query.first_frame();
    let mut best: Option<(f64, &str)> = None;
    for v in reference {
        let s = match aggregation {
            Aggregation::FirstVsFirst => score(spec, q, v.first_frame())?,
            Aggregation::FirstVsAllMean => {
                let mut sum = 0.0;
                for f in v.frames() {
                    sum += score(spec, q, f)?;
                }
                sum / v.num_frames() as f64
            }
        };
        match best {
            Some((bs, bid)) if !better(s, &v.id, bs, bid) => {}
            _ => best = Some((s, &v.id)),
        }
    }
    let (s, id) = best.expect("reference is non-empty");
    Ok((s, id.to_string()))
}

/// P_max for every query, blocked and parallel over query tiles on the current rayon pool.
pub fn pmax_all(
    queries: &[&VideoEmbedding],
    reference: &[&VideoEmbedding],
    spec: &SimilaritySpec,
    aggregation: Aggregation,
) -> Result<PmaxTable> {
    let dimension = check_inputs(queries, reference)?;
    let kernel = ScoreKernel::new(spec);
    let prepared_queries = kernel.prepare(dimension, queries.iter().map(|v| v.first_frame()))?;

    // Reference video ranks by id, for the smallest-id tie-break.
    let mut by_id: Vec<usize> = (0..reference.len()).collect();
    by_id.sort_by(|&a, &b| reference[a].id.cmp(&reference[b].id));
    let mut id_rank = vec![0usize; reference.len()];
    for (rank, &i) in by_id.iter().enumerate() {
        id_rank[i] = rank;
    }
    let tile = kernel.tile();
    let n_tiles = queries.len().div_ceil(tile);
    let take_best = |best: &mut (f64, usize), s: f64, v: usize| {
        if s > best.0 || (s == best.0 && id_rank[v] < id_rank[best.1]) {
            *best = (s, v);
        }
    };

    let winners: Vec<(f64, usize)> = match aggregation {
        Aggregation::FirstVsFirst => {
            let refs = kernel.prepare(dimension, reference.iter().map(|v| v.first_frame()))?;
            (0..n_tiles)
                .into_par_iter()
                .flat_map_iter(|t| {
                    let start = t * tile;
                    let end = (start + tile).min(queries.len());
                    let mut best = vec![(f64::NEG_INFINITY, 0usize); end - start];
                    kernel.visit_rows(&prepared_queries, start..end, &refs, |q, r0, scores| {
                        let slot = &mut best[q - start];
                        for (k, &s) in scores.iter().enumerate() {
                            take_best(slot, s, r0 + k);
                        }
                    });
                    best
                })
                .collect()
        }
        Aggregation::FirstVsAllMean => {
            let refs = kernel.prepare(dimension, reference.iter().flat_map(|v| v.frames()))?;
            let owner: Vec<usize> = reference
                .iter()
                .enumerate()
                .flat_map(|(i, v)| std::iter::repeat_n(i, v.num_frames()))
                .collect();
            let n_ref = reference.len();
            (0..n_tiles)
                .into_par_iter()
                .flat_map_iter(|t| {
                    let start = t * tile;
                    let end = (start + tile).min(queries.len());
                    let mut sums = vec![0.0f64; (end - start) * n_ref];
                    kernel.visit_rows(&prepared_queries, start..end, &refs, |q, r0, scores| {
                        let row = &mut sums[(q - start) * n_ref..(q - start + 1) * n_ref];
                        for (k, &s) in scores.iter().enumerate() {
                            row[owner[r0 + k]] += s;
                        }
                    });
                    sums.chunks_exact(n_ref)
                        .map(|row| {
                            let mut best = (f64::NEG_INFINITY, 0usize);
                            for (v, &sum) in row.iter().enumerate() {
                                take_best(&mut best, sum / reference[v].num_frames() as f64, v);
                            }
                            best
                        })
                        .collect::<Vec<_>>()
                })
                .collect()
        }
    };

    let rows = queries
        .iter()
        .zip(winners)
        .map(|(q, (pmax, v))| PmaxRow {
            query_id: q.id.clone(),
            pmax,
            argmax_train_id: reference[v].id.clone(),
            aggregation,
        })
        .collect();
    Ok(PmaxTable {
        rows,
        aggregation,
        reference: String::new(),
        spec: Some(spec.describe()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyThreshold {
    /// Similarity-oriented threshold; synthetic videos strictly above it are flagged.
    pub value: f64,
    pub percentile: f64,
    pub calibration_size: usize,
    pub aggregation: Aggregation,
    pub spec: Option<String>,
}

/// 1-indexed nearest rank `⌈p/100 · n⌉`, clamped to `1..=n`.
pub fn nearest_rank(percentile: f64, n: usize) -> usize {
    ((percentile * n as f64 / 100.0).ceil() as usize).clamp(1, n.max(1))
}

/// Nearest-rank percentile of the table's P_max values.
pub fn calibrate_threshold(table: &PmaxTable, percentile: f64) -> Result<PrivacyThreshold> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::InvalidConfig(format!(
            "percentile {percentile} outside (0, 100)"
        )));
    }
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    let mut values: Vec<f64> = table.rows.iter().map(|r| r.pmax).collect();
    values.sort_by(f64::total_cmp);
    let rank = nearest_rank(percentile, values.len());
    Ok(PrivacyThreshold {
        value: values[rank - 1],
        percentile,
        calibration_size: values.len(),
        aggregation: table.aggregation,
        spec: table.spec.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub threshold: PrivacyThreshold,
    pub n_synthetic: usize,
    pub flagged_count: usize,
    pub retained_count: usize,
    pub flagged_fraction: f64,
    pub flagged_ids: Vec<String>,
    /// The anonymized release set.
    pub retained_ids: Vec<String>,
}

pub(crate) fn check_compatible(table: &PmaxTable, threshold: &PrivacyThreshold) -> Result<()> {
    if table.aggregation != threshold.aggregation {
        return Err(Error::SpecMismatch(format!(
            "table aggregation {} differs from threshold aggregation {}",
            table.aggregation, threshold.aggregation
        )));
    }
    if let (Some(a), Some(b)) = (&table.spec, &threshold.spec) {
        if a != b {
            return Err(Error::SpecMismatch(format!(
                "table scored with `{a}` but threshold calibrated with `{b}`"
            )));
        }
    }
    Ok(())
}

pub fn apply_filter(table: &PmaxTable, threshold: &PrivacyThreshold) -> Result<PrivacyReport> {
    check_compatible(table, threshold)?;
    let (flagged, retained): (Vec<&PmaxRow>, Vec<&PmaxRow>) =
        table.rows.iter().partition(|r| r.pmax > threshold.value);
    let n = table.rows.len();
    Ok(PrivacyReport {
        threshold: threshold.clone(),
        n_synthetic: n,
        flagged_count: flagged.len(),
        retained_count: retained.len(),
        flagged_fraction: if n == 0 {
            0.0
        } else {
            flagged.len() as f64 / n as f64
        },
        flagged_ids: flagged.into_iter().map(|r| r.query_id.clone()).collect(),
        retained_ids: retained.into_iter().map(|r| r.query_id.clone()).collect(),
    })
}
