//! Generative recall and memorization accounting over a synthetic P_max table.
//!
//! A training video is *learned* when it is the argmax of at least one synthetic video, and
//! *learned but memorized* when every synthetic video attributed to it is above the privacy
//! threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::VideoEmbedding;
use crate::error::{Error, Result};
use crate::privacy_filter::{check_compatible, pmax, pmax_all, Aggregation, PmaxRow, PmaxTable, PrivacyThreshold};
use crate::similarity::SimilaritySpec;

/// Number of frequency entries kept in the JSON summary.
pub const TOP_FREQUENCIES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallReport {
    pub n_train: usize,
    pub n_synthetic: usize,
    pub threshold: f64,
    /// Sorted.
    pub learned_ids: Vec<String>,
    pub learned_count: usize,
    pub learned_fraction: f64,
    pub memorized_count: usize,
    pub memorized_fraction: f64,
    /// Sorted.
    pub learned_but_memorized_ids: Vec<String>,
    pub learned_but_memorized_count: usize,
    pub frequency: BTreeMap<String, usize>,
    pub max_frequency_id: Option<String>,
    pub max_frequency: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEntry {
    pub train_id: String,
    pub count: usize,
}

/// JSON form of a [`RecallReport`], with only the most frequent attributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallSummary {
    pub n_train: usize,
    pub n_synthetic: usize,
    pub threshold: f64,
    pub learned_count: usize,
    pub learned_fraction: f64,
    pub memorized_count: usize,
    pub memorized_fraction: f64,
    pub learned_but_memorized_count: usize,
    pub learned_but_memorized_ids: Vec<String>,
    pub max_frequency_id: Option<String>,
    pub max_frequency: usize,
    pub top_frequencies: Vec<FrequencyEntry>,
}

impl RecallReport {
    /// Frequency entries, most frequent first and ties by id.
    pub fn ranked_frequencies(&self) -> Vec<FrequencyEntry> {
        let mut entries: Vec<FrequencyEntry> = self
            .frequency
            .iter()
            .map(|(id, &count)| FrequencyEntry {
                train_id: id.clone(),
                count,
            })
            .collect();
        entries.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.train_id.cmp(&b.train_id)));
        entries
    }

    pub fn summary(&self) -> RecallSummary {
        let mut top = self.ranked_frequencies();
        top.truncate(TOP_FREQUENCIES);
        RecallSummary {
            n_train: self.n_train,
            n_synthetic: self.n_synthetic,
            threshold: self.threshold,
            learned_count: self.learned_count,
            learned_fraction: self.learned_fraction,
            memorized_count: self.memorized_count,
            memorized_fraction: self.memorized_fraction,
            learned_but_memorized_count: self.learned_but_memorized_count,
            learned_but_memorized_ids: self.learned_but_memorized_ids.clone(),
            max_frequency_id: self.max_frequency_id.clone(),
            max_frequency: self.max_frequency,
            top_frequencies: top,
        }
    }

    /// Full histogram as CSV `train_id,count`, most frequent first.
    pub fn write_frequency_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["train_id", "count"])?;
        for e in self.ranked_frequencies() {
            w.write_record([e.train_id, e.count.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_frequency_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_frequency_csv(io::BufWriter::new(file))
    }

    fn is_memorized(&self, row: &PmaxRow) -> bool {
        row.pmax > self.threshold
    }
}

fn fraction(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn analyze_recall(
    synthetic_table: &PmaxTable,
    threshold: &PrivacyThreshold,
    n_train: usize,
) -> Result<RecallReport> {
    check_compatible(synthetic_table, threshold)?;
    let mut frequency: BTreeMap<String, usize> = BTreeMap::new();
    // per train id: whether some attributing synthetic row is below the threshold
    let mut reachable_legally: BTreeMap<&str, bool> = BTreeMap::new();
    let mut memorized_count = 0;
    for row in &synthetic_table.rows {
        *frequency.entry(row.argmax_train_id.clone()).or_default() += 1;
        let memorized = row.pmax > threshold.value;
        memorized_count += memorized as usize;
        *reachable_legally.entry(&row.argmax_train_id).or_default() |= !memorized;
    }
    let learned_ids: Vec<String> = frequency.keys().cloned().collect();
    if learned_ids.len() > n_train {
        return Err(Error::InvalidConfig(format!(
            "{} distinct attributed training videos exceed n_train = {n_train}",
            learned_ids.len()
        )));
    }
    let learned_but_memorized_ids: Vec<String> = reachable_legally
        .iter()
        .filter(|(_, &legal)| !legal)
        .map(|(id, _)| id.to_string())
        .collect();
    let mut max_frequency_id = None;
    let mut max_frequency = 0;
    for (id, &count) in &frequency {
        if count > max_frequency {
            max_frequency = count;
            max_frequency_id = Some(id.clone());
        }
    }
    let n_synthetic = synthetic_table.rows.len();
    Ok(RecallReport {
        n_train,
        n_synthetic,
        threshold: threshold.value,
        learned_count: learned_ids.len(),
        learned_fraction: fraction(learned_ids.len(), n_train),
        learned_ids,
        memorized_count,
        memorized_fraction: fraction(memorized_count, n_synthetic),
        learned_but_memorized_count: learned_but_memorized_ids.len(),
        learned_but_memorized_ids,
        frequency,
        max_frequency_id,
        max_frequency,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Fraction of train videos that are the argmax of at least one test video.
    ArgmaxMembership,
    /// Fraction of test videos whose nearest neighbour among train and the other test
    /// videos is a train video. Ties count as train.
    NearestIsTrain,
}

/// Recall-style coverage of real held-out videos, the reference point for generative recall.
pub fn baseline_coverage(
    test: &[&VideoEmbedding],
    train: &[&VideoEmbedding],
    spec: &SimilaritySpec,
    aggregation: Aggregation,
    mode: BaselineMode,
) -> Result<f64> {
    if test.is_empty() || train.is_empty() {
        return Err(Error::EmptyReference);
    }
    let table = pmax_all(test, train, spec, aggregation)?;
    match mode {
        BaselineMode::ArgmaxMembership => {
            let hit: BTreeSet<&str> = table.rows.iter().map(|r| r.argmax_train_id.as_str()).collect();
            Ok(fraction(hit.len(), train.len()))
        }
        BaselineMode::NearestIsTrain => {
            let nearest_train = (0..test.len())
                .into_par_iter()
                .map(|i| {
                    let others: Vec<&VideoEmbedding> = test
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, v)| *v)
                        .collect();
                    if others.is_empty() {
                        return Ok(true);
                    }
                    let (best_test, _) = pmax(test[i], &others, spec, aggregation)?;
                    Ok(table.rows[i].pmax >= best_test)
                })
                .collect::<Result<Vec<bool>>>()?;
            Ok(fraction(nearest_train.iter().filter(|&&b| b).count(), test.len()))
        }
    }
}

/// Up to `k` non-memorized synthetic videos for every learned training video that is not
/// learned-but-memorized, highest P_max first and ties by id. Output is grouped by training
/// id in ascending order.
pub fn select_recall_subsets(report: &RecallReport, synthetic_table: &PmaxTable, k: usize) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut eligible: BTreeMap<&str, Vec<&PmaxRow>> = BTreeMap::new();
    for row in &synthetic_table.rows {
        if !report.is_memorized(row) {
            eligible.entry(&row.argmax_train_id).or_default().push(row);
        }
    }
    let mut out = Vec::new();
    for (_, mut rows) in eligible {
        rows.sort_by(|a, b| b.pmax.total_cmp(&a.pmax).then_with(|| a.query_id.cmp(&b.query_id)));
        out.extend(rows.into_iter().take(k).map(|r| r.query_id.clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionRole {
    TrainLearned,
    TrainUnlearned,
    Synthetic,
}

impl ProjectionRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjectionRole::TrainLearned => "train_learned",
            ProjectionRole::TrainUnlearned => "train_unlearned",
            ProjectionRole::Synthetic => "synthetic",
        }
    }
}

/// First-frame features of every train and synthetic video as CSV `id,role,f0,...`.
pub fn write_projection_table<W: io::Write>(
    train: &[&VideoEmbedding],
    synthetic: &[&VideoEmbedding],
    report: &RecallReport,
    writer: W,
) -> Result<()> {
    let dimension = train.iter().chain(synthetic).next().map_or(0, |v| v.dimension());
    if let Some(v) = train.iter().chain(synthetic).find(|v| v.dimension() != dimension) {
        return Err(Error::DimensionMismatch(format!(
            "video `{}` has dimension {} but the table uses {dimension}",
            v.id,
            v.dimension()
        )));
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|v| v.id.as_str()).collect();
    if let Some(id) = report.learned_ids.iter().find(|id| !train_ids.contains(id.as_str())) {
        return Err(Error::UnknownVideo(id.clone()));
    }
    let learned: BTreeSet<&str> = report.learned_ids.iter().map(String::as_str).collect();

    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "role".to_string()];
    header.extend((0..dimension).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    let rows = train
        .iter()
        .map(|v| {
            let role = if learned.contains(v.id.as_str()) {
                ProjectionRole::TrainLearned
            } else {
                ProjectionRole::TrainUnlearned
            };
            (*v, role)
        })
        .chain(synthetic.iter().map(|v| (*v, ProjectionRole::Synthetic)));
    let mut record = Vec::with_capacity(dimension + 2);
    for (v, role) in rows {
        record.clear();
        record.push(v.id.clone());
        record.push(role.as_str().to_string());
        record.extend(v.first_frame().iter().map(|x| x.to_string()));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn export_projection_table(
    train: &[&VideoEmbedding],
    synthetic: &[&VideoEmbedding],
    report: &RecallReport,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_projection_table(train, synthetic, report, io::BufWriter::new(file))
}
