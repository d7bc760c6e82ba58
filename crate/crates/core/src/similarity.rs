//! Same-source scoring functions and the blocked scoring kernel.
//!
//! Every metric is oriented so that a higher score means "more likely the same
//! source": L1 and L2 are negated distances, `Corr` is the Pearson correlation
//! of the two vectors seen as samples, and `Pred` is a learned head applied to
//! the element-wise absolute difference.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const HEAD1_MAGIC: &[u8; 4] = b"HEAD";
pub const HEAD1_VERSION: u32 = 1;

/// Queries × references handled per kernel tile.
pub const DEFAULT_TILE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    L2,
    Corr,
    Pred,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
            Metric::Corr => "corr",
            Metric::Pred => "pred",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            "corr" => Ok(Metric::Corr),
            "pred" => Ok(Metric::Pred),
            other => Err(Error::InvalidConfig(format!("unknown metric `{other}`"))),
        }
    }
}

/// A dense layer computing `weights · x + bias`; `weights` is `rows × cols` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            *o = self.bias[r] + dot(row, x);
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Multilayer perceptron on `|a - b|`: rectifier on hidden layers, logistic sigmoid on the
/// single output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorHead {
    layers: Vec<DenseLayer>,
}

impl PredictorHead {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeChainBroken("head has no layers".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.rows == 0 || layer.cols == 0 {
                return Err(Error::ShapeChainBroken(format!("layer {k} has a zero dimension")));
            }
            if layer.weights.len() != layer.rows * layer.cols || layer.bias.len() != layer.rows {
                return Err(Error::ShapeChainBroken(format!(
                    "layer {k} parameter count does not match {}x{}",
                    layer.rows, layer.cols
                )));
            }
            if let Some(next) = layers.get(k + 1) {
                if next.cols != layer.rows {
                    return Err(Error::ShapeChainBroken(format!(
                        "layer {k} outputs {} values but layer {} expects {}",
                        layer.rows,
                        k + 1,
                        next.cols
                    )));
                }
            }
            if layer
                .weights
                .iter()
                .chain(&layer.bias)
                .any(|w| !w.is_finite())
            {
                return Err(Error::NonFiniteWeight { layer: k });
            }
        }
        let last = layers.last().unwrap();
        if last.rows != 1 {
            return Err(Error::ShapeChainBroken(format!(
                "final layer has {} outputs, expected 1",
                last.rows
            )));
        }
        Ok(Self { layers })
    }

    /// All-zero head with one hidden layer; scores 0.5 for every pair.
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            layers: vec![DenseLayer::zeros(hidden, input_dim), DenseLayer::zeros(1, hidden)],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    pub fn max_width(&self) -> usize {
        self.layers.iter().map(|l| l.rows.max(l.cols)).max().unwrap_or(0)
    }

    /// Pre-sigmoid output for an already-formed feature vector.
    pub fn logit(&self, x: &[f64], scratch: &mut HeadScratch) -> f64 {
        scratch.ensure(self.max_width());
        let HeadScratch { a, b } = scratch;
        a[..x.len()].copy_from_slice(x);
        let mut width = x.len();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.apply(&a[..width], &mut b[..layer.rows]);
            if k != last {
                for v in &mut b[..layer.rows] {
                    *v = v.max(0.0);
                }
            }
            std::mem::swap(a, b);
            width = layer.rows;
        }
        a[0]
    }

    pub fn probability(&self, x: &[f64], scratch: &mut HeadScratch) -> f64 {
        sigmoid(self.logit(x, scratch))
    }

    /// Rounds every parameter to the nearest `f32`, the precision HEAD1 stores.
    pub fn round_to_f32(&mut self) {
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = *w as f32 as f64;
            }
        }
    }

    /// Short content hash used to tag reports produced with this head.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(encode_head(self));
        hex::encode(&digest[..8])
    }
}

/// Reusable activation buffers for head evaluation.
#[derive(Debug, Default, Clone)]
pub struct HeadScratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl HeadScratch {
    fn ensure(&mut self, width: usize) {
        if self.a.len() < width {
            self.a.resize(width, 0.0);
            self.b.resize(width, 0.0);
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn encode_head(head: &PredictorHead) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(HEAD1_MAGIC);
    out.extend_from_slice(&HEAD1_VERSION.to_le_bytes());
    out.extend_from_slice(&(head.layers.len() as u32).to_le_bytes());
    for layer in &head.layers {
        out.extend_from_slice(&(layer.rows as u32).to_le_bytes());
        out.extend_from_slice(&(layer.cols as u32).to_le_bytes());
        for w in layer.weights.iter().chain(&layer.bias) {
            out.extend_from_slice(&(*w as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_head(bytes: &[u8]) -> Result<PredictorHead> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(Error::MalformedHeader(format!("truncated {what} at byte {pos}")));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4, "magic")? != HEAD1_MAGIC {
        return Err(Error::MalformedHeader("missing HEAD magic".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let version = u32_at(take(4, "version")?);
    if version != HEAD1_VERSION as usize {
        return Err(Error::MalformedHeader(format!("unsupported head version {version}")));
    }
    let num_layers = u32_at(take(4, "layer count")?);
    if num_layers == 0 || num_layers > 64 {
        return Err(Error::MalformedHeader(format!("implausible layer count {num_layers}")));
    }
    let mut layers = Vec::with_capacity(num_layers);
    for k in 0..num_layers {
        let rows = u32_at(take(4, "rows")?);
        let cols = u32_at(take(4, "cols")?);
        let n = rows
            .checked_mul(cols)
            .and_then(|w| w.checked_add(rows))
            .ok_or_else(|| Error::MalformedHeader(format!("layer {k} shape overflows")))?;
        let raw = take(
            n.checked_mul(4)
                .ok_or_else(|| Error::MalformedHeader(format!("layer {k} shape overflows")))?,
            "weights",
        )?;
        let mut values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let weights: Vec<f64> = values.by_ref().take(rows * cols).collect();
        let bias: Vec<f64> = values.collect();
        layers.push(DenseLayer {
            rows,
            cols,
            weights,
            bias,
        });
    }
    if pos != bytes.len() {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - pos
        )));
    }
    PredictorHead::new(layers)
}

pub fn load_head(path: impl AsRef<Path>) -> Result<PredictorHead> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_head(&bytes)
}

pub fn write_head(head: &PredictorHead, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_head(head)).map_err(|e| Error::io(path, e))
}

/// Scoring function choice. `Pred` carries its head.
#[derive(Debug, Clone)]
pub struct SimilaritySpec {
    metric: Metric,
    head: Option<Arc<PredictorHead>>,
}

impl SimilaritySpec {
    pub fn new(metric: Metric, head: Option<PredictorHead>) -> Result<Self> {
        match (metric, head) {
            (Metric::Pred, None) => Err(Error::InvalidConfig(
                "the pred metric requires a predictor head".into(),
            )),
            (Metric::Pred, Some(h)) => Ok(Self {
                metric,
                head: Some(Arc::new(h)),
            }),
            (_, _) => Ok(Self { metric, head: None }),
        }
    }

    pub fn l1() -> Self {
        Self {
            metric: Metric::L1,
            head: None,
        }
    }

    pub fn l2() -> Self {
        Self {
            metric: Metric::L2,
            head: None,
        }
    }

    pub fn corr() -> Self {
        Self {
            metric: Metric::Corr,
            head: None,
        }
    }

    pub fn pred(head: PredictorHead) -> Self {
        Self {
            metric: Metric::Pred,
            head: Some(Arc::new(head)),
        }
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn head(&self) -> Option<&PredictorHead> {
        self.head.as_deref()
    }

    /// Stable tag such as `corr` or `pred:1a2b3c4d5e6f7a8b`.
    pub fn describe(&self) -> String {
        match &self.head {
            Some(h) => format!("pred:{}", h.fingerprint()),
            None => self.metric.as_str().to_string(),
        }
    }

    pub fn check_dimension(&self, dimension: usize) -> Result<()> {
        if let Some(h) = &self.head {
            if h.input_dim() != dimension {
                return Err(Error::DimensionMismatch(format!(
                    "predictor head expects dimension {} but features have {dimension}",
                    h.input_dim()
                )));
            }
        }
        Ok(())
    }
}

/// Pearson correlation; `None` when either vector is constant.
pub fn pearson(a: &[f32], b: &[f32]) -> Option<f64> {
    let (ma, va) = mean_and_centered_ss(a)?;
    let (mb, vb) = mean_and_centered_ss(b)?;
    let cov: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb))
        .sum();
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

fn mean_and_centered_ss(v: &[f32]) -> Option<(f64, f64)> {
    let first = *v.first()?;
    if v.iter().all(|&x| x == first) {
        return None;
    }
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let ss: f64 = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum();
    (ss > 0.0).then_some((mean, ss))
}

/// Same-source score of a single pair; higher means more similar.
pub fn score(spec: &SimilaritySpec, a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "cannot score vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    spec.check_dimension(a.len())?;
    Ok(match spec.metric {
        Metric::L1 => -a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum::<f64>(),
        Metric::L2 => -a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt(),
        Metric::Corr => pearson(a, b).unwrap_or(0.0),
        Metric::Pred => {
            let head = spec.head.as_ref().expect("pred spec carries a head");
            let diff: Vec<f64> = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x as f64 - y as f64).abs())
                .collect();
            head.probability(&diff, &mut HeadScratch::default())
        }
    })
}

/// Vectors converted once into the form the kernel consumes: `f64` copies, and for
/// `Corr` centred and scaled to unit norm so each pair reduces to a dot product.
#[derive(Debug, Clone)]
pub struct PreparedVectors {
    dimension: usize,
    data: Vec<f64>,
    degenerate: Vec<bool>,
}

impl PreparedVectors {
    pub fn new<'a, I>(metric: Metric, dimension: usize, vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut data = Vec::new();
        let mut degenerate = Vec::new();
        for v in vectors {
            if v.len() != dimension {
                return Err(Error::DimensionMismatch(format!(
                    "vector of length {} in a block of dimension {dimension}",
                    v.len()
                )));
            }
            let start = data.len();
            data.extend(v.iter().map(|&x| x as f64));
            let mut is_degenerate = false;
            if metric == Metric::Corr {
                match mean_and_centered_ss(v) {
                    Some((mean, ss)) => {
                        let inv = 1.0 / ss.sqrt();
                        for x in &mut data[start..] {
                            *x = (*x - mean) * inv;
                        }
                    }
                    None => is_degenerate = true,
                }
            }
            degenerate.push(is_degenerate);
        }
        Ok(Self {
            dimension,
            data,
            degenerate,
        })
    }

    pub fn len(&self) -> usize {
        self.degenerate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degenerate.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }
}

/// Blocked evaluation of a [`SimilaritySpec`] over prepared query and reference sets.
#[derive(Debug, Clone)]
pub struct ScoreKernel<'s> {
    spec: &'s SimilaritySpec,
    tile: usize,
}

impl<'s> ScoreKernel<'s> {
    pub fn new(spec: &'s SimilaritySpec) -> Self {
        Self {
            spec,
            tile: DEFAULT_TILE,
        }
    }

    pub fn with_tile(mut self, tile: usize) -> Self {
        self.tile = tile.max(1);
        self
    }

    pub fn tile(&self) -> usize {
        self.tile
    }

    pub fn prepare<'a, I>(&self, dimension: usize, vectors: I) -> Result<PreparedVectors>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        self.spec.check_dimension(dimension)?;
        PreparedVectors::new(self.spec.metric, dimension, vectors)
    }

    /// Scores every query in `queries` against every reference, one reference tile at a
    /// time. `visit(query_index, ref_start, scores)` receives the scores of one query
    /// against references `ref_start..ref_start + scores.len()`. Per query, references are
    /// always visited in ascending order.
    pub fn visit_rows<F>(
        &self,
        queries: &PreparedVectors,
        query_range: Range<usize>,
        refs: &PreparedVectors,
        mut visit: F,
    ) where
        F: FnMut(usize, usize, &[f64]),
    {
        debug_assert_eq!(queries.dimension, refs.dimension);
        let mut buf = vec![0.0; self.tile.min(refs.len()).max(1)];
        let mut scratch = PairScratch::new(self.spec, refs.dimension);
        let mut ref_start = 0;
        while ref_start < refs.len() {
            let ref_end = (ref_start + self.tile).min(refs.len());
            let out = &mut buf[..ref_end - ref_start];
            for q in query_range.clone() {
                self.fill_row(queries, q, refs, ref_start..ref_end, out, &mut scratch);
                visit(q, ref_start, out);
            }
            ref_start = ref_end;
        }
    }

    fn fill_row(
        &self,
        queries: &PreparedVectors,
        q: usize,
        refs: &PreparedVectors,
        range: Range<usize>,
        out: &mut [f64],
        scratch: &mut PairScratch,
    ) {
        let qv = queries.row(q);
        match self.spec.metric {
            Metric::L1 => {
                for (o, r) in out.iter_mut().zip(range) {
                    *o = -l1_distance(qv, refs.row(r));
                }
            }
            Metric::L2 => {
                for (o, r) in out.iter_mut().zip(range) {
                    *o = -squared_distance(qv, refs.row(r)).sqrt();
                }
            }
            Metric::Corr => {
                if queries.degenerate[q] {
                    out.fill(0.0);
                    return;
                }
                for (o, r) in out.iter_mut().zip(range) {
                    *o = if refs.degenerate[r] {
                        0.0
                    } else {
                        dot(qv, refs.row(r)).clamp(-1.0, 1.0)
                    };
                }
            }
            Metric::Pred => {
                let head = self.spec.head.as_ref().expect("pred spec carries a head");
                for (o, r) in out.iter_mut().zip(range) {
                    for ((d, &x), &y) in scratch.diff.iter_mut().zip(qv).zip(refs.row(r)) {
                        *d = (x - y).abs();
                    }
                    *o = head.probability(&scratch.diff, &mut scratch.head);
                }
            }
        }
    }

    /// Full score matrix, parallel over query tiles on the current rayon pool.
    pub fn score_matrix(&self, queries: &PreparedVectors, refs: &PreparedVectors) -> ScoreMatrix {
        let cols = refs.len();
        let rows = queries.len();
        let mut values = vec![0.0; rows * cols];
        if cols > 0 {
            values
                .par_chunks_mut(self.tile * cols)
                .enumerate()
                .for_each(|(tile_idx, chunk)| {
                    let start = tile_idx * self.tile;
                    let end = start + chunk.len() / cols;
                    self.visit_rows(queries, start..end, refs, |q, r0, scores| {
                        let row = (q - start) * cols;
                        chunk[row + r0..row + r0 + scores.len()].copy_from_slice(scores);
                    });
                });
        }
        let degenerate_pairs = if self.spec.metric == Metric::Corr {
            let dq = queries.degenerate_count();
            let dr = refs.degenerate_count();
            dq * cols + dr * rows - dq * dr
        } else {
            0
        };
        ScoreMatrix {
            rows,
            cols,
            values,
            degenerate_pairs,
        }
    }
}

struct PairScratch {
    diff: Vec<f64>,
    head: HeadScratch,
}

impl PairScratch {
    fn new(spec: &SimilaritySpec, dimension: usize) -> Self {
        Self {
            diff: if spec.metric == Metric::Pred {
                vec![0.0; dimension]
            } else {
                Vec::new()
            },
            head: HeadScratch::default(),
        }
    }
}

/// Row-major score matrix with block statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Pairs scored 0 because a vector had zero variance (`Corr` only).
    pub degenerate_pairs: usize,
}

impl ScoreMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Scores every query against every reference.
pub fn score_block(spec: &SimilaritySpec, queries: &[&[f32]], refs: &[&[f32]]) -> Result<ScoreMatrix> {
    let dimension = queries
        .first()
        .or(refs.first())
        .map(|v| v.len())
        .unwrap_or(0);
    let kernel = ScoreKernel::new(spec);
    let q = kernel.prepare(dimension, queries.iter().copied())?;
    let r = kernel.prepare(dimension, refs.iter().copied())?;
    Ok(kernel.score_matrix(&q, &r))
}

macro_rules! unrolled_sum {
    ($a:expr, $b:expr, |$x:ident, $y:ident| $term:expr) => {{
        let a = $a;
        let b = $b;
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let mut acc = [0.0f64; 8];
        let mut ca = a.chunks_exact(8);
        let mut cb = b.chunks_exact(8);
        for (xa, xb) in (&mut ca).zip(&mut cb) {
            for i in 0..8 {
                let ($x, $y) = (xa[i], xb[i]);
                acc[i] += $term;
            }
        }
        let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
        for (&$x, &$y) in ca.remainder().iter().zip(cb.remainder()) {
            s += $term;
        }
        s
    }};
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    unrolled_sum!(a, b, |x, y| x * y)
}

#[inline]
fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    unrolled_sum!(a, b, |x, y| (x - y).abs())
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    unrolled_sum!(a, b, |x, y| (x - y) * (x - y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_head(input: usize, hidden: usize, seed: u64) -> PredictorHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |rows: usize, cols: usize| DenseLayer {
            rows,
            cols,
            weights: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: (0..rows).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let l0 = layer(hidden, input);
        let l1 = layer(1, hidden);
        let mut h = PredictorHead::new(vec![l0, l1]).unwrap();
        h.round_to_f32();
        h
    }

    fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect())
            .collect()
    }

    #[test]
    fn corr_exact_linear_relation() {
        let s = score(&SimilaritySpec::corr(), &[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn l1_arithmetic() {
        assert_eq!(score(&SimilaritySpec::l1(), &[0.0, 0.0], &[3.0, 4.0]).unwrap(), -7.0);
        assert_eq!(score(&SimilaritySpec::l2(), &[0.0, 0.0], &[3.0, 4.0]).unwrap(), -5.0);
    }

    #[test]
    fn l2_identity_is_zero() {
        let v = [0.3f32, -1.2, 4.0];
        assert_eq!(score(&SimilaritySpec::l2(), &v, &v).unwrap(), 0.0);
    }

    #[test]
    fn zero_head_scores_one_half() {
        let spec = SimilaritySpec::pred(PredictorHead::zeros(3, 5));
        for (a, b) in [([1.0f32, 2.0, 3.0], [9.0f32, -1.0, 0.0]), ([0.0; 3], [0.0; 3])] {
            assert_eq!(score(&spec, &a, &b).unwrap(), 0.5);
        }
    }

    #[test]
    fn constant_vector_correlation_is_zero() {
        assert_eq!(
            score(&SimilaritySpec::corr(), &[2.0, 2.0, 2.0], &[1.0, 5.0, 3.0]).unwrap(),
            0.0
        );
        let m = score_block(&SimilaritySpec::corr(), &[&[2.0, 2.0, 2.0]], &[&[1.0, 5.0, 3.0], &[0.0, 1.0, 0.0]])
            .unwrap();
        assert_eq!(m.values, vec![0.0, 0.0]);
        assert_eq!(m.degenerate_pairs, 2);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            score(&SimilaritySpec::l1(), &[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch(_))
        ));
        let spec = SimilaritySpec::pred(PredictorHead::zeros(4, 2));
        assert!(matches!(
            score(&spec, &[1.0, 2.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            score_block(&SimilaritySpec::l2(), &[&[1.0, 2.0]], &[&[1.0]]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn pred_requires_head() {
        assert!(SimilaritySpec::new(Metric::Pred, None).is_err());
    }

    #[test]
    fn one_by_one_block_matches_score() {
        let a = [0.5f32, -1.0, 2.0, 0.25];
        let b = [1.5f32, 0.0, -2.0, 0.75];
        for spec in [
            SimilaritySpec::l1(),
            SimilaritySpec::l2(),
            SimilaritySpec::corr(),
            SimilaritySpec::pred(random_head(4, 3, 1)),
        ] {
            let m = score_block(&spec, &[&a], &[&b]).unwrap();
            assert!((m.get(0, 0) - score(&spec, &a, &b).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn block_matches_pointwise_loop() {
        let d = 24;
        let queries = random_vectors(200, d, 7);
        let refs = random_vectors(300, d, 8);
        let q: Vec<&[f32]> = queries.iter().map(Vec::as_slice).collect();
        let r: Vec<&[f32]> = refs.iter().map(Vec::as_slice).collect();
        for spec in [
            SimilaritySpec::l1(),
            SimilaritySpec::l2(),
            SimilaritySpec::corr(),
            SimilaritySpec::pred(random_head(d, 16, 3)),
        ] {
            let m = score_block(&spec, &q, &r).unwrap();
            let mut worst = 0.0f64;
            for (i, a) in q.iter().enumerate() {
                for (j, b) in r.iter().enumerate() {
                    worst = worst.max((m.get(i, j) - score(&spec, a, b).unwrap()).abs());
                }
            }
            assert!(worst <= 1e-6, "{} deviates by {worst}", spec.describe());
        }
    }

    #[test]
    fn corr_self_block_diagonal_is_one() {
        let vs = random_vectors(50, 16, 11);
        let v: Vec<&[f32]> = vs.iter().map(Vec::as_slice).collect();
        let m = score_block(&SimilaritySpec::corr(), &v, &v).unwrap();
        for i in 0..v.len() {
            assert!((m.get(i, i) - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn block_is_independent_of_tile_and_workers() {
        let vs = random_vectors(70, 10, 5);
        let v: Vec<&[f32]> = vs.iter().map(Vec::as_slice).collect();
        let spec = SimilaritySpec::l2();
        let big = ScoreKernel::new(&spec);
        let q = big.prepare(10, v.iter().copied()).unwrap();
        let reference = big.score_matrix(&q, &q);
        let small = ScoreKernel::new(&spec).with_tile(7);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let other = pool.install(|| small.score_matrix(&q, &q));
        assert_eq!(reference, other);
    }

    #[test]
    fn head_round_trip_and_layout() {
        let head = random_head(4, 3, 9);
        let bytes = encode_head(&head);
        assert_eq!(&bytes[..4], b"HEAD");
        assert_eq!(bytes.len(), 12 + 8 + 4 * (12 + 3) + 8 + 4 * (3 + 1));
        let back = decode_head(&bytes).unwrap();
        assert_eq!(back, head);
        assert_eq!(back.input_dim(), 4);
    }

    #[test]
    fn head_shape_chain_broken() {
        let bad = PredictorHead::new(vec![DenseLayer::zeros(3, 4), DenseLayer::zeros(1, 2)]);
        assert!(matches!(bad, Err(Error::ShapeChainBroken(_))));
        // bypass the constructor to produce the broken file
        let mut bytes = encode_head(&PredictorHead::zeros(4, 3));
        let second_cols_at = 12 + 8 + 4 * 15 + 4;
        bytes[second_cols_at..second_cols_at + 4].copy_from_slice(&2u32.to_le_bytes());
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_head(&bytes), Err(Error::ShapeChainBroken(_))));
    }

    #[test]
    fn head_non_finite_weight() {
        let mut bytes = encode_head(&PredictorHead::zeros(2, 2));
        bytes[20..24].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_head(&bytes), Err(Error::NonFiniteWeight { layer: 0 })));
        assert!(matches!(decode_head(b"HEAX"), Err(Error::MalformedHeader(_))));
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(
            a in prop::collection::vec(-10.0f32..10.0, 6),
            b in prop::collection::vec(-10.0f32..10.0, 6),
        ) {
            let head = random_head(6, 4, 42);
            for spec in [SimilaritySpec::l1(), SimilaritySpec::l2(), SimilaritySpec::corr(), SimilaritySpec::pred(head.clone())] {
                let ab = score(&spec, &a, &b).unwrap();
                let ba = score(&spec, &b, &a).unwrap();
                prop_assert_eq!(ab, ba);
                match spec.metric() {
                    Metric::L1 | Metric::L2 => prop_assert!(ab <= 0.0),
                    Metric::Corr => prop_assert!((-1.0..=1.0).contains(&ab)),
                    Metric::Pred => prop_assert!(ab > 0.0 && ab < 1.0),
                }
            }
        }

        #[test]
        fn pred_identity_is_constant(f in prop::collection::vec(-50.0f32..50.0, 6)) {
            let head = random_head(6, 4, 43);
            let expected = head.probability(&[0.0; 6], &mut HeadScratch::default());
            prop_assert_eq!(score(&SimilaritySpec::pred(head), &f, &f).unwrap(), expected);
        }

        #[test]
        fn identity_is_maximal(
            f in prop::collection::vec(-10.0f32..10.0, 5),
            g in prop::collection::vec(-10.0f32..10.0, 5),
        ) {
            prop_assert_eq!(score(&SimilaritySpec::l1(), &f, &f).unwrap(), 0.0);
            prop_assert_eq!(score(&SimilaritySpec::l2(), &f, &f).unwrap(), 0.0);
            if pearson(&f, &f).is_some() {
                let self_corr = score(&SimilaritySpec::corr(), &f, &f).unwrap();
                prop_assert!((self_corr - 1.0).abs() < 1e-12);
                prop_assert!(score(&SimilaritySpec::corr(), &f, &g).unwrap() <= self_corr + 1e-12);
            }
        }
    }
}
