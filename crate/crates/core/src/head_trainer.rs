//! Training the predictor head on frame pairs with binary cross-entropy.
//!
//! Positive pairs are two frames of one video, negative pairs frames of two different
//! videos. The head sees `|a - b|` and is optimized with plain mini-batch SGD; the best
//! head on a 10% held-out slice of the pairs is returned.

use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{EmbeddingDataset, Split};
use crate::error::{Error, Result};
use crate::seeding::stream_rng;
use crate::similarity::{sigmoid, DenseLayer, PredictorHead};

const STREAM_PAIRS: u64 = 11;
const STREAM_INIT: u64 = 12;
const STREAM_HOLDOUT: u64 = 13;
const STREAM_EPOCH: u64 = 14;

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` inside the loss.
pub const P_CLAMP: f64 = 1e-12;
/// Parameters whose relative gradient error exceeds this are flagged by [`gradient_check`].
pub const GRADIENT_FLAG_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    /// Zero-based frame index.
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePair {
    pub a: FrameRef,
    pub b: FrameRef,
    /// `true` when both frames come from the same video.
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<FramePair>,
    pub seed: u64,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Looks every pair up in `dataset`, yielding feature slices and labels.
    pub fn resolve<'d>(&self, dataset: &'d EmbeddingDataset) -> Result<Vec<Example<'d>>> {
        let frame = |r: &FrameRef| -> Result<&'d [f32]> {
            let v = dataset.video(&r.video_id)?;
            if r.frame >= v.num_frames() {
                return Err(Error::FrameOutOfRange {
                    video_id: r.video_id.clone(),
                    frame: r.frame,
                    num_frames: v.num_frames(),
                });
            }
            Ok(v.frame(r.frame))
        };
        self.pairs
            .iter()
            .map(|p| {
                Ok(Example {
                    a: frame(&p.a)?,
                    b: frame(&p.b)?,
                    label: if p.same { 1.0 } else { 0.0 },
                })
            })
            .collect()
    }

    /// Copy with labels permuted by a seeded shuffle; pairs keep their frames.
    pub fn with_shuffled_labels(&self, seed: u64) -> PairSet {
        let mut labels: Vec<bool> = self.pairs.iter().map(|p| p.same).collect();
        labels.shuffle(&mut stream_rng(seed, STREAM_PAIRS, u64::MAX));
        PairSet {
            pairs: self
                .pairs
                .iter()
                .zip(labels)
                .map(|(p, same)| FramePair { same, ..p.clone() })
                .collect(),
            seed,
        }
    }
}

/// A resolved training or evaluation pair.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub a: &'a [f32],
    pub b: &'a [f32],
    /// 1 for same source, 0 otherwise.
    pub label: f64,
}

/// Draws `n` pairs from one split: `⌈n/2⌉` same-video pairs then `⌊n/2⌋` different-video
/// pairs, interleaved.
pub fn sample_training_pairs(
    dataset: &EmbeddingDataset,
    split: Split,
    n: usize,
    seed: u64,
) -> Result<PairSet> {
    let videos = dataset.split(split);
    if videos.len() < 2 {
        return Err(Error::InsufficientVideos {
            needed: 2,
            found: videos.len(),
        });
    }
    let mut rng = stream_rng(seed, STREAM_PAIRS, 0);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        if i % 2 == 0 {
            let v = videos[rng.random_range(0..videos.len())];
            let ta = rng.random_range(0..v.num_frames());
            let tb = rng.random_range(0..v.num_frames());
            pairs.push(FramePair {
                a: FrameRef {
                    video_id: v.id.clone(),
                    frame: ta,
                },
                b: FrameRef {
                    video_id: v.id.clone(),
                    frame: tb,
                },
                same: true,
            });
        } else {
            let ia = rng.random_range(0..videos.len());
            let mut ib = rng.random_range(0..videos.len() - 1);
            if ib >= ia {
                ib += 1;
            }
            let (va, vb) = (videos[ia], videos[ib]);
            pairs.push(FramePair {
                a: FrameRef {
                    video_id: va.id.clone(),
                    frame: rng.random_range(0..va.num_frames()),
                },
                b: FrameRef {
                    video_id: vb.id.clone(),
                    frame: rng.random_range(0..vb.num_frames()),
                },
                same: false,
            });
        }
    }
    Ok(PairSet { pairs, seed })
}

/// Gradient with the same layout as the head's parameters.
pub type HeadGradient = PredictorHead;

fn check_batch(head: &PredictorHead, batch: &[Example<'_>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let d = head.input_dim();
    if let Some(e) = batch.iter().find(|e| e.a.len() != d || e.b.len() != d) {
        return Err(Error::DimensionMismatch(format!(
            "batch vectors of length {}/{} for a head of input dimension {d}",
            e.a.len(),
            e.b.len()
        )));
    }
    Ok(())
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Forward/backward buffers for one example.
struct Tape {
    /// `acts[0]` is the input, `acts[k + 1]` the output of layer k (post-activation for hidden
    /// layers, logit for the last).
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl Tape {
    fn new(head: &PredictorHead) -> Self {
        let mut acts = vec![vec![0.0; head.input_dim()]];
        acts.extend(head.layers().iter().map(|l| vec![0.0; l.rows]));
        let width = head.max_width();
        Self {
            acts,
            delta: vec![0.0; width],
            next_delta: vec![0.0; width],
        }
    }

    fn forward(&mut self, head: &PredictorHead, ex: &Example<'_>) -> f64 {
        for ((x, &a), &b) in self.acts[0].iter_mut().zip(ex.a).zip(ex.b) {
            *x = (a as f64 - b as f64).abs();
        }
        let last = head.layers().len() - 1;
        for (k, layer) in head.layers().iter().enumerate() {
            let (before, after) = self.acts.split_at_mut(k + 1);
            let input = &before[k];
            let out = &mut after[0];
            for (r, o) in out.iter_mut().enumerate() {
                let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                let z = layer.bias[r] + crate::similarity::dot(row, input);
                *o = if k == last { z } else { z.max(0.0) };
            }
        }
        sigmoid(self.acts[last + 1][0])
    }

    /// Accumulates `scale · dLoss/dlogit` back through the network into `grad`.
    fn backward(&mut self, head: &PredictorHead, dlogit: f64, grad: &mut HeadGradient) {
        let layers = head.layers();
        self.delta[0] = dlogit;
        for k in (0..layers.len()).rev() {
            let layer = &layers[k];
            let g = &mut grad.layers_mut()[k];
            let input = &self.acts[k];
            for r in 0..layer.rows {
                let d = self.delta[r];
                if d == 0.0 {
                    continue;
                }
                g.bias[r] += d;
                for (gw, &x) in g.weights[r * layer.cols..(r + 1) * layer.cols]
                    .iter_mut()
                    .zip(input)
                {
                    *gw += d * x;
                }
            }
            if k == 0 {
                break;
            }
            for c in 0..layer.cols {
                // rectifier derivative: active iff the stored activation is positive
                if input[c] <= 0.0 {
                    self.next_delta[c] = 0.0;
                    continue;
                }
                let mut s = 0.0;
                for r in 0..layer.rows {
                    s += layer.weights[r * layer.cols + c] * self.delta[r];
                }
                self.next_delta[c] = s;
            }
            std::mem::swap(&mut self.delta, &mut self.next_delta);
        }
    }
}

fn zero_like(head: &PredictorHead) -> HeadGradient {
    PredictorHead::new(
        head.layers()
            .iter()
            .map(|l| DenseLayer::zeros(l.rows, l.cols))
            .collect(),
    )
    .expect("zero copy of a valid head is valid")
}

/// Mean binary cross-entropy over the batch.
pub fn loss(head: &PredictorHead, batch: &[Example<'_>]) -> Result<f64> {
    check_batch(head, batch)?;
    let mut tape = Tape::new(head);
    let total: f64 = batch
        .iter()
        .map(|ex| bce(tape.forward(head, ex), ex.label))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Mean binary cross-entropy and its exact gradient with respect to every parameter.
pub fn loss_and_grad(head: &PredictorHead, batch: &[Example<'_>]) -> Result<(f64, HeadGradient)> {
    check_batch(head, batch)?;
    let mut tape = Tape::new(head);
    let mut grad = zero_like(head);
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        let p = tape.forward(head, ex);
        total += bce(p, ex.label);
        // d/dz of the clamped loss; flat where the clamp is active
        let dlogit = if (P_CLAMP..=1.0 - P_CLAMP).contains(&p) {
            (p - ex.label) * scale
        } else {
            0.0
        };
        tape.backward(head, dlogit, &mut grad);
    }
    Ok((total * scale, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlaggedParam {
    pub layer: usize,
    pub kind: ParamKind,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheckReport {
    /// Maximum relative error per layer.
    pub per_layer: Vec<f64>,
    pub max_relative_error: f64,
    pub flagged: Vec<FlaggedParam>,
    /// Parameters probed with a step below the requested epsilon because of a kink.
    pub reduced_steps: usize,
}

/// `|a - n| / max(|a|, |n|)`, with both magnitudes below `1e-10` treated as agreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn param_mut(head: &mut PredictorHead, layer: usize, kind: ParamKind, index: usize) -> &mut f64 {
    let l = &mut head.layers_mut()[layer];
    match kind {
        ParamKind::Weight => &mut l.weights[index],
        ParamKind::Bias => &mut l.bias[index],
    }
}

/// Mean loss together with the on/off state of every hidden rectifier over the batch.
fn loss_and_pattern(head: &PredictorHead, batch: &[Example<'_>], pattern: &mut Vec<bool>) -> Result<f64> {
    check_batch(head, batch)?;
    pattern.clear();
    let mut tape = Tape::new(head);
    let hidden = head.layers().len() - 1;
    let mut total = 0.0;
    for ex in batch {
        total += bce(tape.forward(head, ex), ex.label);
        for acts in &tape.acts[1..=hidden] {
            pattern.extend(acts.iter().map(|&a| a > 0.0));
        }
    }
    Ok(total / batch.len() as f64)
}

/// Smallest step tried, relative to the requested epsilon, when a probe straddles a kink.
const MIN_STEP_FRACTION: f64 = 1.0 / (1u64 << 20) as f64;

/// Compares the analytic gradient with central finite differences for every parameter.
///
/// A central difference whose interval switches any rectifier on or off differentiates
/// across a kink rather than at the point; for such parameters the step is halved until
/// the activation pattern is stable on both sides.
pub fn gradient_check(head: &PredictorHead, batch: &[Example<'_>], epsilon: f64) -> Result<GradientCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon {epsilon} must be positive")));
    }
    let (_, analytic) = loss_and_grad(head, batch)?;
    let mut base = Vec::new();
    loss_and_pattern(head, batch, &mut base)?;
    let (mut up_pattern, mut down_pattern) = (Vec::new(), Vec::new());
    let mut probe = head.clone();
    let mut per_layer = vec![0.0f64; head.layers().len()];
    let mut flagged = Vec::new();
    let mut reduced_steps = 0;
    for k in 0..head.layers().len() {
        for kind in [ParamKind::Weight, ParamKind::Bias] {
            let count = match kind {
                ParamKind::Weight => head.layers()[k].weights.len(),
                ParamKind::Bias => head.layers()[k].bias.len(),
            };
            for i in 0..count {
                let original = *param_mut(&mut probe, k, kind, i);
                let mut step = epsilon;
                let numeric = loop {
                    *param_mut(&mut probe, k, kind, i) = original + step;
                    let up = loss_and_pattern(&probe, batch, &mut up_pattern)?;
                    *param_mut(&mut probe, k, kind, i) = original - step;
                    let down = loss_and_pattern(&probe, batch, &mut down_pattern)?;
                    *param_mut(&mut probe, k, kind, i) = original;
                    let stable = up_pattern == base && down_pattern == base;
                    if stable || step <= epsilon * MIN_STEP_FRACTION {
                        break (up - down) / (2.0 * step);
                    }
                    step *= 0.5;
                };
                reduced_steps += (step < epsilon) as usize;
                let a = match kind {
                    ParamKind::Weight => analytic.layers()[k].weights[i],
                    ParamKind::Bias => analytic.layers()[k].bias[i],
                };
                let rel = relative_error(a, numeric);
                per_layer[k] = per_layer[k].max(rel);
                if !(rel <= GRADIENT_FLAG_THRESHOLD) {
                    flagged.push(FlaggedParam {
                        layer: k,
                        kind,
                        index: i,
                        analytic: a,
                        numeric,
                        relative_error: rel,
                    });
                }
            }
        }
    }
    let max_relative_error = per_layer.iter().copied().fold(0.0, f64::max);
    Ok(GradientCheckReport {
        per_layer,
        max_relative_error,
        flagged,
        reduced_steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_size: usize,
    pub seed: u64,
    /// Epochs without held-out improvement before stopping; 0 disables early stopping.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.05,
            hidden_size: 256,
            seed: 0,
            early_stop_patience: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden_size == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and hidden_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub initial_heldout_loss: Option<f64>,
    /// Epoch whose head was returned; `None` when the initialization was kept.
    pub best_epoch: Option<usize>,
    pub best_heldout_loss: Option<f64>,
    pub n_train_pairs: usize,
    pub n_heldout_pairs: usize,
}

impl TrainLog {
    /// CSV with header `epoch,train_loss,heldout_loss`.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_loss", "heldout_loss"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.heldout_loss.to_string(),
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

/// Seeded uniform initialization in `±sqrt(6 / (fan_in + fan_out))`; biases start at zero.
pub fn init_head(input_dim: usize, hidden_size: usize, seed: u64) -> PredictorHead {
    let mut rng = stream_rng(seed, STREAM_INIT, 0);
    let mut layer = |rows: usize, cols: usize| {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        DenseLayer {
            rows,
            cols,
            weights: (0..rows * cols)
                .map(|_| rng.random_range(-limit..limit))
                .collect(),
            bias: vec![0.0; rows],
        }
    };
    let hidden = layer(hidden_size, input_dim);
    let out = layer(1, hidden_size);
    let mut head = PredictorHead::new(vec![hidden, out]).expect("well-formed initial head");
    head.round_to_f32();
    head
}

fn sgd_step(head: &mut PredictorHead, grad: &HeadGradient, lr: f64) {
    for (layer, g) in head.layers_mut().iter_mut().zip(grad.layers()) {
        for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
            *w -= lr * gw;
        }
        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
}

/// Trains a head from scratch on `pairs`, keeping the best held-out head.
pub fn train_head(
    pairs: &PairSet,
    dataset: &EmbeddingDataset,
    config: &TrainConfig,
) -> Result<(PredictorHead, TrainLog)> {
    config.validate()?;
    let distinct: std::collections::HashSet<&str> = pairs
        .pairs
        .iter()
        .flat_map(|p| [p.a.video_id.as_str(), p.b.video_id.as_str()])
        .collect();
    if distinct.len() < 2 || pairs.len() < 2 {
        return Err(Error::InsufficientVideos {
            needed: 2,
            found: distinct.len().min(pairs.len()),
        });
    }
    let examples = pairs.resolve(dataset)?;
    let mut head = init_head(dataset.dimension(), config.hidden_size, config.seed);
    if config.epochs == 0 {
        return Ok((head, TrainLog::default()));
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut stream_rng(config.seed, STREAM_HOLDOUT, 0));
    let n_heldout = ((examples.len() as f64 * 0.1).round() as usize).clamp(1, examples.len() - 1);
    let heldout: Vec<Example<'_>> = order[..n_heldout].iter().map(|&i| examples[i]).collect();
    let mut train_idx: Vec<usize> = order[n_heldout..].to_vec();

    let initial = loss(&head, &heldout)?;
    let mut log = TrainLog {
        initial_heldout_loss: Some(initial),
        best_heldout_loss: Some(initial),
        n_train_pairs: train_idx.len(),
        n_heldout_pairs: n_heldout,
        ..TrainLog::default()
    };
    let mut best = head.clone();
    let mut best_loss = initial;
    let mut since_best = 0usize;
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut stream_rng(config.seed, STREAM_EPOCH, epoch as u64));
        let mut weighted = 0.0;
        for chunk in train_idx.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i]));
            let (l, grad) = loss_and_grad(&head, &batch)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            weighted += l * chunk.len() as f64;
            sgd_step(&mut head, &grad, config.learning_rate);
        }
        let heldout_loss = loss(&head, &heldout)?;
        if !heldout_loss.is_finite() || head.layers().iter().any(|l| l.weights.iter().any(|w| !w.is_finite())) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: weighted / train_idx.len() as f64,
            heldout_loss,
        });
        if heldout_loss < best_loss {
            best_loss = heldout_loss;
            best = head.clone();
            log.best_epoch = Some(epoch);
            log.best_heldout_loss = Some(heldout_loss);
            since_best = 0;
        } else {
            since_best += 1;
            if config.early_stop_patience > 0 && since_best >= config.early_stop_patience {
                break;
            }
        }
    }
    best.round_to_f32();
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::VideoEmbedding;
    use crate::similarity::{score, SimilaritySpec};
    use crate::synthbench::{generate_clustered_dataset, ClusterConfig, SyntheticMode};
    use rand_distr::{Distribution, StandardNormal};

    fn dataset(n_videos: usize, frames: usize, d: usize) -> EmbeddingDataset {
        let videos = (0..n_videos)
            .map(|i| {
                let data = (0..frames * d).map(|k| ((i * 31 + k * 7) % 13) as f32 * 0.1).collect();
                VideoEmbedding::new(format!("v{i}"), Split::Train, d, data, None).unwrap()
            })
            .collect();
        EmbeddingDataset::new(d, videos, "t").unwrap()
    }

    fn random_head(d: usize, hidden: usize, seed: u64) -> PredictorHead {
        let mut rng = stream_rng(seed, 99, 0);
        let mut layer = |rows: usize, cols: usize| DenseLayer {
            rows,
            cols,
            weights: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: (0..rows).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let a = layer(hidden, d);
        let b = layer(1, hidden);
        PredictorHead::new(vec![a, b]).unwrap()
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<f64>) {
        let mut rng = stream_rng(seed, 98, 0);
        let vecs = (0..2 * n)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        z
                    })
                    .collect()
            })
            .collect();
        let labels = (0..n).map(|i| (i % 2) as f64).collect();
        (vecs, labels)
    }

    fn as_examples<'a>(vecs: &'a [Vec<f32>], labels: &[f64]) -> Vec<Example<'a>> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| Example {
                a: &vecs[2 * i],
                b: &vecs[2 * i + 1],
                label,
            })
            .collect()
    }

    #[test]
    fn balanced_pairs() {
        let ds = dataset(3, 4, 5);
        let ps = sample_training_pairs(&ds, Split::Train, 4, 1).unwrap();
        assert_eq!(ps.pairs.iter().filter(|p| p.same).count(), 2);
        assert_eq!(ps.pairs.iter().filter(|p| !p.same).count(), 2);
        for p in &ps.pairs {
            assert_eq!(p.same, p.a.video_id == p.b.video_id);
        }
        assert_eq!(ps, sample_training_pairs(&ds, Split::Train, 4, 1).unwrap());
        let big = sample_training_pairs(&ds, Split::Train, 10_000, 2).unwrap();
        assert_eq!(big.pairs.iter().filter(|p| p.same).count(), 5_000);
        let odd = sample_training_pairs(&ds, Split::Train, 7, 2).unwrap();
        assert_eq!(odd.pairs.iter().filter(|p| p.same).count(), 4);
    }

    #[test]
    fn pairs_need_two_videos() {
        let ds = dataset(1, 4, 5);
        assert!(matches!(
            sample_training_pairs(&ds, Split::Train, 4, 1),
            Err(Error::InsufficientVideos { .. })
        ));
        assert!(sample_training_pairs(&ds, Split::Test, 4, 1).is_err());
    }

    #[test]
    fn zero_head_loss_is_ln2() {
        let (vecs, labels) = random_batch(9, 6, 1);
        let batch = as_examples(&vecs, &labels);
        let (l, g) = loss_and_grad(&PredictorHead::zeros(6, 4), &batch).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() <= 1e-12);
        // only the output bias receives gradient from an all-zero head
        assert!(g.layers()[0].weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let mut head = PredictorHead::zeros(2, 1);
        head.layers_mut()[1].bias[0] = 40.0;
        let a = [1.0f32, 2.0];
        let l = loss(&head, &[Example { a: &a, b: &a, label: 1.0 }]).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let d = 8;
            let head = random_head(d, 6, seed);
            let (vecs, labels) = random_batch(16, d, seed + 100);
            let report = gradient_check(&head, &as_examples(&vecs, &labels), 1e-4).unwrap();
            assert!(report.flagged.is_empty(), "{report:?}");
            assert!(report.max_relative_error <= 1e-4, "{}", report.max_relative_error);
        }
    }

    #[test]
    fn gradient_check_survives_huge_weight() {
        let mut head = random_head(4, 3, 7);
        head.layers_mut()[0].weights[0] = 1e6;
        let (vecs, labels) = random_batch(4, 4, 8);
        let report = gradient_check(&head, &as_examples(&vecs, &labels), 1e-4).unwrap();
        assert_eq!(report.per_layer.len(), 2);
        assert!(report.max_relative_error.is_finite());
        assert!(gradient_check(&head, &as_examples(&vecs, &labels), 0.0).is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = dataset(4, 3, 5);
        let ps = sample_training_pairs(&ds, Split::Train, 20, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            hidden_size: 7,
            ..TrainConfig::default()
        };
        let (head, log) = train_head(&ps, &ds, &cfg).unwrap();
        assert_eq!(head, init_head(5, 7, cfg.seed));
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn unknown_video_in_pairs() {
        let ds = dataset(4, 3, 5);
        let mut ps = sample_training_pairs(&ds, Split::Train, 20, 1).unwrap();
        ps.pairs[0].a.video_id = "nope".into();
        assert!(matches!(
            train_head(&ps, &ds, &TrainConfig::default()),
            Err(Error::UnknownVideo(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let ds = dataset(6, 3, 5);
        let ps = sample_training_pairs(&ds, Split::Train, 40, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            hidden_size: 8,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        assert!(matches!(train_head(&ps, &ds, &cfg), Err(Error::NonFiniteLoss { .. })));
    }

    fn separable() -> EmbeddingDataset {
        generate_clustered_dataset(&ClusterConfig {
            n_identities: 100,
            frames_per_video: 6,
            dimension: 16,
            sigma_intra: 0.05,
            sigma_inter: 1.0,
            split_fractions: [0.8, 0.2, 0.0],
            synthetic_mode: SyntheticMode::Independent,
            seed: 5,
            ..ClusterConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn learns_separable_clusters_deterministically() {
        let ds = separable();
        let ps = sample_training_pairs(&ds, Split::Train, 2000, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            hidden_size: 32,
            seed: 4,
            ..TrainConfig::default()
        };
        let (head, log) = train_head(&ps, &ds, &cfg).unwrap();
        assert!(log.best_heldout_loss.unwrap() <= log.initial_heldout_loss.unwrap());
        let (again, _) = train_head(&ps, &ds, &cfg).unwrap();
        assert_eq!(head, again);

        let test_pairs = sample_training_pairs(&ds, Split::Test, 1000, 9).unwrap();
        let spec = SimilaritySpec::pred(head);
        let correct = test_pairs
            .resolve(&ds)
            .unwrap()
            .iter()
            .filter(|e| (score(&spec, e.a, e.b).unwrap() > 0.5) == (e.label == 1.0))
            .count();
        assert!(correct as f64 / 1000.0 >= 0.95, "accuracy {}", correct as f64 / 1000.0);
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        let ds = separable();
        let ps = sample_training_pairs(&ds, Split::Train, 2000, 3)
            .unwrap()
            .with_shuffled_labels(17);
        let cfg = TrainConfig {
            epochs: 20,
            hidden_size: 32,
            seed: 4,
            ..TrainConfig::default()
        };
        let (head, _) = train_head(&ps, &ds, &cfg).unwrap();
        let eval = sample_training_pairs(&ds, Split::Train, 2000, 77)
            .unwrap()
            .with_shuffled_labels(78);
        let spec = SimilaritySpec::pred(head);
        let correct = eval
            .resolve(&ds)
            .unwrap()
            .iter()
            .filter(|e| (score(&spec, e.a, e.b).unwrap() > 0.5) == (e.label == 1.0))
            .count();
        let acc = correct as f64 / 2000.0;
        assert!((0.4..=0.6).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn train_log_csv() {
        let log = TrainLog {
            epochs: vec![EpochLog {
                epoch: 1,
                train_loss: 0.5,
                heldout_loss: 0.25,
            }],
            ..TrainLog::default()
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,heldout_loss\n1,0.5,0.25\n");
    }
}
