//! Exit point estimation.
//!
//! Instead of running every exit point on a chunk's samples, the planner can
//! run only the oracle, predict each sample's optimal exit point from its
//! feature vector, and extrapolate per-exit-point precision and recall from
//! those predictions.

use crate::inference::{InferenceCache, Phase};
use crate::planner::{
    sample_positions, stride_for, Chunk, EpMetrics, EpScore, PlanError, PlannerConfig,
};
use crate::query::Query;
use crate::trace::{FrameId, TraceError, TraceStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_EPOCHS: u32 = 20;
pub const DEFAULT_LEARNING_RATE: f64 = 1.0;
pub const DEFAULT_TRAINING_FRAMES: usize = 200;
pub const DEFAULT_HIDDEN_WIDTH: usize = 16;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("no training data")]
    Empty,
    #[error("feature has {found} values, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("label {label} outside 1..={depth_count}")]
    Label { label: u32, depth_count: u32 },
    #[error("estimator predicts {estimator} exit points but the trace has {trace}")]
    DepthMismatch { estimator: u32, trace: u32 },
    #[error("malformed estimator: {0}")]
    Malformed(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub frame_id: FrameId,
    pub feature: Vec<f64>,
    pub optimal_ep: u32,
}

/// Optional tanh hidden layer; `weights` is `width x (feature_dim + 1)` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub weights: Vec<f64>,
}

/// Softmax scorer over exit points. Without a hidden layer `weights` is
/// `depth_count x (feature_dim + 1)` row-major with the bias last; with one it
/// is `depth_count x (width + 1)` over the hidden activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpEstimator {
    pub feature_dim: usize,
    pub depth_count: u32,
    pub weights: Vec<f64>,
    pub epochs_trained: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<HiddenLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    /// Width of the hidden layer, if any.
    pub hidden: Option<usize>,
    /// Seeds the hidden layer's initial weights; unused by the linear model.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            hidden: None,
            seed: 0,
        }
    }
}

/// Smallest depth whose predicate result equals the oracle's on each frame.
/// Reads the trace directly; labeling is not priced.
pub fn label_optimal_eps(
    store: &TraceStore,
    query: &Query,
    frames: &[FrameId],
) -> Result<Vec<LabeledFrame>, EstimatorError> {
    let k = store.depth_count();
    frames
        .iter()
        .map(|&f| {
            let rec = store.frame(f)?;
            let truth = query.eval(store.ep_detections(k, f));
            let optimal_ep = (1..=k)
                .find(|&d| query.eval(store.ep_detections(d, f)) == truth)
                .unwrap_or(k);
            Ok(LabeledFrame {
                frame_id: f,
                feature: rec.feature.clone(),
                optimal_ep,
            })
        })
        .collect()
}

/// Picks up to `size` frames, drawing round-robin from each optimal-exit-point
/// class so the labels are as balanced as the trace allows.
pub fn stratified_frames(
    store: &TraceStore,
    query: &Query,
    size: usize,
    seed: u64,
) -> Result<Vec<FrameId>, EstimatorError> {
    let all: Vec<FrameId> = (0..store.frame_count()).collect();
    let labeled = label_optimal_eps(store, query, &all)?;
    let mut classes: Vec<Vec<FrameId>> = vec![Vec::new(); store.depth_count() as usize];
    for l in &labeled {
        classes[l.optimal_ep as usize - 1].push(l.frame_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in &mut classes {
        c.shuffle(&mut rng);
    }
    let mut picked = Vec::with_capacity(size);
    let mut round = 0;
    while picked.len() < size && classes.iter().any(|c| c.len() > round) {
        for c in &classes {
            if picked.len() == size {
                break;
            }
            if let Some(&f) = c.get(round) {
                picked.push(f);
            }
        }
        round += 1;
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Stratified sample, labels, and a trained estimator for one query.
pub fn train_for_query(
    store: &TraceStore,
    query: &Query,
    size: usize,
    config: &TrainConfig,
) -> Result<EpEstimator, EstimatorError> {
    let frames = stratified_frames(store, query, size, config.seed)?;
    let data = label_optimal_eps(store, query, &frames)?;
    train_with(&data, store.depth_count(), config)
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn affine(weights: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len() + 1;
    (0..rows)
        .map(|r| {
            let w = &weights[r * cols..(r + 1) * cols];
            w[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[x.len()]
        })
        .collect()
}

/// Mean cross-entropy of the linear scorer `weights` (`k x (d + 1)`) on
/// `(xs, labels)`, with labels in `1..=k`.
pub fn loss(weights: &[f64], k: usize, xs: &[Vec<f64>], labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(labels) {
        let mut p = affine(weights, k, x);
        softmax_in_place(&mut p);
        total -= p[y as usize - 1].max(f64::MIN_POSITIVE).ln();
    }
    total / xs.len() as f64
}

/// Analytic gradient of [`loss`] with respect to `weights`.
pub fn gradient(weights: &[f64], k: usize, xs: &[Vec<f64>], labels: &[u32]) -> Vec<f64> {
    let d = xs.first().map_or(0, Vec::len);
    let cols = d + 1;
    let mut g = vec![0.0; k * cols];
    for (x, &y) in xs.iter().zip(labels) {
        let mut p = affine(weights, k, x);
        softmax_in_place(&mut p);
        p[y as usize - 1] -= 1.0;
        for (r, err) in p.iter().enumerate() {
            let row = &mut g[r * cols..(r + 1) * cols];
            for (gj, xj) in row[..d].iter_mut().zip(x) {
                *gj += err * xj;
            }
            row[d] += err;
        }
    }
    let n = xs.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    g
}

struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(xs: &[Vec<f64>]) -> Self {
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale = var
            .into_iter()
            .map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Standardizer { mean, scale }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Rewrites affine rows trained on standardized inputs to act on raw inputs.
    fn fold(&self, weights: &mut [f64], rows: usize) {
        let d = self.mean.len();
        let cols = d + 1;
        for r in 0..rows {
            let row = &mut weights[r * cols..(r + 1) * cols];
            let mut shift = 0.0;
            for ((w, scale), mean) in row[..d].iter_mut().zip(&self.scale).zip(&self.mean) {
                *w /= scale;
                shift += *w * mean;
            }
            row[d] -= shift;
        }
    }
}

fn check_data(data: &[LabeledFrame], depth_count: u32) -> Result<usize, EstimatorError> {
    let first = data.first().ok_or(EstimatorError::Empty)?;
    let d = first.feature.len();
    if d == 0 {
        return Err(EstimatorError::Dimension {
            expected: 1,
            found: 0,
        });
    }
    for l in data {
        if l.feature.len() != d {
            return Err(EstimatorError::Dimension {
                expected: d,
                found: l.feature.len(),
            });
        }
        if l.optimal_ep == 0 || l.optimal_ep > depth_count {
            return Err(EstimatorError::Label {
                label: l.optimal_ep,
                depth_count,
            });
        }
    }
    Ok(d)
}

/// Trains the linear scorer with default settings except `epochs` and
/// `learning_rate`.
pub fn train(
    data: &[LabeledFrame],
    depth_count: u32,
    epochs: u32,
    learning_rate: f64,
) -> Result<EpEstimator, EstimatorError> {
    train_with(
        data,
        depth_count,
        &TrainConfig {
            epochs,
            learning_rate,
            ..TrainConfig::default()
        },
    )
}

/// Full-batch gradient descent on mean cross-entropy. Inputs are standardized
/// during training and the transform is folded back into the first layer.
pub fn train_with(
    data: &[LabeledFrame],
    depth_count: u32,
    config: &TrainConfig,
) -> Result<EpEstimator, EstimatorError> {
    let d = check_data(data, depth_count)?;
    let raw: Vec<Vec<f64>> = data.iter().map(|l| l.feature.clone()).collect();
    let std = Standardizer::fit(&raw);
    let xs: Vec<Vec<f64>> = raw.iter().map(|x| std.apply(x)).collect();
    let labels: Vec<u32> = data.iter().map(|l| l.optimal_ep).collect();
    let k = depth_count as usize;

    match config.hidden {
        None => {
            let mut w = vec![0.0; k * (d + 1)];
            for _ in 0..config.epochs {
                let g = gradient(&w, k, &xs, &labels);
                w.iter_mut()
                    .zip(&g)
                    .for_each(|(wi, gi)| *wi -= config.learning_rate * gi);
            }
            std.fold(&mut w, k);
            Ok(EpEstimator {
                feature_dim: d,
                depth_count,
                weights: w,
                epochs_trained: config.epochs,
                hidden: None,
            })
        }
        Some(width) => {
            let mut net = Mlp::init(d, width.max(1), k, config.seed);
            for _ in 0..config.epochs {
                let (g1, g2) = net.gradient(&xs, &labels);
                net.w1
                    .iter_mut()
                    .zip(&g1)
                    .for_each(|(w, g)| *w -= config.learning_rate * g);
                net.w2
                    .iter_mut()
                    .zip(&g2)
                    .for_each(|(w, g)| *w -= config.learning_rate * g);
            }
            std.fold(&mut net.w1, net.width);
            Ok(EpEstimator {
                feature_dim: d,
                depth_count,
                weights: net.w2,
                epochs_trained: config.epochs,
                hidden: Some(HiddenLayer {
                    width: net.width,
                    weights: net.w1,
                }),
            })
        }
    }
}

/// One tanh hidden layer followed by the softmax output layer.
pub(crate) struct Mlp {
    pub width: usize,
    pub k: usize,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

impl Mlp {
    pub fn init(d: usize, width: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let w1 = (0..width * (d + 1))
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Mlp {
            width,
            k,
            w1,
            w2: vec![0.0; k * (width + 1)],
        }
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let mut h = affine(&self.w1, self.width, x);
        h.iter_mut().for_each(|v| *v = v.tanh());
        h
    }

    #[cfg(test)]
    pub fn loss(&self, xs: &[Vec<f64>], labels: &[u32]) -> f64 {
        let hs: Vec<Vec<f64>> = xs.iter().map(|x| self.hidden(x)).collect();
        loss(&self.w2, self.k, &hs, labels)
    }

    pub fn gradient(&self, xs: &[Vec<f64>], labels: &[u32]) -> (Vec<f64>, Vec<f64>) {
        let d = xs[0].len();
        let (hc, xc) = (self.width + 1, d + 1);
        let mut g1 = vec![0.0; self.width * xc];
        let mut g2 = vec![0.0; self.k * hc];
        for (x, &y) in xs.iter().zip(labels) {
            let h = self.hidden(x);
            let mut p = affine(&self.w2, self.k, &h);
            softmax_in_place(&mut p);
            p[y as usize - 1] -= 1.0;
            let mut dh = vec![0.0; self.width];
            for (r, err) in p.iter().enumerate() {
                let w = &self.w2[r * hc..(r + 1) * hc];
                let g = &mut g2[r * hc..(r + 1) * hc];
                for j in 0..self.width {
                    g[j] += err * h[j];
                    dh[j] += err * w[j];
                }
                g[self.width] += err;
            }
            for j in 0..self.width {
                let delta = dh[j] * (1.0 - h[j] * h[j]);
                let g = &mut g1[j * xc..(j + 1) * xc];
                for (gi, xi) in g[..d].iter_mut().zip(x) {
                    *gi += delta * xi;
                }
                g[d] += delta;
            }
        }
        let n = xs.len() as f64;
        g1.iter_mut().chain(g2.iter_mut()).for_each(|v| *v /= n);
        (g1, g2)
    }
}

impl EpEstimator {
    /// Class scores, one per depth.
    pub fn scores(&self, feature: &[f64]) -> Result<Vec<f64>, EstimatorError> {
        if feature.len() != self.feature_dim {
            return Err(EstimatorError::Dimension {
                expected: self.feature_dim,
                found: feature.len(),
            });
        }
        let k = self.depth_count as usize;
        Ok(match &self.hidden {
            None => affine(&self.weights, k, feature),
            Some(h) => {
                let mut a = affine(&h.weights, h.width, feature);
                a.iter_mut().for_each(|v| *v = v.tanh());
                affine(&self.weights, k, &a)
            }
        })
    }

    /// Argmax over class scores; ties go to the shallower depth.
    pub fn predict(&self, feature: &[f64]) -> Result<u32, EstimatorError> {
        let s = self.scores(feature)?;
        let mut best = 0;
        for (i, v) in s.iter().enumerate() {
            if *v > s[best] {
                best = i;
            }
        }
        Ok(best as u32 + 1)
    }

    pub fn accuracy(&self, data: &[LabeledFrame]) -> Result<f64, EstimatorError> {
        if data.is_empty() {
            return Err(EstimatorError::Empty);
        }
        let mut hits = 0;
        for l in data {
            hits += usize::from(self.predict(&l.feature)? == l.optimal_ep);
        }
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        let inner = match &self.hidden {
            None => self.feature_dim,
            Some(h) => {
                if h.weights.len() != h.width * (self.feature_dim + 1) {
                    return Err(EstimatorError::Malformed("hidden weight shape".into()));
                }
                h.width
            }
        };
        if self.depth_count < 1 || self.weights.len() != self.depth_count as usize * (inner + 1) {
            return Err(EstimatorError::Malformed(format!(
                "expected {} x {} weights, found {}",
                self.depth_count,
                inner + 1,
                self.weights.len()
            )));
        }
        let finite = self.weights.iter().all(|w| w.is_finite())
            && self
                .hidden
                .as_ref()
                .is_none_or(|h| h.weights.iter().all(|w| w.is_finite()));
        if !finite {
            return Err(EstimatorError::Malformed("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), EstimatorError> {
        let io = |source| EstimatorError::Io {
            path: path.display().to_string(),
            source,
        };
        crate::atomic_write(path, |w| {
            serde_json::to_writer_pretty(&mut *w, self).map_err(std::io::Error::other)
        })
        .map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, EstimatorError> {
        let text = std::fs::read_to_string(path).map_err(|source| EstimatorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let est: EpEstimator =
            serde_json::from_str(&text).map_err(|source| EstimatorError::Json {
                path: path.display().to_string(),
                source,
            })?;
        est.validate()?;
        Ok(est)
    }
}

pub fn predict(est: &EpEstimator, feature: &[f64]) -> Result<u32, EstimatorError> {
    est.predict(feature)
}

/// `(tp, fp, fn)` at depth `k` from `(is_positive, predicted_opt)` samples:
/// a positive counts as found when `k >= opt`, a negative counts as a false
/// positive when `k < opt`.
pub fn extrapolate_counts(samples: &[(bool, u32)], k: u32) -> (u32, u32, u32) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for &(positive, opt) in samples {
        match (positive, k >= opt) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => fp += 1,
            (false, true) => {}
        }
    }
    (tp, fp, fn_)
}

pub fn extrapolate_metrics(samples: &[(bool, u32)], k: u32) -> (f64, f64) {
    let (tp, fp, fn_) = extrapolate_counts(samples, k);
    let s = EpScore::from_counts(k, tp, fp, fn_);
    (s.precision, s.recall)
}

/// Estimate-mode counterpart of [`crate::planner::pick_best_ep`]: only the
/// oracle runs on the samples; shallower exit points are judged from the
/// estimator's predicted optimal exit points.
pub fn pick_best_ep_estimated(
    store: &TraceStore,
    cache: &mut InferenceCache,
    est: &EpEstimator,
    query: &Query,
    chunk: Chunk,
    rate: f64,
    config: &PlannerConfig,
) -> Result<(u32, EpMetrics), PlanError> {
    let k = store.depth_count();
    if est.depth_count != k {
        return Err(EstimatorError::DepthMismatch {
            estimator: est.depth_count,
            trace: k,
        }
        .into());
    }
    let positions = sample_positions(chunk, rate);
    let radius = config.reuse.radius(stride_for(rate));
    let oracle = store.ep_index(k);

    let mut samples = Vec::with_capacity(positions.len());
    for &f in &positions {
        let positive = cache.predicate_at(
            store,
            query,
            oracle,
            f,
            Phase::Planning,
            radius,
            chunk.start..chunk.end,
        )?;
        let opt = est.predict(&store.frame(f)?.feature)?;
        samples.push((positive, opt));
    }
    cache.charge_aux(
        Phase::Planning,
        "estimator",
        config.estimator_cost,
        positions.len() as u64,
    );

    let scores = config
        .candidates(k)
        .into_iter()
        .map(|d| {
            let (tp, fp, fn_) = extrapolate_counts(&samples, d);
            EpScore::from_counts(d, tp, fp, fn_)
        })
        .collect();
    let positives = samples.iter().filter(|s| s.0).count();
    let metrics = EpMetrics {
        scores,
        posi_ratio: positives as f64 / samples.len() as f64,
        samples: samples.len() as u32,
    };
    Ok((metrics.best(config), metrics))
}
