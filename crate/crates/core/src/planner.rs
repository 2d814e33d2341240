//! Hierarchical fine-grained planning.
//!
//! The video is planned top-down. Each chunk is sampled at a stride derived
//! from the current sampling rate, the sampled frames pick the cheapest exit
//! point that meets the precision/recall floor, and the chunk is then either
//! assigned that exit point, skipped, or split with the sampling rate doubled.

use crate::estimator::{pick_best_ep_estimated, EpEstimator, EstimatorError};
use crate::inference::{InferenceCache, Phase};
use crate::query::Query;
use crate::trace::{FrameId, TraceError, TraceStore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("query reads from {query} but the trace is {trace}")]
    SourceMismatch { query: String, trace: String },
    #[error("invalid planner config: {0}")]
    Config(String),
    #[error("estimate mode needs a trained estimator")]
    MissingEstimator,
    #[error("plan does not tile [0, {frame_count}): {reason}")]
    Tiling { frame_count: u32, reason: String },
    #[error("invalid plan action {0:?}; expected \"skip\" or \"ep:<k>\"")]
    Action(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Evaluate,
    Estimate,
}

/// How far planning may snap a sample onto an already computed frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReuseRule {
    Off,
    /// `floor(stride / divisor)` at the current sampling stride.
    StrideFraction(u32),
    Fixed(u32),
}

impl ReuseRule {
    pub fn radius(self, stride: u32) -> u32 {
        match self {
            ReuseRule::Off => 0,
            ReuseRule::StrideFraction(d) => stride / d.max(1),
            ReuseRule::Fixed(r) => r,
        }
    }
}

/// Which exit points the planner may assign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpSet {
    All,
    OracleOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub precision_min: f64,
    pub recall_min: f64,
    pub min_chunk: u32,
    pub max_final_rate: f64,
    pub posi_sufficient: f64,
    pub branching: u32,
    pub selection_mode: SelectionMode,
    pub reuse: ReuseRule,
    pub ep_set: EpSet,
    /// Cost of one estimator prediction, in oracle-frame units.
    pub estimator_cost: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            precision_min: 0.8,
            recall_min: 0.8,
            min_chunk: 100,
            max_final_rate: 0.1,
            posi_sufficient: 0.05,
            branching: 2,
            selection_mode: SelectionMode::Evaluate,
            reuse: ReuseRule::StrideFraction(4),
            ep_set: EpSet::All,
            estimator_cost: 0.01,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::Config(m.to_string()));
        if !(self.max_final_rate > 0.0 && self.max_final_rate <= 1.0) {
            return bad("max_final_rate must be in (0, 1]");
        }
        if self.branching < 2 {
            return bad("branching must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.posi_sufficient) {
            return bad("posi_sufficient must be in [0, 1]");
        }
        if self.min_chunk == 0 {
            return bad("min_chunk must be positive");
        }
        if !(0.0..=1.0).contains(&self.precision_min) || !(0.0..=1.0).contains(&self.recall_min) {
            return bad("precision_min and recall_min must be in [0, 1]");
        }
        if self.estimator_cost.is_nan() || self.estimator_cost < 0.0 {
            return bad("estimator_cost must be non-negative");
        }
        Ok(())
    }

    /// Depth ranks the planner may choose from, shallowest first.
    pub fn candidates(&self, depth_count: u32) -> Vec<u32> {
        match self.ep_set {
            EpSet::All => (1..=depth_count).collect(),
            EpSet::OracleOnly => vec![depth_count],
        }
    }
}

/// Half-open frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chunk {
    pub start: FrameId,
    pub end: FrameId,
}

impl Chunk {
    pub fn new(start: FrameId, end: FrameId) -> Self {
        assert!(start < end, "empty chunk [{start}, {end})");
        Chunk { start, end }
    }

    pub fn len(&self) -> u32 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn frames(&self) -> std::ops::Range<FrameId> {
        self.start..self.end
    }

    /// Splits into `parts` near-equal pieces; earlier pieces take the remainder.
    pub fn split(&self, parts: u32) -> Vec<Chunk> {
        let len = self.len();
        let (q, r) = (len / parts, len % parts);
        let mut out = Vec::with_capacity(parts as usize);
        let mut start = self.start;
        for i in 0..parts {
            let size = q + u32::from(i < r);
            if size > 0 {
                out.push(Chunk::new(start, start + size));
                start += size;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlanAction {
    Skip,
    UseEp(u32),
}

impl fmt::Display for PlanAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanAction::Skip => f.write_str("skip"),
            PlanAction::UseEp(k) => write!(f, "ep:{k}"),
        }
    }
}

impl FromStr for PlanAction {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "skip" {
            return Ok(PlanAction::Skip);
        }
        s.strip_prefix("ep:")
            .and_then(|k| k.parse::<u32>().ok())
            .filter(|&k| k >= 1)
            .map(PlanAction::UseEp)
            .ok_or_else(|| PlanError::Action(s.to_string()))
    }
}

impl Serialize for PlanAction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PlanAction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlanEntry {
    pub start: FrameId,
    pub end: FrameId,
    pub action: PlanAction,
}

impl PlanEntry {
    pub fn chunk(&self) -> Chunk {
        Chunk::new(self.start, self.end)
    }
}

/// Ordered chunk assignments. Serialized as a JSON list of
/// `{start, end, action}` with `action` either `"skip"` or `"ep:<k>"`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Plan {
    pub entries: Vec<PlanEntry>,
}

impl Plan {
    pub fn single(frame_count: u32, action: PlanAction) -> Self {
        Plan {
            entries: vec![PlanEntry {
                start: 0,
                end: frame_count,
                action,
            }],
        }
    }

    /// Builds a plan from one action per frame, merging equal neighbours.
    pub fn from_frame_actions(actions: &[PlanAction]) -> Self {
        let mut entries: Vec<PlanEntry> = Vec::new();
        for (f, &action) in actions.iter().enumerate() {
            match entries.last_mut() {
                Some(last) if last.action == action => last.end = f as FrameId + 1,
                _ => entries.push(PlanEntry {
                    start: f as FrameId,
                    end: f as FrameId + 1,
                    action,
                }),
            }
        }
        Plan { entries }
    }

    /// Checks that the chunks are sorted, disjoint, and cover `[0, frame_count)`,
    /// and that every exit point exists.
    pub fn validate(&self, frame_count: u32, depth_count: u32) -> Result<(), PlanError> {
        let fail = |reason: String| PlanError::Tiling {
            frame_count,
            reason,
        };
        let mut next = 0;
        for e in &self.entries {
            if e.start != next {
                return Err(fail(format!(
                    "chunk [{}, {}) starts at {}, expected {next}",
                    e.start, e.end, e.start
                )));
            }
            if e.end <= e.start {
                return Err(fail(format!("empty chunk [{}, {})", e.start, e.end)));
            }
            if let PlanAction::UseEp(k) = e.action {
                if k == 0 || k > depth_count {
                    return Err(fail(format!("exit point {k} outside 1..={depth_count}")));
                }
            }
            next = e.end;
        }
        if next != frame_count {
            return Err(fail(format!("coverage ends at {next}")));
        }
        Ok(())
    }

    pub fn frames_with(&self, action: PlanAction) -> u32 {
        self.entries
            .iter()
            .filter(|e| e.action == action)
            .map(|e| e.end - e.start)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpScore {
    pub depth: u32,
    pub tp: u32,
    pub fp: u32,
    #[serde(rename = "fn")]
    pub fn_: u32,
    pub precision: f64,
    pub recall: f64,
}

impl EpScore {
    /// Precision and recall with the empty-denominator convention of 1.
    pub fn from_counts(depth: u32, tp: u32, fp: u32, fn_: u32) -> Self {
        let ratio = |num: u32, den: u32| {
            if den == 0 {
                1.0
            } else {
                num as f64 / den as f64
            }
        };
        EpScore {
            depth,
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
        }
    }

    pub fn meets(&self, config: &PlannerConfig) -> bool {
        self.precision >= config.precision_min && self.recall >= config.recall_min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpMetrics {
    pub scores: Vec<EpScore>,
    pub posi_ratio: f64,
    pub samples: u32,
}

impl EpMetrics {
    pub fn score(&self, depth: u32) -> Option<&EpScore> {
        self.scores.iter().find(|s| s.depth == depth)
    }

    /// Cheapest scored exit point meeting both floors. Falls back to the
    /// deepest scored one, which is the oracle whenever it is a candidate.
    pub fn best(&self, config: &PlannerConfig) -> u32 {
        self.scores
            .iter()
            .find(|s| s.meets(config))
            .or(self.scores.last())
            .map(|s| s.depth)
            .expect("at least one candidate")
    }
}

/// Initial sampling rate and maximum recursion depth for a video of
/// `frame_count` frames. The depth is the smallest `D` with
/// `min_chunk * 2^D >= frame_count`, and the rate is `max_final_rate / 2^D`,
/// so doubling once per level never exceeds `max_final_rate`.
pub fn initial_sampling_rate(frame_count: u32, config: &PlannerConfig) -> (f64, u32) {
    let mut depth = 0u32;
    while (config.min_chunk as u64) << depth < frame_count as u64 {
        depth += 1;
    }
    (config.max_final_rate / f64::powi(2.0, depth as i32), depth)
}

pub fn stride_for(rate: f64) -> u32 {
    ((1.0 / rate).round() as u32).max(1)
}

/// Stride-aligned sample positions: `start, start + s, ...` below `end`.
pub fn sample_positions(chunk: Chunk, rate: f64) -> Vec<FrameId> {
    chunk.frames().step_by(stride_for(rate) as usize).collect()
}

/// Confusion counts of `pred` against `truth`.
pub(crate) fn confusion(truth: &[bool], pred: &[bool]) -> (u32, u32, u32) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&t, &p) in truth.iter().zip(pred) {
        match (t, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

/// Evaluates every candidate exit point on the chunk's samples against the
/// oracle and returns the cheapest one that meets the precision/recall floor.
pub fn pick_best_ep(
    store: &TraceStore,
    cache: &mut InferenceCache,
    query: &Query,
    chunk: Chunk,
    rate: f64,
    config: &PlannerConfig,
) -> Result<(u32, EpMetrics), PlanError> {
    let positions = sample_positions(chunk, rate);
    let radius = config.reuse.radius(stride_for(rate));
    let k = store.depth_count();
    let candidates = config.candidates(k);
    let oracle = store.ep_index(k);

    let mut truth = Vec::with_capacity(positions.len());
    let mut preds: Vec<Vec<bool>> = vec![Vec::with_capacity(positions.len()); candidates.len()];
    for &f in &positions {
        let t = cache.predicate_at(
            store,
            query,
            oracle,
            f,
            Phase::Planning,
            radius,
            chunk.start..chunk.end,
        )?;
        truth.push(t);
        for (slot, &depth) in preds.iter_mut().zip(&candidates) {
            let p = if depth == k {
                t
            } else {
                cache.predicate_at(
                    store,
                    query,
                    store.ep_index(depth),
                    f,
                    Phase::Planning,
                    radius,
                    chunk.start..chunk.end,
                )?
            };
            slot.push(p);
        }
    }

    let scores: Vec<EpScore> = candidates
        .iter()
        .zip(&preds)
        .map(|(&depth, p)| {
            let (tp, fp, fn_) = confusion(&truth, p);
            EpScore::from_counts(depth, tp, fp, fn_)
        })
        .collect();
    let positives = truth.iter().filter(|&&t| t).count();
    let metrics = EpMetrics {
        scores,
        posi_ratio: positives as f64 / truth.len() as f64,
        samples: truth.len() as u32,
    };
    Ok((metrics.best(config), metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningReport {
    pub opt_cost: f64,
    pub inference_calls: u64,
    pub samples_evaluated: u64,
    pub chunks_evaluated: u64,
    pub recursion_depth_max: u32,
    pub initial_rate: f64,
    pub max_depth: u32,
    /// Largest sampling rate used at any level, as `1 / stride`.
    pub max_realized_rate: f64,
    /// Largest nominal `rate0 * 2^level` reached.
    pub max_nominal_rate: f64,
}

/// One planning run over a shared cache.
pub struct PlanSearch<'a> {
    pub store: &'a TraceStore,
    pub query: &'a Query,
    pub config: &'a PlannerConfig,
    pub estimator: Option<&'a EpEstimator>,
    samples: u64,
    chunks: u64,
    depth_max: u32,
    max_realized_rate: f64,
    max_nominal_rate: f64,
}

impl<'a> PlanSearch<'a> {
    pub fn new(
        store: &'a TraceStore,
        query: &'a Query,
        config: &'a PlannerConfig,
        estimator: Option<&'a EpEstimator>,
    ) -> Self {
        PlanSearch {
            store,
            query,
            config,
            estimator,
            samples: 0,
            chunks: 0,
            depth_max: 0,
            max_realized_rate: 0.0,
            max_nominal_rate: 0.0,
        }
    }

    fn pick(
        &mut self,
        cache: &mut InferenceCache,
        chunk: Chunk,
        rate: f64,
    ) -> Result<(u32, EpMetrics), PlanError> {
        match (self.config.selection_mode, self.estimator) {
            (SelectionMode::Evaluate, _) => {
                pick_best_ep(self.store, cache, self.query, chunk, rate, self.config)
            }
            (SelectionMode::Estimate, Some(est)) => {
                pick_best_ep_estimated(self.store, cache, est, self.query, chunk, rate, self.config)
            }
            (SelectionMode::Estimate, None) => Err(PlanError::MissingEstimator),
        }
    }

    /// Plans `chunk` at sampling `rate` and recursion `depth`, appending the
    /// resulting assignments (which tile `chunk`) to `out`.
    pub fn get_query_plan(
        &mut self,
        cache: &mut InferenceCache,
        chunk: Chunk,
        rate: f64,
        depth: u32,
        out: &mut Vec<PlanEntry>,
    ) -> Result<(), PlanError> {
        let (best, metrics) = self.pick(cache, chunk, rate)?;
        self.samples += u64::from(metrics.samples);
        self.chunks += 1;
        self.depth_max = self.depth_max.max(depth);
        self.max_realized_rate = self.max_realized_rate.max(1.0 / stride_for(rate) as f64);
        self.max_nominal_rate = self.max_nominal_rate.max(rate);

        let sufficient = metrics.posi_ratio >= self.config.posi_sufficient;
        let emit = |action| PlanEntry {
            start: chunk.start,
            end: chunk.end,
            action,
        };
        if (sufficient && best == 1) || chunk.len() <= self.config.min_chunk {
            out.push(emit(PlanAction::UseEp(best)));
        } else if !sufficient {
            out.push(emit(PlanAction::Skip));
        } else {
            for sub in chunk.split(self.config.branching) {
                self.get_query_plan(cache, sub, rate * 2.0, depth + 1, out)?;
            }
        }
        Ok(())
    }

    /// Top-level driver over `[0, N)` using `cache` for all planning inference.
    pub fn run(mut self, cache: &mut InferenceCache) -> Result<(Plan, PlanningReport), PlanError> {
        self.config.validate()?;
        if self.query.source != self.store.name() {
            return Err(PlanError::SourceMismatch {
                query: self.query.source.clone(),
                trace: self.store.name().to_string(),
            });
        }
        let n = self.store.frame_count();
        let (rate, max_depth) = initial_sampling_rate(n, self.config);
        let mut entries = Vec::new();
        self.get_query_plan(cache, Chunk::new(0, n), rate, 0, &mut entries)?;
        let plan = Plan { entries };
        debug_assert!(plan.validate(n, self.store.depth_count()).is_ok());
        let report = PlanningReport {
            opt_cost: cache.cost(Phase::Planning),
            inference_calls: cache.calls(),
            samples_evaluated: self.samples,
            chunks_evaluated: self.chunks,
            recursion_depth_max: self.depth_max,
            initial_rate: rate,
            max_depth,
            max_realized_rate: self.max_realized_rate,
            max_nominal_rate: self.max_nominal_rate,
        };
        Ok((plan, report))
    }
}

/// Free-function form of one recursion step, for callers that drive the
/// search themselves.
pub fn get_query_plan(
    store: &TraceStore,
    cache: &mut InferenceCache,
    query: &Query,
    chunk: Chunk,
    rate: f64,
    config: &PlannerConfig,
    depth: u32,
) -> Result<Vec<PlanEntry>, PlanError> {
    let mut out = Vec::new();
    PlanSearch::new(store, query, config, None)
        .get_query_plan(cache, chunk, rate, depth, &mut out)?;
    Ok(out)
}

/// Plans `query` over `store` in evaluate mode with a fresh cache.
pub fn plan(
    store: &TraceStore,
    query: &Query,
    config: &PlannerConfig,
) -> Result<(Plan, PlanningReport), PlanError> {
    let mut cache = InferenceCache::new(store);
    PlanSearch::new(store, query, config, None).run(&mut cache)
}

/// Plans into a caller-owned cache so execution can reuse planning results.
pub fn plan_with_cache(
    store: &TraceStore,
    cache: &mut InferenceCache,
    query: &Query,
    config: &PlannerConfig,
    estimator: Option<&EpEstimator>,
) -> Result<(Plan, PlanningReport), PlanError> {
    PlanSearch::new(store, query, config, estimator).run(cache)
}
