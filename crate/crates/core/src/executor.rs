//! Plan execution and scoring against the oracle.

use crate::inference::{CacheDelta, InferenceCache, Phase};
use crate::par::{self, ExecMode};
use crate::planner::{Plan, PlanAction, PlanEntry, PlanError};
use crate::query::Query;
use crate::trace::{FrameId, TraceError, TraceStore};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set precision/recall of `result` against `truth`. An empty result has
/// precision 1, an empty truth has recall 1.
pub fn score(result: &BTreeSet<FrameId>, truth: &BTreeSet<FrameId>) -> Score {
    let hits = result.intersection(truth).count() as f64;
    let precision = if result.is_empty() {
        1.0
    } else {
        hits / result.len() as f64
    };
    let recall = if truth.is_empty() {
        1.0
    } else {
        hits / truth.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Score {
        precision,
        recall,
        f1,
    }
}

/// Frames on which the oracle's stored detections satisfy `query`. Not priced.
pub fn oracle_result(store: &TraceStore, query: &Query) -> BTreeSet<FrameId> {
    let k = store.depth_count();
    (0..store.frame_count())
        .filter(|&f| query.eval(store.ep_detections(k, f)))
        .collect()
}

/// Execution cost of one plan chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkCost {
    pub start: FrameId,
    pub end: FrameId,
    pub action: PlanAction,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub result_frames: BTreeSet<FrameId>,
    pub exec_cost: f64,
    pub ep_usage: BTreeMap<String, u32>,
    pub chunk_costs: Vec<ChunkCost>,
}

/// Frame counts per plan action, keyed `"skip"` or `"ep:<k>"`.
pub fn ep_usage(plan: &Plan) -> BTreeMap<String, u32> {
    let mut usage = BTreeMap::new();
    for e in &plan.entries {
        *usage.entry(e.action.to_string()).or_insert(0) += e.end - e.start;
    }
    usage
}

struct ChunkRun {
    hits: Vec<FrameId>,
    delta: Option<CacheDelta>,
}

fn run_chunk(
    store: &TraceStore,
    base: &InferenceCache,
    query: &Query,
    entry: &PlanEntry,
) -> Result<ChunkRun, TraceError> {
    let PlanAction::UseEp(k) = entry.action else {
        return Ok(ChunkRun {
            hits: Vec::new(),
            delta: None,
        });
    };
    let model = store.ep_index(k);
    let mut overlay = base.overlay(Phase::Execution);
    let mut hits = Vec::new();
    for f in entry.start..entry.end {
        if query.eval(overlay.infer_at(store, model, f)?) {
            hits.push(f);
        }
    }
    Ok(ChunkRun {
        hits,
        delta: Some(overlay.into_delta()),
    })
}

/// Executes `plan` in the default mode.
pub fn execute(
    store: &TraceStore,
    cache: &mut InferenceCache,
    plan: &Plan,
    query: &Query,
) -> Result<Execution, PlanError> {
    execute_with(store, cache, plan, query, ExecMode::default())
}

/// Skip chunks cost nothing and return nothing; `UseEp(k)` chunks evaluate
/// the predicate with exit point `k` on every frame. Frames already computed
/// (for instance by planning) are free. Chunks run on private overlays that
/// are merged in plan order, so the result is the same in every mode.
pub fn execute_with(
    store: &TraceStore,
    cache: &mut InferenceCache,
    plan: &Plan,
    query: &Query,
    mode: ExecMode,
) -> Result<Execution, PlanError> {
    plan.validate(store.frame_count(), store.depth_count())?;
    let base: &InferenceCache = cache;
    let runs = par::try_map(mode, &plan.entries, |e| run_chunk(store, base, query, e))?;

    let mut result_frames = BTreeSet::new();
    let mut chunk_costs = Vec::with_capacity(runs.len());
    let before = cache.cost(Phase::Execution);
    for (entry, run) in plan.entries.iter().zip(runs) {
        result_frames.extend(run.hits);
        let cost = match (entry.action, run.delta) {
            (PlanAction::UseEp(k), Some(delta)) => {
                let c = delta.len() as f64 * store.ep_cost(k);
                cache.absorb(delta);
                c
            }
            _ => 0.0,
        };
        chunk_costs.push(ChunkCost {
            start: entry.start,
            end: entry.end,
            action: entry.action,
            cost,
        });
    }
    Ok(Execution {
        result_frames,
        exec_cost: cache.cost(Phase::Execution) - before,
        ep_usage: ep_usage(plan),
        chunk_costs,
    })
}

/// Outcome of one system on one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub system: String,
    pub trace: String,
    pub query: String,
    pub frame_count: u32,
    pub result_frames: Vec<FrameId>,
    pub opt_cost: f64,
    pub exec_cost: f64,
    pub total_cost: f64,
    pub ep_usage: BTreeMap<String, u32>,
    pub metrics: Score,
    pub speedup_vs_naive: f64,
    pub inference_calls: u64,
    /// System-specific numbers, e.g. a filter's realized reduction rate.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chunk_costs: Vec<ChunkCost>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Plan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl RunReport {
    /// Assembles a report; `total_cost` is `opt_cost + exec_cost` and the
    /// speedup is naive cost (every frame through the oracle) over total cost.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        system: &str,
        store: &TraceStore,
        query: &Query,
        opt_cost: f64,
        exec_cost: f64,
        result: BTreeSet<FrameId>,
        ep_usage: BTreeMap<String, u32>,
        inference_calls: u64,
    ) -> Self {
        let truth = oracle_result(store, query);
        let total_cost = opt_cost + exec_cost;
        let naive = store.frame_count() as f64 * store.oracle().cost_per_frame;
        RunReport {
            system: system.to_string(),
            trace: store.name().to_string(),
            query: query.render(),
            frame_count: store.frame_count(),
            metrics: score(&result, &truth),
            result_frames: result.into_iter().collect(),
            opt_cost,
            exec_cost,
            total_cost,
            ep_usage,
            speedup_vs_naive: if total_cost > 0.0 {
                naive / total_cost
            } else {
                f64::INFINITY
            },
            inference_calls,
            extra: BTreeMap::new(),
            chunk_costs: Vec::new(),
            plan: None,
            config: None,
        }
    }

    pub fn ep_fraction(&self, action: &str) -> f64 {
        self.ep_usage.get(action).copied().unwrap_or(0) as f64 / self.frame_count as f64
    }
}
