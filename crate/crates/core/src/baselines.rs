//! Reference systems and the per-frame optimal plan.
//!
//! Every baseline owns a fresh [`InferenceCache`] so its costs are comparable
//! with the planner's.

use crate::executor::{execute_with, oracle_result, RunReport};
use crate::inference::{InferenceCache, Phase};
use crate::par::ExecMode;
use crate::planner::{confusion, EpMetrics, EpScore, Plan, PlanAction, PlanError, PlannerConfig};
use crate::query::Query;
use crate::trace::{
    Detection, FrameId, ModelKind, TraceError, TraceStore, DEFAULT_FILTER_COST,
    DEFAULT_SPECIALIZED_COST,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("frame {frame} has no {field}; the {system} baseline needs it on every frame")]
    MissingField {
        system: &'static str,
        field: &'static str,
        frame: FrameId,
    },
    #[error("{name} must be in {range}, got {value}")]
    Parameter {
        name: &'static str,
        range: &'static str,
        value: f64,
    },
}

fn check_unit(name: &'static str, value: f64, open_low: bool) -> Result<(), BaselineError> {
    let ok = if open_low {
        value > 0.0 && value <= 1.0
    } else {
        (0.0..=1.0).contains(&value)
    };
    if ok {
        Ok(())
    } else {
        Err(BaselineError::Parameter {
            name,
            range: if open_low { "(0, 1]" } else { "[0, 1]" },
            value,
        })
    }
}

/// One row of a system comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub system: String,
    pub opt_cost: f64,
    pub exec_cost: f64,
    pub total_cost: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub speedup_vs_naive: f64,
}

impl From<&RunReport> for ComparisonRow {
    fn from(r: &RunReport) -> Self {
        ComparisonRow {
            system: r.system.clone(),
            opt_cost: r.opt_cost,
            exec_cost: r.exec_cost,
            total_cost: r.total_cost,
            precision: r.metrics.precision,
            recall: r.metrics.recall,
            f1: r.metrics.f1,
            speedup_vs_naive: r.speedup_vs_naive,
        }
    }
}

fn run_plan(
    system: &str,
    store: &TraceStore,
    query: &Query,
    cache: &mut InferenceCache,
    plan: Plan,
    mode: ExecMode,
) -> Result<RunReport, BaselineError> {
    let ex = execute_with(store, cache, &plan, query, mode)?;
    let mut report = RunReport::assemble(
        system,
        store,
        query,
        cache.cost(Phase::Planning),
        ex.exec_cost,
        ex.result_frames,
        ex.ep_usage,
        cache.calls(),
    );
    report.chunk_costs = ex.chunk_costs;
    report.plan = Some(plan);
    Ok(report)
}

/// The oracle on every frame.
pub fn run_naive(
    store: &TraceStore,
    query: &Query,
    mode: ExecMode,
) -> Result<RunReport, BaselineError> {
    let mut cache = InferenceCache::new(store);
    let plan = Plan::single(store.frame_count(), PlanAction::UseEp(store.depth_count()));
    run_plan("naive", store, query, &mut cache, plan, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseConfig {
    pub sample_frac: f64,
    /// Whether execution may reuse the exit-point results computed while
    /// sampling.
    pub share_cache: bool,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        CoarseConfig {
            sample_frac: 0.1,
            share_cache: false,
        }
    }
}

/// Evaluates every exit point on a uniform stride sample of the whole video,
/// then runs the cheapest one meeting the precision/recall floor on all frames.
pub fn run_coarse(
    store: &TraceStore,
    query: &Query,
    planner: &PlannerConfig,
    coarse: &CoarseConfig,
    mode: ExecMode,
) -> Result<RunReport, BaselineError> {
    check_unit("sample_frac", coarse.sample_frac, true)?;
    let mut cache = InferenceCache::new(store);
    let k = store.depth_count();
    let stride = ((1.0 / coarse.sample_frac).round() as usize).max(1);
    let samples: Vec<FrameId> = (0..store.frame_count()).step_by(stride).collect();

    let mut preds = vec![Vec::with_capacity(samples.len()); k as usize];
    for &f in &samples {
        for d in 1..=k {
            let dets = cache.infer_at(store, store.ep_index(d), f, Phase::Planning)?;
            preds[d as usize - 1].push(query.eval(dets));
        }
    }
    let truth = &preds[k as usize - 1];
    let scores: Vec<EpScore> = planner
        .candidates(k)
        .into_iter()
        .map(|d| {
            let (tp, fp, fn_) = confusion(truth, &preds[d as usize - 1]);
            EpScore::from_counts(d, tp, fp, fn_)
        })
        .collect();
    let metrics = EpMetrics {
        scores,
        posi_ratio: truth.iter().filter(|&&t| t).count() as f64 / truth.len() as f64,
        samples: truth.len() as u32,
    };
    let best = metrics.best(planner);
    let opt_cost = cache.cost(Phase::Planning);
    let calls = cache.calls();

    let plan = Plan::single(store.frame_count(), PlanAction::UseEp(best));
    let mut report = if coarse.share_cache {
        run_plan("coarse", store, query, &mut cache, plan, mode)?
    } else {
        let mut exec_cache = InferenceCache::new(store);
        let mut r = run_plan("coarse", store, query, &mut exec_cache, plan, mode)?;
        r.opt_cost = opt_cost;
        r.total_cost = opt_cost + r.exec_cost;
        r.speedup_vs_naive =
            store.frame_count() as f64 * store.oracle().cost_per_frame / r.total_cost;
        r.inference_calls = calls + exec_cache.calls();
        r
    };
    report.extra.insert("chosen_ep".into(), best as f64);
    Ok(report)
}

fn filter_scores(store: &TraceStore) -> Result<Vec<f64>, BaselineError> {
    store
        .frames()
        .iter()
        .map(|r| {
            r.filter_score.ok_or(BaselineError::MissingField {
                system: "filter",
                field: "filter_score",
                frame: r.frame_id,
            })
        })
        .collect()
}

fn aux_cost(store: &TraceStore, kind: ModelKind, default: f64) -> f64 {
    store
        .model_of_kind(kind)
        .map_or(default, |m| m.cost_per_frame)
}

/// Total cost of a filter pipeline relative to its inputs:
/// `n * (c_f + (1 - r) * c_o)`.
pub fn filter_cost_model(n: f64, filter_cost: f64, oracle_cost: f64, reduction: f64) -> f64 {
    n * (filter_cost + (1.0 - reduction) * oracle_cost)
}

/// Scores every frame with the filter and sends frames scoring at least
/// `pass_threshold` to the oracle.
pub fn run_filter(
    store: &TraceStore,
    query: &Query,
    pass_threshold: f64,
    mode: ExecMode,
) -> Result<RunReport, BaselineError> {
    let scores = filter_scores(store)?;
    let passed: Vec<bool> = scores.iter().map(|&s| s >= pass_threshold).collect();
    run_filter_mask(store, query, &passed, mode)
}

/// Picks the pass threshold so that exactly `round(reduction * N)` frames,
/// those with the lowest filter scores, are discarded.
pub fn run_filter_at_reduction(
    store: &TraceStore,
    query: &Query,
    reduction: f64,
    mode: ExecMode,
) -> Result<RunReport, BaselineError> {
    check_unit("reduction", reduction, false)?;
    let scores = filter_scores(store)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let drop = (reduction * scores.len() as f64).round() as usize;
    let mut passed = vec![true; scores.len()];
    for &i in &order[..drop] {
        passed[i] = false;
    }
    run_filter_mask(store, query, &passed, mode)
}

fn run_filter_mask(
    store: &TraceStore,
    query: &Query,
    passed: &[bool],
    mode: ExecMode,
) -> Result<RunReport, BaselineError> {
    let n = store.frame_count();
    let mut cache = InferenceCache::new(store);
    cache.charge_aux(
        Phase::Execution,
        "filter",
        aux_cost(store, ModelKind::Filter, DEFAULT_FILTER_COST),
        u64::from(n),
    );
    let actions: Vec<PlanAction> = passed
        .iter()
        .map(|&p| {
            if p {
                PlanAction::UseEp(store.depth_count())
            } else {
                PlanAction::Skip
            }
        })
        .collect();
    let plan = Plan::from_frame_actions(&actions);
    let mut report = run_plan("filter", store, query, &mut cache, plan, mode)?;
    report.exec_cost = cache.cost(Phase::Execution);
    report.total_cost = report.opt_cost + report.exec_cost;
    report.speedup_vs_naive = n as f64 * store.oracle().cost_per_frame / report.total_cost;
    let dropped = passed.iter().filter(|&&p| !p).count();
    report
        .extra
        .insert("reduction_rate".into(), dropped as f64 / n as f64);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecializedConfig {
    pub holdout_frac: f64,
    pub f1_floor: f64,
}

impl Default for SpecializedConfig {
    fn default() -> Self {
        SpecializedConfig {
            holdout_frac: 0.05,
            f1_floor: 0.85,
        }
    }
}

/// Checks the specialized model against the oracle on a stride holdout. If its
/// F1 there reaches `f1_floor` it answers the whole query; otherwise the oracle
/// runs on every frame and the specialized model's cost is still paid.
pub fn run_specialized(
    store: &TraceStore,
    query: &Query,
    config: &SpecializedConfig,
    mode: ExecMode,
) -> Result<RunReport, BaselineError> {
    check_unit("holdout_frac", config.holdout_frac, true)?;
    let n = store.frame_count();
    let answers: Vec<bool> = store
        .frames()
        .iter()
        .map(|r| {
            r.specialized_answer.ok_or(BaselineError::MissingField {
                system: "specialized",
                field: "specialized_answer",
                frame: r.frame_id,
            })
        })
        .collect::<Result<_, _>>()?;
    let unit = aux_cost(store, ModelKind::Specialized, DEFAULT_SPECIALIZED_COST);
    let oracle = store.ep_index(store.depth_count());
    let mut cache = InferenceCache::new(store);

    let stride = ((1.0 / config.holdout_frac).round() as usize).max(1);
    let holdout: Vec<FrameId> = (0..n).step_by(stride).collect();
    let (mut truth, mut guess) = (BTreeSet::new(), BTreeSet::new());
    for &f in &holdout {
        if query.eval(cache.infer_at(store, oracle, f, Phase::Planning)?) {
            truth.insert(f);
        }
        if answers[f as usize] {
            guess.insert(f);
        }
    }
    cache.charge_aux(Phase::Planning, "specialized", unit, holdout.len() as u64);
    let holdout_f1 = crate::executor::score(&guess, &truth).f1;
    let fallback = holdout_f1 < config.f1_floor;

    // the holdout frames already have specialized answers
    cache.charge_aux(
        Phase::Execution,
        "specialized",
        unit,
        u64::from(n) - holdout.len() as u64,
    );
    let mut report = if fallback {
        let plan = Plan::single(n, PlanAction::UseEp(store.depth_count()));
        run_plan("specialized", store, query, &mut cache, plan, mode)?
    } else {
        let result: BTreeSet<FrameId> = (0..n).filter(|&f| answers[f as usize]).collect();
        let usage = [("specialized".to_string(), n)].into_iter().collect();
        RunReport::assemble(
            "specialized",
            store,
            query,
            0.0,
            0.0,
            result,
            usage,
            cache.calls(),
        )
    };
    report.opt_cost = cache.cost(Phase::Planning);
    report.exec_cost = cache.cost(Phase::Execution);
    report.total_cost = report.opt_cost + report.exec_cost;
    report.speedup_vs_naive = n as f64 * store.oracle().cost_per_frame / report.total_cost;
    report.extra.insert("holdout_f1".into(), holdout_f1);
    report
        .extra
        .insert("fallback".into(), f64::from(u8::from(fallback)));
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceAggregate {
    Min,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub confidence_threshold: f64,
    /// Charged once per transition to the next model within a frame.
    pub switch_cost: f64,
    pub aggregate: ConfidenceAggregate,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            confidence_threshold: 0.8,
            switch_cost: 0.0,
            aggregate: ConfidenceAggregate::Min,
        }
    }
}

/// Frame confidence of a detection list; an empty list has confidence 0.
pub fn frame_confidence(dets: &[Detection], aggregate: ConfidenceAggregate) -> f64 {
    if dets.is_empty() {
        return 0.0;
    }
    match aggregate {
        ConfidenceAggregate::Min => dets
            .iter()
            .map(|d| d.confidence)
            .fold(f64::INFINITY, f64::min),
        ConfidenceAggregate::Mean => {
            dets.iter().map(|d| d.confidence).sum::<f64>() / dets.len() as f64
        }
    }
}

/// Depth at which each frame stops under confidence-based escalation.
pub fn cascade_stopping_depths(store: &TraceStore, config: &CascadeConfig) -> Vec<u32> {
    let k = store.depth_count();
    (0..store.frame_count())
        .map(|f| {
            (1..k)
                .find(|&d| {
                    frame_confidence(store.ep_detections(d, f), config.aggregate)
                        >= config.confidence_threshold
                })
                .unwrap_or(k)
        })
        .collect()
}

/// A cascade of separate models: a frame pays for every model up to and
/// including the one it stops at, plus `switch_cost` per transition.
pub fn run_cascade(
    store: &TraceStore,
    query: &Query,
    config: &CascadeConfig,
) -> Result<RunReport, BaselineError> {
    let depths = cascade_stopping_depths(store, config);
    let mut cache = InferenceCache::new(store);
    let mut result = BTreeSet::new();
    let mut transitions = 0u64;
    let mut usage = std::collections::BTreeMap::new();
    for (f, &stop) in depths.iter().enumerate() {
        let f = f as FrameId;
        for d in 1..=stop {
            let dets = cache.infer_at(store, store.ep_index(d), f, Phase::Execution)?;
            if d == stop && query.eval(dets) {
                result.insert(f);
            }
        }
        transitions += u64::from(stop - 1);
        *usage
            .entry(PlanAction::UseEp(stop).to_string())
            .or_insert(0) += 1;
    }
    cache.charge_aux(Phase::Execution, "switch", config.switch_cost, transitions);
    let mut report = RunReport::assemble(
        "cascade",
        store,
        query,
        0.0,
        cache.cost(Phase::Execution),
        result,
        usage,
        cache.calls(),
    );
    report.extra.insert(
        "mean_stop_depth".into(),
        depths.iter().map(|&d| d as f64).sum::<f64>() / depths.len() as f64,
    );
    Ok(report)
}

/// The same per-frame stopping depths run on a single early-exit model,
/// where reaching exit `k` costs only `cost_k`.
pub fn run_ei_matched(
    store: &TraceStore,
    query: &Query,
    config: &CascadeConfig,
    mode: ExecMode,
) -> Result<RunReport, BaselineError> {
    let actions: Vec<PlanAction> = cascade_stopping_depths(store, config)
        .into_iter()
        .map(PlanAction::UseEp)
        .collect();
    let mut cache = InferenceCache::new(store);
    run_plan(
        "ei_matched",
        store,
        query,
        &mut cache,
        Plan::from_frame_actions(&actions),
        mode,
    )
}

/// Per-frame minimum-cost correct action: Skip on oracle-negative frames when
/// `allow_skip`, else the cheapest exit point agreeing with the oracle. Built
/// from stored results with no optimization cost.
pub fn optimal_actions(store: &TraceStore, query: &Query, allow_skip: bool) -> Vec<PlanAction> {
    let k = store.depth_count();
    (0..store.frame_count())
        .map(|f| {
            let truth = query.eval(store.ep_detections(k, f));
            if !truth && allow_skip {
                return PlanAction::Skip;
            }
            let d = (1..=k)
                .find(|&d| query.eval(store.ep_detections(d, f)) == truth)
                .unwrap_or(k);
            PlanAction::UseEp(d)
        })
        .collect()
}

pub fn optimal_plan(
    store: &TraceStore,
    query: &Query,
    allow_skip: bool,
    mode: ExecMode,
) -> Result<(Plan, RunReport), BaselineError> {
    let plan = Plan::from_frame_actions(&optimal_actions(store, query, allow_skip));
    let mut cache = InferenceCache::new(store);
    let report = run_plan("optimal", store, query, &mut cache, plan.clone(), mode)?;
    debug_assert_eq!(
        report
            .result_frames
            .iter()
            .copied()
            .collect::<BTreeSet<_>>(),
        oracle_result(store, query)
    );
    Ok((plan, report))
}
