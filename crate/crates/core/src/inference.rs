//! Priced access to detections.
//!
//! Every module that wants to "run" a model goes through an [`InferenceCache`]:
//! the first computation of a `(model, frame)` pair is charged to the phase
//! that is active at the time, later lookups are free. Costs are kept as
//! integer call counts per model so totals do not depend on merge order.

use crate::query::Query;
use crate::trace::{Detection, FrameId, TraceError, TraceStore};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Planning,
    Execution,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct AuxCharge {
    count: u64,
    unit_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub calls: u64,
    pub planning_cost: f64,
    pub execution_cost: f64,
}

#[derive(Debug, Clone)]
pub struct InferenceCache {
    unit_costs: Vec<f64>,
    /// Computed frames per model index.
    entries: Vec<BTreeSet<FrameId>>,
    /// First-computation counts per (phase, model index).
    counts: BTreeMap<(Phase, usize), u64>,
    /// Charges for work that is not a detection lookup (filters, estimator calls).
    aux: BTreeMap<(Phase, String), AuxCharge>,
}

impl InferenceCache {
    pub fn new(store: &TraceStore) -> Self {
        InferenceCache {
            unit_costs: store.models().iter().map(|m| m.cost_per_frame).collect(),
            entries: vec![BTreeSet::new(); store.models().len()],
            counts: BTreeMap::new(),
            aux: BTreeMap::new(),
        }
    }

    /// Number of distinct `(model, frame)` pairs ever computed.
    pub fn calls(&self) -> u64 {
        self.entries.iter().map(|e| e.len() as u64).sum()
    }

    pub fn contains(&self, model: usize, frame: FrameId) -> bool {
        self.entries.get(model).is_some_and(|e| e.contains(&frame))
    }

    pub fn cost(&self, phase: Phase) -> f64 {
        let inference = self
            .counts
            .iter()
            .filter(|((p, _), _)| *p == phase)
            .fold(0.0, |acc, ((_, m), &n)| {
                acc + n as f64 * self.unit_costs[*m]
            });
        let aux = self
            .aux
            .iter()
            .filter(|((p, _), _)| *p == phase)
            .fold(0.0, |acc, (_, a)| acc + a.count as f64 * a.unit_cost);
        inference + aux
    }

    pub fn total_cost(&self) -> f64 {
        self.cost(Phase::Planning) + self.cost(Phase::Execution)
    }

    /// Count of first computations of `model` charged to `phase`.
    pub fn computed(&self, phase: Phase, model: usize) -> u64 {
        self.counts.get(&(phase, model)).copied().unwrap_or(0)
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            calls: self.calls(),
            planning_cost: self.cost(Phase::Planning),
            execution_cost: self.cost(Phase::Execution),
        }
    }

    /// Charges `count` units of a non-detection operation, e.g. filter scoring.
    pub fn charge_aux(&mut self, phase: Phase, label: &str, unit_cost: f64, count: u64) {
        let entry = self
            .aux
            .entry((phase, label.to_string()))
            .or_insert(AuxCharge {
                count: 0,
                unit_cost,
            });
        entry.count += count;
        entry.unit_cost = unit_cost;
    }

    fn record(&mut self, model: usize, frame: FrameId, phase: Phase) -> bool {
        if self.entries[model].insert(frame) {
            *self.counts.entry((phase, model)).or_insert(0) += 1;
            true
        } else {
            false
        }
    }

    fn check(&self, store: &TraceStore, model: usize, frame: FrameId) -> Result<(), TraceError> {
        if model >= self.entries.len() {
            return Err(TraceError::UnknownModelId(format!("#{model}")));
        }
        if frame >= store.frame_count() {
            return Err(TraceError::FrameOutOfRange {
                frame,
                frame_count: store.frame_count(),
            });
        }
        Ok(())
    }

    /// Runs `model` on `frame`; a cache miss is charged to `phase`.
    pub fn infer<'s>(
        &mut self,
        store: &'s TraceStore,
        model: &str,
        frame: FrameId,
        phase: Phase,
    ) -> Result<&'s [Detection], TraceError> {
        let idx = store
            .model_index(model)
            .ok_or_else(|| TraceError::UnknownModelId(model.to_string()))?;
        self.infer_at(store, idx, frame, phase)
    }

    pub fn infer_at<'s>(
        &mut self,
        store: &'s TraceStore,
        model: usize,
        frame: FrameId,
        phase: Phase,
    ) -> Result<&'s [Detection], TraceError> {
        self.check(store, model, frame)?;
        let dets = store.detections_at(model, frame)?;
        self.record(model, frame, phase);
        Ok(dets)
    }

    /// Nearest cached frame of `model` within `radius` of `frame`; ties go to
    /// the lower frame id.
    pub fn nearest_cached(&self, model: usize, frame: FrameId, radius: u32) -> Option<FrameId> {
        self.nearest_cached_in(model, frame, radius, 0..FrameId::MAX)
    }

    /// Like [`nearest_cached`](Self::nearest_cached), restricted to frames in
    /// `bounds`.
    pub fn nearest_cached_in(
        &self,
        model: usize,
        frame: FrameId,
        radius: u32,
        bounds: Range<FrameId>,
    ) -> Option<FrameId> {
        let set = self.entries.get(model)?;
        if set.contains(&frame) {
            return Some(frame);
        }
        if radius == 0 {
            return None;
        }
        let lo = frame.saturating_sub(radius).max(bounds.start);
        let hi = frame
            .saturating_add(radius)
            .min(bounds.end.saturating_sub(1));
        let below = set.range(lo.min(frame)..frame).next_back().copied();
        let above = if hi > frame {
            set.range(frame + 1..=hi).next().copied()
        } else {
            None
        };
        match (below, above) {
            (Some(b), Some(a)) => Some(if frame - b <= a - frame { b } else { a }),
            (b, a) => b.or(a),
        }
    }

    /// Like [`infer_at`](Self::infer_at), but reuses any cached result of the
    /// same model within `radius` frames at no cost.
    pub fn infer_snapped<'s>(
        &mut self,
        store: &'s TraceStore,
        model: usize,
        frame: FrameId,
        radius: u32,
        phase: Phase,
    ) -> Result<(&'s [Detection], FrameId), TraceError> {
        self.infer_snapped_in(store, model, frame, radius, 0..FrameId::MAX, phase)
    }

    /// Like [`infer_snapped`](Self::infer_snapped), reusing only frames in
    /// `bounds`.
    pub fn infer_snapped_in<'s>(
        &mut self,
        store: &'s TraceStore,
        model: usize,
        frame: FrameId,
        radius: u32,
        bounds: Range<FrameId>,
        phase: Phase,
    ) -> Result<(&'s [Detection], FrameId), TraceError> {
        self.check(store, model, frame)?;
        if let Some(used) = self.nearest_cached_in(model, frame, radius, bounds) {
            return Ok((store.detections_at(model, used)?, used));
        }
        Ok((self.infer_at(store, model, frame, phase)?, frame))
    }

    /// Predicate result of `query` under `model` on `frame`, with reuse
    /// limited to frames in `bounds`.
    #[allow(clippy::too_many_arguments)]
    pub fn predicate_at(
        &mut self,
        store: &TraceStore,
        query: &Query,
        model: usize,
        frame: FrameId,
        phase: Phase,
        reuse_radius: u32,
        bounds: Range<FrameId>,
    ) -> Result<bool, TraceError> {
        let (dets, _) = self.infer_snapped_in(store, model, frame, reuse_radius, bounds, phase)?;
        Ok(query.eval(dets))
    }

    /// A private write layer for one worker. Reads fall through to `self`.
    pub fn overlay(&self, phase: Phase) -> CacheOverlay<'_> {
        CacheOverlay {
            base: self,
            phase,
            computed: Vec::new(),
            local: BTreeSet::new(),
        }
    }

    /// Merges an overlay's new entries. Pairs already present are not charged
    /// again, so merging is a union and conserves cost.
    pub fn absorb(&mut self, delta: CacheDelta) {
        for (model, frame) in delta.computed {
            self.record(model, frame, delta.phase);
        }
    }
}

/// Per-worker view over a shared cache, used for parallel execution.
#[derive(Debug)]
pub struct CacheOverlay<'c> {
    base: &'c InferenceCache,
    phase: Phase,
    computed: Vec<(usize, FrameId)>,
    local: BTreeSet<(usize, FrameId)>,
}

#[derive(Debug, Clone)]
pub struct CacheDelta {
    phase: Phase,
    computed: Vec<(usize, FrameId)>,
}

impl CacheDelta {
    pub fn len(&self) -> usize {
        self.computed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.computed.is_empty()
    }
}

impl CacheOverlay<'_> {
    pub fn infer_at<'s>(
        &mut self,
        store: &'s TraceStore,
        model: usize,
        frame: FrameId,
    ) -> Result<&'s [Detection], TraceError> {
        self.base.check(store, model, frame)?;
        let dets = store.detections_at(model, frame)?;
        if !self.base.contains(model, frame) && self.local.insert((model, frame)) {
            self.computed.push((model, frame));
        }
        Ok(dets)
    }

    pub fn into_delta(self) -> CacheDelta {
        CacheDelta {
            phase: self.phase,
            computed: self.computed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::tiny_store;

    #[test]
    fn memoized_second_call_is_free() {
        let store = tiny_store(40, |_, _| 1);
        let mut cache = InferenceCache::new(&store);
        cache.infer(&store, "EP-5", 7, Phase::Execution).unwrap();
        let before = cache.total_cost();
        cache.infer(&store, "EP-5", 7, Phase::Execution).unwrap();
        assert_eq!(cache.total_cost(), before);
        assert_eq!(cache.calls(), 1);
    }

    #[test]
    fn costs_follow_speedups() {
        let store = tiny_store(4, |_, _| 1);
        let mut cache = InferenceCache::new(&store);
        cache.infer(&store, "EP-1", 0, Phase::Execution).unwrap();
        cache.infer(&store, "EP-5", 0, Phase::Execution).unwrap();
        assert!((cache.total_cost() - (1.0 / 6.90 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn first_touch_phase_owns_the_cost() {
        let store = tiny_store(4, |_, _| 1);
        let mut cache = InferenceCache::new(&store);
        cache.infer(&store, "EP-2", 1, Phase::Planning).unwrap();
        cache.infer(&store, "EP-2", 1, Phase::Execution).unwrap();
        cache.infer(&store, "EP-3", 2, Phase::Execution).unwrap();
        assert!((cache.cost(Phase::Planning) - 1.0 / 2.62).abs() < 1e-12);
        assert!((cache.cost(Phase::Execution) - 1.0 / 2.46).abs() < 1e-12);
    }

    #[test]
    fn snapping_within_radius() {
        let store = tiny_store(64, |_, _| 1);
        let ep2 = store.ep_index(2);
        let mut cache = InferenceCache::new(&store);
        cache.infer_at(&store, ep2, 30, Phase::Planning).unwrap();
        let cost = cache.total_cost();
        let (_, used) = cache
            .infer_snapped(&store, ep2, 31, 2, Phase::Planning)
            .unwrap();
        assert_eq!(used, 30);
        assert_eq!(cache.total_cost(), cost);

        let (_, used) = cache
            .infer_snapped(&store, ep2, 31, 0, Phase::Planning)
            .unwrap();
        assert_eq!(used, 31);
        assert_eq!(cache.calls(), 2);
    }

    #[test]
    fn snapping_ties_go_low() {
        let store = tiny_store(64, |_, _| 1);
        let ep2 = store.ep_index(2);
        let mut cache = InferenceCache::new(&store);
        cache.infer_at(&store, ep2, 32, Phase::Planning).unwrap();
        cache.infer_at(&store, ep2, 28, Phase::Planning).unwrap();
        let (_, used) = cache
            .infer_snapped(&store, ep2, 30, 2, Phase::Planning)
            .unwrap();
        assert_eq!(used, 28);
    }

    #[test]
    fn snapped_predicate_equals_neighbor_lookup() {
        // frame f holds f % 6 cars on every exit point
        let store = tiny_store(64, |_, f| f % 6);
        let query = crate::query::parse("SELECT frameID FROM tiny WHERE Count(Car) >= 4;").unwrap();
        let ep1 = store.ep_index(1);
        let mut cache = InferenceCache::new(&store);
        cache.infer_at(&store, ep1, 10, Phase::Planning).unwrap();
        let got = cache
            .predicate_at(&store, &query, ep1, 12, Phase::Planning, 2, 0..FrameId::MAX)
            .unwrap();
        assert_eq!(got, query.eval(store.detections("EP-1", 10).unwrap()));
        assert!(got);
        assert!(!query.eval(store.detections("EP-1", 12).unwrap()));
    }

    #[test]
    fn unknown_model_and_frame() {
        let store = tiny_store(4, |_, _| 0);
        let mut cache = InferenceCache::new(&store);
        assert!(cache.infer(&store, "EP-9", 0, Phase::Planning).is_err());
        assert!(cache.infer(&store, "EP-1", 4, Phase::Planning).is_err());
        assert_eq!(cache.calls(), 0);
    }

    #[test]
    fn overlay_merge_is_a_union() {
        let store = tiny_store(16, |_, _| 1);
        let ep1 = store.ep_index(1);
        let mut cache = InferenceCache::new(&store);
        cache.infer_at(&store, ep1, 3, Phase::Planning).unwrap();
        let mut a = cache.overlay(Phase::Execution);
        let mut b = cache.overlay(Phase::Execution);
        for f in 0..8 {
            a.infer_at(&store, ep1, f).unwrap();
        }
        for f in 4..12 {
            b.infer_at(&store, ep1, f).unwrap();
        }
        let (da, db) = (a.into_delta(), b.into_delta());
        cache.absorb(da);
        cache.absorb(db);
        assert_eq!(cache.calls(), 12);
        assert_eq!(cache.computed(Phase::Execution, ep1), 11);
        assert_eq!(cache.computed(Phase::Planning, ep1), 1);
    }

    #[test]
    fn aux_charges_add_to_phase_cost() {
        let store = tiny_store(4, |_, _| 0);
        let mut cache = InferenceCache::new(&store);
        cache.charge_aux(Phase::Planning, "estimator", 0.01, 10);
        assert!((cache.cost(Phase::Planning) - 0.1).abs() < 1e-12);
        assert_eq!(cache.calls(), 0);
    }
}
