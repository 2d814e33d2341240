//! Seeded synthetic traces.
//!
//! Ground truth is a list of segments, each placing `count` objects of one
//! class on every frame it covers. The oracle sees exactly that ground truth.
//! Shallower exit points see the same objects through a shared visibility
//! draw: an object survives at depth `k` when its draw clears the scaled miss
//! rate of `k`, so a detection kept by a shallow exit is also kept by every
//! deeper one.

use crate::par::{self, ExecMode};
use crate::query::{CmpOp, CountPredicate, Query};
use crate::trace::{
    default_models, BBox, Detection, FrameId, FrameRecord, ModelKind, ModelProfile, TraceStore,
    DEFAULT_FILTER_COST, DEFAULT_SPECIALIZED_COST, EXIT_POINT_SPEEDUPS, FILTER_MODEL_ID,
    SPECIALIZED_MODEL_ID,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Miss-rate multiplier per unit of difficulty: `p = miss * (1 + GAIN * d)`.
pub const DIFFICULTY_GAIN: f64 = 3.0;

/// False negative ratios of the five exit points, shallowest first.
pub const DEFAULT_MISS_RATES: [f64; 5] = [0.4270, 0.2695, 0.1622, 0.0656, 0.0];

/// Probability per frame of one spurious detection.
pub const DEFAULT_FALSE_RATES: [f64; 5] = [0.05, 0.03, 0.02, 0.01, 0.0];

pub const DEFAULT_FRAME_COUNT: u32 = 12_800;
pub const DEFAULT_FEATURE_DIM: usize = 8;
pub const DEFAULT_FEATURE_NOISE: f64 = 0.1;

/// Classes that feed the feature embedding, in embedding order.
pub const CLASS_VOCAB: [&str; 4] = ["Car", "Truck", "Bus", "Person"];

const EMBED_SEED: u64 = 0x7ea5_e11d;
const BOX_GRID: f64 = 64.0;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("segment {index} [{start}, {end}) lies outside [0, {frame_count})")]
    SegmentRange {
        index: usize,
        start: FrameId,
        end: FrameId,
        frame_count: u32,
    },
    #[error("rate for depth {depth} is {value}, outside [0, 1]")]
    Rate { depth: u32, value: f64 },
    #[error("oracle depth {0} must have zero miss and false rates")]
    OracleRate(u32),
    #[error("rate tables must cover depths 1..K with K >= 2")]
    Depths,
    #[error("segment {0} difficulty outside [0, 1]")]
    Difficulty(usize),
    #[error("frame_count and feature_dim must be positive")]
    Empty,
    #[error("unknown regime {0}")]
    UnknownRegime(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: FrameId,
    pub end: FrameId,
    pub class: String,
    pub count: u32,
    pub difficulty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub frame_count: u32,
    pub segments: Vec<Segment>,
    pub ep_miss_rate: BTreeMap<u32, f64>,
    pub ep_false_rate: BTreeMap<u32, f64>,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
    /// Predicate the filter and specialized fields are noisy answers to.
    pub target: Option<CountPredicate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FrequentEasy,
    FrequentHard,
    RareHard,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::FrequentEasy, Regime::FrequentHard, Regime::RareHard];
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::FrequentEasy => "frequent_easy",
            Regime::FrequentHard => "frequent_hard",
            Regime::RareHard => "rare_hard",
        })
    }
}

/// The four benchmark queries: three regimes, with the rare/hard regime
/// appearing on two different sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Q1,
    Q2,
    Q3,
    Q4,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Q1, Preset::Q2, Preset::Q3, Preset::Q4];

    pub fn regime(self) -> Regime {
        match self {
            Preset::Q1 => Regime::FrequentEasy,
            Preset::Q2 => Regime::FrequentHard,
            Preset::Q3 | Preset::Q4 => Regime::RareHard,
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            Preset::Q4 => "Jackson-Town",
            _ => "UA-DeTrac",
        }
    }

    pub fn predicate(self) -> CountPredicate {
        match self {
            Preset::Q1 | Preset::Q4 => CountPredicate::new("Car", CmpOp::GE, 4),
            Preset::Q2 => CountPredicate::new("Truck", CmpOp::GE, 1),
            Preset::Q3 => CountPredicate::new("Bus", CmpOp::GE, 4),
        }
    }

    pub fn query(self) -> Query {
        Query::new(self.source(), vec![self.predicate()])
    }

    pub fn spec(self, frame_count: u32, seed: u64) -> ScenarioSpec {
        let n = frame_count;
        let segments = match self {
            Preset::Q1 => {
                let mut s = Vec::new();
                let bursts = [
                    (0.00, 0.14),
                    (0.17, 0.33),
                    (0.36, 0.52),
                    (0.55, 0.71),
                    (0.74, 0.88),
                    (0.91, 1.00),
                ];
                for w in bursts.windows(2) {
                    s.extend(seg(n, w[0].1, w[1].0, "Car", 2, 0.1));
                }
                for (a, b) in bursts {
                    s.extend(seg(n, a, b, "Car", 16, 0.1));
                }
                s
            }
            Preset::Q2 => {
                let mut s = seg(n, 0.0, 1.0, "Car", 6, 0.1);
                for (a, b) in [(0.05, 0.20), (0.26, 0.45), (0.70, 0.95)] {
                    s.extend(seg(n, a, b, "Truck", 1, 0.8));
                }
                s.extend(seg(n, 0.50, 0.62, "Truck", 2, 0.7));
                s
            }
            Preset::Q3 => {
                let mut s = seg(n, 0.0, 1.0, "Car", 3, 0.2);
                s.extend(seg(n, 0.57, 0.60, "Bus", 2, 0.8));
                s.extend(seg(n, 0.60, 0.70, "Bus", 4, 0.8));
                s.extend(seg(n, 0.70, 0.73, "Bus", 2, 0.8));
                s
            }
            Preset::Q4 => {
                let mut s = seg(n, 0.0, 1.0, "Person", 1, 0.2);
                s.extend(seg(n, 0.27, 0.30, "Car", 2, 0.75));
                s.extend(seg(n, 0.30, 0.40, "Car", 5, 0.75));
                s.extend(seg(n, 0.40, 0.43, "Car", 2, 0.75));
                s
            }
        };
        ScenarioSpec {
            name: self.source().to_string(),
            frame_count,
            segments,
            ep_miss_rate: rate_table(&DEFAULT_MISS_RATES),
            ep_false_rate: rate_table(&DEFAULT_FALSE_RATES),
            feature_dim: DEFAULT_FEATURE_DIM,
            feature_noise: DEFAULT_FEATURE_NOISE,
            seed,
            target: Some(self.predicate()),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Q1 => "q1",
            Preset::Q2 => "q2",
            Preset::Q3 => "q3",
            Preset::Q4 => "q4",
        })
    }
}

impl FromStr for Preset {
    type Err = SpecError;

    /// Accepts `q1`..`q4` or a regime name (mapped to its first query).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "q1" | "frequent_easy" => Preset::Q1,
            "q2" | "frequent_hard" => Preset::Q2,
            "q3" | "rare_hard" => Preset::Q3,
            "q4" => Preset::Q4,
            _ => return Err(SpecError::UnknownRegime(s.to_string())),
        })
    }
}

fn seg(n: u32, a: f64, b: f64, class: &str, count: u32, difficulty: f64) -> Vec<Segment> {
    let start = (a * n as f64).round() as u32;
    let end = ((b * n as f64).round() as u32).min(n);
    if start >= end {
        return vec![];
    }
    vec![Segment {
        start,
        end,
        class: class.to_string(),
        count,
        difficulty,
    }]
}

fn rate_table(rates: &[f64]) -> BTreeMap<u32, f64> {
    (1..).zip(rates.iter().copied()).collect()
}

/// Default scenario for a regime at the default size and seed 0.
pub fn preset(regime: Regime) -> ScenarioSpec {
    preset_sized(regime, DEFAULT_FRAME_COUNT, 0)
}

pub fn preset_sized(regime: Regime, frame_count: u32, seed: u64) -> ScenarioSpec {
    let p = match regime {
        Regime::FrequentEasy => Preset::Q1,
        Regime::FrequentHard => Preset::Q2,
        Regime::RareHard => Preset::Q3,
    };
    p.spec(frame_count, seed)
}

/// A randomized scenario family used for property sweeps: one target
/// predicate, a handful of event segments with random difficulty, sub-threshold
/// shoulders around each event and a background class.
pub fn random_spec(seed: u64, frame_count: u32) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
    let n = frame_count as f64;
    let target_class = ["Car", "Truck", "Bus"][rng.random_range(0..3)];
    let background = if target_class == "Car" {
        "Person"
    } else {
        "Car"
    };
    let threshold = [1u32, 2, 4][rng.random_range(0..3)];
    let mut segments = vec![Segment {
        start: 0,
        end: frame_count,
        class: background.to_string(),
        count: rng.random_range(0..=4),
        difficulty: rng.random_range(0.0..0.3),
    }];
    let events = rng.random_range(1..=4);
    for _ in 0..events {
        let len = (n * rng.random_range(0.04..0.2)).max(1.0);
        let start = rng.random_range(0.0..(n - len).max(1.0));
        let (start, end) = (start as u32, ((start + len) as u32).min(frame_count));
        let difficulty: f64 = rng.random_range(0.0..1.0);
        let count = threshold + rng.random_range(0..=6);
        let shoulder = (len * 0.2) as u32;
        if threshold > 1 && shoulder > 0 {
            segments.push(Segment {
                start: start.saturating_sub(shoulder),
                end: start,
                class: target_class.to_string(),
                count: threshold - 1,
                difficulty,
            });
        }
        segments.push(Segment {
            start,
            end,
            class: target_class.to_string(),
            count,
            difficulty,
        });
    }
    segments.retain(|s| s.start < s.end && s.count > 0);
    ScenarioSpec {
        name: "synthetic".into(),
        frame_count,
        segments,
        ep_miss_rate: rate_table(&DEFAULT_MISS_RATES),
        ep_false_rate: rate_table(&DEFAULT_FALSE_RATES),
        feature_dim: DEFAULT_FEATURE_DIM,
        feature_noise: DEFAULT_FEATURE_NOISE,
        seed,
        target: Some(CountPredicate::new(target_class, CmpOp::GE, threshold)),
    }
}

impl ScenarioSpec {
    /// The target predicate as a query over this scenario's trace.
    pub fn query(&self) -> Option<Query> {
        self.target
            .clone()
            .map(|p| Query::new(self.name.clone(), vec![p]))
    }

    pub fn depth_count(&self) -> u32 {
        self.ep_miss_rate.len() as u32
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.frame_count == 0 || self.feature_dim == 0 {
            return Err(SpecError::Empty);
        }
        let k = self.depth_count();
        let keys_ok = |m: &BTreeMap<u32, f64>| m.keys().copied().eq(1..=k);
        if k < 2 || !keys_ok(&self.ep_miss_rate) || !keys_ok(&self.ep_false_rate) {
            return Err(SpecError::Depths);
        }
        for table in [&self.ep_miss_rate, &self.ep_false_rate] {
            for (&depth, &value) in table {
                if !(0.0..=1.0).contains(&value) {
                    return Err(SpecError::Rate { depth, value });
                }
            }
            if table[&k] != 0.0 {
                return Err(SpecError::OracleRate(k));
            }
        }
        for (index, s) in self.segments.iter().enumerate() {
            if s.start >= s.end || s.end > self.frame_count {
                return Err(SpecError::SegmentRange {
                    index,
                    start: s.start,
                    end: s.end,
                    frame_count: self.frame_count,
                });
            }
            if !(0.0..=1.0).contains(&s.difficulty) {
                return Err(SpecError::Difficulty(index));
            }
        }
        Ok(())
    }

    /// Miss probability of exit point `depth` on an object of difficulty `d`.
    pub fn miss_probability(&self, depth: u32, d: f64) -> f64 {
        (self.ep_miss_rate[&depth] * (1.0 + DIFFICULTY_GAIN * d)).clamp(0.0, 1.0)
    }

    fn models(&self) -> Vec<ModelProfile> {
        let k = self.depth_count();
        if k as usize == EXIT_POINT_SPEEDUPS.len() {
            return default_models();
        }
        let mut models: Vec<ModelProfile> = (1..=k)
            .map(|d| ModelProfile::exit_point(d, d as f64 / k as f64))
            .collect();
        models.push(ModelProfile::auxiliary(
            FILTER_MODEL_ID,
            ModelKind::Filter,
            DEFAULT_FILTER_COST,
        ));
        models.push(ModelProfile::auxiliary(
            SPECIALIZED_MODEL_ID,
            ModelKind::Specialized,
            DEFAULT_SPECIALIZED_COST,
        ));
        models
    }
}

/// Fixed projection from ground-truth summary to feature space.
fn embedding(feature_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(EMBED_SEED);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..feature_dim)
        .map(|_| {
            (0..CLASS_VOCAB.len() + 1)
                .map(|_| normal.sample(&mut rng))
                .collect()
        })
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(2..=10) as f64;
    let h = rng.random_range(2..=10) as f64;
    let x = rng.random_range(0..=(BOX_GRID as u32 - w as u32)) as f64;
    let y = rng.random_range(0..=(BOX_GRID as u32 - h as u32)) as f64;
    BBox {
        x: x / BOX_GRID,
        y: y / BOX_GRID,
        w: w / BOX_GRID,
        h: h / BOX_GRID,
    }
}

fn quantize(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

struct FrameContext<'a> {
    spec: &'a ScenarioSpec,
    embed: &'a [Vec<f64>],
    classes: &'a [String],
    ep_ids: &'a [String],
    noise: Option<Normal<f64>>,
}

impl FrameContext<'_> {
    fn frame(&self, frame: FrameId) -> FrameRecord {
        let spec = self.spec;
        let k = spec.depth_count();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(frame as u64);

        let mut oracle = Vec::new();
        let mut draws = Vec::new();
        let mut difficulty: f64 = 0.0;
        for s in spec
            .segments
            .iter()
            .filter(|s| (s.start..s.end).contains(&frame))
        {
            difficulty = difficulty.max(s.difficulty);
            for _ in 0..s.count {
                let conf = quantize(rng.random_range(0.8..=1.0));
                oracle.push(Detection::new(s.class.clone(), conf, random_box(&mut rng)));
                draws.push((rng.random::<f64>(), s.difficulty));
            }
        }

        let mut detections = BTreeMap::new();
        for depth in 1..k {
            let mut dets = Vec::new();
            for (obj, &(u, d)) in oracle.iter().zip(&draws) {
                let p = spec.miss_probability(depth, d);
                if u >= p {
                    let conf = quantize(obj.confidence * (1.0 - 0.35 * p));
                    dets.push(Detection::new(obj.class_label.clone(), conf, obj.bbox));
                }
            }
            let spurious = rng.random::<f64>() < spec.ep_false_rate[&depth];
            if spurious && !self.classes.is_empty() {
                let class = &self.classes[rng.random_range(0..self.classes.len())];
                let conf = quantize(rng.random_range(0.3..0.9));
                dets.push(Detection::new(class.clone(), conf, random_box(&mut rng)));
            }
            detections.insert(self.ep_ids[depth as usize - 1].clone(), dets);
        }

        let mut summary = vec![0.0; CLASS_VOCAB.len() + 1];
        for det in &oracle {
            if let Some(i) = CLASS_VOCAB.iter().position(|c| *c == det.class_label) {
                summary[i] += 0.25;
            }
        }
        summary[CLASS_VOCAB.len()] = difficulty;
        let feature = self
            .embed
            .iter()
            .map(|row| {
                let clean: f64 = row.iter().zip(&summary).map(|(a, z)| a * z).sum();
                clean + self.noise.map_or(0.0, |n| n.sample(&mut rng))
            })
            .collect();

        let (filter_score, specialized_answer) = match &spec.target {
            Some(target) => {
                let count = oracle
                    .iter()
                    .filter(|d| d.class_label == target.class_label)
                    .count() as u32;
                let positive = target.op.holds(count, target.threshold);
                let present = count > 0;
                let base = if positive {
                    0.75
                } else if present {
                    0.45
                } else {
                    0.15
                };
                let jitter = Normal::new(0.0, 0.08 + 0.15 * difficulty).unwrap();
                let score = quantize((base + jitter.sample(&mut rng)).clamp(0.0, 1.0));
                let flip = rng.random::<f64>() < 0.02 + 0.4 * difficulty;
                (Some(score), Some(positive != flip))
            }
            None => (None, None),
        };

        detections.insert(self.ep_ids[k as usize - 1].clone(), oracle);
        FrameRecord {
            frame_id: frame,
            detections,
            feature,
            filter_score,
            specialized_answer,
        }
    }
}

/// Generates a trace. Deterministic in `spec` (each frame draws from its own
/// stream of the seeded generator), so the result does not depend on `mode`.
pub fn generate_with(spec: &ScenarioSpec, mode: ExecMode) -> Result<TraceStore, SpecError> {
    spec.validate()?;
    let models = spec.models();
    let ep_ids: Vec<String> = models
        .iter()
        .filter(|m| m.kind == ModelKind::ExitPoint)
        .map(|m| m.model_id.clone())
        .collect();
    let classes: Vec<String> = spec
        .segments
        .iter()
        .map(|s| s.class.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let embed = embedding(spec.feature_dim);
    let ctx = FrameContext {
        spec,
        embed: &embed,
        classes: &classes,
        ep_ids: &ep_ids,
        noise: (spec.feature_noise > 0.0).then(|| Normal::new(0.0, spec.feature_noise).unwrap()),
    };
    let ids: Vec<FrameId> = (0..spec.frame_count).collect();
    let frames = par::map(mode, &ids, |&f| ctx.frame(f));
    Ok(
        TraceStore::new(spec.name.clone(), models, frames, spec.feature_dim)
            .expect("generator emits valid traces"),
    )
}

pub fn generate(spec: &ScenarioSpec) -> Result<TraceStore, SpecError> {
    generate_with(spec, ExecMode::default())
}

/// Ground-truth census of a query over the oracle detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub frames: u32,
    pub positives: u32,
    pub positive_fraction: f64,
}

pub fn census(store: &TraceStore, query: &Query) -> Census {
    let k = store.depth_count();
    let positives = (0..store.frame_count())
        .filter(|&f| query.eval(store.ep_detections(k, f)))
        .count() as u32;
    Census {
        frames: store.frame_count(),
        positives,
        positive_fraction: positives as f64 / store.frame_count() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(frame_count: u32) -> ScenarioSpec {
        ScenarioSpec {
            name: "t".into(),
            frame_count,
            segments: vec![],
            ep_miss_rate: rate_table(&DEFAULT_MISS_RATES),
            ep_false_rate: rate_table(&DEFAULT_FALSE_RATES),
            feature_dim: 4,
            feature_noise: 0.1,
            seed: 3,
            target: None,
        }
    }

    #[test]
    fn empty_ground_truth_means_empty_detections() {
        let store = generate(&quiet(50)).unwrap();
        for f in store.frames() {
            assert!(f.detections.values().all(Vec::is_empty));
        }
    }

    #[test]
    fn oracle_rates_are_zero_in_presets() {
        for p in Preset::ALL {
            let spec = p.spec(1000, 0);
            assert_eq!(spec.ep_miss_rate[&5], 0.0);
            assert_eq!(spec.ep_false_rate[&5], 0.0);
            assert_eq!(spec.ep_miss_rate[&1], 0.4270);
            assert_eq!(spec.ep_miss_rate[&4], 0.0656);
            spec.validate().unwrap();
        }
    }

    #[test]
    fn preset_difficulties() {
        let easy = preset(Regime::FrequentEasy);
        assert!(easy.segments.iter().all(|s| s.difficulty <= 0.2));
        for r in [Regime::FrequentHard, Regime::RareHard] {
            let spec = preset(r);
            let target = spec.target.clone().unwrap();
            assert!(spec
                .segments
                .iter()
                .filter(|s| s.class == target.class_label)
                .all(|s| s.difficulty >= 0.7));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = quiet(10);
        spec.segments.push(Segment {
            start: 5,
            end: 11,
            class: "Car".into(),
            count: 1,
            difficulty: 0.0,
        });
        assert!(matches!(
            spec.validate(),
            Err(SpecError::SegmentRange { .. })
        ));
        let mut spec = quiet(10);
        spec.ep_miss_rate.insert(5, 0.1);
        assert_eq!(spec.validate(), Err(SpecError::OracleRate(5)));
    }

    #[test]
    fn regime_names_parse() {
        assert_eq!("rare_hard".parse::<Preset>().unwrap(), Preset::Q3);
        assert_eq!("Q4".parse::<Preset>().unwrap(), Preset::Q4);
        assert!("sometimes".parse::<Preset>().is_err());
    }
}
