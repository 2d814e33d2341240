//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any criterion fails. Thresholds live in `limits`.

use epplan::baselines::{self, CascadeConfig};
use epplan::estimator::{self, LabeledFrame};
use epplan::inference::{InferenceCache, Phase};
use epplan::planner::{self, Chunk, PlanAction, PlannerConfig, ReuseRule, SelectionMode};
use epplan::query::{self, QueryError};
use epplan::synthgen::{self, Preset};
use epplan::systems::{run_system, train_estimator, RunConfig, System};
use epplan::{ExecMode, TraceStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

mod limits {
    pub const SAMPLING_SIZES: [u32; 5] = [100, 800, 1_000, 10_000, 100_000];
    pub const MAX_FINAL_RATE: f64 = 0.1;
    pub const SWEEP_TRACES: u64 = 50;
    pub const REGIME_FRAMES: u32 = 12_800;
    pub const EASY_EP1_FRACTION: f64 = 0.9;
    pub const EASY_F1: f64 = 0.9;
    pub const EASY_SPEEDUP: f64 = 4.0;
    pub const RARE_SKIP_FRACTION: f64 = 0.5;
    pub const RARE_RECALL: f64 = 0.8;
    pub const RARE_SPEEDUP: f64 = 3.0;
    pub const FILTER_FRAMES: u32 = 12_800;
    /// One oracle frame.
    pub const FILTER_CROSSING_SLACK: f64 = 1.0;
    pub const ESTIMATE_RATIO: f64 = 0.6;
    pub const ESTIMATE_RATIO_SLACK: f64 = 0.1;
    pub const OPTIMALITY_FRAMES: u32 = 6_400;
    pub const OPTIMALITY_FACTOR: f64 = 2.0;
    pub const GRAD_TOL: f64 = 1e-6;
    pub const GRAD_STEP: f64 = 1e-5;
    pub const GRAD_BATCHES: u64 = 20;
    pub const ESTIMATOR_ACCURACY: f64 = 0.7;
    pub const ESTIMATOR_EPOCHS: u32 = 20;
    pub const CASCADE_RATIO: f64 = 1.5;
    /// Share of frames the second most common stopping depth must hold for a
    /// trace to count as mixed-depth.
    pub const MIXED_DEPTH_SHARE: f64 = 0.1;
    pub const MALFORMED_VARIANTS: usize = 20;
}

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn preset_store(p: Preset, frames: u32, seed: u64) -> TraceStore {
    synthgen::generate(&p.spec(frames, seed)).expect("preset generates")
}

/// Frame count of the `seed`-th random sweep trace; deliberately not a power
/// of two times the minimum chunk.
fn sweep_frames(seed: u64) -> u32 {
    3_000 + (seed as u32 * 7_919) % 17_000
}

// Criterion 1: extrapolation against a brute-force indicator sum.

fn brute_force_metrics(samples: &[(bool, u32)], k: u32) -> (f64, f64) {
    let mut tp = 0u32;
    let mut fp = 0u32;
    let mut fn_ = 0u32;
    for positive in [true, false] {
        for opt in 1..=3u32 {
            for &(p, o) in samples {
                if p != positive || o != opt {
                    continue;
                }
                let reached = u32::from(k >= opt);
                if positive {
                    tp += reached;
                    fn_ += 1 - reached;
                } else {
                    fp += 1 - reached;
                }
            }
        }
    }
    let ratio = |a: u32, b: u32| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    (ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

/// Every multiset of size `0..=max` over `kinds`, as sorted lists.
fn multisets<T: Copy>(kinds: &[T], max: usize) -> Vec<Vec<T>> {
    fn grow<T: Copy>(
        kinds: &[T],
        from: usize,
        left: usize,
        cur: &mut Vec<T>,
        out: &mut Vec<Vec<T>>,
    ) {
        out.push(cur.clone());
        if left == 0 {
            return;
        }
        for i in from..kinds.len() {
            cur.push(kinds[i]);
            grow(kinds, i, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    grow(kinds, 0, max, &mut Vec::new(), &mut out);
    out
}

fn criterion_1() -> Outcome {
    let kinds: Vec<(bool, u32)> = [true, false]
        .into_iter()
        .flat_map(|p| (1..=3).map(move |o| (p, o)))
        .collect();
    let sets = multisets(&kinds, 6);
    let mut checked = 0;
    let mut mismatches = 0;
    for s in &sets {
        for k in 1..=3 {
            checked += 1;
            if estimator::extrapolate_metrics(s, k) != brute_force_metrics(s, k) {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && sets.len() == 924,
        format!(
            "{} multisets, {checked} cases, {mismatches} mismatches",
            sets.len()
        ),
    )
}

// Criterion 2: sampling-rate bound.

fn criterion_2() -> Outcome {
    let config = PlannerConfig::default();
    let mut worst_realized: f64 = 0.0;
    let mut worst_nominal: f64 = 0.0;
    let mut exact = true;
    for (i, &n) in limits::SAMPLING_SIZES.iter().enumerate() {
        let (rate, depth) = planner::initial_sampling_rate(n, &config);
        exact &= rate * f64::from(1u32 << depth) <= limits::MAX_FINAL_RATE;
        let spec = synthgen::random_spec(i as u64, n);
        let store = synthgen::generate(&spec).expect("random spec generates");
        let query = spec.query().expect("random spec has a target");
        let (_, report) = planner::plan(&store, &query, &config).expect("planning succeeds");
        worst_realized = worst_realized.max(report.max_realized_rate);
        worst_nominal = worst_nominal.max(report.max_nominal_rate);
    }
    outcome(
        exact && worst_realized <= limits::MAX_FINAL_RATE && worst_nominal <= limits::MAX_FINAL_RATE,
        format!(
            "rate*2^D bound exact: {exact}; max realized rate {worst_realized:.4}, max nominal {worst_nominal:.4}"
        ),
    )
}

// Criterion 3: memoization.

fn criterion_3() -> Outcome {
    let off = PlannerConfig {
        reuse: ReuseRule::Off,
        ..PlannerConfig::default()
    };
    let default = PlannerConfig::default();
    let mut plan_mismatch = Vec::new();
    let mut not_fewer = Vec::new();
    let mut refined = 0;
    for seed in 0..limits::SWEEP_TRACES {
        let spec = synthgen::random_spec(seed, sweep_frames(seed));
        let store = synthgen::generate(&spec).expect("random spec generates");
        let query = spec.query().expect("random spec has a target");

        let (cold_plan, cold) = planner::plan(&store, &query, &off).expect("planning succeeds");
        let mut warm = InferenceCache::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..store.frame_count() / 4 {
            let model = store.ep_index(rng.random_range(1..=store.depth_count()));
            let frame = rng.random_range(0..store.frame_count());
            warm.infer_at(&store, model, frame, Phase::Planning)
                .expect("frame in range");
        }
        let (warm_plan, _) = planner::plan_with_cache(&store, &mut warm, &query, &off, None)
            .expect("planning succeeds");
        if warm_plan != cold_plan {
            plan_mismatch.push(seed);
        }

        if cold.recursion_depth_max > 0 {
            refined += 1;
            let (_, reused) = planner::plan(&store, &query, &default).expect("planning succeeds");
            if reused.inference_calls >= cold.inference_calls {
                not_fewer.push((seed, cold.inference_calls, reused.inference_calls));
            }
        }
    }
    outcome(
        plan_mismatch.is_empty() && not_fewer.is_empty(),
        format!(
            "warm/cold plan mismatches {plan_mismatch:?}; {refined} refined traces, reuse not strictly fewer calls on {} (seed, off, reuse): {not_fewer:?}",
            not_fewer.len()
        ),
    )
}

// Criterion 4: regime trends.

fn criterion_4() -> Outcome {
    let config = RunConfig::default();
    let mut pass = true;
    let mut parts = Vec::new();

    let q1 = preset_store(Preset::Q1, limits::REGIME_FRAMES, 0);
    let r = run_system(&q1, &Preset::Q1.query(), System::ThiaEi, &config).expect("run succeeds");
    let ep1 = r.ep_fraction(&PlanAction::UseEp(1).to_string());
    pass &= ep1 >= limits::EASY_EP1_FRACTION
        && r.metrics.f1 >= limits::EASY_F1
        && r.speedup_vs_naive >= limits::EASY_SPEEDUP;
    parts.push(format!(
        "frequent_easy ep1 {ep1:.3} f1 {:.3} speedup {:.2}",
        r.metrics.f1, r.speedup_vs_naive
    ));

    for p in [Preset::Q3, Preset::Q4] {
        let store = preset_store(p, limits::REGIME_FRAMES, 0);
        let r = run_system(&store, &p.query(), System::ThiaEi, &config).expect("run succeeds");
        let skip = r.ep_fraction(&PlanAction::Skip.to_string());
        pass &= skip >= limits::RARE_SKIP_FRACTION
            && r.metrics.recall >= limits::RARE_RECALL
            && r.speedup_vs_naive >= limits::RARE_SPEEDUP;
        parts.push(format!(
            "rare_hard {p:?} skip {skip:.3} recall {:.3} speedup {:.2}",
            r.metrics.recall, r.speedup_vs_naive
        ));
    }
    outcome(pass, parts.join("; "))
}

// Criterion 5: fine vs coarse.

fn criterion_5() -> Outcome {
    let config = RunConfig::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for p in Preset::ALL {
        let store = preset_store(p, limits::REGIME_FRAMES, 0);
        let query = p.query();
        let fine = run_system(&store, &query, System::ThiaEi, &config).expect("run succeeds");
        let coarse = run_system(&store, &query, System::Coarse, &config).expect("run succeeds");
        pass &= fine.exec_cost <= coarse.exec_cost;
        parts.push(format!(
            "{p:?} {:.1} vs {:.1}",
            fine.exec_cost, coarse.exec_cost
        ));
    }
    outcome(
        pass,
        format!("fine vs coarse exec_cost: {}", parts.join(", ")),
    )
}

// Criterion 6: filter inequality.

fn criterion_6() -> Outcome {
    let store = preset_store(Preset::Q2, limits::FILTER_FRAMES, 0);
    let query = Preset::Q2.query();
    let n = f64::from(store.frame_count());
    let oracle = store.oracle().cost_per_frame;
    let filter = store
        .model_of_kind(epplan::trace::ModelKind::Filter)
        .expect("trace has a filter")
        .cost_per_frame;
    let naive = baselines::run_naive(&store, &query, ExecMode::default())
        .expect("run succeeds")
        .total_cost;
    let crossing = filter / oracle;
    let total = |r: f64| {
        baselines::run_filter_at_reduction(&store, &query, r, ExecMode::default())
            .expect("run succeeds")
            .total_cost
    };
    let (below, at, above) = (total(0.05), total(crossing), total(0.5));
    let model_matches = [0.05, crossing, 0.5].iter().all(|&r| {
        let kept = n - (r * n).round();
        let expected = n * filter + kept * oracle;
        (total(r) - expected).abs() < 1e-6
            && (baselines::filter_cost_model(n, filter, oracle, r) - expected).abs() <= oracle
    });
    let pass = below > naive
        && (at - naive).abs() <= limits::FILTER_CROSSING_SLACK * oracle
        && above < naive
        && model_matches;
    outcome(
        pass,
        format!(
            "C_f/C_o {crossing:.2}; naive {naive:.1}; r=0.05 {below:.1}, r={crossing:.2} {at:.1}, r=0.5 {above:.1}; cost model agrees: {model_matches}"
        ),
    )
}

// Criterion 7: estimation-mode savings on identical chunks and samples.

fn criterion_7() -> Outcome {
    let config = RunConfig::default();
    let evaluate = PlannerConfig::default();
    let estimate = PlannerConfig {
        selection_mode: SelectionMode::Estimate,
        ..PlannerConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for p in Preset::ALL {
        let store = preset_store(p, limits::REGIME_FRAMES, 0);
        let query = p.query();
        let est = train_estimator(&store, &query, &config).expect("training succeeds");
        let (rate0, _) = planner::initial_sampling_rate(store.frame_count(), &evaluate);
        let mut level = vec![(Chunk::new(0, store.frame_count()), rate0)];
        let mut chunks = level.clone();
        for _ in 0..3 {
            level = level
                .iter()
                .flat_map(|&(c, r)| c.split(2).into_iter().map(move |s| (s, r * 2.0)))
                .collect();
            chunks.extend(level.iter().copied());
        }
        let (mut ev, mut es) = (0.0, 0.0);
        for &(chunk, rate) in &chunks {
            let mut cache = InferenceCache::new(&store);
            planner::pick_best_ep(&store, &mut cache, &query, chunk, rate, &evaluate)
                .expect("selection succeeds");
            ev += cache.cost(Phase::Planning);
            let mut cache = InferenceCache::new(&store);
            estimator::pick_best_ep_estimated(
                &store, &mut cache, &est, &query, chunk, rate, &estimate,
            )
            .expect("selection succeeds");
            es += cache.cost(Phase::Planning);
        }
        let ratio = es / ev;
        worst = worst.max(ratio);
        parts.push(format!("{p:?} {ratio:.3}"));
    }
    outcome(
        worst <= limits::ESTIMATE_RATIO + limits::ESTIMATE_RATIO_SLACK,
        format!("estimate/evaluate opt_cost: {}", parts.join(", ")),
    )
}

// Criterion 8: optimality bound.

fn criterion_8() -> Outcome {
    let config = RunConfig::default();
    let mut below = Vec::new();
    let mut worst: f64 = 0.0;
    let mut worst_estimated: f64 = 0.0;
    for seed in 0..limits::SWEEP_TRACES {
        let p = Preset::ALL[(seed % 4) as usize];
        let store = preset_store(p, limits::OPTIMALITY_FRAMES, seed);
        let query = p.query();
        let optimal = run_system(&store, &query, System::Optimal, &config).expect("run succeeds");
        for s in System::ALL {
            let r = run_system(&store, &query, s, &config).expect("run succeeds");
            if r.total_cost < optimal.total_cost {
                below.push(format!("{seed}/{p:?}/{s}"));
            }
            let ratio = r.exec_cost / optimal.total_cost;
            match s {
                System::ThiaEi => worst = worst.max(ratio),
                System::Thia => worst_estimated = worst_estimated.max(ratio),
                _ => {}
            }
        }
    }
    outcome(
        below.is_empty() && worst <= limits::OPTIMALITY_FACTOR,
        format!(
            "systems below optimal: {below:?}; worst fine exec/optimal {worst:.3} (estimate mode, not gated: {worst_estimated:.3})"
        ),
    )
}

// Criterion 9: estimator gradient and accuracy.

fn criterion_9() -> Outcome {
    let (k, d) = (5usize, 8usize);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut max_err: f64 = 0.0;
    for _ in 0..limits::GRAD_BATCHES {
        let w: Vec<f64> = (0..k * (d + 1))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<u32> = (0..5).map(|_| rng.random_range(1..=k as u32)).collect();
        let g = estimator::gradient(&w, k, &xs, &labels);
        for i in 0..w.len() {
            let (mut hi, mut lo) = (w.clone(), w.clone());
            hi[i] += limits::GRAD_STEP;
            lo[i] -= limits::GRAD_STEP;
            let numeric = (estimator::loss(&hi, k, &xs, &labels)
                - estimator::loss(&lo, k, &xs, &labels))
                / (2.0 * limits::GRAD_STEP);
            max_err = max_err.max((numeric - g[i]).abs());
        }
    }

    let centers: Vec<Vec<f64>> = (0..k)
        .map(|c| (0..d).map(|j| if j % k == c { 3.0 } else { 0.0 }).collect())
        .collect();
    let mut draw = |n: usize| -> Vec<LabeledFrame> {
        (0..n)
            .map(|i| {
                let label = (i % k) as u32 + 1;
                let feature = centers[label as usize - 1]
                    .iter()
                    .map(|&c| c + rng.random_range(-1.0..1.0))
                    .collect();
                LabeledFrame {
                    frame_id: i as u32,
                    feature,
                    optimal_ep: label,
                }
            })
            .collect()
    };
    let train = draw(200);
    let holdout = draw(200);
    let est = estimator::train(
        &train,
        k as u32,
        limits::ESTIMATOR_EPOCHS,
        estimator::DEFAULT_LEARNING_RATE,
    )
    .expect("training succeeds");
    let accuracy = est.accuracy(&holdout).expect("dimensions match");
    outcome(
        max_err <= limits::GRAD_TOL && accuracy >= limits::ESTIMATOR_ACCURACY,
        format!(
            "max gradient error {max_err:.2e}; holdout accuracy {accuracy:.3} after {} epochs",
            est.epochs_trained
        ),
    )
}

// Criterion 10: cascade vs early exit with matched stopping depths.

fn criterion_10() -> Outcome {
    let store = preset_store(Preset::Q2, limits::REGIME_FRAMES, 0);
    let query = Preset::Q2.query();
    let config = CascadeConfig::default();
    let depths = baselines::cascade_stopping_depths(&store, &config);
    let mut counts = vec![0usize; store.depth_count() as usize];
    for &d in &depths {
        counts[d as usize - 1] += 1;
    }
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let mixed = counts[1] as f64 / depths.len() as f64 >= limits::MIXED_DEPTH_SHARE;
    let cascade = baselines::run_cascade(&store, &query, &config).expect("run succeeds");
    let ei = baselines::run_ei_matched(&store, &query, &config, ExecMode::default())
        .expect("run succeeds");
    let same_results = cascade.result_frames == ei.result_frames;
    let ratio = cascade.exec_cost / ei.exec_cost;
    outcome(
        mixed && same_results && ratio >= limits::CASCADE_RATIO,
        format!(
            "mixed depths {mixed}; identical answers {same_results}; cascade {:.1} / ei {:.1} = {ratio:.3}",
            cascade.exec_cost, ei.exec_cost
        ),
    )
}

// Criterion 11: parser corpus.

const TABLE_QUERIES: [&str; 4] = [
    "Select frameID \n From UA-DeTrac \n Where Count(Car) >= 4;",
    "Select frameID \n From UA-DeTrac \n Where Count(Truck) >= 1;",
    "Select frameID \n From UA-DeTrac \n Where Count(Bus) >= 4;",
    "Select frameID \n From Jackson-Town \n Where Count(Car) >= 4;",
];

/// Malformed variants of the first query. Each names the text at which the
/// error must be reported; an empty marker means end of input.
const MALFORMED: [(&str, &str); 20] = [
    ("", ""),
    ("Select", ""),
    ("Select frameID From UA-DeTrac Where Count(Car) >= 4", ""),
    ("Select frameID From UA-DeTrac Where Count(Car) >= ;", ";"),
    ("Select frameID From UA-DeTrac Where Count(Car) 4;", "4;"),
    ("Select frameID From UA-DeTrac Where Count(Car >= 4;", ">="),
    (
        "Select frameID From UA-DeTrac Where Count Car) >= 4;",
        "Car)",
    ),
    ("Select frameID From UA-DeTrac Where Sum(Car) >= 4;", "Sum"),
    ("Select frameID From UA-DeTrac Where ;", ";"),
    ("Select frameID From UA-DeTrac Count(Car) >= 4;", "Count"),
    (
        "Select frameID UA-DeTrac Where Count(Car) >= 4;",
        "UA-DeTrac",
    ),
    ("Select From UA-DeTrac Where Count(Car) >= 4;", "From"),
    ("Select * From UA-DeTrac Where Count(Car) >= 4;", "*"),
    (
        "Delete frameID From UA-DeTrac Where Count(Car) >= 4;",
        "Delete",
    ),
    ("Select frameID From Where Count(Car) >= 4;", "Count"),
    (
        "Select frameID From UA-DeTrac Where Count(Car) >= 4 AND;",
        ";",
    ),
    (
        "Select frameID From UA-DeTrac Where Count(Car) >= 4 OR Count(Bus) >= 1;",
        "OR",
    ),
    (
        "Select frameID From UA-DeTrac Where Count(Car) => 4;",
        "> 4",
    ),
    ("Select frameID From UA-DeTrac Where Count() >= 4;", ")"),
    (
        "Select frameID From UA-DeTrac Where Count(Car) >= 4; extra",
        "extra",
    ),
];

fn criterion_11() -> Outcome {
    let mut failures = Vec::new();
    let expected = [
        ("UA-DeTrac", "Car", 4),
        ("UA-DeTrac", "Truck", 1),
        ("UA-DeTrac", "Bus", 4),
        ("Jackson-Town", "Car", 4),
    ];
    for (text, (source, class, threshold)) in TABLE_QUERIES.iter().zip(expected) {
        match query::parse(text) {
            Ok(q) => {
                let shape_ok = q.source == source
                    && q.predicates.len() == 1
                    && q.predicates[0].class_label == class
                    && q.predicates[0].threshold == threshold;
                if !shape_ok || query::parse(&q.render()).as_ref() != Ok(&q) {
                    failures.push(format!("round trip {source}/{class}"));
                }
            }
            Err(e) => failures.push(format!("{text:?}: {e}")),
        }
    }
    let mut located = 0;
    for (text, marker) in MALFORMED {
        let at = if marker.is_empty() {
            text.len()
        } else {
            text.find(marker).expect("marker occurs in variant")
        };
        match query::parse(text) {
            Err(e @ QueryError::Syntax { .. }) if e.offset() == at => located += 1,
            other => failures.push(format!(
                "{text:?}: expected syntax error at {at}, got {other:?}"
            )),
        }
    }
    outcome(
        failures.is_empty() && located == limits::MALFORMED_VARIANTS,
        format!(
            "{} table queries; {located}/{} malformed variants located; failures {failures:?}",
            TABLE_QUERIES.len(),
            MALFORMED.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("extrapolation oracle", criterion_1),
        ("sampling bound", criterion_2),
        ("memoization", criterion_3),
        ("regime trends", criterion_4),
        ("fine vs coarse", criterion_5),
        ("filter inequality", criterion_6),
        ("estimation-mode savings", criterion_7),
        ("optimality bound", criterion_8),
        ("estimator", criterion_9),
        ("cascade vs early exit", criterion_10),
        ("parser corpus", criterion_11),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {:>2} {verdict} {name} ({:.1}s): {}",
            i + 1,
            start.elapsed().as_secs_f64(),
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    let distinct: BTreeSet<&str> = criteria.iter().map(|c| c.0).collect();
    assert_eq!(distinct.len(), criteria.len());
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
