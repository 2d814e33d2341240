//! Trace-driven query planning and cost simulation for early-exit video
//! analytics.
//!
//! A [`trace::TraceStore`] holds precomputed detections for every exit point
//! of a single early-exit detector, plus the auxiliary models used by the
//! baselines. All model access goes through an [`inference::InferenceCache`],
//! which prices first computations and splits them into planning and
//! execution cost.

pub mod baselines;
pub mod cli;
pub mod estimator;
pub mod executor;
pub mod inference;
pub mod par;
pub mod planner;
pub mod query;
pub mod synthgen;
pub mod systems;
pub mod trace;

pub use estimator::EpEstimator;
pub use executor::{execute, oracle_result, score, RunReport, Score};
pub use inference::{InferenceCache, Phase};
pub use par::ExecMode;
pub use planner::{plan, Chunk, Plan, PlanAction, PlannerConfig};
pub use query::{parse, Query};
pub use systems::{run_system, RunConfig, System};
pub use trace::{load_trace, write_trace, TraceStore};

use std::io::{self, BufWriter, Write};
use std::path::Path;

/// Writes `path` through a temporary file in the same directory and renames
/// it into place, so readers never observe a partial file.
pub(crate) fn atomic_write<F>(path: &Path, body: F) -> io::Result<()>
where
    F: FnOnce(&mut BufWriter<&mut tempfile::NamedTempFile>) -> io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(&mut tmp);
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::query::{CmpOp, CountPredicate, Query};
    use crate::trace::{default_exit_points, BBox, Detection, FrameRecord, TraceStore};
    use std::collections::BTreeMap;

    /// Five default exit points over `n` frames named "tiny"; `cars(depth, frame)`
    /// gives the number of Car detections each exit point reports.
    pub fn tiny_store(n: u32, cars: impl Fn(u32, u32) -> u32) -> TraceStore {
        let models = default_exit_points();
        let frames = (0..n)
            .map(|f| {
                let detections: BTreeMap<String, Vec<Detection>> = models
                    .iter()
                    .map(|m| {
                        let d = m.depth_rank.unwrap();
                        let dets = (0..cars(d, f))
                            .map(|i| {
                                let x = (i % 8) as f64 / 8.0;
                                Detection::new(
                                    "Car",
                                    0.9,
                                    BBox {
                                        x,
                                        y: 0.25,
                                        w: 0.125,
                                        h: 0.125,
                                    },
                                )
                            })
                            .collect();
                        (m.model_id.clone(), dets)
                    })
                    .collect();
                FrameRecord {
                    frame_id: f,
                    detections,
                    feature: vec![f as f64, 1.0],
                    filter_score: None,
                    specialized_answer: None,
                }
            })
            .collect();
        TraceStore::new("tiny", models, frames, 2).unwrap()
    }

    /// One row per frame, one predicate outcome per exit point (shallowest first),
    /// realised as 4 or 0 cars under `cars_ge(4)`.
    pub fn ep_pattern_store(rows: &[[bool; 5]]) -> TraceStore {
        let rows = rows.to_vec();
        tiny_store(rows.len() as u32, move |d, f| {
            if rows[f as usize][d as usize - 1] {
                4
            } else {
                0
            }
        })
    }

    pub fn cars_ge(n: u32) -> Query {
        Query::new("tiny", vec![CountPredicate::new("Car", CmpOp::GE, n)])
    }
}
