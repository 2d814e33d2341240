//! Trace data model.
//!
//! A trace stands in for "a video plus a family of detectors": every frame
//! carries the pre-computed detections of each exit point, a feature vector,
//! and optional outputs of the auxiliary filter and specialized models. The
//! on-disk form is a JSON manifest plus a JSON Lines frames file.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub type FrameId = u32;

/// Speedup of each exit point relative to the oracle, shallowest first.
pub const EXIT_POINT_SPEEDUPS: [f64; 5] = [6.90, 2.62, 2.46, 1.97, 1.00];

/// Per-frame cost of the binary filter model used by the filter baseline.
pub const DEFAULT_FILTER_COST: f64 = 0.1;

/// Per-frame cost of the specialized (direct answer) model.
pub const DEFAULT_SPECIALIZED_COST: f64 = 0.1;

pub const FILTER_MODEL_ID: &str = "filter";
pub const SPECIALIZED_MODEL_ID: &str = "specialized";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {source}")]
    Record {
        path: PathBuf,
        line: usize,
        #[source]
        source: Box<TraceError>,
    },
    #[error("malformed record: {0}")]
    Malformed(#[source] serde_json::Error),
    #[error("frame gap: expected frame {expected}, found frame {found}")]
    FrameGap { expected: FrameId, found: FrameId },
    #[error("frame count mismatch: manifest says {expected}, found {found} frames")]
    FrameCount { expected: u32, found: u32 },
    #[error("frame {frame}: unknown model {model}")]
    UnknownModel { frame: FrameId, model: String },
    #[error("frame {frame}: missing detections for model {model}")]
    MissingDetections { frame: FrameId, model: String },
    #[error("frame {frame}: feature length {found}, expected feature_dim {expected}")]
    FeatureDim {
        frame: FrameId,
        expected: usize,
        found: usize,
    },
    #[error("frame {frame}: model {model} detection {index}: {reason}")]
    InvalidDetection {
        frame: FrameId,
        model: String,
        index: usize,
        reason: String,
    },
    #[error("frame {frame}: {reason}")]
    InvalidFrame { frame: FrameId, reason: String },
    #[error("invalid model set: {0}")]
    InvalidModels(String),
    #[error("cost not increasing in depth: {shallower} costs {shallower_cost}, {deeper} costs {deeper_cost}")]
    CostNotIncreasing {
        shallower: String,
        shallower_cost: f64,
        deeper: String,
        deeper_cost: f64,
    },
    #[error("unknown model {0}")]
    UnknownModelId(String),
    #[error("frame {frame} out of range (trace has {frame_count} frames)")]
    FrameOutOfRange { frame: FrameId, frame_count: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// One detected object. Serialized as `[class, confidence, x, y, w, h]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "DetectionRow", into = "DetectionRow")]
pub struct Detection {
    pub class_label: String,
    pub confidence: f64,
    pub bbox: BBox,
}

#[derive(Serialize, Deserialize)]
struct DetectionRow(String, f64, f64, f64, f64, f64);

impl From<DetectionRow> for Detection {
    fn from(r: DetectionRow) -> Self {
        Detection {
            class_label: r.0,
            confidence: r.1,
            bbox: BBox {
                x: r.2,
                y: r.3,
                w: r.4,
                h: r.5,
            },
        }
    }
}

impl From<Detection> for DetectionRow {
    fn from(d: Detection) -> Self {
        DetectionRow(
            d.class_label,
            d.confidence,
            d.bbox.x,
            d.bbox.y,
            d.bbox.w,
            d.bbox.h,
        )
    }
}

impl Detection {
    pub fn new(class_label: impl Into<String>, confidence: f64, bbox: BBox) -> Self {
        Detection {
            class_label: class_label.into(),
            confidence,
            bbox,
        }
    }

    fn check(&self) -> Result<(), String> {
        let b = &self.bbox;
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(format!("degenerate box size {}x{}", b.w, b.h));
        }
        if !(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 1.0 && b.y + b.h <= 1.0) {
            return Err(format!(
                "box ({}, {}, {}, {}) leaves the unit frame",
                b.x, b.y, b.w, b.h
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    ExitPoint,
    Filter,
    Specialized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: String,
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_rank: Option<u32>,
    pub cost_per_frame: f64,
}

impl ModelProfile {
    pub fn exit_point(depth_rank: u32, cost_per_frame: f64) -> Self {
        ModelProfile {
            model_id: format!("EP-{depth_rank}"),
            kind: ModelKind::ExitPoint,
            depth_rank: Some(depth_rank),
            cost_per_frame,
        }
    }

    pub fn auxiliary(model_id: impl Into<String>, kind: ModelKind, cost_per_frame: f64) -> Self {
        ModelProfile {
            model_id: model_id.into(),
            kind,
            depth_rank: None,
            cost_per_frame,
        }
    }
}

/// Exit points with costs equal to the reciprocal of their speedup over the oracle.
pub fn default_exit_points() -> Vec<ModelProfile> {
    EXIT_POINT_SPEEDUPS
        .iter()
        .enumerate()
        .map(|(i, s)| ModelProfile::exit_point(i as u32 + 1, 1.0 / s))
        .collect()
}

/// Default exit points plus the filter and specialized models.
pub fn default_models() -> Vec<ModelProfile> {
    let mut models = default_exit_points();
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: FrameId,
    pub detections: BTreeMap<String, Vec<Detection>>,
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specialized_answer: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub frame_count: u32,
    pub feature_dim: usize,
    pub models: Vec<ModelProfile>,
    pub frames_file: String,
}

/// Validated, immutable trace. Frames are dense over `[0, frame_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStore {
    name: String,
    models: Vec<ModelProfile>,
    frames: Vec<FrameRecord>,
    feature_dim: usize,
    /// Indices into `models` of the exit points, shallowest first.
    exit_points: Vec<usize>,
}

impl TraceStore {
    pub fn new(
        name: impl Into<String>,
        models: Vec<ModelProfile>,
        frames: Vec<FrameRecord>,
        feature_dim: usize,
    ) -> Result<Self, TraceError> {
        let exit_points = validate_models(&models)?;
        if feature_dim == 0 {
            return Err(TraceError::InvalidModels(
                "feature_dim must be at least 1".into(),
            ));
        }
        if frames.is_empty() {
            return Err(TraceError::FrameCount {
                expected: 1,
                found: 0,
            });
        }
        let known: BTreeSet<&str> = models.iter().map(|m| m.model_id.as_str()).collect();
        let ep_ids: Vec<&str> = exit_points
            .iter()
            .map(|&i| models[i].model_id.as_str())
            .collect();
        for (i, rec) in frames.iter().enumerate() {
            if rec.frame_id as usize != i {
                return Err(TraceError::FrameGap {
                    expected: i as FrameId,
                    found: rec.frame_id,
                });
            }
            validate_frame(rec, &known, &ep_ids, feature_dim)?;
        }
        Ok(TraceStore {
            name: name.into(),
            models,
            frames,
            feature_dim,
            exit_points,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn frame_count(&self) -> u32 {
        self.frames.len() as u32
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn models(&self) -> &[ModelProfile] {
        &self.models
    }

    pub fn frames(&self) -> &[FrameRecord] {
        &self.frames
    }

    pub fn frame(&self, frame: FrameId) -> Result<&FrameRecord, TraceError> {
        self.frames
            .get(frame as usize)
            .ok_or(TraceError::FrameOutOfRange {
                frame,
                frame_count: self.frame_count(),
            })
    }

    /// Number of exit points, K. The deepest one is the oracle.
    pub fn depth_count(&self) -> u32 {
        self.exit_points.len() as u32
    }

    pub fn exit_points(&self) -> impl Iterator<Item = &ModelProfile> + '_ {
        self.exit_points.iter().map(move |&i| &self.models[i])
    }

    /// Exit point by depth rank (1-based). Panics when out of range.
    pub fn ep(&self, depth: u32) -> &ModelProfile {
        &self.models[self.exit_points[depth as usize - 1]]
    }

    /// Index into `models()` of the exit point with this depth rank.
    pub fn ep_index(&self, depth: u32) -> usize {
        self.exit_points[depth as usize - 1]
    }

    pub fn ep_cost(&self, depth: u32) -> f64 {
        self.ep(depth).cost_per_frame
    }

    pub fn oracle(&self) -> &ModelProfile {
        self.ep(self.depth_count())
    }

    pub fn model_index(&self, model_id: &str) -> Option<usize> {
        self.models.iter().position(|m| m.model_id == model_id)
    }

    pub fn model_of_kind(&self, kind: ModelKind) -> Option<&ModelProfile> {
        self.models.iter().find(|m| m.kind == kind)
    }

    /// Recorded detections of `model` on `frame`. Pure lookup; nothing is charged.
    pub fn detections(&self, model: &str, frame: FrameId) -> Result<&[Detection], TraceError> {
        let idx = self
            .model_index(model)
            .ok_or_else(|| TraceError::UnknownModelId(model.to_string()))?;
        self.detections_at(idx, frame)
    }

    /// Lookup by model index. Auxiliary models have no detection lists.
    pub fn detections_at(&self, model: usize, frame: FrameId) -> Result<&[Detection], TraceError> {
        let profile = self
            .models
            .get(model)
            .ok_or_else(|| TraceError::UnknownModelId(format!("#{model}")))?;
        let rec = self.frame(frame)?;
        rec.detections
            .get(&profile.model_id)
            .map(Vec::as_slice)
            .ok_or_else(|| TraceError::MissingDetections {
                frame,
                model: profile.model_id.clone(),
            })
    }

    /// Detections of the exit point at `depth` on a frame known to exist.
    pub(crate) fn ep_detections(&self, depth: u32, frame: FrameId) -> &[Detection] {
        let id = &self.ep(depth).model_id;
        self.frames[frame as usize]
            .detections
            .get(id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

fn validate_models(models: &[ModelProfile]) -> Result<Vec<usize>, TraceError> {
    let mut seen = BTreeSet::new();
    let mut eps: Vec<(u32, usize)> = Vec::new();
    for (i, m) in models.iter().enumerate() {
        if !seen.insert(m.model_id.as_str()) {
            return Err(TraceError::InvalidModels(format!(
                "duplicate model_id {}",
                m.model_id
            )));
        }
        if !(m.cost_per_frame.is_finite() && m.cost_per_frame >= 0.0) {
            return Err(TraceError::InvalidModels(format!(
                "{} has invalid cost {}",
                m.model_id, m.cost_per_frame
            )));
        }
        match (m.kind, m.depth_rank) {
            (ModelKind::ExitPoint, Some(d)) if d >= 1 => eps.push((d, i)),
            (ModelKind::ExitPoint, _) => {
                return Err(TraceError::InvalidModels(format!(
                    "exit point {} needs a depth_rank >= 1",
                    m.model_id
                )))
            }
            (_, Some(_)) => {
                return Err(TraceError::InvalidModels(format!(
                    "{} is not an exit point but has a depth_rank",
                    m.model_id
                )))
            }
            _ => {}
        }
    }
    if eps.len() < 2 {
        return Err(TraceError::InvalidModels(format!(
            "need at least 2 exit points, found {}",
            eps.len()
        )));
    }
    eps.sort_unstable();
    for (expected, &(d, _)) in (1..).zip(&eps) {
        if d != expected {
            return Err(TraceError::InvalidModels(format!(
                "exit point depth ranks must be 1..{} without gaps or duplicates",
                eps.len()
            )));
        }
    }
    for w in eps.windows(2) {
        let (a, b) = (&models[w[0].1], &models[w[1].1]);
        if b.cost_per_frame <= a.cost_per_frame {
            return Err(TraceError::CostNotIncreasing {
                shallower: a.model_id.clone(),
                shallower_cost: a.cost_per_frame,
                deeper: b.model_id.clone(),
                deeper_cost: b.cost_per_frame,
            });
        }
    }
    Ok(eps.into_iter().map(|(_, i)| i).collect())
}

fn validate_frame(
    rec: &FrameRecord,
    known: &BTreeSet<&str>,
    ep_ids: &[&str],
    feature_dim: usize,
) -> Result<(), TraceError> {
    let frame = rec.frame_id;
    for model in rec.detections.keys() {
        if !known.contains(model.as_str()) {
            return Err(TraceError::UnknownModel {
                frame,
                model: model.clone(),
            });
        }
    }
    for &ep in ep_ids {
        let Some(dets) = rec.detections.get(ep) else {
            return Err(TraceError::MissingDetections {
                frame,
                model: ep.to_string(),
            });
        };
        for (index, d) in dets.iter().enumerate() {
            d.check().map_err(|reason| TraceError::InvalidDetection {
                frame,
                model: ep.to_string(),
                index,
                reason,
            })?;
        }
    }
    if rec.feature.len() != feature_dim {
        return Err(TraceError::FeatureDim {
            frame,
            expected: feature_dim,
            found: rec.feature.len(),
        });
    }
    if rec.feature.iter().any(|v| !v.is_finite()) {
        return Err(TraceError::InvalidFrame {
            frame,
            reason: "non-finite feature value".into(),
        });
    }
    if let Some(s) = rec.filter_score {
        if !(0.0..=1.0).contains(&s) {
            return Err(TraceError::InvalidFrame {
                frame,
                reason: format!("filter_score {s} outside [0, 1]"),
            });
        }
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads and validates a trace from its manifest. The frames file path is
/// resolved relative to the manifest's directory.
pub fn load_trace(path: impl AsRef<Path>) -> Result<TraceStore, TraceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let manifest: Manifest =
        serde_json::from_reader(BufReader::new(file)).map_err(|source| TraceError::Manifest {
            path: path.to_path_buf(),
            source,
        })?;
    let exit_points = validate_models(&manifest.models)?;
    let known: BTreeSet<&str> = manifest
        .models
        .iter()
        .map(|m| m.model_id.as_str())
        .collect();
    let ep_ids: Vec<&str> = exit_points
        .iter()
        .map(|&i| manifest.models[i].model_id.as_str())
        .collect();

    let frames_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.frames_file);
    let reader = BufReader::new(File::open(&frames_path).map_err(io_err(&frames_path))?);
    let mut frames = Vec::with_capacity(manifest.frame_count as usize);
    let at_line = |line: usize, e: TraceError| TraceError::Record {
        path: frames_path.clone(),
        line,
        source: Box::new(e),
    };
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(io_err(&frames_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord =
            serde_json::from_str(&line).map_err(|e| at_line(lineno, TraceError::Malformed(e)))?;
        let expected = frames.len() as FrameId;
        if rec.frame_id != expected {
            return Err(at_line(
                lineno,
                TraceError::FrameGap {
                    expected,
                    found: rec.frame_id,
                },
            ));
        }
        validate_frame(&rec, &known, &ep_ids, manifest.feature_dim)
            .map_err(|e| at_line(lineno, e))?;
        frames.push(rec);
    }
    if frames.len() as u32 != manifest.frame_count {
        return Err(TraceError::FrameCount {
            expected: manifest.frame_count,
            found: frames.len() as u32,
        });
    }
    TraceStore::new(manifest.name, manifest.models, frames, manifest.feature_dim)
}

/// Frames file name written next to a manifest: `<stem>.frames.jsonl`.
pub fn frames_file_name(manifest_path: &Path) -> String {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("trace");
    format!("{stem}.frames.jsonl")
}

/// Writes the manifest and its frames file. Both files are replaced atomically.
pub fn write_trace(store: &TraceStore, manifest_path: impl AsRef<Path>) -> Result<(), TraceError> {
    let manifest_path = manifest_path.as_ref();
    let dir = match manifest_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let frames_file = frames_file_name(manifest_path);
    let frames_path = dir.join(&frames_file);

    crate::atomic_write(&frames_path, |w| {
        for rec in &store.frames {
            serde_json::to_writer(&mut *w, rec).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
    .map_err(io_err(&frames_path))?;

    let manifest = Manifest {
        name: store.name.clone(),
        frame_count: store.frame_count(),
        feature_dim: store.feature_dim,
        models: store.models.clone(),
        frames_file,
    };
    crate::atomic_write(manifest_path, |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest).map_err(std::io::Error::other)?;
        w.write_all(b"\n")
    })
    .map_err(io_err(manifest_path))
}
