//! End-to-end orchestration: tracking, hypothesis creation, grouping and
//! refinement, with per-stage bookkeeping for the run report.

pub mod config;
pub mod io;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{apply_anchor, project, ExtrinsicCalibration, Intrinsics};
use crate::grouping::{cluster_groups, similarity_graph, HypothesisGroup};
use crate::hypothesis::{build_hypothesis, synchronize, Hypothesis, LocalizationSample, RejectionReason};
use crate::refinement::{
    evaluate, fit_ground_plane, merge_and_select, reanchor, refine_correspondences, CalibrationResult, Evaluation,
    RefinementError, Selection,
};
use crate::tracking::{run_tracker, BoundingBox, ObjectTrack};

pub use config::{LeverArm, PipelineConfig};
pub use io::{CalibrationDocument, Detections};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("tracking: {0}")]
    Tracking(String),
    #[error("insufficient count of calibration vehicle traversals ({0})")]
    InsufficientTraversals(StageCounts),
    #[error("no hypothesis reached RANSAC consensus ({0})")]
    NoConsensus(StageCounts),
    #[error("refinement: {0}")]
    Refinement(RefinementError),
}

impl PipelineError {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::InsufficientTraversals(_) => 2,
            Self::Input(_) | Self::Config(_) => 3,
            Self::NoConsensus(_) => 4,
            _ => 1,
        }
    }
}

/// Intermediate counts of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageCounts {
    pub frames: usize,
    pub detections: usize,
    pub localization_samples: usize,
    pub tracks: usize,
    pub hypotheses_accepted: usize,
    pub hypotheses_rejected: BTreeMap<String, usize>,
    pub graph_edges: usize,
    pub groups: usize,
}

impl StageCounts {
    pub fn rejected_total(&self) -> usize {
        self.hypotheses_rejected.values().sum()
    }
}

impl std::fmt::Display for StageCounts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} tracks, {} hypotheses accepted, {} rejected",
            self.tracks,
            self.hypotheses_accepted,
            self.rejected_total()
        )?;
        for (reason, n) in &self.hypotheses_rejected {
            write!(f, ", {reason}: {n}")?;
        }
        write!(f, ", {} graph edges, {} groups", self.graph_edges, self.groups)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSummary {
    pub track_id: u64,
    pub detections: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rejection: Option<RejectionReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_reproj_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub camera_center_utm: Option<[f64; 3]>,
}

/// Mean δ_p over one 0.5 m distance interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub center_m: f64,
    pub mean_delta_p_m: f64,
    pub count: usize,
}

pub const BIN_WIDTH_M: f64 = 0.5;

/// Groups `(distance, δ_p)` samples into 0.5 m distance intervals.
pub fn distance_bins(per_pair: &[(f64, f64)]) -> Vec<DistanceBin> {
    let mut acc: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for &(d, dp) in per_pair {
        let e = acc.entry((d / BIN_WIDTH_M).floor() as i64).or_default();
        e.0 += dp;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (sum, n))| DistanceBin {
            center_m: (k as f64 + 0.5) * BIN_WIDTH_M,
            mean_delta_p_m: sum / n as f64,
            count: n,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub anchor_utm: [f64; 3],
    pub camera_center_utm: [f64; 3],
    pub selection: Selection,
    pub group_index: usize,
    pub member_track_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub delta_p_mean_m: f64,
    pub delta_p_max_m: f64,
    pub e_mean_percent: f64,
    pub e_max_percent: f64,
    pub pair_count: usize,
    pub excluded_pairs: usize,
}

impl From<&Evaluation> for Metrics {
    fn from(ev: &Evaluation) -> Self {
        Self {
            delta_p_mean_m: ev.delta_p_mean,
            delta_p_max_m: ev.delta_p_max,
            e_mean_percent: ev.e_mean,
            e_max_percent: ev.e_max,
            pair_count: ev.evaluated,
            excluded_pairs: ev.excluded,
        }
    }
}

/// Everything needed to reproduce and audit a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub config_sha256: String,
    pub config: PipelineConfig,
    pub counts: StageCounts,
    pub hypotheses: Vec<HypothesisSummary>,
    pub calibration: CalibrationSummary,
    pub metrics: Metrics,
    /// Mean δ_p on the merged pairs of every candidate, by group.
    pub candidates: Vec<(usize, Selection, f64)>,
    pub distance_bins: Vec<DistanceBin>,
}

/// Full result of [`run_calibration`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: RunReport,
    pub result: CalibrationResult,
    pub tracks: Vec<ObjectTrack>,
    pub hypotheses: Vec<Hypothesis>,
    pub groups: Vec<HypothesisGroup>,
    pub anchor: Vector3<f64>,
}

fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn reason_key(r: RejectionReason) -> String {
    format!("{r:?}")
}

/// Runs tracking, hypothesis creation, grouping and refinement.
pub fn run_calibration(
    config: &PipelineConfig,
    detections: &Detections,
    localization: &[LocalizationSample],
    intr: &Intrinsics,
) -> Result<RunOutput, PipelineError> {
    config.validate()?;
    intr.validate().map_err(|e| PipelineError::Input(e.to_string()))?;
    if localization.is_empty() {
        return Err(PipelineError::Input("the localization log is empty".into()));
    }
    let mut counts = StageCounts {
        frames: detections.frames.len(),
        detections: detections.box_count(),
        localization_samples: localization.len(),
        ..Default::default()
    };

    let tracks = if config.pretracked {
        detections
            .tracks_from_ids()
            .ok_or_else(|| PipelineError::Input("pre-tracked mode needs a detector id on every line".into()))?
            .into_iter()
            .filter(|t| t.detections.len() >= config.tracker.min_track_detections)
            .collect()
    } else {
        run_tracker(&detections.frames, &config.tracker).map_err(|e| PipelineError::Tracking(e.to_string()))?
    };
    counts.tracks = tracks.len();

    let positions: Vec<Vector3<f64>> = localization.iter().map(|s| s.position).collect();
    let (_, anchor) = apply_anchor(&positions, config.anchor).map_err(|e| PipelineError::Input(e.to_string()))?;

    let mut hypotheses = Vec::new();
    let mut summaries = Vec::new();
    let mut rejections: Vec<RejectionReason> = Vec::new();
    for track in &tracks {
        let outcome = build_hypothesis(track, localization, intr, &anchor, &config.ransac, &config.prefilter);
        summaries.push(match &outcome {
            Ok(h) => HypothesisSummary {
                track_id: track.id,
                detections: track.detections.len(),
                rejection: None,
                median_reproj_px: Some(h.median_reproj_px),
                camera_center_utm: Some(arr3(&h.calib.center_utm())),
            },
            Err(r) => HypothesisSummary {
                track_id: track.id,
                detections: track.detections.len(),
                rejection: Some(*r),
                median_reproj_px: None,
                camera_center_utm: None,
            },
        });
        match outcome {
            Ok(h) => hypotheses.push(h),
            Err(r) => {
                *counts.hypotheses_rejected.entry(reason_key(r)).or_default() += 1;
                rejections.push(r);
            }
        }
    }
    counts.hypotheses_accepted = hypotheses.len();
    if hypotheses.is_empty() && !rejections.is_empty() && rejections.iter().all(|r| *r == RejectionReason::NoConsensus)
    {
        return Err(PipelineError::NoConsensus(counts));
    }

    let graph = similarity_graph(&hypotheses, intr, &config.grouping);
    counts.graph_edges = graph.edges().len();
    let groups = cluster_groups(&graph, &hypotheses, &config.grouping);
    counts.groups = groups.len();
    if groups.is_empty() {
        return Err(PipelineError::InsufficientTraversals(counts));
    }

    let result =
        merge_and_select(&groups, &config.vehicle, intr, &anchor, &config.registration).map_err(|e| match e {
            RefinementError::InsufficientTraversals => PipelineError::InsufficientTraversals(counts.clone()),
            other => PipelineError::Refinement(other),
        })?;

    let report = RunReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: config.hash(),
        config: config.clone(),
        counts,
        hypotheses: summaries,
        calibration: CalibrationSummary {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| result.calib.rotation()[(i, j)])),
            translation: arr3(result.calib.translation()),
            anchor_utm: arr3(result.calib.anchor()),
            camera_center_utm: arr3(&result.calib.center_utm()),
            selection: result.selection.clone(),
            group_index: result.group_index,
            member_track_ids: result.member_track_ids.clone(),
        },
        metrics: Metrics::from(&result.evaluation),
        candidates: result.candidates.clone(),
        distance_bins: distance_bins(&result.evaluation.per_pair),
    };
    Ok(RunOutput {
        report,
        result,
        tracks,
        hypotheses,
        groups,
        anchor,
    })
}

/// Outcome of scoring an existing calibration against recorded data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub target_track_ids: Vec<u64>,
    pub metrics: Metrics,
    pub distance_bins: Vec<DistanceBin>,
}

/// Scores `calib` on the tracks that belong to the localized vehicle: a
/// track qualifies when at least `grouping.min_r_ov` of its synchronized
/// positions project within `grouping.k_px` of the simultaneous box.
pub fn evaluate_calibration(
    config: &PipelineConfig,
    calib: &ExtrinsicCalibration,
    detections: &Detections,
    localization: &[LocalizationSample],
    intr: &Intrinsics,
) -> Result<EvaluationReport, PipelineError> {
    let tracks = if config.pretracked {
        detections
            .tracks_from_ids()
            .ok_or_else(|| PipelineError::Input("pre-tracked mode needs a detector id on every line".into()))?
    } else {
        run_tracker(&detections.frames, &config.tracker).map_err(|e| PipelineError::Tracking(e.to_string()))?
    };
    let anchor = *calib.anchor();
    let mut ids = Vec::new();
    let mut raw: Vec<(LocalizationSample, BoundingBox)> = Vec::new();
    for track in &tracks {
        let Ok(pairs) = synchronize(track, localization, config.prefilter.sync_tolerance) else {
            continue;
        };
        let near = pairs
            .iter()
            .filter(|(s, b)| {
                project(intr, calib, &(s.position - anchor).into())
                    .is_ok_and(|px| b.distance_to(&px) <= config.grouping.k_px)
            })
            .count();
        if near as f64 >= config.grouping.min_r_ov * pairs.len() as f64 {
            ids.push(track.id);
            raw.extend(pairs);
        }
    }
    if raw.is_empty() {
        return Err(PipelineError::InsufficientTraversals(StageCounts {
            frames: detections.frames.len(),
            detections: detections.box_count(),
            localization_samples: localization.len(),
            tracks: tracks.len(),
            ..Default::default()
        }));
    }
    let samples: Vec<LocalizationSample> = raw.iter().map(|(s, _)| *s).collect();
    let plane = fit_ground_plane(&samples, &anchor).map_err(PipelineError::Refinement)?;
    let pairs =
        refine_correspondences(&raw, calib, &config.vehicle, &plane, intr).map_err(PipelineError::Refinement)?;
    let pairs = reanchor(&pairs, calib, intr);
    let ev = evaluate(calib, &pairs, &plane, intr).map_err(PipelineError::Refinement)?;
    Ok(EvaluationReport {
        target_track_ids: ids,
        metrics: Metrics::from(&ev),
        distance_bins: distance_bins(&ev.per_pair),
    })
}
