//! Ground plane, footprint-corner correspondences, point-to-line
//! registration, group merging and final selection by the ground-plane
//! localization error δ_p.

mod register;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    backproject_to_plane, project, ExtrinsicCalibration, GroundPlane, Intrinsics, PixelPoint, WorldPoint,
};
use crate::grouping::HypothesisGroup;
use crate::hypothesis::LocalizationSample;
use crate::stats::{max, mean};
use crate::tracking::BoundingBox;

pub use register::{register, RegistrationOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefinementError {
    #[error("localization track is degenerate (collinear or too few points) for a plane fit")]
    DegeneratePlane,
    #[error("no pair could be backprojected onto the ground plane")]
    NoRefinablePairs,
    #[error("need at least {needed} pairs, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("no pair could be evaluated")]
    NoEvaluablePairs,
    #[error("insufficient count of calibration vehicle traversals")]
    InsufficientTraversals,
    #[error("invalid vehicle dimensions: {0}")]
    InvalidDims(String),
}

/// Size of the calibration vehicle. The localization reference is its
/// geometric center at ground level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleDims {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for VehicleDims {
    fn default() -> Self {
        Self {
            length: 4.6,
            width: 1.9,
            height: 1.5,
        }
    }
}

impl VehicleDims {
    pub fn validate(&self) -> Result<(), RefinementError> {
        if [self.length, self.width, self.height]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err(RefinementError::InvalidDims(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationSettings {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub step_tol: f64,
    /// Keep pixel anchors fixed during optimization instead of re-clamping
    /// them to the bottom edge at every evaluation.
    pub freeze_anchors: bool,
    /// Rounds of corner re-selection followed by registration.
    pub correspondence_rounds: usize,
}

impl Default for RegistrationSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tol: 1e-8,
            step_tol: 1e-10,
            freeze_anchors: false,
            correspondence_rounds: 3,
        }
    }
}

/// A footprint corner and the bottom-edge pixel it is matched with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinedPair {
    pub timestamp: f64,
    pub world_corner: WorldPoint,
    pub pixel_anchor: PixelPoint,
    pub bottom_edge: (PixelPoint, PixelPoint),
    /// Footprint corner index in FL, FR, RR, RL order.
    pub corner: usize,
}

/// Per-pair and aggregate δ_p statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean relative error, percent.
    pub e_mean: f64,
    /// Maximum relative error, percent.
    pub e_max: f64,
    pub delta_p_mean: f64,
    pub delta_p_max: f64,
    pub evaluated: usize,
    pub excluded: usize,
    /// `(corner-to-camera distance, δ_p)` per evaluated pair.
    pub per_pair: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Selection {
    Merged,
    SingleTrack(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub calib: ExtrinsicCalibration,
    pub delta_p_mean: f64,
    pub delta_p_max: f64,
    pub e_mean: f64,
    pub e_max: f64,
    pub pair_count: usize,
    pub excluded_pairs: usize,
    pub group_index: usize,
    pub member_track_ids: Vec<u64>,
    pub selection: Selection,
    pub plane: GroundPlane,
    /// Merged pairs of the winning group with anchors under `calib`.
    pub pairs: Vec<RefinedPair>,
    pub evaluation: Evaluation,
    /// `(candidate, mean δ_p on the merged pairs)` for every evaluated
    /// candidate of every group.
    pub candidates: Vec<(usize, Selection, f64)>,
}

/// PCA plane through the anchored positions; the normal is the direction of
/// least variance, pointing up.
pub fn fit_ground_plane(samples: &[LocalizationSample], anchor: &Vector3<f64>) -> Result<GroundPlane, RefinementError> {
    let pts: Vec<Vector3<f64>> = samples.iter().map(|s| s.position - anchor).collect();
    fit_plane_points(&pts)
}

pub(crate) fn fit_plane_points(pts: &[Vector3<f64>]) -> Result<GroundPlane, RefinementError> {
    if pts.len() < 3 {
        return Err(RefinementError::DegeneratePlane);
    }
    let n = pts.len() as f64;
    let centroid = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cov = pts.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - centroid;
        a + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let s1 = eig.eigenvalues[idx[0]].max(0.0).sqrt();
    let s2 = eig.eigenvalues[idx[1]].max(0.0).sqrt();
    if !(s1 > 0.0) || s2 < 1e-6 * s1 {
        return Err(RefinementError::DegeneratePlane);
    }
    let normal = eig.eigenvectors.column(idx[2]).into_owned();
    GroundPlane::new(WorldPoint::from(centroid), normal).map_err(|_| RefinementError::DegeneratePlane)
}

/// Ground corners of the vehicle rectangle in FL, FR, RR, RL order.
pub fn vehicle_footprint(pose: &LocalizationSample, dims: &VehicleDims, anchor: &Vector3<f64>) -> [WorldPoint; 4] {
    let c = pose.position - anchor;
    let (s, co) = pose.yaw.sin_cos();
    let fwd = Vector3::new(co, s, 0.0) * (0.5 * dims.length);
    let left = Vector3::new(-s, co, 0.0) * (0.5 * dims.width);
    [
        WorldPoint::from(c + fwd + left),
        WorldPoint::from(c + fwd - left),
        WorldPoint::from(c - fwd - left),
        WorldPoint::from(c - fwd + left),
    ]
}

/// Closest point of the horizontal bottom edge to `px`.
pub(crate) fn clamp_to_edge(px: &PixelPoint, edge: &(PixelPoint, PixelPoint)) -> PixelPoint {
    PixelPoint::new(px.x.clamp(edge.0.x, edge.1.x), edge.0.y)
}

fn segment_distance(p: &WorldPoint, a: &WorldPoint, b: &WorldPoint) -> f64 {
    let d = b - a;
    let len2 = d.norm_squared();
    let s = if len2 > 0.0 {
        ((p - a).dot(&d) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + d * s)).norm()
}

/// Matches every (pose, box) pair with the footprint corner nearest to the
/// box's bottom edge backprojected onto `plane`. Pairs whose edge cannot be
/// backprojected are skipped.
pub fn refine_correspondences(
    pairs: &[(LocalizationSample, BoundingBox)],
    calib: &ExtrinsicCalibration,
    dims: &VehicleDims,
    plane: &GroundPlane,
    intr: &Intrinsics,
) -> Result<Vec<RefinedPair>, RefinementError> {
    let center = calib.center();
    let out: Vec<RefinedPair> = pairs
        .iter()
        .filter_map(|(sample, bbox)| {
            let edge = bbox.bottom_edge();
            let gl = backproject_to_plane(intr, calib, &edge.0, plane).ok()?;
            let gr = backproject_to_plane(intr, calib, &edge.1, plane).ok()?;
            let corners = vehicle_footprint(sample, dims, calib.anchor());
            let dist: Vec<f64> = corners.iter().map(|c| segment_distance(c, &gl, &gr)).collect();
            let best = (0..4).min_by(|&a, &b| {
                if (dist[a] - dist[b]).abs() <= 1e-9 {
                    (corners[a] - center).norm().total_cmp(&(corners[b] - center).norm())
                } else {
                    dist[a].total_cmp(&dist[b])
                }
            })?;
            let px = project(intr, calib, &corners[best]).ok()?;
            Some(RefinedPair {
                timestamp: sample.timestamp,
                world_corner: corners[best],
                pixel_anchor: clamp_to_edge(&px, &edge),
                bottom_edge: edge,
                corner: best,
            })
        })
        .collect();
    if out.is_empty() {
        return Err(RefinementError::NoRefinablePairs);
    }
    Ok(out)
}

/// Re-derives every pixel anchor as the clamped projection of its corner
/// under `calib`; corners stay fixed. Pairs whose corner is behind the
/// camera keep their anchor.
pub fn reanchor(pairs: &[RefinedPair], calib: &ExtrinsicCalibration, intr: &Intrinsics) -> Vec<RefinedPair> {
    pairs
        .iter()
        .map(|p| {
            let mut q = *p;
            if let Ok(px) = project(intr, calib, &p.world_corner) {
                q.pixel_anchor = clamp_to_edge(&px, &p.bottom_edge);
            }
            q
        })
        .collect()
}

/// In-plane distance between the backprojected pixel anchor and the corner.
pub fn delta_p(
    calib: &ExtrinsicCalibration,
    pair: &RefinedPair,
    plane: &GroundPlane,
    intr: &Intrinsics,
) -> Result<f64, crate::geometry::GeometryError> {
    let g = backproject_to_plane(intr, calib, &pair.pixel_anchor, plane)?;
    Ok((g - plane.project_point(&pair.world_corner)).norm())
}

/// δ_p and relative-error statistics over the evaluable pairs.
pub fn evaluate(
    calib: &ExtrinsicCalibration,
    pairs: &[RefinedPair],
    plane: &GroundPlane,
    intr: &Intrinsics,
) -> Result<Evaluation, RefinementError> {
    let center = calib.center();
    let per_pair: Vec<(f64, f64)> = pairs
        .iter()
        .filter_map(|p| {
            delta_p(calib, p, plane, intr)
                .ok()
                .map(|d| ((p.world_corner - center).norm(), d))
        })
        .collect();
    if per_pair.is_empty() {
        return Err(RefinementError::NoEvaluablePairs);
    }
    let deltas: Vec<f64> = per_pair.iter().map(|p| p.1).collect();
    let rel: Vec<f64> = per_pair.iter().map(|(r, d)| 100.0 * d / r).collect();
    Ok(Evaluation {
        e_mean: mean(&rel),
        e_max: max(&rel),
        delta_p_mean: mean(&deltas),
        delta_p_max: max(&deltas),
        evaluated: per_pair.len(),
        excluded: pairs.len() - per_pair.len(),
        per_pair,
    })
}

/// Result of refining one set of (pose, box) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedCalibration {
    pub calib: ExtrinsicCalibration,
    pub pairs: Vec<RefinedPair>,
    pub non_improvement: bool,
}

/// Alternates corner selection and registration, starting at `init`.
pub fn refine_track(
    raw: &[(LocalizationSample, BoundingBox)],
    init: &ExtrinsicCalibration,
    dims: &VehicleDims,
    plane: &GroundPlane,
    intr: &Intrinsics,
    settings: &RegistrationSettings,
) -> Result<RefinedCalibration, RefinementError> {
    let mut calib = *init;
    let mut pairs = refine_correspondences(raw, &calib, dims, plane, intr)?;
    let mut non_improvement = false;
    for round in 0..settings.correspondence_rounds.max(1) {
        if round > 0 {
            pairs = refine_correspondences(raw, &calib, dims, plane, intr)?;
        }
        let out = register(&pairs, &calib, intr, plane, settings)?;
        non_improvement |= out.non_improvement;
        let unchanged = out.calib == calib;
        calib = out.calib;
        if unchanged {
            break;
        }
    }
    let pairs = reanchor(&refine_correspondences(raw, &calib, dims, plane, intr)?, &calib, intr);
    Ok(RefinedCalibration {
        calib,
        pairs,
        non_improvement,
    })
}

/// Refines every group member and the merged ensemble, keeps the better of
/// merged and single-track calibrations per group (scored on the merged
/// pairs), and returns the group candidate with the lowest mean δ_p.
pub fn merge_and_select(
    groups: &[HypothesisGroup],
    dims: &VehicleDims,
    intr: &Intrinsics,
    anchor: &Vector3<f64>,
    settings: &RegistrationSettings,
) -> Result<CalibrationResult, RefinementError> {
    if groups.is_empty() {
        return Err(RefinementError::InsufficientTraversals);
    }
    let mut best: Option<CalibrationResult> = None;
    let mut all_candidates = Vec::new();
    for (gi, group) in groups.iter().enumerate() {
        let Ok(result) = select_in_group(gi, group, dims, intr, anchor, settings) else {
            continue;
        };
        all_candidates.extend(result.candidates.iter().cloned());
        if best.as_ref().is_none_or(|b| result.delta_p_mean < b.delta_p_mean) {
            best = Some(result);
        }
    }
    let mut best = best.ok_or(RefinementError::InsufficientTraversals)?;
    best.candidates = all_candidates;
    Ok(best)
}

fn select_in_group(
    gi: usize,
    group: &HypothesisGroup,
    dims: &VehicleDims,
    intr: &Intrinsics,
    anchor: &Vector3<f64>,
    settings: &RegistrationSettings,
) -> Result<CalibrationResult, RefinementError> {
    let raw: Vec<(LocalizationSample, BoundingBox)> =
        group.members.iter().flat_map(|h| h.pairs.iter().copied()).collect();
    let samples: Vec<LocalizationSample> = raw.iter().map(|(s, _)| *s).collect();
    let plane = fit_ground_plane(&samples, anchor)?;

    let mut members: Vec<(u64, f64, RefinedCalibration)> = Vec::new();
    for h in &group.members {
        let init = h.calib.reanchored(*anchor);
        if let Ok(r) = refine_track(&h.pairs, &init, dims, &plane, intr, settings) {
            members.push((h.track_id, h.median_reproj_px, r));
        }
    }
    let seed = members
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|m| m.2.calib)
        .ok_or(RefinementError::NoRefinablePairs)?;
    let merged = refine_track(&raw, &seed, dims, &plane, intr, settings)?;

    let mut candidates: Vec<(Selection, ExtrinsicCalibration)> = vec![(Selection::Merged, merged.calib)];
    candidates.extend(members.iter().map(|(id, _, r)| (Selection::SingleTrack(*id), r.calib)));
    let mut scored = Vec::new();
    for (sel, calib) in candidates {
        let pairs = reanchor(&merged.pairs, &calib, intr);
        if let Ok(ev) = evaluate(&calib, &pairs, &plane, intr) {
            scored.push((sel, calib, pairs, ev));
        }
    }
    // Merged is first; a single track replaces it only if strictly better.
    let win = scored
        .iter()
        .enumerate()
        .fold(None::<usize>, |acc, (i, s)| match acc {
            Some(j) if scored[j].3.delta_p_mean <= s.3.delta_p_mean => Some(j),
            _ => Some(i),
        })
        .ok_or(RefinementError::NoEvaluablePairs)?;
    let candidates = scored
        .iter()
        .map(|(sel, _, _, ev)| (gi, sel.clone(), ev.delta_p_mean))
        .collect();
    let (selection, calib, pairs, ev) = scored.swap_remove(win);
    Ok(CalibrationResult {
        calib,
        delta_p_mean: ev.delta_p_mean,
        delta_p_max: ev.delta_p_max,
        e_mean: ev.e_mean,
        e_max: ev.e_max,
        pair_count: ev.evaluated,
        excluded_pairs: ev.excluded,
        group_index: gi,
        member_track_ids: group.members.iter().map(|h| h.track_id).collect(),
        selection,
        plane,
        pairs,
        evaluation: ev,
        candidates,
    })
}
