//! Pairing of image tracks with the vehicle localization log, per-track pose
//! estimation and plausibility prefilters.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, ExtrinsicCalibration, Intrinsics, WorldPoint};
use crate::pnp::{ransac_pnp, Correspondence, RansacParams};
use crate::tracking::{BoundingBox, ObjectTrack};

/// One pose of the calibration vehicle in raw UTM coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSample {
    pub timestamp: f64,
    pub position: Vector3<f64>,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl LocalizationSample {
    /// Linear interpolation; angles take the shorter arc.
    pub fn interpolate(a: &Self, b: &Self, t: f64) -> Self {
        let s = (t - a.timestamp) / (b.timestamp - a.timestamp);
        let ang = |x: f64, y: f64| wrap_angle(x + s * wrap_angle(y - x));
        Self {
            timestamp: t,
            position: a.position + (b.position - a.position) * s,
            roll: ang(a.roll, b.roll),
            pitch: ang(a.pitch, b.pitch),
            yaw: ang(a.yaw, b.yaw),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HypothesisError {
    #[error("track {track_id} does not overlap the localization log in time")]
    NoOverlap { track_id: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectionReason {
    TooFewPairs,
    TrackTooShort2D,
    TrackTooShort3D,
    ReprojectionTooHigh,
    CameraTooFar,
    CameraBelowGround,
    NoConsensus,
}

impl RejectionReason {
    pub const ALL: [RejectionReason; 7] = [
        Self::TooFewPairs,
        Self::TrackTooShort2D,
        Self::TrackTooShort3D,
        Self::ReprojectionTooHigh,
        Self::CameraTooFar,
        Self::CameraBelowGround,
        Self::NoConsensus,
    ];
}

impl std::fmt::Display for RejectionReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::TooFewPairs => "too few pairs",
            Self::TrackTooShort2D => "track too short in the image",
            Self::TrackTooShort3D => "track too short in the world",
            Self::ReprojectionTooHigh => "median reprojection error too high",
            Self::CameraTooFar => "camera too far from the driven path",
            Self::CameraBelowGround => "camera below ground",
            Self::NoConsensus => "no RANSAC consensus",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefilterParams {
    pub min_pairs: usize,
    pub min_extent_2d_px: f64,
    pub min_extent_3d_m: f64,
    pub max_median_reproj_px: f64,
    pub d_thr: f64,
    pub sync_tolerance: f64,
}

impl Default for PrefilterParams {
    fn default() -> Self {
        Self {
            min_pairs: 4,
            min_extent_2d_px: 50.0,
            min_extent_3d_m: 5.0,
            max_median_reproj_px: 20.0,
            d_thr: 30.0,
            sync_tolerance: 0.1,
        }
    }
}

impl PrefilterParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_pairs < 4 {
            return Err("prefilter.min_pairs must be at least 4".into());
        }
        let positive = [
            ("min_extent_2d_px", self.min_extent_2d_px),
            ("min_extent_3d_m", self.min_extent_3d_m),
            ("max_median_reproj_px", self.max_median_reproj_px),
            ("d_thr", self.d_thr),
            ("sync_tolerance", self.sync_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(format!("prefilter.{name} must be positive"));
            }
        }
        Ok(())
    }
}

/// An accepted track/log pairing with its estimated camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub track_id: u64,
    /// Time-ordered synchronized samples (raw UTM) and boxes.
    pub pairs: Vec<(LocalizationSample, BoundingBox)>,
    /// Sample positions in the anchored frame, parallel to `pairs`.
    pub positions: Vec<WorldPoint>,
    pub calib: ExtrinsicCalibration,
    pub median_reproj_px: f64,
    pub inlier_mask: Vec<bool>,
}

impl Hypothesis {
    pub fn boxes(&self) -> impl Iterator<Item = &BoundingBox> {
        self.pairs.iter().map(|(_, b)| b)
    }
}

/// Localization pose at every detection timestamp of `track`.
///
/// Detections outside the log's time span, or farther than `tol` from both
/// bracketing samples, are dropped.
pub fn synchronize(
    track: &ObjectTrack,
    log: &[LocalizationSample],
    tol: f64,
) -> Result<Vec<(LocalizationSample, BoundingBox)>, HypothesisError> {
    let mut out = Vec::with_capacity(track.detections.len());
    for det in &track.detections {
        let t = det.timestamp;
        let idx = log.partition_point(|s| s.timestamp < t);
        if idx < log.len() && log[idx].timestamp == t {
            out.push((log[idx], det.bbox));
            continue;
        }
        if idx == 0 || idx == log.len() {
            continue;
        }
        let (a, b) = (&log[idx - 1], &log[idx]);
        if t - a.timestamp > tol && b.timestamp - t > tol {
            continue;
        }
        out.push((LocalizationSample::interpolate(a, b, t), det.bbox));
    }
    if out.is_empty() {
        return Err(HypothesisError::NoOverlap { track_id: track.id });
    }
    Ok(out)
}

/// Diagonal of the axis-aligned bounding region of 2D points.
fn extent_2d(points: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for (x, y) in points {
        lo = [lo[0].min(x), lo[1].min(y)];
        hi = [hi[0].max(x), hi[1].max(y)];
    }
    (hi[0] - lo[0]).hypot(hi[1] - lo[1])
}

fn extent_3d(points: &[WorldPoint]) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(&p.coords);
        hi = hi.sup(&p.coords);
    }
    (hi - lo).norm()
}

/// Builds and filters the hypothesis that `track` is the calibration vehicle.
pub fn build_hypothesis(
    track: &ObjectTrack,
    log: &[LocalizationSample],
    intr: &Intrinsics,
    anchor: &Vector3<f64>,
    ransac: &RansacParams,
    pf: &PrefilterParams,
) -> Result<Hypothesis, RejectionReason> {
    let pairs = synchronize(track, log, pf.sync_tolerance).map_err(|_| RejectionReason::TooFewPairs)?;
    if pairs.len() < pf.min_pairs.max(4) {
        return Err(RejectionReason::TooFewPairs);
    }
    if extent_2d(pairs.iter().map(|(_, b)| (b.u, b.v))) < pf.min_extent_2d_px {
        return Err(RejectionReason::TrackTooShort2D);
    }
    let positions: Vec<WorldPoint> = pairs
        .iter()
        .map(|(s, _)| WorldPoint::from(s.position - anchor))
        .collect();
    if extent_3d(&positions) < pf.min_extent_3d_m {
        return Err(RejectionReason::TrackTooShort3D);
    }

    let corrs: Vec<Correspondence> = pairs
        .iter()
        .zip(&positions)
        .map(|((s, b), p)| Correspondence::new(*p, b.center(), s.timestamp))
        .collect();
    let outcome = ransac_pnp(&corrs, intr, ransac).map_err(|_| RejectionReason::NoConsensus)?;
    if !(outcome.median_error_px <= pf.max_median_reproj_px) {
        return Err(RejectionReason::ReprojectionTooHigh);
    }
    let calib = outcome.calib.with_anchor(*anchor);
    prefilter_camera_pose(&calib, &positions, pf)?;

    Ok(Hypothesis {
        track_id: track.id,
        pairs,
        positions,
        calib,
        median_reproj_px: outcome.median_error_px,
        inlier_mask: outcome.inliers,
    })
}

/// Distance from `p` to the polyline through `path`.
pub fn distance_to_polyline(p: &WorldPoint, path: &[WorldPoint]) -> f64 {
    match path {
        [] => f64::INFINITY,
        [only] => (p - only).norm(),
        _ => path
            .windows(2)
            .map(|w| {
                let d = w[1] - w[0];
                let len2 = d.norm_squared();
                let s = if len2 > 0.0 {
                    ((p - w[0]).dot(&d) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (p - (w[0] + d * s)).norm()
            })
            .fold(f64::INFINITY, f64::min),
    }
}

/// Camera-position plausibility: near the driven path and above the local
/// ground (the `z` of the nearest path point).
pub fn prefilter_camera_pose(
    calib: &ExtrinsicCalibration,
    path: &[WorldPoint],
    pf: &PrefilterParams,
) -> Result<(), RejectionReason> {
    let c = calib.center();
    if !(distance_to_polyline(&c, path) <= pf.d_thr) {
        return Err(RejectionReason::CameraTooFar);
    }
    let nearest = path
        .iter()
        .min_by(|a, b| (*a - c).norm_squared().total_cmp(&(*b - c).norm_squared()))
        .ok_or(RejectionReason::CameraTooFar)?;
    if !(c.z - nearest.z > 0.0) {
        return Err(RejectionReason::CameraBelowGround);
    }
    Ok(())
}
