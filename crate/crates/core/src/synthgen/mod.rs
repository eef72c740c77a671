//! Deterministic synthetic intersection scenes: a ground-truth camera, a
//! calibration vehicle driving laps around a block, distractor traffic on
//! the intersection movements, projected bounding boxes and a noisy
//! localization log.

mod path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, ExtrinsicCalibration, GroundPlane, Intrinsics, WorldPoint};
use crate::hypothesis::LocalizationSample;
use crate::refinement::VehicleDims;
use crate::tracking::{BoundingBox, Frame};

pub use path::Path;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("the calibration vehicle never enters the field of view")]
    TargetNeverVisible,
}

/// Camera pose in the local scene frame. Angles in degrees; yaw from +x
/// towards +y, negative pitch looks down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPlacement {
    pub position: [f64; 3],
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    #[serde(default)]
    pub roll_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    /// Corners of the closed loop in the local frame; the first waypoint is
    /// the start of every lap.
    pub waypoints: Vec<[f64; 2]>,
    pub corner_radius_m: f64,
    pub speed_mps: f64,
    pub dims: VehicleDims,
    /// Laps driven; each lap is one traversal of the camera's view.
    pub traversal_count: usize,
    /// Time parked at the lap start between consecutive laps.
    #[serde(default)]
    pub pause_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistractorSpec {
    pub count: usize,
    pub min_speed_mps: f64,
    pub max_speed_mps: f64,
    /// Distance from the intersection center where movements start and end.
    pub arm_length_m: f64,
    /// Candidate vehicle sizes, drawn uniformly.
    pub dims: Vec<VehicleDims>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Per-axis Gaussian standard deviation on localization x and y, meters.
    pub sigma_pos: f64,
    /// Gaussian jitter on box center and size, pixels.
    pub sigma_box: f64,
    /// Probability of dropping a detection.
    pub detection_dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub intrinsics: Intrinsics,
    pub camera: CameraPlacement,
    /// UTM coordinates of the local frame origin.
    pub origin_utm: [f64; 3],
    pub lane_offset_m: f64,
    /// Vehicles farther than this from the camera are not detected.
    pub max_range_m: f64,
    pub target: TargetSpec,
    pub distractors: DistractorSpec,
    pub frame_rate: f64,
    pub localization_rate: f64,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub rng_seed: u64,
}

impl ScenarioConfig {
    /// Four-arm intersection watched by a pole camera at its south-west
    /// corner; the calibration vehicle turns left from the west arm to the
    /// north arm on every lap.
    pub fn intersection(seed: u64) -> Self {
        let small = |l, w, h| VehicleDims {
            length: l,
            width: w,
            height: h,
        };
        Self {
            intrinsics: Intrinsics {
                fx: 1000.0,
                fy: 1000.0,
                cx: 960.0,
                cy: 600.0,
                image_width: 1920.0,
                image_height: 1200.0,
            },
            camera: CameraPlacement {
                position: [-30.0, -30.0, 9.0],
                yaw_deg: 45.0,
                pitch_deg: -15.0,
                roll_deg: 0.0,
            },
            origin_utm: [574_000.0, 5_365_000.0, 480.0],
            lane_offset_m: 1.75,
            max_range_m: 120.0,
            target: TargetSpec {
                waypoints: vec![
                    [-180.0, -1.75],
                    [1.75, -1.75],
                    [1.75, 200.0],
                    [-200.0, 200.0],
                    [-200.0, -1.75],
                ],
                corner_radius_m: 8.0,
                speed_mps: 10.0,
                dims: VehicleDims::default(),
                traversal_count: 2,
                pause_s: 0.0,
            },
            distractors: DistractorSpec {
                count: 5,
                min_speed_mps: 7.0,
                max_speed_mps: 13.0,
                arm_length_m: 150.0,
                dims: vec![
                    small(4.5, 1.8, 1.45),
                    small(4.9, 2.0, 1.75),
                    small(5.3, 2.1, 2.3),
                    small(3.8, 1.7, 1.5),
                ],
            },
            frame_rate: 10.0,
            localization_rate: 50.0,
            noise: NoiseConfig::default(),
            rng_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        self.intrinsics
            .validate()
            .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        if self.target.traversal_count < 1 {
            return bad("target.traversal_count must be at least 1");
        }
        if !(self.frame_rate > 0.0 && self.localization_rate > 0.0) {
            return bad("rates must be positive");
        }
        if self.target.waypoints.len() < 3 || !(self.target.speed_mps > 0.0) {
            return bad("the target loop needs three waypoints and a positive speed");
        }
        if !(self.target.pause_s >= 0.0) {
            return bad("target.pause_s must be non-negative");
        }
        let n = &self.noise;
        if !(n.sigma_pos >= 0.0 && n.sigma_box >= 0.0 && (0.0..=1.0).contains(&n.detection_dropout)) {
            return bad("noise values must be non-negative and dropout a probability");
        }
        if self.distractors.count > 0
            && (self.distractors.dims.is_empty()
                || !(self.distractors.min_speed_mps > 0.0)
                || self.distractors.max_speed_mps < self.distractors.min_speed_mps)
        {
            return bad("distractors need sizes and a valid speed range");
        }
        self.target
            .dims
            .validate()
            .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn origin(&self) -> Vector3<f64> {
        Vector3::from(self.origin_utm)
    }

    /// Ground-truth calibration, anchored at the scene origin.
    pub fn true_calibration(&self) -> ExtrinsicCalibration {
        let c = &self.camera;
        ExtrinsicCalibration::looking(
            Vector3::from(c.position),
            c.yaw_deg.to_radians(),
            c.pitch_deg.to_radians(),
            c.roll_deg.to_radians(),
            self.origin(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VehicleId {
    Target,
    Distractor(usize),
}

/// Everything the generator knows that the pipeline must recover.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTruth {
    /// Camera pose, anchored at the scene origin.
    pub calibration: ExtrinsicCalibration,
    /// Per emitted frame, which vehicle produced each box (same order as the
    /// frame's boxes).
    pub identities: Vec<Vec<VehicleId>>,
    /// Ground plane in the frame anchored at the scene origin.
    pub plane: GroundPlane,
    /// Noise-free localization log, raw UTM.
    pub target_poses: Vec<LocalizationSample>,
    /// `(first, last)` detection time of the target per lap.
    pub traversal_windows: Vec<(f64, f64)>,
}

impl ScenarioTruth {
    /// Vehicle that produced `bbox` at `timestamp`, by exact box equality.
    pub fn identify(&self, frames: &[Frame], timestamp: f64, bbox: &BoundingBox) -> Option<VehicleId> {
        let idx = frames.iter().position(|f| f.timestamp == timestamp)?;
        let k = frames[idx].boxes.iter().position(|b| b == bbox)?;
        Some(self.identities[idx][k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub frames: Vec<Frame>,
    pub localization: Vec<LocalizationSample>,
    pub truth: ScenarioTruth,
}

struct Mover {
    id: VehicleId,
    path: Path,
    dims: VehicleDims,
    speed: f64,
    start: f64,
}

impl Mover {
    /// Ground position and heading at time `t`, or `None` when not on the road.
    fn pose(&self, t: f64) -> Option<(Vector2<f64>, f64)> {
        let s = (t - self.start) * self.speed;
        (s >= 0.0 && s <= self.path.length()).then(|| self.path.at(s))
    }
}

/// Corners of the oriented 3D box at ground position `pos`.
fn box_corners(pos: &Vector2<f64>, heading: f64, dims: &VehicleDims, ground: f64) -> [WorldPoint; 8] {
    let (s, c) = heading.sin_cos();
    let f = Vector2::new(c, s) * (0.5 * dims.length);
    let l = Vector2::new(-s, c) * (0.5 * dims.width);
    let base = [pos + f + l, pos + f - l, pos - f - l, pos - f + l];
    let mut out = [WorldPoint::origin(); 8];
    for (k, b) in base.iter().enumerate() {
        out[k] = WorldPoint::new(b.x, b.y, ground);
        out[k + 4] = WorldPoint::new(b.x, b.y, ground + dims.height);
    }
    out
}

/// Axis-aligned hull of the projected corners, if at least four corners are
/// in front of the camera and the hull overlaps the image.
pub fn project_box(intr: &Intrinsics, calib: &ExtrinsicCalibration, corners: &[WorldPoint]) -> Option<BoundingBox> {
    let px: Vec<_> = corners.iter().filter_map(|c| project(intr, calib, c).ok()).collect();
    if px.len() < 4 {
        return None;
    }
    let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &px {
        u0 = u0.min(p.x);
        v0 = v0.min(p.y);
        u1 = u1.max(p.x);
        v1 = v1.max(p.y);
    }
    let overlaps = u1 > 0.0 && u0 < intr.image_width && v1 > 0.0 && v0 < intr.image_height;
    if !overlaps {
        return None;
    }
    BoundingBox::from_corners(u0, v0, u1, v1).ok()
}

fn rotate(d: Vector2<f64>, quarter_turns: i32) -> Vector2<f64> {
    match quarter_turns.rem_euclid(4) {
        0 => d,
        1 => Vector2::new(-d.y, d.x),
        2 => -d,
        _ => Vector2::new(d.y, -d.x),
    }
}

/// One of the twelve movements (4 arms × straight/left/right) through an
/// intersection centered at the origin with right-hand traffic.
pub fn movement_path(index: usize, lane: f64, arm: f64) -> Path {
    let d_in = rotate(Vector2::new(1.0, 0.0), (index / 3) as i32);
    let d_out = match index % 3 {
        0 => d_in,
        1 => rotate(d_in, 1),
        _ => rotate(d_in, -1),
    };
    let right = |d: Vector2<f64>| Vector2::new(d.y, -d.x);
    let entry = -d_in * arm + right(d_in) * lane;
    let exit = d_out * arm + right(d_out) * lane;
    if index.is_multiple_of(3) {
        Path::with_fillets(&[entry, exit], 1.0, false)
    } else {
        let corner = (right(d_in) + right(d_out)) * lane;
        let radius = if index % 3 == 1 { 8.0 } else { 5.0 };
        Path::with_fillets(&[entry, corner, exit], radius, false)
    }
}

const STREAM_DISTRACTORS: u64 = 1;
const STREAM_BOXES: u64 = 2;
const STREAM_LOCALIZATION: u64 = 3;

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Renders the scenario. Only frames with at least one box are emitted.
pub fn generate(config: &ScenarioConfig) -> Result<Scenario, SynthError> {
    config.validate()?;
    let intr = config.intrinsics;
    let calib = config.true_calibration();
    let origin = config.origin();
    let target_spec = &config.target;

    let loop_pts: Vec<Vector2<f64>> = target_spec.waypoints.iter().map(|w| Vector2::new(w[0], w[1])).collect();
    let loop_path = Path::with_fillets(&loop_pts, target_spec.corner_radius_m, true);
    let lap = loop_path.length() / target_spec.speed_mps;
    let period = lap + target_spec.pause_s;
    let duration =
        lap * target_spec.traversal_count as f64 + target_spec.pause_s * (target_spec.traversal_count - 1) as f64;
    let target_pose = |t: f64| -> (Vector2<f64>, f64) {
        let k = ((t / period).floor() as usize).min(target_spec.traversal_count - 1);
        let local = t - k as f64 * period;
        loop_path.at((local * target_spec.speed_mps).min(loop_path.length()))
    };

    let mut movers = Vec::new();
    let mut rng = stream(config.rng_seed, STREAM_DISTRACTORS);
    let ds = &config.distractors;
    for i in 0..ds.count {
        let movement = rng.random_range(0..12);
        let speed = rng.random_range(ds.min_speed_mps..=ds.max_speed_mps);
        let path = movement_path(movement, config.lane_offset_m, ds.arm_length_m);
        let start = rng.random_range(-path.length() / speed * 0.5..duration);
        let dims = ds.dims[rng.random_range(0..ds.dims.len())];
        movers.push(Mover {
            id: VehicleId::Distractor(i),
            path,
            dims,
            speed,
            start,
        });
    }

    let ground = 0.0;
    let cam = calib.center();
    let mut box_rng = stream(config.rng_seed, STREAM_BOXES);
    let jitter = Normal::new(0.0, config.noise.sigma_box.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut frames = Vec::new();
    let mut identities = Vec::new();
    let mut target_seen: Vec<Option<(f64, f64)>> = vec![None; target_spec.traversal_count];
    let n_frames = (duration * config.frame_rate).floor() as usize;
    for k in 0..=n_frames {
        let t = k as f64 / config.frame_rate;
        let mut boxes = Vec::new();
        let mut ids = Vec::new();
        let target_now = {
            let (p, h) = target_pose(t);
            Some((VehicleId::Target, p, h, target_spec.dims))
        };
        let others = movers
            .iter()
            .filter_map(|m| m.pose(t).map(|(p, h)| (m.id, p, h, m.dims)));
        for (id, pos, heading, dims) in target_now.into_iter().chain(others) {
            let center = WorldPoint::new(pos.x, pos.y, ground);
            if (center - cam).norm() > config.max_range_m {
                continue;
            }
            let corners = box_corners(&pos, heading, &dims, ground);
            let Some(mut bbox) = project_box(&intr, &calib, &corners) else {
                continue;
            };
            if config.noise.detection_dropout > 0.0 && box_rng.random::<f64>() < config.noise.detection_dropout {
                continue;
            }
            if config.noise.sigma_box > 0.0 {
                let j: [f64; 4] = std::array::from_fn(|_| jitter.sample(&mut box_rng));
                bbox = BoundingBox {
                    u: bbox.u + j[0],
                    v: bbox.v + j[1],
                    w: (bbox.w + j[2]).max(1.0),
                    h: (bbox.h + j[3]).max(1.0),
                };
            }
            if id == VehicleId::Target {
                let lap_idx = ((t / period).floor() as usize).min(target_spec.traversal_count - 1);
                let w = target_seen[lap_idx].get_or_insert((t, t));
                w.1 = t;
            }
            boxes.push(bbox);
            ids.push(id);
        }
        if !boxes.is_empty() {
            frames.push(Frame { timestamp: t, boxes });
            identities.push(ids);
        }
    }
    if target_seen.iter().all(Option::is_none) {
        return Err(SynthError::TargetNeverVisible);
    }

    let mut loc_rng = stream(config.rng_seed, STREAM_LOCALIZATION);
    let pos_noise = Normal::new(0.0, config.noise.sigma_pos.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let n_samples = (duration * config.localization_rate).floor() as usize;
    let mut localization = Vec::with_capacity(n_samples + 1);
    let mut truth_poses = Vec::with_capacity(n_samples + 1);
    for k in 0..=n_samples {
        let t = k as f64 / config.localization_rate;
        let (p, yaw) = target_pose(t);
        let true_sample = LocalizationSample {
            timestamp: t,
            position: origin + Vector3::new(p.x, p.y, ground),
            roll: 0.0,
            pitch: 0.0,
            yaw: crate::geometry::wrap_angle(yaw),
        };
        let mut noisy = true_sample;
        if config.noise.sigma_pos > 0.0 {
            noisy.position.x += pos_noise.sample(&mut loc_rng);
            noisy.position.y += pos_noise.sample(&mut loc_rng);
        }
        localization.push(noisy);
        truth_poses.push(true_sample);
    }

    Ok(Scenario {
        frames,
        localization,
        truth: ScenarioTruth {
            calibration: calib,
            identities,
            plane: GroundPlane::horizontal(ground),
            target_poses: truth_poses,
            traversal_windows: target_seen.into_iter().flatten().collect(),
        },
    })
}

/// What happens to a box whose center falls inside an occluder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionPolicy {
    Drop,
    /// Keep the wider visible horizontal part of the box; drop it if none.
    Shrink,
}

/// Axis-aligned image region hiding detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionRegion {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
    pub policy: OcclusionPolicy,
}

impl OcclusionRegion {
    fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u_min && u <= self.u_max && v >= self.v_min && v <= self.v_max
    }
}

/// Applies occluders to every box whose center lies in a region. Frames
/// left without boxes are removed.
pub fn occlude(frames: &[Frame], regions: &[OcclusionRegion]) -> Vec<Frame> {
    frames
        .iter()
        .map(|f| Frame {
            timestamp: f.timestamp,
            boxes: f
                .boxes
                .iter()
                .filter_map(|b| {
                    let mut b = *b;
                    for r in regions {
                        if !r.contains(b.u, b.v) {
                            continue;
                        }
                        match r.policy {
                            OcclusionPolicy::Drop => return None,
                            OcclusionPolicy::Shrink => {
                                let left = (b.left(), r.u_min.min(b.right()));
                                let right = (r.u_max.max(b.left()), b.right());
                                let keep = if left.1 - left.0 >= right.1 - right.0 {
                                    left
                                } else {
                                    right
                                };
                                b = BoundingBox::from_corners(keep.0, b.top(), keep.1, b.bottom()).ok()?;
                            }
                        }
                    }
                    Some(b)
                })
                .collect(),
        })
        .filter(|f| !f.boxes.is_empty())
        .collect()
}
