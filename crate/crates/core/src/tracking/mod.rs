//! Model-less multi-object tracking in image space.
//!
//! Boxes are associated frame-to-frame by a DIoU-based cost solved with the
//! Hungarian method. Tracks that miss a frame are extrapolated linearly in
//! pixel space; after too many consecutive misses they are closed. The
//! extrapolated entries are stripped when tracks are finalized.

mod assignment;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PixelPoint;

pub use assignment::{assign, solve_assignment, FORBIDDEN_COST};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("frame timestamps must strictly increase ({previous} then {current})")]
    NonMonotonicTime { previous: f64, current: f64 },
    #[error("non-finite timestamp")]
    NonFiniteTime,
}

/// Axis-aligned image box given by center and size, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(u: f64, v: f64, w: f64, h: f64) -> Result<Self, TrackingError> {
        if ![u, v, w, h].iter().all(|x| x.is_finite()) {
            return Err(TrackingError::InvalidBox("non-finite component".into()));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(TrackingError::InvalidBox(format!(
                "width and height must be positive (w = {w}, h = {h})"
            )));
        }
        Ok(Self { u, v, w, h })
    }

    /// Box spanning `[u_min, u_max] × [v_min, v_max]`.
    pub fn from_corners(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Result<Self, TrackingError> {
        Self::new(
            0.5 * (u_min + u_max),
            0.5 * (v_min + v_max),
            u_max - u_min,
            v_max - v_min,
        )
    }

    pub fn left(&self) -> f64 {
        self.u - 0.5 * self.w
    }

    pub fn right(&self) -> f64 {
        self.u + 0.5 * self.w
    }

    pub fn top(&self) -> f64 {
        self.v - 0.5 * self.h
    }

    pub fn bottom(&self) -> f64 {
        self.v + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> PixelPoint {
        PixelPoint::new(self.u, self.v)
    }

    /// Bottom edge, left endpoint first.
    pub fn bottom_edge(&self) -> (PixelPoint, PixelPoint) {
        let b = self.bottom();
        (PixelPoint::new(self.left(), b), PixelPoint::new(self.right(), b))
    }

    /// Euclidean distance from `p` to the filled rectangle (0 inside).
    pub fn distance_to(&self, p: &PixelPoint) -> f64 {
        let dx = (self.left() - p.x).max(0.0).max(p.x - self.right());
        let dy = (self.top() - p.y).max(0.0).max(p.y - self.bottom());
        dx.hypot(dy)
    }

    pub fn contains(&self, p: &PixelPoint) -> bool {
        p.x >= self.left() && p.x <= self.right() && p.y >= self.top() && p.y <= self.bottom()
    }
}

/// One box observation at a point in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub timestamp: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub extrapolated: bool,
}

/// Time-ordered detections attributed to one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub id: u64,
    pub detections: Vec<Detection>,
}

impl ObjectTrack {
    pub fn start(&self) -> f64 {
        self.detections.first().map_or(f64::NAN, |d| d.timestamp)
    }

    pub fn end(&self) -> f64 {
        self.detections.last().map_or(f64::NAN, |d| d.timestamp)
    }
}

/// All boxes reported for one image timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub timestamp: f64,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerParams {
    /// Consecutive missed frames a track survives through extrapolation.
    pub max_extrapolation_frames: usize,
    /// Finalized tracks with fewer real detections are dropped.
    pub min_track_detections: usize,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            max_extrapolation_frames: 10,
            min_track_detections: 4,
        }
    }
}

fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let h = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    w * h
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Distance-IoU: IoU minus squared center distance over the squared diagonal
/// of the smallest enclosing box. In `(-1, 1]`.
pub fn diou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let enc_w = a.right().max(b.right()) - a.left().min(b.left());
    let enc_h = a.bottom().max(b.bottom()) - a.top().min(b.top());
    let diag2 = enc_w * enc_w + enc_h * enc_h;
    let d2 = (a.u - b.u).powi(2) + (a.v - b.v).powi(2);
    iou(a, b) - d2 / diag2
}

/// `1 - DIoU` for overlapping boxes, otherwise the forbidden value 2.
pub fn association_cost(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if iou(a, b) > 0.0 {
        1.0 - diou(a, b)
    } else {
        FORBIDDEN_COST
    }
}

struct ActiveTrack {
    id: u64,
    detections: Vec<Detection>,
    misses: usize,
}

impl ActiveTrack {
    fn real(&self) -> impl DoubleEndedIterator<Item = &Detection> {
        self.detections.iter().filter(|d| !d.extrapolated)
    }

    /// Constant pixel-velocity prediction from the last two real detections.
    fn predict(&self, t: f64) -> BoundingBox {
        let mut real = self.real().rev();
        let last = real.next().expect("active track has a real detection");
        let Some(prev) = real.next() else {
            return last.bbox;
        };
        let dt = last.timestamp - prev.timestamp;
        let s = (t - last.timestamp) / dt;
        let (a, b) = (&prev.bbox, &last.bbox);
        BoundingBox {
            u: b.u + s * (b.u - a.u),
            v: b.v + s * (b.v - a.v),
            w: (b.w + s * (b.w - a.w)).max(1.0),
            h: (b.h + s * (b.h - a.h)).max(1.0),
        }
    }

    fn finalize(mut self, min_detections: usize) -> Option<ObjectTrack> {
        self.detections.retain(|d| !d.extrapolated);
        (self.detections.len() >= min_detections.max(1)).then_some(ObjectTrack {
            id: self.id,
            detections: self.detections,
        })
    }
}

/// Tracks boxes over time-ordered frames. Output is sorted by track id.
pub fn run_tracker(frames: &[Frame], params: &TrackerParams) -> Result<Vec<ObjectTrack>, TrackingError> {
    let mut active: Vec<ActiveTrack> = Vec::new();
    let mut finished: Vec<ObjectTrack> = Vec::new();
    let mut next_id = 0u64;
    let mut previous: Option<f64> = None;

    for frame in frames {
        let t = frame.timestamp;
        if !t.is_finite() {
            return Err(TrackingError::NonFiniteTime);
        }
        if let Some(p) = previous {
            if t <= p {
                return Err(TrackingError::NonMonotonicTime {
                    previous: p,
                    current: t,
                });
            }
        }
        previous = Some(t);

        let predictions: Vec<BoundingBox> = active.iter().map(|tr| tr.predict(t)).collect();
        let cost = DMatrix::from_fn(predictions.len(), frame.boxes.len(), |r, c| {
            association_cost(&predictions[r], &frame.boxes[c])
        });
        let pairs = assign(&cost);

        let mut track_matched = vec![false; active.len()];
        let mut box_matched = vec![false; frame.boxes.len()];
        for &(r, c) in &pairs {
            track_matched[r] = true;
            box_matched[c] = true;
            active[r].detections.push(Detection {
                timestamp: t,
                bbox: frame.boxes[c],
                extrapolated: false,
            });
            active[r].misses = 0;
        }

        let mut still_active = Vec::with_capacity(active.len());
        for ((mut track, matched), predicted) in active.into_iter().zip(track_matched).zip(predictions) {
            if !matched {
                track.misses += 1;
                if track.misses > params.max_extrapolation_frames {
                    finished.extend(track.finalize(params.min_track_detections));
                    continue;
                }
                track.detections.push(Detection {
                    timestamp: t,
                    bbox: predicted,
                    extrapolated: true,
                });
            }
            still_active.push(track);
        }
        active = still_active;

        for (c, bbox) in frame.boxes.iter().enumerate() {
            if !box_matched[c] {
                active.push(ActiveTrack {
                    id: next_id,
                    detections: vec![Detection {
                        timestamp: t,
                        bbox: *bbox,
                        extrapolated: false,
                    }],
                    misses: 0,
                });
                next_id += 1;
            }
        }
    }

    finished.extend(
        active
            .into_iter()
            .filter_map(|tr| tr.finalize(params.min_track_detections)),
    );
    finished.sort_by_key(|t| t.id);
    Ok(finished)
}
