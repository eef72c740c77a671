//! Text formats: detection and localization CSV, intrinsics TOML,
//! calibration JSON and δ_p plot CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::config::LeverArm;
use super::{DistanceBin, PipelineError};
use crate::geometry::{body_to_world, ExtrinsicCalibration, Intrinsics};
use crate::hypothesis::LocalizationSample;
use crate::refinement::CalibrationResult;
use crate::tracking::{BoundingBox, Detection, Frame, ObjectTrack};

pub const DETECTIONS_HEADER: &str = "timestamp_s,u,v,w,h,detector_id";
pub const LOCALIZATION_HEADER: &str = "timestamp_s,x_utm,y_utm,z_utm,roll,pitch,yaw";

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

fn parse_err(path: &str, line: usize, msg: impl std::fmt::Display) -> PipelineError {
    PipelineError::Input(format!("{path}:{line}: {msg}"))
}

/// Data lines of a CSV document as `(line number, fields)`, skipping blank
/// lines, `#` comments and a header line whose first field is not numeric.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    let mut first = true;
    text.lines().enumerate().filter_map(move |(i, line)| {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let is_header = first && fields[0].parse::<f64>().is_err();
        first = false;
        (!is_header).then_some((i + 1, fields))
    })
}

/// Detection frames, with per-box track ids when the input carried them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Detections {
    pub frames: Vec<Frame>,
    /// Parallel to `frames[k].boxes` when every line had a detector id.
    pub ids: Option<Vec<Vec<u64>>>,
}

impl Detections {
    pub fn box_count(&self) -> usize {
        self.frames.iter().map(|f| f.boxes.len()).sum()
    }

    /// Groups boxes by their id into tracks, sorted by id.
    pub fn tracks_from_ids(&self) -> Option<Vec<ObjectTrack>> {
        let ids = self.ids.as_ref()?;
        let mut by_id: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
        for (frame, frame_ids) in self.frames.iter().zip(ids) {
            for (b, id) in frame.boxes.iter().zip(frame_ids) {
                by_id.entry(*id).or_default().push(Detection {
                    timestamp: frame.timestamp,
                    bbox: *b,
                    extrapolated: false,
                });
            }
        }
        Some(
            by_id
                .into_iter()
                .map(|(id, detections)| ObjectTrack { id, detections })
                .collect(),
        )
    }
}

/// Parses `timestamp_s,u,v,w,h[,detector_id]` lines (`u`, `v` = box center).
/// Lines with equal timestamps form one frame; timestamps may not decrease.
pub fn parse_detections(text: &str, origin: &str) -> Result<Detections, PipelineError> {
    let mut frames: Vec<Frame> = Vec::new();
    let mut ids: Vec<Vec<u64>> = Vec::new();
    let mut with_ids: Option<bool> = None;
    for (line, f) in data_lines(text) {
        if f.len() != 5 && f.len() != 6 {
            return Err(parse_err(
                origin,
                line,
                format!("expected 5 or 6 fields, found {}", f.len()),
            ));
        }
        let num = |k: usize| {
            f[k].parse::<f64>()
                .map_err(|_| parse_err(origin, line, format!("field {} (`{}`) is not a number", k + 1, f[k])))
        };
        let t = num(0)?;
        if !t.is_finite() {
            return Err(parse_err(origin, line, "non-finite timestamp"));
        }
        let bbox = BoundingBox::new(num(1)?, num(2)?, num(3)?, num(4)?).map_err(|e| parse_err(origin, line, e))?;
        let has_id = f.len() == 6 && !f[5].is_empty();
        if *with_ids.get_or_insert(has_id) != has_id {
            return Err(parse_err(
                origin,
                line,
                "detector ids must be given on every line or on none",
            ));
        }
        let id = if has_id {
            f[5].parse::<u64>().map_err(|_| {
                parse_err(
                    origin,
                    line,
                    format!("detector id `{}` is not an unsigned integer", f[5]),
                )
            })?
        } else {
            0
        };
        match frames.last_mut() {
            Some(last) if last.timestamp == t => {
                last.boxes.push(bbox);
                ids.last_mut().expect("parallel to frames").push(id);
            }
            Some(last) if t < last.timestamp => {
                return Err(parse_err(
                    origin,
                    line,
                    format!("timestamp {t} precedes the previous frame at {}", last.timestamp),
                ));
            }
            _ => {
                frames.push(Frame {
                    timestamp: t,
                    boxes: vec![bbox],
                });
                ids.push(vec![id]);
            }
        }
    }
    Ok(Detections {
        frames,
        ids: with_ids.unwrap_or(false).then_some(ids),
    })
}

pub fn ingest_detections(path: &Path) -> Result<Detections, PipelineError> {
    parse_detections(&read(path)?, &path.display().to_string())
}

pub fn format_detections(dets: &Detections) -> String {
    let mut out = String::from(if dets.ids.is_some() {
        DETECTIONS_HEADER
    } else {
        "timestamp_s,u,v,w,h"
    });
    out.push('\n');
    for (k, f) in dets.frames.iter().enumerate() {
        for (j, b) in f.boxes.iter().enumerate() {
            let _ = write!(out, "{},{},{},{},{}", f.timestamp, b.u, b.v, b.w, b.h);
            if let Some(ids) = &dets.ids {
                let _ = write!(out, ",{}", ids[k][j]);
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_detections(path: &Path, dets: &Detections) -> Result<(), PipelineError> {
    write(path, &format_detections(dets))
}

/// Parses `timestamp_s,x_utm,y_utm,z_utm,roll,pitch,yaw` lines (meters,
/// radians), then moves every position by the body-frame lever arm.
pub fn parse_localization(
    text: &str,
    origin: &str,
    lever: &LeverArm,
) -> Result<Vec<LocalizationSample>, PipelineError> {
    let mut out: Vec<LocalizationSample> = Vec::new();
    for (line, f) in data_lines(text) {
        if f.len() != 7 {
            return Err(parse_err(origin, line, format!("expected 7 fields, found {}", f.len())));
        }
        let mut v = [0.0; 7];
        for (k, s) in f.iter().enumerate() {
            v[k] =
                s.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
                    parse_err(origin, line, format!("field {} (`{s}`) is not a finite number", k + 1))
                })?;
        }
        for (name, a) in [("roll", v[4]), ("pitch", v[5]), ("yaw", v[6])] {
            if a.abs() > std::f64::consts::TAU {
                return Err(parse_err(
                    origin,
                    line,
                    format!("|{name}| = {a} exceeds 2π; angles must be in radians"),
                ));
            }
        }
        if let Some(prev) = out.last() {
            if v[0] <= prev.timestamp {
                return Err(parse_err(
                    origin,
                    line,
                    format!("timestamp {} does not increase (previous {})", v[0], prev.timestamp),
                ));
            }
        }
        let mut position = Vector3::new(v[1], v[2], v[3]);
        if !lever.is_zero() {
            position += body_to_world(v[4], v[5], v[6]) * Vector3::new(lever.x, lever.y, lever.z);
        }
        out.push(LocalizationSample {
            timestamp: v[0],
            position,
            roll: v[4],
            pitch: v[5],
            yaw: v[6],
        });
    }
    Ok(out)
}

pub fn ingest_localization(path: &Path, lever: &LeverArm) -> Result<Vec<LocalizationSample>, PipelineError> {
    parse_localization(&read(path)?, &path.display().to_string(), lever)
}

pub fn format_localization(samples: &[LocalizationSample]) -> String {
    let mut out = String::from(LOCALIZATION_HEADER);
    out.push('\n');
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.timestamp, s.position.x, s.position.y, s.position.z, s.roll, s.pitch, s.yaw
        );
    }
    out
}

pub fn write_localization(path: &Path, samples: &[LocalizationSample]) -> Result<(), PipelineError> {
    write(path, &format_localization(samples))
}

pub fn ingest_intrinsics(path: &Path) -> Result<Intrinsics, PipelineError> {
    let text = read(path)?;
    let intr: Intrinsics =
        toml::from_str(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    intr.validate()
        .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    Ok(intr)
}

pub fn write_intrinsics(path: &Path, intr: &Intrinsics) -> Result<(), PipelineError> {
    write(path, &toml::to_string(intr).expect("intrinsics serialize"))
}

/// Number written with 17 significant digits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exact(pub f64);

impl Serialize for Exact {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return s.serialize_none();
        }
        RawValue::from_string(format!("{:.16e}", self.0))
            .map_err(serde::ser::Error::custom)?
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Exact {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Option::<f64>::deserialize(d).map(|v| Exact(v.unwrap_or(f64::NAN)))
    }
}

fn exact3(v: &Vector3<f64>) -> [Exact; 3] {
    [Exact(v.x), Exact(v.y), Exact(v.z)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMetrics {
    pub delta_p_mean_m: Exact,
    pub delta_p_max_m: Exact,
    pub e_mean_percent: Exact,
    pub e_max_percent: Exact,
    pub pair_count: usize,
    pub excluded_pairs: usize,
}

/// Emitted calibration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDocument {
    pub tool_version: String,
    pub config_sha256: String,
    /// Row-major world-to-camera rotation.
    pub rotation: [[Exact; 3]; 3],
    /// Same rotation as a unit quaternion `(w, x, y, z)`, `w ≥ 0`.
    pub quaternion_wxyz: [Exact; 4],
    /// Translation in the anchored frame, meters.
    pub translation: [Exact; 3],
    /// UTM offset subtracted from world coordinates.
    pub anchor_utm: [Exact; 3],
    pub camera_center_utm: [Exact; 3],
    pub intrinsics: Intrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<CalibrationMetrics>,
}

/// Unit quaternion `(w, x, y, z)` with `w ≥ 0`.
pub fn rotation_to_quaternion(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let mut v = [q.w, q.i, q.j, q.k];
    if v[0] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

impl CalibrationDocument {
    pub fn new(
        calib: &ExtrinsicCalibration,
        intr: &Intrinsics,
        metrics: Option<CalibrationMetrics>,
        config_sha256: String,
    ) -> Self {
        let r = calib.rotation();
        let q = rotation_to_quaternion(r);
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256,
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| Exact(r[(i, j)]))),
            quaternion_wxyz: q.map(Exact),
            translation: exact3(calib.translation()),
            anchor_utm: exact3(calib.anchor()),
            camera_center_utm: exact3(&calib.center_utm()),
            intrinsics: *intr,
            metrics,
        }
    }

    pub fn from_result(result: &CalibrationResult, intr: &Intrinsics, config_sha256: String) -> Self {
        Self::new(
            &result.calib,
            intr,
            Some(CalibrationMetrics {
                delta_p_mean_m: Exact(result.delta_p_mean),
                delta_p_max_m: Exact(result.delta_p_max),
                e_mean_percent: Exact(result.e_mean),
                e_max_percent: Exact(result.e_max),
                pair_count: result.pair_count,
                excluded_pairs: result.excluded_pairs,
            }),
            config_sha256,
        )
    }

    pub fn calibration(&self) -> Result<ExtrinsicCalibration, PipelineError> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j].0);
        let v = |a: &[Exact; 3]| Vector3::new(a[0].0, a[1].0, a[2].0);
        ExtrinsicCalibration::new(r, v(&self.translation), v(&self.anchor_utm))
            .map_err(|e| PipelineError::Input(format!("calibration file: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Input(format!("calibration file: {e}")))
    }
}

pub fn emit_calibration(doc: &CalibrationDocument, path: &Path) -> Result<(), PipelineError> {
    write(path, &doc.to_json())
}

pub fn read_calibration(path: &Path) -> Result<CalibrationDocument, PipelineError> {
    CalibrationDocument::from_json(&read(path)?)
}

pub fn format_plot_data(bins: &[DistanceBin]) -> String {
    let mut out = String::from("distance_bin_center_m,mean_delta_p_m,count\n");
    for b in bins {
        let _ = writeln!(out, "{},{},{}", b.center_m, b.mean_delta_p_m, b.count);
    }
    out
}

pub fn emit_plot_data(bins: &[DistanceBin], path: &Path) -> Result<(), PipelineError> {
    write(path, &format_plot_data(bins))
}
