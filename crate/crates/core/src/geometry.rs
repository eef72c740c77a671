//! Pinhole projection, rigid world-to-camera transforms, ground planes and
//! UTM anchoring.
//!
//! Camera frame convention: `x` right, `y` down, `z` forward. A point is
//! visible only with strictly positive depth. World frame is ENU-like with
//! `+z` up; all world points handled here are already anchored, i.e. a UTM
//! offset has been subtracted (see [`apply_anchor`]).

use nalgebra::{Matrix3, Matrix4, Point2, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Point in the anchored world frame, meters.
pub type WorldPoint = Point3<f64>;
/// Continuous image coordinate, pixels. May lie outside the image.
pub type PixelPoint = Point2<f64>;

/// Minimum depth for a point to count as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-9;
/// Tolerance on `RᵀR = I` and `det R = 1`.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point lies behind the camera (depth {depth:.3e})")]
    BehindCamera { depth: f64 },
    #[error("viewing ray does not intersect the plane")]
    NoIntersection,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("matrix is not a proper rotation (deviation {0:.3e})")]
    NotARotation(f64),
    #[error("cannot anchor an empty point set")]
    EmptyInput,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Pinhole intrinsics (no distortion).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(alias = "width")]
    pub image_width: f64,
    #[serde(alias = "height")]
    pub image_height: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, image_width: f64, image_height: f64) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            image_width,
            image_height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let vals = [self.fx, self.fy, self.cx, self.cy, self.image_width, self.image_height];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("intrinsics"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        if !(self.cx > 0.0 && self.cx < self.image_width) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx = {} outside (0, {})",
                self.cx, self.image_width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.image_height) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy = {} outside (0, {})",
                self.cy, self.image_height
            )));
        }
        Ok(())
    }

    /// The 3×3 camera matrix `K`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Camera-frame direction (unnormalized, `z = 1`) through a pixel.
    pub fn ray(&self, px: &PixelPoint) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    /// Perspective division of a camera-frame point with positive depth.
    pub fn pixel_of(&self, pc: &Vector3<f64>) -> PixelPoint {
        let z = pc.z;
        PixelPoint::new((self.fx * pc.x + self.cx * z) / z, (self.fy * pc.y + self.cy * z) / z)
    }

    pub fn contains(&self, px: &PixelPoint) -> bool {
        px.x >= 0.0 && px.x <= self.image_width && px.y >= 0.0 && px.y <= self.image_height
    }
}

/// World-to-camera rigid transform `p_c = R p + t` for points expressed in
/// the frame obtained by subtracting `anchor` from raw UTM coordinates.
///
/// The camera center is cached so that re-anchoring shifts it exactly and
/// projections stay bit-identical across anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtrinsicCalibration {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    anchor: Vector3<f64>,
    center: Vector3<f64>,
}

impl ExtrinsicCalibration {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, anchor: Vector3<f64>) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        if translation.iter().chain(anchor.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("extrinsic calibration"));
        }
        Ok(Self {
            rotation,
            translation,
            anchor,
            center: -(rotation.transpose() * translation),
        })
    }

    /// Builds a calibration from a rotation and the camera center in the
    /// anchored frame.
    pub fn from_center(
        rotation: Matrix3<f64>,
        center: Vector3<f64>,
        anchor: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        if center.iter().chain(anchor.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("extrinsic calibration"));
        }
        Ok(Self {
            rotation,
            translation: -(rotation * center),
            anchor,
            center,
        })
    }

    /// Camera at `center` whose optical axis has heading `yaw` (from +x
    /// towards +y) and elevation `pitch` (negative looks down), rolled by
    /// `roll` about the optical axis. All angles in radians.
    pub fn looking(center: Vector3<f64>, yaw: f64, pitch: f64, roll: f64, anchor: Vector3<f64>) -> Self {
        let fwd = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin());
        let right = fwd.cross(&Vector3::z()).normalize();
        let down = fwd.cross(&right);
        let base = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let rotation = Rotation3::from_axis_angle(&Vector3::z_axis(), roll).into_inner() * base;
        let rotation = nearest_rotation(&rotation);
        Self {
            rotation,
            translation: -(rotation * center),
            anchor,
            center,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            anchor: Vector3::zeros(),
            center: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn anchor(&self) -> &Vector3<f64> {
        &self.anchor
    }

    /// Camera center in the anchored frame.
    pub fn center(&self) -> WorldPoint {
        WorldPoint::from(self.center)
    }

    /// Camera center in raw UTM coordinates.
    pub fn center_utm(&self) -> Vector3<f64> {
        self.center + self.anchor
    }

    /// Same physical camera expressed relative to another anchor.
    pub fn reanchored(&self, new_anchor: Vector3<f64>) -> Self {
        let center = self.center + (self.anchor - new_anchor);
        Self {
            rotation: self.rotation,
            translation: -(self.rotation * center),
            anchor: new_anchor,
            center,
        }
    }

    /// Relabels the anchor without moving the camera in anchored coordinates.
    pub fn with_anchor(mut self, anchor: Vector3<f64>) -> Self {
        self.anchor = anchor;
        self
    }

    pub fn to_camera(&self, p: &WorldPoint) -> Vector3<f64> {
        self.rotation * (p.coords - self.center)
    }

    /// Left-multiplicative update about the camera: `R' = exp(ω) R`,
    /// `t' = exp(ω) t + τ`. Invariant to a global shift of world data.
    pub fn perturbed(&self, omega: &Vector3<f64>, tau: &Vector3<f64>) -> Self {
        let dr = Rotation3::new(*omega).into_inner();
        let rotation = dr * self.rotation;
        let translation = dr * self.translation + tau;
        Self {
            rotation,
            translation,
            anchor: self.anchor,
            center: -(rotation.transpose() * translation),
        }
    }

    /// 4×4 homogeneous `[R t; 0 1]`.
    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Angle of the relative rotation `R_otherᵀ R_self`, radians.
    pub fn rotation_angle_to(&self, other: &Self) -> f64 {
        let rel = other.rotation.transpose() * self.rotation;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite("rotation"));
    }
    let dev = (r.transpose() * r - Matrix3::identity()).norm();
    let det = r.determinant();
    if dev >= ROTATION_TOL || (det - 1.0).abs() >= ROTATION_TOL {
        return Err(GeometryError::NotARotation(dev.max((det - 1.0).abs())));
    }
    Ok(())
}

/// Closest proper rotation to `m` in the Frobenius sense (polar decomposition).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        r = u * d * v_t;
    }
    // One Newton step on the polar factor tightens orthonormality to ~1e-16.
    0.5 * (r + r.transpose().try_inverse().unwrap_or(r))
}

/// Body-to-world rotation for intrinsic Z-Y'-X'' angles (yaw, pitch, roll).
pub fn body_to_world(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    Rotation3::from_euler_angles(roll, pitch, yaw).into_inner()
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let y = a.rem_euclid(two_pi);
    if y > std::f64::consts::PI {
        y - two_pi
    } else {
        y
    }
}

/// Ground plane in the anchored frame; `normal` is unit length and points up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    point: WorldPoint,
    normal: Vector3<f64>,
}

impl GroundPlane {
    pub fn new(point: WorldPoint, normal: Vector3<f64>) -> Result<Self, GeometryError> {
        let n = normal.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(GeometryError::NonFinite("plane normal"));
        }
        let mut normal = normal / n;
        if normal.z < 0.0 {
            normal = -normal;
        }
        if normal.z == 0.0 {
            return Err(GeometryError::NoIntersection);
        }
        Ok(Self { point, normal })
    }

    pub fn horizontal(z: f64) -> Self {
        Self {
            point: WorldPoint::new(0.0, 0.0, z),
            normal: Vector3::z(),
        }
    }

    pub fn point(&self) -> &WorldPoint {
        &self.point
    }

    pub fn normal(&self) -> &Vector3<f64> {
        &self.normal
    }

    pub fn signed_distance(&self, p: &WorldPoint) -> f64 {
        self.normal.dot(&(p - self.point))
    }

    /// Orthogonal projection onto the plane.
    pub fn project_point(&self, p: &WorldPoint) -> WorldPoint {
        p - self.normal * self.signed_distance(p)
    }
}

/// Projects an anchored world point to pixels.
pub fn project(intr: &Intrinsics, extr: &ExtrinsicCalibration, p: &WorldPoint) -> Result<PixelPoint, GeometryError> {
    let pc = extr.to_camera(p);
    if !(pc.z > MIN_DEPTH) {
        return Err(GeometryError::BehindCamera { depth: pc.z });
    }
    Ok(intr.pixel_of(&pc))
}

/// Camera position `-Rᵀ t` in the anchored frame.
pub fn camera_center(extr: &ExtrinsicCalibration) -> WorldPoint {
    extr.center()
}

/// Intersects the viewing ray of `px` with `plane`.
pub fn backproject_to_plane(
    intr: &Intrinsics,
    extr: &ExtrinsicCalibration,
    px: &PixelPoint,
    plane: &GroundPlane,
) -> Result<WorldPoint, GeometryError> {
    let dir = (extr.rotation().transpose() * intr.ray(px)).normalize();
    let denom = plane.normal().dot(&dir);
    if denom.abs() <= 1e-9 {
        return Err(GeometryError::NoIntersection);
    }
    let c = extr.center();
    let lambda = plane.normal().dot(&(plane.point() - c)) / denom;
    if !(lambda > 0.0) {
        return Err(GeometryError::BehindCamera { depth: lambda });
    }
    Ok(c + dir * lambda)
}

/// True iff `p` is in front of the camera and projects inside the image.
pub fn in_frustum(intr: &Intrinsics, extr: &ExtrinsicCalibration, p: &WorldPoint) -> bool {
    project(intr, extr, p).is_ok_and(|px| intr.contains(&px))
}

/// How raw UTM coordinates are shifted into the working frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Subtract the mean of the recording.
    #[default]
    Mean,
    /// Subtract an externally defined reference point. Whole-meter offsets
    /// round-trip bit-exactly for coordinates of UTM magnitude.
    Fixed([f64; 3]),
}

/// Subtracts the anchor from every raw point and returns the anchor used.
pub fn apply_anchor(
    points: &[Vector3<f64>],
    mode: AnchorMode,
) -> Result<(Vec<WorldPoint>, Vector3<f64>), GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    let anchor = match mode {
        AnchorMode::Mean => points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / points.len() as f64,
        AnchorMode::Fixed(a) => Vector3::from(a),
    };
    if anchor.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite("anchor"));
    }
    let anchored = points.iter().map(|p| WorldPoint::from(p - anchor)).collect();
    Ok((anchored, anchor))
}
