//! Shared scenario runners, independent oracles and invariant checks.
#![allow(dead_code)]

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;

use roadcal::geometry::{
    backproject_to_plane, project, ExtrinsicCalibration, GroundPlane, Intrinsics, PixelPoint, WorldPoint,
};
use roadcal::pipeline::{run_calibration, Detections, PipelineConfig, PipelineError, RunOutput};
use roadcal::synthgen::{generate, Scenario, ScenarioConfig, VehicleId};
use roadcal::tracking::{run_tracker, Frame, ObjectTrack, TrackerParams};

pub fn intr() -> Intrinsics {
    Intrinsics::new(1000.0, 1000.0, 960.0, 600.0, 1920.0, 1200.0).unwrap()
}

pub fn scenario(seed: u64, sigma_pos: f64, traversals: usize) -> (ScenarioConfig, Scenario) {
    let mut cfg = ScenarioConfig::intersection(seed);
    cfg.noise.sigma_pos = sigma_pos;
    cfg.target.traversal_count = traversals;
    let sc = generate(&cfg).expect("scenario generates");
    (cfg, sc)
}

pub fn calibrate(cfg: &ScenarioConfig, sc: &Scenario) -> Result<RunOutput, PipelineError> {
    let dets = Detections {
        frames: sc.frames.clone(),
        ids: None,
    };
    run_calibration(&PipelineConfig::default(), &dets, &sc.localization, &cfg.intrinsics)
}

/// True if most of the track's boxes were produced by the calibration vehicle.
pub fn is_target_track(sc: &Scenario, track: &ObjectTrack) -> bool {
    let hits = track
        .detections
        .iter()
        .filter(|d| sc.truth.identify(&sc.frames, d.timestamp, &d.bbox) == Some(VehicleId::Target))
        .count();
    2 * hits > track.detections.len()
}

pub fn members_are_target(sc: &Scenario, out: &RunOutput) -> bool {
    out.result.member_track_ids.iter().all(|id| {
        out.tracks
            .iter()
            .find(|t| t.id == *id)
            .is_some_and(|t| is_target_track(sc, t))
    })
}

/// Camera position error (m) and rotation error (deg) against the truth.
pub fn pose_error(sc: &Scenario, calib: &ExtrinsicCalibration) -> (f64, f64) {
    let truth = &sc.truth.calibration;
    (
        (calib.center_utm() - truth.center_utm()).norm(),
        calib.rotation_angle_to(truth).to_degrees(),
    )
}

pub fn random_camera<R: Rng>(rng: &mut R) -> ExtrinsicCalibration {
    ExtrinsicCalibration::looking(
        Vector3::new(
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(3.0..20.0),
        ),
        rng.random_range(-3.1..3.1),
        rng.random_range(-0.8..-0.15),
        rng.random_range(-0.1..0.1),
        Vector3::zeros(),
    )
}

pub fn random_plane<R: Rng>(rng: &mut R) -> GroundPlane {
    let n = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 1.0);
    GroundPlane::new(WorldPoint::new(0.0, 0.0, rng.random_range(-1.0..1.0)), n).unwrap()
}

pub fn random_frames<R: Rng>(rng: &mut R, n_frames: usize, max_boxes: usize) -> Vec<Frame> {
    (0..n_frames)
        .map(|k| Frame {
            timestamp: k as f64 * 0.1,
            boxes: (0..rng.random_range(0..=max_boxes))
                .map(|_| {
                    roadcal::tracking::BoundingBox::new(
                        rng.random_range(50.0..600.0),
                        rng.random_range(50.0..600.0),
                        rng.random_range(20.0..120.0),
                        rng.random_range(20.0..120.0),
                    )
                    .unwrap()
                })
                .collect(),
        })
        .collect()
}

// ---- invariant checks ----

pub fn check_orthonormal(c: &ExtrinsicCalibration) -> Result<(), String> {
    let r = c.rotation();
    let dev = (r.transpose() * r - Matrix3::identity()).norm();
    if dev < 1e-9 && r.determinant() > 0.0 {
        Ok(())
    } else {
        Err(format!("rotation deviates from SO(3) by {dev:e}"))
    }
}

/// Backprojects a random visible pixel onto the plane and round-trips the
/// resulting point through the camera.
pub fn check_round_trip<R: Rng>(rng: &mut R) -> Result<(), String> {
    let intr = intr();
    let cam = random_camera(rng);
    let plane = random_plane(rng);
    let px = PixelPoint::new(rng.random_range(0.0..1920.0), rng.random_range(0.0..1200.0));
    let Ok(p) = backproject_to_plane(&intr, &cam, &px, &plane) else {
        return Ok(());
    };
    if (p - cam.center()).norm() > 2000.0 {
        return Ok(());
    }
    let back = project(&intr, &cam, &p).map_err(|e| e.to_string())?;
    let q = backproject_to_plane(&intr, &cam, &back, &plane).map_err(|e| e.to_string())?;
    let err = (q - p).norm();
    if err <= 1e-6 {
        Ok(())
    } else {
        Err(format!("round trip moved the point by {err:e} m"))
    }
}

pub fn check_center<R: Rng>(rng: &mut R) -> Result<(), String> {
    let cam = random_camera(rng);
    let r = cam.rotation() * cam.center().coords + cam.translation();
    if r.norm() < 1e-9 {
        Ok(())
    } else {
        Err(format!("R c + t = {r:?}"))
    }
}

/// Projection with two consistently re-anchored frames. Raw coordinates are
/// of UTM magnitude on a 1/256 m grid and anchors are whole meters, so every
/// anchoring subtraction is exact.
pub fn check_anchor_invariance<R: Rng>(rng: &mut R) -> Result<(), String> {
    let intr = intr();
    let grid = |rng: &mut R, base: f64, span: i64| base + rng.random_range(-span * 256..span * 256) as f64 / 256.0;
    let cam_raw = Vector3::new(
        grid(rng, 574_000.0, 50),
        grid(rng, 5_365_000.0, 50),
        grid(rng, 490.0, 5),
    );
    let a = Vector3::new(
        574_000.0 + rng.random_range(-100..100) as f64,
        5_365_000.0 + rng.random_range(-100..100) as f64,
        480.0,
    );
    let b = Vector3::new(
        574_000.0 + rng.random_range(-100..100) as f64,
        5_365_000.0 + rng.random_range(-100..100) as f64,
        470.0,
    );
    let cam_a = ExtrinsicCalibration::looking(
        cam_raw - a,
        rng.random_range(-3.1..3.1),
        rng.random_range(-0.8..-0.15),
        0.0,
        a,
    );
    let cam_b = cam_a.reanchored(b);
    for _ in 0..20 {
        let p_raw = Vector3::new(
            grid(rng, 574_000.0, 150),
            grid(rng, 5_365_000.0, 150),
            grid(rng, 480.0, 2),
        );
        let pa = project(&intr, &cam_a, &WorldPoint::from(p_raw - a));
        let pb = project(&intr, &cam_b, &WorldPoint::from(p_raw - b));
        match (pa, pb) {
            (Ok(x), Ok(y)) if x == y => {}
            (Err(_), Err(_)) => {}
            (x, y) => return Err(format!("anchors disagree: {x:?} vs {y:?}")),
        }
    }
    Ok(())
}

pub fn check_r_sim(ri: &Matrix3<f64>, rj: &Matrix3<f64>) -> Result<(), String> {
    let a = roadcal::grouping::rotational_similarity(ri, rj);
    let b = roadcal::grouping::rotational_similarity(rj, ri);
    if (a - b).abs() > 1e-12 {
        return Err(format!("r_sim asymmetric: {a} vs {b}"));
    }
    if !(-1.0 / 3.0 - 1e-12..=1.0 + 1e-12).contains(&a) {
        return Err(format!("r_sim {a} out of bounds"));
    }
    Ok(())
}

/// Every input box lands in exactly one finalized track.
pub fn check_partition(frames: &[Frame]) -> Result<(), String> {
    let params = TrackerParams {
        min_track_detections: 1,
        ..TrackerParams::default()
    };
    let tracks = run_tracker(frames, &params).map_err(|e| e.to_string())?;
    let mut seen: Vec<Vec<usize>> = frames.iter().map(|f| vec![0; f.boxes.len()]).collect();
    for t in &tracks {
        for d in &t.detections {
            if d.extrapolated {
                return Err("extrapolated detection survived finalization".into());
            }
            let k = frames
                .iter()
                .position(|f| f.timestamp == d.timestamp)
                .ok_or("detection at unknown time")?;
            let j = frames[k]
                .boxes
                .iter()
                .enumerate()
                .position(|(j, b)| *b == d.bbox && seen[k][j] == 0)
                .ok_or("detection not among the frame's boxes")?;
            seen[k][j] += 1;
        }
    }
    if seen.iter().flatten().all(|&c| c == 1) {
        Ok(())
    } else {
        Err("some box is in no track".into())
    }
}

// ---- independent oracles ----

/// Minimum total over all injective row→column (or column→row) maps, summed
/// in row order.
pub fn brute_force_assignment(cost: &DMatrix<f64>) -> f64 {
    let (n, m) = cost.shape();
    if n > m {
        return brute_force_assignment(&cost.transpose());
    }
    fn go(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.nrows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..cost.ncols() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[(row, j)], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; m], 0.0, &mut best);
    best
}

/// Assignment total summed in the same row order as the oracle.
pub fn assignment_total(cost: &DMatrix<f64>, pairs: &[(usize, usize)]) -> f64 {
    if cost.nrows() > cost.ncols() {
        let mut t: Vec<(usize, usize)> = pairs.iter().map(|&(r, c)| (c, r)).collect();
        t.sort_unstable();
        return t.iter().fold(0.0, |acc, &(c, r)| acc + cost[(r, c)]);
    }
    pairs.iter().fold(0.0, |acc, &(r, c)| acc + cost[(r, c)])
}

/// Textbook DBSCAN built from the definitions: core points, density
/// connectivity through cores, border points attached to the reachable
/// cluster whose lowest core index is smallest.
pub fn reference_dbscan(points: &[Vector3<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let close = |i: usize, j: usize| (points[i] - points[j]).norm() <= eps;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| close(i, j)).count() >= min_pts)
        .collect();
    // union-find over core points
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut Vec<usize>, i: usize) -> usize {
        if p[i] != i {
            let r = find(p, p[i]);
            p[i] = r;
        }
        p[i]
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && close(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let root: Vec<Option<usize>> = (0..n).map(|i| core[i].then(|| find(&mut parent, i))).collect();
    (0..n)
        .map(|i| root[i].or_else(|| (0..n).filter(|&j| core[j] && close(i, j)).filter_map(|j| root[j]).min()))
        .collect()
}

/// Same partition up to renaming of cluster labels.
pub fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    a.len() == b.len()
        && (0..a.len()).all(|i| {
            (a[i].is_none() == b[i].is_none())
                && (0..a.len()).all(|j| a[i].is_none() || ((a[i] == a[j]) == (b[i] == b[j])))
        })
}

/// Unit quaternion from axis-angle via the half-angle formulas.
pub fn rodrigues_quaternion(axis: &Vector3<f64>, angle: f64) -> [f64; 4] {
    let a = axis.normalize();
    let (s, c) = (angle / 2.0).sin_cos();
    let q = [c, a.x * s, a.y * s, a.z * s];
    if q[0] < 0.0 {
        q.map(|v| -v)
    } else {
        q
    }
}

/// Rotation matrix from axis-angle, `I + sin θ K + (1 − cos θ) K²`.
pub fn rodrigues_matrix(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let a = axis.normalize();
    let k = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}
