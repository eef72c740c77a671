mod common;

use nalgebra::{Rotation3, Vector3};

use common::*;
use roadcal::geometry::{
    backproject_to_plane, in_frustum, project, ExtrinsicCalibration, GroundPlane, PixelPoint, WorldPoint,
};
use roadcal::grouping::{
    cluster_groups, outlier_ratio, overlap_ratio, pair_scores, passes, similarity_graph, GroupingParams,
    HypothesisGroup,
};
use roadcal::hypothesis::{build_hypothesis, Hypothesis, LocalizationSample, PrefilterParams, RejectionReason};
use roadcal::pipeline::RunOutput;
use roadcal::pnp::RansacParams;
use roadcal::refinement::{
    delta_p, evaluate, fit_ground_plane, merge_and_select, refine_correspondences, register, vehicle_footprint,
    RefinedPair, RefinementError, RegistrationSettings, Selection, VehicleDims,
};
use roadcal::synthgen::Scenario;
use roadcal::tracking::{BoundingBox, ObjectTrack};

fn target_hypotheses<'a>(sc: &Scenario, out: &'a RunOutput) -> Vec<&'a Hypothesis> {
    out.hypotheses
        .iter()
        .filter(|h| {
            let t = out.tracks.iter().find(|t| t.id == h.track_id).unwrap();
            is_target_track(sc, t)
        })
        .collect()
}

fn clean_run(seed: u64) -> (Scenario, RunOutput) {
    let (cfg, sc) = scenario(seed, 0.0, 2);
    let out = calibrate(&cfg, &sc).expect("clean scenario calibrates");
    (sc, out)
}

// ---- hypothesis ----

#[test]
fn target_track_becomes_hypothesis_near_path() {
    let (sc, out) = clean_run(0);
    let hyps = target_hypotheses(&sc, &out);
    assert!(hyps.len() >= 2);
    let pf = PrefilterParams::default();
    for h in hyps {
        let c = h.calib.center();
        let d = roadcal::hypothesis::distance_to_polyline(&c, &h.positions);
        assert!(d <= pf.d_thr, "camera {d} m from the path");
        let (dpos, drot) = pose_error(&sc, &h.calib);
        assert!(dpos < 1.0 && drot < 0.5, "{dpos} m, {drot}°");
    }
}

#[test]
fn parked_vehicle_and_short_tracks_are_rejected() {
    let (sc, out) = clean_run(0);
    let track = out.tracks.iter().find(|t| is_target_track(&sc, t)).unwrap();
    let anchor = out.anchor;
    let parked: Vec<LocalizationSample> = sc
        .localization
        .iter()
        .map(|s| LocalizationSample {
            position: sc.localization[0].position,
            ..*s
        })
        .collect();
    let r = build_hypothesis(
        track,
        &parked,
        &intr(),
        &anchor,
        &RansacParams::default(),
        &PrefilterParams::default(),
    );
    assert_eq!(r.unwrap_err(), RejectionReason::TrackTooShort3D);

    let three = ObjectTrack {
        id: track.id,
        detections: track.detections[..3].to_vec(),
    };
    let r = build_hypothesis(
        &three,
        &sc.localization,
        &intr(),
        &anchor,
        &RansacParams::default(),
        &PrefilterParams::default(),
    );
    assert_eq!(r.unwrap_err(), RejectionReason::TooFewPairs);
}

// ---- grouping ----

fn hyp(id: u64, positions: Vec<WorldPoint>, boxes: Vec<BoundingBox>, calib: ExtrinsicCalibration) -> Hypothesis {
    let pairs = positions
        .iter()
        .zip(&boxes)
        .enumerate()
        .map(|(k, (p, b))| {
            (
                LocalizationSample {
                    timestamp: id as f64 * 100.0 + k as f64,
                    position: p.coords + calib.anchor(),
                    roll: 0.0,
                    pitch: 0.0,
                    yaw: 0.0,
                },
                *b,
            )
        })
        .collect();
    let n = positions.len();
    Hypothesis {
        track_id: id,
        pairs,
        positions,
        calib,
        median_reproj_px: 0.0,
        inlier_mask: vec![true; n],
    }
}

fn pole_camera() -> ExtrinsicCalibration {
    ExtrinsicCalibration::looking(Vector3::new(0.0, 0.0, 8.0), 0.0, -0.3, 0.0, Vector3::zeros())
}

fn ground_points(cam: &ExtrinsicCalibration, pixels: &[(f64, f64)]) -> Vec<WorldPoint> {
    pixels
        .iter()
        .map(|&(u, v)| {
            backproject_to_plane(&intr(), cam, &PixelPoint::new(u, v), &GroundPlane::horizontal(0.0)).unwrap()
        })
        .collect()
}

#[test]
fn outlier_ratio_cases() {
    let cam = pole_camera();
    let px: Vec<(f64, f64)> = (0..10)
        .map(|k| {
            if k < 3 {
                (-300.0 - 50.0 * k as f64, 900.0)
            } else {
                (200.0 + 150.0 * k as f64, 900.0)
            }
        })
        .collect();
    let pts = ground_points(&cam, &px);
    let boxes = vec![BoundingBox::new(500.0, 500.0, 10.0, 10.0).unwrap(); 10];
    let h_i = hyp(1, pts.clone(), boxes.clone(), cam);
    let h_j = hyp(2, pts.clone(), boxes.clone(), cam);
    assert!((outlier_ratio(&h_i, &h_j, &intr()) - 0.3).abs() < 1e-12);

    let behind = ExtrinsicCalibration::looking(
        Vector3::new(0.0, 0.0, 8.0),
        std::f64::consts::PI,
        -0.3,
        0.0,
        Vector3::zeros(),
    );
    let h_b = hyp(3, pts, boxes, behind);
    assert_eq!(outlier_ratio(&h_i, &h_b, &intr()), 1.0);
}

#[test]
fn overlap_ratio_constructed() {
    let cam = pole_camera();
    let k_px = GroupingParams::default().k_px;
    let px: Vec<(f64, f64)> = (0..8).map(|k| (150.0 + 220.0 * k as f64, 800.0)).collect();
    let pts = ground_points(&cam, &px);
    let make_boxes = |gap: f64| -> Vec<BoundingBox> {
        px.iter()
            .enumerate()
            .map(|(k, &(u, v))| {
                if k % 2 == 0 {
                    BoundingBox::new(u, v, 10.0, 10.0).unwrap()
                } else {
                    // left edge `gap` to the right of the projected point
                    BoundingBox::from_corners(u + gap, v - 5.0, u + gap + 10.0, v + 5.0).unwrap()
                }
            })
            .collect()
    };
    let h_i = hyp(1, pts.clone(), make_boxes(0.0), cam);
    let near = hyp(2, pts.clone(), make_boxes(k_px / 2.0), cam);
    let far = hyp(3, pts.clone(), make_boxes(2.0 * k_px), cam);
    assert_eq!(overlap_ratio(&h_i, &near, &intr(), k_px), 1.0);
    assert_eq!(overlap_ratio(&h_i, &far, &intr(), k_px), 0.5);

    let away = ExtrinsicCalibration::looking(
        Vector3::new(0.0, 0.0, 8.0),
        std::f64::consts::PI,
        -0.3,
        0.0,
        Vector3::zeros(),
    );
    assert_eq!(
        overlap_ratio(&h_i, &hyp(4, pts, make_boxes(0.0), away), &intr(), k_px),
        0.0
    );
}

#[test]
fn self_overlap_at_least_inlier_ratio() {
    let (sc, out) = clean_run(1);
    for h in target_hypotheses(&sc, &out) {
        let inliers = h.inlier_mask.iter().filter(|&&b| b).count() as f64 / h.inlier_mask.len() as f64;
        assert!(overlap_ratio(h, h, &intr(), 20.0) >= inliers);
        // unclipped boxes let the vehicle center leave the image at the
        // borders; every other position is visible to its own camera
        let im = intr();
        for (p, (_, b)) in h.positions.iter().zip(&h.pairs) {
            let border = b.u < 5.0 || b.v < 5.0 || b.u > im.image_width - 5.0 || b.v > im.image_height - 5.0;
            assert!(border || in_frustum(&im, &h.calib, p), "box {b:?}");
        }
        assert!(outlier_ratio(h, h, &intr()) <= GroupingParams::default().max_r_out);
    }
}

#[test]
fn two_traversals_connect_and_rotated_copy_does_not() {
    let (sc, out) = clean_run(0);
    let gp = GroupingParams::default();
    let hyps: Vec<Hypothesis> = target_hypotheses(&sc, &out).into_iter().cloned().collect();
    let graph = similarity_graph(&hyps, &intr(), &gp);
    assert!(!graph.edges().is_empty());
    assert!(graph
        .edges()
        .iter()
        .all(|&(i, j)| hyps[i].pairs[0].0.timestamp != hyps[j].pairs[0].0.timestamp));

    let mut twisted = hyps[0].clone();
    let yaw = Rotation3::from_axis_angle(&Vector3::y_axis(), 30f64.to_radians()).into_inner();
    let c = twisted.calib.center().coords;
    let r = yaw * twisted.calib.rotation();
    twisted.calib = ExtrinsicCalibration::new(r, -(r * c), *twisted.calib.anchor()).unwrap();
    let s = pair_scores(&hyps[1], &twisted, &intr(), gp.k_px);
    assert!(s.r_sim < 0.92, "{s:?}");
    let own = roadcal::grouping::rotational_similarity(hyps[0].calib.rotation(), twisted.calib.rotation());
    assert!((own - (1.0 + 2.0 * 30f64.to_radians().cos()) / 3.0).abs() < 1e-9);
    assert!(!passes(&s, &gp));

    let single = similarity_graph(&hyps[..1], &intr(), &gp);
    assert!(single.edges().is_empty());
}

#[test]
fn cluster_examples() {
    let (sc, out) = clean_run(0);
    let gp = GroupingParams::default();
    let base = target_hypotheses(&sc, &out)[0].clone();
    let shifted = |id: u64, dx: f64, dt: f64| {
        let mut h = base.clone();
        h.track_id = id;
        let c = h.calib.center().coords + Vector3::new(dx, 0.0, 0.0);
        h.calib = ExtrinsicCalibration::from_center(*h.calib.rotation(), c, *h.calib.anchor()).unwrap();
        h.pairs.iter_mut().for_each(|p| p.0.timestamp += dt);
        h
    };
    let three = vec![shifted(1, 0.0, 0.0), shifted(2, 0.5, 100.0), shifted(3, 0.9, 200.0)];
    let graph = similarity_graph(&three, &intr(), &gp);
    let groups = cluster_groups(&graph, &three, &gp);
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].indices, vec![0, 1, 2]);

    // a rotated hypothesis has no edge and is dropped before clustering
    let mut lone = shifted(4, 0.2, 300.0);
    let r = Rotation3::from_axis_angle(&Vector3::z_axis(), 0.5).into_inner() * lone.calib.rotation();
    lone.calib = ExtrinsicCalibration::from_center(r, lone.calib.center().coords, *lone.calib.anchor()).unwrap();
    let hyps = vec![shifted(1, 0.0, 0.0), shifted(2, 0.5, 100.0), lone];
    let graph = similarity_graph(&hyps, &intr(), &gp);
    assert_eq!(graph.degree(2), 0);
    let groups = cluster_groups(&graph, &hyps, &gp);
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].indices, vec![0, 1]);
}

// ---- refinement ----

fn truth_pairs(sc: &Scenario, out: &RunOutput) -> (GroundPlane, Vec<RefinedPair>, ExtrinsicCalibration) {
    let truth = sc.truth.calibration.reanchored(out.anchor);
    let raw: Vec<_> = target_hypotheses(sc, out)
        .iter()
        .flat_map(|h| h.pairs.clone())
        .collect();
    let samples: Vec<_> = raw.iter().map(|p| p.0).collect();
    let plane = fit_ground_plane(&samples, &out.anchor).unwrap();
    let pairs = refine_correspondences(&raw, &truth, &VehicleDims::default(), &plane, &intr()).unwrap();
    (plane, pairs, truth)
}

/// The bottom of a box is set by the ground corner lowest in the image, so
/// that corner is the one matched.
#[test]
fn lowest_corner_is_selected() {
    let (sc, out) = clean_run(0);
    let truth = sc.truth.calibration.reanchored(out.anchor);
    let plane = GroundPlane::horizontal(sc.truth.plane.point().z + sc.truth.calibration.anchor().z - out.anchor.z);
    let mut checked = 0;
    for h in target_hypotheses(&sc, &out) {
        let pairs = refine_correspondences(&h.pairs, &truth, &VehicleDims::default(), &plane, &intr()).unwrap();
        for p in &pairs {
            let (sample, _) = h.pairs.iter().find(|(s, _)| s.timestamp == p.timestamp).unwrap();
            let corners = vehicle_footprint(sample, &VehicleDims::default(), &out.anchor);
            let v: Vec<f64> = corners.iter().map(|c| project(&intr(), &truth, c).unwrap().y).collect();
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
            if v[order[0]] - v[order[1]] > 1e-3 {
                assert_eq!(p.corner, order[0], "t={}", p.timestamp);
                checked += 1;
            }
        }
    }
    assert!(checked > 50);
}

#[test]
fn delta_p_cases() {
    let (sc, out) = clean_run(0);
    let (plane, pairs, truth) = truth_pairs(&sc, &out);
    for p in &pairs {
        assert!(delta_p(&truth, p, &plane, &intr()).unwrap() < 1e-3);
    }
    // move the anchor so that its ground point sits 0.5 m from the corner
    let p = pairs[pairs.len() / 2];
    let corner = plane.project_point(&p.world_corner);
    let along = plane.normal().cross(&Vector3::x()).normalize();
    let moved = corner + along * 0.5;
    let mut q = p;
    q.pixel_anchor = project(&intr(), &truth, &moved).unwrap();
    assert!((delta_p(&truth, &q, &plane, &intr()).unwrap() - 0.5).abs() < 1e-9);
    q.pixel_anchor = project(&intr(), &truth, &corner).unwrap();
    assert!(delta_p(&truth, &q, &plane, &intr()).unwrap() < 1e-9);
}

#[test]
fn registration_from_truth_and_perturbed() {
    let (sc, out) = clean_run(0);
    let (plane, pairs, truth) = truth_pairs(&sc, &out);
    let settings = RegistrationSettings::default();
    let at_truth = register(&pairs, &truth, &intr(), &plane, &settings).unwrap();
    assert!((at_truth.calib.center() - truth.center()).norm() < 1e-6);
    assert!(at_truth.calib.rotation_angle_to(&truth) < 1e-6);

    let init = truth.perturbed(
        &(Vector3::new(1.0, 1.0, 0.0).normalize() * 1f64.to_radians()),
        &Vector3::zeros(),
    );
    let init = ExtrinsicCalibration::from_center(
        *init.rotation(),
        init.center().coords + Vector3::new(0.3, -0.4, 0.0),
        *init.anchor(),
    )
    .unwrap();
    let before = evaluate(&init, &pairs, &plane, &intr()).unwrap().delta_p_mean;
    let outcome = register(&pairs, &init, &intr(), &plane, &settings).unwrap();
    let after = evaluate(
        &outcome.calib,
        &roadcal::refinement::reanchor(&pairs, &outcome.calib, &intr()),
        &plane,
        &intr(),
    )
    .unwrap()
    .delta_p_mean;
    assert!(after <= 0.05, "mean δ_p {before} -> {after}");
    assert!(!outcome.non_improvement);

    let err = register(&pairs[..3], &truth, &intr(), &plane, &settings).unwrap_err();
    assert!(matches!(err, RefinementError::InsufficientData { .. }));
}

fn target_group(sc: &Scenario, out: &RunOutput) -> HypothesisGroup {
    let members: Vec<Hypothesis> = target_hypotheses(sc, out).into_iter().cloned().collect();
    HypothesisGroup {
        indices: (0..members.len()).collect(),
        members,
    }
}

#[test]
fn merged_wins_on_clean_group() {
    let (sc, out) = clean_run(0);
    let group = target_group(&sc, &out);
    let r = merge_and_select(
        &[group],
        &VehicleDims::default(),
        &intr(),
        &out.anchor,
        &RegistrationSettings::default(),
    )
    .unwrap();
    let merged = r.candidates.iter().find(|c| c.1 == Selection::Merged).unwrap().2;
    let best_single = r
        .candidates
        .iter()
        .filter(|c| c.1 != Selection::Merged)
        .map(|c| c.2)
        .fold(f64::INFINITY, f64::min);
    assert!(merged <= best_single + 1e-9 || r.selection != Selection::Merged);
    assert!(r.delta_p_mean <= best_single.min(merged));
}

#[test]
fn corrupted_member_loses() {
    let (sc, out) = clean_run(0);
    let mut group = target_group(&sc, &out);
    assert!(group.members.len() >= 2);
    let bad = group.members[0].track_id;
    for (k, p) in group.members[0].pairs.iter_mut().enumerate() {
        let b = p.1;
        let off = if k % 2 == 0 { 25.0 } else { -25.0 };
        p.1 = BoundingBox::new(b.u + off, b.v + 40.0, b.w, b.h * 1.3).unwrap();
    }
    let r = merge_and_select(
        &[group],
        &VehicleDims::default(),
        &intr(),
        &out.anchor,
        &RegistrationSettings::default(),
    )
    .unwrap();
    assert_ne!(r.selection, Selection::SingleTrack(bad));
    let bad_score = r
        .candidates
        .iter()
        .find(|c| c.1 == Selection::SingleTrack(bad))
        .unwrap()
        .2;
    assert!(bad_score > r.delta_p_mean);
}

#[test]
fn no_groups_is_insufficient() {
    let err = merge_and_select(
        &[],
        &VehicleDims::default(),
        &intr(),
        &Vector3::zeros(),
        &RegistrationSettings::default(),
    )
    .unwrap_err();
    assert_eq!(err, RefinementError::InsufficientTraversals);
}
