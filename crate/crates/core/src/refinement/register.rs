//! Point-to-line registration on SE(3) by Levenberg-Marquardt.

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};

use super::{clamp_to_edge, RefinedPair, RefinementError, RegistrationSettings};
use crate::geometry::{backproject_to_plane, project, ExtrinsicCalibration, GroundPlane, Intrinsics};

const JACOBIAN_STEP: f64 = 1e-6;
const MAX_DAMPING_TRIES: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationOutcome {
    pub calib: ExtrinsicCalibration,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Set when no step could be accepted although the start was not
    /// stationary; `calib` is then the initial calibration.
    pub non_improvement: bool,
    /// Pairs contributing to the objective.
    pub used_pairs: usize,
}

/// Stacked residuals `backproject(b) − corner` for every pair, or `None` if
/// any pair's anchor can no longer be backprojected.
fn residuals(
    calib: &ExtrinsicCalibration,
    pairs: &[RefinedPair],
    intr: &Intrinsics,
    plane: &GroundPlane,
    freeze: bool,
) -> Option<DVector<f64>> {
    let mut r = DVector::zeros(3 * pairs.len());
    for (k, pair) in pairs.iter().enumerate() {
        let anchor = if freeze {
            pair.pixel_anchor
        } else {
            let px = project(intr, calib, &pair.world_corner).ok()?;
            clamp_to_edge(&px, &pair.bottom_edge)
        };
        let g = backproject_to_plane(intr, calib, &anchor, plane).ok()?;
        let d = g - plane.project_point(&pair.world_corner);
        r.fixed_rows_mut::<3>(3 * k).copy_from(&d);
    }
    Some(r)
}

fn step_of(x: &Vector6<f64>) -> (Vector3<f64>, Vector3<f64>) {
    (Vector3::new(x[0], x[1], x[2]), Vector3::new(x[3], x[4], x[5]))
}

/// Minimizes `Σ δ_p²` over rotation and translation starting at `init`.
///
/// Updates are `R' = exp(ω) R`, `t' = exp(ω) t + τ`, which makes the solver
/// invariant to a global shift of the world data. Pairs whose anchor cannot
/// be backprojected under `init` are left out.
pub fn register(
    pairs: &[RefinedPair],
    init: &ExtrinsicCalibration,
    intr: &Intrinsics,
    plane: &GroundPlane,
    settings: &RegistrationSettings,
) -> Result<RegistrationOutcome, RefinementError> {
    let freeze = settings.freeze_anchors;
    let usable: Vec<RefinedPair> = pairs
        .iter()
        .filter(|p| residuals(init, std::slice::from_ref(*p), intr, plane, freeze).is_some())
        .cloned()
        .collect();
    if usable.len() < 4 {
        return Err(RefinementError::InsufficientData {
            needed: 4,
            got: usable.len(),
        });
    }
    let cost_of = |c: &ExtrinsicCalibration| {
        residuals(c, &usable, intr, plane, freeze).map_or(f64::INFINITY, |r| r.norm_squared())
    };

    let mut calib = *init;
    let mut res = residuals(&calib, &usable, intr, plane, freeze).expect("usable pairs");
    let initial_cost = res.norm_squared();
    let mut cost = initial_cost;
    let mut lambda = 1e-3;
    let mut accepted = 0usize;
    let mut stationary = false;
    let mut iterations = 0;

    while iterations < settings.max_iterations {
        iterations += 1;
        let Some(jac) = jacobian(&calib, &usable, intr, plane, freeze) else {
            break;
        };
        let jtj: Matrix6<f64> = (jac.transpose() * &jac).fixed_view::<6, 6>(0, 0).into_owned();
        let g: Vector6<f64> = (jac.transpose() * &res).fixed_rows::<6>(0).into_owned();
        if g.norm() < settings.gradient_tol {
            stationary = true;
            break;
        }
        let mut moved = false;
        let mut tiny_step = false;
        for _ in 0..MAX_DAMPING_TRIES {
            // Identity damping keeps steps orthogonal to exact null directions
            // of J, such as a camera shift along its own x axis, which leaves
            // every bottom-edge row unchanged.
            let a = jtj + Matrix6::identity() * lambda;
            let Some(delta) = a.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            if delta.norm() < settings.step_tol {
                tiny_step = true;
                break;
            }
            let (w, t) = step_of(&delta);
            let cand = calib.perturbed(&w, &t);
            let cand_cost = cost_of(&cand);
            if cand_cost < cost {
                calib = cand;
                cost = cand_cost;
                res = residuals(&calib, &usable, intr, plane, freeze).expect("finite cost");
                lambda = (lambda / 10.0).max(1e-12);
                accepted += 1;
                moved = true;
                break;
            }
            lambda *= 10.0;
        }
        if tiny_step {
            stationary = true;
            break;
        }
        if !moved {
            break;
        }
    }

    // The solver descends Σ δ_p², which does not bound the mean; never hand
    // back a result with a worse mean than the start.
    let init_res = residuals(init, &usable, intr, plane, freeze).expect("usable pairs");
    if accepted > 0 && mean_norm(&res) > mean_norm(&init_res) {
        return Ok(RegistrationOutcome {
            calib: *init,
            initial_cost,
            final_cost: initial_cost,
            iterations,
            non_improvement: true,
            used_pairs: usable.len(),
        });
    }

    Ok(RegistrationOutcome {
        calib,
        initial_cost,
        final_cost: cost,
        iterations,
        non_improvement: accepted == 0 && !stationary,
        used_pairs: usable.len(),
    })
}

fn mean_norm(r: &DVector<f64>) -> f64 {
    let n = r.len() / 3;
    (0..n).map(|k| r.fixed_rows::<3>(3 * k).norm()).sum::<f64>() / n as f64
}

/// Central-difference Jacobian of the residuals w.r.t. `(ω, τ)`.
fn jacobian(
    calib: &ExtrinsicCalibration,
    pairs: &[RefinedPair],
    intr: &Intrinsics,
    plane: &GroundPlane,
    freeze: bool,
) -> Option<DMatrix<f64>> {
    let mut jac = DMatrix::zeros(3 * pairs.len(), 6);
    for k in 0..6 {
        let mut e = Vector6::zeros();
        e[k] = JACOBIAN_STEP;
        let (wp, tp) = step_of(&e);
        let plus = residuals(&calib.perturbed(&wp, &tp), pairs, intr, plane, freeze)?;
        let minus = residuals(&calib.perturbed(&-wp, &-tp), pairs, intr, plane, freeze)?;
        jac.set_column(k, &((plus - minus) / (2.0 * JACOBIAN_STEP)));
    }
    Some(jac)
}
