//! EPnP with control points from the principal axes of the world points.
//!
//! Non-planar input uses the usual four control points and a 12-dimensional
//! kernel; (near-)planar input uses three in-plane control points and a
//! 9-dimensional kernel. Both produce candidate poses from the 1-, 2- and
//! 3-vector kernel approximations, each refined by Gauss-Newton on the betas,
//! and the candidate with the lowest reprojection RMS is polished by a short
//! Levenberg-Marquardt run on the reprojection error.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use super::{reprojection_rms, Correspondence, PnpError};
use crate::geometry::{nearest_rotation, ExtrinsicCalibration, Intrinsics};

/// σ₂/σ₁ below this is treated as collinear.
const COLLINEAR_RATIO: f64 = 1e-6;
/// σ₃/σ₁ below which the planar formulation is tried.
const PLANAR_RATIO: f64 = 0.1;
/// σ₃/σ₁ above which the general formulation is tried.
const GENERAL_RATIO: f64 = 1e-4;

const BETA_GN_ITERS: usize = 10;
const POLISH_ITERS: usize = 20;

/// Pose from ≥ 4 correspondences, world points in the anchored frame.
/// The returned calibration carries a zero anchor.
pub fn epnp(corrs: &[Correspondence], intr: &Intrinsics) -> Result<ExtrinsicCalibration, PnpError> {
    if corrs.len() < 4 {
        return Err(PnpError::InsufficientData {
            needed: 4,
            got: corrs.len(),
        });
    }
    if corrs
        .iter()
        .any(|c| !(c.world.coords.iter().all(|v| v.is_finite()) && c.pixel.x.is_finite() && c.pixel.y.is_finite()))
    {
        return Err(PnpError::NonFinite);
    }

    let pws: Vec<Vector3<f64>> = corrs.iter().map(|c| c.world.coords).collect();
    let n = pws.len() as f64;
    let centroid = pws.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cov = pws.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - centroid;
        a + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(cov);
    let mut axes: Vec<(f64, Vector3<f64>)> = (0..3)
        .map(|i| (eig.eigenvalues[i].max(0.0), eig.eigenvectors.column(i).into_owned()))
        .collect();
    axes.sort_by(|a, b| b.0.total_cmp(&a.0));
    let sigma: Vec<f64> = axes.iter().map(|a| a.0.sqrt()).collect();
    if !(sigma[0] > 0.0) || sigma[1] / sigma[0] < COLLINEAR_RATIO {
        return Err(PnpError::Degenerate);
    }

    let uv: Vec<(f64, f64)> = corrs.iter().map(|c| (c.pixel.x, c.pixel.y)).collect();
    let planarity = sigma[2] / sigma[0];
    let mut candidates = Vec::new();
    if planarity >= GENERAL_RATIO {
        let ctrl: Vec<Vector3<f64>> = std::iter::once(centroid)
            .chain((0..3).map(|i| centroid + axes[i].1 * sigma[i]))
            .collect();
        candidates.extend(solve_with_controls(&pws, &uv, intr, &ctrl, &axes, &sigma));
    }
    if planarity < PLANAR_RATIO {
        let ctrl: Vec<Vector3<f64>> = std::iter::once(centroid)
            .chain((0..2).map(|i| centroid + axes[i].1 * sigma[i]))
            .collect();
        candidates.extend(solve_with_controls(&pws, &uv, intr, &ctrl, &axes, &sigma));
    }

    let best = candidates
        .into_iter()
        .filter_map(|(r, t)| ExtrinsicCalibration::new(r, t, Vector3::zeros()).ok())
        .map(|c| (reprojection_rms(&c, intr, corrs), c))
        .filter(|(e, _)| e.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .ok_or(PnpError::Degenerate)?;

    Ok(polish(best.1, best.0, intr, corrs))
}

/// Runs the kernel-based solve for 3 or 4 control points. Returns candidate
/// `(R, t)` pairs.
fn solve_with_controls(
    pws: &[Vector3<f64>],
    uv: &[(f64, f64)],
    intr: &Intrinsics,
    ctrl: &[Vector3<f64>],
    axes: &[(f64, Vector3<f64>)],
    sigma: &[f64],
) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let nc = ctrl.len();
    let dim = 3 * nc;
    let c0 = ctrl[0];

    // Barycentric coordinates; along axis i the weight is the projection
    // scaled by 1/σᵢ. Off-plane components are dropped in the planar case.
    let alphas: Vec<Vec<f64>> = pws
        .iter()
        .map(|p| {
            let d = p - c0;
            let mut a = vec![0.0; nc];
            for i in 1..nc {
                a[i] = axes[i - 1].1.dot(&d) / sigma[i - 1];
            }
            a[0] = 1.0 - a[1..].iter().sum::<f64>();
            a
        })
        .collect();

    let mut mtm = DMatrix::<f64>::zeros(dim, dim);
    let mut row_u = DVector::<f64>::zeros(dim);
    let mut row_v = DVector::<f64>::zeros(dim);
    for (a, &(u, v)) in alphas.iter().zip(uv) {
        row_u.fill(0.0);
        row_v.fill(0.0);
        for j in 0..nc {
            row_u[3 * j] = a[j] * intr.fx;
            row_u[3 * j + 2] = a[j] * (intr.cx - u);
            row_v[3 * j + 1] = a[j] * intr.fy;
            row_v[3 * j + 2] = a[j] * (intr.cy - v);
        }
        mtm.ger(1.0, &row_u, &row_u, 1.0);
        mtm.ger(1.0, &row_v, &row_v, 1.0);
    }
    let eig = mtm.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let kernel: Vec<DVector<f64>> = order
        .iter()
        .take(nc.min(4))
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    let pairs: Vec<(usize, usize)> = (0..nc).flat_map(|a| (a + 1..nc).map(move |b| (a, b))).collect();
    let nk = kernel.len();
    // Quadratic terms in the order b00, b01, b11, b02, b12, b22, b03, b13, b23, b33.
    let terms: Vec<(usize, usize)> = (0..nk).flat_map(|j| (0..=j).map(move |i| (i, j))).collect();
    let l = DMatrix::from_fn(pairs.len(), terms.len(), |r, c| {
        let (a, b) = pairs[r];
        let (i, j) = terms[c];
        let di = ctrl_diff(&kernel[i], a, b);
        let dj = ctrl_diff(&kernel[j], a, b);
        if i == j {
            di.dot(&di)
        } else {
            2.0 * di.dot(&dj)
        }
    });
    let rho = DVector::from_iterator(
        pairs.len(),
        pairs.iter().map(|&(a, b)| (ctrl[a] - ctrl[b]).norm_squared()),
    );
    let term_index = |i: usize, j: usize| terms.iter().position(|&t| t == (i.min(j), i.max(j)));

    let mut betas: Vec<Vec<f64>> = Vec::new();
    // N = 1: b00, b01, b02, b03 (linear in β0·βk).
    {
        let cols: Vec<usize> = (0..nk).filter_map(|k| term_index(0, k)).collect();
        if let Some(x) = lstsq(&l, &cols, &rho) {
            let mut b = vec![0.0; nk];
            let s = x[0].abs().sqrt();
            if s > 0.0 {
                b[0] = s;
                for k in 1..nk {
                    b[k] = x[k] / s;
                }
                if x[0] < 0.0 {
                    b.iter_mut().for_each(|v| *v = -*v);
                }
                betas.push(gauss_newton_betas(&l, &rho, &terms, b.clone(), 1));
                betas.push(gauss_newton_betas(&l, &rho, &terms, b, nk));
            }
        }
    }
    // N = 2: b00, b01, b11.
    if nk >= 2 {
        let cols = [0usize, 1, 2];
        if let Some(x) = lstsq(&l, &cols, &rho) {
            let mut b = vec![0.0; nk];
            if x[0] < 0.0 {
                b[0] = (-x[0]).sqrt();
                b[1] = if x[2] > 0.0 { 0.0 } else { (-x[2]).sqrt() };
            } else {
                b[0] = x[0].sqrt();
                b[1] = if x[2] < 0.0 { 0.0 } else { x[2].sqrt() };
            }
            if x[1] < 0.0 {
                b[0] = -b[0];
            }
            betas.push(gauss_newton_betas(&l, &rho, &terms, b.clone(), 2));
            betas.push(gauss_newton_betas(&l, &rho, &terms, b, nk));
        }
    }
    // N = 3: b00, b01, b11, b02, b12 (needs ≥ 5 rows, i.e. four controls).
    if nk >= 3 && pairs.len() >= 5 {
        let cols = [0usize, 1, 2, 3, 4];
        if let Some(x) = lstsq(&l, &cols, &rho) {
            let mut b = vec![0.0; nk];
            if x[0] < 0.0 {
                b[0] = (-x[0]).sqrt();
                b[1] = if x[2] > 0.0 { 0.0 } else { (-x[2]).sqrt() };
            } else {
                b[0] = x[0].sqrt();
                b[1] = if x[2] < 0.0 { 0.0 } else { x[2].sqrt() };
            }
            if x[1] < 0.0 {
                b[0] = -b[0];
            }
            if b[0] != 0.0 {
                b[2] = x[3] / b[0];
            }
            betas.push(gauss_newton_betas(&l, &rho, &terms, b, nk));
        }
    }

    betas
        .iter()
        .filter(|b| b.iter().all(|v| v.is_finite()))
        .filter_map(|b| pose_from_betas(b, &kernel, &alphas, pws))
        .collect()
}

fn ctrl_diff(v: &DVector<f64>, a: usize, b: usize) -> Vector3<f64> {
    Vector3::new(
        v[3 * a] - v[3 * b],
        v[3 * a + 1] - v[3 * b + 1],
        v[3 * a + 2] - v[3 * b + 2],
    )
}

fn lstsq(l: &DMatrix<f64>, cols: &[usize], rho: &DVector<f64>) -> Option<DVector<f64>> {
    if cols.iter().any(|&c| c >= l.ncols()) {
        return None;
    }
    let sub = DMatrix::from_fn(l.nrows(), cols.len(), |r, c| l[(r, cols[c])]);
    sub.svd(true, true).solve(rho, 1e-12).ok()
}

/// Gauss-Newton on `L·β̃(β) = ρ`, refining only the first `active` betas.
fn gauss_newton_betas(
    l: &DMatrix<f64>,
    rho: &DVector<f64>,
    terms: &[(usize, usize)],
    mut beta: Vec<f64>,
    active: usize,
) -> Vec<f64> {
    let active = active.min(beta.len());
    let residual = |beta: &[f64]| -> DVector<f64> {
        DVector::from_fn(l.nrows(), |r, _| {
            rho[r]
                - terms
                    .iter()
                    .enumerate()
                    .map(|(c, &(i, j))| l[(r, c)] * beta[i] * beta[j])
                    .sum::<f64>()
        })
    };
    for _ in 0..BETA_GN_ITERS {
        let res = residual(&beta);
        let jac = DMatrix::from_fn(l.nrows(), active, |r, k| {
            terms
                .iter()
                .enumerate()
                .map(|(c, &(i, j))| {
                    let d = match (i == k, j == k) {
                        (true, true) => 2.0 * beta[k],
                        (true, false) => beta[j],
                        (false, true) => beta[i],
                        (false, false) => 0.0,
                    };
                    l[(r, c)] * d
                })
                .sum::<f64>()
        });
        let Ok(step) = jac.svd(true, true).solve(&res, 1e-14) else {
            break;
        };
        let candidate: Vec<f64> = beta
            .iter()
            .enumerate()
            .map(|(k, b)| if k < active { b + step[k] } else { *b })
            .collect();
        if residual(&candidate).norm() >= res.norm() {
            break;
        }
        beta = candidate;
    }
    beta
}

fn pose_from_betas(
    beta: &[f64],
    kernel: &[DVector<f64>],
    alphas: &[Vec<f64>],
    pws: &[Vector3<f64>],
) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let dim = kernel[0].len();
    let mut ccs = DVector::<f64>::zeros(dim);
    for (b, v) in beta.iter().zip(kernel) {
        ccs.axpy(*b, v, 1.0);
    }
    let mut pcs: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| {
            a.iter()
                .enumerate()
                .fold(Vector3::zeros(), |acc, (j, w)| acc + ctrl_point(&ccs, j) * *w)
        })
        .collect();
    let mean_depth = pcs.iter().map(|p| p.z).sum::<f64>() / pcs.len() as f64;
    if mean_depth < 0.0 {
        pcs.iter_mut().for_each(|p| *p = -*p);
    }
    procrustes(pws, &pcs)
}

fn ctrl_point(ccs: &DVector<f64>, j: usize) -> Vector3<f64> {
    Vector3::new(ccs[3 * j], ccs[3 * j + 1], ccs[3 * j + 2])
}

/// Rigid `(R, t)` minimizing `Σ‖R pw + t − pc‖²`.
fn procrustes(pws: &[Vector3<f64>], pcs: &[Vector3<f64>]) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let n = pws.len() as f64;
    let cw = pws.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cc = pcs.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let h = pws
        .iter()
        .zip(pcs)
        .fold(Matrix3::zeros(), |a, (pw, pc)| a + (pc - cc) * (pw - cw).transpose());
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)) * v_t;
    }
    let r = nearest_rotation(&r);
    let t = cc - r * cw;
    (r.iter().chain(t.iter()).all(|v| v.is_finite())).then_some((r, t))
}

/// Levenberg-Marquardt on the pixel reprojection error.
fn polish(
    mut calib: ExtrinsicCalibration,
    mut rms: f64,
    intr: &Intrinsics,
    corrs: &[Correspondence],
) -> ExtrinsicCalibration {
    let mut lambda = 1e-6;
    for _ in 0..POLISH_ITERS {
        let mut jtj = nalgebra::Matrix6::<f64>::zeros();
        let mut jtr = nalgebra::Vector6::<f64>::zeros();
        for c in corrs {
            let pc = calib.to_camera(&c.world);
            if pc.z <= 0.0 {
                return calib;
            }
            let (x, y, z) = (pc.x, pc.y, pc.z);
            let px = intr.pixel_of(&pc);
            let r = [px.x - c.pixel.x, px.y - c.pixel.y];
            let du = Vector3::new(intr.fx / z, 0.0, -intr.fx * x / (z * z));
            let dv = Vector3::new(0.0, intr.fy / z, -intr.fy * y / (z * z));
            // d p_c / d ω = -[p_c]×, d p_c / d τ = I
            let skew = -pc.cross_matrix();
            for (d, res) in [(du, r[0]), (dv, r[1])] {
                let jw = skew.transpose() * d;
                let row = nalgebra::Vector6::new(jw.x, jw.y, jw.z, d.x, d.y, d.z);
                jtj += row * row.transpose();
                jtr += row * res;
            }
        }
        if jtr.norm() < 1e-14 {
            break;
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let cand = calib.perturbed(
                &Vector3::new(step[0], step[1], step[2]),
                &Vector3::new(step[3], step[4], step[5]),
            );
            let cand_rms = reprojection_rms(&cand, intr, corrs);
            if cand_rms.is_finite() && cand_rms <= rms {
                let converged = rms - cand_rms <= 1e-15 * rms.max(1e-300);
                calib = cand;
                rms = cand_rms;
                lambda = (lambda * 0.1).max(1e-12);
                improved = !converged;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    calib
}
