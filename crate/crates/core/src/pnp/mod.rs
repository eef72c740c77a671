//! Pose from 2D-3D correspondences: EPnP, reprojection errors and a RANSAC
//! wrapper.

mod epnp;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ExtrinsicCalibration, Intrinsics, PixelPoint, WorldPoint};
use crate::stats::median;

pub use epnp::epnp;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("degenerate (collinear) world point configuration")]
    Degenerate,
    #[error("non-finite correspondence")]
    NonFinite,
    #[error("no sample reached the minimum inlier ratio (best {best_ratio:.3})")]
    NoConsensus { best_ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub world: WorldPoint,
    pub pixel: PixelPoint,
    pub timestamp: f64,
}

impl Correspondence {
    pub fn new(world: WorldPoint, pixel: PixelPoint, timestamp: f64) -> Self {
        Self {
            world,
            pixel,
            timestamp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacParams {
    pub max_iterations: usize,
    pub inlier_threshold_px: f64,
    pub min_inlier_ratio: f64,
    pub rng_seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            inlier_threshold_px: 8.0,
            min_inlier_ratio: 0.5,
            rng_seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_iterations < 1 {
            return Err("ransac.max_iterations must be at least 1".into());
        }
        if !(self.inlier_threshold_px > 0.0) {
            return Err("ransac.inlier_threshold_px must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.min_inlier_ratio) {
            return Err("ransac.min_inlier_ratio must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Result of [`ransac_pnp`].
#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub calib: ExtrinsicCalibration,
    /// Consensus set of the winning minimal sample.
    pub inliers: Vec<bool>,
    /// Median reprojection error of `calib` over `inliers`, pixels.
    pub median_error_px: f64,
    /// Model fitted to the winning minimal sample, before the refit.
    pub minimal_model: ExtrinsicCalibration,
    /// Iterations actually run.
    pub iterations: usize,
}

impl RansacOutcome {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Pixel distance between each observed pixel and the projection of its
/// world point; `+∞` for points behind the camera.
pub fn reprojection_errors(extr: &ExtrinsicCalibration, intr: &Intrinsics, corrs: &[Correspondence]) -> Vec<f64> {
    corrs
        .iter()
        .map(|c| match crate::geometry::project(intr, extr, &c.world) {
            Ok(px) => (px - c.pixel).norm(),
            Err(_) => f64::INFINITY,
        })
        .collect()
}

pub(crate) fn reprojection_rms(extr: &ExtrinsicCalibration, intr: &Intrinsics, corrs: &[Correspondence]) -> f64 {
    let errs = reprojection_errors(extr, intr, corrs);
    (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt()
}

const CONFIDENCE: f64 = 0.999;
const MIN_ITERATIONS: usize = 50;

/// RANSAC over minimal 4-point EPnP samples, refit on the consensus set.
///
/// The winner is the sample with the most inliers, earliest iteration on
/// ties. Sampling stops early once the adaptive iteration bound for 99.9 %
/// confidence is reached (never before 50 iterations). The refit replaces the
/// minimal model only if it does not increase the median inlier error.
pub fn ransac_pnp(
    corrs: &[Correspondence],
    intr: &Intrinsics,
    params: &RansacParams,
) -> Result<RansacOutcome, PnpError> {
    let n = corrs.len();
    if n < 4 {
        return Err(PnpError::InsufficientData { needed: 4, got: n });
    }
    let thr = params.inlier_threshold_px;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut best: Option<(usize, ExtrinsicCalibration, Vec<bool>)> = None;
    let mut bound = params.max_iterations;
    let mut iterations = 0;
    let mut subset = Vec::with_capacity(4);

    while iterations < bound.min(params.max_iterations) {
        iterations += 1;
        subset.clear();
        subset.extend(sample(&mut rng, n, 4).into_iter().map(|i| corrs[i]));
        let Ok(model) = epnp(&subset, intr) else {
            continue;
        };
        let mask: Vec<bool> = reprojection_errors(&model, intr, corrs)
            .into_iter()
            .map(|e| e <= thr)
            .collect();
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _, _)| count > *c) {
            let w = count as f64 / n as f64;
            let p_good = w.powi(4);
            bound = if p_good >= 1.0 {
                MIN_ITERATIONS
            } else if p_good <= 0.0 {
                params.max_iterations
            } else {
                let k = ((1.0 - CONFIDENCE).ln() / (1.0 - p_good).ln()).ceil();
                (k.min(params.max_iterations as f64) as usize).max(MIN_ITERATIONS)
            };
            best = Some((count, model, mask));
        }
    }

    let Some((count, minimal_model, inliers)) = best else {
        return Err(PnpError::NoConsensus { best_ratio: 0.0 });
    };
    let ratio = count as f64 / n as f64;
    if ratio < params.min_inlier_ratio || count < 4 {
        return Err(PnpError::NoConsensus { best_ratio: ratio });
    }

    let inlier_corrs: Vec<Correspondence> = corrs
        .iter()
        .zip(&inliers)
        .filter(|(_, &m)| m)
        .map(|(c, _)| *c)
        .collect();
    let raw_median = median(&reprojection_errors(&minimal_model, intr, &inlier_corrs));
    let (calib, median_error_px) = match epnp(&inlier_corrs, intr) {
        Ok(refit) => {
            let refit_median = median(&reprojection_errors(&refit, intr, &inlier_corrs));
            if refit_median <= raw_median {
                (refit, refit_median)
            } else {
                (minimal_model, raw_median)
            }
        }
        Err(_) => (minimal_model, raw_median),
    };

    Ok(RansacOutcome {
        calib,
        inliers,
        median_error_px,
        minimal_model,
        iterations,
    })
}
