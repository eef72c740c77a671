//! Pairwise hypothesis similarity, the similarity graph, and clustering of
//! connected hypotheses by camera position.

mod dbscan;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{in_frustum, project, Intrinsics};
use crate::hypothesis::Hypothesis;

pub use dbscan::dbscan;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingParams {
    pub max_r_out: f64,
    pub min_r_ov: f64,
    pub min_r_sim: f64,
    pub k_px: f64,
    pub dbscan_eps_m: f64,
    pub dbscan_min_pts: usize,
    /// Member tracks separated by less than this (seconds) count as the same
    /// traversal; a group needs at least two traversals.
    pub min_traversal_gap_s: f64,
}

impl Default for GroupingParams {
    fn default() -> Self {
        Self {
            max_r_out: 0.1,
            min_r_ov: 0.7,
            min_r_sim: 0.99,
            k_px: 20.0,
            dbscan_eps_m: 3.0,
            dbscan_min_pts: 2,
            min_traversal_gap_s: 5.0,
        }
    }
}

impl GroupingParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.max_r_out) || !(0.0..=1.0).contains(&self.min_r_ov) {
            return Err("grouping ratios must lie in [0, 1]".into());
        }
        if !(-1.0 / 3.0..=1.0).contains(&self.min_r_sim) {
            return Err("grouping.min_r_sim must lie in [-1/3, 1]".into());
        }
        if !(self.k_px > 0.0) || !(self.dbscan_eps_m > 0.0) {
            return Err("grouping.k_px and grouping.dbscan_eps_m must be positive".into());
        }
        if self.dbscan_min_pts < 1 {
            return Err("grouping.dbscan_min_pts must be at least 1".into());
        }
        if !(self.min_traversal_gap_s >= 0.0) {
            return Err("grouping.min_traversal_gap_s must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    pub r_out: f64,
    pub r_ov: f64,
    pub r_sim: f64,
}

/// Fraction of `h_i`'s positions outside the frustum of `h_j`'s camera.
pub fn outlier_ratio(h_i: &Hypothesis, h_j: &Hypothesis, intr: &Intrinsics) -> f64 {
    let calib = h_j.calib.reanchored(*h_i.calib.anchor());
    let outside = h_i.positions.iter().filter(|p| !in_frustum(intr, &calib, p)).count();
    outside as f64 / h_i.positions.len() as f64
}

/// Fraction of `h_i`'s positions that, projected with `h_j`'s camera, land
/// within `k_px` of some box of `h_j`.
pub fn overlap_ratio(h_i: &Hypothesis, h_j: &Hypothesis, intr: &Intrinsics, k_px: f64) -> f64 {
    let calib = h_j.calib.reanchored(*h_i.calib.anchor());
    let near = h_i
        .positions
        .iter()
        .filter(|p| project(intr, &calib, p).is_ok_and(|px| h_j.boxes().any(|b| b.distance_to(&px) <= k_px)))
        .count();
    near as f64 / h_i.positions.len() as f64
}

/// `tr(R_jᵀ R_i) / 3`.
pub fn rotational_similarity(r_i: &Matrix3<f64>, r_j: &Matrix3<f64>) -> f64 {
    (r_j.transpose() * r_i).trace() / 3.0
}

/// Symmetrized scores: worst-case `r_out` and `r_ov` over both directions.
pub fn pair_scores(h_i: &Hypothesis, h_j: &Hypothesis, intr: &Intrinsics, k_px: f64) -> SimilarityScores {
    SimilarityScores {
        r_out: outlier_ratio(h_i, h_j, intr).max(outlier_ratio(h_j, h_i, intr)),
        r_ov: overlap_ratio(h_i, h_j, intr, k_px).min(overlap_ratio(h_j, h_i, intr, k_px)),
        r_sim: rotational_similarity(h_i.calib.rotation(), h_j.calib.rotation()),
    }
}

/// Undirected graph over hypothesis indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    adjacency: Vec<Vec<usize>>,
    /// Scores of every evaluated pair `(i, j)` with `i < j`.
    pub scores: Vec<((usize, usize), SimilarityScores)>,
}

impl SimilarityGraph {
    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].contains(&j)
    }

    /// Edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<_> = self
            .adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect();
        out.sort_unstable();
        out
    }
}

pub fn passes(scores: &SimilarityScores, gp: &GroupingParams) -> bool {
    scores.r_out <= gp.max_r_out && scores.r_ov >= gp.min_r_ov && scores.r_sim >= gp.min_r_sim
}

pub fn similarity_graph(hyps: &[Hypothesis], intr: &Intrinsics, gp: &GroupingParams) -> SimilarityGraph {
    let n = hyps.len();
    let mut adjacency = vec![Vec::new(); n];
    let mut scores = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let s = pair_scores(&hyps[i], &hyps[j], intr, gp.k_px);
            if passes(&s, gp) {
                adjacency[i].push(j);
                adjacency[j].push(i);
            }
            scores.push(((i, j), s));
        }
    }
    SimilarityGraph { adjacency, scores }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisGroup {
    /// Indices into the hypothesis list the graph was built from.
    pub indices: Vec<usize>,
    pub members: Vec<Hypothesis>,
}

/// Number of distinct traversals among the members: member time spans closer
/// than `min_gap` seconds are merged.
pub fn traversal_count(members: &[&Hypothesis], min_gap: f64) -> usize {
    let mut spans: Vec<(f64, f64)> = members
        .iter()
        .map(|h| (h.pairs[0].0.timestamp, h.pairs[h.pairs.len() - 1].0.timestamp))
        .collect();
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut count = 0;
    let mut end = f64::NEG_INFINITY;
    for (s, e) in spans {
        if count == 0 || s - end >= min_gap {
            count += 1;
        }
        end = end.max(e);
    }
    count
}

/// Drops unconnected hypotheses, clusters the rest by camera center and
/// keeps clusters whose members are graph-connected within the cluster and
/// cover at least two traversals.
pub fn cluster_groups(graph: &SimilarityGraph, hyps: &[Hypothesis], gp: &GroupingParams) -> Vec<HypothesisGroup> {
    let survivors: Vec<usize> = (0..hyps.len()).filter(|&i| graph.degree(i) > 0).collect();
    if survivors.is_empty() {
        return Vec::new();
    }
    let anchor = *hyps[survivors[0]].calib.anchor();
    let centers: Vec<Vector3<f64>> = survivors
        .iter()
        .map(|&i| hyps[i].calib.reanchored(anchor).center().coords)
        .collect();
    let labels = dbscan(&centers, gp.dbscan_eps_m, gp.dbscan_min_pts);
    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let min_size = gp.dbscan_min_pts.max(2);

    let mut groups = Vec::new();
    for c in 0..n_clusters {
        let mut members: Vec<usize> = survivors
            .iter()
            .zip(&labels)
            .filter(|(_, l)| **l == Some(c))
            .map(|(&i, _)| i)
            .collect();
        loop {
            let before = members.len();
            let snapshot = members.clone();
            members.retain(|&i| snapshot.iter().any(|&j| j != i && graph.has_edge(i, j)));
            if members.len() == before {
                break;
            }
        }
        if members.len() < min_size {
            continue;
        }
        let refs: Vec<&Hypothesis> = members.iter().map(|&i| &hyps[i]).collect();
        if traversal_count(&refs, gp.min_traversal_gap_s) < 2 {
            continue;
        }
        groups.push(HypothesisGroup {
            members: members.iter().map(|&i| hyps[i].clone()).collect(),
            indices: members,
        });
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    #[test]
    fn rotational_similarity_values() {
        let r = Rotation3::from_euler_angles(0.1, 0.2, 0.3).into_inner();
        assert!((rotational_similarity(&r, &r) - 1.0).abs() < 1e-12);
        let flip = Rotation3::from_axis_angle(&Vector3::y_axis(), std::f64::consts::PI).into_inner() * r;
        assert!((rotational_similarity(&flip, &r) + 1.0 / 3.0).abs() < 1e-12);
        let ten = Rotation3::from_axis_angle(&Vector3::x_axis(), 10f64.to_radians()).into_inner() * r;
        let expected = (1.0 + 2.0 * 10f64.to_radians().cos()) / 3.0;
        assert!((rotational_similarity(&ten, &r) - expected).abs() < 1e-12);
        assert!((expected - 0.98985).abs() < 1e-4);
    }

    #[test]
    fn traversal_gap_merging() {
        use crate::hypothesis::LocalizationSample;
        use crate::tracking::BoundingBox;
        let mk = |t0: f64, t1: f64| {
            let s = |t| LocalizationSample {
                timestamp: t,
                position: Vector3::zeros(),
                roll: 0.0,
                pitch: 0.0,
                yaw: 0.0,
            };
            let b = BoundingBox::new(1.0, 1.0, 1.0, 1.0).unwrap();
            Hypothesis {
                track_id: 0,
                pairs: vec![(s(t0), b), (s(t1), b)],
                positions: vec![],
                calib: crate::geometry::ExtrinsicCalibration::identity(),
                median_reproj_px: 0.0,
                inlier_mask: vec![],
            }
        };
        let (a, b, c) = (mk(0.0, 10.0), mk(11.0, 20.0), mk(60.0, 70.0));
        assert_eq!(traversal_count(&[&a, &b], 5.0), 1);
        assert_eq!(traversal_count(&[&a, &b, &c], 5.0), 2);
        assert_eq!(traversal_count(&[&c, &a], 5.0), 2);
    }
}
