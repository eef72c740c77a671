//! Density-based clustering (DBSCAN) on 3D points.

use nalgebra::Vector3;

/// Cluster label per point; `None` marks noise.
///
/// A point is core if at least `min_pts` points (itself included) lie
/// within distance `eps`. Points are visited in index order, so clusters are
/// numbered by their lowest core index and a border point joins the
/// lowest-numbered cluster that reaches it.
pub fn dbscan(points: &[Vector3<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| (points[i] - points[j]).norm() <= eps).collect())
        .collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for seed in 0..n {
        if labels[seed].is_some() || !is_core[seed] {
            continue;
        }
        let cluster = next;
        next += 1;
        labels[seed] = Some(cluster);
        let mut queue = vec![seed];
        while let Some(p) = queue.pop() {
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(cluster);
                    if is_core[q] {
                        queue.push(q);
                    }
                }
            }
        }
    }
    labels
}
