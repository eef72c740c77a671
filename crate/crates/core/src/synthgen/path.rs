//! Planar driving paths made of straight segments joined by circular arcs.

use nalgebra::Vector2;

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Line {
        from: Vector2<f64>,
        dir: Vector2<f64>,
        len: f64,
    },
    Arc {
        center: Vector2<f64>,
        radius: f64,
        start_angle: f64,
        /// Signed sweep, positive counter-clockwise.
        sweep: f64,
    },
}

impl Piece {
    fn length(&self) -> f64 {
        match self {
            Piece::Line { len, .. } => *len,
            Piece::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Position and heading at arc length `s` into the piece.
    fn at(&self, s: f64) -> (Vector2<f64>, f64) {
        match self {
            Piece::Line { from, dir, .. } => (from + dir * s, dir.y.atan2(dir.x)),
            Piece::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let a = start_angle + sweep.signum() * s / radius;
                let pos = center + Vector2::new(a.cos(), a.sin()) * *radius;
                let heading = a + sweep.signum() * std::f64::consts::FRAC_PI_2;
                (pos, heading)
            }
        }
    }
}

/// Arc-length parameterized path.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pieces: Vec<Piece>,
    offsets: Vec<f64>,
    length: f64,
}

impl Path {
    /// Polyline through `waypoints` with every corner rounded by an arc of
    /// `radius` (shrunk if the adjacent segments are too short). A closed
    /// path returns to the first waypoint.
    pub fn with_fillets(waypoints: &[Vector2<f64>], radius: f64, closed: bool) -> Self {
        assert!(waypoints.len() >= 2, "a path needs at least two waypoints");
        let mut pts = waypoints.to_vec();
        if closed {
            pts.push(waypoints[0]);
        }
        let n = pts.len();
        let seg_dir = |i: usize| (pts[i + 1] - pts[i]).normalize();
        let seg_len = |i: usize| (pts[i + 1] - pts[i]).norm();

        // Corner i sits at pts[i], between segment i-1 and segment i.
        let mut trims = vec![(0.0, 0.0); n - 1];
        let mut arcs: Vec<Option<(usize, Piece, f64)>> = vec![None; n];
        let corners: Vec<usize> = if closed {
            (0..n - 1).collect()
        } else {
            (1..n - 1).collect()
        };
        for i in corners {
            let prev = if i == 0 { n - 2 } else { i - 1 };
            let (d1, d2) = (seg_dir(prev), seg_dir(i));
            let cross = d1.x * d2.y - d1.y * d2.x;
            let theta = cross.atan2(d1.dot(&d2));
            if theta.abs() < 1e-9 {
                continue;
            }
            let max_tan = 0.5 * seg_len(prev).min(seg_len(i));
            let r = radius.min(max_tan / (theta.abs() / 2.0).tan());
            let tl = r * (theta.abs() / 2.0).tan();
            let t1 = pts[i] - d1 * tl;
            let normal = if theta > 0.0 {
                Vector2::new(-d1.y, d1.x)
            } else {
                Vector2::new(d1.y, -d1.x)
            };
            let center = t1 + normal * r;
            let start = t1 - center;
            trims[prev].1 = tl;
            trims[i].0 = tl;
            arcs[i] = Some((
                i,
                Piece::Arc {
                    center,
                    radius: r,
                    start_angle: start.y.atan2(start.x),
                    sweep: theta,
                },
                tl,
            ));
        }

        let mut pieces = Vec::new();
        // A closed path starting on a rounded corner begins mid-arc; keep it
        // simple by starting with the first segment and appending corner 0
        // at the end.
        for i in 0..n - 1 {
            if i > 0 {
                if let Some((_, arc, _)) = &arcs[i] {
                    pieces.push(arc.clone());
                }
            }
            let d = seg_dir(i);
            let len = seg_len(i) - trims[i].0 - trims[i].1;
            if len > 0.0 {
                pieces.push(Piece::Line {
                    from: pts[i] + d * trims[i].0,
                    dir: d,
                    len,
                });
            }
        }
        if closed {
            if let Some((_, arc, _)) = &arcs[0] {
                pieces.push(arc.clone());
            }
        }

        let mut offsets = Vec::with_capacity(pieces.len());
        let mut acc = 0.0;
        for p in &pieces {
            offsets.push(acc);
            acc += p.length();
        }
        Self {
            pieces,
            offsets,
            length: acc,
        }
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Position and heading (radians from +x) at arc length `s`, clamped to
    /// the path ends.
    pub fn at(&self, s: f64) -> (Vector2<f64>, f64) {
        let s = s.clamp(0.0, self.length);
        let idx = self.offsets.partition_point(|&o| o <= s).saturating_sub(1);
        let piece = &self.pieces[idx];
        piece.at((s - self.offsets[idx]).min(piece.length()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn straight_line() {
        let p = Path::with_fillets(&[Vector2::new(0.0, 0.0), Vector2::new(10.0, 0.0)], 5.0, false);
        assert_eq!(p.length(), 10.0);
        let (pos, h) = p.at(4.0);
        assert!((pos - Vector2::new(4.0, 0.0)).norm() < 1e-12 && h.abs() < 1e-12);
    }

    #[test]
    fn left_turn_is_continuous() {
        let p = Path::with_fillets(
            &[
                Vector2::new(-50.0, 0.0),
                Vector2::new(0.0, 0.0),
                Vector2::new(0.0, 50.0),
            ],
            8.0,
            false,
        );
        let expected = 100.0 - 2.0 * 8.0 + 8.0 * FRAC_PI_2;
        assert!((p.length() - expected).abs() < 1e-9);
        let mut last = p.at(0.0);
        for k in 1..=2000 {
            let cur = p.at(p.length() * k as f64 / 2000.0);
            assert!((cur.0 - last.0).norm() < 0.06);
            last = cur;
        }
        assert!((last.0 - Vector2::new(0.0, 50.0)).norm() < 1e-9);
        assert!((last.1 - FRAC_PI_2).abs() < 1e-9);
        let (mid, h) = p.at(42.0 + 4.0 * FRAC_PI_2);
        assert!((h - PI / 4.0).abs() < 1e-9);
        let c = Vector2::new(-8.0, 8.0);
        assert!(((mid - c).norm() - 8.0).abs() < 1e-9);
    }

    #[test]
    fn closed_rectangle() {
        let p = Path::with_fillets(
            &[
                Vector2::new(-20.0, 0.0),
                Vector2::new(0.0, 0.0),
                Vector2::new(0.0, 40.0),
                Vector2::new(-40.0, 40.0),
                Vector2::new(-40.0, 0.0),
            ],
            5.0,
            true,
        );
        let expected = 160.0 - 4.0 * 10.0 + 4.0 * 5.0 * FRAC_PI_2;
        assert!((p.length() - expected).abs() < 1e-9);
        assert!((p.at(p.length()).0 - Vector2::new(-20.0, 0.0)).norm() < 1e-9);
    }
}
