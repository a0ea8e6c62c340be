use super::{Sketch, Stroke};

/// Euclidean distance from `p` to the segment `a`–`b`.
pub fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Ramer–Douglas–Peucker on one polyline. Endpoints are always kept; the
/// first farthest point wins ties, which makes the result idempotent.
pub fn rdp_polyline(points: &[(f64, f64)], epsilon: f64) -> Stroke {
    if points.len() < 3 || epsilon <= 0.0 {
        return points.to_vec();
    }
    let mut keep = vec![false; points.len()];
    keep[0] = true;
    keep[points.len() - 1] = true;
    let mut stack = vec![(0, points.len() - 1)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let (mut worst, mut worst_d) = (lo, -1.0);
        for i in lo + 1..hi {
            let d = point_segment_distance(points[i], points[lo], points[hi]);
            if d > worst_d {
                worst = i;
                worst_d = d;
            }
        }
        if worst_d > epsilon {
            keep[worst] = true;
            stack.push((lo, worst));
            stack.push((worst, hi));
        }
    }
    points
        .iter()
        .zip(keep)
        .filter_map(|(&p, k)| k.then_some(p))
        .collect()
}

/// Per-stroke RDP; stroke boundaries and endpoints are preserved.
pub fn rdp_simplify(sketch: &Sketch, epsilon: f64) -> Sketch {
    if epsilon <= 0.0 {
        return sketch.clone();
    }
    let strokes: Vec<Stroke> = sketch
        .strokes()
        .iter()
        .map(|s| rdp_polyline(s, epsilon))
        .collect();
    // the first stroke starts where the original did, so the start offset is kept
    Sketch::from_strokes(&strokes, sketch.class.clone()).expect("simplified strokes are non-empty")
}
