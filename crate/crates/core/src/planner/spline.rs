//! Centripetal Catmull–Rom smoothing of tip paths.

use nalgebra::Vector3;

/// Sum of consecutive segment lengths.
pub fn path_length(path: &[Vector3<f64>]) -> f64 {
    path.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Resamples `path` along a centripetal Catmull–Rom spline through its
/// waypoints so that consecutive output points are roughly `spacing` apart.
///
/// The curve interpolates every (deduplicated) input waypoint, keeps both
/// endpoints exactly, and degrades to the input for fewer than two points.
pub fn smooth_path(path: &[Vector3<f64>], spacing: f64) -> Vec<Vector3<f64>> {
    assert!(spacing > 0.0, "spacing must be positive");
    let mut pts: Vec<Vector3<f64>> = Vec::with_capacity(path.len());
    for p in path {
        if pts.last().is_none_or(|q: &Vector3<f64>| (p - q).norm() > 1e-9) {
            pts.push(*p);
        }
    }
    if pts.len() < 2 {
        return pts;
    }
    // Reflected phantom points give the end spans a natural tangent.
    let n = pts.len();
    let first = 2.0 * pts[0] - pts[1];
    let last = 2.0 * pts[n - 1] - pts[n - 2];
    let mut ext = Vec::with_capacity(n + 2);
    ext.push(first);
    ext.extend_from_slice(&pts);
    ext.push(last);

    let mut out = vec![pts[0]];
    for i in 0..n - 1 {
        let (p0, p1, p2, p3) = (ext[i], ext[i + 1], ext[i + 2], ext[i + 3]);
        let span = (p2 - p1).norm();
        let pieces = (span / (0.98 * spacing)).ceil().max(1.0) as usize;
        for k in 1..pieces {
            out.push(centripetal(p0, p1, p2, p3, k as f64 / pieces as f64));
        }
        out.push(p2);
    }
    out
}

/// Point at fraction `u` of the span p1→p2 of a centripetal Catmull–Rom
/// curve (Barry–Goldman pyramid).
fn centripetal(p0: Vector3<f64>, p1: Vector3<f64>, p2: Vector3<f64>, p3: Vector3<f64>, u: f64) -> Vector3<f64> {
    let knot = |a: &Vector3<f64>, b: &Vector3<f64>| (b - a).norm().sqrt().max(1e-12);
    let t0 = 0.0;
    let t1 = t0 + knot(&p0, &p1);
    let t2 = t1 + knot(&p1, &p2);
    let t3 = t2 + knot(&p2, &p3);
    let t = t1 + u * (t2 - t1);
    let lerp =
        |a: Vector3<f64>, b: Vector3<f64>, ta: f64, tb: f64| a * ((tb - t) / (tb - ta)) + b * ((t - ta) / (tb - ta));
    let a1 = lerp(p0, p1, t0, t1);
    let a2 = lerp(p1, p2, t1, t2);
    let a3 = lerp(p2, p3, t2, t3);
    let b1 = lerp(a1, a2, t0, t2);
    let b2 = lerp(a2, a3, t1, t3);
    lerp(b1, b2, t1, t2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_path_stays_on_the_line() {
        let path = [
            Vector3::zeros(),
            Vector3::new(40.0, 0.0, 0.0),
            Vector3::new(100.0, 0.0, 0.0),
        ];
        let smooth = smooth_path(&path, 10.0);
        assert_eq!(smooth.first(), Some(&path[0]));
        assert_eq!(smooth.last(), Some(&path[2]));
        for p in &smooth {
            assert!(p.y.abs() < 1e-9 && p.z.abs() < 1e-9);
        }
        for w in smooth.windows(2) {
            let d = (w[1] - w[0]).norm();
            assert!(d > 0.0 && d <= 10.0 + 1e-9, "gap {d}");
        }
    }

    #[test]
    fn interpolates_every_waypoint() {
        let path = [
            Vector3::zeros(),
            Vector3::new(30.0, 10.0, 0.0),
            Vector3::new(30.0, 50.0, 20.0),
            Vector3::new(-10.0, 60.0, 40.0),
        ];
        let smooth = smooth_path(&path, 7.0);
        for p in &path {
            assert!(smooth.iter().any(|q| (q - p).norm() < 1e-12));
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(smooth_path(&[], 5.0).is_empty());
        let one = [Vector3::new(1.0, 2.0, 3.0)];
        assert_eq!(smooth_path(&one, 5.0), one.to_vec());
        let dup = [one[0], one[0]];
        assert_eq!(smooth_path(&dup, 5.0), one.to_vec());
    }

    #[test]
    fn length_of_polyline() {
        let path = [
            Vector3::zeros(),
            Vector3::new(3.0, 4.0, 0.0),
            Vector3::new(3.0, 4.0, 12.0),
        ];
        assert!((path_length(&path) - 17.0).abs() < 1e-12);
    }
}
