//! Small planar geometry helpers on `[x, y]` points.

use crate::grid::Point;

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

#[inline]
pub fn dist2(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// Closest point parameter on segment `a..b`, clamped to `[0, 1]`.
#[inline]
pub fn segment_param(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    if len2 == 0.0 {
        0.0
    } else {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    }
}

#[inline]
pub fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Shoelace area; positive for clockwise-on-screen (y down) orientation.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

pub fn perimeter(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| dist(poly[i], poly[(i + 1) % n])).sum()
}

pub fn centroid(points: &[Point]) -> Point {
    let n = points.len().max(1) as f64;
    let s = points
        .iter()
        .fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
    [s[0] / n, s[1] / n]
}

/// Resamples a closed polyline to `n` points equally spaced in arc length,
/// starting at the first vertex.
pub fn resample_closed(poly: &[Point], n: usize) -> Vec<Point> {
    assert!(!poly.is_empty());
    let total = perimeter(poly);
    if poly.len() == 1 || total == 0.0 {
        return vec![poly[0]; n];
    }
    let m = poly.len();
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    let mut seg_start = 0.0;
    let mut seg_len = dist(poly[0], poly[1 % m]);
    for k in 0..n {
        let target = total * k as f64 / n as f64;
        while seg_start + seg_len < target && seg < m - 1 {
            seg_start += seg_len;
            seg += 1;
            seg_len = dist(poly[seg], poly[(seg + 1) % m]);
        }
        let t = if seg_len > 0.0 {
            ((target - seg_start) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(lerp(poly[seg], poly[(seg + 1) % m], t));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_square() {
        let sq = [[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]];
        let r = resample_closed(&sq, 8);
        let expected = [
            [0.0, 0.0],
            [2.0, 0.0],
            [4.0, 0.0],
            [4.0, 2.0],
            [4.0, 4.0],
            [2.0, 4.0],
            [0.0, 4.0],
            [0.0, 2.0],
        ];
        for (a, b) in r.iter().zip(expected) {
            assert!(dist(*a, b) < 1e-12, "{a:?} vs {b:?}");
        }
        assert!(signed_area(&sq) > 0.0);
        assert_eq!(perimeter(&sq), 16.0);
    }
}
