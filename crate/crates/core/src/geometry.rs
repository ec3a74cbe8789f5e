//! Planar geometry primitives shared by the scene, occlusion and feature code.
//!
//! Coordinates are metres in a right-handed frame; headings are radians with
//! 0 along +x, normalized to (-pi, pi].

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point2 {
    fn from(a: [f64; 2]) -> Self {
        Point2 { x: a[0], y: a[1] }
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn from_polar(r: f64, theta: f64) -> Self {
        Point2::new(r * theta.cos(), r * theta.sin())
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn dist(self, o: Point2) -> f64 {
        (self - o).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn normalized(self) -> Point2 {
        let n = self.norm();
        if n == 0.0 {
            self
        } else {
            self * (1.0 / n)
        }
    }

    /// Rotated by +90 degrees (to the left).
    pub fn perp(self) -> Point2 {
        Point2::new(-self.y, self.x)
    }

    pub fn lerp(self, o: Point2, t: f64) -> Point2 {
        self + (o - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    if !a.is_finite() {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the other edge.
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment(a: Point2, b: Point2, p: Point2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed segment intersection test (touching counts).
pub fn segments_intersect(p1: Point2, p2: Point2, q1: Point2, q2: Point2) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Intersection point of two segments when they cross at a single point.
pub fn segment_intersection(p1: Point2, p2: Point2, q1: Point2, q2: Point2) -> Option<(Point2, f64, f64)> {
    let r = p2 - p1;
    let s = q2 - q1;
    let denom = r.cross(s);
    if denom.abs() < 1e-15 {
        return None;
    }
    let t = (q1 - p1).cross(s) / denom;
    let u = (q1 - p1).cross(r) / denom;
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
        Some((p1 + r * t, t, u))
    } else {
        None
    }
}

pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

/// Even-odd point-in-polygon test; points on the boundary count as inside.
pub fn point_in_polygon(p: Point2, poly: &[Point2]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if orient(a, b, p) == 0.0 && on_segment(a, b, p) {
            return true;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

pub fn polygon_boundary_distance(p: Point2, poly: &[Point2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| point_segment_distance(p, poly[i], poly[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

pub fn signed_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| poly[i].cross(poly[(i + 1) % n])).sum::<f64>() * 0.5
}

/// True when no two non-adjacent edges touch and the polygon has nonzero area.
pub fn is_simple_polygon(poly: &[Point2]) -> bool {
    let n = poly.len();
    if n < 3 || signed_area(poly).abs() < 1e-12 {
        return false;
    }
    for i in 0..n {
        let (a1, a2) = (poly[i], poly[(i + 1) % n]);
        if a1 == a2 {
            return false;
        }
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let (b1, b2) = (poly[j], poly[(j + 1) % n]);
            if segments_intersect(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}

/// Oriented vehicle rectangle corners, counter-clockwise.
pub fn rectangle_corners(center: Point2, heading: f64, length: f64, width: f64) -> [Point2; 4] {
    let f = Point2::from_polar(length * 0.5, heading);
    let l = Point2::from_polar(width * 0.5, heading).perp();
    [center - f - l, center + f - l, center + f + l, center - f + l]
}

/// Points along the boundary of a closed polygon, vertices included, no gap
/// longer than `step`.
pub fn sample_polygon_boundary(poly: &[Point2], step: f64) -> Vec<Point2> {
    let n = poly.len();
    let mut out = Vec::new();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let k = ((a.dist(b) / step).ceil() as usize).max(1);
        for j in 0..k {
            out.push(a.lerp(b, j as f64 / k as f64));
        }
    }
    out
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s: f64,
    pub point: Point2,
    pub distance: f64,
    pub heading: f64,
    /// Positive when the query point lies to the left of the polyline.
    pub lateral: f64,
}

/// Polyline with cached cumulative arclength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct Polyline {
    points: Vec<Point2>,
    cum: Vec<f64>,
}

impl From<Vec<Point2>> for Polyline {
    fn from(points: Vec<Point2>) -> Self {
        Polyline::new(points)
    }
}

impl From<Polyline> for Vec<Point2> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

impl Polyline {
    pub fn new(points: Vec<Point2>) -> Self {
        let mut cum = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                acc += p.dist(points[i - 1]);
            }
            cum.push(acc);
        }
        Polyline { points, cum }
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    pub fn first(&self) -> Point2 {
        self.points[0]
    }

    pub fn last(&self) -> Point2 {
        self.points[self.points.len() - 1]
    }

    fn segment_at(&self, s: f64) -> usize {
        let n = self.points.len();
        if n < 2 {
            return 0;
        }
        match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap_or(std::cmp::Ordering::Less)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    pub fn point_at(&self, s: f64) -> Point2 {
        if self.points.len() == 1 {
            return self.points[0];
        }
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let seg = self.cum[i + 1] - self.cum[i];
        if seg == 0.0 {
            return self.points[i];
        }
        self.points[i].lerp(self.points[i + 1], (s - self.cum[i]) / seg)
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        if self.points.len() < 2 {
            return 0.0;
        }
        let s = s.clamp(0.0, self.length());
        let mut i = self.segment_at(s);
        // skip zero-length segments
        while i + 1 < self.points.len() - 1 && self.points[i] == self.points[i + 1] {
            i += 1;
        }
        wrap_angle((self.points[i + 1] - self.points[i]).angle())
    }

    pub fn start_heading(&self) -> f64 {
        self.heading_at(0.0)
    }

    pub fn end_heading(&self) -> f64 {
        self.heading_at(self.length())
    }

    pub fn project(&self, p: Point2) -> Projection {
        if self.points.len() == 1 {
            return Projection {
                s: 0.0,
                point: self.points[0],
                distance: p.dist(self.points[0]),
                heading: 0.0,
                lateral: 0.0,
            };
        }
        self.project_segments(p, 0, self.points.len() - 1)
    }

    /// Projection onto the part of the line between arclengths `s0` and `s1`.
    pub fn project_within(&self, p: Point2, s0: f64, s1: f64) -> Projection {
        if self.points.len() == 1 {
            return self.project(p);
        }
        let lo = self.segment_at(s0.max(0.0));
        let hi = self.segment_at(s1.min(self.length())).max(lo);
        self.project_segments(p, lo, hi + 1)
    }

    fn project_segments(&self, p: Point2, from: usize, to: usize) -> Projection {
        let mut best = (f64::INFINITY, from, 0.0f64);
        for i in from..to {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let ab = b - a;
            let len2 = ab.dot(ab);
            let t = if len2 == 0.0 {
                0.0
            } else {
                ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
            };
            let q = a + ab * t - p;
            let d2 = q.dot(q);
            if d2 < best.0 {
                best = (d2, i, t);
            }
        }
        let (d2, i, t) = best;
        let distance = d2.sqrt();
        let (a, b) = (self.points[i], self.points[i + 1]);
        let point = a.lerp(b, t);
        let dir = b - a;
        let side = dir.cross(p - a);
        Projection {
            s: self.cum[i] + t * (self.cum[i + 1] - self.cum[i]),
            point,
            distance,
            heading: wrap_angle(dir.angle()),
            lateral: if side >= 0.0 { distance } else { -distance },
        }
    }

    /// Arclength positions every `step` metres, both ends included.
    pub fn sample_stations(&self, step: f64) -> Vec<f64> {
        let len = self.length();
        let n = (len / step).floor() as usize;
        let mut out: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
        if len - out[out.len() - 1] > 1e-9 {
            out.push(len);
        }
        out
    }

    /// Points from arclength `s` to the end, starting with the point at `s`.
    pub fn points_from(&self, s: f64) -> Vec<Point2> {
        let mut out = vec![self.point_at(s)];
        out.extend(
            self.points
                .iter()
                .zip(&self.cum)
                .filter(|(_, c)| **c > s + 1e-9)
                .map(|(p, _)| *p),
        );
        out
    }

    /// Offset polyline, positive to the left.
    pub fn offset(&self, d: f64) -> Vec<Point2> {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let prev = if i > 0 { self.points[i] - self.points[i - 1] } else { Point2::default() };
                let next = if i + 1 < n { self.points[i + 1] - self.points[i] } else { Point2::default() };
                let dir = (prev.normalized() + next.normalized()).normalized();
                let normal = dir.perp();
                // miter correction keeps the lane width constant on bends
                let cos = if i > 0 && i + 1 < n {
                    normal.dot(next.normalized().perp()).max(0.5)
                } else {
                    1.0
                };
                self.points[i] + normal * (d / cos)
            })
            .collect()
    }

    /// Closed boundary polygon of a lane of the given width around this midline.
    pub fn corridor(&self, width: f64) -> Vec<Point2> {
        let mut left = self.offset(width * 0.5);
        let right = self.offset(-width * 0.5);
        left.extend(right.into_iter().rev());
        left
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.25)).abs() - 0.25 < 1e-15);
    }

    #[test]
    fn point_in_square_and_boundary() {
        let sq = [
            Point2::new(0.0, 0.0),
            Point2::new(2.0, 0.0),
            Point2::new(2.0, 2.0),
            Point2::new(0.0, 2.0),
        ];
        assert!(point_in_polygon(Point2::new(1.0, 1.0), &sq));
        assert!(point_in_polygon(Point2::new(2.0, 1.0), &sq));
        assert!(!point_in_polygon(Point2::new(2.1, 1.0), &sq));
    }

    #[test]
    fn bowtie_is_not_simple() {
        let bow = [
            Point2::new(0.0, 0.0),
            Point2::new(2.0, 2.0),
            Point2::new(2.0, 0.0),
            Point2::new(0.0, 2.0),
        ];
        assert!(!is_simple_polygon(&bow));
    }

    #[test]
    fn polyline_projection() {
        let pl = Polyline::new(vec![Point2::new(0.0, 0.0), Point2::new(10.0, 0.0), Point2::new(10.0, 10.0)]);
        assert_eq!(pl.length(), 20.0);
        let pr = pl.project(Point2::new(5.0, 1.0));
        assert!((pr.s - 5.0).abs() < 1e-12);
        assert!((pr.lateral - 1.0).abs() < 1e-12);
        assert!((pl.heading_at(15.0) - PI / 2.0).abs() < 1e-12);
        assert_eq!(pl.point_at(15.0), Point2::new(10.0, 5.0));
    }

    #[test]
    fn crossing_segments() {
        let p = segment_intersection(
            Point2::new(0.0, 0.0),
            Point2::new(2.0, 2.0),
            Point2::new(0.0, 2.0),
            Point2::new(2.0, 0.0),
        )
        .unwrap();
        assert!((p.0.x - 1.0).abs() < 1e-12);
        assert!(segments_intersect(
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0)
        ));
    }
}
