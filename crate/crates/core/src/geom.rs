//! Planar geometry in meters.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point { x: v[0], y: v[1] }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point) -> f64 {
        self.sub(o).norm()
    }

    pub fn unit(theta: f64) -> Point {
        Point::new(theta.cos(), theta.sin())
    }

    /// Rotates by `theta` counter-clockwise.
    pub fn rotate(self, theta: f64) -> Point {
        let (s, c) = theta.sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn lerp(self, o: Point, t: f64) -> Point {
        self.add(o.sub(self).scale(t))
    }
}

/// Closest point on segment `ab` to `p`: (distance, parameter in [0,1]).
pub fn point_segment(p: Point, a: Point, b: Point) -> (f64, f64) {
    let ab = b.sub(a);
    let l2 = ab.dot(ab);
    let t = if l2 == 0.0 {
        0.0
    } else {
        (p.sub(a).dot(ab) / l2).clamp(0.0, 1.0)
    };
    (p.dist(a.lerp(b, t)), t)
}

/// Ray `o + t·d` (unit `d`) against segment `ab`; smallest `t >= 0`.
pub fn ray_segment(o: Point, d: Point, a: Point, b: Point) -> Option<f64> {
    let e = b.sub(a);
    let den = d.cross(e);
    if den.abs() < 1e-12 {
        return None;
    }
    let ao = a.sub(o);
    let t = ao.cross(e) / den;
    let u = ao.cross(d) / den;
    if t >= 0.0 && (-1e-12..=1.0 + 1e-12).contains(&u) {
        Some(t)
    } else {
        None
    }
}

/// Ray against a disc boundary: entry distance, `None` if missed or behind.
pub fn ray_disc(o: Point, d: Point, c: Point, r: f64) -> Option<f64> {
    let oc = o.sub(c);
    let b = oc.dot(d);
    let cc = oc.dot(oc) - r * r;
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    if t0 >= 0.0 {
        Some(t0)
    } else if t1 >= 0.0 && cc <= 0.0 {
        Some(0.0)
    } else {
        None
    }
}

pub fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = b.sub(a).cross(c.sub(a));
    let d2 = b.sub(a).cross(d.sub(a));
    let d3 = d.sub(c).cross(a.sub(c));
    let d4 = d.sub(c).cross(b.sub(c));
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

pub fn segment_segment(a: Point, b: Point, c: Point, d: Point) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    point_segment(a, c, d)
        .0
        .min(point_segment(b, c, d).0)
        .min(point_segment(c, a, b).0)
        .min(point_segment(d, a, b).0)
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Nearest location on a polyline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub segment: usize,
    pub t: f64,
    pub point: Point,
    pub dist: f64,
    /// Arc length from the first vertex.
    pub arc: f64,
}

pub fn polyline_length(pts: &[Point]) -> f64 {
    pts.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Distance from `p` to the polyline; a single vertex is a point.
pub fn polyline_distance(p: Point, pts: &[Point]) -> f64 {
    if pts.len() == 1 {
        return p.dist(pts[0]);
    }
    pts.windows(2)
        .map(|w| point_segment(p, w[0], w[1]).0)
        .fold(f64::INFINITY, f64::min)
}

/// Nearest point on the polyline, earliest segment on ties.
pub fn project_polyline(p: Point, pts: &[Point]) -> Projection {
    let mut best = Projection {
        segment: 0,
        t: 0.0,
        point: pts[0],
        dist: p.dist(pts[0]),
        arc: 0.0,
    };
    let mut arc = 0.0;
    for (i, w) in pts.windows(2).enumerate() {
        let (d, t) = point_segment(p, w[0], w[1]);
        let len = w[0].dist(w[1]);
        if d < best.dist - 1e-12 {
            best = Projection {
                segment: i,
                t,
                point: w[0].lerp(w[1], t),
                dist: d,
                arc: arc + t * len,
            };
        }
        arc += len;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_keeps_pi_and_drops_minus_pi() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn disc_hit_distance() {
        let t = ray_disc(
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(3.0, 0.0),
            0.5,
        )
        .unwrap();
        assert!((t - 2.5).abs() < 1e-12);
        assert!(ray_disc(
            Point::new(0.0, 0.0),
            Point::new(-1.0, 0.0),
            Point::new(3.0, 0.0),
            0.5
        )
        .is_none());
    }

    #[test]
    fn perpendicular_segment_hit() {
        let t = ray_segment(
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(2.0, -1.0),
            Point::new(2.0, 1.0),
        );
        assert_eq!(t, Some(2.0));
    }
}

/// Agent position (m) and heading (rad, CCW from +x) in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    /// World point expressed in the agent frame (x forward, y left).
    pub fn to_local(&self, p: Point) -> Point {
        p.sub(self.position()).rotate(-self.heading)
    }

    pub fn to_world(&self, p: Point) -> Point {
        p.rotate(self.heading).add(self.position())
    }
}
