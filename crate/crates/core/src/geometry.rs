//! Planar primitives: poses, oriented footprints, polylines and the drivable
//! polygon, with the overlap, containment, resampling and progress queries
//! shared by agent selection, reward scoring and the simulator.
//!
//! Everything here is pure and allocation-light; scenes hold at most a few
//! dozen polygon vertices, so all queries are linear scans.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Minimum separation between consecutive polyline points.
pub const MIN_SEGMENT: f64 = 1e-9;
/// Distance within which a point counts as lying on a polygon boundary.
pub const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Point2::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, c: f64) -> Point2 {
        Point2::new(self.x * c, self.y * c)
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point2) -> f64 {
        self.sub(o).norm()
    }

    pub fn lerp(self, o: Point2, t: f64) -> Point2 {
        Point2::new(self.x + (o.x - self.x) * t, self.y + (o.y - self.y) * t)
    }

    /// Unit vector at angle `theta`.
    pub fn unit(theta: f64) -> Point2 {
        Point2::new(theta.cos(), theta.sin())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    /// Radians in `(−π, π]`.
    pub heading: f64,
}

impl From<[f64; 3]> for Pose2 {
    fn from(v: [f64; 3]) -> Self {
        Pose2 {
            x: v[0],
            y: v[1],
            heading: v[2],
        }
    }
}

impl From<Pose2> for [f64; 3] {
    fn from(p: Pose2) -> Self {
        [p.x, p.y, p.heading]
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// Expresses a world point in this pose's local frame.
    pub fn to_local(&self, p: Point2) -> Point2 {
        let (s, c) = self.heading.sin_cos();
        let d = p.sub(self.position());
        Point2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    }

    /// Maps a local point back to the world frame.
    pub fn to_world(&self, p: Point2) -> Point2 {
        let (s, c) = self.heading.sin_cos();
        Point2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    pub fn pose_to_local(&self, q: &Pose2) -> Pose2 {
        let p = self.to_local(q.position());
        Pose2::new(p.x, p.y, q.heading - self.heading)
    }

    pub fn pose_to_world(&self, q: &Pose2) -> Pose2 {
        let p = self.to_world(q.position());
        Pose2::new(p.x, p.y, q.heading + self.heading)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

impl Footprint {
    pub fn new(length: f64, width: f64) -> Result<Self> {
        if !(length > 0.0 && width > 0.0) {
            return Err(Error::validation(format!(
                "footprint extents must be positive, got {length}×{width}"
            )));
        }
        Ok(Self { length, width })
    }

    /// Rectangle corners in counterclockwise order.
    pub fn corners(&self, pose: &Pose2) -> [Point2; 4] {
        let (hl, hw) = (0.5 * self.length, 0.5 * self.width);
        [
            pose.to_world(Point2::new(hl, hw)),
            pose.to_world(Point2::new(-hl, hw)),
            pose.to_world(Point2::new(-hl, -hw)),
            pose.to_world(Point2::new(hl, -hw)),
        ]
    }

    /// Whether `p` lies inside (or on) the rectangle placed at `pose`.
    pub fn contains(&self, pose: &Pose2, p: Point2) -> bool {
        let l = pose.to_local(p);
        l.x.abs() <= 0.5 * self.length && l.y.abs() <= 0.5 * self.width
    }
}

/// Separating-axis test for two oriented rectangles; touching counts as overlap.
pub fn rect_overlap(a: &Pose2, fa: &Footprint, b: &Pose2, fb: &Footprint) -> bool {
    let d = b.position().sub(a.position());
    let reach = 0.5 * (fa.length.hypot(fa.width) + fb.length.hypot(fb.width));
    if d.dot(d) > reach * reach {
        return false;
    }
    let ua = Point2::unit(a.heading);
    let ub = Point2::unit(b.heading);
    let va = Point2::new(-ua.y, ua.x);
    let vb = Point2::new(-ub.y, ub.x);
    let (ha, wa) = (0.5 * fa.length, 0.5 * fa.width);
    let (hb, wb) = (0.5 * fb.length, 0.5 * fb.width);
    for axis in [ua, va, ub, vb] {
        let ra = ha * ua.dot(axis).abs() + wa * va.dot(axis).abs();
        let rb = hb * ub.dot(axis).abs() + wb * vb.dot(axis).abs();
        if d.dot(axis).abs() > ra + rb {
            return false;
        }
    }
    true
}

/// Ordered open path of at least two distinct points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct Polyline {
    points: Vec<Point2>,
    // cumulative arc length at each vertex
    cum: Vec<f64>,
}

impl TryFrom<Vec<Point2>> for Polyline {
    type Error = Error;

    fn try_from(points: Vec<Point2>) -> Result<Self> {
        Polyline::new(points)
    }
}

impl From<Polyline> for Vec<Point2> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

impl Polyline {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::validation(format!(
                "polyline needs at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::validation(format!("non-finite polyline point {p:?}")));
        }
        let mut cum = Vec::with_capacity(points.len());
        cum.push(0.0);
        for (i, w) in points.windows(2).enumerate() {
            let d = w[0].dist(w[1]);
            if d <= MIN_SEGMENT {
                return Err(Error::validation(format!(
                    "coincident polyline points at index {i}"
                )));
            }
            cum.push(cum[i] + d);
        }
        Ok(Self { points, cum })
    }

    /// Drops points closer than `min_gap` to their predecessor before validating.
    pub fn from_points_dedup(points: &[Point2], min_gap: f64) -> Result<Self> {
        let mut kept: Vec<Point2> = Vec::with_capacity(points.len());
        for &p in points {
            if kept.last().map_or(true, |q| q.dist(p) > min_gap.max(MIN_SEGMENT)) {
                kept.push(p);
            }
        }
        Polyline::new(kept)
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap_or(&0.0)
    }

    pub fn first(&self) -> Point2 {
        self.points[0]
    }

    pub fn last(&self) -> Point2 {
        self.points[self.points.len() - 1]
    }

    fn segment_at(&self, s: f64) -> usize {
        let n = self.points.len() - 1;
        match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    /// Point at arc length `s`; linear extrapolation beyond either end.
    pub fn point_at(&self, s: f64) -> Point2 {
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.cum[i + 1] - self.cum[i];
        a.lerp(b, (s - self.cum[i]) / seg)
    }

    /// Unit tangent at arc length `s`.
    pub fn tangent_at(&self, s: f64) -> Point2 {
        let i = self.segment_at(s);
        let d = self.points[i + 1].sub(self.points[i]);
        d.scale(1.0 / d.norm())
    }

    /// Closest point projection: (arc length, distance, segment index).
    pub fn project(&self, p: Point2) -> (f64, f64, usize) {
        let mut best = (0.0, f64::INFINITY, 0);
        for i in 0..self.points.len() - 1 {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let seg = self.cum[i + 1] - self.cum[i];
            let t = (p.sub(a).dot(b.sub(a)) / (seg * seg)).clamp(0.0, 1.0);
            let d = p.dist(a.lerp(b, t));
            if d < best.1 {
                best = (self.cum[i] + t * seg, d, i);
            }
        }
        best
    }
}

/// Minimum distance from `p` to segment `ab`.
pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a.lerp(b, t))
}

/// Arc-length coordinate of the closest projection of `p` onto `path`.
pub fn progress_along(path: &Polyline, p: Point2) -> f64 {
    path.project(p).0
}

/// Minimum Euclidean distance from any trajectory point to any path segment.
pub fn path_min_distance(traj: &[Point2], path: &Polyline) -> f64 {
    traj.iter()
        .map(|&p| path.project(p).1)
        .fold(f64::INFINITY, f64::min)
}

/// Result of [`resample_arclength`].
#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub path: Polyline,
    /// Set when the input was shorter than one spacing; `path` then holds the endpoints only.
    pub short: bool,
}

/// Points at arc-length multiples of `spacing` from the start, closing with
/// the endpoint when a residual remains.
pub fn resample_arclength(path: &Polyline, spacing: f64) -> Result<Resampled> {
    if !(spacing > 0.0) {
        return Err(Error::validation(format!(
            "spacing must be positive, got {spacing}"
        )));
    }
    let len = path.length();
    if len < spacing {
        let ends = Polyline::new(vec![path.first(), path.last()])?;
        return Ok(Resampled {
            path: ends,
            short: true,
        });
    }
    let n = (len / spacing + 1e-12).floor() as usize;
    let mut pts: Vec<Point2> = (0..=n).map(|k| path.point_at(k as f64 * spacing)).collect();
    pts[0] = path.first();
    if len - n as f64 * spacing > 1e-9 {
        pts.push(path.last());
    }
    Ok(Resampled {
        path: Polyline::new(pts)?,
        short: false,
    })
}

/// Simple counterclockwise polygon bounding the drivable area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct DrivablePolygon {
    vertices: Vec<Point2>,
}

impl TryFrom<Vec<Point2>> for DrivablePolygon {
    type Error = Error;

    fn try_from(v: Vec<Point2>) -> Result<Self> {
        DrivablePolygon::new(v)
    }
}

impl From<DrivablePolygon> for Vec<Point2> {
    fn from(p: DrivablePolygon) -> Self {
        p.vertices
    }
}

fn segments_cross(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    // orientations within rounding of zero count as collinear
    let tol = 1e-12 * (a.dist(b) + c.dist(d)).powi(2).max(1.0);
    let sign = |o: f64| if o > tol { 1 } else if o < -tol { -1 } else { 0 };
    let o1 = sign(b.sub(a).cross(c.sub(a)));
    let o2 = sign(b.sub(a).cross(d.sub(a)));
    let o3 = sign(d.sub(c).cross(a.sub(c)));
    let o4 = sign(d.sub(c).cross(b.sub(c)));
    if o1 * o2 < 0 && o3 * o4 < 0 {
        return true;
    }
    let on = |p: Point2, q: Point2, r: Point2, o: i32| {
        let t = r.sub(p).dot(q.sub(p)) / q.sub(p).dot(q.sub(p));
        o == 0 && (-1e-12..=1.0 + 1e-12).contains(&t)
    };
    on(a, b, c, o1) || on(a, b, d, o2) || on(c, d, a, o3) || on(c, d, b, o4)
}

impl DrivablePolygon {
    pub fn new(vertices: Vec<Point2>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::validation(format!(
                "polygon needs at least 3 vertices, got {n}"
            )));
        }
        if vertices.iter().any(|p| !p.is_finite()) {
            return Err(Error::validation("non-finite polygon vertex"));
        }
        let poly = Self { vertices };
        if poly.signed_area() <= 0.0 {
            return Err(Error::validation(
                "polygon must be counterclockwise with positive area",
            ));
        }
        for i in 0..n {
            let (a, b) = (poly.vertices[i], poly.vertices[(i + 1) % n]);
            if a.dist(b) <= MIN_SEGMENT {
                return Err(Error::validation(format!("degenerate polygon edge {i}")));
            }
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (c, d) = (poly.vertices[j], poly.vertices[(j + 1) % n]);
                if segments_cross(a, b, c, d) {
                    return Err(Error::validation(format!(
                        "polygon edges {i} and {j} intersect"
                    )));
                }
            }
        }
        Ok(poly)
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        0.5 * (0..n)
            .map(|i| self.vertices[i].cross(self.vertices[(i + 1) % n]))
            .sum::<f64>()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn boundary_distance(&self, p: Point2) -> f64 {
        self.edges()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Containment with the boundary counted as inside.
    pub fn contains(&self, p: Point2) -> bool {
        point_in_polygon(p, self)
    }

    /// Distance from `origin` along unit direction `dir` to the first boundary
    /// crossing, capped at `max`.
    pub fn ray_cast(&self, origin: Point2, dir: Point2, max: f64) -> f64 {
        let mut best = max;
        for (a, b) in self.edges() {
            let e = b.sub(a);
            let denom = dir.cross(e);
            if denom.abs() < 1e-15 {
                continue;
            }
            let w = a.sub(origin);
            let t = w.cross(e) / denom;
            let u = w.cross(dir) / denom;
            if t >= 0.0 && (0.0..=1.0).contains(&u) && t < best {
                best = t;
            }
        }
        best
    }
}

/// Point-in-polygon by crossing number; points within [`BOUNDARY_TOL`] of an
/// edge count as inside.
pub fn point_in_polygon(p: Point2, poly: &DrivablePolygon) -> bool {
    if poly.boundary_distance(p) <= BOUNDARY_TOL {
        return true;
    }
    let mut inside = false;
    for (a, b) in poly.edges() {
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Axis-aligned rectangle `[x0,x1]×[y0,y1]` as a drivable polygon.
pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<DrivablePolygon> {
    DrivablePolygon::new(vec![
        Point2::new(x0, y0),
        Point2::new(x1, y0),
        Point2::new(x1, y1),
        Point2::new(x0, y1),
    ])
}
