//! Yaw-oriented boxes, floor polygons and occupancy grids.
//!
//! World frame: `y` is up, the floor is the `(x, z)` plane. Yaw is a
//! counter-clockwise rotation in the `(x, z)` plane, i.e. a local point
//! `(u, v)` maps to `(u cos θ - v sin θ, u sin θ + v cos θ)`.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest half extent a box may have. Degenerate inputs are clamped here.
pub const MIN_HALF_EXTENT: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),
    #[error("grid does not cover the polygon bounds")]
    GridTooSmall,
    #[error("grid mismatch between masks")]
    GridMismatch,
    #[error("empty point set")]
    EmptyPoints,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Self) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn rotate(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(self.x * c - self.y * s, self.x * s + self.y * c)
    }
}

impl Add for Vec2 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Self;
    fn mul(self, k: f64) -> Self {
        Self::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// Projection onto the floor plane.
    pub fn floor(self) -> Vec2 {
        Vec2::new(self.x, self.z)
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Rotate about the vertical axis.
    pub fn rotate_yaw(self, angle: f64) -> Self {
        let p = self.floor().rotate(angle);
        Self::new(p.x, self.y, p.y)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Self;
    fn mul(self, k: f64) -> Self {
        Self::new(self.x * k, self.y * k, self.z * k)
    }
}

/// Wrap an angle into `[-π, π)`.
pub fn wrap_angle(angle: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut a = angle - two_pi * ((angle + PI) / two_pi).floor();
    // floor() can land exactly on the upper bound after rounding.
    if a >= PI {
        a -= two_pi;
    }
    if a < -PI {
        a += two_pi;
    }
    a
}

/// A 3D box rotated only about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct OrientedBox {
    pub center: Vec3,
    pub half_extents: Vec3,
    pub yaw: f64,
}

#[derive(Deserialize)]
struct RawBox {
    center: Vec3,
    half_extents: Vec3,
    yaw: f64,
}

impl TryFrom<RawBox> for OrientedBox {
    type Error = GeometryError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        let all = [
            raw.center.x,
            raw.center.y,
            raw.center.z,
            raw.half_extents.x,
            raw.half_extents.y,
            raw.half_extents.z,
            raw.yaw,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("box"));
        }
        Ok(OrientedBox::new(raw.center, raw.half_extents, raw.yaw))
    }
}

impl OrientedBox {
    /// Builds a box, clamping half extents to [`MIN_HALF_EXTENT`] and
    /// wrapping the yaw.
    pub fn new(center: Vec3, half_extents: Vec3, yaw: f64) -> Self {
        debug_assert!(center.x.is_finite() && center.y.is_finite() && center.z.is_finite());
        let clamp = |h: f64| if h.is_nan() { MIN_HALF_EXTENT } else { h.max(MIN_HALF_EXTENT) };
        Self {
            center,
            half_extents: Vec3::new(
                clamp(half_extents.x),
                clamp(half_extents.y),
                clamp(half_extents.z),
            ),
            yaw: wrap_angle(yaw),
        }
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.x * self.half_extents.y * self.half_extents.z
    }

    pub fn footprint_area(&self) -> f64 {
        4.0 * self.half_extents.x * self.half_extents.z
    }

    pub fn bottom(&self) -> f64 {
        self.center.y - self.half_extents.y
    }

    pub fn top(&self) -> f64 {
        self.center.y + self.half_extents.y
    }

    /// Express a world point in the box frame (yaw removed, center at origin).
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        (p - self.center).rotate_yaw(-self.yaw)
    }

    pub fn to_world(&self, p: Vec3) -> Vec3 {
        p.rotate_yaw(self.yaw) + self.center
    }

    /// Radius of the circle enclosing the footprint.
    pub fn circumradius(&self) -> f64 {
        self.half_extents.x.hypot(self.half_extents.z)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.half_extents.x
            && l.y.abs() <= self.half_extents.y
            && l.z.abs() <= self.half_extents.z
    }

    /// Rotate the box about the world vertical axis through the origin.
    pub fn rotated_about_origin(&self, angle: f64) -> Self {
        Self::new(self.center.rotate_yaw(angle), self.half_extents, self.yaw + angle)
    }

    /// The 8 corners, bottom face first.
    pub fn corners(&self) -> [Vec3; 8] {
        let h = self.half_extents;
        let mut out = [Vec3::default(); 8];
        let mut i = 0;
        for sy in [-1.0, 1.0] {
            for (sx, sz) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                out[i] = self.to_world(Vec3::new(sx * h.x, sy * h.y, sz * h.z));
                i += 1;
            }
        }
        out
    }
}

/// Top-down footprint of a box: four corners, counter-clockwise.
pub fn box_footprint(b: &OrientedBox) -> [Vec2; 4] {
    let (hx, hz) = (b.half_extents.x, b.half_extents.z);
    let c = b.center.floor();
    [
        c + Vec2::new(-hx, -hz).rotate(b.yaw),
        c + Vec2::new(hx, -hz).rotate(b.yaw),
        c + Vec2::new(hx, hz).rotate(b.yaw),
        c + Vec2::new(-hx, hz).rotate(b.yaw),
    ]
}

/// Signed area (positive for counter-clockwise vertex order).
pub fn polygon_signed_area(pts: &[Vec2]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        acc += a.cross(b);
    }
    0.5 * acc
}

/// Clip a convex subject polygon against a convex, counter-clockwise clip
/// polygon (Sutherland-Hodgman).
pub fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut output: Vec<Vec2> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = b - a;
        let side = |p: Vec2| edge.cross(p - a);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: Vec2, q: Vec2, sp: f64, sq: f64) -> Vec2 {
    let t = sp / (sp - sq);
    p + (q - p) * t
}

/// Area of the intersection of two box footprints.
pub fn footprint_intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    // Cheap rejection on circumscribed circles.
    let d = (a.center.floor() - b.center.floor()).norm();
    if d > a.circumradius() + b.circumradius() {
        return 0.0;
    }
    let pa = box_footprint(a);
    let pb = box_footprint(b);
    polygon_signed_area(&clip_convex(&pa, &pb)).max(0.0)
}

/// Intersection over union of the ground-plane footprints.
pub fn iou2d(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = footprint_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.footprint_area() + b.footprint_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection volume of two yaw-only boxes.
pub fn intersection_volume(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let lo = a.bottom().max(b.bottom());
    let hi = a.top().min(b.top());
    if hi <= lo {
        return 0.0;
    }
    footprint_intersection_area(a, b) * (hi - lo)
}

/// Exact volumetric IoU for yaw-only boxes.
pub fn iou3d(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = intersection_volume(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression on 3D IoU.
///
/// Boxes are visited by descending priority (ties broken by input order) and
/// a box is kept iff its IoU with every already kept box is below
/// `threshold`. Returns indices into `boxes` in keep order.
pub fn nms3d(boxes: &[(OrientedBox, f64)], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].1.total_cmp(&boxes[i].1).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou3d(&boxes[i].0, &boxes[k].0) < threshold) {
            kept.push(i);
        }
    }
    kept
}

/// [`nms3d`] with box volume as the priority.
pub fn nms3d_by_volume(boxes: &[OrientedBox], threshold: f64) -> Vec<usize> {
    let scored: Vec<(OrientedBox, f64)> = boxes.iter().map(|b| (*b, b.volume())).collect();
    nms3d(&scored, threshold)
}

/// Signed distance from a point to a box surface: negative inside.
pub fn sdf_point_box(p: Vec3, b: &OrientedBox) -> f64 {
    sdf_point_box_with_grad(p, b).0
}

/// Signed distance plus its gradient with respect to the query point (world
/// frame).
pub fn sdf_point_box_with_grad(p: Vec3, b: &OrientedBox) -> (f64, Vec3) {
    let l = b.to_local(p);
    let h = b.half_extents;
    let q = [l.x.abs() - h.x, l.y.abs() - h.y, l.z.abs() - h.z];
    let sign = [sgn(l.x), sgn(l.y), sgn(l.z)];
    let outside = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
    let out_len = (outside[0] * outside[0] + outside[1] * outside[1] + outside[2] * outside[2]).sqrt();
    let (value, local_grad) = if out_len > 0.0 {
        (
            out_len,
            Vec3::new(
                sign[0] * outside[0] / out_len,
                sign[1] * outside[1] / out_len,
                sign[2] * outside[2] / out_len,
            ),
        )
    } else {
        let mut axis = 0;
        for k in 1..3 {
            if q[k] > q[axis] {
                axis = k;
            }
        }
        let mut g = [0.0; 3];
        g[axis] = sign[axis];
        (q[axis].min(0.0), Vec3::from_array(g))
    };
    (value, local_grad.rotate_yaw(b.yaw))
}

fn sgn(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Tightest box with the given yaw enclosing all points.
pub fn contact_box_from_points(points: &[Vec3], yaw: f64) -> Result<OrientedBox, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyPoints);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        let l = p.rotate_yaw(-yaw).to_array();
        for k in 0..3 {
            if !l[k].is_finite() {
                return Err(GeometryError::NonFinite("contact point"));
            }
            lo[k] = lo[k].min(l[k]);
            hi[k] = hi[k].max(l[k]);
        }
    }
    let mid = Vec3::new((lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0);
    let half = Vec3::new((hi[0] - lo[0]) / 2.0, (hi[1] - lo[1]) / 2.0, (hi[2] - lo[2]) / 2.0);
    Ok(OrientedBox::new(mid.rotate_yaw(yaw), half, yaw))
}

/// A simple, counter-clockwise floor outline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec2>", into = "Vec<Vec2>")]
pub struct FloorPolygon {
    vertices: Vec<Vec2>,
}

impl TryFrom<Vec<Vec2>> for FloorPolygon {
    type Error = GeometryError;
    fn try_from(v: Vec<Vec2>) -> Result<Self, Self::Error> {
        FloorPolygon::new(v)
    }
}

impl From<FloorPolygon> for Vec<Vec2> {
    fn from(p: FloorPolygon) -> Self {
        p.vertices
    }
}

impl FloorPolygon {
    /// Validates the outline; clockwise input is reversed to counter-clockwise.
    pub fn new(mut vertices: Vec<Vec2>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::DegeneratePolygon(format!(
                "{} vertices",
                vertices.len()
            )));
        }
        if vertices.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(GeometryError::NonFinite("polygon"));
        }
        let area = polygon_signed_area(&vertices);
        if area.abs() <= 1e-12 {
            return Err(GeometryError::DegeneratePolygon("zero area".into()));
        }
        if area < 0.0 {
            vertices.reverse();
        }
        let n = vertices.len();
        for i in 0..n {
            for j in (i + 1)..n {
                // Skip adjacent edges.
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let (a, b) = (vertices[i], vertices[(i + 1) % n]);
                let (c, d) = (vertices[j], vertices[(j + 1) % n]);
                if segments_intersect(a, b, c, d) {
                    return Err(GeometryError::DegeneratePolygon("self-intersecting".into()));
                }
            }
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        polygon_signed_area(&self.vertices)
    }

    pub fn edges(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = Vec2::new(lo.x.min(v.x), lo.y.min(v.y));
            hi = Vec2::new(hi.x.max(v.x), hi.y.max(v.y));
        }
        (lo, hi)
    }

    /// Even-odd point containment.
    pub fn contains(&self, p: Vec2) -> bool {
        point_in_polygon(p, &self.vertices)
    }

    /// Distance from a point to the outline.
    pub fn boundary_distance(&self, p: Vec2) -> f64 {
        self.edges()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// True iff the disk lies entirely inside the polygon.
    pub fn contains_disk(&self, c: Vec2, r: f64) -> bool {
        self.contains(c) && self.boundary_distance(c) >= r
    }

    /// True iff the capsule swept by a disk of radius `r` along `a -> b` lies
    /// entirely inside the polygon.
    pub fn contains_capsule(&self, a: Vec2, b: Vec2, r: f64) -> bool {
        self.contains(a)
            && self.edges().all(|(p, q)| segment_segment_distance(a, b, p, q) >= r)
    }

    /// True iff a convex polygon lies inside this polygon.
    pub fn contains_convex(&self, poly: &[Vec2]) -> bool {
        if !poly.iter().all(|&p| self.contains(p)) {
            return false;
        }
        let n = poly.len();
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            for (p, q) in self.edges() {
                if segments_cross_properly(a, b, p, q) {
                    return false;
                }
            }
        }
        // A reflex vertex poking into the convex polygon.
        !self
            .vertices
            .iter()
            .any(|&v| point_strictly_inside_convex(v, poly))
    }

    pub fn rotated_about_origin(&self, angle: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| v.rotate(angle)).collect(),
        }
    }
}

pub fn point_in_polygon(p: Vec2, poly: &[Vec2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
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

fn point_strictly_inside_convex(p: Vec2, poly: &[Vec2]) -> bool {
    let n = poly.len();
    (0..n).all(|i| (poly[(i + 1) % n] - poly[i]).cross(p - poly[i]) > 1e-12)
}

pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment(a: Vec2, b: Vec2, p: Vec2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test (touching counts).
pub fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

fn segments_cross_properly(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let eps = 1e-12;
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    ((d1 > eps && d2 < -eps) || (d1 < -eps && d2 > eps))
        && ((d3 > eps && d4 < -eps) || (d3 < -eps && d4 > eps))
}

pub fn segment_segment_distance(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

/// Distance between a segment and a convex polygon (zero if they touch).
pub fn segment_convex_distance(a: Vec2, b: Vec2, poly: &[Vec2]) -> f64 {
    if point_in_polygon(a, poly) || point_in_polygon(b, poly) {
        return 0.0;
    }
    let n = poly.len();
    (0..n)
        .map(|i| segment_segment_distance(a, b, poly[i], poly[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

/// Regular grid on the floor plane. Cell `(i, j)` spans
/// `origin + [i, i+1) * cell_size` along x and `[j, j+1) * cell_size` along z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Vec2,
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn new(origin: Vec2, cell_size: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(GeometryError::InvalidGrid(format!("cell size {cell_size}")));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidGrid("zero cells".into()));
        }
        Ok(Self { origin, cell_size, width, height })
    }

    /// Smallest grid of the given cell size covering `poly`'s bounds, with the
    /// origin snapped to a multiple of the cell size.
    pub fn covering(poly: &FloorPolygon, cell_size: f64) -> Result<Self, GeometryError> {
        let (lo, hi) = poly.bounds();
        let ox = (lo.x / cell_size).floor() * cell_size;
        let oz = (lo.y / cell_size).floor() * cell_size;
        let w = ((hi.x - ox) / cell_size - 1e-9).ceil().max(1.0) as usize;
        let h = ((hi.y - oz) / cell_size - 1e-9).ceil().max(1.0) as usize;
        GridSpec::new(Vec2::new(ox, oz), cell_size, w, h)
    }

    /// Square grid centered on the origin.
    pub fn centered(cells: usize, cell_size: f64) -> Result<Self, GeometryError> {
        let half = cells as f64 * cell_size / 2.0;
        GridSpec::new(Vec2::new(-half, -half), cell_size, cells, cells)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(
            self.origin.x + (i as f64 + 0.5) * self.cell_size,
            self.origin.y + (j as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn max_corner(&self) -> Vec2 {
        Vec2::new(
            self.origin.x + self.width as f64 * self.cell_size,
            self.origin.y + self.height as f64 * self.cell_size,
        )
    }

    pub fn covers(&self, lo: Vec2, hi: Vec2) -> bool {
        let m = self.max_corner();
        let eps = 1e-9;
        self.origin.x <= lo.x + eps && self.origin.y <= lo.y + eps && m.x >= hi.x - eps && m.y >= hi.y - eps
    }

    /// Cell containing a point, if any.
    pub fn locate(&self, p: Vec2) -> Option<(usize, usize)> {
        let fi = ((p.x - self.origin.x) / self.cell_size).floor();
        let fj = ((p.y - self.origin.y) / self.cell_size).floor();
        if fi < 0.0 || fj < 0.0 || fi >= self.width as f64 || fj >= self.height as f64 {
            return None;
        }
        Some((fi as usize, fj as usize))
    }

    /// Inclusive cell-index range whose centers may fall within `[lo, hi]`.
    fn index_range(&self, lo: Vec2, hi: Vec2) -> Option<(usize, usize, usize, usize)> {
        let to_i = |v: f64, o: f64| (v - o) / self.cell_size - 0.5;
        let i0 = to_i(lo.x, self.origin.x).ceil().max(0.0);
        let j0 = to_i(lo.y, self.origin.y).ceil().max(0.0);
        let i1 = to_i(hi.x, self.origin.x).floor().min(self.width as f64 - 1.0);
        let j1 = to_i(hi.y, self.origin.y).floor().min(self.height as f64 - 1.0);
        if i1 < i0 || j1 < j0 {
            return None;
        }
        Some((i0 as usize, i1 as usize, j0 as usize, j1 as usize))
    }
}

/// Boolean raster over a [`GridSpec`], row-major in `j` (z) then `i` (x).
///
/// Serialized as one run-length list per row: alternating run lengths of
/// false and true cells, starting with false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RleMask", into = "RleMask")]
pub struct BinaryMask {
    pub grid: GridSpec,
    cells: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RleMask {
    grid: GridSpec,
    rows: Vec<Vec<usize>>,
}

impl From<BinaryMask> for RleMask {
    fn from(m: BinaryMask) -> Self {
        let rows = m
            .cells
            .chunks(m.grid.width)
            .map(|row| {
                let mut runs = Vec::new();
                let mut current = false;
                let mut len = 0;
                for &c in row {
                    if c != current {
                        runs.push(len);
                        current = c;
                        len = 0;
                    }
                    len += 1;
                }
                runs.push(len);
                runs
            })
            .collect();
        RleMask { grid: m.grid, rows }
    }
}

impl TryFrom<RleMask> for BinaryMask {
    type Error = GeometryError;

    fn try_from(raw: RleMask) -> Result<Self, Self::Error> {
        let grid = GridSpec::new(raw.grid.origin, raw.grid.cell_size, raw.grid.width, raw.grid.height)?;
        if raw.rows.len() != grid.height {
            return Err(GeometryError::GridMismatch);
        }
        let mut cells = Vec::with_capacity(grid.len());
        for runs in &raw.rows {
            let start = cells.len();
            for (k, &n) in runs.iter().enumerate() {
                cells.extend(std::iter::repeat(k % 2 == 1).take(n));
            }
            if cells.len() - start != grid.width {
                return Err(GeometryError::GridMismatch);
            }
        }
        Ok(BinaryMask { grid, cells })
    }
}

impl BinaryMask {
    pub fn empty(grid: GridSpec) -> Self {
        Self { cells: vec![false; grid.len()], grid }
    }

    pub fn from_cells(grid: GridSpec, cells: Vec<bool>) -> Result<Self, GeometryError> {
        if cells.len() != grid.len() {
            return Err(GeometryError::GridMismatch);
        }
        Ok(Self { grid, cells })
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[j * self.grid.width + i]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.cells[j * self.grid.width + i] = v;
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Value at the cell containing `p`; false outside the grid.
    pub fn sample(&self, p: Vec2) -> bool {
        self.grid.locate(p).is_some_and(|(i, j)| self.get(i, j))
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask, GeometryError> {
        if self.grid != other.grid {
            return Err(GeometryError::GridMismatch);
        }
        let cells = self.cells.iter().zip(&other.cells).map(|(a, b)| *a && *b).collect();
        Ok(BinaryMask { grid: self.grid, cells })
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.grid == other.grid && self.cells.iter().zip(&other.cells).all(|(a, b)| !*a || *b)
    }

    /// Mark every cell whose center lies inside the convex polygon.
    pub fn fill_convex(&mut self, poly: &[Vec2]) {
        let (lo, hi) = bounds_of(poly);
        if let Some((i0, i1, j0, j1)) = self.grid.index_range(lo, hi) {
            for j in j0..=j1 {
                for i in i0..=i1 {
                    if point_in_convex(self.grid.cell_center(i, j), poly) {
                        self.set(i, j, true);
                    }
                }
            }
        }
    }

    /// Mark every cell whose center is strictly closer than `r` to segment `a-b`.
    pub fn stamp_capsule(&mut self, a: Vec2, b: Vec2, r: f64) {
        let lo = Vec2::new(a.x.min(b.x) - r, a.y.min(b.y) - r);
        let hi = Vec2::new(a.x.max(b.x) + r, a.y.max(b.y) + r);
        if let Some((i0, i1, j0, j1)) = self.grid.index_range(lo, hi) {
            for j in j0..=j1 {
                for i in i0..=i1 {
                    if point_segment_distance(self.grid.cell_center(i, j), a, b) < r {
                        self.set(i, j, true);
                    }
                }
            }
        }
    }
}

fn bounds_of(poly: &[Vec2]) -> (Vec2, Vec2) {
    let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in poly {
        lo = Vec2::new(lo.x.min(v.x), lo.y.min(v.y));
        hi = Vec2::new(hi.x.max(v.x), hi.y.max(v.y));
    }
    (lo, hi)
}

/// Closed containment in a counter-clockwise convex polygon.
pub fn point_in_convex(p: Vec2, poly: &[Vec2]) -> bool {
    let n = poly.len();
    (0..n).all(|i| (poly[(i + 1) % n] - poly[i]).cross(p - poly[i]) >= 0.0)
}

/// Cell-center rasterization of the floor outline.
pub fn rasterize_polygon(poly: &FloorPolygon, grid: &GridSpec) -> Result<BinaryMask, GeometryError> {
    if poly.area() <= 0.0 {
        return Err(GeometryError::DegeneratePolygon("zero area".into()));
    }
    let (lo, hi) = poly.bounds();
    if !grid.covers(lo, hi) {
        return Err(GeometryError::GridTooSmall);
    }
    let mut mask = BinaryMask::empty(*grid);
    for j in 0..grid.height {
        for i in 0..grid.width {
            if poly.contains(grid.cell_center(i, j)) {
                mask.set(i, j, true);
            }
        }
    }
    Ok(mask)
}

/// A walking path: a polyline swept by a disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Vec2>,
    pub radius: f64,
}

impl Polyline {
    pub fn segments(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn length(&self) -> f64 {
        self.segments().map(|(a, b)| (b - a).norm()).sum()
    }
}

/// Union of stamped foot disks and swept walking strips, restricted to the floor.
pub fn rasterize_free_space(
    footprints: &[(Vec2, f64)],
    trajectories: &[Polyline],
    floor: &BinaryMask,
) -> BinaryMask {
    let mut mask = BinaryMask::empty(floor.grid);
    for &(c, r) in footprints {
        mask.stamp_capsule(c, c, r);
    }
    for path in trajectories {
        if path.points.len() == 1 {
            mask.stamp_capsule(path.points[0], path.points[0], path.radius);
        }
        for (a, b) in path.segments() {
            mask.stamp_capsule(a, b, path.radius);
        }
    }
    mask.and(floor).expect("same grid")
}
