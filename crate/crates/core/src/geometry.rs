//! Exact geometry for oriented grasp rectangles and axis-aligned boxes.
//!
//! Rotated-rectangle overlap uses Sutherland–Hodgman clipping of one convex
//! polygon against the half-planes of the other, followed by the shoelace
//! formula. All computation is in `f64`.

use thiserror::Error;

use crate::scene::{GraspRect, ObjectBox};

/// Points within this distance of a clip edge count as inside.
pub const BOUNDARY_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon is not strictly convex and counter-clockwise at vertex {0}")]
    NotConvexCcw(usize),
}

/// Counter-clockwise convex polygon, pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<(f64, f64)>,
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Signed shoelace area; positive for counter-clockwise vertex order.
pub fn shoelace_area(vertices: &[(f64, f64)]) -> f64 {
    if vertices.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (i, &(x0, y0)) in vertices.iter().enumerate() {
        let (x1, y1) = vertices[(i + 1) % vertices.len()];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<(f64, f64)>) -> Result<Self, GeometryError> {
        let n = vertices.len();
        if n < 3 {
            return Err(GeometryError::TooFewVertices(n));
        }
        for i in 0..n {
            let c = cross(vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
            if c <= BOUNDARY_EPS {
                return Err(GeometryError::NotConvexCcw((i + 1) % n));
            }
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        shoelace_area(&self.vertices)
    }

    pub fn centroid(&self) -> (f64, f64) {
        // Vertex mean is exact for parallelograms, which is all we build.
        let n = self.vertices.len() as f64;
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x, ay + y));
        (sx / n, sy / n)
    }

    /// Applies a rotation by `angle_rad` about the origin followed by a translation.
    pub fn transformed(&self, angle_rad: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = angle_rad.sin_cos();
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|&(x, y)| (c * x - s * y + tx, s * x + c * y + ty))
                .collect(),
        }
    }
}

/// Corners of the grasp rectangle, counter-clockwise.
pub fn rect_to_polygon(r: &GraspRect) -> ConvexPolygon {
    let (s, c) = r.theta_deg.to_radians().sin_cos();
    let (hw, hh) = (0.5 * r.w, 0.5 * r.h);
    // u = opening axis, v = finger axis.
    let (ux, uy) = (c * hw, s * hw);
    let (vx, vy) = (-s * hh, c * hh);
    ConvexPolygon {
        vertices: vec![
            (r.cx - ux - vx, r.cy - uy - vy),
            (r.cx + ux - vx, r.cy + uy - vy),
            (r.cx + ux + vx, r.cy + uy + vy),
            (r.cx - ux + vx, r.cy - uy + vy),
        ],
    }
}

fn clip_against_edge(subject: &[(f64, f64)], e0: (f64, f64), e1: (f64, f64)) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(subject.len() + 1);
    if subject.is_empty() {
        return out;
    }
    let inside = |p: (f64, f64)| cross(e0, e1, p) >= -BOUNDARY_EPS;
    let mut prev = *subject.last().unwrap();
    let mut prev_in = inside(prev);
    for &cur in subject {
        let cur_in = inside(cur);
        if cur_in != prev_in {
            // Segment crosses the edge line; solve for the crossing parameter.
            let dp = cross(e0, e1, prev);
            let dc = cross(e0, e1, cur);
            let t = dp / (dp - dc);
            out.push((prev.0 + t * (cur.0 - prev.0), prev.1 + t * (cur.1 - prev.1)));
        }
        if cur_in {
            out.push(cur);
        }
        prev = cur;
        prev_in = cur_in;
    }
    out
}

/// Area of the overlap between two convex polygons.
pub fn convex_intersection_area(a: &ConvexPolygon, b: &ConvexPolygon) -> f64 {
    let mut clipped = a.vertices.clone();
    let n = b.vertices.len();
    for i in 0..n {
        clipped = clip_against_edge(&clipped, b.vertices[i], b.vertices[(i + 1) % n]);
        if clipped.len() < 3 {
            return 0.0;
        }
    }
    let area = shoelace_area(&clipped).max(0.0);
    area.min(a.area()).min(b.area())
}

/// Jaccard index of two oriented rectangles.
pub fn jaccard_rotated(r1: &GraspRect, r2: &GraspRect) -> f64 {
    let p1 = rect_to_polygon(r1);
    let p2 = rect_to_polygon(r2);
    let inter = convex_intersection_area(&p1, &p2);
    let union = r1.area() + r2.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Distance between two grasp orientations, which are lines and so 180° periodic.
pub fn grasp_angle_diff(t1_deg: f64, t2_deg: f64) -> f64 {
    let d = (t1_deg - t2_deg).rem_euclid(180.0);
    d.min(180.0 - d)
}

pub fn aabb_iou(a: &ObjectBox, b: &ObjectBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Smallest box enclosing both; identity fields are taken from `a`.
pub fn box_union(a: &ObjectBox, b: &ObjectBox) -> ObjectBox {
    ObjectBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
        ..*a
    }
}

/// Overlap box, or `None` when the boxes share no positive area.
pub fn box_intersection(a: &ObjectBox, b: &ObjectBox) -> Option<ObjectBox> {
    let x1 = a.x1.max(b.x1);
    let y1 = a.y1.max(b.y1);
    let x2 = a.x2.min(b.x2);
    let y2 = a.y2.min(b.y2);
    (x2 > x1 && y2 > y1).then_some(ObjectBox { x1, y1, x2, y2, ..*a })
}

pub fn same_extent(a: &ObjectBox, b: &ObjectBox) -> bool {
    a.x1 == b.x1 && a.y1 == b.y1 && a.x2 == b.x2 && a.y2 == b.y2
}
