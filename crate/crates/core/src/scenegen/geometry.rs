//! Analytic shape geometry: membership and signed distance.
//!
//! Every shape is inscribed in a circle of radius `r` around its center:
//! an equilateral triangle, a 3:2 rectangle, or the circle itself.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Triangle,
    Rectangle,
    Circle,
}

/// A posed shape in canvas coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: [f64; 2],
    pub radius: f64,
    pub orientation: f64,
}

impl Shape {
    /// Polygon vertices in counter-clockwise order (empty for circles).
    pub fn vertices(&self) -> Vec<[f64; 2]> {
        let local: Vec<[f64; 2]> = match self.kind {
            ShapeKind::Circle => return Vec::new(),
            ShapeKind::Triangle => (0..3)
                .map(|i| {
                    let a =
                        std::f64::consts::FRAC_PI_2 + i as f64 * 2.0 * std::f64::consts::PI / 3.0;
                    [self.radius * a.cos(), self.radius * a.sin()]
                })
                .collect(),
            ShapeKind::Rectangle => {
                let s = self.radius / 13f64.sqrt();
                let (hw, hh) = (3.0 * s, 2.0 * s);
                vec![[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]]
            }
        };
        let (sin, cos) = self.orientation.sin_cos();
        local
            .into_iter()
            .map(|[x, y]| {
                [
                    self.center[0] + cos * x - sin * y,
                    self.center[1] + sin * x + cos * y,
                ]
            })
            .collect()
    }

    /// Signed distance to the boundary: negative inside, positive outside.
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        if self.kind == ShapeKind::Circle {
            return (dx * dx + dy * dy).sqrt() - self.radius;
        }
        polygon_signed_distance(&self.vertices(), p)
    }

    #[inline]
    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.within(p, 0.0) && self.signed_distance(p) <= 0.0
    }

    /// Cheap bounding-circle rejection: `false` means `p` is farther than
    /// `pad` from the shape.
    #[inline]
    pub fn within(&self, p: [f64; 2], pad: f64) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let r = self.radius + pad;
        dx * dx + dy * dy <= r * r
    }
}

/// A shape with its polygon vertices precomputed, for tight raster loops.
#[derive(Debug, Clone)]
pub struct PreparedShape {
    pub shape: Shape,
    vertices: Vec<[f64; 2]>,
}

impl PreparedShape {
    pub fn new(shape: Shape) -> Self {
        Self {
            vertices: shape.vertices(),
            shape,
        }
    }

    #[inline]
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        if self.shape.kind == ShapeKind::Circle {
            let dx = p[0] - self.shape.center[0];
            let dy = p[1] - self.shape.center[1];
            (dx * dx + dy * dy).sqrt() - self.shape.radius
        } else {
            polygon_signed_distance(&self.vertices, p)
        }
    }

    #[inline]
    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.shape.within(p, 0.0) && self.signed_distance(p) <= 0.0
    }
}

/// Signed distance to a convex CCW polygon.
pub fn polygon_signed_distance(vertices: &[[f64; 2]], p: [f64; 2]) -> f64 {
    let n = vertices.len();
    let mut min_d2 = f64::INFINITY;
    let mut inside = true;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        let e = [b[0] - a[0], b[1] - a[1]];
        let w = [p[0] - a[0], p[1] - a[1]];
        let len2 = e[0] * e[0] + e[1] * e[1];
        let t = ((w[0] * e[0] + w[1] * e[1]) / len2).clamp(0.0, 1.0);
        let d = [w[0] - e[0] * t, w[1] - e[1] * t];
        min_d2 = min_d2.min(d[0] * d[0] + d[1] * d[1]);
        if e[0] * w[1] - e[1] * w[0] < 0.0 {
            inside = false;
        }
    }
    let d = min_d2.sqrt();
    if inside {
        -d
    } else {
        d
    }
}
