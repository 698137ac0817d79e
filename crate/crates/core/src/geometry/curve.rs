use std::f64::consts::TAU;

use super::bspline::LoopSpline;
use crate::error::{Error, Result};

/// A point or covector in the plane.
pub type Point = [f64; 2];

/// Fields on the loop parameter: `values[j]` sits at `s_j = 2 pi j / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarLoopField {
    pub values: Vec<f64>,
}

impl ScalarLoopField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("loop field sample {j} is not finite")));
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: (0..n).map(|j| f(loop_knot(j, n))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spline(&self) -> LoopSpline {
        LoopSpline::new(&self.values)
    }
}

#[inline]
pub fn loop_knot(j: usize, n: usize) -> f64 {
    TAU * j as f64 / n as f64
}

/// Ordered periodic sample of a closed planar curve.
///
/// Coordinates are kept unwrapped; reduction onto the torus happens where the
/// curve meets the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedCurve2D {
    points: Vec<Point>,
}

impl ClosedCurve2D {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let n = points.len();
        if n < 4 {
            return Err(Error::InvalidInput(format!("closed curve needs at least 4 points, got {n}")));
        }
        for (i, p) in points.iter().enumerate() {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::InvalidInput(format!("curve point {i} is not finite")));
            }
            let q = points[(i + 1) % n];
            if p[0] == q[0] && p[1] == q[1] {
                return Err(Error::InvalidInput(format!("curve points {i} and {} coincide", (i + 1) % n)));
            }
        }
        Ok(Self { points })
    }

    /// Builds a curve without validation; callers guarantee the invariants.
    pub(crate) fn from_points_unchecked(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn spline(&self) -> CurveSpline {
        CurveSpline::new(&self.points)
    }
}

/// Componentwise periodic spline of a closed curve.
#[derive(Debug, Clone)]
pub struct CurveSpline {
    pub x: LoopSpline,
    pub y: LoopSpline,
}

impl CurveSpline {
    pub fn new(points: &[Point]) -> Self {
        let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
        Self {
            x: LoopSpline::new(&xs),
            y: LoopSpline::new(&ys),
        }
    }

    pub fn eval(&self, s: f64) -> Point {
        [self.x.eval(s), self.y.eval(s)]
    }

    /// Position, tangent and its derivative.
    pub fn eval_derivs(&self, s: f64) -> (Point, Point, Point) {
        let (x, dx, ddx) = self.x.eval_derivs(s);
        let (y, dy, ddy) = self.y.eval_derivs(s);
        ([x, y], [dx, dy], [ddx, ddy])
    }

    /// Outward unit normal (tangent turned clockwise) and its derivative in s.
    pub fn normal_derivs(&self, s: f64) -> Option<(Point, Point)> {
        let (_, t, dt) = self.eval_derivs(s);
        let len = t[0].hypot(t[1]);
        if len < 1e-12 {
            return None;
        }
        let that = [t[0] / len, t[1] / len];
        let proj = that[0] * dt[0] + that[1] * dt[1];
        let dthat = [(dt[0] - proj * that[0]) / len, (dt[1] - proj * that[1]) / len];
        Some(([that[1], -that[0]], [dthat[1], -dthat[0]]))
    }
}

/// Evaluates the periodic cubic interpolant of `field` at each query angle.
pub fn spline_eval_loop(field: &ScalarLoopField, queries: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = queries.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("query {i} is not finite")));
    }
    let spline = field.spline();
    Ok(queries.iter().map(|&s| spline.eval(s.rem_euclid(TAU))).collect())
}

/// Unit normals at the curve samples, pointing outward for a counterclockwise curve.
pub fn curve_normal(q: &ClosedCurve2D) -> Result<Vec<Point>> {
    let spline = q.spline();
    let n = q.len();
    (0..n)
        .map(|j| {
            spline
                .normal_derivs(loop_knot(j, n))
                .map(|(nrm, _)| nrm)
                .ok_or(Error::DegenerateCurve { index: j })
        })
        .collect()
}
