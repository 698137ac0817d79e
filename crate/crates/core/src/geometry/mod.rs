//! Interpolation, spreading, spectral solves and curve primitives.

pub(crate) mod bspline;
mod curve;
mod grid;

pub use bspline::LoopSpline;
pub(crate) use bspline::coeff_adjoint_to_values;
pub use curve::{curve_normal, loop_knot, spline_eval_loop, ClosedCurve2D, CurveSpline, Point, ScalarLoopField};
pub(crate) use grid::{GridStencil, Multiplier};
pub use grid::{metric_inverse, spline_eval_grid, spread_to_grid, MetricSpec, SpectralGrid, TorusGridField};
