//! Periodic cubic B-spline machinery.
//!
//! A uniform periodic cubic spline on `n` knots with spacing `h` is written as
//! `f(x) = sum_m c_m B((x - m h) / h)` with the cardinal cubic B-spline `B`.
//! Interpolating node values requires solving the circulant system
//! `(c_{m-1} + 4 c_m + c_{m+1}) / 6 = v_m`; the inverse of that system (the
//! prefilter) is symmetric, so it is its own transpose.

use std::f64::consts::TAU;

/// Local support of a query: the four node indices touched and the weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub dw: [f64; 4],
    pub d2w: [f64; 4],
}

#[inline]
pub(crate) fn weights(f: f64) -> [f64; 4] {
    let f2 = f * f;
    let f3 = f2 * f;
    let g = 1.0 - f;
    [
        g * g * g / 6.0,
        (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0,
        (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0,
        f3 / 6.0,
    ]
}

#[inline]
pub(crate) fn d_weights(f: f64) -> [f64; 4] {
    let f2 = f * f;
    let g = 1.0 - f;
    [
        -0.5 * g * g,
        0.5 * (3.0 * f2 - 4.0 * f),
        0.5 * (-3.0 * f2 + 2.0 * f + 1.0),
        0.5 * f2,
    ]
}

#[inline]
pub(crate) fn d2_weights(f: f64) -> [f64; 4] {
    [1.0 - f, 3.0 * f - 2.0, 1.0 - 3.0 * f, f]
}

/// Cell location of `x` on a periodic lattice of `n` nodes with spacing `h`.
#[inline]
pub(crate) fn locate(x: f64, h: f64, n: usize) -> ([usize; 4], f64) {
    let t = x / h;
    let cell = t.floor();
    let f = t - cell;
    // reduce in floating point: exact for integral `cell`, and cannot overflow
    let base = (cell - 1.0).rem_euclid(n as f64) as usize;
    let mut idx = [0usize; 4];
    for (m, slot) in idx.iter_mut().enumerate() {
        *slot = (base + m) % n;
    }
    (idx, f)
}

#[inline]
pub(crate) fn stencil(x: f64, h: f64, n: usize) -> Stencil {
    let (idx, f) = locate(x, h, n);
    let mut dw = d_weights(f);
    let mut d2w = d2_weights(f);
    for m in 0..4 {
        dw[m] /= h;
        d2w[m] /= h * h;
    }
    Stencil {
        idx,
        w: weights(f),
        dw,
        d2w,
    }
}

/// Pole of the cubic B-spline prefilter.
const POLE: f64 = -0.267_949_192_431_122_7; // sqrt(3) - 2

/// Solves the periodic interpolation system for spline coefficients.
///
/// Exact two-pass recursive filter with closed-form periodic initialisation.
pub(crate) fn prefilter_periodic(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let z = POLE;
    let zn = z.powi(n as i32);
    let norm = 1.0 / (1.0 - zn);

    let mut causal = vec![0.0; n];
    let mut acc = 0.0;
    let mut zj = 1.0;
    for j in 0..n {
        acc += zj * values[(n - j) % n];
        zj *= z;
    }
    causal[0] = acc * norm;
    for k in 1..n {
        causal[k] = values[k] + z * causal[k - 1];
    }

    let mut anti = vec![0.0; n];
    let mut acc = 0.0;
    let mut zj = 1.0;
    for j in 0..n {
        acc += zj * causal[(n - 1 + j) % n];
        zj *= z;
    }
    anti[n - 1] = -z * norm * acc;
    for k in (0..n - 1).rev() {
        anti[k] = z * (anti[k + 1] - causal[k]);
    }
    anti.iter_mut().for_each(|c| *c *= 6.0);
    anti
}

/// Periodic cubic spline on the loop parameter `s in [0, 2 pi)`.
#[derive(Debug, Clone)]
pub struct LoopSpline {
    coeffs: Vec<f64>,
    h: f64,
}

impl LoopSpline {
    /// Interpolates `values[j]` at `s_j = 2 pi j / n`.
    pub fn new(values: &[f64]) -> Self {
        assert!(values.len() >= 4, "periodic spline needs at least 4 knots");
        Self {
            coeffs: prefilter_periodic(values),
            h: TAU / values.len() as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    #[inline]
    pub(crate) fn stencil(&self, s: f64) -> Stencil {
        stencil(s, self.h, self.coeffs.len())
    }

    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        let (idx, f) = locate(s, self.h, self.coeffs.len());
        let w = weights(f);
        (0..4).map(|m| w[m] * self.coeffs[idx[m]]).sum()
    }

    /// Value, first and second derivative at `s`.
    #[inline]
    pub fn eval_derivs(&self, s: f64) -> (f64, f64, f64) {
        let st = self.stencil(s);
        let mut v = (0.0, 0.0, 0.0);
        for m in 0..4 {
            let c = self.coeffs[st.idx[m]];
            v.0 += st.w[m] * c;
            v.1 += st.dw[m] * c;
            v.2 += st.d2w[m] * c;
        }
        v
    }
}

/// Adjoint of `LoopSpline::new` followed by point evaluation: maps cotangents
/// on spline coefficients back to cotangents on the knot values.
pub(crate) fn coeff_adjoint_to_values(coeff_bar: &[f64]) -> Vec<f64> {
    prefilter_periodic(coeff_bar)
}
