//! Fields on the flat torus `[0, 2 pi)^2` and the particle/grid transfer.
//!
//! Particle evaluation of a grid field is `W(q) P v`, where `P` is the tensor
//! B-spline prefilter and `W(q)` the 4x4 weight stencil at `q`. Spreading is
//! the exact transpose `P W(q)^T p`. Both `P` and the metric inverse are
//! Fourier multipliers, applied through one complex FFT that carries the two
//! vector components as real and imaginary parts.

use std::cell::RefCell;
use std::f64::consts::TAU;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::bspline::{self, Stencil};
use super::curve::Point;
use crate::error::{Error, Result};

/// Parameters of the metric operator `A = (1 - alpha^2 Laplacian)^gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub alpha: f64,
    pub gamma: u32,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self { alpha: 0.4, gamma: 2 }
    }
}

impl MetricSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Validation(format!("metric.alpha must be positive, got {}", self.alpha)));
        }
        if self.gamma < 2 {
            return Err(Error::Validation(format!("metric.gamma must be at least 2, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Eigenvalue of `A^{-1}` at squared integer wavenumber `k2`.
    #[inline]
    pub fn inverse_symbol(&self, k2: f64) -> f64 {
        (1.0 + self.alpha * self.alpha * k2).powi(-(self.gamma as i32))
    }
}

/// Two-component field on an `n x n` periodic grid; node `(a, b)` sits at
/// `(2 pi a / n, 2 pi b / n)` and is stored at `data[a * n + b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusGridField {
    n: usize,
    data: Vec<Point>,
}

impl TorusGridField {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![[0.0; 2]; n * n],
        }
    }

    pub fn from_data(n: usize, data: Vec<Point>) -> Result<Self> {
        if !n.is_power_of_two() || n < 4 {
            return Err(Error::InvalidInput(format!("grid size {n} is not a power of two >= 4")));
        }
        if data.len() != n * n {
            return Err(Error::ContractViolation(format!("grid data has {} nodes, expected {}", data.len(), n * n)));
        }
        if data.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
            return Err(Error::InvalidInput("grid field has non-finite entries".into()));
        }
        Ok(Self { n, data })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(f64, f64) -> Point) -> Self {
        let h = TAU / n as f64;
        let mut data = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                data.push(f(a as f64 * h, b as f64 * h));
            }
        }
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[Point] {
        &self.data
    }

    /// Plain nodal inner product `sum_nodes <self, other>`.
    pub fn dot(&self, other: &TorusGridField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(u, v)| u[0] * v[0] + u[1] * v[1])
            .sum()
    }

    pub fn scale(mut self, c: f64) -> Self {
        for v in &mut self.data {
            v[0] *= c;
            v[1] *= c;
        }
        self
    }
}

#[inline]
fn wavenumber(m: usize, n: usize) -> f64 {
    if m <= n / 2 {
        m as f64
    } else {
        m as f64 - n as f64
    }
}

/// Stencil of a particle on the grid: per-axis B-spline data.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GridStencil {
    pub x: Stencil,
    pub y: Stencil,
}

/// Value, gradient (`grad[a][b] = d u_a / d x_b`) and optionally Hessian
/// (`hess[a][b][c] = d^2 u_a / d x_b d x_c`) of a coefficient field at a point.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PointJet {
    pub value: Point,
    pub grad: [[f64; 2]; 2],
    pub hess: [[[f64; 2]; 2]; 2],
}

#[derive(Default)]
struct Workspace {
    rows: Vec<Complex<f64>>,
    cols: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl Workspace {
    fn buffers(&mut self, len: usize, scratch_len: usize) -> (&mut [Complex<f64>], &mut [Complex<f64>], &mut [Complex<f64>]) {
        let zero = Complex::new(0.0, 0.0);
        self.rows.resize(len, zero);
        self.cols.resize(len, zero);
        self.scratch.resize(scratch_len, zero);
        (&mut self.rows[..len], &mut self.cols[..len], &mut self.scratch[..scratch_len])
    }
}

/// `(ar, ai) += w * (f, g)` elementwise.
fn axpy_pair(ar: &mut [f64], ai: &mut [f64], w: &[f64], f: &[f64], g: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were just detected
        return unsafe { axpy_pair_avx(ar, ai, w, f, g) };
    }
    axpy_pair_generic(ar, ai, w, f, g)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn axpy_pair_avx(ar: &mut [f64], ai: &mut [f64], w: &[f64], f: &[f64], g: &[f64]) {
    axpy_pair_generic(ar, ai, w, f, g)
}

#[inline(always)]
fn axpy_pair_generic(ar: &mut [f64], ai: &mut [f64], w: &[f64], f: &[f64], g: &[f64]) {
    let n = ar.len();
    let (ai, w, f, g) = (&mut ai[..n], &w[..n], &f[..n], &g[..n]);
    for j in 0..n {
        ar[j] += w[j] * f[j];
        ai[j] += w[j] * g[j];
    }
}

/// A Fourier multiplier together with its x-direction convolution kernel.
#[derive(Debug, Clone)]
pub(crate) struct Multiplier {
    symbol: Vec<f64>,
    kernel: Vec<f64>,
}

thread_local! {
    static WORKSPACE: RefCell<Workspace> = RefCell::new(Workspace::default());
}

/// FFT workspace for one grid size, with the spectral multipliers used by the
/// shooting equations.
pub struct SpectralGrid {
    n: usize,
    h: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch_len: usize,
    prefilter: Vec<f64>,
}

impl std::fmt::Debug for SpectralGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralGrid").field("n", &self.n).finish()
    }
}

impl SpectralGrid {
    pub fn new(n: usize) -> Result<Self> {
        if !n.is_power_of_two() || n < 4 {
            return Err(Error::InvalidInput(format!("grid size {n} is not a power of two >= 4")));
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let scratch_len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        let prefilter = (0..n)
            .map(|m| 3.0 / (2.0 + (TAU * m as f64 / n as f64).cos()))
            .collect();
        Ok(Self {
            n,
            h: TAU / n as f64,
            fwd,
            inv,
            scratch_len,
            prefilter,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    #[inline]
    pub(crate) fn stencil(&self, q: Point) -> GridStencil {
        GridStencil {
            x: bspline::stencil(q[0], self.h, self.n),
            y: bspline::stencil(q[1], self.h, self.n),
        }
    }

    /// Applies a Fourier multiplier `symbol[kx * n + ky]` to both components.
    ///
    /// The symbol must be symmetric under `kx <-> ky`, which lets the
    /// transform stay in transposed layout between the forward and inverse
    /// passes.
    pub(crate) fn apply_multiplier(&self, field: &[Point], symbol: &[f64]) -> Vec<Point> {
        self.apply_multiplier_rows(field, symbol, None, None)
    }

    /// As [`apply_multiplier`](Self::apply_multiplier), with `in_rows` naming
    /// the only x-rows where `field` may be nonzero and `out_rows` the only
    /// x-rows of the result that will be read (others are left zero).
    pub(crate) fn apply_multiplier_rows(
        &self,
        field: &[Point],
        symbol: &[f64],
        in_rows: Option<&[bool]>,
        out_rows: Option<&[bool]>,
    ) -> Vec<Point> {
        let n = self.n;
        let zero = Complex::new(0.0, 0.0);
        let active = |mask: Option<&[bool]>, a: usize| mask.is_none_or(|m| m[a]);
        WORKSPACE.with(|ws| {
            let mut ws = ws.borrow_mut();
            let (rows, cols, scratch) = ws.buffers(n * n, self.scratch_len);

            // transform along y on the occupied rows, transposing into `cols`
            cols.fill(zero);
            for a in (0..n).filter(|&a| active(in_rows, a)) {
                let row = &mut rows[a * n..(a + 1) * n];
                for (c, v) in row.iter_mut().zip(&field[a * n..(a + 1) * n]) {
                    *c = Complex::new(v[0], v[1]);
                }
                self.fwd.process_with_scratch(row, scratch);
                for (kb, c) in row.iter().enumerate() {
                    cols[kb * n + a] = *c;
                }
            }
            // along x for every ky, multiply, and back
            self.fwd.process_with_scratch(cols, scratch);
            for (c, s) in cols.iter_mut().zip(symbol) {
                *c *= *s;
            }
            self.inv.process_with_scratch(cols, scratch);

            let norm = 1.0 / (n * n) as f64;
            let mut out = vec![[0.0; 2]; n * n];
            for a in (0..n).filter(|&a| active(out_rows, a)) {
                let row = &mut rows[a * n..(a + 1) * n];
                for (kb, c) in row.iter_mut().enumerate() {
                    *c = cols[kb * n + a];
                }
                self.inv.process_with_scratch(row, scratch);
                for (o, c) in out[a * n..(a + 1) * n].iter_mut().zip(row.iter()) {
                    *o = [c.re * norm, c.im * norm];
                }
            }
            out
        })
    }

    /// Precomputes the x-direction convolution kernel of `symbol` (which must
    /// be real and even in `kx`) for [`apply_rows`](Self::apply_rows).
    pub(crate) fn multiplier(&self, symbol: Vec<f64>) -> Multiplier {
        let n = self.n;
        // kernel[d * n + kb] = (1/n) sum_ka symbol[ka, kb] cos(2 pi ka d / n)
        let mut kernel = vec![0.0; n * n];
        for d in 0..n {
            for ka in 0..n {
                let c = (TAU * ((ka * d) % n) as f64 / n as f64).cos() / n as f64;
                for kb in 0..n {
                    kernel[d * n + kb] += c * symbol[ka * n + kb];
                }
            }
        }
        Multiplier { symbol, kernel }
    }

    /// Applies `scale * m` to a row-compact field: row `i` of `field` is grid
    /// row `rows[i]` (ascending), all other rows are zero, and only the listed
    /// rows of the result are returned, in the same layout. Sparse row sets
    /// skip the x-direction transforms in favour of a direct circular
    /// convolution.
    pub(crate) fn apply_compact(&self, m: &Multiplier, field: &[Point], rows: &[usize], scale: f64) -> Vec<Point> {
        let n = self.n;
        let r = rows.len();
        debug_assert_eq!(field.len(), r * n);
        if r * r > n * n / 3 {
            let mut full = vec![[0.0; 2]; n * n];
            let mut mask = vec![false; n];
            for (i, &a) in rows.iter().enumerate() {
                full[a * n..(a + 1) * n].copy_from_slice(&field[i * n..(i + 1) * n]);
                mask[a] = true;
            }
            let full = self.apply_multiplier_rows(&full, &m.symbol, Some(&mask), Some(&mask));
            return rows
                .iter()
                .flat_map(|&a| full[a * n..(a + 1) * n].iter().map(|v| [v[0] * scale, v[1] * scale]))
                .collect();
        }
        let zero = Complex::new(0.0, 0.0);
        WORKSPACE.with(|ws| {
            let ws = &mut *ws.borrow_mut();
            let len = r * n;
            ws.re.resize(len, 0.0);
            ws.im.resize(len, 0.0);
            ws.rows.resize(n, zero);
            ws.scratch.resize(self.scratch_len, zero);
            let (re, im) = (&mut ws.re[..len], &mut ws.im[..len]);
            let (row, scratch) = (&mut ws.rows[..n], &mut ws.scratch[..self.scratch_len]);
            // spectra of the occupied rows, split into re/im for the convolution
            for i in 0..r {
                for (c, v) in row.iter_mut().zip(&field[i * n..(i + 1) * n]) {
                    *c = Complex::new(v[0], v[1]);
                }
                self.fwd.process_with_scratch(row, scratch);
                for (kb, c) in row.iter().enumerate() {
                    re[i * n + kb] = c.re;
                    im[i * n + kb] = c.im;
                }
            }
            let norm = scale / n as f64;
            let mut out = Vec::with_capacity(len);
            let (mut acc_re, mut acc_im) = (vec![0.0; n], vec![0.0; n]);
            for &b in rows {
                acc_re.fill(0.0);
                acc_im.fill(0.0);
                for (i, &a) in rows.iter().enumerate() {
                    let d = (b + n - a) % n;
                    let k = &m.kernel[d * n..(d + 1) * n];
                    axpy_pair(&mut acc_re, &mut acc_im, k, &re[i * n..(i + 1) * n], &im[i * n..(i + 1) * n]);
                }
                for (c, (r, i)) in row.iter_mut().zip(acc_re.iter().zip(&acc_im)) {
                    *c = Complex::new(*r, *i);
                }
                self.inv.process_with_scratch(row, scratch);
                out.extend(row.iter().map(|c| [c.re * norm, c.im * norm]));
            }
            out
        })
    }

    pub(crate) fn prefilter_symbol(&self) -> Vec<f64> {
        let n = self.n;
        let mut s = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                s.push(self.prefilter[a] * self.prefilter[b]);
            }
        }
        s
    }

    pub(crate) fn metric_symbol(&self, spec: &MetricSpec) -> Vec<f64> {
        let n = self.n;
        let mut s = Vec::with_capacity(n * n);
        for a in 0..n {
            let kx = wavenumber(a, n);
            for b in 0..n {
                let ky = wavenumber(b, n);
                s.push(spec.inverse_symbol(kx * kx + ky * ky));
            }
        }
        s
    }

    /// Adds `W(q)^T p` (no prefilter) into `out`.
    pub(crate) fn deposit(&self, out: &mut [Point], st: &GridStencil, p: Point) {
        let n = self.n;
        for i in 0..4 {
            let row = st.x.idx[i] * n;
            let wx = st.x.w[i];
            for j in 0..4 {
                let w = wx * st.y.w[j];
                let node = &mut out[row + st.y.idx[j]];
                node[0] += w * p[0];
                node[1] += w * p[1];
            }
        }
    }

    /// Adds `sum_b g[b] * d_b W(q)^T` weighted by `coef` into `out`:
    /// deposits the covector `coef` through the directional derivative stencil `g . grad`.
    pub(crate) fn deposit_derivative(&self, out: &mut [Point], st: &GridStencil, g: [f64; 2], coef: Point) {
        let n = self.n;
        for i in 0..4 {
            let row = st.x.idx[i] * n;
            for j in 0..4 {
                let w = g[0] * st.x.dw[i] * st.y.w[j] + g[1] * st.x.w[i] * st.y.dw[j];
                let node = &mut out[row + st.y.idx[j]];
                node[0] += w * coef[0];
                node[1] += w * coef[1];
            }
        }
    }

    /// Value of a coefficient field (already prefiltered) at a stencil.
    #[inline]
    pub(crate) fn value(&self, coeffs: &[Point], st: &GridStencil) -> Point {
        let n = self.n;
        let mut v = [0.0; 2];
        for i in 0..4 {
            let row = st.x.idx[i] * n;
            for j in 0..4 {
                let w = st.x.w[i] * st.y.w[j];
                let c = coeffs[row + st.y.idx[j]];
                v[0] += w * c[0];
                v[1] += w * c[1];
            }
        }
        v
    }

    /// Value and gradient of a coefficient field at a stencil.
    #[inline]
    pub(crate) fn value_grad(&self, coeffs: &[Point], st: &GridStencil) -> PointJet {
        let n = self.n;
        let mut jet = PointJet::default();
        for i in 0..4 {
            let row = st.x.idx[i] * n;
            let (wx, dwx) = (st.x.w[i], st.x.dw[i]);
            for j in 0..4 {
                let (wy, dwy) = (st.y.w[j], st.y.dw[j]);
                let c = coeffs[row + st.y.idx[j]];
                let (w, gx, gy) = (wx * wy, dwx * wy, wx * dwy);
                for a in 0..2 {
                    jet.value[a] += w * c[a];
                    jet.grad[a][0] += gx * c[a];
                    jet.grad[a][1] += gy * c[a];
                }
            }
        }
        jet
    }

    /// Value, gradient and Hessian of a coefficient field at a stencil.
    pub(crate) fn jet(&self, coeffs: &[Point], st: &GridStencil) -> PointJet {
        let n = self.n;
        let mut jet = PointJet::default();
        for i in 0..4 {
            let row = st.x.idx[i] * n;
            let (wx, dwx, d2wx) = (st.x.w[i], st.x.dw[i], st.x.d2w[i]);
            for j in 0..4 {
                let (wy, dwy, d2wy) = (st.y.w[j], st.y.dw[j], st.y.d2w[j]);
                let c = coeffs[row + st.y.idx[j]];
                let (w, gx, gy) = (wx * wy, dwx * wy, wx * dwy);
                let (hxx, hxy, hyy) = (d2wx * wy, dwx * dwy, wx * d2wy);
                for a in 0..2 {
                    jet.value[a] += w * c[a];
                    jet.grad[a][0] += gx * c[a];
                    jet.grad[a][1] += gy * c[a];
                    jet.hess[a][0][0] += hxx * c[a];
                    jet.hess[a][0][1] += hxy * c[a];
                    jet.hess[a][1][1] += hyy * c[a];
                }
            }
        }
        for a in 0..2 {
            jet.hess[a][1][0] = jet.hess[a][0][1];
        }
        jet
    }
}

fn check_points(points: &[Point]) -> Result<()> {
    match points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
        Some(i) => Err(Error::InvalidInput(format!("point {i} is not finite"))),
        None => Ok(()),
    }
}

/// Tensor-product periodic cubic spline interpolation of `field` at `points`.
pub fn spline_eval_grid(field: &TorusGridField, points: &[Point]) -> Result<Vec<Point>> {
    check_points(points)?;
    let grid = SpectralGrid::new(field.n)?;
    let coeffs = grid.apply_multiplier(&field.data, &grid.prefilter_symbol());
    Ok(points
        .iter()
        .map(|&q| grid.value(&coeffs, &grid.stencil(q)))
        .collect())
}

/// Exact transpose of [`spline_eval_grid`]: spreads covectors `p` at `q` onto the grid.
pub fn spread_to_grid(p: &[Point], q: &[Point], n_g: usize) -> Result<TorusGridField> {
    if p.len() != q.len() {
        return Err(Error::ContractViolation(format!(
            "spread_to_grid: {} covectors for {} points",
            p.len(),
            q.len()
        )));
    }
    check_points(q)?;
    let grid = SpectralGrid::new(n_g)?;
    let mut raw = vec![[0.0; 2]; n_g * n_g];
    for (pi, &qi) in p.iter().zip(q) {
        grid.deposit(&mut raw, &grid.stencil(qi), *pi);
    }
    Ok(TorusGridField {
        n: n_g,
        data: grid.apply_multiplier(&raw, &grid.prefilter_symbol()),
    })
}

/// `A^{-1} m` by spectral multiplication with `(1 + alpha^2 |k|^2)^{-gamma}`.
pub fn metric_inverse(m: &TorusGridField, spec: &MetricSpec) -> Result<TorusGridField> {
    let grid = SpectralGrid::new(m.n)?;
    Ok(TorusGridField {
        n: m.n,
        data: grid.apply_multiplier(&m.data, &grid.metric_symbol(spec)),
    })
}
