//! Circle reparameterisations generated by Lie exponentiation and the
//! cotangent lift that transports `(p0 n, q)` along them.
//!
//! `eta` is the time-1 flow of `d chi / dt = nu(chi)`; its derivative is
//! carried by the variational equation `d chi' / dt = nu'(chi) chi'` so that
//! the whole construction has an exact discrete adjoint.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::geometry::{coeff_adjoint_to_values, loop_knot, ClosedCurve2D, LoopSpline, Point, ScalarLoopField};
use crate::shooting::PhaseState;

/// Orientation-preserving circle diffeomorphism sampled at the loop knots.
///
/// `eta` holds lifted angles (`eta(s + 2 pi) = eta(s) + 2 pi`).
#[derive(Debug, Clone)]
pub struct Reparameterisation {
    eta: Vec<f64>,
    eta_prime: Vec<f64>,
    cache: Option<LieCache>,
}

#[derive(Debug, Clone)]
struct LieCache {
    nu: LoopSpline,
    steps: usize,
    /// `(chi, chi')` at every RK4 stage, laid out `[step][stage][particle]`.
    stages: Vec<[f64; 2]>,
}

impl Reparameterisation {
    pub fn new(eta: Vec<f64>, eta_prime: Vec<f64>) -> Result<Self> {
        if eta.len() != eta_prime.len() {
            return Err(Error::ContractViolation(format!(
                "{} eta samples but {} derivatives",
                eta.len(),
                eta_prime.len()
            )));
        }
        check_monotone(&eta, &eta_prime)?;
        Ok(Self { eta, eta_prime, cache: None })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            eta: (0..n).map(|j| loop_knot(j, n)).collect(),
            eta_prime: vec![1.0; n],
            cache: None,
        }
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn eta_prime(&self) -> &[f64] {
        &self.eta_prime
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

fn check_monotone(eta: &[f64], eta_prime: &[f64]) -> Result<()> {
    let n = eta.len();
    for j in 0..n {
        if !(eta_prime[j] > 0.0 && eta_prime[j].is_finite() && eta[j].is_finite()) {
            return Err(Error::NonDiffeomorphism { index: j });
        }
        let next = if j + 1 < n { eta[j + 1] } else { eta[0] + TAU };
        if next <= eta[j] {
            return Err(Error::NonDiffeomorphism { index: j });
        }
    }
    Ok(())
}

/// Time-1 flow of `nu` from the loop knots, RK4 with `steps` steps.
pub fn lie_exponential(nu: &ScalarLoopField, steps: usize) -> Result<Reparameterisation> {
    lie_exponential_with(nu, steps, false)
}

/// As [`lie_exponential`], keeping what [`reparam_adjoint`] needs.
pub fn lie_exponential_recorded(nu: &ScalarLoopField, steps: usize) -> Result<Reparameterisation> {
    lie_exponential_with(nu, steps, true)
}

fn lie_exponential_with(nu: &ScalarLoopField, steps: usize, record: bool) -> Result<Reparameterisation> {
    if steps == 0 {
        return Err(Error::InvalidInput("Lie exponential needs at least one step".into()));
    }
    let nu = ScalarLoopField::new(nu.values.clone())?.spline();
    let n = nu.len();
    let starts: Vec<f64> = (0..n).map(|j| loop_knot(j, n)).collect();
    let mut stages = record.then(|| Vec::with_capacity(4 * steps * n));
    let (eta, eta_prime) = flow(&nu, &starts, steps, 1.0, stages.as_mut());
    check_monotone(&eta, &eta_prime)?;
    Ok(Reparameterisation {
        eta,
        eta_prime,
        cache: stages.map(|stages| LieCache { nu, steps, stages }),
    })
}

#[inline]
fn lie_rhs(nu: &LoopSpline, y: [f64; 2]) -> [f64; 2] {
    let (v, dv, _) = nu.eval_derivs(y[0]);
    [v, dv * y[1]]
}

/// Flows `starts` for time `t`; returns `(chi, chi')`.
fn flow(
    nu: &LoopSpline,
    starts: &[f64],
    steps: usize,
    t: f64,
    mut record: Option<&mut Vec<[f64; 2]>>,
) -> (Vec<f64>, Vec<f64>) {
    let dt = t / steps as f64;
    let n = starts.len();
    let mut y: Vec<[f64; 2]> = starts.iter().map(|&s| [s, 1.0]).collect();
    let mut ys = [vec![[0.0; 2]; n], vec![[0.0; 2]; n], vec![[0.0; 2]; n], vec![[0.0; 2]; n]];
    for _ in 0..steps {
        for j in 0..n {
            let y1 = y[j];
            let k1 = lie_rhs(nu, y1);
            let y2 = [y1[0] + 0.5 * dt * k1[0], y1[1] + 0.5 * dt * k1[1]];
            let k2 = lie_rhs(nu, y2);
            let y3 = [y1[0] + 0.5 * dt * k2[0], y1[1] + 0.5 * dt * k2[1]];
            let k3 = lie_rhs(nu, y3);
            let y4 = [y1[0] + dt * k3[0], y1[1] + dt * k3[1]];
            let k4 = lie_rhs(nu, y4);
            for a in 0..2 {
                y[j][a] += dt / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
            }
            ys[0][j] = y1;
            ys[1][j] = y2;
            ys[2][j] = y3;
            ys[3][j] = y4;
        }
        if let Some(rec) = record.as_deref_mut() {
            for stage in &ys {
                rec.extend_from_slice(stage);
            }
        }
    }
    y.into_iter().map(|v| (v[0], v[1])).unzip()
}

/// Applies the cotangent lift of `eta` to `(p0 n, q1)`.
///
/// Returns `pbar_j = p0(eta_j) n(eta_j) eta'_j` and `qbar_j = q1(eta_j)`, all
/// fields spline-evaluated at the lifted angles.
pub fn cotangent_lift(p0: &ScalarLoopField, q1: &ClosedCurve2D, eta: &Reparameterisation) -> Result<PhaseState> {
    let n = q1.len();
    if p0.len() != n || eta.len() != n {
        return Err(Error::ContractViolation(format!(
            "cotangent lift sizes differ: p0 {}, curve {n}, eta {}",
            p0.len(),
            eta.len()
        )));
    }
    let a = p0.spline();
    let curve = q1.spline();
    let mut p = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    for j in 0..n {
        let s = eta.eta[j];
        let (nrm, _) = curve.normal_derivs(s).ok_or(Error::DegenerateCurve { index: j })?;
        let w = a.eval(s) * eta.eta_prime[j];
        p.push([w * nrm[0], w * nrm[1]]);
        q.push(curve.eval(s));
    }
    PhaseState::new(p, ClosedCurve2D::new(q)?)
}

/// Gradients of a scalar with respect to the samples of `p0` and `nu`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamGradient {
    pub p0: ScalarLoopField,
    pub nu: ScalarLoopField,
}

/// Exact transpose of the linearised `lie_exponential` + `cotangent_lift`
/// composite, given cotangents on the lifted covectors and points.
///
/// `eta` must come from [`lie_exponential_recorded`].
pub fn reparam_adjoint(
    p0: &ScalarLoopField,
    q1: &ClosedCurve2D,
    eta: &Reparameterisation,
    pbar_bar: &[Point],
    qbar_bar: &[Point],
) -> Result<ReparamGradient> {
    let cache = eta
        .cache
        .as_ref()
        .ok_or_else(|| Error::ContractViolation("reparameterisation was built without a forward cache".into()))?;
    let n = eta.len();
    if p0.len() != n || q1.len() != n || pbar_bar.len() != n || qbar_bar.len() != n {
        return Err(Error::ContractViolation("reparam adjoint inputs have mismatched lengths".into()));
    }
    let a = p0.spline();
    let curve = q1.spline();

    // cotangent lift
    let mut a_coeff_bar = vec![0.0; n];
    let mut ybar: Vec<[f64; 2]> = Vec::with_capacity(n);
    for j in 0..n {
        let (s, e) = (eta.eta[j], eta.eta_prime[j]);
        let st = a.stencil(s);
        let (av, da) = (0..4).fold((0.0, 0.0), |acc, m| {
            let c = a.coeffs()[st.idx[m]];
            (acc.0 + st.w[m] * c, acc.1 + st.dw[m] * c)
        });
        let (nrm, dnrm) = curve.normal_derivs(s).ok_or(Error::DegenerateCurve { index: j })?;
        let (_, tangent, _) = curve.eval_derivs(s);
        let pb = pbar_bar[j];
        let pn = pb[0] * nrm[0] + pb[1] * nrm[1];
        let pdn = pb[0] * dnrm[0] + pb[1] * dnrm[1];
        let abar = pn * e;
        for m in 0..4 {
            a_coeff_bar[st.idx[m]] += st.w[m] * abar;
        }
        let eta_bar = da * e * pn + av * e * pdn + tangent[0] * qbar_bar[j][0] + tangent[1] * qbar_bar[j][1];
        ybar.push([eta_bar, av * pn]);
    }

    // Lie exponential, reverse RK4
    let nu = &cache.nu;
    let dt = 1.0 / cache.steps as f64;
    let mut nu_coeff_bar = vec![0.0; n];
    let weights = [dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0];
    let back = [0.0, 0.5 * dt, 0.5 * dt, dt];
    for step in (0..cache.steps).rev() {
        let block = &cache.stages[4 * step * n..4 * (step + 1) * n];
        for j in 0..n {
            let mut kbar = weights.map(|w| [w * ybar[j][0], w * ybar[j][1]]);
            for s in (0..4).rev() {
                let y = block[s * n + j];
                let st = nu.stencil(y[0]);
                let (mut dv, mut d2v) = (0.0, 0.0);
                for m in 0..4 {
                    let c = nu.coeffs()[st.idx[m]];
                    dv += st.dw[m] * c;
                    d2v += st.d2w[m] * c;
                    nu_coeff_bar[st.idx[m]] += kbar[s][0] * st.w[m] + kbar[s][1] * st.dw[m] * y[1];
                }
                let yb = [kbar[s][0] * dv + kbar[s][1] * d2v * y[1], kbar[s][1] * dv];
                ybar[j][0] += yb[0];
                ybar[j][1] += yb[1];
                if s > 0 {
                    kbar[s - 1][0] += back[s] * yb[0];
                    kbar[s - 1][1] += back[s] * yb[1];
                }
            }
        }
    }

    Ok(ReparamGradient {
        p0: ScalarLoopField { values: coeff_adjoint_to_values(&a_coeff_bar) },
        nu: ScalarLoopField { values: coeff_adjoint_to_values(&nu_coeff_bar) },
    })
}
