//! MAP estimation: dense BFGS with a strong-Wolfe line search, run in
//! whitened prior coefficients where the Cameron-Martin term is `|z|^2 / 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::CurvePotential;
use crate::prior::{cameron_martin_coeffs, coefficient_std, PriorPair, SpectralField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Stop when the gradient 2-norm falls below this.
    pub grad_tol: f64,
    /// Stop when a step moves the iterate less than this (relative).
    pub step_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-6,
            step_tol: 1e-12,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::Validation(format!(
                "optimizer needs 0 < wolfe_c1 < wolfe_c2 < 1, got {} and {}",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if !(self.grad_tol >= 0.0 && self.step_tol >= 0.0) {
            return Err(Error::Validation("optimizer tolerances must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
    /// The line search could not satisfy the Wolfe conditions; the best
    /// iterate so far is returned.
    LineSearchFailure,
}

/// Data of one accepted line-search step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineStep {
    pub alpha: f64,
    pub f0: f64,
    pub df0: f64,
    pub f: f64,
    pub df: f64,
}

impl LineStep {
    pub fn satisfies_wolfe(&self, c1: f64, c2: f64) -> bool {
        sufficient_decrease(self.f, self.df, self.f0, self.alpha, self.df0, c1) && self.df.abs() <= -c2 * self.df0
    }
}

/// Relative width of the band in which objective values are treated as
/// equal up to rounding.
const F_BAND: f64 = 1e-13;

/// Armijo condition, or inside the rounding band of `f0` the approximate
/// Wolfe test of Hager and Zhang, which only reads the slope.
fn sufficient_decrease(f: f64, df: f64, f0: f64, alpha: f64, df0: f64, c1: f64) -> bool {
    f <= f0 + c1 * alpha * df0 || (f <= f0 + F_BAND * f0.abs() && df <= (1.0 - 2.0 * c1) * -df0)
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Objective at each accepted iterate, starting with the initial point;
    /// nonincreasing up to rounding of the objective.
    pub values: Vec<f64>,
    pub steps: Vec<LineStep>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

type Eval = Option<(f64, Vec<f64>)>;

struct Trial {
    alpha: f64,
    f: f64,
    df: f64,
    g: Vec<f64>,
}

/// Stationary point of the cubic matching values and slopes at two trials
/// (exact for quadratics).
fn cubic_min(a: &Trial, b: &Trial) -> Option<f64> {
    if !(a.f.is_finite() && b.f.is_finite() && a.df.is_finite() && b.df.is_finite()) {
        return None;
    }
    let d1 = a.df + b.df - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.df * b.df;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.df + d2 - d1) / (b.df - a.df + 2.0 * d2);
    t.is_finite().then_some(t)
}

/// Cubic step kept inside the bracket; falls back to bisection.
fn interpolate(a: &Trial, b: &Trial) -> f64 {
    let (lo, hi) = if a.alpha < b.alpha { (a.alpha, b.alpha) } else { (b.alpha, a.alpha) };
    let guard = 0.1 * (hi - lo);
    match cubic_min(a, b) {
        Some(t) if t > lo + guard && t < hi - guard => t,
        _ => 0.5 * (lo + hi),
    }
}

/// `t` is no better than `base`; inside the rounding band of `f` the slope
/// at `t` decides.
fn no_better(t: &Trial, base: &Trial) -> bool {
    let band = F_BAND * base.f.abs();
    if !t.f.is_finite() || t.f > base.f + band {
        return true;
    }
    t.f >= base.f - band && t.df * (t.alpha - base.alpha) >= 0.0
}

/// Strong-Wolfe line search (bracketing then zoom), finished by one secant
/// step on the slope: where the objective is close to quadratic along the
/// line this lands on the exact minimiser.
fn line_search(
    f: &mut dyn FnMut(&[f64]) -> Eval,
    x: &[f64],
    fx: f64,
    gx: &[f64],
    dir: &[f64],
    c1: f64,
    c2: f64,
) -> Option<Trial> {
    let df0 = dot(gx, dir);
    let mut eval = |alpha: f64| -> Trial {
        let xt: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + alpha * d).collect();
        match f(&xt) {
            Some((v, g)) if v.is_finite() => Trial {
                alpha,
                f: v,
                df: dot(&g, dir),
                g,
            },
            _ => Trial {
                alpha,
                f: f64::INFINITY,
                df: f64::NAN,
                g: vec![],
            },
        }
    };
    let armijo = |t: &Trial| sufficient_decrease(t.f, t.df, fx, t.alpha, df0, c1);
    let curvature = |t: &Trial| t.df.abs() <= -c2 * df0;
    let origin = Trial {
        alpha: 0.0,
        f: fx,
        df: df0,
        g: gx.to_vec(),
    };

    let found = 'search: {
        let mut prev = Trial { g: vec![], ..origin };
        let mut alpha = 1.0;
        let (mut lo, mut hi);
        let mut i = 0;
        loop {
            let cur = eval(alpha);
            if !armijo(&cur) || (i > 0 && no_better(&cur, &prev)) {
                lo = prev;
                hi = cur;
                break;
            }
            if curvature(&cur) {
                break 'search cur;
            }
            if cur.df >= 0.0 {
                lo = cur;
                hi = prev;
                break;
            }
            i += 1;
            if i > 40 {
                return None;
            }
            prev = cur;
            alpha *= 2.0;
        }
        for _ in 0..60 {
            if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
                break;
            }
            let t = eval(interpolate(&lo, &hi));
            if !armijo(&t) || no_better(&t, &lo) {
                hi = t;
            } else {
                if curvature(&t) {
                    break 'search t;
                }
                if t.df * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
        }
        return None;
    };

    let t = -origin.df * found.alpha / (found.df - origin.df);
    if t.is_finite() && t > 0.0 && (t / found.alpha - 1.0).abs() > 1e-3 {
        let polished = eval(t);
        if armijo(&polished) && curvature(&polished) && polished.f <= found.f && polished.df.abs() < found.df.abs() {
            return Some(polished);
        }
    }
    Some(found)
}

/// Dense BFGS on the inverse Hessian. `f` returns the value and gradient, or
/// `None` where the objective is undefined (treated as `+inf`).
pub fn bfgs(mut f: impl FnMut(&[f64]) -> Eval, x0: &[f64], opt: &OptimizerConfig) -> Result<BfgsOutcome> {
    opt.validate()?;
    let n = x0.len();
    let (mut fx, mut g) = f(x0)
        .filter(|(v, _)| v.is_finite())
        .ok_or_else(|| Error::InvalidInput("objective is not finite at the initial point".into()))?;
    let mut x = x0.to_vec();
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    let mut values = vec![fx];
    let mut steps = Vec::new();
    let mut first = true;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    while iterations < opt.max_iters {
        if norm(&g) < opt.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        let mut dir: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        if dot(&dir, &g) >= 0.0 {
            // lost positive definiteness: restart from steepest descent
            h.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                h[i * n + i] = 1.0;
            }
            first = true;
            dir = g.iter().map(|v| -v).collect();
        }
        let Some(t) = line_search(&mut f, &x, fx, &g, &dir, opt.wolfe_c1, opt.wolfe_c2) else {
            termination = Termination::LineSearchFailure;
            break;
        };
        iterations += 1;
        steps.push(LineStep {
            alpha: t.alpha,
            f0: fx,
            df0: dot(&g, &dir),
            f: t.f,
            df: t.df,
        });
        let s: Vec<f64> = dir.iter().map(|d| t.alpha * d).collect();
        let y: Vec<f64> = t.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        fx = t.f;
        g = t.g;
        values.push(fx);

        let sy = dot(&s, &y);
        if sy > 0.0 {
            if first {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
                first = false;
            }
            // H <- (I - r s y^T) H (I - r y s^T) + r s s^T
            let r = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -r * (s[i] * hy[j] + hy[i] * s[j]) + (r * r * yhy + r) * s[i] * s[j];
                }
            }
        }
        if norm(&s) < opt.step_tol * (1.0 + norm(&x)) {
            termination = Termination::StepTolerance;
            break;
        }
    }
    if termination == Termination::MaxIterations && norm(&g) < opt.grad_tol {
        termination = Termination::GradientTolerance;
    }
    Ok(BfgsOutcome {
        grad_norm: norm(&g),
        x,
        value: fx,
        iterations,
        termination,
        values,
        steps,
    })
}

/// Negative log posterior density (up to a constant) and its gradient with
/// respect to the prior coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MapObjective {
    pub value: f64,
    pub potential: f64,
    pub grad_p0: Vec<f64>,
    pub grad_nu: Vec<f64>,
}

/// `L = Phi + (|p0|_CM^2 + |nu|_CM^2) / 2`, `None` when the forward model fails.
pub fn map_objective(
    p0: &SpectralField,
    nu: &SpectralField,
    target: &CurvePotential,
    priors: &PriorPair,
) -> Option<MapObjective> {
    let basis = target.basis();
    let g = target
        .model()
        .gradient(&basis.synthesize(p0), &basis.synthesize(nu), target.observations())
        .ok()?;
    if !g.phi.is_finite() {
        return None;
    }
    let cm = 0.5 * (cameron_martin_coeffs(p0, &priors.momentum) + cameron_martin_coeffs(nu, &priors.reparam));
    let prior_grad = |f: &SpectralField, spec| -> Vec<f64> {
        let sd = coefficient_std(spec, f.n_modes());
        f.to_flat().iter().zip(&sd).map(|(c, s)| c / (s * s)).collect()
    };
    let add = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<f64>>();
    Some(MapObjective {
        value: g.phi + cm,
        potential: g.phi,
        grad_p0: add(basis.synthesize_adjoint(&g.p0.values), prior_grad(p0, &priors.momentum)),
        grad_nu: add(basis.synthesize_adjoint(&g.nu.values), prior_grad(nu, &priors.reparam)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEstimate {
    pub p0: SpectralField,
    pub nu: SpectralField,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
    pub termination: Termination,
}

/// Minimises [`map_objective`] from `(p0, nu)` in whitened coordinates
/// `z = c / sd`, where the prior term is `|z|^2 / 2`.
pub fn bfgs_minimize(
    p0: &SpectralField,
    nu: &SpectralField,
    target: &CurvePotential,
    priors: &PriorPair,
    opt: &OptimizerConfig,
) -> Result<MapEstimate> {
    let (kp, kn) = (p0.n_modes(), nu.n_modes());
    let sd_p = coefficient_std(&priors.momentum, kp);
    let sd_n = coefficient_std(&priors.reparam, kn);
    let dp = sd_p.len();
    let unwhiten = |z: &[f64]| -> Result<(SpectralField, SpectralField)> {
        let a: Vec<f64> = z[..dp].iter().zip(&sd_p).map(|(v, s)| v * s).collect();
        let b: Vec<f64> = z[dp..].iter().zip(&sd_n).map(|(v, s)| v * s).collect();
        Ok((SpectralField::from_flat(&a)?, SpectralField::from_flat(&b)?))
    };
    let mut z0: Vec<f64> = p0.to_flat().iter().zip(&sd_p).map(|(c, s)| c / s).collect();
    z0.extend(nu.to_flat().iter().zip(&sd_n).map(|(c, s)| c / s));

    let objective = |z: &[f64]| -> Eval {
        let (a, b) = unwhiten(z).ok()?;
        let m = map_objective(&a, &b, target, priors)?;
        let mut g: Vec<f64> = m.grad_p0.iter().zip(&sd_p).map(|(v, s)| v * s).collect();
        g.extend(m.grad_nu.iter().zip(&sd_n).map(|(v, s)| v * s));
        Some((m.value, g))
    };
    let out = bfgs(objective, &z0, opt)?;
    let (p0, nu) = unwhiten(&out.x)?;
    Ok(MapEstimate {
        p0,
        nu,
        value: out.value,
        initial_value: out.values[0],
        iterations: out.iterations,
        termination: out.termination,
    })
}
