//! The observation operator `G(p0, nu)`, the misfit potential and its exact
//! gradient.
//!
//! `G` reparameterises the template data by the Lie exponential of `nu`,
//! shoots the lifted state to time 1 and samples the deformed curve at the
//! observation parameters.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{coeff_adjoint_to_values, loop_knot, ClosedCurve2D, Point, ScalarLoopField};
use crate::reparam::{cotangent_lift, Reparameterisation, lie_exponential, lie_exponential_recorded, reparam_adjoint};
use crate::shooting::{shoot_adjoint_with, shoot_with, ShootConfig, Trajectory, VelocityOperator};

/// Observation noise variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    Shared(f64),
    PerPoint(Vec<f64>),
}

/// Observed points `y_i` at curve parameters `s_i` with their noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    y: Vec<Point>,
    s: Vec<f64>,
    noise: NoiseModel,
}

impl ObservationSet {
    pub fn new(y: Vec<Point>, s: Vec<f64>, noise: NoiseModel) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidInput("observation set is empty".into()));
        }
        if s.len() != n {
            return Err(Error::InvalidInput(format!("{n} observations but {} parameters", s.len())));
        }
        if let Some(i) = y.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::InvalidInput(format!("observation {i} is not finite")));
        }
        if let Some(i) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("observation parameter {i} is not finite")));
        }
        match &noise {
            NoiseModel::Shared(v) => check_variance(*v, 0)?,
            NoiseModel::PerPoint(v) => {
                if v.len() != n {
                    return Err(Error::InvalidInput(format!("{n} observations but {} variances", v.len())));
                }
                for (i, x) in v.iter().enumerate() {
                    check_variance(*x, i)?;
                }
            }
        }
        Ok(Self { y, s, noise })
    }

    /// Observations at the equispaced parameters `s_i = 2 pi i / N`.
    pub fn equispaced(y: Vec<Point>, noise: NoiseModel) -> Result<Self> {
        let n = y.len();
        Self::new(y, equispaced_parameters(n), noise)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.y
    }

    pub fn parameters(&self) -> &[f64] {
        &self.s
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    #[inline]
    pub fn variance(&self, i: usize) -> f64 {
        match &self.noise {
            NoiseModel::Shared(v) => *v,
            NoiseModel::PerPoint(v) => v[i],
        }
    }

    /// Same points with a single shared variance.
    pub fn with_shared_variance(&self, sigma2: f64) -> Result<Self> {
        check_variance(sigma2, 0)?;
        Ok(Self {
            y: self.y.clone(),
            s: self.s.clone(),
            noise: NoiseModel::Shared(sigma2),
        })
    }
}

fn check_variance(v: f64, i: usize) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("noise variance {i} must be positive, got {v}")))
    }
}

pub fn equispaced_parameters(n: usize) -> Vec<f64> {
    (0..n).map(|i| loop_knot(i, n)).collect()
}

/// Misfit of one forward evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Misfit {
    /// `1/2 sum_i |G_i - y_i|^2 / sigma2_i`
    pub phi: f64,
    /// Unweighted `sum_i |G_i - y_i|^2`.
    pub residual_sq: f64,
}

/// Gradient of the potential with respect to the samples of `p0` and `nu`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialGradient {
    pub phi: f64,
    pub p0: ScalarLoopField,
    pub nu: ScalarLoopField,
}

/// A template and forward configuration, with the grid operator built once.
pub struct ForwardModel {
    template: ClosedCurve2D,
    cfg: ShootConfig,
    op: VelocityOperator,
}

impl ForwardModel {
    pub fn new(template: ClosedCurve2D, cfg: ShootConfig) -> Result<Self> {
        cfg.validate()?;
        let op = VelocityOperator::new(cfg.n_g, cfg.metric)?;
        Ok(Self { template, cfg, op })
    }

    pub fn template(&self) -> &ClosedCurve2D {
        &self.template
    }

    pub fn config(&self) -> &ShootConfig {
        &self.cfg
    }

    /// Number of curve samples (`n_p`).
    pub fn n_p(&self) -> usize {
        self.template.len()
    }

    fn check_sizes(&self, p0: &ScalarLoopField, nu: &ScalarLoopField) -> Result<()> {
        let n = self.n_p();
        if p0.len() != n || nu.len() != n {
            return Err(Error::ContractViolation(format!(
                "fields have {} and {} samples, template has {n}",
                p0.len(),
                nu.len()
            )));
        }
        Ok(())
    }

    fn run(&self, p0: &ScalarLoopField, nu: &ScalarLoopField, record: bool) -> Result<(Trajectory, Reparameterisation)> {
        self.check_sizes(p0, nu)?;
        let eta = if record {
            lie_exponential_recorded(nu, self.cfg.lie_steps)?
        } else {
            lie_exponential(nu, self.cfg.lie_steps)?
        };
        let initial = cotangent_lift(p0, &self.template, &eta)?;
        let traj = shoot_with(&self.op, &initial, &self.cfg, record)?;
        Ok((traj, eta))
    }

    /// The deformed, reparameterised curve at time 1, at the model resolution.
    pub fn final_curve(&self, p0: &ScalarLoopField, nu: &ScalarLoopField) -> Result<ClosedCurve2D> {
        let (traj, _) = self.run(p0, nu, false)?;
        Ok(traj.final_state().q.clone())
    }

    /// `G(p0, nu)` evaluated at the parameters `s`.
    pub fn observe(&self, p0: &ScalarLoopField, nu: &ScalarLoopField, s: &[f64]) -> Result<Vec<Point>> {
        let curve = self.final_curve(p0, nu)?;
        Ok(sample_curve(&curve, s))
    }

    /// Potential and residual; any forward failure is returned as an error.
    pub fn misfit(&self, p0: &ScalarLoopField, nu: &ScalarLoopField, obs: &ObservationSet) -> Result<Misfit> {
        let g = self.observe(p0, nu, obs.parameters())?;
        Ok(misfit_of(&g, obs))
    }

    /// `Phi(p0, nu)`, or `+inf` when the forward model fails.
    pub fn potential(&self, p0: &ScalarLoopField, nu: &ScalarLoopField, obs: &ObservationSet) -> f64 {
        self.misfit(p0, nu, obs).map_or(f64::INFINITY, |m| m.phi)
    }

    /// Exact gradient of the potential by the discrete adjoint.
    pub fn gradient(&self, p0: &ScalarLoopField, nu: &ScalarLoopField, obs: &ObservationSet) -> Result<PotentialGradient> {
        let (traj, eta) = self.run(p0, nu, true)?;
        let curve = &traj.final_state().q;
        let g = sample_curve(curve, obs.parameters());
        let m = misfit_of(&g, obs);

        let spline = curve.spline();
        let n = self.n_p();
        let mut coeff_bar = [vec![0.0; n], vec![0.0; n]];
        for (i, (gi, yi)) in g.iter().zip(obs.points()).enumerate() {
            let w = 1.0 / obs.variance(i);
            let st = spline.x.stencil(obs.parameters()[i].rem_euclid(TAU));
            for a in 0..2 {
                let r = w * (gi[a] - yi[a]);
                for k in 0..4 {
                    coeff_bar[a][st.idx[k]] += st.w[k] * r;
                }
            }
        }
        let xs = coeff_adjoint_to_values(&coeff_bar[0]);
        let ys = coeff_adjoint_to_values(&coeff_bar[1]);
        let qbar_end: Vec<Point> = xs.into_iter().zip(ys).map(|(a, b)| [a, b]).collect();

        let back = shoot_adjoint_with(&self.op, &traj, &vec![[0.0; 2]; n], &qbar_end, &self.cfg)?;
        let grad = reparam_adjoint(p0, &self.template, &eta, &back.p, &back.q)?;
        Ok(PotentialGradient {
            phi: m.phi,
            p0: grad.p0,
            nu: grad.nu,
        })
    }
}

fn sample_curve(curve: &ClosedCurve2D, s: &[f64]) -> Vec<Point> {
    let spline = curve.spline();
    s.iter().map(|&t| spline.eval(t.rem_euclid(TAU))).collect()
}

fn misfit_of(g: &[Point], obs: &ObservationSet) -> Misfit {
    let mut phi = 0.0;
    let mut residual_sq = 0.0;
    for (i, (gi, yi)) in g.iter().zip(obs.points()).enumerate() {
        let r2 = (gi[0] - yi[0]).powi(2) + (gi[1] - yi[1]).powi(2);
        residual_sq += r2;
        phi += 0.5 * r2 / obs.variance(i);
    }
    Misfit { phi, residual_sq }
}

/// `G(p0, nu)` at `n_obs` equispaced parameters.
pub fn observe(
    p0: &ScalarLoopField,
    nu: &ScalarLoopField,
    template: &ClosedCurve2D,
    cfg: &ShootConfig,
    n_obs: usize,
) -> Result<Vec<Point>> {
    ForwardModel::new(template.clone(), *cfg)?.observe(p0, nu, &equispaced_parameters(n_obs))
}

/// `Phi = 1/2 sum_i |G_i - y_i|^2 / sigma2_i`, `+inf` on forward failure.
pub fn potential(
    p0: &ScalarLoopField,
    nu: &ScalarLoopField,
    obs: &ObservationSet,
    template: &ClosedCurve2D,
    cfg: &ShootConfig,
) -> f64 {
    ForwardModel::new(template.clone(), *cfg).map_or(f64::INFINITY, |m| m.potential(p0, nu, obs))
}

/// Gradient of [`potential`] with respect to the samples of `p0` and `nu`.
pub fn observe_gradient(
    p0: &ScalarLoopField,
    nu: &ScalarLoopField,
    obs: &ObservationSet,
    template: &ClosedCurve2D,
    cfg: &ShootConfig,
) -> Result<PotentialGradient> {
    ForwardModel::new(template.clone(), *cfg)?.gradient(p0, nu, obs)
}
