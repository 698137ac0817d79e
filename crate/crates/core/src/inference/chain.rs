//! pCN Metropolis-within-Gibbs over `(p0, nu, sigma2)`.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ClosedCurve2D;
use crate::observation::{ForwardModel, Misfit, ObservationSet};
use crate::prior::{sample_coefficients, PriorPair, SpectralBasis, SpectralField};
use crate::shooting::ShootConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub beta: f64,
    pub n_iters: usize,
    pub thinning: usize,
    /// Iterations discarded (and used for step-size adaptation) before recording.
    pub burn_in: usize,
    pub adapt_beta: bool,
    pub target_accept: f64,
    pub infer_sigma2: bool,
    pub ig_a0: f64,
    pub ig_b0: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            n_iters: 100_000,
            thinning: 10,
            burn_in: 10_000,
            adapt_beta: true,
            target_accept: 0.25,
            infer_sigma2: true,
            ig_a0: 1e-4,
            ig_b0: 1e-4,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Validation(format!("sampler.beta must lie in (0, 1], got {}", self.beta)));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Validation(format!(
                "sampler.target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if self.thinning == 0 {
            return Err(Error::Validation("sampler.thinning must be at least 1".into()));
        }
        if self.burn_in > self.n_iters {
            return Err(Error::Validation(format!(
                "sampler.burn_in ({}) exceeds sampler.n_iters ({})",
                self.burn_in, self.n_iters
            )));
        }
        if !(self.ig_a0 > 0.0 && self.ig_b0 > 0.0) {
            return Err(Error::Validation("sampler.ig_a0 and sampler.ig_b0 must be positive".into()));
        }
        Ok(())
    }
}

/// The data term seen by the sampler.
pub trait Potential {
    /// Misfit at the given coefficients; `None` when the forward model fails.
    fn misfit(&self, p0: &SpectralField, nu: &SpectralField) -> Option<Misfit>;
    /// Number of observed points (each contributes two coordinates).
    fn n_obs(&self) -> usize;
}

/// `Phi = 0`: the chain targets the prior.
#[derive(Debug, Clone, Copy)]
pub struct NullPotential {
    pub n_obs: usize,
}

impl Potential for NullPotential {
    fn misfit(&self, _: &SpectralField, _: &SpectralField) -> Option<Misfit> {
        Some(Misfit {
            phi: 0.0,
            residual_sq: 0.0,
        })
    }

    fn n_obs(&self) -> usize {
        self.n_obs
    }
}

/// Curve-matching potential: coefficients are synthesised at the model
/// resolution and pushed through the forward model.
pub struct CurvePotential {
    model: ForwardModel,
    obs: ObservationSet,
    basis: SpectralBasis,
}

impl CurvePotential {
    pub fn new(template: ClosedCurve2D, cfg: ShootConfig, obs: ObservationSet, n_modes: usize) -> Result<Self> {
        let n_p = template.len();
        let model = ForwardModel::new(template, cfg)?;
        Ok(Self {
            model,
            obs,
            basis: SpectralBasis::new(n_p, n_modes),
        })
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.obs
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }
}

impl Potential for CurvePotential {
    fn misfit(&self, p0: &SpectralField, nu: &SpectralField) -> Option<Misfit> {
        let p = self.basis.synthesize(p0);
        let v = self.basis.synthesize(nu);
        self.model.misfit(&p, &v, &self.obs).ok().filter(|m| m.phi.is_finite())
    }

    fn n_obs(&self) -> usize {
        self.obs.len()
    }
}

/// Current chain position. `phi` is kept consistent with the coefficients
/// and `sigma2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub p0: SpectralField,
    pub nu: SpectralField,
    pub sigma2: f64,
    pub phi: f64,
    /// Unweighted squared residual backing `phi`.
    pub residual_sq: f64,
}

impl ChainState {
    /// Evaluates the potential at `(p0, nu)`. With `infer_sigma2` the
    /// likelihood uses the shared variance `sigma2`, otherwise the
    /// observation set's own noise model.
    pub fn new(
        p0: SpectralField,
        nu: SpectralField,
        sigma2: f64,
        infer_sigma2: bool,
        target: &dyn Potential,
    ) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma2 must be positive, got {sigma2}")));
        }
        let m = target
            .misfit(&p0, &nu)
            .ok_or_else(|| Error::InvalidInput("initial state has no finite potential".into()))?;
        Ok(Self {
            p0,
            nu,
            sigma2,
            phi: weighted(&m, sigma2, infer_sigma2),
            residual_sq: m.residual_sq,
        })
    }
}

fn weighted(m: &Misfit, sigma2: f64, infer_sigma2: bool) -> f64 {
    if infer_sigma2 {
        0.5 * m.residual_sq / sigma2
    } else {
        m.phi
    }
}

/// One retained state. Coefficients are stored flat as `[a0, a1, b1, ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainRecord {
    pub iteration: usize,
    pub accepted: bool,
    pub phi: f64,
    pub sigma2: f64,
    pub p0: Vec<f64>,
    pub nu: Vec<f64>,
}

/// `min(1, exp(phi_u - phi_v))`; proposals with non-finite potential are never accepted.
pub fn acceptance_probability(phi_u: f64, phi_v: f64) -> f64 {
    if !phi_v.is_finite() {
        return 0.0;
    }
    (phi_u - phi_v).exp().min(1.0)
}

/// One pCN proposal `v = sqrt(1 - beta^2) u + beta w`, `w ~ prior`, with
/// Metropolis accept/reject on the potential difference only.
pub fn pcn_step<R: Rng + ?Sized>(
    state: ChainState,
    beta: f64,
    infer_sigma2: bool,
    priors: &PriorPair,
    target: &dyn Potential,
    rng: &mut R,
) -> (ChainState, bool) {
    let rho = (1.0 - beta * beta).sqrt();
    let w_p = sample_coefficients(&priors.momentum, state.p0.n_modes(), rng);
    let w_n = sample_coefficients(&priors.reparam, state.nu.n_modes(), rng);
    let p0 = state.p0.combine(rho, &w_p, beta);
    let nu = state.nu.combine(rho, &w_n, beta);
    let (phi_v, r_v) = match target.misfit(&p0, &nu) {
        Some(m) => (weighted(&m, state.sigma2, infer_sigma2), m.residual_sq),
        None => (f64::INFINITY, f64::INFINITY),
    };
    let a = acceptance_probability(state.phi, phi_v);
    if rng.random::<f64>() < a {
        let next = ChainState {
            p0,
            nu,
            sigma2: state.sigma2,
            phi: phi_v,
            residual_sq: r_v,
        };
        (next, true)
    } else {
        (state, false)
    }
}

/// Conjugate draw `sigma2 ~ InvGamma(a0 + n_obs, b0 + residual_sq / 2)` (two
/// coordinates per observed point).
pub fn gibbs_sigma2<R: Rng + ?Sized>(residual_sq: f64, n_obs: usize, a0: f64, b0: f64, rng: &mut R) -> Result<f64> {
    if !(residual_sq >= 0.0) || !residual_sq.is_finite() {
        return Err(Error::ContractViolation(format!(
            "residual_sq must be finite and nonnegative, got {residual_sq}"
        )));
    }
    let shape = a0 + n_obs as f64;
    let rate = b0 + 0.5 * residual_sq;
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::ContractViolation(e.to_string()))?;
    Ok(1.0 / g.sample(rng))
}

/// Totals over one chain run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub proposals: usize,
    pub accepted: usize,
    /// Acceptance rate after burn-in (over all iterations when there is none).
    pub acceptance_rate: f64,
    /// Step size in force after burn-in.
    pub beta: f64,
}

/// Runs `cfg.n_iters` iterations, passing every `thinning`-th post-burn-in
/// state to `sink`. `beta` is adapted by a Robbins-Monro recursion on
/// `log beta` during burn-in only and is frozen afterwards.
pub fn run_chain_with<R: Rng + ?Sized>(
    init: ChainState,
    cfg: &SamplerConfig,
    priors: &PriorPair,
    target: &dyn Potential,
    rng: &mut R,
    sink: &mut dyn FnMut(ChainRecord) -> Result<()>,
) -> Result<(ChainState, ChainStats)> {
    cfg.validate()?;
    let mut state = init;
    let mut beta = cfg.beta;
    let (mut post, mut post_acc, mut total_acc) = (0usize, 0usize, 0usize);
    for i in 0..cfg.n_iters {
        let (next, acc) = pcn_step(state, beta, cfg.infer_sigma2, priors, target, rng);
        state = next;
        total_acc += acc as usize;
        if cfg.infer_sigma2 {
            state.sigma2 = gibbs_sigma2(state.residual_sq, target.n_obs(), cfg.ig_a0, cfg.ig_b0, rng)?;
            state.phi = 0.5 * state.residual_sq / state.sigma2;
        }
        if i < cfg.burn_in {
            if cfg.adapt_beta {
                let gain = ((i + 1) as f64).powf(-0.6);
                let a = if acc { 1.0 } else { 0.0 };
                beta = (beta.ln() + gain * (a - cfg.target_accept)).exp().clamp(1e-4, 1.0);
            }
            continue;
        }
        post += 1;
        post_acc += acc as usize;
        if (i - cfg.burn_in + 1) % cfg.thinning == 0 {
            sink(ChainRecord {
                iteration: i + 1,
                accepted: acc,
                phi: state.phi,
                sigma2: state.sigma2,
                p0: state.p0.to_flat(),
                nu: state.nu.to_flat(),
            })?;
        }
    }
    let acceptance_rate = if post > 0 {
        post_acc as f64 / post as f64
    } else if cfg.n_iters > 0 {
        total_acc as f64 / cfg.n_iters as f64
    } else {
        0.0
    };
    let stats = ChainStats {
        proposals: cfg.n_iters,
        accepted: total_acc,
        acceptance_rate,
        beta,
    };
    Ok((state, stats))
}

/// [`run_chain_with`] collecting the records.
pub fn run_chain<R: Rng + ?Sized>(
    init: ChainState,
    cfg: &SamplerConfig,
    priors: &PriorPair,
    target: &dyn Potential,
    rng: &mut R,
) -> Result<(Vec<ChainRecord>, ChainStats)> {
    let mut records = Vec::with_capacity(cfg.n_iters.saturating_sub(cfg.burn_in) / cfg.thinning.max(1));
    let (_, stats) = run_chain_with(init, cfg, priors, target, rng, &mut |r| {
        records.push(r);
        Ok(())
    })?;
    Ok((records, stats))
}
