//! Synthetic data and the three experiment designs: posterior consistency
//! under more observations, multimodality against rounded squares, and
//! partially noisy observations.
//!
//! Data are synthesised at a finer curve resolution (and with more time
//! steps) than the model used for inference.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{loop_knot, ClosedCurve2D, Point};
use crate::inference::{chain_summary, run_chain, ChainRecord, ChainState, ChainStats, ChainSummary, CurvePotential, SamplerConfig};
use crate::observation::{equispaced_parameters, ForwardModel, NoiseModel, ObservationSet};
use crate::optimize::{bfgs_minimize, MapEstimate, OptimizerConfig};
use crate::prior::{sample_coefficients, validate_spec, PriorPair, SpectralField};
use crate::shooting::ShootConfig;

/// `(cos s + pi, sin s + pi)` at `n_p` equispaced parameters.
pub fn template_circle(n_p: usize) -> Result<ClosedCurve2D> {
    if n_p < 4 {
        return Err(Error::InvalidInput(format!("template needs at least 4 points, got {n_p}")));
    }
    ClosedCurve2D::new(
        (0..n_p)
            .map(|j| {
                let s = loop_knot(j, n_p);
                [s.cos() + PI, s.sin() + PI]
            })
            .collect(),
    )
}

/// Perimeter of the square of side 2 whose corners are rounded with radius `r`.
pub fn rounded_square_perimeter(r: f64) -> f64 {
    8.0 * (1.0 - r) + 2.0 * PI * r
}

/// `n` points equispaced in arc length on the square of side 2 centred at
/// `(pi, pi)` with corners replaced by quarter circles of radius `r`,
/// counterclockwise from the midpoint of the right edge.
pub fn rounded_square_target(r: f64, n: usize) -> Result<Vec<Point>> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidInput(format!("corner radius must lie in [0, 1], got {r}")));
    }
    if n < 4 {
        return Err(Error::InvalidInput(format!("target needs at least 4 points, got {n}")));
    }
    let edge = 1.0 - r;
    let arc = FRAC_PI_2 * r;
    let quarter = 2.0 * edge + arc;
    let total = 4.0 * quarter;
    let points = (0..n)
        .map(|i| {
            let t = total * i as f64 / n as f64;
            let q = ((t / quarter) as usize).min(3);
            let u = t - q as f64 * quarter;
            // first quadrant: half right edge, corner arc, half top edge
            let (x, y) = if u < edge {
                (1.0, u)
            } else if u < edge + arc {
                let phi = (u - edge) / r;
                (edge + r * phi.cos(), edge + r * phi.sin())
            } else {
                (edge - (u - edge - arc), 1.0)
            };
            let (c, s) = match q {
                0 => (1.0, 0.0),
                1 => (0.0, 1.0),
                2 => (-1.0, 0.0),
                _ => (0.0, -1.0),
            };
            [PI + c * x - s * y, PI + s * x + c * y]
        })
        .collect();
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Consistency,
    Multimodality,
    Partial,
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consistency" => Ok(Self::Consistency),
            "multimodality" => Ok(Self::Multimodality),
            "partial" => Ok(Self::Partial),
            other => Err(Error::InvalidInput(format!(
                "unknown scenario `{other}` (expected consistency, multimodality or partial)"
            ))),
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Consistency => "consistency",
            Self::Multimodality => "multimodality",
            Self::Partial => "partial",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyParams {
    pub n_obs: Vec<usize>,
    /// Noise standard deviation.
    pub sigma: f64,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            n_obs: vec![10, 25, 50, 100],
            sigma: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultimodalityParams {
    pub radii: Vec<f64>,
    pub n_obs: usize,
    /// Likelihood standard deviation; the targets themselves are noiseless.
    pub sigma: f64,
}

impl Default for MultimodalityParams {
    fn default() -> Self {
        Self {
            radii: vec![1.0, 0.75, 0.5, 0.25],
            n_obs: 100,
            sigma: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartialParams {
    pub n_obs: usize,
    pub sigma_d: f64,
    pub sigma_l: f64,
    /// Final contiguous fraction of the points that gets `sigma_l`.
    pub noisy_fraction: f64,
}

impl Default for PartialParams {
    fn default() -> Self {
        Self {
            n_obs: 1000,
            sigma_d: 1e-4,
            sigma_l: 1e-1,
            noisy_fraction: 0.25,
        }
    }
}

impl PartialParams {
    /// Per-point noise variances: the last `noisy_fraction` of points are noisy.
    pub fn variances(&self) -> Vec<f64> {
        let n_noisy = (self.noisy_fraction * self.n_obs as f64).round() as usize;
        (0..self.n_obs)
            .map(|i| {
                if i >= self.n_obs - n_noisy {
                    self.sigma_l * self.sigma_l
                } else {
                    self.sigma_d * self.sigma_d
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Curve samples used to synthesise data.
    pub data_resolution: usize,
    /// Time steps used to synthesise data.
    pub data_steps: usize,
    /// Curve samples of the inference model.
    pub model_resolution: usize,
    /// Run BFGS from the zero state before sampling.
    pub map_init: bool,
    pub consistency: ConsistencyParams,
    pub multimodality: MultimodalityParams,
    pub partial: PartialParams,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Consistency,
            data_resolution: 1000,
            data_steps: 100,
            model_resolution: 100,
            map_init: true,
            consistency: ConsistencyParams::default(),
            multimodality: MultimodalityParams::default(),
            partial: PartialParams::default(),
        }
    }
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_resolution <= self.model_resolution {
            return Err(Error::Validation(format!(
                "scenario.data_resolution ({}) must exceed scenario.model_resolution ({})",
                self.data_resolution, self.model_resolution
            )));
        }
        if self.model_resolution < 4 || self.data_steps == 0 {
            return Err(Error::Validation("scenario resolutions are too small".into()));
        }
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Validation(format!("scenario.{name} must be positive, got {v}")))
            }
        };
        match self.kind {
            ScenarioKind::Consistency => {
                positive(self.consistency.sigma, "consistency.sigma")?;
                if self.consistency.n_obs.is_empty() || self.consistency.n_obs.contains(&0) {
                    return Err(Error::Validation("scenario.consistency.n_obs needs positive entries".into()));
                }
            }
            ScenarioKind::Multimodality => {
                positive(self.multimodality.sigma, "multimodality.sigma")?;
                if self.multimodality.n_obs < 4 {
                    return Err(Error::Validation("scenario.multimodality.n_obs must be at least 4".into()));
                }
                if let Some(r) = self.multimodality.radii.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                    return Err(Error::Validation(format!("scenario.multimodality.radii entry {r} outside [0, 1]")));
                }
            }
            ScenarioKind::Partial => {
                positive(self.partial.sigma_d, "partial.sigma_d")?;
                positive(self.partial.sigma_l, "partial.sigma_l")?;
                if !(0.0..1.0).contains(&self.partial.noisy_fraction) || self.partial.n_obs == 0 {
                    return Err(Error::Validation("scenario.partial needs n_obs > 0 and noisy_fraction in [0, 1)".into()));
                }
            }
        }
        Ok(())
    }

    /// Labels of the sub-cases, in run order.
    pub fn labels(&self) -> Vec<String> {
        match self.kind {
            ScenarioKind::Consistency => self.consistency.n_obs.iter().map(|n| format!("n{n}")).collect(),
            ScenarioKind::Multimodality => self.multimodality.radii.iter().map(|r| format!("r{r}")).collect(),
            ScenarioKind::Partial => vec!["partial".into()],
        }
    }
}

/// The parameters data were generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub p0: SpectralField,
    pub nu: SpectralField,
    pub variances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// Observations carrying the synthesis noise variances.
    pub obs: ObservationSet,
    /// `None` for geometric targets.
    pub truth: Option<Truth>,
}

/// Shoots `(p0, nu)` at `data_resolution` with `data_steps` time steps and
/// adds independent Gaussian noise with the given variances (one per point)
/// at the parameters `s`.
pub fn synthesize_observations<R: Rng + ?Sized>(
    p0: &SpectralField,
    nu: &SpectralField,
    s: &[f64],
    variances: &[f64],
    data_resolution: usize,
    data_steps: usize,
    shoot: &ShootConfig,
    rng: &mut R,
) -> Result<SyntheticData> {
    if variances.len() != s.len() {
        return Err(Error::InvalidInput(format!("{} parameters but {} variances", s.len(), variances.len())));
    }
    let cfg = ShootConfig {
        steps: data_steps,
        lie_steps: data_steps.max(shoot.lie_steps),
        ..*shoot
    };
    let model = ForwardModel::new(template_circle(data_resolution)?, cfg)?;
    let clean = model.observe(&p0.to_samples(data_resolution), &nu.to_samples(data_resolution), s)?;
    let y = clean
        .iter()
        .zip(variances)
        .map(|(g, v)| {
            let sd = v.sqrt();
            [
                g[0] + sd * rng.sample::<f64, _>(StandardNormal),
                g[1] + sd * rng.sample::<f64, _>(StandardNormal),
            ]
        })
        .collect();
    let noise = match variances.first() {
        Some(v0) if variances.iter().all(|v| v == v0) => NoiseModel::Shared(*v0),
        _ => NoiseModel::PerPoint(variances.to_vec()),
    };
    Ok(SyntheticData {
        obs: ObservationSet::new(y, s.to_vec(), noise)?,
        truth: Some(Truth {
            p0: p0.clone(),
            nu: nu.clone(),
            variances: variances.to_vec(),
        }),
    })
}

/// Everything produced for one sub-case.
#[derive(Debug, Clone)]
pub struct SubCase {
    pub label: String,
    pub data: SyntheticData,
    pub map: Option<MapEstimate>,
    pub records: Vec<ChainRecord>,
    pub stats: ChainStats,
    pub summary: ChainSummary,
}

#[derive(Debug)]
pub struct ScenarioOutcome {
    pub spec: ScenarioSpec,
    /// One entry per label; failures carry their message.
    pub cases: Vec<(String, std::result::Result<SubCase, String>)>,
}

/// Settings shared by every sub-case of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings<'a> {
    pub priors: &'a PriorPair,
    pub shoot: &'a ShootConfig,
    pub sampler: &'a SamplerConfig,
    pub optimizer: &'a OptimizerConfig,
    pub seed: u64,
    /// Histogram bins in summaries.
    pub bins: usize,
}

/// Independent random stream `stream` of the run seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds the data of every sub-case; deterministic in the seed.
pub fn scenario_data(spec: &ScenarioSpec, run: &RunSettings) -> Result<Vec<(String, SyntheticData)>> {
    spec.validate()?;
    let labels = spec.labels();
    let data_modes = spec.data_resolution / 2;
    let truth = |rng: &mut ChaCha8Rng| {
        (
            sample_coefficients(&run.priors.momentum, data_modes, rng),
            sample_coefficients(&run.priors.reparam, data_modes, rng),
        )
    };
    match spec.kind {
        ScenarioKind::Consistency => {
            let (p0, nu) = truth(&mut stream_rng(run.seed, 0));
            let v = spec.consistency.sigma * spec.consistency.sigma;
            spec.consistency
                .n_obs
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (&n, label))| {
                    let mut rng = stream_rng(run.seed, 100 + i as u64);
                    let d = synthesize_observations(
                        &p0,
                        &nu,
                        &equispaced_parameters(n),
                        &vec![v; n],
                        spec.data_resolution,
                        spec.data_steps,
                        run.shoot,
                        &mut rng,
                    )?;
                    Ok((label, d))
                })
                .collect()
        }
        ScenarioKind::Multimodality => {
            let m = &spec.multimodality;
            m.radii
                .iter()
                .zip(labels)
                .map(|(&r, label)| {
                    let obs = ObservationSet::equispaced(rounded_square_target(r, m.n_obs)?, NoiseModel::Shared(m.sigma * m.sigma))?;
                    Ok((label, SyntheticData { obs, truth: None }))
                })
                .collect()
        }
        ScenarioKind::Partial => {
            let (p0, nu) = truth(&mut stream_rng(run.seed, 0));
            let p = &spec.partial;
            let d = synthesize_observations(
                &p0,
                &nu,
                &equispaced_parameters(p.n_obs),
                &p.variances(),
                spec.data_resolution,
                spec.data_steps,
                run.shoot,
                &mut stream_rng(run.seed, 100),
            )?;
            Ok(vec![(labels[0].clone(), d)])
        }
    }
}

/// MAP burn-in followed by a pCN chain on one data set.
pub fn infer(
    data: &SyntheticData,
    model_resolution: usize,
    infer_sigma2: bool,
    run: &RunSettings,
    rng: &mut ChaCha8Rng,
    map_init: bool,
) -> Result<(Option<MapEstimate>, Vec<ChainRecord>, ChainStats, ChainSummary)> {
    let template = template_circle(model_resolution)?;
    let k_p = run.priors.momentum.modes_for(model_resolution);
    let k_n = run.priors.reparam.modes_for(model_resolution);
    if k_p != k_n {
        return Err(Error::Validation("momentum and reparameterisation priors must retain the same modes".into()));
    }
    let obs = data.obs.clone();
    let sigma2 = match obs.noise() {
        NoiseModel::Shared(v) => *v,
        NoiseModel::PerPoint(v) => v.iter().sum::<f64>() / v.len() as f64,
    };
    let obs_for_model = if infer_sigma2 { obs.with_shared_variance(sigma2)? } else { obs };
    let target = CurvePotential::new(template, *run.shoot, obs_for_model, k_p)?;
    let (mut p0, mut nu) = (SpectralField::zeros(k_p), SpectralField::zeros(k_n));
    let map = if map_init {
        let m = bfgs_minimize(&p0, &nu, &target, run.priors, run.optimizer)?;
        p0 = m.p0.clone();
        nu = m.nu.clone();
        Some(m)
    } else {
        None
    };
    let sampler = SamplerConfig { infer_sigma2, ..*run.sampler };
    let init = ChainState::new(p0, nu, sigma2, infer_sigma2, &target)?;
    let (records, stats) = run_chain(init, &sampler, run.priors, &target, rng)?;
    let summary = chain_summary(&records, model_resolution, run.bins)?;
    Ok((map, records, stats, summary))
}

/// Runs every sub-case of `spec` (concurrently); a failing sub-case is
/// recorded and the others continue.
pub fn run_scenario(spec: &ScenarioSpec, run: &RunSettings) -> Result<ScenarioOutcome> {
    validate_spec(run.priors, &run.shoot.metric)?;
    run.sampler.validate()?;
    run.optimizer.validate()?;
    let data = scenario_data(spec, run)?;
    let infer_sigma2 = match spec.kind {
        ScenarioKind::Multimodality => false,
        _ => run.sampler.infer_sigma2,
    };
    let cases = data
        .into_par_iter()
        .enumerate()
        .map(|(i, (label, d))| {
            let mut rng = stream_rng(run.seed, 1000 + i as u64);
            let res = infer(&d, spec.model_resolution, infer_sigma2, run, &mut rng, spec.map_init)
                .map(|(map, records, stats, summary)| SubCase {
                    label: label.clone(),
                    data: d,
                    map,
                    records,
                    stats,
                    summary,
                })
                .map_err(|e| e.to_string());
            (label, res)
        })
        .collect();
    Ok(ScenarioOutcome { spec: spec.clone(), cases })
}
