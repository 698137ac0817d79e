//! Gaussian priors `N(0, delta (I - ell^2 d^2/ds^2)^{-alpha})` on periodic
//! scalar fields, represented by real Fourier coefficients
//! `u(s) = sum_k a_k cos(ks) + b_k sin(ks)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{loop_knot, MetricSpec, ScalarLoopField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub delta: f64,
    pub alpha: f64,
    #[serde(default = "unit")]
    pub ell: f64,
    /// Highest retained wavenumber; `None` means `n_p / 2` at the model resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_modes: Option<usize>,
}

fn unit() -> f64 {
    1.0
}

impl PriorSpec {
    pub fn new(delta: f64, alpha: f64) -> Self {
        Self {
            delta,
            alpha,
            ell: 1.0,
            n_modes: None,
        }
    }

    /// Prior variance of the cosine (or sine) coefficient of wavenumber `k`.
    #[inline]
    pub fn mode_variance(&self, k: usize) -> f64 {
        let k = k as f64;
        self.delta * (1.0 + self.ell * self.ell * k * k).powf(-self.alpha)
    }

    pub fn modes_for(&self, n_p: usize) -> usize {
        self.n_modes.unwrap_or(n_p / 2)
    }

    pub fn check(&self, name: &str) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Validation(format!("{name}.delta must be positive, got {}", self.delta)));
        }
        if !(self.ell > 0.0 && self.ell.is_finite()) {
            return Err(Error::Validation(format!("{name}.ell must be positive, got {}", self.ell)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Validation(format!("{name}.alpha must be finite")));
        }
        if self.n_modes == Some(0) {
            return Err(Error::Validation(format!("{name}.n_modes must be at least 1")));
        }
        Ok(())
    }
}

/// Product prior on `(p0, nu)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorPair {
    pub momentum: PriorSpec,
    pub reparam: PriorSpec,
}

impl Default for PriorPair {
    fn default() -> Self {
        Self {
            momentum: PriorSpec::new(30.0, 0.55),
            reparam: PriorSpec::new(0.05, 1.55),
        }
    }
}

/// Real Fourier coefficients `a_k` (cosine) and `b_k` (sine), `k = 0..=K`; `b_0` is always zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralField {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl SpectralField {
    pub fn zeros(n_modes: usize) -> Self {
        Self {
            cos: vec![0.0; n_modes + 1],
            sin: vec![0.0; n_modes + 1],
        }
    }

    pub fn n_modes(&self) -> usize {
        self.cos.len() - 1
    }

    /// Number of free coefficients, `2K + 1`.
    pub fn dim(&self) -> usize {
        2 * self.n_modes() + 1
    }

    /// Flat layout `[a_0, a_1, b_1, ..., a_K, b_K]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.cos[0]);
        for k in 1..=self.n_modes() {
            v.push(self.cos[k]);
            v.push(self.sin[k]);
        }
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.is_empty() || flat.len() % 2 == 0 {
            return Err(Error::InvalidInput(format!("spectral vector has even length {}", flat.len())));
        }
        let k_max = (flat.len() - 1) / 2;
        let mut f = Self::zeros(k_max);
        f.cos[0] = flat[0];
        for k in 1..=k_max {
            f.cos[k] = flat[2 * k - 1];
            f.sin[k] = flat[2 * k];
        }
        Ok(f)
    }

    pub fn to_samples(&self, n_p: usize) -> ScalarLoopField {
        let values = (0..n_p)
            .map(|j| {
                let s = loop_knot(j, n_p);
                (0..=self.n_modes())
                    .map(|k| {
                        let ks = k as f64 * s;
                        self.cos[k] * ks.cos() + self.sin[k] * ks.sin()
                    })
                    .sum()
            })
            .collect();
        ScalarLoopField { values }
    }

    /// Coefficients of `u` up to wavenumber `n_modes` (sampled DFT).
    ///
    /// At the Nyquist wavenumber only the cosine coefficient is observable.
    pub fn from_samples(u: &ScalarLoopField, n_modes: usize) -> Self {
        let n = u.len();
        let mut f = Self::zeros(n_modes);
        for k in 0..=n_modes.min(n / 2) {
            let (mut c, mut s) = (0.0, 0.0);
            for (j, v) in u.values.iter().enumerate() {
                let ks = k as f64 * loop_knot(j, n);
                c += v * ks.cos();
                s += v * ks.sin();
            }
            let nyquist = 2 * k == n;
            if k == 0 || nyquist {
                f.cos[k] = c / n as f64;
            } else {
                f.cos[k] = 2.0 * c / n as f64;
                f.sin[k] = 2.0 * s / n as f64;
            }
        }
        f
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            cos: self.cos.iter().map(|v| c * v).collect(),
            sin: self.sin.iter().map(|v| c * v).collect(),
        }
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &SpectralField, b: f64) -> Self {
        Self {
            cos: self.cos.iter().zip(&other.cos).map(|(x, y)| a * x + b * y).collect(),
            sin: self.sin.iter().zip(&other.sin).map(|(x, y)| a * x + b * y).collect(),
        }
    }
}

/// Precomputed trigonometric table mapping coefficients to samples and back.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    n_p: usize,
    n_modes: usize,
    /// row j: [cos(0 s_j), cos(s_j), sin(s_j), ..., cos(K s_j), sin(K s_j)]
    table: Vec<f64>,
}

impl SpectralBasis {
    pub fn new(n_p: usize, n_modes: usize) -> Self {
        let dim = 2 * n_modes + 1;
        let mut table = Vec::with_capacity(n_p * dim);
        for j in 0..n_p {
            let s = loop_knot(j, n_p);
            table.push(1.0);
            for k in 1..=n_modes {
                let ks = k as f64 * s;
                table.push(ks.cos());
                table.push(ks.sin());
            }
        }
        Self { n_p, n_modes, table }
    }

    pub fn n_p(&self) -> usize {
        self.n_p
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn synthesize(&self, f: &SpectralField) -> ScalarLoopField {
        debug_assert_eq!(f.n_modes(), self.n_modes);
        let flat = f.to_flat();
        let dim = flat.len();
        let values = self
            .table
            .chunks_exact(dim)
            .map(|row| row.iter().zip(&flat).map(|(a, b)| a * b).sum())
            .collect();
        ScalarLoopField { values }
    }

    /// Transpose of [`synthesize`](Self::synthesize) on flat coefficient vectors.
    pub fn synthesize_adjoint(&self, sample_bar: &[f64]) -> Vec<f64> {
        let dim = 2 * self.n_modes + 1;
        let mut out = vec![0.0; dim];
        for (row, g) in self.table.chunks_exact(dim).zip(sample_bar) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += g * r;
            }
        }
        out
    }
}

/// Standard deviations of the flat coefficients under `spec`.
pub fn coefficient_std(spec: &PriorSpec, n_modes: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 * n_modes + 1);
    v.push(spec.mode_variance(0).sqrt());
    for k in 1..=n_modes {
        let s = spec.mode_variance(k).sqrt();
        v.push(s);
        v.push(s);
    }
    v
}

/// Draws prior coefficients up to wavenumber `n_modes`.
pub fn sample_coefficients<R: Rng + ?Sized>(spec: &PriorSpec, n_modes: usize, rng: &mut R) -> SpectralField {
    let mut f = SpectralField::zeros(n_modes);
    for k in 0..=n_modes {
        let sd = spec.mode_variance(k).sqrt();
        f.cos[k] = sd * rng.sample::<f64, _>(StandardNormal);
        if k > 0 {
            f.sin[k] = sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    f
}

/// A prior draw sampled at `n_p` loop points.
pub fn sample_prior<R: Rng + ?Sized>(spec: &PriorSpec, n_p: usize, rng: &mut R) -> ScalarLoopField {
    sample_coefficients(spec, spec.modes_for(n_p), rng).to_samples(n_p)
}

/// Squared Cameron-Martin norm `delta^{-1} sum_k (a_k^2 + b_k^2)(1 + ell^2 k^2)^alpha`.
pub fn cameron_martin_coeffs(f: &SpectralField, spec: &PriorSpec) -> f64 {
    (0..=f.n_modes())
        .map(|k| (f.cos[k] * f.cos[k] + f.sin[k] * f.sin[k]) / spec.mode_variance(k))
        .sum()
}

/// Squared Cameron-Martin norm of a sampled field over the retained modes.
pub fn cameron_martin_norm(u: &ScalarLoopField, spec: &PriorSpec) -> f64 {
    cameron_martin_coeffs(&SpectralField::from_samples(u, spec.modes_for(u.len())), spec)
}

/// Outcome of prior/metric validation: hard errors abort, warnings are advisory.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub warnings: Vec<String>,
}

/// Checks the regularity conditions that make the posterior well defined.
///
/// `p0` must lie in L2 (`alpha_1 > 1/2`), `nu` in H^1 with a Lipschitz flow
/// (`alpha_2 > 3/2`); a metric exponent below 3 loses the Lipschitz guarantee
/// for the observation operator and is reported as a warning.
pub fn validate_spec(pair: &PriorPair, metric: &MetricSpec) -> Result<ValidationReport> {
    pair.momentum.check("prior.momentum")?;
    pair.reparam.check("prior.reparam")?;
    metric.validate()?;
    if pair.momentum.alpha <= 0.5 {
        return Err(Error::Validation(format!(
            "prior.momentum.alpha = {} must exceed 1/2 for p0 to lie in L2",
            pair.momentum.alpha
        )));
    }
    if pair.reparam.alpha <= 1.5 {
        return Err(Error::Validation(format!(
            "prior.reparam.alpha = {} must exceed 3/2 for nu to generate a diffeomorphism",
            pair.reparam.alpha
        )));
    }
    let mut report = ValidationReport::default();
    if metric.gamma < 3 {
        report.warnings.push(format!(
            "metric.gamma = {} < 3: Lipschitz continuity of the observation operator is not guaranteed",
            metric.gamma
        ));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn defaults_accepted_with_gamma_warning() {
        let r = validate_spec(&PriorPair::default(), &MetricSpec::default()).unwrap();
        assert_eq!(r.warnings.len(), 1);
        let r3 = validate_spec(&PriorPair::default(), &MetricSpec { alpha: 0.4, gamma: 3 }).unwrap();
        assert!(r3.warnings.is_empty());
    }

    #[test]
    fn rough_priors_rejected() {
        let mut pair = PriorPair::default();
        pair.reparam.alpha = 1.0;
        let e = validate_spec(&pair, &MetricSpec::default()).unwrap_err();
        assert!(e.to_string().contains("prior.reparam.alpha"));
        let mut pair = PriorPair::default();
        pair.momentum.alpha = 0.4;
        let e = validate_spec(&pair, &MetricSpec::default()).unwrap_err();
        assert!(e.to_string().contains("prior.momentum.alpha"));
        let mut pair = PriorPair::default();
        pair.momentum.delta = -1.0;
        assert!(validate_spec(&pair, &MetricSpec::default()).is_err());
    }

    #[test]
    fn cm_norm_single_mode() {
        let spec = PriorSpec { delta: 2.0, alpha: 1.3, ell: 0.7, n_modes: None };
        for k in [0usize, 1, 3, 10] {
            let a = 0.8;
            let u = ScalarLoopField::from_fn(64, |s| a * (k as f64 * s).cos());
            let expect = a * a * (1.0 + 0.49 * (k * k) as f64).powf(1.3) / 2.0;
            let got = cameron_martin_norm(&u, &spec);
            assert!((got - expect).abs() < 1e-10 * expect, "k={k}: {got} vs {expect}");
        }
        assert_eq!(cameron_martin_norm(&ScalarLoopField::zeros(16), &spec), 0.0);
    }

    #[test]
    fn cm_norm_quadratic() {
        let spec = PriorSpec::new(30.0, 0.55);
        let u = ScalarLoopField::from_fn(32, |s| s.sin() + 0.3 * (4.0 * s).cos() - 0.1);
        let u3 = ScalarLoopField::new(u.values.iter().map(|v| 3.0 * v).collect()).unwrap();
        let (a, b) = (cameron_martin_norm(&u, &spec), cameron_martin_norm(&u3, &spec));
        assert!((9.0 * a - b).abs() < 1e-10 * b);
    }

    #[test]
    fn samples_round_trip_through_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = PriorSpec::new(1.0, 1.0);
        let f = sample_coefficients(&spec, 15, &mut rng);
        let back = SpectralField::from_samples(&f.to_samples(40), 15);
        for k in 0..=15 {
            assert!((f.cos[k] - back.cos[k]).abs() < 1e-12);
            assert!((f.sin[k] - back.sin[k]).abs() < 1e-12);
        }
        let basis = SpectralBasis::new(40, 15);
        let direct = f.to_samples(40);
        for (a, b) in basis.synthesize(&f).values.iter().zip(&direct.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let basis = SpectralBasis::new(30, 12);
        let f = sample_coefficients(&PriorSpec::new(1.0, 0.0), 12, &mut rng);
        let g: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = basis.synthesize(&f).values.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = basis.synthesize_adjoint(&g).iter().zip(f.to_flat()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn flat_layout_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = sample_coefficients(&PriorSpec::new(1.0, 1.0), 7, &mut rng);
        assert_eq!(SpectralField::from_flat(&f.to_flat()).unwrap(), f);
        assert!(SpectralField::from_flat(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn tiny_delta_gives_zero_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = sample_prior(&PriorSpec::new(1e-300, 0.55), 32, &mut rng);
        assert!(u.values.iter().all(|v| v.abs() < 1e-140));
    }

    #[test]
    fn very_smooth_prior_is_constant() {
        let mut rng_a = ChaCha8Rng::seed_from_u64(5);
        let mut rng_b = ChaCha8Rng::seed_from_u64(5);
        let smooth = PriorSpec::new(1.0, 60.0);
        let u = sample_prior(&smooth, 32, &mut rng_a);
        let only_k0 = sample_prior(&PriorSpec { n_modes: Some(0), ..smooth }, 32, &mut rng_b);
        for (a, b) in u.values.iter().zip(&only_k0.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mode_variances_match_prior() {
        let spec = PriorSpec::new(30.0, 0.55);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws = 10_000;
        let n_modes = 6;
        let mut sum_sq = vec![0.0; n_modes + 1];
        for _ in 0..draws {
            let u = sample_prior(&PriorSpec { n_modes: Some(n_modes), ..spec }, 32, &mut rng);
            let f = SpectralField::from_samples(&u, n_modes);
            for k in 0..=n_modes {
                sum_sq[k] += f.cos[k] * f.cos[k];
            }
        }
        for k in 0..=n_modes {
            let var = spec.mode_variance(k);
            let est = sum_sq[k] / draws as f64;
            // standard error of a chi-square(1) mean estimate: var * sqrt(2 / draws)
            let se = var * (2.0 / draws as f64).sqrt();
            assert!((est - var).abs() < 5.0 * se, "k={k}: {est} vs {var}");
        }
    }

    #[test]
    fn whitened_coefficients_are_standard_normal() {
        let spec = PriorSpec::new(0.05, 1.55);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n_modes = 5;
        let sd = coefficient_std(&spec, n_modes);
        let mut z = Vec::new();
        for _ in 0..10_000 {
            let f = sample_coefficients(&spec, n_modes, &mut rng);
            z.extend(f.to_flat().iter().zip(&sd).map(|(a, s)| a / s));
        }
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 5.0 / n.sqrt());
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n).sqrt());
        // Kolmogorov-Smirnov distance against the standard normal cdf
        z.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let d = z
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let f = normal_cdf(*v);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.63 / n.sqrt(), "KS distance {d}");
    }

    #[test]
    fn alpha_zero_cm_norm_counts_coefficients() {
        // with alpha = 0 the scaled norm is a chi-square with 2K+1 degrees of freedom
        let spec = PriorSpec { delta: 3.0, alpha: 0.0, ell: 1.0, n_modes: Some(4) };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws = 4000;
        let mean = (0..draws)
            .map(|_| cameron_martin_coeffs(&sample_coefficients(&spec, 4, &mut rng), &spec))
            .sum::<f64>()
            / draws as f64;
        let se = (2.0 * 9.0 / draws as f64).sqrt();
        assert!((mean - 9.0).abs() < 3.0 * se, "{mean}");
    }

    fn normal_cdf(x: f64) -> f64 {
        0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
    }

    // Abramowitz-Stegun 7.1.26, accurate to 1.5e-7
    fn erf(x: f64) -> f64 {
        let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
        let y = 1.0
            - (((((1.061_405_429 * t - 1.453_152_027) * t) + 1.421_413_741) * t - 0.284_496_736) * t
                + 0.254_829_592)
                * t
                * (-x * x).exp();
        if x >= 0.0 { y } else { -y }
    }
}
