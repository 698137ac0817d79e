//! Posterior summaries of a recorded chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::SpectralBasis;

use super::chain::ChainRecord;

/// Equal-width histogram over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Bins spanning the data range. A degenerate range gives one bar.
    pub fn from_values(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            return Self { lo: 0.0, hi: 0.0, counts: vec![] };
        }
        if !(hi > lo) || bins <= 1 {
            return Self {
                lo,
                hi,
                counts: vec![values.len() as u64],
            };
        }
        Self::with_range(values, lo, hi, bins)
    }

    pub fn with_range(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            if v < lo || v > hi {
                continue;
            }
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
fn std(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Empirical quantile by linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(v.len() - 1);
    v[i] + (pos - i as f64) * (v[j] - v[i])
}

/// Effective sample size by Geyer's initial positive sequence: the
/// autocorrelation sum is truncated at the first pair `rho_{2m} + rho_{2m+1}`
/// that is not positive. A constant series has ESS 1.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return n as f64;
    }
    let m = mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let c0 = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return 1.0;
    }
    let acf = |lag: usize| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * c0);
    let mut tau = -1.0;
    let mut k = 0;
    while k + 1 < n {
        let pair = acf(k) + acf(k + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 2;
    }
    (n as f64 / tau.max(1e-12)).min(n as f64)
}

/// Marginal statistics of one scalar series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub mean: f64,
    pub std: f64,
    pub ess: f64,
}

impl Marginal {
    pub fn of(x: &[f64]) -> Self {
        Self {
            mean: mean(x),
            std: std(x),
            ess: effective_sample_size(x),
        }
    }

    /// Monte Carlo standard error of the mean.
    pub fn mcse(&self) -> f64 {
        self.std / self.ess.max(1.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    /// Per flat coefficient `[a0, a1, b1, ...]`.
    pub modes: Vec<Marginal>,
    /// Pointwise mean and standard deviation at the model samples.
    pub point_mean: Vec<f64>,
    pub point_std: Vec<f64>,
    /// Histogram of each coefficient, `bins` equal-width bins over its range.
    pub mode_histograms: Vec<Histogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub records: usize,
    /// Fraction of retained records whose proposal was accepted.
    pub acceptance_rate: f64,
    pub phi: Marginal,
    pub sigma2: Marginal,
    /// Quartiles of the `sigma2` marginal.
    pub sigma2_quartiles: [f64; 3],
    pub sigma2_histogram: Histogram,
    pub p0: FieldSummary,
    pub nu: FieldSummary,
}

fn column(records: &[ChainRecord], pick: impl Fn(&ChainRecord) -> f64) -> Vec<f64> {
    records.iter().map(pick).collect()
}

fn field_summary(rows: &[&[f64]], n_p: usize, bins: usize) -> Result<FieldSummary> {
    let dim = rows[0].len();
    if dim % 2 == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::ContractViolation("records carry inconsistent coefficient vectors".into()));
    }
    let n_modes = (dim - 1) / 2;
    let mut modes = Vec::with_capacity(dim);
    let mut mode_histograms = Vec::with_capacity(dim);
    for j in 0..dim {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        modes.push(Marginal::of(&col));
        mode_histograms.push(Histogram::from_values(&col, bins));
    }
    let basis = SpectralBasis::new(n_p, n_modes);
    // Welford updates: no cancellation for near-constant chains
    let mut point_mean = vec![0.0; n_p];
    let mut m2 = vec![0.0; n_p];
    for (count, r) in rows.iter().enumerate() {
        let f = crate::prior::SpectralField::from_flat(r)?;
        let w = 1.0 / (count + 1) as f64;
        for (i, v) in basis.synthesize(&f).values.iter().enumerate() {
            let d = v - point_mean[i];
            point_mean[i] += d * w;
            m2[i] += d * (v - point_mean[i]);
        }
    }
    let n = rows.len() as f64;
    let point_std = m2.iter().map(|s| (s / n).max(0.0).sqrt()).collect();
    Ok(FieldSummary {
        modes,
        point_mean,
        point_std,
        mode_histograms,
    })
}

/// Summarises a record stream; pointwise statistics are taken at `n_p`
/// equispaced loop samples.
pub fn chain_summary(records: &[ChainRecord], n_p: usize, bins: usize) -> Result<ChainSummary> {
    if records.is_empty() {
        return Err(Error::ContractViolation("cannot summarise an empty chain".into()));
    }
    let sigma2 = column(records, |r| r.sigma2);
    let p0_rows: Vec<&[f64]> = records.iter().map(|r| r.p0.as_slice()).collect();
    let nu_rows: Vec<&[f64]> = records.iter().map(|r| r.nu.as_slice()).collect();
    Ok(ChainSummary {
        records: records.len(),
        acceptance_rate: records.iter().filter(|r| r.accepted).count() as f64 / records.len() as f64,
        phi: Marginal::of(&column(records, |r| r.phi)),
        sigma2: Marginal::of(&sigma2),
        sigma2_quartiles: [quantile(&sigma2, 0.25), quantile(&sigma2, 0.5), quantile(&sigma2, 0.75)],
        sigma2_histogram: Histogram::from_values(&sigma2, bins),
        p0: field_summary(&p0_rows, n_p, bins)?,
        nu: field_summary(&nu_rows, n_p, bins)?,
    })
}
