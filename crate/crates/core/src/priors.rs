//! Prior densities and the smoothing-parameter conditional.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::model::{components, BasisKind, ComponentSet, Partition, SegmentCoefficients};

/// Hyperparameters of the partition and spline priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Maximum number of segments `M`.
    pub max_segments: usize,
    /// Minimum segment length in samples.
    pub n_min: usize,
    /// Upper bound of the uniform prior on each smoothing parameter.
    pub kappa: f64,
    /// Prior variance of intercepts.
    pub intercept_var: f64,
    /// Basis truncation `S`.
    pub truncation: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            max_segments: 10,
            n_min: 60,
            kappa: 1e5,
            intercept_var: 1e4,
            truncation: 10,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.truncation < 4 {
            return Err(Error::Config(format!("truncation S must be at least 4, got {}", self.truncation)));
        }
        if self.n_min < 2 * self.truncation {
            return Err(Error::Config(format!(
                "n_min ({}) must be at least 2S ({})",
                self.n_min,
                2 * self.truncation
            )));
        }
        if len < 2 * self.n_min {
            return Err(Error::Config(format!(
                "series length {len} is shorter than 2 n_min = {}",
                2 * self.n_min
            )));
        }
        if self.max_segments == 0 || self.max_segments > len / self.n_min {
            return Err(Error::Config(format!(
                "max_segments must lie in 1..={} for T = {len} and n_min = {}",
                len / self.n_min,
                self.n_min
            )));
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::Config("kappa must be positive and finite".into()));
        }
        if !(self.intercept_var > 0.0) || !self.intercept_var.is_finite() {
            return Err(Error::Config("intercept variance must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Number of admissible positions `α_q` of breakpoint `q` (one-based) given
/// `δ_{q−1}`.
pub fn admissible_positions(len: usize, prev: usize, m: usize, q: usize, n_min: usize) -> i64 {
    len as i64 - prev as i64 - ((m - q + 1) * n_min) as i64 + 1
}

/// `log Pr(m) + log Pr(δ | m)` with `Pr(m) = 1/M`.
pub fn log_prior_partition(partition: &Partition, config: &PriorConfig) -> Result<f64> {
    let m = partition.n_segments();
    if m > config.max_segments {
        return Err(Error::InvalidPartition(format!("{m} segments exceed M = {}", config.max_segments)));
    }
    let len = partition.len();
    let bps = partition.breakpoints();
    let mut lp = -(config.max_segments as f64).ln();
    for q in 1..m {
        let alpha = admissible_positions(len, bps[q - 1], m, q, config.n_min);
        if alpha <= 0 {
            return Err(Error::InvalidPartition(format!("no admissible position for breakpoint {q}")));
        }
        if partition.segment_len(q - 1) < config.n_min {
            return Err(Error::InvalidPartition(format!("segment {q} is shorter than n_min")));
        }
        lp -= (alpha as f64).ln();
    }
    if partition.segment_len(m - 1) < config.n_min {
        return Err(Error::InvalidPartition("last segment is shorter than n_min".into()));
    }
    Ok(lp)
}

/// `log(2^{N²} − 1)`
pub fn log_n_change_sets(dim: usize) -> f64 {
    let k = (dim * dim) as f64;
    k * LN_2 + (-(-k * LN_2).exp()).ln_1p()
}

/// Uniform prior over nonempty change sets: `−(m−1) log(2^{N²} − 1)`.
pub fn log_prior_phi(change_sets: &[ComponentSet], dim: usize) -> Result<f64> {
    if let Some(q) = change_sets.iter().position(|s| s.is_empty()) {
        return Err(Error::InvalidArgument(format!("change set at breakpoint {} is empty", q + 1)));
    }
    Ok(-(change_sets.len() as f64) * log_n_change_sets(dim))
}

/// Prior variance of coefficient `k` (zero-based) of an expansion of `kind`.
pub fn coefficient_variance(kind: BasisKind, k: usize, lambda_sq: f64, intercept_var: f64) -> f64 {
    match kind {
        BasisKind::Even if k == 0 => intercept_var,
        BasisKind::Even => lambda_sq / (2.0 * PI * k as f64).powi(2),
        BasisKind::Odd => lambda_sq / (2.0 * PI * (k + 1) as f64).powi(2),
    }
}

pub fn prior_variances(kind: BasisKind, truncation: usize, lambda_sq: f64, intercept_var: f64) -> Vec<f64> {
    (0..truncation)
        .map(|k| coefficient_variance(kind, k, lambda_sq, intercept_var))
        .collect()
}

pub(crate) fn gaussian_log_density(x: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(var)
        .map(|(v, s2)| -0.5 * (2.0 * PI * s2).ln() - v * v / (2.0 * s2))
        .sum()
}

/// Gaussian log-density of every component-run's coefficients.
pub fn log_prior_coeffs(coeffs: &SegmentCoefficients, config: &PriorConfig) -> Result<f64> {
    let comps = components(coeffs.dim);
    let mut total = 0.0;
    for (comp, runs) in comps.iter().zip(&coeffs.components) {
        for run in runs {
            if !(run.lambda_sq > 0.0 && run.lambda_sq <= config.kappa) {
                return Err(Error::InvalidState(format!(
                    "smoothing parameter {} of {} outside (0, {}]",
                    run.lambda_sq,
                    comp.label(),
                    config.kappa
                )));
            }
            let var = prior_variances(comp.basis_kind(), coeffs.truncation, run.lambda_sq, config.intercept_var);
            total += gaussian_log_density(&run.coeffs, &var);
        }
    }
    Ok(total)
}

/// Uniform(0, κ] density of every smoothing parameter; `-∞` outside.
pub fn log_prior_smoothing(coeffs: &SegmentCoefficients, config: &PriorConfig) -> f64 {
    let mut total = 0.0;
    for run in coeffs.components.iter().flatten() {
        if !(run.lambda_sq > 0.0 && run.lambda_sq <= config.kappa) {
            return f64::NEG_INFINITY;
        }
        total -= config.kappa.ln();
    }
    total
}

/// Joint log prior of a state; `-∞` if any smoothing parameter leaves `(0, κ]`.
pub fn log_prior_total(partition: &Partition, coeffs: &SegmentCoefficients, config: &PriorConfig) -> Result<f64> {
    let smoothing = log_prior_smoothing(coeffs, config);
    if smoothing == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(log_prior_partition(partition, config)?
        + log_prior_phi(partition.change_sets(), coeffs.dim)?
        + log_prior_coeffs(coeffs, config)?
        + smoothing)
}

/// Coefficients scaled by the smoothing parameter (drops the intercept of
/// even expansions). Entry `i` multiplies frequency `i + 1`.
pub fn scaled_coefficients(coeffs: &[f64], kind: BasisKind) -> &[f64] {
    match kind {
        BasisKind::Even => &coeffs[1..],
        BasisKind::Odd => coeffs,
    }
}

/// `R = ½ Σ_s (2πs)² a_s²`
pub fn roughness(scaled: &[f64]) -> f64 {
    scaled
        .iter()
        .enumerate()
        .map(|(i, a)| 0.5 * (2.0 * PI * (i + 1) as f64).powi(2) * a * a)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaDraw {
    pub value: f64,
    /// True when `R = 0` and the draw came from the Uniform(0, κ] prior.
    pub fallback: bool,
}

/// Draw `λ²` from its conditional `∝ (λ²)^{−n/2} exp(−R/λ²)` on `(0, κ]`,
/// an inverse gamma with shape `n/2 − 1` and rate `R`, truncated.
pub fn sample_lambda_conditional<R: Rng + ?Sized>(scaled: &[f64], kappa: f64, rng: &mut R) -> LambdaDraw {
    let rate = roughness(scaled);
    let shape = scaled.len() as f64 / 2.0 - 1.0;
    if !(rate > 0.0) || shape <= 0.0 {
        let u: f64 = 1.0 - rng.random::<f64>();
        return LambdaDraw {
            value: u * kappa,
            fallback: true,
        };
    }
    let value = sample_truncated_inverse_gamma(shape, rate, kappa, rng);
    LambdaDraw { value, fallback: false }
}

/// Inverse gamma(shape, rate) truncated to `(0, upper]`.
///
/// Works on `z = rate / x`, which is Gamma(shape, 1) truncated to
/// `z ≥ rate / upper`: inverse CDF on the upper regularized gamma, or
/// exponential-envelope rejection when the retained mass is below `1e-6`.
pub fn sample_truncated_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, upper: f64, rng: &mut R) -> f64 {
    let z0 = rate / upper;
    let tail = if upper.is_finite() { gamma_ur(shape, z0) } else { 1.0 };
    let z = if tail < 1e-6 {
        sample_gamma_tail(shape, z0, rng)
    } else {
        let u: f64 = 1.0 - rng.random::<f64>();
        invert_upper_gamma(shape, u * tail, z0)
    };
    (rate / z).min(upper)
}

fn sample_gamma_tail<R: Rng + ?Sized>(shape: f64, z0: f64, rng: &mut R) -> f64 {
    let excess = (shape - 1.0).max(0.0);
    let env_rate = 1.0 - excess / z0;
    loop {
        let e: f64 = -(1.0 - rng.random::<f64>()).ln() / env_rate;
        let z = z0 + e;
        let log_accept = if shape >= 1.0 {
            excess * ((z / z0).ln() - (z - z0) / z0)
        } else {
            (shape - 1.0) * (z / z0).ln()
        };
        if rng.random::<f64>().ln() < log_accept {
            return z;
        }
    }
}

/// Solve `Q(a, z) = target` for `z ≥ lo` by safeguarded Newton steps.
fn invert_upper_gamma(a: f64, target: f64, lo: f64) -> f64 {
    let mut lo = lo;
    let mut hi = (a + 1.0).max(lo * 2.0).max(1.0);
    while gamma_ur(a, hi) > target {
        lo = hi;
        hi *= 2.0;
    }
    let log_norm = ln_gamma(a);
    let mut z = 0.5 * (lo + hi);
    for _ in 0..200 {
        let h = gamma_ur(a, z) - target;
        if h.abs() <= 1e-14 * target {
            return z;
        }
        if h > 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
        let dens = ((a - 1.0) * z.ln() - z - log_norm).exp();
        let newton = z + h / dens;
        z = if dens > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    0.5 * (lo + hi)
}
