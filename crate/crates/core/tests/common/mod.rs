#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use tvspec::model::{Complex, ComponentSet, MultivariateSeries, Partition, SegmentCoefficients};
use tvspec::sampler::ChainState;

pub fn random_series<R: Rng>(rng: &mut R, len: usize, dim: usize) -> MultivariateSeries {
    let values = (0..len * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    MultivariateSeries::from_flat(len, dim, values).unwrap()
}

/// Breakpoints drawn one after another, each uniform over its admissible range.
pub fn random_partition<R: Rng>(rng: &mut R, len: usize, dim: usize, m: usize, n_min: usize) -> Partition {
    let n_comp = dim * dim;
    let mut bps = vec![0];
    for q in 1..m {
        let lo = bps[q - 1] + n_min;
        let hi = len - (m - q) * n_min;
        bps.push(rng.random_range(lo..=hi));
    }
    bps.push(len);
    let sets = (1..m)
        .map(|_| ComponentSet(rng.random_range(1..(1u64 << n_comp))))
        .collect();
    Partition::new(bps, sets).unwrap()
}

/// Coefficients with independent `N(0, scale²)` entries and smoothing
/// parameters uniform on `(0, kappa]`.
pub fn random_coeffs<R: Rng>(
    rng: &mut R,
    partition: &Partition,
    dim: usize,
    truncation: usize,
    scale: f64,
    kappa: f64,
) -> SegmentCoefficients {
    let mut coeffs = SegmentCoefficients::zeros(partition, dim, truncation, 1.0);
    for runs in &mut coeffs.components {
        for run in runs.iter_mut() {
            for v in &mut run.coeffs {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
            run.lambda_sq = kappa * (1.0 - rng.random::<f64>());
        }
    }
    coeffs
}

pub fn random_state<R: Rng>(rng: &mut R, len: usize, dim: usize, m: usize, n_min: usize, scale: f64) -> ChainState {
    let partition = random_partition(rng, len, dim, m, n_min);
    let coeffs = random_coeffs(rng, &partition, dim, 10, scale, 1e5);
    ChainState {
        partition,
        coeffs,
        loglik: 0.0,
        iteration: 0,
    }
}

/// Θ and Ψ of one segment written out from the spline expansions directly.
pub fn cholesky_by_hand(state: &ChainState, q: usize, w: f64) -> (DMatrix<Complex>, Vec<f64>) {
    let dim = state.coeffs.dim;
    let coeff = |c: usize| &state.coeffs.run_for(c, q).coeffs;
    let even = |a: &[f64]| -> f64 { a.iter().enumerate().map(|(k, v)| v * (2.0 * PI * k as f64 * w).cos()).sum() };
    let odd = |a: &[f64]| -> f64 {
        a.iter()
            .enumerate()
            .map(|(k, v)| v * (2.0 * PI * (k + 1) as f64 * w).sin())
            .sum()
    };
    let psi: Vec<f64> = (0..dim).map(|j| even(coeff(j)).exp()).collect();
    let mut theta = DMatrix::<Complex>::identity(dim, dim);
    let mut c = dim;
    for row in 1..dim {
        for col in 0..row {
            theta[(row, col)] = Complex::new(even(coeff(c)), odd(coeff(c + 1)));
            c += 2;
        }
    }
    (theta, psi)
}

/// `f = (Θ Ψ⁻¹ Θ*)⁻¹` by general matrix inversion.
pub fn dense_spectrum(theta: &DMatrix<Complex>, psi: &[f64]) -> DMatrix<Complex> {
    let dim = psi.len();
    let psi_inv = DMatrix::<Complex>::from_fn(dim, dim, |a, b| {
        if a == b {
            Complex::new(1.0 / psi[a], 0.0)
        } else {
            Complex::new(0.0, 0.0)
        }
    });
    (theta * psi_inv * theta.adjoint()).try_inverse().unwrap()
}

/// Mean-centred `n^{-1/2} Σ_t x_t e^{−2πiωt}` over one-based global times in `range`.
pub fn naive_dft(series: &MultivariateSeries, range: std::ops::Range<usize>, w: f64) -> Vec<Complex> {
    let n = range.len() as f64;
    (0..series.dim())
        .map(|j| {
            let mean = range.clone().map(|t| series.get(t, j)).sum::<f64>() / n;
            range
                .clone()
                .map(|t| Complex::from_polar(series.get(t, j) - mean, -2.0 * PI * w * (t + 1) as f64))
                .sum::<Complex>()
                / n.sqrt()
        })
        .collect()
}

/// Whittle log-likelihood assembled from naive DFTs, dense inverses and determinants.
pub fn dense_loglik(series: &MultivariateSeries, state: &ChainState) -> f64 {
    let p = &state.partition;
    let mut total = 0.0;
    for q in 0..p.n_segments() {
        let range = p.segment(q);
        let n = range.len();
        for l in 1..=(n - 1) / 2 {
            let w = l as f64 / n as f64;
            let y = naive_dft(series, range.clone(), w);
            let (theta, psi) = cholesky_by_hand(state, q, w);
            let f = dense_spectrum(&theta, &psi);
            let f_inv = f.clone().try_inverse().unwrap();
            let y = DMatrix::from_column_slice(y.len(), 1, &y);
            let quad = (y.adjoint() * f_inv * &y)[(0, 0)].re;
            total -= f.determinant().re.ln() + quad;
        }
    }
    total
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// `P(K ≤ x)` complement for the Kolmogorov distribution.
pub fn kolmogorov_p(n: usize, d: f64) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

/// CDF of `λ² ∝ (λ²)^{−shape−1} e^{−rate/λ²}` on `(0, upper]`, tabulated by
/// Simpson integration in `z = rate/λ²`.
pub struct NumericCdf {
    z0: f64,
    step: f64,
    /// `tail[i] = ∫_{z0 + i·step}^{∞}` of the gamma kernel, normalised.
    tail: Vec<f64>,
}

impl NumericCdf {
    pub fn new(shape: f64, rate: f64, upper: f64) -> Self {
        let z0 = rate / upper;
        let span = 400.0 + 10.0 * shape;
        let cells = 400_000;
        let step = span / cells as f64;
        let kernel = |z: f64| ((shape - 1.0) * z.ln() - (z - z0)).exp();
        let mut tail = vec![0.0; cells + 1];
        for i in (0..cells).rev() {
            let a = z0 + i as f64 * step;
            let piece = step / 6.0 * (kernel(a) + 4.0 * kernel(a + step / 2.0) + kernel(a + step));
            tail[i] = tail[i + 1] + piece;
        }
        let norm = tail[0];
        tail.iter_mut().for_each(|v| *v /= norm);
        Self { z0, step, tail }
    }

    pub fn cdf(&self, rate: f64, x: f64) -> f64 {
        let pos = (rate / x - self.z0) / self.step;
        if pos <= 0.0 {
            return 1.0;
        }
        let i = pos.floor() as usize;
        if i + 1 >= self.tail.len() {
            return 0.0;
        }
        let frac = pos - i as f64;
        self.tail[i] * (1.0 - frac) + self.tail[i + 1] * frac
    }
}
