//! Simulation processes with closed-form time-varying spectra.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Complex, MultivariateSeries};
use crate::posterior::SpectrumGrid;

/// Lag matrices and innovation covariance in force over `first..=last`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regime {
    pub first: usize,
    pub last: usize,
    pub lag1: DMatrix<f64>,
    pub lag2: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
}

/// How the coefficients of a process depend on time.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientPath {
    Piecewise(Vec<Regime>),
    /// The slowly varying bivariate moving average.
    SlowVarying,
}

/// Second-order moving average `X_t = ε_t + Φ_1(t) ε_{t−1} + Φ_2(t) ε_{t−2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct VmaSpec {
    pub len: usize,
    pub dim: usize,
    pub path: CoefficientPath,
}

/// Second-order autoregression `X_t = Φ_1 X_{t−1} + Φ_2 X_{t−2} + ε_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarSpec {
    pub len: usize,
    pub dim: usize,
    pub regimes: Vec<Regime>,
    /// Samples simulated under the first regime and discarded.
    pub pre_period: usize,
}

/// Unit-diagonal correlation matrix with a common off-diagonal value.
pub fn equicorrelation(dim: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { rho })
}

fn check_regimes(len: usize, dim: usize, regimes: &[Regime]) -> Result<()> {
    let mut next = 1;
    for r in regimes {
        if r.first != next || r.last < r.first {
            return Err(Error::InvalidArgument("regimes must tile 1..=T in order".into()));
        }
        for m in [&r.lag1, &r.lag2, &r.sigma] {
            if m.shape() != (dim, dim) {
                return Err(Error::InvalidArgument("regime matrix has the wrong shape".into()));
            }
        }
        if r.sigma.clone().cholesky().is_none() || (&r.sigma - r.sigma.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidArgument("innovation covariance is not symmetric positive definite".into()));
        }
        next = r.last + 1;
    }
    if next != len + 1 {
        return Err(Error::InvalidArgument("regimes must tile 1..=T in order".into()));
    }
    Ok(())
}

impl VmaSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.path {
            CoefficientPath::Piecewise(regimes) => check_regimes(self.len, self.dim, regimes),
            CoefficientPath::SlowVarying if self.dim == 2 => Ok(()),
            CoefficientPath::SlowVarying => Err(Error::InvalidArgument("slowly varying process is bivariate".into())),
        }
    }

    /// `(Φ_1, Φ_2, Σ)` at time `t` (one-based).
    pub fn coefficients(&self, t: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        match &self.path {
            CoefficientPath::Piecewise(regimes) => {
                let r = regime_at(regimes, t);
                (r.lag1.clone(), r.lag2.clone(), r.sigma.clone())
            }
            CoefficientPath::SlowVarying => {
                let (p1, p2) = slow_varying_diagonal(t as f64);
                (
                    DMatrix::from_row_slice(2, 2, &[p1, -1.0, -1.0, p2]),
                    DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -1.2]),
                    equicorrelation(2, 0.2),
                )
            }
        }
    }
}

/// `φ₁(t) = 1.122 (1 − 1.781 sin(πt/2048))`, `φ₂(t) = 1.122 (1 − 1.781 cos(0.8πt/2048))`.
pub fn slow_varying_diagonal(t: f64) -> (f64, f64) {
    use std::f64::consts::PI;
    (
        1.122 * (1.0 - 1.781 * (PI * t / 2048.0).sin()),
        1.122 * (1.0 - 1.781 * (0.8 * PI * t / 2048.0).cos()),
    )
}

fn regime_at(regimes: &[Regime], t: usize) -> &Regime {
    let i = regimes.partition_point(|r| r.last < t);
    &regimes[i.min(regimes.len() - 1)]
}

/// Time index `t ∈ 1..=T` owning rescaled time `u`.
pub fn time_index(u: f64, len: usize) -> usize {
    ((u * len as f64 - 1e-9).ceil().max(1.0) as usize).min(len)
}

/// Trivariate piecewise moving average, `T = 600`, change after `t = 300`.
pub fn piecewise_vma_spec() -> VmaSpec {
    let lag2 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.3, 0.3, 0.0]));
    let sigma = equicorrelation(3, 0.5);
    let regime = |first, last, lag1: &[f64]| Regime {
        first,
        last,
        lag1: DMatrix::from_row_slice(3, 3, lag1),
        lag2: lag2.clone(),
        sigma: sigma.clone(),
    };
    VmaSpec {
        len: 600,
        dim: 3,
        path: CoefficientPath::Piecewise(vec![
            regime(1, 300, &[0.6, 0.0, 0.0, 0.2, -0.5, 0.0, 0.1, 0.3, 0.4]),
            regime(301, 600, &[0.6, 0.0, 0.0, 0.2, 0.5, 0.0, -0.1, -0.3, 0.4]),
        ]),
    }
}

/// Bivariate moving average with slowly varying coefficients, `T = 1024`.
pub fn slow_varying_vma_spec() -> VmaSpec {
    VmaSpec {
        len: 1024,
        dim: 2,
        path: CoefficientPath::SlowVarying,
    }
}

/// Four-regime bivariate autoregression with boundaries `400, 5000, 10000`
/// and `T = 12000`, all multiplied by `scale`. Every regime must keep at
/// least `n_min` samples.
pub fn piecewise_var_spec(scale: f64, n_min: usize) -> Result<VarSpec> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidArgument(format!("scale {scale} outside (0, 1]")));
    }
    let s = |v: f64| (v * scale).round() as usize;
    let bounds = [0, s(400.0), s(5000.0), s(10000.0), s(12000.0)];
    if bounds.windows(2).any(|w| w[1] < w[0] + n_min.max(1)) {
        return Err(Error::InvalidArgument(format!(
            "scale {scale} leaves a regime shorter than n_min = {n_min}"
        )));
    }
    let diag = |a: f64, b: f64| DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b]);
    let params = [
        (diag(0.5, -0.6), diag(0.0, -0.5), 0.5),
        (diag(0.5, 0.6), diag(0.0, -0.5), 0.5),
        (diag(0.5, 0.6), diag(0.0, -0.5), 0.8),
        (diag(1.32, 0.6), diag(-0.81, -0.5), 0.8),
    ];
    let regimes = params
        .into_iter()
        .enumerate()
        .map(|(i, (lag1, lag2, rho))| Regime {
            first: bounds[i] + 1,
            last: bounds[i + 1],
            lag1,
            lag2,
            sigma: equicorrelation(2, rho),
        })
        .collect();
    Ok(VarSpec {
        len: bounds[4],
        dim: 2,
        regimes,
        pre_period: 500,
    })
}

fn innovation<R: Rng + ?Sized>(chol: &DMatrix<f64>, rng: &mut R) -> nalgebra::DVector<f64> {
    let z = nalgebra::DVector::from_fn(chol.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    chol * z
}

fn lower_cholesky(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sigma
        .clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidArgument("innovation covariance is not positive definite".into()))
}

pub fn gen_vma<R: Rng + ?Sized>(spec: &VmaSpec, rng: &mut R) -> Result<MultivariateSeries> {
    spec.validate()?;
    let (_, _, sigma0) = spec.coefficients(1);
    let chol0 = lower_cholesky(&sigma0)?;
    let mut prev2 = innovation(&chol0, rng);
    let mut prev1 = innovation(&chol0, rng);
    let mut out = Vec::with_capacity(spec.len * spec.dim);
    let mut chol_cache: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    for t in 1..=spec.len {
        let (lag1, lag2, sigma) = spec.coefficients(t);
        let chol = match &chol_cache {
            Some((s, c)) if *s == sigma => c.clone(),
            _ => {
                let c = lower_cholesky(&sigma)?;
                chol_cache = Some((sigma, c.clone()));
                c
            }
        };
        let e = innovation(&chol, rng);
        let x = &e + &lag1 * &prev1 + &lag2 * &prev2;
        out.extend(x.iter());
        prev2 = prev1;
        prev1 = e;
    }
    MultivariateSeries::from_flat(spec.len, spec.dim, out)
}

pub fn gen_var<R: Rng + ?Sized>(spec: &VarSpec, rng: &mut R) -> Result<MultivariateSeries> {
    check_regimes(spec.len, spec.dim, &spec.regimes)?;
    let chols = spec
        .regimes
        .iter()
        .map(|r| lower_cholesky(&r.sigma))
        .collect::<Result<Vec<_>>>()?;
    let zero = nalgebra::DVector::zeros(spec.dim);
    let (mut x1, mut x2) = (zero.clone(), zero);
    let mut out = Vec::with_capacity(spec.len * spec.dim);
    let first = &spec.regimes[0];
    for _ in 0..spec.pre_period {
        let x = &first.lag1 * &x1 + &first.lag2 * &x2 + innovation(&chols[0], rng);
        x2 = std::mem::replace(&mut x1, x);
    }
    let mut r = 0;
    for t in 1..=spec.len {
        while spec.regimes[r].last < t {
            r += 1;
        }
        let reg = &spec.regimes[r];
        let x = &reg.lag1 * &x1 + &reg.lag2 * &x2 + innovation(&chols[r], rng);
        out.extend(x.iter());
        x2 = std::mem::replace(&mut x1, x);
    }
    MultivariateSeries::from_flat(spec.len, spec.dim, out)
}

/// Trivariate piecewise moving average (`T = 600`).
pub fn gen_piecewise_vma<R: Rng + ?Sized>(rng: &mut R) -> MultivariateSeries {
    gen_vma(&piecewise_vma_spec(), rng).expect("built-in specification is valid")
}

/// Bivariate slowly varying moving average (`T = 1024`).
pub fn gen_slowvarying_vma<R: Rng + ?Sized>(rng: &mut R) -> MultivariateSeries {
    gen_vma(&slow_varying_vma_spec(), rng).expect("built-in specification is valid")
}

/// Four-regime bivariate autoregression, optionally shrunk by `scale`.
pub fn gen_piecewise_var<R: Rng + ?Sized>(scale: f64, n_min: usize, rng: &mut R) -> Result<MultivariateSeries> {
    gen_var(&piecewise_var_spec(scale, n_min)?, rng)
}

fn lag_polynomial(lag1: &DMatrix<f64>, lag2: &DMatrix<f64>, omega: f64, sign: f64) -> DMatrix<Complex> {
    let dim = lag1.nrows();
    let z1 = Complex::from_polar(1.0, -2.0 * std::f64::consts::PI * omega);
    let z2 = z1 * z1;
    DMatrix::from_fn(dim, dim, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        Complex::new(id, 0.0) + sign * (z1 * lag1[(i, j)] + z2 * lag2[(i, j)])
    })
}

fn hermitian_clean(mut f: DMatrix<Complex>) -> DMatrix<Complex> {
    let n = f.nrows();
    for a in 0..n {
        f[(a, a)].im = 0.0;
        for b in a + 1..n {
            let avg = (f[(a, b)] + f[(b, a)].conj()) * 0.5;
            f[(a, b)] = avg;
            f[(b, a)] = avg.conj();
        }
    }
    f
}

/// `f(u, ω) = Φ(u, ω) Σ Φ(u, ω)^*` with `Φ = I + Φ_1 e^{−2πiω} + Φ_2 e^{−4πiω}`.
pub fn true_spectrum_vma(spec: &VmaSpec, u: f64, omega: f64) -> DMatrix<Complex> {
    let (lag1, lag2, sigma) = spec.coefficients(time_index(u, spec.len));
    let phi = lag_polynomial(&lag1, &lag2, omega, 1.0);
    let s = sigma.map(|v| Complex::new(v, 0.0));
    hermitian_clean(&phi * s * phi.adjoint())
}

/// `f(u, ω) = Φ(ω)^{−1} Σ Φ(ω)^{−*}` with `Φ = I − Φ_1 e^{−2πiω} − Φ_2 e^{−4πiω}`.
pub fn true_spectrum_var(spec: &VarSpec, u: f64, omega: f64) -> Result<DMatrix<Complex>> {
    let r = regime_at(&spec.regimes, time_index(u, spec.len));
    let phi = lag_polynomial(&r.lag1, &r.lag2, omega, -1.0);
    let inv = phi
        .try_inverse()
        .ok_or_else(|| Error::InvalidState(format!("autoregressive polynomial is singular at ω = {omega}")))?;
    let s = r.sigma.map(|v| Complex::new(v, 0.0));
    Ok(hermitian_clean(&inv * s * inv.adjoint()))
}

/// A built-in simulation process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "process", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    PiecewiseVma,
    SlowVaryingVma,
    PiecewiseVar {
        #[serde(default = "unit_scale")]
        scale: f64,
    },
}

fn unit_scale() -> f64 {
    1.0
}

impl Generator {
    pub fn name(&self) -> &'static str {
        match self {
            Generator::PiecewiseVma => "piecewise_vma",
            Generator::SlowVaryingVma => "slow_varying_vma",
            Generator::PiecewiseVar { .. } => "piecewise_var",
        }
    }

    pub fn len(&self, n_min: usize) -> Result<usize> {
        Ok(match self {
            Generator::PiecewiseVma => 600,
            Generator::SlowVaryingVma => 1024,
            Generator::PiecewiseVar { scale } => piecewise_var_spec(*scale, n_min)?.len,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Generator::PiecewiseVma => 3,
            _ => 2,
        }
    }

    pub fn generate<R: Rng + ?Sized>(&self, n_min: usize, rng: &mut R) -> Result<MultivariateSeries> {
        match self {
            Generator::PiecewiseVma => gen_vma(&piecewise_vma_spec(), rng),
            Generator::SlowVaryingVma => gen_vma(&slow_varying_vma_spec(), rng),
            Generator::PiecewiseVar { scale } => gen_piecewise_var(*scale, n_min, rng),
        }
    }

    /// True spectral matrices at time points `times` (one-based) and `freqs`.
    pub fn truth(&self, n_min: usize, times: &[usize], freqs: &[f64]) -> Result<SpectrumGrid> {
        let len = self.len(n_min)?;
        if times.iter().any(|&t| t == 0 || t > len) {
            return Err(Error::InvalidArgument(format!("time grid must lie within 1..={len}")));
        }
        let var = match self {
            Generator::PiecewiseVar { scale } => Some(piecewise_var_spec(*scale, n_min)?),
            _ => None,
        };
        let vma = match self {
            Generator::PiecewiseVma => Some(piecewise_vma_spec()),
            Generator::SlowVaryingVma => Some(slow_varying_vma_spec()),
            Generator::PiecewiseVar { .. } => None,
        };
        let mut cells = Vec::with_capacity(times.len() * freqs.len());
        for &t in times {
            let u = t as f64 / len as f64;
            for &w in freqs {
                cells.push(match (&vma, &var) {
                    (Some(spec), _) => true_spectrum_vma(spec, u, w),
                    (_, Some(spec)) => true_spectrum_var(spec, u, w)?,
                    _ => unreachable!("one specification is always built"),
                });
            }
        }
        Ok(SpectrumGrid {
            times: times.to_vec(),
            freqs: freqs.to_vec(),
            dim: self.dim(),
            cells,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn printed_coefficients() {
        let spec = piecewise_vma_spec();
        let (lag1, lag2, sigma) = spec.coefficients(1);
        assert_eq!(lag1.row(1).iter().copied().collect::<Vec<_>>(), vec![0.2, -0.5, 0.0]);
        assert_eq!(lag2[(2, 2)], 0.0);
        assert_eq!(sigma[(0, 2)], 0.5);
        let (lag1b, _, _) = spec.coefficients(301);
        assert_eq!(lag1b.row(2).iter().copied().collect::<Vec<_>>(), vec![-0.1, -0.3, 0.4]);
    }

    #[test]
    fn slow_varying_endpoints() {
        let (p1, p2) = slow_varying_diagonal(0.0);
        assert!((p1 - 1.122).abs() < 1e-15);
        assert!((p2 + 0.876282).abs() < 1e-12);
        let (lag1, lag2, _) = slow_varying_vma_spec().coefficients(10);
        assert_eq!(lag1[(0, 1)], -1.0);
        assert_eq!(lag2[(1, 1)], -1.2);
    }

    #[test]
    fn var_boundaries_and_scaling() {
        let full = piecewise_var_spec(1.0, 60).unwrap();
        let ends: Vec<usize> = full.regimes.iter().map(|r| r.last).collect();
        assert_eq!(ends, vec![400, 5000, 10000, 12000]);
        let half = piecewise_var_spec(0.5, 60).unwrap();
        let ends: Vec<usize> = half.regimes.iter().map(|r| r.last).collect();
        assert_eq!(ends, vec![200, 2500, 5000, 6000]);
        assert!(matches!(piecewise_var_spec(0.1, 60), Err(Error::InvalidArgument(_))));
        assert!(piecewise_var_spec(0.0, 60).is_err());
    }

    #[test]
    fn regime_four_is_stationary() {
        // 1 − 1.32 z + 0.81 z²: complex roots with |z|² = 1/0.81
        let disc: f64 = 1.32 * 1.32 - 4.0 * 0.81;
        assert!(disc < 0.0);
        assert!(1.0 / 0.81 > 1.0);
    }

    #[test]
    fn white_noise_and_scalar_closed_forms() {
        let zero = DMatrix::zeros(2, 2);
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let spec = VmaSpec {
            len: 10,
            dim: 2,
            path: CoefficientPath::Piecewise(vec![Regime {
                first: 1,
                last: 10,
                lag1: zero.clone(),
                lag2: zero.clone(),
                sigma: sigma.clone(),
            }]),
        };
        for w in [0.0, 0.2, 0.5] {
            let f = true_spectrum_vma(&spec, 0.5, w);
            assert!((f.map(|c| c.re) - &sigma).amax() < 1e-15);
        }
        let theta = 0.7;
        let ma1 = VmaSpec {
            len: 10,
            dim: 1,
            path: CoefficientPath::Piecewise(vec![Regime {
                first: 1,
                last: 10,
                lag1: DMatrix::from_element(1, 1, theta),
                lag2: DMatrix::zeros(1, 1),
                sigma: DMatrix::from_element(1, 1, 1.5),
            }]),
        };
        let ar1 = VarSpec {
            len: 10,
            dim: 1,
            regimes: match &ma1.path {
                CoefficientPath::Piecewise(r) => r.clone(),
                _ => unreachable!(),
            },
            pre_period: 0,
        };
        for w in [0.05, 0.3] {
            let z = Complex::from_polar(1.0, -2.0 * std::f64::consts::PI * w);
            let ma = 1.5 * (Complex::new(1.0, 0.0) + theta * z).norm_sqr();
            let ar = 1.5 / (Complex::new(1.0, 0.0) - theta * z).norm_sqr();
            assert!((true_spectrum_vma(&ma1, 0.3, w)[(0, 0)].re - ma).abs() < 1e-12);
            assert!((true_spectrum_var(&ar1, 0.3, w).unwrap()[(0, 0)].re - ar).abs() < 1e-12);
        }
    }

    #[test]
    fn truth_is_hermitian_positive_definite() {
        let freqs = crate::posterior::default_freq_grid(11);
        for g in [Generator::PiecewiseVma, Generator::SlowVaryingVma, Generator::PiecewiseVar { scale: 0.5 }] {
            let len = g.len(60).unwrap();
            let times: Vec<usize> = (1..=len).step_by(len / 7).collect();
            let grid = g.truth(60, &times, &freqs).unwrap();
            for f in &grid.cells {
                assert!((f - f.adjoint()).norm() < 1e-12);
                let eig = nalgebra::linalg::SymmetricEigen::new(f.clone()).eigenvalues;
                assert!(eig.iter().all(|&e| e > 0.0), "{eig}");
            }
        }
    }

    #[test]
    fn time_index_maps_regime_boundary() {
        assert_eq!(time_index(0.5, 600), 300);
        assert_eq!(time_index(301.0 / 600.0, 600), 301);
        assert_eq!(time_index(0.0, 600), 1);
        assert_eq!(time_index(1.0, 600), 600);
    }

    #[test]
    fn generators_are_reproducible() {
        let a = gen_piecewise_vma(&mut ChaCha8Rng::seed_from_u64(3));
        let b = gen_piecewise_vma(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!((a.len(), a.dim()), (600, 3));
        let v = gen_piecewise_var(0.5, 60, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!((v.len(), v.dim()), (6000, 2));
        assert!(v.as_flat().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn generator_json_round_trip() {
        for g in [Generator::PiecewiseVma, Generator::SlowVaryingVma, Generator::PiecewiseVar { scale: 0.5 }] {
            let s = serde_json::to_string(&g).unwrap();
            assert_eq!(serde_json::from_str::<Generator>(&s).unwrap(), g);
        }
        let g: Generator = serde_json::from_str(r#"{"process":"piecewise_var"}"#).unwrap();
        assert_eq!(g, Generator::PiecewiseVar { scale: 1.0 });
    }
}
