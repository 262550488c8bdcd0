//! Simulated processes against their closed-form spectra.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvspec::model::{coherence, Complex, MultivariateSeries};
use tvspec::simgen::{
    gen_piecewise_vma, gen_var, gen_vma, piecewise_var_spec, piecewise_vma_spec, slow_varying_vma_spec, true_spectrum_var,
    true_spectrum_vma, CoefficientPath, Regime, VarSpec, VmaSpec,
};

fn freqs() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 100.0).collect()
}

/// Raw (not demeaned) `n^{-1} d(ω) d(ω)*` over `first..first + n`, zero-based rows.
fn periodogram(x: &MultivariateSeries, first: usize, n: usize, w: f64) -> DMatrix<Complex> {
    let dim = x.dim();
    let mut d = vec![Complex::new(0.0, 0.0); dim];
    for t in 0..n {
        let e = Complex::from_polar(1.0, -2.0 * PI * w * t as f64);
        for (j, dj) in d.iter_mut().enumerate() {
            *dj += e * x.get(first + t, j);
        }
    }
    DMatrix::from_fn(dim, dim, |a, b| d[a] * d[b].conj() / n as f64)
}

/// Mean periodogram over replicate stretches against the analytic spectrum:
/// worst Frobenius relative error and worst diagonal relative error.
fn mean_periodogram_error(
    replicates: usize,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> MultivariateSeries,
    stretch: (usize, usize),
    truth: impl Fn(f64) -> DMatrix<Complex>,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ws = freqs();
    let mut sums: Vec<DMatrix<Complex>> = Vec::new();
    for _ in 0..replicates {
        let x = draw(&mut rng);
        for (k, &w) in ws.iter().enumerate() {
            let p = periodogram(&x, stretch.0, stretch.1, w);
            if sums.len() <= k {
                sums.push(p);
            } else {
                sums[k] += p;
            }
        }
    }
    let (mut frob, mut diag) = (0.0f64, 0.0f64);
    for (k, &w) in ws.iter().enumerate() {
        let mean = &sums[k] / Complex::new(replicates as f64, 0.0);
        let f = truth(w);
        frob = frob.max((&mean - &f).norm() / f.norm());
        for j in 0..f.nrows() {
            diag = diag.max((mean[(j, j)].re - f[(j, j)].re).abs() / f[(j, j)].re);
        }
    }
    (frob, diag)
}

fn single_regime_vma(len: usize, (lag1, lag2, sigma): (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)) -> VmaSpec {
    VmaSpec {
        len,
        dim: lag1.nrows(),
        path: CoefficientPath::Piecewise(vec![Regime {
            first: 1,
            last: len,
            lag1,
            lag2,
            sigma,
        }]),
    }
}

fn regime_four(len: usize) -> VarSpec {
    let mut spec = piecewise_var_spec(1.0, 1).unwrap();
    let mut r = spec.regimes.pop().unwrap();
    r.first = 1;
    r.last = len;
    VarSpec {
        len,
        dim: 2,
        regimes: vec![r],
        pre_period: spec.pre_period,
    }
}

#[test]
fn piecewise_moving_average_periodograms_converge() {
    let spec = piecewise_vma_spec();
    for (half, first, u) in [(0, 0, 0.25), (1, 300, 0.75)] {
        let (frob, diag) = mean_periodogram_error(
            4000,
            |rng| gen_piecewise_vma(rng),
            (first, 300),
            |w| true_spectrum_vma(&spec, u, w),
            10 + half,
        );
        assert!(frob < 0.1 && diag < 0.1, "half {half}: frobenius {frob:.3}, diagonal {diag:.3}");
    }
}

#[test]
fn frozen_slow_varying_periodograms_converge() {
    let slow = slow_varying_vma_spec();
    for t0 in [200usize, 700] {
        let frozen = single_regime_vma(400, slow.coefficients(t0));
        let u = t0 as f64 / slow.len as f64;
        for w in freqs() {
            let a = true_spectrum_vma(&frozen, 0.5, w);
            let b = true_spectrum_vma(&slow, u, w);
            assert!((a - b).norm() < 1e-12);
        }
        let (frob, diag) = mean_periodogram_error(
            4000,
            |rng| gen_vma(&frozen, rng).unwrap(),
            (0, 400),
            |w| true_spectrum_vma(&slow, u, w),
            20 + t0 as u64,
        );
        assert!(frob < 0.1 && diag < 0.1, "t = {t0}: frobenius {frob:.3}, diagonal {diag:.3}");
    }
}

#[test]
fn regime_four_autoregression_periodograms_converge() {
    let spec = regime_four(1000);
    let (frob, diag) = mean_periodogram_error(
        4000,
        |rng| gen_var(&spec, rng).unwrap(),
        (0, 1000),
        |w| true_spectrum_var(&spec, 0.5, w).unwrap(),
        30,
    );
    assert!(frob < 0.1 && diag < 0.1, "frobenius {frob:.3}, diagonal {diag:.3}");
}

#[test]
fn first_half_periodogram_at_one_frequency() {
    let spec = piecewise_vma_spec();
    let f = true_spectrum_vma(&spec, 0.25, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let draws: Vec<DMatrix<Complex>> = (0..200)
        .map(|_| periodogram(&gen_piecewise_vma(&mut rng), 0, 300, 0.1))
        .collect();
    for a in 0..3 {
        for b in 0..3 {
            for part in [|c: Complex| c.re, |c: Complex| c.im] {
                let v: Vec<f64> = draws.iter().map(|p| part(p[(a, b)])).collect();
                let mean = v.iter().sum::<f64>() / 200.0;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 199.0;
                let se = (var / 200.0).sqrt();
                let target = part(f[(a, b)]);
                assert!((mean - target).abs() < 4.0 * se + 1e-12, "({a},{b}): {mean:.4} vs {target:.4}, se {se:.4}");
            }
        }
    }
}

#[test]
fn regime_four_peak_sits_at_the_resonance() {
    let spec = regime_four(2048);
    // f11 = σ11 / |1 − 1.32 e^{−2πiω} + 0.81 e^{−4πiω}|², maximised where cos 2πω = φ1(φ2 − 1)/(4φ2)
    let (phi1, phi2) = (1.32, -0.81);
    let analytic = ((phi1 * (phi2 - 1.0)) / (4.0 * phi2) as f64).acos() / (2.0 * PI);
    let root_arg = ((phi1 / 2.0) / (-phi2 as f64).sqrt()).acos() / (2.0 * PI);
    assert!((0.1180..0.1181).contains(&analytic) && (0.1189..0.1191).contains(&root_arg));

    let fine: Vec<f64> = (0..=50_000).map(|i| i as f64 / 100_000.0).collect();
    let truth_peak = fine
        .iter()
        .copied()
        .max_by(|&a, &b| {
            let fa = true_spectrum_var(&spec, 0.5, a).unwrap()[(0, 0)].re;
            let fb = true_spectrum_var(&spec, 0.5, b).unwrap()[(0, 0)].re;
            fa.total_cmp(&fb)
        })
        .unwrap();
    assert!((truth_peak - analytic).abs() < 2e-5, "{truth_peak} vs {analytic}");

    let n = 2048;
    let bins: Vec<f64> = (0..=n / 2).map(|k| k as f64 / n as f64).collect();
    let mut mean = vec![0.0; bins.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..400 {
        let x = gen_var(&spec, &mut rng).unwrap();
        for (k, &w) in bins.iter().enumerate() {
            mean[k] += periodogram(&x, 0, n, w)[(0, 0)].re;
        }
    }
    let smoothed: Vec<f64> = (0..bins.len())
        .map(|k| {
            let lo = k.saturating_sub(5);
            let hi = (k + 5).min(bins.len() - 1);
            mean[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let k = (0..bins.len()).max_by(|&a, &b| smoothed[a].total_cmp(&smoothed[b])).unwrap();
    assert!((bins[k] - analytic).abs() < 0.004, "Monte Carlo peak {} vs {analytic}", bins[k]);
}

/// Sample cross-correlation `r_ab(h)` of one 300-sample half.
fn autocorrelation(x: &MultivariateSeries, first: usize, h: usize, a: usize, b: usize) -> f64 {
    let mean = |j: usize| (first..first + 300).map(|t| x.get(t, j)).sum::<f64>() / 300.0;
    let acov = |h: usize, a: usize, b: usize| {
        let (ma, mb) = (mean(a), mean(b));
        (first..first + 300 - h).map(|t| (x.get(t + h, a) - ma) * (x.get(t, b) - mb)).sum::<f64>() / 300.0
    };
    acov(h, a, b) / (acov(0, a, a) * acov(0, b, b)).sqrt()
}

// A single half has Bartlett standard errors above 1/√300 at lags past the
// cutoff, so the 4/√300 bound is applied to the replicate-averaged correlation.
#[test]
fn moving_average_autocorrelation_cuts_off_after_lag_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let draws: Vec<MultivariateSeries> = (0..200).map(|_| gen_piecewise_vma(&mut rng)).collect();
    let bound = 4.0 / 300f64.sqrt();
    for first in [0, 300] {
        let mut largest_inside = 0.0f64;
        for h in 1..=5 {
            for a in 0..3 {
                for b in 0..3 {
                    let r = draws.iter().map(|x| autocorrelation(x, first, h, a, b)).sum::<f64>() / 200.0;
                    if h <= 2 {
                        largest_inside = largest_inside.max(r.abs());
                    } else {
                        assert!(r.abs() < bound, "half at {first}, lag {h}, ({a},{b}): {r:.3}");
                    }
                }
            }
        }
        assert!(largest_inside > bound, "half at {first}: lags 1 and 2 peak at {largest_inside:.3}");
    }
}

#[test]
fn channel_variances_match_integrated_spectrum() {
    let spec = piecewise_vma_spec();
    let CoefficientPath::Piecewise(regimes) = &spec.path else {
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let draws: Vec<MultivariateSeries> = (0..200).map(|_| gen_piecewise_vma(&mut rng)).collect();
    for (half, u) in [(0usize, 0.25), (1, 0.75)] {
        // ∫_{−1/2}^{1/2} f = 2 ∫_0^{1/2} Re f, by the trapezoid rule
        let cells = 2000;
        let integral: Vec<f64> = (0..3)
            .map(|j| {
                let g = |k: usize| true_spectrum_vma(&spec, u, k as f64 / (2 * cells) as f64)[(j, j)].re;
                let inner: f64 = (1..cells).map(g).sum();
                2.0 * (inner + 0.5 * (g(0) + g(cells))) / (2 * cells) as f64
            })
            .collect();
        let r = &regimes[half];
        let gamma0 = &r.sigma + &r.lag1 * &r.sigma * r.lag1.transpose() + &r.lag2 * &r.sigma * r.lag2.transpose();
        for j in 0..3 {
            assert!((integral[j] - gamma0[(j, j)]).abs() < 1e-9, "quadrature {} vs {}", integral[j], gamma0[(j, j)]);
            let v: Vec<f64> = draws
                .iter()
                .map(|x| (300 * half..300 * (half + 1)).map(|t| x.get(t, j).powi(2)).sum::<f64>() / 300.0)
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let se = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64 / v.len() as f64).sqrt();
            assert!((mean - integral[j]).abs() < 4.0 * se, "half {half}, channel {j}: {mean:.4} vs {:.4}", integral[j]);
        }
    }
}

/// Largest change in coherence between time points `step` apart, over the
/// 51-frequency grid and all off-diagonal pairs.
fn max_coherence_jump(spec: &VmaSpec, step: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for w in freqs() {
        let rho = |t: usize| {
            let f = true_spectrum_vma(spec, t as f64 / spec.len as f64, w);
            (1..spec.dim)
                .flat_map(|j| (0..j).map(move |k| (j, k)))
                .map(|(j, k)| coherence(&f, j, k).unwrap())
                .collect::<Vec<_>>()
        };
        for t in (1..=spec.len - step).step_by(step) {
            let (a, b) = (rho(t), rho(t + step));
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

#[test]
fn slow_varying_coherence_is_continuous_in_time() {
    let slow = slow_varying_vma_spec();
    let fine = max_coherence_jump(&slow, 1);
    let coarse = max_coherence_jump(&slow, 8);
    assert!(fine < 0.25 * coarse, "slow-varying jumps {fine:.4} at step 1, {coarse:.4} at step 8");

    let piecewise = piecewise_vma_spec();
    let fine = max_coherence_jump(&piecewise, 1);
    let coarse = max_coherence_jump(&piecewise, 8);
    assert!(fine > 0.9 * coarse && fine > 0.1, "piecewise jumps {fine:.4} at step 1, {coarse:.4} at step 8");
}
