//! Reversible-jump MCMC over partitions, change sets and spline coefficients.
//!
//! One iteration is a between-model move (birth or death), then a
//! within-model pass: relocation of one breakpoint, a blocked HMC sweep over
//! every component-run, and Gibbs draws of the smoothing parameters.
//!
//! Coefficient blocks that a jump creates or destroys are proposed from
//! Laplace approximations of their conditional posteriors, built in canonical
//! component order. Reverse proposal densities are obtained by replaying the
//! same deterministic construction from the proposed state.

use nalgebra::{Cholesky, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{block_likelihood, cached_loglik, local_dft, whittle_loglik, BlockLikelihood, BlockTerms, SegmentCache};
use crate::model::{components, ComponentSet, MultivariateSeries, Partition, SegmentCoefficients};
use crate::priors::{
    log_n_change_sets, log_prior_total, prior_variances, sample_lambda_conditional, scaled_coefficients, PriorConfig,
};

/// Whether the data enter the target.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodMode {
    #[default]
    Whittle,
    /// Likelihood held at zero; the chain then samples the prior.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    pub leapfrog_steps: usize,
    /// Initial step size, in units of the block's preconditioned scale.
    pub step_size: f64,
    /// Each trajectory uses `step_size · (1 ± jitter)`.
    pub step_size_jitter: f64,
    /// Dual-averaging adaptation during burn-in.
    pub adapt: bool,
    pub target_accept: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            leapfrog_steps: 20,
            step_size: 0.2,
            step_size_jitter: 0.2,
            adapt: true,
            target_accept: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub burn_in: usize,
    /// Keep every `thin`-th post-burn-in state.
    pub thin: usize,
    pub prob_birth: f64,
    pub hmc: HmcConfig,
    pub relocate_local_prob: f64,
    pub relocate_window: usize,
    pub seed: u64,
    pub consistency_check_every: usize,
    /// Newton steps used to locate each Laplace proposal.
    pub newton_steps: usize,
    pub likelihood: LikelihoodMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            burn_in: 2_000,
            thin: 1,
            prob_birth: 0.5,
            hmc: HmcConfig::default(),
            relocate_local_prob: 0.5,
            relocate_window: 20,
            seed: 1,
            consistency_check_every: 500,
            newton_steps: 5,
            likelihood: LikelihoodMode::Whittle,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.burn_in >= self.iterations {
            return fail("burn_in must be smaller than iterations");
        }
        if !(self.prob_birth > 0.0 && self.prob_birth < 1.0) {
            return fail("prob_birth must lie in (0, 1)");
        }
        if self.hmc.leapfrog_steps == 0 {
            return fail("leapfrog_steps must be at least 1");
        }
        if !(self.hmc.step_size > 0.0) || !self.hmc.step_size.is_finite() {
            return fail("step_size must be positive");
        }
        if !(0.0..1.0).contains(&self.hmc.step_size_jitter) {
            return fail("step_size_jitter must lie in [0, 1)");
        }
        if !(self.hmc.target_accept > 0.0 && self.hmc.target_accept < 1.0) {
            return fail("target_accept must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.relocate_local_prob) {
            return fail("relocate_local_prob must lie in [0, 1]");
        }
        if self.relocate_window == 0 {
            return fail("relocate_window must be at least 1");
        }
        if self.thin == 0 {
            return fail("thin must be at least 1");
        }
        if self.consistency_check_every == 0 {
            return fail("consistency_check_every must be at least 1");
        }
        if self.newton_steps == 0 {
            return fail("newton_steps must be at least 1");
        }
        Ok(())
    }
}

/// Current point of the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub partition: Partition,
    pub coeffs: SegmentCoefficients,
    /// Log-likelihood of `partition` and `coeffs`, maintained incrementally.
    pub loglik: f64,
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveStats {
    pub proposed: u64,
    pub accepted: u64,
    /// Attempts abandoned because the move was not applicable.
    pub skipped: u64,
}

impl MoveStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        if accepted {
            self.accepted += 1;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveDiagnostics {
    pub birth: MoveStats,
    pub death: MoveStats,
    pub relocate: MoveStats,
    /// Adding or removing one component from a breakpoint's change set.
    pub toggle: MoveStats,
    /// One proposal per block trajectory.
    pub hmc: MoveStats,
    pub divergences: u64,
    /// `log ψ` values that hit the clamp during full likelihood evaluations.
    pub clamp_events: u64,
    /// Smoothing-parameter draws that fell back to the prior (zero roughness).
    pub lambda_fallbacks: u64,
    pub consistency_checks: u64,
    /// Largest absolute gap between cached and recomputed log-likelihood.
    pub max_drift: f64,
    /// Checks where that gap exceeded `1e-6`.
    pub drift_violations: u64,
    /// HMC step size in force after burn-in.
    pub step_size: f64,
}

/// Post-burn-in states and move statistics of a completed chain.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub snapshots: Vec<ChainState>,
    pub diagnostics: MoveDiagnostics,
}

const DRIFT_TOLERANCE: f64 = 1e-6;
const DIVERGENCE_THRESHOLD: f64 = 1000.0;

struct Trajectory {
    x: DVector<f64>,
    ll0: f64,
    ll1: f64,
    /// `H(end) − H(start)`
    delta: f64,
}

/// Leapfrog on one block with mass matrix `chol` and initial momentum `L z`.
fn leapfrog(
    block: &BlockLikelihood,
    prec: &[f64],
    chol: &Cholesky<f64, Dyn>,
    x0: &[f64],
    z: &DVector<f64>,
    eps: f64,
    steps: usize,
) -> Trajectory {
    let s = x0.len();
    let l = chol.l();
    let eval = |x: &DVector<f64>, grad: &mut DVector<f64>| -> (f64, f64) {
        grad.fill(0.0);
        let ll = block.loglik_grad(x.as_slice(), grad.as_mut_slice());
        let mut lp = ll;
        for i in 0..s {
            lp -= 0.5 * prec[i] * x[i] * x[i];
            grad[i] -= prec[i] * x[i];
        }
        (ll, lp)
    };

    let mut p = &l * z;
    let mut x = DVector::from_column_slice(x0);
    let mut grad = DVector::zeros(s);
    let (ll0, lp0) = eval(&x, &mut grad);
    let h0 = -lp0 + 0.5 * z.norm_squared();

    let mut ll1 = ll0;
    let mut lp1 = lp0;
    p.axpy(0.5 * eps, &grad, 1.0);
    for i in 0..steps {
        let v = chol.solve(&p);
        x.axpy(eps, &v, 1.0);
        (ll1, lp1) = eval(&x, &mut grad);
        if !lp1.is_finite() {
            break;
        }
        let scale = if i + 1 == steps { 0.5 } else { 1.0 };
        p.axpy(scale * eps, &grad, 1.0);
    }
    let kinetic = {
        let w = l.solve_lower_triangular(&p).expect("Cholesky factor has a positive diagonal");
        0.5 * w.norm_squared()
    };
    Trajectory {
        x,
        ll0,
        ll1,
        delta: -lp1 + kinetic - h0,
    }
}

/// Gaussian `N(mean, precision^{-1})` stored through the precision's Cholesky factor.
struct Laplace {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Laplace {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = self
            .chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        (&self.mean + x).iter().copied().collect()
    }

    fn log_density(&self, beta: &[f64]) -> f64 {
        let l = self.chol.l();
        let d = DVector::from_column_slice(beta) - &self.mean;
        let w = l.transpose() * d;
        let log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
        -0.5 * w.norm_squared() + log_det - 0.5 * beta.len() as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

fn block_objective(block: &BlockLikelihood, prec: &[f64], beta: &[f64]) -> f64 {
    block.loglik(beta) - 0.5 * beta.iter().zip(prec).map(|(b, p)| p * b * b).sum::<f64>()
}

fn precision_matrix(block: &BlockLikelihood, prec: &[f64], weights: &[f64]) -> Result<Cholesky<f64, Dyn>> {
    let mut m = block.weighted_gram(weights);
    for (i, p) in prec.iter().enumerate() {
        m[(i, i)] += p;
    }
    Cholesky::new(m).ok_or_else(|| Error::InvalidState("block precision is not positive definite".into()))
}

/// Newton iterations on the conditional log posterior of one block, then the
/// Gaussian with that mode and the observed precision there.
fn laplace(block: &BlockLikelihood, prec: &[f64], warm: &[f64], steps: usize) -> Result<Laplace> {
    let s = warm.len();
    let mut beta = warm.to_vec();
    let mut obj = block_objective(block, prec, &beta);
    let quadratic = !matches!(block.terms, BlockTerms::LogPsi { .. });
    for _ in 0..steps {
        let mut grad = vec![0.0; s];
        block.loglik_grad(&beta, &mut grad);
        for ((g, p), b) in grad.iter_mut().zip(prec).zip(&beta) {
            *g -= p * b;
        }
        let chol = precision_matrix(block, prec, &block.curvature_weights(&beta, true))?;
        let delta = chol.solve(&DVector::from_vec(grad));
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = beta.iter().zip(delta.iter()).map(|(b, d)| b + t * d).collect();
            let cand_obj = block_objective(block, prec, &cand);
            if cand_obj.is_finite() && cand_obj >= obj {
                beta = cand;
                obj = cand_obj;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved || quadratic || t * delta.amax() < 1e-12 {
            break;
        }
    }
    if !obj.is_finite() {
        return Err(Error::InvalidState("non-finite conditional posterior at Laplace mode".into()));
    }
    let chol = precision_matrix(block, prec, &block.curvature_weights(&beta, true))?;
    Ok(Laplace {
        mean: DVector::from_vec(beta),
        chol,
    })
}

fn prior_precision(coeffs: &SegmentCoefficients, c: usize, run: usize, intercept_var: f64) -> Vec<f64> {
    let kind = components(coeffs.dim)[c].basis_kind();
    prior_variances(kind, coeffs.truncation, coeffs.components[c][run].lambda_sq, intercept_var)
        .into_iter()
        .map(|v| 1.0 / v)
        .collect()
}

/// Either draw each block from its Laplace proposal or score given targets.
enum ProposalMode<'r, R: Rng + ?Sized> {
    Draw(&'r mut R),
    Score(&'r [Vec<f64>]),
}

/// Sequential Laplace proposals for `blocks` (component, run) in order. Each
/// block starts from the value currently stored in `coeffs` and is replaced
/// by the drawn (or target) value before the next block is built. Returns
/// the joint log proposal density.
#[allow(clippy::too_many_arguments)]
fn propose_blocks<R: Rng + ?Sized>(
    cache: &mut SegmentCache<'_>,
    partition: &Partition,
    coeffs: &mut SegmentCoefficients,
    blocks: &[(usize, usize)],
    prior: &PriorConfig,
    newton_steps: usize,
    flat: bool,
    mut mode: ProposalMode<'_, R>,
) -> Result<f64> {
    let mut log_q = 0.0;
    for (i, &(c, run)) in blocks.iter().enumerate() {
        let block = block_likelihood(cache, partition, coeffs, c, run, flat);
        let prec = prior_precision(coeffs, c, run, prior.intercept_var);
        let lap = laplace(&block, &prec, &coeffs.components[c][run].coeffs, newton_steps)?;
        let beta = match &mut mode {
            ProposalMode::Draw(rng) => lap.sample(*rng),
            ProposalMode::Score(targets) => targets[i].clone(),
        };
        log_q += lap.log_density(&beta);
        coeffs.components[c][run].coeffs = beta;
    }
    Ok(log_q)
}

/// Run layout after inserting a breakpoint at the end of segment `q`.
/// Components in `set` split their run there; both halves copy the old run.
fn split_runs(coeffs: &SegmentCoefficients, q: usize, set: ComponentSet) -> SegmentCoefficients {
    let mut out = coeffs.clone();
    for (c, runs) in out.components.iter_mut().enumerate() {
        let r = runs.partition_point(|run| run.segments.end <= q);
        for run in &mut runs[r + 1..] {
            run.segments = run.segments.start + 1..run.segments.end + 1;
        }
        if set.contains(c) {
            let mut right = runs[r].clone();
            right.segments = q + 1..runs[r].segments.end + 1;
            runs[r].segments.end = q + 1;
            runs.insert(r + 1, right);
        } else {
            runs[r].segments.end += 1;
        }
    }
    out
}

fn run_samples(partition: &Partition, segments: &std::ops::Range<usize>) -> usize {
    segments.clone().map(|q| partition.segment_len(q)).sum()
}

/// Run layout after removing interior breakpoint `b`. Components in `set`
/// merge their two runs into one holding the sample-weighted average of the
/// two coefficient vectors and the geometric mean of the smoothing parameters.
fn merge_runs(coeffs: &SegmentCoefficients, partition: &Partition, b: usize, set: ComponentSet) -> SegmentCoefficients {
    let mut out = coeffs.clone();
    for (c, runs) in out.components.iter_mut().enumerate() {
        let r = runs.partition_point(|run| run.segments.end <= b);
        if set.contains(c) {
            let right = runs.remove(r + 1);
            let left = &mut runs[r];
            let wl = run_samples(partition, &left.segments) as f64;
            let wr = run_samples(partition, &right.segments) as f64;
            for (a, bv) in left.coeffs.iter_mut().zip(&right.coeffs) {
                *a = (wl * *a + wr * bv) / (wl + wr);
            }
            left.lambda_sq = (left.lambda_sq * right.lambda_sq).sqrt();
            left.segments.end = right.segments.end - 1;
        } else {
            runs[r].segments.end -= 1;
        }
        for run in &mut runs[r + 1..] {
            run.segments = run.segments.start - 1..run.segments.end - 1;
        }
    }
    out
}

/// Split component `c`'s run at the boundary between segments `b` and `b + 1`.
fn split_component(coeffs: &SegmentCoefficients, b: usize, c: usize) -> SegmentCoefficients {
    let mut out = coeffs.clone();
    let runs = &mut out.components[c];
    let r = runs.partition_point(|run| run.segments.end <= b);
    let mut right = runs[r].clone();
    right.segments.start = b + 1;
    runs[r].segments.end = b + 1;
    runs.insert(r + 1, right);
    out
}

/// Merge component `c`'s two runs meeting at the boundary after segment `b`.
fn merge_component(coeffs: &SegmentCoefficients, partition: &Partition, b: usize, c: usize) -> SegmentCoefficients {
    let mut out = coeffs.clone();
    let runs = &mut out.components[c];
    let r = runs.partition_point(|run| run.segments.end <= b);
    let right = runs.remove(r + 1);
    let left = &mut runs[r];
    let wl = run_samples(partition, &left.segments) as f64;
    let wr = run_samples(partition, &right.segments) as f64;
    for (a, bv) in left.coeffs.iter_mut().zip(&right.coeffs) {
        *a = (wl * *a + wr * bv) / (wl + wr);
    }
    left.lambda_sq = (left.lambda_sq * right.lambda_sq).sqrt();
    left.segments.end = right.segments.end;
    out
}

/// `log |∂(λ₁², λ₂²)/∂(λ², u)|` of the birth split.
fn split_log_jacobian(lambda_sq: f64, u: f64) -> f64 {
    (2.0 * lambda_sq / (u * (1.0 - u))).ln()
}

struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    t: f64,
    target: f64,
}

impl DualAveraging {
    fn new(step: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * step).ln(),
            log_eps: step.ln(),
            log_eps_bar: step.ln(),
            h_bar: 0.0,
            t: 0.0,
            target,
        }
    }

    fn update(&mut self, accept: f64) {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.t += 1.0;
        let eta = 1.0 / (self.t + T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept);
        self.log_eps = (self.mu - self.t.sqrt() / GAMMA * self.h_bar).clamp(-12.0, 2.0);
        let w = self.t.powf(-KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
    }
}

/// A single chain. Owns its RNG and its DFT cache.
pub struct Sampler<'a> {
    cache: SegmentCache<'a>,
    prior: PriorConfig,
    config: SamplerConfig,
    rng: ChaCha8Rng,
    state: ChainState,
    diag: MoveDiagnostics,
    step: DualAveraging,
    adapting: bool,
    n_comp: usize,
}

impl<'a> Sampler<'a> {
    /// Start from one segment with coefficients at their conditional modes.
    pub fn new(series: &'a MultivariateSeries, prior: PriorConfig, config: SamplerConfig) -> Result<Self> {
        prior.validate(series.len())?;
        config.validate()?;
        let dim = series.dim();
        let partition = Partition::single(series.len());
        let mut coeffs = SegmentCoefficients::zeros(&partition, dim, prior.truncation, prior.kappa.min(1.0));
        for j in 0..dim {
            let mean = (0..series.len()).map(|t| series.get(t, j)).sum::<f64>() / series.len() as f64;
            let var = (0..series.len()).map(|t| (series.get(t, j) - mean).powi(2)).sum::<f64>() / series.len() as f64;
            coeffs.components[j][0].coeffs[0] = var.max(1e-12).ln();
        }
        let state = ChainState {
            partition,
            coeffs,
            loglik: 0.0,
            iteration: 0,
        };
        let mut sampler = Self::from_state(series, prior, config, state)?;
        sampler.settle_modes(2)?;
        Ok(sampler)
    }

    /// Resume from a given state (for example, a stored snapshot).
    pub fn from_state(
        series: &'a MultivariateSeries,
        prior: PriorConfig,
        config: SamplerConfig,
        mut state: ChainState,
    ) -> Result<Self> {
        prior.validate(series.len())?;
        config.validate()?;
        let dim = series.dim();
        if dim == 0 || dim > crate::model::MAX_DIM {
            return Err(Error::Config(format!("series dimension {dim} outside 1..={}", crate::model::MAX_DIM)));
        }
        if state.partition.len() != series.len() || state.coeffs.dim != dim || state.coeffs.truncation != prior.truncation {
            return Err(Error::InvalidState("state does not match the series or prior".into()));
        }
        state.partition.validate(prior.n_min, dim * dim, prior.max_segments)?;
        state.coeffs.validate(&state.partition, prior.kappa)?;
        let mut cache = SegmentCache::new(series, prior.truncation);
        let mut clamps = 0;
        state.loglik = cached_loglik(
            &mut cache,
            &state.partition,
            &state.coeffs,
            config.likelihood == LikelihoodMode::Flat,
            &mut clamps,
        )?;
        let step = DualAveraging::new(config.hmc.step_size, config.hmc.target_accept);
        let adapting = config.hmc.adapt && config.burn_in > 0;
        Ok(Self {
            cache,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            diag: MoveDiagnostics {
                clamp_events: clamps,
                step_size: config.hmc.step_size,
                ..MoveDiagnostics::default()
            },
            prior,
            config,
            state,
            step,
            adapting,
            n_comp: dim * dim,
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn diagnostics(&self) -> &MoveDiagnostics {
        &self.diag
    }

    fn flat(&self) -> bool {
        self.config.likelihood == LikelihoodMode::Flat
    }

    fn log_posterior(&self, partition: &Partition, coeffs: &SegmentCoefficients, loglik: f64) -> Result<f64> {
        Ok(loglik + log_prior_total(partition, coeffs, &self.prior)?)
    }

    fn full_loglik(&mut self, partition: &Partition, coeffs: &SegmentCoefficients) -> Result<f64> {
        let flat = self.flat();
        cached_loglik(&mut self.cache, partition, coeffs, flat, &mut self.diag.clamp_events)
    }

    /// Move every block to its conditional mode, `sweeps` times, without randomness.
    fn settle_modes(&mut self, sweeps: usize) -> Result<()> {
        let flat = self.flat();
        for _ in 0..sweeps {
            for c in 0..self.n_comp {
                for run in 0..self.state.coeffs.components[c].len() {
                    let block = block_likelihood(&mut self.cache, &self.state.partition, &self.state.coeffs, c, run, flat);
                    let prec = prior_precision(&self.state.coeffs, c, run, self.prior.intercept_var);
                    let lap = laplace(&block, &prec, &self.state.coeffs.components[c][run].coeffs, 20)?;
                    self.state.coeffs.components[c][run].coeffs = lap.mean.iter().copied().collect();
                }
            }
        }
        let (partition, coeffs) = (self.state.partition.clone(), self.state.coeffs.clone());
        self.state.loglik = self.full_loglik(&partition, &coeffs)?;
        Ok(())
    }

    fn prob_birth(&self, m: usize) -> f64 {
        if m >= self.prior.max_segments {
            0.0
        } else if m == 1 {
            1.0
        } else {
            self.config.prob_birth
        }
    }

    fn prob_death(&self, m: usize) -> f64 {
        if m <= 1 {
            0.0
        } else {
            1.0 - self.prob_birth(m)
        }
    }

    fn splittable(&self, partition: &Partition) -> Vec<usize> {
        (0..partition.n_segments())
            .filter(|&q| partition.segment_len(q) >= 2 * self.prior.n_min)
            .collect()
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        let u: f64 = self.rng.random();
        log_ratio.is_finite() && u.ln() < log_ratio || log_ratio == f64::INFINITY
    }

    /// One full iteration.
    pub fn step(&mut self) -> Result<()> {
        let m = self.state.partition.n_segments();
        if self.prior.max_segments > 1 {
            let u: f64 = self.rng.random();
            if u < self.prob_birth(m) {
                self.birth()?;
            } else {
                self.death()?;
            }
        }
        if self.state.partition.n_segments() > 1 {
            self.relocate()?;
            self.toggle()?;
        }
        self.hmc_sweep()?;
        self.gibbs_lambda();
        self.state.iteration += 1;
        if self.state.iteration == self.config.burn_in && self.adapting {
            self.adapting = false;
            self.diag.step_size = self.step.log_eps_bar.exp();
        }
        if self.state.iteration % self.config.consistency_check_every == 0 {
            self.check_consistency()?;
        }
        Ok(())
    }

    /// Split a segment at a new breakpoint.
    pub fn birth(&mut self) -> Result<()> {
        let old_part = self.state.partition.clone();
        let m = old_part.n_segments();
        if m >= self.prior.max_segments {
            self.diag.birth.skipped += 1;
            return Ok(());
        }
        let splittable = self.splittable(&old_part);
        if splittable.is_empty() {
            self.diag.birth.skipped += 1;
            return Ok(());
        }
        let n_min = self.prior.n_min;
        let q = splittable[self.rng.random_range(0..splittable.len())];
        let seg = old_part.segment(q);
        let n_pos = seg.len() - 2 * n_min + 1;
        let at = seg.start + n_min + self.rng.random_range(0..n_pos);
        let set = ComponentSet(self.rng.random_range(1..=ComponentSet::full(self.n_comp).0));
        let new_part = old_part.split(q, at, set);
        let old = self.state.coeffs.clone();
        let mut new = split_runs(&old, q, set);

        let mut log_jac = 0.0;
        let mut blocks = Vec::new();
        let mut in_range = true;
        for c in set.iter() {
            let left = new.run_index(c, q);
            let lambda = new.components[c][left].lambda_sq;
            let u: f64 = 1.0 - self.rng.random::<f64>();
            let u = u.min(1.0 - f64::EPSILON);
            new.components[c][left].lambda_sq = lambda * u / (1.0 - u);
            new.components[c][left + 1].lambda_sq = lambda * (1.0 - u) / u;
            log_jac += split_log_jacobian(lambda, u);
            in_range &= [left, left + 1]
                .iter()
                .all(|&r| new.components[c][r].lambda_sq > 0.0 && new.components[c][r].lambda_sq <= self.prior.kappa);
            blocks.push((c, left));
            blocks.push((c, left + 1));
        }
        if !in_range {
            self.diag.birth.record(false);
            return Ok(());
        }
        let flat = self.flat();
        let log_q_fwd = propose_blocks(
            &mut self.cache,
            &new_part,
            &mut new,
            &blocks,
            &self.prior,
            self.config.newton_steps,
            flat,
            ProposalMode::Draw(&mut self.rng),
        )?;
        let loglik_new = self.full_loglik(&new_part, &new)?;

        // Reverse: merge at breakpoint q from the proposed state.
        let mut reverse = merge_runs(&new, &new_part, q, set);
        let mut rev_blocks = Vec::new();
        let mut targets = Vec::new();
        for c in set.iter() {
            let r = reverse.run_index(c, q);
            reverse.components[c][r].lambda_sq = old.components[c][r].lambda_sq;
            rev_blocks.push((c, r));
            targets.push(old.components[c][r].coeffs.clone());
        }
        let log_q_rev = propose_blocks::<ChaCha8Rng>(
            &mut self.cache,
            &old_part,
            &mut reverse,
            &rev_blocks,
            &self.prior,
            self.config.newton_steps,
            flat,
            ProposalMode::Score(&targets),
        )?;

        let log_ratio = self.log_posterior(&new_part, &new, loglik_new)?
            - self.log_posterior(&old_part, &old, self.state.loglik)?
            + self.prob_death(m + 1).ln()
            - (m as f64).ln()
            - (self.prob_birth(m).ln() - (splittable.len() as f64).ln() - (n_pos as f64).ln())
            + log_n_change_sets(self.dim())
            + log_q_rev
            - log_q_fwd
            + log_jac;
        let accepted = self.accept(log_ratio);
        self.diag.birth.record(accepted);
        if accepted {
            self.state.partition = new_part;
            self.state.coeffs = new;
            self.state.loglik = loglik_new;
        }
        Ok(())
    }

    /// Remove a breakpoint, merging its two segments.
    pub fn death(&mut self) -> Result<()> {
        let old_part = self.state.partition.clone();
        let m = old_part.n_segments();
        if m <= 1 {
            self.diag.death.skipped += 1;
            return Ok(());
        }
        let b = self.rng.random_range(0..m - 1);
        let set = old_part.change_sets()[b];
        let new_part = old_part.merge(b);
        let old = self.state.coeffs.clone();
        let mut new = merge_runs(&old, &old_part, b, set);

        let mut log_jac = 0.0;
        let mut blocks = Vec::new();
        for c in set.iter() {
            let left = old.run_index(c, b);
            let (l1, l2) = (old.components[c][left].lambda_sq, old.components[c][left + 1].lambda_sq);
            let u = l1.sqrt() / (l1.sqrt() + l2.sqrt());
            log_jac -= split_log_jacobian(new.components[c][left].lambda_sq, u);
            blocks.push((c, new.run_index(c, b)));
        }
        let in_range = blocks
            .iter()
            .all(|&(c, r)| new.components[c][r].lambda_sq > 0.0 && new.components[c][r].lambda_sq <= self.prior.kappa);
        if !in_range {
            self.diag.death.record(false);
            return Ok(());
        }
        let flat = self.flat();
        let log_q_fwd = propose_blocks(
            &mut self.cache,
            &new_part,
            &mut new,
            &blocks,
            &self.prior,
            self.config.newton_steps,
            flat,
            ProposalMode::Draw(&mut self.rng),
        )?;
        let loglik_new = self.full_loglik(&new_part, &new)?;

        // Reverse: split at the same position and change set from the merged state.
        let mut reverse = split_runs(&new, b, set);
        let mut rev_blocks = Vec::new();
        let mut targets = Vec::new();
        for c in set.iter() {
            let left = reverse.run_index(c, b);
            for r in [left, left + 1] {
                reverse.components[c][r].lambda_sq = old.components[c][r].lambda_sq;
                rev_blocks.push((c, r));
                targets.push(old.components[c][r].coeffs.clone());
            }
        }
        let log_q_rev = propose_blocks::<ChaCha8Rng>(
            &mut self.cache,
            &old_part,
            &mut reverse,
            &rev_blocks,
            &self.prior,
            self.config.newton_steps,
            flat,
            ProposalMode::Score(&targets),
        )?;

        let merged = new_part.segment(b);
        let n_pos = merged.len() - 2 * self.prior.n_min + 1;
        let n_split = self.splittable(&new_part).len();
        let log_ratio = self.log_posterior(&new_part, &new, loglik_new)?
            - self.log_posterior(&old_part, &old, self.state.loglik)?
            + self.prob_birth(m - 1).ln()
            - (n_split as f64).ln()
            - (n_pos as f64).ln()
            - (self.prob_death(m).ln() - ((m - 1) as f64).ln())
            - log_n_change_sets(self.dim())
            + log_q_rev
            - log_q_fwd
            + log_jac;
        let accepted = self.accept(log_ratio);
        self.diag.death.record(accepted);
        if accepted {
            self.state.partition = new_part;
            self.state.coeffs = new;
            self.state.loglik = loglik_new;
        }
        Ok(())
    }

    /// Add or remove one component from a breakpoint's change set, splitting
    /// or merging that component's run without moving any breakpoint.
    pub fn toggle(&mut self) -> Result<()> {
        let old_part = self.state.partition.clone();
        let m = old_part.n_segments();
        if m <= 1 {
            self.diag.toggle.skipped += 1;
            return Ok(());
        }
        let b = self.rng.random_range(0..m - 1);
        let c = self.rng.random_range(0..self.n_comp);
        let set = old_part.change_sets()[b];
        let adding = !set.contains(c);
        if !adding && set.len() == 1 {
            self.diag.toggle.skipped += 1;
            return Ok(());
        }
        let new_set = ComponentSet(set.0 ^ (1 << c));
        let new_part = old_part.with_change_set(b, new_set);
        let old = self.state.coeffs.clone();
        let flat = self.flat();
        let (mut new, blocks, log_jac) = if adding {
            let mut new = split_component(&old, b, c);
            let left = new.run_index(c, b);
            let lambda = new.components[c][left].lambda_sq;
            let u: f64 = 1.0 - self.rng.random::<f64>();
            let u = u.min(1.0 - f64::EPSILON);
            new.components[c][left].lambda_sq = lambda * u / (1.0 - u);
            new.components[c][left + 1].lambda_sq = lambda * (1.0 - u) / u;
            (new, vec![(c, left), (c, left + 1)], split_log_jacobian(lambda, u))
        } else {
            let new = merge_component(&old, &old_part, b, c);
            let left = old.run_index(c, b);
            let (l1, l2) = (old.components[c][left].lambda_sq, old.components[c][left + 1].lambda_sq);
            let u = l1.sqrt() / (l1.sqrt() + l2.sqrt());
            let merged = new.run_index(c, b);
            let jac = -split_log_jacobian(new.components[c][merged].lambda_sq, u);
            (new, vec![(c, merged)], jac)
        };
        let in_range = blocks
            .iter()
            .all(|&(c, r)| new.components[c][r].lambda_sq > 0.0 && new.components[c][r].lambda_sq <= self.prior.kappa);
        if !in_range {
            self.diag.toggle.record(false);
            return Ok(());
        }
        let log_q_fwd = propose_blocks(
            &mut self.cache,
            &new_part,
            &mut new,
            &blocks,
            &self.prior,
            self.config.newton_steps,
            flat,
            ProposalMode::Draw(&mut self.rng),
        )?;
        let loglik_new = self.full_loglik(&new_part, &new)?;

        let mut reverse = if adding {
            merge_component(&new, &new_part, b, c)
        } else {
            split_component(&new, b, c)
        };
        let left = reverse.run_index(c, b);
        let rev_runs: &[usize] = if adding { &[left] } else { &[left, left + 1] };
        let mut rev_blocks = Vec::new();
        let mut targets = Vec::new();
        for &r in rev_runs {
            reverse.components[c][r].lambda_sq = old.components[c][r].lambda_sq;
            rev_blocks.push((c, r));
            targets.push(old.components[c][r].coeffs.clone());
        }
        let log_q_rev = propose_blocks::<ChaCha8Rng>(
            &mut self.cache,
            &old_part,
            &mut reverse,
            &rev_blocks,
            &self.prior,
            self.config.newton_steps,
            flat,
            ProposalMode::Score(&targets),
        )?;

        let log_ratio = self.log_posterior(&new_part, &new, loglik_new)?
            - self.log_posterior(&old_part, &old, self.state.loglik)?
            + log_q_rev
            - log_q_fwd
            + log_jac;
        let accepted = self.accept(log_ratio);
        self.diag.toggle.record(accepted);
        if accepted {
            self.state.partition = new_part;
            self.state.coeffs = new;
            self.state.loglik = loglik_new;
        }
        Ok(())
    }

    fn dim(&self) -> usize {
        self.state.coeffs.dim
    }

    /// Probability of proposing `to` from `from` for a breakpoint with valid range `lo..=hi`.
    fn relocate_prob(&self, from: usize, to: usize, lo: usize, hi: usize) -> f64 {
        let w = self.config.relocate_window;
        let (wlo, whi) = (from.saturating_sub(w).max(lo), (from + w).min(hi));
        let local = if to >= wlo && to <= whi {
            1.0 / (whi - wlo + 1) as f64
        } else {
            0.0
        };
        self.config.relocate_local_prob * local + (1.0 - self.config.relocate_local_prob) / (hi - lo + 1) as f64
    }

    /// Move one breakpoint and redraw every run touching its two segments.
    pub fn relocate(&mut self) -> Result<()> {
        let old_part = self.state.partition.clone();
        let m = old_part.n_segments();
        if m <= 1 {
            self.diag.relocate.skipped += 1;
            return Ok(());
        }
        let b = self.rng.random_range(0..m - 1);
        let bps = old_part.breakpoints();
        let from = bps[b + 1];
        let (lo, hi) = (bps[b] + self.prior.n_min, bps[b + 2] - self.prior.n_min);
        let to = if self.rng.random::<f64>() < self.config.relocate_local_prob {
            let w = self.config.relocate_window;
            let (wlo, whi) = (from.saturating_sub(w).max(lo), (from + w).min(hi));
            self.rng.random_range(wlo..=whi)
        } else {
            self.rng.random_range(lo..=hi)
        };
        let new_part = old_part.relocate(b, to);
        let old = self.state.coeffs.clone();
        let mut blocks = Vec::new();
        for c in 0..self.n_comp {
            let r1 = old.run_index(c, b);
            let r2 = old.run_index(c, b + 1);
            blocks.push((c, r1));
            if r2 != r1 {
                blocks.push((c, r2));
            }
        }
        let flat = self.flat();
        let mut new = old.clone();
        let log_q_fwd = propose_blocks(
            &mut self.cache,
            &new_part,
            &mut new,
            &blocks,
            &self.prior,
            self.config.newton_steps,
            flat,
            ProposalMode::Draw(&mut self.rng),
        )?;
        let loglik_new = self.full_loglik(&new_part, &new)?;
        let targets: Vec<Vec<f64>> = blocks.iter().map(|&(c, r)| old.components[c][r].coeffs.clone()).collect();
        let mut reverse = new.clone();
        let log_q_rev = propose_blocks::<ChaCha8Rng>(
            &mut self.cache,
            &old_part,
            &mut reverse,
            &blocks,
            &self.prior,
            self.config.newton_steps,
            flat,
            ProposalMode::Score(&targets),
        )?;
        let log_ratio = self.log_posterior(&new_part, &new, loglik_new)?
            - self.log_posterior(&old_part, &old, self.state.loglik)?
            + self.relocate_prob(to, from, lo, hi).ln()
            - self.relocate_prob(from, to, lo, hi).ln()
            + log_q_rev
            - log_q_fwd;
        let accepted = self.accept(log_ratio);
        self.diag.relocate.record(accepted);
        if accepted {
            self.state.partition = new_part;
            self.state.coeffs = new;
            self.state.loglik = loglik_new;
        }
        Ok(())
    }

    /// One HMC trajectory per component-run, in random order.
    pub fn hmc_sweep(&mut self) -> Result<()> {
        let mut blocks: Vec<(usize, usize)> = (0..self.n_comp)
            .flat_map(|c| (0..self.state.coeffs.components[c].len()).map(move |r| (c, r)))
            .collect();
        blocks.shuffle(&mut self.rng);
        let base = if self.adapting {
            self.step.log_eps.exp()
        } else if self.config.hmc.adapt && self.config.burn_in > 0 {
            self.step.log_eps_bar.exp()
        } else {
            self.config.hmc.step_size
        };
        let mut accept_sum = 0.0;
        for &(c, r) in &blocks {
            let jitter = self.config.hmc.step_size_jitter * (2.0 * self.rng.random::<f64>() - 1.0);
            accept_sum += self.hmc_block(c, r, base * (1.0 + jitter))?;
        }
        if self.adapting {
            self.step.update(accept_sum / blocks.len() as f64);
        }
        Ok(())
    }

    /// Returns the Metropolis acceptance probability of the trajectory.
    fn hmc_block(&mut self, c: usize, run: usize, eps: f64) -> Result<f64> {
        let flat = self.flat();
        let block = block_likelihood(&mut self.cache, &self.state.partition, &self.state.coeffs, c, run, flat);
        let prec = prior_precision(&self.state.coeffs, c, run, self.prior.intercept_var);
        let x0 = self.state.coeffs.components[c][run].coeffs.clone();
        let s = x0.len();
        // Mass matrix from the block's expected curvature; it does not depend
        // on the block's own coefficients.
        let chol = precision_matrix(&block, &prec, &block.curvature_weights(&x0, false))?;
        let z = DVector::from_fn(s, |_, _| self.rng.sample::<f64, _>(StandardNormal));
        let Trajectory { x, ll0, ll1, delta } =
            leapfrog(&block, &prec, &chol, &x0, &z, eps, self.config.hmc.leapfrog_steps);
        if !delta.is_finite() || delta.abs() > DIVERGENCE_THRESHOLD || x.iter().any(|v| !v.is_finite()) {
            self.diag.divergences += 1;
            self.diag.hmc.record(false);
            return Ok(0.0);
        }
        let alpha = (-delta).exp().min(1.0);
        let u: f64 = self.rng.random();
        let accepted = u.ln() < -delta;
        self.diag.hmc.record(accepted);
        if accepted {
            self.state.coeffs.components[c][run].coeffs = x.iter().copied().collect();
            self.state.loglik += ll1 - ll0;
        }
        Ok(alpha)
    }

    /// Redraw every smoothing parameter from its truncated inverse-gamma conditional.
    pub fn gibbs_lambda(&mut self) {
        let comps = components(self.state.coeffs.dim);
        let kappa = self.prior.kappa;
        for (comp, runs) in comps.iter().zip(self.state.coeffs.components.iter_mut()) {
            for run in runs.iter_mut() {
                let draw = sample_lambda_conditional(scaled_coefficients(&run.coeffs, comp.basis_kind()), kappa, &mut self.rng);
                if draw.fallback {
                    self.diag.lambda_fallbacks += 1;
                }
                run.lambda_sq = draw.value;
            }
        }
    }

    /// Recompute the log-likelihood from fresh DFTs and reset the cached value.
    pub fn check_consistency(&mut self) -> Result<f64> {
        let fresh = if self.flat() {
            0.0
        } else {
            let dfts = local_dft(self.cache.series(), &self.state.partition);
            whittle_loglik(&dfts, &self.state.coeffs, &self.state.partition)?
        };
        let drift = (fresh - self.state.loglik).abs();
        self.diag.consistency_checks += 1;
        self.diag.max_drift = self.diag.max_drift.max(drift);
        if drift > DRIFT_TOLERANCE {
            self.diag.drift_violations += 1;
        }
        self.state.loglik = fresh;
        Ok(drift)
    }

    /// Run the configured number of iterations, keeping thinned post-burn-in states.
    pub fn run(mut self) -> Result<ChainOutput> {
        let mut snapshots = Vec::new();
        while self.state.iteration < self.config.iterations {
            self.step()?;
            let i = self.state.iteration;
            if i > self.config.burn_in && (i - self.config.burn_in - 1) % self.config.thin == 0 {
                snapshots.push(self.state.clone());
            }
        }
        if !self.config.hmc.adapt || self.config.burn_in == 0 {
            self.diag.step_size = self.config.hmc.step_size;
        }
        Ok(ChainOutput {
            snapshots,
            diagnostics: self.diag,
        })
    }
}

/// Run one chain from the default starting state.
pub fn run_chain(series: &MultivariateSeries, prior: &PriorConfig, config: &SamplerConfig) -> Result<ChainOutput> {
    Sampler::new(series, prior.clone(), config.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::component_runs;

    fn white_noise(len: usize, dim: usize, seed: u64) -> MultivariateSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..len * dim).map(|_| rng.sample(StandardNormal)).collect();
        MultivariateSeries::from_flat(len, dim, v).unwrap()
    }

    fn prior(max_segments: usize) -> PriorConfig {
        PriorConfig {
            max_segments,
            n_min: 40,
            truncation: 6,
            ..PriorConfig::default()
        }
    }

    fn config(iterations: usize, burn_in: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            iterations,
            burn_in,
            seed,
            consistency_check_every: 50,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn split_then_merge_restores_layout() {
        let p = Partition::new(vec![0, 100, 200, 300], vec![ComponentSet(0b0101), ComponentSet(0b1010)]).unwrap();
        let mut c = SegmentCoefficients::zeros(&p, 2, 4, 1.0);
        for (i, run) in c.components.iter_mut().flatten().enumerate() {
            run.coeffs = vec![i as f64; 4];
            run.lambda_sq = 1.0 + i as f64;
        }
        let set = ComponentSet(0b0110);
        let split_part = p.split(1, 150, set);
        let split = split_runs(&c, 1, set);
        let layout: Vec<Vec<std::ops::Range<usize>>> = split
            .components
            .iter()
            .map(|r| r.iter().map(|x| x.segments.clone()).collect())
            .collect();
        assert_eq!(component_runs(&split_part, 4).runs, layout);
        let merged = merge_runs(&split, &split_part, 1, set);
        assert_eq!(merged, c);
    }

    #[test]
    fn toggling_a_component_tracks_the_change_set() {
        let p = Partition::new(vec![0, 100, 200, 300], vec![ComponentSet(0b0101), ComponentSet(0b1010)]).unwrap();
        let mut c = SegmentCoefficients::zeros(&p, 2, 4, 1.0);
        for (i, run) in c.components.iter_mut().flatten().enumerate() {
            run.coeffs = vec![i as f64; 4];
        }
        let toggled = p.with_change_set(0, ComponentSet(0b0111));
        let split = split_component(&c, 0, 1);
        let layout: Vec<Vec<std::ops::Range<usize>>> = split
            .components
            .iter()
            .map(|r| r.iter().map(|x| x.segments.clone()).collect())
            .collect();
        assert_eq!(component_runs(&toggled, 4).runs, layout);
        assert_eq!(merge_component(&split, &toggled, 0, 1), c);
    }

    #[test]
    fn merge_weights_by_sample_count() {
        let p = Partition::new(vec![0, 100, 400], vec![ComponentSet(1)]).unwrap();
        let mut c = SegmentCoefficients::zeros(&p, 1, 4, 1.0);
        c.components[0][0].coeffs = vec![4.0; 4];
        c.components[0][0].lambda_sq = 2.0;
        c.components[0][1].lambda_sq = 8.0;
        let merged = merge_runs(&c, &p, 0, ComponentSet(1));
        assert_eq!(merged.components[0].len(), 1);
        assert!((merged.components[0][0].coeffs[0] - 1.0).abs() < 1e-15);
        assert!((merged.components[0][0].lambda_sq - 4.0).abs() < 1e-15);
    }

    #[test]
    fn lambda_split_pairing_is_invertible() {
        for &(lambda, u) in &[(1.0, 0.3), (1e-3, 0.9), (250.0, 0.5)] {
            let (l1, l2): (f64, f64) = (lambda * u / (1.0 - u), lambda * (1.0 - u) / u);
            assert!(((l1 * l2).sqrt() / lambda - 1.0).abs() < 1e-14);
            let back = l1.sqrt() / (l1.sqrt() + l2.sqrt());
            assert!((back - u).abs() < 1e-14);
        }
    }

    #[test]
    fn laplace_is_exact_for_flat_blocks() {
        let block = BlockLikelihood {
            truncation: 3,
            design: vec![1.0, 0.5, 0.2],
            terms: BlockTerms::Flat,
        };
        let prec = [0.5, 2.0, 4.0];
        let lap = laplace(&block, &prec, &[3.0, -1.0, 2.0], 5).unwrap();
        assert!(lap.mean.iter().all(|v| v.abs() < 1e-12));
        let x = [0.3, -0.2, 0.1];
        let expected = crate::priors::gaussian_log_density(&x, &prec.map(|p| 1.0 / p));
        assert!((lap.log_density(&x) - expected).abs() < 1e-12);
    }

    #[test]
    fn laplace_finds_log_psi_mode() {
        // Single frequency at ω=0: value = Σβ; mode solves 1 = Q e^{-v} with a weak prior.
        let block = BlockLikelihood {
            truncation: 4,
            design: vec![1.0, 0.0, 0.0, 0.0],
            terms: BlockTerms::LogPsi { q: vec![3.0] },
        };
        let prec = [1e-8, 1e4, 1e4, 1e4];
        let lap = laplace(&block, &prec, &[0.0; 4], 30).unwrap();
        assert!((lap.mean[0] - 3f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let x = white_noise(240, 2, 5);
        let a = run_chain(&x, &prior(3), &config(60, 20, 9)).unwrap();
        let b = run_chain(&x, &prior(3), &config(60, 20, 9)).unwrap();
        assert_eq!(a.snapshots, b.snapshots);
        assert_eq!(a.diagnostics, b.diagnostics);
        let c = run_chain(&x, &prior(3), &config(60, 20, 10)).unwrap();
        assert_ne!(a.snapshots, c.snapshots);
    }

    #[test]
    fn states_stay_valid_and_cache_is_consistent() {
        let x = white_noise(320, 2, 6);
        let p = prior(4);
        let mut s = Sampler::new(&x, p.clone(), config(200, 50, 3)).unwrap();
        for _ in 0..200 {
            s.step().unwrap();
            let st = s.state();
            st.partition.validate(p.n_min, 4, p.max_segments).unwrap();
            st.coeffs.validate(&st.partition, p.kappa).unwrap();
        }
        let d = s.diagnostics();
        assert!(d.max_drift < 1e-6, "drift {}", d.max_drift);
        assert_eq!(d.drift_violations, 0);
        assert!(d.birth.accepted <= d.birth.proposed && d.hmc.accepted <= d.hmc.proposed);
        assert!(d.hmc.acceptance_rate() > 0.3);
    }

    #[test]
    fn leapfrog_energy_error_is_second_order() {
        let x = white_noise(320, 2, 6);
        let mut s = Sampler::new(&x, prior(2), config(100, 50, 3)).unwrap();
        for _ in 0..30 {
            s.step().unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for c in 0..4 {
            let block = block_likelihood(&mut s.cache, &s.state.partition, &s.state.coeffs, c, 0, false);
            let prec = prior_precision(&s.state.coeffs, c, 0, s.prior.intercept_var);
            let x0 = s.state.coeffs.components[c][0].coeffs.clone();
            let chol = precision_matrix(&block, &prec, &block.curvature_weights(&x0, false)).unwrap();
            let zs: Vec<DVector<f64>> = (0..10)
                .map(|_| DVector::from_fn(x0.len(), |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            // fixed trajectory length 1.6
            let error = |eps: f64, steps: usize| -> f64 {
                zs.iter()
                    .map(|z| leapfrog(&block, &prec, &chol, &x0, z, eps, steps).delta.abs())
                    .sum()
            };
            let (e1, e2, e3) = (error(0.2, 8), error(0.1, 16), error(0.05, 32));
            for ratio in [e1 / e2, e2 / e3] {
                assert!((3.0..5.5).contains(&ratio), "component {c}: errors {e1:.2e} {e2:.2e} {e3:.2e}");
            }
        }
    }

    #[test]
    fn single_segment_prior_never_jumps() {
        let x = white_noise(200, 1, 7);
        let out = run_chain(&x, &prior(1), &config(40, 10, 1)).unwrap();
        assert!(out.snapshots.iter().all(|s| s.partition.n_segments() == 1));
        assert_eq!(out.diagnostics.birth.proposed + out.diagnostics.death.proposed, 0);
    }

    #[test]
    fn thinning_and_burn_in_control_snapshot_count() {
        let x = white_noise(200, 1, 8);
        let mut c = config(50, 10, 2);
        c.thin = 4;
        let out = run_chain(&x, &prior(2), &c).unwrap();
        assert_eq!(out.snapshots.len(), 10);
        assert_eq!(out.snapshots[0].iteration, 11);
        assert!(out.snapshots.windows(2).all(|w| w[1].iteration - w[0].iteration == 4));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let x = white_noise(200, 1, 9);
        let mut c = config(10, 10, 1);
        assert!(matches!(run_chain(&x, &prior(2), &c), Err(Error::Config(_))));
        c.burn_in = 2;
        c.prob_birth = 1.0;
        assert!(matches!(run_chain(&x, &prior(2), &c), Err(Error::Config(_))));
        assert!(matches!(run_chain(&x, &prior(9), &config(10, 2, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_coefficients_trigger_lambda_fallback() {
        let x = white_noise(200, 1, 10);
        let mut s = Sampler::new(&x, prior(1), config(10, 2, 1)).unwrap();
        for run in s.state.coeffs.components.iter_mut().flatten() {
            run.coeffs.iter_mut().for_each(|v| *v = 0.0);
        }
        s.gibbs_lambda();
        assert_eq!(s.diagnostics().lambda_fallbacks, 1);
        let l = s.state().coeffs.components[0][0].lambda_sq;
        assert!(l > 0.0 && l <= s.prior.kappa);
    }
}
