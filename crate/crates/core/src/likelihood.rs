//! Local DFTs and the product-of-Whittle log-likelihood.
//!
//! Each segment is mean-centred and transformed at its Fourier frequencies
//! `ω_ℓ = ℓ / n_q`, `ℓ = 1..=L_q`, `L_q = ⌊(n_q − 1)/2⌋`. The likelihood is
//! evaluated through the Cholesky shortcut
//! `log|f| = Σ_j log ψ_j` and `y^* f^{-1} y = Σ_j |(Θ^* y)_j|² / ψ_j`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::hash::Hash;
use std::ops::Range;
use std::sync::Arc;

use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::model::{
    components, dot, ComponentKind, FreqBasis, MultivariateSeries, Partition, SegmentCoefficients, Complex,
    LOG_PSI_CLAMP,
};

/// DFT of one mean-centred segment: `y[ℓ·N + j]` for `ℓ = 0..L` (frequency
/// `(ℓ+1)/n`) and channel `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDft {
    pub range: Range<usize>,
    pub dim: usize,
    pub y: Vec<Complex>,
}

impl SegmentDft {
    pub fn n(&self) -> usize {
        self.range.len()
    }

    pub fn n_freqs(&self) -> usize {
        n_fourier(self.n())
    }

    pub fn freqs(&self) -> Vec<f64> {
        fourier_freqs(self.n())
    }

    #[inline]
    pub fn at(&self, l: usize) -> &[Complex] {
        &self.y[l * self.dim..(l + 1) * self.dim]
    }
}

/// `L = ⌊(n − 1)/2⌋`
pub fn n_fourier(n: usize) -> usize {
    n.saturating_sub(1) / 2
}

pub fn fourier_freqs(n: usize) -> Vec<f64> {
    (1..=n_fourier(n)).map(|l| l as f64 / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalDftSet {
    pub segments: Vec<Arc<SegmentDft>>,
}

impl LocalDftSet {
    pub fn total_freqs(&self) -> usize {
        self.segments.iter().map(|s| s.n_freqs()).sum()
    }
}

fn centred_channels(series: &MultivariateSeries, range: &Range<usize>) -> Vec<Vec<f64>> {
    (0..series.dim())
        .map(|j| {
            let x: Vec<f64> = range.clone().map(|t| series.get(t, j)).collect();
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            x.into_iter().map(|v| v - mean).collect()
        })
        .collect()
}

/// FFT-based local DFT of the samples in `range` (zero-based, half open).
///
/// The phase follows one-based global time `t = range.start + 1, …`.
pub fn segment_dft_with(planner: &mut FftPlanner<f64>, series: &MultivariateSeries, range: Range<usize>) -> SegmentDft {
    let n = range.len();
    let dim = series.dim();
    let n_freqs = n_fourier(n);
    let mut y = vec![Complex::new(0.0, 0.0); n_freqs * dim];
    if n_freqs > 0 {
        let fft = planner.plan_fft_forward(n);
        let scale = 1.0 / (n as f64).sqrt();
        let offset = (range.start + 1) as f64;
        for (j, x) in centred_channels(series, &range).into_iter().enumerate() {
            let mut buf: Vec<Complex> = x.into_iter().map(|v| Complex::new(v, 0.0)).collect();
            fft.process(&mut buf);
            for l in 0..n_freqs {
                let w = (l + 1) as f64 / n as f64;
                // exp(−2πi ω (start+1)) shifts the local index back to global time.
                let phase = Complex::from_polar(scale, -2.0 * PI * w * offset);
                y[l * dim + j] = buf[l + 1] * phase;
            }
        }
    }
    SegmentDft { range, dim, y }
}

pub fn segment_dft(series: &MultivariateSeries, range: Range<usize>) -> SegmentDft {
    segment_dft_with(&mut FftPlanner::new(), series, range)
}

/// Direct `O(n²)` summation, used as the reference transform.
pub fn naive_segment_dft(series: &MultivariateSeries, range: Range<usize>) -> SegmentDft {
    let n = range.len();
    let dim = series.dim();
    let n_freqs = n_fourier(n);
    let scale = 1.0 / (n as f64).sqrt();
    let channels = centred_channels(series, &range);
    let mut y = vec![Complex::new(0.0, 0.0); n_freqs * dim];
    for l in 0..n_freqs {
        let w = (l + 1) as f64 / n as f64;
        for (j, x) in channels.iter().enumerate() {
            let mut acc = Complex::new(0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                let t = (range.start + 1 + i) as f64;
                // reduce the phase argument mod 1 before scaling by 2π
                let arg = (w * t).fract();
                acc += Complex::from_polar(*v, -2.0 * PI * arg);
            }
            y[l * dim + j] = acc * scale;
        }
    }
    SegmentDft { range, dim, y }
}

pub fn local_dft(series: &MultivariateSeries, partition: &Partition) -> LocalDftSet {
    let mut planner = FftPlanner::new();
    LocalDftSet {
        segments: (0..partition.n_segments())
            .map(|q| Arc::new(segment_dft_with(&mut planner, series, partition.segment(q))))
            .collect(),
    }
}

/// Small least-recently-used map.
#[derive(Debug)]
pub(crate) struct Lru<K, V> {
    capacity: usize,
    clock: u64,
    entries: HashMap<K, (u64, V)>,
}

impl<K: Hash + Eq + Clone, V: Clone> Lru<K, V> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            clock: 0,
            entries: HashMap::new(),
        }
    }

    pub fn get_or_insert_with(&mut self, key: K, make: impl FnOnce() -> V) -> V {
        self.clock += 1;
        let clock = self.clock;
        if let Some(entry) = self.entries.get_mut(&key) {
            entry.0 = clock;
            return entry.1.clone();
        }
        if self.entries.len() >= self.capacity {
            if let Some(oldest) = self.entries.iter().min_by_key(|(_, (t, _))| *t).map(|(k, _)| k.clone()) {
                self.entries.remove(&oldest);
            }
        }
        let value = make();
        self.entries.insert(key, (clock, value.clone()));
        value
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// Segment DFTs keyed by `(δ_{q−1}, δ_q)` and frequency bases keyed by `n_q`.
///
/// Not shared between threads: each chain owns its cache.
pub struct SegmentCache<'a> {
    series: &'a MultivariateSeries,
    truncation: usize,
    planner: FftPlanner<f64>,
    dfts: Lru<(usize, usize), Arc<SegmentDft>>,
    bases: Lru<usize, Arc<FreqBasis>>,
}

impl<'a> SegmentCache<'a> {
    pub fn new(series: &'a MultivariateSeries, truncation: usize) -> Self {
        Self {
            series,
            truncation,
            planner: FftPlanner::new(),
            dfts: Lru::new(256),
            bases: Lru::new(256),
        }
    }

    pub fn series(&self) -> &'a MultivariateSeries {
        self.series
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn dft(&mut self, range: Range<usize>) -> Arc<SegmentDft> {
        let series = self.series;
        let planner = &mut self.planner;
        self.dfts
            .get_or_insert_with((range.start, range.end), || Arc::new(segment_dft_with(planner, series, range)))
    }

    pub fn basis(&mut self, n: usize) -> Arc<FreqBasis> {
        let s = self.truncation;
        self.bases
            .get_or_insert_with(n, || Arc::new(FreqBasis::new(&fourier_freqs(n), s)))
    }
}

/// Canonical index of `log ψ_jj`.
#[inline]
pub(crate) fn psi_index(j: usize) -> usize {
    j
}

/// Canonical index of `Re θ_{row,col}`; the imaginary part follows it.
#[inline]
pub(crate) fn theta_index(dim: usize, row: usize, col: usize) -> usize {
    dim + 2 * (row * (row - 1) / 2 + col)
}

/// Component expansions for one segment: `values[c][ℓ]`.
pub(crate) fn segment_values(basis: &FreqBasis, coeffs: &[&[f64]]) -> Vec<Vec<f64>> {
    let comps = components((coeffs.len() as f64).sqrt().round() as usize);
    comps
        .iter()
        .zip(coeffs)
        .map(|(comp, c)| {
            let mut v = Vec::new();
            basis.expand(comp.basis_kind(), c, &mut v);
            v
        })
        .collect()
}

/// `r_col = y_col + Σ_{row > col} conj(θ_{row,col}) y_row` at frequency `l`.
#[inline]
pub(crate) fn residual(values: &[Vec<f64>], y: &[Complex], dim: usize, col: usize, l: usize) -> Complex {
    let mut r = y[col];
    for row in col + 1..dim {
        let i = theta_index(dim, row, col);
        let theta_conj = Complex::new(values[i][l], -values[i + 1][l]);
        r += theta_conj * y[row];
    }
    r
}

#[inline]
fn clamp_log_psi(g: f64, clamps: &mut u64) -> f64 {
    let c = g.clamp(-LOG_PSI_CLAMP, LOG_PSI_CLAMP);
    if c != g {
        *clamps += 1;
    }
    c
}

/// Log-likelihood contribution of one segment.
pub(crate) fn segment_loglik(
    dft: &SegmentDft,
    basis: &FreqBasis,
    coeffs: &[&[f64]],
    clamps: &mut u64,
) -> Result<f64> {
    let dim = dft.dim;
    let values = segment_values(basis, coeffs);
    let mut total = 0.0;
    for l in 0..dft.n_freqs() {
        let y = dft.at(l);
        for j in 0..dim {
            let g = clamp_log_psi(values[psi_index(j)][l], clamps);
            let r = residual(&values, y, dim, j, l);
            total -= g + r.norm_sqr() * (-g).exp();
        }
        if !total.is_finite() {
            return Err(Error::InvalidState(format!(
                "non-finite log-likelihood in segment starting at {} at frequency {}",
                dft.range.start + 1,
                (l + 1) as f64 / dft.n() as f64
            )));
        }
    }
    Ok(total)
}

fn check_layout(dfts: &LocalDftSet, coeffs: &SegmentCoefficients, partition: &Partition) -> Result<()> {
    if dfts.segments.len() != partition.n_segments() {
        return Err(Error::InvalidArgument("DFT set does not match the partition".into()));
    }
    if coeffs.components.iter().any(|runs| runs.last().map(|r| r.segments.end) != Some(partition.n_segments())) {
        return Err(Error::InvalidArgument("coefficient runs do not cover the partition".into()));
    }
    Ok(())
}

/// Sum of per-segment Whittle log-likelihoods.
pub fn whittle_loglik(dfts: &LocalDftSet, coeffs: &SegmentCoefficients, partition: &Partition) -> Result<f64> {
    check_layout(dfts, coeffs, partition)?;
    let mut clamps = 0;
    let mut total = 0.0;
    for (q, dft) in dfts.segments.iter().enumerate() {
        let basis = FreqBasis::new(&dft.freqs(), coeffs.truncation);
        total += segment_loglik(dft, &basis, &coeffs.segment_coeffs(q), &mut clamps)?;
    }
    Ok(total)
}

/// Derivatives of one segment's log-likelihood with respect to each
/// component's value at each frequency: `out[c][ℓ]`.
pub(crate) fn segment_value_grad(dft: &SegmentDft, values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = dft.dim;
    let n_freqs = dft.n_freqs();
    let mut out = vec![vec![0.0; n_freqs]; dim * dim];
    for l in 0..n_freqs {
        let y = dft.at(l);
        for col in 0..dim {
            let g = values[psi_index(col)][l];
            let r = residual(values, y, dim, col, l);
            let inside = g.abs() <= LOG_PSI_CLAMP;
            let inv_psi = (-g.clamp(-LOG_PSI_CLAMP, LOG_PSI_CLAMP)).exp();
            out[psi_index(col)][l] = -1.0 + if inside { r.norm_sqr() * inv_psi } else { 0.0 };
            for row in col + 1..dim {
                let i = theta_index(dim, row, col);
                let cross = r.conj() * y[row];
                out[i][l] = -2.0 * cross.re * inv_psi;
                out[i + 1][l] = -2.0 * cross.im * inv_psi;
            }
        }
    }
    out
}

/// Analytic gradient of [`whittle_loglik`] in the layout of
/// [`SegmentCoefficients::flatten`].
pub fn whittle_grad(dfts: &LocalDftSet, coeffs: &SegmentCoefficients, partition: &Partition) -> Result<Vec<f64>> {
    check_layout(dfts, coeffs, partition)?;
    let s = coeffs.truncation;
    let comps = components(coeffs.dim);
    let mut offsets = Vec::with_capacity(comps.len());
    let mut acc = 0;
    for runs in &coeffs.components {
        offsets.push(acc);
        acc += runs.len() * s;
    }
    let mut grad = vec![0.0; acc];
    for (q, dft) in dfts.segments.iter().enumerate() {
        let basis = FreqBasis::new(&dft.freqs(), s);
        let values = segment_values(&basis, &coeffs.segment_coeffs(q));
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState(format!("non-finite component value in segment {}", q + 1)));
        }
        let dv = segment_value_grad(dft, &values);
        for (c, comp) in comps.iter().enumerate() {
            let base = offsets[c] + coeffs.run_index(c, q) * s;
            let kind = comp.basis_kind();
            for (l, d) in dv[c].iter().enumerate() {
                for (g, b) in grad[base..base + s].iter_mut().zip(basis.row(kind, l)) {
                    *g += d * b;
                }
            }
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidState("non-finite gradient".into()));
    }
    Ok(grad)
}

/// Per-frequency form of the log-likelihood as a function of one block's
/// component value `v`, all other components held fixed.
#[derive(Debug, Clone)]
pub(crate) enum BlockTerms {
    /// `−(a0 + 2 a1 v + a2 v²)` per frequency (θ components).
    Quadratic { a0: Vec<f64>, a1: Vec<f64>, a2: Vec<f64> },
    /// `−v − Q e^{−v}` per frequency (`log ψ` components).
    LogPsi { q: Vec<f64> },
    /// Likelihood switched off.
    Flat,
}

/// Log-likelihood terms of one component-run block with everything else fixed.
#[derive(Debug, Clone)]
pub(crate) struct BlockLikelihood {
    pub truncation: usize,
    /// Row-major design matrix: one basis row per frequency in the run.
    pub design: Vec<f64>,
    pub terms: BlockTerms,
}

impl BlockLikelihood {
    pub fn n_rows(&self) -> usize {
        self.design.len() / self.truncation.max(1)
    }

    #[inline]
    fn row(&self, l: usize) -> &[f64] {
        &self.design[l * self.truncation..(l + 1) * self.truncation]
    }

    pub fn values(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n_rows()).map(|l| dot(self.row(l), beta)).collect()
    }

    pub fn loglik(&self, beta: &[f64]) -> f64 {
        match &self.terms {
            BlockTerms::Flat => 0.0,
            BlockTerms::Quadratic { a0, a1, a2 } => self
                .values(beta)
                .iter()
                .enumerate()
                .map(|(l, v)| -(a0[l] + 2.0 * a1[l] * v + a2[l] * v * v))
                .sum(),
            BlockTerms::LogPsi { q } => self
                .values(beta)
                .iter()
                .zip(q)
                .map(|(&v, &q)| {
                    let g = v.clamp(-LOG_PSI_CLAMP, LOG_PSI_CLAMP);
                    -g - q * (-g).exp()
                })
                .sum(),
        }
    }

    /// Adds the gradient to `out` and returns the log-likelihood.
    pub fn loglik_grad(&self, beta: &[f64], out: &mut [f64]) -> f64 {
        let s = self.truncation;
        let mut total = 0.0;
        let mut accumulate = |l: usize, d: f64| {
            for (o, b) in out[..s].iter_mut().zip(self.row(l)) {
                *o += d * b;
            }
        };
        match &self.terms {
            BlockTerms::Flat => {}
            BlockTerms::Quadratic { a0, a1, a2 } => {
                for l in 0..self.n_rows() {
                    let v = dot(self.row(l), beta);
                    total -= a0[l] + 2.0 * a1[l] * v + a2[l] * v * v;
                    accumulate(l, -2.0 * (a1[l] + a2[l] * v));
                }
            }
            BlockTerms::LogPsi { q } => {
                for l in 0..self.n_rows() {
                    let v = dot(self.row(l), beta);
                    let inside = v.abs() <= LOG_PSI_CLAMP;
                    let g = v.clamp(-LOG_PSI_CLAMP, LOG_PSI_CLAMP);
                    let e = q[l] * (-g).exp();
                    total -= g + e;
                    accumulate(l, if inside { -1.0 + e } else { 0.0 });
                }
            }
        }
        total
    }

    /// Per-frequency curvature weights `w_ℓ` with `−∇² = Σ w_ℓ b_ℓ b_ℓ'`.
    /// `observed = false` replaces the `log ψ` weights by their expectation (1).
    pub fn curvature_weights(&self, beta: &[f64], observed: bool) -> Vec<f64> {
        match &self.terms {
            BlockTerms::Flat => vec![0.0; self.n_rows()],
            BlockTerms::Quadratic { a2, .. } => a2.iter().map(|a| 2.0 * a).collect(),
            BlockTerms::LogPsi { q } => {
                if observed {
                    self.values(beta)
                        .iter()
                        .zip(q)
                        .map(|(&v, &q)| {
                            if v.abs() <= LOG_PSI_CLAMP {
                                q * (-v).exp()
                            } else {
                                0.0
                            }
                        })
                        .collect()
                } else {
                    vec![1.0; self.n_rows()]
                }
            }
        }
    }

    /// `Σ w_ℓ b_ℓ b_ℓ'` as a dense symmetric matrix.
    pub fn weighted_gram(&self, weights: &[f64]) -> nalgebra::DMatrix<f64> {
        let s = self.truncation;
        let mut m = nalgebra::DMatrix::<f64>::zeros(s, s);
        for (l, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = self.row(l);
            for a in 0..s {
                let wa = w * row[a];
                for b in a..s {
                    m[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..s {
            for b in 0..a {
                m[(a, b)] = m[(b, a)];
            }
        }
        m
    }
}

/// Build the block likelihood of component `c` on run `run` of `coeffs`.
pub(crate) fn block_likelihood(
    cache: &mut SegmentCache<'_>,
    partition: &Partition,
    coeffs: &SegmentCoefficients,
    c: usize,
    run: usize,
    flat: bool,
) -> BlockLikelihood {
    let s = coeffs.truncation;
    let dim = coeffs.dim;
    let comp = components(dim)[c];
    let segs = coeffs.components[c][run].segments.clone();
    let mut design = Vec::new();
    let kind = comp.basis_kind();
    let mut a0 = Vec::new();
    let mut a1 = Vec::new();
    let mut a2 = Vec::new();
    let mut qv = Vec::new();
    for q in segs {
        let n = partition.segment_len(q);
        let basis = cache.basis(n);
        for l in 0..basis.n_freqs {
            design.extend_from_slice(basis.row(kind, l));
        }
        if flat {
            continue;
        }
        let dft = cache.dft(partition.segment(q));
        let seg_coeffs = coeffs.segment_coeffs(q);
        let values = segment_values(&basis, &seg_coeffs);
        let col = comp.col;
        for l in 0..basis.n_freqs {
            let y = dft.at(l);
            let r = residual(&values, y, dim, col, l);
            match comp.kind {
                ComponentKind::LogPsi => qv.push(r.norm_sqr()),
                ComponentKind::ThetaRe | ComponentKind::ThetaIm => {
                    let i = theta_index(dim, comp.row, col);
                    let (z, own) = if comp.kind == ComponentKind::ThetaRe {
                        (y[comp.row], values[i][l])
                    } else {
                        (Complex::new(0.0, -1.0) * y[comp.row], values[i + 1][l])
                    };
                    let base = r - z * own;
                    let inv_psi = (-values[psi_index(col)][l].clamp(-LOG_PSI_CLAMP, LOG_PSI_CLAMP)).exp();
                    a0.push(base.norm_sqr() * inv_psi);
                    a1.push((base.conj() * z).re * inv_psi);
                    a2.push(z.norm_sqr() * inv_psi);
                }
            }
        }
    }
    let terms = if flat {
        BlockTerms::Flat
    } else if comp.kind == ComponentKind::LogPsi {
        BlockTerms::LogPsi { q: qv }
    } else {
        BlockTerms::Quadratic { a0, a1, a2 }
    };
    BlockLikelihood {
        truncation: s,
        design,
        terms,
    }
}

/// Full log-likelihood through the cache; `flat` returns zero.
pub(crate) fn cached_loglik(
    cache: &mut SegmentCache<'_>,
    partition: &Partition,
    coeffs: &SegmentCoefficients,
    flat: bool,
    clamps: &mut u64,
) -> Result<f64> {
    if flat {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for q in 0..partition.n_segments() {
        let dft = cache.dft(partition.segment(q));
        let basis = cache.basis(partition.segment_len(q));
        total += segment_loglik(&dft, &basis, &coeffs.segment_coeffs(q), clamps)?;
    }
    Ok(total)
}
