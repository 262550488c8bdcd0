//! Posterior summaries of chain snapshots on a time × frequency lattice.
//!
//! Each snapshot defines a piecewise-constant spectral surface. Means are
//! accumulated with difference arrays along time; percentile bands are
//! computed once per stretch of time points over which no snapshot changes
//! segment, since every cell in such a stretch sees the same values.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{coherence, reconstruct_cholesky, spectrum_from_cholesky, Complex, Partition};
use crate::sampler::ChainState;

/// Number of frequencies on the default evaluation lattice.
pub const DEFAULT_FREQS: usize = 51;

/// `n` equally spaced frequencies on `[0, 0.5]`.
pub fn default_freq_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|k| 0.5 * k as f64 / (n - 1) as f64).collect(),
    }
}

/// Time points `1..=len`.
pub fn default_time_grid(len: usize) -> Vec<usize> {
    (1..=len).collect()
}

/// A scalar function of the spectral matrix. Channels are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Functional {
    Spectrum(usize),
    LogSpectrum(usize),
    /// Squared coherence between channels `j > k`.
    Coherence(usize, usize),
}

impl Functional {
    /// File stem with one-based channels: `f11`, `logf11`, `rho21`.
    pub fn label(&self) -> String {
        match *self {
            Functional::Spectrum(j) => format!("f{}{}", j + 1, j + 1),
            Functional::LogSpectrum(j) => format!("logf{}{}", j + 1, j + 1),
            Functional::Coherence(j, k) => format!("rho{}{}", j + 1, k + 1),
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown functional {label:?}"));
        let (kind, digits) = if let Some(rest) = label.strip_prefix("logf") {
            ("logf", rest)
        } else if let Some(rest) = label.strip_prefix("rho") {
            ("rho", rest)
        } else if let Some(rest) = label.strip_prefix('f') {
            ("f", rest)
        } else {
            return Err(bad());
        };
        let idx: Vec<usize> = digits
            .chars()
            .map(|c| c.to_digit(10).map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(bad)?;
        match (kind, idx.as_slice()) {
            ("f", [a, b]) if a == b && *a >= 1 => Ok(Functional::Spectrum(a - 1)),
            ("logf", [a, b]) if a == b && *a >= 1 => Ok(Functional::LogSpectrum(a - 1)),
            ("rho", [a, b]) if a > b && *b >= 1 => Ok(Functional::Coherence(a - 1, b - 1)),
            _ => Err(bad()),
        }
    }

    pub fn eval(&self, f: &DMatrix<Complex>) -> Result<f64> {
        match *self {
            Functional::Spectrum(j) => Ok(f[(j, j)].re),
            Functional::LogSpectrum(j) => {
                let v = f[(j, j)].re;
                if v > 0.0 {
                    Ok(v.ln())
                } else {
                    Err(Error::InvalidState("non-positive auto-spectrum".into()))
                }
            }
            Functional::Coherence(j, k) => coherence(f, j, k),
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        let ok = match *self {
            Functional::Spectrum(j) | Functional::LogSpectrum(j) => j < dim,
            Functional::Coherence(j, k) => j < dim && k < j,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{} does not exist for dimension {dim}", self.label())))
        }
    }
}

/// Auto-spectra, log auto-spectra and coherences of a `dim`-variate series, in that order.
pub fn all_functionals(dim: usize) -> Vec<Functional> {
    let mut out: Vec<Functional> = (0..dim).map(Functional::Spectrum).collect();
    out.extend((0..dim).map(Functional::LogSpectrum));
    for j in 1..dim {
        for k in 0..j {
            out.push(Functional::Coherence(j, k));
        }
    }
    out
}

/// Spectral matrices on a time × frequency lattice, stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumGrid {
    pub times: Vec<usize>,
    pub freqs: Vec<f64>,
    pub dim: usize,
    pub cells: Vec<DMatrix<Complex>>,
}

impl SpectrumGrid {
    pub fn at(&self, ti: usize, fi: usize) -> &DMatrix<Complex> {
        &self.cells[ti * self.freqs.len() + fi]
    }

    /// Values of `functional` on the lattice, time-major.
    pub fn functional(&self, functional: Functional) -> Result<ScalarGrid> {
        functional.check_dim(self.dim)?;
        let values = self.cells.iter().map(|f| functional.eval(f)).collect::<Result<_>>()?;
        Ok(ScalarGrid {
            times: self.times.clone(),
            freqs: self.freqs.clone(),
            values,
        })
    }
}

/// A scalar field on the lattice, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub times: Vec<usize>,
    pub freqs: Vec<f64>,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn get(&self, ti: usize, fi: usize) -> f64 {
        self.values[ti * self.freqs.len() + fi]
    }

    pub fn congruent(&self, other: &ScalarGrid) -> bool {
        self.times == other.times
            && self.freqs.len() == other.freqs.len()
            && self.freqs.iter().zip(&other.freqs).all(|(a, b)| (a - b).abs() <= 1e-9)
            && self.values.len() == other.values.len()
    }

    /// `Σ_t |g(t+1, ω) − g(t, ω)|` for each frequency column.
    pub fn time_total_variation(&self) -> Vec<f64> {
        let nf = self.freqs.len();
        (0..nf)
            .map(|fi| {
                (1..self.times.len())
                    .map(|ti| (self.get(ti, fi) - self.get(ti - 1, fi)).abs())
                    .sum()
            })
            .collect()
    }
}

/// Pointwise percentile band of one functional.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub functional: Functional,
    pub level: f64,
    pub lower: ScalarGrid,
    pub upper: ScalarGrid,
}

impl Band {
    /// Fraction of cells where `lower ≤ truth ≤ upper`.
    pub fn coverage(&self, truth: &ScalarGrid) -> Result<f64> {
        if !self.lower.congruent(truth) {
            return Err(Error::InvalidArgument("band and truth grids differ".into()));
        }
        let hits = truth
            .values
            .iter()
            .zip(self.lower.values.iter().zip(&self.upper.values))
            .filter(|(t, (lo, hi))| *lo <= *t && *t <= *hi)
            .count();
        Ok(hits as f64 / truth.values.len() as f64)
    }
}

/// `Pr(δ_q = t | m, Y)` for one `(m, q)` pair; `breakpoint` is one-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationHistogram {
    pub m: usize,
    pub breakpoint: usize,
    pub support: Vec<usize>,
    pub probability: Vec<f64>,
}

impl LocationHistogram {
    /// Most probable location; ties go to the earliest.
    pub fn mode(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (&t, &p) in self.support.iter().zip(&self.probability) {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((t, p));
            }
        }
        best.map(|(t, _)| t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangepointPosterior {
    /// `pm[k − 1] = Pr(m = k | Y)` for `k = 1..=M`.
    pub pm: Vec<f64>,
    pub ploc: Vec<LocationHistogram>,
}

impl ChangepointPosterior {
    /// Most probable number of segments; ties go to the smallest.
    pub fn mode_m(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.pm.iter().enumerate() {
            if p > self.pm[best] {
                best = k;
            }
        }
        best + 1
    }

    pub fn histogram(&self, m: usize, breakpoint: usize) -> Option<&LocationHistogram> {
        self.ploc.iter().find(|h| h.m == m && h.breakpoint == breakpoint)
    }
}

/// Empirical `Pr(m)` and breakpoint-location histograms.
pub fn changepoint_posterior(snapshots: &[ChainState], max_segments: usize, len: usize) -> Result<ChangepointPosterior> {
    if snapshots.is_empty() {
        return Err(Error::InvalidArgument("no snapshots".into()));
    }
    let mut counts = vec![0usize; max_segments];
    for s in snapshots {
        let m = s.partition.n_segments();
        if m == 0 || m > max_segments || s.partition.len() != len {
            return Err(Error::InvalidArgument(format!(
                "snapshot at iteration {} does not fit M = {max_segments}, T = {len}",
                s.iteration
            )));
        }
        counts[m - 1] += 1;
    }
    let n = snapshots.len() as f64;
    let pm = counts.iter().map(|&c| c as f64 / n).collect();
    let mut ploc = Vec::new();
    for m in 2..=max_segments {
        if counts[m - 1] == 0 {
            continue;
        }
        for q in 1..m {
            let mut locs: Vec<usize> = snapshots
                .iter()
                .filter(|s| s.partition.n_segments() == m)
                .map(|s| s.partition.breakpoints()[q])
                .collect();
            locs.sort_unstable();
            let total = locs.len() as f64;
            let mut support = Vec::new();
            let mut probability = Vec::new();
            for chunk in locs.chunk_by(|a, b| a == b) {
                support.push(chunk[0]);
                probability.push(chunk.len() as f64 / total);
            }
            ploc.push(LocationHistogram {
                m,
                breakpoint: q,
                support,
                probability,
            });
        }
    }
    Ok(ChangepointPosterior { pm, ploc })
}

/// Spectral matrices of one snapshot: `tables[q][fi]`.
fn segment_spectra(state: &ChainState, freqs: &[f64]) -> Result<Vec<Vec<DMatrix<Complex>>>> {
    let dim = state.coeffs.dim;
    (0..state.partition.n_segments())
        .map(|q| {
            reconstruct_cholesky(&state.coeffs.segment_coeffs(q), dim, freqs)?
                .iter()
                .map(spectrum_from_cholesky)
                .collect()
        })
        .collect()
}

/// Grid index range covered by segment `q`.
fn grid_span(partition: &Partition, q: usize, times: &[usize]) -> std::ops::Range<usize> {
    let seg = partition.segment(q);
    // segment q holds t = seg.start + 1 ..= seg.end
    let a = times.partition_point(|&t| t <= seg.start);
    let b = times.partition_point(|&t| t <= seg.end);
    a..b
}

fn check_inputs(snapshots: &[ChainState], times: &[usize], freqs: &[f64]) -> Result<(usize, usize)> {
    let first = snapshots.first().ok_or_else(|| Error::InvalidArgument("no snapshots".into()))?;
    let (len, dim) = (first.partition.len(), first.coeffs.dim);
    if snapshots.iter().any(|s| s.partition.len() != len || s.coeffs.dim != dim) {
        return Err(Error::InvalidArgument("snapshots disagree on series length or dimension".into()));
    }
    if times.is_empty() || freqs.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation grid".into()));
    }
    if times.windows(2).any(|w| w[0] >= w[1]) || times[0] == 0 || *times.last().unwrap() > len {
        return Err(Error::InvalidArgument(format!("time grid must be increasing within 1..={len}")));
    }
    if freqs.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidArgument("non-finite frequency".into()));
    }
    Ok((len, dim))
}

/// Everything the command line front end writes for one run.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    /// Pointwise mean of the spectral matrices.
    pub spectrum: SpectrumGrid,
    /// Mean of each scalar functional, averaged per snapshot.
    pub means: Vec<(Functional, ScalarGrid)>,
    pub bands: Vec<Band>,
    pub changepoints: ChangepointPosterior,
}

impl PosteriorSummary {
    pub fn mean(&self, functional: Functional) -> Option<&ScalarGrid> {
        self.means.iter().find(|(f, _)| *f == functional).map(|(_, g)| g)
    }

    pub fn band(&self, functional: Functional) -> Option<&Band> {
        self.bands.iter().find(|b| b.functional == functional)
    }
}

/// Linear-interpolation percentile (type 7) of `values`, which is reordered.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    let n = values.len();
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let (_, &mut x_lo, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if lo + 1 >= n {
        return x_lo;
    }
    let x_hi = upper.iter().copied().fold(f64::INFINITY, f64::min);
    x_lo + (h - lo as f64) * (x_hi - x_lo)
}

/// Posterior means and `level` bands of `banded` functionals, plus the
/// mean spectral matrix and the change-point posterior.
pub fn summarize(
    snapshots: &[ChainState],
    max_segments: usize,
    times: &[usize],
    freqs: &[f64],
    banded: &[Functional],
    level: f64,
) -> Result<PosteriorSummary> {
    let (len, dim) = check_inputs(snapshots, times, freqs)?;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument("credible level must lie in (0, 1)".into()));
    }
    let functionals = all_functionals(dim);
    for f in banded {
        f.check_dim(dim)?;
    }
    let (nt, nf) = (times.len(), freqs.len());
    let n_fun = functionals.len();

    // Per-snapshot, per-segment matrices and functional values.
    let tables: Vec<Vec<Vec<DMatrix<Complex>>>> =
        snapshots.par_iter().map(|s| segment_spectra(s, freqs)).collect::<Result<_>>()?;
    let values: Vec<Vec<Vec<f64>>> = tables
        .par_iter()
        .map(|segs| {
            segs.iter()
                .map(|cells| {
                    let mut v = Vec::with_capacity(nf * n_fun);
                    for f in cells {
                        for fun in &functionals {
                            v.push(fun.eval(f)?);
                        }
                    }
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    // Means via difference arrays over the time index.
    let zero = DMatrix::<Complex>::zeros(dim, dim);
    let mut diff_f = vec![zero.clone(); (nt + 1) * nf];
    let mut diff_v = vec![0.0; (nt + 1) * nf * n_fun];
    for (s, (segs, vals)) in snapshots.iter().zip(tables.iter().zip(&values)) {
        for q in 0..s.partition.n_segments() {
            let span = grid_span(&s.partition, q, times);
            if span.is_empty() {
                continue;
            }
            for fi in 0..nf {
                diff_f[span.start * nf + fi] += &segs[q][fi];
                diff_f[span.end * nf + fi] -= &segs[q][fi];
            }
            for (i, v) in vals[q].iter().enumerate() {
                diff_v[span.start * nf * n_fun + i] += v;
                diff_v[span.end * nf * n_fun + i] -= v;
            }
        }
    }
    let n = snapshots.len() as f64;
    let mut cells = Vec::with_capacity(nt * nf);
    let mut run_f = vec![zero; nf];
    let mut run_v = vec![0.0; nf * n_fun];
    let mut mean_values = vec![vec![0.0; nt * nf]; n_fun];
    for ti in 0..nt {
        for fi in 0..nf {
            run_f[fi] += &diff_f[ti * nf + fi];
            let mut m = &run_f[fi] / Complex::new(n, 0.0);
            for a in 0..dim {
                m[(a, a)].im = 0.0;
            }
            cells.push(m);
        }
        for (i, r) in run_v.iter_mut().enumerate() {
            *r += diff_v[ti * nf * n_fun + i];
            let (fi, k) = (i / n_fun, i % n_fun);
            mean_values[k][ti * nf + fi] = *r / n;
        }
    }
    // Clean up rounding in running sums for coherences kept in [0, 1].
    for (k, fun) in functionals.iter().enumerate() {
        if matches!(fun, Functional::Coherence(..)) {
            mean_values[k].iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
    let grid = |values: Vec<f64>| ScalarGrid {
        times: times.to_vec(),
        freqs: freqs.to_vec(),
        values,
    };
    let means: Vec<(Functional, ScalarGrid)> = functionals.iter().copied().zip(mean_values.into_iter().map(grid)).collect();

    // Bands: one percentile pass per stretch of time points sharing a segment in every snapshot.
    let mut cuts: Vec<usize> = vec![0, nt];
    for s in snapshots {
        for q in 1..s.partition.n_segments() {
            cuts.push(grid_span(&s.partition, q, times).start);
        }
    }
    cuts.sort_unstable();
    cuts.dedup();
    let banded_idx: Vec<usize> = banded
        .iter()
        .map(|b| functionals.iter().position(|f| f == b).expect("functional checked"))
        .collect();
    let alpha = (1.0 - level) / 2.0;
    let stretches: Vec<(usize, usize)> = cuts.windows(2).filter(|w| w[0] < w[1]).map(|w| (w[0], w[1])).collect();
    let stretch_bands: Vec<Vec<(f64, f64)>> = stretches
        .par_iter()
        .map(|&(a, _)| {
            let t = times[a];
            let segs: Vec<usize> = snapshots.iter().map(|s| s.partition.segment_of(t)).collect();
            let mut buf = vec![0.0; snapshots.len()];
            let mut out = Vec::with_capacity(banded_idx.len() * nf);
            for &k in &banded_idx {
                for fi in 0..nf {
                    for (i, (vals, &q)) in values.iter().zip(&segs).enumerate() {
                        buf[i] = vals[q][fi * n_fun + k];
                    }
                    let lo = percentile(&mut buf, alpha);
                    let hi = percentile(&mut buf, 1.0 - alpha);
                    out.push((lo, hi));
                }
            }
            out
        })
        .collect();
    let mut bands = Vec::with_capacity(banded.len());
    for (bi, &fun) in banded.iter().enumerate() {
        let mut lower = vec![0.0; nt * nf];
        let mut upper = vec![0.0; nt * nf];
        for (&(a, b), sb) in stretches.iter().zip(&stretch_bands) {
            for ti in a..b {
                for fi in 0..nf {
                    let (lo, hi) = sb[bi * nf + fi];
                    lower[ti * nf + fi] = lo;
                    upper[ti * nf + fi] = hi;
                }
            }
        }
        bands.push(Band {
            functional: fun,
            level,
            lower: grid(lower),
            upper: grid(upper),
        });
    }

    Ok(PosteriorSummary {
        spectrum: SpectrumGrid {
            times: times.to_vec(),
            freqs: freqs.to_vec(),
            dim,
            cells,
        },
        means,
        bands,
        changepoints: changepoint_posterior(snapshots, max_segments, len)?,
    })
}

/// Pointwise mean spectral matrix across snapshots.
pub fn posterior_spectrum(snapshots: &[ChainState], times: &[usize], freqs: &[f64]) -> Result<SpectrumGrid> {
    let max_segments = snapshots.iter().map(|s| s.partition.n_segments()).max().unwrap_or(1);
    Ok(summarize(snapshots, max_segments, times, freqs, &[], 0.95)?.spectrum)
}

/// Pointwise percentile band of one functional.
pub fn credible_bands(
    snapshots: &[ChainState],
    functional: Functional,
    level: f64,
    times: &[usize],
    freqs: &[f64],
) -> Result<Band> {
    let max_segments = snapshots.iter().map(|s| s.partition.n_segments()).max().unwrap_or(1);
    let mut s = summarize(snapshots, max_segments, times, freqs, &[functional], level)?;
    Ok(s.bands.remove(0))
}

/// Mean squared difference over congruent grids.
pub fn ase(estimate: &ScalarGrid, truth: &ScalarGrid) -> Result<f64> {
    if !estimate.congruent(truth) {
        return Err(Error::InvalidArgument("estimate and truth grids differ".into()));
    }
    if truth.values.is_empty() {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    Ok(estimate
        .values
        .iter()
        .zip(&truth.values)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / truth.values.len() as f64)
}

/// Time-direction total variation of one snapshot's piecewise-constant
/// `functional`, per frequency.
pub fn snapshot_total_variation(state: &ChainState, functional: Functional, freqs: &[f64]) -> Result<Vec<f64>> {
    functional.check_dim(state.coeffs.dim)?;
    let tables = segment_spectra(state, freqs)?;
    let mut tv = vec![0.0; freqs.len()];
    for q in 1..tables.len() {
        for (fi, acc) in tv.iter_mut().enumerate() {
            *acc += (functional.eval(&tables[q][fi])? - functional.eval(&tables[q - 1][fi])?).abs();
        }
    }
    Ok(tv)
}
