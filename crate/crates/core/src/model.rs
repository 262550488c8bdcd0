//! Domain types for the piecewise Cholesky spectral model.
//!
//! A local spectral matrix is parameterised through its modified Cholesky
//! factorisation `f^{-1} = Θ Ψ^{-1} Θ^*`, where `Θ` is unit lower triangular
//! and `Ψ` is positive diagonal. Each of the `N²` real components
//! (`Re θ_jk`, `Im θ_jk` for `j > k`, and `log ψ_jj`) is a truncated cosine or
//! sine expansion in frequency. Components are grouped into *runs*: maximal
//! stretches of consecutive segments over which the component does not change.

use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Complex = num_complex::Complex64;

/// Expansions of `log ψ` are clamped to this magnitude before exponentiation.
pub const LOG_PSI_CLAMP: f64 = 50.0;

/// Largest supported dimension; change sets are stored as 64-bit masks.
pub const MAX_DIM: usize = 8;

/// Observed `T × N` real series, stored row-major (time-major).
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    values: Vec<f64>,
    len: usize,
    dim: usize,
    sample_rate: Option<f64>,
}

impl MultivariateSeries {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let len = rows.len();
        if len == 0 {
            return Err(Error::Data("series is empty".into()));
        }
        let dim = rows[0].len();
        let mut values = Vec::with_capacity(len * dim);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Data(format!(
                    "row {} has {} columns, expected {}",
                    t + 1,
                    row.len(),
                    dim
                )));
            }
            values.extend_from_slice(row);
        }
        Self::from_flat(len, dim, values)
    }

    pub fn from_flat(len: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::Data("series must have at least one row and one column".into()));
        }
        if dim > MAX_DIM {
            return Err(Error::Data(format!("dimension {dim} exceeds the supported maximum {MAX_DIM}")));
        }
        if values.len() != len * dim {
            return Err(Error::Data(format!(
                "expected {} values for a {}x{} series, got {}",
                len * dim,
                len,
                dim,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, column {}",
                pos / dim + 1,
                pos % dim + 1
            )));
        }
        Ok(Self {
            values,
            len,
            dim,
            sample_rate: None,
        })
    }

    pub fn with_sample_rate(mut self, rate: f64) -> Self {
        self.sample_rate = Some(rate);
        self
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_rate(&self) -> Option<f64> {
        self.sample_rate
    }

    /// Value at zero-based time index `t` and channel `j`.
    #[inline]
    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.dim + j]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComponentKind {
    LogPsi,
    ThetaRe,
    ThetaIm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    /// `[1, cos(2π ω), …, cos(2π (S−1) ω)]`
    Even,
    /// `[sin(2π ω), …, sin(2π S ω)]`
    Odd,
}

/// One of the `N²` real Cholesky components. `row > col` for θ kinds and
/// `row == col` for `log ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentIndex {
    pub kind: ComponentKind,
    pub row: usize,
    pub col: usize,
}

impl ComponentIndex {
    pub fn basis_kind(&self) -> BasisKind {
        match self.kind {
            ComponentKind::ThetaIm => BasisKind::Odd,
            _ => BasisKind::Even,
        }
    }

    pub fn has_intercept(&self) -> bool {
        self.basis_kind() == BasisKind::Even
    }

    pub fn label(&self) -> String {
        match self.kind {
            ComponentKind::LogPsi => format!("logpsi{}{}", self.row + 1, self.col + 1),
            ComponentKind::ThetaRe => format!("retheta{}{}", self.row + 1, self.col + 1),
            ComponentKind::ThetaIm => format!("imtheta{}{}", self.row + 1, self.col + 1),
        }
    }
}

/// Canonical component order: `log ψ_11 … log ψ_NN`, then for each `j > k`
/// (row-major) the pair `Re θ_jk`, `Im θ_jk`.
pub fn components(dim: usize) -> Vec<ComponentIndex> {
    let mut out = Vec::with_capacity(dim * dim);
    for j in 0..dim {
        out.push(ComponentIndex {
            kind: ComponentKind::LogPsi,
            row: j,
            col: j,
        });
    }
    for row in 1..dim {
        for col in 0..row {
            out.push(ComponentIndex {
                kind: ComponentKind::ThetaRe,
                row,
                col,
            });
            out.push(ComponentIndex {
                kind: ComponentKind::ThetaIm,
                row,
                col,
            });
        }
    }
    out
}

/// Set of canonical component indices, as a bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentSet(pub u64);

impl ComponentSet {
    pub fn full(n_components: usize) -> Self {
        if n_components >= 64 {
            ComponentSet(u64::MAX)
        } else {
            ComponentSet((1u64 << n_components) - 1)
        }
    }

    pub fn from_indices(indices: &[usize]) -> Self {
        ComponentSet(indices.iter().fold(0u64, |acc, &i| acc | (1u64 << i)))
    }

    pub fn contains(&self, c: usize) -> bool {
        self.0 >> c & 1 == 1
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..64).filter(move |&c| self.contains(c))
    }

    pub fn is_subset_of_full(&self, n_components: usize) -> bool {
        self.0 & !Self::full(n_components).0 == 0
    }
}

/// A segmentation of `1..=T`: breakpoints `δ_0 = 0 < … < δ_m = T` and, for each
/// interior breakpoint, the set of components that change there.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    breakpoints: Vec<usize>,
    change_sets: Vec<ComponentSet>,
}

impl Partition {
    pub fn single(len: usize) -> Self {
        Self {
            breakpoints: vec![0, len],
            change_sets: Vec::new(),
        }
    }

    /// `breakpoints` includes both ends. Only structural checks are made here;
    /// see [`Partition::validate`] for the `n_min`/`M` constraints.
    pub fn new(breakpoints: Vec<usize>, change_sets: Vec<ComponentSet>) -> Result<Self> {
        if breakpoints.len() < 2 || breakpoints[0] != 0 {
            return Err(Error::InvalidPartition(
                "breakpoints must start at 0 and contain at least two entries".into(),
            ));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPartition("breakpoints must be strictly increasing".into()));
        }
        if change_sets.len() + 2 != breakpoints.len() {
            return Err(Error::InvalidPartition(format!(
                "{} interior breakpoints but {} change sets",
                breakpoints.len() - 2,
                change_sets.len()
            )));
        }
        if change_sets.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidPartition("empty change set".into()));
        }
        Ok(Self {
            breakpoints,
            change_sets,
        })
    }

    pub fn validate(&self, n_min: usize, n_components: usize, max_segments: usize) -> Result<()> {
        if self.n_segments() > max_segments {
            return Err(Error::InvalidPartition(format!(
                "{} segments exceed the maximum {}",
                self.n_segments(),
                max_segments
            )));
        }
        for q in 0..self.n_segments() {
            if self.segment_len(q) < n_min {
                return Err(Error::InvalidPartition(format!(
                    "segment {} has length {} < n_min {}",
                    q + 1,
                    self.segment_len(q),
                    n_min
                )));
            }
        }
        for (q, set) in self.change_sets.iter().enumerate() {
            if set.is_empty() || !set.is_subset_of_full(n_components) {
                return Err(Error::InvalidPartition(format!(
                    "change set at breakpoint {} is empty or out of range",
                    q + 1
                )));
            }
        }
        Ok(())
    }

    pub fn n_segments(&self) -> usize {
        self.breakpoints.len() - 1
    }

    /// Series length `T`.
    pub fn len(&self) -> usize {
        *self.breakpoints.last().expect("partition has breakpoints")
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn breakpoints(&self) -> &[usize] {
        &self.breakpoints
    }

    /// Interior breakpoints `δ_1 … δ_{m−1}`.
    pub fn interior(&self) -> &[usize] {
        &self.breakpoints[1..self.breakpoints.len() - 1]
    }

    pub fn change_sets(&self) -> &[ComponentSet] {
        &self.change_sets
    }

    /// Zero-based sample range of segment `q` (zero-based).
    pub fn segment(&self, q: usize) -> Range<usize> {
        self.breakpoints[q]..self.breakpoints[q + 1]
    }

    pub fn segment_len(&self, q: usize) -> usize {
        self.breakpoints[q + 1] - self.breakpoints[q]
    }

    /// Scaled midpoint `u_q = (δ_q + δ_{q−1}) / 2T`.
    pub fn midpoint(&self, q: usize) -> f64 {
        (self.breakpoints[q] + self.breakpoints[q + 1]) as f64 / (2.0 * self.len() as f64)
    }

    /// Segment owning one-based time `t`, i.e. `δ_{q−1} < t ≤ δ_q`.
    pub fn segment_of(&self, t: usize) -> usize {
        let idx = self.breakpoints.partition_point(|&b| b < t);
        idx.saturating_sub(1).min(self.n_segments() - 1)
    }

    /// Insert breakpoint `at` inside segment `q`.
    pub(crate) fn split(&self, q: usize, at: usize, set: ComponentSet) -> Self {
        let mut breakpoints = self.breakpoints.clone();
        breakpoints.insert(q + 1, at);
        let mut change_sets = self.change_sets.clone();
        change_sets.insert(q, set);
        Self {
            breakpoints,
            change_sets,
        }
    }

    /// Remove interior breakpoint `b` (zero-based among interior breakpoints),
    /// merging segments `b` and `b + 1`.
    pub(crate) fn merge(&self, b: usize) -> Self {
        let mut breakpoints = self.breakpoints.clone();
        breakpoints.remove(b + 1);
        let mut change_sets = self.change_sets.clone();
        change_sets.remove(b);
        Self {
            breakpoints,
            change_sets,
        }
    }

    pub(crate) fn with_change_set(&self, b: usize, set: ComponentSet) -> Self {
        let mut out = self.clone();
        out.change_sets[b] = set;
        out
    }

    pub(crate) fn relocate(&self, b: usize, at: usize) -> Self {
        let mut out = self.clone();
        out.breakpoints[b + 1] = at;
        out
    }
}

/// For each component, the runs of consecutive segments sharing coefficients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentRunMap {
    pub runs: Vec<Vec<Range<usize>>>,
}

impl ComponentRunMap {
    /// Recover the change sets implied by the run boundaries.
    pub fn change_sets(&self, n_segments: usize) -> Vec<ComponentSet> {
        let mut sets = vec![ComponentSet::default(); n_segments.saturating_sub(1)];
        for (c, runs) in self.runs.iter().enumerate() {
            for run in &runs[1..] {
                sets[run.start - 1].0 |= 1u64 << c;
            }
        }
        sets
    }
}

pub fn component_runs(partition: &Partition, n_components: usize) -> ComponentRunMap {
    let m = partition.n_segments();
    let runs = (0..n_components)
        .map(|c| {
            let mut runs = Vec::new();
            let mut start = 0;
            for (b, set) in partition.change_sets().iter().enumerate() {
                if set.contains(c) {
                    runs.push(start..b + 1);
                    start = b + 1;
                }
            }
            runs.push(start..m);
            runs
        })
        .collect();
    ComponentRunMap { runs }
}

/// Coefficients and smoothing parameter of one component over one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCoefficients {
    pub segments: Range<usize>,
    pub coeffs: Vec<f64>,
    pub lambda_sq: f64,
}

/// Coefficient vectors (each of length `S`) for every component-run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCoefficients {
    pub truncation: usize,
    pub dim: usize,
    pub components: Vec<Vec<RunCoefficients>>,
}

impl SegmentCoefficients {
    /// All-zero coefficients on the runs of `partition`.
    pub fn zeros(partition: &Partition, dim: usize, truncation: usize, lambda_sq: f64) -> Self {
        let map = component_runs(partition, dim * dim);
        let components = map
            .runs
            .into_iter()
            .map(|runs| {
                runs.into_iter()
                    .map(|segments| RunCoefficients {
                        segments,
                        coeffs: vec![0.0; truncation],
                        lambda_sq,
                    })
                    .collect()
            })
            .collect();
        Self {
            truncation,
            dim,
            components,
        }
    }

    pub fn n_components(&self) -> usize {
        self.dim * self.dim
    }

    /// Index of the run of component `c` covering segment `q`.
    pub fn run_index(&self, c: usize, q: usize) -> usize {
        let runs = &self.components[c];
        runs.partition_point(|r| r.segments.end <= q)
    }

    pub fn run_for(&self, c: usize, q: usize) -> &RunCoefficients {
        &self.components[c][self.run_index(c, q)]
    }

    /// Coefficient vectors for segment `q`, in canonical component order.
    pub fn segment_coeffs(&self, q: usize) -> Vec<&[f64]> {
        (0..self.n_components())
            .map(|c| self.run_for(c, q).coeffs.as_slice())
            .collect()
    }

    pub fn n_runs(&self) -> usize {
        self.components.iter().map(Vec::len).sum()
    }

    /// Coefficients laid out component-run-major, coefficient-index-minor.
    pub fn flatten(&self) -> Vec<f64> {
        self.components
            .iter()
            .flat_map(|runs| runs.iter().flat_map(|r| r.coeffs.iter().copied()))
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_runs() * self.truncation {
            return Err(Error::InvalidArgument(format!(
                "expected {} coefficients, got {}",
                self.n_runs() * self.truncation,
                flat.len()
            )));
        }
        let mut chunks = flat.chunks(self.truncation);
        for runs in &mut self.components {
            for run in runs.iter_mut() {
                run.coeffs.copy_from_slice(chunks.next().expect("length checked"));
            }
        }
        Ok(())
    }

    /// Check shapes and run layout against `partition`.
    pub fn validate(&self, partition: &Partition, kappa: f64) -> Result<()> {
        let map = component_runs(partition, self.n_components());
        if map.runs.len() != self.components.len() {
            return Err(Error::InvalidState("component count mismatch".into()));
        }
        for (c, (expected, runs)) in map.runs.iter().zip(&self.components).enumerate() {
            if expected.len() != runs.len() || expected.iter().zip(runs).any(|(e, r)| *e != r.segments) {
                return Err(Error::InvalidState(format!("run layout of component {c} disagrees with partition")));
            }
            for r in runs {
                if r.coeffs.len() != self.truncation {
                    return Err(Error::InvalidState(format!("component {c}: coefficient vector has wrong length")));
                }
                if r.coeffs.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidState(format!("component {c}: non-finite coefficient")));
                }
                if !(r.lambda_sq > 0.0 && r.lambda_sq <= kappa) {
                    return Err(Error::InvalidState(format!(
                        "component {c}: smoothing parameter {} outside (0, {kappa}]",
                        r.lambda_sq
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Row-major basis evaluations at a list of frequencies.
#[derive(Debug, Clone)]
pub struct FreqBasis {
    pub n_freqs: usize,
    pub truncation: usize,
    pub even: Vec<f64>,
    pub odd: Vec<f64>,
}

impl FreqBasis {
    pub fn new(freqs: &[f64], truncation: usize) -> Self {
        let s = truncation;
        let mut even = Vec::with_capacity(freqs.len() * s);
        let mut odd = Vec::with_capacity(freqs.len() * s);
        for &w in freqs {
            for k in 0..s {
                even.push((2.0 * PI * k as f64 * w).cos());
            }
            for k in 1..=s {
                odd.push((2.0 * PI * k as f64 * w).sin());
            }
        }
        Self {
            n_freqs: freqs.len(),
            truncation,
            even,
            odd,
        }
    }

    #[inline]
    pub fn row(&self, kind: BasisKind, l: usize) -> &[f64] {
        let s = self.truncation;
        match kind {
            BasisKind::Even => &self.even[l * s..(l + 1) * s],
            BasisKind::Odd => &self.odd[l * s..(l + 1) * s],
        }
    }

    /// Evaluate the expansion with `coeffs` at every frequency.
    pub fn expand(&self, kind: BasisKind, coeffs: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.n_freqs).map(|l| dot(self.row(kind, l), coeffs)));
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Basis functions evaluated at `freqs` (one row per frequency).
pub fn basis_matrix(freqs: &[f64], truncation: usize, kind: BasisKind) -> Result<DMatrix<f64>> {
    if truncation < 2 {
        return Err(Error::InvalidArgument(format!("truncation S must be at least 2, got {truncation}")));
    }
    if freqs.is_empty() {
        return Err(Error::InvalidArgument("frequency list is empty".into()));
    }
    let basis = FreqBasis::new(freqs, truncation);
    Ok(DMatrix::from_fn(freqs.len(), truncation, |l, k| basis.row(kind, l)[k]))
}

/// `Θ` (unit lower triangular) and the diagonal of `Ψ` at one frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyPair {
    pub theta: DMatrix<Complex>,
    pub psi: Vec<f64>,
}

impl CholeskyPair {
    pub fn identity(dim: usize) -> Self {
        Self {
            theta: DMatrix::identity(dim, dim),
            psi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.psi.len()
    }
}

/// Evaluate the component expansions for one segment at `freqs`.
///
/// `coeffs` holds one vector per component in canonical order.
pub fn reconstruct_cholesky(coeffs: &[&[f64]], dim: usize, freqs: &[f64]) -> Result<Vec<CholeskyPair>> {
    let mut clamps = 0;
    reconstruct_cholesky_counted(coeffs, dim, freqs, &mut clamps)
}

pub fn reconstruct_cholesky_counted(
    coeffs: &[&[f64]],
    dim: usize,
    freqs: &[f64],
    clamps: &mut u64,
) -> Result<Vec<CholeskyPair>> {
    let comps = components(dim);
    if coeffs.len() != comps.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} coefficient vectors, got {}",
            comps.len(),
            coeffs.len()
        )));
    }
    let s = coeffs.first().map_or(0, |c| c.len());
    if s < 2 || coeffs.iter().any(|c| c.len() != s) {
        return Err(Error::InvalidArgument("coefficient vectors must share a length S >= 2".into()));
    }
    if coeffs.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidState("non-finite coefficient".into()));
    }
    let basis = FreqBasis::new(freqs, s);
    let mut out = Vec::with_capacity(freqs.len());
    for l in 0..freqs.len() {
        let mut pair = CholeskyPair::identity(dim);
        for (comp, c) in comps.iter().zip(coeffs) {
            let v = dot(basis.row(comp.basis_kind(), l), c);
            match comp.kind {
                ComponentKind::LogPsi => {
                    let clamped = v.clamp(-LOG_PSI_CLAMP, LOG_PSI_CLAMP);
                    if clamped != v {
                        *clamps += 1;
                    }
                    pair.psi[comp.row] = clamped.exp();
                }
                ComponentKind::ThetaRe => pair.theta[(comp.row, comp.col)].re = v,
                ComponentKind::ThetaIm => pair.theta[(comp.row, comp.col)].im = v,
            }
        }
        out.push(pair);
    }
    Ok(out)
}

/// `f = Θ^{−*} Ψ Θ^{−1}`, via forward substitution on the unit triangle.
pub fn spectrum_from_cholesky(pair: &CholeskyPair) -> Result<DMatrix<Complex>> {
    let n = pair.dim();
    if pair.psi.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::InvalidState("Ψ has a non-positive diagonal entry".into()));
    }
    // V = Θ^{-1}: solve Θ V = I column by column.
    let mut v = DMatrix::<Complex>::zeros(n, n);
    for col in 0..n {
        v[(col, col)] = Complex::new(1.0, 0.0);
        for row in col + 1..n {
            let mut acc = Complex::new(0.0, 0.0);
            for k in col..row {
                acc += pair.theta[(row, k)] * v[(k, col)];
            }
            v[(row, col)] = -acc;
        }
    }
    // f = V^* Ψ V
    let mut f = DMatrix::<Complex>::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let mut acc = Complex::new(0.0, 0.0);
            for k in a.max(b)..n {
                acc += v[(k, a)].conj() * pair.psi[k] * v[(k, b)];
            }
            f[(a, b)] = acc;
        }
    }
    for a in 0..n {
        f[(a, a)].im = 0.0;
        for b in a + 1..n {
            let avg = (f[(a, b)] + f[(b, a)].conj()) * 0.5;
            f[(a, b)] = avg;
            f[(b, a)] = avg.conj();
        }
    }
    Ok(f)
}

/// Squared coherence `|f_jk|² / (f_jj f_kk)`.
pub fn coherence(f: &DMatrix<Complex>, j: usize, k: usize) -> Result<f64> {
    if j == k {
        return Err(Error::InvalidArgument("coherence needs two distinct channels".into()));
    }
    let (fjj, fkk) = (f[(j, j)].re, f[(k, k)].re);
    if !(fjj > 0.0) || !(fkk > 0.0) {
        return Err(Error::InvalidState("non-positive auto-spectrum".into()));
    }
    Ok((f[(j, k)].norm_sqr() / (fjj * fkk)).clamp(0.0, 1.0))
}
