//! Subcommands behind the `tvspec` binary.
//!
//! Every output except `timing.json` is a pure function of the manifest, so
//! rerunning `analyze` on a manifest reproduces the files byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{InputSpec, RunConfig};
use crate::error::{Error, Result};
use crate::io::{read_grid_csv, read_json, write_grid_csv, write_json, write_series_csv};
use crate::posterior::{all_functionals, ase, summarize, ChangepointPosterior, Functional};
use crate::sampler::{run_chain, ChainState, MoveDiagnostics};

/// Flags shared by the subcommands.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Replicates run concurrently; `None` uses every core.
    pub jobs: Option<usize>,
}

/// States of a finished chain, enough to recompute every summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotDump {
    pub config: RunConfig,
    pub replicate: usize,
    pub snapshots: Vec<ChainState>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PmFile {
    pub m: Vec<usize>,
    pub pm: Vec<f64>,
}

#[derive(Serialize)]
struct DiagnosticsFile<'a> {
    snapshots: usize,
    acceptance: BTreeMap<&'static str, f64>,
    moves: &'a MoveDiagnostics,
}

#[derive(Serialize)]
struct TimingFile {
    iterations: usize,
    seconds: f64,
    seconds_per_iteration: f64,
}

/// What one analysed replicate produced.
#[derive(Debug, Clone)]
pub struct ReplicateReport {
    pub dir: PathBuf,
    pub changepoints: ChangepointPosterior,
    pub diagnostics: MoveDiagnostics,
    pub seconds: f64,
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn replicate_dir(root: &Path, config: &RunConfig, r: usize) -> PathBuf {
    if config.replicates == 1 {
        root.to_path_buf()
    } else {
        root.join(format!("replicate_{r:03}"))
    }
}

/// Applies flag overrides, validates, and fixes `M` against the input length.
pub fn resolve(mut config: RunConfig, opts: &Options) -> Result<(RunConfig, PathBuf)> {
    if let Some(seed) = opts.seed {
        config.sampler.seed = seed;
    }
    let out = config.output_dir(opts.out.as_deref());
    config.output = None;
    config.validate()?;
    let (len, _) = config.input_shape()?;
    config.resolve_prior(len)?;
    Ok((config, out))
}

/// Posterior grids, bands and change-point files for one set of snapshots.
pub fn write_summary(dir: &Path, config: &RunConfig, snapshots: &[ChainState]) -> Result<ChangepointPosterior> {
    let first = snapshots.first().ok_or_else(|| Error::InvalidArgument("no snapshots".into()))?;
    let (len, dim) = (first.partition.len(), first.coeffs.dim);
    let times = config.grid.time_grid(len);
    let freqs = config.grid.freq_grid();
    let banded: Vec<Functional> = all_functionals(dim)
        .into_iter()
        .filter(|f| !matches!(f, Functional::Spectrum(_)))
        .collect();
    let summary = summarize(snapshots, config.prior.max_segments, &times, &freqs, &banded, config.grid.level)?;
    for (f, grid) in &summary.means {
        write_grid_csv(dir.join(format!("{}.csv", f.label())), grid)?;
    }
    for band in &summary.bands {
        let label = band.functional.label();
        write_grid_csv(dir.join(format!("{label}_lower.csv")), &band.lower)?;
        write_grid_csv(dir.join(format!("{label}_upper.csv")), &band.upper)?;
    }
    let cp = summary.changepoints;
    let pm = PmFile {
        m: (1..=cp.pm.len()).collect(),
        pm: cp.pm.clone(),
    };
    write_json(dir.join("pm.json"), &pm)?;
    write_json(dir.join("ploc.json"), &cp.ploc)?;
    Ok(cp)
}

/// True functionals of a generated series on the run's lattice.
fn write_truth(dir: &Path, config: &RunConfig, len: usize) -> Result<()> {
    let InputSpec::Generator(g) = &config.input else {
        return Ok(());
    };
    let truth = g.truth(config.prior.n_min, &config.grid.time_grid(len), &config.grid.freq_grid())?;
    for f in all_functionals(truth.dim) {
        write_grid_csv(dir.join(format!("{}.csv", f.label())), &truth.functional(f)?)?;
    }
    Ok(())
}

fn analyze_replicate(config: &RunConfig, root: &Path, r: usize) -> Result<ReplicateReport> {
    let dir = replicate_dir(root, config, r);
    let series = config.series(r)?;
    let mut sampler = config.sampler.clone();
    sampler.seed = config.replicate_seed(r);
    let start = Instant::now();
    let out = run_chain(&series, &config.prior, &sampler)?;
    let seconds = start.elapsed().as_secs_f64();

    if matches!(config.input, InputSpec::Generator(_)) {
        write_series_csv(dir.join("series.csv"), &series)?;
        write_truth(&dir.join("truth"), config, series.len())?;
    }
    let changepoints = write_summary(&dir, config, &out.snapshots)?;
    let d = &out.diagnostics;
    let acceptance = BTreeMap::from([
        ("birth", d.birth.acceptance_rate()),
        ("death", d.death.acceptance_rate()),
        ("relocate", d.relocate.acceptance_rate()),
        ("toggle", d.toggle.acceptance_rate()),
        ("hmc", d.hmc.acceptance_rate()),
    ]);
    write_json(
        dir.join("diagnostics.json"),
        &DiagnosticsFile {
            snapshots: out.snapshots.len(),
            acceptance,
            moves: d,
        },
    )?;
    write_json(
        dir.join("timing.json"),
        &TimingFile {
            iterations: sampler.iterations,
            seconds,
            seconds_per_iteration: seconds / sampler.iterations as f64,
        },
    )?;
    if config.dump_snapshots {
        write_json(
            dir.join("snapshots.json"),
            &SnapshotDump {
                config: config.clone(),
                replicate: r,
                snapshots: out.snapshots,
            },
        )?;
    }
    Ok(ReplicateReport {
        dir,
        changepoints,
        diagnostics: out.diagnostics,
        seconds,
    })
}

/// Run the sampler on every replicate and write all outputs plus `manifest.json`.
pub fn analyze(config: RunConfig, opts: &Options) -> Result<Vec<ReplicateReport>> {
    let (config, root) = resolve(config, opts)?;
    write_json(root.join("manifest.json"), &config)?;
    pool(opts.jobs)?.install(|| {
        (0..config.replicates)
            .into_par_iter()
            .map(|r| analyze_replicate(&config, &root, r))
            .collect()
    })
}

/// Write each replicate's generated series and its true functionals.
pub fn simulate(config: RunConfig, opts: &Options) -> Result<Vec<PathBuf>> {
    if !matches!(config.input, InputSpec::Generator(_)) {
        return Err(Error::Config("simulate needs a generator input".into()));
    }
    let (config, root) = resolve(config, opts)?;
    write_json(root.join("manifest.json"), &config)?;
    pool(opts.jobs)?.install(|| {
        (0..config.replicates)
            .into_par_iter()
            .map(|r| {
                let dir = replicate_dir(&root, &config, r);
                let series = config.series(r)?;
                write_series_csv(dir.join("series.csv"), &series)?;
                write_truth(&dir.join("truth"), &config, series.len())?;
                Ok(dir)
            })
            .collect()
    })
}

/// Recompute the posterior files of a snapshot dump into `out`.
pub fn summarize_dump(dump: impl AsRef<Path>, out: &Path) -> Result<ChangepointPosterior> {
    let dump: SnapshotDump = read_json(dump)?;
    write_summary(out, &dump.config, &dump.snapshots)
}

/// ASE of every auto-spectrum and coherence grid in `truth_dir`, in the order
/// `f11, f22, …, rho21, rho31, …`.
pub fn ase_table(estimate_dir: &Path, truth_dir: &Path) -> Result<Vec<(Functional, f64)>> {
    let dim = (0..)
        .take_while(|&j| truth_dir.join(format!("{}.csv", Functional::Spectrum(j).label())).exists())
        .count();
    if dim == 0 {
        return Err(Error::Data(format!("{}: no f11.csv truth grid", truth_dir.display())));
    }
    all_functionals(dim)
        .into_iter()
        .filter(|f| !matches!(f, Functional::LogSpectrum(_)))
        .map(|f| {
            let name = format!("{}.csv", f.label());
            let truth = read_grid_csv(truth_dir.join(&name))?;
            let estimate = read_grid_csv(estimate_dir.join(&name))?;
            Ok((f, ase(&estimate, &truth)?))
        })
        .collect()
}

/// Two aligned rows: functional labels, then `ASE × 10²`.
pub fn format_ase_table(rows: &[(Functional, f64)]) -> String {
    let labels: Vec<String> = rows.iter().map(|(f, _)| format!("{:>10}", f.label())).collect();
    let values: Vec<String> = rows.iter().map(|(_, v)| format!("{:>10.4}", 100.0 * v)).collect();
    format!("{:<10}{}\n{:<10}{}\n", "", labels.join(""), "ASE x 1e2", values.join(""))
}
