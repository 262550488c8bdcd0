//! JSON run configuration shared by the command line subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MultivariateSeries;
use crate::posterior::{default_freq_grid, DEFAULT_FREQS};
use crate::priors::PriorConfig;
use crate::sampler::SamplerConfig;
use crate::simgen::{time_index, Generator};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "TVSPEC_OUT";
pub const DEFAULT_OUTPUT: &str = "tvspec-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    /// Numeric CSV, one column per channel.
    Csv { path: PathBuf },
    /// One of the built-in simulation processes, drawn from the run seed.
    Generator(Generator),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Number of equally spaced time points; all `T` when absent.
    pub times: Option<usize>,
    pub freqs: usize,
    /// Credible level of the pointwise bands.
    pub level: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            times: None,
            freqs: DEFAULT_FREQS,
            level: 0.95,
        }
    }
}

impl GridConfig {
    pub fn time_grid(&self, len: usize) -> Vec<usize> {
        match self.times {
            Some(n) if n < len => (1..=n).map(|k| time_index(k as f64 / n as f64, len)).collect(),
            _ => (1..=len).collect(),
        }
    }

    pub fn freq_grid(&self) -> Vec<f64> {
        default_freq_grid(self.freqs)
    }

    fn validate(&self) -> Result<()> {
        if self.times == Some(0) || self.freqs == 0 {
            return Err(Error::Config("grid sizes must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config("level must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputSpec,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub grid: GridConfig,
    /// Independent replicates; replicate `r` uses seed `sampler.seed + r`.
    #[serde(default = "one")]
    pub replicates: usize,
    /// Also write every post-burn-in state to `snapshots.json`.
    #[serde(default)]
    pub dump_snapshots: bool,
    /// Output directory; the command line flag and environment take over when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        self.sampler.validate()?;
        self.grid.validate()
    }

    /// Output directory: `flag`, then the config, then the environment, then the default.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output.clone())
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }

    pub fn replicate_seed(&self, r: usize) -> u64 {
        self.sampler.seed.wrapping_add(r as u64)
    }

    /// Series length and dimension implied by the input, without drawing data.
    pub fn input_shape(&self) -> Result<(usize, usize)> {
        match &self.input {
            InputSpec::Csv { path } => {
                let x = crate::io::load_csv(path)?;
                Ok((x.len(), x.dim()))
            }
            InputSpec::Generator(g) => Ok((g.len(self.prior.n_min)?, g.dim())),
        }
    }

    /// Caps `M` at `⌊T / n_min⌋` and checks the prior against the series length.
    pub fn resolve_prior(&mut self, len: usize) -> Result<()> {
        if len < 2 * self.prior.n_min {
            return Err(Error::Data(format!(
                "series length {len} is shorter than 2 n_min = {}",
                2 * self.prior.n_min
            )));
        }
        self.prior.max_segments = self.prior.max_segments.min(len / self.prior.n_min);
        self.prior.validate(len)
    }

    /// The series of replicate `r`.
    pub fn series(&self, r: usize) -> Result<MultivariateSeries> {
        match &self.input {
            InputSpec::Csv { path } => crate::io::load_csv(path),
            InputSpec::Generator(g) => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.replicate_seed(r));
                // Keep data draws apart from the chain's stream on the same seed.
                rng.set_stream(1);
                g.generate(self.prior.n_min, &mut rng)
            }
        }
    }
}
