use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tvspec::cli::{self, Options};
use tvspec::config::RunConfig;

#[derive(Parser)]
#[command(name = "tvspec", version, about = "Time-varying spectral matrices of multivariate series by reversible-jump MCMC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `sampler.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Replicates run at once (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (default: config `output`, then $TVSPEC_OUT, then ./tvspec-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn split(self) -> (PathBuf, Options) {
        (
            self.config,
            Options {
                out: self.out,
                seed: self.seed,
                jobs: self.jobs,
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample the posterior and write spectra, bands and change-point posteriors.
    Analyze(RunArgs),
    /// Write generated series and their true spectra.
    Simulate(RunArgs),
    /// Print the average squared error of estimated grids against true grids.
    Ase { estimate: PathBuf, truth: PathBuf },
    /// Recompute posterior outputs from a `snapshots.json` dump.
    Summarize {
        dump: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> tvspec::Result<()> {
    match cli.command {
        Command::Analyze(args) => {
            let (path, opts) = args.split();
            for report in cli::analyze(RunConfig::from_file(path)?, &opts)? {
                let cp = &report.changepoints;
                println!(
                    "{}: mode m = {}, Pr(m) = {:?}, {:.1} s",
                    report.dir.display(),
                    cp.mode_m(),
                    cp.pm,
                    report.seconds
                );
            }
        }
        Command::Simulate(args) => {
            let (path, opts) = args.split();
            for dir in cli::simulate(RunConfig::from_file(path)?, &opts)? {
                println!("{}", dir.display());
            }
        }
        Command::Ase { estimate, truth } => {
            print!("{}", cli::format_ase_table(&cli::ase_table(&estimate, &truth)?));
        }
        Command::Summarize { dump, out } => {
            let cp = cli::summarize_dump(dump, &out)?;
            println!("{}: mode m = {}, Pr(m) = {:?}", out.display(), cp.mode_m(), cp.pm);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tvspec: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
