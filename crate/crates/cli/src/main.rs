use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use sdmq::runner::{self, RunError};
use sdmq::scenario::Scenario;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "sdmq", version, about = "Mode-multiplexed time-bin/phase link simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its report and CSV artifacts.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<u64>,
        /// Output directory; defaults to $SDMQ_OUT/<scenario name>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "SDMQ_OUT", default_value = "out", hide_env_values = true)]
        out_root: PathBuf,
    },
    /// Run a scenario once per parameter value and merge the reports.
    Sweep {
        scenario: PathBuf,
        /// Dotted scenario key, e.g. `sim.mu_in` or `key_rate.n`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "SDMQ_OUT", default_value = "out", hide_env_values = true)]
        out_root: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>, frames: Option<u64>) -> Result<Scenario, RunError> {
    let mut sc = Scenario::load(path)?;
    if let Some(seed) = seed {
        sc.sim.seed = seed;
    }
    if let Some(n) = frames {
        sc.n_frames = n;
    }
    Ok(sc)
}

fn out_dir(sc: &Scenario, path: &Path, out: Option<PathBuf>, root: &Path) -> PathBuf {
    out.or_else(|| sc.out_dir.clone()).unwrap_or_else(|| {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        root.join(stem.unwrap_or_else(|| sc.experiment.name().to_string()))
    })
}

fn real_main(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            frames,
            out,
            out_root,
        } => {
            let sc = load(&scenario, seed, frames)?;
            let dir = out_dir(&sc, &scenario, out, &out_root);
            runner::run(&sc, &dir)?;
        }
        Command::Sweep {
            scenario,
            param,
            values,
            seed,
            frames,
            out,
            out_root,
        } => {
            let sc = load(&scenario, seed, frames)?;
            let dir = out_dir(&sc, &scenario, out, &out_root);
            let csv = runner::sweep(&sc, &param, &values)?;
            std::fs::create_dir_all(&dir).map_err(|source| RunError::Io {
                path: dir.clone(),
                source,
            })?;
            let path = dir.join(format!("sweep_{}.csv", param.replace('.', "_")));
            std::fs::write(&path, csv).map_err(|source| RunError::Io { path, source })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
