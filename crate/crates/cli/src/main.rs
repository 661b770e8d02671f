use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndt_lime::bench::{
    export_boundary_grid, export_stability_matrix, run_depth_sweep, run_k_sweep, run_table, ExperimentConfig, Manifest,
};
use ndt_lime::data::TaskKind;

#[derive(Debug, Parser)]
#[command(name = "ndt-lime", version, about = "Local surrogate explanation benchmarks (LR, DT, NDT)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fidelity, stability and regularity for every dataset and surrogate.
    RunTable,
    /// Surrogate fidelity against black-box depth.
    DepthSweep,
    /// Regularity against the neighbour count k.
    KSweep,
    /// Black box, DT and NDT predictions on a lattice around one instance.
    BoundaryGrid,
    /// Pairwise cosine similarities of repeated explanations of one instance.
    StabilityMatrix,
    /// Print the effective configuration as JSON and exit.
    ShowConfig,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Regression,
    Classification,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Regression => TaskKind::Regression,
            TaskArg::Classification => TaskKind::Classification,
        }
    }
}

#[derive(Debug, Args)]
struct Overrides {
    /// JSON configuration file; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Bundled dataset name or CSV path; repeat for several.
    #[arg(long = "dataset", global = true)]
    datasets: Vec<String>,
    /// Target column of CSV datasets (header name or 0-based index).
    #[arg(long, global = true)]
    target: Option<String>,
    #[arg(long, value_enum, global = true)]
    task: Option<TaskArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace files in an existing output directory.
    #[arg(long, global = true)]
    overwrite: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if !self.datasets.is_empty() {
            cfg.datasets = self.datasets.clone();
        }
        if let Some(target) = &self.target {
            cfg.target = Some(target.clone());
        }
        if let Some(task) = self.task {
            cfg.task = Some(task.into());
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if self.overwrite {
            cfg.overwrite = true;
        }
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<Option<Manifest>> {
    let cfg = cli.overrides.resolve()?;
    let manifest = match cli.command {
        Command::RunTable => run_table(&cfg)?,
        Command::DepthSweep => run_depth_sweep(&cfg)?,
        Command::KSweep => run_k_sweep(&cfg)?,
        Command::BoundaryGrid => export_boundary_grid(&cfg)?,
        Command::StabilityMatrix => export_stability_matrix(&cfg)?,
        Command::ShowConfig => {
            println!("{}", cfg.to_json()?);
            return Ok(None);
        }
    };
    Ok(Some(manifest))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(manifest)) => {
            match serde_json::to_string_pretty(&manifest) {
                Ok(text) => println!("{text}"),
                Err(e) => eprintln!("error: {e}"),
            }
            if manifest.is_ok() {
                ExitCode::SUCCESS
            } else {
                for err in &manifest.errors {
                    eprintln!("failed cell: {} {:?} {:?}: {}", err.dataset, err.seed, err.surrogate, err.message);
                }
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
