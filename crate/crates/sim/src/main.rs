use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use feel_sim::commands::{evaluate, generate_data};
use feel_sim::formats::describe;
use feel_sim::report::render_report;
use feel_sim::{run_experiment, write_outputs, DataSource, ExperimentConfig, SimError, SimResult};

/// FEEL CSI-feedback simulator.
#[derive(Parser)]
#[command(name = "feel-sim", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// key = value config file; unset keys keep their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides master_seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write one dataset file per UE plus a manifest
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Run the configured experiment and write CSV results
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
        /// Directory written by generate-data; datasets are regenerated in
        /// memory when omitted
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// NMSE of a checkpoint on dataset test splits
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(required = true)]
        datasets: Vec<PathBuf>,
    },
    /// Print the header of a dataset, checkpoint or payload file
    Inspect { file: PathBuf },
}

fn load(common: &Common) -> SimResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

fn dispatch(cmd: Cmd) -> SimResult<()> {
    match cmd {
        Cmd::GenerateData {
            common,
            out,
            overwrite,
        } => {
            let cfg = load(&common)?;
            let entries = generate_data(&cfg, &out, overwrite)?;
            println!("wrote {} dataset files to {}", entries.len(), out.display());
        }
        Cmd::Run {
            common,
            out,
            overwrite,
            data,
        } => {
            let cfg = load(&common)?;
            if out.join("summary.csv").exists() && !overwrite {
                return Err(SimError::Usage(format!(
                    "{} already holds results; pass --overwrite to replace them",
                    out.display()
                )));
            }
            let report = run_experiment(&cfg, &DataSource { dir: data })?;
            write_outputs(&cfg, &report, &out, overwrite)?;
            print!("{}", render_report(&report));
        }
        Cmd::Evaluate {
            common,
            model,
            datasets,
        } => {
            let cfg = load(&common)?;
            print!("{}", evaluate(&cfg, &model, &datasets)?.render());
        }
        Cmd::Inspect { file } => print!("{}", describe(&file)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
