use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ncspec::commands::{cmd_example, cmd_outliers, cmd_simulate, cmd_spectrum};
use ncspec::config::{ModelConfig, Overrides};
use ncspec::CliError;

#[derive(Parser)]
#[command(name = "ncspec", version, about = "Spectra and outliers of polynomial random matrix models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the model and write its eigenvalues
    Simulate(Common),
    /// Map the limiting spectrum on a grid
    Spectrum(Common),
    /// Predict, simulate and match outliers in the configured region
    Outliers(Common),
    /// Run the outlier pipeline of a built-in example (1 to 4)
    Example {
        id: u32,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    grid_step: Option<f64>,
    #[arg(long)]
    tol_margin: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { n: self.n, seed: self.seed, out: self.out.clone(), grid_step: self.grid_step, tol_margin: self.tol_margin }
    }

    fn load(&self) -> Result<ModelConfig, CliError> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::Config { field: "--config".into(), message: "a configuration file is required".into() })?;
        let mut cfg = ModelConfig::from_path(path)?;
        cfg.apply(&self.overrides())?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = c.load()?;
            let out = cmd_simulate(&cfg)?;
            println!("{} eigenvalues written to {}", out.eigenvalues.len(), cfg.output_dir().display());
        }
        Command::Spectrum(c) => {
            let cfg = c.load()?;
            let out = cmd_spectrum(&cfg, &[])?;
            println!(
                "{}x{} grid, {:.1}% outside; written to {}",
                out.map.nx,
                out.map.ny,
                100.0 * out.map.outside_fraction(),
                cfg.output_dir().display()
            );
        }
        Command::Outliers(c) => {
            let cfg = c.load()?;
            let report = cmd_outliers(&cfg, &[])?;
            print_report(&report);
        }
        Command::Example { id, common } => {
            if common.config.is_some() {
                return Err(CliError::Config { field: "--config".into(), message: "examples use built-in configurations".into() });
            }
            let (preset, report) = cmd_example(id, &common.overrides())?;
            print_report(&report);
            println!("written to {}", preset.config.output_dir().display());
        }
    }
    Ok(())
}

fn print_report(r: &ncspec_core::outliers::OutlierReport) {
    let (p, e) = r.counts();
    println!("predicted in region: {p}, empirical in region: {e}");
    for pair in &r.pairs {
        println!("  {} ~ {} (distance {:.4})", pair.predicted, pair.empirical, pair.dist);
    }
    if let Some(d) = r.det_ratio_min {
        println!("determinant ratio minimum on the boundary: {d:.6e}");
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
