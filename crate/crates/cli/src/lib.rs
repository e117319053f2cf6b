//! Configuration-driven front end for `ncspec-core`: simulations, spectrum maps, outlier
//! analyses and the four worked examples, written as CSV, JSON and SVG files.

pub mod commands;
pub mod config;
pub mod presets;
pub mod svg;

use faer::c64;
use ncspec_core::freespec::FreeSpecError;
use ncspec_core::linearize::LinError;
use ncspec_core::ncpoly::PolyError;
use ncspec_core::outliers::OutlierError;
use ncspec_core::randmat::RandMatError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at {field}: {message}")]
    Config { field: String, message: String },
    #[error("unknown example {0}; examples are numbered 1 to 4")]
    UnknownExample(u32),
    #[error("the region contains {} grid nodes that are not outside the spectrum, e.g. {}", cells.len(), preview(cells))]
    GammaInsideSpectrum { cells: Vec<c64> },
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Lin(#[from] LinError),
    #[error(transparent)]
    FreeSpec(#[from] FreeSpecError),
    #[error(transparent)]
    Outlier(#[from] OutlierError),
    #[error(transparent)]
    RandMat(#[from] RandMatError),
}

fn preview(cells: &[c64]) -> String {
    cells.iter().take(5).map(|z| format!("{z}")).collect::<Vec<_>>().join(", ")
}

impl CliError {
    /// 2 for configuration problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::UnknownExample(_) | CliError::GammaInsideSpectrum { .. } => 2,
            _ => 3,
        }
    }
}
