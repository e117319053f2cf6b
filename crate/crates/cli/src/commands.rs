//! The `simulate`, `spectrum`, `outliers` and `example` pipelines.

use std::path::Path;

use faer::c64;
use ncspec_core::freespec::{HermitizedModel, SpectrumMap};
use ncspec_core::linearize::{linearize, Linearization};
use ncspec_core::ncpoly::{evaluate, MatrixAssignment, NcPolynomial};
use ncspec_core::outliers::{det_ratio, match_outliers, predicted_outliers, OutlierReport};
use ncspec_core::randmat::{self, EnsembleSpec};
use serde_json::json;

use crate::config::{ModelConfig, Overrides};
use crate::presets::Preset;
use crate::svg::Plot;
use crate::CliError;

/// Binds seeded circular samples (stream `j` for `Y_j`) next to the deterministic matrices.
pub fn sample_bindings(cfg: &ModelConfig, deterministic: &MatrixAssignment) -> Result<MatrixAssignment, CliError> {
    let mut a = deterministic.clone();
    for j in 1..=cfg.u {
        let spec = EnsembleSpec { dist: cfg.distribution(j), n: cfg.n, seed: cfg.seed, stream: j as u64 };
        a.bind_circular(j, randmat::sample_iid(&spec))?;
    }
    Ok(a)
}

/// Eigenvalues of `P(X/√N, A)` sorted by real then imaginary part.
pub fn simulate_eigenvalues(cfg: &ModelConfig, poly: &NcPolynomial) -> Result<Vec<c64>, CliError> {
    let a = sample_bindings(cfg, &cfg.deterministic_at(cfg.n)?)?;
    let m = evaluate(poly, &a, 1.0 / (cfg.n as f64).sqrt())?;
    let mut eig = randmat::eigenvalues(m.as_ref())?;
    eig.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    Ok(eig)
}

/// Spectrum map of the limit model, represented by `A'` at dimension `proxy_n`.
pub fn spectrum_map(cfg: &ModelConfig, lin: &Linearization, proxy_n: usize) -> Result<SpectrumMap, CliError> {
    let model = HermitizedModel::new(lin.clone(), &cfg.well_conditioned_at(proxy_n)?)?;
    Ok(model.spectrum_grid(cfg.region(), cfg.grid.step, &cfg.tolerances()))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io { path: dir.display().to_string(), message: e.to_string() })?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::Io { path: path.display().to_string(), message: e.to_string() })
}

pub fn eigenvalues_csv(eig: &[c64]) -> String {
    let mut out = String::from("re,im\n");
    for z in eig {
        out.push_str(&format!("{},{}\n", z.re, z.im));
    }
    out
}

pub struct SimulateOutput {
    pub eigenvalues: Vec<c64>,
}

/// Writes `eigenvalues.csv` and `scatter.svg`.
pub fn cmd_simulate(cfg: &ModelConfig) -> Result<SimulateOutput, CliError> {
    let poly = cfg.polynomial()?;
    let eig = simulate_eigenvalues(cfg, &poly)?;
    let dir = cfg.output_dir();
    write(&dir, "eigenvalues.csv", &eigenvalues_csv(&eig))?;
    let mut plot = Plot::fitting(&eig);
    plot.points(&eig, "black", 1.5);
    write(&dir, "scatter.svg", &plot.finish(&format!("eigenvalues, N = {}", cfg.n)))?;
    Ok(SimulateOutput { eigenvalues: eig })
}

pub struct SpectrumOutput {
    pub map: SpectrumMap,
    /// Fraction of grid nodes whose verdict changes when the proxy dimension is halved.
    pub proxy_disagreement: Option<f64>,
}

fn region_plot(map: &SpectrumMap, overlay: &[Vec<c64>]) -> Plot {
    let mut plot = Plot::new([map.region.re_min, map.region.re_max], [map.region.im_min, map.region.im_max]);
    let inside: Vec<c64> = map.cells.iter().filter(|c| !c.verdict.is_outside()).map(|c| c.z).collect();
    plot.cells(&inside, map.step, "lightgray");
    for curve in overlay {
        plot.curve(curve, "blue", true, false);
    }
    plot
}

/// Writes `spectrum.csv`, `region.svg` and `stability.json`.
pub fn cmd_spectrum(cfg: &ModelConfig, overlay: &[Vec<c64>]) -> Result<SpectrumOutput, CliError> {
    let lin = linearize(&cfg.polynomial()?)?;
    let proxy = cfg.proxy_n();
    let map = spectrum_map(cfg, &lin, proxy)?;
    let proxy_disagreement = if proxy >= 2 && !cfg.uses_files() {
        let half = spectrum_map(cfg, &lin, proxy / 2)?;
        let diff = map.cells.iter().zip(&half.cells).filter(|(a, b)| a.verdict.is_outside() != b.verdict.is_outside()).count();
        Some(diff as f64 / map.cells.len() as f64)
    } else {
        None
    };
    let dir = cfg.output_dir();
    write(&dir, "spectrum.csv", &map.to_csv())?;
    write(&dir, "region.svg", &region_plot(&map, overlay).finish("limiting spectrum (grey)"))?;
    let stability = json!({
        "proxy_n": proxy,
        "half_proxy_n": proxy / 2,
        "disagreement_fraction": proxy_disagreement,
        "outside_fraction": map.outside_fraction(),
    });
    write(&dir, "stability.json", &serde_json::to_string_pretty(&stability).expect("json"))?;
    Ok(SpectrumOutput { map, proxy_disagreement })
}

/// Spectrum map, predicted outliers, simulation, matching and the determinant-ratio condition.
/// Writes `report.json`, `overlay.svg`, `eigenvalues.csv` and `spectrum.csv`.
pub fn cmd_outliers(cfg: &ModelConfig, overlay: &[Vec<c64>]) -> Result<OutlierReport, CliError> {
    let gamma_cfg = cfg
        .gamma
        .as_ref()
        .ok_or_else(|| CliError::Config { field: "gamma".into(), message: "the outliers command needs a region".into() })?;
    let poly = cfg.polynomial()?;
    let lin = linearize(&poly)?;
    let (full, dec) = cfg.decomposition()?;
    let map = spectrum_map(cfg, &lin, cfg.proxy_n())?;
    let dir = cfg.output_dir();
    write(&dir, "spectrum.csv", &map.to_csv())?;
    let gamma = gamma_cfg.gamma(&map);
    let bad = gamma.violations(&map);
    if !bad.is_empty() {
        return Err(CliError::GammaInsideSpectrum { cells: bad });
    }
    let predicted = predicted_outliers(&poly, &full, &map)?;
    let eig = simulate_eigenvalues(cfg, &poly)?;
    let mut report = match_outliers(&eig, &predicted, &gamma, gamma_cfg.match_radius);
    report.det_ratio_min = Some(det_ratio(&poly, &full, dec.well_conditioned(), &gamma.boundary(gamma_cfg.points))?);

    write(&dir, "report.json", &serde_json::to_string_pretty(&report.to_json()).expect("json"))?;
    write(&dir, "eigenvalues.csv", &eigenvalues_csv(&eig))?;
    let mut plot = region_plot(&map, overlay);
    for c in gamma.contours(gamma_cfg.points) {
        plot.curve(&c, "green", true, true);
    }
    plot.points(&eig, "black", 1.5);
    plot.rings(&report.predicted, "red", 6.0);
    let title = format!("N = {}: eigenvalues (black), predicted outliers (red)", cfg.n);
    write(&dir, "overlay.svg", &plot.finish(&title))?;
    Ok(report)
}

/// Runs the outliers pipeline of a preset; the spectrum map is written alongside.
pub fn cmd_example(id: u32, overrides: &Overrides) -> Result<(Preset, OutlierReport), CliError> {
    let mut preset = Preset::load(id)?;
    preset.config.apply(overrides)?;
    let report = cmd_outliers(&preset.config, &preset.boundary())?;
    Ok((preset, report))
}
