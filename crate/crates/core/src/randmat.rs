//! Seeded i.i.d. ensembles, deterministic matrix generators and dense spectral routines.

use std::path::PathBuf;

use faer::{c64, Mat, MatRef};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RandMatError {
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("eigen or singular value solver failed to converge")]
    NoConvergence,
    #[error("malformed matrix file: {0}")]
    FileFormat(String),
    #[error("size error: {0}")]
    Size(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryDistribution {
    /// Real and imaginary parts independent N(0, 1/2).
    ComplexGaussian,
    RealGaussian,
    Rademacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnsembleSpec {
    pub dist: EntryDistribution,
    pub n: usize,
    pub seed: u64,
    /// Independent substream, one per sampled matrix.
    pub stream: u64,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// An N×N matrix of unscaled i.i.d. entries with mean 0 and variance 1, filled row by row.
pub fn sample_iid(spec: &EnsembleSpec) -> Mat<c64> {
    let n = spec.n;
    let mut rng = rng_for(spec.seed, spec.stream);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut entries = Vec::with_capacity(n * n);
    for _ in 0..n * n {
        let v = match spec.dist {
            EntryDistribution::ComplexGaussian => {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                c64::new(h * re, h * im)
            }
            EntryDistribution::RealGaussian => c64::new(rng.sample(StandardNormal), 0.0),
            EntryDistribution::Rademacher => c64::new(if rng.random::<bool>() { 1.0 } else { -1.0 }, 0.0),
        };
        entries.push(v);
    }
    Mat::from_fn(n, n, |i, j| entries[i * n + j])
}

fn check_finite(m: MatRef<'_, c64>) -> Result<(), RandMatError> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !(m[(i, j)].re.is_finite() && m[(i, j)].im.is_finite()) {
                return Err(RandMatError::NonFinite);
            }
        }
    }
    Ok(())
}

/// All eigenvalues with multiplicity, in no particular order.
pub fn eigenvalues(m: MatRef<'_, c64>) -> Result<Vec<c64>, RandMatError> {
    check_finite(m)?;
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    linalg::eigenvalues(m).ok_or(RandMatError::NoConvergence)
}

pub fn smallest_singular(m: MatRef<'_, c64>) -> Result<f64, RandMatError> {
    check_finite(m)?;
    linalg::smallest_singular_value(m).ok_or(RandMatError::NoConvergence)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DetGenerator {
    /// `diag(values, 0, …, 0)`.
    Diag(Vec<c64>),
    /// `diag(1, …, 1, −1, …, −1)`, the first ⌈N/2⌉ entries positive.
    BalancedSign,
    /// A Hermitian matrix with off-diagonal entry variance 1/N, spectrum near [−2, 2].
    Gue { seed: u64 },
    /// A matrix read from the CSV format of [`read_matrix_csv`].
    File(PathBuf),
    Zero,
}

pub fn generate_deterministic(g: &DetGenerator, n: usize) -> Result<Mat<c64>, RandMatError> {
    match g {
        DetGenerator::Diag(values) => {
            if values.len() > n {
                return Err(RandMatError::Size(format!("{} diagonal values do not fit in N = {n}", values.len())));
            }
            let mut d = values.clone();
            d.resize(n, c64::new(0.0, 0.0));
            Ok(linalg::diag_matrix(&d))
        }
        DetGenerator::BalancedSign => {
            let d: Vec<c64> = (0..n).map(|i| c64::new(if i < n.div_ceil(2) { 1.0 } else { -1.0 }, 0.0)).collect();
            Ok(linalg::diag_matrix(&d))
        }
        DetGenerator::Gue { seed } => {
            let g = sample_iid(&EnsembleSpec { dist: EntryDistribution::ComplexGaussian, n, seed: *seed, stream: 0 });
            let s = 1.0 / (2.0 * n as f64).sqrt();
            Ok(Mat::from_fn(n, n, |i, j| (g[(i, j)] + g[(j, i)].conj()) * s))
        }
        DetGenerator::File(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| RandMatError::FileFormat(format!("{}: {e}", path.display())))?;
            let m = read_matrix_csv(&text)?;
            if m.nrows() != n {
                return Err(RandMatError::Size(format!("{} holds a {}x{} matrix, N = {n}", path.display(), m.nrows(), m.ncols())));
            }
            Ok(m)
        }
        DetGenerator::Zero => Ok(Mat::zeros(n, n)),
    }
}

/// Parses `a`, `bi`, `a+bi` or `a-bi` (with `i` alone meaning 1i).
pub fn parse_complex_token(token: &str) -> Result<c64, RandMatError> {
    let s = token.trim();
    let bad = || RandMatError::FileFormat(format!("bad complex entry {token:?}"));
    let num = |t: &str| -> Result<f64, RandMatError> {
        match t {
            "" | "+" => Ok(1.0),
            "-" => Ok(-1.0),
            _ => t.parse::<f64>().map_err(|_| bad()),
        }
    };
    if s.is_empty() {
        return Err(bad());
    }
    let Some(body) = s.strip_suffix('i') else {
        return s.parse::<f64>().map(|re| c64::new(re, 0.0)).map_err(|_| bad());
    };
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&k| (bytes[k] == b'+' || bytes[k] == b'-') && !matches!(bytes[k - 1], b'e' | b'E'));
    match split {
        Some(k) => Ok(c64::new(body[..k].parse::<f64>().map_err(|_| bad())?, num(&body[k..])?)),
        None => Ok(c64::new(0.0, num(body)?)),
    }
}

pub fn format_complex_token(c: c64) -> String {
    if c.im == 0.0 {
        format!("{}", c.re)
    } else if c.re == 0.0 {
        format!("{}i", c.im)
    } else if c.im < 0.0 {
        format!("{}-{}i", c.re, -c.im)
    } else {
        format!("{}+{}i", c.re, c.im)
    }
}

/// One matrix row per line, comma-separated complex tokens; blank lines are ignored.
pub fn read_matrix_csv(text: &str) -> Result<Mat<c64>, RandMatError> {
    let rows: Vec<Vec<c64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(parse_complex_token).collect())
        .collect::<Result<_, _>>()?;
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(RandMatError::FileFormat("matrix must be square".into()));
    }
    Ok(Mat::from_fn(n, n, |i, j| rows[i][j]))
}

pub fn write_matrix_csv(m: MatRef<'_, c64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format_complex_token(m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
