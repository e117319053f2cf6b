//! Declarative model configuration, read from TOML or JSON.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use faer::{c64, Mat};
use ncspec_core::freespec::{Region, Tolerances};
use ncspec_core::ncpoly::{parse_polynomial, MatrixAssignment, NcPolynomial};
use ncspec_core::outliers::{Decomposition, Gamma};
use ncspec_core::randmat::{self, DetGenerator, EntryDistribution};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub polynomial: String,
    pub u: usize,
    pub t: usize,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub circular: CircularConfig,
    /// Generator per deterministic letter, keyed `A1`, `A2`, ….
    #[serde(default)]
    pub deterministic: BTreeMap<String, DetSpec>,
    /// Generators of the well-conditioned part `A'`. Letters left out default to `A' = 0`
    /// for `diag` generators (finite rank) and `A' = A` otherwise.
    #[serde(default)]
    pub decomposition: BTreeMap<String, DetSpec>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub tolerances: TolConfig,
    #[serde(default)]
    pub gamma: Option<GammaConfig>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CircularConfig {
    #[serde(default)]
    pub default: Distribution,
    /// Per-letter override, keyed `Y1`, `Y2`, ….
    #[serde(default)]
    pub letters: BTreeMap<String, Distribution>,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    #[default]
    ComplexGaussian,
    RealGaussian,
    Rademacher,
}

impl From<Distribution> for EntryDistribution {
    fn from(d: Distribution) -> Self {
        match d {
            Distribution::ComplexGaussian => EntryDistribution::ComplexGaussian,
            Distribution::RealGaussian => EntryDistribution::RealGaussian,
            Distribution::Rademacher => EntryDistribution::Rademacher,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetSpec {
    /// `diag(values, 0, …, 0)`.
    Diag { values: Vec<ComplexValue> },
    BalancedSign,
    Gue {
        #[serde(default)]
        seed: u64,
    },
    File { path: PathBuf },
    Zero,
}

/// A number or a string such as `"2i"` or `"-2+2i"`.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum ComplexValue {
    Real(f64),
    Text(String),
}

impl ComplexValue {
    fn value(&self) -> Result<c64, String> {
        match self {
            ComplexValue::Real(x) => Ok(c64::new(*x, 0.0)),
            ComplexValue::Text(s) => randmat::parse_complex_token(s).map_err(|e| e.to_string()),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_span")]
    pub re: [f64; 2],
    #[serde(default = "default_span")]
    pub im: [f64; 2],
    #[serde(default = "default_step")]
    pub step: f64,
    /// Dimension of the deterministic proxy used for spectrum maps; defaults to `min(N, 200)`.
    #[serde(default)]
    pub proxy_n: Option<usize>,
}

fn default_span() -> [f64; 2] {
    [-3.0, 3.0]
}

fn default_step() -> f64 {
    0.05
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { re: default_span(), im: default_span(), step: default_step(), proxy_n: None }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TolConfig {
    pub smin_rel: f64,
    pub margin: f64,
    pub edge: f64,
    pub fixed_point: f64,
    pub max_iter: usize,
    pub rank_cutoff: f64,
}

impl Default for TolConfig {
    fn default() -> Self {
        let t = Tolerances::default();
        TolConfig {
            smin_rel: t.smin_rel,
            margin: t.margin,
            edge: t.edge,
            fixed_point: t.fixed_point,
            max_iter: t.max_iter,
            rank_cutoff: 1e-10,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
pub struct GammaConfig {
    #[serde(flatten)]
    pub shape: GammaShape,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_match_radius")]
    pub match_radius: f64,
}

fn default_points() -> usize {
    256
}

fn default_match_radius() -> f64 {
    0.2
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaShape {
    Annulus {
        #[serde(default)]
        center: [f64; 2],
        r_in: f64,
        r_out: f64,
    },
    Rectangle {
        re: [f64; 2],
        im: [f64; 2],
    },
    /// Points at distance at least `eps` from the computed spectrum.
    Complement { eps: f64 },
}

/// Command-line overrides applied on top of a file or preset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub grid_step: Option<f64>,
    pub tol_margin: Option<f64>,
}

fn config_err(field: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Config { field: field.into(), message: message.into() }
}

fn parse_letter(key: &str, prefix: char, count: usize, field: &str) -> Result<usize, CliError> {
    let idx = key
        .strip_prefix(prefix)
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| config_err(format!("{field}.{key}"), format!("expected a letter name like {prefix}1")))?;
    if idx == 0 || idx > count {
        return Err(config_err(format!("{field}.{key}"), format!("letter index outside 1..={count}")));
    }
    Ok(idx)
}

impl ModelConfig {
    pub fn from_str_with_format(text: &str, json: bool) -> Result<Self, CliError> {
        let cfg: ModelConfig = if json {
            serde_json::from_str(text).map_err(|e| config_err("<root>", e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| config_err("<root>", e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err("<file>", format!("{}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::from_str_with_format(&text, json)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(n) = o.n {
            self.n = n;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.output = Some(out.clone());
        }
        if let Some(h) = o.grid_step {
            self.grid.step = h;
        }
        if let Some(m) = o.tol_margin {
            self.tolerances.margin = m;
        }
        self.validate()
    }

    pub fn polynomial(&self) -> Result<NcPolynomial, CliError> {
        parse_polynomial(&self.polynomial, self.u, self.t).map_err(|e| config_err("polynomial", e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.polynomial()?;
        if self.n == 0 {
            return Err(config_err("n", "must be at least 1"));
        }
        for key in self.circular.letters.keys() {
            parse_letter(key, 'Y', self.u, "circular.letters")?;
        }
        for k in 1..=self.t {
            if !self.deterministic.contains_key(&format!("A{k}")) {
                return Err(config_err(format!("deterministic.A{k}"), "letter is not defined"));
            }
        }
        for (table, specs) in [("deterministic", &self.deterministic), ("decomposition", &self.decomposition)] {
            for (key, spec) in specs {
                parse_letter(key, 'A', self.t, table)?;
                if let DetSpec::Diag { values } = spec {
                    if values.len() > self.n {
                        return Err(config_err(
                            format!("{table}.{key}.values"),
                            format!("{} values exceed N = {}", values.len(), self.n),
                        ));
                    }
                    for (i, v) in values.iter().enumerate() {
                        v.value().map_err(|e| config_err(format!("{table}.{key}.values[{i}]"), e))?;
                    }
                }
            }
        }
        let tol = &self.tolerances;
        for (name, v) in [
            ("smin_rel", tol.smin_rel),
            ("margin", tol.margin),
            ("edge", tol.edge),
            ("fixed_point", tol.fixed_point),
            ("rank_cutoff", tol.rank_cutoff),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(format!("tolerances.{name}"), "must be positive"));
            }
        }
        if tol.max_iter == 0 {
            return Err(config_err("tolerances.max_iter", "must be positive"));
        }
        let g = &self.grid;
        if !(g.step > 0.0 && g.step.is_finite()) {
            return Err(config_err("grid.step", "must be positive"));
        }
        if !(g.re[0] <= g.re[1]) || !(g.im[0] <= g.im[1]) {
            return Err(config_err("grid", "ranges must be ordered [min, max]"));
        }
        if g.proxy_n == Some(0) {
            return Err(config_err("grid.proxy_n", "must be at least 1"));
        }
        if let Some(gamma) = &self.gamma {
            let ok = match &gamma.shape {
                GammaShape::Annulus { r_in, r_out, .. } => *r_in >= 0.0 && r_in < r_out,
                GammaShape::Rectangle { re, im } => re[0] < re[1] && im[0] < im[1],
                GammaShape::Complement { eps } => *eps > 0.0,
            };
            if !ok {
                return Err(config_err("gamma", "degenerate region"));
            }
            if gamma.points < 4 {
                return Err(config_err("gamma.points", "need at least 4 boundary points"));
            }
            if !(gamma.match_radius > 0.0) {
                return Err(config_err("gamma.match_radius", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn tolerances(&self) -> Tolerances {
        let t = &self.tolerances;
        Tolerances { smin_rel: t.smin_rel, margin: t.margin, edge: t.edge, fixed_point: t.fixed_point, max_iter: t.max_iter }
    }

    pub fn region(&self) -> Region {
        Region { re_min: self.grid.re[0], re_max: self.grid.re[1], im_min: self.grid.im[0], im_max: self.grid.im[1] }
    }

    /// Whether some matrix is read from a file, which pins the proxy dimension to `N`.
    pub fn uses_files(&self) -> bool {
        self.deterministic.values().chain(self.decomposition.values()).any(|s| matches!(s, DetSpec::File { .. }))
    }

    pub fn proxy_n(&self) -> usize {
        if self.uses_files() {
            return self.n;
        }
        self.grid.proxy_n.unwrap_or(self.n.min(200))
    }

    pub fn distribution(&self, j: usize) -> EntryDistribution {
        self.circular.letters.get(&format!("Y{j}")).copied().unwrap_or(self.circular.default).into()
    }

    fn generate(&self, field: &str, spec: &DetSpec, n: usize) -> Result<Mat<c64>, CliError> {
        let g = match spec {
            DetSpec::Diag { values } => {
                DetGenerator::Diag(values.iter().map(|v| v.value()).collect::<Result<_, _>>().map_err(|e| config_err(field, e))?)
            }
            DetSpec::BalancedSign => DetGenerator::BalancedSign,
            DetSpec::Gue { seed } => DetGenerator::Gue { seed: *seed },
            DetSpec::File { path } => DetGenerator::File(path.clone()),
            DetSpec::Zero => DetGenerator::Zero,
        };
        randmat::generate_deterministic(&g, n).map_err(|e| config_err(field, e.to_string()))
    }

    /// The deterministic matrices `A` at dimension `n`.
    pub fn deterministic_at(&self, n: usize) -> Result<MatrixAssignment, CliError> {
        let mut a = MatrixAssignment::new(n);
        for k in 1..=self.t {
            let key = format!("A{k}");
            let m = self.generate(&format!("deterministic.{key}"), &self.deterministic[&key], n)?;
            a.bind_deterministic(k, m).map_err(|e| config_err(format!("deterministic.{key}"), e.to_string()))?;
        }
        Ok(a)
    }

    /// The well-conditioned part `A'` at dimension `n`.
    pub fn well_conditioned_at(&self, n: usize) -> Result<MatrixAssignment, CliError> {
        let mut a = MatrixAssignment::new(n);
        for k in 1..=self.t {
            let key = format!("A{k}");
            let m = match (self.decomposition.get(&key), &self.deterministic[&key]) {
                (Some(spec), _) => self.generate(&format!("decomposition.{key}"), spec, n)?,
                (None, DetSpec::Diag { .. }) => Mat::zeros(n, n),
                (None, spec) => self.generate(&format!("deterministic.{key}"), spec, n)?,
            };
            a.bind_deterministic(k, m).map_err(|e| config_err(format!("decomposition.{key}"), e.to_string()))?;
        }
        Ok(a)
    }

    pub fn decomposition(&self) -> Result<(MatrixAssignment, Decomposition), CliError> {
        let full = self.deterministic_at(self.n)?;
        let prime = self.well_conditioned_at(self.n)?;
        let dec = Decomposition::from_parts(&full, &prime).map_err(|e| config_err("decomposition", e.to_string()))?;
        Ok((full, dec))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

impl GammaConfig {
    /// The region; a complement is taken against `map`.
    pub fn gamma(&self, map: &ncspec_core::freespec::SpectrumMap) -> Gamma {
        match &self.shape {
            GammaShape::Annulus { center, r_in, r_out } => {
                Gamma::Annulus { center: c64::new(center[0], center[1]), r_in: *r_in, r_out: *r_out }
            }
            GammaShape::Rectangle { re, im } => {
                Gamma::Rectangle(Region { re_min: re[0], re_max: re[1], im_min: im[0], im_max: im[1] })
            }
            GammaShape::Complement { eps } => Gamma::Complement { eps: *eps, map: map.clone() },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
polynomial = "Y1 + A1"
u = 1
t = 1
n = 4

[deterministic.A1]
kind = "diag"
values = [2, "1+1i"]

[gamma]
kind = "annulus"
r_in = 1.5
r_out = 3.0
"#;

    #[test]
    fn toml_and_json_agree() {
        let a = ModelConfig::from_str_with_format(TOY, false).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        let b = ModelConfig::from_str_with_format(&json, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grid.step, 0.05);
        assert_eq!(a.gamma.as_ref().unwrap().points, 256);
        let d = a.deterministic_at(4).unwrap();
        assert_eq!(d.deterministic(1).unwrap()[(1, 1)], c64::new(1.0, 1.0));
        let w = a.well_conditioned_at(4).unwrap();
        assert_eq!(w.deterministic(1).unwrap().norm_l2(), 0.0);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            (TOY.replace("n = 4", "n = 1"), "deterministic.A1.values"),
            (TOY.replace("\"Y1 + A1\"", "\"Y1 + A2\""), "polynomial"),
            (TOY.replace("[deterministic.A1]", "[deterministic.A3]"), "deterministic.A1"),
            (TOY.replace("\"1+1i\"", "\"1+x\""), "deterministic.A1.values[1]"),
            (TOY.replace("r_in = 1.5", "r_in = 3.5"), "gamma"),
            (format!("{TOY}\n[tolerances]\nmargin = -1\n"), "tolerances.margin"),
        ];
        for (text, field) in cases {
            match ModelConfig::from_str_with_format(&text, false) {
                Err(CliError::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
    }

    #[test]
    fn overrides_apply() {
        let mut a = ModelConfig::from_str_with_format(TOY, false).unwrap();
        a.apply(&Overrides { n: Some(8), seed: Some(3), grid_step: Some(0.1), tol_margin: Some(0.05), out: None }).unwrap();
        assert_eq!((a.n, a.seed, a.grid.step, a.tolerances.margin), (8, 3, 0.1, 0.05));
        assert_eq!(a.proxy_n(), 8);
        assert!(a.apply(&Overrides { n: Some(0), ..Default::default() }).is_err());
    }
}
