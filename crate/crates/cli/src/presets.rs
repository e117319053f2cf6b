//! The four worked examples as ready-made configurations with their analytic boundaries.

use faer::c64;

use crate::config::ModelConfig;
use crate::CliError;

const EXAMPLE_1: &str = r#"
polynomial = "(3/2)*Y1 + (1/6)*Y2^2*A1 + (1/6)*Y2*Y3*A1*Y3 + A1^2*Y3 + A1 + (1/8)*A1^2"
u = 3
t = 1
n = 1000

[deterministic.A1]
kind = "diag"
values = [2, "2i"]

[grid]
re = [-3.0, 3.0]
im = [-3.0, 3.0]
step = 0.05

[gamma]
kind = "annulus"
r_in = 1.6
r_out = 4.0
match_radius = 0.2
"#;

const EXAMPLE_2: &str = r#"
polynomial = "(1/2)*Y1 + (1/6)*A1*Y2*(A2 + A1 + Y3)*Y2 + A2*Y3*A1 + A1 + (1/2)*A2"
u = 3
t = 2
n = 1000

[deterministic.A1]
kind = "diag"
values = [2, -2.5]

[deterministic.A2]
kind = "gue"
seed = 0

[grid]
re = [-3.5, 3.5]
im = [-1.5, 1.5]
step = 0.05
proxy_n = 100

[gamma]
kind = "annulus"
r_in = 1.5
r_out = 4.0
match_radius = 0.3
"#;

const EXAMPLE_3: &str = r#"
polynomial = "Y1 + A1 + A2 + A1*Y2*A2*Y2 + Y3*A2*Y2"
u = 3
t = 2
n = 1000

[deterministic.A1]
kind = "balanced_sign"

[deterministic.A2]
kind = "diag"
values = [1.5, "-2+2i"]

[grid]
re = [-3.0, 3.0]
im = [-3.0, 3.0]
step = 0.05

[gamma]
kind = "annulus"
r_in = 2.0
r_out = 4.0
match_radius = 0.2
"#;

const EXAMPLE_4: &str = r#"
polynomial = "(1/5)*(Y1+3)*(Y2+A1+2)*(Y3+2) - 2"
u = 3
t = 1
n = 1000

[deterministic.A1]
kind = "diag"
values = ["2i", "-2i"]

[grid]
re = [-3.0, 3.5]
im = [-3.0, 3.0]
step = 0.05

[gamma]
kind = "complement"
eps = 0.2
match_radius = 0.2
"#;

/// A worked example: configuration, analytic spectral boundary and expected outliers.
#[derive(Clone, Debug)]
pub struct Preset {
    pub id: u32,
    pub config: ModelConfig,
    pub expected_outliers: Vec<c64>,
}

impl Preset {
    pub fn load(id: u32) -> Result<Preset, CliError> {
        let (text, expected) = match id {
            1 => (EXAMPLE_1, vec![c64::new(2.5, 0.0), c64::new(-0.5, 2.0)]),
            2 => (EXAMPLE_2, vec![c64::new(2.125, 0.0), c64::new(-2.6, 0.0)]),
            3 => (EXAMPLE_3, vec![c64::new(2.5, 0.0), c64::new(-1.0, 2.0)]),
            4 => (EXAMPLE_4, vec![c64::new(0.4, 2.4), c64::new(0.4, -2.4)]),
            _ => return Err(CliError::UnknownExample(id)),
        };
        let mut config = ModelConfig::from_str_with_format(text, false)?;
        config.output = Some(format!("out/example{id}").into());
        Ok(Preset { id, config, expected_outliers: expected })
    }

    /// Closed polygons tracing the boundary of the limiting spectrum.
    pub fn boundary(&self) -> Vec<Vec<c64>> {
        boundary_curve(self.id)
    }
}

fn sample(k: usize, f: impl Fn(f64) -> c64) -> Vec<c64> {
    (0..k).map(|i| f(std::f64::consts::TAU * i as f64 / k as f64)).collect()
}

pub fn boundary_curve(id: u32) -> Vec<Vec<c64>> {
    let s2 = std::f64::consts::SQRT_2;
    match id {
        1 => vec![sample(360, |t| c64::new(1.5 * t.cos(), 1.5 * t.sin()))],
        2 => vec![sample(360, |t| c64::new(3.0 / (2.0 * s2) * t.cos(), 1.0 / (2.0 * s2) * t.sin()))],
        // |z² − 1|² = |z|² + 1, i.e. r² = 1 + 2 cos 2θ: two lobes meeting at the origin.
        // θ = (π/3)·sin(πs/2) keeps the samples evenly spread where r vanishes.
        3 => [0.0, std::f64::consts::PI]
            .iter()
            .map(|&axis| {
                let lim = std::f64::consts::FRAC_PI_3;
                (0..=360)
                    .map(|i| {
                        let s = -1.0 + 2.0 * i as f64 / 360.0;
                        let th = lim * (std::f64::consts::FRAC_PI_2 * s).sin();
                        let r = (1.0 + 2.0 * (2.0 * th).cos()).max(0.0).sqrt();
                        c64::from_polar(r, axis + th)
                    })
                    .collect()
            })
            .collect(),
        4 => vec![product_set_outline()],
        _ => Vec::new(),
    }
}

/// Outline of `(D(3,1)·D(2,1)·D(2,1))/5 − 2` (closed unit disks), star-shaped about its
/// center `0.4`: the farthest sampled point of the set in each direction.
fn product_set_outline() -> Vec<c64> {
    let center = c64::new(0.4, 0.0);
    let bins = 360;
    let k = 96;
    let circle: Vec<c64> = sample(k, |t| c64::new(t.cos(), t.sin()));
    let mut best = vec![0.0f64; bins];
    for a in &circle {
        for b in &circle {
            for c in &circle {
                let w = (a + 3.0) * (b + 2.0) * (c + 2.0) / 5.0 - 2.0 - center;
                let bin = ((w.arg() + std::f64::consts::PI) / std::f64::consts::TAU * bins as f64) as usize % bins;
                best[bin] = best[bin].max(w.norm());
            }
        }
    }
    (0..bins)
        .map(|i| {
            let th = (i as f64 + 0.5) / bins as f64 * std::f64::consts::TAU - std::f64::consts::PI;
            center + c64::from_polar(best[i], th)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_load() {
        for id in 1..=4 {
            let p = Preset::load(id).unwrap();
            assert_eq!(p.config.n, 1000);
            assert!(!p.boundary().is_empty());
        }
        assert!(matches!(Preset::load(5), Err(CliError::UnknownExample(5))));
        assert!(matches!(Preset::load(0), Err(CliError::UnknownExample(0))));
    }

    #[test]
    fn lobes_satisfy_the_curve() {
        for lobe in boundary_curve(3) {
            for z in lobe {
                let lhs = (z * z - 1.0).norm_sqr();
                assert!((lhs - z.norm_sqr() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn product_outline_extremes() {
        let o = product_set_outline();
        let right = o.iter().map(|z| z.re).fold(f64::MIN, f64::max);
        let left = o.iter().map(|z| z.re).fold(f64::MAX, f64::min);
        // 4·3·3/5 − 2 on the right; every factor has positive real part, so the left end
        // lies between −2 and 2·1·1/5 − 2
        assert!((right - 5.2).abs() < 0.02, "{right}");
        assert!(left > -2.0 && left < -1.55, "{left}");
    }
}
