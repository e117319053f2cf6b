//! Membership of a point `z` in the limiting spectrum of `P(c, a)`.
//!
//! A point is outside the spectrum when `y_z = (γ − z e₁₁)⊗1 + Σ β⊗a` is invertible and the
//! completely positive map `Δ₁(z)` built from the hermitization `𝒴_z = [[0, y_z], [y_z*, 0]]`
//! and the circular coefficients has spectral radius below one.
//!
//! The limit `a` is represented by finite matrices. Their joint distribution is reduced to
//! weighted "atoms": scalars when the matrices commute and are normal (the common case of
//! diagonal matrices), otherwise one dense block. The radius is computed on the compression
//! of `Δ₁` to the rows and columns touched by the circular coefficients; the other blocks of
//! the map share the same spectral radius or are dominated by it.

use std::collections::BTreeMap;

use faer::linalg::solvers::Solve;
use faer::{c64, Mat, MatRef, Side};
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{self, cone, czero, hermitize, kron};
use crate::linearize::{add_kron, add_kron_identity, LinError, Linearization};
use crate::ncpoly::{DetLetter, MatrixAssignment, PolyError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    /// Invertibility threshold relative to `1 + ‖y_z‖`.
    pub smin_rel: f64,
    pub margin: f64,
    pub edge: f64,
    pub fixed_point: f64,
    pub max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { smin_rel: 1e-8, margin: 0.02, edge: 1e-4, fixed_point: 1e-12, max_iter: 10_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Outside,
    /// `y_z` is not invertible: `z` is an eigenvalue of `P(0, a)`.
    InsideS0,
    /// `y_z` is invertible but the radius of `Δ₁(z)` is not below `1 − margin`.
    InsideRadius,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Outside => "outside",
            Verdict::InsideS0 => "inside_s0",
            Verdict::InsideRadius => "inside_radius",
        }
    }

    pub fn is_outside(&self) -> bool {
        *self == Verdict::Outside
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectrumVerdict {
    pub z: c64,
    pub smin_yz: f64,
    pub delta1_radius: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FreeSpecError {
    #[error("the hermitized base point is singular at z = {z}, x = {x}")]
    SingularBase { z: c64, x: f64 },
    #[error("z = {z} is not outside the spectrum")]
    InsideSpectrum { z: c64 },
    #[error("the model has no circular letters")]
    NoCircularLetters,
    #[error("the imaginary part of the base point is not positive definite")]
    NotUpperHalfPlane,
    #[error("fixed point iteration stopped after {iterations} steps with step norm {step:e}")]
    NoConvergence { iterations: usize, step: f64, last: Vec<c64> },
    #[error("dense eigen or singular value solver failed")]
    Solver,
    #[error(transparent)]
    Lin(#[from] LinError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// One point of the joint distribution of the deterministic matrices, with the matrices each
/// letter takes there (1×1 for scalar atoms).
#[derive(Clone, Debug)]
struct Atom {
    weight: f64,
    dim: usize,
    values: Vec<(DetLetter, Mat<c64>)>,
}

/// A linearized model with a finite-dimensional proxy for the deterministic limit.
#[derive(Clone, Debug)]
pub struct HermitizedModel {
    lin: Linearization,
    a: MatrixAssignment,
    atoms: Vec<Atom>,
    rows: Vec<usize>,
    cols: Vec<usize>,
    /// `ζ_j` restricted to occurrence rows × occurrence columns.
    zeta_subs: Vec<Mat<c64>>,
}

/// Supremum of the spectral radius found by the support-edge continuation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeEstimate {
    pub x: f64,
    /// False when the radius stayed below one on the whole bracket; `x` is then the bracket end.
    pub crossed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subordination {
    pub omega: Mat<c64>,
    pub residual: f64,
    pub iterations: usize,
}

impl HermitizedModel {
    pub fn new(lin: Linearization, a: &MatrixAssignment) -> Result<Self, FreeSpecError> {
        let atoms = atoms_of(&lin, a)?;
        let m = lin.m();
        let zero = czero();
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        for z in lin.zetas() {
            for i in 0..m {
                for j in 0..m {
                    if z[(i, j)] != zero {
                        rows.push(i);
                        cols.push(j);
                    }
                }
            }
        }
        rows.sort_unstable();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        let zeta_subs = lin.zetas().iter().map(|z| Mat::from_fn(rows.len(), cols.len(), |p, q| z[(rows[p], cols[q])])).collect();
        Ok(HermitizedModel { lin, a: a.deterministic_only(), atoms, rows, cols, zeta_subs })
    }

    pub fn linearization(&self) -> &Linearization {
        &self.lin
    }

    /// Dimension of the deterministic proxy matrices.
    pub fn proxy_dim(&self) -> usize {
        self.a.n()
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// Number of circular letter occurrences, the size of the compressed radius problem.
    pub fn compressed_size(&self) -> usize {
        self.rows.len()
    }

    /// `(γ − z e₁₁)⊗I_N + Σ β⊗A` at the proxy dimension.
    pub fn build_yz(&self, z: c64) -> Result<Mat<c64>, FreeSpecError> {
        let n = self.a.n();
        let m = self.lin.m();
        let mut out = Mat::<c64>::zeros(m * n, m * n);
        add_kron_identity(out.as_mut(), self.lin.gamma(), n, cone());
        for i in 0..n {
            out[(i, i)] -= z;
        }
        for (d, b) in self.lin.beta() {
            let op = self.a.operand(crate::ncpoly::Symbol::Deterministic(*d), 1.0)?.to_dense();
            add_kron(out.as_mut(), b.as_ref(), op.as_ref(), cone());
        }
        Ok(out)
    }

    fn yz_atom(&self, atom: &Atom, z: c64) -> Mat<c64> {
        let d = atom.dim;
        let m = self.lin.m();
        let mut out = Mat::<c64>::zeros(m * d, m * d);
        add_kron_identity(out.as_mut(), self.lin.gamma(), d, cone());
        for i in 0..d {
            out[(i, i)] -= z;
        }
        for (letter, v) in &atom.values {
            add_kron(out.as_mut(), self.lin.beta()[letter].as_ref(), v.as_ref(), cone());
        }
        out
    }

    /// `(σ_min(y_z), ‖y_z‖)` over all atoms.
    pub fn yz_singular_range(&self, z: c64) -> Result<(f64, f64), FreeSpecError> {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for atom in &self.atoms {
            let sv = linalg::singular_values(self.yz_atom(atom, z).as_ref()).ok_or(FreeSpecError::Solver)?;
            lo = lo.min(*sv.last().unwrap_or(&0.0));
            hi = hi.max(*sv.first().unwrap_or(&0.0));
        }
        Ok((lo, hi))
    }

    /// `Δ₁(z)` at base point `x·I`, as a (2m)²×(2m)² matrix acting on row-major
    /// vectorizations of 2m×2m matrices.
    pub fn delta1(&self, z: c64, x: f64) -> Result<Mat<c64>, FreeSpecError> {
        let m2 = 2 * self.lin.m();
        let (_, norm) = self.yz_singular_range(z)?;
        let tol = Tolerances::default().smin_rel * (1.0 + norm);
        let mut resolvents = Vec::with_capacity(self.atoms.len());
        for atom in &self.atoms {
            let y = hermitize(self.yz_atom(atom, z).as_ref());
            let ev = linalg::hermitian_eigenvalues(y.as_ref()).ok_or(FreeSpecError::Solver)?;
            if ev.iter().map(|e| (e - x).abs()).fold(f64::INFINITY, f64::min) <= tol {
                return Err(FreeSpecError::SingularBase { z, x });
            }
            let mut shifted = y;
            for i in 0..shifted.nrows() {
                shifted[(i, i)] -= c64::new(x, 0.0);
            }
            resolvents.push((atom.weight, atom.dim, linalg::inverse(shifted.as_ref())));
        }
        let all: Vec<usize> = (0..m2).collect();
        let mut t = Mat::<c64>::zeros(m2 * m2, m2 * m2);
        for (w, d, g) in &resolvents {
            t += faer::Scale(c64::new(*w, 0.0)) * sandwich(g.as_ref(), g.as_ref(), *d, &all, &all);
        }
        Ok(self.eta_matrix(&all) * t)
    }

    fn zs(&self) -> Vec<Mat<c64>> {
        self.lin.zetas().iter().map(|z| hermitize(z.as_ref())).collect()
    }

    /// `Σ_j Z_j ⊗ Z_jᵀ` restricted to indices `s`.
    fn eta_matrix(&self, s: &[usize]) -> Mat<c64> {
        let k = s.len();
        let mut out = Mat::<c64>::zeros(k * k, k * k);
        for z in self.zs() {
            let sub = Mat::from_fn(k, k, |p, q| z[(s[p], s[q])]);
            out += kron(sub.as_ref(), sub.transpose());
        }
        out
    }

    fn eta(&self, b: MatRef<'_, c64>) -> Mat<c64> {
        let mut out = Mat::<c64>::zeros(b.nrows(), b.ncols());
        for z in self.zs() {
            out += &z * b * &z;
        }
        out
    }

    /// The compressed `b ↦ Σ_j ζ_j Φ(y_z⁻¹ (b⊗1) y_z⁻*) ζ_j*` on the occurrence rows.
    fn compressed_operator(&self, z: c64) -> CompressedMap<'_> {
        let k = self.rows.len();
        let kc = self.cols.len();
        let blocks = self
            .atoms
            .iter()
            .map(|atom| {
                let d = atom.dim;
                let y = self.yz_atom(atom, z);
                let rhs = Mat::from_fn(y.nrows(), k * d, |i, j| if i == self.rows[j / d] * d + j % d { cone() } else { czero() });
                let x = y.partial_piv_lu().solve(&rhs);
                let g = Mat::from_fn(kc * d, k * d, |i, j| x[(self.cols[i / d] * d + i % d, j)]);
                (atom.weight, d, g)
            })
            .collect();
        CompressedMap { k, kc, blocks, zetas: &self.zeta_subs }
    }

    /// Matrix of the compressed map acting on row-major vectorizations.
    #[cfg(test)]
    fn compressed_delta(&self, z: c64) -> Result<Mat<c64>, FreeSpecError> {
        Ok(self.compressed_operator(z).dense())
    }

    /// Spectral radius of `Δ₁(z)` at `x = 0`.
    pub fn delta1_radius(&self, z: c64) -> Result<f64, FreeSpecError> {
        if self.rows.is_empty() {
            return Ok(0.0);
        }
        positive_map_radius(&self.compressed_operator(z), None)
    }

    pub fn is_outside_spectrum(&self, z: c64, tol: &Tolerances) -> SpectrumVerdict {
        let (smin, norm) = match self.yz_singular_range(z) {
            Ok(v) => v,
            Err(_) => (0.0, 0.0),
        };
        if !(smin > tol.smin_rel * (1.0 + norm)) {
            return SpectrumVerdict { z, smin_yz: smin, delta1_radius: None, verdict: Verdict::InsideS0 };
        }
        let threshold = 1.0 - tol.margin;
        let radius = if self.rows.is_empty() {
            0.0
        } else {
            positive_map_radius(&self.compressed_operator(z), Some(threshold)).unwrap_or(f64::INFINITY)
        };
        let verdict = if radius < 1.0 - tol.margin { Verdict::Outside } else { Verdict::InsideRadius };
        SpectrumVerdict { z, smin_yz: smin, delta1_radius: Some(radius), verdict }
    }

    pub fn spectrum_grid(&self, region: Region, step: f64, tol: &Tolerances) -> SpectrumMap {
        let nx = grid_count(region.re_min, region.re_max, step);
        let ny = grid_count(region.im_min, region.im_max, step);
        let cells = (0..nx * ny)
            .into_par_iter()
            .map(|idx| {
                let (i, j) = (idx % nx, idx / nx);
                let z = c64::new(region.re_min + i as f64 * step, region.im_min + j as f64 * step);
                self.is_outside_spectrum(z, tol)
            })
            .collect();
        SpectrumMap { region, step, nx, ny, cells }
    }

    /// Subordination weights for `𝒴_z` averaged with `−𝒴_z` (the law of the hermitization is
    /// symmetric).
    fn symmetric_atoms(&self, z: c64) -> Vec<(f64, usize, Mat<c64>)> {
        let mut out = Vec::with_capacity(2 * self.atoms.len());
        for atom in &self.atoms {
            let y = hermitize(self.yz_atom(atom, z).as_ref());
            out.push((atom.weight / 2.0, atom.dim, -&y));
            out.push((atom.weight / 2.0, atom.dim, y));
        }
        out
    }

    /// `ω(b)` solving `ω = b + η(G_𝒴(ω))`, with `G_𝒴(w) = E[(𝒴 − w)⁻¹]`, by fixed point
    /// iteration from `ω = b`.
    pub fn subordination(&self, z: c64, b: MatRef<'_, c64>, tol: &Tolerances) -> Result<Subordination, FreeSpecError> {
        let atoms = self.symmetric_atoms(z);
        subordination_fixed_point(
            |w| Ok(cauchy_transform(&atoms, w)),
            |g| self.eta(g),
            b,
            tol.fixed_point,
            tol.max_iter,
        )
    }

    /// Lower edge of the spectrum of the hermitized linearized model at `z`: continues the
    /// real subordination solution `ω(x) = x + η(G_𝒴(ω(x)))` from `x = 0` until the
    /// linearized map `η ∘ G'_𝒴(ω(x))` reaches spectral radius one.
    pub fn edge_of_support(&self, z: c64, tol: &Tolerances) -> Result<EdgeEstimate, FreeSpecError> {
        if self.rows.is_empty() {
            return Err(FreeSpecError::NoCircularLetters);
        }
        if !self.is_outside_spectrum(z, tol).verdict.is_outside() {
            return Err(FreeSpecError::InsideSpectrum { z });
        }
        let m = self.lin.m();
        let (smin, _) = self.yz_singular_range(z)?;
        let support: Vec<usize> = self.rows.iter().copied().chain(self.cols.iter().map(|c| m + c)).collect();
        let mut support = support;
        support.sort_unstable();
        support.dedup();
        let solver = EdgeSolver { model: self, atoms: self.symmetric_atoms(z), support };

        let mut v = Mat::<c64>::zeros(solver.support.len(), solver.support.len());
        let mut x = 0.0;
        let mut step = smin / 50.0;
        while step > tol.edge / 4.0 {
            if x + step >= smin {
                step = (smin - x) / 2.0;
                if step <= tol.edge / 4.0 {
                    return Ok(EdgeEstimate { x: smin, crossed: false });
                }
            }
            match solver.solve(x + step, v.as_ref()) {
                Some(next) => {
                    x += step;
                    v = next;
                }
                None => step /= 2.0,
            }
        }
        Ok(EdgeEstimate { x: x + step, crossed: true })
    }
}

struct EdgeSolver<'a> {
    model: &'a HermitizedModel,
    atoms: Vec<(f64, usize, Mat<c64>)>,
    support: Vec<usize>,
}

impl EdgeSolver<'_> {
    fn full(&self, x: f64, v: MatRef<'_, c64>) -> Mat<c64> {
        let m2 = 2 * self.model.lin.m();
        let mut w = Mat::<c64>::zeros(m2, m2);
        for (p, &i) in self.support.iter().enumerate() {
            for (q, &j) in self.support.iter().enumerate() {
                w[(i, j)] = v[(p, q)];
            }
            w[(i, i)] += c64::new(x, 0.0);
        }
        for i in 0..m2 {
            if !self.support.contains(&i) {
                w[(i, i)] = c64::new(x, 0.0);
            }
        }
        w
    }

    /// Newton's method for `v = η(G(x + v))` on the support block; `None` unless it converges
    /// to a point where the linearized map still has radius below one.
    fn solve(&self, x: f64, start: MatRef<'_, c64>) -> Option<Mat<c64>> {
        let s = self.support.len();
        let eta_s = self.model.eta_matrix(&self.support);
        let mut v = start.to_owned();
        for _ in 0..60 {
            let w = self.full(x, v.as_ref());
            let gs = self.resolvents(w.as_ref())?;
            let g = expectation(&gs);
            let eg = self.model.eta(g.as_ref());
            let resid = Mat::from_fn(s, s, |p, q| v[(p, q)] - eg[(self.support[p], self.support[q])]);
            let jac = self.jacobian(&gs, &eta_s);
            if resid.norm_max() < 1e-13 * (1.0 + v.norm_max()) {
                let radius = linalg::spectral_radius((Mat::<c64>::identity(s * s, s * s) - &jac).as_ref())?;
                return (radius < 1.0).then_some(v);
            }
            let rhs = Mat::from_fn(s * s, 1, |i, _| -resid[(i / s, i % s)]);
            let delta = jac.partial_piv_lu().solve(&rhs);
            let next = Mat::from_fn(s, s, |p, q| v[(p, q)] + delta[(p * s + q, 0)]);
            if !next.norm_max().is_finite() {
                return None;
            }
            v = Mat::from_fn(s, s, |p, q| (next[(p, q)] + next[(q, p)].conj()) * 0.5);
        }
        None
    }

    fn resolvents(&self, w: MatRef<'_, c64>) -> Option<Vec<(f64, usize, Mat<c64>)>> {
        let mut out = Vec::with_capacity(self.atoms.len());
        for (weight, d, y) in &self.atoms {
            let shifted = y - kron(w, Mat::<c64>::identity(*d, *d).as_ref());
            let lu = shifted.partial_piv_lu();
            if !(linalg::lu_pivot_ratio(&lu) > 1e-13) {
                return None;
            }
            out.push((*weight, *d, lu.solve(Mat::<c64>::identity(shifted.nrows(), shifted.nrows()))));
        }
        Some(out)
    }

    /// `I − η∘G'(w)` on the support block.
    fn jacobian(&self, gs: &[(f64, usize, Mat<c64>)], eta_s: &Mat<c64>) -> Mat<c64> {
        let s = self.support.len();
        let mut t = Mat::<c64>::zeros(s * s, s * s);
        for (w, d, g) in gs {
            t += faer::Scale(c64::new(*w, 0.0)) * sandwich(g.as_ref(), g.as_ref(), *d, &self.support, &self.support);
        }
        Mat::<c64>::identity(s * s, s * s) - eta_s * t
    }
}

/// `E[(𝒴 − w)⁻¹]` over weighted atoms, `Φ` being the normalized partial trace.
pub fn cauchy_transform(atoms: &[(f64, usize, Mat<c64>)], w: MatRef<'_, c64>) -> Mat<c64> {
    let gs: Vec<(f64, usize, Mat<c64>)> = atoms
        .iter()
        .map(|(weight, d, y)| {
            let shifted = y - kron(w, Mat::<c64>::identity(*d, *d).as_ref());
            (*weight, *d, linalg::inverse(shifted.as_ref()))
        })
        .collect();
    expectation(&gs)
}

fn expectation(gs: &[(f64, usize, Mat<c64>)]) -> Mat<c64> {
    let n = gs.first().map(|(_, d, g)| g.nrows() / d).unwrap_or(0);
    let mut out = Mat::<c64>::zeros(n, n);
    for (w, d, g) in gs {
        let s = *w / *d as f64;
        for p in 0..n {
            for q in 0..n {
                let tr: c64 = (0..*d).map(|a| g[(p * d + a, q * d + a)]).sum();
                out[(p, q)] += tr * s;
            }
        }
    }
    out
}

/// Fixed point iteration `w ← b + η(G(w))` from `w = b`; the imaginary part of `b` must be
/// positive definite.
pub fn subordination_fixed_point(
    cauchy: impl Fn(MatRef<'_, c64>) -> Result<Mat<c64>, FreeSpecError>,
    eta: impl Fn(MatRef<'_, c64>) -> Mat<c64>,
    b: MatRef<'_, c64>,
    tol: f64,
    max_iter: usize,
) -> Result<Subordination, FreeSpecError> {
    let n = b.nrows();
    let im = Mat::from_fn(n, n, |i, j| (b[(i, j)] - b[(j, i)].conj()) * c64::new(0.0, -0.5));
    let ev = linalg::hermitian_eigenvalues(im.as_ref()).ok_or(FreeSpecError::Solver)?;
    if ev.first().is_none_or(|e| *e <= 0.0) {
        return Err(FreeSpecError::NotUpperHalfPlane);
    }
    let mut w = b.to_owned();
    let mut step = f64::INFINITY;
    for it in 1..=max_iter {
        let next = b + eta(cauchy(w.as_ref())?.as_ref());
        step = (&next - &w).norm_l2();
        w = next;
        if step < tol {
            let residual = (&w - eta(cauchy(w.as_ref())?.as_ref()) - b).norm_l2();
            return Ok(Subordination { omega: w, residual, iterations: it });
        }
    }
    let last = (0..n * n).map(|i| w[(i / n, i % n)]).collect();
    Err(FreeSpecError::NoConvergence { iterations: max_iter, step, last })
}

/// Matrix of `b ↦ Φ(L (b⊗1) R)` for `L`, `R` made of d×d blocks, restricted to output
/// indices `out` and input indices `inp` (row-major vectorization).
fn sandwich(l: MatRef<'_, c64>, r: MatRef<'_, c64>, d: usize, out: &[usize], inp: &[usize]) -> Mat<c64> {
    let (ko, ki) = (out.len(), inp.len());
    if d == 1 {
        return Mat::from_fn(ko * ko, ki * ki, |row, col| {
            let (p, q) = (out[row / ko], out[row % ko]);
            let (s, t) = (inp[col / ki], inp[col % ki]);
            l[(p, s)] * r[(t, q)]
        });
    }
    // S[(p,s),(t,q)] = Σ_{αβ} L_ps[α,β] R_tq[β,α]
    let wl = Mat::from_fn(ko * ki, d * d, |row, col| {
        let (p, s) = (out[row / ki], inp[row % ki]);
        l[(p * d + col / d, s * d + col % d)]
    });
    let wr = Mat::from_fn(ki * ko, d * d, |row, col| {
        let (t, q) = (inp[row / ko], out[row % ko]);
        r[(t * d + col % d, q * d + col / d)]
    });
    let s = wl * wr.transpose();
    let inv_d = 1.0 / d as f64;
    Mat::from_fn(ko * ko, ki * ki, |row, col| {
        let (p, q) = (row / ko, row % ko);
        let (si, ti) = (col / ki, col % ki);
        s[(p * ki + si, ti * ko + q)] * inv_d
    })
}

struct CompressedMap<'a> {
    k: usize,
    kc: usize,
    blocks: Vec<(f64, usize, Mat<c64>)>,
    zetas: &'a [Mat<c64>],
}

impl CompressedMap<'_> {
    fn apply(&self, x: MatRef<'_, c64>) -> Mat<c64> {
        let kc = self.kc;
        let mut acc = Mat::<c64>::zeros(kc, kc);
        for (w, d, g) in &self.blocks {
            let d = *d;
            if d == 1 {
                acc += faer::Scale(c64::new(*w, 0.0)) * (g * x * g.adjoint());
            } else {
                let xd = Mat::from_fn(self.k * d, self.k * d, |i, j| if i % d == j % d { x[(i / d, j / d)] } else { czero() });
                let full = g * xd * g.adjoint();
                let scale = *w / d as f64;
                for p in 0..kc {
                    for q in 0..kc {
                        let mut t = czero();
                        for a in 0..d {
                            t += full[(p * d + a, q * d + a)];
                        }
                        acc[(p, q)] += t * scale;
                    }
                }
            }
        }
        let mut out = Mat::<c64>::zeros(self.k, self.k);
        for z in self.zetas {
            out += z * &acc * z.adjoint();
        }
        out
    }

    fn dense(&self) -> Mat<c64> {
        let (k, kc) = (self.k, self.kc);
        let mut inner = Mat::<c64>::zeros(kc * kc, k * k);
        let rows: Vec<usize> = (0..k).collect();
        let cols: Vec<usize> = (0..kc).collect();
        for (w, d, g) in &self.blocks {
            let scale = faer::Scale(c64::new(*w, 0.0));
            if *d == 1 {
                inner += scale * kron(g.as_ref(), g.conjugate().to_owned().as_ref());
            } else {
                inner += scale * sandwich(g.as_ref(), g.adjoint().to_owned().as_ref(), *d, &cols, &rows);
            }
        }
        let mut outer = Mat::<c64>::zeros(k * k, kc * kc);
        for z in self.zetas {
            outer += kron(z.as_ref(), z.conjugate().to_owned().as_ref());
        }
        outer * inner
    }
}

/// Spectral radius of a positive map on k×k matrices.
///
/// Small maps use a dense eigensolver. Larger ones use power iteration on the positive cone
/// with the two-sided bound `λ_min(X^{-1/2} Δ(X) X^{-1/2}) ≤ r ≤ λ_max(…)`, falling back to
/// the dense solver when the bounds do not close. The iteration runs on `Δ + s·id`, whose
/// radius is `r + s`, so that the iterate stays positive definite when `Δ` has low rank.
/// With a `threshold` it stops as soon as the bounds lie on one side of it and returns the
/// bound on that side. The lower bound does not close when the Perron vector is singular, so
/// a settled growth ratio above the threshold is also accepted.
fn positive_map_radius(map: &CompressedMap<'_>, threshold: Option<f64>) -> Result<f64, FreeSpecError> {
    let k = map.k;
    if k <= 10 {
        return linalg::spectral_radius(map.dense().as_ref()).ok_or(FreeSpecError::Solver);
    }
    let mut x = Mat::<c64>::identity(k, k);
    let shift = 0.1 * map.apply(x.as_ref()).norm_l2() / (k as f64).sqrt();
    let mut prev_ratio = f64::NAN;
    for _ in 0..2000 {
        let y = map.apply(x.as_ref()) + faer::Scale(c64::new(shift, 0.0)) * &x;
        let ratio = y.norm_l2() / x.norm_l2() - shift;
        let y = Mat::from_fn(k, k, |p, q| (y[(p, q)] + y[(q, p)].conj()) * 0.5);
        let Ok(eig) = x.self_adjoint_eigen(Side::Lower) else { break };
        let (u, s) = (eig.U(), eig.S());
        let lam: Vec<f64> = (0..k).map(|i| s[i].re).collect();
        if lam[0] <= 0.0 {
            break;
        }
        let isq = Mat::from_fn(k, k, |i, j| if i == j { c64::new(1.0 / lam[i].sqrt(), 0.0) } else { czero() });
        let xi = u * isq * u.adjoint();
        let rel = &xi * &y * &xi;
        let rel = Mat::from_fn(k, k, |p, q| (rel[(p, q)] + rel[(q, p)].conj()) * 0.5);
        let Some(bounds) = linalg::hermitian_eigenvalues(rel.as_ref()) else { break };
        let (lo, hi) = (bounds[0] - shift, bounds[k - 1] - shift);
        if hi - lo <= 1e-10 * hi.abs().max(1e-300) {
            return Ok(0.5 * (lo + hi));
        }
        match threshold {
            Some(t) if hi < t => return Ok(hi),
            Some(t) if lo > t => return Ok(lo),
            Some(t) if ratio > t && (ratio - prev_ratio).abs() < 1e-6 * ratio => return Ok(ratio),
            _ => {}
        }
        prev_ratio = ratio;
        let norm = y.norm_l2();
        if !(norm > 0.0) || !norm.is_finite() {
            break;
        }
        x = faer::Scale(c64::new(1.0 / norm, 0.0)) * y;
    }
    linalg::spectral_radius(map.dense().as_ref()).ok_or(FreeSpecError::Solver)
}

fn grid_count(lo: f64, hi: f64, step: f64) -> usize {
    if !(hi > lo) || !(step > 0.0) {
        return 1;
    }
    ((hi - lo) / step + 1e-9).floor() as usize + 1
}

/// An axis-aligned rectangle of the complex plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
}

impl Region {
    pub fn square(half_width: f64) -> Self {
        Region { re_min: -half_width, re_max: half_width, im_min: -half_width, im_max: half_width }
    }

    pub fn contains(&self, z: c64) -> bool {
        z.re >= self.re_min && z.re <= self.re_max && z.im >= self.im_min && z.im <= self.im_max
    }
}

/// Verdicts on the nodes `re_min + i·step + (im_min + j·step)·i` of a region.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumMap {
    pub region: Region,
    pub step: f64,
    pub nx: usize,
    pub ny: usize,
    /// Node `(i, j)` is stored at `j·nx + i`.
    pub cells: Vec<SpectrumVerdict>,
}

impl SpectrumMap {
    pub fn node(&self, i: usize, j: usize) -> &SpectrumVerdict {
        &self.cells[j * self.nx + i]
    }

    pub fn node_z(&self, i: usize, j: usize) -> c64 {
        c64::new(self.region.re_min + i as f64 * self.step, self.region.im_min + j as f64 * self.step)
    }

    /// Lower-left node of the grid cell containing `z`, if the cell lies in the map.
    pub fn cell_of(&self, z: c64) -> Option<(usize, usize)> {
        let fi = (z.re - self.region.re_min) / self.step;
        let fj = (z.im - self.region.im_min) / self.step;
        if !(fi >= 0.0 && fj >= 0.0) {
            return None;
        }
        let (mut i, mut j) = (fi.floor() as usize, fj.floor() as usize);
        if i + 1 == self.nx && fi - i as f64 <= 1e-9 {
            i = i.saturating_sub(1);
        }
        if j + 1 == self.ny && fj - j as f64 <= 1e-9 {
            j = j.saturating_sub(1);
        }
        (i + 1 < self.nx && j + 1 < self.ny).then_some((i, j))
    }

    /// The four corner verdicts of the cell with lower-left node `(i, j)`.
    pub fn cell_corners(&self, i: usize, j: usize) -> [&SpectrumVerdict; 4] {
        [self.node(i, j), self.node(i + 1, j), self.node(i, j + 1), self.node(i + 1, j + 1)]
    }

    pub fn outside_fraction(&self) -> f64 {
        self.cells.iter().filter(|c| c.verdict.is_outside()).count() as f64 / self.cells.len() as f64
    }

    /// CSV with columns `re, im, smin_yz, delta1_radius, verdict`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("re,im,smin_yz,delta1_radius,verdict\n");
        for c in &self.cells {
            let r = c.delta1_radius.map(|r| format!("{r:.12e}")).unwrap_or_default();
            out.push_str(&format!("{},{},{:.12e},{},{}\n", c.z.re, c.z.im, c.smin_yz, r, c.verdict.as_str()));
        }
        out
    }
}

/// Reduces the deterministic matrices bound to the letters of `lin` to weighted atoms.
fn atoms_of(lin: &Linearization, a: &MatrixAssignment) -> Result<Vec<Atom>, FreeSpecError> {
    let letters: Vec<DetLetter> = lin.beta().keys().copied().collect();
    if letters.is_empty() {
        return Ok(vec![Atom { weight: 1.0, dim: 1, values: Vec::new() }]);
    }
    let mut indices: Vec<usize> = letters.iter().map(|d| d.index).collect();
    indices.dedup();
    let mats: BTreeMap<usize, &Mat<c64>> = indices
        .iter()
        .map(|&k| {
            a.deterministic(k)
                .map(|m| (k, m))
                .ok_or_else(|| FreeSpecError::Poly(PolyError::MissingBinding(format!("A{k}"))))
        })
        .collect::<Result<_, _>>()?;
    let n = a.n();

    let diagonal = mats.values().all(|m| linalg::is_diagonal(m.as_ref()));
    let diagonals: Option<BTreeMap<usize, Vec<c64>>> = if diagonal {
        Some(mats.iter().map(|(k, m)| (*k, (0..n).map(|i| m[(i, i)]).collect())).collect())
    } else {
        joint_diagonalization(&mats, n)
    };
    let Some(diagonals) = diagonals else {
        let values = letters
            .iter()
            .map(|d| {
                let m = mats[&d.index];
                (*d, if d.starred { m.adjoint().to_owned() } else { (*m).clone() })
            })
            .collect();
        return Ok(vec![Atom { weight: 1.0, dim: n, values }]);
    };
    // Group equal joint values; rounding merges values that differ only by round-off.
    let key = |z: c64| ((z.re * 1e10).round() as i64, (z.im * 1e10).round() as i64);
    let mut groups: BTreeMap<Vec<(i64, i64)>, (usize, Vec<c64>)> = BTreeMap::new();
    for i in 0..n {
        let vals: Vec<c64> = indices.iter().map(|k| diagonals[k][i]).collect();
        let entry = groups.entry(vals.iter().map(|v| key(*v)).collect()).or_insert((0, vals));
        entry.0 += 1;
    }
    Ok(groups
        .into_values()
        .map(|(count, vals)| Atom {
            weight: count as f64 / n as f64,
            dim: 1,
            values: letters
                .iter()
                .map(|d| {
                    let v = vals[indices.iter().position(|k| *k == d.index).unwrap()];
                    (*d, Mat::from_fn(1, 1, |_, _| if d.starred { v.conj() } else { v }))
                })
                .collect(),
        })
        .collect())
}

/// Simultaneous unitary diagonalization of commuting normal matrices, if they are.
fn joint_diagonalization(mats: &BTreeMap<usize, &Mat<c64>>, n: usize) -> Option<BTreeMap<usize, Vec<c64>>> {
    let scale: f64 = mats.values().map(|m| m.norm_l2()).fold(1.0, f64::max);
    let tol = 1e-10 * scale * scale;
    for m in mats.values() {
        let ma = m.adjoint();
        if (*m * ma - ma * *m).norm_l2() > tol {
            return None;
        }
        for o in mats.values() {
            if (*m * *o - *o * *m).norm_l2() > tol {
                return None;
            }
        }
    }
    let mut h = Mat::<c64>::zeros(n, n);
    for (idx, (_, m)) in mats.iter().enumerate() {
        let (alpha, beta) = (1.0 / (1.0 + idx as f64 * 0.754_877), 1.0 / (std::f64::consts::PI + idx as f64));
        h += Mat::from_fn(n, n, |i, j| {
            let (x, y) = (m[(i, j)], m[(j, i)].conj());
            (x + y) * alpha + (x - y) * c64::new(0.0, beta)
        });
    }
    let eig = h.self_adjoint_eigen(Side::Lower).ok()?;
    let u = eig.U();
    let mut out = BTreeMap::new();
    for (k, m) in mats {
        let d = u.adjoint() * *m * u;
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| d[(i, j)].norm_sqr()).sum();
        if off.sqrt() > 1e-8 * (1.0 + m.norm_l2()) {
            return None;
        }
        out.insert(*k, (0..n).map(|i| d[(i, i)]).collect());
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearize::{eval_resolvent, linearize};
    use crate::ncpoly::parse_polynomial;

    fn c(re: f64, im: f64) -> c64 {
        c64::new(re, im)
    }

    fn model(text: &str, u: usize, t: usize, a: &MatrixAssignment) -> HermitizedModel {
        let p = parse_polynomial(text, u, t).unwrap();
        HermitizedModel::new(linearize(&p).unwrap(), a).unwrap()
    }

    fn diag_assignment(diags: &[&[c64]]) -> MatrixAssignment {
        let n = diags.first().map(|d| d.len()).unwrap_or(1);
        let mut a = MatrixAssignment::new(n);
        for (k, d) in diags.iter().enumerate() {
            a.bind_deterministic(k + 1, linalg::diag_matrix(d)).unwrap();
        }
        a
    }

    #[test]
    fn yz_matches_negated_resolvent() {
        let a = diag_assignment(&[&[c(1.0, 0.0), c(2.0, 1.0)]]);
        let p = parse_polynomial("Y1*A1 + A1* + 0.5", 1, 1).unwrap();
        let lin = linearize(&p).unwrap();
        let h = HermitizedModel::new(lin.clone(), &a).unwrap();
        let z = c(0.3, -1.2);
        let mut full = a.clone();
        full.bind_circular(1, Mat::zeros(2, 2)).unwrap();
        let k = eval_resolvent(&lin, &full, 1.0, z).unwrap();
        assert!((h.build_yz(z).unwrap() + k).norm_l2() < 1e-14);
    }

    #[test]
    fn yz_singular_exactly_at_eigenvalues() {
        let a = diag_assignment(&[&[c(1.0, 0.0), c(2.0, 0.0)]]);
        let h = model("A1", 0, 1, &a);
        let v = h.is_outside_spectrum(c(1.0, 0.0), &Tolerances::default());
        assert_eq!(v.verdict, Verdict::InsideS0);
        assert!(v.smin_yz < 1e-14 && v.delta1_radius.is_none());
        let v = h.is_outside_spectrum(c(5.0, 0.0), &Tolerances::default());
        assert_eq!(v.verdict, Verdict::Outside);
        assert_eq!(v.delta1_radius, Some(0.0));

        let h = model("Y1", 1, 0, &MatrixAssignment::new(1));
        let y = h.build_yz(c(2.0, 0.0)).unwrap();
        assert_eq!(y.nrows(), 3);
        assert!((y.determinant().norm() - 2.0).abs() < 1e-14);
        assert_eq!(h.is_outside_spectrum(c(0.0, 0.0), &Tolerances::default()).verdict, Verdict::InsideS0);
    }

    #[test]
    fn circular_radius_is_inverse_square_modulus() {
        let h = model("Y1", 1, 0, &MatrixAssignment::new(1));
        for z in [c(2.0, 0.0), c(0.5, 0.0), c(0.3, 1.1), c(-1.7, -0.2)] {
            let r = h.delta1_radius(z).unwrap();
            assert!((r - 1.0 / z.norm_sqr()).abs() < 1e-12 / z.norm_sqr(), "{z} {r}");
            let full = linalg::spectral_radius(h.delta1(z, 0.0).unwrap().as_ref()).unwrap();
            assert!((full - r).abs() < 1e-10 * r);
        }
        let tol = Tolerances::default();
        let v = h.is_outside_spectrum(c(2.0, 0.0), &tol);
        assert_eq!(v.verdict, Verdict::Outside);
        assert!((v.delta1_radius.unwrap() - 0.25).abs() < 1e-14);
        let v = h.is_outside_spectrum(c(0.5, 0.0), &tol);
        assert_eq!(v.verdict, Verdict::InsideRadius);
        assert!((v.delta1_radius.unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn no_circular_letters_gives_zero_map() {
        let a = diag_assignment(&[&[c(1.0, 0.0), c(2.0, 0.0)]]);
        let h = model("A1", 0, 1, &a);
        let d = h.delta1(c(5.0, 0.0), 0.0).unwrap();
        assert_eq!(d.norm_l2(), 0.0);
    }

    #[test]
    fn compressed_radius_matches_full_map() {
        let a = diag_assignment(&[
            &[c(1.0, 0.0), c(-1.0, 0.0), c(0.5, 0.5), c(1.0, 0.0)],
            &[c(0.0, 0.0), c(0.2, 0.0), c(0.0, -1.0), c(0.0, 0.0)],
        ]);
        let h = model("Y1 + A1*Y2*A2 + Y2*Y1 - (1/2)*A2*Y1*A1*", 2, 2, &a);
        for z in [c(2.0, 0.5), c(0.4, -0.3), c(-1.5, 2.0)] {
            let r = h.delta1_radius(z).unwrap();
            let full = linalg::spectral_radius(h.delta1(z, 0.0).unwrap().as_ref()).unwrap();
            assert!((full - r).abs() < 1e-9 * (1.0 + r), "{z}: {r} vs {full}");
        }
    }

    #[test]
    fn atom_kinds_agree() {
        // a diagonal proxy, the same proxy in a rotated basis, and a non-normal dense proxy
        let d = [c(1.0, 0.0), c(-1.0, 0.0), c(0.5, 0.0)];
        let a = diag_assignment(&[&d]);
        let h_diag = model("Y1*A1 + A1 + Y1", 1, 1, &a);
        assert_eq!(h_diag.atom_count(), 3);
        let theta = 0.4f64;
        let u = Mat::from_fn(3, 3, |i, j| match (i, j) {
            (0, 0) | (1, 1) => c(theta.cos(), 0.0),
            (0, 1) => c(-theta.sin(), 0.0),
            (1, 0) => c(theta.sin(), 0.0),
            (2, 2) => c(1.0, 0.0),
            _ => c(0.0, 0.0),
        });
        let rotated = &u * linalg::diag_matrix(&d) * u.adjoint();
        let b = MatrixAssignment::new(3).with_deterministic(1, rotated.clone()).unwrap();
        let h_rot = model("Y1*A1 + A1 + Y1", 1, 1, &b);
        assert_eq!(h_rot.atom_count(), 3);
        let mut dense = rotated.clone();
        dense[(0, 2)] += c(1e-3, 0.0);
        let e = MatrixAssignment::new(3).with_deterministic(1, dense).unwrap();
        let h_dense = model("Y1*A1 + A1 + Y1", 1, 1, &e);
        assert_eq!(h_dense.atom_count(), 1);
        for z in [c(2.5, 0.3), c(0.1, 1.7)] {
            let r1 = h_diag.delta1_radius(z).unwrap();
            let r2 = h_rot.delta1_radius(z).unwrap();
            let r3 = h_dense.delta1_radius(z).unwrap();
            let full = linalg::spectral_radius(h_dense.delta1(z, 0.0).unwrap().as_ref()).unwrap();
            assert!((r1 - r2).abs() < 1e-8 * r1);
            assert!((r1 - r3).abs() < 1e-2 * r1);
            assert!((r3 - full).abs() < 1e-9 * r3);
        }
    }

    #[test]
    fn power_iteration_matches_dense_radius() {
        let p = parse_polynomial("(1/5)*(Y1+3)*(Y2+A1+2)*(Y3+2) - 2", 3, 1).unwrap();
        let lin = linearize(&p).unwrap();
        let a = diag_assignment(&[&[c(0.0, 1.0), c(0.0, -1.0), c(0.5, 0.0)]]);
        let h = HermitizedModel::new(lin, &a).unwrap();
        assert!(h.compressed_size() > 10);
        for z in [c(3.0, 0.0), c(0.5, 0.5), c(-2.0, 2.4)] {
            let d = h.compressed_delta(z).unwrap();
            let dense = linalg::spectral_radius(d.as_ref()).unwrap();
            let r = h.delta1_radius(z).unwrap();
            assert!((r - dense).abs() < 1e-7 * dense, "{z}: {r} vs {dense}");
        }
    }

    #[test]
    fn grid_shapes() {
        let h = model("Y1", 1, 0, &MatrixAssignment::new(1));
        let tol = Tolerances::default();
        let map = h.spectrum_grid(Region::square(2.0), 0.05, &tol);
        assert_eq!((map.nx, map.ny), (81, 81));
        for cell in &map.cells {
            let r = cell.z.norm();
            if (r - 1.0).abs() >= 0.05 {
                assert_eq!(cell.verdict.is_outside(), r > 1.0, "{}", cell.z);
            }
        }
        let tiny = h.spectrum_grid(Region { re_min: 1.5, re_max: 1.6, im_min: 0.0, im_max: 0.1 }, 1.0, &tol);
        assert_eq!(tiny.cells.len(), 1);
        assert!(tiny.cell_of(c(1.55, 0.05)).is_none());
        assert_eq!(map.cell_of(c(0.01, 0.01)), Some((40, 40)));
        assert_eq!(map.cell_of(c(2.0, 2.0)), Some((79, 79)));
        assert!(map.cell_of(c(2.1, 0.0)).is_none());
        assert!(map.to_csv().lines().count() == 81 * 81 + 1);
    }

    #[test]
    fn scalar_subordination_probe() {
        let atoms = vec![
            (0.5, 1, Mat::from_fn(1, 1, |_, _| c(1.0, 0.0))),
            (0.5, 1, Mat::from_fn(1, 1, |_, _| c(-1.0, 0.0))),
        ];
        let b = Mat::from_fn(1, 1, |_, _| c(0.0, 3.0));
        let out = subordination_fixed_point(|w| Ok(cauchy_transform(&atoms, w)), |g| g.to_owned(), b.as_ref(), 1e-12, 10_000)
            .unwrap();
        let w = out.omega[(0, 0)];
        assert!(w.im > 0.0);
        assert!((w - (c(0.0, 3.0) + w / (c(1.0, 0.0) - w * w))).norm() < 1e-10);
        assert!(out.residual < 1e-10);
    }

    #[test]
    fn subordination_without_circulars_is_identity() {
        let a = diag_assignment(&[&[c(1.0, 0.0), c(2.0, 0.0)]]);
        let h = model("A1", 0, 1, &a);
        let m2 = 2 * h.linearization().m();
        let b = Mat::from_fn(m2, m2, |i, j| if i == j { c(0.1 * i as f64, 1.0) } else { c(0.05, 0.0) });
        let out = h.subordination(c(3.0, 0.0), b.as_ref(), &Tolerances::default()).unwrap();
        assert_eq!(out.omega, b);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn subordination_residual_is_small() {
        let h = model("Y1", 1, 0, &MatrixAssignment::new(1));
        let b = Mat::from_fn(6, 6, |i, j| if i == j { c(0.2, 0.8) } else { c(0.0, 0.0) });
        let out = h.subordination(c(1.5, 0.2), b.as_ref(), &Tolerances::default()).unwrap();
        assert!(out.residual < 1e-10);
        let lower = Mat::from_fn(6, 6, |i, j| if i == j { c(0.0, -1.0) } else { c(0.0, 0.0) });
        assert_eq!(
            h.subordination(c(1.5, 0.2), lower.as_ref(), &Tolerances::default()),
            Err(FreeSpecError::NotUpperHalfPlane)
        );
    }

    #[test]
    fn edge_requires_outside_point() {
        let h = model("Y1", 1, 0, &MatrixAssignment::new(1));
        assert!(matches!(
            h.edge_of_support(c(0.5, 0.0), &Tolerances::default()),
            Err(FreeSpecError::InsideSpectrum { .. })
        ));
        let e = h.edge_of_support(c(1.5, 0.0), &Tolerances::default()).unwrap();
        assert!(e.crossed && e.x > 0.05 && e.x < 0.11, "{e:?}");
    }

    #[test]
    fn radius_grows_towards_the_bracket_end() {
        let h = model("Y1", 1, 0, &MatrixAssignment::new(1));
        let z = c(1.5, 0.0);
        let (smin, _) = h.yz_singular_range(z).unwrap();
        let mut last = 0.0;
        for i in 0..40 {
            let x = smin * i as f64 / 40.0;
            let r = linalg::spectral_radius(h.delta1(z, x).unwrap().as_ref()).unwrap();
            assert!(r >= last - 1e-12, "x = {x}: {r} < {last}");
            last = r;
        }
    }

    #[test]
    fn choi_matrix_is_positive() {
        let a = diag_assignment(&[&[c(1.0, 0.5), c(-1.0, 0.0)]]);
        let h = model("Y1*A1 + A1* * Y1 + Y1", 1, 1, &a);
        let m2 = 2 * h.linearization().m();
        for (z, x) in [(c(2.0, 1.0), 0.0), (c(0.3, 0.2), 0.05), (c(-1.0, 3.0), -0.2)] {
            let d = h.delta1(z, x).unwrap();
            let choi = choi_matrix(d.as_ref(), m2);
            let ev = linalg::hermitian_eigenvalues(choi.as_ref()).unwrap();
            assert!(ev[0] >= -1e-10 * (1.0 + ev[ev.len() - 1]), "{}", ev[0]);
        }
    }

    /// `C[(s,p),(t,q)] = Δ[(p,q),(s,t)]`.
    fn choi_matrix(d: MatRef<'_, c64>, n: usize) -> Mat<c64> {
        Mat::from_fn(n * n, n * n, |row, col| {
            let (s, p) = (row / n, row % n);
            let (t, q) = (col / n, col % n);
            d[(p * n + q, s * n + t)]
        })
    }
}
