//! Outliers of `P(X/√N, A)`: eigenvalues of `P(0, A)` outside the limiting spectrum, the
//! determinant-ratio stability condition on a contour, and the finite-rank determinant whose
//! zeros are the empirical outliers.

use faer::linalg::solvers::Solve;
use faer::{c64, Mat, MatRef};
use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use crate::freespec::{Region, SpectrumMap, Verdict};
use crate::linalg::{self, cone, czero, is_diagonal};
use crate::linearize::{LinError, Linearization, LinearizedOperator};
use crate::ncpoly::{evaluate, zero_circulars, MatrixAssignment, NcPolynomial, PolyError, Symbol};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OutlierError {
    #[error("eigenvalue {z} falls in a grid cell with mixed verdicts; refine the grid")]
    GridTooCoarse { z: c64 },
    #[error("z = {z} on the boundary is within tolerance of an eigenvalue of P(0, A')")]
    SingularDenominator { z: c64 },
    #[error("z = {z} is within tolerance of an eigenvalue of the unperturbed model")]
    SingularResolvent { z: c64 },
    #[error("{0}")]
    Dimension(String),
    #[error("dense eigen or singular value solver failed")]
    Solver,
    #[error(transparent)]
    Lin(#[from] LinError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// `A = A' + A''` with `A'` well conditioned and `A''` of bounded rank.
#[derive(Clone, Debug)]
pub struct Decomposition {
    well_conditioned: MatrixAssignment,
    finite_rank: MatrixAssignment,
}

impl Decomposition {
    pub fn new(well_conditioned: MatrixAssignment, finite_rank: MatrixAssignment) -> Result<Self, OutlierError> {
        let (a, b) = (&well_conditioned, &finite_rank);
        if a.n() != b.n() {
            return Err(OutlierError::Dimension(format!("A' has N = {} but A'' has N = {}", a.n(), b.n())));
        }
        if a.deterministics().keys().ne(b.deterministics().keys()) {
            return Err(OutlierError::Dimension("A' and A'' bind different letters".into()));
        }
        Ok(Decomposition { well_conditioned: a.deterministic_only(), finite_rank: b.deterministic_only() })
    }

    /// `A'' = A − A'`.
    pub fn from_parts(full: &MatrixAssignment, well_conditioned: &MatrixAssignment) -> Result<Self, OutlierError> {
        let mut rest = MatrixAssignment::new(full.n());
        for (k, m) in full.deterministics() {
            let p = well_conditioned
                .deterministic(*k)
                .ok_or_else(|| OutlierError::Dimension(format!("A' does not bind A{k}")))?;
            rest.bind_deterministic(*k, m - p)?;
        }
        Decomposition::new(well_conditioned.clone(), rest)
    }

    /// `A' = 0`, the decomposition for finite-rank `A`.
    pub fn zero_well_conditioned(full: &MatrixAssignment) -> Self {
        let mut zero = MatrixAssignment::new(full.n());
        for k in full.deterministics().keys() {
            zero.bind_deterministic(*k, Mat::zeros(full.n(), full.n())).expect("square");
        }
        Decomposition { well_conditioned: zero, finite_rank: full.deterministic_only() }
    }

    pub fn well_conditioned(&self) -> &MatrixAssignment {
        &self.well_conditioned
    }

    pub fn finite_rank(&self) -> &MatrixAssignment {
        &self.finite_rank
    }

    pub fn full(&self) -> MatrixAssignment {
        let mut out = MatrixAssignment::new(self.well_conditioned.n());
        for (k, m) in self.well_conditioned.deterministics() {
            out.bind_deterministic(*k, m + &self.finite_rank.deterministics()[k]).expect("square");
        }
        out
    }

    /// Largest numerical rank among the `A''_k`, singular values above `cutoff·s₁`.
    pub fn max_rank(&self, cutoff: f64) -> usize {
        self.finite_rank
            .deterministics()
            .values()
            .map(|m| low_rank(m.as_ref(), cutoff).0.ncols())
            .max()
            .unwrap_or(0)
    }
}

/// `Σ β_k⊗A''_k = P·Q` with `p` columns in `P`.
#[derive(Clone, Debug)]
pub struct RankFactor {
    pub p_fac: Mat<c64>,
    pub q_fac: Mat<c64>,
}

impl RankFactor {
    pub fn rank(&self) -> usize {
        self.p_fac.ncols()
    }
}

/// Binds a zero matrix to every circular letter of `p` that `a` leaves unbound.
pub fn with_zero_circulars(a: &MatrixAssignment, u: usize) -> MatrixAssignment {
    let mut out = a.clone();
    for j in 1..=u {
        if out.circular(j).is_none() {
            out.bind_circular(j, Mat::zeros(a.n(), a.n())).expect("square");
        }
    }
    out
}

/// Eigenvalues of `P(0, A)` lying in cells of `map` whose four corners are all outside the
/// spectrum. Eigenvalues outside the map region are not classified and not returned.
pub fn predicted_outliers(p: &NcPolynomial, a: &MatrixAssignment, map: &SpectrumMap) -> Result<Vec<c64>, OutlierError> {
    let p0 = evaluate(&zero_circulars(p), &a.deterministic_only(), 1.0)?;
    let eig = if is_diagonal(p0.as_ref()) {
        (0..p0.nrows()).map(|i| p0[(i, i)]).collect()
    } else {
        linalg::eigenvalues(p0.as_ref()).ok_or(OutlierError::Solver)?
    };
    let mut out = Vec::new();
    for z in eig {
        let Some((i, j)) = map.cell_of(z) else { continue };
        let outside = map.cell_corners(i, j).iter().filter(|c| c.verdict == Verdict::Outside).count();
        match outside {
            4 => out.push(z),
            0 => {}
            _ => return Err(OutlierError::GridTooCoarse { z }),
        }
    }
    out.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    Ok(out)
}

/// `log|det(z − M)|` at many points: one eigendecomposition for large matrices, one LU per
/// point otherwise. `None` where `z` is within tolerance of an eigenvalue.
fn log_abs_det_shifted(m: MatRef<'_, c64>, points: &[c64]) -> Result<Vec<Option<f64>>, OutlierError> {
    let n = m.nrows();
    let scale = 1.0 + linalg::max_abs(m);
    let tol = 1e-12 * scale;
    if is_diagonal(m) || (n > 256 && points.len() > 8) {
        let eig: Vec<c64> = if is_diagonal(m) {
            (0..n).map(|i| m[(i, i)]).collect()
        } else {
            linalg::eigenvalues(m).ok_or(OutlierError::Solver)?
        };
        return Ok(points
            .par_iter()
            .map(|z| {
                let mut acc = 0.0;
                for l in &eig {
                    let d = (z - l).norm();
                    if d <= tol {
                        return None;
                    }
                    acc += d.ln();
                }
                Some(acc)
            })
            .collect());
    }
    Ok(points
        .par_iter()
        .map(|z| {
            let mut s = -m.to_owned();
            for i in 0..n {
                s[(i, i)] += z;
            }
            let lu = s.partial_piv_lu();
            (linalg::lu_pivot_ratio(&lu) > 1e-14).then(|| linalg::lu_log_abs_det(&lu))
        })
        .collect())
}

/// `min over boundary of |det(z − P(0, A))| / |det(z − P(0, A'))|`.
pub fn det_ratio(
    p: &NcPolynomial,
    a: &MatrixAssignment,
    a_prime: &MatrixAssignment,
    boundary: &[c64],
) -> Result<f64, OutlierError> {
    if boundary.is_empty() {
        return Err(OutlierError::Dimension("empty boundary".into()));
    }
    if a.n() != a_prime.n() {
        return Err(OutlierError::Dimension(format!("A has N = {} but A' has N = {}", a.n(), a_prime.n())));
    }
    let p0 = zero_circulars(p);
    let num = evaluate(&p0, &a.deterministic_only(), 1.0)?;
    let den = evaluate(&p0, &a_prime.deterministic_only(), 1.0)?;
    let ln = log_abs_det_shifted(num.as_ref(), boundary)?;
    let ld = log_abs_det_shifted(den.as_ref(), boundary)?;
    let mut best = f64::INFINITY;
    for ((z, n), d) in boundary.iter().zip(ln).zip(ld) {
        let d = d.ok_or(OutlierError::SingularDenominator { z: *z })?;
        best = best.min(n.map(|n| (n - d).exp()).unwrap_or(0.0));
    }
    Ok(best)
}

/// `m ≈ L·R` keeping singular values above `cutoff·s₁`; diagonal matrices give unit vectors.
fn low_rank(m: MatRef<'_, c64>, cutoff: f64) -> (Mat<c64>, Mat<c64>) {
    let (r, c) = (m.nrows(), m.ncols());
    if is_diagonal(m) {
        let s1 = (0..r.min(c)).map(|i| m[(i, i)].norm()).fold(0.0, f64::max);
        let idx: Vec<usize> = (0..r.min(c)).filter(|&i| s1 > 0.0 && m[(i, i)].norm() > cutoff * s1).collect();
        let left = Mat::from_fn(r, idx.len(), |i, k| if i == idx[k] { m[(i, i)] } else { czero() });
        let right = Mat::from_fn(idx.len(), c, |k, j| if j == idx[k] { cone() } else { czero() });
        return (left, right);
    }
    if linalg::max_abs(m) == 0.0 {
        return (Mat::zeros(r, 0), Mat::zeros(0, c));
    }
    let Ok(svd) = m.thin_svd() else {
        return (m.to_owned(), Mat::identity(c, c));
    };
    let s = svd.S().column_vector();
    let s1 = s[0].re;
    let k = (0..s.nrows()).filter(|&i| s[i].re > cutoff * s1).count();
    let left = Mat::from_fn(r, k, |i, j| svd.U()[(i, j)] * s[j].re);
    let right = Mat::from_fn(k, c, |i, j| svd.V()[(j, i)].conj());
    (left, right)
}

/// Compressed factorization of `Σ_k β_k⊗A''_k` (starred letters use `A''_k*`).
pub fn factor_perturbation(
    lin: &Linearization,
    finite_rank: &MatrixAssignment,
    cutoff: f64,
) -> Result<RankFactor, OutlierError> {
    let n = finite_rank.n();
    let dim = lin.m() * n;
    let mut lefts = Vec::new();
    let mut rights = Vec::new();
    for (letter, beta) in lin.beta() {
        let a = finite_rank.operand(Symbol::Deterministic(*letter), 1.0)?.to_dense();
        let (al, ar) = low_rank(a.as_ref(), cutoff);
        if al.ncols() == 0 {
            continue;
        }
        let (bl, br) = low_rank(beta.as_ref(), 1e-14);
        lefts.push(linalg::kron(bl.as_ref(), al.as_ref()));
        rights.push(linalg::kron(br.as_ref(), ar.as_ref()));
    }
    let total: usize = lefts.iter().map(|l| l.ncols()).sum();
    if total == 0 {
        return Ok(RankFactor { p_fac: Mat::zeros(dim, 0), q_fac: Mat::zeros(0, dim) });
    }
    let mut left = Mat::<c64>::zeros(dim, total);
    let mut right = Mat::<c64>::zeros(total, dim);
    let mut col = 0;
    for (l, r) in lefts.iter().zip(&rights) {
        left.as_mut().submatrix_mut(0, col, dim, l.ncols()).copy_from(l);
        right.as_mut().submatrix_mut(col, 0, r.nrows(), dim).copy_from(r);
        col += l.ncols();
    }
    let q1 = left.qr();
    let q2 = right.adjoint().to_owned().qr();
    let core = q1.thin_R() * q2.thin_R().adjoint();
    let svd = core.thin_svd().map_err(|_| OutlierError::Solver)?;
    let s = svd.S().column_vector();
    let s1 = s[0].re;
    let k = (0..s.nrows()).filter(|&i| s1 > 0.0 && s[i].re > cutoff * s1).count();
    let us = Mat::from_fn(total, k, |i, j| svd.U()[(i, j)] * s[j].re);
    let vh = Mat::from_fn(k, total, |i, j| svd.V()[(j, i)].conj());
    Ok(RankFactor { p_fac: q1.compute_thin_Q() * us, q_fac: vh * q2.compute_thin_Q().adjoint() })
}

/// `z ↦ det(I_p − Q R(z) P)` with `R(z) = (z e₁₁⊗1 − L)⁻¹` at fixed bindings (usually the
/// circular samples and `A'`), applied through structured solves.
pub struct OutlierIndicator<'a> {
    op: LinearizedOperator<'a>,
    rf: &'a RankFactor,
}

impl<'a> OutlierIndicator<'a> {
    pub fn new(lin: &'a Linearization, bindings: &MatrixAssignment, scale_circulars: f64, rf: &'a RankFactor) -> Result<Self, OutlierError> {
        let bindings = with_zero_circulars(bindings, lin.u());
        if rf.p_fac.nrows() != lin.m() * bindings.n() {
            return Err(OutlierError::Dimension("rank factor does not match mN".into()));
        }
        Ok(OutlierIndicator { op: LinearizedOperator::new(lin, &bindings, scale_circulars)?, rf })
    }

    pub fn eval(&self, z: c64) -> Result<c64, OutlierError> {
        let p = self.rf.rank();
        if p == 0 {
            return Ok(cone());
        }
        let res = self.op.at(z).map_err(|_| OutlierError::SingularResolvent { z })?;
        let rp = res.solve(self.rf.p_fac.as_ref());
        let m = Mat::<c64>::identity(p, p) - &self.rf.q_fac * rp;
        Ok(m.determinant())
    }

    /// Eigenvalues of the unperturbed model, the poles of the indicator.
    pub fn poles(&self) -> Result<Vec<c64>, OutlierError> {
        linalg::eigenvalues(self.op.polynomial_value()).ok_or(OutlierError::Solver)
    }

    /// Winding number of the indicator along the closed polygon `contour`, i.e. zeros minus
    /// poles inside, with segments subdivided until the argument moves by less than π/4.
    pub fn winding_number(&self, contour: &[c64]) -> Result<i64, OutlierError> {
        let mut total = 0.0;
        for k in 0..contour.len() {
            let (a, b) = (contour[k], contour[(k + 1) % contour.len()]);
            total += self.arg_change(a, b, self.eval(a)?, self.eval(b)?, 0)?;
        }
        Ok((total / std::f64::consts::TAU).round() as i64)
    }

    fn arg_change(&self, a: c64, b: c64, fa: c64, fb: c64, depth: u32) -> Result<f64, OutlierError> {
        let d = (fb / fa).arg();
        if d.abs() < std::f64::consts::FRAC_PI_4 || depth >= 16 {
            return Ok(d);
        }
        let mid = (a + b) * 0.5;
        let fm = self.eval(mid)?;
        Ok(self.arg_change(a, mid, fa, fm, depth + 1)? + self.arg_change(mid, b, fm, fb, depth + 1)?)
    }
}

/// `det(I − Q R(z) P)` at one point.
pub fn outlier_indicator(
    lin: &Linearization,
    bindings: &MatrixAssignment,
    scale_circulars: f64,
    rf: &RankFactor,
    z: c64,
) -> Result<c64, OutlierError> {
    OutlierIndicator::new(lin, bindings, scale_circulars, rf)?.eval(z)
}

/// `ρ(R'(z)·Y)`, with `R'` the resolvent of the linearization at `A'` and zero circulars and
/// `Y = Σ ζ_j⊗X_j/√N` (scaled by `scale_circulars`).
///
/// The nonzero eigenvalues `μ` of `R'Y` are the reciprocals of the roots `t` of
/// `det(z − P(tX, A'))`, so the radius is that of the block companion matrix of
/// `μ^D − Σ_d μ^{D−d} (z − P_0)⁻¹ P_d`, `P_d` being the part of degree `d` in the circulars.
pub fn contraction_radius(
    p: &NcPolynomial,
    bindings: &MatrixAssignment,
    scale_circulars: f64,
    z: c64,
) -> Result<f64, OutlierError> {
    let n = bindings.n();
    let bindings = with_zero_circulars(bindings, p.u());
    let degree = p.circular_degree();
    let mut parts: Vec<Mat<c64>> = (1..=degree)
        .map(|d| evaluate(&p.homogeneous_part(d), &bindings, scale_circulars))
        .collect::<Result<_, _>>()?;
    while parts.last().is_some_and(|m| linalg::max_abs(m.as_ref()) == 0.0) {
        parts.pop();
    }
    if parts.is_empty() {
        return Ok(0.0);
    }
    let mut base = -evaluate(&zero_circulars(p), &bindings, 1.0)?;
    for i in 0..n {
        base[(i, i)] += z;
    }
    let lu = base.partial_piv_lu();
    if !(linalg::lu_pivot_ratio(&lu) > 1e-14) {
        return Err(OutlierError::SingularResolvent { z });
    }
    let d = parts.len();
    let mut comp = Mat::<c64>::zeros(n * d, n * d);
    for (k, pk) in parts.iter().enumerate() {
        comp.as_mut().submatrix_mut(0, k * n, n, n).copy_from(lu.solve(pk));
    }
    for k in 1..d {
        for i in 0..n {
            comp[(k * n + i, (k - 1) * n + i)] = cone();
        }
    }
    linalg::spectral_radius(comp.as_ref()).ok_or(OutlierError::Solver)
}

/// The region Γ in which outliers are counted.
#[derive(Clone, Debug, PartialEq)]
pub enum Gamma {
    Annulus { center: c64, r_in: f64, r_out: f64 },
    Rectangle(Region),
    /// Points at distance at least `eps` from every grid node that is not outside the spectrum.
    Complement { eps: f64, map: SpectrumMap },
}

impl Gamma {
    pub fn contains(&self, z: c64) -> bool {
        match self {
            Gamma::Annulus { center, r_in, r_out } => {
                let r = (z - center).norm();
                r >= *r_in && r <= *r_out
            }
            Gamma::Rectangle(region) => region.contains(z),
            Gamma::Complement { eps, map } => map
                .cells
                .iter()
                .filter(|c| !c.verdict.is_outside())
                .all(|c| (c.z - z).norm() >= *eps),
        }
    }

    /// Closed, positively oriented boundary polygons with `points` vertices each (the inner
    /// circle of an annulus runs clockwise). Empty for a complement region.
    pub fn contours(&self, points: usize) -> Vec<Vec<c64>> {
        let circle = |c: c64, r: f64, sign: f64| -> Vec<c64> {
            (0..points)
                .map(|k| {
                    let t = sign * std::f64::consts::TAU * k as f64 / points as f64;
                    c + c64::new(r * t.cos(), r * t.sin())
                })
                .collect()
        };
        match self {
            Gamma::Annulus { center, r_in, r_out } => {
                let mut out = vec![circle(*center, *r_out, 1.0)];
                if *r_in > 0.0 {
                    out.push(circle(*center, *r_in, -1.0));
                }
                out
            }
            Gamma::Rectangle(r) => {
                let corners = [
                    c64::new(r.re_min, r.im_min),
                    c64::new(r.re_max, r.im_min),
                    c64::new(r.re_max, r.im_max),
                    c64::new(r.re_min, r.im_max),
                ];
                let per_side = (points / 4).max(1);
                let mut out = Vec::with_capacity(4 * per_side);
                for k in 0..4 {
                    let (a, b) = (corners[k], corners[(k + 1) % 4]);
                    for s in 0..per_side {
                        out.push(a + (b - a) * (s as f64 / per_side as f64));
                    }
                }
                vec![out]
            }
            Gamma::Complement { .. } => Vec::new(),
        }
    }

    /// Boundary sample for the determinant-ratio condition.
    pub fn boundary(&self, points: usize) -> Vec<c64> {
        match self {
            Gamma::Complement { eps, map } => map
                .cells
                .iter()
                .filter(|c| {
                    let d = map
                        .cells
                        .iter()
                        .filter(|o| !o.verdict.is_outside())
                        .map(|o| (o.z - c.z).norm())
                        .fold(f64::INFINITY, f64::min);
                    d >= *eps && d < *eps + map.step
                })
                .map(|c| c.z)
                .collect(),
            _ => self.contours(points).concat(),
        }
    }

    /// Grid nodes in Γ where the map does not certify the point as outside the spectrum.
    pub fn violations(&self, map: &SpectrumMap) -> Vec<c64> {
        map.cells.iter().filter(|c| !c.verdict.is_outside() && self.contains(c.z)).map(|c| c.z).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Gamma::Annulus { center, r_in, r_out } => {
                json!({"kind": "annulus", "center": [center.re, center.im], "r_in": r_in, "r_out": r_out})
            }
            Gamma::Rectangle(r) => json!({"kind": "rectangle", "re": [r.re_min, r.re_max], "im": [r.im_min, r.im_max]}),
            Gamma::Complement { eps, .. } => json!({"kind": "complement", "eps": eps}),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchPair {
    pub predicted: c64,
    pub empirical: c64,
    pub dist: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutlierReport {
    pub gamma: Gamma,
    pub predicted: Vec<c64>,
    pub empirical: Vec<c64>,
    pub pairs: Vec<MatchPair>,
    pub unmatched_predicted: Vec<c64>,
    pub unmatched_empirical: Vec<c64>,
    pub det_ratio_min: Option<f64>,
}

impl OutlierReport {
    /// `(predicted in Γ, empirical in Γ)`.
    pub fn counts(&self) -> (usize, usize) {
        (self.predicted.len(), self.empirical.len())
    }

    pub fn max_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.dist).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let pts = |v: &[c64]| v.iter().map(|z| json!([z.re, z.im])).collect::<Vec<_>>();
        json!({
            "gamma": self.gamma.to_json(),
            "predicted": pts(&self.predicted),
            "empirical": pts(&self.empirical),
            "pairs": self.pairs.iter().map(|p| json!({
                "p": [p.predicted.re, p.predicted.im],
                "e": [p.empirical.re, p.empirical.im],
                "dist": p.dist,
            })).collect::<Vec<_>>(),
            "unmatched_predicted": pts(&self.unmatched_predicted),
            "unmatched_empirical": pts(&self.unmatched_empirical),
            "counts": [self.predicted.len(), self.empirical.len()],
            "det_ratio_min": self.det_ratio_min,
        })
    }
}

/// Restricts both lists to Γ and pairs them greedily by increasing distance, up to
/// `match_radius`.
pub fn match_outliers(empirical: &[c64], predicted: &[c64], gamma: &Gamma, match_radius: f64) -> OutlierReport {
    let sorted = |v: &[c64]| {
        let mut v: Vec<c64> = v.iter().copied().filter(|z| gamma.contains(*z)).collect();
        v.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
        v
    };
    let emp = sorted(empirical);
    let pred = sorted(predicted);
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, e) in emp.iter().enumerate() {
            let d = (p - e).norm();
            if d <= match_radius {
                cands.push((d, i, j));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_e) = (vec![false; pred.len()], vec![false; emp.len()]);
    let mut pairs = Vec::new();
    for (d, i, j) in cands {
        if !used_p[i] && !used_e[j] {
            used_p[i] = true;
            used_e[j] = true;
            pairs.push(MatchPair { predicted: pred[i], empirical: emp[j], dist: d });
        }
    }
    let rest = |v: &[c64], used: &[bool]| v.iter().zip(used).filter(|(_, u)| !**u).map(|(z, _)| *z).collect();
    OutlierReport {
        gamma: gamma.clone(),
        unmatched_predicted: rest(&pred, &used_p),
        unmatched_empirical: rest(&emp, &used_e),
        predicted: pred,
        empirical: emp,
        pairs,
        det_ratio_min: None,
    }
}
