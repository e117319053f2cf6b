//! Small dense helpers shared by the numerical modules.

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::{c64, Mat, MatRef, Side};

pub fn czero() -> c64 {
    c64::new(0.0, 0.0)
}

pub fn cone() -> c64 {
    c64::new(1.0, 0.0)
}

/// Frobenius norm.
pub fn frob(m: MatRef<'_, c64>) -> f64 {
    m.norm_l2()
}

pub fn diag_matrix(values: &[c64]) -> Mat<c64> {
    Mat::from_fn(values.len(), values.len(), |i, j| if i == j { values[i] } else { czero() })
}

pub fn is_diagonal(m: MatRef<'_, c64>) -> bool {
    (0..m.ncols()).all(|j| (0..m.nrows()).all(|i| i == j || m[(i, j)] == czero()))
}

/// Kronecker product `a ⊗ b`, block (p, q) equal to `a[p, q] · b`.
pub fn kron(a: MatRef<'_, c64>, b: MatRef<'_, c64>) -> Mat<c64> {
    let (br, bc) = (b.nrows(), b.ncols());
    Mat::from_fn(a.nrows() * br, a.ncols() * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

/// `[[0, k], [k*, 0]]`.
pub fn hermitize(k: MatRef<'_, c64>) -> Mat<c64> {
    let (r, c) = (k.nrows(), k.ncols());
    Mat::from_fn(r + c, r + c, |i, j| {
        if i < r && j >= r {
            k[(i, j - r)]
        } else if i >= r && j < r {
            k[(j, i - r)].conj()
        } else {
            czero()
        }
    })
}

pub fn eigenvalues(m: MatRef<'_, c64>) -> Option<Vec<c64>> {
    m.eigenvalues().ok()
}

pub fn spectral_radius(m: MatRef<'_, c64>) -> Option<f64> {
    if m.nrows() == 0 {
        return Some(0.0);
    }
    Some(eigenvalues(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Singular values in decreasing order. When the SVD does not converge they are read off
/// the eigenvalues `±σ` of the hermitization instead.
pub fn singular_values(m: MatRef<'_, c64>) -> Option<Vec<f64>> {
    if let Ok(sv) = m.singular_values() {
        return Some(sv);
    }
    let mut ev = hermitian_eigenvalues(hermitize(m).as_ref())?;
    ev.reverse();
    ev.truncate(m.nrows().min(m.ncols()));
    Some(ev.into_iter().map(|e| e.max(0.0)).collect())
}

pub fn smallest_singular_value(m: MatRef<'_, c64>) -> Option<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Some(0.0);
    }
    singular_values(m)?.last().copied()
}

pub fn hermitian_eigenvalues(m: MatRef<'_, c64>) -> Option<Vec<f64>> {
    m.self_adjoint_eigenvalues(Side::Lower).ok()
}

/// `log |det m|` from the pivots of a partially pivoted LU.
pub fn log_abs_det(m: MatRef<'_, c64>) -> f64 {
    let lu = m.partial_piv_lu();
    lu_log_abs_det(&lu)
}

pub fn lu_log_abs_det(lu: &PartialPivLu<c64>) -> f64 {
    let u = lu.U();
    (0..u.nrows()).map(|i| u[(i, i)].norm().ln()).sum()
}

/// Ratio of smallest to largest pivot modulus; a cheap singularity indicator.
pub fn lu_pivot_ratio(lu: &PartialPivLu<c64>) -> f64 {
    let u = lu.U();
    let mags: Vec<f64> = (0..u.nrows()).map(|i| u[(i, i)].norm()).collect();
    let max = mags.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0.0;
    }
    mags.iter().copied().fold(f64::INFINITY, f64::min) / max
}

pub fn inverse(m: MatRef<'_, c64>) -> Mat<c64> {
    let lu = m.partial_piv_lu();
    lu.solve(Mat::<c64>::identity(m.nrows(), m.nrows()))
}

pub fn max_abs(m: MatRef<'_, c64>) -> f64 {
    let mut out = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            out = out.max(m[(i, j)].norm());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_layout() {
        let a = Mat::from_fn(2, 2, |i, j| c64::new((2 * i + j) as f64, 0.0));
        let b = Mat::from_fn(2, 2, |i, j| c64::new(0.0, (i + 3 * j) as f64));
        let k = kron(a.as_ref(), b.as_ref());
        assert_eq!(k[(3, 2)], a[(1, 1)] * b[(1, 0)]);
        assert_eq!(k[(1, 3)], a[(0, 1)] * b[(1, 1)]);
    }

    #[test]
    fn log_det_matches_determinant() {
        let m = Mat::from_fn(4, 4, |i, j| c64::new((i * j) as f64 + if i == j { 3.0 } else { 0.1 }, i as f64 - j as f64));
        let d = m.determinant();
        assert!((log_abs_det(m.as_ref()) - d.norm().ln()).abs() < 1e-12);
    }

    #[test]
    fn hermitization_pairs() {
        let k = Mat::from_fn(3, 3, |i, j| c64::new((i + 2 * j) as f64 * 0.3 - 0.4, (i * j) as f64 * 0.2));
        let h = hermitize(k.as_ref());
        let mut ev = hermitian_eigenvalues(h.as_ref()).unwrap();
        ev.sort_by(f64::total_cmp);
        let sv = singular_values(k.as_ref()).unwrap();
        for i in 0..3 {
            assert!((ev[5 - i] - sv[i]).abs() < 1e-12);
            assert!((ev[i] + sv[i]).abs() < 1e-12);
        }
    }
}
