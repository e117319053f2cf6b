//! Block linearization `L = γ⊗1 + Σ ζ_j⊗Y_j + Σ β⊗A` of a polynomial, with bordered form
//! `[[0, u*], [v, Q]]` such that `P = −u* Q⁻¹ v`.
//!
//! Every monomial `c·x_1⋯x_ℓ` is padded to `1·x_1⋯x_ℓ·1` and becomes a block of size ℓ + 2
//! (a constant uses size 3 with the constant in the middle). Within a block the padded
//! sequence sits on the anti-diagonal and `−1` on the diagonal just above it; the scalar `c`
//! multiplies the entry of the first letter. Blocks share the first row and column.

use std::collections::BTreeMap;

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::reborrow::ReborrowMut;
use faer::{c64, Mat, MatMut, MatRef};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cone, czero, frob, inverse, lu_pivot_ratio, smallest_singular_value};
use crate::ncpoly::{evaluate, DetLetter, MatrixAssignment, NcPolynomial, Operand, PolyError, Symbol};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinError {
    #[error("cannot linearize the zero polynomial")]
    EmptyPolynomial,
    #[error("z = {z} is within tolerance of an eigenvalue of P(y)")]
    SingularPoint { z: c64 },
    #[error("z e11 - L(y) is singular at z = {z}")]
    SingularResolvent { z: c64 },
    #[error("linearization lacks the monomial block layout needed for structured solves")]
    MissingBlocks,
    #[error("structural invariant violated: {0}")]
    Structure(String),
    #[error("invalid linearization document: {0}")]
    Format(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// Placement of one monomial inside the glued linearization.
#[derive(Clone, Debug, PartialEq)]
pub struct MonomialBlock {
    /// Global index of the block's local row 1.
    pub offset: usize,
    pub coeff: c64,
    pub word: Vec<Symbol>,
}

impl MonomialBlock {
    pub fn size(&self) -> usize {
        self.word.len().max(1) + 2
    }

    fn global(&self, local: usize) -> usize {
        if local == 0 {
            0
        } else {
            self.offset + local - 1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linearization {
    m: usize,
    u: usize,
    t: usize,
    gamma: Mat<c64>,
    zeta: Vec<Mat<c64>>,
    beta: BTreeMap<DetLetter, Mat<c64>>,
    blocks: Vec<MonomialBlock>,
}

/// Builds the linearization, gluing monomial blocks in the polynomial's canonical order.
pub fn linearize(p: &NcPolynomial) -> Result<Linearization, LinError> {
    let order: Vec<usize> = (0..p.monomials().len()).collect();
    linearize_in_order(p, &order)
}

/// Builds the linearization with monomial blocks glued in the given order.
pub fn linearize_in_order(p: &NcPolynomial, order: &[usize]) -> Result<Linearization, LinError> {
    if p.is_zero() {
        return Err(LinError::EmptyPolynomial);
    }
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..p.monomials().len()).collect::<Vec<_>>() {
        return Err(LinError::Structure("gluing order is not a permutation of the monomials".into()));
    }
    let mut blocks = Vec::with_capacity(order.len());
    let mut offset = 1;
    for &i in order {
        let mono = &p.monomials()[i];
        let block = MonomialBlock { offset, coeff: mono.coeff, word: mono.word.clone() };
        offset += block.size() - 1;
        blocks.push(block);
    }
    let lin = Linearization::from_blocks(p.u(), p.t(), blocks);
    lin.validate()?;
    Ok(lin)
}

impl Linearization {
    fn from_blocks(u: usize, t: usize, blocks: Vec<MonomialBlock>) -> Self {
        let m = 1 + blocks.iter().map(|b| b.size() - 1).sum::<usize>();
        let mut gamma = Mat::<c64>::zeros(m, m);
        let mut zeta = vec![Mat::<c64>::zeros(m, m); u];
        let mut beta: BTreeMap<DetLetter, Mat<c64>> = BTreeMap::new();
        for b in &blocks {
            let n = b.size();
            for r in 0..n {
                let (row, col) = (b.global(r), b.global(n - 1 - r));
                if r == 0 || r == n - 1 {
                    gamma[(row, col)] += cone();
                } else if b.word.is_empty() {
                    gamma[(row, col)] += b.coeff;
                } else {
                    let c = if r == 1 { b.coeff } else { cone() };
                    match b.word[r - 1] {
                        Symbol::Circular(j) => zeta[j - 1][(row, col)] += c,
                        Symbol::Deterministic(d) => {
                            beta.entry(d).or_insert_with(|| Mat::zeros(m, m))[(row, col)] += c
                        }
                    }
                }
                if r >= 1 {
                    gamma[(row, b.global(n - r))] += c64::new(-1.0, 0.0);
                }
            }
        }
        Linearization { m, u, t, gamma, zeta, beta, blocks }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn u(&self) -> usize {
        self.u
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn gamma(&self) -> MatRef<'_, c64> {
        self.gamma.as_ref()
    }

    /// Coefficient of the circular letter `Y_j` (1-based).
    pub fn zeta(&self, j: usize) -> MatRef<'_, c64> {
        self.zeta[j - 1].as_ref()
    }

    pub fn zetas(&self) -> &[Mat<c64>] {
        &self.zeta
    }

    pub fn beta(&self) -> &BTreeMap<DetLetter, Mat<c64>> {
        &self.beta
    }

    pub fn blocks(&self) -> &[MonomialBlock] {
        &self.blocks
    }

    /// Copy with every circular coefficient multiplied by `w`.
    pub fn with_scaled_zetas(&self, w: c64) -> Self {
        let mut out = self.clone();
        for z in &mut out.zeta {
            *z = faer::Scale(w) * &*z;
        }
        for b in &mut out.blocks {
            if let Some(Symbol::Circular(_)) = b.word.first() {
                b.coeff *= w;
            }
        }
        // Only the first letter carries a coefficient, so blocks with later circular letters
        // no longer describe the scaled coefficients; drop the layout in that case.
        if out.blocks.iter().any(|b| b.word.iter().skip(1).any(Symbol::is_circular)) {
            out.blocks.clear();
        }
        out
    }

    /// Polynomial recovered from the block layout.
    pub fn polynomial(&self) -> Result<NcPolynomial, LinError> {
        if self.blocks.is_empty() {
            return Err(LinError::MissingBlocks);
        }
        Ok(NcPolynomial::from_terms(self.u, self.t, self.blocks.iter().map(|b| (b.coeff, b.word.clone())))?)
    }

    /// Checks the bordered form, the one-indeterminate-per-row/column rule and `|det Q| = 1`
    /// on a random scalar assignment.
    pub fn validate(&self) -> Result<(), LinError> {
        let m = self.m;
        let zero = czero();
        let fail = |msg: &str| Err(LinError::Structure(msg.to_string()));
        if self.gamma[(0, 0)] != zero {
            return fail("gamma[0,0] must vanish");
        }
        for i in 1..m {
            let (r, c) = (self.gamma[(0, i)], self.gamma[(i, 0)]);
            if r != c || !(r == zero || r == cone()) {
                return fail("border of gamma must be symmetric with entries in {0, 1}");
            }
        }
        let coeffs: Vec<&Mat<c64>> = self.zeta.iter().chain(self.beta.values()).collect();
        for c in &coeffs {
            if (0..m).any(|i| c[(0, i)] != zero || c[(i, 0)] != zero) {
                return fail("indeterminate coefficients must vanish on the border");
            }
        }
        for i in 1..m {
            let in_row = coeffs.iter().map(|c| (0..m).filter(|&j| c[(i, j)] != zero).count()).sum::<usize>();
            let in_col = coeffs.iter().map(|c| (0..m).filter(|&j| c[(j, i)] != zero).count()).sum::<usize>();
            if in_row > 1 || in_col > 1 {
                return fail("more than one indeterminate in a row or column");
            }
        }
        let mut probe = self.gamma.clone();
        for (k, c) in coeffs.iter().enumerate() {
            let s = c64::new(0.37 + 0.11 * k as f64, -0.23 + 0.07 * k as f64);
            probe += faer::Scale(s) * *c;
        }
        let q = probe.as_ref().submatrix(1, 1, m - 1, m - 1);
        let d = q.determinant().norm();
        if (d - 1.0).abs() > 1e-9 {
            return fail("det Q must be unimodular");
        }
        Ok(())
    }

    /// `L(y)` as an mN×mN matrix, circular letters bound to `scale_circulars` times their matrices.
    pub fn evaluate(&self, a: &MatrixAssignment, scale_circulars: f64) -> Result<Mat<c64>, LinError> {
        let n = a.n();
        let mut out = Mat::<c64>::zeros(self.m * n, self.m * n);
        add_kron_identity(out.as_mut(), self.gamma.as_ref(), n, cone());
        for (j, z) in self.zeta.iter().enumerate() {
            if z.norm_l2() == 0.0 {
                continue;
            }
            let op = a.operand(Symbol::Circular(j + 1), scale_circulars)?.to_dense();
            add_kron(out.as_mut(), z.as_ref(), op.as_ref(), cone());
        }
        for (d, b) in &self.beta {
            let op = a.operand(Symbol::Deterministic(*d), 1.0)?.to_dense();
            add_kron(out.as_mut(), b.as_ref(), op.as_ref(), cone());
        }
        Ok(out)
    }

    /// Serializes to `{m, u, t, gamma, zeta, beta, blocks}` with complex entries as `[re, im]`.
    pub fn to_json(&self) -> serde_json::Value {
        let doc = LinearizationDoc {
            m: self.m,
            u: self.u,
            t: self.t,
            gamma: to_pairs(self.gamma.as_ref()),
            zeta: self.zeta.iter().map(|z| to_pairs(z.as_ref())).collect(),
            beta: self
                .beta
                .iter()
                .map(|(d, b)| BetaDoc { index: d.index, starred: d.starred, matrix: to_pairs(b.as_ref()) })
                .collect(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockDoc {
                    offset: b.offset,
                    coeff: [b.coeff.re, b.coeff.im],
                    word: b.word.iter().map(Symbol::to_string).collect(),
                })
                .collect(),
        };
        serde_json::to_value(doc).expect("linearization serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, LinError> {
        let doc: LinearizationDoc =
            serde_json::from_value(v.clone()).map_err(|e| LinError::Format(e.to_string()))?;
        let m = doc.m;
        let gamma = from_pairs(&doc.gamma, m)?;
        if doc.zeta.len() != doc.u {
            return Err(LinError::Format("zeta must list one matrix per circular letter".into()));
        }
        let zeta = doc.zeta.iter().map(|z| from_pairs(z, m)).collect::<Result<Vec<_>, _>>()?;
        let mut beta = BTreeMap::new();
        for b in &doc.beta {
            beta.insert(DetLetter { index: b.index, starred: b.starred }, from_pairs(&b.matrix, m)?);
        }
        let blocks = doc
            .blocks
            .iter()
            .map(|b| {
                let word = b
                    .word
                    .iter()
                    .map(|s| s.parse::<Symbol>())
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(MonomialBlock { offset: b.offset, coeff: c64::new(b.coeff[0], b.coeff[1]), word })
            })
            .collect::<Result<Vec<_>, PolyError>>()?;
        let lin = Linearization { m, u: doc.u, t: doc.t, gamma, zeta, beta, blocks };
        lin.validate()?;
        Ok(lin)
    }
}

#[derive(Serialize, Deserialize)]
struct BetaDoc {
    index: usize,
    starred: bool,
    matrix: Vec<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct LinearizationDoc {
    m: usize,
    u: usize,
    t: usize,
    gamma: Vec<Vec<[f64; 2]>>,
    zeta: Vec<Vec<Vec<[f64; 2]>>>,
    beta: Vec<BetaDoc>,
    #[serde(default)]
    blocks: Vec<BlockDoc>,
}

#[derive(Serialize, Deserialize)]
struct BlockDoc {
    offset: usize,
    coeff: [f64; 2],
    word: Vec<String>,
}

fn to_pairs(m: MatRef<'_, c64>) -> Vec<Vec<[f64; 2]>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect()).collect()
}

fn from_pairs(rows: &[Vec<[f64; 2]>], m: usize) -> Result<Mat<c64>, LinError> {
    if rows.len() != m || rows.iter().any(|r| r.len() != m) {
        return Err(LinError::Format(format!("expected a {m}x{m} matrix")));
    }
    Ok(Mat::from_fn(m, m, |i, j| c64::new(rows[i][j][0], rows[i][j][1])))
}

/// `out += s · (coef ⊗ op)`, visiting only nonzero entries of `coef`.
pub fn add_kron(mut out: MatMut<'_, c64>, coef: MatRef<'_, c64>, op: MatRef<'_, c64>, s: c64) {
    let n = op.nrows();
    for q in 0..coef.ncols() {
        for p in 0..coef.nrows() {
            let c = coef[(p, q)];
            if c == czero() {
                continue;
            }
            let mut blk = out.rb_mut().submatrix_mut(p * n, q * n, n, n);
            blk += faer::Scale(s * c) * op;
        }
    }
}

/// `out += s · (coef ⊗ I_n)`.
pub fn add_kron_identity(mut out: MatMut<'_, c64>, coef: MatRef<'_, c64>, n: usize, s: c64) {
    for q in 0..coef.ncols() {
        for p in 0..coef.nrows() {
            let c = coef[(p, q)];
            if c != czero() {
                for i in 0..n {
                    out[(p * n + i, q * n + i)] += s * c;
                }
            }
        }
    }
}

/// `z e₁₁⊗I − γ⊗I − Σ ζ_j⊗(scale·X_j) − Σ β⊗A`; nothing is inverted.
pub fn eval_resolvent(
    lin: &Linearization,
    a: &MatrixAssignment,
    scale_circulars: f64,
    z: c64,
) -> Result<Mat<c64>, LinError> {
    let mut out = -lin.evaluate(a, scale_circulars)?;
    for i in 0..a.n() {
        out[(i, i)] += z;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchurCheck {
    pub residual_corner: f64,
    pub residual_p: f64,
    pub det_q_error: f64,
}

/// Certifies `P = −u*Q⁻¹v`, the corner identity of the resolvent and `|det Q| = 1`
/// at one assignment (circular letters used unscaled).
pub fn verify_schur(
    lin: &Linearization,
    p: &NcPolynomial,
    a: &MatrixAssignment,
    z: c64,
) -> Result<SchurCheck, LinError> {
    let n = a.n();
    let m = lin.m();
    let py = evaluate(p, a, 1.0)?;
    let mut shifted = -&py;
    for i in 0..n {
        shifted[(i, i)] += z;
    }
    let smin = smallest_singular_value(shifted.as_ref()).unwrap_or(0.0);
    if smin <= 1e-10 * (1.0 + frob(shifted.as_ref())) {
        return Err(LinError::SingularPoint { z });
    }
    let l = lin.evaluate(a, 1.0)?;
    let rest = (m - 1) * n;
    let ustar = l.as_ref().submatrix(0, n, n, rest);
    let v = l.as_ref().submatrix(n, 0, rest, n);
    let q = l.as_ref().submatrix(n, n, rest, rest);
    let recovered = -(ustar * q.partial_piv_lu().solve(v));
    let residual_p = frob((&recovered - &py).as_ref()) / (1.0 + frob(py.as_ref()));

    let mut k = -&l;
    for i in 0..n {
        k[(i, i)] += z;
    }
    let corner = inverse(k.as_ref()).as_ref().submatrix(0, 0, n, n).to_owned();
    let want = inverse(shifted.as_ref());
    let residual_corner = frob((&corner - &want).as_ref()) / (1.0 + frob(want.as_ref()));

    let lu = q.full_piv_lu();
    let u = lu.U();
    let det: f64 = (0..rest).map(|i| u[(i, i)].norm()).product();
    Ok(SchurCheck { residual_corner, residual_p, det_q_error: (det - 1.0).abs() })
}

// ---------------------------------------------------------------------------
// Structured solves with K(z) = z e₁₁⊗I − L(y)

/// `L(y)` for fixed bindings, solved through the monomial block layout: one LU of
/// `z − P(y)` plus back-substitution through the anti-triangular blocks of `Q(y)`.
pub struct LinearizedOperator<'a> {
    lin: &'a Linearization,
    n: usize,
    ops: BTreeMap<Symbol, Operand>,
    p_of_y: Mat<c64>,
}

/// `K(z)` factored at one point.
pub struct StructuredResolvent<'a, 'b> {
    op: &'b LinearizedOperator<'a>,
    z: c64,
    lu: PartialPivLu<c64>,
}

impl<'a> LinearizedOperator<'a> {
    pub fn new(lin: &'a Linearization, a: &MatrixAssignment, scale_circulars: f64) -> Result<Self, LinError> {
        let p = lin.polynomial()?;
        let mut ops = BTreeMap::new();
        for b in lin.blocks() {
            for s in &b.word {
                if !ops.contains_key(s) {
                    ops.insert(*s, a.operand(*s, scale_circulars)?);
                }
            }
        }
        let p_of_y = evaluate(&p, a, scale_circulars)?;
        Ok(LinearizedOperator { lin, n: a.n(), ops, p_of_y })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.lin.m() * self.n
    }

    /// `P(y)`, the Schur complement of the linearization.
    pub fn polynomial_value(&self) -> MatRef<'_, c64> {
        self.p_of_y.as_ref()
    }

    pub fn at(&self, z: c64) -> Result<StructuredResolvent<'a, '_>, LinError> {
        let mut shifted = -&self.p_of_y;
        for i in 0..self.n {
            shifted[(i, i)] += z;
        }
        let lu = shifted.partial_piv_lu();
        if !(lu_pivot_ratio(&lu) > 1e-14) {
            return Err(LinError::SingularResolvent { z });
        }
        Ok(StructuredResolvent { op: self, z, lu })
    }

    /// Applies the letter at local row `r` (1 ≤ r ≤ size − 2) of a block, or its adjoint.
    fn apply_entry(&self, b: &MonomialBlock, r: usize, w: MatRef<'_, c64>, adjoint: bool) -> Mat<c64> {
        let c = if r == 1 { b.coeff } else { cone() };
        let c = if adjoint { c.conj() } else { c };
        if b.word.is_empty() {
            return faer::Scale(c) * w;
        }
        match &self.ops[&b.word[r - 1]] {
            Operand::Diagonal(d) => {
                Mat::from_fn(w.nrows(), w.ncols(), |i, j| c * if adjoint { d[i].conj() } else { d[i] } * w[(i, j)])
            }
            Operand::Dense(m) if adjoint => faer::Scale(c) * (m.adjoint() * w),
            Operand::Dense(m) => faer::Scale(c) * (m * w),
        }
    }

    /// Solves `Q(y) x = rhs` (or `Q(y)* x = rhs`) for rhs of (m−1)N rows.
    fn solve_q(&self, rhs: MatRef<'_, c64>, adjoint: bool) -> Mat<c64> {
        let n = self.n;
        let mut out = Mat::<c64>::zeros(rhs.nrows(), rhs.ncols());
        for b in self.lin.blocks() {
            let size = b.size();
            // Q-local index i is global row offset + i, i.e. block-local row i + 1.
            let row = |i: usize| (b.offset - 1 + i) * n;
            let r_at = |i: usize| rhs.submatrix(row(i), 0, n, rhs.ncols());
            let mut prev = -r_at(size - 2).to_owned();
            out.as_mut().submatrix_mut(row(0), 0, n, rhs.ncols()).copy_from(&prev);
            for j in 1..=size - 2 {
                let letter_row = if adjoint { j } else { size - 1 - j };
                let next = self.apply_entry(b, letter_row, prev.as_ref(), adjoint) - r_at(size - 2 - j);
                out.as_mut().submatrix_mut(row(j), 0, n, rhs.ncols()).copy_from(&next);
                prev = next;
            }
        }
        out
    }

    fn border_sum(&self, x: MatRef<'_, c64>) -> Mat<c64> {
        let n = self.n;
        let mut acc = Mat::<c64>::zeros(n, x.ncols());
        for b in self.lin.blocks() {
            acc += x.submatrix((b.offset + b.size() - 3) * n, 0, n, x.ncols());
        }
        acc
    }

    fn border_spread(&self, w0: MatRef<'_, c64>, mut target: MatMut<'_, c64>) {
        let n = self.n;
        for b in self.lin.blocks() {
            let mut blk = target.rb_mut().submatrix_mut((b.offset + b.size() - 3) * n, 0, n, w0.ncols());
            blk += w0;
        }
    }
}

impl StructuredResolvent<'_, '_> {
    pub fn z(&self) -> c64 {
        self.z
    }

    fn solve_imp(&self, rhs: MatRef<'_, c64>, adjoint: bool) -> Mat<c64> {
        let op = self.op;
        let n = op.n;
        let rest = rhs.nrows() - n;
        let r0 = rhs.submatrix(0, 0, n, rhs.ncols());
        let rr = rhs.submatrix(n, 0, rest, rhs.ncols());
        let t = op.solve_q(rr, adjoint);
        let top = r0 - op.border_sum(t.as_ref());
        let w0 = if adjoint { self.lu.solve_adjoint(&top) } else { self.lu.solve(&top) };
        let mut s = rr.to_owned();
        op.border_spread(w0.as_ref(), s.as_mut());
        let wr = -op.solve_q(s.as_ref(), adjoint);
        let mut out = Mat::<c64>::zeros(rhs.nrows(), rhs.ncols());
        out.as_mut().submatrix_mut(0, 0, n, rhs.ncols()).copy_from(&w0);
        out.as_mut().submatrix_mut(n, 0, rest, rhs.ncols()).copy_from(&wr);
        out
    }

    /// `K(z)⁻¹ rhs`.
    pub fn solve(&self, rhs: MatRef<'_, c64>) -> Mat<c64> {
        self.solve_imp(rhs, false)
    }

    /// `K(z)⁻* rhs`.
    pub fn solve_adjoint(&self, rhs: MatRef<'_, c64>) -> Mat<c64> {
        self.solve_imp(rhs, true)
    }

    /// `log |det K(z)|`, equal to `log |det(z − P(y))|` because `|det Q| = 1`.
    pub fn log_abs_det(&self) -> f64 {
        crate::linalg::lu_log_abs_det(&self.lu)
    }

    /// `σ_min(K(z))` from Lanczos on `K⁻* K⁻¹` with full reorthogonalization, stopping when
    /// the top Ritz value is stable to `rel_tol` or after `max_steps`.
    pub fn smallest_singular_value(&self, max_steps: usize, rel_tol: f64) -> f64 {
        let dim = self.op.dim();
        let mut q = Mat::from_fn(dim, 1, |i, _| c64::new(1.0 + (i as f64 * 0.618_034).sin() * 0.5, (i as f64 * 1.3).cos() * 0.25));
        q = faer::Scale(c64::new(1.0 / q.norm_l2(), 0.0)) * &q;
        let mut basis: Vec<Mat<c64>> = Vec::new();
        let (mut alpha, mut beta) = (Vec::<f64>::new(), Vec::<f64>::new());
        let mut last = 0.0f64;
        for step in 0..max_steps.min(dim) {
            let mut w = self.solve_adjoint(self.solve(q.as_ref()).as_ref());
            let a = (q.adjoint() * &w)[(0, 0)].re;
            basis.push(q.clone());
            for v in &basis {
                let h = (v.adjoint() * &w)[(0, 0)];
                w -= faer::Scale(h) * v;
            }
            for v in &basis {
                let h = (v.adjoint() * &w)[(0, 0)];
                w -= faer::Scale(h) * v;
            }
            alpha.push(a);
            let k = alpha.len();
            let t = Mat::from_fn(k, k, |i, j| {
                if i == j {
                    c64::new(alpha[i], 0.0)
                } else if i == j + 1 || j == i + 1 {
                    c64::new(beta[i.min(j)], 0.0)
                } else {
                    czero()
                }
            });
            let top = crate::linalg::hermitian_eigenvalues(t.as_ref())
                .and_then(|e| e.last().copied())
                .unwrap_or(a);
            let b = w.norm_l2();
            if (step > 2 && (top - last).abs() <= rel_tol * top) || b <= 1e-14 * top {
                return 1.0 / top.sqrt();
            }
            last = top;
            beta.push(b);
            q = faer::Scale(c64::new(1.0 / b, 0.0)) * &w;
        }
        1.0 / last.sqrt()
    }
}
