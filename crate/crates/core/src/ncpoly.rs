//! Noncommutative polynomials in circular letters `Y_j` and deterministic letters `A_k`.
//!
//! Polynomials are kept in normal form: monomials sorted by word, like terms combined and
//! zero coefficients dropped, so structural equality is polynomial equality.

use std::collections::BTreeMap;
use std::fmt;

use faer::{c64, Mat};
use thiserror::Error;

/// A deterministic letter `A_k` or its adjoint `A_k*` (1-based index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DetLetter {
    pub index: usize,
    pub starred: bool,
}

impl DetLetter {
    pub fn plain(index: usize) -> Self {
        DetLetter { index, starred: false }
    }

    pub fn star(self) -> Self {
        DetLetter { index: self.index, starred: !self.starred }
    }
}

/// One letter of a word. Circular letters carry no star: starred circulars are not supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Symbol {
    Circular(usize),
    Deterministic(DetLetter),
}

impl Symbol {
    pub fn is_circular(&self) -> bool {
        matches!(self, Symbol::Circular(_))
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Circular(j) => write!(f, "Y{j}"),
            Symbol::Deterministic(d) if d.starred => write!(f, "A{}*", d.index),
            Symbol::Deterministic(d) => write!(f, "A{}", d.index),
        }
    }
}

impl std::str::FromStr for Symbol {
    type Err = PolyError;

    /// Parses `Y3`, `A2` or `A2*`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PolyError::Syntax { position: 0, expected: format!("letter, found {s:?}") };
        let (starred, body) = match s.strip_suffix('*') {
            Some(b) => (true, b),
            None => (false, s),
        };
        let index: usize = body.get(1..).and_then(|d| d.parse().ok()).ok_or_else(bad)?;
        match body.as_bytes().first() {
            Some(b'Y') if !starred => Ok(Symbol::Circular(index)),
            Some(b'Y') => Err(PolyError::UnsupportedStarredCircular),
            Some(b'A') => Ok(Symbol::Deterministic(DetLetter { index, starred })),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Monomial {
    pub coeff: c64,
    pub word: Vec<Symbol>,
}

impl Monomial {
    pub fn circular_degree(&self) -> usize {
        self.word.iter().filter(|s| s.is_circular()).count()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("syntax error at byte {position}: expected {expected}")]
    Syntax { position: usize, expected: String },
    #[error("letter {letter} exceeds the declared count {declared}")]
    Index { letter: String, declared: usize },
    #[error("starred circular letters are not supported")]
    UnsupportedStarredCircular,
    #[error("matrix bound to {letter} is {rows}x{cols}, expected {n}x{n}")]
    DimensionMismatch { letter: String, rows: usize, cols: usize, n: usize },
    #[error("no matrix bound to {0}")]
    MissingBinding(String),
}

/// A polynomial in `u` circular and `t` deterministic letters, in normal form.
#[derive(Clone, Debug, PartialEq)]
pub struct NcPolynomial {
    u: usize,
    t: usize,
    monomials: Vec<Monomial>,
}

impl NcPolynomial {
    /// Builds a polynomial from arbitrary terms, normalizing them.
    pub fn from_terms(
        u: usize,
        t: usize,
        terms: impl IntoIterator<Item = (c64, Vec<Symbol>)>,
    ) -> Result<Self, PolyError> {
        let mut acc: BTreeMap<Vec<Symbol>, c64> = BTreeMap::new();
        for (coeff, word) in terms {
            for s in &word {
                check_symbol(*s, u, t)?;
            }
            *acc.entry(word).or_insert(c64::new(0.0, 0.0)) += coeff;
        }
        Ok(Self::from_map(u, t, acc))
    }

    fn from_map(u: usize, t: usize, acc: BTreeMap<Vec<Symbol>, c64>) -> Self {
        let monomials = acc
            .into_iter()
            .filter(|(_, c)| *c != c64::new(0.0, 0.0))
            .map(|(word, coeff)| Monomial { coeff, word })
            .collect();
        NcPolynomial { u, t, monomials }
    }

    pub fn zero(u: usize, t: usize) -> Self {
        NcPolynomial { u, t, monomials: Vec::new() }
    }

    pub fn constant(u: usize, t: usize, c: c64) -> Self {
        Self::from_map(u, t, BTreeMap::from([(Vec::new(), c)]))
    }

    pub fn letter(u: usize, t: usize, s: Symbol) -> Result<Self, PolyError> {
        Self::from_terms(u, t, [(c64::new(1.0, 0.0), vec![s])])
    }

    pub fn u(&self) -> usize {
        self.u
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn monomials(&self) -> &[Monomial] {
        &self.monomials
    }

    pub fn is_zero(&self) -> bool {
        self.monomials.is_empty()
    }

    /// Largest number of circular letters in a single monomial.
    pub fn circular_degree(&self) -> usize {
        self.monomials.iter().map(Monomial::circular_degree).max().unwrap_or(0)
    }

    /// Total number of circular letter occurrences over all monomials.
    pub fn circular_occurrences(&self) -> usize {
        self.monomials.iter().map(Monomial::circular_degree).sum()
    }

    fn to_map(&self) -> BTreeMap<Vec<Symbol>, c64> {
        self.monomials.iter().map(|m| (m.word.clone(), m.coeff)).collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut acc = self.to_map();
        for m in &other.monomials {
            *acc.entry(m.word.clone()).or_insert(c64::new(0.0, 0.0)) += m.coeff;
        }
        Self::from_map(self.u.max(other.u), self.t.max(other.t), acc)
    }

    pub fn scale(&self, c: c64) -> Self {
        let acc = self.monomials.iter().map(|m| (m.word.clone(), m.coeff * c)).collect();
        Self::from_map(self.u, self.t, acc)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(c64::new(-1.0, 0.0)))
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut acc: BTreeMap<Vec<Symbol>, c64> = BTreeMap::new();
        for a in &self.monomials {
            for b in &other.monomials {
                let mut word = a.word.clone();
                word.extend_from_slice(&b.word);
                *acc.entry(word).or_insert(c64::new(0.0, 0.0)) += a.coeff * b.coeff;
            }
        }
        Self::from_map(self.u.max(other.u), self.t.max(other.t), acc)
    }

    pub fn pow(&self, e: u32) -> Self {
        let mut out = Self::constant(self.u, self.t, c64::new(1.0, 0.0));
        for _ in 0..e {
            out = out.mul(self);
        }
        out
    }

    /// Keeps only the monomials with exactly `degree` circular letters.
    pub fn homogeneous_part(&self, degree: usize) -> Self {
        NcPolynomial {
            u: self.u,
            t: self.t,
            monomials: self
                .monomials
                .iter()
                .filter(|m| m.circular_degree() == degree)
                .cloned()
                .collect(),
        }
    }

    /// Coefficientwise comparison with an absolute tolerance.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        let a = self.to_map();
        let b = other.to_map();
        let zero = c64::new(0.0, 0.0);
        a.keys()
            .chain(b.keys())
            .all(|w| (a.get(w).copied().unwrap_or(zero) - b.get(w).copied().unwrap_or(zero)).norm() <= tol)
    }
}

fn check_symbol(s: Symbol, u: usize, t: usize) -> Result<(), PolyError> {
    match s {
        Symbol::Circular(j) if j == 0 || j > u => {
            Err(PolyError::Index { letter: s.to_string(), declared: u })
        }
        Symbol::Deterministic(d) if d.index == 0 || d.index > t => {
            Err(PolyError::Index { letter: s.to_string(), declared: t })
        }
        _ => Ok(()),
    }
}

/// Substitutes every circular letter by zero.
pub fn zero_circulars(p: &NcPolynomial) -> NcPolynomial {
    p.homogeneous_part(0)
}

/// Reverses words, toggles stars and conjugates coefficients.
pub fn adjoint(p: &NcPolynomial) -> Result<NcPolynomial, PolyError> {
    let mut acc = BTreeMap::new();
    for m in &p.monomials {
        let mut word = Vec::with_capacity(m.word.len());
        for s in m.word.iter().rev() {
            match s {
                Symbol::Circular(_) => return Err(PolyError::UnsupportedStarredCircular),
                Symbol::Deterministic(d) => word.push(Symbol::Deterministic(d.star())),
            }
        }
        acc.insert(word, m.coeff.conj());
    }
    Ok(NcPolynomial::from_map(p.u, p.t, acc))
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Clone, Copy, Debug, PartialEq)]
enum Tok {
    Num { value: f64, integral: Option<u64> },
    Imag,
    Y(usize),
    A(usize),
    Star,
    Plus,
    Minus,
    Caret,
    Slash,
    LParen,
    RParen,
    End,
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>, PolyError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let skip_ws = |mut i: usize| {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        i
    };
    let digits = |start: usize| {
        let mut j = start;
        while j < bytes.len() && bytes[j].is_ascii_digit() {
            j += 1;
        }
        j
    };
    loop {
        i = skip_ws(i);
        if i >= bytes.len() {
            out.push((Tok::End, i));
            return Ok(out);
        }
        let start = i;
        let c = bytes[i];
        let tok = match c {
            b'0'..=b'9' | b'.' => {
                let mut j = digits(i);
                let integral_end = j;
                if j < bytes.len() && bytes[j] == b'.' {
                    j = digits(j + 1);
                }
                let s = &text[i..j];
                let value: f64 = s.parse().map_err(|_| PolyError::Syntax {
                    position: start,
                    expected: "decimal number".into(),
                })?;
                let integral = if integral_end == j { s.parse::<u64>().ok() } else { None };
                i = j;
                Tok::Num { value, integral }
            }
            b'Y' | b'A' => {
                let j = skip_ws(i + 1);
                let k = digits(j);
                let idx: usize = text[j..k].parse().map_err(|_| PolyError::Syntax {
                    position: j,
                    expected: "letter index".into(),
                })?;
                i = k;
                if c == b'Y' {
                    Tok::Y(idx)
                } else {
                    Tok::A(idx)
                }
            }
            _ => {
                i += 1;
                match c {
                    b'i' => Tok::Imag,
                    b'*' => Tok::Star,
                    b'+' => Tok::Plus,
                    b'-' => Tok::Minus,
                    b'^' => Tok::Caret,
                    b'/' => Tok::Slash,
                    b'(' => Tok::LParen,
                    b')' => Tok::RParen,
                    _ => {
                        return Err(PolyError::Syntax { position: start, expected: "token".into() })
                    }
                }
            }
        };
        out.push((tok, start));
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    u: usize,
    t: usize,
}

impl Parser {
    fn peek(&self) -> Tok {
        self.toks[self.pos].0
    }

    fn peek_at(&self, k: usize) -> Tok {
        self.toks[(self.pos + k).min(self.toks.len() - 1)].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.peek();
        if t != Tok::End {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, expected: &str) -> Result<T, PolyError> {
        Err(PolyError::Syntax { position: self.toks[self.pos].1, expected: expected.into() })
    }

    fn one(&self) -> c64 {
        c64::new(1.0, 0.0)
    }

    fn expr(&mut self) -> Result<NcPolynomial, PolyError> {
        let negate = if self.peek() == Tok::Minus {
            self.bump();
            true
        } else {
            false
        };
        let mut acc = self.term()?;
        if negate {
            acc = acc.scale(-self.one());
        }
        loop {
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                    acc = acc.add(&self.term()?);
                }
                Tok::Minus => {
                    self.bump();
                    acc = acc.sub(&self.term()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<NcPolynomial, PolyError> {
        let mut acc = self.factor()?;
        while self.peek() == Tok::Star {
            self.bump();
            acc = acc.mul(&self.factor()?);
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<NcPolynomial, PolyError> {
        let base = self.primary()?;
        if self.peek() == Tok::Caret {
            self.bump();
            match self.bump() {
                Tok::Num { integral: Some(e), .. } if e <= u32::MAX as u64 => Ok(base.pow(e as u32)),
                _ => {
                    self.pos -= 1;
                    self.err("unsigned integer exponent")
                }
            }
        } else {
            Ok(base)
        }
    }

    fn starts_factor(t: Tok) -> bool {
        matches!(t, Tok::Num { .. } | Tok::Imag | Tok::Y(_) | Tok::A(_) | Tok::LParen)
    }

    fn primary(&mut self) -> Result<NcPolynomial, PolyError> {
        let (u, t) = (self.u, self.t);
        match self.peek() {
            Tok::Num { value, .. } => {
                self.bump();
                let c = if self.peek() == Tok::Imag {
                    self.bump();
                    c64::new(0.0, value)
                } else {
                    c64::new(value, 0.0)
                };
                Ok(NcPolynomial::constant(u, t, c))
            }
            Tok::Imag => {
                self.bump();
                Ok(NcPolynomial::constant(u, t, c64::new(0.0, 1.0)))
            }
            Tok::Y(j) => {
                self.bump();
                NcPolynomial::letter(u, t, Symbol::Circular(j))
            }
            Tok::A(k) => {
                self.bump();
                let starred = self.peek() == Tok::Star && !Self::starts_factor(self.peek_at(1));
                if starred {
                    self.bump();
                }
                NcPolynomial::letter(u, t, Symbol::Deterministic(DetLetter { index: k, starred }))
            }
            Tok::LParen => {
                if let Some(c) = self.rational() {
                    return Ok(NcPolynomial::constant(u, t, c));
                }
                self.bump();
                let inner = self.expr()?;
                if self.bump() != Tok::RParen {
                    self.pos -= 1;
                    return self.err("')'");
                }
                Ok(inner)
            }
            _ => self.err("number, 'i', Y<j>, A<k> or '('"),
        }
    }

    /// Recognizes `( [-] decimal / decimal )` without consuming anything otherwise.
    fn rational(&mut self) -> Option<c64> {
        let mut k = 1;
        let sign = if self.peek_at(k) == Tok::Minus {
            k += 1;
            -1.0
        } else {
            1.0
        };
        match (self.peek_at(k), self.peek_at(k + 1), self.peek_at(k + 2), self.peek_at(k + 3)) {
            (Tok::Num { value: a, .. }, Tok::Slash, Tok::Num { value: b, .. }, Tok::RParen) => {
                self.pos += k + 4;
                Some(c64::new(sign * a / b, 0.0))
            }
            _ => None,
        }
    }
}

/// Parses the polynomial grammar (`*` is required for products, `^` takes unsigned integers,
/// `A3*` is the adjoint of `A3`, `(1/6)` is a rational literal).
pub fn parse_polynomial(text: &str, u: usize, t: usize) -> Result<NcPolynomial, PolyError> {
    let toks = tokenize(text)?;
    let mut p = Parser { toks, pos: 0, u, t };
    let out = p.expr()?;
    if p.peek() != Tok::End {
        return p.err("'+', '-', '*' or end of input");
    }
    Ok(NcPolynomial { u, t, ..out })
}

impl std::str::FromStr for NcPolynomial {
    type Err = PolyError;

    /// Parses with letter counts inferred from the largest indices present.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let toks = tokenize(s)?;
        let u = toks.iter().filter_map(|(t, _)| if let Tok::Y(j) = t { Some(*j) } else { None }).max();
        let t = toks.iter().filter_map(|(t, _)| if let Tok::A(k) = t { Some(*k) } else { None }).max();
        parse_polynomial(s, u.unwrap_or(0), t.unwrap_or(0))
    }
}

// ---------------------------------------------------------------------------
// Rendering

fn fmt_word(word: &[Symbol]) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut i = 0;
    while i < word.len() {
        let mut j = i + 1;
        while j < word.len() && word[j] == word[i] {
            j += 1;
        }
        if j - i > 1 {
            parts.push(format!("{}^{}", word[i], j - i));
        } else {
            parts.push(word[i].to_string());
        }
        i = j;
    }
    parts.join("*")
}

/// Splits a coefficient into a sign and a magnitude text that parses back exactly.
fn fmt_coeff(c: c64) -> (bool, String) {
    if c.im == 0.0 {
        (c.re < 0.0, format!("{}", c.re.abs()))
    } else if c.re == 0.0 {
        (c.im < 0.0, format!("{}i", c.im.abs()))
    } else {
        let op = if c.im < 0.0 { '-' } else { '+' };
        (false, format!("({} {} {}i)", c.re, op, c.im.abs()))
    }
}

impl fmt::Display for NcPolynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.monomials.is_empty() {
            return write!(f, "0");
        }
        for (n, m) in self.monomials.iter().enumerate() {
            let (negative, mag) = fmt_coeff(m.coeff);
            let body = if m.word.is_empty() {
                mag
            } else if mag == "1" {
                fmt_word(&m.word)
            } else {
                format!("{mag}*{}", fmt_word(&m.word))
            };
            match (n, negative) {
                (0, true) => write!(f, "-{body}")?,
                (0, false) => write!(f, "{body}")?,
                (_, true) => write!(f, " - {body}")?,
                (_, false) => write!(f, " + {body}")?,
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Concrete N×N matrices bound to the letters of a polynomial.
#[derive(Clone, Debug)]
pub struct MatrixAssignment {
    n: usize,
    circulars: BTreeMap<usize, Mat<c64>>,
    deterministics: BTreeMap<usize, Mat<c64>>,
}

impl MatrixAssignment {
    pub fn new(n: usize) -> Self {
        MatrixAssignment { n, circulars: BTreeMap::new(), deterministics: BTreeMap::new() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn check(&self, letter: String, m: &Mat<c64>) -> Result<(), PolyError> {
        if m.nrows() != self.n || m.ncols() != self.n {
            return Err(PolyError::DimensionMismatch { letter, rows: m.nrows(), cols: m.ncols(), n: self.n });
        }
        Ok(())
    }

    pub fn bind_circular(&mut self, j: usize, m: Mat<c64>) -> Result<(), PolyError> {
        self.check(format!("Y{j}"), &m)?;
        self.circulars.insert(j, m);
        Ok(())
    }

    pub fn bind_deterministic(&mut self, k: usize, m: Mat<c64>) -> Result<(), PolyError> {
        self.check(format!("A{k}"), &m)?;
        self.deterministics.insert(k, m);
        Ok(())
    }

    pub fn with_circular(mut self, j: usize, m: Mat<c64>) -> Result<Self, PolyError> {
        self.bind_circular(j, m)?;
        Ok(self)
    }

    pub fn with_deterministic(mut self, k: usize, m: Mat<c64>) -> Result<Self, PolyError> {
        self.bind_deterministic(k, m)?;
        Ok(self)
    }

    pub fn circular(&self, j: usize) -> Option<&Mat<c64>> {
        self.circulars.get(&j)
    }

    pub fn deterministic(&self, k: usize) -> Option<&Mat<c64>> {
        self.deterministics.get(&k)
    }

    pub fn deterministics(&self) -> &BTreeMap<usize, Mat<c64>> {
        &self.deterministics
    }

    pub fn circulars(&self) -> &BTreeMap<usize, Mat<c64>> {
        &self.circulars
    }

    /// The same deterministic matrices with every circular letter dropped.
    pub fn deterministic_only(&self) -> Self {
        MatrixAssignment { n: self.n, circulars: BTreeMap::new(), deterministics: self.deterministics.clone() }
    }

    /// The matrix a symbol evaluates to, scaled when circular and adjointed when starred.
    pub fn operand(&self, s: Symbol, scale_circulars: f64) -> Result<Operand, PolyError> {
        match s {
            Symbol::Circular(j) => {
                let m = self.circulars.get(&j).ok_or_else(|| PolyError::MissingBinding(s.to_string()))?;
                Ok(Operand::from_matrix(m.as_ref(), scale_circulars, false))
            }
            Symbol::Deterministic(d) => {
                let m = self
                    .deterministics
                    .get(&d.index)
                    .ok_or_else(|| PolyError::MissingBinding(s.to_string()))?;
                Ok(Operand::from_matrix(m.as_ref(), 1.0, d.starred))
            }
        }
    }
}

/// A bound matrix, stored as its diagonal when it has no off-diagonal entries.
#[derive(Clone, Debug)]
pub enum Operand {
    Diagonal(Vec<c64>),
    Dense(Mat<c64>),
}

impl Operand {
    pub fn from_matrix(m: faer::MatRef<'_, c64>, scale: f64, adjoint: bool) -> Self {
        let n = m.nrows();
        let zero = c64::new(0.0, 0.0);
        let diagonal = (0..n).all(|j| (0..n).all(|i| i == j || m[(i, j)] == zero));
        if diagonal {
            Operand::Diagonal(
                (0..n).map(|i| if adjoint { m[(i, i)].conj() } else { m[(i, i)] } * scale).collect(),
            )
        } else if adjoint {
            Operand::Dense(Mat::from_fn(n, n, |i, j| m[(j, i)].conj() * scale))
        } else {
            Operand::Dense(Mat::from_fn(n, n, |i, j| m[(i, j)] * scale))
        }
    }

    pub fn to_dense(&self) -> Mat<c64> {
        match self {
            Operand::Dense(m) => m.clone(),
            Operand::Diagonal(d) => {
                Mat::from_fn(d.len(), d.len(), |i, j| if i == j { d[i] } else { c64::new(0.0, 0.0) })
            }
        }
    }
}

/// Running product of a word prefix.
#[derive(Clone)]
enum Product {
    Identity,
    Op(Operand),
}

fn times(p: &Product, op: &Operand) -> Product {
    Product::Op(match (p, op) {
        (Product::Identity, o) => o.clone(),
        (Product::Op(Operand::Diagonal(d)), Operand::Diagonal(e)) => {
            Operand::Diagonal(d.iter().zip(e).map(|(a, b)| a * b).collect())
        }
        (Product::Op(Operand::Diagonal(d)), Operand::Dense(m)) => {
            Operand::Dense(Mat::from_fn(m.nrows(), m.ncols(), |i, j| d[i] * m[(i, j)]))
        }
        (Product::Op(Operand::Dense(m)), Operand::Diagonal(e)) => {
            Operand::Dense(Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * e[j]))
        }
        (Product::Op(Operand::Dense(a)), Operand::Dense(b)) => Operand::Dense(a * b),
    })
}

/// Evaluates `p` with circular letters bound to `scale_circulars` times their matrices.
pub fn evaluate(p: &NcPolynomial, a: &MatrixAssignment, scale_circulars: f64) -> Result<Mat<c64>, PolyError> {
    let n = a.n;
    let mut operands: BTreeMap<Symbol, Operand> = BTreeMap::new();
    for m in &p.monomials {
        for s in &m.word {
            if !operands.contains_key(s) {
                operands.insert(*s, a.operand(*s, scale_circulars)?);
            }
        }
    }
    let mut out = Mat::<c64>::zeros(n, n);
    // Monomials are sorted by word, so consecutive words share long prefixes.
    let mut stack: Vec<(Symbol, Product)> = Vec::new();
    for m in &p.monomials {
        let common = stack.iter().zip(&m.word).take_while(|((s, _), w)| s == *w).count();
        stack.truncate(common);
        for s in &m.word[common..] {
            let next = match stack.last() {
                Some((_, prev)) => times(prev, &operands[s]),
                None => times(&Product::Identity, &operands[s]),
            };
            stack.push((*s, next));
        }
        let c = m.coeff;
        match stack.last().map(|(_, p)| p) {
            None | Some(Product::Identity) => {
                for i in 0..n {
                    out[(i, i)] += c;
                }
            }
            Some(Product::Op(Operand::Diagonal(d))) => {
                for i in 0..n {
                    out[(i, i)] += c * d[i];
                }
            }
            Some(Product::Op(Operand::Dense(m))) => {
                out += faer::Scale(c) * m;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> c64 {
        c64::new(re, im)
    }

    fn diag(v: &[c64]) -> Mat<c64> {
        Mat::from_fn(v.len(), v.len(), |i, j| if i == j { v[i] } else { c(0.0, 0.0) })
    }

    #[test]
    fn single_letter() {
        let p = parse_polynomial("Y1", 1, 0).unwrap();
        assert_eq!(p.monomials().len(), 1);
        assert_eq!(p.monomials()[0].coeff, c(1.0, 0.0));
        assert_eq!(p.monomials()[0].word, vec![Symbol::Circular(1)]);
    }

    #[test]
    fn rational_power_and_letters() {
        let p = parse_polynomial("(1/6)*Y2^2*A1", 2, 1).unwrap();
        assert_eq!(p.monomials().len(), 1);
        assert!((p.monomials()[0].coeff - c(1.0 / 6.0, 0.0)).norm() < 1e-16);
        assert_eq!(
            p.monomials()[0].word,
            vec![Symbol::Circular(2), Symbol::Circular(2), Symbol::Deterministic(DetLetter::plain(1))]
        );
    }

    #[test]
    fn like_terms_combine() {
        let p = parse_polynomial("Y1 + Y1", 1, 0).unwrap();
        assert_eq!(p.monomials().len(), 1);
        assert_eq!(p.monomials()[0].coeff, c(2.0, 0.0));
        assert!(parse_polynomial("Y1 - Y1", 1, 0).unwrap().is_zero());
    }

    #[test]
    fn syntax_and_index_errors() {
        assert!(matches!(parse_polynomial("Y1 Y1", 1, 0), Err(PolyError::Syntax { .. })));
        assert!(matches!(parse_polynomial("Y1 +", 1, 0), Err(PolyError::Syntax { .. })));
        assert!(matches!(parse_polynomial("(Y1", 1, 0), Err(PolyError::Syntax { .. })));
        assert!(matches!(parse_polynomial("Y1^1.5", 1, 0), Err(PolyError::Syntax { .. })));
        assert!(matches!(parse_polynomial("Y2", 1, 0), Err(PolyError::Index { .. })));
        assert!(matches!(parse_polynomial("A1", 1, 0), Err(PolyError::Index { .. })));
        assert!(matches!(parse_polynomial("Y0", 1, 0), Err(PolyError::Index { .. })));
    }

    #[test]
    fn star_versus_product() {
        let a1 = Symbol::Deterministic(DetLetter::plain(1));
        let a1s = Symbol::Deterministic(DetLetter { index: 1, starred: true });
        let y1 = Symbol::Circular(1);
        let p = parse_polynomial("A1*Y1", 1, 1).unwrap();
        assert_eq!(p.monomials()[0].word, vec![a1, y1]);
        let p = parse_polynomial("A1**Y1", 1, 1).unwrap();
        assert_eq!(p.monomials()[0].word, vec![a1s, y1]);
        let p = parse_polynomial("A1*^2 + A1*", 1, 1).unwrap();
        assert_eq!(p.monomials()[0].word, vec![a1s]);
        assert_eq!(p.monomials()[1].word, vec![a1s, a1s]);
    }

    #[test]
    fn complex_literals() {
        let p = parse_polynomial("2i + i + 3 + (1/8) + 0.5 i", 0, 0).unwrap();
        assert_eq!(p.monomials()[0].coeff, c(3.125, 3.5));
        let p = parse_polynomial("(-1/2)", 0, 0).unwrap();
        assert_eq!(p.monomials()[0].coeff, c(-0.5, 0.0));
    }

    #[test]
    fn example_one_zeroed() {
        let p = parse_polynomial(
            "(3/2)*Y1 + (1/6)*Y2^2*A1 + (1/6)*Y2*Y3*A1*Y3 + A1^2*Y3 + A1 + (1/8)*A1^2",
            3,
            1,
        )
        .unwrap();
        let z = zero_circulars(&p);
        let want = parse_polynomial("A1 + (1/8)*A1^2", 3, 1).unwrap();
        assert_eq!(z, want);
        let mut a = MatrixAssignment::new(3);
        a.bind_deterministic(1, diag(&[c(2.0, 0.0), c(0.0, 2.0), c(0.0, 0.0)])).unwrap();
        for j in 1..=3 {
            a.bind_circular(j, Mat::zeros(3, 3)).unwrap();
        }
        let m = evaluate(&p, &a, 1.0).unwrap();
        let want = [c(2.5, 0.0), c(-0.5, 2.0), c(0.0, 0.0)];
        for i in 0..3 {
            assert!((m[(i, i)] - want[i]).norm() < 1e-14);
        }
    }

    #[test]
    fn example_four_zeroed() {
        let p = parse_polynomial("(1/5)*(Y1+3)*(Y2+A1+2)*(Y3+2) - 2", 3, 1).unwrap();
        let want = parse_polynomial("(6/5)*A1 + (2/5)", 3, 1).unwrap();
        assert!(zero_circulars(&p).approx_eq(&want, 1e-15));
        assert_eq!(p.monomials().len(), 12);
    }

    #[test]
    fn zeroing_is_identity_without_circulars() {
        let p = parse_polynomial("A1*A2 + 3", 0, 2).unwrap();
        assert_eq!(zero_circulars(&p), p);
    }

    #[test]
    fn small_evaluations() {
        let p = parse_polynomial("A1", 0, 1).unwrap();
        let a = MatrixAssignment::new(2).with_deterministic(1, Mat::identity(2, 2)).unwrap();
        assert_eq!(evaluate(&p, &a, 1.0).unwrap(), Mat::<c64>::identity(2, 2));

        let p = parse_polynomial("Y1*A1 + A1*Y1", 1, 1).unwrap();
        let y = Mat::from_fn(2, 2, |i, j| if (i, j) == (0, 1) { c(1.0, 0.0) } else { c(0.0, 0.0) });
        let a = MatrixAssignment::new(2)
            .with_circular(1, y)
            .unwrap()
            .with_deterministic(1, diag(&[c(1.0, 0.0), c(2.0, 0.0)]))
            .unwrap();
        let m = evaluate(&p, &a, 1.0).unwrap();
        assert_eq!(m[(0, 1)], c(3.0, 0.0));
        assert_eq!(m[(0, 0)] + m[(1, 0)] + m[(1, 1)], c(0.0, 0.0));
    }

    #[test]
    fn evaluation_errors() {
        let p = parse_polynomial("Y1*A1", 1, 1).unwrap();
        let a = MatrixAssignment::new(2).with_deterministic(1, Mat::identity(2, 2)).unwrap();
        assert!(matches!(evaluate(&p, &a, 1.0), Err(PolyError::MissingBinding(_))));
        assert!(matches!(
            MatrixAssignment::new(2).with_circular(1, Mat::zeros(3, 3)),
            Err(PolyError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn adjoint_rules() {
        let p = parse_polynomial("A1*A2", 0, 2).unwrap();
        assert_eq!(adjoint(&p).unwrap(), parse_polynomial("A2**A1*", 0, 2).unwrap());
        let p = parse_polynomial("(2i)*A1", 0, 1).unwrap();
        assert_eq!(adjoint(&p).unwrap(), parse_polynomial("(-2i)*A1*", 0, 1).unwrap());
        let p = parse_polynomial("A1 + A1*", 0, 1).unwrap();
        assert_eq!(adjoint(&p).unwrap(), p);
        let p = parse_polynomial("Y1", 1, 0).unwrap();
        assert_eq!(adjoint(&p), Err(PolyError::UnsupportedStarredCircular));
    }

    #[test]
    fn starred_evaluation_uses_adjoint() {
        let m = Mat::from_fn(2, 2, |i, j| c(i as f64 + 1.0, j as f64 - 0.5));
        let a = MatrixAssignment::new(2).with_deterministic(1, m.clone()).unwrap();
        let p = parse_polynomial("A1*", 0, 1).unwrap();
        let e = evaluate(&p, &a, 1.0).unwrap();
        assert_eq!(e, m.adjoint().to_owned());
    }

    #[test]
    fn rendering_examples() {
        let p = parse_polynomial("A1 + (1/8)*A1^2 - 2 + (1-2i)*A1*Y1", 1, 1).unwrap();
        let s = p.to_string();
        assert_eq!(parse_polynomial(&s, 1, 1).unwrap(), p);
        assert_eq!(NcPolynomial::zero(0, 0).to_string(), "0");
        assert_eq!(parse_polynomial("-Y1", 1, 0).unwrap().to_string(), "-Y1");
    }

    fn symbol_strategy(u: usize, t: usize) -> impl Strategy<Value = Symbol> {
        prop_oneof![
            (1..=u).prop_map(Symbol::Circular),
            (1..=t, any::<bool>()).prop_map(|(index, starred)| Symbol::Deterministic(DetLetter { index, starred })),
        ]
    }

    fn poly_strategy(u: usize, t: usize) -> impl Strategy<Value = NcPolynomial> {
        prop::collection::vec(
            ((-3i32..=3, -3i32..=3), prop::collection::vec(symbol_strategy(u, t), 0..4)),
            0..5,
        )
        .prop_map(move |terms| {
            NcPolynomial::from_terms(
                u,
                t,
                terms.into_iter().map(|((re, im), w)| (c64::new(re as f64 / 4.0, im as f64 / 3.0), w)),
            )
            .unwrap()
        })
    }

    fn expr_text() -> impl Strategy<Value = String> {
        let leaf = prop_oneof![
            (1u32..=2).prop_map(|j| format!("Y{j}")),
            (1u32..=2, any::<bool>()).prop_map(|(k, s)| format!("A{k}{}", if s { "*" } else { "" })),
            (0u32..100).prop_map(|n| format!("{}", n as f64 / 8.0)),
            (0u32..10).prop_map(|n| format!("{n}i")),
            Just("i".to_string()),
            (1u32..9, 1u32..9).prop_map(|(a, b)| format!("({a}/{b})")),
        ];
        leaf.prop_recursive(4, 24, 3, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("{a} + {b}")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("{a} - {b}")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) * ({b})")),
                (inner.clone(), 0u32..3).prop_map(|(a, e)| format!("({a})^{e}")),
            ]
        })
    }

    fn random_assignment(n: usize, seed: u64) -> MatrixAssignment {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut a = MatrixAssignment::new(n);
        for j in 1..=2 {
            a.bind_circular(j, Mat::from_fn(n, n, |_, _| c64::new(next(), next()))).unwrap();
            a.bind_deterministic(j, Mat::from_fn(n, n, |_, _| c64::new(next(), next()))).unwrap();
        }
        a
    }

    fn rel_err(a: &Mat<c64>, b: &Mat<c64>) -> f64 {
        (a - b).norm_l2() / (1.0 + b.norm_l2())
    }

    proptest! {
        #[test]
        fn render_round_trip(p in poly_strategy(2, 2)) {
            let back = parse_polynomial(&p.to_string(), 2, 2).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn grammar_text_parses_and_round_trips(s in expr_text()) {
            let p = parse_polynomial(&s, 2, 2).unwrap();
            let back = parse_polynomial(&p.to_string(), 2, 2).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn evaluation_is_a_ring_homomorphism(p in poly_strategy(2, 2), q in poly_strategy(2, 2), seed in any::<u64>()) {
            let a = random_assignment(4, seed);
            let ep = evaluate(&p, &a, 0.7).unwrap();
            let eq = evaluate(&q, &a, 0.7).unwrap();
            prop_assert!(rel_err(&evaluate(&p.add(&q), &a, 0.7).unwrap(), &(&ep + &eq)) < 1e-12);
            prop_assert!(rel_err(&evaluate(&p.mul(&q), &a, 0.7).unwrap(), &(&ep * &eq)) < 1e-12);
        }

        #[test]
        fn adjoint_is_an_involution(p in poly_strategy(1, 2)) {
            let q = zero_circulars(&p);
            prop_assert_eq!(adjoint(&adjoint(&q).unwrap()).unwrap(), q);
        }
    }
}
