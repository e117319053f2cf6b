//! Spectra and outliers of polynomials in circular and deterministic random matrices.
//!
//! The pipeline: parse a polynomial ([`ncpoly`]), linearize it ([`linearize`]), decide
//! membership of points in the limiting spectrum ([`freespec`]), and predict and match
//! outlier eigenvalues of finite-size models ([`outliers`]) sampled with [`randmat`].

pub mod freespec;
pub mod linalg;
pub mod linearize;
pub mod ncpoly;
pub mod outliers;
pub mod randmat;
