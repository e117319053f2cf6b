use faer::c64;
use ncspec_core::freespec::{HermitizedModel, Tolerances};
use ncspec_core::linalg;
use ncspec_core::linearize::linearize_in_order;
use ncspec_core::ncpoly::{DetLetter, MatrixAssignment, NcPolynomial, Symbol};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_polynomial(rng: &mut ChaCha8Rng) -> NcPolynomial {
    loop {
        let terms: Vec<(c64, Vec<Symbol>)> = (0..rng.random_range(2..=5))
            .map(|_| {
                let coeff = c64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let word = (0..rng.random_range(0..=3))
                    .map(|_| {
                        if rng.random::<bool>() {
                            Symbol::Circular(rng.random_range(1..=2))
                        } else {
                            Symbol::Deterministic(DetLetter { index: 1, starred: rng.random::<bool>() })
                        }
                    })
                    .collect();
                (coeff, word)
            })
            .collect();
        let p = NcPolynomial::from_terms(2, 1, terms).unwrap();
        if p.circular_degree() > 0 && p.monomials().len() > 1 {
            return p;
        }
    }
}

#[test]
fn verdicts_do_not_depend_on_the_gluing_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tol = Tolerances::default();
    let mut compared = 0;
    for _ in 0..10 {
        let p = random_polynomial(&mut rng);
        let values: Vec<c64> = (0..6).map(|_| c64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let a = MatrixAssignment::new(6).with_deterministic(1, linalg::diag_matrix(&values)).unwrap();
        let k = p.monomials().len();
        let identity: Vec<usize> = (0..k).collect();
        let reversed: Vec<usize> = (0..k).rev().collect();
        let mut shuffled = identity.clone();
        shuffled.shuffle(&mut rng);
        let models: Vec<HermitizedModel> = [identity, reversed, shuffled]
            .iter()
            .map(|order| HermitizedModel::new(linearize_in_order(&p, order).unwrap(), &a).unwrap())
            .collect();
        for _ in 0..50 {
            let z = c64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let radii: Vec<f64> = models.iter().map(|h| h.delta1_radius(z).unwrap_or(f64::NAN)).collect();
            if radii.iter().any(|r| !r.is_finite() || (r - 1.0).abs() < 2.0 * tol.margin) {
                continue;
            }
            let verdicts: Vec<bool> = models.iter().map(|h| h.is_outside_spectrum(z, &tol).verdict.is_outside()).collect();
            assert!(verdicts.iter().all(|v| *v == verdicts[0]), "{p:?} at {z}: {verdicts:?}, radii {radii:?}");
            compared += 1;
        }
    }
    assert!(compared > 300, "{compared}");
}
