//! Seeded random mixtures and simplex points, for tests and sweeps.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::mixture::{MixtureSpec, ReducedDensity};

/// Uniform (Dirichlet(1)) point of the open simplex with every component,
/// the reconstructed last one included, at least `margin`.
pub fn sample_simplex<R: Rng + ?Sized>(rng: &mut R, n_species: usize, margin: f64) -> ReducedDensity {
    assert!(n_species >= 2 && margin * (n_species as f64) < 1.0);
    loop {
        let e: Vec<f64> = (0..n_species).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = e.iter().sum();
        let rho: Vec<f64> = e.iter().map(|v| v / total).collect();
        let last = 1.0 - rho[..n_species - 1].iter().sum::<f64>();
        if rho.iter().all(|v| *v >= margin && *v > 0.0) && last >= margin && last > 0.0 {
            return ReducedDensity::new_unchecked(rho[..n_species - 1].to_vec());
        }
    }
}

/// Molar masses in [0.5, 50] (log-uniform) and diffusivities in [0.1, 2].
pub fn random_spec<R: Rng + ?Sized>(rng: &mut R, n_species: usize) -> MixtureSpec {
    let masses = (0..n_species)
        .map(|_| (rng.random_range(0.5f64.ln()..50.0f64.ln())).exp())
        .collect();
    let upper: Vec<f64> = (0..n_species * (n_species - 1) / 2)
        .map(|_| rng.random_range(0.1..2.0))
        .collect();
    MixtureSpec::from_upper_triangle(masses, &upper).expect("sampled spec is valid")
}
