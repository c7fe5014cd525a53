//! Body forces `f(t, x)` and their averages over a time step.

use std::f64::consts::PI;

use crate::grid::{Bc, Grid, VectorField};

/// Temporal factor `g(t)` of a separable force.
#[derive(Clone, Debug, PartialEq)]
pub enum TimeProfile {
    /// `g(t) = t`.
    Linear,
    /// `g(t) = sin(ωt)`.
    Sine { omega: f64 },
    /// `g(t) = exp(−(t − t₀)² / 2σ²)`.
    Gaussian { center: f64, width: f64 },
}

/// Spatial factor `F(x)`.
#[derive(Clone, Debug, PartialEq)]
pub enum SpaceProfile {
    Uniform { value: [f64; 2] },
    /// A single divergence-free cell,
    /// `A (sin²(πx) sin(2πy), −sin(2πx) sin²(πy))`; `A sin(πx)` in 1D.
    Vortex { amplitude: f64 },
}

impl SpaceProfile {
    fn eval(&self, grid: &Grid) -> VectorField {
        match *self {
            SpaceProfile::Uniform { value } => VectorField::from_fn(*grid, Bc::Dirichlet, |_| value),
            SpaceProfile::Vortex { amplitude: a } => {
                let one_d = grid.dim() == 1;
                VectorField::from_fn(*grid, Bc::Dirichlet, |[x, y]| {
                    if one_d {
                        [a * (PI * x).sin(), 0.0]
                    } else {
                        [
                            a * (PI * x).sin().powi(2) * (2.0 * PI * y).sin(),
                            -a * (2.0 * PI * x).sin() * (PI * y).sin().powi(2),
                        ]
                    }
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub enum Forcing {
    #[default]
    Zero,
    Constant(SpaceProfile),
    Separable { time: TimeProfile, space: SpaceProfile },
}

/// Five-point Gauss-Legendre nodes and weights on [−1, 1].
const GAUSS5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664_0, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664_0, 0.236_926_885_056_189_1),
];

impl TimeProfile {
    /// `(1/τ) ∫ g` over `((k−1)τ, kτ)`.
    fn average(&self, k: usize, tau: f64) -> f64 {
        let (a, b) = ((k as f64 - 1.0) * tau, k as f64 * tau);
        match *self {
            TimeProfile::Linear => 0.5 * (a + b),
            TimeProfile::Sine { omega } if omega == 0.0 => 0.0,
            TimeProfile::Sine { omega } => ((omega * a).cos() - (omega * b).cos()) / (omega * tau),
            TimeProfile::Gaussian { center, width } => {
                let (mid, half) = (0.5 * (a + b), 0.5 * tau);
                0.5 * GAUSS5
                    .iter()
                    .map(|(x, w)| {
                        let t = mid + half * x;
                        w * (-(t - center).powi(2) / (2.0 * width * width)).exp()
                    })
                    .sum::<f64>()
            }
        }
    }
}

/// `f^k = (1/τ) ∫_{(k−1)τ}^{kτ} f(t) dt`, exact for every built-in profile but
/// the Gaussian pulse, which uses five-point Gauss quadrature.
pub fn average_force(forcing: &Forcing, grid: &Grid, k: usize, tau: f64) -> VectorField {
    match forcing {
        Forcing::Zero => VectorField::zeros(*grid, Bc::Dirichlet),
        Forcing::Constant(space) => space.eval(grid),
        Forcing::Separable { time, space } => {
            let g = time.average(k, tau);
            let mut f = space.eval(grid);
            f.comps.iter_mut().flatten().for_each(|v| *v *= g);
            f
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new(&[8, 8], &[1.0, 1.0]).unwrap()
    }

    #[test]
    fn zero_and_constant() {
        let g = grid();
        let f = average_force(&Forcing::Zero, &g, 3, 0.1);
        assert!(f.comps.iter().flatten().all(|v| *v == 0.0));
        let space = SpaceProfile::Uniform { value: [1.5, -2.0] };
        let f = average_force(&Forcing::Constant(space), &g, 7, 0.1);
        assert!(f.comps[0].iter().all(|v| *v == 1.5));
        assert!(f.comps[1].iter().all(|v| *v == -2.0));
    }

    #[test]
    fn linear_in_time_first_step_is_half_tau() {
        let g = grid();
        let space = SpaceProfile::Vortex { amplitude: 1.0 };
        let tau = 0.01;
        let f = average_force(
            &Forcing::Separable { time: TimeProfile::Linear, space: space.clone() },
            &g,
            1,
            tau,
        );
        let shape = space.eval(&g);
        for (a, b) in f.comps.iter().flatten().zip(shape.comps.iter().flatten()) {
            assert!((a - 0.5 * tau * b).abs() < 1e-16);
        }
    }

    #[test]
    fn time_averages_match_quadrature_oracle() {
        // composite Simpson with many panels as an independent oracle
        let simpson = |g: &dyn Fn(f64) -> f64, a: f64, b: f64| {
            let n = 2000;
            let h = (b - a) / n as f64;
            let mut s = g(a) + g(b);
            for i in 1..n {
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(a + i as f64 * h);
            }
            s * h / 3.0 / (b - a)
        };
        let tau = 0.05;
        for k in [1, 4, 20] {
            let (a, b) = ((k - 1) as f64 * tau, k as f64 * tau);
            let sine = TimeProfile::Sine { omega: 7.0 };
            assert!((sine.average(k, tau) - simpson(&|t| (7.0 * t).sin(), a, b)).abs() < 1e-12);
            let pulse = TimeProfile::Gaussian { center: 0.3, width: 0.2 };
            let exact = simpson(&|t| (-(t - 0.3f64).powi(2) / 0.08).exp(), a, b);
            assert!((pulse.average(k, tau) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn vortex_force_divergence_vanishes_under_refinement() {
        let max_div = |n: usize| {
            let f = SpaceProfile::Vortex { amplitude: 2.0 }.eval(&Grid::new(&[n, n], &[1.0, 1.0]).unwrap());
            crate::grid::div(&f).values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        // first order in the max norm: the wide stencil meets the wall
        let ratio = max_div(32) / max_div(64);
        assert!(ratio > 1.8, "{ratio}");
    }
}
