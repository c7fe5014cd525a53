//! Implicit steps of the velocity-pressure subsystem.
//!
//! The artificial-compressibility step solves
//!
//! ```text
//! (u − u⁻)/τ + C(u)u − Δu + ∇p = f
//! ε (p − p⁻)/τ + div u = 0
//! ```
//!
//! where `⟨C(a)v, w⟩ = b̂(a, v, w)`. Substituting `p = p⁻ − (τ/ε) div u` leaves
//! one grad-div augmented system for `u`, linearized by Picard iteration on the
//! advecting field and solved with Jacobi-preconditioned GMRES.
//!
//! [`incompressible_step`] solves the same momentum equation with the
//! constraint `div u = 0` instead, which is the ε → 0 limit of the scheme on
//! the same grid.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::grid::{
    diff_acc, dirichlet_form, div, laplacian_acc, neg_laplacian_diag, skew_advection_acc, Bc,
    Grid, ScalarField, VectorField,
};
use crate::linalg::{cg, gmres};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub u: VectorField,
    pub p: ScalarField,
}

impl FlowState {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            u: VectorField::zeros(grid, Bc::Dirichlet),
            p: ScalarField::zeros(grid, Bc::Neumann),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams {
    pub eps: f64,
    pub tau: f64,
    /// Relative nonlinear residual target; linear solves use `1e-2 · tol`.
    pub tol: f64,
    pub max_picard: usize,
    pub max_linear: usize,
    pub restart: usize,
}

impl FlowParams {
    pub fn new(eps: f64, tau: f64, tol: f64) -> Self {
        Self {
            eps,
            tau,
            tol,
            max_picard: 50,
            max_linear: 20_000,
            restart: 80,
        }
    }

    fn validate(&self, needs_eps: bool) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("tol", self.tol)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} = {v} must be positive")));
            }
        }
        if needs_eps && !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Domain(format!("eps = {} must be positive", self.eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowStepReport {
    pub picard_iterations: usize,
    pub linear_iterations: usize,
    /// `‖A(u)u − b‖ / ‖b‖` at the returned velocity.
    pub final_residual: f64,
    /// Absolute defect of the discrete energy identity.
    pub energy_identity_residual: f64,
    /// Max-norm defect of `ε(p − p⁻)/τ + div u`; `‖div u‖` for the incompressible step.
    pub pressure_residual: f64,
}

/// `u/τ − Δu + C(a)u − γ ∇div u` on flattened components.
struct Momentum<'a> {
    grid: Grid,
    adv: &'a VectorField,
    inv_tau: f64,
    grad_div: f64,
}

impl Momentum<'_> {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let nc = g.n_cells();
        out.iter_mut().for_each(|v| *v = 0.0);
        for d in 0..g.dim() {
            let (xd, od) = (&x[d * nc..(d + 1) * nc], &mut out[d * nc..(d + 1) * nc]);
            for (o, v) in od.iter_mut().zip(xd) {
                *o = self.inv_tau * v;
            }
            laplacian_acc(g, Bc::Dirichlet, xd, -1.0, od);
            skew_advection_acc(self.adv, Bc::Dirichlet, xd, 1.0, od);
        }
        if self.grad_div != 0.0 {
            let mut dv = vec![0.0; nc];
            for d in 0..g.dim() {
                diff_acc(g, d, Bc::Dirichlet, &x[d * nc..(d + 1) * nc], 1.0, &mut dv);
            }
            for d in 0..g.dim() {
                diff_acc(g, d, Bc::Neumann, &dv, -self.grad_div, &mut out[d * nc..(d + 1) * nc]);
            }
        }
    }

    /// The skew advection block has a zero diagonal.
    fn diagonal(&self) -> Vec<f64> {
        let g = &self.grid;
        let lap = neg_laplacian_diag(g, Bc::Dirichlet);
        let mut diag = Vec::with_capacity(g.dim() * g.n_cells());
        for d in 0..g.dim() {
            let gd = self.grad_div / (2.0 * g.spacing()[d].powi(2));
            diag.extend(lap.iter().map(|l| self.inv_tau + l + gd));
        }
        diag
    }
}

fn flatten(v: &VectorField) -> Vec<f64> {
    v.comps.concat()
}

fn unflatten(grid: Grid, x: &[f64]) -> VectorField {
    let nc = grid.n_cells();
    VectorField {
        grid,
        bc: Bc::Dirichlet,
        comps: x.chunks(nc).map(|c| c.to_vec()).collect(),
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_inputs(prev: &FlowState, f_k: &VectorField) -> Result<Grid> {
    let grid = prev.u.grid;
    grid.check_same(&prev.p.grid)?;
    grid.check_same(&f_k.grid)?;
    if prev.u.bc != Bc::Dirichlet || prev.p.bc != Bc::Neumann {
        return Err(Error::Domain(
            "velocity must be Dirichlet and pressure Neumann".into(),
        ));
    }
    Ok(grid)
}

/// `f + u⁻/τ − ∇p`.
fn momentum_rhs(grid: &Grid, u_prev: &VectorField, p: &[f64], f_k: &VectorField, tau: f64) -> Vec<f64> {
    let nc = grid.n_cells();
    let mut b: Vec<f64> = f_k
        .comps
        .iter()
        .zip(&u_prev.comps)
        .flat_map(|(f, u)| f.iter().zip(u).map(|(f, u)| f + u / tau).collect::<Vec<_>>())
        .collect();
    for d in 0..grid.dim() {
        diff_acc(grid, d, Bc::Neumann, p, -1.0, &mut b[d * nc..(d + 1) * nc]);
    }
    b
}

fn jacobi(diag: &[f64]) -> impl FnMut(&[f64], &mut [f64]) + '_ {
    move |r, z| {
        for ((z, r), d) in z.iter_mut().zip(r).zip(diag) {
            *z = r / d;
        }
    }
}

/// Relative residual of `A(u)u = b` with the operator frozen at `u` itself.
fn nonlinear_residual(grid: Grid, x: &[f64], b: &[f64], inv_tau: f64, grad_div: f64) -> f64 {
    let u = unflatten(grid, x);
    let op = Momentum { grid, adv: &u, inv_tau, grad_div };
    let mut r = vec![0.0; x.len()];
    op.apply(x, &mut r);
    let diff: Vec<f64> = r.iter().zip(b).map(|(a, b)| a - b).collect();
    let bn = norm(b);
    if bn == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / bn
    }
}

/// `‖u‖² + ε‖p‖² + 2τ‖∇u‖² + ‖u−u⁻‖² + ε‖p−p⁻‖² − ‖u⁻‖² − ε‖p⁻‖² − 2τ⟨f,u⟩`.
pub fn energy_identity_defect(
    prev: &FlowState,
    next: &FlowState,
    f_k: &VectorField,
    eps: f64,
    tau: f64,
) -> f64 {
    let g = &next.u.grid;
    let du: f64 = next
        .u
        .comps
        .iter()
        .zip(&prev.u.comps)
        .map(|(a, b)| {
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            g.dot(&d, &d)
        })
        .sum();
    let dp: Vec<f64> = next.p.values.iter().zip(&prev.p.values).map(|(a, b)| a - b).collect();
    let grad_sq: f64 = next.u.comps.iter().map(|c| dirichlet_form(g, Bc::Dirichlet, c)).sum();
    let work: f64 = next.u.comps.iter().zip(&f_k.comps).map(|(u, f)| g.dot(u, f)).sum();
    let lhs = next.u.norm_sq() + eps * next.p.norm_sq() + 2.0 * tau * grad_sq + du + eps * g.dot(&dp, &dp);
    let rhs = prev.u.norm_sq() + eps * prev.p.norm_sq() + 2.0 * tau * work;
    (lhs - rhs).abs()
}

/// One artificial-compressibility step.
pub fn flow_step(
    prev: &FlowState,
    f_k: &VectorField,
    params: &FlowParams,
) -> Result<(FlowState, FlowStepReport)> {
    params.validate(true)?;
    let grid = check_inputs(prev, f_k)?;
    let FlowParams { eps, tau, tol, .. } = *params;
    let gamma = tau / eps;
    let inv_tau = 1.0 / tau;

    let b = momentum_rhs(&grid, &prev.u, &prev.p.values, f_k, tau);
    if norm(&b) == 0.0 {
        let next = FlowState {
            u: VectorField::zeros(grid, Bc::Dirichlet),
            p: prev.p.clone(),
        };
        return Ok((next, FlowStepReport::default()));
    }

    let diag = Momentum { grid, adv: &prev.u, inv_tau, grad_div: gamma }.diagonal();
    let mut adv = prev.u.clone();
    let mut x = flatten(&prev.u);
    let mut report = FlowStepReport::default();
    let mut trace = Vec::new();
    loop {
        report.picard_iterations += 1;
        let op = Momentum { grid, adv: &adv, inv_tau, grad_div: gamma };
        let stats = gmres(
            |v, o| op.apply(v, o),
            jacobi(&diag),
            &b,
            &mut x,
            1e-2 * tol,
            params.restart,
            params.max_linear,
        )?;
        report.linear_iterations += stats.iterations;
        let res = nonlinear_residual(grid, &x, &b, inv_tau, gamma);
        trace.push(res);
        report.final_residual = res;
        if res <= tol {
            break;
        }
        if report.picard_iterations == params.max_picard {
            return Err(Error::NonConvergence {
                solver: "picard",
                iterations: report.picard_iterations,
                residual: res,
                trace,
            });
        }
        adv = unflatten(grid, &x);
    }

    let u = unflatten(grid, &x);
    let div_u = div(&u);
    let p: Vec<f64> = prev
        .p
        .values
        .iter()
        .zip(&div_u.values)
        .map(|(p, d)| p - gamma * d)
        .collect();
    report.pressure_residual = p
        .iter()
        .zip(&prev.p.values)
        .zip(&div_u.values)
        .map(|((p, q), d)| (eps * (p - q) / tau + d).abs())
        .fold(0.0, f64::max);
    let next = FlowState {
        u,
        p: ScalarField { grid, bc: Bc::Neumann, values: p },
    };
    report.energy_identity_residual = energy_identity_defect(prev, &next, f_k, eps, tau);
    Ok((next, report))
}

/// Relative accuracy of one saddle-point correction in the incompressible step.
const CORRECTION_RTOL: f64 = 1e-3;
/// Relative accuracy of momentum solves inside a correction.
const INNER_RTOL: f64 = 1e-6;

/// Projects out the constants, the null space of the pressure gradient.
/// Exact divergences have zero mean; this removes the roundoff that would
/// otherwise make the singular systems below inconsistent.
fn remove_mean(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// `out = D Dᵀ φ = −div ∇φ` with the wide central stencil.
fn wide_poisson(grid: &Grid, phi: &[f64], out: &mut [f64]) {
    let nc = grid.n_cells();
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut g = vec![0.0; nc];
    for d in 0..grid.dim() {
        g.iter_mut().for_each(|v| *v = 0.0);
        diff_acc(grid, d, Bc::Neumann, phi, 1.0, &mut g);
        diff_acc(grid, d, Bc::Dirichlet, &g, -1.0, out);
    }
}

/// One step of the incompressible limit: the momentum equation above with
/// `div u = 0` enforced by a Lagrange multiplier.
///
/// Each outer iteration freezes the advecting field at the current iterate
/// and solves the saddle-point correction
///
/// ```text
/// A δu − Dᵀδp = r_u,   D δu = −D u
/// ```
///
/// through the pressure Schur complement `S = D A⁻¹ Dᵀ`, by GMRES with the
/// Cahouet-Chabard preconditioner `(1/τ)(D Dᵀ)⁻¹ + I`. Corrections are only
/// solved to [`CORRECTION_RTOL`]; the outer loop drives the full residual to
/// `tol`. A final projection with the wide-stencil Poisson operator removes
/// the remaining divergence.
pub fn incompressible_step(
    prev: &FlowState,
    f_k: &VectorField,
    params: &FlowParams,
) -> Result<(FlowState, FlowStepReport)> {
    params.validate(false)?;
    let grid = check_inputs(prev, f_k)?;
    let FlowParams { tau, tol, .. } = *params;
    let inv_tau = 1.0 / tau;
    let nc = grid.n_cells();
    let dim = grid.dim();
    let b0 = momentum_rhs(&grid, &prev.u, &vec![0.0; nc], f_k, tau);
    let b0_norm = norm(&b0);
    if b0_norm == 0.0 {
        let next = FlowState {
            u: VectorField::zeros(grid, Bc::Dirichlet),
            p: prev.p.clone(),
        };
        return Ok((next, FlowStepReport::default()));
    }
    let diag = Momentum { grid, adv: &prev.u, inv_tau, grad_div: 0.0 }.diagonal();
    let grad = |q: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for d in 0..dim {
            diff_acc(&grid, d, Bc::Neumann, q, 1.0, &mut out[d * nc..(d + 1) * nc]);
        }
    };
    let divergence = |v: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|o| *o = 0.0);
        for d in 0..dim {
            diff_acc(&grid, d, Bc::Dirichlet, &v[d * nc..(d + 1) * nc], 1.0, out);
        }
        remove_mean(out);
    };

    let mut report = FlowStepReport::default();
    let mut p = prev.p.values.clone();
    let mut x = flatten(&prev.u);
    let mut trace = Vec::new();
    let mut ru = vec![0.0; dim * nc];
    let mut rp = vec![0.0; nc];
    loop {
        let adv = unflatten(grid, &x);
        let op = Momentum { grid, adv: &adv, inv_tau, grad_div: 0.0 };
        // r_u = b0 + Dᵀp − A u, r_p = −D u
        op.apply(&x, &mut ru);
        let mut gp = vec![0.0; dim * nc];
        grad(&p, &mut gp);
        for ((r, b), g) in ru.iter_mut().zip(&b0).zip(&gp) {
            *r = b - g - *r;
        }
        divergence(&x, &mut rp);
        rp.iter_mut().for_each(|v| *v = -*v);
        let res = (norm(&ru).powi(2) + norm(&rp).powi(2)).sqrt() / b0_norm;
        trace.push(res);
        report.final_residual = res;
        if res <= tol {
            break;
        }
        if report.picard_iterations == params.max_picard {
            return Err(Error::NonConvergence {
                solver: "picard",
                iterations: report.picard_iterations,
                residual: res,
                trace,
            });
        }
        report.picard_iterations += 1;

        let inner_its = Cell::new(0);
        let failure = RefCell::new(None);
        let solve = |rhs: &[f64], sol: &mut [f64]| {
            sol.iter_mut().for_each(|v| *v = 0.0);
            match gmres(|v, o| op.apply(v, o), jacobi(&diag), rhs, sol, INNER_RTOL, params.restart, params.max_linear) {
                Ok(s) => inner_its.set(inner_its.get() + s.iterations),
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                }
            }
        };
        // q ↦ D A⁻¹ Dᵀ q, with Dᵀ = −grad
        let schur = |q: &[f64], out: &mut [f64]| {
            let mut gq = vec![0.0; dim * nc];
            grad(q, &mut gq);
            gq.iter_mut().for_each(|v| *v = -*v);
            let mut y = vec![0.0; dim * nc];
            solve(&gq, &mut y);
            divergence(&y, out);
        };
        let cahouet_chabard = |r: &[f64], z: &mut [f64]| {
            let mut rm = r.to_vec();
            remove_mean(&mut rm);
            let mut phi = vec![0.0; nc];
            if let Err(e) = cg(|v, o| wide_poisson(&grid, v, o), |r, z| z.copy_from_slice(r), &rm, &mut phi, 1e-8, params.max_linear) {
                failure.borrow_mut().get_or_insert(e);
            }
            for ((z, r), f) in z.iter_mut().zip(&rm).zip(&phi) {
                *z = r + inv_tau * f;
            }
        };
        let mut a_ru = vec![0.0; dim * nc];
        solve(&ru, &mut a_ru);
        let mut srhs = vec![0.0; nc];
        divergence(&a_ru, &mut srhs);
        for (s, r) in srhs.iter_mut().zip(&rp) {
            *s = r - *s;
        }
        let mut dp = vec![0.0; nc];
        let stats = gmres(schur, cahouet_chabard, &srhs, &mut dp, CORRECTION_RTOL, params.restart, params.max_linear);
        if let Some(e) = failure.borrow_mut().take() {
            return Err(e);
        }
        report.linear_iterations += stats?.iterations;
        // δu = A⁻¹(r_u + Dᵀδp)
        let mut rhs = vec![0.0; dim * nc];
        grad(&dp, &mut rhs);
        for (v, r) in rhs.iter_mut().zip(&ru) {
            *v = r - *v;
        }
        let mut du = vec![0.0; dim * nc];
        solve(&rhs, &mut du);
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        report.linear_iterations += inner_its.get();
        x.iter_mut().zip(&du).for_each(|(a, b)| *a += b);
        p.iter_mut().zip(&dp).for_each(|(a, b)| *a += b);
    }

    // projection: u ← u − Dᵀφ with D Dᵀ φ = D u, and p ← p − φ/τ
    let mut u = unflatten(grid, &x);
    let mut du = div(&u).values;
    remove_mean(&mut du);
    let mut phi = vec![0.0; nc];
    cg(
        |v, o| wide_poisson(&grid, v, o),
        |r, z| z.copy_from_slice(r),
        &du,
        &mut phi,
        1e-8,
        params.max_linear,
    )?;
    for d in 0..dim {
        diff_acc(&grid, d, Bc::Neumann, &phi, 1.0, &mut u.comps[d]);
    }
    for (p, f) in p.iter_mut().zip(&phi) {
        *p -= f / tau;
    }
    let div_after = div(&u);
    report.pressure_residual = div_after.norm_sq().sqrt();
    let b = momentum_rhs(&grid, &prev.u, &p, f_k, tau);
    report.final_residual = nonlinear_residual(grid, &flatten(&u), &b, inv_tau, 0.0);
    let next = FlowState {
        u,
        p: ScalarField { grid, bc: Bc::Neumann, values: p },
    };
    report.energy_identity_residual = energy_identity_defect(prev, &next, f_k, 0.0, tau);
    Ok((next, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::trilinear_bhat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn square(n: usize) -> Grid {
        Grid::new(&[n, n], &[1.0, 1.0]).unwrap()
    }

    /// `(∂_y ψ, −∂_x ψ)` with Dirichlet-tagged central differences: discretely solenoidal.
    fn solenoidal(grid: Grid, amp: f64) -> VectorField {
        let psi = ScalarField::from_fn(grid, Bc::Dirichlet, |[x, y]| {
            amp * (PI * x).sin().powi(2) * (PI * y).sin().powi(2) / PI
        });
        let mut u = VectorField::zeros(grid, Bc::Dirichlet);
        diff_acc(&grid, 1, Bc::Dirichlet, &psi.values, 1.0, &mut u.comps[0]);
        diff_acc(&grid, 0, Bc::Dirichlet, &psi.values, -1.0, &mut u.comps[1]);
        u
    }

    fn random_state(grid: Grid, rng: &mut ChaCha8Rng) -> FlowState {
        let mut s = FlowState::zeros(grid);
        s.u.comps.iter_mut().flatten().for_each(|v| *v = rng.random_range(-1.0..1.0));
        s
    }

    #[test]
    fn momentum_operator_advection_is_bhat() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = square(8);
        let a = random_state(grid, &mut rng).u;
        let v = random_state(grid, &mut rng).u;
        let w = random_state(grid, &mut rng).u;
        let with = Momentum { grid, adv: &a, inv_tau: 0.0, grad_div: 0.0 };
        let zero = VectorField::zeros(grid, Bc::Dirichlet);
        let without = Momentum { grid, adv: &zero, inv_tau: 0.0, grad_div: 0.0 };
        let (mut o1, mut o2) = (vec![0.0; 2 * 64], vec![0.0; 2 * 64]);
        with.apply(&flatten(&v), &mut o1);
        without.apply(&flatten(&v), &mut o2);
        let adv: Vec<f64> = o1.iter().zip(&o2).map(|(a, b)| a - b).collect();
        let lhs = grid.dot(&adv, &flatten(&w));
        let rhs = trilinear_bhat(&a, &v, &w).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn zero_state_stays_zero() {
        let grid = square(8);
        let prev = FlowState::zeros(grid);
        let f = VectorField::zeros(grid, Bc::Dirichlet);
        let (next, report) = flow_step(&prev, &f, &FlowParams::new(1e-2, 1e-2, 1e-10)).unwrap();
        assert_eq!(next, prev);
        assert_eq!(report.picard_iterations, 0);
    }

    #[test]
    fn rejects_bad_parameters() {
        let grid = square(8);
        let prev = FlowState::zeros(grid);
        let f = VectorField::zeros(grid, Bc::Dirichlet);
        assert!(flow_step(&prev, &f, &FlowParams::new(0.0, 1e-2, 1e-10)).is_err());
        assert!(flow_step(&prev, &f, &FlowParams::new(1e-2, -1.0, 1e-10)).is_err());
        let other = VectorField::zeros(square(16), Bc::Dirichlet);
        assert!(matches!(flow_step(&prev, &other, &FlowParams::new(1e-2, 1e-2, 1e-10)), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn energy_identity_holds_to_solver_tolerance() {
        let grid = square(32);
        let mut state = FlowState { u: solenoidal(grid, 1.0), p: ScalarField::zeros(grid, Bc::Neumann) };
        let f = VectorField::from_fn(grid, Bc::Dirichlet, |[x, y]| [(PI * x).sin() * y, 0.3]);
        let params = FlowParams::new(1e-2, 1e-3, 1e-10);
        for _ in 0..5 {
            let (next, report) = flow_step(&state, &f, &params).unwrap();
            assert!(report.final_residual <= 1e-10);
            assert!(report.energy_identity_residual <= 1e-8, "{report:?}");
            assert!(report.pressure_residual <= 1e-13, "{report:?}");
            state = next;
        }
    }

    #[test]
    fn unforced_energy_is_nonincreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = square(12);
        let f = VectorField::zeros(grid, Bc::Dirichlet);
        for tau in [1e-1, 1e-2, 1e-3] {
            for eps in [1e-1, 1e-2, 1e-3, 1e-4] {
                let params = FlowParams::new(eps, tau, 1e-10);
                let mut state = random_state(grid, &mut rng);
                let mut energy = state.u.norm_sq();
                for _ in 0..4 {
                    let (next, _) = flow_step(&state, &f, &params).unwrap();
                    let e = next.u.norm_sq() + eps * next.p.norm_sq();
                    assert!(e <= energy * (1.0 + 1e-12), "tau {tau} eps {eps}: {e} > {energy}");
                    energy = e;
                    state = next;
                }
            }
        }
    }

    #[test]
    fn one_dimensional_flow_decays() {
        let grid = Grid::new(&[32], &[1.0]).unwrap();
        let mut state = FlowState::zeros(grid);
        state.u = VectorField::from_fn(grid, Bc::Dirichlet, |[x, _]| [(PI * x).sin(), 0.0]);
        let f = VectorField::zeros(grid, Bc::Dirichlet);
        let params = FlowParams::new(1e-2, 1e-2, 1e-10);
        let (next, report) = flow_step(&state, &f, &params).unwrap();
        assert!(next.u.norm_sq() < state.u.norm_sq());
        assert!(report.energy_identity_residual < 1e-10);
    }

    #[test]
    fn incompressible_step_is_solenoidal_and_conserves_energy_identity() {
        let grid = square(24);
        let state = FlowState { u: solenoidal(grid, 1.0), p: ScalarField::zeros(grid, Bc::Neumann) };
        let f = VectorField::from_fn(grid, Bc::Dirichlet, |[x, y]| [(PI * x).sin() * y, x * x]);
        let params = FlowParams::new(0.0, 1e-2, 1e-10);
        let (next, report) = incompressible_step(&state, &f, &params).unwrap();
        assert!(report.pressure_residual <= 1e-10, "{report:?}");
        assert!(report.final_residual <= 1e-8, "{report:?}");
        assert!(report.energy_identity_residual <= 1e-8, "{report:?}");
        assert!(next.p.values.iter().sum::<f64>().abs() < 1e-8);
    }

    #[test]
    fn small_eps_approaches_the_incompressible_step() {
        let grid = square(16);
        let state = FlowState { u: solenoidal(grid, 1.0), p: ScalarField::zeros(grid, Bc::Neumann) };
        let f = VectorField::from_fn(grid, Bc::Dirichlet, |[x, y]| [y, x * x]);
        let tol = 1e-11;
        let (reference, _) = incompressible_step(&state, &f, &FlowParams::new(0.0, 1e-2, tol)).unwrap();
        let errors: Vec<f64> = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&eps| {
                let (next, _) = flow_step(&state, &f, &FlowParams::new(eps, 1e-2, tol)).unwrap();
                let d: Vec<f64> = flatten(&next.u).iter().zip(flatten(&reference.u)).map(|(a, b)| a - b).collect();
                grid.dot(&d, &d).sqrt()
            })
            .collect();
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
        // first order in ε once ε is small
        assert!(errors[4] < 0.2 * errors[3], "{errors:?}");
    }

    #[test]
    fn one_dimensional_incompressible_velocity_vanishes() {
        let grid = Grid::new(&[16], &[1.0]).unwrap();
        let state = FlowState::zeros(grid);
        let f = VectorField::zeros(grid, Bc::Dirichlet);
        let (next, _) = incompressible_step(&state, &f, &FlowParams::new(0.0, 1e-2, 1e-10)).unwrap();
        assert_eq!(next.u.norm_sq(), 0.0);
    }
}
