//! Implicit species step in entropy variables.
//!
//! The unknown is the entropy field `w`; densities are always recovered as
//! `ρ′(w)`, which lies strictly inside the simplex for every finite `w`. One
//! step solves, cell by cell,
//!
//! ```text
//! R(w) = (ρ′(w) − ρ′⁻)/τ − div(B ∇w) + adv(ρ′(w)) + λ(Δ²w + w) = 0
//! ```
//!
//! with `⟨adv(ρ), q⟩ = b̂(u, ρ, q) + ½⟨div u ρ, q⟩`.
//!
//! Diffusion is a two-point flux across every interior face. With `L` the
//! componentwise logarithmic mean of the molar fractions on both sides, the
//! face mobility is `B_f = (Σ Lᵢ) B(ρ̂)` where `ρ̂` are the densities of the
//! fractions `L / ΣL`. Because `Δ ln xᵢ = Δxᵢ / Lᵢ` exactly, this satisfies
//! the discrete chain rule `B_f Δw = A⁰(ρ̂)⁻¹ Δx′`: for a binary mixture of
//! equal molar masses the flux is exactly `D₁₂ Δρ₁`.
//!
//! The nonlinear system is solved by a damped quasi-Newton iteration on the
//! increment, with the Jacobian replaced by its symmetric positive definite
//! part `H⁻¹/τ + K_B + λ(Δ² + I)` frozen at the current iterate.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{div, laplacian_acc, skew_advection_acc, Bc, Grid, SpeciesField, VectorField};
use crate::linalg::cg;
use crate::mixture::{
    densities_from_entropy, entropy_density, entropy_vars, matrix_b, matrix_h, molar_fractions,
    EntropyVector, MixtureSpec, ReducedDensity,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SpeciesStepParams {
    pub tau: f64,
    pub lambda: f64,
    /// Target for `τ‖R(w)‖_{L²}`.
    pub newton_tol: f64,
    pub max_iters: usize,
    pub max_linear: usize,
}

impl SpeciesStepParams {
    pub fn new(tau: f64, lambda: f64, newton_tol: f64) -> Self {
        Self {
            tau,
            lambda,
            newton_tol,
            max_iters: 50,
            max_linear: 10_000,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Domain(format!("tau = {} must be positive", self.tau)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Domain(format!("lambda = {} must be nonnegative", self.lambda)));
        }
        if !(self.newton_tol.is_finite() && self.newton_tol > 0.0) {
            return Err(Error::Domain(format!(
                "newton_tol = {} must be positive",
                self.newton_tol
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpeciesStepReport {
    pub iterations: usize,
    pub linear_iterations: usize,
    /// `τ‖R(w)‖_{L²}` at the returned field.
    pub final_residual: f64,
    /// `∫h(ρ′⁻)`.
    pub entropy_before: f64,
    /// `∫h(ρ′(w))`.
    pub entropy_after: f64,
    /// `Σ_faces Δwᵀ B_f Δw`, the discrete `∫∇w : B∇w`.
    pub dissipation: f64,
    /// `⟨div u, ln x_{N+1} / M_{N+1}⟩`.
    pub control_term: f64,
    /// `−⟨adv(ρ′(w)), w⟩`, the exact discrete counterpart of the control term.
    pub advective_work: f64,
    /// `λ(‖Δw‖² + ‖w‖²)`.
    pub regularization: f64,
    /// `S_after − S_before + τ(dissipation + regularization − advective_work)`.
    /// Convexity of `h` makes this at most `τ⟨R(w), w⟩`.
    pub balance_slack: f64,
}

/// Densities of every cell of an entropy field.
pub fn densities_of(w: &SpeciesField, spec: &MixtureSpec) -> Result<SpeciesField> {
    check_species(w, spec)?;
    let mut rho = SpeciesField::zeros(w.grid, w.n);
    for cell in 0..w.grid.n_cells() {
        let r = densities_from_entropy(&EntropyVector::new(w.cell(cell).to_vec())?, spec)?;
        rho.cell_mut(cell).copy_from_slice(r.as_slice());
    }
    Ok(rho)
}

/// Entropy variables of every cell of a density field.
pub fn entropy_field_of(rho: &SpeciesField, spec: &MixtureSpec) -> Result<SpeciesField> {
    check_species(rho, spec)?;
    let mut w = SpeciesField::zeros(rho.grid, rho.n);
    for cell in 0..rho.grid.n_cells() {
        let e = entropy_vars(&ReducedDensity::new(rho.cell(cell).to_vec())?, spec)?;
        w.cell_mut(cell).copy_from_slice(e.as_slice());
    }
    Ok(w)
}

/// `∫ h(ρ′)`.
pub fn entropy_integral(rho: &SpeciesField, spec: &MixtureSpec) -> Result<f64> {
    check_species(rho, spec)?;
    let mut total = 0.0;
    for cell in 0..rho.grid.n_cells() {
        total += entropy_density(&ReducedDensity::new(rho.cell(cell).to_vec())?, spec)?;
    }
    Ok(total * rho.grid.cell_volume())
}

fn check_species(f: &SpeciesField, spec: &MixtureSpec) -> Result<()> {
    if f.n != spec.n_reduced() {
        return Err(Error::GridMismatch(format!(
            "species field has {} components, mixture evolves {}",
            f.n,
            spec.n_reduced()
        )));
    }
    Ok(())
}

/// `(a − b) / (ln a − ln b)`, with a series near `a = b`.
pub fn log_mean(a: f64, b: f64) -> f64 {
    let f = (a - b) / (a + b);
    let u = f * f;
    if u < 1e-4 {
        0.5 * (a + b) / (1.0 + u / 3.0 + u * u / 5.0 + u * u * u / 7.0)
    } else {
        (a - b) / (a.ln() - b.ln())
    }
}

/// Face mobility between two cells, given their full molar fraction vectors.
pub fn face_mobility(xa: &[f64], xb: &[f64], spec: &MixtureSpec) -> Result<DMatrix<f64>> {
    let n = spec.n_reduced();
    let m = spec.molar_masses();
    let l: Vec<f64> = xa.iter().zip(xb).map(|(a, b)| log_mean(*a, *b)).collect();
    let total: f64 = l.iter().sum();
    let mass: f64 = l.iter().zip(m).map(|(li, mi)| li * mi).sum();
    let rho_hat: Vec<f64> = (0..n).map(|i| m[i] * l[i] / mass).collect();
    Ok(matrix_b(&ReducedDensity::new_unchecked(rho_hat), spec)? * total)
}

/// Interior faces as `(cell a, cell b, axis)` with `b` the upper neighbour.
pub fn interior_faces(grid: &Grid) -> Vec<(usize, usize, usize)> {
    let ext = grid.extents();
    let (nx, ny) = (ext[0], if grid.dim() == 2 { ext[1] } else { 1 });
    let mut out = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let c = grid.index(i, j);
            if i + 1 < nx {
                out.push((c, grid.index(i + 1, j), 0));
            }
            if j + 1 < ny {
                out.push((c, grid.index(i, j + 1), 1));
            }
        }
    }
    out
}

/// `∫∇w : B∇w` with the face mobilities of `w` itself.
pub fn entropy_dissipation(w: &SpeciesField, spec: &MixtureSpec) -> Result<f64> {
    let rho = densities_of(w, spec)?;
    let x = (0..w.grid.n_cells())
        .map(|c| Ok(molar_fractions(&ReducedDensity::new_unchecked(rho.cell(c).to_vec()), spec)?.x))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for (a, b, axis) in interior_faces(&w.grid) {
        let bf = face_mobility(&x[a], &x[b], spec)?;
        let dw: Vec<f64> = w.cell(b).iter().zip(w.cell(a)).map(|(p, q)| p - q).collect();
        let h = w.grid.spacing()[axis];
        for s in 0..w.n {
            for t in 0..w.n {
                total += dw[s] * bf[(s, t)] * dw[t] / (h * h);
            }
        }
    }
    Ok(total * w.grid.cell_volume())
}

/// Pointwise quantities of one iterate.
struct Iterate {
    /// Densities, component-major.
    rho: Vec<f64>,
    /// `ln x_{N+1} / M_{N+1}` per cell.
    tail: Vec<f64>,
    /// `dρ′/dw = H⁻¹` per cell.
    hinv: Vec<DMatrix<f64>>,
    /// `B_f / h²` per interior face.
    face_k: Vec<DMatrix<f64>>,
}

/// Everything fixed during one step.
struct StepContext<'a> {
    grid: Grid,
    n: usize,
    spec: &'a MixtureSpec,
    faces: Vec<(usize, usize, usize)>,
    u: &'a VectorField,
    div_u: Vec<f64>,
    rho_prev: Vec<f64>,
    tau: f64,
    lambda: f64,
}

impl<'a> StepContext<'a> {
    fn new(
        w_prev: &SpeciesField,
        u: &'a VectorField,
        tau: f64,
        lambda: f64,
        spec: &'a MixtureSpec,
    ) -> Result<Self> {
        check_species(w_prev, spec)?;
        w_prev.grid.check_same(&u.grid)?;
        if u.bc != Bc::Dirichlet {
            return Err(Error::Domain("velocity must be Dirichlet".into()));
        }
        let grid = w_prev.grid;
        let mut ctx = Self {
            grid,
            n: w_prev.n,
            spec,
            faces: interior_faces(&grid),
            u,
            div_u: div(u).values,
            rho_prev: Vec::new(),
            tau,
            lambda,
        };
        ctx.rho_prev = ctx.iterate(&to_component_major(w_prev), false)?.rho;
        Ok(ctx)
    }

    fn nc(&self) -> usize {
        self.grid.n_cells()
    }

    fn cell_w(&self, w: &[f64], cell: usize) -> Vec<f64> {
        (0..self.n).map(|s| w[s * self.nc() + cell]).collect()
    }

    fn iterate(&self, w: &[f64], with_matrices: bool) -> Result<Iterate> {
        let (n, nc) = (self.n, self.nc());
        let mut rho = vec![0.0; n * nc];
        let mut tail = vec![0.0; nc];
        let mut x = Vec::with_capacity(nc);
        let mut hinv = Vec::new();
        let m_last = self.spec.molar_masses()[n];
        for cell in 0..nc {
            let r = densities_from_entropy(&EntropyVector::new(self.cell_w(w, cell))?, self.spec)?;
            for s in 0..n {
                rho[s * nc + cell] = r.as_slice()[s];
            }
            let xf = molar_fractions(&r, self.spec)?.x;
            tail[cell] = xf[n].ln() / m_last;
            if with_matrices {
                let h = matrix_h(&r, self.spec)?;
                hinv.push(
                    h.cholesky()
                        .ok_or_else(|| Error::Singular("entropy Hessian".into()))?
                        .inverse(),
                );
            }
            x.push(xf);
        }
        let mut face_k = Vec::with_capacity(self.faces.len());
        for &(a, b, axis) in &self.faces {
            let h = self.grid.spacing()[axis];
            face_k.push(face_mobility(&x[a], &x[b], self.spec)? / (h * h));
        }
        Ok(Iterate { rho, tail, hinv, face_k })
    }

    /// `out += Σ_faces` flux divergence `−div(B∇w)`.
    fn diffusion_acc(&self, it: &Iterate, w: &[f64], out: &mut [f64]) {
        let (n, nc) = (self.n, self.nc());
        let mut dw = vec![0.0; n];
        for (&(a, b, _), k) in self.faces.iter().zip(&it.face_k) {
            for s in 0..n {
                dw[s] = w[s * nc + b] - w[s * nc + a];
            }
            for s in 0..n {
                let flux: f64 = (0..n).map(|t| k[(s, t)] * dw[t]).sum();
                out[s * nc + a] -= flux;
                out[s * nc + b] += flux;
            }
        }
    }

    /// `out += λ(Δ²v + v)` per component.
    fn regularization_acc(&self, v: &[f64], out: &mut [f64]) {
        if self.lambda == 0.0 {
            return;
        }
        let nc = self.nc();
        let mut lap = vec![0.0; nc];
        for s in 0..self.n {
            let vs = &v[s * nc..(s + 1) * nc];
            lap.iter_mut().for_each(|x| *x = 0.0);
            laplacian_acc(&self.grid, Bc::Neumann, vs, 1.0, &mut lap);
            let os = &mut out[s * nc..(s + 1) * nc];
            laplacian_acc(&self.grid, Bc::Neumann, &lap, self.lambda, os);
            for (o, x) in os.iter_mut().zip(vs) {
                *o += self.lambda * x;
            }
        }
    }

    /// `adv(ρ) = skew advection + ½ (div u) ρ`, component-major.
    fn advection(&self, rho: &[f64]) -> Vec<f64> {
        let nc = self.nc();
        let mut out = vec![0.0; rho.len()];
        for s in 0..self.n {
            let (rs, os) = (&rho[s * nc..(s + 1) * nc], &mut out[s * nc..(s + 1) * nc]);
            skew_advection_acc(self.u, Bc::Neumann, rs, 1.0, os);
            for ((o, r), d) in os.iter_mut().zip(rs).zip(&self.div_u) {
                *o += 0.5 * d * r;
            }
        }
        out
    }

    fn residual(&self, w: &[f64], it: &Iterate) -> Vec<f64> {
        let mut r: Vec<f64> = it
            .rho
            .iter()
            .zip(&self.rho_prev)
            .zip(self.advection(&it.rho))
            .map(|((a, b), adv)| (a - b) / self.tau + adv)
            .collect();
        self.diffusion_acc(it, w, &mut r);
        self.regularization_acc(w, &mut r);
        r
    }

    fn l2(&self, v: &[f64]) -> f64 {
        self.grid.dot(v, v).sqrt()
    }
}

fn to_component_major(f: &SpeciesField) -> Vec<f64> {
    let (n, nc) = (f.n, f.grid.n_cells());
    let mut out = vec![0.0; n * nc];
    for cell in 0..nc {
        for s in 0..n {
            out[s * nc + cell] = f.values[cell * n + s];
        }
    }
    out
}

fn to_cell_major(grid: Grid, n: usize, v: &[f64]) -> SpeciesField {
    let nc = grid.n_cells();
    let mut f = SpeciesField::zeros(grid, n);
    for cell in 0..nc {
        for s in 0..n {
            f.values[cell * n + s] = v[s * nc + cell];
        }
    }
    f
}

/// The frozen symmetric positive definite system `J δ = −R(w̄)` of one
/// quasi-Newton iteration, stored matrix-free. Unknowns are component-major.
pub struct SpeciesSystem {
    grid: Grid,
    n: usize,
    /// `H⁻¹/τ` per cell.
    mass: Vec<DMatrix<f64>>,
    faces: Vec<(usize, usize, usize)>,
    face_k: Vec<DMatrix<f64>>,
    lambda: f64,
    rhs: Vec<f64>,
    block_inv: Vec<DMatrix<f64>>,
}

impl SpeciesSystem {
    fn build(ctx: &StepContext, it: &Iterate, residual: &[f64]) -> Result<Self> {
        let (n, nc) = (ctx.n, ctx.nc());
        let mass: Vec<DMatrix<f64>> = it.hinv.iter().map(|h| h / ctx.tau).collect();
        let mut blocks = mass.clone();
        for (&(a, b, _), k) in ctx.faces.iter().zip(&it.face_k) {
            blocks[a] += k;
            blocks[b] += k;
        }
        if ctx.lambda > 0.0 {
            // diagonal of Δ² + I: (ΔΔ)_ii = Σ_j Δ_ij² for the symmetric Δ
            let mut e = vec![0.0; nc];
            let mut col = vec![0.0; nc];
            let mut bi = vec![0.0; nc];
            for cell in 0..nc {
                e[cell] = 1.0;
                col.iter_mut().for_each(|v| *v = 0.0);
                laplacian_acc(&ctx.grid, Bc::Neumann, &e, 1.0, &mut col);
                bi[cell] = col.iter().map(|v| v * v).sum::<f64>() + 1.0;
                e[cell] = 0.0;
            }
            for (blk, d) in blocks.iter_mut().zip(&bi) {
                for s in 0..n {
                    blk[(s, s)] += ctx.lambda * d;
                }
            }
        }
        let block_inv = blocks
            .into_iter()
            .map(|b| {
                b.cholesky()
                    .map(|c| c.inverse())
                    .ok_or_else(|| Error::Singular("species preconditioner block".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: ctx.grid,
            n,
            mass,
            faces: ctx.faces.clone(),
            face_k: it.face_k.clone(),
            lambda: ctx.lambda,
            rhs: residual.iter().map(|r| -r).collect(),
            block_inv,
        })
    }

    pub fn len(&self) -> usize {
        self.n * self.grid.n_cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (n, nc) = (self.n, self.grid.n_cells());
        for cell in 0..nc {
            let m = &self.mass[cell];
            for s in 0..n {
                out[s * nc + cell] = (0..n).map(|t| m[(s, t)] * x[t * nc + cell]).sum();
            }
        }
        let mut dw = vec![0.0; n];
        for (&(a, b, _), k) in self.faces.iter().zip(&self.face_k) {
            for s in 0..n {
                dw[s] = x[s * nc + b] - x[s * nc + a];
            }
            for s in 0..n {
                let flux: f64 = (0..n).map(|t| k[(s, t)] * dw[t]).sum();
                out[s * nc + a] -= flux;
                out[s * nc + b] += flux;
            }
        }
        if self.lambda > 0.0 {
            let mut lap = vec![0.0; nc];
            for s in 0..n {
                let xs = &x[s * nc..(s + 1) * nc];
                lap.iter_mut().for_each(|v| *v = 0.0);
                laplacian_acc(&self.grid, Bc::Neumann, xs, 1.0, &mut lap);
                let os = &mut out[s * nc..(s + 1) * nc];
                laplacian_acc(&self.grid, Bc::Neumann, &lap, self.lambda, os);
                for (o, v) in os.iter_mut().zip(xs) {
                    *o += self.lambda * v;
                }
            }
        }
    }

    /// Block-Jacobi preconditioner: exact inverse of each cell's N×N block.
    pub fn precondition(&self, r: &[f64], z: &mut [f64]) {
        let (n, nc) = (self.n, self.grid.n_cells());
        for (cell, inv) in self.block_inv.iter().enumerate() {
            for s in 0..n {
                z[s * nc + cell] = (0..n).map(|t| inv[(s, t)] * r[t * nc + cell]).sum();
            }
        }
    }

    /// Dense matrix of the operator, for small grids.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let len = self.len();
        let mut a = DMatrix::zeros(len, len);
        let mut e = vec![0.0; len];
        let mut col = vec![0.0; len];
        for j in 0..len {
            e[j] = 1.0;
            self.apply(&e, &mut col);
            for i in 0..len {
                a[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        a
    }
}

/// The linearized system at `w_frozen` for a step starting from `w_prev`.
pub fn assemble_species_system(
    w_frozen: &SpeciesField,
    w_prev: &SpeciesField,
    u_k: &VectorField,
    params: &SpeciesStepParams,
    spec: &MixtureSpec,
) -> Result<SpeciesSystem> {
    params.validate()?;
    w_frozen.grid.check_same(&w_prev.grid)?;
    check_species(w_frozen, spec)?;
    let ctx = StepContext::new(w_prev, u_k, params.tau, params.lambda, spec)?;
    let w = to_component_major(w_frozen);
    let it = ctx.iterate(&w, true)?;
    let r = ctx.residual(&w, &it);
    SpeciesSystem::build(&ctx, &it, &r)
}

/// Damping halvings tried before a step is accepted regardless.
const MAX_HALVINGS: usize = 8;

/// One implicit species step with velocity `u_k`.
pub fn species_step(
    w_prev: &SpeciesField,
    u_k: &VectorField,
    params: &SpeciesStepParams,
    spec: &MixtureSpec,
) -> Result<(SpeciesField, SpeciesStepReport)> {
    params.validate()?;
    let ctx = StepContext::new(w_prev, u_k, params.tau, params.lambda, spec)?;
    let tau = params.tau;
    let mut w = to_component_major(w_prev);
    let mut it = ctx.iterate(&w, true)?;
    let mut r = ctx.residual(&w, &it);
    let mut res = tau * ctx.l2(&r);
    let mut report = SpeciesStepReport::default();
    let mut trace = vec![res];

    while res > params.newton_tol {
        if report.iterations == params.max_iters {
            return Err(Error::NonConvergence {
                solver: "species quasi-newton",
                iterations: report.iterations,
                residual: res,
                trace,
            });
        }
        report.iterations += 1;
        let sys = SpeciesSystem::build(&ctx, &it, &r)?;
        let mut delta = vec![0.0; w.len()];
        let stats = cg(
            |x, o| sys.apply(x, o),
            |x, o| sys.precondition(x, o),
            sys.rhs(),
            &mut delta,
            1e-6,
            params.max_linear,
        )?;
        report.linear_iterations += stats.iterations;

        let mut theta = 1.0;
        let mut halvings = 0;
        loop {
            let trial: Vec<f64> = w.iter().zip(&delta).map(|(a, d)| a + theta * d).collect();
            // an unrepresentable trial point counts as a residual increase
            let attempt = ctx.iterate(&trial, true).map(|ti| {
                let tr = ctx.residual(&trial, &ti);
                let tres = tau * ctx.l2(&tr);
                (ti, tr, tres)
            });
            match attempt {
                Ok((ti, tr, tres)) if tres < res || halvings == MAX_HALVINGS => {
                    w = trial;
                    it = ti;
                    r = tr;
                    res = tres;
                    break;
                }
                Err(e) if halvings == MAX_HALVINGS => return Err(e),
                _ => {
                    theta *= 0.5;
                    halvings += 1;
                }
            }
        }
        trace.push(res);
    }
    report.final_residual = res;

    let grid = ctx.grid;
    let rho_prev = to_cell_major(grid, ctx.n, &ctx.rho_prev);
    let rho = to_cell_major(grid, ctx.n, &it.rho);
    report.entropy_before = entropy_integral(&rho_prev, spec)?;
    report.entropy_after = entropy_integral(&rho, spec)?;
    let mut diff = vec![0.0; w.len()];
    ctx.diffusion_acc(&it, &w, &mut diff);
    report.dissipation = grid.dot(&diff, &w);
    report.control_term = grid.dot(&ctx.div_u, &it.tail);
    report.advective_work = -grid.dot(&ctx.advection(&it.rho), &w);
    let mut reg = vec![0.0; w.len()];
    ctx.regularization_acc(&w, &mut reg);
    report.regularization = grid.dot(&reg, &w);
    report.balance_slack = report.entropy_after - report.entropy_before
        + tau * (report.dissipation + report.regularization - report.advective_work);
    Ok((to_cell_major(grid, ctx.n, &w), report))
}
