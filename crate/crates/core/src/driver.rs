//! Coupled time loop, incompressible reference runs, the ε-sweep and the
//! invariant check suite.
//!
//! Within step k the flow is advanced first and the species step consumes
//! the new velocity `uᵏ`.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{InitialDensity, InitialVelocity, SimConfig};
use crate::diagnostics::{check_global_bounds, poincare_constant, time_l2, Ledger, StepRecord};
use crate::error::{Error, Result};
use crate::flow::{flow_step, incompressible_step, FlowParams, FlowState};
use crate::forcing::{average_force, Forcing};
use crate::grid::{diff_acc, trilinear_bhat, write_snapshot, Bc, Components, Grid, ScalarField, SpeciesField, VectorField};
use crate::mixture::{entropy_vars, lift_initial, matrix_b, matrix_g, matrix_h, MixtureSpec};
use crate::sampling::{random_spec, sample_simplex};
use crate::species::{densities_of, species_step, SpeciesStepParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowModel {
    ArtificialCompressibility,
    Incompressible,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub flow: FlowState,
    pub w: SpeciesField,
    pub ledger: Ledger,
}

/// Full initial densities `ρ⁰(x)` before the lift.
pub fn initial_density(cfg: &SimConfig, at: [f64; 2]) -> Vec<f64> {
    let ns = cfg.masses.len();
    let uniform = 1.0 / ns as f64;
    match cfg.density {
        InitialDensity::Cosine { amplitude } => {
            let mut r = vec![uniform; ns];
            let c = amplitude * (std::f64::consts::PI * at[0] / cfg.lengths[0]).cos();
            r[0] += c;
            r[ns - 1] -= c;
            r
        }
        InitialDensity::Layers { width } => {
            let s = 0.5 * (1.0 + ((at[0] / cfg.lengths[0] - 0.5) / width).tanh());
            let x = [0.5 * (1.0 - s), 0.5, 0.5 * s];
            let total: f64 = x.iter().zip(&cfg.masses).map(|(a, m)| a * m).sum();
            x.iter().zip(&cfg.masses).map(|(a, m)| a * m / total).collect()
        }
        InitialDensity::Bump { amplitude, center, width } => {
            let d2: f64 = (0..cfg.extents.len()).map(|d| (at[d] - center[d]).powi(2)).sum();
            let g = amplitude * (-d2 / (2.0 * width * width)).exp();
            let mut r = vec![uniform - g / (ns - 1) as f64; ns];
            r[0] = uniform + g;
            r
        }
    }
}

fn initial_velocity(cfg: &SimConfig, grid: Grid) -> Result<VectorField> {
    match cfg.velocity {
        InitialVelocity::Zero => Ok(VectorField::zeros(grid, Bc::Dirichlet)),
        InitialVelocity::Vortex { .. } if grid.dim() == 1 => {
            Err(Error::Config("a vortex needs a 2D grid".into()))
        }
        InitialVelocity::Vortex { amplitude } => {
            let pi = std::f64::consts::PI;
            let psi = ScalarField::from_fn(grid, Bc::Dirichlet, |[x, y]| {
                ((pi * x).sin() * (pi * y).sin()).powi(2) / pi
            });
            // the Dirichlet derivatives commute, so the discrete divergence vanishes
            let mut u = VectorField::zeros(grid, Bc::Dirichlet);
            diff_acc(&grid, 1, Bc::Dirichlet, &psi.values, amplitude, &mut u.comps[0]);
            diff_acc(&grid, 0, Bc::Dirichlet, &psi.values, -amplitude, &mut u.comps[1]);
            Ok(u)
        }
    }
}

/// Initial flow state and lifted entropy field.
pub fn initial_state(cfg: &SimConfig) -> Result<(FlowState, SpeciesField)> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let spec = cfg.mixture()?;
    let n = spec.n_reduced();
    let mut w = SpeciesField::zeros(grid, n);
    for cell in 0..grid.n_cells() {
        let rho = lift_initial(&initial_density(cfg, grid.center(cell)), cfg.alpha0)?;
        w.cell_mut(cell).copy_from_slice(entropy_vars(&rho, &spec)?.as_slice());
    }
    let flow = FlowState {
        u: initial_velocity(cfg, grid)?,
        p: ScalarField::zeros(grid, Bc::Neumann),
    };
    Ok((flow, w))
}

fn write_snapshots(dir: &Path, prefix: &str, k: usize, t: f64, flow: &FlowState, rho: &SpeciesField) -> Result<()> {
    fs::create_dir_all(dir)?;
    let one = |name: &str, field: &dyn Fn(BufWriter<fs::File>) -> Result<()>| -> Result<()> {
        let file = fs::File::create(dir.join(format!("{prefix}{name}_{k:06}.snap")))?;
        field(BufWriter::new(file))
    };
    one("u", &|out| write_snapshot(out, "u", t, &flow.u))?;
    one("p", &|out| write_snapshot(out, "p", t, &flow.p))?;
    one("rho", &|out| write_snapshot(out, "rho", t, rho))
}

/// Runs the coupled scheme, calling `observer(k, flow, w)` after every step.
pub fn run_with_observer(
    cfg: &SimConfig,
    model: FlowModel,
    mut observer: impl FnMut(usize, &FlowState, &SpeciesField) -> Result<()>,
) -> Result<RunOutput> {
    let (mut flow, mut w) = initial_state(cfg)?;
    let grid = flow.u.grid;
    let spec = cfg.mixture()?;
    let tau = cfg.tau();
    let (eps, prefix) = match model {
        FlowModel::ArtificialCompressibility => (cfg.eps, ""),
        FlowModel::Incompressible => (0.0, "ref_"),
    };
    let flow_params = FlowParams {
        max_picard: cfg.max_picard,
        ..FlowParams::new(cfg.eps, tau, cfg.flow_tol)
    };
    let species_params = SpeciesStepParams {
        max_iters: cfg.max_newton,
        ..SpeciesStepParams::new(tau, cfg.lambda(), cfg.newton_tol)
    };
    let snapshots = cfg.output_dir.as_deref().filter(|_| cfg.snapshot_every > 0);

    let mut ledger = Ledger::new(spec.n_species());
    let zero_force = VectorField::zeros(grid, Bc::Dirichlet);
    let zero = StepRecord {
        k: 0,
        tau,
        eps,
        prev_flow: &flow,
        flow: &flow,
        force: &zero_force,
        w: &w,
        flow_report: None,
        species_report: None,
    };
    ledger.record_step(&zero, &spec)?;
    if let Some(dir) = snapshots {
        write_snapshots(dir, prefix, 0, 0.0, &flow, &densities_of(&w, &spec)?)?;
    }

    for k in 1..=cfg.steps {
        let step = || -> Result<_> {
            let force = average_force(&cfg.forcing, &grid, k, tau);
            let (next_flow, fr) = match model {
                FlowModel::ArtificialCompressibility => flow_step(&flow, &force, &flow_params)?,
                FlowModel::Incompressible => incompressible_step(&flow, &force, &flow_params)?,
            };
            let (next_w, sr) = species_step(&w, &next_flow.u, &species_params, &spec)?;
            Ok((force, next_flow, fr, next_w, sr))
        };
        let (force, next_flow, fr, next_w, sr) = step().map_err(|e| e.at_step(k))?;
        let row = StepRecord {
            k,
            tau,
            eps,
            prev_flow: &flow,
            flow: &next_flow,
            force: &force,
            w: &next_w,
            flow_report: Some(&fr),
            species_report: Some(&sr),
        };
        ledger.record_step(&row, &spec)?;
        observer(k, &next_flow, &next_w)?;
        flow = next_flow;
        w = next_w;
        if let Some(dir) = snapshots {
            if k % cfg.snapshot_every == 0 {
                write_snapshots(dir, prefix, k, k as f64 * tau, &flow, &densities_of(&w, &spec)?)?;
            }
        }
    }
    Ok(RunOutput { flow, w, ledger })
}

/// The artificial-compressibility run of `cfg`.
pub fn run_simulation(cfg: &SimConfig) -> Result<RunOutput> {
    run_with_observer(cfg, FlowModel::ArtificialCompressibility, |_, _, _| Ok(()))
}

/// The same run with `div u = 0` enforced exactly; `cfg.eps` is ignored.
pub fn reference_incompressible(cfg: &SimConfig) -> Result<RunOutput> {
    run_with_observer(cfg, FlowModel::Incompressible, |_, _, _| Ok(()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub eps: f64,
    /// `‖div u_ε‖_{L²(0,T;L²)}`.
    pub div_l2l2: f64,
    /// `‖u_ε − u_ref‖_{L²(0,T;L²)}`.
    pub velocity_error: f64,
    /// `‖ρ_ε − ρ_ref‖_{L²(0,T;L²)}`.
    pub density_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// `‖div u_ref‖_{L²(0,T;L²)}`.
    pub reference_div_l2l2: f64,
}

fn strictly_decreasing(v: impl Iterator<Item = f64>) -> bool {
    let v: Vec<f64> = v.collect();
    v.windows(2).all(|p| p[1] < p[0])
}

impl SweepResult {
    pub fn div_monotone(&self) -> bool {
        strictly_decreasing(self.rows.iter().map(|r| r.div_l2l2))
    }

    pub fn velocity_monotone(&self) -> bool {
        strictly_decreasing(self.rows.iter().map(|r| r.velocity_error))
    }

    /// Observed orders `log(e_i/e_{i+1}) / log(ε_i/ε_{i+1})` of the velocity error.
    pub fn velocity_rates(&self) -> Vec<f64> {
        self.rows
            .windows(2)
            .map(|p| (p[0].velocity_error / p[1].velocity_error).ln() / (p[0].eps / p[1].eps).ln())
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("eps,div_l2l2,velocity_error,density_error\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.eps, r.div_l2l2, r.velocity_error, r.density_error));
        }
        s
    }
}

struct ReferenceHistory {
    u: Vec<VectorField>,
    rho: Vec<SpeciesField>,
    div_l2l2: f64,
}

fn reference_history(cfg: &SimConfig, spec: &MixtureSpec) -> Result<ReferenceHistory> {
    let (mut u, mut rho) = (Vec::new(), Vec::new());
    let out = run_with_observer(cfg, FlowModel::Incompressible, |_, flow, w| {
        u.push(flow.u.clone());
        rho.push(densities_of(w, spec)?);
        Ok(())
    })?;
    let div_l2l2 = time_l2(cfg.tau(), out.ledger.rows[1..].iter().map(|r| r.div_u_l2.powi(2)));
    Ok(ReferenceHistory { u, rho, div_l2l2 })
}

fn field_distance_sq<F: Components>(a: &F, b: &F) -> f64 {
    let grid = a.grid();
    (0..a.n_components())
        .map(|c| {
            let (x, y) = (a.component(c), b.component(c));
            let d: Vec<f64> = x.iter().zip(y.iter()).map(|(p, q)| p - q).collect();
            grid.dot(&d, &d)
        })
        .sum()
}

fn compare_against(cfg: &SimConfig, eps: f64, reference: &ReferenceHistory, spec: &MixtureSpec) -> Result<SweepRow> {
    let run_cfg = SimConfig { eps, ..cfg.clone() };
    let (mut du, mut drho) = (Vec::new(), Vec::new());
    let out = run_simulation_observed(&run_cfg, |k, flow, w| {
        du.push(field_distance_sq(&flow.u, &reference.u[k - 1]));
        drho.push(field_distance_sq(&densities_of(w, spec)?, &reference.rho[k - 1]));
        Ok(())
    })
    .map_err(|e| Error::Sweep { eps, source: Box::new(e) })?;
    let tau = cfg.tau();
    Ok(SweepRow {
        eps,
        div_l2l2: time_l2(tau, out.ledger.rows[1..].iter().map(|r| r.div_u_l2.powi(2))),
        velocity_error: time_l2(tau, du),
        density_error: time_l2(tau, drho),
    })
}

fn run_simulation_observed(
    cfg: &SimConfig,
    observer: impl FnMut(usize, &FlowState, &SpeciesField) -> Result<()>,
) -> Result<RunOutput> {
    run_with_observer(cfg, FlowModel::ArtificialCompressibility, observer)
}

/// One artificial-compressibility run per ε against a single incompressible
/// reference. `eps_list` must be strictly decreasing with at least 3 values.
pub fn sweep_epsilon(cfg: &SimConfig, eps_list: &[f64]) -> Result<SweepResult> {
    if eps_list.len() < 3 {
        return Err(Error::Config("the sweep needs at least 3 values of eps".into()));
    }
    if !strictly_decreasing(eps_list.iter().copied()) || eps_list.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Config("eps values must be positive and strictly decreasing".into()));
    }
    if cfg.steps == 0 {
        return Err(Error::Config("the sweep needs at least one step".into()));
    }
    let spec = cfg.mixture()?;
    let reference = reference_history(cfg, &spec)?;
    let rows = eps_list
        .par_iter()
        .map(|&eps| compare_against(cfg, eps, &reference, &spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        rows,
        reference_div_l2l2: reference.div_l2l2,
    })
}

/// The AC run of `cfg` compared against its incompressible reference.
pub fn compare_reference(cfg: &SimConfig) -> Result<(SweepRow, f64)> {
    if cfg.steps == 0 {
        return Err(Error::Config("the comparison needs at least one step".into()));
    }
    let spec = cfg.mixture()?;
    let reference = reference_history(cfg, &spec)?;
    Ok((compare_against(cfg, cfg.eps, &reference, &spec)?, reference.div_l2l2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

/// A copy of `cfg` on at most 16 cells per axis and 20 steps, same `τ`.
pub fn small_config(cfg: &SimConfig) -> SimConfig {
    let tau = cfg.tau();
    let steps = cfg.steps.clamp(1, 20);
    SimConfig {
        extents: cfg.extents.iter().map(|n| (*n).min(16)).collect(),
        steps,
        t_final: tau * steps as f64,
        output_dir: None,
        snapshot_every: 0,
        ..cfg.clone()
    }
}

/// Runs the invariant suite on the small version of `cfg`.
pub fn check_suite(cfg: &SimConfig) -> Result<Vec<CheckOutcome>> {
    let small = small_config(cfg);
    let spec = small.mixture()?;
    let run = run_simulation(&small)?;
    let rows = &run.ledger.rows;
    let mut out = Vec::new();

    let e0 = rows[0].energy + rows[0].pressure_energy;
    let energy_tol = 100.0 * small.flow_tol * e0.max(1.0);
    let worst = rows.iter().map(|r| r.energy_residual).fold(0.0, f64::max);
    out.push(CheckOutcome::new(
        "energy identity",
        worst <= energy_tol,
        format!("max defect {worst:e} (limit {energy_tol:e})"),
    ));
    if small.forcing == Forcing::Zero {
        let ok = rows.windows(2).all(|p| {
            p[1].energy + p[1].pressure_energy <= p[0].energy + p[0].pressure_energy + energy_tol
        });
        out.push(CheckOutcome::new("unforced energy decay", ok, format!("{} steps", small.steps)));
    }

    let slack_tol = 100.0 * small.newton_tol;
    let worst = rows.iter().map(|r| r.entropy_slack).fold(f64::NEG_INFINITY, f64::max);
    out.push(CheckOutcome::new(
        "entropy balance",
        worst <= slack_tol,
        format!("max slack {worst:e} (limit {slack_tol:e})"),
    ));
    if small.forcing == Forcing::Zero && small.velocity == InitialVelocity::Zero {
        let ok = rows.windows(2).all(|p| p[1].entropy <= p[0].entropy + slack_tol);
        out.push(CheckOutcome::new("entropy decay without flow", ok, format!("{} steps", small.steps)));
    }

    if small.lambda() == 0.0 {
        let limit = slack_tol * small.steps as f64;
        let drift = rows[0]
            .mass
            .iter()
            .zip(&rows[rows.len() - 1].mass)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        out.push(CheckOutcome::new(
            "mass conservation",
            drift <= limit,
            format!("max drift {drift:e} (limit {limit:e})"),
        ));
    } else {
        out.push(CheckOutcome::new(
            "mass conservation",
            true,
            "skipped: the lambda term is not conservative, set scheme.lambda = 0".into(),
        ));
    }

    let min = rows.iter().map(|r| r.min_density).fold(f64::INFINITY, f64::min);
    let closure = rows.iter().map(|r| r.closure_error).fold(0.0, f64::max);
    out.push(CheckOutcome::new(
        "positivity and closure",
        min > 0.0 && run.ledger.clamp_count() == 0 && closure <= 1e-14,
        format!("min density {min:e}, clamps {}, closure {closure:e}", run.ledger.clamp_count()),
    ));

    let bounds = check_global_bounds(&run.ledger, poincare_constant(&small.grid()?)?)?;
    out.push(CheckOutcome::new(
        "global bounds",
        bounds.passed(),
        format!(
            "C_p {:.6}, energy margin {:e}, entropy margin {:e}",
            bounds.poincare, bounds.energy.margin, bounds.entropy.margin
        ),
    ));

    let again = run_simulation(&small)?;
    out.push(CheckOutcome::new(
        "determinism",
        again.ledger.to_csv() == run.ledger.to_csv(),
        "two runs, byte-identical ledgers".into(),
    ));

    out.push(algebra_check(small.seed, &spec));
    out.push(bhat_check(small.seed, small.grid()?)?);
    Ok(out)
}

fn algebra_check(seed: u64, spec: &MixtureSpec) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_asym = 0.0f64;
    let mut min_eig = f64::INFINITY;
    let mut failures = 0;
    for i in 0..300 {
        let (random, s);
        let spec = if i % 3 == 0 {
            spec
        } else {
            random = random_spec(&mut rng, 2 + i % 3);
            s = &random;
            s
        };
        let rho = sample_simplex(&mut rng, spec.n_species(), 1e-6);
        for m in [matrix_h(&rho, spec), matrix_g(&rho, spec), matrix_b(&rho, spec)] {
            match m {
                Ok(m) => {
                    worst_asym = worst_asym.max((&m - m.transpose()).amax() / m.amax());
                    min_eig = min_eig.min(m.symmetric_eigen().eigenvalues.min());
                }
                Err(_) => failures += 1,
            }
        }
    }
    CheckOutcome::new(
        "mixture algebra",
        failures == 0 && worst_asym <= 1e-10 && min_eig > 0.0,
        format!("asymmetry {worst_asym:e}, min eigenvalue {min_eig:e}, failures {failures}"),
    )
}

fn bhat_check(seed: u64, grid: Grid) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut worst = 0.0f64;
    let field = |rng: &mut ChaCha8Rng| {
        let comps = (0..grid.dim())
            .map(|_| (0..grid.n_cells()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        VectorField::new(grid, Bc::Dirichlet, comps)
    };
    for _ in 0..20 {
        let (u, v, w) = (field(&mut rng)?, field(&mut rng)?, field(&mut rng)?);
        let scale = (u.norm_sq() * v.norm_sq() * w.norm_sq()).sqrt().max(f64::MIN_POSITIVE);
        let skew = trilinear_bhat(&u, &v, &w)? + trilinear_bhat(&u, &w, &v)?;
        worst = worst.max(skew.abs() / scale).max(trilinear_bhat(&u, &v, &v)?.abs() / scale);
    }
    Ok(CheckOutcome::new(
        "trilinear skew symmetry",
        worst <= 1e-12,
        format!("max relative defect {worst:e}"),
    ))
}
