//! Per-step ledger of the discrete energy and entropy estimates.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::flow::{energy_identity_defect, FlowState, FlowStepReport};
use crate::grid::{dirichlet_form, div, grad, laplacian_acc, Bc, Grid, ScalarField, SpeciesField, VectorField};
use crate::linalg::cg;
use crate::mixture::{entropy_density_full, lift_initial, molar_fractions, MixtureSpec, ReducedDensity};
use crate::species::{densities_of, entropy_dissipation, entropy_integral, face_mobility, interior_faces, SpeciesStepReport};

/// Densities below this are clamped when a row is recorded.
pub const PRINT_FLOOR: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq)]
pub struct StepLedger {
    pub k: usize,
    pub t: f64,
    /// `‖u‖²`.
    pub energy: f64,
    /// `ε‖p‖²`.
    pub pressure_energy: f64,
    /// `2τ‖∇u‖²`.
    pub visc_dissipation: f64,
    /// `∫h(ρ)`.
    pub entropy: f64,
    /// `Σᵢ‖∇√xᵢ‖²` over all N+1 species.
    pub sqrt_x_dissipation: f64,
    /// `∫∇w : B∇w`.
    pub entropy_dissipation: f64,
    pub div_u_l2: f64,
    /// `⟨div u, ln x_{N+1}/M_{N+1}⟩`.
    pub control_term: f64,
    /// Energy identity defect of the flow step.
    pub energy_residual: f64,
    /// Entropy balance slack of the species step.
    pub entropy_slack: f64,
    /// `Σⱼ τ‖∇uʲ‖²`.
    pub cum_visc: f64,
    /// `Σⱼ τ‖∇√x(ρʲ)‖²`.
    pub cum_sqrt_x: f64,
    /// `Σⱼ τ ∫∇wʲ : B∇wʲ`.
    pub cum_entropy_dissipation: f64,
    /// `Σⱼ τ |advective work|`.
    pub cum_advective_work: f64,
    /// `Σⱼ τ‖fʲ‖²`.
    pub cum_force: f64,
    pub min_density: f64,
    /// `max |Σᵢ ρᵢ − 1|` over cells, all N+1 species.
    pub closure_error: f64,
    pub flow_iterations: usize,
    pub species_iterations: usize,
    /// Per-species totals `∫ρᵢ`, all N+1 species.
    pub mass: Vec<f64>,
}

/// Everything one row is computed from.
pub struct StepRecord<'a> {
    pub k: usize,
    pub tau: f64,
    pub eps: f64,
    pub prev_flow: &'a FlowState,
    pub flow: &'a FlowState,
    pub force: &'a VectorField,
    pub w: &'a SpeciesField,
    pub flow_report: Option<&'a FlowStepReport>,
    pub species_report: Option<&'a SpeciesStepReport>,
}

/// Append-only ledger of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Ledger {
    pub n_species: usize,
    pub rows: Vec<StepLedger>,
    clamp_count: usize,
}

const FIXED_COLUMNS: [(&str, &str); 21] = [
    ("k", "step"),
    ("t", "time"),
    ("energy", "|u|^2"),
    ("pressure_energy", "eps|p|^2"),
    ("visc_dissipation", "2tau|grad u|^2"),
    ("entropy", "int h"),
    ("sqrt_x_dissipation", "|grad sqrt x|^2"),
    ("entropy_dissipation", "int grad w:B grad w"),
    ("div_u_l2", "|div u|"),
    ("control_term", "<div u; ln x/M>"),
    ("energy_residual", "abs"),
    ("entropy_slack", "signed"),
    ("cum_visc", "sum tau|grad u|^2"),
    ("cum_sqrt_x", "sum tau|grad sqrt x|^2"),
    ("cum_entropy_dissipation", "sum tau int grad w:B grad w"),
    ("cum_advective_work", "sum tau|adv work|"),
    ("cum_force", "sum tau|f|^2"),
    ("min_density", "mass fraction"),
    ("closure_error", "abs"),
    ("flow_iterations", "count"),
    ("species_iterations", "count"),
];

/// Number of scalar columns before the per-species masses.
const N_FIXED: usize = FIXED_COLUMNS.len();

impl Ledger {
    pub fn new(n_species: usize) -> Self {
        Self {
            n_species,
            rows: Vec::new(),
            clamp_count: 0,
        }
    }

    /// Densities clamped to [`PRINT_FLOOR`] while recording.
    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }

    pub fn last(&self) -> Option<&StepLedger> {
        self.rows.last()
    }

    pub fn record_step(&mut self, rec: &StepRecord, spec: &MixtureSpec) -> Result<&StepLedger> {
        if spec.n_species() != self.n_species {
            return Err(Error::GridMismatch(format!(
                "ledger holds {} species, mixture has {}",
                self.n_species,
                spec.n_species()
            )));
        }
        let grid = rec.flow.u.grid;
        let tau = rec.tau;
        let grad_sq: f64 = rec.flow.u.comps.iter().map(|c| dirichlet_form(&grid, Bc::Dirichlet, c)).sum();
        let force_sq = rec.force.norm_sq();

        let rho = densities_of(rec.w, spec)?;
        let n = rho.n;
        let nc = grid.n_cells();
        let mut mass = vec![0.0; n + 1];
        let mut sqrt_x = vec![vec![0.0; nc]; n + 1];
        let mut min_density = f64::INFINITY;
        let mut closure_error = 0.0f64;
        let mut tail = vec![0.0; nc];
        let m_last = spec.molar_masses()[n];
        for cell in 0..nc {
            let r = ReducedDensity::new_unchecked(rho.cell(cell).to_vec());
            let full = r.full();
            closure_error = closure_error.max((full.iter().sum::<f64>() - 1.0).abs());
            for (s, v) in full.iter().enumerate() {
                mass[s] += v;
                min_density = min_density.min(*v);
            }
            let x = molar_fractions(&r, spec)?.x;
            for (s, v) in x.iter().enumerate() {
                sqrt_x[s][cell] = v.sqrt();
            }
            tail[cell] = x[n].ln() / m_last;
        }
        mass.iter_mut().for_each(|m| *m *= grid.cell_volume());
        if min_density < PRINT_FLOOR {
            self.clamp_count += 1;
            min_density = PRINT_FLOOR;
        }
        let sqrt_x_dissipation: f64 = sqrt_x
            .into_iter()
            .map(|v| grad(&ScalarField { grid, bc: Bc::Neumann, values: v }).norm_sq())
            .sum();
        let divu = div(&rec.flow.u);
        let entropy_dissipation = match rec.species_report {
            Some(r) => r.dissipation,
            None => entropy_dissipation(rec.w, spec)?,
        };
        let advective_work = rec.species_report.map_or(0.0, |r| r.advective_work);

        let prev = self.rows.last();
        let cum = |f: fn(&StepLedger) -> f64, inc: f64| prev.map_or(0.0, f) + if rec.k == 0 { 0.0 } else { inc };
        let row = StepLedger {
            k: rec.k,
            t: rec.k as f64 * tau,
            energy: rec.flow.u.norm_sq(),
            pressure_energy: rec.eps * rec.flow.p.norm_sq(),
            visc_dissipation: 2.0 * tau * grad_sq,
            entropy: entropy_integral(&rho, spec)?,
            sqrt_x_dissipation,
            entropy_dissipation,
            div_u_l2: divu.norm_sq().sqrt(),
            control_term: grid.dot(&divu.values, &tail),
            energy_residual: match rec.flow_report {
                Some(_) => energy_identity_defect(rec.prev_flow, rec.flow, rec.force, rec.eps, tau),
                None => 0.0,
            },
            entropy_slack: rec.species_report.map_or(0.0, |r| r.balance_slack),
            cum_visc: cum(|r| r.cum_visc, tau * grad_sq),
            cum_sqrt_x: cum(|r| r.cum_sqrt_x, tau * sqrt_x_dissipation),
            cum_entropy_dissipation: cum(|r| r.cum_entropy_dissipation, tau * entropy_dissipation),
            cum_advective_work: cum(|r| r.cum_advective_work, tau * advective_work.abs()),
            cum_force: cum(|r| r.cum_force, tau * force_sq),
            min_density,
            closure_error,
            flow_iterations: rec.flow_report.map_or(0, |r| r.picard_iterations),
            species_iterations: rec.species_report.map_or(0, |r| r.iterations),
            mass,
        };
        self.rows.push(row);
        Ok(self.rows.last().expect("row just pushed"))
    }

    fn header(&self) -> String {
        let mut cols: Vec<String> = FIXED_COLUMNS
            .iter()
            .map(|(name, unit)| format!("{name} [{unit}]"))
            .collect();
        cols.extend((1..=self.n_species).map(|s| format!("mass_{s} [int rho]")));
        cols.join(",")
    }

    /// CSV with a header row of names and units. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.k,
                r.t,
                r.energy,
                r.pressure_energy,
                r.visc_dissipation,
                r.entropy,
                r.sqrt_x_dissipation,
                r.entropy_dissipation,
                r.div_u_l2,
                r.control_term,
                r.energy_residual,
                r.entropy_slack,
                r.cum_visc,
                r.cum_sqrt_x,
                r.cum_entropy_dissipation,
                r.cum_advective_work,
                r.cum_force,
                r.min_density,
                r.closure_error,
                r.flow_iterations,
                r.species_iterations
            );
            for m in &r.mass {
                let _ = write!(out, ",{m}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty ledger".into()))?;
        let n_cols = header.split(',').count();
        if n_cols <= N_FIXED {
            return Err(Error::Parse("ledger header has no mass columns".into()));
        }
        let mut ledger = Ledger::new(n_cols - N_FIXED);
        if header != ledger.header() {
            return Err(Error::Parse(format!("unexpected ledger header {header:?}")));
        }
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != n_cols {
                return Err(Error::Parse(format!("row {}: {} fields, expected {n_cols}", i + 1, f.len())));
            }
            let num = |j: usize| -> Result<f64> {
                f[j].parse().map_err(|_| Error::Parse(format!("row {}: bad number {:?}", i + 1, f[j])))
            };
            let int = |j: usize| -> Result<usize> {
                f[j].parse().map_err(|_| Error::Parse(format!("row {}: bad integer {:?}", i + 1, f[j])))
            };
            ledger.rows.push(StepLedger {
                k: int(0)?,
                t: num(1)?,
                energy: num(2)?,
                pressure_energy: num(3)?,
                visc_dissipation: num(4)?,
                entropy: num(5)?,
                sqrt_x_dissipation: num(6)?,
                entropy_dissipation: num(7)?,
                div_u_l2: num(8)?,
                control_term: num(9)?,
                energy_residual: num(10)?,
                entropy_slack: num(11)?,
                cum_visc: num(12)?,
                cum_sqrt_x: num(13)?,
                cum_entropy_dissipation: num(14)?,
                cum_advective_work: num(15)?,
                cum_force: num(16)?,
                min_density: num(17)?,
                closure_error: num(18)?,
                flow_iterations: int(19)?,
                species_iterations: int(20)?,
                mass: (N_FIXED..n_cols).map(num).collect::<Result<_>>()?,
            });
        }
        Ok(ledger)
    }
}

/// Outcome of one global inequality.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundCheck {
    pub passed: bool,
    /// `min_k (rhs − lhs)`; negative on failure.
    pub margin: f64,
    pub first_violation: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalBounds {
    pub poincare: f64,
    pub energy: BoundCheck,
    pub entropy: BoundCheck,
}

impl GlobalBounds {
    pub fn passed(&self) -> bool {
        self.energy.passed && self.entropy.passed
    }
}

fn check_rows(rows: &[StepLedger], slack: f64, gap: impl Fn(&StepLedger) -> f64) -> BoundCheck {
    let mut margin = f64::INFINITY;
    let mut first_violation = None;
    for r in rows {
        let g = gap(r);
        margin = margin.min(g);
        if g < -slack && first_violation.is_none() {
            first_violation = Some(r.k);
        }
    }
    BoundCheck {
        passed: first_violation.is_none(),
        margin,
        first_violation,
    }
}

/// `‖uᵏ‖² + ε‖pᵏ‖² ≤ ‖u⁰‖² + ε‖p⁰‖² + C_p² Σⱼ τ‖fʲ‖²` and
/// `∫h(ρᵏ) + Σⱼ τ ∫∇w : B∇w ≤ ∫h(ρ⁰) + 1 + Σⱼ τ|advective work|` for every row.
pub fn check_global_bounds(ledger: &Ledger, poincare: f64) -> Result<GlobalBounds> {
    let first = ledger.rows.first().ok_or_else(|| Error::Domain("empty ledger".into()))?;
    let e0 = first.energy + first.pressure_energy;
    let s0 = first.entropy;
    let slack = 1e-10 * e0.max(1.0);
    let cp2 = poincare * poincare;
    Ok(GlobalBounds {
        poincare,
        energy: check_rows(&ledger.rows, slack, |r| e0 + cp2 * r.cum_force - r.energy - r.pressure_energy),
        entropy: check_rows(&ledger.rows, 1e-10, |r| {
            s0 + 1.0 + r.cum_advective_work - r.entropy - r.cum_entropy_dissipation
        }),
    })
}

/// Poincaré constant `C_p` with `‖u‖² ≤ C_p² ⟨−Δu, u⟩` for the Dirichlet
/// Laplacian of `grid`, by inverse power iteration.
pub fn poincare_constant(grid: &Grid) -> Result<f64> {
    let nc = grid.n_cells();
    let apply = |x: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        laplacian_acc(grid, Bc::Dirichlet, x, -1.0, out);
    };
    let mut v = vec![1.0; nc];
    let mut lambda = f64::INFINITY;
    for _ in 0..500 {
        let norm = grid.dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let mut y = v.clone();
        cg(apply, |r, z| z.copy_from_slice(r), &v, &mut y, 1e-12, 10 * nc)?;
        // Rayleigh quotient of the inverse: ⟨v, A⁻¹v⟩ / ⟨v, v⟩
        let next = 1.0 / grid.dot(&v, &y);
        let done = (next - lambda).abs() <= 1e-12 * next;
        lambda = next;
        v = y;
        if done {
            return Ok((1.0 / lambda).sqrt());
        }
    }
    Err(Error::NonConvergence {
        solver: "inverse power iteration",
        iterations: 500,
        residual: lambda,
        trace: Vec::new(),
    })
}

/// Number of (face, species) pairs whose diffusive flux runs up that
/// species' own density gradient, over all N+1 species.
pub fn uphill_count(w: &SpeciesField, spec: &MixtureSpec) -> Result<usize> {
    let rho = densities_of(w, spec)?;
    let n = w.n;
    let full: Vec<Vec<f64>> = (0..w.grid.n_cells())
        .map(|c| ReducedDensity::new_unchecked(rho.cell(c).to_vec()).full())
        .collect();
    let x = full
        .iter()
        .map(|f| Ok(molar_fractions(&ReducedDensity::new_unchecked(f[..n].to_vec()), spec)?.x))
        .collect::<Result<Vec<_>>>()?;
    let mut count = 0;
    for (a, b, _) in interior_faces(&w.grid) {
        let bf = face_mobility(&x[a], &x[b], spec)?;
        let dw: Vec<f64> = w.cell(b).iter().zip(w.cell(a)).map(|(p, q)| p - q).collect();
        let mut flux: Vec<f64> = (0..n).map(|s| -(0..n).map(|t| bf[(s, t)] * dw[t]).sum::<f64>()).collect();
        flux.push(-flux.iter().sum::<f64>());
        for (s, j) in flux.iter().enumerate() {
            let d = full[b][s] - full[a][s];
            if j * d > 0.0 && d.abs() > 1e-12 && j.abs() > 1e-12 {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// `|∫h(ρ^{α⁰}) − ∫h(ρ⁰)|` for full nonnegative initial data given per cell.
pub fn lift_entropy_gap(
    grid: &Grid,
    rho0: impl Fn([f64; 2]) -> Vec<f64>,
    alpha0: f64,
    spec: &MixtureSpec,
) -> Result<f64> {
    let (mut raw, mut lifted) = (0.0, 0.0);
    for cell in 0..grid.n_cells() {
        let r = rho0(grid.center(cell));
        raw += entropy_density_full(&r, spec);
        lifted += entropy_density_full(&lift_initial(&r, alpha0)?.full(), spec);
    }
    Ok((lifted - raw).abs() * grid.cell_volume())
}

/// `(Σₖ τ aₖ)^{1/2}` for per-step squared spatial norms `aₖ`, k ≥ 1.
pub fn time_l2(tau: f64, squares: impl IntoIterator<Item = f64>) -> f64 {
    squares.into_iter().map(|a| tau * a).sum::<f64>().sqrt()
}
