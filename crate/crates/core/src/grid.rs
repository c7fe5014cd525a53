//! Cell-centred structured grids in one or two dimensions.
//!
//! Cell `(i, j)` has centre `((i+½)hx, (j+½)hy)` and flat index `i + nx·j`.
//! Boundary conditions enter only through a ghost value behind each wall:
//! a Neumann field is reflected (`f₋₁ = f₀`), a Dirichlet field is
//! odd-extended (`f₋₁ = −f₀`). With that convention the central difference
//! matrices satisfy `D_neu = −D_dirᵀ` exactly, so summation by parts holds to
//! roundoff: `⟨D_neu f, v⟩ = −⟨f, D_dir v⟩`.
//!
//! Differentiation flips the tag (the derivative of an even extension is odd),
//! so `grad` of a Neumann scalar is a Dirichlet vector and `div` of a
//! Dirichlet vector is a Neumann scalar. The compact Laplacian keeps the tag.

use std::borrow::Cow;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::mixture::{densities_from_entropy, molar_fractions, EntropyVector, MixtureSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Bc {
    /// Zero value on the wall (odd ghost).
    Dirichlet,
    /// Zero normal derivative on the wall (even ghost).
    Neumann,
}

impl Bc {
    /// The tag of a first derivative of a field carrying `self`.
    pub fn dual(self) -> Bc {
        match self {
            Bc::Dirichlet => Bc::Neumann,
            Bc::Neumann => Bc::Dirichlet,
        }
    }

    fn ghost_sign(self) -> f64 {
        match self {
            Bc::Dirichlet => -1.0,
            Bc::Neumann => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Bc::Dirichlet => "dirichlet",
            Bc::Neumann => "neumann",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    dim: usize,
    n: [usize; 2],
    h: [f64; 2],
}

impl Grid {
    /// Uniform grid on `[0, L₀] (× [0, L₁])`.
    pub fn new(extents: &[usize], lengths: &[f64]) -> Result<Self> {
        if lengths.len() != extents.len() {
            return Err(Error::Domain(format!(
                "{} extents but {} lengths",
                extents.len(),
                lengths.len()
            )));
        }
        let spacing: Vec<f64> = extents
            .iter()
            .zip(lengths)
            .map(|(&n, &l)| l / n as f64)
            .collect();
        Self::from_spacing(extents, &spacing)
    }

    pub fn from_spacing(extents: &[usize], spacing: &[f64]) -> Result<Self> {
        let dim = extents.len();
        if !(1..=2).contains(&dim) || spacing.len() != dim {
            return Err(Error::Domain(format!(
                "grids are 1D or 2D, got {dim} extents and {} spacings",
                spacing.len()
            )));
        }
        if let Some(n) = extents.iter().find(|&&n| n < 4) {
            return Err(Error::Domain(format!("extent {n} is below the minimum of 4")));
        }
        if let Some(h) = spacing.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return Err(Error::Domain(format!("spacing {h} is not positive")));
        }
        let mut n = [1, 1];
        let mut h = [1.0, 1.0];
        n[..dim].copy_from_slice(extents);
        h[..dim].copy_from_slice(spacing);
        Ok(Self { dim, n, h })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extents(&self) -> &[usize] {
        &self.n[..self.dim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.h[..self.dim]
    }

    pub fn n_cells(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.n[0] * j
    }

    /// Cell centre; the second coordinate is 0 in 1D.
    pub fn center(&self, cell: usize) -> [f64; 2] {
        let (i, j) = (cell % self.n[0], cell / self.n[0]);
        let y = if self.dim == 2 {
            (j as f64 + 0.5) * self.h[1]
        } else {
            0.0
        };
        [(i as f64 + 0.5) * self.h[0], y]
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }

    /// Midpoint-rule inner product.
    pub fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.cell_volume() * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }

    pub fn integral(&self, a: &[f64]) -> f64 {
        self.cell_volume() * a.iter().sum::<f64>()
    }

    /// Length and stride of grid lines along `axis`, plus their start indices.
    fn lines(&self, axis: usize) -> (usize, usize, impl Iterator<Item = usize>) {
        let (nx, ny) = (self.n[0], self.n[1]);
        let (len, stride, count, step) = if axis == 0 {
            (nx, 1, ny, nx)
        } else {
            (ny, nx, nx, 1)
        };
        (len, stride, (0..count).map(move |k| k * step))
    }
}

/// `out += scale · D_{bc,axis} f` with the central difference `(f₊ − f₋)/2h`.
pub fn diff_acc(grid: &Grid, axis: usize, bc: Bc, f: &[f64], scale: f64, out: &mut [f64]) {
    let s = scale * 0.5 / grid.h[axis];
    let g = bc.ghost_sign();
    let (len, stride, starts) = grid.lines(axis);
    for start in starts {
        let at = |k: usize| start + k * stride;
        out[at(0)] += s * (f[at(1)] - g * f[at(0)]);
        for k in 1..len - 1 {
            out[at(k)] += s * (f[at(k + 1)] - f[at(k - 1)]);
        }
        out[at(len - 1)] += s * (g * f[at(len - 1)] - f[at(len - 2)]);
    }
}

/// `out += scale · Δ_bc f` with the compact three-point stencil on every axis.
pub fn laplacian_acc(grid: &Grid, bc: Bc, f: &[f64], scale: f64, out: &mut [f64]) {
    let g = bc.ghost_sign();
    for axis in 0..grid.dim {
        let s = scale / (grid.h[axis] * grid.h[axis]);
        let (len, stride, starts) = grid.lines(axis);
        for start in starts {
            let at = |k: usize| start + k * stride;
            out[at(0)] += s * (f[at(1)] - (2.0 - g) * f[at(0)]);
            for k in 1..len - 1 {
                out[at(k)] += s * (f[at(k + 1)] - 2.0 * f[at(k)] + f[at(k - 1)]);
            }
            out[at(len - 1)] += s * (f[at(len - 2)] - (2.0 - g) * f[at(len - 1)]);
        }
    }
}

/// Diagonal of `−Δ_bc`.
pub fn neg_laplacian_diag(grid: &Grid, bc: Bc) -> Vec<f64> {
    let mut d = vec![0.0; grid.n_cells()];
    let g = bc.ghost_sign();
    for axis in 0..grid.dim {
        let s = 1.0 / (grid.h[axis] * grid.h[axis]);
        let (len, stride, starts) = grid.lines(axis);
        for start in starts {
            for k in 0..len {
                let wall = k == 0 || k == len - 1;
                d[start + k * stride] += s * if wall { 2.0 - g } else { 2.0 };
            }
        }
    }
    d
}

/// Discrete Dirichlet energy `⟨−Δ_bc f, f⟩`, a sum of squared face differences.
pub fn dirichlet_form(grid: &Grid, bc: Bc, f: &[f64]) -> f64 {
    let mut lap = vec![0.0; f.len()];
    laplacian_acc(grid, bc, f, -1.0, &mut lap);
    grid.dot(&lap, f)
}

/// `out += scale · ½[Σ_d a_d D_{bc,d} v + Σ_d D_{bc*,d}(a_d v)]`.
///
/// For a Dirichlet advecting field `a` this is the operator of `b̂(a, ·, ·)`:
/// `⟨skew_advection(a, v), w⟩ = b̂(a, v, w)`, skew up to roundoff.
pub fn skew_advection_acc(a: &VectorField, bc: Bc, v: &[f64], scale: f64, out: &mut [f64]) {
    let grid = &a.grid;
    let half = 0.5 * scale;
    let mut d = vec![0.0; v.len()];
    let mut av = vec![0.0; v.len()];
    for (axis, ad) in a.comps.iter().enumerate() {
        d.iter_mut().for_each(|x| *x = 0.0);
        diff_acc(grid, axis, bc, v, 1.0, &mut d);
        for ((o, ai), di) in out.iter_mut().zip(ad).zip(&d) {
            *o += half * ai * di;
        }
        for ((p, ai), vi) in av.iter_mut().zip(ad).zip(v) {
            *p = ai * vi;
        }
        diff_acc(grid, axis, bc.dual(), &av, half, out);
    }
}

/// Uniform access to the scalar components of a field.
pub trait Components {
    fn grid(&self) -> &Grid;
    fn bc(&self) -> Bc;
    fn n_components(&self) -> usize;
    fn component(&self, c: usize) -> Cow<'_, [f64]>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub bc: Bc,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, bc: Bc, values: Vec<f64>) -> Result<Self> {
        check_values(&grid, 1, &values)?;
        Ok(Self { grid, bc, values })
    }

    pub fn zeros(grid: Grid, bc: Bc) -> Self {
        Self {
            grid,
            bc,
            values: vec![0.0; grid.n_cells()],
        }
    }

    pub fn from_fn(grid: Grid, bc: Bc, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..grid.n_cells()).map(|c| f(grid.center(c))).collect();
        Self { grid, bc, values }
    }

    pub fn norm_sq(&self) -> f64 {
        self.grid.dot(&self.values, &self.values)
    }
}

/// A `dim`-component field.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub grid: Grid,
    pub bc: Bc,
    pub comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn new(grid: Grid, bc: Bc, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != grid.dim() {
            return Err(Error::GridMismatch(format!(
                "{} components on a {}D grid",
                comps.len(),
                grid.dim()
            )));
        }
        for c in &comps {
            check_values(&grid, 1, c)?;
        }
        Ok(Self { grid, bc, comps })
    }

    pub fn zeros(grid: Grid, bc: Bc) -> Self {
        Self {
            grid,
            bc,
            comps: vec![vec![0.0; grid.n_cells()]; grid.dim()],
        }
    }

    pub fn from_fn(grid: Grid, bc: Bc, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        let mut v = Self::zeros(grid, bc);
        for cell in 0..grid.n_cells() {
            let val = f(grid.center(cell));
            for (d, comp) in v.comps.iter_mut().enumerate() {
                comp[cell] = val[d];
            }
        }
        v
    }

    pub fn norm_sq(&self) -> f64 {
        self.comps.iter().map(|c| self.grid.dot(c, c)).sum()
    }

    pub fn dot(&self, other: &VectorField) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        Ok(self
            .comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| self.grid.dot(a, b))
            .sum())
    }
}

/// N values per cell, stored cell by cell. Always Neumann.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeciesField {
    pub grid: Grid,
    pub n: usize,
    pub values: Vec<f64>,
}

impl SpeciesField {
    pub fn new(grid: Grid, n: usize, values: Vec<f64>) -> Result<Self> {
        check_values(&grid, n, &values)?;
        Ok(Self { grid, n, values })
    }

    pub fn zeros(grid: Grid, n: usize) -> Self {
        Self {
            grid,
            n,
            values: vec![0.0; n * grid.n_cells()],
        }
    }

    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.n..(cell + 1) * self.n]
    }

    pub fn cell_mut(&mut self, cell: usize) -> &mut [f64] {
        &mut self.values[cell * self.n..(cell + 1) * self.n]
    }

    pub fn from_components(grid: Grid, comps: &[Vec<f64>]) -> Result<Self> {
        let n = comps.len();
        let mut f = Self::zeros(grid, n);
        for (s, comp) in comps.iter().enumerate() {
            check_values(&grid, 1, comp)?;
            for (cell, v) in comp.iter().enumerate() {
                f.values[cell * n + s] = *v;
            }
        }
        Ok(f)
    }

    /// Volume integral of every component.
    pub fn totals(&self) -> Vec<f64> {
        (0..self.n)
            .map(|s| self.grid.integral(&self.component(s)))
            .collect()
    }
}

fn check_values(grid: &Grid, per_cell: usize, values: &[f64]) -> Result<()> {
    if values.len() != per_cell * grid.n_cells() {
        return Err(Error::GridMismatch(format!(
            "{} values for {} cells x {per_cell}",
            values.len(),
            grid.n_cells()
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite field value {v}")));
    }
    Ok(())
}

impl Components for ScalarField {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn bc(&self) -> Bc {
        self.bc
    }
    fn n_components(&self) -> usize {
        1
    }
    fn component(&self, _c: usize) -> Cow<'_, [f64]> {
        Cow::Borrowed(&self.values)
    }
}

impl Components for VectorField {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn bc(&self) -> Bc {
        self.bc
    }
    fn n_components(&self) -> usize {
        self.comps.len()
    }
    fn component(&self, c: usize) -> Cow<'_, [f64]> {
        Cow::Borrowed(&self.comps[c])
    }
}

impl Components for SpeciesField {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn bc(&self) -> Bc {
        Bc::Neumann
    }
    fn n_components(&self) -> usize {
        self.n
    }
    fn component(&self, c: usize) -> Cow<'_, [f64]> {
        Cow::Owned(self.values.iter().skip(c).step_by(self.n).copied().collect())
    }
}

pub fn grad(f: &ScalarField) -> VectorField {
    let grid = f.grid;
    let comps = (0..grid.dim())
        .map(|axis| {
            let mut out = vec![0.0; grid.n_cells()];
            diff_acc(&grid, axis, f.bc, &f.values, 1.0, &mut out);
            out
        })
        .collect();
    VectorField {
        grid,
        bc: f.bc.dual(),
        comps,
    }
}

pub fn div(v: &VectorField) -> ScalarField {
    let grid = v.grid;
    let mut out = vec![0.0; grid.n_cells()];
    for (axis, comp) in v.comps.iter().enumerate() {
        diff_acc(&grid, axis, v.bc, comp, 1.0, &mut out);
    }
    ScalarField {
        grid,
        bc: v.bc.dual(),
        values: out,
    }
}

pub fn laplacian(f: &ScalarField) -> ScalarField {
    let mut out = vec![0.0; f.values.len()];
    laplacian_acc(&f.grid, f.bc, &f.values, 1.0, &mut out);
    ScalarField {
        grid: f.grid,
        bc: f.bc,
        values: out,
    }
}

/// `‖f‖² + ‖grad f‖²` summed over components, with the central gradient.
pub fn h1_norm_sq<F: Components>(f: &F) -> f64 {
    let grid = *f.grid();
    let mut total = 0.0;
    for c in 0..f.n_components() {
        let comp = f.component(c);
        total += grid.dot(&comp, &comp);
        for axis in 0..grid.dim() {
            let mut d = vec![0.0; grid.n_cells()];
            diff_acc(&grid, axis, f.bc(), &comp, 1.0, &mut d);
            total += grid.dot(&d, &d);
        }
    }
    total
}

/// `Σ_d u_d D_{bc,d} f`.
fn directional(u: &VectorField, bc: Bc, f: &[f64]) -> Vec<f64> {
    let grid = &u.grid;
    let mut out = vec![0.0; f.len()];
    let mut d = vec![0.0; f.len()];
    for (axis, ud) in u.comps.iter().enumerate() {
        d.iter_mut().for_each(|x| *x = 0.0);
        diff_acc(grid, axis, bc, f, 1.0, &mut d);
        for ((o, a), b) in out.iter_mut().zip(ud).zip(&d) {
            *o += a * b;
        }
    }
    out
}

/// `b̂(u, v, w) = ½(⟨(u·∇)v, w⟩ − ⟨(u·∇)w, v⟩)`.
///
/// Evaluated literally in this antisymmetrized form, so `b̂(u,v,v)` is exactly
/// zero and swapping `v` and `w` flips the sign bit for bit.
pub fn trilinear_bhat<V: Components>(u: &VectorField, v: &V, w: &V) -> Result<f64> {
    u.grid.check_same(v.grid())?;
    u.grid.check_same(w.grid())?;
    if u.bc != Bc::Dirichlet {
        return Err(Error::Domain("the advecting field must be Dirichlet".into()));
    }
    if v.n_components() != w.n_components() {
        return Err(Error::GridMismatch(format!(
            "{} vs {} components",
            v.n_components(),
            w.n_components()
        )));
    }
    let grid = u.grid;
    let (mut forward, mut backward) = (0.0, 0.0);
    for c in 0..v.n_components() {
        let (vc, wc) = (v.component(c), w.component(c));
        forward += grid.dot(&directional(u, v.bc(), &vc), &wc);
        backward += grid.dot(&directional(u, w.bc(), &wc), &vc);
    }
    Ok(0.5 * (forward - backward))
}

/// `|b̂(u, ρ′(w), w) + ½⟨div u, ρ′·w⟩ + ⟨div u, ln x_{N+1}/M_{N+1}⟩|`.
///
/// The three terms cancel for continuous fields; the discrete value measures
/// the consistency error of the stencils.
pub fn divergence_identity_residual(
    u: &VectorField,
    w: &SpeciesField,
    spec: &MixtureSpec,
) -> Result<f64> {
    u.grid.check_same(&w.grid)?;
    let n = spec.n_reduced();
    if w.n != n {
        return Err(Error::GridMismatch(format!(
            "species field has {} components, mixture has {n}",
            w.n
        )));
    }
    let grid = u.grid;
    let m_last = spec.molar_masses()[n];
    let mut rho = SpeciesField::zeros(grid, n);
    let mut rho_dot_w = vec![0.0; grid.n_cells()];
    let mut tail = vec![0.0; grid.n_cells()];
    for cell in 0..grid.n_cells() {
        let wc = EntropyVector::new(w.cell(cell).to_vec())?;
        let r = densities_from_entropy(&wc, spec)?;
        rho_dot_w[cell] = r.as_slice().iter().zip(wc.as_slice()).map(|(a, b)| a * b).sum();
        tail[cell] = molar_fractions(&r, spec)?.x[n].ln() / m_last;
        rho.cell_mut(cell).copy_from_slice(r.as_slice());
    }
    let div_u = div(u);
    let b = trilinear_bhat(u, &rho, w)?;
    Ok((b + 0.5 * grid.dot(&div_u.values, &rho_dot_w) + grid.dot(&div_u.values, &tail)).abs())
}

/// Header-plus-values text snapshot of one field.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub grid: Grid,
    pub name: String,
    pub time: f64,
    pub bc: Bc,
    /// Component-major values.
    pub comps: Vec<Vec<f64>>,
}

const SNAPSHOT_MAGIC: &str = "nsms-snapshot 1";

/// Writes `field` with shortest round-trip formatting, one cell per line.
pub fn write_snapshot<W: Write, F: Components>(
    mut out: W,
    name: &str,
    time: f64,
    field: &F,
) -> Result<()> {
    if name.contains('\n') {
        return Err(Error::Domain("snapshot names are single-line".into()));
    }
    let grid = field.grid();
    let join = |v: Vec<String>| v.join(" ");
    writeln!(out, "{SNAPSHOT_MAGIC}")?;
    writeln!(out, "dim {}", grid.dim())?;
    writeln!(out, "extents {}", join(grid.extents().iter().map(|n| n.to_string()).collect()))?;
    writeln!(out, "spacing {}", join(grid.spacing().iter().map(|h| h.to_string()).collect()))?;
    writeln!(out, "field {name}")?;
    writeln!(out, "time {time}")?;
    writeln!(out, "components {}", field.n_components())?;
    writeln!(out, "bc {}", field.bc().name())?;
    let comps: Vec<Cow<[f64]>> = (0..field.n_components()).map(|c| field.component(c)).collect();
    for cell in 0..grid.n_cells() {
        let line: Vec<String> = comps.iter().map(|c| c[cell].to_string()).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(input: R) -> Result<Snapshot> {
    let mut lines = input.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse(format!("snapshot ends before {what}")))?
            .map_err(Error::from)
    };
    if next("magic")?.trim() != SNAPSHOT_MAGIC {
        return Err(Error::Parse("not a snapshot file".into()));
    }
    fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| Error::Parse(format!("expected `{key}`, got `{line}`")))
    }
    fn numbers<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
        s.split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad number `{t}`"))))
            .collect()
    }
    let dim: usize = field(&next("dim")?, "dim")?
        .trim()
        .parse()
        .map_err(|_| Error::Parse("bad dim".into()))?;
    let extents: Vec<usize> = numbers(field(&next("extents")?, "extents")?)?;
    let spacing: Vec<f64> = numbers(field(&next("spacing")?, "spacing")?)?;
    if extents.len() != dim {
        return Err(Error::Parse(format!("dim {dim} with {} extents", extents.len())));
    }
    let grid = Grid::from_spacing(&extents, &spacing)?;
    let name = field(&next("field")?, "field")?.to_string();
    let time: f64 = field(&next("time")?, "time")?
        .trim()
        .parse()
        .map_err(|_| Error::Parse("bad time".into()))?;
    let ncomp: usize = field(&next("components")?, "components")?
        .trim()
        .parse()
        .map_err(|_| Error::Parse("bad component count".into()))?;
    let bc = match field(&next("bc")?, "bc")?.trim() {
        "dirichlet" => Bc::Dirichlet,
        "neumann" => Bc::Neumann,
        other => return Err(Error::Parse(format!("unknown bc `{other}`"))),
    };
    let mut comps = vec![Vec::with_capacity(grid.n_cells()); ncomp];
    for cell in 0..grid.n_cells() {
        let vals: Vec<f64> = numbers(&next("cell values")?)?;
        if vals.len() != ncomp {
            return Err(Error::Parse(format!(
                "cell {cell} has {} values, expected {ncomp}",
                vals.len()
            )));
        }
        for (c, v) in vals.into_iter().enumerate() {
            comps[c].push(v);
        }
    }
    Ok(Snapshot {
        grid,
        name,
        time,
        bc,
        comps,
    })
}
