//! Pointwise mixture algebra.
//!
//! Everything here acts on a single cell: a reduced density vector
//! `ρ' = (ρ₁, …, ρ_N)` with the last species reconstructed as
//! `ρ_{N+1} = 1 − Σρᵢ`, molar fractions `xᵢ = ρᵢ / (c Mᵢ)` with
//! `c = Σ ρₖ / Mₖ`, the entropy density `h = c Σ xᵢ ln xᵢ`, the entropy
//! variables `w = ∂h/∂ρ'` and the matrices that couple them:
//!
//! ```text
//! A    (N+1)×(N+1)   Maxwell-Stefan matrix, ∇x = −A J
//! A⁰   N×N           A reduced to the first N species
//! H    N×N           Hessian of h, ∂w/∂ρ'
//! G    N×N           ∂w/∂x'
//! B    N×N           A⁰⁻¹ G⁻¹, the mobility in  ∂ρ' = div(B ∇w)
//! ```

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative asymmetry tolerated in `A⁰⁻¹G⁻¹` before it is symmetrized.
const B_ASYMMETRY_TOL: f64 = 1e-8;

/// Iteration cap for the entropy-variable inversion.
const INVERSION_MAX_ITERS: usize = 100;

/// Species data: molar masses and the symmetric Maxwell-Stefan diffusivities.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    molar_masses: Vec<f64>,
    diffusivities: DMatrix<f64>,
}

impl MixtureSpec {
    /// `diffusivities` is (N+1)×(N+1); its diagonal is ignored.
    pub fn new(molar_masses: Vec<f64>, diffusivities: DMatrix<f64>) -> Result<Self> {
        let ns = molar_masses.len();
        if ns < 2 {
            return Err(Error::Domain(format!(
                "a mixture needs at least 2 species, got {ns}"
            )));
        }
        if diffusivities.nrows() != ns || diffusivities.ncols() != ns {
            return Err(Error::Domain(format!(
                "diffusivity matrix is {}x{}, expected {ns}x{ns}",
                diffusivities.nrows(),
                diffusivities.ncols()
            )));
        }
        if let Some(m) = molar_masses.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
            return Err(Error::Domain(format!("molar mass {m} is not positive")));
        }
        for i in 0..ns {
            for j in (i + 1)..ns {
                let (dij, dji) = (diffusivities[(i, j)], diffusivities[(j, i)]);
                if !(dij.is_finite() && dij > 0.0) {
                    return Err(Error::Domain(format!("D[{i}][{j}] = {dij} is not positive")));
                }
                if dij != dji {
                    return Err(Error::Domain(format!(
                        "diffusivities are not symmetric: D[{i}][{j}] = {dij}, D[{j}][{i}] = {dji}"
                    )));
                }
            }
        }
        Ok(Self {
            molar_masses,
            diffusivities,
        })
    }

    /// Builds the spec from the strict upper triangle of D, row-major:
    /// `D₁₂, D₁₃, …, D₁,N+1, D₂₃, …`.
    pub fn from_upper_triangle(molar_masses: Vec<f64>, upper: &[f64]) -> Result<Self> {
        let ns = molar_masses.len();
        let expected = ns * ns.saturating_sub(1) / 2;
        if upper.len() != expected {
            return Err(Error::Domain(format!(
                "{ns} species need {expected} diffusivities, got {}",
                upper.len()
            )));
        }
        let mut d = DMatrix::zeros(ns, ns);
        let mut k = 0;
        for i in 0..ns {
            for j in (i + 1)..ns {
                d[(i, j)] = upper[k];
                d[(j, i)] = upper[k];
                k += 1;
            }
        }
        Self::new(molar_masses, d)
    }

    /// Total number of species, N+1.
    pub fn n_species(&self) -> usize {
        self.molar_masses.len()
    }

    /// Number of evolved species, N.
    pub fn n_reduced(&self) -> usize {
        self.molar_masses.len() - 1
    }

    pub fn molar_masses(&self) -> &[f64] {
        &self.molar_masses
    }

    pub fn diffusivity(&self, i: usize, j: usize) -> f64 {
        self.diffusivities[(i, j)]
    }

    pub fn upper_triangle(&self) -> Vec<f64> {
        let ns = self.n_species();
        let mut out = Vec::with_capacity(ns * (ns - 1) / 2);
        for i in 0..ns {
            for j in (i + 1)..ns {
                out.push(self.diffusivities[(i, j)]);
            }
        }
        out
    }

    /// `d_ij = 1 / (c² Mᵢ Mⱼ Dᵢⱼ)`.
    fn drag(&self, i: usize, j: usize, c: f64) -> f64 {
        let m = &self.molar_masses;
        1.0 / (c * c * m[i] * m[j] * self.diffusivities[(i, j)])
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n_reduced() {
            return Err(Error::Domain(format!(
                "vector of length {len} does not match a mixture with {} evolved species",
                self.n_reduced()
            )));
        }
        Ok(())
    }
}

/// Densities of the first N species, strictly inside the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedDensity(Vec<f64>);

impl ReducedDensity {
    pub fn new(rho: Vec<f64>) -> Result<Self> {
        if rho.is_empty() {
            return Err(Error::Domain("empty density vector".into()));
        }
        if let Some(r) = rho.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(Error::Domain(format!("density {r} is not strictly positive")));
        }
        let last = 1.0 - rho.iter().sum::<f64>();
        if !(last > 0.0) {
            return Err(Error::Domain(format!(
                "densities sum to {}, the last species would be {last}",
                1.0 - last
            )));
        }
        Ok(Self(rho))
    }

    /// Skips validation. Callers guarantee the simplex invariant.
    pub(crate) fn new_unchecked(rho: Vec<f64>) -> Self {
        Self(rho)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `ρ_{N+1} = 1 − Σᵢ ρᵢ`.
    pub fn last(&self) -> f64 {
        1.0 - self.0.iter().sum::<f64>()
    }

    /// All N+1 densities.
    pub fn full(&self) -> Vec<f64> {
        let mut v = self.0.clone();
        v.push(self.last());
        v
    }
}

/// Entropy variables of one cell. Any finite vector is admissible.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyVector(Vec<f64>);

impl EntropyVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some(v) = w.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("entropy variable {v} is not finite")));
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Molar fractions of all N+1 species and the total molar concentration.
#[derive(Clone, Debug, PartialEq)]
pub struct MolarState {
    pub x: Vec<f64>,
    pub c: f64,
}

/// Fractions from the full density vector; zero densities are allowed here.
fn fractions_of_full(rho_full: &[f64], masses: &[f64]) -> (Vec<f64>, f64) {
    let c: f64 = rho_full.iter().zip(masses).map(|(r, m)| r / m).sum();
    let x = rho_full
        .iter()
        .zip(masses)
        .map(|(r, m)| r / (c * m))
        .collect();
    (x, c)
}

pub fn molar_fractions(rho: &ReducedDensity, spec: &MixtureSpec) -> Result<MolarState> {
    spec.check_len(rho.0.len())?;
    let (x, c) = fractions_of_full(&rho.full(), &spec.molar_masses);
    Ok(MolarState { x, c })
}

/// Gibbs free energy density `h(ρ') = c Σ xᵢ ln xᵢ`.
pub fn entropy_density(rho: &ReducedDensity, spec: &MixtureSpec) -> Result<f64> {
    spec.check_len(rho.0.len())?;
    Ok(entropy_density_full(&rho.full(), spec))
}

/// `h` for a point of the closed simplex, with `0 ln 0 = 0`.
///
/// Used for initial data that may have vanishing components.
pub fn entropy_density_full(rho_full: &[f64], spec: &MixtureSpec) -> f64 {
    let (x, c) = fractions_of_full(rho_full, &spec.molar_masses);
    c * x
        .iter()
        .map(|&xi| if xi > 0.0 { xi * xi.ln() } else { 0.0 })
        .sum::<f64>()
}

/// `wᵢ = ln xᵢ / Mᵢ − ln x_{N+1} / M_{N+1}`.
pub fn entropy_vars(rho: &ReducedDensity, spec: &MixtureSpec) -> Result<EntropyVector> {
    spec.check_len(rho.0.len())?;
    let MolarState { x, .. } = molar_fractions(rho, spec)?;
    let m = &spec.molar_masses;
    let n = spec.n_reduced();
    let tail = x[n].ln() / m[n];
    Ok(EntropyVector(
        (0..n).map(|i| x[i].ln() / m[i] - tail).collect(),
    ))
}

/// Inverts [`entropy_vars`].
///
/// Writing `s = ln x_{N+1} / M_{N+1}` every fraction is explicit,
/// `xᵢ = exp(Mᵢ (wᵢ + s))`, `x_{N+1} = exp(M_{N+1} s)`, and the constraint
/// `Σ xᵢ = 1` becomes a scalar equation that is increasing and convex in `s`.
/// Newton started right of the root therefore decreases monotonically onto it.
/// The densities follow from `ρᵢ = Mᵢ xᵢ / Σⱼ Mⱼ xⱼ`, so no component is ever
/// obtained by cancellation.
pub fn densities_from_entropy(w: &EntropyVector, spec: &MixtureSpec) -> Result<ReducedDensity> {
    spec.check_len(w.0.len())?;
    let n = spec.n_reduced();
    let m = &spec.molar_masses;
    let w = &w.0;

    let constraint = |s: f64| -> (f64, f64) {
        let mut f = -1.0;
        let mut df = 0.0;
        for i in 0..=n {
            let a = if i < n { w[i] + s } else { s };
            let e = (m[i] * a).exp();
            f += e;
            df += m[i] * e;
        }
        (f, df)
    };

    // At this point every fraction is ≤ 1 and at least one equals 1.
    let mut s = w.iter().fold(0.0_f64, |acc, wi| acc.min(-wi));
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=INVERSION_MAX_ITERS {
        iterations = it;
        let (f, df) = constraint(s);
        residual = f.abs();
        if f <= 0.0 {
            converged = residual <= 1e-13;
            break;
        }
        let step = f / df;
        s -= step;
        if step.abs() <= 4.0 * f64::EPSILON * s.abs().max(1.0) {
            residual = constraint(s).0.abs();
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::InversionFailed {
            iterations,
            residual,
        });
    }

    let x: Vec<f64> = (0..=n)
        .map(|i| {
            let a = if i < n { w[i] + s } else { s };
            (m[i] * a).exp()
        })
        .collect();
    let mass: f64 = x.iter().zip(m).map(|(xi, mi)| xi * mi).sum();
    let rho: Vec<f64> = (0..n).map(|i| m[i] * x[i] / mass).collect();
    let last = m[n] * x[n] / mass;
    let sum: f64 = rho.iter().sum();
    // exp underflow: the point is interior but not representable
    if rho.iter().any(|r| !(*r > 0.0)) || !(last > 0.0) || !(sum < 1.0) {
        return Err(Error::InversionFailed {
            iterations,
            residual,
        });
    }
    Ok(ReducedDensity(rho))
}

/// The full Maxwell-Stefan matrix: `Aᵢⱼ = −dᵢⱼρᵢ`, `Aᵢᵢ = Σ_{k≠i} dᵢₖρₖ`.
pub fn matrix_a_full(rho: &ReducedDensity, spec: &MixtureSpec) -> Result<DMatrix<f64>> {
    let MolarState { c, .. } = molar_fractions(rho, spec)?;
    let r = rho.full();
    let ns = spec.n_species();
    let mut a = DMatrix::zeros(ns, ns);
    for i in 0..ns {
        for j in 0..ns {
            if i != j {
                let d = spec.drag(i, j, c);
                a[(i, j)] = -d * r[i];
                a[(i, i)] += d * r[j];
            }
        }
    }
    Ok(a)
}

/// `A⁰ᵢⱼ = −(dᵢⱼ − dᵢ,N+1) ρᵢ`, `A⁰ᵢᵢ = Σ_{k≠i, k≤N} (dᵢₖ − dᵢ,N+1) ρₖ + dᵢ,N+1`.
pub fn matrix_a0(rho: &ReducedDensity, spec: &MixtureSpec) -> Result<DMatrix<f64>> {
    let MolarState { c, .. } = molar_fractions(rho, spec)?;
    let r = rho.as_slice();
    let n = spec.n_reduced();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let di_last = spec.drag(i, n, c);
        a[(i, i)] = di_last;
        for j in 0..n {
            if i != j {
                let excess = spec.drag(i, j, c) - di_last;
                a[(i, j)] = -excess * r[i];
                a[(i, i)] += excess * r[j];
            }
        }
    }
    Ok(a)
}

/// `Gᵢⱼ = ∂wᵢ/∂xⱼ = c (1/ρ_{N+1} + δᵢⱼ/ρᵢ)`.
pub fn matrix_g(rho: &ReducedDensity, spec: &MixtureSpec) -> Result<DMatrix<f64>> {
    let MolarState { c, .. } = molar_fractions(rho, spec)?;
    let r = rho.as_slice();
    let n = r.len();
    let inv_last = 1.0 / rho.last();
    let mut g = DMatrix::from_element(n, n, c * inv_last);
    for i in 0..n {
        g[(i, i)] += c / r[i];
    }
    Ok(g)
}

/// Hessian of `h` with respect to `ρ'`.
pub fn matrix_h(rho: &ReducedDensity, spec: &MixtureSpec) -> Result<DMatrix<f64>> {
    let MolarState { c, .. } = molar_fractions(rho, spec)?;
    let r = rho.as_slice();
    let m = &spec.molar_masses;
    let n = r.len();
    let ml = m[n];
    let tail = 1.0 / (ml * rho.last());
    let v: Vec<f64> = (0..n).map(|i| 1.0 / m[i] - 1.0 / ml).collect();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] = tail - v[i] * v[j] / c;
        }
        h[(i, i)] += 1.0 / (m[i] * r[i]);
    }
    Ok(h)
}

/// `B = A⁰⁻¹ G⁻¹`, obtained from a Cholesky solve with G and an LU solve with A⁰.
pub fn matrix_b(rho: &ReducedDensity, spec: &MixtureSpec) -> Result<DMatrix<f64>> {
    let a0 = matrix_a0(rho, spec)?;
    let g = matrix_g(rho, spec)?;
    let n = g.nrows();
    let g_inv = g
        .cholesky()
        .ok_or_else(|| Error::Singular("G is not positive definite".into()))?
        .solve(&DMatrix::identity(n, n));
    let b = a0
        .lu()
        .solve(&g_inv)
        .ok_or_else(|| Error::Singular("A0 is singular".into()))?;
    let asym = (&b - b.transpose()).norm() / b.norm();
    if !(asym <= B_ASYMMETRY_TOL) {
        return Err(Error::Singular(format!(
            "A0^-1 G^-1 is not symmetric (relative asymmetry {asym:e})"
        )));
    }
    Ok((&b + b.transpose()) * 0.5)
}

/// Pushes nonnegative data on the closed simplex into its interior:
/// `ρᵢ ← (ρᵢ⁰ + 2α⁰) / (1 + 2α⁰(N+1))`. Every output component is ≥ α⁰.
pub fn lift_initial(rho0: &[f64], alpha0: f64) -> Result<ReducedDensity> {
    let ns = rho0.len();
    if ns < 2 {
        return Err(Error::Domain("need at least 2 species".into()));
    }
    let cap = 1.0 / (2.0 * ns as f64);
    if !(alpha0 > 0.0 && alpha0 < cap) {
        return Err(Error::Domain(format!(
            "alpha0 = {alpha0} outside (0, {cap})"
        )));
    }
    if let Some(r) = rho0.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::Domain(format!("initial density {r} is negative")));
    }
    let total: f64 = rho0.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!(
            "initial densities sum to {total}, expected 1"
        )));
    }
    let scale = 1.0 + 2.0 * alpha0 * ns as f64;
    let lifted = rho0[..ns - 1]
        .iter()
        .map(|r| (r + 2.0 * alpha0) / scale)
        .collect();
    ReducedDensity::new(lifted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{random_spec, sample_simplex};
    use approx_eq::close;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol * (1.0 + b.abs())
        }
    }

    fn equal_binary(d12: f64) -> MixtureSpec {
        MixtureSpec::from_upper_triangle(vec![1.0, 1.0], &[d12]).unwrap()
    }

    fn rd(v: &[f64]) -> ReducedDensity {
        ReducedDensity::new(v.to_vec()).unwrap()
    }

    #[test]
    fn spec_rejects_bad_input() {
        assert!(MixtureSpec::from_upper_triangle(vec![1.0], &[]).is_err());
        assert!(MixtureSpec::from_upper_triangle(vec![1.0, -1.0], &[1.0]).is_err());
        assert!(MixtureSpec::from_upper_triangle(vec![1.0, 1.0], &[0.0]).is_err());
        assert!(MixtureSpec::from_upper_triangle(vec![1.0, 1.0, 1.0], &[1.0]).is_err());
        let mut d = DMatrix::from_element(2, 2, 1.0);
        d[(0, 1)] = 2.0;
        assert!(MixtureSpec::new(vec![1.0, 1.0], d).is_err());
    }

    #[test]
    fn density_validation() {
        assert!(ReducedDensity::new(vec![0.0, 0.5]).is_err());
        assert!(ReducedDensity::new(vec![0.5, 0.5]).is_err());
        assert!(ReducedDensity::new(vec![f64::NAN]).is_err());
        assert!((rd(&[0.2, 0.3]).last() - 0.5).abs() < 1e-16);
    }

    #[test]
    fn molar_fraction_examples() {
        let s3 = MixtureSpec::from_upper_triangle(vec![1.0; 3], &[1.0; 3]).unwrap();
        let st = molar_fractions(&rd(&[1.0 / 3.0, 1.0 / 3.0]), &s3).unwrap();
        assert!(close(st.c, 1.0, 1e-15));
        for x in &st.x {
            assert!(close(*x, 1.0 / 3.0, 1e-15));
        }

        let st = molar_fractions(&rd(&[0.25]), &equal_binary(1.0)).unwrap();
        assert!(close(st.c, 1.0, 1e-15));
        assert!(close(st.x[0], 0.25, 1e-15) && close(st.x[1], 0.75, 1e-15));

        // c = 0.5/2 + 0.5/1 = 0.75; x1 = 0.25/0.75
        let s = MixtureSpec::from_upper_triangle(vec![2.0, 1.0], &[1.0]).unwrap();
        let st = molar_fractions(&rd(&[0.5]), &s).unwrap();
        assert!(close(st.c, 0.75, 1e-15));
        assert!(close(st.x[0], 1.0 / 3.0, 1e-15) && close(st.x[1], 2.0 / 3.0, 1e-15));
        assert!((st.x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_density_examples() {
        let h = entropy_density(&rd(&[0.5]), &equal_binary(1.0)).unwrap();
        assert!(close(h, -std::f64::consts::LN_2, 1e-14));
        let h = entropy_density(&rd(&[0.25]), &equal_binary(1.0)).unwrap();
        assert!(close(h, 0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln(), 1e-14));
        assert!(close(h, -0.562335, 1e-6));
        let s3 = MixtureSpec::from_upper_triangle(vec![1.0; 3], &[1.0; 3]).unwrap();
        let h = entropy_density(&rd(&[1.0 / 3.0, 1.0 / 3.0]), &s3).unwrap();
        assert!(close(h, -(3.0f64).ln(), 1e-14));
    }

    #[test]
    fn entropy_density_closed_simplex() {
        let s = equal_binary(1.0);
        assert_eq!(entropy_density_full(&[0.0, 1.0], &s), 0.0);
        let open = entropy_density(&rd(&[0.25]), &s).unwrap();
        assert!(close(entropy_density_full(&[0.25, 0.75], &s), open, 1e-15));
    }

    #[test]
    fn entropy_variable_examples() {
        let w = entropy_vars(&rd(&[0.5]), &equal_binary(1.0)).unwrap();
        assert!(w.as_slice()[0].abs() < 1e-15);
        let w = entropy_vars(&rd(&[0.25]), &equal_binary(1.0)).unwrap();
        assert!(close(w.as_slice()[0], (1.0f64 / 3.0).ln(), 1e-14));
        let s = MixtureSpec::from_upper_triangle(vec![2.0, 1.0], &[1.0]).unwrap();
        let w = entropy_vars(&rd(&[0.5]), &s).unwrap();
        let expected = (1.0f64 / 3.0).ln() / 2.0 - (2.0f64 / 3.0).ln();
        assert!(close(w.as_slice()[0], expected, 1e-14));
        assert!(close(expected, -0.143841, 1e-5));
    }

    #[test]
    fn inversion_examples() {
        let s = equal_binary(1.0);
        let r = densities_from_entropy(&EntropyVector::new(vec![0.0]).unwrap(), &s).unwrap();
        assert!(close(r.as_slice()[0], 0.5, 1e-15));

        let w = entropy_vars(&rd(&[0.25]), &s).unwrap();
        let r = densities_from_entropy(&w, &s).unwrap();
        assert!((r.as_slice()[0] - 0.25).abs() < 1e-10);

        // equal-mass binary: ρ₁ = logistic(w)
        let r = densities_from_entropy(&EntropyVector::new(vec![20.0]).unwrap(), &s).unwrap();
        let logistic = 1.0 / (1.0 + (-20.0f64).exp());
        assert!(r.as_slice()[0] < 1.0 && r.last() > 0.0);
        assert!((r.as_slice()[0] - logistic).abs() < 1e-15);
        let r = densities_from_entropy(&EntropyVector::new(vec![-30.0]).unwrap(), &s).unwrap();
        let logistic = 1.0 / (1.0 + 30.0f64.exp());
        assert!(((r.as_slice()[0] - logistic) / logistic).abs() < 1e-12);
    }

    #[test]
    fn inversion_rejects_underflow() {
        let s = equal_binary(1.0);
        let err = densities_from_entropy(&EntropyVector::new(vec![-1000.0]).unwrap(), &s);
        assert!(matches!(err, Err(Error::InversionFailed { .. })));
        assert!(EntropyVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn a_full_examples() {
        let a = matrix_a_full(&rd(&[0.5]), &equal_binary(1.0)).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert!((a - expected).amax() < 1e-15);

        // equal densities and drags: off-diagonal −d/(N+1), diagonal N d/(N+1)
        let ns = 4;
        let s = MixtureSpec::from_upper_triangle(vec![1.0; ns], &vec![2.0; 6]).unwrap();
        let r = rd(&vec![0.25; ns - 1]);
        let a = matrix_a_full(&r, &s).unwrap();
        let d = 0.5; // c = 1, M = 1, D = 2
        for i in 0..ns {
            for j in 0..ns {
                let e = if i == j {
                    (ns - 1) as f64 * d / ns as f64
                } else {
                    -d / ns as f64
                };
                assert!((a[(i, j)] - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn a_full_annihilates_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for ns in 2..=4 {
            let spec = random_spec(&mut rng, ns);
            for _ in 0..50 {
                let r = sample_simplex(&mut rng, ns, 1e-3);
                let a = matrix_a_full(&r, &spec).unwrap();
                let null = &a * dvec(&r.full());
                assert!(null.amax() < 1e-12 * a.amax());
            }
        }
    }

    #[test]
    fn a0_examples() {
        let a0 = matrix_a0(&rd(&[0.25]), &equal_binary(1.0)).unwrap();
        assert!((a0[(0, 0)] - 1.0).abs() < 1e-15);
        let s = MixtureSpec::from_upper_triangle(vec![1.0; 3], &[0.5; 3]).unwrap();
        let a0 = matrix_a0(&rd(&[0.2, 0.5]), &s).unwrap();
        let expected = DMatrix::identity(2, 2) * 2.0; // d = 1/(c² · 0.5), c = 1
        assert!((a0 - expected).amax() < 1e-14);
    }

    #[test]
    fn a0_is_the_reduction_of_a_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        use rand::Rng;
        for ns in 2..=4 {
            let spec = random_spec(&mut rng, ns);
            let n = ns - 1;
            for _ in 0..50 {
                let r = sample_simplex(&mut rng, ns, 1e-3);
                let j: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut jf = j.clone();
                jf.push(-j.iter().sum::<f64>());
                let full = matrix_a_full(&r, &spec).unwrap() * dvec(&jf);
                let reduced = matrix_a0(&r, &spec).unwrap() * dvec(&j);
                for i in 0..n {
                    assert!((full[i] - reduced[i]).abs() <= 1e-12 * (1.0 + full.amax()));
                }
            }
        }
    }

    #[test]
    fn a0_inverse_stays_bounded_towards_the_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for ns in 2..=4 {
            let spec = random_spec(&mut rng, ns);
            let worst = |rng: &mut ChaCha8Rng, margin: f64| {
                (0..1000)
                    .map(|_| {
                        let r = sample_simplex(rng, ns, margin);
                        let inv = matrix_a0(&r, &spec).unwrap().try_inverse().unwrap();
                        assert!(inv.iter().all(|v| v.is_finite()));
                        inv.amax()
                    })
                    .fold(0.0, f64::max)
            };
            let interior = worst(&mut rng, 1e-3);
            let near_boundary = worst(&mut rng, 1e-9);
            assert!(near_boundary <= 2.0 * interior, "{interior} {near_boundary}");
        }
    }

    #[test]
    fn g_examples() {
        let g = matrix_g(&rd(&[0.5]), &equal_binary(1.0)).unwrap();
        assert!((g[(0, 0)] - 4.0).abs() < 1e-15);
        // c = 1, 1/ρ₃ = 3, 1/ρᵢ = 3
        let s3 = MixtureSpec::from_upper_triangle(vec![1.0; 3], &[1.0; 3]).unwrap();
        let g = matrix_g(&rd(&[1.0 / 3.0, 1.0 / 3.0]), &s3).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[6.0, 3.0, 3.0, 6.0]);
        assert!((g - expected).amax() < 1e-13);
    }

    #[test]
    fn h_examples() {
        let h = matrix_h(&rd(&[0.25]), &equal_binary(1.0)).unwrap();
        assert!((h[(0, 0)] - 16.0 / 3.0).abs() < 1e-14);
    }

    /// Central-difference Jacobian of `entropy_vars`, step 1e-6.
    fn fd_jacobian(r: &ReducedDensity, spec: &MixtureSpec) -> DMatrix<f64> {
        let n = spec.n_reduced();
        let step = 1e-6;
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut plus = r.as_slice().to_vec();
            let mut minus = plus.clone();
            plus[j] += step;
            minus[j] -= step;
            let wp = entropy_vars(&rd(&plus), spec).unwrap();
            let wm = entropy_vars(&rd(&minus), spec).unwrap();
            for i in 0..n {
                jac[(i, j)] = (wp.as_slice()[i] - wm.as_slice()[i]) / (2.0 * step);
            }
        }
        jac
    }

    #[test]
    fn h_matches_finite_difference_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for ns in 2..=4 {
            let spec = random_spec(&mut rng, ns);
            for _ in 0..20 {
                let r = sample_simplex(&mut rng, ns, 1e-2);
                let h = matrix_h(&r, &spec).unwrap();
                let fd = fd_jacobian(&r, &spec);
                let rel = (&h - &fd).amax() / h.amax();
                assert!(rel < 1e-6, "relative error {rel}");
            }
        }
    }

    #[test]
    fn chain_rule_w_equals_g_times_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        use rand::Rng;
        let step = 1e-6;
        for ns in 2..=4 {
            let spec = random_spec(&mut rng, ns);
            let n = ns - 1;
            for _ in 0..20 {
                let r = sample_simplex(&mut rng, ns, 1e-2);
                let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let shifted = |sign: f64| {
                    rd(&r
                        .as_slice()
                        .iter()
                        .zip(&dir)
                        .map(|(a, d)| a + sign * step * d)
                        .collect::<Vec<_>>())
                };
                let (p, m) = (shifted(1.0), shifted(-1.0));
                let dw: Vec<f64> = (0..n)
                    .map(|i| {
                        (entropy_vars(&p, &spec).unwrap().as_slice()[i]
                            - entropy_vars(&m, &spec).unwrap().as_slice()[i])
                            / (2.0 * step)
                    })
                    .collect();
                let dx: Vec<f64> = (0..n)
                    .map(|i| {
                        (molar_fractions(&p, &spec).unwrap().x[i]
                            - molar_fractions(&m, &spec).unwrap().x[i])
                            / (2.0 * step)
                    })
                    .collect();
                let gdx = matrix_g(&r, &spec).unwrap() * dvec(&dx);
                let scale = dw.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                for i in 0..n {
                    assert!((gdx[i] - dw[i]).abs() <= 1e-6 * scale);
                }
            }
        }
    }

    fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
        m.clone().symmetric_eigen().eigenvalues.min()
    }

    #[test]
    fn g_h_b_are_symmetric_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for ns in 2..=4 {
            let spec = random_spec(&mut rng, ns);
            for _ in 0..300 {
                let r = sample_simplex(&mut rng, ns, 1e-3);
                for m in [
                    matrix_g(&r, &spec).unwrap(),
                    matrix_h(&r, &spec).unwrap(),
                    matrix_b(&r, &spec).unwrap(),
                ] {
                    assert!((&m - m.transpose()).amax() <= 1e-14 * m.amax());
                    assert!(min_eigenvalue(&m) > 0.0);
                }
            }
        }
    }

    #[test]
    fn b_examples() {
        let b = matrix_b(&rd(&[0.5]), &equal_binary(1.0)).unwrap();
        assert!((b[(0, 0)] - 0.25).abs() < 1e-15);
        let b = matrix_b(&rd(&[0.25]), &equal_binary(2.0)).unwrap();
        assert!((b[(0, 0)] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn b_entries_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for ns in 2..=4 {
            let spec = random_spec(&mut rng, ns);
            let dmax = spec.upper_triangle().into_iter().fold(0.0, f64::max);
            let mmax = spec.molar_masses().iter().cloned().fold(0.0, f64::max);
            for _ in 0..1000 {
                let r = sample_simplex(&mut rng, ns, 1e-6);
                let b = matrix_b(&r, &spec).unwrap();
                assert!(b.amax() <= dmax * mmax, "{} > {}", b.amax(), dmax * mmax);
            }
        }
    }

    #[test]
    fn lift_examples() {
        let r = lift_initial(&[0.0, 1.0], 0.1).unwrap();
        assert!((r.as_slice()[0] - 1.0 / 7.0).abs() < 1e-15);
        assert!((r.last() - 6.0 / 7.0).abs() < 1e-15);

        let rho0 = [0.0, 0.3, 0.7];
        let r = lift_initial(&rho0, 1e-12).unwrap();
        for (a, b) in r.full().iter().zip(&rho0) {
            assert!((a - b).abs() < 1e-11);
        }
        assert!(lift_initial(&rho0, 0.0).is_err());
        assert!(lift_initial(&rho0, 1.0 / 6.0).is_err());
        assert!(lift_initial(&[0.5, 0.6], 0.01).is_err());
        assert!(lift_initial(&[-0.1, 1.1], 0.01).is_err());
    }

    #[test]
    fn lift_output_on_simplex_and_above_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for ns in 2..=5 {
            for _ in 0..200 {
                let r0 = sample_simplex(&mut rng, ns, 0.0).full();
                let alpha = 0.4 / (2.0 * ns as f64);
                let r = lift_initial(&r0, alpha).unwrap();
                let full = r.full();
                assert!((full.iter().sum::<f64>() - 1.0).abs() < 1e-15);
                assert!(full.iter().all(|v| *v >= alpha));
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn roundtrip_rho_w_rho(seed in any::<u64>(), ns in 2usize..=4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let spec = random_spec(&mut rng, ns);
                let r = sample_simplex(&mut rng, ns, 1e-3);
                let w = entropy_vars(&r, &spec).unwrap();
                let back = densities_from_entropy(&w, &spec).unwrap();
                for (a, b) in back.as_slice().iter().zip(r.as_slice()) {
                    prop_assert!((a - b).abs() <= 1e-10);
                }
            }

            #[test]
            fn inversion_lands_in_the_simplex(w in proptest::collection::vec(-10.0f64..10.0, 1..4), seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let spec = random_spec(&mut rng, w.len() + 1);
                match densities_from_entropy(&EntropyVector::new(w).unwrap(), &spec) {
                    Ok(r) => {
                        let full = r.full();
                        prop_assert!(full.iter().all(|v| *v > 0.0));
                        prop_assert!((full.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
                    }
                    // only exp underflow may fail, never an out-of-simplex value
                    Err(e) => {
                        let underflow = matches!(e, Error::InversionFailed { .. });
                        prop_assert!(underflow);
                    }
                }
            }

            #[test]
            fn roundtrip_w_rho_w(seed in any::<u64>(), ns in 2usize..=4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let spec = random_spec(&mut rng, ns);
                let w = entropy_vars(&sample_simplex(&mut rng, ns, 1e-3), &spec).unwrap();
                let r = densities_from_entropy(&w, &spec).unwrap();
                let back = entropy_vars(&r, &spec).unwrap();
                for (a, b) in back.as_slice().iter().zip(w.as_slice()) {
                    prop_assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
                }
            }

            #[test]
            fn entropy_is_nonpositive(seed in any::<u64>(), ns in 2usize..=4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let spec = random_spec(&mut rng, ns);
                let r = sample_simplex(&mut rng, ns, 1e-6);
                prop_assert!(entropy_density(&r, &spec).unwrap() <= 0.0);
            }
        }
    }
}
