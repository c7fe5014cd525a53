//! Matrix-free Krylov solvers.
//!
//! Operators and preconditioners are closures `(x, out)` writing `out = A x`.
//! Residuals are relative to `‖b‖` in the Euclidean norm.

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KrylovStats {
    pub iterations: usize,
    /// Final relative residual `‖b − Ax‖ / ‖b‖`.
    pub residual: f64,
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn residual_into(apply: &mut impl FnMut(&[f64], &mut [f64]), b: &[f64], x: &[f64], r: &mut [f64]) {
    apply(x, r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
}

/// Preconditioned conjugate gradients for SPD `A` and SPD `M⁻¹`.
pub fn cg(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    mut precond: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    rtol: f64,
    max_iter: usize,
) -> Result<KrylovStats> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(KrylovStats::default());
    }
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut stats = KrylovStats::default();
    // the recurrence drifts from the true residual, so restart from it
    // until the true residual meets the tolerance
    loop {
        residual_into(&mut apply, b, x, &mut r);
        stats.residual = norm(&r) / bnorm;
        stats.trace.push(stats.residual);
        if stats.residual <= rtol {
            return Ok(stats);
        }
        if stats.iterations >= max_iter {
            return Err(Error::NonConvergence {
                solver: "cg",
                iterations: stats.iterations,
                residual: stats.residual,
                trace: stats.trace,
            });
        }
        precond(&r, &mut z);
        p.copy_from_slice(&z);
        let mut rz = dot(&r, &z);
        let mut res = stats.residual;
        while res > rtol && stats.iterations < max_iter {
            apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap == 0.0 {
                // search direction in the null space of a singular system
                break;
            }
            if !(pap > 0.0) {
                return Err(Error::Singular(format!("cg met a negative curvature {pap:e}")));
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            precond(&r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
            stats.iterations += 1;
            res = norm(&r) / bnorm;
            stats.trace.push(res);
        }
        if res > rtol && stats.iterations < max_iter {
            // null-space breakdown: the true residual decides
            residual_into(&mut apply, b, x, &mut r);
            stats.residual = norm(&r) / bnorm;
            if stats.residual <= rtol {
                return Ok(stats);
            }
            return Err(Error::NonConvergence {
                solver: "cg",
                iterations: stats.iterations,
                residual: stats.residual,
                trace: stats.trace,
            });
        }
    }
}

/// Restarted GMRES(m) with right preconditioning.
pub fn gmres(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    mut precond: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    rtol: f64,
    restart: usize,
    max_iter: usize,
) -> Result<KrylovStats> {
    let n = b.len();
    let m = restart.max(1);
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(KrylovStats::default());
    }
    let mut stats = KrylovStats::default();
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let mut hess = vec![vec![0.0; m]; m + 1];
    let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
    let mut g = vec![0.0; m + 1];

    loop {
        residual_into(&mut apply, b, x, &mut r);
        let beta = norm(&r);
        stats.residual = beta / bnorm;
        stats.trace.push(stats.residual);
        if stats.residual <= rtol {
            return Ok(stats);
        }
        if stats.iterations >= max_iter {
            return Err(Error::NonConvergence {
                solver: "gmres",
                iterations: stats.iterations,
                residual: stats.residual,
                trace: stats.trace,
            });
        }
        basis.clear();
        basis.push(r.iter().map(|v| v / beta).collect());
        g.iter_mut().for_each(|v| *v = 0.0);
        g[0] = beta;
        let mut k = 0;
        while k < m && stats.iterations < max_iter {
            precond(&basis[k], &mut z);
            apply(&z, &mut w);
            for j in 0..=k {
                let hj = dot(&w, &basis[j]);
                hess[j][k] = hj;
                for (wi, vi) in w.iter_mut().zip(&basis[j]) {
                    *wi -= hj * vi;
                }
            }
            let hn = norm(&w);
            hess[k + 1][k] = hn;
            for j in 0..k {
                let t = cs[j] * hess[j][k] + sn[j] * hess[j + 1][k];
                hess[j + 1][k] = -sn[j] * hess[j][k] + cs[j] * hess[j + 1][k];
                hess[j][k] = t;
            }
            let rho = hess[k][k].hypot(hess[k + 1][k]);
            if rho == 0.0 {
                return Err(Error::Singular("gmres breakdown on a zero column".into()));
            }
            cs[k] = hess[k][k] / rho;
            sn[k] = hess[k + 1][k] / rho;
            hess[k][k] = rho;
            hess[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            stats.iterations += 1;
            k += 1;
            let est = g[k].abs() / bnorm;
            if est <= rtol || hn == 0.0 {
                break;
            }
            stats.trace.push(est);
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        // back substitution on the triangularized Hessenberg matrix
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|j| hess[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / hess[i][i];
        }
        w.iter_mut().for_each(|v| *v = 0.0);
        for (yi, vi) in y.iter().zip(&basis) {
            for (wj, vj) in w.iter_mut().zip(vi) {
                *wj += yi * vj;
            }
        }
        precond(&w, &mut z);
        for (xi, zi) in x.iter_mut().zip(&z) {
            *xi += zi;
        }
    }
}
