//! Symmetric eigensolvers and norm estimates.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 10_000;

/// Eigen-decomposition of a symmetric matrix. Eigenvalues ascend; eigenvector
/// `k` is column `k` of `vectors`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Cyclic Jacobi rotations. Accurate to roughly machine precision relative to
/// the Frobenius norm of the input.
pub fn symmetric_eigen(s: &Matrix) -> Result<SymmetricEigen> {
    if !s.is_square() {
        return Err(Error::Shape {
            op: "symmetric_eigen",
            lhs: vec![s.rows(), s.cols()],
            rhs: vec![s.cols(), s.rows()],
        });
    }
    let scale = s.frobenius_norm().max(f64::MIN_POSITIVE);
    if !s.is_symmetric_within(1e-12 * scale) {
        return Err(Error::invalid("symmetric_eigen: input is not symmetric"));
    }
    let n = s.rows();
    let mut a = s.clone();
    let mut v = Matrix::identity(n);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymmetricEigen { values, vectors })
}

/// Result of a power iteration. `residual` bounds the distance from `value`
/// to the nearest eigenvalue of the iterated (symmetric) operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerEstimate {
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn start_vector(n: usize) -> Vec<f64> {
    // Deterministic and not orthogonal to any coordinate direction.
    let v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64).collect();
    normalized(v)
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm2(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dominant eigenvalue of a symmetric PSD operator given as a closure.
fn power_psd(n: usize, apply: impl Fn(&[f64]) -> Vec<f64>, tol: f64, max_iter: usize) -> PowerEstimate {
    let mut v = start_vector(n);
    let mut est = PowerEstimate {
        value: 0.0,
        residual: f64::INFINITY,
        iterations: 0,
        converged: false,
    };
    for it in 1..=max_iter {
        let w = apply(&v);
        let theta = dot(&v, &w);
        let resid = norm2(&w.iter().zip(&v).map(|(wi, vi)| wi - theta * vi).collect::<Vec<_>>());
        est = PowerEstimate {
            value: theta,
            residual: resid,
            iterations: it,
            converged: false,
        };
        let wn = norm2(&w);
        if resid <= tol * theta.abs().max(1.0) || wn == 0.0 {
            est.converged = true;
            break;
        }
        v = w.into_iter().map(|x| x / wn).collect();
    }
    est
}

fn gershgorin_bound(s: &Matrix) -> f64 {
    (0..s.rows())
        .map(|i| s.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest and smallest eigenvalue of a symmetric matrix by power iteration
/// on the shifted operators `cI + S` and `cI - S`, where `c` is a Gershgorin
/// bound. Both shifted operators are PSD, so no deflation is needed and a
/// `±ρ` pair cannot stall the iteration.
pub fn extreme_eigenvalues(s: &Matrix) -> Result<(PowerEstimate, PowerEstimate)> {
    if !s.is_symmetric_within(1e-12 * s.frobenius_norm().max(1.0)) {
        return Err(Error::invalid("spectral radius requires a symmetric matrix"));
    }
    let n = s.rows();
    let c = gershgorin_bound(s).max(f64::MIN_POSITIVE);
    let upper = power_psd(
        n,
        |v| {
            let sv = s.matvec(v);
            sv.iter().zip(v).map(|(a, b)| a + c * b).collect()
        },
        POWER_TOL,
        POWER_MAX_ITER,
    );
    let lower = power_psd(
        n,
        |v| {
            let sv = s.matvec(v);
            sv.iter().zip(v).map(|(a, b)| c * b - a).collect()
        },
        POWER_TOL,
        POWER_MAX_ITER,
    );
    let lam_max = PowerEstimate {
        value: upper.value - c,
        ..upper
    };
    let lam_min = PowerEstimate {
        value: c - lower.value,
        ..lower
    };
    Ok((lam_max, lam_min))
}

/// Spectral radius of a symmetric matrix with its convergence diagnostics.
pub fn spectral_radius_estimate(s: &Matrix) -> Result<PowerEstimate> {
    if s.rows() == 0 {
        return Ok(PowerEstimate {
            value: 0.0,
            residual: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let (hi, lo) = extreme_eigenvalues(s)?;
    let pick = if hi.value.abs() >= lo.value.abs() { hi } else { lo };
    Ok(PowerEstimate {
        value: pick.value.abs(),
        residual: hi.residual.max(lo.residual),
        iterations: hi.iterations + lo.iterations,
        converged: hi.converged && lo.converged,
    })
}

pub fn spectral_radius(s: &Matrix) -> Result<f64> {
    Ok(spectral_radius_estimate(s)?.value)
}

/// Operator 2-norm `‖G‖₂` via power iteration on `GᵀG`, falling back to Jacobi on
/// `GᵀG` when the top singular values are too close for power iteration.
pub fn operator_norm(g: &Matrix) -> Result<f64> {
    if g.rows() == 0 || g.cols() == 0 || g.as_slice().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let gt = g.transpose();
    let est = power_psd(g.cols(), |v| gt.matvec(&g.matvec(v)), POWER_TOL, POWER_MAX_ITER);
    if est.converged {
        return Ok(est.value.max(0.0).sqrt());
    }
    let gram = gt.matmul(g)?;
    let gram = gram.add(&gram.transpose())?.scale(0.5);
    let top = symmetric_eigen(&gram)?.values.last().copied().unwrap_or(0.0);
    Ok(top.max(0.0).sqrt())
}
