//! Numerical certificates for the horizon dynamics and the graph encoder.
//!
//! The linearized horizon map `M = (1 - γ - κ) I + κ Ā` shares eigenvectors
//! with `Ā`, so its spectrum is the affine image `(1 - γ - κ) + κ λ_i`. For
//! `κ + γ < 1` and `λ_i ∈ [-1, 1]` every image lies in `(-(1-γ), 1-γ]`, which
//! is what the contraction certificate checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PSD_TOL;
use crate::linalg::{self, symmetric_eigen};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonMap {
    pub m: Matrix,
    pub kappa: f64,
    pub gamma: f64,
    pub source: Matrix,
}

pub fn build_horizon_map(a_bar: &Matrix, kappa: f64, gamma: f64) -> Result<HorizonMap> {
    if !a_bar.is_square() || !a_bar.is_symmetric_within(1e-12) {
        return Err(Error::invalid("horizon map needs a symmetric graph operator"));
    }
    if !(kappa > 0.0 && gamma > 0.0) {
        return Err(Error::invalid(format!(
            "kappa and gamma must be positive (kappa = {kappa}, gamma = {gamma})"
        )));
    }
    let d = a_bar.rows();
    let m = Matrix::from_fn(d, d, |i, j| {
        kappa * a_bar[(i, j)] + if i == j { 1.0 - gamma - kappa } else { 0.0 }
    });
    Ok(HorizonMap {
        m,
        kappa,
        gamma,
        source: a_bar.clone(),
    })
}

impl HorizonMap {
    /// `0 < κ < 1`, `0 < γ < 1`, `κ + γ < 1`.
    pub fn hypotheses_hold(&self) -> bool {
        stability_region(self.kappa, self.gamma)
    }

    /// `M^s y0` for `s = 0..=steps`.
    pub fn rollout(&self, y0: &[f64], steps: usize) -> Vec<Vec<f64>> {
        let mut out = vec![y0.to_vec()];
        for _ in 0..steps {
            let next = self.m.matvec(out.last().unwrap());
            out.push(next);
        }
        out
    }
}

pub fn stability_region(kappa: f64, gamma: f64) -> bool {
    kappa > 0.0 && kappa < 1.0 && gamma > 0.0 && gamma < 1.0 && kappa + gamma < 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub kappa: f64,
    pub gamma: f64,
    pub rho_m: f64,
    pub bound_1_minus_gamma: f64,
    /// `1 - γ - κ(1 - λ_max)`: the largest eigenvalue of `M`.
    pub sharpened_bound: f64,
    pub contractive: bool,
    pub hypotheses_hold: bool,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Magnitude of the most negative eigenvalue of `Ā` beyond tolerance.
    pub psd_violation: f64,
}

/// Certify by computing `ρ(M)` directly with a symmetric eigensolve, so the
/// answer does not depend on `Ā` being PSD.
pub fn certify_contraction(map: &HorizonMap) -> Result<StabilityReport> {
    let a_eig = symmetric_eigen(&map.source)?;
    let m_eig = symmetric_eigen(&map.m)?;
    let lambda_min = a_eig.values.first().copied().unwrap_or(0.0);
    let lambda_max = a_eig.values.last().copied().unwrap_or(0.0);
    let rho_m = m_eig.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let (k, g) = (map.kappa, map.gamma);
    Ok(StabilityReport {
        kappa: k,
        gamma: g,
        rho_m,
        bound_1_minus_gamma: 1.0 - g,
        sharpened_bound: 1.0 - g - k * (1.0 - lambda_max),
        contractive: rho_m < 1.0,
        hypotheses_hold: map.hypotheses_hold(),
        lambda_min,
        lambda_max,
        psd_violation: if lambda_min < -PSD_TOL { -lambda_min } else { 0.0 },
    })
}

impl StabilityReport {
    pub fn to_table(&self) -> String {
        let yes_no = |b: bool| if b { "yes" } else { "no" };
        let rows = [
            ("kappa", format!("{:.6}", self.kappa)),
            ("gamma", format!("{:.6}", self.gamma)),
            (
                "kappa + gamma < 1, both in (0,1)",
                yes_no(self.hypotheses_hold).to_string(),
            ),
            (
                "eigenvalues of A_bar",
                format!("[{:.6}, {:.6}]", self.lambda_min, self.lambda_max),
            ),
            ("PSD violation of A_bar", format!("{:.3e}", self.psd_violation)),
            ("rho(M)", format!("{:.9}", self.rho_m)),
            ("bound 1 - gamma", format!("{:.9}", self.bound_1_minus_gamma)),
            ("sharpened bound", format!("{:.9}", self.sharpened_bound)),
            ("contractive", yes_no(self.contractive).to_string()),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformContraction {
    pub steps: usize,
    pub bound: f64,
    pub product_norm: f64,
    pub holds: bool,
}

/// Check `‖M_{s-1} ··· M_0‖₂ <= (1 - gamma_floor)^s` for the given sequence.
/// Every map must satisfy `γ_t >= gamma_floor` and `κ_t + γ_t < 1`.
pub fn uniform_contraction(maps: &[HorizonMap], gamma_floor: f64) -> Result<UniformContraction> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("uniform contraction of an empty sequence"))?;
    if !(gamma_floor > 0.0 && gamma_floor < 1.0) {
        return Err(Error::invalid(format!("gamma floor {gamma_floor} outside (0, 1)")));
    }
    for (t, map) in maps.iter().enumerate() {
        if map.gamma < gamma_floor || map.kappa <= 0.0 || map.kappa + map.gamma >= 1.0 {
            return Err(Error::invalid(format!(
                "map {t} violates the hypotheses (kappa = {}, gamma = {}, gamma floor = {gamma_floor})",
                map.kappa, map.gamma
            )));
        }
        if map.m.shape() != first.m.shape() {
            return Err(Error::Shape {
                op: "uniform_contraction",
                lhs: vec![first.m.rows(), first.m.cols()],
                rhs: vec![map.m.rows(), map.m.cols()],
            });
        }
    }
    let mut product = Matrix::identity(first.m.rows());
    for map in maps {
        product = map.m.matmul(&product)?;
    }
    let steps = maps.len();
    let bound = (1.0 - gamma_floor).powi(steps as i32);
    let product_norm = linalg::operator_norm(&product)?;
    Ok(UniformContraction {
        steps,
        bound,
        product_norm,
        holds: product_norm <= bound + 1e-9,
    })
}

/// Spectral bound under a symmetric perturbation of norm at most `eps`.
pub fn perturbation_margin(kappa: f64, gamma: f64, eps: f64) -> (f64, bool) {
    ((1.0 - gamma) + kappa * eps, kappa * eps < gamma)
}

/// `‖W_self‖₂ + ‖U_nei‖₂`.
pub fn block_lipschitz_bound(w_self: &Matrix, u_nei: &Matrix) -> Result<f64> {
    if w_self.shape() != u_nei.shape() {
        return Err(Error::Shape {
            op: "block_lipschitz_bound",
            lhs: vec![w_self.rows(), w_self.cols()],
            rhs: vec![u_nei.rows(), u_nei.cols()],
        });
    }
    Ok(linalg::operator_norm(w_self)? + linalg::operator_norm(u_nei)?)
}

/// Product of per-layer block bounds.
pub fn stack_lipschitz_bound(layers: &[(Matrix, Matrix)]) -> Result<f64> {
    layers
        .iter()
        .try_fold(1.0, |acc, (w, u)| Ok(acc * block_lipschitz_bound(w, u)?))
}

/// `Z W_self + Ā Z U_nei`.
pub fn block_affine(z: &Matrix, a_bar: &Matrix, w_self: &Matrix, u_nei: &Matrix) -> Result<Matrix> {
    let s = z.matmul(w_self)?;
    let n = a_bar.matmul(z)?.matmul(u_nei)?;
    s.add(&n)
}

/// `ReLU(Z W_self + Ā Z U_nei)`.
pub fn block_relu(z: &Matrix, a_bar: &Matrix, w_self: &Matrix, u_nei: &Matrix) -> Result<Matrix> {
    Ok(block_affine(z, a_bar, w_self, u_nei)?.map(|v| v.max(0.0)))
}

pub fn stack_relu(z: &Matrix, a_bar: &Matrix, layers: &[(Matrix, Matrix)]) -> Result<Matrix> {
    layers
        .iter()
        .try_fold(z.clone(), |h, (w, u)| block_relu(&h, a_bar, w, u))
}

/// Largest sampled ratio `‖f(Z₁) - f(Z₂)‖ / ‖Z₁ - Z₂‖` over `n_samples`
/// Gaussian input pairs of shape `rows x cols`, with `‖·‖` the vectorized
/// (Frobenius) 2-norm. Pairs with zero input difference are skipped.
pub fn empirical_lipschitz<F, R>(f: F, rows: usize, cols: usize, n_samples: usize, rng: &mut R) -> Result<f64>
where
    F: Fn(&Matrix) -> Result<Matrix>,
    R: Rng,
{
    let sample = |rng: &mut R| Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let mut worst: f64 = 0.0;
    for _ in 0..n_samples {
        let z1 = sample(rng);
        let z2 = sample(rng);
        let dz = z1.sub(&z2)?.frobenius_norm();
        if dz == 0.0 {
            continue;
        }
        let dy = f(&z1)?.sub(&f(&z2)?)?.frobenius_norm();
        worst = worst.max(dy / dz);
    }
    Ok(worst)
}

/// `g(λ) = |1 - γ - κ + κλ|`, the per-mode decay factor of `M`.
pub fn mode_damping(kappa: f64, gamma: f64, lambdas: &[f64]) -> Vec<f64> {
    lambdas
        .iter()
        .map(|l| (1.0 - gamma - kappa + kappa * l).abs())
        .collect()
}
