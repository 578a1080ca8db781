//! Forecast losses: data fit, envelope, kinematic, graph reaction-diffusion
//! residual and lag coherence, plus their weighted total.
//!
//! Every function takes the forecast as an `H x D` tape variable (row `h` is
//! step `h + 1`, column `i` is channel `i`) and returns a scalar variable.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::PhysicsBudgets;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_range: f64,
    pub lambda_vel: f64,
    pub lambda_acc: f64,
    pub lambda_pde: f64,
    pub lambda_cohere: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl LossWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            lambda_range: w,
            lambda_vel: w,
            lambda_acc: w,
            lambda_pde: w,
            lambda_cohere: w,
        }
    }

    fn as_array(&self) -> [f64; 5] {
        [
            self.lambda_range,
            self.lambda_vel,
            self.lambda_acc,
            self.lambda_pde,
            self.lambda_cohere,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub range: f64,
    pub vel: f64,
    pub acc: f64,
    pub pde: f64,
    pub cohere: f64,
    pub total: f64,
}

/// Component variables of one window's objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub data: Var,
    pub range: Var,
    pub vel: Var,
    pub acc: Var,
    pub pde: Var,
    pub cohere: Var,
    /// Set when the coherence edge set was empty and the term defaulted to 0.
    pub cohere_empty: bool,
}

/// Per-window inputs besides the forecast.
#[derive(Debug, Clone, Copy)]
pub struct WindowContext<'a> {
    pub target: &'a Matrix,
    pub budgets: &'a PhysicsBudgets,
    pub x_last: &'a [f64],
    pub a_bar: &'a Matrix,
    pub adjacency: &'a Matrix,
}

fn forecast_dims(tape: &Tape, y_hat: Var) -> Result<(usize, usize)> {
    match *tape.shape(y_hat) {
        [h, d] => Ok((h, d)),
        ref s => Err(Error::Shape {
            op: "forecast",
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

fn check_channels(op: &'static str, d: usize, v: &[f64]) -> Result<()> {
    if v.len() == d {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            lhs: vec![d],
            rhs: vec![v.len()],
        })
    }
}

/// `Σ [x]₊² / n`.
fn hinge_mean(tape: &mut Tape, excess: Var, n: usize) -> Var {
    let r = tape.relu(excess);
    let sq = tape.square(r);
    let s = tape.sum(sq);
    tape.scale(s, 1.0 / n as f64)
}

fn row_diff(tape: &mut Tape, y: Var, rows: usize) -> Result<Var> {
    let later = tape.slice(y, 0, 1, rows - 1)?;
    let earlier = tape.slice(y, 0, 0, rows - 1)?;
    tape.sub(later, earlier)
}

pub fn data_loss(tape: &mut Tape, y_hat: Var, y: &Matrix) -> Result<Var> {
    let (h, d) = forecast_dims(tape, y_hat)?;
    if y.shape() != (h, d) {
        return Err(Error::Shape {
            op: "data_loss",
            lhs: vec![h, d],
            rhs: vec![y.rows(), y.cols()],
        });
    }
    let target = tape.constant(Tensor::from_matrix(y));
    let diff = tape.sub(y_hat, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

pub fn range_loss(tape: &mut Tape, y_hat: Var, lower: &[f64], upper: &[f64]) -> Result<Var> {
    let (h, d) = forecast_dims(tape, y_hat)?;
    check_channels("range_loss", d, lower)?;
    check_channels("range_loss", d, upper)?;
    let lo = tape.constant(Tensor::vector(lower.to_vec()));
    let hi = tape.constant(Tensor::vector(upper.to_vec()));
    let below = tape.sub(y_hat, lo)?;
    let below = tape.scale(below, -1.0);
    let above = tape.sub(y_hat, hi)?;
    let a = hinge_mean(tape, below, d * h);
    let b = hinge_mean(tape, above, d * h);
    tape.add(a, b)
}

pub fn velocity_loss(tape: &mut Tape, y_hat: Var, v_max: &[f64]) -> Result<Var> {
    let (h, d) = forecast_dims(tape, y_hat)?;
    check_channels("velocity_loss", d, v_max)?;
    if h < 2 {
        return Err(Error::invalid(format!(
            "velocity loss needs a horizon of at least 2, got {h}"
        )));
    }
    let dv = row_diff(tape, y_hat, h)?;
    let mag = tape.abs(dv);
    let cap = tape.constant(Tensor::vector(v_max.to_vec()));
    let excess = tape.sub(mag, cap)?;
    Ok(hinge_mean(tape, excess, d * (h - 1)))
}

pub fn acceleration_loss(tape: &mut Tape, y_hat: Var, a_max: &[f64]) -> Result<Var> {
    let (h, d) = forecast_dims(tape, y_hat)?;
    check_channels("acceleration_loss", d, a_max)?;
    if h < 3 {
        return Err(Error::invalid(format!(
            "acceleration loss needs a horizon of at least 3, got {h}"
        )));
    }
    let dv = row_diff(tape, y_hat, h)?;
    let da = row_diff(tape, dv, h - 1)?;
    let mag = tape.abs(da);
    let cap = tape.constant(Tensor::vector(a_max.to_vec()));
    let excess = tape.sub(mag, cap)?;
    Ok(hinge_mean(tape, excess, d * (h - 2)))
}

/// Residual of `y(s) = y(s-1) + κ(Ā - I) y(s-1) - γ y(s-1)` with
/// `y(0) = x_last`, averaged over `D H`. Rows are multiplied by `Ā - I` on the
/// right, which equals the column form because `Ā` is symmetric.
pub fn pde_loss(tape: &mut Tape, y_hat: Var, x_last: &[f64], a_bar: &Matrix, kappa: Var, gamma: Var) -> Result<Var> {
    let (h, d) = forecast_dims(tape, y_hat)?;
    check_channels("pde_loss", d, x_last)?;
    if a_bar.shape() != (d, d) {
        return Err(Error::Shape {
            op: "pde_loss",
            lhs: vec![d, d],
            rhs: vec![a_bar.rows(), a_bar.cols()],
        });
    }
    let x0 = tape.constant(Tensor::new(vec![1, d], x_last.to_vec())?);
    let prev = if h > 1 {
        let head = tape.slice(y_hat, 0, 0, h - 1)?;
        tape.concat(&[x0, head], 0)?
    } else {
        x0
    };
    let step = tape.sub(y_hat, prev)?;
    let lap = a_bar.sub(&Matrix::identity(d))?;
    let lap = tape.constant(Tensor::from_matrix(&lap));
    let diffusion = tape.matmul(prev, lap)?;
    let diffusion = tape.mul(diffusion, kappa)?;
    let reaction = tape.mul(prev, gamma)?;
    let r = tape.sub(step, diffusion)?;
    let r = tape.add(r, reaction)?;
    let sq = tape.square(r);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / (d * h) as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct Coherence {
    pub loss: Var,
    pub edges_used: usize,
    pub edges_skipped: usize,
    pub empty: bool,
}

/// Lag-aligned squared gap averaged over ordered edges `A[i][j] > 0`.
///
/// With `τ = lags[i][j] >= 0` channel `j` trails `i`, so `ŷ_j[τ..H]` is
/// compared with `ŷ_i[0..H-τ]`; negative `τ` swaps the roles. Each edge's
/// squared gap is divided by `H - |τ|`. Edges with `|τ| >= H` are dropped.
pub fn lag_coherence_loss(tape: &mut Tape, y_hat: Var, adjacency: &Matrix, lags: &[Vec<i64>]) -> Result<Coherence> {
    let (h, d) = forecast_dims(tape, y_hat)?;
    if adjacency.shape() != (d, d) || lags.len() != d || lags.iter().any(|r| r.len() != d) {
        return Err(Error::Shape {
            op: "lag_coherence_loss",
            lhs: vec![d, d],
            rhs: vec![adjacency.rows(), adjacency.cols(), lags.len()],
        });
    }
    let (mut trail_idx, mut lead_idx, mut per_edge) = (Vec::new(), Vec::new(), Vec::new());
    let mut skipped = 0;
    for i in 0..d {
        for j in 0..d {
            if i == j || adjacency[(i, j)] <= 0.0 {
                continue;
            }
            let tau = lags[i][j];
            let s = tau.unsigned_abs() as usize;
            if s >= h {
                skipped += 1;
                continue;
            }
            let (lead, trail) = if tau >= 0 { (i, j) } else { (j, i) };
            for k in 0..h - s {
                trail_idx.push((k + s) * d + trail);
                lead_idx.push(k * d + lead);
            }
            per_edge.push((h - s, 1.0 / (h - s) as f64));
        }
    }
    let edges_used = per_edge.len();
    if edges_used == 0 {
        let loss = tape.constant(Tensor::scalar(0.0));
        return Ok(Coherence {
            loss,
            edges_used,
            edges_skipped: skipped,
            empty: true,
        });
    }
    let weights: Vec<f64> = per_edge
        .iter()
        .flat_map(|&(n, w)| std::iter::repeat_n(w / edges_used as f64, n))
        .collect();
    let a = tape.gather(y_hat, trail_idx)?;
    let b = tape.gather(y_hat, lead_idx)?;
    let gap = tape.sub(a, b)?;
    let sq = tape.square(gap);
    let w = tape.constant(Tensor::vector(weights));
    let weighted = tape.mul(sq, w)?;
    Ok(Coherence {
        loss: tape.sum(weighted),
        edges_used,
        edges_skipped: skipped,
        empty: false,
    })
}

pub fn loss_terms(tape: &mut Tape, y_hat: Var, ctx: &WindowContext<'_>, kappa: Var, gamma: Var) -> Result<LossTerms> {
    let b = ctx.budgets;
    let data = data_loss(tape, y_hat, ctx.target)?;
    let range = range_loss(tape, y_hat, &b.m, &b.upper)?;
    let vel = velocity_loss(tape, y_hat, &b.v_max)?;
    let acc = acceleration_loss(tape, y_hat, &b.a_max)?;
    let pde = pde_loss(tape, y_hat, ctx.x_last, ctx.a_bar, kappa, gamma)?;
    let coh = lag_coherence_loss(tape, y_hat, ctx.adjacency, &b.lags)?;
    Ok(LossTerms {
        data,
        range,
        vel,
        acc,
        pde,
        cohere: coh.loss,
        cohere_empty: coh.empty,
    })
}

/// `data + λ_range range + λ_vel vel + λ_acc acc + λ_pde pde + λ_cohere cohere`,
/// accumulated left to right.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let weighted = [
        (terms.range, weights.lambda_range),
        (terms.vel, weights.lambda_vel),
        (terms.acc, weights.lambda_acc),
        (terms.pde, weights.lambda_pde),
        (terms.cohere, weights.lambda_cohere),
    ];
    let mut total = terms.data;
    for (v, w) in weighted {
        let s = tape.scale(v, w);
        total = tape.add(total, s)?;
    }
    let val = |v: Var| tape.value(v).item();
    let breakdown = LossBreakdown {
        data: val(terms.data),
        range: val(terms.range),
        vel: val(terms.vel),
        acc: val(terms.acc),
        pde: val(terms.pde),
        cohere: val(terms.cohere),
        total: val(total),
    };
    Ok((total, breakdown))
}
