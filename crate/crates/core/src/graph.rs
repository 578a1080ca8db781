//! Time-varying correlation graphs.
//!
//! For a window of observations: Pearson correlations `C`, thresholded and
//! powered weights `A(i,j) = 1(|C| > tau) |C|^gamma_corr` with a zero
//! diagonal, a per-node degree floor/cap, and the self-looped symmetric
//! normalization `Ā = D^{-1/2}(A + I)D^{-1/2}` with `D = diag((A + I)1)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{jitter_if_constant, pearson};
use crate::error::{Error, Result};
use crate::linalg;
use crate::matrix::Matrix;

pub use crate::linalg::spectral_radius;

/// Eigenvalues of `Ā` below this count as a PSD violation.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    /// Correlation threshold.
    pub tau: f64,
    /// Exponent applied to retained `|C|`.
    pub gamma_corr: f64,
    /// Degree floor.
    pub k_min: usize,
    /// Degree cap.
    #[serde(rename = "K")]
    pub cap: usize,
}

impl GraphParams {
    /// `tau = 0.5`, `gamma_corr = 1`, `k_min = 1`, `K = max(4, ceil(D/4))`
    /// clipped to the `D - 1` possible neighbours.
    pub fn default_for(channels: usize) -> Self {
        let max_deg = channels.saturating_sub(1).max(1);
        Self {
            tau: 0.5,
            gamma_corr: 1.0,
            k_min: 1.min(max_deg),
            cap: 4.max(channels.div_ceil(4)).min(max_deg),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::invalid(format!("tau = {} outside [0, 1)", self.tau)));
        }
        if !(self.gamma_corr > 0.0 && self.gamma_corr.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma_corr = {} must be positive",
                self.gamma_corr
            )));
        }
        if channels >= 2 {
            if self.k_min > channels - 1 {
                return Err(Error::invalid(format!(
                    "k_min = {} exceeds the {} available neighbours",
                    self.k_min,
                    channels - 1
                )));
            }
            if self.k_min == 0 || self.k_min > self.cap {
                return Err(Error::invalid(format!(
                    "need 1 <= k_min <= K, got k_min = {}, K = {}",
                    self.k_min, self.cap
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicGraph {
    #[serde(rename = "C")]
    pub corr: Matrix,
    #[serde(rename = "A")]
    pub adjacency: Matrix,
    #[serde(rename = "A_bar")]
    pub normalized: Matrix,
    pub window_end: usize,
    pub params: GraphParams,
}

impl DynamicGraph {
    pub fn channels(&self) -> usize {
        self.adjacency.rows()
    }

    /// Ordered pairs `(i, j)` with `A(i, j) > 0`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        edges(&self.adjacency)
    }

    pub fn diagnostics(&self) -> Result<GraphDiagnostics> {
        diagnostics(&self.adjacency, &self.normalized)
    }
}

pub fn edges(a: &Matrix) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            if i != j && a[(i, j)] > 0.0 {
                out.push((i, j));
            }
        }
    }
    out
}

/// Pearson correlation of every column pair over the window.
pub fn windowed_correlation(window: &Matrix) -> Result<Matrix> {
    if window.rows() < 2 {
        return Err(Error::TooShort(format!(
            "correlation window needs at least 2 rows, got {}",
            window.rows()
        )));
    }
    let d = window.cols();
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|j| jitter_if_constant(&window.column(j), j as u64))
        .collect();
    let mut c = Matrix::identity(d);
    for i in 0..d {
        for j in (i + 1)..d {
            let r = pearson(&cols[i], &cols[j]);
            c[(i, j)] = r;
            c[(j, i)] = r;
        }
    }
    Ok(c)
}

fn edge_weight(c: f64, gamma_corr: f64) -> f64 {
    c.abs().powf(gamma_corr)
}

/// Threshold, power, zero the diagonal, then symmetrize by elementwise max.
pub fn threshold_weight(c: &Matrix, tau: f64, gamma_corr: f64) -> Matrix {
    let d = c.rows();
    let mut a = Matrix::from_fn(d, d, |i, j| {
        let v = c[(i, j)];
        if i != j && v.abs() > tau {
            edge_weight(v, gamma_corr)
        } else {
            0.0
        }
    });
    symmetrize_max(&mut a);
    a
}

pub fn symmetrize_max(a: &mut Matrix) {
    for i in 0..a.rows() {
        for j in (i + 1)..a.cols() {
            let m = a[(i, j)].max(a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Per-row degree floor and cap, evaluated row by row on the input `A`, then
/// max-symmetrized.
///
/// A row with fewer than `k_min` neighbours gains its highest-`|C|` non-self
/// partners (weight `|C|^gamma_corr`). A row with more than `K` keeps its `K`
/// largest weights. Ties go to the smaller column index.
pub fn degree_floor_cap(a: &Matrix, c: &Matrix, params: &GraphParams) -> Result<Matrix> {
    let d = a.rows();
    params.validate(d)?;
    if d < 2 {
        return Ok(a.clone());
    }
    let mut out = a.clone();
    for i in 0..d {
        let neighbours: Vec<usize> = (0..d).filter(|&j| j != i && a[(i, j)] > 0.0).collect();
        if neighbours.len() < params.k_min {
            let mut candidates: Vec<usize> = (0..d).filter(|&j| j != i && a[(i, j)] <= 0.0).collect();
            candidates.sort_by(|&x, &y| c[(i, y)].abs().total_cmp(&c[(i, x)].abs()).then(x.cmp(&y)));
            for &j in candidates.iter().take(params.k_min - neighbours.len()) {
                out[(i, j)] = edge_weight(c[(i, j)], params.gamma_corr);
            }
        } else if neighbours.len() > params.cap {
            let mut ranked = neighbours;
            ranked.sort_by(|&x, &y| a[(i, y)].total_cmp(&a[(i, x)]).then(x.cmp(&y)));
            for &j in &ranked[params.cap..] {
                out[(i, j)] = 0.0;
            }
        }
    }
    symmetrize_max(&mut out);
    Ok(out)
}

/// `D^{-1/2}(A + I)D^{-1/2}`; an isolated node keeps its self loop.
pub fn normalize(a: &Matrix) -> Matrix {
    let d = a.rows();
    let deg: Vec<f64> = (0..d).map(|i| 1.0 + a.row(i).iter().sum::<f64>()).collect();
    Matrix::from_fn(d, d, |i, j| {
        let w = a[(i, j)] + if i == j { 1.0 } else { 0.0 };
        w / (deg[i] * deg[j]).sqrt()
    })
}

/// Full pipeline for one window whose last row has index `window_end`.
pub fn build_graph(window: &Matrix, window_end: usize, params: &GraphParams) -> Result<DynamicGraph> {
    params.validate(window.cols())?;
    let corr = windowed_correlation(window)?;
    let thresholded = threshold_weight(&corr, params.tau, params.gamma_corr);
    let adjacency = degree_floor_cap(&thresholded, &corr, params)?;
    let normalized = normalize(&adjacency);
    Ok(DynamicGraph {
        corr,
        adjacency,
        normalized,
        window_end,
        params: *params,
    })
}

/// Structural health of a built graph. `psd_violation` is the magnitude of
/// the most negative eigenvalue of `Ā` (zero when PSD within tolerance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDiagnostics {
    pub symmetric: bool,
    pub zero_diagonal: bool,
    pub spectral_radius: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub psd_violation: f64,
    pub degrees: Vec<usize>,
}

impl GraphDiagnostics {
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue >= -PSD_TOL
    }
}

pub fn diagnostics(a: &Matrix, a_bar: &Matrix) -> Result<GraphDiagnostics> {
    let eig = linalg::symmetric_eigen(a_bar)?;
    let min = eig.values.first().copied().unwrap_or(0.0);
    let max = eig.values.last().copied().unwrap_or(0.0);
    Ok(GraphDiagnostics {
        symmetric: a.is_symmetric() && a_bar.is_symmetric(),
        zero_diagonal: (0..a.rows()).all(|i| a[(i, i)] == 0.0),
        spectral_radius: linalg::spectral_radius(a_bar)?,
        min_eigenvalue: min,
        max_eigenvalue: max,
        psd_violation: (-min).max(0.0),
        degrees: (0..a.rows())
            .map(|i| a.row(i).iter().filter(|w| **w > 0.0).count())
            .collect(),
    })
}

pub fn export_adjacency(graph: &DynamicGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_vec_pretty(graph)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn import_adjacency(path: impl AsRef<Path>) -> Result<DynamicGraph> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let g: DynamicGraph = serde_json::from_slice(&bytes)?;
    let d = g.adjacency.rows();
    if !g.adjacency.is_square() || g.normalized.shape() != (d, d) || g.corr.shape() != (d, d) {
        return Err(Error::Schema(format!(
            "{}: adjacency matrices are not D x D",
            path.display()
        )));
    }
    Ok(g)
}

/// Plain CSV of the weight matrix for external plotting.
pub fn export_adjacency_csv(graph: &DynamicGraph, path: impl AsRef<Path>) -> Result<()> {
    crate::data::write_csv(path, &graph.adjacency, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(tau: f64, gamma_corr: f64, k_min: usize, cap: usize) -> GraphParams {
        GraphParams {
            tau,
            gamma_corr,
            k_min,
            cap,
        }
    }

    #[test]
    fn affine_and_negated_columns() {
        let w = Matrix::from_fn(20, 3, |i, j| {
            let x = (i as f64 * 0.7).sin();
            match j {
                0 => x,
                1 => 2.0 * x + 1.0,
                _ => -x,
            }
        });
        let c = windowed_correlation(&w).unwrap();
        assert!((c[(0, 1)] - 1.0).abs() < 1e-12);
        assert!((c[(0, 2)] + 1.0).abs() < 1e-12);
        assert_eq!(c[(1, 1)], 1.0);
        assert!(windowed_correlation(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn constant_window_is_finite() {
        let w = Matrix::from_fn(10, 3, |i, j| if j == 1 { 3.0 } else { (i * (j + 1)) as f64 });
        let c = windowed_correlation(&w).unwrap();
        assert!(c.all_finite());
        assert!(c[(0, 1)].abs() < 1.0);
    }

    #[test]
    fn threshold_examples() {
        let c = Matrix::from_rows(&[vec![1.0, 0.6, 0.4], vec![0.6, 1.0, -0.8], vec![0.4, -0.8, 1.0]]).unwrap();
        let a = threshold_weight(&c, 0.5, 1.0);
        assert_eq!(a[(0, 1)], 0.6);
        assert_eq!(a[(0, 2)], 0.0);
        assert_eq!(a[(0, 0)], 0.0);
        let a2 = threshold_weight(&c, 0.5, 2.0);
        assert!((a2[(1, 2)] - 0.64).abs() < 1e-15);
    }

    #[test]
    fn floor_connects_isolated_nodes_to_best_partner() {
        let c = Matrix::from_rows(&[
            vec![1.0, 0.2, -0.3, 0.1],
            vec![0.2, 1.0, 0.05, 0.15],
            vec![-0.3, 0.05, 1.0, 0.25],
            vec![0.1, 0.15, 0.25, 1.0],
        ])
        .unwrap();
        let a = degree_floor_cap(&Matrix::zeros(4, 4), &c, &params(0.5, 1.0, 1, 2)).unwrap();
        assert_eq!(a[(0, 2)], 0.3);
        assert_eq!(a[(1, 0)], 0.2);
        assert_eq!(a[(3, 2)], 0.25);
        assert!(a.is_symmetric());
        assert!((0..4).all(|i| a.row(i).iter().filter(|w| **w > 0.0).count() >= 1));
    }

    #[test]
    fn within_bounds_is_unchanged() {
        let a = Matrix::from_rows(&[vec![0.0, 0.7, 0.0], vec![0.7, 0.0, 0.6], vec![0.0, 0.6, 0.0]]).unwrap();
        let c = Matrix::identity(3);
        assert_eq!(degree_floor_cap(&a, &c, &params(0.5, 1.0, 1, 2)).unwrap(), a);
    }

    #[test]
    fn k_min_beyond_neighbours_is_rejected() {
        let a = Matrix::zeros(3, 3);
        assert!(degree_floor_cap(&a, &Matrix::identity(3), &params(0.5, 1.0, 3, 3)).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&Matrix::zeros(3, 3)), Matrix::identity(3));
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let n = normalize(&a);
        for v in n.as_slice() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        let eig = linalg::symmetric_eigen(&n).unwrap();
        assert!(eig.values[0].abs() < 1e-12 && (eig.values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn path_graph_is_not_psd() {
        // Strongly weighted path: A + I has eigenvalue 1 - sqrt(2) < 0, and
        // the normalization is a congruence, so Ā inherits the sign.
        let a = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let d = diagnostics(&a, &normalize(&a)).unwrap();
        assert!(!d.is_psd());
        assert!(d.spectral_radius <= 1.0 + 1e-12);
    }

    #[test]
    fn default_params_respect_channel_count() {
        let p = GraphParams::default_for(4);
        assert_eq!((p.k_min, p.cap), (1, 3));
        let p = GraphParams::default_for(40);
        assert_eq!(p.cap, 10);
        p.validate(40).unwrap();
    }
}
