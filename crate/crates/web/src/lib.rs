//! Browser bindings. Each exported function synthesizes a series, runs one
//! library operation on it and returns the result as a JSON string.

use prism_core::graph::{build_graph, DynamicGraph, GraphParams};
use prism_core::linalg::symmetric_eigen;
use prism_core::spectral::{compare_spectra, rfft_magnitude};
use prism_core::stability::{build_horizon_map, certify_contraction, mode_damping};
use prism_core::synthetic::{generate_synthetic, SyntheticKind};
use prism_core::{Matrix, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn series(kind: &str, channels: usize, len: usize, seed: u64) -> Result<Matrix> {
    let kind: SyntheticKind = kind.parse()?;
    Ok(generate_synthetic(kind, channels, len, seed)?.values)
}

fn last_window_graph(values: &Matrix, window: usize, tau: f64) -> Result<DynamicGraph> {
    let n = values.rows();
    let window = window.clamp(2, n);
    let params = GraphParams {
        tau,
        ..GraphParams::default_for(values.cols())
    };
    params.validate(values.cols())?;
    build_graph(&values.slice_rows(n - window..n), n - 1, &params)
}

/// Correlation graph of the last `window` rows.
pub fn graph_value(kind: &str, channels: usize, len: usize, seed: u64, window: usize, tau: f64) -> Result<Value> {
    let g = last_window_graph(&series(kind, channels, len, seed)?, window, tau)?;
    let eig = symmetric_eigen(&g.normalized)?;
    Ok(json!({
        "corr": rows(&g.corr),
        "adjacency": rows(&g.adjacency),
        "normalized": rows(&g.normalized),
        "edges": g.edges(),
        "eigenvalues": eig.values,
        "params": g.params,
    }))
}

/// Per-mode damping, the contraction certificate and the norm of `M^s y0`.
#[allow(clippy::too_many_arguments)]
pub fn stability_value(
    kind: &str,
    channels: usize,
    len: usize,
    seed: u64,
    window: usize,
    tau: f64,
    kappa: f64,
    gamma: f64,
    steps: usize,
) -> Result<Value> {
    let values = series(kind, channels, len, seed)?;
    let g = last_window_graph(&values, window, tau)?;
    let map = build_horizon_map(&g.normalized, kappa, gamma)?;
    let report = certify_contraction(&map)?;
    let eig = symmetric_eigen(&g.normalized)?;
    let y0 = values.row(values.rows() - 1).to_vec();
    let norms: Vec<f64> = map
        .rollout(&y0, steps)
        .iter()
        .map(|y| y.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(json!({
        "eigenvalues": eig.values,
        "damping": mode_damping(kappa, gamma, &eig.values),
        "report": report,
        "rollout_norms": norms,
    }))
}

/// Centered moving average of odd width, truncated at the ends.
pub fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..x.len())
        .map(|t| {
            let (lo, hi) = (t.saturating_sub(half), (t + half + 1).min(x.len()));
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Spectrum of one channel against the spectrum of its moving average.
pub fn spectrum_value(
    kind: &str,
    channels: usize,
    len: usize,
    seed: u64,
    channel: usize,
    width: usize,
) -> Result<Value> {
    let values = series(kind, channels, len, seed)?;
    let x = values.column(channel.min(values.cols() - 1));
    let smooth = moving_average(&x, width.max(1));
    let (truth, pred) = (rfft_magnitude(&x)?, rfft_magnitude(&smooth)?);
    Ok(json!({
        "freqs": truth.freqs,
        "truth": truth.mags,
        "smoothed": pred.mags,
        "comparison": compare_spectra(&x, &smooth)?,
    }))
}

fn to_js(r: Result<Value>) -> std::result::Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn graph(
    kind: &str,
    channels: usize,
    len: usize,
    seed: u32,
    window: usize,
    tau: f64,
) -> std::result::Result<String, JsError> {
    to_js(graph_value(kind, channels, len, seed.into(), window, tau))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn stability(
    kind: &str,
    channels: usize,
    len: usize,
    seed: u32,
    window: usize,
    tau: f64,
    kappa: f64,
    gamma: f64,
    steps: usize,
) -> std::result::Result<String, JsError> {
    to_js(stability_value(
        kind,
        channels,
        len,
        seed.into(),
        window,
        tau,
        kappa,
        gamma,
        steps,
    ))
}

#[wasm_bindgen]
pub fn spectrum(
    kind: &str,
    channels: usize,
    len: usize,
    seed: u32,
    channel: usize,
    width: usize,
) -> std::result::Result<String, JsError> {
    to_js(spectrum_value(kind, channels, len, seed.into(), channel, width))
}
