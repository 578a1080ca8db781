//! Synthetic series with known structure: a contracting reaction-diffusion
//! process on a ring, two independent clusters of sinusoids, and channel pairs
//! with a known integer lag.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::normalize;
use crate::matrix::Matrix;

pub const MIN_CHANNELS: usize = 2;
pub const MIN_LEN: usize = 200;
const BURN_IN: usize = 200;
/// Periods of the two sine clusters.
pub const CLUSTER_PERIODS: [f64; 2] = [24.0, 40.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    CoupledRd,
    ClusteredSines,
    ShiftedPairs,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 3] = [Self::CoupledRd, Self::ClusteredSines, Self::ShiftedPairs];

    pub fn name(self) -> &'static str {
        match self {
            Self::CoupledRd => "coupled_rd",
            Self::ClusteredSines => "clustered_sines",
            Self::ShiftedPairs => "shifted_pairs",
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown synthetic kind '{s}' (expected coupled_rd, clustered_sines or shifted_pairs)"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOptions {
    /// Innovation std for `coupled_rd`, observation noise std otherwise.
    pub noise: f64,
    pub kappa: f64,
    pub gamma: f64,
    /// Lag of the follower in each `shifted_pairs` pair.
    pub lag: usize,
    /// Per-entry probability of an additive spike (`coupled_rd` only).
    pub spike_rate: f64,
    pub spike_magnitude: f64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            noise: 0.3,
            kappa: 0.3,
            gamma: 0.1,
            lag: 3,
            spike_rate: 0.0,
            spike_magnitude: 0.0,
        }
    }
}

impl SyntheticOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!(
                "noise = {} must be a finite non-negative std",
                self.noise
            )));
        }
        if !(self.kappa > 0.0 && self.gamma > 0.0 && self.kappa + self.gamma < 1.0) {
            return Err(Error::invalid(format!(
                "need kappa, gamma > 0 and kappa + gamma < 1, got {} and {}",
                self.kappa, self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.spike_rate) || !self.spike_magnitude.is_finite() {
            return Err(Error::invalid("spike_rate must lie in [0, 1] with a finite magnitude"));
        }
        if self.lag == 0 {
            return Err(Error::invalid("lag must be positive"));
        }
        Ok(())
    }
}

pub fn generate_synthetic(kind: SyntheticKind, channels: usize, len: usize, seed: u64) -> Result<Dataset> {
    generate_with(kind, channels, len, seed, &SyntheticOptions::default())
}

pub fn generate_with(
    kind: SyntheticKind,
    channels: usize,
    len: usize,
    seed: u64,
    opts: &SyntheticOptions,
) -> Result<Dataset> {
    if channels < MIN_CHANNELS || len < MIN_LEN {
        return Err(Error::invalid(format!(
            "synthetic series need D >= {MIN_CHANNELS} and T >= {MIN_LEN}, got D = {channels}, T = {len}"
        )));
    }
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = match kind {
        SyntheticKind::CoupledRd => coupled_rd(channels, len, opts, &mut rng),
        SyntheticKind::ClusteredSines => clustered_sines(channels, len, opts, &mut rng),
        SyntheticKind::ShiftedPairs => shifted_pairs(channels, len, opts, &mut rng),
    };
    Dataset::from_matrix(values)
}

/// Unweighted cycle `0 - 1 - ... - (D-1) - 0`; a single edge when `D = 2`.
pub fn ring_adjacency(channels: usize) -> Matrix {
    let mut a = Matrix::zeros(channels, channels);
    for i in 0..channels {
        let j = (i + 1) % channels;
        if i != j {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
    }
    a
}

/// `(1 - γ - κ) I + κ Ā` for the normalized ring.
pub fn coupled_rd_map(channels: usize, kappa: f64, gamma: f64) -> Matrix {
    let a_bar = normalize(&ring_adjacency(channels));
    Matrix::from_fn(channels, channels, |i, j| {
        kappa * a_bar[(i, j)] + if i == j { 1.0 - gamma - kappa } else { 0.0 }
    })
}

fn apply(m: &Matrix, y: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(y).map(|(a, b)| a * b).sum())
        .collect()
}

/// Noise-free runs start from a standard normal state and decay; noisy runs
/// discard a burn-in so the series starts near stationarity.
fn coupled_rd(d: usize, len: usize, opts: &SyntheticOptions, rng: &mut ChaCha8Rng) -> Matrix {
    let m = coupled_rd_map(d, opts.kappa, opts.gamma);
    let mut y: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let noisy = opts.noise > 0.0;
    let burn = if noisy { BURN_IN } else { 0 };
    let mut out = Matrix::zeros(len, d);
    for step in 0..burn + len {
        if step >= burn {
            out.row_mut(step - burn).copy_from_slice(&y);
        }
        y = apply(&m, &y);
        if noisy {
            for v in &mut y {
                *v += opts.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    if opts.spike_rate > 0.0 {
        for t in 0..len {
            for j in 0..d {
                if rng.random::<f64>() < opts.spike_rate {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    out[(t, j)] += sign * opts.spike_magnitude;
                }
            }
        }
    }
    out
}

/// Channels `[0, ceil(D/2))` follow one sinusoid, the rest another with a
/// different period, each with a random gain in `[0.8, 1.2]` plus noise.
fn clustered_sines(d: usize, len: usize, opts: &SyntheticOptions, rng: &mut ChaCha8Rng) -> Matrix {
    let split = d.div_ceil(2);
    let phases = [rng.random::<f64>() * 2.0 * PI, rng.random::<f64>() * 2.0 * PI];
    let gains: Vec<f64> = (0..d).map(|_| 0.8 + 0.4 * rng.random::<f64>()).collect();
    let noise = Normal::new(0.0, opts.noise).expect("validated std");
    let mut out = Matrix::zeros(len, d);
    for t in 0..len {
        for j in 0..d {
            let c = usize::from(j >= split);
            let base = (2.0 * PI * t as f64 / CLUSTER_PERIODS[c] + phases[c]).sin();
            out[(t, j)] = gains[j] * base + rng.sample(noise);
        }
    }
    out
}

/// Leader channel `2k` is a random sum of three sinusoids plus noise; follower
/// `2k + 1` repeats it `lag` steps later with small noise. An odd last channel
/// is an independent leader.
fn shifted_pairs(d: usize, len: usize, opts: &SyntheticOptions, rng: &mut ChaCha8Rng) -> Matrix {
    let lag = opts.lag;
    let follower_noise = Normal::new(0.0, 0.05).expect("valid std");
    let leader_noise = Normal::new(0.0, opts.noise.max(0.1)).expect("valid std");
    let mut out = Matrix::zeros(len, d);
    for lead in (0..d).step_by(2) {
        let tones: Vec<(f64, f64)> = (0..3)
            .map(|_| (rng.random_range(15.0..60.0), rng.random::<f64>() * 2.0 * PI))
            .collect();
        let signal: Vec<f64> = (0..len + lag)
            .map(|s| {
                let t = s as f64 - lag as f64;
                tones.iter().map(|(p, ph)| (2.0 * PI * t / p + ph).sin()).sum::<f64>() + rng.sample(leader_noise)
            })
            .collect();
        for t in 0..len {
            out[(t, lead)] = signal[t + lag];
            if lead + 1 < d {
                out[(t, lead + 1)] = signal[t] + rng.sample(follower_noise);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::estimate_integer_lags;
    use crate::graph::{build_graph, GraphParams};

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn argument_checks() {
        assert!(generate_synthetic(SyntheticKind::CoupledRd, 1, 500, 0).is_err());
        assert!(generate_synthetic(SyntheticKind::CoupledRd, 4, 199, 0).is_err());
        assert!("bogus".parse::<SyntheticKind>().is_err());
        for k in SyntheticKind::ALL {
            assert_eq!(k.name().parse::<SyntheticKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        let bad = SyntheticOptions {
            kappa: 0.6,
            gamma: 0.5,
            ..Default::default()
        };
        assert!(generate_with(SyntheticKind::CoupledRd, 4, 300, 0, &bad).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        for k in SyntheticKind::ALL {
            let a = generate_synthetic(k, 5, 300, 9).unwrap();
            let b = generate_synthetic(k, 5, 300, 9).unwrap();
            let c = generate_synthetic(k, 5, 300, 10).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.values, c.values);
            assert_eq!(a.values.shape(), (300, 5));
        }
    }

    #[test]
    fn ring_map_rows() {
        let a = ring_adjacency(5);
        assert!((0..5).all(|i| a.row(i).iter().sum::<f64>() == 2.0 && a[(i, i)] == 0.0));
        let two = ring_adjacency(2);
        assert_eq!(two.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
        // Regular ring: Ā has unit row sums, so M maps constants to (1 - γ) times themselves.
        let m = coupled_rd_map(6, 0.3, 0.1);
        assert!((0..6).all(|i| (m.row(i).iter().sum::<f64>() - 0.9).abs() < 1e-12));
    }

    #[test]
    fn noiseless_decay_is_geometric() {
        let opts = SyntheticOptions {
            noise: 0.0,
            ..Default::default()
        };
        for d in [2, 3, 8] {
            let ds = generate_with(SyntheticKind::CoupledRd, d, 200, 4, &opts).unwrap();
            for t in 0..199 {
                let (now, next) = (norm(ds.values.row(t)), norm(ds.values.row(t + 1)));
                assert!(next <= (1.0 - opts.gamma) * now + 1e-12, "d={d} t={t}");
            }
            let first = norm(ds.values.row(0));
            assert!(norm(ds.values.row(199)) <= 0.9f64.powi(199) * first + 1e-12);
        }
    }

    #[test]
    fn spikes_are_sparse_and_large() {
        let clean = generate_synthetic(SyntheticKind::CoupledRd, 8, 1000, 3).unwrap();
        let opts = SyntheticOptions {
            spike_rate: 0.02,
            spike_magnitude: 4.0,
            ..Default::default()
        };
        let spiky = generate_with(SyntheticKind::CoupledRd, 8, 1000, 3, &opts).unwrap();
        let diffs: Vec<f64> = clean
            .values
            .as_slice()
            .iter()
            .zip(spiky.values.as_slice())
            .map(|(a, b)| (a - b).abs())
            .filter(|d| *d > 0.0)
            .collect();
        assert!(diffs.iter().all(|d| (d - 4.0).abs() < 1e-9));
        let rate = diffs.len() as f64 / 8000.0;
        assert!((0.01..0.03).contains(&rate), "rate {rate}");
    }

    #[test]
    fn clusters_are_recovered() {
        for seed in 0..3 {
            let ds = generate_synthetic(SyntheticKind::ClusteredSines, 8, 500, seed).unwrap();
            let g = build_graph(&ds.values, 499, &GraphParams::default_for(8)).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    let same = (i < 4) == (j < 4);
                    if !same {
                        assert_eq!(g.adjacency[(i, j)], 0.0, "seed {seed} edge ({i},{j})");
                    }
                }
            }
            assert!(g.edges().iter().all(|&(i, j)| (i < 4) == (j < 4)));
            assert!(!g.edges().is_empty());
        }
    }

    #[test]
    fn pair_lags_are_recovered() {
        for seed in 0..5 {
            let ds = generate_synthetic(SyntheticKind::ShiftedPairs, 5, 400, seed).unwrap();
            let lags = estimate_integer_lags(&ds.values, 5).unwrap();
            for k in [0, 2] {
                assert_eq!(lags[k][k + 1], 3, "seed {seed}");
                assert_eq!(lags[k + 1][k], -3, "seed {seed}");
            }
        }
        let opts = SyntheticOptions {
            lag: 1,
            ..Default::default()
        };
        let ds = generate_with(SyntheticKind::ShiftedPairs, 2, 300, 0, &opts).unwrap();
        assert_eq!(estimate_integer_lags(&ds.values, 4).unwrap()[0][1], 1);
    }
}
