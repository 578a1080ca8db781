//! Magnitude spectra of mean-removed series and truth/forecast comparison.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower edge of the tail band, as a fraction of Nyquist.
pub const TAIL_LO: f64 = 0.75;
const RATIO_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Cycles per sample, `k / n` for `k = 0..=n/2`.
    pub freqs: Vec<f64>,
    pub mags: Vec<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.mags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mags.is_empty()
    }

    /// Largest-magnitude bin other than DC; the lower index wins ties.
    pub fn peak_bin(&self) -> usize {
        let mut best = 1.min(self.mags.len() - 1);
        for k in 1..self.mags.len() {
            if self.mags[k] > self.mags[best] {
                best = k;
            }
        }
        best
    }

    pub fn total_energy(&self) -> f64 {
        self.mags.iter().map(|m| m * m).sum()
    }
}

/// Direct DFT of `series - mean(series)`. Twiddles are indexed by
/// `(k t) mod n`, so every bin uses the same `n` sines and cosines.
pub fn rfft_magnitude(series: &[f64]) -> Result<Spectrum> {
    let n = series.len();
    if n < 4 {
        return Err(Error::TooShort(format!("spectrum needs at least 4 samples, got {n}")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let x: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|r| {
            let w = 2.0 * PI * r as f64 / n as f64;
            (w.cos(), w.sin())
        })
        .unzip();
    let bins = n / 2 + 1;
    let mut mags = Vec::with_capacity(bins);
    for k in 0..bins {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let r = (k * t) % n;
            re += v * cos[r];
            im -= v * sin[r];
        }
        mags.push(re.hypot(im));
    }
    let freqs = (0..bins).map(|k| k as f64 / n as f64).collect();
    Ok(Spectrum { freqs, mags })
}

/// Sum of `mags²` over bins whose frequency, as a fraction of Nyquist, lies
/// in `[lo, hi)`. The Nyquist bin itself belongs to any band with `hi = 1`.
pub fn band_energy(spec: &Spectrum, lo: f64, hi: f64) -> Result<f64> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::invalid(format!(
            "band [{lo}, {hi}) must satisfy 0 <= lo < hi <= 1"
        )));
    }
    let nyquist = 0.5;
    let mut energy = 0.0;
    let mut hit = false;
    for (f, m) in spec.freqs.iter().zip(&spec.mags) {
        let frac = f / nyquist;
        if frac >= lo && (frac < hi || (hi == 1.0 && frac <= 1.0)) {
            energy += m * m;
            hit = true;
        }
    }
    if !hit {
        return Err(Error::invalid(format!("band [{lo}, {hi}) contains no frequency bins")));
    }
    Ok(energy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRatio {
    pub lo: f64,
    pub hi: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumComparison {
    pub fundamental_match: bool,
    pub truth_peak_bin: usize,
    pub pred_peak_bin: usize,
    pub tail_ratio: f64,
    pub per_band_ratios: Vec<BandRatio>,
}

const QUARTILES: [(f64, f64); 4] = [(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)];

pub fn compare_spectra(truth: &[f64], pred: &[f64]) -> Result<SpectrumComparison> {
    if truth.len() != pred.len() {
        return Err(Error::Shape {
            op: "compare_spectra",
            lhs: vec![truth.len()],
            rhs: vec![pred.len()],
        });
    }
    let st = rfft_magnitude(truth)?;
    let sp = rfft_magnitude(pred)?;
    let ratio = |lo, hi| -> Result<f64> { Ok(band_energy(&sp, lo, hi)? / band_energy(&st, lo, hi)?.max(RATIO_FLOOR)) };
    let per_band_ratios = QUARTILES
        .iter()
        .filter_map(|&(lo, hi)| ratio(lo, hi).ok().map(|r| BandRatio { lo, hi, ratio: r }))
        .collect();
    let (truth_peak_bin, pred_peak_bin) = (st.peak_bin(), sp.peak_bin());
    Ok(SpectrumComparison {
        fundamental_match: truth_peak_bin == pred_peak_bin,
        truth_peak_bin,
        pred_peak_bin,
        tail_ratio: ratio(TAIL_LO, 1.0)?,
        per_band_ratios,
    })
}

pub fn write_spectrum_csv(path: impl AsRef<Path>, spec: &Spectrum) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_spectrum_to(file, spec)
}

pub fn write_spectrum_to(writer: impl std::io::Write, spec: &Spectrum) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["freq", "magnitude"])?;
    for (f, m) in spec.freqs.iter().zip(&spec.mags) {
        w.write_record([f.to_string(), m.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<spectrum csv>", e))?;
    Ok(())
}
